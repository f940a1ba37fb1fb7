//! Tracklet descriptors, probe/gallery construction, Euclidean ranking,
//! CMC and mAP.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PersonVladNet;
use crate::tensor::{load_pvt, save_pvt, Tensor};
use crate::train::{clip_split, Split, Tracklet};

/// Mean of clip descriptors, re-normalized to unit length (zero stays
/// zero).
pub fn tracklet_descriptor(clips: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = clips.first().ok_or_else(|| Error::invalid("no clip descriptors to average"))?;
    let d = first.len();
    if clips.iter().any(|c| c.len() != d) {
        return Err(Error::invalid("clip descriptors differ in length"));
    }
    let mut mean = vec![0.0f64; d];
    for c in clips {
        mean.iter_mut().zip(c).for_each(|(m, &v)| *m += v as f64);
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
    Ok(mean.into_iter().map(|v| (v * scale) as f32).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorMeta {
    pub identity: i64,
    pub camera: u32,
    pub tracklet_id: usize,
    #[serde(default)]
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackletDescriptor {
    pub meta: DescriptorMeta,
    pub descriptor: Vec<f32>,
}

/// Clips of `tracklet` through `net`, averaged.
pub fn describe_tracklet(net: &PersonVladNet<f32>, tracklet: &Tracklet, clip_len: usize, overlap: usize) -> Result<TrackletDescriptor> {
    let clips = clip_split(&tracklet.frames, clip_len, overlap)?;
    let mut per_clip = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(8) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        per_clip.extend(net.embed(&refs)?);
    }
    let r = &tracklet.record;
    Ok(TrackletDescriptor {
        meta: DescriptorMeta {
            identity: r.identity,
            camera: r.camera,
            tracklet_id: r.id,
            split: r.split,
        },
        descriptor: tracklet_descriptor(&per_clip)?,
    })
}

/// `t{id}.pvt` plus a `t{id}.json` sidecar for each descriptor.
pub fn save_descriptors(dir: &Path, descriptors: &[TrackletDescriptor]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for d in descriptors {
        let stem = format!("t{:04}", d.meta.tracklet_id);
        save_pvt(&dir.join(format!("{stem}.pvt")), &Tensor::from_vec(d.descriptor.clone()))?;
        let side = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&d.meta)? + "\n";
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Every sidecar-described descriptor in `dir`, ordered by tracklet id.
/// Config echoes (`*.config.json`) are skipped.
pub fn load_descriptors(dir: &Path) -> Result<Vec<TrackletDescriptor>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !name.ends_with(".json") || name.ends_with(".config.json") {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DescriptorMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let t = load_pvt(&path.with_extension("pvt"))?;
        if t.rank() != 1 {
            return Err(Error::format(path.display().to_string(), "descriptor must be a vector"));
        }
        out.push(TrackletDescriptor {
            meta,
            descriptor: t.into_data(),
        });
    }
    out.sort_by_key(|d| d.meta.tracklet_id);
    if out.is_empty() {
        return Err(Error::Config(format!("no descriptors found in {}", dir.display())));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Random,
    All,
}

/// `Random`: one uniformly drawn item. `All`: every item.
pub fn strategy_select<'a, T>(items: &'a [T], mode: Selection, rng: &mut impl Rng) -> Result<Vec<&'a T>> {
    if items.is_empty() {
        return Err(Error::invalid("strategy_select needs at least one tracklet"));
    }
    Ok(match mode {
        Selection::All => items.iter().collect(),
        Selection::Random => vec![&items[rng.gen_range(0..items.len())]],
    })
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Gallery indices by ascending Euclidean distance; ties keep index order.
pub fn rank_euclidean(probe: &[f32], gallery: &[&[f32]]) -> Result<Vec<usize>> {
    if let Some(bad) = gallery.iter().find(|g| g.len() != probe.len()) {
        return Err(Error::shape("rank_euclidean", &[probe.len()], &[bad.len()]));
    }
    let dist: Vec<f64> = gallery.iter().map(|g| squared_distance(probe, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub identity: i64,
    pub camera: u32,
    pub descriptor: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalIndex {
    pub probes: Vec<Entry>,
    pub gallery: Vec<Entry>,
}

/// Per probe: gallery identities in ranked order, with same-identity
/// same-camera entries removed.
fn ranked_identities(index: &RetrievalIndex) -> Result<Vec<Vec<i64>>> {
    let gallery: Vec<&[f32]> = index.gallery.iter().map(|g| g.descriptor.as_slice()).collect();
    index
        .probes
        .par_iter()
        .map(|p| {
            let order = rank_euclidean(&p.descriptor, &gallery)?;
            Ok(order
                .into_iter()
                .map(|i| &index.gallery[i])
                .filter(|g| !(g.identity == p.identity && g.camera == p.camera))
                .map(|g| g.identity)
                .collect())
        })
        .collect()
}

/// Identities of probes with no usable gallery match, ascending.
pub fn missing_identities(index: &RetrievalIndex) -> Vec<i64> {
    let mut missing: Vec<i64> = index
        .probes
        .iter()
        .filter(|p| {
            !index
                .gallery
                .iter()
                .any(|g| g.identity == p.identity && g.camera != p.camera)
        })
        .map(|p| p.identity)
        .collect();
    missing.sort_unstable();
    missing.dedup();
    missing
}

fn require_matches(index: &RetrievalIndex) -> Result<()> {
    let missing = missing_identities(index);
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingIdentities(missing))
    }
}

/// `cmc[n - 1]` is the fraction of probes whose first correct match is at
/// rank `n` or better.
pub fn cmc_curve(index: &RetrievalIndex, max_rank: usize) -> Result<Vec<f64>> {
    require_matches(index)?;
    if index.probes.is_empty() {
        return Err(Error::invalid("no probes"));
    }
    let mut hits = vec![0usize; max_rank];
    for (p, ranked) in index.probes.iter().zip(ranked_identities(index)?) {
        let first = ranked.iter().position(|&g| g == p.identity).expect("match exists");
        if first < max_rank {
            hits[first] += 1;
        }
    }
    let n = index.probes.len() as f64;
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect())
}

/// Mean over probes of the average precision at every relevant rank.
pub fn mean_ap(index: &RetrievalIndex) -> Result<f64> {
    require_matches(index)?;
    if index.probes.is_empty() {
        return Err(Error::invalid("no probes"));
    }
    let ranked = ranked_identities(index)?;
    let total: f64 = index
        .probes
        .iter()
        .zip(&ranked)
        .map(|(p, r)| {
            let mut found = 0usize;
            let mut sum = 0.0;
            for (pos, &g) in r.iter().enumerate() {
                if g == p.identity {
                    found += 1;
                    sum += found as f64 / (pos + 1) as f64;
                }
            }
            sum / found as f64
        })
        .sum();
    Ok(total / index.probes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub probe: Selection,
    pub gallery: Selection,
    /// Probes come from this camera and the gallery from the others.
    pub probe_camera: u32,
    /// Draw probes from held-out tracklets only.
    pub heldout_probes: bool,
    pub repeats: usize,
    pub max_rank: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            probe: Selection::Random,
            gallery: Selection::All,
            probe_camera: 1,
            heldout_probes: true,
            repeats: 10,
            max_rank: 20,
        }
    }
}

fn average(items: &[&TrackletDescriptor]) -> Result<Vec<f32>> {
    let v: Vec<Vec<f32>> = items.iter().map(|d| d.descriptor.clone()).collect();
    tracklet_descriptor(&v)
}

/// Probe and gallery pools grouped per identity (and camera for the
/// gallery), reduced by each side's selection rule. Unlabeled descriptors
/// only ever enter the gallery, one entry each.
pub fn build_index(descriptors: &[TrackletDescriptor], protocol: &Protocol, rng: &mut impl Rng) -> Result<RetrievalIndex> {
    let mut probe_pool: BTreeMap<i64, Vec<&TrackletDescriptor>> = BTreeMap::new();
    let mut gallery_pool: BTreeMap<(i64, u32), Vec<&TrackletDescriptor>> = BTreeMap::new();
    let mut index = RetrievalIndex::default();
    for d in descriptors {
        let m = &d.meta;
        if m.camera == protocol.probe_camera {
            let eligible = !protocol.heldout_probes || m.split == Split::Heldout;
            if m.identity >= 0 && eligible {
                probe_pool.entry(m.identity).or_default().push(d);
            }
        } else if m.identity < 0 {
            index.gallery.push(Entry {
                identity: m.identity,
                camera: m.camera,
                descriptor: d.descriptor.clone(),
            });
        } else {
            gallery_pool.entry((m.identity, m.camera)).or_default().push(d);
        }
    }
    for (&identity, items) in &probe_pool {
        let chosen = strategy_select(items, protocol.probe, rng)?;
        let flat: Vec<&TrackletDescriptor> = chosen.into_iter().copied().collect();
        index.probes.push(Entry {
            identity,
            camera: protocol.probe_camera,
            descriptor: average(&flat)?,
        });
    }
    for (&(identity, camera), items) in &gallery_pool {
        let chosen = strategy_select(items, protocol.gallery, rng)?;
        let flat: Vec<&TrackletDescriptor> = chosen.into_iter().copied().collect();
        index.gallery.push(Entry {
            identity,
            camera,
            descriptor: average(&flat)?,
        });
    }
    Ok(index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Probe identities with no gallery match; they were left out.
    pub missing: Vec<i64>,
    pub repeats: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (i, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, v);
        }
        let _ = writeln!(s, "map,{}", self.map);
        s
    }
}

/// Runs the protocol, averaging CMC and mAP over `repeats` draws when
/// either side is random.
pub fn evaluate(descriptors: &[TrackletDescriptor], protocol: &Protocol, seed: u64) -> Result<EvalReport> {
    if protocol.max_rank == 0 {
        return Err(Error::Config("max_rank must be positive".into()));
    }
    let random = protocol.probe == Selection::Random || protocol.gallery == Selection::Random;
    let repeats = if random { protocol.repeats.max(1) } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cmc = vec![0.0; protocol.max_rank];
    let mut map = 0.0;
    let mut missing = Vec::new();
    for _ in 0..repeats {
        let mut index = build_index(descriptors, protocol, &mut rng)?;
        if index.probes.is_empty() {
            let split = if protocol.heldout_probes { "held-out " } else { "" };
            return Err(Error::Config(format!(
                "no labeled {split}tracklets on probe camera {}",
                protocol.probe_camera
            )));
        }
        missing = missing_identities(&index);
        index.probes.retain(|p| !missing.contains(&p.identity));
        if index.probes.is_empty() {
            return Err(Error::MissingIdentities(missing));
        }
        for (acc, v) in cmc.iter_mut().zip(cmc_curve(&index, protocol.max_rank)?) {
            *acc += v;
        }
        map += mean_ap(&index)?;
    }
    let n = repeats as f64;
    Ok(EvalReport {
        cmc: cmc.into_iter().map(|v| v / n).collect(),
        map: map / n,
        missing,
        repeats,
    })
}

/// Rank-1 / mAP for the four probe x gallery selection pairs, laid out as
/// a 2 x 2 table.
pub fn strategy_table(descriptors: &[TrackletDescriptor], base: &Protocol, seed: u64) -> Result<String> {
    let modes = [Selection::Random, Selection::All];
    let name = |s: Selection| match s {
        Selection::Random => "random",
        Selection::All => "all",
    };
    let mut out = String::from("probe \\ gallery | random          | all\n");
    out.push_str("----------------+-------------------+------------------\n");
    for p in modes {
        let mut cells = Vec::new();
        for g in modes {
            let proto = Protocol {
                probe: p,
                gallery: g,
                ..base.clone()
            };
            let r = evaluate(descriptors, &proto, seed)?;
            cells.push(format!("R1 {:5.1} mAP {:5.1}", 100.0 * r.rank1(), 100.0 * r.map));
        }
        let _ = writeln!(out, "{:<15} | {} | {}", name(p), cells[0], cells[1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlad::random_unit_vectors;

    fn entry(identity: i64, camera: u32, descriptor: Vec<f32>) -> Entry {
        Entry {
            identity,
            camera,
            descriptor,
        }
    }

    #[test]
    fn averaging_clips() {
        let a = vec![0.6, 0.8];
        assert_eq!(tracklet_descriptor(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(tracklet_descriptor(&[a.clone(), a.clone()]).unwrap(), a);
        let m = tracklet_descriptor(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((m[0] - h).abs() < 1e-7 && (m[1] - h).abs() < 1e-7);
        assert!(tracklet_descriptor(&[]).is_err());
    }

    #[test]
    fn selection_modes() {
        let items = [1, 2, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(strategy_select(&items, Selection::All, &mut rng).unwrap().len(), 3);
        assert_eq!(strategy_select(&items[..1], Selection::Random, &mut rng).unwrap(), vec![&1]);
        let pick = |seed| *strategy_select(&items, Selection::Random, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()[0];
        assert_eq!(pick(7), pick(7));
    }

    #[test]
    fn ranking_basics() {
        let g = [vec![1.0f32, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let refs: Vec<&[f32]> = g.iter().map(Vec::as_slice).collect();
        assert_eq!(rank_euclidean(&[0.0, 1.0], &refs).unwrap()[0], 1);
        assert!(rank_euclidean(&[0.0], &refs).is_err());
        let tie = [vec![1.0f32], vec![1.0]];
        let refs: Vec<&[f32]> = tie.iter().map(Vec::as_slice).collect();
        assert_eq!(rank_euclidean(&[0.0], &refs).unwrap(), vec![0, 1]);
    }

    #[test]
    fn euclidean_and_dot_product_agree_on_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let units: Vec<Vec<f32>> = random_unit_vectors(21, 6, &mut rng)
            .into_iter()
            .map(|v| v.into_iter().map(|x| x as f32).collect())
            .collect();
        let refs: Vec<&[f32]> = units[1..].iter().map(Vec::as_slice).collect();
        let by_distance = rank_euclidean(&units[0], &refs).unwrap();
        let dot = |g: &[f32]| -> f64 { g.iter().zip(&units[0]).map(|(&a, &b)| a as f64 * b as f64).sum() };
        let mut by_dot: Vec<usize> = (0..refs.len()).collect();
        by_dot.sort_by(|&a, &b| dot(refs[b]).total_cmp(&dot(refs[a])));
        assert_eq!(by_distance, by_dot);
    }

    #[test]
    fn perfect_ranking_gives_ones() {
        let index = RetrievalIndex {
            probes: vec![entry(0, 1, vec![1.0, 0.0]), entry(1, 1, vec![0.0, 1.0])],
            gallery: vec![entry(0, 0, vec![1.0, 0.0]), entry(1, 0, vec![0.0, 1.0])],
        };
        assert_eq!(cmc_curve(&index, 2).unwrap(), vec![1.0, 1.0]);
        assert_eq!(mean_ap(&index).unwrap(), 1.0);
    }

    #[test]
    fn match_at_rank_three() {
        let index = RetrievalIndex {
            probes: vec![entry(0, 1, vec![0.0])],
            gallery: vec![
                entry(1, 0, vec![0.1]),
                entry(2, 0, vec![0.2]),
                entry(0, 0, vec![0.3]),
                entry(3, 0, vec![0.4]),
            ],
        };
        assert_eq!(cmc_curve(&index, 4).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn average_precision_closed_form() {
        let index = RetrievalIndex {
            probes: vec![entry(0, 1, vec![0.0])],
            gallery: vec![entry(0, 0, vec![0.1]), entry(1, 0, vec![0.2]), entry(0, 2, vec![0.3])],
        };
        assert!((mean_ap(&index).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn same_camera_same_identity_is_excluded() {
        let index = RetrievalIndex {
            probes: vec![entry(0, 1, vec![0.0])],
            gallery: vec![entry(0, 1, vec![0.0]), entry(1, 0, vec![0.1]), entry(0, 0, vec![0.2])],
        };
        assert_eq!(cmc_curve(&index, 2).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn missing_identity_is_listed() {
        let index = RetrievalIndex {
            probes: vec![entry(0, 1, vec![0.0]), entry(5, 1, vec![0.0])],
            gallery: vec![entry(0, 0, vec![0.1])],
        };
        match cmc_curve(&index, 1) {
            Err(Error::MissingIdentities(ids)) => assert_eq!(ids, vec![5]),
            other => panic!("{other:?}"),
        }
    }

    fn meta(identity: i64, camera: u32, id: usize, split: Split) -> DescriptorMeta {
        DescriptorMeta {
            identity,
            camera,
            tracklet_id: id,
            split,
        }
    }

    #[test]
    fn index_groups_and_averages() {
        let d = |m, v: Vec<f32>| TrackletDescriptor { meta: m, descriptor: v };
        let descs = vec![
            d(meta(0, 0, 0, Split::Train), vec![1.0, 0.0]),
            d(meta(0, 0, 1, Split::Train), vec![0.0, 1.0]),
            d(meta(0, 1, 2, Split::Heldout), vec![0.6, 0.8]),
            d(meta(0, 1, 3, Split::Train), vec![0.8, 0.6]),
            d(meta(-1, 0, 4, Split::Train), vec![-1.0, 0.0]),
        ];
        let proto = Protocol {
            probe: Selection::All,
            gallery: Selection::All,
            ..Protocol::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let index = build_index(&descs, &proto, &mut rng).unwrap();
        assert_eq!(index.probes.len(), 1);
        assert_eq!(index.probes[0].descriptor, vec![0.6, 0.8]);
        assert_eq!(index.gallery.len(), 2);
        let avg = &index.gallery.iter().find(|g| g.identity == 0).unwrap().descriptor;
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((avg[0] - h).abs() < 1e-7);

        let report = evaluate(&descs, &proto, 0).unwrap();
        assert_eq!(report.repeats, 1);
        assert_eq!(report.rank1(), 1.0);
        let csv = report.to_csv();
        assert!(csv.starts_with("rank,cmc\n1,1\n"));
        assert!(csv.ends_with("map,1\n"));
        let table = strategy_table(&descs, &proto, 0).unwrap();
        assert_eq!(table.lines().count(), 4);
    }
}
