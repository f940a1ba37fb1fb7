//! Slow, direct reference implementations used to cross-check the fast
//! paths. Each is written from the defining formula with plain loops.

use crate::eval::RetrievalIndex;
use crate::tensor::Tensor;

/// Stride-1 zero-padded 3D convolution by explicit summation.
pub fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], pad: [usize; 3]) -> Tensor<f64> {
    let [n, c, l, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
    let [o, kd, kh, kw] = [w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]];
    let ol = l + 2 * pad[0] + 1 - kd;
    let oh = h + 2 * pad[1] + 1 - kh;
    let ow = wd + 2 * pad[2] + 1 - kw;
    let mut out = Vec::with_capacity(n * o * ol * oh * ow);
    for b in 0..n {
        for oc in 0..o {
            for z in 0..ol {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = bias.get(oc).copied().unwrap_or(0.0);
                        for ic in 0..c {
                            for dz in 0..kd {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let (iz, iy, ix) = (z + dz, y + dy, xx + dx);
                                        if iz < pad[0] || iy < pad[1] || ix < pad[2] {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz - pad[0], iy - pad[1], ix - pad[2]);
                                        if iz >= l || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        s += x.get(&[b, ic, iz, iy, ix]) * w.get(&[oc, ic, dz, dy, dx]);
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, o, ol, oh, ow], out).expect("extents computed above")
}

/// Non-overlapping max pooling over floor-sized output extents.
pub fn naive_maxpool3d(x: &Tensor<f64>, k: [usize; 3]) -> Tensor<f64> {
    let [n, c, l, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
    let (ol, oh, ow) = (l / k[0], h / k[1], w / k[2]);
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for z in 0..ol {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for dz in 0..k[0] {
                            for dy in 0..k[1] {
                                for dx in 0..k[2] {
                                    m = m.max(x.get(&[b, ch, z * k[0] + dz, y * k[1] + dy, xx * k[2] + dx]));
                                }
                            }
                        }
                        out.push(m);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, ol, oh, ow], out).expect("extents computed above")
}

/// Clip start frames by scanning every candidate start: a start is taken
/// when it lies on the stride grid and fits; one tail window is added when
/// the last frame is still uncovered.
pub fn window_starts(len: usize, clip_len: usize, overlap: usize) -> Vec<usize> {
    if len <= clip_len {
        return vec![0];
    }
    let stride = clip_len - overlap;
    let mut starts = Vec::new();
    for s in 0..len {
        if s % stride == 0 && s + clip_len <= len {
            starts.push(s);
        }
    }
    let covered = starts.iter().any(|&s| s + clip_len >= len);
    if !covered {
        starts.push(len - clip_len);
    }
    starts
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// 1-based rank of every eligible gallery entry for probe `p`: one plus the
/// number of eligible entries strictly ahead of it (closer, or equally
/// close with a lower index).
fn pairwise_ranks(index: &RetrievalIndex, p: usize) -> Vec<(usize, bool)> {
    let probe = &index.probes[p];
    let eligible: Vec<usize> = (0..index.gallery.len())
        .filter(|&g| {
            let e = &index.gallery[g];
            !(e.identity == probe.identity && e.camera == probe.camera)
        })
        .collect();
    let dist: Vec<f64> = eligible
        .iter()
        .map(|&g| distance(&probe.descriptor, &index.gallery[g].descriptor))
        .collect();
    eligible
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let ahead = (0..eligible.len())
                .filter(|&j| dist[j] < dist[i] || (dist[j] == dist[i] && j < i))
                .count();
            (ahead + 1, index.gallery[g].identity == probe.identity)
        })
        .collect()
}

/// CMC by counting, per probe, the best rank of any correct entry.
pub fn brute_cmc(index: &RetrievalIndex, max_rank: usize) -> Vec<f64> {
    let mut cmc = vec![0.0; max_rank];
    for p in 0..index.probes.len() {
        let best = pairwise_ranks(index, p)
            .into_iter()
            .filter(|&(_, hit)| hit)
            .map(|(r, _)| r)
            .min()
            .unwrap_or(usize::MAX);
        for (n, slot) in cmc.iter_mut().enumerate() {
            if best <= n + 1 {
                *slot += 1.0;
            }
        }
    }
    cmc.iter().map(|v| v / index.probes.len() as f64).collect()
}

/// mAP where each relevant entry at rank `r` contributes
/// `(relevant entries ranked <= r) / r`.
pub fn brute_map(index: &RetrievalIndex) -> f64 {
    let mut total = 0.0;
    for p in 0..index.probes.len() {
        let ranks = pairwise_ranks(index, p);
        let relevant: Vec<usize> = ranks.iter().filter(|e| e.1).map(|e| e.0).collect();
        let ap: f64 = relevant
            .iter()
            .map(|&r| relevant.iter().filter(|&&q| q <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / relevant.len() as f64;
        total += ap;
    }
    total / index.probes.len() as f64
}
