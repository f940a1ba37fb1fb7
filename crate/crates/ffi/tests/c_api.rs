use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use personvlad::checkpoint::save_checkpoint;
use personvlad::eval::{cmc_curve, mean_ap, tracklet_descriptor, Entry, RetrievalIndex};
use personvlad::model::PersonVladNet;
use personvlad::tensor::Tensor;
use personvlad::train::clip_split;
use personvlad::verify::composed_check_config;
use personvlad_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pv_last_error()) }.to_string_lossy().into_owned()
}

fn small_net(dir: &Path) -> (PersonVladNet<f32>, CString) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = PersonVladNet::<f32>::new(composed_check_config(), &mut rng).unwrap();
    let path = dir.join("model.pvck");
    save_checkpoint(&path, &net, None).unwrap();
    (net, CString::new(path.to_str().unwrap()).unwrap())
}

fn load(path: &CString) -> *mut PvModel {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { pv_model_load(path.as_ptr(), &mut model) }, PvStatus::PvOk, "{}", last_error());
    assert!(!model.is_null());
    model
}

fn random_values(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn handle_reports_shape_and_matches_library_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let (net, path) = small_net(dir.path());
    let model = load(&path);
    let dim = unsafe { pv_model_descriptor_dim(model) };
    assert_eq!(dim, net.descriptor_dim());
    let mut shape = [0usize; 3];
    assert_eq!(unsafe { pv_model_input_shape(model, shape.as_mut_ptr()) }, PvStatus::PvOk);
    assert_eq!(shape, net.config().input);

    let [l, h, w] = shape;
    let per = 3 * l * h * w;
    let data = random_values(2 * per, 1);
    let mut out = vec![0.0f32; 2 * dim];
    let status = unsafe { pv_model_embed_clips(model, data.as_ptr(), 2, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, PvStatus::PvOk, "{}", last_error());
    let clips: Vec<Tensor<f32>> = data.chunks(per).map(|c| Tensor::new(&[3, l, h, w], c.to_vec()).unwrap()).collect();
    let want = net.embed(&clips.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(out, want.concat());
    unsafe { pv_model_free(model) };
}

#[test]
fn tracklet_descriptor_matches_clip_average() {
    let dir = tempfile::tempdir().unwrap();
    let (net, path) = small_net(dir.path());
    let model = load(&path);
    let [l, h, w] = net.config().input;
    let frames = 13;
    let data = random_values(3 * frames * h * w, 2);
    let mut out = vec![0.0f32; net.descriptor_dim()];
    let status = unsafe { pv_model_describe_tracklet(model, data.as_ptr(), frames, 4, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, PvStatus::PvOk, "{}", last_error());
    let tracklet = Tensor::new(&[3, frames, h, w], data).unwrap();
    let clips = clip_split(&tracklet, l, 4).unwrap();
    let rows = net.embed(&clips.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(out, tracklet_descriptor(&rows).unwrap());
    let norm: f32 = out.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
    unsafe { pv_model_free(model) };
}

#[test]
fn failures_set_codes_and_messages() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.pvck").unwrap();
    assert_eq!(unsafe { pv_model_load(missing.as_ptr(), &mut model) }, PvStatus::PvErrIo);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/model.pvck"));

    assert_eq!(unsafe { pv_model_load(ptr::null(), &mut model) }, PvStatus::PvErrNullPointer);
    assert_eq!(unsafe { pv_model_descriptor_dim(ptr::null()) }, 0);
    let mut shape = [0usize; 3];
    assert_eq!(unsafe { pv_model_input_shape(ptr::null(), shape.as_mut_ptr()) }, PvStatus::PvErrNullPointer);

    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.pvck");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pv_model_load(garbage.as_ptr(), &mut model) }, PvStatus::PvErrFormat);

    let (_, path) = small_net(dir.path());
    let model = load(&path);
    assert_eq!(last_error(), "");
    let mut out = vec![0.0f32; 3];
    let status = unsafe { pv_model_embed_clips(model, ptr::null(), 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, PvStatus::PvErrInvalidArgument);
    assert!(last_error().contains("out_len"));
    unsafe { pv_model_free(model) };
    unsafe { pv_model_free(ptr::null_mut()) };
}

#[test]
fn retrieval_metrics_match_library() {
    let dim = 4;
    let probes = random_values(3 * dim, 5);
    let probe_ids = [0i64, 1, 2];
    let probe_cams = [1u32, 1, 1];
    let gallery = random_values(6 * dim, 6);
    let gallery_ids = [2i64, 0, 1, 1, 2, 0];
    let gallery_cams = [0u32, 0, 0, 2, 0, 1];
    let mut cmc = [0.0f64; 5];
    let mut map = 0.0f64;
    let status = unsafe {
        pv_retrieval_metrics(
            probes.as_ptr(),
            probe_ids.as_ptr(),
            probe_cams.as_ptr(),
            3,
            gallery.as_ptr(),
            gallery_ids.as_ptr(),
            gallery_cams.as_ptr(),
            6,
            dim,
            5,
            cmc.as_mut_ptr(),
            &mut map,
        )
    };
    assert_eq!(status, PvStatus::PvOk, "{}", last_error());
    let entries = |d: &[f32], ids: &[i64], cams: &[u32]| -> Vec<Entry> {
        (0..ids.len())
            .map(|i| Entry { identity: ids[i], camera: cams[i], descriptor: d[i * dim..(i + 1) * dim].to_vec() })
            .collect()
    };
    let index = RetrievalIndex {
        probes: entries(&probes, &probe_ids, &probe_cams),
        gallery: entries(&gallery, &gallery_ids, &gallery_cams),
    };
    assert_eq!(cmc.to_vec(), cmc_curve(&index, 5).unwrap());
    assert_eq!(map, mean_ap(&index).unwrap());

    // Identity 3 has no gallery entry.
    let lonely = [3i64, 1, 2];
    let status = unsafe {
        pv_retrieval_metrics(
            probes.as_ptr(),
            lonely.as_ptr(),
            probe_cams.as_ptr(),
            3,
            gallery.as_ptr(),
            gallery_ids.as_ptr(),
            gallery_cams.as_ptr(),
            6,
            dim,
            5,
            cmc.as_mut_ptr(),
            &mut map,
        )
    };
    assert_eq!(status, PvStatus::PvErrMissingIdentities);
    assert!(last_error().contains('3'));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/personvlad.h")).unwrap();
    for name in [
        "pv_last_error",
        "pv_model_load",
        "pv_model_free",
        "pv_model_descriptor_dim",
        "pv_model_input_shape",
        "pv_model_embed_clips",
        "pv_model_describe_tracklet",
        "pv_retrieval_metrics",
        "PV_ERR_MISSING_IDENTITIES",
        "typedef struct PvModel PvModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"personvlad.h\"\n\
         int probe(const char *path) {\n\
           PvModel *m = 0;\n\
           if (pv_model_load(path, &m) != PV_OK) return (int)pv_last_error()[0];\n\
           size_t dim = pv_model_descriptor_dim(m);\n\
           pv_model_free(m);\n\
           return (int)dim;\n\
         }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
