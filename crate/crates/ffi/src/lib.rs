//! C interface: load a checkpoint behind an opaque handle, turn clips or
//! whole tracklets into descriptors, and score a retrieval problem.
//!
//! Every function returns a [`PvStatus`]; on failure the message is
//! available from [`pv_last_error`] on the same thread. Panics never cross
//! the boundary and are reported as `PV_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use personvlad::checkpoint::load_checkpoint;
use personvlad::eval::{cmc_curve, mean_ap, tracklet_descriptor, Entry, RetrievalIndex};
use personvlad::model::PersonVladNet;
use personvlad::tensor::Tensor;
use personvlad::train::clip_split;
use personvlad::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PvStatus {
    PvOk = 0,
    PvErrNullPointer = 1,
    PvErrInvalidArgument = 2,
    PvErrIo = 3,
    PvErrFormat = 4,
    PvErrMissingIdentities = 5,
    PvErrConfig = 6,
    PvErrPanic = 7,
}

/// Trained network loaded from a checkpoint. Create with
/// [`pv_model_load`], release with [`pv_model_free`].
pub struct PvModel {
    net: PersonVladNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(error: &Error) -> PvStatus {
    match error {
        Error::Io { .. } => PvStatus::PvErrIo,
        Error::Format { .. } | Error::Json(_) => PvStatus::PvErrFormat,
        Error::MissingIdentities(_) => PvStatus::PvErrMissingIdentities,
        Error::Config(_) | Error::Verification(_) => PvStatus::PvErrConfig,
        _ => PvStatus::PvErrInvalidArgument,
    }
}

struct Failure(PvStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PvStatus::PvErrNullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(PvStatus::PvErrInvalidArgument, message.into())
}

/// Runs `body`, records any failure for [`pv_last_error`] and converts it to
/// a status.
fn guarded(body: impl FnOnce() -> Result<(), Failure>) -> PvStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            PvStatus::PvOk
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PvStatus::PvErrPanic
        }
    }
}

unsafe fn model_ref<'a>(model: *const PvModel) -> Result<&'a PvModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn input_slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output_slice<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by the `train` command. On success `*out`
/// owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pv_model_load(path: *const c_char, out: *mut *mut PvModel) -> PvStatus {
    guarded(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let (net, _) = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(PvModel { net }));
        Ok(())
    })
}

/// Releases a handle from [`pv_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pv_model_free(model: *mut PvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of one descriptor, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pv_model_descriptor_dim(model: *const PvModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.descriptor_dim())
}

/// Writes the expected clip extent `(frames, height, width)` to `out[0..3]`.
///
/// # Safety
/// `model` must be a live handle and `out` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn pv_model_input_shape(model: *const PvModel, out: *mut usize) -> PvStatus {
    guarded(|| {
        let m = model_ref(model)?;
        output_slice(out, 3, "out")?.copy_from_slice(&m.net.config().input);
        Ok(())
    })
}

const EMBED_BATCH: usize = 8;

fn embed_all(net: &PersonVladNet<f32>, clips: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>, Failure> {
    let mut rows = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EMBED_BATCH) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        rows.extend(net.embed(&refs)?);
    }
    Ok(rows)
}

/// Embeds `clip_count` clips laid out as `[clip][channel 3][frame][row][col]`
/// with the extent from [`pv_model_input_shape`]. Writes
/// `clip_count * descriptor_dim` values to `out`.
///
/// # Safety
/// `clips` must hold `clip_count * 3 * frames * height * width` values and
/// `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn pv_model_embed_clips(
    model: *const PvModel,
    clips: *const f32,
    clip_count: usize,
    out: *mut f32,
    out_len: usize,
) -> PvStatus {
    guarded(|| {
        let net = &model_ref(model)?.net;
        let [l, h, w] = net.config().input;
        let per_clip = 3 * l * h * w;
        let dim = net.descriptor_dim();
        if out_len != clip_count * dim {
            return Err(invalid(format!("out_len is {out_len}, need {}", clip_count * dim)));
        }
        let data = input_slice(clips, clip_count * per_clip, "clips")?;
        let tensors = data
            .chunks(per_clip)
            .map(|c| Tensor::new(&[3, l, h, w], c.to_vec()))
            .collect::<personvlad::Result<Vec<_>>>()?;
        let rows = embed_all(net, &tensors)?;
        let out = output_slice(out, out_len, "out")?;
        for (dst, row) in out.chunks_mut(dim).zip(rows) {
            dst.copy_from_slice(&row);
        }
        Ok(())
    })
}

/// Descriptor of a whole tracklet laid out as `[channel 3][frame][row][col]`
/// with `frame_count` frames: split into clips of the model's length
/// overlapping by `overlap` frames, embedded, averaged and renormalized.
/// Writes `descriptor_dim` values to `out`.
///
/// # Safety
/// `frames` must hold `3 * frame_count * height * width` values and `out`
/// must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn pv_model_describe_tracklet(
    model: *const PvModel,
    frames: *const f32,
    frame_count: usize,
    overlap: usize,
    out: *mut f32,
    out_len: usize,
) -> PvStatus {
    guarded(|| {
        let net = &model_ref(model)?.net;
        let [l, h, w] = net.config().input;
        if frame_count == 0 {
            return Err(invalid("tracklet has no frames"));
        }
        if out_len != net.descriptor_dim() {
            return Err(invalid(format!("out_len is {out_len}, need {}", net.descriptor_dim())));
        }
        let data = input_slice(frames, 3 * frame_count * h * w, "frames")?;
        let tracklet = Tensor::new(&[3, frame_count, h, w], data.to_vec())?;
        let clips = clip_split(&tracklet, l, overlap)?;
        let descriptor = tracklet_descriptor(&embed_all(net, &clips)?)?;
        output_slice(out, out_len, "out")?.copy_from_slice(&descriptor);
        Ok(())
    })
}

unsafe fn entries(
    descriptors: *const f32,
    identities: *const i64,
    cameras: *const u32,
    count: usize,
    dim: usize,
    side: &str,
) -> Result<Vec<Entry>, Failure> {
    let d = input_slice(descriptors, count * dim, side)?;
    let ids = input_slice(identities, count, side)?;
    let cams = input_slice(cameras, count, side)?;
    Ok((0..count)
        .map(|i| Entry {
            identity: ids[i],
            camera: cams[i],
            descriptor: d[i * dim..(i + 1) * dim].to_vec(),
        })
        .collect())
}

/// Scores probes against a gallery by Euclidean distance. Gallery entries
/// sharing both identity and camera with a probe are ignored for that
/// probe. Writes the CMC curve for ranks `1..=max_rank` to `out_cmc` and
/// the mean average precision to `out_map`. Fails with
/// `PV_ERR_MISSING_IDENTITIES` when some probe has no eligible match.
///
/// # Safety
/// Descriptor arrays must hold `count * dim` values, identity and camera
/// arrays `count` values, `out_cmc` `max_rank` values and `out_map` one.
#[no_mangle]
pub unsafe extern "C" fn pv_retrieval_metrics(
    probe_descriptors: *const f32,
    probe_identities: *const i64,
    probe_cameras: *const u32,
    probe_count: usize,
    gallery_descriptors: *const f32,
    gallery_identities: *const i64,
    gallery_cameras: *const u32,
    gallery_count: usize,
    dim: usize,
    max_rank: usize,
    out_cmc: *mut f64,
    out_map: *mut f64,
) -> PvStatus {
    guarded(|| {
        if dim == 0 || max_rank == 0 {
            return Err(invalid("dim and max_rank must be positive"));
        }
        let index = RetrievalIndex {
            probes: entries(probe_descriptors, probe_identities, probe_cameras, probe_count, dim, "probes")?,
            gallery: entries(gallery_descriptors, gallery_identities, gallery_cameras, gallery_count, dim, "gallery")?,
        };
        let cmc = cmc_curve(&index, max_rank)?;
        let map = mean_ap(&index)?;
        output_slice(out_cmc, max_rank, "out_cmc")?.copy_from_slice(&cmc);
        *output_slice(out_map, 1, "out_map")?.first_mut().expect("one slot") = map;
        Ok(())
    })
}
