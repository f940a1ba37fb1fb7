use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Start frames of the clips cut from a tracklet of `len` frames. Windows
/// advance by `clip_len - overlap`; a final window anchored at
/// `len - clip_len` covers any remainder. Tracklets shorter than a clip
/// give one window at 0.
pub fn clip_windows(len: usize, clip_len: usize, overlap: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::invalid("empty tracklet"));
    }
    if clip_len == 0 || overlap >= clip_len {
        return Err(Error::invalid(format!(
            "clip length {clip_len} must exceed overlap {overlap}"
        )));
    }
    if len <= clip_len {
        return Ok(vec![0]);
    }
    let stride = clip_len - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + clip_len <= len).collect();
    let last = *starts.last().expect("len > clip_len leaves one window");
    if last + clip_len < len {
        starts.push(len - clip_len);
    }
    Ok(starts)
}

/// Cuts a `3 x L x H x W` tracklet into `3 x clip_len x H x W` clips.
/// Short tracklets are repeated cyclically to fill one clip.
pub fn clip_split(tracklet: &Tensor<f32>, clip_len: usize, overlap: usize) -> Result<Vec<Tensor<f32>>> {
    if tracklet.rank() != 4 {
        return Err(Error::invalid(format!(
            "tracklet must be channels x frames x H x W, got {:?}",
            tracklet.shape()
        )));
    }
    let [c, len, h, w] = [tracklet.shape()[0], tracklet.shape()[1], tracklet.shape()[2], tracklet.shape()[3]];
    let frame = h * w;
    clip_windows(len, clip_len, overlap)?
        .into_iter()
        .map(|start| {
            let mut data = Vec::with_capacity(c * clip_len * frame);
            for ch in 0..c {
                for f in 0..clip_len {
                    let src = (start + f) % len;
                    let at = (ch * len + src) * frame;
                    data.extend_from_slice(&tracklet.data()[at..at + frame]);
                }
            }
            Tensor::new(&[c, clip_len, h, w], data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerates_windows() {
        assert_eq!(clip_windows(32, 16, 8).unwrap(), vec![0, 8, 16]);
        assert_eq!(clip_windows(16, 16, 8).unwrap(), vec![0]);
        assert_eq!(clip_windows(20, 16, 8).unwrap(), vec![0, 4]);
        assert_eq!(clip_windows(5, 16, 8).unwrap(), vec![0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(clip_windows(0, 16, 8).is_err());
        assert!(clip_windows(10, 8, 8).is_err());
    }

    #[test]
    fn short_tracklet_repeats_cyclically() {
        let t = Tensor::new(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let clips = clip_split(&t, 7, 2).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn clips_copy_the_right_frames_per_channel() {
        let len = 20;
        let data: Vec<f32> = (0..2 * len).map(|i| i as f32).collect();
        let t = Tensor::new(&[2, len, 1, 1], data).unwrap();
        let clips = clip_split(&t, 16, 8).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[1].get(&[0, 0, 0, 0]), 4.0);
        assert_eq!(clips[1].get(&[1, 15, 0, 0]), (len + 19) as f32);
    }
}
