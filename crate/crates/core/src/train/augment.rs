use rand::Rng;

use crate::tensor::Tensor;

/// Mirrors every frame of a `... x H x W` clip left to right.
pub fn flip_horizontal(clip: &Tensor<f32>) -> Tensor<f32> {
    let w = *clip.shape().last().expect("clip has a width axis");
    let mut out = clip.clone();
    out.data_mut().chunks_mut(w).for_each(<[f32]>::reverse);
    out
}

/// Flips the whole clip with `probability`. Exactly one uniform draw is
/// consumed per call, so the stream position does not depend on outcomes.
pub fn augment_flip(clip: &Tensor<f32>, probability: f64, rng: &mut impl Rng) -> (Tensor<f32>, bool) {
    let flip = rng.gen::<f64>() < probability;
    if flip {
        (flip_horizontal(clip), true)
    } else {
        (clip.clone(), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::new(&[1, 2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&t)), t);
    }

    #[test]
    fn forced_flip_swaps_pixels() {
        let t = Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, flipped) = augment_flip(&t, 1.0, &mut rng);
        assert!(flipped);
        assert_eq!(out.data(), &[2.0, 1.0]);
        let (out, flipped) = augment_flip(&t, 0.0, &mut rng);
        assert!(!flipped);
        assert_eq!(out, t);
    }

    #[test]
    fn flips_about_half_the_time() {
        let t = Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = (0..10_000).filter(|_| augment_flip(&t, 0.5, &mut rng).1).count();
        assert!((n as f64 / 10_000.0 - 0.5).abs() <= 0.02, "{n}");
    }
}
