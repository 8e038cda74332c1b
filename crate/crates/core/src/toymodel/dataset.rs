//! Procedurally generated texture classification data.
//!
//! Two classes: horizontal stripes (intensity varies with y) and vertical
//! stripes (varies with x). Frequency, phase, and pixel noise are drawn from
//! a seeded stream, so a dataset is a pure function of its seed.

use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// size x size pixels in [0, 1].
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct StripeDataset {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

fn stripe_image(rng: &mut SeededRng, size: usize, vertical: bool) -> Tensor {
    let freq = 2.0 + rng.uniform_usize(3) as f64; // 2, 3, or 4 cycles
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let mut img = Tensor::from_fn(size, size, |y, x| {
        let along = if vertical { x } else { y } as f64;
        let wave = (std::f64::consts::TAU * freq * along / size as f64 + phase).sin();
        0.5 + 0.4 * wave
    });
    for v in img.data_mut() {
        *v = (*v + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0);
    }
    img
}

/// Balanced two-class stripe task. Train and validation splits are disjoint
/// draws from the same stream.
pub fn generate_stripes(
    n_train_per_class: usize,
    n_val_per_class: usize,
    image_size: usize,
    seed: u64,
) -> StripeDataset {
    let mut rng = SeededRng::new(seed);
    let mut make = |n: usize| {
        let mut images = Vec::with_capacity(2 * n);
        for i in 0..2 * n {
            let label = i % 2;
            images.push(LabeledImage {
                pixels: stripe_image(&mut rng, image_size, label == 1),
                label,
            });
        }
        images
    };
    StripeDataset {
        train: make(n_train_per_class),
        val: make(n_val_per_class),
        classes: 2,
        image_size,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let a = generate_stripes(8, 4, 16, 3);
        let b = generate_stripes(8, 4, 16, 3);
        assert_eq!(a.train.len(), 16);
        assert_eq!(a.val.len(), 8);
        assert_eq!(a.train.iter().filter(|im| im.label == 0).count(), 8);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn stripes_have_the_right_orientation() {
        let ds = generate_stripes(4, 0, 16, 9);
        for im in &ds.train {
            // variance of row means vs column means separates the classes
            let size = 16;
            let row_means: Vec<f64> = (0..size)
                .map(|y| im.pixels.row(y).iter().sum::<f64>() / size as f64)
                .collect();
            let col_means: Vec<f64> = (0..size)
                .map(|x| (0..size).map(|y| im.pixels.at(y, x)).sum::<f64>() / size as f64)
                .collect();
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
            };
            if im.label == 0 {
                assert!(var(&row_means) > var(&col_means));
            } else {
                assert!(var(&col_means) > var(&row_means));
            }
        }
    }
}
