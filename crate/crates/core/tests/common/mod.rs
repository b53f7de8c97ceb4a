#![allow(dead_code)]

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spade_core::dataset::{build_splits, CleanDigit, DatasetSplit, MnistCorpus, NoiseConfig, SplitSpec};

/// 28×28 stand-in digits: even labels draw a ring, odd labels a vertical
/// bar whose column depends on the label, with a little jitter.
pub fn synthetic_digit(label: u8, rng: &mut ChaCha8Rng) -> GrayImage {
    let shift = rng.random_range(-2.0..2.0);
    GrayImage::from_fn(28, 28, |x, y| {
        let (fx, fy) = (f64::from(x) - 13.5 - shift, f64::from(y) - 13.5);
        let on = if label.is_multiple_of(2) {
            let r = (fx * fx + fy * fy).sqrt();
            (7.0..10.0).contains(&r)
        } else {
            let col = -8.0 + f64::from(label) * 1.5;
            (fx - col).abs() < 2.0 && fy.abs() < 10.0
        };
        image::Luma([if on { 230 } else { 0 }])
    })
}

pub fn synthetic_corpus(per_digit_train: usize, per_digit_test: usize, seed: u64) -> MnistCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part = |n: usize| {
        (0..n * 10)
            .map(|i| {
                let label = (i % 10) as u8;
                CleanDigit {
                    label,
                    image: synthetic_digit(label, &mut rng),
                }
            })
            .collect::<Vec<_>>()
    };
    let train = part(per_digit_train);
    let test = part(per_digit_test);
    MnistCorpus { train, test }
}

pub fn small_noise(size: u32) -> NoiseConfig {
    NoiseConfig {
        sigma_mean: 10.0,
        sigma_std: 5.0,
        scale_min: size / 2,
        scale_max: size,
        output_size: size,
    }
}

/// A split of `size`×`size` images, normal digit 0 and known anomaly 3.
pub fn small_split(size: u32, per_digit_train: usize, per_digit_test: usize, seed: u64) -> DatasetSplit {
    let corpus = synthetic_corpus(per_digit_train, per_digit_test, seed);
    let spec = SplitSpec {
        seed,
        ..SplitSpec::default()
    };
    build_splits(&corpus, &spec, &small_noise(size)).unwrap()
}
