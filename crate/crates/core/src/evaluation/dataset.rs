//! Seeded synthetic image classification data.
//!
//! Each class has a template image drawn uniformly from `[-1, 1]`; a sample is
//! its class template plus Gaussian noise. Samples are stored channel-major
//! (`C×H×W`).

use crate::arch::Shape;
use crate::seed;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: Shape,
    pub classes: usize,
    pub templates: Vec<Vec<f64>>,
    pub train: Split,
    pub val: Split,
}

impl Dataset {
    pub fn generate(shape: Shape, classes: usize, noise: f64, train: usize, val: usize, seed_value: u64) -> Dataset {
        let n = shape.elements();
        let mut rng = seed::stream(seed_value, "dataset.templates", &[]);
        let templates: Vec<Vec<f64>> =
            (0..classes).map(|_| (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
        let normal = Normal::new(0.0, noise).expect("noise is a valid standard deviation");
        let split = |name: &str, count: usize| {
            let mut rng = seed::stream(seed_value, name, &[]);
            let mut images = Vec::with_capacity(count);
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                let label = rng.random_range(0..classes);
                images.push(templates[label].iter().map(|t| t + normal.sample(&mut rng)).collect());
                labels.push(label);
            }
            Split { images, labels }
        };
        Dataset { shape, classes, train: split("dataset.train", train), val: split("dataset.val", val), templates }
    }

    pub fn from_config(cfg: &super::TrainConfig) -> Dataset {
        Dataset::generate(cfg.input_shape, cfg.classes, cfg.noise, cfg.train_samples, cfg.val_samples, cfg.dataset_seed)
    }
}
