//! Hierarchical Gaussian benchmark with superclass-disjoint splits.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{split_by_superclass, DatasetSplit, LabeledStore};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub superclasses: usize,
    pub input_dim: usize,
    /// Standard deviation of superclass centres around the origin.
    pub mean_scale: f64,
    /// Standard deviation of class means around their superclass centre.
    pub class_scale: f64,
    /// Standard deviation of examples around their class mean.
    pub within_scale: f64,
    pub samples_per_class: usize,
    /// Superclasses assigned to train, val and test, in that order.
    pub split_superclasses: [usize; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 100,
            superclasses: 20,
            input_dim: 16,
            mean_scale: 1.0,
            class_scale: 1.0,
            within_scale: 1.0,
            samples_per_class: 60,
            split_superclasses: [12, 4, 4],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.superclasses == 0 || self.input_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig("synthetic dimensions and counts must be positive".into()));
        }
        if self.classes % self.superclasses != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} superclasses do not divide {} classes",
                self.superclasses, self.classes
            )));
        }
        if self.split_superclasses.iter().sum::<usize>() != self.superclasses {
            return Err(Error::InvalidConfig(format!(
                "split sizes {:?} do not add up to {} superclasses",
                self.split_superclasses, self.superclasses
            )));
        }
        for (name, v) in [("mean_scale", self.mean_scale), ("class_scale", self.class_scale), ("within_scale", self.within_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.classes > u16::MAX as usize {
            return Err(Error::InvalidConfig("too many classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub store: Arc<LabeledStore>,
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Class `c` belongs to superclass `c / (classes / superclasses)`; the first
/// `split_superclasses[0]` superclasses form the train split, the next ones
/// val, the rest test.
pub fn synth_dataset(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.input_dim;
    let per_super = config.classes / config.superclasses;
    let centres: Vec<Vec<f64>> = (0..config.superclasses).map(|_| gaussian(&mut rng, d, config.mean_scale)).collect();
    let n = config.classes * config.samples_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut fine = Vec::with_capacity(n);
    let mut coarse = Vec::with_capacity(n);
    for c in 0..config.classes {
        let s = c / per_super;
        let offset = gaussian(&mut rng, d, config.class_scale);
        let mean: Vec<f64> = centres[s].iter().zip(&offset).map(|(a, b)| a + b).collect();
        for _ in 0..config.samples_per_class {
            let eps = gaussian(&mut rng, d, config.within_scale);
            data.extend(mean.iter().zip(&eps).map(|(m, e)| (m + e) as f32));
            fine.push(c as u16);
            coarse.push(s as u16);
        }
    }
    let store = Arc::new(LabeledStore::new(vec![d], data, fine, coarse)?);
    let [a, b, _] = config.split_superclasses;
    let train: Vec<usize> = (0..a).collect();
    let val: Vec<usize> = (a..a + b).collect();
    let test: Vec<usize> = (a + b..config.superclasses).collect();
    let mut v = split_by_superclass(&store, &[("train", &train), ("val", &val), ("test", &test)])?;
    let test = v.pop().expect("three splits");
    let val = v.pop().expect("three splits");
    let train = v.pop().expect("three splits");
    Ok(SynthData { store, train, val, test })
}
