//! Labeled example stores, class-disjoint splits, CIFAR-100 ingestion,
//! synthetic benchmarks, and checkpoint persistence.

mod checkpoint;
mod cifar;
mod synth;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use cifar::{
    decode_cifar, downsample_area, encode_cifar_record, fc100_split, load_cifar100, standin_cifar100, CifarOptions,
    CifarRecords, Fc100Splits, CIFAR_FINE_TO_COARSE, CIFAR_PIXELS, CIFAR_RECORD_LEN, CIFAR_SIDE, FC100_TEST, FC100_TRAIN,
    FC100_VAL,
};
pub use synth::{synth_dataset, SynthConfig, SynthData};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Per-channel standardization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Immutable collection of examples with fine and coarse labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStore {
    example_shape: Vec<usize>,
    data: Vec<f32>,
    fine: Vec<u16>,
    coarse: Vec<u16>,
    class_index: BTreeMap<usize, Vec<usize>>,
    coarse_of: BTreeMap<usize, usize>,
    normalization: Option<Normalization>,
}

impl LabeledStore {
    pub fn new(example_shape: Vec<usize>, data: Vec<f32>, fine: Vec<u16>, coarse: Vec<u16>) -> Result<Self> {
        let per: usize = example_shape.iter().product();
        if per == 0 {
            return Err(Error::InvalidConfig(format!("example shape {example_shape:?} is empty")));
        }
        if fine.len() != coarse.len() || data.len() != fine.len() * per {
            return Err(Error::InvalidConfig(format!(
                "store of {} fine labels, {} coarse labels and {} values does not match example size {per}",
                fine.len(),
                coarse.len(),
                data.len()
            )));
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut coarse_of = BTreeMap::new();
        for (i, (&f, &c)) in fine.iter().zip(&coarse).enumerate() {
            class_index.entry(f as usize).or_default().push(i);
            match coarse_of.insert(f as usize, c as usize) {
                Some(prev) if prev != c as usize => {
                    return Err(Error::InvalidConfig(format!(
                        "fine label {f} appears under coarse labels {prev} and {c}"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { example_shape, data, fine, coarse, class_index, coarse_of, normalization: None })
    }

    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.example_shape
    }

    pub fn example_len(&self) -> usize {
        self.example_shape.iter().product()
    }

    pub fn example(&self, id: usize) -> &[f32] {
        let n = self.example_len();
        &self.data[id * n..(id + 1) * n]
    }

    pub fn fine_label(&self, id: usize) -> usize {
        self.fine[id] as usize
    }

    pub fn coarse_label(&self, id: usize) -> usize {
        self.coarse[id] as usize
    }

    /// Fine classes present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    pub fn examples_of(&self, class: usize) -> &[usize] {
        self.class_index.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn coarse_of(&self, class: usize) -> Option<usize> {
        self.coarse_of.get(&class).copied()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Per-channel mean and standard deviation over the examples of `classes`.
    /// The channel axis is the first axis of the example shape.
    pub fn fit_normalization(&self, classes: &[usize]) -> Result<Normalization> {
        let ch = self.example_shape[0];
        let plane = self.example_len() / ch;
        let mut sum = vec![0.0f64; ch];
        let mut sq = vec![0.0f64; ch];
        let mut count = 0usize;
        for &c in classes {
            for &id in self.examples_of(c) {
                let x = self.example(id);
                for k in 0..ch {
                    for &v in &x[k * plane..(k + 1) * plane] {
                        sum[k] += v as f64;
                        sq[k] += (v as f64) * (v as f64);
                    }
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InsufficientData("no examples to fit normalization statistics".into()));
        }
        let n = (count * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Ok(Normalization { mean, std })
    }

    /// Standardizes every example in place with `norm` and records it.
    pub fn apply_normalization(&mut self, norm: Normalization) -> Result<()> {
        let ch = self.example_shape[0];
        if norm.mean.len() != ch || norm.std.len() != ch {
            return Err(Error::DimensionMismatch { expected: ch, got: norm.mean.len() });
        }
        if self.normalization.is_some() {
            return Err(Error::InvalidConfig("store is already normalized".into()));
        }
        let plane = self.example_len() / ch;
        for (i, v) in self.data.iter_mut().enumerate() {
            let k = (i / plane) % ch;
            *v = ((*v as f64 - norm.mean[k]) / norm.std[k]) as f32;
        }
        self.normalization = Some(norm);
        Ok(())
    }
}

/// A named subset of a store's fine classes.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    name: String,
    classes: Vec<usize>,
    store: Arc<LabeledStore>,
}

impl DatasetSplit {
    pub fn new(name: &str, mut classes: Vec<usize>, store: Arc<LabeledStore>) -> Result<Self> {
        classes.sort_unstable();
        classes.dedup();
        if let Some(&c) = classes.iter().find(|&&c| store.examples_of(c).is_empty()) {
            return Err(Error::InsufficientData(format!("split '{name}' names class {c} with no examples")));
        }
        Ok(Self { name: name.to_string(), classes, store })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Fine classes, ascending.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn store(&self) -> &Arc<LabeledStore> {
        &self.store
    }

    pub fn examples_of(&self, class: usize) -> &[usize] {
        self.store.examples_of(class)
    }

    /// Record ids of every example in the split.
    pub fn example_ids(&self) -> Vec<usize> {
        self.classes.iter().flat_map(|&c| self.store.examples_of(c).iter().copied()).collect()
    }

    /// Coarse labels covered by the split, ascending.
    pub fn superclasses(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.classes.iter().filter_map(|&c| self.store.coarse_of(c)).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// `[ids.len(), ...example_shape]` batch of the given records.
    pub fn gather(&self, ids: &[usize]) -> Tensor {
        let n = self.store.example_len();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            data.extend(self.store.example(id).iter().map(|&v| v as f64));
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(self.store.example_shape());
        Tensor::new(shape, data)
    }
}

/// Splits a store by superclass: each `(name, coarse labels)` pair becomes a
/// split holding every fine class whose coarse label is listed.
pub fn split_by_superclass(store: &Arc<LabeledStore>, groups: &[(&str, &[usize])]) -> Result<Vec<DatasetSplit>> {
    groups
        .iter()
        .map(|(name, supers)| {
            let classes = store
                .classes()
                .into_iter()
                .filter(|&c| store.coarse_of(c).is_some_and(|s| supers.contains(&s)))
                .collect();
            DatasetSplit::new(name, classes, Arc::clone(store))
        })
        .collect()
}

/// `split_name,coarse_label,fine_label` manifest, one row per fine class.
pub fn split_manifest(splits: &[&DatasetSplit]) -> String {
    let mut out = String::from("split_name,coarse_label,fine_label\n");
    for s in splits {
        for &c in s.classes() {
            let coarse = s.store().coarse_of(c).expect("split classes exist in the store");
            out.push_str(&format!("{},{},{}\n", s.name(), coarse, c));
        }
    }
    out
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_store() -> Arc<LabeledStore> {
        let fine = vec![0, 1, 2, 3, 0, 1];
        let coarse = vec![0, 0, 1, 2, 0, 0];
        let data = (0..12).map(|v| v as f32).collect();
        Arc::new(LabeledStore::new(vec![2], data, fine, coarse).unwrap())
    }

    #[test]
    fn store_indexes_classes() {
        let s = tiny_store();
        assert_eq!(s.classes(), vec![0, 1, 2, 3]);
        assert_eq!(s.examples_of(1), &[1, 5]);
        assert_eq!(s.example(5), &[10.0, 11.0]);
        assert_eq!(s.coarse_of(3), Some(2));
    }

    #[test]
    fn conflicting_coarse_labels_are_rejected() {
        assert!(LabeledStore::new(vec![1], vec![0.0, 0.0], vec![4, 4], vec![0, 1]).is_err());
        assert!(LabeledStore::new(vec![2], vec![0.0; 3], vec![0], vec![0]).is_err());
    }

    #[test]
    fn superclass_split_and_manifest() {
        let s = tiny_store();
        let splits = split_by_superclass(&s, &[("train", &[0]), ("test", &[1, 2])]).unwrap();
        assert_eq!(splits[0].classes(), &[0, 1]);
        assert_eq!(splits[1].classes(), &[2, 3]);
        assert_eq!(splits[1].superclasses(), vec![1, 2]);
        let m = split_manifest(&[&splits[0], &splits[1]]);
        assert_eq!(m, "split_name,coarse_label,fine_label\ntrain,0,0\ntrain,0,1\ntest,1,2\ntest,2,3\n");
        let batch = splits[0].gather(&[4, 1]);
        assert_eq!(batch.shape(), &[2, 2]);
        assert_eq!(batch.data(), &[8.0, 9.0, 2.0, 3.0]);
    }

    #[test]
    fn normalization_standardizes_fit_classes() {
        let mut s = (*tiny_store()).clone();
        let n = s.fit_normalization(&[0, 1, 2, 3]).unwrap();
        s.apply_normalization(n).unwrap();
        let all: Vec<f64> = s.data.iter().map(|&v| v as f64).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!(s.apply_normalization(Normalization { mean: vec![0.0], std: vec![1.0] }).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
    }
}
