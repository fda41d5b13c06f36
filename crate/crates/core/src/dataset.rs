//! Domain datasets, manifests, and deterministic labelled/unlabelled splits.

use crate::tensor::{LabelMask, TensorImage};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train-labelled")]
    TrainLabelled,
    #[serde(rename = "train-unlabelled")]
    TrainUnlabelled,
    #[serde(rename = "test")]
    Test,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: TensorImage,
    pub mask: Option<LabelMask>,
    pub domain: String,
    pub split: Split,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        if self.split == Split::TrainLabelled && self.mask.is_none() {
            return Err(Error::invalid(format!("labelled sample missing mask: {}", self.id)));
        }
        if let Some(mask) = &self.mask {
            mask.validate()?;
            if mask.height != self.image.height || mask.width != self.image.width {
                return Err(Error::invalid(format!("mask shape mismatch for sample {}", self.id)));
            }
        }
        Ok(())
    }
}

/// A named collection of samples partitioned into labelled / unlabelled /
/// test subsets.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let d = DomainDataset { name: name.into(), samples };
        d.validate()?;
        Ok(d)
    }

    /// (n_labelled, n_unlabelled, n_test)
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in &self.samples {
            match s.split {
                Split::TrainLabelled => c.0 += 1,
                Split::TrainUnlabelled => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id: {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn iter_split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    image: String,
    mask: Option<String>,
    domain: String,
    split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    name: String,
    samples: Vec<ManifestEntry>,
}

/// Load a manifest and every tensor it references. Paths are relative to
/// the manifest file's directory.
pub fn load_manifest(path: &Path) -> Result<DomainDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        if entry.split == Split::TrainLabelled && entry.mask.is_none() {
            return Err(Error::format(path, format!("labelled sample missing mask: {}", entry.id)));
        }
        let image = TensorImage::load(&base.join(&entry.image))?;
        let mask = match &entry.mask {
            Some(rel) => Some(LabelMask::load(&base.join(rel))?),
            None => None,
        };
        samples.push(Sample { id: entry.id, image, mask, domain: entry.domain, split: entry.split });
    }
    DomainDataset::new(manifest.name, samples)
}

/// Write `dataset` as `<dir>/<name>.json` plus one AHD1 file per tensor
/// under `<dir>/tensors/`.
pub fn save_manifest(dataset: &DomainDataset, dir: &Path, file_stem: &str) -> Result<()> {
    dataset.validate()?;
    let tensor_dir = dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let image_rel = format!("tensors/{}.img.ahd1", s.id);
        s.image.save(&dir.join(&image_rel))?;
        let mask_rel = match &s.mask {
            Some(mask) => {
                let rel = format!("tensors/{}.mask.ahd1", s.id);
                mask.save(&dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image: image_rel,
            mask: mask_rel,
            domain: s.domain.clone(),
            split: s.split,
        });
    }
    let manifest = Manifest { name: dataset.name.clone(), samples: entries };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    let path = dir.join(format!("{file_stem}.json"));
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Round-half-up share of `n` at `ratio`.
pub fn labelled_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

/// Re-partition the training samples into labelled/unlabelled at `ratio`.
///
/// Deterministic given `seed`; ties in the random ordering are broken by
/// sample id. The test split is untouched. Masks of samples landing in
/// the unlabelled pool are dropped so downstream training cannot read
/// them.
pub fn split_dataset(d: &DomainDataset, label_ratio: f64, seed: u64) -> Result<DomainDataset> {
    if !(label_ratio > 0.0 && label_ratio <= 1.0) {
        return Err(Error::invalid(format!("label ratio {label_ratio} outside (0, 1]")));
    }
    let mut train_ids: Vec<&str> = d
        .samples
        .iter()
        .filter(|s| s.split != Split::Test)
        .map(|s| {
            if s.mask.is_none() {
                return Err(Error::invalid(format!(
                    "training sample {} has no mask; cannot enter the labelled pool",
                    s.id
                )));
            }
            Ok(s.id.as_str())
        })
        .collect::<Result<_>>()?;
    train_ids.sort_unstable();
    let n_train = train_ids.len();
    let n_labelled = labelled_count(n_train, label_ratio);
    if n_labelled == 0 {
        return Err(Error::invalid(format!(
            "label ratio {label_ratio} yields zero labelled samples out of {n_train}"
        )));
    }

    let mut rng = crate::rng::stream(seed, "split-dataset");
    let mut keyed: Vec<(u64, &str)> = train_ids.iter().map(|id| (rng.random::<u64>(), *id)).collect();
    keyed.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
    let labelled: BTreeSet<&str> = keyed.iter().take(n_labelled).map(|(_, id)| *id).collect();

    let samples = d
        .samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if s.split != Split::Test {
                if labelled.contains(s.id.as_str()) {
                    s.split = Split::TrainLabelled;
                } else {
                    s.split = Split::TrainUnlabelled;
                    s.mask = None;
                }
            }
            s
        })
        .collect();
    DomainDataset::new(d.name.clone(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n_train: usize, n_test: usize) -> DomainDataset {
        let mut samples = Vec::new();
        for i in 0..n_train + n_test {
            let split = if i < n_train { Split::TrainLabelled } else { Split::Test };
            samples.push(Sample {
                id: format!("s{i:03}"),
                image: TensorImage::zeros(4, 4),
                mask: Some(LabelMask::zeros(4, 4)),
                domain: "d1".into(),
                split,
            });
        }
        DomainDataset::new("toy", samples).unwrap()
    }

    #[test]
    fn split_counts_99_at_20_percent() {
        let d = toy_dataset(99, 10);
        let s = split_dataset(&d, 0.20, 5).unwrap();
        assert_eq!(s.counts(), (20, 79, 10));
    }

    #[test]
    fn split_ratio_one_labels_everything() {
        let d = toy_dataset(12, 3);
        let s = split_dataset(&d, 1.0, 5).unwrap();
        assert_eq!(s.counts(), (12, 0, 3));
    }

    #[test]
    fn split_deterministic_and_partitioning() {
        let d = toy_dataset(31, 4);
        let a = split_dataset(&d, 0.3, 9).unwrap();
        let b = split_dataset(&d, 0.3, 9).unwrap();
        let ids =
            |d: &DomainDataset, split: Split| -> Vec<String> { d.iter_split(split).map(|s| s.id.clone()).collect() };
        assert_eq!(ids(&a, Split::TrainLabelled), ids(&b, Split::TrainLabelled));

        let mut l = ids(&a, Split::TrainLabelled);
        let mut u = ids(&a, Split::TrainUnlabelled);
        assert_eq!(l.len() + u.len(), 31);
        l.append(&mut u);
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 31);

        let c = split_dataset(&d, 0.3, 10).unwrap();
        assert_ne!(ids(&a, Split::TrainLabelled), ids(&c, Split::TrainLabelled));
    }

    #[test]
    fn split_zero_labelled_errors() {
        let d = toy_dataset(4, 0);
        assert!(split_dataset(&d, 0.05, 1).is_err());
    }

    #[test]
    fn unlabelled_masks_are_dropped() {
        let d = toy_dataset(10, 0);
        let s = split_dataset(&d, 0.2, 3).unwrap();
        for sample in s.iter_split(Split::TrainUnlabelled) {
            assert!(sample.mask.is_none());
        }
        for sample in s.iter_split(Split::TrainLabelled) {
            assert!(sample.mask.is_some());
        }
    }

    #[test]
    fn manifest_round_trip_and_counts() {
        let d = toy_dataset(5, 2);
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&d, dir.path(), "toy").unwrap();
        let back = load_manifest(&dir.path().join("toy.json")).unwrap();
        assert_eq!(back.counts(), (5, 0, 2));
        assert_eq!(back.samples.len(), d.samples.len());
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn manifest_missing_file_names_it() {
        let d = toy_dataset(2, 0);
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&d, dir.path(), "toy").unwrap();
        fs::remove_file(dir.path().join("tensors/s001.img.ahd1")).unwrap();
        let err = load_manifest(&dir.path().join("toy.json")).unwrap_err();
        assert!(err.to_string().contains("s001.img.ahd1"), "{err}");
    }

    #[test]
    fn manifest_labelled_without_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = TensorImage::zeros(2, 2);
        img.save(&dir.path().join("x.ahd1")).unwrap();
        let manifest = r#"{"name":"bad","samples":[
            {"id":"a","image":"x.ahd1","mask":null,"domain":"d1","split":"train-labelled"}
        ]}"#;
        let path = dir.path().join("bad.json");
        fs::write(&path, manifest).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("labelled sample missing mask"), "{err}");
    }

    #[test]
    fn manifest_duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = TensorImage::zeros(2, 2);
        img.save(&dir.path().join("x.ahd1")).unwrap();
        let manifest = r#"{"name":"bad","samples":[
            {"id":"a","image":"x.ahd1","mask":null,"domain":"d1","split":"train-unlabelled"},
            {"id":"a","image":"x.ahd1","mask":null,"domain":"d1","split":"train-unlabelled"}
        ]}"#;
        let path = dir.path().join("bad.json");
        fs::write(&path, manifest).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate sample id"), "{err}");
    }
}
