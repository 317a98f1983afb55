//! Frozen base-class feature maps, built once from the pretrained encoder.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{FeatureMap, FrozenEncoder, Provenance};
use crate::episodes::SplitDataset;
use crate::error::{Error, Result};
use crate::ndkernel::checkpoint::{self, Dtype};
use crate::ndkernel::{ParamStore, Tensor};

pub const DEFAULT_CAP: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    labels: Vec<String>,
    per_class_cap: usize,
    fingerprint: String,
}

/// Per-class stacks of φ₀ feature maps. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    labels: Vec<String>,
    per_class_cap: usize,
    fingerprint: String,
    /// One n_c×C×H×W tensor per class.
    maps: Vec<Tensor>,
    /// Mean pooled embedding per class, used by visual querying.
    pooled_means: Vec<Vec<f64>>,
}

/// One fetched instance: (class id, index within the class).
pub type Pick = (usize, usize);

fn pooled_mean(stack: &Tensor) -> Vec<f64> {
    let s = stack.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut acc = vec![0.0; c];
    for i in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let off = (i * c + ch) * hw;
            *a += stack.data()[off..off + hw].iter().sum::<f64>() / hw as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl MemoryBank {
    fn assemble(labels: Vec<String>, per_class_cap: usize, fingerprint: String, maps: Vec<Tensor>) -> Result<Self> {
        if labels.len() != maps.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} classes",
                labels.len(),
                maps.len()
            )));
        }
        if let Some(first) = maps.first() {
            for (label, m) in labels.iter().zip(&maps) {
                if m.rank() != 4 || m.shape()[1..] != first.shape()[1..] {
                    return Err(Error::shape("memory bank", first.shape(), m.shape()));
                }
                if m.shape()[0] == 0 {
                    return Err(Error::EmptyClass(label.clone()));
                }
                if m.shape()[0] > per_class_cap {
                    return Err(Error::InvalidArgument(format!(
                        "class {label:?} holds {} maps, cap is {per_class_cap}",
                        m.shape()[0]
                    )));
                }
            }
        }
        let pooled_means = maps.iter().map(pooled_mean).collect();
        Ok(MemoryBank {
            labels,
            per_class_cap,
            fingerprint,
            maps,
            pooled_means,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn per_class_cap(&self) -> usize {
        self.per_class_cap
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.maps[class].shape()[0]
    }

    /// C×H×W of every stored map.
    pub fn map_shape(&self) -> &[usize] {
        &self.maps[0].shape()[1..]
    }

    pub fn class_maps(&self, class: usize) -> &Tensor {
        &self.maps[class]
    }

    pub fn pooled_mean(&self, class: usize) -> &[f64] {
        &self.pooled_means[class]
    }

    pub fn class_id(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                known: self.labels.len(),
            })
    }

    pub fn map(&self, (class, idx): Pick) -> FeatureMap {
        FeatureMap {
            tensor: self.maps[class].slice0(idx),
            provenance: Provenance::FrozenPhi0,
        }
    }

    /// Stacks picked maps into a k×C×H×W tensor.
    pub fn gather(&self, picks: &[Pick]) -> Result<Tensor> {
        let shape = self.map_shape().to_vec();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(picks.len() * per);
        for &(c, i) in picks {
            let t = &self.maps[c];
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
        let mut out_shape = vec![picks.len()];
        out_shape.extend(shape);
        Tensor::new(out_shape, data)
    }

    /// Chooses `k_total` instances from `class_ids` (ordered closest first),
    /// never from `exclude`. Each class gets k / n, and the first k mod n
    /// classes one more.
    pub fn fetch(
        &self,
        class_ids: &[usize],
        k_total: usize,
        exclude: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Vec<Pick>> {
        let classes: Vec<usize> = class_ids.iter().copied().filter(|&c| Some(c) != exclude).collect();
        if classes.is_empty() {
            return Err(Error::InvalidArgument(
                "bank fetch: no classes left after exclusion".into(),
            ));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.labels.len()) {
            return Err(Error::InvalidArgument(format!("bank fetch: class id {bad} out of range")));
        }
        let n = classes.len();
        let mut picks = Vec::with_capacity(k_total);
        for (rank, &c) in classes.iter().enumerate() {
            let want = k_total / n + usize::from(rank < k_total % n);
            let avail = self.class_len(c);
            let mut taken = 0;
            while taken < want {
                let batch = (want - taken).min(avail);
                picks.extend(index::sample(rng, avail, batch).into_iter().map(|i| (c, i)));
                taken += batch;
            }
        }
        Ok(picks)
    }

    pub fn fetch_maps(
        &self,
        class_ids: &[usize],
        k_total: usize,
        exclude: Option<usize>,
        seed: u64,
    ) -> Result<Vec<FeatureMap>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = self.fetch(class_ids, k_total, exclude, &mut rng)?;
        Ok(picks.into_iter().map(|p| self.map(p)).collect())
    }

    fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (c, stack) in self.maps.iter().enumerate() {
            for i in 0..stack.shape()[0] {
                store.insert(format!("bank.{c}.{i}"), stack.slice0(i));
            }
        }
        store
    }

    /// SHA-256 over the encoded contents and sidecar fields.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(checkpoint::encode(&self.to_store(), Dtype::F64));
        h.update(self.labels.join("\n").as_bytes());
        h.update(self.per_class_cap.to_le_bytes());
        h.update(self.fingerprint.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_store(), Dtype::F64)?;
        let sidecar = Sidecar {
            labels: self.labels.clone(),
            per_class_cap: self.per_class_cap,
            fingerprint: self.fingerprint.clone(),
        };
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    /// Loads a bank; when `encoder` is given its fingerprint must match the
    /// one recorded at build time.
    pub fn load(path: &Path, encoder: Option<&FrozenEncoder>) -> Result<Self> {
        let side = sidecar_path(path);
        let raw = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_slice(&raw)?;
        if let Some(enc) = encoder {
            if enc.fingerprint() != sidecar.fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: enc.fingerprint().to_string(),
                    found: sidecar.fingerprint,
                });
            }
        }
        let store = checkpoint::load(path)?;
        let mut per_class: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); sidecar.labels.len()];
        for (name, t) in store.iter() {
            let parsed = name
                .strip_prefix("bank.")
                .and_then(|rest| rest.split_once('.'))
                .and_then(|(c, i)| Some((c.parse::<usize>().ok()?, i.parse::<usize>().ok()?)));
            let (c, i) = parsed
                .filter(|(c, _)| *c < per_class.len())
                .ok_or_else(|| Error::InvalidArgument(format!("unexpected bank entry {name:?}")))?;
            per_class[c].push((i, t.clone()));
        }
        let mut maps = Vec::with_capacity(per_class.len());
        for (c, mut entries) in per_class.into_iter().enumerate() {
            entries.sort_by_key(|(i, _)| *i);
            if entries.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
                return Err(Error::MissingEntry(format!("bank.{c}.*")));
            }
            if entries.is_empty() {
                return Err(Error::EmptyClass(sidecar.labels[c].clone()));
            }
            let refs: Vec<&Tensor> = entries.iter().map(|(_, t)| t).collect();
            maps.push(Tensor::stack(&refs)?);
        }
        Self::assemble(sidecar.labels, sidecar.per_class_cap, sidecar.fingerprint, maps)
    }
}

/// Encodes up to `per_class_cap` instances of every base class with φ₀.
pub fn build_bank(
    dataset: &SplitDataset,
    encoder: &FrozenEncoder,
    per_class_cap: usize,
    seed: u64,
) -> Result<MemoryBank> {
    if per_class_cap == 0 {
        return Err(Error::Config("bank.per_class_cap must be positive".into()));
    }
    let base = dataset.base();
    if base.is_empty() {
        return Err(Error::InsufficientData("base split has no classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(base.len());
    for class in base {
        if class.images.is_empty() {
            return Err(Error::EmptyClass(class.label.clone()));
        }
        let n = class.images.len();
        let chosen = index::sample(&mut rng, n, n.min(per_class_cap)).into_vec();
        let images = dataset.stack(class, &chosen)?;
        maps.push(encoder.encode_tensor(&images)?);
    }
    let labels = base.iter().map(|c| c.label.clone()).collect();
    MemoryBank::assemble(labels, per_class_cap, encoder.fingerprint().to_string(), maps)
}

#[cfg(test)]
pub(crate) fn bank_from_maps(labels: Vec<String>, maps: Vec<Tensor>, fingerprint: &str) -> Result<MemoryBank> {
    let cap = maps.iter().map(|m| m.shape()[0]).max().unwrap_or(1);
    MemoryBank::assemble(labels, cap, fingerprint.to_string(), maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_bank(classes: usize, per: usize) -> MemoryBank {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = (0..classes).map(|c| format!("c{c}")).collect();
        let maps = (0..classes).map(|_| Tensor::randn(vec![per, 2, 2, 2], 1.0, &mut rng)).collect();
        bank_from_maps(labels, maps, "fp").unwrap()
    }

    fn counts(picks: &[Pick], classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        picks.iter().for_each(|&(k, _)| c[k] += 1);
        c
    }

    #[test]
    fn even_spread() {
        let bank = toy_bank(5, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picks = bank.fetch(&[0, 1, 2, 3, 4], 20, None, &mut rng).unwrap();
        assert_eq!(counts(&picks, 5), vec![4; 5]);
    }

    #[test]
    fn remainder_goes_to_closest() {
        let bank = toy_bank(5, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picks = bank.fetch(&[3, 1, 0, 4, 2], 22, None, &mut rng).unwrap();
        let c = counts(&picks, 5);
        assert_eq!([c[3], c[1], c[0], c[4], c[2]], [5, 5, 4, 4, 4]);
    }

    #[test]
    fn excluded_class_never_fetched() {
        let bank = toy_bank(6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let picks = bank.fetch(&[0, 1, 2, 3, 4, 5], 20, Some(2), &mut rng).unwrap();
            assert_eq!(picks.len(), 20);
            assert!(picks.iter().all(|&(c, _)| c != 2));
        }
        assert!(bank.fetch(&[2], 20, Some(2), &mut rng).is_err());
    }

    #[test]
    fn small_classes_are_resampled() {
        let bank = toy_bank(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let picks = bank.fetch(&[0, 1], 20, None, &mut rng).unwrap();
        assert_eq!(counts(&picks, 2), vec![10, 10]);
        assert!(picks.iter().all(|&(_, i)| i < 3));
    }

    #[test]
    fn gather_matches_map() {
        let bank = toy_bank(3, 4);
        let t = bank.gather(&[(2, 1), (0, 3)]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 2]);
        assert_eq!(t.slice0(0), bank.map((2, 1)).tensor);
        assert_eq!(t.slice0(1), bank.map((0, 3)).tensor);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.btwt");
        let bank = toy_bank(3, 5);
        bank.save(&path).unwrap();
        let back = MemoryBank::load(&path, None).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.digest(), bank.digest());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.btwt");
        toy_bank(2, 2).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match MemoryBank::load(&path, None) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pooled_means_are_class_averages() {
        let bank = toy_bank(2, 3);
        let stack = bank.class_maps(1);
        for ch in 0..2 {
            let mut acc = 0.0;
            for i in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        acc += stack.get(&[i, ch, y, x]);
                    }
                }
            }
            assert!((bank.pooled_mean(1)[ch] - acc / 12.0).abs() < 1e-12);
        }
    }
}
