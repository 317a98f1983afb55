//! Datasets split into base / val / novel classes, episodic sampling, and
//! the augmentations used for contrastive pairs.

mod augment;
mod synth;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndkernel::Tensor;

pub use augment::{augment, augment_pair, sample_crop, AugmentConfig, CropBox};
pub use synth::{synth_dataset, ClassRecipe, SynthConfig, SynthOutput};

pub const DEFAULT_QUERIES: usize = 15;

/// An 8-bit RGB image stored channel-major (3×S×S).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    size: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(size: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * size * size {
            return Err(Error::InvalidArgument(format!(
                "image of side {size} needs {} bytes, got {}",
                3 * size * size,
                data.len()
            )));
        }
        Ok(Image { size, data })
    }

    /// Quantizes a 3×S×S tensor with values in [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
            return Err(Error::InvalidShape {
                op: "Image::from_tensor",
                shape: s.to_vec(),
                reason: "expects 3×S×S".into(),
            });
        }
        let data = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(Image { size: s[1], data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![3, self.size, self.size],
            self.data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
        .expect("size checked at construction")
    }

    fn write_to(&self, out: &mut Vec<f64>) {
        out.extend(self.data.iter().map(|&b| f64::from(b) / 255.0));
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let s = self.size;
        let plane = s * s;
        let mut hwc = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                hwc.push(self.data[c * plane + p]);
            }
        }
        let img = image::RgbImage::from_raw(s as u32, s as u32, hwc).expect("buffer sized for image");
        img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::Image(format!("{}: image is {w}×{h}, expected square", path.display())));
        }
        let s = w as usize;
        let plane = s * s;
        let raw = img.into_raw();
        let mut data = vec![0u8; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = raw[p * 3 + c];
            }
        }
        Image::new(s, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassImages {
    pub label: String,
    pub images: Vec<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Base, Split::Val, Split::Novel];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    label: String,
    split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    image_size: usize,
    classes: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Labeled images partitioned into disjoint base, val and novel classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    image_size: usize,
    base: Vec<ClassImages>,
    val: Vec<ClassImages>,
    novel: Vec<ClassImages>,
}

impl SplitDataset {
    pub fn new(
        image_size: usize,
        base: Vec<ClassImages>,
        val: Vec<ClassImages>,
        novel: Vec<ClassImages>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for class in base.iter().chain(&val).chain(&novel) {
            if !seen.insert(class.label.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "class {:?} appears in more than one split",
                    class.label
                )));
            }
            if let Some(img) = class.images.iter().find(|i| i.size != image_size) {
                return Err(Error::InvalidArgument(format!(
                    "class {:?} has a {}px image, dataset is {image_size}px",
                    class.label, img.size
                )));
            }
        }
        Ok(SplitDataset {
            image_size,
            base,
            val,
            novel,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn split(&self, split: Split) -> &[ClassImages] {
        match split {
            Split::Base => &self.base,
            Split::Val => &self.val,
            Split::Novel => &self.novel,
        }
    }

    pub fn base(&self) -> &[ClassImages] {
        &self.base
    }

    pub fn val(&self) -> &[ClassImages] {
        &self.val
    }

    pub fn novel(&self) -> &[ClassImages] {
        &self.novel
    }

    pub fn labels(&self, split: Split) -> Vec<String> {
        self.split(split).iter().map(|c| c.label.clone()).collect()
    }

    /// Stacks the chosen instances of `class` into an n×3×S×S tensor.
    pub fn stack(&self, class: &ClassImages, indices: &[usize]) -> Result<Tensor> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            let img = class.images.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("instance {i} out of range for class {:?}", class.label))
            })?;
            img.write_to(&mut data);
        }
        Tensor::new(vec![indices.len(), 3, s, s], data)
    }

    /// Stacks (class, instance) items of one split.
    pub fn stack_items(&self, split: Split, items: &[(usize, usize)]) -> Result<Tensor> {
        let classes = self.split(split);
        let s = self.image_size;
        let mut data = Vec::with_capacity(items.len() * 3 * s * s);
        for &(c, i) in items {
            let img = classes
                .get(c)
                .and_then(|cl| cl.images.get(i))
                .ok_or_else(|| Error::InvalidArgument(format!("item ({c}, {i}) out of range")))?;
            img.write_to(&mut data);
        }
        Tensor::new(vec![items.len(), 3, s, s], data)
    }

    /// Writes `root/{split}/{label}/{index}.png` plus a manifest.
    pub fn save_dir(&self, root: &Path) -> Result<()> {
        let mut classes = Vec::new();
        for split in Split::ALL {
            for class in self.split(split) {
                let dir = root.join(split.dir_name()).join(&class.label);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (i, img) in class.images.iter().enumerate() {
                    img.save_png(&dir.join(format!("{i:05}.png")))?;
                }
                classes.push(ManifestEntry {
                    label: class.label.clone(),
                    split,
                });
            }
        }
        let manifest = Manifest {
            image_size: self.image_size,
            classes,
        };
        let path = root.join(MANIFEST);
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw)?;
        let mut parts: [Vec<ClassImages>; 3] = Default::default();
        for entry in manifest.classes {
            let dir = root.join(entry.split.dir_name()).join(&entry.label);
            let mut files: Vec<_> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            let images = files.iter().map(|f| Image::load_png(f)).collect::<Result<Vec<_>>>()?;
            let slot = Split::ALL.iter().position(|s| *s == entry.split).expect("known split");
            parts[slot].push(ClassImages {
                label: entry.label,
                images,
            });
        }
        let [base, val, novel] = parts;
        Self::new(manifest.image_size, base, val, novel)
    }
}

/// One labeled draw: class index within the split, instance index within
/// the class, and the episode-local label in [0, N).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EpisodeItem {
    pub class: usize,
    pub instance: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    /// Class indices (within the split); position is the episode label.
    pub classes: Vec<usize>,
    /// Class-major, `shot` per class.
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    pub seed: u64,
}

impl Episode {
    pub fn support_images(&self, ds: &SplitDataset) -> Result<Tensor> {
        let items: Vec<_> = self.support.iter().map(|i| (i.class, i.instance)).collect();
        ds.stack_items(self.split, &items)
    }

    pub fn query_images(&self, ds: &SplitDataset) -> Result<Tensor> {
        let items: Vec<_> = self.query.iter().map(|i| (i.class, i.instance)).collect();
        ds.stack_items(self.split, &items)
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }
}

/// Draws an N-way M-shot episode with `queries` query instances per class.
pub fn sample_episode(
    ds: &SplitDataset,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    let classes = ds.split(split);
    if way == 0 || shot == 0 {
        return Err(Error::InvalidArgument("way and shot must be positive".into()));
    }
    if classes.len() < way {
        return Err(Error::InsufficientData(format!(
            "{way}-way episode needs {way} classes, {} split has {}",
            split.dir_name(),
            classes.len()
        )));
    }
    let need = shot + queries;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, classes.len(), way).into_vec();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for (label, &c) in chosen.iter().enumerate() {
        let n = classes[c].images.len();
        if n < need {
            return Err(Error::InsufficientData(format!(
                "class {:?} has {n} instances, episode needs {need}",
                classes[c].label
            )));
        }
        let picks = index::sample(&mut rng, n, need).into_vec();
        let item = |instance| EpisodeItem {
            class: c,
            instance,
            label,
        };
        support.extend(picks[..shot].iter().map(|&i| item(i)));
        query.extend(picks[shot..].iter().map(|&i| item(i)));
    }
    Ok(Episode {
        split,
        way,
        shot,
        classes: chosen,
        support,
        query,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(classes: usize, per: usize) -> SplitDataset {
        let mk = |prefix: &str, n: usize, shade: u8| -> Vec<ClassImages> {
            (0..n)
                .map(|c| ClassImages {
                    label: format!("{prefix}{c}"),
                    images: (0..per)
                        .map(|i| Image::new(2, vec![shade.wrapping_add((c * 17 + i) as u8); 12]).unwrap())
                        .collect(),
                })
                .collect()
        };
        SplitDataset::new(2, mk("b", classes, 0), mk("v", 2, 80), mk("n", classes, 160)).unwrap()
    }

    #[test]
    fn standard_protocol_sizes() {
        let ds = tiny(6, 20);
        let ep = sample_episode(&ds, Split::Novel, 5, 1, 15, 3).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        assert_eq!(ep.support_images(&ds).unwrap().shape(), &[5, 3, 2, 2]);
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = tiny(6, 20);
        let a = sample_episode(&ds, Split::Base, 3, 2, 4, 9).unwrap();
        let b = sample_episode(&ds, Split::Base, 3, 2, 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn support_query_disjoint_and_labels_bijective() {
        let ds = tiny(7, 12);
        for seed in 0..10_000 {
            let ep = sample_episode(&ds, Split::Novel, 5, 2, 3, seed).unwrap();
            let sup: BTreeSet<_> = ep.support.iter().map(|i| (i.class, i.instance)).collect();
            assert!(ep.query.iter().all(|i| !sup.contains(&(i.class, i.instance))));
            let labels: BTreeSet<_> = ep.support.iter().map(|i| i.label).collect();
            assert_eq!(labels, (0..5).collect());
            for (label, &c) in ep.classes.iter().enumerate() {
                assert_eq!(ep.support.iter().filter(|i| i.label == label && i.class == c).count(), 2);
            }
        }
    }

    #[test]
    fn insufficient_data_errors() {
        let ds = tiny(3, 5);
        assert!(matches!(
            sample_episode(&ds, Split::Novel, 5, 1, 1, 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            sample_episode(&ds, Split::Novel, 2, 1, 15, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn overlapping_labels_rejected() {
        let c = ClassImages {
            label: "x".into(),
            images: vec![],
        };
        assert!(SplitDataset::new(2, vec![c.clone()], vec![], vec![c]).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let ds = tiny(2, 3);
        let dir = tempfile::tempdir().unwrap();
        ds.save_dir(dir.path()).unwrap();
        assert!(dir.path().join("novel/n1/00002.png").exists());
        assert_eq!(SplitDataset::load_dir(dir.path()).unwrap(), ds);
    }

    #[test]
    fn tensor_quantization_round_trip() {
        let img = Image::new(2, (0..12).map(|i| i * 20).collect()).unwrap();
        assert_eq!(Image::from_tensor(&img.to_tensor()).unwrap(), img);
    }
}
