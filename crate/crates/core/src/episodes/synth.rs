//! Compositional synthetic images.
//!
//! Every image has four quadrant slots, each holding a colored shape
//! ("part"). A base class fixes one part per slot, drawn from a small
//! per-slot pool so that base classes share parts with each other. Val and
//! novel classes take two slots from one base class and two from another.
//! Class similarity is the Jaccard overlap of (slot, part) sets.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassImages, Image, SplitDataset};
use crate::error::{Error, Result};
use crate::ndkernel::tensor::gaussian;
use crate::query::SimilarityMatrix;

pub const SLOTS: usize = 4;
const SHAPES: usize = 8;
const COLORS: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.90],
    [1.00, 0.55, 0.00],
    [0.05, 0.05, 0.05],
];
const PART_KINDS: usize = SHAPES * COLORS.len();
const BACKGROUND: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_base: usize,
    pub n_val: usize,
    pub n_novel: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Distinct parts available to each slot across all classes.
    pub parts_per_slot: usize,
    /// Part center offset, as a fraction of the slot side.
    pub position_jitter: f64,
    /// Relative part radius variation.
    pub scale_jitter: f64,
    /// Per-channel color and background shift.
    pub color_jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    /// Small distractor shapes per image.
    pub clutter: usize,
    /// Probability that a part is left out of an instance.
    pub part_dropout: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_base: 20,
            n_val: 5,
            n_novel: 5,
            images_per_class: 200,
            image_size: 32,
            parts_per_slot: 12,
            position_jitter: 0.25,
            scale_jitter: 0.2,
            color_jitter: 0.25,
            pixel_noise: 0.2,
            clutter: 3,
            part_dropout: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Same class geometry with every per-instance variation switched off.
    pub fn without_jitter(mut self) -> Self {
        self.position_jitter = 0.0;
        self.scale_jitter = 0.0;
        self.color_jitter = 0.0;
        self.pixel_noise = 0.0;
        self.clutter = 0;
        self.part_dropout = 0.0;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_base < 2 || self.images_per_class == 0 || self.image_size < 8 {
            return Err(Error::Config(
                "synth needs ≥ 2 base classes, ≥ 1 image per class and image_size ≥ 8".into(),
            ));
        }
        if self.parts_per_slot == 0 || self.parts_per_slot > PART_KINDS {
            return Err(Error::Config(format!(
                "synth.parts_per_slot must be in 1..={PART_KINDS}"
            )));
        }
        let combos = (self.parts_per_slot as f64).powi(SLOTS as i32);
        if combos < (self.n_base + self.n_val + self.n_novel) as f64 {
            return Err(Error::Config("synth: not enough part combinations for the class count".into()));
        }
        Ok(())
    }
}

/// Part id (shape · colors + color) per slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub label: String,
    pub parts: [usize; SLOTS],
    /// Base classes the parts were taken from (empty for base classes).
    pub parents: Vec<usize>,
}

impl ClassRecipe {
    fn components(&self) -> BTreeSet<(usize, usize)> {
        self.parts.iter().copied().enumerate().collect()
    }
}

pub struct SynthOutput {
    pub dataset: SplitDataset,
    /// Square over every label, base then val then novel.
    pub similarity: SimilarityMatrix,
    pub recipes: Vec<ClassRecipe>,
}

fn jaccard(a: &ClassRecipe, b: &ClassRecipe) -> f64 {
    let (ca, cb) = (a.components(), b.components());
    let inter = ca.intersection(&cb).count() as f64;
    let union = ca.union(&cb).count() as f64;
    inter / union
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    let m = u.abs().max(v.abs());
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => m <= 0.8,
        2 => (-0.85..=0.85).contains(&v) && u.abs() <= (v + 0.85) / 1.7,
        3 => (0.25..=1.0).contains(&(u * u + v * v)),
        4 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        5 => u.abs() + v.abs() <= 1.0,
        6 => m <= 0.9 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        _ => m <= 0.9 && ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35),
    }
}

fn paint(canvas: &mut [f64], size: usize, shape: usize, color: [f64; 3], cx: f64, cy: f64, r: f64) {
    let plane = size * size;
    let lo_y = (cy - r).floor().max(0.0) as usize;
    let hi_y = ((cy + r).ceil() as usize).min(size - 1);
    let lo_x = (cx - r).floor().max(0.0) as usize;
    let hi_x = ((cx + r).ceil() as usize).min(size - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let u = (x as f64 + 0.5 - cx) / r;
            let v = (y as f64 + 0.5 - cy) / r;
            if inside(shape, u, v) {
                for (c, value) in color.iter().enumerate() {
                    canvas[c * plane + y * size + x] = *value;
                }
            }
        }
    }
}

fn jitter(rng: &mut impl Rng, amount: f64) -> f64 {
    if amount > 0.0 {
        rng.gen_range(-amount..amount)
    } else {
        0.0
    }
}

fn render(recipe: &ClassRecipe, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Image> {
    let s = cfg.image_size;
    let sf = s as f64;
    let plane = s * s;
    let mut canvas = vec![0.0; 3 * plane];
    for c in 0..3 {
        let bg = BACKGROUND + jitter(rng, cfg.color_jitter);
        canvas[c * plane..(c + 1) * plane].fill(bg);
    }
    for _ in 0..cfg.clutter {
        let color = COLORS[rng.gen_range(0..COLORS.len())];
        let (cx, cy) = (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf));
        paint(&mut canvas, s, rng.gen_range(0..SHAPES), color, cx, cy, sf / 16.0);
    }
    let slot = sf / 2.0;
    for (k, &part) in recipe.parts.iter().enumerate() {
        if cfg.part_dropout > 0.0 && rng.gen_bool(cfg.part_dropout.min(1.0)) {
            continue;
        }
        let (shape, color_id) = (part / COLORS.len(), part % COLORS.len());
        let mut color = COLORS[color_id];
        for v in &mut color {
            *v = (*v + jitter(rng, cfg.color_jitter)).clamp(0.0, 1.0);
        }
        let cx = (k % 2) as f64 * slot + slot / 2.0 + jitter(rng, cfg.position_jitter) * slot;
        let cy = (k / 2) as f64 * slot + slot / 2.0 + jitter(rng, cfg.position_jitter) * slot;
        let r = slot * 0.38 * (1.0 + jitter(rng, cfg.scale_jitter));
        paint(&mut canvas, s, shape, color, cx, cy, r);
    }
    if cfg.pixel_noise > 0.0 {
        for v in &mut canvas {
            *v += cfg.pixel_noise * gaussian(rng);
        }
    }
    let data = canvas.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Image::new(s, data)
}

fn recipes(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Vec<ClassRecipe>> {
    let pools: Vec<Vec<usize>> = (0..SLOTS)
        .map(|_| index::sample(rng, PART_KINDS, cfg.parts_per_slot).into_vec())
        .collect();
    let mut out: Vec<ClassRecipe> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut attempts = 0usize;
    let next = |rng: &mut ChaCha8Rng, out: &[ClassRecipe], derived: bool| -> ([usize; SLOTS], Vec<usize>) {
        if derived {
            let pair = index::sample(rng, cfg.n_base, 2).into_vec();
            let from_first = index::sample(rng, SLOTS, SLOTS / 2).into_vec();
            let mut parts = out[pair[1]].parts;
            for k in from_first {
                parts[k] = out[pair[0]].parts[k];
            }
            (parts, pair)
        } else {
            let mut parts = [0; SLOTS];
            for (k, p) in parts.iter_mut().enumerate() {
                *p = pools[k][rng.gen_range(0..pools[k].len())];
            }
            (parts, Vec::new())
        }
    };
    let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
    let groups = [("base", cfg.n_base, false), ("val", cfg.n_val, true), ("novel", cfg.n_novel, true)];
    for (prefix, count, derived) in groups {
        for i in 0..count {
            loop {
                attempts += 1;
                if attempts > 100_000 {
                    return Err(Error::Config("synth: could not find distinct class recipes".into()));
                }
                let (parts, parents) = next(&mut local, &out, derived);
                if seen.insert(parts) {
                    out.push(ClassRecipe {
                        label: format!("{prefix}_{i:02}"),
                        parts,
                        parents,
                    });
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Generates the dataset and its ground-truth similarity matrix.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let recipes = recipes(cfg, &mut rng)?;
    let mut classes = Vec::with_capacity(recipes.len());
    for (ci, recipe) in recipes.iter().enumerate() {
        let mut irng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(ci as u64 + 1)));
        let images = (0..cfg.images_per_class)
            .map(|_| render(recipe, cfg, &mut irng))
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassImages {
            label: recipe.label.clone(),
            images,
        });
    }
    let novel = classes.split_off(cfg.n_base + cfg.n_val);
    let val = classes.split_off(cfg.n_base);
    let dataset = SplitDataset::new(cfg.image_size, classes, val, novel)?;
    let labels: Vec<String> = recipes.iter().map(|r| r.label.clone()).collect();
    let scores = recipes
        .iter()
        .map(|a| recipes.iter().map(|b| jaccard(a, b)).collect())
        .collect();
    let similarity = SimilarityMatrix::new(labels.clone(), labels, scores)?;
    Ok(SynthOutput {
        dataset,
        similarity,
        recipes,
    })
}
