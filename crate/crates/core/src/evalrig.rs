//! Many-task evaluation with 95% confidence intervals, shot sweeps and
//! attention heatmap export.
//!
//! Evaluation runs in feature space: every image of the evaluated split is
//! encoded once (eval mode is deterministic), and tasks only gather cached
//! maps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basetx::{argmax, BaseTransformer, NormMode, Reduce};
use crate::encoder::{Encoder, FeatureMap, FrozenEncoder, Provenance};
use crate::episodes::{sample_episode, Episode, Split, SplitDataset, DEFAULT_QUERIES};
use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::ndkernel::{Tape, Tensor};
use crate::query::{OraclePrototypes, QueryMode, Querier, SemanticSource, DEFAULT_TOP_C};

pub const Z95: f64 = 1.96;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Bt,
    St,
    Protonet,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bt => "bt",
            Method::St => "st",
            Method::Protonet => "protonet",
        }
    }
}

/// Where support instances are averaged in the multi-shot case.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvgMode {
    /// Average support maps, then adapt once.
    #[default]
    Pre,
    /// Adapt each support, then average the prototypes.
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub tasks: usize,
    pub method: Method,
    pub avg_mode: AvgMode,
    pub query_mode: QueryMode,
    pub top_c: usize,
    pub k_total: usize,
    pub temperature: f64,
    pub st_reduce: Reduce,
    pub protonet_reduce: Reduce,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            way: 5,
            shot: 1,
            queries: DEFAULT_QUERIES,
            tasks: 600,
            method: Method::Bt,
            avg_mode: AvgMode::Pre,
            query_mode: QueryMode::Semantic,
            top_c: DEFAULT_TOP_C,
            k_total: 20,
            temperature: 0.1,
            st_reduce: Reduce::Sum,
            protonet_reduce: Reduce::Sum,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    /// Percent.
    pub mean_accuracy: f64,
    /// Percent.
    pub ci95_halfwidth: f64,
    /// Fractions in [0, 1], in task order.
    pub per_task: Vec<f64>,
    pub config: EvalConfig,
}

/// Mean and 1.96·s/√T of `xs`, with s the sample standard deviation.
pub fn mean_ci95(xs: &[f64]) -> Result<(f64, f64)> {
    let t = xs.len();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "confidence interval needs at least 2 tasks, got {t}"
        )));
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return Ok((xs[0], 0.0));
    }
    let n = t as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, Z95 * var.sqrt() / n.sqrt()))
}

impl EvalReport {
    pub fn from_accuracies(per_task: Vec<f64>, config: EvalConfig) -> Result<Self> {
        let (mean, ci) = mean_ci95(&per_task)?;
        Ok(EvalReport {
            tasks: per_task.len(),
            mean_accuracy: 100.0 * mean,
            ci95_halfwidth: 100.0 * ci,
            per_task,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Eval-mode feature maps of every image in one split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub split: Split,
    /// Per class, n×C×H×W.
    maps: Vec<Tensor>,
}

impl FeatureCache {
    pub fn encode(ds: &SplitDataset, split: Split, encoder: &Encoder) -> Result<Self> {
        let maps = ds
            .split(split)
            .iter()
            .map(|class| {
                let all: Vec<usize> = (0..class.images.len()).collect();
                encoder.encode_tensor(&ds.stack(class, &all)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureCache { split, maps })
    }

    pub fn encode_frozen(ds: &SplitDataset, split: Split, encoder: &FrozenEncoder) -> Result<Self> {
        Self::encode(ds, split, encoder.weights())
    }

    pub fn class_maps(&self, class: usize) -> &Tensor {
        &self.maps[class]
    }

    pub fn map_shape(&self) -> &[usize] {
        &self.maps[0].shape()[1..]
    }

    pub fn gather(&self, items: &[(usize, usize)]) -> Result<Tensor> {
        let shape = self.map_shape().to_vec();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(items.len() * per);
        for &(c, i) in items {
            data.extend_from_slice(&self.maps[c].data()[i * per..(i + 1) * per]);
        }
        let mut out = vec![items.len()];
        out.extend(shape);
        Tensor::new(out, data)
    }

    /// Mean over the given instances of one class.
    pub fn mean_map(&self, items: &[(usize, usize)], provenance: Provenance) -> Result<FeatureMap> {
        let stack = self.gather(items)?;
        let per: usize = self.map_shape().iter().product();
        let mut acc = vec![0.0; per];
        for chunk in stack.data().chunks(per) {
            acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= items.len() as f64);
        Ok(FeatureMap {
            tensor: Tensor::new(self.map_shape().to_vec(), acc)?,
            provenance,
        })
    }

    /// Per-class mean pooled embedding over every cached instance.
    pub fn class_prototypes(&self) -> Vec<Vec<f64>> {
        self.maps
            .iter()
            .map(|m| {
                let s = m.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut acc = vec![0.0; c];
                for i in 0..n {
                    for (ch, a) in acc.iter_mut().enumerate() {
                        let off = (i * c + ch) * hw;
                        *a += m.data()[off..off + hw].iter().sum::<f64>();
                    }
                }
                acc.iter().map(|a| a / (n * hw) as f64).collect()
            })
            .collect()
    }
}

/// Everything a method may need at test time.
#[derive(Clone, Copy)]
pub struct EvalModel<'a> {
    /// Features of the evaluated split from the (meta-trained) encoder.
    pub features: &'a FeatureCache,
    /// φ₀ features of the same split, for visual querying.
    pub phi0: Option<&'a FeatureCache>,
    pub transformer: Option<&'a BaseTransformer>,
    pub bank: Option<&'a MemoryBank>,
    pub semantic: Option<&'a SemanticSource>,
    pub oracle: Option<&'a OraclePrototypes>,
}

fn items_of(episode: &Episode, label: usize) -> Vec<(usize, usize)> {
    episode
        .support
        .iter()
        .filter(|i| i.label == label)
        .map(|i| (i.class, i.instance))
        .collect()
}

/// Picks and stacks k_total bank maps for each query group, giving
/// groups×k×C×H×W.
fn fetch_bases(
    querier: &Querier,
    bank: &MemoryBank,
    groups: &[(String, Option<FeatureMap>)],
    k_total: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut stacks = Vec::with_capacity(groups.len());
    for (label, phi0) in groups {
        let top = querier.top(label, phi0.as_ref(), None)?;
        let picks = bank.fetch(&top, k_total, None, rng)?;
        stacks.push(bank.gather(&picks)?);
    }
    let refs: Vec<&Tensor> = stacks.iter().collect();
    Tensor::stack(&refs)
}

fn transformer_logits(
    model: &EvalModel,
    cfg: &EvalConfig,
    ds: &SplitDataset,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let bt = model
        .transformer
        .ok_or_else(|| Error::Config(format!("method {} needs a transformer", cfg.method.name())))?;
    let feats = model.features;
    let way = episode.way;
    let shot = episode.shot;
    let tape = Tape::new();
    let bound = bt.bind(&tape, false);
    let tests = tape.constant(feats.gather(&episode.query.iter().map(|i| (i.class, i.instance)).collect::<Vec<_>>())?);
    let map_shape = feats.map_shape().to_vec();

    let prototypes = match cfg.method {
        Method::St => {
            let items: Vec<_> = episode.support.iter().map(|i| (i.class, i.instance)).collect();
            let mut shape = vec![way, shot];
            shape.extend(&map_shape);
            let cs = tape.constant(feats.gather(&items)?.reshape(shape)?);
            bt.support_adapt(&tape, &bound, cs, cfg.st_reduce)?.prototypes
        }
        Method::Bt => {
            let bank = model.bank.ok_or_else(|| Error::Config("method bt needs a memory bank".into()))?;
            let querier = Querier::new(cfg.query_mode, cfg.top_c, bank, model.semantic, model.oracle)?;
            let class_label = |c: usize| ds.split(episode.split)[c].label.clone();
            let phi0_of = |items: &[(usize, usize)]| -> Result<Option<FeatureMap>> {
                match (cfg.query_mode, model.phi0) {
                    (QueryMode::Visual, Some(cache)) => Ok(Some(cache.mean_map(items, Provenance::FrozenPhi0)?)),
                    (QueryMode::Visual, None) => Err(Error::Config("visual querying needs φ₀ features".into())),
                    _ => Ok(None),
                }
            };
            match cfg.avg_mode {
                AvgMode::Pre => {
                    let mut groups = Vec::with_capacity(way);
                    let mut means = Vec::with_capacity(way);
                    for (label, &c) in episode.classes.iter().enumerate() {
                        let items = items_of(episode, label);
                        means.push(feats.mean_map(&items, Provenance::TrainablePhi)?.tensor);
                        groups.push((class_label(c), phi0_of(&items)?));
                    }
                    let bases = fetch_bases(&querier, bank, &groups, cfg.k_total, rng)?;
                    let refs: Vec<&Tensor> = means.iter().collect();
                    let q = tape.constant(Tensor::stack(&refs)?);
                    let b = tape.constant(bases);
                    bt.adapt(&tape, &bound, q, b)?.prototypes
                }
                AvgMode::Post => {
                    let items: Vec<_> = episode.support.iter().map(|i| (i.class, i.instance)).collect();
                    let groups = episode
                        .support
                        .iter()
                        .map(|i| Ok((class_label(i.class), phi0_of(&[(i.class, i.instance)])?)))
                        .collect::<Result<Vec<_>>>()?;
                    let bases = fetch_bases(&querier, bank, &groups, cfg.k_total, rng)?;
                    let q = tape.constant(feats.gather(&items)?);
                    let b = tape.constant(bases);
                    let p = bt.adapt(&tape, &bound, q, b)?.prototypes;
                    let s = tape.shape(p);
                    let p = tape.reshape(p, &[way, shot, s[1], s[2]])?;
                    let p = tape.mean_axes(p, &[1])?;
                    tape.reshape(p, &[way, s[1], s[2]])?
                }
            }
        }
        Method::Protonet => unreachable!("handled by protonet_logits"),
    };
    let logits = bt.logits(&tape, &bound, tests, prototypes, cfg.temperature)?;
    let out = tape.value(logits).clone();
    Ok(out)
}

fn protonet_logits(model: &EvalModel, cfg: &EvalConfig, episode: &Episode) -> Result<Tensor> {
    let feats = model.features;
    let pooled = |items: &[(usize, usize)]| -> Result<Vec<Vec<f64>>> {
        let t = feats.gather(items)?;
        let s = t.shape().to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        Ok(t.data()
            .chunks(c * hw)
            .map(|img| img.chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect())
            .collect())
    };
    let mut protos = Vec::with_capacity(episode.way);
    for label in 0..episode.way {
        let emb = pooled(&items_of(episode, label))?;
        let mut p = vec![0.0; emb[0].len()];
        for e in &emb {
            p.iter_mut().zip(e).for_each(|(a, v)| *a += v);
        }
        if cfg.protonet_reduce == Reduce::Mean {
            p.iter_mut().for_each(|a| *a /= emb.len() as f64);
        }
        protos.push(p);
    }
    let tests = pooled(&episode.query.iter().map(|i| (i.class, i.instance)).collect::<Vec<_>>())?;
    let mut out = Vec::with_capacity(tests.len() * protos.len());
    for t in &tests {
        for p in &protos {
            out.push(-t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        }
    }
    Tensor::new(vec![tests.len(), protos.len()], out)
}

/// Accuracy of one task drawn with `seed`.
pub fn run_task(ds: &SplitDataset, model: &EvalModel, cfg: &EvalConfig, seed: u64) -> Result<f64> {
    let episode = sample_episode(ds, model.features.split, cfg.way, cfg.shot, cfg.queries, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let logits = match cfg.method {
        Method::Protonet => protonet_logits(model, cfg, &episode)?,
        _ => transformer_logits(model, cfg, ds, &episode, &mut rng)?,
    };
    let n = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(n)
        .zip(&episode.query)
        .filter(|(row, item)| argmax(row) == item.label)
        .count();
    Ok(correct as f64 / episode.query.len() as f64)
}

/// Runs `cfg.tasks` tasks with seeds `cfg.seed + t`.
pub fn evaluate(ds: &SplitDataset, model: &EvalModel, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.tasks < 2 {
        return Err(Error::InvalidArgument(format!(
            "confidence interval needs at least 2 tasks, got {}",
            cfg.tasks
        )));
    }
    let seeds: Vec<u64> = (0..cfg.tasks as u64).map(|t| cfg.seed.wrapping_add(t)).collect();
    let accs: Vec<f64> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        pool.install(|| {
            seeds
                .par_iter()
                .map(|&s| run_task(ds, model, cfg, s))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        seeds.iter().map(|&s| run_task(ds, model, cfg, s)).collect::<Result<Vec<_>>>()?
    };
    EvalReport::from_accuracies(accs, cfg.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub shot: usize,
    pub method: Method,
    pub report: EvalReport,
}

/// One report per (shot, method).
pub fn shot_sweep(
    ds: &SplitDataset,
    models: &[(Method, EvalModel)],
    base: &EvalConfig,
    shots: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &shot in shots {
        for (method, model) in models {
            let cfg = EvalConfig {
                shot,
                method: *method,
                ..base.clone()
            };
            rows.push(SweepRow {
                shot,
                method: *method,
                report: evaluate(ds, model, &cfg)?,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("shot,mode,mean,ci95\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4}",
            r.shot,
            r.method.name(),
            r.report.mean_accuracy,
            r.report.ci95_halfwidth
        );
    }
    s
}

pub fn write_sweep(rows: &[SweepRow], csv: &Path, json: &Path) -> Result<()> {
    std::fs::write(csv, sweep_csv(rows)).map_err(|e| Error::io(csv, e))?;
    std::fs::write(json, serde_json::to_vec_pretty(rows)?).map_err(|e| Error::io(json, e))
}

// ----- attention heatmaps ------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub index: usize,
    pub class: String,
    /// Attention over this instance's locations, averaged over support
    /// locations, H×W.
    pub grid: Vec<Vec<f64>>,
    pub heatmap: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub mode: NormMode,
    /// [M, k, N].
    pub shape: [usize; 3],
    /// Full head-averaged attention, m × j × n.
    pub scores: Vec<Vec<Vec<f64>>>,
    pub instances: Vec<HeatmapEntry>,
}

/// Bilinear resize of an h×w grid to size×size (align-corners = false).
pub fn resize_bilinear(grid: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = ((i as f64 + 0.5) * h as f64 / size as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..size {
            let x = ((j as f64 + 0.5) * w as f64 / size as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let at = |yy: usize, xx: usize| grid[yy * w + xx];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Min-max scales to 0..=255; a constant input maps to all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Adapts `support` against `bases` and writes one heatmap per base
/// instance plus `attention.json` into `dir`.
pub fn export_attention(
    bt: &BaseTransformer,
    support: &FeatureMap,
    bases: &[FeatureMap],
    base_labels: &[String],
    image_size: usize,
    dir: &Path,
) -> Result<(AttentionExport, Vec<PathBuf>)> {
    if bases.len() != base_labels.len() {
        return Err(Error::InvalidArgument("one label per base instance required".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (_, heads) = crate::basetx::base_adapted_prototype(support, bases, bt, 0)?;
    let s = heads[0].scores.shape().to_vec();
    let (m, k, n) = (s[0], s[1], s[2]);
    let mut avg = vec![0.0; m * k * n];
    for h in &heads {
        avg.iter_mut().zip(h.scores.data()).for_each(|(a, v)| *a += v / heads.len() as f64);
    }
    let hw = (bases[0].tensor.shape()[1], bases[0].tensor.shape()[2]);
    let mut instances = Vec::with_capacity(k);
    let mut paths = Vec::with_capacity(k);
    for j in 0..k {
        let mut grid = vec![0.0; n];
        for mi in 0..m {
            for ni in 0..n {
                grid[ni] += avg[(mi * k + j) * n + ni] / m as f64;
            }
        }
        let name = format!("attn_{j:02}.pgm");
        let path = dir.join(&name);
        write_pgm(&path, image_size, image_size, &to_gray(&resize_bilinear(&grid, hw.0, hw.1, image_size)))?;
        paths.push(path);
        instances.push(HeatmapEntry {
            index: j,
            class: base_labels[j].clone(),
            grid: grid.chunks(hw.1).map(<[f64]>::to_vec).collect(),
            heatmap: name,
        });
    }
    let export = AttentionExport {
        mode: bt.config.norm_mode,
        shape: [m, k, n],
        scores: (0..m)
            .map(|mi| (0..k).map(|j| avg[(mi * k + j) * n..(mi * k + j + 1) * n].to_vec()).collect())
            .collect(),
        instances,
    };
    let json = dir.join("attention.json");
    std::fs::write(&json, serde_json::to_vec_pretty(&export)?).map_err(|e| Error::io(&json, e))?;
    paths.push(json);
    Ok((export, paths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basetx::{ProjectionHeads, TransformerConfig};

    #[test]
    fn ci_closed_form() {
        let (mean, ci) = mean_ci95(&[0.6, 0.8]).unwrap();
        assert!((mean - 0.7).abs() < 1e-12);
        let expected = 1.96 * (0.02f64).sqrt() / 2f64.sqrt();
        assert!((ci - expected).abs() < 1e-12);
        assert!((ci - 0.196).abs() < 1e-3);
    }

    #[test]
    fn zero_variance_ci() {
        let r = EvalReport::from_accuracies(vec![0.7; 50], EvalConfig::default()).unwrap();
        assert_eq!(r.ci95_halfwidth, 0.0);
        assert!((r.mean_accuracy - 70.0).abs() < 1e-12);
    }

    #[test]
    fn single_task_rejected() {
        assert!(mean_ci95(&[0.5]).is_err());
    }

    #[test]
    fn sweep_csv_header() {
        let report = EvalReport::from_accuracies(vec![0.5, 0.7], EvalConfig::default()).unwrap();
        let rows = vec![SweepRow { shot: 1, method: Method::St, report }];
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("shot,mode,mean,ci95\n1,st,60.0000,"));
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let out = resize_bilinear(&[0.25; 4], 2, 2, 32);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(to_gray(&out), vec![0; 1024]);
    }

    #[test]
    fn gray_spans_full_range() {
        let out = to_gray(&resize_bilinear(&[0.1, 0.2, 0.3, 0.9], 2, 2, 8));
        assert_eq!(*out.iter().min().unwrap(), 0);
        assert_eq!(*out.iter().max().unwrap(), 255);
    }

    #[test]
    fn export_uniform_attention() {
        let mut heads = ProjectionHeads::identity(2);
        heads.zero('k');
        let bt = BaseTransformer { heads, config: TransformerConfig::default() };
        let fm = |v: f64| FeatureMap {
            tensor: Tensor::full(vec![2, 2, 2], v),
            provenance: Provenance::FrozenPhi0,
        };
        let dir = tempfile::tempdir().unwrap();
        let (export, paths) =
            export_attention(&bt, &fm(1.0), &[fm(0.5), fm(2.0)], &["a".into(), "b".into()], 8, dir.path()).unwrap();
        assert_eq!(export.shape, [4, 2, 4]);
        for row in &export.scores {
            let total: f64 = row.iter().flatten().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let pgm = std::fs::read(&paths[0]).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        let pixels = &pgm[pgm.len() - 64..];
        assert!(pixels.iter().all(|&p| p == pixels[0]));
        assert!(dir.path().join("attention.json").exists());
    }
}
