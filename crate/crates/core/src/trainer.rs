//! Pretraining of the encoder on base classes, then episodic meta-training
//! of encoder and transformer against the frozen memory bank.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basetx::{BaseTransformer, ProjectionHeads, Reduce, TransformerConfig};
use crate::encoder::{global_pool, Encoder, EncoderConfig, FrozenEncoder, Mode};
use crate::episodes::{augment, sample_episode, AugmentConfig, Split, SplitDataset, DEFAULT_QUERIES};
use crate::error::{Error, Result};
use crate::evalrig::{evaluate, EvalConfig, EvalModel, FeatureCache, Method};
use crate::losses::{cross_entropy, info_nce, weighted_sum, LossBreakdown};
use crate::membank::MemoryBank;
use crate::ndkernel::checkpoint::{self, Dtype};
use crate::ndkernel::{clip_global_norm, ParamStore, Sgd, Tape, Tensor, Var};
use crate::query::{OraclePrototypes, QueryMode, Querier, SemanticSource, DEFAULT_TOP_C};

pub const PRETRAIN_VAL_WAY: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub ce: f64,
    pub infonce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Base rate multiplied by `decay` once for every milestone reached.
/// Milestones are fractions of `steps`.
pub fn lr_at(base: f64, decay: f64, milestones: &[f64], steps: usize, step: usize) -> f64 {
    let passed = milestones
        .iter()
        .filter(|&&f| step >= (f * steps as f64).round() as usize)
        .count();
    base * decay.powi(passed as i32)
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op, node } => Error::Diverged {
            step,
            reason: format!("non-finite value from {op} (node {node})"),
        },
        other => other,
    }
}

fn check_finite(step: usize, grads: &BTreeMap<String, Tensor>, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: format!("loss is {loss}"),
        });
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Diverged {
            step,
            reason: format!("non-finite gradient for {name}"),
        });
    }
    Ok(())
}

fn split_grads(grads: BTreeMap<String, Tensor>, prefix: &str) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    grads.into_iter().partition(|(k, _)| k.starts_with(prefix))
}

fn augmented_views(images: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let views: Vec<Tensor> = (0..images.shape()[0])
        .map(|i| augment(&images.slice0(i), cfg, rng))
        .collect();
    let refs: Vec<&Tensor> = views.iter().collect();
    Tensor::stack(&refs)
}

fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn range(tape: &Tape, x: Var, start: usize, len: usize) -> Result<Var> {
    tape.index_select(x, &(start..start + len).collect::<Vec<_>>())
}

// ----- pretraining ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// Fractions of `steps` at which the rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    /// Weight b of the contrastive term.
    pub balance: f64,
    pub infonce_normalize: bool,
    pub augment: AugmentConfig,
    pub clip_norm: Option<f64>,
    /// Validate every this many steps (0 disables).
    pub val_every: usize,
    pub val_tasks: usize,
    pub val_queries: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 0.1,
            momentum: 0.9,
            lr_decay: 0.1,
            milestones: vec![0.5, 0.75],
            steps: 300,
            batch_size: 64,
            balance: 0.1,
            infonce_normalize: true,
            augment: AugmentConfig::default(),
            clip_norm: None,
            val_every: 100,
            val_tasks: 100,
            val_queries: DEFAULT_QUERIES,
            log_every: 10,
            seed: 0,
        }
    }
}

pub struct PretrainOutcome {
    /// Best-validation weights (final weights when validation is off).
    pub encoder: Encoder,
    /// The N_b-way linear head.
    pub head: ParamStore,
    pub log: Vec<LogRecord>,
    pub best_val: Option<f64>,
}

/// CE of a linear head on pooled features plus, when `views2` is given,
/// the weighted contrastive term between the two views.
pub fn pretrain_objective(
    tape: &Tape,
    pooled1: Var,
    pooled2: Option<Var>,
    head_w: Var,
    head_b: Var,
    labels: &[usize],
    balance: f64,
    normalize: bool,
) -> Result<(Var, LossBreakdown)> {
    let logits = tape.matmul(pooled1, head_w)?;
    let logits = tape.add(logits, head_b)?;
    let ce = cross_entropy(tape, logits, labels)?;
    let ce_v = tape.value(ce).data()[0];
    match pooled2 {
        Some(p2) if balance != 0.0 => {
            let nce = info_nce(tape, pooled1, p2, normalize)?;
            let total = weighted_sum(tape, ce, nce, balance)?;
            let breakdown = LossBreakdown {
                loss: tape.value(total).data()[0],
                ce: ce_v,
                infonce: tape.value(nce).data()[0],
            };
            Ok((total, breakdown))
        }
        _ => Ok((ce, LossBreakdown { loss: ce_v, ce: ce_v, infonce: 0.0 })),
    }
}

fn protonet_val(ds: &SplitDataset, encoder: &Encoder, cfg: &PretrainConfig, seed: u64) -> Result<Option<f64>> {
    let n_val = ds.val().len();
    if cfg.val_every == 0 || n_val < 2 || cfg.val_tasks < 2 {
        return Ok(None);
    }
    let way = n_val.min(PRETRAIN_VAL_WAY);
    if way < PRETRAIN_VAL_WAY {
        log::warn!("validation split has {n_val} classes; using {way}-way instead of {PRETRAIN_VAL_WAY}-way");
    }
    let cache = FeatureCache::encode(ds, Split::Val, encoder)?;
    let model = EvalModel {
        features: &cache,
        phi0: None,
        transformer: None,
        bank: None,
        semantic: None,
        oracle: None,
    };
    let ecfg = EvalConfig {
        way,
        shot: 1,
        queries: cfg.val_queries,
        tasks: cfg.val_tasks,
        method: Method::Protonet,
        seed,
        ..EvalConfig::default()
    };
    Ok(Some(evaluate(ds, &model, &ecfg)?.mean_accuracy))
}

/// Trains φ₀: CE over all base classes plus b·InfoNCE on augmented pairs.
pub fn pretrain(ds: &SplitDataset, enc_cfg: &EncoderConfig, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let base = ds.base();
    if base.is_empty() || base.iter().any(|c| c.images.is_empty()) {
        return Err(Error::InsufficientData("pretraining needs a non-empty base split".into()));
    }
    if enc_cfg.input_size != ds.image_size() {
        return Err(Error::Config(format!(
            "encoder.input_size {} does not match dataset images of {}px",
            enc_cfg.input_size,
            ds.image_size()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Encoder::new(enc_cfg.clone(), &mut rng)?;
    let c = enc_cfg.channels;
    let nb = base.len();
    let bound = 1.0 / (c as f64).sqrt();
    let mut head = ParamStore::new();
    head.insert("head.weight", Tensor::uniform(vec![c, nb], -bound, bound, &mut rng));
    head.insert("head.bias", Tensor::zeros(vec![nb]));
    let mut opt = Sgd::new(cfg.momentum);
    let mut log = Vec::new();
    let mut best: Option<(f64, Encoder)> = None;
    let contrastive = cfg.balance != 0.0;

    for step in 0..cfg.steps {
        let items: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let cl = rng.gen_range(0..nb);
                (cl, rng.gen_range(0..base[cl].images.len()))
            })
            .collect();
        let labels: Vec<usize> = items.iter().map(|&(cl, _)| cl).collect();
        let images = ds.stack_items(Split::Base, &items)?;
        let v1 = augmented_views(&images, &cfg.augment, &mut rng)?;
        let batch = if contrastive {
            let v2 = augmented_views(&images, &cfg.augment, &mut rng)?;
            concat0(&[&v1, &v2])?
        } else {
            v1
        };

        let tape = Tape::new();
        let eb = encoder.params().bind(&tape, true);
        let hb = head.bind(&tape, true);
        let b = cfg.batch_size;
        let (loss, breakdown, updates) = (|| -> Result<_> {
            let x = tape.constant(batch);
            let (feat, updates) = encoder.forward(&tape, &eb, x, Mode::Train)?;
            let pooled = global_pool(&tape, feat)?;
            let (p1, p2) = if contrastive {
                (range(&tape, pooled, 0, b)?, Some(range(&tape, pooled, b, b)?))
            } else {
                (pooled, None)
            };
            let (loss, breakdown) = pretrain_objective(
                &tape,
                p1,
                p2,
                hb.var("head.weight")?,
                hb.var("head.bias")?,
                &labels,
                cfg.balance,
                cfg.infonce_normalize,
            )?;
            Ok((loss, breakdown, updates))
        })()
        .map_err(diverged(step))?;
        let grads = tape.backward(loss).map_err(diverged(step))?;
        let mut named = eb.named_grads(&grads);
        named.extend(hb.named_grads(&grads));
        check_finite(step, &named, breakdown.loss)?;
        if let Some(max) = cfg.clip_norm {
            clip_global_norm(&mut named, max);
        }
        let lr = lr_at(cfg.lr, cfg.lr_decay, &cfg.milestones, cfg.steps, step);
        let (enc_grads, head_grads) = split_grads(named, "encoder.");
        opt.step(encoder.params_mut(), &enc_grads, |_| lr)?;
        opt.step(&mut head, &head_grads, |_| lr)?;
        encoder.apply_norm_updates(&updates)?;

        let last = step + 1 == cfg.steps;
        let val_acc = if cfg.val_every > 0 && ((step + 1) % cfg.val_every == 0 || last) {
            protonet_val(ds, &encoder, cfg, cfg.seed ^ 0x7a1)?
        } else {
            None
        };
        if let Some(acc) = val_acc {
            if best.as_ref().map_or(true, |(b, _)| acc >= *b) {
                best = Some((acc, encoder.clone()));
            }
        }
        if val_acc.is_some() || last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            log.push(LogRecord {
                step,
                stage: Stage::Pretrain,
                loss: breakdown.loss,
                ce: breakdown.ce,
                infonce: breakdown.infonce,
                val_acc,
            });
        }
    }
    let (best_val, encoder) = match best {
        Some((acc, enc)) => (Some(acc), enc),
        None => (None, encoder),
    };
    Ok(PretrainOutcome {
        encoder,
        head,
        log,
        best_val,
    })
}

// ----- meta-training -------------------------------------------------------

/// Which episode images get the two augmented views for the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveImages {
    Episode,
    Support,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Transformer learning rate.
    pub lr: f64,
    pub momentum: f64,
    /// Encoder rate = lr × encoder_lr_factor.
    pub encoder_lr_factor: f64,
    /// Recorded for reference; not used by the update rule.
    pub gamma: f64,
    pub lr_decay: f64,
    pub milestones: Vec<f64>,
    pub steps: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub temperature: f64,
    pub balance: f64,
    pub infonce_normalize: bool,
    pub contrastive_images: ContrastiveImages,
    pub k_total: usize,
    pub top_c: usize,
    pub query_mode: QueryMode,
    pub method: Method,
    pub st_reduce: Reduce,
    pub transformer: TransformerConfig,
    pub augment: AugmentConfig,
    pub clip_norm: Option<f64>,
    pub val_every: usize,
    pub val_tasks: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            lr: 0.002,
            momentum: 0.9,
            encoder_lr_factor: 0.1,
            gamma: 20.0,
            lr_decay: 0.1,
            milestones: vec![0.5, 0.75],
            steps: 500,
            way: 5,
            shot: 1,
            queries: DEFAULT_QUERIES,
            temperature: 0.1,
            balance: 0.1,
            infonce_normalize: true,
            contrastive_images: ContrastiveImages::Support,
            k_total: 20,
            top_c: DEFAULT_TOP_C,
            query_mode: QueryMode::Semantic,
            method: Method::Bt,
            st_reduce: Reduce::Sum,
            transformer: TransformerConfig::default(),
            augment: AugmentConfig::default(),
            clip_norm: None,
            val_every: 100,
            val_tasks: 100,
            log_every: 10,
            seed: 0,
        }
    }
}

/// Meta-trained encoder plus transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaModel {
    pub encoder: Encoder,
    pub transformer: BaseTransformer,
}

impl MetaModel {
    pub fn to_store(&self) -> ParamStore {
        let mut store = self.encoder.to_store();
        store.extend(self.transformer.heads.params());
        store
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        checkpoint::save(path, &self.to_store(), dtype)
    }

    pub fn load(path: &Path, enc_cfg: EncoderConfig, tcfg: TransformerConfig) -> Result<Self> {
        let store = checkpoint::load(path)?;
        let encoder = Encoder::from_store(enc_cfg, &store.with_prefix("encoder."))?;
        let heads = ProjectionHeads::from_store(encoder.config().channels, tcfg.heads, &store)?;
        Ok(MetaModel {
            encoder,
            transformer: BaseTransformer { heads, config: tcfg },
        })
    }
}

/// Bank fetches made during meta-training and how many returned an
/// instance of the support's own class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchAudit {
    pub fetches: usize,
    pub instances: usize,
    pub same_class: usize,
}

pub struct MetaOutcome {
    pub model: MetaModel,
    pub log: Vec<LogRecord>,
    pub best_val: Option<f64>,
    pub audit: FetchAudit,
}

/// Read-only inputs shared by meta-training and its validation.
#[derive(Clone, Copy)]
pub struct MetaInputs<'a> {
    pub dataset: &'a SplitDataset,
    pub phi0: &'a FrozenEncoder,
    pub bank: &'a MemoryBank,
    pub semantic: Option<&'a SemanticSource>,
    pub oracle: Option<&'a OraclePrototypes>,
}

fn meta_val(
    inputs: &MetaInputs,
    model: &MetaModel,
    phi0_val: Option<&FeatureCache>,
    cfg: &MetaConfig,
) -> Result<Option<f64>> {
    let ds = inputs.dataset;
    if cfg.val_every == 0 || cfg.val_tasks < 2 || ds.val().len() < cfg.way {
        return Ok(None);
    }
    let cache = FeatureCache::encode(ds, Split::Val, &model.encoder)?;
    let em = EvalModel {
        features: &cache,
        phi0: phi0_val,
        transformer: Some(&model.transformer),
        bank: Some(inputs.bank),
        semantic: inputs.semantic,
        oracle: inputs.oracle,
    };
    let ecfg = EvalConfig {
        way: cfg.way,
        shot: 1,
        tasks: cfg.val_tasks,
        method: cfg.method,
        query_mode: cfg.query_mode,
        top_c: cfg.top_c,
        k_total: cfg.k_total,
        temperature: cfg.temperature,
        st_reduce: cfg.st_reduce,
        seed: cfg.seed ^ 0x7a1,
        ..EvalConfig::default()
    };
    Ok(Some(evaluate(ds, &em, &ecfg)?.mean_accuracy))
}

/// Episodic training of φ (from φ₀) and the transformer on base classes.
pub fn meta_train(inputs: &MetaInputs, cfg: &MetaConfig) -> Result<MetaOutcome> {
    let MetaInputs { dataset: ds, phi0, bank, .. } = *inputs;
    if bank.fingerprint() != phi0.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: phi0.fingerprint().to_string(),
            found: bank.fingerprint().to_string(),
        });
    }
    if bank.labels() != ds.labels(Split::Base).as_slice() {
        return Err(Error::Config("bank classes do not match the dataset's base split".into()));
    }
    if cfg.method == Method::Protonet {
        return Err(Error::Config("meta-training needs method bt or st".into()));
    }
    let querier = Querier::new(cfg.query_mode, cfg.top_c, bank, inputs.semantic, inputs.oracle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let channels = phi0.config().channels;
    let mut model = MetaModel {
        encoder: phi0.thaw_copy(),
        transformer: BaseTransformer::new(channels, cfg.transformer.clone(), &mut rng)?,
    };
    let phi0_val = if cfg.query_mode == QueryMode::Visual && cfg.val_every > 0 && !ds.val().is_empty() {
        Some(FeatureCache::encode_frozen(ds, Split::Val, phi0)?)
    } else {
        None
    };
    let mut opt = Sgd::new(cfg.momentum);
    let mut log = Vec::new();
    let mut audit = FetchAudit::default();
    let mut best: Option<(f64, MetaModel)> = None;
    let (way, shot) = (cfg.way, cfg.shot);
    let contrastive = cfg.balance != 0.0;
    let map_shape = phi0.config().feature_shape();

    for step in 0..cfg.steps {
        let episode = sample_episode(ds, Split::Base, way, shot, cfg.queries, rng.gen())?;
        let sup_images = episode.support_images(ds)?;
        let qry_images = episode.query_images(ds)?;
        let ns = sup_images.shape()[0];
        let nq = qry_images.shape()[0];

        let bases = if cfg.method == Method::Bt {
            let mut stacks = Vec::with_capacity(way);
            for (label, &class) in episode.classes.iter().enumerate() {
                let idx: Vec<usize> = (0..ns).filter(|&i| episode.support[i].label == label).collect();
                let phi0_map = if cfg.query_mode == QueryMode::Visual {
                    let own = sup_images_subset(&sup_images, &idx)?;
                    Some(mean_feature(&phi0.encode_tensor(&own)?)?)
                } else {
                    None
                };
                let top = querier.top(&ds.base()[class].label, phi0_map.as_ref(), Some(class))?;
                let picks = bank.fetch(&top, cfg.k_total, Some(class), &mut rng)?;
                audit.fetches += 1;
                audit.instances += picks.len();
                audit.same_class += picks.iter().filter(|&&(c, _)| c == class).count();
                stacks.push(bank.gather(&picks)?);
            }
            let refs: Vec<&Tensor> = stacks.iter().collect();
            Some(Tensor::stack(&refs)?)
        } else {
            None
        };

        let mut parts = vec![&sup_images, &qry_images];
        let views;
        let nv = match cfg.contrastive_images {
            ContrastiveImages::Episode => ns + nq,
            ContrastiveImages::Support => ns,
        };
        if contrastive {
            let source = match cfg.contrastive_images {
                ContrastiveImages::Episode => concat0(&[&sup_images, &qry_images])?,
                ContrastiveImages::Support => sup_images.clone(),
            };
            views = concat0(&[
                &augmented_views(&source, &cfg.augment, &mut rng)?,
                &augmented_views(&source, &cfg.augment, &mut rng)?,
            ])?;
            parts.push(&views);
        }
        let batch = concat0(&parts)?;
        let labels = episode.query_labels();

        let tape = Tape::new();
        let eb = model.encoder.params().bind(&tape, true);
        let tb = model.transformer.bind(&tape, true);
        let (loss, breakdown, updates) = (|| -> Result<_> {
            let x = tape.constant(batch);
            let (feat, updates) = model.encoder.forward(&tape, &eb, x, Mode::Train)?;
            let sup = range(&tape, feat, 0, ns)?;
            let qry = range(&tape, feat, ns, nq)?;
            let mut grouped = vec![way, shot];
            grouped.extend(map_shape);
            let sup = tape.reshape(sup, &grouped)?;
            let bt = &model.transformer;
            let protos = match &bases {
                Some(b) => {
                    let q = tape.mean_axes(sup, &[1])?;
                    let mut qs = vec![way];
                    qs.extend(map_shape);
                    let q = tape.reshape(q, &qs)?;
                    bt.adapt(&tape, &tb, q, tape.constant(b.clone()))?.prototypes
                }
                None => bt.support_adapt(&tape, &tb, sup, cfg.st_reduce)?.prototypes,
            };
            let logits = bt.logits(&tape, &tb, qry, protos, cfg.temperature)?;
            let ce = cross_entropy(&tape, logits, &labels)?;
            let ce_v = tape.value(ce).data()[0];
            if contrastive {
                let va = global_pool(&tape, range(&tape, feat, ns + nq, nv)?)?;
                let vb = global_pool(&tape, range(&tape, feat, ns + nq + nv, nv)?)?;
                let nce = info_nce(&tape, va, vb, cfg.infonce_normalize)?;
                let total = weighted_sum(&tape, ce, nce, cfg.balance)?;
                let b = LossBreakdown {
                    loss: tape.value(total).data()[0],
                    ce: ce_v,
                    infonce: tape.value(nce).data()[0],
                };
                Ok((total, b, updates))
            } else {
                Ok((ce, LossBreakdown { loss: ce_v, ce: ce_v, infonce: 0.0 }, updates))
            }
        })()
        .map_err(diverged(step))?;
        let grads = tape.backward(loss).map_err(diverged(step))?;
        let mut named = eb.named_grads(&grads);
        named.extend(tb.named_grads(&grads));
        check_finite(step, &named, breakdown.loss)?;
        if let Some(max) = cfg.clip_norm {
            clip_global_norm(&mut named, max);
        }
        let lr = lr_at(cfg.lr, cfg.lr_decay, &cfg.milestones, cfg.steps, step);
        let (enc_grads, tx_grads) = split_grads(named, "encoder.");
        opt.step(model.encoder.params_mut(), &enc_grads, |_| lr * cfg.encoder_lr_factor)?;
        opt.step(model.transformer.heads.params_mut(), &tx_grads, |_| lr)?;
        model.encoder.apply_norm_updates(&updates)?;

        let last = step + 1 == cfg.steps;
        let val_acc = if cfg.val_every > 0 && ((step + 1) % cfg.val_every == 0 || last) {
            meta_val(inputs, &model, phi0_val.as_ref(), cfg)?
        } else {
            None
        };
        if let Some(acc) = val_acc {
            if best.as_ref().map_or(true, |(b, _)| acc >= *b) {
                best = Some((acc, model.clone()));
            }
        }
        if val_acc.is_some() || last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            log.push(LogRecord {
                step,
                stage: Stage::Meta,
                loss: breakdown.loss,
                ce: breakdown.ce,
                infonce: breakdown.infonce,
                val_acc,
            });
        }
    }
    let (best_val, model) = match best {
        Some((acc, m)) => (Some(acc), m),
        None => (None, model),
    };
    Ok(MetaOutcome {
        model,
        log,
        best_val,
        audit,
    })
}

/// Pretrains an encoder with base and novel classes merged into one
/// training split, then returns every class's pooled mean feature.
pub fn oracle_prototypes(
    ds: &SplitDataset,
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<OraclePrototypes> {
    let mut merged = ds.base().to_vec();
    merged.extend(ds.novel().iter().cloned());
    let all = SplitDataset::new(ds.image_size(), merged, ds.val().to_vec(), Vec::new())?;
    let encoder = pretrain(&all, enc_cfg, cfg)?.encoder;
    let mut labels = Vec::new();
    let mut prototypes = Vec::new();
    for split in [Split::Base, Split::Novel] {
        let cache = FeatureCache::encode(ds, split, &encoder)?;
        labels.extend(ds.labels(split));
        prototypes.extend(cache.class_prototypes());
    }
    Ok(OraclePrototypes { labels, prototypes })
}

fn sup_images_subset(images: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let views: Vec<Tensor> = idx.iter().map(|&i| images.slice0(i)).collect();
    let refs: Vec<&Tensor> = views.iter().collect();
    Tensor::stack(&refs)
}

fn mean_feature(stack: &Tensor) -> Result<crate::encoder::FeatureMap> {
    let n = stack.shape()[0];
    let per = stack.numel() / n;
    let mut acc = vec![0.0; per];
    for chunk in stack.data().chunks(per) {
        acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v / n as f64);
    }
    Ok(crate::encoder::FeatureMap {
        tensor: Tensor::new(stack.shape()[1..].to_vec(), acc)?,
        provenance: crate::encoder::Provenance::FrozenPhi0,
    })
}
