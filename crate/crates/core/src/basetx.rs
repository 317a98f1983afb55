//! Cross-attention prototype adaptation.
//!
//! Support feature maps are projected by `Q` into transformer queries, the
//! feature maps of retrieved base instances by `K` and `V` into keys and
//! values. Each support location attends over every location of every base
//! instance; the attended values are added to the query to give the adapted
//! prototype, and test maps are scored by mean squared distance to it in the
//! `Q`-projected space.
//!
//! The same attend/compose path also runs the support-only variant (keys and
//! values are the class's own supports) and a pooled prototypical baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::ndkernel::{Bound, ParamStore, Tape, Tensor, Var};

/// Axes over which attention logits are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// For each support location m, normalize over (base instance j, location n).
    #[default]
    PerQuery,
    /// One joint normalization over (m, j, n).
    LiteralMjn,
}

/// How several supports of one class are reduced to a single prototype input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeKind {
    BaseAdapted,
    SupportAdapted,
    Protonet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub heads: usize,
    pub norm_mode: NormMode,
    /// Divide attention logits by sqrt(d / heads).
    pub scale_logits: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            heads: 1,
            norm_mode: NormMode::PerQuery,
            scale_logits: false,
        }
    }
}

/// Q, K and V linear maps C → d (d == C), split into `heads` column blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    channels: usize,
    heads: usize,
    params: ParamStore,
}

pub fn head_param(which: char, head: usize) -> String {
    format!("basetx.{which}.head{head}")
}

impl ProjectionHeads {
    /// Kaiming-uniform fan-in initialization of all three maps.
    pub fn new(channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::check_dims(channels, heads)?;
        let dh = channels / heads;
        let bound = (6.0 / channels as f64).sqrt();
        let mut params = ParamStore::new();
        for which in ['q', 'k', 'v'] {
            for h in 0..heads {
                params.insert(
                    head_param(which, h),
                    Tensor::uniform(vec![channels, dh], -bound, bound, rng),
                );
            }
        }
        Ok(ProjectionHeads {
            channels,
            heads,
            params,
        })
    }

    fn check_dims(channels: usize, heads: usize) -> Result<()> {
        if heads == 0 || channels == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "channels ({channels}) must be a positive multiple of heads ({heads})"
            )));
        }
        Ok(())
    }

    /// Single-head maps with explicit C×C weights.
    pub fn single(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let c = q.shape()[0];
        for t in [&q, &k, &v] {
            if t.shape() != [c, c] {
                return Err(Error::shape("projection heads", &[c, c], t.shape()));
            }
        }
        let mut params = ParamStore::new();
        params.insert(head_param('q', 0), q);
        params.insert(head_param('k', 0), k);
        params.insert(head_param('v', 0), v);
        Ok(ProjectionHeads {
            channels: c,
            heads: 1,
            params,
        })
    }

    pub fn identity(channels: usize) -> Self {
        let mut eye = Tensor::zeros(vec![channels, channels]);
        for i in 0..channels {
            eye.set(&[i, i], 1.0);
        }
        Self::single(eye.clone(), eye.clone(), eye).expect("square identity")
    }

    /// Rebuilds the heads from the `basetx.*` entries of a checkpoint.
    pub fn from_store(channels: usize, heads: usize, store: &ParamStore) -> Result<Self> {
        Self::check_dims(channels, heads)?;
        let dh = channels / heads;
        let mut params = ParamStore::new();
        for which in ['q', 'k', 'v'] {
            for h in 0..heads {
                let name = head_param(which, h);
                let t = store.get(&name)?;
                if t.shape() != [channels, dh] {
                    return Err(Error::shape("projection heads", &[channels, dh], t.shape()));
                }
                params.insert(name, t.clone());
            }
        }
        Ok(ProjectionHeads {
            channels,
            heads,
            params,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn zero(&mut self, which: char) {
        for h in 0..self.heads {
            if let Ok(t) = self.params.get_mut(&head_param(which, h)) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Attention scores for one support instance, laid out M × k × N.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor {
    pub scores: Tensor,
    pub mode: NormMode,
}

impl AttentionTensor {
    /// Largest deviation from the normalization contract of `mode`.
    pub fn normalization_error(&self) -> f64 {
        let m = self.scores.shape()[0];
        let per_m: usize = self.scores.shape()[1..].iter().product();
        match self.mode {
            NormMode::PerQuery => self
                .scores
                .data()
                .chunks(per_m)
                .map(|c| (c.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max),
            NormMode::LiteralMjn => {
                debug_assert!(m > 0);
                (self.scores.sum() - 1.0).abs()
            }
        }
    }
}

/// A prototype over the spatial grid, M × d.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedPrototype {
    pub p: Tensor,
    pub class_id: usize,
    pub kind: PrototypeKind,
}

/// Tape outputs of one batched adaptation.
pub struct Adapted {
    /// S × M × d.
    pub prototypes: Var,
    /// Per head, S × M × (k·N).
    pub attention: Vec<Var>,
}

/// Reshapes B×C×H×W maps into B×(H·W)×C token rows (row-major over H, W).
pub fn to_tokens(tape: &Tape, maps: Var) -> Result<Var> {
    let s = tape.shape(maps);
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "to_tokens",
            shape: s,
            reason: "expects B×C×H×W".into(),
        });
    }
    let p = tape.permute(maps, &[0, 2, 3, 1])?;
    tape.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

/// The trainable cross-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseTransformer {
    pub heads: ProjectionHeads,
    pub config: TransformerConfig,
}

impl BaseTransformer {
    pub fn new(channels: usize, config: TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(BaseTransformer {
            heads: ProjectionHeads::new(channels, config.heads, rng)?,
            config,
        })
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        self.heads.params.bind(tape, trainable)
    }

    fn project(&self, tape: &Tape, bound: &Bound, tokens: Var, which: char) -> Result<Vec<Var>> {
        let s = tape.shape(tokens);
        let (b, t, c) = (s[0], s[1], s[2]);
        if c != self.heads.channels {
            return Err(Error::shape("project_qkv", &[self.heads.channels], &[c]));
        }
        let flat = tape.reshape(tokens, &[b * t, c])?;
        let dh = c / self.heads.heads;
        (0..self.heads.heads)
            .map(|h| {
                let w = bound.var(&head_param(which, h))?;
                let y = tape.matmul(flat, w)?;
                tape.reshape(y, &[b, t, dh])
            })
            .collect()
    }

    /// Q-projects B×C×H×W maps to B×M×d.
    pub fn project_queries(&self, tape: &Tape, bound: &Bound, maps: Var) -> Result<Var> {
        let tokens = to_tokens(tape, maps)?;
        let per_head = self.project(tape, bound, tokens, 'q')?;
        if per_head.len() == 1 {
            Ok(per_head[0])
        } else {
            tape.concat(&per_head, 2)
        }
    }

    /// Adapts S query maps (S×C×H×W) against S sets of k key/value maps
    /// (S×k×C×H×W). Returns S×M×d prototypes.
    pub fn adapt(&self, tape: &Tape, bound: &Bound, queries: Var, bases: Var) -> Result<Adapted> {
        let qs = tape.shape(queries);
        let bs = tape.shape(bases);
        if bs.len() != 5 || qs.len() != 4 || bs[0] != qs[0] || bs[2..] != qs[1..] {
            return Err(Error::shape("adapt", &qs, &bs));
        }
        let (s, k, c, h, w) = (bs[0], bs[1], bs[2], bs[3], bs[4]);
        let n = h * w;
        let q_tokens = to_tokens(tape, queries)?;
        let flat_bases = tape.reshape(bases, &[s * k, c, h, w])?;
        let b_tokens = to_tokens(tape, flat_bases)?;
        let b_tokens = tape.reshape(b_tokens, &[s, k * n, c])?;

        let q = self.project(tape, bound, q_tokens, 'q')?;
        let keys = self.project(tape, bound, b_tokens, 'k')?;
        let values = self.project(tape, bound, b_tokens, 'v')?;
        let dh = c / self.heads.heads;

        let mut attention = Vec::with_capacity(q.len());
        let mut outputs = Vec::with_capacity(q.len());
        for ((qh, kh), vh) in q.iter().zip(&keys).zip(&values) {
            let mut scores = tape.matmul_t(*qh, *kh, false, true)?;
            if self.config.scale_logits {
                scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            }
            let axes: &[usize] = match self.config.norm_mode {
                NormMode::PerQuery => &[2],
                NormMode::LiteralMjn => &[1, 2],
            };
            let attn = tape.softmax(scores, axes)?;
            outputs.push(tape.matmul(attn, *vh)?);
            attention.push(attn);
        }
        let (q_all, o_all) = if q.len() == 1 {
            (q[0], outputs[0])
        } else {
            (tape.concat(&q, 2)?, tape.concat(&outputs, 2)?)
        };
        Ok(Adapted {
            prototypes: tape.add(q_all, o_all)?,
            attention,
        })
    }

    /// Support-only adaptation for N classes with M supports each
    /// (N×M×C×H×W): the transformer query is the reduced support set and the
    /// keys/values are the class's own supports.
    pub fn support_adapt(
        &self,
        tape: &Tape,
        bound: &Bound,
        class_supports: Var,
        reduce: Reduce,
    ) -> Result<Adapted> {
        let s = tape.shape(class_supports);
        if s.len() != 5 {
            return Err(Error::InvalidShape {
                op: "support_adapt",
                shape: s,
                reason: "expects N×M×C×H×W".into(),
            });
        }
        let query = match reduce {
            Reduce::Sum => tape.sum_axes(class_supports, &[1])?,
            Reduce::Mean => tape.mean_axes(class_supports, &[1])?,
        };
        let query = tape.reshape(query, &[s[0], s[2], s[3], s[4]])?;
        self.adapt(tape, bound, query, class_supports)
    }

    /// Logits T×N: negative mean squared distance over grid locations between
    /// Q-projected test maps (T×C×H×W) and prototypes (N×M×d), divided by the
    /// temperature.
    pub fn logits(
        &self,
        tape: &Tape,
        bound: &Bound,
        tests: Var,
        prototypes: Var,
        temperature: f64,
    ) -> Result<Var> {
        let tq = self.project_queries(tape, bound, tests)?;
        prototype_logits(tape, tq, prototypes, temperature)
    }
}

/// Scores T×M×d test grids against N×M×d prototypes.
pub fn prototype_logits(tape: &Tape, tests: Var, prototypes: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let ts = tape.shape(tests);
    let ps = tape.shape(prototypes);
    if ts.len() != 3 || ps.len() != 3 || ts[1..] != ps[1..] {
        return Err(Error::shape("classify", &ts, &ps));
    }
    let (m, d) = (ts[1], ts[2]);
    let tf = tape.reshape(tests, &[ts[0], m * d])?;
    let pf = tape.reshape(prototypes, &[ps[0], m * d])?;
    let dist = tape.sq_dist(tf, pf)?;
    tape.scale(dist, -1.0 / (m as f64 * temperature))
}

// ----- per-instance API on plain tensors --------------------------------

fn stack_maps(maps: &[&FeatureMap]) -> Result<Tensor> {
    let ts: Vec<&Tensor> = maps.iter().map(|m| &m.tensor).collect();
    Tensor::stack(&ts)
}

/// Projects one support map and k base maps: q is M×d, keys and values
/// are k×N×d.
pub fn project_qkv(
    support: &FeatureMap,
    bases: &[FeatureMap],
    heads: &ProjectionHeads,
) -> Result<(Tensor, Tensor, Tensor)> {
    if support.channels() != heads.channels {
        return Err(Error::shape("project_qkv", &[heads.channels], support.tensor.shape()));
    }
    if bases.is_empty() {
        return Err(Error::EmptyBaseSet);
    }
    let tape = Tape::new();
    let bt = BaseTransformer {
        heads: heads.clone(),
        config: TransformerConfig {
            heads: heads.heads,
            ..Default::default()
        },
    };
    let bound = bt.bind(&tape, false);
    let sup = tape.constant(stack_maps(&[support])?);
    let refs: Vec<&FeatureMap> = bases.iter().collect();
    let bs = tape.constant(stack_maps(&refs)?);
    let q = bt.project_queries(&tape, &bound, sup)?;
    let kt = to_tokens(&tape, bs)?;
    let cat = |vs: Vec<Var>| -> Result<Var> {
        if vs.len() == 1 {
            Ok(vs[0])
        } else {
            tape.concat(&vs, 2)
        }
    };
    let k = cat(bt.project(&tape, &bound, kt, 'k')?)?;
    let v = cat(bt.project(&tape, &bound, kt, 'v')?)?;
    let m = tape.shape(q)[1];
    let q = tape.value(q).clone().reshape(vec![m, heads.channels])?;
    let k = tape.value(k).clone();
    let v = tape.value(v).clone();
    Ok((q, k, v))
}

/// Attention of M×d queries over k×N×d keys.
pub fn attend(q: &Tensor, keys: &Tensor, mode: NormMode, scale_logits: bool) -> Result<AttentionTensor> {
    if keys.rank() != 3 || keys.shape()[0] == 0 {
        return Err(Error::EmptyBaseSet);
    }
    if q.rank() != 2 || q.shape()[1] != keys.shape()[2] {
        return Err(Error::shape("attend", q.shape(), keys.shape()));
    }
    let (m, d) = (q.shape()[0], q.shape()[1]);
    let (k, n) = (keys.shape()[0], keys.shape()[1]);
    let tape = Tape::new();
    let qv = tape.constant(q.clone().reshape(vec![1, m, d])?);
    let kv = tape.constant(keys.clone().reshape(vec![1, k * n, d])?);
    let mut scores = tape.matmul_t(qv, kv, false, true)?;
    if scale_logits {
        scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    }
    let axes: &[usize] = match mode {
        NormMode::PerQuery => &[2],
        NormMode::LiteralMjn => &[1, 2],
    };
    let attn = tape.softmax(scores, axes)?;
    let scores = tape.value(attn).clone().reshape(vec![m, k, n])?;
    Ok(AttentionTensor { scores, mode })
}

/// P_m = q_m + Σ_{j,n} attn_{mjn} v^j_n.
pub fn compose_prototype(q: &Tensor, attn: &AttentionTensor, values: &Tensor) -> Result<Tensor> {
    let err = attn.normalization_error();
    if err > 1e-6 {
        return Err(Error::Unnormalized(err));
    }
    let (m, k, n) = (attn.scores.shape()[0], attn.scores.shape()[1], attn.scores.shape()[2]);
    if values.shape() != [k, n, q.shape()[1]] || q.shape()[0] != m {
        return Err(Error::shape("compose_prototype", attn.scores.shape(), values.shape()));
    }
    let d = q.shape()[1];
    let tape = Tape::new();
    let a = tape.constant(attn.scores.clone().reshape(vec![m, k * n])?);
    let v = tape.constant(values.clone().reshape(vec![k * n, d])?);
    let qv = tape.constant(q.clone());
    let o = tape.matmul(a, v)?;
    let p = tape.add(qv, o)?;
    let out = tape.value(p).clone();
    Ok(out)
}

/// Full single-support adaptation against k base maps.
pub fn base_adapted_prototype(
    support: &FeatureMap,
    bases: &[FeatureMap],
    bt: &BaseTransformer,
    class_id: usize,
) -> Result<(AdaptedPrototype, Vec<AttentionTensor>)> {
    if bases.is_empty() {
        return Err(Error::EmptyBaseSet);
    }
    let tape = Tape::new();
    let bound = bt.bind(&tape, false);
    let q = tape.constant(stack_maps(&[support])?);
    let refs: Vec<&FeatureMap> = bases.iter().collect();
    let stacked = stack_maps(&refs)?;
    let mut shape = vec![1];
    shape.extend_from_slice(stacked.shape());
    let b = tape.constant(stacked.reshape(shape)?);
    let adapted = bt.adapt(&tape, &bound, q, b)?;
    let p = tape.value(adapted.prototypes).slice0(0);
    let (k, n) = (bases.len(), support.spatial());
    let m = support.spatial();
    let attention = adapted
        .attention
        .iter()
        .map(|a| {
            Ok(AttentionTensor {
                scores: tape.value(*a).slice0(0).reshape(vec![m, k, n])?,
                mode: bt.config.norm_mode,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        AdaptedPrototype {
            p,
            class_id,
            kind: PrototypeKind::BaseAdapted,
        },
        attention,
    ))
}

/// Support-only variant for one class.
pub fn support_transformer(
    supports: &[FeatureMap],
    bt: &BaseTransformer,
    reduce: Reduce,
    class_id: usize,
) -> Result<AdaptedPrototype> {
    if supports.is_empty() {
        return Err(Error::EmptySupport);
    }
    let tape = Tape::new();
    let bound = bt.bind(&tape, false);
    let refs: Vec<&FeatureMap> = supports.iter().collect();
    let stacked = stack_maps(&refs)?;
    let mut shape = vec![1];
    shape.extend_from_slice(stacked.shape());
    let cs = tape.constant(stacked.reshape(shape)?);
    let adapted = bt.support_adapt(&tape, &bound, cs, reduce)?;
    let p = tape.value(adapted.prototypes).slice0(0);
    Ok(AdaptedPrototype {
        p,
        class_id,
        kind: PrototypeKind::SupportAdapted,
    })
}

/// Logits of one test map against N prototypes, projecting the test map
/// through Q so both live in the same space.
pub fn classify(
    test: &FeatureMap,
    prototypes: &[AdaptedPrototype],
    bt: &BaseTransformer,
    temperature: f64,
) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::InvalidArgument("classify with no prototypes".into()));
    }
    if prototypes[0].p.shape()[0] != test.spatial() {
        return Err(Error::shape("classify", test.tensor.shape(), prototypes[0].p.shape()));
    }
    let tape = Tape::new();
    let bound = bt.bind(&tape, false);
    let t = tape.constant(stack_maps(&[test])?);
    let ps: Vec<&Tensor> = prototypes.iter().map(|p| &p.p).collect();
    let pv = tape.constant(Tensor::stack(&ps)?);
    let logits = bt.logits(&tape, &bound, t, pv, temperature)?;
    let out = tape.value(logits).data().to_vec();
    Ok(out)
}

/// Pooled prototype (1×C) from a class's supports.
pub fn protonet_prototype(supports: &[FeatureMap], reduce: Reduce, class_id: usize) -> Result<AdaptedPrototype> {
    let first = supports.first().ok_or(Error::EmptySupport)?;
    let c = first.channels();
    let mut acc = vec![0.0; c];
    for s in supports {
        if s.channels() != c {
            return Err(Error::shape("protonet_prototype", first.tensor.shape(), s.tensor.shape()));
        }
        acc.iter_mut().zip(s.pooled()).for_each(|(a, p)| *a += p);
    }
    if reduce == Reduce::Mean {
        let m = supports.len() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
    }
    Ok(AdaptedPrototype {
        p: Tensor::new(vec![1, c], acc)?,
        class_id,
        kind: PrototypeKind::Protonet,
    })
}

/// Negative squared Euclidean distance between the pooled test embedding and
/// each pooled prototype.
pub fn protonet_classify(test: &FeatureMap, prototypes: &[AdaptedPrototype]) -> Result<Vec<f64>> {
    let e = test.pooled();
    prototypes
        .iter()
        .map(|p| {
            if p.p.numel() != e.len() {
                return Err(Error::shape("protonet_classify", &[e.len()], p.p.shape()));
            }
            Ok(-p.p.data().iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        })
        .collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Provenance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap(t: Tensor) -> FeatureMap {
        FeatureMap {
            tensor: t,
            provenance: Provenance::FrozenPhi0,
        }
    }

    fn rand_map(c: usize, s: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        fmap(Tensor::randn(vec![c, s, s], 1.0, rng))
    }

    #[test]
    fn identity_projection_reshapes_rows() {
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let support = fmap(Tensor::new(vec![3, 2, 2], data).unwrap());
        let heads = ProjectionHeads::identity(3);
        let (q, _, _) = project_qkv(&support, &[support.clone()], &heads).unwrap();
        assert_eq!(q.shape(), &[4, 3]);
        // Row m = (h, w) in row-major order, columns are channels.
        assert_eq!(q.data(), &[0., 4., 8., 1., 5., 9., 2., 6., 10., 3., 7., 11.]);
    }

    #[test]
    fn zero_keys_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let support = rand_map(3, 2, &mut rng);
        let bases: Vec<_> = (0..2).map(|_| rand_map(3, 2, &mut rng)).collect();
        let mut heads = ProjectionHeads::identity(3);
        heads.zero('k');
        let (q, k, _) = project_qkv(&support, &bases, &heads).unwrap();
        let attn = attend(&q, &k, NormMode::PerQuery, false).unwrap();
        assert!(attn.scores.data().iter().all(|&a| (a - 1.0 / 8.0).abs() < 1e-15));
    }

    #[test]
    fn projection_shapes_at_full_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let support = rand_map(64, 5, &mut rng);
        let bases: Vec<_> = (0..20).map(|_| rand_map(64, 5, &mut rng)).collect();
        let heads = ProjectionHeads::new(64, 1, &mut rng).unwrap();
        let (q, k, v) = project_qkv(&support, &bases, &heads).unwrap();
        assert_eq!(q.shape(), &[25, 64]);
        assert_eq!(k.shape(), &[20, 25, 64]);
        assert_eq!(v.shape(), &[20, 25, 64]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let support = rand_map(4, 2, &mut rng);
        let heads = ProjectionHeads::identity(3);
        assert!(project_qkv(&support, &[support.clone()], &heads).is_err());
    }

    #[test]
    fn equal_logits_give_quarter_weights() {
        let q = Tensor::ones(vec![1, 2]);
        let k = Tensor::ones(vec![2, 2, 2]);
        let attn = attend(&q, &k, NormMode::PerQuery, false).unwrap();
        assert!(attn.scores.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn dominant_logit_saturates() {
        let q = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let k = Tensor::new(vec![2, 2, 1], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let attn = attend(&q, &k, NormMode::PerQuery, false).unwrap();
        assert!(attn.scores.data()[0] > 0.999);
    }

    #[test]
    fn empty_base_set() {
        let q = Tensor::ones(vec![1, 2]);
        let support = fmap(Tensor::ones(vec![2, 1, 1]));
        assert!(matches!(
            project_qkv(&support, &[], &ProjectionHeads::identity(2)),
            Err(Error::EmptyBaseSet)
        ));
        let k = Tensor::ones(vec![1, 1, 3]);
        assert!(attend(&q, &k, NormMode::PerQuery, false).is_err());
    }

    #[test]
    fn literal_mode_normalizes_jointly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(vec![3, 2], 1.0, &mut rng);
        let k = Tensor::randn(vec![2, 3, 2], 1.0, &mut rng);
        let attn = attend(&q, &k, NormMode::LiteralMjn, false).unwrap();
        assert!((attn.scores.sum() - 1.0).abs() < 1e-12);
        assert!(attn.normalization_error() < 1e-12);
    }

    #[test]
    fn zero_values_leave_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let support = rand_map(3, 2, &mut rng);
        let bases: Vec<_> = (0..3).map(|_| rand_map(3, 2, &mut rng)).collect();
        let mut bt = BaseTransformer::new(3, TransformerConfig::default(), &mut rng).unwrap();
        bt.heads.zero('v');
        let (proto, _) = base_adapted_prototype(&support, &bases, &bt, 0).unwrap();
        let (q, _, _) = project_qkv(&support, &bases, &bt.heads).unwrap();
        assert_eq!(proto.p, q);
    }

    #[test]
    fn uniform_attention_over_equal_values_shifts_by_u() {
        let q = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let attn = AttentionTensor {
            scores: Tensor::full(vec![2, 2, 2], 0.25),
            mode: NormMode::PerQuery,
        };
        let u = [0.5, -1.0];
        let values = Tensor::new(vec![2, 2, 2], u.repeat(4)).unwrap();
        let p = compose_prototype(&q, &attn, &values).unwrap();
        assert_eq!(p.data(), &[1.5, 1.0, 3.5, 3.0]);
    }

    #[test]
    fn compose_rejects_unnormalized() {
        let attn = AttentionTensor {
            scores: Tensor::full(vec![1, 2, 2], 0.3),
            mode: NormMode::PerQuery,
        };
        let r = compose_prototype(&Tensor::ones(vec![1, 1]), &attn, &Tensor::ones(vec![2, 2, 1]));
        assert!(matches!(r, Err(Error::Unnormalized(_))));
    }

    #[test]
    fn classify_identical_map_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bt = BaseTransformer::new(4, TransformerConfig::default(), &mut rng).unwrap();
        let test = rand_map(4, 2, &mut rng);
        let (q, _, _) = project_qkv(&test, &[test.clone()], &bt.heads).unwrap();
        let other = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let protos = vec![
            AdaptedPrototype { p: other, class_id: 0, kind: PrototypeKind::BaseAdapted },
            AdaptedPrototype { p: q, class_id: 1, kind: PrototypeKind::BaseAdapted },
        ];
        let logits = classify(&test, &protos, &bt, 0.1).unwrap();
        assert!(logits[1].abs() < 1e-12);
        assert!(logits[0] < logits[1]);
    }

    #[test]
    fn classify_closed_form_gap() {
        // Identity Q, 2×2 grid, d = 1: prototypes at per-location distance 1 and 2.
        let bt = BaseTransformer {
            heads: ProjectionHeads::identity(1),
            config: TransformerConfig::default(),
        };
        let test = fmap(Tensor::zeros(vec![1, 2, 2]));
        let p1 = AdaptedPrototype { p: Tensor::full(vec![4, 1], 1.0), class_id: 0, kind: PrototypeKind::BaseAdapted };
        let p2 = AdaptedPrototype { p: Tensor::full(vec![4, 1], 2.0), class_id: 1, kind: PrototypeKind::BaseAdapted };
        let temperature = 0.1;
        let logits = classify(&test, &[p1, p2], &bt, temperature).unwrap();
        // sim = -(1/4)·4·dist² ⇒ logits -1/τ and -4/τ.
        assert!((logits[0] - (-1.0 / temperature)).abs() < 1e-12);
        assert!((logits[0] - logits[1] - (4.0 - 1.0) / temperature).abs() < 1e-12);
    }

    #[test]
    fn classify_grid_mismatch() {
        let bt = BaseTransformer { heads: ProjectionHeads::identity(1), config: TransformerConfig::default() };
        let test = fmap(Tensor::zeros(vec![1, 2, 2]));
        let p = AdaptedPrototype { p: Tensor::zeros(vec![9, 1]), class_id: 0, kind: PrototypeKind::BaseAdapted };
        assert!(classify(&test, &[p], &bt, 0.1).is_err());
    }

    #[test]
    fn classify_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bt = BaseTransformer::new(3, TransformerConfig::default(), &mut rng).unwrap();
        let test = rand_map(3, 2, &mut rng);
        let protos: Vec<_> = (0..4)
            .map(|i| AdaptedPrototype { p: Tensor::randn(vec![4, 3], 1.0, &mut rng), class_id: i, kind: PrototypeKind::BaseAdapted })
            .collect();
        let logits = classify(&test, &protos, &bt, 0.5).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| protos[i].clone()).collect();
        let lp = classify(&test, &permuted, &bt, 0.5).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(lp[j], logits[i]);
        }
    }

    #[test]
    fn support_transformer_single_instance_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = rand_map(3, 2, &mut rng);
        let mut heads = ProjectionHeads::identity(3);
        heads.zero('k');
        let bt = BaseTransformer { heads, config: TransformerConfig::default() };
        let p = support_transformer(&[s.clone()], &bt, Reduce::Sum, 0).unwrap();
        // q = φ(x); uniform attention over its own 4 locations adds their mean.
        let (q, _, _) = project_qkv(&s, &[s.clone()], &ProjectionHeads::identity(3)).unwrap();
        for m in 0..4 {
            for c in 0..3 {
                let mean: f64 = (0..4).map(|n| q.get(&[n, c])).sum::<f64>() / 4.0;
                assert!((p.p.get(&[m, c]) - (q.get(&[m, c]) + mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn support_transformer_duplicate_equals_doubled_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = rand_map(3, 2, &mut rng);
        let bt = BaseTransformer::new(3, TransformerConfig::default(), &mut rng).unwrap();
        let two = support_transformer(&[s.clone(), s.clone()], &bt, Reduce::Sum, 0).unwrap();
        // Same output as one instance whose transformer query is 2·φ(x).
        let doubled = fmap(s.tensor.map(|x| 2.0 * x));
        let (one, _) = base_adapted_prototype(&doubled, &[s.clone()], &bt, 0).unwrap();
        assert!(two.p.max_abs_diff(&one.p) < 1e-12);
        assert!(matches!(support_transformer(&[], &bt, Reduce::Sum, 0), Err(Error::EmptySupport)));
    }

    #[test]
    fn protonet_sum_semantics() {
        let e = fmap(Tensor::new(vec![2, 1, 1], vec![1.0, -2.0]).unwrap());
        let neg = fmap(e.tensor.map(|x| -x));
        let single = protonet_prototype(&[e.clone()], Reduce::Sum, 0).unwrap();
        assert_eq!(single.p.data(), &[1.0, -2.0]);
        let pair = protonet_prototype(&[e, neg], Reduce::Sum, 0).unwrap();
        assert_eq!(pair.p.data(), &[0.0, 0.0]);
        assert!(matches!(protonet_prototype(&[], Reduce::Sum, 0), Err(Error::EmptySupport)));
    }

    #[test]
    fn protonet_three_class_toy() {
        let mk = |v: [f64; 2]| fmap(Tensor::new(vec![2, 1, 1], v.to_vec()).unwrap());
        let protos: Vec<_> = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]
            .iter()
            .enumerate()
            .map(|(i, v)| protonet_prototype(&[mk(*v)], Reduce::Sum, i).unwrap())
            .collect();
        // Hand-computed squared distances from (2.5, 0.5): 6.5, 0.5, 12.5.
        let logits = protonet_classify(&mk([2.5, 0.5]), &protos).unwrap();
        assert_eq!(logits, vec![-6.5, -0.5, -12.5]);
        assert_eq!(argmax(&logits), 1);
    }
}
