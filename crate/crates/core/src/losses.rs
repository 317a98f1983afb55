//! Cross-entropy, the Euclidean contrastive term and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndkernel::{Tape, Tensor, Var};

/// Added to each self-similarity so it vanishes from the softmax.
const SELF_MASK: f64 = -1e30;
/// Keeps row normalization finite for all-zero features.
const NORM_EPS: f64 = 1e-12;

fn check_labels(op: &str, n_rows: usize, n_classes: usize, labels: &[usize]) -> Result<()> {
    if n_rows == 0 {
        return Err(Error::InvalidArgument(format!("{op}: empty batch")));
    }
    if labels.len() != n_rows {
        return Err(Error::InvalidArgument(format!(
            "{op}: {} labels for {n_rows} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "{op}: label {bad} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, B×N.
pub fn cross_entropy(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            shape: s,
            reason: "logits must be B×N".into(),
        });
    }
    check_labels("cross_entropy", s[0], s[1], labels)?;
    let lp = tape.log_softmax(logits, &[1])?;
    let picked = tape.gather(lp, labels)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = cross_entropy(&tape, l, labels)?;
    let v = tape.value(ce).data()[0];
    Ok(v)
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize_rows(tape: &Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let sq = tape.square(x)?;
    let ss = tape.sum_axes(sq, &[1])?;
    let ss = tape.add_scalar(ss, NORM_EPS)?;
    let norm = tape.sqrt(ss)?;
    let norm = tape.reshape(norm, &[s[0], 1])?;
    tape.div(x, norm)
}

/// Contrastive loss over N positive pairs (rows of `a` and `b`, each N×D).
///
/// Similarity is the negative squared Euclidean distance, optionally after
/// L2-normalizing every feature. Each of the 2N anchors is scored against its
/// partner with the other 2N − 2 features as negatives.
pub fn info_nce(tape: &Tape, a: Var, b: Var, normalize: bool) -> Result<Var> {
    let sa = tape.shape(a);
    let sb = tape.shape(b);
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("info_nce", &sa, &sb));
    }
    let n = sa[0];
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "info_nce needs at least 2 pairs, got {n}"
        )));
    }
    let mut z = tape.concat(&[a, b], 0)?;
    if normalize {
        z = l2_normalize_rows(tape, z)?;
    }
    let dist = tape.sq_dist(z, z)?;
    let sim = tape.neg(dist)?;
    let mut mask = Tensor::zeros(vec![2 * n, 2 * n]);
    for i in 0..2 * n {
        mask.set(&[i, i], SELF_MASK);
    }
    let mask = tape.constant(mask);
    let logits = tape.add(sim, mask)?;
    let partners: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    cross_entropy(tape, logits, &partners)
}

pub fn info_nce_value(a: &Tensor, b: &Tensor, normalize: bool) -> Result<f64> {
    let tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = info_nce(&tape, av, bv, normalize)?;
    let v = tape.value(l).data()[0];
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub ce: f64,
    pub infonce: f64,
}

/// `ce + weight · infonce`. A zero weight returns `ce` itself.
pub fn weighted_sum(tape: &Tape, ce: Var, infonce: Var, weight: f64) -> Result<Var> {
    if weight == 0.0 {
        return Ok(ce);
    }
    let scaled = tape.scale(infonce, weight)?;
    tape.add(ce, scaled)
}

/// Total loss plus its scalar components.
pub fn pretrain_loss(tape: &Tape, ce: Var, infonce: Var, weight: f64) -> Result<(Var, LossBreakdown)> {
    let total = weighted_sum(tape, ce, infonce, weight)?;
    let read = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        loss: read(total),
        ce: read(ce),
        infonce: read(infonce),
    };
    Ok((total, breakdown))
}
