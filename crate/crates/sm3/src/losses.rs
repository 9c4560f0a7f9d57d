//! Training objectives: NT-Xent, the per-modality losses, the
//! cross-modality contrastive loss, their joint sum, and the
//! pseudo-multi-label cross-entropy.
//!
//! Each loss is built on a [`Tape`] so it is differentiable end to end.
//! The similarity denominators are evaluated through a row-max-stabilized
//! log-sum-exp; at τ = 0.1 raw exponents reach e^10.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Large negative stand-in for −∞ when masking self-similarity terms.
const NEG_INF: f64 = -1e30;

fn check_batch(tape: &Tape, a: ValueId, b: ValueId, tau: f64) -> Result<usize> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (ta, tb) = (tape.value(a), tape.value(b));
    let n = ta.rows();
    if n == 0 {
        return Err(Error::Config("empty contrastive batch".into()));
    }
    if tb.rows() != n || ta.cols() != tb.cols() {
        return Err(Error::ShapeMismatch(format!(
            "contrastive batch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    Ok(n)
}

/// Matrix with −∞ on the diagonal, 0 elsewhere; added to a similarity
/// matrix it implements the 1_[i≠j] indicator.
fn diag_mask(tape: &mut Tape, n: usize) -> ValueId {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = NEG_INF;
    }
    tape.constant(Tensor::matrix(n, n, data).unwrap())
}

/// Per-sample NT-Xent terms anchored at rows of `anchor_n` (already
/// row-normalized): −log e(σ(aᵢ,pᵢ)/τ) / (Σⱼ e(σ(aᵢ,pⱼ)/τ) + Σ_{j≠i} e(σ(aᵢ,wⱼ)/τ))
/// where `pos_n` holds the positives and `within_n` the same-branch
/// negatives. Returns the length-N vector of losses.
fn nt_xent_terms(
    tape: &mut Tape,
    anchor_n: ValueId,
    pos_n: ValueId,
    within_n: ValueId,
    tau: f64,
) -> ValueId {
    let n = tape.value(anchor_n).rows();
    let s_pos = tape.matmul_nt(anchor_n, pos_n);
    let s_pos = tape.scale(s_pos, 1.0 / tau);
    let s_within = tape.matmul_nt(anchor_n, within_n);
    let s_within = tape.scale(s_within, 1.0 / tau);
    let mask = diag_mask(tape, n);
    let s_within = tape.add(s_within, mask);
    let denom = tape.concat_cols(s_pos, s_within);
    let lse = tape.logsumexp_rows(denom);
    let pos = tape.diag(s_pos);
    tape.sub(lse, pos)
}

/// NT-Xent loss, batch mean over anchors in view 1.
///
/// The positive pair is included in the first denominator sum (j over all
/// N) and self-similarity is excluded from the second; anchors are view-1
/// rows only.
pub fn nt_xent(tape: &mut Tape, z1: ValueId, z2: ValueId, tau: f64) -> Result<ValueId> {
    check_batch(tape, z1, z2, tau)?;
    let zn1 = tape.row_normalize(z1);
    let zn2 = tape.row_normalize(z2);
    let terms = nt_xent_terms(tape, zn1, zn2, zn1, tau);
    Ok(tape.mean_all(terms))
}

/// Cross-modality contrastive loss: two summed terms anchored at the
/// dermoscopy view-1 embeddings, contrasting against clinical view-1 and
/// view-2 embeddings, each with within-dermoscopy negatives.
///
/// `mirror` adds the clinical-anchored symmetric counterpart (off by
/// default; the printed loss is asymmetric).
pub fn l_mm(
    tape: &mut Tape,
    zd1: ValueId,
    zd2: ValueId,
    zc1: ValueId,
    zc2: ValueId,
    tau: f64,
    mirror: bool,
) -> Result<ValueId> {
    check_batch(tape, zd1, zc1, tau)?;
    check_batch(tape, zd1, zc2, tau)?;
    let dn1 = tape.row_normalize(zd1);
    let cn1 = tape.row_normalize(zc1);
    let cn2 = tape.row_normalize(zc2);
    let t1 = nt_xent_terms(tape, dn1, cn1, dn1, tau);
    let t2 = nt_xent_terms(tape, dn1, cn2, dn1, tau);
    let mut sum = tape.add(t1, t2);
    if mirror {
        check_batch(tape, zc1, zd2, tau)?;
        let dn2 = tape.row_normalize(zd2);
        let m1 = nt_xent_terms(tape, cn1, dn1, cn1, tau);
        let m2 = nt_xent_terms(tape, cn1, dn2, cn1, tau);
        let m = tape.add(m1, m2);
        sum = tape.add(sum, m);
    }
    Ok(tape.mean_all(sum))
}

/// The three addends of the joint SSL objective, reported individually.
#[derive(Debug, Clone, Copy)]
pub struct SslTerms {
    pub l_derm: ValueId,
    pub l_clinic: ValueId,
    pub l_mm: ValueId,
    pub total: ValueId,
}

/// Joint loss: L_derm + L_clinic + L_mm.
///
/// `zd*`/`zc*` are per-branch projection outputs for the two augmented
/// views; `md*`/`mc*` are the shared-space embeddings from the extra
/// cross-modality heads.
#[allow(clippy::too_many_arguments)]
pub fn l_ssl(
    tape: &mut Tape,
    zd1: ValueId,
    zd2: ValueId,
    zc1: ValueId,
    zc2: ValueId,
    md1: ValueId,
    md2: ValueId,
    mc1: ValueId,
    mc2: ValueId,
    tau: f64,
    mirror: bool,
) -> Result<SslTerms> {
    let l_derm = nt_xent(tape, zd1, zd2, tau)?;
    let l_clinic = nt_xent(tape, zc1, zc2, tau)?;
    let l_mm_v = l_mm(tape, md1, md2, mc1, mc2, tau, mirror)?;
    let partial = tape.add(l_derm, l_clinic);
    let total = tape.add(partial, l_mm_v);
    Ok(SslTerms {
        l_derm,
        l_clinic,
        l_mm: l_mm_v,
        total,
    })
}

/// Pseudo-multi-label objective: Σ_k CrossEntropy(softmax(logits_k), y_k),
/// batch mean over samples.
///
/// `logits[k]` is (N, c_k); `targets[k]` the N pseudo-labels for head k.
pub fn multilabel_ce(
    tape: &mut Tape,
    logits: &[ValueId],
    targets: &[Vec<usize>],
) -> Result<ValueId> {
    assert_eq!(logits.len(), targets.len(), "head count mismatch");
    assert!(!logits.is_empty(), "at least one label head required");
    let mut total: Option<ValueId> = None;
    for (head, t) in logits.iter().zip(targets) {
        let v = tape.value(*head);
        let (n, c) = (v.rows(), v.cols());
        if t.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "head batch {n} vs {} targets",
                t.len()
            )));
        }
        if let Some(&bad) = t.iter().find(|&&y| y >= c) {
            return Err(Error::Config(format!(
                "pseudo-label {bad} out of range for {c}-class head"
            )));
        }
        let lsm = tape.log_softmax_rows(*head);
        let picked = tape.gather_cols(lsm, t.clone());
        let mean = tape.mean_all(picked);
        let nll = tape.scale(mean, -1.0);
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll),
        });
    }
    Ok(total.unwrap())
}

/// Convenience wrappers over plain tensors, for evaluation and tests.
pub mod value {
    use super::*;

    pub fn nt_xent(z1: &Tensor, z2: &Tensor, tau: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(z1.clone());
        let b = tape.constant(z2.clone());
        let out = super::nt_xent(&mut tape, a, b, tau)?;
        Ok(tape.value(out).item())
    }

    pub fn l_mm(
        zd1: &Tensor,
        zd2: &Tensor,
        zc1: &Tensor,
        zc2: &Tensor,
        tau: f64,
        mirror: bool,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(zd1.clone());
        let b = tape.constant(zd2.clone());
        let c = tape.constant(zc1.clone());
        let d = tape.constant(zc2.clone());
        let out = super::l_mm(&mut tape, a, b, c, d, tau, mirror)?;
        Ok(tape.value(out).item())
    }

    pub fn multilabel_ce(logits: &[Tensor], targets: &[Vec<usize>]) -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = logits.iter().map(|t| tape.constant(t.clone())).collect();
        let out = super::multilabel_ce(&mut tape, &ids, targets)?;
        Ok(tape.value(out).item())
    }
}
