//! Training objectives: supervised contrastive loss, its hard-positive-mined
//! variant with curriculum weighting and margin-based negative handling,
//! adversarial cross-entropy, and the combined training loss.
//!
//! Every loss exists twice in this crate: the differentiable graph builders
//! here, and independent double-loop reference implementations in
//! [`crate::verify`]. The two paths share no code.

use crate::error::{AnchorError, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Precision, Tensor};

/// Hyperparameters for the contrastive objectives and the combined loss.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Temperature dividing similarities inside the contrastive exponentials.
    pub tau: f64,
    /// Weight of the adversarial cross-entropy term in the combined loss.
    pub lambda: f64,
    /// Curriculum start value for the hardness coefficient.
    pub beta_start: f64,
    /// Curriculum end value.
    pub beta_end: f64,
    /// Total epochs the curriculum spans.
    pub total_epochs: usize,
    /// Negatives with similarity below the margin are dropped from the
    /// denominator. `-1` keeps every negative (disabled).
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda: 1.0,
            beta_start: 0.5,
            beta_end: 2.0,
            total_epochs: 30,
            margin: -1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(AnchorError::Loss(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(AnchorError::Loss(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.beta_start <= 0.0 || self.beta_end <= 0.0 {
            return Err(AnchorError::Loss(format!(
                "beta_start/beta_end must be > 0, got {} / {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.total_epochs == 0 {
            return Err(AnchorError::Loss("total_epochs must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(AnchorError::Loss(format!(
                "margin must lie in [-1, 1], got {}",
                self.margin
            )));
        }
        Ok(())
    }

    /// Whether margin-based negative dropping is active.
    pub fn margin_enabled(&self) -> bool {
        self.margin > -1.0
    }
}

/// Exponential interpolation of the hardness coefficient over training:
/// `beta_start * (beta_end / beta_start)^(t / total_epochs)`.
pub fn beta_schedule(t: usize, cfg: &LossConfig) -> f64 {
    debug_assert!(t <= cfg.total_epochs, "epoch {t} beyond schedule horizon");
    let frac = t as f64 / cfg.total_epochs as f64;
    cfg.beta_start * (cfg.beta_end / cfg.beta_start).powf(frac)
}

/// Which view of a source sample a contrastive row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTag {
    Augmented,
    Adversarial,
}

/// Unit-norm projections of the two views of a batch, stacked row-wise, with
/// the source labels duplicated per view.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z: Tensor,
    pub labels: Vec<usize>,
    pub views: Vec<ViewTag>,
}

impl ContrastiveBatch {
    /// Stack the augmented and adversarial views of one batch.
    pub fn from_views(z_aug: &Tensor, z_adv: &Tensor, labels: &[usize]) -> Result<Self> {
        if z_aug.shape() != z_adv.shape() {
            return Err(AnchorError::ShapeMismatch {
                op: "contrastive-batch",
                lhs: z_aug.shape().to_vec(),
                rhs: z_adv.shape().to_vec(),
            });
        }
        let b = z_aug.shape()[0];
        if labels.len() != b {
            return Err(AnchorError::Loss(format!(
                "expected {b} labels, got {}",
                labels.len()
            )));
        }
        let p = z_aug.shape()[1];
        let mut values = z_aug.values().to_vec();
        values.extend_from_slice(z_adv.values());
        let z = Tensor::new(vec![2 * b, p], values)?;
        let mut all_labels = labels.to_vec();
        all_labels.extend_from_slice(labels);
        let mut views = vec![ViewTag::Augmented; b];
        views.extend(std::iter::repeat(ViewTag::Adversarial).take(b));
        let batch = ContrastiveBatch {
            z,
            labels: all_labels,
            views,
        };
        batch.check_unit_norm()?;
        Ok(batch)
    }

    pub fn new(z: Tensor, labels: Vec<usize>, views: Vec<ViewTag>) -> Result<Self> {
        if z.shape().len() != 2 || z.shape()[0] != labels.len() || labels.len() != views.len() {
            return Err(AnchorError::Loss(format!(
                "inconsistent batch: z {:?}, {} labels, {} views",
                z.shape(),
                labels.len(),
                views.len()
            )));
        }
        let batch = ContrastiveBatch { z, labels, views };
        batch.check_unit_norm()?;
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    fn check_unit_norm(&self) -> Result<()> {
        check_unit_norm_rows(self.z.values(), self.z.shape())
    }
}

fn check_unit_norm_rows(values: &[f64], shape: &[usize]) -> Result<()> {
    let (n, d) = (shape[0], shape[1]);
    for i in 0..n {
        let norm: f64 = values[i * d..(i + 1) * d]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(AnchorError::NotUnitNorm { row: i, norm });
        }
    }
    Ok(())
}

/// Per-anchor bookkeeping shared by the contrastive graph builders.
struct AnchorMasks {
    n: usize,
    /// 1.0 where same label and a != i.
    positive: Vec<f64>,
    /// |P(i)| as f64.
    pos_count: Vec<f64>,
    /// -1/|P(i)|, or 0 for anchors without positives.
    anchor_coef: Vec<f64>,
    /// 1.0 for anchors without positives (keeps guarded denominators positive).
    empty_guard: Vec<f64>,
    anchors_with_positives: usize,
}

fn anchor_masks(labels: &[usize]) -> AnchorMasks {
    let n = labels.len();
    let mut positive = vec![0.0; n * n];
    let mut pos_count = vec![0.0; n];
    for i in 0..n {
        for a in 0..n {
            if a != i && labels[a] == labels[i] {
                positive[i * n + a] = 1.0;
                pos_count[i] += 1.0;
            }
        }
    }
    let anchor_coef: Vec<f64> = pos_count
        .iter()
        .map(|&c| if c > 0.0 { -1.0 / c } else { 0.0 })
        .collect();
    let empty_guard: Vec<f64> = pos_count
        .iter()
        .map(|&c| if c > 0.0 { 0.0 } else { 1.0 })
        .collect();
    let anchors_with_positives = pos_count.iter().filter(|&&c| c > 0.0).count();
    AnchorMasks {
        n,
        positive,
        pos_count,
        anchor_coef,
        empty_guard,
        anchors_with_positives,
    }
}

/// The denominator mask: self excluded; negatives below the margin excluded
/// (positives are always kept). The indicator is computed from the current
/// similarity values and enters the graph as a constant.
fn denominator_mask(labels: &[usize], sims: &[f64], margin: f64, margin_enabled: bool) -> Vec<f64> {
    let n = labels.len();
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        for a in 0..n {
            if a == i {
                continue;
            }
            let keep = labels[a] == labels[i] || !margin_enabled || sims[i * n + a] >= margin;
            if keep {
                mask[i * n + a] = 1.0;
            }
        }
    }
    mask
}

/// Pieces of a contrastive loss graph that callers may want besides the root.
pub struct ContrastiveGraph {
    /// Scalar loss node.
    pub loss: TensorId,
    /// Per-anchor contribution, already weighted by -1/|P(i)|; sums to the loss.
    pub per_anchor: TensorId,
    /// Number of anchors that had at least one positive.
    pub anchors_with_positives: usize,
}

fn contrastive_graph(
    tape: &mut Tape,
    z: TensorId,
    labels: &[usize],
    tau: f64,
    hardness: Option<f64>,
    margin: f64,
    margin_enabled: bool,
) -> Result<ContrastiveGraph> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(AnchorError::BadShape {
            op: "contrastive-loss",
            shape,
            reason: format!("expected [N,P] with N == {} labels", labels.len()),
        });
    }
    if labels.len() < 2 {
        return Err(AnchorError::Loss(
            "contrastive loss needs at least 2 rows".into(),
        ));
    }
    check_unit_norm_rows(tape.value(z), &shape)?;

    let masks = anchor_masks(labels);
    let n = masks.n;

    let sims = tape.pairwise_dot(z)?;
    let scaled = tape.scalar_mul(sims, 1.0 / tau)?;
    let expd = tape.exp(scaled)?;

    let den_mask = denominator_mask(labels, tape.value(sims), margin, margin_enabled);
    let den_mask = tape.constant(den_mask, vec![n, n]);
    let masked = tape.mul(expd, den_mask)?;
    let denom = tape.row_sum(masked)?;
    let guard = tape.constant(masks.empty_guard.clone(), vec![n]);
    let denom = tape.add(denom, guard)?;
    let log_denom = tape.log(denom)?;

    // t_ia = s_ia / tau - log denom_i, materialized via a row-broadcast.
    let ones = tape.constant(vec![1.0; n * n], vec![n, n]);
    let log_denom_rows = tape.row_scale(ones, log_denom)?;
    let log_ratio = tape.sub(scaled, log_denom_rows)?;

    let pos_mask = tape.constant(masks.positive.clone(), vec![n, n]);
    let weighted_terms = match hardness {
        None => tape.mul(pos_mask, log_ratio)?,
        Some(beta) => {
            let weights = hard_positive_weights_nodes(tape, sims, &masks, beta)?;
            tape.mul(weights, log_ratio)?
        }
    };

    let per_pair_sum = tape.row_sum(weighted_terms)?;
    let coef = tape.constant(masks.anchor_coef.clone(), vec![n]);
    let per_anchor = tape.mul(per_pair_sum, coef)?;
    let loss = tape.sum_all(per_anchor)?;
    Ok(ContrastiveGraph {
        loss,
        per_anchor,
        anchors_with_positives: masks.anchors_with_positives,
    })
}

/// w_ip = exp(beta (1 - s_ip)) * |P(i)| / sum_q exp(beta (1 - s_iq)): harder
/// (less similar) positives weigh more and the weights average to 1 per
/// anchor. Returns an [N,N] node, zero outside anchor-positive pairs. The
/// weights are part of the graph, so gradients flow through them.
fn hard_positive_weights_nodes(
    tape: &mut Tape,
    sims: TensorId,
    masks: &AnchorMasks,
    beta: f64,
) -> Result<TensorId> {
    let n = masks.n;
    let neg_scaled = tape.scalar_mul(sims, -beta)?;
    let shifted = tape.scalar_add(neg_scaled, beta)?;
    let raw = tape.exp(shifted)?;
    let pos_mask = tape.constant(masks.positive.clone(), vec![n, n]);
    let raw_pos = tape.mul(raw, pos_mask)?;
    let raw_sum = tape.row_sum(raw_pos)?;
    let guard = tape.constant(masks.empty_guard.clone(), vec![n]);
    let raw_sum = tape.add(raw_sum, guard)?;
    let inv = tape.recip(raw_sum)?;
    let counts = tape.constant(masks.pos_count.clone(), vec![n]);
    let scale = tape.mul(inv, counts)?;
    tape.row_scale(raw_pos, scale)
}

/// Graph builder for the standard supervised contrastive loss.
pub fn scl_loss_graph(
    tape: &mut Tape,
    z: TensorId,
    labels: &[usize],
    tau: f64,
) -> Result<ContrastiveGraph> {
    contrastive_graph(tape, z, labels, tau, None, -1.0, false)
}

/// Graph builder for the hard-positive-mined loss with margin handling.
pub fn anchor_loss_graph(
    tape: &mut Tape,
    z: TensorId,
    labels: &[usize],
    beta: f64,
    cfg: &LossConfig,
) -> Result<ContrastiveGraph> {
    if beta < 0.0 {
        return Err(AnchorError::Loss(format!("beta must be >= 0, got {beta}")));
    }
    contrastive_graph(
        tape,
        z,
        labels,
        cfg.tau,
        Some(beta),
        cfg.margin,
        cfg.margin_enabled(),
    )
}

/// Value of the supervised contrastive loss on a batch. The bool is false when
/// no anchor had a positive (the loss is then 0 by convention).
pub fn scl_loss(batch: &ContrastiveBatch, tau: f64) -> Result<(f64, bool)> {
    let mut tape = Tape::new(Precision::F64);
    let z = tape.input(&batch.z);
    let g = scl_loss_graph(&mut tape, z, &batch.labels, tau)?;
    Ok((tape.scalar(g.loss), g.anchors_with_positives > 0))
}

/// Value of the hard-positive-mined loss on a batch.
pub fn anchor_loss(batch: &ContrastiveBatch, beta: f64, cfg: &LossConfig) -> Result<(f64, bool)> {
    let mut tape = Tape::new(Precision::F64);
    let z = tape.input(&batch.z);
    let g = anchor_loss_graph(&mut tape, z, &batch.labels, beta, cfg)?;
    Ok((tape.scalar(g.loss), g.anchors_with_positives > 0))
}

/// Hard-positive weights as an [N,N] tensor, zero outside anchor-positive
/// pairs.
pub fn hard_positive_weights(batch: &ContrastiveBatch, beta: f64) -> Result<Tensor> {
    let mut tape = Tape::new(Precision::F64);
    let z = tape.input(&batch.z);
    let masks = anchor_masks(&batch.labels);
    let sims = tape.pairwise_dot(z)?;
    let w = hard_positive_weights_nodes(&mut tape, sims, &masks, beta)?;
    Ok(tape.to_tensor(w))
}

/// Mean softmax cross-entropy of logits against integer labels.
pub fn ce_adv_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new(Precision::F64);
    let l = tape.input(logits);
    let loss = tape.softmax_cross_entropy(l, labels)?;
    Ok(tape.scalar(loss))
}

/// Combined training loss graph: anchor term on the stacked views plus
/// `lambda` times the adversarial cross-entropy.
pub struct CombinedGraph {
    pub total: TensorId,
    pub contrastive: ContrastiveGraph,
    pub ce: TensorId,
}

pub fn combined_loss_graph(
    tape: &mut Tape,
    z_stacked: TensorId,
    stacked_labels: &[usize],
    adv_logits: TensorId,
    labels: &[usize],
    beta: f64,
    cfg: &LossConfig,
) -> Result<CombinedGraph> {
    let contrastive = anchor_loss_graph(tape, z_stacked, stacked_labels, beta, cfg)?;
    let ce = tape.softmax_cross_entropy(adv_logits, labels)?;
    let weighted_ce = tape.scalar_mul(ce, cfg.lambda)?;
    let total = tape.add(contrastive.loss, weighted_ce)?;
    Ok(CombinedGraph {
        total,
        contrastive,
        ce,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn unit_rows(n: usize, p: usize, seed: u64) -> Tensor {
        let mut rng = StreamRng::new(seed);
        let mut values = vec![0.0; n * p];
        for i in 0..n {
            let row: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..p {
                values[i * p + j] = row[j] / norm;
            }
        }
        Tensor::new(vec![n, p], values).unwrap()
    }

    fn batch(z: Tensor, labels: Vec<usize>) -> ContrastiveBatch {
        let views = labels.iter().map(|_| ViewTag::Augmented).collect();
        ContrastiveBatch::new(z, labels, views).unwrap()
    }

    #[test]
    fn beta_schedule_endpoints_and_midpoint() {
        let cfg = LossConfig {
            beta_start: 1.0,
            beta_end: 4.0,
            total_epochs: 100,
            ..LossConfig::default()
        };
        assert_eq!(beta_schedule(0, &cfg), 1.0);
        assert!((beta_schedule(100, &cfg) - 4.0).abs() < 1e-12);
        assert!((beta_schedule(50, &cfg) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_has_zero_loss() {
        // Two rows of the same class with identical embeddings: log of a ratio
        // of equal exponentials.
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = batch(z, vec![0, 0]);
        let (v, had) = scl_loss(&b, 0.5).unwrap();
        assert!(had);
        assert!(v.abs() < 1e-12, "loss {v}");
    }

    #[test]
    fn permutation_invariance() {
        let z = unit_rows(8, 4, 21);
        let labels = vec![0, 1, 0, 1, 2, 2, 0, 1];
        let b = batch(z.clone(), labels.clone());
        let (v, _) = scl_loss(&b, 0.1).unwrap();

        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let p = 4;
        let mut pv = vec![0.0; 8 * p];
        let mut pl = vec![0; 8];
        for (new_i, &old_i) in perm.iter().enumerate() {
            pv[new_i * p..(new_i + 1) * p].copy_from_slice(&z.values()[old_i * p..(old_i + 1) * p]);
            pl[new_i] = labels[old_i];
        }
        let b2 = batch(Tensor::new(vec![8, p], pv).unwrap(), pl);
        let (v2, _) = scl_loss(&b2, 0.1).unwrap();
        assert!((v - v2).abs() < 1e-9, "{v} vs {v2}");

        let cfg = LossConfig::default();
        let (a1, _) = anchor_loss(&b, 1.3, &cfg).unwrap();
        let (a2, _) = anchor_loss(&b2, 1.3, &cfg).unwrap();
        assert!((a1 - a2).abs() < 1e-9, "{a1} vs {a2}");
    }

    #[test]
    fn beta_zero_weights_are_one() {
        let z = unit_rows(6, 3, 3);
        let b = batch(z, vec![0, 0, 1, 1, 2, 2]);
        let w = hard_positive_weights(&b, 0.0).unwrap();
        for i in 0..6 {
            for a in 0..6 {
                let expected = if a != i && b.labels[a] == b.labels[i] {
                    1.0
                } else {
                    0.0
                };
                let got = w.values()[i * 6 + a];
                assert!(
                    (got - expected).abs() < 1e-12,
                    "w[{i}][{a}] = {got}, expected {expected}"
                );
            }
        }
    }

    #[test]
    fn hard_positive_weights_worked_example() {
        // Anchor 0 with positives at similarities 1.0 and 0.0: raw = {1, 2} at
        // beta = ln 2, so the weights normalize to {2/3, 4/3}.
        let z = Tensor::new(
            vec![3, 2],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let b = batch(z, vec![0, 0, 0]);
        let w = hard_positive_weights(&b, std::f64::consts::LN_2).unwrap();
        assert!((w.values()[1] - 2.0 / 3.0).abs() < 1e-12, "{}", w.values()[1]);
        assert!((w.values()[2] - 4.0 / 3.0).abs() < 1e-12, "{}", w.values()[2]);
    }

    #[test]
    fn equidistant_positives_keep_unit_weights() {
        // All positives at the same similarity to the anchor: weights stay 1
        // regardless of beta.
        let s = (0.5f64).sqrt();
        let z = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, s, s, 0.0, s, 0.0, s],
        )
        .unwrap();
        let b = batch(z, vec![0, 0, 0]);
        for beta in [0.0, 0.7, 2.5] {
            let w = hard_positive_weights(&b, beta).unwrap();
            assert!((w.values()[1] - 1.0).abs() < 1e-9);
            assert!((w.values()[2] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn raising_beta_shifts_mass_to_hardest_positive() {
        let z = unit_rows(8, 4, 77);
        let b = batch(z, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let beta = 0.8;
        let w1 = hard_positive_weights(&b, beta).unwrap();
        let w2 = hard_positive_weights(&b, 2.0 * beta).unwrap();

        // Recompute similarities to find each anchor's hardest positive.
        let n = 8;
        let p = 4;
        let zv = b.z.values();
        for i in 0..n {
            let mut hardest = None;
            let mut lowest = f64::INFINITY;
            for a in 0..n {
                if a == i || b.labels[a] != b.labels[i] {
                    continue;
                }
                let s: f64 = (0..p).map(|k| zv[i * p + k] * zv[a * p + k]).sum();
                if s < lowest {
                    lowest = s;
                    hardest = Some(a);
                }
            }
            let h = hardest.unwrap();
            assert!(
                w2.values()[i * n + h] > w1.values()[i * n + h],
                "anchor {i}: weight on hardest positive did not increase"
            );
        }
    }

    #[test]
    fn anchor_at_beta_zero_margin_disabled_reduces_to_scl() {
        let cfg = LossConfig {
            margin: -1.0,
            ..LossConfig::default()
        };
        for seed in [1u64, 2, 3] {
            let z = unit_rows(10, 5, seed);
            let b = batch(z, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0]);
            let (scl, _) = scl_loss(&b, cfg.tau).unwrap();
            let (anc, _) = anchor_loss(&b, 0.0, &cfg).unwrap();
            assert!((scl - anc).abs() < 1e-12, "{scl} vs {anc}");
        }
    }

    #[test]
    fn ce_of_uniform_logits_is_ln_c() {
        let logits = Tensor::zeros(vec![4, 10]);
        let v = ce_adv_loss(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((v - (10f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_saturates_at_large_margin() {
        // Correct logit 20 above the rest: loss below 1e-5.
        let mut vals = vec![0.0; 3];
        vals[1] = 20.0;
        let logits = Tensor::new(vec![1, 3], vals).unwrap();
        let v = ce_adv_loss(&logits, &[1]).unwrap();
        assert!(v > 0.0 && v <= 1e-5, "loss {v}");
    }

    #[test]
    fn combined_with_lambda_zero_is_anchor_exactly() {
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let z = unit_rows(6, 4, 9);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let logits = unit_rows(3, 3, 10);
        let beta = 0.9;

        let mut tape = Tape::new(Precision::F64);
        let zid = tape.input(&z);
        let lid = tape.input(&logits);
        let g = combined_loss_graph(&mut tape, zid, &labels, lid, &[0, 1, 2], beta, &cfg).unwrap();
        let total = tape.scalar(g.total);
        let anchor = tape.scalar(g.contrastive.loss);
        assert!((total - anchor).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pair_batch_leaves_only_ce_term() {
        // A single sample's two identical views: the anchor term is log of a
        // ratio of equal exponentials, so combined reduces to lambda * ce.
        let cfg = LossConfig::default();
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let logits = unit_rows(1, 3, 4);
        let mut tape = Tape::new(Precision::F64);
        let zid = tape.input(&z);
        let lid = tape.input(&logits);
        let g = combined_loss_graph(&mut tape, zid, &[0, 0], lid, &[0], 0.5, &cfg).unwrap();
        let total = tape.scalar(g.total);
        let ce = tape.scalar(g.ce);
        assert!((total - cfg.lambda * ce).abs() < 1e-9, "{total} vs {ce}");
    }

    #[test]
    fn non_unit_rows_are_rejected() {
        let z = Tensor::new(vec![2, 2], vec![2.0, 0.0, 1.0, 0.0]).unwrap();
        let err = ContrastiveBatch::new(z, vec![0, 0], vec![ViewTag::Augmented; 2]).unwrap_err();
        assert!(matches!(err, AnchorError::NotUnitNorm { row: 0, .. }));
    }

    #[test]
    fn margin_drops_easy_negatives_from_denominator() {
        // With the margin at 0.9 every cross-class negative (similarity <= 0)
        // is dropped; each anchor's denominator keeps only its positive, which
        // makes the loss exactly 0. With the margin disabled it is positive.
        let z = Tensor::new(
            vec![4, 2],
            vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0],
        )
        .unwrap();
        let b = batch(z, vec![0, 0, 1, 1]);
        let open = LossConfig {
            margin: -1.0,
            tau: 1.0,
            ..LossConfig::default()
        };
        let strict = LossConfig {
            margin: 0.9,
            tau: 1.0,
            ..LossConfig::default()
        };
        let (loose, _) = anchor_loss(&b, 0.0, &open).unwrap();
        let (tight, _) = anchor_loss(&b, 0.0, &strict).unwrap();
        assert!(loose > 1e-6, "expected positive loss, got {loose}");
        assert!(tight.abs() < 1e-9, "expected zero loss, got {tight}");
    }
}
