//! FGSM and PGD l-infinity adversarial example generation.
//!
//! Each PGD step ascends the objective along the sign of the input gradient,
//! projects back onto the epsilon-ball around the original input, then clips
//! into the value range. The objective is pluggable: plain adversarial
//! cross-entropy, or the combined contrastive + cross-entropy training loss.

use crate::error::{AnchorError, Result};
use crate::losses::{combined_loss_graph, LossConfig};
use crate::models::ModelBundle;
use crate::rng::StreamRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Mean adversarial cross-entropy.
    Ce,
    /// Hard-mined contrastive term plus lambda times adversarial cross-entropy.
    Combined,
}

/// PGD hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// l-infinity radius in input units.
    pub epsilon: f64,
    /// Step size.
    pub alpha: f64,
    /// Iteration count; zero steps returns the input unchanged.
    pub steps: usize,
    pub objective: ObjectiveKind,
    /// Start from a uniform point inside the epsilon-ball.
    pub random_start: bool,
    /// Value range to clip into after each step, if any.
    pub clip_range: Option<(f64, f64)>,
    /// Number of restarts; the per-sample best (highest objective) is kept.
    pub restarts: usize,
}

impl AttackConfig {
    /// Training-time attack: 10 steps, eps 0.031, alpha 0.007, combined loss.
    pub fn train_default() -> Self {
        AttackConfig {
            epsilon: 0.031,
            alpha: 0.007,
            steps: 10,
            objective: ObjectiveKind::Combined,
            random_start: false,
            clip_range: Some((0.0, 1.0)),
            restarts: 1,
        }
    }

    /// Evaluation attack: 20 steps, eps 0.031, alpha 0.003, cross-entropy.
    pub fn eval_default() -> Self {
        AttackConfig {
            epsilon: 0.031,
            alpha: 0.003,
            steps: 20,
            objective: ObjectiveKind::Ce,
            random_start: false,
            clip_range: Some((0.0, 1.0)),
            restarts: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(AnchorError::Attack(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps > 0 && self.alpha <= 0.0 {
            return Err(AnchorError::Attack(format!(
                "alpha must be > 0 when steps > 0, got {}",
                self.alpha
            )));
        }
        if self.restarts == 0 {
            return Err(AnchorError::Attack("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// What an objective reports for one forward evaluation.
pub struct ObjectiveEval {
    /// Scalar node to differentiate.
    pub root: TensorId,
    /// Per-sample objective values, used for restart selection.
    pub per_sample: Vec<f64>,
}

/// A batch objective: builds the loss graph for the current perturbed inputs.
pub type ObjectiveFn<'a> = dyn Fn(&mut Tape, TensorId) -> Result<ObjectiveEval> + 'a;

/// Result of an attack run.
#[derive(Debug, Clone)]
pub struct AttackReport {
    /// Per-sample worst case across restarts.
    pub adversarial: Tensor,
    /// Objective trajectory per restart, indexed `[restart][0..=steps]`
    /// (value at the start point through the value after the last step).
    pub objective_per_step: Vec<Vec<f64>>,
    /// Final per-sample objective per restart.
    pub per_sample_by_restart: Vec<Vec<f64>>,
    /// Per-sample objective of the merged result.
    pub per_sample: Vec<f64>,
    /// Largest l-infinity deviation from the input observed anywhere.
    pub max_linf: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// PGD with projection onto the epsilon-ball around `x` and optional range
/// clipping. `seed` drives random starts; generation is pure otherwise.
pub fn pgd_attack(
    x: &Tensor,
    objective: &ObjectiveFn,
    cfg: &AttackConfig,
    precision: Precision,
    seed: u64,
) -> Result<AttackReport> {
    cfg.validate()?;
    if let Some((lo, hi)) = cfg.clip_range {
        if x.values().iter().any(|v| *v < lo || *v > hi) {
            return Err(AnchorError::Attack(format!(
                "inputs outside clip range [{lo}, {hi}]"
            )));
        }
    }

    let batch = x.shape()[0];
    let sample_len = x.len() / batch;
    let x0: Vec<f64> = x.values().to_vec();

    let clamp = |v: f64, orig: f64| -> f64 {
        let mut v = v.clamp(orig - cfg.epsilon, orig + cfg.epsilon);
        if let Some((lo, hi)) = cfg.clip_range {
            v = v.clamp(lo, hi);
        }
        precision.quantize(v)
    };

    let evaluate = |vals: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
        let mut tape = Tape::new(precision);
        let xid = tape.leaf(vals.to_vec(), x.shape().to_vec(), with_grad);
        let eval = objective(&mut tape, xid)?;
        let value = tape.scalar(eval.root);
        if eval.per_sample.len() != batch {
            return Err(AnchorError::Attack(format!(
                "objective reported {} per-sample values for batch {batch}",
                eval.per_sample.len()
            )));
        }
        if !with_grad {
            return Ok((value, eval.per_sample, None));
        }
        tape.backward(eval.root)?;
        let grad = tape
            .grad(xid)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; vals.len()]);
        Ok((value, eval.per_sample, Some(grad)))
    };

    let mut best_vals = x0.clone();
    let mut best_per_sample = vec![f64::NEG_INFINITY; batch];
    let mut trajectories = Vec::with_capacity(cfg.restarts);
    let mut finals = Vec::with_capacity(cfg.restarts);
    let mut max_linf = 0.0f64;

    for restart in 0..cfg.restarts {
        let mut cur = x0.clone();
        if cfg.random_start && cfg.epsilon > 0.0 {
            let mut rng = StreamRng::derive(seed, "pgd-start", &[restart as u64]);
            for (v, orig) in cur.iter_mut().zip(&x0) {
                *v = clamp(*v + rng.uniform_in(-cfg.epsilon, cfg.epsilon), *orig);
            }
        } else {
            precision.quantize_slice(&mut cur);
        }

        let mut trajectory = Vec::with_capacity(cfg.steps + 1);
        for step in 0..cfg.steps {
            let (value, _, grad) = evaluate(&cur, true)?;
            trajectory.push(value);
            let grad = grad.expect("gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(AnchorError::AttackNonFinite { step });
            }
            for (v, (g, orig)) in cur.iter_mut().zip(grad.iter().zip(&x0)) {
                *v = clamp(*v + cfg.alpha * sign(*g), *orig);
            }
        }
        let (final_value, per_sample, _) = evaluate(&cur, false)?;
        trajectory.push(final_value);
        trajectories.push(trajectory);

        let dev = cur
            .iter()
            .zip(&x0)
            .map(|(v, o)| (v - o).abs())
            .fold(0.0, f64::max);
        max_linf = max_linf.max(dev);

        for i in 0..batch {
            if per_sample[i] > best_per_sample[i] {
                best_per_sample[i] = per_sample[i];
                best_vals[i * sample_len..(i + 1) * sample_len]
                    .copy_from_slice(&cur[i * sample_len..(i + 1) * sample_len]);
            }
        }
        finals.push(per_sample);
    }

    Ok(AttackReport {
        adversarial: Tensor::new(x.shape().to_vec(), best_vals)?,
        objective_per_step: trajectories,
        per_sample_by_restart: finals,
        per_sample: best_per_sample,
        max_linf,
    })
}

/// Single-step sign-gradient attack: PGD with one step of size epsilon.
pub fn fgsm_attack(
    x: &Tensor,
    objective: &ObjectiveFn,
    epsilon: f64,
    clip_range: Option<(f64, f64)>,
    precision: Precision,
) -> Result<AttackReport> {
    let cfg = AttackConfig {
        epsilon,
        alpha: epsilon,
        steps: if epsilon > 0.0 { 1 } else { 0 },
        objective: ObjectiveKind::Ce,
        random_start: false,
        clip_range,
        restarts: 1,
    };
    pgd_attack(x, objective, &cfg, precision, 0)
}

/// Per-sample cross-entropy values computed from logits, for restart
/// selection and diagnostics.
fn per_sample_ce(logits: &[f64], labels: &[usize], classes: usize) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits[i * classes..(i + 1) * classes];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}

/// Build the attack objective for a model bundle.
///
/// `ce` differentiates the mean adversarial cross-entropy. `combined`
/// differentiates the full training loss: the hard-mined contrastive term over
/// the stacked (fixed augmented, live adversarial) projections plus lambda
/// times the cross-entropy. `z_reference` carries the augmented-view
/// projections; without it a single-sample batch has no positives and the
/// objective falls back to `ce` with a warning.
pub fn attack_objective<'a>(
    kind: ObjectiveKind,
    bundle: &'a ModelBundle,
    labels: &'a [usize],
    loss_cfg: &'a LossConfig,
    beta: f64,
    z_reference: Option<&'a Tensor>,
) -> Box<ObjectiveFn<'a>> {
    let classes = bundle.classifier_spec.class_count;
    match kind {
        ObjectiveKind::Ce => Box::new(move |tape: &mut Tape, x: TensorId| {
            let bound = bundle.bind_frozen(tape);
            let emb = bound.encode(tape, x)?;
            let logits = bound.classify(tape, emb)?;
            let per_sample = per_sample_ce(tape.value(logits), labels, classes);
            let root = tape.softmax_cross_entropy(logits, labels)?;
            Ok(ObjectiveEval { root, per_sample })
        }),
        ObjectiveKind::Combined => {
            if labels.len() == 1 && z_reference.is_none() {
                log::warn!(
                    "combined objective with batch size 1 and no reference views has no positives; falling back to ce"
                );
                return attack_objective(ObjectiveKind::Ce, bundle, labels, loss_cfg, beta, None);
            }
            Box::new(move |tape: &mut Tape, x: TensorId| {
                let mut bound = bundle.bind_frozen(tape);
                let emb = bound.encode(tape, x)?;
                let z_adv = bound.project(tape, emb)?;
                let logits = bound.classify(tape, emb)?;

                let (z_stack, stacked_labels) = match z_reference {
                    Some(z_ref) => {
                        let zr = tape.constant(z_ref.values().to_vec(), z_ref.shape().to_vec());
                        let stacked = tape.concat_rows(zr, z_adv)?;
                        let mut l = labels.to_vec();
                        l.extend_from_slice(labels);
                        (stacked, l)
                    }
                    None => (z_adv, labels.to_vec()),
                };

                let g = combined_loss_graph(
                    tape,
                    z_stack,
                    &stacked_labels,
                    logits,
                    labels,
                    beta,
                    loss_cfg,
                )?;

                // Per-sample view: the adversarial row's anchor contribution
                // plus lambda times its cross-entropy.
                let per_anchor = tape.value(g.contrastive.per_anchor);
                let offset = stacked_labels.len() - labels.len();
                let ce = per_sample_ce(tape.value(logits), labels, classes);
                let per_sample = (0..labels.len())
                    .map(|i| per_anchor[offset + i] + loss_cfg.lambda * ce[i])
                    .collect();
                Ok(ObjectiveEval {
                    root: g.total,
                    per_sample,
                })
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Linear objective w . x summed over the batch; per-sample dot products.
    fn linear_objective(w: Vec<f64>) -> Box<ObjectiveFn<'static>> {
        Box::new(move |tape: &mut Tape, x: TensorId| {
            let shape = tape.shape(x).to_vec();
            let batch = shape[0];
            let cols: usize = shape[1..].iter().product();
            let wid = tape.constant(
                w.iter().cycle().take(batch * cols).copied().collect(),
                shape.clone(),
            );
            let prod = tape.mul(wid, x)?;
            let per_sample = (0..batch)
                .map(|i| tape.value(prod)[i * cols..(i + 1) * cols].iter().sum())
                .collect();
            let root = tape.sum_all(prod)?;
            Ok(ObjectiveEval { root, per_sample })
        })
    }

    fn x_pair() -> Tensor {
        Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn zero_steps_is_identity() {
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.01,
            steps: 0,
            objective: ObjectiveKind::Ce,
            random_start: false,
            clip_range: Some((0.0, 1.0)),
            restarts: 1,
        };
        let x = x_pair();
        let obj = linear_objective(vec![3.0, -2.0]);
        let r = pgd_attack(&x, &*obj, &cfg, Precision::F64, 0).unwrap();
        assert_eq!(r.adversarial.values(), x.values());
        assert_eq!(r.max_linf, 0.0);
    }

    #[test]
    fn zero_epsilon_is_identity_for_any_step_count() {
        let cfg = AttackConfig {
            epsilon: 0.0,
            alpha: 0.01,
            steps: 7,
            objective: ObjectiveKind::Ce,
            random_start: true,
            clip_range: Some((0.0, 1.0)),
            restarts: 2,
        };
        let x = x_pair();
        let obj = linear_objective(vec![3.0, -2.0]);
        let r = pgd_attack(&x, &*obj, &cfg, Precision::F64, 1).unwrap();
        assert_eq!(r.adversarial.values(), x.values());
    }

    #[test]
    fn single_step_on_linear_objective_matches_hand_computation() {
        // w = (3, -2), alpha = 0.007: signs are (+1, -1).
        let cfg = AttackConfig {
            epsilon: 0.031,
            alpha: 0.007,
            steps: 1,
            objective: ObjectiveKind::Ce,
            random_start: false,
            clip_range: None,
            restarts: 1,
        };
        let x = x_pair();
        let obj = linear_objective(vec![3.0, -2.0]);
        let r = pgd_attack(&x, &*obj, &cfg, Precision::F64, 0).unwrap();
        assert!((r.adversarial.values()[0] - 0.507).abs() < 1e-12);
        assert!((r.adversarial.values()[1] - 0.493).abs() < 1e-12);
    }

    #[test]
    fn fgsm_matches_hand_computation_and_pgd1() {
        let x = x_pair();
        let obj = linear_objective(vec![3.0, -2.0]);
        let r = fgsm_attack(&x, &*obj, 0.031, None, Precision::F64).unwrap();
        assert!((r.adversarial.values()[0] - 0.531).abs() < 1e-12);
        assert!((r.adversarial.values()[1] - 0.469).abs() < 1e-12);

        let cfg = AttackConfig {
            epsilon: 0.031,
            alpha: 0.031,
            steps: 1,
            objective: ObjectiveKind::Ce,
            random_start: false,
            clip_range: None,
            restarts: 1,
        };
        let r2 = pgd_attack(&x, &*obj, &cfg, Precision::F64, 0).unwrap();
        assert_eq!(r.adversarial.values(), r2.adversarial.values());
    }

    #[test]
    fn ball_and_range_containment() {
        let mut rng = StreamRng::new(33);
        for trial in 0..25 {
            let n = 2 + rng.below(6);
            let x = Tensor::new(vec![1, n], (0..n).map(|_| rng.uniform()).collect()).unwrap();
            let w: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let cfg = AttackConfig {
                epsilon: rng.uniform_in(0.0, 0.2),
                alpha: rng.uniform_in(0.001, 0.1),
                steps: rng.below(15),
                objective: ObjectiveKind::Ce,
                random_start: rng.bernoulli(0.5),
                clip_range: Some((0.0, 1.0)),
                restarts: 1 + rng.below(3),
            };
            let obj = linear_objective(w);
            let r = pgd_attack(&x, &*obj, &cfg, Precision::F64, trial).unwrap();
            assert!(r.max_linf <= cfg.epsilon + 1e-6);
            for (v, o) in r.adversarial.values().iter().zip(x.values()) {
                assert!((v - o).abs() <= cfg.epsilon + 1e-6);
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn linear_objective_ascends_monotonically() {
        // Exact assertion: sign steps on a linear form cannot decrease it.
        let mut rng = StreamRng::new(44);
        for trial in 0..10 {
            let n = 3 + rng.below(5);
            let x = Tensor::new(vec![1, n], (0..n).map(|_| rng.uniform()).collect()).unwrap();
            let w: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let cfg = AttackConfig {
                epsilon: 0.05,
                alpha: 0.004,
                steps: 12,
                objective: ObjectiveKind::Ce,
                random_start: false,
                clip_range: None,
                restarts: 1,
            };
            let obj = linear_objective(w);
            let r = pgd_attack(&x, &*obj, &cfg, Precision::F64, trial).unwrap();
            let traj = &r.objective_per_step[0];
            for k in 1..traj.len() {
                assert!(
                    traj[k] >= traj[k - 1],
                    "objective decreased at step {k}: {:?}",
                    traj
                );
            }
        }
    }

    #[test]
    fn restart_dominates_every_individual_restart() {
        let mut rng = StreamRng::new(55);
        let n = 6;
        let x = Tensor::new(vec![2, 3], (0..n).map(|_| rng.uniform()).collect()).unwrap();
        let w: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let cfg = AttackConfig {
            epsilon: 0.08,
            alpha: 0.01,
            steps: 5,
            objective: ObjectiveKind::Ce,
            random_start: true,
            clip_range: Some((0.0, 1.0)),
            restarts: 4,
        };
        let obj = linear_objective(w);
        let r = pgd_attack(&x, &*obj, &cfg, Precision::F64, 7).unwrap();
        for restart in &r.per_sample_by_restart {
            for (merged, single) in r.per_sample.iter().zip(restart) {
                assert!(merged >= single);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AttackConfig {
            epsilon: -0.1,
            ..AttackConfig::eval_default()
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            alpha: 0.0,
            ..AttackConfig::eval_default()
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            restarts: 0,
            ..AttackConfig::eval_default()
        }
        .validate()
        .is_err());
    }
}
