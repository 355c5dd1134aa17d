//! Independent verification: brute-force loss oracles, a direct-convolution
//! reference, a closed-form least-squares probe, and the full gradient-check
//! suite.
//!
//! Everything here deliberately avoids the tape: oracles are plain nested
//! loops over slices, so an agreement between the two paths is evidence, not
//! tautology.

use crate::attacks::{attack_objective, ObjectiveKind};
use crate::data::Dataset;
use crate::error::{AnchorError, Result};
use crate::gradcheck::{finite_diff_check, DEFAULT_STEP};
use crate::losses::{combined_loss_graph, LossConfig};
use crate::models::{ClassifierSpec, EncoderSpec, ModelBundle, ProjectionHeadSpec};
use crate::rng::StreamRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Precision, Tensor};

fn dot(z: &[f64], p: usize, i: usize, j: usize) -> f64 {
    let (a, b) = (&z[i * p..(i + 1) * p], &z[j * p..(j + 1) * p]);
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn positives(labels: &[usize], i: usize) -> Vec<usize> {
    (0..labels.len())
        .filter(|&a| a != i && labels[a] == labels[i])
        .collect()
}

/// Double-loop supervised contrastive loss: for each anchor, the mean over its
/// positives of -log(exp(s_ip/tau) / sum_{a != i} exp(s_ia/tau)), summed over
/// anchors. Anchors without positives contribute zero.
pub fn scl_oracle(z: &[f64], rows: usize, dim: usize, labels: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..rows {
        let pos = positives(labels, i);
        if pos.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for a in 0..rows {
            if a != i {
                denom += (dot(z, dim, i, a) / tau).exp();
            }
        }
        let mut inner = 0.0;
        for &p in &pos {
            inner += ((dot(z, dim, i, p) / tau).exp() / denom).ln();
        }
        total += -inner / pos.len() as f64;
    }
    total
}

/// Double-loop hard-positive-mined loss. Recomputes the pair weights
/// (exp(beta (1 - s)) normalized to mean one per anchor) and the margin-masked
/// denominator from scratch.
pub fn anchor_oracle(
    z: &[f64],
    rows: usize,
    dim: usize,
    labels: &[usize],
    tau: f64,
    beta: f64,
    margin: f64,
    margin_enabled: bool,
) -> f64 {
    let mut total = 0.0;
    for i in 0..rows {
        let pos = positives(labels, i);
        if pos.is_empty() {
            continue;
        }
        let raws: Vec<f64> = pos
            .iter()
            .map(|&p| (beta * (1.0 - dot(z, dim, i, p))).exp())
            .collect();
        let raw_sum: f64 = raws.iter().sum();

        let mut denom = 0.0;
        for a in 0..rows {
            if a == i {
                continue;
            }
            let s = dot(z, dim, i, a);
            let keep = labels[a] == labels[i] || !margin_enabled || s >= margin;
            if keep {
                denom += (s / tau).exp();
            }
        }

        let mut inner = 0.0;
        for (k, &p) in pos.iter().enumerate() {
            let w = raws[k] * pos.len() as f64 / raw_sum;
            inner += w * ((dot(z, dim, i, p) / tau).exp() / denom).ln();
        }
        total += -inner / pos.len() as f64;
    }
    total
}

/// Direct-summation mean cross-entropy with explicit softmax probabilities and
/// the log argument floored at 1e-12.
pub fn ce_oracle(logits: &[f64], rows: usize, classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..rows {
        let row = &logits[i * classes..(i + 1) * classes];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for (c, v) in row.iter().enumerate() {
            if c == labels[i] {
                let p = (v - mx).exp() / denom;
                total -= p.max(1e-12).ln();
            }
        }
    }
    total / rows as f64
}

/// Brute-force 3x3 / stride-1 / pad-1 convolution.
pub fn conv2d_oracle(
    inp: &[f64],
    wgt: &[f64],
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; batch * c_out * hw];
    for b in 0..batch {
        for oc in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ic in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = x as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += inp[(b * c_in + ic) * hw + iy as usize * w + ix as usize]
                                    * wgt[((oc * c_in + ic) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[(b * c_out + oc) * hw + y * w + x] = acc;
                }
            }
        }
    }
    out
}

/// Solve A X = B in place by Gaussian elimination with partial pivoting.
/// A is n x n, B is n x m (row-major); B becomes X.
pub fn solve_linear(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Result<()> {
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(AnchorError::Data("singular normal equations".into()));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            for k in 0..m {
                b.swap(col * m + k, pivot * m + k);
            }
        }
        let diag = a[col * n + col];
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            for k in 0..m {
                b[r * m + k] -= f * b[col * m + k];
            }
        }
    }
    for r in 0..n {
        let d = a[r * n + r];
        for k in 0..m {
            b[r * m + k] /= d;
        }
    }
    Ok(())
}

/// Train accuracy of a closed-form one-vs-all least-squares classifier with a
/// bias feature, fit on the dataset itself.
pub fn least_squares_probe(ds: &Dataset) -> Result<f64> {
    let n = ds.len();
    let d = ds.sample_len();
    let c = ds.class_count;
    let f = d + 1;
    let xv = ds.inputs.values();

    // Normal equations: (X^T X) W = X^T Y.
    let mut xtx = vec![0.0; f * f];
    let mut xty = vec![0.0; f * c];
    let feat = |i: usize, j: usize| -> f64 {
        if j < d {
            xv[i * d + j]
        } else {
            1.0
        }
    };
    for i in 0..n {
        for j in 0..f {
            let fj = feat(i, j);
            for k in j..f {
                xtx[j * f + k] += fj * feat(i, k);
            }
            xty[j * c + ds.labels[i]] += fj;
        }
    }
    for j in 0..f {
        for k in 0..j {
            xtx[j * f + k] = xtx[k * f + j];
        }
    }
    // Ridge floor keeps the system well-posed for collinear features.
    for j in 0..f {
        xtx[j * f + j] += 1e-8;
    }
    solve_linear(&mut xtx, &mut xty, f, c)?;

    let mut correct = 0usize;
    for i in 0..n {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for cls in 0..c {
            let mut score = 0.0;
            for j in 0..f {
                score += feat(i, j) * xty[j * c + cls];
            }
            if score > best_score {
                best_score = score;
                best = cls;
            }
        }
        if best == ds.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// One named gradient check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of a verification suite run.
#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    fn push(&mut self, name: impl Into<String>, err: f64) {
        self.checks.push(CheckResult {
            name: name.into(),
            max_rel_err: err,
        });
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.max_error() < threshold
    }
}

fn rand_tensor(rng: &mut StreamRng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Values bounded away from relu kinks, logs of zero, and the like.
fn rand_offset_tensor(rng: &mut StreamRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let mag = rng.uniform_in(lo, hi);
            if rng.bernoulli(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, values).expect("shape")
}

/// Step for finite differences through the full model. Smaller than the
/// per-op step so a perturbation cannot push a relu pre-activation across
/// zero; f64 evaluation keeps the quotient noise orders of magnitude below
/// the 1e-4 gate.
const MODEL_STEP: f64 = 2e-5;

/// A small model plus inputs whose relu pre-activations and projection norms
/// are bounded away from non-smooth points, so finite differences at
/// [`MODEL_STEP`] are meaningful. Deterministic in `seed`.
fn well_conditioned_case(seed: u64) -> (ModelBundle, Tensor, Tensor, Vec<usize>) {
    let labels = vec![0usize, 1, 2, 0, 1, 2];
    for attempt in 0..256 {
        let mut rng = StreamRng::derive(seed, "gradcheck-case", &[attempt]);
        let model_seed = rng.next_u64();
        let bundle = ModelBundle::new(
            EncoderSpec {
                in_channels: 3,
                stem_width: 4,
                block_widths: vec![6],
                convs_per_block: 1,
                embedding_dim: 8,
            },
            ProjectionHeadSpec { hidden: 6, output: 4 },
            ClassifierSpec::linear(3),
            model_seed,
        )
        .expect("small bundle");
        let x_aug = Tensor::new(
            vec![6, 3, 4, 4],
            (0..6 * 3 * 16).map(|_| rng.uniform_in(0.1, 0.9)).collect(),
        )
        .unwrap();
        let x_adv = Tensor::new(
            vec![6, 3, 4, 4],
            x_aug
                .values()
                .iter()
                .map(|v| (v + rng.uniform_in(-0.03, 0.03)).clamp(0.0, 1.0))
                .collect(),
        )
        .unwrap();

        if case_is_well_conditioned(&bundle, &x_aug, &x_adv, &labels) {
            return (bundle, x_aug, x_adv, labels);
        }
    }
    panic!("no well-conditioned gradcheck case found for seed {seed}");
}

/// Reject cases where any relu input or normalization row norm sits close
/// enough to a kink for the finite-difference step to cross it.
fn case_is_well_conditioned(
    bundle: &ModelBundle,
    x_aug: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
) -> bool {
    let margin = 20.0 * MODEL_STEP;
    let mut tape = Tape::new(Precision::F64);
    let xa = tape.input(x_aug);
    let xb = tape.input(x_adv);
    let mut bound = bundle.bind_frozen(&mut tape);
    let build = |tape: &mut Tape, bound: &mut crate::models::BoundModel, x: TensorId| {
        let e = bound.encode(tape, x)?;
        let z = bound.project(tape, e)?;
        let l = bound.classify(tape, e)?;
        Ok::<(TensorId, TensorId), AnchorError>((z, l))
    };
    let Ok((za, _)) = build(&mut tape, &mut bound, xa) else {
        return false;
    };
    let Ok((zb, logits)) = build(&mut tape, &mut bound, xb) else {
        return false;
    };
    let Ok(stack) = tape.concat_rows(za, zb) else {
        return false;
    };
    let mut stacked_labels = labels.to_vec();
    stacked_labels.extend_from_slice(labels);
    if combined_loss_graph(
        &mut tape,
        stack,
        &stacked_labels,
        logits,
        labels,
        0.8,
        &LossConfig::default(),
    )
    .is_err()
    {
        return false;
    }

    for id in 0..tape.len() {
        match tape.op_name(id) {
            "relu" => {
                let input = tape.node_inputs(id)[0];
                if tape.value(input).iter().any(|v| v.abs() < margin) {
                    return false;
                }
            }
            "l2-normalize-rows" => {
                let input = tape.node_inputs(id)[0];
                let shape = tape.shape(input);
                let (n, d) = (shape[0], shape[1]);
                let vals = tape.value(input);
                for i in 0..n {
                    let norm: f64 =
                        vals[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 0.05 {
                        return false;
                    }
                }
            }
            _ => {}
        }
    }
    true
}

/// Finite-difference checks for every differentiable op kind.
fn op_gradchecks(seed: u64, report: &mut SuiteReport) -> Result<()> {
    let mut rng = StreamRng::derive(seed, "op-gradcheck", &[]);
    let step = DEFAULT_STEP;

    let x = rand_tensor(&mut rng, vec![3, 4]);
    let other = rand_tensor(&mut rng, vec![3, 4]);
    let ov = other.values().to_vec();

    let pair = |name: &str,
                report: &mut SuiteReport,
                f: &dyn Fn(&mut Tape, TensorId, TensorId) -> Result<TensorId>|
     -> Result<()> {
        let ovc = ov.clone();
        let err = finite_diff_check(
            |tape, xid| {
                let o = tape.constant(ovc.clone(), vec![3, 4]);
                let y = f(tape, xid, o)?;
                tape.sum_all(y)
            },
            &x,
            step,
        )?;
        report.push(format!("op/{name}"), err);
        Ok(())
    };

    pair("add", report, &|t, a, b| t.add(a, b))?;
    pair("sub", report, &|t, a, b| t.sub(a, b))?;
    pair("mul", report, &|t, a, b| t.mul(a, b))?;
    pair("concat-rows", report, &|t, a, b| t.concat_rows(a, b))?;

    let positive = rand_offset_tensor(&mut rng, vec![2, 5], 0.4, 2.0);
    let positive = Tensor::new(
        vec![2, 5],
        positive.values().iter().map(|v| v.abs()).collect(),
    )
    .unwrap();
    let err = finite_diff_check(
        |tape, xid| {
            let y = tape.recip(xid)?;
            tape.sum_all(y)
        },
        &positive,
        step,
    )?;
    report.push("op/recip", err);
    let err = finite_diff_check(
        |tape, xid| {
            let y = tape.log(xid)?;
            tape.sum_all(y)
        },
        &positive,
        step,
    )?;
    report.push("op/log", err);
    let err = finite_diff_check(
        |tape, xid| {
            let y = tape.exp(xid)?;
            tape.sum_all(y)
        },
        &x,
        step,
    )?;
    report.push("op/exp", err);

    let off_kink = rand_offset_tensor(&mut rng, vec![4, 6], 0.1, 1.5);
    let err = finite_diff_check(
        |tape, xid| {
            let y = tape.relu(xid)?;
            tape.sum_all(y)
        },
        &off_kink,
        step,
    )?;
    report.push("op/relu", err);

    let err = finite_diff_check(
        |tape, xid| {
            let y = tape.scalar_mul(xid, -1.7)?;
            let y = tape.scalar_add(y, 0.3)?;
            tape.sum_all(y)
        },
        &x,
        step,
    )?;
    report.push("op/scalar-mul-add", err);

    // matmul: both operand positions.
    let a = rand_tensor(&mut rng, vec![3, 4]);
    let b = rand_tensor(&mut rng, vec![4, 2]);
    let bv = b.values().to_vec();
    let err = finite_diff_check(
        |tape, xid| {
            let bid = tape.constant(bv.clone(), vec![4, 2]);
            let y = tape.matmul(xid, bid)?;
            tape.sum_all(y)
        },
        &a,
        step,
    )?;
    report.push("op/matmul-lhs", err);
    let av = a.values().to_vec();
    let err = finite_diff_check(
        |tape, xid| {
            let aid = tape.constant(av.clone(), vec![3, 4]);
            let y = tape.matmul(aid, xid)?;
            tape.sum_all(y)
        },
        &b,
        step,
    )?;
    report.push("op/matmul-rhs", err);

    // bias-add-rows: both operand positions.
    let bias = rand_tensor(&mut rng, vec![4]);
    let biasv = bias.values().to_vec();
    let err = finite_diff_check(
        |tape, xid| {
            let bid = tape.constant(biasv.clone(), vec![4]);
            let y = tape.bias_add_rows(xid, bid)?;
            tape.sum_all(y)
        },
        &x,
        step,
    )?;
    report.push("op/bias-add-rows-x", err);
    let xv = x.values().to_vec();
    let err = finite_diff_check(
        |tape, bid| {
            let xid = tape.constant(xv.clone(), vec![3, 4]);
            let y = tape.bias_add_rows(xid, bid)?;
            tape.sum_all(y)
        },
        &bias,
        step,
    )?;
    report.push("op/bias-add-rows-b", err);

    // conv2d: input and weight positions.
    let ci = rand_tensor(&mut rng, vec![2, 2, 4, 4]);
    let cw = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
    let cwv = cw.values().to_vec();
    let err = finite_diff_check(
        |tape, xid| {
            let wid = tape.constant(cwv.clone(), vec![3, 2, 3, 3]);
            let y = tape.conv2d(xid, wid)?;
            tape.sum_all(y)
        },
        &ci,
        step,
    )?;
    report.push("op/conv2d-input", err);
    let civ = ci.values().to_vec();
    let err = finite_diff_check(
        |tape, wid| {
            let xid = tape.constant(civ.clone(), vec![2, 2, 4, 4]);
            let y = tape.conv2d(xid, wid)?;
            tape.sum_all(y)
        },
        &cw,
        step,
    )?;
    report.push("op/conv2d-weight", err);

    let img = rand_tensor(&mut rng, vec![2, 3, 4, 4]);
    let err = finite_diff_check(
        |tape, xid| {
            let y = tape.global_avg_pool(xid)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        },
        &img,
        step,
    )?;
    report.push("op/global-avg-pool", err);
    let err = finite_diff_check(
        |tape, xid| {
            let y = tape.flatten(xid)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        },
        &img,
        step,
    )?;
    report.push("op/flatten", err);

    let rows = rand_offset_tensor(&mut rng, vec![3, 5], 0.3, 1.5);
    let err = finite_diff_check(
        |tape, xid| {
            let y = tape.l2_normalize_rows(xid)?;
            let w = tape.constant((0..15).map(|i| 0.1 * i as f64 - 0.7).collect(), vec![3, 5]);
            let m = tape.mul(y, w)?;
            tape.sum_all(m)
        },
        &rows,
        step,
    )?;
    report.push("op/l2-normalize-rows", err);

    let z = rand_tensor(&mut rng, vec![4, 3]);
    let err = finite_diff_check(
        |tape, zid| {
            let s = tape.pairwise_dot(zid)?;
            let w = tape.constant((0..16).map(|i| (i as f64) * 0.13 - 1.0).collect(), vec![4, 4]);
            let m = tape.mul(s, w)?;
            tape.sum_all(m)
        },
        &z,
        step,
    )?;
    report.push("op/pairwise-dot", err);

    let err = finite_diff_check(
        |tape, xid| {
            let rs = tape.row_sum(xid)?;
            let sq = tape.mul(rs, rs)?;
            tape.sum_all(sq)
        },
        &x,
        step,
    )?;
    report.push("op/row-sum", err);

    let v = rand_tensor(&mut rng, vec![3]);
    let vv = v.values().to_vec();
    let err = finite_diff_check(
        |tape, xid| {
            let vid = tape.constant(vv.clone(), vec![3]);
            let y = tape.row_scale(xid, vid)?;
            tape.sum_all(y)
        },
        &x,
        step,
    )?;
    report.push("op/row-scale-matrix", err);
    let xvv = x.values().to_vec();
    let err = finite_diff_check(
        |tape, vid| {
            let xid = tape.constant(xvv.clone(), vec![3, 4]);
            let y = tape.row_scale(xid, vid)?;
            tape.sum_all(y)
        },
        &v,
        step,
    )?;
    report.push("op/row-scale-vector", err);

    let err = finite_diff_check(|tape, xid| tape.sum_all(xid), &x, step)?;
    report.push("op/sum-all", err);

    let err = finite_diff_check(
        |tape, xid| {
            let y = tape.log_sum_exp_rows(xid)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        },
        &x,
        step,
    )?;
    report.push("op/log-sum-exp", err);

    let logits = rand_tensor(&mut rng, vec![4, 3]);
    let err = finite_diff_check(
        |tape, lid| tape.softmax_cross_entropy(lid, &[0, 2, 1, 1]),
        &logits,
        step,
    )?;
    report.push("op/softmax-cross-entropy", err);

    Ok(())
}

/// Finite-difference checks for the losses with respect to embeddings and
/// logits. Raw embeddings pass through row normalization inside the closure,
/// exactly as in training.
fn loss_gradchecks(seed: u64, report: &mut SuiteReport) -> Result<()> {
    let mut rng = StreamRng::derive(seed, "loss-gradcheck", &[]);
    let step = DEFAULT_STEP;
    let labels = vec![0usize, 1, 2, 0, 1, 2];
    let raw = rand_offset_tensor(&mut rng, vec![6, 4], 0.25, 1.2);
    let cfg = LossConfig::default();

    let labels_c = labels.clone();
    let err = finite_diff_check(
        |tape, rid| {
            let z = tape.l2_normalize_rows(rid)?;
            Ok(crate::losses::scl_loss_graph(tape, z, &labels_c, 0.1)?.loss)
        },
        &raw,
        step,
    )?;
    report.push("loss/scl-wrt-z", err);

    let labels_c = labels.clone();
    let cfg_c = cfg.clone();
    let err = finite_diff_check(
        |tape, rid| {
            let z = tape.l2_normalize_rows(rid)?;
            Ok(crate::losses::anchor_loss_graph(tape, z, &labels_c, 1.1, &cfg_c)?.loss)
        },
        &raw,
        step,
    )?;
    report.push("loss/anchor-wrt-z", err);

    let logits = rand_tensor(&mut rng, vec![5, 3]);
    let err = finite_diff_check(
        |tape, lid| tape.softmax_cross_entropy(lid, &[0, 1, 2, 0, 1]),
        &logits,
        step,
    )?;
    report.push("loss/ce-adv-wrt-logits", err);

    // Combined loss with respect to the raw stacked embeddings; the logits
    // stay fixed inside the closure.
    let fixed_logits: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
    let half_labels = vec![0usize, 1, 2];
    let err = finite_diff_check(
        |tape, rid| {
            let z = tape.l2_normalize_rows(rid)?;
            let lg = tape.constant(fixed_logits.clone(), vec![3, 3]);
            let g = combined_loss_graph(tape, z, &labels, lg, &half_labels, 0.7, &cfg)?;
            Ok(g.total)
        },
        &raw,
        step,
    )?;
    report.push("loss/combined-wrt-z", err);

    Ok(())
}

/// Finite-difference check of the combined training loss with respect to every
/// model parameter, by direct perturbation of the bundle.
fn combined_param_gradcheck(seed: u64, report: &mut SuiteReport) -> Result<()> {
    let (bundle, x_aug, x_adv, labels) = well_conditioned_case(seed);
    let cfg = LossConfig::default();
    let beta = 0.8;
    let mut stacked_labels = labels.clone();
    stacked_labels.extend_from_slice(&labels);

    let loss_value = |b: &ModelBundle| -> Result<f64> {
        let mut tape = Tape::new(Precision::F64);
        let xa = tape.input(&x_aug);
        let xb = tape.input(&x_adv);
        let mut bound = b.bind_frozen(&mut tape);
        let ea = bound.encode(&mut tape, xa)?;
        let za = bound.project(&mut tape, ea)?;
        let eb = bound.encode(&mut tape, xb)?;
        let zb = bound.project(&mut tape, eb)?;
        let stack = tape.concat_rows(za, zb)?;
        let logits = bound.classify(&mut tape, eb)?;
        let g = combined_loss_graph(&mut tape, stack, &stacked_labels, logits, &labels, beta, &cfg)?;
        Ok(tape.scalar(g.total))
    };

    // Analytic gradients for all components in one pass.
    let mut tape = Tape::new(Precision::F64);
    let xa = tape.input(&x_aug);
    let xb = tape.input(&x_adv);
    let mut bound = bundle.bind(&mut tape);
    let ea = bound.encode(&mut tape, xa)?;
    let za = bound.project(&mut tape, ea)?;
    let eb = bound.encode(&mut tape, xb)?;
    let zb = bound.project(&mut tape, eb)?;
    let stack = tape.concat_rows(za, zb)?;
    let logits = bound.classify(&mut tape, eb)?;
    let g = combined_loss_graph(&mut tape, stack, &stacked_labels, logits, &labels, beta, &cfg)?;
    tape.backward(g.total)?;

    use crate::models::Component;
    for comp in [Component::Encoder, Component::Projection, Component::Classifier] {
        let grads = bound.component_grads(&tape, comp);
        let set = bundle.component(comp);
        let mut max_err = 0.0f64;
        for (pi, param) in set.params.iter().enumerate() {
            let analytic = grads[pi].clone().unwrap_or_else(|| vec![0.0; param.tensor.len()]);
            for j in 0..param.tensor.len() {
                let mut perturbed = bundle.clone();
                let vals = perturbed.component_mut(comp).params[pi].tensor.values_mut();
                let orig = vals[j];
                vals[j] = orig + MODEL_STEP;
                let fp = loss_value(&perturbed)?;
                let vals = perturbed.component_mut(comp).params[pi].tensor.values_mut();
                vals[j] = orig - MODEL_STEP;
                let fm = loss_value(&perturbed)?;
                let central = (fp - fm) / (2.0 * MODEL_STEP);
                let err = (analytic[j] - central).abs() / analytic[j].abs().max(1.0);
                max_err = max_err.max(err);
            }
        }
        let name = match comp {
            Component::Encoder => "loss/combined-wrt-encoder-params",
            Component::Projection => "loss/combined-wrt-projection-params",
            Component::Classifier => "loss/combined-wrt-classifier-params",
        };
        report.push(name, max_err);
    }
    Ok(())
}

/// Finite-difference check of the PGD inner objective (combined training loss
/// at fixed parameters) with respect to the inputs.
fn attack_objective_gradcheck(seed: u64, report: &mut SuiteReport) -> Result<()> {
    let (bundle, x_aug, x_adv, labels) = well_conditioned_case(seed.wrapping_add(101));
    let cfg = LossConfig::default();

    // Reference projections of the fixed view.
    let mut tape = Tape::new(Precision::F64);
    let xa = tape.input(&x_aug);
    let mut bound = bundle.bind_frozen(&mut tape);
    let ea = bound.encode(&mut tape, xa)?;
    let za = bound.project(&mut tape, ea)?;
    let z_ref = tape.to_tensor(za);

    let obj = attack_objective(
        ObjectiveKind::Combined,
        &bundle,
        &labels,
        &cfg,
        0.8,
        Some(&z_ref),
    );
    let err = finite_diff_check(|tape, xid| Ok(obj(tape, xid)?.root), &x_adv, MODEL_STEP)?;
    report.push("attack/pgd-objective-wrt-x", err);

    let obj = attack_objective(ObjectiveKind::Ce, &bundle, &labels, &cfg, 0.0, None);
    let err = finite_diff_check(|tape, xid| Ok(obj(tape, xid)?.root), &x_adv, MODEL_STEP)?;
    report.push("attack/ce-objective-wrt-x", err);
    Ok(())
}

/// The full gradient suite for one seed: every op kind, every loss, the
/// combined loss with respect to all parameters, and the PGD inner objective.
pub fn gradcheck_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    op_gradchecks(seed, &mut report)?;
    loss_gradchecks(seed, &mut report)?;
    combined_param_gradcheck(seed, &mut report)?;
    attack_objective_gradcheck(seed, &mut report)?;
    Ok(report)
}

/// Result of the oracle-equivalence suite.
#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub cases: usize,
    pub max_abs_diff: f64,
}

impl OracleReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_abs_diff <= tolerance
    }
}

/// Compare graph losses against the double-loop oracles on `batches` random
/// batches with 4..=16 rows and 2..=4 classes, in double precision.
pub fn oracle_suite(seed: u64, batches: usize) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    for case in 0..batches {
        let mut rng = StreamRng::derive(seed, "oracle-suite", &[case as u64]);
        let rows = 4 + rng.below(13);
        let classes = 2 + rng.below(3);
        let dim = 3 + rng.below(6);
        let tau = rng.uniform_in(0.07, 0.5);
        let beta = rng.uniform_in(0.0, 2.5);
        let margin_enabled = rng.bernoulli(0.5);
        let margin = if margin_enabled {
            rng.uniform_in(-0.5, 0.5)
        } else {
            -1.0
        };

        let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
        let mut z = vec![0.0; rows * dim];
        for i in 0..rows {
            let row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            for j in 0..dim {
                z[i * dim + j] = row[j] / norm;
            }
        }
        let zt = Tensor::new(vec![rows, dim], z.clone())?;

        let mut tape = Tape::new(Precision::F64);
        let zid = tape.input(&zt);
        let scl = crate::losses::scl_loss_graph(&mut tape, zid, &labels, tau)?;
        let scl_impl = tape.scalar(scl.loss);
        let scl_ref = scl_oracle(&z, rows, dim, &labels, tau);
        report.max_abs_diff = report.max_abs_diff.max((scl_impl - scl_ref).abs());

        let cfg = LossConfig {
            tau,
            margin,
            ..LossConfig::default()
        };
        let mut tape = Tape::new(Precision::F64);
        let zid = tape.input(&zt);
        let anchor = crate::losses::anchor_loss_graph(&mut tape, zid, &labels, beta, &cfg)?;
        let anchor_impl = tape.scalar(anchor.loss);
        let anchor_ref = anchor_oracle(&z, rows, dim, &labels, tau, beta, margin, margin_enabled);
        report.max_abs_diff = report.max_abs_diff.max((anchor_impl - anchor_ref).abs());

        let logits: Vec<f64> = (0..rows * classes).map(|_| 2.0 * rng.normal()).collect();
        let lt = Tensor::new(vec![rows, classes], logits.clone())?;
        let mut tape = Tape::new(Precision::F64);
        let lid = tape.input(&lt);
        let ce = tape.softmax_cross_entropy(lid, &labels)?;
        let ce_impl = tape.scalar(ce);
        let ce_ref = ce_oracle(&logits, rows, classes, &labels);
        report.max_abs_diff = report.max_abs_diff.max((ce_impl - ce_ref).abs());

        report.cases += 1;
    }
    Ok(report)
}
