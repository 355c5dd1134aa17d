//! Two-phase training and robustness evaluation.
//!
//! Phase 1 pretrains encoder, projection head and a linear classifier on the
//! combined objective (hard-mined contrastive term over augmented and
//! adversarial views plus weighted adversarial cross-entropy). Phase 2 freezes
//! the encoder and projection, re-initializes a zero-output MLP classifier and
//! finetunes it on adversarial cross-entropy alone. A clean cross-entropy
//! baseline shares the writer and evaluation harness for ordering comparisons.
//!
//! Training is single-threaded and deterministic in the master seed;
//! evaluation may fan batches out to workers and merges counts in batch index
//! order, so its results do not depend on the worker count.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attacks::{attack_objective, pgd_attack, AttackConfig, ObjectiveKind};
use crate::data::{augment_batch, AugmentConfig, Dataset};
use crate::error::{AnchorError, Result};
use crate::losses::{beta_schedule, combined_loss_graph, LossConfig};
use crate::models::{
    save_checkpoint, ClassifierSpec, Component, EncoderSpec, ModelBundle, ProjectionHeadSpec,
};
use crate::optim::SgdMomentum;
use crate::rng::StreamRng;
use crate::tape::Tape;
use crate::tensor::{Precision, Tensor};

/// Everything a training run needs; normally produced from
/// [`crate::config::RunConfig`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub apt_epochs: usize,
    pub apt_lr: f64,
    pub momentum: f64,
    pub attack_pretrain: AttackConfig,
    pub attack_apt: AttackConfig,
    pub attack_eval: AttackConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub precision: Precision,
    pub eval_workers: usize,
    pub encoder: EncoderSpec,
    pub projection: ProjectionHeadSpec,
    pub classifier_hidden: usize,
    pub class_count: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(AnchorError::Config(
                "batch_size must be >= 2 in phase 1".into(),
            ));
        }
        self.attack_pretrain.validate()?;
        self.attack_apt.validate()?;
        self.attack_eval.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.encoder.validate()
    }
}

/// One row of metrics.jsonl. Wall time is kept for progress reporting but not
/// serialized: metrics files must be byte-identical across equal-seed re-runs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_scl: f64,
    pub loss_ce: f64,
    pub beta_t: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust_acc: Option<f64>,
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Append-only JSON Lines metrics writer.
pub struct MetricsWriter {
    out: Option<std::io::BufWriter<std::fs::File>>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsWriter {
    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
            records: Vec::new(),
        })
    }

    /// Keeps records in memory only.
    pub fn sink() -> Self {
        MetricsWriter {
            out: None,
            records: Vec::new(),
        }
    }

    pub fn write(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        log::info!(
            "{} epoch {:>3}: total {:.4} scl {:.4} ce {:.4} beta {:.3} ({} ms)",
            record.phase,
            record.epoch,
            record.loss_total,
            record.loss_scl,
            record.loss_ce,
            record.beta_t,
            record.wall_ms
        );
        self.records.push(record);
        Ok(())
    }
}

/// File layout of one run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("run-config.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.ckpt"))
    }
}

/// Create the run directory and write the manifest and resolved-config
/// snapshot before any training step.
pub fn prepare_run_dir(
    root: &Path,
    run_id: &str,
    canonical_config: &str,
    checkpoint_name: &str,
) -> Result<RunPaths> {
    std::fs::create_dir_all(root)?;
    let paths = RunPaths::new(root);
    let manifest = serde_json::json!({
        "run_id": run_id,
        "artifacts": {
            "config": "run-config.json",
            "metrics": "metrics.jsonl",
            "checkpoint": format!("{checkpoint_name}.ckpt"),
        },
    });
    std::fs::write(paths.manifest(), format!("{manifest:#}\n"))?;
    std::fs::write(paths.config(), canonical_config)?;
    Ok(paths)
}

fn batches(n: usize, batch_size: usize, order: &[usize]) -> Vec<Vec<usize>> {
    debug_assert_eq!(order.len(), n);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn wrap_nonfinite(e: AnchorError, phase: &str, epoch: usize, batch: usize, seed: u64) -> AnchorError {
    match e {
        AnchorError::NonFinite { .. } | AnchorError::AttackNonFinite { .. } => {
            AnchorError::NonFiniteLoss {
                phase: phase.to_string(),
                epoch,
                batch,
                seed,
            }
        }
        other => other,
    }
}

/// Projections of a batch through the current model without gradients.
fn reference_projections(bundle: &ModelBundle, x: &Tensor, precision: Precision) -> Result<Tensor> {
    let mut tape = Tape::new(precision);
    let xid = tape.constant(x.values().to_vec(), x.shape().to_vec());
    let mut bound = bundle.bind_frozen(&mut tape);
    let emb = bound.encode(&mut tape, xid)?;
    let z = bound.project(&mut tape, emb)?;
    Ok(tape.to_tensor(z))
}

/// Phase 1: pretraining on the combined objective. Returns the trained bundle;
/// emits one metrics record per epoch.
pub fn pretrain(
    cfg: &TrainConfig,
    dataset: &Dataset,
    test: Option<&Dataset>,
    metrics: &mut MetricsWriter,
) -> Result<ModelBundle> {
    cfg.validate()?;
    let mut bundle = ModelBundle::new(
        cfg.encoder.clone(),
        cfg.projection.clone(),
        ClassifierSpec::linear(cfg.class_count),
        cfg.seed,
    )?;
    let mut opt = SgdMomentum::new(cfg.pretrain_lr, cfg.momentum);

    for epoch in 0..cfg.pretrain_epochs {
        let start = std::time::Instant::now();
        let beta_t = beta_schedule(epoch, &cfg.loss);
        assert_eq!(
            beta_t,
            beta_schedule(epoch, &cfg.loss),
            "beta used in epoch {epoch} must match the schedule"
        );

        let order = StreamRng::derive(cfg.seed, "shuffle", &[epoch as u64]).permutation(dataset.len());
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut n_batches = 0usize;

        for (bi, batch_idx) in batches(dataset.len(), cfg.batch_size, &order).iter().enumerate() {
            if batch_idx.len() < 2 {
                log::debug!("skipping singleton batch {bi} (contrastive loss needs pairs)");
                continue;
            }
            let (x, y) = dataset.gather(batch_idx);
            let x_aug = augment_batch(&x, &cfg.augment, cfg.seed, epoch, bi);

            // Adversarial view of the original inputs, against the combined
            // training objective with the current-model augmented projections
            // as the fixed reference rows.
            let report = {
                let z_ref = reference_projections(&bundle, &x_aug, cfg.precision)
                    .map_err(|e| wrap_nonfinite(e, "pretrain", epoch, bi, cfg.seed))?;
                let objective = attack_objective(
                    cfg.attack_pretrain.objective,
                    &bundle,
                    &y,
                    &cfg.loss,
                    beta_t,
                    Some(&z_ref),
                );
                let attack_seed = crate::rng::mix(cfg.seed, (epoch * 1_000_003 + bi) as u64);
                pgd_attack(&x, &*objective, &cfg.attack_pretrain, cfg.precision, attack_seed)
                    .map_err(|e| wrap_nonfinite(e, "pretrain", epoch, bi, cfg.seed))?
            };
            if bi == 0 && report.max_linf > cfg.attack_pretrain.epsilon + 1e-6 {
                return Err(AnchorError::Attack(format!(
                    "ball containment violated in epoch {epoch}: {} > {}",
                    report.max_linf, cfg.attack_pretrain.epsilon
                )));
            }
            let x_adv = report.adversarial;

            // One optimizer step on the combined loss over both views.
            let step = (|| -> Result<((f64, f64, f64), Vec<(Component, Vec<Option<Vec<f64>>>)>)> {
                let mut tape = Tape::new(cfg.precision);
                let xa = tape.constant(x_aug.values().to_vec(), x_aug.shape().to_vec());
                let xv = tape.constant(x_adv.values().to_vec(), x_adv.shape().to_vec());
                let mut bound = bundle.bind(&mut tape);
                let ea = bound.encode(&mut tape, xa)?;
                let za = bound.project(&mut tape, ea)?;
                let ev = bound.encode(&mut tape, xv)?;
                let zv = bound.project(&mut tape, ev)?;
                let stack = tape.concat_rows(za, zv)?;
                let logits = bound.classify(&mut tape, ev)?;
                let mut stacked_labels = y.clone();
                stacked_labels.extend_from_slice(&y);
                let g = combined_loss_graph(
                    &mut tape,
                    stack,
                    &stacked_labels,
                    logits,
                    &y,
                    beta_t,
                    &cfg.loss,
                )?;
                let values = (
                    tape.scalar(g.total),
                    tape.scalar(g.contrastive.loss),
                    tape.scalar(g.ce),
                );
                tape.backward(g.total)?;
                let grads = [Component::Encoder, Component::Projection, Component::Classifier]
                    .into_iter()
                    .map(|comp| (comp, bound.component_grads(&tape, comp)))
                    .collect();
                Ok((values, grads))
            })()
            .map_err(|e| wrap_nonfinite(e, "pretrain", epoch, bi, cfg.seed))?;

            let ((total, scl, ce), grads) = step;
            for (comp, g) in grads {
                opt.step(bundle.component_mut(comp), &g, cfg.precision);
            }
            sums.0 += total;
            sums.1 += scl;
            sums.2 += ce;
            n_batches += 1;
        }

        let nb = n_batches.max(1) as f64;
        let (mut clean_acc, mut robust_acc) = (None, None);
        if epoch + 1 == cfg.pretrain_epochs {
            if let Some(test) = test {
                let ev = evaluate(&bundle, test, &cfg.attack_eval, cfg)?;
                clean_acc = Some(ev.clean_acc);
                robust_acc = Some(ev.robust_acc);
            }
        }
        metrics.write(MetricsRecord {
            phase: "pretrain".into(),
            epoch,
            loss_total: sums.0 / nb,
            loss_scl: sums.1 / nb,
            loss_ce: sums.2 / nb,
            beta_t,
            clean_acc,
            robust_acc,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
    }
    Ok(bundle)
}

/// Phase 2: adversarial partial training. The encoder and projection are
/// frozen bitwise; a fresh zero-output MLP classifier is trained on
/// adversarial cross-entropy.
pub fn adversarial_partial_train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    test: Option<&Dataset>,
    mut bundle: ModelBundle,
    metrics: &mut MetricsWriter,
) -> Result<ModelBundle> {
    cfg.validate()?;
    bundle.set_frozen(Component::Encoder, true);
    bundle.set_frozen(Component::Projection, true);
    bundle.reinit_classifier(
        ClassifierSpec::zero_mlp(cfg.classifier_hidden, cfg.class_count),
        crate::rng::mix(cfg.seed, crate::rng::label("apt-classifier")),
    );
    let frozen_snapshot = (bundle.encoder.flat_values(), bundle.projection.flat_values());

    let mut opt = SgdMomentum::new(cfg.apt_lr, cfg.momentum);

    for epoch in 0..cfg.apt_epochs {
        let start = std::time::Instant::now();
        let order = StreamRng::derive(cfg.seed, "apt-shuffle", &[epoch as u64]).permutation(dataset.len());
        let mut ce_sum = 0.0f64;
        let mut n_batches = 0usize;

        for (bi, batch_idx) in batches(dataset.len(), cfg.batch_size, &order).iter().enumerate() {
            let (x, y) = dataset.gather(batch_idx);

            let report = {
                let objective =
                    attack_objective(ObjectiveKind::Ce, &bundle, &y, &cfg.loss, 0.0, None);
                let attack_seed = crate::rng::mix(cfg.seed, (epoch * 1_000_033 + bi) as u64 ^ 0xA97);
                pgd_attack(&x, &*objective, &cfg.attack_apt, cfg.precision, attack_seed)
                    .map_err(|e| wrap_nonfinite(e, "apt", epoch, bi, cfg.seed))?
            };
            if bi == 0 && report.max_linf > cfg.attack_apt.epsilon + 1e-6 {
                return Err(AnchorError::Attack(format!(
                    "ball containment violated in epoch {epoch}: {} > {}",
                    report.max_linf, cfg.attack_apt.epsilon
                )));
            }

            let step = (|| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
                let mut tape = Tape::new(cfg.precision);
                let xv = tape.constant(
                    report.adversarial.values().to_vec(),
                    report.adversarial.shape().to_vec(),
                );
                let bound = bundle.bind(&mut tape);
                let emb = bound.encode(&mut tape, xv)?;
                let logits = bound.classify(&mut tape, emb)?;
                let loss = tape.softmax_cross_entropy(logits, &y)?;
                let value = tape.scalar(loss);
                tape.backward(loss)?;
                Ok((value, bound.component_grads(&tape, Component::Classifier)))
            })()
            .map_err(|e| wrap_nonfinite(e, "apt", epoch, bi, cfg.seed))?;

            let (value, grads) = step;
            opt.step(bundle.component_mut(Component::Classifier), &grads, cfg.precision);
            ce_sum += value;
            n_batches += 1;
        }

        if bundle.encoder.flat_values() != frozen_snapshot.0
            || bundle.projection.flat_values() != frozen_snapshot.1
        {
            return Err(AnchorError::Attack(format!(
                "frozen components changed during apt epoch {epoch}"
            )));
        }

        let nb = n_batches.max(1) as f64;
        let (mut clean_acc, mut robust_acc) = (None, None);
        if epoch + 1 == cfg.apt_epochs {
            if let Some(test) = test {
                let ev = evaluate(&bundle, test, &cfg.attack_eval, cfg)?;
                clean_acc = Some(ev.clean_acc);
                robust_acc = Some(ev.robust_acc);
            }
        }
        metrics.write(MetricsRecord {
            phase: "apt".into(),
            epoch,
            loss_total: ce_sum / nb,
            loss_scl: 0.0,
            loss_ce: ce_sum / nb,
            beta_t: 0.0,
            clean_acc,
            robust_acc,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
    }
    Ok(bundle)
}

/// Comparison arm: the same architecture trained with clean cross-entropy
/// only. No augmentation, no attack, no contrastive term.
pub fn baseline_ce_train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    test: Option<&Dataset>,
    metrics: &mut MetricsWriter,
) -> Result<ModelBundle> {
    cfg.validate()?;
    let mut bundle = ModelBundle::new(
        cfg.encoder.clone(),
        cfg.projection.clone(),
        ClassifierSpec::linear(cfg.class_count),
        crate::rng::mix(cfg.seed, crate::rng::label("baseline")),
    )?;
    let mut opt = SgdMomentum::new(cfg.pretrain_lr, cfg.momentum);

    for epoch in 0..cfg.pretrain_epochs {
        let start = std::time::Instant::now();
        let order =
            StreamRng::derive(cfg.seed, "baseline-shuffle", &[epoch as u64]).permutation(dataset.len());
        let mut ce_sum = 0.0f64;
        let mut n_batches = 0usize;

        for (bi, batch_idx) in batches(dataset.len(), cfg.batch_size, &order).iter().enumerate() {
            let (x, y) = dataset.gather(batch_idx);
            let step = (|| -> Result<(f64, Vec<(Component, Vec<Option<Vec<f64>>>)>)> {
                let mut tape = Tape::new(cfg.precision);
                let xid = tape.constant(x.values().to_vec(), x.shape().to_vec());
                let bound = bundle.bind(&mut tape);
                let emb = bound.encode(&mut tape, xid)?;
                let logits = bound.classify(&mut tape, emb)?;
                let loss = tape.softmax_cross_entropy(logits, &y)?;
                let value = tape.scalar(loss);
                tape.backward(loss)?;
                let grads = [Component::Encoder, Component::Classifier]
                    .into_iter()
                    .map(|comp| (comp, bound.component_grads(&tape, comp)))
                    .collect();
                Ok((value, grads))
            })()
            .map_err(|e| wrap_nonfinite(e, "baseline", epoch, bi, cfg.seed))?;
            let (value, grads) = step;
            for (comp, g) in grads {
                opt.step(bundle.component_mut(comp), &g, cfg.precision);
            }
            ce_sum += value;
            n_batches += 1;
        }

        let nb = n_batches.max(1) as f64;
        let (mut clean_acc, mut robust_acc) = (None, None);
        if epoch + 1 == cfg.pretrain_epochs {
            if let Some(test) = test {
                let ev = evaluate(&bundle, test, &cfg.attack_eval, cfg)?;
                clean_acc = Some(ev.clean_acc);
                robust_acc = Some(ev.robust_acc);
            }
        }
        metrics.write(MetricsRecord {
            phase: "baseline".into(),
            epoch,
            loss_total: ce_sum / nb,
            loss_scl: 0.0,
            loss_ce: ce_sum / nb,
            beta_t: 0.0,
            clean_acc,
            robust_acc,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
    }
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub clean_correct: usize,
    pub robust_correct: usize,
    pub total: usize,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn eval_batch(
    bundle: &ModelBundle,
    dataset: &Dataset,
    indices: &[usize],
    attack: &AttackConfig,
    loss: &LossConfig,
    precision: Precision,
    seed: u64,
    batch_index: usize,
) -> Result<(usize, usize)> {
    let (x, y) = dataset.gather(indices);
    let classes = bundle.classifier_spec.class_count;

    let logits_for = |inputs: &Tensor| -> Result<Vec<f64>> {
        let mut tape = Tape::new(precision);
        let xid = tape.constant(inputs.values().to_vec(), inputs.shape().to_vec());
        let bound = bundle.bind_frozen(&mut tape);
        let emb = bound.encode(&mut tape, xid)?;
        let logits = bound.classify(&mut tape, emb)?;
        Ok(tape.value(logits).to_vec())
    };

    let clean_logits = logits_for(&x)?;
    let clean_correct = y
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax_row(&clean_logits[i * classes..(i + 1) * classes]) == label)
        .count();

    let objective = attack_objective(ObjectiveKind::Ce, bundle, &y, loss, 0.0, None);
    let attack_seed = crate::rng::mix(seed, crate::rng::mix(0xEA11, batch_index as u64));
    let report = pgd_attack(&x, &*objective, attack, precision, attack_seed)?;
    let adv_logits = logits_for(&report.adversarial)?;
    let robust_correct = y
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax_row(&adv_logits[i * classes..(i + 1) * classes]) == label)
        .count();

    Ok((clean_correct, robust_correct))
}

/// Clean and robust accuracy of a bundle on a dataset. The robust side attacks
/// with the given config against the cross-entropy objective. Batches may be
/// evaluated by parallel workers; counts merge in batch index order.
pub fn evaluate(
    bundle: &ModelBundle,
    dataset: &Dataset,
    attack: &AttackConfig,
    cfg: &TrainConfig,
) -> Result<EvalResult> {
    let order: Vec<usize> = (0..dataset.len()).collect();
    let chunks = batches(dataset.len(), cfg.batch_size, &order);

    let run_one = |(bi, indices): (usize, &Vec<usize>)| -> Result<(usize, usize)> {
        eval_batch(
            bundle,
            dataset,
            indices,
            attack,
            &cfg.loss,
            cfg.precision,
            cfg.seed,
            bi,
        )
    };

    #[allow(unused_mut)]
    let mut results: Vec<Result<(usize, usize)>>;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if cfg.eval_workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.eval_workers)
                .build()
                .map_err(|e| AnchorError::Config(format!("eval worker pool: {e}")))?;
            results = pool.install(|| chunks.par_iter().enumerate().map(run_one).collect());
        } else {
            results = chunks.iter().enumerate().map(run_one).collect();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        results = chunks.iter().enumerate().map(run_one).collect();
    }

    let mut clean_correct = 0usize;
    let mut robust_correct = 0usize;
    for r in results {
        let (c, a) = r?;
        clean_correct += c;
        robust_correct += a;
    }
    let total = dataset.len();
    Ok(EvalResult {
        clean_acc: clean_correct as f64 / total as f64,
        robust_acc: robust_correct as f64 / total as f64,
        clean_correct,
        robust_correct,
        total,
    })
}

/// Convenience: write a bundle checkpoint into a run directory.
pub fn write_checkpoint(bundle: &ModelBundle, paths: &RunPaths, name: &str) -> Result<PathBuf> {
    let path = paths.checkpoint(name);
    save_checkpoint(bundle, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{generate_split, DatasetKind, Split};

    /// A reduced configuration that exercises the full pipeline in seconds.
    fn mini_config(seed: u64) -> (TrainConfig, Dataset, Dataset) {
        let mut rc = RunConfig::default();
        rc.seed = seed;
        rc.data_n_train = 120;
        rc.data_n_test = 48;
        rc.batch_size = 24;
        rc.pretrain_epochs = 3;
        rc.apt_epochs = 2;
        rc.model_stem_width = 6;
        rc.model_block_widths = vec![6, 8];
        rc.model_embedding_dim = 16;
        rc.model_proj_hidden = 12;
        rc.model_proj_dim = 8;
        rc.model_classifier_hidden = 12;
        rc.attack_train.steps = 3;
        rc.attack_eval.steps = 5;
        let cfg = rc.train_config();
        let train = generate_split(DatasetKind::TinyImages, 3, rc.data_n_train, 0.1, seed, Split::Train)
            .unwrap();
        let test =
            generate_split(DatasetKind::TinyImages, 3, rc.data_n_test, 0.1, seed, Split::Test).unwrap();
        (cfg, train, test)
    }

    #[test]
    fn pretrain_smoke_emits_finite_metrics_and_decreasing_loss() {
        let (cfg, train, _) = mini_config(5);
        let mut metrics = MetricsWriter::sink();
        pretrain(&cfg, &train, None, &mut metrics).unwrap();
        assert_eq!(metrics.records.len(), cfg.pretrain_epochs);
        for r in &metrics.records {
            assert!(r.loss_total.is_finite());
            assert!(r.loss_scl.is_finite());
            assert!(r.loss_ce.is_finite());
            assert_eq!(r.beta_t, beta_schedule(r.epoch, &cfg.loss));
        }
        let first = metrics.records.first().unwrap().loss_total;
        let last = metrics.records.last().unwrap().loss_total;
        assert!(last < first, "loss should trend down: {first} -> {last}");
    }

    #[test]
    fn apt_freezes_encoder_and_projection_bitwise() {
        let (cfg, train, _) = mini_config(6);
        let mut metrics = MetricsWriter::sink();
        let bundle = pretrain(&cfg, &train, None, &mut metrics).unwrap();
        let enc_before = bundle.encoder.flat_values();
        let proj_before = bundle.projection.flat_values();
        let after = adversarial_partial_train(&cfg, &train, None, bundle, &mut metrics).unwrap();
        assert_eq!(enc_before, after.encoder.flat_values());
        assert_eq!(proj_before, after.projection.flat_values());
        // Classifier was re-initialized as a zero-output MLP and then trained.
        assert_eq!(after.classifier_spec.class_count, 3);
    }

    #[test]
    fn eval_with_zero_epsilon_matches_clean_accuracy() {
        let (cfg, train, test) = mini_config(7);
        let mut metrics = MetricsWriter::sink();
        let bundle = baseline_ce_train(&cfg, &train, None, &mut metrics).unwrap();
        let mut attack = cfg.attack_eval.clone();
        attack.epsilon = 0.0;
        let ev = evaluate(&bundle, &test, &attack, &cfg).unwrap();
        assert_eq!(ev.clean_acc, ev.robust_acc);
        assert_eq!(ev.clean_correct, ev.robust_correct);
    }

    #[test]
    fn constant_zero_classifier_predicts_class_zero_frequency() {
        let (cfg, _, test) = mini_config(8);
        let mut bundle = ModelBundle::new(
            cfg.encoder.clone(),
            cfg.projection.clone(),
            ClassifierSpec::zero_mlp(8, 3),
            1,
        )
        .unwrap();
        bundle.reinit_classifier(ClassifierSpec::zero_mlp(8, 3), 2);
        let mut attack = cfg.attack_eval.clone();
        attack.epsilon = 0.0;
        let ev = evaluate(&bundle, &test, &attack, &cfg).unwrap();
        let freq0 =
            test.labels.iter().filter(|&&l| l == 0).count() as f64 / test.len() as f64;
        assert_eq!(ev.clean_acc, freq0);
    }

    #[test]
    fn rerun_with_equal_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str| -> (Vec<u8>, Vec<u8>) {
            let (cfg, train, _) = mini_config(9);
            let paths = RunPaths::new(dir.path().join(name));
            std::fs::create_dir_all(&paths.root).unwrap();
            let mut metrics = MetricsWriter::to_file(&paths.metrics()).unwrap();
            let bundle = pretrain(&cfg, &train, None, &mut metrics).unwrap();
            let ckpt = write_checkpoint(&bundle, &paths, "pretrain").unwrap();
            (
                std::fs::read(paths.metrics()).unwrap(),
                std::fs::read(ckpt).unwrap(),
            )
        };
        let (m1, c1) = run("a");
        let (m2, c2) = run("b");
        assert_eq!(m1, m2, "metrics files differ between equal-seed runs");
        assert_eq!(c1, c2, "checkpoints differ between equal-seed runs");
    }

    #[test]
    fn metrics_schema_is_shared_across_phases() {
        let (cfg, train, _) = mini_config(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut metrics = MetricsWriter::to_file(&path).unwrap();
        let b = pretrain(&cfg, &train, None, &mut metrics).unwrap();
        adversarial_partial_train(&cfg, &train, None, b, &mut metrics).unwrap();
        baseline_ce_train(&cfg, &train, None, &mut metrics).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut phases = std::collections::BTreeSet::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for field in ["phase", "epoch", "loss_total", "loss_scl", "loss_ce", "beta_t"] {
                assert!(v.get(field).is_some(), "missing {field} in {line}");
            }
            phases.insert(v["phase"].as_str().unwrap().to_string());
        }
        assert_eq!(
            phases.into_iter().collect::<Vec<_>>(),
            vec!["apt", "baseline", "pretrain"]
        );
    }
}
