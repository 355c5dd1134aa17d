//! The convolutional encoder with its low-resolution stem, the projection
//! head (training only), and the classifier heads, plus freezing,
//! re-initialization and the bitwise-exact checkpoint format.
//!
//! The stem is a single 3x3 / stride-1 convolution and nothing pools before
//! the first block, so small inputs keep their full spatial extent through the
//! early layers. Embeddings come from global average pooling followed by one
//! affine layer to the embedding width.

use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AnchorError, Result};
use crate::rng::StreamRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    /// Channels produced by the stem convolution.
    pub stem_width: usize,
    /// Channel count per block; each block is conv3x3 -> relu, repeated
    /// `convs_per_block` times.
    pub block_widths: Vec<usize>,
    pub convs_per_block: usize,
    /// Width of the embedding produced by the affine layer after pooling.
    pub embedding_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            in_channels: 3,
            stem_width: 16,
            block_widths: vec![16, 32],
            convs_per_block: 1,
            embedding_dim: 64,
        }
    }
}

impl EncoderSpec {
    fn last_width(&self) -> usize {
        *self.block_widths.last().unwrap_or(&self.stem_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.stem_width == 0
            || self.embedding_dim == 0
            || self.convs_per_block == 0
            || self.block_widths.iter().any(|&w| w == 0)
        {
            return Err(AnchorError::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProjectionHeadSpec {
    pub hidden: usize,
    /// Output width; must be smaller than the embedding width.
    pub output: usize,
}

impl Default for ProjectionHeadSpec {
    fn default() -> Self {
        ProjectionHeadSpec {
            hidden: 32,
            output: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    /// Logits are all zero on the first forward. For the MLP this zeroes the
    /// output layer and keeps a seeded random hidden layer; an entirely zero
    /// MLP would never receive gradient through its hidden units.
    Zero,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub hidden: usize,
    pub class_count: usize,
    pub init: InitKind,
}

impl ClassifierSpec {
    pub fn linear(class_count: usize) -> Self {
        ClassifierSpec {
            kind: ClassifierKind::Linear,
            hidden: 0,
            class_count,
            init: InitKind::Random,
        }
    }

    pub fn zero_mlp(hidden: usize, class_count: usize) -> Self {
        ClassifierSpec {
            kind: ClassifierKind::Mlp,
            hidden,
            class_count,
            init: InitKind::Zero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Projection,
    Classifier,
}

impl std::str::FromStr for Component {
    type Err = AnchorError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Component::Encoder),
            "projection" => Ok(Component::Projection),
            "classifier" => Ok(Component::Classifier),
            other => Err(AnchorError::UnknownComponent(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
    pub frozen: bool,
}

impl ParamSet {
    fn push(&mut self, name: String, tensor: Tensor) {
        self.params.push(Param { name, tensor });
    }

    /// Flatten all parameter values, for bitwise comparisons.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.values().iter().copied())
            .collect()
    }

    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

fn he_conv(rng: &mut StreamRng, c_out: usize, c_in: usize) -> Tensor {
    let std = (2.0 / (c_in * 9) as f64).sqrt();
    let values = (0..c_out * c_in * 9).map(|_| std * rng.normal()).collect();
    Tensor::new(vec![c_out, c_in, 3, 3], values).expect("conv shape")
}

fn he_linear(rng: &mut StreamRng, d_in: usize, d_out: usize) -> Tensor {
    let std = (2.0 / d_in as f64).sqrt();
    let values = (0..d_in * d_out).map(|_| std * rng.normal()).collect();
    Tensor::new(vec![d_in, d_out], values).expect("linear shape")
}

fn build_classifier(spec: &ClassifierSpec, emb_dim: usize, rng: &mut StreamRng) -> ParamSet {
    let mut set = ParamSet::default();
    match spec.kind {
        ClassifierKind::Linear => {
            let w = match spec.init {
                InitKind::Random => he_linear(rng, emb_dim, spec.class_count),
                InitKind::Zero => Tensor::zeros(vec![emb_dim, spec.class_count]),
            };
            set.push("classifier.fc.w".into(), w);
            set.push("classifier.fc.b".into(), Tensor::zeros(vec![spec.class_count]));
        }
        ClassifierKind::Mlp => {
            // Hidden layer is always seeded random; Zero only zeroes the output.
            set.push("classifier.fc1.w".into(), he_linear(rng, emb_dim, spec.hidden));
            set.push("classifier.fc1.b".into(), Tensor::zeros(vec![spec.hidden]));
            let w2 = match spec.init {
                InitKind::Random => he_linear(rng, spec.hidden, spec.class_count),
                InitKind::Zero => Tensor::zeros(vec![spec.hidden, spec.class_count]),
            };
            set.push("classifier.fc2.w".into(), w2);
            set.push("classifier.fc2.b".into(), Tensor::zeros(vec![spec.class_count]));
        }
    }
    set
}

/// Encoder, projection head and classifier with per-component freeze flags.
#[derive(Debug)]
pub struct ModelBundle {
    pub encoder_spec: EncoderSpec,
    pub projection_spec: ProjectionHeadSpec,
    pub classifier_spec: ClassifierSpec,
    pub encoder: ParamSet,
    pub projection: ParamSet,
    pub classifier: ParamSet,
    projection_reads: AtomicU64,
}

impl Clone for ModelBundle {
    fn clone(&self) -> Self {
        ModelBundle {
            encoder_spec: self.encoder_spec.clone(),
            projection_spec: self.projection_spec.clone(),
            classifier_spec: self.classifier_spec.clone(),
            encoder: self.encoder.clone(),
            projection: self.projection.clone(),
            classifier: self.classifier.clone(),
            projection_reads: AtomicU64::new(0),
        }
    }
}

impl ModelBundle {
    pub fn new(
        encoder_spec: EncoderSpec,
        projection_spec: ProjectionHeadSpec,
        classifier_spec: ClassifierSpec,
        seed: u64,
    ) -> Result<Self> {
        encoder_spec.validate()?;
        if projection_spec.output >= encoder_spec.embedding_dim {
            return Err(AnchorError::Config(format!(
                "projection output {} must be smaller than embedding dim {}",
                projection_spec.output, encoder_spec.embedding_dim
            )));
        }

        let mut rng = StreamRng::derive(seed, "model-init", &[]);
        let mut encoder = ParamSet::default();
        encoder.push(
            "encoder.stem.w".into(),
            he_conv(&mut rng, encoder_spec.stem_width, encoder_spec.in_channels),
        );
        let mut prev = encoder_spec.stem_width;
        for (bi, &width) in encoder_spec.block_widths.iter().enumerate() {
            for ci in 0..encoder_spec.convs_per_block {
                encoder.push(
                    format!("encoder.block{bi}.conv{ci}.w"),
                    he_conv(&mut rng, width, prev),
                );
                prev = width;
            }
        }
        encoder.push(
            "encoder.head.w".into(),
            he_linear(&mut rng, encoder_spec.last_width(), encoder_spec.embedding_dim),
        );
        encoder.push(
            "encoder.head.b".into(),
            Tensor::zeros(vec![encoder_spec.embedding_dim]),
        );

        let mut projection = ParamSet::default();
        projection.push(
            "projection.fc1.w".into(),
            he_linear(&mut rng, encoder_spec.embedding_dim, projection_spec.hidden),
        );
        projection.push(
            "projection.fc1.b".into(),
            Tensor::zeros(vec![projection_spec.hidden]),
        );
        projection.push(
            "projection.fc2.w".into(),
            he_linear(&mut rng, projection_spec.hidden, projection_spec.output),
        );
        projection.push(
            "projection.fc2.b".into(),
            Tensor::zeros(vec![projection_spec.output]),
        );

        let classifier = build_classifier(&classifier_spec, encoder_spec.embedding_dim, &mut rng);

        Ok(ModelBundle {
            encoder_spec,
            projection_spec,
            classifier_spec,
            encoder,
            projection,
            classifier,
            projection_reads: AtomicU64::new(0),
        })
    }

    pub fn component(&self, c: Component) -> &ParamSet {
        match c {
            Component::Encoder => &self.encoder,
            Component::Projection => &self.projection,
            Component::Classifier => &self.classifier,
        }
    }

    pub fn component_mut(&mut self, c: Component) -> &mut ParamSet {
        match c {
            Component::Encoder => &mut self.encoder,
            Component::Projection => &mut self.projection,
            Component::Classifier => &mut self.classifier,
        }
    }

    pub fn set_frozen(&mut self, c: Component, flag: bool) {
        self.component_mut(c).frozen = flag;
    }

    /// Replace the classifier parameters per the given spec. The fresh
    /// classifier starts unfrozen.
    pub fn reinit_classifier(&mut self, spec: ClassifierSpec, seed: u64) {
        let mut rng = StreamRng::derive(seed, "classifier-reinit", &[]);
        self.classifier = build_classifier(&spec, self.encoder_spec.embedding_dim, &mut rng);
        self.classifier_spec = spec;
    }

    /// How many times projection parameters were bound onto a tape. The
    /// evaluation path must leave this untouched.
    pub fn projection_read_count(&self) -> u64 {
        self.projection_reads.load(Ordering::Relaxed)
    }

    pub fn reset_projection_read_count(&self) {
        self.projection_reads.store(0, Ordering::Relaxed);
    }

    /// Bind parameters onto a tape for training: gradients are requested for
    /// every component that is not frozen.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundModel<'a> {
        BoundModel::new(self, tape, true)
    }

    /// Bind parameters as constants, for attacks and evaluation where only
    /// input gradients matter.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> BoundModel<'a> {
        BoundModel::new(self, tape, false)
    }

    /// Upper bound on the encoder's input-to-embedding l2 Lipschitz constant:
    /// the product of per-layer operator-norm bounds (sqrt(H*W) * ||w||_F per
    /// convolution, 1/sqrt(H*W) for pooling, ||W||_F for the head; relu is
    /// 1-Lipschitz).
    pub fn encoder_lipschitz_bound(&self, h: usize, w: usize) -> f64 {
        let hw = (h * w) as f64;
        let mut bound = 1.0;
        for p in &self.encoder.params {
            let frob: f64 = p.tensor.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            if p.tensor.shape().len() == 4 {
                bound *= hw.sqrt() * frob;
            } else if p.tensor.shape().len() == 2 {
                bound *= frob;
            }
            // Bias vectors cancel in differences.
        }
        bound / hw.sqrt()
    }
}

/// Parameters of one bundle registered on one tape.
pub struct BoundModel<'a> {
    bundle: &'a ModelBundle,
    trainable: bool,
    encoder_ids: Vec<TensorId>,
    classifier_ids: Vec<TensorId>,
    projection_ids: Option<Vec<TensorId>>,
}

fn bind_set(tape: &mut Tape, set: &ParamSet, trainable: bool) -> Vec<TensorId> {
    let requires_grad = trainable && !set.frozen;
    set.params
        .iter()
        .map(|p| tape.leaf(p.tensor.values().to_vec(), p.tensor.shape().to_vec(), requires_grad))
        .collect()
}

impl<'a> BoundModel<'a> {
    fn new(bundle: &'a ModelBundle, tape: &mut Tape, trainable: bool) -> Self {
        let encoder_ids = bind_set(tape, &bundle.encoder, trainable);
        let classifier_ids = bind_set(tape, &bundle.classifier, trainable);
        BoundModel {
            bundle,
            trainable,
            encoder_ids,
            classifier_ids,
            projection_ids: None,
        }
    }

    /// Encoder forward: stem conv, relu, block convs with relu, global average
    /// pool, affine head. Returns [B, D].
    pub fn encode(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let shape = tape.shape(x).to_vec();
        let spec = &self.bundle.encoder_spec;
        if shape.len() != 4 || shape[1] != spec.in_channels {
            return Err(AnchorError::BadShape {
                op: "encode",
                shape,
                reason: format!("expected [B,{},H,W]", spec.in_channels),
            });
        }
        let n_convs = 1 + spec.block_widths.len() * spec.convs_per_block;
        let mut cur = x;
        for conv_idx in 0..n_convs {
            let w = self.encoder_ids[conv_idx];
            cur = tape.conv2d(cur, w)?;
            cur = tape.relu(cur)?;
        }
        let pooled = tape.global_avg_pool(cur)?;
        let head_w = self.encoder_ids[n_convs];
        let head_b = self.encoder_ids[n_convs + 1];
        let lin = tape.matmul(pooled, head_w)?;
        tape.bias_add_rows(lin, head_b)
    }

    /// Projection head forward: affine, relu, affine, row normalization.
    /// Output rows are unit-norm. Binds the projection parameters lazily and
    /// counts every use.
    pub fn project(&mut self, tape: &mut Tape, embeddings: TensorId) -> Result<TensorId> {
        if self.projection_ids.is_none() {
            self.projection_ids = Some(bind_set(tape, &self.bundle.projection, self.trainable));
        }
        self.bundle.projection_reads.fetch_add(1, Ordering::Relaxed);
        let ids = self.projection_ids.as_ref().unwrap();
        let h = tape.matmul(embeddings, ids[0])?;
        let h = tape.bias_add_rows(h, ids[1])?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, ids[2])?;
        let out = tape.bias_add_rows(out, ids[3])?;
        tape.l2_normalize_rows(out)
    }

    /// Classifier forward; raw logits [B, C].
    pub fn classify(&self, tape: &mut Tape, embeddings: TensorId) -> Result<TensorId> {
        match self.bundle.classifier_spec.kind {
            ClassifierKind::Linear => {
                let l = tape.matmul(embeddings, self.classifier_ids[0])?;
                tape.bias_add_rows(l, self.classifier_ids[1])
            }
            ClassifierKind::Mlp => {
                let h = tape.matmul(embeddings, self.classifier_ids[0])?;
                let h = tape.bias_add_rows(h, self.classifier_ids[1])?;
                let h = tape.relu(h)?;
                let l = tape.matmul(h, self.classifier_ids[2])?;
                tape.bias_add_rows(l, self.classifier_ids[3])
            }
        }
    }

    /// Gradients for a component's parameters after backward, aligned with
    /// the `ParamSet` order. `None` entries received no gradient.
    pub fn component_grads(&self, tape: &Tape, c: Component) -> Vec<Option<Vec<f64>>> {
        let ids = match c {
            Component::Encoder => &self.encoder_ids,
            Component::Classifier => &self.classifier_ids,
            Component::Projection => match &self.projection_ids {
                Some(ids) => ids,
                None => return vec![None; self.bundle.projection.params.len()],
            },
        };
        ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect()
    }
}

/// Structural check on a built graph: every consumer of the input is a 3x3
/// stride-1 convolution, and no pooling happens before the last convolution.
pub fn stem_structure_ok(tape: &Tape, x: TensorId) -> bool {
    let consumers = tape.consumers(x);
    if consumers.is_empty() || !consumers.iter().all(|&c| tape.op_name(c) == "conv2d") {
        return false;
    }
    let last_conv = (0..tape.len())
        .filter(|&i| tape.op_name(i) == "conv2d")
        .max()
        .unwrap();
    !(0..last_conv).any(|i| tape.op_name(i) == "global-avg-pool")
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointManifest {
    encoder_spec: EncoderSpec,
    projection_spec: ProjectionHeadSpec,
    classifier_spec: ClassifierSpec,
    frozen: [bool; 3],
    params: Vec<ManifestEntry>,
}

/// Write a checkpoint: one JSON manifest line, then all parameters as one
/// little-endian f32 blob in manifest order. Round-trips bitwise.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let sets = [&bundle.encoder, &bundle.projection, &bundle.classifier];
    for set in sets {
        for p in &set.params {
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset,
            });
            offset += p.tensor.len();
        }
    }
    let manifest = CheckpointManifest {
        encoder_spec: bundle.encoder_spec.clone(),
        projection_spec: bundle.projection_spec.clone(),
        classifier_spec: bundle.classifier_spec.clone(),
        frozen: [
            bundle.encoder.frozen,
            bundle.projection.frozen,
            bundle.classifier.frozen,
        ],
        params: entries,
    };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for set in sets {
        for p in &set.params {
            for v in p.tensor.values() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| AnchorError::Checkpoint(format!("{}: missing manifest", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[..nl])?;
    let blob = &bytes[nl + 1..];

    let mut bundle = ModelBundle::new(
        manifest.encoder_spec,
        manifest.projection_spec,
        manifest.classifier_spec.clone(),
        0,
    )?;
    bundle.encoder.frozen = manifest.frozen[0];
    bundle.projection.frozen = manifest.frozen[1];
    bundle.classifier.frozen = manifest.frozen[2];

    let mut by_name: std::collections::HashMap<&str, &ManifestEntry> = std::collections::HashMap::new();
    for e in &manifest.params {
        by_name.insert(e.name.as_str(), e);
    }
    let total: usize = manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(AnchorError::Checkpoint(format!(
            "{}: blob length {} does not match manifest ({} floats)",
            path.display(),
            blob.len(),
            total
        )));
    }

    for set in [
        &mut bundle.encoder,
        &mut bundle.projection,
        &mut bundle.classifier,
    ] {
        for p in &mut set.params {
            let entry = by_name.remove(p.name.as_str()).ok_or_else(|| {
                AnchorError::Checkpoint(format!("missing parameter {:?}", p.name))
            })?;
            if entry.shape != p.tensor.shape() {
                return Err(AnchorError::Checkpoint(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    p.name,
                    entry.shape,
                    p.tensor.shape()
                )));
            }
            let start = entry.offset * 4;
            let vals = p.tensor.values_mut();
            for (i, chunk) in blob[start..start + vals.len() * 4].chunks_exact(4).enumerate() {
                vals[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        }
    }
    if !by_name.is_empty() {
        return Err(AnchorError::Checkpoint(format!(
            "unexpected parameters in manifest: {:?}",
            by_name.keys().collect::<Vec<_>>()
        )));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn small_bundle(seed: u64) -> ModelBundle {
        ModelBundle::new(
            EncoderSpec {
                in_channels: 3,
                stem_width: 4,
                block_widths: vec![4, 8],
                convs_per_block: 1,
                embedding_dim: 12,
            },
            ProjectionHeadSpec { hidden: 8, output: 4 },
            ClassifierSpec::linear(3),
            seed,
        )
        .unwrap()
    }

    fn batch_input(b: usize, seed: u64) -> Tensor {
        let mut rng = StreamRng::new(seed);
        Tensor::new(
            vec![b, 3, 8, 8],
            (0..b * 3 * 64).map(|_| rng.uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_encoder_maps_zero_to_zero() {
        let mut bundle = small_bundle(1);
        for p in &mut bundle.encoder.params {
            for v in p.tensor.values_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(vec![0.0; 3 * 64], vec![1, 3, 8, 8]);
        let bound = bundle.bind_frozen(&mut tape);
        let emb = bound.encode(&mut tape, x).unwrap();
        assert!(tape.value(emb).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_encode_equals_per_sample_encode() {
        let bundle = small_bundle(2);
        let xb = batch_input(4, 3);
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&xb);
        let bound = bundle.bind_frozen(&mut tape);
        let emb = bound.encode(&mut tape, x).unwrap();
        let full = tape.value(emb).to_vec();
        let d = bundle.encoder_spec.embedding_dim;

        for i in 0..4 {
            let mut t2 = Tape::new(Precision::F64);
            let xi = t2.constant(
                xb.values()[i * 3 * 64..(i + 1) * 3 * 64].to_vec(),
                vec![1, 3, 8, 8],
            );
            let b2 = bundle.bind_frozen(&mut t2);
            let e = b2.encode(&mut t2, xi).unwrap();
            assert_eq!(&full[i * d..(i + 1) * d], t2.value(e));
        }
    }

    #[test]
    fn single_pixel_perturbation_respects_lipschitz_bound() {
        let bundle = small_bundle(5);
        let x = batch_input(1, 7);
        let bound_const = bundle.encoder_lipschitz_bound(8, 8);
        let delta = 1e-3;

        let embed = |t: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new(Precision::F64);
            let id = tape.input(t);
            let b = bundle.bind_frozen(&mut tape);
            let e = b.encode(&mut tape, id).unwrap();
            tape.value(e).to_vec()
        };

        let base = embed(&x);
        let mut xp = x.clone();
        xp.values_mut()[37] += delta;
        let pert = embed(&xp);
        let change: f64 = base
            .iter()
            .zip(&pert)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(
            change <= bound_const * delta * (1.0 + 1e-9) + 1e-12,
            "change {change} exceeds bound {}",
            bound_const * delta
        );
    }

    #[test]
    fn projection_rows_are_unit_norm_and_deterministic() {
        let bundle = small_bundle(4);
        let mut rng = StreamRng::new(8);
        let d = bundle.encoder_spec.embedding_dim;
        let mut vals: Vec<f64> = (0..3 * d).map(|_| rng.normal()).collect();
        // Two identical rows must produce identical outputs.
        let row: Vec<f64> = vals[..d].to_vec();
        vals[d..2 * d].copy_from_slice(&row);
        let emb = Tensor::new(vec![3, d], vals).unwrap();

        let mut tape = Tape::new(Precision::F64);
        let e = tape.input(&emb);
        let mut bound = bundle.bind_frozen(&mut tape);
        let z = bound.project(&mut tape, e).unwrap();
        let p = bundle.projection_spec.output;
        assert_eq!(tape.shape(z), &[3, p]);
        let zv = tape.value(z);
        for i in 0..3 {
            let norm: f64 = zv[i * p..(i + 1) * p].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "row {i} norm {norm}");
        }
        assert_eq!(&zv[..p], &zv[p..2 * p]);
        assert_eq!(bundle.projection_read_count(), 1);
    }

    #[test]
    fn zero_init_classifiers_start_at_zero_logits() {
        let mut bundle = small_bundle(6);
        bundle.reinit_classifier(ClassifierSpec::zero_mlp(8, 3), 11);
        let d = bundle.encoder_spec.embedding_dim;
        let mut rng = StreamRng::new(2);
        let emb = Tensor::new(vec![5, d], (0..5 * d).map(|_| rng.normal()).collect()).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let e = tape.input(&emb);
        let bound = bundle.bind_frozen(&mut tape);
        let logits = bound.classify(&mut tape, e).unwrap();
        assert!(tape.value(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_classifier_on_zero_embedding_returns_bias() {
        let mut bundle = small_bundle(9);
        // Give the bias a recognizable value.
        for p in &mut bundle.classifier.params {
            if p.name.ends_with(".b") {
                for (i, v) in p.tensor.values_mut().iter_mut().enumerate() {
                    *v = i as f64 + 0.5;
                }
            }
        }
        let d = bundle.encoder_spec.embedding_dim;
        let mut tape = Tape::new(Precision::F64);
        let e = tape.constant(vec![0.0; d], vec![1, d]);
        let bound = bundle.bind_frozen(&mut tape);
        let logits = bound.classify(&mut tape, e).unwrap();
        assert_eq!(tape.value(logits), &[0.5, 1.5, 2.5]);
    }

    #[test]
    fn stem_structure_invariant_holds_on_built_graph() {
        let bundle = small_bundle(10);
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&batch_input(2, 12));
        let bound = bundle.bind_frozen(&mut tape);
        bound.encode(&mut tape, x).unwrap();
        assert!(stem_structure_ok(&tape, x));
    }

    #[test]
    fn unknown_component_name_is_an_error() {
        let err = "pooling".parse::<Component>().unwrap_err();
        assert!(matches!(err, AnchorError::UnknownComponent(_)));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut bundle = small_bundle(13);
        // Values must be on the f32 grid for exact round-tripping, as they are
        // after any f32-mode training step.
        for set in [&mut bundle.encoder, &mut bundle.projection, &mut bundle.classifier] {
            for p in &mut set.params {
                p.tensor.quantize(Precision::F32);
            }
        }
        save_checkpoint(&bundle, &p1).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(bundle.encoder.flat_values(), back.encoder.flat_values());
    }
}
