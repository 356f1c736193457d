//! Contrastive losses and the information-theoretic quantities built on them.
//!
//! The per-sample loss has the form `-log(pos / (pos + neg))`. Its negated
//! exponential `gamma = exp(-loss)` equals the ratio `pos / (pos + neg)` and
//! acts as a confidence in `(0, 1]`: it parameterizes an auxiliary Gaussian
//! `N(0, 1/gamma)` whose differential entropy measures how hard the
//! contrastive task is on a sample. Averaging those entropies over the data
//! gives the task entropy; subtracting the conditional entropy under sampled
//! noise gives a Monte Carlo mutual-information estimate between task and
//! noise.
//!
//! Losses come in two flavors: a pure `f64` path (the operation surface used
//! for diagnostics and as an independent cross-check) and graph builders that
//! record the same math on a tape so gradients reach encoder and generator
//! parameters. Tests hold the two routes together.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Differential entropy of the standard normal, `0.5 * ln(2*pi*e)` nats.
pub const STD_NORMAL_ENTROPY: f64 = 1.4189385332046727;

/// `log C = -0.5 * ln(2*pi)`, the Gaussian normalization constant in nats.
pub const LOG_GAUSS_NORM: f64 = -0.9189385332046727;

// ── Configuration ────────────────────────────────────────────────────

/// Which positive-pair similarity enters the exponential.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveLossVariant {
    /// Cosine similarity of the projected embeddings.
    Simclr,
    /// Dot product of unit-normalized projected embeddings.
    MemoryBank,
}

#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    /// Temperature inside the exponentials; must be positive.
    pub temperature: f64,
    pub variant: PositiveLossVariant,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.1, variant: PositiveLossVariant::Simclr }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 {
            Ok(())
        } else {
            Err(CoreError::Contract(format!(
                "temperature must be positive, got {}",
                self.temperature
            )))
        }
    }
}

// ── Encoder ──────────────────────────────────────────────────────────

/// One fully-connected layer; `weight` is `[fan_in, fan_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Kaiming-uniform fan-in weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = libm::sqrt(6.0 / fan_in as f64);
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.next_uniform(-bound, bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("init shape"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn register(&self, g: &mut Graph) -> LinearNodes {
        LinearNodes { weight: g.param(&self.weight), bias: g.param(&self.bias) }
    }

    pub fn register_const(&self, g: &mut Graph) -> LinearNodes {
        LinearNodes {
            weight: g.constant(self.weight.clone()),
            bias: g.constant(self.bias.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl LinearNodes {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let prod = g.matmul(x, self.weight)?;
        g.add(prod, self.bias)
    }
}

/// Layer widths of the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Width of both backbone hidden layers.
    pub hidden_dim: usize,
    /// Backbone output dimension; this is what evaluation consumes.
    pub repr_dim: usize,
    /// Width of the projection head's hidden layer.
    pub proj_hidden_dim: usize,
    /// Projection output dimension; this is what the losses consume.
    pub proj_dim: usize,
}

impl EncoderConfig {
    /// Full-scale widths: input -> 1024 -> 1024 -> 256, head 256 -> 128.
    pub fn standard(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dim: 1024,
            repr_dim: 256,
            proj_hidden_dim: 256,
            proj_dim: 128,
        }
    }
}

/// Backbone MLP plus projection head; the full parameter set is theta.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub layer1: Linear,
    pub layer2: Linear,
    pub layer3: Linear,
    pub proj1: Linear,
    pub proj2: Linear,
}

pub struct EncoderNodes {
    pub layer1: LinearNodes,
    pub layer2: LinearNodes,
    pub layer3: LinearNodes,
    pub proj1: LinearNodes,
    pub proj2: LinearNodes,
}

impl EncoderNodes {
    /// Node ids in the same canonical order as `EncoderModel::parameters`.
    pub fn param_ids(&self) -> Vec<NodeId> {
        [self.layer1, self.layer2, self.layer3, self.proj1, self.proj2]
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

impl EncoderModel {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Self {
        let layer1 = Linear::init(config.input_dim, config.hidden_dim, rng);
        let layer2 = Linear::init(config.hidden_dim, config.hidden_dim, rng);
        let layer3 = Linear::init(config.hidden_dim, config.repr_dim, rng);
        let proj1 = Linear::init(config.repr_dim, config.proj_hidden_dim, rng);
        let proj2 = Linear::init(config.proj_hidden_dim, config.proj_dim, rng);
        EncoderModel { config, layer1, layer2, layer3, proj1, proj2 }
    }

    /// Parameters in canonical order (matches `register` and checkpoints).
    pub fn parameters(&self) -> Vec<&Tensor> {
        vec![
            &self.layer1.weight, &self.layer1.bias,
            &self.layer2.weight, &self.layer2.bias,
            &self.layer3.weight, &self.layer3.bias,
            &self.proj1.weight, &self.proj1.bias,
            &self.proj2.weight, &self.proj2.bias,
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.layer1.weight, &mut self.layer1.bias,
            &mut self.layer2.weight, &mut self.layer2.bias,
            &mut self.layer3.weight, &mut self.layer3.bias,
            &mut self.proj1.weight, &mut self.proj1.bias,
            &mut self.proj2.weight, &mut self.proj2.bias,
        ]
    }

    pub fn parameter_names(&self) -> Vec<String> {
        ["layer1", "layer2", "layer3", "proj1", "proj2"]
            .iter()
            .flat_map(|l| [format!("encoder.{l}.weight"), format!("encoder.{l}.bias")])
            .collect()
    }

    pub fn register(&self, g: &mut Graph) -> EncoderNodes {
        EncoderNodes {
            layer1: self.layer1.register(g),
            layer2: self.layer2.register(g),
            layer3: self.layer3.register(g),
            proj1: self.proj1.register(g),
            proj2: self.proj2.register(g),
        }
    }

    pub fn register_const(&self, g: &mut Graph) -> EncoderNodes {
        EncoderNodes {
            layer1: self.layer1.register_const(g),
            layer2: self.layer2.register_const(g),
            layer3: self.layer3.register_const(g),
            proj1: self.proj1.register_const(g),
            proj2: self.proj2.register_const(g),
        }
    }

    /// Backbone only: inputs to the representation read by evaluation.
    pub fn backbone_nodes(&self, g: &mut Graph, nodes: &EncoderNodes, x: NodeId) -> Result<NodeId> {
        let h1 = nodes.layer1.apply(g, x)?;
        let h1 = g.relu(h1)?;
        let h2 = nodes.layer2.apply(g, h1)?;
        let h2 = g.relu(h2)?;
        nodes.layer3.apply(g, h2)
    }

    /// Projection head only: representation to the loss-facing embedding.
    pub fn projection_nodes(
        &self,
        g: &mut Graph,
        nodes: &EncoderNodes,
        repr: NodeId,
    ) -> Result<NodeId> {
        let p1 = nodes.proj1.apply(g, repr)?;
        let p1 = g.relu(p1)?;
        nodes.proj2.apply(g, p1)
    }

    /// Forward through registered nodes: returns (representation, projection).
    pub fn forward_nodes(
        g: &mut Graph,
        nodes: &EncoderNodes,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        // Associated form kept for callers without a model reference; the
        // node set fully determines the computation.
        let h1 = nodes.layer1.apply(g, x)?;
        let h1 = g.relu(h1)?;
        let h2 = nodes.layer2.apply(g, h1)?;
        let h2 = g.relu(h2)?;
        let repr = nodes.layer3.apply(g, h2)?;
        let p1 = nodes.proj1.apply(g, repr)?;
        let p1 = g.relu(p1)?;
        let proj = nodes.proj2.apply(g, p1)?;
        Ok((repr, proj))
    }

    /// Gradient-free forward pass for evaluation and diagnostics.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let nodes = self.register_const(&mut g);
        let xid = g.constant(x.clone());
        let (repr, proj) = EncoderModel::forward_nodes(&mut g, &nodes, xid)?;
        Ok((g.value(repr).clone(), g.value(proj).clone()))
    }
}

// ── Embedding batches ────────────────────────────────────────────────

/// Projected embeddings for one batch, rows aligned by sample index.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub extra_negatives: Option<Tensor>,
}

impl EmbeddingBatch {
    pub fn new(
        anchors: Tensor,
        positives: Tensor,
        extra_negatives: Option<Tensor>,
    ) -> Result<Self> {
        if anchors.shape() != positives.shape() || anchors.shape().len() != 2 {
            return Err(CoreError::Dimension(format!(
                "anchors {:?} and positives {:?} must be equal-shape matrices",
                anchors.shape(),
                positives.shape()
            )));
        }
        if let Some(extra) = &extra_negatives {
            if extra.shape().len() != 2 || extra.cols() != anchors.cols() {
                return Err(CoreError::Dimension(format!(
                    "extra negatives {:?} must match embedding dim {}",
                    extra.shape(),
                    anchors.cols()
                )));
            }
        }
        Ok(EmbeddingBatch { anchors, positives, extra_negatives })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(t: &Tensor, i: usize) -> &[f64] {
        let d = t.cols();
        &t.data()[i * d..(i + 1) * d]
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < self.len() {
            Ok(())
        } else {
            Err(CoreError::Contract(format!(
                "sample index {i} out of range for batch of {}",
                self.len()
            )))
        }
    }

    /// Negative rows for anchor `i`: all other in-batch views across both
    /// augmentations, plus any extra negatives.
    fn negatives_of(&self, i: usize) -> Vec<&[f64]> {
        let m = self.len();
        let mut out = Vec::with_capacity(2 * m);
        for j in 0..m {
            if j != i {
                out.push(Self::row(&self.anchors, j));
                out.push(Self::row(&self.positives, j));
            }
        }
        if let Some(extra) = &self.extra_negatives {
            for j in 0..extra.rows() {
                out.push(Self::row(extra, j));
            }
        }
        out
    }
}

// ── Similarities and per-sample losses (value path) ──────────────────

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    libm::sqrt(dot(u, u))
}

/// `dot(u, v) / (|u| * |v|)`; errors on zero-norm input.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CoreError::Dimension(format!(
            "cosine similarity needs equal lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(CoreError::Domain(String::from(
            "cosine similarity of a zero-norm vector",
        )));
    }
    Ok(dot(u, v) / (nu * nv))
}

fn pair_similarity(u: &[f64], v: &[f64], variant: PositiveLossVariant) -> Result<f64> {
    match variant {
        PositiveLossVariant::Simclr => cosine_similarity(u, v),
        PositiveLossVariant::MemoryBank => {
            let (nu, nv) = (norm(u), norm(v));
            if nu == 0.0 || nv == 0.0 {
                return Err(CoreError::Domain(String::from(
                    "zero-norm embedding cannot be unit-normalized",
                )));
            }
            Ok(u.iter().zip(v).map(|(&a, &b)| (a / nu) * (b / nv)).sum())
        }
    }
}

/// `exp(sim(z_i, z_i+) / tau)` for the configured similarity.
pub fn positive_loss(batch: &EmbeddingBatch, i: usize, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    batch.check_index(i)?;
    let sim = pair_similarity(
        EmbeddingBatch::row(&batch.anchors, i),
        EmbeddingBatch::row(&batch.positives, i),
        cfg.variant,
    )?;
    Ok(libm::exp(sim / cfg.temperature))
}

/// Sum of `exp(sim / tau)` over anchor `i`'s negative set.
pub fn negative_loss(batch: &EmbeddingBatch, i: usize, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    batch.check_index(i)?;
    let negatives = batch.negatives_of(i);
    if negatives.is_empty() {
        return Err(CoreError::Contract(format!(
            "no negatives for sample {i}: batch of one needs extra negatives"
        )));
    }
    let anchor = EmbeddingBatch::row(&batch.anchors, i);
    let mut total = 0.0;
    for neg in negatives {
        let sim = pair_similarity(anchor, neg, cfg.variant)?;
        total += libm::exp(sim / cfg.temperature);
    }
    Ok(total)
}

/// `-log(pos / (pos + neg))` from already-computed parts.
pub fn loss_from_pos_neg(pos: f64, neg: f64) -> f64 {
    libm::log(pos + neg) - libm::log(pos)
}

/// Per-sample contrastive loss `-log(pos / (pos + neg))`.
pub fn per_sample_loss(batch: &EmbeddingBatch, i: usize, cfg: &ContrastiveConfig) -> Result<f64> {
    let pos = positive_loss(batch, i, cfg)?;
    let neg = negative_loss(batch, i, cfg)?;
    Ok(loss_from_pos_neg(pos, neg))
}

/// Batch mean of the per-sample losses.
pub fn infonce_loss(batch: &EmbeddingBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::Contract(String::from("empty batch")));
    }
    let mut total = 0.0;
    for i in 0..batch.len() {
        total += per_sample_loss(batch, i, cfg)?;
    }
    Ok(total / batch.len() as f64)
}

// ── Confidence and entropies ─────────────────────────────────────────

/// Confidence `gamma = exp(-loss)`, the positive/(positive+negative) ratio.
pub fn gamma(loss: f64) -> Result<f64> {
    if loss < 0.0 {
        return Err(CoreError::Contract(format!(
            "per-sample loss must be nonnegative, got {loss}"
        )));
    }
    Ok(libm::exp(-loss))
}

/// The auxiliary distribution `N(0, 1/precision)` with precision in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxiliaryGaussian {
    precision: f64,
}

impl AuxiliaryGaussian {
    pub fn new(precision: f64) -> Result<Self> {
        if precision > 0.0 && precision <= 1.0 {
            Ok(AuxiliaryGaussian { precision })
        } else {
            Err(CoreError::Domain(format!(
                "precision must lie in (0, 1], got {precision}"
            )))
        }
    }

    pub fn from_loss(loss: f64) -> Result<Self> {
        AuxiliaryGaussian::new(gamma(loss)?)
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }

    /// Differential entropy in nats; at least [`STD_NORMAL_ENTROPY`].
    pub fn entropy(&self) -> f64 {
        gaussian_entropy(self.precision).expect("precision validated")
    }
}

/// Entropy of `N(0, 1/precision)`: `0.5*ln(2*pi*e) - 0.5*ln(precision)` nats.
pub fn gaussian_entropy(precision: f64) -> Result<f64> {
    if precision <= 0.0 {
        return Err(CoreError::Domain(format!(
            "precision must be positive, got {precision}"
        )));
    }
    Ok(STD_NORMAL_ENTROPY - 0.5 * libm::log(precision))
}

/// Mean auxiliary-Gaussian entropy over per-sample losses.
pub fn task_entropy(dataset_losses: &[f64]) -> Result<f64> {
    if dataset_losses.is_empty() {
        return Err(CoreError::Contract(String::from(
            "task entropy of an empty loss list",
        )));
    }
    let mut total = 0.0;
    for &loss in dataset_losses {
        total += gaussian_entropy(gamma(loss)?)?;
    }
    Ok(total / dataset_losses.len() as f64)
}

// ── Graph builders ───────────────────────────────────────────────────

/// Nodes produced by [`build_infonce_loss`].
pub struct InfonceNodes {
    /// Scalar batch mean.
    pub loss: NodeId,
    /// Per-sample loss vector, length `m`.
    pub per_sample: NodeId,
    /// Per-sample positive terms `exp(sim/tau)`, length `m`.
    pub positive: NodeId,
    /// Per-sample negative sums, length `m`.
    pub negative: NodeId,
}

/// Record the NT-Xent style loss on the tape.
///
/// `anchors_z` and `positives_z` are `[m, d]` nodes of projected embeddings;
/// anchor `i`'s positive is row `i` of `positives_z` and its negatives are
/// every other view in the batch (plus `extras_z` rows, when given).
pub fn build_infonce_loss(
    g: &mut Graph,
    anchors_z: NodeId,
    positives_z: NodeId,
    extras_z: Option<NodeId>,
    cfg: &ContrastiveConfig,
) -> Result<InfonceNodes> {
    cfg.validate()?;
    let m = g.value(anchors_z).rows();
    if m == 0 {
        return Err(CoreError::Contract(String::from("empty batch")));
    }
    if g.value(anchors_z).shape() != g.value(positives_z).shape() {
        return Err(CoreError::Dimension(format!(
            "anchors {:?} and positives {:?} disagree",
            g.value(anchors_z).shape(),
            g.value(positives_z).shape()
        )));
    }
    let extra_rows = extras_z.map_or(0, |e| g.value(e).rows());
    if m == 1 && extra_rows == 0 {
        return Err(CoreError::Contract(String::from(
            "no negatives: batch of one needs extra negatives",
        )));
    }

    // All candidate views: [m anchors | m positives | extras].
    let mut all = g.concat_rows(anchors_z, positives_z)?;
    if let Some(extras) = extras_z {
        all = g.concat_rows(all, extras)?;
    }
    let cols = 2 * m + extra_rows;

    let anchor_norms = g.l2_norm(anchors_z, Some(1))?;
    let all_norms = g.l2_norm(all, Some(1))?;
    if g.value(all_norms).data().contains(&0.0) {
        return Err(CoreError::Domain(String::from(
            "zero-norm embedding in cosine similarity",
        )));
    }

    // Cosine similarity matrix [m, cols]; the two variants differ only in
    // whether normalization happens before or after the product.
    let sims = match cfg.variant {
        PositiveLossVariant::Simclr => {
            let all_t = g.transpose(all)?;
            let raw = g.matmul(anchors_z, all_t)?;
            let by_anchor = g.div_colvec(raw, anchor_norms)?;
            g.div(by_anchor, all_norms)?
        }
        PositiveLossVariant::MemoryBank => {
            let anchors_unit = g.div_colvec(anchors_z, anchor_norms)?;
            let all_unit = g.div_colvec(all, all_norms)?;
            let all_unit_t = g.transpose(all_unit)?;
            g.matmul(anchors_unit, all_unit_t)?
        }
    };

    let logits = g.scale(sims, 1.0 / cfg.temperature)?;
    let exps = g.exp(logits)?;

    // Positive mask selects (i, m+i); negatives exclude self and positive.
    let mut pos_mask = vec![0.0; m * cols];
    let mut neg_mask = vec![1.0; m * cols];
    for i in 0..m {
        pos_mask[i * cols + m + i] = 1.0;
        neg_mask[i * cols + i] = 0.0;
        neg_mask[i * cols + m + i] = 0.0;
    }
    let pos_mask = g.constant(Tensor::new(vec![m, cols], pos_mask)?);
    let neg_mask = g.constant(Tensor::new(vec![m, cols], neg_mask)?);

    let pos_terms = g.mul(exps, pos_mask)?;
    let positive = g.sum(pos_terms, Some(1))?;
    let neg_terms = g.mul(exps, neg_mask)?;
    let negative = g.sum(neg_terms, Some(1))?;

    let denom = g.add(positive, negative)?;
    let log_denom = g.log(denom)?;
    let log_pos = g.log(positive)?;
    let per_sample = g.sub(log_denom, log_pos)?;
    let loss = g.mean(per_sample, None)?;

    Ok(InfonceNodes { loss, per_sample, positive, negative })
}

/// Record the Monte Carlo negative conditional entropy on the tape.
///
/// `per_sample_losses` holds one per-sample loss vector per noise draw; the
/// result is `mean(log C + 0.5 * log gamma - 0.5)` over samples and draws,
/// with `log gamma = -loss` substituted in closed form.
pub fn build_neg_conditional_entropy(
    g: &mut Graph,
    per_sample_losses: &[NodeId],
) -> Result<NodeId> {
    if per_sample_losses.is_empty() {
        return Err(CoreError::Contract(String::from(
            "at least one Monte Carlo draw is required",
        )));
    }
    let mut draw_means = Vec::with_capacity(per_sample_losses.len());
    for &losses in per_sample_losses {
        let half_log_gamma = g.scale(losses, -0.5)?;
        let terms = g.shift(half_log_gamma, LOG_GAUSS_NORM - 0.5)?;
        draw_means.push(g.mean(terms, None)?);
    }
    let mut acc = draw_means[0];
    for &m in &draw_means[1..] {
        acc = g.add(acc, m)?;
    }
    g.scale(acc, 1.0 / draw_means.len() as f64)
}

// ── Monte Carlo estimate (value path) ────────────────────────────────

/// `-H(task | noise)` estimated from `S` noise draws.
///
/// For each draw `eps_s` the contrastive views are `(x + eps_s, x)`; the
/// inner integral over the auxiliary variable is closed-form, so only the
/// noise is ever sampled:
/// `(1/n) sum_x (1/S) sum_s [log C + 0.5 * log gamma(x, eps_s) - 0.5]`.
pub fn neg_conditional_entropy_mc(
    x: &Tensor,
    noise_draws: &[Tensor],
    encoder: &EncoderModel,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    if noise_draws.is_empty() {
        return Err(CoreError::Contract(String::from(
            "at least one Monte Carlo draw is required",
        )));
    }
    let (_, clean_z) = encoder.embed(x)?;
    let mut total = 0.0;
    for eps in noise_draws {
        if eps.shape() != x.shape() {
            return Err(CoreError::Dimension(format!(
                "noise shape {:?} must match data shape {:?}",
                eps.shape(),
                x.shape()
            )));
        }
        let noisy: Vec<f64> =
            x.data().iter().zip(eps.data()).map(|(&a, &b)| a + b).collect();
        let noisy = Tensor::new(x.shape().to_vec(), noisy)?;
        let (_, noisy_z) = encoder.embed(&noisy)?;
        let batch = EmbeddingBatch::new(noisy_z, clean_z.clone(), None)?;
        let mut draw_total = 0.0;
        for i in 0..batch.len() {
            let loss = per_sample_loss(&batch, i, cfg)?;
            let conf = gamma(loss)?;
            draw_total += LOG_GAUSS_NORM + 0.5 * libm::log(conf) - 0.5;
        }
        total += draw_total / batch.len() as f64;
    }
    Ok(total / noise_draws.len() as f64)
}

/// `MI(task, noise) = H(task) - H(task | noise)`; diagnostic only.
pub fn mutual_information_estimate(task_entropy: f64, neg_conditional_entropy: f64) -> f64 {
    task_entropy + neg_conditional_entropy
}
