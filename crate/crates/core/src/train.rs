//! Joint training of the encoder (theta) and the noise generator (psi).
//!
//! Each step draws two augmentations per sample from the augmentation set.
//! Samples whose draw includes the learned-noise slot get one view formed as
//! `x + eps` with `eps` sampled from the generator through the
//! reparameterization trick, so the batch loss backpropagates into both
//! parameter sets at once; all other samples contribute a plain contrastive
//! term on their two augmented views. A norm penalty over the noise drawn in
//! the batch keeps the generator away from the zero-noise collapse.
//!
//! Everything is driven by decorrelated seeded streams (shuffling,
//! augmentation picks, noise draws, initialization), which makes training
//! runs bit-reproducible and lets a checkpoint resume exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::contrastive::{ContrastiveConfig, EncoderConfig, EncoderModel};
use crate::error::{CoreError, Result};
use crate::noise::{GeneratorConfig, NoiseGenerator, NoiseKind, NORM_PENALTY_GUARD};
use crate::rng::{streams, Rng};

// ── Augmentations ────────────────────────────────────────────────────

/// A view-producing transform of one input row.
#[derive(Debug, Clone, PartialEq)]
pub enum Augmentation {
    Identity,
    /// `x + sigma * N(0, I)`.
    GaussianJitter { sigma: f64 },
    /// Zero each coordinate independently with probability `p`.
    FeatureDropout { p: f64 },
    /// `x + offset`: a predefined augmentation, i.e. point-estimated noise.
    Shift { offset: Vec<f64> },
    /// The learned-noise slot; resolved by the generator, not here.
    Pinda,
}

/// Apply a non-learned augmentation to one row.
pub fn apply_augmentation(aug: &Augmentation, row: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    match aug {
        Augmentation::Identity => Ok(row.to_vec()),
        Augmentation::GaussianJitter { sigma } => {
            Ok(row.iter().map(|&x| x + sigma * rng.next_normal()).collect())
        }
        Augmentation::FeatureDropout { p } => Ok(row
            .iter()
            .map(|&x| if rng.next_f64() < *p { 0.0 } else { x })
            .collect()),
        Augmentation::Shift { offset } => {
            if offset.len() != row.len() {
                return Err(CoreError::Dimension(format!(
                    "shift offset of length {} applied to row of length {}",
                    offset.len(),
                    row.len()
                )));
            }
            Ok(row.iter().zip(offset).map(|(&x, &o)| x + o).collect())
        }
        Augmentation::Pinda => Err(CoreError::Contract(String::from(
            "the learned-noise augmentation is applied by the generator",
        ))),
    }
}

/// The random-noise baseline view: `x + N(0, I)` on rescaled features.
pub fn random_noise_view(row: &[f64], rng: &mut Rng) -> Vec<f64> {
    row.iter().map(|&x| x + rng.next_normal()).collect()
}

/// Representation-space noise: `h + scale * normalize(N(0, I))`. The added
/// vector has norm exactly `scale`.
pub fn repr_noise_view(h: &[f64], scale: f64, rng: &mut Rng) -> Vec<f64> {
    let draw = rng.normal_vec(h.len());
    let norm = libm::sqrt(draw.iter().map(|v| v * v).sum());
    if norm == 0.0 || scale == 0.0 {
        return h.to_vec();
    }
    h.iter().zip(&draw).map(|(&hi, &d)| hi + scale * d / norm).collect()
}

/// The augmentation pool of one training run.
///
/// Built through [`AugmentationSet::for_pinda`] the set contains the
/// learned-noise slot exactly once, with the identity inserted first when no
/// predefined augmentation was given.
#[derive(Debug, Clone)]
pub struct AugmentationSet {
    augs: Vec<Augmentation>,
}

impl AugmentationSet {
    /// Set for learned-noise training: `predefined + [Pinda]`, falling back
    /// to the identity when `predefined` is empty.
    pub fn for_pinda(predefined: Vec<Augmentation>) -> Result<Self> {
        if predefined.contains(&Augmentation::Pinda) {
            return Err(CoreError::Contract(String::from(
                "the learned-noise slot is added once by construction",
            )));
        }
        let mut augs = predefined;
        if augs.is_empty() {
            augs.push(Augmentation::Identity);
        }
        augs.push(Augmentation::Pinda);
        Ok(AugmentationSet { augs })
    }

    /// Set without a learned-noise slot, for baseline runs.
    pub fn plain(augmentations: Vec<Augmentation>) -> Result<Self> {
        if augmentations.contains(&Augmentation::Pinda) {
            return Err(CoreError::Contract(String::from(
                "plain sets cannot contain the learned-noise slot",
            )));
        }
        let mut augs = augmentations;
        if augs.is_empty() {
            augs.push(Augmentation::Identity);
        }
        Ok(AugmentationSet { augs })
    }

    pub fn len(&self) -> usize {
        self.augs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.augs.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Augmentation {
        &self.augs[idx]
    }

    pub fn contains_pinda(&self) -> bool {
        self.augs.contains(&Augmentation::Pinda)
    }

    pub fn pinda_count(&self) -> usize {
        self.augs.iter().filter(|a| **a == Augmentation::Pinda).count()
    }

    /// Uniform draw of one augmentation index.
    pub fn draw_index(&self, rng: &mut Rng) -> usize {
        rng.next_range(self.augs.len())
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn for_params(config: AdamConfig, params: &[&Tensor]) -> Self {
        OptimizerState {
            config,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; every tensor must carry a gradient of its
    /// own shape in `grad`.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(CoreError::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let cfg = &self.config;
        let bias1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bias2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        for (idx, param) in params.iter_mut().enumerate() {
            let grad = param.grad.as_ref().ok_or_else(|| {
                CoreError::Contract(format!("parameter {idx} has no gradient"))
            })?;
            if grad.len() != param.numel() || grad.len() != self.m[idx].len() {
                return Err(CoreError::Contract(format!(
                    "gradient length {} does not match parameter {idx} ({})",
                    grad.len(),
                    param.numel()
                )));
            }
            let grad = grad.clone();
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for ((p, &g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *p -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.epsilon);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(CoreError::Contract(String::from(
                "optimizer state has a different parameter count",
            )));
        }
        for (cur, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if cur.len() != new.len() {
                return Err(CoreError::Contract(String::from(
                    "optimizer state has a different parameter shape",
                )));
            }
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}

// ── Run configuration ────────────────────────────────────────────────

/// Which noise distribution a learned-noise run trains.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorSpec {
    GaussianZeroMean,
    GaussianLearnedMean,
    Uniform,
    /// Point mass at a fixed vector: the model of a predefined augmentation.
    Dirac(Vec<f64>),
}

impl GeneratorSpec {
    pub fn kind(&self) -> NoiseKind {
        match self {
            GeneratorSpec::GaussianZeroMean => NoiseKind::GaussianZeroMean,
            GeneratorSpec::GaussianLearnedMean => NoiseKind::GaussianLearnedMean,
            GeneratorSpec::Uniform => NoiseKind::Uniform,
            GeneratorSpec::Dirac(_) => NoiseKind::Dirac,
        }
    }
}

/// Training objective family.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// Learned noise as one augmentation among `predefined`.
    Pinda { generator: GeneratorSpec, predefined: Vec<Augmentation> },
    /// Contrastive training on predefined augmentations only.
    PlainInfonce { augmentations: Vec<Augmentation> },
    /// Noise of fixed norm added to the representation, before the head.
    SimclReprNoise { scale: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    /// Trunk width of the noise generator.
    pub generator_hidden_dim: usize,
    /// Elementwise floor for the Gaussian scale head.
    pub sigma_floor: f64,
    pub contrastive: ContrastiveConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the inverse-norm penalty.
    pub lambda_norm: f64,
    /// Monte Carlo draws per learned-noise view.
    pub mc_samples: usize,
    pub adam: AdamConfig,
    pub method: Method,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        if self.batch_size == 0 {
            return Err(CoreError::Contract(String::from("batch size must be positive")));
        }
        if self.mc_samples == 0 {
            return Err(CoreError::Contract(String::from("mc_samples must be at least 1")));
        }
        if self.lambda_norm < 0.0 {
            return Err(CoreError::Contract(String::from("lambda_norm must be nonnegative")));
        }
        if let Method::Pinda { generator: GeneratorSpec::Dirac(eps0), .. } = &self.method {
            if eps0.len() != self.encoder.input_dim {
                return Err(CoreError::Dimension(format!(
                    "point-mass vector length {} does not match input width {}",
                    eps0.len(),
                    self.encoder.input_dim
                )));
            }
        }
        Ok(())
    }
}

// ── Batch loss graph ─────────────────────────────────────────────────

/// Loss-related nodes of one recorded step.
pub struct BatchLossNodes {
    /// Contrastive mean plus the weighted penalty.
    pub total: NodeId,
    /// The contrastive part alone.
    pub contrastive: NodeId,
    pub penalty: Option<NodeId>,
    pub encoder_params: Vec<NodeId>,
    pub generator_params: Vec<NodeId>,
    /// Learned-noise rows drawn in this batch (all slots and MC draws).
    pub pinda_draws: usize,
}

/// Knobs of one recorded batch loss.
#[derive(Debug, Clone)]
pub struct BatchLossSettings {
    pub contrastive: ContrastiveConfig,
    /// Weight of the inverse-norm penalty.
    pub lambda_norm: f64,
    /// Monte Carlo draws per learned-noise view.
    pub mc_samples: usize,
}

/// Record one mixed-augmentation batch loss.
///
/// `draws[i]` indexes the two augmentations of sample `i` in `set`. Rows
/// whose draw is the learned-noise slot get `x + eps` with `eps` emitted by
/// the generator (gradients flow to psi); all other rows are augmented on the
/// host and enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn build_batch_loss(
    g: &mut Graph,
    encoder: &EncoderModel,
    generator: Option<&NoiseGenerator>,
    set: &AugmentationSet,
    draws: &[(usize, usize)],
    batch: &Tensor,
    settings: &BatchLossSettings,
    noise_rng: &mut Rng,
) -> Result<BatchLossNodes> {
    let contrastive_cfg = &settings.contrastive;
    let lambda_norm = settings.lambda_norm;
    let mc_samples = settings.mc_samples;
    let m = batch.rows();
    let d = batch.cols();
    if m == 0 {
        return Err(CoreError::Contract(String::from("empty batch")));
    }
    if draws.len() != m {
        return Err(CoreError::Contract(format!(
            "need one augmentation pair per sample: {} draws for {m} rows",
            draws.len()
        )));
    }
    if mc_samples == 0 {
        return Err(CoreError::Contract(String::from("mc_samples must be at least 1")));
    }
    if set.contains_pinda() && generator.is_none() {
        return Err(CoreError::Contract(String::from(
            "the augmentation set has a learned-noise slot but no generator was given",
        )));
    }

    let enc_nodes = encoder.register(g);
    let encoder_params = enc_nodes.param_ids();
    let (gen_nodes, generator_params) = match generator {
        Some(gen) => {
            let nodes = gen.register(g);
            let ids = nodes.param_ids();
            (Some(nodes), ids)
        }
        None => (None, Vec::new()),
    };

    // Host-side view assembly per slot: constant rows plus a pinda mask.
    struct SlotPlan {
        const_rows: Vec<f64>,
        mask: Vec<f64>,
        pinda_rows: usize,
    }
    let mut plans = Vec::with_capacity(2);
    for slot in 0..2 {
        let mut const_rows = batch.data().to_vec();
        let mut mask = vec![0.0; m];
        let mut pinda_rows = 0;
        for i in 0..m {
            let aug_idx = if slot == 0 { draws[i].0 } else { draws[i].1 };
            if aug_idx >= set.len() {
                return Err(CoreError::Contract(format!(
                    "augmentation index {aug_idx} out of range"
                )));
            }
            match set.get(aug_idx) {
                Augmentation::Pinda => {
                    mask[i] = 1.0;
                    pinda_rows += 1;
                }
                aug => {
                    let row = &batch.data()[i * d..(i + 1) * d];
                    let view = apply_augmentation(aug, row, noise_rng)?;
                    const_rows[i * d..(i + 1) * d].copy_from_slice(&view);
                }
            }
        }
        plans.push(SlotPlan { const_rows, mask, pinda_rows });
    }

    let any_pinda = plans.iter().any(|p| p.pinda_rows > 0);
    let effective_s = if any_pinda { mc_samples } else { 1 };

    let x_const = g.constant(batch.clone());
    let slot_consts: Vec<NodeId> = plans
        .iter()
        .map(|p| g.constant(Tensor::new(vec![m, d], p.const_rows.clone()).expect("slot shape")))
        .collect();
    let slot_masks: Vec<Option<NodeId>> = plans
        .iter()
        .map(|p| {
            if p.pinda_rows > 0 {
                Some(g.constant(Tensor::vector(p.mask.clone())))
            } else {
                None
            }
        })
        .collect();

    // Clean-slot embeddings can be shared across MC draws.
    let mut clean_embeddings: Vec<Option<NodeId>> = vec![None, None];
    let mut per_draw_losses = Vec::with_capacity(effective_s);
    let mut noise_norm_sums: Vec<NodeId> = Vec::new();
    let mut total_pinda_rows = 0usize;

    for _s in 0..effective_s {
        let mut slot_z = Vec::with_capacity(2);
        for slot in 0..2 {
            if plans[slot].pinda_rows > 0 {
                let gen = generator.expect("generator checked above");
                let base = g.constant(gen.base_draw(m, noise_rng));
                let eps = gen.build_noise(g, gen_nodes.as_ref().unwrap(), x_const, base)?;
                let masked = g.mul_colvec(eps, slot_masks[slot].unwrap())?;
                let view = g.add(slot_consts[slot], masked)?;
                let (_, z) = EncoderModel::forward_nodes(g, &enc_nodes, view)?;
                slot_z.push(z);

                let norms = g.l2_norm(masked, Some(1))?;
                noise_norm_sums.push(g.sum(norms, None)?);
                total_pinda_rows += plans[slot].pinda_rows;
            } else {
                let z = match clean_embeddings[slot] {
                    Some(z) => z,
                    None => {
                        let (_, z) =
                            EncoderModel::forward_nodes(g, &enc_nodes, slot_consts[slot])?;
                        clean_embeddings[slot] = Some(z);
                        z
                    }
                };
                slot_z.push(z);
            }
        }
        let nodes = crate::contrastive::build_infonce_loss(
            g,
            slot_z[0],
            slot_z[1],
            None,
            contrastive_cfg,
        )?;
        per_draw_losses.push(nodes.loss);
    }

    let mut contrastive = per_draw_losses[0];
    for &l in &per_draw_losses[1..] {
        contrastive = g.add(contrastive, l)?;
    }
    if per_draw_losses.len() > 1 {
        contrastive = g.scale(contrastive, 1.0 / per_draw_losses.len() as f64)?;
    }

    let (total, penalty) = if total_pinda_rows > 0 && lambda_norm != 0.0 {
        let mut norm_total = noise_norm_sums[0];
        for &nsum in &noise_norm_sums[1..] {
            norm_total = g.add(norm_total, nsum)?;
        }
        let mean_norm = g.scale(norm_total, 1.0 / total_pinda_rows as f64)?;
        let denom = g.shift(mean_norm, NORM_PENALTY_GUARD)?;
        let one = g.constant(Tensor::scalar(1.0));
        let penalty = g.div(one, denom)?;
        let weighted = g.scale(penalty, lambda_norm)?;
        (g.add(contrastive, weighted)?, Some(penalty))
    } else {
        (contrastive, None)
    };

    Ok(BatchLossNodes {
        total,
        contrastive,
        penalty,
        encoder_params,
        generator_params,
        pinda_draws: total_pinda_rows,
    })
}

/// Record a representation-noise step: both views are `h + scale * n_hat`
/// applied to the backbone output before the projection head.
fn build_simcl_loss(
    g: &mut Graph,
    encoder: &EncoderModel,
    batch: &Tensor,
    scale: f64,
    contrastive_cfg: &ContrastiveConfig,
    noise_rng: &mut Rng,
) -> Result<BatchLossNodes> {
    let m = batch.rows();
    if m == 0 {
        return Err(CoreError::Contract(String::from("empty batch")));
    }
    let enc_nodes = encoder.register(g);
    let encoder_params = enc_nodes.param_ids();
    let x = g.constant(batch.clone());
    let repr = encoder.backbone_nodes(g, &enc_nodes, x)?;
    let r = g.value(repr).cols();

    let draw_matrix = |rng: &mut Rng| -> Tensor {
        let mut data = Vec::with_capacity(m * r);
        for _ in 0..m {
            let draw = rng.normal_vec(r);
            let norm = libm::sqrt(draw.iter().map(|v| v * v).sum());
            if norm == 0.0 {
                data.extend(core::iter::repeat_n(0.0, r));
            } else {
                data.extend(draw.iter().map(|&d| scale * d / norm));
            }
        }
        Tensor::new(vec![m, r], data).expect("noise shape")
    };

    let mut views = Vec::with_capacity(2);
    for _ in 0..2 {
        let noise = g.constant(draw_matrix(noise_rng));
        let noisy = g.add(repr, noise)?;
        views.push(encoder.projection_nodes(g, &enc_nodes, noisy)?);
    }
    let nodes =
        crate::contrastive::build_infonce_loss(g, views[0], views[1], None, contrastive_cfg)?;
    Ok(BatchLossNodes {
        total: nodes.loss,
        contrastive: nodes.loss,
        penalty: None,
        encoder_params,
        generator_params: Vec::new(),
        pinda_draws: 0,
    })
}

// ── Standalone per-sample loss (Algorithm 1 shape) ───────────────────

/// Per-sample loss with the learned-noise view on one side of the positive
/// pair: draws the base noise, forms `eps`, embeds `x_i + eps` against the
/// partner view, and scores it against the in-batch negatives.
///
/// This is the value surface; the differentiable path through theta and psi
/// is [`build_batch_loss`].
pub fn pinda_sample_loss(
    batch_inputs: &Tensor,
    i: usize,
    partner_views: &Tensor,
    encoder: &EncoderModel,
    generator: &NoiseGenerator,
    cfg: &ContrastiveConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let m = batch_inputs.rows();
    let d = batch_inputs.cols();
    if i >= m {
        return Err(CoreError::Contract(format!(
            "sample index {i} out of range for batch of {m}"
        )));
    }
    if partner_views.shape() != batch_inputs.shape() {
        return Err(CoreError::Dimension(format!(
            "partner views {:?} must match inputs {:?}",
            partner_views.shape(),
            batch_inputs.shape()
        )));
    }
    let row = Tensor::matrix(1, d, batch_inputs.data()[i * d..(i + 1) * d].to_vec())?;
    let sample = generator.sample(&row, rng)?;

    let mut anchors = batch_inputs.clone();
    for (dst, &eps) in anchors.data_mut()[i * d..(i + 1) * d]
        .iter_mut()
        .zip(sample.epsilon.data())
    {
        *dst += eps;
    }
    let (_, anchors_z) = encoder.embed(&anchors)?;
    let (_, partner_z) = encoder.embed(partner_views)?;
    let batch = crate::contrastive::EmbeddingBatch::new(anchors_z, partner_z, None)?;
    crate::contrastive::per_sample_loss(&batch, i, cfg)
}

// ── Trainer ──────────────────────────────────────────────────────────

/// Portable snapshot of a training run: parameters, optimizer moments, and
/// the exact random-stream states. Restoring it resumes training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub params: Vec<(String, Vec<f64>)>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub rng_shuffle: [u64; 4],
    pub rng_augpick: [u64; 4],
    pub rng_noise: [u64; 4],
}

pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: EncoderModel,
    pub generator: Option<NoiseGenerator>,
    pub optimizer: OptimizerState,
    augmentations: Option<AugmentationSet>,
    shuffle_rng: Rng,
    augpick_rng: Rng,
    noise_rng: Rng,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut enc_rng = Rng::stream(seed, streams::ENCODER_INIT);
        let encoder = EncoderModel::init(config.encoder.clone(), &mut enc_rng);

        let (generator, augmentations) = match &config.method {
            Method::Pinda { generator, predefined } => {
                let gen = match generator {
                    GeneratorSpec::Dirac(eps0) => NoiseGenerator::dirac(
                        config.encoder.input_dim,
                        Tensor::vector(eps0.clone()),
                    )?,
                    spec => {
                        let gen_cfg = GeneratorConfig {
                            input_dim: config.encoder.input_dim,
                            hidden_dim: config.generator_hidden_dim,
                            kind: spec.kind(),
                            sigma_floor: config.sigma_floor,
                        };
                        NoiseGenerator::init(
                            gen_cfg,
                            &mut Rng::stream(seed, streams::GENERATOR_INIT),
                        )?
                    }
                };
                let set = AugmentationSet::for_pinda(predefined.clone())?;
                (Some(gen), Some(set))
            }
            Method::PlainInfonce { augmentations } => {
                (None, Some(AugmentationSet::plain(augmentations.clone())?))
            }
            Method::SimclReprNoise { .. } => (None, None),
        };

        let mut all_params: Vec<&Tensor> = encoder.parameters();
        if let Some(gen) = &generator {
            all_params.extend(gen.parameters());
        }
        let optimizer = OptimizerState::for_params(config.adam.clone(), &all_params);

        Ok(Trainer {
            config,
            encoder,
            generator,
            optimizer,
            augmentations,
            shuffle_rng: Rng::stream(seed, streams::SHUFFLE),
            augpick_rng: Rng::stream(seed, streams::AUG_PICK),
            noise_rng: Rng::stream(seed, streams::NOISE),
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = self.encoder.parameter_names();
        if let Some(gen) = &self.generator {
            names.extend(gen.parameter_names());
        }
        names
    }

    /// One optimization step on a prepared batch; returns the loss value.
    pub fn step(&mut self, batch: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let nodes = match &self.config.method {
            Method::Pinda { .. } | Method::PlainInfonce { .. } => {
                let set = self.augmentations.as_ref().expect("set exists");
                let draws: Vec<(usize, usize)> = (0..batch.rows())
                    .map(|_| {
                        (set.draw_index(&mut self.augpick_rng), set.draw_index(&mut self.augpick_rng))
                    })
                    .collect();
                let settings = BatchLossSettings {
                    contrastive: self.config.contrastive.clone(),
                    lambda_norm: self.config.lambda_norm,
                    mc_samples: self.config.mc_samples,
                };
                build_batch_loss(
                    &mut g,
                    &self.encoder,
                    self.generator.as_ref(),
                    set,
                    &draws,
                    batch,
                    &settings,
                    &mut self.noise_rng,
                )?
            }
            Method::SimclReprNoise { scale } => build_simcl_loss(
                &mut g,
                &self.encoder,
                batch,
                *scale,
                &self.config.contrastive,
                &mut self.noise_rng,
            )?,
        };

        let loss_value = g.scalar_value(nodes.total);
        if !loss_value.is_finite() {
            let op = g.first_nonfinite().map_or("loss", |(op, _)| op);
            return Err(CoreError::NonFinite {
                op,
                detail: format!(
                    "step {} produced a non-finite loss ({loss_value})",
                    self.optimizer.step_count() + 1
                ),
            });
        }

        g.backward(nodes.total)?;
        for (&id, param) in nodes
            .encoder_params
            .iter()
            .zip(self.encoder.parameters_mut())
        {
            g.write_grad_into(id, param);
        }
        if let Some(gen) = &mut self.generator {
            for (&id, param) in nodes.generator_params.iter().zip(gen.parameters_mut()) {
                g.write_grad_into(id, param);
            }
        }

        let mut params: Vec<&mut Tensor> = self.encoder.parameters_mut();
        if let Some(gen) = &mut self.generator {
            params.extend(gen.parameters_mut());
        }
        self.optimizer.step(&mut params)?;
        Ok(loss_value)
    }

    /// One pass over the data in shuffled batches; returns the mean loss.
    pub fn run_epoch(&mut self, data: &Tensor) -> Result<f64> {
        let n = data.rows();
        let d = data.cols();
        if n == 0 {
            return Err(CoreError::Contract(String::from("empty dataset")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        self.shuffle_rng.shuffle(&mut order);

        // Full batches only; a dataset smaller than one batch trains as a
        // single short batch instead of being dropped entirely.
        let batch_size = self.config.batch_size.min(n);
        let full_batches = n / batch_size;

        let mut total = 0.0;
        for b in 0..full_batches {
            let rows = &order[b * batch_size..(b + 1) * batch_size];
            let mut data_rows = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                data_rows.extend_from_slice(&data.data()[r * d..(r + 1) * d]);
            }
            let batch = Tensor::new(vec![rows.len(), d], data_rows)?;
            total += self.step(&batch)?;
        }
        let mean = total / full_batches as f64;
        self.epoch += 1;
        self.loss_history.push(mean);
        Ok(mean)
    }

    /// Run the remaining epochs, reporting each mean loss to `on_epoch`.
    pub fn train_with<F>(&mut self, data: &Tensor, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(usize, f64),
    {
        while self.epoch < self.config.epochs {
            let mean = self.run_epoch(data)?;
            on_epoch(self.epoch, mean);
        }
        Ok(())
    }

    pub fn train(&mut self, data: &Tensor) -> Result<()> {
        self.train_with(data, |_, _| {})
    }

    /// Snapshot everything needed to resume bit-exactly.
    pub fn export_state(&self) -> TrainState {
        let names = self.parameter_names();
        let mut tensors: Vec<&Tensor> = self.encoder.parameters();
        if let Some(gen) = &self.generator {
            tensors.extend(gen.parameters());
        }
        let params = names
            .into_iter()
            .zip(tensors)
            .map(|(n, t)| (n, t.data().to_vec()))
            .collect();
        let (m, v) = self.optimizer.moments();
        TrainState {
            step: self.optimizer.step_count(),
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            params,
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            rng_shuffle: self.shuffle_rng.state(),
            rng_augpick: self.augpick_rng.state(),
            rng_noise: self.noise_rng.state(),
        }
    }

    /// Restore a snapshot produced by [`Trainer::export_state`] on a trainer
    /// built from the same configuration.
    pub fn restore_state(&mut self, state: &TrainState) -> Result<()> {
        let names = self.parameter_names();
        if names.len() != state.params.len() {
            return Err(CoreError::Contract(format!(
                "checkpoint has {} parameters, this run has {}",
                state.params.len(),
                names.len()
            )));
        }
        {
            let mut tensors: Vec<&mut Tensor> = self.encoder.parameters_mut();
            if let Some(gen) = &mut self.generator {
                tensors.extend(gen.parameters_mut());
            }
            for ((name, values), (expect_name, tensor)) in
                state.params.iter().zip(names.iter().zip(tensors))
            {
                if name != expect_name {
                    return Err(CoreError::Contract(format!(
                        "checkpoint parameter `{name}` does not match expected `{expect_name}`"
                    )));
                }
                if values.len() != tensor.numel() {
                    return Err(CoreError::Contract(format!(
                        "checkpoint parameter `{name}` has {} values, expected {}",
                        values.len(),
                        tensor.numel()
                    )));
                }
                tensor.data_mut().copy_from_slice(values);
                tensor.grad = None;
            }
        }
        self.optimizer
            .restore(state.adam_m.clone(), state.adam_v.clone(), state.step)?;
        self.shuffle_rng = Rng::from_state(state.rng_shuffle);
        self.augpick_rng = Rng::from_state(state.rng_augpick);
        self.noise_rng = Rng::from_state(state.rng_noise);
        self.epoch = state.epoch;
        self.loss_history = state.loss_history.clone();
        Ok(())
    }
}

/// Build a trainer and run it to completion.
pub fn train(config: TrainConfig, data: &Tensor) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    trainer.train(data)?;
    Ok(trainer)
}
