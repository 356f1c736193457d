//! Learnable per-sample noise distributions and their generator network.
//!
//! A generator maps each input `x` to the parameters of a noise distribution:
//! a diagonal Gaussian (optionally with a learned mean), an elementwise
//! symmetric uniform, or a point mass (a fixed vector, standing in for a
//! predefined augmentation). Sampling goes through the reparameterization
//! trick, so the sampled noise is a differentiable function of the generator
//! parameters and an auxiliary base draw:
//!
//! - Gaussian: `eps = mu + base (.) sigma`, `base ~ N(0, I)`
//! - Uniform: `eps = (2 * base - 1) (.) u`, `base ~ U(0, 1)`
//! - Point mass: `eps = eps0`, ignoring the base draw
//!
//! Positivity of `sigma` and `u` is enforced with softplus; `sigma`
//! additionally gets a small floor so the Gaussian never collapses to zero
//! variance.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::contrastive::{Linear, LinearNodes};
use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Guard added to the mean noise norm in the penalty denominator.
pub const NORM_PENALTY_GUARD: f64 = 1e-8;

/// Default elementwise floor for the Gaussian scale.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

/// Which distribution family the generator emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Diagonal Gaussian with mean fixed at zero; only a sigma head exists.
    GaussianZeroMean,
    /// Diagonal Gaussian with a learned mean head.
    GaussianLearnedMean,
    /// Elementwise `U(-u, u)` with learned half-width `u`.
    Uniform,
    /// Point mass at a fixed vector; no learnable parameters.
    Dirac,
}

/// Widths and constraints of the generator network.
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub input_dim: usize,
    /// Width of both trunk hidden layers.
    pub hidden_dim: usize,
    pub kind: NoiseKind,
    /// Elementwise lower bound on sigma (Gaussian kinds).
    pub sigma_floor: f64,
}

impl GeneratorConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, kind: NoiseKind) -> Self {
        GeneratorConfig { input_dim, hidden_dim, kind, sigma_floor: DEFAULT_SIGMA_FLOOR }
    }

    /// Full-scale generator: hidden layers of 1024.
    pub fn standard(input_dim: usize, kind: NoiseKind) -> Self {
        GeneratorConfig::new(input_dim, 1024, kind)
    }
}

/// Distribution parameters for a batch, one row per sample.
#[derive(Debug, Clone)]
pub struct NoiseParams {
    pub sigma: Option<Tensor>,
    pub mu: Option<Tensor>,
    pub u: Option<Tensor>,
}

/// Tape nodes of the distribution parameters for a batch.
#[derive(Debug, Clone, Copy)]
pub struct NoiseParamNodes {
    pub sigma: Option<NodeId>,
    pub mu: Option<NodeId>,
    pub u: Option<NodeId>,
}

/// One sampled noise batch together with the base draw that produced it.
#[derive(Debug, Clone)]
pub struct NoiseSample {
    /// Same shape as the inputs it augments.
    pub epsilon: Tensor,
    /// The auxiliary standard draw; zeros for the point-mass kind.
    pub base_draw: Tensor,
}

/// The noise generator network, parameters psi.
///
/// Trunk: input -> hidden -> hidden with ReLU, then one linear head per
/// distribution parameter, all sharing the trunk. The point-mass kind holds
/// only its fixed vector and has no parameters at all.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    pub config: GeneratorConfig,
    trunk1: Option<Linear>,
    trunk2: Option<Linear>,
    sigma_head: Option<Linear>,
    mu_head: Option<Linear>,
    u_head: Option<Linear>,
    epsilon0: Option<Tensor>,
}

pub struct GeneratorNodes {
    trunk1: Option<LinearNodes>,
    trunk2: Option<LinearNodes>,
    sigma_head: Option<LinearNodes>,
    mu_head: Option<LinearNodes>,
    u_head: Option<LinearNodes>,
}

impl GeneratorNodes {
    /// Node ids in the same canonical order as `NoiseGenerator::parameters`.
    pub fn param_ids(&self) -> Vec<NodeId> {
        [&self.trunk1, &self.trunk2, &self.sigma_head, &self.mu_head, &self.u_head]
            .into_iter()
            .flatten()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

impl NoiseGenerator {
    pub fn init(config: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        if config.kind == NoiseKind::Dirac {
            return Err(CoreError::Contract(String::from(
                "point-mass generators are built with NoiseGenerator::dirac",
            )));
        }
        let trunk1 = Linear::init(config.input_dim, config.hidden_dim, rng);
        let trunk2 = Linear::init(config.hidden_dim, config.hidden_dim, rng);
        let head = |rng: &mut Rng| Linear::init(config.hidden_dim, config.input_dim, rng);
        let (sigma_head, mu_head, u_head) = match config.kind {
            NoiseKind::GaussianZeroMean => (Some(head(rng)), None, None),
            NoiseKind::GaussianLearnedMean => {
                let sigma = head(rng);
                let mu = head(rng);
                (Some(sigma), Some(mu), None)
            }
            NoiseKind::Uniform => (None, None, Some(head(rng))),
            NoiseKind::Dirac => unreachable!(),
        };
        Ok(NoiseGenerator {
            config,
            trunk1: Some(trunk1),
            trunk2: Some(trunk2),
            sigma_head,
            mu_head,
            u_head,
            epsilon0: None,
        })
    }

    /// Point-mass noise at `epsilon0` (length `input_dim`); no parameters.
    pub fn dirac(input_dim: usize, epsilon0: Tensor) -> Result<Self> {
        if epsilon0.numel() != input_dim || epsilon0.shape().len() != 1 {
            return Err(CoreError::Dimension(format!(
                "point-mass vector must have shape [{input_dim}], got {:?}",
                epsilon0.shape()
            )));
        }
        Ok(NoiseGenerator {
            config: GeneratorConfig {
                input_dim,
                hidden_dim: 0,
                kind: NoiseKind::Dirac,
                sigma_floor: 0.0,
            },
            trunk1: None,
            trunk2: None,
            sigma_head: None,
            mu_head: None,
            u_head: None,
            epsilon0: Some(epsilon0),
        })
    }

    pub fn kind(&self) -> NoiseKind {
        self.config.kind
    }

    pub fn epsilon0(&self) -> Option<&Tensor> {
        self.epsilon0.as_ref()
    }

    /// Parameters in canonical order (matches `register` and checkpoints).
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in [&self.trunk1, &self.trunk2, &self.sigma_head, &self.mu_head, &self.u_head]
            .into_iter()
            .flatten()
        {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in [
            &mut self.trunk1,
            &mut self.trunk2,
            &mut self.sigma_head,
            &mut self.mu_head,
            &mut self.u_head,
        ]
        .into_iter()
        .flatten()
        {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (layer, name) in [
            (&self.trunk1, "trunk1"),
            (&self.trunk2, "trunk2"),
            (&self.sigma_head, "sigma_head"),
            (&self.mu_head, "mu_head"),
            (&self.u_head, "u_head"),
        ] {
            if layer.is_some() {
                out.push(format!("generator.{name}.weight"));
                out.push(format!("generator.{name}.bias"));
            }
        }
        out
    }

    /// Direct access to the heads, for tests that pin their weights.
    pub fn sigma_head_mut(&mut self) -> Option<&mut Linear> {
        self.sigma_head.as_mut()
    }

    pub fn u_head_mut(&mut self) -> Option<&mut Linear> {
        self.u_head.as_mut()
    }

    pub fn mu_head_mut(&mut self) -> Option<&mut Linear> {
        self.mu_head.as_mut()
    }

    pub fn register(&self, g: &mut Graph) -> GeneratorNodes {
        GeneratorNodes {
            trunk1: self.trunk1.as_ref().map(|l| l.register(g)),
            trunk2: self.trunk2.as_ref().map(|l| l.register(g)),
            sigma_head: self.sigma_head.as_ref().map(|l| l.register(g)),
            mu_head: self.mu_head.as_ref().map(|l| l.register(g)),
            u_head: self.u_head.as_ref().map(|l| l.register(g)),
        }
    }

    pub fn register_const(&self, g: &mut Graph) -> GeneratorNodes {
        GeneratorNodes {
            trunk1: self.trunk1.as_ref().map(|l| l.register_const(g)),
            trunk2: self.trunk2.as_ref().map(|l| l.register_const(g)),
            sigma_head: self.sigma_head.as_ref().map(|l| l.register_const(g)),
            mu_head: self.mu_head.as_ref().map(|l| l.register_const(g)),
            u_head: self.u_head.as_ref().map(|l| l.register_const(g)),
        }
    }

    /// Record the generator forward pass; `x` is `[n, input_dim]`.
    pub fn build_params(
        &self,
        g: &mut Graph,
        nodes: &GeneratorNodes,
        x: NodeId,
    ) -> Result<NoiseParamNodes> {
        if g.value(x).cols() != self.config.input_dim {
            return Err(CoreError::Contract(format!(
                "generator expects inputs of width {}, got {:?}",
                self.config.input_dim,
                g.value(x).shape()
            )));
        }
        if self.config.kind == NoiseKind::Dirac {
            return Ok(NoiseParamNodes { sigma: None, mu: None, u: None });
        }
        let t1 = nodes.trunk1.as_ref().expect("trunk").apply(g, x)?;
        let t1 = g.relu(t1)?;
        let t2 = nodes.trunk2.as_ref().expect("trunk").apply(g, t1)?;
        let t2 = g.relu(t2)?;

        let sigma = match &nodes.sigma_head {
            Some(head) => {
                let raw = head.apply(g, t2)?;
                let sp = g.softplus(raw)?;
                Some(g.shift(sp, self.config.sigma_floor)?)
            }
            None => None,
        };
        let mu = match &nodes.mu_head {
            Some(head) => Some(head.apply(g, t2)?),
            None => None,
        };
        let u = match &nodes.u_head {
            Some(head) => {
                let raw = head.apply(g, t2)?;
                Some(g.softplus(raw)?)
            }
            None => None,
        };
        Ok(NoiseParamNodes { sigma, mu, u })
    }

    /// Record reparameterized sampling; `base` must be a constant draw of the
    /// batch shape. Gradients flow from the noise to the generator heads.
    pub fn build_noise_from_params(
        &self,
        g: &mut Graph,
        params: &NoiseParamNodes,
        base: NodeId,
    ) -> Result<NodeId> {
        match self.config.kind {
            NoiseKind::GaussianZeroMean => {
                let sigma = params.sigma.ok_or_else(|| {
                    CoreError::Contract(String::from("missing sigma for Gaussian kind"))
                })?;
                g.mul(base, sigma)
            }
            NoiseKind::GaussianLearnedMean => {
                let sigma = params.sigma.ok_or_else(|| {
                    CoreError::Contract(String::from("missing sigma for Gaussian kind"))
                })?;
                let mu = params.mu.ok_or_else(|| {
                    CoreError::Contract(String::from("missing mu for learned-mean kind"))
                })?;
                let scaled = g.mul(base, sigma)?;
                g.add(mu, scaled)
            }
            NoiseKind::Uniform => {
                let u = params.u.ok_or_else(|| {
                    CoreError::Contract(String::from("missing u for uniform kind"))
                })?;
                let centered = g.scale(base, 2.0)?;
                let centered = g.shift(centered, -1.0)?;
                g.mul(centered, u)
            }
            NoiseKind::Dirac => {
                let rows = g.value(base).rows();
                Ok(g.constant(self.replicate_epsilon0(rows)?))
            }
        }
    }

    /// Forward + sample in one step.
    pub fn build_noise(
        &self,
        g: &mut Graph,
        nodes: &GeneratorNodes,
        x: NodeId,
        base: NodeId,
    ) -> Result<NodeId> {
        let params = self.build_params(g, nodes, x)?;
        self.build_noise_from_params(g, &params, base)
    }

    fn replicate_epsilon0(&self, rows: usize) -> Result<Tensor> {
        let eps0 = self.epsilon0.as_ref().ok_or_else(|| {
            CoreError::Contract(String::from("point-mass generator lacks its vector"))
        })?;
        let d = eps0.numel();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(eps0.data());
        }
        Tensor::new(vec![rows, d], data)
    }

    /// Value-path forward pass: distribution parameters for a batch.
    pub fn forward_values(&self, x: &Tensor) -> Result<NoiseParams> {
        if self.config.kind == NoiseKind::Dirac {
            return Ok(NoiseParams { sigma: None, mu: None, u: None });
        }
        let mut g = Graph::new();
        let nodes = self.register_const(&mut g);
        let xid = g.constant(x.clone());
        let params = self.build_params(&mut g, &nodes, xid)?;
        Ok(NoiseParams {
            sigma: params.sigma.map(|id| g.value(id).clone()),
            mu: params.mu.map(|id| g.value(id).clone()),
            u: params.u.map(|id| g.value(id).clone()),
        })
    }

    /// Draw the auxiliary base sample appropriate for this kind.
    pub fn base_draw(&self, rows: usize, rng: &mut Rng) -> Tensor {
        let n = rows * self.config.input_dim;
        let data = match self.config.kind {
            NoiseKind::GaussianZeroMean | NoiseKind::GaussianLearnedMean => rng.normal_vec(n),
            NoiseKind::Uniform => rng.uniform_vec(n),
            // The point mass ignores its base draw entirely.
            NoiseKind::Dirac => vec![0.0; n],
        };
        Tensor::new(vec![rows, self.config.input_dim], data).expect("draw shape")
    }

    /// Sample noise for a batch with an explicit seed; the same
    /// (generator, x, seed) triple always yields bit-identical output.
    pub fn sample_with_seed(&self, x: &Tensor, seed: u64) -> Result<NoiseSample> {
        let mut rng = Rng::stream(seed, crate::rng::streams::NOISE);
        self.sample(x, &mut rng)
    }

    /// Sample noise for a batch from an existing stream.
    pub fn sample(&self, x: &Tensor, rng: &mut Rng) -> Result<NoiseSample> {
        let base = self.base_draw(x.rows(), rng);
        let params = self.forward_values(x)?;
        let epsilon = combine_noise(self.config.kind, &params, &base, self.epsilon0.as_ref())?;
        Ok(NoiseSample { epsilon, base_draw: base })
    }
}

/// Apply the reparameterization formulas to already-computed parameters.
pub fn combine_noise(
    kind: NoiseKind,
    params: &NoiseParams,
    base: &Tensor,
    epsilon0: Option<&Tensor>,
) -> Result<Tensor> {
    let missing = |what: &str| CoreError::Contract(format!("missing {what} for {kind:?}"));
    match kind {
        NoiseKind::GaussianZeroMean | NoiseKind::GaussianLearnedMean => {
            let sigma = params.sigma.as_ref().ok_or_else(|| missing("sigma"))?;
            if sigma.shape() != base.shape() {
                return Err(CoreError::Dimension(format!(
                    "sigma {:?} and base draw {:?} disagree",
                    sigma.shape(),
                    base.shape()
                )));
            }
            let mut data: Vec<f64> = base
                .data()
                .iter()
                .zip(sigma.data())
                .map(|(&e, &s)| e * s)
                .collect();
            if kind == NoiseKind::GaussianLearnedMean {
                let mu = params.mu.as_ref().ok_or_else(|| missing("mu"))?;
                for (d, &m) in data.iter_mut().zip(mu.data()) {
                    *d += m;
                }
            } else if params.mu.is_some() {
                return Err(CoreError::Contract(String::from(
                    "zero-mean kind must not carry mu parameters",
                )));
            }
            Tensor::new(base.shape().to_vec(), data)
        }
        NoiseKind::Uniform => {
            let u = params.u.as_ref().ok_or_else(|| missing("u"))?;
            let data: Vec<f64> = base
                .data()
                .iter()
                .zip(u.data())
                .map(|(&e, &w)| (2.0 * e - 1.0) * w)
                .collect();
            Tensor::new(base.shape().to_vec(), data)
        }
        NoiseKind::Dirac => {
            let eps0 = epsilon0.ok_or_else(|| missing("epsilon0"))?;
            let rows = base.rows();
            let d = eps0.numel();
            let mut data = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                data.extend_from_slice(eps0.data());
            }
            Tensor::new(vec![rows, d], data)
        }
    }
}

// ── Norm penalty ─────────────────────────────────────────────────────

/// `1 / (mean ||eps||_2 + guard)`: discourages the noise from collapsing
/// to zero while staying finite when it does.
pub fn norm_penalty(noise_batch: &[NoiseSample]) -> Result<f64> {
    if noise_batch.is_empty() {
        return Err(CoreError::Contract(String::from(
            "norm penalty of an empty noise batch",
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in noise_batch {
        let d = sample.epsilon.cols();
        for row in 0..sample.epsilon.rows() {
            let slice = &sample.epsilon.data()[row * d..(row + 1) * d];
            total += libm::sqrt(slice.iter().map(|v| v * v).sum());
            count += 1;
        }
    }
    Ok(1.0 / (total / count as f64 + NORM_PENALTY_GUARD))
}

/// Record the norm penalty for a `[p, d]` matrix of drawn noise rows.
pub fn build_norm_penalty(g: &mut Graph, noise_rows: NodeId) -> Result<NodeId> {
    if g.value(noise_rows).rows() == 0 {
        return Err(CoreError::Contract(String::from(
            "norm penalty of an empty noise batch",
        )));
    }
    let norms = g.l2_norm(noise_rows, Some(1))?;
    let mean = g.mean(norms, None)?;
    let denom = g.shift(mean, NORM_PENALTY_GUARD)?;
    let one = g.constant(Tensor::scalar(1.0));
    g.div(one, denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_grad;

    fn tiny_generator(kind: NoiseKind, seed: u64) -> NoiseGenerator {
        let cfg = GeneratorConfig::new(3, 8, kind);
        NoiseGenerator::init(cfg, &mut Rng::stream(seed, crate::rng::streams::GENERATOR_INIT))
            .unwrap()
    }

    #[test]
    fn zeroed_sigma_head_gives_softplus_zero_plus_floor() {
        let mut gen = tiny_generator(NoiseKind::GaussianZeroMean, 1);
        let head = gen.sigma_head_mut().unwrap();
        for v in head.weight.data_mut() {
            *v = 0.0;
        }
        let x = Tensor::matrix(2, 3, vec![0.4, -1.0, 2.0, 0.0, 0.1, -0.2]).unwrap();
        let params = gen.forward_values(&x).unwrap();
        let expected = libm::log(2.0) + DEFAULT_SIGMA_FLOOR;
        for &s in params.sigma.unwrap().data() {
            assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
        }
        assert!(params.mu.is_none());
    }

    #[test]
    fn zero_mean_kind_has_no_mu_parameters() {
        let gen = tiny_generator(NoiseKind::GaussianZeroMean, 2);
        // trunk1, trunk2, sigma head: 3 layers, 6 tensors.
        assert_eq!(gen.parameters().len(), 6);
        assert!(!gen.parameter_names().iter().any(|n| n.contains("mu")));
        let learned = tiny_generator(NoiseKind::GaussianLearnedMean, 2);
        assert_eq!(learned.parameters().len(), 8);
        assert!(learned.parameter_names().iter().any(|n| n.contains("mu")));
    }

    #[test]
    fn forward_is_deterministic_per_input() {
        let gen = tiny_generator(NoiseKind::GaussianLearnedMean, 3);
        let x = Tensor::matrix(2, 3, vec![0.5, -0.5, 1.0, 0.5, -0.5, 1.0]).unwrap();
        let params = gen.forward_values(&x).unwrap();
        let sigma = params.sigma.unwrap();
        let mu = params.mu.unwrap();
        // Two identical input rows produce identical parameter rows.
        assert_eq!(&sigma.data()[..3], &sigma.data()[3..]);
        assert_eq!(&mu.data()[..3], &mu.data()[3..]);
        let again = gen.forward_values(&x).unwrap();
        assert_eq!(sigma.data(), again.sigma.unwrap().data());
    }

    #[test]
    fn gaussian_combine_with_zero_sigma_is_zero() {
        let params = NoiseParams {
            sigma: Some(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()),
            mu: None,
            u: None,
        };
        let base = Tensor::matrix(1, 2, vec![1.7, -0.3]).unwrap();
        let eps = combine_noise(NoiseKind::GaussianZeroMean, &params, &base, None).unwrap();
        assert_eq!(eps.data(), &[0.0, 0.0]);
    }

    #[test]
    fn gaussian_combine_hand_computed() {
        // mu + base (.) sigma = [1,2] + [0.5,-0.5] (.) [1,1] = [1.5, 1.5]
        let params = NoiseParams {
            sigma: Some(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()),
            mu: Some(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()),
            u: None,
        };
        let base = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let eps = combine_noise(NoiseKind::GaussianLearnedMean, &params, &base, None).unwrap();
        assert_eq!(eps.data(), &[1.5, 1.5]);
    }

    #[test]
    fn uniform_combine_hand_computed() {
        // (2 * 0.75 - 1) * 2 = 1
        let params = NoiseParams {
            sigma: None,
            mu: None,
            u: Some(Tensor::matrix(1, 1, vec![2.0]).unwrap()),
        };
        let base = Tensor::matrix(1, 1, vec![0.75]).unwrap();
        let eps = combine_noise(NoiseKind::Uniform, &params, &base, None).unwrap();
        assert_eq!(eps.data(), &[1.0]);
    }

    #[test]
    fn uniform_zero_width_is_always_zero() {
        let params = NoiseParams {
            sigma: None,
            mu: None,
            u: Some(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()),
        };
        for frac in [0.0, 0.25, 0.99] {
            let base = Tensor::matrix(1, 3, vec![frac; 3]).unwrap();
            let eps = combine_noise(NoiseKind::Uniform, &params, &base, None).unwrap();
            assert_eq!(eps.data(), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn kind_params_mismatch_is_contract_error() {
        let params = NoiseParams { sigma: None, mu: None, u: None };
        let base = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            combine_noise(NoiseKind::GaussianZeroMean, &params, &base, None),
            Err(CoreError::Contract(_))
        ));
        assert!(matches!(
            combine_noise(NoiseKind::Uniform, &params, &base, None),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn dirac_ignores_base_draw() {
        let eps0 = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let gen = NoiseGenerator::dirac(3, eps0.clone()).unwrap();
        assert!(gen.parameters().is_empty());
        let x = Tensor::matrix(2, 3, vec![9.0; 6]).unwrap();
        for seed in [1u64, 2, 99] {
            let sample = gen.sample_with_seed(&x, seed).unwrap();
            assert_eq!(&sample.epsilon.data()[..3], eps0.data());
            assert_eq!(&sample.epsilon.data()[3..], eps0.data());
            assert!(sample.base_draw.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sample_reproducibility() {
        let gen = tiny_generator(NoiseKind::GaussianZeroMean, 4);
        let x = Tensor::matrix(3, 3, vec![0.2; 9]).unwrap();
        let a = gen.sample_with_seed(&x, 42).unwrap();
        let b = gen.sample_with_seed(&x, 42).unwrap();
        assert_eq!(a.epsilon.data(), b.epsilon.data());
        assert_eq!(a.base_draw.data(), b.base_draw.data());
        let c = gen.sample_with_seed(&x, 43).unwrap();
        assert_ne!(a.epsilon.data(), c.epsilon.data());
    }

    #[test]
    fn graph_sampling_matches_value_path() {
        for kind in [NoiseKind::GaussianZeroMean, NoiseKind::GaussianLearnedMean, NoiseKind::Uniform]
        {
            let gen = tiny_generator(kind, 5);
            let mut rng = Rng::from_seed(11);
            let x = Tensor::matrix(4, 3, rng.normal_vec(12)).unwrap();
            let base = gen.base_draw(4, &mut rng);

            let params = gen.forward_values(&x).unwrap();
            let value = combine_noise(kind, &params, &base, None).unwrap();

            let mut g = Graph::new();
            let nodes = gen.register_const(&mut g);
            let xid = g.constant(x.clone());
            let bid = g.constant(base.clone());
            let eps = gen.build_noise(&mut g, &nodes, xid, bid).unwrap();
            assert_eq!(g.value(eps).data(), value.data());
        }
    }

    #[test]
    fn norm_penalty_examples() {
        let sample = |rows: Vec<f64>, d: usize| NoiseSample {
            epsilon: Tensor::matrix(rows.len() / d, d, rows).unwrap(),
            base_draw: Tensor::zeros(vec![1, d]),
        };
        // All rows of norm 2.
        let p = norm_penalty(&[sample(vec![2.0, 0.0, 0.0, 2.0], 2)]).unwrap();
        assert!((p - 0.5).abs() < 1e-7, "{p}");
        // Norms {1, 3}: mean 2.
        let p = norm_penalty(&[sample(vec![1.0, 0.0, 0.0, 3.0], 2)]).unwrap();
        assert!((p - 0.5).abs() < 1e-7, "{p}");
        // All-zero noise hits the guard.
        let p = norm_penalty(&[sample(vec![0.0, 0.0], 2)]).unwrap();
        assert!((p - 1e8).abs() / 1e8 < 1e-9, "{p}");
        assert!(matches!(norm_penalty(&[]), Err(CoreError::Contract(_))));
    }

    #[test]
    fn norm_penalty_graph_matches_value_path() {
        let mut rng = Rng::from_seed(6);
        let rows = Tensor::matrix(5, 3, rng.normal_vec(15)).unwrap();
        let value = norm_penalty(&[NoiseSample {
            epsilon: rows.clone(),
            base_draw: Tensor::zeros(vec![5, 3]),
        }])
        .unwrap();
        let mut g = Graph::new();
        let r = g.constant(rows);
        let node = build_norm_penalty(&mut g, r).unwrap();
        assert!((g.scalar_value(node) - value).abs() < 1e-12);
    }

    #[test]
    fn reparameterization_gradients_match_finite_differences() {
        // L(eps) = sum(eps^2) with eps reparameterized; gradients must reach
        // the trunk and every head.
        for kind in [NoiseKind::GaussianZeroMean, NoiseKind::GaussianLearnedMean, NoiseKind::Uniform]
        {
            let mut gen = tiny_generator(kind, 7);
            let mut rng = Rng::from_seed(23);
            let x = Tensor::matrix(3, 3, rng.normal_vec(9)).unwrap();
            let base = gen.base_draw(3, &mut rng);

            let run = |gen: &NoiseGenerator| -> Result<(Graph, NodeId, Vec<NodeId>)> {
                let mut g = Graph::new();
                let nodes = gen.register(&mut g);
                let mut ids = Vec::new();
                for n in [&nodes.trunk1, &nodes.trunk2, &nodes.sigma_head, &nodes.mu_head, &nodes.u_head]
                    .into_iter()
                    .flatten()
                {
                    ids.push(n.weight);
                    ids.push(n.bias);
                }
                let xid = g.constant(x.clone());
                let bid = g.constant(base.clone());
                let eps = gen.build_noise(&mut g, &nodes, xid, bid)?;
                let sq = g.mul(eps, eps)?;
                let loss = g.sum(sq, None)?;
                Ok((g, loss, ids))
            };

            let (mut g, loss, ids) = run(&gen).unwrap();
            g.backward(loss).unwrap();
            let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();

            let n_params = gen.parameters().len();
            for p in 0..n_params {
                let original = gen.parameters()[p].clone();
                let fd = finite_difference_grad(
                    |t| {
                        let mut probe = gen.clone();
                        *probe.parameters_mut()[p] = t.clone();
                        let (gg, l, _) = run(&probe)?;
                        Ok(gg.scalar_value(l))
                    },
                    &original,
                    1e-5,
                )
                .unwrap();
                for (idx, (&a, &n)) in analytic[p].iter().zip(fd.data()).enumerate() {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                    assert!(rel <= 1e-4, "{kind:?} param {p}[{idx}]: {a} vs {n}");
                }
            }
            let _ = gen.parameters_mut();
        }
    }

    #[test]
    fn gaussian_empirical_mean_approaches_mu() {
        let d = 3;
        let mu = [0.7, -1.2, 0.4];
        let sigma = [0.9, 0.3, 1.5];
        let params = NoiseParams {
            sigma: Some(Tensor::matrix(1, d, sigma.to_vec()).unwrap()),
            mu: Some(Tensor::matrix(1, d, mu.to_vec()).unwrap()),
            u: None,
        };
        let mut rng = Rng::from_seed(77);
        let n = 10_000usize;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let base = Tensor::matrix(1, d, rng.normal_vec(d)).unwrap();
            let eps =
                combine_noise(NoiseKind::GaussianLearnedMean, &params, &base, None).unwrap();
            for (s, &v) in sums.iter_mut().zip(eps.data()) {
                *s += v;
            }
        }
        for j in 0..d {
            let mean = sums[j] / n as f64;
            let bound = 4.0 * sigma[j] / libm::sqrt(n as f64);
            assert!((mean - mu[j]).abs() < bound, "dim {j}: {mean} vs {} +- {bound}", mu[j]);
        }
    }

    #[test]
    fn uniform_range_and_variance() {
        let d = 2;
        let u = [1.7, 0.6];
        let params = NoiseParams {
            sigma: None,
            mu: None,
            u: Some(Tensor::matrix(1, d, u.to_vec()).unwrap()),
        };
        let mut rng = Rng::from_seed(78);
        let n = 10_000usize;
        let mut sums = [0.0; 2];
        let mut sq_sums = [0.0; 2];
        for _ in 0..n {
            let base = Tensor::matrix(1, d, rng.uniform_vec(d)).unwrap();
            let eps = combine_noise(NoiseKind::Uniform, &params, &base, None).unwrap();
            for j in 0..d {
                let v = eps.data()[j];
                assert!(v.abs() <= u[j], "sample {v} outside [-{}, {}]", u[j], u[j]);
                sums[j] += v;
                sq_sums[j] += v * v;
            }
        }
        for j in 0..d {
            let mean = sums[j] / n as f64;
            let var = sq_sums[j] / n as f64 - mean * mean;
            let expected = u[j] * u[j] / 3.0;
            assert!(
                (var - expected).abs() / expected < 0.05,
                "dim {j}: var {var} vs {expected}"
            );
        }
    }
}
