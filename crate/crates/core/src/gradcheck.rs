//! Gradient-check suite: every loss family against central finite
//! differences on randomized small instances.
//!
//! The suite is the single source for both the acceptance gate and the CLI
//! `gradcheck` command. Each family draws seeded random instances (inputs,
//! parameters, augmentation draws), computes analytic gradients for every
//! parameter tensor via the tape, and compares coordinate-wise with the
//! central-difference oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{finite_difference_grad, Graph, NodeId, Tensor};
use crate::contrastive::{ContrastiveConfig, EncoderConfig, EncoderModel, Linear};
use crate::error::Result;
use crate::noise::{build_norm_penalty, GeneratorConfig, NoiseGenerator, NoiseKind};
use crate::rng::Rng;
use crate::train::{build_batch_loss, AugmentationSet, BatchLossSettings};

/// Relative error between an analytic and a central-difference gradient.
///
/// Central differences at `h = 1e-5` on order-one losses carry roughly
/// `1e-10` of absolute roundoff, so coordinates below `1e-4` in magnitude
/// are held to the equivalent absolute window (`|a - n| <= 1e-8` passes at
/// the `1e-4` tolerance) instead of a pure ratio that would only measure
/// the oracle's own noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub family: String,
    pub instances: usize,
    /// Total gradient coordinates compared.
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<28} {:>3} instances  {:>6} coords  max rel err {:.3e}  [{}]",
            self.family,
            self.instances,
            self.coordinates,
            self.max_rel_err,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub tolerance: f64,
    pub step: f64,
    pub instances: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { tolerance: 1e-4, step: 1e-5, instances: 20, seed: 20240 }
    }
}

fn random_dims(rng: &mut Rng) -> (usize, usize) {
    let d = 3 + rng.next_range(14); // <= 16
    let m = 2 + rng.next_range(7); // <= 8
    (d, m)
}

fn small_encoder(d: usize, rng: &mut Rng) -> EncoderModel {
    let cfg = EncoderConfig {
        input_dim: d,
        hidden_dim: 8,
        repr_dim: 6,
        proj_hidden_dim: 5,
        proj_dim: 4,
    };
    EncoderModel::init(cfg, rng)
}

/// Instances whose relu inputs come closer to zero than this are redrawn:
/// the central difference straddles the kink there and measures nothing.
const KINK_MARGIN: f64 = 1e-3;

fn settings_of(cfg: &ContrastiveConfig) -> BatchLossSettings {
    BatchLossSettings { contrastive: cfg.clone(), lambda_norm: 1.0, mc_samples: 1 }
}

fn infonce_graph(
    encoder: &EncoderModel,
    view_a: &Tensor,
    view_b: &Tensor,
    cfg: &ContrastiveConfig,
) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    let mut g = Graph::new();
    let nodes = encoder.register(&mut g);
    let ids = nodes.param_ids();
    let xa = g.constant(view_a.clone());
    let xb = g.constant(view_b.clone());
    let (_, za) = EncoderModel::forward_nodes(&mut g, &nodes, xa)?;
    let (_, zb) = EncoderModel::forward_nodes(&mut g, &nodes, xb)?;
    let loss = crate::contrastive::build_infonce_loss(&mut g, za, zb, None, cfg)?;
    Ok((g, loss.loss, ids))
}

/// Gradcheck one scalar-producing builder over a model's parameter list.
fn check_params<M, F>(
    model: &M,
    params_of: impl Fn(&M) -> Vec<&Tensor>,
    with_param: impl Fn(&M, usize, &Tensor) -> M,
    build: F,
    step: f64,
    max_rel: &mut f64,
    coords: &mut usize,
) -> Result<()>
where
    F: Fn(&M) -> Result<(Graph, NodeId, Vec<NodeId>)>,
{
    let (mut g, loss, ids) = build(model)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();

    let n_params = params_of(model).len();
    debug_assert_eq!(n_params, ids.len());
    for p in 0..n_params {
        let original = params_of(model)[p].clone();
        let fd = finite_difference_grad(
            |t| {
                let probe = with_param(model, p, t);
                let (gg, l, _) = build(&probe)?;
                Ok(gg.scalar_value(l))
            },
            &original,
            step,
        )?;
        for (&a, &n) in analytic[p].iter().zip(fd.data()) {
            *max_rel = max_rel.max(relative_error(a, n));
            *coords += 1;
        }
    }
    Ok(())
}

/// InfoNCE through the encoder on two random view matrices.
fn infonce_family(settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = Rng::stream(settings.seed, 101);
    let cfg = ContrastiveConfig::default();
    let mut max_rel = 0.0f64;
    let mut coords = 0usize;

    for _ in 0..settings.instances {
        // Redraw instances whose forward pass is degenerate (zero-norm
        // embedding) or sits too close to a relu kink for central
        // differences to be meaningful.
        let (encoder, view_a, view_b) = loop {
            let (d, m) = random_dims(&mut rng);
            let encoder = small_encoder(d, &mut rng);
            let view_a = Tensor::matrix(m, d, rng.normal_vec(m * d))?;
            let view_b = Tensor::matrix(m, d, rng.normal_vec(m * d))?;
            match infonce_graph(&encoder, &view_a, &view_b, &cfg) {
                Ok((g, _, _)) if g.relu_kink_margin() > KINK_MARGIN => {
                    break (encoder, view_a, view_b)
                }
                _ => continue,
            }
        };

        let build = |enc: &EncoderModel| infonce_graph(enc, &view_a, &view_b, &cfg);
        check_params(
            &encoder,
            |e| e.parameters(),
            |e, p, t| {
                let mut clone = e.clone();
                *clone.parameters_mut()[p] = t.clone();
                clone
            },
            build,
            settings.step,
            &mut max_rel,
            &mut coords,
        )?;
    }
    Ok(GradCheckReport {
        family: String::from("infonce"),
        instances: settings.instances,
        coordinates: coords,
        max_rel_err: max_rel,
        tolerance: settings.tolerance,
        passed: max_rel <= settings.tolerance,
    })
}

/// Full mixed batch loss (contrastive + penalty) through encoder and
/// generator for one noise kind.
fn pinda_family(kind: NoiseKind, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let name = match kind {
        NoiseKind::GaussianZeroMean => "pinda-gaussian-zero-mean",
        NoiseKind::GaussianLearnedMean => "pinda-gaussian-learned-mean",
        NoiseKind::Uniform => "pinda-uniform",
        NoiseKind::Dirac => "pinda-dirac",
    };
    let mut rng = Rng::stream(settings.seed, 200 + kind as u64);
    let cfg = ContrastiveConfig::default();
    let set = AugmentationSet::for_pinda(vec![])?;
    let mut max_rel = 0.0f64;
    let mut coords = 0usize;

    struct Instance {
        encoder: EncoderModel,
        generator: NoiseGenerator,
    }

    for _ in 0..settings.instances {
        // Redraw degenerate instances; see infonce_family.
        let (instance, batch, draws, noise_seed) = loop {
            let (d, m) = random_dims(&mut rng);
            let encoder = small_encoder(d, &mut rng);
            let generator =
                NoiseGenerator::init(GeneratorConfig::new(d, 6, kind), &mut rng)?;
            let batch = Tensor::matrix(m, d, rng.normal_vec(m * d))?;
            let mut draws: Vec<(usize, usize)> = (0..m)
                .map(|_| (rng.next_range(2), rng.next_range(2)))
                .collect();
            // At least one learned-noise slot so psi gradients exist.
            draws[0].0 = 1;
            let noise_seed = rng.next_u64();

            let mut probe = Graph::new();
            let mut probe_rng = Rng::from_seed(noise_seed);
            let ok = build_batch_loss(
                &mut probe,
                &encoder,
                Some(&generator),
                &set,
                &draws,
                &batch,
                &settings_of(&cfg),
                &mut probe_rng,
            )
            .is_ok();
            if ok && probe.relu_kink_margin() > KINK_MARGIN {
                break (Instance { encoder, generator }, batch, draws, noise_seed);
            }
        };
        let build = |inst: &Instance| -> Result<(Graph, NodeId, Vec<NodeId>)> {
            let mut g = Graph::new();
            let mut noise_rng = Rng::from_seed(noise_seed);
            let nodes = build_batch_loss(
                &mut g,
                &inst.encoder,
                Some(&inst.generator),
                &set,
                &draws,
                &batch,
                &settings_of(&cfg),
                &mut noise_rng,
            )?;
            let mut ids = nodes.encoder_params;
            ids.extend(nodes.generator_params);
            Ok((g, nodes.total, ids))
        };
        check_params(
            &instance,
            |inst| {
                let mut p = inst.encoder.parameters();
                p.extend(inst.generator.parameters());
                p
            },
            |inst, p, t| {
                let mut enc = inst.encoder.clone();
                let mut gen = inst.generator.clone();
                let enc_count = enc.parameters().len();
                if p < enc_count {
                    *enc.parameters_mut()[p] = t.clone();
                } else {
                    *gen.parameters_mut()[p - enc_count] = t.clone();
                }
                Instance { encoder: enc, generator: gen }
            },
            build,
            settings.step,
            &mut max_rel,
            &mut coords,
        )?;
    }
    Ok(GradCheckReport {
        family: String::from(name),
        instances: settings.instances,
        coordinates: coords,
        max_rel_err: max_rel,
        tolerance: settings.tolerance,
        passed: max_rel <= settings.tolerance,
    })
}

/// The inverse-norm penalty as a function of the noise rows themselves.
fn penalty_family(settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = Rng::stream(settings.seed, 300);
    let mut max_rel = 0.0f64;
    let mut coords = 0usize;

    for _ in 0..settings.instances {
        let (d, m) = random_dims(&mut rng);
        let rows = Tensor::matrix(m, d, rng.normal_vec(m * d))?;
        let build = |t: &Tensor| -> Result<(Graph, NodeId, Vec<NodeId>)> {
            let mut g = Graph::new();
            let leaf = g.param(t);
            let penalty = build_norm_penalty(&mut g, leaf)?;
            Ok((g, penalty, vec![leaf]))
        };
        check_params(
            &rows,
            |t| vec![t],
            |_, _, t| t.clone(),
            build,
            settings.step,
            &mut max_rel,
            &mut coords,
        )?;
    }
    Ok(GradCheckReport {
        family: String::from("norm-penalty"),
        instances: settings.instances,
        coordinates: coords,
        max_rel_err: max_rel,
        tolerance: settings.tolerance,
        passed: max_rel <= settings.tolerance,
    })
}

/// Cross-entropy of the linear probe head.
fn softmax_head_family(settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = Rng::stream(settings.seed, 400);
    let mut max_rel = 0.0f64;
    let mut coords = 0usize;

    for _ in 0..settings.instances {
        let (d, m) = random_dims(&mut rng);
        let classes = 2 + rng.next_range(4);
        let features = Tensor::matrix(m, d, rng.normal_vec(m * d))?;
        let labels: Vec<usize> = (0..m).map(|_| rng.next_range(classes)).collect();
        let head = Linear::init(d, classes, &mut rng);

        let build = |h: &Linear| -> Result<(Graph, NodeId, Vec<NodeId>)> {
            let mut g = Graph::new();
            let nodes = h.register(&mut g);
            let x = g.constant(features.clone());
            let loss =
                crate::eval::build_cross_entropy(&mut g, &nodes, x, &labels, classes)?;
            Ok((g, loss, vec![nodes.weight, nodes.bias]))
        };
        check_params(
            &head,
            |h| vec![&h.weight, &h.bias],
            |h, p, t| {
                let mut clone = h.clone();
                if p == 0 {
                    clone.weight = t.clone();
                } else {
                    clone.bias = t.clone();
                }
                clone
            },
            build,
            settings.step,
            &mut max_rel,
            &mut coords,
        )?;
    }
    Ok(GradCheckReport {
        family: String::from("softmax-regression-head"),
        instances: settings.instances,
        coordinates: coords,
        max_rel_err: max_rel,
        tolerance: settings.tolerance,
        passed: max_rel <= settings.tolerance,
    })
}

/// Run every family; one report per family.
pub fn run_suite(settings: &GradCheckSettings) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        infonce_family(settings)?,
        pinda_family(NoiseKind::GaussianZeroMean, settings)?,
        pinda_family(NoiseKind::GaussianLearnedMean, settings)?,
        pinda_family(NoiseKind::Uniform, settings)?,
        penalty_family(settings)?,
        softmax_head_family(settings)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!(relative_error(1.0, 1.0001) < 2e-4);
        assert!(relative_error(0.0, 0.0) == 0.0);
        // Tiny coordinates are held to the absolute window instead.
        assert!(relative_error(1e-9, 2e-9) < 1e-4);
        assert!(relative_error(0.0, 1e-8) <= 1e-4);
        assert!(relative_error(0.0, 1e-5) > 1e-4);
    }

    #[test]
    #[ignore]
    fn profile_families() {
        for (name, f) in [
            ("infonce", 0usize),
            ("pinda-gzm", 1),
            ("pinda-glm", 2),
            ("pinda-uni", 3),
            ("penalty", 4),
            ("softmax", 5),
        ] {
            let settings = GradCheckSettings::default();
            let t = Instant::now();
            let r = match f {
                0 => infonce_family(&settings).unwrap(),
                1 => pinda_family(NoiseKind::GaussianZeroMean, &settings).unwrap(),
                2 => pinda_family(NoiseKind::GaussianLearnedMean, &settings).unwrap(),
                3 => pinda_family(NoiseKind::Uniform, &settings).unwrap(),
                4 => penalty_family(&settings).unwrap(),
                _ => softmax_head_family(&settings).unwrap(),
            };
            println!("{name}: {:?} {}", t.elapsed(), r.line());
        }
    }

    #[test]
    fn full_suite_passes_within_a_minute() {
        let start = Instant::now();
        let reports = run_suite(&GradCheckSettings::default()).unwrap();
        assert_eq!(reports.len(), 6);
        for report in &reports {
            assert!(report.passed, "{}", report.line());
            assert!(report.instances >= 20);
            assert!(report.coordinates > 0);
        }
        assert!(start.elapsed().as_secs() < 60, "suite too slow");
    }
}
