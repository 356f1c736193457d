//! Frozen-representation evaluation: k-nearest-neighbor classification and a
//! softmax-regression probe.
//!
//! Both evaluators consume the backbone output (the input of the projection
//! head), never the projected embedding. The probe trains a single linear
//! layer with cross-entropy on the train split only; test labels are not
//! reachable from the training path by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Tensor};
use crate::contrastive::{EncoderModel, Linear};
use crate::error::{CoreError, Result};
use crate::rng::{streams, Rng};
use crate::train::{AdamConfig, OptimizerState};

/// Representations with labels, split into train and test.
#[derive(Debug, Clone)]
pub struct LabeledRepresentations {
    pub train_features: Tensor,
    pub train_labels: Vec<usize>,
    pub test_features: Tensor,
    pub test_labels: Vec<usize>,
}

impl LabeledRepresentations {
    pub fn new(
        train_features: Tensor,
        train_labels: Vec<usize>,
        test_features: Tensor,
        test_labels: Vec<usize>,
    ) -> Result<Self> {
        if train_features.rows() != train_labels.len()
            || test_features.rows() != test_labels.len()
        {
            return Err(CoreError::Contract(format!(
                "feature rows and label counts disagree: {}x{} train, {}x{} test",
                train_features.rows(),
                train_labels.len(),
                test_features.rows(),
                test_labels.len()
            )));
        }
        if train_features.cols() != test_features.cols() {
            return Err(CoreError::Dimension(String::from(
                "train and test feature widths disagree",
            )));
        }
        Ok(LabeledRepresentations { train_features, train_labels, test_features, test_labels })
    }

    pub fn num_classes(&self) -> usize {
        self.train_labels
            .iter()
            .chain(&self.test_labels)
            .max()
            .map_or(0, |&m| m + 1)
    }
}

// ── k-nearest neighbors ──────────────────────────────────────────────

/// Majority vote over the `k` nearest train rows by Euclidean distance.
///
/// Ties are deterministic: equal distances prefer the smallest train index,
/// equal votes prefer the smallest class index.
pub fn knn_accuracy(reps: &LabeledRepresentations, k: usize) -> Result<f64> {
    let n_train = reps.train_features.rows();
    let n_test = reps.test_features.rows();
    if k == 0 || k > n_train {
        return Err(CoreError::Contract(format!(
            "k = {k} must lie in [1, {n_train}]"
        )));
    }
    if n_test == 0 {
        return Err(CoreError::Contract(String::from("empty test set")));
    }
    let d = reps.train_features.cols();
    let num_classes = reps.num_classes();
    let mut correct = 0usize;

    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n_train);
    for ti in 0..n_test {
        let test_row = &reps.test_features.data()[ti * d..(ti + 1) * d];
        dists.clear();
        for tr in 0..n_train {
            let train_row = &reps.train_features.data()[tr * d..(tr + 1) * d];
            let dist: f64 = test_row
                .iter()
                .zip(train_row)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            dists.push((dist, tr));
        }
        dists.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite distances")
                .then(a.1.cmp(&b.1))
        });
        let mut votes = vec![0usize; num_classes];
        for &(_, idx) in dists.iter().take(k) {
            votes[reps.train_labels[idx]] += 1;
        }
        let winner = votes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(class, _)| class)
            .unwrap_or(0);
        if winner == reps.test_labels[ti] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n_test as f64)
}

// ── Softmax regression ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SoftmaxRegressionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SoftmaxRegressionConfig {
    fn default() -> Self {
        SoftmaxRegressionConfig { epochs: 50, batch_size: 256, learning_rate: 1e-3, seed: 0 }
    }
}

/// Train the linear head on the train split; the test split never enters.
fn train_softmax_head(
    train_features: &Tensor,
    train_labels: &[usize],
    num_classes: usize,
    cfg: &SoftmaxRegressionConfig,
) -> Result<Linear> {
    let n = train_features.rows();
    let d = train_features.cols();
    let mut rng = Rng::stream(cfg.seed, streams::EVAL);
    // Zero-initialized probe: scale-free start, so the fixed step budget is
    // spent learning the boundary rather than undoing a random one.
    let mut head = Linear {
        weight: Tensor::zeros(vec![d, num_classes]),
        bias: Tensor::zeros(vec![num_classes]),
    };
    let mut optimizer = OptimizerState::for_params(
        AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() },
        &[&head.weight, &head.bias],
    );

    let batch_size = cfg.batch_size.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        // Every sample trains each epoch; the tail batch may be short.
        for chunk in order.chunks(batch_size) {
            let mut rows = Vec::with_capacity(chunk.len() * d);
            let mut labels = Vec::with_capacity(chunk.len());
            for &r in chunk {
                rows.extend_from_slice(&train_features.data()[r * d..(r + 1) * d]);
                labels.push(train_labels[r]);
            }
            let batch = Tensor::new(vec![chunk.len(), d], rows)?;

            let mut g = Graph::new();
            let nodes = head.register(&mut g);
            let x = g.constant(batch);
            let loss = build_cross_entropy(&mut g, &nodes, x, &labels, num_classes)?;
            g.backward(loss)?;
            g.write_grad_into(nodes.weight, &mut head.weight);
            g.write_grad_into(nodes.bias, &mut head.bias);
            optimizer.step(&mut [&mut head.weight, &mut head.bias])?;
        }
    }
    Ok(head)
}

/// Mean cross-entropy of `softmax(x @ W + b)` against integer labels,
/// recorded on the tape via the max-shifted log-sum-exp form.
pub(crate) fn build_cross_entropy(
    g: &mut Graph,
    head: &crate::contrastive::LinearNodes,
    x: crate::autodiff::NodeId,
    labels: &[usize],
    num_classes: usize,
) -> Result<crate::autodiff::NodeId> {
    let logits = head.apply(g, x)?;
    let n = g.value(logits).rows();
    let c = g.value(logits).cols();
    if labels.len() != n {
        return Err(CoreError::Contract(String::from("one label per row required")));
    }

    // Row maxima enter as constants; the identity
    // lse(row) = m + ln(sum(exp(row - m))) holds for any constant m.
    let logit_values = g.value(logits).data().to_vec();
    let mut row_max = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        for j in 0..c {
            row_max[i] = row_max[i].max(logit_values[i * c + j]);
        }
    }
    let mut neg_max_full = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            neg_max_full[i * c + j] = -row_max[i];
        }
    }
    let neg_max = g.constant(Tensor::new(vec![n, c], neg_max_full)?);
    let shifted = g.add(logits, neg_max)?;
    let exps = g.exp(shifted)?;
    let sums = g.sum(exps, Some(1))?;
    let log_sums = g.log(sums)?;
    let max_vec = g.constant(Tensor::vector(row_max));
    let lse = g.add(log_sums, max_vec)?;

    let mut onehot = vec![0.0; n * c];
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(CoreError::Contract(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        onehot[i * c + label] = 1.0;
    }
    let onehot = g.constant(Tensor::new(vec![n, c], onehot)?);
    let picked = g.mul(logits, onehot)?;
    let true_logits = g.sum(picked, Some(1))?;
    let per_row = g.sub(lse, true_logits)?;
    g.mean(per_row, None)
}

/// Accuracy of the trained linear head on the test split.
pub fn softmax_regression_accuracy(
    reps: &LabeledRepresentations,
    cfg: &SoftmaxRegressionConfig,
) -> Result<f64> {
    if reps.train_features.rows() == 0 || reps.test_features.rows() == 0 {
        return Err(CoreError::Contract(String::from("empty split")));
    }
    let num_classes = reps.num_classes();
    if num_classes < 2 {
        return Err(CoreError::Contract(String::from(
            "softmax regression needs at least two classes",
        )));
    }
    let head = train_softmax_head(&reps.train_features, &reps.train_labels, num_classes, cfg)?;

    let n = reps.test_features.rows();
    let d = reps.test_features.cols();
    let mut correct = 0usize;
    for i in 0..n {
        let row = &reps.test_features.data()[i * d..(i + 1) * d];
        let mut best = (0usize, f64::NEG_INFINITY);
        for class in 0..num_classes {
            let mut logit = head.bias.data()[class];
            for (j, &x) in row.iter().enumerate() {
                logit += x * head.weight.data()[j * num_classes + class];
            }
            if logit > best.1 {
                best = (class, logit);
            }
        }
        if best.0 == reps.test_labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

// ── Orchestration ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalSettings {
    /// Neighbor count for the kNN evaluator.
    pub k: usize,
    pub sr_epochs: usize,
    pub sr_batch_size: usize,
    pub sr_learning_rate: f64,
    /// One evaluator run per seed; identical seeds give identical runs.
    pub seeds: Vec<u64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: 5,
            sr_epochs: 50,
            sr_batch_size: 256,
            sr_learning_rate: 1e-3,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

impl MetricSummary {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = runs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        MetricSummary { mean, std: libm::sqrt(var), runs }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub knn: MetricSummary,
    pub softmax: MetricSummary,
}

/// Run both evaluators on a frozen encoder.
///
/// Representations are computed once; each configured seed drives one
/// evaluator run (kNN is deterministic, the probe varies with its seed).
pub fn evaluate(
    encoder: &EncoderModel,
    train_inputs: &Tensor,
    train_labels: &[usize],
    test_inputs: &Tensor,
    test_labels: &[usize],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if settings.seeds.is_empty() {
        return Err(CoreError::Contract(String::from("at least one evaluation seed")));
    }
    let (train_repr, _) = encoder.embed(train_inputs)?;
    let (test_repr, _) = encoder.embed(test_inputs)?;
    let reps = LabeledRepresentations::new(
        train_repr,
        train_labels.to_vec(),
        test_repr,
        test_labels.to_vec(),
    )?;

    let mut knn_runs = Vec::with_capacity(settings.seeds.len());
    let mut sr_runs = Vec::with_capacity(settings.seeds.len());
    for &seed in &settings.seeds {
        knn_runs.push(knn_accuracy(&reps, settings.k)?);
        sr_runs.push(softmax_regression_accuracy(
            &reps,
            &SoftmaxRegressionConfig {
                epochs: settings.sr_epochs,
                batch_size: settings.sr_batch_size,
                learning_rate: settings.sr_learning_rate,
                seed,
            },
        )?);
    }
    Ok(EvalReport {
        knn: MetricSummary::from_runs(knn_runs),
        softmax: MetricSummary::from_runs(sr_runs),
    })
}
