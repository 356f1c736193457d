//! Dataset ingestion: CSV parsing, feature rescaling with invertible
//! metadata, synthetic Gaussian blobs, and the untrained-noise baseline
//! views.

use std::fmt::Write as _;
use std::path::Path;

use pinda_core::rng::{streams, Rng};
use pinda_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// How features were rescaled, with enough metadata to invert it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RescaleState {
    None,
    Standardize { means: Vec<f64>, stds: Vec<f64> },
    MinMax { mins: Vec<f64>, ranges: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    None,
    Standardize,
    MinMax,
}

/// A dense labeled (or unlabeled) feature matrix.
#[derive(Debug, Clone)]
pub struct VectorDataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub scaling: RescaleState,
}

impl VectorDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels_or_err(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| CliError::Ingestion(format!("dataset `{}` has no labels", self.name)))
    }
}

// ── CSV ──────────────────────────────────────────────────────────────

/// Parse a comma-separated file of real features; the label is the last
/// column when `has_labels`. Errors carry the offending line number.
pub fn load_csv(path: &Path, has_labels: bool, has_header: bool) -> Result<VectorDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Ingestion(format!("{}: {e}", path.display())))?;
    parse_csv(&text, has_labels, has_header, &path.display().to_string())
}

fn parse_csv(
    text: &str,
    has_labels: bool,
    has_header: bool,
    name: &str,
) -> Result<VectorDataset> {
    let mut features = Vec::new();
    let mut labels = if has_labels { Some(Vec::new()) } else { None };
    let mut width: Option<usize> = None;
    let mut rows = 0usize;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 && has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(CliError::Ingestion(format!(
                    "{name}:{line_no}: expected {w} columns, found {}",
                    fields.len()
                )));
            }
            _ => {}
        }
        let feature_count = if has_labels { fields.len() - 1 } else { fields.len() };
        if has_labels && fields.len() < 2 {
            return Err(CliError::Ingestion(format!(
                "{name}:{line_no}: labeled rows need at least two columns"
            )));
        }
        for field in &fields[..feature_count] {
            let value: f64 = field.trim().parse().map_err(|_| {
                CliError::Ingestion(format!("{name}:{line_no}: invalid number `{field}`"))
            })?;
            if !value.is_finite() {
                return Err(CliError::Ingestion(format!(
                    "{name}:{line_no}: non-finite value `{field}`"
                )));
            }
            features.push(value);
        }
        if let Some(labels) = labels.as_mut() {
            let raw = fields[feature_count].trim();
            let value: f64 = raw.parse().map_err(|_| {
                CliError::Ingestion(format!("{name}:{line_no}: invalid label `{raw}`"))
            })?;
            if !value.is_finite() || value < 0.0 || value.fract() != 0.0 {
                return Err(CliError::Ingestion(format!(
                    "{name}:{line_no}: label `{raw}` is not a nonnegative integer"
                )));
            }
            labels.push(value as usize);
        }
        rows += 1;
    }

    if rows == 0 {
        return Err(CliError::Ingestion(format!("{name}: no data rows")));
    }
    let dim = width.unwrap() - usize::from(has_labels);
    let features = Tensor::new(vec![rows, dim], features)
        .map_err(|e| CliError::Ingestion(e.to_string()))?;
    Ok(VectorDataset {
        name: name.to_string(),
        features,
        labels,
        scaling: RescaleState::None,
    })
}

/// Write a dataset as CSV, labels last when present.
pub fn save_csv(ds: &VectorDataset, path: &Path) -> Result<()> {
    let d = ds.dim();
    let mut out = String::new();
    for i in 0..ds.len() {
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", ds.features.data()[i * d + j]);
        }
        if let Some(labels) = &ds.labels {
            let _ = write!(out, ",{}", labels[i]);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

// ── Rescaling ────────────────────────────────────────────────────────

/// Fit the transform on `ds` and apply it, storing inversion metadata.
pub fn rescale(ds: &VectorDataset, mode: RescaleMode) -> VectorDataset {
    let state = fit_rescale(&ds.features, mode);
    apply_rescale(ds, &state)
}

/// Per-feature statistics of the transform.
pub fn fit_rescale(features: &Tensor, mode: RescaleMode) -> RescaleState {
    let (n, d) = (features.rows(), features.cols());
    match mode {
        RescaleMode::None => RescaleState::None,
        RescaleMode::Standardize => {
            let mut means = vec![0.0; d];
            for (idx, &v) in features.data().iter().enumerate() {
                means[idx % d] += v;
            }
            for m in &mut means {
                *m /= n as f64;
            }
            let mut stds = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    let diff = features.data()[i * d + j] - means[j];
                    stds[j] += diff * diff;
                }
            }
            for s in &mut stds {
                *s = (*s / n as f64).sqrt();
            }
            RescaleState::Standardize { means, stds }
        }
        RescaleMode::MinMax => {
            let mut mins = vec![f64::INFINITY; d];
            let mut maxs = vec![f64::NEG_INFINITY; d];
            for i in 0..n {
                for j in 0..d {
                    let v = features.data()[i * d + j];
                    mins[j] = mins[j].min(v);
                    maxs[j] = maxs[j].max(v);
                }
            }
            let ranges = mins.iter().zip(&maxs).map(|(&lo, &hi)| hi - lo).collect();
            RescaleState::MinMax { mins, ranges }
        }
    }
}

/// Apply fitted statistics; constant features map to zero.
pub fn apply_rescale(ds: &VectorDataset, state: &RescaleState) -> VectorDataset {
    let d = ds.dim();
    let mut data = ds.features.data().to_vec();
    match state {
        RescaleState::None => {}
        RescaleState::Standardize { means, stds } => {
            for (idx, v) in data.iter_mut().enumerate() {
                let j = idx % d;
                *v = if stds[j] == 0.0 { 0.0 } else { (*v - means[j]) / stds[j] };
            }
        }
        RescaleState::MinMax { mins, ranges } => {
            for (idx, v) in data.iter_mut().enumerate() {
                let j = idx % d;
                *v = if ranges[j] == 0.0 { 0.0 } else { (*v - mins[j]) / ranges[j] };
            }
        }
    }
    VectorDataset {
        name: ds.name.clone(),
        features: Tensor::new(vec![ds.len(), d], data).expect("shape preserved"),
        labels: ds.labels.clone(),
        scaling: state.clone(),
    }
}

/// Invert the stored transform, recovering the original features.
pub fn inverse_rescale(ds: &VectorDataset) -> VectorDataset {
    let d = ds.dim();
    let mut data = ds.features.data().to_vec();
    match &ds.scaling {
        RescaleState::None => {}
        RescaleState::Standardize { means, stds } => {
            for (idx, v) in data.iter_mut().enumerate() {
                let j = idx % d;
                *v = if stds[j] == 0.0 { means[j] } else { *v * stds[j] + means[j] };
            }
        }
        RescaleState::MinMax { mins, ranges } => {
            for (idx, v) in data.iter_mut().enumerate() {
                let j = idx % d;
                *v = if ranges[j] == 0.0 { mins[j] } else { *v * ranges[j] + mins[j] };
            }
        }
    }
    VectorDataset {
        name: ds.name.clone(),
        features: Tensor::new(vec![ds.len(), d], data).expect("shape preserved"),
        labels: ds.labels.clone(),
        scaling: RescaleState::None,
    }
}

// ── Synthetic data ───────────────────────────────────────────────────

/// Gaussian blobs: class centers are orthogonal one-hot directions scaled so
/// every pair of centers sits `center_spacing` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: SyntheticGenerator,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_spacing: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticGenerator {
    GaussianBlobs,
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<VectorDataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.dim == 0 {
        return Err(CliError::Config(String::from(
            "synthetic spec needs positive classes, per_class, and dim",
        )));
    }
    if spec.classes > spec.dim {
        return Err(CliError::Config(format!(
            "blob centers need dim >= classes, got dim {} for {} classes",
            spec.dim, spec.classes
        )));
    }
    let mut rng = Rng::stream(spec.seed, streams::DATA);
    let n = spec.classes * spec.per_class;
    let scale = spec.center_spacing / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for _ in 0..spec.per_class {
            for j in 0..spec.dim {
                let center = if j == class { scale } else { 0.0 };
                data.push(center + spec.noise_sigma * rng.next_normal());
            }
            labels.push(class);
        }
    }
    Ok(VectorDataset {
        name: format!(
            "blobs-c{}-n{}-d{}-seed{}",
            spec.classes, spec.per_class, spec.dim, spec.seed
        ),
        features: Tensor::new(vec![n, spec.dim], data)
            .map_err(|e| CliError::Config(e.to_string()))?,
        labels: Some(labels),
        scaling: RescaleState::None,
    })
}

// ── Train/test bundling ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: VectorDataset,
    pub test: VectorDataset,
}

/// Seeded split when the dataset carries no declared one.
pub fn split_dataset(ds: &VectorDataset, train_fraction: f64, seed: u64) -> Result<DatasetBundle> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(CliError::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = ds.len();
    let n_train = ((n as f64) * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(CliError::Config(format!(
            "split of {n} rows at {train_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::stream(seed, streams::DATA);
    rng.shuffle(&mut order);

    let take = |rows: &[usize], suffix: &str| -> VectorDataset {
        let d = ds.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&ds.features.data()[r * d..(r + 1) * d]);
        }
        VectorDataset {
            name: format!("{}-{suffix}", ds.name),
            features: Tensor::new(vec![rows.len(), d], data).expect("split shape"),
            labels: ds
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
            scaling: ds.scaling.clone(),
        }
    };
    Ok(DatasetBundle {
        train: take(&order[..n_train], "train"),
        test: take(&order[n_train..], "test"),
    })
}

// ── Baseline views ───────────────────────────────────────────────────

/// The untrained-noise baseline view: `x + N(0, I)` on rescaled features.
pub fn baseline_random_noise_view(x: &[f64], rng: &mut Rng) -> Vec<f64> {
    pinda_core::train::random_noise_view(x, rng)
}

/// Representation-space noise of fixed norm, fed to the projection head.
pub fn baseline_simcl_repr_noise(h: &[f64], scale: f64, rng: &mut Rng) -> Vec<f64> {
    pinda_core::train::repr_noise_view(h, scale, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pinda_core::eval::{knn_accuracy, LabeledRepresentations};

    #[test]
    fn csv_three_line_parse() {
        let ds = parse_csv("1,2,0\n3,4,1\n5,6,0\n", true, false, "inline").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels.as_deref(), Some(&[0usize, 1, 0][..]));
        assert_eq!(ds.features.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn csv_empty_is_ingestion_error() {
        assert!(matches!(
            parse_csv("", true, false, "inline"),
            Err(CliError::Ingestion(_))
        ));
        assert!(matches!(
            parse_csv("a,b\n", true, true, "inline"),
            Err(CliError::Ingestion(_))
        ));
    }

    #[test]
    fn csv_header_is_skipped() {
        let ds = parse_csv("f1,f2,label\n1,2,0\n3,4,1\n", true, true, "inline").unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let err = parse_csv("1,2,0\nx,4,1\n", true, false, "inline").unwrap_err();
        assert!(err.to_string().contains("inline:2"), "{err}");
        let err = parse_csv("1,2,0\n3,4\n", true, false, "inline").unwrap_err();
        assert!(err.to_string().contains("inline:2"), "{err}");
    }

    #[test]
    fn csv_rejects_non_finite_and_bad_labels() {
        assert!(parse_csv("1,inf,0\n", true, false, "x").is_err());
        assert!(parse_csv("1,NaN,0\n", true, false, "x").is_err());
        assert!(parse_csv("1,2,1.5\n", true, false, "x").is_err());
        assert!(parse_csv("1,2,-1\n", true, false, "x").is_err());
        // Float-form integral labels are accepted.
        let ds = parse_csv("1,2,1.0\n", true, false, "x").unwrap();
        assert_eq!(ds.labels.as_deref(), Some(&[1usize][..]));
    }

    #[test]
    fn csv_roundtrips_through_save() {
        let ds = parse_csv("1.5,-2,3\n0.25,4,0\n", true, false, "inline").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, true, false).unwrap();
        assert_eq!(back.features.data(), ds.features.data());
        assert_eq!(back.labels, ds.labels);
    }

    fn plain(features: Vec<f64>, rows: usize, cols: usize) -> VectorDataset {
        VectorDataset {
            name: String::from("t"),
            features: Tensor::new(vec![rows, cols], features).unwrap(),
            labels: None,
            scaling: RescaleState::None,
        }
    }

    #[test]
    fn standardize_centers_and_scales() {
        let ds = plain(vec![0.0, 2.0, 4.0], 3, 1);
        let scaled = rescale(&ds, RescaleMode::Standardize);
        let mean: f64 = scaled.features.data().iter().sum::<f64>() / 3.0;
        let var: f64 =
            scaled.features.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minmax_maps_to_unit_interval() {
        let ds = plain(vec![2.0, 4.0], 2, 1);
        let scaled = rescale(&ds, RescaleMode::MinMax);
        assert_eq!(scaled.features.data(), &[0.0, 1.0]);
    }

    #[test]
    fn none_mode_is_identity() {
        let ds = plain(vec![1.0, -2.0, 3.0], 3, 1);
        let scaled = rescale(&ds, RescaleMode::None);
        assert_eq!(scaled.features.data(), ds.features.data());
    }

    #[test]
    fn constant_features_standardize_to_zero() {
        let ds = plain(vec![5.0, 5.0, 5.0], 3, 1);
        let scaled = rescale(&ds, RescaleMode::Standardize);
        assert_eq!(scaled.features.data(), &[0.0, 0.0, 0.0]);
        let scaled = rescale(&ds, RescaleMode::MinMax);
        assert_eq!(scaled.features.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rescale_roundtrip_recovers_originals() {
        let mut rng = Rng::from_seed(3);
        let original = plain(rng.normal_vec(40).iter().map(|v| v * 7.0 + 3.0).collect(), 10, 4);
        for mode in [RescaleMode::Standardize, RescaleMode::MinMax, RescaleMode::None] {
            let scaled = rescale(&original, mode);
            let back = inverse_rescale(&scaled);
            for (a, b) in back.features.data().iter().zip(original.features.data()) {
                assert!((a - b).abs() < 1e-12, "{mode:?}: {a} vs {b}");
            }
        }
    }

    fn blob_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            generator: SyntheticGenerator::GaussianBlobs,
            classes: 2,
            per_class: 30,
            dim: 6,
            center_spacing: 100.0,
            noise_sigma: 0.1,
            seed,
        }
    }

    #[test]
    fn synthetic_blobs_are_separable_on_raw_features() {
        let ds = make_synthetic(&blob_spec(0)).unwrap();
        let labels = ds.labels.clone().unwrap();
        let reps = LabeledRepresentations::new(
            ds.features.clone(),
            labels.clone(),
            ds.features.clone(),
            labels,
        )
        .unwrap();
        assert_eq!(knn_accuracy(&reps, 5).unwrap(), 1.0);
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = make_synthetic(&blob_spec(7)).unwrap();
        let b = make_synthetic(&blob_spec(7)).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        let c = make_synthetic(&blob_spec(8)).unwrap();
        assert_ne!(a.features.data(), c.features.data());
    }

    #[test]
    fn zero_sigma_puts_all_members_on_their_center() {
        let mut spec = blob_spec(1);
        spec.noise_sigma = 0.0;
        let ds = make_synthetic(&spec).unwrap();
        let scale = 100.0 / std::f64::consts::SQRT_2;
        let d = ds.dim();
        for i in 0..ds.len() {
            let class = ds.labels.as_ref().unwrap()[i];
            for j in 0..d {
                let expected = if j == class { scale } else { 0.0 };
                assert_eq!(ds.features.data()[i * d + j], expected);
            }
        }
        // Pairwise center distance matches the requested spacing.
        let row0 = &ds.features.data()[..d];
        let row_last = &ds.features.data()[(ds.len() - 1) * d..];
        let dist: f64 = row0
            .iter()
            .zip(row_last)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((dist - 100.0).abs() < 1e-9);
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        let mut spec = blob_spec(0);
        spec.classes = 10; // > dim
        assert!(make_synthetic(&spec).is_err());
    }

    #[test]
    fn split_is_seeded_and_partitions() {
        let ds = make_synthetic(&blob_spec(2)).unwrap();
        let a = split_dataset(&ds, 0.8, 5).unwrap();
        let b = split_dataset(&ds, 0.8, 5).unwrap();
        assert_eq!(a.train.features.data(), b.train.features.data());
        assert_eq!(a.train.len() + a.test.len(), ds.len());
        assert_eq!(a.train.len(), 48);
        assert!(split_dataset(&ds, 0.0, 5).is_err());
        assert!(split_dataset(&ds, 1.0, 5).is_err());
    }

    #[test]
    fn random_noise_view_statistics() {
        let x = [0.5, -1.0, 2.0];
        let mut a = Rng::from_seed(1);
        let mut b = Rng::from_seed(1);
        assert_eq!(
            baseline_random_noise_view(&x, &mut a),
            baseline_random_noise_view(&x, &mut b)
        );

        let n = 10_000usize;
        let mut rng = Rng::from_seed(2);
        let mut sums = [0.0; 3];
        let mut sq_sums = [0.0; 3];
        for _ in 0..n {
            let view = baseline_random_noise_view(&x, &mut rng);
            for j in 0..3 {
                let diff = view[j] - x[j];
                sums[j] += view[j];
                sq_sums[j] += diff * diff;
            }
        }
        let bound = 4.0 / (n as f64).sqrt();
        for j in 0..3 {
            let mean = sums[j] / n as f64;
            assert!((mean - x[j]).abs() < bound, "dim {j}: {mean} vs {}", x[j]);
            let var = sq_sums[j] / n as f64;
            assert!((var - 1.0).abs() < 0.05, "dim {j}: var {var}");
        }
    }

    #[test]
    fn simcl_view_has_fixed_norm_and_fresh_draws() {
        let h = [1.0, 2.0, 3.0, 4.0];
        let mut rng = Rng::from_seed(5);
        let one = baseline_simcl_repr_noise(&h, 0.7, &mut rng);
        let added: f64 = one
            .iter()
            .zip(&h)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((added - 0.7).abs() < 1e-12);
        assert_eq!(baseline_simcl_repr_noise(&h, 0.0, &mut rng), h.to_vec());
        let two = baseline_simcl_repr_noise(&h, 0.7, &mut rng);
        assert_ne!(one, two);
    }
}
