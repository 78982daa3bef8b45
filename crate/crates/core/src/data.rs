//! Datasets, synthetic generation, clean splits and label-noise injection.
//!
//! A [`NoisyDataset`] carries both the (possibly corrupted) labels used for
//! training and the hidden true labels used for evaluation. Trainers only
//! ever receive a [`TrainView`], which has no way to reach the true labels.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    None,
    Symmetric,
    Pair,
    /// An arbitrary caller-supplied transition matrix.
    Custom,
    /// Labels came from a file that already carried noise.
    External,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Pair => "pair",
            NoiseKind::Custom => "custom",
            NoiseKind::External => "external",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "symmetric" => Ok(NoiseKind::Symmetric),
            "pair" => Ok(NoiseKind::Pair),
            _ => Err(Error::Config {
                key: "noise".into(),
                msg: format!("unknown noise type `{s}` (none, symmetric, pair)"),
            }),
        }
    }
}

/// What was done to the labels of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseProvenance {
    pub kind: NoiseKind,
    /// Nominal rate of the transition matrix.
    pub rate: f64,
    pub seed: Option<u64>,
    /// Measured fraction of samples with `noisy != true`.
    pub flipped_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    features: Matrix,
    noisy_labels: Vec<usize>,
    true_labels: Vec<usize>,
    classes: usize,
    provenance: NoiseProvenance,
}

impl NoisyDataset {
    /// Noise-free dataset: noisy labels equal the true labels.
    pub fn clean(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::with_labels(
            features,
            labels.clone(),
            labels,
            classes,
            NoiseProvenance::default(),
        )
    }

    pub fn with_labels(
        features: Matrix,
        noisy_labels: Vec<usize>,
        true_labels: Vec<usize>,
        classes: usize,
        mut provenance: NoiseProvenance,
    ) -> Result<Self> {
        let n = features.rows();
        if noisy_labels.len() != n || true_labels.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows, {} noisy labels, {} true labels",
                noisy_labels.len(),
                true_labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Domain("need at least 2 classes".into()));
        }
        if let Some(&y) = noisy_labels
            .iter()
            .chain(&true_labels)
            .find(|&&y| y >= classes)
        {
            return Err(Error::Domain(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        provenance.flipped_fraction = flipped_fraction(&noisy_labels, &true_labels);
        Ok(Self {
            features,
            noisy_labels,
            true_labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    /// Ground truth. Evaluation code only.
    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn provenance(&self) -> &NoiseProvenance {
        &self.provenance
    }

    pub fn is_noise_free(&self) -> bool {
        self.noisy_labels == self.true_labels
    }

    /// `noisy_labels[i] == true_labels[i]` per sample.
    pub fn clean_mask(&self) -> Vec<bool> {
        self.noisy_labels
            .iter()
            .zip(&self.true_labels)
            .map(|(a, b)| a == b)
            .collect()
    }

    /// The only view handed to trainers: features and noisy labels.
    pub fn training_view(&self) -> TrainView<'_> {
        TrainView {
            features: &self.features,
            noisy_labels: &self.noisy_labels,
            classes: self.classes,
        }
    }

    /// Subset in the given order.
    pub fn subset(&self, indices: &[usize]) -> NoisyDataset {
        let noisy: Vec<usize> = indices.iter().map(|&i| self.noisy_labels[i]).collect();
        let truth: Vec<usize> = indices.iter().map(|&i| self.true_labels[i]).collect();
        let mut provenance = self.provenance.clone();
        provenance.flipped_fraction = flipped_fraction(&noisy, &truth);
        NoisyDataset {
            features: self.features.gather_rows(indices),
            noisy_labels: noisy,
            true_labels: truth,
            classes: self.classes,
            provenance,
        }
    }

    /// Clean view using the true labels.
    pub fn clean_view(&self) -> LabeledView {
        LabeledView {
            features: self.features.clone(),
            labels: self.true_labels.clone(),
            classes: self.classes,
        }
    }
}

fn flipped_fraction(noisy: &[usize], truth: &[usize]) -> f64 {
    if noisy.is_empty() {
        return 0.0;
    }
    let flipped = noisy.iter().zip(truth).filter(|(a, b)| a != b).count();
    flipped as f64 / noisy.len() as f64
}

/// Features plus noisy labels. Deliberately has no path to the true labels.
#[derive(Clone, Copy, Debug)]
pub struct TrainView<'a> {
    features: &'a Matrix,
    noisy_labels: &'a [usize],
    classes: usize,
}

impl<'a> TrainView<'a> {
    pub fn new(features: &'a Matrix, noisy_labels: &'a [usize], classes: usize) -> Result<Self> {
        if features.rows() != noisy_labels.len() {
            return Err(Error::Shape(
                "feature rows and labels differ in length".into(),
            ));
        }
        Ok(Self {
            features,
            noisy_labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &'a Matrix {
        self.features
    }

    pub fn noisy_labels(&self) -> &'a [usize] {
        self.noisy_labels
    }
}

/// A clean evaluation set (validation or test).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledView {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Isotropic Gaussian blobs around random points on a sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of each blob.
    pub spread: f64,
    /// Radius of the sphere the class centers lie on.
    pub separation: f64,
    pub seed: u64,
}

pub fn synth_gaussian(spec: &SynthSpec) -> Result<NoisyDataset> {
    if spec.classes < 2 {
        return Err(Error::Domain("synthetic data needs k >= 2".into()));
    }
    if spec.dim < 2 {
        return Err(Error::Domain("synthetic data needs dim >= 2".into()));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::Domain(
            "spread must be finite and nonnegative".into(),
        ));
    }
    let mut rng = rng_from_seed(spec.seed);
    let mut centers = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut c: Vec<f64> = (0..spec.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut c {
            *v *= spec.separation / norm;
        }
        centers.push(c);
    }
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.per_class {
        for (c, center) in centers.iter().enumerate() {
            for &m in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spec.spread * z);
            }
            labels.push(c);
        }
    }
    NoisyDataset::clean(Matrix::new(n, spec.dim, data)?, labels, spec.classes)
}

#[derive(Clone, Debug, Default)]
pub struct CsvOptions {
    /// Declared class count; inferred as `max label + 1` when absent.
    pub classes: Option<usize>,
    /// The file carries a second label column holding the true label.
    pub true_label_column: bool,
}

/// Reads `d` feature columns followed by an integer label column (and an
/// optional true-label column).
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<NoisyDataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| perr(0, e.to_string()))?;
    let label_cols = if opts.true_label_column { 2 } else { 1 };
    let mut width = None;
    let mut data = Vec::new();
    let mut noisy = Vec::new();
    let mut truth = Vec::new();
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match width {
            None => {
                if rec.len() <= label_cols {
                    return Err(perr(
                        line,
                        format!("need at least {} columns", label_cols + 1),
                    ));
                }
                width = Some(rec.len());
            }
            Some(w) if w != rec.len() => {
                return Err(perr(
                    line,
                    format!("expected {w} columns, found {}", rec.len()),
                ));
            }
            _ => {}
        }
        let d = rec.len() - label_cols;
        for (c, cell) in rec.iter().take(d).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| perr(line, format!("column {}: `{cell}` is not a number", c + 1)))?;
            data.push(v);
        }
        let parse_label = |cell: &str| -> Result<usize> {
            cell.parse::<usize>()
                .map_err(|_| perr(line, format!("label `{cell}` is not a nonnegative integer")))
        };
        let y = parse_label(&rec[d])?;
        noisy.push(y);
        truth.push(if opts.true_label_column {
            parse_label(&rec[d + 1])?
        } else {
            y
        });
        lines.push(line);
    }
    let Some(w) = width else {
        return Err(perr(0, "no data rows".into()));
    };
    let classes = match opts.classes {
        Some(k) => {
            for (i, (&a, &b)) in noisy.iter().zip(&truth).enumerate() {
                if a >= k || b >= k {
                    return Err(perr(
                        lines[i],
                        format!("label {} out of range for {k} classes", a.max(b)),
                    ));
                }
            }
            k
        }
        None => noisy.iter().chain(&truth).max().copied().unwrap_or(0) + 1,
    };
    let n = noisy.len();
    let features = Matrix::new(n, w - label_cols, data)?;
    let provenance = NoiseProvenance {
        kind: if noisy == truth {
            NoiseKind::None
        } else {
            NoiseKind::External
        },
        ..NoiseProvenance::default()
    };
    NoisyDataset::with_labels(features, noisy, truth, classes.max(2), provenance)
}

/// Writes features, noisy label and true label per row.
pub fn write_csv(dataset: &NoisyDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..dataset.len() {
        for v in dataset.features.row(i) {
            // `{:?}` keeps the shortest round-tripping representation.
            write!(out, "{v:?},")?;
        }
        writeln!(
            out,
            "{},{}",
            dataset.noisy_labels[i], dataset.true_labels[i]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Row-stochastic label transition matrix: `T[i][j]` is the probability
/// that true label `i` is observed as `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(classes: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{classes}x{classes} transition matrix needs {} entries",
                classes * classes
            )));
        }
        if entries.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::Domain(
                "transition entries must be nonnegative".into(),
            ));
        }
        for (i, row) in entries.chunks_exact(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self { classes, entries })
    }

    pub fn identity(classes: usize) -> Self {
        let mut entries = vec![0.0; classes * classes];
        for i in 0..classes {
            entries[i * classes + i] = 1.0;
        }
        Self { classes, entries }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.classes..(i + 1) * self.classes]
    }

    /// Draws an observed label for true label `y` from `u ~ U[0, 1)`.
    fn draw(&self, y: usize, u: f64) -> usize {
        let row = self.row(y);
        let mut acc = 0.0;
        let mut last_positive = y;
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                last_positive = j;
            }
            acc += p;
            if u < acc {
                return j;
            }
        }
        last_positive
    }
}

fn check_rate(classes: usize, tau: f64) -> Result<()> {
    if classes < 2 {
        return Err(Error::Domain("noise needs k >= 2".into()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Domain(format!("noise rate {tau} outside [0, 1)")));
    }
    Ok(())
}

/// Diagonal `1 - tau`, every off-diagonal entry `tau / (k - 1)`.
pub fn build_symmetric_matrix(classes: usize, tau: f64) -> Result<TransitionMatrix> {
    check_rate(classes, tau)?;
    let off = tau / (classes - 1) as f64;
    let mut entries = vec![off; classes * classes];
    for i in 0..classes {
        entries[i * classes + i] = 1.0 - tau;
    }
    TransitionMatrix::new(classes, entries)
}

/// Label `i` stays with probability `1 - tau` and becomes `(i + 1) mod k`
/// with probability `tau`.
pub fn build_pair_matrix(classes: usize, tau: f64) -> Result<TransitionMatrix> {
    check_rate(classes, tau)?;
    let mut entries = vec![0.0; classes * classes];
    for i in 0..classes {
        entries[i * classes + i] = 1.0 - tau;
        entries[i * classes + (i + 1) % classes] += tau;
    }
    TransitionMatrix::new(classes, entries)
}

/// Draws each noisy label independently from `T[true_label]`.
pub fn inject_noise(
    dataset: &NoisyDataset,
    matrix: &TransitionMatrix,
    seed: u64,
) -> Result<NoisyDataset> {
    inject_noise_tagged(dataset, matrix, seed, NoiseKind::Custom, f64::NAN)
}

pub(crate) fn inject_noise_tagged(
    dataset: &NoisyDataset,
    matrix: &TransitionMatrix,
    seed: u64,
    kind: NoiseKind,
    rate: f64,
) -> Result<NoisyDataset> {
    if matrix.classes() != dataset.classes() {
        return Err(Error::Shape(format!(
            "transition matrix is {0}x{0} but dataset has {1} classes",
            matrix.classes(),
            dataset.classes()
        )));
    }
    if !dataset.is_noise_free() || dataset.provenance.kind != NoiseKind::None {
        return Err(Error::Domain("dataset already carries label noise".into()));
    }
    let mut rng = rng_from_seed(seed);
    let noisy: Vec<usize> = dataset
        .true_labels
        .iter()
        .map(|&y| matrix.draw(y, rng.random::<f64>()))
        .collect();
    let provenance = NoiseProvenance {
        kind,
        rate,
        seed: Some(seed),
        flipped_fraction: 0.0,
    };
    NoisyDataset::with_labels(
        dataset.features.clone(),
        noisy,
        dataset.true_labels.clone(),
        dataset.classes,
        provenance,
    )
}

/// Symmetric or pair noise at rate `tau`; `NoiseKind::None` returns a copy.
pub fn apply_noise(
    dataset: &NoisyDataset,
    kind: NoiseKind,
    tau: f64,
    seed: u64,
) -> Result<NoisyDataset> {
    let k = dataset.classes();
    let matrix = match kind {
        NoiseKind::None => return Ok(dataset.clone()),
        NoiseKind::Symmetric => build_symmetric_matrix(k, tau)?,
        NoiseKind::Pair => build_pair_matrix(k, tau)?,
        NoiseKind::Custom | NoiseKind::External => {
            return Err(Error::Domain(format!("cannot synthesize `{kind}` noise")));
        }
    };
    inject_noise_tagged(dataset, &matrix, seed, kind, tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// Result of [`split`]. Index vectors refer to rows of the input dataset.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: NoisyDataset,
    pub validation: LabeledView,
    pub test: LabeledView,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Seeded random partition into train / clean validation / clean test.
/// Train rows keep their original relative order.
pub fn split(dataset: &NoisyDataset, spec: &SplitSpec) -> Result<Split> {
    let n = dataset.len();
    if spec.validation_size + spec.test_size >= n {
        return Err(Error::Domain(format!(
            "validation {} + test {} leaves no training samples out of {n}",
            spec.validation_size, spec.test_size
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(spec.seed));
    let mut validation_indices = order[..spec.validation_size].to_vec();
    let mut test_indices =
        order[spec.validation_size..spec.validation_size + spec.test_size].to_vec();
    let mut train_indices = order[spec.validation_size + spec.test_size..].to_vec();
    validation_indices.sort_unstable();
    test_indices.sort_unstable();
    train_indices.sort_unstable();
    Ok(Split {
        train: dataset.subset(&train_indices),
        validation: dataset.subset(&validation_indices).clean_view(),
        test: dataset.subset(&test_indices).clean_view(),
        train_indices,
        validation_indices,
        test_indices,
    })
}
