//! Unit-norm encoded inputs and reconstruction targets.
//!
//! Every row the module emits has Euclidean norm 1 and rows are pairwise
//! distinct; duplicated inputs would put a zero eigenvalue into the kernels
//! downstream. Targets default to the encoded rows themselves, so the
//! learning task lives entirely in encoded space.

pub mod idx;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, RngStream};
use crate::snn::ActivationKind;

/// Norm tolerance on emitted rows.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Default pairwise-distance guard against duplicate rows.
pub const DEFAULT_DUPLICATE_GUARD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Dataset {
    encoded: Matrix,
    targets: Matrix,
    test_encoded: Matrix,
    labels: Option<Vec<u8>>,
}

impl Dataset {
    fn validate(self, duplicate_guard: f64) -> Result<Dataset> {
        let n = self.encoded.rows();
        if n < 2 {
            return Err(Error::Dataset(format!("need n >= 2 rows, got {n}")));
        }
        for block in [&self.encoded, &self.test_encoded] {
            for i in 0..block.rows() {
                let norm = dot(block.row(i), block.row(i)).sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Dataset(format!(
                        "row {i} has norm {norm}, expected 1 within {UNIT_NORM_TOL:e}"
                    )));
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let dist = self
                    .encoded
                    .row(i)
                    .iter()
                    .zip(self.encoded.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist <= duplicate_guard {
                    return Err(Error::Dataset(format!(
                        "rows {i} and {j} are {dist:e} apart, under the duplicate guard {duplicate_guard:e}"
                    )));
                }
            }
        }
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.encoded.rows()
    }

    pub fn dim(&self) -> usize {
        self.encoded.cols()
    }

    pub fn encoded(&self) -> &Matrix {
        &self.encoded
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn test_encoded(&self) -> &Matrix {
        &self.test_encoded
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// `n×n` Gram matrix of the encoded rows. Rank is capped at the row
    /// dimension, so for n > d its least eigenvalue is zero by construction;
    /// positive-definiteness checks at that shape belong on the nonlinear
    /// kernels instead.
    pub fn gram(&self) -> Matrix {
        let n = self.n();
        Matrix::from_fn(n, n, |i, j| dot(self.encoded.row(i), self.encoded.row(j)))
    }

    /// `d×d` feature Gram `X^T X`, full-rank for generic rows when n >= d.
    pub fn feature_gram(&self) -> Matrix {
        self.encoded
            .transpose()
            .matmul(&self.encoded)
            .expect("shapes agree")
    }

    /// Same inputs with overridden reconstruction targets.
    pub fn with_targets(&self, targets: Matrix) -> Result<Dataset> {
        if targets.rows() != self.n() || targets.cols() != self.dim() {
            return Err(Error::Dataset(format!(
                "targets are {}x{}, expected {}x{}",
                targets.rows(),
                targets.cols(),
                self.n(),
                self.dim()
            )));
        }
        Ok(Dataset {
            targets,
            ..self.clone()
        })
    }

    /// CSV export of the encoded rows: `index,component_0..component_{d-1}`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("index");
        for l in 0..d {
            out.push_str(&format!(",component_{l}"));
        }
        out.push('\n');
        for i in 0..self.n() {
            out.push_str(&i.to_string());
            for v in self.encoded.row(i) {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn normalize_row(row: &mut [f64]) -> Result<()> {
    let norm = dot(row, row).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Dataset(
            "zero or non-finite vector cannot be normalized".into(),
        ));
    }
    for v in row.iter_mut() {
        *v /= norm;
    }
    Ok(())
}

fn sphere_rows(n: usize, d: usize, stream: &mut RngStream) -> Result<Matrix> {
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        stream.fill_gaussian(m.row_mut(i));
        normalize_row(m.row_mut(i))?;
    }
    Ok(m)
}

/// Synthetic dataset: training and test rows i.i.d. uniform on the unit
/// sphere in `R^d`, targets equal to the encoded rows. Retries a handful of
/// times if the duplicate guard trips (vanishing probability at these sizes).
pub fn synth_dataset(
    n: usize,
    n_test: usize,
    d: usize,
    stream: &RngStream,
    duplicate_guard: f64,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Dataset(format!("need n >= 2, got {n}")));
    }
    if d == 0 {
        return Err(Error::Dataset("need d >= 1".into()));
    }
    const RETRIES: u64 = 8;
    let mut last_err = None;
    for attempt in 0..RETRIES {
        let mut train_stream = stream.child(attempt);
        let mut test_stream = stream.child(0x7E57).child(attempt);
        let encoded = sphere_rows(n, d, &mut train_stream)?;
        let test_encoded = sphere_rows(n_test, d, &mut test_stream)?;
        let candidate = Dataset {
            targets: encoded.clone(),
            encoded,
            test_encoded,
            labels: None,
        };
        match candidate.validate(duplicate_guard) {
            Ok(ds) => return Ok(ds),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Dataset("duplicate-guard retries exhausted".into())))
}

/// How raw inputs are turned into unit-norm encoded rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Use the flattened input directly, normalized. Requires the raw
    /// dimension to equal the requested output dimension.
    IdentityNormalize,
    /// One fixed affine layer plus activation, weights drawn once from the
    /// seed and never trained.
    FixedRandomLayer,
}

/// A frozen encoder. `hidden_width` is the width of the random layer; when
/// it differs from the requested output dimension a second fixed projection
/// maps down (tests and recipes keep them equal).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub hidden_width: usize,
    pub activation: ActivationKind,
    pub seed: u64,
}

/// Applies the frozen encoder to raw flattened inputs and packages the
/// result. `raw` is `n_total × pixels`; the first `n` rows become training
/// rows and the remainder the test split.
pub fn encode(
    raw: &Matrix,
    labels: Option<Vec<u8>>,
    spec: &EncoderSpec,
    d_out: usize,
    n_train: usize,
    duplicate_guard: f64,
) -> Result<Dataset> {
    if raw.rows() == 0 {
        return Err(Error::Dataset("no raw inputs to encode".into()));
    }
    if n_train < 2 || n_train > raw.rows() {
        return Err(Error::Dataset(format!(
            "n_train {n_train} out of range for {} raw rows",
            raw.rows()
        )));
    }
    let encoded_all = match spec.kind {
        EncoderKind::IdentityNormalize => {
            if raw.cols() != d_out {
                return Err(Error::Dataset(format!(
                    "identity-normalize needs raw dim {} == d_out {d_out}",
                    raw.cols()
                )));
            }
            let mut m = raw.clone();
            for i in 0..m.rows() {
                normalize_row(m.row_mut(i))?;
            }
            m
        }
        EncoderKind::FixedRandomLayer => {
            let width = if spec.hidden_width == 0 {
                d_out
            } else {
                spec.hidden_width
            };
            let mut wstream = RngStream::new(spec.seed, 0xE).child(0);
            // 1/sqrt(pixels) keeps pre-activations O(1) for [0,1] pixels
            let scale = 1.0 / (raw.cols() as f64).sqrt();
            let a = wstream.gaussian_matrix(width, raw.cols()).scale(scale);
            let features = raw.matmul(&a.transpose())?;
            let mut activated = Matrix::from_fn(features.rows(), width, |i, j| {
                spec.activation.eval(features.get(i, j))
            });
            if width != d_out {
                let mut pstream = RngStream::new(spec.seed, 0xE).child(1);
                let proj = pstream
                    .gaussian_matrix(d_out, width)
                    .scale(1.0 / (width as f64).sqrt());
                activated = activated.matmul(&proj.transpose())?;
            }
            for i in 0..activated.rows() {
                normalize_row(activated.row_mut(i))?;
            }
            activated
        }
    };

    let split = |mat: &Matrix, from: usize, to: usize| {
        Matrix::from_fn(to - from, mat.cols(), |i, j| mat.get(from + i, j))
    };
    let encoded = split(&encoded_all, 0, n_train);
    let test_encoded = split(&encoded_all, n_train, encoded_all.rows());
    Dataset {
        targets: encoded.clone(),
        encoded,
        test_encoded,
        labels: labels.map(|l| l.into_iter().take(n_train).collect()),
    }
    .validate(duplicate_guard)
}
