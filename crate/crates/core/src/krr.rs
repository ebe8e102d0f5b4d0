//! Kernel ridge regression against the μ-group kernel.
//!
//! The closed-form predictor is `Θ_mu(x_te, X) (Θ_mu + β I)^{-1} X`, with the
//! time-t variant obtained by mapping eigenvalues through
//! `(1 − e^{−λ t}) / λ`. The trained network it is compared against runs
//! gradient descent on `L = 1/(2n)‖f̂(X) − X‖_F² + (β_train/2)‖ΔW_mu‖_F²`,
//! whose linearization solves the same system under the correspondence
//!
//! ```text
//! β_ridge = n · β_train,      t_ridge = flow_time / n,
//! ```
//!
//! and carries the network's initial function along:
//! `f̂_lin(x_te; t) = f̂₀(x_te) + Θ(x_te,X)(Θ+βI)^{-1}(I − e^{−(Θ+βI)t})(X − f̂₀(X))`.
//! The gap report therefore scores the network against this linearized
//! predictor (exact in the linear case), and alongside it the plain
//! ridge formula on raw targets, whose deviation is what the initial-output
//! bound `ε_init` absorbs.

use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ntk::{KernelBlocks, KernelMode};
use crate::numerics::{sym_eig, Matrix, RngStream, SymEig};
use crate::snn::{expected_output, SnnConfig, SnnParams};
use crate::train::{ObjectiveKind, ObjectiveSpec};

/// Shape the fitted kernel lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    /// n×n factor; predictions solve per output coordinate.
    KronFactor { n: usize, d: usize },
    /// nd×nd kernel; targets are vectorized with layout `i*d + k`.
    Full { n: usize, d: usize },
}

/// Fitted ridge system over the μ-kernel.
#[derive(Debug, Clone)]
pub struct KrrPredictor {
    side: Side,
    beta: f64,
    targets: Matrix,
    /// `Θ_mu + β I`, kept for reconstruction checks.
    shifted: Matrix,
    /// Eigendecomposition of `Θ_mu + β I`.
    eig: SymEig,
    provenance: String,
}

/// Cross-kernel row(s) `Θ_mu(x_te, X)` for one test point.
#[derive(Debug, Clone)]
pub enum CrossKernel {
    /// Length-n factor row.
    KronFactor(Vec<f64>),
    /// d×nd block.
    Full(Matrix),
}

impl KrrPredictor {
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    /// Least eigenvalue of the unshifted kernel.
    pub fn lambda0(&self) -> f64 {
        self.eig.eigenvalues[0] - self.beta
    }

    /// `‖(Θ+βI) − V diag(λ) V^T‖_F`, for the factorization invariant.
    pub fn factorization_residual(&self) -> f64 {
        self.eig
            .reconstruct()
            .sub(&self.shifted)
            .expect("shapes agree")
            .frobenius_norm()
    }

    /// Ridge weights `(Θ + βI)^{-1} targets` in the stored layout: n×d in
    /// factor mode, nd×1 in full mode.
    pub fn weights(&self) -> Result<Matrix> {
        self.solve_targets(&self.targets, |lambda| 1.0 / lambda)
    }

    fn vectorize(&self, targets: &Matrix) -> Matrix {
        match self.side {
            Side::KronFactor { .. } => targets.clone(),
            Side::Full { n, d } => {
                let mut v = Matrix::zeros(n * d, 1);
                for i in 0..n {
                    for k in 0..d {
                        v.set(i * d + k, 0, targets.get(i, k));
                    }
                }
                v
            }
        }
    }

    /// Applies `V diag(w(λ)) V^T` to the (vectorized) targets.
    fn solve_targets(&self, targets: &Matrix, weight: impl Fn(f64) -> f64) -> Result<Matrix> {
        let rhs = self.vectorize(targets);
        let vt_rhs = self.eig.eigenvectors.transpose().matmul(&rhs)?;
        let mut scaled = vt_rhs;
        for (row, &lambda) in self.eig.eigenvalues.iter().enumerate() {
            let w = weight(lambda);
            for c in 0..scaled.cols() {
                scaled.set(row, c, scaled.get(row, c) * w);
            }
        }
        self.eig.eigenvectors.matmul(&scaled)
    }

    fn check_cross(&self, cross: &CrossKernel) -> Result<()> {
        match (self.side, cross) {
            (Side::KronFactor { n, .. }, CrossKernel::KronFactor(v)) if v.len() == n => Ok(()),
            (Side::Full { n, d }, CrossKernel::Full(m))
                if m.rows() == d && m.cols() == n * d =>
            {
                Ok(())
            }
            _ => Err(Error::KernelMode(
                "cross kernel does not match the fitted kernel's mode/shape".into(),
            )),
        }
    }

    fn predict_with(
        &self,
        cross: &CrossKernel,
        targets: &Matrix,
        weight: impl Fn(f64) -> f64,
    ) -> Result<Vec<f64>> {
        self.check_cross(cross)?;
        let alpha = self.solve_targets(targets, weight)?;
        match (cross, self.side) {
            (CrossKernel::KronFactor(row), Side::KronFactor { d, .. }) => Ok((0..d)
                .map(|k| {
                    (0..row.len())
                        .map(|i| row[i] * alpha.get(i, k))
                        .sum::<f64>()
                })
                .collect()),
            (CrossKernel::Full(block), _) => {
                let v = block.matmul(&alpha)?;
                Ok(v.column(0))
            }
            _ => unreachable!("check_cross covers the mode pairing"),
        }
    }

    /// Closed-form prediction `Θ(x_te,X)(Θ+βI)^{-1} targets` (time → ∞).
    pub fn predict(&self, cross: &CrossKernel) -> Result<Vec<f64>> {
        self.predict_with(cross, &self.targets.clone(), |l| 1.0 / l)
    }

    /// Finite-time prediction through the matrix exponential:
    /// `Θ(x_te,X)(Θ+βI)^{-1}(I − e^{−(Θ+βI)t}) targets`.
    pub fn predict_time_t(&self, cross: &CrossKernel, t: f64) -> Result<Vec<f64>> {
        if t < 0.0 {
            return Err(Error::InvalidConfig(format!("time must be >= 0, got {t}")));
        }
        self.predict_with(cross, &self.targets.clone(), |l| time_weight(l, t))
    }

    fn predict_for_targets(&self, cross: &CrossKernel, targets: &Matrix) -> Result<Vec<f64>> {
        self.predict_with(cross, targets, |l| 1.0 / l)
    }

    fn predict_time_t_for_targets(
        &self,
        cross: &CrossKernel,
        targets: &Matrix,
        t: f64,
    ) -> Result<Vec<f64>> {
        self.predict_with(cross, targets, |l| time_weight(l, t))
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }
}

/// `(1 − e^{−λt})/λ`, continued to `t` at λ = 0.
fn time_weight(lambda: f64, t: f64) -> f64 {
    if lambda.abs() < 1e-300 {
        t
    } else {
        -(-lambda * t).exp_m1() / lambda
    }
}

/// Fits the ridge system on the μ-block of the given kernel.
pub fn fit(blocks: &KernelBlocks, beta: f64, targets: &Matrix) -> Result<KrrPredictor> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "ridge beta must be finite and >= 0, got {beta}"
        )));
    }
    if targets.rows() != blocks.n || targets.cols() != blocks.d {
        return Err(Error::ShapeMismatch {
            op: "krr_fit",
            left_rows: blocks.n,
            left_cols: blocks.d,
            right_rows: targets.rows(),
            right_cols: targets.cols(),
        });
    }
    let side = match blocks.mode {
        KernelMode::KronFactor => Side::KronFactor {
            n: blocks.n,
            d: blocks.d,
        },
        KernelMode::Full => Side::Full {
            n: blocks.n,
            d: blocks.d,
        },
    };
    let kernel = &blocks.theta_mu;
    let size = kernel.rows();
    let shifted = kernel.add(&Matrix::identity(size).scale(beta))?;
    let eig = sym_eig(&shifted)?;
    let lmax = eig.eigenvalues[size - 1].abs();
    if eig.eigenvalues[0] <= 1e-12 * lmax.max(1.0) {
        return Err(Error::SingularSystem {
            lambda_min: eig.eigenvalues[0] - beta,
            beta,
        });
    }
    Ok(KrrPredictor {
        side,
        beta,
        targets: targets.clone(),
        shifted,
        eig,
        provenance: format!("{:?}", blocks.provenance),
    })
}

/// Splits a kernel computed jointly over `[train; test]` rows into the
/// training-block kernel and one cross-kernel per test row. The joint
/// computation keyed per-row streams by row index, so the train block is
/// bit-identical to a train-only computation.
pub fn split_joint_mu(
    joint: &KernelBlocks,
    n_train: usize,
) -> Result<(KernelBlocks, Vec<CrossKernel>)> {
    if n_train >= joint.n {
        return Err(Error::InvalidConfig(format!(
            "joint kernel over {} rows cannot hold {} training rows plus test rows",
            joint.n, n_train
        )));
    }
    let n_test = joint.n - n_train;
    let d = joint.d;
    match joint.mode {
        KernelMode::KronFactor => {
            let sub = |mat: &Matrix| {
                Matrix::from_fn(n_train, n_train, |i, j| mat.get(i, j))
            };
            let train = KernelBlocks {
                mode: joint.mode,
                n: n_train,
                d,
                theta_mu: sub(&joint.theta_mu),
                theta_sigma: sub(&joint.theta_sigma),
                theta_d: sub(&joint.theta_d),
                provenance: joint.provenance.clone(),
            };
            let cross = (0..n_test)
                .map(|j| {
                    CrossKernel::KronFactor(
                        (0..n_train)
                            .map(|i| joint.theta_mu.get(n_train + j, i))
                            .collect(),
                    )
                })
                .collect();
            Ok((train, cross))
        }
        KernelMode::Full => {
            let sub = |mat: &Matrix| {
                Matrix::from_fn(n_train * d, n_train * d, |i, j| mat.get(i, j))
            };
            let train = KernelBlocks {
                mode: joint.mode,
                n: n_train,
                d,
                theta_mu: sub(&joint.theta_mu),
                theta_sigma: sub(&joint.theta_sigma),
                theta_d: sub(&joint.theta_d),
                provenance: joint.provenance.clone(),
            };
            let cross = (0..n_test)
                .map(|j| {
                    CrossKernel::Full(Matrix::from_fn(d, n_train * d, |k, col| {
                        joint.theta_mu.get((n_train + j) * d + k, col)
                    }))
                })
                .collect();
            Ok((train, cross))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapRow {
    pub test_index: usize,
    /// Distance to the linearized predictor (init function carried along).
    pub gap: f64,
    /// Distance to the plain ridge formula on raw targets.
    pub gap_uncentered: f64,
    pub pred_norm: f64,
    /// `‖f̂(θ(0), x_te)‖_2`.
    pub eps_init: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    pub mean_gap: f64,
    pub mean_gap_uncentered: f64,
    pub mean_eps_init: f64,
}

/// Compares a trained network against the fitted ridge predictor on the
/// dataset's test points.
///
/// Preconditions checked here: the training objective's KL weight must map
/// to the predictor's ridge via `β_ridge = n · β_train` (exact for MSE at
/// zero), and one cross kernel per test row must be supplied from the same
/// joint computation as the fitted kernel. `stream` must be the base stream
/// of that kernel computation: per-row child streams are reused for the
/// network evaluations, removing Monte Carlo cross-noise from the gap.
pub fn net_vs_krr_gap(
    params: &SnnParams,
    cfg: &SnnConfig,
    train_objective: &ObjectiveSpec,
    predictor: &KrrPredictor,
    ds: &Dataset,
    cross: &[CrossKernel],
    stream: &RngStream,
) -> Result<GapReport> {
    let n = ds.n();
    let beta_train = match train_objective.kind {
        ObjectiveKind::Mse => 0.0,
        ObjectiveKind::MsePlusKlSurrogate => train_objective.beta,
        ObjectiveKind::MsePlusExactKl => {
            return Err(Error::InvalidConfig(
                "gap comparison is defined for the surrogate objective".into(),
            ))
        }
    };
    let expected_ridge = n as f64 * beta_train;
    if (predictor.beta() - expected_ridge).abs() > 1e-9 * expected_ridge.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "ridge beta {} does not correspond to training beta {} (expected {})",
            predictor.beta(),
            beta_train,
            expected_ridge
        )));
    }
    let n_test = ds.test_encoded().rows();
    if cross.len() != n_test {
        return Err(Error::InvalidConfig(format!(
            "{} cross kernels for {} test points",
            cross.len(),
            n_test
        )));
    }

    // initial network outputs on the training rows, same streams as the kernel
    let at_init = params.at_init();
    let mut f0_train = Matrix::zeros(n, ds.dim());
    for i in 0..n {
        let f0 = expected_output(&at_init, cfg, ds.encoded().row(i), &stream.child(i as u64))?;
        for (k, v) in f0.iter().enumerate() {
            f0_train.set(i, k, *v);
        }
    }
    let centered = ds.targets().sub(&f0_train)?;

    let mut rows = Vec::with_capacity(n_test);
    for j in 0..n_test {
        let te = ds.test_encoded().row(j);
        let te_stream = stream.child((n + j) as u64);
        let net = expected_output(params, cfg, te, &te_stream)?;
        let f0_te = expected_output(&at_init, cfg, te, &te_stream)?;

        let lin = predictor.predict_for_targets(&cross[j], &centered)?;
        let plain = predictor.predict(&cross[j])?;

        let mut gap = 0.0;
        let mut gap_unc = 0.0;
        let mut pred_norm = 0.0;
        let mut eps_init = 0.0;
        for k in 0..ds.dim() {
            let lin_pred = f0_te[k] + lin[k];
            gap += (net[k] - lin_pred) * (net[k] - lin_pred);
            gap_unc += (net[k] - plain[k]) * (net[k] - plain[k]);
            pred_norm += lin_pred * lin_pred;
            eps_init += f0_te[k] * f0_te[k];
        }
        rows.push(GapRow {
            test_index: j,
            gap: gap.sqrt(),
            gap_uncentered: gap_unc.sqrt(),
            pred_norm: pred_norm.sqrt(),
            eps_init: eps_init.sqrt(),
        });
    }

    let mean = |f: fn(&GapRow) -> f64| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / rows.len() as f64
        }
    };
    Ok(GapReport {
        mean_gap: mean(|r| r.gap),
        mean_gap_uncentered: mean(|r| r.gap_uncentered),
        mean_eps_init: mean(|r| r.eps_init),
        rows,
    })
}

/// Finite-time linearized prediction at one test point (used by consistency
/// tests): `f̂₀(x_te) + Θ(x_te,X)(Θ+βI)^{-1}(I−e^{−(Θ+βI)t})(X − f̂₀(X))`.
pub fn linearized_prediction(
    predictor: &KrrPredictor,
    cross: &CrossKernel,
    f0_te: &[f64],
    centered_targets: &Matrix,
    t: f64,
) -> Result<Vec<f64>> {
    let lin = predictor.predict_time_t_for_targets(cross, centered_targets, t)?;
    Ok(f0_te.iter().zip(lin).map(|(a, b)| a + b).collect())
}

/// `ε_init + ε_Θ √n / (λ0 + β)`, the residual-error bound shape.
pub fn residual_bound(
    eps_init: f64,
    eps_theta: f64,
    n: usize,
    lambda0: f64,
    beta: f64,
) -> Result<f64> {
    for (name, v) in [
        ("eps_init", eps_init),
        ("eps_theta", eps_theta),
        ("lambda0", lambda0),
        ("beta", beta),
    ] {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "{name} must be finite and >= 0, got {v}"
            )));
        }
    }
    if lambda0 + beta <= 0.0 {
        return Err(Error::SingularSystem {
            lambda_min: lambda0,
            beta,
        });
    }
    Ok(eps_init + eps_theta * (n as f64).sqrt() / (lambda0 + beta))
}
