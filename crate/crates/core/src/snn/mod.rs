//! The stochastic latent-layer network.
//!
//! Forward pass (one noise draw `ζ ∈ R^{m×d}`):
//!
//! ```text
//! z = W_mu x + (W_sigma ⊙ ζ) x          (latent, length m)
//! f = (1/sqrt(m)) W_d^T ψ(σ(z))         (output, length d)
//! ```
//!
//! The trained object is the expectation `f̂(x) = E_ζ[f(x, ζ)]`, estimated by
//! Monte Carlo with a configurable sample count and optional antithetic
//! pairing. Because the expectation commutes with the per-unit structure,
//! one MC pass yields both `f̂` and the three per-group output gradients in a
//! factorized form (see [`McEval`]): for hidden unit `r`,
//!
//! ```text
//! ∂f̂_k/∂w_mu_r    = (1/sqrt(m)) w_d[r,k] · g[r] · x
//! ∂f̂_k/∂w_sigma_r = (1/sqrt(m)) w_d[r,k] · (x ⊙ h[r])
//! ∂f̂_k/∂w_d_{r,k'} = δ_{kk'} (1/sqrt(m)) · p[r]
//! ```
//!
//! with `g[r] = E[ψ'σ'(z_r)]`, `h[r] = E[ψ'σ'(z_r) ζ_r]`, `p[r] = E[ψ(σ(z_r))]`.
//! Everything downstream (loss gradients, empirical kernels) contracts these
//! factors instead of materializing Jacobian tensors.

mod activation;
pub mod checkpoint;

pub use activation::ActivationKind;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, RngStream};

/// Tags for the three trainable weight groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightGroup {
    Mu,
    Sigma,
    Decoder,
}

impl WeightGroup {
    pub const ALL: [WeightGroup; 3] = [WeightGroup::Mu, WeightGroup::Sigma, WeightGroup::Decoder];

    pub fn label(self) -> &'static str {
        match self {
            WeightGroup::Mu => "mu",
            WeightGroup::Sigma => "sigma",
            WeightGroup::Decoder => "d",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SnnConfig {
    /// Data (and output) dimension.
    pub d: usize,
    /// Hidden width.
    pub m: usize,
    /// Initial value of every variance-weight entry.
    pub sigma0: f64,
    /// Latent activation σ.
    pub activation: ActivationKind,
    /// Decoder representation function ψ.
    pub decoder_rep: ActivationKind,
    /// Monte Carlo samples per expectation.
    pub mc_samples: usize,
    /// Pair each draw with its negation. Halves variance and makes the
    /// identity-activation case exact; requires an even sample count.
    pub antithetic: bool,
}

impl SnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("width m must be >= 1".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("dimension d must be >= 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidConfig("mc_samples must be >= 1".into()));
        }
        if self.sigma0 < 0.0 {
            return Err(Error::InvalidConfig("sigma0 must be >= 0".into()));
        }
        if self.antithetic && self.mc_samples % 2 != 0 {
            return Err(Error::InvalidConfig(
                "antithetic pairing needs an even mc_samples".into(),
            ));
        }
        Ok(())
    }

    /// Number of raw ζ draws and the signs applied to each.
    fn draw_plan(&self) -> (usize, &'static [f64]) {
        if self.antithetic {
            (self.mc_samples / 2, &[1.0, -1.0])
        } else {
            (self.mc_samples, &[1.0])
        }
    }
}

/// The three trainable weight matrices plus an immutable snapshot of their
/// creation state (used by the KL penalty and drift diagnostics).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnnParams {
    w_mu: Matrix,
    w_sigma: Matrix,
    w_d: Matrix,
    init_w_mu: Matrix,
    init_w_sigma: Matrix,
    init_w_d: Matrix,
    /// `(master_seed, stream_id)` of the stream that initialized the weights.
    seed_provenance: (u64, u64),
}

impl SnnParams {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        w_mu: Matrix,
        w_sigma: Matrix,
        w_d: Matrix,
        init_w_mu: Matrix,
        init_w_sigma: Matrix,
        init_w_d: Matrix,
        seed_provenance: (u64, u64),
    ) -> SnnParams {
        SnnParams {
            w_mu,
            w_sigma,
            w_d,
            init_w_mu,
            init_w_sigma,
            init_w_d,
            seed_provenance,
        }
    }

    pub fn w_mu(&self) -> &Matrix {
        &self.w_mu
    }

    pub fn w_sigma(&self) -> &Matrix {
        &self.w_sigma
    }

    pub fn w_d(&self) -> &Matrix {
        &self.w_d
    }

    pub fn init_w_mu(&self) -> &Matrix {
        &self.init_w_mu
    }

    pub fn init_w_sigma(&self) -> &Matrix {
        &self.init_w_sigma
    }

    pub fn init_w_d(&self) -> &Matrix {
        &self.init_w_d
    }

    pub fn seed_provenance(&self) -> (u64, u64) {
        self.seed_provenance
    }

    pub fn width(&self) -> usize {
        self.w_mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_mu.cols()
    }

    pub fn group(&self, g: WeightGroup) -> &Matrix {
        match g {
            WeightGroup::Mu => &self.w_mu,
            WeightGroup::Sigma => &self.w_sigma,
            WeightGroup::Decoder => &self.w_d,
        }
    }

    pub fn init_group(&self, g: WeightGroup) -> &Matrix {
        match g {
            WeightGroup::Mu => &self.init_w_mu,
            WeightGroup::Sigma => &self.init_w_sigma,
            WeightGroup::Decoder => &self.init_w_d,
        }
    }

    pub(crate) fn group_mut(&mut self, g: WeightGroup) -> &mut Matrix {
        match g {
            WeightGroup::Mu => &mut self.w_mu,
            WeightGroup::Sigma => &mut self.w_sigma,
            WeightGroup::Decoder => &mut self.w_d,
        }
    }

    /// A params value whose current weights are the creation snapshot
    /// (the network "at time zero").
    pub fn at_init(&self) -> SnnParams {
        SnnParams {
            w_mu: self.init_w_mu.clone(),
            w_sigma: self.init_w_sigma.clone(),
            w_d: self.init_w_d.clone(),
            init_w_mu: self.init_w_mu.clone(),
            init_w_sigma: self.init_w_sigma.clone(),
            init_w_d: self.init_w_d.clone(),
            seed_provenance: self.seed_provenance,
        }
    }

    /// `‖W(t) − W(0)‖_F` for a group.
    pub fn frobenius_drift(&self, g: WeightGroup) -> f64 {
        self.group(g)
            .sub(self.init_group(g))
            .expect("snapshot shares shape")
            .frobenius_norm()
    }

    /// Drift relative to the initial Frobenius norm. Returns `NaN` when the
    /// initial norm is zero (e.g. sigma group at sigma0 = 0).
    pub fn relative_drift(&self, g: WeightGroup) -> f64 {
        let base = self.init_group(g).frobenius_norm();
        self.frobenius_drift(g) / base
    }

    /// Largest per-row drift `max_r ‖w_r(t) − w_r(0)‖_2`.
    pub fn max_row_drift(&self, g: WeightGroup) -> f64 {
        let now = self.group(g);
        let init = self.init_group(g);
        (0..now.rows())
            .map(|r| {
                now.row(r)
                    .iter()
                    .zip(init.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0_f64, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.w_mu.all_finite() && self.w_sigma.all_finite() && self.w_d.all_finite()
    }
}

/// Per-group gradients, shaped like the corresponding weights.
#[derive(Debug, Clone)]
pub struct GradParams {
    pub g_mu: Matrix,
    pub g_sigma: Matrix,
    pub g_d: Matrix,
}

impl GradParams {
    pub fn zeros(m: usize, d: usize) -> Self {
        GradParams {
            g_mu: Matrix::zeros(m, d),
            g_sigma: Matrix::zeros(m, d),
            g_d: Matrix::zeros(m, d),
        }
    }

    pub fn group(&self, g: WeightGroup) -> &Matrix {
        match g {
            WeightGroup::Mu => &self.g_mu,
            WeightGroup::Sigma => &self.g_sigma,
            WeightGroup::Decoder => &self.g_d,
        }
    }

    pub fn group_mut(&mut self, g: WeightGroup) -> &mut Matrix {
        match g {
            WeightGroup::Mu => &mut self.g_mu,
            WeightGroup::Sigma => &mut self.g_sigma,
            WeightGroup::Decoder => &mut self.g_d,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.g_mu.all_finite() && self.g_sigma.all_finite() && self.g_d.all_finite()
    }

    /// Squared Euclidean norm across all three groups.
    pub fn norm_sq(&self) -> f64 {
        let f = |m: &Matrix| m.frobenius_norm().powi(2);
        f(&self.g_mu) + f(&self.g_sigma) + f(&self.g_d)
    }
}

/// Stream tags for the two Gaussian weight groups at initialization.
const MU_INIT_TAG: u64 = 0;
const DECODER_INIT_TAG: u64 = 2;

/// Draws `W_mu, W_d ~ N(0,1)` entrywise and sets every variance weight to
/// `sigma0`, capturing the creation snapshot.
pub fn init_params(cfg: &SnnConfig, stream: &RngStream) -> SnnParams {
    let w_mu = stream.child(MU_INIT_TAG).gaussian_matrix(cfg.m, cfg.d);
    let w_d = stream.child(DECODER_INIT_TAG).gaussian_matrix(cfg.m, cfg.d);
    let w_sigma = Matrix::from_fn(cfg.m, cfg.d, |_, _| cfg.sigma0);
    SnnParams {
        init_w_mu: w_mu.clone(),
        init_w_sigma: w_sigma.clone(),
        init_w_d: w_d.clone(),
        w_mu,
        w_sigma,
        w_d,
        seed_provenance: (stream.master_seed, stream.stream_id),
    }
}

fn check_zeta_shape(params: &SnnParams, x_e: &[f64], zeta: &Matrix) -> Result<()> {
    let (m, d) = (params.width(), params.dim());
    if x_e.len() != d || zeta.rows() != m || zeta.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "reparam_latent",
            left_rows: m,
            left_cols: d,
            right_rows: zeta.rows(),
            right_cols: zeta.cols(),
        });
    }
    Ok(())
}

/// `z = W_mu x + (W_sigma ⊙ ζ) x` for one explicit noise draw.
pub fn reparam_latent(params: &SnnParams, x_e: &[f64], zeta: &Matrix) -> Result<Vec<f64>> {
    check_zeta_shape(params, x_e, zeta)?;
    let m = params.width();
    let d = params.dim();
    let mut z = vec![0.0; m];
    for r in 0..m {
        let wm = params.w_mu.row(r);
        let ws = params.w_sigma.row(r);
        let zr = zeta.row(r);
        let mut acc = 0.0;
        for l in 0..d {
            acc += (wm[l] + ws[l] * zr[l]) * x_e[l];
        }
        z[r] = acc;
    }
    Ok(z)
}

/// One-draw network output `f = (1/sqrt(m)) W_d^T ψ(σ(z))`.
pub fn forward_sample(
    params: &SnnParams,
    cfg: &SnnConfig,
    x_e: &[f64],
    zeta: &Matrix,
) -> Result<Vec<f64>> {
    let z = reparam_latent(params, x_e, zeta)?;
    let m = params.width();
    let d = params.dim();
    let scale = 1.0 / (m as f64).sqrt();
    let mut out = vec![0.0; d];
    for (r, &zr) in z.iter().enumerate() {
        let a = cfg.decoder_rep.eval(cfg.activation.eval(zr));
        let wd = params.w_d.row(r);
        for k in 0..d {
            out[k] += wd[k] * a;
        }
    }
    for o in &mut out {
        *o *= scale;
    }
    Ok(out)
}

/// Monte Carlo factors of one input: the expected output together with the
/// per-unit expectations that assemble every per-group gradient.
#[derive(Debug, Clone)]
pub struct McEval {
    /// `f̂(x)`, length d.
    pub f_hat: Vec<f64>,
    /// `E[ψ'σ'(z_r)]`, length m.
    pub g: Vec<f64>,
    /// `E[ψ'σ'(z_r) ζ_r]`, m×d.
    pub h: Matrix,
    /// `E[ψ(σ(z_r))]`, length m.
    pub p: Vec<f64>,
}

fn mc_pass(
    params: &SnnParams,
    cfg: &SnnConfig,
    x_e: &[f64],
    stream: &RngStream,
    with_factors: bool,
) -> Result<McEval> {
    cfg.validate()?;
    let m = params.width();
    let d = params.dim();
    if x_e.len() != d {
        return Err(Error::ShapeMismatch {
            op: "mc_eval",
            left_rows: m,
            left_cols: d,
            right_rows: x_e.len(),
            right_cols: 1,
        });
    }

    let (n_draws, signs) = cfg.draw_plan();
    let total = (n_draws * signs.len()) as f64;

    let mean: Vec<f64> = (0..m).map(|r| dot(params.w_mu.row(r), x_e)).collect();

    let mut p = vec![0.0; m];
    let mut g = vec![0.0; m];
    let mut h = Matrix::zeros(if with_factors { m } else { 0 }, d);
    let mut zeta = vec![0.0; m * d];

    for s in 0..n_draws {
        let mut zs = stream.child(s as u64);
        zs.fill_gaussian(&mut zeta);
        for &sign in signs {
            for r in 0..m {
                let ws = params.w_sigma.row(r);
                let zrow = &zeta[r * d..(r + 1) * d];
                let mut noise = 0.0;
                for l in 0..d {
                    noise += ws[l] * zrow[l] * x_e[l];
                }
                let z = mean[r] + sign * noise;
                let sz = cfg.activation.eval(z);
                p[r] += cfg.decoder_rep.eval(sz);
                if with_factors {
                    let chain = cfg.decoder_rep.deriv(sz) * cfg.activation.deriv(z);
                    g[r] += chain;
                    let hr = h.row_mut(r);
                    for l in 0..d {
                        hr[l] += chain * sign * zrow[l];
                    }
                }
            }
        }
    }

    for v in p.iter_mut() {
        *v /= total;
    }
    if with_factors {
        for v in g.iter_mut() {
            *v /= total;
        }
        let inv = 1.0 / total;
        for v in h.as_mut_slice() {
            *v *= inv;
        }
    }

    let scale = 1.0 / (m as f64).sqrt();
    let mut f_hat = vec![0.0; d];
    for r in 0..m {
        let wd = params.w_d.row(r);
        let pr = p[r];
        for k in 0..d {
            f_hat[k] += wd[k] * pr;
        }
    }
    for v in &mut f_hat {
        *v *= scale;
    }

    Ok(McEval { f_hat, g, h, p })
}

/// Full Monte Carlo pass: expected output plus gradient factors, all from
/// the same ζ draws (common random numbers).
pub fn mc_eval(
    params: &SnnParams,
    cfg: &SnnConfig,
    x_e: &[f64],
    stream: &RngStream,
) -> Result<McEval> {
    mc_pass(params, cfg, x_e, stream, true)
}

/// `f̂(x) = E_ζ[f(x, ζ)]` by Monte Carlo. Deterministic in the stream; uses
/// the same per-draw child streams as [`mc_eval`].
pub fn expected_output(
    params: &SnnParams,
    cfg: &SnnConfig,
    x_e: &[f64],
    stream: &RngStream,
) -> Result<Vec<f64>> {
    Ok(mc_pass(params, cfg, x_e, stream, false)?.f_hat)
}

/// Per-group Jacobian of `f̂` at one input, kept in factorized form with
/// materializers for the full tensors.
#[derive(Debug, Clone)]
pub struct OutputGradients {
    pub x_e: Vec<f64>,
    pub eval: McEval,
}

impl OutputGradients {
    /// `∂f̂_k/∂W_mu`, an m×d matrix for output coordinate k.
    pub fn jac_mu(&self, params: &SnnParams, k: usize) -> Matrix {
        let m = params.width();
        let d = params.dim();
        let scale = 1.0 / (m as f64).sqrt();
        Matrix::from_fn(m, d, |r, l| {
            scale * params.w_d.get(r, k) * self.eval.g[r] * self.x_e[l]
        })
    }

    /// `∂f̂_k/∂W_sigma`.
    pub fn jac_sigma(&self, params: &SnnParams, k: usize) -> Matrix {
        let m = params.width();
        let d = params.dim();
        let scale = 1.0 / (m as f64).sqrt();
        Matrix::from_fn(m, d, |r, l| {
            scale * params.w_d.get(r, k) * self.eval.h.get(r, l) * self.x_e[l]
        })
    }

    /// `∂f̂_k/∂W_d` (nonzero only in column k).
    pub fn jac_d(&self, params: &SnnParams, k: usize) -> Matrix {
        let m = params.width();
        let d = params.dim();
        let scale = 1.0 / (m as f64).sqrt();
        Matrix::from_fn(m, d, |r, l| {
            if l == k {
                scale * self.eval.p[r]
            } else {
                0.0
            }
        })
    }
}

/// Jacobian of the expected output via one MC pass.
pub fn output_gradients(
    params: &SnnParams,
    cfg: &SnnConfig,
    x_e: &[f64],
    stream: &RngStream,
) -> Result<OutputGradients> {
    Ok(OutputGradients {
        x_e: x_e.to_vec(),
        eval: mc_eval(params, cfg, x_e, stream)?,
    })
}

/// Compares the analytic loss gradient against central finite differences of
/// the loss, with common random numbers on all evaluations. Returns the
/// worst sampled error, scaled by the largest gradient magnitude (coordinates
/// near sign crossings would otherwise divide by ~0).
///
/// Samples roughly 1% of the coordinates, with a floor of 30 per group.
pub fn finite_diff_check(
    params: &SnnParams,
    cfg: &SnnConfig,
    dataset: &crate::dataset::Dataset,
    objective: &crate::train::ObjectiveSpec,
    step: f64,
    stream: &RngStream,
) -> Result<f64> {
    if !(1e-7..=1e-2).contains(&step) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {step} outside [1e-7, 1e-2]"
        )));
    }
    let grad = crate::train::loss_gradient(params, cfg, dataset, objective, stream)?;
    let m = params.width();
    let d = params.dim();
    let coords = m * d;
    let per_group = ((coords / 100).max(30)).min(coords);

    let gmax = [&grad.g_mu, &grad.g_sigma, &grad.g_d]
        .iter()
        .map(|g| g.max_abs())
        .fold(0.0_f64, f64::max)
        .max(1e-12);

    let mut pick = stream.child(0xFD);
    let mut worst = 0.0_f64;
    for group in WeightGroup::ALL {
        for _ in 0..per_group {
            let r = (pick.next_uniform() * m as f64) as usize % m;
            let l = (pick.next_uniform() * d as f64) as usize % d;

            let eval_at = |delta: f64| -> Result<f64> {
                let mut perturbed = params.clone();
                let w = perturbed.group_mut(group);
                let old = w.get(r, l);
                w.set(r, l, old + delta);
                crate::train::loss_value(&perturbed, cfg, dataset, objective, stream)
            };
            let fd = (eval_at(step)? - eval_at(-step)?) / (2.0 * step);
            let an = grad.group(group).get(r, l);
            worst = worst.max((fd - an).abs() / gmax);
        }
    }
    Ok(worst)
}
