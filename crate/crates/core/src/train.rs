//! Objectives and full-batch gradient descent.
//!
//! Gradient flow is realized as small-step Euler: flow time is `step · eta`,
//! which is what the convergence-bound exponent consumes. ζ draws are
//! resampled every step (`stream.child(step)`), matching the expectation
//! semantics of the trained objective; within a step the loss, the gradient
//! and any kernel snapshot share one set of draws.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ntk::{empirical_ntk_from_factors, sample_factors, KernelBlocks};
use crate::numerics::{dot, fit_loglog_slope, RngStream};
use crate::snn::{expected_output, GradParams, McEval, SnnConfig, SnnParams, WeightGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Mse,
    MsePlusKlSurrogate,
    MsePlusExactKl,
}

/// Training objective. `beta = 0` reduces every kind to plain MSE.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub beta: f64,
}

impl ObjectiveSpec {
    pub fn mse() -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::Mse,
            beta: 0.0,
        }
    }

    pub fn kl_surrogate(beta: f64) -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::MsePlusKlSurrogate,
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "KL weight beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    fn effective_beta(&self) -> f64 {
        match self.kind {
            ObjectiveKind::Mse => 0.0,
            _ => self.beta,
        }
    }
}

/// Per-group freeze flags; `true` keeps the group bit-identical through
/// training.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct FreezeMask {
    pub mu: bool,
    pub sigma: bool,
    pub d: bool,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask::default()
    }

    /// Only the mean weights move (σ and decoder frozen).
    pub fn mu_only() -> Self {
        FreezeMask {
            mu: false,
            sigma: true,
            d: true,
        }
    }

    pub fn frozen(&self, g: WeightGroup) -> bool {
        match g {
            WeightGroup::Mu => self.mu,
            WeightGroup::Sigma => self.sigma,
            WeightGroup::Decoder => self.d,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub freeze: FreezeMask,
    /// Record cadence in steps; the initial and final states are always
    /// recorded.
    pub record_every: usize,
    /// Kernel snapshot cadence in steps; 0 disables snapshots.
    pub kernel_snapshot_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {}",
                self.eta
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be >= 1".into()));
        }
        if self.freeze.mu && self.freeze.sigma && self.freeze.d {
            return Err(Error::InvalidConfig(
                "at least one weight group must be trainable".into(),
            ));
        }
        Ok(())
    }
}

/// Trajectory record: losses, drifts and kernel snapshots over flow time.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub width: usize,
    pub eta: f64,
    pub steps: Vec<usize>,
    /// Flow times `step · eta`, strictly increasing.
    pub times: Vec<f64>,
    pub loss_mse: Vec<f64>,
    pub loss_total: Vec<f64>,
    /// Absolute Frobenius drift `‖W(t) − W(0)‖_F` per group, indexed like
    /// [`WeightGroup::ALL`].
    pub drift_frob: [Vec<f64>; 3],
    /// `max_r ‖w_r(t) − w_r(0)‖_2` per group.
    pub drift_row_max: [Vec<f64>; 3],
    /// `‖W(0)‖_F` per group, for relative drift.
    pub init_norms: [f64; 3],
    pub kernel_snapshots: Vec<(usize, KernelBlocks)>,
    /// Least eigenvalue of the empirical total kernel at initialization.
    pub lambda0_init: f64,
    /// Step at which a non-finite loss aborted the run, if any; the record
    /// holds everything up to the last good step.
    pub aborted_at: Option<usize>,
}

impl TrainRecord {
    pub fn final_relative_drift(&self, g: WeightGroup) -> f64 {
        let idx = group_index(g);
        let init = self.init_norms[idx];
        self.drift_frob[idx].last().copied().unwrap_or(0.0) / init
    }

    pub fn final_flow_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// CSV trajectory: `step,flow_time,loss_mse,loss_total,drift_mu,drift_sigma,drift_d`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,flow_time,loss_mse,loss_total,drift_mu,drift_sigma,drift_d\n");
        for i in 0..self.steps.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.steps[i],
                self.times[i],
                self.loss_mse[i],
                self.loss_total[i],
                self.drift_frob[0][i],
                self.drift_frob[1][i],
                self.drift_frob[2][i],
            ));
        }
        out
    }
}

fn group_index(g: WeightGroup) -> usize {
    match g {
        WeightGroup::Mu => 0,
        WeightGroup::Sigma => 1,
        WeightGroup::Decoder => 2,
    }
}

/// `(β/2) ‖W_mu(t) − W_mu(0)‖_F²`, the trained stand-in for the KL term
/// under frozen variance weights.
pub fn kl_surrogate(params: &SnnParams, beta: f64) -> f64 {
    let drift = params.frobenius_drift(WeightGroup::Mu);
    0.5 * beta * drift * drift
}

/// Exact KL divergence between the latent Gaussians now and at creation,
/// summed over samples and latent coordinates. Diagnostic only; the trained
/// penalty is [`kl_surrogate`].
pub fn exact_gaussian_kl(params: &SnnParams, ds: &Dataset) -> Result<f64> {
    let m = params.width();
    let mut total = 0.0;
    for i in 0..ds.n() {
        let x = ds.encoded().row(i);
        for r in 0..m {
            let mu1 = dot(params.w_mu().row(r), x);
            let mu0 = dot(params.init_w_mu().row(r), x);
            let var = |row: &[f64]| -> f64 {
                row.iter()
                    .zip(x)
                    .map(|(w, xl)| (w * xl) * (w * xl))
                    .sum()
            };
            let v1 = var(params.w_sigma().row(r));
            let v0 = var(params.init_w_sigma().row(r));
            if v0 <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "prior variance is zero at sample {i}, unit {r}; KL undefined"
                )));
            }
            if v1 <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "posterior variance is zero at sample {i}, unit {r}; KL undefined"
                )));
            }
            total += 0.5 * ((v0 / v1).ln() + (v1 + (mu1 - mu0) * (mu1 - mu0)) / v0 - 1.0);
        }
    }
    Ok(total)
}

/// Penalty term of the objective at the current weights.
fn penalty(params: &SnnParams, ds: &Dataset, obj: &ObjectiveSpec) -> Result<f64> {
    match obj.kind {
        ObjectiveKind::Mse => Ok(0.0),
        ObjectiveKind::MsePlusKlSurrogate => Ok(kl_surrogate(params, obj.beta)),
        ObjectiveKind::MsePlusExactKl => {
            Ok(obj.beta / ds.n() as f64 * exact_gaussian_kl(params, ds)?)
        }
    }
}

/// Mean squared error `1/(2n) Σ ‖f̂(x_i) − y_i‖²` with `f̂` estimated on
/// `stream.child(i)` per sample.
pub fn loss_mse(
    params: &SnnParams,
    cfg: &SnnConfig,
    ds: &Dataset,
    stream: &RngStream,
) -> Result<f64> {
    let preds: Vec<Result<Vec<f64>>> = (0..ds.n())
        .into_par_iter()
        .map(|i| expected_output(params, cfg, ds.encoded().row(i), &stream.child(i as u64)))
        .collect();
    let mut acc = 0.0;
    for (i, p) in preds.into_iter().enumerate() {
        let p = p?;
        let y = ds.targets().row(i);
        acc += p
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(acc / (2.0 * ds.n() as f64))
}

/// Full objective value (MSE plus the configured penalty), common random
/// numbers with [`loss_mse`] and [`loss_gradient`] when given the same stream.
pub fn loss_value(
    params: &SnnParams,
    cfg: &SnnConfig,
    ds: &Dataset,
    obj: &ObjectiveSpec,
    stream: &RngStream,
) -> Result<f64> {
    Ok(loss_mse(params, cfg, ds, stream)? + penalty(params, ds, obj)?)
}

/// MSE and gradient assembled from per-sample factors; used by both the
/// public gradient op and the training loop so the two can never drift.
fn mse_and_gradient_from_factors(
    params: &SnnParams,
    ds: &Dataset,
    evals: &[McEval],
    obj: &ObjectiveSpec,
) -> Result<(f64, GradParams)> {
    let n = ds.n();
    let d = ds.dim();
    let m = params.width();
    let coeff = 1.0 / (n as f64 * (m as f64).sqrt());

    let mut grad = GradParams::zeros(m, d);
    let mut mse = 0.0;
    for (i, eval) in evals.iter().enumerate() {
        let x = ds.encoded().row(i);
        let y = ds.targets().row(i);
        let res: Vec<f64> = eval.f_hat.iter().zip(y).map(|(a, b)| a - b).collect();
        mse += res.iter().map(|v| v * v).sum::<f64>();

        for r in 0..m {
            let dres = dot(params.w_d().row(r), &res);
            let gi = eval.g[r];
            let hrow = eval.h.row(r);
            let pr = eval.p[r];
            let gm = grad.g_mu.row_mut(r);
            for l in 0..d {
                gm[l] += coeff * gi * dres * x[l];
            }
            let gs = grad.g_sigma.row_mut(r);
            for l in 0..d {
                gs[l] += coeff * hrow[l] * dres * x[l];
            }
            let gd = grad.g_d.row_mut(r);
            for (k, &rk) in res.iter().enumerate() {
                gd[k] += coeff * pr * rk;
            }
        }
    }
    mse /= 2.0 * n as f64;

    match obj.kind {
        ObjectiveKind::Mse => {}
        ObjectiveKind::MsePlusKlSurrogate => {
            let beta = obj.effective_beta();
            if beta > 0.0 {
                let delta = params
                    .w_mu()
                    .sub(params.init_w_mu())
                    .expect("snapshot shares shape");
                for (g, d) in grad
                    .g_mu
                    .as_mut_slice()
                    .iter_mut()
                    .zip(delta.as_slice())
                {
                    *g += beta * d;
                }
            }
        }
        ObjectiveKind::MsePlusExactKl => {
            return Err(Error::InvalidConfig(
                "the exact Gaussian KL is a diagnostic; train on mse-plus-kl-surrogate".into(),
            ));
        }
    }
    Ok((mse, grad))
}

/// Gradient of the objective at the current weights, common random numbers
/// with [`loss_mse`] (same per-sample child streams).
pub fn loss_gradient(
    params: &SnnParams,
    cfg: &SnnConfig,
    ds: &Dataset,
    obj: &ObjectiveSpec,
    stream: &RngStream,
) -> Result<GradParams> {
    obj.validate()?;
    let evals = sample_factors(params, cfg, ds.encoded(), stream)?;
    Ok(mse_and_gradient_from_factors(params, ds, &evals, obj)?.1)
}

/// Full-batch gradient descent. Records the trajectory at the configured
/// cadence (always including the initial and final states) and snapshots the
/// empirical kernel from the same draws as the step's gradient.
pub fn train(
    params: &mut SnnParams,
    cfg: &SnnConfig,
    ds: &Dataset,
    obj: &ObjectiveSpec,
    tcfg: &TrainConfig,
    stream: &RngStream,
) -> Result<TrainRecord> {
    cfg.validate()?;
    obj.validate()?;
    tcfg.validate()?;
    if ds.dim() != cfg.d {
        return Err(Error::InvalidConfig(format!(
            "dataset dimension {} does not match network dimension {}",
            ds.dim(),
            cfg.d
        )));
    }

    let mut record = TrainRecord {
        width: params.width(),
        eta: tcfg.eta,
        steps: Vec::new(),
        times: Vec::new(),
        loss_mse: Vec::new(),
        loss_total: Vec::new(),
        drift_frob: [Vec::new(), Vec::new(), Vec::new()],
        drift_row_max: [Vec::new(), Vec::new(), Vec::new()],
        init_norms: [
            params.init_w_mu().frobenius_norm(),
            params.init_w_sigma().frobenius_norm(),
            params.init_w_d().frobenius_norm(),
        ],
        kernel_snapshots: Vec::new(),
        lambda0_init: f64::NAN,
        aborted_at: None,
    };

    for step in 0..=tcfg.steps {
        let step_stream = stream.child(step as u64);
        let evals = sample_factors(params, cfg, ds.encoded(), &step_stream)?;
        let (mse, grad) = mse_and_gradient_from_factors(params, ds, &evals, obj)?;
        let total = mse + penalty(params, ds, obj)?;

        if !total.is_finite() || !grad.all_finite() {
            record.aborted_at = Some(step);
            return Ok(record);
        }

        let snapshot_due = tcfg.kernel_snapshot_every > 0
            && (step % tcfg.kernel_snapshot_every == 0 || step == tcfg.steps);
        if step == 0 || snapshot_due {
            let kernel = empirical_ntk_from_factors(params, ds.encoded(), &evals);
            if step == 0 {
                record.lambda0_init = kernel.lambda0()?;
            }
            if snapshot_due {
                record.kernel_snapshots.push((step, kernel));
            }
        }

        if step % tcfg.record_every == 0 || step == tcfg.steps {
            record.steps.push(step);
            record.times.push(step as f64 * tcfg.eta);
            record.loss_mse.push(mse);
            record.loss_total.push(total);
            for g in WeightGroup::ALL {
                let idx = group_index(g);
                record.drift_frob[idx].push(params.frobenius_drift(g));
                record.drift_row_max[idx].push(params.max_row_drift(g));
            }
        }

        if step == tcfg.steps {
            break;
        }
        for g in WeightGroup::ALL {
            if tcfg.freeze.frozen(g) {
                continue;
            }
            let gm = grad.group(g);
            let w = params.group_mut(g);
            for (wv, gv) in w.as_mut_slice().iter_mut().zip(gm.as_slice()) {
                *wv -= tcfg.eta * gv;
            }
        }
    }
    Ok(record)
}

/// Violations of `L(t) ≤ slack · exp(−λ0 t / n) · L(0)` over the recorded
/// trajectory, with the worst multiplicative excess over the raw envelope.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundReport {
    pub violations: usize,
    pub max_excess: f64,
}

pub fn convergence_bound_report(record: &TrainRecord, n: usize, slack: f64) -> BoundReport {
    convergence_bound_report_with_lambda(record, n, slack, record.lambda0_init)
}

/// Same check against an externally supplied rate constant. The theorem's
/// rate is a property of the limiting kernel, so a negative control at tiny
/// width is judged against the wide-width value rather than its own
/// collapsed spectrum.
pub fn convergence_bound_report_with_lambda(
    record: &TrainRecord,
    n: usize,
    slack: f64,
    lambda0: f64,
) -> BoundReport {
    let l0 = record.loss_mse.first().copied().unwrap_or(f64::NAN);
    let mut violations = 0;
    let mut max_excess = 0.0_f64;
    for (t, loss) in record.times.iter().zip(&record.loss_mse) {
        let envelope = (-(lambda0 / n as f64) * t).exp() * l0;
        let excess = loss / envelope;
        max_excess = max_excess.max(excess);
        if *loss > slack * envelope {
            violations += 1;
        }
    }
    BoundReport {
        violations,
        max_excess,
    }
}

/// Checks the loss-rate identity `dL/dt = −(1/n²) rᵀ Θ(t) r` (pure MSE):
/// the directional derivative of the loss along its own gradient, measured
/// by central differences with common random numbers, against the kernel
/// quadratic form from the same draws. Returns the relative error.
pub fn loss_rate_identity_check(
    params: &SnnParams,
    cfg: &SnnConfig,
    ds: &Dataset,
    stream: &RngStream,
) -> Result<f64> {
    let obj = ObjectiveSpec::mse();
    let evals = sample_factors(params, cfg, ds.encoded(), stream)?;
    let (_, grad) = mse_and_gradient_from_factors(params, ds, &evals, &obj)?;
    let kernel = empirical_ntk_from_factors(params, ds.encoded(), &evals);

    // vec(residual) with layout i*d + k
    let n = ds.n();
    let d = ds.dim();
    let mut r = vec![0.0; n * d];
    for (i, eval) in evals.iter().enumerate() {
        let y = ds.targets().row(i);
        for k in 0..d {
            r[i * d + k] = eval.f_hat[k] - y[k];
        }
    }
    let theta = kernel.total();
    let quad = {
        let tr = theta.matvec(&r)?;
        dot(&r, &tr) / (n as f64 * n as f64)
    };

    let gnorm = grad.norm_sq().sqrt();
    // identity activations make the loss exactly quadratic in the weights;
    // central differences then carry no truncation error and a large step
    // only suppresses roundoff
    let quadratic = cfg.activation == crate::snn::ActivationKind::Identity
        && cfg.decoder_rep == crate::snn::ActivationKind::Identity;
    let base_step = if quadratic { 1e-1 } else { 1e-3 };
    let eps = base_step / gnorm.max(1.0);
    let eval_shifted = |sign: f64| -> Result<f64> {
        let mut shifted = params.clone();
        for g in WeightGroup::ALL {
            let gm = grad.group(g);
            let w = shifted.group_mut(g);
            for (wv, gv) in w.as_mut_slice().iter_mut().zip(gm.as_slice()) {
                *wv += sign * eps * gv;
            }
        }
        loss_mse(&shifted, cfg, ds, stream)
    };
    let fd = (eval_shifted(1.0)? - eval_shifted(-1.0)?) / (2.0 * eps);

    // along the gradient, dL/dt = −‖∇L‖² = −(1/n²) rᵀΘr
    Ok((fd - quad).abs() / quad.abs().max(1e-300))
}

/// One width's row in the drift table.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DriftRow {
    pub width: usize,
    pub flow_time: f64,
    /// Relative Frobenius drift per group (mu, sigma, d).
    pub relative: [f64; 3],
    /// Max per-row drift per group.
    pub row_max: [f64; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    /// Fitted log-log slope of relative drift vs width, per group; absent
    /// with fewer than three widths.
    pub slopes: [Option<f64>; 3],
}

/// Drift table over a width sweep. Records must be trained to the same flow
/// time on the same dataset/seed family; widths must be distinct.
pub fn weight_drift_report(records: &[&TrainRecord]) -> Result<DriftReport> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("no records to report on".into()));
    }
    let t0 = records[0].final_flow_time();
    for r in records {
        if (r.final_flow_time() - t0).abs() > 1e-9 * t0.abs().max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "records trained to different flow times: {} vs {}",
                r.final_flow_time(),
                t0
            )));
        }
    }
    let mut rows: Vec<DriftRow> = records
        .iter()
        .map(|r| DriftRow {
            width: r.width,
            flow_time: r.final_flow_time(),
            relative: [
                r.final_relative_drift(WeightGroup::Mu),
                r.final_relative_drift(WeightGroup::Sigma),
                r.final_relative_drift(WeightGroup::Decoder),
            ],
            row_max: [
                r.drift_row_max[0].last().copied().unwrap_or(0.0),
                r.drift_row_max[1].last().copied().unwrap_or(0.0),
                r.drift_row_max[2].last().copied().unwrap_or(0.0),
            ],
        })
        .collect();
    rows.sort_by_key(|r| r.width);

    let slope_for = |idx: usize| {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.width as f64, r.relative[idx]))
            .collect();
        fit_loglog_slope(&pts)
    };
    Ok(DriftReport {
        slopes: [slope_for(0), slope_for(1), slope_for(2)],
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_dataset;
    use crate::numerics::Matrix;
    use crate::snn::{init_params, ActivationKind};

    fn cfg(act: ActivationKind, sigma0: f64, m: usize, d: usize, s: usize) -> SnnConfig {
        SnnConfig {
            d,
            m,
            sigma0,
            activation: act,
            decoder_rep: act,
            mc_samples: s,
            antithetic: true,
        }
    }

    fn tcfg(eta: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            eta,
            steps,
            freeze: FreezeMask::none(),
            record_every: 1,
            kernel_snapshot_every: 0,
        }
    }

    #[test]
    fn loss_zero_when_targets_equal_predictions() {
        let c = cfg(ActivationKind::Identity, 0.0, 8, 3, 2);
        let params = init_params(&c, &RngStream::new(1, 0));
        let ds = synth_dataset(4, 0, 3, &RngStream::new(2, 0), 1e-8).unwrap();
        let stream = RngStream::new(3, 0);
        // build a dataset whose targets are exactly the predictions
        let preds: Vec<Vec<f64>> = (0..ds.n())
            .map(|i| {
                expected_output(&params, &c, ds.encoded().row(i), &stream.child(i as u64))
                    .unwrap()
            })
            .collect();
        let ds2 = ds.with_targets(Matrix::from_rows(&preds).unwrap()).unwrap();
        let l = loss_mse(&params, &c, &ds2, &stream).unwrap();
        assert!(l.abs() < 1e-28);
    }

    #[test]
    fn zero_network_loss_is_half_under_unit_targets() {
        let c = cfg(ActivationKind::Tanh, 0.2, 16, 4, 4);
        let mut params = init_params(&c, &RngStream::new(5, 0));
        *params.group_mut(WeightGroup::Decoder) = Matrix::zeros(16, 4);
        let ds = synth_dataset(6, 0, 4, &RngStream::new(7, 0), 1e-8).unwrap();
        let l = loss_mse(&params, &c, &ds, &RngStream::new(9, 0)).unwrap();
        assert!((l - 0.5).abs() < 1e-12, "W_d = 0 gives (1/2n)Σ‖x_i‖² = 1/2, got {l}");
    }

    #[test]
    fn loss_matches_external_recomputation_same_stream() {
        let c = cfg(ActivationKind::Tanh, 0.3, 64, 4, 8);
        let params = init_params(&c, &RngStream::new(11, 0));
        let ds = synth_dataset(4, 0, 4, &RngStream::new(13, 0), 1e-8).unwrap();
        let stream = RngStream::new(17, 0);
        let l = loss_mse(&params, &c, &ds, &stream).unwrap();
        // recompute from raw per-sample outputs
        let mut acc = 0.0;
        for i in 0..ds.n() {
            let f = expected_output(&params, &c, ds.encoded().row(i), &stream.child(i as u64))
                .unwrap();
            let y = ds.targets().row(i);
            acc += f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        assert_eq!(l, acc / (2.0 * ds.n() as f64), "same stream must reproduce exactly");
    }

    #[test]
    fn kl_surrogate_hand_case() {
        let c = cfg(ActivationKind::Identity, 0.1, 4, 2, 2);
        let mut params = init_params(&c, &RngStream::new(19, 0));
        assert_eq!(kl_surrogate(&params, 0.5), 0.0, "zero at t = 0");
        // perturbation with ‖E‖_F = 2: four entries of 1
        for r in 0..4 {
            for l in 0..2 {
                if r < 2 {
                    let v = params.w_mu().get(r, l) + 1.0;
                    params.group_mut(WeightGroup::Mu).set(r, l, v);
                }
            }
        }
        assert!((kl_surrogate(&params, 0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_surrogate_gradient_by_finite_difference() {
        let c = cfg(ActivationKind::Identity, 0.2, 6, 3, 2);
        let mut params = init_params(&c, &RngStream::new(23, 0));
        let shift = RngStream::new(29, 0).gaussian_vec(18);
        for (idx, dv) in shift.iter().enumerate() {
            let (r, l) = (idx / 3, idx % 3);
            let v = params.w_mu().get(r, l) + 0.1 * dv;
            params.group_mut(WeightGroup::Mu).set(r, l, v);
        }
        let beta = 0.7;
        // analytic gradient β (W(t) − W(0)); test entry (1,2)
        let analytic = beta * (params.w_mu().get(1, 2) - params.init_w_mu().get(1, 2));
        let h = 1e-6;
        let eval = |delta: f64| {
            let mut p = params.clone();
            let v = p.w_mu().get(1, 2) + delta;
            p.group_mut(WeightGroup::Mu).set(1, 2, v);
            kl_surrogate(&p, beta)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((fd - analytic).abs() < 1e-9, "fd {fd} vs analytic {analytic}");
    }

    #[test]
    fn exact_kl_zero_at_init_and_textbook_shift() {
        let c = cfg(ActivationKind::Identity, 0.5, 3, 2, 2);
        let params = init_params(&c, &RngStream::new(31, 0));
        let ds = synth_dataset(2, 0, 2, &RngStream::new(37, 0), 1e-8).unwrap();
        assert_eq!(exact_gaussian_kl(&params, &ds).unwrap(), 0.0);

        // frozen sigma, mean shift δ in coordinate (0,·) for sample x:
        // KL gains δ²/(2 v) where δ is the latent mean shift and v the prior
        // variance of that unit
        let mut shifted = params.clone();
        let bump = 0.3;
        let v00 = shifted.w_mu().get(0, 0) + bump;
        shifted.group_mut(WeightGroup::Mu).set(0, 0, v00);
        let mut expected = 0.0;
        for i in 0..ds.n() {
            let x = ds.encoded().row(i);
            let delta = bump * x[0];
            let v: f64 = shifted
                .init_w_sigma()
                .row(0)
                .iter()
                .zip(x)
                .map(|(w, xl)| (w * xl) * (w * xl))
                .sum();
            expected += delta * delta / (2.0 * v);
        }
        let kl = exact_gaussian_kl(&shifted, &ds).unwrap();
        assert!((kl - expected).abs() < 1e-12, "kl {kl} vs textbook {expected}");
    }

    #[test]
    fn exact_kl_rejects_zero_prior_variance() {
        let c = cfg(ActivationKind::Identity, 0.0, 3, 2, 2);
        let params = init_params(&c, &RngStream::new(41, 0));
        let ds = synth_dataset(2, 0, 2, &RngStream::new(43, 0), 1e-8).unwrap();
        assert!(exact_gaussian_kl(&params, &ds).is_err());
    }

    #[test]
    fn exact_kl_matches_mc_log_ratio() {
        let c = cfg(ActivationKind::Identity, 0.6, 3, 2, 2);
        let params = init_params(&c, &RngStream::new(47, 0));
        let ds = synth_dataset(2, 0, 2, &RngStream::new(53, 0), 1e-8).unwrap();
        // random perturbation of mean and sigma weights
        let mut moved = params.clone();
        let mut noise = RngStream::new(59, 0);
        for g in [WeightGroup::Mu, WeightGroup::Sigma] {
            let w = moved.group_mut(g);
            for v in w.as_mut_slice() {
                *v += 0.15 * noise.next_gaussian();
            }
        }
        let analytic = exact_gaussian_kl(&moved, &ds).unwrap();

        // MC: KL = E_{z~P1}[ln p1 − ln p0] per (sample, unit), diagonal
        let mut mc = 0.0;
        let draws = 400_000;
        let mut zs = RngStream::new(61, 0);
        for i in 0..ds.n() {
            let x = ds.encoded().row(i);
            for r in 0..moved.width() {
                let mu1 = dot(moved.w_mu().row(r), x);
                let mu0 = dot(moved.init_w_mu().row(r), x);
                let v1: f64 = moved
                    .w_sigma()
                    .row(r)
                    .iter()
                    .zip(x)
                    .map(|(w, xl)| (w * xl) * (w * xl))
                    .sum();
                let v0: f64 = moved
                    .init_w_sigma()
                    .row(r)
                    .iter()
                    .zip(x)
                    .map(|(w, xl)| (w * xl) * (w * xl))
                    .sum();
                let mut acc = 0.0;
                for _ in 0..draws {
                    let z = mu1 + v1.sqrt() * zs.next_gaussian();
                    let ln_p1 = -0.5 * ((z - mu1) * (z - mu1) / v1 + v1.ln());
                    let ln_p0 = -0.5 * ((z - mu0) * (z - mu0) / v0 + v0.ln());
                    acc += ln_p1 - ln_p0;
                }
                mc += acc / draws as f64;
            }
        }
        assert!(
            (analytic - mc).abs() < 1e-2,
            "analytic {analytic} vs MC {mc}"
        );
    }

    #[test]
    fn zero_residual_beta_zero_gives_zero_gradient() {
        let c = cfg(ActivationKind::Tanh, 0.2, 12, 3, 4);
        let params = init_params(&c, &RngStream::new(67, 0));
        let ds = synth_dataset(3, 0, 3, &RngStream::new(71, 0), 1e-8).unwrap();
        let stream = RngStream::new(73, 0);
        let preds: Vec<Vec<f64>> = (0..ds.n())
            .map(|i| {
                expected_output(&params, &c, ds.encoded().row(i), &stream.child(i as u64))
                    .unwrap()
            })
            .collect();
        let ds2 = ds.with_targets(Matrix::from_rows(&preds).unwrap()).unwrap();
        let grad = loss_gradient(&params, &c, &ds2, &ObjectiveSpec::mse(), &stream).unwrap();
        assert!(grad.norm_sq() < 1e-26);
    }

    #[test]
    fn linear_gradient_matches_hand_derivation() {
        // identity activations, sigma0 = 0: f̂ = (1/√m) W_d^T W_mu x, and
        // the closed-form gradients are
        //   g_mu = (1/(n√m)) Σ_i W_d res_i x_iᵀ
        //   g_d  = (1/(n√m)) Σ_i W_mu x_i res_iᵀ
        let c = cfg(ActivationKind::Identity, 0.0, 8, 3, 2);
        let params = init_params(&c, &RngStream::new(79, 0));
        let ds = synth_dataset(5, 0, 3, &RngStream::new(83, 0), 1e-8).unwrap();
        let stream = RngStream::new(89, 0);
        let grad = loss_gradient(&params, &c, &ds, &ObjectiveSpec::mse(), &stream).unwrap();

        let m = 8;
        let d = 3;
        let scale = 1.0 / (ds.n() as f64 * (m as f64).sqrt());
        let mut hand_mu = Matrix::zeros(m, d);
        let mut hand_d = Matrix::zeros(m, d);
        for i in 0..ds.n() {
            let x = ds.encoded().row(i);
            let z = params.w_mu().matvec(x).unwrap();
            let f: Vec<f64> = (0..d)
                .map(|k| {
                    (0..m)
                        .map(|r| params.w_d().get(r, k) * z[r])
                        .sum::<f64>()
                        / (m as f64).sqrt()
                })
                .collect();
            let res: Vec<f64> = f
                .iter()
                .zip(ds.targets().row(i))
                .map(|(a, b)| a - b)
                .collect();
            for r in 0..m {
                let dres = dot(params.w_d().row(r), &res);
                for l in 0..d {
                    hand_mu.add_to(r, l, scale * dres * x[l]);
                }
                for (k, &rk) in res.iter().enumerate() {
                    hand_d.add_to(r, k, scale * z[r] * rk);
                }
            }
        }
        assert!(
            grad.g_mu.sub(&hand_mu).unwrap().max_abs() < 1e-12,
            "mu gradient deviates from hand derivation"
        );
        assert!(grad.g_d.sub(&hand_d).unwrap().max_abs() < 1e-12);
        assert_eq!(grad.g_sigma.max_abs(), 0.0);
    }

    #[test]
    fn eta_zero_is_a_recorded_noop() {
        let c = cfg(ActivationKind::Tanh, 0.2, 8, 3, 4);
        let mut params = init_params(&c, &RngStream::new(97, 0));
        let before = params.clone();
        let ds = synth_dataset(3, 0, 3, &RngStream::new(101, 0), 1e-8).unwrap();
        let record = train(
            &mut params,
            &c,
            &ds,
            &ObjectiveSpec::mse(),
            &tcfg(0.0, 5),
            &RngStream::new(103, 0),
        )
        .unwrap();
        assert_eq!(params.w_mu(), before.w_mu());
        assert_eq!(record.loss_mse.len(), 6);
        // flat loss trajectory: same weights, fresh draws each step, so
        // values agree within MC noise but the weights are untouched
        assert!(record.aborted_at.is_none());
    }

    #[test]
    fn all_frozen_rejected_at_validation() {
        let bad = TrainConfig {
            eta: 0.1,
            steps: 1,
            freeze: FreezeMask {
                mu: true,
                sigma: true,
                d: true,
            },
            record_every: 1,
            kernel_snapshot_every: 0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frozen_groups_stay_bit_identical() {
        let c = cfg(ActivationKind::Tanh, 0.3, 16, 3, 4);
        let mut params = init_params(&c, &RngStream::new(107, 0));
        let sigma_before = params.w_sigma().clone();
        let d_before = params.w_d().clone();
        let ds = synth_dataset(4, 0, 3, &RngStream::new(109, 0), 1e-8).unwrap();
        let t = TrainConfig {
            freeze: FreezeMask::mu_only(),
            ..tcfg(0.1, 25)
        };
        let record = train(
            &mut params,
            &c,
            &ds,
            &ObjectiveSpec::kl_surrogate(0.05),
            &t,
            &RngStream::new(113, 0),
        )
        .unwrap();
        assert_eq!(params.w_sigma(), &sigma_before, "frozen sigma must not move");
        assert_eq!(params.w_d(), &d_before, "frozen decoder must not move");
        assert!(params.frobenius_drift(WeightGroup::Mu) > 0.0);
        assert!(record.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn beta_zero_surrogate_equals_pure_mse_trajectory() {
        let c = cfg(ActivationKind::Tanh, 0.25, 12, 3, 4);
        let ds = synth_dataset(4, 0, 3, &RngStream::new(127, 0), 1e-8).unwrap();
        let stream = RngStream::new(131, 0);

        let mut p1 = init_params(&c, &RngStream::new(137, 0));
        let r1 = train(&mut p1, &c, &ds, &ObjectiveSpec::mse(), &tcfg(0.1, 10), &stream).unwrap();
        let mut p2 = init_params(&c, &RngStream::new(137, 0));
        let r2 = train(
            &mut p2,
            &c,
            &ds,
            &ObjectiveSpec::kl_surrogate(0.0),
            &tcfg(0.1, 10),
            &stream,
        )
        .unwrap();
        assert_eq!(p1.w_mu(), p2.w_mu(), "β=0 surrogate must match MSE exactly");
        assert_eq!(r1.loss_mse, r2.loss_mse);
        assert_eq!(r1.loss_total, r2.loss_total);
    }

    #[test]
    fn linear_training_matches_closed_form_recursion() {
        // identity activations, sigma0 = 0, β = 0: exact linear model
        //   f̂ = (1/√m) W_d^T W_mu x
        // run GD on the actual network and in a hand-rolled recursion on the
        // same weights; trajectories must agree to 1e-8.
        let c = cfg(ActivationKind::Identity, 0.0, 8, 3, 2);
        let mut params = init_params(&c, &RngStream::new(139, 0));
        let ds = synth_dataset(4, 0, 3, &RngStream::new(149, 0), 1e-8).unwrap();
        let eta = 0.2;
        let steps = 40;

        // independent closed-form recursion on copies of the weight matrices
        let m = 8;
        let d = 3;
        let scale = 1.0 / (m as f64).sqrt();
        let mut wm = params.w_mu().clone();
        let mut wd = params.w_d().clone();
        let mut closed_losses = Vec::new();
        for _ in 0..=steps {
            let mut loss = 0.0;
            let mut gm = Matrix::zeros(m, d);
            let mut gd = Matrix::zeros(m, d);
            for i in 0..ds.n() {
                let x = ds.encoded().row(i);
                let z = wm.matvec(x).unwrap();
                let f: Vec<f64> = (0..d)
                    .map(|k| scale * (0..m).map(|r| wd.get(r, k) * z[r]).sum::<f64>())
                    .collect();
                let res: Vec<f64> = f
                    .iter()
                    .zip(ds.targets().row(i))
                    .map(|(a, b)| a - b)
                    .collect();
                loss += res.iter().map(|v| v * v).sum::<f64>();
                for r in 0..m {
                    let dres = dot(wd.row(r), &res);
                    for l in 0..d {
                        gm.add_to(r, l, dres * x[l] / (ds.n() as f64 * (m as f64).sqrt()));
                    }
                    for (k, &rk) in res.iter().enumerate() {
                        gd.add_to(r, k, z[r] * rk / (ds.n() as f64 * (m as f64).sqrt()));
                    }
                }
            }
            closed_losses.push(loss / (2.0 * ds.n() as f64));
            wm = wm.sub(&gm.scale(eta)).unwrap();
            wd = wd.sub(&gd.scale(eta)).unwrap();
        }

        let record = train(
            &mut params,
            &c,
            &ds,
            &ObjectiveSpec::mse(),
            &tcfg(eta, steps),
            &RngStream::new(151, 0),
        )
        .unwrap();
        assert_eq!(record.loss_mse.len(), closed_losses.len());
        for (ours, closed) in record.loss_mse.iter().zip(&closed_losses) {
            assert!(
                (ours - closed).abs() <= 1e-8 * closed.max(1e-8),
                "trajectory deviates: {ours} vs {closed}"
            );
        }
    }

    #[test]
    fn bound_report_zero_lambda_counts_no_violation_for_decreasing_loss() {
        let record = TrainRecord {
            width: 4,
            eta: 0.1,
            steps: vec![0, 1, 2],
            times: vec![0.0, 0.1, 0.2],
            loss_mse: vec![1.0, 0.8, 0.7],
            loss_total: vec![1.0, 0.8, 0.7],
            drift_frob: [vec![], vec![], vec![]],
            drift_row_max: [vec![], vec![], vec![]],
            init_norms: [1.0, 1.0, 1.0],
            kernel_snapshots: vec![],
            lambda0_init: 0.0,
            aborted_at: None,
        };
        let rep = convergence_bound_report(&record, 4, 1.0);
        assert_eq!(rep.violations, 0);
        assert!((rep.max_excess - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_report_counts_violations() {
        let record = TrainRecord {
            width: 4,
            eta: 0.1,
            steps: vec![0, 1],
            times: vec![0.0, 10.0],
            loss_mse: vec![1.0, 0.9],
            loss_total: vec![1.0, 0.9],
            drift_frob: [vec![], vec![], vec![]],
            drift_row_max: [vec![], vec![], vec![]],
            init_norms: [1.0, 1.0, 1.0],
            kernel_snapshots: vec![],
            lambda0_init: 2.0,
            aborted_at: None,
        };
        // envelope at t=10: exp(-2*10/4) = exp(-5) ≈ 6.7e-3 << 0.9
        let rep = convergence_bound_report(&record, 4, 1.05);
        assert_eq!(rep.violations, 1);
        assert!(rep.max_excess > 100.0);
    }

    #[test]
    fn loss_rate_identity_exact_for_linear() {
        let c = cfg(ActivationKind::Identity, 0.0, 16, 4, 2);
        let params = init_params(&c, &RngStream::new(157, 0));
        let ds = synth_dataset(5, 0, 4, &RngStream::new(163, 0), 1e-8).unwrap();
        let err = loss_rate_identity_check(&params, &c, &ds, &RngStream::new(167, 0)).unwrap();
        assert!(err <= 1e-10, "linear-case identity should be exact, got {err}");
    }

    #[test]
    fn drift_report_zero_for_untrained() {
        let c = cfg(ActivationKind::Tanh, 0.2, 8, 3, 4);
        let ds = synth_dataset(3, 0, 3, &RngStream::new(173, 0), 1e-8).unwrap();
        let mut records = Vec::new();
        for (w, seed) in [(8usize, 1u64), (16, 2), (32, 3)] {
            let ci = SnnConfig { m: w, ..c };
            let mut p = init_params(&ci, &RngStream::new(seed, 0));
            let r = train(
                &mut p,
                &ci,
                &ds,
                &ObjectiveSpec::mse(),
                &tcfg(0.1, 0),
                &RngStream::new(seed, 1),
            )
            .unwrap();
            records.push(r);
        }
        let refs: Vec<&TrainRecord> = records.iter().collect();
        let report = weight_drift_report(&refs).unwrap();
        for row in &report.rows {
            assert_eq!(row.relative, [0.0, 0.0, 0.0]);
        }
        // zero drift: slope undefined (log of zero), reported absent
        assert!(report.slopes[0].is_none());
    }

    #[test]
    fn drift_report_needs_three_widths_for_slope() {
        let c = cfg(ActivationKind::Tanh, 0.2, 8, 3, 4);
        let ds = synth_dataset(3, 0, 3, &RngStream::new(179, 0), 1e-8).unwrap();
        let mut records = Vec::new();
        for (w, seed) in [(8usize, 1u64), (16, 2)] {
            let ci = SnnConfig { m: w, ..c };
            let mut p = init_params(&ci, &RngStream::new(seed, 0));
            records.push(
                train(
                    &mut p,
                    &ci,
                    &ds,
                    &ObjectiveSpec::mse(),
                    &tcfg(0.1, 3),
                    &RngStream::new(seed, 1),
                )
                .unwrap(),
            );
        }
        let refs: Vec<&TrainRecord> = records.iter().collect();
        let report = weight_drift_report(&refs).unwrap();
        assert!(report.slopes.iter().all(|s| s.is_none()));
    }
}
