//! Sliding-window watermark detector.
//!
//! Each window stacks the whitened residual over the delayed watermark for
//! `window` consecutive steps, forms the scatter matrix Q_n (optionally
//! decorrelated across time by G_n), and scores it with the negative log
//! likelihood of the scatter under the unattacked distribution. Scores above
//! a calibrated threshold raise alarms.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalization::{s_matrix, NormalizationTables};
use crate::simulate::Realization;

/// Floor added to Q when its Cholesky factorization fails.
pub const Q_FLOOR: f64 = 1e-12;

/// Detector settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Window length ℓ+1 (number of steps per statistic).
    pub window: usize,
    /// Watermark delay κ.
    pub kappa: usize,
    /// Alarm threshold on the negative log likelihood.
    pub threshold: f64,
    /// Decorrelate windows with G_n; without it the scatter is plain P Pᵀ.
    pub use_g: bool,
    /// Design false alarm rate the threshold was calibrated for.
    pub false_alarm_rate: f64,
}

impl DetectorConfig {
    fn check(&self, qdim: usize, rdim: usize) -> Result<()> {
        if self.window < qdim + rdim {
            return Err(Error::InvalidConfig {
                context: format!(
                    "window {} is below the statistic dimension {}",
                    self.window,
                    qdim + rdim
                ),
            });
        }
        if self.kappa == 0 {
            return Err(Error::InvalidConfig { context: "kappa must be >= 1".into() });
        }
        Ok(())
    }
}

/// Detection output over one realization. Vectors are indexed by absolute
/// step; entries before the first valid window end are NaN/false.
#[derive(Debug, Clone)]
pub struct DetectionReport {
    /// First step with a defined statistic (ℓ + κ).
    pub valid_from: usize,
    /// Negative log likelihood per step (NaN before `valid_from`).
    pub nll: Vec<f64>,
    /// `nll[n] > threshold` per step.
    pub alarms: Vec<bool>,
    /// First step whose statistic exceeded the threshold.
    pub first_alarm_step: Option<usize>,
    /// Running average of V·res·eᵀ (converges to 0 unattacked).
    pub c1_running: DMatrix<f64>,
    /// Running average of V·res·resᵀ·Vᵀ (converges to I unattacked).
    pub c2_running: DMatrix<f64>,
    /// Window ends where Q needed the eigenvalue floor.
    pub regularized_steps: Vec<usize>,
    /// Threshold the alarms were computed against.
    pub threshold: f64,
}

impl DetectionReport {
    /// Fraction of valid windows that alarmed.
    pub fn alarm_fraction(&self) -> f64 {
        let valid = self.nll.len().saturating_sub(self.valid_from);
        if valid == 0 {
            return 0.0;
        }
        let hits = self.alarms[self.valid_from..].iter().filter(|&&a| a).count();
        hits as f64 / valid as f64
    }

    /// CSV rows `step,nll,threshold,alarm` for the valid range.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,nll,threshold,alarm\n");
        for n in self.valid_from..self.nll.len() {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{}\n",
                n, self.nll[n], self.threshold, self.alarms[n] as u8
            ));
        }
        out
    }
}

/// The raw measurement residual C_n x̂_n − y_n.
pub fn residual(c_n: &DMatrix<f64>, xhat_n: &DVector<f64>, y_n: &DVector<f64>) -> DVector<f64> {
    c_n * xhat_n - y_n
}

/// One window column ψ_n: the whitened residual stacked over the watermark
/// from κ steps earlier.
pub fn build_psi(whitened_residual: &DVector<f64>, delayed_watermark: &DVector<f64>) -> DVector<f64> {
    let r = whitened_residual.len();
    let q = delayed_watermark.len();
    let mut psi = DVector::<f64>::zeros(r + q);
    psi.rows_mut(0, r).copy_from(whitened_residual);
    psi.rows_mut(r, q).copy_from(delayed_watermark);
    psi
}

/// The window scatter matrix Q = P G⁻¹ Pᵀ, or plain P Pᵀ when `g` is None.
pub fn window_statistic(p: &DMatrix<f64>, g: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
    match g {
        None => Ok(p * p.transpose()),
        Some(g) => {
            let chol = Cholesky::new(g.clone())
                .ok_or_else(|| Error::conditioning("window correlation matrix is not SPD"))?;
            // Q = P G⁻¹ Pᵀ computed via the triangular solve G X = Pᵀ.
            let x = chol.solve(&p.transpose());
            Ok(p * x)
        }
    }
}

/// Negative log likelihood of a window scatter Q under scale S:
/// (q + r − ℓ)·ln det Q + tr(S⁻¹ Q). Returns the score and whether Q needed
/// the positive-definite floor. `s_inv` is the precomputed S⁻¹.
pub fn negative_log_likelihood(
    q: &DMatrix<f64>,
    s_inv: &DMatrix<f64>,
    ell: usize,
    qdim: usize,
    rdim: usize,
) -> (f64, bool) {
    let coef = (qdim + rdim) as f64 - ell as f64;
    let (logdet, floored) = match Cholesky::new(q.clone()) {
        Some(chol) => (chol_logdet(&chol), false),
        None => {
            let mut qf = q.clone();
            for i in 0..qf.nrows() {
                qf[(i, i)] += Q_FLOOR;
            }
            let chol = match Cholesky::new(qf) {
                Some(c) => c,
                None => return (f64::INFINITY, true),
            };
            (chol_logdet(&chol), true)
        }
    };
    (coef * logdet + (s_inv * q).trace(), floored)
}

fn chol_logdet(chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Empirical quantile by linear interpolation of order statistics.
pub fn empirical_quantile(samples: &[f64], prob: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidConfig {
            context: format!("quantile probability {prob} outside [0, 1]"),
        });
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Alarm threshold at the empirical (1 − rate) quantile of calibration
/// scores. Requires at least 10/rate samples so the tail is supported by
/// data.
pub fn calibrate_threshold(samples: &[f64], rate: f64) -> Result<f64> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidConfig {
            context: format!("false alarm rate {rate} outside (0, 1)"),
        });
    }
    let needed = (10.0 / rate).ceil() as usize;
    if samples.len() < needed {
        return Err(Error::InsufficientSamples { needed, got: samples.len() });
    }
    empirical_quantile(samples, 1.0 - rate)
}

/// Scores every window of a realization against the tables.
///
/// The statistic at step n covers steps n−ℓ..=n and is defined for
/// n ≥ ℓ + κ. The per-step outputs share the realization's indexing.
pub fn detect(
    real: &Realization,
    tables: &NormalizationTables,
    config: &DetectorConfig,
) -> Result<DetectionReport> {
    let qdim = tables.q();
    let rdim = tables.r();
    config.check(qdim, rdim)?;
    if config.window != tables.window || config.kappa != tables.kappa {
        return Err(Error::InvalidConfig {
            context: format!(
                "detector window/kappa {}/{} disagree with tables {}/{}",
                config.window, config.kappa, tables.window, tables.kappa
            ),
        });
    }
    let n_steps = real.n_steps();
    let ell = config.window - 1;
    let kappa = config.kappa;
    let valid_from = ell + kappa;
    if tables.up_to() + 1 < n_steps {
        return Err(Error::InvalidConfig {
            context: format!(
                "tables cover {} steps but the realization has {}",
                tables.up_to() + 1,
                n_steps
            ),
        });
    }

    let s = s_matrix(rdim, &tables.sigma_e);
    let s_inv = Cholesky::new(s)
        .ok_or_else(|| Error::conditioning("watermark covariance is not SPD"))?
        .inverse();

    let mut nll = vec![f64::NAN; n_steps];
    let mut alarms = vec![false; n_steps];
    let mut first_alarm_step = None;
    let mut regularized_steps = Vec::new();
    let mut c1_sum = DMatrix::<f64>::zeros(rdim, qdim);
    let mut c2_sum = DMatrix::<f64>::zeros(rdim, rdim);
    let mut moment_count = 0usize;

    // Ring buffer of the last window columns ψ_{n-ℓ}..ψ_n.
    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(config.window);
    let mut p = DMatrix::<f64>::zeros(qdim + rdim, config.window);

    for n in 0..n_steps {
        if n >= kappa {
            let raw = residual(&tables.c[n], &real.xhat_at(n).into_owned(), &real.y_at(n).into_owned());
            let white = &tables.v[n] * &raw;
            let e_del = real.e_at(n - kappa).into_owned();
            c1_sum.gemm(1.0, &white, &e_del.transpose(), 1.0);
            c2_sum.gemm(1.0, &white, &white.transpose(), 1.0);
            moment_count += 1;
            columns.push(build_psi(&white, &e_del));
            if columns.len() > config.window {
                columns.remove(0);
            }
        }
        if n < valid_from {
            continue;
        }
        for (col, psi) in columns.iter().enumerate() {
            p.column_mut(col).copy_from(psi);
        }
        let q = if config.use_g {
            let g = tables.g_matrix(n)?;
            window_statistic(&p, Some(&g))?
        } else {
            window_statistic(&p, None)?
        };
        let (score, floored) = negative_log_likelihood(&q, &s_inv, ell, qdim, rdim);
        if floored {
            regularized_steps.push(n);
        }
        nll[n] = score;
        if score > config.threshold {
            alarms[n] = true;
            if first_alarm_step.is_none() {
                first_alarm_step = Some(n);
            }
        }
    }

    let denom = moment_count.max(1) as f64;
    Ok(DetectionReport {
        valid_from,
        nll,
        alarms,
        first_alarm_step,
        c1_running: c1_sum / denom,
        c2_running: c2_sum / denom,
        regularized_steps,
        threshold: config.threshold,
    })
}

/// The plain sliding-window test for time-invariant systems: unit delay,
/// identity whitening of nothing beyond V, and scatter P Pᵀ without
/// temporal decorrelation. With G = I and κ = 1 the general detector
/// reduces to this computation bit for bit.
pub fn previous_test(
    real: &Realization,
    tables: &NormalizationTables,
    threshold: f64,
    false_alarm_rate: f64,
) -> Result<DetectionReport> {
    let config = DetectorConfig {
        window: tables.window,
        kappa: 1,
        threshold,
        use_g: false,
        false_alarm_rate,
    };
    let qdim = tables.q();
    let rdim = tables.r();
    config.check(qdim, rdim)?;
    if tables.kappa != 1 {
        return Err(Error::InvalidConfig {
            context: "the reference test requires tables built with kappa = 1".into(),
        });
    }
    let n_steps = real.n_steps();
    let ell = tables.window - 1;
    let valid_from = ell + 1;

    let s = s_matrix(rdim, &tables.sigma_e);
    let s_inv = Cholesky::new(s)
        .ok_or_else(|| Error::conditioning("watermark covariance is not SPD"))?
        .inverse();

    let mut nll = vec![f64::NAN; n_steps];
    let mut alarms = vec![false; n_steps];
    let mut first_alarm_step = None;
    let mut regularized_steps = Vec::new();
    let mut c1_sum = DMatrix::<f64>::zeros(rdim, qdim);
    let mut c2_sum = DMatrix::<f64>::zeros(rdim, rdim);
    let mut moment_count = 0usize;
    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(tables.window);
    let mut p = DMatrix::<f64>::zeros(qdim + rdim, tables.window);

    for n in 0..n_steps {
        if n >= 1 {
            let raw = residual(&tables.c[n], &real.xhat_at(n).into_owned(), &real.y_at(n).into_owned());
            let white = &tables.v[n] * &raw;
            let e_del = real.e_at(n - 1).into_owned();
            c1_sum.gemm(1.0, &white, &e_del.transpose(), 1.0);
            c2_sum.gemm(1.0, &white, &white.transpose(), 1.0);
            moment_count += 1;
            columns.push(build_psi(&white, &e_del));
            if columns.len() > tables.window {
                columns.remove(0);
            }
        }
        if n < valid_from {
            continue;
        }
        for (col, psi) in columns.iter().enumerate() {
            p.column_mut(col).copy_from(psi);
        }
        let q = window_statistic(&p, None)?;
        let (score, floored) = negative_log_likelihood(&q, &s_inv, ell, qdim, rdim);
        if floored {
            regularized_steps.push(n);
        }
        nll[n] = score;
        if score > threshold {
            alarms[n] = true;
            if first_alarm_step.is_none() {
                first_alarm_step = Some(n);
            }
        }
    }

    let denom = moment_count.max(1) as f64;
    Ok(DetectionReport {
        valid_from,
        nll,
        alarms,
        first_alarm_step,
        c1_running: c1_sum / denom,
        c2_running: c2_sum / denom,
        regularized_steps,
        threshold,
    })
}

/// The two running moments of the consistency check, averaged over steps
/// κ..=up_to: C1 = avg V·res·eᵀ (→ 0 when the loop is intact) and
/// C2 = avg V·res·resᵀ·Vᵀ (→ I when the measurements are genuine).
pub fn asymptotic_statistics(
    real: &Realization,
    tables: &NormalizationTables,
    kappa: usize,
    up_to: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if kappa == 0 {
        return Err(Error::InvalidConfig { context: "kappa must be >= 1".into() });
    }
    if up_to >= real.n_steps() || up_to > tables.up_to() {
        return Err(Error::IndexOutOfRange {
            index: up_to,
            horizon: real.n_steps().min(tables.up_to() + 1),
        });
    }
    if up_to < kappa {
        return Err(Error::InvalidConfig {
            context: format!("up_to {up_to} is below kappa {kappa}"),
        });
    }
    let qdim = tables.q();
    let rdim = tables.r();
    let mut c1 = DMatrix::<f64>::zeros(rdim, qdim);
    let mut c2 = DMatrix::<f64>::zeros(rdim, rdim);
    for n in kappa..=up_to {
        let raw = residual(&tables.c[n], &real.xhat_at(n).into_owned(), &real.y_at(n).into_owned());
        let white = &tables.v[n] * &raw;
        c1.gemm(1.0, &white, &real.e_at(n - kappa).transpose().into_owned(), 1.0);
        c2.gemm(1.0, &white, &white.transpose(), 1.0);
    }
    let count = (up_to - kappa + 1) as f64;
    Ok((c1 / count, c2 / count))
}

/// JSON summary of one detection run.
#[derive(Debug, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub valid_from: usize,
    pub first_alarm_step: Option<usize>,
    pub alarm_fraction: f64,
    pub threshold: f64,
    pub c1_norm: f64,
    pub c2_minus_identity_norm: f64,
    pub regularized_windows: usize,
}

impl DetectionReport {
    /// Condenses the report for serialization.
    pub fn summary(&self) -> DetectionSummary {
        let rdim = self.c2_running.nrows();
        let c2_dev = &self.c2_running - DMatrix::<f64>::identity(rdim, rdim);
        DetectionSummary {
            valid_from: self.valid_from,
            first_alarm_step: self.first_alarm_step,
            alarm_fraction: self.alarm_fraction(),
            threshold: self.threshold,
            c1_norm: crate::linalg::spectral_norm(&self.c1_running),
            c2_minus_identity_norm: crate::linalg::spectral_norm(&c2_dev),
            regularized_windows: self.regularized_steps.len(),
        }
    }
}
