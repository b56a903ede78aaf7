//! Time-varying linear system description: per-step plant, controller, and
//! observer matrices, assumption validation, and the watermark visibility
//! delay kappa.
//!
//! The plant model is
//!
//! ```text
//! x_{n+1} = A_n x_n + B_n K_n x̂_n + B_n e_n + w_n
//! y_n     = C_n x_n + z_n + v_n
//! ```
//!
//! with watermark e_n ~ N(0, Σ_e), process noise w_n ~ N(0, Σ_{w,n}),
//! measurement noise z_n ~ N(0, Σ_{z,n}), and v_n an attack term. The
//! observer is x̂_{n+1} = (Ā_n + L_n C_n) x̂_n + B_n e_n − L_n y_n with
//! Ā_n = A_n + B_n K_n.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;

/// Full time-indexed description of the watermarked closed-loop system.
///
/// All matrix sequences hold one entry per step and must cover at least
/// `horizon` steps. Dimensions: state p, input (and watermark) q,
/// measurement r.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemTrajectory {
    pub horizon: usize,
    /// Seconds per step; informational for scenario builders.
    pub dt: f64,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    /// Plant matrices A_n, p×p.
    pub a: Vec<DMatrix<f64>>,
    /// Input matrices B_n, p×q.
    pub b: Vec<DMatrix<f64>>,
    /// Measurement matrices C_n, r×p.
    pub c: Vec<DMatrix<f64>>,
    /// State-feedback gains K_n, q×p.
    pub k: Vec<DMatrix<f64>>,
    /// Observer gains L_n, p×r.
    pub l: Vec<DMatrix<f64>>,
    /// Process noise covariances Σ_{w,n}, p×p.
    pub sigma_w: Vec<DMatrix<f64>>,
    /// Measurement noise covariances Σ_{z,n}, r×r.
    pub sigma_z: Vec<DMatrix<f64>>,
    /// Watermark covariance Σ_e, q×q (constant over the horizon).
    pub sigma_e: DMatrix<f64>,
}

/// Identifies which modeling assumption a validation violation breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssumptionId {
    /// Closed-loop stability: spectral radius of Ā_n must be < 1.
    ClosedLoopStability,
    /// Observer-loop stability: spectral radius of A_n + L_n C_n must be < 1.
    ObserverLoopStability,
    /// Σ_{w,n} must be symmetric positive definite.
    ProcessNoiseRank,
    /// Σ_{z,n} must be symmetric positive definite.
    MeasurementNoiseRank,
    /// Σ_e must be symmetric positive definite.
    WatermarkRank,
}

/// One failed assumption check at one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub assumption: AssumptionId,
    pub step: usize,
    /// The offending value: a spectral radius >= 1 or a covariance
    /// eigenvalue <= 0.
    pub value: f64,
}

/// Result of sweeping the stability and full-rank assumptions over the
/// horizon.
///
/// Stability is measured by the per-step spectral radius of the closed-loop
/// and observer-loop matrices; the largest induced 2-norms are reported
/// alongside for reference. Time-varying systems routinely have per-step
/// 2-norms above 1 while every eigenvalue stays strictly inside the unit
/// circle, so the radius is the check that gates `violations`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Largest spectral radius of Ā_n over the horizon.
    pub max_norm_abar: f64,
    /// Largest spectral radius of A_n + L_n C_n over the horizon.
    pub max_norm_aunderline: f64,
    /// Largest induced 2-norm of Ā_n (informational).
    pub max_two_norm_abar: f64,
    /// Largest induced 2-norm of A_n + L_n C_n (informational).
    pub max_two_norm_aunderline: f64,
    /// Smallest eigenvalue over all covariance matrices checked.
    pub min_covariance_eigenvalue: f64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl SystemTrajectory {
    /// Checks that every sequence covers the horizon and that all matrix
    /// dimensions are mutually consistent.
    pub fn check_dimensions(&self) -> Result<()> {
        let (p, q, r, n) = (self.p, self.q, self.r, self.horizon);
        if p == 0 || q == 0 || r == 0 || n == 0 {
            return Err(Error::dim("dimensions p, q, r and horizon must be positive"));
        }
        let seqs: [(&str, &Vec<DMatrix<f64>>, usize, usize); 7] = [
            ("A", &self.a, p, p),
            ("B", &self.b, p, q),
            ("C", &self.c, r, p),
            ("K", &self.k, q, p),
            ("L", &self.l, p, r),
            ("sigma_w", &self.sigma_w, p, p),
            ("sigma_z", &self.sigma_z, r, r),
        ];
        for (name, seq, rows, cols) in seqs {
            if seq.len() < n {
                return Err(Error::dim(format!(
                    "sequence {name} has {} entries, horizon is {n}",
                    seq.len()
                )));
            }
            for (i, m) in seq.iter().enumerate().take(n) {
                if m.nrows() != rows || m.ncols() != cols {
                    return Err(Error::dim(format!(
                        "{name}[{i}] is {}x{}, expected {rows}x{cols}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
            }
        }
        if self.sigma_e.nrows() != q || self.sigma_e.ncols() != q {
            return Err(Error::dim(format!(
                "sigma_e is {}x{}, expected {q}x{q}",
                self.sigma_e.nrows(),
                self.sigma_e.ncols()
            )));
        }
        Ok(())
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n < self.horizon {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange { index: n, horizon: self.horizon })
        }
    }

    /// Closed-loop matrix Ā_n = A_n + B_n K_n.
    pub fn closed_loop_matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        self.check_step(n)?;
        Ok(&self.a[n] + &self.b[n] * &self.k[n])
    }

    /// Observer-loop matrix A_n + L_n C_n, which drives the observer error
    /// x̂_n − x_n.
    pub fn observer_loop_matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        self.check_step(n)?;
        Ok(&self.a[n] + &self.l[n] * &self.c[n])
    }

    /// SHA-256 fingerprint of the full system description, stable across
    /// processes. Used to tie normalization tables to the system they were
    /// built from.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"ltv-system-v1");
        for v in [self.horizon as u64, self.p as u64, self.q as u64, self.r as u64] {
            h.update(v.to_le_bytes());
        }
        h.update(self.dt.to_le_bytes());
        fn feed(h: &mut Sha256, take: usize, tag: &[u8], ms: &[DMatrix<f64>]) {
            h.update(tag);
            for m in ms.iter().take(take) {
                for v in m.iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        feed(&mut h, self.horizon, b"A", &self.a);
        feed(&mut h, self.horizon, b"B", &self.b);
        feed(&mut h, self.horizon, b"C", &self.c);
        feed(&mut h, self.horizon, b"K", &self.k);
        feed(&mut h, self.horizon, b"L", &self.l);
        feed(&mut h, self.horizon, b"W", &self.sigma_w);
        feed(&mut h, self.horizon, b"Z", &self.sigma_z);
        feed(&mut h, 1, b"E", std::slice::from_ref(&self.sigma_e));
        h.update(b"end");
        hex_string(&h.finalize())
    }

    /// Sweeps the stability and covariance-rank assumptions over the horizon.
    ///
    /// A step is reported when the spectral radius of Ā_n or A_n + L_n C_n
    /// reaches 1, or when any covariance matrix has an eigenvalue <= 0.
    pub fn validate(&self) -> Result<ValidationReport> {
        self.check_dimensions()?;
        let mut report = ValidationReport {
            max_norm_abar: 0.0,
            max_norm_aunderline: 0.0,
            max_two_norm_abar: 0.0,
            max_two_norm_aunderline: 0.0,
            min_covariance_eigenvalue: f64::INFINITY,
            violations: Vec::new(),
        };
        let covariance = |assumption: AssumptionId,
                          step: usize,
                          m: &DMatrix<f64>,
                          report: &mut ValidationReport| {
            let min_eig = linalg::min_symmetric_eigenvalue(m);
            report.min_covariance_eigenvalue = report.min_covariance_eigenvalue.min(min_eig);
            if min_eig <= 0.0 {
                report.violations.push(Violation { assumption, step, value: min_eig });
            }
        };
        for n in 0..self.horizon {
            let rho_abar = linalg::spectral_radius(&self.closed_loop_matrix(n)?);
            let rho_under = linalg::spectral_radius(&self.observer_loop_matrix(n)?);
            report.max_norm_abar = report.max_norm_abar.max(rho_abar);
            report.max_norm_aunderline = report.max_norm_aunderline.max(rho_under);
            report.max_two_norm_abar =
                report.max_two_norm_abar.max(linalg::spectral_norm(&self.closed_loop_matrix(n)?));
            report.max_two_norm_aunderline = report
                .max_two_norm_aunderline
                .max(linalg::spectral_norm(&self.observer_loop_matrix(n)?));
            if rho_abar >= 1.0 {
                report.violations.push(Violation {
                    assumption: AssumptionId::ClosedLoopStability,
                    step: n,
                    value: rho_abar,
                });
            }
            if rho_under >= 1.0 {
                report.violations.push(Violation {
                    assumption: AssumptionId::ObserverLoopStability,
                    step: n,
                    value: rho_under,
                });
            }
            covariance(AssumptionId::ProcessNoiseRank, n, &self.sigma_w[n], &mut report);
            covariance(AssumptionId::MeasurementNoiseRank, n, &self.sigma_z[n], &mut report);
        }
        covariance(AssumptionId::WatermarkRank, 0, &self.sigma_e, &mut report);
        Ok(report)
    }

    /// Finite-horizon average `(1/horizon) Σ_{n=kappa} C_n Ā_{n-1}·…·Ā_{n-kappa+1} B_{n-kappa}`
    /// measuring how strongly the watermark injected at step n−kappa shows up
    /// in the measurement at step n. The chain is empty (identity) for
    /// kappa = 1.
    pub fn watermark_visibility(&self, kappa: usize, horizon: usize) -> Result<DMatrix<f64>> {
        if kappa == 0 {
            return Err(Error::InvalidConfig { context: "kappa must be >= 1".into() });
        }
        let horizon = horizon.min(self.horizon);
        let mut total = DMatrix::<f64>::zeros(self.r, self.q);
        for n in kappa..horizon {
            let mut chain = self.b[n - kappa].clone();
            for m in (n - kappa + 1)..n {
                chain = self.closed_loop_matrix(m)? * chain;
            }
            total += &self.c[n] * chain;
        }
        Ok(total / horizon as f64)
    }

    /// Smallest delay kappa >= 1 at which the time-averaged watermark
    /// visibility exceeds `tol`, searched up to `kappa_max` (the state
    /// dimension when `None`).
    ///
    /// Errors with `WatermarkUnobservable` when no kappa qualifies.
    pub fn compute_kappa(
        &self,
        horizon: usize,
        tol: f64,
        kappa_max: Option<usize>,
    ) -> Result<usize> {
        let kappa_max = kappa_max.unwrap_or(self.p).max(1);
        if tol <= 0.0 {
            return Err(Error::InvalidConfig { context: "tol must be positive".into() });
        }
        if horizon.min(self.horizon) < 10 * kappa_max {
            return Err(Error::InvalidConfig {
                context: format!(
                    "horizon {horizon} too short for kappa search up to {kappa_max}"
                ),
            });
        }
        for kappa in 1..=kappa_max {
            let avg = self.watermark_visibility(kappa, horizon)?;
            if linalg::spectral_norm(&avg) > tol {
                return Ok(kappa);
            }
        }
        Err(Error::WatermarkUnobservable { kappa_max })
    }
}

/// Default tolerance for the kappa search.
pub const KAPPA_TOL: f64 = 1e-6;

/// Serialized form of [`SystemTrajectory`]: matrices are row-major nested
/// arrays (`matrix[row][col]`), sequences are arrays of matrices.
#[derive(Debug, Serialize, Deserialize)]
pub struct SystemTrajectoryFile {
    pub horizon: usize,
    pub dt: f64,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub a: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<Vec<f64>>>,
    pub k: Vec<Vec<Vec<f64>>>,
    pub l: Vec<Vec<Vec<f64>>>,
    pub sigma_w: Vec<Vec<Vec<f64>>>,
    pub sigma_z: Vec<Vec<Vec<f64>>>,
    pub sigma_e: Vec<Vec<f64>>,
}

/// Converts a row-major nested array into a matrix; all rows must share one
/// length.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::dim("empty matrix in serialized system"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dim("ragged rows in serialized matrix"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Row-major nested-array view of a matrix.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

impl SystemTrajectory {
    /// Serializes to the documented JSON schema.
    pub fn to_json(&self) -> Result<String> {
        let seq = |ms: &[DMatrix<f64>]| ms.iter().map(matrix_to_rows).collect::<Vec<_>>();
        let file = SystemTrajectoryFile {
            horizon: self.horizon,
            dt: self.dt,
            p: self.p,
            q: self.q,
            r: self.r,
            a: seq(&self.a),
            b: seq(&self.b),
            c: seq(&self.c),
            k: seq(&self.k),
            l: seq(&self.l),
            sigma_w: seq(&self.sigma_w),
            sigma_z: seq(&self.sigma_z),
            sigma_e: matrix_to_rows(&self.sigma_e),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Loads from the documented JSON schema; dimension consistency and
    /// covariance symmetry are checked on load.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SystemTrajectoryFile = serde_json::from_str(text)?;
        let seq = |ms: &[Vec<Vec<f64>>]| -> Result<Vec<DMatrix<f64>>> {
            ms.iter().map(|m| matrix_from_rows(m)).collect()
        };
        let sys = SystemTrajectory {
            horizon: file.horizon,
            dt: file.dt,
            p: file.p,
            q: file.q,
            r: file.r,
            a: seq(&file.a)?,
            b: seq(&file.b)?,
            c: seq(&file.c)?,
            k: seq(&file.k)?,
            l: seq(&file.l)?,
            sigma_w: seq(&file.sigma_w)?,
            sigma_z: seq(&file.sigma_z)?,
            sigma_e: matrix_from_rows(&file.sigma_e)?,
        };
        sys.check_dimensions()?;
        for (name, covs) in [("sigma_w", &sys.sigma_w), ("sigma_z", &sys.sigma_z)] {
            for (n, m) in covs.iter().enumerate().take(sys.horizon) {
                if !linalg::is_spd(m, 1e-9) {
                    return Err(Error::NotPositiveDefinite {
                        context: format!("{name}[{n}] in serialized system"),
                    });
                }
            }
        }
        if !linalg::is_spd(&sys.sigma_e, 1e-9) {
            return Err(Error::NotPositiveDefinite {
                context: "sigma_e in serialized system".into(),
            });
        }
        Ok(sys)
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}
