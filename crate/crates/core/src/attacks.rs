//! Generalized replay attacks on the measurement channel.
//!
//! The attacked measurement is y_n = C_n x_n + z_n + v_n with
//! `v_n = α(C_n x_n + z_n) + C_n ξ_n + ζ_n`, where the false state evolves as
//! `ξ_{n+1} = Ā_n ξ_n + ω_n`. α = −1 with ξ/ζ carrying a recorded trajectory
//! replaces the live measurement entirely (a replay attack); α = 0 is a pure
//! additive false-signal attack. A concrete replay mode substitutes a
//! recorded measurement stream with a linear blend-in.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SystemTrajectory;
use crate::simulate::Realization;

/// Per-step covariance sequence, either one matrix broadcast over the
/// horizon or an explicit per-step table.
#[derive(Debug, Clone)]
pub enum CovarianceSequence {
    Constant(DMatrix<f64>),
    PerStep(Vec<DMatrix<f64>>),
}

impl CovarianceSequence {
    pub fn at(&self, n: usize) -> Result<&DMatrix<f64>> {
        match self {
            CovarianceSequence::Constant(m) => Ok(m),
            CovarianceSequence::PerStep(v) => v.get(n).ok_or(Error::IndexOutOfRange {
                index: n,
                horizon: v.len(),
            }),
        }
    }

    fn check_spd(&self, name: &str, dim: usize, horizon: usize) -> Result<()> {
        let check_one = |m: &DMatrix<f64>, at: &str| -> Result<()> {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::dim(format!("{name}{at} is {}x{}, expected {dim}x{dim}", m.nrows(), m.ncols())));
            }
            if !linalg::is_spd(m, 1e-9) {
                return Err(Error::NotPositiveDefinite { context: format!("{name}{at}") });
            }
            Ok(())
        };
        match self {
            CovarianceSequence::Constant(m) => check_one(m, ""),
            CovarianceSequence::PerStep(v) => {
                if v.len() < horizon {
                    return Err(Error::dim(format!(
                        "{name} covers {} steps, horizon is {horizon}",
                        v.len()
                    )));
                }
                for (n, m) in v.iter().enumerate().take(horizon) {
                    check_one(m, &format!("[{n}]"))?;
                }
                Ok(())
            }
        }
    }
}

/// Which attack construction produces v_n.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// v_n = α(C_n x_n + z_n) + C_n ξ_n + ζ_n with simulated ξ.
    Generalized,
    /// v_n substitutes a recorded measurement stream with linear blend-in.
    Replay,
}

/// Full description of an attack: scaling factor, false-signal covariances,
/// replay source, timing, and the seed of the attacker's noise stream.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub mode: AttackMode,
    /// Attack scaling factor α, constant over the attack.
    pub alpha: f64,
    /// False-state process noise covariances Σ_{ω,n}, p×p.
    pub sigma_omega: CovarianceSequence,
    /// False measurement noise covariances Σ_{ζ,n}, r×r.
    pub sigma_zeta: CovarianceSequence,
    /// Recorded run whose measurements are played back in replay mode.
    pub replay_source: Option<Realization>,
    /// Shift applied to the replay index: step n plays the source
    /// measurement at n − replay_offset. Zero replays aligned by absolute
    /// step.
    pub replay_offset: i64,
    /// First attacked step.
    pub start_step: usize,
    /// Blend-in duration in seconds; converted to steps with the system dt.
    pub blend_duration: f64,
    /// Seed of the attack noise stream (ω, ζ), independent of plant noise.
    pub seed: u64,
}

impl AttackSpec {
    /// A generalized attack active from step 0 with constant noise
    /// covariances.
    pub fn generalized(
        alpha: f64,
        sigma_omega: DMatrix<f64>,
        sigma_zeta: DMatrix<f64>,
        seed: u64,
    ) -> Self {
        AttackSpec {
            mode: AttackMode::Generalized,
            alpha,
            sigma_omega: CovarianceSequence::Constant(sigma_omega),
            sigma_zeta: CovarianceSequence::Constant(sigma_zeta),
            replay_source: None,
            replay_offset: 0,
            start_step: 0,
            blend_duration: 0.0,
            seed,
        }
    }

    /// A replay of `source` starting at `start_step` with the given blend-in
    /// time; `replay_offset` shifts which recorded step is played back.
    pub fn replay(
        source: Realization,
        start_step: usize,
        blend_duration: f64,
        replay_offset: i64,
    ) -> Self {
        AttackSpec {
            mode: AttackMode::Replay,
            alpha: -1.0,
            sigma_omega: CovarianceSequence::Constant(DMatrix::zeros(0, 0)),
            sigma_zeta: CovarianceSequence::Constant(DMatrix::zeros(0, 0)),
            replay_source: Some(source),
            replay_offset,
            start_step,
            blend_duration,
            seed: 0,
        }
    }

    /// Validates the attack description against a system: covariance
    /// dimensions and positivity in generalized mode, source presence
    /// and coverage in replay mode.
    pub fn check(&self, sys: &SystemTrajectory) -> Result<()> {
        match self.mode {
            AttackMode::Generalized => {
                self.sigma_omega.check_spd("sigma_omega", sys.p, sys.horizon)?;
                self.sigma_zeta.check_spd("sigma_zeta", sys.r, sys.horizon)?;
                Ok(())
            }
            AttackMode::Replay => {
                let source = self.replay_source.as_ref().ok_or(Error::InvalidConfig {
                    context: "replay mode requires a replay_source".into(),
                })?;
                if source.y.nrows() != sys.r {
                    return Err(Error::dim(format!(
                        "replay source has {}-dimensional measurements, system has {}",
                        source.y.nrows(),
                        sys.r
                    )));
                }
                let first = self.start_step as i64 - self.replay_offset;
                if first < 0 {
                    return Err(Error::ReplayExhausted { step: self.start_step });
                }
                Ok(())
            }
        }
    }

    fn blend_steps(&self, dt: f64) -> usize {
        if self.blend_duration <= 0.0 {
            0
        } else {
            (self.blend_duration / dt).ceil() as usize
        }
    }

    /// Advances the false state: ξ_{n+1} = Ā_n ξ_n + ω_n with
    /// ω_n ~ N(0, Σ_{ω,n}).
    pub fn false_state_step<R: Rng + ?Sized>(
        &self,
        sys: &SystemTrajectory,
        n: usize,
        xi_n: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if xi_n.len() != sys.p {
            return Err(Error::dim(format!("xi has length {}, state dimension is {}", xi_n.len(), sys.p)));
        }
        let chol = linalg::cholesky_factor(self.sigma_omega.at(n)?, "sigma_omega")?;
        let omega = linalg::sample_gaussian(rng, &chol);
        Ok(sys.closed_loop_matrix(n)? * xi_n + omega)
    }

    /// The deterministic part of the generalized attack term for a given
    /// false measurement noise draw: α(C_n x_n + z_n) + C_n ξ_n + ζ_n.
    pub fn attack_term(
        &self,
        sys: &SystemTrajectory,
        n: usize,
        x_n: &DVector<f64>,
        z_n: &DVector<f64>,
        xi_n: &DVector<f64>,
        zeta_n: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if n >= sys.horizon {
            return Err(Error::IndexOutOfRange { index: n, horizon: sys.horizon });
        }
        if x_n.len() != sys.p || xi_n.len() != sys.p || z_n.len() != sys.r || zeta_n.len() != sys.r
        {
            return Err(Error::dim(format!("attack_term inputs at step {n}")));
        }
        let c = &sys.c[n];
        Ok((c * x_n + z_n) * self.alpha + c * xi_n + zeta_n)
    }

    /// Generalized attack term with ζ_n drawn from the attack stream.
    pub fn attack_value<R: Rng + ?Sized>(
        &self,
        sys: &SystemTrajectory,
        n: usize,
        x_n: &DVector<f64>,
        z_n: &DVector<f64>,
        xi_n: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let chol = linalg::cholesky_factor(self.sigma_zeta.at(n)?, "sigma_zeta")?;
        let zeta = linalg::sample_gaussian(rng, &chol);
        self.attack_term(sys, n, x_n, z_n, xi_n, &zeta)
    }

    /// Replay attack term at step n: with blend steps m = ceil(blend/dt) and
    /// k = n − start_step + 1, v_n = min(k/m, 1)·(y_replay − y_true).
    pub fn replay_attack_value(
        &self,
        sys: &SystemTrajectory,
        n: usize,
        y_true: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if n < self.start_step {
            return Err(Error::InvalidConfig {
                context: format!("replay value requested before start_step at step {n}"),
            });
        }
        let source = self.replay_source.as_ref().ok_or(Error::InvalidConfig {
            context: "replay mode requires a replay_source".into(),
        })?;
        let idx = n as i64 - self.replay_offset;
        if idx < 0 || idx as usize >= source.n_steps() {
            return Err(Error::ReplayExhausted { step: n });
        }
        let y_replay = source.y.column(idx as usize);
        let m = self.blend_steps(sys.dt);
        let k = n - self.start_step + 1;
        let weight = if m == 0 { 1.0 } else { (k as f64 / m as f64).min(1.0) };
        Ok((y_replay - y_true) * weight)
    }
}

/// Empirical attack power: the average of ‖v_n‖² over the given steps.
pub fn attack_power(v: &[DVector<f64>]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|vn| vn.norm_squared()).sum::<f64>() / v.len() as f64
}

/// Attack power over the stored v columns of a realization.
pub fn attack_power_of(realization: &Realization) -> f64 {
    let n = realization.n_steps();
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| realization.v.column(i).norm_squared()).sum::<f64>() / n as f64
}
