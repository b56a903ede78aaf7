//! Ready-made systems to run the detector on: a small academic
//! time-varying benchmark and a path-tracking ground vehicle whose gains
//! are synthesized from a reference path.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemTrajectory;
use crate::simulate::derive_seed;

/// A planar path with a speed target, sampled at waypoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferencePath {
    /// Waypoint positions (x, y) in meters.
    pub waypoints: Vec<[f64; 2]>,
    /// Target speed at each waypoint, m/s.
    pub speed_profile: Vec<f64>,
    /// Controller sample period, seconds.
    pub dt: f64,
}

/// Per-step reference values obtained by driving along the path at the
/// commanded speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub speed: f64,
    pub curvature: f64,
}

impl ReferencePath {
    fn check(&self) -> Result<()> {
        if self.waypoints.len() < 3 {
            return Err(Error::InvalidConfig {
                context: "reference path needs at least 3 waypoints".into(),
            });
        }
        if self.speed_profile.len() != self.waypoints.len() {
            return Err(Error::dim("speed profile length differs from waypoint count"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig { context: "path dt must be positive".into() });
        }
        if self.speed_profile.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig {
                context: "speed profile must be strictly positive".into(),
            });
        }
        Ok(())
    }

    /// Cumulative arc length at each waypoint.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.waypoints.len());
        let mut acc = 0.0;
        s.push(0.0);
        for pair in self.waypoints.windows(2) {
            let dx = pair[1][0] - pair[0][0];
            let dy = pair[1][1] - pair[0][1];
            acc += (dx * dx + dy * dy).sqrt();
            s.push(acc);
        }
        s
    }

    /// Signed curvature at each waypoint from the circumcircle of the
    /// waypoint and its two neighbors; endpoints copy their neighbor.
    pub fn curvatures(&self) -> Vec<f64> {
        let n = self.waypoints.len();
        let mut k = vec![0.0; n];
        for i in 1..n - 1 {
            let a = self.waypoints[i - 1];
            let b = self.waypoints[i];
            let c = self.waypoints[i + 1];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let ac = [c[0] - a[0], c[1] - a[1]];
            let bc = [c[0] - b[0], c[1] - b[1]];
            let cross = ab[0] * ac[1] - ab[1] * ac[0];
            let denom = (ab[0] * ab[0] + ab[1] * ab[1]).sqrt()
                * (ac[0] * ac[0] + ac[1] * ac[1]).sqrt()
                * (bc[0] * bc[0] + bc[1] * bc[1]).sqrt();
            k[i] = if denom > 0.0 { 2.0 * cross / denom } else { 0.0 };
        }
        if n >= 3 {
            k[0] = k[1];
            k[n - 1] = k[n - 2];
        }
        k
    }

    /// Drives along the path at the commanded speed for `horizon` steps and
    /// returns the interpolated speed and curvature at each step. Past the
    /// final waypoint the last values are held.
    pub fn sample(&self, horizon: usize) -> Result<Vec<ReferenceSample>> {
        self.check()?;
        let arcs = self.arc_lengths();
        let curv = self.curvatures();
        let total = *arcs.last().unwrap();
        let mut out = Vec::with_capacity(horizon);
        let mut s = 0.0f64;
        for _ in 0..horizon {
            let sc = s.min(total);
            let speed = interp(&arcs, &self.speed_profile, sc);
            let curvature = interp(&arcs, &curv, sc);
            out.push(ReferenceSample { speed, curvature });
            s += speed * self.dt;
        }
        Ok(out)
    }

    /// A gentle S-curve: sinusoidal curvature and speed over `length`
    /// meters of path with waypoints every `step` meters.
    pub fn s_curve(length: f64, step: f64, dt: f64) -> Self {
        let count = (length / step).ceil() as usize + 1;
        let mut waypoints = Vec::with_capacity(count);
        let mut speed_profile = Vec::with_capacity(count);
        let mut x = 0.0f64;
        let mut y = 0.0f64;
        let mut heading = 0.0f64;
        for i in 0..count {
            let s = i as f64 * step;
            let u = s / length;
            waypoints.push([x, y]);
            speed_profile.push(10.0 + 4.0 * (std::f64::consts::TAU * 2.0 * u).sin());
            let curvature = 0.02 * (std::f64::consts::TAU * 3.0 * u).sin();
            heading += curvature * step;
            x += heading.cos() * step;
            y += heading.sin() * step;
        }
        ReferencePath { waypoints, speed_profile, dt }
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= *xs.last().unwrap() {
        return *ys.last().unwrap();
    }
    let idx = xs.partition_point(|&v| v <= x).min(xs.len() - 1);
    let (x0, x1) = (xs[idx - 1], xs[idx]);
    let (y0, y1) = (ys[idx - 1], ys[idx]);
    if x1 <= x0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// A system together with the context it came from.
#[derive(Debug, Clone)]
pub struct ScenarioBundle {
    pub sys: SystemTrajectory,
    /// The reference path the gains were synthesized for, when there is one.
    pub reference: Option<ReferencePath>,
    /// Human-readable state labels, one per state.
    pub labels: Vec<String>,
    pub notes: String,
}

/// The three-state benchmark with a sinusoidally varying coupling term,
/// two measured states, scalar input, and fixed hand-tuned gains.
pub fn example1_system(horizon: usize) -> Result<SystemTrajectory> {
    if horizon == 0 {
        return Err(Error::InvalidConfig { context: "horizon must be positive".into() });
    }
    let mut a = Vec::with_capacity(horizon);
    for n in 0..horizon {
        let t = n as f64 / 100.0;
        a.push(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 1.0 + 0.5 * t.sin(), 0.0, 0.0, 1.0, 0.1, 0.0, 0.0, 1.0],
        ));
    }
    let b = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
    let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let k = DMatrix::from_row_slice(1, 3, &[-4.0e-4, -3.65e-2, -1.05e-1]);
    let l = DMatrix::from_row_slice(
        3,
        2,
        &[-7.0e-2, -1.0, -2.2e-3, -1.4e-1, -1.6e-3, -4.5e-2],
    );
    let sigma_w = DMatrix::<f64>::identity(3, 3) * 1.0e-3;
    let sigma_z = DMatrix::<f64>::identity(2, 2) * 1.0e-3;
    let sigma_e = DMatrix::from_element(1, 1, 1.0e-3);
    let sys = SystemTrajectory {
        horizon,
        dt: 1.0,
        p: 3,
        q: 1,
        r: 2,
        a,
        b: vec![b; horizon],
        c: vec![c; horizon],
        k: vec![k; horizon],
        l: vec![l; horizon],
        sigma_w: vec![sigma_w; horizon],
        sigma_z: vec![sigma_z; horizon],
        sigma_e,
    };
    sys.check_dimensions()?;
    Ok(sys)
}

/// `example1_system` wrapped with labels and notes.
pub fn example1_bundle(horizon: usize) -> Result<ScenarioBundle> {
    Ok(ScenarioBundle {
        sys: example1_system(horizon)?,
        reference: None,
        labels: vec!["x1".into(), "x2".into(), "x3".into()],
        notes: "three-state benchmark with sinusoidal coupling and fixed gains".into(),
    })
}

/// Noise levels for the vehicle scenario.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleNoise {
    /// Process noise variance per error state.
    pub sigma_w: f64,
    /// Measurement noise variance per channel.
    pub sigma_z: f64,
    /// Watermark variance on the steering channel, rad².
    pub sigma_e_steer: f64,
    /// Watermark variance on the acceleration channel, (m/s²)².
    pub sigma_e_accel: f64,
}

impl Default for VehicleNoise {
    fn default() -> Self {
        VehicleNoise {
            sigma_w: 1.0e-4,
            sigma_z: 1.0e-4,
            sigma_e_steer: 2.0e-2,
            sigma_e_accel: 5.0e-3,
        }
    }
}

const WHEELBASE: f64 = 2.7;

/// Path-tracking error dynamics for a kinematic bicycle, linearized about
/// the reference: states (lateral error, heading error, speed error),
/// inputs (steering correction, acceleration), all three errors measured.
///
/// Feedback gains come from a finite-horizon LQR backward pass and
/// observer gains from a per-step steady-state Kalman design, so the
/// whitened residuals are close to white and the synthesized system
/// satisfies the stability and rank assumptions by construction. The
/// returned system fails validation with an error rather than silently.
pub fn vehicle_scenario(
    path: &ReferencePath,
    horizon: usize,
    noise: &VehicleNoise,
) -> Result<ScenarioBundle> {
    if horizon == 0 {
        return Err(Error::InvalidConfig { context: "horizon must be positive".into() });
    }
    let samples = path.sample(horizon)?;
    let dt = path.dt;

    let mut a_seq = Vec::with_capacity(horizon);
    let mut b_seq = Vec::with_capacity(horizon);
    for smp in &samples {
        let v = smp.speed;
        a_seq.push(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, dt * v, 0.0, 0.0, 1.0, dt * smp.curvature, 0.0, 0.0, 1.0],
        ));
        b_seq.push(DMatrix::from_row_slice(
            3,
            2,
            &[0.0, 0.0, dt * v / WHEELBASE, 0.0, 0.0, dt],
        ));
    }
    let c = DMatrix::<f64>::identity(3, 3);
    let sigma_w = DMatrix::<f64>::identity(3, 3) * noise.sigma_w;
    let sigma_z = DMatrix::<f64>::identity(3, 3) * noise.sigma_z;
    let sigma_e =
        DMatrix::from_diagonal(&DVector::from_vec(vec![noise.sigma_e_steer, noise.sigma_e_accel]));

    // Finite-horizon LQR backward pass for the feedback gains. The terminal
    // cost is the frozen-time steady-state solution at the last step, so the
    // gains keep full authority through the end of the horizon.
    let q_cost = DMatrix::<f64>::identity(3, 3);
    let r_cost = DMatrix::<f64>::identity(2, 2) * 0.1;
    let mut k_seq = vec![DMatrix::<f64>::zeros(2, 3); horizon];
    let mut p_cost = q_cost.clone();
    {
        let a = &a_seq[horizon - 1];
        let b = &b_seq[horizon - 1];
        for _ in 0..500 {
            let btp = b.transpose() * &p_cost;
            let gram = &r_cost + &btp * b;
            let chol = Cholesky::new(gram)
                .ok_or_else(|| Error::conditioning("LQR input gram matrix is not SPD"))?;
            let k = -chol.solve(&(&btp * a));
            let mut next = &q_cost + a.transpose() * &p_cost * (a + b * &k);
            crate::linalg::symmetrize(&mut next);
            let delta = (&next - &p_cost).abs().max();
            p_cost = next;
            if delta < 1.0e-12 {
                break;
            }
        }
    }
    for n in (0..horizon).rev() {
        let a = &a_seq[n];
        let b = &b_seq[n];
        let btp = b.transpose() * &p_cost;
        let gram = &r_cost + &btp * b;
        let chol = Cholesky::new(gram)
            .ok_or_else(|| Error::conditioning("LQR input gram matrix is not SPD"))?;
        let k = -chol.solve(&(&btp * a));
        p_cost = &q_cost + a.transpose() * &p_cost * (a + b * &k);
        crate::linalg::symmetrize(&mut p_cost);
        k_seq[n] = k;
    }

    // Per-step steady-state Kalman design for the observer gains,
    // warm-started along the horizon.
    let mut l_seq = Vec::with_capacity(horizon);
    let mut p_est = sigma_w.clone();
    for a in a_seq.iter().take(horizon) {
        for _ in 0..500 {
            let innov = &c * &p_est * c.transpose() + &sigma_z;
            let chol = Cholesky::new(innov)
                .ok_or_else(|| Error::conditioning("innovation covariance is not SPD"))?;
            let gain = a * &p_est * c.transpose() * chol.inverse();
            let mut next = a * &p_est * a.transpose() + &sigma_w
                - &gain * (&c * &p_est * a.transpose());
            crate::linalg::symmetrize(&mut next);
            let delta = (&next - &p_est).abs().max();
            p_est = next;
            if delta < 1.0e-12 {
                break;
            }
        }
        let innov = &c * &p_est * c.transpose() + &sigma_z;
        let chol = Cholesky::new(innov)
            .ok_or_else(|| Error::conditioning("innovation covariance is not SPD"))?;
        l_seq.push(-(a * &p_est * c.transpose() * chol.inverse()));
    }

    let sys = SystemTrajectory {
        horizon,
        dt,
        p: 3,
        q: 2,
        r: 3,
        a: a_seq,
        b: b_seq,
        c: vec![c; horizon],
        k: k_seq,
        l: l_seq,
        sigma_w: vec![sigma_w; horizon],
        sigma_z: vec![sigma_z; horizon],
        sigma_e,
    };
    sys.check_dimensions()?;
    let report = sys.validate()?;
    if !report.is_clean() {
        return Err(Error::InvalidConfig {
            context: format!(
                "synthesized vehicle system fails validation: {} violation(s), first at step {:?}",
                report.violations.len(),
                report.violations.first().map(|v| v.step)
            ),
        });
    }
    Ok(ScenarioBundle {
        sys,
        reference: Some(path.clone()),
        labels: vec!["lateral_error".into(), "heading_error".into(), "speed_error".into()],
        notes: "kinematic bicycle path-tracking errors with LQR feedback and Kalman observer"
            .into(),
    })
}

/// The vehicle scenario on its default S-curve (50 s at 20 Hz).
pub fn vehicle_default(horizon: usize) -> Result<ScenarioBundle> {
    let path = ReferencePath::s_curve(600.0, 1.0, 0.05);
    vehicle_scenario(&path, horizon, &VehicleNoise::default())
}

/// Looks a scenario up by name for configuration files.
pub fn by_name(name: &str, horizon: usize) -> Result<ScenarioBundle> {
    match name {
        "example1" => example1_bundle(horizon),
        "vehicle" => vehicle_default(horizon),
        other => Err(Error::InvalidConfig {
            context: format!("unknown scenario '{other}' (expected example1 or vehicle)"),
        }),
    }
}

/// A reproducible experiment plan: which seeds calibrate the threshold and
/// which seeds run attacked trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub scenario: String,
    pub sys_fingerprint: String,
    pub horizon: usize,
    pub dt: f64,
    pub window: usize,
    pub kappa: usize,
    pub false_alarm_rate: f64,
    pub attack_start_step: usize,
    pub blend_steps: usize,
    pub base_seed: u64,
    pub calibration_seeds: Vec<u64>,
    pub trial_seeds: Vec<u64>,
}

/// Lays out the seeds for a calibrate-then-attack experiment. Calibration
/// realizations use the first `calibration_count` derived seeds and trials
/// the following `trial_count`, so the two sets never overlap.
#[allow(clippy::too_many_arguments)]
pub fn experiment_protocol(
    bundle: &ScenarioBundle,
    scenario: &str,
    window: usize,
    kappa: usize,
    false_alarm_rate: f64,
    calibration_count: usize,
    trial_count: usize,
    attack_start_s: f64,
    blend_s: f64,
    base_seed: u64,
) -> Result<ExperimentManifest> {
    let sys = &bundle.sys;
    if !(attack_start_s >= 0.0) || !(blend_s >= 0.0) {
        return Err(Error::InvalidConfig {
            context: "attack start and blend must be nonnegative".into(),
        });
    }
    let attack_start_step = (attack_start_s / sys.dt).round() as usize;
    if attack_start_step >= sys.horizon {
        return Err(Error::InvalidConfig {
            context: format!(
                "attack start {attack_start_s} s is step {attack_start_step}, past horizon {}",
                sys.horizon
            ),
        });
    }
    let blend_steps = (blend_s / sys.dt).ceil() as usize;
    let calibration_seeds =
        (0..calibration_count).map(|j| derive_seed(base_seed, j as u64)).collect();
    let trial_seeds = (calibration_count..calibration_count + trial_count)
        .map(|j| derive_seed(base_seed, j as u64))
        .collect();
    Ok(ExperimentManifest {
        scenario: scenario.to_string(),
        sys_fingerprint: sys.fingerprint(),
        horizon: sys.horizon,
        dt: sys.dt,
        window,
        kappa,
        false_alarm_rate,
        attack_start_step,
        blend_steps,
        base_seed,
        calibration_seeds,
        trial_seeds,
    })
}
