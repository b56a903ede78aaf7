//! Seeded simulation of watermarked closed-loop realizations, singly or as
//! ensembles.
//!
//! Every realization is a pure function of the system, the attack
//! configuration, and one seed: plant noise and the watermark come from one
//! deterministic stream, attack noise from a second stream derived from the
//! attack seed, so the same inputs always reproduce the same trajectory
//! bit for bit, serially or in parallel.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attacks::{AttackMode, AttackSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SystemTrajectory;

/// One simulated run. Vector sequences are stored as column matrices
/// (column n = step n): states cover steps 0..=n_steps, per-step signals
/// cover 0..n_steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    /// True state x_n, p×(n_steps+1).
    pub x: DMatrix<f64>,
    /// Observer state x̂_n, p×(n_steps+1).
    pub xhat: DMatrix<f64>,
    /// Measurements y_n, r×n_steps.
    pub y: DMatrix<f64>,
    /// Watermark draws e_n, q×n_steps.
    pub e: DMatrix<f64>,
    /// Total input u_n = K_n x̂_n + e_n, q×n_steps.
    pub u: DMatrix<f64>,
    /// Attack additive term v_n (zero when unattacked), r×n_steps.
    pub v: DMatrix<f64>,
    /// Per-step attack activity flag.
    pub attack_active: Vec<bool>,
    /// Seed this run was generated from.
    pub seed: u64,
    /// Realized process/measurement noise, kept only when requested.
    pub noise: Option<NoiseLog>,
}

/// Realized noise vectors, retained for debugging and replay checks.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLog {
    /// w_n, p×n_steps.
    pub w: DMatrix<f64>,
    /// z_n, r×n_steps.
    pub z: DMatrix<f64>,
}

impl Realization {
    pub fn n_steps(&self) -> usize {
        self.y.ncols()
    }

    pub fn x_at(&self, n: usize) -> DVectorView<'_, f64> {
        self.x.column(n)
    }

    pub fn xhat_at(&self, n: usize) -> DVectorView<'_, f64> {
        self.xhat.column(n)
    }

    pub fn y_at(&self, n: usize) -> DVectorView<'_, f64> {
        self.y.column(n)
    }

    pub fn e_at(&self, n: usize) -> DVectorView<'_, f64> {
        self.e.column(n)
    }
}

/// A batch of independent realizations of one system under one attack
/// configuration, with per-realization seeds derived from `base_seed`.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub realizations: Vec<Realization>,
    pub sys_fingerprint: String,
    pub base_seed: u64,
}

impl EnsembleRun {
    pub fn count(&self) -> usize {
        self.realizations.len()
    }
}

/// Options for a single run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Retain realized w_n, z_n in the result.
    pub record_noise: bool,
}

/// Derives the seed for realization `index` of an ensemble from the
/// ensemble's base seed. Stable across processes and platforms.
pub fn derive_seed(base_seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ltv-realization");
    h.update(base_seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

fn attack_stream_seed(attack_seed: u64, realization_seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ltv-attack");
    h.update(attack_seed.to_le_bytes());
    h.update(realization_seed.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Draws one watermark sample e ~ N(0, Σ_e) via the Cholesky factor of the
/// covariance.
pub fn draw_watermark<R: Rng + ?Sized>(rng: &mut R, sigma_e: &DMatrix<f64>) -> Result<DVector<f64>> {
    let l = linalg::cholesky_factor(sigma_e, "sigma_e in draw_watermark")?;
    Ok(linalg::sample_gaussian(rng, &l))
}

/// Advances the plant and observer by one step.
///
/// Returns `(x_{n+1}, x̂_{n+1}, y_n)` where
/// `y_n = C_n x_n + z_n + v_n`,
/// `x_{n+1} = A_n x_n + B_n K_n x̂_n + B_n e_n + w_n`, and
/// `x̂_{n+1} = (Ā_n + L_n C_n) x̂_n + B_n e_n − L_n y_n`.
#[allow(clippy::too_many_arguments)]
pub fn step(
    sys: &SystemTrajectory,
    n: usize,
    x_n: &DVector<f64>,
    xhat_n: &DVector<f64>,
    e_n: &DVector<f64>,
    w_n: &DVector<f64>,
    z_n: &DVector<f64>,
    v_n: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    if n >= sys.horizon {
        return Err(Error::IndexOutOfRange { index: n, horizon: sys.horizon });
    }
    let dims_ok = x_n.len() == sys.p
        && xhat_n.len() == sys.p
        && e_n.len() == sys.q
        && w_n.len() == sys.p
        && z_n.len() == sys.r
        && v_n.len() == sys.r;
    if !dims_ok {
        return Err(Error::dim(format!("step {n}: input vector dimensions")));
    }
    let y_n = &sys.c[n] * x_n + z_n + v_n;
    let x_next = &sys.a[n] * x_n + &sys.b[n] * (&sys.k[n] * xhat_n) + &sys.b[n] * e_n + w_n;
    let abar = sys.closed_loop_matrix(n)?;
    let obs = abar + &sys.l[n] * &sys.c[n];
    let xhat_next = obs * xhat_n + &sys.b[n] * e_n - &sys.l[n] * &y_n;
    Ok((x_next, xhat_next, y_n))
}

/// Runs one realization of `n_steps` steps from zero initial conditions.
pub fn run_realization(
    sys: &SystemTrajectory,
    attack: Option<&AttackSpec>,
    seed: u64,
    n_steps: usize,
) -> Result<Realization> {
    run_realization_opts(sys, attack, seed, n_steps, RunOptions::default())
}

/// [`run_realization`] with explicit options.
pub fn run_realization_opts(
    sys: &SystemTrajectory,
    attack: Option<&AttackSpec>,
    seed: u64,
    n_steps: usize,
    opts: RunOptions,
) -> Result<Realization> {
    sys.check_dimensions()?;
    if n_steps > sys.horizon {
        return Err(Error::IndexOutOfRange { index: n_steps, horizon: sys.horizon });
    }
    if let Some(spec) = attack {
        spec.check(sys)?;
    }
    let (p, q, r) = (sys.p, sys.q, sys.r);

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut attack_rng = attack
        .map(|spec| ChaCha20Rng::seed_from_u64(attack_stream_seed(spec.seed, seed)));

    let chol_e = linalg::cholesky_factor(&sys.sigma_e, "sigma_e")?;

    let mut out = Realization {
        x: DMatrix::zeros(p, n_steps + 1),
        xhat: DMatrix::zeros(p, n_steps + 1),
        y: DMatrix::zeros(r, n_steps),
        e: DMatrix::zeros(q, n_steps),
        u: DMatrix::zeros(q, n_steps),
        v: DMatrix::zeros(r, n_steps),
        attack_active: vec![false; n_steps],
        seed,
        noise: opts.record_noise.then(|| NoiseLog {
            w: DMatrix::zeros(p, n_steps),
            z: DMatrix::zeros(r, n_steps),
        }),
    };

    let mut x = DVector::<f64>::zeros(p);
    let mut xhat = DVector::<f64>::zeros(p);
    // False state of the generalized attack; unused in replay mode.
    let mut xi = DVector::<f64>::zeros(p);

    for n in 0..n_steps {
        // Plant-stream draw order per step: watermark, process noise,
        // measurement noise. Factors are per step because the covariances
        // are time-varying.
        let e_n = linalg::sample_gaussian(&mut rng, &chol_e);
        let chol_w = linalg::cholesky_factor(&sys.sigma_w[n], "sigma_w")?;
        let w_n = linalg::sample_gaussian(&mut rng, &chol_w);
        let chol_z = linalg::cholesky_factor(&sys.sigma_z[n], "sigma_z")?;
        let z_n = linalg::sample_gaussian(&mut rng, &chol_z);

        let mut v_n = DVector::<f64>::zeros(r);
        let mut active = false;
        if let (Some(spec), Some(arng)) = (attack, attack_rng.as_mut()) {
            if n >= spec.start_step {
                active = true;
                match spec.mode {
                    AttackMode::Generalized => {
                        // Attack-stream draw order per attacked step: the
                        // false measurement noise first, then the false
                        // process noise driving the next false state.
                        v_n = spec.attack_value(sys, n, &x, &z_n, &xi, arng)?;
                        xi = spec.false_state_step(sys, n, &xi, arng)?;
                    }
                    AttackMode::Replay => {
                        let y_true = &sys.c[n] * &x + &z_n;
                        v_n = spec.replay_attack_value(sys, n, &y_true)?;
                    }
                }
            }
        }

        let (x_next, xhat_next, y_n) = step(sys, n, &x, &xhat, &e_n, &w_n, &z_n, &v_n)?;
        out.e.set_column(n, &e_n);
        out.u.set_column(n, &(&sys.k[n] * &xhat + &e_n));
        out.y.set_column(n, &y_n);
        out.v.set_column(n, &v_n);
        out.attack_active[n] = active;
        if let Some(log) = out.noise.as_mut() {
            log.w.set_column(n, &w_n);
            log.z.set_column(n, &z_n);
        }
        x = x_next;
        xhat = xhat_next;
        out.x.set_column(n + 1, &x);
        out.xhat.set_column(n + 1, &xhat);
    }
    Ok(out)
}

/// Runs `count` independent realizations with seeds derived from
/// `base_seed`. Realization `j` depends only on `(sys, attack, base_seed, j)`,
/// so parallel and serial execution produce identical ensembles.
pub fn run_ensemble(
    sys: &SystemTrajectory,
    attack: Option<&AttackSpec>,
    count: usize,
    base_seed: u64,
    n_steps: usize,
) -> Result<EnsembleRun> {
    if count == 0 {
        return Err(Error::InvalidConfig { context: "ensemble count must be >= 1".into() });
    }
    let realizations: Result<Vec<Realization>> = (0..count as u64)
        .into_par_iter()
        .map(|j| run_realization(sys, attack, derive_seed(base_seed, j), n_steps))
        .collect();
    Ok(EnsembleRun {
        realizations: realizations?,
        sys_fingerprint: sys.fingerprint(),
        base_seed,
    })
}

const RUN_MAGIC: &[u8; 8] = b"LTVWRUN1";
const RUN_VERSION: u32 = 1;

impl Realization {
    /// CSV rows with one line per step: the step index, then the state,
    /// observer state, measurement, watermark, input, and attack columns,
    /// then the attack flag.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("n");
        let label = |out: &mut String, name: &str, count: usize| {
            for i in 0..count {
                out.push_str(&format!(",{name}{i}"));
            }
        };
        let p = self.x.nrows();
        let q = self.e.nrows();
        let r = self.y.nrows();
        label(&mut header, "x", p);
        label(&mut header, "xhat", p);
        label(&mut header, "y", r);
        label(&mut header, "e", q);
        label(&mut header, "u", q);
        label(&mut header, "v", r);
        header.push_str(",attack_active\n");
        let mut out = header;
        for n in 0..self.n_steps() {
            out.push_str(&n.to_string());
            for col in [self.x.column(n), self.xhat.column(n)] {
                for v in col.iter() {
                    out.push_str(&format!(",{v:.12e}"));
                }
            }
            for col in [
                self.y.column(n),
                self.e.column(n),
                self.u.column(n),
                self.v.column(n),
            ] {
                for v in col.iter() {
                    out.push_str(&format!(",{v:.12e}"));
                }
            }
            out.push_str(&format!(",{}\n", self.attack_active[n] as u8));
        }
        out
    }

    /// Serializes the full run to the versioned binary format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = crate::io::BinWriter::new();
        w.magic(RUN_MAGIC);
        w.u32(RUN_VERSION);
        w.u64(self.seed);
        w.u32(self.x.nrows() as u32);
        w.u32(self.e.nrows() as u32);
        w.u32(self.y.nrows() as u32);
        w.u64(self.n_steps() as u64);
        w.u8(self.noise.is_some() as u8);
        w.matrix(&self.x);
        w.matrix(&self.xhat);
        w.matrix(&self.y);
        w.matrix(&self.e);
        w.matrix(&self.u);
        w.matrix(&self.v);
        for &a in &self.attack_active {
            w.u8(a as u8);
        }
        if let Some(log) = &self.noise {
            w.matrix(&log.w);
            w.matrix(&log.z);
        }
        w.into_bytes()
    }

    /// Parses the versioned binary format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = crate::io::BinReader::new(bytes);
        rd.expect_magic(RUN_MAGIC)?;
        let version = rd.u32()?;
        if version != RUN_VERSION {
            return Err(Error::Format { context: format!("unsupported run version {version}") });
        }
        let seed = rd.u64()?;
        let p = rd.u32()? as usize;
        let q = rd.u32()? as usize;
        let r = rd.u32()? as usize;
        let n_steps = rd.u64()? as usize;
        let has_noise = rd.u8()? != 0;
        let x = rd.matrix(p, n_steps + 1)?;
        let xhat = rd.matrix(p, n_steps + 1)?;
        let y = rd.matrix(r, n_steps)?;
        let e = rd.matrix(q, n_steps)?;
        let u = rd.matrix(q, n_steps)?;
        let v = rd.matrix(r, n_steps)?;
        let mut attack_active = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            attack_active.push(rd.u8()? != 0);
        }
        let noise = if has_noise {
            Some(NoiseLog { w: rd.matrix(p, n_steps)?, z: rd.matrix(r, n_steps)? })
        } else {
            None
        };
        Ok(Realization { x, xhat, y, e, u, v, attack_active, seed, noise })
    }
}
