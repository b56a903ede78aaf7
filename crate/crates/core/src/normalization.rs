//! Normalization factors for the watermark test: the observer-error
//! covariance Σ_{δ,n}, the per-step residual whitening matrix V_n, and the
//! per-window temporal correlation matrix G_n, each with an analytic path
//! and an ensemble estimator.
//!
//! V_n whitens the unattacked residual C_n x̂_n − y_n so its covariance is
//! the identity. G_n captures how strongly whitened residuals at different
//! steps of one sliding window correlate, summarized per step pair as a
//! single correlation scalar tr(E[ψ_{j'} ψ_jᵀ])/tr(S).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{self, BinReader, BinWriter};
use crate::linalg;
use crate::model::{hex_string, SystemTrajectory};
use crate::simulate::EnsembleRun;

/// How a set of normalization tables was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Analytic,
    Ensemble { count: usize },
}

/// Observer-error covariances Σ_{δ,n} for n = 0..=up_to, by the forward
/// recursion Σ_{δ,n+1} = Ă_n Σ_{δ,n} Ă_nᵀ + Σ_{w,n} + L_n Σ_{z,n} L_nᵀ with
/// Ă_n = A_n + L_n C_n and Σ_{δ,0} = 0.
pub fn sigma_delta(sys: &SystemTrajectory, up_to: usize) -> Result<Vec<DMatrix<f64>>> {
    if up_to > sys.horizon {
        return Err(Error::IndexOutOfRange { index: up_to, horizon: sys.horizon });
    }
    let mut out = Vec::with_capacity(up_to + 1);
    let mut sd = DMatrix::<f64>::zeros(sys.p, sys.p);
    out.push(sd.clone());
    for n in 0..up_to {
        let au = sys.observer_loop_matrix(n)?;
        sd = &au * &sd * au.transpose()
            + &sys.sigma_w[n]
            + &sys.l[n] * &sys.sigma_z[n] * sys.l[n].transpose();
        linalg::symmetrize(&mut sd);
        out.push(sd.clone());
    }
    Ok(out)
}

/// The residual whitening matrix V_n = (C_n Σ_{δ,n} C_nᵀ + Σ_{z,n})^{-1/2}
/// (inverse principal square root).
pub fn matrix_normalizer(
    sys: &SystemTrajectory,
    sigma_delta_n: &DMatrix<f64>,
    n: usize,
) -> Result<DMatrix<f64>> {
    if n >= sys.horizon {
        return Err(Error::IndexOutOfRange { index: n, horizon: sys.horizon });
    }
    let m = &sys.c[n] * sigma_delta_n * sys.c[n].transpose() + &sys.sigma_z[n];
    linalg::inv_sqrt_spd(&m, &format!("residual covariance at step {n}"))
}

/// Ensemble estimate of V_n: the inverse principal square root of the
/// residual second moment across realizations at step n.
pub fn vn_ensemble(
    sys: &SystemTrajectory,
    ensemble: &EnsembleRun,
    n: usize,
) -> Result<DMatrix<f64>> {
    let count = ensemble.count();
    if count < sys.r + 1 {
        return Err(Error::InsufficientSamples { needed: sys.r + 1, got: count });
    }
    let mut second_moment = DMatrix::<f64>::zeros(sys.r, sys.r);
    for real in &ensemble.realizations {
        if n >= real.n_steps() {
            return Err(Error::IndexOutOfRange { index: n, horizon: real.n_steps() });
        }
        let res = &sys.c[n] * real.xhat_at(n) - real.y_at(n);
        second_moment.ger(1.0, &res, &res, 1.0);
    }
    second_moment /= count as f64;
    linalg::symmetrize(&mut second_moment);
    linalg::inv_sqrt_spd(&second_moment, &format!("ensemble residual moment at step {n}"))
}

/// S = blkdiag(I_r, Σ_e), the scale matrix of the window statistic.
pub fn s_matrix(r: usize, sigma_e: &DMatrix<f64>) -> DMatrix<f64> {
    let q = sigma_e.nrows();
    let mut s = DMatrix::<f64>::zeros(r + q, r + q);
    for i in 0..r {
        s[(i, i)] = 1.0;
    }
    s.view_mut((r, r), (q, q)).copy_from(sigma_e);
    s
}

/// tr(S) = r + tr(Σ_e).
pub fn trace_s(r: usize, sigma_e: &DMatrix<f64>) -> f64 {
    r as f64 + sigma_e.trace()
}

/// Correlation source term for step j: R_j = Ă_j Σ_{δ,j} C_jᵀ + L_j Σ_{z,j}.
/// The whitened-residual cross covariance at lag i > 0 is then
/// E[res_{j+i} res_jᵀ] = C_{j+i} Ă_{j+i-1}·…·Ă_{j+1} R_j.
fn correlation_source(
    sys: &SystemTrajectory,
    sigma_delta_j: &DMatrix<f64>,
    j: usize,
) -> Result<DMatrix<f64>> {
    Ok(sys.observer_loop_matrix(j)? * sigma_delta_j * sys.c[j].transpose()
        + &sys.l[j] * &sys.sigma_z[j])
}

/// Analytic temporal correlation matrix G_n for the window ending at step n.
///
/// Entry (a, b) with window steps j = n−ℓ+a, j' = n−ℓ+b, a < b, is
/// tr(V_jᵀ V_{j'} C_{j'} Φ(j'−1, j+1) R_j)/tr(S) where Φ chains the
/// observer-loop matrices and R_j is the correlation source term. Diagonal
/// entries are exactly 1; the delayed watermark block contributes only
/// there, because watermark draws at distinct steps are independent.
pub fn gn_analytic(
    sys: &SystemTrajectory,
    v: &[DMatrix<f64>],
    sigma_delta: &[DMatrix<f64>],
    n: usize,
    window: usize,
    kappa: usize,
) -> Result<DMatrix<f64>> {
    let ell = window.checked_sub(1).filter(|_| window >= 2).ok_or(Error::InvalidConfig {
        context: "window must be >= 2".into(),
    })?;
    if n < ell + kappa {
        return Err(Error::InvalidConfig {
            context: format!("window ending at {n} extends before step kappa={kappa}"),
        });
    }
    if v.len() <= n || sigma_delta.len() <= n {
        return Err(Error::IndexOutOfRange { index: n, horizon: v.len().min(sigma_delta.len()) });
    }
    let trs = trace_s(sys.r, &sys.sigma_e);
    let mut g = DMatrix::<f64>::identity(ell + 1, ell + 1);
    let j0 = n - ell;
    for a in 0..ell {
        let j = j0 + a;
        let mut m = correlation_source(sys, &sigma_delta[j], j)?;
        for b in (a + 1)..=ell {
            let jp = j0 + b;
            let cross = &sys.c[jp] * &m;
            let value = (v[j].transpose() * &v[jp] * cross).trace() / trs;
            g[(a, b)] = value;
            g[(b, a)] = value;
            if b < ell {
                m = sys.observer_loop_matrix(jp)? * m;
            }
        }
    }
    Ok(g)
}

/// Banded storage of the analytic correlation entries: `bands[i-1][j]` holds
/// the correlation of steps (j, j+i) for lags i = 1..=ell. Windows assemble
/// from the bands because the entry depends only on the step pair, not on
/// the window end.
#[derive(Debug, Clone, PartialEq)]
pub struct GnBands {
    pub ell: usize,
    pub bands: Vec<Vec<f64>>,
}

/// Builds the correlation bands for all step pairs up to `up_to` in one
/// forward pass. Each stored source term M_j = Φ(n−1, j+1) R_j is advanced
/// by one observer-loop factor per step, so the cost is linear in the
/// horizon for a fixed window.
pub fn gn_bands(
    sys: &SystemTrajectory,
    v: &[DMatrix<f64>],
    sigma_delta: &[DMatrix<f64>],
    up_to: usize,
    ell: usize,
) -> Result<GnBands> {
    if up_to >= sys.horizon {
        return Err(Error::IndexOutOfRange { index: up_to, horizon: sys.horizon });
    }
    if v.len() <= up_to || sigma_delta.len() <= up_to {
        return Err(Error::dim("V/sigma_delta tables shorter than requested band range"));
    }
    let trs = trace_s(sys.r, &sys.sigma_e);
    let mut bands: Vec<Vec<f64>> =
        (1..=ell).map(|i| vec![0.0; (up_to + 1).saturating_sub(i)]).collect();
    // Sliding store of (j, M_j) for the last `ell` steps.
    let mut store: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(ell + 1);
    if up_to == 0 || ell == 0 {
        return Ok(GnBands { ell, bands });
    }
    store.push((0, correlation_source(sys, &sigma_delta[0], 0)?));
    for n in 1..=up_to {
        let aund_n = sys.observer_loop_matrix(n)?;
        for (j, m) in store.iter() {
            let lag = n - j;
            let cross = &sys.c[n] * m;
            bands[lag - 1][*j] = (v[*j].transpose() * &v[n] * cross).trace() / trs;
        }
        for (_, m) in store.iter_mut() {
            *m = &aund_n * &*m;
        }
        if n < up_to {
            store.push((n, correlation_source(sys, &sigma_delta[n], n)?));
            if store.len() > ell {
                store.remove(0);
            }
        }
    }
    Ok(GnBands { ell, bands })
}

impl GnBands {
    /// Assembles G_n for the window ending at step n.
    pub fn window_matrix(&self, n: usize, kappa: usize) -> Result<DMatrix<f64>> {
        let ell = self.ell;
        if n < ell + kappa {
            return Err(Error::InvalidConfig {
                context: format!("window ending at {n} extends before step kappa={kappa}"),
            });
        }
        let j0 = n - ell;
        let mut g = DMatrix::<f64>::identity(ell + 1, ell + 1);
        for a in 0..ell {
            for b in (a + 1)..=ell {
                let lag = b - a;
                let j = j0 + a;
                let value = *self.bands[lag - 1].get(j).ok_or(Error::IndexOutOfRange {
                    index: n,
                    horizon: self.bands[lag - 1].len() + lag,
                })?;
                g[(a, b)] = value;
                g[(b, a)] = value;
            }
        }
        Ok(g)
    }
}

/// Ensemble estimate of G_n plus quality flags.
#[derive(Debug, Clone)]
pub struct GnEstimate {
    pub g: DMatrix<f64>,
    /// Fewer realizations than window columns; the raw average is rank
    /// deficient and the SPD floor did real work.
    pub underdetermined: bool,
    /// The eigenvalue floor had to raise at least one eigenvalue.
    pub floored: bool,
}

/// Ensemble estimate of G_n: the average of P_nᵀP_n/tr(S) over realizations,
/// symmetrized, floored to positive definite, and rescaled to unit diagonal.
pub fn gn_ensemble(
    sys: &SystemTrajectory,
    ensemble: &EnsembleRun,
    v: &[DMatrix<f64>],
    n: usize,
    window: usize,
    kappa: usize,
) -> Result<GnEstimate> {
    let ell = window.checked_sub(1).filter(|_| window >= 2).ok_or(Error::InvalidConfig {
        context: "window must be >= 2".into(),
    })?;
    if n < ell + kappa {
        return Err(Error::InvalidConfig {
            context: format!("window ending at {n} extends before step kappa={kappa}"),
        });
    }
    let count = ensemble.count();
    if count < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: count });
    }
    let trs = trace_s(sys.r, &sys.sigma_e);
    let dim = sys.q + sys.r;
    let mut g = DMatrix::<f64>::zeros(ell + 1, ell + 1);
    let mut p = DMatrix::<f64>::zeros(dim, ell + 1);
    for real in &ensemble.realizations {
        if n >= real.n_steps() {
            return Err(Error::IndexOutOfRange { index: n, horizon: real.n_steps() });
        }
        for col in 0..=ell {
            let j = n - ell + col;
            let res = &v[j] * (&sys.c[j] * real.xhat_at(j) - real.y_at(j));
            p.view_mut((0, col), (sys.r, 1)).copy_from(&res);
            p.view_mut((sys.r, col), (sys.q, 1)).copy_from(&real.e_at(j - kappa));
        }
        g.gemm_tr(1.0, &p, &p, 1.0);
    }
    g /= count as f64 * trs;
    linalg::symmetrize(&mut g);

    // Floor eigenvalues to keep G invertible, then restore the exact unit
    // diagonal by congruence scaling.
    let floor = 1e-10;
    let eig = g.clone().symmetric_eigen();
    let floored = eig.eigenvalues.iter().any(|&l| l < floor);
    if floored {
        let mut scaled = eig.eigenvectors.clone();
        for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
            scaled.column_mut(i).scale_mut(lambda.max(floor));
        }
        g = &scaled * eig.eigenvectors.transpose();
        linalg::symmetrize(&mut g);
    }
    let mut scale = Vec::with_capacity(ell + 1);
    for i in 0..=ell {
        let d = g[(i, i)];
        if d <= 0.0 {
            return Err(Error::conditioning(format!(
                "nonpositive diagonal {d:.3e} in ensemble G at window end {n}"
            )));
        }
        scale.push(d.sqrt().recip());
    }
    for a in 0..=ell {
        for b in 0..=ell {
            g[(a, b)] *= scale[a] * scale[b];
        }
    }
    Ok(GnEstimate { g, underdetermined: count < window, floored })
}

/// Storage for the per-window correlation matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum GnStore {
    /// Analytic entries shared across windows, stored by lag band.
    Bands(GnBands),
    /// Explicit per-window-end matrices (ensemble estimates).
    PerWindow(BTreeMap<usize, DMatrix<f64>>),
}

/// Per-step whitening and per-window correlation tables bound to one system.
///
/// Tables carry a copy of the measurement matrices and the watermark
/// covariance so that detection can run from a realization and the tables
/// alone; the fingerprint ties them to the generating system.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationTables {
    pub window: usize,
    pub kappa: usize,
    pub sys_fingerprint: String,
    /// V_n for n = 0..=up_to.
    pub v: Vec<DMatrix<f64>>,
    /// Σ_{δ,n} for n = 0..=up_to.
    pub sigma_delta: Vec<DMatrix<f64>>,
    /// C_n for n = 0..=up_to (copied from the system).
    pub c: Vec<DMatrix<f64>>,
    /// Σ_e (copied from the system).
    pub sigma_e: DMatrix<f64>,
    pub g: GnStore,
    pub provenance: Provenance,
}

impl NormalizationTables {
    /// Builds analytic tables covering steps 0..=up_to (up_to < horizon).
    pub fn analytic(
        sys: &SystemTrajectory,
        up_to: usize,
        window: usize,
        kappa: usize,
    ) -> Result<Self> {
        if window < 2 {
            return Err(Error::InvalidConfig { context: "window must be >= 2".into() });
        }
        if kappa == 0 {
            return Err(Error::InvalidConfig { context: "kappa must be >= 1".into() });
        }
        if up_to >= sys.horizon {
            return Err(Error::IndexOutOfRange { index: up_to, horizon: sys.horizon });
        }
        let sd = sigma_delta(sys, up_to)?;
        let mut v = Vec::with_capacity(up_to + 1);
        for n in 0..=up_to {
            v.push(matrix_normalizer(sys, &sd[n], n)?);
        }
        let bands = gn_bands(sys, &v, &sd, up_to, window - 1)?;
        Ok(NormalizationTables {
            window,
            kappa,
            sys_fingerprint: sys.fingerprint(),
            v,
            sigma_delta: sd,
            c: sys.c.iter().take(up_to + 1).cloned().collect(),
            sigma_e: sys.sigma_e.clone(),
            g: GnStore::Bands(bands),
            provenance: Provenance::Analytic,
        })
    }

    /// Builds tables from an unattacked ensemble: V_n by the per-step
    /// residual moment estimator, G_n by the per-window average. Σ_{δ,n} is
    /// kept from the analytic recursion for reference.
    pub fn from_ensemble(
        sys: &SystemTrajectory,
        ensemble: &EnsembleRun,
        up_to: usize,
        window: usize,
        kappa: usize,
    ) -> Result<Self> {
        if window < 2 {
            return Err(Error::InvalidConfig { context: "window must be >= 2".into() });
        }
        if kappa == 0 {
            return Err(Error::InvalidConfig { context: "kappa must be >= 1".into() });
        }
        if ensemble.sys_fingerprint != sys.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: ensemble.sys_fingerprint.clone(),
                actual: sys.fingerprint(),
            });
        }
        let sd = sigma_delta(sys, up_to.min(sys.horizon))?;
        let mut v = Vec::with_capacity(up_to + 1);
        for n in 0..=up_to {
            v.push(vn_ensemble(sys, ensemble, n)?);
        }
        let ell = window - 1;
        let mut g = BTreeMap::new();
        for n in (ell + kappa)..=up_to {
            g.insert(n, gn_ensemble(sys, ensemble, &v, n, window, kappa)?.g);
        }
        Ok(NormalizationTables {
            window,
            kappa,
            sys_fingerprint: sys.fingerprint(),
            v,
            sigma_delta: sd,
            c: sys.c.iter().take(up_to + 1).cloned().collect(),
            sigma_e: sys.sigma_e.clone(),
            g: GnStore::PerWindow(g),
            provenance: Provenance::Ensemble { count: ensemble.count() },
        })
    }

    /// Last step covered by the per-step tables.
    pub fn up_to(&self) -> usize {
        self.v.len().saturating_sub(1)
    }

    /// Measurement dimension r.
    pub fn r(&self) -> usize {
        self.v.first().map_or(0, |m| m.nrows())
    }

    /// Watermark dimension q.
    pub fn q(&self) -> usize {
        self.sigma_e.nrows()
    }

    /// The correlation matrix for the window ending at step n.
    pub fn g_matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        match &self.g {
            GnStore::Bands(bands) => bands.window_matrix(n, self.kappa),
            GnStore::PerWindow(map) => map.get(&n).cloned().ok_or(Error::IndexOutOfRange {
                index: n,
                horizon: map.keys().next_back().map_or(0, |k| k + 1),
            }),
        }
    }
}

/// JSON manifest written next to the binary table file.
#[derive(Debug, Serialize, Deserialize)]
pub struct TablesManifest {
    pub version: u32,
    pub sys_fingerprint: String,
    pub window: usize,
    pub kappa: usize,
    pub provenance: Provenance,
    pub steps_covered: usize,
    pub bin_sha256: String,
}

const TABLES_MAGIC: &[u8; 8] = b"LTVWTBL1";
const TABLES_VERSION: u32 = 1;

impl NormalizationTables {
    /// Serializes to the versioned binary format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new();
        w.magic(TABLES_MAGIC);
        w.u32(TABLES_VERSION);
        w.str(&self.sys_fingerprint);
        w.u32(self.window as u32);
        w.u32(self.kappa as u32);
        match self.provenance {
            Provenance::Analytic => {
                w.u8(0);
                w.u64(0);
            }
            Provenance::Ensemble { count } => {
                w.u8(1);
                w.u64(count as u64);
            }
        }
        let len = self.v.len();
        let p = self.sigma_delta.first().map_or(0, |m| m.nrows());
        let q = self.q();
        let r = self.r();
        w.u32(p as u32);
        w.u32(q as u32);
        w.u32(r as u32);
        w.u64(len as u64);
        w.matrix(&self.sigma_e);
        for m in &self.c {
            w.matrix(m);
        }
        for m in &self.sigma_delta {
            w.matrix(m);
        }
        for m in &self.v {
            w.matrix(m);
        }
        match &self.g {
            GnStore::Bands(bands) => {
                w.u8(0);
                w.u32(bands.ell as u32);
                for band in &bands.bands {
                    w.u64(band.len() as u64);
                    for &x in band {
                        w.f64(x);
                    }
                }
            }
            GnStore::PerWindow(map) => {
                w.u8(1);
                w.u64(map.len() as u64);
                for (n, m) in map {
                    w.u64(*n as u64);
                    w.matrix(m);
                }
            }
        }
        w.into_bytes()
    }

    /// Parses the versioned binary format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = BinReader::new(bytes);
        rd.expect_magic(TABLES_MAGIC)?;
        let version = rd.u32()?;
        if version != TABLES_VERSION {
            return Err(Error::Format {
                context: format!("unsupported tables version {version}"),
            });
        }
        let fingerprint = rd.str()?;
        let window = rd.u32()? as usize;
        let kappa = rd.u32()? as usize;
        let prov_tag = rd.u8()?;
        let prov_count = rd.u64()? as usize;
        let provenance = match prov_tag {
            0 => Provenance::Analytic,
            1 => Provenance::Ensemble { count: prov_count },
            t => return Err(Error::Format { context: format!("unknown provenance tag {t}") }),
        };
        let p = rd.u32()? as usize;
        let q = rd.u32()? as usize;
        let r = rd.u32()? as usize;
        let len = rd.u64()? as usize;
        let sigma_e = rd.matrix(q, q)?;
        let mut c = Vec::with_capacity(len);
        for _ in 0..len {
            c.push(rd.matrix(r, p)?);
        }
        let mut sd = Vec::with_capacity(len);
        for _ in 0..len {
            sd.push(rd.matrix(p, p)?);
        }
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(rd.matrix(r, r)?);
        }
        let g = match rd.u8()? {
            0 => {
                let ell = rd.u32()? as usize;
                let mut bands = Vec::with_capacity(ell);
                for _ in 0..ell {
                    let blen = rd.u64()? as usize;
                    let mut band = Vec::with_capacity(blen);
                    for _ in 0..blen {
                        band.push(rd.f64()?);
                    }
                    bands.push(band);
                }
                GnStore::Bands(GnBands { ell, bands })
            }
            1 => {
                let count = rd.u64()? as usize;
                let mut map = BTreeMap::new();
                for _ in 0..count {
                    let n = rd.u64()? as usize;
                    map.insert(n, rd.matrix(window, window)?);
                }
                GnStore::PerWindow(map)
            }
            t => return Err(Error::Format { context: format!("unknown G storage tag {t}") }),
        };
        Ok(NormalizationTables {
            window,
            kappa,
            sys_fingerprint: fingerprint,
            v,
            sigma_delta: sd,
            c,
            sigma_e,
            g,
            provenance,
        })
    }

    /// Writes `<stem>.bin` and `<stem>.json` (manifest) atomically.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let digest = {
            let mut h = Sha256::new();
            h.update(&bytes);
            hex_string(&h.finalize())
        };
        let manifest = TablesManifest {
            version: TABLES_VERSION,
            sys_fingerprint: self.sys_fingerprint.clone(),
            window: self.window,
            kappa: self.kappa,
            provenance: self.provenance,
            steps_covered: self.v.len(),
            bin_sha256: digest,
        };
        io::write_bytes_atomic(&stem.with_extension("bin"), &bytes)?;
        io::write_string_atomic(
            &stem.with_extension("json"),
            &serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Loads `<stem>.bin`, checking its hash against `<stem>.json`.
    pub fn load(stem: &Path) -> Result<Self> {
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        let manifest: TablesManifest =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let digest = {
            let mut h = Sha256::new();
            h.update(&bytes);
            hex_string(&h.finalize())
        };
        if digest != manifest.bin_sha256 {
            return Err(Error::Format {
                context: "tables binary does not match manifest hash".into(),
            });
        }
        let tables = Self::from_bytes(&bytes)?;
        if tables.sys_fingerprint != manifest.sys_fingerprint
            || tables.window != manifest.window
            || tables.kappa != manifest.kappa
        {
            return Err(Error::Format {
                context: "tables binary disagrees with manifest metadata".into(),
            });
        }
        Ok(tables)
    }
}
