use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ltv_watermark::detector::{calibrate_threshold, detect, DetectorConfig};
use ltv_watermark::io::write_string_atomic;
use ltv_watermark::model::{SystemTrajectory, KAPPA_TOL};
use ltv_watermark::normalization::NormalizationTables;
use ltv_watermark::simulate::{derive_seed, run_realization};
use ltv_watermark::{AttackSpec, DetectionReport, ValidationReport};

use crate::config::{AttackConfig, ExperimentConfig, TableSource};

/// Sidecar written next to the tables with the calibrated threshold and
/// everything needed to audit where it came from.
#[derive(Debug, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub config_hash: String,
    pub scenario: String,
    pub sys_fingerprint: String,
    pub window: usize,
    pub kappa: usize,
    pub use_g: bool,
    pub tables: TableSource,
    pub false_alarm_rate: f64,
    pub threshold: f64,
    pub calibration_runs: usize,
    pub pooled_samples: usize,
}

#[derive(Debug, Serialize)]
struct RunRecord {
    index: usize,
    seed: u64,
    first_alarm_step: Option<usize>,
    alarm_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pre_attack_alarm_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detection_step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detection_latency_steps: Option<usize>,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    config_hash: String,
    scenario: String,
    sys_fingerprint: String,
    horizon: usize,
    window: usize,
    kappa: usize,
    use_g: bool,
    threshold: f64,
    false_alarm_rate: f64,
    trial_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    attack: Option<AttackConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attack_start_step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    blend_steps: Option<usize>,
    mean_alarm_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_pre_attack_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detection_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    median_latency_steps: Option<f64>,
    runs: Vec<RunRecord>,
}

fn validated_bundle(config: &ExperimentConfig) -> Result<(ltv_watermark::ScenarioBundle, ValidationReport)> {
    let bundle = config.bundle()?;
    let report = bundle.sys.validate()?;
    Ok((bundle, report))
}

fn require_clean(report: &ValidationReport) -> Result<()> {
    if report.is_clean() {
        return Ok(());
    }
    let shown: Vec<String> = report
        .violations
        .iter()
        .take(5)
        .map(|v| format!("{:?} at step {} (value {:.4e})", v.assumption, v.step, v.value))
        .collect();
    bail!(
        "scenario violates {} modeling assumptions, first: {}",
        report.violations.len(),
        shown.join("; ")
    );
}

fn attack_start_step(attack: &AttackConfig, sys: &SystemTrajectory, horizon: usize) -> Result<usize> {
    if !(attack.attack_start_s >= 0.0) {
        bail!("attack_start_s must be >= 0, got {}", attack.attack_start_s);
    }
    if attack.blend_s < 0.0 {
        bail!("blend_s must be >= 0, got {}", attack.blend_s);
    }
    let step = (attack.attack_start_s / sys.dt).round() as usize;
    if step >= horizon {
        bail!(
            "attack starts at step {step} ({} s) but the run is only {horizon} steps",
            attack.attack_start_s
        );
    }
    Ok(step)
}

/// Concrete attack for one trial. Replay mode records the trial's own
/// clean trajectory and plays it back, shifted by the replay offset.
fn build_attack(
    attack: &AttackConfig,
    sys: &SystemTrajectory,
    horizon: usize,
    trial_seed: u64,
) -> Result<AttackSpec> {
    let start = attack_start_step(attack, sys, horizon)?;
    match attack.mode.as_str() {
        "generalized" => {
            if attack.omega_scale <= 0.0 || attack.zeta_scale <= 0.0 {
                bail!(
                    "generalized attack needs positive omega_scale and zeta_scale, got {} / {}",
                    attack.omega_scale,
                    attack.zeta_scale
                );
            }
            let mut spec = AttackSpec::generalized(
                attack.alpha,
                attack.omega_scale * &sys.sigma_w[0],
                attack.zeta_scale * &sys.sigma_z[0],
                attack.seed,
            );
            spec.start_step = start;
            spec.blend_duration = attack.blend_s;
            Ok(spec)
        }
        "replay" => {
            let offset_s = attack.replay_offset_s.unwrap_or(attack.attack_start_s);
            let offset = (offset_s / sys.dt).round() as i64;
            let clean = run_realization(sys, None, trial_seed, horizon)?;
            Ok(AttackSpec::replay(clean, start, attack.blend_s, offset))
        }
        other => bail!("unknown attack mode {other:?}; expected \"generalized\" or \"replay\""),
    }
}

struct Calibration {
    tables: NormalizationTables,
    threshold: f64,
    pooled_samples: usize,
}

/// Build tables and a pooled threshold from unattacked runs.
fn calibrate_pipeline(
    sys: &SystemTrajectory,
    config: &ExperimentConfig,
    window: usize,
    kappa: usize,
) -> Result<Calibration> {
    let horizon = config.horizon;
    let mut realizations = Vec::with_capacity(config.ensemble_count);
    for j in 0..config.ensemble_count as u64 {
        realizations.push(run_realization(sys, None, derive_seed(config.base_seed, j), horizon)?);
    }
    let tables = match config.tables {
        TableSource::Analytic => NormalizationTables::analytic(sys, horizon - 1, window, kappa)?,
        TableSource::Ensemble => {
            let ensemble = ltv_watermark::EnsembleRun {
                realizations: realizations.clone(),
                sys_fingerprint: sys.fingerprint(),
                base_seed: config.base_seed,
            };
            NormalizationTables::from_ensemble(sys, &ensemble, horizon - 1, window, kappa)?
        }
    };
    let detector = DetectorConfig {
        window,
        kappa,
        threshold: f64::INFINITY,
        use_g: config.use_g,
        false_alarm_rate: config.false_alarm_rate,
    };
    let valid_from = window - 1 + kappa;
    let mut pool = Vec::with_capacity(config.ensemble_count * (horizon - valid_from));
    for real in &realizations {
        pool.extend_from_slice(&detect(real, &tables, &detector)?.nll[valid_from..]);
    }
    let threshold = calibrate_threshold(&pool, config.false_alarm_rate)?;
    Ok(Calibration { tables, threshold, pooled_samples: pool.len() })
}

pub fn calibrate(config: &ExperimentConfig) -> Result<()> {
    let (bundle, report) = validated_bundle(config)?;
    require_clean(&report)?;
    let sys = &bundle.sys;
    let kappa = config.resolve_kappa(sys)?;
    let cal = calibrate_pipeline(sys, config, config.window, kappa)?;

    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    cal.tables.save(&config.output_dir.join("tables"))?;
    let threshold_file = ThresholdFile {
        config_hash: config.hash(),
        scenario: config.scenario.clone(),
        sys_fingerprint: sys.fingerprint(),
        window: config.window,
        kappa,
        use_g: config.use_g,
        tables: config.tables,
        false_alarm_rate: config.false_alarm_rate,
        threshold: cal.threshold,
        calibration_runs: config.ensemble_count,
        pooled_samples: cal.pooled_samples,
    };
    let text = serde_json::to_string_pretty(&threshold_file)?;
    write_string_atomic(&config.output_dir.join("threshold.json"), &text)?;

    println!(
        "calibrated {}: kappa = {}, window = {}, threshold = {:.4} at rate {} ({} runs, {} pooled samples)",
        config.scenario,
        kappa,
        config.window,
        cal.threshold,
        config.false_alarm_rate,
        config.ensemble_count,
        cal.pooled_samples
    );
    Ok(())
}

fn load_threshold(dir: &Path) -> Result<ThresholdFile> {
    let path = dir.join("threshold.json");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}; run calibrate first", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn run(config: &ExperimentConfig) -> Result<()> {
    let (bundle, report) = validated_bundle(config)?;
    require_clean(&report)?;
    let sys = &bundle.sys;
    let horizon = config.horizon;

    let tables = NormalizationTables::load(&config.output_dir.join("tables"))?;
    if tables.sys_fingerprint != sys.fingerprint() {
        bail!(
            "tables in {} were calibrated for a different system (fingerprint {} vs {})",
            config.output_dir.display(),
            &tables.sys_fingerprint[..12],
            &sys.fingerprint()[..12]
        );
    }
    if tables.up_to() + 1 < horizon {
        bail!("tables cover {} steps but the config asks for {horizon}", tables.up_to() + 1);
    }
    if config.window != tables.window {
        bail!(
            "config window {} disagrees with the calibrated window {}; recalibrate or fix the config",
            config.window,
            tables.window
        );
    }
    let threshold_file = load_threshold(&config.output_dir)?;
    if threshold_file.sys_fingerprint != sys.fingerprint() {
        bail!("threshold.json belongs to a different system; recalibrate");
    }

    let detector = DetectorConfig {
        window: tables.window,
        kappa: tables.kappa,
        threshold: threshold_file.threshold,
        use_g: config.use_g,
        false_alarm_rate: config.false_alarm_rate,
    };
    let valid_from = tables.window - 1 + tables.kappa;
    let start_step = match &config.attack {
        Some(attack) => Some(attack_start_step(attack, sys, horizon)?),
        None => None,
    };
    let blend_steps = config.attack.as_ref().map(|attack| {
        if attack.blend_s <= 0.0 { 1 } else { (attack.blend_s / sys.dt).ceil() as usize }
    });

    let mut records = Vec::with_capacity(config.trial_count);
    let mut latencies = Vec::new();
    for j in 0..config.trial_count {
        let seed = derive_seed(config.base_seed, (config.ensemble_count + j) as u64);
        let attack = match &config.attack {
            Some(attack) => Some(build_attack(attack, sys, horizon, seed)?),
            None => None,
        };
        let real = run_realization(sys, attack.as_ref(), seed, horizon)?;
        let rep = detect(&real, &tables, &detector)?;
        write_string_atomic(&config.output_dir.join(format!("run_{j:03}.csv")), &rep.to_csv())?;
        records.push(record_for(j, seed, &rep, start_step, valid_from, &mut latencies));
    }

    let mean_alarm =
        records.iter().map(|r| r.alarm_fraction).sum::<f64>() / records.len().max(1) as f64;
    let (detection_rate, median_latency, mean_pre) = match start_step {
        Some(_) => {
            let detected = records.iter().filter(|r| r.detection_step.is_some()).count();
            let pre = records.iter().filter_map(|r| r.pre_attack_alarm_fraction).sum::<f64>()
                / records.len().max(1) as f64;
            (Some(detected as f64 / records.len().max(1) as f64), median(&mut latencies), Some(pre))
        }
        None => (None, None, None),
    };

    let summary = RunSummary {
        config_hash: config.hash(),
        scenario: config.scenario.clone(),
        sys_fingerprint: sys.fingerprint(),
        horizon,
        window: tables.window,
        kappa: tables.kappa,
        use_g: config.use_g,
        threshold: threshold_file.threshold,
        false_alarm_rate: config.false_alarm_rate,
        trial_count: config.trial_count,
        attack: config.attack.clone(),
        attack_start_step: start_step,
        blend_steps,
        mean_alarm_fraction: mean_alarm,
        mean_pre_attack_fraction: mean_pre,
        detection_rate,
        median_latency_steps: median_latency,
        runs: records,
    };
    let text = serde_json::to_string_pretty(&summary)?;
    write_string_atomic(&config.output_dir.join("summary.json"), &text)?;

    match (detection_rate, median_latency) {
        (Some(rate), Some(latency)) => println!(
            "ran {} trials on {}: detection rate {rate:.2}, median latency {latency:.1} steps",
            config.trial_count, config.scenario
        ),
        (Some(rate), None) => println!(
            "ran {} trials on {}: detection rate {rate:.2}",
            config.trial_count, config.scenario
        ),
        _ => println!(
            "ran {} unattacked trials on {}: mean alarm fraction {mean_alarm:.4} (target {})",
            config.trial_count, config.scenario, config.false_alarm_rate
        ),
    }
    Ok(())
}

fn record_for(
    index: usize,
    seed: u64,
    rep: &DetectionReport,
    start_step: Option<usize>,
    valid_from: usize,
    latencies: &mut Vec<usize>,
) -> RunRecord {
    let (pre, detection_step, latency) = match start_step {
        Some(start) => {
            let pre_span = start.saturating_sub(valid_from);
            let pre = if pre_span > 0 {
                let hits = rep.alarms[valid_from..start].iter().filter(|&&a| a).count();
                Some(hits as f64 / pre_span as f64)
            } else {
                None
            };
            let detection = rep.alarms[start..].iter().position(|&a| a).map(|off| start + off);
            let latency = detection.map(|step| step - start);
            if let Some(l) = latency {
                latencies.push(l);
            }
            (pre, detection, latency)
        }
        None => (None, None, None),
    };
    RunRecord {
        index,
        seed,
        first_alarm_step: rep.first_alarm_step,
        alarm_fraction: rep.alarm_fraction(),
        pre_attack_alarm_fraction: pre,
        detection_step,
        detection_latency_steps: latency,
    }
}

fn median(values: &mut Vec<usize>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid] as f64
    } else {
        (values[mid - 1] + values[mid]) as f64 / 2.0
    })
}

#[derive(Debug, Serialize)]
struct SweepFailure {
    window: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    error: String,
}

pub fn sweep(config: &ExperimentConfig) -> Result<()> {
    let grid = config
        .sweep
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("sweep needs a \"sweep\" section in the config"))?;
    if grid.windows.is_empty() {
        bail!("sweep grid is empty: \"windows\" has no entries");
    }
    let alphas: Vec<Option<f64>> = match (&config.attack, grid.alphas.is_empty()) {
        (Some(attack), false) => {
            if attack.mode == "replay" {
                bail!("an alpha grid only applies to the generalized attack");
            }
            grid.alphas.iter().copied().map(Some).collect()
        }
        (Some(_), true) => vec![None],
        (None, false) => bail!("an alpha grid needs an \"attack\" section to scale"),
        (None, true) => vec![None],
    };

    let (bundle, report) = validated_bundle(config)?;
    require_clean(&report)?;
    let sys = &bundle.sys;
    let kappa = config.resolve_kappa(sys)?;

    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let mut rows = String::from("window,alpha,detection_rate,median_latency_steps,false_alarm_rate,trials\n");
    let mut failures = Vec::new();
    for &window in &grid.windows {
        for alpha in &alphas {
            match sweep_point(config, sys, window, kappa, *alpha) {
                Ok(row) => rows.push_str(&row),
                Err(e) => failures.push(SweepFailure {
                    window,
                    alpha: *alpha,
                    error: format!("{e:#}"),
                }),
            }
        }
    }
    write_string_atomic(&config.output_dir.join("sweep.csv"), &rows)?;

    let failures_path = config.output_dir.join("sweep_failures.json");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
        println!(
            "swept {} grid points -> {}",
            grid.windows.len() * alphas.len(),
            config.output_dir.join("sweep.csv").display()
        );
        Ok(())
    } else {
        let manifest = serde_json::json!({
            "config_hash": config.hash(),
            "failures": failures,
        });
        write_string_atomic(&failures_path, &serde_json::to_string_pretty(&manifest)?)?;
        bail!(
            "{} of {} grid points failed; partial results kept in {} and {}",
            failures.len(),
            grid.windows.len() * alphas.len(),
            config.output_dir.join("sweep.csv").display(),
            failures_path.display()
        );
    }
}

/// One grid point: calibrate at this window, run attacked trials at this
/// alpha, and measure the realized false-alarm rate on fresh clean runs.
fn sweep_point(
    config: &ExperimentConfig,
    sys: &SystemTrajectory,
    window: usize,
    kappa: usize,
    alpha: Option<f64>,
) -> Result<String> {
    let horizon = config.horizon;
    let cal = calibrate_pipeline(sys, config, window, kappa)?;
    let detector = DetectorConfig {
        window,
        kappa,
        threshold: cal.threshold,
        use_g: config.use_g,
        false_alarm_rate: config.false_alarm_rate,
    };

    let attack_config = match (&config.attack, alpha) {
        (Some(attack), Some(alpha)) => {
            let mut point = attack.clone();
            point.alpha = alpha;
            Some(point)
        }
        (Some(attack), None) => Some(attack.clone()),
        (None, _) => None,
    };

    let mut detected = 0usize;
    let mut latencies = Vec::new();
    let trials = config.trial_count;
    if let Some(attack_config) = &attack_config {
        let start = attack_start_step(attack_config, sys, horizon)?;
        for j in 0..trials {
            let seed = derive_seed(config.base_seed, (config.ensemble_count + j) as u64);
            let attack = build_attack(attack_config, sys, horizon, seed)?;
            let real = run_realization(sys, Some(&attack), seed, horizon)?;
            let rep = detect(&real, &cal.tables, &detector)?;
            if let Some(off) = rep.alarms[start..].iter().position(|&a| a) {
                detected += 1;
                latencies.push(off);
            }
        }
    }

    let mut clean_fraction = 0.0;
    for j in 0..trials {
        let seed = derive_seed(config.base_seed, (config.ensemble_count + trials + j) as u64);
        let real = run_realization(sys, None, seed, horizon)?;
        let rep = detect(&real, &cal.tables, &detector)?;
        clean_fraction += rep.alarm_fraction();
    }
    clean_fraction /= trials.max(1) as f64;

    let alpha_cell = attack_config.as_ref().map(|a| format!("{}", a.alpha)).unwrap_or_default();
    let (rate_cell, latency_cell) = if attack_config.is_some() {
        let rate = detected as f64 / trials.max(1) as f64;
        let latency = median(&mut latencies).map(|l| format!("{l}")).unwrap_or_default();
        (format!("{rate}"), latency)
    } else {
        (String::new(), String::new())
    };
    Ok(format!("{window},{alpha_cell},{rate_cell},{latency_cell},{clean_fraction},{trials}\n"))
}

pub fn kappa(config: &ExperimentConfig) -> Result<()> {
    let (bundle, report) = validated_bundle(config)?;
    require_clean(&report)?;
    let sys = &bundle.sys;
    let measured = sys.compute_kappa(config.horizon, KAPPA_TOL, None)?;

    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let out = serde_json::json!({
        "config_hash": config.hash(),
        "scenario": config.scenario,
        "sys_fingerprint": sys.fingerprint(),
        "horizon": config.horizon,
        "kappa": measured,
        "tolerance": KAPPA_TOL,
    });
    write_string_atomic(
        &config.output_dir.join("kappa.json"),
        &serde_json::to_string_pretty(&out)?,
    )?;
    println!(
        "scenario {}: kappa = {} (visibility tolerance {:.0e} over {} steps)",
        config.scenario, measured, KAPPA_TOL, config.horizon
    );
    Ok(())
}

pub fn validate(config: &ExperimentConfig) -> Result<()> {
    let bundle = config.bundle()?;
    let report = bundle.sys.validate()?;

    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let out = serde_json::json!({
        "config_hash": config.hash(),
        "scenario": config.scenario,
        "sys_fingerprint": bundle.sys.fingerprint(),
        "horizon": config.horizon,
        "report": report,
    });
    write_string_atomic(
        &config.output_dir.join("validation.json"),
        &serde_json::to_string_pretty(&out)?,
    )?;

    println!(
        "scenario {}: spectral radii {:.4} (control loop) / {:.4} (observer loop), smallest covariance eigenvalue {:.2e}",
        config.scenario,
        report.max_norm_abar,
        report.max_norm_aunderline,
        report.min_covariance_eigenvalue
    );
    require_clean(&report)?;
    println!("no assumption violations over {} steps", bundle.sys.horizon);
    Ok(())
}
