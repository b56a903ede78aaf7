use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ltv_watermark::model::{SystemTrajectory, KAPPA_TOL};
use ltv_watermark::scenarios::{by_name, ScenarioBundle};

use crate::CommonArgs;

/// Watermark delay choice: a fixed step count, or "auto" to measure it
/// from the averaged input-to-output visibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KappaChoice {
    Fixed(usize),
    Named(String),
}

impl Default for KappaChoice {
    fn default() -> Self {
        KappaChoice::Named("auto".to_string())
    }
}

/// Where the normalization tables come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableSource {
    Analytic,
    Ensemble,
}

impl Default for TableSource {
    fn default() -> Self {
        TableSource::Analytic
    }
}

/// Attack description in experiment configs. Covariances are given as
/// strictly positive multiples of the plant's own noise covariances at
/// step 0; the default matches the plant's noise power.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// "generalized" or "replay".
    pub mode: String,
    pub alpha: f64,
    /// Σ_ω = omega_scale · Σ_w.
    pub omega_scale: f64,
    /// Σ_ζ = zeta_scale · Σ_z.
    pub zeta_scale: f64,
    pub attack_start_s: f64,
    pub blend_s: f64,
    /// Seed for the attacker's noise streams.
    pub seed: u64,
    /// Replay shift in seconds; defaults to attack_start_s, which plays
    /// the recording back from its beginning.
    pub replay_offset_s: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: "generalized".to_string(),
            alpha: -1.0,
            omega_scale: 1.0,
            zeta_scale: 1.0,
            attack_start_s: 0.0,
            blend_s: 0.0,
            seed: 0,
            replay_offset_s: None,
        }
    }
}

/// Parameter grid for the sweep command.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub windows: Vec<usize>,
    pub alphas: Vec<f64>,
}

/// One experiment: a scenario, detector settings, seeds, and an optional
/// attack. Serialized as JSON; command-line flags override single fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "example1", "vehicle", or a path to a system JSON file.
    pub scenario: String,
    /// Steps per realization.
    pub horizon: usize,
    pub window: usize,
    pub kappa: KappaChoice,
    pub false_alarm_rate: f64,
    /// Unattacked realizations used for calibration.
    pub ensemble_count: usize,
    /// Realizations simulated by run and per sweep grid point.
    pub trial_count: usize,
    pub use_g: bool,
    pub tables: TableSource,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub attack: Option<AttackConfig>,
    pub sweep: Option<SweepGrid>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: "example1".to_string(),
            horizon: 2000,
            window: 20,
            kappa: KappaChoice::default(),
            false_alarm_rate: 0.002,
            ensemble_count: 200,
            trial_count: 20,
            use_g: true,
            tables: TableSource::default(),
            base_seed: 1,
            output_dir: PathBuf::from("out"),
            attack: None,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
    }

    /// Hash of the effective config, embedded in every output so results
    /// can be traced back to the exact settings that produced them.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bundle(&self) -> Result<ScenarioBundle> {
        match self.scenario.as_str() {
            "example1" | "vehicle" => Ok(by_name(&self.scenario, self.horizon)?),
            path => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading system file {path}"))?;
                let sys = SystemTrajectory::from_json(&text)?;
                if sys.horizon < self.horizon {
                    bail!(
                        "system file covers {} steps but the config asks for {}",
                        sys.horizon,
                        self.horizon
                    );
                }
                Ok(ScenarioBundle {
                    sys,
                    reference: None,
                    labels: Vec::new(),
                    notes: format!("loaded from {path}"),
                })
            }
        }
    }

    pub fn resolve_kappa(&self, sys: &SystemTrajectory) -> Result<usize> {
        match &self.kappa {
            KappaChoice::Fixed(k) if *k >= 1 => Ok(*k),
            KappaChoice::Fixed(k) => bail!("kappa must be >= 1, got {k}"),
            KappaChoice::Named(name) if name == "auto" => {
                Ok(sys.compute_kappa(self.horizon, KAPPA_TOL, None)?)
            }
            KappaChoice::Named(name) => bail!("kappa must be \"auto\" or an integer, got {name:?}"),
        }
    }

    pub fn apply(&mut self, args: &CommonArgs) {
        if let Some(scenario) = &args.scenario {
            self.scenario = scenario.clone();
        }
        if let Some(window) = args.window {
            self.window = window;
        }
        if let Some(rate) = args.rate {
            self.false_alarm_rate = rate;
        }
        if let Some(count) = args.count {
            self.ensemble_count = count;
        }
        if let Some(seed) = args.seed {
            self.base_seed = seed;
        }
        if let Some(out) = &args.out {
            self.output_dir = out.clone();
        }
        if args.attack_start.is_some() || args.blend.is_some() || args.alpha.is_some() {
            let attack = self.attack.get_or_insert_with(AttackConfig::default);
            if let Some(start) = args.attack_start {
                attack.attack_start_s = start;
            }
            if let Some(blend) = args.blend {
                attack.blend_s = blend;
            }
            if let Some(alpha) = args.alpha {
                attack.alpha = alpha;
            }
        }
    }
}

/// Config file (or defaults) with flag overrides applied.
pub fn effective(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply(args);
    Ok(config)
}
