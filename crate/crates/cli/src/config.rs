//! Run configuration: a TOML file, `--set key=value` overrides, and the
//! hash every artifact is stamped with.

use std::path::{Path, PathBuf};

use mvscan_core::cohort::{Modality, View};
use mvscan_core::models::{InitKind, InitStrategy, ARCH_3D, REGISTRY};
use mvscan_core::pretrain::EffectiveConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Root for relative output directories when set.
pub const HOME_ENV: &str = "MVSCAN_HOME";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub kind: InitKind,
    /// Domain weights are read from `<dir>/<architecture>/<view>/domain.ckpt`
    /// (the layout `pretrain` writes), generic ones from
    /// `<dir>/<architecture>/generic.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { kind: InitKind::Random, checkpoint_dir: None }
    }
}

impl InitConfig {
    pub fn strategy(&self, architecture: &str, view: View) -> CliResult<InitStrategy> {
        let dir =
            || self.checkpoint_dir.clone().ok_or_else(|| CliError::Config(format!("init.kind = {} needs init.checkpoint_dir", self.kind)));
        Ok(match self.kind {
            InitKind::Random => InitStrategy::random(),
            InitKind::DomainPretrained => InitStrategy::domain(dir()?.join(architecture).join(view.as_str()).join("domain.ckpt")),
            InitKind::GenericPretrained => InitStrategy::generic(dir()?.join(architecture).join("generic.ckpt")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub max_epochs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 8, max_epochs: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub max_epochs: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self { max_epochs: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub bootstrap_iterations: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { bootstrap_iterations: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Empty means every modality in the manifest.
    pub modalities: Vec<Modality>,
    pub views: Vec<View>,
    /// Candidate architectures for tuning, CV and selection.
    pub architectures: Vec<String>,
    pub init: InitConfig,
    /// Train, validation and test fractions.
    pub split_ratios: [f64; 3],
    pub tune: EffectiveConfig,
    pub cv: CvConfig,
    pub retrain: RetrainConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.csv"),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            modalities: Vec::new(),
            views: View::ALL.to_vec(),
            architectures: vec!["alexnet-class".into(), "vit-class".into(), "swin-class".into()],
            init: InitConfig::default(),
            split_ratios: [0.70, 0.10, 0.20],
            tune: EffectiveConfig::fine_tune(),
            cv: CvConfig::default(),
            retrain: RetrainConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Config(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as TOML, falling back to a bare
/// string.
fn parse_override(s: &str) -> CliResult<(String, toml::Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let value = match format!("v = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Reads `path` (defaults when `None`) and applies the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut table, &k, v)?;
        }
        let config: RunConfig = toml::Value::Table(table).try_into().map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let err = |m: String| Err(CliError::Config(m));
        if self.views.is_empty() || self.architectures.is_empty() {
            return err("views and architectures must be non-empty".into());
        }
        if let Some(a) = self.architectures.iter().find(|a| a.as_str() != ARCH_3D && !REGISTRY.contains(&a.as_str())) {
            return err(format!("unknown architecture `{a}`; known: {}, {ARCH_3D}", REGISTRY.join(", ")));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|&r| r <= 0.0) {
            return err(format!("split ratios {:?} must be positive and sum to 1", self.split_ratios));
        }
        if self.cv.folds < 2 || self.cv.max_epochs == 0 || self.retrain.max_epochs == 0 || self.tune.patience == 0 {
            return err("folds ≥ 2 and positive epoch budgets and patience are required".into());
        }
        if self.tune.max_trials == 0 || self.tune.augment_multiplier == 0 {
            return err("tune.max_trials and tune.augment_multiplier must be positive".into());
        }
        self.tune.search_space().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.tune.plan().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Output directory; relative paths resolve under `$MVSCAN_HOME` when set.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(HOME_ENV) {
            Some(home) if self.out_dir.is_relative() => PathBuf::from(home).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\narchitectures = [\"tiny-test-cnn\"]\n[tune]\nmax_trials = 7\n").unwrap();
        let c = RunConfig::load(Some(&path), &["tune.max_trials=5".into(), "seed=9".into(), "out_dir=elsewhere".into()]).unwrap();
        assert_eq!((c.seed, c.tune.max_trials, c.tune.eta), (9, 5, 3));
        assert_eq!(c.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.architectures, vec!["tiny-test-cnn"]);
        let d = RunConfig::load(Some(&path), &[]).unwrap();
        assert_ne!(c.hash(), d.hash());
        assert_eq!(d.hash(), RunConfig::load(Some(&path), &[]).unwrap().hash());
    }

    #[test]
    fn bad_values_are_config_errors() {
        for o in ["architectures=[\"resnet\"]", "split_ratios=[0.5, 0.5, 0.5]", "nonsense=1", "cv.folds=1"] {
            assert!(matches!(RunConfig::load(None, &[o.into()]), Err(CliError::Config(_))), "{o}");
        }
    }
}
