//! Config files (TOML) and their resolution against named profiles.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dcrl_core::evalx::{EvalMode, EvalOptions};
use dcrl_core::scmgen::DatasetConfig;
use dcrl_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Environment variable naming the root under which relative outputs land.
pub const OUTPUT_ROOT_ENV: &str = "DCRL_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub fn output_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT)),
    }
}

/// Named dataset-size and epoch presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 10^5 / 10^4 / 10^4 pairs, epochs 20/50/50.
    #[default]
    Paper,
    /// 2 x 10^4 pairs, epochs 5/10/10.
    Desk,
}

impl Profile {
    pub fn dataset(self, d: usize, seed: u64) -> DatasetConfig {
        match self {
            Profile::Paper => DatasetConfig::paper(d, seed),
            Profile::Desk => DatasetConfig::desk(d, seed),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Profile::Paper => TrainConfig::default(),
            Profile::Desk => TrainConfig::desk(),
        }
    }
}

/// Optional dataset overrides on top of a profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetOverrides {
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
    pub n_test: Option<usize>,
    pub edge_prob: Option<f64>,
    pub w_min: Option<f64>,
}

impl DatasetOverrides {
    pub fn apply(&self, mut c: DatasetConfig) -> DatasetConfig {
        if let Some(v) = self.n_train {
            c.n_train = v;
        }
        if let Some(v) = self.n_val {
            c.n_val = v;
        }
        if let Some(v) = self.n_test {
            c.n_test = v;
        }
        if let Some(v) = self.edge_prob {
            c.edge_prob = v;
        }
        if let Some(v) = self.w_min {
            c.w_min = v;
        }
        c
    }
}

/// Overlays `over` onto `base`. Tables merge key by key, except tables
/// carrying a `kind` tag, which replace the base value wholesale.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Deserializes `over` on top of the serialized `base`; unknown keys are
/// rejected with their name.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: Option<toml::Table>, what: &str) -> Result<T> {
    let mut value = toml::Value::try_from(base).map_err(|e| HarnessError::config(format!("{what}: {e}")))?;
    if let Some(o) = over {
        merge(&mut value, toml::Value::Table(o));
    }
    value
        .try_into()
        .map_err(|e: toml::de::Error| HarnessError::config(format!("{what}: {}", e.message())))
}

pub fn read_toml(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| HarnessError::config(format!("{}: {}", path.display(), e.message())))
}

/// Training config from a profile, an optional TOML file and CLI overrides.
pub fn load_train_config(
    profile: Profile,
    path: Option<&Path>,
    phase_epochs: Option<[usize; 3]>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let table = path.map(read_toml).transpose()?;
    let what = path.map_or("train config".to_string(), |p| p.display().to_string());
    let mut cfg: TrainConfig = overlay(&profile.train(), table, &what)?;
    if let Some(p) = phase_epochs {
        cfg.phase_epochs = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(HarnessError::config)?;
    Ok(cfg)
}

pub fn load_eval_options(path: Option<&Path>) -> Result<EvalOptions> {
    let table = path.map(read_toml).transpose()?;
    let what = path.map_or("eval config".to_string(), |p| p.display().to_string());
    overlay(&EvalOptions::default(), table, &what)
}

/// Parses `a,b,c` into three phase lengths.
pub fn parse_phase_epochs(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated epoch counts, got `{s}`"));
    }
    let mut out = [0; 3];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.parse().map_err(|_| format!("`{p}` is not a non-negative integer"))?;
    }
    Ok(out)
}

/// The experiment matrix as written in a TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    d_values: Vec<usize>,
    seeds: Vec<u64>,
    #[serde(default)]
    profile: Profile,
    #[serde(default)]
    dataset: DatasetOverrides,
    #[serde(default)]
    train: Option<toml::Table>,
    #[serde(default)]
    eval: Option<toml::Table>,
    #[serde(default = "default_modes")]
    modes: Vec<EvalMode>,
    #[serde(default = "default_true")]
    baseline: bool,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

fn default_modes() -> Vec<EvalMode> {
    vec![EvalMode::Single]
}

fn default_true() -> bool {
    true
}

/// A validated experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub profile: Profile,
    pub dataset: DatasetOverrides,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub modes: Vec<EvalMode>,
    /// Also score a random-latent baseline on every cell.
    pub baseline: bool,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, root: &Path) -> Result<Self> {
        let raw: RawExperiment = toml::from_str(text).map_err(|e| HarnessError::config(e.message()))?;
        let train = overlay(&raw.profile.train(), raw.train, "train")?;
        let eval = overlay(&EvalOptions::default(), raw.eval, "eval")?;
        let output_dir = match raw.output_dir {
            Some(p) if p.is_absolute() => p,
            Some(p) => root.join(p),
            None => root.join("matrix"),
        };
        let cfg = ExperimentConfig {
            d_values: raw.d_values,
            seeds: raw.seeds,
            profile: raw.profile,
            dataset: raw.dataset,
            train,
            eval,
            modes: raw.modes,
            baseline: raw.baseline,
            output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, root: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, root).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every cell before any work starts.
    pub fn validate(&self) -> Result<()> {
        let distinct = |n: usize, m: usize| n == m;
        if self.d_values.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::config("d_values and seeds must be non-empty"));
        }
        if !distinct(self.d_values.iter().collect::<BTreeSet<_>>().len(), self.d_values.len())
            || !distinct(self.seeds.iter().collect::<BTreeSet<_>>().len(), self.seeds.len())
        {
            return Err(HarnessError::config("d_values and seeds must not repeat"));
        }
        if self.modes.is_empty() || self.modes.iter().collect::<BTreeSet<_>>().len() != self.modes.len() {
            return Err(HarnessError::config("modes must be non-empty and distinct"));
        }
        self.train.validate().map_err(HarnessError::config)?;
        for cell in self.cells() {
            cell.dataset
                .validate()
                .map_err(|e| HarnessError::config(format!("d={}: {e}", cell.d)))?;
        }
        Ok(())
    }

    /// Cells in `d`-major order.
    pub fn cells(&self) -> Vec<CellConfig> {
        let mut out = Vec::new();
        for &d in &self.d_values {
            for &seed in &self.seeds {
                out.push(CellConfig {
                    d,
                    seed,
                    dataset: self.dataset.apply(self.profile.dataset(d, seed)),
                    train: TrainConfig {
                        seed,
                        ..self.train.clone()
                    },
                    eval: self.eval.clone(),
                    modes: self.modes.clone(),
                    baseline: self.baseline,
                });
            }
        }
        out
    }

    pub fn cell_dir(&self, cell: &CellConfig) -> PathBuf {
        self.output_dir.join(cell.name())
    }
}

/// Everything one (d, seed) cell needs; also the payload handed to a child
/// process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub d: usize,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub modes: Vec<EvalMode>,
    pub baseline: bool,
}

impl CellConfig {
    pub fn name(&self) -> String {
        format!("d{}_seed{}", self.d, self.seed)
    }

    /// Hash of the parsed config, so formatting in the source file is
    /// irrelevant but any field change is not.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("cell config serializes");
        hex::encode(Sha256::digest(json))
    }
}
