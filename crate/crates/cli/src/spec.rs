//! Versioned experiment description shared by `train`, `sweep`,
//! `analyze-decay` and `params`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dnsd::benchmark::MAX_LEVEL;
use dnsd::layers::{Family, Flags, MapKind, ModelConfig};
use dnsd::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io;

pub const SPEC_FORMAT: &str = "dnsd-experiment";
pub const SPEC_VERSION: u32 = 1;
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated community benchmark at a perturbation level.
    Synthetic { level: u32 },
    /// A dataset file with its own split.
    External { path: PathBuf },
}

impl DatasetSpec {
    pub fn level(&self) -> Option<u32> {
        match self {
            DatasetSpec::Synthetic { level } => Some(*level),
            DatasetSpec::External { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub format: String,
    pub version: u32,
    pub dataset: DatasetSpec,
    pub family: Family,
    pub map: MapKind,
    pub flags: Flags,
    pub depths: Vec<usize>,
    /// Each train seed selects a training graph and seeds initialization.
    pub train_seeds: Vec<u64>,
    /// Graphs pooled for test accuracy; unused for external data.
    pub test_seeds: Vec<u64>,
    pub hidden: usize,
    pub d: usize,
    pub train: TrainConfig,
    pub out: PathBuf,
    /// Dataset cache; `<out>/cache` when absent.
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            format: SPEC_FORMAT.into(),
            version: SPEC_VERSION,
            dataset: DatasetSpec::Synthetic { level: 5 },
            family: Family::Dnsd,
            map: MapKind::Diag,
            flags: Flags::new(true, true, false),
            depths: vec![2, 4, 8, 12, 16],
            train_seeds: (42..=47).collect(),
            test_seeds: (100..=102).collect(),
            hidden: 18,
            d: 3,
            train: TrainConfig::default(),
            out: PathBuf::from("runs"),
            cache_dir: None,
            workers: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| CliError::Spec(e.to_string()))?;
        if spec.format != SPEC_FORMAT {
            return Err(CliError::Spec(format!(
                "format {:?}, expected {SPEC_FORMAT:?}",
                spec.format
            )));
        }
        if spec.version != SPEC_VERSION {
            return Err(dnsd::Error::Version {
                found: spec.version.to_string(),
                expected: SPEC_VERSION.to_string(),
            }
            .into());
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out.join("cache"))
    }

    /// Label of the single model variant, e.g. `dnsd diag adj+odd`.
    pub fn variant_label(&self) -> String {
        variant_label(self.family, self.map, self.flags)
    }

    /// Model configuration for one run. `in_dim` and `classes` come from
    /// the data.
    pub fn model_config(&self, in_dim: usize, classes: usize, depth: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            family: self.family,
            map: self.map,
            flags: self.flags,
            in_dim,
            classes,
            hidden: self.hidden,
            d: self.d,
            layers: depth,
            seed,
        }
    }

    /// Every check that can be made without touching the data.
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(CliError::Spec("depth list is empty".into()));
        }
        if self.depths.contains(&0) {
            return Err(CliError::Spec("depths must be positive".into()));
        }
        if self.train_seeds.is_empty() {
            return Err(CliError::Spec("train seed list is empty".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Spec("workers must be at least 1".into()));
        }
        distinct("depths", &self.depths)?;
        distinct("train seeds", &self.train_seeds)?;
        distinct("test seeds", &self.test_seeds)?;
        if let DatasetSpec::Synthetic { level } = self.dataset {
            if level > MAX_LEVEL {
                return Err(CliError::Spec(format!("level {level} exceeds G{MAX_LEVEL}")));
            }
            if self.test_seeds.is_empty() {
                return Err(CliError::Spec("test seed list is empty".into()));
            }
            let train: BTreeSet<_> = self.train_seeds.iter().collect();
            let shared: Vec<String> = self
                .test_seeds
                .iter()
                .filter(|s| train.contains(s))
                .map(|s| s.to_string())
                .collect();
            if !shared.is_empty() {
                return Err(CliError::Spec(format!(
                    "train and test seeds overlap on {}",
                    shared.join(",")
                )));
            }
        }
        self.train.validate()?;
        for &depth in &self.depths {
            self.model_config(1, 1, depth, 0).validate()?;
        }
        Ok(())
    }
}

fn distinct<T: Ord + std::fmt::Display>(what: &str, values: &[T]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for v in values {
        if !seen.insert(v) {
            return Err(CliError::Spec(format!("{what} list repeats {v}")));
        }
    }
    Ok(())
}

pub fn variant_label(family: Family, map: MapKind, flags: Flags) -> String {
    match family {
        Family::Mlp => "mlp".into(),
        Family::Nsd => format!("nsd {map}"),
        Family::Dnsd => format!("dnsd {map} {flags}"),
    }
}

/// Command-line values that replace fields of a loaded spec.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub level: Option<u32>,
    pub external: Option<PathBuf>,
    pub depths: Option<Vec<usize>>,
    pub family: Option<Family>,
    pub map: Option<MapKind>,
    /// `Some` when any flag switch was given; replaces the whole set.
    pub flags: Option<Flags>,
    pub train_seeds: Option<Vec<u64>>,
    pub test_seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(self, spec: &mut ExperimentSpec) {
        if let Some(level) = self.level {
            spec.dataset = DatasetSpec::Synthetic { level };
        }
        if let Some(path) = self.external {
            spec.dataset = DatasetSpec::External { path };
        }
        if let Some(family) = self.family {
            spec.family = family;
            // Flags belong to DNSD; switching family without naming flags
            // drops them instead of producing an invalid spec.
            if family != Family::Dnsd && self.flags.is_none() {
                spec.flags = Flags::default();
            }
        }
        set(&mut spec.depths, self.depths);
        set(&mut spec.map, self.map);
        set(&mut spec.flags, self.flags);
        set(&mut spec.train_seeds, self.train_seeds);
        set(&mut spec.test_seeds, self.test_seeds);
        set(&mut spec.out, self.out);
        if self.cache_dir.is_some() {
            spec.cache_dir = self.cache_dir;
        }
        set(&mut spec.workers, self.workers);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
