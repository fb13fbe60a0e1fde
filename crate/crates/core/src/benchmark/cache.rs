use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::sheaf::Graph;
use crate::tensor::Tensor;

use super::synthetic::{generate, SyntheticConfig, GENERATOR_VERSION};
use super::{DatasetBundle, Provenance, Split};

/// Tag distinguishing dataset caches from other JSON documents.
pub const CACHE_FORMAT: &str = "dnsd-dataset";

/// On-disk dataset layout shared by the cache and the external loader.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct Document {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SyntheticConfig>,
    pub nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Document {
    pub fn from_bundle(bundle: &DatasetBundle) -> Self {
        let f = bundle.feature_dim();
        Self {
            format: Some(CACHE_FORMAT.into()),
            version: bundle.provenance.as_ref().map(|p| p.generator_version.clone()),
            name: Some(bundle.name.clone()),
            config: bundle.provenance.as_ref().map(|p| p.config.clone()),
            nodes: bundle.n(),
            classes: Some(bundle.classes),
            features: bundle.features.data().chunks(f).map(<[f64]>::to_vec).collect(),
            labels: bundle.labels.clone(),
            edges: bundle.graph.edges().iter().map(|&(u, v)| [u, v]).collect(),
            split: Some(bundle.split.clone()),
        }
    }

    /// Field-level validation with the offending location in each message.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes;
        if n == 0 {
            return Err(Error::Format("nodes: must be positive".into()));
        }
        if self.features.len() != n {
            return Err(Error::Format(format!(
                "features: {} rows for {n} nodes",
                self.features.len()
            )));
        }
        let width = self.features[0].len();
        if width == 0 {
            return Err(Error::Format("features[0]: empty row".into()));
        }
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Format(format!(
                    "features[{i}]: width {} differs from features[0] width {width}",
                    row.len()
                )));
            }
        }
        if self.labels.len() != n {
            return Err(Error::Format(format!(
                "labels: {} entries for {n} nodes",
                self.labels.len()
            )));
        }
        if let Some(c) = self.classes {
            if let Some(i) = self.labels.iter().position(|&l| l >= c) {
                return Err(Error::Format(format!(
                    "labels[{i}]: {} is not below classes = {c}",
                    self.labels[i]
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (i, &[u, v]) in self.edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(Error::Format(format!(
                    "edges[{i}]: [{u}, {v}] references a node >= {n}"
                )));
            }
            if u == v {
                return Err(Error::Format(format!("edges[{i}]: self-loop at node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::Format(format!("edges[{i}]: duplicate edge [{u}, {v}]")));
            }
        }
        Ok(())
    }

    /// Bundle from a validated document; the split must already be present.
    pub fn into_bundle(self, name: String, split: Split) -> Result<DatasetBundle> {
        self.validate()?;
        let n = self.nodes;
        let width = self.features[0].len();
        let classes = self
            .classes
            .unwrap_or_else(|| self.labels.iter().max().map_or(0, |m| m + 1));
        let features = Tensor::new(vec![n, width], self.features.into_iter().flatten().collect())?;
        let graph = Graph::new(n, self.edges.iter().map(|&[u, v]| (u, v)))?;
        let provenance = match (self.config, self.version) {
            (Some(config), Some(generator_version)) => Some(Provenance {
                config,
                generator_version,
            }),
            _ => None,
        };
        let bundle = DatasetBundle {
            name,
            graph,
            features,
            labels: self.labels,
            classes,
            split,
            provenance,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

fn checksum(doc: &Document) -> Result<String> {
    let body = serde_json::to_vec(doc).map_err(|e| Error::json("serializing dataset", e))?;
    Ok(hex::encode(Sha256::digest(&body)))
}

/// Serializes `bundle` with a content checksum and writes it atomically.
/// Output bytes depend only on the bundle.
pub fn cache_write(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    let doc = Document::from_bundle(bundle);
    let sum = checksum(&doc)?;
    let mut value = serde_json::to_value(&doc).map_err(|e| Error::json("serializing dataset", e))?;
    value
        .as_object_mut()
        .expect("document serializes to an object")
        .insert("checksum".into(), Value::String(sum));
    let mut bytes = serde_json::to_vec(&value).map_err(|e| Error::json("serializing dataset", e))?;
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}

pub fn cache_read(path: &Path) -> Result<DatasetBundle> {
    let bytes = fsutil::read(path)?;
    let context = || path.display().to_string();
    let mut value: Value = serde_json::from_slice(&bytes).map_err(|e| Error::json(context(), e))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Format(format!("{}: expected a JSON object", context())))?;
    match obj.get("format").and_then(Value::as_str) {
        Some(CACHE_FORMAT) => {}
        other => {
            return Err(Error::Format(format!(
                "{}: format is {other:?}, expected {CACHE_FORMAT:?}",
                context()
            )))
        }
    }
    let version = obj.get("version").and_then(Value::as_str).unwrap_or("<missing>");
    if version != GENERATOR_VERSION {
        return Err(Error::Version {
            found: version.into(),
            expected: GENERATOR_VERSION.into(),
        });
    }
    let recorded = match obj.remove("checksum") {
        Some(Value::String(s)) => s,
        _ => return Err(Error::Format(format!("{}: missing checksum", context()))),
    };
    let doc: Document = serde_json::from_value(value).map_err(|e| Error::json(context(), e))?;
    let computed = checksum(&doc)?;
    if computed != recorded {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            recorded,
            computed,
        });
    }
    let name = doc.name.clone().unwrap_or_else(&context);
    let split = doc
        .split
        .clone()
        .ok_or_else(|| Error::Format(format!("{}: missing split", context())))?;
    doc.into_bundle(name, split)
}

/// Cache location for `config` under `dir`. The file name embeds a digest
/// of the full config and the generator version, so a stale or differently
/// configured cache is never picked up.
pub fn cache_path(dir: &Path, config: &SyntheticConfig) -> PathBuf {
    let key = serde_json::to_vec(&(config, GENERATOR_VERSION)).expect("config serializes");
    let digest = hex::encode(Sha256::digest(&key));
    dir.join(format!(
        "synthetic-L{:02}-s{}-{}.json",
        config.level,
        config.seed,
        &digest[..12]
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
}

/// Reads the cached bundle for `config`, generating and writing it first
/// when absent.
pub fn load_or_generate(dir: &Path, config: &SyntheticConfig) -> Result<(DatasetBundle, CacheStatus)> {
    let path = cache_path(dir, config);
    if path.exists() {
        let bundle = cache_read(&path)?;
        if bundle.provenance.as_ref().map(|p| &p.config) == Some(config) {
            return Ok((bundle, CacheStatus::Hit));
        }
    }
    let bundle = generate(config)?;
    cache_write(&bundle, &path)?;
    Ok((bundle, CacheStatus::Miss))
}
