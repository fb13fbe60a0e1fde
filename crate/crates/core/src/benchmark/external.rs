use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::SplitMix64;

use super::cache::Document;
use super::{DatasetBundle, Split};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Per-class 60/20/20 split. Within each class the nodes are shuffled and
/// cut at `round(0.6 m)` and `round(0.8 m)`.
pub fn stratified_split(labels: &[usize], seed: u64) -> Split {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = SplitMix64::new(seed);
    let mut split = Split::default();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut members);
        let m = members.len() as f64;
        let a = (0.6 * m).round() as usize;
        let b = (0.8 * m).round() as usize;
        split.train.extend_from_slice(&members[..a]);
        split.val.extend_from_slice(&members[a..b]);
        split.test.extend_from_slice(&members[b..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Parses a graph JSON document. `fallback_name` is used when the document
/// has no `name`; the name seeds the split when none is supplied.
pub fn parse_external(text: &str, fallback_name: &str) -> Result<DatasetBundle> {
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::json(fallback_name, e))?;
    if doc.config.is_some() {
        return Err(Error::Format(
            "config: external graphs do not carry a generator config".into(),
        ));
    }
    doc.validate()?;
    let name = doc.name.clone().unwrap_or_else(|| fallback_name.to_string());
    let split = match doc.split.clone() {
        Some(s) => s,
        None => stratified_split(&doc.labels, fnv1a(name.as_bytes())),
    };
    doc.into_bundle(name, split)
}

pub fn load_external(path: &Path) -> Result<DatasetBundle> {
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{}: not UTF-8", path.display())))?;
    let stem = path
        .file_stem()
        .map_or_else(|| "external".to_string(), |s| s.to_string_lossy().into_owned());
    parse_external(&text, &stem).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Json { source, .. } => Error::json(path.display().to_string(), source),
        other => other,
    })
}
