use std::path::{Path, PathBuf};

use dnsd::benchmark::{cache_path, load_or_generate, CacheStatus, SyntheticConfig};
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenerateSummary {
    pub dir: PathBuf,
    pub files: usize,
    pub written: usize,
    pub unchanged: usize,
}

/// Ensure one cache file per (level, seed). Files whose contents already
/// match are left untouched; a tampered file fails its checksum.
pub fn generate(dir: &Path, levels: &[u32], seeds: &[u64]) -> Result<GenerateSummary> {
    if levels.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("generate needs at least one level and one seed".into()));
    }
    let mut summary = GenerateSummary {
        dir: dir.to_path_buf(),
        files: 0,
        written: 0,
        unchanged: 0,
    };
    for &level in levels {
        for &seed in seeds {
            let config = SyntheticConfig::new(level, seed);
            config.validate()?;
            match load_or_generate(dir, &config)?.1 {
                CacheStatus::Hit => summary.unchanged += 1,
                CacheStatus::Miss => {
                    eprintln!("wrote {}", cache_path(dir, &config).display());
                    summary.written += 1;
                }
            }
            summary.files += 1;
        }
    }
    Ok(summary)
}
