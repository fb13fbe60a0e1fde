//! Integer lists written as comma-separated values and inclusive ranges,
//! e.g. `42-47,100-102`.

use std::collections::BTreeSet;

/// Parse `a,b,c-d` into values in the order written. Duplicates and
/// descending ranges are rejected.
pub fn parse_list(text: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for part in text.split(',').map(str::trim) {
        if part.is_empty() {
            return Err(format!("empty item in list {text:?}"));
        }
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (parse_one(a, text)?, parse_one(b, text)?),
            None => {
                let v = parse_one(part, text)?;
                (v, v)
            }
        };
        if lo > hi {
            return Err(format!("descending range {part:?} in {text:?}"));
        }
        for v in lo..=hi {
            if !seen.insert(v) {
                return Err(format!("{v} appears twice in {text:?}"));
            }
            out.push(v);
        }
    }
    Ok(out)
}

fn parse_one(s: &str, whole: &str) -> Result<u64, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("{s:?} is not a non-negative integer (in {whole:?})"))
}

/// Inverse of [`parse_list`] that collapses consecutive runs into ranges.
pub fn format_list(values: &[u64]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < values.len() {
        let mut j = i;
        while j + 1 < values.len() && values[j + 1] == values[j] + 1 {
            j += 1;
        }
        parts.push(if j > i {
            format!("{}-{}", values[i], values[j])
        } else {
            values[i].to_string()
        });
        i = j + 1;
    }
    parts.join(",")
}
