//! Parameter counts against published reference totals.

use dnsd::benchmark::SyntheticConfig;
use dnsd::layers::{Family, Flags, MapKind, Model};
use serde::Serialize;

use crate::error::Result;
use crate::spec::{variant_label, ExperimentSpec};

/// A published count: total and the part outside the input/output layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reference {
    pub family: Family,
    pub map: MapKind,
    pub flags: Flags,
    pub depth: usize,
    pub total: usize,
    pub backbone: Option<usize>,
}

const fn r(
    family: Family,
    map: MapKind,
    flags: Flags,
    depth: usize,
    total: usize,
    backbone: Option<usize>,
) -> Reference {
    Reference {
        family,
        map,
        flags,
        depth,
        total,
        backbone,
    }
}

const NONE: Flags = Flags::new(false, false, false);

/// Reference counts for the synthetic benchmark models (`F = 2`, `C = 3`,
/// `c = 18`, `d = 3`).
pub const REFERENCE: [Reference; 14] = [
    r(Family::Mlp, MapKind::Diag, NONE, 2, 111, None),
    r(Family::Nsd, MapKind::Diag, NONE, 16, 2655, Some(2544)),
    r(Family::Nsd, MapKind::Full, NONE, 8, 3159, Some(3048)),
    r(Family::Dnsd, MapKind::Diag, NONE, 16, 5007, Some(4896)),
    r(
        Family::Dnsd,
        MapKind::Diag,
        Flags::new(true, false, false),
        16,
        5007,
        Some(4896),
    ),
    r(
        Family::Dnsd,
        MapKind::Diag,
        Flags::new(false, true, false),
        16,
        5007,
        Some(4896),
    ),
    r(
        Family::Dnsd,
        MapKind::Diag,
        Flags::new(true, true, false),
        16,
        5007,
        Some(4896),
    ),
    r(
        Family::Dnsd,
        MapKind::Diag,
        Flags::new(false, false, true),
        16,
        5215,
        Some(5104),
    ),
    r(
        Family::Dnsd,
        MapKind::Diag,
        Flags::new(false, true, true),
        16,
        5215,
        Some(5104),
    ),
    r(
        Family::Dnsd,
        MapKind::Diag,
        Flags::new(true, false, true),
        12,
        3939,
        Some(3828),
    ),
    r(
        Family::Dnsd,
        MapKind::Diag,
        Flags::new(true, true, true),
        12,
        3939,
        Some(3828),
    ),
    r(Family::Dnsd, MapKind::Full, NONE, 16, 12111, Some(12000)),
    r(
        Family::Dnsd,
        MapKind::Full,
        Flags::new(true, true, false),
        16,
        12111,
        Some(12000),
    ),
    r(
        Family::Dnsd,
        MapKind::Full,
        Flags::new(true, true, true),
        16,
        12319,
        Some(12208),
    ),
];

pub fn reference(family: Family, map: MapKind, flags: Flags, depth: usize) -> Option<Reference> {
    REFERENCE
        .iter()
        .copied()
        .find(|r| r.family == family && r.depth == depth && r.flags == flags && (family == Family::Mlp || r.map == map))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub variant: String,
    pub depth: usize,
    pub total: usize,
    pub backbone: usize,
    pub reference_total: Option<usize>,
    pub reference_backbone: Option<usize>,
    /// `100 · (total − reference) / reference`.
    pub deviation_pct: Option<f64>,
}

pub fn count(family: Family, map: MapKind, flags: Flags, depth: usize, hidden: usize, d: usize) -> Result<ParamRow> {
    let data = SyntheticConfig::default();
    let model = Model::new(dnsd::layers::ModelConfig {
        family,
        map,
        flags,
        in_dim: data.feature_dim,
        classes: data.n_communities,
        hidden,
        d,
        layers: depth,
        seed: 0,
    })?;
    let counts = model.count_parameters();
    let reference = (hidden == 18 && d == 3)
        .then(|| reference(family, map, flags, depth))
        .flatten();
    Ok(ParamRow {
        variant: variant_label(family, map, flags),
        depth,
        total: counts.total,
        backbone: counts.backbone,
        reference_total: reference.map(|r| r.total),
        reference_backbone: reference.and_then(|r| r.backbone),
        deviation_pct: reference.map(|r| 100.0 * (counts.total as f64 - r.total as f64) / r.total as f64),
    })
}

/// Counts for every reference entry.
pub fn reference_table() -> Result<Vec<ParamRow>> {
    REFERENCE
        .iter()
        .map(|r| count(r.family, r.map, r.flags, r.depth, 18, 3))
        .collect()
}

/// Counts for the spec's variant at each of its depths.
pub fn spec_table(spec: &ExperimentSpec) -> Result<Vec<ParamRow>> {
    spec.depths
        .iter()
        .map(|&depth| count(spec.family, spec.map, spec.flags, depth, spec.hidden, spec.d))
        .collect()
}

pub const PARAM_HEADER: [&str; 7] = [
    "variant",
    "depth",
    "total",
    "backbone",
    "reference_total",
    "reference_backbone",
    "deviation_pct",
];

pub fn param_record(r: &ParamRow) -> Vec<String> {
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    vec![
        r.variant.clone(),
        r.depth.to_string(),
        r.total.to_string(),
        r.backbone.to_string(),
        opt(r.reference_total),
        opt(r.reference_backbone),
        r.deviation_pct.map(|x| format!("{x:.2}")).unwrap_or_default(),
    ]
}

pub fn markdown(rows: &[ParamRow]) -> String {
    let mut s =
        String::from("| variant | depth | total | backbone | reference | deviation |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let reference = match (r.reference_total, r.reference_backbone) {
            (Some(t), Some(b)) => format!("{t} / {b}"),
            (Some(t), None) => t.to_string(),
            _ => "-".into(),
        };
        let dev = r
            .deviation_pct
            .map(|x| format!("{x:+.2}%"))
            .unwrap_or_else(|| "-".into());
        s += &format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.variant, r.depth, r.total, r.backbone, reference, dev
        );
    }
    s
}
