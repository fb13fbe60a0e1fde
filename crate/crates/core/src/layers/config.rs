use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mlp,
    Nsd,
    Dnsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Diag,
    Full,
    Orthogonal,
}

impl MapKind {
    pub const ALL: [MapKind; 3] = [MapKind::Diag, MapKind::Full, MapKind::Orthogonal];

    /// Width of the builder's pre-activation for stalk dimension `d`.
    pub fn output_width(self, d: usize) -> usize {
        match self {
            MapKind::Diag => d,
            MapKind::Full | MapKind::Orthogonal => d * d,
        }
    }
}

/// DNSD architectural switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Flags {
    /// Aggregate with the sheaf adjacency (target term only).
    pub adj: bool,
    /// `tanh` instead of `relu` in the stalk-wise update.
    pub odd: bool,
    /// Per-stalk sigmoid gate on the update.
    pub gate: bool,
}

impl Flags {
    pub const fn new(adj: bool, odd: bool, gate: bool) -> Self {
        Self { adj, odd, gate }
    }

    /// All eight combinations, `{}` first and `adj+odd+gate` last.
    pub fn all() -> [Flags; 8] {
        let mut out = [Flags::default(); 8];
        for (i, f) in out.iter_mut().enumerate() {
            *f = Flags::new(i & 1 != 0, i & 2 != 0, i & 4 != 0);
        }
        out
    }

    pub fn any(self) -> bool {
        self.adj || self.odd || self.gate
    }
}

impl fmt::Display for Flags {
    /// `adj+odd`, or `-` when no flag is set.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.adj, "adj"), (self.odd, "odd"), (self.gate, "gate")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl FromStr for Flags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Flags::default();
        if s == "-" || s.is_empty() {
            return Ok(flags);
        }
        for part in s.split('+') {
            match part {
                "adj" => flags.adj = true,
                "odd" => flags.odd = true,
                "gate" => flags.gate = true,
                other => return Err(Error::Config(format!("unknown flag {other:?}"))),
            }
        }
        Ok(flags)
    }
}

macro_rules! name_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

name_enum!(Family, Family::Mlp => "mlp", Family::Nsd => "nsd", Family::Dnsd => "dnsd");
name_enum!(MapKind, MapKind::Diag => "diag", MapKind::Full => "full", MapKind::Orthogonal => "orthogonal");

/// Everything needed to construct a model deterministically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub map: MapKind,
    pub flags: Flags,
    /// Raw node feature width `F`.
    pub in_dim: usize,
    pub classes: usize,
    /// Per-node width `c = d·f` (MLP: hidden width).
    pub hidden: usize,
    /// Stalk dimension `d`.
    pub d: usize,
    /// Diffusion layers (MLP: linear layers).
    pub layers: usize,
    /// Seeds weight initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// Synthetic-benchmark defaults: `F = 2`, `C = 3`, `c = 18`, `d = 3`.
    pub fn synthetic(family: Family, map: MapKind, flags: Flags, layers: usize, seed: u64) -> Self {
        Self {
            family,
            map,
            flags,
            in_dim: 2,
            classes: 3,
            hidden: 18,
            d: 3,
            layers,
            seed,
        }
    }

    /// Feature width per stalk.
    pub fn f(&self) -> usize {
        self.hidden / self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.classes == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "feature, class and hidden widths must be positive".into(),
            ));
        }
        match self.family {
            Family::Mlp => {
                if self.layers == 0 {
                    return Err(Error::Config("an MLP needs at least one layer".into()));
                }
            }
            Family::Nsd | Family::Dnsd => {
                if self.d == 0 || !self.hidden.is_multiple_of(self.d) {
                    return Err(Error::Config(format!(
                        "hidden width {} is not divisible by stalk dimension {}",
                        self.hidden, self.d
                    )));
                }
            }
        }
        if self.family == Family::Nsd && self.flags.any() {
            return Err(Error::Config(format!(
                "NSD takes no architectural flags (got {})",
                self.flags
            )));
        }
        if self.family == Family::Mlp && self.flags.any() {
            return Err(Error::Config("MLP takes no architectural flags".into()));
        }
        Ok(())
    }

    /// Short human label, e.g. `dnsd diag adj+odd`.
    pub fn variant_label(&self) -> String {
        match self.family {
            Family::Mlp => "mlp".into(),
            Family::Nsd => format!("nsd {}", self.map),
            Family::Dnsd => format!("dnsd {} {}", self.map, self.flags),
        }
    }
}
