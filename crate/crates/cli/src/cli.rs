//! Argument definitions and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dnsd::layers::{Family, Flags, MapKind};

use crate::decay::{self, DecayOptions, SheafKind, SignalKind};
use crate::error::{CliError, Result};
use crate::lists::parse_list;
use crate::spec::{ExperimentSpec, Overrides};
use crate::{generate, io, params, report, runs};

#[derive(Debug, Parser)]
#[command(
    name = "dnsd",
    version,
    about = "Sheaf diffusion experiments on graph node classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic benchmark graphs to a cache directory.
    Generate(GenerateArgs),
    /// Train one model per (train seed, depth) and aggregate test accuracy.
    Train(SpecArgs),
    /// Like train, and also write the per-depth curve and per-seed bests.
    Sweep(SpecArgs),
    /// Trace signal decay under linear sheaf diffusion.
    AnalyzeDecay(DecayArgs),
    /// Count parameters against reference totals.
    Params(SpecArgs),
    /// Tabulate every results.json under a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Levels, e.g. `0-10`.
    #[arg(long, default_value = "0-10")]
    pub level: String,
    /// Seeds, e.g. `42-47,100-102`.
    #[arg(long, default_value = "42-47,100-102")]
    pub seeds: String,
    #[arg(long, default_value = "cache")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Mlp,
    Nsd,
    Dnsd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MapArg {
    Diag,
    Full,
    Orthogonal,
}

#[derive(Debug, Default, Args)]
pub struct SpecArgs {
    /// Experiment spec file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "external")]
    pub level: Option<u32>,
    /// Dataset file with its own split, instead of a synthetic level.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Depths, e.g. `2,4,8-12`.
    #[arg(long)]
    pub depths: Option<String>,
    #[arg(long, value_enum)]
    pub model: Option<FamilyArg>,
    #[arg(long, value_enum)]
    pub map: Option<MapArg>,
    /// Any of --adj/--odd/--gate replaces the spec's flag set.
    #[arg(long)]
    pub adj: bool,
    #[arg(long)]
    pub odd: bool,
    #[arg(long)]
    pub gate: bool,
    /// Train seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub test_seeds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

impl SpecArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        self.overrides()?.apply(&mut spec);
        Ok(spec)
    }

    fn overrides(&self) -> Result<Overrides> {
        let usage = |e: String| CliError::Usage(e);
        let depths = self
            .depths
            .as_deref()
            .map(|s| parse_list(s).map(|v| v.into_iter().map(|x| x as usize).collect()))
            .transpose()
            .map_err(usage)?;
        Ok(Overrides {
            level: self.level,
            external: self.external.clone(),
            depths,
            family: self.model.map(|m| match m {
                FamilyArg::Mlp => Family::Mlp,
                FamilyArg::Nsd => Family::Nsd,
                FamilyArg::Dnsd => Family::Dnsd,
            }),
            map: self.map.map(|m| match m {
                MapArg::Diag => MapKind::Diag,
                MapArg::Full => MapKind::Full,
                MapArg::Orthogonal => MapKind::Orthogonal,
            }),
            flags: (self.adj || self.odd || self.gate).then(|| Flags::new(self.adj, self.odd, self.gate)),
            train_seeds: self.seeds.as_deref().map(parse_list).transpose().map_err(usage)?,
            test_seeds: self.test_seeds.as_deref().map(parse_list).transpose().map_err(usage)?,
            out: self.out.clone(),
            cache_dir: self.cache_dir.clone(),
            workers: self.workers,
        })
    }

    /// True when the command line names a variant.
    fn names_variant(&self) -> bool {
        self.config.is_some() || self.model.is_some() || self.map.is_some() || self.depths.is_some()
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SheafArg {
    Random,
    Identity,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SignalArg {
    Random,
    Kernel,
}

#[derive(Debug, Args)]
pub struct DecayArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 30)]
    pub nodes: usize,
    #[arg(long, default_value_t = 0.2)]
    pub edge_prob: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "random")]
    pub sheaf: SheafArg,
    #[arg(long, value_enum, default_value = "random")]
    pub signal: SignalArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the per-layer aggregate comparison on the dataset graph.
    #[arg(long)]
    pub no_layers: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for results.json files.
    pub results_dir: PathBuf,
    /// Where report.md and report.csv go; defaults to the results directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("summary serializes") + "\n"
}

/// Run a parsed command; the returned text goes to stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate(a) => {
            let levels = parse_list(&a.level)
                .map_err(CliError::Usage)?
                .into_iter()
                .map(|l| u32::try_from(l).map_err(|_| CliError::Usage(format!("level {l} is too large"))))
                .collect::<Result<Vec<u32>>>()?;
            let seeds = parse_list(&a.seeds).map_err(CliError::Usage)?;
            Ok(json(&generate::generate(&a.out, &levels, &seeds)?))
        }
        Command::Train(a) => Ok(json(&runs::execute(&a.resolve()?, false)?)),
        Command::Sweep(a) => Ok(json(&runs::execute(&a.resolve()?, true)?)),
        Command::AnalyzeDecay(a) => {
            let spec = a.spec.resolve()?;
            let opts = DecayOptions {
                nodes: a.nodes,
                edge_prob: a.edge_prob,
                steps: a.steps,
                sheaf: match a.sheaf {
                    SheafArg::Random => SheafKind::Random,
                    SheafArg::Identity => SheafKind::Identity,
                },
                signal: match a.signal {
                    SignalArg::Random => SignalKind::Random,
                    SignalArg::Kernel => SignalKind::Kernel,
                },
                seed: a.seed,
                layers: !a.no_layers,
            };
            Ok(json(&decay::analyze_decay(&spec, &opts)?))
        }
        Command::Params(a) => {
            let rows = if a.names_variant() {
                let spec = a.resolve()?;
                spec.validate()?;
                params::spec_table(&spec)?
            } else {
                params::reference_table()?
            };
            if let Some(out) = &a.out {
                let table: Vec<Vec<String>> = rows.iter().map(params::param_record).collect();
                io::write_csv(&out.join("params.csv"), &params::PARAM_HEADER, &table)?;
                io::write_json(&out.join("params.json"), &rows)?;
            }
            Ok(params::markdown(&rows))
        }
        Command::Report(a) => {
            let report = report::collect(&a.results_dir)?;
            let out = a.out.unwrap_or_else(|| a.results_dir.clone());
            let markdown = report.markdown();
            io::write_atomic(&out.join("report.md"), markdown.as_bytes())?;
            let (header, rows) = report.csv_rows();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            io::write_csv(&out.join("report.csv"), &header, &rows)?;
            Ok(markdown)
        }
    }
}
