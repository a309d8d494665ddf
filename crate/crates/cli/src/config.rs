use std::path::PathBuf;

use clap::{Args, ValueEnum};
use linkedcausal::design::Correction;
use linkedcausal::estimators::{EstimatorKind, Target};
use linkedcausal::inference::CiMethod;
use linkedcausal::nuisance::DEFAULT_DRAWS;
use linkedcausal::sim::Scenario;
use linkedcausal::{Error, OutcomeFamily, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 20240601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
    Pretty,
}

fn parse_estimators(s: &str) -> Result<Vec<EstimatorKind>> {
    EstimatorKind::parse_list(s)
}

fn parse_scenarios(s: &str) -> Result<Vec<Scenario>> {
    if s.trim() == "all" {
        return Ok(Scenario::ALL.to_vec());
    }
    s.split(',').map(|t| t.trim().parse()).collect()
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Validation(format!("invalid sample size '{t}'")))
        })
        .collect()
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// write the report here instead of standard output
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "continuous")]
    pub family: OutcomeFamily,
    #[arg(long, default_value = "ate")]
    pub target: Target,
    /// comma list of ipw,hajek,om,om-stab,impute,tr
    #[arg(long, default_value = "ipw,om,impute,tr", value_parser = parse_estimators)]
    pub estimators: ::std::vec::Vec<EstimatorKind>,
    /// imputation draws per record
    #[arg(long = "D", default_value_t = DEFAULT_DRAWS)]
    pub d: usize,
    /// bootstrap replicates; 0 skips the bootstrap
    #[arg(long = "B", default_value_t = linkedcausal::inference::DEFAULT_B)]
    pub b: usize,
    #[arg(long, default_value = "bootstrap")]
    pub ci: CiMethod,
    #[arg(long = "ci-level", default_value_t = linkedcausal::inference::DEFAULT_LEVEL)]
    pub ci_level: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "continuous")]
    pub family: OutcomeFamily,
    /// comma list of i..v, or all
    #[arg(long, default_value = "i", value_parser = parse_scenarios)]
    pub scenario: ::std::vec::Vec<Scenario>,
    /// comma list of sample sizes
    #[arg(long, default_value = "1000", value_parser = parse_sizes)]
    pub n: ::std::vec::Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// defaults to ate for continuous and crr for binary outcomes
    #[arg(long)]
    pub target: Option<Target>,
    #[arg(long, default_value = "ipw,om,impute,tr", value_parser = parse_estimators)]
    pub estimators: ::std::vec::Vec<EstimatorKind>,
    #[arg(long = "D", default_value_t = DEFAULT_DRAWS)]
    pub d: usize,
    /// bootstrap replicates per Monte Carlo run; 0 reports no coverage for
    /// bootstrapped estimators
    #[arg(long = "B", default_value_t = 100)]
    pub b: usize,
    /// interval for tr; the other estimators always use the bootstrap
    #[arg(long, default_value = "plugin")]
    pub ci: CiMethod,
    #[arg(long = "ci-level", default_value_t = linkedcausal::inference::DEFAULT_LEVEL)]
    pub ci_level: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DesignArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "continuous")]
    pub family: OutcomeFamily,
    /// total budget
    #[arg(long = "C")]
    pub total: f64,
    /// per-unit cost of (z, x, y)
    #[arg(long = "C1")]
    pub c1: f64,
    /// per-unit cost of v
    #[arg(long = "C2")]
    pub c2: f64,
    #[arg(long = "D", default_value_t = DEFAULT_DRAWS)]
    pub d: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// estimation terms in the variance components: full, fallback or off
    #[arg(long, default_value = "full", value_parser = parse_correction)]
    pub correction: Correction,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn parse_correction(s: &str) -> Result<Correction> {
    match s {
        "full" => Ok(Correction::Full),
        "fallback" => Ok(Correction::Fallback),
        "off" => Ok(Correction::Off),
        _ => Err(Error::Validation(format!("unknown correction '{s}' (expected full, fallback or off)"))),
    }
}

/// Everything that determines a report. Echoed into every report and
/// accepted back through `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum RunConfig {
    Estimate(EstimateConfig),
    Simulate(SimulateConfig),
    Design(DesignConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub input: PathBuf,
    pub family: OutcomeFamily,
    pub target: Target,
    pub estimators: Vec<EstimatorKind>,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub ci: CiMethod,
    pub ci_level: f64,
    pub seed: u64,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub family: OutcomeFamily,
    pub scenarios: Vec<Scenario>,
    pub n: Vec<usize>,
    pub reps: usize,
    pub target: Target,
    pub estimators: Vec<EstimatorKind>,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub ci: CiMethod,
    pub ci_level: f64,
    pub seed: u64,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub input: PathBuf,
    pub family: OutcomeFamily,
    #[serde(rename = "C")]
    pub total: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "D")]
    pub d: usize,
    pub seed: u64,
    pub correction: Correction,
    pub format: Format,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        match self {
            RunConfig::Estimate(c) => c.seed,
            RunConfig::Simulate(c) => c.seed,
            RunConfig::Design(c) => c.seed,
        }
    }

    /// Reads a bare config or the `config` member of an earlier report.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Validation(format!("config is not valid JSON: {e}")))?;
        let inner = value.get("config").cloned().unwrap_or(value);
        serde_json::from_value(inner).map_err(|e| Error::Validation(format!("invalid config: {e}")))
    }

    /// Reads the config embedded in the `# config=` line of a csv or pretty report.
    pub fn from_report_text(text: &str) -> Result<RunConfig> {
        if let Some(line) = text.lines().find_map(|l| l.strip_prefix("# config=")) {
            return RunConfig::from_json(line);
        }
        RunConfig::from_json(text)
    }
}

impl From<EstimateArgs> for RunConfig {
    fn from(a: EstimateArgs) -> Self {
        RunConfig::Estimate(EstimateConfig {
            input: a.input,
            family: a.family,
            target: a.target,
            estimators: a.estimators,
            d: a.d,
            b: a.b,
            ci: a.ci,
            ci_level: a.ci_level,
            seed: a.seed,
            format: a.output.format,
        })
    }
}

impl From<SimulateArgs> for RunConfig {
    fn from(a: SimulateArgs) -> Self {
        let target = a.target.unwrap_or(match a.family {
            OutcomeFamily::Continuous => Target::Ate,
            OutcomeFamily::Binary => Target::Crr,
        });
        RunConfig::Simulate(SimulateConfig {
            family: a.family,
            scenarios: a.scenario,
            n: a.n,
            reps: a.reps,
            target,
            estimators: a.estimators,
            d: a.d,
            b: a.b,
            ci: a.ci,
            ci_level: a.ci_level,
            seed: a.seed,
            format: a.output.format,
        })
    }
}

impl From<DesignArgs> for RunConfig {
    fn from(a: DesignArgs) -> Self {
        RunConfig::Design(DesignConfig {
            input: a.input,
            family: a.family,
            total: a.total,
            c1: a.c1,
            c2: a.c2,
            d: a.d,
            seed: a.seed,
            correction: a.correction,
            format: a.output.format,
        })
    }
}
