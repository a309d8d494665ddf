//! Simulation designs, misspecification scenarios and the Monte Carlo runner.
//!
//! Both designs have one fully observed covariate `x` and one partially
//! observed covariate `v`:
//!
//! ```text
//! X ~ N(0, 1)
//! R | X ~ Bernoulli(expit(a0 + a1 X))
//! V | X ~ N(m0 + m1 X, s²)
//! Z | X, V ~ Bernoulli(expit(b0 + bx X + bv V))
//! E(Y | Z, X, V) = link⁻¹(g0 + gz Z + gx X + gv V + gzx Z X + gzv Z V)
//! ```
//!
//! with an identity link and unit Gaussian noise for the continuous design and
//! a logit link for the binary one.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{LinkedDataset, LinkedRecord, OutcomeFamily};
use crate::error::{Error, Result};
use crate::estimators::{self, DrawConfig, EstimatorKind, Target};
use crate::features::{FeatureMap, ModelSpec, Transform};
use crate::inference::{self, CiMethod, Pipeline};
use crate::nuisance::{expit, ImputationComponent, NuisanceFit, DEFAULT_DRAWS};
use crate::parallel;
use crate::streams;

/// Largest tolerated share of failed Monte Carlo replicates.
pub const MAX_FAILED_SHARE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgmSpec {
    pub family: OutcomeFamily,
    pub n: usize,
    /// `(a0, a1)`
    pub selection: [f64; 2],
    /// `(m0, m1)`
    pub covariate_mean: [f64; 2],
    pub covariate_sd: f64,
    /// `(b0, bx, bv)`
    pub propensity: [f64; 3],
    /// `(g0, gz, gx, gv, gzx, gzv)`, the column order of the default outcome design.
    pub outcome: [f64; 6],
    /// Continuous design only.
    pub noise_sd: f64,
}

impl DgmSpec {
    pub fn continuous(n: usize) -> Self {
        DgmSpec {
            family: OutcomeFamily::Continuous,
            n,
            selection: [0.75, 0.5],
            covariate_mean: [0.5, 0.5],
            covariate_sd: 1.0,
            propensity: [0.5, 0.5, 0.6],
            outcome: [0.5, 2.0, 0.5, 0.5, 2.0, 1.0],
            noise_sd: 1.0,
        }
    }

    pub fn binary(n: usize) -> Self {
        DgmSpec {
            family: OutcomeFamily::Binary,
            n,
            selection: [0.75, 1.0],
            covariate_mean: [1.0, 0.75],
            covariate_sd: 1.0,
            propensity: [0.5, 0.5, 0.5],
            outcome: [-2.0, 4.0, 0.5, 0.5, 0.5, 0.5],
            noise_sd: 0.0,
        }
    }

    pub fn for_family(family: OutcomeFamily, n: usize) -> Self {
        match family {
            OutcomeFamily::Continuous => DgmSpec::continuous(n),
            OutcomeFamily::Binary => DgmSpec::binary(n),
        }
    }

    fn outcome_eta(&self, z: f64, x: f64, v: f64) -> f64 {
        let g = &self.outcome;
        g[0] + g[1] * z + g[2] * x + g[3] * v + g[4] * z * x + g[5] * z * v
    }

    /// Mean and SD of the outcome linear predictor under treatment `z`:
    /// `(X, V)` is bivariate normal, so `η_z` is normal.
    fn eta_moments(&self, z: f64) -> (f64, f64) {
        let g = &self.outcome;
        let [m0, m1] = self.covariate_mean;
        let cx = g[2] + g[4] * z;
        let cv = g[3] + g[5] * z;
        let mean = g[0] + g[1] * z + cv * m0;
        let var = (cx + cv * m1).powi(2) + (cv * self.covariate_sd).powi(2);
        (mean, var.sqrt())
    }

    /// `E(Y_z)`: closed form for the continuous design, Gauss–Hermite
    /// quadrature for the binary one.
    pub fn arm_mean(&self, z: bool) -> f64 {
        let (m, s) = self.eta_moments(f64::from(u8::from(z)));
        match self.family {
            OutcomeFamily::Continuous => m,
            OutcomeFamily::Binary => normal_expectation(expit, m, s, 96),
        }
    }

    pub fn true_ate(&self) -> f64 {
        self.arm_mean(true) - self.arm_mean(false)
    }

    pub fn true_crr(&self) -> f64 {
        self.arm_mean(true) / self.arm_mean(false)
    }

    pub fn truth(&self, target: Target) -> f64 {
        match target {
            Target::Ate => self.true_ate(),
            Target::Crr => self.true_crr(),
        }
    }

    /// `E expit(a0 + a1 X)`, the linked share in the long run.
    pub fn linked_rate(&self) -> f64 {
        normal_expectation(expit, self.selection[0], self.selection[1].abs(), 96)
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> LinkedDataset {
        self.generate_with_potential_outcomes(rng).0
    }

    /// Draws `n` records; also returns each record's `(Y₀, Y₁)`.
    pub fn generate_with_potential_outcomes<R: Rng + ?Sized>(&self, rng: &mut R) -> (LinkedDataset, Vec<(f64, f64)>) {
        let mut records = Vec::with_capacity(self.n);
        let mut potential = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let x: f64 = rng.sample(StandardNormal);
            let r = rng.random::<f64>() < expit(self.selection[0] + self.selection[1] * x);
            let e: f64 = rng.sample(StandardNormal);
            let v = self.covariate_mean[0] + self.covariate_mean[1] * x + self.covariate_sd * e;
            let b = &self.propensity;
            let z = rng.random::<f64>() < expit(b[0] + b[1] * x + b[2] * v);
            let (y0, y1) = match self.family {
                OutcomeFamily::Continuous => {
                    let eps: f64 = rng.sample(StandardNormal);
                    let eps = self.noise_sd * eps;
                    (self.outcome_eta(0.0, x, v) + eps, self.outcome_eta(1.0, x, v) + eps)
                }
                OutcomeFamily::Binary => {
                    let u: f64 = rng.random();
                    let y = |z: f64| f64::from(u8::from(u < expit(self.outcome_eta(z, x, v))));
                    (y(0.0), y(1.0))
                }
            };
            let y = if z { y1 } else { y0 };
            records.push(if r {
                LinkedRecord::linked(z, y, vec![x], vec![v])
            } else {
                LinkedRecord::unlinked(z, y, vec![x])
            });
            potential.push((y0, y1));
        }
        let ds = LinkedDataset::from_unchecked(records, 1, 1, self.family);
        (ds, potential)
    }

    /// The true parameters as a plugged-in fit under the correct spec.
    pub fn true_fit(&self) -> NuisanceFit {
        NuisanceFit::from_parts(
            ModelSpec::default_for(1, 1),
            1,
            1,
            self.family,
            self.selection.to_vec(),
            self.propensity.to_vec(),
            self.outcome.to_vec(),
            vec![ImputationComponent {
                coef: self.covariate_mean.to_vec(),
                sd: self.covariate_sd,
            }],
        )
        .expect("true parameters match the default spec")
    }
}

/// Gauss–Hermite nodes and weights for `∫ f(t) e^{−t²} dt` (Golub–Welsch).
pub fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(m, m);
    for k in 1..m {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E f(μ + σ Z)` for standard normal `Z` by `m`-point Gauss–Hermite.
pub fn normal_expectation(f: impl Fn(f64) -> f64, mu: f64, sigma: f64, m: usize) -> f64 {
    let (t, w) = gauss_hermite(m);
    let s: f64 = t
        .iter()
        .zip(&w)
        .map(|(ti, wi)| wi * f(mu + std::f64::consts::SQRT_2 * sigma * ti))
        .sum();
    s / std::f64::consts::PI.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    I,
    Ii,
    Iii,
    Iv,
    V,
}

/// Which working models are correctly specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correctness {
    pub selection: bool,
    pub propensity: bool,
    pub outcome: bool,
    pub imputation: bool,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::I, Scenario::Ii, Scenario::Iii, Scenario::Iv, Scenario::V];

    pub fn tag(self) -> &'static str {
        match self {
            Scenario::I => "i",
            Scenario::Ii => "ii",
            Scenario::Iii => "iii",
            Scenario::Iv => "iv",
            Scenario::V => "v",
        }
    }

    pub fn correctness(self) -> Correctness {
        let (selection, propensity, outcome, imputation) = match self {
            Scenario::I => (true, true, true, true),
            Scenario::Ii => (true, true, false, false),
            Scenario::Iii => (true, false, true, false),
            Scenario::Iv => (false, false, true, true),
            Scenario::V => (false, false, false, false),
        };
        Correctness {
            selection,
            propensity,
            outcome,
            imputation,
        }
    }

    /// Correct models use the generating form; wrong ones replace every
    /// covariate (and interaction factor) by `|·|^{1/2}`.
    pub fn model_spec(self) -> ModelSpec {
        let c = self.correctness();
        let base = ModelSpec::default_for(1, 1);
        let pick = |ok: bool, m: FeatureMap| if ok { m } else { m.with_transform(Transform::SqrtAbs) };
        ModelSpec {
            selection: pick(c.selection, base.selection),
            propensity: pick(c.propensity, base.propensity),
            outcome: pick(c.outcome, base.outcome),
            imputation: pick(c.imputation, base.imputation),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.tag() == s)
            .ok_or_else(|| Error::Validation(format!("unknown scenario '{s}' (expected i, ii, iii, iv or v)")))
    }
}

/// Interval choice inside the Monte Carlo runner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McIntervals {
    /// For the triply robust estimator.
    pub tr: CiMethod,
    /// For every other estimator; only the bootstrap applies.
    pub others: CiMethod,
    /// Bootstrap replicates; 0 disables bootstrap intervals.
    #[serde(rename = "B")]
    pub b: usize,
    pub level: f64,
}

impl Default for McIntervals {
    fn default() -> Self {
        McIntervals {
            tr: CiMethod::Plugin,
            others: CiMethod::Bootstrap,
            b: 100,
            level: inference::DEFAULT_LEVEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub dgm: DgmSpec,
    pub scenario: Scenario,
    pub estimators: Vec<EstimatorKind>,
    pub target: Target,
    pub intervals: McIntervals,
    #[serde(rename = "D")]
    pub d: usize,
    pub reps: usize,
    pub seed: u64,
}

impl McConfig {
    pub fn new(dgm: DgmSpec, scenario: Scenario, reps: usize, seed: u64) -> Self {
        let target = match dgm.family {
            OutcomeFamily::Continuous => Target::Ate,
            OutcomeFamily::Binary => Target::Crr,
        };
        McConfig {
            dgm,
            scenario,
            estimators: EstimatorKind::TABLE.to_vec(),
            target,
            intervals: McIntervals::default(),
            d: DEFAULT_DRAWS,
            reps,
            seed,
        }
    }
}

/// Per-replicate output: one entry per estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub estimates: Vec<f64>,
    pub se: Vec<Option<f64>>,
    pub covered: Vec<Option<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub method: EstimatorKind,
    pub bias: f64,
    pub sd: f64,
    /// Percent; `None` when no intervals were computed.
    pub cp: Option<f64>,
    pub mean_se: Option<f64>,
}

impl EstimatorSummary {
    pub fn bias_x100(&self) -> f64 {
        100.0 * self.bias
    }

    pub fn sd_x100(&self) -> f64 {
        100.0 * self.sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub config: McConfig,
    pub truth: f64,
    pub summaries: Vec<EstimatorSummary>,
    pub replications: usize,
    pub failures: Vec<ReplicateFailure>,
    pub replicates: Vec<Replicate>,
}

impl McResult {
    pub fn summary(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.method == kind)
    }
}

fn run_replicate(cfg: &McConfig, index: usize, truth: f64) -> Result<Replicate> {
    let mut rng = streams::stream(cfg.seed, index as u64);
    let ds = cfg.dgm.generate(&mut rng);
    let draw_seed = streams::child_seed(&mut rng);
    let boot_seed = streams::child_seed(&mut rng);
    ds.check_support()?;

    let spec = cfg.scenario.model_spec();
    let pipe = Pipeline::new(spec.clone(), cfg.estimators.clone(), cfg.target, DrawConfig::new(cfg.d, draw_seed));
    let (_, pred) = pipe.fit(&ds, draw_seed)?;
    let estimates = pipe.estimates_from(&pred)?;
    let k = cfg.estimators.len();
    let mut se = vec![None; k];
    let mut covered = vec![None; k];
    let iv = cfg.intervals;

    let mut boot_kinds = Vec::new();
    for (j, &kind) in cfg.estimators.iter().enumerate() {
        let method = if kind == EstimatorKind::Tr { iv.tr } else { iv.others };
        match method {
            CiMethod::Plugin if kind == EstimatorKind::Tr => {
                let rep = inference::eif_inference(&estimators::eif_terms(&pred)?, cfg.target, iv.level)?;
                se[j] = Some(rep.se);
                covered[j] = Some(rep.covers(truth));
            }
            CiMethod::Plugin => {
                return Err(Error::Validation(format!("plug-in intervals are only available for tr, not {kind}")));
            }
            CiMethod::Bootstrap if iv.b > 0 => boot_kinds.push(j),
            CiMethod::Bootstrap => {}
        }
    }
    if !boot_kinds.is_empty() {
        let sub = Pipeline::new(
            spec,
            boot_kinds.iter().map(|&j| cfg.estimators[j]).collect(),
            cfg.target,
            DrawConfig::new(cfg.d, draw_seed),
        );
        let draws = sub.bootstrap(&ds, iv.b, boot_seed)?;
        for (c, &j) in boot_kinds.iter().enumerate() {
            let rep = inference::summarize_replicates(estimates[j], &draws.component(c), iv.b, iv.level, boot_seed)?;
            se[j] = Some(rep.se);
            covered[j] = Some(rep.covers(truth));
        }
    }
    Ok(Replicate {
        index,
        estimates,
        se,
        covered,
    })
}

fn summarize(kind: EstimatorKind, j: usize, reps: &[Replicate], truth: f64) -> EstimatorSummary {
    let n = reps.len() as f64;
    let est: Vec<f64> = reps.iter().map(|r| r.estimates[j]).collect();
    let mean = parallel::ordered_sum(est.iter().copied()) / n;
    let var = parallel::ordered_sum(est.iter().map(|e| (e - mean).powi(2))) / (n - 1.0).max(1.0);
    let covered: Option<Vec<bool>> = reps.iter().map(|r| r.covered[j]).collect();
    let ses: Option<Vec<f64>> = reps.iter().map(|r| r.se[j]).collect();
    EstimatorSummary {
        method: kind,
        bias: mean - truth,
        sd: var.sqrt(),
        cp: covered.map(|c| 100.0 * c.iter().filter(|&&b| b).count() as f64 / n),
        mean_se: ses.map(|s| parallel::ordered_sum(s) / n),
    }
}

pub fn run_monte_carlo(cfg: &McConfig) -> Result<McResult> {
    if cfg.reps < 2 {
        return Err(Error::Validation(format!("reps must be at least 2, got {}", cfg.reps)));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::Validation("no estimators selected".into()));
    }
    let truth = cfg.dgm.truth(cfg.target);
    let outcomes = parallel::map_indexed(cfg.reps, |i| run_replicate(cfg, i, truth));
    let mut replicates = Vec::with_capacity(cfg.reps);
    let mut failures = Vec::new();
    for (index, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => replicates.push(r),
            Err(e) if e.is_degenerate() || matches!(e, Error::UnstableBootstrap { .. }) => failures.push(ReplicateFailure {
                index,
                error: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    if failures.len() as f64 > MAX_FAILED_SHARE * cfg.reps as f64 || replicates.len() < 2 {
        return Err(Error::UnstableScenario {
            failed: failures.len(),
            requested: cfg.reps,
        });
    }
    let summaries = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(j, &k)| summarize(k, j, &replicates, truth))
        .collect();
    Ok(McResult {
        config: cfg.clone(),
        truth,
        summaries,
        replications: replicates.len(),
        failures,
        replicates,
    })
}

/// Results laid out like the simulation tables: rows are scenario × metric,
/// columns are estimator × sample size, entries ×10².
pub struct McTable<'a> {
    pub results: &'a [McResult],
}

impl McTable<'_> {
    fn sizes(&self) -> Vec<usize> {
        let mut ns: Vec<usize> = self.results.iter().map(|r| r.config.dgm.n).collect();
        ns.sort_unstable();
        ns.dedup();
        ns
    }

    fn scenarios(&self) -> Vec<Scenario> {
        Scenario::ALL
            .into_iter()
            .filter(|s| self.results.iter().any(|r| r.config.scenario == *s))
            .collect()
    }

    fn kinds(&self) -> Vec<EstimatorKind> {
        self.results.first().map(|r| r.config.estimators.clone()).unwrap_or_default()
    }

    fn cell(&self, sc: Scenario, n: usize, kind: EstimatorKind, metric: &str) -> Option<f64> {
        let r = self.results.iter().find(|r| r.config.scenario == sc && r.config.dgm.n == n)?;
        let s = r.summary(kind)?;
        match metric {
            "bias" => Some(s.bias_x100()),
            "sd" => Some(s.sd_x100()),
            _ => s.cp,
        }
    }

    fn rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["scenario".to_string(), "metric".to_string()];
        for n in self.sizes() {
            for k in self.kinds() {
                header.push(format!("{k}@{n}"));
            }
        }
        let mut rows = Vec::new();
        for sc in self.scenarios() {
            for metric in ["bias", "sd", "cp"] {
                let mut row = vec![sc.tag().to_string(), metric.to_string()];
                for n in self.sizes() {
                    for k in self.kinds() {
                        row.push(self.cell(sc, n, k, metric).map_or(String::new(), |v| format!("{v:.1}")));
                    }
                }
                rows.push(row);
            }
        }
        (header, rows)
    }

    pub fn to_csv(&self) -> String {
        let (header, rows) = self.rows();
        let mut out = header.join(",");
        out.push('\n');
        for r in rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let (header, rows) = self.rows();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let fmt_row = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = String::from("values x100; cp in percent\n");
        out.push_str(&fmt_row(&header));
        out.push('\n');
        for r in &rows {
            out.push_str(fmt_row(r).trim_end());
            out.push('\n');
        }
        out
    }
}
