//! Interval estimation: the pairs bootstrap, plug-in influence-function
//! variance, and a logistic diagnostic for the selection mechanism.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::LinkedDataset;
use crate::error::{Error, Result};
use crate::estimators::{self, DrawConfig, EifTerms, EstimatorKind, IntervalSummary, Predictions, Target};
use crate::features::ModelSpec;
use crate::nuisance::{fit_logistic, NuisanceFit, DEFAULT_TRUNCATION};
use crate::parallel;
use crate::streams;

pub const DEFAULT_B: usize = 200;
pub const DEFAULT_LEVEL: f64 = 0.95;
/// Largest tolerated share of degenerate bootstrap replicates.
pub const MAX_DROPPED_SHARE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    Bootstrap,
    Plugin,
}

impl FromStr for CiMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" => Ok(CiMethod::Bootstrap),
            "plugin" => Ok(CiMethod::Plugin),
            _ => Err(Error::Validation(format!("unknown ci method '{s}' (expected bootstrap or plugin)"))),
        }
    }
}

impl fmt::Display for CiMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CiMethod::Bootstrap => "bootstrap",
            CiMethod::Plugin => "plugin",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    BootstrapPercentile,
    BootstrapNormal,
    EifPlugin,
}

impl IntervalMethod {
    pub fn tag(self) -> &'static str {
        match self {
            IntervalMethod::BootstrapPercentile => "bootstrap_percentile",
            IntervalMethod::BootstrapNormal => "bootstrap_normal",
            IntervalMethod::EifPlugin => "eif_plugin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub method: IntervalMethod,
    /// Normal-theory interval `estimate ± z·se`; for bootstrap reports this is
    /// the alternative to the percentile interval above.
    pub normal_ci: (f64, f64),
    #[serde(rename = "B")]
    pub b: usize,
    pub replicates: usize,
    pub dropped: usize,
    pub seed: Option<u64>,
}

impl InferenceReport {
    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    pub fn summary(&self) -> IntervalSummary {
        let boot = self.method != IntervalMethod::EifPlugin;
        IntervalSummary {
            method: self.method.tag().to_string(),
            se: self.se,
            ci_low: self.ci_low,
            ci_high: self.ci_high,
            ci_level: self.ci_level,
            b: boot.then_some(self.b),
            replicates: boot.then_some(self.replicates),
            dropped: boot.then_some(self.dropped),
        }
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("ci level must lie in (0, 1), got {level}")))
    }
}

/// Two-sided standard normal critical value.
pub fn normal_critical(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = parallel::ordered_sum(values.iter().copied()) / n as f64;
    let ss = parallel::ordered_sum(values.iter().map(|v| (v - m) * (v - m)));
    (ss / (n - 1) as f64).sqrt()
}

/// Interval from bootstrap replicates of a statistic whose full-sample value
/// is `estimate`. The percentile interval is primary.
pub fn summarize_replicates(estimate: f64, replicates: &[f64], requested: usize, level: f64, seed: u64) -> Result<InferenceReport> {
    check_level(level)?;
    if replicates.is_empty() {
        return Err(Error::UnstableBootstrap {
            dropped: requested,
            requested,
        });
    }
    let se = sample_sd(replicates);
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let zc = normal_critical(level);
    Ok(InferenceReport {
        estimate,
        se,
        ci_low: quantile(&sorted, alpha / 2.0),
        ci_high: quantile(&sorted, 1.0 - alpha / 2.0),
        ci_level: level,
        method: IntervalMethod::BootstrapPercentile,
        normal_ci: (estimate - zc * se, estimate + zc * se),
        b: requested,
        replicates: replicates.len(),
        dropped: requested - replicates.len(),
        seed: Some(seed),
    })
}

/// Outcome of resampling a vector-valued statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    /// `values[b]` is the statistic on the b-th kept resample.
    pub values: Vec<Vec<f64>>,
    pub requested: usize,
    pub dropped: usize,
}

impl BootstrapDraws {
    /// Replicates of the `j`-th component of the statistic.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[j]).collect()
    }
}

/// Pairs bootstrap of an arbitrary statistic. Resample `b` draws its row
/// indices from stream `b` of `seed`, then hands the resample and a child
/// seed (for any randomness inside the statistic) to `stat`. Resamples on
/// which `stat` fails with a degeneracy error are dropped.
pub fn bootstrap_with<F>(ds: &LinkedDataset, b: usize, seed: u64, stat: F) -> Result<BootstrapDraws>
where
    F: Fn(&LinkedDataset, u64) -> Result<Vec<f64>> + Sync + Send,
{
    if b < 2 {
        return Err(Error::Validation(format!("bootstrap needs B >= 2, got {b}")));
    }
    let n = ds.len();
    let results = parallel::map_indexed(b, |rep| {
        let mut rng = streams::stream(seed, rep as u64);
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let child = streams::child_seed(&mut rng);
        ds.select(&rows).and_then(|resample| stat(&resample, child))
    });
    let mut values = Vec::with_capacity(b);
    let mut dropped = 0;
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(e) if e.is_degenerate() => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if dropped as f64 > MAX_DROPPED_SHARE * b as f64 {
        return Err(Error::UnstableBootstrap { dropped, requested: b });
    }
    Ok(BootstrapDraws {
        values,
        requested: b,
        dropped,
    })
}

/// Everything needed to go from raw data to estimates: the working-model
/// spec, the estimators, the target and the imputation draw settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub spec: ModelSpec,
    pub estimators: Vec<EstimatorKind>,
    pub target: Target,
    pub draws: DrawConfig,
    pub truncation: f64,
}

impl Pipeline {
    pub fn new(spec: ModelSpec, estimators: Vec<EstimatorKind>, target: Target, draws: DrawConfig) -> Self {
        Pipeline {
            spec,
            estimators,
            target,
            draws,
            truncation: DEFAULT_TRUNCATION,
        }
    }

    fn needs_delta(&self) -> bool {
        self.estimators.iter().any(|k| k.uses_delta())
    }

    /// Fits the nuisances and computes shared predictions.
    pub fn fit(&self, ds: &LinkedDataset, draw_seed: u64) -> Result<(NuisanceFit, Predictions)> {
        let fit = NuisanceFit::fit(ds, &self.spec)?.with_truncation(self.truncation);
        let draws = self.needs_delta().then_some(DrawConfig::new(self.draws.d, draw_seed));
        let pred = Predictions::new(ds, &fit, draws)?;
        Ok((fit, pred))
    }

    /// Point estimates, in `self.estimators` order.
    pub fn estimates_from(&self, pred: &Predictions) -> Result<Vec<f64>> {
        self.estimators
            .iter()
            .map(|&k| estimators::evaluate(pred, k, self.target))
            .collect()
    }

    pub fn run(&self, ds: &LinkedDataset, draw_seed: u64) -> Result<Vec<f64>> {
        let (_, pred) = self.fit(ds, draw_seed)?;
        self.estimates_from(&pred)
    }

    /// Joint pairs bootstrap of every estimator; nuisances are refitted on
    /// each resample.
    pub fn bootstrap(&self, ds: &LinkedDataset, b: usize, seed: u64) -> Result<BootstrapDraws> {
        bootstrap_with(ds, b, seed, |resample, child| self.run(resample, child))
    }
}

/// Bootstrap inference for a single estimator.
pub fn bootstrap(ds: &LinkedDataset, pipeline: &Pipeline, b: usize, seed: u64, level: f64) -> Result<Vec<InferenceReport>> {
    let point = pipeline.run(ds, pipeline.draws.seed)?;
    let draws = pipeline.bootstrap(ds, b, seed)?;
    point
        .iter()
        .enumerate()
        .map(|(j, &est)| summarize_replicates(est, &draws.component(j), b, level, seed))
        .collect()
}

/// Plug-in standard error `√(Pn ψ̂² / n)` for the triply robust estimator of
/// `target`, with a normal interval.
pub fn eif_inference(terms: &EifTerms, target: Target, level: f64) -> Result<InferenceReport> {
    check_level(level)?;
    let (estimate, psi) = match target {
        Target::Ate => (terms.tau(), terms.ate_influence()),
        Target::Crr => (terms.xi()?, terms.crr_influence()?),
    };
    let n = psi.len() as f64;
    let second_moment = parallel::ordered_sum(psi.iter().map(|v| v * v)) / n;
    let se = (second_moment / n).sqrt();
    let zc = normal_critical(level);
    let ci = (estimate - zc * se, estimate + zc * se);
    Ok(InferenceReport {
        estimate,
        se,
        ci_low: ci.0,
        ci_high: ci.1,
        ci_level: level,
        method: IntervalMethod::EifPlugin,
        normal_ci: ci,
        b: 0,
        replicates: 0,
        dropped: 0,
        seed: None,
    })
}

pub fn eif_variance(ds: &LinkedDataset, fit: &NuisanceFit, draws: DrawConfig, target: Target, level: f64) -> Result<InferenceReport> {
    let terms = estimators::eif_phi(ds, fit, draws)?;
    let mut rep = eif_inference(&terms, target, level)?;
    rep.seed = Some(draws.seed);
    Ok(rep)
}

/// Logistic regression of the selection indicator on `(1, Z, X, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarDiagnostic {
    pub terms: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    /// Suppressed (null) when the fit shows separation.
    pub p_value: Vec<Option<f64>>,
    pub converged: bool,
    pub separation: bool,
}

/// Standard errors of logistic coefficients from the inverse observed
/// information at `coef`; NaN when the information is singular.
pub fn wald_se(x: &DMatrix<f64>, coef: &[f64]) -> Vec<f64> {
    let k = x.ncols();
    let beta = nalgebra::DVector::from_column_slice(coef);
    let eta = x * beta;
    let mut info = DMatrix::<f64>::zeros(k, k);
    for (i, e) in eta.iter().enumerate() {
        let pr = crate::nuisance::expit(*e);
        let w = pr * (1.0 - pr);
        let row = x.row(i);
        for a in 0..k {
            for b in 0..=a {
                info[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    let cov = info.try_inverse();
    (0..k)
        .map(|j| cov.as_ref().map_or(f64::NAN, |c| c[(j, j)].max(0.0).sqrt()))
        .collect()
}

pub fn mar_check(ds: &LinkedDataset) -> Result<MarDiagnostic> {
    let n = ds.len();
    let p = ds.p();
    let k = p + 3;
    let mut data = Vec::with_capacity(n * k);
    let mut r = Vec::with_capacity(n);
    for rec in ds.records() {
        data.push(1.0);
        data.push(rec.z_f64());
        data.extend_from_slice(rec.x);
        data.push(rec.y);
        r.push(rec.r_f64());
    }
    let x = DMatrix::from_row_slice(n, k, &data);
    let mut terms = vec!["intercept".to_string(), "z".to_string()];
    terms.extend((1..=p).map(|j| format!("x{j}")));
    terms.push("y".to_string());

    let all_linked = r.iter().all(|&a| a == 1.0);
    let fit = fit_logistic(&x, &r)?;
    let separation = fit.separation_warning || all_linked;
    let se = wald_se(&x, &fit.coef);
    let z: Vec<f64> = fit.coef.iter().zip(&se).map(|(b, s)| b / s).collect();
    let normal = Normal::standard();
    let p_value = z
        .iter()
        .map(|&zz| (!separation && zz.is_finite()).then(|| (2.0 * normal.sf(zz.abs())).clamp(0.0, 1.0)))
        .collect();
    Ok(MarDiagnostic {
        terms,
        coef: fit.coef,
        se,
        z,
        p_value,
        converged: fit.converged,
        separation,
    })
}
