//! Point estimators of the average treatment effect `τ = E(Y₁ − Y₀)` and the
//! causal risk ratio `ξ = E(Y₁)/E(Y₀)`.
//!
//! Every estimator is a contrast of two arm functionals, one per treatment
//! level. The ATE is their difference and the CRR their ratio. Nuisance
//! predictions are computed once per dataset in [`Predictions`] and shared by
//! all estimators, so estimators that use `δ` see the same imputation draws.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LinkedDataset;
use crate::error::{Error, Result};
use crate::nuisance::{DeltaPair, NuisanceFit, DEFAULT_DRAWS};
use crate::parallel;
use crate::streams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Inverse-probability weighting, `τ̂₁`.
    Ipw,
    /// Per-arm normalised weighting, `τ̂₁′`.
    Hajek,
    /// Selection-weighted outcome regression, `τ̂₂`.
    Om,
    /// `τ̂₂` divided by the mean selection weight, `τ̂₂′`.
    OmStab,
    /// Outcome model integrated over the imputation model, `τ̂₃`.
    Impute,
    /// Triply robust influence-function estimator.
    Tr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Ipw,
        EstimatorKind::Hajek,
        EstimatorKind::Om,
        EstimatorKind::OmStab,
        EstimatorKind::Impute,
        EstimatorKind::Tr,
    ];

    /// The four estimators compared in the simulation tables.
    pub const TABLE: [EstimatorKind; 4] = [EstimatorKind::Ipw, EstimatorKind::Om, EstimatorKind::Impute, EstimatorKind::Tr];

    pub fn tag(self) -> &'static str {
        match self {
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Hajek => "hajek",
            EstimatorKind::Om => "om",
            EstimatorKind::OmStab => "om-stab",
            EstimatorKind::Impute => "impute",
            EstimatorKind::Tr => "tr",
        }
    }

    pub fn uses_delta(self) -> bool {
        matches!(self, EstimatorKind::Impute | EstimatorKind::Tr)
    }

    pub fn parse_list(s: &str) -> Result<Vec<EstimatorKind>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let k: EstimatorKind = part.parse()?;
            if !out.contains(&k) {
                out.push(k);
            }
        }
        if out.is_empty() {
            return Err(Error::Validation("no estimators selected".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Validation(format!("unknown estimator '{s}' (expected ipw, hajek, om, om-stab, impute, tr)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Ate,
    Crr,
}

impl Target {
    pub fn tag(self) -> &'static str {
        match self {
            Target::Ate => "ate",
            Target::Crr => "crr",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ate" => Ok(Target::Ate),
            "crr" => Ok(Target::Crr),
            _ => Err(Error::Validation(format!("unknown target '{s}' (expected ate or crr)"))),
        }
    }
}

/// Imputation draws per record and the seed their streams derive from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawConfig {
    #[serde(rename = "D")]
    pub d: usize,
    pub seed: u64,
}

impl DrawConfig {
    pub fn new(d: usize, seed: u64) -> Self {
        DrawConfig { d, seed }
    }

    pub fn with_seed(seed: u64) -> Self {
        DrawConfig { d: DEFAULT_DRAWS, seed }
    }
}

/// Nuisance predictions for every record of one dataset.
///
/// `pi`, `mu0`, `mu1` are `NaN` on unlinked rows, which no estimator reads.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub r: Vec<bool>,
    pub z: Vec<bool>,
    pub y: Vec<f64>,
    pub rho: Vec<f64>,
    pub pi: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub delta: Option<Vec<DeltaPair>>,
    pub draws: Option<DrawConfig>,
    pub rho_clamped: usize,
    pub pi_clamped: usize,
}

struct RowPrediction {
    rho: f64,
    pi: f64,
    mu0: f64,
    mu1: f64,
    delta: Option<DeltaPair>,
    rho_clamped: bool,
    pi_clamped: bool,
}

impl Predictions {
    /// Evaluates all working models on `ds`. `δ` is computed only when
    /// `draws` is given; draws for a record come from its covariate stream of `draws.seed`.
    pub fn new(ds: &LinkedDataset, fit: &NuisanceFit, draws: Option<DrawConfig>) -> Result<Predictions> {
        if ds.p() != fit.p || ds.q() != fit.q {
            return Err(Error::Validation(format!(
                "fit expects p={}, q={} but data has p={}, q={}",
                fit.p,
                fit.q,
                ds.p(),
                ds.q()
            )));
        }
        let rows = parallel::map_indexed(ds.len(), |i| {
            let rec = ds.record(i);
            let rho = fit.predict_selection(&rec);
            let (pi, mu0, mu1, pi_clamped) = match rec.v {
                Some(v) => {
                    let pi = fit.propensity_at(rec.x, v);
                    (pi.value, fit.outcome_at(false, rec.x, v), fit.outcome_at(true, rec.x, v), pi.clamped)
                }
                None => (f64::NAN, f64::NAN, f64::NAN, false),
            };
            let delta = draws.map(|c| {
                let mut rng = streams::covariate_stream(c.seed, rec.x);
                fit.delta_pair(rec.x, c.d, &mut rng)
            });
            RowPrediction {
                rho: rho.value,
                pi,
                mu0,
                mu1,
                delta,
                rho_clamped: rho.clamped,
                pi_clamped,
            }
        });
        let n = rows.len();
        let mut p = Predictions {
            r: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            rho: Vec::with_capacity(n),
            pi: Vec::with_capacity(n),
            mu0: Vec::with_capacity(n),
            mu1: Vec::with_capacity(n),
            delta: draws.map(|_| Vec::with_capacity(n)),
            draws,
            rho_clamped: 0,
            pi_clamped: 0,
        };
        for (rec, row) in ds.records().zip(rows) {
            p.r.push(rec.r());
            p.z.push(rec.z);
            p.y.push(rec.y);
            p.rho.push(row.rho);
            p.pi.push(row.pi);
            p.mu0.push(row.mu0);
            p.mu1.push(row.mu1);
            if let (Some(dv), Some(d)) = (p.delta.as_mut(), row.delta) {
                dv.push(d);
            }
            p.rho_clamped += usize::from(row.rho_clamped);
            p.pi_clamped += usize::from(row.pi_clamped);
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    fn delta(&self) -> Result<&[DeltaPair]> {
        self.delta
            .as_deref()
            .ok_or_else(|| Error::Validation("imputation draws were not computed for these predictions".into()))
    }

    /// Inverse weight `1 / (ρ̂ π̂^z (1 − π̂)^{1−z})` applied to a linked record.
    fn full_weight(&self, i: usize) -> f64 {
        let arm = if self.z[i] { self.pi[i] } else { 1.0 - self.pi[i] };
        1.0 / (self.rho[i] * arm)
    }

    /// Number of truncated probabilities feeding `kind`.
    pub fn truncation_count(&self, kind: EstimatorKind) -> usize {
        match kind {
            EstimatorKind::Ipw | EstimatorKind::Hajek | EstimatorKind::Tr => self.rho_clamped + self.pi_clamped,
            EstimatorKind::Om | EstimatorKind::OmStab => self.rho_clamped,
            EstimatorKind::Impute => 0,
        }
    }

    /// Largest inverse weight used by `kind` (`None` when it uses no weights).
    pub fn weight_max(&self, kind: EstimatorKind) -> Option<f64> {
        let linked = (0..self.len()).filter(|&i| self.r[i]);
        match kind {
            EstimatorKind::Ipw | EstimatorKind::Hajek | EstimatorKind::Tr => {
                linked.map(|i| self.full_weight(i)).reduce(f64::max)
            }
            EstimatorKind::Om | EstimatorKind::OmStab => linked.map(|i| 1.0 / self.rho[i]).reduce(f64::max),
            EstimatorKind::Impute => None,
        }
    }
}

/// The `z = 1` and `z = 0` functionals of an estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmPair {
    pub treated: f64,
    pub control: f64,
}

impl ArmPair {
    pub fn ate(&self) -> f64 {
        self.treated - self.control
    }

    pub fn crr(&self) -> Result<f64> {
        if !(self.control > 0.0) {
            return Err(Error::NonpositiveDenominator { value: self.control });
        }
        Ok(self.treated / self.control)
    }

    pub fn target(&self, t: Target) -> Result<f64> {
        match t {
            Target::Ate => Ok(self.ate()),
            Target::Crr => self.crr(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    parallel::ordered_sum(values) / n as f64
}

pub fn ipw_arms(p: &Predictions) -> ArmPair {
    let n = p.len();
    let term = |z: bool| {
        mean(
            (0..n).map(|i| if p.r[i] && p.z[i] == z { p.y[i] * p.full_weight(i) } else { 0.0 }),
            n,
        )
    };
    ArmPair {
        treated: term(true),
        control: term(false),
    }
}

/// Per-arm normalised weights on linked records of arm `z` (zero elsewhere).
pub fn hajek_weights(p: &Predictions, z: bool) -> Result<Vec<f64>> {
    let raw: Vec<f64> = (0..p.len())
        .map(|i| if p.r[i] && p.z[i] == z { p.full_weight(i) } else { 0.0 })
        .collect();
    let total = parallel::ordered_sum(raw.iter().copied());
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(format!("treatment arm z={} has zero total weight", u8::from(z))));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

pub fn hajek_arms(p: &Predictions) -> Result<ArmPair> {
    let arm = |z: bool| -> Result<f64> {
        let w = hajek_weights(p, z)?;
        Ok(parallel::ordered_sum(w.iter().zip(&p.y).map(|(a, b)| if *a != 0.0 { a * b } else { 0.0 })))
    };
    Ok(ArmPair {
        treated: arm(true)?,
        control: arm(false)?,
    })
}

pub fn om_arms(p: &Predictions) -> ArmPair {
    let n = p.len();
    let term = |mu: &[f64]| mean((0..n).map(|i| if p.r[i] { mu[i] / p.rho[i] } else { 0.0 }), n);
    ArmPair {
        treated: term(&p.mu1),
        control: term(&p.mu0),
    }
}

/// Mean selection weight `Pn[R/ρ̂]`.
pub fn mean_selection_weight(p: &Predictions) -> f64 {
    mean((0..p.len()).map(|i| if p.r[i] { 1.0 / p.rho[i] } else { 0.0 }), p.len())
}

pub fn om_stab_arms(p: &Predictions) -> Result<ArmPair> {
    let w = mean_selection_weight(p);
    if !(w > 0.0) {
        return Err(Error::Degenerate("mean selection weight is zero".into()));
    }
    let a = om_arms(p);
    Ok(ArmPair {
        treated: a.treated / w,
        control: a.control / w,
    })
}

pub fn impute_arms(p: &Predictions) -> Result<ArmPair> {
    let d = p.delta()?;
    let n = p.len();
    Ok(ArmPair {
        treated: mean(d.iter().map(|x| x.d1), n),
        control: mean(d.iter().map(|x| x.d0), n),
    })
}

/// Per-record estimated influence-function components `φ̂₁`, `φ̂₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct EifTerms {
    pub phi1: Vec<f64>,
    pub phi0: Vec<f64>,
    /// The `δ̂(z, x)` part of each record's contribution.
    pub delta: Vec<DeltaPair>,
    pub truncation_count: usize,
}

impl EifTerms {
    pub fn arms(&self) -> ArmPair {
        let n = self.phi1.len();
        ArmPair {
            treated: mean(self.phi1.iter().copied(), n),
            control: mean(self.phi0.iter().copied(), n),
        }
    }

    pub fn tau(&self) -> f64 {
        self.arms().ate()
    }

    pub fn xi(&self) -> Result<f64> {
        self.arms().crr()
    }

    /// Estimated influence function of the ATE, `φ̂₁ − φ̂₀ − τ̂`.
    pub fn ate_influence(&self) -> Vec<f64> {
        let tau = self.tau();
        self.phi1.iter().zip(&self.phi0).map(|(a, b)| a - b - tau).collect()
    }

    /// Estimated influence function of the CRR, `(φ̂₁ − ξ̂ φ̂₀) / Pn φ̂₀`.
    pub fn crr_influence(&self) -> Result<Vec<f64>> {
        let arms = self.arms();
        let xi = arms.crr()?;
        Ok(self
            .phi1
            .iter()
            .zip(&self.phi0)
            .map(|(a, b)| (a - xi * b) / arms.control)
            .collect())
    }
}

pub fn eif_terms(p: &Predictions) -> Result<EifTerms> {
    let delta = p.delta()?;
    let n = p.len();
    let mut phi1 = Vec::with_capacity(n);
    let mut phi0 = Vec::with_capacity(n);
    for (i, d) in delta.iter().enumerate() {
        if p.r[i] {
            let w = 1.0 / p.rho[i];
            let (y, pi) = (p.y[i], p.pi[i]);
            let aug1 = if p.z[i] { (y - p.mu1[i]) / pi } else { 0.0 };
            let aug0 = if p.z[i] { 0.0 } else { (y - p.mu0[i]) / (1.0 - pi) };
            phi1.push(w * (aug1 + p.mu1[i] - d.d1) + d.d1);
            phi0.push(w * (aug0 + p.mu0[i] - d.d0) + d.d0);
        } else {
            phi1.push(d.d1);
            phi0.push(d.d0);
        }
    }
    Ok(EifTerms {
        phi1,
        phi0,
        delta: delta.to_vec(),
        truncation_count: p.rho_clamped + p.pi_clamped,
    })
}

pub fn arms(p: &Predictions, kind: EstimatorKind) -> Result<ArmPair> {
    match kind {
        EstimatorKind::Ipw => Ok(ipw_arms(p)),
        EstimatorKind::Hajek => hajek_arms(p),
        EstimatorKind::Om => Ok(om_arms(p)),
        EstimatorKind::OmStab => om_stab_arms(p),
        EstimatorKind::Impute => impute_arms(p),
        EstimatorKind::Tr => Ok(eif_terms(p)?.arms()),
    }
}

/// Point estimate of `target` by `kind` from shared predictions.
pub fn evaluate(p: &Predictions, kind: EstimatorKind, target: Target) -> Result<f64> {
    arms(p, kind)?.target(target)
}

fn predictions(ds: &LinkedDataset, fit: &NuisanceFit, draws: Option<DrawConfig>) -> Result<Predictions> {
    Predictions::new(ds, fit, draws)
}

pub fn tau_ipw(ds: &LinkedDataset, fit: &NuisanceFit) -> Result<f64> {
    Ok(ipw_arms(&predictions(ds, fit, None)?).ate())
}

pub fn tau_hajek(ds: &LinkedDataset, fit: &NuisanceFit) -> Result<f64> {
    Ok(hajek_arms(&predictions(ds, fit, None)?)?.ate())
}

pub fn tau_om(ds: &LinkedDataset, fit: &NuisanceFit) -> Result<f64> {
    Ok(om_arms(&predictions(ds, fit, None)?).ate())
}

pub fn tau_om_stab(ds: &LinkedDataset, fit: &NuisanceFit) -> Result<f64> {
    Ok(om_stab_arms(&predictions(ds, fit, None)?)?.ate())
}

pub fn tau_impute(ds: &LinkedDataset, fit: &NuisanceFit, draws: DrawConfig) -> Result<f64> {
    Ok(impute_arms(&predictions(ds, fit, Some(draws))?)?.ate())
}

pub fn eif_phi(ds: &LinkedDataset, fit: &NuisanceFit, draws: DrawConfig) -> Result<EifTerms> {
    eif_terms(&predictions(ds, fit, Some(draws))?)
}

pub fn tau_tr(ds: &LinkedDataset, fit: &NuisanceFit, draws: DrawConfig) -> Result<f64> {
    Ok(eif_phi(ds, fit, draws)?.tau())
}

pub fn xi_ipw(ds: &LinkedDataset, fit: &NuisanceFit) -> Result<f64> {
    ipw_arms(&predictions(ds, fit, None)?).crr()
}

pub fn xi_hajek(ds: &LinkedDataset, fit: &NuisanceFit) -> Result<f64> {
    hajek_arms(&predictions(ds, fit, None)?)?.crr()
}

pub fn xi_om(ds: &LinkedDataset, fit: &NuisanceFit) -> Result<f64> {
    om_arms(&predictions(ds, fit, None)?).crr()
}

pub fn xi_impute(ds: &LinkedDataset, fit: &NuisanceFit, draws: DrawConfig) -> Result<f64> {
    impute_arms(&predictions(ds, fit, Some(draws))?)?.crr()
}

pub fn xi_tr(ds: &LinkedDataset, fit: &NuisanceFit, draws: DrawConfig) -> Result<f64> {
    eif_phi(ds, fit, draws)?.xi()
}

/// Interval attached to an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub method: String,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropped: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: EstimatorKind,
    pub target: Target,
    pub estimate: f64,
    #[serde(rename = "D")]
    pub d: Option<usize>,
    pub seed: u64,
    pub truncation_count: usize,
    pub weight_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inference: Option<IntervalSummary>,
    pub notes: Vec<String>,
}

impl EstimateReport {
    pub fn from_predictions(p: &Predictions, kind: EstimatorKind, target: Target, seed: u64) -> Result<EstimateReport> {
        let estimate = evaluate(p, kind, target)?;
        let mut notes = Vec::new();
        let trunc = p.truncation_count(kind);
        if trunc > 0 {
            notes.push(format!("{trunc} probabilities truncated"));
        }
        Ok(EstimateReport {
            method: kind,
            target,
            estimate,
            d: if kind.uses_delta() { p.draws.map(|c| c.d) } else { None },
            seed,
            truncation_count: trunc,
            weight_max: p.weight_max(kind),
            inference: None,
            notes,
        })
    }
}
