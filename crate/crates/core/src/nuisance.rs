//! Working-model fits for the four nuisance functions and their predictions.
//!
//! * selection `ρ(x) = P(R = 1 | x)`: logistic, fitted on all rows;
//! * propensity `π(x, v) = P(Z = 1 | x, v)`: logistic, fitted on linked rows;
//! * outcome `μ(z, x, v) = E(Y | z, x, v)`: least squares (continuous) or
//!   logistic (binary), fitted on linked rows;
//! * imputation `f(v | x)`: independent Gaussians with linear means, fitted
//!   on linked rows.
//!
//! `δ(z, x)` integrates the outcome model over the imputation model by Monte
//! Carlo, with the same draws reused for `z = 0` and `z = 1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{LinkedDataset, OutcomeFamily, Record};
use crate::error::{Error, Result};
use crate::features::{build_design, Buf, Covariate, FeatureMap, ModelSpec, RowFilter, Transform, VarSelector};
use crate::parallel;
use crate::streams;

/// Score sup-norm at which IRLS stops.
pub const SCORE_TOL: f64 = 1e-8;
pub const MAX_IRLS_ITER: usize = 100;
/// Default probability truncation `ε`: predictions are clamped to `[ε, 1 - ε]`.
pub const DEFAULT_TRUNCATION: f64 = 1e-6;
/// Default number of imputation draws per record.
pub const DEFAULT_DRAWS: usize = 100;
const SEPARATION_COEF: f64 = 30.0;

#[inline]
pub fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A probability after truncation, remembering whether truncation bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped {
    pub value: f64,
    pub clamped: bool,
}

#[inline]
pub fn clamp_prob(p: f64, eps: f64) -> Clamped {
    let value = p.clamp(eps, 1.0 - eps);
    Clamped {
        value,
        clamped: value != p,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the mean score at `coef`.
    pub final_score_norm: f64,
    #[serde(default)]
    pub separation_warning: bool,
}

fn xt_dot(x: &DMatrix<f64>, w: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.iter().zip(w).map(|(a, b)| a * b).sum()))
}

fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let k = x.ncols();
    let mut h = DMatrix::zeros(k, k);
    for a in 0..k {
        let ca = x.column(a);
        for b in 0..=a {
            let cb = x.column(b);
            let s: f64 = ca.iter().zip(cb.iter()).zip(w).map(|((u, v), ww)| u * v * ww).sum();
            h[(a, b)] = s;
            h[(b, a)] = s;
        }
    }
    h
}

fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let (n, k) = x.shape();
    if n < k || k == 0 {
        return Err(Error::SingularDesign { rows: n, cols: k });
    }
    let gram = x.transpose() * x;
    let eig = gram.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(max > 0.0) || min <= max * 1e-12 {
        return Err(Error::SingularDesign { rows: n, cols: k });
    }
    Ok(())
}

/// Mean logistic score `n⁻¹ Xᵀ(y − expit(Xβ))`.
pub fn logistic_score(x: &DMatrix<f64>, y: &[f64], coef: &[f64]) -> Vec<f64> {
    let beta = DVector::from_column_slice(coef);
    let eta = x * beta;
    let resid: Vec<f64> = eta.iter().zip(y).map(|(e, yy)| yy - expit(*e)).collect();
    let n = y.len().max(1) as f64;
    xt_dot(x, &resid).iter().map(|s| s / n).collect()
}

/// Fitted probabilities and log-likelihood at linear predictor `eta`.
fn logistic_eval(eta: &DVector<f64>, y: &[f64], p: &mut Vec<f64>) -> f64 {
    p.clear();
    let mut ll = 0.0;
    for (&e, &yy) in eta.iter().zip(y) {
        let t = (-e.abs()).exp();
        p.push(if e >= 0.0 { 1.0 / (1.0 + t) } else { t / (1.0 + t) });
        ll += yy * e - (e.max(0.0) + t.ln_1p());
    }
    ll
}

/// Logistic regression by iteratively reweighted least squares with
/// step-halving whenever the likelihood would decrease.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64]) -> Result<LogisticFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::Validation(format!("design has {n} rows but response has {}", y.len())));
    }
    if y.iter().any(|&a| a != 0.0 && a != 1.0) {
        return Err(Error::Validation("logistic response must be 0/1".into()));
    }
    check_full_rank(x)?;
    let nf = n as f64;
    let mut beta = DVector::zeros(k);
    let mut eta = DVector::zeros(n);
    let mut p = Vec::with_capacity(n);
    let mut cand_p = Vec::with_capacity(n);
    let mut ll = logistic_eval(&eta, y, &mut p);
    let mut iterations = 0;
    let mut score_norm;
    let mut converged = false;
    let mut stalled = false;
    let mut resid = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut polished = false;
    let mut it = 0;
    loop {
        resid.iter_mut().zip(y.iter().zip(&p)).for_each(|(r, (a, b))| *r = a - b);
        let score = xt_dot(x, &resid) / nf;
        score_norm = score.amax();
        if (score_norm < SCORE_TOL && polished) || score_norm == 0.0 {
            converged = true;
            break;
        }
        if score_norm < SCORE_TOL {
            // one more Newton step costs little and takes the score to rounding level
            polished = true;
        } else if it == MAX_IRLS_ITER {
            break;
        } else {
            it += 1;
            iterations = it;
        }
        w.iter_mut().zip(&p).for_each(|(w, a)| *w = a * (1.0 - a));
        let Some(chol) = (weighted_gram(x, &w) / nf).cholesky() else {
            converged = polished;
            stalled = !polished;
            break;
        };
        let step = chol.solve(&score);
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let cand_eta = x * &cand;
            let cand_ll = logistic_eval(&cand_eta, y, &mut cand_p);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) || t < 1e-10 {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                std::mem::swap(&mut p, &mut cand_p);
                break;
            }
            t *= 0.5;
        }
        if !beta.iter().all(|b| b.is_finite()) {
            stalled = true;
            converged = false;
            break;
        }
    }
    // Under complete separation the score vanishes numerically while every
    // fitted probability sits on its observed label.
    let perfect = p.iter().zip(y).all(|(pp, yy)| (yy - pp).abs() < 1e-6);
    let boundary = eta.iter().any(|e| e.abs() > SEPARATION_COEF);
    let separation_warning = stalled || perfect || (beta.amax() > SEPARATION_COEF && (!converged || boundary));
    Ok(LogisticFit {
        coef: beta.iter().copied().collect(),
        converged,
        iterations,
        final_score_norm: score_norm,
        separation_warning,
    })
}

/// Ordinary least squares through a Householder QR factorisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    /// `RSS / (n - k)`
    pub residual_variance: f64,
}

pub fn fit_linear(x: &DMatrix<f64>, y: &[f64]) -> Result<LinearFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::Validation(format!("design has {n} rows but response has {}", y.len())));
    }
    if n <= k || k == 0 {
        return Err(Error::SingularDesign { rows: n, cols: k });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if !(diag_max > 0.0) || (0..k).any(|i| r[(i, i)].abs() <= diag_max * 1e-10) {
        return Err(Error::SingularDesign { rows: n, cols: k });
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let qty_k = qty.rows(0, k).into_owned();
    let beta = r
        .solve_upper_triangular(&qty_k)
        .ok_or(Error::SingularDesign { rows: n, cols: k })?;
    let resid = &yv - x * &beta;
    let rss = resid.norm_squared();
    Ok(LinearFit {
        coef: beta.iter().copied().collect(),
        residual_variance: rss / (n - k) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFit {
    pub family: OutcomeFamily,
    pub coef: Vec<f64>,
    /// Continuous family only.
    pub residual_variance: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_score_norm: f64,
    #[serde(default)]
    pub separation_warning: bool,
}

impl OutcomeFit {
    /// Mean response given a linear predictor.
    #[inline]
    pub fn mean(&self, eta: f64) -> f64 {
        match self.family {
            OutcomeFamily::Continuous => eta,
            OutcomeFamily::Binary => expit(eta),
        }
    }

    /// `dμ/dη`
    #[inline]
    pub fn mean_derivative(&self, eta: f64) -> f64 {
        match self.family {
            OutcomeFamily::Continuous => 1.0,
            OutcomeFamily::Binary => {
                let m = expit(eta);
                m * (1.0 - m)
            }
        }
    }
}

fn fit_outcome_matrix(x: &DMatrix<f64>, y: &[f64], family: OutcomeFamily) -> Result<OutcomeFit> {
    match family {
        OutcomeFamily::Continuous => {
            let f = fit_linear(x, y)?;
            Ok(OutcomeFit {
                family,
                coef: f.coef,
                residual_variance: Some(f.residual_variance),
                converged: true,
                iterations: 1,
                final_score_norm: 0.0,
                separation_warning: false,
            })
        }
        OutcomeFamily::Binary => {
            let f = fit_logistic(x, y)?;
            Ok(OutcomeFit {
                family,
                coef: f.coef,
                residual_variance: None,
                converged: f.converged,
                iterations: f.iterations,
                final_score_norm: f.final_score_norm,
                separation_warning: f.separation_warning,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationComponent {
    /// Mean coefficients on the imputation model's `x` design.
    pub coef: Vec<f64>,
    pub sd: f64,
}

/// Conditionally independent Gaussian model for each `v` component.
///
/// Component `k` is modelled on the scale given by the imputation map's
/// transform for `v_k`. With the identity scale a draw is a value of `v_k`;
/// with a non-identity scale the draw stands for the transformed covariate
/// itself and is passed to the outcome model as its `v_k` feature without
/// further transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationFit {
    pub map: FeatureMap,
    pub components: Vec<ImputationComponent>,
    #[serde(default)]
    pub degenerate_sd_warning: bool,
}

impl ImputationFit {
    pub fn q(&self) -> usize {
        self.components.len()
    }

    pub fn scale(&self, k: usize) -> Transform {
        self.map.transform_of(Covariate::V(k))
    }

    /// Conditional means (on each component's modelling scale).
    pub fn mean(&self, x: &[f64], out: &mut Buf) {
        let mut tx = Buf::new();
        self.map.transform_x(x, &mut tx);
        out.clear();
        out.extend(
            self.components
                .iter()
                .map(|c| self.map.dot(VarSelector::IMPUTATION, 0.0, &tx, &[], &c.coef)),
        );
    }
}

/// Per-component least squares of `v` on the imputation design over linked rows.
pub fn fit_imputation(ds: &LinkedDataset, spec: &ModelSpec) -> Result<ImputationFit> {
    let map = &spec.imputation;
    map.validate(VarSelector::IMPUTATION, ds.p(), ds.q())?;
    let design = build_design(ds, map, RowFilter::Linked, VarSelector::IMPUTATION)?;
    let width = design.ncols();
    if ds.n_linked() < width + 2 {
        return Err(Error::Degenerate(format!(
            "imputation model needs at least {} linked rows, found {}",
            width + 2,
            ds.n_linked()
        )));
    }
    let mut components = Vec::with_capacity(ds.q());
    let mut degenerate = false;
    for k in 0..ds.q() {
        let t = map.transform_of(Covariate::V(k));
        let target: Vec<f64> = ds
            .records()
            .filter_map(|r| r.v.map(|v| t.apply(v[k])))
            .collect();
        let fit = fit_linear(&design, &target)?;
        let scale = target.iter().map(|a| a.abs()).sum::<f64>() / target.len() as f64;
        let mut sd = fit.residual_variance.max(0.0).sqrt();
        if sd <= 1e-9 * scale.max(1.0) {
            sd = 0.0;
            degenerate = true;
        }
        components.push(ImputationComponent { coef: fit.coef, sd });
    }
    Ok(ImputationFit {
        map: map.clone(),
        components,
        degenerate_sd_warning: degenerate,
    })
}

/// `D` draws of `v` (on the modelling scale) from the fitted imputation model.
/// Draws are produced draw-major, component-minor from `rng`.
pub fn draw_imputations<R: Rng + ?Sized>(fit: &ImputationFit, x: &[f64], d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut mean = Buf::new();
    fit.mean(x, &mut mean);
    (0..d)
        .map(|_| {
            mean.iter()
                .zip(&fit.components)
                .map(|(m, c)| {
                    let e: f64 = rng.sample(StandardNormal);
                    m + c.sd * e
                })
                .collect()
        })
        .collect()
}

/// The four fitted working models plus the truncation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub spec: ModelSpec,
    pub p: usize,
    pub q: usize,
    pub selection: LogisticFit,
    pub propensity: LogisticFit,
    pub outcome: OutcomeFit,
    pub imputation: ImputationFit,
    pub truncation: f64,
}

/// Values of `δ(0, x)` and `δ(1, x)` computed from one common set of draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaPair {
    pub d0: f64,
    pub d1: f64,
}

impl DeltaPair {
    pub fn get(&self, z: bool) -> f64 {
        if z {
            self.d1
        } else {
            self.d0
        }
    }
}

fn wrap_logistic(coef: Vec<f64>) -> LogisticFit {
    LogisticFit {
        coef,
        converged: true,
        iterations: 0,
        final_score_norm: 0.0,
        separation_warning: false,
    }
}

impl NuisanceFit {
    /// Fits all four working models with the default truncation.
    pub fn fit(ds: &LinkedDataset, spec: &ModelSpec) -> Result<NuisanceFit> {
        spec.validate(ds.p(), ds.q())?;
        let r: Vec<f64> = ds.records().map(|r| r.r_f64()).collect();
        let sel_x = build_design(ds, &spec.selection, RowFilter::All, VarSelector::SELECTION)?;
        let selection = fit_logistic(&sel_x, &r)?;

        let linked: Vec<Record<'_>> = ds.records().filter(|r| r.r()).collect();
        let z: Vec<f64> = linked.iter().map(|r| r.z_f64()).collect();
        let prop_x = build_design(ds, &spec.propensity, RowFilter::Linked, VarSelector::PROPENSITY)?;
        let propensity = fit_logistic(&prop_x, &z)?;

        let y: Vec<f64> = linked.iter().map(|r| r.y).collect();
        let out_x = build_design(ds, &spec.outcome, RowFilter::Linked, VarSelector::OUTCOME)?;
        let outcome = fit_outcome_matrix(&out_x, &y, ds.family())?;

        let imputation = fit_imputation(ds, spec)?;
        Ok(NuisanceFit {
            spec: spec.clone(),
            p: ds.p(),
            q: ds.q(),
            selection,
            propensity,
            outcome,
            imputation,
            truncation: DEFAULT_TRUNCATION,
        })
    }

    /// Assembles a fit from known coefficients (e.g. the true parameters of a
    /// simulation design) without touching data.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        spec: ModelSpec,
        p: usize,
        q: usize,
        family: OutcomeFamily,
        selection: Vec<f64>,
        propensity: Vec<f64>,
        outcome: Vec<f64>,
        imputation: Vec<ImputationComponent>,
    ) -> Result<NuisanceFit> {
        spec.validate(p, q)?;
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Validation(format!("{name}: expected {want} coefficients, got {got}")))
            }
        };
        check("selection", selection.len(), spec.selection.width(VarSelector::SELECTION, p, q))?;
        check("propensity", propensity.len(), spec.propensity.width(VarSelector::PROPENSITY, p, q))?;
        check("outcome", outcome.len(), spec.outcome.width(VarSelector::OUTCOME, p, q))?;
        check("imputation components", imputation.len(), q)?;
        let w = spec.imputation.width(VarSelector::IMPUTATION, p, q);
        for c in &imputation {
            check("imputation", c.coef.len(), w)?;
        }
        Ok(NuisanceFit {
            p,
            q,
            selection: wrap_logistic(selection),
            propensity: wrap_logistic(propensity),
            outcome: OutcomeFit {
                family,
                coef: outcome,
                residual_variance: None,
                converged: true,
                iterations: 0,
                final_score_norm: 0.0,
                separation_warning: false,
            },
            imputation: ImputationFit {
                map: spec.imputation.clone(),
                components: imputation,
                degenerate_sd_warning: false,
            },
            spec,
            truncation: DEFAULT_TRUNCATION,
        })
    }

    pub fn with_truncation(mut self, eps: f64) -> Self {
        self.truncation = eps;
        self
    }

    pub fn family(&self) -> OutcomeFamily {
        self.outcome.family
    }

    /// Warnings raised by any sub-fit.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        for (name, f) in [("selection", &self.selection), ("propensity", &self.propensity)] {
            if f.separation_warning {
                w.push(format!("{name} model: possible complete separation"));
            } else if !f.converged {
                w.push(format!("{name} model: IRLS did not converge"));
            }
        }
        if self.outcome.separation_warning {
            w.push("outcome model: possible complete separation".into());
        } else if !self.outcome.converged {
            w.push("outcome model: IRLS did not converge".into());
        }
        if self.imputation.degenerate_sd_warning {
            w.push("imputation model: zero residual SD, draws are deterministic".into());
        }
        w
    }

    pub fn selection_linear_predictor(&self, x: &[f64]) -> f64 {
        let map = &self.spec.selection;
        let mut tx = Buf::new();
        map.transform_x(x, &mut tx);
        map.dot(VarSelector::SELECTION, 0.0, &tx, &[], &self.selection.coef)
    }

    pub fn predict_selection(&self, rec: &Record<'_>) -> Clamped {
        clamp_prob(expit(self.selection_linear_predictor(rec.x)), self.truncation)
    }

    pub fn propensity_at(&self, x: &[f64], v: &[f64]) -> Clamped {
        let map = &self.spec.propensity;
        let mut tx = Buf::new();
        let mut tv = Buf::new();
        map.transform_x(x, &mut tx);
        map.transform_v(v, &mut tv);
        let eta = map.dot(VarSelector::PROPENSITY, 0.0, &tx, &tv, &self.propensity.coef);
        clamp_prob(expit(eta), self.truncation)
    }

    pub fn predict_propensity(&self, rec: &Record<'_>) -> Result<Clamped> {
        let v = rec
            .v
            .ok_or_else(|| Error::MissingData(format!("record {} has no v for the propensity model", rec.index)))?;
        Ok(self.propensity_at(rec.x, v))
    }

    /// Outcome linear predictor at raw covariate values.
    pub fn outcome_linear_predictor(&self, z: bool, x: &[f64], v: &[f64]) -> f64 {
        let map = &self.spec.outcome;
        let mut tx = Buf::new();
        let mut tv = Buf::new();
        map.transform_x(x, &mut tx);
        map.transform_v(v, &mut tv);
        map.dot(VarSelector::OUTCOME, f64::from(u8::from(z)), &tx, &tv, &self.outcome.coef)
    }

    pub fn outcome_at(&self, z: bool, x: &[f64], v: &[f64]) -> f64 {
        self.outcome.mean(self.outcome_linear_predictor(z, x, v))
    }

    pub fn predict_outcome(&self, z: bool, rec: &Record<'_>) -> Result<f64> {
        let v = rec
            .v
            .ok_or_else(|| Error::MissingData(format!("record {} has no v for the outcome model", rec.index)))?;
        Ok(self.outcome_at(z, rec.x, v))
    }

    /// Transform taking an imputation draw of component `k` to the outcome
    /// model's `v_k` feature.
    fn feature_transform(&self, k: usize) -> Transform {
        match self.imputation.scale(k) {
            Transform::Identity => self.spec.outcome.transform_of(Covariate::V(k)),
            _ => Transform::Identity,
        }
    }

    /// Converts one imputation draw (modelling scale) into outcome-model
    /// `v` features.
    fn draw_to_features(&self, draw: &[f64], out: &mut Buf) {
        out.clear();
        out.extend(draw.iter().enumerate().map(|(k, &w)| self.feature_transform(k).apply(w)));
    }

    /// Outcome mean for a given treatment at an imputation draw.
    pub fn outcome_at_draw(&self, z: bool, x: &[f64], draw: &[f64]) -> f64 {
        let map = &self.spec.outcome;
        let mut tx = Buf::new();
        map.transform_x(x, &mut tx);
        let mut tv = Buf::new();
        self.draw_to_features(draw, &mut tv);
        self.outcome
            .mean(map.dot(VarSelector::OUTCOME, f64::from(u8::from(z)), &tx, &tv, &self.outcome.coef))
    }

    /// `δ(0, x)` and `δ(1, x)` from `d` common imputation draws taken from
    /// `rng` in the same order as [`draw_imputations`].
    pub fn delta_pair<R: Rng + ?Sized>(&self, x: &[f64], d: usize, rng: &mut R) -> DeltaPair {
        let d = d.max(1);
        let map = &self.spec.outcome;
        let q = self.q;
        let mut tx = Buf::new();
        map.transform_x(x, &mut tx);
        let mut mean = Buf::new();
        self.imputation.mean(x, &mut mean);
        let sds: Buf = self.imputation.components.iter().map(|c| c.sd).collect();
        let coef = &self.outcome.coef;
        let mut draw: Buf = smallvec::smallvec![0.0; q];
        let mut feat = Buf::new();

        if map.affine_in_v() {
            // η_z(f) = a_z + Σ_k b_zk f_k
            let zero: Buf = smallvec::smallvec![0.0; q];
            let a0 = map.dot(VarSelector::OUTCOME, 0.0, &tx, &zero, coef);
            let a1 = map.dot(VarSelector::OUTCOME, 1.0, &tx, &zero, coef);
            let mut unit = zero;
            let (mut b0, mut b1) = (Buf::new(), Buf::new());
            for k in 0..q {
                unit[k] = 1.0;
                b0.push(map.dot(VarSelector::OUTCOME, 0.0, &tx, &unit, coef) - a0);
                b1.push(map.dot(VarSelector::OUTCOME, 1.0, &tx, &unit, coef) - a1);
                unit[k] = 0.0;
            }
            let to_feature: smallvec::SmallVec<[Transform; 8]> = (0..q).map(|k| self.feature_transform(k)).collect();
            let df = d as f64;
            match self.outcome.family {
                OutcomeFamily::Continuous => {
                    let mut sums: Buf = smallvec::smallvec![0.0; q];
                    for _ in 0..d {
                        for k in 0..q {
                            let e: f64 = rng.sample(StandardNormal);
                            sums[k] += to_feature[k].apply(mean[k] + sds[k] * e);
                        }
                    }
                    let (mut d0, mut d1) = (a0, a1);
                    for k in 0..q {
                        d0 += b0[k] * sums[k] / df;
                        d1 += b1[k] * sums[k] / df;
                    }
                    DeltaPair { d0, d1 }
                }
                OutcomeFamily::Binary => {
                    let (mut s0, mut s1) = (0.0, 0.0);
                    for _ in 0..d {
                        let (mut e0, mut e1) = (a0, a1);
                        for k in 0..q {
                            let e: f64 = rng.sample(StandardNormal);
                            let f = to_feature[k].apply(mean[k] + sds[k] * e);
                            e0 += b0[k] * f;
                            e1 += b1[k] * f;
                        }
                        s0 += expit(e0);
                        s1 += expit(e1);
                    }
                    DeltaPair { d0: s0 / df, d1: s1 / df }
                }
            }
        } else {
            let (mut s0, mut s1) = (0.0, 0.0);
            for _ in 0..d {
                for k in 0..q {
                    let e: f64 = rng.sample(StandardNormal);
                    draw[k] = mean[k] + sds[k] * e;
                }
                self.draw_to_features(&draw, &mut feat);
                s0 += self.outcome.mean(map.dot(VarSelector::OUTCOME, 0.0, &tx, &feat, coef));
                s1 += self.outcome.mean(map.dot(VarSelector::OUTCOME, 1.0, &tx, &feat, coef));
            }
            DeltaPair {
                d0: s0 / d as f64,
                d1: s1 / d as f64,
            }
        }
    }

    /// `δ` together with its gradient in the outcome coefficients,
    /// `∂δ(z, x)/∂γ = D⁻¹ Σ_d μ'(η) · row(z, x, ṽ_d)`, from the same draws
    /// (and the same stream consumption) as [`NuisanceFit::delta_pair`].
    pub fn delta_with_gradient<R: Rng + ?Sized>(&self, x: &[f64], d: usize, rng: &mut R) -> (DeltaPair, [Vec<f64>; 2]) {
        let d = d.max(1);
        let map = &self.spec.outcome;
        let q = self.q;
        let width = self.outcome.coef.len();
        let mut tx = Buf::new();
        map.transform_x(x, &mut tx);
        let mut mean = Buf::new();
        self.imputation.mean(x, &mut mean);
        let mut draw: Buf = smallvec::smallvec![0.0; q];
        let mut feat = Buf::new();
        let mut row = Vec::with_capacity(width);
        let mut sums = [0.0, 0.0];
        let mut grads = [vec![0.0; width], vec![0.0; width]];
        for _ in 0..d {
            for k in 0..q {
                let e: f64 = rng.sample(StandardNormal);
                draw[k] = mean[k] + self.imputation.components[k].sd * e;
            }
            self.draw_to_features(&draw, &mut feat);
            for (zi, zf) in [(0usize, 0.0), (1, 1.0)] {
                row.clear();
                map.push_row(VarSelector::OUTCOME, zf, &tx, &feat, &mut row);
                let eta: f64 = row.iter().zip(&self.outcome.coef).map(|(a, b)| a * b).sum();
                sums[zi] += self.outcome.mean(eta);
                let slope = self.outcome.mean_derivative(eta);
                grads[zi].iter_mut().zip(&row).for_each(|(g, r)| *g += slope * r);
            }
        }
        let df = d as f64;
        grads.iter_mut().flatten().for_each(|g| *g /= df);
        (
            DeltaPair {
                d0: sums[0] / df,
                d1: sums[1] / df,
            },
            grads,
        )
    }
}

/// `δ(z, x)` averaged over `d` imputation draws.
pub fn delta<R: Rng + ?Sized>(fit: &NuisanceFit, z: bool, x: &[f64], d: usize, rng: &mut R) -> f64 {
    fit.delta_pair(x, d, rng).get(z)
}

/// `δ(0, ·)` and `δ(1, ·)` for every record, each from its covariate
/// stream of `seed`.
pub fn delta_table(ds: &LinkedDataset, fit: &NuisanceFit, d: usize, seed: u64) -> Vec<DeltaPair> {
    parallel::map_indexed(ds.len(), |i| {
        let x = ds.record(i).x;
        fit.delta_pair(x, d, &mut streams::covariate_stream(seed, x))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LinkedRecord;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use crate::streams::StreamRng as ChaCha8Rng;

    fn col(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(values.len(), 1, |i, _| values[i])
    }

    #[test]
    fn intercept_only_logistic_is_logit_of_mean() {
        let x = col(&[1.0; 4]);
        let f = fit_logistic(&x, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(f.converged);
        assert_abs_diff_eq!(f.coef[0], 0.0, epsilon = 1e-12);
        let f = fit_logistic(&x, &[1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(f.coef[0], 3f64.ln(), epsilon = 1e-9);
        assert!(f.final_score_norm < SCORE_TOL);
    }

    #[test]
    fn rank_deficient_logistic_is_singular() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let err = fit_logistic(&x, &[1.0, 0.0, 1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::SingularDesign { .. }));
    }

    #[test]
    fn separated_logistic_warns() {
        let x = DMatrix::from_row_slice(6, 2, &[1., -3., 1., -2., 1., -1., 1., 1., 1., 2., 1., 3.]);
        let f = fit_logistic(&x, &[0., 0., 0., 1., 1., 1.]).unwrap();
        assert!(f.separation_warning, "{f:?}");
    }

    #[test]
    fn exact_linear_fit() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 0., 1., 1., 1., 2., 1., 3.]);
        let f = fit_linear(&x, &[0., 2., 4., 6.]).unwrap();
        assert_abs_diff_eq!(f.coef[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.coef[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.residual_variance, 0.0, epsilon = 1e-20);
        let f = fit_linear(&x, &[1.5; 4]).unwrap();
        assert_abs_diff_eq!(f.coef[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.coef[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_linear_is_singular() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 2., 2., 4., 3., 6.]);
        assert!(matches!(fit_linear(&x, &[1., 2., 3.]), Err(Error::SingularDesign { .. })));
    }

    #[test]
    fn clamping_counts_and_is_idempotent() {
        let c = clamp_prob(expit(40.0), 1e-6);
        assert!(c.clamped);
        assert_eq!(c.value, 1.0 - 1e-6);
        let again = clamp_prob(c.value, 1e-6);
        assert_eq!(again.value, c.value);
        assert!(!again.clamped);
        assert_eq!(expit(0.0), 0.5);
        assert!(!clamp_prob(0.5, 1e-6).clamped);
    }

    fn small_dataset(vfn: impl Fn(f64) -> f64) -> LinkedDataset {
        let recs = (0..12)
            .map(|i| {
                let x = i as f64 / 3.0;
                LinkedRecord::linked(i % 2 == 0, x, vec![x], vec![vfn(x)])
            })
            .collect();
        LinkedDataset::from_records(recs, 1, 1, OutcomeFamily::Continuous).unwrap()
    }

    #[test]
    fn constant_v_gives_zero_sd_warning() {
        let ds = small_dataset(|_| 3.0);
        let f = fit_imputation(&ds, &ModelSpec::default_for(1, 1)).unwrap();
        assert_abs_diff_eq!(f.components[0].coef[0], 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(f.components[0].coef[1], 0.0, epsilon = 1e-10);
        assert_eq!(f.components[0].sd, 0.0);
        assert!(f.degenerate_sd_warning);
    }

    #[test]
    fn v_equal_x_gives_identity_coefficients() {
        let ds = small_dataset(|x| x);
        let f = fit_imputation(&ds, &ModelSpec::default_for(1, 1)).unwrap();
        assert_abs_diff_eq!(f.components[0].coef[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(f.components[0].coef[1], 1.0, epsilon = 1e-10);
        assert!(f.degenerate_sd_warning);
    }

    #[test]
    fn too_few_linked_rows_for_imputation() {
        let recs = vec![
            LinkedRecord::linked(true, 1.0, vec![0.0], vec![1.0]),
            LinkedRecord::linked(false, 1.0, vec![1.0], vec![2.0]),
            LinkedRecord::linked(true, 1.0, vec![2.0], vec![2.5]),
            LinkedRecord::unlinked(false, 1.0, vec![3.0]),
        ];
        let ds = LinkedDataset::from_records(recs, 1, 1, OutcomeFamily::Continuous).unwrap();
        assert!(matches!(fit_imputation(&ds, &ModelSpec::default_for(1, 1)), Err(Error::Degenerate(_))));
    }

    fn plug_in(outcome: Vec<f64>, imp_coef: Vec<f64>, sd: f64, family: OutcomeFamily) -> NuisanceFit {
        NuisanceFit::from_parts(
            ModelSpec::default_for(1, 1),
            1,
            1,
            family,
            vec![0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            outcome,
            vec![ImputationComponent { coef: imp_coef, sd }],
        )
        .unwrap()
    }

    #[test]
    fn zero_sd_draws_are_constant() {
        let fit = plug_in(vec![0.0; 6], vec![1.5, 0.0], 0.0, OutcomeFamily::Continuous);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = draw_imputations(&fit.imputation, &[0.7], 25, &mut rng);
        assert!(draws.iter().all(|d| d == &[1.5]));
    }

    #[test]
    fn draws_are_reproducible() {
        let fit = plug_in(vec![0.0; 6], vec![0.0, 0.0], 1.0, OutcomeFamily::Continuous);
        let a = draw_imputations(&fit.imputation, &[0.0], 50, &mut ChaCha8Rng::seed_from_u64(9));
        let b = draw_imputations(&fit.imputation, &[0.0], 50, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn draw_moments() {
        let fit = plug_in(vec![0.0; 6], vec![0.0, 0.0], 1.0, OutcomeFamily::Continuous);
        let draws = draw_imputations(&fit.imputation, &[0.0], 100_000, &mut ChaCha8Rng::seed_from_u64(3));
        let vals: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        assert!(m.abs() < 0.02, "{m}");
        assert!((sd - 1.0).abs() < 0.02, "{sd}");
    }

    #[test]
    fn delta_is_exact_for_zero_sd_linear_outcome() {
        // μ = 0.5 + 2z + 0.5x + 0.5v + 2zx + zv, v fixed at m(x) = 0.5 + 0.5x
        let fit = plug_in(vec![0.5, 2.0, 0.5, 0.5, 2.0, 1.0], vec![0.5, 0.5], 0.0, OutcomeFamily::Continuous);
        let x = 0.8;
        let m = 0.5 + 0.5 * x;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = fit.delta_pair(&[x], 17, &mut rng);
        assert_abs_diff_eq!(pair.d1, fit.outcome_at(true, &[x], &[m]), epsilon = 1e-12);
        assert_abs_diff_eq!(pair.d0, fit.outcome_at(false, &[x], &[m]), epsilon = 1e-12);
    }

    #[test]
    fn delta_matches_mean_of_predictions_over_same_draws() {
        let mut spec = ModelSpec::default_for(1, 1);
        spec.outcome = spec.outcome.with_transform(Transform::SqrtAbs);
        for family in [OutcomeFamily::Continuous, OutcomeFamily::Binary] {
            let fit = NuisanceFit::from_parts(
                spec.clone(),
                1,
                1,
                family,
                vec![0.0, 0.0],
                vec![0.0, 0.0, 0.0],
                vec![-0.3, 1.1, 0.4, -0.7, 0.2, 0.9],
                vec![ImputationComponent { coef: vec![0.2, 0.6], sd: 1.3 }],
            )
            .unwrap();
            let x = [-0.4];
            let draws = draw_imputations(&fit.imputation, &x, 200, &mut ChaCha8Rng::seed_from_u64(5));
            let pair = fit.delta_pair(&x, 200, &mut ChaCha8Rng::seed_from_u64(5));
            for z in [false, true] {
                let direct = draws.iter().map(|d| fit.outcome_at_draw(z, &x, d)).sum::<f64>() / 200.0;
                assert_abs_diff_eq!(pair.get(z), direct, epsilon = 1e-12);
            }
            let (g_pair, _) = fit.delta_with_gradient(&x, 200, &mut ChaCha8Rng::seed_from_u64(5));
            assert_abs_diff_eq!(g_pair.d0, pair.d0, epsilon = 1e-12);
            assert_abs_diff_eq!(g_pair.d1, pair.d1, epsilon = 1e-12);
        }
    }

    #[test]
    fn delta_gradient_matches_finite_difference() {
        let fit = plug_in(vec![-0.3, 1.1, 0.4, -0.7, 0.2, 0.9], vec![0.2, 0.6], 1.3, OutcomeFamily::Binary);
        let x = [0.3];
        let (_, grads) = fit.delta_with_gradient(&x, 50, &mut ChaCha8Rng::seed_from_u64(2));
        let h = 1e-6;
        for j in 0..6 {
            let mut up = fit.clone();
            up.outcome.coef[j] += h;
            let mut dn = fit.clone();
            dn.outcome.coef[j] -= h;
            let pu = up.delta_pair(&x, 50, &mut ChaCha8Rng::seed_from_u64(2));
            let pd = dn.delta_pair(&x, 50, &mut ChaCha8Rng::seed_from_u64(2));
            assert_abs_diff_eq!(grads[1][j], (pu.d1 - pd.d1) / (2.0 * h), epsilon = 1e-7);
            assert_abs_diff_eq!(grads[0][j], (pu.d0 - pd.d0) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn transformed_imputation_scale_feeds_outcome_directly() {
        let mut spec = ModelSpec::default_for(1, 1);
        spec.imputation = spec.imputation.with_transform(Transform::SqrtAbs);
        spec.outcome = spec.outcome.with_transform(Transform::SqrtAbs);
        let fit = NuisanceFit::from_parts(
            spec,
            1,
            1,
            OutcomeFamily::Continuous,
            vec![0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            vec![ImputationComponent { coef: vec![-2.0, 0.0], sd: 0.0 }],
        )
        .unwrap();
        // the draw (-2) is used as the transformed feature, not re-transformed
        let pair = fit.delta_pair(&[1.0], 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_abs_diff_eq!(pair.d0, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn binary_outcome_at_design_point() {
        let fit = plug_in(vec![-2.0, 4.0, 0.5, 0.5, 0.5, 0.5], vec![1.0, 0.75], 1.0, OutcomeFamily::Binary);
        let m = fit.outcome_at(true, &[0.0], &[0.0]);
        assert_abs_diff_eq!(m, expit(2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(m, 0.8808, epsilon = 1e-4);
    }

    #[test]
    fn missing_v_is_reported() {
        let recs = vec![
            LinkedRecord::linked(true, 1.0, vec![0.0], vec![1.0]),
            LinkedRecord::linked(false, 1.0, vec![1.0], vec![2.0]),
            LinkedRecord::unlinked(false, 1.0, vec![3.0]),
        ];
        let ds = LinkedDataset::from_records(recs, 1, 1, OutcomeFamily::Continuous).unwrap();
        let fit = plug_in(vec![0.0; 6], vec![0.0, 0.0], 1.0, OutcomeFamily::Continuous);
        assert!(matches!(fit.predict_propensity(&ds.record(2)), Err(Error::MissingData(_))));
        assert!(matches!(fit.predict_outcome(true, &ds.record(2)), Err(Error::MissingData(_))));
        assert_eq!(fit.predict_selection(&ds.record(2)).value, 0.5);
    }
}
