//! Optimal second-phase sampling fraction under a linear cost budget.
//!
//! A study of `n` units costs `C = n (C1 + ρ C2)`. The asymptotic variance of
//! the triply robust ATE estimator under completely random linkage is
//! `C2 Γ1 ρ / C + C1 Γ2 / (C ρ) + (C1 Γ1 + C2 Γ2) / C`, with `Γ1`, `Γ2`
//! estimated from a pilot.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LinkedDataset;
use crate::error::{Error, Result};
use crate::estimators::DrawConfig;
use crate::features::{Buf, VarSelector};
use crate::inference::wald_se;
use crate::nuisance::{fit_logistic, NuisanceFit};
use crate::{parallel, streams};

pub const GRID_POINTS: usize = 200;
pub const MIN_RHO: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    /// total budget
    #[serde(rename = "C")]
    pub total: f64,
    /// cost of `(z, x, y)` per unit
    #[serde(rename = "C1")]
    pub first_phase: f64,
    /// cost of `v` per unit
    #[serde(rename = "C2")]
    pub second_phase: f64,
}

impl CostSpec {
    pub fn new(total: f64, first_phase: f64, second_phase: f64) -> Result<CostSpec> {
        let c = CostSpec {
            total,
            first_phase,
            second_phase,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("C", self.total), ("C1", self.first_phase), ("C2", self.second_phase)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be a positive number, got {v}")));
            }
        }
        if self.total < self.first_phase {
            return Err(Error::Validation(format!(
                "budget C = {} cannot fund a single unit at C1 = {}",
                self.total, self.first_phase
            )));
        }
        if self.total <= self.second_phase || self.first_phase / (self.total - self.second_phase) >= 1.0 {
            return Err(Error::Validation(format!(
                "budget C = {} cannot fund a single linked unit at C1 + C2 = {}",
                self.total,
                self.first_phase + self.second_phase
            )));
        }
        Ok(())
    }

    /// Smallest fraction at which the budget still buys one linked unit.
    pub fn feasible_rho_min(&self) -> f64 {
        (self.first_phase / (self.total - self.second_phase)).max(MIN_RHO)
    }

    /// `n = C / (C1 + ρ C2)`.
    pub fn sample_size(&self, rho: f64) -> f64 {
        self.total / (self.first_phase + rho * self.second_phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimates {
    pub gamma1: f64,
    pub gamma2: f64,
    pub n_pilot: usize,
    pub linked_pilot: usize,
    pub rho_hat: f64,
    pub tau_hat: f64,
    /// whether the nuisance-estimation terms were added to `S2`
    pub corrected: bool,
    pub notes: Vec<String>,
}

impl GammaEstimates {
    pub fn new(gamma1: f64, gamma2: f64) -> GammaEstimates {
        GammaEstimates {
            gamma1,
            gamma2,
            n_pilot: 0,
            linked_pilot: 0,
            rho_hat: f64::NAN,
            tau_hat: f64::NAN,
            corrected: false,
            notes: Vec::new(),
        }
    }
}

/// How to treat the `S2` terms that account for estimated propensity and
/// outcome coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    /// include them; singular information matrices are an error
    #[default]
    Full,
    /// include them when the information matrices are invertible
    Fallback,
    /// leave them out
    Off,
}

struct PilotRow {
    r: bool,
    s1_base: f64,
    bracket: f64,
    /// `∂(per-record τ̂)/∂β` and `∂/∂γ`
    grad_beta: Vec<f64>,
    grad_gamma: Vec<f64>,
    score_pi: Vec<f64>,
    score_mu: Vec<f64>,
    /// `w` and design row of the information contribution `−w row rowᵀ`
    info_pi: (f64, Vec<f64>),
    info_mu: (f64, Vec<f64>),
}

/// `Γ̂1 = Pn S1² + 2 P_linked(S2 S1)` and `Γ̂2 = P_linked S2²` from a pilot,
/// taking the selection probability as the linked fraction.
pub fn estimate_gammas(pilot: &LinkedDataset, fit: &NuisanceFit, draws: DrawConfig, correction: Correction) -> Result<GammaEstimates> {
    let n = pilot.len();
    let linked = pilot.n_linked();
    if linked == 0 || n == 0 {
        return Err(Error::Degenerate("pilot has no linked records".into()));
    }
    let rho = linked as f64 / n as f64;
    let out_map = &fit.spec.outcome;
    let prop_map = &fit.spec.propensity;
    let mut_width = fit.outcome.coef.len();
    let prop_width = fit.propensity.coef.len();

    let rows: Vec<Result<PilotRow>> = parallel::map_indexed(n, |i| {
        let rec = pilot.record(i);
        let mut rng = streams::covariate_stream(draws.seed, rec.x);
        let (dp, dgrad) = fit.delta_with_gradient(rec.x, draws.d, &mut rng);
        let s1_base = dp.d1 - dp.d0;
        let mut row = PilotRow {
            r: rec.r(),
            s1_base,
            bracket: 0.0,
            grad_beta: vec![0.0; prop_width],
            grad_gamma: dgrad[1].iter().zip(&dgrad[0]).map(|(a, b)| a - b).collect(),
            score_pi: Vec::new(),
            score_mu: Vec::new(),
            info_pi: (0.0, Vec::new()),
            info_mu: (0.0, Vec::new()),
        };
        if !rec.r() {
            return Ok(row);
        }
        let v = rec
            .v
            .ok_or_else(|| Error::MissingData(format!("record {i} is linked but has no v")))?;
        let pi = fit.propensity_at(rec.x, v).value;
        let (z, y) = (rec.z_f64(), rec.y);

        let (mut tx, mut tv) = (Buf::new(), Buf::new());
        out_map.transform_x(rec.x, &mut tx);
        out_map.transform_v(v, &mut tv);
        let mut out_rows = [Vec::with_capacity(mut_width), Vec::with_capacity(mut_width)];
        let mut mu = [0.0; 2];
        let mut slope = [0.0; 2];
        for zi in 0..2 {
            out_map.push_row(VarSelector::OUTCOME, zi as f64, &tx, &tv, &mut out_rows[zi]);
            let eta: f64 = out_rows[zi].iter().zip(&fit.outcome.coef).map(|(a, b)| a * b).sum();
            mu[zi] = fit.outcome.mean(eta);
            slope[zi] = fit.outcome.mean_derivative(eta);
        }
        let w1 = z / pi;
        let w0 = (1.0 - z) / (1.0 - pi);
        row.bracket = w1 * (y - mu[1]) + mu[1] - dp.d1 - w0 * (y - mu[0]) - mu[0] + dp.d0;

        let mut prow = Vec::with_capacity(prop_width);
        let (mut px, mut pv) = (Buf::new(), Buf::new());
        prop_map.transform_x(rec.x, &mut px);
        prop_map.transform_v(v, &mut pv);
        prop_map.push_row(VarSelector::PROPENSITY, 0.0, &px, &pv, &mut prow);

        // π̇ = π(1 − π) row
        let dpi = -w1 * (y - mu[1]) * (1.0 - pi) - w0 * (y - mu[0]) * pi;
        row.grad_beta = prow.iter().map(|a| dpi * a / rho).collect();
        for (j, g) in row.grad_gamma.iter_mut().enumerate() {
            let own = (1.0 - w1) * slope[1] * out_rows[1][j] - dgrad[1][j] - (1.0 - w0) * slope[0] * out_rows[0][j] + dgrad[0][j];
            *g += own / rho;
        }
        row.score_pi = prow.iter().map(|a| a * (z - pi)).collect();
        row.info_pi = (pi * (1.0 - pi), prow);
        let obs = usize::from(rec.z);
        row.score_mu = out_rows[obs].iter().map(|a| a * (y - mu[obs])).collect();
        row.info_mu = (slope[obs], std::mem::take(&mut out_rows[obs]));
        Ok(row)
    });
    let rows: Vec<PilotRow> = rows.into_iter().collect::<Result<_>>()?;

    let nf = n as f64;
    let tau = rows.iter().map(|r| r.s1_base + if r.r { r.bracket / rho } else { 0.0 }).sum::<f64>() / nf;

    let mut notes = vec!["imputation coefficient term omitted from S2 (mean zero under the union model)".to_string()];
    let mut corrected = false;
    let mut adj_beta = DVector::zeros(prop_width);
    let mut adj_gamma = DVector::zeros(mut_width);
    if correction != Correction::Off {
        let lf = linked as f64;
        let g_beta = mean_vec(rows.iter().map(|r| &r.grad_beta), prop_width, nf);
        let g_gamma = mean_vec(rows.iter().map(|r| &r.grad_gamma), mut_width, nf);
        let info_pi = info_matrix(rows.iter().filter(|r| r.r).map(|r| &r.info_pi), prop_width, lf);
        let info_mu = info_matrix(rows.iter().filter(|r| r.r).map(|r| &r.info_mu), mut_width, lf);
        // S2 gains −Gᵀ H⁻¹ S with H = −info, i.e. +Gᵀ info⁻¹ S
        let solved = solve_info(&info_pi, &g_beta, "propensity").and_then(|b| Ok((b, solve_info(&info_mu, &g_gamma, "outcome")?)));
        match solved {
            Ok((b, g)) => {
                adj_beta = b;
                adj_gamma = g;
                corrected = true;
            }
            Err(e) if correction == Correction::Fallback => {
                notes.push(format!("{e}; S2 computed without estimation terms"));
            }
            Err(e) => return Err(e),
        }
    } else {
        notes.push("S2 computed without estimation terms".into());
    }

    let (mut s1sq, mut s2s1, mut s2sq) = (0.0, 0.0, 0.0);
    for r in &rows {
        let s1 = r.s1_base - tau;
        s1sq += s1 * s1;
        if r.r {
            let mut s2 = r.bracket;
            if corrected {
                s2 += dot(&adj_beta, &r.score_pi) + dot(&adj_gamma, &r.score_mu);
            }
            s2s1 += s2 * s1;
            s2sq += s2 * s2;
        }
    }
    let lf = linked as f64;
    Ok(GammaEstimates {
        gamma1: s1sq / nf + 2.0 * s2s1 / lf,
        gamma2: s2sq / lf,
        n_pilot: n,
        linked_pilot: linked,
        rho_hat: rho,
        tau_hat: tau,
        corrected,
        notes,
    })
}

fn dot(a: &DVector<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_vec<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, width: usize, n: f64) -> DVector<f64> {
    let mut acc = DVector::zeros(width);
    for r in rows {
        for (a, b) in acc.iter_mut().zip(r) {
            *a += b;
        }
    }
    acc / n
}

fn info_matrix<'a>(rows: impl Iterator<Item = &'a (f64, Vec<f64>)>, width: usize, n: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(width, width);
    for (w, row) in rows {
        for a in 0..width {
            let wa = w * row[a];
            for b in 0..=a {
                m[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..width {
        for b in 0..a {
            m[(b, a)] = m[(a, b)];
        }
    }
    m / n
}

fn solve_info(info: &DMatrix<f64>, g: &DVector<f64>, which: &'static str) -> Result<DVector<f64>> {
    let eig = info.clone().symmetric_eigenvalues();
    let (min, max) = (eig.min(), eig.max());
    if !(max > 0.0) || min <= max * 1e-10 {
        return Err(Error::SingularCorrection(which));
    }
    info.clone()
        .cholesky()
        .map(|c| c.solve(g))
        .ok_or(Error::SingularCorrection(which))
}

/// Largest tolerated `|z|` for an `x` slope in the selection check.
pub const LINKAGE_Z_LIMIT: f64 = 4.0;

/// Wald statistics of a logistic regression of the linkage indicator on
/// `(1, x)`; large slopes suggest linkage was not completely random.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkageCheck {
    pub terms: Vec<String>,
    pub z: Vec<f64>,
    pub flagged: bool,
}

pub fn linkage_check(ds: &LinkedDataset) -> Result<LinkageCheck> {
    let p = ds.p();
    let mut data = Vec::with_capacity(ds.len() * (p + 1));
    let mut r = Vec::with_capacity(ds.len());
    for rec in ds.records() {
        data.push(1.0);
        data.extend_from_slice(rec.x);
        r.push(rec.r_f64());
    }
    let x = DMatrix::from_row_slice(ds.len(), p + 1, &data);
    let fit = fit_logistic(&x, &r)?;
    let se = wald_se(&x, &fit.coef);
    let z: Vec<f64> = fit.coef.iter().zip(&se).map(|(b, s)| b / s).collect();
    let flagged = fit.separation_warning || z[1..].iter().any(|v| !(v.abs() <= LINKAGE_Z_LIMIT));
    let mut terms = vec!["intercept".to_string()];
    terms.extend((1..=p).map(|j| format!("x{j}")));
    Ok(LinkageCheck { terms, z, flagged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rho: f64,
    pub asyvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSolution {
    pub gamma1: f64,
    pub gamma2: f64,
    /// optimum restricted to the feasible range of the curve
    pub rho_star: f64,
    /// closed-form optimum before restriction
    pub rho_unconstrained: f64,
    pub n_star: f64,
    pub n_star_floor: u64,
    pub n_star_ceil: u64,
    pub rho_min: f64,
    pub costs: CostSpec,
    pub curve: Vec<CurvePoint>,
}

impl DesignSolution {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("rho,asyvar\n");
        for p in &self.curve {
            s.push_str(&format!("{},{}\n", p.rho, p.asyvar));
        }
        s
    }

    /// Curve point with the smallest variance.
    pub fn grid_minimizer(&self) -> CurvePoint {
        *self
            .curve
            .iter()
            .min_by(|a, b| a.asyvar.total_cmp(&b.asyvar))
            .expect("curve is never empty")
    }
}

/// `C2 Γ1 ρ / C + C1 Γ2 / (C ρ) + (C1 Γ1 + C2 Γ2) / C`.
pub fn asyvar(gamma1: f64, gamma2: f64, c: &CostSpec, rho: f64) -> f64 {
    let (t, c1, c2) = (c.total, c.first_phase, c.second_phase);
    c2 * gamma1 * rho / t + c1 * gamma2 / (t * rho) + (c1 * gamma1 + c2 * gamma2) / t
}

/// Closed-form minimiser over `(0, 1]`.
pub fn closed_form_rho(gamma1: f64, gamma2: f64, c: &CostSpec) -> f64 {
    let (c1, c2) = (c.first_phase, c.second_phase);
    if gamma1 <= 0.0 || gamma2 * c1 >= gamma1 * c2 {
        1.0
    } else {
        (gamma2 * c1 / (gamma1 * c2)).sqrt()
    }
}

pub fn rho_grid(rho_min: f64) -> Vec<f64> {
    let step = (1.0 - rho_min) / (GRID_POINTS - 1) as f64;
    (0..GRID_POINTS)
        .map(|i| if i == GRID_POINTS - 1 { 1.0 } else { rho_min + step * i as f64 })
        .collect()
}

pub fn optimal_allocation(g: &GammaEstimates, c: &CostSpec) -> Result<DesignSolution> {
    c.validate()?;
    if !(g.gamma1.is_finite() && g.gamma2.is_finite()) || g.gamma2 < 0.0 {
        return Err(Error::Validation(format!(
            "invalid variance components gamma1 = {}, gamma2 = {}",
            g.gamma1, g.gamma2
        )));
    }
    let rho_min = c.feasible_rho_min();
    let unconstrained = closed_form_rho(g.gamma1, g.gamma2, c);
    let rho_star = unconstrained.clamp(rho_min, 1.0);
    let n_star = c.sample_size(rho_star);
    let curve = rho_grid(rho_min)
        .into_iter()
        .map(|rho| CurvePoint {
            rho,
            asyvar: asyvar(g.gamma1, g.gamma2, c, rho),
        })
        .collect();
    Ok(DesignSolution {
        gamma1: g.gamma1,
        gamma2: g.gamma2,
        rho_star,
        rho_unconstrained: unconstrained,
        n_star,
        n_star_floor: n_star.floor() as u64,
        n_star_ceil: n_star.ceil() as u64,
        rho_min,
        costs: *c,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LinkedRecord, OutcomeFamily};
    use crate::features::ModelSpec;
    use approx::assert_abs_diff_eq;

    fn costs(t: f64, c1: f64, c2: f64) -> CostSpec {
        CostSpec::new(t, c1, c2).unwrap()
    }

    #[test]
    fn worked_allocation() {
        let s = optimal_allocation(&GammaEstimates::new(4.0, 1.0), &costs(300.0, 1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(s.rho_star, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.n_star, 200.0, epsilon = 1e-12);
        assert_eq!((s.n_star_floor, s.n_star_ceil), (200, 200));
        assert_eq!(s.curve.len(), GRID_POINTS);
        assert_eq!(s.curve.last().unwrap().rho, 1.0);
    }

    #[test]
    fn full_linkage_branches() {
        let c = costs(100.0, 1.0, 2.0);
        let s = optimal_allocation(&GammaEstimates::new(1.0, 3.0), &c).unwrap();
        assert_eq!(s.rho_star, 1.0);
        assert_abs_diff_eq!(s.n_star, 100.0 / 3.0, epsilon = 1e-12);
        let s = optimal_allocation(&GammaEstimates::new(-1.0, 0.2), &c).unwrap();
        assert_eq!(s.rho_star, 1.0);
        assert_eq!(s.grid_minimizer().rho, 1.0);
    }

    #[test]
    fn tiny_optimum_is_clamped() {
        let c = costs(1000.0, 1.0, 1.0);
        let s = optimal_allocation(&GammaEstimates::new(1.0, 0.0), &c).unwrap();
        assert_eq!(s.rho_unconstrained, 0.0);
        assert_eq!(s.rho_star, s.rho_min);
        assert_eq!(s.rho_min, MIN_RHO);
    }

    #[test]
    fn cost_validation() {
        assert!(CostSpec::new(10.0, 0.0, 1.0).is_err());
        assert!(CostSpec::new(10.0, 1.0, -1.0).is_err());
        assert!(CostSpec::new(0.5, 1.0, 1.0).is_err());
        assert!(CostSpec::new(1.5, 1.0, 1.0).is_err());
        assert!(CostSpec::new(f64::NAN, 1.0, 1.0).is_err());
        assert!(CostSpec::new(2.5, 1.0, 1.0).is_ok());
    }

    #[test]
    fn curve_csv_layout() {
        let s = optimal_allocation(&GammaEstimates::new(4.0, 1.0), &costs(300.0, 1.0, 1.0)).unwrap();
        let csv = s.curve_csv();
        assert!(csv.starts_with("rho,asyvar\n"));
        assert_eq!(csv.lines().count(), GRID_POINTS + 1);
    }

    #[test]
    fn constant_outcome_gives_zero_gammas() {
        let recs: Vec<LinkedRecord> = (0..40)
            .map(|i| {
                let x = (i as f64 * 0.37).sin();
                let z = i % 3 == 0;
                if i % 2 == 0 {
                    LinkedRecord::linked(z, 2.0, vec![x], vec![x + (i as f64 * 1.3).cos()])
                } else {
                    LinkedRecord::unlinked(z, 2.0, vec![x])
                }
            })
            .collect();
        let ds = LinkedDataset::from_records(recs, 1, 1, OutcomeFamily::Continuous).unwrap();
        let mut spec = ModelSpec::default_for(1, 1);
        spec.outcome.interactions.clear();
        let fit = NuisanceFit::fit(&ds, &spec).unwrap();
        let g = estimate_gammas(&ds, &fit, DrawConfig::new(20, 1), Correction::Full).unwrap();
        assert!(g.corrected);
        assert_abs_diff_eq!(g.tau_hat, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.gamma1, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.gamma2, 0.0, epsilon = 1e-9);
        assert_eq!(g.rho_hat, 0.5);
    }

    #[test]
    fn info_solve_detects_singularity() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let g = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(solve_info(&m, &g, "outcome"), Err(Error::SingularCorrection("outcome"))));
    }
}
