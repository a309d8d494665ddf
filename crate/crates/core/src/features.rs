//! Declarative covariate transforms and design-matrix construction.
//!
//! Column order is fixed: intercept, transformed main effects (`z`, then
//! `x1..xp`, then `v1..vq`, restricted to the variables the model may use),
//! then interaction products in declaration order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{LinkedDataset, Record};
use crate::error::{Error, Result};


/// Small inline buffer for per-record covariate values.
pub type Buf = smallvec::SmallVec<[f64; 8]>;
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    /// `u -> |u|^(1/2)`
    SqrtAbs,
}

impl Transform {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::SqrtAbs => u.abs().sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    Z,
    X(usize),
    V(usize),
}

/// Which variable blocks enter a model as main effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarSelector {
    pub z: bool,
    pub x: bool,
    pub v: bool,
}

impl VarSelector {
    pub const SELECTION: VarSelector = VarSelector { z: false, x: true, v: false };
    pub const PROPENSITY: VarSelector = VarSelector { z: false, x: true, v: true };
    pub const OUTCOME: VarSelector = VarSelector { z: true, x: true, v: true };
    pub const IMPUTATION: VarSelector = VarSelector { z: false, x: true, v: false };

    fn allows(self, c: Covariate) -> bool {
        match c {
            Covariate::Z => self.z,
            Covariate::X(_) => self.x,
            Covariate::V(_) => self.v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowFilter {
    All,
    Linked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub include_intercept: bool,
    /// Main-effect columns for `z`, `x` and `v`; off for intercept-only models.
    #[serde(default = "enabled")]
    pub include_mains: bool,
    /// Transform applied to every `x` component unless overridden.
    pub x_transform: Transform,
    /// Transform applied to every `v` component unless overridden.
    pub v_transform: Transform,
    #[serde(default)]
    pub overrides: Vec<(Covariate, Transform)>,
    #[serde(default)]
    pub interactions: Vec<Vec<Covariate>>,
}

fn enabled() -> bool {
    true
}

impl Default for FeatureMap {
    fn default() -> Self {
        FeatureMap {
            include_intercept: true,
            include_mains: true,
            x_transform: Transform::Identity,
            v_transform: Transform::Identity,
            overrides: Vec::new(),
            interactions: Vec::new(),
        }
    }
}

impl FeatureMap {
    /// Intercept plus untransformed main effects.
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn intercept_only() -> Self {
        FeatureMap {
            include_mains: false,
            ..Self::default()
        }
    }

    /// Same layout with every covariate passed through `t`.
    pub fn with_transform(mut self, t: Transform) -> Self {
        self.x_transform = t;
        self.v_transform = t;
        self
    }

    pub fn with_interactions(mut self, interactions: Vec<Vec<Covariate>>) -> Self {
        self.interactions = interactions;
        self
    }

    /// `z * x_j` for every `j < p` and `z * v_k` for every `k < q`.
    pub fn treatment_interactions(p: usize, q: usize) -> Vec<Vec<Covariate>> {
        (0..p)
            .map(|j| vec![Covariate::Z, Covariate::X(j)])
            .chain((0..q).map(|k| vec![Covariate::Z, Covariate::V(k)]))
            .collect()
    }

    pub fn transform_of(&self, c: Covariate) -> Transform {
        if let Some((_, t)) = self.overrides.iter().rev().find(|(cc, _)| *cc == c) {
            return *t;
        }
        match c {
            Covariate::Z => Transform::Identity,
            Covariate::X(_) => self.x_transform,
            Covariate::V(_) => self.v_transform,
        }
    }

    pub fn width(&self, vars: VarSelector, p: usize, q: usize) -> usize {
        let mains = if self.include_mains {
            usize::from(vars.z) + if vars.x { p } else { 0 } + if vars.v { q } else { 0 }
        } else {
            0
        };
        usize::from(self.include_intercept) + mains + self.interactions.len()
    }

    /// Checks that interactions only reference covariates the model may use.
    pub fn validate(&self, vars: VarSelector, p: usize, q: usize) -> Result<()> {
        for term in self.interactions.iter().flatten() {
            let in_range = match *term {
                Covariate::Z => true,
                Covariate::X(j) => j < p,
                Covariate::V(k) => k < q,
            };
            if !vars.allows(*term) || !in_range {
                return Err(Error::Validation(format!(
                    "interaction term {term:?} is not available to this model"
                )));
            }
        }
        Ok(())
    }

    /// True when every column is affine in the transformed `v` features,
    /// i.e. no interaction multiplies two `v` factors.
    pub fn affine_in_v(&self) -> bool {
        self.interactions
            .iter()
            .all(|t| t.iter().filter(|c| matches!(c, Covariate::V(_))).count() <= 1)
    }

    pub fn transform_x(&self, x: &[f64], out: &mut Buf) {
        out.clear();
        out.extend(x.iter().enumerate().map(|(j, &a)| self.transform_of(Covariate::X(j)).apply(a)));
    }

    pub fn transform_v(&self, v: &[f64], out: &mut Buf) {
        out.clear();
        out.extend(v.iter().enumerate().map(|(k, &a)| self.transform_of(Covariate::V(k)).apply(a)));
    }

    /// Appends one design row from already-transformed covariates.
    pub fn push_row(&self, vars: VarSelector, z: f64, tx: &[f64], tv: &[f64], out: &mut Vec<f64>) {
        if self.include_intercept {
            out.push(1.0);
        }
        if self.include_mains {
            if vars.z {
                out.push(z);
            }
            if vars.x {
                out.extend_from_slice(tx);
            }
            if vars.v {
                out.extend_from_slice(tv);
            }
        }
        for term in &self.interactions {
            let prod = term.iter().fold(1.0, |acc, c| {
                acc * match *c {
                    Covariate::Z => z,
                    Covariate::X(j) => tx[j],
                    Covariate::V(k) => tv[k],
                }
            });
            out.push(prod);
        }
    }

    /// Linear predictor `row · coef` without materialising the row.
    pub fn dot(&self, vars: VarSelector, z: f64, tx: &[f64], tv: &[f64], coef: &[f64]) -> f64 {
        let mut it = coef.iter();
        let mut acc = 0.0;
        if self.include_intercept {
            acc += it.next().copied().unwrap_or(0.0);
        }
        if self.include_mains {
            if vars.z {
                acc += z * it.next().copied().unwrap_or(0.0);
            }
            if vars.x {
                for &a in tx {
                    acc += a * it.next().copied().unwrap_or(0.0);
                }
            }
            if vars.v {
                for &a in tv {
                    acc += a * it.next().copied().unwrap_or(0.0);
                }
            }
        }
        for term in &self.interactions {
            let prod = term.iter().fold(1.0, |acc, c| {
                acc * match *c {
                    Covariate::Z => z,
                    Covariate::X(j) => tx[j],
                    Covariate::V(k) => tv[k],
                }
            });
            acc += prod * it.next().copied().unwrap_or(0.0);
        }
        acc
    }

    /// Design row for a record, using its observed `v` when the model needs it.
    pub fn record_row(&self, vars: VarSelector, rec: &Record<'_>, z: f64, out: &mut Vec<f64>) -> Result<()> {
        let mut tx = Buf::new();
        self.transform_x(rec.x, &mut tx);
        let mut tv = Buf::new();
        if (vars.v && self.include_mains) || self.interactions.iter().flatten().any(|c| matches!(c, Covariate::V(_))) {
            let v = rec
                .v
                .ok_or_else(|| Error::MissingData(format!("record {} has no v (r = 0)", rec.index)))?;
            self.transform_v(v, &mut tv);
        }
        self.push_row(vars, z, &tx, &tv, out);
        Ok(())
    }
}

/// Design matrix for the selected rows of `ds`. Row order follows the
/// dataset; column order is documented at module level.
pub fn build_design(ds: &LinkedDataset, map: &FeatureMap, rows: RowFilter, vars: VarSelector) -> Result<DMatrix<f64>> {
    map.validate(vars, ds.p(), ds.q())?;
    let width = map.width(vars, ds.p(), ds.q());
    let needs_v = (vars.v && map.include_mains) || map.interactions.iter().flatten().any(|c| matches!(c, Covariate::V(_)));
    let mut data = Vec::with_capacity(ds.len() * width);
    let (mut tx, mut tv) = (Buf::new(), Buf::new());
    let mut n = 0;
    for rec in ds.records() {
        if rows == RowFilter::Linked && !rec.r() {
            continue;
        }
        map.transform_x(rec.x, &mut tx);
        tv.clear();
        if needs_v {
            let v = rec
                .v
                .ok_or_else(|| Error::MissingData(format!("record {} has no v (r = 0)", rec.index)))?;
            map.transform_v(v, &mut tv);
        }
        map.push_row(vars, rec.z_f64(), &tx, &tv, &mut data);
        n += 1;
    }
    // column-major fill straight from the row buffer
    Ok(DMatrix::from_row_iterator(n, width, data))
}

/// The four working-model feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub selection: FeatureMap,
    pub propensity: FeatureMap,
    pub outcome: FeatureMap,
    /// Regressors are functions of `x`; the `v` transform sets the scale on
    /// which `v` is modelled and drawn (see `nuisance::ImputationFit`).
    pub imputation: FeatureMap,
}

impl ModelSpec {
    /// Main effects with intercepts everywhere; the outcome model adds
    /// treatment-by-covariate interactions.
    pub fn default_for(p: usize, q: usize) -> Self {
        ModelSpec {
            selection: FeatureMap::linear(),
            propensity: FeatureMap::linear(),
            outcome: FeatureMap::linear().with_interactions(FeatureMap::treatment_interactions(p, q)),
            imputation: FeatureMap::linear(),
        }
    }

    pub fn validate(&self, p: usize, q: usize) -> Result<()> {
        self.selection.validate(VarSelector::SELECTION, p, q)?;
        self.propensity.validate(VarSelector::PROPENSITY, p, q)?;
        self.outcome.validate(VarSelector::OUTCOME, p, q)?;
        self.imputation.validate(VarSelector::IMPUTATION, p, q)
    }
}
