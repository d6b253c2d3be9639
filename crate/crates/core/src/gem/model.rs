//! Stoichiometric models, flux balance analysis and minimal media.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::lp::{lp_solve, LpError, LpProblem, LpStatus, Relation, Sense};

/// Uptake amounts below this are treated as zero.
pub const UPTAKE_EPS: f64 = 1e-9;
pub const DEFAULT_GROWTH_FRACTION: f64 = 0.1;

/// Medium components addressed by the perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    O2,
    Fe3,
    No3,
    No2,
    So4,
}

impl Component {
    pub const ALL: [Component; 5] = [Component::O2, Component::Fe3, Component::No3, Component::No2, Component::So4];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::O2 => "O2",
            Component::Fe3 => "Fe3+",
            Component::No3 => "NO3-",
            Component::No2 => "NO2-",
            Component::So4 => "SO4(2-)",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Perturbation {
    RemoveO2,
    RemoveFe3,
    RemoveNO3,
    RemoveNO2,
    RemoveSO4,
    RemoveAllFive,
}

impl Perturbation {
    /// Offset order inside each template block of the tool ids.
    pub const ALL: [Perturbation; 6] = [
        Perturbation::RemoveO2,
        Perturbation::RemoveFe3,
        Perturbation::RemoveNO3,
        Perturbation::RemoveNO2,
        Perturbation::RemoveSO4,
        Perturbation::RemoveAllFive,
    ];

    pub fn components(self) -> &'static [Component] {
        match self {
            Perturbation::RemoveO2 => &[Component::O2],
            Perturbation::RemoveFe3 => &[Component::Fe3],
            Perturbation::RemoveNO3 => &[Component::No3],
            Perturbation::RemoveNO2 => &[Component::No2],
            Perturbation::RemoveSO4 => &[Component::So4],
            Perturbation::RemoveAllFive => &Component::ALL,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GemError {
    #[error("model `{model}`: {reason}")]
    InvalidModel { model: String, reason: String },
    #[error("component {component} maps to `{exchange}`, which is not an exchange of model `{model}`")]
    UnknownComponent { model: String, component: Component, exchange: String },
    #[error("model `{0}` admits unbounded biomass flux")]
    UnboundedGrowth(String),
    #[error("model `{0}` is infeasible at the constrained growth level")]
    Inconsistent(String),
    #[error("growth fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("configuration id {0} is outside 1..=18")]
    InvalidConfig(u32),
    #[error(transparent)]
    Lp(#[from] LpError),
}

mod bound {
    //! Flux bounds: JSON `null` stands for an infinite bound.
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn lower<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }

    pub fn upper<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reaction {
    pub id: String,
    pub stoichiometry: BTreeMap<String, f64>,
    #[serde(serialize_with = "bound::serialize", deserialize_with = "bound::lower")]
    pub lower_bound: f64,
    #[serde(serialize_with = "bound::serialize", deserialize_with = "bound::upper")]
    pub upper_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetabolicModel {
    pub id: String,
    pub metabolites: Vec<String>,
    pub reactions: Vec<Reaction>,
    pub biomass_reaction: String,
    pub exchange_reactions: Vec<String>,
    /// Which exchange carries each perturbable component.
    #[serde(default)]
    pub components: BTreeMap<Component, String>,
}

/// Result of a minimal-medium computation.
#[derive(Clone, Debug, PartialEq)]
pub struct MinimalMedium {
    pub uptakes: BTreeMap<String, f64>,
    pub growth_impossible: bool,
    pub mu_max: f64,
}

impl MetabolicModel {
    pub fn from_json(text: &str) -> Result<MetabolicModel, GemError> {
        let m: MetabolicModel = serde_json::from_str(text)
            .map_err(|e| GemError::InvalidModel { model: "<input>".into(), reason: e.to_string() })?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), GemError> {
        let bad = |reason: String| GemError::InvalidModel { model: self.id.clone(), reason };
        let mets: BTreeSet<&str> = self.metabolites.iter().map(String::as_str).collect();
        if mets.len() != self.metabolites.len() {
            return Err(bad("duplicate metabolite id".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.reactions {
            if !seen.insert(r.id.as_str()) {
                return Err(bad(format!("duplicate reaction `{}`", r.id)));
            }
            if r.lower_bound.is_nan() || r.upper_bound.is_nan() || r.lower_bound > r.upper_bound {
                return Err(bad(format!("reaction `{}` has lower bound above upper bound", r.id)));
            }
            if let Some(m) = r.stoichiometry.keys().find(|m| !mets.contains(m.as_str())) {
                return Err(bad(format!("reaction `{}` uses undeclared metabolite `{m}`", r.id)));
            }
            if r.stoichiometry.values().any(|v| !v.is_finite()) {
                return Err(bad(format!("reaction `{}` has a non-finite coefficient", r.id)));
            }
        }
        if self.reaction(&self.biomass_reaction).is_none() {
            return Err(bad(format!("biomass reaction `{}` not found", self.biomass_reaction)));
        }
        for ex in &self.exchange_reactions {
            let r = self.reaction(ex).ok_or_else(|| bad(format!("exchange `{ex}` not found")))?;
            if r.stoichiometry.len() != 1 {
                return Err(bad(format!("exchange `{ex}` must touch exactly one metabolite")));
            }
        }
        Ok(())
    }

    pub fn reaction(&self, id: &str) -> Option<&Reaction> {
        self.reactions.iter().find(|r| r.id == id)
    }

    fn reaction_index(&self, id: &str) -> Option<usize> {
        self.reactions.iter().position(|r| r.id == id)
    }

    fn is_exchange(&self, id: &str) -> bool {
        self.exchange_reactions.iter().any(|e| e == id)
    }

    /// Steady-state rows `S v = 0` plus bounds, with `extra` trailing columns.
    fn steady_state_lp(&self, sense: Sense, extra: usize) -> LpProblem<f64> {
        let n = self.reactions.len() + extra;
        let mut p = LpProblem::new(sense, vec![0.0; n]);
        for met in &self.metabolites {
            let mut row = vec![0.0; n];
            for (j, r) in self.reactions.iter().enumerate() {
                if let Some(&c) = r.stoichiometry.get(met) {
                    row[j] = c;
                }
            }
            if row.iter().any(|&c| c != 0.0) {
                p = p.constrain(row, Relation::Eq, 0.0);
            }
        }
        for (j, r) in self.reactions.iter().enumerate() {
            p.bounds[j] = (r.lower_bound, r.upper_bound);
        }
        p
    }
}

/// Maximum biomass flux; an infeasible model grows at 0.
pub fn fba_max_growth(model: &MetabolicModel) -> Result<f64, GemError> {
    let bio = model
        .reaction_index(&model.biomass_reaction)
        .ok_or_else(|| GemError::InvalidModel { model: model.id.clone(), reason: "biomass reaction missing".into() })?;
    let mut p = model.steady_state_lp(Sense::Maximize, 0);
    p.objective[bio] = 1.0;
    let sol = lp_solve(&p)?;
    match sol.status {
        LpStatus::Optimal => Ok(sol.objective.max(0.0)),
        LpStatus::Infeasible => Ok(0.0),
        LpStatus::Unbounded => Err(GemError::UnboundedGrowth(model.id.clone())),
    }
}

/// Copy of `model` with uptake of every component in `p` disabled.
pub fn apply_perturbation(model: &MetabolicModel, p: Perturbation) -> Result<MetabolicModel, GemError> {
    let mut out = model.clone();
    for &c in p.components() {
        let Some(ex) = model.components.get(&c) else { continue };
        let idx = model.reaction_index(ex).filter(|_| model.is_exchange(ex)).ok_or_else(|| {
            GemError::UnknownComponent { model: model.id.clone(), component: c, exchange: ex.clone() }
        })?;
        let r = &mut out.reactions[idx];
        r.lower_bound = r.lower_bound.max(0.0);
        r.upper_bound = r.upper_bound.max(r.lower_bound);
    }
    Ok(out)
}

/// Medium of least total uptake flux sustaining `fraction · μ_max`.
pub fn minimal_medium(model: &MetabolicModel, fraction: f64) -> Result<MinimalMedium, GemError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GemError::InvalidFraction(fraction));
    }
    let mu_max = fba_max_growth(model)?;
    if mu_max <= UPTAKE_EPS {
        return Ok(MinimalMedium { uptakes: BTreeMap::new(), growth_impossible: true, mu_max });
    }
    let n = model.reactions.len();
    let ex_idx: Vec<usize> = model.exchange_reactions.iter().filter_map(|e| model.reaction_index(e)).collect();
    let mut p = model.steady_state_lp(Sense::Minimize, ex_idx.len());
    // u_e ≥ max(0, −v_e): auxiliary uptake magnitudes, minimized in total.
    for (k, &j) in ex_idx.iter().enumerate() {
        let u = n + k;
        p.objective[u] = 1.0;
        let mut row = vec![0.0; n + ex_idx.len()];
        row[j] = 1.0;
        row[u] = 1.0;
        p = p.constrain(row, Relation::Ge, 0.0);
    }
    let bio = model.reaction_index(&model.biomass_reaction).expect("validated");
    let floor = fraction * mu_max;
    let (lo, hi) = p.bounds[bio];
    p.bounds[bio] = (lo.max(floor), hi);

    let sol = lp_solve(&p)?;
    if sol.status != LpStatus::Optimal {
        return Err(GemError::Inconsistent(model.id.clone()));
    }
    let uptakes = ex_idx
        .iter()
        .map(|&j| (model.reactions[j].id.clone(), (-sol.x[j]).max(0.0)))
        .filter(|(_, u)| *u > UPTAKE_EPS)
        .collect();
    Ok(MinimalMedium { uptakes, growth_impossible: false, mu_max })
}

/// Restricts uptake to the exchanges in `allowed` (amounts as caps).
pub fn restrict_medium(model: &MetabolicModel, allowed: &BTreeMap<String, f64>) -> MetabolicModel {
    let mut out = model.clone();
    for r in out.reactions.iter_mut().filter(|r| model.is_exchange(&r.id)) {
        let cap = allowed.get(&r.id).copied().unwrap_or(0.0);
        r.lower_bound = r.lower_bound.max(-cap);
        r.upper_bound = r.upper_bound.max(r.lower_bound);
    }
    out
}
