//! Toy metabolic-model simulator behind the `gem_tool`.
//!
//! Tool ids 1–18 enumerate three biomass templates times six medium
//! perturbations. Each id yields the minimal medium of the perturbed model
//! at 10% of its maximum growth rate.

pub mod lp;
pub mod model;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use lp::{lp_solve, Constraint, LpError, LpProblem, LpSolution, LpStatus, Relation, Sense};
pub use model::{
    apply_perturbation, fba_max_growth, minimal_medium, restrict_medium, Component, GemError, MetabolicModel,
    MinimalMedium, Perturbation, Reaction, DEFAULT_GROWTH_FRACTION,
};

pub const NUM_CONFIGS: u32 = 18;
pub const MODEL_UNAVAILABLE: &str = "model unavailable";
pub const NO_GROWTH: &str = "no growth under this medium";

const TOY_MODELS: &str = include_str!("../../data/toy_models.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Archaeal,
    GramNegative,
    GramPositive,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Archaeal, Template::GramNegative, Template::GramPositive];
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::Archaeal => "archaeal",
            Template::GramNegative => "gram_negative",
            Template::GramPositive => "gram_positive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GemConfig {
    pub config_id: u32,
    pub template: Template,
    pub perturbation: Perturbation,
}

impl GemConfig {
    pub fn from_id(id: u32) -> Result<GemConfig, GemError> {
        if !(1..=NUM_CONFIGS).contains(&id) {
            return Err(GemError::InvalidConfig(id));
        }
        let k = (id - 1) as usize;
        Ok(GemConfig { config_id: id, template: Template::ALL[k / 6], perturbation: Perturbation::ALL[k % 6] })
    }

    pub fn id_of(template: Template, perturbation: Perturbation) -> u32 {
        let t = Template::ALL.iter().position(|&x| x == template).unwrap();
        let p = Perturbation::ALL.iter().position(|&x| x == perturbation).unwrap();
        (t * 6 + p + 1) as u32
    }

    pub fn all() -> impl Iterator<Item = GemConfig> {
        (1..=NUM_CONFIGS).map(|id| GemConfig::from_id(id).unwrap())
    }
}

/// Models keyed by biomass template; a missing template is allowed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelSet {
    pub models: BTreeMap<Template, MetabolicModel>,
}

impl ModelSet {
    pub fn from_json(text: &str) -> Result<ModelSet, GemError> {
        let set: ModelSet = serde_json::from_str(text)
            .map_err(|e| GemError::InvalidModel { model: "<model set>".into(), reason: e.to_string() })?;
        for m in set.models.values() {
            m.validate()?;
        }
        Ok(set)
    }

    /// The three hand-built models shipped with the crate.
    pub fn builtin() -> ModelSet {
        ModelSet::from_json(TOY_MODELS).expect("bundled toy models are valid")
    }

    pub fn get(&self, t: Template) -> Option<&MetabolicModel> {
        self.models.get(&t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemObservation {
    pub tool: String,
    pub configuration_id: u32,
    pub minimal_substrate_dict: Map<String, Value>,
    pub error: Option<String>,
}

impl GemObservation {
    fn new(id: u32, dict: Map<String, Value>, error: Option<String>) -> Self {
        GemObservation { tool: "gem_tool".into(), configuration_id: id, minimal_substrate_dict: dict, error }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("observation serializes")
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Builds the observation for one tool id. Only an out-of-range id is an
/// error; everything else is reported inside the document.
pub fn gem_observation(models: &ModelSet, config_id: u32) -> Result<GemObservation, GemError> {
    let cfg = GemConfig::from_id(config_id)?;
    let Some(model) = models.get(cfg.template) else {
        return Ok(GemObservation::new(config_id, Map::new(), Some(MODEL_UNAVAILABLE.into())));
    };
    let result = apply_perturbation(model, cfg.perturbation).and_then(|m| minimal_medium(&m, DEFAULT_GROWTH_FRACTION));
    Ok(match result {
        Ok(mm) if mm.growth_impossible => GemObservation::new(config_id, Map::new(), Some(NO_GROWTH.into())),
        Ok(mm) => {
            let dict = mm.uptakes.into_iter().map(|(k, v)| (k, Value::from(round6(v)))).collect();
            GemObservation::new(config_id, dict, None)
        }
        Err(e) => GemObservation::new(config_id, Map::new(), Some(e.to_string())),
    })
}

/// Precomputed observations for all 18 ids; read-only after construction.
#[derive(Clone, Debug)]
pub struct GemService {
    observations: Vec<GemObservation>,
}

impl GemService {
    pub fn new(models: &ModelSet) -> GemService {
        let observations =
            (1..=NUM_CONFIGS).into_par_iter().map(|id| gem_observation(models, id).expect("id in range")).collect();
        GemService { observations }
    }

    pub fn observe(&self, config_id: u32) -> Result<&GemObservation, GemError> {
        GemConfig::from_id(config_id)?;
        Ok(&self.observations[(config_id - 1) as usize])
    }
}
