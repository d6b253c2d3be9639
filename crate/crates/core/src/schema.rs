//! Trait fields, answer values, label canonicalization and the strict
//! final-answer parser.
//!
//! The label-bearing fields take their vocabularies and alias tables from a
//! versioned JSON file (`data/vocab.json`, embedded at compile time). Numeric
//! fields (intervals and optima) all use the `{"lower": x, "upper": y}` shape;
//! a point optimum is written with `lower == upper`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

const BUILTIN_VOCAB: &str = include_str!("../data/vocab.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Interval,
    Optimum,
    Categorical,
    Boolean,
    MultiLabel,
}

impl Family {
    pub fn is_numeric(self) -> bool {
        matches!(self, Family::Interval | Family::Optimum)
    }
}

/// Report grouping of the benchmark fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGroup {
    PhysiologicalBoundary,
    OptimalCondition,
    SubstrateSource,
    CategoricalPhysiology,
    Morphology,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 5] = [
        TaskGroup::PhysiologicalBoundary,
        TaskGroup::OptimalCondition,
        TaskGroup::SubstrateSource,
        TaskGroup::CategoricalPhysiology,
        TaskGroup::Morphology,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskGroup::PhysiologicalBoundary => "physiological_boundary",
            TaskGroup::OptimalCondition => "optimal_condition",
            TaskGroup::SubstrateSource => "substrate_source",
            TaskGroup::CategoricalPhysiology => "categorical_physiology",
            TaskGroup::Morphology => "morphology",
        }
    }

    pub fn fields(self) -> impl Iterator<Item = FieldId> {
        FieldId::ALL.into_iter().filter(move |f| f.group() == self)
    }
}

/// Physical quantity behind a numeric field; selects reward scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quantity {
    Temperature,
    Ph,
    Salinity,
}

macro_rules! field_ids {
    ($( $variant:ident => $name:literal, $family:ident, $group:ident, $unit:expr, $qty:expr; )*) => {
        /// The benchmark prediction targets.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum FieldId {
            $( #[serde(rename = $name)] $variant, )*
        }

        impl FieldId {
            pub const ALL: [FieldId; field_ids!(@count $($variant)*)] = [ $( FieldId::$variant, )* ];

            pub fn name(self) -> &'static str {
                match self { $( FieldId::$variant => $name, )* }
            }

            pub fn family(self) -> Family {
                match self { $( FieldId::$variant => Family::$family, )* }
            }

            pub fn group(self) -> TaskGroup {
                match self { $( FieldId::$variant => TaskGroup::$group, )* }
            }

            pub fn unit(self) -> Option<&'static str> {
                match self { $( FieldId::$variant => $unit, )* }
            }

            pub fn quantity(self) -> Option<Quantity> {
                match self { $( FieldId::$variant => $qty, )* }
            }

            pub fn from_name(name: &str) -> Option<FieldId> {
                match name { $( $name => Some(FieldId::$variant), )* _ => None }
            }
        }
    };
    (@count) => { 0 };
    (@count $head:ident $($tail:ident)*) => { 1 + field_ids!(@count $($tail)*) };
}

field_ids! {
    GrowthTemperatureRange => "growth_temperature_range_C", Interval, PhysiologicalBoundary, Some("°C"), Some(Quantity::Temperature);
    PhRange => "pH_range", Interval, PhysiologicalBoundary, Some("pH units"), Some(Quantity::Ph);
    SalinityRange => "salinity_range", Interval, PhysiologicalBoundary, Some("%w/v"), Some(Quantity::Salinity);
    GrowthTemperatureOpt => "growth_temperature_opt_C", Optimum, OptimalCondition, Some("°C"), Some(Quantity::Temperature);
    PhOpt => "pH_opt", Optimum, OptimalCondition, Some("pH units"), Some(Quantity::Ph);
    SalinityOpt => "salinity_opt_wv_percent", Optimum, OptimalCondition, Some("%w/v"), Some(Quantity::Salinity);
    CarbonSource => "carbon_source", MultiLabel, SubstrateSource, None, None;
    ElectronDonor => "electron_donor", MultiLabel, SubstrateSource, None, None;
    ElectronAcceptor => "electron_acceptor", MultiLabel, SubstrateSource, None, None;
    NitrogenSource => "nitrogen_source", MultiLabel, SubstrateSource, None, None;
    OxygenTolerance => "oxygen_tolerance", Categorical, CategoricalPhysiology, None, None;
    EnergyType => "energy_type", Categorical, CategoricalPhysiology, None, None;
    PhotosynthesisType => "photosynthesis_type", Categorical, CategoricalPhysiology, None, None;
    CarbonFixationPathway => "carbon_fixation_pathway", Categorical, CategoricalPhysiology, None, None;
    CellShape => "cell_shape", Categorical, Morphology, None, None;
    Motility => "motility", Boolean, Morphology, None, None;
    Flagella => "flagella", Categorical, Morphology, None, None;
    SporeFormation => "spore_formation", Boolean, Morphology, None, None;
    GramStain => "gram_stain", Categorical, Morphology, None, None;
}

impl fmt::Display for FieldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A predicted or ground-truth answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerValue {
    Interval { lower: f64, upper: f64 },
    Bool(bool),
    Label(String),
    Ranked(Vec<String>),
}

impl AnswerValue {
    pub fn interval(lower: f64, upper: f64) -> Self {
        AnswerValue::Interval { lower, upper }
    }

    pub fn point(x: f64) -> Self {
        AnswerValue::Interval { lower: x, upper: x }
    }

    pub fn label(s: impl Into<String>) -> Self {
        AnswerValue::Label(s.into())
    }

    pub fn ranked<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        AnswerValue::Ranked(labels.into_iter().map(Into::into).collect())
    }

    pub fn midpoint(&self) -> Option<f64> {
        match *self {
            AnswerValue::Interval { lower, upper } => Some(0.5 * (lower + upper)),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("answer values always serialize")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureReason {
    NotJson,
    MultipleObjects,
    MarkdownFence,
    ExtraProse,
    MissingTargetField,
    WrongField,
    NullValue,
    ExtraFields,
    TypeMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrictVerdict {
    pub valid: bool,
    pub failure_reason: Option<FailureReason>,
}

impl StrictVerdict {
    pub const VALID: StrictVerdict = StrictVerdict { valid: true, failure_reason: None };

    pub fn fail(reason: FailureReason) -> Self {
        StrictVerdict { valid: false, failure_reason: Some(reason) }
    }
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("vocabulary file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown field `{0}` in vocabulary file")]
    UnknownField(String),
    #[error("field `{0}` appears twice in vocabulary file")]
    DuplicateField(String),
    #[error("field `{0}` is numeric and takes no labels")]
    UnexpectedLabels(String),
    #[error("label field `{0}` is missing from the vocabulary file")]
    MissingField(String),
    #[error("field `{field}`: labels `{a}` and `{b}` normalize to the same key")]
    LabelCollision { field: String, a: String, b: String },
    #[error("field `{field}`: alias `{alias}` targets unknown label `{target}`")]
    DanglingAlias { field: String, alias: String, target: String },
    #[error("field `{field}`: alias `{alias}` conflicts with an existing entry")]
    AliasConflict { field: String, alias: String },
}

#[derive(Deserialize)]
struct VocabFile {
    #[allow(dead_code)]
    version: u32,
    fields: Vec<VocabEntry>,
}

#[derive(Deserialize)]
struct VocabEntry {
    field: String,
    labels: Vec<String>,
    #[serde(default)]
    aliases: BTreeMap<String, String>,
}

/// Lowercase, trim, and collapse runs of separators/punctuation into `_`.
/// `+` is kept so that forms like `g+` stay distinct.
pub fn normalize_key(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for ch in raw.trim().chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '+' {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(ch);
        } else {
            pending_sep = true;
        }
    }
    out
}

/// A field together with its controlled vocabulary.
#[derive(Clone, Debug)]
pub struct TraitField {
    pub id: FieldId,
    labels: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl TraitField {
    fn numeric(id: FieldId) -> Self {
        TraitField { id, labels: Vec::new(), lookup: HashMap::new() }
    }

    pub fn name(&self) -> &'static str {
        self.id.name()
    }

    pub fn family(&self) -> Family {
        self.id.family()
    }

    pub fn unit(&self) -> Option<&'static str> {
        self.id.unit()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Maps a raw surface form to its vocabulary entry.
    pub fn canonicalize(&self, raw: &str) -> Option<&str> {
        self.lookup.get(&normalize_key(raw)).map(|&i| self.labels[i].as_str())
    }

    /// Canonical form if in vocabulary, otherwise the normalized raw key.
    /// Used where out-of-vocabulary entries must be kept but can never match.
    fn canonical_or_raw(&self, raw: &str) -> String {
        match self.canonicalize(raw) {
            Some(c) => c.to_string(),
            None => format!("?{}", normalize_key(raw)),
        }
    }

    /// Strict parse of a final assistant answer. Total: every failure is
    /// reported in the verdict.
    pub fn parse_final_answer(&self, text: &str) -> (StrictVerdict, Option<AnswerValue>) {
        match self.parse_strict(text) {
            Ok(v) => (StrictVerdict::VALID, Some(v)),
            Err(reason) => (StrictVerdict::fail(reason), None),
        }
    }

    fn parse_strict(&self, text: &str) -> Result<AnswerValue, FailureReason> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(FailureReason::NotJson);
        }
        if trimmed.contains("```") {
            return Err(FailureReason::MarkdownFence);
        }
        let mut stream = serde_json::Deserializer::from_str(trimmed).into_iter::<Value>();
        let first = match stream.next() {
            Some(Ok(v)) => v,
            _ => {
                return Err(if find_embedded_object(trimmed).is_some() {
                    FailureReason::ExtraProse
                } else {
                    FailureReason::NotJson
                })
            }
        };
        match stream.next() {
            None => {}
            Some(Ok(_)) if first.is_object() => return Err(FailureReason::MultipleObjects),
            Some(_) => return Err(FailureReason::ExtraProse),
        }
        let Value::Object(obj) = first else {
            return Err(FailureReason::NotJson);
        };
        let Some(value) = obj.get(self.name()) else {
            if obj.keys().any(|k| FieldId::from_name(k).is_some()) {
                return Err(FailureReason::WrongField);
            }
            return Err(FailureReason::MissingTargetField);
        };
        if obj.len() > 1 {
            return Err(FailureReason::ExtraFields);
        }
        if contains_null(value) {
            return Err(FailureReason::NullValue);
        }
        self.value_from_json(value).ok_or(FailureReason::TypeMismatch)
    }

    /// Converts the JSON value of the target key into an answer, applying
    /// multi-label canonicalization, de-duplication and truncation.
    fn value_from_json(&self, value: &Value) -> Option<AnswerValue> {
        let answer = match self.family() {
            Family::Interval | Family::Optimum => {
                let obj = value.as_object()?;
                if obj.len() != 2 {
                    return None;
                }
                let lower = obj.get("lower")?.as_f64()?;
                let upper = obj.get("upper")?.as_f64()?;
                AnswerValue::Interval { lower, upper }
            }
            Family::Categorical => AnswerValue::Label(value.as_str()?.to_string()),
            Family::Boolean => AnswerValue::Bool(value.as_bool()?),
            Family::MultiLabel => {
                let items = value.as_array()?;
                let mut raw = Vec::with_capacity(items.len());
                for item in items {
                    raw.push(item.as_str()?);
                }
                AnswerValue::Ranked(self.dedupe_ranked(raw))
            }
        };
        self.validate(&answer).valid.then_some(answer)
    }

    /// Canonicalizes, drops later duplicates, truncates to vocabulary size.
    pub fn dedupe_ranked<'a>(&self, raw: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for r in raw {
            let key = self.canonical_or_raw(r);
            if seen.insert(key) {
                out.push(self.canonicalize(r).map(str::to_string).unwrap_or_else(|| r.trim().to_string()));
            }
            if out.len() == self.labels.len() {
                break;
            }
        }
        out
    }

    /// Checks that the answer variant matches the family and its invariants.
    pub fn validate(&self, value: &AnswerValue) -> StrictVerdict {
        let ok = match (self.family(), value) {
            (Family::Interval | Family::Optimum, AnswerValue::Interval { lower, upper }) => {
                lower.is_finite() && upper.is_finite() && lower <= upper
            }
            (Family::Categorical, AnswerValue::Label(_)) => true,
            (Family::Boolean, AnswerValue::Bool(_)) => true,
            (Family::MultiLabel, AnswerValue::Ranked(labels)) => {
                let mut seen = HashSet::new();
                labels.iter().all(|l| seen.insert(self.canonical_or_raw(l)))
            }
            _ => false,
        };
        if ok {
            StrictVerdict::VALID
        } else {
            StrictVerdict::fail(FailureReason::TypeMismatch)
        }
    }

    /// `{"<field>": <value>}` in compact form.
    pub fn serialize_answer(&self, value: &AnswerValue) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert(self.name().to_string(), value.to_json());
        Value::Object(obj).to_string()
    }

    /// Lenient recovery of a prediction from noisy text (fences, prose,
    /// surface-form labels). Offline scoring only; never used for rewards.
    pub fn best_effort_parse(&self, text: &str) -> Option<AnswerValue> {
        let stripped = text.replace("```json", "").replace("```", "");
        let mut rest = stripped.as_str();
        while let Some(start) = rest.find('{') {
            let candidate = &rest[start..];
            let mut stream = serde_json::Deserializer::from_str(candidate).into_iter::<Value>();
            if let Some(Ok(Value::Object(obj))) = stream.next() {
                if let Some(v) = obj.get(self.name()) {
                    if let Some(ans) = self.coerce_lenient(v) {
                        return Some(ans);
                    }
                }
            }
            rest = &candidate[1..];
        }
        None
    }

    fn coerce_lenient(&self, v: &Value) -> Option<AnswerValue> {
        if let (Family::Categorical, Value::String(s)) = (self.family(), v) {
            return Some(AnswerValue::label(self.canonicalize(s).unwrap_or(s.as_str())));
        }
        if let Some(strict) = self.value_from_json(v) {
            return Some(strict);
        }
        match (self.family(), v) {
            (Family::Interval | Family::Optimum, Value::Number(n)) => Some(AnswerValue::point(n.as_f64()?)),
            (Family::Boolean, Value::String(s)) => match self.canonicalize(s)? {
                "true" => Some(AnswerValue::Bool(true)),
                "false" => Some(AnswerValue::Bool(false)),
                _ => None,
            },
            (Family::MultiLabel, Value::String(s)) => Some(AnswerValue::Ranked(self.dedupe_ranked([s.as_str()]))),
            _ => None,
        }
    }
}

fn contains_null(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::Array(items) => items.iter().any(contains_null),
        Value::Object(map) => map.values().any(contains_null),
        _ => false,
    }
}

fn find_embedded_object(text: &str) -> Option<usize> {
    let mut offset = 0;
    while let Some(pos) = text[offset..].find('{') {
        let start = offset + pos;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(_))) = stream.next() {
            return Some(start);
        }
        offset = start + 1;
    }
    None
}

/// Registry of all fields with their vocabularies.
#[derive(Clone, Debug)]
pub struct Schema {
    fields: Vec<TraitField>,
}

static BUILTIN: LazyLock<Schema> =
    LazyLock::new(|| Schema::from_json(BUILTIN_VOCAB).expect("embedded vocabulary is valid"));

impl Schema {
    pub fn builtin() -> &'static Schema {
        &BUILTIN
    }

    pub fn from_json(text: &str) -> Result<Schema, SchemaError> {
        let file: VocabFile = serde_json::from_str(text)?;
        let mut fields: Vec<TraitField> = FieldId::ALL.iter().map(|&id| TraitField::numeric(id)).collect();
        let mut seen = HashSet::new();
        for entry in file.fields {
            let id = FieldId::from_name(&entry.field).ok_or_else(|| SchemaError::UnknownField(entry.field.clone()))?;
            if !seen.insert(id) {
                return Err(SchemaError::DuplicateField(entry.field));
            }
            if id.family().is_numeric() {
                return Err(SchemaError::UnexpectedLabels(entry.field));
            }
            fields[id as usize] = build_field(id, entry)?;
        }
        for f in &fields {
            if !f.family().is_numeric() && f.labels.is_empty() {
                return Err(SchemaError::MissingField(f.name().to_string()));
            }
        }
        Ok(Schema { fields })
    }

    pub fn field(&self, id: FieldId) -> &TraitField {
        &self.fields[id as usize]
    }

    pub fn field_by_name(&self, name: &str) -> Option<&TraitField> {
        FieldId::from_name(name).map(|id| self.field(id))
    }

    pub fn fields(&self) -> &[TraitField] {
        &self.fields
    }
}

fn build_field(id: FieldId, entry: VocabEntry) -> Result<TraitField, SchemaError> {
    let name = entry.field;
    let mut lookup: HashMap<String, usize> = HashMap::new();
    for (i, label) in entry.labels.iter().enumerate() {
        if let Some(&j) = lookup.get(&normalize_key(label)) {
            return Err(SchemaError::LabelCollision { field: name, a: entry.labels[j].clone(), b: label.clone() });
        }
        lookup.insert(normalize_key(label), i);
    }
    for (alias, target) in &entry.aliases {
        let idx = entry.labels.iter().position(|l| l == target).ok_or_else(|| SchemaError::DanglingAlias {
            field: name.clone(),
            alias: alias.clone(),
            target: target.clone(),
        })?;
        let key = normalize_key(alias);
        match lookup.get(&key) {
            Some(&existing) if existing != idx => {
                return Err(SchemaError::AliasConflict { field: name, alias: alias.clone() })
            }
            _ => {
                lookup.insert(key, idx);
            }
        }
    }
    Ok(TraitField { id, labels: entry.labels, lookup })
}

/// Free-function forms of the `TraitField` methods.
pub fn parse_final_answer(text: &str, field: &TraitField) -> (StrictVerdict, Option<AnswerValue>) {
    field.parse_final_answer(text)
}

pub fn canonicalize_label<'a>(field: &'a TraitField, raw: &str) -> Option<&'a str> {
    field.canonicalize(raw)
}

pub fn validate_answer_schema(field: &TraitField, value: &AnswerValue) -> StrictVerdict {
    field.validate(value)
}
