use std::io::BufReader;
use std::path::PathBuf;

use genotrait::embedstore::{rag_observation, QueryHandle, RagObservation, Store};
use genotrait::gem::{gem_observation, GemConfig, ModelSet};
use genotrait::schema::Schema;

use super::Ctx;
use crate::error::{CliError, CliResult};
use crate::manifest::read_input;

pub fn gem(ctx: &Ctx, config_id: u32, models: Option<PathBuf>) -> CliResult<()> {
    GemConfig::from_id(config_id).map_err(|e| CliError::Usage(e.to_string()))?;
    let default = ctx.data_path("models.json");
    let path = models.or_else(|| default.exists().then_some(default));
    let set = match path {
        Some(p) => ModelSet::from_json(&read_input(&p)?).map_err(|e| CliError::data(&p, e.to_string()))?,
        None => ModelSet::builtin(),
    };
    let obs = gem_observation(&set, config_id).map_err(|e| CliError::Usage(e.to_string()))?;
    super::emit(&(obs.to_json_string() + "\n"));
    Ok(())
}

pub fn rag(ctx: &Ctx, handle: &str, store: Option<PathBuf>, fields: Vec<String>, k: usize) -> CliResult<()> {
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let schema = Schema::builtin();
    if let Some(bad) = fields.iter().find(|f| schema.field_by_name(f).is_none()) {
        return Err(CliError::Usage(format!("unknown field `{bad}`")));
    }
    let fields =
        if fields.is_empty() { schema.fields().iter().map(|f| f.name().to_string()).collect() } else { fields };
    let path = store.unwrap_or_else(|| ctx.data_path("store.jsonl"));
    let file = std::fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let store = Store::from_jsonl(BufReader::new(file)).map_err(|e| CliError::data(&path, e.to_string()))?;
    let obs = rag_observation(&store, &QueryHandle::Strain(handle.to_string()), &fields, k)
        .unwrap_or_else(|e| RagObservation::error(e.to_string()));
    super::emit(&(obs.to_json_string() + "\n"));
    Ok(())
}
