use std::collections::BTreeMap;
use std::path::Path;

use genotrait::env::PromptRecord;
use genotrait::metrics::{build_report, render_table, EvalInstance};
use genotrait::schema::{FieldId, Schema};
use serde::Deserialize;

use super::{jsonl_lines, Ctx};
use crate::error::{CliError, CliResult};

/// One line of a predictions file: the model's final answer text.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    strain_id: String,
    field: FieldId,
    answer: Option<String>,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> CliResult<Vec<(usize, T)>> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (line, raw) in jsonl_lines(text) {
        match serde_json::from_str(raw) {
            Ok(v) => out.push((line, v)),
            Err(e) => bad.push(format!("line {line}: {e}")),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(CliError::data(path, format!("malformed JSONL ({})", bad.join("; "))))
    }
}

pub fn run(ctx: &Ctx, dataset: &Path, predictions: &Path) -> CliResult<()> {
    let cfg = ctx.validated_config()?;
    let mut dir = ctx.run_dir("eval", &cfg)?;
    let schema = Schema::builtin();

    let records: Vec<(usize, PromptRecord)> = parse_lines(dataset, &ctx.input(&mut dir, dataset)?)?;
    let mut keys = BTreeMap::new();
    for (line, r) in &records {
        let verdict = schema.field(r.field).validate(&r.truth);
        if !verdict.valid {
            return Err(CliError::data(dataset, format!("line {line}: truth is not a valid {} value", r.field.name())));
        }
        if keys.insert((r.strain_id.clone(), r.field), *line).is_some() {
            return Err(CliError::data(
                dataset,
                format!("line {line}: duplicate ({}, {})", r.strain_id, r.field.name()),
            ));
        }
    }

    let mut answers = BTreeMap::new();
    for (line, p) in parse_lines::<PredictionLine>(predictions, &ctx.input(&mut dir, predictions)?)? {
        let key = (p.strain_id, p.field);
        if !keys.contains_key(&key) {
            return Err(CliError::data(
                predictions,
                format!("line {line}: ({}, {}) is not in the dataset", key.0, key.1.name()),
            ));
        }
        let parsed = p.answer.and_then(|text| schema.field(key.1).parse_final_answer(&text).1);
        if answers.insert(key.clone(), parsed).is_some() {
            return Err(CliError::data(
                predictions,
                format!("line {line}: duplicate prediction for ({}, {})", key.0, key.1.name()),
            ));
        }
    }

    let instances: Vec<EvalInstance> = records
        .into_iter()
        .map(|(_, r)| EvalInstance {
            prediction: answers.remove(&(r.strain_id.clone(), r.field)).flatten(),
            strain_id: r.strain_id,
            field: r.field,
            truth: r.truth,
        })
        .collect();
    let report = build_report(schema, &instances);
    let table = render_table(&report);
    dir.write_json("report.json", &report)?;
    dir.write_text("report.txt", &table)?;
    let path = dir.path.clone();
    dir.finish()?;
    super::emit(&table);
    eprintln!("wrote {}", path.display());
    Ok(())
}
