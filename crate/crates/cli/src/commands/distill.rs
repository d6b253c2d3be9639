use std::path::Path;

use genotrait::distill::{distill_all, CandidateBundle};
use serde_json::json;

use super::{jsonl_lines, Ctx};
use crate::error::{CliError, CliResult};

/// Bundle files in name order.
fn bundle_files(dir: &Path) -> CliResult<Vec<std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "jsonl") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn run(ctx: &Ctx, candidates: &Path) -> CliResult<()> {
    let cfg = ctx.validated_config()?;
    let files = bundle_files(candidates)?;
    let mut dir = ctx.run_dir("distill", &cfg)?;
    let mut bundles = Vec::new();
    let mut failures = dir.jsonl("failures.jsonl")?;
    let mut failed = 0;
    for file in &files {
        let text = ctx.input(&mut dir, file)?;
        for (line, raw) in jsonl_lines(&text) {
            match serde_json::from_str::<CandidateBundle>(raw) {
                Ok(b) => bundles.push(b),
                Err(e) => {
                    failed += 1;
                    failures
                        .write(&json!({"file": file.display().to_string(), "line": line, "error": e.to_string()}))?;
                }
            }
        }
    }

    let mut selections = dir.jsonl("selections.jsonl")?;
    let mut decisions = dir.jsonl("decisions.jsonl")?;
    let (mut selected, mut retries) = (0, 0);
    for (bundle, result) in bundles.iter().zip(distill_all(&bundles, &cfg.reward.correctness)) {
        match result {
            Ok(sel) => {
                selected += 1;
                retries += usize::from(sel.decision.retry.retry);
                decisions.write(&sel.decision)?;
                selections.write(&json!({"sample_id": bundle.sample_id, "trajectory": sel.trajectory.to_dump()}))?;
            }
            Err(e) => {
                failed += 1;
                failures.write(&json!({"sample_id": bundle.sample_id, "error": e.to_string()}))?;
            }
        }
    }
    failures.finish()?;
    selections.finish()?;
    decisions.finish()?;
    let path = dir.path.clone();
    dir.finish()?;
    super::emit(&format!("{selected} selected, {retries} retry plans, {failed} failures\n"));
    eprintln!("wrote {}", path.display());
    Ok(())
}
