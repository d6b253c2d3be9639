use genotrait::grpo::train::{train_toy_with, StepReport};
use genotrait::grpo::GrpoError;
use genotrait::Real;

use super::Ctx;
use crate::error::{CliError, CliResult};

fn log_step(s: &StepReport) {
    eprintln!(
        "step {:>4}  reward {:>7.4}  acc {:.3}  calls {:.2}  loss {:>9.5}  clipped {:.3}",
        s.step, s.mean_reward, s.accuracy, s.mean_tool_calls, s.loss, s.clipped_fraction
    );
}

pub fn run(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.validated_config()?;
    let dir = ctx.run_dir("train-toy", &cfg)?;
    let mut steps = dir.jsonl("steps.jsonl")?;
    let every = (cfg.steps / 20).max(1);
    let mut write_err = None;
    let outcome = train_toy_with::<Real>(&cfg, |s| {
        if write_err.is_none() {
            write_err = steps.write(s).err();
        }
        if s.step % every == 0 || s.step + 1 == cfg.steps {
            log_step(s);
        }
    })
    .map_err(|e| match e {
        GrpoError::Config(m) => CliError::Config(m),
        other => CliError::Run(format!("training aborted: {other}")),
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    steps.finish()?;
    let report = &outcome.report;
    dir.write_json("report.json", report)?;
    dir.write_json("checkpoint.json", &outcome.policy.to_checkpoint())?;
    let path = dir.path.clone();
    dir.finish()?;
    let e = &report.eval_final;
    super::emit(&format!(
        "eval accuracy {:.3}, gene-ablated {:.3}, mean clipped delta {}\n",
        e.accuracy,
        e.ablated_accuracy,
        e.mean_clipped_delta_correct.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"))
    ));
    eprintln!("wrote {}", path.display());
    Ok(())
}
