use std::path::Path;

use genotrait::env::Trajectory;
use genotrait::grpo::{assemble_token_advantages, ToolTokenMode};
use genotrait::rewards::{score_answer, RewardBreakdown};
use genotrait::schema::Schema;
use serde::Serialize;

use super::Ctx;
use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize)]
struct TokenPreview {
    index: usize,
    token_id: u32,
    policy: bool,
    answer: bool,
    tool_call: bool,
    advantage: f64,
}

#[derive(Debug, Serialize)]
struct RewardReport {
    strain_id: String,
    field: String,
    progress: f64,
    tool_target: f64,
    tool_calls: usize,
    breakdown: RewardBreakdown,
    sequence_advantage: f64,
    tool_token_value: f64,
    tokens: Vec<TokenPreview>,
}

pub fn run(ctx: &Ctx, trajectory: &Path, truth: &Path, progress: f64, advantage: f64) -> CliResult<()> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(CliError::Usage(format!("--progress must lie in [0, 1], got {progress}")));
    }
    let cfg = ctx.validated_config()?;
    let mut dir = ctx.run_dir("reward", &cfg)?;
    let traj: Trajectory = serde_json::from_str(&ctx.input(&mut dir, trajectory)?)
        .map_err(|e| CliError::data(trajectory, format!("not a trajectory dump: {e}")))?;
    let field = Schema::builtin().field(traj.field);
    let truth_text = ctx.input(&mut dir, truth)?;
    let (verdict, truth_value) = field.parse_final_answer(truth_text.trim());
    let truth_value = truth_value.ok_or_else(|| {
        CliError::data(truth, format!("truth is not a strict {} answer ({:?})", field.name(), verdict.failure_reason))
    })?;

    let calls = traj.well_formed_calls();
    let breakdown = score_answer(field, traj.final_answer_text.as_deref(), &truth_value, calls, progress, &cfg.reward);
    // A lone trajectory has no group to normalize against.
    let tool_value = match cfg.advantage.tool_token_mode {
        ToolTokenMode::RawShaping => breakdown.r_tool,
        ToolTokenMode::GroupNormalized => 0.0,
    };
    let n = traj.num_tokens();
    let adv = assemble_token_advantages(&traj, advantage, tool_value, &vec![0.0; n], &cfg.advantage)
        .map_err(|e| CliError::data(trajectory, e.to_string()))?;
    let mask = traj.build_policy_mask();
    let tokens = traj
        .token_stream()
        .into_iter()
        .enumerate()
        .map(|(i, token_id)| TokenPreview {
            index: i,
            token_id,
            policy: mask.policy[i],
            answer: mask.answer[i],
            tool_call: mask.tool_call[i],
            advantage: adv.total[i],
        })
        .collect();
    let report = RewardReport {
        strain_id: traj.strain_id.clone(),
        field: field.name().to_string(),
        progress,
        tool_target: cfg.reward.schedule.target(progress),
        tool_calls: calls,
        breakdown,
        sequence_advantage: advantage,
        tool_token_value: tool_value,
        tokens,
    };
    dir.write_json("reward.json", &report)?;
    dir.finish()?;
    super::emit(&(serde_json::to_string_pretty(&report.breakdown).expect("breakdown serializes") + "\n"));
    Ok(())
}
