//! Toy training loop: supervised warm start on scripted demonstrations, then
//! GRPO with the composite reward and counterfactual gene grounding.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::{build_task, demo_segments, SyntheticTask, TaskConfig, TaskItem};
use super::{
    assemble_token_advantages, gene_grounding_rewards, group_advantages, grpo_loss_and_grad, tool_token_values,
    AdvantageConfig, GeneGroundingConfig, GrpoError,
};
use crate::env::tokenizer::Tokenizer;
use crate::env::{run_rollout, Agent, RolloutConfig, ScriptedAgent, Segment, ToolEnv, Trajectory};
use crate::gem::{GemService, ModelSet};
use crate::policy::{gradient_step, PolicyShape, ToyPolicy};
use crate::rewards::{correctness_reward, score_answer, RewardBreakdown, RewardConfig};
use crate::scalar::Scalar;
use crate::schema::Schema;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { steps: 1000, batch: 32, learning_rate: 3.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Rollouts per step; a multiple of the group size.
    pub batch_rollouts: usize,
    pub learning_rate: f64,
    /// Gradient steps per rollout batch.
    pub ppo_epochs: usize,
    pub init_scale: f64,
    /// Gradient-norm cap for both phases; 0 disables it.
    pub max_grad_norm: f64,
    pub policy: PolicyShape,
    pub sft: SftConfig,
    pub task: TaskConfig,
    pub advantage: AdvantageConfig,
    pub gene: GeneGroundingConfig,
    pub reward: RewardConfig,
    pub rollout: RolloutConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 300,
            batch_rollouts: 64,
            learning_rate: 1.0,
            ppo_epochs: 1,
            init_scale: 0.1,
            max_grad_norm: 1.0,
            policy: PolicyShape { window: 8, ..PolicyShape::default() },
            sft: SftConfig::default(),
            task: TaskConfig::default(),
            advantage: AdvantageConfig::default(),
            gene: GeneGroundingConfig::default(),
            reward: RewardConfig::default(),
            rollout: RolloutConfig { max_new_tokens: 24, ..RolloutConfig::default() },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::Config(m));
        self.reward.validate().map_err(|e| GrpoError::Config(e.to_string()))?;
        self.advantage.validate()?;
        self.rollout.sampling.validate()?;
        if self.batch_rollouts == 0 || !self.batch_rollouts.is_multiple_of(self.advantage.group_size) {
            return bad(format!(
                "batch_rollouts ({}) must be a positive multiple of group_size ({})",
                self.batch_rollouts, self.advantage.group_size
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative".into());
        }
        if !(self.sft.learning_rate >= 0.0 && self.sft.learning_rate.is_finite()) {
            return bad("sft.learning_rate must be finite and non-negative".into());
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad("max_grad_norm must be finite and non-negative".into());
        }
        if self.sft.steps > 0 && self.sft.batch == 0 {
            return bad("sft.batch must be positive".into());
        }
        if self.policy.gene_dim != self.task.gene_dim {
            return bad(format!(
                "policy.gene_dim ({}) differs from task.gene_dim ({})",
                self.policy.gene_dim, self.task.gene_dim
            ));
        }
        if self.policy.hidden == 0 || self.policy.window == 0 {
            return bad("policy.hidden and policy.window must be positive".into());
        }
        if self.rollout.max_tool_rounds == 0 || self.rollout.max_new_tokens == 0 {
            return bad("rollout caps must be positive".into());
        }
        if self.task.n_train == 0 || self.task.n_eval == 0 {
            return bad("task needs training and evaluation strains".into());
        }
        if !(0.0..=1.0).contains(&self.task.rag_reliability) {
            return bad("task.rag_reliability must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub progress: f64,
    pub tool_target: f64,
    pub mean_reward: f64,
    pub mean_r_json: f64,
    pub mean_r_corr: f64,
    pub mean_r_tool: f64,
    pub mean_r_nt: f64,
    pub mean_tool_calls: f64,
    pub accuracy: f64,
    pub mean_clipped_delta_correct: Option<f64>,
    pub loss: f64,
    pub clipped_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    /// Same checkpoint, zero gene vector at the policy input.
    pub ablated_accuracy: f64,
    pub mean_clipped_delta_correct: Option<f64>,
    pub mean_tool_calls: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub sft_final_nll: Option<f64>,
    pub eval_initial: EvalReport,
    pub eval_final: EvalReport,
    pub steps: Vec<StepReport>,
    pub teacher_forced_passes: usize,
    pub trajectories: usize,
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    /// Policy after the warm start, before any GRPO update.
    pub initial: ToyPolicy<T>,
    pub policy: ToyPolicy<T>,
}

/// Feeds the zero vector to the wrapped agent; tools still see the strain.
pub struct GeneAblated<'a, A: ?Sized>(pub &'a A);

impl<A: Agent + ?Sized> Agent for GeneAblated<'_, A> {
    fn generate(
        &self,
        stream: &[u32],
        gene: &[f64],
        segment_index: usize,
        tok: &Tokenizer,
        cfg: &RolloutConfig,
        rng: &mut ChaCha8Rng,
    ) -> Segment {
        self.0.generate(stream, &vec![0.0; gene.len()], segment_index, tok, cfg, rng)
    }
}

/// Deterministic per-rollout seed.
pub fn rollout_seed(seed: u64, step: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 20).wrapping_add(index));
    rng.gen()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Shared training context.
struct Ctx<'a> {
    task: &'a SyntheticTask,
    gem: &'a GemService,
    tok: &'a Tokenizer,
}

impl<'a> Ctx<'a> {
    fn tools(&self) -> ToolEnv<'a> {
        ToolEnv::new(&self.task.store, self.gem)
    }
}

fn score(
    ctx: &Ctx,
    traj: &Trajectory,
    truth: &crate::schema::AnswerValue,
    progress: f64,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let field = Schema::builtin().field(ctx.task.field);
    score_answer(field, traj.final_answer_text.as_deref(), truth, traj.well_formed_calls(), progress, cfg)
}

fn is_correct(ctx: &Ctx, traj: &Trajectory, truth: &crate::schema::AnswerValue, cfg: &RewardConfig) -> bool {
    let field = Schema::builtin().field(ctx.task.field);
    let parsed = traj.final_answer_text.as_deref().and_then(|t| field.parse_final_answer(t).1);
    correctness_reward(field, parsed.as_ref(), truth, &cfg.correctness) >= 1.0
}

/// Greedy evaluation with and without the gene input.
pub fn evaluate<T: Scalar>(
    policy: &ToyPolicy<T>,
    task: &SyntheticTask,
    gem: &GemService,
    tok: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<EvalReport, GrpoError> {
    let ctx = Ctx { task, gem, tok };
    evaluate_in(policy, &ctx, cfg)
}

/// Per eval item: correct, correct without the gene, tool calls, answer-token deltas.
type EvalRow = (bool, bool, usize, Vec<f64>);

fn evaluate_in<T: Scalar>(policy: &ToyPolicy<T>, ctx: &Ctx, cfg: &TrainConfig) -> Result<EvalReport, GrpoError> {
    let mut rollout = cfg.rollout;
    rollout.sampling.greedy = true;
    let tools = ctx.tools();
    let results: Vec<Result<EvalRow, GrpoError>> = ctx
        .task
        .eval
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let seed = rollout_seed(cfg.seed, u64::MAX, i as u64);
            let traj = run_rollout(policy, &item.prompt, &tools, ctx.tok, &rollout, seed);
            let ablated = run_rollout(&GeneAblated(policy), &item.prompt, &tools, ctx.tok, &rollout, seed);
            let correct = is_correct(ctx, &traj, &item.truth, &cfg.reward);
            let mut deltas = Vec::new();
            if correct {
                let g = gene_grounding_rewards(policy, &traj, 1.0, &cfg.gene)?;
                let mask = traj.build_policy_mask();
                deltas = g
                    .deltas
                    .iter()
                    .zip(&mask.answer)
                    .filter(|(_, &a)| a)
                    .map(|(&d, _)| d.clamp(-cfg.gene.cap, cfg.gene.cap))
                    .collect();
            }
            Ok((correct, is_correct(ctx, &ablated, &item.truth, &cfg.reward), traj.tool_calls.len(), deltas))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = results.len();
    let pooled: Vec<f64> = results.iter().flat_map(|r| r.3.iter().copied()).collect();
    Ok(EvalReport {
        n,
        accuracy: results.iter().filter(|r| r.0).count() as f64 / n as f64,
        ablated_accuracy: results.iter().filter(|r| r.1).count() as f64 / n as f64,
        mean_clipped_delta_correct: (!pooled.is_empty()).then(|| mean(pooled.iter().copied())),
        mean_tool_calls: mean(results.iter().map(|r| r.2 as f64)),
    })
}

/// Supervised warm start on scripted demonstrations whose answers are drawn
/// uniformly at random: it teaches the tool protocol and answer format but
/// carries no information about the gene–label relation.
fn warm_start<T: Scalar>(policy: &mut ToyPolicy<T>, ctx: &Ctx, cfg: &TrainConfig) -> Result<Option<f64>, GrpoError> {
    if cfg.sft.steps == 0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5f7);
    let tools = ctx.tools();
    let demos: Vec<Trajectory> = ctx
        .task
        .train
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let label = &ctx.task.labels[rng.gen_range(0..2)];
            let agent = ScriptedAgent::new(demo_segments(ctx.task.field, label, cfg.task.demo_gem_config));
            run_rollout(&agent, &item.prompt, &tools, ctx.tok, &cfg.rollout, i as u64)
        })
        .collect();
    let mut last_nll = 0.0;
    for _ in 0..cfg.sft.steps {
        let batch: Vec<&Trajectory> = (0..cfg.sft.batch).map(|_| demos.choose(&mut rng).unwrap()).collect();
        let parts: Vec<Result<(ToyPolicy<T>, f64), GrpoError>> = batch
            .par_iter()
            .map(|traj| {
                let tokens = traj.token_stream();
                let mask = traj.build_policy_mask();
                let gene: Vec<T> = traj.gene.iter().map(|&x| T::lit(x)).collect();
                let valid: Vec<usize> = (0..tokens.len()).filter(|&t| mask.policy[t]).collect();
                let w = T::lit(-1.0 / valid.len().max(1) as f64);
                let mut grad = policy.zeros_like();
                let mut nll = 0.0;
                for &t in &valid {
                    let lp = policy.next_logprobs(&tokens[..t], &gene)?;
                    nll -= lp[tokens[t] as usize].to_f64_lossy();
                    policy.accumulate_grad_logprob(&tokens[..t], &gene, tokens[t], w, &mut grad)?;
                }
                Ok((grad, nll / valid.len().max(1) as f64))
            })
            .collect();
        let mut total = policy.zeros_like();
        let mut nll = 0.0;
        for p in parts {
            let (g, l) = p?;
            total.add_scaled(&g, T::one());
            nll += l;
        }
        last_nll = nll / batch.len() as f64;
        total.scale(T::lit(1.0 / batch.len() as f64));
        gradient_step(policy, &total, cfg.sft.learning_rate, cfg.max_grad_norm);
    }
    Ok(Some(last_nll))
}

pub fn train_toy<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome<T>, GrpoError> {
    train_toy_with(cfg, |_| {})
}

/// Runs warm start and GRPO, calling `on_step` after every update.
pub fn train_toy_with<T: Scalar>(
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome<T>, GrpoError> {
    cfg.validate()?;
    let task = build_task(&cfg.task, cfg.seed);
    let tok = Tokenizer::for_field(Schema::builtin().field(task.field));
    if tok.vocab_size() != cfg.policy.vocab {
        return Err(GrpoError::Config(format!(
            "policy.vocab ({}) must equal the task vocabulary ({})",
            cfg.policy.vocab,
            tok.vocab_size()
        )));
    }
    let gem = GemService::new(&ModelSet::builtin());
    let ctx = Ctx { task: &task, gem: &gem, tok: &tok };

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = ToyPolicy::<T>::random(cfg.policy, cfg.init_scale, &mut init_rng);
    let sft_final_nll = warm_start(&mut policy, &ctx, cfg)?;
    let initial = policy.clone();
    let eval_initial = evaluate_in(&policy, &ctx, cfg)?;

    let g = cfg.advantage.group_size;
    let n_prompts = cfg.batch_rollouts / g;
    let tools = ctx.tools();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut trajectories = 0;
    let passes_before = policy.teacher_forced_passes();
    let mut passes = 0;

    for step in 0..cfg.steps {
        let progress = if cfg.steps > 1 { step as f64 / (cfg.steps - 1) as f64 } else { 0.0 };
        let mut pick = ChaCha8Rng::seed_from_u64(rollout_seed(cfg.seed, step as u64, u64::MAX >> 1));
        let prompts: Vec<&TaskItem> =
            (0..n_prompts).map(|_| &ctx.task.train[pick.gen_range(0..ctx.task.train.len())]).collect();

        let trajs: Vec<Trajectory> = (0..cfg.batch_rollouts)
            .into_par_iter()
            .map(|k| {
                let item = prompts[k / g];
                run_rollout(
                    &policy,
                    &item.prompt,
                    &tools,
                    ctx.tok,
                    &cfg.rollout,
                    rollout_seed(cfg.seed, step as u64, k as u64),
                )
            })
            .collect();
        trajectories += trajs.len();

        let scores: Vec<RewardBreakdown> = trajs
            .iter()
            .enumerate()
            .map(|(k, t)| score(&ctx, t, &prompts[k / g].truth, progress, &cfg.reward))
            .collect();
        let composite: Vec<f64> = scores.iter().map(|s| s.composite).collect();
        let seq_adv = group_advantages(&composite, g, cfg.advantage.epsilon_norm)?;
        let tool_vals = tool_token_values(&scores.iter().map(|s| s.r_tool).collect::<Vec<_>>(), &cfg.advantage)?;

        let gene: Vec<_> = trajs
            .par_iter()
            .zip(&scores)
            .map(|(t, s)| gene_grounding_rewards(&policy, t, s.r_corr, &cfg.gene))
            .collect::<Result<_, _>>()?;
        passes += 2 * trajs.len();

        let advs = trajs
            .iter()
            .enumerate()
            .map(|(k, t)| assemble_token_advantages(t, seq_adv[k], tool_vals[k], &gene[k].values, &cfg.advantage))
            .collect::<Result<Vec<_>, _>>()?;
        let old: Vec<Vec<f64>> = trajs.iter().map(Trajectory::sample_logprobs).collect();

        let mut loss = 0.0;
        let mut clipped = 0usize;
        let mut valid = 0usize;
        for _ in 0..cfg.ppo_epochs.max(1) {
            let outs = (0..trajs.len())
                .into_par_iter()
                .map(|k| grpo_loss_and_grad(&policy, &old[k], &trajs[k], &advs[k], &cfg.advantage, Some(&initial)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut total = policy.zeros_like();
            loss = 0.0;
            clipped = 0;
            valid = 0;
            for o in &outs {
                total.add_scaled(&o.grad, T::one());
                loss += o.loss;
                clipped += o.clipped_tokens;
                valid += o.valid_tokens;
            }
            loss /= outs.len() as f64;
            if !loss.is_finite() {
                return Err(GrpoError::Divergence(step));
            }
            total.scale(T::lit(1.0 / outs.len() as f64));
            gradient_step(&mut policy, &total, cfg.learning_rate, cfg.max_grad_norm);
            if !policy.is_finite() {
                return Err(GrpoError::Divergence(step));
            }
        }

        let correct_deltas: Vec<f64> = trajs
            .iter()
            .zip(&scores)
            .zip(&gene)
            .filter(|((_, s), _)| s.r_corr > 0.0)
            .flat_map(|((t, _), gg)| {
                let mask = t.build_policy_mask();
                gg.deltas
                    .iter()
                    .zip(mask.answer)
                    .filter(|(_, a)| *a)
                    .map(|(&d, _)| d.clamp(-cfg.gene.cap, cfg.gene.cap))
                    .collect::<Vec<_>>()
            })
            .collect();
        let report = StepReport {
            step,
            progress,
            tool_target: cfg.reward.schedule.target(progress),
            mean_reward: mean(composite.iter().copied()),
            mean_r_json: mean(scores.iter().map(|s| s.r_json)),
            mean_r_corr: mean(scores.iter().map(|s| s.r_corr)),
            mean_r_tool: mean(scores.iter().map(|s| s.r_tool)),
            mean_r_nt: mean(scores.iter().map(|s| s.r_nt)),
            mean_tool_calls: mean(trajs.iter().map(|t| t.tool_calls.len() as f64)),
            accuracy: scores.iter().filter(|s| s.r_corr >= 1.0).count() as f64 / trajs.len() as f64,
            mean_clipped_delta_correct: (!correct_deltas.is_empty()).then(|| mean(correct_deltas.iter().copied())),
            loss,
            clipped_fraction: if valid == 0 { 0.0 } else { clipped as f64 / valid as f64 },
        };
        on_step(&report);
        steps.push(report);
    }

    debug_assert_eq!(policy.teacher_forced_passes() - passes_before, passes);
    let eval_final = evaluate_in(&policy, &ctx, cfg)?;
    Ok(TrainOutcome {
        report: TrainReport {
            sft_final_nll,
            eval_initial,
            eval_final,
            steps,
            teacher_forced_passes: passes,
            trajectories,
        },
        initial,
        policy,
    })
}
