//! Multi-turn rollout loop: generation, tool-call detection and execution,
//! observation insertion, final-answer extraction and loss masks.

pub mod tokenizer;

use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::embedstore::{rag_observation, QueryHandle, RagObservation, Store, StoreError, DEFAULT_TOP_K};
use crate::gem::{GemObservation, GemService};
use crate::policy::{sample_token, SamplingConfig, ToyPolicy};
use crate::scalar::Scalar;
use crate::schema::{AnswerValue, FieldId};
use tokenizer::{Tokenizer, CALL_CLOSE, CALL_CLOSE_TEXT, CALL_OPEN, CALL_OPEN_TEXT, EOS};

pub const RAG_TOOL: &str = "rag_tool";
pub const GEM_TOOL: &str = "gem_tool";
pub const SELF_HANDLE: &str = "self";
pub const MALFORMED_TOOL: &str = "<malformed>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    ModelGenerated,
    EnvironmentInserted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    pub token_ids: Vec<u32>,
    pub origin: Origin,
    /// Index of the first token of a trailing model-written tool-call block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_start: Option<usize>,
    /// Sampling-time log-probabilities of model-generated tokens.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub logprobs: Vec<f64>,
}

impl Turn {
    fn inserted(role: Role, text: String, tok: &Tokenizer) -> Turn {
        let token_ids = tok.encode(&text);
        Turn { role, text, token_ids, origin: Origin::EnvironmentInserted, call_start: None, logprobs: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub round: usize,
    pub tool: String,
    pub arguments: Value,
    pub observation: Value,
    pub errored: bool,
}

impl ToolCallRecord {
    pub fn is_malformed(&self) -> bool {
        self.tool == MALFORMED_TOOL
    }
}

/// Token range `[start, end)` of the final answer inside `turns[turn]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub turn: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub strain_id: String,
    pub field: FieldId,
    pub turns: Vec<Turn>,
    pub tool_calls: Vec<ToolCallRecord>,
    pub final_answer_text: Option<String>,
    pub answer_span: Option<AnswerSpan>,
    pub gene: Vec<f64>,
    /// The final answer was replaced after generation.
    #[serde(default)]
    pub repaired: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PolicyMask {
    pub policy: Vec<bool>,
    pub answer: Vec<bool>,
    pub tool_call: Vec<bool>,
}

impl Trajectory {
    pub fn token_stream(&self) -> Vec<u32> {
        self.turns.iter().flat_map(|t| t.token_ids.iter().copied()).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.turns.iter().map(|t| t.token_ids.len()).sum()
    }

    /// Sampling-time log-probabilities aligned to the token stream (0 on
    /// environment tokens).
    pub fn sample_logprobs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_tokens());
        for t in &self.turns {
            if t.logprobs.len() == t.token_ids.len() {
                out.extend(&t.logprobs);
            } else {
                out.extend(std::iter::repeat_n(0.0, t.token_ids.len()));
            }
        }
        out
    }

    /// Calls counted for the tool-use reward: every well-formed request,
    /// whether or not the tool reported an error.
    pub fn well_formed_calls(&self) -> usize {
        self.tool_calls.iter().filter(|c| !c.is_malformed()).count()
    }

    pub fn used_tool(&self, name: &str) -> bool {
        self.tool_calls.iter().any(|c| c.tool == name)
    }

    pub fn build_policy_mask(&self) -> PolicyMask {
        let n = self.num_tokens();
        let mut m = PolicyMask { policy: vec![false; n], answer: vec![false; n], tool_call: vec![false; n] };
        let mut offset = 0;
        for (i, t) in self.turns.iter().enumerate() {
            let len = t.token_ids.len();
            if t.origin == Origin::ModelGenerated {
                m.policy[offset..offset + len].iter_mut().for_each(|b| *b = true);
                if let Some(cs) = t.call_start {
                    m.tool_call[offset + cs..offset + len].iter_mut().for_each(|b| *b = true);
                }
                if let Some(span) = self.answer_span.filter(|s| s.turn == i) {
                    m.answer[offset + span.start..offset + span.end].iter_mut().for_each(|b| *b = true);
                }
            }
            offset += len;
        }
        m
    }

    /// Debugging dump: the trajectory plus its masks.
    pub fn to_dump(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("trajectory serializes");
        let mask = self.build_policy_mask();
        let bits = |m: &[bool]| m.iter().map(|&b| u8::from(b)).collect::<Vec<_>>();
        v.as_object_mut().unwrap().insert(
            "masks".into(),
            json!({"policy": bits(&mask.policy), "answer": bits(&mask.answer), "tool_call": bits(&mask.tool_call)}),
        );
        v
    }
}

/// Final answer of a finished rollout.
pub fn extract_final_answer(traj: &Trajectory) -> Option<&str> {
    traj.final_answer_text.as_deref()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToolRequest {
    pub name: String,
    pub arguments: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Detection {
    Call(ToolRequest),
    NoCall,
    Malformed(String),
}

/// Classifies an assistant segment by its trailing tool-call block.
pub fn detect_tool_call(text: &str) -> Detection {
    let trimmed = text.trim_end();
    let Some(open) = trimmed.rfind(CALL_OPEN_TEXT) else {
        return if trimmed.contains(CALL_CLOSE_TEXT) {
            Detection::Malformed("closing marker without opening marker".into())
        } else {
            Detection::NoCall
        };
    };
    let after = &trimmed[open + CALL_OPEN_TEXT.len()..];
    let Some(body) = after.strip_suffix(CALL_CLOSE_TEXT) else {
        return Detection::Malformed(if after.contains(CALL_CLOSE_TEXT) {
            "text after tool call".into()
        } else {
            "unterminated tool call".into()
        });
    };
    if body.contains(CALL_CLOSE_TEXT) {
        return Detection::Malformed("nested closing marker".into());
    }
    let value: Value = match serde_json::from_str(body.trim()) {
        Ok(v) => v,
        Err(e) => return Detection::Malformed(format!("invalid JSON: {e}")),
    };
    let Value::Object(mut obj) = value else {
        return Detection::Malformed("tool call is not an object".into());
    };
    let name = match obj.remove("name") {
        Some(Value::String(s)) => s,
        _ => return Detection::Malformed("missing tool name".into()),
    };
    let arguments = match obj.remove("arguments") {
        Some(Value::Object(a)) => a,
        _ => return Detection::Malformed("missing arguments object".into()),
    };
    if let Some(k) = obj.keys().next() {
        return Detection::Malformed(format!("unexpected key `{k}`"));
    }
    Detection::Call(ToolRequest { name, arguments })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub max_tool_rounds: usize,
    pub max_new_tokens: usize,
    pub sampling: SamplingConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { max_tool_rounds: 5, max_new_tokens: 32, sampling: SamplingConfig::default() }
    }
}

/// A resolved rollout input.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub strain_id: String,
    pub field: FieldId,
    pub gene: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneRef {
    Vector(Vec<f64>),
    Handle(String),
}

/// One line of a prompt file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub strain_id: String,
    pub field: FieldId,
    pub gene: GeneRef,
    pub truth: AnswerValue,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("prompt line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PromptRecord {
    pub fn resolve(&self, store: &Store) -> Result<Prompt, StoreError> {
        let gene = match &self.gene {
            GeneRef::Vector(v) => v.clone(),
            GeneRef::Handle(h) => store.get(h).ok_or_else(|| StoreError::UnknownHandle(h.clone()))?.embedding.clone(),
        };
        Ok(Prompt { strain_id: self.strain_id.clone(), field: self.field, gene })
    }
}

pub fn read_prompts(reader: impl BufRead) -> Result<Vec<PromptRecord>, EnvError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EnvError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

/// Read-only tool services.
#[derive(Clone, Copy, Debug)]
pub struct ToolEnv<'a> {
    pub store: &'a Store,
    pub gem: &'a GemService,
    pub rag_k: usize,
}

impl<'a> ToolEnv<'a> {
    pub fn new(store: &'a Store, gem: &'a GemService) -> Self {
        ToolEnv { store, gem, rag_k: DEFAULT_TOP_K }
    }

    /// Runs one request; failures come back as errored observations.
    pub fn execute(&self, req: &ToolRequest, prompt: &Prompt) -> (Value, bool) {
        match req.name.as_str() {
            RAG_TOOL => {
                let obs = match req.arguments.get("handle") {
                    Some(Value::String(h)) => {
                        let handle = if h == SELF_HANDLE {
                            if self.store.get(&prompt.strain_id).is_some() {
                                QueryHandle::Strain(prompt.strain_id.clone())
                            } else {
                                QueryHandle::Vector(prompt.gene.clone())
                            }
                        } else {
                            QueryHandle::Strain(h.clone())
                        };
                        rag_observation(self.store, &handle, &[prompt.field.name().to_string()], self.rag_k)
                            .unwrap_or_else(|e| RagObservation::error(e.to_string()))
                    }
                    _ => RagObservation::error("missing genome handle"),
                };
                let errored = obs.error.is_some();
                (obs.to_value(), errored)
            }
            GEM_TOOL => {
                let id = req.arguments.get("config_id").and_then(Value::as_u64);
                let obs = match id.map(|i| u32::try_from(i).unwrap_or(0)) {
                    Some(i) => self.gem.observe(i).cloned().unwrap_or_else(|_| GemObservation {
                        tool: GEM_TOOL.into(),
                        configuration_id: i,
                        minimal_substrate_dict: Map::new(),
                        error: Some("invalid configuration_id".into()),
                    }),
                    None => GemObservation {
                        tool: GEM_TOOL.into(),
                        configuration_id: 0,
                        minimal_substrate_dict: Map::new(),
                        error: Some("missing configuration_id".into()),
                    },
                };
                let errored = obs.error.is_some();
                (serde_json::to_value(&obs).expect("observation serializes"), errored)
            }
            other => (json!({"tool": other, "error": "unknown tool"}), true),
        }
    }
}

/// One generated assistant segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// Verbatim text when the generator works at the text level; otherwise
    /// the text is decoded from `token_ids`.
    pub text: Option<String>,
    pub token_ids: Vec<u32>,
    pub logprobs: Vec<f64>,
}

/// Anything that can write assistant segments.
pub trait Agent: Sync {
    /// `stream` is the full token history; `segment_index` counts earlier
    /// assistant segments in this rollout.
    fn generate(
        &self,
        stream: &[u32],
        gene: &[f64],
        segment_index: usize,
        tok: &Tokenizer,
        cfg: &RolloutConfig,
        rng: &mut ChaCha8Rng,
    ) -> Segment;
}

impl<T: Scalar> Agent for ToyPolicy<T> {
    fn generate(
        &self,
        stream: &[u32],
        gene: &[f64],
        _segment_index: usize,
        _tok: &Tokenizer,
        cfg: &RolloutConfig,
        rng: &mut ChaCha8Rng,
    ) -> Segment {
        let g: Vec<T> = gene.iter().map(|&x| T::lit(x)).collect();
        let mut ctx = stream.to_vec();
        let start = ctx.len();
        let mut logprobs = Vec::new();
        for _ in 0..cfg.max_new_tokens {
            let Ok(lp) = self.next_logprobs(&ctx, &g) else {
                // Inputs the policy cannot read end the segment.
                return Segment { text: None, token_ids: vec![EOS], logprobs: vec![0.0] };
            };
            let tok = sample_token(&lp, &cfg.sampling, rng);
            logprobs.push(lp[tok as usize].to_f64_lossy());
            ctx.push(tok);
            if tok == EOS || tok == CALL_CLOSE {
                break;
            }
        }
        Segment { text: None, token_ids: ctx.split_off(start), logprobs }
    }
}

/// Replays fixed texts; the last one repeats once the list is exhausted.
#[derive(Clone, Debug)]
pub struct ScriptedAgent {
    pub segments: Vec<String>,
}

impl ScriptedAgent {
    pub fn new<S: Into<String>>(segments: impl IntoIterator<Item = S>) -> Self {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        assert!(!segments.is_empty(), "scripted agent needs at least one segment");
        ScriptedAgent { segments }
    }
}

impl Agent for ScriptedAgent {
    fn generate(
        &self,
        _stream: &[u32],
        _gene: &[f64],
        segment_index: usize,
        tok: &Tokenizer,
        _cfg: &RolloutConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Segment {
        let text = self.segments[segment_index.min(self.segments.len() - 1)].clone();
        text_segment(text, tok)
    }
}

/// Segment for a text-level generator. The trailing call block is encoded
/// separately so its first token lines up with the marker; a segment without
/// a call ends with `EOS`, as a sampled one would.
pub fn text_segment(text: String, tok: &Tokenizer) -> Segment {
    let token_ids = match text.rfind(CALL_OPEN_TEXT) {
        Some(i) => {
            let mut ids = tok.encode(&text[..i]);
            ids.extend(tok.encode(&text[i..]));
            ids
        }
        None => {
            let mut ids = tok.encode(&text);
            ids.push(EOS);
            ids
        }
    };
    let logprobs = vec![0.0; token_ids.len()];
    Segment { text: Some(text), token_ids, logprobs }
}

/// Canonical compact tool-call text.
pub fn call_text(name: &str, arguments: &Value) -> String {
    format!("{CALL_OPEN_TEXT}{}{CALL_CLOSE_TEXT}", json!({"name": name, "arguments": arguments}))
}

/// The user turn that opens every rollout: the target field key.
pub fn question_text(field: FieldId) -> String {
    format!("\"{}\"", field.name())
}

/// Generates until a call-free segment or the round cap, executing tools in
/// between. After `max_tool_rounds` calls one more segment is generated and
/// taken as final without executing anything it requests.
pub fn run_rollout<A: Agent + ?Sized>(
    agent: &A,
    prompt: &Prompt,
    tools: &ToolEnv<'_>,
    tok: &Tokenizer,
    cfg: &RolloutConfig,
    seed: u64,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut turns = vec![Turn::inserted(Role::User, question_text(prompt.field), tok)];
    let mut stream: Vec<u32> = turns[0].token_ids.clone();
    let mut tool_calls = Vec::new();
    let mut final_answer_text = None;
    let mut answer_span = None;
    let mut segment_index = 0;

    loop {
        let forced = tool_calls.len() >= cfg.max_tool_rounds;
        let seg = agent.generate(&stream, &prompt.gene, segment_index, tok, cfg, &mut rng);
        segment_index += 1;
        let text = seg.text.unwrap_or_else(|| tok.decode(&seg.token_ids));
        let detection = detect_tool_call(&text);
        let call_start = match detection {
            Detection::NoCall => None,
            _ => seg.token_ids.iter().rposition(|&t| t == CALL_OPEN),
        };
        let turn_idx = turns.len();
        let n_tokens = seg.token_ids.len();
        stream.extend(&seg.token_ids);
        let mut logprobs = seg.logprobs;
        logprobs.resize(n_tokens, 0.0);
        turns.push(Turn {
            role: Role::Assistant,
            text: text.clone(),
            token_ids: seg.token_ids,
            origin: Origin::ModelGenerated,
            call_start,
            logprobs,
        });

        let request = match detection {
            Detection::NoCall => {
                if !text.trim().is_empty() {
                    final_answer_text = Some(text);
                    answer_span = Some(AnswerSpan { turn: turn_idx, start: 0, end: n_tokens });
                }
                break;
            }
            Detection::Call(_) | Detection::Malformed(_) if forced => {
                let prefix = &text[..text.rfind(CALL_OPEN_TEXT).unwrap_or(text.len())];
                if !prefix.trim().is_empty() {
                    final_answer_text = Some(prefix.to_string());
                    answer_span = Some(AnswerSpan { turn: turn_idx, start: 0, end: call_start.unwrap_or(n_tokens) });
                }
                break;
            }
            Detection::Call(req) => Ok(req),
            Detection::Malformed(reason) => Err(reason),
        };

        let round = tool_calls.len() + 1;
        let record = match request {
            Ok(req) => {
                let (observation, errored) = tools.execute(&req, prompt);
                ToolCallRecord { round, tool: req.name, arguments: Value::Object(req.arguments), observation, errored }
            }
            Err(reason) => ToolCallRecord {
                round,
                tool: MALFORMED_TOOL.into(),
                arguments: Value::Null,
                observation: json!({"error": format!("malformed tool call: {reason}")}),
                errored: true,
            },
        };
        let obs_text = serde_json::to_string(&record.observation).expect("observation serializes");
        let obs_turn = Turn::inserted(Role::Tool, obs_text, tok);
        stream.extend(&obs_turn.token_ids);
        turns.push(obs_turn);
        tool_calls.push(record);
    }

    Trajectory {
        strain_id: prompt.strain_id.clone(),
        field: prompt.field,
        turns,
        tool_calls,
        final_answer_text,
        answer_span,
        gene: prompt.gene.clone(),
        repaired: false,
    }
}
