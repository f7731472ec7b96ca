//! Closed-loop rollouts of trained checkpoints (and of the oracle) under a
//! fixed per-episode inference mode, plus summary statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    observe, parse_thought, render_prompt, render_thought, CodecError, Modality, ModalityConfig, TokenClass,
    Vocabulary,
};
use crate::net::{sample_token, ModelParameters, NetError};
use crate::oracle::{self, OracleConfig};
use crate::rng;
use crate::world::{self, check_success, Action, TaskFamily, WorldConfig, WorldError, WorldState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("usage error: {0}")]
    Usage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Act,
    Think,
    Follow,
    /// Thought from a think-mode checkpoint, actions from a follow-mode one.
    Hierarchical,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Act => "act",
            Mode::Think => "think",
            Mode::Follow => "follow",
            Mode::Hierarchical => "hierarchical",
        })
    }
}

impl core::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "act" => Ok(Mode::Act),
            "think" => Ok(Mode::Think),
            "follow" => Ok(Mode::Follow),
            "hierarchical" => Ok(Mode::Hierarchical),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThoughtSource {
    Model,
    Oracle,
    Human,
}

/// Seconds on some monotonic clock; decode latency is measured with it.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Clock that never advances, for deterministic tests.
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// Checkpoint(s) driving a rollout. `low_level` is only used in hierarchical mode.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub primary: &'a ModelParameters,
    pub low_level: Option<&'a ModelParameters>,
}

impl<'a> Models<'a> {
    pub fn single(params: &'a ModelParameters) -> Self {
        Self { primary: params, low_level: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub max_thought_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature: 0.0, max_thought_tokens: 40 }
    }
}

/// A thought handed to the policy from outside the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvidedThought {
    pub tokens: Vec<u32>,
    pub source: ThoughtSource,
}

/// One policy decision: the actions to execute and what it cost to produce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub actions: Vec<Action>,
    pub thought: Option<String>,
    pub thought_source: Option<ThoughtSource>,
    pub tokens_generated: usize,
    pub decode_seconds: f64,
    pub malformed: bool,
    /// Whether the first generated token had the class the mode asks for;
    /// `None` when nothing was generated under the mode's own grammar.
    pub obedient: Option<bool>,
}

fn generate(
    params: &ModelParameters,
    prefix: &[u32],
    stop: &[u32],
    max_new: usize,
    cfg: &DecodeConfig,
    rng: &mut rng::Rng,
) -> Result<Vec<u32>, EvalError> {
    Ok(params.decode(prefix, stop, max_new, cfg.temperature, rng)?)
}

fn noop(state: &WorldState) -> Action {
    Action::new(0, 0, state.gripper_state)
}

/// Parses `chunk` action triples; any unreadable triple turns the whole
/// decision into a single no-op.
fn parse_actions(vocab: &Vocabulary, tokens: &[u32], chunk: usize, state: &WorldState) -> (Vec<Action>, bool) {
    let mut actions = Vec::with_capacity(chunk);
    for i in 0..chunk {
        match tokens.get(3 * i..3 * i + 3).and_then(|t| vocab.decode_action(t)) {
            Some(a) => actions.push(a),
            None => return (vec![noop(state)], true),
        }
    }
    (actions, false)
}

fn action_budget(mcfg: &ModalityConfig) -> usize {
    3 * mcfg.chunk_size + 1
}

/// Context shared by every decision of an episode.
pub struct Policy<'a> {
    pub models: Models<'a>,
    pub vocab: &'a Vocabulary,
    pub modality: &'a ModalityConfig,
    pub decode: DecodeConfig,
}

impl<'a> Policy<'a> {
    fn head(&self, state: &WorldState) -> Vec<u32> {
        let mut p = vec![self.vocab.bos];
        p.extend(observe(self.vocab, state));
        p
    }

    fn prompted(&self, state: &WorldState) -> Result<Vec<u32>, EvalError> {
        let mut p = self.head(state);
        p.extend(render_prompt(self.vocab, &state.task)?);
        Ok(p)
    }

    /// Think-mode thought generation, truncated at the separator.
    fn own_thought(
        &self,
        params: &ModelParameters,
        state: &WorldState,
        rng: &mut rng::Rng,
    ) -> Result<(Vec<u32>, usize, bool), EvalError> {
        let mut prefix = self.prompted(state)?;
        prefix.push(self.vocab.modality_token(Modality::Think));
        let g = generate(params, &prefix, &[self.vocab.sep], self.decode.max_thought_tokens + 1, &self.decode, rng)?;
        let n = g.len();
        let word_first = g.first().map(|&t| self.vocab.class(t) == Some(TokenClass::Word)).unwrap_or(false);
        let mut thought = g;
        if thought.last() == Some(&self.vocab.sep) {
            thought.pop();
        }
        Ok((thought, n, word_first))
    }

    fn thought_text(&self, tokens: &[u32]) -> String {
        match parse_thought(self.vocab, tokens) {
            Ok(t) => crate::codec::render_thought_text(&t, self.modality.thought_format),
            Err(_) => self.vocab.detokenize(tokens),
        }
    }

    /// Follow-mode actions conditioned on `thought` (task prompt excluded).
    fn follow_actions(
        &self,
        params: &ModelParameters,
        state: &WorldState,
        thought: &[u32],
        rng: &mut rng::Rng,
    ) -> Result<(Vec<u32>, usize), EvalError> {
        let mut prefix = self.head(state);
        prefix.extend_from_slice(thought);
        prefix.push(self.vocab.modality_token(Modality::Follow));
        let ctx = params.config().context_len;
        if prefix.len() > ctx {
            // An overlong thought cannot be conditioned on; treat as malformed.
            return Ok((Vec::new(), 0));
        }
        let g = generate(params, &prefix, &[self.vocab.eos], action_budget(self.modality), &self.decode, rng)?;
        let n = g.len();
        Ok((g, n))
    }

    /// One decision under `mode`. `provided` supplies the thought for follow
    /// mode, or overrides the model's own thought in think mode.
    pub fn decide(
        &self,
        state: &WorldState,
        mode: Mode,
        provided: Option<&ProvidedThought>,
        clock: &dyn Clock,
        rng: &mut rng::Rng,
    ) -> Result<Decision, EvalError> {
        let v = self.vocab;
        let chunk = self.modality.chunk_size;
        let start = clock.now();
        let params = self.models.primary;
        let mut d = Decision {
            actions: Vec::new(),
            thought: None,
            thought_source: None,
            tokens_generated: 0,
            decode_seconds: 0.0,
            malformed: false,
            obedient: None,
        };
        let action_tokens: Vec<u32>;
        match mode {
            Mode::Act => {
                let mut prefix = self.prompted(state)?;
                prefix.push(v.modality_token(Modality::Act));
                let g = generate(params, &prefix, &[v.eos], action_budget(self.modality), &self.decode, rng)?;
                d.tokens_generated = g.len();
                d.obedient = Some(g.first().is_some_and(|&t| v.is_action_token(t)));
                action_tokens = g;
            }
            Mode::Think => match provided {
                Some(p) => {
                    let mut prefix = self.prompted(state)?;
                    prefix.push(v.modality_token(Modality::Think));
                    prefix.extend_from_slice(&p.tokens);
                    prefix.push(v.sep);
                    if prefix.len() > params.config().context_len {
                        return Err(EvalError::Usage(String::from("provided thought does not fit the context")));
                    }
                    let g = generate(params, &prefix, &[v.eos], action_budget(self.modality), &self.decode, rng)?;
                    d.tokens_generated = g.len();
                    d.thought = Some(self.thought_text(&p.tokens));
                    d.thought_source = Some(p.source);
                    action_tokens = g;
                }
                None => {
                    let mut prefix = self.prompted(state)?;
                    prefix.push(v.modality_token(Modality::Think));
                    let budget = self.decode.max_thought_tokens + 1 + action_budget(self.modality);
                    let g = generate(params, &prefix, &[v.eos], budget, &self.decode, rng)?;
                    d.tokens_generated = g.len();
                    d.obedient =
                        Some(g.first().is_some_and(|&t| v.class(t) == Some(TokenClass::Word)));
                    let split = g.iter().position(|&t| t == v.sep);
                    let (thought, rest) = match split {
                        Some(i) => (&g[..i], g[i + 1..].to_vec()),
                        None => (&g[..], Vec::new()),
                    };
                    d.thought = Some(self.thought_text(thought));
                    d.thought_source = Some(ThoughtSource::Model);
                    action_tokens = rest;
                }
            },
            Mode::Follow => {
                let p = provided
                    .ok_or_else(|| EvalError::Usage(String::from("follow mode requires a thought for every step")))?;
                let (tokens, n) = self.follow_actions(params, state, &p.tokens, rng)?;
                d.tokens_generated = n;
                d.obedient = Some(tokens.first().is_some_and(|&t| v.is_action_token(t)));
                d.thought = Some(self.thought_text(&p.tokens));
                d.thought_source = Some(p.source);
                action_tokens = tokens;
            }
            Mode::Hierarchical => {
                let low = self
                    .models
                    .low_level
                    .ok_or_else(|| EvalError::Usage(String::from("hierarchical mode needs two checkpoints")))?;
                let (thought, n_thought) = match provided {
                    Some(p) => (p.tokens.clone(), 0),
                    None => {
                        let (t, n, _) = self.own_thought(params, state, rng)?;
                        (t, n)
                    }
                };
                let (tokens, n) = self.follow_actions(low, state, &thought, rng)?;
                d.tokens_generated = n_thought + n;
                d.obedient = Some(tokens.first().is_some_and(|&t| v.is_action_token(t)));
                d.thought = Some(self.thought_text(&thought));
                d.thought_source = Some(provided.map_or(ThoughtSource::Model, |p| p.source));
                action_tokens = tokens;
            }
        }
        d.decode_seconds = clock.now() - start;
        let (actions, malformed) = parse_actions(v, &action_tokens, chunk, state);
        d.actions = actions;
        d.malformed = malformed;
        Ok(d)
    }

    /// Follow-mode decision whose thought is produced by the same checkpoint
    /// in think mode (used when oracle thoughts only cover moving subtasks).
    fn follow_with_own_thought(
        &self,
        state: &WorldState,
        clock: &dyn Clock,
        rng: &mut rng::Rng,
    ) -> Result<Decision, EvalError> {
        let start = clock.now();
        let (thought, n_thought, _) = self.own_thought(self.models.primary, state, rng)?;
        let (tokens, n) = self.follow_actions(self.models.primary, state, &thought, rng)?;
        let (actions, malformed) = parse_actions(self.vocab, &tokens, self.modality.chunk_size, state);
        Ok(Decision {
            actions,
            thought: Some(self.thought_text(&thought)),
            thought_source: Some(ThoughtSource::Model),
            tokens_generated: n_thought + n,
            decode_seconds: clock.now() - start,
            malformed,
            obedient: Some(tokens.first().is_some_and(|&t| self.vocab.is_action_token(t))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub family: TaskFamily,
    pub n_objects: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtLogEntry {
    pub step: u32,
    pub thought: String,
    pub source: ThoughtSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub spec: EpisodeSpec,
    pub success: bool,
    pub steps: u32,
    pub decisions: u32,
    pub tokens_generated: u64,
    pub wall_time: f64,
    pub thought_log: Vec<ThoughtLogEntry>,
    pub malformed: u32,
    pub obedient: u32,
    pub obedience_checks: u32,
    /// Set when the oracle could not supply a thought for the live state.
    pub invalid: bool,
}

impl EpisodeResult {
    /// Everything except the wall-clock measurement.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        &a == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: Mode,
    pub max_steps: u32,
    /// Replace thoughts with the oracle's on moving subtasks.
    pub oracle_substitution: bool,
    pub decode: DecodeConfig,
}

fn oracle_thought(
    vocab: &Vocabulary,
    state: &WorldState,
    ocfg: &OracleConfig,
    mcfg: &ModalityConfig,
) -> Result<Option<(bool, Vec<u32>, String)>, EvalError> {
    match oracle::live_thought(state, ocfg) {
        Ok(Some((sub, th))) => {
            let tokens = render_thought(vocab, &th, mcfg.thought_format)?;
            let text = crate::codec::render_thought_text(&th, mcfg.thought_format);
            Ok(Some((sub.kind.is_moving(), tokens, text)))
        }
        Ok(None) => Ok(None),
        Err(_) => Err(EvalError::Usage(String::from("oracle cannot plan"))),
    }
}

/// Runs one episode from a seeded reset until success or `max_steps`.
pub fn rollout(
    models: Models<'_>,
    vocab: &Vocabulary,
    mcfg: &ModalityConfig,
    ocfg: &OracleConfig,
    world_cfg: &WorldConfig,
    spec: EpisodeSpec,
    cfg: &RolloutConfig,
    clock: &dyn Clock,
) -> Result<EpisodeResult, EvalError> {
    if cfg.mode == Mode::Follow && !cfg.oracle_substitution {
        return Err(EvalError::Usage(String::from(
            "follow-mode rollouts need a thought source; enable oracle substitution or drive steps externally",
        )));
    }
    if cfg.mode == Mode::Hierarchical && models.low_level.is_none() {
        return Err(EvalError::Usage(String::from("hierarchical mode needs two checkpoints")));
    }
    let policy = Policy { models, vocab, modality: mcfg, decode: cfg.decode };
    let mut state = world::reset(world_cfg, spec.family, spec.n_objects, spec.seed)?;
    let mut rng = rng::seeded(spec.seed, 0xdec0de);
    let mut result = EpisodeResult {
        spec,
        success: false,
        steps: 0,
        decisions: 0,
        tokens_generated: 0,
        wall_time: 0.0,
        thought_log: Vec::new(),
        malformed: 0,
        obedient: 0,
        obedience_checks: 0,
        invalid: false,
    };
    while result.steps < cfg.max_steps && !check_success(&state) {
        let decision = if cfg.oracle_substitution {
            let oracle = match oracle_thought(vocab, &state, ocfg, mcfg) {
                Ok(o) => o,
                Err(_) => {
                    result.invalid = true;
                    break;
                }
            };
            let moving = oracle.as_ref().filter(|o| o.0);
            match (cfg.mode, moving) {
                (_, Some((_, tokens, _))) => {
                    let p = ProvidedThought { tokens: tokens.clone(), source: ThoughtSource::Oracle };
                    policy.decide(&state, cfg.mode, Some(&p), clock, &mut rng)?
                }
                (Mode::Follow, None) => policy.follow_with_own_thought(&state, clock, &mut rng)?,
                (mode, None) => policy.decide(&state, mode, None, clock, &mut rng)?,
            }
        } else {
            policy.decide(&state, cfg.mode, None, clock, &mut rng)?
        };
        result.decisions += 1;
        result.tokens_generated += decision.tokens_generated as u64;
        result.wall_time += decision.decode_seconds;
        result.malformed += decision.malformed as u32;
        if let Some(ok) = decision.obedient {
            result.obedience_checks += 1;
            result.obedient += ok as u32;
        }
        if let (Some(t), Some(src)) = (decision.thought, decision.thought_source) {
            result.thought_log.push(ThoughtLogEntry { step: result.steps, thought: t, source: src });
        }
        for a in decision.actions {
            state = world::step(&state, a);
            result.steps += 1;
            if check_success(&state) || result.steps >= cfg.max_steps {
                break;
            }
        }
    }
    result.success = check_success(&state);
    Ok(result)
}

/// Reactive oracle rollout (the upper bound every learned policy is compared to).
pub fn oracle_rollout(world_cfg: &WorldConfig, spec: EpisodeSpec, max_steps: u32) -> Result<EpisodeResult, EvalError> {
    let mut state = world::reset(world_cfg, spec.family, spec.n_objects, spec.seed)?;
    let mut steps = 0;
    let mut invalid = false;
    while steps < max_steps && !check_success(&state) {
        match oracle::current_subtask(&state) {
            Ok(Some(sub)) => state = world::step(&state, oracle::act(&state, &sub)),
            _ => {
                invalid = true;
                break;
            }
        }
        steps += 1;
    }
    Ok(EpisodeResult {
        spec,
        success: check_success(&state),
        steps,
        decisions: steps,
        tokens_generated: 0,
        wall_time: 0.0,
        thought_log: Vec::new(),
        malformed: 0,
        obedient: 0,
        obedience_checks: 0,
        invalid,
    })
}

/// Default step cap: the oracle's own budget for the variant.
pub fn default_max_steps(world_cfg: &WorldConfig, n_objects: usize) -> u32 {
    4 * world_cfg.grid_size as u32 * n_objects as u32
}

/// Episode seeds shared by every evaluated method: `base + index`.
pub fn episode_specs(family: TaskFamily, n_objects: usize, base_seed: u64, n: usize) -> Vec<EpisodeSpec> {
    (0..n).map(|i| EpisodeSpec { family, n_objects, seed: base_seed + i as u64 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub invalid: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub stderr: f64,
    pub mean_steps: f64,
    pub tokens_per_step: f64,
    pub seconds_per_step: f64,
    pub obedience: f64,
    pub malformed: u64,
}

/// Aggregates valid episodes; the standard error is `sqrt(p (1 - p) / n)`.
pub fn summarize(results: &[EpisodeResult]) -> Summary {
    let valid: Vec<&EpisodeResult> = results.iter().filter(|r| !r.invalid).collect();
    let n = valid.len();
    let successes = valid.iter().filter(|r| r.success).count();
    let p = if n == 0 { 0.0 } else { successes as f64 / n as f64 };
    let steps: u64 = valid.iter().map(|r| r.steps as u64).sum();
    let tokens: u64 = valid.iter().map(|r| r.tokens_generated).sum();
    let time: f64 = valid.iter().map(|r| r.wall_time).sum();
    let checks: u64 = valid.iter().map(|r| r.obedience_checks as u64).sum();
    let obedient: u64 = valid.iter().map(|r| r.obedient as u64).sum();
    let per_step = |x: f64| if steps == 0 { 0.0 } else { x / steps as f64 };
    Summary {
        episodes: n,
        invalid: results.len() - n,
        successes,
        success_rate: p,
        stderr: if n == 0 { 0.0 } else { libm::sqrt(p * (1.0 - p) / n as f64) },
        mean_steps: if n == 0 { 0.0 } else { steps as f64 / n as f64 },
        tokens_per_step: per_step(tokens as f64),
        seconds_per_step: per_step(time),
        obedience: if checks == 0 { 1.0 } else { obedient as f64 / checks as f64 },
        malformed: valid.iter().map(|r| r.malformed as u64).sum(),
    }
}

/// Replaces generated tokens with noise to exercise malformed-output handling.
pub fn corrupt_tokens(tokens: &mut [u32], vocab_size: usize, rng: &mut rng::Rng) {
    for t in tokens.iter_mut() {
        *t = sample_token(&vec![0.0; vocab_size], 1.0, rng);
    }
}
