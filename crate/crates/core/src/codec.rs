//! Vocabulary, tokenization and per-modality sample assembly.
//!
//! Every sample is an `(input, target, loss_mask)` triple. The input ends with
//! exactly one modality token; the loss only ever covers target positions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{Demonstration, Thought, ThoughtFormat, MOVE_WORDS};
use crate::world::{Action, Color, Grip, Location, Shape, TaskSpec, WorldState, MAX_OBJECTS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("range error: {0}")]
    Range(String),
    #[error("unknown words: {}", .0.join(", "))]
    UnknownWords(Vec<String>),
    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("step {step} carries no thought, required for {modality:?} samples")]
    AnnotationMissing { step: usize, modality: Modality },
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Act,
    Think,
    Follow,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Act, Modality::Think, Modality::Follow];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionEncoding {
    /// Dedicated tokens per axis delta and gripper state.
    #[default]
    Axis,
    /// Every component quantized through the K-bin bank.
    Binned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModalityConfig {
    pub w_act: f64,
    pub w_think: f64,
    pub w_follow: f64,
    #[serde(default)]
    pub thought_format: ThoughtFormat,
    pub chunk_size: usize,
    pub action_bins: u32,
    #[serde(default)]
    pub action_encoding: ActionEncoding,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        Self {
            w_act: 0.25,
            w_think: 0.5,
            w_follow: 0.25,
            thought_format: ThoughtFormat::Short,
            chunk_size: 1,
            action_bins: 256,
            action_encoding: ActionEncoding::Axis,
        }
    }
}

impl ModalityConfig {
    pub fn with_weights(mut self, w_act: f64, w_think: f64, w_follow: f64) -> Self {
        self.w_act = w_act;
        self.w_think = w_think;
        self.w_follow = w_follow;
        self
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.w_act, self.w_think, self.w_follow]
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let w = self.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(CodecError::Config(format!("modality weights must be non-negative, got {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CodecError::Config(format!("modality weights sum to {sum}, not 1")));
        }
        if self.chunk_size == 0 {
            return Err(CodecError::Config(String::from("chunk_size must be at least 1")));
        }
        if self.action_bins < 2 {
            return Err(CodecError::Config(String::from("action_bins must be at least 2")));
        }
        Ok(())
    }
}

/// Quantizes `v` in `[-1, 1]` into one of `k` equal-width bins.
pub fn bin_action(v: f64, k: u32) -> Result<u32, CodecError> {
    if k < 2 {
        return Err(CodecError::Range(format!("bin count {k} < 2")));
    }
    if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
        return Err(CodecError::Range(format!("value {v} outside [-1, 1]")));
    }
    let b = libm::floor((v + 1.0) / 2.0 * k as f64) as i64;
    Ok(b.clamp(0, k as i64 - 1) as u32)
}

/// Center of bin `b`.
pub fn unbin_action(b: u32, k: u32) -> Result<f64, CodecError> {
    if k < 2 || b >= k {
        return Err(CodecError::Range(format!("bin {b} outside [0, {k})")));
    }
    Ok(-1.0 + (2 * b + 1) as f64 / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Structural,
    Modality,
    Word,
    Coordinate,
    Identity,
    Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub grid_size: u8,
    pub action_encoding: ActionEncoding,
    pub action_bins: u32,
}

impl VocabConfig {
    pub fn new(grid_size: u8, modality: &ModalityConfig) -> Self {
        Self { grid_size, action_encoding: modality.action_encoding, action_bins: modality.action_bins }
    }
}

const WORDS: &[&str] = &[
    "What", "should", "the", "robot", "do", "to", "?", "place", "stack", "then", "left", "right", "of", "behind",
    "in", "front", "on", "top", "move", "pick", "up", "carry", "subtask:", "move:", "plan:", ";", "forward",
    "backward", "close", "open", "closed", "none", "held",
];

const AXIS_ACTIONS: [&str; 8] = ["dx-1", "dx0", "dx+1", "dy-1", "dy0", "dy+1", "grip-open", "grip-closed"];

/// Closed token set for one grid size and action encoding. Ids are dense and
/// depend only on the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    config: VocabConfig,
    tokens: Vec<String>,
    classes: Vec<TokenClass>,
    index: BTreeMap<String, u32>,
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub sep: u32,
    modality_ids: [u32; 3],
    axis_base: u32,
    bin_base: Option<u32>,
}

fn identity_token(shape: Shape, color: Color) -> String {
    format!("{}-{}", color.word(), shape.word())
}

impl Vocabulary {
    pub fn new(config: VocabConfig) -> Self {
        let mut tokens: Vec<(String, TokenClass)> = Vec::new();
        let mut push = |s: String, c: TokenClass| tokens.push((s, c));
        for s in ["<pad>", "<bos>", "<eos>", "<sep>"] {
            push(s.to_string(), TokenClass::Structural);
        }
        for s in ["<act>", "<think>", "<follow>"] {
            push(s.to_string(), TokenClass::Modality);
        }
        for w in WORDS {
            push(w.to_string(), TokenClass::Word);
        }
        for s in Shape::ALL {
            push(s.word().to_string(), TokenClass::Word);
        }
        for c in Color::ALL {
            push(c.word().to_string(), TokenClass::Word);
        }
        for axis in ["x", "y"] {
            for i in 0..config.grid_size {
                push(format!("{axis}{i}"), TokenClass::Coordinate);
            }
        }
        for l in 0..MAX_OBJECTS {
            push(format!("l{l}"), TokenClass::Coordinate);
        }
        for s in Shape::ALL {
            for c in Color::ALL {
                push(identity_token(s, c), TokenClass::Identity);
            }
        }
        let axis_base = tokens.len() as u32;
        for a in AXIS_ACTIONS {
            tokens.push((a.to_string(), TokenClass::Action));
        }
        let bin_base = (config.action_encoding == ActionEncoding::Binned).then(|| {
            let base = tokens.len() as u32;
            for b in 0..config.action_bins {
                tokens.push((format!("bin{b}"), TokenClass::Action));
            }
            base
        });

        let index: BTreeMap<String, u32> = tokens.iter().enumerate().map(|(i, (s, _))| (s.clone(), i as u32)).collect();
        let id = |s: &str| index[s];
        Self {
            config,
            pad: id("<pad>"),
            bos: id("<bos>"),
            eos: id("<eos>"),
            sep: id("<sep>"),
            modality_ids: [id("<act>"), id("<think>"), id("<follow>")],
            axis_base,
            bin_base,
            classes: tokens.iter().map(|(_, c)| *c).collect(),
            tokens: tokens.into_iter().map(|(s, _)| s).collect(),
            index,
        }
    }

    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn class(&self, id: u32) -> Option<TokenClass> {
        self.classes.get(id as usize).copied()
    }

    pub fn modality_token(&self, m: Modality) -> u32 {
        self.modality_ids[m.index()]
    }

    /// Stable 64-bit FNV-1a digest of the token table.
    pub fn hash(&self) -> u64 {
        let mut h = crate::fnv::Fnv64::new();
        for t in &self.tokens {
            h.write(t.as_bytes());
            h.write(b"\n");
        }
        h.finish()
    }

    /// Word-level tokenization. A trailing `?` is split off its word. Every
    /// unknown word is reported.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, CodecError> {
        let mut ids = Vec::new();
        let mut unknown = Vec::new();
        for word in text.split_whitespace() {
            let (word, question) = match word.strip_suffix('?') {
                Some(w) if !w.is_empty() => (w, true),
                _ => (word, false),
            };
            match self.id(word) {
                Some(id) => ids.push(id),
                None => unknown.push(word.to_string()),
            }
            if question {
                ids.push(self.index["?"]);
            }
        }
        if unknown.is_empty() {
            Ok(ids)
        } else {
            Err(CodecError::UnknownWords(unknown))
        }
    }

    /// Space-joined token strings.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect();
        words.join(" ")
    }

    fn coord(&self, axis: char, v: i32) -> u32 {
        self.index[&format!("{axis}{v}")]
    }

    pub fn identity(&self, shape: Shape, color: Color) -> u32 {
        self.index[&identity_token(shape, color)]
    }

    /// Three tokens `[dx, dy, grip]`.
    pub fn encode_action(&self, a: Action) -> [u32; 3] {
        match self.bin_base {
            None => [
                self.axis_base + (a.dx + 1) as u32,
                self.axis_base + 3 + (a.dy + 1) as u32,
                self.axis_base + if a.grip == Grip::Open { 6 } else { 7 },
            ],
            Some(base) => {
                let k = self.config.action_bins;
                let bin = |v: f64| base + bin_action(v, k).expect("action components lie in [-1, 1]");
                let grip = if a.grip == Grip::Open { -1.0 } else { 1.0 };
                [bin(a.dx as f64), bin(a.dy as f64), bin(grip)]
            }
        }
    }

    /// Inverse of [`encode_action`](Self::encode_action); `None` for anything
    /// that is not a well-formed action triple.
    pub fn decode_action(&self, ids: &[u32]) -> Option<Action> {
        let [dx, dy, g] = ids else { return None };
        match self.bin_base {
            None => {
                let rel = |id: u32, lo: u32| id.checked_sub(self.axis_base + lo).filter(|&r| r < 3);
                let dx = rel(*dx, 0)? as i8 - 1;
                let dy = rel(*dy, 3)? as i8 - 1;
                let grip = match g.checked_sub(self.axis_base)? {
                    6 => Grip::Open,
                    7 => Grip::Closed,
                    _ => return None,
                };
                Some(Action::new(dx, dy, grip))
            }
            Some(base) => {
                let k = self.config.action_bins;
                let value = |id: u32| {
                    let b = id.checked_sub(base).filter(|&b| b < k)?;
                    let v = unbin_action(b, k).ok()?;
                    Some(libm::round(v) as i8)
                };
                let (dx, dy, g) = (value(*dx)?, value(*dy)?, value(*g)?);
                let grip = match g {
                    -1 => Grip::Open,
                    1 => Grip::Closed,
                    _ => return None,
                };
                Some(Action::new(dx, dy, grip))
            }
        }
    }

    pub fn is_action_token(&self, id: u32) -> bool {
        self.class(id) == Some(TokenClass::Action)
    }
}

/// Scene tokens: per object `(shape, color, x, y, level)` in id order, then
/// the gripper `(x, y, open|closed, held identity|none)`.
pub fn observe(vocab: &Vocabulary, state: &WorldState) -> Vec<u32> {
    let mut objects: Vec<_> = state.objects.iter().collect();
    objects.sort_by_key(|o| o.id);
    let mut out = Vec::with_capacity(objects.len() * 5 + 4);
    for o in objects {
        out.push(vocab.index[o.shape.word()]);
        out.push(vocab.index[o.color.word()]);
        match state.locate(o.id) {
            Some(Location::Stack { pos, level }) => {
                out.push(vocab.coord('x', pos.x));
                out.push(vocab.coord('y', pos.y));
                out.push(vocab.index[&format!("l{level}")]);
            }
            _ => {
                out.push(vocab.coord('x', state.gripper_pos.x));
                out.push(vocab.coord('y', state.gripper_pos.y));
                out.push(vocab.index["held"]);
            }
        }
    }
    out.push(vocab.coord('x', state.gripper_pos.x));
    out.push(vocab.coord('y', state.gripper_pos.y));
    out.push(vocab.index[if state.gripper_state == Grip::Open { "open" } else { "closed" }]);
    let held = state.held.and_then(|id| state.object(id));
    out.push(match held {
        Some(o) => vocab.identity(o.shape, o.color),
        None => vocab.index["none"],
    });
    out
}

pub fn prompt_text(task: &TaskSpec) -> String {
    format!("What should the robot do to {}?", task.text)
}

pub fn render_prompt(vocab: &Vocabulary, task: &TaskSpec) -> Result<Vec<u32>, CodecError> {
    vocab.tokenize(&prompt_text(task))
}

pub fn render_thought_text(t: &Thought, format: ThoughtFormat) -> String {
    let mut s = String::new();
    if let (ThoughtFormat::Extended, Some(plan)) = (format, &t.plan_text) {
        s.push_str("plan: ");
        s.push_str(plan);
        s.push_str(" ; ");
    }
    s.push_str("subtask: ");
    s.push_str(&t.subtask_text);
    if let Some(label) = &t.move_label {
        s.push_str(" ; move: ");
        s.push_str(label);
    }
    s
}

fn valid_label(label: &str) -> bool {
    let words: Vec<&str> = label.split(' ').collect();
    if words.iter().any(|w| !MOVE_WORDS.contains(w)) {
        return false;
    }
    match words.as_slice() {
        ["close"] => true,
        [x] => matches!(*x, "left" | "right" | "forward" | "backward"),
        [x, y] => matches!(*x, "left" | "right") && matches!(*y, "forward" | "backward"),
        _ => false,
    }
}

/// Exact inverse of [`render_thought_text`] on well-formed strings.
pub fn parse_thought_text(s: &str) -> Result<Thought, CodecError> {
    let err = |position: usize, message: &str| CodecError::Parse { position, message: message.to_string() };
    let mut plan_text = None;
    let mut subtask_text = None;
    let mut move_label = None;
    let mut offset = 0usize;
    for (i, segment) in s.split(" ; ").enumerate() {
        let at = offset;
        offset += segment.len() + 3;
        if let Some(rest) = segment.strip_prefix("plan: ") {
            if i != 0 || rest.is_empty() {
                return Err(err(at, "plan clause must come first and be non-empty"));
            }
            plan_text = Some(rest.to_string());
        } else if let Some(rest) = segment.strip_prefix("subtask: ") {
            if subtask_text.is_some() || rest.is_empty() || rest.contains(';') {
                return Err(err(at, "malformed subtask clause"));
            }
            subtask_text = Some(rest.to_string());
        } else if let Some(rest) = segment.strip_prefix("move: ") {
            if subtask_text.is_none() || move_label.is_some() {
                return Err(err(at, "move clause must follow the subtask clause"));
            }
            if !valid_label(rest) {
                return Err(err(at + 6, "invalid direction label"));
            }
            move_label = Some(rest.to_string());
        } else {
            return Err(err(at, "expected `plan:`, `subtask:` or `move:`"));
        }
    }
    let subtask_text = subtask_text.ok_or_else(|| err(0, "missing subtask clause"))?;
    if subtask_text.split(' ').any(str::is_empty) {
        return Err(err(0, "subtask text has irregular spacing"));
    }
    Ok(Thought { subtask_text, move_label, plan_text })
}

pub fn render_thought(vocab: &Vocabulary, t: &Thought, format: ThoughtFormat) -> Result<Vec<u32>, CodecError> {
    vocab.tokenize(&render_thought_text(t, format))
}

pub fn parse_thought(vocab: &Vocabulary, ids: &[u32]) -> Result<Thought, CodecError> {
    if let Some(&bad) = ids.iter().find(|&&i| vocab.class(i) != Some(TokenClass::Word) && vocab.class(i) != Some(TokenClass::Coordinate)) {
        return Err(CodecError::Parse {
            position: 0,
            message: format!("token `{}` cannot appear in a thought", vocab.token(bad).unwrap_or("<unk>")),
        });
    }
    parse_thought_text(&vocab.detokenize(ids))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub modality: Modality,
}

impl TokenSample {
    /// Teacher-forced view over `input ++ target`: `tokens[p]` predicts
    /// `labels[p]`, counted in the loss iff `mask[p]`.
    pub fn teacher_forced(&self) -> (Vec<u32>, Vec<u32>, Vec<bool>) {
        let n_in = self.input.len();
        let mut tokens = self.input.clone();
        tokens.extend_from_slice(&self.target[..self.target.len().saturating_sub(1)]);
        let mut labels: Vec<u32> = self.input[1..].to_vec();
        labels.extend_from_slice(&self.target);
        let mut mask = alloc::vec![false; n_in - 1];
        mask.extend_from_slice(&self.loss_mask);
        (tokens, labels, mask)
    }

    pub fn len(&self) -> usize {
        self.input.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty() && self.target.is_empty()
    }
}

/// Action tokens for `chunk` consecutive steps from `t`, repeating the final
/// action past the end of the episode.
pub fn action_chunk(vocab: &Vocabulary, demo: &Demonstration, t: usize, chunk: usize) -> Vec<u32> {
    let last = demo.steps.len() - 1;
    (0..chunk)
        .flat_map(|i| vocab.encode_action(demo.steps[(t + i).min(last)].action))
        .collect()
}

/// Builds the sample for step `t` of `demo` under `modality`.
pub fn assemble(
    vocab: &Vocabulary,
    demo: &Demonstration,
    t: usize,
    modality: Modality,
    cfg: &ModalityConfig,
) -> Result<TokenSample, CodecError> {
    let step = demo
        .steps
        .get(t)
        .ok_or_else(|| CodecError::Range(format!("step {t} outside a {}-step episode", demo.steps.len())))?;
    let thought_tokens = || match &step.thought {
        Some(th) => render_thought(vocab, th, cfg.thought_format),
        None => Err(CodecError::AnnotationMissing { step: t, modality }),
    };
    let actions = action_chunk(vocab, demo, t, cfg.chunk_size);

    let mut input = alloc::vec![vocab.bos];
    input.extend(observe(vocab, &step.observation));
    let mut target = Vec::new();
    match modality {
        Modality::Act => {
            input.extend(render_prompt(vocab, &demo.task)?);
        }
        Modality::Think => {
            input.extend(render_prompt(vocab, &demo.task)?);
            target.extend(thought_tokens()?);
            target.push(vocab.sep);
        }
        Modality::Follow => {
            input.extend(thought_tokens()?);
        }
    }
    input.push(vocab.modality_token(modality));
    target.extend(actions);
    target.push(vocab.eos);
    let loss_mask = alloc::vec![true; target.len()];
    Ok(TokenSample { input, target, loss_mask, modality })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{demo, OracleConfig};
    use crate::world::{reset, GridPos, ObjectDef, ObjectId, Relation, TaskFamily, WorldConfig};
    use alloc::vec;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(VocabConfig::new(8, &ModalityConfig::default()))
    }

    fn brute_bin(v: f64, k: u32) -> u32 {
        // Smallest bin whose upper edge exceeds v, scanning edges directly.
        (0..k).find(|&b| v < -1.0 + 2.0 * (b + 1) as f64 / k as f64).unwrap_or(k - 1)
    }

    #[test]
    fn binning_boundaries() {
        assert_eq!(bin_action(-1.0, 256).unwrap(), 0);
        assert_eq!(bin_action(1.0, 256).unwrap(), 255);
        assert_eq!(bin_action(0.0, 256).unwrap(), 128);
        assert_eq!(brute_bin(0.0, 256), 128);
        assert!(bin_action(1.5, 256).is_err());
        assert!(bin_action(f64::NAN, 256).is_err());
        assert!(bin_action(0.0, 1).is_err());
    }

    #[test]
    fn binning_matches_edge_scan() {
        for k in [2u32, 3, 7, 256] {
            for i in 0..=2000 {
                let v = -1.0 + 2.0 * i as f64 / 2000.0;
                assert_eq!(bin_action(v, k).unwrap(), brute_bin(v, k), "v={v} k={k}");
            }
        }
    }

    #[test]
    fn unbinning_centers() {
        assert_eq!(unbin_action(0, 2).unwrap(), -0.5);
        assert_eq!(unbin_action(255, 256).unwrap(), 0.99609375);
        assert!(unbin_action(256, 256).is_err());
    }

    #[test]
    fn dense_round_trip_error_bounded() {
        let k = 256;
        let n = 100_000;
        let mut worst: f64 = 0.0;
        for i in 0..=n {
            let v = -1.0 + 2.0 * i as f64 / n as f64;
            let r = unbin_action(bin_action(v, k).unwrap(), k).unwrap();
            worst = worst.max((r - v).abs());
        }
        assert!(worst <= 1.0 / k as f64, "{worst}");
    }

    proptest! {
        #[test]
        fn binning_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0, k in 2u32..512) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bin_action(lo, k).unwrap() <= bin_action(hi, k).unwrap());
        }

        #[test]
        fn thought_round_trip(
            subject in 0usize..20,
            reference in 0usize..20,
            rel in 0usize..5,
            kind in 0usize..4,
            dx in -3i32..=3,
            dy in -3i32..=3,
            extended in any::<bool>(),
        ) {
            use crate::oracle::{move_label, Subtask, SubtaskKind};
            let all: Vec<ObjectDef> = (0..20)
                .map(|i| ObjectDef { id: ObjectId(i as u32), shape: Shape::ALL[i / 5], color: Color::ALL[i % 5] })
                .collect();
            let kinds = [SubtaskKind::MoveTo, SubtaskKind::PickUp, SubtaskKind::CarryTo, SubtaskKind::Place];
            let relation = Relation::ALL.get(rel).copied();
            let st = Subtask::new(kinds[kind], ObjectId(subject as u32), Some(ObjectId(reference as u32)), relation, &all);
            let label = st.kind.is_moving().then(|| move_label(dx, dy, 1));
            let format = if extended { ThoughtFormat::Extended } else { ThoughtFormat::Short };
            let plan_text = extended.then(|| String::from("carry place"));
            let th = Thought { subtask_text: st.text, move_label: label, plan_text };
            let v = vocab();
            let toks = render_thought(&v, &th, format).unwrap();
            prop_assert_eq!(parse_thought(&v, &toks).unwrap(), th.clone());
            prop_assert_eq!(parse_thought_text(&render_thought_text(&th, format)).unwrap(), th);
        }
    }

    #[test]
    fn thought_template() {
        let th = Thought {
            subtask_text: "carry the red cube to left of the blue cube".into(),
            move_label: Some("left forward".into()),
            plan_text: None,
        };
        let s = render_thought_text(&th, ThoughtFormat::Short);
        assert_eq!(s, "subtask: carry the red cube to left of the blue cube ; move: left forward");
        assert_eq!(parse_thought_text(&s).unwrap(), th);
        let pick = Thought { subtask_text: "pick up the red cube".into(), move_label: None, plan_text: None };
        assert!(!render_thought_text(&pick, ThoughtFormat::Short).contains("move:"));
    }

    #[test]
    fn malformed_thoughts_report_position() {
        match parse_thought_text("subtask: move to the red cube ; move: sideways") {
            Err(CodecError::Parse { position, .. }) => assert_eq!(position, 32 + 6),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_thought_text("hello"), Err(CodecError::Parse { position: 0, .. })));
        assert!(parse_thought_text("move: left").is_err());
        assert!(parse_thought_text("subtask: a ; move: forward left").is_err());
    }

    #[test]
    fn observation_layout() {
        let v = vocab();
        let s = reset(&WorldConfig::default(), TaskFamily::PlaceAt, 2, 0).unwrap();
        let obs = observe(&v, &s);
        assert_eq!(obs.len(), 2 * 5 + 4);
        assert_eq!(*obs.last().unwrap(), v.id("none").unwrap());

        let mut shuffled = s.clone();
        shuffled.objects.reverse();
        assert_eq!(observe(&v, &shuffled), obs);

        let mut holding = s.clone();
        let subject = holding.task.subject;
        holding.gripper_pos = holding.position_of(subject).unwrap();
        let holding = crate::world::step(&holding, Action::new(0, 0, Grip::Closed));
        let o = holding.object(subject).unwrap();
        let obs = observe(&v, &holding);
        assert_eq!(*obs.last().unwrap(), v.identity(o.shape, o.color));
    }

    #[test]
    fn prompt_template_and_vocabulary_errors() {
        let v = vocab();
        let s = reset(&WorldConfig::default(), TaskFamily::PlaceAt, 2, 0).unwrap();
        let p = render_prompt(&v, &s.task).unwrap();
        assert_eq!(v.detokenize(&p[..6]), "What should the robot do to");
        assert_eq!(*p.last().unwrap(), v.id("?").unwrap());
        assert_eq!(render_prompt(&v, &s.task).unwrap(), p);
        let mut bad = s.task.clone();
        bad.text = "place the red teapot left of the blue cube".into();
        assert_eq!(render_prompt(&v, &bad), Err(CodecError::UnknownWords(vec!["teapot".into()])));
    }

    #[test]
    fn special_tokens_are_distinct() {
        let v = vocab();
        let specials = [
            v.pad,
            v.bos,
            v.eos,
            v.sep,
            v.modality_token(Modality::Act),
            v.modality_token(Modality::Think),
            v.modality_token(Modality::Follow),
        ];
        for (i, a) in specials.iter().enumerate() {
            for b in &specials[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(Vocabulary::new(*v.config()).hash(), v.hash());
        let binned = Vocabulary::new(VocabConfig { action_encoding: ActionEncoding::Binned, ..*v.config() });
        assert_ne!(binned.hash(), v.hash());
        assert_eq!(binned.len(), v.len() + 256);
    }

    #[test]
    fn action_codec_round_trips_both_encodings() {
        for enc in [ActionEncoding::Axis, ActionEncoding::Binned] {
            let v = Vocabulary::new(VocabConfig { grid_size: 8, action_encoding: enc, action_bins: 256 });
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for grip in [Grip::Open, Grip::Closed] {
                        let a = Action::new(dx, dy, grip);
                        let toks = v.encode_action(a);
                        assert!(toks.iter().all(|&t| v.is_action_token(t)));
                        assert_eq!(v.decode_action(&toks), Some(a));
                    }
                }
            }
            assert_eq!(v.decode_action(&[v.eos, v.eos, v.eos]), None);
        }
        let v = Vocabulary::new(VocabConfig { grid_size: 8, action_encoding: ActionEncoding::Binned, action_bins: 256 });
        let toks = v.encode_action(Action::new(-1, 0, Grip::Closed));
        assert_eq!(v.detokenize(&toks), "bin0 bin128 bin255");
    }

    fn sample_demo() -> Demonstration {
        demo(&WorldConfig::default(), &OracleConfig::default(), TaskFamily::PlaceAt, 2, 0, true).unwrap()
    }

    #[test]
    fn act_layout() {
        let v = vocab();
        let d = sample_demo();
        let s = assemble(&v, &d, 0, Modality::Act, &ModalityConfig::default()).unwrap();
        assert_eq!(s.input[0], v.bos);
        assert_eq!(*s.input.last().unwrap(), v.modality_token(Modality::Act));
        assert_eq!(s.target.len(), 4);
        assert_eq!(*s.target.last().unwrap(), v.eos);
        assert!(s.loss_mask.iter().all(|&m| m));
    }

    #[test]
    fn think_layout() {
        let v = vocab();
        let d = sample_demo();
        let s = assemble(&v, &d, 0, Modality::Think, &ModalityConfig::default()).unwrap();
        let thought = render_thought(&v, d.steps[0].thought.as_ref().unwrap(), ThoughtFormat::Short).unwrap();
        let mut expected = thought.clone();
        expected.push(v.sep);
        expected.extend(v.encode_action(d.steps[0].action));
        expected.push(v.eos);
        assert_eq!(s.target, expected);
        assert_eq!(s.target.len(), thought.len() + 1 + 3 + 1);
        assert_eq!(s.loss_mask.len(), s.target.len());
    }

    #[test]
    fn follow_excludes_prompt() {
        let v = vocab();
        let d = sample_demo();
        let s = assemble(&v, &d, 2, Modality::Follow, &ModalityConfig::default()).unwrap();
        let what = v.id("What").unwrap();
        let robot = v.id("robot").unwrap();
        assert!(!s.input.contains(&what) && !s.input.contains(&robot));
        assert_eq!(*s.input.last().unwrap(), v.modality_token(Modality::Follow));
        let modality_count = s.input.iter().filter(|&&t| v.class(t) == Some(TokenClass::Modality)).count();
        assert_eq!(modality_count, 1);
    }

    #[test]
    fn thoughtless_steps_only_support_act() {
        let v = vocab();
        let d = demo(&WorldConfig::default(), &OracleConfig::default(), TaskFamily::PlaceAt, 2, 0, false).unwrap();
        assert!(assemble(&v, &d, 0, Modality::Act, &ModalityConfig::default()).is_ok());
        for m in [Modality::Think, Modality::Follow] {
            assert!(matches!(
                assemble(&v, &d, 0, m, &ModalityConfig::default()),
                Err(CodecError::AnnotationMissing { .. })
            ));
        }
    }

    #[test]
    fn chunks_pad_with_final_action() {
        let v = vocab();
        let d = sample_demo();
        let cfg = ModalityConfig { chunk_size: 3, ..ModalityConfig::default() };
        let last = d.steps.len() - 1;
        let s = assemble(&v, &d, last, Modality::Act, &cfg).unwrap();
        let a = v.encode_action(d.steps[last].action);
        assert_eq!(&s.target[..9], &[a, a, a].concat()[..]);
        assert_eq!(s.target.len(), 10);
    }

    #[test]
    fn teacher_forced_view_masks_inputs() {
        let v = vocab();
        let d = sample_demo();
        let s = assemble(&v, &d, 1, Modality::Think, &ModalityConfig::default()).unwrap();
        let (tokens, labels, mask) = s.teacher_forced();
        assert_eq!(tokens.len(), s.len() - 1);
        assert_eq!(labels.len(), tokens.len());
        assert_eq!(mask.iter().filter(|&&m| m).count(), s.target.len());
        assert!(mask[..s.input.len() - 1].iter().all(|&m| !m));
        assert_eq!(&labels[s.input.len() - 1..], &s.target[..]);
    }

    #[test]
    fn modality_config_validation() {
        assert!(ModalityConfig::default().validate().is_ok());
        assert!(ModalityConfig::default().with_weights(0.5, 0.5, 0.1).validate().is_err());
        assert!(ModalityConfig::default().with_weights(-0.5, 1.0, 0.5).validate().is_err());
        assert!(ModalityConfig { chunk_size: 0, ..ModalityConfig::default() }.validate().is_err());
    }

    #[test]
    fn scene_positions_are_tokens() {
        let v = vocab();
        let s = reset(&WorldConfig::default(), TaskFamily::PlaceAt, 2, 3).unwrap();
        let obs = observe(&v, &s);
        let o = &s.objects[0];
        let pos: GridPos = s.position_of(o.id).unwrap();
        assert_eq!(v.token(obs[2]).unwrap(), format!("x{}", pos.x));
        assert_eq!(v.token(obs[3]).unwrap(), format!("y{}", pos.y));
        assert_eq!(v.token(obs[4]).unwrap(), "l0");
    }
}
