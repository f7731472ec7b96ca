//! Hybrid training: every sample in a batch gets its own modality draw, so
//! one optimizer step mixes act, think and follow targets in the configured
//! proportions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{assemble, CodecError, Modality, ModalityConfig, TokenSample, Vocabulary};
use crate::net::{ModelParameters, NetConfig, NetError};
use crate::oracle::Demonstration;
use crate::rng::{self, Rng, RngState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("training diverged in epoch {epoch} at batch {batch}: {detail}")]
    Diverged { epoch: u32, batch: usize, detail: String },
}

/// Categorical draw over the three modalities. Exactly one uniform is
/// consumed per call; a step without a thought can only be trained as act.
pub fn sample_modality<R: RngCore + ?Sized>(cfg: &ModalityConfig, has_thought: bool, rng: &mut R) -> Modality {
    let u = rng::unit(rng);
    if !has_thought {
        return Modality::Act;
    }
    let w = cfg.weights();
    let mut acc = 0.0;
    for m in Modality::ALL {
        acc += w[m.index()];
        if u < acc {
            return m;
        }
    }
    // Weights summing to slightly under one leave a sliver; give it to the
    // last modality that can actually be drawn.
    *Modality::ALL.iter().rev().find(|m| w[m.index()] > 0.0).unwrap_or(&Modality::Act)
}

/// Demonstrations plus a flat index of every `(episode, step)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    demos: Vec<Demonstration>,
    index: Vec<(u32, u32)>,
    annotated_steps: usize,
}

impl Dataset {
    pub fn new(demos: Vec<Demonstration>) -> Result<Self, TrainError> {
        let mut index = Vec::new();
        let mut annotated_steps = 0;
        for (e, d) in demos.iter().enumerate() {
            for (s, step) in d.steps.iter().enumerate() {
                index.push((e as u32, s as u32));
                annotated_steps += step.thought.is_some() as usize;
            }
        }
        if index.is_empty() {
            return Err(TrainError::Dataset(String::from("dataset has no steps")));
        }
        Ok(Self { demos, index, annotated_steps })
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn n_steps(&self) -> usize {
        self.index.len()
    }

    pub fn annotated_steps(&self) -> usize {
        self.annotated_steps
    }

    pub fn step_ref(&self, i: usize) -> (usize, usize) {
        let (e, s) = self.index[i];
        (e as usize, s as usize)
    }

    /// Fails when no step could ever be drawn under `cfg`.
    pub fn check_satisfiable(&self, cfg: &ModalityConfig) -> Result<(), TrainError> {
        cfg.validate()?;
        if self.annotated_steps == 0 && cfg.w_act == 0.0 {
            return Err(TrainError::Config(String::from(
                "no annotated steps in the dataset and w_act = 0: no sample can be drawn",
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub index: RngState,
    pub modality: RngState,
}

/// Seeded batch stream. Step indices and modality draws come from separate
/// generators so the index sequence does not depend on the weights.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    index_rng: Rng,
    modality_rng: Rng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self { index_rng: rng::seeded(seed, 0x1d), modality_rng: rng::seeded(seed, 0x3d) }
    }

    pub fn state(&self) -> SamplerState {
        SamplerState { index: RngState::capture(&self.index_rng), modality: RngState::capture(&self.modality_rng) }
    }

    pub fn restore(state: &SamplerState) -> Self {
        Self { index_rng: state.index.restore(), modality_rng: state.modality.restore() }
    }

    fn next_index(&mut self, dataset: &Dataset) -> usize {
        rng::below(&mut self.index_rng, dataset.n_steps())
    }

    pub fn make_batch(
        &mut self,
        dataset: &Dataset,
        vocab: &Vocabulary,
        cfg: &ModalityConfig,
        batch_size: usize,
    ) -> Result<Vec<TokenSample>, TrainError> {
        dataset.check_satisfiable(cfg)?;
        (0..batch_size)
            .map(|_| {
                let (e, s) = dataset.step_ref(self.next_index(dataset));
                let demo = &dataset.demos[e];
                let m = sample_modality(cfg, demo.steps[s].thought.is_some(), &mut self.modality_rng);
                Ok(assemble(vocab, demo, s, m, cfg)?)
            })
            .collect()
    }
}

/// Single-modality batch stream (standard act-only or think-only training).
#[derive(Debug, Clone)]
pub struct FixedModalitySampler {
    modality: Modality,
    index_rng: Rng,
}

impl FixedModalitySampler {
    pub fn new(modality: Modality, seed: u64) -> Self {
        Self { modality, index_rng: rng::seeded(seed, 0x1d) }
    }

    pub fn make_batch(
        &mut self,
        dataset: &Dataset,
        vocab: &Vocabulary,
        cfg: &ModalityConfig,
        batch_size: usize,
    ) -> Result<Vec<TokenSample>, TrainError> {
        (0..batch_size)
            .map(|_| {
                let (e, s) = dataset.step_ref(rng::below(&mut self.index_rng, dataset.n_steps()));
                Ok(assemble(vocab, &dataset.demos[e], s, self.modality, cfg)?)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], h: &OptimizerConfig) {
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - libm::pow(h.beta1, t);
        let c2 = 1.0 - libm::pow(h.beta2, t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            // Decoupled decay: shrinks weights independently of the gradient scale.
            params[i] -= h.learning_rate * (mh / (libm::sqrt(vh) + h.eps) + h.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    // Large-model fine-tuning used 2e-5; a from-scratch toy model needs far more.
    fn default() -> Self {
        Self { learning_rate: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Architecture knobs; vocabulary size and seed are filled in at init.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context_len: usize,
    pub init_scale: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 32, n_heads: 4, n_layers: 3, context_len: 128, init_scale: 0.02, tie_embeddings: false }
    }
}

impl ModelConfig {
    pub fn net_config(&self, vocab_size: usize, seed: u64) -> NetConfig {
        NetConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            context_len: self.context_len,
            init_scale: self.init_scale,
            seed,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub modality: ModalityConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: u32,
    pub checkpoint_epochs: Vec<u32>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            modality: ModalityConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            // Same relative spacing as checkpoints taken at epochs 5, 7 and 10.
            epochs: 60,
            checkpoint_epochs: vec![30, 42, 60],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.modality.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config(String::from("batch_size must be at least 1")));
        }
        if let Some(e) = self.checkpoint_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(TrainError::Config(format!("checkpoint epoch {e} outside 1..={}", self.epochs)));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(TrainError::Config(format!("bad optimizer settings {o:?}")));
        }
        Ok(())
    }

    /// Optimizer steps per epoch: enough batches to cover the dataset once in expectation.
    pub fn batches_per_epoch(&self, dataset: &Dataset) -> usize {
        dataset.n_steps().div_ceil(self.batch_size)
    }
}

/// Loss totals for one epoch, split by modality.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModalityLosses {
    pub sum: [f64; 3],
    pub count: [u64; 3],
}

impl ModalityLosses {
    pub fn add(&mut self, m: Modality, loss: f64) {
        self.sum[m.index()] += loss;
        self.count[m.index()] += 1;
    }

    pub fn mean(&self, m: Modality) -> Option<f64> {
        let c = self.count[m.index()];
        (c > 0).then(|| self.sum[m.index()] / c as f64)
    }

    pub fn overall(&self) -> Option<f64> {
        let c: u64 = self.count.iter().sum();
        (c > 0).then(|| self.sum.iter().sum::<f64>() / c as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: ModelParameters,
    pub optimizer: Adam,
    pub epoch: u32,
    pub sampler: BatchSampler,
    pub last_epoch: ModalityLosses,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig, vocab_size: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = ModelParameters::init(cfg.model.net_config(vocab_size, cfg.seed))?;
        let optimizer = Adam::new(params.len());
        Ok(Self { params, optimizer, epoch: 0, sampler: BatchSampler::new(cfg.seed), last_epoch: ModalityLosses::default() })
    }

    /// One epoch of Monte Carlo hybrid updates. On divergence the state is
    /// left untouched and the error names the offending batch.
    pub fn train_epoch(
        &mut self,
        dataset: &Dataset,
        vocab: &Vocabulary,
        cfg: &TrainConfig,
    ) -> Result<ModalityLosses, TrainError> {
        dataset.check_satisfiable(&cfg.modality)?;
        let epoch = self.epoch + 1;
        let mut params = self.params.clone();
        let mut optimizer = self.optimizer.clone();
        let mut sampler = self.sampler.clone();
        let mut losses = ModalityLosses::default();
        let mut grad = vec![0.0; params.len()];
        for batch_no in 0..cfg.batches_per_epoch(dataset) {
            let batch = sampler.make_batch(dataset, vocab, &cfg.modality, cfg.batch_size)?;
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for sample in &batch {
                let loss = params.sample_loss_and_grad(sample, &mut grad, scale).map_err(|e| match e {
                    NetError::NonFinite(detail) => TrainError::Diverged { epoch, batch: batch_no, detail },
                    other => TrainError::Net(other),
                })?;
                losses.add(sample.modality, loss);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch, batch: batch_no, detail: String::from("gradient") });
            }
            optimizer.step(params.flat_mut(), &grad, &cfg.optimizer);
            if params.flat().iter().any(|p| !p.is_finite()) {
                return Err(TrainError::Diverged { epoch, batch: batch_no, detail: String::from("parameters") });
            }
        }
        self.params = params;
        self.optimizer = optimizer;
        self.sampler = sampler;
        self.epoch = epoch;
        self.last_epoch = losses;
        Ok(losses)
    }
}

/// Mean loss of `samples` at fixed parameters.
pub fn mean_loss(params: &ModelParameters, samples: &[TokenSample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in samples {
        total += params.loss(s)?;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::VocabConfig;
    use crate::oracle::{demo, OracleConfig};
    use crate::world::{TaskFamily, WorldConfig};

    fn corpus(n: u64, annotate_even_only: bool) -> Dataset {
        let demos = (0..n)
            .map(|seed| {
                let ann = !annotate_even_only || seed % 2 == 0;
                demo(&WorldConfig::default(), &OracleConfig::default(), TaskFamily::PlaceAt, 2, seed, ann).unwrap()
            })
            .collect();
        Dataset::new(demos).unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(VocabConfig::new(8, &ModalityConfig::default()))
    }

    #[test]
    fn modality_frequencies_match_weights() {
        let cfg = ModalityConfig::default();
        let mut r = rng::seeded(1, 0);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_modality(&cfg, true, &mut r).index()] += 1;
        }
        for (c, w) in counts.iter().zip(cfg.weights()) {
            assert!((*c as f64 / n as f64 - w).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn degenerate_weights() {
        let mut r = rng::seeded(2, 0);
        let act = ModalityConfig::default().with_weights(1.0, 0.0, 0.0);
        let think = ModalityConfig::default().with_weights(0.0, 1.0, 0.0);
        let follow = ModalityConfig::default().with_weights(0.0, 0.0, 1.0);
        for _ in 0..2000 {
            assert_eq!(sample_modality(&act, true, &mut r), Modality::Act);
            assert_eq!(sample_modality(&think, true, &mut r), Modality::Think);
            assert_eq!(sample_modality(&follow, true, &mut r), Modality::Follow);
            assert_eq!(sample_modality(&think, false, &mut r), Modality::Act);
        }
    }

    #[test]
    fn batch_split_tracks_binomial_mean() {
        let data = corpus(6, false);
        let v = vocab();
        let cfg = ModalityConfig::default();
        let mut s = BatchSampler::new(3);
        let mut totals = [0usize; 3];
        let batches = 1000;
        for _ in 0..batches {
            for x in s.make_batch(&data, &v, &cfg, 32).unwrap() {
                totals[x.modality.index()] += 1;
            }
        }
        for (t, expect) in totals.iter().zip([8.0, 16.0, 8.0]) {
            assert!((*t as f64 / batches as f64 - expect).abs() < 0.5, "{totals:?}");
        }
    }

    #[test]
    fn unannotated_episodes_fall_back_to_act() {
        let data = corpus(8, true);
        let v = vocab();
        let cfg = ModalityConfig::default().with_weights(0.0, 1.0, 0.0);
        let mut s = BatchSampler::new(4);
        let batch = s.make_batch(&data, &v, &cfg, 400).unwrap();
        let mut idx = BatchSampler::new(4);
        for x in &batch {
            let (e, _) = data.step_ref(idx.next_index(&data));
            let expect = if data.demos()[e].is_annotated() { Modality::Think } else { Modality::Act };
            assert_eq!(x.modality, expect);
        }
    }

    #[test]
    fn unsatisfiable_config_is_rejected() {
        let demos = (0..3)
            .map(|seed| {
                demo(&WorldConfig::default(), &OracleConfig::default(), TaskFamily::PlaceAt, 2, seed, false).unwrap()
            })
            .collect();
        let data = Dataset::new(demos).unwrap();
        let cfg = ModalityConfig::default().with_weights(0.0, 0.5, 0.5);
        let err = BatchSampler::new(0).make_batch(&data, &vocab(), &cfg, 4);
        assert!(matches!(err, Err(TrainError::Config(_))));
    }

    #[test]
    fn degenerate_streams_equal_dedicated_samplers() {
        let data = corpus(10, false);
        let v = vocab();
        for (w, m) in [((1.0, 0.0, 0.0), Modality::Act), ((0.0, 1.0, 0.0), Modality::Think)] {
            let cfg = ModalityConfig::default().with_weights(w.0, w.1, w.2);
            let mut hybrid = BatchSampler::new(9);
            let mut fixed = FixedModalitySampler::new(m, 9);
            for _ in 0..50 {
                assert_eq!(
                    hybrid.make_batch(&data, &v, &cfg, 32).unwrap(),
                    fixed.make_batch(&data, &v, &cfg, 32).unwrap()
                );
            }
        }
    }

    #[test]
    fn sampler_state_resumes_stream() {
        let data = corpus(4, false);
        let v = vocab();
        let cfg = ModalityConfig::default();
        let mut a = BatchSampler::new(5);
        a.make_batch(&data, &v, &cfg, 7).unwrap();
        let mut b = BatchSampler::restore(&a.state());
        assert_eq!(a.make_batch(&data, &v, &cfg, 32).unwrap(), b.make_batch(&data, &v, &cfg, 32).unwrap());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let h = OptimizerConfig::default();
        let mut p = vec![1.0, -2.0, 0.5];
        let mut a = Adam::new(3);
        a.step(&mut p, &[0.3, -4.0, 0.0], &h);
        assert!((p[0] - (1.0 - h.learning_rate)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + h.learning_rate)).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.checkpoint_epochs = vec![c.epochs + 1];
        assert!(c.validate().is_err());
        c.checkpoint_epochs.clear();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    fn small_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, ..ModelConfig::default() },
            batch_size: 8,
            epochs: 2,
            checkpoint_epochs: vec![],
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_all_modalities() {
        let data = corpus(3, false);
        let v = vocab();
        let cfg = small_train_config(1);
        let mut a = TrainerState::new(&cfg, v.len()).unwrap();
        let mut b = TrainerState::new(&cfg, v.len()).unwrap();
        for _ in 0..2 {
            let la = a.train_epoch(&data, &v, &cfg).unwrap();
            let lb = b.train_epoch(&data, &v, &cfg).unwrap();
            assert_eq!(la, lb);
            for m in Modality::ALL {
                assert!(la.mean(m).unwrap().is_finite());
            }
        }
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch, 2);
    }

    #[test]
    fn divergence_leaves_state_untouched() {
        let data = corpus(2, false);
        let v = vocab();
        let mut cfg = small_train_config(2);
        let mut st = TrainerState::new(&cfg, v.len()).unwrap();
        st.train_epoch(&data, &v, &cfg).unwrap();
        let before = st.params.clone();
        cfg.optimizer.learning_rate = f64::MAX;
        let err = st.train_epoch(&data, &v, &cfg);
        assert!(matches!(err, Err(TrainError::Diverged { .. })), "{err:?}");
        assert_eq!(st.params, before);
        assert_eq!(st.epoch, 1);
    }

    #[test]
    fn monte_carlo_objective_matches_weighted_sum() {
        // At fixed parameters the per-sample hybrid loss, averaged over the
        // modality draw, estimates w_a L_act + w_t L_think + w_f L_follow.
        let data = corpus(4, false);
        let v = vocab();
        let mcfg = ModalityConfig::default();
        let params = ModelParameters::init(
            ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, init_scale: 0.3, ..ModelConfig::default() }
                .net_config(v.len(), 3),
        )
        .unwrap();
        let per_mod: Vec<Vec<f64>> = Modality::ALL
            .iter()
            .map(|&m| {
                (0..data.n_steps())
                    .map(|i| {
                        let (e, s) = data.step_ref(i);
                        params.loss(&assemble(&v, &data.demos()[e], s, m, &mcfg).unwrap()).unwrap()
                    })
                    .collect()
            })
            .collect();
        let exact: f64 = mcfg
            .weights()
            .iter()
            .zip(&per_mod)
            .map(|(w, l)| w * l.iter().sum::<f64>() / l.len() as f64)
            .sum();

        let mut r = rng::seeded(17, 1);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let i = rng::below(&mut r, data.n_steps());
                let m = sample_modality(&mcfg, true, &mut r);
                per_mod[m.index()][i]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se = libm::sqrt(var / n as f64);
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }
}
