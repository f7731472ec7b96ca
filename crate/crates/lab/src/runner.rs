//! Drivers behind the CLI: data generation, training runs, evaluation,
//! the data-scaling sweep and the oracle-thought study.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hyt_core::codec::{ModalityConfig, VocabConfig, Vocabulary};
use hyt_core::eval::{
    default_max_steps, episode_specs, rollout, summarize, DecodeConfig, EpisodeResult, EpisodeSpec, Mode,
    Models, RolloutConfig, Summary,
};
use hyt_core::hyt::{Dataset, TrainConfig, TrainerState};
use hyt_core::net::ModelParameters;
use hyt_core::oracle::OracleConfig;
use hyt_core::world::{TaskFamily, WorldConfig};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, config_digest, Checkpoint};
use crate::config::{EvalRunConfig, GenConfig, OracleFollowConfig, Paradigm, SweepConfig, TrainRunConfig, Variant};
use crate::dataset::{self, DemoFile, GenSpec};
use crate::metrics::{self, EpochRecord};
use crate::{LabError, Result, WallClock};

pub fn gen_data(cfg: &GenConfig) -> Result<DemoFile> {
    cfg.world().validate(2).map_err(|e| LabError::Config(e.to_string()))?;
    let demos = dataset::generate(&cfg.world(), &cfg.oracle(), &cfg.tasks, cfg.seed_base, cfg.annotate_fraction)?;
    let file = DemoFile { grid_size: cfg.grid_size, thought_format: cfg.thought_format, demos };
    dataset::write(&cfg.out, &file)?;
    Ok(file)
}

pub fn vocabulary(grid_size: u8, modality: &ModalityConfig) -> Vocabulary {
    Vocabulary::new(VocabConfig::new(grid_size, modality))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub state: TrainerState,
    pub vocab: Vocabulary,
}

/// Checkpoint always rewritten after a completed epoch; it is the last good
/// state if a later epoch diverges.
pub const LAST: &str = "last.bin";

pub fn epoch_checkpoint(out_dir: &Path, epoch: u32) -> PathBuf {
    out_dir.join(format!("epoch-{epoch:03}.bin"))
}

/// Trains from scratch or resumes from `resume`; `stop_after` ends the run
/// early at that epoch (the state is checkpointed as usual).
pub fn train_on(
    demos: &DemoFile,
    out_dir: &Path,
    cfg: &TrainConfig,
    resume: Option<&Path>,
    stop_after: Option<u32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if demos.thought_format != cfg.modality.thought_format {
        return Err(LabError::Config(format!(
            "dataset thoughts are {:?} but training renders {:?}",
            demos.thought_format, cfg.modality.thought_format
        )));
    }
    let vocab = vocabulary(demos.grid_size, &cfg.modality);
    let data = Dataset::new(demos.demos.clone())?;
    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load_for(path, &vocab)?;
            if ck.header.train_config_digest != config_digest(cfg) {
                return Err(LabError::Incompatible(format!(
                    "{} was trained with a different config (digest {} vs {})",
                    path.display(),
                    ck.header.train_config_digest,
                    config_digest(cfg)
                )));
            }
            ck.into_trainer()?
        }
        None => TrainerState::new(cfg, vocab.len())?,
    };
    fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    checkpoint::write_manifest(&out_dir.join("vocab.json"), &vocab)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut written = Vec::new();
    let last_epoch = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while state.epoch < last_epoch {
        let t0 = Instant::now();
        let losses = state.train_epoch(&data, &vocab, cfg)?;
        let record = EpochRecord::new(state.epoch, &losses, t0.elapsed().as_secs_f64());
        let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        info!(
            "epoch {} loss {} (act {} think {} follow {}) {:.1}s",
            record.epoch,
            f(record.loss),
            f(record.loss_act),
            f(record.loss_think),
            f(record.loss_follow),
            record.wall_time
        );
        metrics::append(&metrics_path, &record)?;
        let ck = Checkpoint::from_trainer(&state, &vocab, cfg);
        ck.save(&out_dir.join(LAST))?;
        if cfg.checkpoint_epochs.contains(&state.epoch) {
            let p = epoch_checkpoint(out_dir, state.epoch);
            ck.save(&p)?;
            written.push(p);
        }
    }
    Ok(TrainOutcome { checkpoints: written, state, vocab })
}

pub fn train_run(cfg: &TrainRunConfig, resume: Option<&Path>, stop_after: Option<u32>) -> Result<TrainOutcome> {
    let demos = dataset::read(&cfg.dataset)?;
    train_on(&demos, &cfg.out_dir, &cfg.train, resume, stop_after)
}

/// Everything a rollout needs besides the episode list.
pub struct EvalContext<'a> {
    pub models: Models<'a>,
    pub vocab: &'a Vocabulary,
    pub modality: &'a ModalityConfig,
    pub oracle: OracleConfig,
    pub world: WorldConfig,
}

/// Runs episodes on the rayon pool; results come back in input order.
pub fn run_episodes(ctx: &EvalContext<'_>, specs: &[EpisodeSpec], rcfg: &RolloutConfig) -> Result<Vec<EpisodeResult>> {
    let clock = WallClock::new();
    specs
        .par_iter()
        .map(|&spec| {
            let mut cfg = *rcfg;
            if cfg.max_steps == 0 {
                cfg.max_steps = default_max_steps(&ctx.world, spec.n_objects);
            }
            Ok(rollout(ctx.models, ctx.vocab, ctx.modality, &ctx.oracle, &ctx.world, spec, &cfg, &clock)?)
        })
        .collect()
}

/// One CSV row of `hyt eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub family: TaskFamily,
    pub n_objects: usize,
    pub checkpoint: String,
    pub mode: Mode,
    pub oracle_substitution: bool,
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

impl EvalRow {
    fn new(v: Variant, checkpoint: String, mode: Mode, sub: bool, s: &Summary) -> Self {
        Self {
            family: v.family,
            n_objects: v.n_objects,
            checkpoint,
            mode,
            oracle_substitution: sub,
            episodes: s.episodes,
            invalid: s.invalid,
            successes: s.successes,
            success_rate: s.success_rate,
            stderr: s.stderr,
            mean_steps: s.mean_steps,
            tokens_per_step: s.tokens_per_step,
            seconds_per_step: s.seconds_per_step,
            obedience: s.obedience,
            malformed: s.malformed,
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| LabError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn evaluate(cfg: &EvalRunConfig) -> Result<Vec<EvalRow>> {
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let vocab = ck.vocabulary();
    ck.check_vocab(&vocab)?;
    let low = match &cfg.low_level_checkpoint {
        Some(p) => Some(Checkpoint::load_for(p, &vocab)?),
        None if cfg.mode == Mode::Hierarchical => {
            return Err(LabError::Config("hierarchical evaluation needs low_level_checkpoint".into()))
        }
        None => None,
    };
    let modality = ck.header.train.modality;
    let ctx = EvalContext {
        models: Models { primary: &ck.params, low_level: low.as_ref().map(|c| &c.params) },
        vocab: &vocab,
        modality: &modality,
        oracle: OracleConfig { d_close: cfg.d_close, d_key: 1, thought_format: modality.thought_format },
        world: WorldConfig { grid_size: vocab.config().grid_size },
    };
    let rcfg = RolloutConfig {
        mode: cfg.mode,
        max_steps: cfg.max_steps.unwrap_or(0),
        oracle_substitution: cfg.oracle_substitution,
        decode: cfg.decode,
    };
    let mut rows = Vec::new();
    for &v in &cfg.variants {
        let specs = episode_specs(v.family, v.n_objects, cfg.base_seed, cfg.n_episodes);
        let results = run_episodes(&ctx, &specs, &rcfg)?;
        rows.push(EvalRow::new(
            v,
            cfg.checkpoint.display().to_string(),
            cfg.mode,
            cfg.oracle_substitution,
            &summarize(&results),
        ));
    }
    if let Some(out) = &cfg.out {
        write_csv(out, &rows)?;
    }
    Ok(rows)
}

fn with_weights(cfg: &TrainConfig, w: [f64; 3]) -> TrainConfig {
    let mut c = cfg.clone();
    c.modality = c.modality.with_weights(w[0], w[1], w[2]);
    c
}

/// Demonstrations for one sweep size: every family gets `size` demos.
pub fn sweep_dataset(cfg: &SweepConfig, size: usize) -> Result<DemoFile> {
    let specs: Vec<GenSpec> =
        cfg.families.iter().map(|&family| GenSpec { family, n_objects: cfg.train_variant, count: size }).collect();
    let world = WorldConfig { grid_size: cfg.grid_size };
    let oracle_cfg = OracleConfig { thought_format: cfg.train.modality.thought_format, ..OracleConfig::default() };
    let demos = dataset::generate(&world, &oracle_cfg, &specs, cfg.data_seed_base, 1.0)?;
    Ok(DemoFile { grid_size: cfg.grid_size, thought_format: cfg.train.modality.thought_format, demos })
}

/// One evaluated cell of the sweep, appended to `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub size: usize,
    pub paradigm: Paradigm,
    pub seed: u64,
    pub family: TaskFamily,
    pub n_objects: usize,
    pub mode: Mode,
    pub summary: Summary,
    pub train_seconds: f64,
}

pub const SWEEP_RESULTS: &str = "results.jsonl";
pub const SWEEP_CONFIG: &str = "sweep.json";

fn train_cached(demos: &DemoFile, dir: &Path, cfg: &TrainConfig) -> Result<(ModelParameters, f64)> {
    let last = dir.join(LAST);
    if let Ok(ck) = Checkpoint::load(&last) {
        if ck.header.train_config_digest == config_digest(cfg) && ck.header.epoch == cfg.epochs {
            return Ok((ck.params, 0.0));
        }
    }
    let t0 = Instant::now();
    let out = train_on(demos, dir, cfg, None, None)?;
    Ok((out.state.params, t0.elapsed().as_secs_f64()))
}

pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepRecord>> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| LabError::io(&cfg.out_dir, e))?;
    let cfg_path = cfg.out_dir.join(SWEEP_CONFIG);
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg).expect("config serializes"))
        .map_err(|e| LabError::io(&cfg_path, e))?;
    let results_path = cfg.out_dir.join(SWEEP_RESULTS);
    let world = WorldConfig { grid_size: cfg.grid_size };
    let mut records = Vec::new();
    for &size in &cfg.sizes {
        let demos = sweep_dataset(cfg, size)?;
        for &seed in &cfg.seeds {
            let mut trained: BTreeMap<&str, (ModelParameters, f64)> = BTreeMap::new();
            let base = TrainConfig { seed, ..cfg.train.clone() };
            let dir = |name: &str| cfg.out_dir.join(format!("size-{size}")).join(name).join(format!("seed-{seed}"));
            let mut need = |name: &'static str, w: [f64; 3]| -> Result<()> {
                if !trained.contains_key(name) {
                    let r = train_cached(&demos, &dir(name), &with_weights(&base, w))?;
                    trained.insert(name, r);
                }
                Ok(())
            };
            for &p in &cfg.paradigms {
                match p {
                    Paradigm::Hyt => need("hyt", cfg.train.modality.weights())?,
                    Paradigm::ActOnly => need("act_only", [1.0, 0.0, 0.0])?,
                    Paradigm::ThinkOnly => need("think_only", [0.0, 1.0, 0.0])?,
                    Paradigm::Hierarchical => {
                        need("think_only", [0.0, 1.0, 0.0])?;
                        need("follow_only", [0.0, 0.0, 1.0])?;
                    }
                }
            }
            let vocab = vocabulary(cfg.grid_size, &cfg.train.modality);
            for &p in &cfg.paradigms {
                let (primary, low, mode, secs) = match p {
                    Paradigm::Hyt => (&trained["hyt"].0, None, Mode::Act, trained["hyt"].1),
                    Paradigm::ActOnly => (&trained["act_only"].0, None, Mode::Act, trained["act_only"].1),
                    Paradigm::ThinkOnly => (&trained["think_only"].0, None, Mode::Think, trained["think_only"].1),
                    Paradigm::Hierarchical => (
                        &trained["think_only"].0,
                        Some(&trained["follow_only"].0),
                        Mode::Hierarchical,
                        trained["think_only"].1 + trained["follow_only"].1,
                    ),
                };
                let ctx = EvalContext {
                    models: Models { primary, low_level: low },
                    vocab: &vocab,
                    modality: &cfg.train.modality,
                    oracle: OracleConfig { thought_format: cfg.train.modality.thought_format, ..OracleConfig::default() },
                    world,
                };
                let rcfg =
                    RolloutConfig { mode, max_steps: 0, oracle_substitution: false, decode: DecodeConfig::default() };
                for &v in &cfg.eval_variants {
                    let specs = episode_specs(v.family, v.n_objects, cfg.eval_base_seed, cfg.n_episodes);
                    let summary = summarize(&run_episodes(&ctx, &specs, &rcfg)?);
                    info!("size {size} {} seed {seed} {:?}/{}: {:.2}", p.name(), v.family, v.n_objects, summary.success_rate);
                    let rec = SweepRecord {
                        size,
                        paradigm: p,
                        seed,
                        family: v.family,
                        n_objects: v.n_objects,
                        mode,
                        summary,
                        train_seconds: secs,
                    };
                    metrics::append(&results_path, &rec)?;
                    records.push(rec);
                }
            }
        }
    }
    Ok(records)
}

/// The four conditions of the oracle-thought study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Act,
    Think,
    ThinkOracle,
    FollowOracle,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Act, Condition::Think, Condition::ThinkOracle, Condition::FollowOracle];

    pub fn rollout(self) -> (Mode, bool) {
        match self {
            Condition::Act => (Mode::Act, false),
            Condition::Think => (Mode::Think, false),
            Condition::ThinkOracle => (Mode::Think, true),
            Condition::FollowOracle => (Mode::Follow, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFollowRow {
    pub family: TaskFamily,
    pub n_objects: usize,
    pub condition: Condition,
    pub seeds: usize,
    pub episodes: usize,
    pub invalid: usize,
    /// Mean over seeds of the per-seed success rate.
    pub success_rate: f64,
    /// Pooled over all episodes of all seeds.
    pub stderr: f64,
    pub tokens_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFollowReport {
    pub rows: Vec<OracleFollowRow>,
    /// Per variant: do both oracle-substituted conditions match or beat own-thought think mode?
    pub substitution_helps: Vec<(Variant, bool)>,
}

pub fn oracle_follow_models(
    models: &[&ModelParameters],
    vocab: &Vocabulary,
    modality: &ModalityConfig,
    variants: &[Variant],
    n_episodes: usize,
    base_seed: u64,
    max_steps: Option<u32>,
) -> Result<OracleFollowReport> {
    let world = WorldConfig { grid_size: vocab.config().grid_size };
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for &v in variants {
        let specs = episode_specs(v.family, v.n_objects, base_seed, n_episodes);
        let mut by_cond = BTreeMap::new();
        for c in Condition::ALL {
            let (mode, sub) = c.rollout();
            let mut per_seed = Vec::new();
            let mut pooled = Vec::new();
            for &params in models {
                let ctx = EvalContext {
                    models: Models::single(params),
                    vocab,
                    modality,
                    oracle: OracleConfig { thought_format: modality.thought_format, ..OracleConfig::default() },
                    world,
                };
                let rcfg = RolloutConfig {
                    mode,
                    max_steps: max_steps.unwrap_or(0),
                    oracle_substitution: sub,
                    decode: DecodeConfig::default(),
                };
                let res = run_episodes(&ctx, &specs, &rcfg)?;
                per_seed.push(summarize(&res).success_rate);
                pooled.extend(res);
            }
            let s = summarize(&pooled);
            let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
            by_cond.insert(c, mean);
            rows.push(OracleFollowRow {
                family: v.family,
                n_objects: v.n_objects,
                condition: c,
                seeds: models.len(),
                episodes: s.episodes,
                invalid: s.invalid,
                success_rate: mean,
                stderr: s.stderr,
                tokens_per_step: s.tokens_per_step,
            });
        }
        let think = by_cond[&Condition::Think];
        flags.push((v, by_cond[&Condition::ThinkOracle] >= think && by_cond[&Condition::FollowOracle] >= think));
    }
    Ok(OracleFollowReport { rows, substitution_helps: flags })
}

pub fn oracle_follow(cfg: &OracleFollowConfig) -> Result<OracleFollowReport> {
    let cks: Vec<Checkpoint> = cfg.checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
    let first = cks.first().ok_or_else(|| LabError::Config("no checkpoints given".into()))?;
    let vocab = first.vocabulary();
    for c in &cks {
        c.check_vocab(&vocab)?;
    }
    let modality = first.header.train.modality;
    let params: Vec<&ModelParameters> = cks.iter().map(|c| &c.params).collect();
    let report =
        oracle_follow_models(&params, &vocab, &modality, &cfg.variants, cfg.n_episodes, cfg.base_seed, cfg.max_steps)?;
    write_csv(&cfg.out, &report.rows)?;
    let json = cfg.out.with_extension("json");
    fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| LabError::io(&json, e))?;
    Ok(report)
}
