mod common;

use common::{small_demos, tiny_train};
use hyt_core::codec::ModalityConfig;
use hyt_core::hyt::TrainerState;
use hyt_core::oracle::ThoughtFormat;
use hyt_core::world::TaskFamily;
use hyt_lab::checkpoint::{config_digest, Checkpoint};
use hyt_lab::config::{eval_seed_base, Paradigm, SweepConfig, Variant};
use hyt_lab::dataset;
use hyt_lab::metrics::{self, EpochRecord};
use hyt_lab::report;
use hyt_lab::runner::{self, train_on, vocabulary, LAST};
use hyt_lab::LabError;

#[test]
fn checkpoint_bytes_round_trip_exactly() {
    let cfg = tiny_train(1);
    let demos = small_demos(3);
    let dir = tempfile::tempdir().unwrap();
    let out = train_on(&demos, dir.path(), &cfg, None, None).unwrap();
    let ck = Checkpoint::from_trainer(&out.state, &out.vocab, &cfg);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params.flat(), out.state.params.flat());
    assert_eq!(back.header, ck.header);
    let on_disk = std::fs::read(dir.path().join(LAST)).unwrap();
    assert_eq!(on_disk, bytes);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = tiny_train(1);
    let v = vocabulary(8, &cfg.modality);
    let state = TrainerState::new(&cfg, v.len()).unwrap();
    let bytes = Checkpoint::from_trainer(&state, &v, &cfg).to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(LabError::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(LabError::Format(_))));
    let mut newer = bytes.clone();
    newer[8] = 99;
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(LabError::Incompatible(_))));
}

#[test]
fn mismatched_vocabulary_is_refused() {
    let cfg = tiny_train(1);
    let v8 = vocabulary(8, &cfg.modality);
    let state = TrainerState::new(&cfg, v8.len()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    Checkpoint::from_trainer(&state, &v8, &cfg).save(&path).unwrap();
    assert!(Checkpoint::load_for(&path, &v8).is_ok());
    let v10 = vocabulary(10, &cfg.modality);
    assert!(matches!(Checkpoint::load_for(&path, &v10), Err(LabError::Incompatible(_))));
    let binned = ModalityConfig { action_encoding: hyt_core::codec::ActionEncoding::Binned, ..cfg.modality };
    assert!(matches!(Checkpoint::load_for(&path, &vocabulary(8, &binned)), Err(LabError::Incompatible(_))));
}

#[test]
fn dataset_round_trips() {
    let demos = small_demos(4);
    let text = dataset::to_string(&demos).unwrap();
    let back = dataset::parse(&text).unwrap();
    assert_eq!(back, demos);
    assert_eq!(dataset::to_string(&back).unwrap(), text);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    dataset::write(&path, &demos).unwrap();
    assert_eq!(dataset::read(&path).unwrap(), demos);
}

#[test]
fn dataset_header_is_checked() {
    assert!(dataset::parse("").is_err());
    assert!(dataset::parse("{\"format\":\"other\",\"version\":1,\"grid_size\":8,\"thought_format\":\"short\"}").is_err());
    assert!(dataset::parse("{\"format\":\"hyt-demos\",\"version\":2,\"grid_size\":8,\"thought_format\":\"short\"}").is_err());
    let ok = dataset::parse("{\"format\":\"hyt-demos\",\"version\":1,\"grid_size\":8,\"thought_format\":\"short\"}\n").unwrap();
    assert!(ok.demos.is_empty());
}

#[test]
fn thought_format_must_match_the_dataset() {
    let mut demos = small_demos(2);
    demos.thought_format = ThoughtFormat::Extended;
    let dir = tempfile::tempdir().unwrap();
    let err = train_on(&demos, dir.path(), &tiny_train(1), None, None).unwrap_err();
    assert!(matches!(err, LabError::Config(_)), "{err}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let cfg = tiny_train(3);
    let demos = small_demos(5);
    let full = tempfile::tempdir().unwrap();
    let a = train_on(&demos, full.path(), &cfg, None, None).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = train_on(&demos, split.path(), &cfg, None, Some(1)).unwrap();
    assert_eq!(first.state.epoch, 1);
    let b = train_on(&demos, split.path(), &cfg, Some(&split.path().join(LAST)), None).unwrap();

    assert_eq!(a.state.epoch, 3);
    assert_eq!(b.state.epoch, 3);
    assert_eq!(a.state.params.flat(), b.state.params.flat());
    assert_eq!(a.state.optimizer, b.state.optimizer);
    let ra: Vec<EpochRecord> = metrics::read_all(&full.path().join("metrics.jsonl")).unwrap();
    let rb: Vec<EpochRecord> = metrics::read_all(&split.path().join("metrics.jsonl")).unwrap();
    assert_eq!(ra.len(), 3);
    assert_eq!(rb.len(), 3);
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!((x.epoch, x.loss, x.samples_act, x.samples_think), (y.epoch, y.loss, y.samples_act, y.samples_think));
    }
    assert_eq!(
        std::fs::read(full.path().join("epoch-003.bin")).unwrap(),
        std::fs::read(split.path().join("epoch-003.bin")).unwrap()
    );
}

#[test]
fn resume_refuses_a_different_config() {
    let cfg = tiny_train(2);
    let demos = small_demos(3);
    let dir = tempfile::tempdir().unwrap();
    train_on(&demos, dir.path(), &cfg, None, Some(1)).unwrap();
    let other = hyt_core::hyt::TrainConfig { seed: 9, ..cfg.clone() };
    assert_ne!(config_digest(&other), config_digest(&cfg));
    let err = train_on(&demos, dir.path(), &other, Some(&dir.path().join(LAST)), None).unwrap_err();
    assert!(matches!(err, LabError::Incompatible(_)));
}

#[test]
fn vocab_manifest_lists_every_token() {
    let v = runner::vocabulary(8, &ModalityConfig::default());
    let m = hyt_lab::checkpoint::manifest(&v);
    assert_eq!(m.tokens.len(), v.len());
    assert!(m.tokens.iter().enumerate().all(|(i, t)| t.id as usize == i && v.id(&t.token) == Some(t.id)));
}

#[test]
fn sweep_reuses_finished_runs_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig {
        out_dir: dir.path().join("sweep"),
        sizes: vec![3],
        families: vec![TaskFamily::PlaceAt],
        train_variant: Some(2),
        paradigms: vec![Paradigm::Hyt, Paradigm::ActOnly],
        seeds: vec![0],
        train: tiny_train(1),
        eval_variants: vec![Variant { family: TaskFamily::PlaceAt, n_objects: 2 }],
        n_episodes: 2,
        eval_base_seed: eval_seed_base(),
        data_seed_base: 0,
        grid_size: 8,
    };
    let first = runner::sweep(&cfg).unwrap();
    assert!(first.iter().all(|r| r.train_seconds > 0.0));
    let second = runner::sweep(&cfg).unwrap();
    assert!(second.iter().all(|r| r.train_seconds == 0.0), "finished runs were retrained");
    // Wall-clock fields differ between runs; the decoded behaviour must not.
    let summaries = |rs: &[runner::SweepRecord]| rs.iter().map(|r| (r.summary.successes, r.summary.tokens_per_step, r.summary.malformed)).collect::<Vec<_>>();
    assert_eq!(summaries(&first), summaries(&second));

    let rep = report::report(&cfg.out_dir).unwrap();
    assert_eq!(rep.cells.len(), 2);
    assert!(rep.cells.iter().all(|c| !c.absent && c.seeds == 2));
    assert!(rep.trend.holds.is_some());
    assert!(cfg.out_dir.join(report::CSV).exists() && cfg.out_dir.join(report::PLOT).exists());
}
