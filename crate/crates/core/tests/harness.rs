use std::collections::BTreeMap;
use std::path::Path;

use sdar::harness::checkpoint;
use sdar::harness::matrix::{aggregate, MatrixConfig};
use sdar::harness::{
    config_hash, preset, read_run, resume_experiment, run_experiment, EnvSelector, ExperimentConfig, LogLine,
    RunOptions, CHECKPOINT_FILE, LOG_FILE,
};
use sdar::trainer::{Mode, TrainConfig, TrainState};
use sha2::{Digest, Sha256};

fn small(env: &str, mode: Mode, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        env: env.into(),
        train: TrainConfig {
            mode,
            seed,
            hidden: vec![16, 16],
            batch_size: 32,
            warmup_steps: 100,
            total_steps: 600,
            eval_every: 200,
            eval_episodes: 2,
            ..TrainConfig::default()
        },
    }
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn reordered_keys_hash_identically() {
    let a = ExperimentConfig::from_toml(
        "env = \"builtin:pendulum\"\n[train]\nseed = 4\nmode = \"nrep:3\"\nhidden = [32, 32]\n",
    )
    .unwrap();
    let b = ExperimentConfig::from_toml(
        "[train]\nhidden = [32, 32]\nmode = \"nrep(3)\"\nseed = 4\n\n",
    );
    // `env` is required.
    assert!(b.is_err());
    let b = ExperimentConfig::from_toml(
        "env = \"builtin:pendulum\"\n[train]\nhidden = [32,32]\nmode = \"nrep(3)\"\nseed = 4\n",
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    let c = ExperimentConfig {
        train: TrainConfig { seed: 5, ..a.train.clone() },
        ..a.clone()
    };
    assert_ne!(a.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn hash_of_json_objects_ignores_key_order() {
    let x: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":{"d":[1,2],"c":0.5}}"#).unwrap();
    let y: serde_json::Value = serde_json::from_str(r#"{"a":{"c":0.5,"d":[1,2]},"b":1}"#).unwrap();
    assert_eq!(config_hash(&x).unwrap(), config_hash(&y).unwrap());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small("builtin:point_mass", Mode::Coupled, 9);
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn unknown_keys_and_envs_are_rejected() {
    assert!(ExperimentConfig::from_toml("env = \"builtin:pendulum\"\n[train]\nlearning_rate = 1\n").is_err());
    assert!(ExperimentConfig::from_toml("env = \"builtin:cartpole\"\n").is_err());
    assert!("bridge:".parse::<EnvSelector>().is_err());
    assert_eq!(
        "bridge:python3 -m adapter".parse::<EnvSelector>().unwrap(),
        EnvSelector::Bridge("python3 -m adapter".into())
    );
}

#[test]
fn paper_desk_preset_covers_both_tasks() {
    let runs = preset("paper-desk").unwrap();
    assert_eq!(runs.len(), 2);
    for r in &runs {
        assert_eq!(r.seeds.len(), 5);
        assert_eq!(r.experiment.train.mode, Mode::Sdar);
        r.experiment.validate().unwrap();
    }
    assert!(runs[0].experiment.train.total_steps <= 100_000);
    assert!(preset("nope").is_err());
}

#[test]
fn jsonl_logs_parse_back_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("builtin:pendulum", Mode::Sdar, 1);
    let out = run_experiment(&cfg, dir.path(), &RunOptions::default()).unwrap();
    let text = std::fs::read_to_string(out.log_path()).unwrap();
    let run = read_run(&out.log_path()).unwrap();
    assert_eq!(run.header.config, cfg);
    assert_eq!(run.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![0, 200, 400, 600]);
    assert_eq!(run.wallclock.len(), 4);
    // Re-serializing every parsed line reproduces the file byte for byte.
    let mut again = serde_json::to_string(&LogLine::Header(run.header.clone())).unwrap() + "\n";
    for e in &run.evals {
        again += &(serde_json::to_string(&LogLine::Eval(e.clone())).unwrap() + "\n");
    }
    assert_eq!(again, text);
    for line in text.lines() {
        assert!(serde_json::from_str::<serde_json::Value>(line).unwrap().is_object());
    }
}

#[test]
fn same_seed_gives_byte_identical_logs() {
    let cfg = small("builtin:point_mass", Mode::Sdar, 3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path(), &RunOptions::default()).unwrap();
    run_experiment(&cfg, b.path(), &RunOptions::default()).unwrap();
    assert_eq!(bytes(&a.path().join(LOG_FILE)), bytes(&b.path().join(LOG_FILE)));
    assert_eq!(bytes(&a.path().join(CHECKPOINT_FILE)), bytes(&b.path().join(CHECKPOINT_FILE)));
}

fn resume_matches_uninterrupted(cfg: ExperimentConfig, halt: u64) {
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    run_experiment(&cfg, whole.path(), &RunOptions::default()).unwrap();
    let first = run_experiment(
        &cfg,
        split.path(),
        &RunOptions { halt_at: Some(halt), ..RunOptions::default() },
    )
    .unwrap();
    assert_eq!(first.state.step, halt);
    assert!(!first.state.finished());
    let second = resume_experiment(split.path(), &RunOptions::default()).unwrap();
    assert!(second.state.finished());
    assert_eq!(bytes(&whole.path().join(LOG_FILE)), bytes(&split.path().join(LOG_FILE)));
    assert_eq!(
        bytes(&whole.path().join(CHECKPOINT_FILE)),
        bytes(&split.path().join(CHECKPOINT_FILE))
    );
}

#[test]
fn checkpoint_resume_is_bit_identical_sdar() {
    // The halt lands mid-episode on point mass (300-step episodes).
    resume_matches_uninterrupted(small("builtin:point_mass", Mode::Sdar, 2), 400);
}

#[test]
fn checkpoint_resume_is_bit_identical_other_modes() {
    resume_matches_uninterrupted(small("builtin:pendulum", Mode::Nrep(3), 0), 200);
    resume_matches_uninterrupted(small("builtin:mountain_car", Mode::Coupled, 5), 400);
}

#[test]
fn checkpoint_round_trip_restores_every_field() {
    let cfg = small("builtin:point_mass", Mode::Sdar, 7);
    let mut state = TrainState::new(cfg.train.clone(), cfg.selector().unwrap().make().unwrap(), cfg.selector().unwrap().make().unwrap()).unwrap();
    for _ in 0..3 {
        state.advance().unwrap();
    }
    let bytes = checkpoint::encode(&state).unwrap();
    let ck = checkpoint::decode(&bytes).unwrap();
    assert_eq!(ck.agent, state.agent);
    assert_eq!(ck.rngs, state.rngs);
    assert_eq!(ck.replay.storage(), state.replay.storage());
    assert_eq!(ck.collector, state.collector);
    assert_eq!(ck.acc, state.acc);
    assert_eq!((ck.step, ck.evals, ck.stopped), (state.step, state.evals, state.stopped));
    let restored = ck.into_state(cfg.selector().unwrap().make().unwrap(), cfg.selector().unwrap().make().unwrap()).unwrap();
    assert_eq!(checkpoint::encode(&restored).unwrap(), bytes);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small("builtin:pendulum", Mode::Sac, 0);
    let state = TrainState::new(cfg.train.clone(), cfg.selector().unwrap().make().unwrap(), cfg.selector().unwrap().make().unwrap()).unwrap();
    let good = checkpoint::encode(&state).unwrap();
    let mut flipped = good.clone();
    flipped[100] ^= 1;
    assert!(checkpoint::decode(&flipped).unwrap_err().to_string().contains("checksum"));
    assert!(checkpoint::decode(&good[..good.len() - 1]).is_err());
    assert!(checkpoint::decode(b"not a checkpoint at all, just text....................").is_err());
    let mut wrong_version = good.clone();
    wrong_version[8] = 9;
    let body = wrong_version.len() - 32;
    let digest = Sha256::digest(&wrong_version[..body]);
    wrong_version[body..].copy_from_slice(&digest);
    assert!(checkpoint::decode(&wrong_version).unwrap_err().to_string().contains("version 9"));
}

#[test]
fn matrix_table_has_one_best_auc() {
    let cfg = MatrixConfig::from_toml(
        "envs = [\"builtin:mountain_car\"]\nmodes = [\"sac\", \"sdar\"]\nseeds = [0, 1, 2]\n\
         [train]\nhidden = [8]\nbatch_size = 16\nwarmup_steps = 50\ntotal_steps = 300\neval_every = 150\neval_episodes = 1\n",
    )
    .unwrap();
    let runs = cfg.runs().unwrap();
    assert_eq!(runs.len(), 6);
    let root = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for r in &runs {
        let dir = root.path().join(&r.name);
        run_experiment(&r.experiment, &dir, &RunOptions::default()).unwrap();
        records.push(read_run(&dir.join(LOG_FILE)).unwrap());
    }
    let mut z0 = BTreeMap::new();
    z0.insert("mountain_car".to_string(), -50.0);
    let rows = aggregate(&records, &BTreeMap::new(), &z0).unwrap();
    assert_eq!(rows.len(), 2);
    let ones = rows.iter().filter(|r| r.auc_best_normalized == 1.0).count();
    assert_eq!(ones, 1);
    let sac = rows.iter().find(|r| r.mode == "sac").unwrap();
    assert_eq!(sac.n_score, Some(1.0));
}
