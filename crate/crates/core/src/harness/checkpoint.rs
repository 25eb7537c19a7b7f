//! Binary checkpoint of a training run.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"SDARCKPT"  u32 version
//! u64 n, n bytes of JSON metadata (config, env spec, counters, collector,
//!   accumulator, temperatures, rng positions, env snapshot)
//! 6 networks: u32 layer sizes count, u64 sizes..., f64 parameters...
//!   order: selection, action, q1, q2, q1 target, q2 target
//! 6 Adam states: u64 step, f64 beta1, beta2, eps, u64 n, f64 m[n], f64 v[n]
//!   order: selection, action, q1, q2, alpha_beta, alpha_pi
//! replay: u64 capacity, obs_dim, act_dim, len, head, then per transition
//!   f64 obs, a_prev, action, reward, next_obs and one flag byte
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Parameters are stored as f64 regardless of the `Real` width.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approximator::{AdamState, ParamSet, Real};
use crate::envs::{EnvSnapshot, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, Transition};
use crate::trainer::{Accumulator, Agent, Collector, RngStreams, Temperatures, TrainConfig, TrainState, UpdateSettings};
use crate::critic::CriticPair;
use crate::policy::{MaskConstant, PolicyConfig, TwoStagePolicy};

const MAGIC: &[u8; 8] = b"SDARCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn rebuild(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("invalid rng state {:?}", self.seed));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    spec: EnvSpec,
    env_name: String,
    step: u64,
    evals: u64,
    stopped: bool,
    collector: Collector,
    acc: Accumulator,
    log_alpha_beta: f64,
    log_alpha_pi: f64,
    rngs: [RngState; 4],
    env_snapshot: Option<EnvSnapshot>,
}

/// Decoded checkpoint, waiting for environments to be attached.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub spec: EnvSpec,
    /// Name of the training environment when it was saved.
    pub env_name: String,
    pub step: u64,
    pub evals: u64,
    pub stopped: bool,
    pub collector: Collector,
    pub acc: Accumulator,
    pub agent: Agent,
    pub replay: ReplayBuffer,
    pub rngs: RngStreams,
    pub env_snapshot: Option<EnvSnapshot>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn reals(&mut self, xs: &[Real]) {
        for &x in xs {
            self.f64(x as f64);
        }
    }
    fn params(&mut self, p: &ParamSet) {
        let sizes = p.sizes();
        self.u32(sizes.len() as u32);
        for s in sizes {
            self.u64(s as u64);
        }
        self.reals(&p.to_flat());
    }
    fn adam(&mut self, a: &AdamState) {
        self.u64(a.step);
        self.f64(a.beta1 as f64);
        self.f64(a.beta2 as f64);
        self.f64(a.eps as f64);
        self.u64(a.first_moment.len() as u64);
        self.reals(&a.first_moment);
        self.reals(&a.second_moment);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u64()?;
        if n > limit as u64 {
            return Err(Error::Format(format!("length {n} exceeds the remaining data")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn reals(&mut self, n: usize) -> Result<Vec<Real>> {
        if (self.bytes.len() - self.pos) / 8 < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        (0..n).map(|_| self.f64().map(|x| x as Real)).collect()
    }
    fn params(&mut self) -> Result<ParamSet> {
        let count = self.u32()? as usize;
        if count < 2 || count > 64 {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let sizes = (0..count)
            .map(|_| self.len(1 << 24))
            .collect::<Result<Vec<_>>>()?;
        let mut p = ParamSet::zeros(&sizes).map_err(|e| Error::Format(e.to_string()))?;
        let flat = self.reals(p.num_params())?;
        p.set_flat(&flat)?;
        Ok(p)
    }
    fn adam(&mut self) -> Result<AdamState> {
        let step = self.u64()?;
        let beta1 = self.f64()? as Real;
        let beta2 = self.f64()? as Real;
        let eps = self.f64()? as Real;
        let n = self.len(self.bytes.len())?;
        Ok(AdamState {
            first_moment: self.reals(n)?,
            second_moment: self.reals(n)?,
            step,
            beta1,
            beta2,
            eps,
        })
    }
}

fn check_adam(a: &AdamState, p: &ParamSet, what: &str) -> Result<()> {
    if a.first_moment.len() != p.num_params() {
        return Err(Error::Format(format!("{what} optimizer state does not match its network")));
    }
    Ok(())
}

/// Encodes the full state of a run.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let agent = &state.agent;
    let meta = Meta {
        config: state.config.clone(),
        spec: state.spec.clone(),
        env_name: state.env.name(),
        step: state.step,
        evals: state.evals,
        stopped: state.stopped,
        collector: state.collector.clone(),
        acc: state.acc.clone(),
        log_alpha_beta: agent.temps.log_alpha_beta as f64,
        log_alpha_pi: agent.temps.log_alpha_pi as f64,
        rngs: [
            RngState::capture(&state.rngs.env),
            RngState::capture(&state.rngs.policy),
            RngState::capture(&state.rngs.replay),
            RngState::capture(&state.rngs.init),
        ],
        env_snapshot: state.env.snapshot(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(json.len() as u64);
    w.0.extend_from_slice(&json);
    let c = &agent.critics;
    for p in [&agent.policy.selection, &agent.policy.action, &c.q1, &c.q2, &c.q1_target, &c.q2_target] {
        w.params(p);
    }
    for a in [
        &agent.opt_beta,
        &agent.opt_pi,
        &agent.opt_q1,
        &agent.opt_q2,
        &agent.temps.adam_beta,
        &agent.temps.adam_pi,
    ] {
        w.adam(a);
    }
    let (items, head) = state.replay.storage();
    w.u64(state.replay.capacity() as u64);
    w.u64(state.replay.obs_dim() as u64);
    w.u64(state.replay.act_dim() as u64);
    w.u64(items.len() as u64);
    w.u64(head as u64);
    for t in items {
        w.reals(&t.obs);
        w.reals(&t.a_prev);
        w.reals(&t.action);
        w.f64(t.reward as f64);
        w.reals(&t.next_obs);
        let flags = t.terminal as u8
            | (t.truncated as u8) << 1
            | (t.episode_start as u8) << 2
            | (t.episode_start_next as u8) << 3;
        w.0.push(flags);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    Ok(w.0)
}

/// Decodes and validates a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let n = r.len(body.len())?;
    let meta: Meta = serde_json::from_slice(r.take(n)?)?;
    meta.config.validate()?;
    meta.spec.validate()?;

    let selection = r.params()?;
    let action = r.params()?;
    let critics = CriticPair {
        q1: r.params()?,
        q2: r.params()?,
        q1_target: r.params()?,
        q2_target: r.params()?,
    };
    let opt_beta = r.adam()?;
    let opt_pi = r.adam()?;
    let opt_q1 = r.adam()?;
    let opt_q2 = r.adam()?;
    let adam_beta = r.adam()?;
    let adam_pi = r.adam()?;

    let (obs_dim, act_dim) = (meta.spec.obs_dim, meta.spec.act_dim);
    let expected = CriticPair::sizes(obs_dim, act_dim, &meta.config.hidden);
    for q in [&critics.q1, &critics.q2, &critics.q1_target, &critics.q2_target] {
        if q.sizes() != expected {
            return Err(Error::Format("critic shape does not match the config".into()));
        }
    }
    let policy_config = PolicyConfig {
        obs_dim,
        act_dim,
        hidden: meta.config.hidden.clone(),
        xi: MaskConstant::try_from(meta.config.xi)?,
        selection: meta.config.mode.selection_kind(),
        mask_pi_entropy: meta.config.mask_pi_entropy,
    };
    let policy = TwoStagePolicy::from_params(policy_config, selection, action)
        .map_err(|e| Error::Format(e.to_string()))?;
    check_adam(&opt_beta, &policy.selection, "selection")?;
    check_adam(&opt_pi, &policy.action, "action")?;
    check_adam(&opt_q1, &critics.q1, "critic 1")?;
    check_adam(&opt_q2, &critics.q2, "critic 2")?;
    if adam_beta.first_moment.len() != 1 || adam_pi.first_moment.len() != 1 {
        return Err(Error::Format("temperature optimizer state must be scalar".into()));
    }

    let switches = policy.config.selection_outputs();
    let mut temps = Temperatures::new(
        act_dim,
        switches,
        meta.config.lambda as Real,
        meta.config.init_log_alpha as Real,
        meta.config.mode.learns_selection(),
    );
    temps.log_alpha_beta = meta.log_alpha_beta as Real;
    temps.log_alpha_pi = meta.log_alpha_pi as Real;
    temps.adam_beta = adam_beta;
    temps.adam_pi = adam_pi;
    let agent = Agent {
        settings: UpdateSettings::from_config(&meta.config, act_dim)?,
        policy,
        critics,
        temps,
        opt_pi,
        opt_beta,
        opt_q1,
        opt_q2,
    };

    let capacity = r.len(usize::MAX)?;
    let r_obs = r.len(usize::MAX)?;
    let r_act = r.len(usize::MAX)?;
    if (r_obs, r_act) != (obs_dim, act_dim) {
        return Err(Error::Format("replay dims do not match the env spec".into()));
    }
    let count = r.len(capacity)?;
    let head = r.len(usize::MAX)?;
    let row = 8 * (2 * act_dim + 2 * obs_dim + 1) + 1;
    if (body.len() - r.pos) / row < count {
        return Err(Error::Format("replay section is truncated".into()));
    }
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let obs = r.reals(obs_dim)?;
        let a_prev = r.reals(act_dim)?;
        let action = r.reals(act_dim)?;
        let reward = r.f64()? as Real;
        let next_obs = r.reals(obs_dim)?;
        let flags = r.take(1)?[0];
        if flags > 0b1111 {
            return Err(Error::Format(format!("invalid transition flags {flags:#x}")));
        }
        items.push(Transition {
            obs,
            a_prev,
            action,
            reward,
            next_obs,
            terminal: flags & 1 != 0,
            truncated: flags & 2 != 0,
            episode_start: flags & 4 != 0,
            episode_start_next: flags & 8 != 0,
        });
    }
    let replay = ReplayBuffer::from_storage(capacity, obs_dim, act_dim, items, head)?;
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let [env, policy_rng, replay_rng, init] = &meta.rngs;
    Ok(Checkpoint {
        rngs: RngStreams {
            env: env.rebuild()?,
            policy: policy_rng.rebuild()?,
            replay: replay_rng.rebuild()?,
            init: init.rebuild()?,
        },
        config: meta.config,
        spec: meta.spec,
        env_name: meta.env_name,
        step: meta.step,
        evals: meta.evals,
        stopped: meta.stopped,
        collector: meta.collector,
        acc: meta.acc,
        agent,
        replay,
        env_snapshot: meta.env_snapshot,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

impl Checkpoint {
    /// Attaches environments and restores the training one mid-episode.
    ///
    /// An environment without snapshots (a bridged process) restarts its
    /// episode at the next step, so such a resume is not bit-identical.
    pub fn into_state(self, mut env: Box<dyn Environment>, eval_env: Box<dyn Environment>) -> Result<TrainState> {
        if env.spec() != self.spec || eval_env.spec() != self.spec {
            return Err(Error::config(format!(
                "environment spec {:?} does not match the checkpoint's {:?}",
                env.spec(),
                self.spec
            )));
        }
        let mut collector = self.collector;
        match &self.env_snapshot {
            Some(snap) => env.restore(snap)?,
            None if !collector.needs_reset => {
                log::warn!(
                    "{} cannot restore its episode; the resumed run starts a new one",
                    env.name()
                );
                collector.needs_reset = true;
            }
            None => {}
        }
        Ok(TrainState {
            config: self.config,
            spec: self.spec,
            agent: self.agent,
            replay: self.replay,
            env,
            eval_env,
            rngs: self.rngs,
            step: self.step,
            collector,
            acc: self.acc,
            evals: self.evals,
            stopped: self.stopped,
        })
    }
}
