//! Data collection, the update cadence, and evaluation.

pub mod agent;
pub mod config;

pub use agent::{
    ActionPolicyEval, Agent, PolicyDraws, SchemaRule, SelectionEval, Temperatures, UpdateSettings, UpdateStats,
};
pub use config::{BetaUpdate, Mode, TrainConfig, AUTO_EXACT_MAX_SWITCHES};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::Real;
use crate::envs::{EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::metrics::{afr, apr, AfrNorm, EpisodeTrace};
use crate::policy::{Schema, TwoStagePolicy};
use crate::replay::{ReplayBuffer, Transition};
use crate::seeds::{derive_seed, stream_rng, Stream};

/// How the schema of one step is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    /// Ask the selection network.
    Policy,
    /// Every dimension acts.
    ForceAct,
    /// Every dimension repeats.
    ForceRepeat,
}

/// Schema rule of `mode` at step `episode_step` of an episode.
pub fn decision(mode: Mode, episode_step: u64) -> Decision {
    match mode {
        Mode::Sdar | Mode::Coupled if episode_step == 0 => Decision::ForceAct,
        Mode::Sdar | Mode::Coupled => Decision::Policy,
        Mode::Sac => Decision::ForceAct,
        Mode::Nrep(n) if episode_step % n as u64 == 0 => Decision::ForceAct,
        Mode::Nrep(_) => Decision::ForceRepeat,
    }
}

/// Independent random streams of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub env: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub replay: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        RngStreams {
            env: stream_rng(seed, Stream::Env),
            policy: stream_rng(seed, Stream::Policy),
            replay: stream_rng(seed, Stream::Replay),
            init: stream_rng(seed, Stream::Init),
        }
    }
}

/// Position of the collection loop inside the current episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collector {
    pub obs: Vec<Real>,
    pub a_prev: Vec<Real>,
    pub episode_step: u64,
    pub episode_return: Real,
    pub episodes: u64,
    pub needs_reset: bool,
}

/// Running sums between two evaluation records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accumulator {
    pub critic_loss: (Real, u64),
    pub pi_objective: (Real, u64),
    pub beta_objective: (Real, u64),
    pub train_return: (Real, u64),
}

fn add(slot: &mut (Real, u64), v: Real) {
    slot.0 += v;
    slot.1 += 1;
}

fn mean(slot: (Real, u64)) -> Option<f64> {
    (slot.1 > 0).then(|| slot.0 as f64 / slot.1 as f64)
}

impl Accumulator {
    fn record(&mut self, s: &UpdateStats) {
        add(&mut self.critic_loss, s.critic_loss);
        if let Some(v) = s.pi_objective {
            add(&mut self.pi_objective, v);
        }
        if let Some(v) = s.beta_objective {
            add(&mut self.beta_objective, v);
        }
    }
}

/// Return and repetition statistics of a set of evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub return_mean: f64,
    /// Standard error of the mean return (0 for a single episode).
    pub return_stderr: f64,
    pub apr: f64,
    pub afr: f64,
    pub per_dim_apr: Vec<f64>,
    pub mean_length: f64,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    #[serde(flatten)]
    pub summary: EvalSummary,
    pub alpha_beta: f64,
    pub alpha_pi: f64,
    pub critic_loss: Option<f64>,
    pub pi_objective: Option<f64>,
    pub beta_objective: Option<f64>,
    pub train_episodes: u64,
    pub train_return_mean: Option<f64>,
}

pub fn summarize(traces: &[EpisodeTrace]) -> Result<EvalSummary> {
    if traces.is_empty() {
        return Err(Error::Precondition("no evaluation episodes".into()));
    }
    let returns: Vec<f64> = traces.iter().map(|t| t.episode_return() as f64).collect();
    let n = returns.len() as f64;
    let return_mean = returns.iter().sum::<f64>() / n;
    let return_stderr = if returns.len() > 1 {
        let var = returns.iter().map(|r| (r - return_mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let report = apr(traces, None)?;
    Ok(EvalSummary {
        episodes: traces.len(),
        return_mean,
        return_stderr,
        apr: report.apr as f64,
        afr: afr(traces, AfrNorm::Euclidean)? as f64,
        per_dim_apr: report.per_dim_apr.iter().map(|&v| v as f64).collect(),
        mean_length: traces.iter().map(|t| t.len() as f64).sum::<f64>() / n,
    })
}

/// Runs one episode per seed. Deterministic heads are used unless
/// `stochastic` supplies an rng.
pub fn run_episodes(
    policy: &TwoStagePolicy,
    mode: Mode,
    env: &mut dyn Environment,
    seeds: &[u64],
    mut stochastic: Option<&mut ChaCha8Rng>,
) -> Result<Vec<EpisodeTrace>> {
    let spec = env.spec();
    if spec.act_dim != policy.act_dim() || spec.obs_dim != policy.config.obs_dim {
        return Err(Error::config(format!(
            "environment dims {}/{} do not match the policy {}/{}",
            spec.obs_dim,
            spec.act_dim,
            policy.config.obs_dim,
            policy.act_dim()
        )));
    }
    let n = spec.act_dim;
    let mut traces = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut obs = env.reset(seed)?;
        let mut a_prev = vec![0.0; n];
        let mut trace = EpisodeTrace::new(a_prev.clone());
        for t in 0..spec.max_episode_steps as u64 {
            let (action, schema) = match decision(mode, t) {
                Decision::ForceRepeat => (a_prev.clone(), Schema::all_repeat(n)),
                d => {
                    let force = d == Decision::ForceAct;
                    let out = match stochastic.as_deref_mut() {
                        Some(rng) => policy.act(&obs, &a_prev, force, rng)?,
                        None => policy.act_deterministic(&obs, &a_prev, force)?,
                    };
                    (out.action.0, out.schema)
                }
            };
            let r = env.step(&action)?;
            trace.record(action.clone(), schema, r.reward);
            if r.terminated || r.truncated {
                break;
            }
            obs = r.obs;
            a_prev = action;
        }
        traces.push(trace);
    }
    Ok(traces)
}

/// Seeds of the evaluation episodes; the same for every evaluation of a run.
pub fn eval_seeds(run_seed: u64, episodes: usize) -> Vec<u64> {
    let base = derive_seed(run_seed, Stream::Eval);
    (0..episodes as u64).map(|j| base.wrapping_add(j)).collect()
}

/// Everything a run needs to continue from its current step.
pub struct TrainState {
    pub config: TrainConfig,
    pub spec: EnvSpec,
    pub agent: Agent,
    pub replay: ReplayBuffer,
    pub env: Box<dyn Environment>,
    pub eval_env: Box<dyn Environment>,
    pub rngs: RngStreams,
    /// Environment steps taken so far.
    pub step: u64,
    pub collector: Collector,
    pub acc: Accumulator,
    /// Evaluations emitted so far.
    pub evals: u64,
    /// Set once `stop_at_return` is reached.
    pub stopped: bool,
}

impl TrainState {
    pub fn new(config: TrainConfig, env: Box<dyn Environment>, eval_env: Box<dyn Environment>) -> Result<Self> {
        config.validate()?;
        let spec = env.spec();
        spec.validate()?;
        if eval_env.spec() != spec {
            return Err(Error::config("training and evaluation environments disagree on the spec"));
        }
        let mut rngs = RngStreams::from_seed(config.seed);
        let agent = Agent::new(spec.obs_dim, spec.act_dim, &config, &mut rngs.init)?;
        let replay = ReplayBuffer::new(config.replay_capacity, spec.obs_dim, spec.act_dim)?;
        Ok(TrainState {
            collector: Collector {
                obs: vec![0.0; spec.obs_dim],
                a_prev: vec![0.0; spec.act_dim],
                episode_step: 0,
                episode_return: 0.0,
                episodes: 0,
                needs_reset: true,
            },
            config,
            spec,
            agent,
            replay,
            env,
            eval_env,
            rngs,
            step: 0,
            acc: Accumulator::default(),
            evals: 0,
            stopped: false,
        })
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.step >= self.config.total_steps
    }

    /// Takes one environment step and stores the transition. Returns it with
    /// the executed schema.
    pub fn collect_step(&mut self) -> Result<(Transition, Schema)> {
        let n = self.spec.act_dim;
        let c = &mut self.collector;
        if c.needs_reset {
            let seed: u64 = self.rngs.env.random();
            c.obs = self.env.reset(seed)?;
            c.a_prev = vec![0.0; n];
            c.episode_step = 0;
            c.episode_return = 0.0;
            c.needs_reset = false;
        }
        let warm = self.step < self.config.warmup_steps;
        let (action, schema) = match decision(self.config.mode, c.episode_step) {
            Decision::ForceRepeat => (c.a_prev.clone(), Schema::all_repeat(n)),
            _ if warm => {
                let a: Vec<Real> = (0..n).map(|_| self.rngs.policy.random_range(-1.0..1.0)).collect();
                (a, Schema::all_act(n))
            }
            d => {
                let out = self.agent.policy.act(
                    &c.obs,
                    &c.a_prev,
                    d == Decision::ForceAct,
                    &mut self.rngs.policy,
                )?;
                (out.action.0, out.schema)
            }
        };
        let r = self.env.step(&action)?;
        if r.obs.len() != self.spec.obs_dim || !r.reward.is_finite() {
            return Err(Error::Protocol("environment returned a malformed step".into()));
        }
        let limit = c.episode_step + 1 >= self.spec.max_episode_steps as u64;
        let truncated = !r.terminated && (r.truncated || limit);
        let transition = Transition {
            obs: std::mem::take(&mut c.obs),
            a_prev: c.a_prev.clone(),
            action: action.clone(),
            reward: r.reward,
            next_obs: r.obs.clone(),
            terminal: r.terminated,
            truncated,
            episode_start: c.episode_step == 0,
            episode_start_next: false,
        };
        self.replay.push(transition.clone())?;
        c.episode_return += r.reward;
        if r.terminated || truncated {
            c.episodes += 1;
            c.needs_reset = true;
            add(&mut self.acc.train_return, c.episode_return);
        } else {
            c.obs = r.obs;
            c.a_prev = action;
            c.episode_step += 1;
        }
        Ok((transition, schema))
    }

    /// Evaluates the current policy and resets the running sums.
    pub fn evaluate_now(&mut self) -> Result<(Vec<EpisodeTrace>, EvalRecord)> {
        let seeds = eval_seeds(self.config.seed, self.config.eval_episodes);
        let mut rng = self.config.stochastic_eval.then(|| {
            let s = derive_seed(self.config.seed, Stream::Eval) ^ self.evals;
            stream_rng(s, Stream::Policy)
        });
        let traces = run_episodes(
            &self.agent.policy,
            self.config.mode,
            self.eval_env.as_mut(),
            &seeds,
            rng.as_mut(),
        )?;
        let record = EvalRecord {
            step: self.step,
            summary: summarize(&traces)?,
            alpha_beta: self.agent.temps.alpha_beta() as f64,
            alpha_pi: self.agent.temps.alpha_pi() as f64,
            critic_loss: mean(self.acc.critic_loss),
            pi_objective: mean(self.acc.pi_objective),
            beta_objective: mean(self.acc.beta_objective),
            train_episodes: self.collector.episodes,
            train_return_mean: mean(self.acc.train_return),
        };
        self.acc = Accumulator::default();
        self.evals += 1;
        if let Some(goal) = self.config.stop_at_return {
            if record.summary.return_mean >= goal {
                self.stopped = true;
            }
        }
        Ok((traces, record))
    }

    /// One environment step plus the updates scheduled for it.
    fn step_once(&mut self) -> Result<()> {
        self.collect_step()?;
        let t = self.step;
        if t >= self.config.warmup_steps {
            let batch = self.replay.sample(self.config.batch_size, &mut self.rngs.replay)?;
            let policy_step = t % self.config.policy_delay == 0;
            let stats = self.agent.update(&batch, policy_step, &mut self.rngs.policy)?;
            self.acc.record(&stats);
        }
        self.step += 1;
        Ok(())
    }

    fn eval_due(&self) -> bool {
        if self.evals == 0 {
            return true;
        }
        self.step % self.config.eval_every == 0 || self.step == self.config.total_steps
    }

    /// Advances until the next evaluation (or the end of the run) and
    /// returns its record. `None` once the run is finished.
    pub fn advance(&mut self) -> Result<Option<EvalRecord>> {
        if self.evals == 0 {
            let (_, rec) = self.evaluate_now().map_err(|e| e.at_step(self.step))?;
            return Ok(Some(rec));
        }
        if self.finished() {
            return Ok(None);
        }
        loop {
            let t = self.step;
            self.step_once().map_err(|e| e.at_step(t))?;
            if self.eval_due() {
                let (_, rec) = self.evaluate_now().map_err(|e| e.at_step(self.step))?;
                return Ok(Some(rec));
            }
        }
    }

    /// Runs to completion, handing every evaluation record to `sink`.
    pub fn run(&mut self, sink: &mut dyn FnMut(&EvalRecord) -> Result<()>) -> Result<()> {
        while let Some(rec) = self.advance()? {
            sink(&rec)?;
        }
        Ok(())
    }
}

/// Builds a fresh run and trains it to completion.
pub fn train(
    config: TrainConfig,
    env: Box<dyn Environment>,
    eval_env: Box<dyn Environment>,
    sink: &mut dyn FnMut(&EvalRecord) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::new(config, env, eval_env)?;
    state.run(sink)?;
    Ok(state)
}
