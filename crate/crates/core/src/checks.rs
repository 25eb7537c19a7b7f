//! Property suites run by `sdar check` and the acceptance tests.
//!
//! Each suite returns a [`CheckOutcome`]; none of them panics on a failed
//! property.

use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::approximator::{AdamState, ForwardTrace, GradSet, ParamSet, Real};
use crate::critic::TargetBatch;
use crate::error::Result;
use crate::metrics::{afr, apr, auc, n_score, AfrNorm, EpisodeTrace, NormalizationRef};
use crate::policy::{
    postmix, postmix_batch, premix, MaskConstant, PolicyConfig, Schema, SelectionKind, TwoStagePolicy,
};
use crate::replay::{Batch, ReplayBuffer, Transition};
use crate::trainer::{decision, Agent, Decision, Mode, PolicyDraws, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Suite names, in the order [`run_all`] runs them.
pub const SUITES: [&str; 7] = [
    "repeat invariant",
    "gradient fidelity",
    "estimator equivalence",
    "sac equivalence",
    "temperature adaptation",
    "metric examples",
    "repeat marginals",
];

fn run_suite(name: &str) -> CheckOutcome {
    match name {
        "repeat invariant" => repeat_invariant(10_000, 0),
        "gradient fidelity" => gradient_fidelity(0),
        "estimator equivalence" => estimator_equivalence(100_000, 0),
        "sac equivalence" => sac_equivalence(1000, 0),
        "temperature adaptation" => temperature_adaptation(0),
        "metric examples" => metric_examples(),
        _ => repeat_marginals(20, 100_000, 0),
    }
}

/// Every suite at full size.
pub fn run_all() -> Vec<CheckOutcome> {
    run_all_filtered(None)
}

/// The suites whose name contains `only` (all of them for `None`).
pub fn run_all_filtered(only: Option<&str>) -> Vec<CheckOutcome> {
    SUITES
        .iter()
        .filter(|n| only.is_none_or(|o| n.contains(o)))
        .map(|n| run_suite(n))
        .collect()
}

fn policy_config(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> PolicyConfig {
    PolicyConfig {
        obs_dim,
        act_dim,
        hidden: hidden.to_vec(),
        xi: MaskConstant::default(),
        selection: SelectionKind::Decoupled,
        mask_pi_entropy: false,
    }
}

fn normals<R: Rng>(n: usize, rng: &mut R) -> Vec<Real> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Repeated components are bitwise copies: `(a − a_prev)⊙(1 − b) = 0` on
/// random states, previous actions, schemas and noise for `|A| ∈ {1, 2, 4, 8}`,
/// through both the single-sample and the batched paths.
pub fn repeat_invariant(tuples: usize, seed: u64) -> CheckOutcome {
    timed("repeat invariant", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [1usize, 2, 4, 8];
        let obs_dim = 5;
        let policies: Vec<TwoStagePolicy> = dims
            .iter()
            .map(|&n| TwoStagePolicy::new(policy_config(obs_dim, n, &[16, 16]), &mut rng))
            .collect::<Result<_>>()?;
        let mut violations = 0usize;
        for i in 0..tuples {
            let k = i % dims.len();
            let (n, policy) = (dims[k], &policies[k]);
            let scale = [1.0, 10.0, 100.0][i % 3];
            let s: Vec<Real> = normals(obs_dim, &mut rng).iter().map(|x| x * scale).collect();
            let a_prev: Vec<Real> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = Schema((0..n).map(|_| rng.random::<bool>()).collect());
            let z: Vec<Real> = normals(n, &mut rng).iter().map(|x| x * scale).collect();
            let a_mix = premix(&b, &a_prev, policy.config.xi);
            let (a_hat, _) = policy.gaussian_action(&s, &a_mix, &z, Some(&b))?;
            let a = postmix(&b, &a_prev, &a_hat);
            let mask = Array2::from_shape_fn((1, n), |(_, c)| if b[c] { 1.0 } else { 0.0 });
            let prev = Array2::from_shape_vec((1, n), a_prev.clone()).expect("shape");
            let hat = Array2::from_shape_vec((1, n), a_hat.0.clone()).expect("shape");
            let batched = postmix_batch(mask.view(), prev.view(), hat.view());
            let sampled = policy.act(&s, &a_prev, false, &mut rng)?;
            for c in 0..n {
                let keep = if b[c] { 0.0 } else { 1.0 };
                if (a[c] - a_prev[c]) * keep != 0.0 || (!b[c] && a[c].to_bits() != a_prev[c].to_bits()) {
                    violations += 1;
                }
                if !b[c] && batched[[0, c]].to_bits() != a_prev[c].to_bits() {
                    violations += 1;
                }
                if !sampled.schema[c] && sampled.action[c].to_bits() != a_prev[c].to_bits() {
                    violations += 1;
                }
            }
        }
        Ok((violations == 0, format!("{tuples} tuples, {violations} violations")))
    })
}

fn synthetic_transitions<R: Rng>(count: usize, obs_dim: usize, act_dim: usize, rng: &mut R) -> Vec<Transition> {
    (0..count)
        .map(|i| Transition {
            obs: normals(obs_dim, rng),
            a_prev: (0..act_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: (0..act_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            reward: rng.random_range(-1.0..1.0),
            next_obs: normals(obs_dim, rng),
            terminal: i % 11 == 5,
            truncated: false,
            episode_start: i % 7 == 3,
            episode_start_next: false,
        })
        .collect()
}

fn batch_of(items: &[Transition]) -> Result<Batch> {
    let refs: Vec<&Transition> = items.iter().collect();
    Batch::from_transitions(&refs)
}

fn small_agent(act_dim: usize, seed: u64) -> Result<Agent> {
    let config = TrainConfig {
        hidden: vec![8, 8],
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = Agent::new(3, act_dim, &config, &mut rng)?;
    agent.temps.log_alpha_beta = (0.3 as Real).ln();
    agent.temps.log_alpha_pi = (0.15 as Real).ln();
    Ok(agent)
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)` over
/// every parameter of `params`, with central differences of step `h`.
fn max_relative_error(
    params: &mut ParamSet,
    analytic: &GradSet,
    h: Real,
    mut objective: impl FnMut(&ParamSet) -> Result<Real>,
) -> Result<Real> {
    let flat = params.to_flat();
    let grad = analytic.to_flat();
    let mut worst: Real = 0.0;
    let mut probe = flat.clone();
    for i in 0..flat.len() {
        probe[i] = flat[i] + h;
        params.set_flat(&probe)?;
        let up = objective(params)?;
        probe[i] = flat[i] - h;
        params.set_flat(&probe)?;
        let down = objective(params)?;
        probe[i] = flat[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    params.set_flat(&flat)?;
    Ok(worst)
}

/// Analytic gradients of the critic loss, the action-policy objective (pinned
/// noise) and the exact selection objective against central differences.
pub fn gradient_fidelity(seed: u64) -> CheckOutcome {
    timed("gradient fidelity", || {
        const H: Real = 1e-5;
        const TOL: Real = 1e-3;
        let act_dim = 2;
        let mut agent = small_agent(act_dim, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
        let items = synthetic_transitions(12, 3, act_dim, &mut rng);
        let batch = batch_of(&items)?;

        let targets = TargetBatch(Array1::from_shape_fn(batch.len(), |_| rng.random_range(-2.0..2.0)));
        let out = agent.critics.loss_and_grads(batch.obs.view(), batch.action.view(), &targets)?;
        let mut critics = agent.critics.clone();
        let mut q1 = critics.q1.clone();
        let e_q1 = max_relative_error(&mut q1, &out.grads_q1, H, |p| {
            critics.q1 = p.clone();
            Ok(critics.loss_and_grads(batch.obs.view(), batch.action.view(), &targets)?.loss)
        })?;
        let mut critics = agent.critics.clone();
        let mut q2 = critics.q2.clone();
        let e_q2 = max_relative_error(&mut q2, &out.grads_q2, H, |p| {
            critics.q2 = p.clone();
            Ok(critics.loss_and_grads(batch.obs.view(), batch.action.view(), &targets)?.loss)
        })?;

        let draws = PolicyDraws {
            uniforms: Some(Array2::from_shape_fn((batch.len(), act_dim), |_| rng.random())),
            normals: Array2::from_shape_fn((batch.len(), act_dim), |_| rng.sample(StandardNormal)),
        };
        let pi = agent.action_policy_eval(&batch, &draws)?;
        let mut action = agent.policy.action.clone();
        let mut probe = agent.clone();
        let e_pi = max_relative_error(&mut action, &pi.grads, H, |p| {
            probe.policy.action = p.clone();
            Ok(probe.action_policy_eval(&batch, &draws)?.objective)
        })?;

        let active = agent.selection_rows(&batch).len();
        let pinned = Array2::from_shape_fn((active << act_dim, act_dim), |_| rng.sample(StandardNormal));
        let sel = agent.selection_exact_eval(&batch, pinned.view())?;
        let mut selection = agent.policy.selection.clone();
        let e_beta = max_relative_error(&mut selection, &sel.grads, H, |p| {
            agent.policy.selection = p.clone();
            Ok(agent.selection_exact_eval(&batch, pinned.view())?.objective)
        })?;

        let worst = e_q1.max(e_q2).max(e_pi).max(e_beta);
        Ok((
            worst < TOL,
            format!(
                "max relative error: critic {:.2e}/{:.2e}, action policy {:.2e}, selection {:.2e} (limit {TOL:.0e})",
                e_q1, e_q2, e_pi, e_beta
            ),
        ))
    })
}

/// The mean of single-draw sampled selection gradients approaches the exact
/// enumeration gradient. Each (state, schema) pair uses one pinned normal
/// draw in both estimators, so the exact gradient is the true expectation.
pub fn estimator_equivalence(draws: usize, seed: u64) -> CheckOutcome {
    timed("estimator equivalence", || {
        let act_dim = 2;
        let count = 1usize << act_dim;
        let agent = small_agent(act_dim, seed + 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
        let mut items = synthetic_transitions(8, 3, act_dim, &mut rng);
        for t in &mut items {
            t.episode_start = false;
        }
        let batch = batch_of(&items)?;
        let rows = batch.len();
        let pinned = Array2::from_shape_fn((rows * count, act_dim), |_| rng.sample(StandardNormal));
        let exact = agent.selection_exact_eval(&batch, pinned.view())?.grads.to_flat();

        let mut mean = vec![0.0 as Real; exact.len()];
        let mut m2 = vec![0.0 as Real; exact.len()];
        let mut lookup = Array2::zeros((rows, act_dim));
        for d in 0..draws {
            let masks = agent.sample_selection_masks(&batch, 1, &mut rng)?;
            for r in 0..rows {
                let j: usize = (0..act_dim).map(|k| (masks[[r, k]] as usize) << k).sum();
                lookup.row_mut(r).assign(&pinned.row(r * count + j));
            }
            let g = agent
                .selection_sampled_eval(&batch, masks.view(), lookup.view(), 1)?
                .grads
                .to_flat();
            let n = (d + 1) as Real;
            for i in 0..g.len() {
                let delta = g[i] - mean[i];
                mean[i] += delta / n;
                m2[i] += delta * (g[i] - mean[i]);
            }
        }
        let n = draws as Real;
        let mut worst_z: Real = 0.0;
        let mut outside = 0;
        for i in 0..exact.len() {
            let se = (m2[i] / (n - 1.0) / n).sqrt();
            let diff = (mean[i] - exact[i]).abs();
            if se == 0.0 {
                if diff > 1e-12 {
                    outside += 1;
                }
                continue;
            }
            let z = diff / se;
            worst_z = worst_z.max(z);
            if z > 3.0 {
                outside += 1;
            }
        }
        Ok((
            outside == 0,
            format!(
                "{draws} draws, {} coordinates, max |z| = {worst_z:.2}, {outside} outside 3 SE",
                exact.len()
            ),
        ))
    })
}

const HALF_LN_2PI: Real = 0.918_938_533_204_672_8;

/// Plain single-stage soft actor-critic on the same network substrate. The
/// policy input is the state followed by the mask constant in every action
/// slot.
pub struct ReferenceSac {
    pub pi: ParamSet,
    pub q1: ParamSet,
    pub q2: ParamSet,
    pub q1_target: ParamSet,
    pub q2_target: ParamSet,
    opt_pi: AdamState,
    opt_q1: AdamState,
    opt_q2: AdamState,
    pub log_alpha: Real,
    opt_alpha: AdamState,
    target_entropy: Real,
    xi: Real,
    gamma: Real,
    tau: Real,
    lr_pi: Real,
    lr_q: Real,
    lr_alpha: Real,
    act_dim: usize,
}

struct Sampled {
    trace: ForwardTrace,
    std: Array2<Real>,
    noise: Array2<Real>,
    action: Array2<Real>,
    log_pi: Array1<Real>,
    active: Array2<bool>,
}

impl ReferenceSac {
    /// Initializes the policy, then critic 1, then critic 2 from `rng`.
    pub fn new<R: Rng>(obs_dim: usize, act_dim: usize, config: &TrainConfig, rng: &mut R) -> Result<Self> {
        let mut pi_sizes = vec![obs_dim + act_dim];
        pi_sizes.extend(&config.hidden);
        pi_sizes.push(2 * act_dim);
        let mut q_sizes = vec![obs_dim + act_dim];
        q_sizes.extend(&config.hidden);
        q_sizes.push(1);
        let pi = ParamSet::init_uniform(&pi_sizes, rng)?;
        let q1 = ParamSet::init_uniform(&q_sizes, rng)?;
        let q2 = ParamSet::init_uniform(&q_sizes, rng)?;
        Ok(ReferenceSac {
            opt_pi: AdamState::for_params(&pi),
            opt_q1: AdamState::for_params(&q1),
            opt_q2: AdamState::for_params(&q2),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            pi,
            q1,
            q2,
            log_alpha: config.init_log_alpha as Real,
            opt_alpha: AdamState::new(1),
            target_entropy: -(act_dim as Real),
            xi: config.xi as Real,
            gamma: config.gamma as Real,
            tau: config.tau as Real,
            lr_pi: config.lr_pi as Real,
            lr_q: config.lr_q as Real,
            lr_alpha: config.lr_alpha as Real,
            act_dim,
        })
    }

    fn sample(&self, obs: &Array2<Real>, noise: Array2<Real>) -> Result<Sampled> {
        let n = self.act_dim;
        let rows = obs.nrows();
        let mut input = Array2::from_elem((rows, obs.ncols() + n), self.xi);
        input.slice_mut(s![.., ..obs.ncols()]).assign(obs);
        let trace = self.pi.forward_cached(input)?;
        let out = trace.output();
        let mut std = Array2::zeros((rows, n));
        let mut action = Array2::zeros((rows, n));
        let mut active = Array2::from_elem((rows, n), false);
        let mut log_pi = Array1::zeros(rows);
        for r in 0..rows {
            let mut lp = 0.0;
            for c in 0..n {
                let raw = out[[r, n + c]];
                active[[r, c]] = (-5.0..=2.0).contains(&raw);
                let log_std = raw.clamp(-5.0, 2.0);
                std[[r, c]] = log_std.exp();
                let z = noise[[r, c]];
                let t = (out[[r, c]] + std[[r, c]] * z).tanh();
                action[[r, c]] = t;
                lp += -0.5 * z * z - log_std - HALF_LN_2PI - (1.0 - t * t + 1e-6).ln();
            }
            log_pi[r] = lp;
        }
        Ok(Sampled { trace, std, noise, action, log_pi, active })
    }

    fn joined(obs: &Array2<Real>, action: &Array2<Real>) -> Array2<Real> {
        ndarray::concatenate(ndarray::Axis(1), &[obs.view(), action.view()]).expect("same rows")
    }

    pub fn update<R: Rng>(&mut self, batch: &Batch, policy_step: bool, rng: &mut R) -> Result<()> {
        let rows = batch.len();
        let n = rows as Real;
        let alpha = self.log_alpha.exp();
        let draw = |rng: &mut R| Array2::from_shape_fn((rows, self.act_dim), |_| rng.sample(StandardNormal));

        let next = self.sample(&batch.next_obs, draw(rng))?;
        let x_next = Self::joined(&batch.next_obs, &next.action);
        let t1 = self.q1_target.forward_batch(x_next.view())?;
        let t2 = self.q2_target.forward_batch(x_next.view())?;
        let mut y = Array2::zeros((rows, 1));
        for r in 0..rows {
            let q = t1[[r, 0]].min(t2[[r, 0]]);
            y[[r, 0]] = if batch.terminal[r] != 0.0 {
                batch.reward[r]
            } else {
                batch.reward[r] + self.gamma * (q - alpha * next.log_pi[r])
            };
        }
        let x = Self::joined(&batch.obs, &batch.action);
        let c1 = self.q1.forward_cached(x.clone())?;
        let c2 = self.q2.forward_cached(x)?;
        let (g1, _) = self.q1.backward(&c1, ((c1.output() - &y) / n).view())?;
        let (g2, _) = self.q2.backward(&c2, ((c2.output() - &y) / n).view())?;
        self.opt_q1.step(&mut self.q1, &g1, self.lr_q)?;
        self.opt_q2.step(&mut self.q2, &g2, self.lr_q)?;
        if !policy_step {
            return Ok(());
        }

        let cur = self.sample(&batch.obs, draw(rng))?;
        let x = Self::joined(&batch.obs, &cur.action);
        let p1 = self.q1.forward_cached(x.clone())?;
        let p2 = self.q2.forward_cached(x)?;
        let mut up1 = Array2::zeros((rows, 1));
        let mut up2 = Array2::zeros((rows, 1));
        for r in 0..rows {
            if p1.output()[[r, 0]] <= p2.output()[[r, 0]] {
                up1[[r, 0]] = 1.0;
            } else {
                up2[[r, 0]] = 1.0;
            }
        }
        let (_, dx1) = self.q1.backward(&p1, up1.view())?;
        let (_, dx2) = self.q2.backward(&p2, up2.view())?;
        let obs_dim = batch.obs.ncols();
        let dq = (&dx1 + &dx2).slice_move(s![.., obs_dim..]);
        let d_lp = -alpha / n;
        let k = self.act_dim;
        let mut upstream = Array2::zeros((rows, 2 * k));
        for r in 0..rows {
            for c in 0..k {
                let t = cur.action[[r, c]];
                let one_minus = 1.0 - t * t;
                let d_u = dq[[r, c]] / n * one_minus + d_lp * (2.0 * t * one_minus / (one_minus + 1e-6));
                // Descent direction: the objective is maximized.
                upstream[[r, c]] = -d_u;
                if cur.active[[r, c]] {
                    upstream[[r, k + c]] = -(d_u * (cur.std[[r, c]] * cur.noise[[r, c]]) - d_lp);
                }
            }
        }
        let (g_pi, _) = self.pi.backward(&cur.trace, upstream.view())?;
        self.opt_pi.step(&mut self.pi, &g_pi, self.lr_pi)?;

        let mean_log_pi = cur.log_pi.sum() / n;
        let mut la = [self.log_alpha];
        self.opt_alpha
            .step_slice(&mut la, &[-(mean_log_pi + self.target_entropy)], self.lr_alpha)?;
        self.log_alpha = la[0];
        self.q1_target.soft_update(&self.q1, self.tau)?;
        self.q2_target.soft_update(&self.q2, self.tau)?;
        Ok(())
    }
}

/// `mode = sac` and [`ReferenceSac`] end with bit-identical parameters after
/// `updates` updates on a frozen synthetic buffer.
pub fn sac_equivalence(updates: usize, seed: u64) -> CheckOutcome {
    timed("sac equivalence", || {
        let (obs_dim, act_dim) = (4, 2);
        let config = TrainConfig {
            mode: Mode::Sac,
            hidden: vec![16, 16],
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        };
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let mut agent = Agent::new(obs_dim, act_dim, &config, &mut init.clone())?;
        let mut reference = ReferenceSac::new(obs_dim, act_dim, &config, &mut init)?;

        let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDA7A);
        let mut buffer = ReplayBuffer::new(500, obs_dim, act_dim)?;
        for t in synthetic_transitions(500, obs_dim, act_dim, &mut data_rng) {
            buffer.push(t)?;
        }
        let mut rng_agent = ChaCha8Rng::seed_from_u64(seed ^ 0x5AC);
        let mut rng_ref = rng_agent.clone();
        for u in 0..updates {
            let batch = buffer.sample(config.batch_size, &mut data_rng)?;
            let policy_step = u % config.policy_delay as usize == 0;
            agent.update(&batch, policy_step, &mut rng_agent)?;
            reference.update(&batch, policy_step, &mut rng_ref)?;
        }
        let pairs = [
            ("action", &agent.policy.action, &reference.pi),
            ("q1", &agent.critics.q1, &reference.q1),
            ("q2", &agent.critics.q2, &reference.q2),
            ("q1 target", &agent.critics.q1_target, &reference.q1_target),
            ("q2 target", &agent.critics.q2_target, &reference.q2_target),
        ];
        let mut differing = Vec::new();
        let mut total = 0;
        for (name, a, b) in pairs {
            let (fa, fb) = (a.to_flat(), b.to_flat());
            total += fa.len();
            let count = fa.iter().zip(&fb).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
            if count > 0 || fa.len() != fb.len() {
                differing.push(format!("{name}: {count} differ"));
            }
        }
        if agent.temps.log_alpha_pi.to_bits() != reference.log_alpha.to_bits() {
            differing.push("log alpha differs".into());
        }
        let passed = differing.is_empty();
        let detail = if passed {
            format!("{updates} updates, {total} parameters and log alpha bit-identical")
        } else {
            differing.join(", ")
        };
        Ok((passed, detail))
    })
}

/// Sets the last layer of `params` to zero weights and `bias` on the given
/// output columns.
fn pin_outputs(params: &mut ParamSet, columns: std::ops::Range<usize>, bias: Real) {
    let last = params.layers_mut().last_mut().expect("non-empty network");
    for c in columns {
        last.weights.column_mut(c).fill(0.0);
        last.bias[c] = bias;
    }
}

/// Temperatures move toward their targets, and stay put at the target.
pub fn temperature_adaptation(seed: u64) -> CheckOutcome {
    timed("temperature adaptation", || {
        let act_dim = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E);
        let mut items = synthetic_transitions(32, 3, act_dim, &mut rng);
        for t in &mut items {
            t.episode_start = false;
        }
        let batch = batch_of(&items)?;
        let config = TrainConfig {
            hidden: vec![8, 8],
            lambda: 0.5,
            ..TrainConfig::default()
        };
        let base = Agent::new(3, act_dim, &config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let expected_h_beta = 0.5 * act_dim as Real * std::f64::consts::LN_2 as Real;
        let mut failures = Vec::new();
        if (base.temps.target_beta - expected_h_beta).abs() > 1e-15 {
            failures.push(format!("H_beta = {} instead of {expected_h_beta}", base.temps.target_beta));
        }

        // (log-std bias, selection logit bias, expected sign of Δα_π, of Δα_β)
        let cases: [(Real, Real, Real, Real); 2] = [(-4.0, 8.0, 1.0, 1.0), (0.0, 0.0, -1.0, -1.0)];
        for (log_std, logit, pi_sign, beta_sign) in cases {
            let mut agent = base.clone();
            pin_outputs(&mut agent.policy.action, 0..act_dim, 0.0);
            pin_outputs(&mut agent.policy.action, act_dim..2 * act_dim, log_std);
            pin_outputs(&mut agent.policy.selection, 0..act_dim, logit);
            let (ab, ap) = (agent.temps.alpha_beta(), agent.temps.alpha_pi());
            let stats = agent.update(&batch, true, &mut rng.clone())?;
            let h_pi = -stats.mean_log_pi.unwrap_or(Real::NAN);
            let h_beta = -stats.mean_log_beta.unwrap_or(Real::NAN);
            let below_pi = h_pi < agent.temps.target_pi;
            let below_beta = h_beta < agent.temps.target_beta;
            let d_pi = agent.temps.alpha_pi() - ap;
            let d_beta = agent.temps.alpha_beta() - ab;
            if below_pi != (pi_sign > 0.0) || below_beta != (beta_sign > 0.0) {
                failures.push(format!("case setup did not reach the intended side (H_pi {h_pi:.3}, H_beta {h_beta:.3})"));
            }
            if d_pi * pi_sign <= 0.0 {
                failures.push(format!("entropy {h_pi:.3} vs target {}: alpha_pi moved by {d_pi:e}", agent.temps.target_pi));
            }
            if d_beta * beta_sign <= 0.0 {
                failures.push(format!("entropy {h_beta:.3} vs target {}: alpha_beta moved by {d_beta:e}", agent.temps.target_beta));
            }
        }

        let mut probe = base.clone();
        let stats = probe.update(&batch, true, &mut rng.clone())?;
        let mut agent = base.clone();
        agent.temps.target_pi = -stats.mean_log_pi.unwrap_or(Real::NAN);
        agent.temps.target_beta = -stats.mean_log_beta.unwrap_or(Real::NAN);
        let before = (agent.temps.log_alpha_beta, agent.temps.log_alpha_pi);
        agent.update(&batch, true, &mut rng.clone())?;
        let moved_beta = (agent.temps.log_alpha_beta - before.0).abs();
        let moved_pi = (agent.temps.log_alpha_pi - before.1).abs();
        if moved_beta >= 1e-12 || moved_pi >= 1e-12 {
            failures.push(format!("at the target log alpha moved by {moved_beta:e} / {moved_pi:e}"));
        }
        let passed = failures.is_empty();
        Ok((
            passed,
            if passed {
                format!("both directions correct for both temperatures; stationary drift {moved_beta:e} / {moved_pi:e}")
            } else {
                failures.join("; ")
            },
        ))
    })
}

fn trace_from(initial: Vec<Real>, actions: Vec<Vec<Real>>) -> EpisodeTrace {
    let n = initial.len();
    let mut t = EpisodeTrace::new(initial);
    for a in actions {
        t.record(a, Schema::all_act(n), 0.0);
    }
    t
}

/// APR/AFR/n-score/AUC reference examples, exact to 1e-12.
pub fn metric_examples() -> CheckOutcome {
    timed("metric examples", || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut results: Vec<(&str, Real, Real)> = Vec::new();

        let fresh: Vec<Vec<Real>> = (0..200).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        results.push(("APR without repeats", apr(&[trace_from(vec![0.0; 2], fresh)], None)?.apr, 1.0));

        let mut nrep = EpisodeTrace::new(vec![0.0; 3]);
        let mut prev = vec![0.0; 3];
        for t in 0..400u64 {
            let (a, b) = match decision(Mode::Nrep(4), t) {
                Decision::ForceRepeat => (prev.clone(), Schema::all_repeat(3)),
                _ => ((0..3).map(|_| rng.random_range(-1.0..1.0)).collect(), Schema::all_act(3)),
            };
            nrep.record(a.clone(), b, 0.0);
            prev = a;
        }
        results.push(("APR of N-Rep(4)", apr(&[nrep], None)?.apr, 4.0));

        let quarter: Vec<Vec<Real>> = (0..8).map(|t| vec![if t % 4 == 0 { t as Real + 1.0 } else { (t - t % 4) as Real + 1.0 }]).collect();
        results.push(("APR at p = 0.75", apr(&[trace_from(vec![0.0], quarter)], None)?.apr, 4.0));

        results.push(("AFR constant", afr(&[trace_from(vec![0.5], vec![vec![0.5]; 10])], AfrNorm::Euclidean)?, 0.0));
        let alternating: Vec<Vec<Real>> = (0..10).map(|t| vec![if t % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        results.push(("AFR alternating", afr(&[trace_from(vec![-1.0], alternating)], AfrNorm::Euclidean)?, 2.0));
        results.push(("AFR Euclidean", afr(&[trace_from(vec![0.0, 0.0], vec![vec![3.0, 4.0]])], AfrNorm::Euclidean)?, 5.0));

        let reference = NormalizationRef { z0: -50.0, z1: 150.0 };
        results.push(("n-score at z0", n_score(-50.0, reference)? as Real, 0.0));
        results.push(("n-score at z1", n_score(150.0, reference)? as Real, 1.0));
        results.push(("n-score midway", n_score(100.0, reference)? as Real, 0.75));
        results.push(("AUC constant", auc(&[(0.0, 3.5), (10.0, 3.5), (25.0, 3.5)])? as Real, 3.5));
        results.push(("AUC ramp", auc(&[(0.0, 0.0), (100.0, 1.0)])? as Real, 0.5));

        let bad: Vec<String> = results
            .iter()
            .filter(|(_, got, want)| (got - want).abs() > 1e-12)
            .map(|(name, got, want)| format!("{name}: {got} != {want}"))
            .collect();
        Ok((
            bad.is_empty(),
            if bad.is_empty() {
                format!("{} examples exact", results.len())
            } else {
                bad.join("; ")
            },
        ))
    })
}

/// Empirical `P(a_i == a_prev_i)` over repeated stochastic decisions equals
/// `1 − β_i` within three binomial standard errors.
pub fn repeat_marginals(states: usize, calls: usize, seed: u64) -> CheckOutcome {
    timed("repeat marginals", || {
        let (obs_dim, act_dim) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3A);
        let mut policy = TwoStagePolicy::new(policy_config(obs_dim, act_dim, &[16]), &mut rng)?;
        // Spread the act probabilities away from 1/2.
        let last = policy.selection.layers_mut().last_mut().expect("non-empty network");
        last.weights *= 4.0;
        let mut worst: Real = 0.0;
        let mut outside = 0;
        for _ in 0..states {
            let s = normals(obs_dim, &mut rng);
            let a_prev: Vec<Real> = (0..act_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let beta = policy.selection_probs(&s, &a_prev)?.probs;
            let mut repeats = vec![0usize; act_dim];
            for _ in 0..calls {
                let out = policy.act(&s, &a_prev, false, &mut rng)?;
                for i in 0..act_dim {
                    if out.action[i] == a_prev[i] {
                        repeats[i] += 1;
                    }
                }
            }
            for i in 0..act_dim {
                let p = 1.0 - beta[i];
                let sigma = (p * (1.0 - p) / calls as Real).sqrt();
                let freq = repeats[i] as Real / calls as Real;
                let z = if sigma > 0.0 { (freq - p).abs() / sigma } else { (freq - p).abs() * 1e12 };
                worst = worst.max(z);
                if z > 3.0 {
                    outside += 1;
                }
            }
        }
        Ok((
            outside == 0,
            format!(
                "{states} states x {act_dim} dims, {calls} calls each, max |z| = {worst:.2}, {outside} outside 3 sigma"
            ),
        ))
    })
}
