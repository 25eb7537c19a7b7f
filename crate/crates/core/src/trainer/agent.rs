//! Learnable state of one agent and the gradient computations of each update.
//!
//! Every `*_eval` function is pure: it takes the random draws it needs as
//! explicit arrays, so tests can pin them and compare against finite
//! differences. The `update` driver draws them from an rng in a fixed order.

use std::f64::consts::LN_2;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{AdamState, GradSet, ParamSet, Real};
use crate::critic::{assemble_targets, CriticPair, TargetBatch};
use crate::error::{Error, Result};
use crate::policy::{
    log_beta_logit_grad, log_beta_rows, normal_matrix, postmix_batch, premix_batch, repeat_rows, sigmoid,
    uniform_matrix, MaskConstant, PolicyConfig, Schema, SelectionKind, TwoStagePolicy,
};
use crate::replay::Batch;

use super::config::{BetaUpdate, TrainConfig};

/// Where schemas come from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemaRule {
    /// Sampled from the selection network (all-act at episode starts).
    Learned,
    /// Every dimension acts; the selection network is never consulted.
    AlwaysAct,
}

/// Learned temperatures for the two entropy bonuses.
#[derive(Clone, Debug, PartialEq)]
pub struct Temperatures {
    pub log_alpha_beta: Real,
    pub log_alpha_pi: Real,
    pub target_beta: Real,
    pub target_pi: Real,
    pub adam_beta: AdamState,
    pub adam_pi: AdamState,
    /// `false` freezes `log_alpha_beta` (modes without a selection network).
    pub learn_beta: bool,
}

impl Temperatures {
    /// Targets `H_β = λ·switches·ln 2` and `H_π = −act_dim`.
    pub fn new(act_dim: usize, switches: usize, lambda: Real, init_log_alpha: Real, learn_beta: bool) -> Self {
        Temperatures {
            log_alpha_beta: init_log_alpha,
            log_alpha_pi: init_log_alpha,
            target_beta: lambda * switches as Real * LN_2 as Real,
            target_pi: -(act_dim as Real),
            adam_beta: AdamState::new(1),
            adam_pi: AdamState::new(1),
            learn_beta,
        }
    }

    pub fn alpha_beta(&self) -> Real {
        self.log_alpha_beta.exp()
    }

    pub fn alpha_pi(&self) -> Real {
        self.log_alpha_pi.exp()
    }

    /// Gradients of `−log α·(E[log p] + H)` with respect to each `log α`.
    ///
    /// When the measured entropy `−E[log p]` is below its target the
    /// gradient is negative, so a descent step raises `α`.
    pub fn gradients(&self, mean_log_beta: Option<Real>, mean_log_pi: Real) -> (Option<Real>, Real) {
        let g_beta = mean_log_beta.map(|lb| -(lb + self.target_beta));
        let g_pi = -(mean_log_pi + self.target_pi);
        (g_beta, g_pi)
    }

    /// One Adam descent step on each learned `log α`.
    pub fn update(&mut self, mean_log_beta: Option<Real>, mean_log_pi: Real, lr: Real) -> Result<()> {
        let (g_beta, g_pi) = self.gradients(mean_log_beta, mean_log_pi);
        if let (true, Some(g)) = (self.learn_beta, g_beta) {
            let mut x = [self.log_alpha_beta];
            self.adam_beta.step_slice(&mut x, &[g], lr)?;
            self.log_alpha_beta = x[0];
        }
        let mut x = [self.log_alpha_pi];
        self.adam_pi.step_slice(&mut x, &[g_pi], lr)?;
        self.log_alpha_pi = x[0];
        Ok(())
    }
}

/// Scalars the update step needs from the run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateSettings {
    pub rule: SchemaRule,
    pub beta_update: Option<BetaUpdate>,
    pub sample_count: usize,
    pub gamma: Real,
    pub tau: Real,
    pub lr_pi: Real,
    pub lr_beta: Real,
    pub lr_q: Real,
    pub lr_alpha: Real,
    pub soft_target_entropy: bool,
}

impl UpdateSettings {
    pub fn from_config(config: &TrainConfig, act_dim: usize) -> Result<Self> {
        Ok(UpdateSettings {
            rule: if config.mode.learns_selection() {
                SchemaRule::Learned
            } else {
                SchemaRule::AlwaysAct
            },
            beta_update: config.resolve_beta_update(act_dim)?,
            sample_count: config.sample_count,
            gamma: config.gamma as Real,
            tau: config.tau as Real,
            lr_pi: config.lr_pi as Real,
            lr_beta: config.lr_beta as Real,
            lr_q: config.lr_q as Real,
            lr_alpha: config.lr_alpha as Real,
            soft_target_entropy: config.soft_target_entropy,
        })
    }
}

/// Policies, critics, temperatures and their optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub policy: TwoStagePolicy,
    pub critics: CriticPair,
    pub temps: Temperatures,
    pub opt_pi: AdamState,
    pub opt_beta: AdamState,
    pub opt_q1: AdamState,
    pub opt_q2: AdamState,
    pub settings: UpdateSettings,
}

/// Random inputs of the action-policy objective.
#[derive(Clone, Debug)]
pub struct PolicyDraws {
    /// `rows × switches` uniforms deciding the schema (ignored on forced rows
    /// and when every dimension acts).
    pub uniforms: Option<Array2<Real>>,
    /// `rows × act_dim` standard normals.
    pub normals: Array2<Real>,
}

#[derive(Clone, Debug)]
pub struct ActionPolicyEval {
    pub objective: Real,
    /// Gradient of the objective (ascent direction) for the action network.
    pub grads: GradSet,
    /// Mean `log β(b)` over rows whose schema was sampled.
    pub mean_log_beta: Option<Real>,
    pub mean_log_pi: Real,
}

#[derive(Clone, Debug)]
pub struct SelectionEval {
    pub objective: Real,
    /// Gradient of the objective (ascent direction) for the selection network.
    pub grads: GradSet,
}

/// Per-update diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: Real,
    pub pi_objective: Option<Real>,
    pub beta_objective: Option<Real>,
    pub mean_log_pi: Option<Real>,
    pub mean_log_beta: Option<Real>,
}

fn flag_rows(flags: &Array1<Real>, forced_everywhere: bool) -> Vec<bool> {
    flags.iter().map(|&f| forced_everywhere || f != 0.0).collect()
}

fn ones(rows: usize, cols: usize) -> Array2<Real> {
    Array2::ones((rows, cols))
}

impl Agent {
    /// Initializes in the order action network, critic 1, critic 2,
    /// selection network, all from `init_rng`.
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        config: &TrainConfig,
        init_rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let policy_config = PolicyConfig {
            obs_dim,
            act_dim,
            hidden: config.hidden.clone(),
            xi: MaskConstant::try_from(config.xi)?,
            selection: config.mode.selection_kind(),
            mask_pi_entropy: config.mask_pi_entropy,
        };
        let action = ParamSet::init_uniform(&policy_config.action_sizes(), init_rng)?;
        let critics = CriticPair::new(obs_dim, act_dim, &config.hidden, init_rng)?;
        let selection = ParamSet::init_uniform(&policy_config.selection_sizes(), init_rng)?;
        let policy = TwoStagePolicy::from_params(policy_config, selection, action)?;
        let switches = policy.config.selection_outputs();
        let learns = config.mode.learns_selection();
        let settings = UpdateSettings::from_config(config, act_dim)?;
        Ok(Agent {
            opt_pi: AdamState::for_params(&policy.action),
            opt_beta: AdamState::for_params(&policy.selection),
            opt_q1: AdamState::for_params(&critics.q1),
            opt_q2: AdamState::for_params(&critics.q2),
            temps: Temperatures::new(
                act_dim,
                switches,
                config.lambda as Real,
                config.init_log_alpha as Real,
                learns,
            ),
            policy,
            critics,
            settings,
        })
    }

    pub fn act_dim(&self) -> usize {
        self.policy.config.act_dim
    }

    pub fn switches(&self) -> usize {
        self.policy.config.selection_outputs()
    }

    fn xi(&self) -> MaskConstant {
        self.policy.config.xi
    }

    /// Per-dimension 0/1 schema mask for every row, plus `log β(b)` (zero on
    /// forced rows).
    fn draw_schema(
        &self,
        obs: ArrayView2<Real>,
        a_prev: ArrayView2<Real>,
        forced: &[bool],
        uniforms: Option<&Array2<Real>>,
    ) -> Result<(Array2<Real>, Array1<Real>)> {
        let rows = obs.nrows();
        let n = self.act_dim();
        if forced.iter().all(|&f| f) {
            return Ok((ones(rows, n), Array1::zeros(rows)));
        }
        let uniforms =
            uniforms.ok_or_else(|| Error::config("schema uniforms are required when the schema is sampled"))?;
        if uniforms.dim() != (rows, self.switches()) {
            return Err(Error::config("schema uniforms have the wrong shape"));
        }
        let logits = self.policy.selection_logits(obs, a_prev)?;
        let mut switch_mask = Array2::zeros(logits.dim());
        for r in 0..rows {
            for k in 0..logits.ncols() {
                if forced[r] || uniforms[[r, k]] < sigmoid(logits[[r, k]]) {
                    switch_mask[[r, k]] = 1.0;
                }
            }
        }
        let mut log_beta = log_beta_rows(logits.view(), switch_mask.view());
        for r in 0..rows {
            if forced[r] {
                log_beta[r] = 0.0;
            }
        }
        Ok((self.expand_mask(switch_mask.view()), log_beta))
    }

    /// Switch-space mask (`rows × switches`) to per-dimension mask.
    fn expand_mask(&self, switch_mask: ArrayView2<Real>) -> Array2<Real> {
        match self.policy.config.selection {
            SelectionKind::Decoupled => switch_mask.to_owned(),
            SelectionKind::Coupled => {
                let n = self.act_dim();
                Array2::from_shape_fn((switch_mask.nrows(), n), |(r, _)| switch_mask[[r, 0]])
            }
        }
    }

    /// Regression targets for the critics. The next state's previous action
    /// is the executed action; schemas at `next_obs` are forced all-act on
    /// rows flagged `episode_start_next`.
    pub fn bellman_targets(&self, batch: &Batch, draws: &PolicyDraws) -> Result<TargetBatch> {
        let rows = batch.len();
        let forced = flag_rows(&batch.episode_start_next, self.settings.rule == SchemaRule::AlwaysAct);
        let (mask, log_beta) =
            self.draw_schema(batch.next_obs.view(), batch.action.view(), &forced, draws.uniforms.as_ref())?;
        let a_mix = premix_batch(mask.view(), batch.action.view(), self.xi());
        let head = self
            .policy
            .head_forward(batch.next_obs.view(), a_mix.view(), draws.normals.view(), mask.view())?;
        let next_action = postmix_batch(mask.view(), batch.action.view(), head.a_hat.view());
        let q = self.critics.target_min(batch.next_obs.view(), next_action.view())?;
        let bootstrap = if self.settings.soft_target_entropy {
            let (ab, ap) = (self.temps.alpha_beta(), self.temps.alpha_pi());
            Array1::from_shape_fn(rows, |r| (q[r] - ab * log_beta[r]) - ap * head.log_pi[r])
        } else {
            q
        };
        assemble_targets(
            batch.reward.view(),
            batch.terminal.view(),
            bootstrap.view(),
            self.settings.gamma,
        )
    }

    /// Critic loss and one Adam step on each online critic.
    pub fn critic_step(&mut self, batch: &Batch, targets: &TargetBatch) -> Result<Real> {
        let out = self
            .critics
            .loss_and_grads(batch.obs.view(), batch.action.view(), targets)?;
        let lr = self.settings.lr_q;
        self.opt_q1.step(&mut self.critics.q1, &out.grads_q1, lr)?;
        self.opt_q2.step(&mut self.critics.q2, &out.grads_q2, lr)?;
        Ok(out.loss)
    }

    /// `J = mean[min Q(s, postmix(b, a⁻, â)) − α_β log β(b) − α_π log π(â)]`
    /// with `b` drawn from the (detached) selection network and `â`
    /// reparameterized. Episode-start rows act on every dimension.
    pub fn action_policy_eval(&self, batch: &Batch, draws: &PolicyDraws) -> Result<ActionPolicyEval> {
        let rows = batch.len();
        let forced = flag_rows(&batch.episode_start, self.settings.rule == SchemaRule::AlwaysAct);
        let (mask, log_beta) =
            self.draw_schema(batch.obs.view(), batch.a_prev.view(), &forced, draws.uniforms.as_ref())?;
        let a_mix = premix_batch(mask.view(), batch.a_prev.view(), self.xi());
        let head = self
            .policy
            .head_forward(batch.obs.view(), a_mix.view(), draws.normals.view(), mask.view())?;
        let action = postmix_batch(mask.view(), batch.a_prev.view(), head.a_hat.view());
        let (q, dq_da) = self
            .critics
            .online_min_with_action_grad(batch.obs.view(), action.view())?;
        let (ab, ap) = (self.temps.alpha_beta(), self.temps.alpha_pi());
        let n = rows as Real;
        let mut total = 0.0;
        for r in 0..rows {
            total += (q[r] - ab * log_beta[r]) - ap * head.log_pi[r];
        }
        let objective = total / n;
        if !objective.is_finite() {
            return Err(Error::numerical("action policy update", "non-finite objective"));
        }
        let d_a_hat = (&mask * &dq_da) / n;
        let d_log_pi = Array1::from_elem(rows, -ap / n);
        let grads = self.policy.head_backward(&head, d_a_hat.view(), d_log_pi.view())?;
        let sampled: Vec<usize> = (0..rows).filter(|&r| !forced[r]).collect();
        let mean_log_beta = if sampled.is_empty() {
            None
        } else {
            Some(sampled.iter().map(|&r| log_beta[r]).sum::<Real>() / sampled.len() as Real)
        };
        Ok(ActionPolicyEval {
            objective,
            grads,
            mean_log_beta,
            mean_log_pi: head.log_pi.sum() / n,
        })
    }

    /// Rows whose schema is chosen by the selection network.
    pub fn selection_rows(&self, batch: &Batch) -> Vec<usize> {
        (0..batch.len()).filter(|&r| batch.episode_start[r] == 0.0).collect()
    }

    /// `min Q − α_π log π` for each row of an expanded batch with the given
    /// per-dimension masks.
    fn bracket_terms(
        &self,
        obs: ArrayView2<Real>,
        a_prev: ArrayView2<Real>,
        mask: ArrayView2<Real>,
        normals: ArrayView2<Real>,
    ) -> Result<Array1<Real>> {
        let a_mix = premix_batch(mask, a_prev, self.xi());
        let head = self.policy.head_forward(obs, a_mix.view(), normals, mask)?;
        let action = postmix_batch(mask, a_prev, head.a_hat.view());
        let q = self.critics.online_min(obs, action.view())?;
        let ap = self.temps.alpha_pi();
        Ok(Array1::from_shape_fn(q.len(), |r| q[r] - ap * head.log_pi[r]))
    }

    /// Exact selection objective: every schema is enumerated per row, each
    /// with one pinned normal draw. `normals` has one row per (row, schema)
    /// pair, schemas varying fastest, for the rows in `selection_rows`.
    pub fn selection_exact_eval(&self, batch: &Batch, normals: ArrayView2<Real>) -> Result<SelectionEval> {
        let active = self.selection_rows(batch);
        let switches = self.switches();
        let count = 1usize << switches;
        if normals.dim() != (active.len() * count, self.act_dim()) {
            return Err(Error::config(format!(
                "exact selection update needs {} x {} normals",
                active.len() * count,
                self.act_dim()
            )));
        }
        if active.is_empty() {
            return Ok(SelectionEval {
                objective: 0.0,
                grads: GradSet::zeros_like(&self.policy.selection),
            });
        }
        let obs = batch.obs.select(Axis(0), &active);
        let a_prev = batch.a_prev.select(Axis(0), &active);
        let rows = active.len() * count;
        let mut switch_mask = Array2::zeros((rows, switches));
        for i in 0..active.len() {
            for j in 0..count {
                let b = Schema::from_index(j, switches);
                for k in 0..switches {
                    switch_mask[[i * count + j, k]] = if b[k] { 1.0 } else { 0.0 };
                }
            }
        }
        let obs_e = repeat_rows(obs.view(), count);
        let a_prev_e = repeat_rows(a_prev.view(), count);
        let mask = self.expand_mask(switch_mask.view());
        let bracket = self.bracket_terms(obs_e.view(), a_prev_e.view(), mask.view(), normals)?;

        let trace = self.policy.selection_forward(obs.view(), a_prev.view())?;
        let logits_e = repeat_rows(trace.output().view(), count);
        let log_w = log_beta_rows(logits_e.view(), switch_mask.view());
        let score = log_beta_logit_grad(logits_e.view(), switch_mask.view());
        let ab = self.temps.alpha_beta();
        let n = active.len() as Real;
        let mut objective = 0.0;
        let mut upstream = Array2::zeros((active.len(), switches));
        for e in 0..rows {
            let w = log_w[e].exp();
            objective += w * (bracket[e] - ab * log_w[e]);
            // d/dl [w (T − α log w)] = w · ∂log w/∂l · (T − α log w − α)
            let coeff = w * (bracket[e] - ab * log_w[e] - ab) / n;
            for k in 0..switches {
                upstream[[e / count, k]] += coeff * score[[e, k]];
            }
        }
        objective /= n;
        if !objective.is_finite() {
            return Err(Error::numerical("exact selection update", "non-finite objective"));
        }
        let (grads, _) = self.policy.selection.backward(&trace, upstream.view())?;
        Ok(SelectionEval { objective, grads })
    }

    /// Importance-weighted selection objective for explicit schema draws.
    /// `switch_mask` and `normals` hold `sample_count` consecutive rows per
    /// row of `selection_rows`. The current network doubles as `β_old`, so
    /// every ratio is 1 while its gradient is the score function.
    pub fn selection_sampled_eval(
        &self,
        batch: &Batch,
        switch_mask: ArrayView2<Real>,
        normals: ArrayView2<Real>,
        sample_count: usize,
    ) -> Result<SelectionEval> {
        let active = self.selection_rows(batch);
        let switches = self.switches();
        let rows = active.len() * sample_count;
        if switch_mask.dim() != (rows, switches) || normals.dim() != (rows, self.act_dim()) {
            return Err(Error::config("sampled selection update: draw arrays have the wrong shape"));
        }
        if active.is_empty() {
            return Ok(SelectionEval {
                objective: 0.0,
                grads: GradSet::zeros_like(&self.policy.selection),
            });
        }
        let obs = batch.obs.select(Axis(0), &active);
        let a_prev = batch.a_prev.select(Axis(0), &active);
        let obs_e = repeat_rows(obs.view(), sample_count);
        let a_prev_e = repeat_rows(a_prev.view(), sample_count);
        let mask = self.expand_mask(switch_mask);
        let q_part = self.bracket_terms(obs_e.view(), a_prev_e.view(), mask.view(), normals)?;

        let trace = self.policy.selection_forward(obs.view(), a_prev.view())?;
        let logits_e = repeat_rows(trace.output().view(), sample_count);
        let log_old = log_beta_rows(logits_e.view(), switch_mask);
        let log_new = log_beta_rows(logits_e.view(), switch_mask);
        let score = log_beta_logit_grad(logits_e.view(), switch_mask);
        let ab = self.temps.alpha_beta();
        let n = rows as Real;
        let mut objective = 0.0;
        let mut upstream = Array2::zeros((active.len(), switches));
        for e in 0..rows {
            let bracket = q_part[e] - ab * log_old[e];
            let ratio = (log_new[e] - log_old[e]).exp();
            objective += bracket * ratio;
            let coeff = bracket * ratio / n;
            for k in 0..switches {
                upstream[[e / sample_count, k]] += coeff * score[[e, k]];
            }
        }
        objective /= n;
        if !objective.is_finite() {
            return Err(Error::numerical("sampled selection update", "non-finite objective"));
        }
        let (grads, _) = self.policy.selection.backward(&trace, upstream.view())?;
        Ok(SelectionEval { objective, grads })
    }

    /// Draws schemas from the current selection network for the sampled
    /// update: `sample_count` rows per active batch row.
    pub fn sample_selection_masks<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        sample_count: usize,
        rng: &mut R,
    ) -> Result<Array2<Real>> {
        let active = self.selection_rows(batch);
        let switches = self.switches();
        let uniforms = uniform_matrix(active.len() * sample_count, switches, rng);
        if active.is_empty() {
            return Ok(uniforms);
        }
        let obs = batch.obs.select(Axis(0), &active);
        let a_prev = batch.a_prev.select(Axis(0), &active);
        let logits = self.policy.selection_logits(obs.view(), a_prev.view())?;
        Ok(Array2::from_shape_fn(uniforms.dim(), |(e, k)| {
            if uniforms[[e, k]] < sigmoid(logits[[e / sample_count, k]]) {
                1.0
            } else {
                0.0
            }
        }))
    }

    fn policy_draws<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> PolicyDraws {
        let uniforms = match self.settings.rule {
            SchemaRule::Learned => Some(uniform_matrix(rows, self.switches(), rng)),
            SchemaRule::AlwaysAct => None,
        };
        PolicyDraws {
            uniforms,
            normals: normal_matrix(rows, self.act_dim(), rng),
        }
    }

    /// One training update on `batch`. The critic step always runs; with
    /// `policy_step` the action policy, selection policy, temperatures and
    /// target critics follow, in that order.
    ///
    /// Draw order from `rng`: target draws, then action-policy draws, then
    /// selection draws.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, policy_step: bool, rng: &mut R) -> Result<UpdateStats> {
        let rows = batch.len();
        let target_draws = self.policy_draws(rows, rng);
        let targets = self.bellman_targets(batch, &target_draws)?;
        let critic_loss = self.critic_step(batch, &targets)?;
        let mut stats = UpdateStats {
            critic_loss,
            ..UpdateStats::default()
        };
        if !policy_step {
            return Ok(stats);
        }

        let draws = self.policy_draws(rows, rng);
        let pi = self.action_policy_eval(batch, &draws)?;
        let mut descent = pi.grads.clone();
        descent.scale(-1.0);
        self.opt_pi.step(&mut self.policy.action, &descent, self.settings.lr_pi)?;
        stats.pi_objective = Some(pi.objective);
        stats.mean_log_pi = Some(pi.mean_log_pi);
        stats.mean_log_beta = pi.mean_log_beta;

        if let Some(kind) = self.settings.beta_update {
            let active = self.selection_rows(batch).len();
            let sel = match kind {
                BetaUpdate::Exact => {
                    let normals = normal_matrix(active << self.switches(), self.act_dim(), rng);
                    self.selection_exact_eval(batch, normals.view())?
                }
                _ => {
                    let k = self.settings.sample_count;
                    let masks = self.sample_selection_masks(batch, k, rng)?;
                    let normals = normal_matrix(active * k, self.act_dim(), rng);
                    self.selection_sampled_eval(batch, masks.view(), normals.view(), k)?
                }
            };
            let mut descent = sel.grads;
            descent.scale(-1.0);
            self.opt_beta
                .step(&mut self.policy.selection, &descent, self.settings.lr_beta)?;
            stats.beta_objective = Some(sel.objective);
        }

        self.temps
            .update(pi.mean_log_beta, pi.mean_log_pi, self.settings.lr_alpha)?;
        self.critics.soft_update_targets(self.settings.tau)?;
        Ok(stats)
    }
}
