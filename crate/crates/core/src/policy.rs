//! Two-stage act-or-repeat policy.
//!
//! The selection network maps `(s, a_prev)` to one Bernoulli logit per action
//! dimension (or a single shared logit in coupled mode). A sampled schema `b`
//! marks the dimensions that receive a new action (`true`) and the ones that
//! copy the previous action (`false`). The action network sees the previous
//! action with its act-dimensions overwritten by the mask constant, produces a
//! tanh-squashed Gaussian sample, and the executed action takes the new sample
//! on act-dimensions and the previous action verbatim elsewhere.

use std::ops::Deref;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approximator::{concat_cols, ForwardTrace, GradSet, ParamSet, Real};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: Real = -5.0;
pub const LOG_STD_MAX: Real = 2.0;
/// Logits are clamped to this magnitude before any log-probability.
pub const LOGIT_CLAMP: Real = 15.0;
/// Added inside the tanh log-density correction.
pub const SQUASH_EPS: Real = 1e-6;

const HALF_LN_2PI: Real = 0.918_938_533_204_672_8;

/// A continuous action in `[-1, 1]^|A|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(pub Vec<Real>);

impl ActionVector {
    pub fn zeros(dim: usize) -> Self {
        ActionVector(vec![0.0; dim])
    }
}

impl Deref for ActionVector {
    type Target = [Real];
    fn deref(&self) -> &[Real] {
        &self.0
    }
}

/// Per-dimension act (`true`) or repeat (`false`) choices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema(pub Vec<bool>);

impl Schema {
    pub fn all_act(dim: usize) -> Self {
        Schema(vec![true; dim])
    }

    pub fn all_repeat(dim: usize) -> Self {
        Schema(vec![false; dim])
    }

    /// Schema number `index` in the `2^dim` enumeration; bit `i` is dimension `i`.
    pub fn from_index(index: usize, dim: usize) -> Self {
        Schema((0..dim).map(|i| index >> i & 1 == 1).collect())
    }
}

impl Deref for Schema {
    type Target = [bool];
    fn deref(&self) -> &[bool] {
        &self.0
    }
}

/// Out-of-range sentinel written into act-dimensions of the previous action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MaskConstant(Real);

impl MaskConstant {
    pub fn new(value: Real) -> Result<Self> {
        if !value.is_finite() || (-1.0..=1.0).contains(&value) {
            return Err(Error::config(format!(
                "mask constant {value} must be finite and outside [-1, 1]"
            )));
        }
        Ok(MaskConstant(value))
    }

    pub fn value(self) -> Real {
        self.0
    }
}

impl Default for MaskConstant {
    fn default() -> Self {
        MaskConstant(-2.0)
    }
}

impl TryFrom<f64> for MaskConstant {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        MaskConstant::new(v as Real)
    }
}

impl From<MaskConstant> for f64 {
    fn from(m: MaskConstant) -> f64 {
        m.0 as f64
    }
}

/// How many independent Bernoulli switches the selection stage has.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    /// One switch per action dimension.
    Decoupled,
    /// One switch shared by every dimension.
    Coupled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOutput {
    /// Raw network logits, broadcast to every dimension in coupled mode.
    pub logits: Vec<Real>,
    /// `sigmoid(logits)`: probability of acting per dimension.
    pub probs: Vec<Real>,
    pub kind: SelectionKind,
}

impl SelectionOutput {
    pub fn from_logits(logits: Vec<Real>, kind: SelectionKind) -> Self {
        let probs = logits.iter().map(|&l| sigmoid(l)).collect();
        SelectionOutput { logits, probs, kind }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub action: ActionVector,
    pub schema: Schema,
    pub log_beta: Real,
    pub log_pi: Real,
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without cancellation.
pub fn log_sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn clamp_logit(l: Real) -> Real {
    l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Independent Bernoulli draw per switch. Coupled selection draws once.
pub fn sample_schema<R: Rng + ?Sized>(probs: &SelectionOutput, rng: &mut R) -> Schema {
    match probs.kind {
        SelectionKind::Decoupled => Schema(
            probs
                .probs
                .iter()
                .map(|&p| rng.random::<Real>() < p)
                .collect(),
        ),
        SelectionKind::Coupled => {
            let act = rng.random::<Real>() < probs.probs[0];
            Schema(vec![act; probs.probs.len()])
        }
    }
}

/// Log-probability of a schema under the factorized Bernoulli selection.
pub fn schema_log_prob(probs: &SelectionOutput, b: &Schema) -> Real {
    let term = |logit: Real, act: bool| {
        let l = clamp_logit(logit);
        if act {
            log_sigmoid(l)
        } else {
            log_sigmoid(-l)
        }
    };
    match probs.kind {
        SelectionKind::Decoupled => probs
            .logits
            .iter()
            .zip(b.iter())
            .map(|(&l, &act)| term(l, act))
            .sum(),
        SelectionKind::Coupled => term(probs.logits[0], b[0]),
    }
}

/// Previous action on repeat-dimensions, the mask constant on act-dimensions.
pub fn premix(b: &Schema, a_prev: &[Real], xi: MaskConstant) -> Vec<Real> {
    b.iter()
        .zip(a_prev)
        .map(|(&act, &prev)| if act { xi.value() } else { prev })
        .collect()
}

/// New sample on act-dimensions, the previous action copied elsewhere.
pub fn postmix(b: &Schema, a_prev: &[Real], a_hat: &[Real]) -> ActionVector {
    ActionVector(
        b.iter()
            .zip(a_prev.iter().zip(a_hat))
            .map(|(&act, (&prev, &new))| if act { new } else { prev })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub xi: MaskConstant,
    pub selection: SelectionKind,
    /// Restrict the action-policy entropy to act-dimensions.
    pub mask_pi_entropy: bool,
}

impl PolicyConfig {
    pub fn selection_outputs(&self) -> usize {
        match self.selection {
            SelectionKind::Decoupled => self.act_dim,
            SelectionKind::Coupled => 1,
        }
    }

    pub fn selection_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.obs_dim + self.act_dim];
        s.extend(&self.hidden);
        s.push(self.selection_outputs());
        s
    }

    /// The action network emits `act_dim` means followed by `act_dim` log-stds.
    pub fn action_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.obs_dim + self.act_dim];
        s.extend(&self.hidden);
        s.push(2 * self.act_dim);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStagePolicy {
    pub config: PolicyConfig,
    pub selection: ParamSet,
    pub action: ParamSet,
}

/// Result of a batched action-network pass: everything the reparameterized
/// backward pass needs.
#[derive(Clone, Debug)]
pub struct HeadBatch {
    pub trace: ForwardTrace,
    pub mean: Array2<Real>,
    pub std: Array2<Real>,
    pub noise: Array2<Real>,
    /// `tanh(mean + std * noise)`.
    pub a_hat: Array2<Real>,
    pub log_pi: Array1<Real>,
    log_std_active: Array2<bool>,
    /// 1 on dimensions counted in `log_pi`.
    entropy_mask: Array2<Real>,
}

impl TwoStagePolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        if config.obs_dim == 0 || config.act_dim == 0 {
            return Err(Error::config("observation and action dims must be >= 1"));
        }
        let selection = ParamSet::init_uniform(&config.selection_sizes(), rng)?;
        let action = ParamSet::init_uniform(&config.action_sizes(), rng)?;
        Ok(TwoStagePolicy {
            config,
            selection,
            action,
        })
    }

    pub fn from_params(config: PolicyConfig, selection: ParamSet, action: ParamSet) -> Result<Self> {
        if selection.sizes() != config.selection_sizes() {
            return Err(Error::config(format!(
                "selection network {:?} does not match config {:?}",
                selection.sizes(),
                config.selection_sizes()
            )));
        }
        if action.sizes() != config.action_sizes() {
            return Err(Error::config(format!(
                "action network {:?} does not match config {:?}",
                action.sizes(),
                config.action_sizes()
            )));
        }
        Ok(TwoStagePolicy {
            config,
            selection,
            action,
        })
    }

    pub fn act_dim(&self) -> usize {
        self.config.act_dim
    }

    fn check_dims(&self, s: &[Real], a: &[Real]) -> Result<()> {
        if s.len() != self.config.obs_dim || a.len() != self.config.act_dim {
            return Err(Error::config(format!(
                "policy expects obs {} / action {}, got {} / {}",
                self.config.obs_dim,
                self.config.act_dim,
                s.len(),
                a.len()
            )));
        }
        Ok(())
    }

    pub fn selection_probs(&self, s: &[Real], a_prev: &[Real]) -> Result<SelectionOutput> {
        self.check_dims(s, a_prev)?;
        let input = [s, a_prev].concat();
        let raw = self.selection.forward(&input)?;
        let logits = match self.config.selection {
            SelectionKind::Decoupled => raw,
            SelectionKind::Coupled => vec![raw[0]; self.config.act_dim],
        };
        Ok(SelectionOutput::from_logits(logits, self.config.selection))
    }

    pub fn gaussian_head(&self, s: &[Real], a_mix: &[Real]) -> Result<GaussianHead> {
        self.check_dims(s, a_mix)?;
        let out = self.action.forward(&[s, a_mix].concat())?;
        let n = self.config.act_dim;
        Ok(GaussianHead {
            mean: out[..n].to_vec(),
            std: out[n..]
                .iter()
                .map(|&l| l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp())
                .collect(),
        })
    }

    /// Reparameterized tanh-Gaussian sample and its log-density. `schema` is
    /// only consulted when the entropy is masked to act-dimensions.
    pub fn gaussian_action(
        &self,
        s: &[Real],
        a_mix: &[Real],
        noise: &[Real],
        schema: Option<&Schema>,
    ) -> Result<(ActionVector, Real)> {
        if noise.len() != self.config.act_dim {
            return Err(Error::config("noise length must equal the action dim"));
        }
        let head = self.gaussian_head(s, a_mix)?;
        let mut a_hat = Vec::with_capacity(noise.len());
        let mut log_pi = 0.0;
        for i in 0..noise.len() {
            let t = (head.mean[i] + head.std[i] * noise[i]).tanh();
            a_hat.push(t);
            let counted = !self.config.mask_pi_entropy || schema.is_none_or(|b| b[i]);
            if counted {
                log_pi += gaussian_log_density_term(noise[i], head.std[i].ln(), t);
            }
        }
        if !log_pi.is_finite() {
            return Err(Error::numerical("gaussian_action", "non-finite log-density"));
        }
        Ok((ActionVector(a_hat), log_pi))
    }

    /// One stochastic decision. With `force_all_act` the selection network is
    /// not consulted and every dimension acts.
    pub fn act<R: Rng + ?Sized>(
        &self,
        s: &[Real],
        a_prev: &[Real],
        force_all_act: bool,
        rng: &mut R,
    ) -> Result<ActOutput> {
        self.check_dims(s, a_prev)?;
        let (schema, log_beta) = if force_all_act {
            (Schema::all_act(self.config.act_dim), 0.0)
        } else {
            let probs = self.selection_probs(s, a_prev)?;
            let b = sample_schema(&probs, rng);
            let lp = schema_log_prob(&probs, &b);
            (b, lp)
        };
        let a_mix = premix(&schema, a_prev, self.config.xi);
        let noise: Vec<Real> = (0..self.config.act_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let (a_hat, log_pi) = self.gaussian_action(s, &a_mix, &noise, Some(&schema))?;
        Ok(ActOutput {
            action: postmix(&schema, a_prev, &a_hat),
            schema,
            log_beta,
            log_pi,
        })
    }

    /// Deterministic decision: act where the act probability exceeds 1/2,
    /// new actions at the squashed mean.
    pub fn act_deterministic(&self, s: &[Real], a_prev: &[Real], force_all_act: bool) -> Result<ActOutput> {
        self.check_dims(s, a_prev)?;
        let (schema, log_beta) = if force_all_act {
            (Schema::all_act(self.config.act_dim), 0.0)
        } else {
            let probs = self.selection_probs(s, a_prev)?;
            let b = Schema(probs.probs.iter().map(|&p| p > 0.5).collect());
            let lp = schema_log_prob(&probs, &b);
            (b, lp)
        };
        let a_mix = premix(&schema, a_prev, self.config.xi);
        let head = self.gaussian_head(s, &a_mix)?;
        let a_hat: Vec<Real> = head.mean.iter().map(|m| m.tanh()).collect();
        Ok(ActOutput {
            action: postmix(&schema, a_prev, &a_hat),
            schema,
            log_beta,
            log_pi: 0.0,
        })
    }

    // ---- batched paths used by the trainer ----

    /// Selection logits for a batch; one column per switch.
    pub fn selection_forward(&self, obs: ArrayView2<Real>, a_prev: ArrayView2<Real>) -> Result<ForwardTrace> {
        self.selection.forward_cached(concat_cols(obs, a_prev))
    }

    pub fn selection_logits(&self, obs: ArrayView2<Real>, a_prev: ArrayView2<Real>) -> Result<Array2<Real>> {
        self.selection.forward_batch(concat_cols(obs, a_prev).view())
    }

    /// Batched action-network pass with explicit standard-normal noise.
    pub fn head_forward(
        &self,
        obs: ArrayView2<Real>,
        a_mix: ArrayView2<Real>,
        noise: ArrayView2<Real>,
        schema_mask: ArrayView2<Real>,
    ) -> Result<HeadBatch> {
        let n = self.config.act_dim;
        let rows = obs.nrows();
        if noise.dim() != (rows, n) || a_mix.dim() != (rows, n) || schema_mask.dim() != (rows, n) {
            return Err(Error::config("head_forward: batch shapes disagree"));
        }
        let trace = self.action.forward_cached(concat_cols(obs, a_mix))?;
        let out = trace.output();
        let mean = out.slice(ndarray::s![.., ..n]).to_owned();
        let raw_log_std = out.slice(ndarray::s![.., n..]);
        let log_std_active = raw_log_std.mapv(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(&l));
        let log_std = raw_log_std.mapv(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let std = log_std.mapv(Real::exp);
        let mut a_hat = Array2::zeros((rows, n));
        Zip::from(&mut a_hat)
            .and(&mean)
            .and(&std)
            .and(noise)
            .for_each(|a, &m, &s, &z| *a = (m + s * z).tanh());
        let entropy_mask = if self.config.mask_pi_entropy {
            schema_mask.to_owned()
        } else {
            Array2::ones((rows, n))
        };
        let mut log_pi = Array1::zeros(rows);
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..n {
                if entropy_mask[[r, c]] != 0.0 {
                    acc += gaussian_log_density_term(noise[[r, c]], log_std[[r, c]], a_hat[[r, c]]);
                }
            }
            if !acc.is_finite() {
                return Err(Error::numerical("head_forward", format!("non-finite log pi in row {r}")));
            }
            log_pi[r] = acc;
        }
        Ok(HeadBatch {
            trace,
            mean,
            std,
            noise: noise.to_owned(),
            a_hat,
            log_pi,
            log_std_active,
            entropy_mask,
        })
    }

    /// Parameter gradient of `sum(d_a_hat ⊙ a_hat) + sum(d_log_pi ⊙ log_pi)`.
    pub fn head_backward(
        &self,
        head: &HeadBatch,
        d_a_hat: ArrayView2<Real>,
        d_log_pi: ArrayView1<Real>,
    ) -> Result<GradSet> {
        let n = self.config.act_dim;
        let rows = head.a_hat.nrows();
        let mut upstream = Array2::zeros((rows, 2 * n));
        for r in 0..rows {
            for c in 0..n {
                let t = head.a_hat[[r, c]];
                let one_minus = 1.0 - t * t;
                let m = head.entropy_mask[[r, c]];
                // d/du of -ln(1 - tanh(u)^2 + eps)
                let squash = 2.0 * t * one_minus / (one_minus + SQUASH_EPS);
                let d_u = d_a_hat[[r, c]] * one_minus + d_log_pi[r] * m * squash;
                upstream[[r, c]] = d_u;
                if head.log_std_active[[r, c]] {
                    let sigma_n = head.std[[r, c]] * head.noise[[r, c]];
                    upstream[[r, n + c]] = d_u * sigma_n - d_log_pi[r] * m;
                }
            }
        }
        let (grads, _) = self.action.backward(&head.trace, upstream.view())?;
        Ok(grads)
    }
}

/// One dimension's contribution to the squashed-Gaussian log-density.
fn gaussian_log_density_term(noise: Real, log_std: Real, squashed: Real) -> Real {
    -0.5 * noise * noise - log_std - HALF_LN_2PI - (1.0 - squashed * squashed + SQUASH_EPS).ln()
}

/// Expand raw selection logits (`rows × switches`) to per-dimension act
/// probabilities.
pub fn act_probabilities(logits: ArrayView2<Real>, act_dim: usize) -> Array2<Real> {
    let rows = logits.nrows();
    let switches = logits.ncols();
    Array2::from_shape_fn((rows, act_dim), |(r, c)| {
        sigmoid(logits[[r, if switches == 1 { 0 } else { c }]])
    })
}

/// Sample schemas as a 0/1 mask from per-row uniforms (`rows × switches`).
pub fn schema_mask_from_uniforms(
    logits: ArrayView2<Real>,
    uniforms: ArrayView2<Real>,
    act_dim: usize,
) -> Array2<Real> {
    let switches = logits.ncols();
    Array2::from_shape_fn((logits.nrows(), act_dim), |(r, c)| {
        let k = if switches == 1 { 0 } else { c };
        if uniforms[[r, k]] < sigmoid(logits[[r, k]]) {
            1.0
        } else {
            0.0
        }
    })
}

/// Row-wise `log β(b)`, with clamped logits.
pub fn log_beta_rows(logits: ArrayView2<Real>, mask: ArrayView2<Real>) -> Array1<Real> {
    let switches = logits.ncols();
    Array1::from_shape_fn(logits.nrows(), |r| {
        (0..switches)
            .map(|k| {
                let l = clamp_logit(logits[[r, k]]);
                if mask[[r, k]] != 0.0 {
                    log_sigmoid(l)
                } else {
                    log_sigmoid(-l)
                }
            })
            .sum()
    })
}

/// `∂ log β(b) / ∂ logit` per switch: `b - sigmoid(l)`, zero where clamped.
pub fn log_beta_logit_grad(logits: ArrayView2<Real>, mask: ArrayView2<Real>) -> Array2<Real> {
    Array2::from_shape_fn(logits.dim(), |(r, k)| {
        let l = logits[[r, k]];
        if l.abs() > LOGIT_CLAMP {
            0.0
        } else {
            mask[[r, k]] - sigmoid(l)
        }
    })
}

pub fn premix_batch(mask: ArrayView2<Real>, a_prev: ArrayView2<Real>, xi: MaskConstant) -> Array2<Real> {
    let mut out = a_prev.to_owned();
    Zip::from(&mut out).and(mask).for_each(|o, &b| {
        if b != 0.0 {
            *o = xi.value();
        }
    });
    out
}

pub fn postmix_batch(mask: ArrayView2<Real>, a_prev: ArrayView2<Real>, a_hat: ArrayView2<Real>) -> Array2<Real> {
    let mut out = a_prev.to_owned();
    Zip::from(&mut out).and(mask).and(a_hat).for_each(|o, &b, &h| {
        if b != 0.0 {
            *o = h;
        }
    });
    out
}

/// Mask rows repeated per switch column: selection-space view of a
/// per-dimension schema mask.
pub fn switch_mask(mask: ArrayView2<Real>, switches: usize) -> Array2<Real> {
    if switches == mask.ncols() {
        mask.to_owned()
    } else {
        mask.slice(ndarray::s![.., ..switches]).to_owned()
    }
}

/// Standard-normal draws, row-major.
pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<Real> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// Uniform `[0, 1)` draws, row-major.
pub fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<Real> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.random::<Real>();
    }
    m
}

/// Rows of `a` duplicated `times` times each, keeping order (`r0 r0 r1 r1 ..`).
pub fn repeat_rows(a: ArrayView2<Real>, times: usize) -> Array2<Real> {
    let views: Vec<_> = a
        .axis_iter(Axis(0))
        .flat_map(|row| std::iter::repeat_n(row.insert_axis(Axis(0)), times))
        .collect();
    ndarray::concatenate(Axis(0), &views).expect("rows share width")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(obs: usize, act: usize) -> PolicyConfig {
        PolicyConfig {
            obs_dim: obs,
            act_dim: act,
            hidden: vec![8, 8],
            xi: MaskConstant::default(),
            selection: SelectionKind::Decoupled,
            mask_pi_entropy: false,
        }
    }

    fn policy(obs: usize, act: usize, seed: u64) -> TwoStagePolicy {
        TwoStagePolicy::new(config(obs, act), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn set_selection_bias(p: &mut TwoStagePolicy, value: Real) {
        let last = p.selection.layers().len() - 1;
        let layer = &mut p.selection.layers_mut()[last];
        layer.weights.fill(0.0);
        layer.bias.fill(value);
    }

    #[test]
    fn mask_constant_must_lie_outside_action_range() {
        assert!(MaskConstant::new(-2.0).is_ok());
        assert!(MaskConstant::new(0.5).is_err());
        assert!(MaskConstant::new(1.0).is_err());
        assert!(MaskConstant::new(Real::NAN).is_err());
    }

    #[test]
    fn zero_selection_network_gives_half() {
        let mut p = policy(3, 2, 1);
        p.selection = ParamSet::zeros(&p.config.selection_sizes()).unwrap();
        let out = p.selection_probs(&[0.1, 0.2, 0.3], &[0.0, 0.5]).unwrap();
        assert_eq!(out.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn saturated_logits_give_probability_one() {
        let mut p = policy(3, 2, 1);
        set_selection_bias(&mut p, 20.0);
        let out = p.selection_probs(&[0.1, 0.2, 0.3], &[0.0, 0.5]).unwrap();
        assert!(out.probs.iter().all(|&q| (1.0 - q).abs() < 1e-8));
    }

    #[test]
    fn selection_probs_match_straight_line_sigmoid() {
        let p = policy(3, 2, 4);
        let s = [0.3, -0.2, 0.9];
        let a = [0.1, -0.6];
        let out = p.selection_probs(&s, &a).unwrap();
        // Independent evaluation with explicit loops.
        let mut h: Vec<Real> = [s.as_slice(), a.as_slice()].concat();
        let layers = p.selection.layers();
        for (k, layer) in layers.iter().enumerate() {
            h = (0..layer.outputs())
                .map(|j| {
                    let z = layer.bias[j]
                        + (0..layer.inputs()).map(|i| h[i] * layer.weights[[i, j]]).sum::<Real>();
                    if k + 1 < layers.len() { z.max(0.0) } else { z }
                })
                .collect();
        }
        for (got, z) in out.probs.iter().zip(&h) {
            assert!((got - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_probabilities_give_constant_schemas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ones = SelectionOutput::from_logits(vec![40.0; 3], SelectionKind::Decoupled);
        let zeros = SelectionOutput::from_logits(vec![-40.0; 3], SelectionKind::Decoupled);
        for _ in 0..100 {
            assert_eq!(sample_schema(&ones, &mut rng), Schema::all_act(3));
            assert_eq!(sample_schema(&zeros, &mut rng), Schema::all_repeat(3));
        }
    }

    #[test]
    fn schema_frequencies_match_bernoulli_product() {
        let probs = SelectionOutput {
            logits: vec![0.2f64.ln() - 0.8f64.ln(), 0.9f64.ln() - 0.1f64.ln()],
            probs: vec![0.2, 0.9],
            kind: SelectionKind::Decoupled,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let target = Schema(vec![false, true]);
        let hits = (0..n)
            .filter(|_| sample_schema(&probs, &mut rng) == target)
            .count() as Real;
        let p = 0.8 * 0.9;
        let sigma = (p * (1.0 - p) / n as Real).sqrt();
        assert!((hits / n as Real - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn schema_log_prob_examples() {
        let half = SelectionOutput::from_logits(vec![0.0, 0.0], SelectionKind::Decoupled);
        for idx in 0..4 {
            let lp = schema_log_prob(&half, &Schema::from_index(idx, 2));
            assert!((lp - 0.25f64.ln() as Real).abs() < 1e-12);
        }
        let one = SelectionOutput::from_logits(vec![0.7], SelectionKind::Decoupled);
        let lp = schema_log_prob(&one, &Schema(vec![true]));
        assert!((lp - one.probs[0].ln()).abs() < 1e-12);
    }

    #[test]
    fn schema_probabilities_sum_to_one_by_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for dim in 1..=4 {
            let logits: Vec<Real> = (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect();
            let probs = SelectionOutput::from_logits(logits, SelectionKind::Decoupled);
            let total: Real = (0..1usize << dim)
                .map(|i| schema_log_prob(&probs, &Schema::from_index(i, dim)).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "dim {dim}: {total}");
        }
    }

    #[test]
    fn coupled_schema_is_all_or_nothing() {
        let probs = SelectionOutput::from_logits(vec![0.3; 4], SelectionKind::Coupled);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let b = sample_schema(&probs, &mut rng);
            assert!(b.iter().all(|&x| x) || b.iter().all(|&x| !x));
        }
        let total: Real = [Schema::all_act(4), Schema::all_repeat(4)]
            .iter()
            .map(|b| schema_log_prob(&probs, b).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mix_examples() {
        let xi = MaskConstant::default();
        assert_eq!(premix(&Schema::all_act(2), &[0.3, -0.7], xi), vec![-2.0, -2.0]);
        assert_eq!(premix(&Schema::all_repeat(2), &[0.3, -0.7], xi), vec![0.3, -0.7]);
        assert_eq!(premix(&Schema(vec![false, true]), &[0.5, -0.3], xi), vec![0.5, -2.0]);

        let prev = [0.5, -0.3];
        let new = [0.9, 0.1];
        assert_eq!(postmix(&Schema::all_repeat(2), &prev, &new).0, prev.to_vec());
        assert_eq!(postmix(&Schema::all_act(2), &prev, &new).0, new.to_vec());
        assert_eq!(postmix(&Schema(vec![false, true]), &prev, &new).0, vec![0.5, 0.1]);
    }

    #[test]
    fn zero_noise_gives_squashed_mean() {
        let p = policy(2, 3, 5);
        let s = [0.4, -0.4];
        let mix = [-2.0, 0.3, -2.0];
        let head = p.gaussian_head(&s, &mix).unwrap();
        let (a, _) = p.gaussian_action(&s, &mix, &[0.0; 3], None).unwrap();
        for (ai, m) in a.iter().zip(&head.mean) {
            assert_eq!(*ai, m.tanh());
        }
    }

    #[test]
    fn tiny_std_approaches_deterministic_limit() {
        let mut p = policy(2, 1, 6);
        // Output layer: log-std bias at the clamp floor, zero weights.
        let last = p.action.layers().len() - 1;
        let layer = &mut p.action.layers_mut()[last];
        layer.weights.column_mut(1).fill(0.0);
        layer.bias[1] = -50.0;
        let s = [0.2, 0.1];
        let head = p.gaussian_head(&s, &[-2.0]).unwrap();
        let (a, _) = p.gaussian_action(&s, &[-2.0], &[1.5], None).unwrap();
        assert!((a[0] - head.mean[0].tanh()).abs() < 0.02);
    }

    #[test]
    fn force_all_act_ignores_selection() {
        let mut p = policy(2, 3, 7);
        set_selection_bias(&mut p, -20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = p.act(&[0.0, 1.0], &[0.0; 3], true, &mut rng).unwrap();
        assert_eq!(out.schema, Schema::all_act(3));
        assert_eq!(out.log_beta, 0.0);
    }

    #[test]
    fn all_repeat_copies_previous_action_bitwise() {
        let mut p = policy(2, 3, 7);
        set_selection_bias(&mut p, -20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prev = [0.123456789, -0.987654321, 0.5];
        for _ in 0..50 {
            let out = p.act(&[0.3, 1.0], &prev, false, &mut rng).unwrap();
            assert_eq!(out.action.0, prev.to_vec());
        }
    }

    #[test]
    fn batched_head_matches_single_sample_path() {
        let p = policy(3, 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = uniform_matrix(5, 3, &mut rng);
        let prev = uniform_matrix(5, 2, &mut rng);
        let mask = Array2::from_shape_fn((5, 2), |(r, c)| ((r + c) % 2) as Real);
        let noise = normal_matrix(5, 2, &mut rng);
        let mix = premix_batch(mask.view(), prev.view(), p.config.xi);
        let head = p.head_forward(obs.view(), mix.view(), noise.view(), mask.view()).unwrap();
        for r in 0..5 {
            let (a, lp) = p
                .gaussian_action(
                    obs.row(r).as_slice().unwrap(),
                    mix.row(r).as_slice().unwrap(),
                    noise.row(r).as_slice().unwrap(),
                    None,
                )
                .unwrap();
            for c in 0..2 {
                assert!((a[c] - head.a_hat[[r, c]]).abs() < 1e-14);
            }
            assert!((lp - head.log_pi[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn repeat_rows_keeps_order() {
        let a = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let r = repeat_rows(a.view(), 2);
        assert_eq!(r, ndarray::array![[1.0, 2.0], [1.0, 2.0], [3.0, 4.0], [3.0, 4.0]]);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn repeated_dims_copy_previous_action(seed in 0u64..10_000, dim in 1usize..6) {
                let p = policy(2, dim, seed % 7);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s: Vec<Real> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                let prev: Vec<Real> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let out = p.act(&s, &prev, false, &mut rng).unwrap();
                for i in 0..dim {
                    if !out.schema[i] {
                        prop_assert_eq!(out.action[i].to_bits(), prev[i].to_bits());
                    } else {
                        prop_assert!(out.action[i] > -1.0 - 1e-12 && out.action[i] < 1.0 + 1e-12);
                    }
                }
            }

            #[test]
            fn premix_is_constant_in_prev_on_act_dims(bits in 0usize..16, a in -1.0..1.0f64, c in -1.0..1.0f64) {
                let b = Schema::from_index(bits, 4);
                let xi = MaskConstant::default();
                let one = premix(&b, &[a as Real; 4], xi);
                let two = premix(&b, &[c as Real; 4], xi);
                for i in 0..4 {
                    if b[i] {
                        prop_assert_eq!(one[i], two[i]);
                    }
                }
            }
        }
    }
}
