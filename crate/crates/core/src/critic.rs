//! Twin Q networks with target copies.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::approximator::{concat_cols, GradSet, ParamSet, Real};
use crate::error::{Error, Result};

/// Scalar value of `s ⊕ a` under one critic.
pub fn q_value(params: &ParamSet, s: &[Real], a: &[Real]) -> Result<Real> {
    if params.output_dim() != 1 {
        return Err(Error::config("critic networks have a single output"));
    }
    Ok(params.forward(&[s, a].concat())?[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticPair {
    pub q1: ParamSet,
    pub q2: ParamSet,
    pub q1_target: ParamSet,
    pub q2_target: ParamSet,
}

/// Bellman regression targets, one per batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch(pub Array1<Real>);

#[derive(Clone, Debug)]
pub struct CriticLoss {
    pub loss: Real,
    pub grads_q1: GradSet,
    pub grads_q2: GradSet,
}

impl CriticPair {
    pub fn sizes(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut s = vec![obs_dim + act_dim];
        s.extend(hidden);
        s.push(1);
        s
    }

    /// Independently initialized online critics; targets start as exact copies.
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let sizes = Self::sizes(obs_dim, act_dim, hidden);
        let q1 = ParamSet::init_uniform(&sizes, rng)?;
        let q2 = ParamSet::init_uniform(&sizes, rng)?;
        Ok(CriticPair {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        })
    }

    /// Elementwise minimum of the two target critics.
    pub fn target_min(&self, obs: ArrayView2<Real>, actions: ArrayView2<Real>) -> Result<Array1<Real>> {
        let x = concat_cols(obs, actions);
        let a = self.q1_target.forward_batch(x.view())?;
        let b = self.q2_target.forward_batch(x.view())?;
        Ok(column_min(&a, &b))
    }

    /// Elementwise minimum of the two online critics.
    pub fn online_min(&self, obs: ArrayView2<Real>, actions: ArrayView2<Real>) -> Result<Array1<Real>> {
        let x = concat_cols(obs, actions);
        let a = self.q1.forward_batch(x.view())?;
        let b = self.q2.forward_batch(x.view())?;
        Ok(column_min(&a, &b))
    }

    /// `min(Q1, Q2)` of the online critics and its gradient with respect to
    /// the action columns. Ties route the gradient through `Q1`.
    pub fn online_min_with_action_grad(
        &self,
        obs: ArrayView2<Real>,
        actions: ArrayView2<Real>,
    ) -> Result<(Array1<Real>, Array2<Real>)> {
        let obs_dim = obs.ncols();
        let x = concat_cols(obs, actions);
        let t1 = self.q1.forward_cached(x.clone())?;
        let t2 = self.q2.forward_cached(x)?;
        let rows = actions.nrows();
        let mut up1 = Array2::zeros((rows, 1));
        let mut up2 = Array2::zeros((rows, 1));
        let mut min = Array1::zeros(rows);
        for r in 0..rows {
            let (a, b) = (t1.output()[[r, 0]], t2.output()[[r, 0]]);
            if a <= b {
                min[r] = a;
                up1[[r, 0]] = 1.0;
            } else {
                min[r] = b;
                up2[[r, 0]] = 1.0;
            }
        }
        let (_, gx1) = self.q1.backward(&t1, up1.view())?;
        let (_, gx2) = self.q2.backward(&t2, up2.view())?;
        let grad = (&gx1 + &gx2).slice_move(ndarray::s![.., obs_dim..]);
        Ok((min, grad))
    }

    /// Mean over the batch and both critics of `(Q_k(s, a) − target)²`.
    pub fn loss_and_grads(
        &self,
        obs: ArrayView2<Real>,
        actions: ArrayView2<Real>,
        targets: &TargetBatch,
    ) -> Result<CriticLoss> {
        let rows = obs.nrows();
        if targets.0.len() != rows || actions.nrows() != rows {
            return Err(Error::config("critic batch and targets have different lengths"));
        }
        let x = concat_cols(obs, actions);
        let t1 = self.q1.forward_cached(x.clone())?;
        let t2 = self.q2.forward_cached(x)?;
        let y = targets.0.view().insert_axis(Axis(1));
        let e1 = t1.output() - &y;
        let e2 = t2.output() - &y;
        let n = rows as Real;
        let loss = (e1.mapv(|e| e * e).sum() + e2.mapv(|e| e * e).sum()) / (2.0 * n);
        // d loss / d Q_k = (Q_k − y) / n
        let (grads_q1, _) = self.q1.backward(&t1, (e1 / n).view())?;
        let (grads_q2, _) = self.q2.backward(&t2, (e2 / n).view())?;
        Ok(CriticLoss {
            loss,
            grads_q1,
            grads_q2,
        })
    }

    pub fn soft_update_targets(&mut self, tau: Real) -> Result<()> {
        self.q1_target.soft_update(&self.q1, tau)?;
        self.q2_target.soft_update(&self.q2, tau)
    }
}

fn column_min(a: &Array2<Real>, b: &Array2<Real>) -> Array1<Real> {
    a.column(0)
        .iter()
        .zip(b.column(0))
        .map(|(&x, &y)| if x <= y { x } else { y })
        .collect()
}

/// `r + γ·(1 − terminal)·bootstrap`, checked for finiteness per row.
pub fn assemble_targets(
    rewards: ArrayView1<Real>,
    terminal: ArrayView1<Real>,
    bootstrap: ArrayView1<Real>,
    gamma: Real,
) -> Result<TargetBatch> {
    let mut y = Array1::zeros(rewards.len());
    for i in 0..rewards.len() {
        let v = if terminal[i] != 0.0 {
            rewards[i]
        } else {
            rewards[i] + gamma * bootstrap[i]
        };
        if !v.is_finite() {
            return Err(Error::numerical(
                "bellman_targets",
                format!("non-finite target for batch row {i}"),
            ));
        }
        y[i] = v;
    }
    Ok(TargetBatch(y))
}
