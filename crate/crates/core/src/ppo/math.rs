//! Scalar building blocks of the PPO objective and their derivatives.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp};
use crate::scalar::Scalar;

/// `R_t = r_t + gamma R_{t+1}` backward over the batch, seeded with `tail` after the last reward.
pub fn discounted_returns_with_tail<T: Scalar>(rewards: &[T], gamma: T, tail: T) -> Vec<T> {
    let mut out = vec![T::zero(); rewards.len()];
    let mut acc = tail;
    for (slot, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *slot = acc;
    }
    out
}

/// Discounted reward-to-go within the batch.
pub fn discounted_returns<T: Scalar>(rewards: &[T], gamma: T) -> Vec<T> {
    discounted_returns_with_tail(rewards, gamma, T::zero())
}

/// Discounted sum of `steps` further rewards all equal to `reward`.
pub fn constant_tail<T: Scalar>(reward: T, gamma: T, steps: usize) -> T {
    if gamma == T::one() {
        return reward * T::lit(steps as f64);
    }
    reward * (T::one() - gamma.powi(steps.min(i32::MAX as usize) as i32)) / (T::one() - gamma)
}

/// `A_t = R_t - V(s_t)`, optionally standardized to zero mean and unit variance.
///
/// Standardization divides by `std + 1e-8`, so constant advantages map to zero.
pub fn advantages<T: Scalar>(returns: &[T], values: &[T], normalize: bool) -> Result<Vec<T>> {
    if returns.len() != values.len() {
        return Err(Error::Shape {
            context: "advantages",
            expected: returns.len(),
            got: values.len(),
        });
    }
    let raw: Vec<T> = returns.iter().zip(values).map(|(&r, &v)| r - v).collect();
    if !normalize || raw.is_empty() {
        return Ok(raw);
    }
    let n = T::lit(raw.len() as f64);
    let mean = raw.iter().copied().sum::<T>() / n;
    let var = raw.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
    let denom = var.sqrt() + T::lit(1e-8);
    Ok(raw.iter().map(|&a| (a - mean) / denom).collect())
}

/// Sum of independent Normal log-densities.
pub fn gaussian_log_prob<T: Scalar>(action: &[T], mean: &[T], std: &[T]) -> T {
    let half_log_2pi = T::lit(0.5 * (2.0 * PI).ln());
    action
        .iter()
        .zip(mean)
        .zip(std)
        .map(|((&a, &m), &s)| {
            let z = (a - m) / s;
            -T::lit(0.5) * z * z - s.ln() - half_log_2pi
        })
        .sum()
}

/// `min(ratio A, clip(ratio, 1 - eps, 1 + eps) A)`.
pub fn clipped_objective<T: Scalar>(ratio: T, advantage: T, clip_eps: T) -> T {
    let clipped = ratio.max(T::one() - clip_eps).min(T::one() + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_objective`] with respect to `ratio`: `A` on the unclipped branch, else 0.
pub fn clipped_objective_grad<T: Scalar>(ratio: T, advantage: T, clip_eps: T) -> T {
    let clipped = ratio.max(T::one() - clip_eps).min(T::one() + clip_eps);
    if ratio * advantage <= clipped * advantage {
        advantage
    } else {
        T::zero()
    }
}

/// Mean squared error between returns and values.
pub fn critic_loss<T: Scalar>(returns: &[T], values: &[T]) -> Result<T> {
    if returns.len() != values.len() || returns.is_empty() {
        return Err(Error::Shape {
            context: "critic_loss",
            expected: returns.len().max(1),
            got: values.len(),
        });
    }
    let n = T::lit(returns.len() as f64);
    Ok(returns.iter().zip(values).map(|(&r, &v)| (r - v) * (r - v)).sum::<T>() / n)
}

/// Training tensors of one batch, one row per transition.
#[derive(Debug, Clone)]
pub struct BatchTensors<T> {
    pub states: Array2<T>,
    pub actions: Array2<T>,
    pub log_prob_old: Array1<T>,
    pub returns: Array1<T>,
    pub advantages: Array1<T>,
}

/// Per-evaluation statistics of the actor objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorEval<T> {
    /// `-J`, the quantity minimized.
    pub loss: T,
    pub mean_ratio: T,
    pub clip_fraction: T,
}

/// Log-probabilities of the stored actions under the current actor outputs (`mu | sigma`).
pub(crate) fn batch_log_probs<T: Scalar>(output: ArrayView2<'_, T>, actions: ArrayView2<'_, T>) -> Array1<T> {
    let k = actions.ncols();
    Array1::from_iter((0..output.nrows()).map(|i| {
        let row = output.row(i);
        let mean = row.slice(s![..k]).to_vec();
        let std = row.slice(s![k..]).to_vec();
        gaussian_log_prob(actions.row(i).as_slice().expect("contiguous row"), &mean, &std)
    }))
}

/// Clipped surrogate loss `-mean_i min(r_i A_i, clip(r_i) A_i)` and its parameter gradient.
pub fn actor_loss_and_grad<T: Scalar>(
    actor: &Mlp<T>,
    batch: &BatchTensors<T>,
    clip_eps: T,
) -> Result<(ActorEval<T>, Gradients<T>)> {
    let pass = actor.forward(batch.states.view())?;
    let out = &pass.output;
    let k = batch.actions.ncols();
    if out.ncols() != 2 * k {
        return Err(Error::Shape {
            context: "actor head",
            expected: 2 * k,
            got: out.ncols(),
        });
    }
    let rows = out.nrows();
    let n = T::lit(rows as f64);
    let lp = batch_log_probs(out.view(), batch.actions.view());
    let mut grad = Array2::<T>::zeros(out.raw_dim());
    let (mut objective, mut ratio_sum, mut clipped) = (T::zero(), T::zero(), 0usize);
    for i in 0..rows {
        let ratio = (lp[i] - batch.log_prob_old[i]).exp();
        let adv = batch.advantages[i];
        objective += clipped_objective(ratio, adv, clip_eps);
        ratio_sum += ratio;
        if (ratio - T::one()).abs() > clip_eps {
            clipped += 1;
        }
        // d(-J)/d lp_i = -(dJ/d ratio) * ratio / n
        let d_lp = -clipped_objective_grad(ratio, adv, clip_eps) * ratio / n;
        if d_lp == T::zero() {
            continue;
        }
        for j in 0..k {
            let (a, m, sd) = (batch.actions[[i, j]], out[[i, j]], out[[i, k + j]]);
            let z = (a - m) / sd;
            grad[[i, j]] = d_lp * z / sd;
            grad[[i, k + j]] = d_lp * (z * z - T::one()) / sd;
        }
    }
    let grads = actor.backward(&pass, grad.view())?;
    Ok((
        ActorEval {
            loss: -objective / n,
            mean_ratio: ratio_sum / n,
            clip_fraction: T::lit(clipped as f64) / n,
        },
        grads,
    ))
}

/// Mean squared critic error over the batch and its parameter gradient.
pub fn critic_loss_and_grad<T: Scalar>(
    critic: &Mlp<T>,
    states: ArrayView2<'_, T>,
    returns: ArrayView1<'_, T>,
) -> Result<(T, Gradients<T>)> {
    let pass = critic.forward(states)?;
    let values = pass.output.column(0);
    if values.len() != returns.len() {
        return Err(Error::Shape {
            context: "critic returns",
            expected: values.len(),
            got: returns.len(),
        });
    }
    let n = T::lit(values.len() as f64);
    let resid = &values - &returns;
    let loss = resid.iter().map(|&r| r * r).sum::<T>() / n;
    let g = resid.mapv(|r| T::lit(2.0) * r / n).insert_axis(ndarray::Axis(1));
    let grads = critic.backward(&pass, g.view())?;
    Ok((loss, grads))
}
