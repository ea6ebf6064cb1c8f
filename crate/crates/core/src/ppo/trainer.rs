use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{Env, StepEnd};
use super::math::{
    actor_loss_and_grad, advantages, batch_log_probs, constant_tail, critic_loss_and_grad, gaussian_log_prob,
    BatchTensors,
};
use crate::control::{policy_output, sample_action, GainMap};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Mlp, NetworkSpec};
use crate::scalar::Scalar;

/// Which episode-mean reward the stop rule watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopOn {
    /// A deterministic (mean-action) episode run after every training episode.
    #[default]
    Evaluation,
    /// The stochastic training episode itself.
    Training,
}

/// PPO hyperparameters and network shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyper {
    pub gamma: f64,
    pub clip_eps: f64,
    pub epochs_per_batch: usize,
    pub batch_len: usize,
    /// Plant copies stepped side by side; each contributes `batch_len` transitions to every
    /// update.
    pub parallel_envs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Stop once the watched episode-mean reward reaches this value; `None` (written `"none"`)
    /// trains to the budget.
    #[serde(with = "number_or_none")]
    pub stop_reward: Option<f64>,
    pub stop_on: StopOn,
    /// Budget in policy updates (one per batch).
    pub max_updates: usize,
    pub normalize_advantages: bool,
    /// Seed the return recursion of a batch cut mid-episode with the critic's value of the next state.
    pub bootstrap: bool,
    /// Reset the plant to the initial condition at every episode; otherwise continue from the
    /// state reached at the horizon (a diverged plant is always reset).
    pub reset_each_episode: bool,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Critic output is `value_bound * tanh(.)`.
    pub value_bound: f64,
    /// Added to the pre-sigmoid bias of each standard-deviation output at initialization.
    pub sigma_bias: f64,
    pub gain_map: GainMap,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip_eps: 0.2,
            epochs_per_batch: 150,
            batch_len: 100,
            parallel_envs: 1,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            stop_reward: Some(-0.1),
            stop_on: StopOn::Evaluation,
            max_updates: 3000,
            normalize_advantages: true,
            bootstrap: true,
            reset_each_episode: true,
            actor_hidden: NetworkSpec::reference_hidden(),
            critic_hidden: NetworkSpec::reference_hidden(),
            value_bound: 1000.0,
            sigma_bias: 0.0,
            gain_map: GainMap::identity(),
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(field, msg)) };
        check(self.gamma > 0.0 && self.gamma <= 1.0, "gamma", "must lie in (0, 1]")?;
        check(self.clip_eps > 0.0 && self.clip_eps < 1.0, "clip_eps", "must lie in (0, 1)")?;
        check(self.epochs_per_batch > 0, "epochs_per_batch", "must be positive")?;
        check(self.batch_len > 0, "batch_len", "must be positive")?;
        check(self.parallel_envs > 0, "parallel_envs", "must be positive")?;
        check(self.actor_lr > 0.0 && self.actor_lr.is_finite(), "actor_lr", "must be positive")?;
        check(self.critic_lr > 0.0 && self.critic_lr.is_finite(), "critic_lr", "must be positive")?;
        check(self.max_updates > 0, "max_updates", "must be positive")?;
        check(self.value_bound > 0.0 && self.value_bound.is_finite(), "value_bound", "must be positive")?;
        check(self.sigma_bias.is_finite(), "sigma_bias", "must be finite")?;
        check(
            self.actor_hidden.iter().chain(&self.critic_hidden).all(|&w| w > 0),
            "hidden",
            "layer widths must be positive",
        )?;
        self.gain_map.validate()
    }
}

/// `Option<f64>` as a number or the string `"none"`, so that TOML can spell the absence.
mod number_or_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("none"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(Some(x)),
            Repr::Text(t) if t == "none" => Ok(None),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"none\", got \"{t}\""))),
        }
    }
}

/// Actor, critic, and the map from normalized actions to gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent<T> {
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
    pub gain_map: GainMap,
}

impl<T: Scalar> Agent<T> {
    /// Fresh networks for `input_dim` observations, seeded from `seed`.
    pub fn new(input_dim: usize, hyper: &PpoHyper, seed: u64) -> Result<Self> {
        let mut actor = Mlp::new(NetworkSpec::actor(input_dim, &hyper.actor_hidden, seed))?;
        actor.shift_output_bias(3..6, T::lit(hyper.sigma_bias));
        let critic = Mlp::new(NetworkSpec::critic(
            input_dim,
            &hyper.critic_hidden,
            hyper.value_bound,
            seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        ))?;
        Ok(Self {
            actor,
            critic,
            gain_map: hyper.gain_map,
        })
    }

    pub fn value(&self, observation: &[T]) -> Result<T> {
        Ok(self.critic.forward_one(observation)?[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub state_vector: Vec<T>,
    /// Raw Gaussian sample; the environment clamps it to `[0, 1]` before mapping to gains.
    pub action: [T; 3],
    pub log_prob_old: T,
    pub reward: T,
    pub end: StepEnd,
    /// Discounted value of the steps lost to truncation, for a `Diverged` end.
    pub truncation_tail: T,
    pub return_to_go: T,
    pub advantage: T,
}

/// Contiguous transitions collected with one policy snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub transitions: Vec<Transition<T>>,
    /// Observation after the last transition.
    pub terminal_observation: Vec<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Vec<T> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn mean_reward(&self) -> T {
        self.transitions.iter().map(|t| t.reward).sum::<T>() / T::lit(self.len().max(1) as f64)
    }

    /// Returns with the recursion restarted at every episode end and seeded with `tail`
    /// after the last transition when it does not end an episode.
    pub fn returns(&self, gamma: T, tail: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.len()];
        let mut acc = tail;
        for (slot, tr) in out.iter_mut().zip(&self.transitions).rev() {
            acc = match tr.end {
                StepEnd::Running => acc,
                StepEnd::Horizon => T::zero(),
                StepEnd::Diverged => tr.truncation_tail,
            };
            acc = tr.reward + gamma * acc;
            *slot = acc;
        }
        out
    }

    pub fn tensors(&self) -> BatchTensors<T> {
        let n = self.len();
        let dim = self.transitions.first().map_or(0, |t| t.state_vector.len());
        let mut states = Array2::zeros((n, dim));
        let mut actions = Array2::zeros((n, 3));
        for (i, tr) in self.transitions.iter().enumerate() {
            states.row_mut(i).assign(&Array1::from(tr.state_vector.clone()));
            for k in 0..3 {
                actions[[i, k]] = tr.action[k];
            }
        }
        BatchTensors {
            states,
            actions,
            log_prob_old: self.transitions.iter().map(|t| t.log_prob_old).collect(),
            returns: self.transitions.iter().map(|t| t.return_to_go).collect(),
            advantages: self.transitions.iter().map(|t| t.advantage).collect(),
        }
    }
}

/// Running bookkeeping of the current training episode.
#[derive(Debug, Clone, Default)]
pub struct EpisodeTracker {
    reward_sum: f64,
    steps: usize,
    pub completed: Vec<f64>,
}

impl EpisodeTracker {
    fn record(&mut self, reward: f64) {
        self.reward_sum += reward;
        self.steps += 1;
    }

    /// Closes the episode, charging `fill` for each of `missing` truncated steps.
    fn finish(&mut self, episode_len: usize, fill: f64) {
        let missing = episode_len.saturating_sub(self.steps);
        let total = self.reward_sum + fill * missing as f64;
        self.completed.push(total / episode_len.max(1) as f64);
        self.reward_sum = 0.0;
        self.steps = 0;
    }
}

/// Runs up to `batch_len` steps with stochastic (or mean) actions from `actor`.
///
/// When an episode ends inside the batch the environment is reset (or continued) and
/// collection goes on, so short episodes share a batch.
#[allow(clippy::too_many_arguments)]
pub fn collect_batch<T, E, R>(
    env: &mut E,
    actor: &Mlp<T>,
    observation: &mut Vec<T>,
    hyper: &PpoHyper,
    deterministic: bool,
    tracker: &mut EpisodeTracker,
    rng: &mut R,
) -> Result<Trajectory<T>>
where
    T: Scalar,
    E: Env<T> + ?Sized,
    R: Rng + ?Sized,
{
    let gamma = T::lit(hyper.gamma);
    let mut transitions = Vec::with_capacity(hyper.batch_len);
    for _ in 0..hyper.batch_len {
        let policy = policy_output(actor, observation)?;
        let action = sample_action(&policy, deterministic, rng);
        let log_prob_old = gaussian_log_prob(&action, &policy.mean, &policy.std);
        let step = env.step(&action)?;
        tracker.record(step.reward.as_f64());
        let mut truncation_tail = T::zero();
        let next = match step.end {
            StepEnd::Running => step.observation,
            StepEnd::Horizon => {
                tracker.finish(env.episode_len(), 0.0);
                if hyper.reset_each_episode {
                    env.reset()?
                } else {
                    env.continue_episode()?
                }
            }
            StepEnd::Diverged => {
                let fill = env.truncation_reward();
                let missing = env.episode_len().saturating_sub(env.elapsed() + 1);
                truncation_tail = constant_tail(fill, gamma, missing);
                tracker.finish(env.episode_len(), fill.as_f64());
                env.reset()?
            }
        };
        transitions.push(Transition {
            state_vector: std::mem::replace(observation, next),
            action,
            log_prob_old,
            reward: step.reward,
            end: step.end,
            truncation_tail,
            return_to_go: T::zero(),
            advantage: T::zero(),
        });
    }
    Ok(Trajectory {
        transitions,
        terminal_observation: observation.clone(),
    })
}

/// Fills returns and advantages using the critic's current values.
pub fn finish_batch<T: Scalar>(traj: &mut Trajectory<T>, agent: &Agent<T>, hyper: &PpoHyper) -> Result<()> {
    let part = std::mem::replace(
        traj,
        Trajectory {
            transitions: Vec::new(),
            terminal_observation: Vec::new(),
        },
    );
    *traj = finish_batches(vec![part], agent, hyper)?;
    Ok(())
}

/// Computes returns per trajectory (each bootstrapped from its own terminal observation),
/// then advantages over all of them jointly, and concatenates the result.
pub fn finish_batches<T: Scalar>(parts: Vec<Trajectory<T>>, agent: &Agent<T>, hyper: &PpoHyper) -> Result<Trajectory<T>> {
    let mut returns = Vec::new();
    for part in &parts {
        let last_running = part.transitions.last().is_some_and(|t| t.end == StepEnd::Running);
        let tail = if hyper.bootstrap && last_running {
            agent.value(&part.terminal_observation)?
        } else {
            T::zero()
        };
        returns.extend(part.returns(T::lit(hyper.gamma), tail));
    }
    let terminal_observation = parts.last().map(|p| p.terminal_observation.clone()).unwrap_or_default();
    let mut merged = Trajectory {
        transitions: parts.into_iter().flat_map(|p| p.transitions).collect(),
        terminal_observation,
    };
    let tensors = merged.tensors();
    let values = agent.critic.forward(tensors.states.view())?.output.column(0).to_vec();
    let adv = advantages(&returns, &values, hyper.normalize_advantages)?;
    for ((tr, r), a) in merged.transitions.iter_mut().zip(returns).zip(adv) {
        tr.return_to_go = r;
        tr.advantage = a;
    }
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Critic loss before each epoch's step.
    pub critic_losses: Vec<f64>,
    /// Mean importance ratio and clipped fraction at the last epoch.
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// `epochs_per_batch` Adam steps on the clipped surrogate and on the critic regression.
pub fn update<T: Scalar>(agent: &mut Agent<T>, batch: &Trajectory<T>, hyper: &PpoHyper) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::Missing("transitions in the batch".into()));
    }
    let tensors = batch.tensors();
    let clip = T::lit(hyper.clip_eps);
    let actor_cfg = AdamConfig::with_learning_rate(hyper.actor_lr);
    let critic_cfg = AdamConfig::with_learning_rate(hyper.critic_lr);
    let mut stats = UpdateStats {
        actor_loss: 0.0,
        critic_loss: 0.0,
        critic_losses: Vec::with_capacity(hyper.epochs_per_batch),
        mean_ratio: 1.0,
        clip_fraction: 0.0,
    };
    for epoch in 0..hyper.epochs_per_batch {
        let (eval, grads) = actor_loss_and_grad(&agent.actor, &tensors, clip)?;
        if !eval.loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "actor loss {} at epoch {epoch} (mean ratio {})",
                eval.loss, eval.mean_ratio
            )));
        }
        agent.actor.adam_step(&grads, &actor_cfg)?;

        let (closs, cgrads) = critic_loss_and_grad(&agent.critic, tensors.states.view(), tensors.returns.view())?;
        if !closs.is_finite() || !cgrads.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {closs} at epoch {epoch}")));
        }
        agent.critic.adam_step(&cgrads, &critic_cfg)?;

        stats.actor_loss = eval.loss.as_f64();
        stats.critic_loss = closs.as_f64();
        stats.critic_losses.push(closs.as_f64());
        stats.mean_ratio = eval.mean_ratio.as_f64();
        stats.clip_fraction = eval.clip_fraction.as_f64();
    }
    Ok(stats)
}

/// Importance ratios of the batch's stored actions under `actor`.
pub fn ratios<T: Scalar>(actor: &Mlp<T>, batch: &Trajectory<T>) -> Result<Vec<T>> {
    let tensors = batch.tensors();
    let out = actor.forward(tensors.states.view())?.output;
    let lp = batch_log_probs(out.view(), tensors.actions.view());
    Ok(lp.iter().zip(&tensors.log_prob_old).map(|(&a, &b)| (a - b).exp()).collect())
}

/// Mean per-step reward of one deterministic episode, truncated steps charged as in training.
pub fn evaluate_policy<T, E, R>(env: &mut E, actor: &Mlp<T>, rng: &mut R) -> Result<f64>
where
    T: Scalar,
    E: Env<T> + ?Sized,
    R: Rng + ?Sized,
{
    let mut obs = env.reset()?;
    let mut sum = 0.0;
    let len = env.episode_len();
    for _ in 0..len {
        let policy = policy_output(actor, &obs)?;
        let action = sample_action(&policy, true, rng);
        let step = env.step(&action)?;
        sum += step.reward.as_f64();
        match step.end {
            StepEnd::Running => obs = step.observation,
            StepEnd::Horizon => break,
            StepEnd::Diverged => {
                let missing = len.saturating_sub(env.elapsed() + 1);
                sum += env.truncation_reward().as_f64() * missing as f64;
                break;
            }
        }
    }
    Ok(sum / len.max(1) as f64)
}

/// One row of the learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update_index: usize,
    /// Training episodes completed when the update ran.
    pub episode: usize,
    pub sim_time_s: f64,
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

/// Stop-rule record of one completed training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub update_index: usize,
    pub train_mean_reward: f64,
    /// Deterministic evaluation, when the stop rule watches it.
    pub eval_mean_reward: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Converged agent, or the best evaluated one when the budget ran out.
    pub agent: Agent<T>,
    pub converged: bool,
    pub updates: usize,
    pub curve: Vec<CurveRow>,
    pub episodes: Vec<EpisodeRow>,
    /// Watched reward of the returned agent.
    pub final_reward: Option<f64>,
}

/// Alternates batch collection and updates until the stop rule fires or the budget is spent.
///
/// Each update draws one batch from every environment in `envs` (at least
/// `hyper.parallel_envs` of them are used). `dt` converts steps into simulated seconds for
/// the learning curve. `on_episode` observes every completed episode.
#[allow(clippy::too_many_arguments)]
pub fn train<T, E, R>(
    envs: &mut [E],
    eval_env: &mut E,
    mut agent: Agent<T>,
    hyper: &PpoHyper,
    dt: f64,
    rng: &mut R,
    on_episode: &mut dyn FnMut(&EpisodeRow),
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    E: Env<T>,
    R: Rng + ?Sized,
{
    hyper.validate()?;
    if envs.len() < hyper.parallel_envs {
        return Err(Error::Shape {
            context: "environments for parallel_envs",
            expected: hyper.parallel_envs,
            got: envs.len(),
        });
    }
    let envs = &mut envs[..hyper.parallel_envs];
    for env in envs.iter() {
        if env.observation_dim() != agent.actor.spec().input_dim() {
            return Err(Error::Shape {
                context: "agent input vs. environment observation",
                expected: env.observation_dim(),
                got: agent.actor.spec().input_dim(),
            });
        }
    }
    let mut observations = envs.iter_mut().map(|e| e.reset()).collect::<Result<Vec<_>>>()?;
    let mut trackers = vec![EpisodeTracker::default(); envs.len()];
    let mut curve = Vec::new();
    let mut episodes: Vec<EpisodeRow> = Vec::new();
    let mut best: Option<(f64, Agent<T>)> = None;
    let mut steps_total = 0usize;

    for update_index in 0..hyper.max_updates {
        let mut parts = Vec::with_capacity(envs.len());
        for ((env, obs), tracker) in envs.iter_mut().zip(&mut observations).zip(&mut trackers) {
            parts.push(collect_batch(env, &agent.actor, obs, hyper, false, tracker, rng)?);
        }
        steps_total += parts[0].len();
        let batch = finish_batches(parts, &agent, hyper)?;
        let in_flight: usize = trackers.iter().map(|t| t.completed.len()).sum();
        let stats = update(&mut agent, &batch, hyper)?;
        curve.push(CurveRow {
            update_index,
            episode: episodes.len() + in_flight,
            sim_time_s: steps_total as f64 * dt,
            mean_reward: batch.mean_reward().as_f64(),
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
            clip_fraction: stats.clip_fraction,
            mean_ratio: stats.mean_ratio,
        });

        let finished: Vec<f64> = trackers.iter_mut().flat_map(|t| std::mem::take(&mut t.completed)).collect();
        let last_update = update_index + 1 == hyper.max_updates;
        let n_finished = finished.len();
        for (k, train_mean) in finished.into_iter().enumerate() {
            // Evaluate once per update: only the last episode finished in this batch is scored.
            let scored = k + 1 == n_finished;
            let eval = match (hyper.stop_reward, hyper.stop_on) {
                (Some(_), StopOn::Evaluation) if scored => Some(evaluate_policy(eval_env, &agent.actor, rng)?),
                _ => None,
            };
            let row = EpisodeRow {
                episode: episodes.len(),
                update_index,
                train_mean_reward: train_mean,
                eval_mean_reward: eval,
            };
            on_episode(&row);
            episodes.push(row);
            let watched = match hyper.stop_on {
                StopOn::Evaluation => eval,
                StopOn::Training => Some(train_mean),
            };
            if let Some(w) = watched {
                if best.as_ref().is_none_or(|(b, _)| w > *b) {
                    best = Some((w, agent.clone()));
                }
                if hyper.stop_reward.is_some_and(|s| w >= s) {
                    return Ok(TrainOutcome {
                        agent,
                        converged: true,
                        updates: update_index + 1,
                        curve,
                        episodes,
                        final_reward: Some(w),
                    });
                }
            }
        }
        if last_update {
            break;
        }
    }
    let updates = curve.len();
    let (final_reward, agent) = match best {
        Some((w, best_agent)) => (Some(w), best_agent),
        None => (None, agent),
    };
    Ok(TrainOutcome {
        agent,
        converged: false,
        updates,
        curve,
        episodes,
        final_reward,
    })
}
