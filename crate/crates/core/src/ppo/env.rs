use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::control::{encode_state, gain_feedback, GainMap};
use crate::error::{Error, Result};
use crate::metrics::reward;
use crate::model::TrafficParams;
use crate::scalar::Scalar;
use crate::sim::{AlphaNoise, Grid, Simulator};

/// How a step ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEnd {
    Running,
    /// The episode horizon was reached.
    Horizon,
    /// The plant diverged; the episode is truncated.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct EnvStep<T> {
    pub observation: Vec<T>,
    pub reward: T,
    pub end: StepEnd,
}

/// Episodic environment driven by a normalized three-component action.
pub trait Env<T> {
    fn observation_dim(&self) -> usize;

    /// Steps per episode.
    fn episode_len(&self) -> usize;

    /// Starts a new episode from the initial condition and returns the first observation.
    fn reset(&mut self) -> Result<Vec<T>>;

    /// Starts a new episode from the current plant state after a completed horizon.
    fn continue_episode(&mut self) -> Result<Vec<T>> {
        self.reset()
    }

    /// Current observation without advancing.
    fn observe(&self) -> Result<Vec<T>>;

    fn step(&mut self, action: &[T; 3]) -> Result<EnvStep<T>>;

    /// Steps taken in the current episode.
    fn elapsed(&self) -> usize;

    /// Reward charged for each step lost to truncation after a divergence.
    fn truncation_reward(&self) -> T;
}

/// The traffic plant as a PPO environment.
///
/// The action passes through the gain map and the feedback law; the command then travels
/// the plant's delay line. A diverging step earns the worst reward seen so far in the episode.
pub struct TrafficEnv<T> {
    params: TrafficParams<T>,
    grid: Grid<T>,
    amplitude: T,
    gain_map: GainMap,
    alpha_noise: Option<AlphaNoise>,
    noise_rng: ChaCha8Rng,
    sim: Simulator<T>,
    episode_start: usize,
    episode_alpha: Option<T>,
    worst: Option<T>,
    done: bool,
}

impl<T: Scalar> TrafficEnv<T> {
    pub fn new(
        params: TrafficParams<T>,
        grid: Grid<T>,
        amplitude: T,
        gain_map: GainMap,
        alpha_noise: Option<AlphaNoise>,
        seed: u64,
    ) -> Result<Self> {
        gain_map.validate()?;
        let sim = Simulator::new(params, grid, amplitude)?;
        Ok(Self {
            params,
            grid,
            amplitude,
            gain_map,
            alpha_noise,
            noise_rng: ChaCha8Rng::seed_from_u64(seed),
            sim,
            episode_start: 0,
            episode_alpha: None,
            worst: None,
            done: false,
        })
    }

    fn begin_episode(&mut self) {
        self.episode_start = self.sim.step_index();
        self.worst = None;
        self.done = false;
        self.episode_alpha = match self.alpha_noise {
            Some(n) if !n.per_step => Some(T::lit(n.sample(&mut self.noise_rng))),
            _ => None,
        };
    }

    pub fn simulator(&self) -> &Simulator<T> {
        &self.sim
    }

    pub fn gain_map(&self) -> &GainMap {
        &self.gain_map
    }
}

impl<T: Scalar> Env<T> for TrafficEnv<T> {
    fn observation_dim(&self) -> usize {
        3 * self.grid.nodes()
    }

    fn episode_len(&self) -> usize {
        self.grid.steps
    }

    fn reset(&mut self) -> Result<Vec<T>> {
        self.sim = Simulator::new(self.params, self.grid, self.amplitude)?;
        self.begin_episode();
        self.observe()
    }

    fn continue_episode(&mut self) -> Result<Vec<T>> {
        self.begin_episode();
        self.observe()
    }

    fn observe(&self) -> Result<Vec<T>> {
        encode_state(self.sim.state(), self.sim.prev_command(), &self.sim.eq, &self.sim.params)
    }

    fn step(&mut self, action: &[T; 3]) -> Result<EnvStep<T>> {
        if self.done {
            return Err(Error::Missing("reset after the end of an episode".into()));
        }
        let gains = self.gain_map.apply(action);
        let (command, _) = gain_feedback(
            self.sim.prev_command(),
            self.sim.state(),
            &self.sim.eq,
            &gains,
            &self.sim.params,
        )?;
        let alpha = match self.alpha_noise {
            Some(n) if n.per_step => Some(T::lit(n.sample(&mut self.noise_rng))),
            _ => self.episode_alpha,
        };
        match self.sim.advance(command, alpha) {
            Ok(_) => {
                let r = reward(self.sim.state(), &self.sim.eq);
                self.worst = Some(self.worst.map_or(r, |w| w.min(r)));
                let end = if self.elapsed() >= self.grid.steps {
                    self.done = true;
                    StepEnd::Horizon
                } else {
                    StepEnd::Running
                };
                Ok(EnvStep {
                    observation: self.observe()?,
                    reward: r,
                    end,
                })
            }
            Err(Error::Positivity { .. } | Error::Cfl { .. }) => {
                self.done = true;
                let r = self.truncation_reward();
                Ok(EnvStep {
                    observation: self.observe()?,
                    reward: r,
                    end: StepEnd::Diverged,
                })
            }
            Err(e) => Err(e),
        }
    }

    fn elapsed(&self) -> usize {
        self.sim.step_index() - self.episode_start
    }

    fn truncation_reward(&self) -> T {
        self.worst
            .unwrap_or_else(|| reward(self.sim.state(), &self.sim.eq))
    }
}
