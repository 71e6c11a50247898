//! Differentiable Euler-Maruyama rollouts of a controlled SDE.
//!
//! A batch of trajectories is recorded on one tape with samples on the row
//! axis. Large batches are split into fixed-size chunks, each with its own
//! tape; chunk results are summed in chunk order so the outcome does not
//! depend on how many worker threads ran them.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::nets::{network_forward, ControlParametrization, NetError, OutputHead, ParamVector};
use crate::streams::{self, Domain, StreamRng};
use crate::tape::{Mat, NodeId, Tape, TapeError};

/// Samples per tape.
pub const CHUNK_SAMPLES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trajectory diverged (non-finite state) at step {step}")]
    Divergence { step: usize },
    #[error("invalid state at step {step}: {reason}")]
    InvalidState { step: usize, reason: String },
    #[error("invalid rollout configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Quantities available to the running cost of step `k`.
#[derive(Debug, Clone, Copy)]
pub struct StepCtx {
    pub k: usize,
    pub t_k: f64,
    pub t_next: f64,
    pub h: f64,
    pub x_k: NodeId,
    pub x_next: NodeId,
    pub u_k: NodeId,
    /// `None` at `k = 0`.
    pub u_prev: Option<NodeId>,
}

/// Quantities available when closing a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TerminalCtx {
    pub steps: usize,
    pub horizon: f64,
    pub h: f64,
    pub batch: usize,
    pub x_final: NodeId,
    pub u_last: NodeId,
    /// Sum of running costs, `batch x 1`.
    pub running: Option<NodeId>,
    /// Auxiliary trainable scalars, `1 x n_aux`.
    pub aux: Option<NodeId>,
}

/// One controlled SDE with its cost functional.
///
/// States, controls and noises are `batch x dim` tape nodes.
pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn output_head(&self) -> OutputHead;

    /// Initial values of trainable scalars owned by the environment.
    fn aux_init(&self) -> Vec<f64> {
        Vec::new()
    }

    fn sample_initial_state(&self, rng: &mut StreamRng) -> Vec<f64>;

    /// `b(x, u)`.
    fn drift(&self, tape: &mut Tape, x: NodeId, u: NodeId) -> Result<NodeId, SimError>;

    /// `sigma(x, u) xi`, or `None` when the diffusion vanishes.
    fn diffusion_noise(&self, tape: &mut Tape, x: NodeId, u: NodeId, xi: NodeId)
        -> Result<Option<NodeId>, SimError>;

    /// Network input at step `k`, excluding the time slot.
    fn features(&self, tape: &mut Tape, k: usize, x: NodeId, u_prev: Option<NodeId>) -> Result<NodeId, SimError>;

    fn apply_head(&self, tape: &mut Tape, raw: NodeId, _x: NodeId, _h: f64) -> Result<NodeId, SimError> {
        Ok(self.output_head().apply(tape, raw)?)
    }

    /// `batch x 1` cost of step `k`, or `None` when zero.
    fn running_cost(&self, tape: &mut Tape, ctx: &StepCtx) -> Result<Option<NodeId>, SimError>;

    fn terminal_cost(&self, _tape: &mut Tape, _x_final: NodeId) -> Result<Option<NodeId>, SimError> {
        Ok(None)
    }

    /// Per-sample objective, `batch x 1`. Defaults to running plus terminal cost.
    fn terminal_objective(&self, tape: &mut Tape, ctx: &TerminalCtx) -> Result<NodeId, SimError> {
        let fin = self.terminal_cost(tape, ctx.x_final)?;
        let total = match (ctx.running, fin) {
            (Some(r), Some(f)) => tape.add(r, f)?,
            (Some(r), None) => r,
            (None, Some(f)) => f,
            (None, None) => tape.constant(Mat::zeros(ctx.batch, 1)),
        };
        Ok(total)
    }

    /// Maps the raw Euler update onto the state space. Identity by default.
    fn project(&self, _tape: &mut Tape, x_next: NodeId) -> Result<NodeId, SimError> {
        Ok(x_next)
    }

    /// Called on every new state; rejects states the dynamics cannot continue from.
    fn check_state(&self, _step: usize, _x: &Mat) -> Result<(), SimError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutConfig {
    pub steps: usize,
    pub batch_size: usize,
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(SimError::Config(format!(
                "steps ({}) and batch size ({}) must be positive",
                self.steps, self.batch_size
            )));
        }
        Ok(())
    }
}

/// `t_k = k T / N`.
pub fn time_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| k as f64 * horizon / steps as f64).collect()
}

/// Identifies the random stream behind a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub domain: Domain,
    pub a: u64,
    pub b: u64,
}

impl NoiseKey {
    pub fn train(seed: u64, epoch: u64, iteration: u64) -> Self {
        NoiseKey { seed, domain: Domain::TrainData, a: epoch, b: iteration }
    }

    pub fn eval(seed: u64, round: u64) -> Self {
        NoiseKey { seed, domain: Domain::Eval, a: round, b: 0 }
    }

    pub fn sample_rng(&self, sample: usize) -> StreamRng {
        streams::stream(self.seed, self.domain, self.a, self.b, sample as u64)
    }
}

/// Initial states and Brownian increments of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    /// `batch x state_dim`
    pub initial: Mat,
    /// One `batch x noise_dim` matrix of standard normals per step.
    pub noise: Vec<Mat>,
}

impl Draws {
    /// Each sample reads its own stream: initial state first, then the
    /// noise of steps `1..=N` in order.
    pub fn generate(env: &dyn Environment, steps: usize, key: NoiseKey, samples: Range<usize>) -> Self {
        let (d1, d2) = (env.state_dim(), env.noise_dim());
        let b = samples.len();
        let mut initial = Vec::with_capacity(b * d1);
        let mut noise = vec![Vec::with_capacity(b * d2); steps];
        for s in samples {
            let mut rng = key.sample_rng(s);
            initial.extend(env.sample_initial_state(&mut rng));
            for step in noise.iter_mut() {
                for _ in 0..d2 {
                    step.push(rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
        Draws {
            initial: Mat::new(b, d1, initial),
            noise: noise.into_iter().map(|n| Mat::new(b, d2, n)).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.initial.rows()
    }

    pub fn steps(&self) -> usize {
        self.noise.len()
    }
}

/// Tape nodes of a recorded rollout.
#[derive(Debug, Clone)]
pub struct RolloutNodes {
    /// `batch x 1`
    pub per_sample: NodeId,
    pub states: Vec<NodeId>,
    pub controls: Vec<NodeId>,
}

/// Records one batch of trajectories on `tape`.
pub fn rollout_on_tape(
    tape: &mut Tape,
    env: &dyn Environment,
    params: &ParamVector,
    parametrization: &ControlParametrization,
    draws: &Draws,
) -> Result<RolloutNodes, SimError> {
    let steps = parametrization.steps;
    if draws.steps() != steps {
        return Err(SimError::Config(format!("draws cover {} steps, parametrization {}", draws.steps(), steps)));
    }
    if parametrization.feature_dim() != env.feature_dim() || parametrization.spec.output_dim != env.control_dim() {
        return Err(SimError::Config(format!(
            "network ({} features -> {} controls) does not fit environment {} ({} -> {})",
            parametrization.feature_dim(),
            parametrization.spec.output_dim,
            env.name(),
            env.feature_dim(),
            env.control_dim()
        )));
    }
    let bound = params.bind(tape, parametrization)?;
    let horizon = env.horizon();
    let grid = time_grid(horizon, steps);
    let h = horizon / steps as f64;
    let sqrt_h = h.sqrt();

    let mut x = tape.input(draws.initial.clone());
    env.check_state(0, tape.value(x))?;
    let mut states = vec![x];
    let mut controls = Vec::with_capacity(steps);
    let mut u_prev = None;
    let mut running: Option<NodeId> = None;

    for k in 0..steps {
        let feats = env.features(tape, k, x, u_prev)?;
        let raw = network_forward(tape, &bound, parametrization, k, k as f64 / steps as f64, feats)?;
        let u = env.apply_head(tape, raw, x, h)?;

        let b = env.drift(tape, x, u)?;
        let b = tape.scale(b, h)?;
        let mut next = tape.add(x, b)?;
        let xi = tape.input(draws.noise[k].clone());
        if let Some(d) = env.diffusion_noise(tape, x, u, xi)? {
            let d = tape.scale(d, sqrt_h)?;
            next = tape.add(next, d)?;
        }
        let next = env.project(tape, next)?;
        if !tape.value(next).is_finite() {
            return Err(SimError::Divergence { step: k + 1 });
        }
        env.check_state(k + 1, tape.value(next))?;

        let ctx = StepCtx { k, t_k: grid[k], t_next: grid[k + 1], h, x_k: x, x_next: next, u_k: u, u_prev };
        if let Some(c) = env.running_cost(tape, &ctx)? {
            running = Some(match running {
                Some(r) => tape.add(r, c)?,
                None => c,
            });
        }
        states.push(next);
        controls.push(u);
        u_prev = Some(u);
        x = next;
    }

    let ctx = TerminalCtx {
        steps,
        horizon,
        h,
        batch: draws.batch(),
        x_final: x,
        u_last: *controls.last().expect("at least one step"),
        running,
        aux: bound.aux,
    };
    let per_sample = env.terminal_objective(tape, &ctx)?;
    if tape.shape(per_sample) != (draws.batch(), 1) {
        return Err(SimError::Config(format!("per-sample objective has shape {:?}", tape.shape(per_sample))));
    }
    if !tape.value(per_sample).is_finite() {
        return Err(SimError::Divergence { step: steps });
    }
    Ok(RolloutNodes { per_sample, states, controls })
}

/// Simulated batch with values copied off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    /// `N + 1` matrices of shape `batch x state_dim`.
    pub states: Vec<Mat>,
    /// `N` matrices of shape `batch x control_dim`.
    pub controls: Vec<Mat>,
    /// `N` matrices of shape `batch x noise_dim`.
    pub noises: Vec<Mat>,
    pub per_sample_objective: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn batch(&self) -> usize {
        self.per_sample_objective.len()
    }

    pub fn state(&self, sample: usize, k: usize) -> &[f64] {
        self.states[k].row_slice(sample)
    }

    pub fn control(&self, sample: usize, k: usize) -> &[f64] {
        self.controls[k].row_slice(sample)
    }

    /// Batch-mean objective.
    pub fn objective(&self) -> f64 {
        self.per_sample_objective.iter().sum::<f64>() / self.batch() as f64
    }

    fn append(&mut self, other: TrajectoryBatch) {
        let stack = |a: &mut Vec<Mat>, b: Vec<Mat>| {
            for (x, y) in a.iter_mut().zip(b) {
                let mut data = std::mem::replace(x, Mat::zeros(0, 0)).into_data();
                let cols = y.cols();
                data.extend(y.into_data());
                *x = Mat::new(data.len() / cols.max(1), cols, data);
            }
        };
        stack(&mut self.states, other.states);
        stack(&mut self.controls, other.controls);
        stack(&mut self.noises, other.noises);
        self.per_sample_objective.extend(other.per_sample_objective);
    }
}

fn chunks(total: usize) -> Vec<Range<usize>> {
    (0..total).step_by(CHUNK_SAMPLES).map(|s| s..(s + CHUNK_SAMPLES).min(total)).collect()
}

/// Simulates `config.batch_size` trajectories from the stream `key`.
pub fn rollout(
    env: &dyn Environment,
    params: &ParamVector,
    parametrization: &ControlParametrization,
    config: &RolloutConfig,
    key: NoiseKey,
) -> Result<TrajectoryBatch, SimError> {
    config.validate()?;
    let parts: Vec<Result<TrajectoryBatch, SimError>> = chunks(config.batch_size)
        .into_par_iter()
        .map(|range| {
            let draws = Draws::generate(env, config.steps, key, range);
            let mut tape = Tape::new(params.len());
            let nodes = rollout_on_tape(&mut tape, env, params, parametrization, &draws)?;
            Ok(TrajectoryBatch {
                states: nodes.states.iter().map(|&id| tape.value(id).clone()).collect(),
                controls: nodes.controls.iter().map(|&id| tape.value(id).clone()).collect(),
                noises: draws.noise,
                per_sample_objective: tape.value(nodes.per_sample).data().to_vec(),
            })
        })
        .collect();
    let mut iter = parts.into_iter();
    let mut out = iter.next().expect("non-empty batch")?;
    for part in iter {
        out.append(part?);
    }
    Ok(out)
}

/// Batch-mean objective and its gradient for fixed draws, on one tape.
pub fn loss_and_grad_draws(
    env: &dyn Environment,
    params: &ParamVector,
    parametrization: &ControlParametrization,
    draws: &Draws,
) -> Result<(f64, Vec<f64>), SimError> {
    let mut tape = Tape::new(params.len());
    let nodes = rollout_on_tape(&mut tape, env, params, parametrization, draws)?;
    let root = tape.mean(nodes.per_sample)?;
    let grad = tape.backward(root)?;
    Ok((tape.value(root).data()[0], grad))
}

/// Batch-mean objective for fixed draws, without the backward sweep.
pub fn loss_draws(
    env: &dyn Environment,
    params: &ParamVector,
    parametrization: &ControlParametrization,
    draws: &Draws,
) -> Result<f64, SimError> {
    let mut tape = Tape::new(params.len());
    let nodes = rollout_on_tape(&mut tape, env, params, parametrization, draws)?;
    let root = tape.mean(nodes.per_sample)?;
    Ok(tape.value(root).data()[0])
}

/// Mini-batch estimate `(J_bar, g)` of the objective and its pathwise gradient.
pub fn loss_and_grad(
    env: &dyn Environment,
    params: &ParamVector,
    parametrization: &ControlParametrization,
    config: &RolloutConfig,
    key: NoiseKey,
) -> Result<(f64, Vec<f64>), SimError> {
    config.validate()?;
    let inv = 1.0 / config.batch_size as f64;
    let parts: Vec<Result<(f64, Vec<f64>), SimError>> = chunks(config.batch_size)
        .into_par_iter()
        .map(|range| {
            let draws = Draws::generate(env, config.steps, key, range);
            let mut tape = Tape::new(params.len());
            let nodes = rollout_on_tape(&mut tape, env, params, parametrization, &draws)?;
            let total = tape.sum(nodes.per_sample)?;
            let root = tape.scale(total, inv)?;
            let grad = tape.backward(root)?;
            Ok((tape.value(root).data()[0], grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Per-sample objectives of `samples` trajectories, forward only.
pub fn sample_objectives(
    env: &dyn Environment,
    params: &ParamVector,
    parametrization: &ControlParametrization,
    samples: usize,
    key: NoiseKey,
) -> Result<Vec<f64>, SimError> {
    let parts: Vec<Result<Vec<f64>, SimError>> = chunks(samples)
        .into_par_iter()
        .map(|range| {
            let draws = Draws::generate(env, parametrization.steps, key, range);
            let mut tape = Tape::new(params.len());
            let nodes = rollout_on_tape(&mut tape, env, params, parametrization, &draws)?;
            Ok(tape.value(nodes.per_sample).data().to_vec())
        })
        .collect();
    let mut out = Vec::with_capacity(samples);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
