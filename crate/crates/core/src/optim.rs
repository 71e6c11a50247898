//! Diagonal-preconditioned gradient steps and their Langevin versions.
//!
//! Every base step returns the diagonal of the preconditioner it used, so
//! the Langevin wrappers can inject `sigma * sqrt(gamma) * N(0, P)` with the
//! same `P`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::nets::LayerRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
    Adadelta,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adadelta => "adadelta",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adadelta" => Ok(OptimizerKind::Adadelta),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

/// Which Adadelta recursion to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdadeltaVariant {
    /// `P = (l + MS_hat) / (l + sqrt(MS_hat))` from the previous `MS_hat`,
    /// then `MS_hat' = b2 * MS + (1 - b2) * dtheta^2` using the previous `MS`.
    Printed,
    /// Classical Adadelta: `P = sqrt(l + MS_hat) / sqrt(l + MS')`.
    Standard,
}

impl FromStr for AdadeltaVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "printed" => Ok(AdadeltaVariant::Printed),
            "standard" => Ok(AdadeltaVariant::Standard),
            other => Err(format!("unknown adadelta variant `{other}`")),
        }
    }
}

impl fmt::Display for AdadeltaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdadeltaVariant::Printed => "printed",
            AdadeltaVariant::Standard => "standard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub beta1: f64,
    pub beta2: f64,
    /// RMSprop decay.
    pub alpha: f64,
    pub lambda: f64,
    pub adadelta_variant: AdadeltaVariant,
}

impl Hyper {
    pub fn defaults(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam => Hyper {
                beta1: 0.9,
                beta2: 0.999,
                alpha: 0.9,
                lambda: 1e-7,
                adadelta_variant: AdadeltaVariant::Printed,
            },
            OptimizerKind::RmsProp => Hyper {
                beta1: 0.9,
                beta2: 0.999,
                alpha: 0.9,
                lambda: 1e-7,
                adadelta_variant: AdadeltaVariant::Printed,
            },
            OptimizerKind::Adadelta => Hyper {
                beta1: 0.95,
                beta2: 0.95,
                alpha: 0.9,
                lambda: 1e-6,
                adadelta_variant: AdadeltaVariant::Printed,
            },
        }
    }
}

/// Moment accumulators shared by the three preconditioners.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub ms: Vec<f64>,
    pub ms_hat: Vec<f64>,
    pub step: u64,
    pub hyper: Hyper,
}

impl OptimizerState {
    pub fn new(len: usize, hyper: Hyper) -> Self {
        OptimizerState { m: vec![0.0; len], ms: vec![0.0; len], ms_hat: vec![0.0; len], step: 0, hyper }
    }
}

/// Adam. Returns the preconditioner diagonal `1 / (l + sqrt(MS_hat))`.
pub fn adam_step(state: &mut OptimizerState, theta: &mut [f64], g: &[f64], gamma: f64) -> Vec<f64> {
    assert_eq!(theta.len(), g.len());
    let Hyper { beta1, beta2, lambda, .. } = state.hyper;
    let n = state.step + 1;
    let c1 = 1.0 - beta1.powi(n as i32);
    let c2 = 1.0 - beta2.powi(n as i32);
    let mut p = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g[i];
        state.ms[i] = beta2 * state.ms[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let ms_hat = state.ms[i] / c2;
        let pi = 1.0 / (lambda + ms_hat.sqrt());
        theta[i] -= gamma * pi * m_hat;
        p.push(pi);
    }
    state.step = n;
    p
}

pub fn rmsprop_step(state: &mut OptimizerState, theta: &mut [f64], g: &[f64], gamma: f64) -> Vec<f64> {
    assert_eq!(theta.len(), g.len());
    let Hyper { alpha, lambda, .. } = state.hyper;
    let mut p = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        state.ms[i] = alpha * state.ms[i] + (1.0 - alpha) * g[i] * g[i];
        let pi = 1.0 / (lambda + state.ms[i].sqrt());
        theta[i] -= gamma * pi * g[i];
        p.push(pi);
    }
    state.step += 1;
    p
}

pub fn adadelta_step(state: &mut OptimizerState, theta: &mut [f64], g: &[f64], gamma: f64) -> Vec<f64> {
    assert_eq!(theta.len(), g.len());
    let Hyper { beta1, beta2, lambda, adadelta_variant, .. } = state.hyper;
    let mut p = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let ms_old = state.ms[i];
        let ms_new = beta1 * ms_old + (1.0 - beta1) * g[i] * g[i];
        let old = theta[i];
        let pi = match adadelta_variant {
            AdadeltaVariant::Printed => (lambda + state.ms_hat[i]) / (lambda + state.ms_hat[i].sqrt()),
            AdadeltaVariant::Standard => (lambda + state.ms_hat[i]).sqrt() / (lambda + ms_new).sqrt(),
        };
        theta[i] = old - gamma * pi * g[i];
        let delta = theta[i] - old;
        state.ms_hat[i] = match adadelta_variant {
            AdadeltaVariant::Printed => beta2 * ms_old + (1.0 - beta2) * delta * delta,
            AdadeltaVariant::Standard => beta2 * state.ms_hat[i] + (1.0 - beta2) * delta * delta,
        };
        state.ms[i] = ms_new;
        p.push(pi);
    }
    state.step += 1;
    p
}

/// A preconditioned optimizer with its state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: Hyper, len: usize) -> Self {
        Optimizer { kind, state: OptimizerState::new(len, hyper) }
    }

    /// Applies the base update in place and returns the preconditioner diagonal.
    pub fn base_step(&mut self, theta: &mut [f64], g: &[f64], gamma: f64) -> Vec<f64> {
        match self.kind {
            OptimizerKind::Adam => adam_step(&mut self.state, theta, g, gamma),
            OptimizerKind::RmsProp => rmsprop_step(&mut self.state, theta, g, gamma),
            OptimizerKind::Adadelta => adadelta_step(&mut self.state, theta, g, gamma),
        }
    }
}

/// Parameter positions that receive Langevin noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    selected: Vec<bool>,
}

impl LayerMask {
    pub fn full(len: usize) -> Self {
        LayerMask { selected: vec![true; len] }
    }

    pub fn empty(len: usize) -> Self {
        LayerMask { selected: vec![false; len] }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.selected[i]
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i)
    }

    pub fn is_subset_of(&self, other: &LayerMask) -> bool {
        self.selected.iter().zip(&other.selected).all(|(&a, &b)| !a || b)
    }
}

/// Number of registry entries in the first `p_percent` percent of layers.
pub fn langevin_layer_count(total_layers: usize, p_percent: f64) -> usize {
    let n = (p_percent * total_layers as f64 / 100.0).ceil();
    (n.max(0.0) as usize).min(total_layers)
}

/// Union of the parameter ranges of the first `ceil(p/100 * L)` layers.
pub fn layer_mask(registry: &LayerRegistry, p_percent: f64) -> LayerMask {
    let mut mask = LayerMask::empty(registry.param_len());
    let count = langevin_layer_count(registry.total_layers(), p_percent);
    for e in &registry.entries()[..count] {
        for i in e.range.clone() {
            mask.selected[i] = true;
        }
    }
    mask
}

/// Base step plus preconditioned Gaussian noise on the masked positions.
///
/// Always draws `theta.len()` standard normals in parameter order so that
/// runs with different masks consume the noise stream identically. With
/// `sigma == 0` or an empty mask the result is bitwise the base update.
pub fn layer_langevin_step<R: Rng + ?Sized>(
    opt: &mut Optimizer,
    mask: &LayerMask,
    theta: &mut [f64],
    g: &[f64],
    gamma: f64,
    sigma: f64,
    rng: &mut R,
) -> Vec<f64> {
    assert_eq!(mask.len(), theta.len(), "mask length");
    let p = opt.base_step(theta, g, gamma);
    let scale = sigma * gamma.sqrt();
    for i in 0..theta.len() {
        let z: f64 = rng.sample(StandardNormal);
        if scale != 0.0 && mask.selected[i] {
            theta[i] += scale * p[i].sqrt() * z;
        }
    }
    p
}

/// Langevin step on every parameter.
pub fn langevin_wrap<R: Rng + ?Sized>(
    opt: &mut Optimizer,
    theta: &mut [f64],
    g: &[f64],
    gamma: f64,
    sigma: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mask = LayerMask::full(theta.len());
    layer_langevin_step(opt, &mask, theta, g, gamma, sigma, rng)
}

/// Piecewise-constant step size and noise level, indexed by epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pieces: Vec<SchedulePiece>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePiece {
    pub start_epoch: usize,
    pub gamma: f64,
    pub sigma: f64,
}

impl Schedule {
    pub fn new(pieces: Vec<SchedulePiece>) -> Result<Self, String> {
        if pieces.first().map(|p| p.start_epoch) != Some(0) {
            return Err("schedule must start at epoch 0".into());
        }
        for w in pieces.windows(2) {
            if w[1].start_epoch <= w[0].start_epoch {
                return Err("schedule start epochs must be strictly increasing".into());
            }
        }
        for p in &pieces {
            if !(p.gamma > 0.0) || !(p.sigma >= 0.0) {
                return Err(format!("invalid schedule piece gamma={} sigma={}", p.gamma, p.sigma));
            }
        }
        Ok(Schedule { pieces })
    }

    pub fn constant(gamma: f64, sigma: f64) -> Result<Self, String> {
        Schedule::new(vec![SchedulePiece { start_epoch: 0, gamma, sigma }])
    }

    /// Two pieces: `(gamma, sigma)` until `switch`, then `(gamma2, sigma2)`.
    pub fn two_phase(gamma: f64, sigma: f64, switch: usize, gamma2: f64, sigma2: f64) -> Result<Self, String> {
        Schedule::new(vec![
            SchedulePiece { start_epoch: 0, gamma, sigma },
            SchedulePiece { start_epoch: switch, gamma: gamma2, sigma: sigma2 },
        ])
    }

    pub fn pieces(&self) -> &[SchedulePiece] {
        &self.pieces
    }

    /// `(gamma, sigma)` of the last piece starting at or before `epoch`.
    pub fn eval(&self, epoch: usize) -> (f64, f64) {
        let piece = self
            .pieces
            .iter()
            .rev()
            .find(|p| p.start_epoch <= epoch)
            .unwrap_or(&self.pieces[0]);
        (piece.gamma, piece.sigma)
    }

    /// Same schedule with every noise level set to zero.
    pub fn without_noise(&self) -> Self {
        Schedule { pieces: self.pieces.iter().map(|p| SchedulePiece { sigma: 0.0, ..*p }).collect() }
    }
}

impl FromStr for Schedule {
    type Err = String;

    /// Parses `g1,s1@e1;g2,s2@e2;...`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut pieces = Vec::new();
        for token in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
            let bad = || format!("malformed schedule piece `{token}`, expected `gamma,sigma@epoch`");
            let (values, epoch) = token.split_once('@').ok_or_else(bad)?;
            let (gamma, sigma) = values.split_once(',').ok_or_else(bad)?;
            pieces.push(SchedulePiece {
                start_epoch: epoch.trim().parse().map_err(|_| bad())?,
                gamma: gamma.trim().parse().map_err(|_| bad())?,
                sigma: sigma.trim().parse().map_err(|_| bad())?,
            });
        }
        Schedule::new(pieces)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.pieces.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{},{}@{}", p.gamma, p.sigma, p.start_epoch)?;
        }
        Ok(())
    }
}
