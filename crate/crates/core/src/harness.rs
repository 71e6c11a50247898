//! Training protocol: epochs of mini-batch updates, evaluation after each
//! epoch, shared-initialization comparisons and curve files.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::env::{EnvKind, EnvSpec};
use crate::nets::{ControlMode, ControlParametrization, NetError, ParamVector};
use crate::optim::{layer_langevin_step, layer_mask, Hyper, LayerMask, Optimizer, OptimizerKind, Schedule};
use crate::sim::{loss_and_grad, sample_objectives, Environment, NoiseKey, RolloutConfig, SimError};
use crate::streams::{self, Domain};
use crate::tape::finite_diff_check;

/// Normal quantile of the two-sided 95% interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("epoch {epoch}, iteration {iteration}: {source}")]
    Training { epoch: usize, iteration: usize, source: SimError },
    #[error("evaluation after epoch {epoch}: {source}")]
    Evaluation { epoch: usize, source: SimError },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("malformed curve file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HarnessError {
    /// Divergence or an invalid simulated state.
    pub fn is_numerical(&self) -> bool {
        matches!(self, HarnessError::Training { .. } | HarnessError::Evaluation { .. })
    }
}

/// Which noise, if any, is added to the base update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Base,
    Langevin,
    /// Noise on the first `p` percent of layers.
    LayerLangevin(f64),
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Langevin => "langevin",
            Variant::LayerLangevin(_) => "layer_langevin",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { init: 0, data: 1, noise: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub mode: ControlMode,
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub variant: Variant,
    pub hyper: Hyper,
    pub schedule: Schedule,
    /// Evaluation uses `eval_mult * batch_size` trajectories.
    pub eval_mult: usize,
    pub seeds: Seeds,
}

/// Step-size and noise schedule used in the reference experiments for each
/// environment and optimizer.
pub fn default_schedule(env: EnvKind, optimizer: OptimizerKind) -> Schedule {
    use OptimizerKind::*;
    let (g, s, switch) = match (env, optimizer) {
        (EnvKind::Fishing, Adam) => (2e-3, 1e-3, 40),
        (EnvKind::Fishing, RmsProp) => (2e-3, 5e-3, 40),
        (EnvKind::Fishing, Adadelta) => (5e-1, 1e-2, 40),
        (EnvKind::Hedging, Adam | RmsProp) => (2e-3, 2e-3, 80),
        (EnvKind::Hedging, Adadelta) => (5e-1, 5e-3, 80),
        (EnvKind::Oil, Adam) => (2e-3, 1e-3, 60),
        (EnvKind::Oil, RmsProp) => (2e-3, 2e-3, 80),
        (EnvKind::Oil, Adadelta) => (5e-1, 5e-3, 80),
    };
    Schedule::two_phase(g, s, switch, g / 10.0, 0.0).expect("valid built-in schedule")
}

impl ExperimentConfig {
    pub fn new(env: EnvKind, optimizer: OptimizerKind, variant: Variant) -> Self {
        let steps = match env {
            EnvKind::Fishing => 20,
            EnvKind::Hedging => 30,
            EnvKind::Oil => 50,
        };
        ExperimentConfig {
            env: EnvSpec::default_for(env),
            mode: ControlMode::SingleNetwork,
            steps,
            hidden: vec![32, 32],
            batch_size: 512,
            batches_per_epoch: 5,
            epochs: 50,
            optimizer,
            variant,
            hyper: Hyper::defaults(optimizer),
            schedule: default_schedule(env, optimizer),
            eval_mult: 25,
            seeds: Seeds::default(),
        }
    }

    /// Short run name: `adam`, `adam-langevin` or `adam-ll30`.
    pub fn label(&self) -> String {
        match self.variant {
            Variant::Base => self.optimizer.to_string(),
            Variant::Langevin => format!("{}-langevin", self.optimizer),
            Variant::LayerLangevin(p) => format!("{}-ll{}", self.optimizer, p),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("N must be positive");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.eval_mult == 0 {
            return bad("batch_size, batches_per_epoch and eval_mult must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty with positive widths");
        }
        if let Variant::LayerLangevin(p) = self.variant {
            if !(0.0..=100.0).contains(&p) {
                return bad("p_percent must lie in [0, 100]");
            }
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<Box<dyn Environment>, HarnessError> {
        self.env.build().map_err(HarnessError::Config)
    }

    pub fn parametrization(&self, env: &dyn Environment) -> ControlParametrization {
        ControlParametrization::new(
            self.mode,
            env.feature_dim(),
            self.hidden.clone(),
            env.control_dim(),
            env.output_head(),
            self.steps,
        )
    }

    /// Initial parameters from the init seed, including environment scalars.
    pub fn initial_params(&self, env: &dyn Environment) -> Result<ParamVector, HarnessError> {
        let param = self.parametrization(env);
        Ok(ParamVector::build(&param, self.seeds.init)?.with_aux(&env.aux_init()))
    }

    pub fn eval_samples(&self) -> usize {
        self.eval_mult * self.batch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub epoch: usize,
    pub mean: f64,
    pub half_width: f64,
}

/// Mean and 95% half-width `1.96 s / sqrt(n)` with the unbiased sample deviation.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Z95 * var.sqrt() / (n as f64).sqrt())
}

/// Neumaier summation.
fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + c
}

/// Estimates the objective on a fresh evaluation stream.
pub fn evaluate(
    env: &dyn Environment,
    params: &ParamVector,
    parametrization: &ControlParametrization,
    samples: usize,
    key: NoiseKey,
) -> Result<(f64, f64), SimError> {
    let values = sample_objectives(env, params, parametrization, samples, key)?;
    Ok(summarize(&values))
}

/// Everything a training run produced.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub records: Vec<RunRecord>,
    pub params: ParamVector,
}

/// Per-iteration callback: `(epoch, iteration, loss, gradient)`.
pub type Observer<'a> = &'a mut dyn FnMut(usize, usize, f64, &[f64]);

/// Trains from the parameters given by the config's init seed.
pub fn train(config: &ExperimentConfig) -> Result<Vec<RunRecord>, HarnessError> {
    let env = config.environment()?;
    let init = config.initial_params(env.as_ref())?;
    Ok(train_from(config, env.as_ref(), init, None)?.records)
}

/// Trains from explicit initial parameters.
///
/// Record 0 evaluates the initial network; record `e` is taken after epoch
/// `e`. Evaluation after epoch `e` uses the stream keyed by `e`, so it never
/// touches training draws or optimizer state.
pub fn train_from(
    config: &ExperimentConfig,
    env: &dyn Environment,
    init: ParamVector,
    mut observer: Option<Observer<'_>>,
) -> Result<TrainedRun, HarnessError> {
    config.validate()?;
    let param = config.parametrization(env);
    let mut params = init;
    if params.len() != config.initial_params(env)?.len() {
        return Err(HarnessError::Config("initial parameters do not match the architecture".into()));
    }
    let rollout = RolloutConfig { steps: config.steps, batch_size: config.batch_size };
    let mut opt = Optimizer::new(config.optimizer, config.hyper, params.len());
    let mask = match config.variant {
        Variant::Base => LayerMask::empty(params.len()),
        Variant::Langevin => LayerMask::full(params.len()),
        Variant::LayerLangevin(p) => layer_mask(params.registry(), p),
    };
    let mut noise = streams::stream(config.seeds.noise, Domain::Langevin, 0, 0, 0);
    let eval = |params: &ParamVector, epoch: usize| -> Result<RunRecord, HarnessError> {
        let key = NoiseKey::eval(config.seeds.data, epoch as u64);
        let (mean, half_width) = evaluate(env, params, &param, config.eval_samples(), key)
            .map_err(|source| HarnessError::Evaluation { epoch, source })?;
        Ok(RunRecord { epoch, mean, half_width })
    };

    let mut records = Vec::with_capacity(config.epochs + 1);
    records.push(eval(&params, 0)?);
    for epoch in 0..config.epochs {
        let (gamma, sigma) = config.schedule.eval(epoch);
        for iteration in 0..config.batches_per_epoch {
            let key = NoiseKey::train(config.seeds.data, epoch as u64, iteration as u64);
            let (loss, grad) = loss_and_grad(env, &params, &param, &rollout, key)
                .map_err(|source| HarnessError::Training { epoch, iteration, source })?;
            if let Some(obs) = observer.as_mut() {
                obs(epoch, iteration, loss, &grad);
            }
            match config.variant {
                Variant::Base => {
                    opt.base_step(&mut params.data, &grad, gamma);
                }
                _ => {
                    layer_langevin_step(&mut opt, &mask, &mut params.data, &grad, gamma, sigma, &mut noise);
                }
            }
        }
        records.push(eval(&params, epoch + 1)?);
    }
    Ok(TrainedRun { records, params })
}

/// Runs every config from one shared initial parameter vector and shared
/// data streams. Returns one record list per config, in order.
pub fn compare(configs: &[ExperimentConfig]) -> Result<Vec<Vec<RunRecord>>, HarnessError> {
    let first = configs.first().ok_or_else(|| HarnessError::Config("nothing to compare".into()))?;
    for c in &configs[1..] {
        if c.env != first.env || c.mode != first.mode || c.steps != first.steps || c.hidden != first.hidden {
            return Err(HarnessError::Config("compared runs must share environment and architecture".into()));
        }
        if c.seeds.init != first.seeds.init || c.seeds.data != first.seeds.data {
            return Err(HarnessError::Config("compared runs must share init and data seeds".into()));
        }
    }
    let env = first.environment()?;
    let init = first.initial_params(env.as_ref())?;
    configs
        .par_iter()
        .map(|c| Ok(train_from(c, env.as_ref(), init.clone(), None)?.records))
        .collect()
}

/// Largest relative error between the pathwise gradient and central
/// differences on a batch of two trajectories.
pub fn gradcheck(env: &dyn Environment, config: &ExperimentConfig, step: f64) -> Result<f64, HarnessError> {
    let params = config.initial_params(env)?;
    gradcheck_at(env, config, &params, step)
}

/// [`gradcheck`] at explicit parameters.
pub fn gradcheck_at(
    env: &dyn Environment,
    config: &ExperimentConfig,
    params: &ParamVector,
    step: f64,
) -> Result<f64, HarnessError> {
    let param = config.parametrization(env);
    let rollout = RolloutConfig { steps: config.steps, batch_size: 2 };
    let key = NoiseKey::train(config.seeds.data, 0, 0);
    let numerical = |source| HarnessError::Training { epoch: 0, iteration: 0, source };
    let (_, grad) = loss_and_grad(env, params, &param, &rollout, key).map_err(numerical)?;
    let mut failure = None;
    let err = finite_diff_check(
        |theta| {
            let p = params.with_data(theta.to_vec());
            match loss_and_grad_value(env, &p, &param, &rollout, key) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &params.data,
        &grad,
        step,
    );
    match failure {
        Some(e) => Err(numerical(e)),
        None => Ok(err),
    }
}

fn loss_and_grad_value(
    env: &dyn Environment,
    params: &ParamVector,
    param: &ControlParametrization,
    rollout: &RolloutConfig,
    key: NoiseKey,
) -> Result<f64, SimError> {
    let draws = crate::sim::Draws::generate(env, rollout.steps, key, 0..rollout.batch_size);
    crate::sim::loss_draws(env, params, param, &draws)
}

/// CSV body with header `time,f,f_plus,f_minus`.
pub fn format_curves(records: &[RunRecord]) -> String {
    let mut out = String::from("time,f,f_plus,f_minus\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.mean, r.mean + r.half_width, r.mean - r.half_width));
    }
    out
}

pub fn write_curves(records: &[RunRecord], path: &Path) -> Result<(), HarnessError> {
    fs::write(path, format_curves(records))?;
    Ok(())
}

pub fn parse_curves(text: &str) -> Result<Vec<RunRecord>, HarnessError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "time,f,f_plus,f_minus")) => {}
        _ => return Err(HarnessError::Parse { line: 1, reason: "missing header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let err = |reason: String| HarnessError::Parse { line: i + 1, reason };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", cols.len())));
        }
        let epoch = usize::from_str(cols[0]).map_err(|e| err(e.to_string()))?;
        let mut v = [0.0; 3];
        for (slot, c) in v.iter_mut().zip(&cols[1..]) {
            *slot = f64::from_str(c).map_err(|e| err(e.to_string()))?;
        }
        out.push(RunRecord { epoch, mean: v[0], half_width: (v[1] - v[2]) / 2.0 });
    }
    Ok(out)
}

/// Writes `curves_<label>.csv` and `config_<label>.txt` into `dir`.
pub fn write_run(dir: &Path, label: &str, config_text: &str, records: &[RunRecord]) -> Result<(PathBuf, PathBuf), HarnessError> {
    fs::create_dir_all(dir)?;
    let curves = dir.join(format!("curves_{label}.csv"));
    let meta = dir.join(format!("config_{label}.txt"));
    write_curves(records, &curves)?;
    fs::write(&meta, config_text)?;
    Ok((curves, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(env: EnvKind, variant: Variant) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(env, OptimizerKind::Adam, variant);
        c.steps = 4;
        c.hidden = vec![6];
        c.batch_size = 8;
        c.batches_per_epoch = 2;
        c.epochs = 2;
        c.eval_mult = 2;
        c
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(summarize(&[0.7; 10]), (0.7, 0.0));
        let mut rng = streams::stream(1, Domain::Scratch, 0, 0, 0);
        let a: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..80_000).map(|_| rng.random::<f64>()).collect();
        let ratio = summarize(&b).1 / summarize(&a).1;
        assert!((ratio - 0.5).abs() < 0.025, "{ratio}");
    }

    #[test]
    fn curve_format() {
        let r = [RunRecord { epoch: 0, mean: 0.5, half_width: 0.01 }];
        assert_eq!(format_curves(&r), "time,f,f_plus,f_minus\n0,0.5,0.51,0.49\n");
        assert_eq!(format_curves(&[]), "time,f,f_plus,f_minus\n");
        let recs: Vec<RunRecord> =
            (0..5).map(|e| RunRecord { epoch: e, mean: 0.1 * e as f64 + 0.37, half_width: 1e-3 * e as f64 }).collect();
        let back = parse_curves(&format_curves(&recs)).unwrap();
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.epoch, b.epoch);
            assert!((a.mean - b.mean).abs() < 1e-15);
            assert!((a.half_width - b.half_width).abs() < 1e-15);
        }
        assert!(parse_curves("time,f\n").is_err());
        assert!(parse_curves("time,f,f_plus,f_minus\n0,1,2\n").is_err());
    }

    #[test]
    fn epochs_zero_gives_single_record() {
        let mut c = small(EnvKind::Fishing, Variant::Base);
        c.epochs = 0;
        let r = train(&c).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].epoch, 0);
    }

    #[test]
    fn evaluation_matches_direct_mean() {
        let c = small(EnvKind::Fishing, Variant::Base);
        let env = c.environment().unwrap();
        let param = c.parametrization(env.as_ref());
        let params = c.initial_params(env.as_ref()).unwrap();
        let key = NoiseKey::eval(c.seeds.data, 0);
        let (mean, _) = evaluate(env.as_ref(), &params, &param, 100, key).unwrap();
        let vals = sample_objectives(env.as_ref(), &params, &param, 100, key).unwrap();
        let mut direct = 0.0;
        for v in &vals {
            direct += v;
        }
        assert!((mean - direct / 100.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_zero_noise_equivalent() {
        for env in EnvKind::ALL {
            let base = small(env, Variant::Base);
            let a = train(&base).unwrap();
            assert_eq!(a, train(&base).unwrap());
            let mut quiet = small(env, Variant::Langevin);
            quiet.schedule = base.schedule.without_noise();
            let mut ll0 = small(env, Variant::LayerLangevin(0.0));
            ll0.schedule = base.schedule.clone();
            let runs = compare(&[base, quiet, ll0]).unwrap();
            assert_eq!(runs[0], a);
            assert_eq!(runs[1], a);
            assert_eq!(runs[2], a);
        }
    }

    #[test]
    fn langevin_shares_initial_evaluation() {
        let runs = compare(&[small(EnvKind::Fishing, Variant::Base), small(EnvKind::Fishing, Variant::Langevin)]).unwrap();
        assert_eq!(runs[0][0], runs[1][0]);
        assert_ne!(runs[0][2], runs[1][2]);
    }

    #[test]
    fn evaluation_does_not_perturb_training() {
        let c = small(EnvKind::Fishing, Variant::Langevin);
        let env = c.environment().unwrap();
        let init = c.initial_params(env.as_ref()).unwrap();
        let mut grads_a = Vec::new();
        let mut obs = |_: usize, _: usize, _: f64, g: &[f64]| grads_a.push(g.to_vec());
        let a = train_from(&c, env.as_ref(), init.clone(), Some(&mut obs)).unwrap();
        let mut more = c.clone();
        more.eval_mult = 7;
        let mut grads_b = Vec::new();
        let mut obs = |_: usize, _: usize, _: f64, g: &[f64]| grads_b.push(g.to_vec());
        let b = train_from(&more, env.as_ref(), init, Some(&mut obs)).unwrap();
        assert_eq!(grads_a, grads_b);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn mismatched_compare_is_rejected() {
        let a = small(EnvKind::Fishing, Variant::Base);
        let mut b = a.clone();
        b.hidden = vec![7];
        assert!(matches!(compare(&[a.clone(), b]), Err(HarnessError::Config(_))));
        let mut c = a.clone();
        c.seeds.init = 99;
        assert!(compare(&[a, c]).is_err());
    }
}
