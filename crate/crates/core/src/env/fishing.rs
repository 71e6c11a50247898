//! Multi-species fishing quotas.
//!
//! Biomass follows `dX = X * ((r - u - kappa X) dt + eta dW)`; the cost keeps
//! `X` near a target, rewards larger quotas through `<alpha, u>` and
//! penalizes the quadratic variation of the quota path.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::nets::OutputHead;
use crate::sim::{Environment, SimError, StepCtx};
use crate::streams::StreamRng;
use crate::tape::{Mat, NodeId, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct FishingParams {
    pub species: usize,
    pub horizon: f64,
    pub growth: Vec<f64>,
    /// `species x species`, row-major.
    pub interaction: Vec<f64>,
    /// `species x noise_dim`, row-major.
    pub eta: Vec<f64>,
    pub noise_dim: usize,
    pub target: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub init_mean: f64,
    pub init_var: f64,
    pub init_clip: (f64, f64),
}

impl Default for FishingParams {
    fn default() -> Self {
        let d = 5;
        #[rustfmt::skip]
        let interaction = vec![
            1.2, -0.1, 0.0,  0.0, -0.1,
            0.2,  1.2, 0.0,  0.0, -0.1,
            0.0,  0.2, 1.2, -0.1,  0.0,
            0.0,  0.0, 0.1,  1.2,  0.0,
            0.1,  0.1, 0.0,  0.0,  1.2,
        ];
        let mut eta = vec![0.0; d * d];
        for i in 0..d {
            eta[i * d + i] = 0.1;
        }
        FishingParams {
            species: d,
            horizon: 1.0,
            growth: vec![2.0; d],
            interaction,
            eta,
            noise_dim: d,
            target: vec![1.0; d],
            alpha: vec![0.01; d],
            beta: 0.1,
            u_min: 0.1,
            u_max: 1.0,
            init_mean: 1.0,
            init_var: 0.5,
            init_clip: (0.2, 2.0),
        }
    }
}

impl FishingParams {
    pub fn validate(&self) -> Result<(), String> {
        let d = self.species;
        if d == 0 || self.noise_dim == 0 {
            return Err("species and noise dimension must be positive".into());
        }
        if self.growth.len() != d || self.target.len() != d || self.alpha.len() != d {
            return Err(format!("growth, target and alpha must have {d} entries"));
        }
        if self.interaction.len() != d * d || self.eta.len() != d * self.noise_dim {
            return Err("interaction or eta matrix has the wrong size".into());
        }
        if !(self.u_min < self.u_max) {
            return Err(format!("u_min {} must be below u_max {}", self.u_min, self.u_max));
        }
        if !(self.beta >= 0.0) || !(self.horizon > 0.0) || !(self.init_var >= 0.0) {
            return Err("beta and init_var must be nonnegative and the horizon positive".into());
        }
        if !(self.init_clip.0 <= self.init_clip.1) {
            return Err("initial clip interval is empty".into());
        }
        Ok(())
    }

    /// Sets `eta = scale * I` (square).
    pub fn set_eta_scale(&mut self, scale: f64) {
        let d = self.species;
        self.noise_dim = d;
        self.eta = vec![0.0; d * d];
        for i in 0..d {
            self.eta[i * d + i] = scale;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fishing {
    pub params: FishingParams,
    kappa_t: Mat,
    eta_t: Mat,
}

impl Fishing {
    pub fn new(params: FishingParams) -> Result<Self, String> {
        params.validate()?;
        let d = params.species;
        let kappa_t = Mat::new(d, d, params.interaction.clone()).transpose();
        let eta_t = Mat::new(d, params.noise_dim, params.eta.clone()).transpose();
        Ok(Fishing { params, kappa_t, eta_t })
    }

    /// `x * (r - u - kappa x)`.
    pub fn drift_node(&self, tape: &mut Tape, x: NodeId, u: NodeId) -> Result<NodeId, SimError> {
        let r = tape.constant(Mat::row(&self.params.growth));
        let kt = tape.constant(self.kappa_t.clone());
        let kx = tape.matmul(x, kt)?;
        let a = tape.sub(r, u)?;
        let a = tape.sub(a, kx)?;
        Ok(tape.mul(x, a)?)
    }

    /// Value of the drift for one state and control.
    pub fn drift(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new(0);
        let xn = tape.input(Mat::row(x));
        let un = tape.input(Mat::row(u));
        let b = self.drift_node(&mut tape, xn, un).expect("shapes");
        tape.value(b).data().to_vec()
    }

    /// `diag(x) eta`, the diffusion matrix at `x`.
    pub fn diffusion(&self, x: &[f64]) -> Mat {
        let (d, m) = (self.params.species, self.params.noise_dim);
        let data = (0..d)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| x[i] * self.params.eta[i * m + j])
            .collect();
        Mat::new(d, m, data)
    }

    /// Cost of step `k` given `x_{k+1}`, `u_k` and `u_{k-1}` (absent at `k = 0`).
    pub fn step_cost_node(
        &self,
        tape: &mut Tape,
        h: f64,
        x_next: NodeId,
        u: NodeId,
        u_prev: Option<NodeId>,
    ) -> Result<NodeId, SimError> {
        let target = tape.constant(Mat::row(&self.params.target));
        let alpha = tape.constant(Mat::row(&self.params.alpha));
        let dev = tape.sub(x_next, target)?;
        let dev = tape.square(dev)?;
        let dev = tape.sum_cols(dev)?;
        let sub = tape.dot(u, alpha)?;
        let c = tape.sub(dev, sub)?;
        let mut c = tape.scale(c, h)?;
        if let Some(prev) = u_prev {
            let du = tape.sub(u, prev)?;
            let du = tape.square(du)?;
            let qv = tape.sum_cols(du)?;
            let qv = tape.scale(qv, self.params.beta)?;
            c = tape.add(c, qv)?;
        }
        Ok(c)
    }

    pub fn step_cost(&self, h: f64, x_next: &[f64], u: &[f64], u_prev: Option<&[f64]>) -> f64 {
        let mut tape = Tape::new(0);
        let x = tape.input(Mat::row(x_next));
        let un = tape.input(Mat::row(u));
        let p = u_prev.map(|p| tape.input(Mat::row(p)));
        let c = self.step_cost_node(&mut tape, h, x, un, p).expect("shapes");
        tape.value(c).data()[0]
    }
}

impl Environment for Fishing {
    fn name(&self) -> &'static str {
        "fishing"
    }

    fn state_dim(&self) -> usize {
        self.params.species
    }

    fn noise_dim(&self) -> usize {
        self.params.noise_dim
    }

    fn control_dim(&self) -> usize {
        self.params.species
    }

    fn feature_dim(&self) -> usize {
        self.params.species
    }

    fn horizon(&self) -> f64 {
        self.params.horizon
    }

    fn output_head(&self) -> OutputHead {
        OutputHead::SigmoidBox { lo: self.params.u_min, hi: self.params.u_max }
    }

    /// `N(mean, var I)` clipped componentwise.
    fn sample_initial_state(&self, rng: &mut StreamRng) -> Vec<f64> {
        let sd = self.params.init_var.sqrt();
        let (lo, hi) = self.params.init_clip;
        (0..self.params.species)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (self.params.init_mean + sd * z).clamp(lo, hi)
            })
            .collect()
    }

    fn drift(&self, tape: &mut Tape, x: NodeId, u: NodeId) -> Result<NodeId, SimError> {
        self.drift_node(tape, x, u)
    }

    fn diffusion_noise(&self, tape: &mut Tape, x: NodeId, _u: NodeId, xi: NodeId) -> Result<Option<NodeId>, SimError> {
        let et = tape.constant(self.eta_t.clone());
        let e = tape.matmul(xi, et)?;
        Ok(Some(tape.mul(x, e)?))
    }

    fn features(&self, _tape: &mut Tape, _k: usize, x: NodeId, _u_prev: Option<NodeId>) -> Result<NodeId, SimError> {
        Ok(x)
    }

    fn running_cost(&self, tape: &mut Tape, ctx: &StepCtx) -> Result<Option<NodeId>, SimError> {
        self.step_cost_node(tape, ctx.h, ctx.x_next, ctx.u_k, ctx.u_prev).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{self, Domain};

    fn env() -> Fishing {
        Fishing::new(FishingParams::default()).unwrap()
    }

    #[test]
    fn drift_at_unit_state() {
        let b = env().drift(&[1.0; 5], &[0.1; 5]);
        let expected = [0.9, 0.6, 0.6, 0.6, 0.5];
        for (x, y) in b.iter().zip(expected) {
            assert!((x - y).abs() < 1e-14, "{b:?}");
        }
    }

    #[test]
    fn drift_vanishes_at_extinction_and_balance() {
        assert_eq!(env().drift(&[0.0; 5], &[0.4; 5]), vec![0.0; 5]);
        let mut p = FishingParams::default();
        p.interaction = vec![0.0; 25];
        let e = Fishing::new(p).unwrap();
        assert_eq!(e.drift(&[0.7, 1.3, 2.0, 0.1, 5.0], &[2.0; 5]), vec![0.0; 5]);
    }

    #[test]
    fn diffusion_scaling() {
        let e = env();
        let at_one = e.diffusion(&[1.0; 5]);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(at_one.get(i, j), if i == j { 0.1 } else { 0.0 });
            }
        }
        assert!(e.diffusion(&[0.0; 5]).data().iter().all(|&v| v == 0.0));
        let m = e.diffusion(&[2.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((m.get(0, 0) - 0.2).abs() < 1e-15);
        assert_eq!(m.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn step_costs() {
        let e = env();
        let u = [0.3; 5];
        let c = e.step_cost(0.1, &[1.0; 5], &u, Some(&u));
        assert!((c - 0.1 * -(0.01 * 1.5)).abs() < 1e-15);
        let c = e.step_cost(0.02, &[2.0; 5], &[1.0; 5], Some(&[0.1; 5]));
        assert!((c - 0.504).abs() < 1e-12, "{c}");
        // no variation term at k = 0
        let c0 = e.step_cost(0.02, &[2.0; 5], &[1.0; 5], None);
        assert!((c0 - 0.099).abs() < 1e-12);
    }

    #[test]
    fn initial_state_law() {
        let e = env();
        let mut rng = streams::stream(1, Domain::Scratch, 0, 0, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x = e.sample_initial_state(&mut rng);
            assert!(x.iter().all(|&v| (0.2..=2.0).contains(&v)));
            sum += x[0];
            sq += x[0] * x[0];
        }
        let mean = sum / n as f64;
        let sd = (sq / n as f64 - mean * mean).sqrt();
        // clipped-normal mean, computed by numerical integration in the test oracle below
        let oracle = clipped_normal_mean(1.0, 0.5f64.sqrt(), 0.2, 2.0);
        assert!((mean - oracle).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {oracle}");
        assert!((mean - 1.0).abs() < 0.02);
    }

    fn clipped_normal_mean(mu: f64, sd: f64, lo: f64, hi: f64) -> f64 {
        // Simpson on a wide grid of the standard normal density
        let n = 200_000;
        let (a, b) = (-10.0, 10.0);
        let step = (b - a) / n as f64;
        let f = |z: f64| (mu + sd * z).clamp(lo, hi) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * step);
        }
        s * step / 3.0
    }

    #[test]
    fn unclipped_variance_is_half() {
        let mut p = FishingParams::default();
        p.init_clip = (f64::NEG_INFINITY, f64::INFINITY);
        let e = Fishing::new(p).unwrap();
        let mut rng = streams::stream(2, Domain::Scratch, 0, 0, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| e.sample_initial_state(&mut rng)[2]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((v - 0.5).abs() < 0.01, "{v}");
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = FishingParams::default();
        p.u_min = 2.0;
        assert!(Fishing::new(p).is_err());
        let mut p = FishingParams::default();
        p.alpha.pop();
        assert!(Fishing::new(p).is_err());
    }
}
