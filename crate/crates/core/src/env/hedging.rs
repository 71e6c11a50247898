//! Hedging a basket of calls on independent Heston models.
//!
//! Each model contributes two tradables: the spot `S1` and a variance swap
//! `S2 = int_0^t V ds + L(t, V_t)`. Trading pays proportional costs and the
//! position is liquidated at maturity. The objective is the CVaR-type risk
//! `w + E[l(Z - gains + costs - w)]` with `l(x) = max(x, 0) / (1 - alpha)`,
//! minimized jointly over the control network and the scalar `w`.

use std::fmt;
use std::str::FromStr;

use crate::nets::OutputHead;
use crate::sim::{Environment, SimError, StepCtx, TerminalCtx};
use crate::streams::StreamRng;
use crate::tape::{Mat, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapForm {
    /// `L(t, v) = (v - b)/a (1 - exp(-a (T - t))) + b (T - t)`, the
    /// conditional expectation of the remaining integrated variance.
    Conditional,
    /// Same with `exp(+a (T - t))`.
    Printed,
}

impl FromStr for SwapForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conditional" => Ok(SwapForm::Conditional),
            "printed" => Ok(SwapForm::Printed),
            other => Err(format!("unknown swap form `{other}`")),
        }
    }
}

impl fmt::Display for SwapForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwapForm::Conditional => "conditional",
            SwapForm::Printed => "printed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HestonParams {
    pub models: usize,
    pub horizon: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
    pub s0: Vec<f64>,
    pub v0: Vec<f64>,
    pub strike: Vec<f64>,
    /// One entry per tradable: spots first, then swaps.
    pub cost: Vec<f64>,
    pub cvar_alpha: f64,
    pub swap_form: SwapForm,
    /// Spots are absorbed at this level instead of crossing zero; 0 keeps
    /// the plain Euler value.
    pub spot_floor: f64,
}

impl Default for HestonParams {
    fn default() -> Self {
        let d = 5;
        HestonParams {
            models: d,
            horizon: 1.0,
            a: vec![1.0; d],
            b: vec![0.04; d],
            eta: vec![2.0; d],
            rho: vec![-0.7; d],
            s0: vec![1.0; d],
            v0: vec![0.1; d],
            strike: vec![1.0; d],
            cost: vec![5e-4; 2 * d],
            cvar_alpha: 0.9,
            swap_form: SwapForm::Conditional,
            spot_floor: 1e-8,
        }
    }
}

impl HestonParams {
    pub fn validate(&self) -> Result<(), String> {
        let d = self.models;
        if d == 0 {
            return Err("at least one Heston model is required".into());
        }
        for (name, v) in [
            ("a", &self.a),
            ("b", &self.b),
            ("eta", &self.eta),
            ("rho", &self.rho),
            ("s0", &self.s0),
            ("v0", &self.v0),
            ("strike", &self.strike),
        ] {
            if v.len() != d {
                return Err(format!("{name} must have {d} entries"));
            }
        }
        if self.cost.len() != 2 * d {
            return Err(format!("cost must have {} entries", 2 * d));
        }
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0);
        if !positive(&self.a) || !positive(&self.b) || !positive(&self.eta) || !positive(&self.s0) || !positive(&self.v0) {
            return Err("a, b, eta, s0 and v0 must be positive".into());
        }
        if self.rho.iter().any(|r| !(-1.0..=1.0).contains(r)) {
            return Err("rho must lie in [-1, 1]".into());
        }
        if !(self.cvar_alpha > 0.0 && self.cvar_alpha < 1.0) {
            return Err("cvar_alpha must lie in (0, 1)".into());
        }
        if !(self.horizon > 0.0) {
            return Err("horizon must be positive".into());
        }
        if !(self.spot_floor >= 0.0) {
            return Err("spot_floor must be non-negative".into());
        }
        Ok(())
    }

    /// `(coef, offset)` with `L(t, v) = coef * (v - b) + offset`.
    fn swap_coefficients(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let tau = (self.horizon - t).max(0.0);
        let sign = match self.swap_form {
            SwapForm::Conditional => -1.0,
            SwapForm::Printed => 1.0,
        };
        let coef = self.a.iter().map(|&a| (1.0 - (sign * a * tau).exp()) / a).collect();
        let offset = self.b.iter().map(|&b| b * tau).collect();
        (coef, offset)
    }

    /// `L(t, v)` per model.
    pub fn variance_swap(&self, t: f64, v: &[f64]) -> Vec<f64> {
        let (coef, offset) = self.swap_coefficients(t);
        (0..self.models).map(|i| coef[i] * (v[i] - self.b[i]) + offset[i]).collect()
    }

    pub fn loss(&self, x: f64) -> f64 {
        x.max(0.0) / (1.0 - self.cvar_alpha)
    }

    /// `sum_i (S1_i - K_i)_+`.
    pub fn payoff(&self, spot: &[f64]) -> f64 {
        spot.iter().zip(&self.strike).map(|(s, k)| (s - k).max(0.0)).sum()
    }
}

/// One sample's Heston state.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgingState {
    pub spot: Vec<f64>,
    pub var: Vec<f64>,
    pub int_var: Vec<f64>,
}

impl HedgingState {
    pub fn initial(p: &HestonParams) -> Self {
        HedgingState { spot: p.s0.clone(), var: p.v0.clone(), int_var: vec![0.0; p.models] }
    }

    /// Flat layout used by the rollout: spots, variances, integrated variances.
    pub fn to_vec(&self) -> Vec<f64> {
        [self.spot.as_slice(), &self.var, &self.int_var].concat()
    }

    pub fn from_slice(x: &[f64], models: usize) -> Self {
        HedgingState {
            spot: x[..models].to_vec(),
            var: x[models..2 * models].to_vec(),
            int_var: x[2 * models..3 * models].to_vec(),
        }
    }

    /// Spots followed by swap values at time `t`.
    pub fn tradables(&self, t: f64, p: &HestonParams) -> Vec<f64> {
        let l = p.variance_swap(t, &self.var);
        let swaps = self.int_var.iter().zip(l).map(|(i, l)| i + l);
        self.spot.iter().copied().chain(swaps).collect()
    }
}

/// Full-truncation Euler step of the Heston pair and the variance integral.
pub fn heston_step(state: &HedgingState, xi_w: &[f64], xi_perp: &[f64], h: f64, p: &HestonParams) -> HedgingState {
    let mut next = state.clone();
    let sh = h.sqrt();
    for i in 0..p.models {
        let vp = state.var[i].max(0.0);
        let sv = vp.sqrt();
        next.var[i] = state.var[i] + p.a[i] * (p.b[i] - vp) * h + p.eta[i] * sv * sh * xi_w[i];
        let bn = p.rho[i] * xi_w[i] + (1.0 - p.rho[i] * p.rho[i]).sqrt() * xi_perp[i];
        let s = state.spot[i] * (1.0 + sv * sh * bn);
        next.spot[i] = if p.spot_floor > 0.0 { s.max(p.spot_floor) } else { s };
        next.int_var[i] = state.int_var[i] + vp * h;
    }
    next
}

/// Per-sample hedging objective from a simulated path, computed directly on
/// values. `states` has `N + 1` entries, `controls` has `N`.
pub fn hedging_objective_path(states: &[HedgingState], controls: &[Vec<f64>], w: f64, p: &HestonParams) -> f64 {
    let n = controls.len();
    let tr: Vec<Vec<f64>> = states.iter().enumerate().map(|(k, s)| s.tradables(k as f64 * p.horizon / n as f64, p)).collect();
    let d1 = 2 * p.models;
    let zero = vec![0.0; d1];
    let mut gains = 0.0;
    let mut costs = 0.0;
    for k in 0..=n {
        let u = if k < n { &controls[k] } else { &zero };
        let prev = if k == 0 { &zero } else { &controls[k - 1] };
        for j in 0..d1 {
            if k < n {
                gains += u[j] * (tr[k + 1][j] - tr[k][j]);
            }
            costs += p.cost[j] * tr[k][j] * (u[j] - prev[j]).abs();
        }
    }
    let z = p.payoff(&states[n].spot);
    w + p.loss(z - gains + costs - w)
}

#[derive(Debug, Clone)]
pub struct Hedging {
    pub params: HestonParams,
}

impl Hedging {
    pub fn new(params: HestonParams) -> Result<Self, String> {
        params.validate()?;
        Ok(Hedging { params })
    }

    fn m(&self) -> usize {
        self.params.models
    }

    /// `batch x 2m` node of spots and swap values at time `t`.
    fn tradables_node(&self, tape: &mut Tape, t: f64, x: NodeId) -> Result<NodeId, SimError> {
        let m = self.m();
        let (coef, offset) = self.params.swap_coefficients(t);
        let spot = tape.slice(x, 0, m)?;
        let v = tape.slice(x, m, m)?;
        let iv = tape.slice(x, 2 * m, m)?;
        let b = tape.constant(Mat::row(&self.params.b));
        let c = tape.constant(Mat::row(&coef));
        let o = tape.constant(Mat::row(&offset));
        let l = tape.sub(v, b)?;
        let l = tape.mul(l, c)?;
        let l = tape.add(l, o)?;
        let s2 = tape.add(iv, l)?;
        Ok(tape.concat(&[spot, s2])?)
    }

    fn cost_term(&self, tape: &mut Tape, s: NodeId, du: NodeId) -> Result<NodeId, SimError> {
        let c = tape.constant(Mat::row(&self.params.cost));
        let a = tape.abs(du)?;
        let sa = tape.mul(s, a)?;
        Ok(tape.dot(sa, c)?)
    }
}

impl Environment for Hedging {
    fn name(&self) -> &'static str {
        "hedging"
    }

    fn state_dim(&self) -> usize {
        3 * self.m()
    }

    fn noise_dim(&self) -> usize {
        2 * self.m()
    }

    fn control_dim(&self) -> usize {
        2 * self.m()
    }

    /// `(log S1, V, u_prev)`.
    fn feature_dim(&self) -> usize {
        4 * self.m()
    }

    fn horizon(&self) -> f64 {
        self.params.horizon
    }

    fn output_head(&self) -> OutputHead {
        OutputHead::ReluNonneg
    }

    fn aux_init(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn sample_initial_state(&self, _rng: &mut StreamRng) -> Vec<f64> {
        HedgingState::initial(&self.params).to_vec()
    }

    fn drift(&self, tape: &mut Tape, x: NodeId, _u: NodeId) -> Result<NodeId, SimError> {
        let m = self.m();
        let (rows, _) = tape.shape(x);
        let zero = tape.constant(Mat::zeros(rows, m));
        let v = tape.slice(x, m, m)?;
        let vp = tape.positive_part(v)?;
        let b = tape.constant(Mat::row(&self.params.b));
        let a = tape.constant(Mat::row(&self.params.a));
        let dv = tape.sub(b, vp)?;
        let dv = tape.mul(dv, a)?;
        Ok(tape.concat(&[zero, dv, vp])?)
    }

    fn diffusion_noise(&self, tape: &mut Tape, x: NodeId, _u: NodeId, xi: NodeId) -> Result<Option<NodeId>, SimError> {
        let m = self.m();
        let (rows, _) = tape.shape(x);
        let spot = tape.slice(x, 0, m)?;
        let v = tape.slice(x, m, m)?;
        let vp = tape.positive_part(v)?;
        let sv = tape.sqrt(vp)?;
        let xw = tape.slice(xi, 0, m)?;
        let xp = tape.slice(xi, m, m)?;
        let rho = tape.constant(Mat::row(&self.params.rho));
        let rho_perp: Vec<f64> = self.params.rho.iter().map(|r| (1.0 - r * r).sqrt()).collect();
        let rho_perp = tape.constant(Mat::row(&rho_perp));
        let bw = tape.mul(xw, rho)?;
        let bp = tape.mul(xp, rho_perp)?;
        let bn = tape.add(bw, bp)?;
        let ds = tape.mul(spot, sv)?;
        let ds = tape.mul(ds, bn)?;
        let eta = tape.constant(Mat::row(&self.params.eta));
        let dv = tape.mul(sv, eta)?;
        let dv = tape.mul(dv, xw)?;
        let zero = tape.constant(Mat::zeros(rows, m));
        Ok(Some(tape.concat(&[ds, dv, zero])?))
    }

    fn project(&self, tape: &mut Tape, x_next: NodeId) -> Result<NodeId, SimError> {
        let floor = self.params.spot_floor;
        if floor == 0.0 {
            return Ok(x_next);
        }
        let m = self.m();
        let spot = tape.slice(x_next, 0, m)?;
        let rest = tape.slice(x_next, m, 2 * m)?;
        // max(s, floor) = floor + (s - floor)_+
        let s = tape.add_scalar(spot, -floor)?;
        let s = tape.positive_part(s)?;
        let s = tape.add_scalar(s, floor)?;
        Ok(tape.concat(&[s, rest])?)
    }

    fn features(&self, tape: &mut Tape, k: usize, x: NodeId, u_prev: Option<NodeId>) -> Result<NodeId, SimError> {
        let m = self.m();
        let (rows, _) = tape.shape(x);
        let spot = tape.slice(x, 0, m)?;
        if tape.value(spot).data().iter().any(|&s| !(s > 0.0)) {
            return Err(SimError::InvalidState { step: k, reason: "non-positive spot price".into() });
        }
        let ls = tape.log(spot)?;
        let v = tape.slice(x, m, m)?;
        let prev = match u_prev {
            Some(u) => u,
            None => tape.constant(Mat::zeros(rows, 2 * m)),
        };
        Ok(tape.concat(&[ls, v, prev])?)
    }

    fn running_cost(&self, tape: &mut Tape, ctx: &StepCtx) -> Result<Option<NodeId>, SimError> {
        let s = self.tradables_node(tape, ctx.t_k, ctx.x_k)?;
        let s_next = self.tradables_node(tape, ctx.t_next, ctx.x_next)?;
        let ds = tape.sub(s_next, s)?;
        let gain = tape.dot(ctx.u_k, ds)?;
        let du = match ctx.u_prev {
            Some(p) => tape.sub(ctx.u_k, p)?,
            None => ctx.u_k,
        };
        let cost = self.cost_term(tape, s, du)?;
        Ok(Some(tape.sub(cost, gain)?))
    }

    fn terminal_objective(&self, tape: &mut Tape, ctx: &TerminalCtx) -> Result<NodeId, SimError> {
        let m = self.m();
        let s_final = self.tradables_node(tape, ctx.horizon, ctx.x_final)?;
        let liquidation = self.cost_term(tape, s_final, ctx.u_last)?;
        let spot = tape.slice(ctx.x_final, 0, m)?;
        let k = tape.constant(Mat::row(&self.params.strike));
        let z = tape.sub(spot, k)?;
        let z = tape.positive_part(z)?;
        let z = tape.sum_cols(z)?;
        let mut pnl = tape.add(z, liquidation)?;
        if let Some(r) = ctx.running {
            pnl = tape.add(pnl, r)?;
        }
        let w = match ctx.aux {
            Some(a) => tape.slice(a, 0, 1)?,
            None => tape.scalar(0.0),
        };
        let shifted = tape.sub(pnl, w)?;
        let l = tape.positive_part(shifted)?;
        let l = tape.scale(l, 1.0 / (1.0 - self.params.cvar_alpha))?;
        Ok(tape.add(l, w)?)
    }
}
