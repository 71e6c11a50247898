//! Oil extraction and storage under a Black-Scholes price.
//!
//! Controls are the extraction-for-sale rate `qv`, the extraction-to-storage
//! rate `qs` and the destocking rate `qvs`. The head maps raw network output
//! into the feasible set with relu/min compositions so that every rollout
//! satisfies the operational bounds by construction.

use std::fmt;
use std::str::FromStr;

use crate::nets::OutputHead;
use crate::sim::{Environment, SimError, StepCtx};
use crate::streams::StreamRng;
use crate::tape::{Mat, NodeId, Tape};

/// Slack allowed on the storage bound for floating-point roundoff.
pub const STORAGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility {
    Identity,
    /// `(1 - exp(-gamma x)) / gamma`.
    Cara { gamma: f64 },
}

impl Utility {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Utility::Identity => x,
            Utility::Cara { gamma } => (1.0 - (-gamma * x).exp()) / gamma,
        }
    }

    fn node(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, SimError> {
        Ok(match *self {
            Utility::Identity => x,
            Utility::Cara { gamma } => {
                let e = tape.scale(x, -gamma)?;
                let e = tape.exp(e)?;
                let e = tape.scale(e, -1.0 / gamma)?;
                tape.add_scalar(e, 1.0 / gamma)?
            }
        })
    }
}

impl FromStr for Utility {
    type Err = String;

    /// `identity` or `cara:<gamma>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "identity" {
            return Ok(Utility::Identity);
        }
        if let Some(g) = s.strip_prefix("cara:") {
            let gamma: f64 = g.parse().map_err(|_| format!("bad CARA coefficient `{g}`"))?;
            if !(gamma > 0.0) {
                return Err("CARA coefficient must be positive".into());
            }
            return Ok(Utility::Cara { gamma });
        }
        Err(format!("unknown utility `{s}`"))
    }
}

impl fmt::Display for Utility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Utility::Identity => f.write_str("identity"),
            Utility::Cara { gamma } => write!(f, "cara:{gamma}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OilParams {
    pub horizon: f64,
    pub mu: f64,
    pub eta: f64,
    pub discount: f64,
    pub friction: f64,
    /// Maximum total extraction rate.
    pub k0: f64,
    pub xi_e: f64,
    pub xi_s: f64,
    /// Maximum destocking rate.
    pub q_destock: f64,
    /// Storage capacity, possibly infinite.
    pub capacity: f64,
    pub p0: f64,
    pub utility: Utility,
}

impl Default for OilParams {
    fn default() -> Self {
        OilParams {
            horizon: 1.0,
            mu: 0.01,
            eta: 0.2,
            discount: 0.01,
            friction: 0.0,
            k0: 5.0,
            xi_e: 1e-2,
            xi_s: 5e-3,
            q_destock: 10.0,
            capacity: f64::INFINITY,
            p0: 1.0,
            utility: Utility::Identity,
        }
    }
}

impl OilParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k0 > 0.0) || !(self.q_destock > 0.0) {
            return Err("k0 and q_destock must be positive".into());
        }
        if !(0.0..1.0).contains(&self.friction) {
            return Err("friction must lie in [0, 1)".into());
        }
        if !(self.p0 > 0.0) {
            return Err("p0 must be positive".into());
        }
        if !(self.capacity > 0.0) {
            return Err("capacity must be positive".into());
        }
        if !(self.horizon > 0.0) || self.eta < 0.0 {
            return Err("horizon must be positive and eta non-negative".into());
        }
        Ok(())
    }
}

/// One Euler step of the price. Fails when the price leaves `(0, inf)`.
pub fn oil_price_step(p: f64, xi: f64, h: f64, params: &OilParams) -> Result<f64, String> {
    let next = p * (1.0 + params.mu * h + params.eta * h.sqrt() * xi);
    if next > 0.0 {
        Ok(next)
    } else {
        Err(format!("price {next} is not positive"))
    }
}

/// Feasible rates `(qv, qs, qvs)` from raw network output and current storage.
pub fn oil_constrained_head(raw: [f64; 3], storage: f64, h: f64, params: &OilParams) -> [f64; 3] {
    let a = raw.map(|r| r.max(0.0));
    let qv = a[0].min(params.k0);
    let mut qs = a[1].min(params.k0 - qv);
    if params.capacity.is_finite() {
        qs = qs.min((params.capacity - storage) / h);
    }
    let qvs = a[2].min(params.q_destock).min(storage / h + qs);
    [qv, qs, qvs]
}

/// Profit rate before utility and discounting.
pub fn oil_profit(price: f64, extracted: f64, storage: f64, q: [f64; 3], params: &OilParams) -> f64 {
    let [qv, qs, qvs] = q;
    qv * price + qvs * (1.0 - params.friction) * price
        - (qv + qs) * (params.xi_e * extracted).exp()
        - ((params.xi_s * storage).exp() - 1.0)
}

/// Cost contribution of one step, evaluated at the left endpoint.
pub fn oil_running_cost(t: f64, state: [f64; 3], q: [f64; 3], h: f64, params: &OilParams) -> f64 {
    let [p, e, s] = state;
    -h * (-params.discount * t).exp() * params.utility.eval(oil_profit(p, e, s, q, params))
}

/// Describes the first violated operational bound, if any.
pub fn constraint_violation(q: [f64; 3], storage_next: f64, params: &OilParams) -> Option<String> {
    let [qv, qs, qvs] = q;
    if q.iter().any(|&v| v < 0.0) {
        return Some(format!("negative rate in {q:?}"));
    }
    if qvs > params.q_destock {
        return Some(format!("destocking {qvs} above {}", params.q_destock));
    }
    if qv + qs > params.k0 {
        return Some(format!("extraction {} above {}", qv + qs, params.k0));
    }
    if storage_next < -STORAGE_TOL {
        return Some(format!("storage {storage_next} below zero"));
    }
    if storage_next > params.capacity + STORAGE_TOL {
        return Some(format!("storage {storage_next} above capacity"));
    }
    None
}

#[derive(Debug, Clone)]
pub struct Oil {
    pub params: OilParams,
}

impl Oil {
    pub fn new(params: OilParams) -> Result<Self, String> {
        params.validate()?;
        Ok(Oil { params })
    }
}

impl Environment for Oil {
    fn name(&self) -> &'static str {
        "oil"
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        3
    }

    fn feature_dim(&self) -> usize {
        3
    }

    fn horizon(&self) -> f64 {
        self.params.horizon
    }

    fn output_head(&self) -> OutputHead {
        OutputHead::OilConstrained
    }

    fn sample_initial_state(&self, _rng: &mut StreamRng) -> Vec<f64> {
        vec![self.params.p0, 0.0, 0.0]
    }

    fn drift(&self, tape: &mut Tape, x: NodeId, u: NodeId) -> Result<NodeId, SimError> {
        let p = tape.slice(x, 0, 1)?;
        let dp = tape.scale(p, self.params.mu)?;
        let qv = tape.slice(u, 0, 1)?;
        let qs = tape.slice(u, 1, 1)?;
        let qvs = tape.slice(u, 2, 1)?;
        let de = tape.add(qv, qs)?;
        let ds = tape.sub(qs, qvs)?;
        Ok(tape.concat(&[dp, de, ds])?)
    }

    fn diffusion_noise(&self, tape: &mut Tape, x: NodeId, _u: NodeId, xi: NodeId) -> Result<Option<NodeId>, SimError> {
        let (rows, _) = tape.shape(x);
        let p = tape.slice(x, 0, 1)?;
        let dp = tape.mul(p, xi)?;
        let dp = tape.scale(dp, self.params.eta)?;
        let zero = tape.constant(Mat::zeros(rows, 2));
        Ok(Some(tape.concat(&[dp, zero])?))
    }

    fn features(&self, _tape: &mut Tape, _k: usize, x: NodeId, _u_prev: Option<NodeId>) -> Result<NodeId, SimError> {
        Ok(x)
    }

    fn apply_head(&self, tape: &mut Tape, raw: NodeId, x: NodeId, h: f64) -> Result<NodeId, SimError> {
        let p = &self.params;
        let a = tape.relu(raw)?;
        let a1 = tape.slice(a, 0, 1)?;
        let a2 = tape.slice(a, 1, 1)?;
        let a3 = tape.slice(a, 2, 1)?;
        let s = tape.slice(x, 2, 1)?;

        let qv = tape.min_const(a1, p.k0)?;
        let room = tape.scale(qv, -1.0)?;
        let room = tape.add_scalar(room, p.k0)?;
        let mut qs = tape.min(a2, room)?;
        if p.capacity.is_finite() {
            let free = tape.scale(s, -1.0 / h)?;
            let free = tape.add_scalar(free, p.capacity / h)?;
            qs = tape.min(qs, free)?;
        }
        let qvs = tape.min_const(a3, p.q_destock)?;
        let avail = tape.scale(s, 1.0 / h)?;
        let avail = tape.add(avail, qs)?;
        let qvs = tape.min(qvs, avail)?;
        Ok(tape.concat(&[qv, qs, qvs])?)
    }

    fn running_cost(&self, tape: &mut Tape, ctx: &StepCtx) -> Result<Option<NodeId>, SimError> {
        let p = &self.params;
        let x = ctx.x_k;
        let u = ctx.u_k;
        let price = tape.slice(x, 0, 1)?;
        let e = tape.slice(x, 1, 1)?;
        let s = tape.slice(x, 2, 1)?;
        let qv = tape.slice(u, 0, 1)?;
        let qs = tape.slice(u, 1, 1)?;
        let qvs = tape.slice(u, 2, 1)?;

        let sale = tape.mul(qv, price)?;
        let stored_sale = tape.mul(qvs, price)?;
        let stored_sale = tape.scale(stored_sale, 1.0 - p.friction)?;
        let revenue = tape.add(sale, stored_sale)?;
        let ce = tape.scale(e, p.xi_e)?;
        let ce = tape.exp(ce)?;
        let extracted = tape.add(qv, qs)?;
        let extraction_cost = tape.mul(extracted, ce)?;
        let cs = tape.scale(s, p.xi_s)?;
        let cs = tape.exp(cs)?;
        let cs = tape.add_scalar(cs, -1.0)?;
        let profit = tape.sub(revenue, extraction_cost)?;
        let profit = tape.sub(profit, cs)?;
        let utility = p.utility.node(tape, profit)?;
        let factor = -ctx.h * (-p.discount * ctx.t_k).exp();
        Ok(Some(tape.scale(utility, factor)?))
    }

    fn check_state(&self, step: usize, x: &Mat) -> Result<(), SimError> {
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            if !(row[0] > 0.0) {
                return Err(SimError::InvalidState { step, reason: format!("price {} is not positive", row[0]) });
            }
            if row[2] < -STORAGE_TOL || row[2] > self.params.capacity + STORAGE_TOL {
                return Err(SimError::InvalidState { step, reason: format!("storage {} out of bounds", row[2]) });
            }
        }
        Ok(())
    }
}
