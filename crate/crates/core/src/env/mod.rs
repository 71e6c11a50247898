//! The three control problems and a uniform way to configure them by key.

pub mod fishing;
pub mod hedging;
pub mod oil;

use std::fmt;
use std::str::FromStr;

use crate::sim::Environment;

pub use fishing::{Fishing, FishingParams};
pub use hedging::{Hedging, HedgingState, HestonParams, SwapForm};
pub use oil::{Oil, OilParams, Utility};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Fishing,
    Hedging,
    Oil,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Fishing, EnvKind::Hedging, EnvKind::Oil];

    pub fn description(&self) -> &'static str {
        match self {
            EnvKind::Fishing => "multi-species fishing quotas (5 species, sigmoid-box quotas)",
            EnvKind::Hedging => "CVaR deep hedging of calls on 5 Heston models with variance swaps",
            EnvKind::Oil => "oil extraction, storage and destocking under a Black-Scholes price",
        }
    }
}

impl FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fishing" => Ok(EnvKind::Fishing),
            "hedging" => Ok(EnvKind::Hedging),
            "oil" => Ok(EnvKind::Oil),
            other => Err(format!("unknown environment `{other}`")),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Fishing => "fishing",
            EnvKind::Hedging => "hedging",
            EnvKind::Oil => "oil",
        })
    }
}

/// Environment parameters, adjustable through `set` with plain keys.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Fishing(FishingParams),
    Hedging(HestonParams),
    Oil(OilParams),
}

fn num(key: &str, value: &str) -> Result<f64, String> {
    value.trim().parse::<f64>().map_err(|_| format!("`{value}` is not a number for key `{key}`"))
}

impl EnvSpec {
    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Fishing => EnvSpec::Fishing(FishingParams::default()),
            EnvKind::Hedging => EnvSpec::Hedging(HestonParams::default()),
            EnvKind::Oil => EnvSpec::Oil(OilParams::default()),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvSpec::Fishing(_) => EnvKind::Fishing,
            EnvSpec::Hedging(_) => EnvKind::Hedging,
            EnvSpec::Oil(_) => EnvKind::Oil,
        }
    }

    /// Keys accepted by `set` for this environment.
    pub fn keys(&self) -> &'static [&'static str] {
        match self {
            EnvSpec::Fishing(_) => &["horizon", "beta", "alpha", "eta", "u_min", "u_max"],
            EnvSpec::Hedging(_) => &["horizon", "cvar_alpha", "cost", "swap_form", "rho", "eta", "v0", "strike", "spot_floor"],
            EnvSpec::Oil(_) => &[
                "horizon", "mu", "eta", "discount", "friction", "k0", "xi_e", "xi_s", "q_destock", "capacity", "p0", "utility",
            ],
        }
    }

    /// Sets one parameter. Vector-valued parameters are set uniformly.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match self {
            EnvSpec::Fishing(p) => match key {
                "horizon" => p.horizon = num(key, value)?,
                "beta" => p.beta = num(key, value)?,
                "alpha" => p.alpha = vec![num(key, value)?; p.species],
                "eta" => p.set_eta_scale(num(key, value)?),
                "u_min" => p.u_min = num(key, value)?,
                "u_max" => p.u_max = num(key, value)?,
                _ => return Err(format!("unknown fishing parameter `{key}`")),
            },
            EnvSpec::Hedging(p) => match key {
                "horizon" => p.horizon = num(key, value)?,
                "cvar_alpha" => p.cvar_alpha = num(key, value)?,
                "cost" => p.cost = vec![num(key, value)?; 2 * p.models],
                "swap_form" => p.swap_form = value.trim().parse()?,
                "rho" => p.rho = vec![num(key, value)?; p.models],
                "eta" => p.eta = vec![num(key, value)?; p.models],
                "v0" => p.v0 = vec![num(key, value)?; p.models],
                "strike" => p.strike = vec![num(key, value)?; p.models],
                "spot_floor" => p.spot_floor = num(key, value)?,
                _ => return Err(format!("unknown hedging parameter `{key}`")),
            },
            EnvSpec::Oil(p) => match key {
                "horizon" => p.horizon = num(key, value)?,
                "mu" => p.mu = num(key, value)?,
                "eta" => p.eta = num(key, value)?,
                "discount" => p.discount = num(key, value)?,
                "friction" => p.friction = num(key, value)?,
                "k0" => p.k0 = num(key, value)?,
                "xi_e" => p.xi_e = num(key, value)?,
                "xi_s" => p.xi_s = num(key, value)?,
                "q_destock" => p.q_destock = num(key, value)?,
                "capacity" => p.capacity = num(key, value)?,
                "p0" => p.p0 = num(key, value)?,
                "utility" => p.utility = value.trim().parse()?,
                _ => return Err(format!("unknown oil parameter `{key}`")),
            },
        }
        Ok(())
    }

    /// Current value of every key in `keys()`, in that order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let vals: Vec<String> = match self {
            EnvSpec::Fishing(p) => vec![
                p.horizon.to_string(),
                p.beta.to_string(),
                p.alpha[0].to_string(),
                p.eta[0].to_string(),
                p.u_min.to_string(),
                p.u_max.to_string(),
            ],
            EnvSpec::Hedging(p) => vec![
                p.horizon.to_string(),
                p.cvar_alpha.to_string(),
                p.cost[0].to_string(),
                p.swap_form.to_string(),
                p.rho[0].to_string(),
                p.eta[0].to_string(),
                p.v0[0].to_string(),
                p.strike[0].to_string(),
                p.spot_floor.to_string(),
            ],
            EnvSpec::Oil(p) => vec![
                p.horizon.to_string(),
                p.mu.to_string(),
                p.eta.to_string(),
                p.discount.to_string(),
                p.friction.to_string(),
                p.k0.to_string(),
                p.xi_e.to_string(),
                p.xi_s.to_string(),
                p.q_destock.to_string(),
                p.capacity.to_string(),
                p.p0.to_string(),
                p.utility.to_string(),
            ],
        };
        self.keys().iter().copied().zip(vals).collect()
    }

    pub fn build(&self) -> Result<Box<dyn Environment>, String> {
        Ok(match self {
            EnvSpec::Fishing(p) => Box::new(Fishing::new(p.clone())?),
            EnvSpec::Hedging(p) => Box::new(Hedging::new(p.clone())?),
            EnvSpec::Oil(p) => Box::new(Oil::new(p.clone())?),
        })
    }
}
