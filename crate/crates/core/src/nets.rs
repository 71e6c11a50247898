//! Feedforward control networks and the flat parameter store.

use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::streams::{self, Domain};
use crate::tape::{Mat, NodeId, Tape, TapeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("feature dimension {got} does not match expected {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("time step {k} out of range for {steps} steps")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("output head {0:?} needs environment state and must be applied by the environment")]
    StatefulHead(OutputHead),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Final transformation applied to the network's last affine output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputHead {
    /// `lo + (hi - lo) * sigmoid(z)`, values strictly inside `(lo, hi)`.
    SigmoidBox { lo: f64, hi: f64 },
    /// `relu(z)`.
    ReluNonneg,
    /// Relu/min chain enforcing the oil-drilling operational bounds; it reads
    /// the storage level and so is applied by the oil environment.
    OilConstrained,
    Linear,
}

impl OutputHead {
    pub fn apply(&self, tape: &mut Tape, raw: NodeId) -> Result<NodeId, NetError> {
        match *self {
            OutputHead::SigmoidBox { lo, hi } => {
                let s = tape.sigmoid(raw)?;
                let s = tape.scale(s, hi - lo)?;
                Ok(tape.add_scalar(s, lo)?)
            }
            OutputHead::ReluNonneg => Ok(tape.relu(raw)?),
            OutputHead::Linear => Ok(raw),
            OutputHead::OilConstrained => Err(NetError::StatefulHead(*self)),
        }
    }
}

/// Fully connected network with relu hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub output_head: OutputHead,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(NetError::InvalidSpec(format!(
                "all dimensions must be >= 1 (input {}, hidden {:?}, output {})",
                self.input_dim, self.hidden_dims, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine map, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    /// One network fed with `(t_k / T, features)`.
    SingleNetwork,
    /// Network `k` drives the control at step `k`.
    PerTimestep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlParametrization {
    pub mode: ControlMode,
    pub spec: MlpSpec,
    pub steps: usize,
}

impl ControlParametrization {
    /// Builds the parametrization for a given feature dimension, adding the
    /// time slot to the network input in single-network mode.
    pub fn new(
        mode: ControlMode,
        feature_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        output_head: OutputHead,
        steps: usize,
    ) -> Self {
        let input_dim = match mode {
            ControlMode::SingleNetwork => feature_dim + 1,
            ControlMode::PerTimestep => feature_dim,
        };
        ControlParametrization {
            mode,
            spec: MlpSpec { input_dim, hidden_dims, output_dim, output_head },
            steps,
        }
    }

    pub fn network_count(&self) -> usize {
        match self.mode {
            ControlMode::SingleNetwork => 1,
            ControlMode::PerTimestep => self.steps,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.mode {
            ControlMode::SingleNetwork => self.spec.input_dim - 1,
            ControlMode::PerTimestep => self.spec.input_dim,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.spec.validate()?;
        if self.steps == 0 {
            return Err(NetError::InvalidSpec("at least one time step is required".into()));
        }
        if self.mode == ControlMode::SingleNetwork && self.spec.input_dim < 2 {
            return Err(NetError::InvalidSpec("single-network input needs a time slot".into()));
        }
        Ok(())
    }
}

/// One affine map (weights then bias) or one auxiliary block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerEntry {
    pub network: usize,
    pub layer: usize,
    pub range: Range<usize>,
}

/// Global layer ordering: network index ascending, then depth ascending
/// (layer 0 is nearest the input). Auxiliary scalars come last.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerRegistry {
    entries: Vec<LayerEntry>,
}

impl LayerRegistry {
    pub fn entries(&self) -> &[LayerEntry] {
        &self.entries
    }

    pub fn total_layers(&self) -> usize {
        self.entries.len()
    }

    pub fn param_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.range.end)
    }

    fn push(&mut self, network: usize, layer: usize, len: usize) -> Range<usize> {
        let start = self.param_len();
        let range = start..start + len;
        self.entries.push(LayerEntry { network, layer, range: range.clone() });
        range
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    registry: LayerRegistry,
    networks: usize,
    aux: Range<usize>,
}

impl ParamVector {
    /// Glorot-uniform weights, zero biases, deterministic in `init_seed`.
    pub fn build(parametrization: &ControlParametrization, init_seed: u64) -> Result<Self, NetError> {
        parametrization.validate()?;
        let shapes = parametrization.spec.layer_shapes();
        let networks = parametrization.network_count();
        let mut rng = streams::stream(init_seed, Domain::Init, 0, 0, 0);
        let mut registry = LayerRegistry::default();
        let mut data = Vec::with_capacity(networks * parametrization.spec.param_count());
        for net in 0..networks {
            for (layer, &(fan_in, fan_out)) in shapes.iter().enumerate() {
                registry.push(net, layer, fan_in * fan_out + fan_out);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for _ in 0..fan_in * fan_out {
                    data.push(rng.random_range(-limit..=limit));
                }
                data.extend(std::iter::repeat_n(0.0, fan_out));
            }
        }
        let end = data.len();
        Ok(ParamVector { data, registry, networks, aux: end..end })
    }

    /// Appends trainable scalars that are not part of any network (such as a
    /// risk-measure level). They form one extra registry entry.
    pub fn with_aux(mut self, init: &[f64]) -> Self {
        if init.is_empty() {
            return self;
        }
        let range = self.registry.push(self.networks, 0, init.len());
        self.data.extend_from_slice(init);
        self.aux = range;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    pub fn network_count(&self) -> usize {
        self.networks
    }

    pub fn aux_range(&self) -> Range<usize> {
        self.aux.clone()
    }

    /// Same layout, different values.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "parameter length");
        ParamVector { data, ..self.clone() }
    }

    /// Registers every parameter block on `tape`.
    pub fn bind(&self, tape: &mut Tape, parametrization: &ControlParametrization) -> Result<BoundParams, NetError> {
        let shapes = parametrization.spec.layer_shapes();
        let mut networks = Vec::with_capacity(self.networks);
        let mut entries = self.registry.entries.iter();
        for _ in 0..self.networks {
            let mut layers = Vec::with_capacity(shapes.len());
            for &(fan_in, fan_out) in &shapes {
                let e = entries.next().ok_or_else(|| NetError::InvalidSpec("registry too short".into()))?;
                if e.range.len() != fan_in * fan_out + fan_out {
                    return Err(NetError::InvalidSpec("registry does not match parametrization".into()));
                }
                let w_end = e.range.start + fan_in * fan_out;
                let w = tape.param(Mat::new(fan_in, fan_out, self.data[e.range.start..w_end].to_vec()), e.range.start)?;
                let b = tape.param(Mat::row(&self.data[w_end..e.range.end]), w_end)?;
                layers.push((w, b));
            }
            networks.push(layers);
        }
        let aux = if self.aux.is_empty() {
            None
        } else {
            Some(tape.param(Mat::row(&self.data[self.aux.clone()]), self.aux.start)?)
        };
        Ok(BoundParams { networks, aux })
    }
}

/// Parameter nodes of one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    networks: Vec<Vec<(NodeId, NodeId)>>,
    pub aux: Option<NodeId>,
}

/// Runs the network driving step `k` and returns its pre-head output.
pub fn network_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    parametrization: &ControlParametrization,
    k: usize,
    time_fraction: f64,
    features: NodeId,
) -> Result<NodeId, NetError> {
    if k >= parametrization.steps {
        return Err(NetError::StepOutOfRange { k, steps: parametrization.steps });
    }
    let (rows, cols) = tape.shape(features);
    let expected = parametrization.feature_dim();
    if cols != expected {
        return Err(NetError::FeatureDim { expected, got: cols });
    }
    let (net, mut h) = match parametrization.mode {
        ControlMode::SingleNetwork => {
            let t = tape.constant(Mat::filled(rows, 1, time_fraction));
            (0, tape.concat(&[t, features])?)
        }
        ControlMode::PerTimestep => (k, features),
    };
    let layers = &bound.networks[net];
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, b)?;
        h = if i + 1 < layers.len() { tape.relu(z)? } else { z };
    }
    Ok(h)
}

/// Control at step `k` with a stateless output head applied.
pub fn control_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    parametrization: &ControlParametrization,
    k: usize,
    time_fraction: f64,
    features: NodeId,
) -> Result<NodeId, NetError> {
    let raw = network_forward(tape, bound, parametrization, k, time_fraction, features)?;
    parametrization.spec.output_head.apply(tape, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fishing_like(mode: ControlMode, steps: usize) -> ControlParametrization {
        ControlParametrization::new(
            mode,
            5,
            vec![32, 32],
            5,
            OutputHead::SigmoidBox { lo: 0.1, hi: 1.0 },
            steps,
        )
    }

    #[test]
    fn single_network_count() {
        let p = fishing_like(ControlMode::SingleNetwork, 20);
        let theta = ParamVector::build(&p, 1).unwrap();
        assert_eq!(p.spec.input_dim, 6);
        assert_eq!(theta.len(), 1445);
        assert_eq!(theta.registry().total_layers(), 3);
    }

    #[test]
    fn per_timestep_count() {
        let p = fishing_like(ControlMode::PerTimestep, 10);
        let theta = ParamVector::build(&p, 1).unwrap();
        assert_eq!(p.spec.param_count(), 1413);
        assert_eq!(theta.len(), 14130);
        assert_eq!(theta.registry().total_layers(), 30);
    }

    #[test]
    fn registry_partitions_params() {
        let p = fishing_like(ControlMode::PerTimestep, 4);
        let theta = ParamVector::build(&p, 3).unwrap().with_aux(&[0.0]);
        let mut next = 0;
        let mut prev = None;
        for e in theta.registry().entries() {
            assert_eq!(e.range.start, next);
            next = e.range.end;
            let key = (e.network, e.layer);
            if let Some(pk) = prev {
                assert!(key > pk);
            }
            prev = Some(key);
        }
        assert_eq!(next, theta.len());
        assert_eq!(theta.aux_range(), theta.len() - 1..theta.len());
    }

    #[test]
    fn seeded_build_is_reproducible() {
        let p = fishing_like(ControlMode::SingleNetwork, 10);
        let a = ParamVector::build(&p, 42).unwrap();
        let b = ParamVector::build(&p, 42).unwrap();
        let c = ParamVector::build(&p, 43).unwrap();
        assert_eq!(a.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let p = fishing_like(ControlMode::SingleNetwork, 10);
        let theta = ParamVector::build(&p, 5).unwrap();
        let mut off = 0;
        for (fi, fo) in p.spec.layer_shapes() {
            let limit = (6.0 / (fi + fo) as f64).sqrt();
            assert!(theta.data[off..off + fi * fo].iter().all(|w| w.abs() <= limit));
            assert!(theta.data[off + fi * fo..off + fi * fo + fo].iter().all(|&b| b == 0.0));
            off += fi * fo + fo;
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let p = ControlParametrization::new(ControlMode::PerTimestep, 0, vec![4], 1, OutputHead::Linear, 3);
        assert!(ParamVector::build(&p, 0).is_err());
    }

    fn head_value(head: OutputHead, pre: &[f64]) -> Vec<f64> {
        let mut t = Tape::new(0);
        let z = t.input(Mat::row(pre));
        let y = head.apply(&mut t, z).unwrap();
        t.value(y).data().to_vec()
    }

    #[test]
    fn sigmoid_box_midpoint() {
        let v = head_value(OutputHead::SigmoidBox { lo: 0.1, hi: 1.0 }, &[0.0, 0.0]);
        for x in v {
            assert!((x - 0.55).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_head() {
        assert_eq!(head_value(OutputHead::ReluNonneg, &[-1.0, 2.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn feature_dim_checked() {
        let p = fishing_like(ControlMode::SingleNetwork, 4);
        let theta = ParamVector::build(&p, 0).unwrap();
        let mut t = Tape::new(theta.len());
        let bound = theta.bind(&mut t, &p).unwrap();
        let x = t.input(Mat::zeros(2, 4));
        assert_eq!(
            control_forward(&mut t, &bound, &p, 0, 0.0, x).unwrap_err(),
            NetError::FeatureDim { expected: 5, got: 4 }
        );
    }

    #[test]
    fn per_timestep_gradient_sparsity() {
        let p = fishing_like(ControlMode::PerTimestep, 5);
        let theta = ParamVector::build(&p, 9).unwrap();
        let mut t = Tape::new(theta.len());
        let bound = theta.bind(&mut t, &p).unwrap();
        let x = t.input(Mat::new(2, 5, (0..10).map(|i| 0.5 + 0.1 * i as f64).collect()));
        let u = control_forward(&mut t, &bound, &p, 3, 0.6, x).unwrap();
        let r = t.sum(u).unwrap();
        let g = t.backward(r).unwrap();
        for e in theta.registry().entries() {
            let nonzero = g[e.range.clone()].iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, e.network == 3, "network {}", e.network);
        }
    }

    proptest::proptest! {
        #[test]
        fn sigmoid_box_strictly_inside(z in -30.0f64..30.0) {
            let v = head_value(OutputHead::SigmoidBox { lo: 0.1, hi: 1.0 }, &[z]);
            proptest::prop_assert!(v[0] > 0.1 && v[0] < 1.0);
        }
    }
}
