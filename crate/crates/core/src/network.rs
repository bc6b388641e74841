//! Layer stacks: an optional learnable downsampling convolution, one or more
//! recurrent layers and the self-recurrent readout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::cells::{
    readout_graph, step_graph, zero_state, CellKind, CellParams, Decays, Dynamics, ModSet, OperatorKind,
    ReadoutParams,
};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

fn default_layers() -> usize {
    1
}

fn default_kernel() -> usize {
    3
}

fn default_threshold() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Learnable strided convolution applied to every input frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    #[serde(default)]
    pub padding: (usize, usize),
}

/// Architecture of a network, enough to rebuild it from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub cell: CellKind,
    #[serde(default)]
    pub mods: ModSet,
    /// Shape of one input frame, `C×H×W`.
    pub input_shape: Vec<usize>,
    /// State shape of each recurrent layer; flattened for dense operators.
    pub hidden: Vec<usize>,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Square kernel size of convolutional operators.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub classes: usize,
    #[serde(default = "default_threshold")]
    pub v_th: f64,
    #[serde(default)]
    pub downconv: Option<DownConvSpec>,
    #[serde(default)]
    pub dynamics: Dynamics,
    /// Whether decays (`α`, `β`, `α_out`) are trained.
    #[serde(default = "default_true")]
    pub learn_decay: bool,
}

impl NetworkSpec {
    pub fn operator(&self) -> OperatorKind {
        if self.cell == CellKind::Variant && self.mods.mod3 {
            OperatorKind::Conv { kernel: self.kernel }
        } else {
            OperatorKind::Dense
        }
    }

    /// Shape of the frames the first recurrent layer sees.
    pub fn layer_input_shape(&self) -> Result<Vec<usize>> {
        match &self.downconv {
            None => Ok(self.input_shape.clone()),
            Some(dc) => Ok(downconv_geometry(&self.input_shape, dc)?.out_shape().to_vec()),
        }
    }

    fn state_shape(&self) -> Vec<usize> {
        match self.operator() {
            OperatorKind::Dense => vec![self.hidden.iter().product()],
            OperatorKind::Conv { .. } => self.hidden.clone(),
        }
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("network needs at least one recurrent layer".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_shape.len() != 3 {
            return Err(Error::Config(format!(
                "input frames must be C×H×W, got {:?}",
                self.input_shape
            )));
        }
        if self.cell != CellKind::Variant && self.mods != ModSet::NONE {
            return Err(Error::Config(format!(
                "modifications apply to the variant cell only, not {}",
                self.cell.label()
            )));
        }
        if self.mods.mod3 && self.hidden.len() != 3 {
            return Err(Error::Config(format!(
                "mod3 needs a C×H×W hidden grid, got {:?}",
                self.hidden
            )));
        }
        self.dynamics.surrogate.validate()
    }
}

fn downconv_geometry(input: &[usize], dc: &DownConvSpec) -> Result<ConvGeometry> {
    let &[c, h, w] = input else {
        return Err(Error::Config(format!("downsampling needs C×H×W input, got {input:?}")));
    };
    let g = ConvGeometry {
        in_channels: c,
        out_channels: dc.out_channels,
        in_h: h,
        in_w: w,
        kernel_h: dc.kernel.0,
        kernel_w: dc.kernel.1,
        stride: dc.stride,
        padding: dc.padding,
    };
    if dc.stride.0 == 0 || dc.stride.1 == 0 || h + 2 * dc.padding.0 < dc.kernel.0 || w + 2 * dc.padding.1 < dc.kernel.1
    {
        return Err(Error::Config(format!(
            "downsampling kernel {:?} with stride {:?} does not fit input {input:?}",
            dc.kernel, dc.stride
        )));
    }
    Ok(g)
}

/// Kernel and bias of the downsampling convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DownConvParams<T = Tensor> {
    pub w: T,
    pub b: T,
}

/// Every parameter of a network. `T` is [`Tensor`] or, once bound to a
/// tape, [`NodeId`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = Tensor> {
    pub downconv: Option<DownConvParams<T>>,
    pub layers: Vec<CellParams<T>>,
    pub readout: ReadoutParams<T>,
}

impl<T> NetworkParams<T> {
    /// Parameters in canonical order with fully qualified names such as
    /// `layer0.i.W`.
    pub fn fields(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        if let Some(dc) = &self.downconv {
            out.push(("pipeline.downconv.W".to_string(), &dc.w));
            out.push(("pipeline.downconv.b".to_string(), &dc.b));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.fields().into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.extend(self.readout.fields().into_iter().map(|(n, t)| (format!("readout.{n}"), t)));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        if let Some(dc) = &mut self.downconv {
            out.push(("pipeline.downconv.W".to_string(), &mut dc.w));
            out.push(("pipeline.downconv.b".to_string(), &mut dc.b));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.fields_mut().into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.extend(self.readout.fields_mut().into_iter().map(|(n, t)| (format!("readout.{n}"), t)));
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> NetworkParams<U> {
        let downconv = self.downconv.as_ref().map(|dc| DownConvParams {
            w: f("pipeline.downconv.W", &dc.w),
            b: f("pipeline.downconv.b", &dc.b),
        });
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| layer.map(|n, t| f(&format!("layer{l}.{n}"), t)))
            .collect();
        let readout = ReadoutParams {
            alpha: f("readout.decay.alpha", &self.readout.alpha),
            w: f("readout.out.W", &self.readout.w),
            b: f("readout.out.b", &self.readout.b),
        };
        NetworkParams {
            downconv,
            layers,
            readout,
        }
    }
}

fn is_decay(name: &str) -> bool {
    name.contains(".decay.")
}

/// A network bound onto a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: NetworkParams<NodeId>,
}

/// Tape nodes produced by unrolling one sequence.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Readout output per timestep.
    pub readout: Vec<NodeId>,
    /// `spikes[layer][t]`, empty for non-spiking layers.
    pub spikes: Vec<Vec<NodeId>>,
}

/// Plain-tensor result of [`Network::unroll`].
#[derive(Clone, Debug, PartialEq)]
pub struct Unrolled {
    /// `[T × classes]`.
    pub readout: Tensor,
    /// Per spiking layer, `[T × neurons]`.
    pub spikes: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: NetworkParams,
}

impl Network {
    pub fn init(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let downconv = match &spec.downconv {
            None => None,
            Some(dc) => {
                let g = downconv_geometry(&spec.input_shape, dc)?;
                let fan_in = (g.in_channels * g.kernel_h * g.kernel_w) as f64;
                let bound = (1.0 / fan_in).sqrt();
                let shape = vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w];
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Some(DownConvParams {
                    w: Tensor::new(shape, data)?,
                    b: Tensor::zeros([g.out_channels]),
                })
            }
        };
        let op = spec.operator();
        let state = spec.state_shape();
        let mut input = spec.layer_input_shape()?;
        if op == OperatorKind::Dense {
            input = vec![input.iter().product()];
        }
        let mut layers = Vec::with_capacity(spec.layers);
        for _ in 0..spec.layers {
            layers.push(CellParams::init(spec.cell, spec.mods, op, &input, &state, spec.v_th, rng)?);
            input = state.clone();
        }
        let readout = ReadoutParams::init(spec.hidden_units(), spec.classes, rng);
        Ok(Self {
            spec,
            params: NetworkParams {
                downconv,
                layers,
                readout,
            },
        })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(spec: NetworkSpec, params: NetworkParams) -> Result<Self> {
        let fresh = Self::init(spec.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let expected: Vec<_> = fresh.params.fields().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let actual: Vec<_> = params.fields().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected != actual {
            return Err(Error::Config(format!(
                "parameters do not fit the architecture: expected {expected:?}, found {actual:?}"
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Elements of one input frame.
    pub fn frame_len(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    /// Whether the named parameter receives updates.
    pub fn trainable(&self, name: &str) -> bool {
        self.spec.learn_decay || !is_decay(name)
    }

    /// Binds the parameters onto `tape`; when `train` is set, trainable
    /// parameters become variables.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Bound {
        let params = self.params.map(|name, t| {
            if train && self.trainable(name) {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        Bound { params }
    }

    /// Unrolls the network over `frames` (one node per timestep, each a
    /// `C×H×W` frame) starting from zero state.
    pub fn unroll_graph(&self, tape: &mut Tape, bound: &Bound, frames: &[NodeId]) -> Result<Trace> {
        if frames.is_empty() {
            return Err(Error::Empty("input sequence"));
        }
        let p = &bound.params;
        let decays: Vec<Decays> = p.layers.iter().map(|l| Decays::new(tape, l)).collect();
        let alpha_out = tape.sigmoid(p.readout.alpha);
        let mut states: Vec<_> = p.layers.iter().map(|l| zero_state(tape, l)).collect();
        let mut out = tape.constant(Tensor::zeros([self.spec.classes]));
        let spiking = self.spec.cell.is_spiking();
        let mut trace = Trace {
            readout: Vec::with_capacity(frames.len()),
            spikes: vec![Vec::new(); p.layers.len()],
        };
        for &frame in frames {
            if tape.shape(frame) != self.spec.input_shape.as_slice() {
                return Err(Error::dim("input frame", tape.shape(frame), &self.spec.input_shape));
            }
            let mut x = frame;
            if let (Some(dc), Some(spec)) = (&p.downconv, &self.spec.downconv) {
                let y = tape.conv(x, dc.w, spec.stride, spec.padding)?;
                x = tape.channel_bias(y, dc.b)?;
            }
            for (l, layer) in p.layers.iter().enumerate() {
                states[l] = step_graph(tape, layer, &decays[l], &self.spec.dynamics, states[l], x)?;
                x = states[l].output();
                if spiking {
                    trace.spikes[l].push(x);
                }
            }
            out = readout_graph(tape, &p.readout, alpha_out, out, x)?;
            trace.readout.push(out);
        }
        if !spiking {
            trace.spikes.clear();
        }
        Ok(trace)
    }

    /// Splits a `[T × C × H × W]` tensor into constant frame nodes.
    pub fn frames(&self, tape: &mut Tape, sequence: &Tensor) -> Result<Vec<NodeId>> {
        let shape = sequence.shape();
        if shape.len() != 4 || shape[1..] != self.spec.input_shape[..] {
            let mut expected = vec![0];
            expected.extend(&self.spec.input_shape);
            return Err(Error::dim("input sequence", shape, &expected));
        }
        let frame = self.frame_len();
        let ids = sequence
            .data()
            .chunks_exact(frame)
            .map(|c| {
                let t = Tensor::new(self.spec.input_shape.clone(), c.to_vec()).expect("frame shape");
                tape.constant(t)
            })
            .collect();
        Ok(ids)
    }

    /// Forward pass on plain tensors.
    pub fn unroll(&self, sequence: &Tensor) -> Result<Unrolled> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let frames = self.frames(&mut tape, sequence)?;
        let trace = self.unroll_graph(&mut tape, &bound, &frames)?;
        let stack = |ids: &[NodeId]| -> Tensor {
            let width = tape.value(ids[0]).len();
            let data = ids.iter().flat_map(|&id| tape.value(id).data().iter().copied()).collect();
            Tensor::new([ids.len(), width], data).expect("stacked shape")
        };
        Ok(Unrolled {
            readout: stack(&trace.readout),
            spikes: trace.spikes.iter().map(|s| stack(s)).collect(),
        })
    }

    /// Max-over-time logits for one sequence.
    pub fn logits(&self, sequence: &Tensor) -> Result<Tensor> {
        let un = self.unroll(sequence)?;
        crate::loss::max_over_time(&un.readout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(cell: CellKind, mods: ModSet, hidden: Vec<usize>) -> NetworkSpec {
        NetworkSpec {
            cell,
            mods,
            input_shape: vec![1, 4, 4],
            hidden,
            layers: 1,
            kernel: 3,
            classes: 3,
            v_th: 1.0,
            downconv: None,
            dynamics: Dynamics::default(),
            learn_decay: true,
        }
    }

    #[test]
    fn zero_input_zero_bias_is_quiescent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::init(spec(CellKind::Variant, ModSet::ALL, vec![2, 4, 4]), &mut rng).unwrap();
        for (name, t) in net.params_mut().fields_mut() {
            if name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let un = net.unroll(&Tensor::zeros([6, 1, 4, 4])).unwrap();
        assert!(un.spikes[0].data().iter().all(|&s| s == 0.0));
        assert!(un.readout.data().iter().all(|&o| o == 0.0));
    }

    #[test]
    fn mod3_with_dense_hidden_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = Network::init(spec(CellKind::Variant, ModSet::ALL, vec![32]), &mut rng).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn mods_on_baseline_cells_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = Network::init(spec(CellKind::SpikGru, ModSet::ALL, vec![2, 4, 4]), &mut rng).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn downconv_shapes_flow_into_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = spec(CellKind::SpikGru, ModSet::NONE, vec![8]);
        s.input_shape = vec![1, 8, 8];
        s.downconv = Some(DownConvSpec {
            out_channels: 2,
            kernel: (3, 3),
            stride: (2, 2),
            padding: (1, 1),
        });
        let net = Network::init(s, &mut rng).unwrap();
        assert_eq!(net.params().layers[0].input_shape, vec![2 * 4 * 4]);
        let un = net.unroll(&Tensor::ones([3, 1, 8, 8])).unwrap();
        assert_eq!(un.readout.shape(), &[3, 3]);
        assert_eq!(un.spikes[0].shape(), &[3, 8]);
    }

    #[test]
    fn gru_has_no_spike_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::init(spec(CellKind::Gru, ModSet::NONE, vec![5]), &mut rng).unwrap();
        let un = net.unroll(&Tensor::ones([2, 1, 4, 4])).unwrap();
        assert!(un.spikes.is_empty());
    }

    #[test]
    fn frozen_decays_bind_as_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = spec(CellKind::CubaLif, ModSet::NONE, vec![5]);
        s.learn_decay = false;
        let net = Network::init(s, &mut rng).unwrap();
        assert!(!net.trainable("layer0.decay.beta"));
        assert!(!net.trainable("readout.decay.alpha"));
        assert!(net.trainable("layer0.i.W"));
    }
}
