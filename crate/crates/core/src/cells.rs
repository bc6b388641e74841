//! Recurrent cells: Cuba-LIF, GRU, SpikGRU and the CS-GRU variant whose
//! modifications are switched on individually through a [`ModSet`].
//!
//! Every cell is written once against the [`Tape`], so the same arithmetic
//! serves training (parameters bound as variables) and plain evaluation
//! (everything bound as constants). The value-level step functions at the
//! bottom of this module wrap the tape versions for single-step use.
//!
//! Notation per layer `ℓ` and step `t`: `W` operators read the layer input
//! `s_t^{ℓ-1}`, `U` operators read the layer's own spikes `s_{t-1}^ℓ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, SpikeMode, SurrogateSpec, Tape};
use crate::error::{Error, Result};
use crate::tensor::{logit, Tensor};

/// Initial value of every sigmoid-parameterised decay and of the update
/// gate bias.
pub const INITIAL_RETENTION: f64 = 0.9;

/// The four CS-GRU modifications.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModSet {
    /// Input-driven current gate `r_t` replaces the constant decay `α`.
    #[serde(default)]
    pub mod1: bool,
    /// The update gate reads the current `i_t` instead of the layer input.
    #[serde(default)]
    pub mod2: bool,
    /// Convolutions replace dense products.
    #[serde(default)]
    pub mod3: bool,
    /// Arctan surrogate gradient.
    #[serde(default)]
    pub mod4: bool,
}

impl ModSet {
    pub const NONE: ModSet = ModSet {
        mod1: false,
        mod2: false,
        mod3: false,
        mod4: false,
    };

    pub const ALL: ModSet = ModSet {
        mod1: true,
        mod2: true,
        mod3: true,
        mod4: true,
    };

    /// Builds a set from modification numbers, e.g. `[1, 3]`.
    pub fn from_indices(indices: &[u8]) -> Result<Self> {
        let mut set = ModSet::NONE;
        for &i in indices {
            match i {
                1 => set.mod1 = true,
                2 => set.mod2 = true,
                3 => set.mod3 = true,
                4 => set.mod4 = true,
                _ => return Err(Error::Config(format!("unknown modification mod{i}"))),
            }
        }
        Ok(set)
    }

    pub fn indices(&self) -> Vec<u8> {
        [self.mod1, self.mod2, self.mod3, self.mod4]
            .iter()
            .zip(1..)
            .filter_map(|(&on, i)| on.then_some(i))
            .collect()
    }

    /// Row label in the ablation table, e.g. `SpikGRU-mod1-2-3-4`.
    pub fn label(&self) -> String {
        let idx = self.indices();
        if idx.is_empty() {
            return "SpikGRU".to_string();
        }
        let parts: Vec<String> = idx.iter().map(u8::to_string).collect();
        format!("SpikGRU-mod{}", parts.join("-"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Gru,
    CubaLif,
    #[serde(rename = "spikgru")]
    SpikGru,
    Variant,
}

impl CellKind {
    pub fn is_spiking(self) -> bool {
        !matches!(self, CellKind::Gru)
    }

    pub fn label(self) -> &'static str {
        match self {
            CellKind::Gru => "GRU",
            CellKind::CubaLif => "Cuba-LIF",
            CellKind::SpikGru => "SpikGRU",
            CellKind::Variant => "variant",
        }
    }
}

/// How `W` and `U` act on their operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum OperatorKind {
    /// Matrix product on flattened operands.
    Dense,
    /// Same-padded convolution with a `kernel×kernel` filter.
    Conv { kernel: usize },
}

/// Feedforward operator, recurrent operator and bias of one gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T = Tensor> {
    pub w: T,
    pub u: T,
    pub b: T,
}

/// Parameters of one recurrent layer. `T` is [`Tensor`] for stored
/// parameters and [`NodeId`] once bound to a tape.
///
/// Decays are stored as free logits; the effective `α`, `β` are their
/// sigmoids and so always lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams<T = Tensor> {
    pub kind: CellKind,
    pub mods: ModSet,
    pub op: OperatorKind,
    pub input_shape: Vec<usize>,
    pub state_shape: Vec<usize>,
    pub v_th: f64,
    /// `W_i, U_i, b_i` (Cuba-LIF: `W, U, b`).
    pub current: Option<Gate<T>>,
    /// `W_z, U_z, b_z`.
    pub update: Option<Gate<T>>,
    /// `W_r, U_r, b_r`: the mod1 current gate, or the GRU reset gate.
    pub reset: Option<Gate<T>>,
    /// `W_h, U_h, b_h` of the GRU candidate state.
    pub candidate: Option<Gate<T>>,
    pub alpha: Option<T>,
    pub beta: Option<T>,
}

/// Which gates and decays a cell carries.
struct Layout {
    current: bool,
    update: bool,
    reset: bool,
    candidate: bool,
    alpha: bool,
    beta: bool,
}

fn layout(kind: CellKind, mods: ModSet) -> Layout {
    match kind {
        CellKind::CubaLif => Layout {
            current: true,
            update: false,
            reset: false,
            candidate: false,
            alpha: true,
            beta: true,
        },
        CellKind::SpikGru => Layout {
            current: true,
            update: true,
            reset: false,
            candidate: false,
            alpha: true,
            beta: false,
        },
        CellKind::Variant => Layout {
            current: true,
            update: true,
            reset: mods.mod1,
            candidate: false,
            alpha: !mods.mod1,
            beta: false,
        },
        CellKind::Gru => Layout {
            current: false,
            update: true,
            reset: true,
            candidate: true,
            alpha: false,
            beta: false,
        },
    }
}

impl<T> CellParams<T> {
    /// Parameters in canonical order, named `gate.role`.
    pub fn fields(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (name, gate) in self.gates() {
            if let Some(g) = gate {
                out.push((format!("{name}.W"), &g.w));
                out.push((format!("{name}.U"), &g.u));
                out.push((format!("{name}.b"), &g.b));
            }
        }
        if let Some(a) = &self.alpha {
            out.push(("decay.alpha".to_string(), a));
        }
        if let Some(b) = &self.beta {
            out.push(("decay.beta".to_string(), b));
        }
        out
    }

    /// Mutable counterpart of [`CellParams::fields`], same order.
    pub fn fields_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        let gates = [
            ("i", self.current.as_mut()),
            ("z", self.update.as_mut()),
            ("r", self.reset.as_mut()),
            ("h", self.candidate.as_mut()),
        ];
        for (name, gate) in gates {
            if let Some(g) = gate {
                out.push((format!("{name}.W"), &mut g.w));
                out.push((format!("{name}.U"), &mut g.u));
                out.push((format!("{name}.b"), &mut g.b));
            }
        }
        if let Some(a) = self.alpha.as_mut() {
            out.push(("decay.alpha".to_string(), a));
        }
        if let Some(b) = self.beta.as_mut() {
            out.push(("decay.beta".to_string(), b));
        }
        out
    }

    fn gates(&self) -> [(&'static str, Option<&Gate<T>>); 4] {
        [
            ("i", self.current.as_ref()),
            ("z", self.update.as_ref()),
            ("r", self.reset.as_ref()),
            ("h", self.candidate.as_ref()),
        ]
    }

    /// Applies `f` to every parameter in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> CellParams<U> {
        let mut gate = |name: &str, g: &Option<Gate<T>>| {
            g.as_ref().map(|g| Gate {
                w: f(&format!("{name}.W"), &g.w),
                u: f(&format!("{name}.U"), &g.u),
                b: f(&format!("{name}.b"), &g.b),
            })
        };
        let current = gate("i", &self.current);
        let update = gate("z", &self.update);
        let reset = gate("r", &self.reset);
        let candidate = gate("h", &self.candidate);
        let alpha = self.alpha.as_ref().map(|a| f("decay.alpha", a));
        let beta = self.beta.as_ref().map(|b| f("decay.beta", b));
        CellParams {
            kind: self.kind,
            mods: self.mods,
            op: self.op,
            input_shape: self.input_shape.clone(),
            state_shape: self.state_shape.clone(),
            v_th: self.v_th,
            current,
            update,
            reset,
            candidate,
            alpha,
            beta,
        }
    }
}

/// Shape of the `W` operator mapping `from` onto the state.
fn operator_shape(op: OperatorKind, from: &[usize], state: &[usize]) -> Vec<usize> {
    match op {
        OperatorKind::Dense => vec![numel(state), numel(from)],
        OperatorKind::Conv { kernel } => vec![state[0], from[0], kernel, kernel],
    }
}

fn bias_shape(op: OperatorKind, state: &[usize]) -> Vec<usize> {
    match op {
        OperatorKind::Dense => vec![numel(state)],
        OperatorKind::Conv { .. } => vec![state[0]],
    }
}

fn decay_shape(state: &[usize]) -> Vec<usize> {
    state.to_vec()
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = numel(&shape);
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl CellParams<Tensor> {
    /// Checks that the configuration is constructible.
    pub fn validate_shapes(
        kind: CellKind,
        mods: ModSet,
        op: OperatorKind,
        input_shape: &[usize],
        state_shape: &[usize],
    ) -> Result<()> {
        if numel(state_shape) == 0 || numel(input_shape) == 0 {
            return Err(Error::Config("layer shapes must be non-empty".into()));
        }
        let conv = matches!(op, OperatorKind::Conv { .. });
        if kind == CellKind::Variant && mods.mod3 != conv {
            return Err(Error::Config(
                "mod3 selects convolutional operators: enable both or neither".into(),
            ));
        }
        if let OperatorKind::Conv { kernel } = op {
            if kernel % 2 == 0 {
                return Err(Error::Config(format!("kernel size must be odd, got {kernel}")));
            }
            if state_shape.len() != 3 {
                return Err(Error::Config(format!(
                    "convolutional state must be C×H×W, got {state_shape:?}"
                )));
            }
            if input_shape.len() != 3 || input_shape[1..] != state_shape[1..] {
                return Err(Error::Config(format!(
                    "convolutional layer needs input with the state's spatial extent: input {input_shape:?}, state {state_shape:?}"
                )));
            }
        }
        Ok(())
    }

    /// Random initialisation: operators uniform in `±√(1/fan_in)`, biases
    /// zero except `b_z` and the mod1 gate's `b_r`, which start at `σ⁻¹(0.9)`
    /// like the decays.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        kind: CellKind,
        mods: ModSet,
        op: OperatorKind,
        input_shape: &[usize],
        state_shape: &[usize],
        v_th: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::validate_shapes(kind, mods, op, input_shape, state_shape)?;
        let lay = layout(kind, mods);
        let fan_in = |from: &[usize]| -> f64 {
            match op {
                OperatorKind::Dense => numel(from) as f64,
                OperatorKind::Conv { kernel } => (from[0] * kernel * kernel) as f64,
            }
        };
        let gate = |present: bool, w_from: &[usize], bias: f64, rng: &mut dyn FnMut(Vec<usize>, f64) -> Tensor| {
            present.then(|| Gate {
                w: rng(operator_shape(op, w_from, state_shape), (1.0 / fan_in(w_from)).sqrt()),
                u: rng(operator_shape(op, state_shape, state_shape), (1.0 / fan_in(state_shape)).sqrt()),
                b: Tensor::full(bias_shape(op, state_shape), bias),
            })
        };
        let mut draw = |shape: Vec<usize>, bound: f64| uniform(shape, bound, rng);
        let z_from = if kind == CellKind::Variant && mods.mod2 {
            state_shape
        } else {
            input_shape
        };
        let retention = logit(INITIAL_RETENTION);
        let current = gate(lay.current, input_shape, 0.0, &mut draw);
        let update = gate(lay.update, z_from, retention, &mut draw);
        // The mod1 gate takes over from α, so it starts where α starts.
        let reset_bias = if kind == CellKind::Variant { retention } else { 0.0 };
        let reset = gate(lay.reset, input_shape, reset_bias, &mut draw);
        let candidate = gate(lay.candidate, input_shape, 0.0, &mut draw);
        Ok(Self {
            kind,
            mods,
            op,
            input_shape: input_shape.to_vec(),
            state_shape: state_shape.to_vec(),
            v_th,
            current,
            update,
            reset,
            candidate,
            alpha: lay.alpha.then(|| Tensor::full(decay_shape(state_shape), retention)),
            beta: lay.beta.then(|| Tensor::full(decay_shape(state_shape), retention)),
        })
    }

    /// All-zero parameters with decays and gate biases at zero logits
    /// (`σ = 0.5`). Useful for constructing hand-checked cases.
    pub fn zeros(
        kind: CellKind,
        mods: ModSet,
        op: OperatorKind,
        input_shape: &[usize],
        state_shape: &[usize],
    ) -> Result<Self> {
        let mut p = Self::init(
            kind,
            mods,
            op,
            input_shape,
            state_shape,
            1.0,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        for (_, t) in p.fields_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    /// Binds every parameter onto `tape`, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CellParams<NodeId> {
        self.map(|_, t| {
            if trainable {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Checks every parameter's shape against the layout.
    pub fn check_layout(&self) -> Result<()> {
        let fresh = Self::zeros(self.kind, self.mods, self.op, &self.input_shape, &self.state_shape)?;
        let expected: Vec<_> = fresh.fields().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let actual: Vec<_> = self.fields().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected != actual {
            return Err(Error::Config(format!(
                "parameter layout mismatch: expected {expected:?}, found {actual:?}"
            )));
        }
        Ok(())
    }
}

/// Dynamic state of a spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    /// Synaptic current `i`.
    pub i: Tensor,
    /// Membrane potential `v`.
    pub v: Tensor,
    /// Output spikes `s` of the previous step.
    pub s: Tensor,
}

impl CellState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            i: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            s: Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Tape-level state of one layer.
#[derive(Clone, Copy, Debug)]
pub enum StateNodes {
    Spiking { i: NodeId, v: NodeId, s: NodeId },
    Gru { h: NodeId },
}

impl StateNodes {
    /// The tensor the next layer (or the readout) consumes.
    pub fn output(&self) -> NodeId {
        match *self {
            StateNodes::Spiking { s, .. } => s,
            StateNodes::Gru { h } => h,
        }
    }
}

/// Forward/backward behaviour of the spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub surrogate: SurrogateSpec,
    #[serde(default)]
    pub mode: SpikeMode,
    /// Treat the reset term `v_th·s_{t-1}` as a constant in the backward pass.
    #[serde(default)]
    pub detach_reset: bool,
}

impl Default for Dynamics {
    fn default() -> Self {
        Self {
            surrogate: SurrogateSpec::new(crate::autodiff::SurrogateKind::Triangular),
            mode: SpikeMode::Hard,
            detach_reset: false,
        }
    }
}

/// Applies an operator: `w · x` (dense, on the flattened operand) or
/// `w * x` (same-padded convolution).
fn apply(tape: &mut Tape, op: OperatorKind, w: NodeId, x: NodeId, state_shape: &[usize]) -> Result<NodeId> {
    match op {
        OperatorKind::Dense => {
            let n = tape.value(x).len();
            let flat = tape.reshape(x, vec![n])?;
            tape.matvec(w, flat)
        }
        OperatorKind::Conv { .. } => {
            let y = tape.conv_same(x, w)?;
            if tape.shape(y) != state_shape {
                return Err(Error::dim("conv operator", tape.shape(y), state_shape));
            }
            Ok(y)
        }
    }
}

fn add_bias(tape: &mut Tape, op: OperatorKind, x: NodeId, b: NodeId) -> Result<NodeId> {
    match op {
        OperatorKind::Dense => tape.add(x, b),
        OperatorKind::Conv { .. } => tape.channel_bias(x, b),
    }
}

/// `(W ∘ x + U ∘ h) + b`.
fn gate_input(
    tape: &mut Tape,
    p: &CellParams<NodeId>,
    gate: &Gate<NodeId>,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let wx = apply(tape, p.op, gate.w, x, &p.state_shape)?;
    let uh = apply(tape, p.op, gate.u, h, &p.state_shape)?;
    let sum = tape.add(wx, uh)?;
    add_bias(tape, p.op, sum, gate.b)
}

fn require<'a>(g: &'a Option<Gate<NodeId>>, name: &str) -> Result<&'a Gate<NodeId>> {
    g.as_ref()
        .ok_or_else(|| Error::Config(format!("cell is missing its {name} gate")))
}

/// Sigmoids of the decay logits, computed once per sequence.
#[derive(Clone, Copy, Debug)]
pub struct Decays {
    pub alpha: Option<NodeId>,
    pub beta: Option<NodeId>,
}

impl Decays {
    pub fn new(tape: &mut Tape, p: &CellParams<NodeId>) -> Self {
        Self {
            alpha: p.alpha.map(|a| tape.sigmoid(a)),
            beta: p.beta.map(|b| tape.sigmoid(b)),
        }
    }
}

/// Zero initial state for a layer.
pub fn zero_state(tape: &mut Tape, p: &CellParams<NodeId>) -> StateNodes {
    let shape = p.state_shape.clone();
    if p.kind == CellKind::Gru {
        let flat = vec![numel(&shape)];
        StateNodes::Gru {
            h: tape.constant(Tensor::zeros(flat)),
        }
    } else {
        StateNodes::Spiking {
            i: tape.constant(Tensor::zeros(shape.clone())),
            v: tape.constant(Tensor::zeros(shape.clone())),
            s: tape.constant(Tensor::zeros(shape)),
        }
    }
}

/// Brings a layer input into the shape its operators expect.
fn conform_input(tape: &mut Tape, p: &CellParams<NodeId>, x: NodeId) -> Result<NodeId> {
    let n = tape.value(x).len();
    if n != numel(&p.input_shape) {
        return Err(Error::dim("layer input", tape.shape(x), &p.input_shape));
    }
    match p.op {
        OperatorKind::Dense => tape.reshape(x, vec![n]),
        OperatorKind::Conv { .. } => tape.reshape(x, p.input_shape.clone()),
    }
}

/// Membrane update and firing shared by all spiking cells:
/// `v_t = keep ⊙ v_{t-1} + (1 - keep) ⊙ i_t - v_th s_{t-1}`,
/// `s_t = H(v_t - v_th)`.
fn integrate_and_fire(
    tape: &mut Tape,
    p: &CellParams<NodeId>,
    dynamics: &Dynamics,
    keep: NodeId,
    v_prev: NodeId,
    i: NodeId,
    s_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let kept = tape.mul(keep, v_prev)?;
    let gain = tape.one_minus(keep);
    let driven = tape.mul(gain, i)?;
    let sum = tape.add(kept, driven)?;
    let s_reset = if dynamics.detach_reset {
        tape.detach(s_prev)?
    } else {
        s_prev
    };
    let reset = tape.scale(s_reset, p.v_th);
    let v = tape.sub(sum, reset)?;
    let spec = SurrogateSpec {
        v_th: p.v_th,
        ..dynamics.surrogate
    };
    let s = tape.spike(v, spec, dynamics.mode);
    Ok((v, s))
}

fn spiking_state(state: StateNodes) -> Result<(NodeId, NodeId, NodeId)> {
    match state {
        StateNodes::Spiking { i, v, s } => Ok((i, v, s)),
        StateNodes::Gru { .. } => Err(Error::Config("spiking cell given a GRU state".into())),
    }
}

/// Cuba-LIF: `i_t = α ⊙ i_{t-1} + W s_t^{ℓ-1} + U s_{t-1}^ℓ + b`,
/// `v_t = β ⊙ v_{t-1} + (1-β) ⊙ i_t - v_th s_{t-1}^ℓ`.
pub fn cuba_lif_graph(
    tape: &mut Tape,
    p: &CellParams<NodeId>,
    decays: &Decays,
    dynamics: &Dynamics,
    state: StateNodes,
    input: NodeId,
) -> Result<StateNodes> {
    let (i_prev, v_prev, s_prev) = spiking_state(state)?;
    let x = conform_input(tape, p, input)?;
    let gate = require(&p.current, "current")?;
    let alpha = decays.alpha.ok_or_else(|| Error::Config("Cuba-LIF needs α".into()))?;
    let beta = decays.beta.ok_or_else(|| Error::Config("Cuba-LIF needs β".into()))?;
    let drive = gate_input(tape, p, gate, x, s_prev)?;
    let leak = tape.mul(alpha, i_prev)?;
    let i = tape.add(leak, drive)?;
    let (v, s) = integrate_and_fire(tape, p, dynamics, beta, v_prev, i, s_prev)?;
    Ok(StateNodes::Spiking { i, v, s })
}

/// SpikGRU: Cuba-LIF with the membrane decay replaced by the update gate
/// `z_t = σ(W_z s_t^{ℓ-1} + U_z s_{t-1}^ℓ + b_z)`.
pub fn spikgru_graph(
    tape: &mut Tape,
    p: &CellParams<NodeId>,
    decays: &Decays,
    dynamics: &Dynamics,
    state: StateNodes,
    input: NodeId,
) -> Result<StateNodes> {
    let (i_prev, v_prev, s_prev) = spiking_state(state)?;
    let x = conform_input(tape, p, input)?;
    let cur = require(&p.current, "current")?;
    let upd = require(&p.update, "update")?;
    let alpha = decays.alpha.ok_or_else(|| Error::Config("SpikGRU needs α".into()))?;
    let drive = gate_input(tape, p, cur, x, s_prev)?;
    let leak = tape.mul(alpha, i_prev)?;
    let i = tape.add(leak, drive)?;
    let z_in = gate_input(tape, p, upd, x, s_prev)?;
    let z = tape.sigmoid(z_in);
    let (v, s) = integrate_and_fire(tape, p, dynamics, z, v_prev, i, s_prev)?;
    Ok(StateNodes::Spiking { i, v, s })
}

/// SpikGRU with the modifications in `p.mods` applied:
///
/// * mod1: `r_t = σ(W_r ∘ s_t^{ℓ-1} + U_r ∘ s_{t-1}^ℓ + b_r)` replaces `α`;
/// * mod2: `z_t = σ(W_z ∘ i_t + U_z ∘ s_{t-1}^ℓ + b_z)`;
/// * mod3: `∘` is a convolution instead of a dense product.
///
/// With every modification off this is exactly [`spikgru_graph`].
pub fn variant_graph(
    tape: &mut Tape,
    p: &CellParams<NodeId>,
    decays: &Decays,
    dynamics: &Dynamics,
    state: StateNodes,
    input: NodeId,
) -> Result<StateNodes> {
    let mods = p.mods;
    if mods.mod3 != matches!(p.op, OperatorKind::Conv { .. }) {
        return Err(Error::Config("mod3 requires convolutional operators over a C×H×W state".into()));
    }
    let (i_prev, v_prev, s_prev) = spiking_state(state)?;
    let x = conform_input(tape, p, input)?;
    let cur = require(&p.current, "current")?;
    let upd = require(&p.update, "update")?;
    let retain = if mods.mod1 {
        let r_in = gate_input(tape, p, require(&p.reset, "current-gate")?, x, s_prev)?;
        tape.sigmoid(r_in)
    } else {
        decays.alpha.ok_or_else(|| Error::Config("variant without mod1 needs α".into()))?
    };
    let drive = gate_input(tape, p, cur, x, s_prev)?;
    let leak = tape.mul(retain, i_prev)?;
    let i = tape.add(leak, drive)?;
    let z_src = if mods.mod2 { i } else { x };
    let z_in = gate_input(tape, p, upd, z_src, s_prev)?;
    let z = tape.sigmoid(z_in);
    let (v, s) = integrate_and_fire(tape, p, dynamics, z, v_prev, i, s_prev)?;
    Ok(StateNodes::Spiking { i, v, s })
}

/// Non-spiking GRU: `h_t = z ⊙ h_{t-1} + (1-z) ⊙ tanh(W_h x + U_h (h_{t-1} ⊙ r) + b_h)`.
pub fn gru_graph(tape: &mut Tape, p: &CellParams<NodeId>, state: StateNodes, input: NodeId) -> Result<StateNodes> {
    let StateNodes::Gru { h: h_prev } = state else {
        return Err(Error::Config("GRU cell given a spiking state".into()));
    };
    if p.op != OperatorKind::Dense {
        return Err(Error::Config("GRU cell supports dense operators only".into()));
    }
    let x = conform_input(tape, p, input)?;
    let zg = require(&p.update, "update")?;
    let rg = require(&p.reset, "reset")?;
    let hg = require(&p.candidate, "candidate")?;
    let z_in = gate_input(tape, p, zg, x, h_prev)?;
    let z = tape.sigmoid(z_in);
    let r_in = gate_input(tape, p, rg, x, h_prev)?;
    let r = tape.sigmoid(r_in);
    let gated = tape.mul(h_prev, r)?;
    let cand_in = gate_input(tape, p, hg, x, gated)?;
    let cand = tape.tanh(cand_in);
    let kept = tape.mul(z, h_prev)?;
    let gain = tape.one_minus(z);
    let fresh = tape.mul(gain, cand)?;
    let h = tape.add(kept, fresh)?;
    Ok(StateNodes::Gru { h })
}

/// One step of whichever cell `p` describes.
pub fn step_graph(
    tape: &mut Tape,
    p: &CellParams<NodeId>,
    decays: &Decays,
    dynamics: &Dynamics,
    state: StateNodes,
    input: NodeId,
) -> Result<StateNodes> {
    match p.kind {
        CellKind::Gru => gru_graph(tape, p, state, input),
        CellKind::CubaLif => cuba_lif_graph(tape, p, decays, dynamics, state, input),
        CellKind::SpikGru => spikgru_graph(tape, p, decays, dynamics, state, input),
        CellKind::Variant => variant_graph(tape, p, decays, dynamics, state, input),
    }
}

/// Self-recurrent, non-spiking readout `out_t = α_out out_{t-1} + W_out x_t + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutParams<T = Tensor> {
    /// Logit of `α_out`, one element.
    pub alpha: T,
    /// `[classes × inputs]`.
    pub w: T,
    pub b: T,
}

impl<T> ReadoutParams<T> {
    pub fn fields(&self) -> Vec<(String, &T)> {
        vec![
            ("out.W".to_string(), &self.w),
            ("out.b".to_string(), &self.b),
            ("decay.alpha".to_string(), &self.alpha),
        ]
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut T)> {
        vec![
            ("out.W".to_string(), &mut self.w),
            ("out.b".to_string(), &mut self.b),
            ("decay.alpha".to_string(), &mut self.alpha),
        ]
    }
}

impl ReadoutParams<Tensor> {
    /// Builds a readout from the decay itself rather than its logit.
    pub fn with_decay(alpha: f64, w: Tensor, b: Tensor) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("readout decay {alpha} outside [0, 1]")));
        }
        Ok(Self {
            alpha: Tensor::scalar(logit(alpha)),
            w,
            b,
        })
    }

    pub fn init(inputs: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            alpha: Tensor::scalar(logit(INITIAL_RETENTION)),
            w: uniform(vec![classes, inputs], (1.0 / inputs as f64).sqrt(), rng),
            b: Tensor::zeros([classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ReadoutParams<NodeId> {
        let mut node = |t: &Tensor| {
            if trainable {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ReadoutParams {
            alpha: node(&self.alpha),
            w: node(&self.w),
            b: node(&self.b),
        }
    }
}

/// One readout step; `alpha` is the already-squashed decay node.
pub fn readout_graph(
    tape: &mut Tape,
    p: &ReadoutParams<NodeId>,
    alpha: NodeId,
    out_prev: NodeId,
    x: NodeId,
) -> Result<NodeId> {
    let n = tape.value(x).len();
    let flat = tape.reshape(x, vec![n])?;
    let carried = tape.mul_scalar(out_prev, alpha)?;
    let fresh = tape.affine(p.w, flat, p.b)?;
    tape.add(carried, fresh)
}

fn value_step(
    params: &CellParams,
    dynamics: &Dynamics,
    state: &CellState,
    input: &Tensor,
) -> Result<(CellState, Tensor)> {
    let shape = params.state_shape.as_slice();
    for t in [&state.i, &state.v, &state.s] {
        if t.shape() != shape {
            return Err(Error::dim("cell state", t.shape(), shape));
        }
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let decays = Decays::new(&mut tape, &p);
    let st = StateNodes::Spiking {
        i: tape.constant(state.i.clone()),
        v: tape.constant(state.v.clone()),
        s: tape.constant(state.s.clone()),
    };
    let x = tape.constant(input.clone());
    let StateNodes::Spiking { i, v, s } = step_graph(&mut tape, &p, &decays, dynamics, st, x)? else {
        unreachable!("spiking cells return spiking states")
    };
    let next = CellState {
        i: tape.value(i).clone(),
        v: tape.value(v).clone(),
        s: tape.value(s).clone(),
    };
    let spikes = next.s.clone();
    Ok((next, spikes))
}

fn expect_kind(params: &CellParams, kind: CellKind) -> Result<()> {
    if params.kind != kind {
        return Err(Error::Config(format!(
            "expected {} parameters, got {}",
            kind.label(),
            params.kind.label()
        )));
    }
    Ok(())
}

/// Single Cuba-LIF step on plain tensors.
pub fn cuba_lif_step(state: &CellState, input: &Tensor, params: &CellParams) -> Result<(CellState, Tensor)> {
    expect_kind(params, CellKind::CubaLif)?;
    value_step(params, &Dynamics::default(), state, input)
}

/// Single SpikGRU step on plain tensors.
pub fn spikgru_step(state: &CellState, input: &Tensor, params: &CellParams) -> Result<(CellState, Tensor)> {
    expect_kind(params, CellKind::SpikGru)?;
    value_step(params, &Dynamics::default(), state, input)
}

/// Single variant step with `mods` overriding the set stored in `params`.
pub fn variant_step(
    state: &CellState,
    input: &Tensor,
    params: &CellParams,
    mods: ModSet,
) -> Result<(CellState, Tensor)> {
    expect_kind(params, CellKind::Variant)?;
    if mods.mod3 && params.state_shape.len() != 3 {
        return Err(Error::Config("mod3 requires a C×H×W state".into()));
    }
    let mut p = params.clone();
    p.mods = mods;
    if layout(CellKind::Variant, mods).reset != p.reset.is_some() {
        return Err(Error::Config(format!(
            "parameters do not match modification set {}",
            mods.label()
        )));
    }
    value_step(&p, &Dynamics::default(), state, input)
}

/// Single GRU step on plain tensors.
pub fn gru_step(h_prev: &Tensor, x: &Tensor, params: &CellParams) -> Result<Tensor> {
    expect_kind(params, CellKind::Gru)?;
    if h_prev.len() != numel(&params.state_shape) {
        return Err(Error::dim("gru state", h_prev.shape(), &params.state_shape));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let h = tape.constant(h_prev.flatten());
    let x = tape.constant(x.clone());
    let out = gru_graph(&mut tape, &p, StateNodes::Gru { h }, x)?;
    Ok(tape.value(out.output()).clone())
}

/// Single readout step on plain tensors.
pub fn readout_step(out_prev: &Tensor, x: &Tensor, params: &ReadoutParams) -> Result<Tensor> {
    if out_prev.shape() != params.b.shape() {
        return Err(Error::dim("readout state", out_prev.shape(), params.b.shape()));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let alpha = tape.sigmoid(p.alpha);
    let prev = tape.constant(out_prev.clone());
    let x = tape.constant(x.clone());
    let out = readout_graph(&mut tape, &p, alpha, prev, x)?;
    Ok(tape.value(out).clone())
}
