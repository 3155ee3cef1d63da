//! Feedforward layers, diagonal-Gaussian heads and gated recurrent cells.
//!
//! Every block carries its parameters as named [`Tensor`]s and offers two
//! forward paths: a tape-free `eval` for rollouts/inference and a recorded
//! `forward` for training. Parameters are addressed by stable dotted names
//! (`prefix.l0.w`, ...) shared between tape registration, gradient harvest,
//! the optimizer and checkpoints.

use std::collections::BTreeMap;

use rand::Rng;

use crate::diffnum::tape::{Activation, Tape, Var};
use crate::diffnum::tensor::Tensor;
use crate::error::{Error, Result};

/// Log-variance heads are clamped to this range to keep exp() well-behaved.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// One affine layer with a fused activation.
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
    pub act: Activation,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, act: Activation, rng: &mut impl Rng) -> Self {
        Layer {
            w: Tensor::init_uniform(vec![out_dim, in_dim], in_dim, rng),
            b: Tensor::init_uniform(vec![out_dim], in_dim, rng),
            act,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        debug_assert_eq!(x.len(), in_dim);
        let wv = self.w.values();
        let bv = self.b.values();
        let mut out = Vec::with_capacity(out_dim);
        for o in 0..out_dim {
            let mut acc = bv[o];
            let row = &wv[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                acc += row[i] * x[i];
            }
            out.push(self.act.apply(acc));
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, reg: &mut ParamReg, name: &str, x: Var) -> Result<Var> {
        let w = reg.var(tape, &format!("{name}.w"), &self.w);
        let b = reg.var(tape, &format!("{name}.b"), &self.b);
        tape.affine(x, w, b, self.act)
    }

    fn params_mut(&mut self, name: &str) -> Vec<(String, &mut Tensor)> {
        vec![(format!("{name}.w"), &mut self.w), (format!("{name}.b"), &mut self.b)]
    }

    fn params(&self, name: &str) -> Vec<(String, &Tensor)> {
        vec![(format!("{name}.w"), &self.w), (format!("{name}.b"), &self.b)]
    }
}

/// Plain feedforward stack.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// `dims` = [in, h1, ..., out]; hidden layers use `hidden_act`, the last
    /// layer uses `out_act`.
    pub fn new(dims: &[usize], hidden_act: Activation, out_act: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "Mlp needs at least input and output dims");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let act = if i + 2 == dims.len() { out_act } else { hidden_act };
            layers.push(Layer::new(dims[i], dims[i + 1], act, rng));
        }
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim()).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim()));
        d
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &self.layers {
            cur = l.eval(&cur);
        }
        cur
    }

    pub fn forward(&self, tape: &mut Tape, reg: &mut ParamReg, name: &str, x: Var) -> Result<Var> {
        let mut cur = x;
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.forward(tape, reg, &format!("{name}.l{i}"), cur)?;
        }
        Ok(cur)
    }

    pub fn params_mut(&mut self, name: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.extend(l.params_mut(&format!("{name}.l{i}")));
        }
        v
    }

    pub fn params(&self, name: &str) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(l.params(&format!("{name}.l{i}")));
        }
        v
    }
}

/// Feedforward head emitting diagonal-Gaussian parameters: a tanh trunk plus
/// linear mean and clamped linear log-variance layers.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub trunk: Mlp,
    pub mean: Layer,
    pub log_var: Layer,
}

impl GaussianHead {
    pub fn new(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut trunk_dims = vec![in_dim];
        trunk_dims.extend_from_slice(hidden);
        let trunk = if hidden.is_empty() {
            Mlp { layers: Vec::new() }
        } else {
            Mlp::new(&trunk_dims, Activation::Tanh, Activation::Tanh, rng)
        };
        let feat = *trunk_dims.last().unwrap();
        GaussianHead {
            trunk,
            mean: Layer::new(feat, out_dim, Activation::Linear, rng),
            log_var: Layer::new(feat, out_dim, Activation::Linear, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mean.out_dim()
    }

    pub fn eval(&self, x: &[f64]) -> crate::diffnum::gaussian::GaussianDiag {
        let feat = if self.trunk.layers.is_empty() { x.to_vec() } else { self.trunk.eval(x) };
        let mean = self.mean.eval(&feat);
        let log_var: Vec<f64> = self
            .log_var
            .eval(&feat)
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1))
            .collect();
        crate::diffnum::gaussian::GaussianDiag { mean, log_var }
    }

    /// Returns (mean, clamped log_var) tape vars.
    pub fn forward(
        &self,
        tape: &mut Tape,
        reg: &mut ParamReg,
        name: &str,
        x: Var,
    ) -> Result<(Var, Var)> {
        let feat = if self.trunk.layers.is_empty() {
            x
        } else {
            self.trunk.forward(tape, reg, &format!("{name}.trunk"), x)?
        };
        let mean = self.mean.forward(tape, reg, &format!("{name}.mean"), feat)?;
        let lv_raw = self.log_var.forward(tape, reg, &format!("{name}.log_var"), feat)?;
        let lv = tape.clamp(lv_raw, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
        Ok((mean, lv))
    }

    pub fn params_mut(&mut self, name: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = self.trunk.params_mut(&format!("{name}.trunk"));
        v.extend(self.mean.params_mut(&format!("{name}.mean")));
        v.extend(self.log_var.params_mut(&format!("{name}.log_var")));
        v
    }

    pub fn params(&self, name: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.trunk.params(&format!("{name}.trunk"));
        v.extend(self.mean.params(&format!("{name}.mean")));
        v.extend(self.log_var.params(&format!("{name}.log_var")));
        v
    }
}

/// Recurrent cell family. `Mgu` is the single-gate default; `Gru` adds a
/// reset gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CellKind {
    Mgu,
    Gru,
}

impl CellKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellKind::Mgu => "mgu",
            CellKind::Gru => "gru",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mgu" => Ok(CellKind::Mgu),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Domain(format!("unknown cell kind '{other}'"))),
        }
    }
}

/// Gated recurrent cell over concatenated `[h_prev, inputs...]`.
///
/// MGU:  f = σ(Wf·[h,x]); c = tanh(Wc·[f⊙h, x]); h' = h + f⊙(c − h)
/// GRU:  r = σ(Wr·[h,x]); u = σ(Wu·[h,x]); c = tanh(Wc·[r⊙h, x]); h' = h + u⊙(c − h)
#[derive(Debug, Clone)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub hidden_dim: usize,
    pub input_dim: usize,
    gate_f: Layer,
    gate_u: Option<Layer>,
    cand: Layer,
}

impl RecurrentCell {
    pub fn new(kind: CellKind, input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let joint = hidden_dim + input_dim;
        RecurrentCell {
            kind,
            hidden_dim,
            input_dim,
            gate_f: Layer::new(joint, hidden_dim, Activation::Sigmoid, rng),
            gate_u: match kind {
                CellKind::Mgu => None,
                CellKind::Gru => Some(Layer::new(joint, hidden_dim, Activation::Sigmoid, rng)),
            },
            cand: Layer::new(joint, hidden_dim, Activation::Tanh, rng),
        }
    }

    pub fn zero_state(&self) -> Vec<f64> {
        vec![0.0; self.hidden_dim]
    }

    fn check_widths(&self, h_len: usize, in_len: usize) -> Result<()> {
        if h_len != self.hidden_dim || in_len != self.input_dim {
            return Err(Error::dimension(
                "recurrent_step",
                format!(
                    "h_prev length {} (expected {}), inputs length {} (expected {})",
                    h_len, self.hidden_dim, in_len, self.input_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn eval(&self, h_prev: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
        self.check_widths(h_prev.len(), inputs.len())?;
        let mut joint = Vec::with_capacity(h_prev.len() + inputs.len());
        joint.extend_from_slice(h_prev);
        joint.extend_from_slice(inputs);
        let (gate, f) = match (&self.gate_u, self.kind) {
            (Some(u_layer), CellKind::Gru) => (u_layer.eval(&joint), self.gate_f.eval(&joint)),
            _ => {
                let f = self.gate_f.eval(&joint);
                (f.clone(), f)
            }
        };
        // candidate sees the gated history
        let mut cand_in = Vec::with_capacity(joint.len());
        cand_in.extend(h_prev.iter().zip(&f).map(|(h, fi)| h * fi));
        cand_in.extend_from_slice(inputs);
        let c = self.cand.eval(&cand_in);
        Ok(h_prev
            .iter()
            .zip(&gate)
            .zip(&c)
            .map(|((h, g), ci)| h + g * (ci - h))
            .collect())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        reg: &mut ParamReg,
        name: &str,
        h_prev: Var,
        inputs: &[Var],
    ) -> Result<Var> {
        let in_len: usize = inputs.iter().map(|v| tape.value(*v).len()).sum();
        self.check_widths(tape.value(h_prev).len(), in_len)?;
        let mut parts = vec![h_prev];
        parts.extend_from_slice(inputs);
        let joint = tape.concat(&parts)?;
        let f = self.gate_f.forward(tape, reg, &format!("{name}.g0"), joint)?;
        let gate = match &self.gate_u {
            Some(u_layer) => u_layer.forward(tape, reg, &format!("{name}.g1"), joint)?,
            None => f,
        };
        let gated_h = tape.mul(f, h_prev)?;
        let mut cand_parts = vec![gated_h];
        cand_parts.extend_from_slice(inputs);
        let cand_in = tape.concat(&cand_parts)?;
        let c = self.cand.forward(tape, reg, &format!("{name}.cand"), cand_in)?;
        // h' = h + gate ⊙ (c − h)
        let diff = tape.sub(c, h_prev)?;
        let delta = tape.mul(gate, diff)?;
        tape.add(h_prev, delta)
    }

    pub fn params_mut(&mut self, name: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = self.gate_f.params_mut(&format!("{name}.g0"));
        if let Some(u) = &mut self.gate_u {
            v.extend(u.params_mut(&format!("{name}.g1")));
        }
        v.extend(self.cand.params_mut(&format!("{name}.cand")));
        v
    }

    pub fn params(&self, name: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.gate_f.params(&format!("{name}.g0"));
        if let Some(u) = &self.gate_u {
            v.extend(u.params(&format!("{name}.g1")));
        }
        v.extend(self.cand.params(&format!("{name}.cand")));
        v
    }
}

/// Per-pass registry binding parameter names to tape leaves. A parameter used
/// several times in one pass (recurrent weights) is registered once, so its
/// gradient accumulates across uses.
#[derive(Default)]
pub struct ParamReg {
    vars: BTreeMap<String, Var>,
}

impl ParamReg {
    pub fn new() -> Self {
        ParamReg { vars: BTreeMap::new() }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str, t: &Tensor) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = tape.param(t);
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// After `tape.backward`, copies each registered parameter's gradient into
    /// the tensor's accumulator (zeros when no gradient flowed to it).
    pub fn harvest(&self, tape: &Tape, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        for (name, t) in params.iter_mut() {
            let Some(var) = self.get(name) else {
                // not part of this pass
                continue;
            };
            match tape.grad(var) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }
}
