//! Wengert tape for reverse-mode differentiation.
//!
//! Every forward operation computes its value eagerly and records itself on
//! the tape; `backward` replays the record in reverse, accumulating
//! vector-Jacobian products into per-node gradient slots. One tape serves one
//! forward+backward pass and is then dropped.

use crate::diffnum::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation output.
    fn deriv_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = act(x Wᵀ + b); x is [in] or [n, in], w is [out, in], b is [out].
    Affine { x: Var, w: Var, b: Var, act: Activation },
    Activation { x: Var, act: Activation },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddN { parts: Vec<Var> },
    /// Vectors concatenate end-to-end; equal-row matrices concatenate columns.
    Concat { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    /// out = mean + exp(0.5·log_var) ⊙ noise; noise is a constant.
    ReparamSample { mean: Var, log_var: Var, noise: Vec<f64> },
    /// Scalar sum of elementwise diagonal-Gaussian log densities of x.
    GaussianLogProb { x: Var, mean: Var, log_var: Var },
    /// Scalar KL(q ‖ p) for diagonal Gaussians.
    GaussianKl { mq: Var, lq: Var, mp: Var, lp: Var },
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { values, shape, op, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Var {
        self.push(values, shape, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], vec![], Op::Leaf)
    }

    pub fn leaf_vector(&mut self, values: &[f64]) -> Var {
        self.push(values.to_vec(), vec![values.len()], Op::Leaf)
    }

    /// Registers a parameter snapshot as a leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => (s[0], s[1]),
            1 => (1, s[0]),
            _ => (1, 1),
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn affine(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let (n, xin) = self.rows_cols(x);
        let (wout, win) = self.rows_cols(w);
        let (_, blen) = self.rows_cols(b);
        if win != xin || blen != wout {
            return Err(Error::dimension(
                "affine",
                format!(
                    "x {:?} · W {:?} + b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let mut out = vec![0.0; n * wout];
        {
            let xv = &self.nodes[x.0].values;
            let wv = &self.nodes[w.0].values;
            let bv = &self.nodes[b.0].values;
            for r in 0..n {
                for o in 0..wout {
                    let mut acc = bv[o];
                    let wrow = &wv[o * win..(o + 1) * win];
                    let xrow = &xv[r * xin..(r + 1) * xin];
                    for i in 0..win {
                        acc += wrow[i] * xrow[i];
                    }
                    out[r * wout + o] = act.apply(acc);
                }
            }
        }
        let shape = if self.nodes[x.0].shape.len() == 2 { vec![n, wout] } else { vec![wout] };
        Ok(self.push(out, shape, Op::Affine { x, w, b, act }))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| act.apply(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::Activation { x, act })
    }

    fn binary_same_shape(&mut self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dimension(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::Scale { x, c })
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("add_n of nothing".into()))?;
        for p in parts {
            self.binary_same_shape("add_n", first, *p)?;
        }
        let mut out = vec![0.0; self.nodes[first.0].values.len()];
        for p in parts {
            for (o, v) in out.iter_mut().zip(&self.nodes[p.0].values) {
                *o += v;
            }
        }
        let shape = self.nodes[first.0].shape.clone();
        Ok(self.push(out, shape, Op::AddN { parts: parts.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        let all_vectors = parts.iter().all(|p| self.nodes[p.0].shape.len() <= 1);
        if all_vectors {
            let mut out = Vec::new();
            for p in parts {
                out.extend_from_slice(&self.nodes[p.0].values);
            }
            let len = out.len();
            return Ok(self.push(out, vec![len], Op::Concat { parts: parts.to_vec() }));
        }
        // column-wise concat of equal-row matrices
        let n = self.rows_cols(parts[0]).0;
        let mut total_cols = 0;
        for p in parts {
            let (r, c) = self.rows_cols(*p);
            if r != n {
                return Err(Error::dimension(
                    "concat",
                    format!("row counts differ: {} vs {}", n, r),
                ));
            }
            total_cols += c;
        }
        let mut out = vec![0.0; n * total_cols];
        let mut col0 = 0;
        for p in parts {
            let (_, c) = self.rows_cols(*p);
            let pv = &self.nodes[p.0].values;
            for r in 0..n {
                out[r * total_cols + col0..r * total_cols + col0 + c]
                    .copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            col0 += c;
        }
        Ok(self.push(out, vec![n, total_cols], Op::Concat { parts: parts.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].values.iter().sum();
        self.push(vec![s], vec![], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].values.len().max(1);
        let s: f64 = self.nodes[x.0].values.iter().sum::<f64>() / n as f64;
        self.push(vec![s], vec![], Op::Mean { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::Clamp { x, lo, hi })
    }

    /// mean + exp(0.5·log_var) ⊙ noise. Gradients flow to mean and log_var
    /// but not to the (constant) noise.
    pub fn reparam_sample(&mut self, mean: Var, log_var: Var, noise: &[f64]) -> Result<Var> {
        self.binary_same_shape("reparam_sample", mean, log_var)?;
        if noise.len() != self.nodes[mean.0].values.len() {
            return Err(Error::dimension(
                "reparam_sample",
                format!("noise length {} vs mean length {}", noise.len(), self.nodes[mean.0].values.len()),
            ));
        }
        let out: Vec<f64> = self.nodes[mean.0]
            .values
            .iter()
            .zip(&self.nodes[log_var.0].values)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let shape = self.nodes[mean.0].shape.clone();
        Ok(self.push(out, shape, Op::ReparamSample { mean, log_var, noise: noise.to_vec() }))
    }

    /// Σ_i [ −½ln(2π) − ½·lv_i − ½·(x_i−μ_i)²·e^(−lv_i) ].
    pub fn gaussian_log_prob(&mut self, x: Var, mean: Var, log_var: Var) -> Result<Var> {
        self.binary_same_shape("gaussian_log_prob", mean, log_var)?;
        self.binary_same_shape("gaussian_log_prob", x, mean)?;
        if self.nodes[log_var.0].values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { step: 0, detail: "non-finite log_var".into() });
        }
        let mut acc = 0.0;
        for ((xv, m), lv) in self.nodes[x.0]
            .values
            .iter()
            .zip(&self.nodes[mean.0].values)
            .zip(&self.nodes[log_var.0].values)
        {
            let d = xv - m;
            acc += -0.5 * LN_2PI - 0.5 * lv - 0.5 * d * d * (-lv).exp();
        }
        Ok(self.push(vec![acc], vec![], Op::GaussianLogProb { x, mean, log_var }))
    }

    /// Closed-form KL(q ‖ p) between diagonal Gaussians.
    pub fn gaussian_kl(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
        self.binary_same_shape("gaussian_kl", mq, lq)?;
        self.binary_same_shape("gaussian_kl", mp, lp)?;
        self.binary_same_shape("gaussian_kl", mq, mp)?;
        let mut acc = 0.0;
        for i in 0..self.nodes[mq.0].values.len() {
            let (mq_i, lq_i) = (self.nodes[mq.0].values[i], self.nodes[lq.0].values[i]);
            let (mp_i, lp_i) = (self.nodes[mp.0].values[i], self.nodes[lp.0].values[i]);
            let dm = mq_i - mp_i;
            acc += 0.5 * ((lq_i - lp_i).exp() + dm * dm * (-lp_i).exp() - 1.0 + lp_i - lq_i);
        }
        Ok(self.push(vec![acc], vec![], Op::GaussianKl { mq, lq, mp, lp }))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        match &mut self.nodes[v.0].grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => self.nodes[v.0].grad = Some(g),
        }
    }

    /// Reverse pass from a scalar loss. Seeds d(loss)/d(loss) = 1 and visits
    /// recorded operations in strict reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Contract("backward requires a scalar loss".into()));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(d_out) = self.nodes[idx].grad.clone() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Affine { x, w, b, act } => {
                    let (n, xin) = self.rows_cols(x);
                    let (wout, win) = self.rows_cols(w);
                    let yv = &self.nodes[idx].values;
                    // fold activation derivative into the upstream gradient
                    let g: Vec<f64> =
                        d_out.iter().zip(yv).map(|(d, y)| d * act.deriv_from_output(*y)).collect();
                    let xv = self.nodes[x.0].values.clone();
                    let wv = self.nodes[w.0].values.clone();
                    let mut dx = vec![0.0; n * xin];
                    let mut dw = vec![0.0; wout * win];
                    let mut db = vec![0.0; wout];
                    for r in 0..n {
                        for o in 0..wout {
                            let go = g[r * wout + o];
                            if go == 0.0 {
                                continue;
                            }
                            db[o] += go;
                            for i in 0..win {
                                dx[r * xin + i] += go * wv[o * win + i];
                                dw[o * win + i] += go * xv[r * xin + i];
                            }
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(w, dw);
                    self.accumulate(b, db);
                }
                Op::Activation { x, act } => {
                    let yv = &self.nodes[idx].values;
                    let g: Vec<f64> =
                        d_out.iter().zip(yv).map(|(d, y)| d * act.deriv_from_output(*y)).collect();
                    self.accumulate(x, g);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, d_out.clone());
                    self.accumulate(b, d_out);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, d_out.clone());
                    self.accumulate(b, d_out.iter().map(|d| -d).collect());
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> =
                        d_out.iter().zip(&self.nodes[b.0].values).map(|(d, v)| d * v).collect();
                    let db: Vec<f64> =
                        d_out.iter().zip(&self.nodes[a.0].values).map(|(d, v)| d * v).collect();
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale { x, c } => {
                    self.accumulate(x, d_out.iter().map(|d| d * c).collect());
                }
                Op::AddN { parts } => {
                    for p in parts {
                        self.accumulate(p, d_out.clone());
                    }
                }
                Op::Concat { parts } => {
                    let all_vectors = parts.iter().all(|p| self.nodes[p.0].shape.len() <= 1);
                    if all_vectors {
                        let mut off = 0;
                        for p in parts {
                            let len = self.nodes[p.0].values.len();
                            self.accumulate(p, d_out[off..off + len].to_vec());
                            off += len;
                        }
                    } else {
                        let total_cols = self.rows_cols(Var(idx)).1;
                        let n = self.rows_cols(Var(idx)).0;
                        let mut col0 = 0;
                        for p in parts {
                            let (_, c) = self.rows_cols(p);
                            let mut dp = vec![0.0; n * c];
                            for r in 0..n {
                                dp[r * c..(r + 1) * c].copy_from_slice(
                                    &d_out[r * total_cols + col0..r * total_cols + col0 + c],
                                );
                            }
                            self.accumulate(p, dp);
                            col0 += c;
                        }
                    }
                }
                Op::Sum { x } => {
                    let n = self.nodes[x.0].values.len();
                    self.accumulate(x, vec![d_out[0]; n]);
                }
                Op::Mean { x } => {
                    let n = self.nodes[x.0].values.len().max(1);
                    self.accumulate(x, vec![d_out[0] / n as f64; n]);
                }
                Op::Clamp { x, lo, hi } => {
                    let g: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[x.0].values)
                        .map(|(d, v)| if *v > lo && *v < hi { *d } else { 0.0 })
                        .collect();
                    self.accumulate(x, g);
                }
                Op::ReparamSample { mean, log_var, noise } => {
                    let dlv: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[log_var.0].values)
                        .zip(&noise)
                        .map(|((d, lv), e)| d * 0.5 * (0.5 * lv).exp() * e)
                        .collect();
                    self.accumulate(mean, d_out.clone());
                    self.accumulate(log_var, dlv);
                }
                Op::GaussianLogProb { x, mean, log_var } => {
                    let d = d_out[0];
                    let n = self.nodes[x.0].values.len();
                    let mut dx = vec![0.0; n];
                    let mut dm = vec![0.0; n];
                    let mut dlv = vec![0.0; n];
                    for i in 0..n {
                        let diff = self.nodes[x.0].values[i] - self.nodes[mean.0].values[i];
                        let inv_var = (-self.nodes[log_var.0].values[i]).exp();
                        dx[i] = d * (-diff * inv_var);
                        dm[i] = d * (diff * inv_var);
                        dlv[i] = d * (-0.5 + 0.5 * diff * diff * inv_var);
                    }
                    self.accumulate(x, dx);
                    self.accumulate(mean, dm);
                    self.accumulate(log_var, dlv);
                }
                Op::GaussianKl { mq, lq, mp, lp } => {
                    let d = d_out[0];
                    let n = self.nodes[mq.0].values.len();
                    let mut dmq = vec![0.0; n];
                    let mut dlq = vec![0.0; n];
                    let mut dmp = vec![0.0; n];
                    let mut dlp = vec![0.0; n];
                    for i in 0..n {
                        let dm = self.nodes[mq.0].values[i] - self.nodes[mp.0].values[i];
                        let r = (self.nodes[lq.0].values[i] - self.nodes[lp.0].values[i]).exp();
                        let inv_vp = (-self.nodes[lp.0].values[i]).exp();
                        dmq[i] = d * dm * inv_vp;
                        dmp[i] = d * (-dm * inv_vp);
                        dlq[i] = d * 0.5 * (r - 1.0);
                        dlp[i] = d * 0.5 * (1.0 - r - dm * dm * inv_vp);
                    }
                    self.accumulate(mq, dmq);
                    self.accumulate(lq, dlq);
                    self.accumulate(mp, dmp);
                    self.accumulate(lp, dlp);
                }
            }
        }
        Ok(())
    }
}

pub const LN_2PI: f64 = 1.8378770664093453;
