use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, Ordering};

use super::ops::{self, GruWeights};
use super::{Array, Gradients, KernelError, ParamStore};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        normalized: Vec<f32>,
        inv_std: f32,
        bias: Var,
    },
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Dot(Var, Var),
    ScalarMul(Var, Var),
    LogSoftmaxAt(Var, usize),
    LogSigmoid(Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Records forward operations so gradients can be propagated back through
/// them in reverse order.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// GRU weights bound to tape variables.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_update: Var,
    pub u_update: Var,
    pub b_update: Var,
    pub w_reset: Var,
    pub u_reset: Var,
    pub b_reset: Var,
    pub w_candidate: Var,
    pub u_candidate: Var,
    pub b_candidate: Var,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index }
    }

    fn node(&self, v: Var) -> Result<&Node, KernelError> {
        if v.tape != self.id {
            return Err(KernelError::Graph(format!(
                "variable belongs to tape {}, not tape {}",
                v.tape, self.id
            )));
        }
        self.nodes
            .get(v.index as usize)
            .ok_or_else(|| KernelError::Graph(format!("variable {} is not on the tape", v.index)))
    }

    pub fn value(&self, v: Var) -> Result<&Array, KernelError> {
        Ok(&self.node(v)?.value)
    }

    /// Convenience for single-element variables.
    pub fn scalar(&self, v: Var) -> Result<f32, KernelError> {
        let a = self.value(v)?;
        if a.len() != 1 {
            return Err(KernelError::Shape(format!("expected a scalar, got shape {:?}", a.shape())));
        }
        Ok(a.item())
    }

    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Input)
    }

    /// Binds a named parameter; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, KernelError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| KernelError::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn gru_params(&mut self, store: &ParamStore, prefix: &str) -> Result<GruVars, KernelError> {
        let mut p = |suffix: &str| self.param(store, &format!("{prefix}.{suffix}"));
        Ok(GruVars {
            w_update: p("w_update")?,
            u_update: p("u_update")?,
            b_update: p("b_update")?,
            w_reset: p("w_reset")?,
            u_reset: p("u_reset")?,
            b_reset: p("b_reset")?,
            w_candidate: p("w_candidate")?,
            u_candidate: p("u_candidate")?,
            b_candidate: p("b_candidate")?,
        })
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, KernelError> {
        let value = ops::matvec(self.value(w)?, self.value(x)?)?;
        Ok(self.push(value, Op::MatVec(w, x)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, KernelError> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let value = ops::add(self.value(a)?, self.value(b)?)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let value = ops::sub(self.value(a)?, self.value(b)?)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let value = ops::mul(self.value(a)?, self.value(b)?)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var, KernelError> {
        let value = ops::scale(self.value(a)?, factor);
        Ok(self.push(value, Op::Scale(a, factor)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, KernelError> {
        let value = ops::sigmoid_vec(self.value(a)?);
        Ok(self.push(value, Op::Sigmoid(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, KernelError> {
        let value = ops::tanh_vec(self.value(a)?);
        Ok(self.push(value, Op::Tanh(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, KernelError> {
        let value = ops::layer_norm(self.value(x)?, self.value(gain)?, self.value(bias)?)?;
        let (normalized, inv_std) = ops::normalize(self.value(x)?)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                normalized,
                inv_std,
                bias,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let arrays = parts
            .iter()
            .map(|&p| self.value(p))
            .collect::<Result<Vec<_>, _>>()?;
        let value = ops::concat(&arrays);
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var, KernelError> {
        if rows.is_empty() {
            return Err(KernelError::Shape("stack of zero rows".into()));
        }
        let width = self.value(rows[0])?.expect_vector("stack row")?;
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let a = self.value(r)?;
            if a.expect_vector("stack row")? != width {
                return Err(KernelError::Shape("stack rows differ in length".into()));
            }
            data.extend_from_slice(a.data());
        }
        let value = Array::matrix(rows.len(), width, data)?;
        Ok(self.push(value, Op::Stack(rows.to_vec())))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let value = Array::scalar(ops::dot(self.value(a)?, self.value(b)?)?);
        Ok(self.push(value, Op::Dot(a, b)))
    }

    /// `s · v` for a single-element `s`.
    pub fn scalar_mul(&mut self, s: Var, v: Var) -> Result<Var, KernelError> {
        let factor = self.scalar(s)?;
        let value = ops::scale(self.value(v)?, factor);
        Ok(self.push(value, Op::ScalarMul(s, v)))
    }

    pub fn log_softmax_at(&mut self, scores: Var, index: usize) -> Result<Var, KernelError> {
        let s = self.value(scores)?;
        if index >= s.len() {
            return Err(KernelError::Shape(format!(
                "log_softmax index {index} out of range for {} scores",
                s.len()
            )));
        }
        let value = Array::scalar(ops::log_softmax_at(s, index));
        Ok(self.push(value, Op::LogSoftmaxAt(scores, index)))
    }

    pub fn log_sigmoid(&mut self, s: Var) -> Result<Var, KernelError> {
        let value = Array::scalar(ops::log_sigmoid(self.scalar(s)?));
        Ok(self.push(value, Op::LogSigmoid(s)))
    }

    /// Sum of single-element variables; the empty sum is 0.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var, KernelError> {
        let mut total = 0.0f32;
        for &t in terms {
            total += self.scalar(t)?;
        }
        Ok(self.push(Array::scalar(total), Op::Sum(terms.to_vec())))
    }

    /// GRU step composed from primitive ops, in the same order as
    /// [`ops::gru_cell`].
    pub fn gru_cell(&mut self, x: Var, h: Var, w: &GruVars) -> Result<Var, KernelError> {
        let a = self.linear(x, w.w_update, w.b_update)?;
        let b = self.matvec(w.u_update, h)?;
        let z = self.add(a, b)?;
        let u = self.sigmoid(z)?;
        let a = self.linear(x, w.w_reset, w.b_reset)?;
        let b = self.matvec(w.u_reset, h)?;
        let z = self.add(a, b)?;
        let r = self.sigmoid(z)?;
        let rh = self.mul(r, h)?;
        let a = self.linear(x, w.w_candidate, w.b_candidate)?;
        let b = self.matvec(w.u_candidate, rh)?;
        let z = self.add(a, b)?;
        let c = self.tanh(z)?;
        let diff = self.sub(c, h)?;
        let step = self.mul(u, diff)?;
        self.add(h, step)
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns the gradient of
    /// every parameter bound to this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, KernelError> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(KernelError::Graph("backward needs a scalar loss".into()));
        }
        let end = loss.index as usize;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; end + 1];
        grads[end] = Some(vec![1.0]);

        for i in (0..=end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::MatVec(w, x) => {
                    let wv = &self.nodes[w.index as usize].value;
                    let xv = &self.nodes[x.index as usize].value;
                    let cols = wv.cols();
                    let mut gw = vec![0.0f32; wv.len()];
                    let mut gx = vec![0.0f32; cols];
                    for (r, &gr) in g.iter().enumerate() {
                        let row = wv.row(r);
                        let gw_row = &mut gw[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gw_row[c] = gr * xv.data()[c];
                            gx[c] += row[c] * gr;
                        }
                    }
                    accumulate(&mut grads, *w, &gw);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.index as usize].value.data();
                    let bv = self.nodes[b.index as usize].value.data();
                    let ga: Vec<f32> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f32> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, f) => {
                    let ga: Vec<f32> = g.iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga: Vec<f32> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga: Vec<f32> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    normalized,
                    inv_std,
                    bias,
                } => {
                    let gv = self.nodes[gain.index as usize].value.data();
                    let d = normalized.len() as f32;
                    let ggain: Vec<f32> = g.iter().zip(normalized).map(|(g, n)| g * n).collect();
                    let gh: Vec<f32> = g.iter().zip(gv).map(|(g, w)| g * w).collect();
                    let mean_gh = gh.iter().sum::<f32>() / d;
                    let mean_ghn = gh.iter().zip(normalized).map(|(a, n)| a * n).sum::<f32>() / d;
                    let gx: Vec<f32> = gh
                        .iter()
                        .zip(normalized)
                        .map(|(a, n)| inv_std * (a - mean_gh - n * mean_ghn))
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *gain, &ggain);
                    accumulate(&mut grads, *bias, &g);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.index as usize].value.len();
                        accumulate(&mut grads, *p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Stack(rows) => {
                    let width = node.value.cols();
                    for (r, p) in rows.iter().enumerate() {
                        accumulate(&mut grads, *p, &g[r * width..(r + 1) * width]);
                    }
                }
                Op::Dot(a, b) => {
                    let av = self.nodes[a.index as usize].value.data();
                    let bv = self.nodes[b.index as usize].value.data();
                    let ga: Vec<f32> = bv.iter().map(|b| g[0] * b).collect();
                    let gb: Vec<f32> = av.iter().map(|a| g[0] * a).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::ScalarMul(s, v) => {
                    let sv = self.nodes[s.index as usize].value.item();
                    let vv = self.nodes[v.index as usize].value.data();
                    let gs = g.iter().zip(vv).map(|(g, v)| g * v).sum::<f32>();
                    let gv: Vec<f32> = g.iter().map(|g| g * sv).collect();
                    accumulate(&mut grads, *s, &[gs]);
                    accumulate(&mut grads, *v, &gv);
                }
                Op::LogSoftmaxAt(scores, index) => {
                    let probs = ops::softmax(&self.nodes[scores.index as usize].value);
                    let gs: Vec<f32> = probs
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, p)| g[0] * (if k == *index { 1.0 } else { 0.0 } - p))
                        .collect();
                    accumulate(&mut grads, *scores, &gs);
                }
                Op::LogSigmoid(s) => {
                    let sv = self.nodes[s.index as usize].value.item();
                    accumulate(&mut grads, *s, &[g[0] * ops::sigmoid_f32(-sv)]);
                }
                Op::Sum(terms) => {
                    for t in terms {
                        accumulate(&mut grads, *t, &g);
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let i = v.index as usize;
            let shape = self.nodes[i].value.shape().to_vec();
            let data = match grads.get_mut(i).and_then(Option::take) {
                Some(g) => g,
                None => vec![0.0; self.nodes[i].value.len()],
            };
            out.insert(name.clone(), Array::new(shape, data)?);
        }
        Ok(Gradients::from_map(out))
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    let slot = &mut grads[v.index as usize];
    match slot {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

impl GruVars {
    /// Reads the bound values back as plain weights.
    pub fn weights(&self, tape: &Tape) -> Result<GruWeights, KernelError> {
        let v = |x: Var| tape.value(x).cloned();
        Ok(GruWeights {
            w_update: v(self.w_update)?,
            u_update: v(self.u_update)?,
            b_update: v(self.b_update)?,
            w_reset: v(self.w_reset)?,
            u_reset: v(self.u_reset)?,
            b_reset: v(self.b_reset)?,
            w_candidate: v(self.w_candidate)?,
            u_candidate: v(self.u_candidate)?,
            b_candidate: v(self.b_candidate)?,
        })
    }
}
