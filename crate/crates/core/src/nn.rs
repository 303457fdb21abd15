//! Parameter storage and the layers shared by both networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{concat, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub(crate) const ATTN_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every value with the same-named tensor from `other`; names and shapes must agree.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, value) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name:?}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter {name:?}: shape {:?}, expected {:?}",
                    value.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }

    /// Leaves for every parameter on `g`; trainable leaves receive gradients.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    /// Normal draws truncated at two standard deviations, by resampling.
    pub fn add_trunc_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }
}

/// Parameters of one [`ParamStore`] as graph leaves.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Wraps explicit leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    /// Gradients after `backward`, zero-filled where no gradient arrived.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// N(0, 0.02²) truncated at 2σ.
    Attention,
    /// N(0, 1/fan_in).
    FanIn,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        let w = match init {
            Init::Attention => store.add_trunc_normal(&format!("{name}.w"), &[fan_in, fan_out], ATTN_INIT_STD, rng),
            Init::FanIn => store.add_normal(&format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
        };
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(p.var(self.w))?.add(p.var(self.b))
    }
}

/// Affine layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(LN_EPS).mul(p.var(self.gamma))?.add(p.var(self.beta))
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], init: Init, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, mut x: Var<'g>) -> Result<Var<'g>> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.gelu();
            }
            x = layer.forward(p, x)?;
        }
        Ok(x)
    }
}

/// Pre-norm multihead attention block:
/// `A = X + MHA(LN(X), LN(Y), LN(Y))`, output `A + FFN(LN'(A))`.
#[derive(Clone, Debug)]
pub struct Mab {
    pub ln_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
    pub heads: usize,
    pub dim: usize,
}

impl Mab {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_mult: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        let lin = |store: &mut ParamStore, n: &str, rng: &mut _| {
            Linear::new(store, &format!("{name}.{n}"), dim, dim, Init::Attention, rng)
        };
        let ln_attn = LayerNorm::new(store, &format!("{name}.ln_attn"), dim);
        let q = lin(store, "q", rng);
        let k = lin(store, "k", rng);
        let v = lin(store, "v", rng);
        let o = lin(store, "o", rng);
        let ln_ffn = LayerNorm::new(store, &format!("{name}.ln_ffn"), dim);
        let ffn = Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn_mult * dim, dim], Init::Attention, rng);
        Mab {
            ln_attn,
            q,
            k,
            v,
            o,
            ln_ffn,
            ffn,
            heads,
            dim,
        }
    }

    /// `x: [.., M, d]` attends to `y: [.., P, d]`; leading axes must agree.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
        let xs = x.shape();
        let ys = y.shape();
        if xs.len() < 2 || xs.len() != ys.len() || xs[..xs.len() - 2] != ys[..ys.len() - 2] {
            return Err(Error::Shape(format!("mab: query {xs:?} vs key/value {ys:?}")));
        }
        if xs[xs.len() - 1] != self.dim || ys[ys.len() - 1] != self.dim {
            return Err(Error::Shape(format!("mab: expected width {}, got {xs:?} and {ys:?}", self.dim)));
        }
        let xn = self.ln_attn.forward(p, x)?;
        let yn = if x == y { xn } else { self.ln_attn.forward(p, y)? };
        let q = self.q.forward(p, xn)?;
        let k = self.k.forward(p, yn)?;
        let v = self.v.forward(p, yn)?;
        let last = xs.len() - 1;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(last, h * dh, dh)?;
            let kh = k.narrow(last, h * dh, dh)?;
            let vh = v.narrow(last, h * dh, dh)?;
            let att = qh.matmul(kh.transpose()?)?.scale(scale).softmax();
            outs.push(att.matmul(vh)?);
        }
        let heads = if outs.len() == 1 { outs[0] } else { concat(&outs, last)? };
        let a = x.add(self.o.forward(p, heads)?)?;
        let f = self.ffn.forward(p, self.ln_ffn.forward(p, a)?)?;
        a.add(f)
    }
}
