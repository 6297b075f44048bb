//! Parameter storage and the small set of layers every model here is built from.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
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
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrite every parameter from `(name, tensor)` pairs. Names and
    /// shapes must match exactly.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.values.len()
            )));
        }
        let lookup: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != value.shape() {
                return Err(Error::Compatibility(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = (*t).clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

/// Uniform fan-in scaled initialisation, `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape.to_vec(), (3.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// A tape bound to a parameter store. Parameters are loaded lazily, once
/// per session, and are differentiable only when the session is trainable.
pub struct Session<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
    trainable: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, false)
    }

    pub fn training(store: &'a ParamStore) -> Self {
        Self::new(store, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Gradients of `loss` for each parameter, indexed by [`ParamId`].
    /// Parameters that do not influence the loss get `None`.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        for (id, v) in &self.bound {
            out[id.0] = grads.take(*v);
        }
        Ok(out)
    }
}

impl Deref for Session<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(&[in_dim, out_dim], in_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim, shape
            )));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = s.reshape(x, &[rows, self.in_dim])?;
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.matmul(flat, w)?;
        let y = s.add_row_bias(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        s.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_channels, in_channels, kernel.0, kernel.1], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self {
            weight,
            bias,
            geom,
            out_channels,
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, (3, 3), ConvGeom::same(3), rng)
    }

    /// 3x3 with padding 1 and the given stride.
    pub fn strided3<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: (usize, usize),
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, cin, cout, (3, 3), ConvGeom::new(stride, (1, 1)), rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, (1, 1), ConvGeom::new((1, 1), (0, 0)), rng)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.conv2d(x, w, self.geom)?;
        s.add_channel_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
    pub rows: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn([rows, dim], 0.5, rng));
        Self { table, dim, rows }
    }

    pub fn forward(&self, s: &mut Session, indices: &[usize]) -> Result<Var> {
        let t = s.param(self.table);
        s.gather(t, indices)
    }
}

/// Single-head attention block over `[batch, tokens, dim]` with a pre-norm
/// and a residual connection. Keys and values may include extra context
/// tokens (e.g. reference features) appended after the queries' own tokens.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        }
    }

    /// `x + out(attn(norm(x), [norm(x); context]))`. `context` is appended
    /// to the key/value tokens without normalisation.
    pub fn forward(&self, s: &mut Session, x: Var, context: Option<Var>, mask: Option<Var>) -> Result<Var> {
        let h = self.norm.forward(s, x)?;
        let kv = match context {
            Some(c) => s.concat(&[h, c], 1)?,
            None => h,
        };
        let q = self.q.forward(s, h)?;
        let k = self.k.forward(s, kv)?;
        let v = self.v.forward(s, kv)?;
        let a = s.attention(q, k, v, mask)?;
        let o = self.out.forward(s, a)?;
        s.add(x, o)
    }
}

/// Additive causal mask of shape `[batch, n, n]`: zero on and below the
/// diagonal, a large negative value above it.
pub fn causal_mask(batch: usize, n: usize) -> Tensor {
    Tensor::from_fn([batch, n, n], |i| {
        let r = (i / n) % n;
        let c = i % n;
        if c > r {
            -1e30
        } else {
            0.0
        }
    })
}
