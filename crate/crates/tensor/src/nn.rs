//! Parameter storage and the small set of layers the models are built from.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::checkpoint;
use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Arc<Tensor>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Panics on a duplicate name, which is a model
    /// construction bug rather than a runtime condition.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, Arc::new(value.with_requires_grad(false))));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0].1;
        if slot.shape() != value.shape() {
            return Err(TensorError::shape("ParamStore::set", &[slot.shape(), value.shape()]));
        }
        *slot = Arc::new(value.with_requires_grad(false));
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[index].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Puts every parameter on `tape`; tracked iff `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| tape.param(t.clone(), trainable))
                .collect(),
        }
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.as_ref().clone()))
            .collect()
    }

    /// Overwrites parameters from named records; every stored parameter must
    /// be present with a matching shape. Extra records are ignored.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..self.entries.len() {
            let name = self.entries[i].0.clone();
            let value = by_name
                .get(name.as_str())
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            self.set(ParamId(i), (*value).clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.to_records())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = checkpoint::load(path)?;
        self.load_records(&records)
    }
}

/// Parameters of a [`ParamStore`] registered on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients aligned with the store's parameter order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Affine map `x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound));
        let bias = store.insert(format!("{name}.bias"), uniform(rng, &[out_dim], bound));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.weight))?.add(p.get(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(Self::EPS)?.mul(p.get(self.gain))?.add(p.get(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x)?;
            if i < last {
                x = self.activation.apply(x);
            }
        }
        Ok(x)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

/// 1D convolution over `[batch, channels, length]`, stride 1.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        Self {
            weight: store.insert(
                format!("{name}.weight"),
                uniform(rng, &[out_channels, in_channels, kernel], bound),
            ),
            bias: store.insert(format!("{name}.bias"), uniform(rng, &[out_channels], bound)),
            padding,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1d(p.get(self.weight), p.get(self.bias), self.padding)
    }
}

/// Multi-head self-attention built from primitive tape ops.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model dim must split evenly across heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    fn split_heads<'t>(&self, x: Var<'t>, batch: usize, tokens: usize) -> Result<Var<'t>> {
        let head_dim = self.dim / self.heads;
        x.reshape(&[batch, tokens, self.heads, head_dim])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * self.heads, tokens, head_dim])
    }

    /// `x`: `[batch, tokens, dim]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(TensorError::shape("multi_head_attention", &[&shape]));
        }
        let (batch, tokens) = (shape[0], shape[1]);
        let head_dim = self.dim / self.heads;
        let q = self.split_heads(self.query.forward(p, x)?, batch, tokens)?;
        let k = self.split_heads(self.key.forward(p, x)?, batch, tokens)?;
        let v = self.split_heads(self.value.forward(p, x)?, batch, tokens)?;
        let attn = q
            .matmul(k.transpose()?)?
            .scale(1.0 / (head_dim as f64).sqrt())
            .softmax()?;
        let ctx = attn
            .matmul(v)?
            .reshape(&[batch, self.heads, tokens, head_dim])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch, tokens, self.dim])?;
        self.output.forward(p, ctx)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerEncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerEncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, ff_dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_dim, dim, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.add(self.attention.forward(p, self.norm1.forward(p, x)?)?)?;
        let ff = self
            .ff_out
            .forward(p, self.ff_in.forward(p, self.norm2.forward(p, h)?)?.gelu())?;
        h.add(ff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn attention_preserves_shape() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = TransformerEncoderLayer::new(&mut store, "enc", 8, 2, 16, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(uniform(&mut rng, &[3, 4, 8], 1.0));
        let y = layer.forward(&p, x).unwrap();
        assert_eq!(y.shape(), vec![3, 4, 8]);
    }

    #[test]
    fn records_round_trip_through_store() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut a = ParamStore::new();
        Mlp::new(&mut a, "mlp", &[3, 5, 2], Activation::Gelu, &mut rng);
        let mut b = ParamStore::new();
        Mlp::new(&mut b, "mlp", &[3, 5, 2], Activation::Gelu, &mut rng);
        b.load_records(&a.to_records()).unwrap();
        assert_eq!(a.to_records(), b.to_records());
    }

    #[test]
    fn load_rejects_missing_or_misshaped() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let mut a = ParamStore::new();
        Linear::new(&mut a, "l", 2, 2, &mut rng);
        let mut recs = a.to_records();
        recs[0].1 = Tensor::zeros(&[3, 2]);
        assert!(a.clone().load_records(&recs).is_err());
        assert!(a.load_records(&recs[1..]).is_err());
    }
}
