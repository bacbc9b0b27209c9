//! Parameter storage and affine/MLP building blocks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered list of named parameter tensors. The order is the
/// checkpoint order and the optimizer-state order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph node of every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    /// Binds parameters to arbitrary nodes, one per store entry in order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Bound(nodes)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = NodeId;
    fn index(&self, id: ParamId) -> &NodeId {
        &self.0[id.0]
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if n.starts_with(prefix) {
                t.fill(T::zero());
            }
        }
    }

    pub fn zero_all(&mut self) {
        self.zero_prefix("");
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Symmetric uniform init with bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.random_range(-a..=a)))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("shape")
}

/// Affine map `y = x W + b` on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, fan_in, fan_out),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, p[self.weight])?;
        g.add_row(h, p[self.bias])
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).fill(T::zero());
        store.get_mut(self.bias).fill(T::zero());
    }
}

/// Stack of affine layers with ReLU after every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists hidden sizes followed by the output size.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), fan_in, w, rng));
            fan_in = w;
        }
        Mlp { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Zeroes the output layer so the MLP computes the constant zero.
    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        if let Some(l) = self.layers.last() {
            l.zero(store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = xavier_uniform(&mut rng, 10, 30);
        let a = (6.0f64 / 40.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= a));
        assert!(w.data().iter().any(|x| x.abs() > a * 0.5));
    }

    #[test]
    fn mlp_shapes_and_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", 4, &[32, 64, 128], &mut rng);
        assert_eq!(store.len(), 6);
        assert_eq!(store.names()[0], "m.0.weight");
        let x = Tensor::<f64>::filled(2, 4, 0.3);
        {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let ix = g.constant(x.clone());
            let y = mlp.forward(&mut g, &p, ix).unwrap();
            assert_eq!(g.value(y).shape(), (2, 128));
        }
        mlp.zero_output(&mut store);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let ix = g.constant(x);
        let y = mlp.forward(&mut g, &p, ix).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
