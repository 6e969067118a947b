//! Persistent parameter storage. The tape is rebuilt per forward pass; model
//! weights live here and are bound into each new graph as leaves.

use rand::Rng;

use super::graph::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    frozen: bool,
}

/// Registry of named parameters with deterministic iteration order.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param {name}: data/shape mismatch");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![v; n])
    }

    /// Uniform init in ±1/sqrt(fan_in).
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn set(&mut self, id: ParamId, data: Vec<f64>) {
        assert_eq!(data.len(), self.entries[id.0].data.len());
        self.entries[id.0].data = data;
    }

    /// Exclude a parameter from optimizer updates (ablation switch).
    pub fn freeze(&mut self, id: ParamId) {
        self.entries[id.0].frozen = true;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// All parameter values as one flat vector, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for e in &self.entries {
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_len());
        let mut off = 0usize;
        for e in &mut self.entries {
            let len = e.data.len();
            e.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    /// Bind every parameter into `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &Graph) -> Bound {
        let tensors = self
            .entries
            .iter()
            .map(|e| graph.var(&e.shape, e.data.clone()))
            .collect();
        Bound { tensors }
    }

    /// Plain gradient-descent step from the gradients accumulated on `bound`.
    /// Frozen parameters are skipped. Returns the gradient l2 norm.
    pub fn sgd_step(&mut self, bound: &Bound, lr: f64) -> f64 {
        let mut sq = 0.0;
        for (entry, leaf) in self.entries.iter_mut().zip(&bound.tensors) {
            let Some(grad) = leaf.grad() else { continue };
            sq += grad.iter().map(|g| g * g).sum::<f64>();
            if entry.frozen {
                continue;
            }
            for (p, g) in entry.data.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        }
        sq.sqrt()
    }
}

/// Parameters bound to one graph as leaves.
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<Vec<f64>> {
        self.tensors[id.0].grad()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Tensor;
    fn index(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}
