use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named tensor with its gradient accumulator. Running statistics live here
/// too; they are never bound to a loss, so their gradient stays zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = alloc::vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Ordered collection of parameters. Order is part of the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Truncated normal (cut at two deviations) initialisation.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.truncated_normal(std))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), T::of(v)))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> core::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Registers every parameter as a gradient-tracked leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.variable(p.value.clone())).collect())
    }

    /// Registers every parameter as a constant (no gradient) on `g`.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.constant(p.value.clone())).collect())
    }

    /// Adds `scale * dL/dparam` from a differentiated graph into the
    /// accumulators.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &Bound, scale: T) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(gr) = g.grad(v) {
                for (acc, &d) in p.grad.iter_mut().zip(gr) {
                    *acc += scale * d;
                }
            }
        }
    }

    /// FNV-1a over names, shapes and value bits. Used to assert that a store
    /// did not change across an operation.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            feed(p.name.as_bytes());
            for &d in p.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_and_fingerprint() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let fp = store.fingerprint();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let sq = g.mul(b.var(id), b.var(id)).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        store.accumulate_grads(&g, &b, 0.5);
        assert_eq!(store.get(id).grad, alloc::vec![1.0, 2.0]);
        assert_eq!(store.fingerprint(), fp);
        store.get_mut(id).value.data_mut()[0] = 1.5;
        assert_ne!(store.fingerprint(), fp);
    }
}
