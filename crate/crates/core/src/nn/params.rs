//! Named parameter storage and binding of parameters into a [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::nn::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Parameters keyed by module path, e.g. `ser.down0.conv1.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Scalar parameter count of the entries under `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|t| t.is_finite())
    }

    /// A zero tensor for every entry (gradient / moment accumulators).
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Adds a convolution `weight [cout, cin, k, k]` and `bias [cout]`, both drawn
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let mut draw = |_| T::lit(rng.random_range(-bound..bound));
        let w = Tensor::from_fn(&[cout, cin, k, k], &mut draw);
        let b = Tensor::from_fn(&[cout], &mut draw);
        self.insert(format!("{prefix}.weight"), w);
        self.insert(format!("{prefix}.bias"), b);
    }

    /// Sets every entry under `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, t) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Parameters of a store made available inside one graph.
///
/// Leaves are created lazily on first use so that unused modules (for example a
/// disabled initializer) do not appear in the gradient set.
pub struct Bound<'a, T: Real> {
    pub graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Real> Bound<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            graph,
            store,
            trainable,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Collects parameter gradients into a store shaped like the parameters;
    /// parameters that were never used get zero gradient.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> ParamStore<T> {
        let vars = self.vars.borrow();
        let mut out = ParamStore::new();
        for (name, t) in self.store.iter() {
            let g = vars
                .get(name)
                .and_then(|&v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}
