//! Named parameter storage and its binding onto a [`Graph`].

use crate::autodiff::{Gradients, Graph, Var};
use crate::ssm::{SsmParams, SsmVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered list of named tensors. Registration order is the serialization order.
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|t| g.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Graph leaves of a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every parameter; unreached parameters get zeros.
    pub fn gradients(&self, g: &Graph, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect()
    }
}

/// Store ids of one [`SsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmIds {
    a_log: ParamId,
    d: ParamId,
    delta_base: ParamId,
    w_delta: ParamId,
    w_b: ParamId,
    b_base: ParamId,
    w_c: ParamId,
    c_base: ParamId,
}

impl SsmIds {
    pub fn register(store: &mut ParamStore, prefix: &str, p: SsmParams) -> Self {
        SsmIds {
            a_log: store.add(format!("{prefix}.a_log"), p.a_log),
            d: store.add(format!("{prefix}.d"), p.d),
            delta_base: store.add(format!("{prefix}.delta_base"), p.delta_base),
            w_delta: store.add(format!("{prefix}.w_delta"), p.w_delta),
            w_b: store.add(format!("{prefix}.w_b"), p.w_b),
            b_base: store.add(format!("{prefix}.b_base"), p.b_base),
            w_c: store.add(format!("{prefix}.w_c"), p.w_c),
            c_base: store.add(format!("{prefix}.c_base"), p.c_base),
        }
    }

    pub fn vars(&self, b: &Bound) -> SsmVars {
        SsmVars {
            a_log: b.var(self.a_log),
            d: b.var(self.d),
            delta_base: b.var(self.delta_base),
            w_delta: b.var(self.w_delta),
            w_b: b.var(self.w_b),
            b_base: b.var(self.b_base),
            w_c: b.var(self.w_c),
            c_base: b.var(self.c_base),
        }
    }

    pub fn params(&self, store: &ParamStore) -> SsmParams {
        SsmParams {
            a_log: store.get(self.a_log).clone(),
            d: store.get(self.d).clone(),
            delta_base: store.get(self.delta_base).clone(),
            w_delta: store.get(self.w_delta).clone(),
            w_b: store.get(self.w_b).clone(),
            b_base: store.get(self.b_base).clone(),
            w_c: store.get(self.w_c).clone(),
            c_base: store.get(self.c_base).clone(),
        }
    }

    /// Ids of the selection projections and read-out, in a fixed order.
    pub fn all(&self) -> [ParamId; 8] {
        [
            self.a_log,
            self.d,
            self.delta_base,
            self.w_delta,
            self.w_b,
            self.b_base,
            self.w_c,
            self.c_base,
        ]
    }
}
