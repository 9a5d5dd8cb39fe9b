//! Named parameter storage, layer building blocks and the Adam optimizer.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Matrix, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces values from `other`, matching by name. Every parameter of
    /// `self` must be present in `other` with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| format!("parameter {name} missing"))?;
            if src.dim() != self.values[i].dim() {
                return Err(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    src.dim(),
                    self.values[i].dim()
                ));
            }
            self.values[i].assign(src);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Fan-based uniform initialization: U(−a, a) with a = √(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Affine layer `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), xavier_uniform(fan_in, fan_out, rng));
        let bias = store.register(format!("{name}.bias"), Matrix::zeros((1, fan_out)));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(self.weight, store.get(self.weight));
        let b = g.param(self.bias, store.get(self.bias));
        g.affine(x, w, b)
    }
}

/// Layer normalization with a learned per-feature gain and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.register(format!("{name}.gain"), Matrix::ones((1, width))),
            offset: store.register(format!("{name}.offset"), Matrix::zeros((1, width))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let normed = g.layer_norm(x);
        let gain = g.param(self.gain, store.get(self.gain));
        let offset = g.param(self.offset, store.get(self.offset));
        let scaled = g.mul_row(normed, gain);
        g.add_row(scaled, offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Hidden block: affine map, layer norm, activation.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub norm: LayerNorm,
    pub activation: Activation,
}

impl HiddenLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        HiddenLayer {
            linear: Linear::new(store, &format!("{name}.linear"), fan_in, fan_out, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), fan_out),
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.linear.forward(g, store, x);
        let h = self.norm.forward(g, store, h);
        match self.activation {
            Activation::Relu => g.relu(h),
            Activation::Tanh => g.tanh(h),
        }
    }
}

/// Builds a stack of hidden layers with the given output widths.
pub fn hidden_stack(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    widths: &[usize],
    activation: impl Fn(usize) -> Activation,
    rng: &mut impl Rng,
) -> Vec<HiddenLayer> {
    let mut fan_in = input;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let layer = HiddenLayer::new(store, &format!("{name}.hidden{i}"), fan_in, w, activation(i), rng);
            fan_in = w;
            layer
        })
        .collect()
}

pub fn run_stack(layers: &[HiddenLayer], g: &mut Graph, store: &ParamStore, x: Var) -> Var {
    layers.iter().fold(x, |h, layer| layer.forward(g, store, h))
}

/// Adam with optional global gradient-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, clip_norm: Option<f64>) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, _, v)| Matrix::zeros(v.dim())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Matrix)], lr: f64) {
        let norm = grads
            .iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let factor = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut by_id: Vec<Option<&Matrix>> = vec![None; store.len()];
        for &(id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        for id in store.ids() {
            let i = id.index();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            match by_id[i] {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        let g = g * factor;
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| self.beta1 * x);
                    v.mapv_inplace(|x| self.beta2 * x);
                }
            }
            let (b1, b2, eps) = (bias1, bias2, self.eps);
            ndarray::Zip::from(store.get_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / b1) / ((v / b2).sqrt() + eps);
            });
        }
    }
}
