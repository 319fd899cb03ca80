//! Minimal tape-based reverse-mode autodiff over `ndarray` arrays.
//!
//! A [`Graph`] is rebuilt per forward pass; node ids are topologically
//! ordered by construction, so backward is a single reverse sweep. Each op
//! registers a closure that maps the output gradient to per-parent gradient
//! contributions. Parameters live in a [`ParamStore`] outside the graph and
//! accumulate gradients by name.
//!
//! Reductions inside ops run either serially or as ordered parallel maps
//! followed by serial summation, so results are bit-stable regardless of
//! thread scheduling.

mod conv;
mod ops;

pub use conv::{conv3d_forward, conv3d_raw};
pub use ops::*;

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type TensorId = usize;

type BackwardFn = Box<dyn Fn(&ArrayD<f32>) -> Vec<(TensorId, ArrayD<f32>)>>;

struct Node {
    value: Rc<ArrayD<f32>>,
    backward: Option<BackwardFn>,
    param: Option<String>,
}

/// One forward pass worth of computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f32> {
        &self.nodes[id].value
    }

    pub fn value_rc(&self, id: TensorId) -> Rc<ArrayD<f32>> {
        Rc::clone(&self.nodes[id].value)
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: ArrayD<f32>) -> TensorId {
        self.push(Rc::new(value), None, None)
    }

    /// Parameter node; backward accumulates into `store.grad(name)`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> TensorId {
        let value = store.value_rc(name);
        self.push(value, None, Some(name.to_string()))
    }

    fn push(&mut self, value: Rc<ArrayD<f32>>, backward: Option<BackwardFn>, param: Option<String>) -> TensorId {
        self.nodes.push(Node { value, backward, param });
        self.nodes.len() - 1
    }

    pub(crate) fn op(&mut self, value: ArrayD<f32>, backward: BackwardFn) -> TensorId {
        self.push(Rc::new(value), Some(backward), None)
    }

    /// Reverse sweep from `root`, seeding with `seed` (same shape as the
    /// root value). Parameter gradients accumulate into `store`.
    pub fn backward(&self, root: TensorId, seed: ArrayD<f32>, store: &mut ParamStore) {
        assert_eq!(
            seed.shape(),
            self.nodes[root].value.shape(),
            "backward seed shape must match the root value"
        );
        let mut grads: Vec<Option<ArrayD<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(name) = &node.param {
                store.accumulate_grad(name, &grad);
            }
            if let Some(backward) = &node.backward {
                for (pid, contribution) in backward(&grad) {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contribution,
                        slot => *slot = Some(contribution),
                    }
                }
            }
        }
    }

    /// Gradient wrt a leaf/interior node instead of parameters. Test hook.
    pub fn backward_to(&self, root: TensorId, seed: ArrayD<f32>, wanted: TensorId) -> Option<ArrayD<f32>> {
        let mut grads: Vec<Option<ArrayD<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            if id == wanted {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            if let Some(backward) = &self.nodes[id].backward {
                for (pid, contribution) in backward(&grad) {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contribution,
                        slot => *slot = Some(contribution),
                    }
                }
            }
        }
        grads[wanted].take()
    }
}

struct Param {
    value: Rc<ArrayD<f32>>,
    grad: ArrayD<f32>,
    adam_m: ArrayD<f32>,
    adam_v: ArrayD<f32>,
}

/// Named parameter tensors plus Adam state.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f32>) {
        let shape = value.raw_dim();
        self.params.insert(
            name.to_string(),
            Param {
                value: Rc::new(value),
                grad: ArrayD::zeros(shape.clone()),
                adam_m: ArrayD::zeros(shape.clone()),
                adam_v: ArrayD::zeros(shape),
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, name: &str) -> &ArrayD<f32> {
        &self.params[name].value
    }

    pub fn value_rc(&self, name: &str) -> Rc<ArrayD<f32>> {
        Rc::clone(&self.params[name].value)
    }

    pub fn grad(&self, name: &str) -> &ArrayD<f32> {
        &self.params[name].grad
    }

    pub fn set_value(&mut self, name: &str, value: ArrayD<f32>) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if param.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} shape mismatch: {:?} vs {:?}",
                param.value.shape(),
                value.shape()
            )));
        }
        param.value = Rc::new(value);
        Ok(())
    }

    fn accumulate_grad(&mut self, name: &str, grad: &ArrayD<f32>) {
        let param = self.params.get_mut(name).expect("parameter registered before backward");
        param.grad += grad;
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Largest absolute gradient entry; NaN poisons the result.
    pub fn grad_abs_max(&self) -> f32 {
        let mut m = 0.0f32;
        for p in self.params.values() {
            for &g in p.grad.iter() {
                if g.is_nan() {
                    return f32::NAN;
                }
                m = m.max(g.abs());
            }
        }
        m
    }

    pub fn adam_step(&mut self, lr: f32, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for p in self.params.values_mut() {
            let value = Rc::make_mut(&mut p.value);
            ndarray::Zip::from(value)
                .and(&mut p.adam_m)
                .and(&mut p.adam_v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
                });
        }
    }

    /// Deterministic digest of all parameter bytes (FNV-1a).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in &self.params {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for &v in p.value.iter() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Adam moment tensors, exposed for checkpoint serialization.
    pub fn adam_state(&self, name: &str) -> (&ArrayD<f32>, &ArrayD<f32>) {
        let p = &self.params[name];
        (&p.adam_m, &p.adam_v)
    }

    pub fn set_adam_state(&mut self, name: &str, m: ArrayD<f32>, v: ArrayD<f32>) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if param.value.shape() != m.shape() || param.value.shape() != v.shape() {
            return Err(Error::Checkpoint(format!("adam state shape mismatch for {name}")));
        }
        param.adam_m = m;
        param.adam_v = v;
        Ok(())
    }

    /// Adam step counter, serialized with checkpoints so resume matches.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }
}

/// Seeded parameter initialization helpers.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn normal(&mut self) -> f32 {
        let u1: f64 = self.rng.random::<f64>().max(1e-12);
        let u2: f64 = self.rng.random::<f64>();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// He-normal tensor for a layer with the given fan-in.
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
        let std = (2.0 / fan_in as f32).sqrt();
        let mut out = ArrayD::zeros(ndarray::IxDyn(shape));
        for v in out.iter_mut() {
            *v = self.normal() * std;
        }
        out
    }

    pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
        ArrayD::zeros(ndarray::IxDyn(shape))
    }

    pub fn ones(shape: &[usize]) -> ArrayD<f32> {
        ArrayD::from_elem(ndarray::IxDyn(shape), 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        // fake gradient of +1 should reduce the weight
        store.accumulate_grad("w", &ArrayD::from_elem(IxDyn(&[2]), 1.0));
        store.adam_step(0.1, &AdamConfig::default());
        assert!(store.value("w").iter().all(|&w| w < 1.0));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut a = ParamStore::new();
        a.insert("w", ArrayD::from_elem(IxDyn(&[3]), 0.5));
        let mut b = ParamStore::new();
        b.insert("w", ArrayD::from_elem(IxDyn(&[3]), 0.5));
        assert_eq!(a.checksum(), b.checksum());
        b.set_value("w", ArrayD::from_elem(IxDyn(&[3]), 0.25)).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn backward_accumulates_into_params() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[4]), 2.0));
        let mut g = Graph::new();
        let w = g.param(&store, "w");
        let y = scale(&mut g, w, 3.0);
        g.backward(y, ArrayD::from_elem(IxDyn(&[4]), 1.0), &mut store);
        assert!(store.grad("w").iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }
}
