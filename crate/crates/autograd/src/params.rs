use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutogradError, Result};
use crate::graph::{Gradients, Graph};
use crate::tensor::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable tensors plus their gradient and Adam moment buffers.
///
/// Every store carries a process-unique id so a [`Graph`] can mix leaves from
/// several stores (generator and discriminator, say) and each store only
/// picks up its own gradients.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    grads_ready: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            names: self.names.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            step: self.step,
            grads_ready: self.grads_ready,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            grads_ready: false,
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.id(name).is_some() {
            return Err(AutogradError::Contract(format!("duplicate parameter name `{name}`")));
        }
        let n = value.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(vec![0.0; n]);
        self.m.push(vec![0.0; n]);
        self.v.push(vec![0.0; n]);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn has_gradients(&self) -> bool {
        self.grads_ready
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        self.grads_ready = false;
    }

    /// Adds the gradients of every leaf in `graph` that belongs to this store.
    /// Parameters that never entered the graph keep a zero gradient.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (var, (uid, idx)) in graph.param_leaves() {
            if uid != self.uid {
                continue;
            }
            if let Some(g) = grads.get(var) {
                for (dst, &src) in self.grads[idx].iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        self.grads_ready = true;
    }

    /// Overwrites a gradient buffer directly; used by finite-difference checks
    /// and by callers that compute gradients outside a graph.
    pub fn set_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        if grad.len() != self.grads[id.0].len() {
            return Err(AutogradError::Contract(format!(
                "gradient for `{}` has {} elements, expected {}",
                self.names[id.0],
                grad.len(),
                self.grads[id.0].len()
            )));
        }
        self.grads[id.0].copy_from_slice(grad);
        self.grads_ready = true;
        Ok(())
    }

    /// One bias-corrected Adam update. Consumes the accumulated gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grads_ready {
            return Err(AutogradError::MissingGradient(
                "adam_step called before gradients were accumulated".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let theta = self.values[i].data_mut();
            let g = &self.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..theta.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Replaces a parameter's values, keeping its optimizer state.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(AutogradError::Shape {
                node: self.names[id.0].clone(),
                detail: format!(
                    "expected {:?}, got {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                ),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Bitwise snapshot of every parameter value, for equality checks.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.values
            .iter()
            .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
            .collect()
    }
}
