//! Training objectives: Dice loss, cross-entropy, DCEL (their 1:1 sum),
//! and the Generalized Dice Loss.
//!
//! All four losses are computed in f64 with closed-form gradients with
//! respect to the logits; the f32 entry points used by the trainer convert
//! at the boundary. Gradients include the softmax chain rule, so the
//! returned array can seed [`crate::tensor::Graph::backward`] directly from
//! the logits node.

use ndarray::{Array2, Array4, ArrayView4};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, NUM_CLASSES};

/// Everything a loss evaluation needs. `epsilon` smooths the dice terms;
/// `include_background` only affects [`gdl`].
pub struct LossInputs<'a> {
    pub logits: ArrayView4<'a, f32>,
    pub target: &'a LabelMap,
    pub epsilon: f64,
    pub include_background: bool,
}

impl<'a> LossInputs<'a> {
    pub fn new(logits: ArrayView4<'a, f32>, target: &'a LabelMap) -> Self {
        LossInputs { logits, target, epsilon: 1e-5, include_background: true }
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let (k, d, h, w) = self.logits.dim();
        if self.target.data.dim() != (d, h, w) {
            return Err(Error::Contract(format!(
                "logits spatial shape {:?} does not match target shape {:?}",
                (d, h, w),
                self.target.data.dim()
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Contract("loss epsilon must be positive".into()));
        }
        if let Some(&bad) = self.target.data.iter().find(|&&v| v as usize >= k) {
            return Err(Error::Contract(format!("target label {bad} out of range for {k} classes")));
        }
        Ok((k, d * h * w))
    }

    fn logits_f64(&self, k: usize, n: usize) -> Array2<f64> {
        let flat: Vec<f64> = self.logits.iter().map(|&v| v as f64).collect();
        Array2::from_shape_vec((k, n), flat).expect("logits standard layout")
    }

    fn target_flat(&self) -> Vec<u8> {
        self.target.data.iter().copied().collect()
    }
}

/// Column-wise softmax of `(K, N)` logits.
fn softmax_cols(logits: &Array2<f64>) -> Array2<f64> {
    let (k, n) = logits.dim();
    let mut p = Array2::<f64>::zeros((k, n));
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(logits[[c, i]]);
        }
        let mut denom = 0.0;
        for c in 0..k {
            let e = (logits[[c, i]] - max).exp();
            p[[c, i]] = e;
            denom += e;
        }
        for c in 0..k {
            p[[c, i]] /= denom;
        }
    }
    p
}

/// Chain rule through the softmax: maps dL/dp to dL/dz in place.
fn softmax_chain(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let (k, n) = p.dim();
    let mut dz = Array2::<f64>::zeros((k, n));
    for i in 0..n {
        let mut dot = 0.0;
        for c in 0..k {
            dot += dp[[c, i]] * p[[c, i]];
        }
        for c in 0..k {
            dz[[c, i]] = p[[c, i]] * (dp[[c, i]] - dot);
        }
    }
    dz
}

struct Prepared {
    k: usize,
    n: usize,
    p: Array2<f64>,
    target: Vec<u8>,
}

fn prepare(inputs: &LossInputs) -> Result<Prepared> {
    let (k, n) = inputs.validate()?;
    let logits = inputs.logits_f64(k, n);
    Ok(Prepared { k, n, p: softmax_cols(&logits), target: inputs.target_flat() })
}

/// Soft Dice loss: `1 − mean_k (2 Σ p_k g_k + ε)/(Σ p_k + Σ g_k + ε)`.
fn dice_core(pr: &Prepared, eps: f64) -> (f64, Array2<f64>) {
    let Prepared { k, n, p, target } = pr;
    let mut num = vec![eps; *k];
    let mut den = vec![eps; *k];
    for i in 0..*n {
        let t = target[i] as usize;
        num[t] += 2.0 * p[[t, i]];
        for c in 0..*k {
            den[c] += p[[c, i]];
        }
    }
    for (c, d) in den.iter_mut().enumerate() {
        *d += target.iter().filter(|&&t| t as usize == c).count() as f64;
    }
    let mut loss = 0.0;
    for c in 0..*k {
        loss += num[c] / den[c];
    }
    let loss = 1.0 - loss / *k as f64;

    let mut dp = Array2::<f64>::zeros((*k, *n));
    for i in 0..*n {
        let t = target[i] as usize;
        for c in 0..*k {
            let g = if c == t { 1.0 } else { 0.0 };
            // d/dp of num_c/den_c, then −1/K from the mean and the sign flip
            dp[[c, i]] = -(2.0 * g * den[c] - num[c]) / (den[c] * den[c]) / *k as f64;
        }
    }
    (loss, dp)
}

fn ce_core(pr: &Prepared) -> (f64, Array2<f64>) {
    let Prepared { k: _, n, p, target } = pr;
    let mut loss = 0.0;
    for i in 0..*n {
        loss -= p[[target[i] as usize, i]].max(1e-300).ln();
    }
    let loss = loss / *n as f64;
    // dL/dz = (p − onehot)/N; expressed here directly in logit space
    let mut dz = p.clone();
    for i in 0..*n {
        dz[[target[i] as usize, i]] -= 1.0;
    }
    dz.mapv_inplace(|v| v / *n as f64);
    (loss, dz)
}

fn gdl_core(pr: &Prepared, include_background: bool) -> Result<(f64, Array2<f64>)> {
    let Prepared { k, n, p, target } = pr;
    let first_class = if include_background { 0 } else { 1 };
    let mut g_sum = vec![0.0f64; *k];
    for &t in target {
        g_sum[t as usize] += 1.0;
    }
    let weights: Vec<f64> = (0..*k)
        .map(|c| if c >= first_class && g_sum[c] > 0.0 { 1.0 / (g_sum[c] * g_sum[c]) } else { 0.0 })
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateTarget);
    }

    let mut intersect = vec![0.0f64; *k];
    let mut p_sum = vec![0.0f64; *k];
    for i in 0..*n {
        let t = target[i] as usize;
        intersect[t] += p[[t, i]];
        for c in 0..*k {
            p_sum[c] += p[[c, i]];
        }
    }
    let num: f64 = (0..*k).map(|c| weights[c] * intersect[c]).sum();
    let den: f64 = (0..*k).map(|c| weights[c] * (p_sum[c] + g_sum[c])).sum();
    let loss = 1.0 - 2.0 * num / den;

    let mut dp = Array2::<f64>::zeros((*k, *n));
    for i in 0..*n {
        let t = target[i] as usize;
        for c in 0..*k {
            let g = if c == t { 1.0 } else { 0.0 };
            dp[[c, i]] = -2.0 * weights[c] * (g * den - num) / (den * den);
        }
    }
    Ok((loss, dp))
}

fn grad_to_f32(dz: &Array2<f64>, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    let flat: Vec<f32> = dz.iter().map(|&v| v as f32).collect();
    Array4::from_shape_vec(shape, flat).expect("gradient standard layout")
}

pub fn dice_loss(inputs: &LossInputs) -> Result<f64> {
    let pr = prepare(inputs)?;
    Ok(dice_core(&pr, inputs.epsilon).0)
}

pub fn cross_entropy_loss(inputs: &LossInputs) -> Result<f64> {
    let pr = prepare(inputs)?;
    Ok(ce_core(&pr).0)
}

pub fn dcel(inputs: &LossInputs) -> Result<f64> {
    let pr = prepare(inputs)?;
    Ok(dice_core(&pr, inputs.epsilon).0 + ce_core(&pr).0)
}

pub fn gdl(inputs: &LossInputs) -> Result<f64> {
    let pr = prepare(inputs)?;
    Ok(gdl_core(&pr, inputs.include_background)?.0)
}

/// DCEL value plus its gradient with respect to the logits.
pub fn dcel_with_grad(inputs: &LossInputs) -> Result<(f64, Array4<f32>)> {
    let pr = prepare(inputs)?;
    let (dv, dp) = dice_core(&pr, inputs.epsilon);
    let (cv, ce_dz) = ce_core(&pr);
    let dz = softmax_chain(&pr.p, &dp) + &ce_dz;
    Ok((dv + cv, grad_to_f32(&dz, inputs.logits.dim())))
}

/// GDL value plus its gradient with respect to the logits.
pub fn gdl_with_grad(inputs: &LossInputs) -> Result<(f64, Array4<f32>)> {
    let pr = prepare(inputs)?;
    let (v, dp) = gdl_core(&pr, inputs.include_background)?;
    let dz = softmax_chain(&pr.p, &dp);
    Ok((v, grad_to_f32(&dz, inputs.logits.dim())))
}

/// Which objective a training stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dcel,
    Gdl,
}

impl LossKind {
    pub fn with_grad(self, inputs: &LossInputs) -> Result<(f64, Array4<f32>)> {
        match self {
            LossKind::Dcel => dcel_with_grad(inputs),
            LossKind::Gdl => gdl_with_grad(inputs),
        }
    }
}

/// f64 evaluation against raw f64 logits; exists so gradient checks can
/// perturb in full precision.
pub fn eval_f64(
    kind: LossKind,
    logits: &Array2<f64>,
    target: &[u8],
    epsilon: f64,
    include_background: bool,
) -> Result<(f64, Array2<f64>)> {
    let (k, n) = logits.dim();
    let pr = Prepared { k, n, p: softmax_cols(logits), target: target.to_vec() };
    match kind {
        LossKind::Dcel => {
            let (dv, dp) = dice_core(&pr, epsilon);
            let (cv, ce_dz) = ce_core(&pr);
            Ok((dv + cv, softmax_chain(&pr.p, &dp) + &ce_dz))
        }
        LossKind::Gdl => {
            let (v, dp) = gdl_core(&pr, include_background)?;
            Ok((v, softmax_chain(&pr.p, &dp)))
        }
    }
}

/// Convenience for checks on full 4-class label maps.
pub fn num_classes() -> usize {
    NUM_CLASSES
}
