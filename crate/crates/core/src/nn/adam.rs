use avic_tensor::{Scalar, Tensor};
use indexmap::IndexMap;

use super::store::ParameterStore;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam moments, kept per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParameterStore<T>, lr: f64) -> Self {
        let zeros: IndexMap<String, Tensor<T>> = store.iter().map(|(k, p)| (k.to_string(), p.zeros_like())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }

    /// Moments as a store (`m.<name>`, `v.<name>`, scalar `adam.t`) for
    /// checkpointing.
    pub fn to_store(&self) -> Result<ParameterStore<T>> {
        let mut s = ParameterStore::new("adam");
        for (k, m) in &self.m {
            s.insert(format!("m.{k}"), m.clone())?;
        }
        for (k, v) in &self.v {
            s.insert(format!("v.{k}"), v.clone())?;
        }
        s.insert("adam.t", Tensor::scalar(T::from_f64(self.t as f64))?)?;
        Ok(s)
    }

    pub fn from_store(params: &ParameterStore<T>, saved: &ParameterStore<T>, lr: f64) -> Result<Self> {
        let mut state = Self::new(params, lr);
        for (k, p) in params.iter() {
            for (prefix, slot) in [("m", &mut state.m), ("v", &mut state.v)] {
                let t = saved.get(&format!("{prefix}.{k}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::LayoutMismatch(format!(
                        "{prefix}.{k}: {:?} vs {:?}",
                        t.shape(),
                        p.shape()
                    )));
                }
                slot.insert(k.to_string(), t.clone());
            }
        }
        let t = saved.get("adam.t")?.item().unwrap_or(T::ZERO).to_f64();
        if !(t >= 0.0 && t.fract() == 0.0) {
            return Err(Error::LayoutMismatch(format!("adam.t = {t}")));
        }
        state.t = t as u64;
        Ok(state)
    }
}

/// One bias-corrected Adam update, computed in f64 per element.
///
/// A parameter whose gradient is zero everywhere is left untouched,
/// moments included, so an all-zero gradient map is a no-op for any state.
pub fn adam_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    store.require_unfrozen()?;
    for (name, p) in store.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(Error::LayoutMismatch(format!(
                "gradient of `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !state.m.get(name).is_some_and(|m| m.shape() == p.shape()) {
            return Err(Error::LayoutMismatch(format!("no Adam moments for `{name}`")));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let g = &grads[&name];
        if g.data().iter().all(|&x| x == T::ZERO) {
            continue;
        }
        let mut p = store.get(&name)?.data().to_vec();
        let m = state.m.get_mut(&name).expect("checked above");
        let mut md = m.data().to_vec();
        let v = state.v.get_mut(&name).expect("checked above");
        let mut vd = v.data().to_vec();
        for i in 0..p.len() {
            let gi = g.data()[i].to_f64();
            let mi = b1 * md[i].to_f64() + (1.0 - b1) * gi;
            let vi = b2 * vd[i].to_f64() + (1.0 - b2) * gi * gi;
            let step = state.lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            p[i] = T::from_f64(p[i].to_f64() - step);
            md[i] = T::from_f64(mi);
            vd[i] = T::from_f64(vi);
        }
        let shape = g.shape().to_vec();
        *m = Tensor::new(shape.clone(), md)?;
        *v = Tensor::new(shape.clone(), vd)?;
        store.set(&name, Tensor::new(shape, p)?)?;
    }
    Ok(())
}
