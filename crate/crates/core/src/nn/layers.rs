//! Layer declarations, initialization and forward helpers.

use avic_tensor::{conv2d, conv_transpose2d, dense, Scalar, Tensor, Var};

use super::store::{Bound, ParameterStore};
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Weight `[cout, cin, k, k]`.
    Conv { cin: usize, cout: usize, k: usize },
    /// Weight `[cin, cout, k, k]`.
    ConvTranspose { cin: usize, cout: usize, k: usize },
    /// Weight `[din, dout]`.
    Dense { din: usize, dout: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Zero weights instead of Kaiming-uniform.
    pub zero_init: bool,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(name, LayerKind::Conv { cin, cout, k })
    }

    pub fn conv_t(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(name, LayerKind::ConvTranspose { cin, cout, k })
    }

    pub fn dense(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self::new(name, LayerKind::Dense { din, dout })
    }

    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            zero_init: false,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { cin, cout, k } => vec![cout, cin, k, k],
            LayerKind::ConvTranspose { cin, cout, k } => vec![cin, cout, k, k],
            LayerKind::Dense { din, dout } => vec![din, dout],
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv { cout, .. } | LayerKind::ConvTranspose { cout, .. } => cout,
            LayerKind::Dense { dout, .. } => dout,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { cin, k, .. } | LayerKind::ConvTranspose { cin, k, .. } => cin * k * k,
            LayerKind::Dense { din, .. } => din,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.bias_len()
    }
}

/// Builds a store from layer specs: Kaiming-uniform weights on
/// `[-sqrt(6/fan_in), sqrt(6/fan_in)]` (drawn in f64, then cast), zero
/// biases. Each layer draws from its own stream keyed by `(key, index)`.
pub fn init_store<T: Scalar>(label: &str, layers: &[LayerSpec], key: u64) -> Result<ParameterStore<T>> {
    let mut store = ParameterStore::new(label);
    for (i, layer) in layers.iter().enumerate() {
        let shape = layer.weight_shape();
        let weight = if layer.zero_init {
            Tensor::zeros(shape)?
        } else {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            let mut r = rng::chacha(rng::derive_seed(&[key, i as u64]));
            rng::uniform_tensor::<f64>(&shape, -bound, bound, &mut r)?.cast()
        };
        store.insert(format!("{}.weight", layer.name), weight)?;
        store.insert(format!("{}.bias", layer.name), Tensor::zeros(vec![layer.bias_len()])?)?;
    }
    Ok(store)
}

pub fn conv<'t, T: Scalar>(
    p: &Bound<'t, T>,
    name: &str,
    x: &Var<'t, T>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(conv2d(x, w, Some(b), stride, padding)?)
}

pub fn conv_t<'t, T: Scalar>(
    p: &Bound<'t, T>,
    name: &str,
    x: &Var<'t, T>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(conv_transpose2d(x, w, Some(b), stride, padding)?)
}

pub fn linear<'t, T: Scalar>(p: &Bound<'t, T>, name: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(dense(x, w, Some(b))?)
}
