use avic_tensor::{GradientMap, Scalar, Tape, Tensor, Var};
use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Named parameters in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T: Scalar> {
    label: String,
    params: IndexMap<String, Tensor<T>>,
    frozen: bool,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            params: IndexMap::new(),
            frozen: false,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.label.clone()));
        }
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::LayoutMismatch(format!(
                "`{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn require_frozen(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::NotFrozen(self.label.clone()))
        }
    }

    pub fn require_unfrozen(&self) -> Result<()> {
        if self.frozen {
            Err(Error::Frozen(self.label.clone()))
        } else {
            Ok(())
        }
    }

    /// FNV-1a over names, shapes and value bit patterns.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in &self.params {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                eat(&x.bits().to_le_bytes());
            }
        }
        h
    }

    /// Names and shapes must agree, in order.
    pub fn check_layout(&self, other: &ParameterStore<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} parameters vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::LayoutMismatch(format!(
                    "`{a}` {:?} vs `{b}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            label: self.label.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen,
        }
    }

    /// Records every parameter on `tape`, as gradient-tracking leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Pairs vars with `store`'s names, in order.
    pub fn from_vars(store: &ParameterStore<T>, vars: &[Var<'t, T>]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} vars for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Self {
            vars: store.names().map(str::to_string).zip(vars.iter().cloned()).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&Var<'t, T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.vars.values().cloned().collect()
    }

    /// Extracts this store's gradients by name. Every parameter must have one.
    pub fn grads(&self, map: &GradientMap<T>) -> Result<IndexMap<String, Tensor<T>>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                map.get(v)
                    .cloned()
                    .map(|g| (k.clone(), g))
                    .ok_or_else(|| Error::MissingGradient(k.clone()))
            })
            .collect()
    }
}
