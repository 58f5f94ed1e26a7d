use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One trainable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Tensor,
    pub v: Tensor,
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, ParamSlot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_named(named: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut store = Self::new();
        for (name, t) in named {
            store.insert(name, t)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Result<()> {
        if self.slots.contains_key(&name) {
            return Err(Error::contract("param_store", format!("duplicate parameter {name}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.slots.insert(
            name,
            ParamSlot {
                value,
                grad: None,
                m: zeros.clone(),
                v: zeros,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.get(name)
    }

    pub fn slots_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamSlot)> {
        self.slots.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamSlot)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Overwrites the gradient of `name`; the shape must match the value.
    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown parameter {name}")))?;
        slot.value.expect_same_shape(&grad, "param_store")?;
        slot.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_sorted() {
        let mut s = ParamStore::new();
        s.insert("b".into(), Tensor::zeros(&[1])).unwrap();
        s.insert("a".into(), Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a".into(), Tensor::zeros(&[2])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn grad_shape_checked() {
        let mut s = ParamStore::from_named([("w".to_string(), Tensor::zeros(&[2, 2]))]).unwrap();
        assert!(s.set_grad("w", Tensor::zeros(&[4])).is_err());
        assert!(s.set_grad("x", Tensor::zeros(&[2, 2])).is_err());
        s.set_grad("w", Tensor::zeros(&[2, 2])).unwrap();
    }
}
