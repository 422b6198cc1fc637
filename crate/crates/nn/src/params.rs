use indexmap::IndexMap;
use mixseg_core::{Error, Result};
use ndarray::{ArrayD, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let (idx, _) = self.entries.insert_full(name.into(), value);
        ParamId(idx)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.entries
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| Error::validation(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subtree(&self, prefix: &str) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { entries }
    }

    /// Overwrites every entry of `other` into `self`; names and shapes
    /// must already exist here.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in other.iter() {
            let slot = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::validation(format!("unexpected parameter {name}")))?;
            if slot.shape() != value.shape() {
                return Err(Error::validation(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            slot.assign(value);
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamGrads {
        ParamGrads {
            grads: self.entries.values().map(|v| ArrayD::zeros(IxDyn(v.shape()))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients aligned with a [`ParamStore`]'s order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<ArrayD<f64>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Sums per-sample gradients in slice order.
    pub fn sum(parts: &[ParamGrads]) -> Option<ParamGrads> {
        let (first, rest) = parts.split_first()?;
        let mut total = first.clone();
        for p in rest {
            total.add_assign(p);
        }
        Some(total)
    }
}
