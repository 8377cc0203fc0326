//! Named parameter storage shared by layers, the optimizer, and checkpoints.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::Scalar;

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Scalar> {
    pub value: ArrayD<F>,
    /// Frozen entries (and buffers such as batch-norm running statistics)
    /// never receive gradients or optimizer updates.
    pub trainable: bool,
    pub adam_m: ArrayD<F>,
    pub adam_v: ArrayD<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>, trainable: bool) {
        let name = name.into();
        let shape = value.raw_dim();
        let prev = self.entries.insert(
            name.clone(),
            ParamEntry {
                value,
                trainable,
                adam_m: ArrayD::zeros(shape.clone()),
                adam_v: ArrayD::zeros(shape),
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn value(&self, name: &str) -> &ArrayD<F> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn set_value(&mut self, name: &str, value: ArrayD<F>) {
        let entry =
            self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(entry.value.shape(), value.shape(), "shape change on {name}");
        entry.value = value;
    }

    pub fn entry_mut(&mut self, name: &str) -> &mut ParamEntry<F> {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<F>)> {
        self.entries.iter()
    }

    /// Parameter values as `f32` in canonical (sorted) order.
    pub fn snapshot_f32(&self) -> BTreeMap<String, ArrayD<f32>> {
        self.entries
            .iter()
            .map(|(name, entry)| {
                (name.clone(), entry.value.mapv(|v| v.into_f64() as f32))
            })
            .collect()
    }

    /// Restore values from a checkpoint snapshot; names and shapes must match
    /// entries that already exist (optimizer state is reset).
    pub fn load_snapshot_f32(
        &mut self,
        snapshot: &BTreeMap<String, ArrayD<f32>>,
    ) -> crate::error::Result<()> {
        for (name, value) in snapshot {
            let entry = self.entries.get_mut(name).ok_or_else(|| {
                crate::error::Error::data(format!("checkpoint parameter {name} not in model"))
            })?;
            if entry.value.shape() != value.shape() {
                return Err(crate::error::Error::data(format!(
                    "checkpoint parameter {name}: shape {:?} vs model {:?}",
                    value.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = value.mapv(|v| F::of_f64(f64::from(v)));
            entry.adam_m = ArrayD::zeros(entry.value.raw_dim());
            entry.adam_v = ArrayD::zeros(entry.value.raw_dim());
        }
        Ok(())
    }
}
