//! Named parameter collections with deterministic iteration order.

use indexmap::IndexMap;

use super::{Scalar, Tensor};

/// Ordered map of name -> tensor. Trainable parameters are the entries whose
/// tensors track gradients; batch-norm running statistics live here too as
/// plain buffers.
pub struct ParamSet<S: Scalar> {
    entries: IndexMap<String, Tensor<S>>,
}

/// Plain-data copy of a parameter set, safe to move across threads.
pub type ParamSnapshot<S> = Vec<(String, Vec<usize>, Vec<S>, bool)>;

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Tensor<S> {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.entries.insert(name, t.clone());
        t
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for t in self.entries.values() {
            t.zero_grad();
        }
    }

    pub fn snapshot(&self) -> ParamSnapshot<S> {
        self.entries
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.to_vec(), t.requires_grad()))
            .collect()
    }

    pub fn from_snapshot(snap: &ParamSnapshot<S>) -> Self {
        let mut set = ParamSet::new();
        for (name, shape, data, trainable) in snap {
            let t = if *trainable {
                Tensor::param(shape, data.clone())
            } else {
                Tensor::from_vec(shape, data.clone())
            };
            set.insert(name.clone(), t);
        }
        set
    }

    /// Overwrite values in place from a snapshot with identical layout.
    pub fn load_snapshot(&self, snap: &ParamSnapshot<S>) {
        assert_eq!(snap.len(), self.entries.len(), "snapshot layout mismatch");
        for (name, shape, data, _) in snap {
            let t = self.get(name);
            assert_eq!(t.shape(), shape.as_slice(), "snapshot shape mismatch for `{name}`");
            t.set_data(data.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_order_is_insertion_order() {
        let mut p = ParamSet::<f64>::new();
        p.insert("b", Tensor::zeros(&[1]));
        p.insert("a", Tensor::zeros(&[1]));
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b", "a"]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::zeros(&[1]));
        p.insert("w", Tensor::zeros(&[1]));
    }

    #[test]
    fn snapshot_roundtrip_preserves_values_and_trainability() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::param(&[2], vec![1.0, 2.0]));
        p.insert("stat", Tensor::from_vec(&[1], vec![5.0]));
        let snap = p.snapshot();
        let q = ParamSet::from_snapshot(&snap);
        assert_eq!(q.get("w").to_vec(), vec![1.0, 2.0]);
        assert!(q.get("w").requires_grad());
        assert!(!q.get("stat").requires_grad());
    }
}
