//! Named parameter storage and per-tape binding.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::lod::{self, SplitWeight};
use crate::tensor::Tensor;

const FROZEN_SUFFIX: &str = ".frozen";
const DELTA_SUFFIX: &str = ".delta";

#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    Dense(Tensor),
    Split(SplitWeight),
}

impl Param {
    /// The weight used in the forward pass.
    pub fn effective(&self) -> Tensor {
        match self {
            Param::Dense(t) => t.clone(),
            Param::Split(s) => lod::recompose(s),
        }
    }
}

/// Insertion-ordered parameter map. Order is part of determinism: it fixes
/// tape layout and checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Param::Dense(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    /// Effective value of a parameter.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        Ok(self.param(name)?.effective())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Replace a dense matrix by its frozen top-`r` part plus a trainable
    /// residual.
    pub fn split(&mut self, name: &str, residual_rank: usize) -> Result<()> {
        let p = self.param_mut(name)?;
        let Param::Dense(w) = p else {
            return Err(Error::contract(format!("`{name}` is already split")));
        };
        *p = Param::Split(lod::decompose(w, residual_rank)?);
        Ok(())
    }

    /// Storage keys and tensors, with split weights flattened to
    /// `name.frozen` / `name.delta`.
    pub fn storage(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, p) in &self.entries {
            match p {
                Param::Dense(t) => out.push((name.clone(), t)),
                Param::Split(s) => {
                    out.push((format!("{name}{FROZEN_SUFFIX}"), &s.frozen));
                    out.push((format!("{name}{DELTA_SUFFIX}"), &s.delta));
                }
            }
        }
        out
    }

    /// Inverse of [`ParamSet::storage`].
    pub fn from_storage(items: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = ParamSet::new();
        let mut it = items.into_iter().peekable();
        while let Some((key, t)) = it.next() {
            if let Some(base) = key.strip_suffix(FROZEN_SUFFIX) {
                let (dkey, delta) = it
                    .next()
                    .ok_or_else(|| Error::Checkpoint(format!("`{key}` without residual")))?;
                if dkey != format!("{base}{DELTA_SUFFIX}") {
                    return Err(Error::Checkpoint(format!("`{key}` followed by `{dkey}`")));
                }
                let split = SplitWeight::from_parts(t, delta)?;
                set.entries.insert(base.to_string(), Param::Split(split));
            } else {
                set.entries.insert(key, Param::Dense(t));
            }
        }
        Ok(set)
    }

    /// Mutable access to the tensor behind a storage key (the trainable part).
    pub fn storage_mut(&mut self, key: &str) -> Result<&mut Tensor> {
        let split_base = key
            .strip_suffix(DELTA_SUFFIX)
            .filter(|b| matches!(self.entries.get(*b), Some(Param::Split(_))));
        match (split_base, self.entries.get_mut(split_base.unwrap_or(key))) {
            (Some(_), Some(Param::Split(s))) => Ok(&mut s.delta),
            (None, Some(Param::Dense(t))) => Ok(t),
            _ => Err(Error::contract(format!("no trainable tensor `{key}`"))),
        }
    }

    /// Put every parameter on `tape`. Parameters for which `trainable`
    /// returns true become differentiable leaves; frozen split components
    /// are always constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let mut effective = HashMap::with_capacity(self.entries.len());
        let mut leaves = Vec::new();
        for (name, p) in &self.entries {
            let train = trainable(name);
            let var = match p {
                Param::Dense(t) => {
                    if train {
                        let v = tape.param(t.clone());
                        leaves.push((name.clone(), v));
                        v
                    } else {
                        tape.constant(t.clone())
                    }
                }
                Param::Split(s) => {
                    let frozen = tape.constant(s.frozen.clone());
                    let delta = if train {
                        let v = tape.param(s.delta.clone());
                        leaves.push((format!("{name}{DELTA_SUFFIX}"), v));
                        v
                    } else {
                        tape.constant(s.delta.clone())
                    };
                    tape.add(frozen, delta).expect("split parts share a shape")
                }
            };
            effective.insert(name.clone(), var);
        }
        Binding { effective, leaves }
    }
}

/// Parameters placed on one tape.
pub struct Binding {
    effective: HashMap<String, Var>,
    leaves: Vec<(String, Var)>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.effective
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not bound")))
    }

    /// Differentiable leaves keyed by storage key.
    pub fn leaves(&self) -> &[(String, Var)] {
        &self.leaves
    }

    /// Gradients for every trainable leaf, in binding order.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<(String, Tensor)> {
        self.leaves
            .iter()
            .map(|(k, v)| (k.clone(), grads.take(*v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storage_round_trip_with_split() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::from_fn(&[3, 3], |i| (i as f64).sin()));
        ps.insert("b", Tensor::scalar(2.0));
        ps.split("a", 1).unwrap();
        let keys: Vec<String> = ps.storage().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["a.frozen", "a.delta", "b"]);
        let owned = ps.storage().into_iter().map(|(k, t)| (k, t.clone())).collect();
        assert_eq!(ParamSet::from_storage(owned).unwrap(), ps);
    }

    #[test]
    fn frozen_part_never_becomes_a_leaf() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_fn(&[4, 4], |i| ((i * 7) % 5) as f64));
        ps.split("w", 2).unwrap();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape, |_| true);
        let keys: Vec<&str> = b.leaves().iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["w.delta"]);
        let w = b.get("w").unwrap();
        assert!(tape.value(w).max_abs_diff(&ps.get("w").unwrap()) == 0.0);
    }
}
