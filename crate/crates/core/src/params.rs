//! Named parameter storage shared by the model, optimizer, and checkpoints.
//!
//! Parameters live outside any tape. Each forward pass binds them onto a
//! fresh tape through a [`Binder`], which records the (store slot, tape
//! var) pairing the optimizer later walks to apply gradients. Iteration
//! order is insertion order everywhere, so updates are reproducible.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef(pub(crate) usize);

#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamRef {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamRef(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel_total(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, r: ParamRef) -> &Tensor {
        &self.tensors[r.0]
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor {
        &mut self.tensors[r.0]
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn refs(&self) -> impl Iterator<Item = ParamRef> {
        (0..self.tensors.len()).map(ParamRef)
    }

    /// Replace every tensor from a name-keyed snapshot. Requires an exact
    /// match of names and shapes.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in entries {
            let Some(idx) = self.names.iter().position(|n| n == name) else {
                return Err(Error::Data(format!("unknown parameter {name:?} in snapshot")));
            };
            if self.tensors[idx].shape() != tensor.shape() {
                return Err(Error::Data(format!(
                    "parameter {name:?} has shape {:?}, snapshot has {:?}",
                    self.tensors[idx].shape(),
                    tensor.shape()
                )));
            }
            self.tensors[idx] = tensor.clone();
        }
        let missing: Vec<&String> = self
            .names
            .iter()
            .filter(|n| !entries.iter().any(|(en, _)| &en == n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("snapshot missing parameters {missing:?}")));
        }
        Ok(())
    }
}

/// Binds store parameters onto one tape, remembering the pairing.
pub struct Binder<'a> {
    pub tape: &'a mut Tape,
    source: Source<'a>,
    pub pairs: Vec<(ParamRef, Var)>,
}

enum Source<'a> {
    Store(&'a ParamStore),
    /// Pre-made tape vars, keyed by ref. Gradient checking binds module
    /// structures against externally perturbed tensors this way.
    Fixed(Vec<(ParamRef, Var)>),
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Binder { tape, source: Source::Store(store), pairs: Vec::new() }
    }

    pub fn from_vars(tape: &'a mut Tape, refs: &[ParamRef], vars: &[Var]) -> Self {
        assert_eq!(refs.len(), vars.len());
        let table = refs.iter().copied().zip(vars.iter().copied()).collect();
        Binder { tape, source: Source::Fixed(table), pairs: Vec::new() }
    }

    pub fn bind(&mut self, r: ParamRef) -> Var {
        let v = match &self.source {
            Source::Store(store) => self.tape.param(store.get(r).clone()),
            Source::Fixed(table) => {
                table
                    .iter()
                    .find(|(rf, _)| *rf == r)
                    .unwrap_or_else(|| panic!("no var bound for parameter slot {}", r.0))
                    .1
            }
        };
        self.pairs.push((r, v));
        v
    }
}
