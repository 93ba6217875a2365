//! Named parameters with a frozen/trainable partition.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    /// Dotted path, e.g. `denoise.enc0.attn.tsfa.wk_prime`.
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Accumulated gradient; same shape as `value` when present.
    pub grad: Option<Tensor>,
}

/// Owning collection of every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            bail!(Config, "duplicate parameter name `{}`", name);
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, trainable, grad: None });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Sets the trainable flag on every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, trainable: bool, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if pred(&p.name) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient buffer. Frozen parameters are ignored.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        debug_assert_eq!(p.value.shape(), grad.shape());
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
    }

    /// Bit-level FNV-1a checksum of one parameter's value.
    pub fn checksum(&self, id: ParamId) -> u64 {
        checksum_f32(self.params[id.0].value.data())
    }

    /// Checksums of every parameter, keyed by name.
    pub fn checksums(&self) -> BTreeMap<String, u64> {
        self.params.iter().map(|p| (p.name.clone(), checksum_f32(p.value.data()))).collect()
    }

    /// Copies values from `other` for every name present in both stores.
    /// Shapes must agree. Returns the number of copied tensors.
    pub fn load_values_from(&mut self, other: &ParamStore, rename: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            let Some(src_name) = rename(&p.name) else { continue };
            if let Some(src) = other.by_name(&src_name) {
                if src.value.shape() != p.value.shape() {
                    bail!(
                        Dimension,
                        "`{}` has shape {:?} but source `{}` has {:?}",
                        p.name,
                        p.value.shape(),
                        src_name,
                        src.value.shape()
                    );
                }
                p.value = src.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

pub fn checksum_f32(data: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in data {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
