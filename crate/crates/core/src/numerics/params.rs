use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which pipeline component owns a parameter. Freezing is applied per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Teacher,
    Student,
    Projection,
    Decoder,
    Probe,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Teacher,
        ParamGroup::Student,
        ParamGroup::Projection,
        ParamGroup::Decoder,
        ParamGroup::Probe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Teacher => "teacher",
            ParamGroup::Student => "student",
            ParamGroup::Projection => "projection",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Probe => "probe",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<S>,
    pub frozen: bool,
}

/// Named parameters of a model; names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param {
            name,
            group,
            value,
            frozen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn group_frozen(&self, group: ParamGroup) -> bool {
        self.params.iter().filter(|p| p.group == group).all(|p| p.frozen)
    }

    pub fn num_scalars(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    /// Checks the uniqueness invariant (kept by `add`, re-checked after loads).
    pub fn names_unique(&self) -> bool {
        let mut seen = HashSet::new();
        self.params.iter().all(|p| seen.insert(p.name.as_str()))
    }

    /// Byte image of all parameters in `group`, for drift detection.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            out.extend_from_slice(p.name.as_bytes());
            for &x in p.value.data() {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        out
    }

    /// Copies every parameter of `group` from `src` (matched by name).
    pub fn copy_group_from(&mut self, src: &ParamStore<S>, group: ParamGroup) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            let id = src
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("source lacks parameter `{}`", p.name)))?;
            let v = &src.get(id).value;
            if v.shape() != p.value.shape() {
                return Err(Error::CheckpointMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: v.shape().to_vec(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }
}
