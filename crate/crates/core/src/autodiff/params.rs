use std::collections::HashMap;

use super::Arr;

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

/// Handle to a non-trainable state tensor (e.g. batch-norm running stats).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct BufId(pub(crate) usize);

/// Owns every model tensor. Parameters receive gradients and optimizer
/// updates; buffers are updated in-place by layers (running statistics) and
/// are checkpointed alongside the parameters.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<(String, Arr)>,
    buffers: Vec<(String, Arr)>,
    param_names: HashMap<String, usize>,
    buffer_names: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        assert!(
            !self.param_names.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.param_names.insert(name.clone(), id);
        self.params.push((name, value));
        ParamId(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Arr) -> BufId {
        let name = name.into();
        assert!(
            !self.buffer_names.contains_key(&name),
            "duplicate buffer name {name}"
        );
        let id = self.buffers.len();
        self.buffer_names.insert(name.clone(), id);
        self.buffers.push((name, value));
        BufId(id)
    }

    pub fn param(&self, id: ParamId) -> &Arr {
        &self.params[id.0].1
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.params[id.0].1
    }

    pub fn buffer(&self, id: BufId) -> &Arr {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufId) -> &mut Arr {
        &mut self.buffers[id.0].1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (ParamId, &str, &Arr)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (BufId, &str, &Arr)> {
        self.buffers
            .iter()
            .enumerate()
            .map(|(i, (n, v))| (BufId(i), n.as_str(), v))
    }

    /// Total number of scalar parameter entries.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).sum()
    }

    /// Replace a parameter value by name (checkpoint restore).
    pub fn set_param_by_name(&mut self, name: &str, value: Arr) -> Option<ParamId> {
        let &id = self.param_names.get(name)?;
        assert_eq!(
            self.params[id].1.shape(),
            value.shape(),
            "checkpoint shape mismatch for parameter {name}"
        );
        self.params[id].1 = value;
        Some(ParamId(id))
    }

    /// Replace a buffer value by name (checkpoint restore).
    pub fn set_buffer_by_name(&mut self, name: &str, value: Arr) -> Option<BufId> {
        let &id = self.buffer_names.get(name)?;
        assert_eq!(
            self.buffers[id].1.shape(),
            value.shape(),
            "checkpoint shape mismatch for buffer {name}"
        );
        self.buffers[id].1 = value;
        Some(BufId(id))
    }
}
