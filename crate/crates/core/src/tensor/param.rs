use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

/// A named, optionally trainable network weight.
///
/// The value lives in a leaf [`Tensor`]; an update swaps in a fresh leaf, so
/// graphs built from the previous value stay valid.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    pub trainable: bool,
    /// Included in the weight penalty of the training objective.
    pub decay: bool,
    /// Multiplies the optimizer learning rate for this parameter.
    pub lr_scale: f64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Ok(Self { name: name.into(), tensor: Tensor::leaf(shape, values, true)?, trainable: true, decay: true, lr_scale: 1.0 })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    /// Replace the value; the gradient is reset.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        let shape = self.tensor.shape().to_vec();
        self.tensor = Tensor::leaf(&shape, values, true)?;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owning registry: every parameter is registered exactly once, under a
/// unique name, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, param: Parameter) -> Result<ParamId> {
        if self.by_name.contains_key(param.name()) {
            return Err(TensorError::DuplicateParameter(param.name().to_string()));
        }
        let id = self.params.len();
        self.by_name.insert(param.name().to_string(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        self.params[id.0].tensor()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Parameter::zero_grad);
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.values().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::new();
        set.register(Parameter::new("fc.w", &[2], vec![0.0; 2]).unwrap()).unwrap();
        let err = set.register(Parameter::new("fc.w", &[1], vec![0.0]).unwrap()).unwrap_err();
        assert_eq!(err, TensorError::DuplicateParameter("fc.w".into()));
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn set_values_resets_gradient() {
        let mut p = Parameter::new("p", &[1], vec![1.0]).unwrap();
        crate::tensor::sum_squares(&[p.tensor()]).backward().unwrap();
        assert!(p.grad().is_some());
        p.set_values(vec![2.0]).unwrap();
        assert!(p.grad().is_none());
        assert_eq!(p.values(), &[2.0]);
    }
}
