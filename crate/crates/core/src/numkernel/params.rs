use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use super::KernelError;

/// Index of a parameter inside a [`ParamRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors with matching gradient buffers.
///
/// Names are module paths such as `backbone.block0.feat.attn.wq`; insertion
/// order is preserved and defines [`ParamId`]s.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId, KernelError> {
        if self.by_name.contains_key(name) {
            return Err(KernelError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a tensor drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId, KernelError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn register_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId, KernelError> {
        self.register(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Euclidean norm of all gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces the value of an existing parameter by name, checking shape.
    pub fn load_value(&mut self, name: &str, value: Tensor) -> Result<(), KernelError> {
        let id = self
            .id(name)
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(KernelError::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut reg = ParamRegistry::new();
        reg.register_const("a", &[2], 1.0).unwrap();
        assert!(matches!(
            reg.register_const("a", &[2], 1.0),
            Err(KernelError::DuplicateParam(_))
        ));
        assert_eq!(reg.numel(), 2);
    }

    #[test]
    fn load_value_checks_shape() {
        let mut reg = ParamRegistry::new();
        reg.register_const("w", &[2, 2], 0.0).unwrap();
        assert!(reg.load_value("w", Tensor::zeros(&[4])).is_err());
        assert!(reg.load_value("w", Tensor::full(&[2, 2], 3.0)).is_ok());
        assert!(reg.load_value("nope", Tensor::zeros(&[1])).is_err());
    }
}
