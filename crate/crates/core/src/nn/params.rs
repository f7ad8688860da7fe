use rand::Rng;

use super::{Graph, Scalar, Tensor, Var};

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Registers every tensor as a graph parameter, in order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }

    /// Adds the graph gradients of `vars` (from [`ParamSet::bind`]) into the
    /// tensors' gradient buffers, scaled by `scale`.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var], scale: T) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if t.grad.is_none() {
                t.zero_grad();
            }
            if let Some(src) = g.grad(v) {
                let dst = t.grad.as_mut().unwrap();
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s * scale);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds another set's gradients (same layout) into this one.
    pub fn add_grads(&mut self, other: &ParamSet<T>) {
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            if let Some(og) = &o.grad {
                if t.grad.is_none() {
                    t.zero_grad();
                }
                t.grad.as_mut().unwrap().iter_mut().zip(og).for_each(|(d, &s)| *d += s);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copies values (not gradients) from a set with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> bool {
        if self.names != other.names {
            return false;
        }
        if self
            .tensors
            .iter()
            .zip(&other.tensors)
            .any(|(a, b)| a.shape() != b.shape())
        {
            return false;
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data_mut().copy_from_slice(b.data());
        }
        true
    }
}

/// He-uniform initialization for layers followed by a (leaky) ReLU with
/// negative slope `a`: `U(-b, b)`, `b = sqrt(6 / ((1 + a²) fan_in))`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, a: f64, rng: &mut R) -> Tensor<f32> {
    let bound = (6.0 / ((1.0 + a * a) * fan_in.max(1) as f64)).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::from_vec(shape, data)
}
