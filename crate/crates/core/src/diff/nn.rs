use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Layer widths of a multilayer perceptron, input first.
///
/// The activation is applied between linear layers, never after the last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = MlpSpec { dims, activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least one linear layer".into(),
            ));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "MLP widths must be positive, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.weight")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.bias")
    }

    /// Kaiming-uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`), zero biases.
    pub fn init<R: Rng>(&self, prefix: &str, store: &mut ParamStore, rng: &mut R) {
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            store.insert(
                Self::weight_name(prefix, l),
                kaiming_uniform(fan_in, fan_out, rng),
            );
            store.insert(Self::bias_name(prefix, l), Tensor::zeros(&[fan_out]));
        }
    }

    /// Applies the network to `x: [batch, input_dim]`.
    pub fn apply(&self, prefix: &str, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP '{prefix}' expects width {}, got {:?}",
                self.input_dim(),
                tape.value(x).shape()
            )));
        }
        let mut h = x;
        for l in 0..self.num_layers() {
            let w = tape.param(store, &Self::weight_name(prefix, l))?;
            let b = tape.param(store, &Self::bias_name(prefix, l))?;
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if l + 1 < self.num_layers() && self.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

pub fn kaiming_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let mut store = ParamStore::new();
        store.insert("m.0.weight", eye(2));
        store.insert("m.0.bias", Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = spec.apply("m", &mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias_rows() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu).unwrap();
        let mut store = ParamStore::new();
        store.insert("m.0.weight", Tensor::zeros(&[3, 2]));
        store.insert("m.0.bias", Tensor::vector(vec![0.5, -1.5]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap());
        let y = spec.apply("m", &mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn two_layer_relu_matches_hand_arithmetic() {
        // W0 = [[1, 2], [3, -1]], b0 = [0.5, 0]; x = [1, -1]
        // x W0 = [1 - 3, 2 + 1] = [-2, 3]; + b0 = [-1.5, 3]; relu -> [0, 3]
        // W1 = [[2, 1], [-1, 4]], b1 = [1, -1]; [0, 3] W1 = [-3, 12]; + b1 = [-2, 11]
        let spec = MlpSpec::new(vec![2, 2, 2], Activation::Relu).unwrap();
        let mut store = ParamStore::new();
        store.insert("m.0.weight", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, -1.0]).unwrap());
        store.insert("m.0.bias", Tensor::vector(vec![0.5, 0.0]));
        store.insert("m.1.weight", Tensor::matrix(2, 2, vec![2.0, 1.0, -1.0, 4.0]).unwrap());
        store.insert("m.1.bias", Tensor::vector(vec![1.0, -1.0]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let y = spec.apply("m", &mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[-2.0, 11.0]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let spec = MlpSpec::new(vec![3, 1], Activation::Relu).unwrap();
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        spec.init("m", &mut store, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        assert!(matches!(spec.apply("m", &mut tape, &store, x), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(MlpSpec::new(vec![4], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![4, 0, 1], Activation::Relu).is_err());
    }
}
