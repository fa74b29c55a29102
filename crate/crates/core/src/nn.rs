//! Small layers shared by the molecule and mixture models.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{glorot, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map `x·W + b` on the rows of a matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.add(&weight, glorot(fan_in, fan_out, rng), group)?;
        store.add(&bias, Tensor::zeros(&[fan_out]), group)?;
        Ok(Linear { weight, bias: Some(bias), fan_in, fan_out })
    }

    pub fn no_bias<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.add(&weight, glorot(fan_in, fan_out, rng), group)?;
        Ok(Linear { weight, bias: None, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Hardtanh,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Hardtanh => "hardtanh",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Hardtanh => g.hardtanh(x, -1.0, 1.0),
            Activation::LeakyRelu => g.leaky_relu(x, 0.2),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, "g", &mut rng).unwrap();
        store.get_mut("l.bias").unwrap().value = Tensor::new(&[2], vec![0.1, -0.2]).unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.7).sin());
        let r = check_gradients(&store, &[x], GradCheckOptions::default(), |g, s, v| lin.forward(g, s, v[0]))
            .unwrap();
        assert!(r.passes(1e-4), "{}", r.worst);
    }
}
