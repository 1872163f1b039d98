//! Small fully connected networks.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Gradients, Graph, LeafKind, NodeId};
use crate::tensor::{Fnv, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Layer {
    /// `out x in`; row `o` holds the weights of output unit `o`.
    pub weight: Tensor,
    /// `1 x out`.
    pub bias: Tensor,
}

/// Affine layers separated by ReLU, with a configurable output activation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    output: Activation,
}

impl DenseNet {
    /// `dims = [in, hidden.., out]`. Weights are drawn from
    /// `U(-sqrt(6 / (fan_in + fan_out)), +sqrt(..))`, biases start at zero.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output: Activation, rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Tensor::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Self { layers, output }
    }

    pub fn zeros(dims: &[usize], output: Activation) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(w[1], w[0]),
                bias: Tensor::zeros(1, w[1]),
            })
            .collect();
        Self { layers, output }
    }

    pub fn from_layers(layers: Vec<Layer>, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("dense_net", "at least one layer is required"));
        }
        for (i, l) in layers.iter().enumerate() {
            l.bias.expect_shape([1, l.weight.rows()], "dense_net bias")?;
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(shape_err(
                    "dense_net",
                    format!("layer {i} expects {} inputs, previous emits {}", l.weight.cols(), layers[i - 1].weight.rows()),
                ));
            }
        }
        Ok(Self { layers, output })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// `[in, hidden.., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.layers.len() + 1);
        d.push(self.input_dim());
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    /// Parameters in a fixed order: weight and bias of each layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for p in self.params() {
            h.write_u64(p.checksum());
        }
        h.finish()
    }

    /// Records the parameters on `g`. `Parameter` makes them trainable,
    /// `Constant` freezes them for this graph.
    pub fn bind(&self, g: &mut Graph, kind: LeafKind) -> BoundNet {
        let layers = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone(), kind), g.leaf(l.bias.clone(), kind)))
            .collect();
        BoundNet {
            layers,
            output: self.output,
        }
    }

    /// Convenience forward pass outside any training graph.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, LeafKind::Constant);
        let xi = g.constant(x.clone());
        let y = bound.forward(&mut g, xi)?;
        Ok(g.value(y).clone())
    }

    /// Applies `p -= ...` style updates through an external optimizer.
    pub fn apply_step(&mut self, opt: &mut crate::optim::SgdMomentum, grads: &[Tensor]) -> Result<()> {
        opt.step(&mut self.params_mut(), grads)
    }
}

/// A network whose parameters live on a particular [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundNet {
    layers: Vec<(NodeId, NodeId)>,
    output: Activation,
}

impl BoundNet {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.affine(h, w, Some(b))?;
            h = if i == last {
                self.output.apply(g, h)?
            } else {
                g.relu(h)?
            };
        }
        Ok(h)
    }

    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Gradients in the same order as [`DenseNet::params`].
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.param_nodes()
            .into_iter()
            .map(|id| grads.get(id).cloned().expect("parameter leaves always get a gradient"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::new(&[10, 6], Activation::Identity, &mut rng);
        let limit = libm::sqrt(6.0 / 16.0);
        assert!(net.layers()[0].weight.data().iter().all(|w| w.abs() <= limit));
        assert!(net.layers()[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn from_layers_checks_chaining() {
        let l1 = Layer {
            weight: Tensor::zeros(3, 2),
            bias: Tensor::zeros(1, 3),
        };
        let l2 = Layer {
            weight: Tensor::zeros(1, 4),
            bias: Tensor::zeros(1, 1),
        };
        assert!(DenseNet::from_layers(alloc::vec![l1, l2], Activation::Identity).is_err());
    }

    #[test]
    fn sigmoid_output_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DenseNet::new(&[4, 8, 1], Activation::Sigmoid, &mut rng);
        let x = Tensor::from_rows(&[[1.0, -2.0, 0.5, 3.0], [0.0, 0.0, 0.0, 0.0]]).unwrap();
        let y = net.forward(&x).unwrap();
        assert!(y.data().iter().all(|&s| s > 0.0 && s < 1.0));
    }
}
