//! The embedding function: a small multi-layer perceptron with tanh between
//! layers and a final l2 column normalization, differentiable end to end.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cycle::EmbeddingMatrix;
use crate::diffmath::{Graph, Matrix, NodeId};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Encoder {
    sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

impl Encoder {
    /// Layer sizes run input first, embedding dim last: [d_obs, hidden.., d].
    /// Weights start gaussian scaled by 1/sqrt(fan_in), biases at zero.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Param {
                op: "Encoder::new",
                detail: "need at least input and output sizes".into(),
            });
        }
        if sizes.contains(&0) {
            return Err(Error::Param {
                op: "Encoder::new",
                detail: format!("zero layer size in {sizes:?}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            weights.push(Matrix::from_fn(fan_out, fan_in, |_, _| {
                scale * (rng.random_range(-1.0..1.0_f64) * 1.732)
            }));
            biases.push(Matrix::zeros(fan_out, 1));
        }
        Ok(Encoder { sizes: sizes.to_vec(), weights, biases })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Parameters in a fixed order: w0, b0, w1, b1, ...
    pub fn params(&self) -> Vec<&Matrix> {
        self.weights.iter().zip(self.biases.iter()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w as &mut Matrix, b as &mut Matrix])
            .collect()
    }

    pub fn set_params(&mut self, values: &[Matrix]) -> Result<()> {
        let mut params = self.params_mut();
        if values.len() != params.len() {
            return Err(Error::Param {
                op: "set_params",
                detail: format!("expected {} matrices, got {}", params.len(), values.len()),
            });
        }
        for (slot, value) in params.iter_mut().zip(values.iter()) {
            if slot.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "set_params",
                    detail: format!("{:?} vs {:?}", slot.shape(), value.shape()),
                });
            }
            **slot = value.clone();
        }
        Ok(())
    }

    /// Registers the current parameter values on a graph.
    pub fn bind(&self, graph: &mut Graph) -> BoundEncoder {
        let layers = self
            .weights
            .iter()
            .zip(self.biases.iter())
            .map(|(w, b)| (graph.leaf(w.clone()), graph.leaf(b.clone())))
            .collect();
        BoundEncoder { layers, input_dim: self.input_dim() }
    }

    /// Value-only forward pass through a scratch graph, for evaluation.
    pub fn embed(&self, obs: &Matrix) -> Result<Matrix> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let out = bound.encode(&mut graph, obs)?;
        Ok(graph.value(out.node()).clone())
    }
}

/// Encoder parameters registered on one graph, ready to encode batches.
pub struct BoundEncoder {
    layers: Vec<(NodeId, NodeId)>,
    input_dim: usize,
}

impl BoundEncoder {
    /// Forward pass over a d_obs x n observation matrix: affine + tanh per
    /// hidden layer, affine for the last, then column normalization.
    pub fn encode(&self, graph: &mut Graph, obs: &Matrix) -> Result<EmbeddingMatrix> {
        if obs.rows() != self.input_dim {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("observations have {} rows, encoder expects {}", obs.rows(), self.input_dim),
            });
        }
        let mut h = graph.leaf(obs.clone());
        let last = self.layers.len() - 1;
        for (idx, &(w, b)) in self.layers.iter().enumerate() {
            let lin = graph.matmul(w, h)?;
            h = graph.add_col_vector(lin, b)?;
            if idx != last {
                h = graph.tanh(h);
            }
        }
        EmbeddingMatrix::normalized(graph, h)
    }

    /// Parameter nodes in the same order as [`Encoder::params`].
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn output_columns_are_unit_norm() {
        let enc = Encoder::new(&[8, 12, 4], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs = Matrix::from_fn(8, 6, |_, _| rng.random_range(-1.0..1.0));
        let out = enc.embed(&obs).unwrap();
        for j in 0..6 {
            assert!((out.column_norm(j) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_encoder_with_identity_weights_normalizes_inputs() {
        let mut enc = Encoder::new(&[3, 3], 0).unwrap();
        enc.set_params(&[Matrix::identity(3), Matrix::zeros(3, 1)]).unwrap();
        let obs = Matrix::from_columns(&[vec![3.0, 4.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let out = enc.embed(&obs).unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((out.get(1, 0) - 0.8).abs() < 1e-12);
        assert!((out.get(2, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_wrong_input_dim() {
        let enc = Encoder::new(&[8, 4], 0).unwrap();
        let mut g = Graph::new();
        let bound = enc.bind(&mut g);
        assert!(bound.encode(&mut g, &Matrix::zeros(5, 2)).is_err());
    }

    #[test]
    fn loss_through_encoder_matches_finite_differences() {
        // Check the gradient wrt one weight matrix with everything else fixed.
        use crate::cycle::{cycle_association_forward, EmbeddingMatrix, LossConfig};
        let enc = Encoder::new(&[6, 5, 4], 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let obs1 = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let obs2 = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let w0 = enc.params()[0].clone();
        let err = crate::diffmath::check_builder(
            |g, w| {
                let mut params: Vec<NodeId> =
                    enc.params().iter().map(|m| g.leaf((*m).clone())).collect();
                params[0] = w;
                let bound = BoundEncoder {
                    layers: vec![(params[0], params[1]), (params[2], params[3])],
                    input_dim: 6,
                };
                let x1 = bound.encode(g, &obs1)?;
                let x2 = bound.encode(g, &obs2)?;
                let x2 = EmbeddingMatrix::from_unit_node(g, x2.node())?;
                Ok(cycle_association_forward(g, x1, x2, &LossConfig::default())?.loss)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn deterministic_init() {
        let a = Encoder::new(&[4, 3], 9).unwrap();
        let b = Encoder::new(&[4, 3], 9).unwrap();
        assert_eq!(a.params()[0].data(), b.params()[0].data());
    }
}
