//! Per-modality entity encoders.
//!
//! Graph structure goes through a two-layer, two-head graph attention
//! network over learnable entity embeddings (heads concatenated after layer
//! one, averaged after layer two, ELU between layers, LeakyReLU(0.2)
//! attention scoring). Every other modality is a single linear map from its
//! raw feature vector into the shared d-dimensional space.

use std::sync::Arc;

use tensor_core::rng::Prng;
use tensor_core::{Tape, Tensor};

use crate::error::{MmeaError, Result};
use crate::kg::Mmkg;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Dense symmetric adjacency with self-loops, used as the attention mask.
#[derive(Clone)]
pub struct Adjacency {
    pub n: usize,
    pub mask: Arc<Vec<bool>>,
}

impl Adjacency {
    /// Builds the mask from relation triples: edges are symmetrized and every
    /// entity gets a self-loop, so no attention row is empty.
    pub fn from_kg(kg: &Mmkg) -> Adjacency {
        let n = kg.entity_count();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        for &(h, _, t) in &kg.rel_triples {
            mask[h * n + t] = true;
            mask[t * n + h] = true;
        }
        Adjacency {
            n,
            mask: Arc::new(mask),
        }
    }
}

/// One attention head: a linear transform plus the two halves of the
/// additive scoring vector.
#[derive(Clone)]
pub struct GatHeadParams {
    pub weight: Tensor, // in_dim × out_dim
    pub attn_src: Tensor, // out_dim × 1
    pub attn_dst: Tensor, // out_dim × 1
}

#[derive(Clone)]
pub struct GatLayerParams {
    pub heads: Vec<GatHeadParams>,
}

/// Graph encoder parameters: a diagonal input transform and two attention
/// layers. Entity embeddings x^g live in the parameter store, not here.
#[derive(Clone)]
pub struct GatParams {
    pub input_diag: Tensor, // [d]
    pub layers: Vec<GatLayerParams>,
}

fn glorot(rng: &mut Prng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("glorot init")
}

impl GatParams {
    /// Two layers, two heads; `d` must be divisible by the head count.
    pub fn init(d: usize, heads: usize, rng: &mut Prng) -> Result<GatParams> {
        if !d.is_multiple_of(heads) {
            return Err(MmeaError::Config(format!(
                "hidden dim {d} not divisible by {heads} attention heads"
            )));
        }
        let head_dim = d / heads;
        let layer = |rng: &mut Prng, in_dim: usize, out_dim: usize, n_heads: usize| {
            GatLayerParams {
                heads: (0..n_heads)
                    .map(|_| GatHeadParams {
                        weight: glorot(rng, in_dim, out_dim),
                        attn_src: glorot(rng, out_dim, 1),
                        attn_dst: glorot(rng, out_dim, 1),
                    })
                    .collect(),
            }
        };
        Ok(GatParams {
            input_diag: Tensor::ones(&[d]),
            // layer 1 concatenates heads of d/H; layer 2 averages heads of d
            layers: vec![layer(rng, d, head_dim, heads), layer(rng, d, d, heads)],
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("gat.diag".to_string(), &self.input_diag)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("gat.l{l}.h{h}.w"), &head.weight));
                out.push((format!("gat.l{l}.h{h}.a_src"), &head.attn_src));
                out.push((format!("gat.l{l}.h{h}.a_dst"), &head.attn_dst));
            }
        }
        out
    }
}

fn gat_head(
    tape: &Tape,
    head: &GatHeadParams,
    adj: &Adjacency,
    x: &Tensor,
) -> Result<Tensor> {
    let z = tape.matmul(x, &head.weight)?;
    let s_src = tape.matmul(&z, &head.attn_src)?; // (n,1)
    let s_dst = tape.matmul(&z, &head.attn_dst)?; // (n,1)
    let base = Tensor::zeros(&[adj.n, adj.n]);
    let with_src = tape.add(&base, &s_src)?; // column broadcast
    let scores = tape.add(&with_src, &tape.transpose(&s_dst)?)?; // row broadcast
    let scored = tape.leaky_relu(&scores, LEAKY_SLOPE)?;
    let attn = tape.masked_softmax(&scored, &adj.mask)?;
    Ok(tape.matmul(&attn, &z)?)
}

/// Two-layer GAT over the adjacency. The diagonal transform applies to the
/// input embeddings before layer one.
pub fn gat_forward(
    tape: &Tape,
    params: &GatParams,
    adj: &Adjacency,
    x_g: &Tensor,
) -> Result<Tensor> {
    let (n, _) = x_g.rows_cols();
    if n != adj.n {
        return Err(MmeaError::Invalid(format!(
            "graph embeddings for {n} entities but adjacency of size {}",
            adj.n
        )));
    }
    let x = tape.mul(x_g, &params.input_diag)?;

    // layer 1: concat heads, ELU
    let outs: Vec<Tensor> = params.layers[0]
        .heads
        .iter()
        .map(|h| gat_head(tape, h, adj, &x))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = outs.iter().collect();
    let h1 = tape.elu(&tape.concat_cols(&refs)?)?;

    // layer 2: average heads
    let outs: Vec<Tensor> = params.layers[1]
        .heads
        .iter()
        .map(|h| gat_head(tape, h, adj, &h1))
        .collect::<Result<_>>()?;
    let mut acc = outs[0].clone();
    for o in &outs[1..] {
        acc = tape.add(&acc, o)?;
    }
    Ok(tape.scale(&acc, 1.0 / outs.len() as f64)?)
}

/// Linear encoder for one non-graph modality: h = x·W + b.
#[derive(Clone)]
pub struct ModalityEncoderParams {
    pub weight: Tensor, // d_m × d
    pub bias: Tensor,   // [d]
}

impl ModalityEncoderParams {
    pub fn init(input_dim: usize, d: usize, rng: &mut Prng) -> ModalityEncoderParams {
        ModalityEncoderParams {
            weight: glorot(rng, input_dim, d),
            bias: Tensor::zeros(&[d]),
        }
    }
}

pub fn modality_encode(
    tape: &Tape,
    params: &ModalityEncoderParams,
    x: &Tensor,
) -> Result<Tensor> {
    let projected = tape.matmul(x, &params.weight)?;
    Ok(tape.add(&projected, &params.bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Entity;

    fn kg_with_triples(n: usize, triples: Vec<(usize, usize, usize)>) -> Mmkg {
        Mmkg {
            entities: (0..n)
                .map(|i| Entity {
                    id: i as i64,
                    name: format!("e{i}"),
                })
                .collect(),
            relations: vec!["r".into()],
            attributes: vec![],
            rel_triples: triples,
            attr_assignments: vec![],
            visual: None,
            surface: None,
        }
    }

    #[test]
    fn single_node_attends_only_to_itself() {
        let kg = kg_with_triples(1, vec![]);
        let adj = Adjacency::from_kg(&kg);
        assert_eq!(adj.mask.as_ref(), &vec![true]);
        let tape = Tape::new();
        let x = Tensor::matrix(1, 4, vec![0.3, -0.1, 0.2, 0.9]).unwrap();
        let mut rng = Prng::new(3);
        let params = GatParams::init(4, 2, &mut rng).unwrap();
        // A singleton softmax row is exactly 1, so the head output equals z.
        let z = tape.matmul(&x, &params.layers[0].heads[0].weight).unwrap();
        let head = gat_head(&tape, &params.layers[0].heads[0], &adj, &x).unwrap();
        assert_eq!(head.data(), z.data());
    }

    #[test]
    fn mirrored_nodes_get_identical_embeddings() {
        // 0 and 1 share the neighbor 2 and the same input row.
        let kg = kg_with_triples(3, vec![(0, 0, 2), (1, 0, 2)]);
        let adj = Adjacency::from_kg(&kg);
        let mut rng = Prng::new(17);
        let params = GatParams::init(4, 2, &mut rng).unwrap();
        let row: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let other: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mut data = Vec::new();
        data.extend_from_slice(&row);
        data.extend_from_slice(&row);
        data.extend_from_slice(&other);
        let x = Tensor::matrix(3, 4, data).unwrap();
        let tape = Tape::new();
        let out = gat_forward(&tape, &params, &adj, &x).unwrap();
        assert_eq!(out.row_slice(0), out.row_slice(1));
    }

    #[test]
    fn gat_ignores_triple_order() {
        let a = kg_with_triples(4, vec![(0, 0, 1), (1, 0, 2), (2, 0, 3)]);
        let b = kg_with_triples(4, vec![(2, 0, 3), (0, 0, 1), (1, 0, 2)]);
        let mut rng = Prng::new(8);
        let params = GatParams::init(4, 2, &mut rng).unwrap();
        let x = Tensor::matrix(4, 4, (0..16).map(|_| rng.normal()).collect()).unwrap();
        let tape = Tape::new();
        let out_a = gat_forward(&tape, &params, &Adjacency::from_kg(&a), &x).unwrap();
        let out_b = gat_forward(&tape, &params, &Adjacency::from_kg(&b), &x).unwrap();
        assert_eq!(out_a.data(), out_b.data());
    }

    #[test]
    fn encoder_is_linear() {
        let tape = Tape::new();
        let mut rng = Prng::new(5);
        let params = ModalityEncoderParams::init(3, 4, &mut rng);
        let zero = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        let h = modality_encode(&tape, &params, &zero).unwrap();
        assert_eq!(h.data(), params.bias.data());

        let x = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let doubled = Tensor::matrix(1, 3, vec![1.0, -2.0, 4.0]).unwrap();
        let params_nobias = ModalityEncoderParams {
            weight: params.weight.clone(),
            bias: Tensor::zeros(&[4]),
        };
        let h1 = modality_encode(&tape, &params_nobias, &x).unwrap();
        let h2 = modality_encode(&tape, &params_nobias, &doubled).unwrap();
        for (a, b) in h1.data().iter().zip(h2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let tape = Tape::new();
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let params = ModalityEncoderParams {
            weight: eye,
            bias: Tensor::zeros(&[3]),
        };
        let x = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let h = modality_encode(&tape, &params, &x).unwrap();
        assert_eq!(h.data(), x.data());
    }
}
