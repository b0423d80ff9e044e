//! Multiplex attentional graph network: alternating self-/cross-attention
//! layers with residual MLP updates, producing the matching descriptors.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::nn::{self, LinearParams, NormParams, ParamBinder};

/// Which keypoints a layer aggregates from: the same image or the other one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeType {
    SelfEdges,
    CrossEdges,
}

/// Parameters of one attention layer: query/key/value projections, the
/// multi-head merge projection, and the residual update MLP (2D -> 2D -> D).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub merge: LinearParams,
    pub mlp_hidden: LinearParams,
    pub mlp_hidden_norm: Option<NormParams>,
    pub mlp_out: LinearParams,
}

impl LayerParams {
    pub fn init(dim: usize, normalize: bool, rng: &mut ChaCha12Rng) -> Self {
        Self {
            query: nn::glorot_uniform(rng, dim, dim),
            key: nn::glorot_uniform(rng, dim, dim),
            value: nn::glorot_uniform(rng, dim, dim),
            merge: nn::glorot_uniform(rng, dim, dim),
            mlp_hidden: nn::glorot_uniform(rng, 2 * dim, 2 * dim),
            mlp_hidden_norm: normalize.then(|| NormParams::identity(2 * dim)),
            mlp_out: nn::glorot_uniform(rng, 2 * dim, dim),
        }
    }
}

/// Full graph-network parameters: the alternating layer stack plus the final
/// linear projection shared by both images.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub layers: Vec<LayerParams>,
    pub edge_types: Vec<EdgeType>,
    pub final_proj: LinearParams,
    pub heads: usize,
}

impl GnnParams {
    /// `rounds` counts self/cross pairs: the stack holds `2 * rounds`
    /// attention layers, self first, alternating.
    pub fn init(
        dim: usize,
        rounds: usize,
        heads: usize,
        cross_attention: bool,
        normalize: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidInput(format!(
                "head count {heads} must divide descriptor width {dim}"
            )));
        }
        let n_layers = 2 * rounds;
        let layers = (0..n_layers).map(|_| LayerParams::init(dim, normalize, rng)).collect();
        let edge_types = (0..n_layers)
            .map(|l| {
                if cross_attention && l % 2 == 1 {
                    EdgeType::CrossEdges
                } else {
                    EdgeType::SelfEdges
                }
            })
            .collect();
        Ok(Self { layers, edge_types, final_proj: nn::glorot_uniform(rng, dim, dim), heads })
    }
}

/// Tape handles for one bound layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub query: (VarId, VarId),
    pub key: (VarId, VarId),
    pub value: (VarId, VarId),
    pub merge: (VarId, VarId),
    pub mlp_hidden: (VarId, VarId),
    pub mlp_hidden_norm: Option<(VarId, VarId)>,
    pub mlp_out: (VarId, VarId),
}

#[derive(Debug)]
pub struct BoundGnn {
    pub layers: Vec<BoundLayer>,
    pub edge_types: Vec<EdgeType>,
    pub final_proj: (VarId, VarId),
    pub heads: usize,
    pub scaled_attention: bool,
}

pub(crate) fn bind_gnn_with(
    tape: &mut Tape,
    params: &GnnParams,
    scaled_attention: bool,
    prefix: &str,
    binder: &mut dyn ParamBinder,
) -> Result<BoundGnn> {
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let bind_linear = |tape: &mut Tape, binder: &mut dyn ParamBinder, name: &str, p: &LinearParams| -> Result<(VarId, VarId)> {
            Ok((
                binder.bind(tape, format!("{prefix}.layer{l}.{name}.weight"), &p.weight)?,
                binder.bind(tape, format!("{prefix}.layer{l}.{name}.bias"), &p.bias)?,
            ))
        };
        let query = bind_linear(tape, binder, "q", &layer.query)?;
        let key = bind_linear(tape, binder, "k", &layer.key)?;
        let value = bind_linear(tape, binder, "v", &layer.value)?;
        let merge = bind_linear(tape, binder, "merge", &layer.merge)?;
        let mlp_hidden = bind_linear(tape, binder, "mlp.0", &layer.mlp_hidden)?;
        let mlp_hidden_norm = match &layer.mlp_hidden_norm {
            Some(n) => Some((
                binder.bind(tape, format!("{prefix}.layer{l}.mlp.0.norm.scale"), &n.scale)?,
                binder.bind(tape, format!("{prefix}.layer{l}.mlp.0.norm.shift"), &n.shift)?,
            )),
            None => None,
        };
        let mlp_out = bind_linear(tape, binder, "mlp.1", &layer.mlp_out)?;
        layers.push(BoundLayer { query, key, value, merge, mlp_hidden, mlp_hidden_norm, mlp_out });
    }
    let final_proj = (
        binder.bind(tape, format!("{prefix}.final.weight"), &params.final_proj.weight)?,
        binder.bind(tape, format!("{prefix}.final.bias"), &params.final_proj.bias)?,
    );
    Ok(BoundGnn {
        layers,
        edge_types: params.edge_types.clone(),
        final_proj,
        heads: params.heads,
        scaled_attention,
    })
}

pub fn bind_gnn(tape: &mut Tape, params: &GnnParams, scaled_attention: bool, prefix: &str) -> Result<BoundGnn> {
    bind_gnn_with(tape, params, scaled_attention, prefix, &mut crate::nn::LeafBinder)
}

/// Softmax attention: each query row attends over all source rows.
///
/// Returns the aggregated messages and the row-stochastic weight matrix.
pub fn attention_aggregate(
    tape: &mut Tape,
    queries: VarId,
    keys: VarId,
    values: VarId,
    scaled: bool,
) -> Result<(VarId, VarId)> {
    let n_s = tape.value(keys).rows();
    if n_s == 0 {
        return Err(Error::InvalidInput("attention over zero source keypoints".into()));
    }
    if tape.value(values).rows() != n_s {
        return Err(Error::ShapeMismatch {
            op: "attention_aggregate",
            detail: format!("{} keys vs {} values", n_s, tape.value(values).rows()),
        });
    }
    let kt = tape.transpose(keys)?;
    let mut scores = tape.matmul(queries, kt)?;
    if scaled {
        let dim = tape.value(queries).cols();
        scores = tape.scale(scores, 1.0 / (dim as f64).sqrt())?;
    }
    let weights = tape.softmax_rows(scores)?;
    let messages = tape.matmul(weights, values)?;
    Ok((messages, weights))
}

/// Multi-head attention per the layer projections: project, attend per head
/// on width `D / heads` slices, concatenate, and merge.
///
/// Returns messages and the per-head attention weights.
pub fn multi_head_attention(
    tape: &mut Tape,
    states_q: VarId,
    states_s: VarId,
    layer: &BoundLayer,
    heads: usize,
    scaled: bool,
) -> Result<(VarId, Vec<Tensor>)> {
    let dim = tape.value(states_q).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidInput(format!("head count {heads} must divide width {dim}")));
    }
    let q = nn::linear(tape, states_q, layer.query.0, layer.query.1)?;
    let k = nn::linear(tape, states_s, layer.key.0, layer.key.1)?;
    let v = nn::linear(tape, states_s, layer.value.0, layer.value.1)?;

    let head_dim = dim / heads;
    let mut merged: Option<VarId> = None;
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let (mh, wh) = attention_aggregate(tape, qh, kh, vh, scaled)?;
        weights.push(tape.value(wh).clone());
        merged = Some(match merged {
            None => mh,
            Some(acc) => tape.concat_cols(acc, mh)?,
        });
    }
    let merged = merged.ok_or_else(|| Error::InvalidInput("zero attention heads".into()))?;
    let out = nn::linear(tape, merged, layer.merge.0, layer.merge.1)?;
    Ok((out, weights))
}

/// Node states for both images at one depth.
#[derive(Debug, Clone, Copy)]
pub struct NodeStates {
    pub states_a: VarId,
    pub states_b: VarId,
}

/// Attention weights recorded for one layer: per-head matrices for queries
/// from each image.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub edge_type: EdgeType,
    /// Per head: `M x n_s` weights for image-A queries.
    pub weights_a: Vec<Tensor>,
    /// Per head: `N x n_s` weights for image-B queries.
    pub weights_b: Vec<Tensor>,
}

pub type AttentionRecord = Vec<LayerAttention>;

/// One residual message-passing update, applied to both images with shared
/// weights: `new = old + MLP([old || message])`.
pub fn layer_update(
    tape: &mut Tape,
    states: NodeStates,
    layer: &BoundLayer,
    edge_type: EdgeType,
    heads: usize,
    scaled: bool,
) -> Result<(NodeStates, LayerAttention)> {
    let (src_a, src_b) = match edge_type {
        EdgeType::SelfEdges => (states.states_a, states.states_b),
        EdgeType::CrossEdges => (states.states_b, states.states_a),
    };
    let (msg_a, weights_a) = multi_head_attention(tape, states.states_a, src_a, layer, heads, scaled)?;
    let (msg_b, weights_b) = multi_head_attention(tape, states.states_b, src_b, layer, heads, scaled)?;

    let update = |tape: &mut Tape, x: VarId, m: VarId| -> Result<VarId> {
        let cat = tape.concat_cols(x, m)?;
        let mut hidden = nn::linear(tape, cat, layer.mlp_hidden.0, layer.mlp_hidden.1)?;
        if let Some((scale, shift)) = layer.mlp_hidden_norm {
            hidden = nn::feature_norm(tape, hidden, scale, shift)?;
        }
        let hidden = tape.relu(hidden)?;
        let delta = nn::linear(tape, hidden, layer.mlp_out.0, layer.mlp_out.1)?;
        tape.add(x, delta)
    };
    let new_a = update(tape, states.states_a, msg_a)?;
    let new_b = update(tape, states.states_b, msg_b)?;
    Ok((
        NodeStates { states_a: new_a, states_b: new_b },
        LayerAttention { edge_type, weights_a, weights_b },
    ))
}

/// Run the full alternating stack and the shared final projection.
pub fn gnn_forward(
    tape: &mut Tape,
    initial: NodeStates,
    gnn: &BoundGnn,
    record_attention: bool,
) -> Result<(VarId, VarId, Option<AttentionRecord>)> {
    let mut states = initial;
    let mut record = record_attention.then(Vec::new);
    for (layer, edge_type) in gnn.layers.iter().zip(&gnn.edge_types) {
        let (next, attention) =
            layer_update(tape, states, layer, *edge_type, gnn.heads, gnn.scaled_attention)?;
        states = next;
        if let Some(rec) = &mut record {
            rec.push(attention);
        }
    }
    let f_a = nn::linear(tape, states.states_a, gnn.final_proj.0, gnn.final_proj.1)?;
    let f_b = nn::linear(tape, states.states_b, gnn.final_proj.0, gnn.final_proj.1)?;
    Ok((f_a, f_b, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    fn attention_value(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone()).unwrap();
        let kv = tape.constant(k.clone()).unwrap();
        let vv = tape.constant(v.clone()).unwrap();
        let (m, w) = attention_aggregate(&mut tape, qv, kv, vv, false).unwrap();
        (tape.value(m).clone(), tape.value(w).clone())
    }

    #[test]
    fn single_source_gets_weight_one() {
        let mut rng = stream_rng(1, &[0]);
        let q = random_tensor(&mut rng, 3, 4);
        let k = random_tensor(&mut rng, 1, 4);
        let v = random_tensor(&mut rng, 1, 4);
        let (m, w) = attention_value(&q, &k, &v);
        for i in 0..3 {
            assert_relative_eq!(w.at(i, 0), 1.0);
            for c in 0..4 {
                assert_relative_eq!(m.at(i, c), v.at(0, c));
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = stream_rng(1, &[1]);
        let q = random_tensor(&mut rng, 2, 4);
        let key_row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = Tensor::from_rows(&[key_row.clone(), key_row.clone(), key_row]).unwrap();
        let v = random_tensor(&mut rng, 3, 4);
        let (m, w) = attention_value(&q, &k, &v);
        for i in 0..2 {
            for j in 0..3 {
                assert_relative_eq!(w.at(i, j), 1.0 / 3.0, max_relative = 1e-12);
            }
            for c in 0..4 {
                let mean = (v.at(0, c) + v.at(1, c) + v.at(2, c)) / 3.0;
                assert_relative_eq!(m.at(i, c), mean, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_double_loop_oracle() {
        let mut rng = stream_rng(1, &[2]);
        let q = random_tensor(&mut rng, 5, 8);
        let k = random_tensor(&mut rng, 6, 8);
        let v = random_tensor(&mut rng, 6, 8);
        let (m, w) = attention_value(&q, &k, &v);

        for i in 0..5 {
            let logits: Vec<f64> = (0..6)
                .map(|j| (0..8).map(|d| q.at(i, d) * k.at(j, d)).sum())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..6 {
                assert_relative_eq!(w.at(i, j), exps[j] / sum, max_relative = 1e-12);
            }
            for d in 0..8 {
                let expect: f64 = (0..6).map(|j| exps[j] / sum * v.at(j, d)).sum();
                assert_relative_eq!(m.at(i, d), expect, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn zero_sources_is_an_error() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(2, 4)).unwrap();
        let k = tape.constant(Tensor::zeros(0, 4)).unwrap();
        let v = tape.constant(Tensor::zeros(0, 4)).unwrap();
        assert!(attention_aggregate(&mut tape, q, k, v, false).is_err());
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut rng = stream_rng(1, &[3]);
        for _ in 0..20 {
            let q = random_tensor(&mut rng, 4, 6);
            let k = random_tensor(&mut rng, 5, 6);
            let v = random_tensor(&mut rng, 5, 6);
            let (_, w) = attention_value(&q, &k, &v);
            for i in 0..4 {
                let sum: f64 = (0..5).map(|j| w.at(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!((0..5).all(|j| w.at(i, j) >= 0.0));
            }
        }
    }

    fn bind_single_layer(tape: &mut Tape, layer: &LayerParams) -> BoundLayer {
        let params = GnnParams {
            layers: vec![layer.clone()],
            edge_types: vec![EdgeType::SelfEdges],
            final_proj: LinearParams::zeros(layer.query.fan_in(), layer.query.fan_in()),
            heads: 1,
        };
        bind_gnn(tape, &params, false, "gnn").unwrap().layers[0]
    }

    #[test]
    fn one_head_with_identity_merge_reduces_to_plain_attention() {
        let mut rng = stream_rng(2, &[0]);
        let dim = 6;
        let mut layer = LayerParams::init(dim, false, &mut rng);
        layer.merge = LinearParams { weight: Tensor::identity(dim), bias: Tensor::zeros(1, dim) };
        let xq = random_tensor(&mut rng, 4, dim);
        let xs = random_tensor(&mut rng, 5, dim);

        let mut tape = Tape::new();
        let q_in = tape.constant(xq.clone()).unwrap();
        let s_in = tape.constant(xs.clone()).unwrap();
        let bound = bind_single_layer(&mut tape, &layer);
        let (m, _) = multi_head_attention(&mut tape, q_in, s_in, &bound, 1, false).unwrap();
        let got = tape.value(m).clone();

        // projections per the layer definition, then single-head attention
        let apply_linear = |x: &Tensor, p: &LinearParams| -> Tensor {
            let mut out = Tensor::zeros(x.rows(), p.fan_out());
            for i in 0..x.rows() {
                for j in 0..p.fan_out() {
                    let mut acc = p.bias.at(0, j);
                    for k in 0..x.cols() {
                        acc += x.at(i, k) * p.weight.at(k, j);
                    }
                    out.set(i, j, acc);
                }
            }
            out
        };
        let (q, k, v) = (apply_linear(&xq, &layer.query), apply_linear(&xs, &layer.key), apply_linear(&xs, &layer.value));
        let (expected, _) = attention_value(&q, &k, &v);
        for i in 0..4 {
            for c in 0..dim {
                assert_relative_eq!(got.at(i, c), expected.at(i, c), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn two_heads_match_per_head_oracle() {
        let mut rng = stream_rng(2, &[1]);
        let dim = 8;
        let layer = LayerParams::init(dim, false, &mut rng);
        let xq = random_tensor(&mut rng, 3, dim);
        let xs = random_tensor(&mut rng, 4, dim);

        let mut tape = Tape::new();
        let q_in = tape.constant(xq.clone()).unwrap();
        let s_in = tape.constant(xs.clone()).unwrap();
        let bound = bind_single_layer(&mut tape, &layer);
        let (m, _) = multi_head_attention(&mut tape, q_in, s_in, &bound, 2, false).unwrap();
        let got = tape.value(m).clone();

        let apply_linear = |x: &Tensor, p: &LinearParams| -> Tensor {
            let mut out = Tensor::zeros(x.rows(), p.fan_out());
            for i in 0..x.rows() {
                for j in 0..p.fan_out() {
                    let mut acc = p.bias.at(0, j);
                    for k in 0..x.cols() {
                        acc += x.at(i, k) * p.weight.at(k, j);
                    }
                    out.set(i, j, acc);
                }
            }
            out
        };
        let slice = |x: &Tensor, lo: usize, hi: usize| -> Tensor {
            let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row_slice(i)[lo..hi].to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let (q, k, v) = (apply_linear(&xq, &layer.query), apply_linear(&xs, &layer.key), apply_linear(&xs, &layer.value));
        let (m0, _) = attention_value(&slice(&q, 0, 4), &slice(&k, 0, 4), &slice(&v, 0, 4));
        let (m1, _) = attention_value(&slice(&q, 4, 8), &slice(&k, 4, 8), &slice(&v, 4, 8));
        let concat = {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|i| {
                    let mut r = m0.row_slice(i).to_vec();
                    r.extend_from_slice(m1.row_slice(i));
                    r
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let expected = apply_linear(&concat, &layer.merge);
        for i in 0..3 {
            for c in 0..dim {
                assert_relative_eq!(got.at(i, c), expected.at(i, c), max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn head_divisibility_violation_is_an_error() {
        let mut rng = stream_rng(2, &[2]);
        assert!(GnnParams::init(6, 1, 4, true, true, &mut rng).is_err());
        assert!(GnnParams::init(8, 1, 4, true, true, &mut rng).is_ok());
    }

    #[test]
    fn zero_update_mlp_is_pure_residual() {
        let mut rng = stream_rng(2, &[3]);
        let dim = 4;
        let mut layer = LayerParams::init(dim, true, &mut rng);
        layer.mlp_out = LinearParams::zeros(2 * dim, dim);

        let xa = random_tensor(&mut rng, 3, dim);
        let xb = random_tensor(&mut rng, 5, dim);
        let mut tape = Tape::new();
        let a = tape.constant(xa.clone()).unwrap();
        let b = tape.constant(xb.clone()).unwrap();
        let bound = bind_single_layer(&mut tape, &layer);
        let (next, _) = layer_update(
            &mut tape,
            NodeStates { states_a: a, states_b: b },
            &bound,
            EdgeType::CrossEdges,
            2,
            false,
        )
        .unwrap();
        assert_eq!(tape.value(next.states_a), &xa);
        assert_eq!(tape.value(next.states_b), &xb);
    }

    #[test]
    fn cross_layer_swapping_images_swaps_outputs() {
        let mut rng = stream_rng(2, &[4]);
        let dim = 4;
        let layer = LayerParams::init(dim, true, &mut rng);
        let xa = random_tensor(&mut rng, 3, dim);
        let xb = random_tensor(&mut rng, 5, dim);

        let run = |first: &Tensor, second: &Tensor| -> (Tensor, Tensor) {
            let mut tape = Tape::new();
            let a = tape.constant(first.clone()).unwrap();
            let b = tape.constant(second.clone()).unwrap();
            let bound = bind_single_layer(&mut tape, &layer);
            let (next, _) = layer_update(
                &mut tape,
                NodeStates { states_a: a, states_b: b },
                &bound,
                EdgeType::CrossEdges,
                2,
                false,
            )
            .unwrap();
            (tape.value(next.states_a).clone(), tape.value(next.states_b).clone())
        };
        let (fa, fb) = run(&xa, &xb);
        let (ga, gb) = run(&xb, &xa);
        assert_eq!(fa, gb);
        assert_eq!(fb, ga);
    }

    #[test]
    fn self_layer_on_identical_inputs_gives_identical_outputs() {
        let mut rng = stream_rng(2, &[5]);
        let dim = 4;
        let layer = LayerParams::init(dim, true, &mut rng);
        let x = random_tensor(&mut rng, 4, dim);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone()).unwrap();
        let b = tape.constant(x.clone()).unwrap();
        let bound = bind_single_layer(&mut tape, &layer);
        let (next, _) = layer_update(
            &mut tape,
            NodeStates { states_a: a, states_b: b },
            &bound,
            EdgeType::SelfEdges,
            2,
            false,
        )
        .unwrap();
        assert_eq!(tape.value(next.states_a), tape.value(next.states_b));
    }

    #[test]
    fn zero_layers_is_final_projection_only() {
        let mut rng = stream_rng(2, &[6]);
        let dim = 4;
        let params = GnnParams::init(dim, 0, 2, true, true, &mut rng).unwrap();
        let xa = random_tensor(&mut rng, 3, dim);
        let xb = random_tensor(&mut rng, 2, dim);
        let mut tape = Tape::new();
        let a = tape.constant(xa.clone()).unwrap();
        let b = tape.constant(xb.clone()).unwrap();
        let bound = bind_gnn(&mut tape, &params, false, "gnn").unwrap();
        let (fa, _fb, record) =
            gnn_forward(&mut tape, NodeStates { states_a: a, states_b: b }, &bound, false).unwrap();
        assert!(record.is_none());

        let w = &params.final_proj.weight;
        for i in 0..3 {
            for j in 0..dim {
                let mut acc = params.final_proj.bias.at(0, j);
                for k in 0..dim {
                    acc += xa.at(i, k) * w.at(k, j);
                }
                assert_relative_eq!(tape.value(fa).at(i, j), acc, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_keypoint_permutation_equivariant() {
        let mut rng = stream_rng(2, &[7]);
        let dim = 8;
        let params = GnnParams::init(dim, 2, 2, true, true, &mut rng).unwrap();
        let xa = random_tensor(&mut rng, 5, dim);
        let xb = random_tensor(&mut rng, 4, dim);

        let run = |a_in: &Tensor, b_in: &Tensor| -> (Tensor, Tensor) {
            let mut tape = Tape::new();
            let a = tape.constant(a_in.clone()).unwrap();
            let b = tape.constant(b_in.clone()).unwrap();
            let bound = bind_gnn(&mut tape, &params, false, "gnn").unwrap();
            let (fa, fb, _) =
                gnn_forward(&mut tape, NodeStates { states_a: a, states_b: b }, &bound, false).unwrap();
            (tape.value(fa).clone(), tape.value(fb).clone())
        };

        let perm = [4usize, 2, 0, 3, 1];
        let permute = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row_slice(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let (fa, fb) = run(&xa, &xb);
        let (fa_p, fb_p) = run(&permute(&xa), &xb);
        // row permutation reassociates softmax and normalization sums
        for (a, b) in fb_p.data().iter().zip(fb.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-11, max_relative = 1e-11);
        }
        let fa_expect = permute(&fa);
        for i in 0..5 {
            for c in 0..dim {
                assert_relative_eq!(fa_p.at(i, c), fa_expect.at(i, c), epsilon = 1e-11, max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn two_layer_gradients_pass_finite_difference_check() {
        use crate::autodiff::check_gradient;
        use std::collections::BTreeMap;

        let mut rng = stream_rng(2, &[8]);
        let dim = 4;
        let params = GnnParams::init(dim, 1, 2, true, true, &mut rng).unwrap();
        let xa = random_tensor(&mut rng, 3, dim);
        let xb = random_tensor(&mut rng, 2, dim);

        let mut point: Vec<(String, Tensor)> = Vec::new();
        for (l, layer) in params.layers.iter().enumerate() {
            for (name, p) in [
                ("q", &layer.query),
                ("k", &layer.key),
                ("v", &layer.value),
                ("merge", &layer.merge),
                ("mlp.0", &layer.mlp_hidden),
                ("mlp.1", &layer.mlp_out),
            ] {
                point.push((format!("gnn.layer{l}.{name}.weight"), p.weight.clone()));
                point.push((format!("gnn.layer{l}.{name}.bias"), p.bias.clone()));
            }
            if let Some(norm) = &layer.mlp_hidden_norm {
                point.push((format!("gnn.layer{l}.mlp.0.norm.scale"), norm.scale.clone()));
                point.push((format!("gnn.layer{l}.mlp.0.norm.shift"), norm.shift.clone()));
            }
        }
        point.push(("gnn.final.weight".into(), params.final_proj.weight.clone()));
        point.push(("gnn.final.bias".into(), params.final_proj.bias.clone()));

        let edge_types = params.edge_types.clone();
        let n_layers = params.layers.len();
        let f = move |tape: &mut Tape, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
            let a = tape.constant(xa.clone())?;
            let b = tape.constant(xb.clone())?;
            let layers: Vec<BoundLayer> = (0..n_layers)
                .map(|l| BoundLayer {
                    query: (ids[&format!("gnn.layer{l}.q.weight")], ids[&format!("gnn.layer{l}.q.bias")]),
                    key: (ids[&format!("gnn.layer{l}.k.weight")], ids[&format!("gnn.layer{l}.k.bias")]),
                    value: (ids[&format!("gnn.layer{l}.v.weight")], ids[&format!("gnn.layer{l}.v.bias")]),
                    merge: (
                        ids[&format!("gnn.layer{l}.merge.weight")],
                        ids[&format!("gnn.layer{l}.merge.bias")],
                    ),
                    mlp_hidden: (
                        ids[&format!("gnn.layer{l}.mlp.0.weight")],
                        ids[&format!("gnn.layer{l}.mlp.0.bias")],
                    ),
                    mlp_hidden_norm: Some((
                        ids[&format!("gnn.layer{l}.mlp.0.norm.scale")],
                        ids[&format!("gnn.layer{l}.mlp.0.norm.shift")],
                    )),
                    mlp_out: (
                        ids[&format!("gnn.layer{l}.mlp.1.weight")],
                        ids[&format!("gnn.layer{l}.mlp.1.bias")],
                    ),
                })
                .collect();
            let bound = BoundGnn {
                layers,
                edge_types: edge_types.clone(),
                final_proj: (ids["gnn.final.weight"], ids["gnn.final.bias"]),
                heads: 2,
                scaled_attention: false,
            };
            let (fa, fb, _) =
                gnn_forward(tape, NodeStates { states_a: a, states_b: b }, &bound, false)?;
            let sq_a = tape.mul(fa, fa)?;
            let sa = tape.sum_all(sq_a)?;
            let sq_b = tape.mul(fb, fb)?;
            let sb = tape.sum_all(sq_b)?;
            tape.add(sa, sb)
        };
        let report = check_gradient(&f, &point, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "max rel error {}", report.max_rel_error);
    }
}
