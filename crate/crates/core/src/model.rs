//! Whole-model bundling: configuration, parameter initialization, the naming
//! schema shared with the checkpoint format, and the end-to-end forward pass
//! from local features to a soft assignment.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, VarId};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::features::{normalize_keypoints, validate_feature_set, LocalFeatureSet};
use crate::gnn::{self, AttentionRecord, GnnParams, NodeStates};
use crate::matcher::{self, MatchSet, PartialAssignment};

/// Architecture variants used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoder, alternating self/cross attention, optimal matching.
    Full,
    /// The graph network is replaced by the single final linear projection;
    /// keypoint encoder and matching layer are retained.
    NoGnn,
    /// Every cross-attention layer becomes self-attention (same parameter
    /// count as the full model).
    NoCross,
    /// The keypoint encoder is removed; descriptors alone seed the network.
    NoPositional,
}

/// Model hyperparameters. `layers` counts self/cross rounds, so the
/// attention stack holds `2 * layers` layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub descriptor_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub sinkhorn_iterations: usize,
    pub variant: Variant,
    pub match_threshold: f64,
    /// Per-set feature normalization inside the MLPs.
    #[serde(default = "default_true")]
    pub normalize_mlp: bool,
    /// Scale attention logits by 1/sqrt(head width). Off by default: plain
    /// dot-product logits.
    #[serde(default)]
    pub scaled_attention: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Desk-scale preset: trains in minutes on a CPU. Plain MLPs: per-set
    /// normalization couples keypoints through the encoder and converges
    /// several times slower at this scale.
    pub fn desk() -> Self {
        Self {
            descriptor_dim: 32,
            layers: 3,
            heads: 4,
            sinkhorn_iterations: 50,
            variant: Variant::Full,
            match_threshold: matcher::DEFAULT_MATCH_THRESHOLD,
            normalize_mlp: false,
            scaled_attention: false,
        }
    }

    /// Reference configuration: 256-wide descriptors, 9 self/cross rounds,
    /// 4 heads, 100 Sinkhorn iterations.
    pub fn reference() -> Self {
        Self {
            descriptor_dim: 256,
            layers: 9,
            heads: 4,
            sinkhorn_iterations: 100,
            variant: Variant::Full,
            match_threshold: matcher::DEFAULT_MATCH_THRESHOLD,
            normalize_mlp: true,
            scaled_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim == 0 {
            return Err(Error::InvalidInput("descriptor_dim must be positive".into()));
        }
        if self.heads == 0 || self.descriptor_dim % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "head count {} must divide descriptor width {}",
                self.heads, self.descriptor_dim
            )));
        }
        if self.sinkhorn_iterations == 0 {
            return Err(Error::InvalidInput("sinkhorn_iterations must be positive".into()));
        }
        if !self.match_threshold.is_finite() || self.match_threshold < 0.0 {
            return Err(Error::InvalidInput(format!(
                "match threshold {} must be finite and non-negative",
                self.match_threshold
            )));
        }
        Ok(())
    }
}

/// Every learnable tensor of the matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Absent for the no-positional variant.
    pub encoder: Option<EncoderParams>,
    pub gnn: GnnParams,
    /// Dustbin score `z`, stored as a 1x1 tensor.
    pub dustbin: Tensor,
}

/// Config plus parameters: the unit that is trained, checkpointed, and run.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Initial dustbin score. A positive start biases early training toward the
/// dustbin, stabilizing the loss on unmatched points.
pub const DUSTBIN_INIT: f64 = 1.0;

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream_rng(seed, &[0x6d6f64656c]);
        let encoder = match config.variant {
            Variant::NoPositional => None,
            _ => Some(EncoderParams::init(config.descriptor_dim, config.normalize_mlp, &mut rng)),
        };
        let rounds = match config.variant {
            Variant::NoGnn => 0,
            _ => config.layers,
        };
        let cross = config.variant != Variant::NoCross;
        let gnn = GnnParams::init(
            config.descriptor_dim,
            rounds,
            config.heads,
            cross,
            config.normalize_mlp,
            &mut rng,
        )?;
        let params = ModelParams { encoder, gnn, dustbin: Tensor::scalar(DUSTBIN_INIT) };
        Ok(Self { config, params })
    }

    /// Named tensors in schema order (`encoder.mlp.0.weight`,
    /// `gnn.layer3.q.weight`, `matcher.z`, ...). The same order is used for
    /// binding, checkpoints, and optimizer state.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(enc) = &self.params.encoder {
            for (i, layer) in enc.layers.iter().enumerate() {
                out.push((format!("encoder.mlp.{i}.weight"), &layer.linear.weight));
                out.push((format!("encoder.mlp.{i}.bias"), &layer.linear.bias));
                if let Some(norm) = &layer.norm {
                    out.push((format!("encoder.mlp.{i}.norm.scale"), &norm.scale));
                    out.push((format!("encoder.mlp.{i}.norm.shift"), &norm.shift));
                }
            }
        }
        for (l, layer) in self.params.gnn.layers.iter().enumerate() {
            for (name, p) in [
                ("q", &layer.query),
                ("k", &layer.key),
                ("v", &layer.value),
                ("merge", &layer.merge),
                ("mlp.0", &layer.mlp_hidden),
            ] {
                out.push((format!("gnn.layer{l}.{name}.weight"), &p.weight));
                out.push((format!("gnn.layer{l}.{name}.bias"), &p.bias));
            }
            if let Some(norm) = &layer.mlp_hidden_norm {
                out.push((format!("gnn.layer{l}.mlp.0.norm.scale"), &norm.scale));
                out.push((format!("gnn.layer{l}.mlp.0.norm.shift"), &norm.shift));
            }
            out.push((format!("gnn.layer{l}.mlp.1.weight"), &layer.mlp_out.weight));
            out.push((format!("gnn.layer{l}.mlp.1.bias"), &layer.mlp_out.bias));
        }
        out.push(("gnn.final.weight".into(), &self.params.gnn.final_proj.weight));
        out.push(("gnn.final.bias".into(), &self.params.gnn.final_proj.bias));
        out.push(("matcher.z".into(), &self.params.dustbin));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(enc) = &mut self.params.encoder {
            for (i, layer) in enc.layers.iter_mut().enumerate() {
                out.push((format!("encoder.mlp.{i}.weight"), &mut layer.linear.weight));
                out.push((format!("encoder.mlp.{i}.bias"), &mut layer.linear.bias));
                if let Some(norm) = &mut layer.norm {
                    out.push((format!("encoder.mlp.{i}.norm.scale"), &mut norm.scale));
                    out.push((format!("encoder.mlp.{i}.norm.shift"), &mut norm.shift));
                }
            }
        }
        for (l, layer) in self.params.gnn.layers.iter_mut().enumerate() {
            out.push((format!("gnn.layer{l}.q.weight"), &mut layer.query.weight));
            out.push((format!("gnn.layer{l}.q.bias"), &mut layer.query.bias));
            out.push((format!("gnn.layer{l}.k.weight"), &mut layer.key.weight));
            out.push((format!("gnn.layer{l}.k.bias"), &mut layer.key.bias));
            out.push((format!("gnn.layer{l}.v.weight"), &mut layer.value.weight));
            out.push((format!("gnn.layer{l}.v.bias"), &mut layer.value.bias));
            out.push((format!("gnn.layer{l}.merge.weight"), &mut layer.merge.weight));
            out.push((format!("gnn.layer{l}.merge.bias"), &mut layer.merge.bias));
            out.push((format!("gnn.layer{l}.mlp.0.weight"), &mut layer.mlp_hidden.weight));
            out.push((format!("gnn.layer{l}.mlp.0.bias"), &mut layer.mlp_hidden.bias));
            if let Some(norm) = &mut layer.mlp_hidden_norm {
                out.push((format!("gnn.layer{l}.mlp.0.norm.scale"), &mut norm.scale));
                out.push((format!("gnn.layer{l}.mlp.0.norm.shift"), &mut norm.shift));
            }
            out.push((format!("gnn.layer{l}.mlp.1.weight"), &mut layer.mlp_out.weight));
            out.push((format!("gnn.layer{l}.mlp.1.bias"), &mut layer.mlp_out.bias));
        }
        out.push(("gnn.final.weight".into(), &mut self.params.gnn.final_proj.weight));
        out.push(("gnn.final.bias".into(), &mut self.params.gnn.final_proj.bias));
        out.push(("matcher.z".into(), &mut self.params.dustbin));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Full forward pass producing the soft assignment and hard matches.
    pub fn forward(
        &self,
        features_a: &LocalFeatureSet,
        features_b: &LocalFeatureSet,
        record_attention: bool,
    ) -> Result<MatchOutput> {
        let mut tape = Tape::new();
        let fwd = forward_on_tape(&mut tape, self, features_a, features_b, record_attention)?;
        let assignment = PartialAssignment {
            p_bar: tape.value(fwd.assignment).clone(),
            log_p_bar: tape.value(fwd.log_assignment).clone(),
        };
        let matches = matcher::extract_matches(&assignment, self.config.match_threshold);
        Ok(MatchOutput { assignment, matches, attention: fwd.attention })
    }
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Debug)]
pub struct TapeForward {
    pub log_assignment: VarId,
    pub assignment: VarId,
    pub attention: Option<AttentionRecord>,
}

/// Forward-pass artifacts at value level.
#[derive(Debug)]
pub struct MatchOutput {
    pub assignment: PartialAssignment,
    pub matches: MatchSet,
    pub attention: Option<AttentionRecord>,
}

fn check_features(model: &Model, set: &LocalFeatureSet, side: &str) -> Result<()> {
    let violations = validate_feature_set(set);
    if !violations.is_empty() {
        return Err(Error::InvalidInput(format!(
            "feature set {side} invalid: {} (and {} more)",
            violations[0],
            violations.len() - 1
        )));
    }
    if set.is_empty() {
        return Err(Error::InvalidInput(format!("feature set {side} has no keypoints")));
    }
    if set.descriptor_dim() != model.config.descriptor_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            detail: format!(
                "feature set {side} has descriptor width {} but the model expects {}",
                set.descriptor_dim(),
                model.config.descriptor_dim
            ),
        });
    }
    Ok(())
}

/// Record the whole matcher forward on `tape`, binding every parameter as a
/// named leaf so a backward pass yields gradients for all of them.
pub fn forward_on_tape(
    tape: &mut Tape,
    model: &Model,
    features_a: &LocalFeatureSet,
    features_b: &LocalFeatureSet,
    record_attention: bool,
) -> Result<TapeForward> {
    forward_with_binder(tape, model, features_a, features_b, record_attention, &mut crate::nn::LeafBinder)
}

/// Forward pass resolving parameters against leaves someone else bound (the
/// gradient-check harness binds them from its probe point).
pub fn forward_with_bound_leaves(
    tape: &mut Tape,
    model: &Model,
    features_a: &LocalFeatureSet,
    features_b: &LocalFeatureSet,
    record_attention: bool,
    leaves: &std::collections::BTreeMap<String, VarId>,
) -> Result<TapeForward> {
    forward_with_binder(
        tape,
        model,
        features_a,
        features_b,
        record_attention,
        &mut crate::nn::LookupBinder(leaves),
    )
}

/// First block: keypoint encoder plus the attentional graph network,
/// yielding the matching descriptors for both images.
fn gnn_stage(
    tape: &mut Tape,
    model: &Model,
    features_a: &LocalFeatureSet,
    features_b: &LocalFeatureSet,
    record_attention: bool,
    binder: &mut dyn crate::nn::ParamBinder,
) -> Result<(VarId, VarId, Option<AttentionRecord>)> {
    check_features(model, features_a, "A")?;
    check_features(model, features_b, "B")?;

    let desc_a = tape.constant(features_a.descriptors.clone())?;
    let desc_b = tape.constant(features_b.descriptors.clone())?;

    let initial = match &model.params.encoder {
        Some(enc_params) => {
            let pos_a = tape.constant(normalize_keypoints(features_a)?)?;
            let pos_b = tape.constant(normalize_keypoints(features_b)?)?;
            let bound = encoder::bind_encoder_with(tape, enc_params, "encoder", binder)?;
            NodeStates {
                states_a: encoder::encode_keypoints(tape, pos_a, desc_a, &bound)?,
                states_b: encoder::encode_keypoints(tape, pos_b, desc_b, &bound)?,
            }
        }
        None => NodeStates { states_a: desc_a, states_b: desc_b },
    };

    let bound_gnn = gnn::bind_gnn_with(tape, &model.params.gnn, model.config.scaled_attention, "gnn", binder)?;
    gnn::gnn_forward(tape, initial, &bound_gnn, record_attention)
}

/// Second block: score matrix, dustbin augmentation, and Sinkhorn.
fn matching_stage(
    tape: &mut Tape,
    model: &Model,
    f_a: VarId,
    f_b: VarId,
    binder: &mut dyn crate::nn::ParamBinder,
) -> Result<matcher::SinkhornVars> {
    let scores = matcher::compute_scores_on_tape(tape, f_a, f_b)?;
    let z = binder.bind(tape, "matcher.z".into(), &model.params.dustbin)?;
    let s_bar = matcher::augment_on_tape(tape, scores, z)?;
    matcher::sinkhorn_on_tape(tape, s_bar, model.config.sinkhorn_iterations)
}

fn forward_with_binder(
    tape: &mut Tape,
    model: &Model,
    features_a: &LocalFeatureSet,
    features_b: &LocalFeatureSet,
    record_attention: bool,
    binder: &mut dyn crate::nn::ParamBinder,
) -> Result<TapeForward> {
    let (f_a, f_b, attention) = gnn_stage(tape, model, features_a, features_b, record_attention, binder)?;
    let sk = matching_stage(tape, model, f_a, f_b, binder)?;
    Ok(TapeForward {
        log_assignment: sk.log_assignment,
        assignment: sk.assignment,
        attention,
    })
}

/// Wall time of the two major blocks of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StageTimings {
    pub gnn_seconds: f64,
    pub matching_seconds: f64,
}

impl Model {
    /// Forward pass with per-block wall-time measurement.
    pub fn forward_timed(
        &self,
        features_a: &LocalFeatureSet,
        features_b: &LocalFeatureSet,
    ) -> Result<(MatchOutput, StageTimings)> {
        let mut tape = Tape::new();
        let mut binder = crate::nn::LeafBinder;
        let t0 = std::time::Instant::now();
        let (f_a, f_b, attention) = gnn_stage(&mut tape, self, features_a, features_b, false, &mut binder)?;
        let gnn_seconds = t0.elapsed().as_secs_f64();
        let t1 = std::time::Instant::now();
        let sk = matching_stage(&mut tape, self, f_a, f_b, &mut binder)?;
        let assignment = PartialAssignment {
            p_bar: tape.value(sk.assignment).clone(),
            log_p_bar: tape.value(sk.log_assignment).clone(),
        };
        let matches = matcher::extract_matches(&assignment, self.config.match_threshold);
        let matching_seconds = t1.elapsed().as_secs_f64();
        Ok((
            MatchOutput { assignment, matches, attention },
            StageTimings { gnn_seconds, matching_seconds },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Keypoint;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn tiny_features(seed: u64, count: usize, dim: usize) -> LocalFeatureSet {
        let mut rng = stream_rng(seed, &[50]);
        let keypoints = (0..count)
            .map(|_| {
                Keypoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0), rng.random_range(0.0..1.0))
            })
            .collect();
        let data = (0..count * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        LocalFeatureSet::new((640.0, 480.0), keypoints, Tensor::matrix(count, dim, data).unwrap())
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            descriptor_dim: 8,
            layers: 1,
            heads: 2,
            sinkhorn_iterations: 10,
            variant: Variant::Full,
            match_threshold: 0.2,
            normalize_mlp: true,
            scaled_attention: false,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let m1 = Model::init(tiny_config(), 5).unwrap();
        let m2 = Model::init(tiny_config(), 5).unwrap();
        assert_eq!(m1, m2);
        let m3 = Model::init(tiny_config(), 6).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn named_tensor_views_agree() {
        let mut model = Model::init(tiny_config(), 1).unwrap();
        let names: Vec<String> = model.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> = model.named_tensors_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"encoder.mlp.0.weight".to_string()));
        assert!(names.contains(&"gnn.layer1.q.weight".to_string()));
        assert!(names.contains(&"matcher.z".to_string()));
        // schema names are unique
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn variants_change_the_parameter_layout() {
        let full = Model::init(tiny_config(), 1).unwrap();
        let no_gnn = Model::init(ModelConfig { variant: Variant::NoGnn, ..tiny_config() }, 1).unwrap();
        let no_pos = Model::init(ModelConfig { variant: Variant::NoPositional, ..tiny_config() }, 1).unwrap();
        let no_cross = Model::init(ModelConfig { variant: Variant::NoCross, ..tiny_config() }, 1).unwrap();

        assert!(no_gnn.params.gnn.layers.is_empty());
        assert!(no_gnn.params.encoder.is_some());
        assert!(no_pos.params.encoder.is_none());
        assert_eq!(no_cross.param_count(), full.param_count());
        assert!(no_cross
            .params
            .gnn
            .edge_types
            .iter()
            .all(|e| *e == gnn::EdgeType::SelfEdges));
        assert_eq!(
            full.params.gnn.edge_types,
            vec![gnn::EdgeType::SelfEdges, gnn::EdgeType::CrossEdges]
        );
    }

    #[test]
    fn forward_produces_valid_assignment() {
        let model = Model::init(tiny_config(), 2).unwrap();
        let a = tiny_features(1, 5, 8);
        let b = tiny_features(2, 7, 8);
        let out = model.forward(&a, &b, false).unwrap();
        assert_eq!(out.assignment.p_bar.shape(), &[6, 8]);
        // one marginal is exact by construction; the other measures
        // convergence and is loose at ten iterations
        assert!(out.assignment.row_residual().min(out.assignment.col_residual()) < 1e-9);
        assert!(out.assignment.row_residual().max(out.assignment.col_residual()) < 1.0);
        for m in &out.matches.matches {
            assert!(m.confidence > 0.0 && m.confidence <= 1.0);
        }
    }

    #[test]
    fn descriptor_width_mismatch_names_both_widths() {
        let model = Model::init(tiny_config(), 2).unwrap();
        let a = tiny_features(1, 5, 8);
        let b = tiny_features(2, 4, 6);
        let err = model.forward(&a, &b, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('6') && msg.contains('8'), "{msg}");
    }

    #[test]
    fn empty_feature_set_is_rejected() {
        let model = Model::init(tiny_config(), 2).unwrap();
        let a = tiny_features(1, 5, 8);
        let empty = LocalFeatureSet::new((640.0, 480.0), vec![], Tensor::zeros(0, 8));
        assert!(model.forward(&a, &empty, false).is_err());
        assert!(model.forward(&empty, &a, false).is_err());
    }

    #[test]
    fn attention_recording_covers_every_layer() {
        let model = Model::init(tiny_config(), 2).unwrap();
        let a = tiny_features(1, 5, 8);
        let b = tiny_features(2, 7, 8);
        let out = model.forward(&a, &b, true).unwrap();
        let record = out.attention.unwrap();
        assert_eq!(record.len(), 2);
        assert_eq!(record[0].weights_a.len(), 2); // heads
        assert_eq!(record[0].weights_a[0].shape(), &[5, 5]); // self layer
        assert_eq!(record[1].weights_a[0].shape(), &[5, 7]); // cross layer
        assert_eq!(record[1].weights_b[0].shape(), &[7, 5]);
    }

    #[test]
    fn no_positional_variant_ignores_keypoint_positions() {
        let config = ModelConfig { variant: Variant::NoPositional, ..tiny_config() };
        let model = Model::init(config, 3).unwrap();
        let a = tiny_features(1, 5, 8);
        let b = tiny_features(2, 7, 8);
        let mut moved = a.clone();
        for kp in &mut moved.keypoints {
            kp.x = (kp.x + 100.0) % 640.0;
            kp.y = (kp.y + 50.0) % 480.0;
        }
        let out1 = model.forward(&a, &b, false).unwrap();
        let out2 = model.forward(&moved, &b, false).unwrap();
        assert_eq!(out1.assignment.p_bar, out2.assignment.p_bar);
    }
}
