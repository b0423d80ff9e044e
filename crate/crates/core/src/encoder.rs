//! Keypoint encoder: a position MLP added onto the visual descriptor to form
//! the initial node state of the graph network.

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::nn::{self, LinearParams, NormParams, ParamBinder};

/// Hidden widths of the position MLP; the final layer maps to the descriptor
/// width.
pub const ENCODER_HIDDEN: [usize; 4] = [32, 64, 128, 256];

/// Input width: normalized x, y plus detection confidence.
pub const ENCODER_INPUT: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub linear: LinearParams,
    /// Present on hidden layers when feature normalization is enabled.
    pub norm: Option<NormParams>,
}

/// Position-MLP parameters, widths `3 -> 32 -> 64 -> 128 -> 256 -> D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderParams {
    pub fn init(descriptor_dim: usize, normalize: bool, rng: &mut ChaCha12Rng) -> Self {
        let mut widths = vec![ENCODER_INPUT];
        widths.extend_from_slice(&ENCODER_HIDDEN);
        widths.push(descriptor_dim);
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|i| EncoderLayer {
                linear: nn::glorot_uniform(rng, widths[i], widths[i + 1]),
                norm: (normalize && i + 1 < n_layers).then(|| NormParams::identity(widths[i + 1])),
            })
            .collect();
        Self { layers }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.linear.fan_out())
    }
}

/// Handles to encoder parameters bound on a tape.
pub struct BoundEncoder {
    pub layers: Vec<(VarId, VarId, Option<(VarId, VarId)>)>,
}

pub(crate) fn bind_encoder_with(
    tape: &mut Tape,
    params: &EncoderParams,
    prefix: &str,
    binder: &mut dyn ParamBinder,
) -> Result<BoundEncoder> {
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let w = binder.bind(tape, format!("{prefix}.mlp.{i}.weight"), &layer.linear.weight)?;
        let b = binder.bind(tape, format!("{prefix}.mlp.{i}.bias"), &layer.linear.bias)?;
        let norm = match &layer.norm {
            Some(n) => Some((
                binder.bind(tape, format!("{prefix}.mlp.{i}.norm.scale"), &n.scale)?,
                binder.bind(tape, format!("{prefix}.mlp.{i}.norm.shift"), &n.shift)?,
            )),
            None => None,
        };
        layers.push((w, b, norm));
    }
    Ok(BoundEncoder { layers })
}

pub fn bind_encoder(tape: &mut Tape, params: &EncoderParams, prefix: &str) -> Result<BoundEncoder> {
    bind_encoder_with(tape, params, prefix, &mut crate::nn::LeafBinder)
}

/// Initial node states: `descriptor + MLP(normalized position)` per keypoint.
///
/// The MLP applies feature normalization and ReLU between layers, with no
/// activation after the final layer.
pub fn encode_keypoints(
    tape: &mut Tape,
    positions: VarId,
    descriptors: VarId,
    encoder: &BoundEncoder,
) -> Result<VarId> {
    let pos_width = tape.value(positions).cols();
    if pos_width != ENCODER_INPUT {
        return Err(Error::ShapeMismatch {
            op: "encode_keypoints",
            detail: format!("positions must be Mx{ENCODER_INPUT}, got width {pos_width}"),
        });
    }
    let mut x = positions;
    let n_layers = encoder.layers.len();
    for (i, (w, b, norm)) in encoder.layers.iter().enumerate() {
        x = nn::linear(tape, x, *w, *b)?;
        if i + 1 < n_layers {
            if let Some((scale, shift)) = norm {
                x = nn::feature_norm(tape, x, *scale, *shift)?;
            }
            x = tape.relu(x)?;
        }
    }
    let mlp_width = tape.value(x).cols();
    let desc_width = tape.value(descriptors).cols();
    if mlp_width != desc_width {
        return Err(Error::ShapeMismatch {
            op: "encode_keypoints",
            detail: format!("encoder output width {mlp_width} vs descriptor width {desc_width}"),
        });
    }
    tape.add(descriptors, x)
}

/// Value-level convenience wrapper around [`encode_keypoints`].
pub fn encode_keypoints_value(
    positions: &Tensor,
    descriptors: &Tensor,
    params: &EncoderParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pos = tape.constant(positions.clone())?;
    let desc = tape.constant(descriptors.clone())?;
    let bound = bind_encoder(&mut tape, params, "encoder")?;
    let out = encode_keypoints(&mut tape, pos, desc, &bound)?;
    Ok(tape.value(out).clone())
}
