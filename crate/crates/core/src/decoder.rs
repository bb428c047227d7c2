//! Pyramid mask decoding.
//!
//! Final current-frame tokens are reshaped to their grid, reduced to half
//! the embedding width, then upsampled 2x per stage with skip features from
//! the convolutional stem merged at each scale until 1/4 resolution. A 4x
//! bilinear upsample followed by a 1x1 projection produces per-object
//! logits at full frame resolution. Decoding reads only current-frame
//! features; reference and memory tokens never enter.

use crate::config::ModelConfig;
use crate::embedding::{LabelRaster, SkipFeature, TokenGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One 2x upsampling stage: a 1x1 projection of the skip feature and a 1x1
/// fusion conv after the merge.
pub struct DecodeStage {
    pub skip_w: Tensor,
    pub skip_b: Tensor,
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
}

pub struct DecoderParams {
    /// Token reduction `[c, c/2]` at the coarsest scale.
    pub in_w: Tensor,
    pub in_b: Tensor,
    /// Stages ordered coarse to fine (scales p/2, p/4, ..., 4).
    pub stages: Vec<DecodeStage>,
    /// Final `[c/2, m_max+1]` projection at full resolution.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// Full-resolution per-object logits (`[h*w, m_max+1]`); channels beyond
/// `valid_objects` are ignored by aggregation.
pub struct ObjectLogits {
    pub logits: Tensor,
    pub valid_objects: usize,
    pub h: usize,
    pub w: usize,
}

/// Number of 2x stages between 1/p and 1/4 scale.
pub fn stage_count(p: usize) -> usize {
    (p.trailing_zeros() as usize).saturating_sub(2)
}

fn project(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_bias(b)
}

/// Decodes final current-frame tokens into per-object logits.
pub fn fpn_decode(
    tokens: &TokenGrid,
    skips: &[SkipFeature],
    params: &DecoderParams,
    cfg: &ModelConfig,
    valid_objects: usize,
) -> Result<ObjectLogits> {
    if params.stages.len() != stage_count(cfg.p) {
        return Err(Error::Config(format!(
            "decoder has {} stages but patch stride {} needs {}",
            params.stages.len(),
            cfg.p,
            stage_count(cfg.p)
        )));
    }
    let (mut gh, mut gw) = tokens.grid;
    let mut scale = cfg.p;
    let mut x = project(&tokens.tokens, &params.in_w, &params.in_b)?.gelu();
    for stage in &params.stages {
        x = x.upsample_nearest_2x(gh, gw)?;
        gh *= 2;
        gw *= 2;
        scale /= 2;
        let skip = skips
            .iter()
            .find(|s| s.scale == scale)
            .ok_or_else(|| Error::Config(format!("missing stem skip at 1/{scale} scale")))?;
        if skip.grid != (gh, gw) {
            return Err(Error::Geometry(format!(
                "skip grid {:?} does not match decoder grid {:?}",
                skip.grid,
                (gh, gw)
            )));
        }
        let merged = x.add(&project(&skip.feature, &stage.skip_w, &stage.skip_b)?)?;
        x = project(&merged, &stage.fuse_w, &stage.fuse_b)?.gelu();
    }
    debug_assert_eq!(scale, 4);
    let full = x.upsample_bilinear(gh, gw, 4)?;
    let logits = project(&full, &params.out_w, &params.out_b)?;
    Ok(ObjectLogits {
        logits,
        valid_objects,
        h: gh * 4,
        w: gw * 4,
    })
}

/// Per-pixel argmax over the valid channels (softmax over channels then
/// argmax reduces to this, since softmax is monotone). Ties go to the
/// background: if the background channel attains the maximum the pixel is
/// background, otherwise the first object channel attaining it wins.
pub fn aggregate_objects(logits: &ObjectLogits) -> Result<LabelRaster> {
    if logits.valid_objects == 0 {
        return Err(Error::Contract(
            "aggregation needs at least one valid object".into(),
        ));
    }
    let channels = logits.logits.row_len();
    if logits.valid_objects + 1 > channels {
        return Err(Error::Contract(format!(
            "{} valid objects but only {} channels",
            logits.valid_objects, channels
        )));
    }
    let data = logits.logits.data();
    let hw = logits.h * logits.w;
    if logits.logits.rows() != hw {
        return Err(Error::Geometry(format!(
            "logit rows {} do not match {}x{}",
            logits.logits.rows(),
            logits.h,
            logits.w
        )));
    }
    let mut labels = vec![0u8; hw];
    for i in 0..hw {
        let row = &data[i * channels..i * channels + logits.valid_objects + 1];
        let mut best = row[0];
        for &v in &row[1..] {
            if v > best {
                best = v;
            }
        }
        labels[i] = if row[0] == best {
            0
        } else {
            row.iter().position(|&v| v == best).unwrap() as u8
        };
    }
    LabelRaster::new(logits.h, logits.w, labels, logits.valid_objects)
}
