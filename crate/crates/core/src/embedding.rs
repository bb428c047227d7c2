//! Frame and mask embeddings.
//!
//! Frames become patch tokens through a single non-overlapping convolution
//! plus a learned positional embedding; multi-object masks become per-patch
//! identity embeddings through one-hot encoding over a fixed channel budget
//! followed by a single convolution of the same stride. A small cascade of
//! strided convolutions on the raw frame provides the 1/4- and 1/8-scale
//! skip features consumed by the mask decoder.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ops::patch_conv2d, Tensor};

// ── Domain types ────────────────────────────────────────────────────

/// An RGB frame stored channel-major (`[3, h, w]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::Geometry(format!(
                "frame buffer of {} values does not match 3x{h}x{w}",
                data.len()
            )));
        }
        Ok(Frame { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Frame {
            h,
            w,
            data: vec![0.0; 3 * h * w],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let hw = self.h * self.w;
        let i = y * self.w + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let hw = self.h * self.w;
        let i = y * self.w + x;
        self.data[i] = rgb[0];
        self.data[hw + i] = rgb[1];
        self.data[2 * hw + i] = rgb[2];
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::constant(&[3, self.h, self.w], self.data.clone()).expect("frame buffer sized")
    }
}

/// Integer object labels per pixel: 0 is background, 1..=num_objects are
/// object ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
    pub num_objects: usize,
}

impl LabelRaster {
    pub fn new(h: usize, w: usize, labels: Vec<u8>, num_objects: usize) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Geometry(format!(
                "label buffer of {} values does not match {h}x{w}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_objects) {
            return Err(Error::ObjectCount {
                found: bad as usize,
                max: num_objects,
            });
        }
        Ok(LabelRaster {
            h,
            w,
            labels,
            num_objects,
        })
    }

    /// Builds a raster from raw labels, deriving the object count from the
    /// largest id present (0 objects for an all-background raster).
    pub fn from_labels(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        Self::new(h, w, labels, max)
    }

    pub fn background(h: usize, w: usize) -> Self {
        LabelRaster {
            h,
            w,
            labels: vec![0; h * w],
            num_objects: 0,
        }
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    /// Binary mask of one object id.
    pub fn binary(&self, id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }

    /// One-hot encoding over `m_max + 1` fixed channels, channel-major.
    pub fn one_hot(&self, m_max: usize) -> Result<Vec<f64>> {
        if self.num_objects > m_max {
            return Err(Error::ObjectCount {
                found: self.num_objects,
                max: m_max,
            });
        }
        let hw = self.h * self.w;
        let mut out = vec![0.0; (m_max + 1) * hw];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize * hw + i] = 1.0;
        }
        Ok(out)
    }
}

/// A frame's patch tokens plus grid geometry.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid: (usize, usize),
    pub frame_index: usize,
}

impl TokenGrid {
    pub fn n(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Per-patch object-identity embedding of a reference mask.
#[derive(Clone, Debug)]
pub struct MaskEmbedding {
    pub embedding: Tensor,
    pub num_objects: usize,
}

// ── Parameters ──────────────────────────────────────────────────────

pub struct PatchEmbedParams {
    /// `[c, 3*p*p]` flattened patch kernel.
    pub kernel: Tensor,
    pub bias: Tensor,
    /// `[n, c]` learned positional embedding, shared by reference and
    /// current frames and added at layer 0 only.
    pub pos: Tensor,
}

pub struct MaskEmbedParams {
    /// `[c, (m_max+1)*p*p]` flattened kernel over one-hot mask channels.
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Strided-conv cascade on the raw frame producing decoder skip features.
/// `convs[0]` maps the frame to 1/4 scale with a 4x4 kernel; each further
/// conv halves resolution with a 2x2 kernel. All stages output `c/2`
/// channels and are GELU-activated.
pub struct StemParams {
    pub convs: Vec<(Tensor, Tensor)>,
}

/// One skip feature: `[cells, c/2]` at `scale` (pixels per cell).
pub struct SkipFeature {
    pub scale: usize,
    pub grid: (usize, usize),
    pub feature: Tensor,
}

// ── Operations ──────────────────────────────────────────────────────

fn check_frame_geometry(cfg: &ModelConfig, h: usize, w: usize) -> Result<()> {
    if h != cfg.h || w != cfg.w {
        return Err(Error::Geometry(format!(
            "input {h}x{w} does not match configured {}x{}",
            cfg.h, cfg.w
        )));
    }
    Ok(())
}

/// Frame -> patch tokens: patchify convolution plus positional embedding.
pub fn patch_embed(
    frame: &Frame,
    params: &PatchEmbedParams,
    cfg: &ModelConfig,
    frame_index: usize,
) -> Result<TokenGrid> {
    check_frame_geometry(cfg, frame.h, frame.w)?;
    let tokens = patch_conv2d(&frame.as_tensor(), &params.kernel, &params.bias, cfg.p)?
        .add(&params.pos)?;
    Ok(TokenGrid {
        tokens,
        grid: cfg.grid(),
        frame_index,
    })
}

/// Mask -> per-patch identity embedding: one-hot channels through a single
/// stride-`p` convolution. Fixed `m_max + 1` input channels let one kernel
/// carry any object count up to the configured maximum.
pub fn mask_embed(
    mask: &LabelRaster,
    params: &MaskEmbedParams,
    cfg: &ModelConfig,
) -> Result<MaskEmbedding> {
    check_frame_geometry(cfg, mask.h, mask.w)?;
    let hot = mask.one_hot(cfg.m_max)?;
    let x = Tensor::constant(&[cfg.m_max + 1, mask.h, mask.w], hot)?;
    let embedding = patch_conv2d(&x, &params.kernel, &params.bias, cfg.p)?;
    Ok(MaskEmbedding {
        embedding,
        num_objects: mask.num_objects,
    })
}

/// Multi-scale stem features for decoder skips, finest (1/4) first.
pub fn stem_features(
    frame: &Frame,
    params: &StemParams,
    cfg: &ModelConfig,
) -> Result<Vec<SkipFeature>> {
    check_frame_geometry(cfg, frame.h, frame.w)?;
    let mut out = Vec::new();
    let mut scale = 4usize;
    let mut grid = (cfg.h / 4, cfg.w / 4);
    let mut cur = patch_conv2d(
        &frame.as_tensor(),
        &params.convs[0].0,
        &params.convs[0].1,
        4,
    )?
    .gelu();
    out.push(SkipFeature {
        scale,
        grid,
        feature: cur.clone(),
    });
    for (kernel, bias) in params.convs.iter().skip(1) {
        // Reinterpret [cells, ch] as a [ch, gh, gw] raster for the next
        // stride-2 conv: transpose cells/channels into channel-major order.
        let chw = to_channel_major(&cur, grid)?;
        cur = patch_conv2d(&chw, kernel, bias, 2)?.gelu();
        scale *= 2;
        grid = (grid.0 / 2, grid.1 / 2);
        out.push(SkipFeature {
            scale,
            grid,
            feature: cur.clone(),
        });
    }
    Ok(out)
}

/// `[cells, ch]` -> `[ch, gh, gw]` rearrangement (differentiable permute).
fn to_channel_major(feat: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (gh, gw) = grid;
    let cells = gh * gw;
    let ch = feat.row_len();
    if feat.rows() != cells {
        return Err(Error::Geometry(format!(
            "feature has {} rows, grid is {gh}x{gw}",
            feat.rows()
        )));
    }
    let data = {
        let a = feat.data();
        let mut out = vec![0.0; ch * cells];
        for cell in 0..cells {
            for k in 0..ch {
                out[k * cells + cell] = a[cell * ch + k];
            }
        }
        out
    };
    Ok(Tensor::from_op(
        vec![ch, gh, gw],
        data,
        vec![feat.clone()],
        Box::new(move |_, g| {
            let mut da = vec![0.0; cells * ch];
            for cell in 0..cells {
                for k in 0..ch {
                    da[cell * ch + k] = g[k * cells + cell];
                }
            }
            vec![Some(da)]
        }),
    ))
}
