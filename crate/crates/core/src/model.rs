//! Model assembly: parameter registry, initialization and the per-frame
//! forward pass tying embedding, hybrid attention, token selection, memory
//! reads and mask decoding together.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::attention::{self, AttentionDecomposition, DecoupMode, LayerParams};
use crate::config::ModelConfig;
use crate::decoder::{self, DecodeStage, DecoderParams, ObjectLogits};
use crate::dts::{self, DtsParams, SelectMode};
use crate::embedding::{
    self, Frame, LabelRaster, MaskEmbedParams, PatchEmbedParams, StemParams, TokenGrid,
};
use crate::error::{Error, Result};
use crate::memory::LayerMemory;
use crate::tensor::{Parameter, Tensor};

/// Weight initialization helpers.
pub mod init {
    use super::*;

    /// Xavier-uniform over `[rows, cols]` (fan counts from the two dims).
    pub fn xavier<R: Rng>(shape: &[usize; 2], rng: &mut R) -> Tensor {
        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        let data = (0..shape[0] * shape[1])
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Tensor::variable(shape, data).expect("sized")
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        // Box-Muller; two uniforms per draw.
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen::<f64>();
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor::variable(shape, data).expect("sized")
    }

    pub fn zeros_var(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::variable(shape, vec![0.0; n]).expect("sized")
    }

    pub fn ones_var(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::variable(shape, vec![1.0; n]).expect("sized")
    }
}

/// Which token selector runs inside each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectorVariant {
    /// Reference tokens provide the pooled context.
    Dts,
    /// Current-frame tokens provide the pooled context.
    DtsT,
    /// Selector disabled; every token is kept.
    Off,
}

impl SelectorVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dts" => Ok(SelectorVariant::Dts),
            "dts-t" => Ok(SelectorVariant::DtsT),
            "off" => Ok(SelectorVariant::Off),
            other => Err(Error::Config(format!("unknown selector '{other}'"))),
        }
    }
}

/// The full trainable model.
pub struct Model {
    pub cfg: ModelConfig,
    pub patch: PatchEmbedParams,
    pub mask: MaskEmbedParams,
    pub stem: StemParams,
    pub layers: Vec<LayerParams>,
    pub selectors: Vec<DtsParams>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub decoder: DecoderParams,
    params: Vec<Parameter>,
}

struct Registry {
    params: Vec<Parameter>,
}

impl Registry {
    fn add(&mut self, name: String, t: Tensor) -> Tensor {
        self.params.push(Parameter::new(name, t.clone()));
        t
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c;
        let half = c / 2;
        let d_sel = (c / 2).max(2);
        let mut reg = Registry { params: Vec::new() };

        let patch = PatchEmbedParams {
            kernel: reg.add("embed.patch.w".into(), init::xavier(&[c, 3 * cfg.p * cfg.p], rng)),
            bias: reg.add("embed.patch.b".into(), init::zeros_var(&[c])),
            pos: reg.add("embed.pos".into(), init::normal(&[cfg.n(), c], 0.02, rng)),
        };
        let mask = MaskEmbedParams {
            kernel: reg.add(
                "embed.mask.w".into(),
                init::xavier(&[c, (cfg.m_max + 1) * cfg.p * cfg.p], rng),
            ),
            bias: reg.add("embed.mask.b".into(), init::zeros_var(&[c])),
        };

        let n_stem = decoder::stage_count(cfg.p);
        let mut stem_convs = Vec::new();
        for i in 0..n_stem {
            let in_ch = if i == 0 { 3 * 16 } else { half * 4 };
            stem_convs.push((
                reg.add(format!("stem.{i}.w"), init::xavier(&[half, in_ch], rng)),
                reg.add(format!("stem.{i}.b"), init::zeros_var(&[half])),
            ));
        }
        let stem = StemParams { convs: stem_convs };

        let mut layers = Vec::with_capacity(cfg.layers);
        let mut selectors = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |suffix: &str| format!("layer.{l}.{suffix}");
            layers.push(LayerParams {
                ln1_g: reg.add(p("ln1.g"), init::ones_var(&[c])),
                ln1_b: reg.add(p("ln1.b"), init::zeros_var(&[c])),
                wq: reg.add(p("attn.q.w"), init::xavier(&[c, c], rng)),
                bq: reg.add(p("attn.q.b"), init::zeros_var(&[c])),
                wk: reg.add(p("attn.k.w"), init::xavier(&[c, c], rng)),
                bk: reg.add(p("attn.k.b"), init::zeros_var(&[c])),
                wv: reg.add(p("attn.v.w"), init::xavier(&[c, c], rng)),
                bv: reg.add(p("attn.v.b"), init::zeros_var(&[c])),
                wo: reg.add(p("attn.o.w"), init::xavier(&[c, c], rng)),
                bo: reg.add(p("attn.o.b"), init::zeros_var(&[c])),
                ln2_g: reg.add(p("ln2.g"), init::ones_var(&[c])),
                ln2_b: reg.add(p("ln2.b"), init::zeros_var(&[c])),
                fc1_w: reg.add(p("mlp.fc1.w"), init::xavier(&[c, 4 * c], rng)),
                fc1_b: reg.add(p("mlp.fc1.b"), init::zeros_var(&[4 * c])),
                fc2_w: reg.add(p("mlp.fc2.w"), init::xavier(&[4 * c, c], rng)),
                fc2_b: reg.add(p("mlp.fc2.b"), init::zeros_var(&[c])),
            });
            // Keep-biased output head: early training should see most
            // reference tokens; the selector learns to prune from there.
            let out_b = Tensor::variable(&[2], vec![0.0, 2.0])?;
            selectors.push(DtsParams {
                ln_g: reg.add(p("dts.ln.g"), init::ones_var(&[c])),
                ln_b: reg.add(p("dts.ln.b"), init::zeros_var(&[c])),
                fc1_w: reg.add(p("dts.fc1.w"), init::xavier(&[c, d_sel], rng)),
                fc1_b: reg.add(p("dts.fc1.b"), init::zeros_var(&[d_sel])),
                fc2_w: reg.add(p("dts.fc2.w"), init::xavier(&[2 * d_sel, d_sel], rng)),
                fc2_b: reg.add(p("dts.fc2.b"), init::zeros_var(&[d_sel])),
                out_w: reg.add(p("dts.out.w"), init::xavier(&[d_sel, 2], rng)),
                out_b: reg.add(p("dts.out.b"), out_b),
            });
        }

        let final_ln_g = reg.add("final_ln.g".into(), init::ones_var(&[c]));
        let final_ln_b = reg.add("final_ln.b".into(), init::zeros_var(&[c]));

        let stages = (0..decoder::stage_count(cfg.p))
            .map(|s| {
                let p = |suffix: &str| format!("dec.stage{s}.{suffix}");
                DecodeStage {
                    skip_w: reg.add(p("skip.w"), init::xavier(&[half, half], rng)),
                    skip_b: reg.add(p("skip.b"), init::zeros_var(&[half])),
                    fuse_w: reg.add(p("fuse.w"), init::xavier(&[half, half], rng)),
                    fuse_b: reg.add(p("fuse.b"), init::zeros_var(&[half])),
                }
            })
            .collect();
        let decoder = DecoderParams {
            in_w: reg.add("dec.in.w".into(), init::xavier(&[c, half], rng)),
            in_b: reg.add("dec.in.b".into(), init::zeros_var(&[half])),
            stages,
            out_w: reg.add("dec.out.w".into(), init::xavier(&[half, cfg.m_max + 1], rng)),
            out_b: reg.add("dec.out.b".into(), init::zeros_var(&[cfg.m_max + 1])),
        };

        Ok(Model {
            cfg: cfg.clone(),
            patch,
            mask,
            stem,
            layers,
            selectors,
            final_ln_g,
            final_ln_b,
            decoder,
            params: reg.params,
        })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn zero_grads(&self) {
        crate::tensor::zero_grads(&self.params);
    }

    /// Plain-data copy of every parameter; `Send`, so models can be rebuilt
    /// on other threads.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            entries: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        p.tensor.shape().to_vec(),
                        p.tensor.to_vec(),
                    )
                })
                .collect(),
        }
    }

    pub fn load_snapshot(&self, snap: &ParamSnapshot) -> Result<()> {
        self.load_entries(snap.entries.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d)))
    }

    /// Loads parameters from (name, shape, data) entries; every model
    /// parameter must be present with a matching shape.
    pub fn load_entries<'a>(
        &self,
        entries: impl Iterator<Item = (&'a str, &'a [usize], &'a Vec<f64>)>,
    ) -> Result<()> {
        let mut by_name: std::collections::HashMap<&str, (&[usize], &Vec<f64>)> =
            std::collections::HashMap::new();
        for (name, shape, data) in entries {
            by_name.insert(name, (shape, data));
        }
        for p in &self.params {
            let (shape, data) = by_name.get(p.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter '{}'", p.name))
            })?;
            if *shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    p.name,
                    shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.set_data((*data).clone());
        }
        Ok(())
    }
}

/// `Send` parameter snapshot for cross-thread model replication.
#[derive(Clone, Debug)]
pub struct ParamSnapshot {
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

// ── Forward pass ────────────────────────────────────────────────────

/// Inputs of one propagation step: segment `cur` given the previous frame
/// and its mask, plus per-layer memory.
pub struct FrameInputs<'a> {
    pub cur: &'a Frame,
    pub reference: &'a Frame,
    pub ref_mask: &'a LabelRaster,
    pub memories: Option<&'a [LayerMemory]>,
    pub frame_index: usize,
}

#[derive(Clone, Copy)]
pub struct ForwardOptions {
    pub decoup: DecoupMode,
    pub select: SelectMode,
    pub selector: SelectorVariant,
    /// Collect detached memory-candidate tokens per layer.
    pub collect_candidates: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            decoup: DecoupMode::Both,
            select: SelectMode::Argmax,
            selector: SelectorVariant::Dts,
            collect_candidates: true,
        }
    }
}

/// Per-layer forward diagnostics.
pub struct LayerStats {
    pub decomp: AttentionDecomposition,
    /// Received-attention mass per memory token (most recent read).
    pub mem_received: Vec<f64>,
    pub keep_frac: f64,
}

/// Detached selected reference tokens of one layer, ready for memory
/// storage; `scores` is the attention mass each received in this pass.
pub struct MemoryCandidates {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
}

pub struct FrameForward {
    pub logits: ObjectLogits,
    pub layer_stats: Vec<LayerStats>,
    pub candidates: Vec<Option<MemoryCandidates>>,
    /// Per-layer keep-probability tensors (column 1 of the selector
    /// output), for auxiliary ratio losses.
    pub keep_probs: Vec<Option<Tensor>>,
}

impl Model {
    /// One full propagation step: embed reference and current frames, run
    /// every layer with memory reads and token selection, decode the
    /// current tokens into object logits.
    pub fn forward_frame<R: Rng>(
        &self,
        inputs: &FrameInputs,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<FrameForward> {
        let cfg = &self.cfg;
        if inputs.ref_mask.num_objects > cfg.m_max {
            return Err(Error::ObjectCount {
                found: inputs.ref_mask.num_objects,
                max: cfg.m_max,
            });
        }
        if let Some(mems) = inputs.memories {
            if mems.len() != cfg.layers {
                return Err(Error::Contract(format!(
                    "{} memories for {} layers",
                    mems.len(),
                    cfg.layers
                )));
            }
        }
        let ref_grid = embedding::patch_embed(
            inputs.reference,
            &self.patch,
            cfg,
            inputs.frame_index.saturating_sub(1),
        )?;
        let cur_grid = embedding::patch_embed(inputs.cur, &self.patch, cfg, inputs.frame_index)?;
        let m_ref = embedding::mask_embed(inputs.ref_mask, &self.mask, cfg)?;
        let skips = embedding::stem_features(inputs.cur, &self.stem, cfg)?;

        let mut e_ref = ref_grid.tokens;
        let mut e_t = cur_grid.tokens;
        let empty = Tensor::zeros(&[0, cfg.c]);
        let mut layer_stats = Vec::with_capacity(cfg.layers);
        let mut candidates = Vec::with_capacity(cfg.layers);
        let mut keep_probs = Vec::with_capacity(cfg.layers);

        for l in 0..cfg.layers {
            let (k_mem, v_mem) = match inputs.memories {
                Some(mems) => mems[l].read(),
                None => (empty.clone(), empty.clone()),
            };
            let (selection, probs) = match opts.selector {
                SelectorVariant::Off => (dts::Selection::keep_all(cfg.n()), None),
                variant => {
                    let ctx = match variant {
                        SelectorVariant::DtsT => Some(&e_t),
                        _ => None,
                    };
                    let scores = dts::score(&e_ref, &self.selectors[l], ctx)?;
                    let sel = dts::select(&scores, opts.select, rng)?;
                    let keep = scores.probs.select_col(1)?;
                    (sel, Some(keep))
                }
            };
            let out = attention::transformer_layer(
                &e_ref,
                &e_t,
                (&k_mem, &v_mem),
                Some(&m_ref),
                l,
                &self.layers[l],
                cfg,
                opts.decoup,
                selection.gate.as_ref(),
            )?;
            let cand = if opts.collect_candidates {
                let (k_sel, v_sel) =
                    dts::apply_selection(&out.k_ref, &out.v_ref, &selection.hard)?;
                let scores = selection
                    .kept
                    .iter()
                    .map(|&i| out.diag.ref_received[i])
                    .collect();
                Some(MemoryCandidates {
                    keys: k_sel.to_vec(),
                    values: v_sel.to_vec(),
                    positions: selection.kept.clone(),
                    scores,
                })
            } else {
                None
            };
            layer_stats.push(LayerStats {
                decomp: out.diag.decomp,
                mem_received: out.diag.mem_received,
                keep_frac: selection.keep_fraction(),
            });
            candidates.push(cand);
            keep_probs.push(probs);
            e_ref = out.e_ref;
            e_t = out.e_t;
        }

        let e_t = e_t.layer_norm(&self.final_ln_g, &self.final_ln_b, attention::LN_EPS)?;
        let grid = TokenGrid {
            tokens: e_t,
            grid: cfg.grid(),
            frame_index: inputs.frame_index,
        };
        let logits = decoder::fpn_decode(
            &grid,
            &skips,
            &self.decoder,
            cfg,
            inputs.ref_mask.num_objects.max(1),
        )?;
        Ok(FrameForward {
            logits,
            layer_stats,
            candidates,
            keep_probs,
        })
    }
}
