//! The hybrid attention block.
//!
//! Reference and current frames share one set of projections. Within a
//! layer, the reference value tokens receive the mask embedding, then two
//! attention reads happen:
//!
//! - the reference output attends only over reference keys/values
//!   (self-attention), so stored tokens are never contaminated by
//!   current-frame or memory content;
//! - the current output attends jointly over memory, reference and itself
//!   through a single softmax over the concatenated key blocks, which
//!   realizes matching and feature extraction in one operation.
//!
//! [`decoupling_variant`] exposes the intermediate designs (no decoupling,
//! reference-to-current removed, reference-to-memory removed) for ablations,
//! and [`full_attention`] is the naive joint-attention reference path used
//! by equivalence tests.
//!
//! A per-key gate on the reference block carries the dynamic token
//! selection; hard 0/1 gates reproduce row-gathered attention exactly while
//! staying differentiable for straight-through training. The attention
//! weights of the current-frame read are also surfaced as diagnostics: the
//! per-query mass over the three blocks, the dominant block per query, and
//! the total mass each memory/reference token received (the score used by
//! top-k memory retention).

use crate::config::ModelConfig;
use crate::embedding::MaskEmbedding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which attention paths into the reference output are removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoupMode {
    /// Joint attention for both outputs (no decoupling).
    None,
    /// Reference no longer attends to current-frame tokens.
    Decoup1,
    /// Reference no longer attends to memory tokens.
    Decoup2,
    /// Both paths removed: reference is pure self-attention.
    Both,
}

impl DecoupMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DecoupMode::None),
            "decoup1" => Ok(DecoupMode::Decoup1),
            "decoup2" => Ok(DecoupMode::Decoup2),
            "both" => Ok(DecoupMode::Both),
            other => Err(Error::Config(format!(
                "unknown decoupling mode '{other}' (expected none, decoup1, decoup2 or both)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DecoupMode::None => "none",
            DecoupMode::Decoup1 => "decoup1",
            DecoupMode::Decoup2 => "decoup2",
            DecoupMode::Both => "both",
        }
    }
}

/// Key/value source blocks of the current-frame attention read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Memory,
    Reference,
    Current,
}

impl Block {
    pub fn as_str(&self) -> &'static str {
        match self {
            Block::Memory => "mem",
            Block::Reference => "ref",
            Block::Current => "self",
        }
    }
}

/// Projected activations of one layer. Reference and current tokens share
/// the embedding width; memory blocks may be empty (`0 x c`).
pub struct LayerActivations {
    pub q_ref: Tensor,
    pub k_ref: Tensor,
    pub v_ref: Tensor,
    pub q_t: Tensor,
    pub k_t: Tensor,
    pub v_t: Tensor,
    pub k_mem: Tensor,
    pub v_mem: Tensor,
}

impl LayerActivations {
    pub fn validate(&self) -> Result<()> {
        let c = self.q_ref.row_len();
        for (name, t) in [
            ("k_ref", &self.k_ref),
            ("v_ref", &self.v_ref),
            ("q_t", &self.q_t),
            ("k_t", &self.k_t),
            ("v_t", &self.v_t),
            ("k_mem", &self.k_mem),
            ("v_mem", &self.v_mem),
        ] {
            if t.row_len() != c {
                return Err(Error::Shape {
                    op: "layer_activations",
                    lhs: self.q_ref.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            let _ = name;
        }
        if self.k_ref.rows() != self.v_ref.rows()
            || self.k_t.rows() != self.v_t.rows()
            || self.k_mem.rows() != self.v_mem.rows()
        {
            return Err(Error::Contract(
                "key/value blocks must have matching token counts".into(),
            ));
        }
        Ok(())
    }

    pub fn n_mem(&self) -> usize {
        self.k_mem.rows()
    }
}

/// Per-query aggregate attention mass over the memory / reference / self
/// blocks, averaged over heads; the three sum to one for every query.
#[derive(Clone, Debug)]
pub struct AttentionDecomposition {
    pub w_mem: Vec<f64>,
    pub w_ref: Vec<f64>,
    pub w_self: Vec<f64>,
    pub argmax_block: Vec<Block>,
}

impl AttentionDecomposition {
    pub fn mean_masses(&self) -> [f64; 3] {
        let n = self.w_mem.len().max(1) as f64;
        [
            self.w_mem.iter().sum::<f64>() / n,
            self.w_ref.iter().sum::<f64>() / n,
            self.w_self.iter().sum::<f64>() / n,
        ]
    }
}

/// Raw per-head weights of the current-frame read, for diagnostics and the
/// blockwise recomposition identity.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub heads: usize,
    pub queries: usize,
    /// Columns per block: memory, reference, current.
    pub cols: (usize, usize, usize),
    /// One `[queries * total_cols]` buffer per head.
    pub weights: Vec<Vec<f64>>,
}

/// Diagnostics of one hybrid-attention evaluation.
pub struct AttentionDiag {
    pub decomp: AttentionDecomposition,
    /// Summed weight each memory token received from current queries,
    /// over all heads.
    pub mem_received: Vec<f64>,
    /// Summed weight each reference token received from current queries.
    pub ref_received: Vec<f64>,
    pub head_weights: HeadWeights,
}

/// Output of one attention evaluation in any decoupling mode.
pub struct AttnOutput {
    pub a_ref: Tensor,
    pub a_t: Tensor,
    pub diag: AttentionDiag,
}

// ── Mask injection ──────────────────────────────────────────────────

/// Adds the mask embedding to the reference value tokens when `layer` is a
/// mask-injection layer. Queries and keys are never modified.
pub fn inject_mask(
    acts: LayerActivations,
    m_ref: &MaskEmbedding,
    layer: usize,
    cfg: &ModelConfig,
) -> Result<LayerActivations> {
    if layer >= cfg.layers {
        return Err(Error::Contract(format!(
            "layer {layer} out of range ({} layers)",
            cfg.layers
        )));
    }
    if !cfg.mask_added_at(layer) {
        return Ok(acts);
    }
    if m_ref.embedding.shape() != acts.v_ref.shape() {
        return Err(Error::Geometry(format!(
            "mask embedding shape {:?} does not match reference values {:?}",
            m_ref.embedding.shape(),
            acts.v_ref.shape()
        )));
    }
    Ok(LayerActivations {
        v_ref: acts.v_ref.add(&m_ref.embedding)?,
        ..acts
    })
}

// ── Multi-head primitives ───────────────────────────────────────────

struct MhRead {
    out: Tensor,
    /// Per-head weight buffers (`[nq * ncols]` each).
    weights: Vec<Vec<f64>>,
}

/// One multi-head attention read of `q` against concatenated key/value
/// blocks, with an optional per-key gate applied inside the softmax.
fn mh_read(
    q: &Tensor,
    keys: &[&Tensor],
    values: &[&Tensor],
    gate: Option<&Tensor>,
    heads: usize,
) -> Result<MhRead> {
    let c = q.row_len();
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide embedding dim {c}"
        )));
    }
    let d_k = c / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let k_cat = Tensor::concat_rows(keys)?;
    let v_cat = Tensor::concat_rows(values)?;
    let mut head_outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow_cols(h * d_k, d_k)?;
        let kh = k_cat.narrow_cols(h * d_k, d_k)?;
        let vh = v_cat.narrow_cols(h * d_k, d_k)?;
        let scores = qh.matmul_nt(&kh)?.scale(scale);
        let w = match gate {
            Some(g) => scores.masked_softmax_rows(g)?,
            None => scores.softmax_rows()?,
        };
        head_weights.push(w.to_vec());
        head_outs.push(w.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    Ok(MhRead {
        out: Tensor::concat_cols(&refs)?,
        weights: head_weights,
    })
}

fn diag_from_weights(
    weights: Vec<Vec<f64>>,
    queries: usize,
    cols: (usize, usize, usize),
) -> AttentionDiag {
    let heads = weights.len();
    let (nm, nr, nt) = cols;
    let total = nm + nr + nt;
    let mut w_mem = vec![0.0; queries];
    let mut w_ref = vec![0.0; queries];
    let mut w_self = vec![0.0; queries];
    let mut mem_received = vec![0.0; nm];
    let mut ref_received = vec![0.0; nr];
    for head in &weights {
        for qi in 0..queries {
            let row = &head[qi * total..(qi + 1) * total];
            for (j, &v) in row[..nm].iter().enumerate() {
                w_mem[qi] += v;
                mem_received[j] += v;
            }
            for (j, &v) in row[nm..nm + nr].iter().enumerate() {
                w_ref[qi] += v;
                ref_received[j] += v;
            }
            for &v in &row[nm + nr..] {
                w_self[qi] += v;
            }
        }
    }
    let inv = 1.0 / heads as f64;
    for v in w_mem.iter_mut().chain(&mut w_ref).chain(&mut w_self) {
        *v *= inv;
    }
    let argmax_block = (0..queries)
        .map(|qi| {
            // Ties resolve in memory, reference, self order.
            let trio = [
                (w_mem[qi], Block::Memory),
                (w_ref[qi], Block::Reference),
                (w_self[qi], Block::Current),
            ];
            trio.iter()
                .fold(trio[0], |best, &cur| if cur.0 > best.0 { cur } else { best })
                .1
        })
        .collect();
    AttentionDiag {
        decomp: AttentionDecomposition {
            w_mem,
            w_ref,
            w_self,
            argmax_block,
        },
        mem_received,
        ref_received,
        head_weights: HeadWeights {
            heads,
            queries,
            cols,
            weights,
        },
    }
}

// ── Attention variants ──────────────────────────────────────────────

/// Hybrid attention with an optional gate over the reference block of the
/// current-frame read. The reference read never sees the gate: dropped
/// tokens stay in reference self-attention.
pub fn gated_attention(
    acts: &LayerActivations,
    mode: DecoupMode,
    heads: usize,
    ref_gate: Option<&Tensor>,
) -> Result<AttnOutput> {
    acts.validate()?;
    let nm = acts.k_mem.rows();
    let nr = acts.k_ref.rows();
    let nt = acts.k_t.rows();

    // Current frame: one softmax over [memory; reference; current] in every
    // mode, gated on the reference block when a selector is active.
    let gate_full = match ref_gate {
        Some(g) => {
            if g.shape() != [nr] {
                return Err(Error::Shape {
                    op: "gated_attention",
                    lhs: vec![nr],
                    rhs: g.shape().to_vec(),
                });
            }
            let ones_mem = Tensor::full(&[nm], 1.0);
            let ones_t = Tensor::full(&[nt], 1.0);
            Some(Tensor::concat_rows(&[&ones_mem, g, &ones_t])?)
        }
        None => None,
    };
    let t_read = mh_read(
        &acts.q_t,
        &[&acts.k_mem, &acts.k_ref, &acts.k_t],
        &[&acts.v_mem, &acts.v_ref, &acts.v_t],
        gate_full.as_ref(),
        heads,
    )?;
    let diag = diag_from_weights(t_read.weights, acts.q_t.rows(), (nm, nr, nt));

    // Reference read: key/value set depends on the decoupling mode.
    let ref_read = match mode {
        DecoupMode::None => mh_read(
            &acts.q_ref,
            &[&acts.k_mem, &acts.k_ref, &acts.k_t],
            &[&acts.v_mem, &acts.v_ref, &acts.v_t],
            None,
            heads,
        )?,
        DecoupMode::Decoup1 => mh_read(
            &acts.q_ref,
            &[&acts.k_mem, &acts.k_ref],
            &[&acts.v_mem, &acts.v_ref],
            None,
            heads,
        )?,
        DecoupMode::Decoup2 => mh_read(
            &acts.q_ref,
            &[&acts.k_ref, &acts.k_t],
            &[&acts.v_ref, &acts.v_t],
            None,
            heads,
        )?,
        DecoupMode::Both => mh_read(&acts.q_ref, &[&acts.k_ref], &[&acts.v_ref], None, heads)?,
    };

    Ok(AttnOutput {
        a_ref: ref_read.out,
        a_t: t_read.out,
        diag,
    })
}

/// The fully decoupled form: reference attends only to itself, current
/// attends jointly to memory, reference and itself.
pub fn uni_hybrid_attention(
    acts: &LayerActivations,
    heads: usize,
) -> Result<(Tensor, Tensor, AttentionDecomposition)> {
    let out = gated_attention(acts, DecoupMode::Both, heads, None)?;
    Ok((out.a_ref, out.a_t, out.diag.decomp))
}

/// Ablation entry point over all decoupling modes.
pub fn decoupling_variant(
    acts: &LayerActivations,
    mode: DecoupMode,
    heads: usize,
) -> Result<AttnOutput> {
    gated_attention(acts, mode, heads, None)
}

/// Naive joint attention: both query sets attend over the concatenation of
/// every block through one softmax (the undecoupled reference path).
pub fn full_attention(acts: &LayerActivations, heads: usize) -> Result<(Tensor, Tensor)> {
    acts.validate()?;
    let q = Tensor::concat_rows(&[&acts.q_ref, &acts.q_t])?;
    let read = mh_read(
        &q,
        &[&acts.k_mem, &acts.k_ref, &acts.k_t],
        &[&acts.v_mem, &acts.v_ref, &acts.v_t],
        None,
        heads,
    )?;
    let n_ref = acts.q_ref.rows();
    let n_t = acts.q_t.rows();
    let a_ref = read.out.gather_rows(&(0..n_ref).collect::<Vec<_>>())?;
    let a_t = read
        .out
        .gather_rows(&(n_ref..n_ref + n_t).collect::<Vec<_>>())?;
    Ok((a_ref, a_t))
}

// ── Full transformer layer ──────────────────────────────────────────

/// Learned tensors of one layer (attention + MLP, pre-norm residual).
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

pub struct LayerOutput {
    pub e_ref: Tensor,
    pub e_t: Tensor,
    /// This layer's reference keys (memory candidates).
    pub k_ref: Tensor,
    /// Reference values after mask injection (memory candidates).
    pub v_ref: Tensor,
    pub diag: AttentionDiag,
}

fn project(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_bias(b)
}

fn mlp(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let h = x.layer_norm(&p.ln2_g, &p.ln2_b, LN_EPS)?;
    project(&project(&h, &p.fc1_w, &p.fc1_b)?.gelu(), &p.fc2_w, &p.fc2_b)
}

/// One pre-norm transformer layer over the reference/current pair.
///
/// `memory` supplies this layer's stored key/value tokens (possibly empty);
/// `m_ref` is added to the reference values on mask-injection layers before
/// attention; `ref_gate` carries the token selection for the cross path.
/// Returns the residual outputs plus this layer's reference keys and
/// (mask-injected) values for memory candidacy.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    e_ref: &Tensor,
    e_t: &Tensor,
    memory: (&Tensor, &Tensor),
    m_ref: Option<&MaskEmbedding>,
    layer: usize,
    params: &LayerParams,
    cfg: &ModelConfig,
    mode: DecoupMode,
    ref_gate: Option<&Tensor>,
) -> Result<LayerOutput> {
    let h_ref = e_ref.layer_norm(&params.ln1_g, &params.ln1_b, LN_EPS)?;
    let h_t = e_t.layer_norm(&params.ln1_g, &params.ln1_b, LN_EPS)?;
    let acts = LayerActivations {
        q_ref: project(&h_ref, &params.wq, &params.bq)?,
        k_ref: project(&h_ref, &params.wk, &params.bk)?,
        v_ref: project(&h_ref, &params.wv, &params.bv)?,
        q_t: project(&h_t, &params.wq, &params.bq)?,
        k_t: project(&h_t, &params.wk, &params.bk)?,
        v_t: project(&h_t, &params.wv, &params.bv)?,
        k_mem: memory.0.clone(),
        v_mem: memory.1.clone(),
    };
    let acts = match m_ref {
        Some(m) => inject_mask(acts, m, layer, cfg)?,
        None => acts,
    };
    let k_ref = acts.k_ref.clone();
    let v_ref = acts.v_ref.clone();

    let attn = gated_attention(&acts, mode, cfg.heads, ref_gate)?;
    let e_ref = e_ref.add(&project(&attn.a_ref, &params.wo, &params.bo)?)?;
    let e_t = e_t.add(&project(&attn.a_t, &params.wo, &params.bo)?)?;
    let e_ref = e_ref.add(&mlp(&e_ref, params)?)?;
    let e_t = e_t.add(&mlp(&e_t, params)?)?;

    Ok(LayerOutput {
        e_ref,
        e_t,
        k_ref,
        v_ref,
        diag: attn.diag,
    })
}
