//! Dynamic token selector.
//!
//! A small per-layer head scores every reference token for keeping or
//! dropping: each token's local feature is concatenated with a max-pooled
//! global context and mapped to two logits. During training a
//! straight-through Gumbel-Softmax draw turns the probabilities into a hard
//! 0/1 gate whose backward pass follows the soft relaxation; at inference
//! the argmax decides. The selected subset feeds both the cross-attention
//! reference block and memory storage, while reference self-attention keeps
//! every token.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learned tensors of one layer's selector head.
pub struct DtsParams {
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    /// Token feature MLP `[c, d]`.
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    /// Context+token fusion `[2d, d]`.
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    /// Two-logit head `[d, 2]`: column 0 drop, column 1 keep.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// Per-token drop/keep distribution of one layer.
pub struct SelectionScores {
    /// `[n, 2]` softmax probabilities; column 1 is the keep probability.
    pub probs: Tensor,
    /// `[n, 2]` pre-softmax logits (Gumbel draws perturb these).
    pub logits: Tensor,
}

impl SelectionScores {
    pub fn keep_probs(&self) -> Vec<f64> {
        let d = self.probs.data();
        (0..self.probs.rows()).map(|i| d[i * 2 + 1]).collect()
    }
}

/// A realized selection: the hard keep set plus the gate applied to the
/// cross-attention reference block. `gate == None` keeps every token
/// without touching the graph.
pub struct Selection {
    pub hard: Vec<bool>,
    pub gate: Option<Tensor>,
    pub kept: Vec<usize>,
}

impl Selection {
    pub fn keep_all(n: usize) -> Self {
        Selection {
            hard: vec![true; n],
            gate: None,
            kept: (0..n).collect(),
        }
    }

    pub fn keep_fraction(&self) -> f64 {
        if self.hard.is_empty() {
            return 0.0;
        }
        self.kept.len() as f64 / self.hard.len() as f64
    }
}

fn kept_indices(hard: &[bool]) -> Vec<usize> {
    hard.iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

/// How a layer's selection gate is realized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectMode {
    /// No selection; every reference token participates.
    KeepAll,
    /// Soft probabilities as the gate (fully differentiable; used by
    /// gradient checks).
    Soft,
    /// Straight-through Gumbel-Softmax sample at temperature `tau`.
    Gumbel { tau: f64 },
    /// Deterministic argmax (inference).
    Argmax,
}

/// Scores reference tokens: `z = MLP(Norm(e))`, pooled context max over
/// tokens, two-logit head over `[context; z]` rows.
///
/// `context_src` switches the pooled context to a different token set (the
/// current frame for the "dts-t" variant); the default pools the reference
/// tokens themselves.
pub fn score(
    e_ref: &Tensor,
    params: &DtsParams,
    context_src: Option<&Tensor>,
) -> Result<SelectionScores> {
    let n = e_ref.rows();
    if n == 0 {
        return Err(Error::Contract("selector needs at least one token".into()));
    }
    let token_feat = |x: &Tensor| -> Result<Tensor> {
        let h = x.layer_norm(&params.ln_g, &params.ln_b, crate::attention::LN_EPS)?;
        Ok(h.matmul(&params.fc1_w)?.add_bias(&params.fc1_b)?.gelu())
    };
    let z = token_feat(e_ref)?;
    let ctx_tokens = match context_src {
        Some(src) => token_feat(src)?,
        None => z.clone(),
    };
    let d = z.row_len();
    let pooled = ctx_tokens.col_max()?.reshape(&[1, d])?;
    // Broadcast the pooled row to every token via a ones-column product.
    let ones = Tensor::full(&[n, 1], 1.0);
    let context = ones.matmul(&pooled)?;
    let cat = Tensor::concat_cols(&[&context, &z])?;
    let h = cat.matmul(&params.fc2_w)?.add_bias(&params.fc2_b)?.gelu();
    let logits = h.matmul(&params.out_w)?.add_bias(&params.out_b)?;
    let probs = logits.softmax_rows()?;
    Ok(SelectionScores { probs, logits })
}

/// Straight-through Gumbel-Softmax draw: per token, both logits receive
/// Gumbel noise, the softened softmax at temperature `tau` provides the
/// backward path, and the forward value is the exact one-hot argmax. A
/// token is kept iff the keep column wins.
pub fn gumbel_select<R: Rng>(
    scores: &SelectionScores,
    tau: f64,
    rng: &mut R,
) -> Result<Selection> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!(
            "gumbel temperature must be positive, got {tau}"
        )));
    }
    let n = scores.logits.rows();
    let mut noise = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        let u: f64 = rng.gen::<f64>().max(1e-300);
        noise.push(-(-u.ln()).ln());
    }
    let noise_t = Tensor::constant(&[n, 2], noise.clone())?;
    let soft = scores
        .logits
        .add(&noise_t)?
        .scale(1.0 / tau)
        .softmax_rows()?;
    let hard: Vec<bool> = {
        let l = scores.logits.data();
        (0..n)
            .map(|i| l[i * 2 + 1] + noise[i * 2 + 1] > l[i * 2] + noise[i * 2])
            .collect()
    };
    // gate = hard + soft_keep - detach(soft_keep): forward equals the hard
    // 0/1 value exactly, backward follows the soft keep probability.
    let soft_keep = soft.select_col(1)?;
    let hard_t = Tensor::constant(
        &[n],
        hard.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
    )?;
    let gate = hard_t.add(&soft_keep.sub(&soft_keep.detach())?)?;
    let kept = kept_indices(&hard);
    Ok(Selection {
        hard,
        gate: Some(gate),
        kept,
    })
}

/// Deterministic inference selection: keep iff the keep probability wins;
/// exact ties keep the token.
pub fn infer_select(scores: &SelectionScores) -> Selection {
    let d = scores.probs.data();
    let n = scores.probs.rows();
    let hard: Vec<bool> = (0..n).map(|i| d[i * 2 + 1] >= d[i * 2]).collect();
    let gate = Tensor::constant(
        &[n],
        hard.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
    )
    .expect("gate sized");
    let kept = kept_indices(&hard);
    Selection {
        hard,
        gate: Some(gate),
        kept,
    }
}

/// Fully soft gate: the keep probabilities themselves. Differentiable end
/// to end, used by finite-difference checks.
pub fn soft_select(scores: &SelectionScores) -> Result<Selection> {
    let gate = scores.probs.select_col(1)?;
    let n = scores.probs.rows();
    Ok(Selection {
        hard: vec![true; n],
        gate: Some(gate),
        kept: (0..n).collect(),
    })
}

/// Realizes a selection per mode.
pub fn select<R: Rng>(
    scores: &SelectionScores,
    mode: SelectMode,
    rng: &mut R,
) -> Result<Selection> {
    match mode {
        SelectMode::KeepAll => Ok(Selection::keep_all(scores.probs.rows())),
        SelectMode::Soft => soft_select(scores),
        SelectMode::Gumbel { tau } => gumbel_select(scores, tau, rng),
        SelectMode::Argmax => Ok(infer_select(scores)),
    }
}

/// Row-gather of the selected tokens, order preserved.
pub fn apply_selection(
    keys: &Tensor,
    values: &Tensor,
    hard: &[bool],
) -> Result<(Tensor, Tensor)> {
    if keys.rows() != hard.len() || values.rows() != hard.len() {
        return Err(Error::Shape {
            op: "apply_selection",
            lhs: vec![keys.rows()],
            rhs: vec![hard.len()],
        });
    }
    let idx = kept_indices(hard);
    Ok((keys.gather_rows(&idx)?, values.gather_rows(&idx)?))
}

// ── Selection-ratio tracking ────────────────────────────────────────

/// Per-layer bookkeeping of keep fractions during training. The running
/// mean is exact; the stabilized ratio is the mean over the final 10% of
/// recorded steps (at least one).
#[derive(Clone, Debug)]
pub struct RatioTracker {
    history: Vec<Vec<f64>>, // per layer, per recorded step
}

impl RatioTracker {
    pub fn new(layers: usize) -> Self {
        RatioTracker {
            history: vec![Vec::new(); layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.history.len()
    }

    /// Records one step's mean keep fraction per layer.
    pub fn record(&mut self, fracs: &[f64]) {
        debug_assert_eq!(fracs.len(), self.history.len());
        for (h, &f) in self.history.iter_mut().zip(fracs) {
            h.push(f);
        }
    }

    pub fn steps_recorded(&self) -> usize {
        self.history.first().map_or(0, |h| h.len())
    }

    /// Arithmetic mean over everything recorded.
    pub fn mean(&self, layer: usize) -> f64 {
        let h = &self.history[layer];
        if h.is_empty() {
            return 1.0;
        }
        h.iter().sum::<f64>() / h.len() as f64
    }

    /// Mean over the final 10% of steps — the ratio exported for memory
    /// capacities once training has stabilized.
    pub fn stabilized(&self, layer: usize) -> f64 {
        let h = &self.history[layer];
        if h.is_empty() {
            return 1.0;
        }
        let tail = (h.len() as f64 * 0.1).ceil() as usize;
        let tail = tail.clamp(1, h.len());
        let slice = &h[h.len() - tail..];
        slice.iter().sum::<f64>() / slice.len() as f64
    }

    pub fn stabilized_all(&self) -> Vec<f64> {
        (0..self.layers()).map(|l| self.stabilized(l)).collect()
    }
}
