//! Layer-wise key/value token memory.
//!
//! Each layer owns one [`LayerMemory`] holding the reference tokens selected
//! on past store events, with per-token provenance. Two maintenance
//! policies keep it within the layer capacity `c_l = floor(r_l * n * cap)`:
//!
//! - FIFO evicts whole stored frames, oldest first; tokens of the initial
//!   frame are protected and never leave.
//! - Top-k evicts per token, keeping the highest received-attention scores
//!   from the most recent forward pass (ties keep older tokens), again
//!   never touching protected tokens.
//!
//! A forward pass only reads memory; updates happen through explicit
//! [`LayerMemory::append`] / maintenance calls by the inference session.

use crate::config::{MemoryConfig, MemoryKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Provenance of one stored token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenOrigin {
    pub frame: usize,
    pub position: usize,
}

#[derive(Clone, Debug)]
struct StoredFrame {
    frame: usize,
    protected: bool,
    /// Row-major `[tokens, width]` buffers.
    keys: Vec<f64>,
    values: Vec<f64>,
    positions: Vec<usize>,
    /// Received-attention score per token, refreshed on every read.
    scores: Vec<f64>,
}

impl StoredFrame {
    fn len(&self) -> usize {
        self.positions.len()
    }
}

/// Per-layer growable token store with capacity enforcement.
#[derive(Clone, Debug)]
pub struct LayerMemory {
    width: usize,
    capacity: usize,
    frames: Vec<StoredFrame>,
}

/// Per-layer token capacity: `floor(r * n * cap)`, raised to the protected
/// token count when the ratio is positive; a zero ratio stores nothing.
pub fn capacity(ratio: f64, n: usize, cap: usize, protected: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Domain(format!(
            "selection ratio {ratio} outside [0, 1]"
        )));
    }
    if ratio == 0.0 {
        return Ok(0);
    }
    Ok(((ratio * n as f64 * cap as f64).floor() as usize).max(protected))
}

impl LayerMemory {
    pub fn new(width: usize, capacity: usize) -> Self {
        LayerMemory {
            width,
            capacity,
            frames: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.iter().map(|f| f.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn protected_count(&self) -> usize {
        self.frames
            .iter()
            .filter(|f| f.protected)
            .map(|f| f.len())
            .sum()
    }

    /// Appends one frame's selected tokens. A zero-capacity layer silently
    /// stores nothing. Protected appends are truncated to the capacity so
    /// protected tokens can always coexist with the budget; unprotected
    /// appends are left to the maintenance pass.
    pub fn append(
        &mut self,
        keys: &[f64],
        values: &[f64],
        positions: &[usize],
        scores: &[f64],
        frame: usize,
        protected: bool,
    ) -> Result<()> {
        if keys.len() != positions.len() * self.width
            || values.len() != positions.len() * self.width
        {
            return Err(Error::Contract(format!(
                "append of {} positions with {} key values (width {})",
                positions.len(),
                keys.len(),
                self.width
            )));
        }
        if scores.len() != positions.len() {
            return Err(Error::Contract(
                "append scores must match token count".into(),
            ));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let mut take = positions.len();
        if protected {
            take = take.min(self.capacity);
        }
        if take == 0 {
            return Ok(());
        }
        self.frames.push(StoredFrame {
            frame,
            protected,
            keys: keys[..take * self.width].to_vec(),
            values: values[..take * self.width].to_vec(),
            positions: positions[..take].to_vec(),
            scores: scores[..take].to_vec(),
        });
        Ok(())
    }

    /// Evicts whole stored frames, oldest unprotected first, until within
    /// capacity. Returns the evicted provenance in eviction order.
    pub fn maintain_fifo(&mut self) -> Vec<TokenOrigin> {
        let mut evicted = Vec::new();
        while self.len() > self.capacity {
            let Some(idx) = self.frames.iter().position(|f| !f.protected) else {
                break; // only protected frames remain
            };
            let f = self.frames.remove(idx);
            evicted.extend(
                f.positions
                    .iter()
                    .map(|&position| TokenOrigin {
                        frame: f.frame,
                        position,
                    }),
            );
        }
        evicted
    }

    /// Keeps protected tokens plus the highest-scoring unprotected tokens.
    ///
    /// `scores` must cover the current contents in provenance order (the
    /// received-attention mass from the most recent forward pass). The
    /// retention target is the capacity, further limited by `topk` when the
    /// policy retains fewer tokens than fit. Ties keep older tokens.
    pub fn maintain_topk(
        &mut self,
        scores: &[f64],
        topk: Option<usize>,
    ) -> Result<Vec<TokenOrigin>> {
        let n = self.len();
        if scores.len() != n {
            return Err(Error::Contract(format!(
                "top-k maintenance got {} scores for {} stored tokens",
                scores.len(),
                n
            )));
        }
        if n <= self.capacity {
            // Still refresh the stored scores.
            self.store_scores(scores);
            return Ok(Vec::new());
        }
        self.store_scores(scores);
        let protected = self.protected_count();
        let target = topk
            .unwrap_or(self.capacity)
            .min(self.capacity)
            .max(protected);

        // Rank unprotected tokens by (score desc, age asc).
        let mut ranked: Vec<(f64, usize)> = Vec::new(); // (score, seq)
        let mut seq = 0usize;
        for f in &self.frames {
            for i in 0..f.len() {
                if !f.protected {
                    ranked.push((f.scores[i], seq));
                }
                seq += 1;
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let keep_budget = target - protected;
        let keep: std::collections::HashSet<usize> = ranked
            .iter()
            .take(keep_budget)
            .map(|&(_, seq)| seq)
            .collect();

        let mut evicted = Vec::new();
        let mut seq = 0usize;
        let mut new_frames = Vec::new();
        for f in std::mem::take(&mut self.frames) {
            if f.protected {
                seq += f.len();
                new_frames.push(f);
                continue;
            }
            let mut kept = StoredFrame {
                frame: f.frame,
                protected: false,
                keys: Vec::new(),
                values: Vec::new(),
                positions: Vec::new(),
                scores: Vec::new(),
            };
            for i in 0..f.len() {
                if keep.contains(&seq) {
                    kept.keys
                        .extend_from_slice(&f.keys[i * self.width..(i + 1) * self.width]);
                    kept.values
                        .extend_from_slice(&f.values[i * self.width..(i + 1) * self.width]);
                    kept.positions.push(f.positions[i]);
                    kept.scores.push(f.scores[i]);
                } else {
                    evicted.push(TokenOrigin {
                        frame: f.frame,
                        position: f.positions[i],
                    });
                }
                seq += 1;
            }
            if kept.len() > 0 {
                new_frames.push(kept);
            }
        }
        self.frames = new_frames;
        Ok(evicted)
    }

    fn store_scores(&mut self, scores: &[f64]) {
        let mut offset = 0;
        for f in &mut self.frames {
            let n = f.len();
            f.scores.copy_from_slice(&scores[offset..offset + n]);
            offset += n;
        }
    }

    /// Contiguous key/value views in provenance (append) order, as constant
    /// tensors suitable for attention concatenation. Empty memory yields
    /// `0 x width` tensors.
    pub fn read(&self) -> (Tensor, Tensor) {
        let n = self.len();
        let mut keys = Vec::with_capacity(n * self.width);
        let mut values = Vec::with_capacity(n * self.width);
        for f in &self.frames {
            keys.extend_from_slice(&f.keys);
            values.extend_from_slice(&f.values);
        }
        (
            Tensor::constant(&[n, self.width], keys).expect("key buffer sized"),
            Tensor::constant(&[n, self.width], values).expect("value buffer sized"),
        )
    }

    /// Provenance in storage order.
    pub fn origins(&self) -> Vec<TokenOrigin> {
        self.frames
            .iter()
            .flat_map(|f| {
                f.positions.iter().map(|&position| TokenOrigin {
                    frame: f.frame,
                    position,
                })
            })
            .collect()
    }

    /// Frames currently stored, oldest first (frame index, token count,
    /// protected flag) — the debug dump behind the provenance CSV.
    pub fn frame_summary(&self) -> Vec<(usize, usize, bool)> {
        self.frames
            .iter()
            .map(|f| (f.frame, f.len(), f.protected))
            .collect()
    }

    /// True if any stored token originates from `frame`.
    pub fn contains_frame(&self, frame: usize) -> bool {
        self.frames.iter().any(|f| f.frame == frame && f.len() > 0)
    }
}

/// Resolved memory policy for one inference session.
#[derive(Clone, Debug)]
pub struct MemoryPolicy {
    pub kind: MemoryKind,
    pub store_interval: usize,
    pub cap: usize,
    pub topk: usize,
    /// Per-layer selection ratios driving Eq.-style capacities.
    pub ratios: Vec<f64>,
}

impl MemoryPolicy {
    pub fn new(cfg: &MemoryConfig, ratios: Vec<f64>, n: usize) -> Result<Self> {
        cfg.validate()?;
        if let Some(&r) = ratios.iter().find(|&&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Config(format!(
                "selection ratio {r} outside [0, 1]"
            )));
        }
        Ok(MemoryPolicy {
            kind: cfg.kind,
            store_interval: cfg.store_interval,
            cap: cfg.cap,
            topk: cfg.effective_topk(n),
            ratios,
        })
    }

    pub fn layer_capacity(&self, layer: usize, n: usize) -> Result<usize> {
        capacity(self.ratios[layer], n, self.cap, 0)
    }

    /// Fresh per-layer memories for an `n`-token grid of width `c`.
    pub fn build_memories(&self, n: usize, c: usize) -> Result<Vec<LayerMemory>> {
        (0..self.ratios.len())
            .map(|l| Ok(LayerMemory::new(c, self.layer_capacity(l, n)?)))
            .collect()
    }
}
