//! Run configuration: model geometry, training schedule, memory policy and
//! synthetic-data settings, loaded from a single human-readable TOML file.

use std::path::Path;
use std::sync::atomic::{AtomicU8, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── Floating-point mode ─────────────────────────────────────────────

/// Process-global numeric mode.
///
/// `F64` is the correctness mode used by every test and by finite-difference
/// gradient checks. `F32` rounds each operation result (and every parameter
/// update) to `f32` precision; it is the training mode. Storage stays `f64`
/// so the two modes share one code path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FpMode {
    #[default]
    F64,
    F32,
}

static FP_MODE: AtomicU8 = AtomicU8::new(0);

pub fn set_fp_mode(mode: FpMode) {
    FP_MODE.store(if mode == FpMode::F32 { 1 } else { 0 }, Ordering::Relaxed);
}

pub fn fp_mode() -> FpMode {
    if FP_MODE.load(Ordering::Relaxed) == 1 {
        FpMode::F32
    } else {
        FpMode::F64
    }
}

/// Round one value to the given precision.
#[inline]
pub fn quantize_with(mode: FpMode, x: f64) -> f64 {
    match mode {
        FpMode::F64 => x,
        FpMode::F32 => x as f32 as f64,
    }
}

/// Round one value to the active precision.
#[inline]
pub fn quantize(x: f64) -> f64 {
    quantize_with(fp_mode(), x)
}

/// Round a buffer in place to the active precision.
#[inline]
pub(crate) fn quantize_slice(v: &mut [f64]) {
    if fp_mode() == FpMode::F32 {
        for x in v {
            *x = *x as f32 as f64;
        }
    }
}

// ── Model geometry ──────────────────────────────────────────────────

/// Static geometry and capacity of the transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frame height in pixels.
    pub h: usize,
    /// Frame width in pixels.
    pub w: usize,
    /// Patch stride: one token per non-overlapping `p`×`p` patch.
    pub p: usize,
    /// Embedding dimension.
    pub c: usize,
    /// Number of transformer layers.
    pub layers: usize,
    /// Attention head count; must divide `c`.
    pub heads: usize,
    /// Maximum simultaneous objects (label ids 1..=m_max).
    pub m_max: usize,
    /// Layers whose reference value tokens receive the mask embedding.
    /// Empty means "all layers" (the default).
    pub mask_add_layers: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h: 64,
            w: 64,
            p: 16,
            c: 32,
            layers: 4,
            heads: 2,
            m_max: 4,
            mask_add_layers: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// Tokens per frame.
    pub fn n(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    /// Token grid (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.p, self.w / self.p)
    }

    /// Per-head dimension.
    pub fn d_k(&self) -> usize {
        self.c / self.heads
    }

    /// True when layer `l` adds the mask embedding to reference values.
    pub fn mask_added_at(&self, layer: usize) -> bool {
        if self.mask_add_layers.is_empty() {
            true
        } else {
            self.mask_add_layers.contains(&layer)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.h % self.p != 0 || self.w % self.p != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch stride {}",
                self.h, self.w, self.p
            )));
        }
        if self.p < 4 || !self.p.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch stride {} must be a power of two >= 4 (decoder upsamples to 1/4 scale)",
                self.p
            )));
        }
        if self.heads == 0 || self.c % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} not divisible by {} heads",
                self.c, self.heads
            )));
        }
        if self.c % 2 != 0 {
            return Err(Error::Config("embedding dim must be even".into()));
        }
        if self.n() == 0 {
            return Err(Error::Config("empty token grid".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer required".into()));
        }
        if self.m_max == 0 {
            return Err(Error::Config("m_max must be positive".into()));
        }
        if let Some(&l) = self.mask_add_layers.iter().find(|&&l| l >= self.layers) {
            return Err(Error::Config(format!(
                "mask_add_layers entry {} out of range (layers={})",
                l, self.layers
            )));
        }
        Ok(())
    }
}

// ── Training schedule ───────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    /// Sequences per optimizer step (before accumulation split).
    pub batch: usize,
    /// Number of micro-batches each step's gradient is accumulated over.
    pub grad_accum: usize,
    /// Frames per training sequence.
    pub seq_len: usize,
    /// Learning rate of the synthetic (pre-training style) stage.
    pub lr_pre: f64,
    /// Learning rate of a main stage on real data; kept for config parity.
    pub lr_main: f64,
    /// Weight of the bootstrapped cross-entropy term.
    pub ce_weight: f64,
    /// Weight of the soft-Jaccard term.
    pub jaccard_weight: f64,
    /// Hardest-pixel fraction reached after annealing from 1.0.
    pub bootstrap_final_keep: f64,
    /// Fraction of steps over which the keep fraction anneals.
    pub bootstrap_anneal_frac: f64,
    /// Fraction of steps during which the reference mask is ground truth;
    /// afterwards the model's own detached prediction is used.
    pub teacher_forcing_frac: f64,
    /// Gumbel-Softmax temperature at step 0 (linear anneal to `tau_end`).
    pub tau_start: f64,
    pub tau_end: f64,
    /// Token-selector variant: "dts" (reference-pooled context), "dts-t"
    /// (current-frame-pooled context) or "off" (keep every token).
    pub selector: String,
    /// Optional auxiliary loss pulling every layer's keep rate to 0.5.
    pub ratio_loss_weight: f64,
    /// Attention decoupling mode: "none", "decoup1", "decoup2", "both".
    pub decoup: String,
    pub seed: u64,
    pub fp_mode: FpMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            grad_accum: 2,
            seq_len: 5,
            lr_pre: 2e-4,
            lr_main: 1e-4,
            ce_weight: 0.5,
            jaccard_weight: 0.5,
            bootstrap_final_keep: 0.15,
            bootstrap_anneal_frac: 0.2,
            teacher_forcing_frac: 0.3,
            tau_start: 1.0,
            tau_end: 0.1,
            selector: "dts".into(),
            ratio_loss_weight: 0.0,
            decoup: "both".into(),
            seed: 7,
            fp_mode: FpMode::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.grad_accum == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "steps, batch, grad_accum and seq_len must be positive".into(),
            ));
        }
        if self.batch % self.grad_accum != 0 {
            return Err(Error::Config(format!(
                "batch {} not divisible by grad_accum {}",
                self.batch, self.grad_accum
            )));
        }
        if !(self.bootstrap_final_keep > 0.0 && self.bootstrap_final_keep <= 1.0) {
            return Err(Error::Config("bootstrap_final_keep must be in (0,1]".into()));
        }
        if self.tau_start <= 0.0 || self.tau_end <= 0.0 {
            return Err(Error::Domain("gumbel temperature must be positive".into()));
        }
        if self.lr_pre <= 0.0 || self.lr_main <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        match self.selector.as_str() {
            "dts" | "dts-t" | "off" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown selector '{other}' (expected dts, dts-t or off)"
                )))
            }
        }
        crate::attention::DecoupMode::parse(&self.decoup)?;
        Ok(())
    }
}

// ── Memory policy ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    /// Evict whole stored frames, oldest first.
    #[default]
    Fifo,
    /// Keep the highest-scoring tokens by received attention.
    Topk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub kind: MemoryKind,
    /// Store tokens every `store_interval` frames.
    pub store_interval: usize,
    /// Frame-level capacity factor of the per-layer token budget.
    pub cap: usize,
    /// Token count retained by top-k maintenance; 0 means "derive from the
    /// grid size" (520 tokens per 1024-token grid, rounded).
    pub topk: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            kind: MemoryKind::Fifo,
            store_interval: 5,
            cap: 3,
            topk: 0,
        }
    }
}

impl MemoryConfig {
    /// Effective top-k retention count for an `n`-token grid.
    pub fn effective_topk(&self, n: usize) -> usize {
        if self.topk > 0 {
            self.topk
        } else {
            ((520.0 * n as f64 / 1024.0).round() as usize).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.store_interval == 0 {
            return Err(Error::Config("store_interval must be >= 1".into()));
        }
        if self.cap == 0 {
            return Err(Error::Config("cap must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Synthetic data ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub h: usize,
    pub w: usize,
    pub num_objects: usize,
    /// Shape kinds drawn per object: any of "square", "disc", "triangle".
    pub shapes: Vec<String>,
    /// Object half-extent range in pixels.
    pub min_half: usize,
    pub max_half: usize,
    /// Maximum speed per axis, pixels per frame.
    pub max_speed: f64,
    /// Allow object paths to cross (later ids draw on top).
    pub occlusion: bool,
    /// Frames per sequence.
    pub frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            h: 64,
            w: 64,
            num_objects: 2,
            shapes: vec!["square".into(), "disc".into(), "triangle".into()],
            min_half: 7,
            max_half: 12,
            max_speed: 3.0,
            occlusion: true,
            frames: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.frames == 0 {
            return Err(Error::Config("empty synthetic geometry".into()));
        }
        if self.num_objects == 0 {
            return Err(Error::Config("num_objects must be >= 1".into()));
        }
        if self.min_half == 0 || self.min_half > self.max_half {
            return Err(Error::Config("invalid half-extent range".into()));
        }
        if 2 * self.max_half + 2 >= self.h.min(self.w) {
            return Err(Error::Config(format!(
                "objects of half-extent {} cannot be placed in a {}x{} frame",
                self.max_half, self.h, self.w
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("at least one shape kind required".into()));
        }
        for s in &self.shapes {
            if !matches!(s.as_str(), "square" | "disc" | "triangle") {
                return Err(Error::Config(format!("unknown shape kind '{s}'")));
            }
        }
        Ok(())
    }
}

// ── Top-level run configuration ─────────────────────────────────────

/// Everything a run needs, as stored in one TOML file.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub memory: MemoryConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.memory.validate()?;
        self.synth.validate()?;
        if self.synth.num_objects > self.model.m_max {
            return Err(Error::Config(format!(
                "synthetic num_objects {} exceeds model m_max {}",
                self.synth.num_objects, self.model.m_max
            )));
        }
        if self.synth.h != self.model.h || self.synth.w != self.model.w {
            return Err(Error::Config(
                "synthetic frame size must match model frame size".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 digest of the model section; checkpoints embed it so that
    /// evaluation can refuse geometry mismatches.
    pub fn model_digest(&self) -> String {
        crate::io::sha256_hex(
            toml::to_string(&self.model)
                .expect("model config serializes")
                .as_bytes(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn default_grid_is_sixteen_tokens() {
        let m = ModelConfig::default();
        assert_eq!(m.n(), 16);
        assert_eq!(m.grid(), (4, 4));
        assert_eq!(m.d_k(), 16);
    }

    #[test]
    fn bad_patch_stride_rejected() {
        let m = ModelConfig {
            p: 12,
            ..Default::default()
        };
        assert!(m.validate().is_err());
        let m = ModelConfig {
            h: 65,
            ..Default::default()
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        // Partial files fall back to defaults per section.
        let partial = RunConfig::from_toml("[train]\nsteps = 10\n").unwrap();
        assert_eq!(partial.train.steps, 10);
        assert_eq!(partial.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nstep = 10\n").is_err());
    }

    #[test]
    fn quantize_rounds_to_f32() {
        let x = 0.1f64 + 1e-12;
        assert_eq!(quantize_with(FpMode::F32, x), x as f32 as f64);
        assert_eq!(quantize_with(FpMode::F64, x), x);
    }

    #[test]
    fn default_topk_matches_grid_proportion() {
        let m = MemoryConfig::default();
        assert_eq!(m.effective_topk(1024), 520);
        assert_eq!(m.effective_topk(16), 8);
    }
}
