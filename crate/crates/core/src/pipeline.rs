//! Losses, the training loop and streaming inference.
//!
//! Training unrolls short synthetic sequences: frame 0's mask is ground
//! truth, later reference masks are either ground truth (teacher forcing,
//! early steps) or the model's own detached prediction, matching inference
//! conditions. The loss per predicted frame is a weighted sum of
//! bootstrapped cross-entropy (hardest-pixel fraction annealed 1.0 -> 0.15
//! over the first 20% of steps) and soft Jaccard. Gradients accumulate over
//! micro-batches; the sum of micro-batch losses, each normalized by the
//! full batch size, reproduces the single-batch gradient exactly.
//!
//! Inference is streaming: one frame in, one mask out, with per-layer token
//! memory appended on store events (the first update stores the protected
//! initial frame) and maintained per policy. A step reads only the current
//! frame, the previous frame with its mask, and memory.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::attention::Block;
use crate::config::{MemoryKind, RunConfig};
use crate::decoder::{aggregate_objects, ObjectLogits};
use crate::dts::{RatioTracker, SelectMode};
use crate::embedding::{Frame, LabelRaster};
use crate::error::{Error, Result};
use crate::memory::{LayerMemory, MemoryPolicy};
use crate::metrics::{evaluate_sequence, EvalReport, EvalRow};
use crate::model::{
    ForwardOptions, FrameForward, FrameInputs, Model, SelectorVariant,
};
use crate::synth::Sequence;
use crate::tensor::{Adam, NoGradGuard, Tensor};

// ── Losses ──────────────────────────────────────────────────────────

const JACCARD_EPS: f64 = 1e-6;

fn narrow_valid(logits: &ObjectLogits, target: &LabelRaster) -> Result<Tensor> {
    if target.h != logits.h || target.w != logits.w {
        return Err(Error::Geometry(format!(
            "target {}x{} does not match logits {}x{}",
            target.h, target.w, logits.h, logits.w
        )));
    }
    if target.num_objects > logits.valid_objects {
        return Err(Error::ObjectCount {
            found: target.num_objects,
            max: logits.valid_objects,
        });
    }
    logits.logits.narrow_cols(0, logits.valid_objects + 1)
}

/// Cross-entropy over the hardest `keep_frac` fraction of pixels.
///
/// `keep_frac = 1` is plain mean cross-entropy. The kept set is the top
/// `ceil(keep_frac * pixels)` by loss value, ties broken by pixel index;
/// the selection itself is detached (standard bootstrapping).
pub fn bootstrapped_ce(
    logits: &ObjectLogits,
    target: &LabelRaster,
    keep_frac: f64,
) -> Result<Tensor> {
    if !(keep_frac > 0.0 && keep_frac <= 1.0) {
        return Err(Error::Domain(format!(
            "keep_frac must be in (0, 1], got {keep_frac}"
        )));
    }
    let valid = narrow_valid(logits, target)?;
    let log_probs = valid.log_softmax_rows()?;
    let targets: Vec<usize> = target.labels.iter().map(|&l| l as usize).collect();
    let ce = log_probs.select_per_row(&targets)?.scale(-1.0);
    let pixels = ce.numel();
    let k = ((keep_frac * pixels as f64).ceil() as usize).clamp(1, pixels);
    if k == pixels {
        return Ok(ce.mean_all());
    }
    let values = ce.to_vec();
    let mut order: Vec<usize> = (0..pixels).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    Ok(ce.gather_rows(&order)?.mean_all())
}

/// Differentiable IoU surrogate, averaged over object channels:
/// `1 - sum(p*y) / (sum(p) + sum(y) - sum(p*y) + eps)`.
pub fn soft_jaccard(logits: &ObjectLogits, target: &LabelRaster) -> Result<Tensor> {
    let m = logits.valid_objects;
    if m == 0 {
        return Err(Error::Contract("soft_jaccard needs at least one object".into()));
    }
    let probs = narrow_valid(logits, target)?.softmax_rows()?;
    let mut acc: Option<Tensor> = None;
    for id in 1..=m {
        let p = probs.select_col(id)?;
        let y: Vec<f64> = target
            .labels
            .iter()
            .map(|&l| if l as usize == id { 1.0 } else { 0.0 })
            .collect();
        let y_sum: f64 = y.iter().sum();
        let y_t = Tensor::constant(&[p.numel()], y)?;
        let inter = p.mul(&y_t)?.sum_all();
        let denom = p
            .sum_all()
            .add_scalar(y_sum + JACCARD_EPS)
            .sub(&inter)?;
        let term = Tensor::scalar(1.0).sub(&inter.div(&denom)?)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("m >= 1").scale(1.0 / m as f64))
}

// ── Memory bank ─────────────────────────────────────────────────────

/// Per-layer memories plus the policy and score bookkeeping shared by
/// training unrolls and inference sessions.
pub struct MemoryBank {
    pub layers: Vec<LayerMemory>,
    pub policy: MemoryPolicy,
    /// Received-attention of stored tokens from the most recent forward.
    last_seen: Vec<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(policy: MemoryPolicy, n: usize, c: usize) -> Result<Self> {
        let layers = policy.build_memories(n, c)?;
        let last_seen = vec![Vec::new(); layers.len()];
        Ok(MemoryBank {
            layers,
            policy,
            last_seen,
        })
    }

    /// Records this forward pass's memory attention scores.
    pub fn observe(&mut self, fwd: &FrameForward) {
        for (slot, stats) in self.last_seen.iter_mut().zip(&fwd.layer_stats) {
            *slot = stats.mem_received.clone();
        }
    }

    /// True when processing step `t` triggers a store event. The first
    /// update (t = 1) stores the protected initial frame; afterwards every
    /// `store_interval`-th step stores its reference frame.
    pub fn is_store_event(&self, t: usize) -> bool {
        t == 1 || t % self.policy.store_interval == 0
    }

    /// Appends this step's selected reference tokens and maintains each
    /// layer. `t` is the current step; the stored tokens belong to frame
    /// `t - 1` (the reference).
    pub fn store_event(&mut self, fwd: &FrameForward, t: usize) -> Result<()> {
        let protected = t == 1;
        let ref_frame = t - 1;
        for (l, mem) in self.layers.iter_mut().enumerate() {
            let Some(cand) = &fwd.candidates[l] else {
                return Err(Error::Contract(
                    "store event requires collected memory candidates".into(),
                ));
            };
            mem.append(
                &cand.keys,
                &cand.values,
                &cand.positions,
                &cand.scores,
                ref_frame,
                protected,
            )?;
            match self.policy.kind {
                MemoryKind::Fifo => {
                    mem.maintain_fifo();
                }
                MemoryKind::Topk => {
                    // Scores: latest read for old tokens, this pass's
                    // reference attention for the appended ones. The append
                    // may have been clamped (protected frames), so trim.
                    let mut scores = self.last_seen[l].clone();
                    scores.extend_from_slice(&cand.scores);
                    scores.truncate(mem.len());
                    mem.maintain_topk(&scores, Some(self.policy.topk))?;
                }
            }
            self.last_seen[l].clear(); // stale after mutation
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|m| m.len()).collect()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|m| m.len()).sum()
    }
}

// ── Schedules ───────────────────────────────────────────────────────

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t >= 1.0 {
        return b;
    }
    a + (b - a) * t.max(0.0)
}

/// Hardest-pixel fraction at `step`: 1.0 annealed to the configured floor
/// over the first `bootstrap_anneal_frac` of training.
pub fn bootstrap_keep_frac(cfg: &RunConfig, step: usize) -> f64 {
    let anneal = (cfg.train.bootstrap_anneal_frac * cfg.train.steps as f64).ceil();
    if anneal <= 0.0 {
        return cfg.train.bootstrap_final_keep;
    }
    lerp(
        1.0,
        cfg.train.bootstrap_final_keep,
        step as f64 / anneal,
    )
}

/// Gumbel temperature at `step`: linear from `tau_start` to `tau_end`.
pub fn gumbel_tau(cfg: &RunConfig, step: usize) -> f64 {
    let total = (cfg.train.steps.saturating_sub(1)).max(1) as f64;
    lerp(cfg.train.tau_start, cfg.train.tau_end, step as f64 / total)
}

/// True while the reference mask comes from ground truth.
pub fn teacher_forcing(cfg: &RunConfig, step: usize) -> bool {
    (step as f64) < cfg.train.teacher_forcing_frac * cfg.train.steps as f64
}

// ── Training ────────────────────────────────────────────────────────

/// One training sequence plus the seed of its private Gumbel stream
/// (deterministic regardless of micro-batch grouping).
pub struct SeqSample {
    pub seq: Sequence,
    pub gumbel_seed: u64,
}

#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub loss_ce: f64,
    pub loss_jaccard: f64,
    pub keep_fracs: Vec<f64>,
}

pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over a combined word.
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(b.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub model: Model,
    pub cfg: RunConfig,
    opt: Adam,
    pub tracker: RatioTracker,
    pub metrics: Vec<StepMetrics>,
    selector: SelectorVariant,
}

struct SeqOutcome {
    loss: Tensor,
    ce: f64,
    jaccard: f64,
    keep_fracs: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.train.seed);
        let model = Model::new(&cfg.model, &mut rng)?;
        let opt = Adam::new(cfg.train.lr_pre, model.params());
        let tracker = RatioTracker::new(cfg.model.layers);
        let selector = SelectorVariant::parse(&cfg.train.selector)?;
        Ok(Trainer {
            model,
            cfg,
            opt,
            tracker,
            metrics: Vec::new(),
            selector,
        })
    }

    /// Deterministic batch for a step: sequences and Gumbel streams are
    /// seeded from (seed, step, index), independent of batching.
    pub fn gen_batch(&self, step: usize) -> Result<Vec<SeqSample>> {
        let mut cfg = self.cfg.synth.clone();
        cfg.frames = self.cfg.train.seq_len;
        (0..self.cfg.train.batch)
            .map(|i| {
                let seq = crate::synth::gen_sequence(
                    &cfg,
                    mix_seed(self.cfg.train.seed, step as u64, i as u64),
                )?;
                Ok(SeqSample {
                    seq,
                    gumbel_seed: mix_seed(self.cfg.train.seed ^ 0xA5A5, step as u64, i as u64),
                })
            })
            .collect()
    }

    fn forward_options(&self, step: usize) -> ForwardOptions {
        let select = match self.selector {
            SelectorVariant::Off => SelectMode::KeepAll,
            _ => SelectMode::Gumbel {
                tau: gumbel_tau(&self.cfg, step),
            },
        };
        ForwardOptions {
            decoup: crate::attention::DecoupMode::parse(&self.cfg.train.decoup)
                .expect("validated"),
            select,
            selector: self.selector,
            collect_candidates: true,
        }
    }

    /// Unrolls one sequence and returns its total loss (sum over predicted
    /// frames) plus bookkeeping.
    fn sequence_loss(&self, sample: &SeqSample, step: usize) -> Result<SeqOutcome> {
        let train = &self.cfg.train;
        let seq = &sample.seq;
        let layers = self.cfg.model.layers;
        let mut rng = ChaCha12Rng::seed_from_u64(sample.gumbel_seed);
        let policy = MemoryPolicy::new(
            &self.cfg.memory,
            vec![1.0; layers], // training stores whatever the selector keeps
            self.cfg.model.n(),
        )?;
        let mut bank = MemoryBank::new(policy, self.cfg.model.n(), self.cfg.model.c)?;
        let opts = self.forward_options(step);
        let keep_frac = bootstrap_keep_frac(&self.cfg, step);
        let teacher = teacher_forcing(&self.cfg, step);

        let mut losses: Vec<Tensor> = Vec::new();
        let mut ce_sum = 0.0;
        let mut jac_sum = 0.0;
        let mut frac_sum = vec![0.0; layers];
        let mut prev_pred: Option<LabelRaster> = None;

        // A one-frame sequence degenerates to static matching: the frame
        // is its own reference with the ground-truth mask.
        let steps: Vec<(usize, usize)> = if seq.frames.len() == 1 {
            vec![(0, 0)]
        } else {
            (1..seq.frames.len()).map(|t| (t, t - 1)).collect()
        };

        for (t, r) in steps {
            let ref_mask: &LabelRaster = if t <= 1 || teacher {
                &seq.rasters[r]
            } else {
                prev_pred.as_ref().unwrap_or(&seq.rasters[r])
            };
            let inputs = FrameInputs {
                cur: &seq.frames[t],
                reference: &seq.frames[r],
                ref_mask,
                memories: Some(&bank.layers),
                frame_index: t,
            };
            let fwd = self.model.forward_frame(&inputs, &opts, &mut rng)?;
            let ce = bootstrapped_ce(&fwd.logits, &seq.rasters[t], keep_frac)?;
            let jac = soft_jaccard(&fwd.logits, &seq.rasters[t])?;
            ce_sum += ce.item();
            jac_sum += jac.item();
            let mut frame_loss = ce
                .scale(train.ce_weight)
                .add(&jac.scale(train.jaccard_weight))?;
            if train.ratio_loss_weight > 0.0 {
                if let Some(aux) = ratio_regularizer(&fwd)? {
                    frame_loss = frame_loss.add(&aux.scale(train.ratio_loss_weight))?;
                }
            }
            losses.push(frame_loss);
            for (l, s) in fwd.layer_stats.iter().enumerate() {
                frac_sum[l] += s.keep_frac;
            }
            prev_pred = Some(aggregate_objects(&fwd.logits)?);
            bank.observe(&fwd);
            if t >= 1 && bank.is_store_event(t) {
                bank.store_event(&fwd, t)?;
            }
        }

        let n_frames = losses.len() as f64;
        let mut total = losses.pop().expect("at least one frame");
        for l in &losses {
            total = total.add(l)?;
        }
        Ok(SeqOutcome {
            loss: total,
            ce: ce_sum / n_frames,
            jaccard: jac_sum / n_frames,
            keep_fracs: frac_sum.iter().map(|&f| f / n_frames).collect(),
        })
    }

    /// One optimizer step over a batch, accumulating gradients across
    /// `grad_accum` micro-batches.
    pub fn train_step(&mut self, samples: &[SeqSample], step: usize) -> Result<StepMetrics> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        self.model.zero_grads();
        let norm = 1.0 / samples.len() as f64;
        let chunk = samples.len().div_ceil(self.cfg.train.grad_accum);
        let mut ce = 0.0;
        let mut jac = 0.0;
        let mut fracs = vec![0.0; self.cfg.model.layers];
        for micro in samples.chunks(chunk) {
            let mut micro_loss: Option<Tensor> = None;
            for sample in micro {
                let out = self.sequence_loss(sample, step)?;
                ce += out.ce;
                jac += out.jaccard;
                for (a, b) in fracs.iter_mut().zip(&out.keep_fracs) {
                    *a += b;
                }
                let scaled = out.loss.scale(norm);
                micro_loss = Some(match micro_loss {
                    Some(acc) => acc.add(&scaled)?,
                    None => scaled,
                });
            }
            let loss = micro_loss.expect("non-empty micro-batch");
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at step {step}: loss={value}, \
                     ce={ce}, jaccard={jac}"
                )));
            }
            loss.backward()?;
        }
        self.opt.step(self.model.params())?;
        let inv = 1.0 / samples.len() as f64;
        for f in fracs.iter_mut() {
            *f *= inv;
        }
        self.tracker.record(&fracs);
        let metrics = StepMetrics {
            step,
            loss: (ce + jac) * inv,
            loss_ce: ce * inv,
            loss_jaccard: jac * inv,
            keep_fracs: fracs,
        };
        self.metrics.push(metrics.clone());
        Ok(metrics)
    }

    /// Runs the configured number of steps with freshly generated data.
    pub fn run(&mut self) -> Result<()> {
        for step in 0..self.cfg.train.steps {
            let batch = self.gen_batch(step)?;
            let m = self.train_step(&batch, step)?;
            if step % 50 == 0 {
                log::info!(
                    "step {}: loss {:.4} (ce {:.4}, jaccard {:.4})",
                    step,
                    m.loss,
                    m.loss_ce,
                    m.loss_jaccard
                );
            }
        }
        Ok(())
    }

    /// Stabilized per-layer selection ratios (mean over the final 10% of
    /// recorded steps); all ones when the selector is off.
    pub fn stabilized_ratios(&self) -> Vec<f64> {
        match self.selector {
            SelectorVariant::Off => vec![1.0; self.cfg.model.layers],
            _ => self.tracker.stabilized_all(),
        }
    }

    /// Training log: one row per step with loss components and per-layer
    /// keep fractions.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,loss,loss_ce,loss_jaccard");
        for l in 0..self.cfg.model.layers {
            out.push_str(&format!(",r_{l}"));
        }
        out.push('\n');
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{},{},{}",
                m.step, m.loss, m.loss_ce, m.loss_jaccard
            ));
            for f in &m.keep_fracs {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Mean squared deviation of every layer's mean keep probability from 0.5
/// (the fixed-rate ablation's auxiliary loss).
fn ratio_regularizer(fwd: &FrameForward) -> Result<Option<Tensor>> {
    let mut acc: Option<Tensor> = None;
    for probs in fwd.keep_probs.iter().flatten() {
        let dev = probs.mean_all().add_scalar(-0.5);
        let sq = dev.mul(&dev)?;
        acc = Some(match acc {
            Some(a) => a.add(&sq)?,
            None => sq,
        });
    }
    Ok(acc)
}

// ── Inference ───────────────────────────────────────────────────────

/// Aggregated attention-decomposition statistics of one layer across an
/// inference run (the data behind the per-layer analysis export).
#[derive(Clone, Debug, Default)]
pub struct LayerAttentionAgg {
    pub sum_mem: f64,
    pub sum_ref: f64,
    pub sum_self: f64,
    pub argmax_counts: [usize; 3],
    pub queries: usize,
}

impl LayerAttentionAgg {
    fn absorb(&mut self, decomp: &crate::attention::AttentionDecomposition) {
        for q in 0..decomp.w_mem.len() {
            self.sum_mem += decomp.w_mem[q];
            self.sum_ref += decomp.w_ref[q];
            self.sum_self += decomp.w_self[q];
            let idx = match decomp.argmax_block[q] {
                Block::Memory => 0,
                Block::Reference => 1,
                Block::Current => 2,
            };
            self.argmax_counts[idx] += 1;
            self.queries += 1;
        }
    }

    pub fn means(&self) -> [f64; 3] {
        let n = self.queries.max(1) as f64;
        [self.sum_mem / n, self.sum_ref / n, self.sum_self / n]
    }

    /// Modal dominant block and the fraction of queries choosing it.
    pub fn modal_block(&self) -> (&'static str, f64) {
        let names = ["mem", "ref", "self"];
        let total: usize = self.argmax_counts.iter().sum();
        let (i, &c) = self
            .argmax_counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .unwrap();
        (names[i], c as f64 / total.max(1) as f64)
    }
}

/// Streaming mask propagation over one video.
pub struct InferenceSession<'m> {
    model: &'m Model,
    pub bank: MemoryBank,
    opts: ForwardOptions,
    prev_frame: Option<Frame>,
    prev_mask: Option<LabelRaster>,
    t: usize,
    num_objects: usize,
    first_mask: LabelRaster,
    rng: ChaCha12Rng,
    pub attention_agg: Vec<LayerAttentionAgg>,
    /// Peak total stored tokens, for streaming-bound checks.
    pub peak_memory: usize,
}

impl<'m> InferenceSession<'m> {
    pub fn new(
        model: &'m Model,
        policy: MemoryPolicy,
        first_mask: LabelRaster,
        opts: ForwardOptions,
    ) -> Result<Self> {
        if first_mask.num_objects > model.cfg.m_max {
            return Err(Error::ObjectCount {
                found: first_mask.num_objects,
                max: model.cfg.m_max,
            });
        }
        if first_mask.num_objects == 0 {
            return Err(Error::Contract(
                "first mask must contain at least one object".into(),
            ));
        }
        if first_mask.h != model.cfg.h || first_mask.w != model.cfg.w {
            return Err(Error::Geometry(format!(
                "first mask {}x{} does not match model {}x{}",
                first_mask.h, first_mask.w, model.cfg.h, model.cfg.w
            )));
        }
        if policy.ratios.len() != model.cfg.layers {
            return Err(Error::Config(format!(
                "policy carries {} ratios for {} layers",
                policy.ratios.len(),
                model.cfg.layers
            )));
        }
        let bank = MemoryBank::new(policy, model.cfg.n(), model.cfg.c)?;
        let num_objects = first_mask.num_objects;
        let agg = vec![LayerAttentionAgg::default(); model.cfg.layers];
        Ok(InferenceSession {
            model,
            bank,
            opts,
            prev_frame: None,
            prev_mask: None,
            t: 0,
            num_objects,
            first_mask,
            rng: ChaCha12Rng::seed_from_u64(0),
            attention_agg: agg,
            peak_memory: 0,
        })
    }

    pub fn frames_processed(&self) -> usize {
        self.t
    }

    /// Consumes the next frame, returns its predicted mask. Frame 0 returns
    /// the given mask unchanged.
    pub fn step(&mut self, frame: Frame) -> Result<LabelRaster> {
        let _guard = NoGradGuard::new();
        if self.t == 0 {
            let out = self.first_mask.clone();
            self.prev_frame = Some(frame);
            self.prev_mask = Some(out.clone());
            self.t = 1;
            return Ok(out);
        }
        let t = self.t;
        let prev_frame = self.prev_frame.take().expect("previous frame present");
        let prev_mask = self.prev_mask.take().expect("previous mask present");
        let fwd = {
            let inputs = FrameInputs {
                cur: &frame,
                reference: &prev_frame,
                ref_mask: &prev_mask,
                memories: Some(&self.bank.layers),
                frame_index: t,
            };
            self.model.forward_frame(&inputs, &self.opts, &mut self.rng)?
        };
        for (agg, stats) in self.attention_agg.iter_mut().zip(&fwd.layer_stats) {
            agg.absorb(&stats.decomp);
        }
        let mut pred = aggregate_objects(&fwd.logits)?;
        pred.num_objects = self.num_objects;
        self.bank.observe(&fwd);
        if self.bank.is_store_event(t) {
            self.bank.store_event(&fwd, t)?;
        }
        self.peak_memory = self.peak_memory.max(self.bank.total());
        self.prev_frame = Some(frame);
        self.prev_mask = Some(pred.clone());
        self.t += 1;
        Ok(pred)
    }
}

/// Propagates the first mask through a video, returning one raster per
/// frame (frame 0 echoes the input mask).
pub fn infer_video<I>(
    model: &Model,
    frames: I,
    first_mask: &LabelRaster,
    policy: MemoryPolicy,
    opts: &ForwardOptions,
) -> Result<Vec<LabelRaster>>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let mut session = InferenceSession::new(model, policy, first_mask.clone(), *opts)?;
    let mut out = Vec::new();
    for frame in frames {
        out.push(session.step(frame?)?);
    }
    if out.is_empty() {
        return Err(Error::Contract("video has no frames".into()));
    }
    Ok(out)
}

/// Runs inference over held-out sequences and scores them.
pub fn evaluate_on_sequences(
    model: &Model,
    seqs: &[Sequence],
    policy: &MemoryPolicy,
    opts: &ForwardOptions,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (i, seq) in seqs.iter().enumerate() {
        let preds = infer_video(
            model,
            seq.frames.iter().map(|f| Ok(f.clone())),
            &seq.rasters[0],
            policy.clone(),
            opts,
        )?;
        for (object, j, f) in
            evaluate_sequence(&preds, &seq.rasters, seq.rasters[0].num_objects)?
        {
            report.push(EvalRow {
                sequence: format!("seq_{i:03}"),
                object,
                j,
                f,
            });
        }
    }
    Ok(report)
}
