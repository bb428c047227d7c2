//! End-to-end gradient checks: finite differences through complete layers
//! and through the full model (embedding, hybrid attention with memory,
//! soft token selection, decoding, both loss terms).

mod common;

use common::fd_check_graph;
use onevos_core::attention::DecoupMode;
use onevos_core::config::{ModelConfig, SynthConfig};
use onevos_core::dts::SelectMode;
use onevos_core::memory::MemoryPolicy;
use onevos_core::model::{ForwardOptions, FrameInputs, Model, SelectorVariant};
use onevos_core::pipeline::{bootstrapped_ce, soft_jaccard, MemoryBank};
use onevos_core::synth::gen_sequence;
use onevos_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        h: 64,
        w: 64,
        p: 16,
        c: 32,
        layers: 2,
        heads: 2,
        m_max: 2,
        mask_add_layers: vec![],
    }
}

/// Builds a deterministic loss over one propagation step with populated
/// memory and a soft (differentiable) selection gate.
fn build_model_loss() -> (Model, impl Fn(&Model) -> Tensor) {
    let cfg = small_cfg();
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let model = Model::new(&cfg, &mut rng).unwrap();
    let synth = SynthConfig {
        h: 64,
        w: 64,
        num_objects: 2,
        frames: 3,
        ..SynthConfig::default()
    };
    let seq = gen_sequence(&synth, 5).unwrap();

    // Populate memory from a hard-selection pass (constants thereafter).
    let policy = MemoryPolicy::new(&Default::default(), vec![1.0; cfg.layers], cfg.n()).unwrap();
    let mut bank = MemoryBank::new(policy, cfg.n(), cfg.c).unwrap();
    {
        let mut r = ChaCha12Rng::seed_from_u64(7);
        let inputs = FrameInputs {
            cur: &seq.frames[1],
            reference: &seq.frames[0],
            ref_mask: &seq.rasters[0],
            memories: Some(&bank.layers),
            frame_index: 1,
        };
        let opts = ForwardOptions {
            decoup: DecoupMode::Both,
            select: SelectMode::Argmax,
            selector: SelectorVariant::Dts,
            collect_candidates: true,
        };
        let fwd = model.forward_frame(&inputs, &opts, &mut r).unwrap();
        bank.observe(&fwd);
        bank.store_event(&fwd, 1).unwrap();
        assert!(bank.total() > 0, "memory must be populated for the check");
    }

    let eval = move |model: &Model| -> Tensor {
        let mut r = ChaCha12Rng::seed_from_u64(11); // unused in Soft mode
        let inputs = FrameInputs {
            cur: &seq.frames[2],
            reference: &seq.frames[1],
            ref_mask: &seq.rasters[1],
            memories: Some(&bank.layers),
            frame_index: 2,
        };
        let opts = ForwardOptions {
            decoup: DecoupMode::Both,
            select: SelectMode::Soft,
            selector: SelectorVariant::Dts,
            collect_candidates: false,
        };
        let fwd = model.forward_frame(&inputs, &opts, &mut r).unwrap();
        let ce = bootstrapped_ce(&fwd.logits, &seq.rasters[2], 1.0).unwrap();
        let jac = soft_jaccard(&fwd.logits, &seq.rasters[2]).unwrap();
        ce.scale(0.5).add(&jac.scale(0.5)).unwrap()
    };
    (model, eval)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (model, eval) = build_model_loss();
    // Sample 20 random parameter components across the whole registry.
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let params = model.params();
    let samples: Vec<(usize, usize)> = (0..20)
        .map(|_| {
            let leaf = rng.gen_range(0..params.len());
            let idx = rng.gen_range(0..params[leaf].tensor.numel());
            (leaf, idx)
        })
        .collect();
    let leaves: Vec<(&str, &Tensor)> = params
        .iter()
        .map(|p| (p.name.as_str(), &p.tensor))
        .collect();
    fd_check_graph(&leaves, &|| eval(&model), 1e-6, 1e-4, 1e-7, Some(&samples));
}

#[test]
fn straight_through_selection_gradient_is_nonzero() {
    // With Gumbel straight-through selection, the selector parameters must
    // receive gradient through the hard gate.
    let cfg = small_cfg();
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let model = Model::new(&cfg, &mut rng).unwrap();
    let synth = SynthConfig {
        h: 64,
        w: 64,
        num_objects: 2,
        frames: 2,
        ..SynthConfig::default()
    };
    let seq = gen_sequence(&synth, 9).unwrap();
    let mut r = ChaCha12Rng::seed_from_u64(5);
    let inputs = FrameInputs {
        cur: &seq.frames[1],
        reference: &seq.frames[0],
        ref_mask: &seq.rasters[0],
        memories: None,
        frame_index: 1,
    };
    let opts = ForwardOptions {
        decoup: DecoupMode::Both,
        select: SelectMode::Gumbel { tau: 0.7 },
        selector: SelectorVariant::Dts,
        collect_candidates: false,
    };
    let fwd = model.forward_frame(&inputs, &opts, &mut r).unwrap();
    let loss = bootstrapped_ce(&fwd.logits, &seq.rasters[1], 1.0).unwrap();
    loss.backward().unwrap();
    let dts_grad_mass: f64 = model
        .params()
        .iter()
        .filter(|p| p.name.contains(".dts."))
        .filter_map(|p| p.tensor.grad())
        .map(|g| g.iter().map(|x| x.abs()).sum::<f64>())
        .sum();
    assert!(
        dts_grad_mass > 0.0,
        "straight-through gate must pass gradient to the selector"
    );
}

#[test]
fn decoder_ignores_reference_and_memory_given_final_tokens() {
    // Decoding depends only on current-frame features: rerunning with a
    // perturbed reference changes e_t, but feeding the *same* final tokens
    // into the decoder yields identical logits regardless of history.
    use onevos_core::decoder::fpn_decode;
    use onevos_core::embedding::{stem_features, TokenGrid};
    let cfg = small_cfg();
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let model = Model::new(&cfg, &mut rng).unwrap();
    let synth = SynthConfig {
        h: 64,
        w: 64,
        num_objects: 2,
        frames: 1,
        ..SynthConfig::default()
    };
    let seq = gen_sequence(&synth, 1).unwrap();
    let skips = stem_features(&seq.frames[0], &model.stem, &cfg).unwrap();
    let tokens: Vec<f64> = (0..cfg.n() * cfg.c)
        .map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5)
        .collect();
    let grid = TokenGrid {
        tokens: Tensor::constant(&[cfg.n(), cfg.c], tokens).unwrap(),
        grid: cfg.grid(),
        frame_index: 0,
    };
    let a = fpn_decode(&grid, &skips, &model.decoder, &cfg, 2).unwrap();
    let b = fpn_decode(&grid, &skips, &model.decoder, &cfg, 2).unwrap();
    assert_eq!(a.logits.to_vec(), b.logits.to_vec());
}
