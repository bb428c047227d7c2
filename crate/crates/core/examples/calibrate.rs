//! Scratch calibration harness: trains the default model on synthetic
//! sequences and reports held-out J&F at checkpoints.
//!
//! Usage: calibrate [steps] [batch] [eval_seqs] [eval_frames] [seed] [lr]
//!                  [final_keep] [selector] [tf_frac]

use onevos_core::config::RunConfig;
use onevos_core::memory::MemoryPolicy;
use onevos_core::model::ForwardOptions;
use onevos_core::pipeline::{evaluate_on_sequences, Trainer};
use onevos_core::synth::gen_sequence;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(800);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let eval_seqs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let eval_frames: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(24);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(7);
    let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let final_keep: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let selector: String = args.get(8).cloned().unwrap_or_else(|| "dts".into());
    let tf: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.3);

    let mut cfg = RunConfig::default();
    cfg.train.steps = steps;
    cfg.train.batch = batch;
    cfg.train.grad_accum = 1;
    cfg.train.seed = seed;
    cfg.train.lr_pre = lr;
    cfg.train.bootstrap_final_keep = final_keep;
    cfg.train.selector = selector;
    cfg.train.teacher_forcing_frac = tf;
    cfg.validate().unwrap();

    let mut eval_cfg = cfg.synth.clone();
    eval_cfg.frames = eval_frames;
    let held_out: Vec<_> = (0..eval_seqs)
        .map(|i| gen_sequence(&eval_cfg, 1_000_000 + i as u64).unwrap())
        .collect();

    let fixed_batch: bool = args.get(10).map(|s| s == "fixed").unwrap_or(false);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let t0 = std::time::Instant::now();
    let checkpoints = [
        steps / 8,
        steps / 4,
        steps / 2,
        (3 * steps) / 4,
        steps,
    ];
    let mut next_cp = 0;
    for step in 0..steps {
        let batch = trainer.gen_batch(if fixed_batch { 0 } else { step }).unwrap();
        let m = trainer.train_step(&batch, step).unwrap();
        if step % 25 == 0 {
            println!(
                "step {:4}  loss {:.4} (ce {:.4} jac {:.4})  fracs {:?}  [{:.1}s]",
                step,
                m.loss,
                m.loss_ce,
                m.loss_jaccard,
                m.keep_fracs
                    .iter()
                    .map(|f| (f * 100.0).round() / 100.0)
                    .collect::<Vec<_>>(),
                t0.elapsed().as_secs_f64()
            );
        }
        while next_cp < checkpoints.len() && step + 1 == checkpoints[next_cp] {
            let ratios = trainer.stabilized_ratios();
            let policy = MemoryPolicy::new(&cfg.memory, ratios.clone(), cfg.model.n()).unwrap();
            let te = std::time::Instant::now();
            let report = evaluate_on_sequences(
                &trainer.model,
                &held_out,
                &policy,
                &ForwardOptions::default(),
            )
            .unwrap();
            println!(
                ">>> step {:4}  J {:.4}  F {:.4}  J&F {:.4}   ratios {:?}  (eval {:.1}s, total {:.1}s)",
                step + 1,
                report.j_mean(),
                report.f_mean(),
                report.jf(),
                ratios.iter().map(|f| (f * 100.0).round() / 100.0).collect::<Vec<_>>(),
                te.elapsed().as_secs_f64(),
                t0.elapsed().as_secs_f64()
            );
            next_cp += 1;
        }
    }
}
