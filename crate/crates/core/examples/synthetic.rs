//! Trains the small desk model on synthetic sequences, tracks held-out ones
//! and prints AO plus the mean IoU by frame index.
//!
//!     cargo run --release --example synthetic -- samples_per_epoch=400 epochs=4

use std::time::Instant;

use parttrack::config::{apply_pairs, parse_pairs};
use parttrack::dataio::{gen_dataset, SynthConfig};
use parttrack::eval::evaluate;
use parttrack::geometry::iou;
use parttrack::model::ModelConfig;
use parttrack::tracking::{run_sequence, TrackOptions};
use parttrack::training::{train, TrainConfig, TrainState};

fn main() {
    parttrack::alloc::retain_freed_memory();
    let overrides = std::env::args().skip(1).collect::<Vec<_>>().join("\n");
    let mut mcfg = ModelConfig {
        template_size: 64,
        search_size: 128,
        backbone_blocks: 3,
        backbone_width: 16,
        channels: 32,
        heads: 4,
        layers: 2,
        ffn_dim: 64,
        ..ModelConfig::default()
    };
    let mut tcfg = TrainConfig {
        epochs: 10,
        warmup_epochs: 1,
        samples_per_epoch: 1500,
        lr_start: 0.004,
        lr_peak: 0.02,
        lr_end: 0.002,
        grad_clip: 5.0,
        search_shift: 0.25,
        ..TrainConfig::default()
    };
    let mut scfg = SynthConfig { count: 50, length: 40, seed: 1, ..SynthConfig::default() };
    let pairs = parse_pairs(&overrides).expect("overrides are KEY=VALUE");
    apply_pairs(&mut [&mut mcfg, &mut tcfg, &mut scfg], &pairs).expect("unknown or invalid key");

    let train_set = gen_dataset(&scfg).unwrap();
    let test_set = gen_dataset(&SynthConfig { count: 10, seed: scfg.seed + 1000, ..scfg.clone() }).unwrap();
    let t0 = Instant::now();
    let mut st = TrainState::init(&mcfg, tcfg.seed).unwrap();
    train(&mut st, &train_set, &tcfg, &mut std::io::sink(), |s| {
        eprintln!("epoch {} at {:.0}s, best {:?}", s.epoch, t0.elapsed().as_secs_f64(), s.best);
        Ok(())
    })
    .unwrap();

    let opts = TrackOptions { no_updater: tcfg.no_updater };
    let preds: Vec<Vec<_>> = test_set
        .iter()
        .map(|s| run_sequence(&st.params, s, opts).unwrap().into_iter().map(|r| r.bbox).collect())
        .collect();
    let len = scfg.length;
    let mut by_frame = vec![0.0; len];
    for (s, p) in test_set.iter().zip(&preds) {
        for (i, (a, b)) in p.iter().zip(&s.gt).enumerate() {
            by_frame[i] += iou(a, b) / test_set.len() as f64;
        }
    }
    for (i, v) in by_frame.iter().enumerate().step_by(5) {
        println!("frame {i:3} iou {v:.3}");
    }
    let rep = evaluate(&test_set, &preds).unwrap();
    println!("AO {:.4} SR50 {:.4} in {:.0}s", rep.overall.ao, rep.overall.sr50, t0.elapsed().as_secs_f64());
}
