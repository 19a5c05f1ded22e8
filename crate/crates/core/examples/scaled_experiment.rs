//! One run of the scaled synthetic experiment at toy model sizes.
//!
//! `cargo run --release -p drnet-core --example scaled_experiment -- [epochs] [rho] [seed]`
//!
//! Trains on 200 noisy synthetic clips and reports test metrics on 50
//! held-out clips, plus the per-epoch losses.

use std::time::Instant;

use drnet::models::{ModelConfig, PretrainConfig};
use drnet::patch_crop::PcConfig;
use drnet::synth::{gen_clips, SynthSpec};
use drnet::trainer::{evaluate, synth_records, train, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> drnet::Result<()> {
    let (epochs, rho, seed) = (arg(1, 40usize), arg(2, 0.5f64), arg(3, 0u64));
    let (rows, frames) = (16, 128);
    let spec = SynthSpec {
        rows,
        frames,
        ..SynthSpec::default()
    };
    let train_set = synth_records(&gen_clips(200, &spec, 100)?, "train")?;
    let test_set = synth_records(&gen_clips(50, &spec, 200)?, "test")?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch: 8,
        epochs,
        seed,
        pc: PcConfig { gamma: 2, rho },
        model: ModelConfig {
            rows,
            frames,
            widths: vec![8, 8, 8],
            sab_reduction: 4,
            ae_channels: [8, 16, 16],
            ae_kernel: 5,
        },
        pretrain: PretrainConfig {
            epochs: 30,
            lr: 3e-3,
            batch: 16,
        },
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(&cfg, &train_set, None, None)?;
    for e in &out.log {
        println!(
            "epoch {:>3}  total {:.4}  phy {:.4}  cyc {:.4}",
            e.epoch, e.loss.total, e.loss.phy, e.loss.cyc
        );
    }
    let m = evaluate(&out.net, &test_set, cfg.fs)?.metrics;
    println!(
        "test: MAE {:.3}  RMSE {:.3}  std {:.3}  r {:.3}  ({:.0} s)",
        m.mae,
        m.rmse,
        m.std,
        m.r,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
