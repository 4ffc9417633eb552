//! Calibration probe: trains the CE and contrastive arms once on synthetic
//! data and prints accuracies, per-epoch losses and how much of each tap's
//! variance actually depends on the input.
//!
//! Knobs are environment variables: SEED, N, NTEST, SIDE, DATA_SEED, RATE,
//! STEM, E1, E2, B, LR, LAMBDA, EMA, GAMMA, ROUND, TAU_C, TAU_S, PAD,
//! REDUCTION (sum|mean), ARMS (comma list of ce,cwcl).

use std::time::Instant;

use cwcl::corpus::datasets::{synthetic, SyntheticSpec};
use cwcl::corpus::{AugPolicy, NoiseSpec, NoisyCorpus};
use cwcl::nn::{BackboneSpec, Tensor4};
use cwcl::trainer::{LayerReduction, RunContext, TrainPlan, Trainer};

fn var<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// Share of variance that comes from differences between samples, and the
/// fraction of channel maps that are all zero.
fn variance_share(tap: &Tensor4) -> (f64, f64) {
    let (n, c, h, w) = tap.dims();
    let plane = h * w;
    let (mut between, mut total, mut zeros) = (0.0f64, 0.0f64, 0usize);
    for ch in 0..c {
        let maps: Vec<&[f32]> = (0..n).map(|i| &tap.data[(i * c + ch) * plane..(i * c + ch + 1) * plane]).collect();
        for p in 0..plane {
            let mean = maps.iter().map(|m| m[p] as f64).sum::<f64>() / n as f64;
            between += maps.iter().map(|m| (m[p] as f64 - mean).powi(2)).sum::<f64>();
        }
        let all = maps.iter().flat_map(|m| m.iter()).map(|&x| x as f64);
        let mean = all.clone().sum::<f64>() / (n * plane) as f64;
        total += all.map(|x| (x - mean).powi(2)).sum::<f64>();
        zeros += maps.iter().filter(|m| m.iter().all(|&x| x == 0.0)).count();
    }
    (between / total.max(1e-30), zeros as f64 / (n * c) as f64)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = var("SEED", 0);
    let spec = SyntheticSpec {
        train_size: var("N", 2000),
        test_size: var("NTEST", 1000),
        side: var("SIDE", 16),
        seed: var("DATA_SEED", 0),
        ..SyntheticSpec::default()
    };
    let (train, test) = synthetic(&spec)?;
    let corpus = NoisyCorpus::inject(train, NoiseSpec::symmetric(var("RATE", 0.4)), seed)?;
    let mut backbone = BackboneSpec::small();
    backbone.stem_width = var("STEM", backbone.stem_width);
    let plan = TrainPlan {
        epochs_stage1: var("E1", 10),
        epochs_stage2: var("E2", 5),
        batch_size: var("B", 64),
        lr0: var("LR", 0.05),
        lambda: var("LAMBDA", 0.6),
        ema_decay: var("EMA", 0.99),
        gamma: var("GAMMA", 0.9),
        round_length: var("ROUND", 5),
        tau_cwcl: var("TAU_C", 0.5),
        tau_supcon: var("TAU_S", 0.1),
        cwcl_reduction: if var("REDUCTION", "sum".to_string()) == "mean" { LayerReduction::Mean } else { LayerReduction::Sum },
        seed,
        augment: AugPolicy {
            crop_padding: var("PAD", 4),
            ..Default::default()
        },
        ..TrainPlan::default()
    };
    let probe = Tensor4::from_images(test.images()[..test.len().min(64)].iter(), test.image_shape())?;

    for arm in var("ARMS", "ce,cwcl".to_string()).split(',') {
        let mut p = plan.clone();
        if arm == "ce" {
            p.lambda = 0.0;
        }
        let t0 = Instant::now();
        let mut t = Trainer::new(p.clone(), &corpus, &test, backbone.clone(), RunContext::default())?;
        t.run_stage1()?;
        let m = t.metrics().last().expect("stage 1 logs epochs").clone();
        println!(
            "{arm} stage1: live {:.4} ema {:.4} train {:.3} ce {:.3} c {:.3} ({:.0}s)",
            m.test_acc_live,
            m.test_acc_ema,
            m.train_acc_noisy,
            m.ce,
            m.contrastive_mean,
            t0.elapsed().as_secs_f64()
        );
        for (l, tap) in t.model().forward(&probe)?.taps.iter().enumerate() {
            let (share, dead) = variance_share(tap);
            eprintln!("  tap {l}: sample-dependent variance share {share:.3}, dead channel maps {dead:.3}");
        }
        for r in &t.metrics().records {
            eprintln!("  e{} ce {:.3} c {:.3} train {:.3} live {:.3} ema {:.3}", r.epoch, r.ce, r.contrastive_mean, r.train_acc_noisy, r.test_acc_live, r.test_acc_ema);
        }
        if arm != "ce" && p.epochs_stage2 > 0 {
            let t1 = Instant::now();
            t.run_stage2()?;
            let m = t.metrics().last().expect("stage 2 logs epochs").clone();
            println!(
                "{arm} stage1+2: live {:.4} ema {:.4} sel {} noise {:?} ({:.0}s)",
                m.test_acc_live,
                m.test_acc_ema,
                m.selection_size,
                m.selection_noise_rate,
                t1.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
