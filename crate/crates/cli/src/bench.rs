//! `mglu bench`: wall-clock latency of the multi-pass reference, the fused
//! kernel, and the two-matrix gated baseline, batch-1 matvec regime.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mglu::kernel::{mglu_forward_fused_prepacked, KernelConfig};
use mglu::masks::{pack_masks, BinaryMask};
use mglu::reference::{glu_forward, mglu_forward_naive};
use mglu::{Activation, DenseMatrix, DenseVector, Real};

use crate::args::{PrecisionArg, Shape};
use crate::report::{percentiles, write_json, BenchCase, BenchReport, Environment, SCHEMA_VERSION};

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![Shape { h: 1024, d: 4096 }])]
    pub shapes: Vec<Shape>,

    #[arg(long = "masks", value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
    pub masks: Vec<usize>,

    /// Timed repetitions per case.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,

    /// Untimed warmup repetitions per case.
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,

    #[arg(long = "split-k", default_value_t = 1)]
    pub split_k: usize,

    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    #[arg(long, value_enum, default_value_t = PrecisionArg::Single)]
    pub precision: PrecisionArg,

    /// Use the fixed-order reduction in the fused kernel.
    #[arg(long, default_value_t = false)]
    pub deterministic: bool,

    #[arg(long)]
    pub json: Option<std::path::PathBuf>,
}

fn time_ms(reps: usize, warmup: usize, mut f: impl FnMut()) -> Vec<f64> {
    for _ in 0..warmup {
        f();
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f();
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    samples
}

fn bench_shape<T: Real>(args: &BenchArgs, shape: Shape, cases: &mut Vec<BenchCase>) {
    let (h, d) = (shape.h, shape.d);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let w = DenseMatrix::<T>::random_normal(h, d, 1.0, &mut rng);
    let w_v = DenseMatrix::<T>::random_normal(h, d, 1.0, &mut rng);
    let x = DenseVector::<T>::random_normal(h, 1.0, &mut rng);
    let cfg = KernelConfig {
        split_k: args.split_k,
        deterministic: args.deterministic,
        ..KernelConfig::default()
    };

    let push = |cases: &mut Vec<BenchCase>, kind: &str, n_m: usize, mut samples: Vec<f64>| {
        let (p10, median, p90) = percentiles(&mut samples);
        println!(
            "{kind:>12} h{h} d{d} n_m={n_m}: median {median:.3} ms (p10 {p10:.3}, p90 {p90:.3})"
        );
        cases.push(BenchCase {
            kind: kind.to_string(),
            h,
            d,
            n_m,
            split_k: args.split_k,
            reps: args.reps,
            warmup_reps: args.warmup,
            median_ms: median,
            p10_ms: p10,
            p90_ms: p90,
        });
    };

    // Gated two-matrix baseline, mask-free.
    let samples = time_ms(args.reps, args.warmup, || {
        std::hint::black_box(glu_forward(&x, &w, &w_v, Activation::Swish).unwrap());
    });
    push(cases, "glu_baseline", 0, samples);

    for &n_m in &args.masks {
        let masks: Vec<BinaryMask> = {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(args.seed ^ n_m as u64);
            (0..n_m)
                .map(|_| BinaryMask::random(h, d, &mut mask_rng))
                .collect()
        };
        let packed = pack_masks(&masks).unwrap();

        let samples = time_ms(args.reps, args.warmup, || {
            std::hint::black_box(mglu_forward_naive(&x, &w, &masks, Activation::Swish).unwrap());
        });
        push(cases, "naive", n_m, samples);

        let samples = time_ms(args.reps, args.warmup, || {
            std::hint::black_box(
                mglu_forward_fused_prepacked(&x, &w, &packed, Activation::Swish, &cfg).unwrap(),
            );
        });
        push(cases, "fused", n_m, samples);
    }
}

pub fn run(args: &BenchArgs) -> anyhow::Result<i32> {
    anyhow::ensure!(args.reps >= 1, "--reps must be at least 1");
    let mut cases = Vec::new();
    for &shape in &args.shapes {
        match args.precision {
            PrecisionArg::Single => bench_shape::<f32>(args, shape, &mut cases),
            PrecisionArg::Double => bench_shape::<f64>(args, shape, &mut cases),
        }
    }
    let report = BenchReport {
        schema_version: SCHEMA_VERSION,
        kind: "bench",
        environment: Environment {
            cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            precision: match args.precision {
                PrecisionArg::Single => "single".into(),
                PrecisionArg::Double => "double".into(),
            },
        },
        cases,
    };
    if let Some(path) = &args.json {
        write_json(&report, path)?;
    }
    Ok(0)
}
