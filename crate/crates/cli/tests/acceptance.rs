//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Run with `cargo test -p mglu-cli --test acceptance -- --nocapture`.
//!
//! The latency-scaling criterion is hardware-relative and not CI-gated; run
//! it explicitly with `-- --ignored`.

use std::process::Command;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mglu::analysis::{
    flops_per_token, memory_load_bits, param_counts, FlopScope, LayerKind, Phase,
};
use mglu::autograd::check_gradients;
use mglu::kernel::{
    fused_layer_partials, instrumented_forward, mglu_forward_fused_prepacked, KernelConfig,
};
use mglu::masks::{pack_masks, BinaryMask};
use mglu::reference::{
    mglu_forward_naive, mglu_forward_naive_counted, mglu_topk_forward, topk_gate, AblationVariant,
};
use mglu::trainer::{train, Dims, MaskMode, TrainConfig, TrainVariant};
use mglu::{Activation, DenseMatrix, DenseVector, MgluLayer, Real};

const SHAPES: [(usize, usize); 4] = [(8, 16), (64, 256), (768, 3072), (2048, 8192)];
const MASK_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];

fn max_abs<T: Real>(v: &[T]) -> f64 {
    v.iter().fold(0f64, |m, x| m.max(x.as_f64().abs()))
}

/// Max deviation relative to the reference's largest magnitude.
fn max_rel_err<T: Real>(got: &[T], want: &[T]) -> f64 {
    let scale = max_abs(want).max(1e-30);
    got.iter()
        .zip(want)
        .fold(0f64, |m, (g, w)| m.max((g.as_f64() - w.as_f64()).abs()))
        / scale
}

fn random_instance(
    h: usize,
    d: usize,
    seed: u64,
) -> (DenseMatrix<f64>, DenseVector<f64>, Vec<BinaryMask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DenseMatrix::<f64>::random_normal(h, d, 1.0, &mut rng);
    let x = DenseVector::<f64>::random_normal(h, 1.0, &mut rng);
    let masks = (0..16).map(|_| BinaryMask::random(h, d, &mut rng)).collect();
    (w, x, masks)
}

fn to_f32(w: &DenseMatrix<f64>, x: &DenseVector<f64>) -> (DenseMatrix<f32>, DenseVector<f32>) {
    let w32 = DenseMatrix::from_vec(
        w.rows(),
        w.cols(),
        w.as_slice().iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let x32 = DenseVector::from_vec(x.as_slice().iter().map(|&v| v as f32).collect()).unwrap();
    (w32, x32)
}

#[test]
fn criterion_01_fused_equals_naive() {
    let started = Instant::now();
    let mut worst_single = 0f64;
    let mut worst_double = 0f64;
    for &(h, d) in &SHAPES {
        for seed in 0..5u64 {
            let (w, x, masks) = random_instance(h, d, 0xC1 + seed);
            let (w32, x32) = to_f32(&w, &x);
            for &n_m in &MASK_COUNTS {
                let packed = pack_masks(&masks[..n_m]).unwrap();

                let naive32 =
                    mglu_forward_naive(&x32, &w32, &masks[..n_m], Activation::Swish).unwrap();
                let fused32 = mglu_forward_fused_prepacked(
                    &x32,
                    &w32,
                    &packed,
                    Activation::Swish,
                    &KernelConfig::default(),
                )
                .unwrap();
                worst_single =
                    worst_single.max(max_rel_err(fused32.as_slice(), naive32.as_slice()));

                let naive64 =
                    mglu_forward_naive(&x, &w, &masks[..n_m], Activation::Swish).unwrap();
                let fused64 = mglu_forward_fused_prepacked(
                    &x,
                    &w,
                    &packed,
                    Activation::Swish,
                    &KernelConfig::deterministic(),
                )
                .unwrap();
                worst_double =
                    worst_double.max(max_rel_err(fused64.as_slice(), naive64.as_slice()));
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(
        worst_single <= 1e-4,
        "single-precision max rel err {worst_single:.3e} > 1e-4"
    );
    assert!(
        worst_double <= 1e-10,
        "double-precision max rel err {worst_double:.3e} > 1e-10"
    );
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "sweep took {elapsed:?}, budget 2 min"
    );
    println!(
        "criterion 01 fused==naive (single {worst_single:.2e} <= 1e-4, double {worst_double:.2e} <= 1e-10, {elapsed:.1?} < 2min): PASS"
    );
}

#[test]
fn criterion_02_complementarity() {
    let mut worst_single = 0f64;
    let mut worst_double = 0f64;
    let mut exact_mismatches = 0usize;
    for &(h, d) in &[(64usize, 256usize), (768, 3072)] {
        for seed in 0..2u64 {
            let (w, x, masks) = random_instance(h, d, 0xC2 + seed);
            let (w32, x32) = to_f32(&w, &x);
            let t64 = w.vec_mat(x.as_slice());
            let fast = KernelConfig::default().with_split_k(4);

            // Single-precision reference: the unmasked matvec evaluated by
            // the kernel itself via an all-ones mask, so the comparison
            // isolates the complement construction from the reduction
            // order. The ungated total is order-identical across mask sets.
            let ones = pack_masks(&[BinaryMask::ones(h, d)]).unwrap();
            let t32_kernel = fused_layer_partials(&x32, &w32, &ones, &fast).unwrap();
            let t32 = t32_kernel.gate(0);
            let scale32 = max_abs(t32).max(1e-30);
            let scale64 = max_abs(&t64).max(1e-30);

            for &n_m in &[1usize, 4, 16] {
                let packed = pack_masks(&masks[..n_m]).unwrap();

                let ps32 = fused_layer_partials(&x32, &w32, &packed, &fast).unwrap();
                for i in 0..n_m {
                    for j in 0..d {
                        let sum = ps32.gate(i)[j] as f64 + ps32.value(i)[j] as f64;
                        worst_single =
                            worst_single.max((sum - t32[j] as f64).abs() / scale32);
                    }
                }

                // Non-deterministic double against the plain ascending
                // reference.
                let ps64_fast = fused_layer_partials(&x, &w, &packed, &fast).unwrap();
                for i in 0..n_m {
                    for j in 0..d {
                        let sum = ps64_fast.gate(i)[j] + ps64_fast.value(i)[j];
                        worst_double = worst_double.max((sum - t64[j]).abs() / scale64);
                    }
                }

                // Deterministic double: the value stream is exactly the
                // complement of the gate stream against the ungated total,
                // bit for bit.
                let ps64 = fused_layer_partials(
                    &x,
                    &w,
                    &packed,
                    &KernelConfig::deterministic().with_split_k(4),
                )
                .unwrap();
                for i in 0..n_m {
                    for j in 0..d {
                        if ps64.value(i)[j].to_bits() != (t64[j] - ps64.gate(i)[j]).to_bits() {
                            exact_mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(
        worst_single <= 1e-6,
        "single-precision complementarity rel err {worst_single:.3e} > 1e-6"
    );
    assert!(
        worst_double <= 1e-6,
        "double-precision complementarity rel err {worst_double:.3e} > 1e-6"
    );
    assert_eq!(
        exact_mismatches, 0,
        "deterministic double mode produced inexact complements"
    );
    println!(
        "criterion 02 complementarity (single {worst_single:.2e} and double {worst_double:.2e} <= 1e-6, double det exact): PASS"
    );
}

#[test]
fn criterion_03_table_reproduction() {
    for &(h, d) in &[(8u64, 16u64), (768, 3072), (2048, 8192)] {
        assert_eq!(memory_load_bits(LayerKind::Lu, h, d, None).unwrap(), 16 * h * d);
        assert_eq!(memory_load_bits(LayerKind::Glu, h, d, None).unwrap(), 32 * h * d);
        for n_m in 1..=16 {
            assert_eq!(
                memory_load_bits(LayerKind::Mglu, h, d, Some(n_m)).unwrap(),
                (16 + n_m) * h * d
            );
        }
    }
    let report = mglu::analysis::cost_report(LayerKind::Mglu, 2048, 8192, Some(1)).unwrap();
    assert_eq!(report.reduction_vs_glu, 0.46875);

    // FP16 footnote: gated block 96 MiB, masked block 64 MiB, mask 2 MiB.
    let (h, d) = (2048u64, 8192u64);
    let (glu_params, _) = param_counts(LayerKind::Glu, h, d, None, true).unwrap();
    let (mglu_params, mask_bits) = param_counts(LayerKind::Mglu, h, d, Some(1), true).unwrap();
    let mib = |bytes: u64| bytes as f64 / (1u64 << 20) as f64;
    assert_eq!(mib(glu_params * 2), 96.0);
    assert_eq!(mib(mglu_params * 2), 64.0);
    assert_eq!(mib(mask_bits / 8), 2.0);
    println!("criterion 03 memory table (16hd/32hd/(16+n)hd, 46.875%, 96->64+2 MiB): PASS");
}

#[test]
fn criterion_04_single_read_property() {
    let (h, d) = (64usize, 256usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let x64 = DenseVector::<f64>::random_normal(h, 1.0, &mut rng);
    for &n_m in &MASK_COUNTS {
        let layer = MgluLayer::<f64>::random(h, d, n_m, Activation::Swish, &mut rng).unwrap();
        let (_, fused) = instrumented_forward(&x64, &layer, &KernelConfig::default()).unwrap();
        let elem = std::mem::size_of::<f64>() as u64;
        assert_eq!(
            fused.weight_bytes_read / elem,
            (h * d) as u64,
            "fused weight reads depend on n_m={n_m}"
        );
        assert_eq!(fused.mask_bytes_read, (h * d) as u64 * packed_word_bytes(n_m));

        let (_, naive) =
            mglu_forward_naive_counted(&x64, layer.w(), &layer.binarized(), layer.activation())
                .unwrap();
        assert_eq!(naive.weight_bytes_read / elem, (2 * n_m * h * d) as u64);
    }
    println!(
        "criterion 04 single-read (fused h*d weight elements for all n_m, naive 2*n_m*h*d): PASS"
    );
}

fn packed_word_bytes(n_m: usize) -> u64 {
    if n_m <= 8 {
        1
    } else {
        2
    }
}

#[test]
fn criterion_05_gradient_checks() {
    let started = Instant::now();
    let activations = [
        Activation::Identity,
        Activation::Relu,
        Activation::Swish,
        Activation::Gelu,
    ];
    let mut worst = 0f64;
    for activation in activations {
        for n_m in [1usize, 2, 4] {
            let mut rng =
                ChaCha8Rng::seed_from_u64(0xC5 ^ ((n_m as u64) << 8) ^ activation.code() as u64);
            let layer = MgluLayer::<f64>::random(12, 20, n_m, activation, &mut rng)
                .unwrap()
                .with_random_output(8, &mut rng);
            let report = check_gradients(&layer, 0xC5 + n_m as u64, 1e-6).unwrap();
            for block in &report.blocks {
                worst = worst.max(block.max_rel_err);
                assert!(
                    block.pass,
                    "{activation} n_m={n_m} block {} rel err {:.3e} > 1e-6",
                    block.name, block.max_rel_err
                );
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "gradient checks took {elapsed:?}");
    println!(
        "criterion 05 gradients (d_x, d_W vs hard-forward FD; d_logits vs relaxed FD; worst {worst:.2e} <= 1e-6, {elapsed:.1?} < 1min): PASS"
    );
}

#[test]
fn criterion_06_flop_formulas() {
    for &(h, d) in &[(8u64, 16u64), (768, 3072), (2048, 8192)] {
        for n_m in [1u64, 2, 4, 8, 16] {
            assert_eq!(
                flops_per_token(
                    LayerKind::Mglu,
                    h,
                    d,
                    Some(n_m),
                    Phase::Inference,
                    FlopScope::Intermediate
                )
                .unwrap(),
                2 * (1 + n_m) * h * d
            );
            assert_eq!(
                flops_per_token(
                    LayerKind::Mglu,
                    h,
                    d,
                    Some(n_m),
                    Phase::Training,
                    FlopScope::FfnTotal
                )
                .unwrap(),
                (6 + 8 * n_m) * h * d
            );
        }
        assert_eq!(
            flops_per_token(LayerKind::Glu, h, d, None, Phase::Training, FlopScope::FfnTotal)
                .unwrap(),
            18 * h * d
        );
    }
    println!(
        "criterion 06 flops (2(1+n)hd inference intermediate, (6+8n)hd vs 18hd training): PASS"
    );
}

/// Hardware-relative scaling shape; run locally with `-- --ignored`.
#[test]
#[ignore = "hardware-relative latency shape; run locally, not CI-gated"]
fn criterion_07_latency_scaling() {
    let (h, d) = (2048usize, 8192usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    let w = DenseMatrix::<f32>::random_normal(h, d, 1.0, &mut rng);
    let x = DenseVector::<f32>::random_normal(h, 1.0, &mut rng);
    let masks: Vec<BinaryMask> = (0..8).map(|_| BinaryMask::random(h, d, &mut rng)).collect();

    let median = |mut samples: Vec<f64>| {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        samples[samples.len() / 2]
    };
    let time_it = |f: &mut dyn FnMut()| {
        for _ in 0..2 {
            f();
        }
        let mut out = Vec::new();
        for _ in 0..5 {
            let t = Instant::now();
            f();
            out.push(t.elapsed().as_secs_f64() * 1e3);
        }
        median(out)
    };

    let mut naive_ms = std::collections::BTreeMap::new();
    let mut fused_ms = std::collections::BTreeMap::new();
    for &n_m in &[1usize, 4, 8] {
        let subset = &masks[..n_m];
        let packed = pack_masks(subset).unwrap();
        naive_ms.insert(
            n_m,
            time_it(&mut || {
                std::hint::black_box(
                    mglu_forward_naive(&x, &w, subset, Activation::Swish).unwrap(),
                );
            }),
        );
        fused_ms.insert(
            n_m,
            time_it(&mut || {
                std::hint::black_box(
                    mglu_forward_fused_prepacked(
                        &x,
                        &w,
                        &packed,
                        Activation::Swish,
                        &KernelConfig::default(),
                    )
                    .unwrap(),
                );
            }),
        );
    }
    let naive_ratio = naive_ms[&8] / naive_ms[&1];
    let fused_ratio = fused_ms[&8] / fused_ms[&1];
    let speedup4 = naive_ms[&4] / fused_ms[&4];
    println!(
        "criterion 07 latency: naive t(8)/t(1)={naive_ratio:.2} (>=4), fused t(8)/t(1)={fused_ratio:.2} (<=2), fused speedup at n_m=4 {speedup4:.2}x (>=2)"
    );
    assert!(naive_ratio >= 4.0, "naive ratio {naive_ratio:.2} < 4");
    assert!(fused_ratio <= 2.0, "fused ratio {fused_ratio:.2} > 2");
    assert!(speedup4 >= 2.0, "fused speedup {speedup4:.2} < 2");
    println!("criterion 07 latency scaling: PASS");
}

#[test]
fn criterion_08_topk_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    let n_m = 4;
    let layer = MgluLayer::<f64>::random(10, 14, n_m, Activation::Swish, &mut rng)
        .unwrap()
        .with_random_router(n_m, &mut rng)
        .unwrap();
    let x = DenseVector::<f64>::random_normal(10, 1.0, &mut rng);

    // K = n_m equals the dense softmax-weighted brute-force sum.
    let routed = mglu_topk_forward(&x, &layer, n_m).unwrap();
    let logits = layer.router().unwrap().w_r.vec_mat(x.as_slice());
    let max_l = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max_l).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let masks = layer.binarized();
    let mut dense = vec![0f64; 14];
    for i in 0..n_m {
        let term = mglu_forward_naive(
            &x,
            layer.w(),
            std::slice::from_ref(&masks[i]),
            layer.activation(),
        )
        .unwrap();
        for (o, t) in dense.iter_mut().zip(term.as_slice()) {
            *o += exps[i] / denom * t;
        }
    }
    let err_dense = max_rel_err(routed.as_slice(), &dense);
    assert!(err_dense <= 1e-6, "dense equivalence err {err_dense:.3e}");

    // K = 1 is the argmax expert's term with weight exactly 1.
    let routed1 = mglu_topk_forward(&x, &layer, 1).unwrap();
    let argmax = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .unwrap()
        .0;
    let term = mglu_forward_naive(
        &x,
        layer.w(),
        std::slice::from_ref(&masks[argmax]),
        layer.activation(),
    )
    .unwrap();
    assert_eq!(routed1.as_slice(), term.as_slice());

    // Equal logits: the tie resolves to the lowest indices.
    let ones = DenseVector::from_vec(vec![1.0]).unwrap();
    let w_r = DenseMatrix::from_vec(1, 4, vec![0.7; 4]).unwrap();
    let gates = topk_gate(&ones, &w_r, 2).unwrap();
    assert_eq!(gates.as_slice(), &[0.5, 0.5, 0.0, 0.0]);

    println!(
        "criterion 08 top-k (dense equivalence {err_dense:.2e} <= 1e-6, k=1 argmax exact, ties to lowest index): PASS"
    );
}

#[test]
fn criterion_09_training_directionals() {
    let started = Instant::now();
    let base = TrainConfig {
        steps: 600,
        batch_size: 32,
        n_samples: 256,
        record_every: 100,
        dims: Dims {
            h: 16,
            d: 48,
            out: 8,
        },
        ..TrainConfig::default()
    };
    let seeds = [11u64, 22, 33];

    // Learned masks beat frozen masks at n_m = 2 in a majority of seeds.
    let mut learned_wins = 0;
    for &seed in &seeds {
        let learned = train::<f64>(&TrainConfig { seed, ..base.clone() }).unwrap();
        let fixed = train::<f64>(&TrainConfig {
            seed,
            mask_mode: MaskMode::Fixed,
            ..base.clone()
        })
        .unwrap();
        assert!(!learned.diverged && !fixed.diverged);
        if learned.final_loss < fixed.final_loss {
            learned_wins += 1;
        }
    }
    assert!(
        learned_wins * 3 >= 2 * seeds.len(),
        "learned masks won only {learned_wins}/3 seeds"
    );

    // Final loss non-increasing in the mask count in a majority of seeds,
    // and per-mask results reused for the ablation baseline below.
    let mut monotone = 0;
    let mut baseline_by_seed = std::collections::BTreeMap::new();
    for &seed in &seeds {
        let mut finals = Vec::new();
        for n_m in [1usize, 2, 4] {
            let r = train::<f64>(&TrainConfig {
                seed,
                n_m,
                ..base.clone()
            })
            .unwrap();
            assert!(!r.diverged);
            if n_m == 1 {
                baseline_by_seed.insert(seed, r.final_loss);
            }
            finals.push(r.final_loss);
        }
        if finals[0] >= finals[1] && finals[1] >= finals[2] {
            monotone += 1;
        }
    }
    assert!(
        monotone * 2 > seeds.len(),
        "loss monotone in n_m for only {monotone}/3 seeds"
    );

    // Every ablation ends above the fully masked baseline in >= 2/3 seeds.
    for kind in [
        AblationVariant::NoGateMask,
        AblationVariant::NoValueMask,
        AblationVariant::NoMasks,
    ] {
        let mut worse = 0;
        for &seed in &seeds {
            let r = train::<f64>(&TrainConfig {
                seed,
                n_m: 1,
                variant: TrainVariant::Ablation { kind },
                ..base.clone()
            })
            .unwrap();
            assert!(!r.diverged);
            if r.final_loss > baseline_by_seed[&seed] {
                worse += 1;
            }
        }
        assert!(
            worse * 3 >= 2 * seeds.len(),
            "{kind} beat the masked baseline in {}/3 seeds",
            seeds.len() - worse
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "training suite took {elapsed:?}");
    println!(
        "criterion 09 training directionals (learned<fixed {learned_wins}/3, monotone {monotone}/3, ablations worse; {elapsed:.1?} < 5min): PASS"
    );
}

#[test]
fn criterion_10_determinism() {
    // Library level: identical config and seed give identical reports.
    let config = TrainConfig {
        steps: 120,
        batch_size: 16,
        n_samples: 64,
        record_every: 20,
        dims: Dims {
            h: 12,
            d: 24,
            out: 6,
        },
        ..TrainConfig::default()
    };
    let a = train::<f64>(&config).unwrap();
    let b = train::<f64>(&config).unwrap();
    assert_eq!(a.canonical_json(), b.canonical_json());

    // Binary level: verify and train reports are byte-identical across two
    // consecutive runs.
    let bin = env!("CARGO_BIN_EXE_mglu");
    let dir = tempfile::tempdir().unwrap();
    let run_verify = |out: &std::path::Path| {
        let status = Command::new(bin)
            .args([
                "verify",
                "--shapes",
                "8x16,64x256",
                "--masks",
                "1,4,16",
                "--seeds",
                "1",
                "--json",
            ])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let v1 = dir.path().join("v1.json");
    let v2 = dir.path().join("v2.json");
    run_verify(&v1);
    run_verify(&v2);
    assert_eq!(
        std::fs::read(&v1).unwrap(),
        std::fs::read(&v2).unwrap(),
        "verify reports differ across runs"
    );

    let config_path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/train_mglu.json");
    let run_train = |out: &std::path::Path| {
        let status = Command::new(bin)
            .args(["train", "--deterministic", "--config"])
            .arg(&config_path)
            .arg("--json")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let t1 = dir.path().join("t1.json");
    let t2 = dir.path().join("t2.json");
    run_train(&t1);
    run_train(&t2);
    assert_eq!(
        std::fs::read(&t1).unwrap(),
        std::fs::read(&t2).unwrap(),
        "train reports differ across runs"
    );

    println!("criterion 10 determinism (library reports and CLI verify/train bytes identical): PASS");
}
