//! `mglu verify`: oracle equivalence sweeps, complementarity and split-K
//! checks, pack round-trips, gradient checks, and routing semantics.
//!
//! Everything is seeded and reduces in fixed order, so two runs of the same
//! sweep produce byte-identical reports.

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mglu::autograd::check_gradients;
use mglu::kernel::{
    fused_layer_partials, mglu_forward_fused_prepacked, KernelConfig,
};
use mglu::masks::{pack_masks, unpack_masks, BinaryMask};
use mglu::reference::{mglu_forward_naive, topk_gate};
use mglu::{Activation, DenseMatrix, DenseVector, MgluLayer, PackedMasks, Real};

use crate::args::Shape;
use crate::report::{write_json, VerifyCase, VerifyReport, SCHEMA_VERSION};

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Shapes to sweep, comma separated HxD.
    #[arg(long, value_delimiter = ',', default_values_t = vec![
        Shape { h: 8, d: 16 },
        Shape { h: 64, d: 256 },
        Shape { h: 768, d: 3072 },
    ])]
    pub shapes: Vec<Shape>,

    /// Mask counts to sweep.
    #[arg(long = "masks", value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
    pub masks: Vec<usize>,

    /// Split-K values checked for invariance.
    #[arg(long = "split-k", value_delimiter = ',', default_values_t = vec![1, 2, 4])]
    pub split_k: Vec<usize>,

    /// Base seed; case seeds derive from it.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Seeds per shape/mask combination.
    #[arg(long, default_value_t = 2)]
    pub seeds: usize,

    /// Write the JSON report here.
    #[arg(long)]
    pub json: Option<std::path::PathBuf>,

    /// Fault-injection hook: corrupt one packed word in the first
    /// equivalence case and expect the sweep to catch it.
    #[arg(long, hide = true)]
    pub inject_mask_corruption: bool,
}

fn max_abs<T: Real>(v: &[T]) -> f64 {
    v.iter().fold(0f64, |m, x| m.max(x.as_f64().abs()))
}

/// Max elementwise deviation relative to the reference's largest magnitude.
fn max_rel_err<T: Real>(got: &[T], want: &[T]) -> f64 {
    let scale = max_abs(want).max(1e-30);
    got.iter()
        .zip(want)
        .fold(0f64, |m, (g, w)| m.max((g.as_f64() - w.as_f64()).abs()))
        / scale
}

struct CaseSink {
    cases: Vec<VerifyCase>,
}

impl CaseSink {
    fn push_metric(&mut self, name: String, metric: f64, tolerance: f64) {
        let ok = metric <= tolerance;
        println!(
            "{} {name} (metric {metric:.3e}, tol {tolerance:.1e})",
            if ok { "PASS" } else { "FAIL" }
        );
        self.cases.push(VerifyCase {
            name,
            ok,
            metric: Some(metric),
            tolerance: Some(tolerance),
            detail: None,
        });
    }

    fn push_bool(&mut self, name: String, ok: bool, detail: &str) {
        println!("{} {name} ({detail})", if ok { "PASS" } else { "FAIL" });
        self.cases.push(VerifyCase {
            name,
            ok,
            metric: None,
            tolerance: None,
            detail: Some(detail.to_string()),
        });
    }
}

fn cast_matrix(src: &DenseMatrix<f64>) -> DenseMatrix<f32> {
    DenseMatrix::from_vec(
        src.rows(),
        src.cols(),
        src.as_slice().iter().map(|&v| v as f32).collect(),
    )
    .expect("finite cast")
}

fn corrupt_first_word(packed: &PackedMasks) -> PackedMasks {
    let mut masks = unpack_masks(packed).expect("valid packed set");
    let bits = masks[0].bits().to_vec();
    let mut flipped = bits;
    flipped[0] ^= 1;
    masks[0] = BinaryMask::from_bits(packed.rows(), packed.cols(), flipped).expect("binary");
    pack_masks(&masks).expect("repack")
}

pub fn run(args: &VerifyArgs) -> anyhow::Result<i32> {
    let mut sink = CaseSink { cases: Vec::new() };
    let mut corruption_pending = args.inject_mask_corruption;

    for shape in &args.shapes {
        let (h, d) = (shape.h, shape.d);
        for seed_idx in 0..args.seeds {
            let seed = args
                .seed
                .wrapping_add(seed_idx as u64)
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((h as u64) << 20 | d as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w64 = DenseMatrix::<f64>::random_normal(h, d, 1.0, &mut rng);
            let x64 = DenseVector::<f64>::random_normal(h, 1.0, &mut rng);
            let all_masks: Vec<BinaryMask> = (0..16)
                .map(|_| BinaryMask::random(h, d, &mut rng))
                .collect();
            let w32 = cast_matrix(&w64);
            let x32 =
                DenseVector::from_vec(x64.as_slice().iter().map(|&v| v as f32).collect())?;
            let t64 = w64.vec_mat(x64.as_slice());
            // Order-consistent single-precision reference for the unmasked
            // matvec: the kernel's own total via an all-ones mask.
            let ones = pack_masks(&[BinaryMask::ones(h, d)])?;
            let t32_kernel = fused_layer_partials(&x32, &w32, &ones, &KernelConfig::default())?;
            let t32_ref = t32_kernel.gate(0).to_vec();
            let t32_scale = max_abs(&t32_ref).max(1e-30);

            for &n_m in &args.masks {
                let masks = &all_masks[..n_m];
                let mut packed = pack_masks(masks)?;
                if std::mem::take(&mut corruption_pending) {
                    packed = corrupt_first_word(&packed);
                    println!("injected corruption into packed word 0 (h{h} d{d} m{n_m})");
                }
                let tag = format!("h{h}xd{d}/m{n_m}/s{seed_idx}");
                let fast = KernelConfig::default();
                let det = KernelConfig::deterministic();

                // Fused against the multi-pass reference, single precision.
                let naive32 = mglu_forward_naive(&x32, &w32, masks, Activation::Swish)?;
                let fused32 =
                    mglu_forward_fused_prepacked(&x32, &w32, &packed, Activation::Swish, &fast)?;
                sink.push_metric(
                    format!("fused_vs_naive/single/{tag}"),
                    max_rel_err(fused32.as_slice(), naive32.as_slice()),
                    1e-4,
                );

                // Same in deterministic double precision.
                let naive64 = mglu_forward_naive(&x64, &w64, masks, Activation::Swish)?;
                let fused64 =
                    mglu_forward_fused_prepacked(&x64, &w64, &packed, Activation::Swish, &det)?;
                sink.push_metric(
                    format!("fused_vs_naive/double_det/{tag}"),
                    max_rel_err(fused64.as_slice(), naive64.as_slice()),
                    1e-10,
                );

                // Complementarity: gate + value against the ungated matvec.
                let ps32 = fused_layer_partials(&x32, &w32, &packed, &fast)?;
                let mut worst = 0f64;
                for i in 0..n_m {
                    for j in 0..d {
                        let sum = ps32.gate(i)[j] as f64 + ps32.value(i)[j] as f64;
                        worst = worst.max((sum - t32_ref[j] as f64).abs());
                    }
                }
                sink.push_metric(
                    format!("complementarity/single/{tag}"),
                    worst / t32_scale,
                    1e-6,
                );

                // Deterministic double mode: the value stream must be the
                // bitwise-exact complement t - gate.
                let ps64 = fused_layer_partials(&x64, &w64, &packed, &det)?;
                let mut mismatches = 0usize;
                for i in 0..n_m {
                    for j in 0..d {
                        if ps64.value(i)[j].to_bits() != (t64[j] - ps64.gate(i)[j]).to_bits() {
                            mismatches += 1;
                        }
                    }
                }
                sink.push_bool(
                    format!("complementarity/double_det/{tag}"),
                    mismatches == 0,
                    &format!("{mismatches} cells off the exact complement"),
                );

                // Split-K invariance.
                let base32 =
                    fused_layer_partials(&x32, &w32, &packed, &fast.clone().with_split_k(1))?;
                let base64 = fused_layer_partials(&x64, &w64, &packed, &det.clone().with_split_k(1))?;
                let mut worst32 = 0f64;
                let mut det_mismatch = 0usize;
                for &sk in &args.split_k {
                    if sk <= 1 || sk > h {
                        continue;
                    }
                    let s32 =
                        fused_layer_partials(&x32, &w32, &packed, &fast.clone().with_split_k(sk))?;
                    let s64 =
                        fused_layer_partials(&x64, &w64, &packed, &det.clone().with_split_k(sk))?;
                    for i in 0..n_m {
                        worst32 = worst32
                            .max(max_rel_err(s32.gate(i), base32.gate(i)))
                            .max(max_rel_err(s32.value(i), base32.value(i)));
                        for j in 0..d {
                            if s64.gate(i)[j].to_bits() != base64.gate(i)[j].to_bits()
                                || s64.value(i)[j].to_bits() != base64.value(i)[j].to_bits()
                            {
                                det_mismatch += 1;
                            }
                        }
                    }
                }
                sink.push_metric(format!("splitk/single/{tag}"), worst32, 1e-5);
                sink.push_bool(
                    format!("splitk/double_det/{tag}"),
                    det_mismatch == 0,
                    &format!("{det_mismatch} cells differ across split_k"),
                );

                // Pack round-trip.
                let unpacked = unpack_masks(&packed)?;
                let repacked = pack_masks(&unpacked)?;
                sink.push_bool(
                    format!("pack_roundtrip/{tag}"),
                    repacked == packed && (args.inject_mask_corruption || unpacked == masks),
                    "unpack/repack identity",
                );
            }
        }
    }

    // Gradient checks on small double-precision layers.
    for activation in [
        Activation::Identity,
        Activation::Relu,
        Activation::Swish,
        Activation::Gelu,
    ] {
        for n_m in [1usize, 2, 4] {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ (n_m as u64) << 8 ^ activation.code() as u64);
            let layer = MgluLayer::<f64>::random(10, 14, n_m, activation, &mut rng)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?
                .with_random_output(6, &mut rng);
            let report = check_gradients(&layer, args.seed.wrapping_add(n_m as u64), 1e-6)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            let worst = report
                .blocks
                .iter()
                .fold(0f64, |m, b| m.max(b.max_rel_err));
            sink.push_metric(format!("gradcheck/{activation}/m{n_m}"), worst, 1e-6);
        }
    }
    {
        // Routed layer: router gradient included.
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0xa007);
        let layer = MgluLayer::<f64>::random(10, 14, 4, Activation::Swish, &mut rng)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?
            .with_random_output(6, &mut rng)
            .with_random_router(2, &mut rng)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let report = check_gradients(&layer, args.seed.wrapping_add(99), 1e-6)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let worst = report.blocks.iter().fold(0f64, |m, b| m.max(b.max_rel_err));
        sink.push_metric("gradcheck/swish/m4/topk2".into(), worst, 1e-6);
    }

    // Routing semantics.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x70b1);
        let layer = MgluLayer::<f64>::random(8, 12, 4, Activation::Swish, &mut rng)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?
            .with_random_router(4, &mut rng)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let x = DenseVector::<f64>::random_normal(8, 1.0, &mut rng);
        let routed = mglu::reference::mglu_topk_forward(&x, &layer, 4)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        // Dense oracle: plain softmax over all logits, brute-force sum.
        let router = layer.router().unwrap();
        let logits = router.w_r.vec_mat(x.as_slice());
        let max_l = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max_l).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let mut dense = vec![0f64; 12];
        for (i, mask) in layer.binarized().iter().enumerate() {
            let term = mglu_forward_naive(
                &x,
                layer.w(),
                std::slice::from_ref(mask),
                layer.activation(),
            )
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            for (o, t) in dense.iter_mut().zip(term.as_slice()) {
                *o += exps[i] / denom * t;
            }
        }
        sink.push_metric(
            "topk/dense_equivalence".into(),
            max_rel_err(routed.as_slice(), &dense),
            1e-6,
        );

        let routed1 = mglu::reference::mglu_topk_forward(&x, &layer, 1)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let arg_term = mglu_forward_naive(
            &x,
            layer.w(),
            std::slice::from_ref(&layer.binarized()[argmax]),
            layer.activation(),
        )
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        sink.push_metric(
            "topk/k1_argmax".into(),
            max_rel_err(routed1.as_slice(), arg_term.as_slice()),
            1e-12,
        );

        let tied = topk_gate(
            &DenseVector::from_vec(vec![1.0]).map_err(|e| anyhow::anyhow!(e.to_string()))?,
            &DenseMatrix::from_vec(1, 4, vec![0.3; 4]).map_err(|e| anyhow::anyhow!(e.to_string()))?,
            2,
        )
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let tie_ok = tied.as_slice() == [0.5, 0.5, 0.0, 0.0];
        sink.push_bool("topk/tie_lowest_index".into(), tie_ok, "ties select lowest indices");
    }

    // Layer file round-trip.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x10ad);
        let layer = MgluLayer::<f32>::random(6, 10, 3, Activation::Gelu, &mut rng)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?
            .with_random_output(6, &mut rng);
        let path = std::env::temp_dir().join(format!("mglu-verify-{}.layer", std::process::id()));
        mglu::io::save_layer(&layer, &path).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let ok = match mglu::io::load_layer(&path) {
            Ok(mglu::io::AnyLayer::Single(back)) => back == layer,
            _ => false,
        };
        let _ = std::fs::remove_file(&path);
        sink.push_bool("io/layer_roundtrip".into(), ok, "save/load field equality");
    }

    let failed: Vec<&VerifyCase> = sink.cases.iter().filter(|c| !c.ok).collect();
    let report = VerifyReport {
        schema_version: SCHEMA_VERSION,
        kind: "verify",
        passed: sink.cases.len() - failed.len(),
        failed: failed.len(),
        cases: sink.cases.clone(),
    };
    if let Some(path) = &args.json {
        write_json(&report, path)?;
    }
    println!("verify: {} passed, {} failed", report.passed, report.failed);
    for case in &failed {
        println!("  failed: {}", case.name);
    }
    Ok(if report.failed == 0 { 0 } else { 1 })
}
