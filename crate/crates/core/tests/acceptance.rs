//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{naive_forward, random_tensor, rng};
use rand::Rng;
use sapa_core::complexity::{group_thousands, BaselineSettings};
use sapa_core::grad::{GradcheckCase, GradcheckOptions};
use sapa_core::synth::{transition_width, TwoCluster};
use sapa_core::{
    cost, gradcheck, normalize_window, sapa_forward, upsample_bilinear, NormKind, Operator,
    SapaParams, SimilarityKind, Tensor, UpsamplerConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn config(kind: SimilarityKind, norm: NormKind, k: usize, d: usize) -> UpsamplerConfig {
    UpsamplerConfig {
        similarity: kind,
        norm,
        kernel_size: k,
        embed_dim: d,
        ratio: 2,
    }
}

fn within_budget(elapsed: Duration, budget: Duration, detail: String) -> Outcome {
    if elapsed < budget {
        Ok(format!("{detail}, {:.2}s", elapsed.as_secs_f64()))
    } else {
        Err(format!(
            "{detail}, but took {:.2}s (budget {:.0}s)",
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        ))
    }
}

fn smooth_window() -> Outcome {
    let start = Instant::now();
    let (c, d, k) = (16, 8, 5);
    let uniform = 1.0 / (k * k) as f32;
    let mut worst = 0.0f32;
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let v: Vec<f32> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let dec = Tensor::from_fn(6, 6, c, |_, _, ch| v[ch]);
        let enc = random_tensor(12, 12, c, &mut r).cast::<f32>();
        let mut params = SapaParams::seeded(c, c, d, r.random());
        params.gate_bias = r.random_range(-1.0..1.0);
        for kind in SimilarityKind::ALL {
            let (_, kernels) =
                sapa_forward(&enc, &dec, &params, &config(kind, NormKind::Exp, k, d))
                    .map_err(|e| e.to_string())?;
            for &w in kernels.weights() {
                worst = worst.max((w - uniform).abs());
            }
        }
    }
    let detail = format!("100 seeds x 3 kinds, max |w - 1/25| = {worst:.2e}");
    if worst >= 1e-6 {
        return Err(detail);
    }
    within_budget(start.elapsed(), Duration::from_secs(10), detail)
}

fn constant_preservation() -> Outcome {
    let (c, d) = (12, 6);
    let mut worst = 0.0f32;
    let mut variants = 0;
    for seed in 0..10u64 {
        let mut r = rng(1000 + seed);
        let v: Vec<f32> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let dec = Tensor::from_fn(7, 5, c, |_, _, ch| v[ch]);
        let enc = random_tensor(14, 10, c, &mut r).cast::<f32>();
        let base = SapaParams::seeded(c, c, d, r.random());
        let expanded = base.clone().with_separate_self_projection(seed);
        for params in [&base, &expanded] {
            for kind in SimilarityKind::ALL {
                for norm in NormKind::ALL.into_iter().filter(|n| n.is_normalizing()) {
                    for k in [1, 3, 5, 7] {
                        let (out, _) = sapa_forward(&enc, &dec, params, &config(kind, norm, k, d))
                            .map_err(|e| e.to_string())?;
                        for px in out.data().chunks(c) {
                            for (a, b) in px.iter().zip(&v) {
                                worst = worst.max((a - b).abs());
                            }
                        }
                        variants += 1;
                    }
                }
            }
        }
    }
    let detail = format!("{variants} runs over kind/norm/K/gate form, max deviation {worst:.2e}");
    if worst < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn table_parity() -> Outcome {
    let b = BaselineSettings::default();
    let c = 256;
    // (operator, d, K, exact, quoted value, unit of the quote)
    let rows = [
        (
            Operator::Carafe,
            b.carafe_embed_dim,
            5,
            99_584u64,
            99_000u64,
            1_000u64,
        ),
        (
            Operator::IndexNetHin,
            32,
            5,
            2_100_224,
            2_000_000,
            1_000_000,
        ),
        (Operator::A2u, 32, b.a2u_kernel, 27_940, 28_000, 1_000),
        (Operator::SapaB, 32, 5, 69_760, 70_000, 1_000),
    ];
    let mut parts = Vec::new();
    for (op, d, k, exact, quoted, unit) in rows {
        let rep = cost(op, c, d, k).map_err(|e| e.to_string())?;
        if rep.flops != exact {
            return Err(format!("{} gives {} not {}", op.name(), rep.flops, exact));
        }
        if rep.flops.abs_diff(quoted) >= unit {
            return Err(format!(
                "{} = {} is not within one unit of the quoted {}",
                op.name(),
                rep.flops,
                quoted
            ));
        }
        parts.push(format!("{} {}", op.name(), group_thousands(rep.flops)));
    }
    let si = cost(Operator::SapaI, c, 32, 5).map_err(|e| e.to_string())?;
    let sb = cost(Operator::SapaB, c, 32, 5).map_err(|e| e.to_string())?;
    if si.params != 0 || sb.params != 16_384 {
        return Err(format!("params SAPA-I {} SAPA-B {}", si.params, sb.params));
    }
    Ok(format!(
        "{}; params SAPA-I 0, SAPA-B 16,384",
        parts.join(", ")
    ))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let opts = GradcheckOptions::default();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for kind in SimilarityKind::ALL {
        for seed in 0..20u64 {
            let case = GradcheckCase::random(seed, config(kind, NormKind::Exp, 5, 4), 6, 6, 4);
            let rep = gradcheck(&case, &opts).map_err(|e| e.to_string())?;
            worst = worst.max(rep.max_rel_error());
            if !rep.passed() {
                let g = rep
                    .groups
                    .iter()
                    .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                    .unwrap();
                return Err(format!(
                    "{kind} seed {seed}: {} coordinate {} relative error {:.2e}",
                    g.group.name(),
                    g.worst,
                    g.max_rel_error
                ));
            }
            cases += 1;
        }
    }
    let detail = format!("{cases} cases (20 seeds x 3 kinds), max relative error {worst:.2e}");
    within_budget(start.elapsed(), Duration::from_secs(120), detail)
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut r = rng(5000 + seed);
        let (h, w, c) = (
            r.random_range(1..=8),
            r.random_range(1..=8),
            r.random_range(1..=8),
        );
        let kind = SimilarityKind::ALL[seed as usize % 3];
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let d = r.random_range(1..=c);
        let dec = random_tensor(h, w, c, &mut r);
        let enc = random_tensor(2 * h, 2 * w, c, &mut r);
        let mut params = SapaParams::seeded(c, c, d, r.random());
        params.gate_bias = r.random_range(-1.0..1.0);
        let (out, kernels) = sapa_forward(&enc, &dec, &params, &config(kind, NormKind::Exp, k, d))
            .map_err(|e| e.to_string())?;
        let (want, want_k) = naive_forward(&enc, &dec, &params, kind, k, 2);
        worst = worst.max(out.max_abs_diff(&want));
        for (a, b) in kernels.weights().iter().zip(&want_k) {
            worst = worst.max((a - b).abs());
        }
    }
    let detail = format!("50 instances up to 8x8x8 -> 16x16x8, max deviation {worst:.2e}");
    if worst < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn detail_window() -> Outcome {
    let (h, w, c, k) = (16, 16, 64, 5);
    let radius = (k / 2) as isize;
    let mut checked = 0;
    let mut widths = Vec::new();
    for seed in 0..10u64 {
        let f = TwoCluster::generate(h, w, c, 2, seed);
        let cfg = config(SimilarityKind::Inner, NormKind::Exp, k, 32);
        let params = SapaParams::seeded(c, c, 32, seed);
        let (out, kernels) =
            sapa_forward(&f.encoder, &f.decoder, &params, &cfg).map_err(|e| e.to_string())?;
        for row in 0..2 * h {
            for col in 0..2 * w {
                let lc = (col / 2) as isize;
                let cols: Vec<usize> = (-radius..=radius)
                    .map(|v| (lc + v).clamp(0, w as isize - 1) as usize)
                    .collect();
                let in_a = |dc: usize| dc < f.seam;
                let n_a = cols.iter().filter(|&&dc| in_a(dc)).count();
                if n_a == 0 || n_a == cols.len() {
                    continue;
                }
                // Offsets are row-major, so offset index % K selects the column.
                let kern = kernels.kernel(row, col);
                let (mut mass_a, mut mass_b) = (0.0f64, 0.0f64);
                for (i, &wt) in kern.iter().enumerate() {
                    if in_a(cols[i % k]) {
                        mass_a += wt as f64;
                    } else {
                        mass_b += wt as f64;
                    }
                }
                let (matching, other) = if f.output_in_a(col) {
                    (mass_a, mass_b)
                } else {
                    (mass_b, mass_a)
                };
                if matching <= other {
                    return Err(format!(
                        "seed {seed} output ({row}, {col}): matching mass {matching:.3e} <= other {other:.3e}"
                    ));
                }
                checked += 1;
            }
        }
        let bil = upsample_bilinear(&f.decoder, 2, false).map_err(|e| e.to_string())?;
        let ws = transition_width(&out, &f.a, &f.b, 1e-3);
        let wb = transition_width(&bil, &f.a, &f.b, 1e-3);
        if ws > wb {
            return Err(format!(
                "seed {seed}: transition width {ws} > bilinear {wb}"
            ));
        }
        widths.push((ws, wb));
    }
    let (ws, wb) = widths[0];
    Ok(format!(
        "{checked} mixed-window outputs over 10 seeds favour their own cluster; transition width {ws} vs bilinear {wb}"
    ))
}

fn determinism() -> Outcome {
    let mut r = rng(77);
    let c = 256;
    let dec = random_tensor(64, 64, c, &mut r).cast::<f32>();
    let enc = random_tensor(128, 128, c, &mut r).cast::<f32>();
    let params = SapaParams::seeded(c, c, 32, 3);
    let cfg = UpsamplerConfig::default();
    let run = |threads| -> Result<_, String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| sapa_forward(&enc, &dec, &params, &cfg))
            .map_err(|e| e.to_string())
    };
    let (base, base_k) = run(1)?;
    for threads in [2, 8] {
        let (out, k) = run(threads)?;
        let same_out = base
            .data()
            .iter()
            .zip(out.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let same_k = base_k
            .weights()
            .iter()
            .zip(k.weights())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !(same_out && same_k) {
            return Err(format!("{threads} threads differ from 1 thread"));
        }
    }
    Ok("64x64x256 -> 128x128x256 outputs and kernels identical for 1, 2, 8 threads".into())
}

fn normalizers() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f32;
    let mut windows = 0;
    for scale in [1.0f32, 10.0, 100.0] {
        for _ in 0..1000 {
            let scores: Vec<f32> = (0..25).map(|_| scale * r.random_range(-1.0..1.0)).collect();
            for norm in NormKind::ALL.into_iter().filter(|n| n.is_normalizing()) {
                let w = normalize_window(&scores, norm).map_err(|e| e.to_string())?;
                if w.iter().any(|&x| x.is_nan() || x < 0.0) {
                    return Err(format!("{norm} produced a negative or NaN weight"));
                }
                worst = worst.max((w.iter().sum::<f32>() - 1.0).abs());
                windows += 1;
            }
        }
    }
    let negative: Vec<f32> = (0..25).map(|_| r.random_range(-5.0..-0.1)).collect();
    let w = normalize_window(&negative, NormKind::Relu).map_err(|e| e.to_string())?;
    if w.iter().any(|&x| x != 1.0 / 25.0) {
        return Err("all-negative relu window is not uniform".into());
    }
    let detail = format!(
        "{windows} windows, max |sum - 1| = {worst:.2e}; all-negative relu window is uniform"
    );
    if worst < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("smooth-window kernels are uniform", smooth_window),
        ("constant preservation", constant_preservation),
        ("cost table parity", table_parity),
        ("gradient check", gradients),
        ("reference equivalence", oracle_equivalence),
        ("detail-window affiliation", detail_window),
        ("thread-count determinism", determinism),
        ("normalizer invariants", normalizers),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
