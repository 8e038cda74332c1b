//! Runtime invariant suite behind `hydra check`.
//!
//! Each module contributes named checks that re-verify its invariants with
//! seeded inputs. A clean build passes every check; the CLI maps any failure
//! to exit code 1.

use crate::attention;
use crate::autodiff::{self, finite_diff, finite_diff_extrapolated, hydra_graph, Tape, FD_EXTRAPOLATED_STEP, FD_STEP};
use crate::bench;
use crate::flops::{attention_fraction, count_vit_flops, FlopVariant, VitConfig};
use crate::kernels::{self, FeatureMap, FeatureMapSpec, KernelPair};
use crate::rng::SeededRng;
use crate::tensor::{NormP, Tensor};
use crate::toymodel::{self, dataset, ModelConfig, ModelParams, ScheduleStrategy};
use crate::viz;
use crate::Result;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const MODULES: [&str; 8] = [
    "tensor",
    "autodiff",
    "kernels",
    "attention",
    "flops",
    "toymodel",
    "bench",
    "viz",
];

type CheckFn = fn(u64) -> std::result::Result<(), String>;

fn run_checks(module: &'static str, seed: u64, checks: &[(&'static str, CheckFn)]) -> Vec<CheckOutcome> {
    checks
        .iter()
        .map(|(name, f)| match f(seed) {
            Ok(()) => CheckOutcome {
                module,
                name,
                passed: true,
                detail: String::new(),
            },
            Err(detail) => CheckOutcome {
                module,
                name,
                passed: false,
                detail,
            },
        })
        .collect()
}

fn fail_if(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Err(msg())
    } else {
        Ok(())
    }
}

fn e(err: crate::Error) -> String {
    err.to_string()
}

/// Run one module's checks.
pub fn run_module(module: &str, seed: u64) -> Result<Vec<CheckOutcome>> {
    let outcomes = match module {
        "tensor" => run_checks(
            "tensor",
            seed,
            &[
                ("matmul associativity within 1e-9", tensor_associativity),
                ("softmax rows sum to one within 1e-12", tensor_softmax_sums),
                ("ops match naive loop oracles", tensor_naive_oracles),
            ],
        ),
        "autodiff" => run_checks(
            "autodiff",
            seed,
            &[
                ("registered ops match finite differences", autodiff_ops_vs_fd),
                ("tape replay is bit-exact", autodiff_replay),
                ("adjoints are linear", autodiff_linearity),
                ("softmax row sums have zero gradient", autodiff_softmax_zero_grad),
            ],
        ),
        "kernels" => run_checks(
            "kernels",
            seed,
            &[
                ("cosine rows have unit or zero norm", kernels_cosine_norms),
                ("cosine map is scale invariant", kernels_cosine_scale),
                ("softmax-token columns sum to one", kernels_softmax_cols),
                ("identity is bitwise; zero rows stay zero", kernels_identity_and_guard),
            ],
        ),
        "attention" => run_checks(
            "attention",
            seed,
            &[
                ("hydra equals per-head linear attention at H = D", attn_hydra_vs_mla),
                ("identity-kernel association orders agree", attn_association),
                ("aft-simple is a bitwise hydra specialization", attn_aft_bitwise),
                ("polynl equals the hydra-mean route", attn_polynl),
                ("hydra is linear in V", attn_linear_in_v),
                ("hydra is token-permutation equivariant", attn_permutation),
                ("msa attention rows sum to one per head", attn_msa_rows),
                ("mac counters match closed forms", attn_mac_counts),
                ("hydra backward agrees with tape and finite differences", attn_backward),
            ],
        ),
        "flops" => run_checks(
            "flops",
            seed,
            &[
                ("reference table cells reproduce", flops_table),
                ("partial replacement totals reproduce", flops_partial),
                ("scaling claims hold", flops_scaling),
            ],
        ),
        "toymodel" => run_checks(
            "toymodel",
            seed,
            &[
                ("replacement schedules place layers correctly", toy_schedules),
                ("zero replacement is bit-identical to baseline", toy_schedule_zero),
                ("zero learning rate keeps loss constant", toy_zero_lr),
                ("training is deterministic per seed", toy_determinism),
                ("end-to-end gradients match finite differences", toy_gradient_flow),
            ],
        ),
        "bench" => run_checks(
            "bench",
            seed,
            &[
                ("mac-count slopes are exact", bench_mac_slopes),
                ("synthetic power laws fit exactly", bench_synthetic),
                ("peak intermediates scale as claimed", bench_peaks),
            ],
        ),
        "viz" => run_checks(
            "viz",
            seed,
            &[
                ("contributions reconstruct the projected output", viz_decomposition),
                ("rendering is invariant to positive gradient scaling", viz_scaling),
                ("rendering clamps and normalizes", viz_rendering),
            ],
        ),
        other => {
            return Err(crate::Error::Spec(format!(
                "unknown module '{other}' (expected one of {})",
                MODULES.join(", ")
            )))
        }
    };
    Ok(outcomes)
}

/// Run every module's checks.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    MODULES
        .iter()
        .flat_map(|m| run_module(m, seed).expect("module names are known"))
        .collect()
}

// --- tensor ---------------------------------------------------------------

fn tensor_associativity(seed: u64) -> std::result::Result<(), String> {
    for s in 0..20u64 {
        let mut rng = SeededRng::new(seed ^ s);
        let a: Tensor = rng.uniform_matrix(8, 8, -1.0, 1.0);
        let b: Tensor = rng.uniform_matrix(8, 8, -1.0, 1.0);
        let c: Tensor = rng.uniform_matrix(8, 8, -1.0, 1.0);
        let left = a.matmul(&b).map_err(e)?.matmul(&c).map_err(e)?;
        let right = a.matmul(&b.matmul(&c).map_err(e)?).map_err(e)?;
        let err = left.max_relative_error(&right).map_err(e)?;
        fail_if(err >= 1e-9, || format!("seed {s}: relative error {err}"))?;
    }
    Ok(())
}

fn tensor_softmax_sums(seed: u64) -> std::result::Result<(), String> {
    for (s, scale) in [(0u64, 1.0f64), (1, 100.0), (2, 1e4)] {
        let mut rng = SeededRng::new(seed ^ s);
        let x: Tensor = rng.uniform_matrix(6, 7, -scale, scale);
        let sm = x.softmax_rows();
        for i in 0..6 {
            let sum: f64 = sm.row(i).iter().sum();
            fail_if((sum - 1.0).abs() >= 1e-12, || {
                format!("row sum {sum} at magnitude {scale}")
            })?;
        }
    }
    Ok(())
}

fn tensor_naive_oracles(seed: u64) -> std::result::Result<(), String> {
    for s in 0..10u64 {
        let mut rng = SeededRng::new(seed ^ (s + 77));
        let m = 1 + rng.uniform_usize(16);
        let k = 1 + rng.uniform_usize(16);
        let n = 1 + rng.uniform_usize(16);
        let a: Tensor = rng.uniform_matrix(m, k, -1.0, 1.0);
        let b: Tensor = rng.uniform_matrix(k, n, -1.0, 1.0);
        let got = a.matmul(&b).map_err(e)?;
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for p in 0..k {
                    want += a.at(i, p) * b.at(p, j);
                }
                fail_if((got.at(i, j) - want).abs() >= 1e-12, || {
                    format!("matmul[{i}][{j}] = {} vs oracle {want}", got.at(i, j))
                })?;
            }
        }
        let sums = a.sum_rows();
        for j in 0..k {
            let want: f64 = (0..m).map(|i| a.at(i, j)).sum();
            fail_if(sums.data()[j] != want, || "sum_rows oracle mismatch".into())?;
        }
        let norms = a.norm_rows(NormP::L2);
        for i in 0..m {
            let want = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            fail_if((norms.data()[i] - want).abs() >= 1e-12, || {
                "norm_rows oracle mismatch".into()
            })?;
        }
    }
    Ok(())
}

// --- autodiff ---------------------------------------------------------------

fn autodiff_ops_vs_fd(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0xad);
    let x: Tensor = rng.uniform_matrix(4, 5, -1.0, 1.0);
    let w: Tensor = rng.uniform_matrix(4, 5, -1.0, 1.0);

    // weighted sums of each op output, differentiated w.r.t. x
    type Build = fn(&mut Tape, autodiff::VarId) -> autodiff::VarId;
    let builds: Vec<(&str, Build)> = vec![
        ("softmax_rows", |t, x| t.softmax_rows(x).unwrap()),
        ("softmax_cols", |t, x| t.softmax_cols(x).unwrap()),
        ("layer_norm", |t, x| t.layer_norm(x).unwrap()),
        ("gelu", |t, x| t.gelu(x).unwrap()),
        ("norm_rows", |t, x| t.norm_rows(x, NormP::L2).unwrap()),
        ("matmul", |t, x| {
            let xt = t.transpose(x).unwrap();
            t.matmul(x, xt).unwrap()
        }),
    ];
    for (name, build) in &builds {
        let grad = {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let out = build(&mut tape, xi);
            let shape = tape.value(out).shape().to_vec();
            let weight = tape.input(weight_tensor(&shape));
            let prod = tape.ewise_mul(out, weight).map_err(e)?;
            let loss = tape.sum_all(prod).map_err(e)?;
            tape.backward(loss).map_err(e)?.get(xi).map_err(e)?
        };
        let f = |xs: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let xi = tape.input(xs[0].clone());
            let out = build(&mut tape, xi);
            let shape = tape.value(out).shape().to_vec();
            let weight = tape.input(weight_tensor(&shape));
            let prod = tape.ewise_mul(out, weight)?;
            let loss = tape.sum_all(prod)?;
            tape.scalar_value(loss)
        };
        let fd = finite_diff(&f, &[x.clone()], FD_STEP).map_err(e)?;
        let err = grad.max_relative_error(&fd[0]).map_err(e)?;
        fail_if(err >= 1e-4, || format!("{name}: relative error {err}"))?;
    }

    for map in FeatureMap::ALL {
        let spec = FeatureMapSpec::new(map);
        let grad = {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let fm = tape.feature_map(xi, spec, 4).map_err(e)?;
            let wi = tape.input(w.clone());
            let prod = tape.ewise_mul(fm, wi).map_err(e)?;
            let loss = tape.sum_all(prod).map_err(e)?;
            tape.backward(loss).map_err(e)?.get(xi).map_err(e)?
        };
        let f = |xs: &[Tensor]| -> Result<f64> {
            let y = kernels::apply_feature_map(&xs[0], &spec, 4)?;
            Ok(y.ewise_mul(&w)?.sum_all())
        };
        let fd = finite_diff(&f, &[x.clone()], FD_STEP).map_err(e)?;
        let err = grad.max_relative_error(&fd[0]).map_err(e)?;
        fail_if(err >= 1e-4, || format!("map {}: relative error {err}", map.name()))?;
    }
    Ok(())
}

fn weight_tensor(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| 0.5 + 0.37 * ((i * 5 + 3) % 7) as f64).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("finite weights")
}

fn autodiff_replay(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0xbe);
    let mut tape = Tape::new();
    let q = tape.input(rng.uniform_matrix(5, 6, -1.0, 1.0));
    let k = tape.input(rng.uniform_matrix(5, 6, -1.0, 1.0));
    let v = tape.input(rng.uniform_matrix(5, 6, -1.0, 1.0));
    let h = hydra_graph(&mut tape, q, k, v, &KernelPair::cosine()).map_err(e)?;
    let m = autodiff::msa_graph(&mut tape, q, k, v, 3).map_err(e)?;
    let s = tape.ewise_add(h, m).map_err(e)?;
    let _ = tape.sum_all(s).map_err(e)?;
    tape.replay_check().map_err(e)
}

fn autodiff_linearity(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0xcd);
    let xv: Tensor = rng.uniform_matrix(3, 3, -1.0, 1.0);
    let build = |which: u8| -> Tensor {
        let mut tape = Tape::new();
        let x = tape.input(xv.clone());
        let sq = tape.ewise_mul(x, x).unwrap();
        let s1 = tape.sum_all(sq).unwrap();
        let sm = tape.softmax_rows(x).unwrap();
        let first = tape.slice_cols(sm, 0, 1).unwrap();
        let s2 = tape.sum_all(first).unwrap();
        let out = match which {
            0 => s1,
            1 => s2,
            _ => tape.ewise_add(s1, s2).unwrap(),
        };
        tape.backward(out).unwrap().get(x).unwrap()
    };
    let sum = build(0).ewise_add(&build(1)).map_err(e)?;
    let joint = build(2);
    let diff = joint.max_abs_diff(&sum).map_err(e)?;
    fail_if(diff >= 1e-12, || format!("linearity violated by {diff}"))
}

fn autodiff_softmax_zero_grad(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0xef);
    let mut tape = Tape::new();
    let x = tape.input(rng.uniform_matrix(4, 6, -3.0, 3.0));
    let s = tape.softmax_rows(x).map_err(e)?;
    let out = tape.sum_all(s).map_err(e)?;
    let g = tape.backward(out).map_err(e)?.get(x).map_err(e)?;
    let max = g.max_abs_diff(&Tensor::zeros(&[4, 6])).map_err(e)?;
    fail_if(max >= 1e-10, || format!("gradient magnitude {max}"))
}

// --- kernels ----------------------------------------------------------------

fn kernels_cosine_norms(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x11);
    let mut x: Tensor = rng.uniform_matrix(6, 5, -2.0, 2.0);
    for c in 0..5 {
        x.data_mut()[2 * 5 + c] = 0.0; // plant a zero row
    }
    let y = kernels::apply_feature_map(&x, &FeatureMapSpec::new(FeatureMap::CosineL2), 6).map_err(e)?;
    for i in 0..6 {
        let n: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        fail_if(!(n == 0.0 || (n - 1.0).abs() < 1e-9), || {
            format!("row {i} norm {n}")
        })?;
    }
    Ok(())
}

fn kernels_cosine_scale(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x12);
    let x: Tensor = rng.uniform_matrix(4, 6, -1.0, 1.0);
    let spec = FeatureMapSpec::new(FeatureMap::CosineL2);
    for c in [1e-3, 0.5, 42.0, 1e3] {
        let a = kernels::apply_feature_map(&x, &spec, 4).map_err(e)?;
        let b = kernels::apply_feature_map(&x.scale(c), &spec, 4).map_err(e)?;
        let diff = a.max_abs_diff(&b).map_err(e)?;
        fail_if(diff >= 1e-12, || format!("scale {c}: diff {diff}"))?;
    }
    Ok(())
}

fn kernels_softmax_cols(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x13);
    let x: Tensor = rng.uniform_matrix(7, 4, -5.0, 5.0);
    let y = kernels::apply_feature_map(&x, &FeatureMapSpec::new(FeatureMap::SoftmaxTokens), 7).map_err(e)?;
    for j in 0..4 {
        let s: f64 = (0..7).map(|i| y.at(i, j)).sum();
        fail_if((s - 1.0).abs() >= 1e-12, || format!("column {j} sums to {s}"))?;
    }
    Ok(())
}

fn kernels_identity_and_guard(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x14);
    let x: Tensor = rng.uniform_matrix(5, 5, -3.0, 3.0);
    let y = kernels::apply_feature_map(&x, &FeatureMapSpec::new(FeatureMap::Identity), 5).map_err(e)?;
    fail_if(x != y, || "identity map is not bitwise".into())?;

    let zero: Tensor = Tensor::zeros(&[2, 3]);
    for map in [FeatureMap::CosineL2, FeatureMap::L1Norm] {
        let out = kernels::apply_feature_map(&zero, &FeatureMapSpec::new(map), 2).map_err(e)?;
        fail_if(out != zero, || format!("{} zero rows moved", map.name()))?;
    }
    Ok(())
}

// --- attention ----------------------------------------------------------------

fn attn_hydra_vs_mla(seed: u64) -> std::result::Result<(), String> {
    for (name, pair) in KernelPair::table_pairs() {
        for s in 0..20u64 {
            let mut rng = SeededRng::new(seed ^ (s * 31 + 7));
            let t = 2 + rng.uniform_usize(7);
            let d = 2 + rng.uniform_usize(7);
            let q: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
            let k: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
            let v: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
            let a = attention::hydra(&q, &k, &v, &pair).map_err(e)?;
            let b = attention::mla(&q, &k, &v, d, &pair).map_err(e)?;
            let diff = a.max_abs_diff(&b).map_err(e)?;
            fail_if(diff >= 1e-12, || format!("kernel {name}, seed {s}: diff {diff}"))?;
        }
    }
    Ok(())
}

fn attn_association(seed: u64) -> std::result::Result<(), String> {
    for s in 0..20u64 {
        let mut rng = SeededRng::new(seed ^ (s + 0x21));
        let q: Tensor = rng.uniform_matrix(6, 4, -1.0, 1.0);
        let k: Tensor = rng.uniform_matrix(6, 4, -1.0, 1.0);
        let v: Tensor = rng.uniform_matrix(6, 4, -1.0, 1.0);
        let left = q.matmul(&k.transpose()).map_err(e)?.matmul(&v).map_err(e)?;
        let right = attention::mla(&q, &k, &v, 1, &KernelPair::identity()).map_err(e)?;
        let err = left.max_relative_error(&right).map_err(e)?;
        fail_if(err >= 1e-9, || format!("seed {s}: relative error {err}"))?;
    }
    Ok(())
}

fn attn_aft_bitwise(seed: u64) -> std::result::Result<(), String> {
    for s in 0..20u64 {
        let mut rng = SeededRng::new(seed ^ (s + 0x22));
        let t = 1 + rng.uniform_usize(8);
        let d = 1 + rng.uniform_usize(8);
        let q: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let k: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let v: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let a = attention::aft_simple(&q, &k, &v).map_err(e)?;
        let b = attention::hydra(&q, &k, &v, &KernelPair::sigmoid_softmax()).map_err(e)?;
        fail_if(a != b, || format!("seed {s}: reduction is not bitwise"))?;
    }
    Ok(())
}

fn attn_polynl(seed: u64) -> std::result::Result<(), String> {
    for s in 0..20u64 {
        let mut rng = SeededRng::new(seed ^ (s + 0x23));
        let t = 2 + rng.uniform_usize(7);
        let d = 2 + rng.uniform_usize(7);
        let x: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let w1: Tensor = rng.uniform_matrix(d, d, -1.0, 1.0);
        let w2: Tensor = rng.uniform_matrix(d, d, -1.0, 1.0);
        let w3: Tensor = rng.uniform_matrix(d, d, -1.0, 1.0);
        let direct = attention::polynl(&x, &w1, &w2, &w3).map_err(e)?;
        let k = x.matmul(&w1).map_err(e)?;
        let v = x.matmul(&w2).map_err(e)?;
        let via = attention::hydra(&x, &k, &v, &KernelPair::mean())
            .map_err(e)?
            .matmul(&w3)
            .map_err(e)?;
        let diff = direct.max_abs_diff(&via).map_err(e)?;
        fail_if(diff >= 1e-12, || format!("seed {s}: diff {diff}"))?;
    }
    Ok(())
}

fn attn_linear_in_v(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x24);
    let q: Tensor = rng.uniform_matrix(4, 5, -1.0, 1.0);
    let k: Tensor = rng.uniform_matrix(4, 5, -1.0, 1.0);
    let v1: Tensor = rng.uniform_matrix(4, 5, -1.0, 1.0);
    let v2: Tensor = rng.uniform_matrix(4, 5, -1.0, 1.0);
    let pair = KernelPair::cosine();
    let (a, b) = (0.7, -1.3);
    let combo = v1.scale(a).ewise_add(&v2.scale(b)).map_err(e)?;
    let lhs = attention::hydra(&q, &k, &combo, &pair).map_err(e)?;
    let rhs = attention::hydra(&q, &k, &v1, &pair)
        .map_err(e)?
        .scale(a)
        .ewise_add(&attention::hydra(&q, &k, &v2, &pair).map_err(e)?.scale(b))
        .map_err(e)?;
    let diff = lhs.max_abs_diff(&rhs).map_err(e)?;
    fail_if(diff >= 1e-10, || format!("linearity violated by {diff}"))
}

fn attn_permutation(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x25);
    let q: Tensor = rng.uniform_matrix(6, 4, -1.0, 1.0);
    let k: Tensor = rng.uniform_matrix(6, 4, -1.0, 1.0);
    let v: Tensor = rng.uniform_matrix(6, 4, -1.0, 1.0);
    let perm = rng.permutation(6);
    let permute = |x: &Tensor| {
        let rows: Vec<&[f64]> = perm.iter().map(|&i| x.row(i)).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let pair = KernelPair::cosine();
    let direct = permute(&attention::hydra(&q, &k, &v, &pair).map_err(e)?);
    let permuted = attention::hydra(&permute(&q), &permute(&k), &permute(&v), &pair).map_err(e)?;
    let diff = direct.max_abs_diff(&permuted).map_err(e)?;
    fail_if(diff >= 1e-12, || format!("equivariance violated by {diff}"))
}

fn attn_msa_rows(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x26);
    let q: Tensor = rng.uniform_matrix(5, 6, -1.0, 1.0);
    let k: Tensor = rng.uniform_matrix(5, 6, -1.0, 1.0);
    for heads in [1usize, 2, 3, 6] {
        for (h, w) in attention::msa_attention_weights(&q, &k, heads)
            .map_err(e)?
            .iter()
            .enumerate()
        {
            for i in 0..w.rows() {
                let s: f64 = w.row(i).iter().sum();
                fail_if((s - 1.0).abs() >= 1e-12, || {
                    format!("heads {heads}, head {h}, row {i} sums to {s}")
                })?;
            }
        }
    }
    Ok(())
}

fn attn_mac_counts(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x27);
    let t = 8usize;
    let d = 8usize;
    let q: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
    let k: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
    let v: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
    for heads in [1usize, 2, 4, 8] {
        let (_, s) = attention::msa_instrumented(&q, &k, &v, heads).map_err(e)?;
        fail_if(s.attention_macs != (2 * t * t * d) as u64, || {
            format!("msa macs {} at H={heads}", s.attention_macs)
        })?;
        let (_, s) = attention::mla_instrumented(&q, &k, &v, heads, &KernelPair::cosine()).map_err(e)?;
        let want = (2 * t * (d / heads) * (d / heads) * heads) as u64;
        fail_if(s.attention_macs != want, || {
            format!("mla macs {} at H={heads}, want {want}", s.attention_macs)
        })?;
    }
    let (_, s) = attention::hydra_instrumented(&q, &k, &v, &KernelPair::cosine()).map_err(e)?;
    fail_if(s.attention_macs != (2 * t * d) as u64, || {
        format!("hydra macs {}", s.attention_macs)
    })
}

fn attn_backward(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x28);
    let q: Tensor = rng.uniform_matrix(4, 4, -1.0, 1.0);
    let k: Tensor = rng.uniform_matrix(4, 4, -1.0, 1.0);
    let v: Tensor = rng.uniform_matrix(4, 4, -1.0, 1.0);
    let upstream: Tensor = rng.uniform_matrix(4, 4, -1.0, 1.0);
    let pair = KernelPair::cosine();
    let (dq, dk, dv) = attention::hydra_backward(&q, &k, &v, &pair, &upstream).map_err(e)?;

    let f = |xs: &[Tensor]| -> Result<f64> {
        let out = attention::hydra(&xs[0], &xs[1], &xs[2], &pair)?;
        Ok(out.ewise_mul(&upstream)?.sum_all())
    };
    let fd = finite_diff(&f, &[q, k, v], FD_STEP).map_err(e)?;
    for (name, got, want) in [("dq", &dq, &fd[0]), ("dk", &dk, &fd[1]), ("dv", &dv, &fd[2])] {
        let err = got.max_relative_error(want).map_err(e)?;
        fail_if(err >= 1e-4, || format!("{name}: relative error {err}"))?;
    }
    Ok(())
}

// --- flops ----------------------------------------------------------------

const TABLE_CELLS: [(usize, f64, f64, f64, f64, f64); 5] = [
    // size, baseline G, baseline %, hydra G, window G, baseline->window %
    (224, 17.6, 4.10, 16.8, 17.6, 4.10),
    (384, 55.1, 11.13, 49.0, 51.1, 4.10),
    (448, 78.0, 14.56, 66.7, 69.5, 4.10),
    (1024, 657.3, 47.06, 348.1, 362.8, 4.10),
    (1280, 1298.9, 58.14, 543.8, 566.9, 4.10),
];

fn flops_table(_seed: u64) -> std::result::Result<(), String> {
    for (size, base_g, base_pct, hydra_g, window_g, window_pct) in TABLE_CELLS {
        let cfg = VitConfig::vit_b16(size);
        let base = count_vit_flops(&cfg, FlopVariant::Baseline, 0).map_err(e)?;
        let hydra = count_vit_flops(&cfg, FlopVariant::Hydra, 12).map_err(e)?;
        let window = count_vit_flops(&cfg, FlopVariant::LocalWindow, 0).map_err(e)?;
        for (name, got, want) in [
            ("baseline", base.total_gmacs(), base_g),
            ("hydra", hydra.total_gmacs(), hydra_g),
            ("window", window.total_gmacs(), window_g),
        ] {
            let pct = (got - want).abs() / want * 100.0;
            fail_if(pct > 1.5, || {
                format!("{size}px {name}: {got:.2} G vs {want} G ({pct:.2}% off)")
            })?;
        }
        let bf = attention_fraction(&base);
        fail_if((bf - base_pct).abs() > 0.15, || {
            format!("{size}px baseline fraction {bf:.3} vs {base_pct}")
        })?;
        let hf = attention_fraction(&hydra);
        fail_if((hf - 0.02).abs() > 0.01, || {
            format!("{size}px hydra fraction {hf:.4}")
        })?;
        let wf = attention_fraction(&window);
        fail_if((wf - window_pct).abs() > 0.15, || {
            format!("{size}px window fraction {wf:.3}")
        })?;
    }
    Ok(())
}

fn flops_partial(_seed: u64) -> std::result::Result<(), String> {
    let cfg = VitConfig::vit_b16(224);
    for (n, want) in [(0usize, 17.58f64), (2, 17.46), (8, 17.11), (12, 16.87)] {
        let r = count_vit_flops(&cfg, FlopVariant::Hydra, n).map_err(e)?;
        let pct = (r.total_gmacs() - want).abs() / want * 100.0;
        fail_if(pct > 1.0, || {
            format!("224px hydra n={n}: {:.3} G vs {want} ({pct:.2}% off)", r.total_gmacs())
        })?;
    }
    let cfg = VitConfig::vit_b16(384);
    for (n, want) in [(0usize, 55.54f64), (2, 54.52), (7, 51.96), (12, 49.40)] {
        let r = count_vit_flops(&cfg, FlopVariant::Hydra, n).map_err(e)?;
        let pct = (r.total_gmacs() - want).abs() / want * 100.0;
        fail_if(pct > 1.5, || {
            format!("384px hydra n={n}: {:.3} G vs {want} ({pct:.2}% off)", r.total_gmacs())
        })?;
    }
    Ok(())
}

fn flops_scaling(_seed: u64) -> std::result::Result<(), String> {
    let a = count_vit_flops(&VitConfig::vit_b16(224), FlopVariant::Baseline, 0).map_err(e)?;
    let b = count_vit_flops(&VitConfig::vit_b16(448), FlopVariant::Baseline, 0).map_err(e)?;
    let ratio = b.attention_macs as f64 / a.attention_macs as f64;
    fail_if((ratio - 16.0).abs() / 16.0 > 0.05, || {
        format!("quadratic scaling ratio {ratio}")
    })?;

    let ah = count_vit_flops(&VitConfig::vit_b16(224), FlopVariant::Hydra, 12).map_err(e)?;
    let bh = count_vit_flops(&VitConfig::vit_b16(448), FlopVariant::Hydra, 12).map_err(e)?;
    let ratio = bh.attention_macs as f64 / ah.attention_macs as f64;
    fail_if(!(3.9..=4.1).contains(&ratio), || {
        format!("linear scaling ratio {ratio}")
    })?;

    let mut prev = u64::MAX;
    for n in 0..=12 {
        let r = count_vit_flops(&VitConfig::vit_b16(384), FlopVariant::Hydra, n).map_err(e)?;
        fail_if(r.total_macs >= prev, || {
            format!("total did not decrease at n={n}")
        })?;
        prev = r.total_macs;
    }
    Ok(())
}

// --- toymodel ----------------------------------------------------------------

fn toy_schedules(_seed: u64) -> std::result::Result<(), String> {
    use toymodel::{replacement_schedule, BlockKind};
    let back = replacement_schedule(ScheduleStrategy::Back, 2, 12).map_err(e)?;
    let hydra_at: Vec<usize> = back
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == BlockKind::Hydra)
        .map(|(i, _)| i + 1)
        .collect();
    fail_if(hydra_at != vec![11, 12], || format!("back(2,12) -> {hydra_at:?}"))?;

    let front = replacement_schedule(ScheduleStrategy::Front, 0, 12).map_err(e)?;
    fail_if(front.iter().any(|k| *k == BlockKind::Hydra), || {
        "front(0,12) is not the baseline".into()
    })?;

    let inter = replacement_schedule(ScheduleStrategy::Interleave, 3, 12).map_err(e)?;
    let hydra_at: Vec<usize> = inter
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == BlockKind::Hydra)
        .map(|(i, _)| i + 1)
        .collect();
    fail_if(hydra_at != vec![8, 10, 12], || {
        format!("interleave(3,12) -> {hydra_at:?}")
    })?;

    fail_if(
        replacement_schedule(ScheduleStrategy::Back, 13, 12).is_ok(),
        || "n > depth must be rejected".into(),
    )
}

fn toy_schedule_zero(seed: u64) -> std::result::Result<(), String> {
    let base = ModelConfig::new(2, 8, 2, 4, 8, 2).map_err(e)?;
    let scheduled = base
        .clone()
        .with_schedule(ScheduleStrategy::Back, 0, KernelPair::cosine())
        .map_err(e)?;
    let mut ra = SeededRng::new(seed);
    let mut rb = SeededRng::new(seed);
    let pa = ModelParams::init(&base, &mut ra);
    let pb = ModelParams::init(&scheduled, &mut rb);
    let mut rng = SeededRng::new(seed ^ 1);
    let img = rng.uniform_matrix(8, 8, 0.0, 1.0);
    let la = toymodel::predict_logits(&base, &pa, &img).map_err(e)?;
    let lb = toymodel::predict_logits(&scheduled, &pb, &img).map_err(e)?;
    fail_if(la != lb, || "logits differ from baseline".into())
}

fn toy_zero_lr(seed: u64) -> std::result::Result<(), String> {
    let mut cfg = ModelConfig::new(2, 8, 2, 4, 8, 2)
        .map_err(e)?
        .with_schedule(ScheduleStrategy::Back, 2, KernelPair::cosine())
        .map_err(e)?;
    cfg.learning_rate = 0.0;
    cfg.steps = 4;
    cfg.batch_size = 2;
    cfg.seed = seed;
    let data = dataset::generate_stripes(1, 0, 8, seed);
    let (_, report) = toymodel::train(&cfg, &data).map_err(e)?;
    let first = report.step_losses[0];
    fail_if(report.step_losses.iter().any(|&l| l != first), || {
        "loss moved under zero learning rate".into()
    })
}

fn toy_determinism(seed: u64) -> std::result::Result<(), String> {
    let mut cfg = ModelConfig::new(2, 8, 2, 4, 8, 2)
        .map_err(e)?
        .with_schedule(ScheduleStrategy::Back, 1, KernelPair::cosine())
        .map_err(e)?;
    cfg.steps = 5;
    cfg.batch_size = 4;
    cfg.seed = seed;
    let data = dataset::generate_stripes(4, 2, 8, seed);
    let (_, a) = toymodel::train(&cfg, &data).map_err(e)?;
    let (_, b) = toymodel::train(&cfg, &data).map_err(e)?;
    fail_if(a.step_losses != b.step_losses, || {
        "identical seeds diverged".into()
    })
}

fn toy_gradient_flow(seed: u64) -> std::result::Result<(), String> {
    let mut cfg = ModelConfig::new(2, 8, 2, 4, 8, 2)
        .map_err(e)?
        .with_schedule(ScheduleStrategy::Back, 1, KernelPair::cosine())
        .map_err(e)?;
    cfg.seed = seed ^ 0x70;
    let mut rng = SeededRng::new(cfg.seed);
    let params = ModelParams::init(&cfg, &mut rng);
    let mut img_rng = SeededRng::new(seed ^ 0x71);
    let images = [
        img_rng.uniform_matrix(8, 8, 0.0, 1.0),
        img_rng.uniform_matrix(8, 8, 0.0, 1.0),
    ];
    let labels = [0usize, 1];

    let mut trace = toymodel::forward_batch(&cfg, &params, &[&images[0], &images[1]]).map_err(e)?;
    let loss = toymodel::batch_loss(&mut trace, &labels).map_err(e)?;
    let grads = trace.tape.backward(loss).map_err(e)?;

    let names: Vec<String> = params.items.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = params.items.iter().map(|(_, t)| t.clone()).collect();
    let f = |xs: &[Tensor]| -> Result<f64> {
        let p = ModelParams {
            items: names.iter().cloned().zip(xs.iter().cloned()).collect(),
        };
        let mut trace = toymodel::forward_batch(&cfg, &p, &[&images[0], &images[1]])?;
        let loss = toymodel::batch_loss(&mut trace, &labels)?;
        trace.tape.scalar_value(loss)
    };
    let fd = finite_diff_extrapolated(&f, &tensors, FD_EXTRAPOLATED_STEP).map_err(e)?;
    for ((name, _), fd_grad) in params.items.iter().zip(&fd) {
        let id = trace.param_id(name).map_err(e)?;
        let g = grads.get(id).map_err(e)?;
        let err = g.max_relative_error(fd_grad).map_err(e)?;
        fail_if(err >= 1e-3, || format!("parameter {name}: relative error {err}"))?;
    }
    Ok(())
}

// --- bench ----------------------------------------------------------------

fn bench_mac_slopes(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x31);
    // hydra in T
    let mut pts = Vec::new();
    for t in [8usize, 16, 32, 64] {
        let q: Tensor = rng.uniform_matrix(t, 16, -1.0, 1.0);
        let (_, s) = attention::hydra_instrumented(&q, &q, &q, &KernelPair::cosine()).map_err(e)?;
        pts.push((t as f64, s.attention_macs as f64));
    }
    let slope = bench::fit_loglog_slope(&pts).map_err(e)?;
    fail_if((slope - 1.0).abs() >= 1e-9, || format!("hydra T slope {slope}"))?;

    // hydra in D
    let mut pts = Vec::new();
    for d in [8usize, 16, 32, 64] {
        let q: Tensor = rng.uniform_matrix(16, d, -1.0, 1.0);
        let (_, s) = attention::hydra_instrumented(&q, &q, &q, &KernelPair::cosine()).map_err(e)?;
        pts.push((d as f64, s.attention_macs as f64));
    }
    let slope = bench::fit_loglog_slope(&pts).map_err(e)?;
    fail_if((slope - 1.0).abs() >= 1e-9, || format!("hydra D slope {slope}"))?;

    // mla in H and msa in H
    let q: Tensor = rng.uniform_matrix(16, 64, -1.0, 1.0);
    let mut mla_pts = Vec::new();
    let mut msa_pts = Vec::new();
    for h in [1usize, 2, 4, 8, 16] {
        let (_, s) = attention::mla_instrumented(&q, &q, &q, h, &KernelPair::cosine()).map_err(e)?;
        mla_pts.push((h as f64, s.attention_macs as f64));
        let (_, s) = attention::msa_instrumented(&q, &q, &q, h).map_err(e)?;
        msa_pts.push((h as f64, s.attention_macs as f64));
    }
    let slope = bench::fit_loglog_slope(&mla_pts).map_err(e)?;
    fail_if((slope + 1.0).abs() >= 1e-9, || format!("mla H slope {slope}"))?;
    let slope = bench::fit_loglog_slope(&msa_pts).map_err(e)?;
    fail_if(slope.abs() >= 1e-9, || format!("msa H slope {slope}"))
}

fn bench_synthetic(_seed: u64) -> std::result::Result<(), String> {
    let quad: Vec<(f64, f64)> = [64.0f64, 128.0, 256.0, 512.0]
        .iter()
        .map(|&t| (t, 2.0e-9 * t * t))
        .collect();
    let slope = bench::fit_loglog_slope(&quad).map_err(e)?;
    fail_if((slope - 2.0).abs() >= 1e-9, || format!("quadratic slope {slope}"))?;
    let lin: Vec<(f64, f64)> = [64.0f64, 128.0, 256.0, 512.0]
        .iter()
        .map(|&t| (t, 5.0e-7 * t))
        .collect();
    let slope = bench::fit_loglog_slope(&lin).map_err(e)?;
    fail_if((slope - 1.0).abs() >= 1e-9, || format!("linear slope {slope}"))
}

fn bench_peaks(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x33);
    for (t, h) in [(8usize, 1usize), (16, 2), (32, 4)] {
        let d = 8;
        let q: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let (_, s) = attention::msa_instrumented(&q, &q, &q, h).map_err(e)?;
        fail_if(s.peak_intermediate_elems != (h * t * t) as u64, || {
            format!("msa peak {} at T={t}, H={h}", s.peak_intermediate_elems)
        })?;
        let (_, s) = attention::hydra_instrumented(&q, &q, &q, &KernelPair::cosine()).map_err(e)?;
        fail_if(s.peak_intermediate_elems != (t * d) as u64, || {
            format!("hydra peak {} at T={t}", s.peak_intermediate_elems)
        })?;
    }
    Ok(())
}

// --- viz ----------------------------------------------------------------

fn viz_decomposition(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x41);
    let t = 5;
    let d = 4;
    let q: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
    let k: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
    let v: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
    let g = rng.uniform_vector(d, -1.0, 1.0);
    let pair = KernelPair::cosine();
    let phi_q = kernels::apply_feature_map(&q, &pair.q, t).map_err(e)?;
    let phi_k = kernels::apply_feature_map(&k, &pair.k, t).map_err(e)?;
    let out = attention::hydra(&q, &k, &v, &pair).map_err(e)?;

    let qc = phi_q.slice_rows(0, 1).map_err(e)?.reshape(&[d]).map_err(e)?;
    let scores = viz::token_contributions(&qc, &phi_k, &v, &g).map_err(e)?;
    let total: f64 = scores.iter().sum();
    let projected: f64 = out.row(0).iter().zip(g.data()).map(|(&o, &gv)| o * gv).sum();
    fail_if((total - projected).abs() >= 1e-10, || {
        format!("sum {total} vs projected {projected}")
    })
}

fn viz_scaling(seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed ^ 0x42);
    let scores: Vec<f64> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let scaled: Vec<f64> = scores.iter().map(|s| s * 3.7).collect();
    let a = viz::render_heatmap(&scores, (3, 3), 2).map_err(e)?;
    let b = viz::render_heatmap(&scaled, (3, 3), 2).map_err(e)?;
    fail_if(a != b, || "rendered map changed under positive scaling".into())
}

fn viz_rendering(_seed: u64) -> std::result::Result<(), String> {
    let img = viz::render_heatmap(&[0.5, 0.5], (1, 2), 1).map_err(e)?;
    fail_if(img.data != vec![255, 255], || "uniform scores are not white".into())?;
    let img = viz::render_heatmap(&[-1.0, -2.0], (1, 2), 1).map_err(e)?;
    fail_if(img.data != vec![0, 0], || "negative scores are not black".into())?;
    let img = viz::render_heatmap(&[0.0, 3.0, 0.0, -1.0], (2, 2), 1).map_err(e)?;
    fail_if(img.data != vec![0, 255, 0, 0], || "single positive cell wrong".into())
}
