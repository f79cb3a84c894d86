//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! `cargo test -p axialseg --test acceptance` runs everything; numeric
//! arguments select criteria, e.g. `cargo test --test acceptance -- 1 2 9`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use axialseg::attention::{
    axial_attention, count_extra_gate_params, full_self_attention_oracle, AttnFlavor, Axis, GateGranularity,
    GateSet, GatedAxialLayer, ProjectionSet, RelPosEnc, TransformerLayerConfig,
};
use axialseg::cli::{self, class_errors, RunConfig};
use axialseg::data::{generate, SynthSpec};
use axialseg::gradcheck::grad_check;
use axialseg::model::{extract_patches, merge_patches, Model, ModelConfig, Variant};
use axialseg::nn::Builder;
use axialseg::tensor::{Graph, Mode, ParamKind, ParamStore, Tensor};
use axialseg::train::{evaluate, train, EpochRecord, TrainConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn run_axial(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    proj: &ProjectionSet,
    enc: Option<&RelPosEnc>,
    gates: Option<&GateSet>,
) -> Tensor<f64> {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.input(x.clone());
    let y = axial_attention(&mut g, store, xi, proj, enc, gates, Axis::Width).unwrap();
    g.value(y).clone()
}

fn c1_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for case in 0..20 {
        let c = rng.random_range(1..=8);
        let w = rng.random_range(1..=16);
        let d = rng.random_range(1..=8);
        let mut store = ParamStore::new();
        let proj = ProjectionSet::new(&mut Builder::new(&mut store, case), "p", c, d).unwrap();
        let x = rand_tensor(&[1, c, 1, w], &mut rng);
        let y = run_axial(&store, &x, &proj, None, None);
        let oracle = full_self_attention_oracle(&x, &store, &proj).unwrap();
        worst = worst.max(y.max_abs_diff(&oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-8, "max |axial - oracle| = {worst:.3e} >= 1e-8");
    ensure!(secs < 5.0, "took {secs:.2}s (limit 5s)");
    Ok(format!("20 cases, max diff {worst:.2e}"))
}

fn c2_gate_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..10u64 {
        let (c, h, w, d) = (
            rng.random_range(1..=6),
            rng.random_range(1..=4),
            rng.random_range(1..=9),
            rng.random_range(1..=6),
        );
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 100 + case);
        let proj = ProjectionSet::new(&mut b, "p", c, d).unwrap();
        let enc = RelPosEnc::new(&mut b, "r", w, d).unwrap();
        let gates = GateSet::new(&mut b, "g").unwrap();
        let x = rand_tensor(&[2, c, h, w], &mut rng);

        gates.set_values(&mut store, [1.0; 4]);
        let gated = run_axial(&store, &x, &proj, Some(&enc), Some(&gates));
        let positional = run_axial(&store, &x, &proj, Some(&enc), None);
        ensure!(gated == positional, "case {case}: unit gates differ from the positional form");

        gates.set_values(&mut store, [0.0, 0.0, 1.0, 0.0]);
        let reduced = run_axial(&store, &x, &proj, Some(&enc), Some(&gates));
        let plain = run_axial(&store, &x, &proj, None, None);
        ensure!(reduced == plain, "case {case}: (0,0,1,0) gates differ from plain axial attention");
    }
    Ok("10 + 10 cases bit-identical".into())
}

fn c3_gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let mut log = Vec::new();
    let summary = cli::cmd_gradcheck(&cfg, &mut log).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let model = summary.model.as_ref().ok_or("micro-MedT was not checked")?;
    let classes = class_errors(model);
    let names: Vec<_> = classes.iter().map(|c| c.class).collect();
    for class in ["qkv", "relpos", "gate", "conv", "norm"] {
        ensure!(names.contains(&class), "micro-MedT has no `{class}` parameters");
    }
    ensure!(
        summary.passes(),
        "max rel. error {:.3e} >= {:.0e}; worst {:?}\n{}",
        summary.max_rel_error(),
        summary.tol,
        summary.worst_param().map(|p| &p.name),
        String::from_utf8_lossy(&log)
    );
    ensure!(secs < 120.0, "took {secs:.1}s (limit 120s)");
    let per_class: Vec<_> = classes
        .iter()
        .map(|c| format!("{} {:.1e}", c.class, c.max_rel_error))
        .collect();
    Ok(format!(
        "max rel. error {:.2e} over {} micro-MedT entries [{}]",
        summary.max_rel_error(),
        model.entries(),
        per_class.join(", ")
    ))
}

fn c4_parameter_delta() -> Outcome {
    let layer = |flavor| {
        let mut store = ParamStore::<f64>::new();
        let l = GatedAxialLayer::new(
            &mut Builder::new(&mut store, 4),
            "l",
            TransformerLayerConfig {
                channels_in: 8,
                channels_out: 16,
                heads: 4,
                stride: 1,
                flavor,
                granularity: GateGranularity::PerLayer,
                height: 8,
                width: 8,
            },
        )
        .unwrap();
        (l, store)
    };
    let (g, gs) = layer(AttnFlavor::Gated);
    let (u, us) = layer(AttnFlavor::Positional);
    let delta = count_extra_gate_params((&g, &gs), (&u, &us));
    ensure!(delta == 8, "gated layer adds {delta} scalars over two axes, expected 8");

    let mut parts = vec![format!("layer: +{delta} over 2 axes")];
    for (variant, layers) in [(Variant::Medt, 2), (Variant::GatedAxial, 5)] {
        let cfg = ModelConfig {
            variant,
            img_size: 32,
            ..ModelConfig::default()
        };
        let gated = Model::<f32>::new(&cfg).unwrap().count_parameters();
        let twin = Model::<f32>::new_ungated(&cfg).unwrap().count_parameters();
        let expected = layers * 2 * 4;
        ensure!(gated - twin == expected, "{variant}: delta {} != {expected}", gated - twin);
        parts.push(format!("{variant}: +{expected}"));
    }
    Ok(parts.join(", "))
}

fn c5_logo_plumbing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 3, 16, 16], &mut rng);
    for grid in [1, 2, 4] {
        let back = merge_patches(&extract_patches(&x, grid).unwrap(), grid).unwrap();
        ensure!(back == x, "roundtrip differs for g={grid}");
    }
    let mut store = ParamStore::new();
    let ids: Vec<_> = (0..4)
        .map(|i| store.insert(format!("patch{i}"), rand_tensor(&[1, 1, 3, 3], &mut rng), ParamKind::Weight).unwrap())
        .collect();
    let pixels = [rng.random_range(0..36usize), rng.random_range(0..36usize)];
    let mut worst = 0f64;
    for &pixel in &pixels {
        let mask = Tensor::from_fn(vec![1, 1, 6, 6], |i| if i == pixel { 1.0 } else { 0.0 }).unwrap();
        let report = grad_check(&mut store, 1e-6, |g, s| {
            let parts: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
            let m = g.merge_patches(&parts, 2)?;
            let w = g.input(mask.clone());
            let p = g.mul(m, w)?;
            Ok(g.sum(p))
        })
        .map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error());
        let (r, c) = (pixel / 6, pixel % 6);
        let owner = (r / 3) * 2 + c / 3;
        for (i, &id) in ids.iter().enumerate() {
            let nonzero: Vec<usize> = (0..9).filter(|&k| store.get(id).grad.data()[k] != 0.0).collect();
            let expected = if i == owner { vec![(r % 3) * 3 + c % 3] } else { vec![] };
            ensure!(nonzero == expected, "pixel {pixel}: patch {i} receives gradient at {nonzero:?}");
        }
    }
    ensure!(worst < 1e-8, "merge gradient rel. error {worst:.2e}");
    Ok(format!("g in {{1,2,4}} bit-exact; pixels {pixels:?} route to one patch, FD error {worst:.1e}"))
}

fn c6_gate_freeze() -> Outcome {
    let model_cfg = ModelConfig {
        variant: Variant::Medt,
        img_size: 32,
        seed: 6,
        ..ModelConfig::default()
    };
    let data = generate(&SynthSpec {
        n_samples: 8,
        img_size: 32,
        seed: 6,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut model = Model::<f32>::new(&model_cfg).unwrap();
    let snapshot = |m: &Model<f32>| -> Vec<[f32; 4]> { m.net.gate_sets().iter().map(|s| s.values(&m.params)).collect() };
    let init = snapshot(&model);
    let cfg = TrainConfig {
        epochs: 15,
        gate_freeze_epochs: 10,
        eval_every: 0,
        seed: 6,
        ..TrainConfig::default()
    };
    let mut after = Vec::new();
    train(&mut model, &data, &[], &cfg, |p| {
        after.push(snapshot(p.model));
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    for (epoch, gates) in after.iter().enumerate().take(10) {
        ensure!(*gates == init, "gates moved during frozen epoch {epoch}");
    }
    let changed = after[14]
        .iter()
        .flatten()
        .zip(init.iter().flatten())
        .filter(|(a, b)| a != b)
        .count();
    ensure!(changed > 0, "no gate changed by epoch 15");
    Ok(format!("frozen through epoch 9; {changed}/{} gates moved by epoch 15", init.len() * 4))
}

struct OverfitRun {
    history: Vec<EpochRecord>,
    eval_f1: f64,
    secs: f64,
}

fn overfit_run() -> OverfitRun {
    let start = Instant::now();
    let cfg = ModelConfig {
        variant: Variant::Medt,
        img_size: 64,
        seed: 0,
        ..ModelConfig::default()
    };
    let data = generate(&SynthSpec {
        n_samples: 1,
        img_size: 64,
        seed: 0,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut model = Model::<f32>::new(&cfg).unwrap();
    let tc = TrainConfig {
        epochs: 400,
        batch_size: 1,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let h = train(&mut model, &data, &[], &tc, |_| Ok(())).unwrap();
    let (report, _) = evaluate(&model, &data, 1).unwrap();
    OverfitRun {
        history: h.epochs,
        eval_f1: report.mean.f1,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn c7_overfit(run: &OverfitRun) -> Outcome {
    let last = run.history.last().ok_or("no epochs ran")?;
    ensure!(run.eval_f1 >= 0.95, "final evaluation F1 {:.4} < 0.95", run.eval_f1);
    ensure!(run.secs < 600.0, "took {:.0}s (target 600s)", run.secs);
    Ok(format!(
        "400 epochs, final eval F1 {:.4}, last train loss {:.4}",
        run.eval_f1, last.metrics.loss
    ))
}

/// Mean loss of consecutive 20-epoch windows must not increase.
fn loss_trend(run: &OverfitRun) -> Outcome {
    let means: Vec<f64> = run
        .history
        .chunks(20)
        .map(|w| w.iter().map(|r| r.metrics.loss).sum::<f64>() / w.len() as f64)
        .collect();
    for (i, pair) in means.windows(2).enumerate() {
        ensure!(
            pair[1] <= pair[0],
            "window {} mean loss {:.5} exceeds window {} mean {:.5}",
            i + 1,
            pair[1],
            i,
            pair[0]
        );
    }
    Ok(format!("{} windows, {:.4} -> {:.4}", means.len(), means[0], means[means.len() - 1]))
}

fn c8_ablation() -> Outcome {
    let start = Instant::now();
    let data = generate(&SynthSpec {
        n_samples: 32,
        img_size: 32,
        seed: 8,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for variant in Variant::ALL {
        let cfg = ModelConfig {
            variant,
            img_size: 32,
            seed: 8,
            ..ModelConfig::default()
        };
        let mut model = Model::<f32>::new(&cfg).unwrap();
        let tc = TrainConfig {
            epochs: 30,
            eval_every: 0,
            seed: 8,
            ..TrainConfig::default()
        };
        match train(&mut model, &data, &[], &tc, |_| Ok(())) {
            Ok(h) => {
                let (first, last) = (h.epochs[0].metrics, h.epochs[29].metrics);
                if !(last.loss < first.loss) {
                    failures.push(format!("{variant}: loss {:.4} -> {:.4}", first.loss, last.loss));
                }
                rows.push(format!("{variant} {:.3}->{:.3} f1 {:.2}", first.loss, last.loss, last.f1));
            }
            Err(e) => failures.push(format!("{variant}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    ensure!(secs < 1800.0, "took {secs:.0}s (target 1800s)");
    Ok(rows.join(", "))
}

fn c9_complexity() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.bench_sizes = vec![1, 2, 4, 8, 16, 32, 64];
    let rows = cli::cmd_bench(&cfg, &mut Vec::new()).map_err(|e| e.to_string())?;
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        ensure!(b.full_macs == 16 * a.full_macs, "full x{} at s={}", b.full_macs / a.full_macs, b.side);
        ensure!(b.axial_macs == 8 * a.axial_macs, "axial x{} at s={}", b.axial_macs / a.axial_macs, b.side);
    }
    let r64 = rows.last().unwrap();
    let r32 = &rows[rows.len() - 2];
    Ok(format!(
        "counts exact for s=1..64; s=64 full {} vs axial {} MACs; wall-time ratio s64/s32 full {:.1}x",
        r64.full_macs,
        r64.axial_macs,
        r64.full_secs / r32.full_secs.max(1e-9)
    ))
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = |out: &Path| -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("img_size", "16"),
            ("base_channels", "4"),
            ("heads", "2"),
            ("patch_grid", "2"),
            ("n_samples", "6"),
            ("epochs", "3"),
            ("eval_every", "1"),
            ("gate_freeze_epochs", "1"),
            ("seed", "10"),
        ] {
            c.set(k, v).unwrap();
        }
        c.corpus = dir.path().join("corpus");
        c.out = out.to_path_buf();
        c
    };
    let gen = RunConfig { out: dir.path().join("corpus"), ..base(dir.path()) };
    cli::cmd_gen(&gen, &mut Vec::new()).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let cfg = base(&dir.path().join(run));
        cli::cmd_train(&cfg, &mut Vec::new()).map_err(|e| e.to_string())?;
        let read = |name: &str| std::fs::read(cfg.out.join(name)).unwrap();
        files.push((read(cli::METRICS_FILE), read(cli::CHECKPOINT_FILE)));
    }
    ensure!(files[0].0 == files[1].0, "metrics files differ");
    ensure!(files[0].1 == files[1].1, "checkpoints differ");
    Ok(format!(
        "metrics ({} bytes) and checkpoint ({} bytes) byte-identical",
        files[0].0.len(),
        files[0].1.len()
    ))
}

fn report(label: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = Duration::from_secs_f64(start.elapsed().as_secs_f64()).as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("{label} [{tag}] {name}: {detail} ({secs:.1}s)");
    ok
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut ok = true;
    let mut ran = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if want(n) {
            ran += 1;
            ok &= report(&format!("criterion {n:>2}"), name, f);
        }
    };
    run(1, "oracle equivalence", &mut c1_oracle_equivalence);
    run(2, "gate reduction", &mut c2_gate_reduction);
    run(3, "gradient suite", &mut c3_gradient_suite);
    run(4, "parameter delta", &mut c4_parameter_delta);
    run(5, "LoGo plumbing", &mut c5_logo_plumbing);
    run(6, "gate freeze", &mut c6_gate_freeze);
    let mut overfit: Option<OverfitRun> = None;
    run(7, "overfit run", &mut || {
        let r = catch_unwind(overfit_run).map_err(|_| "training panicked".to_string())?;
        let out = c7_overfit(&r);
        overfit = Some(r);
        out
    });
    run(8, "ablation smoke", &mut c8_ablation);
    run(9, "complexity", &mut c9_complexity);
    run(10, "determinism", &mut c10_determinism);
    // Training invariant, reported alongside the criteria but not one of them.
    let trend = overfit
        .as_ref()
        .map(|r| report("property    ", "overfit loss trend (20-epoch windows)", || loss_trend(r)));
    println!(
        "acceptance: {ran} criteria run, {}{}",
        if ok { "all passed" } else { "FAILURES" },
        if trend == Some(false) { "; loss-trend property FAILED" } else { "" }
    );
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
