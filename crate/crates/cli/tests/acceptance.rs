//! Acceptance suite: one PASS/FAIL line per criterion at its stated tolerance.
//!
//! Runs as a plain binary (`harness = false`). A criterion listed in
//! `KNOWN_RED` still prints FAIL but does not fail the process; everything
//! else that fails does.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hrsegnet::complexity::{model_complexity, Complexity};
use hrsegnet::data::{gen_synthetic, load_dataset};
use hrsegnet::inference::evaluate;
use hrsegnet::metrics::{ConfusionMatrix, Metrics};
use hrsegnet::model::{
    build_model, build_plan, load_checkpoint, save_checkpoint, Guidance, HeadKind, HrResolution, Model, ModelConfig, Role,
};
use hrsegnet::nn::conv::macs;
use hrsegnet::nn::gradcheck::{ComposedBlock, CrossEntropyLayer, FuseLayer, ResizeLayer};
use hrsegnet::nn::{
    grad_check, Act, Activation, BatchNorm2d, Conv2d, ConvParams, ConvTranspose2d, Differentiable, FuseMode,
    GradCheckReport,
};
use hrsegnet::training::{train_loop, RunConfig, Trainer};
use hrsegnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot hold as stated, with the reason printed next to FAIL.
const KNOWN_RED: &[(u32, &str)] = &[(
    3,
    "stride-2 guidance maps round up (ceil(n/2)), so at 200x200 they are 25/13/7 \
     against 50/25/13 at 400x400; the ratio is exactly 4 only when the input is a \
     multiple of 32 or the model has no guidance path",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value / target - 1.0).abs() <= tol
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> RunConfig {
    let path = configs().join(name);
    RunConfig::parse(&std::fs::read_to_string(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn analyze(name: &str, size: usize) -> Complexity {
    model_complexity(&load(name).model, size, size).unwrap()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, flops, params) in [("b16.txt", 0.66, 0.61), ("b32.txt", 2.50, 2.49), ("b48.txt", 5.60, 5.43)] {
        let c = analyze(name, 400);
        let ok = within(c.gflops(), flops, 0.10) && within(c.params_m(), params, 0.20);
        pass &= ok;
        parts.push(format!(
            "{} {:.3}G/{:.3}M (ref {flops}/{params})",
            name.trim_end_matches(".txt"),
            c.gflops(),
            c.params_m()
        ));
    }
    let dt = t.elapsed();
    pass &= dt < Duration::from_secs(1);
    outcome(pass, format!("{}; {:.0} ms", parts.join(", "), dt.as_secs_f64() * 1e3))
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let quarter = analyze("hr_only_quarter.txt", 400);
    let half = analyze("hr_only_half.txt", 400);
    let single = analyze("single_guidance.txt", 400);
    let ratio = half.gflops() / quarter.gflops();
    let checks = [
        within(quarter.gflops(), 1.28, 0.15),
        within(quarter.params_m(), 0.099, 0.15),
        (3.7..=4.1).contains(&ratio),
        within(single.gflops(), 2.31, 0.15),
    ];
    let dt = t.elapsed();
    outcome(
        checks.iter().all(|&c| c) && dt < Duration::from_secs(1),
        format!(
            "HR-only 1/4 {:.3}G/{:.4}M, 1/2:1/4 ratio {ratio:.3}, single guidance {:.3}G; {:.0} ms",
            quarter.gflops(),
            quarter.params_m(),
            single.gflops(),
            dt.as_secs_f64() * 1e3
        ),
    )
}

fn criterion_3() -> Outcome {
    let (b16, b32) = (analyze("b16.txt", 400), analyze("b32.txt", 400));
    let flops_ratio = b32.gflops() / b16.gflops();
    let params_ratio = b32.params_m() / b16.params_m();
    let b32_200 = analyze("b32.txt", 200);
    let exact = b32.flops == 4 * b32_200.flops;
    // Cases where the exact factor does hold, reported for context.
    let hr = analyze("hr_only_quarter.txt", 400).flops == 4 * analyze("hr_only_quarter.txt", 200).flops;
    let b32_512 = analyze("b32.txt", 512).flops == 4 * analyze("b32.txt", 256).flops;
    outcome(
        (3.5..=4.0).contains(&flops_ratio) && (3.5..=4.2).contains(&params_ratio) && exact,
        format!(
            "flops B32/B16 {flops_ratio:.3}, params {params_ratio:.3}, B32 400/200 flops {} / {} = {:.4} (exact: {exact}); \
             exact x4 holds for HR-only 200->400: {hr}, B32 256->512: {b32_512}",
            b32.flops,
            b32_200.flops,
            b32.flops as f64 / b32_200.flops as f64
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (label, cfg) in [
        ("full", ModelConfig::with_base(2)),
        (
            "multi/mul/single-head",
            ModelConfig {
                guidance: Guidance::Multi,
                fusion: FuseMode::Mul,
                head: HeadKind::Single,
                ..ModelConfig::with_base(2)
            },
        ),
        ("HR-only 1/2", ModelConfig::hr_only(2, HrResolution::Half)),
    ] {
        let model = build_model::<f32>(&cfg, 0).unwrap();
        macs::reset();
        model.infer(&Tensor::zeros([1, 3, 16, 16])).unwrap();
        let counted = macs::read();
        let analytic = model_complexity(&cfg, 16, 16).unwrap().flops;
        pass &= counted == analytic;
        parts.push(format!("{label} {counted}={analytic}"));
    }
    outcome(pass, parts.join(", "))
}

fn random(dims: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let tol = 1e-4;
    let mut reports: Vec<(&str, GradCheckReport)> = Vec::new();
    let mut check = |name: &'static str, layer: &mut dyn Differentiable, dims: [usize; 4], seed: u64| {
        reports.push((name, grad_check(layer, dims, tol, seed).unwrap()));
    };
    let conv = |w: [usize; 4], bias: bool, stride: usize, seed: u64| {
        let b = bias.then(|| (0..w[0]).map(|i| 0.1 * i as f64 - 0.2).collect());
        ConvParams::new(random(w, seed), b, stride, w[2] / 2).unwrap()
    };
    check("conv3x3", &mut Conv2d::new(conv([3, 2, 3, 3], true, 1, 1)), [2, 2, 6, 5], 11);
    check("conv3x3/s2", &mut Conv2d::new(conv([4, 3, 3, 3], false, 2, 2)), [2, 3, 7, 6], 12);
    check("conv1x1", &mut Conv2d::new(conv([3, 4, 1, 1], false, 1, 3)), [2, 4, 4, 4], 13);
    check("tconv", &mut ConvTranspose2d::new(conv([3, 2, 3, 3], false, 2, 4), 1), [2, 3, 4, 3], 14);
    let mut bn = BatchNorm2d::new(3);
    bn.state.gamma = vec![1.3, -0.6, 0.8];
    bn.state.beta = vec![0.2, -0.1, 0.05];
    check("batchnorm", &mut bn, [2, 3, 4, 4], 15);
    check("relu", &mut Act::new(Activation::Relu), [2, 3, 4, 4], 16);
    check("sigmoid", &mut Act::new(Activation::Sigmoid), [2, 3, 4, 4], 17);
    check("resize up", &mut ResizeLayer::new(9, 7), [2, 2, 4, 3], 18);
    check("resize down", &mut ResizeLayer::new(3, 2), [2, 2, 7, 5], 19);
    check("fuse sum", &mut FuseLayer::new(FuseMode::Sum, random([2, 2, 4, 4], 20)), [2, 2, 4, 4], 21);
    check("fuse mul", &mut FuseLayer::new(FuseMode::Mul, random([2, 2, 4, 4], 22)), [2, 2, 4, 4], 23);
    let labels: Vec<u8> = (0..2 * 5 * 4).map(|i| (i % 3 == 0) as u8).collect();
    check("cross-entropy", &mut CrossEntropyLayer::new(labels), [2, 2, 5, 4], 24);
    let mut composed = ComposedBlock {
        conv: Conv2d::new(conv([3, 2, 3, 3], false, 1, 25)),
        bn: BatchNorm2d::new(3),
        act: Act::new(Activation::Relu),
        fuse: FuseLayer::new(FuseMode::Sum, random([2, 3, 5, 5], 26)),
    };
    check("conv-bn-relu-fuse", &mut composed, [2, 2, 5, 5], 27);
    let cfg = ModelConfig {
        num_blocks: 1,
        aux_heads: vec![],
        ..ModelConfig::with_base(2)
    };
    let mut model = build_model::<f64>(&cfg, 11).unwrap();
    check("model B2/1-block", &mut model, [2, 3, 16, 16], 28);

    let dt = t.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap();
    let model_report = &reports.last().unwrap().1;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.1.passed()).map(|r| r.0).collect();
    outcome(
        failed.is_empty() && model_report.checked > 1000 && dt < Duration::from_secs(120),
        format!(
            "{} checks, worst {:.2e} ({}), model {} entries/{} kink skips{}; {:.1} s",
            reports.len(),
            worst.1.max_rel_error,
            worst.0,
            model_report.checked,
            model_report.skipped_kinks,
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) },
            dt.as_secs_f64()
        ),
    )
}

fn desk_data(dir: &Path) -> Vec<hrsegnet::data::Sample> {
    gen_synthetic(20, 128, 7, dir).unwrap();
    load_dataset(dir).unwrap().load_all().unwrap()
}

fn criterion_6(dir: &Path) -> Outcome {
    let t = Instant::now();
    let run = load("desk.txt");
    let (m, tr) = (&run.model, &run.train);
    let recipe = m.base == 8
        && m.aux_heads == [1, 2]
        && tr.max_iters == 2000
        && tr.batch_size == 4
        && tr.base_lr == 0.01
        && tr.lr_power == 0.9
        && tr.warmup_iters == 100
        && tr.ohem.enabled
        && tr.alpha == 0.5;
    let samples = desk_data(dir);
    let mut model: Model<f32> = build_model(&run.model, run.train.seed).unwrap();
    let mut trainer = Trainer::new(&mut model, run.train.clone(), run.augment.clone()).unwrap();
    let history = train_loop(&mut model, &samples, &mut trainer, &mut ()).unwrap();
    let m = evaluate(&model, &samples, &run.augment.normalization).unwrap().compute().unwrap();
    let dt = t.elapsed();
    let finite = history.iter().all(|r| r.total.is_finite());
    outcome(
        recipe && finite && m.miou >= 0.90 && dt <= Duration::from_secs(30 * 60),
        format!(
            "training-set mIoU {:.4} (crack IoU {:.4}, f1 {:.4}) after {} iterations, final loss {:.4}; {:.0} s",
            m.miou,
            m.iou_crack,
            m.f1,
            history.len(),
            history.last().map_or(f64::NAN, |r| r.total),
            dt.as_secs_f64()
        ),
    )
}

fn criterion_7(dir: &Path) -> Outcome {
    let samples = load_dataset(dir).unwrap().load_all().unwrap();
    let mut run = load("b16.txt");
    run.model.base = 8;
    run.train.max_iters = 10;
    run.train.warmup_iters = 2;
    run.train.batch_size = 4;
    run.augment.crop = (128, 128);
    let go = || {
        let mut model: Model<f32> = build_model(&run.model, 5).unwrap();
        let mut trainer = Trainer::new(&mut model, run.train.clone(), run.augment.clone()).unwrap();
        train_loop(&mut model, &samples, &mut trainer, &mut ()).unwrap()
    };
    let (a, b) = (go(), go());
    let max_diff = a
        .iter()
        .zip(&b)
        .flat_map(|(x, y)| {
            std::iter::once((x.total - y.total).abs()).chain(x.aux.iter().zip(&y.aux).map(|(p, q)| (p - q).abs()))
        })
        .fold(0.0f64, f64::max);
    outcome(
        a.len() == 10 && b.len() == 10 && max_diff <= 1e-12,
        format!("10 iterations with full augmentation, max loss difference {max_diff:e}"),
    )
}

fn criterion_8(dir: &Path) -> Outcome {
    let mut notes = Vec::new();
    // Aux heads present vs absent.
    let mut aux_ok = true;
    for guidance in [Guidance::Single, Guidance::Multi] {
        let with = ModelConfig {
            guidance,
            ..ModelConfig::with_base(4)
        };
        let without = ModelConfig {
            aux_heads: vec![],
            ..with.clone()
        };
        let x = Tensor::from_fn([2, 3, 48, 40], |[n, c, y, x]| ((n * 13 + c * 7 + y * 3 + x) % 17) as f32 / 8.0 - 1.0);
        let a = build_model::<f32>(&with, 9).unwrap().infer(&x).unwrap();
        let b = build_model::<f32>(&without, 9).unwrap().infer(&x).unwrap();
        aux_ok &= a == b;
    }
    notes.push(format!("aux-invariant logits {}", if aux_ok { "bit-identical" } else { "DIFFER" }));

    // HR path at constant resolution for every configuration shape.
    let mut hr_ok = true;
    let mut configs = 0;
    for res in [HrResolution::Half, HrResolution::Quarter, HrResolution::Eighth] {
        for guidance in [Guidance::None, Guidance::Single, Guidance::Multi] {
            for fusion in [FuseMode::Sum, FuseMode::Mul] {
                for head in [HeadKind::Single, HeadKind::Double] {
                    for blocks in 1..=3 {
                        let cfg = ModelConfig {
                            hr_resolution: res,
                            guidance,
                            fusion,
                            head,
                            num_blocks: blocks,
                            aux_heads: (1..=blocks).collect(),
                            ..ModelConfig::with_base(2)
                        };
                        for size in [cfg.min_input(), 65, 100] {
                            let plan = build_plan(&cfg, size, size + 3).unwrap();
                            let ext = plan.hr_extent().unwrap();
                            hr_ok &= plan
                                .records
                                .iter()
                                .filter(|r| matches!(r.role, Role::Hr | Role::Fuse))
                                .all(|r| (r.out_h, r.out_w) == ext);
                        }
                        // The executor enforces the same property at run time.
                        let mut m = build_model::<f32>(&cfg, 1).unwrap();
                        let x = Tensor::full([2, 3, 40, 44], 0.25f32);
                        hr_ok &= m.forward(&x, hrsegnet::nn::Mode::Train).is_ok();
                        configs += 1;
                    }
                }
            }
        }
    }
    notes.push(format!("HR extent constant across {configs} configs: {hr_ok}"));

    // Checkpoint round trip through a file.
    let mut model = build_model::<f32>(&ModelConfig::with_base(4), 3).unwrap();
    let x = Tensor::from_fn([2, 3, 64, 64], |[n, c, y, x]| ((n + c * 5 + y * 7 + x * 3) % 13) as f32 / 6.0 - 1.0);
    model.forward(&x, hrsegnet::nn::Mode::Train).unwrap();
    let path = dir.join("roundtrip.hrsg");
    save_checkpoint(&mut model, &path).unwrap();
    let back: Model<f32> = load_checkpoint(&path).unwrap();
    let ck_ok = model.infer(&x).unwrap() == back.infer(&x).unwrap();
    notes.push(format!("checkpoint round trip {}", if ck_ok { "bit-identical" } else { "DIFFERS" }));
    outcome(aux_ok && hr_ok && ck_ok, notes.join(", "))
}

/// Ratios recounted straight from pixel pairs, independent of the matrix.
fn brute_force(pred: &[u8], label: &[u8]) -> Metrics {
    let count = |f: &dyn Fn(u8, u8) -> bool| pred.iter().zip(label).filter(|(&p, &l)| f(p, l)).count() as u64;
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let iou = |k: u8| {
        let union = count(&|p, l| p == k || l == k);
        if union == 0 {
            1.0
        } else {
            count(&|p, l| p == k && l == k) as f64 / union as f64
        }
    };
    let both = count(&|p, l| p == 1 && l == 1);
    let precision = div(both, count(&|p, _| p == 1));
    let recall = div(both, count(&|_, l| l == 1));
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Metrics {
        iou_crack: iou(1),
        iou_background: iou(0),
        miou: (iou(1) + iou(0)) / 2.0,
        precision,
        recall,
        f1,
    }
}

fn criterion_9() -> Outcome {
    let hand = ConfusionMatrix {
        tp: 50,
        fp: 10,
        fn_: 40,
        tn: 900,
    }
    .compute()
    .unwrap();
    let hand_ok = (hand.miou - 0.7237).abs() <= 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut exact = 0;
    for i in 0..100 {
        let density = (i % 10) as f64 / 9.0;
        let pred: Vec<u8> = (0..256).map(|_| u8::from(rng.random::<f64>() < density)).collect();
        let label: Vec<u8> = (0..256).map(|_| u8::from(rng.random::<f64>() < 1.0 - density)).collect();
        let mut cm = ConfusionMatrix::default();
        cm.update(&pred, &label).unwrap();
        exact += usize::from(cm.compute().unwrap() == brute_force(&pred, &label));
    }
    outcome(
        hand_ok && exact == 100,
        format!("hand example mIoU {:.6}, recount oracle exact on {exact}/100 maps", hand.miou),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("desk");
    let mut criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "complexity of B16/B32/B48 at 400x400", Box::new(criterion_1)),
        (2, "ablation complexity (HR-only, single guidance)", Box::new(criterion_2)),
        (3, "scaling properties", Box::new(criterion_3)),
        (4, "calculator equals executor MAC counter", Box::new(criterion_4)),
        (5, "gradient suite", Box::new(criterion_5)),
    ];
    let d6 = data.clone();
    criteria.push((6, "desk-scale training", Box::new(move || criterion_6(&d6))));
    let d7 = data.clone();
    criteria.push((7, "determinism", Box::new(move || criterion_7(&d7))));
    let d8 = dir.path().to_path_buf();
    criteria.push((8, "architectural invariants", Box::new(move || criterion_8(&d8))));
    criteria.push((9, "metrics", Box::new(criterion_9)));

    let mut unexpected = Vec::new();
    let mut red = 0;
    for (id, name, f) in &criteria {
        let o = f();
        println!("{} [{id}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            red += 1;
            match KNOWN_RED.iter().find(|k| k.0 == *id) {
                Some((_, why)) => println!("     known red: {why}"),
                None => unexpected.push(*id),
            }
        }
    }
    println!("acceptance: {} of {} criteria pass, {red} fail", criteria.len() - red, criteria.len());
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
