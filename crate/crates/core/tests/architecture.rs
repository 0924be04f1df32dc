use hrsegnet::complexity::{model_complexity, plan_complexity};
use hrsegnet::model::{build_model, build_plan, Checkpoint, Guidance, HeadKind, HrResolution, Model, ModelConfig, Role};
use hrsegnet::nn::FuseMode;
use hrsegnet::Tensor;
use proptest::prelude::*;

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..4,
        prop::sample::select(vec![HrResolution::Half, HrResolution::Quarter, HrResolution::Eighth]),
        1usize..4,
        1usize..3,
        prop::sample::select(vec![Guidance::None, Guidance::Single, Guidance::Multi]),
        prop::sample::select(vec![FuseMode::Sum, FuseMode::Mul]),
        prop::sample::select(vec![HeadKind::Single, HeadKind::Double]),
        prop::collection::vec(any::<bool>(), 3),
    )
        .prop_map(|(base, hr, blocks, lpb, guidance, fusion, head, aux)| ModelConfig {
            base,
            hr_resolution: hr,
            num_blocks: blocks,
            layers_per_block: lpb,
            guidance,
            fusion,
            head,
            aux_heads: (1..=blocks).filter(|&j| aux[j - 1]).collect(),
            num_classes: 2,
        })
}

fn input(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let v = (c as u64 * 7919 + y as u64 * 104729 + x as u64 * 1299709 + seed).wrapping_mul(2654435761) % 1000;
        v as f32 / 500.0 - 1.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hr_path_keeps_its_resolution(cfg in arb_config(), dh in 0usize..40, dw in 0usize..40) {
        let (h, w) = (cfg.min_input() + dh, cfg.min_input() + dw);
        let plan = build_plan(&cfg, h, w).unwrap();
        let ext = plan.hr_extent().unwrap();
        for r in plan.records.iter().filter(|r| matches!(r.role, Role::Hr | Role::Fuse)) {
            prop_assert_eq!((r.out_h, r.out_w), ext, "{}", r.name);
        }
        let last = plan.records.last().unwrap();
        prop_assert_eq!((last.out_h, last.out_w), (h, w));
    }

    #[test]
    fn calculator_params_match_registry(cfg in arb_config()) {
        let n = cfg.min_input();
        let c = model_complexity(&cfg, n, n).unwrap();
        let mut m = build_model::<f32>(&cfg, 0).unwrap();
        prop_assert_eq!(c.params, m.num_params() as u64);
        prop_assert_eq!(c.flops, c.layers.iter().map(|l| l.flops).sum::<u64>());
    }

    #[test]
    fn aux_heads_do_not_touch_inference(cfg in arb_config(), seed in 0u64..1000) {
        let n = cfg.min_input();
        let with = ModelConfig { aux_heads: (1..=cfg.num_blocks).collect(), ..cfg.clone() };
        let without = ModelConfig { aux_heads: vec![], ..cfg };
        let a = build_model::<f32>(&with, seed).unwrap();
        let b = build_model::<f32>(&without, seed).unwrap();
        let x = input(n, n + 4, seed);
        prop_assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
        prop_assert_eq!(
            plan_complexity(&a.plan(n, n).unwrap()).flops,
            plan_complexity(&b.plan(n, n).unwrap()).flops
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical(cfg in arb_config(), seed in 0u64..1000) {
        let mut m = build_model::<f32>(&cfg, seed).unwrap();
        let n = cfg.min_input();
        let x = input(n, n, seed);
        // A training pass moves the running statistics away from their defaults.
        m.forward(&x, hrsegnet::nn::Mode::Train).unwrap();
        let bytes = Checkpoint::from_model(&mut m, "").encode();
        let back: Model<f32> = Checkpoint::decode(&bytes).unwrap().to_model(None).unwrap();
        prop_assert_eq!(m.infer(&x).unwrap(), back.infer(&x).unwrap());
    }
}

#[test]
fn table_five_widths() {
    for (base, flops, params) in [(16, 0.66, 0.61), (32, 2.50, 2.49), (48, 5.60, 5.43)] {
        let c = model_complexity(&ModelConfig::with_base(base), 400, 400).unwrap();
        assert!((c.gflops() / flops - 1.0).abs() <= 0.10, "B{base} {}", c.gflops());
        assert!((c.params_m() / params - 1.0).abs() <= 0.20, "B{base} {}", c.params_m());
    }
}
