//! Analytic parameter and FLOP counts over a [`LayerPlan`].
//!
//! One FLOP is one multiply-accumulate. Only convolutions cost FLOPs;
//! transposed convolutions are counted at their output extents. Auxiliary
//! heads contribute parameters but no inference FLOPs.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{build_plan, LayerKind, LayerPlan, ModelConfig, Role};

/// `c_in * c_out * k * k * out_h * out_w`, bias ignored.
pub fn conv_flops(c_in: usize, c_out: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    [c_in, c_out, k, k, out_h, out_w].iter().map(|&v| v as u64).product()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub role: Role,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub params: u64,
    pub flops: u64,
    /// Layers that carry parameters or FLOPs, in execution order.
    pub layers: Vec<LayerCost>,
}

impl Complexity {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    /// Machine-readable totals line.
    pub fn totals_line(&self) -> String {
        format!("params={:.6} flops={:.6}", self.params_m(), self.gflops())
    }

    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<28} {:<6} {:<5} {:>6} {:>6} {:>2} {:>2} {:>11} {:>10} {:>14}\n",
            "layer", "kind", "role", "c_in", "c_out", "k", "s", "out", "params", "flops"
        );
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Conv => "conv",
                LayerKind::TConv => "tconv",
                LayerKind::Bn => "bn",
                LayerKind::Act => "act",
                LayerKind::Resize => "resize",
                LayerKind::Fuse => "fuse",
            };
            let _ = writeln!(
                s,
                "{:<28} {:<6} {:<5} {:>6} {:>6} {:>2} {:>2} {:>11} {:>10} {:>14}",
                l.name,
                kind,
                l.role.tag(),
                l.c_in,
                l.c_out,
                l.k,
                l.stride,
                format!("{}x{}", l.out_h, l.out_w),
                l.params,
                l.flops
            );
        }
        s
    }
}

/// Sums costs over a plan.
pub fn plan_complexity(plan: &LayerPlan) -> Complexity {
    let mut layers = Vec::new();
    for r in &plan.records {
        let flops = match r.kind {
            LayerKind::Conv | LayerKind::TConv if r.role != Role::Aux => conv_flops(r.c_in, r.c_out, r.k, r.out_h, r.out_w),
            _ => 0,
        };
        let params = r.params();
        if params == 0 && flops == 0 {
            continue;
        }
        layers.push(LayerCost {
            name: r.name.clone(),
            kind: r.kind,
            role: r.role,
            c_in: r.c_in,
            c_out: r.c_out,
            k: r.k,
            stride: r.stride,
            out_h: r.out_h,
            out_w: r.out_w,
            params,
            flops,
        });
    }
    Complexity {
        params: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    }
}

pub fn model_complexity(config: &ModelConfig, input_h: usize, input_w: usize) -> Result<Complexity> {
    Ok(plan_complexity(&build_plan(config, input_h, input_w)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, HrResolution};
    use crate::nn::conv::macs;
    use crate::tensor::Tensor;

    #[test]
    fn conv_flops_examples() {
        assert_eq!(conv_flops(1, 1, 1, 1, 1), 1);
        assert_eq!(conv_flops(3, 16, 3, 200, 200), 17_280_000);
        assert_eq!(conv_flops(32, 32, 3, 100, 100), 92_160_000);
    }

    #[test]
    fn aux_heads_cost_params_not_flops() {
        let with = ModelConfig::with_base(16);
        let without = ModelConfig {
            aux_heads: vec![],
            ..with.clone()
        };
        let a = model_complexity(&with, 400, 400).unwrap();
        let b = model_complexity(&without, 400, 400).unwrap();
        assert_eq!(a.flops, b.flops);
        assert_eq!(a.params - b.params, 2 * (16 * 2 * 9 + 2));
    }

    #[test]
    fn params_independent_of_input() {
        let cfg = ModelConfig::with_base(8);
        let a = model_complexity(&cfg, 400, 400).unwrap();
        let b = model_complexity(&cfg, 128, 96).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn matches_executor_mac_counter() {
        for cfg in [
            ModelConfig {
                aux_heads: vec![],
                ..ModelConfig::with_base(2)
            },
            ModelConfig::hr_only(2, HrResolution::Half),
        ] {
            let model = build_model::<f32>(&cfg, 0).unwrap();
            macs::reset();
            model.infer(&Tensor::zeros([1, 3, 16, 16])).unwrap();
            assert_eq!(macs::read(), model_complexity(&cfg, 16, 16).unwrap().flops);
        }
    }

    #[test]
    fn table_lists_every_costed_layer() {
        let c = model_complexity(&ModelConfig::with_base(16), 400, 400).unwrap();
        let table = c.render_table();
        assert_eq!(table.lines().count(), c.layers.len() + 1);
        assert!(table.contains("head.up"));
        assert!(c.totals_line().starts_with("params=0."));
    }
}

