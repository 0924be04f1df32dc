//! Flattened per-layer description of a network instance at a given input
//! size. Shared by the executor (naming, shape checks) and the complexity
//! calculator.

use super::config::{Guidance, HeadKind, ModelConfig};
use crate::error::{shape_err, Result};
use crate::nn::conv::{conv_out_len, conv_transpose_out_len};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    TConv,
    Bn,
    Act,
    Resize,
    Fuse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Stem,
    Hr,
    Sg,
    Fuse,
    Head,
    Aux,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Stem => "stem",
            Role::Hr => "hr",
            Role::Sg => "sg",
            Role::Fuse => "fuse",
            Role::Head => "head",
            Role::Aux => "aux",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub role: Role,
    /// 1-based block index for records inside an HrSeg block.
    pub block: Option<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Producing records; empty means the network input.
    pub inputs: Vec<usize>,
}

impl LayerRecord {
    /// Learnable parameter count (running statistics excluded).
    pub fn params(&self) -> u64 {
        match self.kind {
            LayerKind::Conv | LayerKind::TConv => {
                (self.c_in * self.c_out * self.k * self.k) as u64 + if self.bias { self.c_out as u64 } else { 0 }
            }
            LayerKind::Bn => 2 * self.c_out as u64,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub input_h: usize,
    pub input_w: usize,
    pub records: Vec<LayerRecord>,
}

impl LayerPlan {
    /// Spatial extents of the high-resolution path.
    pub fn hr_extent(&self) -> Option<(usize, usize)> {
        self.records
            .iter()
            .find(|r| r.role == Role::Hr)
            .map(|r| (r.out_h, r.out_w))
    }

    pub fn find(&self, name: &str) -> Option<&LayerRecord> {
        self.records.iter().find(|r| r.name == name)
    }
}

#[derive(Clone, Copy, Debug)]
struct Feat {
    idx: Option<usize>,
    c: usize,
    h: usize,
    w: usize,
}

struct Builder {
    records: Vec<LayerRecord>,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        name: String,
        kind: LayerKind,
        role: Role,
        block: Option<usize>,
        inputs: &[Feat],
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        out_h: usize,
        out_w: usize,
    ) -> Feat {
        let src = inputs[0];
        self.records.push(LayerRecord {
            name,
            kind,
            role,
            block,
            c_in: src.c,
            c_out,
            k,
            stride,
            bias,
            in_h: src.h,
            in_w: src.w,
            out_h,
            out_w,
            inputs: inputs.iter().filter_map(|f| f.idx).collect(),
        });
        Feat {
            idx: Some(self.records.len() - 1),
            c: c_out,
            h: out_h,
            w: out_w,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        role: Role,
        block: Option<usize>,
        src: Feat,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Feat> {
        let pad = k / 2;
        let (oh, ow) = conv_out_len(src.h, k, stride, pad)
            .zip(conv_out_len(src.w, k, stride, pad))
            .ok_or_else(|| shape_err!("{name}: empty output from {}x{} input", src.h, src.w))?;
        Ok(self.push(name, LayerKind::Conv, role, block, &[src], c_out, k, stride, bias, oh, ow))
    }

    fn bn(&mut self, name: String, role: Role, block: Option<usize>, src: Feat) -> Feat {
        self.push(name, LayerKind::Bn, role, block, &[src], src.c, 1, 1, false, src.h, src.w)
    }

    fn act(&mut self, name: String, role: Role, block: Option<usize>, src: Feat) -> Feat {
        self.push(name, LayerKind::Act, role, block, &[src], src.c, 1, 1, false, src.h, src.w)
    }

    fn resize(&mut self, name: String, role: Role, block: Option<usize>, src: Feat, h: usize, w: usize) -> Feat {
        self.push(name, LayerKind::Resize, role, block, &[src], src.c, 1, 1, false, h, w)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_act(
        &mut self,
        prefix: &str,
        role: Role,
        block: Option<usize>,
        src: Feat,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<Feat> {
        let f = self.conv(format!("{prefix}.conv"), role, block, src, c_out, k, stride, false)?;
        let f = self.bn(format!("{prefix}.bn"), role, block, f);
        Ok(self.act(format!("{prefix}.act"), role, block, f))
    }
}

/// Lays out every operation of the network for an `input_h x input_w` image
/// in execution order.
pub fn build_plan(config: &ModelConfig, input_h: usize, input_w: usize) -> Result<LayerPlan> {
    config.validate()?;
    let min = config.min_input();
    if input_h < min || input_w < min {
        return Err(shape_err!(
            "input {input_h}x{input_w} is smaller than the {min}x{min} minimum for {} resolution",
            config.hr_resolution
        ));
    }
    let base = config.base;
    let mut b = Builder { records: Vec::new() };
    let mut feat = Feat {
        idx: None,
        c: 3,
        h: input_h,
        w: input_w,
    };
    for (i, &s) in config.hr_resolution.stem_strides().iter().enumerate() {
        feat = b.conv_bn_act(&format!("stem.{i}"), Role::Stem, None, feat, base, 3, s)?;
    }
    let (hr_h, hr_w) = (feat.h, feat.w);
    let mut sg_chain = feat;
    for j in 1..=config.num_blocks {
        let blk = Some(j);
        let mut h = feat;
        let mut s_in = match config.guidance {
            Guidance::Multi => feat,
            _ => sg_chain,
        };
        for i in 0..config.layers_per_block {
            h = b.conv_bn_act(&format!("block{j}.hr.{i}"), Role::Hr, blk, h, base, 3, 1)?;
            let (c_sg, stride) = match config.guidance {
                Guidance::None => continue,
                Guidance::Single => (base << j, if i == 0 { 2 } else { 1 }),
                Guidance::Multi => (base << (i + 1), 2),
            };
            let s = b.conv_bn_act(&format!("block{j}.sg.{i}"), Role::Sg, blk, s_in, c_sg, 3, stride)?;
            s_in = s;
            let g = b.resize(format!("block{j}.guide.{i}.resize"), Role::Fuse, blk, s, hr_h, hr_w);
            let g = b.conv(format!("block{j}.guide.{i}.conv"), Role::Fuse, blk, g, base, 1, 1, false)?;
            let g = b.bn(format!("block{j}.guide.{i}.bn"), Role::Fuse, blk, g);
            let g = b.act(format!("block{j}.guide.{i}.act"), Role::Fuse, blk, g);
            h = b.push(
                format!("block{j}.fuse.{i}"),
                LayerKind::Fuse,
                Role::Fuse,
                blk,
                &[h, g],
                base,
                1,
                1,
                false,
                hr_h,
                hr_w,
            );
        }
        sg_chain = s_in;
        feat = h;
        if config.aux_heads.contains(&j) {
            let a = b.conv(format!("aux{j}.cls"), Role::Aux, blk, h, config.num_classes, 3, 1, true)?;
            b.resize(format!("aux{j}.resize"), Role::Aux, blk, a, input_h, input_w);
        }
    }
    let cls_in = match config.head {
        HeadKind::Single => feat,
        HeadKind::Double => {
            let (oh, ow) = conv_transpose_out_len(feat.h, 3, 2, 1, 1)
                .zip(conv_transpose_out_len(feat.w, 3, 2, 1, 1))
                .ok_or_else(|| shape_err!("head: empty transposed-conv output"))?;
            let up = b.push("head.up".into(), LayerKind::TConv, Role::Head, None, &[feat], base, 3, 2, false, oh, ow);
            let up = b.bn("head.up_bn".into(), Role::Head, None, up);
            b.act("head.up_act".into(), Role::Head, None, up)
        }
    };
    let cls = b.conv("head.cls".into(), Role::Head, None, cls_in, config.num_classes, 3, 1, true)?;
    b.resize("head.resize".into(), Role::Head, None, cls, input_h, input_w);

    let plan = LayerPlan {
        input_h,
        input_w,
        records: b.records,
    };
    if let Some(r) = plan
        .records
        .iter()
        .find(|r| matches!(r.role, Role::Hr | Role::Fuse) && (r.out_h, r.out_w) != (hr_h, hr_w))
    {
        return Err(shape_err!(
            "{} leaves the high-resolution extent {hr_h}x{hr_w} ({}x{})",
            r.name,
            r.out_h,
            r.out_w
        ));
    }
    Ok(plan)
}
