use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::keyval::{render_section, Document};
use crate::nn::FuseMode;

const MAX_BASE: usize = 1024;
const MAX_DEPTH: usize = 8;
const MAX_CHANNELS: usize = 1 << 16;

/// Resolution of the high-resolution path relative to the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HrResolution {
    Half,
    Quarter,
    Eighth,
}

impl HrResolution {
    pub fn denominator(self) -> usize {
        match self {
            HrResolution::Half => 2,
            HrResolution::Quarter => 4,
            HrResolution::Eighth => 8,
        }
    }

    /// Strides of the stem convolutions; their product is the denominator.
    pub fn stem_strides(self) -> &'static [usize] {
        match self {
            HrResolution::Half => &[2, 1],
            HrResolution::Quarter => &[2, 2],
            HrResolution::Eighth => &[2, 2, 2],
        }
    }
}

impl fmt::Display for HrResolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.denominator())
    }
}

impl FromStr for HrResolution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1/2" => Ok(HrResolution::Half),
            "1/4" => Ok(HrResolution::Quarter),
            "1/8" => Ok(HrResolution::Eighth),
            _ => Err(Error::Config(format!("hr_resolution must be 1/2, 1/4 or 1/8, got '{s}'"))),
        }
    }
}

/// Semantic-guidance layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Guidance {
    /// High-resolution path only.
    None,
    /// One guidance resolution per block, halving from block to block.
    Single,
    /// Guidance resolution halves at every layer inside a block.
    Multi,
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Guidance::None => "none",
            Guidance::Single => "single",
            Guidance::Multi => "multi",
        })
    }
}

impl FromStr for Guidance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Guidance::None),
            "single" => Ok(Guidance::Single),
            "multi" => Ok(Guidance::Multi),
            _ => Err(Error::Config(format!("guidance must be none, single or multi, got '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// 3x3 class conv at HR resolution, one bilinear jump to full size.
    Single,
    /// Transposed conv to twice the HR resolution, class conv, bilinear to full size.
    Double,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Single => "single",
            HeadKind::Double => "double",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(HeadKind::Single),
            "double" => Ok(HeadKind::Double),
            _ => Err(Error::Config(format!("head must be single or double, got '{s}'"))),
        }
    }
}

fn fusion_name(m: FuseMode) -> &'static str {
    match m {
        FuseMode::Sum => "sum",
        FuseMode::Mul => "mul",
    }
}

fn parse_fusion(s: &str) -> Result<FuseMode> {
    match s {
        "sum" => Ok(FuseMode::Sum),
        "mul" => Ok(FuseMode::Mul),
        _ => Err(Error::Config(format!("fusion must be sum or mul, got '{s}'"))),
    }
}

fn parse_aux(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let idx = part
            .strip_prefix('h')
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| Error::Config(format!("aux head '{part}' is not of the form h<block>")))?;
        out.push(idx);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Declarative description of one network variant.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub base: usize,
    pub hr_resolution: HrResolution,
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub guidance: Guidance,
    pub fusion: FuseMode,
    pub head: HeadKind,
    /// 1-based block indices carrying an auxiliary head.
    pub aux_heads: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_base(32)
    }
}

impl ModelConfig {
    /// Full model: quarter resolution, single guidance, sum fusion, double
    /// head, auxiliary heads after blocks 1 and 2.
    pub fn with_base(base: usize) -> Self {
        ModelConfig {
            base,
            hr_resolution: HrResolution::Quarter,
            num_blocks: 3,
            layers_per_block: 3,
            guidance: Guidance::Single,
            fusion: FuseMode::Sum,
            head: HeadKind::Double,
            aux_heads: vec![1, 2],
            num_classes: 2,
        }
    }

    /// High-resolution path only, no auxiliary heads.
    pub fn hr_only(base: usize, hr_resolution: HrResolution) -> Self {
        ModelConfig {
            hr_resolution,
            guidance: Guidance::None,
            aux_heads: Vec::new(),
            ..ModelConfig::with_base(base)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base == 0 {
            return Err(Error::Config("base must be >= 1".into()));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be >= 1".into()));
        }
        if self.layers_per_block == 0 {
            return Err(Error::Config("layers_per_block must be >= 1".into()));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be in 2..=255, got {}", self.num_classes)));
        }
        if let Some(&bad) = self.aux_heads.iter().find(|&&b| b == 0 || b > self.num_blocks) {
            return Err(Error::Config(format!(
                "aux head h{bad} refers to a missing block (model has {})",
                self.num_blocks
            )));
        }
        let depth = match self.guidance {
            Guidance::None => 0,
            Guidance::Single => self.num_blocks,
            Guidance::Multi => self.layers_per_block,
        };
        if self.base > MAX_BASE || self.num_blocks > MAX_DEPTH || self.layers_per_block > MAX_DEPTH {
            return Err(Error::Config(format!(
                "base <= {MAX_BASE}, num_blocks <= {MAX_DEPTH} and layers_per_block <= {MAX_DEPTH} required"
            )));
        }
        if self.base << depth > MAX_CHANNELS {
            return Err(Error::Config(format!(
                "guidance width base*2^{depth} exceeds {MAX_CHANNELS} channels"
            )));
        }
        Ok(())
    }

    /// Smallest input extent the network accepts.
    pub fn min_input(&self) -> usize {
        4 * self.hr_resolution.denominator()
    }

    pub fn from_document(doc: &mut Document) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            base: doc.get_or("model", "base", d.base)?,
            hr_resolution: doc.get_or("model", "hr_resolution", d.hr_resolution)?,
            num_blocks: doc.get_or("model", "num_blocks", d.num_blocks)?,
            layers_per_block: doc.get_or("model", "layers_per_block", d.layers_per_block)?,
            guidance: doc.get_or("model", "guidance", d.guidance)?,
            fusion: match doc.take("model", "fusion") {
                Some(v) => parse_fusion(&v)?,
                None => d.fusion,
            },
            head: doc.get_or("model", "head", d.head)?,
            aux_heads: match doc.take("model", "aux_heads") {
                Some(v) => parse_aux(&v)?,
                None => d.aux_heads,
            },
            num_classes: doc.get_or("model", "num_classes", d.num_classes)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a document holding only a `[model]` section.
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::parse(text)?;
        let cfg = Self::from_document(&mut doc)?;
        doc.finish()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let aux = if self.aux_heads.is_empty() {
            "none".to_string()
        } else {
            self.aux_heads.iter().map(|b| format!("h{b}")).collect::<Vec<_>>().join(",")
        };
        render_section(
            "model",
            &[
                ("base", self.base.to_string()),
                ("hr_resolution", self.hr_resolution.to_string()),
                ("num_blocks", self.num_blocks.to_string()),
                ("layers_per_block", self.layers_per_block.to_string()),
                ("guidance", self.guidance.to_string()),
                ("fusion", fusion_name(self.fusion).to_string()),
                ("head", self.head.to_string()),
                ("aux_heads", aux),
                ("num_classes", self.num_classes.to_string()),
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::with_base(16);
        c.fusion = FuseMode::Mul;
        c.aux_heads = vec![2];
        c.hr_resolution = HrResolution::Eighth;
        assert_eq!(ModelConfig::parse(&c.to_text()).unwrap(), c);
        let h = ModelConfig::hr_only(8, HrResolution::Half);
        assert_eq!(ModelConfig::parse(&h.to_text()).unwrap(), h);
    }

    #[test]
    fn rejects_invalid() {
        assert!(ModelConfig::parse("[model]\nbase = 0\n").is_err());
        assert!(ModelConfig::parse("[model]\nnum_blocks = 1\naux_heads = h1,h2\n").is_err());
        assert!(ModelConfig::parse("[model]\nhr_resolution = 1/3\n").is_err());
        assert!(ModelConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(ModelConfig::parse("[model]\nbase = 1000000000000000\n").is_err());
    }
}
