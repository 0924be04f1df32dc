use crate::data::{AugmentParams, Normalization};
use crate::error::{Error, Result};
use crate::keyval::{render_section, Document};
use crate::model::ModelConfig;

/// Online hard example mining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OhemConfig {
    pub enabled: bool,
    /// Pixels whose true-class probability is below this are kept.
    pub prob_thresh: f64,
    /// Minimum kept pixels per 400x400 image.
    pub min_kept: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            enabled: true,
            prob_thresh: 0.7,
            min_kept: 2500,
        }
    }
}

pub const OHEM_REFERENCE_PIXELS: usize = 400 * 400;

impl OhemConfig {
    /// `min_kept` rescaled to a batch of `n` images of `h x w`.
    pub fn scaled(&self, n: usize, h: usize, w: usize) -> OhemConfig {
        let per_image = (self.min_kept * h * w).div_ceil(OHEM_REFERENCE_PIXELS);
        OhemConfig {
            min_kept: (per_image * n).max(1),
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub warmup_iters: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Weight of each auxiliary loss.
    pub alpha: f64,
    pub ohem: OhemConfig,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 writes only the last.
    pub checkpoint_every: usize,
}

/// Desk-scale defaults; see [`TrainConfig::reference`] for the full-length schedule.
impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 2000,
            warmup_iters: 100,
            base_lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            alpha: 0.5,
            ohem: OhemConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// 100k iterations with 2000 warmup at batch 32.
    pub fn reference() -> Self {
        TrainConfig {
            max_iters: 100_000,
            warmup_iters: 2000,
            batch_size: 32,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.max_iters > 0 && self.warmup_iters >= self.max_iters {
            return err(format!(
                "warmup_iters ({}) must be below max_iters ({})",
                self.warmup_iters, self.max_iters
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_power > 0.0 && self.lr_power.is_finite()) {
            return err(format!("lr_power must be positive, got {}", self.lr_power));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return err(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.ohem.prob_thresh > 0.0 && self.ohem.prob_thresh <= 1.0) {
            return err(format!("ohem_thresh must lie in (0, 1], got {}", self.ohem.prob_thresh));
        }
        if self.ohem.min_kept == 0 {
            return err("ohem_min_kept must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_document(doc: &mut Document) -> Result<Self> {
        let d = TrainConfig::default();
        let s = "train";
        let cfg = TrainConfig {
            max_iters: doc.get_or(s, "max_iters", d.max_iters)?,
            warmup_iters: doc.get_or(s, "warmup_iters", d.warmup_iters)?,
            base_lr: doc.get_or(s, "base_lr", d.base_lr)?,
            lr_power: doc.get_or(s, "lr_power", d.lr_power)?,
            momentum: doc.get_or(s, "momentum", d.momentum)?,
            weight_decay: doc.get_or(s, "weight_decay", d.weight_decay)?,
            batch_size: doc.get_or(s, "batch_size", d.batch_size)?,
            alpha: doc.get_or(s, "alpha", d.alpha)?,
            ohem: OhemConfig {
                enabled: doc.get_or(s, "ohem", d.ohem.enabled)?,
                prob_thresh: doc.get_or(s, "ohem_thresh", d.ohem.prob_thresh)?,
                min_kept: doc.get_or(s, "ohem_min_kept", d.ohem.min_kept)?,
            },
            seed: doc.get_or(s, "seed", d.seed)?,
            checkpoint_every: doc.get_or(s, "checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        render_section(
            "train",
            &[
                ("max_iters", self.max_iters.to_string()),
                ("warmup_iters", self.warmup_iters.to_string()),
                ("base_lr", self.base_lr.to_string()),
                ("lr_power", self.lr_power.to_string()),
                ("momentum", self.momentum.to_string()),
                ("weight_decay", self.weight_decay.to_string()),
                ("batch_size", self.batch_size.to_string()),
                ("alpha", self.alpha.to_string()),
                ("ohem", self.ohem.enabled.to_string()),
                ("ohem_thresh", self.ohem.prob_thresh.to_string()),
                ("ohem_min_kept", self.ohem.min_kept.to_string()),
                ("seed", self.seed.to_string()),
                ("checkpoint_every", self.checkpoint_every.to_string()),
            ],
        )
    }
}

fn parse_triple(section: &str, key: &str, raw: &str) -> Result<[f32; 3]> {
    let parts: Vec<f32> = raw
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("invalid value '{raw}' for key '{section}.{key}'")))?;
    match parts.as_slice() {
        &[v] => Ok([v; 3]),
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Config(format!("key '{section}.{key}' takes one or three values, got '{raw}'"))),
    }
}

fn render_triple(v: [f32; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

/// Reads the normalization keys of a `[data]` section, leaving other keys alone.
pub fn normalization_from_document(doc: &mut Document) -> Result<Normalization> {
    let d = Normalization::default();
    let mean = match doc.take("data", "mean") {
        Some(v) => parse_triple("data", "mean", &v)?,
        None => d.mean,
    };
    let std = match doc.take("data", "std") {
        Some(v) => parse_triple("data", "std", &v)?,
        None => d.std,
    };
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("data.std must be positive".into()));
    }
    Ok(Normalization { mean, std })
}

pub fn normalization_to_text(n: &Normalization) -> String {
    render_section("data", &[("mean", render_triple(n.mean)), ("std", render_triple(n.std))])
}

pub fn augment_from_document(doc: &mut Document) -> Result<AugmentParams> {
    let d = AugmentParams::default();
    let s = "data";
    let crop = match doc.take(s, "crop") {
        None => d.crop,
        Some(v) => {
            let bad = || Error::Config(format!("invalid value '{v}' for key 'data.crop' (expected N or HxW)"));
            match v.split_once('x') {
                Some((h, w)) => (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?),
                None => {
                    let n = v.trim().parse().map_err(|_| bad())?;
                    (n, n)
                }
            }
        }
    };
    let p = AugmentParams {
        scale_range: (doc.get_or(s, "scale_min", d.scale_range.0)?, doc.get_or(s, "scale_max", d.scale_range.1)?),
        crop,
        hflip_prob: doc.get_or(s, "hflip_prob", d.hflip_prob)?,
        brightness: doc.get_or(s, "brightness", d.brightness)?,
        contrast: doc.get_or(s, "contrast", d.contrast)?,
        saturation: doc.get_or(s, "saturation", d.saturation)?,
        distort_prob: doc.get_or(s, "distort_prob", d.distort_prob)?,
        normalization: normalization_from_document(doc)?,
    };
    p.validate()?;
    Ok(p)
}

pub fn augment_to_text(p: &AugmentParams) -> String {
    render_section(
        "data",
        &[
            ("crop", format!("{}x{}", p.crop.0, p.crop.1)),
            ("scale_min", p.scale_range.0.to_string()),
            ("scale_max", p.scale_range.1.to_string()),
            ("hflip_prob", p.hflip_prob.to_string()),
            ("brightness", p.brightness.to_string()),
            ("contrast", p.contrast.to_string()),
            ("saturation", p.saturation.to_string()),
            ("distort_prob", p.distort_prob.to_string()),
            ("mean", render_triple(p.normalization.mean)),
            ("std", render_triple(p.normalization.std)),
        ],
    )
}

/// Everything a training run needs: `[model]`, `[train]` and `[data]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentParams::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::parse(text)?;
        let cfg = RunConfig {
            model: ModelConfig::from_document(&mut doc)?,
            train: TrainConfig::from_document(&mut doc)?,
            augment: augment_from_document(&mut doc)?,
        };
        doc.finish()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!("{}\n{}\n{}", self.model.to_text(), self.train.to_text(), augment_to_text(&self.augment))
    }
}
