use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Guidance, HeadKind, ModelConfig};
use super::plan::{build_plan, LayerPlan};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, fuse, fuse_backward, join, Act, Activation, BatchNorm2d, Conv2d,
    ConvParams, ConvTranspose2d, FuseMode, Mode, Param, Parameterized,
};
use crate::tensor::{Float, Tensor};

fn name_stream(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Kaiming-normal tensor. Each tensor draws from its own stream keyed by
/// name, so adding or removing a layer leaves the others untouched.
fn kaiming<T: Float>(seed: u64, name: &str, dims: [usize; 4], fan_in: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_stream(name));
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(dims, |_| T::from_f64_lossy(normal.sample(&mut rng)))
}

fn conv<T: Float>(seed: u64, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Conv2d<T> {
    let w = kaiming(seed, &join(name, "weight"), [c_out, c_in, k, k], c_in * k * k);
    let b = bias.then(|| vec![T::zero(); c_out]);
    Conv2d::new(ConvParams::new(w, b, stride, k / 2).expect("odd kernel, positive stride"))
}

fn add<T: Float>(mut a: Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.add_assign(b)?;
    Ok(a)
}

fn spatial<T: Float>(t: &Tensor<T>) -> (usize, usize) {
    let [_, _, h, w] = t.dims();
    (h, w)
}

/// Conv-BN-activation triple.
#[derive(Clone, Debug)]
struct Cba<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    act: Act<T>,
}

impl<T: Float> Cba<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(seed: u64, prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize, act: Activation) -> Self {
        Cba {
            conv: conv(seed, &join(prefix, "conv"), c_in, c_out, k, stride, false),
            bn: BatchNorm2d::new(c_out),
            act: Act::new(act),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode)?;
        Ok(self.act.forward(&y, mode))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.act.infer(&self.bn.infer(&self.conv.infer(x)?)?))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.act.backward(g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
}

/// Guidance branch: resize to HR extent, 1x1 Conv-BN, activation.
#[derive(Clone, Debug)]
struct Guide<T> {
    cba: Cba<T>,
    in_hw: Option<(usize, usize)>,
}

impl<T: Float> Guide<T> {
    fn forward(&mut self, s: &Tensor<T>, hr: (usize, usize), mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Train {
            self.in_hw = Some(spatial(s));
        }
        self.cba.forward(&bilinear_resize(s, hr.0, hr.1), mode)
    }

    fn infer(&self, s: &Tensor<T>, hr: (usize, usize)) -> Result<Tensor<T>> {
        self.cba.infer(&bilinear_resize(s, hr.0, hr.1))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self
            .in_hw
            .take()
            .ok_or_else(|| Error::State("guidance branch: backward without forward".into()))?;
        let g = self.cba.backward(g)?;
        Ok(bilinear_resize_backward(&g, h, w))
    }
}

#[derive(Clone, Debug)]
struct BlockLayer<T> {
    hr: Cba<T>,
    sg: Option<(Cba<T>, Guide<T>)>,
    /// `(hr, guide)` operands of a multiplicative fusion.
    fuse_cache: Option<(Tensor<T>, Tensor<T>)>,
}

#[derive(Clone, Debug)]
struct Block<T> {
    index: usize,
    layers: Vec<BlockLayer<T>>,
}

fn check_hr<T: Float>(t: &Tensor<T>, hr: (usize, usize), what: &str) -> Result<()> {
    if spatial(t) != hr {
        let (h, w) = spatial(t);
        return Err(shape_err!("{what}: {h}x{w} differs from the high-resolution extent {}x{}", hr.0, hr.1));
    }
    Ok(())
}

impl<T: Float> Block<T> {
    fn new(cfg: &ModelConfig, seed: u64, j: usize) -> Self {
        let base = cfg.base;
        let act = match cfg.fusion {
            FuseMode::Sum => Activation::Relu,
            FuseMode::Mul => Activation::Sigmoid,
        };
        let layers = (0..cfg.layers_per_block)
            .map(|i| {
                let hr = Cba::new(seed, &format!("block{j}.hr.{i}"), base, base, 3, 1, Activation::Relu);
                let sg_spec = match cfg.guidance {
                    Guidance::None => None,
                    Guidance::Single => {
                        let c_in = if i == 0 { base << (j - 1) } else { base << j };
                        Some((c_in, base << j, if i == 0 { 2 } else { 1 }))
                    }
                    Guidance::Multi => Some((base << i, base << (i + 1), 2)),
                };
                let sg = sg_spec.map(|(c_in, c_out, stride)| {
                    let sg = Cba::new(seed, &format!("block{j}.sg.{i}"), c_in, c_out, 3, stride, Activation::Relu);
                    let guide = Guide {
                        cba: Cba::new(seed, &format!("block{j}.guide.{i}"), c_out, base, 1, 1, act),
                        in_hw: None,
                    };
                    (sg, guide)
                });
                BlockLayer {
                    hr,
                    sg,
                    fuse_cache: None,
                }
            })
            .collect();
        Block { index: j, layers }
    }

    /// Returns the block output and the final guidance feature.
    fn forward(
        &mut self,
        x: &Tensor<T>,
        s_in: &Tensor<T>,
        hr: (usize, usize),
        fusion: FuseMode,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut h = x.clone();
        let mut s = s_in.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            h = l.hr.forward(&h, mode)?;
            check_hr(&h, hr, &format!("block{}.hr.{i}", self.index))?;
            if let Some((sg, guide)) = l.sg.as_mut() {
                s = sg.forward(&s, mode)?;
                let g = guide.forward(&s, hr, mode)?;
                let fused = fuse(&h, &g, fusion)?;
                if mode == Mode::Train && fusion == FuseMode::Mul {
                    l.fuse_cache = Some((h, g));
                }
                h = fused;
            }
        }
        Ok((h, s))
    }

    fn infer(&self, x: &Tensor<T>, s_in: &Tensor<T>, hr: (usize, usize), fusion: FuseMode) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut h = x.clone();
        let mut s = s_in.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.hr.infer(&h)?;
            check_hr(&h, hr, &format!("block{}.hr.{i}", self.index))?;
            if let Some((sg, guide)) = l.sg.as_ref() {
                s = sg.infer(&s)?;
                h = fuse(&h, &guide.infer(&s, hr)?, fusion)?;
            }
        }
        Ok((h, s))
    }

    /// Takes the gradients of the block output and of the final guidance
    /// feature; returns the gradients of the HR input and the guidance input.
    fn backward(
        &mut self,
        grad_h: Tensor<T>,
        grad_s: Option<Tensor<T>>,
        fusion: FuseMode,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut gh = grad_h;
        let mut carry = grad_s;
        for l in self.layers.iter_mut().rev() {
            if let Some((sg, guide)) = l.sg.as_mut() {
                let (g_hr, g_guide) = match fusion {
                    FuseMode::Sum => (gh.clone(), gh),
                    FuseMode::Mul => {
                        let (h, g) = l
                            .fuse_cache
                            .take()
                            .ok_or_else(|| Error::State("fusion: backward without forward".into()))?;
                        fuse_backward(&h, &g, &gh, fusion)?
                    }
                };
                let mut gs = guide.backward(&g_guide)?;
                if let Some(c) = carry.take() {
                    gs = add(gs, &c)?;
                }
                carry = Some(sg.backward(&gs)?);
                gh = g_hr;
            }
            gh = l.hr.backward(&gh)?;
        }
        Ok((gh, carry))
    }

    fn visit(&mut self, f: &mut dyn FnMut(Param<'_, T>)) {
        let j = self.index;
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.hr.visit(&format!("block{j}.hr.{i}"), f);
            if let Some((sg, guide)) = l.sg.as_mut() {
                sg.visit(&format!("block{j}.sg.{i}"), f);
                guide.cba.visit(&format!("block{j}.guide.{i}"), f);
            }
        }
    }
}

/// Class conv followed by a bilinear jump to the input size.
#[derive(Clone, Debug)]
struct Classifier<T> {
    cls: Conv2d<T>,
    cls_hw: Option<(usize, usize)>,
}

impl<T: Float> Classifier<T> {
    fn forward(&mut self, x: &Tensor<T>, out: (usize, usize), mode: Mode) -> Result<Tensor<T>> {
        let y = self.cls.forward(x, mode)?;
        if mode == Mode::Train {
            self.cls_hw = Some(spatial(&y));
        }
        Ok(bilinear_resize(&y, out.0, out.1))
    }

    fn infer(&self, x: &Tensor<T>, out: (usize, usize)) -> Result<Tensor<T>> {
        Ok(bilinear_resize(&self.cls.infer(x)?, out.0, out.1))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self
            .cls_hw
            .take()
            .ok_or_else(|| Error::State("classifier: backward without forward".into()))?;
        self.cls.backward(&bilinear_resize_backward(g, h, w))
    }
}

#[derive(Clone, Debug)]
struct UpStage<T> {
    tconv: ConvTranspose2d<T>,
    bn: BatchNorm2d<T>,
    act: Act<T>,
}

#[derive(Clone, Debug)]
struct AuxHead<T> {
    block: usize,
    head: Classifier<T>,
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub primary: Tensor<T>,
    /// One entry per configured auxiliary head in training mode, empty otherwise.
    pub aux: Vec<Tensor<T>>,
}

/// An instantiated network: layers, parameters, BN statistics and the
/// activations cached for backward.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    stem: Vec<Cba<T>>,
    blocks: Vec<Block<T>>,
    aux: Vec<AuxHead<T>>,
    up: Option<UpStage<T>>,
    head: Classifier<T>,
    /// `(input extent, hr extent)` of the pending training pass.
    pending: Option<((usize, usize), (usize, usize))>,
}

/// Builds a freshly initialized network.
pub fn build_model<T: Float>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let base = config.base;
    let stem = config
        .hr_resolution
        .stem_strides()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let c_in = if i == 0 { 3 } else { base };
            Cba::new(seed, &format!("stem.{i}"), c_in, base, 3, s, Activation::Relu)
        })
        .collect();
    let blocks = (1..=config.num_blocks).map(|j| Block::new(config, seed, j)).collect();
    let aux = config
        .aux_heads
        .iter()
        .map(|&j| AuxHead {
            block: j,
            head: Classifier {
                cls: conv(seed, &format!("aux{j}.cls"), base, config.num_classes, 3, 1, true),
                cls_hw: None,
            },
        })
        .collect();
    let up = (config.head == HeadKind::Double).then(|| {
        let w = kaiming(seed, "head.up.weight", [base, base, 3, 3], base * 9);
        UpStage {
            tconv: ConvTranspose2d::new(ConvParams::new(w, None, 2, 1).expect("valid tconv"), 1),
            bn: BatchNorm2d::new(base),
            act: Act::new(Activation::Relu),
        }
    });
    let head = Classifier {
        cls: conv(seed, "head.cls", base, config.num_classes, 3, 1, true),
        cls_hw: None,
    };
    Ok(Model {
        config: config.clone(),
        stem,
        blocks,
        aux,
        up,
        head,
        pending: None,
    })
}

impl<T: Float> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Per-layer plan for an input of the given size.
    pub fn plan(&self, h: usize, w: usize) -> Result<LayerPlan> {
        build_plan(&self.config, h, w)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = x.dims();
        let min = self.config.min_input();
        if n == 0 || c != 3 || h < min || w < min {
            return Err(shape_err!("model expects (N>=1, 3, H>={min}, W>={min}) input, got {n}x{c}x{h}x{w}"));
        }
        Ok(())
    }

    /// Forward pass. Training mode uses batch statistics, updates running
    /// statistics, caches activations and emits auxiliary logits.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ModelOutput<T>> {
        if mode == Mode::Infer {
            return Ok(ModelOutput {
                primary: self.infer(x)?,
                aux: Vec::new(),
            });
        }
        self.check_input(x)?;
        self.pending = None;
        let out_hw = spatial(x);
        let mut feat = x.clone();
        for s in &mut self.stem {
            feat = s.forward(&feat, mode)?;
        }
        let hr = spatial(&feat);
        let multi = self.config.guidance == Guidance::Multi;
        let mut chain = feat.clone();
        let mut aux_out = Vec::with_capacity(self.aux.len());
        for b in &mut self.blocks {
            let s_in = if multi { feat.clone() } else { chain };
            let (h, s) = b.forward(&feat, &s_in, hr, self.config.fusion, mode)?;
            for a in self.aux.iter_mut().filter(|a| a.block == b.index) {
                aux_out.push(a.head.forward(&h, out_hw, mode)?);
            }
            feat = h;
            chain = s;
        }
        if let Some(up) = self.up.as_mut() {
            feat = up.tconv.forward(&feat, mode)?;
            feat = up.bn.forward(&feat, mode)?;
            feat = up.act.forward(&feat, mode);
        }
        let primary = self.head.forward(&feat, out_hw, mode)?;
        self.pending = Some((out_hw, hr));
        Ok(ModelOutput { primary, aux: aux_out })
    }

    /// Inference-mode primary logits. Read-only, so a frozen model can be
    /// shared across threads.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let out_hw = spatial(x);
        let mut feat = x.clone();
        for s in &self.stem {
            feat = s.infer(&feat)?;
        }
        let hr = spatial(&feat);
        let multi = self.config.guidance == Guidance::Multi;
        let mut chain = feat.clone();
        for b in &self.blocks {
            let s_in = if multi { feat.clone() } else { chain };
            let (h, s) = b.infer(&feat, &s_in, hr, self.config.fusion)?;
            feat = h;
            chain = s;
        }
        if let Some(up) = self.up.as_ref() {
            feat = up.act.infer(&up.bn.infer(&up.tconv.infer(&feat)?)?);
        }
        self.head.infer(&feat, out_hw)
    }

    /// Backpropagates logit gradients, accumulating into every learnable's
    /// gradient buffer. An empty `grad_aux` means zero auxiliary gradients.
    /// Returns the gradient with respect to the input.
    pub fn backward(&mut self, grad_primary: &Tensor<T>, grad_aux: &[Tensor<T>]) -> Result<Tensor<T>> {
        let ((oh, ow), _) = self
            .pending
            .take()
            .ok_or_else(|| Error::State("model: backward called without a cached training forward pass".into()))?;
        let expect = [grad_primary.batch(), self.config.num_classes, oh, ow];
        if grad_primary.dims() != expect {
            return Err(shape_err!("primary gradient has dims {:?}, expected {expect:?}", grad_primary.dims()));
        }
        if !grad_aux.is_empty() && grad_aux.len() != self.aux.len() {
            return Err(shape_err!("{} auxiliary gradients for {} auxiliary heads", grad_aux.len(), self.aux.len()));
        }
        if let Some(g) = grad_aux.iter().find(|g| g.dims() != expect) {
            return Err(shape_err!("auxiliary gradient has dims {:?}, expected {expect:?}", g.dims()));
        }
        let mut g = self.head.backward(grad_primary)?;
        if let Some(up) = self.up.as_mut() {
            g = up.act.backward(&g)?;
            g = up.bn.backward(&g)?;
            g = up.tconv.backward(&g)?;
        }
        let multi = self.config.guidance == Guidance::Multi;
        let mut grad_chain: Option<Tensor<T>> = None;
        for b in self.blocks.iter_mut().rev() {
            for (k, a) in self.aux.iter_mut().enumerate().rev() {
                if a.block != b.index {
                    continue;
                }
                // Aux caches must be consumed even when their gradient is zero.
                let ga = match grad_aux.get(k) {
                    Some(t) => a.head.backward(t)?,
                    None => a.head.backward(&Tensor::zeros(expect))?,
                };
                g = add(g, &ga)?;
            }
            let (gx, gs) = b.backward(g, if multi { None } else { grad_chain.take() }, self.config.fusion)?;
            g = gx;
            match (multi, gs) {
                (true, Some(gs)) => g = add(g, &gs)?,
                (false, gs) => grad_chain = gs,
                (true, None) => {}
            }
        }
        if let Some(gs) = grad_chain {
            g = add(g, &gs)?;
        }
        for s in self.stem.iter_mut().rev() {
            g = s.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |p| {
            if let Some(g) = p.grad {
                g.fill(T::zero());
            }
        });
    }

    /// Snapshot of every learnable's accumulated gradient, in registry order.
    pub fn gradients(&mut self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |p| {
            if let Some(g) = p.grad {
                out.push((p.name, g.to_vec()));
            }
        });
        out
    }

    /// Registry snapshot: name, shape and values of every stored tensor.
    pub fn tensors(&mut self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |p| out.push((p.name, p.shape, p.value.to_vec())));
        out
    }

    /// Learnable parameter count.
    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |p| {
            if p.kind.is_learnable() {
                n += p.value.len();
            }
        });
        n
    }

    /// Casts every tensor to another precision; caches are dropped.
    pub fn cast<U: Float>(&mut self) -> Model<U> {
        let mut values = self.tensors().into_iter().map(|(_, _, v)| v);
        let mut out: Model<U> = build_model(&self.config, 0).expect("config already validated");
        out.visit_params("", &mut |p| {
            let v = values.next().expect("identical registries");
            for (d, s) in p.value.iter_mut().zip(v) {
                *d = U::from_f64_lossy(s.to_f64_lossy());
            }
        });
        out
    }
}

impl<T: Float> Parameterized<T> for Model<T> {
    /// Visits the registry in execution order.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, T>)) {
        let mut wrapped = |mut p: Param<'_, T>| {
            p.name = join(prefix, &p.name);
            f(p)
        };
        for (i, s) in self.stem.iter_mut().enumerate() {
            s.visit(&format!("stem.{i}"), &mut wrapped);
        }
        for b in &mut self.blocks {
            b.visit(&mut wrapped);
            for a in self.aux.iter_mut().filter(|a| a.block == b.index) {
                a.head.cls.visit_params(&format!("aux{}.cls", a.block), &mut wrapped);
            }
        }
        if let Some(up) = self.up.as_mut() {
            up.tconv.visit_params("head.up", &mut wrapped);
            up.bn.visit_params("head.up_bn", &mut wrapped);
        }
        self.head.cls.visit_params("head.cls", &mut wrapped);
    }
}

impl crate::nn::Differentiable for Model<f64> {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Model::forward(self, input, Mode::Train)?.primary)
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        Model::backward(self, grad_out, &[])
    }
}
