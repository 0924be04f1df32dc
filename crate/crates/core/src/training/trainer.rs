use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{normalization_to_text, TrainConfig};
use super::loss::{ohem_reduce, poly_lr, total_loss};
use crate::data::{augment, AugmentParams, Sample};
use crate::error::{Error, Result};
use crate::keyval::Document;
use crate::model::checkpoint::OPTIM_PREFIX;
use crate::model::{Checkpoint, Model, StoredTensor};
use crate::nn::{softmax_ce_backward, softmax_ce_with_ids, sgd_momentum_step, Mode, ParamKind, Parameterized};
use crate::tensor::{Float, Tensor};

const AUGMENT_SALT: u64 = 0x5eed_a06e_0000_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub primary: f64,
    /// One entry per auxiliary head, in head order.
    pub aux: Vec<f64>,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{:.8e},{:.10},{:.10}", self.iter, self.lr, self.total, self.primary);
        for a in &self.aux {
            s.push_str(&format!(",{a:.10}"));
        }
        s
    }
}

pub fn csv_header(aux_heads: &[usize]) -> String {
    let mut s = "iter,lr,total_loss,primary_loss".to_string();
    for (k, _) in aux_heads.iter().enumerate() {
        s.push_str(&format!(",aux{}", k + 1));
    }
    s
}

/// Receives progress from [`train_loop`].
pub trait ProgressSink {
    fn iteration(&mut self, record: &LossRecord) -> Result<()>;
    /// Called at checkpoint intervals and once after the last iteration.
    fn checkpoint(&mut self, _iter: usize, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl ProgressSink for () {
    fn iteration(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes `loss.csv` and `ckpt_XXXXXX.hrsg` files into a run directory.
pub struct RunDir {
    dir: PathBuf,
    csv: BufWriter<File>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunDir {
    /// Appends to an existing `loss.csv` when resuming.
    pub fn create(dir: &Path, aux_heads: &[usize], append: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("loss.csv");
        let fresh = !append || !path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut csv = BufWriter::new(file);
        if fresh {
            writeln!(csv, "{}", csv_header(aux_heads)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(RunDir {
            dir: dir.to_path_buf(),
            csv,
            checkpoints: Vec::new(),
        })
    }
}

impl ProgressSink for RunDir {
    fn iteration(&mut self, record: &LossRecord) -> Result<()> {
        writeln!(self.csv, "{}", record.csv_line()).map_err(|e| Error::io(self.dir.join("loss.csv"), e))
    }

    fn checkpoint(&mut self, iter: usize, checkpoint: &Checkpoint) -> Result<()> {
        self.csv.flush().map_err(|e| Error::io(self.dir.join("loss.csv"), e))?;
        let path = self.dir.join(format!("ckpt_{iter:06}.hrsg"));
        checkpoint.write(&path)?;
        self.checkpoints.push(path);
        Ok(())
    }
}

/// Optimizer state and schedule position of a run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub augment: AugmentParams,
    velocities: Vec<Vec<T>>,
    iteration: usize,
}

fn learnable_shapes<T: Float>(model: &mut Model<T>) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |p| {
        if p.grad.is_some() {
            out.push((p.name, p.value.len()));
        }
    });
    out
}

impl<T: Float> Trainer<T> {
    pub fn new(model: &mut Model<T>, cfg: TrainConfig, augment: AugmentParams) -> Result<Self> {
        cfg.validate()?;
        augment.validate()?;
        let velocities = learnable_shapes(model).into_iter().map(|(_, n)| vec![T::zero(); n]).collect();
        Ok(Trainer {
            cfg,
            augment,
            velocities,
            iteration: 0,
        })
    }

    /// Restores the iteration counter and momentum buffers stored by
    /// [`Trainer::checkpoint`]. A checkpoint without training state starts
    /// at iteration 0.
    pub fn resume(model: &mut Model<T>, ck: &Checkpoint, cfg: TrainConfig, augment: AugmentParams) -> Result<Self> {
        let mut t = Trainer::new(model, cfg, augment)?;
        let mut doc = Document::parse(&ck.config_text)?;
        t.iteration = doc.get_or("state", "iteration", 0usize)?;
        if t.iteration == 0 {
            return Ok(t);
        }
        for ((name, len), v) in learnable_shapes(model).into_iter().zip(&mut t.velocities) {
            let key = format!("{OPTIM_PREFIX}velocity.{name}");
            let stored = ck
                .tensor(&key)
                .filter(|s| s.data.len() == len)
                .ok_or_else(|| Error::Integrity(format!("tensor '{key}' missing or mis-sized in checkpoint")))?;
            for (d, &s) in v.iter_mut().zip(&stored.data) {
                *d = T::from_f64_lossy(s as f64);
            }
        }
        Ok(t)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Model, normalization, iteration counter and momentum buffers.
    pub fn checkpoint(&self, model: &mut Model<T>) -> Checkpoint {
        let extra = format!(
            "\n{}\n[state]\niteration = {}\n",
            normalization_to_text(&self.augment.normalization),
            self.iteration
        );
        let mut ck = Checkpoint::from_model(model, &extra);
        for ((name, _), v) in learnable_shapes(model).into_iter().zip(&self.velocities) {
            ck.tensors.push(StoredTensor {
                name: format!("{OPTIM_PREFIX}velocity.{name}"),
                shape: vec![v.len()],
                data: v.iter().map(|x| x.to_f64_lossy() as f32).collect(),
            });
        }
        ck
    }

    /// Sample indices of iteration `iter`: a fresh permutation per epoch
    /// keyed by `(seed, epoch)`, trailing partial batch dropped.
    pub fn batch_indices(&self, iter: usize, dataset_len: usize) -> Result<Vec<usize>> {
        let b = self.cfg.batch_size;
        if dataset_len < b {
            return Err(Error::Data(format!("dataset of {dataset_len} samples is smaller than batch_size {b}")));
        }
        let per_epoch = dataset_len / b;
        let (epoch, pos) = (iter / per_epoch, iter % per_epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut rng);
        Ok(order[pos * b..(pos + 1) * b].to_vec())
    }

    /// Augmented, stacked batch of iteration `iter` and its flat labels.
    pub fn prepare_batch(&self, samples: &[Sample], iter: usize) -> Result<(Tensor<T>, Vec<u8>)> {
        let idx = self.batch_indices(iter, samples.len())?;
        let mut images = Vec::with_capacity(idx.len());
        let mut labels = Vec::new();
        for (slot, &i) in idx.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ AUGMENT_SALT);
            rng.set_stream(((iter as u64) << 16) | slot as u64);
            let s = augment(&samples[i], &self.augment, &mut rng);
            images.push(s.image.cast::<T>());
            labels.extend_from_slice(&s.mask.data);
        }
        Ok((Tensor::stack(&images)?, labels))
    }

    /// One optimization step on the batch of the current iteration.
    pub fn step(&mut self, model: &mut Model<T>, samples: &[Sample]) -> Result<LossRecord> {
        let iter = self.iteration;
        let lr = poly_lr(iter, &self.cfg);
        let (x, labels) = self.prepare_batch(samples, iter)?;
        let out = model.forward(&x, Mode::Train)?;
        let [n, _, h, w] = out.primary.dims();
        let ohem = self.cfg.ohem.scaled(n, h, w);
        let pixel_dims = [n, 1, h, w];

        let head = |logits: &Tensor<T>, scale: f64| -> Result<(f64, Tensor<T>)> {
            let ce = softmax_ce_with_ids(logits, &labels)?;
            let r = ohem_reduce(&ce.loss, &ce.true_class_prob(&labels), &ohem)?;
            let grad = softmax_ce_backward(&ce, &labels, &r.weights(pixel_dims, scale))?;
            Ok((r.loss, grad))
        };
        let (primary, grad_primary) = head(&out.primary, 1.0)?;
        let mut aux = Vec::with_capacity(out.aux.len());
        let mut grad_aux = Vec::with_capacity(out.aux.len());
        for a in &out.aux {
            let (l, g) = head(a, self.cfg.alpha)?;
            aux.push(l);
            grad_aux.push(g);
        }
        let total = total_loss(primary, &aux, self.cfg.alpha);
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total} at iteration {iter}")));
        }

        model.zero_grad();
        model.backward(&grad_primary, &grad_aux)?;
        let (lr_t, mom) = (T::from_f64_lossy(lr), T::from_f64_lossy(self.cfg.momentum));
        let wd = T::from_f64_lossy(self.cfg.weight_decay);
        let mut k = 0;
        let mut res = Ok(());
        let velocities = &mut self.velocities;
        model.visit_params("", &mut |p| {
            if let Some(g) = p.grad {
                let decay = if p.kind == ParamKind::Weight { wd } else { T::zero() };
                if res.is_ok() {
                    res = sgd_momentum_step(p.value, g, &mut velocities[k], lr_t, mom, decay);
                }
                k += 1;
            }
        });
        res?;
        self.iteration += 1;
        Ok(LossRecord {
            iter,
            lr,
            total,
            primary,
            aux,
        })
    }
}

/// Runs until `max_iters`, reporting every iteration and checkpoint.
pub fn train_loop<T: Float>(
    model: &mut Model<T>,
    samples: &[Sample],
    trainer: &mut Trainer<T>,
    sink: &mut dyn ProgressSink,
) -> Result<Vec<LossRecord>> {
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut history = Vec::new();
    while trainer.iteration() < trainer.cfg.max_iters {
        let rec = trainer.step(model, samples)?;
        sink.iteration(&rec)?;
        history.push(rec);
        let done = trainer.iteration();
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && done % every == 0 && done < trainer.cfg.max_iters {
            sink.checkpoint(done, &trainer.checkpoint(model))?;
        }
    }
    sink.checkpoint(trainer.iteration(), &trainer.checkpoint(model))?;
    Ok(history)
}
