use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use hrsegnet::complexity::model_complexity;
use hrsegnet::data::{gen_synthetic, load_dataset, read_image, write_image, write_mask};
use hrsegnet::inference::{checkpoint_normalization, evaluate, overlay, predict_mask};
use hrsegnet::metrics::Metrics;
use hrsegnet::model::{build_model, Checkpoint, Model};
use hrsegnet::training::{train_loop, LossRecord, ProgressSink, RunConfig, RunDir, Trainer};
use hrsegnet::Error;

#[derive(Parser)]
#[command(name = "hrsegnet", version, about = "Crack segmentation with a high-resolution guided network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic crack dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a config file on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every N iterations (0 = never).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Report pixel metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment one image; also writes `<stem>_overlay.png` next to the mask.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter and FLOP table for a model config.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// `N` or `HxW`.
        #[arg(long, default_value = "400")]
        input_size: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("hrsegnet: usage error: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(core) => eprintln!("hrsegnet: {core}"),
                None => eprintln!("hrsegnet: {e}"),
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, count, size, seed } => {
            if count == 0 {
                bail!("usage error: --count must be at least 1");
            }
            let m = gen_synthetic(count, size, seed, &out)?;
            emit(format!("wrote {} samples of {}x{} to {}", m.count, m.size, m.size, out.display()));
        }
        Cmd::Train {
            config,
            data,
            out,
            resume,
            log_every,
        } => train(&config, &data, &out, resume.as_deref(), log_every)?,
        Cmd::Eval { checkpoint, data } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let model: Model<f32> = ck.to_model(None)?;
            let norm = checkpoint_normalization(&ck)?;
            let samples = load_dataset(&data)?.load_all()?;
            let cm = evaluate(&model, &samples, &norm)?;
            let m = cm.compute()?;
            emit(&m);
            emit(format!("tp={} fp={} fn={} tn={}", cm.tp, cm.fp, cm.fn_, cm.tn));
            emit(Metrics::csv_header());
            emit(m.csv_row());
        }
        Cmd::Predict { checkpoint, image, out } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let model: Model<f32> = ck.to_model(None)?;
            let norm = checkpoint_normalization(&ck)?;
            let img = read_image(&image)?;
            let mask = predict_mask(&model, &img, &norm)?;
            write_mask(&out, &mask)?;
            let over = overlay_path(&out);
            write_image(&over, &overlay(&img, &mask))?;
            emit(out.display());
            emit(over.display());
        }
        Cmd::Analyze { config, input_size } => {
            let (h, w) = parse_size(&input_size)?;
            let run = read_config(&config)?;
            let c = model_complexity(&run.model, h, w)?;
            emit(c.render_table().trim_end());
            emit(c.totals_line());
        }
    }
    Ok(())
}

/// Writes one stdout line; a closed pipe (`| head`) is not an error.
fn emit(line: impl Display) {
    let _ = writeln!(io::stdout().lock(), "{line}");
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(RunConfig::parse(&text)?)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parsed = match s.split_once(['x', 'X']) {
        Some((h, w)) => h.trim().parse().ok().zip(w.trim().parse().ok()),
        None => s.trim().parse().ok().map(|n| (n, n)),
    };
    match parsed {
        Some((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => bail!("usage error: --input-size expects N or HxW, got '{s}'"),
    }
}

fn overlay_path(mask_out: &Path) -> PathBuf {
    let stem = mask_out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    mask_out.with_file_name(format!("{stem}_overlay.png"))
}

struct Console {
    run: RunDir,
    log_every: usize,
    max_iters: usize,
}

impl ProgressSink for Console {
    fn iteration(&mut self, r: &LossRecord) -> hrsegnet::Result<()> {
        self.run.iteration(r)?;
        if self.log_every > 0 && ((r.iter + 1) % self.log_every == 0 || r.iter + 1 == self.max_iters) {
            eprintln!("iter {:>6}/{} lr {:.6} loss {:.5} primary {:.5}", r.iter + 1, self.max_iters, r.lr, r.total, r.primary);
        }
        Ok(())
    }

    fn checkpoint(&mut self, iter: usize, ck: &Checkpoint) -> hrsegnet::Result<()> {
        self.run.checkpoint(iter, ck)
    }
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>, log_every: usize) -> Result<()> {
    let run = read_config(config)?;
    let samples = load_dataset(data)?.load_all()?;
    let (mut model, mut trainer) = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let mut model: Model<f32> = ck.to_model(Some(&run.model))?;
            let trainer = Trainer::resume(&mut model, &ck, run.train.clone(), run.augment.clone())?;
            (model, trainer)
        }
        None => {
            let mut model: Model<f32> = build_model(&run.model, run.train.seed)?;
            let trainer = Trainer::new(&mut model, run.train.clone(), run.augment.clone())?;
            (model, trainer)
        }
    };
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    fs::write(out.join("config.txt"), run.to_text()).map_err(|e| Error::Io {
        path: out.join("config.txt"),
        source: e,
    })?;
    let mut sink = Console {
        run: RunDir::create(out, &run.model.aux_heads, resume.is_some())?,
        log_every,
        max_iters: run.train.max_iters,
    };
    train_loop(&mut model, &samples, &mut trainer, &mut sink)?;
    if let Some(last) = sink.run.checkpoints.last() {
        emit(last.display());
    }
    Ok(())
}
