use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dpcnet_core::checkpoint::{load_checkpoint, save_checkpoint};
use dpcnet_core::data::{load_png, save_png, synthetic_corpus, Corpus};
use dpcnet_core::gradcheck::{network_check, op_suite};
use dpcnet_core::graph::set_corrupt_backward;
use dpcnet_core::metrics::{format_db, psnr_y, ssim_y};
use dpcnet_core::net::{DpcNet, ModelConfig};
use dpcnet_core::train::{train_loop, StepRecord, TrainSink};
use dpcnet_core::{Error, OpKind, ParamStore};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: Error },

    #[error("{0}")]
    Data(String),

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Checkpoint { .. } => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Checkpoint(_) => 2,
                Error::Image(_) => 3,
                Error::NonFiniteLoss { .. } => 4,
                _ => 1,
            },
            CliError::Data(_) => 3,
            CliError::GradCheck(_) => 5,
            CliError::Io { .. } => 1,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes every step to `metrics.log` and checkpoints next to it.
struct DirSink {
    dir: PathBuf,
    log: BufWriter<File>,
    total: u64,
}

impl TrainSink for DirSink {
    fn record(&mut self, rec: &StepRecord) -> dpcnet_core::Result<()> {
        writeln!(self.log, "{rec}")?;
        if rec.psnr.is_some() {
            println!("{rec} patch={} batch={}", rec.patch, rec.batch);
        }
        Ok(())
    }

    fn checkpoint(&mut self, step: u64, store: &ParamStore<f32>) -> dpcnet_core::Result<()> {
        self.log.flush()?;
        let name = if step == self.total {
            "model.dpcn".to_string()
        } else {
            format!("checkpoint_{step:06}.dpcn")
        };
        let path = self.dir.join(name);
        save_checkpoint(store, &path)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = Corpus::load_dir(&cfg.data_root)?;
    let largest = cfg.train.schedule.stages.iter().map(|s| s.patch).max().unwrap_or(0);
    if let Some(p) = corpus
        .pairs
        .iter()
        .find(|p| p.height() < largest || p.width() < largest)
    {
        return Err(CliError::Data(format!(
            "pair `{}` is {}x{}, smaller than the {largest}-pixel training patch",
            p.id,
            p.height(),
            p.width()
        )));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(io_at(&cfg.out_dir))?;
    let cfg_path = cfg.out_dir.join("run.cfg");
    fs::write(&cfg_path, cfg.render()).map_err(io_at(&cfg_path))?;
    let log_path = cfg.out_dir.join("metrics.log");
    let log = File::create(&log_path).map_err(io_at(&log_path))?;
    let mut sink = DirSink {
        dir: cfg.out_dir.clone(),
        log: BufWriter::new(log),
        total: cfg.train.schedule.total_steps,
    };
    println!("training on {} pairs from {}", corpus.len(), cfg.data_root.display());
    train_loop(&cfg.train, &corpus, &mut sink)?;
    sink.log.flush().map_err(io_at(&log_path))?;
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_at(dir))? {
        let path = entry.map_err(io_at(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Builds the configured model and loads `checkpoint` into it.
fn load_model(model: &ModelConfig, checkpoint: &Path) -> Result<(DpcNet, ParamStore<f32>), CliError> {
    let (net, mut store) = DpcNet::init::<f32>(model, 0)?;
    load_checkpoint(&mut store, checkpoint).map_err(|source| CliError::Checkpoint {
        path: checkpoint.to_path_buf(),
        source,
    })?;
    Ok((net, store))
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: &Path) -> Result<(), CliError> {
    let (net, store) = load_model(&cfg.train.model, checkpoint)?;
    let inputs = if input.is_dir() {
        let files = png_files(input)?;
        if files.is_empty() {
            return Err(CliError::Data(format!("no PNG files in {}", input.display())));
        }
        files
    } else {
        vec![input.to_path_buf()]
    };
    fs::create_dir_all(output).map_err(io_at(output))?;
    for path in inputs {
        let rainy = load_png(&path)?;
        let derained = net.infer_any_size(&store, &rainy)?;
        let out = output.join(format!("{}_derained.png", stem(&path)));
        save_png(&derained, &out)?;
        println!("{} -> {}", path.display(), out.display());
    }
    Ok(())
}

fn index_by_id(dir: &Path, strip: &str) -> Result<BTreeMap<String, PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("not a directory: {}", dir.display())));
    }
    Ok(png_files(dir)?
        .into_iter()
        .map(|p| {
            let s = stem(&p);
            let id = s.strip_suffix(strip).map_or(s.clone(), str::to_string);
            (id, p)
        })
        .collect())
}

pub fn eval(pred: &Path, gt: &Path) -> Result<(), CliError> {
    let gt_dir = if gt.join("clean").is_dir() {
        gt.join("clean")
    } else {
        gt.to_path_buf()
    };
    let preds = index_by_id(pred, "_derained")?;
    let truths = index_by_id(&gt_dir, "")?;
    let unmatched: Vec<&str> = preds
        .keys()
        .filter(|id| !truths.contains_key(*id))
        .chain(truths.keys().filter(|id| !preds.contains_key(*id)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(CliError::Data(format!("unmatched image ids: {}", unmatched.join(", "))));
    }
    if preds.is_empty() {
        return Err(CliError::Data(format!(
            "no images to compare between {} and {}",
            pred.display(),
            gt_dir.display()
        )));
    }
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (id, p) in &preds {
        let a = load_png(p)?;
        let b = load_png(&truths[id])?;
        if a.shape() != b.shape() {
            return Err(CliError::Data(format!(
                "`{id}`: prediction {:?} and ground truth {:?} differ in shape",
                a.shape(),
                b.shape()
            )));
        }
        let psnr = psnr_y(&a, &b)?;
        let ssim = ssim_y(&a, &b)?;
        println!("{id} psnr={} ssim={ssim:.6}", format_db(psnr));
        psnr_sum += psnr;
        ssim_sum += ssim;
    }
    let n = preds.len() as f64;
    println!("mean_psnr={} mean_ssim={:.6}", format_db(psnr_sum / n), ssim_sum / n);
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, corrupt: Option<&str>) -> Result<(), CliError> {
    if let Some(name) = corrupt {
        let kind = OpKind::from_name(name)
            .ok_or_else(|| CliError::Core(Error::Config(format!("--corrupt-backward: unknown op `{name}`"))))?;
        set_corrupt_backward(Some(kind));
    }
    let mut reports = op_suite(&cfg.gradcheck)?;
    for r in &reports {
        println!("{r}");
    }
    let net = network_check(&ModelConfig::gradcheck(), &cfg.gradcheck)?;
    println!("{net}");
    reports.push(net);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::GradCheck(failed))
    }
}

pub fn synth(out: &Path, count: usize, first_index: usize, size: usize, seed: u64) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Data("synth needs --count of at least 1".into()));
    }
    let corpus = synthetic_corpus(count, first_index, size, seed)?;
    corpus.save_dir(out)?;
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}
