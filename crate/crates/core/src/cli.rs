//! Command-line front end: `train`, `eval`, `gradcheck`, `synth`, `distmat`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{self, load_dataset, DatasetSplits, ImageSet, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::exec::{self, Exec};
use crate::gradsuite;
use crate::model::{checkpoint, EpanModel};
use crate::tensor::Tensor;
use crate::trainer::{self, EpochLog, TrainOptions};

pub const THREADS_ENV: &str = "EPAN_THREADS";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const REPORT_FILE: &str = "eval_report.csv";

#[derive(Debug, Parser)]
#[command(name = "epan", version, about = "Dual-branch re-identification with learned affine alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a Market1501-layout dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Allow writing into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Rank the query split against the gallery and write CMC/mAP.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path; defaults to `<output.dir>/eval_report.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        /// First seed; the suite runs `--seeds` consecutive seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Skip the full-model objective.
        #[arg(long)]
        primitives_only: bool,
    },
    /// Emit the synthetic misalignment benchmark.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Stripe-wise block distance matrix between two images' feature maps.
    Distmat {
        #[arg(long = "imgA", alias = "img-a")]
        img_a: PathBuf,
        #[arg(long = "imgB", alias = "img-b")]
        img_b: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "distmat_out")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        blocks: usize,
        /// Feature map: `input`, `tap2` or `tap4`.
        #[arg(long, default_value = "tap2")]
        layer: String,
        #[arg(long)]
        force: bool,
    },
}

fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::config(
                "output.dir",
                format!("{} is not empty; pass --force to write into it", dir.display()),
            ));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Worker count from the config, overridden by `EPAN_THREADS`.
fn setup_threads(configured: usize) -> Result<Exec> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(THREADS_ENV, format!("`{v}` is not a positive integer")))?,
        Err(_) => configured.max(1),
    };
    exec::init_threads(n);
    Ok(if n > 1 { Exec::Parallel } else { Exec::Sequential })
}

fn run_exec(cfg: &RunConfig) -> Result<Exec> {
    let e = setup_threads(cfg.threads())?;
    Ok(if cfg.exec() == Exec::Sequential { Exec::Sequential } else { e })
}

fn load_splits(cfg: &RunConfig) -> Result<DatasetSplits> {
    let root = cfg.data_root()?;
    let splits = load_dataset(&root)?;
    for r in &splits.rejects {
        eprintln!("warning: skipping unparseable file {}", r.display());
    }
    if let Some(manifest) = cfg.expected_counts() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let expected = data::market::parse_counts_manifest(&text)?;
        let diffs = data::market::compare_counts(splits.counts(), expected);
        if !diffs.is_empty() {
            return Err(Error::config("data.expected_counts", diffs.join("; ")));
        }
    }
    Ok(splits)
}

fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

pub fn cmd_train(config: &Path, force: bool) -> Result<Vec<EpochLog>> {
    let cfg = RunConfig::load(config)?;
    let exec = run_exec(&cfg)?;
    let out = cfg.output_dir()?;
    let splits = load_splits(&cfg)?;
    let mc = cfg.model_config(2)?;
    let train = ImageSet::from_records(&splits.train, mc.input_h, mc.input_w)?;
    if train.is_empty() {
        return Err(Error::config("data.root", "training split is empty"));
    }
    let (_, classes) = train.class_labels();
    let mut model = EpanModel::new(cfg.model_config(classes)?, cfg.seed())?;
    let aug = cfg.aug_config(train.channel_mean()?);
    prepare_output(&out, force)?;
    cfg.write_resolved(&out)?;
    let every = cfg.checkpoint_every();
    let epochs = cfg.optim_config()?.epochs;
    let mut hook = |epoch: usize, m: &EpanModel| -> Result<()> {
        let done = epoch + 1;
        if every > 0 && done % every == 0 && done < epochs {
            checkpoint::save(m, &checkpoint_dir(&out, done))?;
        }
        Ok(())
    };
    let opts = TrainOptions {
        exec,
        record_wall_time: cfg.record_wall_time(),
    };
    let log = trainer::train(
        &mut model,
        &train,
        &cfg.loss_config()?,
        &cfg.optim_config()?,
        &aug,
        &opts,
        Some(&mut hook),
    )?;
    trainer::write_log_csv(&out.join(LOG_FILE), &log)?;
    checkpoint::save(&model, &out.join(FINAL_CHECKPOINT))?;
    for e in &log {
        println!("epoch {:>4}  loss {:.6}  lr {:.3e}", e.epoch, e.mean_loss, e.lr);
    }
    println!(
        "trained {} epochs on {} images / {classes} identities; artifacts in {}",
        log.len(),
        train.len(),
        out.display()
    );
    Ok(log)
}

fn load_checkpoint(path: &Path) -> Result<EpanModel> {
    if !path.join(checkpoint::INDEX_FILE).is_file() {
        return Err(Error::config(
            "checkpoint",
            format!("no checkpoint at {}", path.display()),
        ));
    }
    checkpoint::load(path)
}

fn raw_pixels(set: &ImageSet) -> Result<Tensor> {
    let d = set.images.first().map_or(1, Tensor::numel);
    let rows: Vec<f64> = set.images.iter().flat_map(|i| i.data().iter().copied()).collect();
    Tensor::new(&[set.len(), d], rows)
}

pub fn cmd_eval(config: &Path, ckpt: &Path, output: Option<&Path>, force: bool) -> Result<EvalReport> {
    let cfg = RunConfig::load(config)?;
    let exec = run_exec(&cfg)?;
    let model = load_checkpoint(ckpt)?;
    let splits = load_splits(&cfg)?;
    let (h, w) = (model.config.input_h, model.config.input_w);
    let query = ImageSet::from_records(&splits.query, h, w)?;
    let gallery = ImageSet::from_records(&splits.gallery, h, w)?;
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Evaluation("query or gallery split is empty".into()));
    }
    let feats = |set: &ImageSet| -> Result<Tensor> {
        if cfg.raw_pixel_embedding() {
            raw_pixels(set)
        } else {
            let refs: Vec<&Tensor> = set.images.iter().collect();
            model.infer_embedding(&refs, cfg.eval_batch(), exec)
        }
    };
    let metric = cfg.metric();
    let dist = eval::distance_matrix(&feats(&query)?, &feats(&gallery)?, metric, exec)?;
    for (what, rows) in [("query", &dist.flagged_queries), ("gallery", &dist.flagged_gallery)] {
        if !rows.is_empty() {
            eprintln!("warning: {} zero-norm {what} descriptors treated as maximally distant", rows.len());
        }
    }
    let report = eval::evaluate(
        &dist.matrix,
        &query.pids,
        &query.camids,
        &gallery.pids,
        &gallery.camids,
        cfg.max_rank(),
        metric,
        exec,
    )?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => cfg.output_dir()?.join(REPORT_FILE),
    };
    if path.exists() && !force {
        return Err(Error::config(
            "output.dir",
            format!("{} exists; pass --force to overwrite", path.display()),
        ));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    println!(
        "rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  mAP {:.4}  ({} valid queries, {} without a match)",
        report.rank(1),
        report.rank(5),
        report.rank(10),
        report.map,
        report.num_valid_queries,
        report.num_invalid_queries
    );
    Ok(report)
}

pub fn cmd_gradcheck(seed: u64, count: u64, primitives_only: bool) -> Result<()> {
    let exec = setup_threads(1)?;
    let seeds: Vec<u64> = (seed..seed + count.max(1)).collect();
    let mut results = gradsuite::run_primitives(&seeds, exec)?;
    if !primitives_only {
        results.extend(gradsuite::run_model(&seeds, exec)?);
    }
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:>4}  {:<24} max rel err {:.3e}  (tol {:.0e}, {} seeds)",
            r.name, r.max_rel_error, r.tolerance, r.seeds
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric {
            index: 0,
            message: format!("gradient check failed for {}", failed.join(", ")),
        })
    }
}

pub fn cmd_synth(spec: &Path, out: &Path, force: bool) -> Result<()> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    let spec = SynthSpec::parse(&text)?;
    let ds = data::generate_synthetic(&spec)?;
    prepare_output(out, force)?;
    ds.write(out)?;
    let count = |s| ds.split(s).count();
    println!(
        "wrote {} train / {} query / {} gallery images to {}",
        count(data::Split::Train),
        count(data::Split::Query),
        count(data::Split::Gallery),
        out.display()
    );
    Ok(())
}

fn feature_map(model: &EpanModel, img: &Tensor, layer: &str) -> Result<Tensor> {
    let c = &model.config;
    let img = if img.shape()[1..] == [c.input_h, c.input_w] {
        img.clone()
    } else {
        data::resize(img, c.input_h, c.input_w)?
    };
    if layer == "input" {
        return Ok(img);
    }
    let out = model.run_eval(&[&img], Exec::Sequential)?;
    let t = match layer {
        "tap2" => out.tap2,
        "tap4" => out.tap4,
        other => {
            return Err(Error::config("layer", format!("unknown layer `{other}` (input, tap2, tap4)")))
        }
    };
    Ok(t.select0(0))
}

pub fn cmd_distmat(a: &Path, b: &Path, ckpt: &Path, out: &Path, blocks: usize, layer: &str, force: bool) -> Result<Tensor> {
    let model = load_checkpoint(ckpt)?;
    let fa = feature_map(&model, &data::load_image(a)?, layer)?;
    let fb = feature_map(&model, &data::load_image(b)?, layer)?;
    let m = eval::block_distance_matrix(&fa, &fb, blocks)?;
    prepare_output(out, force)?;
    eval::write_block_matrix(&m, &out.join("block_matrix.csv"), &out.join("block_matrix.pgm"))?;
    print!("{}", eval::matrix_csv(&m));
    Ok(m)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, force } => cmd_train(&config, force).map(drop),
        Command::Eval {
            config,
            checkpoint,
            output,
            force,
        } => cmd_eval(&config, &checkpoint, output.as_deref(), force).map(drop),
        Command::Gradcheck {
            seed,
            seeds,
            primitives_only,
        } => cmd_gradcheck(seed, seeds, primitives_only),
        Command::Synth { spec, out, force } => cmd_synth(&spec, &out, force),
        Command::Distmat {
            img_a,
            img_b,
            checkpoint,
            out,
            blocks,
            layer,
            force,
        } => cmd_distmat(&img_a, &img_b, &checkpoint, &out, blocks, &layer, force).map(drop),
    }
}
