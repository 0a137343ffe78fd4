use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use foldnet::analysis::{drop_layers, evaluate, evaluate_across_schedules, layer_sensitivity};
use foldnet::engine::{
    count_schedules, enumerate_schedules, FoldMask, FoldableEncoder, UnfoldSchedule,
};
use foldnet::io::checkpoint::{load_checkpoint, save_checkpoint, sha256_hex, CheckpointMeta};
use foldnet::io::config::RunConfig;
use foldnet::io::data::{generate_dataset, generate_split, Example, Split};
use foldnet::trainer::{Trainer, METRICS_HEADER};

#[derive(Parser)]
#[command(
    name = "foldnet",
    version,
    about = "Train and analyse foldable sequence encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue an interrupted run from its checkpoint.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Start a fresh run from a checkpoint's weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Token error of a checkpoint at one depth or one schedule.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(
            long,
            conflicts_with = "schedule",
            required_unless_present = "schedule"
        )]
        depth: Option<usize>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// List every schedule reaching a depth.
    Schedules {
        #[arg(long)]
        physical: usize,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        mask: Option<String>,
    },
    /// Per-layer error when bypassed, optionally writing a pruned checkpoint.
    Sensitivity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        keep: Option<usize>,
        /// Where to write the pruned checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Mean, std and median error over all schedules per depth.
    Curve {
        #[arg(long)]
        ckpt: PathBuf,
        /// Inclusive range `A..B` or a single depth.
        #[arg(long)]
        depths: String,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Write the synthetic dataset of a run config as TSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            resume,
            init,
        } => train(&config, resume.as_deref(), init.as_deref()),
        Command::Eval {
            ckpt,
            depth,
            schedule,
            split,
        } => eval(&ckpt, depth, schedule.as_deref(), &split),
        Command::Schedules {
            physical,
            depth,
            mask,
        } => schedules(physical, depth, mask.as_deref()),
        Command::Sensitivity {
            ckpt,
            keep,
            out,
            split,
        } => sensitivity(&ckpt, keep, out, &split),
        Command::Curve {
            ckpt,
            depths,
            split,
        } => curve(&ckpt, &depths, &split),
        Command::GenData { config } => gen_data(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn train(config: &Path, resume: Option<&Path>, init: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config).with_context(|| format!("config {}", config.display()))?;
    let mc = cfg.model_config();
    let (model, step) = match (resume, init) {
        (Some(path), _) => {
            let (model, meta) = load_checkpoint(path)?;
            if meta.model != mc {
                bail!("checkpoint model does not match the config");
            }
            (model, meta.step)
        }
        (None, Some(path)) => {
            let (model, _) = load_checkpoint(path)?;
            if model.n_physical() != mc.n_physical || model.config().block != mc.block {
                bail!("initial checkpoint does not match the config's layer layout");
            }
            let model = model.with_unfolding(mc.max_depth, mc.mask.clone())?;
            if model.config() != &mc {
                bail!("initial checkpoint does not match the config");
            }
            (model, 0)
        }
        (None, None) => (FoldableEncoder::new(mc, cfg.trainer.seed)?, 0),
    };
    let data = generate_dataset(&cfg.data, cfg.model.vocab)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("output dir {}", dir.display()))?;
    let metrics_path = dir.join("metrics.csv");
    let mut log = String::new();
    if resume.is_some() && metrics_path.exists() {
        log = fs::read_to_string(&metrics_path)?;
    } else {
        log.push_str(METRICS_HEADER);
        log.push('\n');
    }
    let mut csv = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)?;
    csv.write_all(log.as_bytes())?;

    let mut trainer = Trainer::resume(model, cfg.trainer.clone(), cfg.criterion.clone(), step)?;
    let mut best = f64::INFINITY;
    let rows = trainer.run(&data.train, &data.dev, |row, model| {
        let line = row.csv();
        writeln!(csv, "{line}")?;
        csv.flush()?;
        log.push_str(&line);
        log.push('\n');
        let mut meta = CheckpointMeta::new(model, Some(cfg.data.clone()), row.step);
        meta.metrics_digest = sha256_hex(log.as_bytes());
        save_checkpoint(model, &meta, &dir.join("last.ckpt"))?;
        if row.dev_err_max < best {
            best = row.dev_err_max;
            save_checkpoint(model, &meta, &dir.join("best.ckpt"))?;
        }
        Ok(())
    })?;
    let mut meta = CheckpointMeta::new(&trainer.model, Some(cfg.data.clone()), trainer.step);
    meta.metrics_digest = sha256_hex(log.as_bytes());
    save_checkpoint(&trainer.model, &meta, &dir.join("final.ckpt"))?;
    if let Some(last) = rows.last() {
        eprintln!(
            "step {} dev_err_seed {:.4} dev_err_max {:.4}",
            last.step, last.dev_err_seed, last.dev_err_max
        );
    }
    Ok(())
}

fn eval_set(meta: &CheckpointMeta, split: &str) -> Result<Vec<Example>> {
    let split: Split = split.parse()?;
    let data = meta
        .data
        .as_ref()
        .context("checkpoint carries no data section")?;
    let count = match split {
        Split::Train => data.train_size,
        Split::Dev => data.dev_size,
        Split::Test => data.test_size,
    };
    if count == 0 {
        bail!("{split:?} split is empty");
    }
    Ok(generate_split(data, meta.model.vocab, split, count)?)
}

fn quoted(s: &UnfoldSchedule) -> String {
    format!("\"{s}\"")
}

fn eval(ckpt: &Path, depth: Option<usize>, schedule: Option<&str>, split: &str) -> Result<()> {
    let (model, meta) = load_checkpoint(ckpt)?;
    let set = eval_set(&meta, split)?;
    let out = std::io::stdout();
    let mut out = BufWriter::new(out.lock());
    writeln!(out, "kind,depth,schedule,token_error")?;
    if let Some(text) = schedule {
        let s = UnfoldSchedule::parse(text, model.mask().clone())?;
        let err = evaluate(&model, &s, &set, None)?;
        writeln!(
            out,
            "schedule,{},{},{err:.6}",
            s.logical_depth(),
            quoted(&s)
        )?;
    } else if let Some(depth) = depth {
        let report = evaluate_across_schedules(&model, depth, &set)?;
        for (s, m) in report.schedules.iter().zip(&report.metrics) {
            writeln!(out, "schedule,{depth},\"{s}\",{m:.6}")?;
        }
        writeln!(out, "mean,{depth},,{:.6}", report.mean)?;
        writeln!(out, "std,{depth},,{:.6}", report.std)?;
        writeln!(
            out,
            "median,{depth},\"{}\",{:.6}",
            report.schedules[report.median_index], report.median
        )?;
    }
    out.flush()?;
    Ok(())
}

fn schedules(physical: usize, depth: usize, mask: Option<&str>) -> Result<()> {
    let mask = match mask {
        Some(m) => m.parse::<FoldMask>()?,
        None => FoldMask::all(physical),
    };
    if mask.len() != physical {
        bail!(
            "mask has {} entries for {physical} physical layers",
            mask.len()
        );
    }
    let count = count_schedules(physical, depth, &mask);
    if count == 0 {
        bail!(
            "depth unreachable: {physical} physical layers with {} foldable cannot reach depth {depth}",
            mask.foldable_count()
        );
    }
    let out = std::io::stdout();
    let mut out = BufWriter::new(out.lock());
    for s in enumerate_schedules(physical, depth, &mask)? {
        writeln!(out, "{s}")?;
    }
    out.flush()?;
    eprintln!("count: {count}");
    Ok(())
}

fn sensitivity(
    ckpt: &Path,
    keep: Option<usize>,
    out_path: Option<PathBuf>,
    split: &str,
) -> Result<()> {
    let (model, meta) = load_checkpoint(ckpt)?;
    let set = eval_set(&meta, split)?;
    let report = layer_sensitivity(&model, &set)?;
    let out = std::io::stdout();
    let mut out = BufWriter::new(out.lock());
    writeln!(out, "layer_index,metric_when_dropped,drop_rank")?;
    for (i, (m, r)) in report.metrics.iter().zip(report.ranks()).enumerate() {
        writeln!(out, "{i},{m:.6},{r}")?;
    }
    out.flush()?;
    if let Some(k) = keep {
        let pruned = drop_layers(&model, &report, k)?;
        let path = out_path.unwrap_or_else(|| ckpt.with_extension(format!("keep{k}.ckpt")));
        let meta = CheckpointMeta::new(&pruned, meta.data.clone(), 0);
        save_checkpoint(&pruned, &meta, &path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_depths(text: &str) -> Result<Vec<usize>> {
    let bad = || format!("depths must look like A..B, got {text:?}");
    let (a, b) = match text.split_once("..") {
        Some((a, b)) => (a, b),
        None => (text, text),
    };
    let a: usize = a.trim().parse().with_context(bad)?;
    let b: usize = b.trim().parse().with_context(bad)?;
    if a > b {
        bail!(bad());
    }
    Ok((a..=b).collect())
}

fn curve(ckpt: &Path, depths: &str, split: &str) -> Result<()> {
    let (model, meta) = load_checkpoint(ckpt)?;
    let set = eval_set(&meta, split)?;
    let depths = parse_depths(depths)?;
    let reports = depths
        .iter()
        .map(|&d| evaluate_across_schedules(&model, d, &set).with_context(|| format!("depth {d}")))
        .collect::<Result<Vec<_>>>()?;
    let out = std::io::stdout();
    let mut out = BufWriter::new(out.lock());
    writeln!(out, "depth,mean,std,median")?;
    for r in reports {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.depth, r.mean, r.std, r.median
        )?;
    }
    out.flush()?;
    Ok(())
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn gen_data(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config).with_context(|| format!("config {}", config.display()))?;
    let data = generate_dataset(&cfg.data, cfg.model.vocab)?;
    let dir = cfg.output_dir.join("data");
    fs::create_dir_all(&dir)?;
    for (name, split) in [
        ("train", &data.train),
        ("dev", &data.dev),
        ("test", &data.test),
    ] {
        let mut f = BufWriter::new(File::create(dir.join(format!("{name}.tsv")))?);
        writeln!(f, "tokens\ttarget")?;
        for ex in split {
            writeln!(f, "{}\t{}", join(&ex.tokens), join(&ex.target))?;
        }
        f.flush()?;
        eprintln!("{name}: {} examples", split.len());
    }
    Ok(())
}
