//! `bitweight`: train, evaluate, export and run 1-bit-per-weight networks.

mod config;
mod image_input;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bitweight_core::data::{eval_batches, to_tensor, Split};
use bitweight_core::deploy::{
    export_packed_with, import_packed, infer, packed_file_size, read_meta, read_packed, sidecar_path, ExportOptions,
    InferenceNet, PackedModel, WeightEncoding, CONV_RECORD_BYTES, HEADER_BYTES, PACKED_MAGIC,
};
use bitweight_core::train::{
    evaluate, load_checkpoint, save_checkpoint, topk_misses, train_with_progress, Schedule, CHECKPOINT_MAGIC,
};
use bitweight_core::{Network, Tensor4};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{DatasetName, Mode, RunConfig, CHECKPOINT_FILE, PACKED_FILE, RUN_CONFIG_FILE};

#[derive(Parser)]
#[command(
    name = "bitweight",
    version,
    about = "Train and deploy networks with one bit per weight"
)]
struct Cli {
    /// Worker threads for tensor kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, env = "BITWEIGHT_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetName>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write log, checkpoint and (1-bit mode) packed model.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Cumulative epochs at a cycle end: 2, 6, 14, 30, 62, 126 or 254.
        #[arg(long)]
        epochs: Option<usize>,
        /// Enable 18×18 cutout.
        #[arg(long)]
        cutout: bool,
    },
    /// Top-1/top-5 error of a checkpoint or packed model.
    Eval {
        /// Checkpoint (`.b1wc`) or packed model (`.b1w`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Pack a 1-bit checkpoint into the deployment format.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file (default: model.b1w next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class probabilities for one image (PGM/PPM or raw record).
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Dump a packed model's header, layer records and size audit.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if !matches!(cli.command, Command::Train { .. }) {
        set_threads(cli.threads)?;
    }
    match cli.command {
        Command::Train {
            data,
            out_dir,
            seed,
            mode,
            epochs,
            cutout,
        } => {
            let mut cfg = resolve_config(&data, None)?;
            if let Some(v) = out_dir {
                cfg.out_dir = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = mode {
                cfg.mode = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            cfg.cutout |= cutout;
            cfg.threads = cli.threads.or(cfg.threads);
            cmd_train(cfg)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            cmd_eval(&checkpoint, &data, split)
        }
        Command::Export { checkpoint, out } => cmd_export(&checkpoint, out),
        Command::Infer { model, image } => cmd_infer(&model, &image),
        Command::Inspect { model } => cmd_inspect(&model),
    }
}

/// Config file (or the one saved next to `artifact`), then flag overrides.
fn resolve_config(data: &DataArgs, artifact: Option<&Path>) -> Result<RunConfig> {
    let saved = artifact
        .and_then(|p| p.parent())
        .map(|d| d.join(RUN_CONFIG_FILE))
        .filter(|p| p.exists());
    let mut cfg = match (&data.config, saved) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(&p)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(d) = &data.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(d) = data.dataset {
        cfg.dataset = d;
    }
    Ok(cfg)
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .context("configuring thread pool")?;
    }
    Ok(())
}

fn cmd_train(cfg: RunConfig) -> Result<()> {
    set_threads(cfg.threads)?;
    let ends = Schedule::standard(1).cycle_ends();
    if !ends.contains(&cfg.epochs) {
        bail!("--epochs must be one of {ends:?}, got {}", cfg.epochs);
    }
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    std::fs::write(cfg.out_dir.join(RUN_CONFIG_FILE), serde_json::to_vec_pretty(&cfg)?)?;

    let train_ds = cfg.load_split(Split::Train)?;
    let test_ds = cfg.load_split(Split::Test)?;
    let net_cfg = cfg.network_config();
    let mut net = Network::<f32>::new_initialized(&net_cfg)?;
    eprintln!(
        "training {} {}-{} ({} mode) on {} images for {} epochs",
        format!("{:?}", cfg.dataset).to_lowercase(),
        net_cfg.conv_layer_count(),
        net_cfg.width,
        if net_cfg.binarized { "1-bit" } else { "full-precision" },
        train_ds.len(),
        cfg.epochs
    );
    let tcfg = cfg.train_config();
    let outcome = train_with_progress(&mut net, &train_ds, Some(&test_ds), &tcfg, &mut |r| {
        let test = r.test_top1.map(|e| format!(" test_top1 {:.4}", e)).unwrap_or_default();
        eprintln!(
            "epoch {:>3} loss {:.4} train_err {:.4}{} lr {:.5} ({:.1}s)",
            r.epoch, r.train_loss, r.train_error, test, r.lr, r.wall_seconds
        );
    })?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &net, &outcome.optimizer, cfg.epochs as u64, outcome.steps)?;
    if cfg.mode == Mode::OneBit {
        let [_, h, w] = cfg.image_dims();
        let opts = ExportOptions {
            input_size: Some((h, w)),
            dataset: Some(format!("{:?}", cfg.dataset).to_lowercase()),
        };
        export_packed_with(&net, cfg.out_dir.join(PACKED_FILE), &opts)?;
    }
    let fe = outcome.log.final_eval.clone();
    let (top1, top5) = fe
        .as_ref()
        .map(|f| {
            (
                f.recomputed_top1.unwrap_or(f.ema_top1),
                f.recomputed_top5.unwrap_or(f.ema_top5),
            )
        })
        .unzip();
    println!(
        "{}",
        json!({ "top1": top1, "top5": top5, "final": fe, "checkpoint": ckpt, "out_dir": cfg.out_dir })
    );
    Ok(())
}

fn file_magic(path: &Path) -> Result<[u8; 4]> {
    use std::io::Read;
    let mut m = [0u8; 4];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut m))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(m)
}

fn packed_eval(net: &InferenceNet, ds: &bitweight_core::data::Dataset, batch: usize) -> Result<(f64, f64)> {
    let mut miss = (0, 0);
    for (x, y) in eval_batches::<f32>(ds, batch) {
        let m = topk_misses(&net.forward(&x)?, &y)?;
        miss = (miss.0 + m.0, miss.1 + m.1);
    }
    Ok((miss.0 as f64 / ds.len() as f64, miss.1 as f64 / ds.len() as f64))
}

fn cmd_eval(artifact: &Path, data: &DataArgs, split: Split) -> Result<()> {
    let cfg = resolve_config(data, Some(artifact))?;
    let ds = cfg.load_split(split)?;
    let magic = file_magic(artifact)?;
    let (top1, top5) = if &magic == PACKED_MAGIC {
        packed_eval(&import_packed(artifact)?, &ds, cfg.eval_batch_size)?
    } else if &magic == CHECKPOINT_MAGIC {
        let mut ck = load_checkpoint::<f32>(artifact)?;
        evaluate(&mut ck.network, &ds, cfg.eval_batch_size)?
    } else {
        bail!("{} is neither a checkpoint nor a packed model", artifact.display());
    };
    println!("{}", json!({ "top1": top1, "top5": top5, "count": ds.len() }));
    Ok(())
}

fn cmd_export(checkpoint: &Path, out: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint::<f32>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let out = out.unwrap_or_else(|| checkpoint.with_file_name(PACKED_FILE));
    let saved = checkpoint
        .parent()
        .map(|d| d.join(RUN_CONFIG_FILE))
        .filter(|p| p.exists());
    let opts = match saved {
        Some(p) => {
            let cfg = RunConfig::load(&p)?;
            let [_, h, w] = cfg.image_dims();
            ExportOptions {
                input_size: Some((h, w)),
                dataset: Some(format!("{:?}", cfg.dataset).to_lowercase()),
            }
        }
        None => ExportOptions::default(),
    };
    let model = export_packed_with(&ck.network, &out, &opts)?;
    println!(
        "{}",
        json!({ "packed": out, "sidecar": sidecar_path(&out), "payload_bytes": model.header.payload_bytes })
    );
    Ok(())
}

fn cmd_infer(model: &Path, image: &Path) -> Result<()> {
    let net = import_packed(model)?;
    let meta = net.meta();
    let Some((h, w)) = meta.input_size else {
        bail!("packed model has no recorded input size");
    };
    let (img, label) = image_input::read_image(image, [meta.config.input_channels, h, w])?;
    let mut x: Tensor4<f32> = to_tensor(&[img])?;
    let k = (meta.pixel_scale * 255.0) as f32;
    x.data_mut().iter_mut().for_each(|v| *v *= k);
    let probs = infer(&net, &x)?.remove(0);
    let top1 = probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (j, &p)| if p > b.1 { (j, p) } else { b })
        .0;
    println!("{}", json!({ "top1": top1, "probabilities": probs, "label": label }));
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let model = PackedModel::decode(&bytes).context("format check")?;
    let h = &model.header;
    println!("file            {}", path.display());
    println!("format version  {}", h.version);
    println!("conv layers     {}", h.conv_count);
    println!("bn layers       {}", h.bn_count);
    println!("payload bytes   {}", h.payload_bytes);
    println!();
    println!(
        "{:>5} {:>3} {:>5} {:>5} {:>6} {:>6} {:>12} {:>10} {:>9}",
        "layer", "F", "Cin", "Cout", "stride", "enc", "scale", "weights", "bytes"
    );
    for c in &model.convs {
        let enc = match c.encoding {
            WeightEncoding::Signs => "1bit",
            WeightEncoding::Float32 => "f32",
        };
        println!(
            "{:>5} {:>3} {:>5} {:>5} {:>6} {:>6} {:>12.6} {:>10} {:>9}",
            c.index,
            c.kernel,
            c.in_channels,
            c.out_channels,
            c.stride,
            enc,
            c.scale,
            c.weight_count(),
            c.payload_bytes()
        );
    }
    let bn_bytes: usize = model.bns.iter().map(|b| b.encoded_bytes()).sum();
    let expected = HEADER_BYTES + CONV_RECORD_BYTES * model.convs.len() + bn_bytes + h.payload_bytes as usize;
    let closed: u64 = model.convs.iter().map(|c| c.payload_bytes() as u64).sum();
    println!();
    println!("size audit");
    println!("  file bytes                 {}", bytes.len());
    println!("  header + records + payload {expected}");
    println!("  payload closed form        {closed}");
    println!("  f32 weight bytes           {}", model.float_weight_bytes());
    if h.payload_bytes > 0 {
        println!(
            "  reduction vs f32           {:.2}x",
            model.float_weight_bytes() as f64 / h.payload_bytes as f64
        );
    }
    if bytes.len() != expected || closed != h.payload_bytes {
        bail!("size audit failed");
    }
    if sidecar_path(path).exists() {
        let meta = read_meta(path)?;
        let from_cfg = packed_file_size(&meta.config)?;
        println!("  size from config           {from_cfg}");
        if from_cfg != bytes.len() as u64 {
            bail!("size audit failed: config implies {from_cfg} bytes");
        }
        InferenceNet::from_packed(&read_packed(path)?, meta).context("integrity check")?;
        println!("integrity       ok");
    } else {
        println!("integrity       skipped (no sidecar)");
    }
    Ok(())
}
