use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rsmamba::io::{
    export_dataset, load_checkpoint, read_raw, save_checkpoint, write_atomic, DataSource, KvFile, RawTensorDataset,
    RunSettings,
};
use rsmamba::model::{count_parameters, Model, ModelConfig};
use rsmamba::multipath::ShuffleSeed;
use rsmamba::train::ablation::{run_ablation, AblationSettings, Suite};
use rsmamba::train::{argmax, evaluate, train_with, Dataset, EpochLog, InMemoryDataset, TrainError};
use rsmamba::selftest;

#[derive(Parser)]
#[command(name = "rsmamba", version, about = "Selective state space image classifier: train, evaluate, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, the epoch log and a manifest
    Train {
        #[command(flatten)]
        io: IoFlags,
        #[command(flatten)]
        settings: SettingFlags,
    },
    /// Evaluate a checkpoint and print its metrics report
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which synthetic split to score: train or val
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        io: IoFlags,
        #[command(flatten)]
        settings: SettingFlags,
    },
    /// Print the predicted class of raw-tensor images
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Raw-tensor image file; repeatable
        #[arg(long)]
        input: Vec<PathBuf>,
        #[command(flatten)]
        io: IoFlags,
    },
    /// Run one directional ablation suite and print its table
    Ablate {
        /// head, paths, pe or tokens
        #[arg(long)]
        suite: Option<String>,
        /// Number of consecutive seeds, starting at --seed
        #[arg(long)]
        seeds: Option<String>,
        #[command(flatten)]
        io: IoFlags,
        #[command(flatten)]
        settings: SettingFlags,
    },
    /// Run the built-in oracle suites; exits nonzero on any failure
    Selftest {
        #[arg(long)]
        seed: Option<String>,
        #[command(flatten)]
        io: IoFlags,
    },
    /// Print the parameter count of a model configuration
    Params {
        #[command(flatten)]
        io: IoFlags,
        #[command(flatten)]
        settings: SettingFlags,
    },
    /// Write the synthetic train and validation sets as raw-tensor datasets
    GenSynth {
        #[command(flatten)]
        io: IoFlags,
        #[command(flatten)]
        settings: SettingFlags,
    },
}

#[derive(Args)]
struct IoFlags {
    /// Flat `key = value` file mirroring the flag names; flags win
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory; receives `manifest.kv` and the command's artifacts
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

macro_rules! setting_flags {
    ($($field:ident => $key:literal: $help:literal),* $(,)?) => {
        #[derive(Args, Default)]
        #[command(next_help_heading = "Run settings")]
        struct SettingFlags {
            $(
                #[arg(long = $key, value_name = "VALUE", help = $help)]
                $field: Option<String>,
            )*
        }

        impl SettingFlags {
            fn to_kv(&self) -> KvFile {
                let mut kv = KvFile::new();
                $(
                    if let Some(v) = &self.$field {
                        kv.set($key, v);
                    }
                )*
                kv
            }
        }
    };
}

setting_flags! {
    preset => "preset": "base, large, huge or none",
    classes => "classes": "number of classes",
    blocks => "blocks": "number of blocks",
    hidden => "hidden": "hidden size d",
    intermediate => "intermediate": "mixer inner width",
    rank => "rank": "time-step rank",
    state => "state": "state size",
    conv_width => "conv-width": "causal convolution width",
    image => "image": "square image extent",
    image_height => "image-height": "image height",
    image_width => "image-width": "image width",
    kernel => "kernel": "patch kernel",
    stride => "stride": "patch stride",
    pe => "pe": "none, fourier or learnable",
    head => "head": "mean-pool, cls-head, cls-tail, cls-head-tail or cls-middle",
    paths => "paths": "forward, forward-reverse or all",
    fusion => "fusion": "mean or gate",
    pre_norm => "pre-norm": "layer norm before each mixer (true/false)",
    simplified_b => "simplified-b": "first-order input discretization (true/false)",
    lr => "lr": "peak learning rate",
    weight_decay => "weight-decay": "decoupled weight decay",
    warmup => "warmup": "warmup steps, or none for 5% of all steps",
    epochs => "epochs": "training epochs",
    batch_size => "batch-size": "batch size",
    seed => "seed": "training seed (shuffling, data order)",
    eval_seed => "eval-seed": "shuffle-path seed used at evaluation",
    crop_padding => "crop-padding": "random-crop padding in pixels",
    hflip => "hflip": "random horizontal flips (true/false)",
    vflip => "vflip": "random vertical flips (true/false)",
    threads => "threads": "worker threads",
    target_train_acc => "target-train-acc": "stop once train accuracy reaches this, or none",
    eval_train => "eval-train": "score the training set every epoch (true/false)",
    init_seed => "init-seed": "parameter initialization seed",
    data => "data": "synthetic or raw",
    synth_per_class => "synth-per-class": "synthetic training samples per class",
    synth_val_per_class => "synth-val-per-class": "synthetic validation samples per class",
    synth_seed => "synth-seed": "synthetic data seed (validation uses seed + 1)",
    noise => "noise": "synthetic noise standard deviation",
    amplitude => "amplitude": "synthetic grating amplitude",
    radii => "radii": "synthetic grating radii as `a,b`",
    train_index => "train-index": "raw-tensor training index",
    val_index => "val-index": "raw-tensor validation index, or none",
}

/// File values overlaid with flags; `command` in the file must match.
fn gather(command: &str, io: &IoFlags, flags: KvFile) -> Result<KvFile> {
    let mut kv = match &io.config {
        Some(path) => KvFile::read(path)?,
        None => KvFile::new(),
    };
    kv.merge(&flags);
    if let Some(c) = kv.remove("command") {
        if c != command {
            bail!("config was written for `{c}`, not `{command}`");
        }
    }
    Ok(kv)
}

/// Removes and returns a command-level key.
fn take(kv: &mut KvFile, key: &str) -> Option<String> {
    kv.remove(key)
}

fn flag(kv: &mut KvFile, key: &str, value: &Option<String>) {
    if let Some(v) = value {
        kv.set(key, v);
    }
}

fn out_dir(kv: &mut KvFile, io: &IoFlags) -> Option<PathBuf> {
    let file_out = take(kv, "out").map(PathBuf::from);
    io.out.clone().or(file_out)
}

fn write_manifest(dir: &Path, command: &str, mut kv: KvFile) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    kv.set("command", command);
    kv.set("out", dir.display());
    let text = format!(
        "# rsmamba {} manifest; rerun with `rsmamba {command} --config <this file>`\n{kv}",
        env!("CARGO_PKG_VERSION")
    );
    write_atomic(&dir.join("manifest.kv"), text.as_bytes())?;
    Ok(())
}

fn datasets(s: &RunSettings) -> Result<(Box<dyn Dataset>, Option<Box<dyn Dataset>>)> {
    Ok(match &s.data {
        DataSource::Synthetic(synth) => {
            let (train, val) = synth.specs(&s.model);
            train.class_bins()?;
            let val: Option<Box<dyn Dataset>> = (synth.val_per_class > 0).then(|| Box::new(val) as Box<dyn Dataset>);
            (Box::new(train), val)
        }
        DataSource::Raw { train_index, val_index } => {
            let open = |p: &Path| -> Result<InMemoryDataset> {
                Ok(RawTensorDataset::open(p, Some(s.model.num_classes))?)
            };
            let val: Option<Box<dyn Dataset>> = match val_index {
                Some(p) => Some(Box::new(open(p)?)),
                None => None,
            };
            (Box::new(open(train_index)?), val)
        }
    })
}

fn cmd_train(io: IoFlags, flags: SettingFlags) -> Result<()> {
    let mut kv = gather("train", &io, flags.to_kv())?;
    let out = out_dir(&mut kv, &io).ok_or_else(|| anyhow!("train needs --out DIR"))?;
    let s = RunSettings::from_kv(&kv)?;
    s.model.validate()?;
    let (train_set, val_set) = datasets(&s)?;
    write_manifest(&out, "train", s.to_kv())?;

    let mut log_text = String::new();
    let model = Model::<f32>::init(s.model.clone(), s.init_seed)?;
    let result = train_with(model, &s.train, train_set.as_ref(), val_set.as_deref(), &mut |e: &EpochLog| {
        println!("{}", e.summary());
        log_text.push_str(&e.summary());
        log_text.push('\n');
    });
    write_atomic(&out.join("log.txt"), log_text.as_bytes())?;
    match result {
        Ok(outcome) => {
            let ckpt = out.join("model.ckpt");
            save_checkpoint(&ckpt, &outcome.model, &outcome.norm, s.init_seed)?;
            println!(
                "warmup_steps = {}\ntotal_steps = {}\ncheckpoint = {}",
                outcome.warmup_steps,
                outcome.total_steps,
                ckpt.display()
            );
            if let Some(val) = outcome.log.last().and_then(|e| e.val.as_ref()) {
                write_atomic(&out.join("metrics.txt"), val.to_string().as_bytes())?;
            }
            let json = serde_json::to_vec_pretty(&outcome.log)?;
            write_atomic(&out.join("log.json"), &json)?;
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            step,
            last_good,
            ..
        }) => {
            let path = out.join("last_good.ckpt");
            let norm = rsmamba::train::NormStats::compute(train_set.as_ref())?;
            save_checkpoint(&path, &last_good, &norm, s.init_seed)?;
            bail!(
                "training diverged at epoch {epoch}, step {step}; last good parameters saved to {}",
                path.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

fn load_model(path: &Path) -> Result<(Model<f32>, rsmamba::train::NormStats, u64)> {
    let ckpt = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let (norm, seed) = (ckpt.header.norm, ckpt.header.seed);
    Ok((ckpt.into_model()?, norm, seed))
}

fn cmd_eval(checkpoint: Option<PathBuf>, split: Option<String>, io: IoFlags, flags: SettingFlags) -> Result<()> {
    let mut kv = gather("eval", &io, flags.to_kv())?;
    flag(&mut kv, "checkpoint", &checkpoint.map(|p| p.display().to_string()));
    flag(&mut kv, "split", &split);
    let ckpt = take(&mut kv, "checkpoint").ok_or_else(|| anyhow!("eval needs --checkpoint FILE"))?;
    let split = take(&mut kv, "split").unwrap_or_else(|| "val".into());
    let out = out_dir(&mut kv, &io);
    let (model, norm, _) = load_model(Path::new(&ckpt))?;
    let mut s = RunSettings {
        model: model.config().clone(),
        ..RunSettings::default()
    };
    s.apply(&kv)?;
    if s.model != *model.config() {
        bail!("model settings differ from the checkpoint's configuration");
    }
    let (train_set, val_set) = datasets(&s)?;
    let ds = match split.as_str() {
        "train" => train_set,
        "val" => val_set.ok_or_else(|| anyhow!("no validation data configured"))?,
        other => bail!("unknown split `{other}` (expected train or val)"),
    };
    let report = evaluate(&model, ds.as_ref(), &norm, s.train.eval_seed, s.train.threads)?;
    print!("{report}");
    if let Some(dir) = out {
        let mut m = s.to_kv();
        m.set("checkpoint", &ckpt);
        m.set("split", &split);
        write_manifest(&dir, "eval", m)?;
        write_atomic(&dir.join("metrics.txt"), report.to_string().as_bytes())?;
    }
    Ok(())
}

fn cmd_predict(checkpoint: Option<PathBuf>, inputs: Vec<PathBuf>, io: IoFlags) -> Result<()> {
    let mut kv = gather("predict", &io, KvFile::new())?;
    flag(&mut kv, "checkpoint", &checkpoint.map(|p| p.display().to_string()));
    let ckpt = take(&mut kv, "checkpoint").ok_or_else(|| anyhow!("predict needs --checkpoint FILE"))?;
    let mut inputs: Vec<PathBuf> = inputs;
    if let Some(list) = take(&mut kv, "input") {
        inputs.extend(list.split(',').map(|p| PathBuf::from(p.trim())));
    }
    let eval_seed: u64 = take(&mut kv, "eval-seed").map(|v| v.parse()).transpose()?.unwrap_or(0);
    let out = out_dir(&mut kv, &io);
    if let Some(k) = kv.keys().next() {
        bail!("unknown key `{k}` for predict");
    }
    if inputs.is_empty() {
        bail!("predict needs at least one --input FILE");
    }
    let (model, norm, _) = load_model(Path::new(&ckpt))?;
    let cfg: &ModelConfig = model.config();
    for path in &inputs {
        let img = read_raw(path)?;
        if img.shape() != [cfg.image_height, cfg.image_width, 3] {
            bail!(
                "{}: image is {:?}, the model expects [{}, {}, 3]",
                path.display(),
                img.shape(),
                cfg.image_height,
                cfg.image_width
            );
        }
        let logits = model.logits(&norm.apply(&img), ShuffleSeed::Eval { seed: eval_seed })?;
        println!("{} {}", path.display(), argmax(logits.data()));
    }
    if let Some(dir) = out {
        let mut m = KvFile::new();
        m.set("checkpoint", &ckpt);
        m.set(
            "input",
            inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
        );
        m.set("eval-seed", eval_seed);
        write_manifest(&dir, "predict", m)?;
    }
    Ok(())
}

fn cmd_ablate(suite: Option<String>, seeds: Option<String>, io: IoFlags, flags: SettingFlags) -> Result<()> {
    let mut kv = gather("ablate", &io, flags.to_kv())?;
    flag(&mut kv, "suite", &suite);
    flag(&mut kv, "seeds", &seeds);
    let suite: Suite = take(&mut kv, "suite")
        .ok_or_else(|| anyhow!("ablate needs --suite (head, paths, pe or tokens)"))?
        .parse()
        .map_err(|e: String| anyhow!(e))?;
    let count: usize = take(&mut kv, "seeds").map(|v| v.parse()).transpose()?.unwrap_or(3);
    let out = out_dir(&mut kv, &io);
    let seed: u64 = kv.parse_value("seed")?.unwrap_or(0);
    let mut run = AblationSettings::desk(seed).to_run();
    run.apply(&kv)?;
    let settings = AblationSettings::from_run(&run, count)?;
    let table = run_ablation(suite, &settings)?;
    print!("{table}");
    if let Some(dir) = out {
        let mut m = settings.to_run().to_kv();
        m.set("suite", suite);
        m.set("seeds", count);
        write_manifest(&dir, "ablate", m)?;
        write_atomic(&dir.join(format!("{suite}.md")), table.to_string().as_bytes())?;
        write_atomic(&dir.join(format!("{suite}.json")), &serde_json::to_vec_pretty(&table)?)?;
    }
    Ok(())
}

fn cmd_selftest(seed: Option<String>, io: IoFlags) -> Result<bool> {
    let mut kv = gather("selftest", &io, KvFile::new())?;
    flag(&mut kv, "seed", &seed);
    let seed: u64 = take(&mut kv, "seed").map(|v| v.parse()).transpose()?.unwrap_or(0);
    let out = out_dir(&mut kv, &io);
    if let Some(k) = kv.keys().next() {
        bail!("unknown key `{k}` for selftest");
    }
    let report = selftest::run(seed);
    println!("{report}");
    if let Some(dir) = out {
        let mut m = KvFile::new();
        m.set("seed", seed);
        write_manifest(&dir, "selftest", m)?;
        write_atomic(&dir.join("selftest.txt"), report.to_string().as_bytes())?;
    }
    Ok(report.passed())
}

fn cmd_params(io: IoFlags, flags: SettingFlags) -> Result<()> {
    let mut kv = gather("params", &io, flags.to_kv())?;
    let out = out_dir(&mut kv, &io);
    let s = RunSettings::from_kv(&kv)?;
    s.model.validate()?;
    println!("{}", count_parameters(&s.model));
    if let Some(dir) = out {
        write_manifest(&dir, "params", s.to_kv())?;
    }
    Ok(())
}

fn cmd_gen_synth(io: IoFlags, flags: SettingFlags) -> Result<()> {
    let mut kv = gather("gen-synth", &io, flags.to_kv())?;
    let out = out_dir(&mut kv, &io).ok_or_else(|| anyhow!("gen-synth needs --out DIR"))?;
    let s = RunSettings::from_kv(&kv)?;
    let DataSource::Synthetic(synth) = &s.data else {
        bail!("gen-synth writes synthetic data; drop `data = raw`");
    };
    let (train, val) = synth.specs(&s.model);
    train.class_bins()?;
    write_manifest(&out, "gen-synth", s.to_kv())?;
    let t = export_dataset(&train, &out.join("train"))?;
    println!("{} samples -> {}", train.len(), t.display());
    if synth.val_per_class > 0 {
        let v = export_dataset(&val, &out.join("val"))?;
        println!("{} samples -> {}", val.len(), v.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { io, settings } => cmd_train(io, settings).map(|_| true),
        Command::Eval {
            checkpoint,
            split,
            io,
            settings,
        } => cmd_eval(checkpoint, split, io, settings).map(|_| true),
        Command::Predict { checkpoint, input, io } => cmd_predict(checkpoint, input, io).map(|_| true),
        Command::Ablate {
            suite,
            seeds,
            io,
            settings,
        } => cmd_ablate(suite, seeds, io, settings).map(|_| true),
        Command::Selftest { seed, io } => cmd_selftest(seed, io),
        Command::Params { io, settings } => cmd_params(io, settings).map(|_| true),
        Command::GenSynth { io, settings } => cmd_gen_synth(io, settings).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
