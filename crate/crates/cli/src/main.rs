use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ssvc_annotate::{import_task_files, ServiceConfig};
use ssvc_core::data::{
    read_captions, read_features, read_split, synth_generate, tokenize, write_split, CaptionSet,
    SynthSpec,
};
use ssvc_core::experiment::{ablate, caption_dataset, train_run, AblationRow, RunConfig};
use ssvc_core::gradcheck::gradcheck;
use ssvc_core::metrics::{corpus_bleu, read_judgments, ss_aggregate};
use ssvc_core::network::{load_checkpoint, SsvcConfig};

#[derive(Parser)]
#[command(
    name = "ssvc",
    version,
    about = "Video captioning with stacked attention"
)]
struct Cli {
    /// Seed for data generation, initialization and shuffling. Overrides
    /// the seed in a run config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 15 frames of 4096-d features, 2x256 encoder, 512 decoder.
    Full,
    /// Small model for the synthetic corpus.
    Desk,
    /// Tiny model used by gradient checks.
    Mini,
}

#[derive(Subcommand)]
enum Command {
    /// Print a run config to start from.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
    },
    /// Write a synthetic train/val corpus.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 32)]
        val: usize,
        #[arg(long, default_value_t = 4)]
        objects: usize,
        #[arg(long, default_value_t = 4)]
        actions: usize,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        #[arg(long, default_value_t = 24)]
        dim: usize,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoints and metrics.jsonl to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory with train (and optionally val) splits.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the last checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Caption every video in a feature file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus BLEU of `{id: caption}` against `{id: [references]}`.
    EvalBleu {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Aggregate caption score of a judgment store.
    Score {
        #[arg(long)]
        store: PathBuf,
    },
    /// Train one variant per encoder depth and SHP width.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,8")]
        shp: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        json: bool,
    },
    /// Build the annotation task file from generated captions.
    ImportTasks {
        /// `{video_id: caption}`, as written by `infer`.
        #[arg(long)]
        captions: PathBuf,
        /// `{video_id: url}`
        #[arg(long)]
        manifest: PathBuf,
        /// Optional `{video_id: [references]}` shown when enabled in `serve`.
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        tasks: PathBuf,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, default_value_t = 2)]
        required_annotators: usize,
        /// Show reference captions to annotators.
        #[arg(long)]
        show_references: bool,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_run(path: &Path, seed: Option<u64>, epochs: Option<usize>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut run: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = seed {
        run.seed = s;
    }
    if let Some(e) = epochs {
        run.epochs = e;
    }
    Ok(run)
}

fn data_dir(flag: Option<PathBuf>, run: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| run.paths.data_dir.clone())
        .ok_or_else(|| anyhow!("no data directory: pass --data or set paths.data_dir"))
}

fn has_split(dir: &Path, split: &str) -> bool {
    dir.join(format!("{split}.captions.json")).exists()
}

fn gen_synth(
    seed: u64,
    out: &Path,
    (n_train, n_val): (usize, usize),
    (objects, actions, frames, dim): (usize, usize, usize, usize),
    force: bool,
) -> Result<()> {
    let files = [
        "train.svft",
        "train.captions.json",
        "val.svft",
        "val.captions.json",
    ];
    if !force {
        if let Some(f) = files.iter().find(|f| out.join(f).exists()) {
            bail!(
                "{} exists; pass --force to overwrite",
                out.join(f).display()
            );
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ds = synth_generate(&SynthSpec {
        seed,
        n_samples: n_train + n_val,
        n_objects: objects,
        n_actions: actions,
        frames,
        dim,
    })?;
    let vocab = ds.build_vocab();
    let (train, val) = ds.split_tail(n_val);
    write_split(out, "train", &train).with_context(|| format!("writing to {}", out.display()))?;
    write_split(out, "val", &val)?;
    print_json(&serde_json::json!({
        "out": out,
        "seed": seed,
        "train_videos": train.videos.len(),
        "val_videos": val.videos.len(),
        "frames": frames,
        "feature_dim": dim,
        "vocab_size": vocab.len(),
    }))
}

fn train(
    cli_seed: Option<u64>,
    config: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    resume: bool,
) -> Result<()> {
    let run = load_run(config, cli_seed, epochs)?;
    let dir = data_dir(data, &run)?;
    let out = out
        .or_else(|| run.paths.out_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set paths.out_dir"))?;
    let train = read_split(&dir, "train")
        .with_context(|| format!("loading train split from {}", dir.display()))?;
    let val = if has_split(&dir, "val") {
        Some(read_split(&dir, "val")?)
    } else {
        None
    };
    let outcome = train_run(&run, &train, val.as_ref(), Some(&out), resume, |m| {
        let mut line = format!("epoch {:>4}  train_loss {:.5}", m.epoch, m.train_loss);
        if let (Some(l), Some(em), Some(b)) = (m.val_loss, m.val_exact_match, &m.val_bleu) {
            line += &format!("  val_loss {l:.5}  exact {em:.3}  bleu4 {:.4}", b.bleu4);
        }
        eprintln!("{line}");
    })?;
    print_json(&serde_json::json!({
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "stopped_early": outcome.stopped_early,
        "final": outcome.history.last(),
        "out": out,
    }))
}

fn infer(checkpoint: &Path, features: &Path, out: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint, None)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let videos =
        read_features(features).with_context(|| format!("reading {}", features.display()))?;
    let cfg = &ck.params.config;
    for v in &videos {
        if v.num_frames() != cfg.frames_per_seq || v.feature_dim() != cfg.feature_dim {
            bail!(
                "video `{}` is [{}, {}] but the checkpoint expects [{}, {}] (frames_per_seq, feature_dim)",
                v.id,
                v.num_frames(),
                v.feature_dim(),
                cfg.frames_per_seq,
                cfg.feature_dim
            );
        }
    }
    let captions = caption_dataset(&ck.params, &ck.vocab, &videos)?;
    let text = serde_json::to_string_pretty(&captions)?;
    match out {
        Some(p) => {
            fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn eval_bleu(candidates: &Path, references: &Path) -> Result<()> {
    let text = fs::read_to_string(candidates)
        .with_context(|| format!("reading {}", candidates.display()))?;
    let cands: BTreeMap<String, String> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", candidates.display()))?;
    let refs: CaptionSet = read_captions(references)?;
    let missing_refs: Vec<&str> = cands
        .keys()
        .filter(|k| !refs.contains_key(*k))
        .map(String::as_str)
        .collect();
    let missing_cands: Vec<&str> = refs
        .keys()
        .filter(|k| !cands.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing_refs.is_empty() || !missing_cands.is_empty() {
        bail!(
            "id sets differ; no references for [{}]; no candidate for [{}]",
            missing_refs.join(", "),
            missing_cands.join(", ")
        );
    }
    let c: Vec<Vec<String>> = cands.values().map(|s| tokenize(s)).collect();
    let r: Vec<Vec<Vec<String>>> = cands
        .keys()
        .map(|k| refs[k].iter().map(|s| tokenize(s)).collect())
        .collect();
    print_json(&corpus_bleu(&c, &r)?)
}

fn score(store: &Path) -> Result<()> {
    let records = read_judgments(store).with_context(|| format!("reading {}", store.display()))?;
    print_json(&ss_aggregate(&records).context("no judgments to score")?)
}

fn write_ablation(out: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(
        out.join("ablation.json"),
        serde_json::to_string_pretty(rows)? + "\n",
    )?;
    Ok(())
}

fn run_ablate(
    cli_seed: Option<u64>,
    config: &Path,
    data: Option<PathBuf>,
    out: &Path,
    layers: &[usize],
    shp: &[usize],
    epochs: Option<usize>,
) -> Result<()> {
    let run = load_run(config, cli_seed, epochs)?;
    let dir = data_dir(data, &run)?;
    let train = read_split(&dir, "train")?;
    if !has_split(&dir, "val") {
        bail!("ablation needs a val split in {}", dir.display());
    }
    let val = read_split(&dir, "val")?;
    let rows = ablate(&run, &train, &val, layers, shp)?;
    write_ablation(out, &rows)?;
    println!(
        "{:>6} {:>4} {:>9} {:>9} {:>6} {:>7} {:>7} {:>7} {:>7} {:>8}  config",
        "layers", "shp", "train", "val", "exact", "bleu1", "bleu2", "bleu3", "bleu4", "seconds"
    );
    for r in &rows {
        println!(
            "{:>6} {:>4} {:>9.5} {:>9.5} {:>6.3} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8.1}  {}",
            r.enc_layers,
            r.shp_units,
            r.final_train_loss,
            r.val_loss,
            r.exact_match,
            r.bleu1,
            r.bleu2,
            r.bleu3,
            r.bleu4,
            r.wall_seconds,
            &r.config_hash[..12]
        );
    }
    Ok(())
}

fn run_gradcheck(seed: u64, json: bool) -> Result<bool> {
    let report = gradcheck(seed)?;
    if json {
        print_json(&report)?;
    } else {
        for c in &report.checks {
            println!(
                "{}  {:<24} max_rel_err {:.3e}  (tol {:.0e}, {} partials)",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.max_relative_error,
                c.tolerance,
                c.partials
            );
        }
    }
    Ok(report.passed)
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::InitConfig { preset, epochs } => {
            let model = match preset {
                Preset::Full => SsvcConfig::full(0),
                Preset::Desk => SsvcConfig::desk(0),
                Preset::Mini => SsvcConfig::mini(),
            };
            let mut run = RunConfig::new(model, seed, epochs);
            if matches!(preset, Preset::Desk) {
                run.target_exact_match = Some(0.9);
            }
            print_json(&run)?;
        }
        Command::GenSynth {
            out,
            train,
            val,
            objects,
            actions,
            frames,
            dim,
            force,
        } => gen_synth(
            seed,
            &out,
            (train, val),
            (objects, actions, frames, dim),
            force,
        )?,
        Command::Train {
            config,
            data,
            out,
            epochs,
            resume,
        } => train(cli.seed, &config, data, out, epochs, resume)?,
        Command::Infer {
            checkpoint,
            features,
            out,
        } => infer(&checkpoint, &features, out)?,
        Command::EvalBleu {
            candidates,
            references,
        } => eval_bleu(&candidates, &references)?,
        Command::Score { store } => score(&store)?,
        Command::Ablate {
            config,
            data,
            out,
            layers,
            shp,
            epochs,
        } => run_ablate(cli.seed, &config, data, &out, &layers, &shp, epochs)?,
        Command::Gradcheck { json } => return run_gradcheck(seed, json),
        Command::ImportTasks {
            captions,
            manifest,
            references,
            tasks,
        } => {
            let added = import_task_files(&captions, &manifest, references.as_deref(), &tasks)?;
            eprintln!("{added} new task(s) in {}", tasks.display());
        }
        Command::Serve {
            tasks,
            store,
            bind,
            required_annotators,
            show_references,
        } => {
            let mut config = ServiceConfig::new(tasks, store);
            config.bind = bind;
            config.required_annotators = required_annotators;
            config.show_references = show_references;
            tokio::runtime::Runtime::new()?.block_on(ssvc_annotate::serve(config))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
