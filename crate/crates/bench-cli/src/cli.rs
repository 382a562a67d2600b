//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use adv_attack::{attack_with_reference, AttackConfig};
use clap::{Parser, Subcommand};
use face_embedder::{pair_stats, train_embedder, IdentityDataset};
use image_transforms::{robustness_sweep, sweep_to_csv, standard_grid};
use serde_json::json;
use tensor_core::ModelParams;
use watermark_codec::{evaluate_codec, random_message, train_codec, Message, RelaxedMessage};

use crate::artifacts::{export_diff_images, read_png, ArtifactLog, DiffPair};
use crate::campaign::{
    epsilon_255, load_codec, pair_seed, parse_records_jsonl, records_jsonl, report_csv, report_markdown,
    run_attack_experiment, similarity_csv, aggregate, LoadedModels, PairRecord,
};
use crate::config::ExperimentConfig;
use crate::BenchError;

#[derive(Debug, Parser)]
#[command(name = "bench-cli", version, about = "Watermarking attack experiments on toy face matching")]
pub struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured datasets as PNG folders.
    GenData,
    /// Train the watermark codec and evaluate it on the held-out set.
    TrainCodec,
    /// Train the face embedder and report pair statistics.
    TrainEmbedder,
    /// Watermark one PNG image.
    Embed {
        #[arg(long)]
        image: PathBuf,
        /// Bitstring; a seeded random message when omitted.
        #[arg(long)]
        message: Option<String>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode the message bits of one PNG image.
    Extract {
        #[arg(long)]
        image: PathBuf,
    },
    /// Bit accuracy under crop, resize, brightness, contrast and JPEG.
    EvalRobustness {
        /// Use at most this many held-out images.
        #[arg(long)]
        images: Option<usize>,
    },
    /// Attack a single probe/reference pair.
    Attack {
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Budget in units of 1/255; defaults to the largest grid value.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Attack every pair at every budget of the grid.
    Campaign {
        /// Comma-separated budgets in units of 1/255.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Rebuild the tables from an existing per-pair log.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainCodec => "train-codec",
            Command::TrainEmbedder => "train-embedder",
            Command::Embed { .. } => "embed",
            Command::Extract { .. } => "extract",
            Command::EvalRobustness { .. } => "eval-robustness",
            Command::Attack { .. } => "attack",
            Command::Campaign { .. } => "campaign",
            Command::Report => "report",
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Usage errors print the usage text and return 2.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Defaults, then the config file, then the command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, BenchError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Command::Campaign { eps, pairs, workers } = &cli.command {
        if let Some(e) = eps {
            cfg.epsilon_grid = e.iter().map(|v| v / 255.0).collect();
        }
        if pairs.is_some() {
            cfg.max_pairs = *pairs;
        }
        if let Some(w) = workers {
            cfg.workers = *w;
        }
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<(), BenchError> {
    let cfg = resolve_config(&cli)?;
    let mut log = ArtifactLog::new(&cfg.out_dir);
    match &cli.command {
        Command::GenData => gen_data(&cfg, &mut log)?,
        Command::TrainCodec => cmd_train_codec(&cfg, &mut log)?,
        Command::TrainEmbedder => cmd_train_embedder(&cfg, &mut log)?,
        Command::Embed { image, message, output } => cmd_embed(&cfg, &mut log, image, message.as_deref(), output)?,
        Command::Extract { image } => cmd_extract(&cfg, &mut log, image)?,
        Command::EvalRobustness { images } => cmd_robustness(&cfg, &mut log, *images)?,
        Command::Attack { pair, eps } => cmd_attack(&cfg, &mut log, *pair, *eps)?,
        Command::Campaign { .. } => cmd_campaign(&cfg, &mut log)?,
        Command::Report => cmd_report(&mut log)?,
    }
    log.finish(cli.command.name(), &cfg)?;
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, log: &mut ArtifactLog) -> Result<(), BenchError> {
    for (split, spec) in [("train", &cfg.train_data), ("holdout", &cfg.holdout_data), ("eval", &cfg.eval_data)] {
        let data = spec.load()?;
        let mut counts = vec![0usize; data.labels.iter().max().map_or(0, |m| m + 1)];
        for (img, &id) in data.images.iter().zip(&data.labels) {
            log.write_png(Path::new("data").join(split).join(format!("id{id:04}")).join(format!("{:03}.png", counts[id])), img)?;
            counts[id] += 1;
        }
        println!("{split}: {} images of {} identities", data.len(), data.num_identities());
    }
    Ok(())
}

fn cmd_train_codec(cfg: &ExperimentConfig, log: &mut ArtifactLog) -> Result<(), BenchError> {
    let train = cfg.train_data.load()?;
    let holdout = cfg.holdout_data.load()?;
    let (codec, history) = train_codec(&train.images, cfg.codec.clone(), &cfg.codec_train)?;
    let dir = cfg.codec_path();
    codec.save(&dir)?;
    log.record(&dir);
    let eval = evaluate_codec(&codec, &holdout.images, cfg.seed)?;
    log.write_json("codec_train.json", &json!({ "history": history, "holdout": eval }))?;
    println!(
        "codec: held-out bit accuracy {:.4}, PSNR {:.2} dB over {} images",
        eval.bit_accuracy, eval.psnr_db, eval.n_images
    );
    Ok(())
}

fn cmd_train_embedder(cfg: &ExperimentConfig, log: &mut ArtifactLog) -> Result<(), BenchError> {
    let train = cfg.train_data.load()?;
    let eval = cfg.eval_data.load()?;
    let (emb, history) = train_embedder(&train, cfg.embedder.clone(), &cfg.embedder_train)?;
    let dir = cfg.embedder_path();
    emb.save(&dir)?;
    log.record(&dir);
    let stats = pair_stats(&emb, &eval)?;
    let acc = stats.accuracy(&cfg.matcher()?);
    log.write_json(
        "embedder_train.json",
        &json!({
            "loss": history,
            "genuine_mean": stats.genuine_mean(),
            "impostor_mean": stats.impostor_mean,
            "clean_accuracy": acc,
            "genuine": stats.genuine,
        }),
    )?;
    println!(
        "embedder: genuine mean {:.4}, impostor mean {:.4}, clean accuracy {:.2} at tau {}",
        stats.genuine_mean(),
        stats.impostor_mean,
        acc,
        cfg.tau
    );
    Ok(())
}

fn cmd_embed(
    cfg: &ExperimentConfig,
    log: &mut ArtifactLog,
    image: &Path,
    message: Option<&str>,
    output: &Path,
) -> Result<(), BenchError> {
    let codec = load_codec(&cfg.codec_path())?;
    let img = read_png(image)?;
    let m = match message {
        Some(bits) => Message::from_bitstring(bits)?,
        None => random_message(codec.message_bits(), cfg.seed)?,
    };
    let wm = codec.embed(&img, &RelaxedMessage::from(&m))?;
    let bytes = crate::artifacts::png_bytes(&wm)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| BenchError::io(parent, e))?;
    }
    std::fs::write(output, bytes).map_err(|e| BenchError::io(output, e))?;
    log.record(output);
    log.write_json(
        "embed.json",
        &json!({ "image": image, "output": output, "message": m.to_bitstring(), "mse": wm.mse(&img)? }),
    )?;
    println!("{}", m.to_bitstring());
    Ok(())
}

fn cmd_extract(cfg: &ExperimentConfig, log: &mut ArtifactLog, image: &Path) -> Result<(), BenchError> {
    let codec = load_codec(&cfg.codec_path())?;
    let img = read_png(image)?;
    let logits = codec.extract(&img)?;
    let bits = codec.extract_bits(&img)?;
    log.write_json(
        "extract.json",
        &json!({ "image": image, "message": bits.to_bitstring(), "logits": logits }),
    )?;
    println!("{}", bits.to_bitstring());
    Ok(())
}

fn cmd_robustness(cfg: &ExperimentConfig, log: &mut ArtifactLog, limit: Option<usize>) -> Result<(), BenchError> {
    let codec = load_codec(&cfg.codec_path())?;
    let mut images = cfg.holdout_data.load()?.images;
    if let Some(n) = limit {
        images.truncate(n);
    }
    let rows = robustness_sweep(&codec, &images, &standard_grid(), cfg.seed)?;
    let csv = sweep_to_csv(&rows);
    log.write("robustness.csv", csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn eval_pair(data: &IdentityDataset, pair: usize) -> Result<(usize, usize), BenchError> {
    data.pairs()
        .get(pair)
        .copied()
        .ok_or_else(|| BenchError::Config(format!("pair {pair} out of range")))
}

fn eps_label(eps: f64) -> String {
    format!("{}", epsilon_255(eps))
}

fn cmd_attack(cfg: &ExperimentConfig, log: &mut ArtifactLog, pair: usize, eps255: Option<f64>) -> Result<(), BenchError> {
    let models = LoadedModels::load(&cfg.codec_path(), &cfg.embedder_path())?;
    let data = cfg.eval_data.load()?;
    let (p, r) = eval_pair(&data, pair)?;
    let eps = match eps255 {
        Some(e) => e / 255.0,
        None => cfg.epsilon_grid[cfg.epsilon_grid.len() - 1],
    };
    let attack = AttackConfig {
        epsilon: eps,
        seed: pair_seed(cfg.seed, pair),
        ..cfg.attack.clone()
    };
    attack.validate()?;
    let matcher = cfg.matcher()?;
    let zr = models.embedder.embed_face(&data.images[r])?;
    let res = attack_with_reference(&data.images[p], &zr, models.models(), &attack, &matcher)?;
    let record = PairRecord::new(pair, p, r, cfg.tau, &attack, &res);
    let dir = PathBuf::from("attack").join(format!("pair{pair:04}_eps{}", eps_label(eps)));
    log.write_json(dir.join("result.json"), &record)?;
    if let Some(delta) = &res.delta {
        let diff = DiffPair {
            probe: &data.images[p],
            reference: &data.images[r],
            delta,
            epsilon: eps,
            message: &res.message,
        };
        export_diff_images(&diff, models.models(), log, &dir)?;
    }
    println!(
        "pair {pair} eps {}/255: s_pre_adv {:.4} s_post_adv {:.4} match_pre {} match_post {}",
        eps_label(eps),
        record.s_pre_adv,
        record.s_post_adv,
        record.match_pre,
        record.match_post
    );
    Ok(())
}

fn write_tables(log: &mut ArtifactLog, records: &[PairRecord]) -> Result<String, BenchError> {
    let rows = aggregate(records);
    log.write("report.csv", report_csv(&rows).as_bytes())?;
    log.write("similarity.csv", similarity_csv(records)?.as_bytes())?;
    let md = report_markdown(&rows, records);
    log.write("report.md", md.as_bytes())?;
    Ok(md)
}

fn cmd_campaign(cfg: &ExperimentConfig, log: &mut ArtifactLog) -> Result<(), BenchError> {
    let models = LoadedModels::load(&cfg.codec_path(), &cfg.embedder_path())?;
    let data = cfg.eval_data.load()?;
    let campaign = run_attack_experiment(cfg, &data, models.models())?;
    let records = campaign.records();
    log.write("pairs.jsonl", records_jsonl(&records)?.as_bytes())?;
    let md = write_tables(log, &records)?;
    for o in &campaign.outcomes {
        let Some(delta) = &o.delta else { continue };
        let rec = &o.record;
        let name = format!("pair{:04}_eps{}", rec.pair, eps_label(rec.epsilon));
        if cfg.save_deltas {
            let mut p = ModelParams::new();
            p.insert("delta", delta.to_tensor())?;
            let dir = cfg.out_dir.join("deltas").join(&name);
            p.save(&dir, &json!({ "epsilon": rec.epsilon, "pair": rec.pair }))?;
            log.record(&dir);
        }
        let largest = cfg.epsilon_grid[cfg.epsilon_grid.len() - 1];
        if rec.epsilon == largest && rec.pair < cfg.diff_pairs {
            let message = Message::from_bitstring(&rec.message)?;
            let diff = DiffPair {
                probe: &data.images[rec.probe_index],
                reference: &data.images[rec.reference_index],
                delta,
                epsilon: rec.epsilon,
                message: &message,
            };
            export_diff_images(&diff, models.models(), log, &Path::new("diff").join(&name))?;
        }
    }
    print!("{md}");
    Ok(())
}

fn cmd_report(log: &mut ArtifactLog) -> Result<(), BenchError> {
    let path = log.root().join("pairs.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| BenchError::io(&path, e))?;
    let records = parse_records_jsonl(&text)?;
    if records.is_empty() {
        return Err(BenchError::Config(format!("{} holds no records", path.display())));
    }
    log.record(&path);
    let md = write_tables(log, &records)?;
    print!("{md}");
    Ok(())
}
