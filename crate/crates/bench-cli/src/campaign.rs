//! Attack campaigns over an epsilon grid and their pure aggregations.

use std::fmt::Write as _;
use std::path::Path;

use adv_attack::{attack_with_reference, AttackConfig, AttackResult, ConstraintReport, Models};
use face_embedder::{Embedder, IdentityDataset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tensor_core::Image;
use watermark_codec::Codec;

use crate::config::ExperimentConfig;
use crate::BenchError;

pub const RECORD_SCHEMA: u32 = 1;
pub const REPORT_CSV_HEADER: &str = "epsilon,epsilon_255,accuracy_without_watermark,accuracy_with_watermark,reduction,n_pairs";
pub const SIMILARITY_CSV_HEADER: &str = "epsilon,condition,similarity";

/// Reference rows of the full-scale experiment: (epsilon x 255, without, with, reduction).
pub const FULL_SCALE_REFERENCE: [(f64, f64, f64, f64); 2] = [(2.0, 92.2, 25.0, 67.2), (4.0, 98.3, 2.4, 95.9)];
pub const REFERENCE_BLOCK_LABEL: &str = "paper (full-scale) — not expected to match desk scale";

/// Trained models, loaded from checkpoints.
pub struct LoadedModels {
    pub codec: Codec,
    pub embedder: Embedder,
}

impl LoadedModels {
    pub fn models(&self) -> Models<'_> {
        Models {
            codec: &self.codec,
            embedder: &self.embedder,
        }
    }

    /// Loads both checkpoints, failing with a "train first" error when one is missing.
    pub fn load(codec_dir: &Path, embedder_dir: &Path) -> Result<Self, BenchError> {
        let codec = load_codec(codec_dir)?;
        let embedder = load_embedder(embedder_dir)?;
        Ok(LoadedModels { codec, embedder })
    }
}

fn require_checkpoint(dir: &Path, what: &'static str, command: &'static str) -> Result<(), BenchError> {
    if dir.join("manifest.json").is_file() {
        Ok(())
    } else {
        Err(BenchError::TrainFirst {
            what,
            path: dir.to_path_buf(),
            command,
        })
    }
}

pub fn load_codec(dir: &Path) -> Result<Codec, BenchError> {
    require_checkpoint(dir, "codec", "train-codec")?;
    Ok(Codec::load(dir)?)
}

pub fn load_embedder(dir: &Path) -> Result<Embedder, BenchError> {
    require_checkpoint(dir, "embedder", "train-embedder")?;
    Ok(Embedder::load(dir)?)
}

/// One attacked pair at one budget, as written to the per-pair log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub schema: u32,
    pub epsilon: f64,
    pub pair: usize,
    pub probe_index: usize,
    pub reference_index: usize,
    pub tau: f64,
    pub s_pre_clean: f64,
    pub s_pre_adv: f64,
    pub s_post_adv: f64,
    pub s_post_initial: f64,
    pub match_pre: bool,
    pub match_post: bool,
    /// Final rounded message as a bitstring.
    pub message: String,
    pub initial_message: String,
    pub delta_linf: f64,
    pub loss_trace: Vec<f64>,
    pub constraints: ConstraintReport,
    /// Attack configuration used for this pair, including its derived seed.
    pub attack: AttackConfig,
}

impl PairRecord {
    pub fn new(pair: usize, probe: usize, reference: usize, tau: f64, cfg: &AttackConfig, r: &AttackResult) -> Self {
        PairRecord {
            schema: RECORD_SCHEMA,
            epsilon: cfg.epsilon,
            pair,
            probe_index: probe,
            reference_index: reference,
            tau,
            s_pre_clean: r.s_pre_clean,
            s_pre_adv: r.s_pre_adv,
            s_post_adv: r.s_post_adv,
            s_post_initial: r.s_post_initial,
            match_pre: r.match_pre,
            match_post: r.match_post,
            message: r.message.to_bitstring(),
            initial_message: r.initial_message.to_bitstring(),
            delta_linf: r.delta_linf,
            loss_trace: r.loss_trace.clone(),
            constraints: r.constraints.clone(),
            attack: cfg.clone(),
        }
    }
}

/// One row of the accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub epsilon: f64,
    /// Percent of pairs matched before watermarking.
    pub accuracy_without_watermark: f64,
    /// Percent of pairs matched after watermarking.
    pub accuracy_with_watermark: f64,
    /// `accuracy_without_watermark - accuracy_with_watermark`, percentage points.
    pub reduction: f64,
    pub n_pairs: usize,
}

/// A pair with its perturbed result, handed to image export.
pub struct PairOutcome {
    pub record: PairRecord,
    pub delta: Option<Image>,
}

pub struct Campaign {
    pub rows: Vec<ReportRow>,
    pub outcomes: Vec<PairOutcome>,
}

impl Campaign {
    pub fn records(&self) -> Vec<PairRecord> {
        self.outcomes.iter().map(|o| o.record.clone()).collect()
    }
}

/// Per-pair attack seed: the run seed xor the pair index.
pub fn pair_seed(seed: u64, pair: usize) -> u64 {
    seed ^ pair as u64
}

/// Attacks every probe/reference pair at every budget of `config`. Pairs run
/// on `config.workers` threads; results come back in (epsilon, pair) order so
/// the output does not depend on the worker count. Perturbations are kept for
/// the image-dump pairs at the largest budget, or for all pairs when
/// `save_deltas` is set.
pub fn run_attack_experiment(
    config: &ExperimentConfig,
    data: &IdentityDataset,
    models: Models,
) -> Result<Campaign, BenchError> {
    config.validate()?;
    let matcher = config.matcher()?;
    let attack = &config.attack;
    let epsilon_grid = &config.epsilon_grid;
    let largest = epsilon_grid[epsilon_grid.len() - 1];
    let keep_delta = |eps: f64, i: usize| config.save_deltas || (eps == largest && i < config.diff_pairs);
    let mut pairs = data.pairs();
    if let Some(n) = config.max_pairs {
        pairs.truncate(n);
    }
    if pairs.is_empty() {
        return Err(BenchError::Config("evaluation set has no probe/reference pairs".into()));
    }
    let refs = pairs
        .iter()
        .map(|&(_, r)| models.embedder.embed_face(&data.images[r]))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(f64, usize)> = epsilon_grid
        .iter()
        .flat_map(|&e| (0..pairs.len()).map(move |i| (e, i)))
        .collect();
    let run = |&(eps, i): &(f64, usize)| -> Result<PairOutcome, BenchError> {
        let (p, r) = pairs[i];
        let cfg = AttackConfig {
            epsilon: eps,
            seed: pair_seed(attack.seed, i),
            ..attack.clone()
        };
        let res = attack_with_reference(&data.images[p], &refs[i], models, &cfg, &matcher)?;
        if res.constraints.violations() > 0 {
            return Err(BenchError::Constraint {
                epsilon: eps,
                pair: i,
                report: res.constraints.clone(),
            });
        }
        Ok(PairOutcome {
            record: PairRecord::new(i, p, r, matcher.tau, &cfg, &res),
            delta: if keep_delta(eps, i) { res.delta } else { None },
        })
    };
    let outcomes: Vec<PairOutcome> = if config.workers <= 1 {
        jobs.iter().map(run).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_, _>>())?
    };
    let records: Vec<PairRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    Ok(Campaign {
        rows: aggregate(&records),
        outcomes,
    })
}

/// Accuracy rows from a per-pair log, one per distinct epsilon in order of
/// first appearance.
pub fn aggregate(records: &[PairRecord]) -> Vec<ReportRow> {
    let mut eps: Vec<f64> = Vec::new();
    for r in records {
        if !eps.iter().any(|e| e.to_bits() == r.epsilon.to_bits()) {
            eps.push(r.epsilon);
        }
    }
    eps.into_iter()
        .map(|e| {
            let rs: Vec<&PairRecord> = records.iter().filter(|r| r.epsilon.to_bits() == e.to_bits()).collect();
            let n = rs.len();
            let pct = |k: usize| 100.0 * k as f64 / n as f64;
            let without = pct(rs.iter().filter(|r| r.match_pre).count());
            let with = pct(rs.iter().filter(|r| r.match_post).count());
            ReportRow {
                epsilon: e,
                accuracy_without_watermark: without,
                accuracy_with_watermark: with,
                reduction: without - with,
                n_pairs: n,
            }
        })
        .collect()
}

/// Budget in units of 1/255, rounded to 6 decimals for display.
pub fn epsilon_255(eps: f64) -> f64 {
    (eps * 255.0 * 1e6).round() / 1e6
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epsilon,
            epsilon_255(r.epsilon),
            r.accuracy_without_watermark,
            r.accuracy_with_watermark,
            r.reduction,
            r.n_pairs
        );
    }
    s
}

/// Long-format similarity table, two rows per record.
pub fn similarity_csv(records: &[PairRecord]) -> Result<String, BenchError> {
    if records.is_empty() {
        return Err(BenchError::Config("no results to export".into()));
    }
    let mut s = String::from(SIMILARITY_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},without_watermarking,{}", r.epsilon, r.s_pre_adv);
        let _ = writeln!(s, "{},with_watermarking,{}", r.epsilon, r.s_post_adv);
    }
    Ok(s)
}

/// Writes the long-format similarity table to `out_path`.
pub fn export_similarity_distributions(records: &[PairRecord], out_path: &Path) -> Result<(), BenchError> {
    let csv = similarity_csv(records)?;
    std::fs::write(out_path, csv).map_err(|e| BenchError::io(out_path, e))
}

/// One JSON object per line.
pub fn records_jsonl(records: &[PairRecord]) -> Result<String, BenchError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| BenchError::Config(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_records_jsonl(text: &str) -> Result<Vec<PairRecord>, BenchError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: PairRecord =
                serde_json::from_str(l).map_err(|e| BenchError::Config(format!("log line {}: {e}", i + 1)))?;
            if r.schema != RECORD_SCHEMA {
                return Err(BenchError::Config(format!(
                    "log line {} has schema {}, expected {RECORD_SCHEMA}",
                    i + 1,
                    r.schema
                )));
            }
            Ok(r)
        })
        .collect()
}

fn fmt1(v: f64) -> String {
    format!("{v:.1}")
}

/// Markdown summary with the full-scale reference numbers as a footer.
pub fn report_markdown(rows: &[ReportRow], records: &[PairRecord]) -> String {
    let mut s = String::from("# Face matching accuracy under the watermarking attack\n\n");
    if let Some(r) = records.first() {
        let _ = writeln!(
            s,
            "Desk-scale campaign: {} pairs per budget, tau = {}, {} outer rounds of {} steps.\n",
            rows.first().map_or(0, |r| r.n_pairs),
            r.tau,
            r.attack.rounds,
            r.attack.steps
        );
    }
    s.push_str("| epsilon (x255) | without watermarking (%) | with watermarking (%) | reduction (pp) |\n");
    s.push_str("|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            epsilon_255(r.epsilon),
            fmt1(r.accuracy_without_watermark),
            fmt1(r.accuracy_with_watermark),
            fmt1(r.reduction)
        );
    }
    let _ = writeln!(s, "\n## {REFERENCE_BLOCK_LABEL}\n");
    s.push_str("| epsilon (x255) | without watermarking (%) | with watermarking (%) | reduction (pp) |\n");
    s.push_str("|---:|---:|---:|---:|\n");
    for (e, wo, w, red) in FULL_SCALE_REFERENCE {
        let _ = writeln!(s, "| {e} | {} | {} | {} |", fmt1(wo), fmt1(w), fmt1(red));
    }
    s
}
