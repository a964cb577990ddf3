//! Command-line front end. Exit codes: 0 success, 1 processing failure,
//! 2 config/manifest/usage error, 3 empty result under `--strict`.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::formats::{self, FormatError, TimedPose};
use crate::harness::config::Config;
use crate::harness::manifest::Manifest;
use crate::harness::pipeline::{self, build_aggregator, build_database, describe, load_frames, write_outputs, write_report, PipelineError};
use crate::harness::report::{evaluate, GroundTruthFrame, QueryRecord};
use crate::harness::triplets::{mine_triplets, PosedFrame, TripletError};
use crate::retrieval::{two_stage_retrieve, FrameId, ScoredFrame, Shortlist};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_EMPTY: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mprf", version, about = "Multimodal loop-closure detection over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the global index, refinement store and cluster bank for a manifest.
    Index {
        manifest: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Two-stage retrieval of every manifest frame against a saved index.
    Retrieve {
        manifest: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Full pipeline: retrieval, matching, registration and re-ranking.
    Closeloop {
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        strict: bool,
    },
    /// Sample anchor/positive/negative triplets from manifest poses.
    MineTriplets {
        manifest: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Evaluate a closeloop report directory against a trajectory file.
    Eval {
        report_dir: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maximum timestamp gap when matching frames to trajectory records.
        #[arg(long, default_value_t = 0.05)]
        tolerance_s: f64,
        #[arg(long)]
        strict: bool,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn input(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_INPUT,
            message: e.to_string(),
        }
    }

    fn failure(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: e.to_string(),
        }
    }

    /// Output errors; a closed downstream pipe ends the command quietly.
    fn io(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            Self {
                code: 0,
                message: String::new(),
            }
        } else {
            Self::failure(e)
        }
    }

    fn empty(what: &str) -> Self {
        Self {
            code: EXIT_EMPTY,
            message: format!("empty result: {what}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_input_error() {
            Self::input(e)
        } else {
            Self::failure(e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => Config::load(p).map_err(CliError::input),
        None => Ok(Config::default()),
    }
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn index(manifest: &Path, output: &Path, config: Option<&Path>, strict: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let manifest = Manifest::load(manifest).map_err(CliError::input)?;
    let (frames, mut skipped) = load_frames(&manifest);
    if frames.is_empty() {
        return if strict { Err(CliError::empty("no frames loaded")) } else { Ok(()) };
    }
    let agg = build_aggregator(&cfg, &frames)?;
    let db = build_database(&cfg, &agg, &frames, &mut skipped)?;
    let save = |path: PathBuf, f: &dyn Fn(&mut std::io::BufWriter<std::fs::File>) -> Result<(), FormatError>| {
        formats::save(path, f).map_err(CliError::failure)
    };
    save(output.to_path_buf(), &|w| formats::write_global_index(w, &db.index))?;
    save(sidecar(output, ".refine"), &|w| formats::write_refinement_store(w, &db.store))?;
    save(sidecar(output, ".bank"), &|w| formats::write_cluster_bank(w, &agg.bank))?;
    writeln!(out, "indexed {} frames ({} skipped) into {}", db.index.len(), skipped.len(), output.display()).map_err(CliError::io)?;
    if strict && db.index.is_empty() {
        return Err(CliError::empty("no frames indexed"));
    }
    Ok(())
}

fn retrieve(manifest: &Path, index_path: &Path, k: usize, config: Option<&Path>, strict: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let manifest = Manifest::load(manifest).map_err(CliError::input)?;
    if k == 0 {
        return Err(CliError::input("--k must be positive"));
    }
    let open = |p: &Path| formats::open(p).map_err(CliError::input);
    let index = formats::read_global_index(&mut open(index_path)?, cfg.retrieval.index_mode(), cfg.pipeline.seed).map_err(CliError::input)?;
    let store = formats::read_refinement_store(&mut open(&sidecar(index_path, ".refine"))?).map_err(CliError::input)?;
    let bank = formats::read_cluster_bank(&mut open(&sidecar(index_path, ".bank"))?).map_err(CliError::input)?;
    let agg = pipeline::aggregator_from(bank, &cfg);
    let times: HashMap<FrameId, f64> = manifest.frames.iter().map(|f| (f.id, f.timestamp_s)).collect();
    let (frames, _) = load_frames(&manifest);
    let n1 = cfg.retrieval.n1.max(k);
    let window = cfg.retrieval.exclusion_window_s;
    let mut total = 0;
    writeln!(out, "query_id,rank,candidate_id,score").map_err(CliError::io)?;
    for f in &frames {
        let (g, r) = match describe(&agg, &f.embeddings) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("skipping frame {}: {e}", f.id);
                continue;
            }
        };
        let exclude = |id: FrameId| id == f.id || times.get(&id).is_some_and(|t| (t - f.timestamp_s).abs() < window);
        let shortlist = two_stage_retrieve(&g, &r, &index, &store, n1, k, exclude).map_err(CliError::failure)?;
        for (rank, e) in shortlist.entries.iter().enumerate() {
            writeln!(out, "{},{},{},{:.9}", f.id, rank + 1, e.frame_id, e.score).map_err(CliError::io)?;
        }
        total += shortlist.len();
    }
    if strict && total == 0 {
        return Err(CliError::empty("no candidates retrieved"));
    }
    Ok(())
}

fn closeloop(manifest: &Path, config: &Path, output: &Path, strict: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = Config::load(config).map_err(CliError::input)?;
    let manifest = Manifest::load(manifest).map_err(CliError::input)?;
    let result = pipeline::run_manifest(&manifest, &cfg)?;
    write_outputs(&result, output).map_err(CliError::failure)?;
    let closures = result.closures().count();
    writeln!(
        out,
        "{} queries, {} loop closures, {} frames skipped; outputs in {}",
        result.outcomes.len(),
        closures,
        result.skipped.len(),
        output.display()
    )
    .map_err(CliError::failure)?;
    if let Some(r) = &result.report {
        writeln!(out, "{}", r.to_markdown("MPRF")).map_err(CliError::io)?;
    }
    if strict && closures == 0 {
        return Err(CliError::empty("no loop closures accepted"));
    }
    Ok(())
}

fn mine(
    manifest: &Path,
    count: usize,
    seed: u64,
    config: Option<&Path>,
    output: Option<&Path>,
    strict: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let manifest = Manifest::load(manifest).map_err(CliError::input)?;
    let frames: Vec<PosedFrame> = manifest
        .poses()
        .into_iter()
        .map(|(id, timestamp_s, pose)| PosedFrame { id, timestamp_s, pose })
        .collect();
    let triplets = match mine_triplets(&frames, &cfg.overlap, &cfg.triplets, count, seed) {
        Ok(t) => t,
        Err(TripletError::NoValidTriplet) => Vec::new(),
        Err(e) => return Err(CliError::input(e)),
    };
    let mut text = String::from("anchor,positive,negative\n");
    for t in &triplets {
        text.push_str(&format!("{},{},{}\n", t.anchor, t.positive, t.negative));
    }
    match output {
        Some(p) => std::fs::write(p, text).map_err(CliError::failure)?,
        None => out.write_all(text.as_bytes()).map_err(CliError::io)?,
    }
    if strict && triplets.is_empty() {
        return Err(CliError::empty("no valid triplet"));
    }
    Ok(())
}

#[derive(Deserialize)]
struct FrameRow {
    frame_id: FrameId,
    timestamp_s: f64,
}

#[derive(Deserialize)]
struct RetrievalRow {
    query_id: FrameId,
    candidate_id: FrameId,
    score: f64,
}

#[derive(Deserialize)]
struct ClosureRow {
    query_id: FrameId,
    candidate_id: FrameId,
    tx: f64,
    ty: f64,
    tz: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

#[derive(Deserialize)]
struct TimingRow {
    query_id: FrameId,
    total_ms: f64,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Nearest trajectory record within `tolerance_s` of `t`; `traj` sorted by time.
fn nearest_pose(traj: &[TimedPose], t: f64, tolerance_s: f64) -> Option<&TimedPose> {
    let i = traj.partition_point(|p| p.timestamp_s < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|j| traj.get(j))
        .filter(|p| (p.timestamp_s - t).abs() <= tolerance_s)
        .min_by(|a, b| (a.timestamp_s - t).abs().total_cmp(&(b.timestamp_s - t).abs()))
}

/// Rebuilds query records from a closeloop output directory and scores them
/// against a trajectory.
pub fn eval_dir(report_dir: &Path, gt_path: &Path, cfg: &Config, tolerance_s: f64) -> Result<crate::harness::report::EvalReport, CliError> {
    let mut traj = formats::read_trajectory(gt_path).map_err(CliError::input)?;
    traj.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
    let frames: Vec<FrameRow> = read_csv(&report_dir.join("frames.csv"))?;
    let retrievals: Vec<RetrievalRow> = read_csv(&report_dir.join("retrievals.csv"))?;
    let closures: Vec<ClosureRow> = read_csv(&report_dir.join("loop_closures.csv"))?;
    let timings: Vec<TimingRow> = match report_dir.join("timings.csv") {
        p if p.exists() => read_csv(&p)?,
        _ => Vec::new(),
    };

    let gt: Vec<GroundTruthFrame> = frames
        .iter()
        .filter_map(|f| {
            nearest_pose(&traj, f.timestamp_s, tolerance_s).map(|p| GroundTruthFrame {
                id: f.frame_id,
                timestamp_s: f.timestamp_s,
                pose: p.pose,
            })
        })
        .collect();
    let mut shortlists: HashMap<FrameId, Vec<ScoredFrame>> = HashMap::new();
    for r in retrievals {
        shortlists.entry(r.query_id).or_default().push(ScoredFrame {
            frame_id: r.candidate_id,
            score: r.score,
        });
    }
    let mut accepted = HashMap::new();
    for c in closures {
        let pose = crate::geometry::PoseSE3::from_quaternion_xyzw([c.qx, c.qy, c.qz, c.qw], nalgebra::Vector3::new(c.tx, c.ty, c.tz))
            .map_err(|e| CliError::input(format!("loop_closures.csv: {e}")))?;
        accepted.insert(c.query_id, (c.candidate_id, pose));
    }
    let time_of: HashMap<FrameId, f64> = timings.iter().map(|t| (t.query_id, t.total_ms)).collect();
    let records: Vec<QueryRecord> = frames
        .iter()
        .map(|f| QueryRecord {
            query_id: f.frame_id,
            shortlist: Shortlist {
                entries: shortlists.remove(&f.frame_id).unwrap_or_default(),
            },
            closure: accepted.get(&f.frame_id).copied(),
            total_ms: time_of.get(&f.frame_id).copied().unwrap_or(0.0),
        })
        .collect();
    evaluate(
        &records,
        &gt,
        &cfg.overlap,
        cfg.retrieval.exclusion_window_s,
        cfg.pipeline.eval_require_positive,
    )
    .map_err(CliError::failure)
}

fn eval(report_dir: &Path, gt: &Path, config: Option<&Path>, tolerance_s: f64, strict: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let report = eval_dir(report_dir, gt, &cfg, tolerance_s)?;
    write_report(&report, report_dir).map_err(CliError::failure)?;
    writeln!(out, "{}", report.to_markdown("MPRF")).map_err(CliError::io)?;
    if strict && report.num_queries == 0 {
        return Err(CliError::empty("no evaluable queries"));
    }
    Ok(())
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Index {
            manifest,
            output,
            config,
            strict,
        } => index(&manifest, &output, config.as_deref(), strict, out),
        Command::Retrieve {
            manifest,
            index,
            k,
            config,
            strict,
        } => retrieve(&manifest, &index, k, config.as_deref(), strict, out),
        Command::Closeloop {
            manifest,
            config,
            output,
            strict,
        } => closeloop(&manifest, &config, &output, strict, out),
        Command::MineTriplets {
            manifest,
            count,
            seed,
            config,
            output,
            strict,
        } => mine(&manifest, count, seed, config.as_deref(), output.as_deref(), strict, out),
        Command::Eval {
            report_dir,
            gt,
            config,
            tolerance_s,
            strict,
        } => eval(&report_dir, &gt, config.as_deref(), tolerance_s, strict, out),
    }
}

/// Binary entry point.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    match run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("mprf: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}
