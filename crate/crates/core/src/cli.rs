//! Command-line front end. Every subcommand accepts `--config`, `--seed`
//! and `--out`, echoes its resolved configuration into the output
//! directory and prints a one-line JSON summary on success.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{generate_dataset, load_manifest, write_manifest, TrainingPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, quantize_matches, visualize_matches, EvalOptions, EvalPair};
use crate::image::Image;
use crate::matchfile::{read_refined_matches, write_refined_matches};
use crate::proposals::{write_proposals, ProposalSource, ProposalSpec};
use crate::refine::filter_by_confidence;
use crate::train::{evaluate_checkpoint, match_pairs, train, Model, RESULTS_FILE};

pub const OUT_DIR_ENV: &str = "REFMATCH_OUT_DIR";
pub const WORKERS_ENV: &str = "REFMATCH_WORKERS";
const DEFAULT_OUT_DIR: &str = "refinematch-out";
const PROPOSALS_SUFFIX: &str = ".proposals.txt";

#[derive(Debug, Parser)]
#[command(name = "refinematch", version, about = "Refine patch-level match proposals to pixel-level matches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $REFMATCH_OUT_DIR, then the configuration).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic homography dataset.
    GenData(GenDataArgs),
    /// Train the refinement network.
    Train(TrainArgs),
    /// Propose and refine matches for a manifest or one image pair.
    Match(MatchArgs),
    /// Mean matching accuracy of match files over a manifest.
    EvalMma(EvalArgs),
    /// Homography estimation accuracy of match files over a manifest.
    EvalHomography(EvalArgs),
    /// Evaluate a checkpoint on a held-out manifest and append to a results file.
    EvalCheckpoint(EvalCheckpointArgs),
    /// Merge nearby keypoints of match files.
    Quantize(QuantizeArgs),
    /// Draw confidence-colored matches.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub num_pairs: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub warp_magnitude: Option<f64>,
    #[arg(long)]
    pub photometric_jitter: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training manifest (directory or manifest.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Stop after this many optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Proposal source for training: nc or oracle.
    #[arg(long)]
    pub proposals: Option<String>,
    /// Resume from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained checkpoint; without it a freshly initialized model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["image_a", "image_b"])]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "image_b")]
    pub image_a: Option<PathBuf>,
    #[arg(long, requires = "image_a")]
    pub image_b: Option<PathBuf>,
    /// nc, oracle or external:<path> (a file, or a directory of <id>.txt).
    #[arg(long, default_value = "nc")]
    pub proposals: String,
    /// Minimum fine confidence of written matches.
    #[arg(long)]
    pub confidence: Option<f64>,
    /// Expand proposals before refinement.
    #[arg(long)]
    pub expand: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding one <id>.txt match file per pair.
    #[arg(long)]
    pub matches: PathBuf,
    /// Drop matches whose confidence column is below this value.
    #[arg(long, default_value_t = 0.0)]
    pub confidence: f64,
    #[arg(long)]
    pub ransac_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalCheckpointArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "oracle")]
    pub proposals: String,
    /// Results file to append to (default: <out>/results.jsonl).
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// A match file or a directory of match files.
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    pub radius: f64,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, conflicts_with_all = ["image_a", "image_b"])]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "image_b")]
    pub image_a: Option<PathBuf>,
    #[arg(long, requires = "image_a")]
    pub image_b: Option<PathBuf>,
    /// Match file (single pair) or directory of <id>.txt files (manifest).
    #[arg(long)]
    pub matches: PathBuf,
    /// Only draw this pair of the manifest.
    #[arg(long)]
    pub pair: Option<String>,
}

struct Resolved {
    config: RunConfig,
    out: PathBuf,
}

fn resolve(common: &Common) -> Result<Resolved> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| config.paths.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    config.paths.out_dir = Some(out.clone());
    Ok(Resolved { config, out })
}

fn finish(r: &Resolved) -> Result<()> {
    r.config.validate()?;
    r.config.echo(&r.out)?;
    Ok(())
}

fn pair_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.txt"))
}

fn manifest_pairs(arg: Option<&PathBuf>, fallback: Option<&PathBuf>) -> Result<Vec<TrainingPair>> {
    let path = arg
        .or(fallback)
        .ok_or_else(|| Error::Config("a dataset manifest is required (--manifest)".into()))?;
    load_manifest(path)
}

/// Configures the global worker pool from `REFMATCH_WORKERS`.
pub fn init_workers() -> Result<()> {
    if let Some(v) = std::env::var_os(WORKERS_ENV) {
        let n: usize = v
            .to_str()
            .and_then(|s| s.parse().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer")))?;
        // A pool configured earlier in the process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs one parsed command and returns its JSON summary.
pub fn run(cli: Cli) -> Result<serde_json::Value> {
    init_workers()?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Match(a) => run_match(a),
        Command::EvalMma(a) => run_eval(a, false),
        Command::EvalHomography(a) => run_eval(a, true),
        Command::EvalCheckpoint(a) => run_eval_checkpoint(a),
        Command::Quantize(a) => run_quantize(a),
        Command::Viz(a) => run_viz(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<serde_json::Value> {
    let mut r = resolve(&a.common)?;
    let d = &mut r.config.data;
    d.num_pairs = a.num_pairs.unwrap_or(d.num_pairs);
    d.width = a.width.unwrap_or(d.width);
    d.height = a.height.unwrap_or(d.height);
    d.warp_magnitude = a.warp_magnitude.unwrap_or(d.warp_magnitude);
    d.photometric_jitter = a.photometric_jitter.unwrap_or(d.photometric_jitter);
    finish(&r)?;
    let pairs = generate_dataset(&r.config.data, r.config.seed)?;
    let manifest = write_manifest(&r.out, &pairs)?;
    Ok(json!({"command": "gen-data", "pairs": pairs.len(), "manifest": manifest}))
}

fn run_train(a: TrainArgs) -> Result<serde_json::Value> {
    let mut r = resolve(&a.common)?;
    let t = &mut r.config.train;
    if let Some(s) = a.steps {
        t.max_steps = Some(s);
    }
    t.max_epochs = a.max_epochs.unwrap_or(t.max_epochs);
    t.checkpoint_every = a.checkpoint_every.or(t.checkpoint_every);
    if let Some(p) = &a.proposals {
        t.proposals = match p.parse::<ProposalSpec>()? {
            ProposalSpec::Nc => ProposalSource::Nc,
            ProposalSpec::Oracle => ProposalSource::Oracle,
            ProposalSpec::External(_) => ProposalSource::External,
        };
    }
    if let Some(m) = &a.manifest {
        r.config.paths.train_manifest = Some(m.clone());
    }
    finish(&r)?;
    let pairs = manifest_pairs(a.manifest.as_ref(), r.config.paths.train_manifest.as_ref())?;
    let outcome = train(&r.config, &pairs, &r.out, a.resume.as_deref())?;
    Ok(json!({
        "command": "train",
        "steps": outcome.steps,
        "epochs_completed": outcome.epochs_completed,
        "converged": outcome.converged,
        "checkpoint": outcome.final_checkpoint,
        "log": outcome.log_path,
        "final_loss": outcome.last_report.map(|r| r.total),
    }))
}

fn load_model(checkpoint: Option<&Path>, config: &RunConfig) -> Result<Model> {
    match checkpoint {
        Some(p) => Model::load(p),
        None => Model::new(config.backbone.clone(), config.refiner.clone(), config.nc, config.seed),
    }
}

fn run_match(a: MatchArgs) -> Result<serde_json::Value> {
    let mut r = resolve(&a.common)?;
    if let Some(c) = a.confidence {
        r.config.refiner.confidence = c;
    }
    let spec: ProposalSpec = a.proposals.parse()?;
    finish(&r)?;
    let mut model = load_model(a.checkpoint.as_deref(), &r.config)?;
    model.refiner.config.expand_at_inference = a.expand;
    let c = r.config.refiner.confidence;

    let (pairs, specs): (Vec<TrainingPair>, Vec<ProposalSpec>) = match (&a.manifest, &a.image_a, &a.image_b) {
        (Some(m), _, _) => {
            let pairs = load_manifest(m)?;
            let specs = pairs
                .iter()
                .map(|p| match &spec {
                    ProposalSpec::External(dir) if dir.is_dir() => ProposalSpec::External(pair_file(dir, &p.id)),
                    other => other.clone(),
                })
                .collect();
            (pairs, specs)
        }
        (None, Some(ia), Some(ib)) => {
            let pair = TrainingPair {
                id: "pair".into(),
                image_a: Image::load(ia)?,
                image_b: Image::load(ib)?,
                supervision: crate::data::PairSupervision::Homography(crate::geometry::Homography::identity()),
                overlap_tag: None,
            };
            if spec == ProposalSpec::Oracle {
                return Err(Error::Config("oracle proposals need a manifest with ground truth".into()));
            }
            (vec![pair], vec![spec.clone()])
        }
        _ => return Err(Error::Config("give --manifest or both --image-a and --image-b".into())),
    };

    std::fs::create_dir_all(&r.out).map_err(|e| Error::io(&r.out, e))?;
    let mut total = 0;
    let mut proposals_total = 0;
    for (p, s) in pairs.iter().zip(&specs) {
        let (set, refined) = match_pairs(&model, std::slice::from_ref(p), s, &r.config)?
            .pop()
            .expect("one pair in, one result out");
        let kept = filter_by_confidence(&refined, c);
        write_proposals(r.out.join(format!("{}{PROPOSALS_SUFFIX}", p.id)), &set)?;
        write_refined_matches(pair_file(&r.out, &p.id), &kept)?;
        total += kept.len();
        proposals_total += set.len();
    }
    Ok(json!({
        "command": "match",
        "pairs": pairs.len(),
        "proposals": proposals_total,
        "matches": total,
        "confidence": c,
        "out": r.out,
    }))
}

fn eval_inputs(manifest: &Path, matches: &Path, confidence: f64) -> Result<Vec<EvalPair>> {
    let pairs = load_manifest(manifest)?;
    let mut out = Vec::new();
    for p in pairs {
        let Some(gt) = p.supervision.ground_truth() else { continue };
        let ms = read_refined_matches(pair_file(matches, &p.id))?;
        out.push(EvalPair {
            id: p.id.clone(),
            matches: filter_by_confidence(&ms, confidence).iter().map(|m| m.fine).collect(),
            gt,
            image_size: p.size(),
        });
    }
    if out.is_empty() {
        return Err(Error::Config("manifest has no pairs with homography ground truth".into()));
    }
    Ok(out)
}

fn run_eval(a: EvalArgs, homography: bool) -> Result<serde_json::Value> {
    let mut r = resolve(&a.common)?;
    if let Some(t) = a.ransac_threshold {
        r.config.eval.ransac_threshold = t;
    }
    finish(&r)?;
    let inputs = eval_inputs(&a.manifest, &a.matches, a.confidence)?;
    let options = EvalOptions {
        mma: !homography,
        homography,
        seed: r.config.seed,
        ..r.config.eval
    };
    let label = if homography { "eval-homography" } else { "eval-mma" };
    let report = evaluate_pairs(label, &inputs, &options);
    debug_assert!(report.check_invariants());
    let json_path = r.out.join(format!("{}.json", label.replace('-', "_")));
    report.write_json(&json_path)?;
    if !homography {
        report.write_mma_csv(r.out.join("mma.csv"))?;
    }
    Ok(json!({
        "command": label,
        "pairs": inputs.len(),
        "mma": report.mma,
        "homography_acc": report.homography_acc,
        "report": json_path,
    }))
}

fn run_eval_checkpoint(a: EvalCheckpointArgs) -> Result<serde_json::Value> {
    let r = resolve(&a.common)?;
    finish(&r)?;
    let spec: ProposalSpec = a.proposals.parse()?;
    let results = a.results.clone().unwrap_or_else(|| r.out.join(RESULTS_FILE));
    let eval = evaluate_checkpoint(&a.checkpoint, &a.manifest, &spec, &r.config, Some(&results))?;
    Ok(json!({
        "command": "eval-checkpoint",
        "proposals_mma": eval.proposals.mma,
        "refined_mma": eval.refined.mma,
        "proposals_homography_acc": eval.proposals.homography_acc,
        "refined_homography_acc": eval.refined.homography_acc,
        "results": results,
    }))
}

fn match_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".txt") && !name.ends_with(PROPOSALS_SUFFIX)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn run_quantize(a: QuantizeArgs) -> Result<serde_json::Value> {
    let r = resolve(&a.common)?;
    finish(&r)?;
    if a.radius.is_nan() || a.radius <= 0.0 {
        return Err(Error::Config("radius must be positive".into()));
    }
    let (mut before, mut after) = (0, 0);
    let files = match_files(&a.matches)?;
    for f in &files {
        let ms = read_refined_matches(f)?;
        let q = quantize_matches(&ms, a.radius);
        before += ms.len();
        after += q.len();
        let name = f.file_name().ok_or_else(|| Error::Config(format!("bad match path {}", f.display())))?;
        write_refined_matches(r.out.join(name), &q)?;
    }
    Ok(json!({"command": "quantize", "files": files.len(), "matches_in": before, "matches_out": after, "out": r.out}))
}

fn run_viz(a: VizArgs) -> Result<serde_json::Value> {
    let r = resolve(&a.common)?;
    finish(&r)?;
    let mut jobs: Vec<(String, Image, Image, PathBuf)> = Vec::new();
    match (&a.manifest, &a.image_a, &a.image_b) {
        (Some(m), _, _) => {
            for p in load_manifest(m)? {
                if a.pair.as_ref().is_some_and(|id| *id != p.id) {
                    continue;
                }
                let f = pair_file(&a.matches, &p.id);
                jobs.push((p.id, p.image_a, p.image_b, f));
            }
            if jobs.is_empty() {
                return Err(Error::Config("no pair selected for plotting".into()));
            }
        }
        (None, Some(ia), Some(ib)) => {
            jobs.push(("viz".into(), Image::load(ia)?, Image::load(ib)?, a.matches.clone()));
        }
        _ => return Err(Error::Config("give --manifest or both --image-a and --image-b".into())),
    }
    let mut drawn = 0;
    for (id, ia, ib, f) in &jobs {
        let ms: Vec<_> = read_refined_matches(f)?.iter().map(|m| (m.fine, m.fine_conf)).collect();
        drawn += visualize_matches(ia, ib, &ms, r.out.join(format!("{id}.png")))?;
    }
    Ok(json!({"command": "viz", "images": jobs.len(), "segments": drawn, "out": r.out}))
}

/// Machine-readable error line.
pub fn error_line(command: &str, e: &Error) -> String {
    json!({"status": "error", "command": command, "kind": e.kind(), "message": e.to_string()}).to_string()
}

pub fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Match(_) => "match",
        Command::EvalMma(_) => "eval-mma",
        Command::EvalHomography(_) => "eval-homography",
        Command::EvalCheckpoint(_) => "eval-checkpoint",
        Command::Quantize(_) => "quantize",
        Command::Viz(_) => "viz",
    }
}
