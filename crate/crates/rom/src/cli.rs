//! The `rom` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rom_core::eval::MatchOptions;
use rom_core::matcher::{DEFAULT_ALPHA, DEFAULT_ITERATIONS};
use rom_core::model::Model;
use rom_core::optim::OptimizerState;
use rom_core::scene::{generate_corpus, Difficulty, SceneConfig, ScenePair};
use rom_core::train::{corpus_class_weights, fit, Checkpoint};

use crate::checkpoint::{load_model, save_checkpoint};
use crate::config::{load_or_default, RunConfig};
use crate::corpus::{read_corpus, write_corpus, FeatureStorage};
use crate::error::{Error, Result};
use crate::records::{
    predict_record, read_keypoints, read_matches, refuse_record, write_keypoints, write_matches,
    KeypointRecord,
};
use crate::report::{build_report, render_text, report_json};
use crate::svg::render_pair;

#[derive(Debug, Parser)]
#[command(
    name = "rom",
    version,
    about = "Relational object matching on image pairs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene-pair corpus.
    Generate(GenerateArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Match objects in every pair of a corpus.
    Match(MatchArgs),
    /// Re-fuse the object scores of a match file with keypoint matches.
    Fuse(FuseArgs),
    /// Score match predictions against the corpus ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scene configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Only generate pairs of this bin: easy, hard or very_hard.
    #[arg(long, value_parser = parse_difficulty)]
    pub difficulty: Option<Difficulty>,
    /// Store visual features in `<out>.bin` instead of inline.
    #[arg(long)]
    pub sidecar: bool,
    /// Also write the synthetic keypoint matches as a keypoint file.
    #[arg(long)]
    pub keypoints_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run configuration (JSON with `model` and `train` sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint to write; rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of epochs, counting those of a resumed checkpoint.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda_aff: Option<f64>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    #[arg(long)]
    pub lambda_pos: Option<f64>,
    #[arg(long)]
    pub lambda_rel: Option<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keypoint weight; 0 matches on object scores alone.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: usize,
    /// Keypoint file replacing the corpus keypoints; pairs it does not list
    /// get none.
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    /// Directory for one overlay drawing per pair.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Match file written by `rom match`.
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub keypoints: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: usize,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Add easy, hard and very_hard sections.
    #[arg(long)]
    pub by_difficulty: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn parse_difficulty(s: &str) -> std::result::Result<Difficulty, String> {
    Difficulty::parse(s).ok_or_else(|| format!("unknown difficulty `{s}` (easy, hard, very_hard)"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg: SceneConfig = load_or_default(a.config.as_deref())?;
    if a.difficulty.is_some() {
        cfg.target = a.difficulty;
    }
    let pairs = generate_corpus(&cfg, a.count, a.seed)?;
    let storage = if a.sidecar {
        FeatureStorage::Sidecar
    } else {
        FeatureStorage::Embedded
    };
    write_corpus(&a.out, &pairs, storage)?;
    if let Some(kp) = &a.keypoints_out {
        let recs: Vec<_> = pairs.iter().map(KeypointRecord::from_pair).collect();
        write_keypoints(kp, &recs)?;
    }
    Ok(())
}

fn check_corpus(path: &Path, pairs: &[ScenePair], model: &Model<f32>) -> Result<()> {
    let c = &model.config;
    for p in pairs {
        if let Some(row) = p
            .features1
            .iter()
            .chain(&p.features2)
            .find(|r| r.len() != c.d_viz)
        {
            return Err(Error::format(
                path,
                format!(
                    "pair {}: features of width {}, model expects {}",
                    p.pair_id,
                    row.len(),
                    c.d_viz
                ),
            ));
        }
        let classes = p.detections1.iter().chain(&p.detections2).map(|d| d.class);
        if let Some(k) = classes.into_iter().find(|&k| k >= c.num_classes) {
            return Err(Error::format(
                path,
                format!("pair {}: class {k}, model has {}", p.pair_id, c.num_classes),
            ));
        }
    }
    Ok(())
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let mut run: RunConfig = load_or_default(a.config.as_deref())?;
    let (mut model, mut state, weights, start) = match &a.resume {
        Some(path) => {
            let expected = a.config.as_ref().map(|_| &run.model);
            let (ck, model, state) = load_model(path, expected)?;
            if a.config.is_none() {
                run.model = ck.model_config.clone();
                run.train = ck.train_config.clone();
            }
            (model, state, ck.class_weights, ck.epoch)
        }
        None => {
            let model = Model::<f32>::new(run.model.clone(), a.seed)?;
            let state = OptimizerState::new(run.train.adam, &model.store);
            let weights = corpus_class_weights(&corpus, run.model.num_classes);
            (model, state, weights, 0)
        }
    };
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    let w = &mut run.train.weights;
    for (slot, v) in [
        (&mut w.aff, a.lambda_aff),
        (&mut w.cls, a.lambda_cls),
        (&mut w.pos, a.lambda_pos),
        (&mut w.rel, a.lambda_rel),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    run.train.validate()?;
    state.config = run.train.adam;
    check_corpus(&a.corpus, &corpus, &model)?;
    let tc = run.train.clone();
    fit(
        &mut model,
        &mut state,
        &corpus,
        &weights,
        &tc,
        a.seed,
        start,
        |m, model, state| {
            let line = serde_json::to_string(m).expect("epoch metrics serialize");
            writeln!(out, "{line}").map_err(|e| rom_core::Error::Training(e.to_string()))?;
            let ck = Checkpoint::capture(model, state, &tc, &weights, m.epoch + 1);
            save_checkpoint(&a.out, &ck).map_err(|e| rom_core::Error::Training(e.to_string()))
        },
    )?;
    if start >= tc.epochs {
        save_checkpoint(
            &a.out,
            &Checkpoint::capture(&model, &state, &tc, &weights, start),
        )?;
    }
    Ok(())
}

fn write_svgs(dir: &Path, pairs: &[ScenePair], preds: &[Vec<(usize, usize)>]) -> Result<()> {
    for (p, m) in pairs.iter().zip(preds) {
        write_file(
            &dir.join(format!("pair_{:06}.svg", p.pair_id)),
            &render_pair(p, m),
        )?;
    }
    Ok(())
}

fn run_match(a: &MatchArgs) -> Result<()> {
    let (_, model, _) = load_model(&a.checkpoint, None)?;
    let pairs = read_corpus(&a.corpus)?;
    check_corpus(&a.corpus, &pairs, &model)?;
    let external = a.keypoints.as_deref().map(read_keypoints).transpose()?;
    let opts = MatchOptions {
        alpha: a.alpha,
        iterations: a.iterations,
    };
    let mut records = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let kp = match &external {
            Some(map) => map.get(&p.pair_id).map_or(&[][..], Vec::as_slice),
            None => &p.keypoints,
        };
        records.push(predict_record(&model, p, kp, &opts)?);
    }
    write_matches(&a.out, &records)?;
    if let Some(dir) = &a.svg {
        let preds: Vec<_> = records.iter().map(|r| r.matches.clone()).collect();
        write_svgs(dir, &pairs, &preds)?;
    }
    Ok(())
}

fn fuse(a: &FuseArgs) -> Result<()> {
    let pairs = read_corpus(&a.corpus)?;
    let records = read_matches(&a.matches)?;
    let kp = read_keypoints(&a.keypoints)?;
    let opts = MatchOptions {
        alpha: a.alpha,
        iterations: a.iterations,
    };
    let mut out = Vec::with_capacity(records.len());
    let mut drawn = Vec::new();
    for r in &records {
        let pair = pairs
            .iter()
            .find(|p| p.pair_id == r.pair_id)
            .ok_or_else(|| Error::Usage(format!("pair {} is not in the corpus", r.pair_id)))?;
        let k = kp.get(&r.pair_id).map_or(&[][..], Vec::as_slice);
        let fused = refuse_record(r, pair, k, &opts)?;
        drawn.push((pair.clone(), fused.matches.clone()));
        out.push(fused);
    }
    write_matches(&a.out, &out)?;
    if let Some(dir) = &a.svg {
        let (ps, ms): (Vec<_>, Vec<_>) = drawn.into_iter().unzip();
        write_svgs(dir, &ps, &ms)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let pairs = read_corpus(&a.corpus)?;
    let records = read_matches(&a.predictions)?;
    let report = build_report(&pairs, &records, a.by_difficulty)?;
    if let Some(path) = &a.json {
        write_file(path, &report_json(&report))?;
    }
    out.write_all(render_text(&report).as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

/// Executes a parsed command, writing regular output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a, out),
        Command::Match(a) => run_match(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a, out),
    }
}

/// Parses `args` and runs; returns the process exit status. Failures print
/// a one-line JSON error as the last line of stderr.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{}", e.render());
            return 0;
        }
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            let usage = Error::Usage(e.kind().to_string());
            let _ = writeln!(err, "{}", usage.to_json_line());
            return usage.exit_code();
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_json_line());
            e.exit_code()
        }
    }
}
