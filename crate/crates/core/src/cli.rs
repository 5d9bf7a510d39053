//! Command-line interface. Exit codes: 0 success, 1 user error, 2 internal error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    read_dataset, read_label_lines, write_label_lines, Dataset, FrameLogPosteriors, LabelSet, Transcript,
};
use crate::error::{Error, Result};
use crate::hmm::{constrained_viterbi, ClassPrior, LengthModel};
use crate::losses::{LossKind, DEFAULT_ALPHA};
use crate::metrics::evaluate;
use crate::oracle::{
    brute_force_viterbi, random_scorer_problem, rel_dev, run_lattice_suite, scorer_gradient_deviation,
};
use crate::render::render_timeline;
use crate::scorer::{scorer_forward, ScorerKind, ScorerParams};
use crate::seggraph::build_graph;
use crate::synth::{write_synthetic, SynthConfig, BACKGROUND_NAME};
use crate::trainer::{align, init_state, read_state, segment, train, write_state, Decoded, ModelState, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "weakseg", version, about = "Weakly supervised temporal segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus under OUT/train and OUT/test.
    Gen(GenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Segment videos, choosing transcripts from a training pool.
    Segment(SegmentArgs),
    /// Align videos to their given transcripts.
    Align(AlignArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Draw label files as an SVG timeline.
    Render(RenderArgs),
    /// Compare the dynamic programs with brute-force references.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 80)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    #[arg(long)]
    pub min_actions: Option<usize>,
    #[arg(long)]
    pub max_actions: Option<usize>,
    #[arg(long)]
    pub orderings: Option<usize>,
    /// Comma-separated per-class mean segment lengths.
    #[arg(long, value_delimiter = ',')]
    pub mean_lengths: Option<Vec<f64>>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub center_scale: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub background_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    #[value(name = "F")]
    F,
    #[value(name = "DF")]
    Df,
    #[value(name = "CDF")]
    Cdf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScorerArg {
    Linear,
    Gru,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long, default_value = "model.txt")]
    pub out: PathBuf,
    /// Per-iteration log path.
    #[arg(long, default_value = "train.log")]
    pub log: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    #[arg(long, value_enum, default_value = "CDF")]
    pub loss: LossArg,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr_dropped: f64,
    /// Iteration of the learning-rate drop; defaults to 60% of --iters.
    #[arg(long)]
    pub lr_drop_at: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "gru")]
    pub scorer: ScorerArg,
    #[arg(long, default_value_t = crate::scorer::DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long)]
    pub max_segment_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory with the videos to decode.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; one `<video_id>.txt` of class names per video.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the checkpoint's window.
    #[arg(long)]
    pub window: Option<usize>,
    /// Also write each video's graph as a table into this directory.
    #[arg(long)]
    pub dump_graph: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub infer: InferArgs,
    /// Dataset directory whose transcripts form the candidate pool.
    #[arg(long)]
    pub pool: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub infer: InferArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted `<video_id>.txt` label files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory with `groundTruth/`.
    #[arg(long)]
    pub data: PathBuf,
    /// Background class name; defaults to `background` when the mapping has it.
    #[arg(long)]
    pub background: Option<String>,
    /// Report path; the key-value block goes here and `metric value` lines to `<out>.metrics`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Label files, one row each.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = BACKGROUND_NAME)]
    pub background: String,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    pub graphs: usize,
    #[arg(long, default_value_t = 50)]
    pub gradient_graphs: usize,
    #[arg(long, default_value_t = 100)]
    pub viterbi_cases: usize,
    #[arg(long, default_value_t = 20)]
    pub scorer_cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. }
        | Error::EmptyHyperNode { .. }
        | Error::TooManyPaths { .. }
        | Error::OracleMismatch(_) => 2,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Segment(a) => cmd_infer(a.infer, Some(a.pool)),
        Command::Align(a) => cmd_infer(a.infer, None),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
        Command::OracleCheck(a) => cmd_oracle(a),
    }
}

fn with_default_background(labels: LabelSet, name: Option<&str>) -> Result<LabelSet> {
    match name {
        Some(n) => labels.with_background(n),
        None if labels.index_of(BACKGROUND_NAME).is_some() => labels.with_background(BACKGROUND_NAME),
        None => Ok(labels),
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset<f64>> {
    let d: Dataset<f64> = read_dataset(dir)?;
    if let Some(v) = crate::data::validate_dataset(&d).first() {
        return Err(Error::invalid("dataset", v.to_string()));
    }
    Ok(d)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = SynthConfig::separable(a.classes, a.dim, a.train, a.test, a.seed);
    cfg.background_prob = a.background_prob;
    if let Some(v) = a.min_actions {
        cfg.min_actions = v;
    }
    if let Some(v) = a.max_actions {
        cfg.max_actions = v;
    }
    if let Some(v) = a.orderings {
        cfg.orderings = v;
    }
    if let Some(v) = a.mean_lengths {
        cfg.mean_lengths = if v.len() == 1 { vec![v[0]; a.classes] } else { v };
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.center_scale {
        cfg.center_scale = v;
    }
    let c = write_synthetic(&cfg, &a.out)?;
    println!(
        "wrote {} train and {} test videos to {}",
        c.train.videos.len(),
        c.test.videos.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let cfg = TrainConfig {
        window: a.window,
        loss: match a.loss {
            LossArg::F => LossKind::Forward,
            LossArg::Df => LossKind::discriminative(a.alpha)?,
            LossArg::Cdf => LossKind::Constrained,
        },
        iterations: a.iters,
        lr: a.lr,
        lr_drop_at: a.lr_drop_at,
        lr_dropped: a.lr_dropped,
        seed: a.seed,
        scorer: match a.scorer {
            ScorerArg::Linear => ScorerKind::Linear,
            ScorerArg::Gru => ScorerKind::Gru,
        },
        hidden: a.hidden,
        max_segment_len: a.max_segment_len,
    };
    let mut state = init_state(&cfg, &data)?;
    let mut log = BufWriter::new(File::create(&a.log)?);
    let reports = train(&mut state, &data, &cfg, Some(&mut log))?;
    log.flush()?;
    let mut out = BufWriter::new(File::create(&a.out)?);
    write_state(&state, &mut out)?;
    out.flush()?;
    let skipped = reports.iter().filter(|r| r.skipped.is_some()).count();
    println!(
        "trained {} iterations ({} skipped), checkpoint {}",
        reports.len(),
        skipped,
        a.out.display()
    );
    Ok(())
}

fn load_state(path: &Path) -> Result<ModelState<f64>> {
    read_state(BufReader::new(File::open(path)?))
}

fn cmd_infer(a: InferArgs, pool_dir: Option<PathBuf>) -> Result<()> {
    let mut state = load_state(&a.model)?;
    if let Some(w) = a.window {
        state.window = w;
    }
    let data = load_dataset(&a.data)?;
    if data.label_set.len() != state.prior.classes() {
        return Err(Error::invalid(
            "model",
            format!("{} classes, dataset has {}", state.prior.classes(), data.label_set.len()),
        ));
    }
    let pool: Option<Vec<Transcript>> = match &pool_dir {
        Some(dir) => Some(load_dataset(dir)?.transcripts()),
        None => None,
    };
    fs::create_dir_all(&a.out)?;
    if let Some(d) = &a.dump_graph {
        fs::create_dir_all(d)?;
    }
    for v in &data.videos {
        let dec: Decoded<f64> = match &pool {
            Some(p) => segment(&state, &v.features, p)?,
            None => align(&state, &v.features, &v.transcript)?,
        };
        write_label_lines(
            &a.out.join(format!("{}.txt", v.id())),
            &dec.segmentation.frame_labels(),
            &data.label_set,
        )?;
        if let Some(d) = &a.dump_graph {
            let (post, _) = scorer_forward(&state.params, &v.features)?;
            let g = build_graph(&dec.anchor, &post, state.window)?;
            fs::write(d.join(format!("{}.graph.txt", v.id())), g.dump_table(Some(&data.label_set)))?;
        }
    }
    println!("decoded {} videos into {}", data.videos.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let labels = with_default_background(data.label_set.clone(), a.background.as_deref())?;
    let mut items = Vec::with_capacity(data.videos.len());
    for v in &data.videos {
        let gt = v
            .ground_truth
            .clone()
            .ok_or_else(|| Error::invalid("dataset", format!("video {} has no ground truth", v.id())))?;
        let pred = read_label_lines(&a.pred.join(format!("{}.txt", v.id())), &labels)?;
        items.push((v.id().to_string(), pred, gt));
    }
    let report = evaluate(&items, labels.background_id())?;
    print!("{report}");
    if let Some(out) = &a.out {
        fs::write(out, report.to_string())?;
        let mut lines = out.clone().into_os_string();
        lines.push(".metrics");
        fs::write(PathBuf::from(lines), report.metric_lines())?;
    } else {
        print!("{}", report.metric_lines());
    }
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let mut rows = Vec::with_capacity(a.files.len());
    for f in &a.files {
        let text = fs::read_to_string(f)?;
        let labels: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let title = f
            .file_stem()
            .map_or_else(|| f.display().to_string(), |s| s.to_string_lossy().into_owned());
        rows.push((title, labels));
    }
    fs::write(&a.out, render_timeline(&rows, Some(&a.background)))?;
    Ok(())
}

const LOSS_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-5;
const SCORER_TOL: f64 = 1e-4;

fn cmd_oracle(a: OracleArgs) -> Result<()> {
    let values = run_lattice_suite(a.graphs, a.seed, false)?;
    let grads = run_lattice_suite(a.gradient_graphs, a.seed.wrapping_add(1), true)?;
    let loss_dev = values.max_loss_dev.max(grads.max_loss_dev);
    println!("graphs {}", a.graphs);
    println!("max_loss_deviation {loss_dev:e}");
    println!(
        "max_gradient_deviation {:e} ({} entries, {} skipped near hard-set ties)",
        grads.max_grad_dev, grads.checked_entries, grads.skipped_entries
    );

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(2));
    let (vit_dev, vit_mismatch) = viterbi_suite(&mut rng, a.viterbi_cases)?;
    println!("viterbi_cases {} max_score_deviation {vit_dev:e} mismatches {vit_mismatch}", a.viterbi_cases);

    let mut scorer_dev: f64 = 0.0;
    for i in 0..a.scorer_cases {
        let kind = if i % 2 == 0 { ScorerKind::Linear } else { ScorerKind::Gru };
        let (video, cot) = random_scorer_problem(&mut rng, 1 + i % 10, 3, 3);
        let params = ScorerParams::init(kind, 3, 1 + i % 8, 3, i as u64)?;
        scorer_dev = scorer_dev.max(scorer_gradient_deviation(&params, &video, &cot)?);
    }
    println!("scorer_cases {} max_gradient_deviation {scorer_dev:e}", a.scorer_cases);

    let ok = loss_dev <= LOSS_TOL && grads.max_grad_dev <= GRAD_TOL && vit_mismatch == 0 && vit_dev <= LOSS_TOL && scorer_dev <= SCORER_TOL;
    println!("{}", if ok { "PASS" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(Error::OracleMismatch("deviation above tolerance".into()))
    }
}

/// Random decoding problems with T ≤ 30, N ≤ 4, K ≤ 4; returns the largest
/// score deviation and the number of segmentation mismatches.
pub fn viterbi_suite(rng: &mut impl rand::Rng, cases: usize) -> Result<(f64, usize)> {
    let mut max_dev: f64 = 0.0;
    let mut mismatches = 0;
    for _ in 0..cases {
        let k = rng.random_range(1..=4usize);
        let n = if k == 1 { 1 } else { rng.random_range(1..=4usize) };
        let t = rng.random_range(n..=30usize);
        let logits = ndarray::Array2::from_shape_fn((t, k), |_| rng.random_range(-3.0..3.0));
        let post = FrameLogPosteriors::from_logits(logits.view())?;
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let prior = ClassPrior::from_weights(&weights)?;
        let lengths = LengthModel::new((0..k).map(|_| rng.random_range(1.0..15.0)).collect())?;
        let mut labels = Vec::with_capacity(n);
        while labels.len() < n {
            let a = rng.random_range(0..k);
            if labels.last() != Some(&a) {
                labels.push(a);
            }
        }
        let tr = Transcript::new(labels)?;
        let fast = constrained_viterbi(&post, &prior, &lengths, &tr)?;
        let (seg, score) = brute_force_viterbi(&post, &prior, &lengths, &tr)?;
        max_dev = max_dev.max(rel_dev(fast.log_posterior, score));
        if fast.segmentation != seg {
            mismatches += 1;
        }
    }
    Ok((max_dev, mismatches))
}
