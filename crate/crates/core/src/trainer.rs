//! Training loop and inference entry points.
//!
//! Each step decodes a pseudo ground truth with the transcript constrained
//! Viterbi, builds the segmentation graph around it, and takes one SGD step
//! on the chosen graph loss. Length means and class priors are re-estimated
//! from the accumulated pseudo ground truths after the step, so they only
//! affect later iterations.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, FrameSequence, Segmentation, Transcript, Video};
use crate::error::{Error, Result};
use crate::hmm::{
    constrained_viterbi_with, select_transcript_with, ClassPrior, LengthModel, ViterbiOptions,
};
use crate::losses::{loss_backward, LossKind};
use crate::scorer::{
    read_params_from, scorer_backward, scorer_forward, write_params, LineReader, ScorerKind,
    ScorerParams, DEFAULT_HIDDEN,
};
use crate::seggraph::{best_valid_path, build_graph, path_energy, PathAssignment};
use crate::scalar::Scalar;

/// Running statistics over every recorded pseudo ground truth.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PseudoGtHistory {
    frames: Vec<u64>,
    segments: Vec<u64>,
    total_frames: u64,
}

impl PseudoGtHistory {
    pub fn new(classes: usize) -> Self {
        Self {
            frames: vec![0; classes],
            segments: vec![0; classes],
            total_frames: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.frames.len()
    }

    /// Frames per class. Segment lengths sum to these, so they double as the
    /// total segment length per class.
    pub fn frames(&self) -> &[u64] {
        &self.frames
    }

    pub fn segments(&self) -> &[u64] {
        &self.segments
    }

    pub fn total_frames(&self) -> u64 {
        self.total_frames
    }

    pub fn record(&mut self, seg: &Segmentation) -> Result<()> {
        if let Some(&a) = seg.labels().iter().find(|&&a| a >= self.classes()) {
            return Err(Error::UnknownClass {
                class: a,
                k: self.classes(),
            });
        }
        for (&a, &l) in seg.labels().iter().zip(seg.lengths()) {
            self.frames[a] += l as u64;
            self.segments[a] += 1;
        }
        self.total_frames += seg.total_frames() as u64;
        Ok(())
    }

    /// Mean segment length per observed class; unobserved classes keep `fallback`.
    pub fn length_model<S: Scalar>(&self, fallback: &LengthModel<S>) -> Result<LengthModel<S>> {
        let lambda = (0..self.classes())
            .map(|a| match self.segments[a] {
                0 => fallback.lambda()[a],
                n => S::lit(self.frames[a] as f64 / n as f64),
            })
            .collect();
        LengthModel::new(lambda)
    }

    /// Normalized frame frequencies. Unobserved classes get `1 / (total + K)`
    /// before normalization so no class has zero mass.
    pub fn class_prior<S: Scalar>(&self) -> Result<ClassPrior<S>> {
        let k = self.classes();
        if self.total_frames == 0 {
            return Ok(ClassPrior::uniform(k));
        }
        let floor = 1.0 / (self.total_frames as f64 + k as f64);
        let weights: Vec<S> = self
            .frames
            .iter()
            .map(|&f| match f {
                0 => S::lit(floor),
                f => S::lit(f as f64 / self.total_frames as f64),
            })
            .collect();
        ClassPrior::from_weights(&weights)
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Neighbor window Δ around each anchor cut.
    pub window: usize,
    pub loss: LossKind,
    pub iterations: usize,
    pub lr: f64,
    /// Iteration (0-based) from which `lr_dropped` applies. `None` means 60% of `iterations`.
    pub lr_drop_at: Option<usize>,
    pub lr_dropped: f64,
    pub seed: u64,
    pub scorer: ScorerKind,
    pub hidden: usize,
    /// Optional cap on decoded segment length, for long videos.
    pub max_segment_len: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 20,
            loss: LossKind::Constrained,
            iterations: 2000,
            lr: 0.01,
            lr_drop_at: None,
            lr_dropped: 0.001,
            seed: 0,
            scorer: ScorerKind::Gru,
            hidden: DEFAULT_HIDDEN,
            max_segment_len: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be at least 1"));
        }
        for (what, lr) in [("learning rate", self.lr), ("dropped learning rate", self.lr_dropped)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(what, format!("{lr} is not positive")));
            }
        }
        if let LossKind::Discriminative { alpha } = self.loss {
            LossKind::discriminative(alpha)?;
        }
        if self.scorer == ScorerKind::Gru && self.hidden == 0 {
            return Err(Error::invalid("hidden size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn drop_iteration(&self) -> usize {
        self.lr_drop_at
            .unwrap_or_else(|| (self.iterations as f64 * 0.6).round() as usize)
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.drop_iteration() {
            self.lr
        } else {
            self.lr_dropped
        }
    }

    fn viterbi_options(&self) -> ViterbiOptions {
        ViterbiOptions {
            max_segment_len: self.max_segment_len,
        }
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S> {
    pub params: ScorerParams<S>,
    pub prior: ClassPrior<S>,
    pub lengths: LengthModel<S>,
    pub history: PseudoGtHistory,
    /// Window used for inference.
    pub window: usize,
    pub max_segment_len: Option<usize>,
}

/// Seeded scorer, uniform prior, and `λ = mean T / mean N` for every class.
pub fn init_state<S: Scalar>(cfg: &TrainConfig, dataset: &Dataset<S>) -> Result<ModelState<S>> {
    cfg.validate()?;
    let (mean_t, mean_n) = dataset
        .mean_lengths()
        .ok_or_else(|| Error::invalid("dataset", "no videos"))?;
    let k = dataset.label_set.len();
    let d = dataset.videos[0].features.dim();
    Ok(ModelState {
        params: ScorerParams::init(cfg.scorer, d, cfg.hidden, k, cfg.seed)?,
        prior: ClassPrior::uniform(k),
        lengths: LengthModel::constant(k, S::lit(mean_t / mean_n))?,
        history: PseudoGtHistory::new(k),
        window: cfg.window,
        max_segment_len: cfg.max_segment_len,
    })
}

/// Outcome of one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport<S> {
    pub video_id: String,
    pub lr: f64,
    /// Loss before the update; `None` when the step was skipped.
    pub loss: Option<S>,
    pub anchor: Option<Segmentation>,
    pub skipped: Option<String>,
}

impl<S: Scalar> StepReport<S> {
    fn skip(video_id: &str, lr: f64, why: String) -> Self {
        Self {
            video_id: video_id.to_string(),
            lr,
            loss: None,
            anchor: None,
            skipped: Some(why),
        }
    }
}

/// One SGD step on one video. Infeasible transcripts and non-finite losses
/// skip the update and leave the state untouched.
pub fn train_step<S: Scalar>(
    state: &mut ModelState<S>,
    video: &FrameSequence<S>,
    transcript: &Transcript,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepReport<S>> {
    let id = video.video_id();
    if transcript.len() > video.len() {
        return Ok(StepReport::skip(
            id,
            lr,
            format!("{} labels exceed {} frames", transcript.len(), video.len()),
        ));
    }
    let (post, cache) = scorer_forward(&state.params, video)?;
    let anchor = match constrained_viterbi_with(
        &post,
        &state.prior,
        &state.lengths,
        transcript,
        &cfg.viterbi_options(),
    ) {
        Ok(r) => r.segmentation,
        Err(e @ Error::Infeasible { .. }) => return Ok(StepReport::skip(id, lr, e.to_string())),
        Err(e) => return Err(e),
    };
    let graph = build_graph(&anchor, &post, cfg.window)?;
    let grads = match loss_backward(&graph, transcript, cfg.loss) {
        Ok(g) => g,
        Err(e @ Error::NonFinite { .. }) => return Ok(StepReport::skip(id, lr, e.to_string())),
        Err(e) => return Err(e),
    };
    let pgrads = scorer_backward(&state.params, &cache, grads.d_frame.view())?;
    if pgrads.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
        return Ok(StepReport::skip(id, lr, "non-finite parameter gradient".into()));
    }
    state.params.sgd_step(&pgrads, S::lit(lr))?;

    state.history.record(&anchor)?;
    state.lengths = state.history.length_model(&state.lengths)?;
    state.prior = state.history.class_prior()?;
    Ok(StepReport {
        video_id: id.to_string(),
        lr,
        loss: Some(grads.value),
        anchor: Some(anchor),
        skipped: None,
    })
}

/// Runs `cfg.iterations` steps, sampling videos uniformly with replacement.
/// Each report is also written to `log` as `iteration video_id loss lr`.
pub fn train<S: Scalar>(
    state: &mut ModelState<S>,
    dataset: &Dataset<S>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepReport<S>>> {
    cfg.validate()?;
    if dataset.videos.is_empty() {
        return Err(Error::invalid("dataset", "no videos"));
    }
    // separate stream from the initialization seed
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a3b_1e00_0001);
    let mut reports = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let v = &dataset.videos[rng.random_range(0..dataset.videos.len())];
        let lr = cfg.lr_at(it);
        let report = train_step(state, &v.features, &v.transcript, cfg, lr)?;
        if let Some(out) = log.as_deref_mut() {
            let loss = report
                .loss
                .map_or_else(|| "nan".to_string(), |l| format!("{}", l.as_f64()));
            writeln!(out, "{} {} {} {}", it + 1, report.video_id, loss, lr)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// An inference result with the Viterbi anchor it was refined from.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<S> {
    pub transcript: Transcript,
    pub anchor: Segmentation,
    pub segmentation: Segmentation,
    pub anchor_energy: S,
    pub energy: S,
}

fn refine<S: Scalar>(
    state: &ModelState<S>,
    post: &crate::data::FrameLogPosteriors<S>,
    transcript: Transcript,
    anchor: Segmentation,
) -> Result<Decoded<S>> {
    let graph = build_graph(&anchor, post, state.window)?;
    let anchor_energy = path_energy(&graph, &PathAssignment::from_segmentation(&anchor))?;
    let (path, energy) = best_valid_path(&graph, &transcript)?;
    Ok(Decoded {
        transcript,
        anchor,
        segmentation: path.to_segmentation()?,
        anchor_energy,
        energy,
    })
}

/// Action segmentation: picks the best transcript from `pool`, then returns
/// the minimum-energy valid path of the graph around its Viterbi anchor.
pub fn segment<S: Scalar>(
    state: &ModelState<S>,
    video: &FrameSequence<S>,
    pool: &[Transcript],
) -> Result<Decoded<S>> {
    let (post, _) = scorer_forward(&state.params, video)?;
    let opts = ViterbiOptions {
        max_segment_len: state.max_segment_len,
    };
    let (transcript, res) = select_transcript_with(&post, &state.prior, &state.lengths, pool, &opts)?;
    refine(state, &post, transcript, res.segmentation)
}

/// Action alignment: the transcript is given.
pub fn align<S: Scalar>(
    state: &ModelState<S>,
    video: &FrameSequence<S>,
    transcript: &Transcript,
) -> Result<Decoded<S>> {
    let (post, _) = scorer_forward(&state.params, video)?;
    let opts = ViterbiOptions {
        max_segment_len: state.max_segment_len,
    };
    let res = constrained_viterbi_with(&post, &state.prior, &state.lengths, transcript, &opts)?;
    refine(state, &post, transcript.clone(), res.segmentation)
}

/// Segments every video in id order.
pub fn segment_all<S: Scalar>(
    state: &ModelState<S>,
    videos: &[Video<S>],
    pool: &[Transcript],
) -> Result<Vec<Decoded<S>>> {
    videos.iter().map(|v| segment(state, &v.features, pool)).collect()
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

const MAGIC: &str = "weakseg-model";

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_state<S: Scalar, W: Write>(state: &ModelState<S>, out: &mut W) -> Result<()> {
    writeln!(out, "{MAGIC} 1")?;
    writeln!(out, "window {}", state.window)?;
    match state.max_segment_len {
        Some(m) => writeln!(out, "max_segment_len {m}")?,
        None => writeln!(out, "max_segment_len none")?,
    }
    writeln!(out, "classes {}", state.prior.classes())?;
    writeln!(out, "lambda {}", join(state.lengths.lambda().iter().map(|x| x.as_f64())))?;
    writeln!(out, "log_prior {}", join(state.prior.log_p().iter().map(|x| x.as_f64())))?;
    writeln!(out, "history_frames {}", join(state.history.frames()))?;
    writeln!(out, "history_segments {}", join(state.history.segments()))?;
    writeln!(out, "history_total {}", state.history.total_frames())?;
    write_params(&state.params, out)
}

pub fn read_state<S: Scalar, R: BufRead>(input: R) -> Result<ModelState<S>> {
    let mut rd = LineReader::new(input, "model checkpoint");
    let magic = rd.next_line()?;
    if magic != format!("{MAGIC} 1") {
        return Err(rd.err(format!("not a model checkpoint: {magic:?}")));
    }
    let toks = rd.expect("window")?;
    let window: usize = rd.parse(toks.first())?;
    let max_segment_len = match rd.expect("max_segment_len")?.first().map(String::as_str) {
        Some("none") => None,
        tok => Some(rd.parse(tok.map(str::to_string).as_ref())?),
    };
    let toks = rd.expect("classes")?;
    let k: usize = rd.parse(toks.first())?;
    let vector = |rd: &mut LineReader<R>, key: &str| -> Result<Vec<f64>> {
        let toks = rd.expect(key)?;
        if toks.len() != k {
            return Err(rd.err(format!("{key} has {} entries, expected {k}", toks.len())));
        }
        toks.iter().map(|t| rd.parse(Some(t))).collect()
    };
    let lambda = vector(&mut rd, "lambda")?;
    let log_prior = vector(&mut rd, "log_prior")?;
    let frames = vector(&mut rd, "history_frames")?;
    let segments = vector(&mut rd, "history_segments")?;
    let toks = rd.expect("history_total")?;
    let total: u64 = rd.parse(toks.first())?;
    let params: ScorerParams<S> = read_params_from(&mut rd)?;
    if params.classes() != k {
        return Err(rd.err(format!("scorer has {} classes, expected {k}", params.classes())));
    }
    let history = PseudoGtHistory {
        frames: frames.iter().map(|&x| x as u64).collect(),
        segments: segments.iter().map(|&x| x as u64).collect(),
        total_frames: total,
    };
    Ok(ModelState {
        params,
        prior: ClassPrior::new(log_prior.into_iter().map(S::lit).collect())?,
        lengths: LengthModel::new(lambda.into_iter().map(S::lit).collect())?,
        history,
        window,
        max_segment_len,
    })
}
