//! Seeded synthetic corpora: transcripts drawn from a small pool of
//! orderings, Poisson segment lengths, and features scattered around one
//! center per class.

use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::data::{write_dataset, Dataset, FrameSequence, LabelSet, Transcript, Video};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BACKGROUND_NAME: &str = "background";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Number of classes, including background when `background_prob > 0`.
    pub classes: usize,
    pub dim: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    /// Inclusive range of action segments per transcript, background excluded.
    pub min_actions: usize,
    pub max_actions: usize,
    /// Number of distinct action orderings videos draw from, like a handful
    /// of activities that each fix a typical order.
    pub orderings: usize,
    /// Poisson mean segment length per class.
    pub mean_lengths: Vec<f64>,
    /// One center per class; drawn from `N(0, center_scale²)` when `None`.
    pub centers: Option<Vec<Vec<f64>>>,
    pub center_scale: f64,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
    /// Probability of a leading and, independently, a trailing background segment.
    pub background_prob: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// A well separated corpus with `classes` actions and no background.
    pub fn separable(classes: usize, dim: usize, train: usize, test: usize, seed: u64) -> Self {
        Self {
            classes,
            dim,
            train_videos: train,
            test_videos: test,
            min_actions: 3.min(classes),
            max_actions: 5.min(classes.max(1) * 2),
            orderings: 8,
            mean_lengths: (0..classes).map(|a| 12.0 + 4.0 * (a % 4) as f64).collect(),
            centers: None,
            center_scale: 1.5,
            noise: 1.0,
            background_prob: 0.0,
            seed,
        }
    }

    pub fn has_background(&self) -> bool {
        self.background_prob > 0.0
    }

    fn action_classes(&self) -> Vec<usize> {
        let first = usize::from(self.has_background());
        (first..self.classes).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |what, reason: String| Err(Error::invalid(what, reason));
        if self.classes == 0 || self.dim == 0 {
            return fail("synthetic config", format!("K={} D={}", self.classes, self.dim));
        }
        if self.train_videos + self.test_videos == 0 {
            return fail("synthetic config", "no videos requested".into());
        }
        if self.min_actions == 0 || self.min_actions > self.max_actions {
            return fail(
                "transcript length range",
                format!("[{}, {}]", self.min_actions, self.max_actions),
            );
        }
        if self.orderings == 0 {
            return fail("orderings", "must be at least 1".into());
        }
        let actions = self.action_classes().len();
        if actions == 0 {
            return fail("synthetic config", "no action classes besides background".into());
        }
        if actions == 1 && self.min_actions > 1 {
            return fail(
                "transcript length range",
                format!("a single action class cannot form {} segments without repeats", self.min_actions),
            );
        }
        if self.mean_lengths.len() != self.classes
            || self.mean_lengths.iter().any(|&l| !(l > 0.0 && l.is_finite()))
        {
            return fail("mean lengths", format!("{:?}", self.mean_lengths));
        }
        if let Some(c) = &self.centers {
            if c.len() != self.classes || c.iter().any(|row| row.len() != self.dim) {
                return fail("centers", format!("expected {}x{}", self.classes, self.dim));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.center_scale >= 0.0) {
            return fail("noise scale", format!("{}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.background_prob) {
            return fail("background probability", format!("{}", self.background_prob));
        }
        Ok(())
    }

    pub fn label_set(&self) -> Result<LabelSet> {
        if self.has_background() {
            let names = std::iter::once(BACKGROUND_NAME.to_string())
                .chain((1..self.classes).map(|a| format!("action{a}")))
                .collect();
            LabelSet::new(names, Some(0))
        } else {
            LabelSet::new((0..self.classes).map(|a| format!("action{a}")).collect(), None)
        }
    }
}

/// A generated train/test split with the class centers used.
#[derive(Debug, Clone)]
pub struct SynthCorpus<S> {
    pub train: Dataset<S>,
    pub test: Dataset<S>,
    pub centers: Array2<f64>,
}

fn sample_ordering(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let actions = cfg.action_classes();
    let n = rng.random_range(cfg.min_actions..=cfg.max_actions);
    let mut out: Vec<usize> = Vec::with_capacity(n);
    while out.len() < n {
        let a = *actions.choose(rng).expect("non-empty");
        if out.last() != Some(&a) {
            out.push(a);
        }
    }
    out
}

pub fn generate_synthetic<S: Scalar>(cfg: &SynthConfig) -> Result<SynthCorpus<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = match &cfg.centers {
        Some(c) => Array2::from_shape_fn((cfg.classes, cfg.dim), |(a, j)| c[a][j]),
        None => {
            let normal = Normal::new(0.0, cfg.center_scale).map_err(|e| Error::invalid("center scale", e.to_string()))?;
            Array2::from_shape_fn((cfg.classes, cfg.dim), |_| normal.sample(&mut rng))
        }
    };
    let orderings: Vec<Vec<usize>> = (0..cfg.orderings).map(|_| sample_ordering(cfg, &mut rng)).collect();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid("noise scale", e.to_string()))?;
    let poissons = cfg
        .mean_lengths
        .iter()
        .map(|&l| Poisson::new(l).map_err(|e| Error::invalid("mean lengths", e.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let make = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Video<S>>> {
        (0..count)
            .map(|i| {
                let mut labels = orderings.choose(rng).expect("non-empty").clone();
                if cfg.has_background() {
                    if rng.random_bool(cfg.background_prob) {
                        labels.insert(0, 0);
                    }
                    if rng.random_bool(cfg.background_prob) {
                        labels.push(0);
                    }
                }
                let mut frames = Vec::new();
                for &a in &labels {
                    let len = loop {
                        let l = poissons[a].sample(rng) as usize;
                        if l > 0 {
                            break l;
                        }
                    };
                    frames.extend(std::iter::repeat_n(a, len));
                }
                let feats = Array2::from_shape_fn((frames.len(), cfg.dim), |(t, j)| {
                    S::lit(centers[[frames[t], j]] + noise.sample(rng))
                });
                Ok(Video {
                    features: FrameSequence::new(format!("{prefix}_{i:04}"), feats)?,
                    transcript: Transcript::new(labels)?,
                    ground_truth: Some(frames),
                })
            })
            .collect()
    };
    let train_videos = make("train", cfg.train_videos, &mut rng)?;
    let test_videos = make("test", cfg.test_videos, &mut rng)?;
    let label_set = cfg.label_set()?;
    Ok(SynthCorpus {
        train: Dataset {
            label_set: label_set.clone(),
            videos: train_videos,
        },
        test: Dataset {
            label_set,
            videos: test_videos,
        },
        centers,
    })
}

/// Generates a corpus and writes it as `dir/train` and `dir/test`.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<SynthCorpus<f64>> {
    let corpus = generate_synthetic::<f64>(cfg)?;
    write_dataset(&dir.join("train"), &corpus.train)?;
    write_dataset(&dir.join("test"), &corpus.test)?;
    Ok(corpus)
}
