//! Segment-level HMM: frame likelihoods from scorer posteriors and a class
//! prior, a Poisson length model, and Viterbi decoding constrained to a
//! transcript.
//!
//! The posterior of a segmentation `(a_1..a_N, l_1..l_N)` is scored in log
//! space as
//!
//! ```text
//! Σ_t [log p(a_n(t) | x_t) - log p(a_n(t))]  +  Σ_n log Poisson(l_n; λ_{a_n})
//! ```
//!
//! The constant transcript prior is dropped.

use std::collections::BTreeSet;

use ndarray::Array2;
use statrs::function::gamma::ln_gamma;

use crate::data::{FrameLogPosteriors, Segmentation, Transcript};
use crate::error::{Error, Result};
use crate::prefix::PrefixSums;
use crate::scalar::{log_sum_exp, Scalar};

/// Class prior `log p(a)`, a normalized length-K vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior<S> {
    log_p: Vec<S>,
}

impl<S: Scalar> ClassPrior<S> {
    pub fn new(log_p: Vec<S>) -> Result<Self> {
        if log_p.is_empty() {
            return Err(Error::invalid("class prior", "needs at least one class"));
        }
        if log_p.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("class prior", "every class needs positive probability"));
        }
        let z = log_sum_exp(log_p.iter().copied());
        if !(z.abs() <= S::lit(1e-6)) {
            return Err(Error::invalid("class prior", format!("normalizes to {z} instead of 0")));
        }
        Ok(Self { log_p })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            log_p: vec![-S::from_usize_lossy(k).ln(); k],
        }
    }

    /// Normalizes non-negative weights into a prior.
    pub fn from_weights(weights: &[S]) -> Result<Self> {
        let total = weights.iter().fold(S::zero(), |a, &b| a + b);
        if weights.iter().any(|&w| !(w > S::zero())) || !total.is_finite() {
            return Err(Error::invalid("class prior", "weights must be positive and finite"));
        }
        Self::new(weights.iter().map(|&w| (w / total).ln()).collect())
    }

    pub fn log_p(&self) -> &[S] {
        &self.log_p
    }

    pub fn probs(&self) -> Vec<S> {
        self.log_p.iter().map(|x| x.exp()).collect()
    }

    pub fn classes(&self) -> usize {
        self.log_p.len()
    }
}

/// Per-class Poisson means of segment length.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthModel<S> {
    lambda: Vec<S>,
}

impl<S: Scalar> LengthModel<S> {
    pub fn new(lambda: Vec<S>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::invalid("length model", "needs at least one class"));
        }
        if let Some(bad) = lambda.iter().find(|l| !(l.is_finite() && **l > S::zero())) {
            return Err(Error::invalid("length model", format!("mean length {bad} is not positive")));
        }
        Ok(Self { lambda })
    }

    pub fn constant(k: usize, lambda: S) -> Result<Self> {
        Self::new(vec![lambda; k])
    }

    pub fn lambda(&self) -> &[S] {
        &self.lambda
    }

    pub fn classes(&self) -> usize {
        self.lambda.len()
    }
}

/// `log p(x_t | a)` up to a constant: `log p(a | x_t) - log p(a)`.
pub fn frame_log_likelihood<S: Scalar>(
    post: &FrameLogPosteriors<S>,
    prior: &ClassPrior<S>,
) -> Result<Array2<S>> {
    if post.classes() != prior.classes() {
        return Err(Error::Shape(format!(
            "posteriors have {} classes, prior has {}",
            post.classes(),
            prior.classes()
        )));
    }
    let mut out = post.values().to_owned();
    for mut row in out.rows_mut() {
        for (x, &lp) in row.iter_mut().zip(prior.log_p()) {
            *x -= lp;
        }
    }
    Ok(out)
}

/// `log Poisson(l; λ) = l log λ - λ - log Γ(l + 1)`.
pub fn poisson_log_pmf<S: Scalar>(l: usize, lambda: S) -> Result<S> {
    if !(lambda > S::zero() && lambda.is_finite()) {
        return Err(Error::invalid("Poisson mean", format!("{lambda} is not positive")));
    }
    let lf = S::from_usize_lossy(l);
    Ok(lf * lambda.ln() - lambda - S::lit(ln_gamma(l as f64 + 1.0)))
}

/// Decoder knobs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ViterbiOptions {
    /// Caps segment length, trading exactness for O(T·cap·N) time. `None` is exact.
    pub max_segment_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiResult<S> {
    pub segmentation: Segmentation,
    /// Unnormalized log posterior of the decoded segmentation.
    pub log_posterior: S,
}

pub fn constrained_viterbi<S: Scalar>(
    post: &FrameLogPosteriors<S>,
    prior: &ClassPrior<S>,
    lengths: &LengthModel<S>,
    transcript: &Transcript,
) -> Result<ViterbiResult<S>> {
    constrained_viterbi_with(post, prior, lengths, transcript, &ViterbiOptions::default())
}

/// Maximizes the segmentation log posterior over all length assignments for
/// `transcript`. Among equal scores the earlier boundary wins at every step.
pub fn constrained_viterbi_with<S: Scalar>(
    post: &FrameLogPosteriors<S>,
    prior: &ClassPrior<S>,
    lengths: &LengthModel<S>,
    transcript: &Transcript,
    opts: &ViterbiOptions,
) -> Result<ViterbiResult<S>> {
    let t_len = post.frames();
    let k = post.classes();
    let labels = transcript.labels();
    let n_len = labels.len();
    if n_len == 0 {
        return Err(Error::invalid("transcript", "empty"));
    }
    transcript.check_classes(k)?;
    if lengths.classes() != k {
        return Err(Error::Shape(format!(
            "length model has {} classes, posteriors {}",
            lengths.classes(),
            k
        )));
    }
    if n_len > t_len {
        return Err(Error::Infeasible { n: n_len, t: t_len });
    }
    let cap = opts.max_segment_len.unwrap_or(t_len).min(t_len);
    if cap == 0 || n_len * cap < t_len {
        return Err(Error::invalid(
            "max segment length",
            format!("{n_len} segments of at most {cap} frames cannot cover {t_len} frames"),
        ));
    }

    let loglik = frame_log_likelihood(post, prior)?;
    let cum = PrefixSums::new(loglik.view());
    let mut length_table: Vec<Option<Vec<S>>> = vec![None; k];
    for &a in labels {
        if length_table[a].is_none() {
            let row = (0..=cap)
                .map(|l| poisson_log_pmf(l, lengths.lambda()[a]))
                .collect::<Result<Vec<S>>>()?;
            length_table[a] = Some(row);
        }
    }

    let neg = S::neg_infinity();
    let width = t_len + 1;
    let mut score = vec![neg; (n_len + 1) * width];
    let mut back = vec![usize::MAX; (n_len + 1) * width];
    let mut reached = vec![false; (n_len + 1) * width];
    score[0] = S::zero();
    reached[0] = true;

    for n in 1..=n_len {
        let a = labels[n - 1];
        let pois = length_table[a].as_deref().unwrap();
        let prev = (n - 1) * width;
        let cur = n * width;
        let t_max = t_len - (n_len - n);
        for t in n..=t_max {
            let lo = (n - 1).max(t.saturating_sub(cap));
            let mut best: Option<(S, usize)> = None;
            for tp in lo..t {
                if !reached[prev + tp] {
                    continue;
                }
                let cand = score[prev + tp] + cum.range(tp, t, a) + pois[t - tp];
                best = match best {
                    None => Some((cand, tp)),
                    Some((b, _)) if cand > b + S::tie_slack(b) || (b == neg && cand > neg) => {
                        Some((cand, tp))
                    }
                    keep => keep,
                };
            }
            if let Some((s, tp)) = best {
                score[cur + t] = s;
                back[cur + t] = tp;
                reached[cur + t] = true;
            }
        }
    }

    if !reached[n_len * width + t_len] {
        return Err(Error::Infeasible { n: n_len, t: t_len });
    }
    let mut cuts = vec![0; n_len + 1];
    cuts[n_len] = t_len;
    for n in (1..=n_len).rev() {
        cuts[n - 1] = back[n * width + cuts[n]];
    }
    let segmentation = Segmentation::from_cuts(labels.to_vec(), &cuts)?;
    Ok(ViterbiResult {
        segmentation,
        log_posterior: score[n_len * width + t_len],
    })
}

pub fn select_transcript<S: Scalar>(
    post: &FrameLogPosteriors<S>,
    prior: &ClassPrior<S>,
    lengths: &LengthModel<S>,
    candidates: &[Transcript],
) -> Result<(Transcript, ViterbiResult<S>)> {
    select_transcript_with(post, prior, lengths, candidates, &ViterbiOptions::default())
}

/// Decodes against every distinct candidate and keeps the highest log
/// posterior; equal scores go to the lexicographically smaller transcript.
/// Candidates longer than the video are skipped.
pub fn select_transcript_with<S: Scalar>(
    post: &FrameLogPosteriors<S>,
    prior: &ClassPrior<S>,
    lengths: &LengthModel<S>,
    candidates: &[Transcript],
    opts: &ViterbiOptions,
) -> Result<(Transcript, ViterbiResult<S>)> {
    let t = post.frames();
    if candidates.is_empty() {
        return Err(Error::invalid("transcript pool", "empty"));
    }
    let unique: BTreeSet<&Transcript> = candidates.iter().collect();
    let mut best: Option<(&Transcript, ViterbiResult<S>)> = None;
    for cand in unique {
        if cand.len() > t {
            continue;
        }
        let res = match constrained_viterbi_with(post, prior, lengths, cand, opts) {
            Ok(r) => r,
            Err(Error::Infeasible { .. }) | Err(Error::Invalid { what: "max segment length", .. }) => {
                continue
            }
            Err(e) => return Err(e),
        };
        let better = match &best {
            None => true,
            Some((_, b)) => res.log_posterior > b.log_posterior,
        };
        if better {
            best = Some((cand, res));
        }
    }
    best.map(|(tr, r)| (tr.clone(), r))
        .ok_or(Error::NoFeasibleTranscript { t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn post_from_probs(rows: &[&[f64]]) -> FrameLogPosteriors<f64> {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        FrameLogPosteriors::new(Array2::from_shape_vec((rows.len(), k), flat).unwrap()).unwrap()
    }

    #[test]
    fn uniform_prior_shifts_by_log_k() {
        let post = post_from_probs(&[&[0.2, 0.3, 0.5], &[0.6, 0.3, 0.1]]);
        let ll = frame_log_likelihood(&post, &ClassPrior::uniform(3)).unwrap();
        for (x, y) in ll.iter().zip(post.values().iter()) {
            assert_abs_diff_eq!(*x, *y + 3f64.ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn posterior_equal_to_prior_cancels() {
        let prior = ClassPrior::from_weights(&[0.25, 0.75]).unwrap();
        let post = post_from_probs(&[&[0.25, 0.75], &[0.25, 0.75]]);
        let ll = frame_log_likelihood(&post, &prior).unwrap();
        assert!(ll.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn two_class_likelihood_row() {
        // posteriors 0.9 / 0.1 against a uniform prior
        let row = array![[0.9f64.ln(), 0.1f64.ln()]];
        let shift = log_sum_exp(row.iter().copied());
        let post = FrameLogPosteriors::new(row.mapv(|x| x - shift)).unwrap();
        let prior = ClassPrior::new(vec![-2f64.ln(); 2]).unwrap();
        let ll = frame_log_likelihood(&post, &prior).unwrap();
        assert_abs_diff_eq!(ll[[0, 0]] + shift, 0.5877, epsilon = 1e-4);
        assert_abs_diff_eq!(ll[[0, 1]] + shift, -1.6095, epsilon = 1e-4);
        assert!(frame_log_likelihood(&post, &ClassPrior::uniform(3)).is_err());
    }

    #[test]
    fn poisson_values() {
        assert_abs_diff_eq!(poisson_log_pmf(0, 1.0f64).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(poisson_log_pmf(2, 2.0f64).unwrap(), 2f64.ln() - 2.0, epsilon = 1e-12);
        let direct = (5f64.powi(5) * (-5f64).exp() / 120.0).ln();
        assert_abs_diff_eq!(poisson_log_pmf(5, 5.0f64).unwrap(), direct, epsilon = 1e-12);
        assert_abs_diff_eq!(direct, -1.74030, epsilon = 1e-5);
        assert!(poisson_log_pmf(3, 0.0f64).is_err());
        assert!(poisson_log_pmf(3, -1.0f64).is_err());
    }

    #[test]
    fn poisson_sums_to_one() {
        for &lambda in &[0.5f64, 1.0, 3.7, 20.0, 150.0] {
            let upper = (lambda + 12.0 * lambda.sqrt()).ceil() as usize;
            let total: f64 = (0..=upper).map(|l| poisson_log_pmf(l, lambda).unwrap().exp()).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn single_frame_single_segment() {
        let post = post_from_probs(&[&[0.7, 0.3]]);
        let prior = ClassPrior::uniform(2);
        let lm = LengthModel::new(vec![4.0, 2.0]).unwrap();
        let res = constrained_viterbi(&post, &prior, &lm, &Transcript::new(vec![1]).unwrap()).unwrap();
        assert_eq!(res.segmentation.lengths(), &[1]);
        let ll = frame_log_likelihood(&post, &prior).unwrap();
        let expected = ll[[0, 1]] + poisson_log_pmf(1, 2.0).unwrap();
        assert_abs_diff_eq!(res.log_posterior, expected, epsilon = 1e-15);
    }

    #[test]
    fn three_frames_two_segments() {
        let post = post_from_probs(&[&[0.95, 0.05], &[0.95, 0.05], &[0.05, 0.95]]);
        let prior = ClassPrior::uniform(2);
        let lm = LengthModel::constant(2, 1.5).unwrap();
        let tr = Transcript::new(vec![0, 1]).unwrap();
        let res = constrained_viterbi(&post, &prior, &lm, &tr).unwrap();
        assert_eq!(res.segmentation.lengths(), &[2, 1]);
        assert_eq!(res.segmentation.labels(), &[0, 1]);
    }

    #[test]
    fn infeasible_and_unknown_class() {
        let post = post_from_probs(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let prior = ClassPrior::uniform(2);
        let lm = LengthModel::constant(2, 1.0).unwrap();
        assert!(matches!(
            constrained_viterbi(&post, &prior, &lm, &Transcript::new(vec![0, 1, 0]).unwrap()),
            Err(Error::Infeasible { n: 3, t: 2 })
        ));
        assert!(matches!(
            constrained_viterbi(&post, &prior, &lm, &Transcript::new(vec![5]).unwrap()),
            Err(Error::UnknownClass { .. })
        ));
    }

    #[test]
    fn exact_tie_goes_to_earlier_boundary() {
        // frame terms cancel to exactly zero; (1,2) and (2,1) share the same length terms
        let post = FrameLogPosteriors::<f64>::uniform(3, 2);
        let prior = ClassPrior::uniform(2);
        let lm = LengthModel::constant(2, 1.5).unwrap();
        let res = constrained_viterbi(&post, &prior, &lm, &Transcript::new(vec![0, 1]).unwrap()).unwrap();
        assert_eq!(res.segmentation.lengths(), &[1, 2]);
    }

    #[test]
    fn segment_cap_limits_lengths() {
        let post = FrameLogPosteriors::<f64>::uniform(10, 2);
        let prior = ClassPrior::uniform(2);
        let lm = LengthModel::new(vec![9.0, 1.0]).unwrap();
        let tr = Transcript::new(vec![0, 1]).unwrap();
        let opts = ViterbiOptions {
            max_segment_len: Some(6),
        };
        let res = constrained_viterbi_with(&post, &prior, &lm, &tr, &opts).unwrap();
        assert!(res.segmentation.lengths().iter().all(|&l| l <= 6));
        assert_eq!(res.segmentation.total_frames(), 10);
        let opts = ViterbiOptions {
            max_segment_len: Some(4),
        };
        assert!(constrained_viterbi_with(&post, &prior, &lm, &tr, &opts).is_err());
    }

    #[test]
    fn selection_prefers_true_transcript_and_dedups() {
        let post = post_from_probs(&[
            &[0.9, 0.05, 0.05],
            &[0.9, 0.05, 0.05],
            &[0.05, 0.05, 0.9],
            &[0.05, 0.05, 0.9],
        ]);
        let prior = ClassPrior::uniform(3);
        let lm = LengthModel::constant(3, 2.0).unwrap();
        let truth = Transcript::new(vec![0, 2]).unwrap();
        let other = Transcript::new(vec![0, 1]).unwrap();
        let (best, res) =
            select_transcript(&post, &prior, &lm, &[other.clone(), truth.clone()]).unwrap();
        assert_eq!(best, truth);
        let (again, res2) = select_transcript(
            &post,
            &prior,
            &lm,
            &[truth.clone(), other.clone(), truth.clone(), other],
        )
        .unwrap();
        assert_eq!(again, best);
        assert_eq!(res2, res);

        let (single, _) = select_transcript(&post, &prior, &lm, &[Transcript::new(vec![1]).unwrap()]).unwrap();
        assert_eq!(single.labels(), &[1]);
    }

    #[test]
    fn selection_ties_go_to_smaller_transcript() {
        let post = FrameLogPosteriors::<f64>::uniform(3, 3);
        let prior = ClassPrior::uniform(3);
        let lm = LengthModel::constant(3, 3.0).unwrap();
        let a = Transcript::new(vec![2]).unwrap();
        let b = Transcript::new(vec![1]).unwrap();
        let (best, _) = select_transcript(&post, &prior, &lm, &[a, b.clone()]).unwrap();
        assert_eq!(best, b);
    }

    #[test]
    fn selection_fails_when_nothing_fits() {
        let post = FrameLogPosteriors::<f64>::uniform(1, 2);
        let prior = ClassPrior::uniform(2);
        let lm = LengthModel::constant(2, 1.0).unwrap();
        let long = Transcript::new(vec![0, 1]).unwrap();
        assert!(matches!(
            select_transcript(&post, &prior, &lm, &[long]),
            Err(Error::NoFeasibleTranscript { t: 1 })
        ));
    }
}
