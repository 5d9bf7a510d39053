//! Brute-force reference implementations used to check the dynamic programs:
//! exhaustive length compositions for the Viterbi decoder, exhaustive path
//! enumeration for the lattice losses, and central finite differences for
//! every gradient.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FrameLogPosteriors, FrameSequence, Segmentation, Transcript};
use crate::error::{Error, Result};
use crate::hmm::{frame_log_likelihood, poisson_log_pmf, ClassPrior, LengthModel};
use crate::losses::{loss_backward, LossKind};
use crate::scalar::{log_sum_exp, Scalar};
use crate::scorer::{forward_features, scorer_backward, ParamGradients, ScorerParams};
use crate::seggraph::{EdgeEnergies, Lattice};

/// Central difference step used throughout.
pub const FD_STEP: f64 = 1e-5;

/// Deviation `|a - b| / max(|a|, |b|, floor)`; the floor keeps values near
/// zero from turning rounding noise into large ratios.
pub fn rel_dev(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-3;
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

// ---------------------------------------------------------------------------
// Viterbi
// ---------------------------------------------------------------------------

/// Calls `f` with every vector `1 ≤ l_1..l_n` summing to `total`.
fn for_each_composition(total: usize, parts: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(rem: usize, parts: usize, acc: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if parts == 1 {
            acc.push(rem);
            f(acc);
            acc.pop();
            return;
        }
        for l in 1..=rem - (parts - 1) {
            acc.push(l);
            rec(rem - l, parts - 1, acc, f);
            acc.pop();
        }
    }
    if parts >= 1 && total >= parts {
        rec(total, parts, &mut Vec::with_capacity(parts), f);
    }
}

/// Scores every length composition directly. Among scores within a relative
/// `1e-10` of the best, returns the segmentation with the earliest last cut,
/// then the earliest second to last cut, and so on.
pub fn brute_force_viterbi<S: Scalar>(
    post: &FrameLogPosteriors<S>,
    prior: &ClassPrior<S>,
    lengths: &LengthModel<S>,
    transcript: &Transcript,
) -> Result<(Segmentation, f64)> {
    let t_len = post.frames();
    let labels = transcript.labels();
    transcript.check_classes(post.classes())?;
    if labels.len() > t_len {
        return Err(Error::Infeasible {
            n: labels.len(),
            t: t_len,
        });
    }
    let ll = frame_log_likelihood(post, prior)?;
    let mut scored: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut err = None;
    for_each_composition(t_len, labels.len(), &mut |ls| {
        let mut total = 0.0;
        let mut t = 0;
        for (&a, &l) in labels.iter().zip(ls) {
            for tt in t..t + l {
                total += ll[[tt, a]].as_f64();
            }
            match poisson_log_pmf(l, lengths.lambda()[a]) {
                Ok(p) => total += p.as_f64(),
                Err(e) => err = Some(e),
            }
            t += l;
        }
        scored.push((total, ls.to_vec()));
    });
    if let Some(e) = err {
        return Err(e);
    }
    let best = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(Error::Infeasible {
            n: labels.len(),
            t: t_len,
        });
    }
    let window = 1e-10 * best.abs().max(1.0);
    let (score, ls) = scored
        .into_iter()
        .filter(|(s, _)| *s >= best - window)
        .min_by(|(_, a), (_, b)| {
            let cuts = |ls: &[usize]| -> Vec<usize> {
                ls.iter()
                    .scan(0, |acc, &l| {
                        *acc += l;
                        Some(*acc)
                    })
                    .collect::<Vec<_>>()
                    .into_iter()
                    .rev()
                    .collect()
            };
            cuts(a).cmp(&cuts(b))
        })
        .expect("at least one composition");
    Ok((Segmentation::new(labels.to_vec(), ls)?, score))
}

// ---------------------------------------------------------------------------
// Lattice losses
// ---------------------------------------------------------------------------

/// Soft minima over explicitly enumerated path sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnumeratedLogadds {
    pub valid: f64,
    pub all: f64,
    pub hard: f64,
    pub paths: usize,
}

fn softmin(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    -log_sum_exp(values.iter().map(|v| -v))
}

/// Enumerates every vertex path and every per-edge class choice.
///
/// * valid: classes equal to the transcript;
/// * all: any classes, each path costs its summed energies;
/// * hard: each edge with class `a` costs `w(a)` if `w(a) < w(a_n)` and 0 otherwise.
pub fn enumerate_logadds<S: Scalar, L: Lattice<S>>(g: &L, transcript: &Transcript) -> Result<EnumeratedLogadds> {
    let layers = g.layers();
    let n_seg = layers.len() - 1;
    let k = g.classes();
    if transcript.len() != n_seg {
        return Err(Error::Shape("transcript length differs from lattice segments".into()));
    }
    let labels = transcript.labels();
    let vertex_paths: u128 = layers.iter().map(|l| l.len() as u128).product();
    let class_paths = (k as u128).pow(n_seg as u32);
    let count = vertex_paths * class_paths;
    if count > 5_000_000 {
        return Err(Error::TooManyPaths {
            count,
            limit: 5_000_000,
        });
    }
    let (mut valid, mut all, mut hard) = (Vec::new(), Vec::new(), Vec::new());
    let mut vs = vec![0usize; n_seg + 1];
    loop {
        let mut cs = vec![0usize; n_seg];
        loop {
            let mut e_all = 0.0;
            let mut e_hard = 0.0;
            for n in 0..n_seg {
                let w = g.energy(n, vs[n], vs[n + 1], cs[n]).as_f64();
                let target = g.energy(n, vs[n], vs[n + 1], labels[n]).as_f64();
                e_all += w;
                if w < target {
                    e_hard += w;
                }
            }
            all.push(e_all);
            hard.push(e_hard);
            if cs == labels {
                valid.push(e_all);
            }
            // advance the class odometer
            let mut n = 0;
            while n < n_seg {
                cs[n] += 1;
                if cs[n] < k {
                    break;
                }
                cs[n] = 0;
                n += 1;
            }
            if n == n_seg {
                break;
            }
        }
        let mut n = 0;
        while n <= n_seg {
            vs[n] += 1;
            if vs[n] < layers[n].len() {
                break;
            }
            vs[n] = 0;
            n += 1;
        }
        if n > n_seg {
            break;
        }
    }
    Ok(EnumeratedLogadds {
        valid: softmin(&valid),
        all: softmin(&all),
        hard: softmin(&hard),
        paths: all.len(),
    })
}

pub fn enumerated_loss(e: &EnumeratedLogadds, kind: LossKind) -> f64 {
    match kind {
        LossKind::Forward => e.valid,
        LossKind::Discriminative { alpha } => e.valid - alpha * e.all,
        LossKind::Constrained => e.valid - e.hard,
    }
}

/// Whether some class energy on edge `(n, i, j)` sits within `margin` of
/// the transcript class energy, where a perturbation could flip hard-set
/// membership.
pub fn near_hard_tie(g: &EdgeEnergies<f64>, transcript: &Transcript, n: usize, i: usize, j: usize, margin: f64) -> bool {
    let a_n = transcript.labels()[n];
    let t = g.weights()[n][[i, j, a_n]];
    (0..g.classes()).any(|a| a != a_n && (g.weights()[n][[i, j, a]] - t).abs() <= margin)
}

/// Central differences of the enumerated loss with respect to every edge
/// energy. Entries of edges near a hard-set tie are `None` for the
/// constrained loss.
pub fn finite_difference_edges(
    g: &EdgeEnergies<f64>,
    transcript: &Transcript,
    kind: LossKind,
    h: f64,
) -> Result<Vec<Array3<Option<f64>>>> {
    let mut out = Vec::with_capacity(g.weights().len());
    let mut probe = g.clone();
    for n in 0..g.weights().len() {
        let (ni, nj, k) = g.weights()[n].dim();
        let mut d = Array3::from_elem((ni, nj, k), None);
        for i in 0..ni {
            for j in 0..nj {
                if kind == LossKind::Constrained && near_hard_tie(g, transcript, n, i, j, 4.0 * h) {
                    continue;
                }
                for a in 0..k {
                    let w = g.weights()[n][[i, j, a]];
                    probe.weights_mut()[n][[i, j, a]] = w + h;
                    let up = enumerated_loss(&enumerate_logadds(&probe, transcript)?, kind);
                    probe.weights_mut()[n][[i, j, a]] = w - h;
                    let down = enumerated_loss(&enumerate_logadds(&probe, transcript)?, kind);
                    probe.weights_mut()[n][[i, j, a]] = w;
                    d[[i, j, a]] = Some((up - down) / (2.0 * h));
                }
            }
        }
        out.push(d);
    }
    Ok(out)
}

/// Random lattice: 2 to `max_layers` layers, interior layers of 1 to
/// `max_size` vertices, 1 to `max_classes` classes, energies uniform in
/// `[0, 10)`, and a random transcript without adjacent repeats.
pub fn random_lattice(
    rng: &mut impl Rng,
    max_layers: usize,
    max_size: usize,
    max_classes: usize,
) -> (EdgeEnergies<f64>, Transcript) {
    let k = rng.random_range(1..=max_classes);
    let n_layers = if k == 1 { 2 } else { rng.random_range(2..=max_layers) };
    let mut layers = vec![vec![0usize]];
    let mut pos = 0;
    for _ in 1..n_layers - 1 {
        let size = rng.random_range(1..=max_size);
        let layer: Vec<usize> = (0..size)
            .map(|_| {
                pos += rng.random_range(1..=3);
                pos
            })
            .collect();
        layers.push(layer);
    }
    layers.push(vec![pos + rng.random_range(1..=3)]);
    let weights = layers
        .windows(2)
        .map(|w| Array3::from_shape_fn((w[0].len(), w[1].len(), k), |_| rng.random_range(0.0..10.0)))
        .collect();
    let mut labels: Vec<usize> = Vec::with_capacity(n_layers - 1);
    while labels.len() < n_layers - 1 {
        let a = rng.random_range(0..k);
        if labels.last() != Some(&a) {
            labels.push(a);
        }
    }
    let g = EdgeEnergies::new(layers, k, weights).expect("well-formed random lattice");
    (g, Transcript::new(labels).expect("no adjacent repeats"))
}

/// Maximum deviations between the dynamic programs and the references.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OracleReport {
    pub graphs: usize,
    pub max_loss_dev: f64,
    pub max_grad_dev: f64,
    /// Gradient entries skipped because of a hard-set tie.
    pub skipped_entries: usize,
    pub checked_entries: usize,
}

/// Loss values and edge gradients of all three losses on `graphs` random
/// lattices (layers ≤ 5, layer size ≤ 3, K ≤ 4).
pub fn run_lattice_suite(graphs: usize, seed: u64, check_gradients: bool) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = OracleReport {
        graphs,
        ..Default::default()
    };
    for _ in 0..graphs {
        let (g, tr) = random_lattice(&mut rng, 5, 3, 4);
        let alpha = rng.random_range(0.0..1.0);
        let e = enumerate_logadds(&g, &tr)?;
        for kind in [
            LossKind::Forward,
            LossKind::Discriminative { alpha },
            LossKind::Constrained,
        ] {
            let got = loss_backward(&g, &tr, kind)?;
            rep.max_loss_dev = rep.max_loss_dev.max(rel_dev(got.value, enumerated_loss(&e, kind)));
            if !check_gradients {
                continue;
            }
            let fd = finite_difference_edges(&g, &tr, kind, FD_STEP)?;
            for (d, f) in got.d_edge.iter().zip(&fd) {
                for (&a, &b) in d.iter().zip(f.iter()) {
                    match b {
                        Some(b) => {
                            rep.checked_entries += 1;
                            rep.max_grad_dev = rep.max_grad_dev.max(rel_dev(a, b));
                        }
                        None => rep.skipped_entries += 1,
                    }
                }
            }
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Scorer
// ---------------------------------------------------------------------------

/// `Σ_{t,a} cot[t,a] · log p(a | x_t)` for the given parameters.
pub fn scorer_objective(params: &ScorerParams<f64>, video: &FrameSequence<f64>, cot: &Array2<f64>) -> Result<f64> {
    let (post, _) = forward_features(params, video.features())?;
    Ok((&post.values() * cot).sum())
}

/// Central differences of [`scorer_objective`] for every parameter.
pub fn scorer_finite_differences(
    params: &ScorerParams<f64>,
    video: &FrameSequence<f64>,
    cot: &Array2<f64>,
    h: f64,
) -> Result<ParamGradients<f64>> {
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    for slot in 0..params.tensors().len() {
        let (rows, cols) = params.tensors()[slot].dim();
        for r in 0..rows {
            for c in 0..cols {
                let w = params.tensors()[slot][[r, c]];
                probe.tensors_mut()[slot][[r, c]] = w + h;
                let up = scorer_objective(&probe, video, cot)?;
                probe.tensors_mut()[slot][[r, c]] = w - h;
                let down = scorer_objective(&probe, video, cot)?;
                probe.tensors_mut()[slot][[r, c]] = w;
                grads.tensors_mut()[slot][[r, c]] = (up - down) / (2.0 * h);
            }
        }
    }
    Ok(grads)
}

/// Largest deviation between the analytic scorer gradient and finite differences.
pub fn scorer_gradient_deviation(params: &ScorerParams<f64>, video: &FrameSequence<f64>, cot: &Array2<f64>) -> Result<f64> {
    let (_, cache) = forward_features(params, video.features())?;
    let analytic = scorer_backward(params, &cache, cot.view())?;
    let numeric = scorer_finite_differences(params, video, cot, FD_STEP)?;
    Ok(analytic
        .tensors()
        .iter()
        .zip(numeric.tensors())
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(&x, &y)| rel_dev(x, y)))
        .fold(0.0, f64::max))
}

/// Random `T×D` features in `[-1, 1)` and a `T×K` cotangent in `[-1, 1)`.
pub fn random_scorer_problem(rng: &mut impl Rng, t: usize, d: usize, k: usize) -> (FrameSequence<f64>, Array2<f64>) {
    let x = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
    let cot = Array2::from_shape_fn((t, k), |_| rng.random_range(-1.0..1.0));
    (FrameSequence::new("fd", x).expect("finite features"), cot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::loss_value;

    #[test]
    fn compositions_are_counted() {
        let mut n = 0;
        for_each_composition(7, 3, &mut |ls| {
            assert_eq!(ls.iter().sum::<usize>(), 7);
            n += 1;
        });
        assert_eq!(n, 15); // C(6, 2)
    }

    #[test]
    fn enumeration_agrees_on_a_handful() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (g, tr) = random_lattice(&mut rng, 4, 3, 3);
            let e = enumerate_logadds(&g, &tr).unwrap();
            for kind in [LossKind::Forward, LossKind::Constrained, LossKind::Discriminative { alpha: 0.3 }] {
                let v = loss_value(&g, &tr, kind).unwrap();
                assert!(rel_dev(v, enumerated_loss(&e, kind)) < 1e-9);
            }
        }
    }

    #[test]
    fn rel_dev_floor() {
        assert_eq!(rel_dev(2.0, 2.0), 0.0);
        assert!((rel_dev(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((rel_dev(0.0, 1e-9) - 1e-6).abs() < 1e-18);
    }
}
