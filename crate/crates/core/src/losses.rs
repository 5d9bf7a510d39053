//! Path-energy losses over a segmentation lattice and their exact gradients.
//!
//! All three accumulate path energies with `logadd(S) = -log Σ_{s∈S} exp(-s)`
//! (a soft minimum) by a layer-by-layer recursion:
//!
//! * valid paths — every edge takes the transcript class `a_n`;
//! * all paths — every edge takes any class;
//! * hard invalid paths — per edge and class `a`, continue with cost
//!   `w(a)` when `w(a) < w(a_n)`, otherwise continue at zero cost.
//!
//! The losses are `F = logadd(valid)`, `DF = F - α·logadd(all)` and
//! `CDF = F - logadd(hard)`. Gradients come from a forward/backward pass over
//! the same recursion: an edge choice with cost `c` between vertices `i` and
//! `j` has weight `exp(total - fwd_i - c - bwd_j)`.

use ndarray::{Array2, Array3};

use crate::data::Transcript;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seggraph::Lattice;

/// Default weight of the all-path term in the discriminative loss.
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Soft minimum over valid paths.
    Forward,
    /// Forward loss minus `alpha` times the soft minimum over all paths.
    Discriminative { alpha: f64 },
    /// Forward loss minus the soft minimum over hard invalid paths.
    Constrained,
}

impl LossKind {
    pub fn discriminative(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("{alpha} must be a non-negative number")));
        }
        Ok(LossKind::Discriminative { alpha })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Forward => "F",
            LossKind::Discriminative { .. } => "DF",
            LossKind::Constrained => "CDF",
        }
    }
}

/// Gradients of a loss with respect to edge energies and frame log-posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients<S> {
    pub value: S,
    /// `d_edge[n][[i, j, a]] = ∂L / ∂w_{ij}(a)` for transition `n`.
    pub d_edge: Vec<Array3<S>>,
    /// `d_frame[[t, a]] = ∂L / ∂log p(a | x_t)`.
    pub d_frame: Array2<S>,
}

/// `-log Σ exp(-v)`, shifted by the minimum. `+inf` entries are the identity.
pub fn logadd<S: Scalar>(values: &[S]) -> Result<S> {
    if values.is_empty() {
        return Err(Error::invalid("logadd", "empty input"));
    }
    Ok(logadd_slice(values))
}

/// `logadd` of two values.
pub fn logadd2<S: Scalar>(a: S, b: S) -> S {
    logadd_slice(&[a, b])
}

fn logadd_slice<S: Scalar>(values: &[S]) -> S {
    let m = values.iter().fold(S::infinity(), |acc, &v| acc.min(v));
    if m.is_infinite() || values.iter().any(|v| v.is_nan()) {
        return if values.iter().any(|v| v.is_nan()) { S::nan() } else { m };
    }
    let s = values.iter().fold(S::zero(), |acc, &v| acc + (m - v).exp());
    m - s.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PathSet {
    Valid,
    All,
    HardInvalid,
}

/// Cost of taking class `a` on an edge whose transcript-class energy is
/// `target`, and whether that cost depends on `w(a)`.
#[inline]
fn choice<S: Scalar>(set: PathSet, w: S, a: usize, a_n: Option<usize>, target: S) -> Option<(S, bool)> {
    match set {
        PathSet::Valid => (Some(a) == a_n).then_some((w, true)),
        PathSet::All => Some((w, true)),
        PathSet::HardInvalid => {
            if w < target {
                Some((w, true))
            } else {
                Some((S::zero(), false))
            }
        }
    }
}

struct Pass<S> {
    total: S,
    d_edge: Option<Vec<Array3<S>>>,
}

fn check_lattice<S: Scalar, L: Lattice<S>>(g: &L, transcript: Option<&Transcript>) -> Result<()> {
    let segments = g.layers().len().saturating_sub(1);
    if segments == 0 {
        return Err(Error::Shape("lattice needs at least two layers".into()));
    }
    if let Some(tr) = transcript {
        if tr.len() != segments {
            return Err(Error::Shape(format!(
                "transcript has {} labels, lattice has {} segments",
                tr.len(),
                segments
            )));
        }
        tr.check_classes(g.classes())?;
    }
    Ok(())
}

fn run_pass<S: Scalar, L: Lattice<S>>(
    g: &L,
    transcript: Option<&Transcript>,
    set: PathSet,
    want_grad: bool,
) -> Result<Pass<S>> {
    check_lattice(g, transcript)?;
    let layers = g.layers();
    let n_seg = layers.len() - 1;
    let k = g.classes();
    let label = |n: usize| transcript.map(|t| t.labels()[n]);
    let target = |n: usize, i: usize, j: usize| match label(n) {
        Some(a_n) if set == PathSet::HardInvalid => g.energy(n, i, j, a_n),
        _ => S::zero(),
    };

    // fwd[n][i]: logadd of partial paths from the source to vertex i of layer n
    let mut fwd: Vec<Vec<S>> = Vec::with_capacity(n_seg + 1);
    fwd.push(vec![S::zero(); layers[0].len()]);
    let mut buf = Vec::new();
    for n in 0..n_seg {
        let a_n = label(n);
        let mut cur = Vec::with_capacity(layers[n + 1].len());
        for j in 0..layers[n + 1].len() {
            buf.clear();
            for i in 0..layers[n].len() {
                let tgt = target(n, i, j);
                for a in 0..k {
                    if set == PathSet::Valid && Some(a) != a_n {
                        continue;
                    }
                    if let Some((c, _)) = choice(set, g.energy(n, i, j, a), a, a_n, tgt) {
                        buf.push(fwd[n][i] + c);
                    }
                }
            }
            let v = if buf.is_empty() { S::infinity() } else { logadd_slice(&buf) };
            if v.is_nan() {
                return Err(Error::NonFinite {
                    layer: n + 1,
                    what: "forward score",
                });
            }
            cur.push(v);
        }
        fwd.push(cur);
    }
    let total = fwd[n_seg][0];
    if !want_grad {
        return Ok(Pass { total, d_edge: None });
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            layer: n_seg,
            what: "loss term",
        });
    }

    // bwd[n][i]: logadd of partial paths from vertex i of layer n to the sink
    let mut bwd: Vec<Vec<S>> = vec![Vec::new(); n_seg + 1];
    bwd[n_seg] = vec![S::zero(); layers[n_seg].len()];
    for n in (0..n_seg).rev() {
        let a_n = label(n);
        let mut cur = Vec::with_capacity(layers[n].len());
        for i in 0..layers[n].len() {
            buf.clear();
            for j in 0..layers[n + 1].len() {
                let tgt = target(n, i, j);
                for a in 0..k {
                    if set == PathSet::Valid && Some(a) != a_n {
                        continue;
                    }
                    if let Some((c, _)) = choice(set, g.energy(n, i, j, a), a, a_n, tgt) {
                        buf.push(c + bwd[n + 1][j]);
                    }
                }
            }
            let v = if buf.is_empty() { S::infinity() } else { logadd_slice(&buf) };
            if v.is_nan() {
                return Err(Error::NonFinite {
                    layer: n,
                    what: "backward score",
                });
            }
            cur.push(v);
        }
        bwd[n] = cur;
    }

    let mut d_edge = Vec::with_capacity(n_seg);
    for n in 0..n_seg {
        let a_n = label(n);
        let (ni, nj) = (layers[n].len(), layers[n + 1].len());
        let mut d = Array3::zeros((ni, nj, k));
        for i in 0..ni {
            for j in 0..nj {
                let tgt = target(n, i, j);
                for a in 0..k {
                    let w = g.energy(n, i, j, a);
                    if let Some((c, true)) = choice(set, w, a, a_n, tgt) {
                        let excess = fwd[n][i] + c + bwd[n + 1][j] - total;
                        let p = if excess == S::infinity() { S::zero() } else { (-excess).exp() };
                        if !p.is_finite() {
                            return Err(Error::NonFinite {
                                layer: n,
                                what: "edge posterior",
                            });
                        }
                        d[[i, j, a]] = p;
                    }
                }
            }
        }
        d_edge.push(d);
    }
    Ok(Pass {
        total,
        d_edge: Some(d_edge),
    })
}

/// Soft minimum of the energies of all valid paths.
pub fn forward_loss<S: Scalar, L: Lattice<S>>(g: &L, transcript: &Transcript) -> Result<S> {
    Ok(run_pass(g, Some(transcript), PathSet::Valid, false)?.total)
}

/// Soft minimum of the energies of every class-assigned path.
pub fn logadd_all_paths<S: Scalar, L: Lattice<S>>(g: &L) -> Result<S> {
    Ok(run_pass(g, None, PathSet::All, false)?.total)
}

/// Soft minimum over hard invalid continuations; non-hard classes,
/// including the transcript class itself, continue at zero cost.
pub fn logadd_hard_invalid<S: Scalar, L: Lattice<S>>(g: &L, transcript: &Transcript) -> Result<S> {
    Ok(run_pass(g, Some(transcript), PathSet::HardInvalid, false)?.total)
}

pub fn loss_value<S: Scalar, L: Lattice<S>>(g: &L, transcript: &Transcript, kind: LossKind) -> Result<S> {
    let valid = forward_loss(g, transcript)?;
    Ok(match kind {
        LossKind::Forward => valid,
        LossKind::Discriminative { alpha: 0.0 } => valid,
        LossKind::Discriminative { alpha } => valid - S::lit(alpha) * logadd_all_paths(g)?,
        LossKind::Constrained => valid - logadd_hard_invalid(g, transcript)?,
    })
}

/// Loss value plus its gradients with respect to edge energies and frame
/// log-posteriors.
pub fn loss_backward<S: Scalar, L: Lattice<S>>(
    g: &L,
    transcript: &Transcript,
    kind: LossKind,
) -> Result<LossGradients<S>> {
    let valid = run_pass(g, Some(transcript), PathSet::Valid, true)?;
    let mut d_edge = valid.d_edge.expect("gradient requested");
    let (other, scale) = match kind {
        LossKind::Forward => (None, S::zero()),
        LossKind::Discriminative { alpha: 0.0 } => (None, S::zero()),
        LossKind::Discriminative { alpha } => (
            Some(run_pass(g, None, PathSet::All, true)?),
            S::lit(alpha),
        ),
        LossKind::Constrained => (
            Some(run_pass(g, Some(transcript), PathSet::HardInvalid, true)?),
            S::one(),
        ),
    };
    let mut value = valid.total;
    if let Some(pass) = other {
        value -= scale * pass.total;
        for (d, o) in d_edge.iter_mut().zip(pass.d_edge.expect("gradient requested")) {
            d.zip_mut_with(&o, |x, &y| *x -= scale * y);
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            layer: d_edge.len(),
            what: "loss value",
        });
    }
    let d_frame = frame_gradients(g, &d_edge);
    Ok(LossGradients {
        value,
        d_edge,
        d_frame,
    })
}

/// Chain rule through `w_{ij}(a) = Σ_{t ∈ (u, v]} -log p(a | x_t)`: each frame
/// receives minus the sum of the gradients of the edges covering it.
pub fn frame_gradients<S: Scalar, L: Lattice<S>>(g: &L, d_edge: &[Array3<S>]) -> Array2<S> {
    let layers = g.layers();
    let t_len = g.frames();
    let k = g.classes();
    let mut diff = Array2::<S>::zeros((t_len + 1, k));
    for (n, d) in d_edge.iter().enumerate() {
        for (i, &u) in layers[n].iter().enumerate() {
            for (j, &v) in layers[n + 1].iter().enumerate() {
                for a in 0..k {
                    let x = d[[i, j, a]];
                    if x != S::zero() {
                        diff[[u, a]] -= x;
                        diff[[v, a]] += x;
                    }
                }
            }
        }
    }
    let mut out = Array2::zeros((t_len, k));
    for a in 0..k {
        let mut acc = S::zero();
        for t in 0..t_len {
            acc += diff[[t, a]];
            out[[t, a]] = acc;
        }
    }
    out
}
