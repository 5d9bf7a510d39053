//! Layered segmentation graph built around an anchor segmentation.
//!
//! Layer `n` (a hyper-node) holds candidate cut positions around the anchor
//! cut `b_n`; the first and last layers are exactly `{0}` and `{T}`. Edges
//! connect consecutive layers only, so a full path has one edge per
//! transcript entry. An edge `(u, v)` covers frames `u+1..=v` (0-based rows
//! `u..v`) and costs `Σ -log p(a | x_t)` for its class `a`.

use std::fmt::Write as _;

use ndarray::Array3;

use crate::data::{FrameLogPosteriors, LabelSet, Segmentation, Transcript};
use crate::error::{Error, Result};
use crate::prefix::PrefixSums;
use crate::scalar::Scalar;

/// Upper bound on the number of paths [`enumerate_paths`] will materialize.
pub const MAX_ENUMERATED_PATHS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SegGraph<S> {
    layers: Vec<Vec<usize>>,
    energy: PrefixSums<S>,
}

/// One vertex per layer plus one class per edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathAssignment {
    pub vertices: Vec<usize>,
    pub classes: Vec<usize>,
}

impl PathAssignment {
    /// The path through the anchor cuts labelled with the anchor classes.
    pub fn from_segmentation(seg: &Segmentation) -> Self {
        Self {
            vertices: seg.cuts(),
            classes: seg.labels().to_vec(),
        }
    }

    pub fn to_segmentation(&self) -> Result<Segmentation> {
        Segmentation::from_cuts(self.classes.clone(), &self.vertices)
    }
}

/// Frames taken left and right of a cut by a centered window of `window` frames.
pub fn window_extent(window: usize) -> (usize, usize) {
    if window == 0 {
        (0, 0)
    } else {
        (window / 2, (window - 1) / 2)
    }
}

/// Builds the graph for `anchor` with windows of `window` frames around
/// every interior cut. Interior windows are clipped to `1..T` and split at
/// the midpoint between neighbouring anchor cuts so that every position of
/// one layer precedes every position of the next.
pub fn build_graph<S: Scalar>(
    anchor: &Segmentation,
    post: &FrameLogPosteriors<S>,
    window: usize,
) -> Result<SegGraph<S>> {
    let t_len = post.frames();
    if anchor.total_frames() != t_len {
        return Err(Error::Shape(format!(
            "anchor covers {} frames, posteriors {}",
            anchor.total_frames(),
            t_len
        )));
    }
    anchor.transcript().check_classes(post.classes())?;
    let cuts = anchor.cuts();
    let n_seg = anchor.len();
    let (left, right) = window_extent(window);

    let mut layers = Vec::with_capacity(n_seg + 1);
    layers.push(vec![0]);
    for n in 1..n_seg {
        let b = cuts[n];
        // strictly above the midpoint to the previous interior cut, at most the next midpoint
        let lo_mono = if n > 1 { (cuts[n - 1] + b) / 2 + 1 } else { 1 };
        let hi_mono = if n + 1 < n_seg { (b + cuts[n + 1]) / 2 } else { t_len - 1 };
        let lo = b.saturating_sub(left).max(1).max(lo_mono);
        let hi = (b + right).min(t_len - 1).min(hi_mono);
        if lo > hi {
            return Err(Error::EmptyHyperNode { layer: n });
        }
        layers.push((lo..=hi).collect());
    }
    layers.push(vec![t_len]);

    let neg_log = post.values().mapv(|x| -x);
    Ok(SegGraph {
        layers,
        energy: PrefixSums::new(neg_log.view()),
    })
}

impl<S: Scalar> SegGraph<S> {
    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    /// Number of edges on a full path (transcript length).
    pub fn segments(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn frames(&self) -> usize {
        self.energy.frames()
    }

    pub fn classes(&self) -> usize {
        self.energy.classes()
    }

    pub fn num_vertices(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn num_edges(&self) -> usize {
        self.layers.windows(2).map(|w| w[0].len() * w[1].len()).sum()
    }

    pub fn num_vertex_paths(&self) -> u128 {
        self.layers.iter().map(|l| l.len() as u128).product()
    }

    /// Edge energy without bounds checks; callers iterate graph vertices.
    #[inline]
    pub(crate) fn weight(&self, from: usize, to: usize, class: usize) -> S {
        self.energy.range(from, to, class)
    }

    /// Energy of labelling frames `from+1..=to` with `class`.
    pub fn edge_weight(&self, from: usize, to: usize, class: usize) -> Result<S> {
        let t = self.frames();
        if from >= to {
            return Err(Error::Position { pos: from, t });
        }
        if to > t {
            return Err(Error::Position { pos: to, t });
        }
        if class >= self.classes() {
            return Err(Error::UnknownClass {
                class,
                k: self.classes(),
            });
        }
        Ok(self.weight(from, to, class))
    }

    pub fn check_path(&self, p: &PathAssignment) -> Result<()> {
        if p.vertices.len() != self.layers.len() || p.classes.len() != self.segments() {
            return Err(Error::Shape(format!(
                "path has {} vertices and {} classes for {} layers",
                p.vertices.len(),
                p.classes.len(),
                self.layers.len()
            )));
        }
        for (n, (v, layer)) in p.vertices.iter().zip(&self.layers).enumerate() {
            if layer.binary_search(v).is_err() {
                return Err(Error::invalid(
                    "path",
                    format!("position {v} is not a vertex of layer {n}"),
                ));
            }
        }
        if let Some(&class) = p.classes.iter().find(|&&a| a >= self.classes()) {
            return Err(Error::UnknownClass {
                class,
                k: self.classes(),
            });
        }
        Ok(())
    }

    pub fn check_transcript(&self, transcript: &Transcript) -> Result<()> {
        if transcript.len() != self.segments() {
            return Err(Error::Shape(format!(
                "transcript has {} labels, graph has {} segments",
                transcript.len(),
                self.segments()
            )));
        }
        transcript.check_classes(self.classes())
    }

    /// Plain-text table of every edge and its per-class energies.
    pub fn dump_table(&self, labels: Option<&LabelSet>) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# frames {} classes {} layers {} vertices {} edges {}",
            self.frames(),
            self.classes(),
            self.layers.len(),
            self.num_vertices(),
            self.num_edges()
        );
        for (n, layer) in self.layers.iter().enumerate() {
            let pos: Vec<String> = layer.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "# layer {n}: {}", pos.join(" "));
        }
        let _ = write!(out, "layer\tfrom\tto\tlen");
        for a in 0..self.classes() {
            match labels {
                Some(l) => {
                    let _ = write!(out, "\t{}", l.name(a));
                }
                None => {
                    let _ = write!(out, "\tw{a}");
                }
            }
        }
        out.push('\n');
        for (n, w) in self.layers.windows(2).enumerate() {
            for &u in &w[0] {
                for &v in &w[1] {
                    let _ = write!(out, "{n}\t{u}\t{v}\t{}", v - u);
                    for a in 0..self.classes() {
                        let _ = write!(out, "\t{:.6}", self.weight(u, v, a).as_f64());
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// A layered lattice with per-edge, per-class energies. Vertices of layer
/// `n` are frame positions; edge `(n, i, j)` joins vertex `i` of layer `n`
/// to vertex `j` of layer `n + 1`.
pub trait Lattice<S: Scalar> {
    fn layers(&self) -> &[Vec<usize>];

    fn classes(&self) -> usize;

    /// Energy of edge `(n, i, j)` under class `a`.
    fn energy(&self, n: usize, i: usize, j: usize, a: usize) -> S;

    fn frames(&self) -> usize {
        self.layers().last().map_or(0, |l| l[0])
    }
}

impl<S: Scalar> Lattice<S> for SegGraph<S> {
    fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    fn classes(&self) -> usize {
        self.energy.classes()
    }

    #[inline]
    fn energy(&self, n: usize, i: usize, j: usize, a: usize) -> S {
        self.weight(self.layers[n][i], self.layers[n + 1][j], a)
    }
}

/// Lattice with explicitly stored edge energies, `weights[n][[i, j, a]]`.
///
/// Materialized from a [`SegGraph`] or built directly, e.g. to perturb a
/// single edge energy for finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEnergies<S> {
    layers: Vec<Vec<usize>>,
    classes: usize,
    weights: Vec<Array3<S>>,
}

impl<S: Scalar> EdgeEnergies<S> {
    pub fn new(layers: Vec<Vec<usize>>, classes: usize, weights: Vec<Array3<S>>) -> Result<Self> {
        if layers.len() < 2 || layers.iter().any(Vec::is_empty) {
            return Err(Error::Shape("need at least two non-empty layers".into()));
        }
        if layers[0] != [0] || layers.last().unwrap().len() != 1 {
            return Err(Error::Shape("first and last layers must be single vertices".into()));
        }
        for w in layers.windows(2) {
            if w[0].windows(2).any(|p| p[0] >= p[1]) || w[0].last() >= w[1].first() {
                return Err(Error::Shape(format!("layers not strictly ordered: {:?} {:?}", w[0], w[1])));
            }
        }
        if weights.len() != layers.len() - 1 {
            return Err(Error::Shape(format!(
                "{} weight blocks for {} transitions",
                weights.len(),
                layers.len() - 1
            )));
        }
        for (n, w) in weights.iter().enumerate() {
            if w.dim() != (layers[n].len(), layers[n + 1].len(), classes) {
                return Err(Error::Shape(format!("weight block {n} has shape {:?}", w.dim())));
            }
        }
        Ok(Self {
            layers,
            classes,
            weights,
        })
    }

    pub fn from_lattice(g: &impl Lattice<S>) -> Self {
        let layers = g.layers().to_vec();
        let weights = layers
            .windows(2)
            .enumerate()
            .map(|(n, w)| {
                Array3::from_shape_fn((w[0].len(), w[1].len(), g.classes()), |(i, j, a)| {
                    g.energy(n, i, j, a)
                })
            })
            .collect();
        Self {
            layers,
            classes: g.classes(),
            weights,
        }
    }

    pub fn weights(&self) -> &[Array3<S>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Array3<S>] {
        &mut self.weights
    }
}

impl<S: Scalar> Lattice<S> for EdgeEnergies<S> {
    fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    fn energy(&self, n: usize, i: usize, j: usize, a: usize) -> S {
        self.weights[n][[i, j, a]]
    }
}

/// Energy of a class-assigned path: the sum of its edge energies.
pub fn path_energy<S: Scalar>(g: &SegGraph<S>, p: &PathAssignment) -> Result<S> {
    g.check_path(p)?;
    Ok(p.vertices
        .windows(2)
        .zip(&p.classes)
        .fold(S::zero(), |acc, (w, &a)| acc + g.weight(w[0], w[1], a)))
}

/// Lists every path of the graph: with a transcript the valid paths only,
/// otherwise every vertex path combined with every class assignment.
pub fn enumerate_paths<S: Scalar>(
    g: &SegGraph<S>,
    transcript: Option<&Transcript>,
) -> Result<Vec<PathAssignment>> {
    let n_seg = g.segments();
    let k = g.classes();
    if let Some(tr) = transcript {
        g.check_transcript(tr)?;
    }
    let class_count: u128 = match transcript {
        Some(_) => 1,
        None => (k as u128).checked_pow(n_seg as u32).unwrap_or(u128::MAX),
    };
    let count = g.num_vertex_paths().saturating_mul(class_count);
    if count > MAX_ENUMERATED_PATHS as u128 {
        return Err(Error::TooManyPaths {
            count,
            limit: MAX_ENUMERATED_PATHS,
        });
    }

    let vertex_paths = odometer(&g.layers.iter().map(Vec::len).collect::<Vec<_>>())
        .into_iter()
        .map(|idx| {
            idx.iter()
                .zip(&g.layers)
                .map(|(&i, layer)| layer[i])
                .collect::<Vec<_>>()
        });
    let class_paths: Vec<Vec<usize>> = match transcript {
        Some(tr) => vec![tr.labels().to_vec()],
        None => odometer(&vec![k; n_seg]),
    };
    let mut out = Vec::with_capacity(count as usize);
    for vertices in vertex_paths {
        for classes in &class_paths {
            out.push(PathAssignment {
                vertices: vertices.clone(),
                classes: classes.clone(),
            });
        }
    }
    Ok(out)
}

/// All index tuples with `tuple[i] < radix[i]`, in lexicographic order.
fn odometer(radix: &[usize]) -> Vec<Vec<usize>> {
    if radix.contains(&0) {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut cur = vec![0; radix.len()];
    loop {
        out.push(cur.clone());
        let mut i = radix.len();
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < radix[i] {
                break;
            }
            cur[i] = 0;
        }
    }
}

/// Minimum-energy valid path for `transcript`, found by a min-sum pass over
/// the layers. Equal energies resolve toward the earlier vertex.
pub fn best_valid_path<S: Scalar>(
    g: &SegGraph<S>,
    transcript: &Transcript,
) -> Result<(PathAssignment, S)> {
    g.check_transcript(transcript)?;
    let labels = transcript.labels();
    let mut cost = vec![S::zero()];
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(labels.len());
    for (n, &a) in labels.iter().enumerate() {
        let (from, to) = (&g.layers[n], &g.layers[n + 1]);
        let mut next = Vec::with_capacity(to.len());
        let mut arg = Vec::with_capacity(to.len());
        for &v in to {
            let mut best: Option<(S, usize)> = None;
            for (i, &u) in from.iter().enumerate() {
                let cand = cost[i] + g.weight(u, v, a);
                best = match best {
                    None => Some((cand, i)),
                    // exact comparison: the anchor's accumulated energy is reproduced
                    // bit-for-bit, so the result can never exceed it
                    Some((b, _)) if cand < b || (b.is_nan() && !cand.is_nan()) => {
                        Some((cand, i))
                    }
                    keep => keep,
                };
            }
            let (c, i) = best.expect("layers are non-empty");
            next.push(c);
            arg.push(i);
        }
        cost = next;
        back.push(arg);
    }
    let mut idx = 0;
    let mut vertices = vec![0; labels.len() + 1];
    vertices[labels.len()] = g.layers[labels.len()][0];
    for n in (0..labels.len()).rev() {
        idx = back[n][idx];
        vertices[n] = g.layers[n][idx];
    }
    let path = PathAssignment {
        vertices,
        classes: labels.to_vec(),
    };
    let energy = cost[0];
    if energy.is_nan() {
        return Err(Error::NonFinite {
            layer: labels.len(),
            what: "min-sum path energy",
        });
    }
    Ok((path, energy))
}
