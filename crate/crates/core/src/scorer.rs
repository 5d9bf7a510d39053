//! Frame scorers producing per-frame class log-posteriors, with hand-written
//! backward passes.
//!
//! Two variants share one parameter container:
//!
//! * `linear`: `logits_t = x_t W + b`;
//! * `gru`: a single-layer GRU run left to right from a zero state,
//!   followed by a linear output head.
//!
//! GRU step (row vectors, `⊙` elementwise):
//!
//! ```text
//! z  = σ(x W_z + h U_z + b_z)
//! r  = σ(x W_r + h U_r + b_r)
//! c  = tanh(x W_h + (r ⊙ h) U_h + b_h)
//! h' = (1 - z) ⊙ h + z ⊙ c
//! ```

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FrameLogPosteriors, FrameSequence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default GRU width.
pub const DEFAULT_HIDDEN: usize = 64;

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Linear,
    Gru,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::Linear => "linear",
            ScorerKind::Gru => "gru",
        })
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScorerKind::Linear),
            "gru" => Ok(ScorerKind::Gru),
            other => Err(Error::invalid("scorer kind", format!("unknown variant {other:?}"))),
        }
    }
}

/// Scorer weights. Biases are stored as `1×n` matrices so every tensor is 2-D.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams<S> {
    kind: ScorerKind,
    input_dim: usize,
    hidden: usize,
    classes: usize,
    tensors: Vec<Array2<S>>,
}

/// Gradients share the parameter layout.
pub type ParamGradients<S> = ScorerParams<S>;

const LINEAR_NAMES: [&str; 2] = ["w", "b"];
const GRU_NAMES: [&str; 11] = [
    "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h", "w_o", "b_o",
];

// GRU tensor slots
const WZ: usize = 0;
const UZ: usize = 1;
const BZ: usize = 2;
const WR: usize = 3;
const UR: usize = 4;
const BR: usize = 5;
const WH: usize = 6;
const UH: usize = 7;
const BH: usize = 8;
const WO: usize = 9;
const BO: usize = 10;

fn shapes(kind: ScorerKind, d: usize, h: usize, k: usize) -> Vec<(usize, usize)> {
    match kind {
        ScorerKind::Linear => vec![(d, k), (1, k)],
        ScorerKind::Gru => vec![
            (d, h),
            (h, h),
            (1, h),
            (d, h),
            (h, h),
            (1, h),
            (d, h),
            (h, h),
            (1, h),
            (h, k),
            (1, k),
        ],
    }
}

impl<S: Scalar> ScorerParams<S> {
    pub fn zeros(kind: ScorerKind, input_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        if input_dim == 0 || classes == 0 || (kind == ScorerKind::Gru && hidden == 0) {
            return Err(Error::invalid(
                "scorer dimensions",
                format!("D={input_dim} H={hidden} K={classes}"),
            ));
        }
        let hidden = if kind == ScorerKind::Linear { 0 } else { hidden };
        let tensors = shapes(kind, input_dim, hidden, classes)
            .into_iter()
            .map(Array2::zeros)
            .collect();
        Ok(Self {
            kind,
            input_dim,
            hidden,
            classes,
            tensors,
        })
    }

    /// Uniform initialization in `[-0.1, 0.1]` from a seeded generator.
    pub fn init(kind: ScorerKind, input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(kind, input_dim, hidden, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut p.tensors {
            t.mapv_inplace(|_| S::lit(rng.random_range(-INIT_SCALE..=INIT_SCALE)));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
            ..self.clone()
        }
    }

    pub fn kind(&self) -> ScorerKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn names(&self) -> &'static [&'static str] {
        match self.kind {
            ScorerKind::Linear => &LINEAR_NAMES,
            ScorerKind::Gru => &GRU_NAMES,
        }
    }

    pub fn tensors(&self) -> &[Array2<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<S>] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.dim() == b.dim())
    }

    pub fn l2_norm(&self) -> S {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(S::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * factor);
        }
    }

    /// `self ← self - lr · grads`.
    pub fn sgd_step(&mut self, grads: &ParamGradients<S>, lr: S) -> Result<()> {
        if !self.same_layout(grads) {
            return Err(Error::Shape("gradient layout differs from parameters".into()));
        }
        if !(lr >= S::zero() && lr.is_finite()) {
            return Err(Error::invalid("learning rate", format!("{lr}")));
        }
        for (name, g) in self.names().iter().zip(&grads.tensors) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("gradient", format!("non-finite entry in {name}")));
            }
        }
        for (p, g) in self.tensors.iter_mut().zip(&grads.tensors) {
            p.zip_mut_with(g, |x, &d| *x -= lr * d);
        }
        Ok(())
    }
}

/// Activations kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    inputs: Array2<S>,
    /// Log-posteriors, T×K.
    log_post: Array2<S>,
    /// Hidden states `h_0..h_T`, (T+1)×H. Empty for the linear scorer.
    hidden: Array2<S>,
    update: Array2<S>,
    reset: Array2<S>,
    candidate: Array2<S>,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn add_row<S: Scalar>(m: &mut Array2<S>, row: &Array2<S>) {
    let dim = m.dim();
    m.zip_mut_with(&row.broadcast(dim).expect("bias broadcast"), |x, &b| *x += b);
}

/// Runs the scorer over every frame of `video`.
pub fn scorer_forward<S: Scalar>(
    params: &ScorerParams<S>,
    video: &FrameSequence<S>,
) -> Result<(FrameLogPosteriors<S>, ForwardCache<S>)> {
    forward_features(params, video.features())
}

pub fn forward_features<S: Scalar>(
    params: &ScorerParams<S>,
    x: ArrayView2<'_, S>,
) -> Result<(FrameLogPosteriors<S>, ForwardCache<S>)> {
    if x.ncols() != params.input_dim {
        return Err(Error::Shape(format!(
            "features have {} dims, scorer expects {}",
            x.ncols(),
            params.input_dim
        )));
    }
    let t_len = x.nrows();
    let p = &params.tensors;
    let (logits, hidden, update, reset, candidate) = match params.kind {
        ScorerKind::Linear => {
            let mut logits = x.dot(&p[0]);
            add_row(&mut logits, &p[1]);
            let empty = Array2::zeros((0, 0));
            (logits, empty.clone(), empty.clone(), empty.clone(), empty)
        }
        ScorerKind::Gru => {
            let h_dim = params.hidden;
            let mut xz = x.dot(&p[WZ]);
            add_row(&mut xz, &p[BZ]);
            let mut xr = x.dot(&p[WR]);
            add_row(&mut xr, &p[BR]);
            let mut xh = x.dot(&p[WH]);
            add_row(&mut xh, &p[BH]);
            let mut hidden = Array2::zeros((t_len + 1, h_dim));
            let mut update = Array2::zeros((t_len, h_dim));
            let mut reset = Array2::zeros((t_len, h_dim));
            let mut candidate = Array2::zeros((t_len, h_dim));
            for t in 0..t_len {
                let h = hidden.row(t).to_owned();
                let z = (&xz.row(t) + &h.dot(&p[UZ])).mapv(sigmoid);
                let r = (&xr.row(t) + &h.dot(&p[UR])).mapv(sigmoid);
                let rh = &r * &h;
                let c = (&xh.row(t) + &rh.dot(&p[UH])).mapv(|v| v.tanh());
                let next = &h + &(&z * &(&c - &h));
                hidden.row_mut(t + 1).assign(&next);
                update.row_mut(t).assign(&z);
                reset.row_mut(t).assign(&r);
                candidate.row_mut(t).assign(&c);
            }
            let mut logits = hidden.slice(s![1.., ..]).dot(&p[WO]);
            add_row(&mut logits, &p[BO]);
            (logits, hidden, update, reset, candidate)
        }
    };
    let post = FrameLogPosteriors::from_logits(logits.view())?;
    let cache = ForwardCache {
        inputs: x.to_owned(),
        log_post: post.values().to_owned(),
        hidden,
        update,
        reset,
        candidate,
    };
    Ok((post, cache))
}

/// Gradient of `Σ_{t,a} d_frame[t,a] · log p(a | x_t)` with respect to every parameter.
pub fn scorer_backward<S: Scalar>(
    params: &ScorerParams<S>,
    cache: &ForwardCache<S>,
    d_frame: ArrayView2<'_, S>,
) -> Result<ParamGradients<S>> {
    let t_len = cache.inputs.nrows();
    if d_frame.dim() != (t_len, params.classes) || cache.inputs.ncols() != params.input_dim {
        return Err(Error::Shape(format!(
            "cotangent {:?} does not match cache of {} frames x {} classes",
            d_frame.dim(),
            t_len,
            params.classes
        )));
    }
    // through log-softmax: dlogit = g - softmax · Σ_a g
    let mut dlogits = d_frame.to_owned();
    for (mut row, lp) in dlogits.rows_mut().into_iter().zip(cache.log_post.rows()) {
        let total = row.iter().fold(S::zero(), |acc, &v| acc + v);
        row.zip_mut_with(&lp, |g, &l| *g -= l.exp() * total);
    }
    let colsum = |m: &Array2<S>| m.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut grads = params.zeros_like();
    let p = &params.tensors;
    match params.kind {
        ScorerKind::Linear => {
            grads.tensors[0] = cache.inputs.t().dot(&dlogits);
            grads.tensors[1] = colsum(&dlogits);
        }
        ScorerKind::Gru => {
            let h_dim = params.hidden;
            if cache.hidden.dim() != (t_len + 1, h_dim) {
                return Err(Error::Shape("cache does not come from a GRU forward pass".into()));
            }
            let outputs = cache.hidden.slice(s![1.., ..]);
            grads.tensors[WO] = outputs.t().dot(&dlogits);
            grads.tensors[BO] = colsum(&dlogits);
            let dh_out = dlogits.dot(&p[WO].t());

            let mut da_z = Array2::<S>::zeros((t_len, h_dim));
            let mut da_r = Array2::<S>::zeros((t_len, h_dim));
            let mut da_h = Array2::<S>::zeros((t_len, h_dim));
            let mut dh_next = Array1::<S>::zeros(h_dim);
            for t in (0..t_len).rev() {
                let h_prev = cache.hidden.row(t);
                let z = cache.update.row(t);
                let r = cache.reset.row(t);
                let c = cache.candidate.row(t);
                let dh = &dh_out.row(t) + &dh_next;

                let dz = &dh * &(&c - &h_prev);
                let dc = &dh * &z;
                let mut dh_prev = &dh * &z.mapv(|v| S::one() - v);

                let dah = &dc * &c.mapv(|v| S::one() - v * v);
                let drh = dah.dot(&p[UH].t());
                let dr = &drh * &h_prev;
                dh_prev = dh_prev + &drh * &r;

                let daz = &dz * &z.mapv(|v| v * (S::one() - v));
                let dar = &dr * &r.mapv(|v| v * (S::one() - v));
                dh_prev = dh_prev + daz.dot(&p[UZ].t()) + dar.dot(&p[UR].t());

                da_z.row_mut(t).assign(&daz);
                da_r.row_mut(t).assign(&dar);
                da_h.row_mut(t).assign(&dah);
                dh_next = dh_prev;
            }
            let x_t = cache.inputs.t();
            let h_prev_all = cache.hidden.slice(s![..t_len, ..]);
            let rh_all = &cache.reset * &h_prev_all;
            grads.tensors[WZ] = x_t.dot(&da_z);
            grads.tensors[UZ] = h_prev_all.t().dot(&da_z);
            grads.tensors[BZ] = colsum(&da_z);
            grads.tensors[WR] = x_t.dot(&da_r);
            grads.tensors[UR] = h_prev_all.t().dot(&da_r);
            grads.tensors[BR] = colsum(&da_r);
            grads.tensors[WH] = x_t.dot(&da_h);
            grads.tensors[UH] = rh_all.t().dot(&da_h);
            grads.tensors[BH] = colsum(&da_h);
        }
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Text checkpoint
// ---------------------------------------------------------------------------

/// Writes a self-describing text block: variant, dimensions, then each
/// tensor's name and shape followed by its rows.
pub fn write_params<S: Scalar, W: Write>(params: &ScorerParams<S>, out: &mut W) -> Result<()> {
    writeln!(out, "scorer {}", params.kind)?;
    writeln!(
        out,
        "dims {} {} {}",
        params.input_dim, params.hidden, params.classes
    )?;
    for (name, t) in params.names().iter().zip(&params.tensors) {
        writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols())?;
        for row in t.rows() {
            let vals: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
            writeln!(out, "{}", vals.join(" "))?;
        }
    }
    writeln!(out, "end scorer")?;
    Ok(())
}

/// Line source with position tracking for checkpoint parsing.
pub(crate) struct LineReader<R> {
    inner: R,
    line: usize,
    name: String,
}

impl<R: BufRead> LineReader<R> {
    pub(crate) fn new(inner: R, name: impl Into<String>) -> Self {
        Self {
            inner,
            line: 0,
            name: name.into(),
        }
    }

    pub(crate) fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.name.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }

    /// Next non-empty line, trimmed.
    pub(crate) fn next_line(&mut self) -> Result<String> {
        loop {
            let mut buf = String::new();
            if self.inner.read_line(&mut buf)? == 0 {
                return Err(self.err("unexpected end of input"));
            }
            self.line += 1;
            let t = buf.trim();
            if !t.is_empty() {
                return Ok(t.to_string());
            }
        }
    }

    /// Next line split on whitespace, requiring `keyword` first.
    pub(crate) fn expect(&mut self, keyword: &str) -> Result<Vec<String>> {
        let line = self.next_line()?;
        let mut toks = line.split_whitespace().map(str::to_string);
        match toks.next() {
            Some(k) if k == keyword => Ok(toks.collect()),
            other => Err(self.err(format!("expected `{keyword}`, found {other:?}"))),
        }
    }

    pub(crate) fn parse<T: FromStr>(&self, tok: Option<&String>) -> Result<T> {
        tok.and_then(|t| t.parse().ok())
            .ok_or_else(|| self.err(format!("bad or missing value {tok:?}")))
    }

    pub(crate) fn floats<S: Scalar>(&mut self, count: usize) -> Result<Vec<S>> {
        let line = self.next_line()?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().ok().and_then(S::from_f64))
            .collect::<Option<Vec<S>>>()
            .ok_or_else(|| self.err("bad float"))?;
        if vals.len() != count {
            return Err(self.err(format!("expected {count} values, found {}", vals.len())));
        }
        Ok(vals)
    }
}

pub fn read_params<S: Scalar, R: BufRead>(input: R) -> Result<ScorerParams<S>> {
    let mut rd = LineReader::new(input, "scorer checkpoint");
    read_params_from(&mut rd)
}

pub(crate) fn read_params_from<S: Scalar, R: BufRead>(rd: &mut LineReader<R>) -> Result<ScorerParams<S>> {
    let kind: ScorerKind = rd
        .expect("scorer")?
        .first()
        .ok_or_else(|| rd.err("missing scorer variant"))?
        .parse()?;
    let dims = rd.expect("dims")?;
    let d: usize = rd.parse(dims.first())?;
    let h: usize = rd.parse(dims.get(1))?;
    let k: usize = rd.parse(dims.get(2))?;
    let mut params = ScorerParams::<S>::zeros(kind, d, h, k)?;
    let names = params.names();
    for (slot, name) in names.iter().enumerate() {
        let head = rd.expect("tensor")?;
        if head.first().map(String::as_str) != Some(*name) {
            return Err(rd.err(format!("expected tensor {name}, found {head:?}")));
        }
        let rows: usize = rd.parse(head.get(1))?;
        let cols: usize = rd.parse(head.get(2))?;
        if params.tensors[slot].dim() != (rows, cols) {
            return Err(rd.err(format!("tensor {name} has shape {rows}x{cols}")));
        }
        for r in 0..rows {
            let vals = rd.floats::<S>(cols)?;
            for (c, v) in vals.into_iter().enumerate() {
                params.tensors[slot][[r, c]] = v;
            }
        }
    }
    rd.expect("end")?;
    Ok(params)
}
