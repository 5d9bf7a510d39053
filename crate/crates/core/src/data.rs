//! Domain types shared by every module, the on-disk dataset layout and
//! dataset validation.
//!
//! Class indices are dense integers `0..K`; names only matter for I/O.
//! A segmentation is stored as per-segment lengths, cut positions are derived.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

/// Ordered class vocabulary with an optional background class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    background_id: Option<usize>,
}

impl LabelSet {
    pub fn new(names: Vec<String>, background_id: Option<usize>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("label set", "needs at least one class"));
        }
        let mut seen = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::invalid("label set", format!("bad class name {n:?}")));
            }
            if let Some(j) = seen.insert(n.as_str(), i) {
                return Err(Error::invalid(
                    "label set",
                    format!("class name {n:?} used by {j} and {i}"),
                ));
            }
        }
        if let Some(b) = background_id {
            if b >= names.len() {
                return Err(Error::UnknownClass {
                    class: b,
                    k: names.len(),
                });
            }
        }
        Ok(Self {
            names,
            background_id,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn background_id(&self) -> Option<usize> {
        self.background_id
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Marks the class called `name` as background.
    pub fn with_background(mut self, name: &str) -> Result<Self> {
        let id = self
            .index_of(name)
            .ok_or_else(|| Error::invalid("background class", format!("unknown class {name:?}")))?;
        self.background_id = Some(id);
        Ok(self)
    }
}

/// A video's T×D frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence<S> {
    video_id: String,
    features: Array2<S>,
}

impl<S: Scalar> FrameSequence<S> {
    pub fn new(video_id: impl Into<String>, features: Array2<S>) -> Result<Self> {
        let video_id = video_id.into();
        let (t, d) = features.dim();
        if t == 0 || d == 0 {
            return Err(Error::invalid(
                "frame sequence",
                format!("{video_id}: empty feature matrix {t}x{d}"),
            ));
        }
        if let Some(pos) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(
                "frame sequence",
                format!("{video_id}: non-finite feature at flat index {pos}"),
            ));
        }
        Ok(Self { video_id, features })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn features(&self) -> ArrayView2<'_, S> {
        self.features.view()
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, S> {
        self.features.row(t)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Ordered action labels of a video without timing (the weak label).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Transcript(Vec<usize>);

impl Transcript {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        check_label_run(&labels, "transcript")?;
        Ok(Self(labels))
    }

    /// Builds a transcript as read from disk; [`validate_dataset`] reports
    /// whatever is wrong with it.
    pub fn new_unchecked(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_classes(&self, k: usize) -> Result<()> {
        match self.0.iter().find(|&&a| a >= k) {
            Some(&class) => Err(Error::UnknownClass { class, k }),
            None => Ok(()),
        }
    }
}

fn check_label_run(labels: &[usize], what: &'static str) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid(what, "needs at least one label"));
    }
    if let Some(n) = labels.windows(2).position(|w| w[0] == w[1]) {
        return Err(Error::invalid(
            what,
            format!("labels {} and {} repeat class {}", n, n + 1, labels[n]),
        ));
    }
    Ok(())
}

/// Transcript labels plus per-segment frame counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    labels: Vec<usize>,
    lengths: Vec<usize>,
}

impl Segmentation {
    pub fn new(labels: Vec<usize>, lengths: Vec<usize>) -> Result<Self> {
        check_label_run(&labels, "segmentation")?;
        if labels.len() != lengths.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} lengths",
                labels.len(),
                lengths.len()
            )));
        }
        if let Some(n) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::invalid("segmentation", format!("segment {n} is empty")));
        }
        Ok(Self { labels, lengths })
    }

    /// Builds a segmentation from `labels.len() + 1` cut positions starting at 0.
    pub fn from_cuts(labels: Vec<usize>, cuts: &[usize]) -> Result<Self> {
        if cuts.len() != labels.len() + 1 || cuts.first() != Some(&0) {
            return Err(Error::Shape(format!(
                "{} cuts for {} labels",
                cuts.len(),
                labels.len()
            )));
        }
        let mut lengths = Vec::with_capacity(labels.len());
        for w in cuts.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("segmentation", format!("cuts not increasing: {cuts:?}")));
            }
            lengths.push(w[1] - w[0]);
        }
        Self::new(labels, lengths)
    }

    /// Run-length encodes a per-frame label stream.
    pub fn from_frame_labels(frames: &[usize]) -> Result<Self> {
        let mut labels = Vec::new();
        let mut lengths: Vec<usize> = Vec::new();
        for &a in frames {
            if labels.last() == Some(&a) {
                *lengths.last_mut().unwrap() += 1;
            } else {
                labels.push(a);
                lengths.push(1);
            }
        }
        Self::new(labels, lengths)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Cut positions `0 = b_1 < ... < b_{N+1} = T`.
    pub fn cuts(&self) -> Vec<usize> {
        let mut cuts = Vec::with_capacity(self.lengths.len() + 1);
        cuts.push(0);
        let mut acc = 0;
        for &l in &self.lengths {
            acc += l;
            cuts.push(acc);
        }
        cuts
    }

    pub fn transcript(&self) -> Transcript {
        Transcript(self.labels.clone())
    }

    pub fn frame_labels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .zip(&self.lengths)
            .flat_map(|(&a, &l)| std::iter::repeat_n(a, l))
            .collect()
    }
}

/// T×K matrix of per-frame class log-posteriors `log p(a | x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLogPosteriors<S> {
    values: Array2<S>,
}

impl<S: Scalar> FrameLogPosteriors<S> {
    pub fn new(values: Array2<S>) -> Result<Self> {
        let (t, k) = values.dim();
        if t == 0 || k == 0 {
            return Err(Error::Shape(format!("empty posterior matrix {t}x{k}")));
        }
        let tol = S::lit(1e-6).max(S::epsilon() * S::from_usize_lossy(8 * k));
        for (i, row) in values.rows().into_iter().enumerate() {
            if row.iter().any(|x| x.is_nan() || *x == S::infinity()) {
                return Err(Error::invalid("log-posteriors", format!("row {i} has NaN or +inf")));
            }
            let z = log_sum_exp(row.iter().copied());
            if !((z).abs() <= tol) {
                return Err(Error::invalid(
                    "log-posteriors",
                    format!("row {i} normalizes to {z} instead of 0"),
                ));
            }
        }
        Ok(Self { values })
    }

    /// Row-wise log-softmax of unnormalized scores.
    pub fn from_logits(logits: ArrayView2<'_, S>) -> Result<Self> {
        let mut values = logits.to_owned();
        for mut row in values.rows_mut() {
            let z = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|x| x - z);
        }
        Self::new(values)
    }

    pub fn uniform(t: usize, k: usize) -> Self {
        let v = -S::from_usize_lossy(k).ln();
        Self {
            values: Array2::from_elem((t, k), v),
        }
    }

    pub fn values(&self) -> ArrayView2<'_, S> {
        self.values.view()
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }

    /// Frame-wise argmax labels.
    pub fn argmax_labels(&self) -> Vec<usize> {
        self.values
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (a, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }
}

/// One video of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Video<S> {
    pub features: FrameSequence<S>,
    pub transcript: Transcript,
    pub ground_truth: Option<Vec<usize>>,
}

impl<S: Scalar> Video<S> {
    pub fn id(&self) -> &str {
        self.features.video_id()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub label_set: LabelSet,
    pub videos: Vec<Video<S>>,
}

/// A single invariant violation found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub video_id: String,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.video_id, self.field, self.message)
    }
}

/// Reports every broken dataset invariant; an empty list means the dataset is well-formed.
pub fn validate_dataset<S: Scalar>(d: &Dataset<S>) -> Vec<Violation> {
    let k = d.label_set.len();
    let mut out = Vec::new();
    let mut push = |video: &str, field: &'static str, message: String| {
        out.push(Violation {
            video_id: video.to_string(),
            field,
            message,
        })
    };
    let mut ids = HashMap::new();
    for v in &d.videos {
        let id = v.id();
        if ids.insert(id.to_string(), ()).is_some() {
            push(id, "video_id", "duplicate video id".into());
        }
        let labels = v.transcript.labels();
        if labels.is_empty() {
            push(id, "transcript", "empty transcript".into());
        }
        if let Some(&bad) = labels.iter().find(|&&a| a >= k) {
            push(id, "transcript", format!("class {bad} out of range for {k} classes"));
        }
        if let Some(n) = labels.windows(2).position(|w| w[0] == w[1]) {
            push(
                id,
                "transcript",
                format!("adjacent labels {} and {} both class {}", n, n + 1, labels[n]),
            );
        }
        if labels.len() > v.features.len() {
            push(
                id,
                "transcript",
                format!("{} labels exceed {} frames", labels.len(), v.features.len()),
            );
        }
        if let Some(gt) = &v.ground_truth {
            if gt.len() != v.features.len() {
                push(
                    id,
                    "ground_truth",
                    format!("{} labels for {} frames", gt.len(), v.features.len()),
                );
            }
            if let Some(&bad) = gt.iter().find(|&&a| a >= k) {
                push(id, "ground_truth", format!("class {bad} out of range for {k} classes"));
            }
        }
    }
    out
}

impl<S: Scalar> Dataset<S> {
    /// Mean video length and mean transcript length.
    pub fn mean_lengths(&self) -> Option<(f64, f64)> {
        if self.videos.is_empty() {
            return None;
        }
        let n = self.videos.len() as f64;
        let t: usize = self.videos.iter().map(|v| v.features.len()).sum();
        let l: usize = self.videos.iter().map(|v| v.transcript.len()).sum();
        Some((t as f64 / n, l as f64 / n))
    }

    pub fn transcripts(&self) -> Vec<Transcript> {
        self.videos.iter().map(|v| v.transcript.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Directory layout I/O
// ---------------------------------------------------------------------------

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads `mapping.txt` (`index name` per line).
pub fn read_mapping(path: &Path) -> Result<LabelSet> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let idx: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, i + 1, "expected `index name`"))?;
        let name = parts
            .next()
            .ok_or_else(|| parse_err(path, i + 1, "missing class name"))?;
        if parts.next().is_some() {
            return Err(parse_err(path, i + 1, "trailing tokens"));
        }
        entries.push((idx, name.to_string()));
    }
    entries.sort_by_key(|e| e.0);
    for (pos, (idx, _)) in entries.iter().enumerate() {
        if *idx != pos {
            return Err(parse_err(path, 0, format!("class indices must be dense 0..K, missing {pos}")));
        }
    }
    LabelSet::new(entries.into_iter().map(|e| e.1).collect(), None)
}

pub fn write_mapping(path: &Path, labels: &LabelSet) -> Result<()> {
    let mut s = String::new();
    for (i, n) in labels.names().iter().enumerate() {
        s.push_str(&format!("{i} {n}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_features<S: Scalar>(path: &Path, video_id: &str) -> Result<FrameSequence<S>> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let x: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("bad float {tok:?}")))?;
            data.push(S::from_f64(x).ok_or_else(|| parse_err(path, i + 1, "unrepresentable"))?);
        }
        let d = data.len() - before;
        match dim {
            None => dim = Some(d),
            Some(d0) if d0 != d => {
                return Err(parse_err(path, i + 1, format!("expected {d0} values, got {d}")))
            }
            _ => {}
        }
        rows += 1;
    }
    let dim = dim.ok_or_else(|| parse_err(path, 0, "no feature rows"))?;
    let features = Array2::from_shape_vec((rows, dim), data).map_err(|e| Error::Shape(e.to_string()))?;
    FrameSequence::new(video_id, features)
}

pub fn write_features<S: Scalar>(path: &Path, seq: &FrameSequence<S>) -> Result<()> {
    let mut s = String::new();
    for row in seq.features().rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{}", x.as_f64())).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a file of one class name per line.
pub fn read_label_lines(path: &Path, labels: &LabelSet) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        let idx = labels
            .index_of(name)
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown class {name:?}")))?;
        out.push(idx);
    }
    Ok(out)
}

pub fn write_label_lines(path: &Path, classes: &[usize], labels: &LabelSet) -> Result<()> {
    let mut s = String::new();
    for &a in classes {
        s.push_str(labels.name(a));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Loads a dataset directory: `mapping.txt`, `features/`, `transcripts/`
/// and optionally `groundTruth/`. Videos are ordered by id.
pub fn read_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>> {
    let label_set = read_mapping(&dir.join("mapping.txt"))?;
    let mut ids: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir.join("features"))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let mut videos = Vec::with_capacity(ids.len());
    for id in ids {
        let features = read_features(&dir.join("features").join(format!("{id}.txt")), &id)?;
        let transcript = Transcript::new_unchecked(read_label_lines(
            &dir.join("transcripts").join(format!("{id}.txt")),
            &label_set,
        )?);
        let gt_path = dir.join("groundTruth").join(format!("{id}.txt"));
        let ground_truth = if gt_path.exists() {
            Some(read_label_lines(&gt_path, &label_set)?)
        } else {
            None
        };
        videos.push(Video {
            features,
            transcript,
            ground_truth,
        });
    }
    Ok(Dataset { label_set, videos })
}

pub fn write_dataset<S: Scalar>(dir: &Path, d: &Dataset<S>) -> Result<()> {
    fs::create_dir_all(dir.join("features"))?;
    fs::create_dir_all(dir.join("transcripts"))?;
    write_mapping(&dir.join("mapping.txt"), &d.label_set)?;
    for v in &d.videos {
        let id = v.id();
        write_features(&dir.join("features").join(format!("{id}.txt")), &v.features)?;
        write_label_lines(
            &dir.join("transcripts").join(format!("{id}.txt")),
            v.transcript.labels(),
            &d.label_set,
        )?;
        if let Some(gt) = &v.ground_truth {
            fs::create_dir_all(dir.join("groundTruth"))?;
            write_label_lines(&dir.join("groundTruth").join(format!("{id}.txt")), gt, &d.label_set)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn labels(k: usize) -> LabelSet {
        LabelSet::new((0..k).map(|i| format!("c{i}")).collect(), None).unwrap()
    }

    fn video(id: &str, t: usize, transcript: Vec<usize>, gt: Option<Vec<usize>>) -> Video<f64> {
        Video {
            features: FrameSequence::new(id, Array2::from_elem((t, 2), 0.5)).unwrap(),
            transcript: Transcript::new_unchecked(transcript),
            ground_truth: gt,
        }
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        let d = Dataset {
            label_set: labels(3),
            videos: vec![
                video("a", 4, vec![0, 1], Some(vec![0, 0, 1, 1])),
                video("b", 3, vec![2, 0, 1], None),
            ],
        };
        assert!(validate_dataset(&d).is_empty());
    }

    #[test]
    fn repeated_adjacent_label_is_reported() {
        let d = Dataset {
            label_set: labels(2),
            videos: vec![video("rep", 5, vec![0, 0], None)],
        };
        let v = validate_dataset(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].video_id, "rep");
        assert_eq!(v[0].field, "transcript");
    }

    #[test]
    fn short_ground_truth_is_reported() {
        let d = Dataset {
            label_set: labels(2),
            videos: vec![video("gt", 4, vec![0, 1], Some(vec![0, 1, 1]))],
        };
        let v = validate_dataset(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "ground_truth");
    }

    #[test]
    fn label_set_rejects_duplicates_and_bad_background() {
        assert!(LabelSet::new(vec!["a".into(), "a".into()], None).is_err());
        assert!(LabelSet::new(vec!["a".into()], Some(1)).is_err());
        assert!(LabelSet::new(vec![], None).is_err());
    }

    #[test]
    fn transcript_rejects_repeats() {
        assert!(Transcript::new(vec![1, 1]).is_err());
        assert!(Transcript::new(vec![]).is_err());
        assert!(Transcript::new(vec![1, 0, 1]).is_ok());
    }

    #[test]
    fn segmentation_cuts_and_frames() {
        let s = Segmentation::new(vec![2, 0], vec![3, 2]).unwrap();
        assert_eq!(s.cuts(), vec![0, 3, 5]);
        assert_eq!(s.frame_labels(), vec![2, 2, 2, 0, 0]);
        assert_eq!(Segmentation::from_frame_labels(&s.frame_labels()).unwrap(), s);
        assert_eq!(Segmentation::from_cuts(vec![2, 0], &[0, 3, 5]).unwrap(), s);
        assert!(Segmentation::new(vec![1], vec![0]).is_err());
        assert!(Segmentation::new(vec![1, 1], vec![1, 1]).is_err());
    }

    #[test]
    fn posteriors_must_normalize() {
        assert!(FrameLogPosteriors::new(array![[0.0f64, 0.0]]).is_err());
        let p = FrameLogPosteriors::from_logits(array![[1.0f64, 2.0], [0.0, f64::NEG_INFINITY]].view())
            .unwrap();
        assert_eq!(p.values()[[1, 0]], 0.0);
        assert_eq!(p.argmax_labels(), vec![1, 0]);
        assert!(FrameSequence::new("x", array![[f64::NAN]]).is_err());
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let feats = array![[0.1f64, -2.5e-7], [1.0 / 3.0, 123456.789]];
        let d = Dataset {
            label_set: labels(2),
            videos: vec![Video {
                features: FrameSequence::new("v1", feats).unwrap(),
                transcript: Transcript::new(vec![1, 0]).unwrap(),
                ground_truth: Some(vec![1, 0]),
            }],
        };
        write_dataset(dir.path(), &d).unwrap();
        let back: Dataset<f64> = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }
}
