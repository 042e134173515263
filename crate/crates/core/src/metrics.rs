//! Segment- and event-level F-scores for audio-visual video parsing,
//! including the exclusive audible-only / visible-only streams.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Thresholded `T × C` predictions or labels for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryParse {
    pub audio: Tensor,
    pub visual: Tensor,
}

/// `ao = a(1−v)`, `vo = v(1−a)`, `av = a·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExclusiveParse {
    pub audio_only: Tensor,
    pub visual_only: Tensor,
    pub audible_visible: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    A,
    V,
    AV,
    Ao,
    Vo,
}

impl Stream {
    pub const ALL: [Stream; 5] = [Stream::A, Stream::V, Stream::AV, Stream::Ao, Stream::Vo];

    fn select<'a>(self, raw: &'a BinaryParse, excl: &'a ExclusiveParse) -> &'a Tensor {
        match self {
            Stream::A => &raw.audio,
            Stream::V => &raw.visual,
            Stream::AV => &excl.audible_visible,
            Stream::Ao => &excl.audio_only,
            Stream::Vo => &excl.visual_only,
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stream::A => "a",
            Stream::V => "v",
            Stream::AV => "av",
            Stream::Ao => "ao",
            Stream::Vo => "vo",
        };
        f.write_str(s)
    }
}

/// Maximal run of positive segments `start..=end` for one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventProposal {
    pub class_index: usize,
    pub start: usize,
    pub end: usize,
    pub stream: Stream,
}

impl EventProposal {
    pub fn iou(&self, other: &EventProposal) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        let inter = if hi >= lo { hi - lo + 1 } else { 0 };
        let union = (self.end - self.start + 1) + (other.end - other.start + 1) - inter;
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Scalar(f64),
    PerClass(Vec<f64>),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Scalar(0.5)
    }
}

impl Threshold {
    pub fn validate(&self, classes: Option<usize>) -> Result<()> {
        let values: &[f64] = match self {
            Threshold::Scalar(t) => std::slice::from_ref(t),
            Threshold::PerClass(ts) => {
                if let Some(c) = classes {
                    if ts.len() != c {
                        return Err(Error::Config(format!(
                            "expected {c} per-class thresholds, got {}",
                            ts.len()
                        )));
                    }
                }
                ts
            }
        };
        for &t in values {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!(
                    "threshold must lie in (0, 1), got {t}"
                )));
            }
        }
        Ok(())
    }

    fn at(&self, class: usize) -> f64 {
        match self {
            Threshold::Scalar(t) => *t,
            Threshold::PerClass(ts) => ts[class],
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Scalar(t) => write!(f, "{t}"),
            Threshold::PerClass(ts) => {
                let parts: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("invalid threshold value '{p}'")))
        };
        let t = if s.contains(',') {
            Threshold::PerClass(s.split(',').map(parse).collect::<Result<_>>()?)
        } else {
            Threshold::Scalar(parse(s)?)
        };
        t.validate(None)?;
        Ok(t)
    }
}

fn check_matrix(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `ŷ = 1` iff `p > threshold` (strict).
pub fn threshold_parse(
    seg_probs_audio: &Tensor,
    seg_probs_visual: &Tensor,
    threshold: &Threshold,
) -> Result<BinaryParse> {
    check_matrix("threshold_parse", seg_probs_audio, seg_probs_visual)?;
    let classes = seg_probs_audio.cols();
    threshold.validate(Some(classes))?;
    let cut = |p: &Tensor| {
        let data = p
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if x > threshold.at(i % classes) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(p.shape().to_vec(), data).expect("same shape")
    };
    Ok(BinaryParse {
        audio: cut(seg_probs_audio),
        visual: cut(seg_probs_visual),
    })
}

pub fn derive_exclusive(parse: &BinaryParse) -> ExclusiveParse {
    let combine = |f: fn(bool, bool) -> bool| {
        let data = parse
            .audio
            .data()
            .iter()
            .zip(parse.visual.data())
            .map(|(&a, &v)| f(a > 0.5, v > 0.5) as u8 as f64)
            .collect();
        Tensor::new(parse.audio.shape().to_vec(), data).expect("same shape")
    };
    ExclusiveParse {
        audio_only: combine(|a, v| a && !v),
        visual_only: combine(|a, v| v && !a),
        audible_visible: combine(|a, v| a && v),
    }
}

/// Integer confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)` in percent; 100 when nothing is positive.
    pub fn fscore(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            100.0
        } else {
            100.0 * (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn merge(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Cell-wise confusion between two binary `T × C` streams.
pub fn segment_counts(pred: &Tensor, gt: &Tensor) -> Result<Confusion> {
    check_matrix("segment_counts", pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p > 0.5, g > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Corpus-level segment F-score with counts accumulated over all videos.
pub fn segment_fscore(pred: &[Tensor], gt: &[Tensor]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("segment_fscore", &[pred.len()], &[gt.len()]));
    }
    let mut total = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        total = total.merge(segment_counts(p, g)?);
    }
    Ok(total.fscore())
}

/// Maximal runs of positives per class, ordered by class then start.
pub fn extract_event_proposals(stream: &Tensor, kind: Stream) -> Vec<EventProposal> {
    let (t, c) = (stream.rows(), stream.cols());
    let mut out = Vec::new();
    for class_index in 0..c {
        let mut start = None;
        for s in 0..=t {
            let on = s < t && stream.at(s, class_index) > 0.5;
            match (on, start) {
                (true, None) => start = Some(s),
                (false, Some(b)) => {
                    out.push(EventProposal {
                        class_index,
                        start: b,
                        end: s - 1,
                        stream: kind,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    out
}

/// Greedy one-to-one matching in descending IoU over same-class pairs with
/// IoU ≥ `iou`. Ties break on prediction then ground-truth order.
pub fn event_counts(pred: &[EventProposal], gt: &[EventProposal], iou: f64) -> Confusion {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if p.class_index == g.class_index {
                let o = p.iou(g);
                if o >= iou {
                    pairs.push((o, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            tp += 1;
        }
    }
    Confusion {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gt.len() as u64 - tp,
        tn: 0,
    }
}

pub fn event_fscore(pred: &[EventProposal], gt: &[EventProposal], iou: f64) -> f64 {
    event_counts(pred, gt, iou).fscore()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Counts summed over the whole corpus, then one F-score.
    #[default]
    Micro,
    /// One F-score per video, then the mean.
    PerVideoMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou: f64,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou: 0.5,
            aggregation: Aggregation::Micro,
        }
    }
}

/// Nine F-scores (percent) at one level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub a: f64,
    pub ao: f64,
    pub v: f64,
    pub vo: f64,
    pub av: f64,
    pub type_av: f64,
    pub type_avo: f64,
    pub event_av: f64,
    pub event_avo: f64,
}

impl LevelScores {
    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("a", self.a),
            ("ao", self.ao),
            ("v", self.v),
            ("vo", self.vo),
            ("av", self.av),
            ("type_av", self.type_av),
            ("type_avo", self.type_avo),
            ("event_av", self.event_av),
            ("event_avo", self.event_avo),
        ]
    }
}

/// Per-stream confusion counts at one level, summed over the corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub streams: BTreeMap<Stream, Confusion>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub segment: LevelScores,
    pub event: LevelScores,
    pub segment_counts: LevelCounts,
    pub event_counts: LevelCounts,
}

impl MetricReport {
    /// Stable `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (level, scores) in [("segment", &self.segment), ("event", &self.event)] {
            for (k, v) in scores.entries() {
                out.push_str(&format!("{level}.{k} = {v:.6}\n"));
            }
        }
        for (level, counts) in [
            ("segment", &self.segment_counts),
            ("event", &self.event_counts),
        ] {
            for (s, c) in &counts.streams {
                out.push_str(&format!(
                    "{level}.count.{s} = tp:{} fp:{} fn:{} tn:{}\n",
                    c.tp, c.fp, c.fn_, c.tn
                ));
            }
        }
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Per-video counts for every stream at both levels.
#[derive(Clone, Debug, Default)]
struct VideoCounts {
    segment: BTreeMap<Stream, Confusion>,
    event: BTreeMap<Stream, Confusion>,
}

fn video_counts(pred: &BinaryParse, gt: &BinaryParse, iou: f64) -> Result<VideoCounts> {
    check_matrix("full_report", &pred.audio, &gt.audio)?;
    check_matrix("full_report", &pred.visual, &gt.visual)?;
    let (pe, ge) = (derive_exclusive(pred), derive_exclusive(gt));
    let mut out = VideoCounts::default();
    for s in Stream::ALL {
        let (p, g) = (s.select(pred, &pe), s.select(gt, &ge));
        out.segment.insert(s, segment_counts(p, g)?);
        out.event.insert(
            s,
            event_counts(
                &extract_event_proposals(p, s),
                &extract_event_proposals(g, s),
                iou,
            ),
        );
    }
    Ok(out)
}

fn level_scores(videos: &[&BTreeMap<Stream, Confusion>], agg: Aggregation) -> LevelScores {
    let pooled = |m: &BTreeMap<Stream, Confusion>, a: Stream, b: Stream| m[&a].merge(m[&b]);
    let scores = |m: &BTreeMap<Stream, Confusion>| {
        let f = |s: Stream| m[&s].fscore();
        [
            f(Stream::A),
            f(Stream::Ao),
            f(Stream::V),
            f(Stream::Vo),
            f(Stream::AV),
            pooled(m, Stream::A, Stream::V).fscore(),
            pooled(m, Stream::Ao, Stream::Vo).fscore(),
        ]
    };
    let raw: [f64; 7] = match agg {
        Aggregation::Micro => {
            let mut total: BTreeMap<Stream, Confusion> = Stream::ALL
                .iter()
                .map(|&s| (s, Confusion::default()))
                .collect();
            for m in videos {
                for (s, c) in m.iter() {
                    let e = total.get_mut(s).expect("all streams");
                    *e = e.merge(*c);
                }
            }
            scores(&total)
        }
        Aggregation::PerVideoMean => {
            let mut acc = [0.0; 7];
            for m in videos {
                for (a, x) in acc.iter_mut().zip(scores(m)) {
                    *a += x;
                }
            }
            if videos.is_empty() {
                [100.0; 7]
            } else {
                acc.map(|a| a / videos.len() as f64)
            }
        }
    };
    let [a, ao, v, vo, av, event_av, event_avo] = raw;
    LevelScores {
        a,
        ao,
        v,
        vo,
        av,
        type_av: (a + v + av) / 3.0,
        type_avo: (ao + vo + av) / 3.0,
        event_av,
        event_avo,
    }
}

/// All nine metrics at segment and event level. Predictions and ground
/// truth are matched by id; enumeration order does not matter.
pub fn full_report(
    pred: &[(String, BinaryParse)],
    gt: &[(String, BinaryParse)],
    config: &EvalConfig,
) -> Result<MetricReport> {
    if !(config.iou > 0.0 && config.iou <= 1.0) {
        return Err(Error::Config(format!(
            "iou threshold must lie in (0, 1], got {}",
            config.iou
        )));
    }
    let pmap: BTreeMap<&str, &BinaryParse> = pred.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let gmap: BTreeMap<&str, &BinaryParse> = gt.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let missing_in_pred: Vec<String> = gmap
        .keys()
        .filter(|k| !pmap.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    let missing_in_gt: Vec<String> = pmap
        .keys()
        .filter(|k| !gmap.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    if !missing_in_pred.is_empty() || !missing_in_gt.is_empty() {
        return Err(Error::Alignment {
            missing_in_pred,
            missing_in_gt,
        });
    }
    let per_video: Vec<VideoCounts> = gmap
        .iter()
        .map(|(id, g)| video_counts(pmap[id], g, config.iou))
        .collect::<Result<_>>()?;
    let seg: Vec<_> = per_video.iter().map(|v| &v.segment).collect();
    let evt: Vec<_> = per_video.iter().map(|v| &v.event).collect();
    let sum = |ms: &[&BTreeMap<Stream, Confusion>]| LevelCounts {
        streams: Stream::ALL
            .iter()
            .map(|&s| {
                (
                    s,
                    ms.iter()
                        .fold(Confusion::default(), |acc, m| acc.merge(m[&s])),
                )
            })
            .collect(),
    };
    Ok(MetricReport {
        segment: level_scores(&seg, config.aggregation),
        event: level_scores(&evt, config.aggregation),
        segment_counts: sum(&seg),
        event_counts: sum(&evt),
    })
}

/// Segment-level TP/TN/FP/FN rates for one event type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeRates {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    pub fn_: f64,
}

impl TypeRates {
    /// TP and FN normalised by ground-truth positives, TN and FP by
    /// ground-truth negatives (percent). Empty denominators give 0.
    pub fn from_counts(c: &Confusion) -> Self {
        let pct = |n: u64, d: u64| {
            if d == 0 {
                0.0
            } else {
                100.0 * n as f64 / d as f64
            }
        };
        let (pos, neg) = (c.tp + c.fn_, c.tn + c.fp);
        TypeRates {
            tp: pct(c.tp, pos),
            tn: pct(c.tn, neg),
            fp: pct(c.fp, neg),
            fn_: pct(c.fn_, pos),
        }
    }
}

/// Rates for audible-only, visible-only and audible-visible events, taken
/// from the exclusive segment-level streams.
pub fn type_rates(report: &MetricReport) -> [(Stream, TypeRates); 3] {
    let r = |s: Stream| {
        (
            s,
            TypeRates::from_counts(&report.segment_counts.streams[&s]),
        )
    };
    [r(Stream::Ao), r(Stream::Vo), r(Stream::AV)]
}
