//! Seeded synthetic corpora with known segment-level ground truth.
//!
//! Each class owns one prototype per modality. A segment's audio token is
//! the sum of the audio prototypes of the classes audible there, plus
//! `leak` times the audio prototypes of the visible-only classes, plus
//! Gaussian noise; visual tokens are built symmetrically.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::{SegmentGroundTruth, VideoSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventType {
    AudioOnly,
    VisualOnly,
    AudibleVisible,
}

impl EventType {
    pub fn audible(self) -> bool {
        self != EventType::VisualOnly
    }

    pub fn visible(self) -> bool {
        self != EventType::AudioOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_videos: usize,
    /// Segments per video.
    pub segments: usize,
    pub classes: usize,
    pub dim: usize,
    /// Expected events per video.
    pub event_rate: f64,
    pub p_audio_only: f64,
    pub p_visual_only: f64,
    pub p_audible_visible: f64,
    pub leak: f64,
    pub noise_sigma: f64,
    /// `C × C`, symmetric, zero diagonal. Entry `(i, j)` is added to the
    /// sampling weight of class `j` once class `i` is already present.
    pub cooccur: Vec<Vec<f64>>,
    pub seed: u64,
}

impl CorpusSpec {
    /// Desk-scale corpus: `T = 10`, `C = 5`, `D = 16`, with classes paired
    /// `(0,1)` and `(2,3)` by a co-occurrence boost.
    pub fn desk(n_videos: usize, seed: u64) -> Self {
        let classes = 5;
        let mut cooccur = vec![vec![0.0; classes]; classes];
        for (i, j) in [(0, 1), (2, 3)] {
            cooccur[i][j] = 3.0;
            cooccur[j][i] = 3.0;
        }
        CorpusSpec {
            n_videos,
            segments: 10,
            classes,
            dim: 16,
            event_rate: 2.0,
            p_audio_only: 0.35,
            p_visual_only: 0.35,
            p_audible_visible: 0.3,
            leak: 0.3,
            noise_sigma: 1.2,
            cooccur,
            seed,
        }
    }

    /// Reads a TOML specification and validates it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: CorpusSpec =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("corpus spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.segments == 0 || self.classes == 0 || self.dim == 0 {
            return bad("segments, classes and dim must be positive".into());
        }
        if !(self.event_rate >= 0.0 && self.event_rate <= self.classes as f64) {
            return bad(format!(
                "event_rate {} is infeasible with {} classes (one event per class)",
                self.event_rate, self.classes
            ));
        }
        let mix = [
            self.p_audio_only,
            self.p_visual_only,
            self.p_audible_visible,
        ];
        if mix.iter().any(|p| !(*p >= 0.0)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!(
                "event-type mix must be non-negative and sum to 1, got {mix:?}"
            ));
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return bad(format!("leak must lie in [0, 1], got {}", self.leak));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        let c = self.classes;
        if self.cooccur.len() != c || self.cooccur.iter().any(|r| r.len() != c) {
            return bad(format!("cooccur must be {c}x{c}"));
        }
        for i in 0..c {
            if self.cooccur[i][i] != 0.0 {
                return bad("cooccur diagonal must be zero".into());
            }
            for j in 0..c {
                let x = self.cooccur[i][j];
                if x != self.cooccur[j][i] || !(x >= 0.0 && x.is_finite()) {
                    return bad("cooccur must be symmetric with finite non-negative entries".into());
                }
            }
        }
        Ok(())
    }
}

/// One placed event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub class_index: usize,
    pub kind: EventType,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

/// A list of videos sharing `T`, `C`, `D` and class names.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub samples: Vec<VideoSample>,
    pub segments: usize,
    pub classes: usize,
    pub dim: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` videos and the rest.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.samples.len());
        let part = |s: &[VideoSample]| Corpus {
            samples: s.to_vec(),
            ..self.empty_like()
        };
        (part(&self.samples[..n]), part(&self.samples[n..]))
    }

    fn empty_like(&self) -> Corpus {
        Corpus {
            class_names: self.class_names.clone(),
            samples: Vec::new(),
            segments: self.segments,
            classes: self.classes,
            dim: self.dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    /// `C × D` per modality (audio, visual).
    pub class_prototypes: [Tensor; 2],
    /// Placed events per video, aligned with `corpus.samples`.
    pub events: Vec<Vec<Event>>,
    pub spec: CorpusSpec,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn video_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(GOLDEN)
}

fn gaussian(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = scale * z;
    }
    t
}

fn place_events(spec: &CorpusSpec, rng: &mut impl Rng) -> Vec<Event> {
    let c = spec.classes;
    let k = if spec.event_rate == 0.0 {
        0
    } else {
        Binomial::new(c as u64, spec.event_rate / c as f64)
            .expect("validated rate")
            .sample(rng) as usize
    };
    let mix = WeightedIndex::new([
        spec.p_audio_only,
        spec.p_visual_only,
        spec.p_audible_visible,
    ])
    .expect("validated mix");
    let mut placed: Vec<Event> = Vec::with_capacity(k);
    for _ in 0..k {
        let weights: Vec<f64> = (0..c)
            .map(|j| {
                if placed.iter().any(|e| e.class_index == j) {
                    0.0
                } else {
                    1.0 + placed
                        .iter()
                        .map(|e| spec.cooccur[e.class_index][j])
                        .sum::<f64>()
                }
            })
            .collect();
        let class_index = WeightedIndex::new(&weights)
            .expect("a free class remains")
            .sample(rng);
        let kind = [
            EventType::AudioOnly,
            EventType::VisualOnly,
            EventType::AudibleVisible,
        ][mix.sample(rng)];
        let len = rng.random_range(1..=spec.segments);
        let start = rng.random_range(0..=spec.segments - len);
        placed.push(Event {
            class_index,
            kind,
            start,
            end: start + len - 1,
        });
    }
    placed
}

/// Renders a video from an explicit event list. `noise` supplies the
/// Gaussian draws; pass `None` for noise-free tokens.
pub fn render_events(
    spec: &CorpusSpec,
    protos: &[Tensor; 2],
    events: &[Event],
    id: String,
    noise: Option<&mut ChaCha8Rng>,
) -> VideoSample {
    let (t, c, d) = (spec.segments, spec.classes, spec.dim);
    let mut gt = [Tensor::zeros(&[t, c]), Tensor::zeros(&[t, c])];
    let mut tokens = [Tensor::zeros(&[t, d]), Tensor::zeros(&[t, d])];
    for e in events {
        let active = [e.kind.audible(), e.kind.visible()];
        for s in e.start..=e.end {
            for m in 0..2 {
                if active[m] {
                    gt[m].data_mut()[s * c + e.class_index] = 1.0;
                    add_row(&mut tokens[m], s, protos[m].row(e.class_index), 1.0);
                } else {
                    // Unaligned event: its features bleed into the silent
                    // modality at strength `leak`.
                    add_row(&mut tokens[m], s, protos[m].row(e.class_index), spec.leak);
                }
            }
        }
    }
    if let Some(rng) = noise {
        if spec.noise_sigma > 0.0 {
            for tok in &mut tokens {
                for x in tok.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x += spec.noise_sigma * z;
                }
            }
        }
    }
    let [gt_audio, gt_visual] = gt;
    let gt = SegmentGroundTruth {
        audio: gt_audio,
        visual: gt_visual,
    };
    let [audio, visual] = tokens;
    VideoSample {
        id,
        audio,
        visual,
        weak_label: weak_labels_from_temporal(&gt),
        gt: Some(gt),
    }
}

fn render_video(
    spec: &CorpusSpec,
    protos: &[Tensor; 2],
    index: usize,
) -> (VideoSample, Vec<Event>) {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(spec.seed, index));
    let events = place_events(spec, &mut rng);
    let sample = render_events(
        spec,
        protos,
        &events,
        format!("vid{index:05}"),
        Some(&mut rng),
    );
    (sample, events)
}

fn add_row(t: &mut Tensor, row: usize, values: &[f64], scale: f64) {
    let d = values.len();
    for (x, v) in t.data_mut()[row * d..(row + 1) * d].iter_mut().zip(values) {
        *x += scale * v;
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = [
        gaussian(&[spec.classes, spec.dim], 1.0, &mut rng),
        gaussian(&[spec.classes, spec.dim], 1.0, &mut rng),
    ];
    let rendered: Vec<(VideoSample, Vec<Event>)> = (0..spec.n_videos)
        .into_par_iter()
        .map(|i| render_video(spec, &protos, i))
        .collect();
    let (samples, events) = rendered.into_iter().unzip();
    Ok(GeneratedCorpus {
        corpus: Corpus {
            class_names: (0..spec.classes).map(|k| format!("class_{k}")).collect(),
            samples,
            segments: spec.segments,
            classes: spec.classes,
            dim: spec.dim,
        },
        class_prototypes: protos,
        events,
        spec: spec.clone(),
    })
}

/// `Y_i = 1` iff class `i` is positive in any segment of either modality.
pub fn weak_labels_from_temporal(gt: &SegmentGroundTruth) -> Tensor {
    let c = gt.audio.cols();
    let mut y = Tensor::zeros(&[c]);
    for m in [&gt.audio, &gt.visual] {
        for (i, &x) in m.data().iter().enumerate() {
            if x > 0.5 {
                y.data_mut()[i % c] = 1.0;
            }
        }
    }
    y
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n_videos: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "D")]
    d: usize,
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    audio: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
    weak_label: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_audio: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_visual: Option<Vec<Vec<f64>>>,
}

pub(crate) fn matrix(rows: Vec<Vec<f64>>, cols: usize) -> std::result::Result<Tensor, String> {
    if rows.is_empty() {
        return Tensor::new(vec![0, cols], Vec::new()).map_err(|e| e.to_string());
    }
    Tensor::from_rows(&rows).map_err(|e| e.to_string())
}

pub fn write_corpus(corpus: &Corpus, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        n_videos: corpus.samples.len(),
        t: corpus.segments,
        c: corpus.classes,
        d: corpus.dim,
        class_names: corpus.class_names.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for s in &corpus.samples {
        let rec = Record {
            id: s.id.clone(),
            audio: s.audio.to_rows(),
            visual: s.visual.to_rows(),
            weak_label: s.weak_label.data().to_vec(),
            gt_audio: s.gt.as_ref().map(|g| g.audio.to_rows()),
            gt_visual: s.gt.as_ref().map(|g| g.visual.to_rows()),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn serialize_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus(corpus, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(input: impl BufRead, path: &Path) -> Result<Corpus> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = input.lines();
    let first = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(perr(1, "missing header line".into())),
    };
    let header: Header = serde_json::from_str(&first).map_err(|e| perr(1, e.to_string()))?;
    let mut corpus = Corpus {
        class_names: header.class_names,
        samples: Vec::with_capacity(header.n_videos),
        segments: header.t,
        classes: header.c,
        dim: header.d,
    };
    if corpus.class_names.len() != corpus.classes {
        return Err(perr(
            1,
            format!(
                "{} class names for C = {}",
                corpus.class_names.len(),
                corpus.classes
            ),
        ));
    }
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| perr(lineno, e.to_string()))?;
        let (t, c, d) = (corpus.segments, corpus.classes, corpus.dim);
        let gt = match (rec.gt_audio, rec.gt_visual) {
            (Some(a), Some(v)) => Some(SegmentGroundTruth {
                audio: matrix(a, c).map_err(|e| perr(lineno, e))?,
                visual: matrix(v, c).map_err(|e| perr(lineno, e))?,
            }),
            (None, None) => None,
            _ => {
                return Err(perr(
                    lineno,
                    "gt_audio and gt_visual must appear together".into(),
                ))
            }
        };
        let sample = VideoSample {
            id: rec.id,
            audio: matrix(rec.audio, d).map_err(|e| perr(lineno, e))?,
            visual: matrix(rec.visual, d).map_err(|e| perr(lineno, e))?,
            weak_label: Tensor::vector(rec.weak_label),
            gt,
        };
        sample.validate().map_err(|e| perr(lineno, e.to_string()))?;
        if sample.segments() != t || sample.dim() != d || sample.classes() != c {
            return Err(perr(
                lineno,
                format!(
                    "video {} has T={} D={} C={}, header says T={t} D={d} C={c}",
                    sample.id,
                    sample.segments(),
                    sample.dim(),
                    sample.classes()
                ),
            ));
        }
        corpus.samples.push(sample);
    }
    if corpus.samples.len() != header.n_videos {
        return Err(perr(
            corpus.samples.len() + 2,
            format!(
                "header announces {} videos, found {}",
                header.n_videos,
                corpus.samples.len()
            ),
        ));
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), path)
}
