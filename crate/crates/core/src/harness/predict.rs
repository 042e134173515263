use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::{anchor_forward, reference_forward, BranchParams, Modality};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::metrics::{
    full_report, threshold_parse, BinaryParse, EvalConfig, MetricReport, Threshold,
};
use crate::numerics::Tensor;
use crate::synthdata::{matrix, Corpus};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    #[default]
    Anchor,
    Reference,
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(Branch::Anchor),
            "reference" => Ok(Branch::Reference),
            other => Err(Error::Config(format!(
                "unknown branch '{other}' (expected anchor or reference)"
            ))),
        }
    }
}

/// Segment-level probabilities for one video, `T × C` per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub probs_audio: Tensor,
    pub probs_visual: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PredictOptions {
    pub branch: Branch,
    pub unimodal_only: bool,
    /// See [`TrainConfig::video_gate`].
    pub video_gate: f64,
}

impl PredictOptions {
    pub fn from_config(config: &TrainConfig, branch: Branch) -> Self {
        PredictOptions {
            branch,
            unimodal_only: config.unimodal_only,
            video_gate: config.video_gate,
        }
    }
}

/// Runs the chosen branch on every video. The anchor path never touches
/// the reference parameters.
pub fn predict(
    params: &BranchParams,
    corpus: &Corpus,
    options: &PredictOptions,
) -> Result<Vec<Prediction>> {
    let gate = |seg, video: &Tensor| gate(seg, video, options.video_gate);
    corpus
        .samples
        .par_iter()
        .map(|s| {
            if s.classes() != params.classes() {
                return Err(Error::dim(
                    "predict classes",
                    &[s.classes()],
                    &[params.classes()],
                ));
            }
            let (probs_audio, probs_visual) = match options.branch {
                Branch::Anchor => {
                    let out = anchor_forward(s, params, options.unimodal_only)?;
                    let [va, vv] = out.modality_video_probs.clone();
                    (
                        gate(out.seg_probs_for(Modality::Audio), &va),
                        gate(out.seg_probs_for(Modality::Visual), &vv),
                    )
                }
                Branch::Reference => {
                    let out = reference_forward(s, params)?;
                    let [a, v] = out.seg_probs;
                    (gate(a, &out.video_probs[0]), gate(v, &out.video_probs[1]))
                }
            };
            Ok(Prediction {
                id: s.id.clone(),
                probs_audio,
                probs_visual,
            })
        })
        .collect()
}

fn gate(mut seg: Tensor, video: &Tensor, threshold: f64) -> Tensor {
    let c = seg.cols();
    for (i, x) in seg.data_mut().iter_mut().enumerate() {
        if video.data()[i % c] < threshold {
            *x = 0.0;
        }
    }
    seg
}

/// Thresholds predictions and scores them against the corpus ground truth.
pub fn evaluate(
    preds: &[Prediction],
    gt: &Corpus,
    threshold: &Threshold,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let pred: Vec<(String, BinaryParse)> = preds
        .iter()
        .map(|p| {
            Ok((
                p.id.clone(),
                threshold_parse(&p.probs_audio, &p.probs_visual, threshold)?,
            ))
        })
        .collect::<Result<_>>()?;
    let truth: Vec<(String, BinaryParse)> = gt
        .samples
        .iter()
        .map(|s| {
            let g = s.gt.as_ref().ok_or_else(|| {
                Error::Contract(format!("video {} has no segment ground truth", s.id))
            })?;
            Ok((
                s.id.clone(),
                BinaryParse {
                    audio: g.audio.clone(),
                    visual: g.visual.clone(),
                },
            ))
        })
        .collect::<Result<_>>()?;
    full_report(&pred, &truth, config)
}

/// Anchor-branch predictions scored with the config's evaluation settings.
pub fn evaluate_anchor(
    params: &BranchParams,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<MetricReport> {
    let preds = predict(
        params,
        corpus,
        &PredictOptions::from_config(config, Branch::Anchor),
    )?;
    evaluate(&preds, corpus, &config.eval_threshold, &config.eval())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    probs_audio: Vec<Vec<f64>>,
    probs_visual: Vec<Vec<f64>>,
}

pub fn write_predictions(preds: &[Prediction], out: &mut impl Write) -> std::io::Result<()> {
    for p in preds {
        let rec = Record {
            id: p.id.clone(),
            probs_audio: p.probs_audio.to_rows(),
            probs_visual: p.probs_visual.to_rows(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_predictions(preds, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(input: impl BufRead, path: &Path) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        let cols = rec.probs_audio.first().map_or(0, Vec::len);
        let probs_audio = matrix(rec.probs_audio, cols).map_err(perr)?;
        let probs_visual = matrix(rec.probs_visual, cols).map_err(perr)?;
        if probs_audio.shape() != probs_visual.shape() {
            return Err(perr(format!(
                "audio {:?} and visual {:?} shapes differ",
                probs_audio.shape(),
                probs_visual.shape()
            )));
        }
        out.push(Prediction {
            id: rec.id,
            probs_audio,
            probs_visual,
        });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(BufReader::new(file), path)
}
