use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::{
    anchor_forward_on, reference_forward_on, sample_tokens, BranchParams, Modality, VideoSample,
};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::optim::Adam;
use crate::harness::predict::evaluate_anchor;
use crate::losses::{
    cooccurrence_kd, distil_pseudo_labels, event_aware_nce, self_modality_kd, unalignment_weights,
    video_loss_anchor, video_loss_reference, LossBundle, LossVars, PseudoSource,
};
use crate::metrics::MetricReport;
use crate::numerics::{Tape, Tensor};
use crate::synthdata::Corpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Per-sample mean of every component over the epoch.
    pub loss: LossBundle,
    pub held_out: Option<MetricReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub seed: u64,
    pub config: TrainConfig,
    pub wall_clock_secs: f64,
}

/// Wall-clock time is excluded: two runs with the same seed compare equal.
impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs && self.seed == other.seed && self.config == other.config
    }
}

/// Which loss terms a step builds.
#[derive(Clone, Copy, Debug)]
struct Plan {
    ref_video: bool,
    evt: bool,
    kd: bool,
    cls: bool,
}

impl Plan {
    fn for_epoch(cfg: &TrainConfig, epoch: usize) -> Plan {
        let collaborative = epoch >= cfg.warmup_epochs;
        Plan {
            ref_video: !cfg.disable_ref_video,
            evt: collaborative && !cfg.disable_evt,
            kd: collaborative && !cfg.disable_kd,
            cls: collaborative && !cfg.disable_cls,
        }
    }

    fn needs_reference(&self) -> bool {
        self.ref_video || self.evt || self.kd || self.cls
    }
}

struct StepOutput {
    grads: Option<Vec<Tensor>>,
    bundle: LossBundle,
}

fn sample_step(
    params: &BranchParams,
    sample: &VideoSample,
    cfg: &TrainConfig,
    plan: Plan,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let tokens = sample_tokens(&mut tape, sample);
    let ba = params.bind_anchor(&mut tape);
    let anchor = anchor_forward_on(&mut tape, tokens, &ba, cfg.unimodal_only)?;
    let mut vars = LossVars {
        anchor_video: Some(video_loss_anchor(&mut tape, &anchor, &sample.weak_label)?),
        ..LossVars::default()
    };
    let br = if plan.needs_reference() {
        Some(params.bind_reference(&mut tape, !cfg.disable_class_tokens))
    } else {
        None
    };
    if let Some(br) = &br {
        let reference = reference_forward_on(&mut tape, tokens, br)?;
        if plan.ref_video {
            vars.ref_video = Some(video_loss_reference(
                &mut tape,
                &reference,
                &sample.weak_label,
            )?);
        }
        if plan.evt {
            let rv = &reference.video_probs;
            let g = distil_pseudo_labels(
                tape.value(rv[0]),
                tape.value(rv[1]),
                cfg.theta,
                PseudoSource::Reference,
            )?;
            let w = unalignment_weights(&g);
            let rt = [
                reference.segment_tokens(&mut tape, Modality::Audio)?,
                reference.segment_tokens(&mut tape, Modality::Visual)?,
            ];
            vars.event_contrastive = Some(event_aware_nce(
                &mut tape,
                anchor.tokens,
                rt,
                &w,
                &cfg.nce(),
            )?);
        }
        if plan.kd {
            let av = &anchor.modality_video_probs;
            let g = distil_pseudo_labels(
                tape.value(av[0]),
                tape.value(av[1]),
                cfg.theta,
                PseudoSource::Anchor,
            )?;
            vars.self_modality_kd = Some(self_modality_kd(&mut tape, &g, &reference)?);
        }
        if plan.cls {
            vars.cooccurrence_kd = Some(cooccurrence_kd(&mut tape, &reference, &anchor)?);
        }
    }
    let (total, bundle) = vars.combine(&mut tape, &cfg.loss_weights())?;
    if !bundle.total.is_finite() {
        return Ok(StepOutput {
            grads: None,
            bundle,
        });
    }
    let g = tape.backward(total)?;
    Ok(StepOutput {
        grads: Some(params.gradients(&g, br.as_ref(), Some(&ba))),
        bundle,
    })
}

fn add_bundle(acc: &mut LossBundle, b: &LossBundle, scale: f64) {
    acc.ref_video += scale * b.ref_video;
    acc.anchor_video += scale * b.anchor_video;
    acc.event_contrastive += scale * b.event_contrastive;
    acc.self_modality_kd += scale * b.self_modality_kd;
    acc.cooccurrence_kd += scale * b.cooccurrence_kd;
    acc.total += scale * b.total;
}

fn check_corpus(corpus: &Corpus, params: &BranchParams) -> Result<()> {
    for s in &corpus.samples {
        s.validate()?;
        if s.dim() != params.dim() || s.classes() != params.classes() {
            return Err(Error::dim(
                "corpus vs parameters",
                &[s.dim(), s.classes()],
                &[params.dim(), params.classes()],
            ));
        }
    }
    Ok(())
}

/// Trains both branches jointly from fresh parameters seeded by
/// `config.seed`.
pub fn train(
    corpus: &Corpus,
    held_out: Option<&Corpus>,
    config: &TrainConfig,
) -> Result<(BranchParams, TrainLog)> {
    let params = BranchParams::init(corpus.dim, corpus.classes, config.seed);
    train_from(params, corpus, held_out, config)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: BranchParams,
    corpus: &Corpus,
    held_out: Option<&Corpus>,
    config: &TrainConfig,
) -> Result<(BranchParams, TrainLog)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    check_corpus(corpus, &params)?;
    if let Some(h) = held_out {
        check_corpus(h, &params)?;
    }
    let started = Instant::now();
    let mut adam = Adam::new(
        &params.tensors(),
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut log = TrainLog {
        epochs: Vec::with_capacity(config.epochs),
        seed: config.seed,
        config: config.clone(),
        wall_clock_secs: 0.0,
    };
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let plan = Plan::for_epoch(config, epoch);
        order.shuffle(&mut shuffler);
        let mut epoch_loss = LossBundle::default();
        for batch in order.chunks(config.batch_size) {
            let outs: Vec<StepOutput> = batch
                .par_iter()
                .map(|&i| sample_step(&params, &corpus.samples[i], config, plan))
                .collect::<Result<_>>()?;
            let mut sum: Option<Vec<Tensor>> = None;
            let mut batch_loss = LossBundle::default();
            for out in &outs {
                add_bundle(&mut batch_loss, &out.bundle, 1.0 / batch.len() as f64);
                let Some(g) = &out.grads else {
                    return Err(Error::Divergence {
                        step,
                        bundle: out.bundle,
                    });
                };
                match &mut sum {
                    None => sum = Some(g.clone()),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            adam.update(params.tensors_mut(), &grads, lr);
            add_bundle(
                &mut epoch_loss,
                &batch_loss,
                batch.len() as f64 / corpus.len() as f64,
            );
            step += 1;
        }
        let report = match held_out {
            Some(h) if h.samples.iter().all(|s| s.gt.is_some()) && !h.is_empty() => {
                Some(evaluate_anchor(&params, h, config)?)
            }
            _ => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            learning_rate: lr,
            loss: epoch_loss,
            held_out: report,
        });
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((params, log))
}
