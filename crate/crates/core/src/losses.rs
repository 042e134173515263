//! Training objectives and the pseudo-label machinery that couples the
//! branches.
//!
//! Teacher-side quantities are always detached: reference tokens inside the
//! contrastive term, pseudo-labels, unalignment weights and the reference
//! correlation matrices. Each loss therefore trains exactly one branch:
//!
//! | loss                  | trains    |
//! |-----------------------|-----------|
//! | reference video       | reference |
//! | anchor video          | anchor    |
//! | event-aware NCE       | anchor    |
//! | self-modality KD      | reference |
//! | co-occurrence KD      | anchor    |

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::branches::{AnchorNodes, Modality, ReferenceNodes};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoSource {
    Reference,
    Anchor,
}

/// Thresholded per-class modality labels. Entries are exactly 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub audio: Tensor,
    pub visual: Tensor,
    pub source: PseudoSource,
}

impl PseudoLabels {
    pub fn get(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnalignmentWeights {
    pub n_audio_only: usize,
    pub n_visual_only: usize,
    pub n_audible_visible: usize,
    pub theta_a: f64,
    pub theta_v: f64,
}

impl UnalignmentWeights {
    pub fn theta(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Audio => self.theta_a,
            Modality::Visual => self.theta_v,
        }
    }
}

/// Unweighted component values plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ref_video: f64,
    pub anchor_video: f64,
    pub event_contrastive: f64,
    pub self_modality_kd: f64,
    pub cooccurrence_kd: f64,
    pub total: f64,
}

impl fmt::Display for LossBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} ref_video={} anchor_video={} evt={} self_kd={} cocls={}",
            self.total,
            self.ref_video,
            self.anchor_video,
            self.event_contrastive,
            self.self_modality_kd,
            self.cooccurrence_kd
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ref_video: f64,
    pub anchor_video: f64,
    pub event_contrastive: f64,
    pub self_modality_kd: f64,
    pub cooccurrence_kd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub evt: f64,
    pub kd: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            evt: 1.0,
            kd: 1.0,
            cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_evt", self.evt),
            ("lambda_kd", self.kd),
            ("lambda_cls", self.cls),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `anchor_video + ref_video + λ_evt·evt + λ_kd·kd + λ_cls·cls`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossBundle> {
    w.validate()?;
    let total = c.anchor_video
        + c.ref_video
        + w.evt * c.event_contrastive
        + w.kd * c.self_modality_kd
        + w.cls * c.cooccurrence_kd;
    Ok(LossBundle {
        ref_video: c.ref_video,
        anchor_video: c.anchor_video,
        event_contrastive: c.event_contrastive,
        self_modality_kd: c.self_modality_kd,
        cooccurrence_kd: c.cooccurrence_kd,
        total,
    })
}

/// Loss nodes for one sample; `None` marks a disabled component.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub ref_video: Option<Var>,
    pub anchor_video: Option<Var>,
    pub event_contrastive: Option<Var>,
    pub self_modality_kd: Option<Var>,
    pub cooccurrence_kd: Option<Var>,
}

impl LossVars {
    /// Builds the weighted total on the tape in the same association order
    /// as [`total_loss`], so both agree bit for bit.
    pub fn combine(&self, tape: &mut Tape, w: &LossWeights) -> Result<(Var, LossBundle)> {
        w.validate()?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let components = LossComponents {
            ref_video: val(self.ref_video),
            anchor_video: val(self.anchor_video),
            event_contrastive: val(self.event_contrastive),
            self_modality_kd: val(self.self_modality_kd),
            cooccurrence_kd: val(self.cooccurrence_kd),
        };
        let bundle = total_loss(&components, w)?;

        let mut terms: Vec<Var> = Vec::new();
        terms.extend(self.anchor_video);
        terms.extend(self.ref_video);
        for (v, lambda) in [
            (self.event_contrastive, w.evt),
            (self.self_modality_kd, w.kd),
            (self.cooccurrence_kd, w.cls),
        ] {
            if let Some(v) = v {
                terms.push(tape.scale(v, lambda));
            }
        }
        let mut acc = match terms.first() {
            Some(&t) => t,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        for &t in terms.iter().skip(1) {
            acc = tape.add(acc, t)?;
        }
        Ok((acc, bundle))
    }
}

fn check_label(y: &Tensor, classes: usize) -> Result<()> {
    if y.len() != classes {
        return Err(Error::dim("weak label", y.shape(), &[classes]));
    }
    Ok(())
}

/// `Σ_φ BCE(Y, P̈^φ) + BCE(Y, CLS^φ)`; the class-token term is skipped when
/// the branch ran without class tokens.
pub fn video_loss_reference(
    tape: &mut Tape,
    reference: &ReferenceNodes,
    weak_label: &Tensor,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(4);
    for m in 0..2 {
        let video = reference.video_probs[m];
        check_label(weak_label, tape.value(video).len())?;
        terms.push(tape.bce(video, weak_label)?);
        if let Some(cls) = reference.cls_probs {
            terms.push(tape.bce(cls[m], weak_label)?);
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// `BCE(Y, ℙ)`.
pub fn video_loss_anchor(
    tape: &mut Tape,
    anchor: &AnchorNodes,
    weak_label: &Tensor,
) -> Result<Var> {
    check_label(weak_label, tape.value(anchor.video_probs).len())?;
    tape.bce(anchor.video_probs, weak_label)
}

fn check_threshold(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {theta}"
        )));
    }
    Ok(())
}

/// `g_i = 1` iff `p_i > θ` (strict).
pub fn distil_pseudo_labels(
    video_probs_audio: &Tensor,
    video_probs_visual: &Tensor,
    theta: f64,
    source: PseudoSource,
) -> Result<PseudoLabels> {
    check_threshold(theta)?;
    if video_probs_audio.shape() != video_probs_visual.shape() {
        return Err(Error::dim(
            "distil_pseudo_labels",
            video_probs_audio.shape(),
            video_probs_visual.shape(),
        ));
    }
    let cut = |p: &Tensor| p.map(|x| if x > theta { 1.0 } else { 0.0 });
    Ok(PseudoLabels {
        audio: cut(video_probs_audio),
        visual: cut(video_probs_visual),
        source,
    })
}

/// Counts audible-only, visible-only and audible-visible classes and turns
/// them into per-modality encouragement weights `N^φ / (N^φ + N^av)`, with
/// `0/0 := 0`.
pub fn unalignment_weights(pseudo: &PseudoLabels) -> UnalignmentWeights {
    let (mut na, mut nv, mut nav) = (0, 0, 0);
    for (&a, &v) in pseudo.audio.data().iter().zip(pseudo.visual.data()) {
        match (a > 0.5, v > 0.5) {
            (true, true) => nav += 1,
            (true, false) => na += 1,
            (false, true) => nv += 1,
            (false, false) => {}
        }
    }
    let ratio = |n: usize| {
        if n + nav == 0 {
            0.0
        } else {
            n as f64 / (n + nav) as f64
        }
    };
    UnalignmentWeights {
        n_audio_only: na,
        n_visual_only: nv,
        n_audible_visible: nav,
        theta_a: ratio(na),
        theta_v: ratio(nv),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NceOptions {
    pub tau: f64,
    /// Put the positive pair back into the normaliser (standard InfoNCE).
    /// Off by default: the normaliser sums over `n ≠ t` only.
    pub include_positive: bool,
}

impl Default for NceOptions {
    fn default() -> Self {
        NceOptions {
            tau: 0.2,
            include_positive: false,
        }
    }
}

/// Event-aware contrastive loss:
///
/// `−(1/T) Σ_φ ϑ^φ Σ_t log[ exp(f̂_t·ẍ_t/τ) / Σ_{n≠t} exp(f̂_t·ẍ_n/τ) ]`
///
/// `anchor_tokens` and `reference_tokens` are `T × D` per modality; the
/// reference side is detached here.
pub fn event_aware_nce(
    tape: &mut Tape,
    anchor_tokens: [Var; 2],
    reference_tokens: [Var; 2],
    weights: &UnalignmentWeights,
    opts: &NceOptions,
) -> Result<Var> {
    if !(opts.tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {}",
            opts.tau
        )));
    }
    let segments = tape.value(anchor_tokens[0]).rows();
    if segments < 2 {
        return Err(Error::Contract(format!(
            "event-aware NCE needs at least 2 segments for a negative set, got {segments}"
        )));
    }
    let mask: Vec<bool> = (0..segments * segments)
        .map(|i| opts.include_positive || i / segments != i % segments)
        .collect();
    let mut total: Option<Var> = None;
    for m in Modality::ALL {
        let (a, r) = (anchor_tokens[m.index()], reference_tokens[m.index()]);
        if tape.value(a).shape() != tape.value(r).shape() {
            return Err(Error::dim(
                "event_aware_nce",
                tape.value(a).shape(),
                tape.value(r).shape(),
            ));
        }
        let teacher = tape.detach(r);
        let teacher_t = tape.transpose(teacher)?;
        let sim = tape.matmul(a, teacher_t)?;
        let logits = tape.scale(sim, 1.0 / opts.tau);
        let positive = tape.diag(logits)?;
        let normaliser = tape.masked_logsumexp_rows(logits, mask.clone())?;
        let log_ratio = tape.sub(positive, normaliser)?;
        let summed = tape.sum(log_ratio);
        let term = tape.scale(summed, -weights.theta(m) / segments as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("two modalities"))
}

/// `Σ_φ BCE(G^φ, P̈^φ)` with `G` distilled from the anchor branch.
pub fn self_modality_kd(
    tape: &mut Tape,
    anchor_pseudo: &PseudoLabels,
    reference: &ReferenceNodes,
) -> Result<Var> {
    if anchor_pseudo.source != PseudoSource::Anchor {
        return Err(Error::Contract(
            "self-modality distillation needs pseudo-labels from the anchor branch".into(),
        ));
    }
    let a = tape.bce(reference.video_probs[0], &anchor_pseudo.audio)?;
    let v = tape.bce(reference.video_probs[1], &anchor_pseudo.visual)?;
    tape.add(a, v)
}

/// `M_ij = P_i · P_j`.
pub fn class_correlation(tape: &mut Tape, video_probs: Var) -> Result<Var> {
    let c = tape.value(video_probs).len();
    let col = tape.reshape(video_probs, &[c, 1])?;
    let row = tape.reshape(video_probs, &[1, c])?;
    tape.matmul(col, row)
}

/// `Σ_φ MSE(M̈^φ, M^φ)`: the anchor's per-modality class correlations are
/// pulled toward the (detached) reference correlations.
pub fn cooccurrence_kd(
    tape: &mut Tape,
    reference: &ReferenceNodes,
    anchor: &AnchorNodes,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for m in 0..2 {
        let teacher = tape.detach(reference.video_probs[m]);
        let student = anchor.modality_video_probs[m];
        if tape.value(teacher).shape() != tape.value(student).shape() {
            return Err(Error::dim(
                "cooccurrence_kd",
                tape.value(teacher).shape(),
                tape.value(student).shape(),
            ));
        }
        let mt = class_correlation(tape, teacher)?;
        let ms = class_correlation(tape, student)?;
        let diff = tape.sub(mt, ms)?;
        let sq = tape.square(diff);
        let mse = tape.mean(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, mse)?,
            None => mse,
        });
    }
    Ok(total.expect("two modalities"))
}

#[cfg(test)]
mod tests;
