//! The two network branches.
//!
//! The **reference** branch runs one self-attention layer per modality over
//! the segment tokens concatenated with learnable class tokens, and pools
//! segment probabilities with per-class temporal weights. It exists only
//! during training.
//!
//! The **anchor** branch is a hybrid-attention encoder (self plus cross
//! attention with a residual) followed by multimodal multiple-instance
//! pooling over segments and modalities. It is the deployed branch.
//!
//! Both are written against a [`Tape`]; the `*_forward` convenience
//! functions build a private tape and return plain tensors.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{attention, linear, Attention, Gradients, Linear, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Audio, Modality::Visual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Audio => Modality::Visual,
            Modality::Visual => Modality::Audio,
        }
    }
}

/// Segment-level modality-specific annotation. The audible-visible stream is
/// always derived as `audio AND visual`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentGroundTruth {
    /// `T × C` binary
    pub audio: Tensor,
    /// `T × C` binary
    pub visual: Tensor,
}

impl SegmentGroundTruth {
    pub fn audible_visible(&self) -> Tensor {
        let data = self
            .audio
            .data()
            .iter()
            .zip(self.visual.data())
            .map(|(&a, &v)| if a > 0.5 && v > 0.5 { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(self.audio.shape().to_vec(), data).expect("same shape")
    }

    pub fn stream(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `T × D`
    pub audio: Tensor,
    /// `T × D`
    pub visual: Tensor,
    /// Modality-agnostic `C`-vector in {0, 1}.
    pub weak_label: Tensor,
    pub gt: Option<SegmentGroundTruth>,
}

impl VideoSample {
    pub fn segments(&self) -> usize {
        self.audio.rows()
    }

    pub fn dim(&self) -> usize {
        self.audio.cols()
    }

    pub fn classes(&self) -> usize {
        self.weak_label.len()
    }

    pub fn tokens(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio.rank() != 2 || self.audio.shape() != self.visual.shape() {
            return Err(Error::dim(
                "video tokens",
                self.audio.shape(),
                self.visual.shape(),
            ));
        }
        if self.weak_label.rank() != 1 {
            return Err(Error::dim("weak label", self.weak_label.shape(), &[]));
        }
        if let Some(gt) = &self.gt {
            let want = [self.segments(), self.classes()];
            for s in [&gt.audio, &gt.visual] {
                if s.shape() != want {
                    return Err(Error::dim("segment ground truth", s.shape(), &want));
                }
            }
        }
        Ok(())
    }
}

/// Per-modality reference-branch parameters, indexed by [`Modality::index`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    pub attention: [Attention; 2],
    /// `C × D` learnable class tokens per modality.
    pub class_tokens: [Tensor; 2],
    /// Produces per-class temporal pooling logits.
    pub temporal_fc: [Linear; 2],
    pub classifier: [Linear; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorParams {
    pub self_attention: Attention,
    pub cross_attention: Attention,
    /// Shared across modalities.
    pub classifier: Linear,
    pub temporal_fc: Linear,
    pub modality_fc: Linear,
}

/// Call counters for the reference branch. Only ever incremented.
#[derive(Debug, Default)]
pub struct BranchUsage {
    reference_passes: AtomicUsize,
    reference_ops: AtomicUsize,
    class_token_reads: AtomicUsize,
}

impl BranchUsage {
    pub fn reference_passes(&self) -> usize {
        self.reference_passes.load(Ordering::Relaxed)
    }

    /// Tape nodes recorded by reference forward passes.
    pub fn reference_ops(&self) -> usize {
        self.reference_ops.load(Ordering::Relaxed)
    }

    pub fn class_token_reads(&self) -> usize {
        self.class_token_reads.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BranchParams {
    pub reference: ReferenceParams,
    pub anchor: AnchorParams,
    #[serde(skip)]
    usage: BranchUsage,
}

impl Clone for BranchParams {
    /// Counters start fresh on the clone.
    fn clone(&self) -> Self {
        BranchParams {
            reference: self.reference.clone(),
            anchor: self.anchor.clone(),
            usage: BranchUsage::default(),
        }
    }
}

impl PartialEq for BranchParams {
    fn eq(&self, other: &Self) -> bool {
        self.reference == other.reference && self.anchor == other.anchor
    }
}

impl BranchParams {
    /// Every weight uniform in `[-1/√fan_in, 1/√fan_in]`, drawn from `seed`.
    pub fn init(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = crate::numerics::init_bound(dim);
        let reference = ReferenceParams {
            attention: [
                Attention::init(dim, &mut rng),
                Attention::init(dim, &mut rng),
            ],
            class_tokens: [
                Tensor::uniform(&[classes, dim], bound, &mut rng),
                Tensor::uniform(&[classes, dim], bound, &mut rng),
            ],
            temporal_fc: [
                Linear::init(dim, classes, &mut rng),
                Linear::init(dim, classes, &mut rng),
            ],
            classifier: [
                Linear::init(dim, classes, &mut rng),
                Linear::init(dim, classes, &mut rng),
            ],
        };
        let anchor = AnchorParams {
            self_attention: Attention::init(dim, &mut rng),
            cross_attention: Attention::init(dim, &mut rng),
            classifier: Linear::init(dim, classes, &mut rng),
            temporal_fc: Linear::init(dim, classes, &mut rng),
            modality_fc: Linear::init(dim, classes, &mut rng),
        };
        BranchParams {
            reference,
            anchor,
            usage: BranchUsage::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.anchor.self_attention.dim()
    }

    pub fn classes(&self) -> usize {
        self.anchor.classifier.bias.len()
    }

    pub fn usage(&self) -> &BranchUsage {
        &self.usage
    }

    /// All parameter tensors in a fixed order shared with
    /// [`BranchParams::gradients`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let (r, a) = (&self.reference, &self.anchor);
        let mut out: Vec<&Tensor> = Vec::new();
        for at in &r.attention {
            out.extend(at.parts());
        }
        out.extend(r.class_tokens.iter());
        for l in r.temporal_fc.iter().chain(&r.classifier) {
            out.extend(l.parts());
        }
        out.extend(a.self_attention.parts());
        out.extend(a.cross_attention.parts());
        for l in [&a.classifier, &a.temporal_fc, &a.modality_fc] {
            out.extend(l.parts());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let (r, a) = (&mut self.reference, &mut self.anchor);
        let mut out: Vec<&mut Tensor> = Vec::new();
        for at in &mut r.attention {
            out.extend(at.parts_mut());
        }
        out.extend(r.class_tokens.iter_mut());
        for l in r.temporal_fc.iter_mut().chain(&mut r.classifier) {
            out.extend(l.parts_mut());
        }
        out.extend(a.self_attention.parts_mut());
        out.extend(a.cross_attention.parts_mut());
        for l in [&mut a.classifier, &mut a.temporal_fc, &mut a.modality_fc] {
            out.extend(l.parts_mut());
        }
        out
    }

    /// Puts the reference parameters on `tape`. Class tokens are only read
    /// when `class_tokens` is set.
    pub fn bind_reference(&self, tape: &mut Tape, class_tokens: bool) -> BoundReference<'_> {
        let r = &self.reference;
        let tokens = if class_tokens {
            self.usage.class_token_reads.fetch_add(1, Ordering::Relaxed);
            Some([
                tape.param(&r.class_tokens[0]),
                tape.param(&r.class_tokens[1]),
            ])
        } else {
            None
        };
        BoundReference {
            attention: [
                r.attention[0].map(|t| tape.param(t)),
                r.attention[1].map(|t| tape.param(t)),
            ],
            class_tokens: tokens,
            temporal_fc: [
                r.temporal_fc[0].map(|t| tape.param(t)),
                r.temporal_fc[1].map(|t| tape.param(t)),
            ],
            classifier: [
                r.classifier[0].map(|t| tape.param(t)),
                r.classifier[1].map(|t| tape.param(t)),
            ],
            usage: &self.usage,
        }
    }

    pub fn bind_anchor(&self, tape: &mut Tape) -> BoundAnchor {
        let a = &self.anchor;
        BoundAnchor {
            self_attention: a.self_attention.map(|t| tape.param(t)),
            cross_attention: a.cross_attention.map(|t| tape.param(t)),
            classifier: a.classifier.map(|t| tape.param(t)),
            temporal_fc: a.temporal_fc.map(|t| tape.param(t)),
            modality_fc: a.modality_fc.map(|t| tape.param(t)),
        }
    }

    /// Gradients aligned with [`BranchParams::tensors`]; parameters that were
    /// not bound get zeros.
    pub fn gradients(
        &self,
        grads: &Gradients,
        reference: Option<&BoundReference<'_>>,
        anchor: Option<&BoundAnchor>,
    ) -> Vec<Tensor> {
        let mut vars: Vec<Option<Var>> = Vec::new();
        match reference {
            Some(b) => vars.extend(b.vars()),
            None => vars.extend(std::iter::repeat_n(None, 2 * 3 + 2 + 4 * 2)),
        }
        match anchor {
            Some(b) => vars.extend(b.vars().into_iter().map(Some)),
            None => vars.extend(std::iter::repeat_n(None, 2 * 3 + 3 * 2)),
        }
        self.tensors()
            .into_iter()
            .zip(vars)
            .map(|(t, v)| match v {
                Some(v) => grads.get(v),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

pub struct BoundReference<'a> {
    pub attention: [Attention<Var>; 2],
    pub class_tokens: Option<[Var; 2]>,
    pub temporal_fc: [Linear<Var>; 2],
    pub classifier: [Linear<Var>; 2],
    usage: &'a BranchUsage,
}

impl BoundReference<'_> {
    fn vars(&self) -> Vec<Option<Var>> {
        let mut out: Vec<Option<Var>> = Vec::new();
        for at in &self.attention {
            out.extend(at.parts().map(|v| Some(*v)));
        }
        match self.class_tokens {
            Some([a, v]) => out.extend([Some(a), Some(v)]),
            None => out.extend([None, None]),
        }
        for l in self.temporal_fc.iter().chain(&self.classifier) {
            out.extend(l.parts().map(|v| Some(*v)));
        }
        out
    }
}

pub struct BoundAnchor {
    pub self_attention: Attention<Var>,
    pub cross_attention: Attention<Var>,
    pub classifier: Linear<Var>,
    pub temporal_fc: Linear<Var>,
    pub modality_fc: Linear<Var>,
}

impl BoundAnchor {
    fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::new();
        out.extend(self.self_attention.parts().map(|v| *v));
        out.extend(self.cross_attention.parts().map(|v| *v));
        for l in [&self.classifier, &self.temporal_fc, &self.modality_fc] {
            out.extend(l.parts().map(|v| *v));
        }
        out
    }
}

/// Reference-branch nodes on a tape, indexed by [`Modality::index`].
#[derive(Clone, Debug)]
pub struct ReferenceNodes {
    /// `(T+C) × D` attended tokens (`T × D` without class tokens).
    pub tokens: [Var; 2],
    pub seg_probs: [Var; 2],
    pub temporal_weights: [Var; 2],
    pub video_probs: [Var; 2],
    pub cls_probs: Option<[Var; 2]>,
    pub segments: usize,
}

impl ReferenceNodes {
    /// Attended segment tokens (first `T` rows).
    pub fn segment_tokens(&self, tape: &mut Tape, modality: Modality) -> Result<Var> {
        tape.narrow(self.tokens[modality.index()], 0, 0, self.segments)
    }

    pub fn output(&self, tape: &Tape) -> ReferenceOutput {
        let get = |vs: &[Var; 2]| [tape.value(vs[0]).clone(), tape.value(vs[1]).clone()];
        ReferenceOutput {
            tokens: get(&self.tokens),
            seg_probs: get(&self.seg_probs),
            temporal_weights: get(&self.temporal_weights),
            video_probs: get(&self.video_probs),
            cls_probs: self.cls_probs.as_ref().map(get),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceOutput {
    pub tokens: [Tensor; 2],
    pub seg_probs: [Tensor; 2],
    pub temporal_weights: [Tensor; 2],
    pub video_probs: [Tensor; 2],
    pub cls_probs: Option<[Tensor; 2]>,
}

#[derive(Clone, Debug)]
pub struct AnchorNodes {
    /// `T × D` hybrid-attended tokens per modality.
    pub tokens: [Var; 2],
    /// `T × C` segment probabilities per modality.
    pub seg_probs_by_modality: [Var; 2],
    /// `T × 2 × C`
    pub seg_probs: Var,
    /// `T × 2 × C`, softmax over segments.
    pub w_temporal: Var,
    /// `T × 2 × C`, softmax over modalities.
    pub w_modality: Var,
    /// `C`
    pub video_probs: Var,
    /// Per-modality `C`-vectors pooled over segments with the temporal
    /// weights only.
    pub modality_video_probs: [Var; 2],
}

impl AnchorNodes {
    pub fn output(&self, tape: &Tape) -> AnchorOutput {
        let get = |vs: &[Var; 2]| [tape.value(vs[0]).clone(), tape.value(vs[1]).clone()];
        AnchorOutput {
            tokens: get(&self.tokens),
            seg_probs: tape.value(self.seg_probs).clone(),
            w_temporal: tape.value(self.w_temporal).clone(),
            w_modality: tape.value(self.w_modality).clone(),
            video_probs: tape.value(self.video_probs).clone(),
            modality_video_probs: get(&self.modality_video_probs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorOutput {
    pub tokens: [Tensor; 2],
    pub seg_probs: Tensor,
    pub w_temporal: Tensor,
    pub w_modality: Tensor,
    pub video_probs: Tensor,
    pub modality_video_probs: [Tensor; 2],
}

impl AnchorOutput {
    /// `T × C` segment probabilities for one modality.
    pub fn seg_probs_for(&self, modality: Modality) -> Tensor {
        let s = self.seg_probs.shape();
        let (t, c) = (s[0], s[2]);
        let m = modality.index();
        let data = (0..t)
            .flat_map(|ti| {
                let base = ti * 2 * c + m * c;
                self.seg_probs.data()[base..base + c].to_vec()
            })
            .collect();
        Tensor::new(vec![t, c], data).expect("shape")
    }
}

fn check_dim(sample_dim: usize, params_dim: usize) -> Result<()> {
    if sample_dim != params_dim {
        return Err(Error::dim("branch input", &[sample_dim], &[params_dim]));
    }
    Ok(())
}

/// Reference branch over token inputs already on the tape.
pub fn reference_forward_on(
    tape: &mut Tape,
    tokens: [Var; 2],
    params: &BoundReference<'_>,
) -> Result<ReferenceNodes> {
    let start = tape.len();
    params
        .usage
        .reference_passes
        .fetch_add(1, Ordering::Relaxed);
    let segments = tape.value(tokens[0]).rows();
    let mut out_tokens = Vec::with_capacity(2);
    let mut seg_probs = Vec::with_capacity(2);
    let mut weights = Vec::with_capacity(2);
    let mut video = Vec::with_capacity(2);
    let mut cls = Vec::with_capacity(2);
    for m in Modality::ALL.map(Modality::index) {
        let feats = tokens[m];
        let dim = tape.value(feats).cols();
        check_dim(dim, tape.value(params.attention[m].query).rows())?;
        let x = match params.class_tokens {
            Some(ct) => tape.concat(&[feats, ct[m]], 0)?,
            None => feats,
        };
        let (attended, _) = attention(tape, x, x, &params.attention[m])?;
        let seg_tokens = tape.narrow(attended, 0, 0, segments)?;
        let logits = linear(tape, seg_tokens, &params.classifier[m])?;
        let probs = tape.sigmoid(logits);
        let w_logits = linear(tape, seg_tokens, &params.temporal_fc[m])?;
        let w = tape.softmax(w_logits, 0)?;
        let weighted = tape.mul(w, probs)?;
        let pooled = tape.sum_axis(weighted, 0)?;
        if params.class_tokens.is_some() {
            let classes = tape.value(attended).rows() - segments;
            let class_out = tape.narrow(attended, 0, segments, classes)?;
            let avg = tape.mean_axis(class_out, 1)?;
            cls.push(tape.sigmoid(avg));
        }
        out_tokens.push(attended);
        seg_probs.push(probs);
        weights.push(w);
        video.push(pooled);
    }
    params
        .usage
        .reference_ops
        .fetch_add(tape.len() - start, Ordering::Relaxed);
    let pair = |v: Vec<Var>| [v[0], v[1]];
    Ok(ReferenceNodes {
        tokens: pair(out_tokens),
        seg_probs: pair(seg_probs),
        temporal_weights: pair(weights),
        video_probs: pair(video),
        cls_probs: (!cls.is_empty()).then(|| pair(cls)),
        segments,
    })
}

/// Hybrid attention encoder: `f̂ = f + self(f, F) + cross(f, F_other)`,
/// with the cross term dropped when `unimodal_only` is set.
pub fn hybrid_encode(
    tape: &mut Tape,
    tokens: [Var; 2],
    params: &BoundAnchor,
    unimodal_only: bool,
) -> Result<[Var; 2]> {
    let mut out = [tokens[0]; 2];
    for m in Modality::ALL {
        let own = tokens[m.index()];
        let other = tokens[m.other().index()];
        let (s, _) = attention(tape, own, own, &params.self_attention)?;
        let mut acc = tape.add(own, s)?;
        if !unimodal_only {
            let (c, _) = attention(tape, own, other, &params.cross_attention)?;
            acc = tape.add(acc, c)?;
        }
        out[m.index()] = acc;
    }
    Ok(out)
}

/// Shared classifier followed by multimodal multiple-instance pooling.
pub fn mmil_head(tape: &mut Tape, encoded: [Var; 2], params: &BoundAnchor) -> Result<AnchorNodes> {
    let mut probs = [encoded[0]; 2];
    let mut t_logits = [encoded[0]; 2];
    let mut m_logits = [encoded[0]; 2];
    for m in 0..2 {
        let l = linear(tape, encoded[m], &params.classifier)?;
        probs[m] = tape.sigmoid(l);
        t_logits[m] = linear(tape, encoded[m], &params.temporal_fc)?;
        m_logits[m] = linear(tape, encoded[m], &params.modality_fc)?;
    }
    let seg_probs = tape.stack(&probs, 1)?;
    let t_logits = tape.stack(&t_logits, 1)?;
    let m_logits = tape.stack(&m_logits, 1)?;
    let w_temporal = tape.softmax(t_logits, 0)?;
    let w_modality = tape.softmax(m_logits, 1)?;

    let tp = tape.mul(w_temporal, seg_probs)?;
    let full = tape.mul(tp, w_modality)?;
    let over_time = tape.sum_axis(full, 0)?;
    let video_probs = tape.sum_axis(over_time, 0)?;

    let by_modality = tape.sum_axis(tp, 0)?;
    let classes = tape.value(by_modality).cols();
    let mut modality_video_probs = [by_modality; 2];
    for (m, slot) in modality_video_probs.iter_mut().enumerate() {
        let row = tape.narrow(by_modality, 0, m, 1)?;
        *slot = tape.reshape(row, &[classes])?;
    }

    Ok(AnchorNodes {
        tokens: encoded,
        seg_probs_by_modality: probs,
        seg_probs,
        w_temporal,
        w_modality,
        video_probs,
        modality_video_probs,
    })
}

pub fn anchor_forward_on(
    tape: &mut Tape,
    tokens: [Var; 2],
    params: &BoundAnchor,
    unimodal_only: bool,
) -> Result<AnchorNodes> {
    check_dim(
        tape.value(tokens[0]).cols(),
        tape.value(params.self_attention.query).rows(),
    )?;
    let encoded = hybrid_encode(tape, tokens, params, unimodal_only)?;
    mmil_head(tape, encoded, params)
}

/// Puts a sample's audio and visual tokens on the tape as constants.
pub fn sample_tokens(tape: &mut Tape, sample: &VideoSample) -> [Var; 2] {
    [
        tape.constant(sample.audio.clone()),
        tape.constant(sample.visual.clone()),
    ]
}

pub fn reference_forward(sample: &VideoSample, params: &BranchParams) -> Result<ReferenceOutput> {
    check_dim(sample.dim(), params.dim())?;
    let mut tape = Tape::new();
    let tokens = sample_tokens(&mut tape, sample);
    let bound = params.bind_reference(&mut tape, true);
    let nodes = reference_forward_on(&mut tape, tokens, &bound)?;
    Ok(nodes.output(&tape))
}

pub fn anchor_forward(
    sample: &VideoSample,
    params: &BranchParams,
    unimodal_only: bool,
) -> Result<AnchorOutput> {
    check_dim(sample.dim(), params.dim())?;
    let mut tape = Tape::new();
    let tokens = sample_tokens(&mut tape, sample);
    let bound = params.bind_anchor(&mut tape);
    let nodes = anchor_forward_on(&mut tape, tokens, &bound, unimodal_only)?;
    Ok(nodes.output(&tape))
}
