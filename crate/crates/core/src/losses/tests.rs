use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::branches::{
    anchor_forward_on, reference_forward_on, sample_tokens, BranchParams, VideoSample,
};
use crate::numerics::gradcheck::{central_difference, relative_error, DEFAULT_STEP};

const LN2: f64 = std::f64::consts::LN_2;

fn v(x: &[f64]) -> Tensor {
    Tensor::vector(x.to_vec())
}

fn bce_oracle(y: &[f64], p: &[f64]) -> f64 {
    let eps = 1e-7;
    let n = y.len() as f64;
    y.iter()
        .zip(p)
        .map(|(&y, &p)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Reference nodes holding fixed video-level and class-token probabilities.
fn fixed_reference(
    tape: &mut Tape,
    video: [&Tensor; 2],
    cls: Option<[&Tensor; 2]>,
) -> ReferenceNodes {
    let c = video[0].len();
    let seg = [
        tape.constant(Tensor::zeros(&[1, c])),
        tape.constant(Tensor::zeros(&[1, c])),
    ];
    let tok = [
        tape.constant(Tensor::zeros(&[1, 1])),
        tape.constant(Tensor::zeros(&[1, 1])),
    ];
    ReferenceNodes {
        tokens: tok,
        seg_probs: seg,
        temporal_weights: seg,
        video_probs: [tape.param(video[0]), tape.param(video[1])],
        cls_probs: cls.map(|c| [tape.param(c[0]), tape.param(c[1])]),
        segments: 1,
    }
}

fn fixed_anchor(tape: &mut Tape, video: &Tensor, modality: [&Tensor; 2]) -> AnchorNodes {
    let z = tape.constant(Tensor::zeros(&[1, 1]));
    AnchorNodes {
        tokens: [z, z],
        seg_probs_by_modality: [z, z],
        seg_probs: z,
        w_temporal: z,
        w_modality: z,
        video_probs: tape.param(video),
        modality_video_probs: [tape.param(modality[0]), tape.param(modality[1])],
    }
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize) -> Tensor {
    Tensor::vector((0..c).map(|_| rng.random_range(0.02..0.98)).collect())
}

#[test]
fn reference_video_loss_examples() {
    let y = v(&[1.0, 0.0, 1.0]);
    let mut tape = Tape::new();
    let half = v(&[0.5; 3]);
    let r = fixed_reference(&mut tape, [&half, &half], Some([&half, &half]));
    let l = video_loss_reference(&mut tape, &r, &y).unwrap();
    assert!((tape.value(l).item() - 4.0 * LN2).abs() < 1e-12);

    let r = fixed_reference(&mut tape, [&y, &y], Some([&y, &y]));
    let l = video_loss_reference(&mut tape, &r, &y).unwrap();
    assert!(tape.value(l).item() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps: Vec<Tensor> = (0..4).map(|_| random_probs(&mut rng, 3)).collect();
    let r = fixed_reference(&mut tape, [&ps[0], &ps[1]], Some([&ps[2], &ps[3]]));
    let l = video_loss_reference(&mut tape, &r, &y).unwrap();
    let oracle: f64 = ps.iter().map(|p| bce_oracle(y.data(), p.data())).sum();
    assert!((tape.value(l).item() - oracle).abs() < 1e-12);

    // Without class tokens only the pooled terms remain.
    let r = fixed_reference(&mut tape, [&ps[0], &ps[1]], None);
    let l = video_loss_reference(&mut tape, &r, &y).unwrap();
    let oracle = bce_oracle(y.data(), ps[0].data()) + bce_oracle(y.data(), ps[1].data());
    assert!((tape.value(l).item() - oracle).abs() < 1e-12);
}

#[test]
fn anchor_video_loss_examples() {
    let y = v(&[0.0, 1.0, 1.0, 0.0]);
    let mut tape = Tape::new();
    let half = v(&[0.5; 4]);
    let a = fixed_anchor(&mut tape, &half, [&half, &half]);
    let l = video_loss_anchor(&mut tape, &a, &y).unwrap();
    assert!((tape.value(l).item() - LN2).abs() < 1e-12);

    let a = fixed_anchor(&mut tape, &y, [&half, &half]);
    let l = video_loss_anchor(&mut tape, &a, &y).unwrap();
    assert!(tape.value(l).item() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_probs(&mut rng, 4);
    let a = fixed_anchor(&mut tape, &p, [&half, &half]);
    let l = video_loss_anchor(&mut tape, &a, &y).unwrap();
    assert!((tape.value(l).item() - bce_oracle(y.data(), p.data())).abs() < 1e-12);

    let bad = v(&[1.0, 0.0]);
    assert!(matches!(
        video_loss_anchor(&mut tape, &a, &bad),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn pseudo_label_examples() {
    let g = distil_pseudo_labels(
        &v(&[0.9, 0.1]),
        &v(&[0.2, 0.7]),
        0.5,
        PseudoSource::Reference,
    )
    .unwrap();
    assert_eq!(g.audio.data(), &[1.0, 0.0]);
    assert_eq!(g.visual.data(), &[0.0, 1.0]);
    let g = distil_pseudo_labels(&v(&[0.5]), &v(&[0.5000001]), 0.5, PseudoSource::Anchor).unwrap();
    assert_eq!(g.audio.data(), &[0.0]);
    assert_eq!(g.visual.data(), &[1.0]);
    for theta in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(
            distil_pseudo_labels(&v(&[0.5]), &v(&[0.5]), theta, PseudoSource::Anchor),
            Err(Error::Config(_))
        ));
    }
}

proptest! {
    #[test]
    fn pseudo_labels_match_elementwise_comparison(
        pa in prop::collection::vec(0.0f64..1.0, 1..8),
        theta in 0.01f64..0.99,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pv: Vec<f64> = pa.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let g = distil_pseudo_labels(&v(&pa), &v(&pv), theta, PseudoSource::Reference).unwrap();
        for i in 0..pa.len() {
            prop_assert_eq!(g.audio.data()[i], if pa[i] > theta { 1.0 } else { 0.0 });
            prop_assert_eq!(g.visual.data()[i], if pv[i] > theta { 1.0 } else { 0.0 });
        }
    }
}

fn labels(a: &[f64], vis: &[f64]) -> PseudoLabels {
    PseudoLabels {
        audio: v(a),
        visual: v(vis),
        source: PseudoSource::Reference,
    }
}

#[test]
fn unalignment_weight_examples() {
    let w = unalignment_weights(&labels(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0]));
    assert_eq!((w.theta_a, w.theta_v), (0.0, 0.0));

    let w = unalignment_weights(&labels(&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0]));
    assert_eq!(
        (w.n_audio_only, w.n_visual_only, w.n_audible_visible),
        (1, 1, 1)
    );
    assert_eq!((w.theta_a, w.theta_v), (0.5, 0.5));

    let w = unalignment_weights(&labels(&[1.0, 0.0, 1.0], &[0.0, 0.0, 0.0]));
    assert_eq!(
        (w.n_audio_only, w.n_visual_only, w.n_audible_visible),
        (2, 0, 0)
    );
    assert_eq!((w.theta_a, w.theta_v), (1.0, 0.0));
}

#[test]
fn unalignment_weights_exhaustive() {
    for c in 1..=4usize {
        for am in 0..1u32 << c {
            for vm in 0..1u32 << c {
                let bits = |m: u32| (0..c).map(|i| ((m >> i) & 1) as f64).collect::<Vec<_>>();
                let w = unalignment_weights(&labels(&bits(am), &bits(vm)));
                let na = (am & !vm).count_ones() as usize;
                let nv = (vm & !am).count_ones() as usize;
                let nav = (am & vm).count_ones() as usize;
                assert_eq!(
                    (w.n_audio_only, w.n_visual_only, w.n_audible_visible),
                    (na, nv, nav)
                );
                assert!(na + nv + nav <= c);
                for (n, theta) in [(na, w.theta_a), (nv, w.theta_v)] {
                    assert!((0.0..=1.0).contains(&theta));
                    if n == 0 {
                        assert_eq!(theta, 0.0);
                    }
                    if nav == 0 && n > 0 {
                        assert_eq!(theta, 1.0);
                    }
                    if n + nav > 0 {
                        assert_eq!(theta, n as f64 / (n + nav) as f64);
                    }
                }
            }
        }
    }
}

fn nce_oracle(
    anchor: &[Tensor; 2],
    reference: &[Tensor; 2],
    theta: [f64; 2],
    tau: f64,
    include_positive: bool,
) -> f64 {
    let t = anchor[0].rows();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for m in 0..2 {
        let mut inner = 0.0;
        for i in 0..t {
            let pos = dot(anchor[m].row(i), reference[m].row(i));
            let denom: f64 = (0..t)
                .filter(|&n| include_positive || n != i)
                .map(|n| dot(anchor[m].row(i), reference[m].row(n)).exp())
                .sum();
            inner += (pos.exp() / denom).ln();
        }
        total += theta[m] * inner;
    }
    -total / t as f64
}

fn theta_weights(a: f64, vis: f64) -> UnalignmentWeights {
    UnalignmentWeights {
        n_audio_only: 0,
        n_visual_only: 0,
        n_audible_visible: 0,
        theta_a: a,
        theta_v: vis,
    }
}

#[test]
fn nce_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for include_positive in [false, true] {
        let anchor = [
            Tensor::uniform(&[4, 8], 0.5, &mut rng),
            Tensor::uniform(&[4, 8], 0.5, &mut rng),
        ];
        let reference = [
            Tensor::uniform(&[4, 8], 0.5, &mut rng),
            Tensor::uniform(&[4, 8], 0.5, &mut rng),
        ];
        let mut tape = Tape::new();
        let a = [tape.param(&anchor[0]), tape.param(&anchor[1])];
        let r = [tape.param(&reference[0]), tape.param(&reference[1])];
        let opts = NceOptions {
            tau: 0.2,
            include_positive,
        };
        let l = event_aware_nce(&mut tape, a, r, &theta_weights(1.0, 0.5), &opts).unwrap();
        let oracle = nce_oracle(&anchor, &reference, [1.0, 0.5], 0.2, include_positive);
        assert!((tape.value(l).item() - oracle).abs() < 1e-10);

        // Teacher side is detached.
        let g = tape.backward(l).unwrap();
        assert!(!g.reaches(r[0]) && !g.reaches(r[1]));
        assert!(g.get(a[0]).data().iter().any(|&x| x != 0.0));
    }
}

#[test]
fn nce_zero_weights_and_symmetric_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let a = [
        tape.param(&Tensor::uniform(&[3, 4], 1.0, &mut rng)),
        tape.param(&Tensor::uniform(&[3, 4], 1.0, &mut rng)),
    ];
    let r = [
        tape.constant(Tensor::uniform(&[3, 4], 1.0, &mut rng)),
        tape.constant(Tensor::uniform(&[3, 4], 1.0, &mut rng)),
    ];
    let l = event_aware_nce(
        &mut tape,
        a,
        r,
        &theta_weights(0.0, 0.0),
        &NceOptions::default(),
    )
    .unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let g = tape.backward(l).unwrap();
    assert!(g
        .get(a[0])
        .data()
        .iter()
        .chain(g.get(a[1]).data())
        .all(|&x| x == 0.0));

    let same = Tensor::full(&[2, 3], 0.3);
    let a = [tape.param(&same), tape.param(&same)];
    let r = [tape.constant(same.clone()), tape.constant(same.clone())];
    let l = event_aware_nce(
        &mut tape,
        a,
        r,
        &theta_weights(1.0, 1.0),
        &NceOptions::default(),
    )
    .unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);
}

#[test]
fn nce_errors() {
    let mut tape = Tape::new();
    let one = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        event_aware_nce(
            &mut tape,
            [one, one],
            [one, one],
            &theta_weights(1.0, 1.0),
            &NceOptions::default()
        ),
        Err(Error::Contract(_))
    ));
    let two = tape.constant(Tensor::zeros(&[2, 4]));
    let bad = NceOptions {
        tau: 0.0,
        include_positive: false,
    };
    assert!(matches!(
        event_aware_nce(
            &mut tape,
            [two, two],
            [two, two],
            &theta_weights(1.0, 1.0),
            &bad
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn self_modality_kd_examples() {
    let g = PseudoLabels {
        audio: v(&[1.0, 0.0]),
        visual: v(&[0.0, 1.0]),
        source: PseudoSource::Anchor,
    };
    let mut tape = Tape::new();
    let half = v(&[0.5, 0.5]);
    let r = fixed_reference(&mut tape, [&half, &half], None);
    let l = self_modality_kd(&mut tape, &g, &r).unwrap();
    assert!((tape.value(l).item() - 2.0 * LN2).abs() < 1e-12);

    let r = fixed_reference(
        &mut tape,
        [&v(&[1.0 - 1e-9, 1e-9]), &v(&[1e-9, 1.0 - 1e-9])],
        None,
    );
    let l = self_modality_kd(&mut tape, &g, &r).unwrap();
    assert!(tape.value(l).item() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (pa, pv) = (random_probs(&mut rng, 2), random_probs(&mut rng, 2));
    let r = fixed_reference(&mut tape, [&pa, &pv], None);
    let l = self_modality_kd(&mut tape, &g, &r).unwrap();
    let oracle = bce_oracle(g.audio.data(), pa.data()) + bce_oracle(g.visual.data(), pv.data());
    assert!((tape.value(l).item() - oracle).abs() < 1e-12);

    let wrong = PseudoLabels {
        source: PseudoSource::Reference,
        ..g
    };
    assert!(matches!(
        self_modality_kd(&mut tape, &wrong, &r),
        Err(Error::Contract(_))
    ));
}

#[test]
fn class_correlation_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(v(&[1.0, 0.0]));
    let m = class_correlation(&mut tape, p).unwrap();
    assert_eq!(tape.value(m).data(), &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(tape.value(m).shape(), &[2, 2]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pv = random_probs(&mut rng, 4);
    let p = tape.constant(pv.clone());
    let m = class_correlation(&mut tape, p).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let want = pv.data()[i] * pv.data()[j];
            assert!((tape.value(m).at(i, j) - want).abs() < 1e-12);
            assert_eq!(tape.value(m).at(i, j), tape.value(m).at(j, i));
        }
    }
}

proptest! {
    #[test]
    fn class_correlation_is_psd(p in prop::collection::vec(0.0f64..1.0, 1..6), x in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut tape = Tape::new();
        let c = p.len();
        let pv = tape.constant(v(&p));
        let m = class_correlation(&mut tape, pv).unwrap();
        let mut quad = 0.0;
        for i in 0..c {
            prop_assert_eq!(tape.value(m).at(i, i), p[i] * p[i]);
            for j in 0..c {
                quad += x[i] * tape.value(m).at(i, j) * x[j];
            }
        }
        prop_assert!(quad >= -1e-12);
    }
}

#[test]
fn cooccurrence_kd_examples() {
    let mut tape = Tape::new();
    let p = v(&[0.3, 0.8, 0.1]);
    let r = fixed_reference(&mut tape, [&p, &p], None);
    let a = fixed_anchor(&mut tape, &p, [&p, &p]);
    let l = cooccurrence_kd(&mut tape, &r, &a).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let one = v(&[1.0, 0.0]);
    let zero = v(&[0.0, 0.0]);
    let r = fixed_reference(&mut tape, [&one, &one], None);
    let a = fixed_anchor(&mut tape, &zero, [&zero, &zero]);
    let l = cooccurrence_kd(&mut tape, &r, &a).unwrap();
    assert!((tape.value(l).item() - 0.5).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ps: Vec<Tensor> = (0..4).map(|_| random_probs(&mut rng, 3)).collect();
    let r = fixed_reference(&mut tape, [&ps[0], &ps[1]], None);
    let a = fixed_anchor(&mut tape, &ps[2], [&ps[2], &ps[3]]);
    let l = cooccurrence_kd(&mut tape, &r, &a).unwrap();
    let mut oracle = 0.0;
    for m in 0..2 {
        let (t, s) = (ps[m].data(), ps[m + 2].data());
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += (t[i] * t[j] - s[i] * s[j]).powi(2);
            }
        }
        oracle += acc / 9.0;
    }
    assert!((tape.value(l).item() - oracle).abs() < 1e-12);

    // Only the anchor side receives gradient.
    let g = tape.backward(l).unwrap();
    assert!(!g.reaches(r.video_probs[0]) && !g.reaches(r.video_probs[1]));
    assert!(g.reaches(a.modality_video_probs[0]));
}

#[test]
fn total_loss_examples() {
    let ones = LossComponents {
        ref_video: 1.0,
        anchor_video: 1.0,
        event_contrastive: 1.0,
        self_modality_kd: 1.0,
        cooccurrence_kd: 1.0,
    };
    assert_eq!(
        total_loss(&ones, &LossWeights::default()).unwrap().total,
        5.0
    );
    let zero = LossWeights {
        evt: 0.0,
        kd: 0.0,
        cls: 0.0,
    };
    let c = LossComponents {
        ref_video: 0.7,
        anchor_video: 1.3,
        event_contrastive: 9.0,
        self_modality_kd: 9.0,
        cooccurrence_kd: 9.0,
    };
    let b = total_loss(&c, &zero).unwrap();
    assert_eq!(b.total, 1.3 + 0.7);
    assert_eq!(b.event_contrastive, 9.0);

    let w = LossWeights {
        evt: 0.5,
        kd: 2.0,
        cls: 0.25,
    };
    let c = LossComponents {
        ref_video: 0.5,
        anchor_video: 1.5,
        event_contrastive: 2.0,
        self_modality_kd: 0.25,
        cooccurrence_kd: 4.0,
    };
    // 1.5 + 0.5 + 1.0 + 0.5 + 1.0
    assert_eq!(total_loss(&c, &w).unwrap().total, 4.5);

    let neg = LossWeights {
        evt: -1.0,
        ..LossWeights::default()
    };
    assert!(matches!(total_loss(&c, &neg), Err(Error::Config(_))));
}

#[test]
fn combined_total_matches_scalar_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let mut vars = LossVars::default();
    let vals: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
    let nodes: Vec<Var> = vals
        .iter()
        .map(|&x| tape.param(&Tensor::scalar(x)))
        .collect();
    vars.ref_video = Some(nodes[0]);
    vars.anchor_video = Some(nodes[1]);
    vars.event_contrastive = Some(nodes[2]);
    vars.self_modality_kd = Some(nodes[3]);
    vars.cooccurrence_kd = Some(nodes[4]);
    let w = LossWeights {
        evt: 0.3,
        kd: 1.7,
        cls: 0.9,
    };
    let (total, bundle) = vars.combine(&mut tape, &w).unwrap();
    assert_eq!(tape.value(total).item(), bundle.total);
    let g = tape.backward(total).unwrap();
    assert_eq!(g.get(nodes[2]).item(), 0.3);
}

fn sample(seed: u64) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoSample {
        id: "s".into(),
        audio: Tensor::uniform(&[4, 6], 1.5, &mut rng),
        visual: Tensor::uniform(&[4, 6], 1.5, &mut rng),
        weak_label: v(&[1.0, 0.0, 1.0]),
        gt: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Which {
    RefVideo,
    AnchorVideo,
    Nce,
    SelfKd,
    CoCls,
}

/// Builds one loss from a full two-branch forward pass.
fn build<'p>(
    tape: &mut Tape,
    params: &'p BranchParams,
    s: &VideoSample,
    which: Which,
) -> (
    Var,
    crate::branches::BoundReference<'p>,
    crate::branches::BoundAnchor,
) {
    let tokens = sample_tokens(tape, s);
    let br = params.bind_reference(tape, true);
    let ba = params.bind_anchor(tape);
    let r = reference_forward_on(tape, tokens, &br).unwrap();
    let a = anchor_forward_on(tape, tokens, &ba, false).unwrap();
    let loss = match which {
        Which::RefVideo => video_loss_reference(tape, &r, &s.weak_label).unwrap(),
        Which::AnchorVideo => video_loss_anchor(tape, &a, &s.weak_label).unwrap(),
        Which::Nce => {
            let rv = [
                tape.value(r.video_probs[0]).clone(),
                tape.value(r.video_probs[1]).clone(),
            ];
            let g = distil_pseudo_labels(&rv[0], &rv[1], 0.5, PseudoSource::Reference).unwrap();
            // Keep both weights positive so every anchor parameter is exercised.
            let mut w = unalignment_weights(&g);
            w.theta_a = w.theta_a.max(0.7);
            w.theta_v = w.theta_v.max(0.4);
            let rt = [
                r.segment_tokens(tape, Modality::Audio).unwrap(),
                r.segment_tokens(tape, Modality::Visual).unwrap(),
            ];
            event_aware_nce(tape, a.tokens, rt, &w, &NceOptions::default()).unwrap()
        }
        Which::SelfKd => {
            let av = [
                tape.value(a.modality_video_probs[0]).clone(),
                tape.value(a.modality_video_probs[1]).clone(),
            ];
            let g = distil_pseudo_labels(&av[0], &av[1], 0.5, PseudoSource::Anchor).unwrap();
            self_modality_kd(tape, &g, &r).unwrap()
        }
        Which::CoCls => cooccurrence_kd(tape, &r, &a).unwrap(),
    };
    (loss, br, ba)
}

const REFERENCE_TENSORS: usize = 16;

#[test]
fn losses_pass_finite_differences_and_train_one_branch() {
    let base = BranchParams::init(6, 3, 40);
    let s = sample(41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for which in [
        Which::RefVideo,
        Which::AnchorVideo,
        Which::Nce,
        Which::SelfKd,
        Which::CoCls,
    ] {
        let trains_reference = matches!(which, Which::RefVideo | Which::SelfKd);
        let mut tape = Tape::new();
        let (loss, br, ba) = build(&mut tape, &base, &s, which);
        let grads = base.gradients(&tape.backward(loss).unwrap(), Some(&br), Some(&ba));
        let mut exercised = 0;
        for (k, g) in grads.iter().enumerate() {
            let owned_by_reference = k < REFERENCE_TENSORS;
            if owned_by_reference != trains_reference {
                assert!(
                    g.data().iter().all(|&x| x == 0.0),
                    "{which:?} leaks into tensor {k}"
                );
                continue;
            }
            let coords: Vec<usize> = (0..3).map(|_| rng.random_range(0..g.len())).collect();
            let x = base.tensors()[k].clone();
            let numeric = central_difference(&x, DEFAULT_STEP, Some(&coords), |probe| {
                let mut p = base.clone();
                *p.tensors_mut()[k] = probe.clone();
                let mut t = Tape::new();
                let (l, _, _) = build(&mut t, &p, &s, which);
                t.value(l).item()
            });
            for &i in &coords {
                let (a, n) = (g.data()[i], numeric.data()[i]);
                let err = relative_error(a, n, 1e-2);
                assert!(
                    err <= 1e-5,
                    "{which:?} tensor {k}[{i}]: analytic {a} numeric {n}"
                );
                exercised += (a != 0.0) as usize;
            }
        }
        assert!(exercised > 0, "{which:?} produced no gradient");
    }
}

#[test]
fn teacher_side_probes() {
    // Perturbing the reference tokens fed to the contrastive term must not
    // change the anchor gradient's dependency structure: the gradient wrt the
    // reference side is identically zero.
    let params = BranchParams::init(6, 3, 43);
    let s = sample(44);
    let mut tape = Tape::new();
    let tokens = sample_tokens(&mut tape, &s);
    let br = params.bind_reference(&mut tape, true);
    let ba = params.bind_anchor(&mut tape);
    let r = reference_forward_on(&mut tape, tokens, &br).unwrap();
    let a = anchor_forward_on(&mut tape, tokens, &ba, false).unwrap();
    let rt = [
        r.segment_tokens(&mut tape, Modality::Audio).unwrap(),
        r.segment_tokens(&mut tape, Modality::Visual).unwrap(),
    ];
    let nce = event_aware_nce(
        &mut tape,
        a.tokens,
        rt,
        &theta_weights(1.0, 1.0),
        &NceOptions::default(),
    )
    .unwrap();
    let co = cooccurrence_kd(&mut tape, &r, &a).unwrap();
    let both = tape.add(nce, co).unwrap();
    let g = tape.backward(both).unwrap();
    for m in 0..2 {
        assert!(!g.reaches(rt[m]));
        assert!(!g.reaches(r.video_probs[m]));
        assert!(!g.reaches(r.tokens[m]));
    }
}
