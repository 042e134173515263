use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::predict::evaluate_anchor;
use crate::harness::train::train;
use crate::metrics::{type_rates, MetricReport, Stream, TypeRates};
use crate::synthdata::Corpus;

/// A switch varied by [`ablate`]. Each takes the values on and off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Event-aware contrastive loss.
    Evt,
    /// Self-modality distillation.
    Kd,
    /// Co-occurrence class distillation.
    Cls,
    /// All three collaborative losses together.
    Collaborative,
    RefVideo,
    ClassTokens,
    /// Anchor restricted to unimodal attention.
    UnimodalOnly,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Evt => "evt",
            Axis::Kd => "kd",
            Axis::Cls => "cls",
            Axis::Collaborative => "collaborative",
            Axis::RefVideo => "ref_video",
            Axis::ClassTokens => "class_tokens",
            Axis::UnimodalOnly => "unimodal_only",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, on: bool) {
        match self {
            Axis::Evt => cfg.disable_evt = !on,
            Axis::Kd => cfg.disable_kd = !on,
            Axis::Cls => cfg.disable_cls = !on,
            Axis::Collaborative => {
                cfg.disable_evt = !on;
                cfg.disable_kd = !on;
                cfg.disable_cls = !on;
            }
            Axis::RefVideo => cfg.disable_ref_video = !on,
            Axis::ClassTokens => cfg.disable_class_tokens = !on,
            Axis::UnimodalOnly => cfg.unimodal_only = on,
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Axis::Evt,
            Axis::Kd,
            Axis::Cls,
            Axis::Collaborative,
            Axis::RefVideo,
            Axis::ClassTokens,
            Axis::UnimodalOnly,
        ];
        all.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = all.iter().map(|a| a.name()).collect();
            Error::Config(format!(
                "unknown ablation axis '{s}' (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub settings: Vec<(Axis, bool)>,
    pub report: MetricReport,
    /// Segment-level TP/TN/FP/FN rates for audible-only, visible-only and
    /// audible-visible events.
    pub rates: [(Stream, TypeRates); 3],
}

impl AblationRow {
    pub fn label(&self) -> String {
        if self.settings.is_empty() {
            return "base".into();
        }
        let parts: Vec<String> = self
            .settings
            .iter()
            .map(|(a, on)| format!("{}={}", a.name(), if *on { "on" } else { "off" }))
            .collect();
        parts.join(";")
    }

    pub fn rate(&self, stream: Stream) -> TypeRates {
        self.rates
            .iter()
            .find(|(s, _)| *s == stream)
            .map(|(_, r)| *r)
            .unwrap_or_default()
    }
}

/// Trains and evaluates one variant per on/off combination of `axes`
/// (full factorial, first axis slowest). Every variant shares the base
/// seed.
pub fn ablate(
    train_set: &Corpus,
    test_set: &Corpus,
    base: &TrainConfig,
    axes: &[Axis],
) -> Result<Vec<AblationRow>> {
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].contains(a) {
            return Err(Error::Config(format!(
                "ablation axis '{}' listed twice",
                a.name()
            )));
        }
    }
    let mut rows = Vec::with_capacity(1 << axes.len());
    for mask in 0..1usize << axes.len() {
        let mut cfg = base.clone();
        let settings: Vec<(Axis, bool)> = axes
            .iter()
            .enumerate()
            .map(|(i, &a)| (a, mask >> (axes.len() - 1 - i) & 1 == 0))
            .collect();
        for &(a, on) in &settings {
            a.apply(&mut cfg, on);
        }
        let (params, _) = train(train_set, None, &cfg)?;
        let report = evaluate_anchor(&params, test_set, &cfg)?;
        rows.push(AblationRow {
            settings,
            rates: type_rates(&report),
            report,
        });
    }
    Ok(rows)
}

/// One CSV line per variant: exclusive F-scores at both levels, then the
/// per-type rates.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string()];
    for level in ["segment", "event"] {
        for k in ["ao", "vo", "av", "type_avo", "event_avo"] {
            header.push(format!("{level}_{k}"));
        }
    }
    for s in [Stream::Ao, Stream::Vo, Stream::AV] {
        for r in ["tp", "tn", "fp", "fn"] {
            header.push(format!("{s}_{r}"));
        }
    }
    w.write_record(&header).expect("in-memory write");
    for row in rows {
        let mut rec = vec![row.label()];
        for l in [&row.report.segment, &row.report.event] {
            for x in [l.ao, l.vo, l.av, l.type_avo, l.event_avo] {
                rec.push(format!("{x:.4}"));
            }
        }
        for (_, r) in &row.rates {
            for x in [r.tp, r.tn, r.fp, r.fn_] {
                rec.push(format!("{x:.4}"));
            }
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
