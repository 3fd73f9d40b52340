//! Parameter and FLOPs accounting per component against published
//! reference values.
//!
//! Reported FLOPs follow the layer-profiler convention: one FLOP per
//! multiply-accumulate of weight-bearing layers (projections, convolutions,
//! kernel-attention MLPs). Activation×activation products and kernel mixing
//! are tallied by the counter but left out of the reported column. The
//! counter's own [`OpCounter::total_flops`] is `2 × all MACs`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::TrackerConfig;
use crate::counter::{Component, MacKind, OpCounter};
use crate::error::Result;
use crate::model::Tracker;
use crate::params::{Ctx, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Published per-component reference: `(component, GFLOPs, M params)`.
pub const REFERENCE: [(Component, f64, f64); 4] = [
    (Component::Backbone, 1.75, 5.49),
    (Component::Sse, 0.05, 0.49),
    (Component::Csi, 0.05, 0.17),
    (Component::Head, 0.53, 2.31),
];
/// Published whole-model totals, which differ from the sum of [`REFERENCE`].
pub const HEADLINE_TOTAL: (f64, f64) = (2.28, 7.80);
/// Published cost of the fusion modules together.
pub const FUSION_HEADLINE: (f64, f64) = (0.1, 0.66);

/// MAC kinds included in the reported FLOPs column.
pub const REPORTED_KINDS: [MacKind; 2] = [MacKind::Layer, MacKind::Routing];

/// Element counts per component.
pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<Component, usize> {
    Component::MODEL.iter().map(|&c| (c, store.count(c))).collect()
}

/// MAC tallies of one eval-mode forward pass on blank crops.
pub fn count_macs<T: Scalar>(tracker: &Tracker<T>) -> Result<OpCounter> {
    if tracker.modules.is_none() {
        return Ok(OpCounter::new());
    }
    let cfg = &tracker.cfg;
    let z = Tensor::zeros(&[cfg.template_size, cfg.template_size, 3]);
    let x = Tensor::zeros(&[cfg.search_size, cfg.search_size, 3]);
    let mut ctx = Ctx::with_tape(&tracker.store, Mode::Eval, Tape::counting());
    tracker.forward(&mut ctx, &[(&z, &x)])?;
    Ok(ctx.tape.counter().cloned().unwrap_or_default())
}

/// Counter of a freshly initialised model for `cfg`, in `f32`.
pub fn count_flops(cfg: &TrackerConfig) -> Result<OpCounter> {
    count_macs(&Tracker::<f32>::new(cfg.clone(), 0)?)
}

/// Reported GFLOPs of one component.
pub fn reported_gflops(counter: &OpCounter, c: Component) -> f64 {
    counter.select(c, &REPORTED_KINDS) as f64 / 1e9
}

fn dev_pct(value: f64, reference: f64) -> f64 {
    100.0 * (value - reference) / reference
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub label: String,
    pub flops_g: f64,
    pub params_m: f64,
    pub ref_flops_g: f64,
    pub ref_params_m: f64,
}

impl AuditRow {
    /// FLOPs deviation from the reference, in percent.
    pub fn dev_pct(&self) -> f64 {
        dev_pct(self.flops_g, self.ref_flops_g)
    }

    pub fn params_dev_pct(&self) -> f64 {
        dev_pct(self.params_m, self.ref_params_m)
    }
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    /// One row per component in [`Component::MODEL`] order.
    pub components: Vec<AuditRow>,
    /// Component sums against the sum of the reference rows.
    pub total: AuditRow,
    /// Component sums against the published headline totals.
    pub headline: AuditRow,
    /// SSE + CSI against the published fusion cost.
    pub fusion: AuditRow,
    pub counter: OpCounter,
}

impl AuditReport {
    pub fn row(&self, c: Component) -> &AuditRow {
        &self.components[Component::MODEL.iter().position(|&m| m == c).expect("model component")]
    }

    /// Whether the reference breakdown fails to add up to the headline.
    pub fn reference_inconsistent(&self) -> bool {
        (self.total.ref_flops_g - self.headline.ref_flops_g).abs() > 1e-9
            || (self.total.ref_params_m - self.headline.ref_params_m).abs() > 1e-9
    }

    fn all_rows(&self) -> impl Iterator<Item = &AuditRow> {
        self.components.iter().chain([&self.total, &self.fusion, &self.headline])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,flops_g,params_m,ref_flops_g,ref_params_m,dev_pct,params_dev_pct\n");
        for r in self.all_rows() {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.2},{:.2},{:.2},{:.2}",
                r.label,
                r.flops_g,
                r.params_m,
                r.ref_flops_g,
                r.ref_params_m,
                r.dev_pct(),
                r.params_dev_pct()
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8}",
            "component", "GFLOPs", "params M", "ref GF", "ref M", "dGF %", "dM %"
        );
        for r in self.all_rows() {
            let _ = writeln!(
                s,
                "{:<10} {:>9.4} {:>9.4} {:>9.2} {:>9.2} {:>+8.1} {:>+8.1}",
                r.label,
                r.flops_g,
                r.params_m,
                r.ref_flops_g,
                r.ref_params_m,
                r.dev_pct(),
                r.params_dev_pct()
            );
        }
        if self.reference_inconsistent() {
            let _ = writeln!(
                s,
                "note: reference rows sum to {:.2} GFLOPs / {:.2} M, but the published totals are {:.2} GFLOPs / {:.2} M",
                self.total.ref_flops_g, self.total.ref_params_m, self.headline.ref_flops_g, self.headline.ref_params_m
            );
        }
        let _ = writeln!(
            s,
            "note: GFLOPs count one per MAC of weight-bearing layers; counting every product at 2 FLOPs per MAC gives {:.4} GFLOPs",
            self.counter.total_flops() as f64 / 1e9
        );
        s
    }
}

/// Audit of an existing model.
pub fn audit_model<T: Scalar>(tracker: &Tracker<T>) -> Result<AuditReport> {
    let counter = count_macs(tracker)?;
    let params = count_params(&tracker.store);
    let components: Vec<AuditRow> = REFERENCE
        .iter()
        .map(|&(c, rf, rp)| AuditRow {
            label: c.label().to_string(),
            flops_g: reported_gflops(&counter, c),
            params_m: params[&c] as f64 / 1e6,
            ref_flops_g: rf,
            ref_params_m: rp,
        })
        .collect();
    let sum = |rows: &[&AuditRow], label: &str, rf: f64, rp: f64| AuditRow {
        label: label.to_string(),
        flops_g: rows.iter().map(|r| r.flops_g).sum(),
        params_m: rows.iter().map(|r| r.params_m).sum(),
        ref_flops_g: rf,
        ref_params_m: rp,
    };
    let all: Vec<&AuditRow> = components.iter().collect();
    let ref_f: f64 = REFERENCE.iter().map(|r| r.1).sum();
    let ref_p: f64 = REFERENCE.iter().map(|r| r.2).sum();
    let total = sum(&all, "total", ref_f, ref_p);
    let headline = sum(&all, "headline", HEADLINE_TOTAL.0, HEADLINE_TOTAL.1);
    let fusion = sum(&all[1..3], "sse+csi", FUSION_HEADLINE.0, FUSION_HEADLINE.1);
    Ok(AuditReport {
        components,
        total,
        headline,
        fusion,
        counter,
    })
}

/// Audit of a freshly initialised `f32` model for `cfg`.
pub fn audit_report(cfg: &TrackerConfig) -> Result<AuditReport> {
    audit_model(&Tracker::<f32>::new(cfg.clone(), 0)?)
}
