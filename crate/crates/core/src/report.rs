//! CSV and JSON renderings of pipeline outputs.
//!
//! Every renderer is a pure function of its input, so identical inputs give
//! byte-identical files.

use std::fmt::Write as _;

use serde::Serialize;

use crate::evaluation::{AblationRow, BetaRow, CurvePoint, EvalReport, WindowSeparation};
use crate::geometry::GeometryProfile;
use crate::protocol::ScoreBreakdown;
use crate::repstore::csv_field;

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// `sample_id,s_lara[,z_rsm_mean,z_dc_mean,z_rsi_mean]`.
pub fn scores_csv(breakdowns: &[ScoreBreakdown], components: bool) -> String {
    let mut out = String::from("sample_id,s_lara");
    if components {
        out.push_str(",z_rsm_mean,z_dc_mean,z_rsi_mean");
    }
    out.push('\n');
    for b in breakdowns {
        let _ = write!(out, "{},{}", csv_field(&b.sample_id), b.s_lara);
        if components {
            let [r, d, i] = b.component_means;
            let _ = write!(out, ",{r},{d},{i}");
        }
        out.push('\n');
    }
    out
}

/// Long format: `sample_id,layer,rsm,dc,rsi`.
pub fn profiles_csv(profiles: &[GeometryProfile]) -> String {
    let mut out = String::from("sample_id,layer,rsm,dc,rsi\n");
    for p in profiles {
        let id = csv_field(&p.sample_id);
        for (layer, g) in p.layers.iter().enumerate() {
            let _ = writeln!(out, "{id},{layer},{},{},{}", g.rsm, g.dc, g.rsi);
        }
    }
    out
}

fn table_row(out: &mut String, method: &str, report: &EvalReport) {
    let _ = writeln!(
        out,
        "{},{},{}",
        csv_field(method),
        report.auc,
        report.tpr_at_fpr
    );
}

const TABLE_HEADER: &str = "method,auc,tpr_at_fpr_5\n";

/// Method × {AUC, TPR@FPR} table.
pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(TABLE_HEADER);
    for r in reports {
        table_row(&mut out, &r.method, r);
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    for row in rows {
        table_row(&mut out, &row.metrics, &row.report);
    }
    out
}

pub fn beta_csv(rows: &[BetaRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    for row in rows {
        table_row(&mut out, &format!("beta={}", row.beta), &row.report);
    }
    out
}

/// `layer,metric,group,value`.
pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("layer,metric,group,value\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.layer, p.metric, p.group, p.value);
    }
    out
}

/// `metric,window,first_layer,last_layer,cohens_d` (empty d when undefined).
pub fn windows_csv(rows: &[WindowSeparation]) -> String {
    let mut out = String::from("metric,window,first_layer,last_layer,cohens_d\n");
    for r in rows {
        let d = r.cohens_d.map(|d| d.to_string()).unwrap_or_default();
        let first = r.layers.first().copied().unwrap_or_default();
        let last = r.layers.last().copied().unwrap_or_default();
        let _ = writeln!(out, "{},{},{first},{last},{d}", r.metric, r.window);
    }
    out
}
