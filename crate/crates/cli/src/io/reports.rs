//! Report writers: annotation tables (CSV, JSON, masked heatmap matrix),
//! prediction reports (Table-1 shaped CSV plus ROC point export), ablation
//! grids (Table-2 shaped CSV), enrichment, replication, and geometry.

use std::path::Path;

use msae_core::annotate::{AnnotationTable, EnrichmentReport};
use msae_core::evaluate::{AblationCell, PredictionReport, ReplicationReport};

use super::{fmt_f64, write_string};
use crate::error::CliError;

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_annotation_csv(path: &Path, table: &AnnotationTable) -> Result<(), CliError> {
    let mut out = String::from("feature,category,winning_variable,age_rho,age_p_raw,age_p_adj,age_significant");
    for name in &table.variable_names {
        out.push_str(&format!(",{name}_rho,{name}_p_raw,{name}_p_adj,{name}_significant"));
    }
    out.push('\n');
    for f in &table.features {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            f.feature,
            f.category.label(),
            f.winning_variable.as_deref().unwrap_or(""),
            opt(f.age_rho),
            opt(f.age_p_raw),
            opt(f.age_p_adjusted),
            u8::from(f.age_significant),
        ));
        for assoc in &f.assocs {
            out.push_str(&format!(
                ",{},{},{},{}",
                opt(assoc.rho),
                opt(assoc.p_raw),
                opt(assoc.p_adjusted),
                u8::from(assoc.significant),
            ));
        }
        out.push('\n');
    }
    write_string(path, &out)
}

/// Heatmap-ready |rho| matrix masked at the FDR threshold: empty cells where
/// a pair is not significant.
pub fn write_heatmap_csv(path: &Path, table: &AnnotationTable) -> Result<(), CliError> {
    let mut out = String::from("feature");
    for name in &table.variable_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for f in &table.features {
        out.push_str(&f.feature.to_string());
        for assoc in &f.assocs {
            out.push(',');
            if assoc.significant {
                if let Some(rho) = assoc.rho {
                    out.push_str(&fmt_f64(rho.abs()));
                }
            }
        }
        out.push('\n');
    }
    write_string(path, &out)
}

pub fn write_prediction_csv(path: &Path, reports: &[PredictionReport]) -> Result<(), CliError> {
    let mut out = String::from(
        "model,d,auc,auc_std,sens,sens_std,spec,spec_std,pooled_auc,n_subjects,n_positive,separation_flagged\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.model_name,
            r.d,
            fmt_f64(r.auc_mean),
            fmt_f64(r.auc_std),
            fmt_f64(r.sens_mean),
            fmt_f64(r.sens_std),
            fmt_f64(r.spec_mean),
            fmt_f64(r.spec_std),
            fmt_f64(r.pooled_auc),
            r.n_subjects,
            r.n_positive,
            u8::from(r.separation_flagged),
        ));
    }
    write_string(path, &out)
}

pub fn write_roc_csv(path: &Path, reports: &[PredictionReport]) -> Result<(), CliError> {
    let mut out = String::from("model,fold,fpr,tpr\n");
    for r in reports {
        for p in &r.roc_points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.model_name,
                p.fold,
                fmt_f64(p.fpr),
                fmt_f64(p.tpr)
            ));
        }
    }
    write_string(path, &out)
}

pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<(), CliError> {
    let mut out = String::from("variant,alive,d,auc,sens,spec,error\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.variant,
            c.alive,
            c.d,
            fmt_f64(c.auc),
            fmt_f64(c.sens),
            fmt_f64(c.spec),
            c.error.as_deref().unwrap_or(""),
        ));
    }
    write_string(path, &out)
}

pub fn write_enrichment_csv(path: &Path, report: &EnrichmentReport) -> Result<(), CliError> {
    let mut out = String::from("variable,feature,rho,p_raw,p_adj,significant\n");
    for col in &report.columns {
        for cell in &col.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                col.variable,
                cell.feature,
                opt(cell.rho),
                opt(cell.p_raw),
                opt(cell.p_adjusted),
                u8::from(cell.significant),
            ));
        }
    }
    write_string(path, &out)
}

pub fn write_enrichment_summary_csv(
    path: &Path,
    report: &EnrichmentReport,
) -> Result<(), CliError> {
    let mut out = String::from("variable,n_significant,n_features\n");
    for col in &report.columns {
        out.push_str(&format!(
            "{},{},{}\n",
            col.variable,
            col.n_significant,
            col.cells.len()
        ));
    }
    for skipped in &report.skipped {
        out.push_str(&format!("{skipped},,skipped_zero_variance\n"));
    }
    write_string(path, &out)
}

pub fn write_replication_summary(
    path: &Path,
    report: &ReplicationReport,
) -> Result<(), CliError> {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("n_joint_alive,{}\n", report.n_joint_alive));
    out.push_str(&format!(
        "annotation_agreement,{}\n",
        fmt_f64(report.annotation_agreement)
    ));
    out.push_str(&format!(
        "activation_consistency,{}\n",
        fmt_f64(report.activation_consistency)
    ));
    out.push_str(&format!(
        "replication_rate,{}\n",
        fmt_f64(report.replication_rate)
    ));
    for (var, r) in &report.per_variable_agreement {
        out.push_str(&format!("agreement_{var},{}\n", fmt_f64(*r)));
    }
    for (dx, r) in &report.per_diagnosis_pattern_r {
        out.push_str(&format!("pattern_{dx},{}\n", fmt_f64(*r)));
    }
    write_string(path, &out)
}
