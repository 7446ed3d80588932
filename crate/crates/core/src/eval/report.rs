use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::audit::AuditResult;
use super::tstr::{AugmentationReport, EvalReport, SubgroupReport};
use crate::data::Cohort;
use crate::error::{Error, Result};

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub task: String,
    pub generator: String,
    pub metric: String,
    pub value: f64,
}

pub fn metric_rows(r: &EvalReport) -> Vec<MetricRow> {
    let row = |metric: &str, value: f64| MetricRow {
        task: r.task.clone(),
        generator: r.generator.clone(),
        metric: metric.to_string(),
        value,
    };
    vec![
        row("e", r.real.auroc),
        row("e_boot_mean", r.real.ci.point),
        row("e_ci_lo", r.real.ci.lower),
        row("e_ci_hi", r.real.ci.upper),
        row("e_hat", r.synthetic.auroc),
        row("e_hat_boot_mean", r.synthetic.ci.point),
        row("e_hat_ci_lo", r.synthetic.ci.lower),
        row("e_hat_ci_hi", r.synthetic.ci.upper),
        row("gap", r.gap),
        row("real_train_size", r.real.train_size as f64),
        row("synthetic_train_size", r.synthetic.train_size as f64),
    ]
}

/// Human-readable summary of TSTR reports plus optional pairwise tests.
pub fn summary_text(reports: &[EvalReport], comparisons: &[(String, String, f64, f64)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# TSTR summary");
    let _ = writeln!(s, "# intervals: percentile bootstrap of record-level resamples");
    let _ = writeln!(s, "# significance tests compare bootstrap AUROC samples (one-sided Mann-Whitney U)");
    for r in reports {
        let _ = writeln!(
            s,
            "{} task={} e={:.3} [{:.3}, {:.3}] e_hat={:.3} [{:.3}, {:.3}] gap={:.3}",
            r.generator,
            r.task,
            r.real.auroc,
            r.real.ci.lower,
            r.real.ci.upper,
            r.synthetic.auroc,
            r.synthetic.ci.lower,
            r.synthetic.ci.upper,
            r.gap
        );
    }
    for (worse, better, u, p) in comparisons {
        let _ = writeln!(s, "gap({worse}) > gap({better}): U={u} p={p:.4}");
    }
    s
}

/// One bar of a grouped bar chart.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FigureRow {
    pub group: String,
    pub model: String,
    pub point: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    /// p of the test against the highest group; empty for that group.
    pub pairwise_p: Option<f64>,
}

pub fn subgroup_figure_rows(report: &SubgroupReport, model: &str) -> Vec<FigureRow> {
    let top = report
        .rows
        .iter()
        .filter_map(|r| r.ci.as_ref().map(|c| (c.point, &r.category)))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.clone());
    report
        .rows
        .iter()
        .map(|r| {
            let p = report
                .pairwise
                .iter()
                .find(|t| Some(&t.higher) == top.as_ref() && t.lower == r.category)
                .map(|t| t.p);
            FigureRow {
                group: r.category.clone(),
                model: model.to_string(),
                point: r.auroc,
                ci_lo: r.ci.as_ref().map(|c| c.lower),
                ci_hi: r.ci.as_ref().map(|c| c.upper),
                pairwise_p: p,
            }
        })
        .collect()
}

/// Overall TSTR bars: one row per source, the real arm first.
pub fn tstr_figure_rows(reports: &[EvalReport]) -> Vec<FigureRow> {
    let mut rows = Vec::new();
    if let Some(first) = reports.first() {
        rows.push(FigureRow {
            group: first.task.clone(),
            model: "real".into(),
            point: Some(first.real.auroc),
            ci_lo: Some(first.real.ci.lower),
            ci_hi: Some(first.real.ci.upper),
            pairwise_p: None,
        });
    }
    for r in reports {
        rows.push(FigureRow {
            group: r.task.clone(),
            model: r.generator.clone(),
            point: Some(r.synthetic.auroc),
            ci_lo: Some(r.synthetic.ci.lower),
            ci_hi: Some(r.synthetic.ci.upper),
            pairwise_p: None,
        });
    }
    rows
}

pub fn augmentation_figure_rows(report: &AugmentationReport) -> Vec<FigureRow> {
    let mut rows = subgroup_figure_rows(&report.before_groups, "real");
    rows.extend(subgroup_figure_rows(&report.after_groups, "real+synthetic"));
    rows
}

/// One cell of a query/neighbor panel, raw units, empty when unobserved.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PanelRow {
    pub query_id: String,
    /// 0 for the query, then neighbor rank from 1.
    pub panel: usize,
    pub record_id: String,
    pub distance: f64,
    pub step: usize,
    pub feature: String,
    pub value: Option<f64>,
}

/// Side-by-side series of each query and its neighbors.
pub fn audit_panel_rows(results: &[AuditResult], queries: &Cohort, reference: &Cohort) -> Result<Vec<PanelRow>> {
    let mut rows = Vec::new();
    for (res, q) in results.iter().zip(&queries.records) {
        if res.query_id != q.id {
            return Err(Error::InvalidParam(format!("audit result {} out of order", res.query_id)));
        }
        let mut panels = vec![(q, 0.0)];
        panels.extend(res.neighbors.iter().map(|n| (&reference.records[n.index], n.distance)));
        for (panel, (r, distance)) in panels.into_iter().enumerate() {
            for ((t, d), &m) in r.m.indexed_iter() {
                rows.push(PanelRow {
                    query_id: res.query_id.clone(),
                    panel,
                    record_id: r.id.clone(),
                    distance,
                    step: t,
                    feature: queries.manifest.feature_names[d].clone(),
                    value: (m == 1).then(|| queries.standardizer.inverse(d, r.x[[t, d]] as f64)),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::audit::Neighbor;
    use crate::data::testutil::random_cohort;

    #[test]
    fn panel_rows_cover_query_and_neighbors() {
        let c = random_cohort(12, 3, 2, 0);
        let mut q = c.clone();
        q.records.truncate(1);
        let res = vec![AuditResult {
            query_id: q.records[0].id.clone(),
            neighbors: (0..3)
                .map(|i| Neighbor {
                    record_id: c.records[i].id.clone(),
                    index: i,
                    distance: i as f64 / 10.0,
                })
                .collect(),
        }];
        let rows = audit_panel_rows(&res, &q, &c).unwrap();
        assert_eq!(rows.len(), 4 * 3 * 2);
        assert_eq!(rows.iter().map(|r| r.panel).max(), Some(3));
        assert!(rows.iter().all(|r| r.value.is_some() == (c.records.iter().find(|x| x.id == r.record_id).unwrap().m[[r.step, c.manifest.feature_index(&r.feature).unwrap()]] == 1)));
    }
}
