//! Text and CSV tables assembled from evaluation and ablation outputs.

use std::path::{Path, PathBuf};

use crate::ablation::{AblationAxis, AblationReport};
use crate::error::{Error, Result};
use crate::experiment::{table_label, MAIN_LABEL};
use crate::metrics::{mdice, round_half_even, Aggregation, MetricReport, Scope, Summary};
use crate::pipeline::PipelineKind;
use crate::protocol::ProtocolName;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub footer: Vec<String>,
}

impl Table {
    /// Columns padded to a common width, separated by `|`.
    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let mut widths = vec![0; cols];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |row: &[String]| {
            row.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let rule = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-");
        let mut out = format!("{}\n{}\n{rule}\n", self.title, line(&self.header));
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        for f in &self.footer {
            out.push_str(&format!("note: {f}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `mean ± std` in percent with one decimal, or `-` when missing.
pub fn pm(mean_std: Option<(f64, f64)>) -> String {
    match mean_std {
        Some((m, s)) => format!(
            "{:.1} ± {:.1}",
            round_half_even(100.0 * m, 1),
            round_half_even(100.0 * s, 1)
        ),
        None => "-".to_string(),
    }
}

fn dice(s: Option<&Summary>) -> String {
    pm(s.map(|s| (s.dice_mean, s.dice_std)))
}

fn iou(s: Option<&Summary>) -> String {
    pm(s.map(|s| (s.iou_mean, s.iou_std)))
}

fn std_note(reports: &[MetricReport]) -> String {
    let per_slice = reports.iter().any(|r| r.aggregation == Aggregation::PerSlice);
    let unit = if per_slice { "slices (per-slice aggregation present)" } else { "volumes" };
    format!("mean ± population std over {unit}; values in percent")
}

fn find<'a>(reports: &'a [MetricReport], protocol: ProtocolName, kind: PipelineKind, scope: Scope) -> Option<&'a Summary> {
    reports
        .iter()
        .filter(|r| r.protocol == protocol.as_str() && r.pipeline == kind.as_str() && r.scope == scope)
        .filter(|r| r.label == MAIN_LABEL)
        .map(|r| &r.summary)
        .next_back()
}

const ROW_ORDER: [PipelineKind; 4] = [
    PipelineKind::ImUnet,
    PipelineKind::EmUnet,
    PipelineKind::SUnet,
    PipelineKind::Edge2Prompt,
];

/// Mixed-training results: full mixed and data-scarce protocols, ID test sets.
pub fn table1(reports: &[MetricReport]) -> Table {
    let rows = ROW_ORDER
        .iter()
        .map(|&k| {
            let full = find(reports, ProtocolName::FullMixed, k, Scope::Id);
            let scarce = find(reports, ProtocolName::DataScarce, k, Scope::Id);
            vec![table_label(k).to_string(), dice(full), iou(full), dice(scarce), iou(scarce)]
        })
        .collect();
    Table {
        name: "table1".into(),
        title: "Table 1: full mixed (D_T) and data-scarce (D_J) training".into(),
        header: ["Model", "D_T Dice%", "D_T IoU%", "D_J Dice%", "D_J IoU%"].map(String::from).to_vec(),
        rows,
        footer: vec![std_note(reports)],
    }
}

/// Cross-modality results: rows per model and training modality, ID and OOD columns.
pub fn table2(reports: &[MetricReport]) -> Table {
    let mut rows = Vec::new();
    let mut footer = vec![std_note(reports)];
    for &k in &ROW_ORDER {
        let mut ood = Vec::new();
        for (train, protocol) in [("CT", ProtocolName::CrossCtToMr), ("MR", ProtocolName::CrossMrToCt)] {
            let id = find(reports, protocol, k, Scope::Id);
            let od = find(reports, protocol, k, Scope::Ood);
            ood.extend(od.map(|s| s.dice_mean));
            rows.push(vec![table_label(k).to_string(), train.to_string(), dice(id), iou(id), dice(od), iou(od)]);
        }
        if let [ct, mr] = ood[..] {
            footer.push(format!(
                "{} OOD mDice: {:.1}",
                table_label(k),
                round_half_even(mdice(100.0 * ct, 100.0 * mr), 1)
            ));
        }
    }
    Table {
        name: "table2".into(),
        title: "Table 2: cross-modality generalization (trained on CT or MR)".into(),
        header: ["Model", "Train", "ID Dice%", "ID IoU%", "OOD Dice%", "OOD IoU%"].map(String::from).to_vec(),
        rows,
        footer,
    }
}

fn display_row(axis: AblationAxis, label: &str) -> String {
    match axis {
        AblationAxis::Loss => label.to_string(),
        AblationAxis::Edge => {
            let mut c = label.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        }
    }
}

/// Ablation results: OOD scores of every grid row.
pub fn table3(report: &AblationReport) -> Table {
    let (name, title, first) = match report.axis {
        AblationAxis::Loss => ("table3a", "Table 3a: loss ablation (trained on MR, tested on CT)", "Loss"),
        AblationAxis::Edge => ("table3b", "Table 3b: edge detector ablation (trained on MR, tested on CT)", "ED"),
    };
    let rows = report
        .rows
        .iter()
        .map(|r| {
            let s = r.report.as_ref().map(|m| &m.summary);
            vec![
                display_row(report.axis, &r.label),
                dice(s),
                iou(s),
                format!("{:.1}", r.seconds),
            ]
        })
        .collect();
    let reports: Vec<MetricReport> = report.rows.iter().filter_map(|r| r.report.clone()).collect();
    let mut footer = vec![std_note(&reports)];
    footer.extend(report.footer());
    Table {
        name: name.into(),
        title: title.into(),
        header: [first, "OOD Dice%", "OOD IoU%", "seconds"].map(String::from).to_vec(),
        rows,
        footer,
    }
}

/// Every evaluation and ablation report (JSON) below `root`; other JSON files are skipped.
pub fn collect(root: &Path) -> Result<(Vec<MetricReport>, Vec<AblationReport>)> {
    if !root.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", root.display())));
    }
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut metrics = Vec::new();
    let mut ablations = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if let Ok(m) = serde_json::from_str::<MetricReport>(&text) {
            metrics.push(m);
        } else if let Ok(a) = serde_json::from_str::<AblationReport>(&text) {
            ablations.push(a);
        } else {
            log::debug!("skipping {}: not a report", path.display());
        }
    }
    Ok((metrics, ablations))
}

/// Tables 1 and 2 plus one table per ablation report.
pub fn tables(metrics: &[MetricReport], ablations: &[AblationReport]) -> Vec<Table> {
    let mut out = vec![table1(metrics), table2(metrics)];
    // Loss before edge; the last report of each axis wins.
    for axis in [AblationAxis::Loss, AblationAxis::Edge] {
        if let Some(a) = ablations.iter().filter(|a| a.axis == axis).next_back() {
            out.push(table3(a));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::SliceScore;

    fn report(protocol: ProtocolName, kind: PipelineKind, scope: Scope, dices: &[f64]) -> MetricReport {
        let volumes = dices
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let iou = d / (2.0 - d);
                (format!("v{i}"), vec![SliceScore { volume_id: format!("v{i}"), slice: 0, dice: d, iou }])
            })
            .collect();
        MetricReport::from_slices(protocol.as_str(), kind.as_str(), MAIN_LABEL, scope, Aggregation::PerVolume, volumes)
            .unwrap()
    }

    #[test]
    fn table1_places_values() {
        let r = vec![report(ProtocolName::FullMixed, PipelineKind::Edge2Prompt, Scope::Id, &[0.8, 0.9])];
        let t = table1(&r);
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[3][1], "85.0 ± 5.0");
        assert_eq!(t.rows[0][1], "-");
        assert!(t.to_text().contains("population std"));
    }

    #[test]
    fn table2_reports_ood_mdice() {
        let r = vec![
            report(ProtocolName::CrossCtToMr, PipelineKind::Edge2Prompt, Scope::Ood, &[0.876]),
            report(ProtocolName::CrossMrToCt, PipelineKind::Edge2Prompt, Scope::Ood, &[0.853]),
        ];
        let t = table2(&r);
        assert_eq!(t.rows.len(), 8);
        assert!(t.footer.iter().any(|f| f == "Edge2Prompt OOD mDice: 86.4"), "{:?}", t.footer);
    }
}
