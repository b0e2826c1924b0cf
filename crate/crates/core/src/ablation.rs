//! Loss-term and edge-detector grids: one train and OOD evaluation per variant.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::VolumeRecord;
use crate::edm::Detector;
use crate::error::{Error, Result};
use crate::experiment::{evaluate_protocol, train_protocol};
use crate::metrics::{MetricReport, Scope};
use crate::protocol::{ProtocolName, ProtocolSpec};
use crate::segmenter::Segmenter;

/// Protocol the grids are defined on: train on MR, test on CT.
pub const ABLATION_PROTOCOL: ProtocolName = ProtocolName::CrossMrToCt;

/// Margin in Dice (0..1) for the soft ordering check of the edge grid.
pub const ORDERING_MARGIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Loss,
    Edge,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loss" | "loss_terms" => Ok(AblationAxis::Loss),
            "edge" | "edge_detector" => Ok(AblationAxis::Edge),
            other => Err(Error::Config(format!("unknown ablation axis `{other}` (loss|edge)"))),
        }
    }
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Loss => "loss",
            AblationAxis::Edge => "edge",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub base: ExperimentConfig,
    pub variants: Vec<Variant>,
}

/// Row labels and term selections of the loss grid, in table order.
pub const LOSS_ROWS: [(&str, bool, bool, bool); 7] = [
    ("L_F", true, false, false),
    ("L_D", false, true, false),
    ("L_LCD", false, false, true),
    ("L_F + L_D", true, true, false),
    ("L_F + L_LCD", true, false, true),
    ("L_D + L_LCD", false, true, true),
    ("L", true, true, true),
];

/// Detectors of the edge grid, in table order.
pub const EDGE_ROWS: [Detector; 3] = [Detector::Laplacian, Detector::Sobel, Detector::Canny];

impl AblationGrid {
    /// Every variant equals `base` except along `axis`.
    pub fn new(axis: AblationAxis, base: &ExperimentConfig) -> Self {
        let variants = match axis {
            AblationAxis::Loss => LOSS_ROWS
                .iter()
                .map(|&(label, f, d, lcd)| {
                    let mut config = base.clone();
                    config.loss = base.loss.with_terms(f, d, lcd);
                    Variant { label: label.to_string(), config }
                })
                .collect(),
            AblationAxis::Edge => EDGE_ROWS
                .iter()
                .map(|&det| {
                    let mut config = base.clone();
                    config.edm.edges.detector = det;
                    Variant { label: det.as_str().to_string(), config }
                })
                .collect(),
        };
        Self {
            axis,
            base: base.clone(),
            variants,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub protocol: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    fn dice(&self, label: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .and_then(|r| r.report.as_ref())
            .map(|r| r.summary.dice_mean)
    }

    /// Soft check of the expected edge-detector ordering: Laplacian clearly below Sobel and
    /// Canny, which are close to each other. `None` when the axis or rows do not apply.
    pub fn ordering_holds(&self) -> Option<bool> {
        if self.axis != AblationAxis::Edge {
            return None;
        }
        let lap = self.dice(Detector::Laplacian.as_str())?;
        let sobel = self.dice(Detector::Sobel.as_str())?;
        let canny = self.dice(Detector::Canny.as_str())?;
        Some(lap + ORDERING_MARGIN < sobel.min(canny) && (sobel - canny).abs() <= ORDERING_MARGIN)
    }

    pub fn footer(&self) -> Vec<String> {
        let mut lines = Vec::new();
        if self.axis == AblationAxis::Edge {
            let m = ORDERING_MARGIN * 100.0;
            lines.push(match self.ordering_holds() {
                Some(true) => format!("ordering Laplacian << Sobel ~ Canny (margin {m:.0} points): holds"),
                Some(false) => format!("ordering Laplacian << Sobel ~ Canny (margin {m:.0} points): does NOT hold"),
                None => "ordering Laplacian << Sobel ~ Canny: not checked (missing rows)".to_string(),
            });
        }
        for r in &self.rows {
            if let Some(e) = &r.error {
                lines.push(format!("{} failed: {e}", r.label));
            }
        }
        lines
    }
}

/// Trains and evaluates every variant with `run`; a failing variant is recorded and the grid continues.
pub fn run_grid_with(
    grid: &AblationGrid,
    protocol: &ProtocolSpec,
    mut run: impl FnMut(&Variant) -> Result<MetricReport>,
) -> Result<AblationReport> {
    if protocol.name != ABLATION_PROTOCOL {
        return Err(Error::Protocol(format!(
            "ablation grids run on {ABLATION_PROTOCOL}, got {}",
            protocol.name
        )));
    }
    let mut rows = Vec::with_capacity(grid.variants.len());
    for v in &grid.variants {
        let started = Instant::now();
        log::info!("ablation {} variant {}", grid.axis.as_str(), v.label);
        let (report, error) = match run(v) {
            Ok(r) => (Some(r), None),
            Err(e) => {
                log::warn!("variant {} failed: {e}", v.label);
                (None, Some(e.to_string()))
            }
        };
        rows.push(AblationRow {
            label: v.label.clone(),
            report,
            error,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(AblationReport {
        axis: grid.axis,
        protocol: protocol.name.as_str().to_string(),
        rows,
    })
}

/// Full train plus OOD evaluation per variant; run directories go under `out_dir`.
pub fn run_grid(
    grid: &AblationGrid,
    protocol: &ProtocolSpec,
    volumes: &[VolumeRecord],
    backend: Option<Arc<dyn Segmenter>>,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    run_grid_with(grid, protocol, |v| {
        let dir = out_dir.map(|d| d.join(sanitize(&v.label)));
        let (pipeline, _) = train_protocol(&v.config, protocol, volumes, backend.clone(), dir.as_deref())?;
        evaluate_protocol(&pipeline, &v.config, protocol, volumes, Scope::Ood, &v.label)
    })
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .filter_map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '_' => Some(c),
            '+' => Some('-'),
            _ => None,
        })
        .collect()
}
