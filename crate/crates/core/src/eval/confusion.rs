use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::EpisodeOutcome;

/// Query counts by original class name: rows are truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Aggregates `outcomes` over the classes of `split`, mapping episode-local
    /// labels back through each episode's class list.
    pub fn from_outcomes(split: &BTreeSet<String>, outcomes: &[EpisodeOutcome]) -> Self {
        let labels: Vec<String> = split.iter().cloned().collect();
        let pos = |name: &str| labels.binary_search_by(|l| l.as_str().cmp(name)).expect("class in split");
        let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
        for o in outcomes {
            for (q, &p) in o.plan.query.iter().zip(&o.scored.predictions) {
                let truth = pos(&o.plan.class_ids[q.label]);
                let pred = pos(&o.plan.class_ids[p]);
                counts[truth][pred] += 1;
            }
        }
        Self { labels, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total().max(1) as f64
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Header row of predicted labels, then one row per true label.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\predicted");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Grey-scale heat map, each row normalised by its total; darker is larger.
    pub fn save_png(&self, path: &Path, cell: u32) -> Result<()> {
        let n = self.labels.len() as u32;
        let sums = self.row_sums();
        let img = GrayImage::from_fn((n * cell).max(1), (n * cell).max(1), |x, y| {
            let (r, c) = ((y / cell) as usize, (x / cell) as usize);
            if r >= self.labels.len() || c >= self.labels.len() {
                return Luma([255]);
            }
            let frac = self.counts[r][c] as f64 / sums[r].max(1) as f64;
            Luma([(255.0 * (1.0 - frac)).round() as u8])
        });
        img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
    }
}
