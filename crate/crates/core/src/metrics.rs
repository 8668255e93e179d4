//! Retrieval metrics over predicted span sets.
//!
//! Each proposal is linked to the query of its highest correspondence
//! probability (ties to the lowest query index). For one query, the linked
//! proposals ranked by that probability (ties to the lower proposal index)
//! form its retrieval list. Recall at rank `a` and overlap `m` counts a
//! query as hit when any of its top `a` candidates overlaps the ground
//! truth with IoU strictly above `m`; mean IoU scores the top candidate
//! only, zero when a query attracted no proposals.
//!
//! The report fixes the conventional grid: ranks 1 and 5, thresholds 0.5
//! and 0.7, plus mean IoU.

use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::span::TimeSpan;

/// Aggregates per-query outcomes across samples.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    hits: [u64; 4],
    iou_sum: f64,
    n_queries: u64,
    n_samples: u64,
}

/// (rank, IoU threshold) grid backing the four recall columns.
pub const RECALL_GRID: [(usize, f64); 4] = [(1, 0.5), (1, 0.7), (5, 0.5), (5, 0.7)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub r1_at_05: f64,
    pub r1_at_07: f64,
    pub r5_at_05: f64,
    pub r5_at_07: f64,
    pub mean_iou: f64,
    pub n_queries: u64,
    pub n_samples: u64,
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "samples {:>6}  queries {:>6}",
            self.n_samples, self.n_queries
        )?;
        writeln!(f, "R@1 IoU>0.5  {:.4}", self.r1_at_05)?;
        writeln!(f, "R@1 IoU>0.7  {:.4}", self.r1_at_07)?;
        writeln!(f, "R@5 IoU>0.5  {:.4}", self.r5_at_05)?;
        writeln!(f, "R@5 IoU>0.7  {:.4}", self.r5_at_07)?;
        write!(f, "mean IoU     {:.4}", self.mean_iou)
    }
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "n_samples,n_queries,r1_at_05,r1_at_07,r5_at_05,r5_at_07,mean_iou"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.n_samples,
            self.n_queries,
            self.r1_at_05,
            self.r1_at_07,
            self.r5_at_05,
            self.r5_at_07,
            self.mean_iou
        )
    }
}

/// Ranked retrieval lists, one per query: proposal indices linked to the
/// query, best correspondence first.
pub fn rank_proposals(n: usize, k: usize, correspondence: &[f64]) -> Result<Vec<Vec<usize>>> {
    if correspondence.len() != n * k || k == 0 {
        return Err(Error::Shape(format!(
            "correspondence: {} values for {n} x {k}",
            correspondence.len()
        )));
    }
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..n {
        let row = &correspondence[i * k..(i + 1) * k];
        let mut arg = 0;
        for (j, p) in row.iter().enumerate() {
            if *p > row[arg] {
                arg = j;
            }
        }
        lists[arg].push(i);
    }
    for (j, list) in lists.iter_mut().enumerate() {
        list.sort_by(|&a, &b| {
            let (pa, pb) = (correspondence[a * k + j], correspondence[b * k + j]);
            pb.partial_cmp(&pa)
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
    }
    Ok(lists)
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scores one sample; `gt[j]` is the ground truth for query `j`.
    pub fn add(&mut self, spans: &[TimeSpan], correspondence: &[f64], gt: &[TimeSpan]) -> Result<()> {
        let (n, k) = (spans.len(), gt.len());
        let lists = rank_proposals(n, k, correspondence)?;
        for (j, truth) in gt.iter().enumerate() {
            let list = &lists[j];
            for (slot, (rank, threshold)) in RECALL_GRID.iter().enumerate() {
                let hit = list
                    .iter()
                    .take(*rank)
                    .any(|&i| spans[i].iou(truth) > *threshold);
                if hit {
                    self.hits[slot] += 1;
                }
            }
            self.iou_sum += list.first().map_or(0.0, |&i| spans[i].iou(truth));
            self.n_queries += 1;
        }
        self.n_samples += 1;
        Ok(())
    }

    pub fn add_output(&mut self, out: &ModelOutput, gt: &[TimeSpan]) -> Result<()> {
        self.add(&out.spans, &out.correspondence, gt)
    }

    pub fn report(&self) -> MetricReport {
        let rate = |h: u64| {
            if self.n_queries == 0 {
                0.0
            } else {
                h as f64 / self.n_queries as f64
            }
        };
        MetricReport {
            r1_at_05: rate(self.hits[0]),
            r1_at_07: rate(self.hits[1]),
            r5_at_05: rate(self.hits[2]),
            r5_at_07: rate(self.hits[3]),
            mean_iou: if self.n_queries == 0 {
                0.0
            } else {
                self.iou_sum / self.n_queries as f64
            },
            n_queries: self.n_queries,
            n_samples: self.n_samples,
        }
    }
}
