use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::transfer::{MethodRegistry, TransferConfig, TransferContext};

use super::{compute_metrics, MetricReport};

pub const CSV_HEADER: &str = "method,beta,alpha,n,m,seed,style_gram,style_hist,content_edge,content_query,pareto";

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub config: TransferConfig,
    pub content: Image,
    pub styles: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub beta: f64,
    pub alpha: f64,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub metrics: MetricReport,
    pub pareto: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub cell: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Successful cells in grid order.
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

impl SweepOutcome {
    pub fn csv(&self) -> String {
        to_csv(&self.rows)
    }
}

/// Pareto-optimal flags when minimizing both coordinates. Equal points do
/// not dominate each other.
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[a].1.total_cmp(&points[b].1))
    });
    let mut flags = vec![false; points.len()];
    let mut best_before = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let x = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == x {
            j += 1;
        }
        // Sorted by y within the group, so the first has the group minimum.
        let group_min = points[order[i]].1;
        for &p in &order[i..j] {
            let y = points[p].1;
            flags[p] = !(best_before <= y || group_min < y);
        }
        best_before = best_before.min(group_min);
        i = j;
    }
    flags
}

/// Quadratic reference for [`pareto_flags`].
pub fn pareto_oracle(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            !points
                .iter()
                .enumerate()
                .any(|(j, q)| j != i && q.0 <= p.0 && q.1 <= p.1 && (q.0 < p.0 || q.1 < p.1))
        })
        .collect()
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method, r.beta, r.alpha, r.n, r.m, r.seed, m.style_gram, m.style_hist, m.content_edge, m.content_query, r.pareto
        )
        .expect("write to string");
    }
    out
}

/// Runs every cell on a pool of `parallelism` workers, then flags the
/// Pareto front over the successful rows.
pub fn run_sweep(ctx: &TransferContext<'_>, registry: &MethodRegistry, cells: &[SweepCell], parallelism: usize) -> Result<SweepOutcome> {
    use rayon::prelude::*;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<SweepRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let result = registry.run(ctx, &cell.content, &cell.styles, &cell.config)?;
                let metrics = compute_metrics(ctx.model, &result.image, &cell.content, &cell.styles)?;
                let c = &cell.config;
                Ok(SweepRow {
                    method: c.method.clone(),
                    beta: c.beta,
                    alpha: c.alpha,
                    n: cell.styles.len(),
                    m: c.m,
                    seed: c.seed,
                    metrics,
                    pareto: false,
                })
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (cell, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(SweepFailure {
                cell,
                message: e.to_string(),
            }),
        }
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.metrics.style_gram, r.metrics.content_edge))
        .collect();
    for (row, flag) in rows.iter_mut().zip(pareto_flags(&points)) {
        row.pareto = flag;
    }
    Ok(SweepOutcome { rows, failures })
}
