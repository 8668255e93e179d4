//! Optimal one-to-one matching between ground-truth targets and predictions.
//!
//! Targets index rows, predictions index columns, and the solver requires
//! `rows <= cols`: every target gets exactly one distinct prediction while
//! surplus predictions stay unmatched. Rectangular matrices are solved
//! directly; padding with a constant column block would yield the same pairs.

use crate::error::{Error, Result};
use crate::span::TimeSpan;

/// Dense finite cost matrix with `rows <= cols`.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::CostMatrix("dimensions must be positive".into()));
        }
        if rows > cols {
            return Err(Error::CostMatrix(format!(
                "more targets ({rows}) than predictions ({cols})"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::CostMatrix(format!(
                "expected {} entries, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::CostMatrix(format!("non-finite entry {bad}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// A complete matching: one `(target, prediction)` pair per row, prediction
/// indices distinct, sorted by target index. `total_cost` is the canonical
/// sum of the chosen entries in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Sum of chosen entries in ascending target order. All code paths that
/// compare totals use this exact summation order so equal pair sets produce
/// bit-identical totals.
fn canonical_total(m: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| m.get(i, j)).sum()
}

/// Matching cost between target `i` and prediction `j`:
/// `-p_j(q_i) + l1_weight * l1(span_j, span_i) + iou_weight * (1 - giou(span_j, span_i))`.
///
/// `correspondence` holds row-major `[n_predictions x n_queries]` probabilities;
/// rows need not be normalized here, the cost only reads the matched query
/// column. Each target carries the index of the query it answers.
pub fn build_cost_matrix(
    targets: &[(TimeSpan, usize)],
    pred_spans: &[TimeSpan],
    correspondence: &[f64],
    n_queries: usize,
    l1_weight: f64,
    iou_weight: f64,
) -> Result<CostMatrix> {
    let (k, n) = (targets.len(), pred_spans.len());
    if correspondence.len() != n * n_queries {
        return Err(Error::Shape(format!(
            "correspondence has {} entries, expected {} x {}",
            correspondence.len(),
            n,
            n_queries
        )));
    }
    if let Some(&(_, q)) = targets.iter().find(|&&(_, q)| q >= n_queries) {
        return Err(Error::Shape(format!(
            "target query index {q} out of range for {n_queries} queries"
        )));
    }
    let mut values = Vec::with_capacity(k * n);
    for &(span, q) in targets {
        for (j, pred) in pred_spans.iter().enumerate() {
            let p = correspondence[j * n_queries + q];
            values.push(-p + l1_weight * pred.l1(&span) + iou_weight * (1.0 - pred.giou(&span)));
        }
    }
    CostMatrix::new(k, n, values)
}

struct Solve {
    pairs: Vec<(usize, usize)>,
    /// Final dual potentials, 0-based. Feasible for every edge
    /// (`cost - u - v >= 0` up to rounding) and tight on matched edges, with
    /// `v = 0` on columns left unmatched; this is what makes reduced-cost
    /// pruning in the tie-break sound.
    row_dual: Vec<f64>,
    col_dual: Vec<f64>,
}

/// Shortest-augmenting-path Hungarian solver with dual potentials.
/// Returns pairs plus duals; callers compute totals canonically.
fn solve(m: &CostMatrix) -> Solve {
    let (k, n) = (m.rows, m.cols);
    // 1-based arrays; column 0 is the virtual root of each augmenting search.
    let mut u = vec![0.0f64; k + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1]; // row matched to each column, 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=k {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = m.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| matched[j] != 0)
        .map(|j| (matched[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Solve {
        pairs,
        row_dual: u[1..].to_vec(),
        col_dual: v[1..].to_vec(),
    }
}

/// Globally optimal assignment with a deterministic tie-break: among all
/// minimum-cost matchings, the lexicographically smallest pair list.
///
/// The base solver already yields an optimum; a refinement pass then walks
/// rows in order and greedily fixes the smallest prediction index that still
/// completes to the same canonical total. Candidate columns are pruned by
/// complementary slackness (only near-zero reduced cost edges can appear in
/// an alternative optimum), so on matrices with a unique optimum the pass
/// costs one scan per row and no extra solves.
pub fn hungarian(m: &CostMatrix) -> Result<Assignment> {
    let solved = solve(m);
    let total = canonical_total(m, &solved.pairs);
    let pairs = refine_lexicographic(m, &solved, total).unwrap_or(solved.pairs);
    let total_cost = canonical_total(m, &pairs);
    Ok(Assignment { pairs, total_cost })
}

fn refine_lexicographic(m: &CostMatrix, solved: &Solve, total: f64) -> Option<Vec<(usize, usize)>> {
    let (k, n) = (m.rows, m.cols);
    let scale = 1.0
        + solved
            .pairs
            .iter()
            .map(|&(i, j)| m.get(i, j).abs())
            .fold(0.0f64, f64::max);
    let tol = 1e-9 * scale;

    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut used = vec![false; n];
    let mut diverged = false;
    for i in 0..k {
        let base_col = solved.pairs[i].1;
        let mut fixed = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            if j == base_col && !diverged {
                // While the prefix equals the base solution, its own column
                // completes optimally by construction: no solve needed.
                fixed = Some(j);
                break;
            }
            // Complementary slackness: an edge can appear in an alternative
            // optimum only if its reduced cost is zero.
            if j != base_col && m.get(i, j) - solved.row_dual[i] - solved.col_dual[j] > tol {
                continue;
            }
            // Verify the candidate by optimally completing the remainder and
            // requiring the exact same canonical total.
            let mut candidate = chosen.clone();
            candidate.push((i, j));
            if let Some(rest) = complete(m, i + 1, &used, j) {
                candidate.extend(rest);
                if canonical_total(m, &candidate) == total {
                    fixed = Some(j);
                    break;
                }
            }
        }
        let j = fixed?;
        if j != base_col {
            diverged = true;
        }
        used[j] = true;
        chosen.push((i, j));
    }
    Some(chosen)
}

/// Optimal completion for rows `first_row..` over columns not yet used.
fn complete(
    m: &CostMatrix,
    first_row: usize,
    used: &[bool],
    extra_used: usize,
) -> Option<Vec<(usize, usize)>> {
    let rows = m.rows - first_row;
    let cols: Vec<usize> = (0..m.cols)
        .filter(|&j| !used[j] && j != extra_used)
        .collect();
    if rows == 0 {
        return Some(Vec::new());
    }
    if rows > cols.len() {
        return None;
    }
    let mut values = Vec::with_capacity(rows * cols.len());
    for i in first_row..m.rows {
        for &j in &cols {
            values.push(m.get(i, j));
        }
    }
    let sub = CostMatrix::new(rows, cols.len(), values).ok()?;
    Some(
        solve(&sub)
            .pairs
            .into_iter()
            .map(|(i, j)| (i + first_row, cols[j]))
            .collect(),
    )
}

/// Exhaustive oracle: enumerates every injective target-to-prediction map in
/// lexicographic pair-list order, keeping the first strict minimum, so its
/// tie-break matches [`hungarian`] by construction. Factorial time; refuses
/// matrices wider than 9 columns.
pub fn brute_force_assign(m: &CostMatrix) -> Result<Assignment> {
    const LIMIT: usize = 9;
    if m.cols > LIMIT {
        return Err(Error::OracleTooLarge {
            limit: LIMIT,
            got: m.cols,
        });
    }
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut used = vec![false; m.cols];
    let mut current: Vec<(usize, usize)> = Vec::with_capacity(m.rows);
    enumerate(m, 0, &mut used, &mut current, &mut best);
    let (total_cost, pairs) = best.expect("at least one injective map exists");
    Ok(Assignment { pairs, total_cost })
}

fn enumerate(
    m: &CostMatrix,
    row: usize,
    used: &mut [bool],
    current: &mut Vec<(usize, usize)>,
    best: &mut Option<(f64, Vec<(usize, usize)>)>,
) {
    if row == m.rows {
        let total = canonical_total(m, current);
        let better = match best {
            None => true,
            Some((t, _)) => total < *t,
        };
        if better {
            *best = Some((total, current.clone()));
        }
        return;
    }
    for j in 0..m.cols {
        if used[j] {
            continue;
        }
        used[j] = true;
        current.push((row, j));
        enumerate(m, row + 1, used, current, best);
        current.pop();
        used[j] = false;
    }
}
