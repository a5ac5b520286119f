//! Dense two-phase primal simplex for equality-form linear programs.
//!
//! Problems are `maximize c·x subject to A x = b`, with each variable either
//! nonnegative or free. Free variables are split into a difference of two
//! nonnegative columns. Pricing is Dantzig's largest-coefficient rule until the
//! first degenerate pivot, after which Bland's rule is used for the rest of the
//! solve.

use thiserror::Error;

/// Constraint residual allowed in a reported optimum.
pub const FEASIBILITY_TOL: f64 = 1e-7;
/// Smallest admissible pivot element.
pub const PIVOT_TOL: f64 = 1e-11;
/// Reduced costs below this are treated as zero.
pub const REDUCED_COST_TOL: f64 = 1e-9;
/// Phase one declares feasibility when the artificial mass drops below this.
pub const PHASE_ONE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarSign {
    NonNegative,
    Free,
}

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("coefficient {0} is not finite")]
    NonFinite(&'static str),
    #[error("numerical breakdown: no pivot above {PIVOT_TOL:e} in any improving column")]
    NumericalBreakdown,
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("optimal point violates the constraints by {0:e}")]
    Inaccurate(f64),
}

/// `maximize objective·x` subject to `rows · x = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub signs: Vec<VarSign>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Primal point; empty unless optimal.
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

impl LinearProgram {
    pub fn new(
        objective: Vec<f64>,
        rows: Vec<Vec<f64>>,
        rhs: Vec<f64>,
        signs: Vec<VarSign>,
    ) -> Result<Self, LpError> {
        let lp = Self {
            objective,
            rows,
            rhs,
            signs,
        };
        lp.validate()?;
        Ok(lp)
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn validate(&self) -> Result<(), LpError> {
        let n = self.objective.len();
        if self.signs.len() != n {
            return Err(LpError::Dimension(format!("{} signs for {n} variables", self.signs.len())));
        }
        if self.rhs.len() != self.rows.len() {
            return Err(LpError::Dimension(format!(
                "{} right-hand sides for {} rows",
                self.rhs.len(),
                self.rows.len()
            )));
        }
        if let Some(i) = self.rows.iter().position(|r| r.len() != n) {
            return Err(LpError::Dimension(format!("row {i} has {} entries, expected {n}", self.rows[i].len())));
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(LpError::NonFinite("objective"));
        }
        if self.rhs.iter().any(|v| !v.is_finite()) {
            return Err(LpError::NonFinite("rhs"));
        }
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LpError::NonFinite("constraint matrix"));
        }
        Ok(())
    }

    /// Largest absolute residual of `rows · x = rhs`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(row, b)| (row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

/// Incremental construction with inequality rows turned into slack columns.
#[derive(Debug, Clone, Default)]
pub struct LpBuilder {
    objective: Vec<f64>,
    signs: Vec<VarSign>,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl LpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, objective: f64, sign: VarSign) -> usize {
        self.objective.push(objective);
        self.signs.push(sign);
        self.objective.len() - 1
    }

    pub fn add_eq(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push(terms);
        self.rhs.push(rhs);
    }

    pub fn add_le(&mut self, mut terms: Vec<(usize, f64)>, rhs: f64) {
        let slack = self.add_variable(0.0, VarSign::NonNegative);
        terms.push((slack, 1.0));
        self.add_eq(terms, rhs);
    }

    pub fn add_ge(&mut self, mut terms: Vec<(usize, f64)>, rhs: f64) {
        let surplus = self.add_variable(0.0, VarSign::NonNegative);
        terms.push((surplus, -1.0));
        self.add_eq(terms, rhs);
    }

    pub fn build(self) -> Result<LinearProgram, LpError> {
        let n = self.objective.len();
        let mut rows = Vec::with_capacity(self.rows.len());
        for terms in self.rows {
            let mut row = vec![0.0; n];
            for (j, v) in terms {
                if j >= n {
                    return Err(LpError::Dimension(format!("variable {j} does not exist")));
                }
                row[j] += v;
            }
            rows.push(row);
        }
        LinearProgram::new(self.objective, rows, self.rhs, self.signs)
    }
}

struct Tableau {
    // m rows of (n_cols + 1) entries; the last entry is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    n_cols: usize,
    bland: bool,
    pivots: usize,
    limit: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[i][self.n_cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let width = self.n_cols + 1;
        let p = self.t[row][col];
        for k in 0..width {
            self.t[row][k] /= p;
        }
        self.t[row][col] = 1.0;
        let pivot_row = self.t[row].clone();
        for (i, r) in self.t.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f == 0.0 {
                continue;
            }
            for k in 0..width {
                r[k] -= f * pivot_row[k];
            }
            r[col] = 0.0;
        }
        self.basis[row] = col;
        self.pivots += 1;
    }

    fn reduced_costs(&self, cost: &[f64], allowed: usize) -> Vec<f64> {
        let mut d: Vec<f64> = cost[..allowed].to_vec();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb == 0.0 {
                continue;
            }
            for (j, dj) in d.iter_mut().enumerate() {
                *dj -= cb * self.t[i][j];
            }
        }
        for &b in &self.basis {
            if b < allowed {
                d[b] = 0.0;
            }
        }
        d
    }

    /// Leaving row for entering column `col`, or why there is none.
    fn ratio_test(&self, col: usize) -> Result<usize, bool> {
        let mut best: Option<(usize, f64)> = None;
        let mut tiny_positive = false;
        for i in 0..self.t.len() {
            let a = self.t[i][col];
            if a <= PIVOT_TOL {
                if a > 0.0 {
                    tiny_positive = true;
                }
                continue;
            }
            let ratio = self.rhs(i).max(0.0) / a;
            best = match best {
                None => Some((i, ratio)),
                Some((k, r)) => {
                    let tie = (ratio - r).abs() <= 1e-12 * (1.0 + r.abs());
                    let better = if tie {
                        if self.bland {
                            self.basis[i] < self.basis[k]
                        } else {
                            a > self.t[k][col]
                        }
                    } else {
                        ratio < r
                    };
                    if better {
                        Some((i, ratio))
                    } else {
                        Some((k, r))
                    }
                }
            };
        }
        // Err(true): only sub-floor pivots exist; Err(false): column unbounded.
        best.map(|(i, _)| i).ok_or(tiny_positive)
    }

    /// Maximizes `cost` using columns `0..allowed` as entering candidates.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> Result<Outcome, LpError> {
        loop {
            if self.pivots >= self.limit {
                return Err(LpError::IterationLimit(self.limit));
            }
            let d = self.reduced_costs(cost, allowed);
            let mut candidates: Vec<usize> = (0..allowed).filter(|&j| d[j] > REDUCED_COST_TOL).collect();
            if candidates.is_empty() {
                return Ok(Outcome::Optimal);
            }
            if !self.bland {
                candidates.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
            }
            let mut chosen = None;
            for &col in &candidates {
                match self.ratio_test(col) {
                    Ok(row) => {
                        chosen = Some((row, col));
                        break;
                    }
                    Err(false) => return Ok(Outcome::Unbounded),
                    Err(true) => continue,
                }
            }
            let (row, col) = chosen.ok_or(LpError::NumericalBreakdown)?;
            if self.rhs(row).abs() <= PIVOT_TOL {
                self.bland = true;
            }
            self.pivot(row, col);
        }
    }
}

/// Solves `lp`; infeasibility and unboundedness are statuses, not errors.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.validate()?;
    let n = lp.n_vars();
    let m = lp.n_rows();

    // Standard-form columns: original index and sign.
    let mut columns: Vec<(usize, f64)> = Vec::with_capacity(2 * n);
    for (j, sign) in lp.signs.iter().enumerate() {
        columns.push((j, 1.0));
        if *sign == VarSign::Free {
            columns.push((j, -1.0));
        }
    }
    let n_std = columns.len();
    let n_cols = n_std + m;

    let mut t = Vec::with_capacity(m);
    for i in 0..m {
        let flip = if lp.rhs[i] < 0.0 { -1.0 } else { 1.0 };
        let mut row = vec![0.0; n_cols + 1];
        for (k, &(j, s)) in columns.iter().enumerate() {
            row[k] = flip * s * lp.rows[i][j];
        }
        row[n_std + i] = 1.0;
        row[n_cols] = flip * lp.rhs[i];
        t.push(row);
    }
    let mut tab = Tableau {
        t,
        basis: (n_std..n_cols).collect(),
        n_cols,
        bland: false,
        pivots: 0,
        limit: 50_000 + 200 * (n_cols + m),
    };

    let mut phase_one_cost = vec![0.0; n_cols];
    for c in phase_one_cost.iter_mut().skip(n_std) {
        *c = -1.0;
    }
    tab.optimize(&phase_one_cost, n_cols)?;
    let infeasibility: f64 = (0..tab.t.len())
        .filter(|&i| tab.basis[i] >= n_std)
        .map(|i| tab.rhs(i).abs())
        .sum();
    if infeasibility > PHASE_ONE_TOL {
        return Ok(LpSolution {
            status: LpStatus::Infeasible,
            x: Vec::new(),
            objective: f64::NAN,
            pivots: tab.pivots,
        });
    }

    // Drive zero-level artificials out of the basis; rows where that is
    // impossible are linear combinations of others and are dropped.
    let mut i = 0;
    while i < tab.t.len() {
        if tab.basis[i] >= n_std {
            let col = (0..n_std)
                .filter(|&j| tab.t[i][j].abs() > 1e-9)
                .max_by(|&a, &b| tab.t[i][a].abs().total_cmp(&tab.t[i][b].abs()));
            match col {
                Some(j) => tab.pivot(i, j),
                None => {
                    tab.t.remove(i);
                    tab.basis.remove(i);
                    continue;
                }
            }
        }
        i += 1;
    }

    let mut cost = vec![0.0; n_cols];
    for (k, &(j, s)) in columns.iter().enumerate() {
        cost[k] = s * lp.objective[j];
    }
    let outcome = tab.optimize(&cost, n_std)?;
    if let Outcome::Unbounded = outcome {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: Vec::new(),
            objective: f64::INFINITY,
            pivots: tab.pivots,
        });
    }

    let mut x = vec![0.0; n];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n_std {
            let (j, s) = columns[b];
            let v = tab.rhs(i);
            x[j] += s * if lp.signs[j] == VarSign::NonNegative { v.max(0.0) } else { v };
        }
    }
    let scale = 1.0 + lp.rhs.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let residual = lp.residual(&x);
    if residual > FEASIBILITY_TOL * scale {
        return Err(LpError::Inaccurate(residual));
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        objective: lp.value(&x),
        x,
        pivots: tab.pivots,
    })
}
