//! Dense two-phase tableau simplex with Bland's anti-cycling rule.
//!
//! Problems are given with general rows (`≤`, `≥`, `=`) and per-variable
//! bounds that may be infinite. Bounds are removed by substitution before
//! the tableau is built, so every internal column is non-negative.

use thiserror::Error;

use crate::scalar::Scalar;

pub const MAX_PIVOTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint<T> {
    pub coeffs: Vec<T>,
    pub relation: Relation,
    pub rhs: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpProblem<T> {
    pub sense: Sense,
    pub objective: Vec<T>,
    pub constraints: Vec<Constraint<T>>,
    /// `(lower, upper)` per variable; infinities allowed.
    pub bounds: Vec<(T, T)>,
}

impl<T: Scalar> LpProblem<T> {
    /// Non-negative variables, no rows.
    pub fn new(sense: Sense, objective: Vec<T>) -> Self {
        let n = objective.len();
        LpProblem { sense, objective, constraints: Vec::new(), bounds: vec![(T::zero(), T::infinity()); n] }
    }

    pub fn constrain(mut self, coeffs: Vec<T>, relation: Relation, rhs: T) -> Self {
        self.constraints.push(Constraint { coeffs, relation, rhs });
        self
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    /// Largest violation of any row or bound at `x`.
    pub fn max_violation(&self, x: &[T]) -> T {
        let mut worst = T::zero();
        for c in &self.constraints {
            let lhs: T = c.coeffs.iter().zip(x).map(|(&a, &v)| a * v).sum();
            let v = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(v);
        }
        for (&(lo, hi), &v) in self.bounds.iter().zip(x) {
            worst = worst.max(lo - v).max(v - hi);
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution<T> {
    pub status: LpStatus,
    /// Objective in the problem's own sense; meaningful only when optimal.
    pub objective: T,
    pub x: Vec<T>,
}

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("simplex did not converge within {0} pivots")]
    NumericalFailure(usize),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// How an original variable is recovered from non-negative columns.
#[derive(Clone, Copy, Debug)]
enum VarMap<T> {
    /// x = offset + y
    Shift { col: usize, offset: T },
    /// x = offset − y
    Flip { col: usize, offset: T },
    /// x = y⁺ − y⁻
    Split { pos: usize, neg: usize },
}

struct Tableau<T> {
    /// rows × (cols + 1); last entry is the rhs.
    rows: Vec<Vec<T>>,
    basis: Vec<usize>,
    cols: usize,
    pivots: usize,
    tol: T,
}

enum Phase {
    Optimal,
    Unbounded,
}

impl<T: Scalar> Tableau<T> {
    fn rhs(&self, i: usize) -> T {
        self.rows[i][self.cols]
    }

    fn pivot(&mut self, r: usize, c: usize) -> Result<(), LpError> {
        self.pivots += 1;
        if self.pivots > MAX_PIVOTS {
            return Err(LpError::NumericalFailure(MAX_PIVOTS));
        }
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != T::zero() {
                for (v, &pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = T::zero();
            }
        }
        self.basis[r] = c;
        Ok(())
    }

    /// Maximizes `cost · y` over columns `< active_cols`.
    fn optimize(&mut self, cost: &[T], active_cols: usize) -> Result<Phase, LpError> {
        loop {
            // Bland: lowest-index column with positive reduced cost.
            let entering = (0..active_cols).find(|&j| {
                if self.basis.contains(&j) {
                    return false;
                }
                let z: T = self.basis.iter().enumerate().map(|(i, &b)| cost[b] * self.rows[i][j]).sum();
                cost[j] - z > self.tol
            });
            let Some(c) = entering else { return Ok(Phase::Optimal) };

            let mut leave: Option<(usize, T)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][c];
                if a > self.tol {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - self.tol || (ratio <= lr + self.tol && self.basis[i] < self.basis[li]) {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else { return Ok(Phase::Unbounded) };
            self.pivot(r, c)?;
        }
    }
}

/// Solves `problem`; infeasibility and unboundedness are statuses, not errors.
pub fn lp_solve<T: Scalar>(problem: &LpProblem<T>) -> Result<LpSolution<T>, LpError> {
    let n = problem.num_vars();
    if problem.bounds.len() != n {
        return Err(LpError::InvalidProblem(format!("{} bounds for {} variables", problem.bounds.len(), n)));
    }
    if problem.objective.iter().any(|v| !v.is_finite()) {
        return Err(LpError::InvalidProblem("non-finite objective coefficient".into()));
    }
    for (k, c) in problem.constraints.iter().enumerate() {
        if c.coeffs.len() != n {
            return Err(LpError::InvalidProblem(format!("row {k} has {} coefficients", c.coeffs.len())));
        }
        if c.coeffs.iter().any(|v| !v.is_finite()) || !c.rhs.is_finite() {
            return Err(LpError::InvalidProblem(format!("row {k} has non-finite entries")));
        }
    }
    for (j, &(lo, hi)) in problem.bounds.iter().enumerate() {
        if lo.is_nan() || hi.is_nan() || lo > hi || lo == T::infinity() || hi == T::neg_infinity() {
            return Err(LpError::InvalidProblem(format!("inconsistent bounds on variable {j}")));
        }
    }

    // Substitute bounds away.
    let mut maps = Vec::with_capacity(n);
    let mut ncols = 0usize;
    let mut extra_rows: Vec<(usize, T)> = Vec::new();
    for &(lo, hi) in &problem.bounds {
        if lo.is_finite() {
            maps.push(VarMap::Shift { col: ncols, offset: lo });
            if hi.is_finite() {
                extra_rows.push((ncols, hi - lo));
            }
            ncols += 1;
        } else if hi.is_finite() {
            maps.push(VarMap::Flip { col: ncols, offset: hi });
            ncols += 1;
        } else {
            maps.push(VarMap::Split { pos: ncols, neg: ncols + 1 });
            ncols += 2;
        }
    }

    let sign = match problem.sense {
        Sense::Maximize => T::one(),
        Sense::Minimize => -T::one(),
    };
    let mut cost = vec![T::zero(); ncols];
    for (j, m) in maps.iter().enumerate() {
        let c = sign * problem.objective[j];
        match *m {
            VarMap::Shift { col, .. } => cost[col] += c,
            VarMap::Flip { col, .. } => cost[col] -= c,
            VarMap::Split { pos, neg } => {
                cost[pos] += c;
                cost[neg] -= c;
            }
        }
    }

    // Rows over the substituted columns.
    let mut rows: Vec<(Vec<T>, Relation, T)> = Vec::new();
    for c in &problem.constraints {
        let mut coeffs = vec![T::zero(); ncols];
        let mut rhs = c.rhs;
        for (j, &a) in c.coeffs.iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            match maps[j] {
                VarMap::Shift { col, offset } => {
                    coeffs[col] += a;
                    rhs -= a * offset;
                }
                VarMap::Flip { col, offset } => {
                    coeffs[col] -= a;
                    rhs -= a * offset;
                }
                VarMap::Split { pos, neg } => {
                    coeffs[pos] += a;
                    coeffs[neg] -= a;
                }
            }
        }
        rows.push((coeffs, c.relation, rhs));
    }
    for &(col, width) in &extra_rows {
        let mut coeffs = vec![T::zero(); ncols];
        coeffs[col] = T::one();
        rows.push((coeffs, Relation::Le, width));
    }
    for row in rows.iter_mut() {
        if row.2 < T::zero() {
            row.0.iter_mut().for_each(|v| *v = -*v);
            row.2 = -row.2;
            row.1 = match row.1 {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
        }
    }

    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
    let art_start = ncols + n_slack;
    let total = art_start + n_art;

    let scale = rows.iter().map(|r| r.2).fold(T::one(), T::max);
    let tol = T::tolerance();
    let mut tab = Tableau { rows: Vec::with_capacity(m), basis: Vec::with_capacity(m), cols: total, pivots: 0, tol };
    let (mut s, mut a) = (ncols, art_start);
    for (coeffs, rel, rhs) in rows {
        let mut row = vec![T::zero(); total + 1];
        row[..ncols].copy_from_slice(&coeffs);
        row[total] = rhs;
        match rel {
            Relation::Le => {
                row[s] = T::one();
                tab.basis.push(s);
                s += 1;
            }
            Relation::Ge => {
                row[s] = -T::one();
                s += 1;
                row[a] = T::one();
                tab.basis.push(a);
                a += 1;
            }
            Relation::Eq => {
                row[a] = T::one();
                tab.basis.push(a);
                a += 1;
            }
        }
        tab.rows.push(row);
    }

    // Phase 1: maximize −Σ artificials.
    if n_art > 0 {
        let mut phase1 = vec![T::zero(); total];
        phase1[art_start..].iter_mut().for_each(|c| *c = -T::one());
        tab.optimize(&phase1, total)?;
        let infeas: T = tab.basis.iter().enumerate().filter(|(_, &b)| b >= art_start).map(|(i, _)| tab.rhs(i)).sum();
        if infeas > tol * scale.max(T::one()) * T::lit(10.0) {
            return Ok(LpSolution { status: LpStatus::Infeasible, objective: T::nan(), x: vec![T::nan(); n] });
        }
        // Drive remaining (zero-level) artificials out of the basis.
        let mut i = 0;
        while i < tab.rows.len() {
            if tab.basis[i] >= art_start {
                match (0..art_start).find(|&j| tab.rows[i][j].abs() > tol) {
                    Some(j) => tab.pivot(i, j)?,
                    None => {
                        tab.rows.remove(i);
                        tab.basis.remove(i);
                        continue;
                    }
                }
            }
            i += 1;
        }
    }

    // Phase 2 on structural + slack columns only.
    let mut phase2 = vec![T::zero(); total];
    phase2[..ncols].copy_from_slice(&cost);
    let outcome = tab.optimize(&phase2, art_start)?;
    if let Phase::Unbounded = outcome {
        return Ok(LpSolution { status: LpStatus::Unbounded, objective: T::nan(), x: vec![T::nan(); n] });
    }

    let mut y = vec![T::zero(); total];
    for (i, &b) in tab.basis.iter().enumerate() {
        y[b] = tab.rhs(i).max(T::zero());
    }
    let x: Vec<T> = maps
        .iter()
        .map(|m| match *m {
            VarMap::Shift { col, offset } => offset + y[col],
            VarMap::Flip { col, offset } => offset - y[col],
            VarMap::Split { pos, neg } => y[pos] - y[neg],
        })
        .collect();
    let objective = problem.objective.iter().zip(&x).map(|(&c, &v)| c * v).sum();
    Ok(LpSolution { status: LpStatus::Optimal, objective, x })
}
