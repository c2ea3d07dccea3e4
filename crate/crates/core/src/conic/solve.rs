//! Bridge from [`ConicProgram`] to an exponential-cone interior-point solve,
//! plus residual checks computed independently of the solver's own reporting.
//!
//! Cone assembly order is fixed: all equality rows first (zero cone), then
//! inequality rows and variable lower bounds (nonnegative cone), then one
//! three-row exponential cone per logarithmic block.  `ln(a'x+b) >= c'x+d`
//! maps to the cone membership `(c'x+d, 1, a'x+b) in Kexp`.

use super::{ConicProgram, LinRow};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

/// Outcome class of one solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    /// Full-accuracy optimum.
    Optimal,
    /// Optimum at reduced accuracy.
    AlmostOptimal,
    /// Primal infeasibility certificate found.
    Infeasible,
    /// Dual infeasibility certificate found (objective unbounded below).
    Unbounded,
    /// Iteration or time limit hit before convergence.
    MaxIter,
    /// Numerical failure or insufficient progress.
    Numerical,
}

impl SolveStatus {
    /// True when the returned point is a usable optimum.
    pub fn is_optimal(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::AlmostOptimal)
    }
}

/// Optimality residuals recomputed from the assembled program data.
#[derive(Clone, Copy, Debug)]
pub struct KktResiduals {
    /// Worst relative constraint violation of the primal point.
    pub primal: f64,
    /// Relative stationarity residual `|q + A'z|_inf / (1 + |q|_inf)`.
    pub dual: f64,
    /// Relative duality gap `|q'x + b'z| / (1 + |q'x| + |b'z|)`.
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

/// Result of one interior-point solve.
#[derive(Clone, Debug)]
pub struct SubproblemSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub iterations: u32,
}

/// Direct constraint-violation summary of a candidate point.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProgramCheck {
    pub max_eq: f64,
    pub max_le: f64,
    pub max_log: f64,
    pub max_bound: f64,
}

impl ProgramCheck {
    pub fn max(&self) -> f64 {
        self.max_eq.max(self.max_le).max(self.max_log).max(self.max_bound)
    }

    pub fn ok(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Evaluate every row, bound, and log block of `prog` at `x`.
///
/// Violations are normalized by `1 + |rhs|` so the report is comparable
/// across constraint families regardless of scale.
pub fn check_solution(prog: &ConicProgram, x: &[f64]) -> ProgramCheck {
    let mut out = ProgramCheck::default();
    for row in &prog.eq_rows {
        let v = (row.eval(x) - row.rhs).abs() / (1.0 + row.rhs.abs());
        out.max_eq = out.max_eq.max(v);
    }
    for row in &prog.le_rows {
        let v = (row.eval(x) - row.rhs).max(0.0) / (1.0 + row.rhs.abs());
        out.max_le = out.max_le.max(v);
    }
    for b in &prog.log_blocks {
        let v = (-b.slack(x)).max(0.0);
        out.max_log = out.max_log.max(if v.is_nan() { f64::INFINITY } else { v });
    }
    for i in 0..prog.n_vars() {
        if let Some(lb) = prog.lower_bound(i) {
            out.max_bound = out.max_bound.max((lb - x[i]).max(0.0) / (1.0 + lb.abs()));
        }
    }
    out
}

/// One assembled conic row `s_i = b_i - a_i'x`.
struct AsmRow {
    terms: Vec<(usize, f64)>,
    b: f64,
}

fn negated(terms: &[(usize, f64)]) -> Vec<(usize, f64)> {
    terms.iter().map(|&(i, c)| (i, -c)).collect()
}

/// Flatten the program into conic rows in the documented order.
fn assemble_rows(prog: &ConicProgram) -> (Vec<AsmRow>, usize, usize) {
    let mut rows = Vec::new();
    for LinRow { terms, rhs, .. } in &prog.eq_rows {
        rows.push(AsmRow { terms: terms.clone(), b: *rhs });
    }
    let n_eq = rows.len();
    for LinRow { terms, rhs, .. } in &prog.le_rows {
        rows.push(AsmRow { terms: terms.clone(), b: *rhs });
    }
    for i in 0..prog.n_vars() {
        if let Some(lb) = prog.lower_bound(i) {
            rows.push(AsmRow { terms: vec![(i, -1.0)], b: -lb });
        }
    }
    let n_nonneg = rows.len() - n_eq;
    for blk in &prog.log_blocks {
        rows.push(AsmRow { terms: negated(&blk.rhs_terms), b: blk.rhs_const });
        rows.push(AsmRow { terms: Vec::new(), b: 1.0 });
        rows.push(AsmRow { terms: negated(&blk.arg_terms), b: blk.arg_const });
    }
    (rows, n_eq, n_nonneg)
}

fn map_status(s: SolverStatus) -> SolveStatus {
    match s {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved => SolveStatus::AlmostOptimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            SolveStatus::Unbounded
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::MaxIter,
        _ => SolveStatus::Numerical,
    }
}

/// Residuals of `(x, z)` against the assembled rows.
///
/// Primal: worst relative violation over zero-cone rows, nonnegative rows,
/// and `e^{s1} <= s3` per exponential triple.  Dual: stationarity of the
/// Lagrangian.  Gap: primal/dual objective agreement.
fn residuals(
    prog: &ConicProgram,
    rows: &[AsmRow],
    n_eq: usize,
    n_nonneg: usize,
    x: &[f64],
    z: &[f64],
) -> KktResiduals {
    let mut primal: f64 = 0.0;
    let s: Vec<f64> = rows
        .iter()
        .map(|r| r.b - r.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>())
        .collect();
    for (i, &si) in s.iter().enumerate() {
        let scale = 1.0 + rows[i].b.abs();
        if i < n_eq {
            primal = primal.max(si.abs() / scale);
        } else if i < n_eq + n_nonneg {
            primal = primal.max((-si).max(0.0) / scale);
        }
    }
    let mut k = n_eq + n_nonneg;
    while k + 2 < s.len() + 1 && k < s.len() {
        let (t, y, u) = (s[k], s[k + 1], s[k + 2]);
        let viol = if y <= 0.0 {
            -y
        } else {
            (y * (t / y).exp() - u).max(0.0) / (1.0 + u.abs())
        };
        primal = primal.max(viol);
        k += 3;
    }

    let mut atz = vec![0.0f64; prog.n_vars()];
    for (r, &zi) in rows.iter().zip(z) {
        for &(i, c) in &r.terms {
            atz[i] += c * zi;
        }
    }
    let q = prog.objective_coeffs();
    let qmax = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dual = q
        .iter()
        .zip(&atz)
        .fold(0.0f64, |m, (qi, ai)| m.max((qi + ai).abs()))
        / (1.0 + qmax);

    let qx: f64 = prog.objective(x);
    let bz: f64 = rows.iter().zip(z).map(|(r, &zi)| r.b * zi).sum();
    let gap = (qx + bz).abs() / (1.0 + qx.abs() + bz.abs());

    KktResiduals { primal, dual, gap }
}

/// Solve `prog` to tolerance `tol` with a deterministic single-threaded
/// interior-point run.  Returned residuals are recomputed from the program
/// data, not taken from the solver.
pub fn solve(prog: &ConicProgram, tol: f64) -> SubproblemSolution {
    let n = prog.n_vars();
    let (rows, n_eq, n_nonneg) = assemble_rows(prog);
    let m = rows.len();

    let nnz: usize = rows.iter().map(|r| r.terms.len()).sum();
    let mut ti = Vec::with_capacity(nnz);
    let mut tj = Vec::with_capacity(nnz);
    let mut tv = Vec::with_capacity(nnz);
    for (ri, row) in rows.iter().enumerate() {
        for &(ci, c) in &row.terms {
            ti.push(ri);
            tj.push(ci);
            tv.push(c);
        }
    }
    let a = CscMatrix::new_from_triplets(m, n, ti, tj, tv);
    let b: Vec<f64> = rows.iter().map(|r| r.b).collect();
    let p = CscMatrix::zeros((n, n));
    let q = prog.objective_coeffs().to_vec();

    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_eq));
    }
    if n_nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
    }
    for _ in 0..prog.log_blocks.len() {
        cones.push(SupportedConeT::ExponentialConeT());
    }

    let settings = DefaultSettings {
        verbose: false,
        max_iter: 200,
        max_threads: 1,
        tol_gap_abs: tol,
        tol_gap_rel: tol,
        tol_feas: tol,
        ..DefaultSettings::default()
    };

    let mut solver =
        DefaultSolver::new(&p, &q, &a, &b, &cones, settings).expect("conic solver setup");
    solver.solve();
    let sol = &solver.solution;
    let status = map_status(sol.status);
    let kkt = if status.is_optimal() {
        residuals(prog, &rows, n_eq, n_nonneg, &sol.x, &sol.z)
    } else {
        KktResiduals { primal: f64::INFINITY, dual: f64::INFINITY, gap: f64::INFINITY }
    };
    SubproblemSolution {
        x: sol.x.clone(),
        objective: prog.objective(&sol.x),
        status,
        kkt,
        iterations: sol.iterations,
    }
}
