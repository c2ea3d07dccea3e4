//! Convex subproblem container and solver bridge.
//!
//! A [`ConicProgram`] is a linear objective over named variable blocks,
//! subject to linear equality and inequality rows plus logarithmic blocks of
//! the form `ln(a'x + b) >= c'x + d`.  Each logarithmic block maps onto one
//! exponential cone at solve time; everything else stays linear.  Rows carry
//! short tags so tests and the program dump can identify constraint families
//! structurally.

pub mod assemble;
pub mod solve;

pub use assemble::{
    assemble_joint, assemble_refine, initial_point, initial_point_masked, Binding, JointInputs,
    JointLayout, RefineInputs, RefineLayout,
};
pub use solve::{check_solution, solve, KktResiduals, ProgramCheck, SolveStatus, SubproblemSolution};

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

/// Contiguous slice of decision variables registered under one name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarRef {
    pub offset: usize,
    pub len: usize,
}

impl VarRef {
    /// Index of the `i`-th variable in the block.
    pub fn at(&self, i: usize) -> usize {
        debug_assert!(i < self.len);
        self.offset + i
    }
}

/// One linear row `terms . x (=|<=) rhs`.
#[derive(Clone, Debug)]
pub struct LinRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
    pub tag: String,
}

impl LinRow {
    /// Row value at `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum()
    }

    /// Coefficient of variable `idx` (0.0 when absent).
    pub fn coeff(&self, idx: usize) -> f64 {
        self.terms
            .iter()
            .find(|&&(i, _)| i == idx)
            .map_or(0.0, |&(_, c)| c)
    }
}

/// One logarithmic block `ln(arg_terms . x + arg_const) >= rhs_terms . x + rhs_const`.
///
/// Validity requires the argument to stay strictly positive on the feasible
/// set; assembly guarantees this by keeping `arg_const > 0` and all argument
/// coefficients nonnegative over nonnegative variables.
#[derive(Clone, Debug)]
pub struct LogBlock {
    pub arg_terms: Vec<(usize, f64)>,
    pub arg_const: f64,
    pub rhs_terms: Vec<(usize, f64)>,
    pub rhs_const: f64,
    pub tag: String,
}

impl LogBlock {
    /// `ln(arg) - rhs` at `x`; nonnegative when satisfied.
    pub fn slack(&self, x: &[f64]) -> f64 {
        let arg: f64 = self.arg_terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.arg_const;
        let rhs: f64 = self.rhs_terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.rhs_const;
        arg.ln() - rhs
    }
}

/// Linear conic program: `min obj . x` subject to rows, bounds, and log blocks.
#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    blocks: Vec<(String, VarRef)>,
    lower: Vec<Option<f64>>,
    obj: Vec<f64>,
    pub eq_rows: Vec<LinRow>,
    pub le_rows: Vec<LinRow>,
    pub log_blocks: Vec<LogBlock>,
    seen_rows: HashSet<u64>,
}

fn canonical_terms(mut terms: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    terms.sort_unstable_by_key(|&(i, _)| i);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
    for (i, c) in terms {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += c,
            _ => out.push((i, c)),
        }
    }
    out.retain(|&(_, c)| c != 0.0);
    out
}

fn row_fingerprint(kind: u8, terms: &[(usize, f64)], rhs: f64) -> u64 {
    let mut h = DefaultHasher::new();
    kind.hash(&mut h);
    for &(i, c) in terms {
        i.hash(&mut h);
        c.to_bits().hash(&mut h);
    }
    rhs.to_bits().hash(&mut h);
    h.finish()
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register `len` new variables under `name` with a common lower bound
    /// (`None` leaves them free).
    pub fn add_block(&mut self, name: &str, len: usize, lower: Option<f64>) -> VarRef {
        let r = VarRef { offset: self.lower.len(), len };
        self.blocks.push((name.to_string(), r));
        self.lower.extend(std::iter::repeat(lower).take(len));
        self.obj.extend(std::iter::repeat(0.0).take(len));
        r
    }

    pub fn n_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn block(&self, name: &str) -> Option<VarRef> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, r)| r)
    }

    pub fn lower_bound(&self, idx: usize) -> Option<f64> {
        self.lower[idx]
    }

    /// Add `coeff` to the objective coefficient of variable `idx`.
    pub fn add_obj(&mut self, idx: usize, coeff: f64) {
        self.obj[idx] += coeff;
    }

    pub fn objective_coeffs(&self) -> &[f64] {
        &self.obj
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        self.obj.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Add `terms . x = rhs`; exact duplicates are dropped.
    pub fn add_eq(&mut self, tag: &str, terms: Vec<(usize, f64)>, rhs: f64) {
        let terms = canonical_terms(terms);
        assert!(!terms.is_empty(), "empty equality row `{tag}`");
        if self.seen_rows.insert(row_fingerprint(0, &terms, rhs)) {
            self.eq_rows.push(LinRow { terms, rhs, tag: tag.to_string() });
        }
    }

    /// Add `terms . x <= rhs`; exact duplicates are dropped.
    pub fn add_le(&mut self, tag: &str, terms: Vec<(usize, f64)>, rhs: f64) {
        let terms = canonical_terms(terms);
        assert!(!terms.is_empty(), "empty inequality row `{tag}`");
        if self.seen_rows.insert(row_fingerprint(1, &terms, rhs)) {
            self.le_rows.push(LinRow { terms, rhs, tag: tag.to_string() });
        }
    }

    /// Pin variable `idx` to a constant.
    pub fn fix(&mut self, tag: &str, idx: usize, value: f64) {
        self.add_eq(tag, vec![(idx, 1.0)], value);
    }

    /// Add `ln(arg_terms . x + arg_const) >= rhs_terms . x + rhs_const`.
    pub fn add_log(
        &mut self,
        tag: &str,
        arg_terms: Vec<(usize, f64)>,
        arg_const: f64,
        rhs_terms: Vec<(usize, f64)>,
        rhs_const: f64,
    ) {
        assert!(
            arg_const > 0.0,
            "log block `{tag}` needs a strictly positive constant in its argument"
        );
        self.log_blocks.push(LogBlock {
            arg_terms: canonical_terms(arg_terms),
            arg_const,
            rhs_terms: canonical_terms(rhs_terms),
            rhs_const,
            tag: tag.to_string(),
        });
    }

    /// Linear rows (equalities then inequalities) whose tag starts with `prefix`.
    pub fn rows_tagged<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a LinRow> {
        self.eq_rows
            .iter()
            .chain(self.le_rows.iter())
            .filter(move |r| r.tag.starts_with(prefix))
    }

    /// Log blocks whose tag starts with `prefix`.
    pub fn logs_tagged<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a LogBlock> {
        self.log_blocks.iter().filter(move |b| b.tag.starts_with(prefix))
    }

    /// Self-describing text dump of the whole program.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# conic program: {} vars, {} eq, {} le, {} log", self.n_vars(), self.eq_rows.len(), self.le_rows.len(), self.log_blocks.len());
        for (name, r) in &self.blocks {
            let lb = match self.lower[r.offset] {
                Some(v) => format!("{v}"),
                None => "free".to_string(),
            };
            let _ = writeln!(s, "block {name} offset={} len={} lb={lb}", r.offset, r.len);
        }
        let _ = write!(s, "min");
        for (i, c) in self.obj.iter().enumerate() {
            if *c != 0.0 {
                let _ = write!(s, " {c:+}*x{i}");
            }
        }
        let _ = writeln!(s);
        let fmt_terms = |terms: &[(usize, f64)]| -> String {
            terms
                .iter()
                .map(|&(i, c)| format!("{c:+}*x{i}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for row in &self.eq_rows {
            let _ = writeln!(s, "eq [{}] {} = {}", row.tag, fmt_terms(&row.terms), row.rhs);
        }
        for row in &self.le_rows {
            let _ = writeln!(s, "le [{}] {} <= {}", row.tag, fmt_terms(&row.terms), row.rhs);
        }
        for b in &self.log_blocks {
            let _ = writeln!(
                s,
                "log [{}] ln({} {:+}) >= {} {:+}",
                b.tag,
                fmt_terms(&b.arg_terms),
                b.arg_const,
                fmt_terms(&b.rhs_terms),
                b.rhs_const
            );
        }
        s
    }
}
