//! Cycle planner, per-subframe refinement, and benchmark allocators.
//!
//! Every optimizing planner runs the same pipeline: assemble the conic
//! subproblem around an expansion point, solve, re-expand, repeat until the
//! objective settles ([`sca_minimize`]); then round the relaxed powers into
//! associations, repair any structural damage the rounding did, re-optimize
//! the powers with the associations pinned (polish), and finally top up
//! per-flow D powers so planned demand is actually met at the planning
//! channels. Benchmarks that skip the conic solve ([`greedy`], [`heuristic`])
//! produce the same [`CycleDecision`] shape from closed-form rules.

mod greedy;
mod joint;
mod reference;
mod refine;

pub use greedy::{greedy, heuristic};
pub use joint::{dt_joint_ra, fia};
pub use reference::{node_rates, reference, NodeRates};
pub use refine::{rt_refine_cycle, step_queues_subframe, RefineRecord, RefinedCycle, SubframeStep};

use ndarray::Array2;

use crate::channel::ChannelSet;
use crate::conic::{
    assemble_joint, initial_point_masked, solve, Binding, ConicProgram, JointInputs, JointLayout,
    SolveStatus,
};
use crate::grid::{check_bwp_feasible, BwpPlan, BwpViolation, Dims, GridConfig, Service};
use crate::phy::{ici_power, rate_d_subframe, sinr_d, AllocationState, PhyParams};
use crate::queueing::{
    steer_arrivals, CycleArrivals, QueueCaps, QueueError, QueueState, SteeringWeights,
    TrafficTrace,
};
use crate::sca::{self, ExpansionPoint};

/// Tuning knobs shared by every optimizing planner.
#[derive(Clone, Copy, Debug)]
pub struct PlannerConfig {
    /// Relative objective change that counts as converged.
    pub sca_tol: f64,
    /// Iteration cap for the cycle-wide solve.
    pub max_sca_iters: usize,
    /// Robustness scaling on predicted cross-system interference during
    /// refinement.
    pub kappa: f64,
    /// D subchannels granted to the non-optimizing benchmarks.
    pub n_sc_d: usize,
    /// Absolute tolerance of the water-filling bisection (watts).
    pub eps_pow: f64,
    /// Smoothing width of the power-presence surrogate.
    pub eps: f64,
    /// Interior-point termination tolerance.
    pub solve_tol: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            sca_tol: 1e-4,
            max_sca_iters: 60,
            kappa: 1.0,
            n_sc_d: 1,
            eps_pow: 1e-9,
            eps: 1e-4,
            solve_tol: 1e-9,
        }
    }
}

/// Borrowed problem description every planner entry point takes.
#[derive(Clone, Copy)]
pub struct PlanContext<'a> {
    pub cfg: &'a GridConfig,
    pub dims: &'a Dims,
    pub phy: &'a PhyParams,
    pub pcfg: &'a PlannerConfig,
}

/// One accepted iterate of a successive convex solve.
#[derive(Clone, Copy, Debug)]
pub struct IterateRecord {
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_max: f64,
    pub solver_iterations: u32,
}

/// Final per-cycle output of a planner.
#[derive(Clone, Debug)]
pub struct CycleDecision {
    pub bwp: BwpPlan,
    pub steering: SteeringWeights,
    pub alloc: AllocationState,
    /// Objective trace of the cycle-wide solve, one record per iterate.
    pub iterates: Vec<IterateRecord>,
    /// Records of the fixed-association power re-optimization.
    pub polish_iterates: Vec<IterateRecord>,
    pub converged: bool,
    /// False when the polish solve failed and the rounded relaxed powers
    /// were kept instead.
    pub polish_ok: bool,
    /// Whether queue caps had to be penalized instead of enforced.
    pub soft_caps: bool,
    /// Weighted mean queue level the final solve planned for, in Mbit.
    /// NaN for benchmarks that never solve a program.
    pub planned_queue_mbit: f64,
    /// Human-readable notes of every repair the recovery pipeline applied.
    pub repairs: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error("{stage}: no optimal iterate ({detail})")]
    Infeasible {
        stage: &'static str,
        status: SolveStatus,
        detail: String,
    },
    #[error(transparent)]
    Steering(#[from] QueueError),
}

/// Iteration cap of the fixed-association polish solve.
pub const POLISH_ITERS: usize = 3;
/// Association threshold as a fraction of the server power budget.
pub(crate) const RECOVERY_FRAC: f64 = 1e-6;
/// Sweeps of the D power top-up (interference re-couples the cells).
pub(crate) const TOPUP_ROUNDS: usize = 8;
/// Relative margin kept above the SINR floor and the demand line.
pub(crate) const RATE_MARGIN: f64 = 1e-9;

/// Outcome of [`sca_minimize`]: the best accepted iterate and its context.
pub(crate) struct ScaOutcome {
    pub x: Vec<f64>,
    pub layout: JointLayout,
    pub iterates: Vec<IterateRecord>,
    pub converged: bool,
    pub soft_caps: bool,
}

/// Successively re-assemble and solve a convex restriction around the last
/// iterate until the objective settles.
///
/// The surrogates are conservative, so once any iterate solves, every later
/// program still contains it; a later solver failure therefore keeps the best
/// solution so far instead of erroring. A first-iterate failure under hard
/// queue caps is retried once with penalized caps (backlog above cap is
/// infeasible no matter the allocation); failure even then is reported.
pub(crate) fn sca_minimize(
    mut point: ExpansionPoint,
    soft0: bool,
    max_iters: usize,
    pcfg: &PlannerConfig,
    stage: &'static str,
    mut assemble: impl FnMut(&ExpansionPoint, bool) -> (ConicProgram, JointLayout),
) -> Result<ScaOutcome, PlannerError> {
    assert!(max_iters > 0, "sca_minimize needs at least one iteration");
    let mut soft = soft0;
    let mut iterates = Vec::new();
    let mut best: Option<(Vec<f64>, JointLayout, f64)> = None;
    let mut converged = false;
    for i in 0..max_iters {
        let (prog, mut lay) = assemble(&point, soft);
        let mut sol = solve(&prog, pcfg.solve_tol);
        if !sol.status.is_optimal() && i == 0 && !soft {
            soft = true;
            let (prog2, lay2) = assemble(&point, true);
            sol = solve(&prog2, pcfg.solve_tol);
            lay = lay2;
        }
        if !sol.status.is_optimal() {
            if best.is_none() {
                return Err(PlannerError::Infeasible {
                    stage,
                    status: sol.status,
                    detail: format!(
                        "solver status {:?} after {} iterations, kkt {:.3e}",
                        sol.status,
                        sol.iterations,
                        sol.kkt.max()
                    ),
                });
            }
            break;
        }
        iterates.push(IterateRecord {
            objective: sol.objective,
            status: sol.status,
            kkt_max: sol.kkt.max(),
            solver_iterations: sol.iterations,
        });
        point = lay.to_expansion(&sol.x, point);
        let prev = best.as_ref().map(|(_, _, f)| *f);
        best = Some((sol.x, lay, sol.objective));
        if let Some(fp) = prev {
            if (fp - sol.objective).abs() <= pcfg.sca_tol * fp.abs().max(1.0) {
                converged = true;
                break;
            }
        }
    }
    let (x, layout, _) = best.expect("first failure returns Err above");
    Ok(ScaOutcome {
        x,
        layout,
        iterates,
        converged,
        soft_caps: soft,
    })
}

/// Expansion point evaluated exactly at an integral allocation.
///
/// Interference loads are the true ones at the given powers (scaled by
/// `kappa` across the TN/satellite boundary) and the presence surrogate is
/// summed exactly, so a solve warm-started here linearizes around the
/// allocation it is asked to improve.
pub(crate) fn exact_expansion(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    dims: &Dims,
    eps: f64,
    drop_interference: bool,
    kappa: f64,
) -> ExpansionPoint {
    let mut pt = ExpansionPoint::zeros(cfg, dims);
    pt.p_d = alloc.p_d.clone();
    pt.p_m = alloc.p_m.clone();
    pt.p0_m = alloc.p0_m.clone();
    pt.p0_s = alloc.p0_s.clone();
    if !drop_interference {
        for ((l, k, v, n), e) in pt.eta_d.indexed_iter_mut() {
            let fr = cfg.frame_of_rb(Service::D, n);
            let mut acc = 0.0;
            for i in 0..dims.n_aps {
                if i == l {
                    continue;
                }
                let g = ch.tn_gain(Service::D, fr, i, k, v) / ch.noise_w.d;
                for j in 0..dims.flows.d {
                    acc += g * alloc.p_d[[i, j, v, n]];
                }
            }
            *e = acc.ln_1p();
        }
        for ((l, k, v, n), e) in pt.eta_m_tn.indexed_iter_mut() {
            let fr = cfg.frame_of_rb(Service::M, n);
            let mut acc = 0.0;
            for i in 0..dims.n_aps {
                if i == l {
                    continue;
                }
                let g = ch.tn_gain(Service::M, fr, i, k, v) / ch.noise_w.m;
                for j in 0..dims.flows.m {
                    acc += g * alloc.p_m[[i, j, v, n]];
                }
            }
            let g0 = kappa * ch.sat_gain(Service::M, fr, k, v) / ch.noise_w.m;
            for j in 0..dims.flows.m {
                acc += g0 * alloc.p0_m[[j, v, n]];
            }
            *e = acc.ln_1p();
        }
        for ((k, v, n), e) in pt.eta_m_sat.indexed_iter_mut() {
            let fr = cfg.frame_of_rb(Service::M, n);
            let mut acc = 0.0;
            for i in 0..dims.n_aps {
                let g = kappa * ch.tn_gain(Service::M, fr, i, k, v) / ch.noise_w.m;
                for j in 0..dims.flows.m {
                    acc += g * alloc.p_m[[i, j, v, n]];
                }
            }
            *e = acc.ln_1p();
        }
    }
    let nd_sf = cfg.rbs_per_subframe(Service::D);
    let vd = alloc.p_d.dim().2;
    for ((l, k, sf), z) in pt.zeta_d.indexed_iter_mut() {
        let mut acc = 0.0;
        for v in 0..vd {
            for n in sf * nd_sf..(sf + 1) * nd_sf {
                acc += sca::f_apx(alloc.p_d[[l, k, v, n]], eps);
            }
        }
        *z = acc.max(1e-9);
    }
    pt
}

/// Clean raw steering fractions into valid weights: D columns renormalized to
/// sum to one (uniform when a column is all zero), M columns clamped to [0, 1]
/// and scaled down when a column exceeds one. Solver rows hold these only to
/// interior-point tolerance, which is looser than the validation tolerance.
pub(crate) fn normalized_steering(
    raw: (Array2<f64>, Array2<f64>),
    dims: &Dims,
) -> SteeringWeights {
    let (mut d, mut m) = raw;
    for k in 0..d.dim().1 {
        let sum: f64 = d.column(k).sum();
        if sum > 0.0 {
            d.column_mut(k).mapv_inplace(|x| (x / sum).clamp(0.0, 1.0));
        } else {
            d.column_mut(k).fill(1.0 / dims.n_aps.max(1) as f64);
        }
    }
    for k in 0..m.dim().1 {
        let sum: f64 = m.column(k).sum();
        if sum > 1.0 {
            m.column_mut(k).mapv_inplace(|x| x / sum);
        }
        m.column_mut(k).mapv_inplace(|x| x.clamp(0.0, 1.0));
    }
    SteeringWeights { d, m }
}

/// Transmit power of AP `l` in finest slot `t` (D powers at `t` plus M powers
/// of the M RB time covering `t`).
pub(crate) fn ap_slot_power(alloc: &AllocationState, cfg: &GridConfig, l: usize, t: usize) -> f64 {
    let rm = cfg.rbs_per_subframe(Service::D) / cfg.rbs_per_subframe(Service::M);
    let (_, kd, vd, _) = alloc.p_d.dim();
    let (_, km, vm, _) = alloc.p_m.dim();
    let mut total = 0.0;
    for k in 0..kd {
        for v in 0..vd {
            total += alloc.p_d[[l, k, v, t]];
        }
    }
    for k in 0..km {
        for v in 0..vm {
            total += alloc.p_m[[l, k, v, t / rm]];
        }
    }
    total
}

/// Enforce the exclusivity structure on rounded associations, keeping the
/// highest-power claimant of every contested resource. With `sat_frozen` the
/// satellite side is immutable, so satellite claims always win and satellite
/// conflicts are left untouched (the caller guarantees there are none).
pub(crate) fn repair_exclusivity(
    alloc: &mut AllocationState,
    sat_frozen: bool,
    repairs: &mut Vec<String>,
) {
    let (n_aps, kd, vd, nd) = alloc.a_d.dim();
    let (_, km, vm, nm) = alloc.a_m.dim();
    let (ks, vs, ns) = alloc.b_s.dim();
    let mut dropped = 0usize;

    // One D flow per AP RB.
    for l in 0..n_aps {
        for v in 0..vd {
            for n in 0..nd {
                let claimants: Vec<usize> =
                    (0..kd).filter(|&k| alloc.a_d[[l, k, v, n]] != 0).collect();
                if claimants.len() > 1 {
                    let keep = claimants.iter().copied().fold(claimants[0], |b, k| {
                        if alloc.p_d[[l, k, v, n]] > alloc.p_d[[l, b, v, n]] {
                            k
                        } else {
                            b
                        }
                    });
                    for k in claimants {
                        if k != keep {
                            alloc.a_d[[l, k, v, n]] = 0;
                            alloc.p_d[[l, k, v, n]] = 0.0;
                            dropped += 1;
                        }
                    }
                }
            }
        }
    }
    // One AP per D flow RB.
    for k in 0..kd {
        for v in 0..vd {
            for n in 0..nd {
                let claimants: Vec<usize> =
                    (0..n_aps).filter(|&l| alloc.a_d[[l, k, v, n]] != 0).collect();
                if claimants.len() > 1 {
                    let keep = claimants.iter().copied().fold(claimants[0], |b, l| {
                        if alloc.p_d[[l, k, v, n]] > alloc.p_d[[b, k, v, n]] {
                            l
                        } else {
                            b
                        }
                    });
                    for l in claimants {
                        if l != keep {
                            alloc.a_d[[l, k, v, n]] = 0;
                            alloc.p_d[[l, k, v, n]] = 0.0;
                            dropped += 1;
                        }
                    }
                }
            }
        }
    }
    // One M flow per AP RB.
    for l in 0..n_aps {
        for v in 0..vm {
            for n in 0..nm {
                let claimants: Vec<usize> =
                    (0..km).filter(|&k| alloc.a_m[[l, k, v, n]] != 0).collect();
                if claimants.len() > 1 {
                    let keep = claimants.iter().copied().fold(claimants[0], |b, k| {
                        if alloc.p_m[[l, k, v, n]] > alloc.p_m[[l, b, v, n]] {
                            k
                        } else {
                            b
                        }
                    });
                    for k in claimants {
                        if k != keep {
                            alloc.a_m[[l, k, v, n]] = 0;
                            alloc.p_m[[l, k, v, n]] = 0.0;
                            dropped += 1;
                        }
                    }
                }
            }
        }
    }
    if !sat_frozen {
        // One M flow per satellite RB.
        for v in 0..vm {
            for n in 0..nm {
                let claimants: Vec<usize> =
                    (0..km).filter(|&k| alloc.b_m[[k, v, n]] != 0).collect();
                if claimants.len() > 1 {
                    let keep = claimants.iter().copied().fold(claimants[0], |b, k| {
                        if alloc.p0_m[[k, v, n]] > alloc.p0_m[[b, v, n]] {
                            k
                        } else {
                            b
                        }
                    });
                    for k in claimants {
                        if k != keep {
                            alloc.b_m[[k, v, n]] = 0;
                            alloc.p0_m[[k, v, n]] = 0.0;
                            dropped += 1;
                        }
                    }
                }
            }
        }
        // One S flow per satellite RB.
        for v in 0..vs {
            for n in 0..ns {
                let claimants: Vec<usize> =
                    (0..ks).filter(|&k| alloc.b_s[[k, v, n]] != 0).collect();
                if claimants.len() > 1 {
                    let keep = claimants.iter().copied().fold(claimants[0], |b, k| {
                        if alloc.p0_s[[k, v, n]] > alloc.p0_s[[b, v, n]] {
                            k
                        } else {
                            b
                        }
                    });
                    for k in claimants {
                        if k != keep {
                            alloc.b_s[[k, v, n]] = 0;
                            alloc.p0_s[[k, v, n]] = 0.0;
                            dropped += 1;
                        }
                    }
                }
            }
        }
    }
    // An M flow is served by either the network or the satellite on one RB.
    for k in 0..km {
        for v in 0..vm {
            for n in 0..nm {
                if alloc.b_m[[k, v, n]] == 0 {
                    continue;
                }
                let tn_aps: Vec<usize> =
                    (0..n_aps).filter(|&l| alloc.a_m[[l, k, v, n]] != 0).collect();
                if tn_aps.is_empty() {
                    continue;
                }
                let tn_best = tn_aps
                    .iter()
                    .map(|&l| alloc.p_m[[l, k, v, n]])
                    .fold(0.0f64, f64::max);
                if sat_frozen || alloc.p0_m[[k, v, n]] >= tn_best {
                    for l in tn_aps {
                        alloc.a_m[[l, k, v, n]] = 0;
                        alloc.p_m[[l, k, v, n]] = 0.0;
                        dropped += 1;
                    }
                } else {
                    alloc.b_m[[k, v, n]] = 0;
                    alloc.p0_m[[k, v, n]] = 0.0;
                    dropped += 1;
                }
            }
        }
    }
    if dropped > 0 {
        repairs.push(format!("exclusivity: dropped {dropped} contested claims"));
    }
}

/// Derive the band plan from the associations and deactivate lanes until the
/// pairwise activation rules and the bandwidth budget hold. Deactivation only
/// ever shrinks the plan, so the loop terminates with a feasible plan.
pub(crate) fn repair_bwp(alloc: &mut AllocationState, cfg: &GridConfig, repairs: &mut Vec<String>) {
    alloc.bwp = sca::recover_bwp(&alloc.a_d, &alloc.a_m, &alloc.b_m, &alloc.b_s, cfg);
    loop {
        let violations = check_bwp_feasible(&alloc.bwp, cfg)
            .expect("plan vectors are sized from the same grid");
        if violations.is_empty() {
            return;
        }
        let mut implicated: Vec<(Service, usize)> = Vec::new();
        for viol in &violations {
            match *viol {
                BwpViolation::DBlocksM { v_d, v_m } => {
                    implicated.push((Service::D, v_d - 1));
                    implicated.push((Service::M, v_m - 1));
                }
                BwpViolation::DBlocksS { v_d, v_s } => {
                    implicated.push((Service::D, v_d - 1));
                    implicated.push((Service::S, v_s - 1));
                }
                BwpViolation::MBlocksS { v_m, v_s } => {
                    implicated.push((Service::M, v_m - 1));
                    implicated.push((Service::S, v_s - 1));
                }
                BwpViolation::Bandwidth { .. } => {
                    for (x, active) in [
                        (Service::D, &alloc.bwp.active.d),
                        (Service::M, &alloc.bwp.active.m),
                        (Service::S, &alloc.bwp.active.s),
                    ] {
                        for (v, &on) in active.iter().enumerate() {
                            if on {
                                implicated.push((x, v));
                            }
                        }
                    }
                }
            }
        }
        // Drop the cheapest implicated lane: lowest total power, then the
        // narrower service, then the outermost lane.
        let rank = |x: Service| match x {
            Service::S => 0,
            Service::M => 1,
            Service::D => 2,
        };
        implicated.sort_by_key(|&(x, v)| (rank(x), v));
        implicated.dedup();
        let lane_power = |x: Service, v: usize| -> f64 {
            match x {
                Service::D => alloc
                    .p_d
                    .indexed_iter()
                    .filter(|((_, _, vv, _), _)| *vv == v)
                    .map(|(_, p)| *p)
                    .sum(),
                Service::M => {
                    let tn: f64 = alloc
                        .p_m
                        .indexed_iter()
                        .filter(|((_, _, vv, _), _)| *vv == v)
                        .map(|(_, p)| *p)
                        .sum();
                    let sat: f64 = alloc
                        .p0_m
                        .indexed_iter()
                        .filter(|((_, vv, _), _)| *vv == v)
                        .map(|(_, p)| *p)
                        .sum();
                    tn + sat
                }
                Service::S => alloc
                    .p0_s
                    .indexed_iter()
                    .filter(|((_, vv, _), _)| *vv == v)
                    .map(|(_, p)| *p)
                    .sum(),
            }
        };
        let &(x, v) = implicated
            .iter()
            .min_by(|&&(xa, va), &&(xb, vb)| {
                lane_power(xa, va)
                    .partial_cmp(&lane_power(xb, vb))
                    .unwrap()
                    .then(rank(xa).cmp(&rank(xb)))
                    .then(vb.cmp(&va))
            })
            .expect("violations imply at least one implicated lane");
        *alloc.bwp.active.get_mut(x).get_mut(v).unwrap() = false;
        match x {
            Service::D => {
                for l in 0..alloc.a_d.dim().0 {
                    for k in 0..alloc.a_d.dim().1 {
                        for n in 0..alloc.a_d.dim().3 {
                            alloc.a_d[[l, k, v, n]] = 0;
                            alloc.p_d[[l, k, v, n]] = 0.0;
                        }
                    }
                }
            }
            Service::M => {
                for l in 0..alloc.a_m.dim().0 {
                    for k in 0..alloc.a_m.dim().1 {
                        for n in 0..alloc.a_m.dim().3 {
                            alloc.a_m[[l, k, v, n]] = 0;
                            alloc.p_m[[l, k, v, n]] = 0.0;
                        }
                    }
                }
                for k in 0..alloc.b_m.dim().0 {
                    for n in 0..alloc.b_m.dim().2 {
                        alloc.b_m[[k, v, n]] = 0;
                        alloc.p0_m[[k, v, n]] = 0.0;
                    }
                }
            }
            Service::S => {
                for k in 0..alloc.b_s.dim().0 {
                    for n in 0..alloc.b_s.dim().2 {
                        alloc.b_s[[k, v, n]] = 0;
                        alloc.p0_s[[k, v, n]] = 0.0;
                    }
                }
            }
        }
        repairs.push(format!("band plan: deactivated {x:?} lane {}", v + 1));
    }
}

/// Give every D cell `(l, k, sf)` with steered demand at least one assigned
/// RB. Prefers the strongest free RB on an active lane; failing that, steals
/// the weakest RB the AP holds in the subframe. The starting power targets
/// the SINR floor against current interference, clamped to slot headroom.
pub(crate) fn repair_d_coverage(
    alloc: &mut AllocationState,
    arrivals: &CycleArrivals,
    ch: &ChannelSet,
    cfg: &GridConfig,
    phy: &PhyParams,
    sfs: &[usize],
    repairs: &mut Vec<String>,
) {
    let (n_aps, kd, vd, _) = alloc.a_d.dim();
    let nd_sf = cfg.rbs_per_subframe(Service::D);
    for &sf in sfs {
        for l in 0..n_aps {
            for k in 0..kd {
                if arrivals.d_tn[[l, k, sf]] <= 0.0 {
                    continue;
                }
                let rbs = || sf * nd_sf..(sf + 1) * nd_sf;
                let covered =
                    (0..vd).any(|v| rbs().any(|n| alloc.a_d[[l, k, v, n]] != 0));
                if covered {
                    continue;
                }
                let fr = cfg.frame_of_rb(Service::D, sf * nd_sf);
                // Strongest lane with an RB free for both this AP and flow.
                let mut best: Option<(f64, usize, usize)> = None;
                for v in 0..vd {
                    if !alloc.bwp.active.d[v] {
                        continue;
                    }
                    let g = ch.tn_gain(Service::D, fr, l, k, v);
                    for n in rbs() {
                        let ap_free = (0..kd).all(|j| alloc.a_d[[l, j, v, n]] == 0);
                        let flow_free = (0..n_aps).all(|i| alloc.a_d[[i, k, v, n]] == 0);
                        if ap_free && flow_free {
                            if best.map_or(true, |(bg, _, _)| g > bg) {
                                best = Some((g, v, n));
                            }
                            break;
                        }
                    }
                }
                let (v, n) = match best {
                    Some((_, v, n)) => {
                        repairs.push(format!(
                            "coverage: assigned free lane {} rb {n} to d flow {k} at ap {l}",
                            v + 1
                        ));
                        (v, n)
                    }
                    None => {
                        let mut worst: Option<(f64, usize, usize, usize)> = None;
                        for v in 0..vd {
                            for n in rbs() {
                                for j in 0..kd {
                                    if j == k || alloc.a_d[[l, j, v, n]] == 0 {
                                        continue;
                                    }
                                    let elsewhere =
                                        (0..n_aps).any(|i| i != l && alloc.a_d[[i, k, v, n]] != 0);
                                    if elsewhere {
                                        continue;
                                    }
                                    let p = alloc.p_d[[l, j, v, n]];
                                    if worst.map_or(true, |(wp, _, _, _)| p < wp) {
                                        worst = Some((p, v, n, j));
                                    }
                                }
                            }
                        }
                        match worst {
                            Some((_, v, n, j)) => {
                                alloc.a_d[[l, j, v, n]] = 0;
                                alloc.p_d[[l, j, v, n]] = 0.0;
                                repairs.push(format!(
                                    "coverage: reassigned lane {} rb {n} at ap {l} from d flow {j} to {k}",
                                    v + 1
                                ));
                                (v, n)
                            }
                            None => {
                                repairs.push(format!(
                                    "coverage: d flow {k} at ap {l} sf {sf} has demand but no assignable RB"
                                ));
                                continue;
                            }
                        }
                    }
                };
                alloc.a_d[[l, k, v, n]] = 1;
                let g = ch.tn_gain(Service::D, fr, l, k, v);
                let ici = ici_power(alloc, ch, cfg, Service::D, l, k, v, n);
                let needed = if g > 0.0 {
                    phy.gamma0_d * 1.05 * (ici + ch.noise_w.d) / g
                } else {
                    0.0
                };
                let slack = (phy.p_ap_max_w - ap_slot_power(alloc, cfg, l, n)).max(0.0);
                alloc.p_d[[l, k, v, n]] = needed.min(slack);
            }
        }
    }
}

/// Drop associations whose polished power fell below the recovery threshold.
/// A D cell with demand keeps its strongest RB even when weak, so coverage
/// survives the sweep. `d_sfs` and `m_slots` scope the sweep; satellite
/// tensors are swept whole unless frozen.
pub(crate) fn cleanup_associations(
    alloc: &mut AllocationState,
    arrivals: &CycleArrivals,
    phy: &PhyParams,
    cfg: &GridConfig,
    sat_frozen: bool,
    d_sfs: &[usize],
    m_slots: &[usize],
    repairs: &mut Vec<String>,
) {
    let thr_tn = RECOVERY_FRAC * phy.p_ap_max_w;
    let thr_sat = RECOVERY_FRAC * phy.p_sat_max_w;
    let nd_sf = cfg.rbs_per_subframe(Service::D);
    let (n_aps, kd, vd, _) = alloc.a_d.dim();
    let (_, km, vm, _) = alloc.a_m.dim();
    let (ks, vs, ns) = alloc.b_s.dim();
    let mut dropped = 0usize;
    for &sf in d_sfs {
        for l in 0..n_aps {
            for k in 0..kd {
                let mut cell: Vec<(usize, usize)> = Vec::new();
                for v in 0..vd {
                    for n in sf * nd_sf..(sf + 1) * nd_sf {
                        if alloc.a_d[[l, k, v, n]] != 0 {
                            cell.push((v, n));
                        }
                    }
                }
                if cell.is_empty() {
                    continue;
                }
                let any_strong = cell.iter().any(|&(v, n)| alloc.p_d[[l, k, v, n]] >= thr_tn);
                let keep_weak = if !any_strong && arrivals.d_tn[[l, k, sf]] > 0.0 {
                    cell.iter()
                        .copied()
                        .max_by(|&(va, na), &(vb, nb)| {
                            alloc.p_d[[l, k, va, na]]
                                .partial_cmp(&alloc.p_d[[l, k, vb, nb]])
                                .unwrap()
                        })
                } else {
                    None
                };
                for (v, n) in cell {
                    if alloc.p_d[[l, k, v, n]] < thr_tn && Some((v, n)) != keep_weak {
                        alloc.a_d[[l, k, v, n]] = 0;
                        alloc.p_d[[l, k, v, n]] = 0.0;
                        dropped += 1;
                    }
                }
            }
        }
    }
    for &n in m_slots {
        for l in 0..n_aps {
            for k in 0..km {
                for v in 0..vm {
                    if alloc.a_m[[l, k, v, n]] != 0 && alloc.p_m[[l, k, v, n]] < thr_tn {
                        alloc.a_m[[l, k, v, n]] = 0;
                        alloc.p_m[[l, k, v, n]] = 0.0;
                        dropped += 1;
                    }
                }
            }
        }
    }
    if !sat_frozen {
        for k in 0..km {
            for v in 0..vm {
                for n in 0..alloc.b_m.dim().2 {
                    if alloc.b_m[[k, v, n]] != 0 && alloc.p0_m[[k, v, n]] < thr_sat {
                        alloc.b_m[[k, v, n]] = 0;
                        alloc.p0_m[[k, v, n]] = 0.0;
                        dropped += 1;
                    }
                }
            }
        }
        for k in 0..ks {
            for v in 0..vs {
                for n in 0..ns {
                    if alloc.b_s[[k, v, n]] != 0 && alloc.p0_s[[k, v, n]] < thr_sat {
                        alloc.b_s[[k, v, n]] = 0;
                        alloc.p0_s[[k, v, n]] = 0.0;
                        dropped += 1;
                    }
                }
            }
        }
    }
    if dropped > 0 {
        repairs.push(format!("cleanup: dropped {dropped} sub-threshold associations"));
    }
}

/// Multiplicatively scale each D cell's powers until every assigned RB clears
/// the SINR floor and the cell's subframe rate covers its steered demand,
/// within slot power headroom. Scaling one cell raises interference on
/// others, so the sweep repeats until a pass changes nothing. Returns whether
/// every demand and floor held at the final powers.
pub(crate) fn topup_d(
    alloc: &mut AllocationState,
    arrivals: &CycleArrivals,
    ch: &ChannelSet,
    cfg: &GridConfig,
    phy: &PhyParams,
    sfs: &[usize],
    repairs: &mut Vec<String>,
) -> bool {
    let nd_sf = cfg.rbs_per_subframe(Service::D);
    let t_d = cfg.rb_duration_s(Service::D);
    let w = cfg.rb_bandwidth_hz(Service::D);
    let chi = phy.chi_d(cfg);
    let floor = phy.gamma0_d * (1.0 + RATE_MARGIN);
    let (n_aps, kd, vd, _) = alloc.a_d.dim();
    for _round in 0..TOPUP_ROUNDS {
        let mut changed = false;
        for &sf in sfs {
            for l in 0..n_aps {
                for k in 0..kd {
                    let mut cell: Vec<(usize, usize)> = Vec::new();
                    for v in 0..vd {
                        for n in sf * nd_sf..(sf + 1) * nd_sf {
                            if alloc.a_d[[l, k, v, n]] != 0 {
                                cell.push((v, n));
                            }
                        }
                    }
                    if cell.is_empty() {
                        continue;
                    }
                    let gammas: Vec<f64> = cell
                        .iter()
                        .map(|&(v, n)| sinr_d(alloc, ch, cfg, l, k, v, n))
                        .collect();
                    if gammas.iter().any(|&g| g <= 0.0) {
                        continue;
                    }
                    let min_g = gammas.iter().copied().fold(f64::INFINITY, f64::min);
                    // Own scaling moves only this cell's numerators, so the
                    // scaled rate is exact in s.
                    let rate = |s: f64| {
                        let sum: f64 = gammas.iter().map(|&g| (1.0 + s * g).log2()).sum();
                        (w * sum - chi * (cell.len() as f64).sqrt()).max(0.0)
                    };
                    let mut s = (floor / min_g).max(1.0);
                    let demand = arrivals.d_tn[[l, k, sf]];
                    if demand > 0.0 && t_d * rate(s) < demand {
                        let mut lo = s;
                        let mut hi = s;
                        let mut grew = 0;
                        while t_d * rate(hi) < demand && grew < 200 {
                            hi *= 2.0;
                            grew += 1;
                        }
                        if t_d * rate(hi) >= demand {
                            for _ in 0..200 {
                                let mid = 0.5 * (lo + hi);
                                if t_d * rate(mid) >= demand {
                                    hi = mid;
                                } else {
                                    lo = mid;
                                }
                                if hi - lo <= 1e-12 * hi {
                                    break;
                                }
                            }
                        }
                        s = hi;
                    }
                    if s > 1.0 {
                        let mut s_max = f64::INFINITY;
                        let mut slots: Vec<usize> = cell.iter().map(|&(_, n)| n).collect();
                        slots.sort_unstable();
                        slots.dedup();
                        for &t in &slots {
                            let mass: f64 = cell
                                .iter()
                                .filter(|&&(_, n)| n == t)
                                .map(|&(v, n)| alloc.p_d[[l, k, v, n]])
                                .sum();
                            if mass <= 0.0 {
                                continue;
                            }
                            let slack =
                                (phy.p_ap_max_w - ap_slot_power(alloc, cfg, l, t)).max(0.0);
                            s_max = s_max.min(1.0 + slack / mass);
                        }
                        s = s.min(s_max);
                    }
                    if s > 1.0 + 1e-15 {
                        for &(v, n) in &cell {
                            alloc.p_d[[l, k, v, n]] *= s;
                        }
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut deficits = 0usize;
    for &sf in sfs {
        for l in 0..n_aps {
            for k in 0..kd {
                let demand = arrivals.d_tn[[l, k, sf]];
                let out = rate_d_subframe(alloc, ch, cfg, phy, l, k, sf);
                if out.rb_count > 0 && !out.sinr_floor_ok {
                    deficits += 1;
                    continue;
                }
                if demand > 0.0 {
                    let served = t_d * out.rate_bps;
                    if out.rb_count == 0 || served + RATE_MARGIN * (1.0 + demand) < demand {
                        deficits += 1;
                    }
                }
            }
        }
    }
    if deficits > 0 {
        repairs.push(format!(
            "top-up: {deficits} cells below demand or SINR floor at planning channels"
        ));
    }
    deficits == 0
}

/// Inputs of one cycle-wide planning solve.
pub(crate) struct JointSpec<'a> {
    pub channels: &'a ChannelSet,
    pub traffic: &'a TrafficTrace,
    pub queues: &'a QueueState,
    pub caps: &'a QueueCaps,
    pub drop_interference: bool,
    pub fixed_steering: Option<&'a SteeringWeights>,
    pub lane_mask: Option<&'a BwpPlan>,
    pub stage: &'static str,
}

/// Shared cycle-planning driver: successive convex solve, rounding, repairs,
/// fixed-association polish, cleanup, and demand top-up.
pub(crate) fn plan_joint(ctx: &PlanContext, spec: &JointSpec) -> Result<CycleDecision, PlannerError> {
    let (cfg, dims, phy, pcfg) = (ctx.cfg, ctx.dims, ctx.phy, ctx.pcfg);
    assert!(pcfg.sca_tol > 0.0, "sca_tol must be positive");
    assert!(pcfg.kappa >= 1.0, "interference margin cannot shrink loads");
    let point0 = initial_point_masked(cfg, dims, phy, spec.channels, pcfg.eps, spec.lane_mask);
    let relaxed = sca_minimize(
        point0,
        false,
        pcfg.max_sca_iters,
        pcfg,
        spec.stage,
        |pt, soft| {
            assemble_joint(
                pt,
                &JointInputs {
                    channels: spec.channels,
                    traffic: spec.traffic,
                    initial: spec.queues,
                    caps: spec.caps,
                    drop_interference: spec.drop_interference,
                    soft_caps: soft,
                    fixed_steering: spec.fixed_steering,
                    lane_mask: spec.lane_mask,
                    binding: Binding::Relaxed,
                },
                cfg,
                dims,
                phy,
                pcfg.eps,
            )
        },
    )?;
    let mut repairs = Vec::new();

    // Round powers into associations.
    let (mut p_d, mut p_m, mut p0_m, mut p0_s) = relaxed.layout.powers(&relaxed.x, cfg, dims);
    let a_d = sca::recover_binaries(p_d.view_mut(), RECOVERY_FRAC * phy.p_ap_max_w);
    let a_m = sca::recover_binaries(p_m.view_mut(), RECOVERY_FRAC * phy.p_ap_max_w);
    let b_m = sca::recover_binaries(p0_m.view_mut(), RECOVERY_FRAC * phy.p_sat_max_w);
    let b_s = sca::recover_binaries(p0_s.view_mut(), RECOVERY_FRAC * phy.p_sat_max_w);
    let mut alloc = AllocationState {
        p_d,
        p_m,
        p0_m,
        p0_s,
        a_d,
        a_m,
        b_m,
        b_s,
        bwp: BwpPlan::empty(cfg),
    };
    repair_exclusivity(&mut alloc, false, &mut repairs);
    match spec.lane_mask {
        Some(mask) => alloc.bwp = mask.clone(),
        None => repair_bwp(&mut alloc, cfg, &mut repairs),
    }

    let steering = match spec.fixed_steering {
        Some(w) => w.clone(),
        None => normalized_steering(relaxed.layout.omega_raw(&relaxed.x), dims),
    };
    let arrivals = steer_arrivals(spec.traffic, &steering)?;
    let dl_sfs: Vec<usize> = (0..cfg.subframes_per_cycle())
        .filter(|&sf| cfg.is_dl_subframe(sf))
        .collect();
    repair_d_coverage(&mut alloc, &arrivals, spec.channels, cfg, phy, &dl_sfs, &mut repairs);

    // Re-optimize powers with associations and steering pinned.
    let polish_pt = exact_expansion(
        &alloc,
        spec.channels,
        cfg,
        dims,
        pcfg.eps,
        spec.drop_interference,
        1.0,
    );
    let polish = sca_minimize(
        polish_pt,
        relaxed.soft_caps,
        POLISH_ITERS,
        pcfg,
        spec.stage,
        |pt, soft| {
            assemble_joint(
                pt,
                &JointInputs {
                    channels: spec.channels,
                    traffic: spec.traffic,
                    initial: spec.queues,
                    caps: spec.caps,
                    drop_interference: spec.drop_interference,
                    soft_caps: soft,
                    fixed_steering: Some(&steering),
                    lane_mask: Some(&alloc.bwp),
                    binding: Binding::Fixed(&alloc),
                },
                cfg,
                dims,
                phy,
                pcfg.eps,
            )
        },
    );
    let (polish_ok, polish_iterates, soft_caps, planned_queue_mbit) = match polish {
        Ok(out) => {
            let (pd, pm, p0m, p0s) = out.layout.powers(&out.x, cfg, dims);
            alloc.p_d = pd;
            alloc.p_m = pm;
            alloc.p0_m = p0m;
            alloc.p0_s = p0s;
            let queue = out.layout.queue_mean_mbit(&out.x);
            (true, out.iterates, out.soft_caps, queue)
        }
        Err(err) => {
            repairs.push(format!("polish failed, keeping rounded powers ({err})"));
            (
                false,
                Vec::new(),
                relaxed.soft_caps,
                relaxed.layout.queue_mean_mbit(&relaxed.x),
            )
        }
    };

    let m_slots: Vec<usize> = (0..cfg.rb_slots_per_cycle(Service::M)).collect();
    cleanup_associations(
        &mut alloc,
        &arrivals,
        phy,
        cfg,
        false,
        &dl_sfs,
        &m_slots,
        &mut repairs,
    );
    if spec.lane_mask.is_none() {
        // Cleanup may have emptied lanes; shrink the plan to what is used.
        alloc.bwp = sca::recover_bwp(&alloc.a_d, &alloc.a_m, &alloc.b_m, &alloc.b_s, cfg);
    }
    topup_d(&mut alloc, &arrivals, spec.channels, cfg, phy, &dl_sfs, &mut repairs);

    Ok(CycleDecision {
        bwp: alloc.bwp.clone(),
        steering,
        alloc,
        iterates: relaxed.iterates,
        polish_iterates,
        converged: relaxed.converged,
        polish_ok,
        soft_caps,
        planned_queue_mbit,
        repairs,
    })
}

/// Header of the per-cycle decision log, including how the partitioned
/// benchmark's published description was read where it is ambiguous.
pub fn decision_log_header() -> String {
    concat!(
        "# per-cycle planner decisions\n",
        "# partitioned benchmark reading: subchannel split proportional to the cycle's\n",
        "#   offered bits plus standing backlog per service; steering proportional to the\n",
        "#   previous cycle's per-node served-capacity proxies; joint solve with every\n",
        "#   interference term dropped.\n",
        "# columns: algorithm cycle iters converged polish_ok soft_caps queue_mbit repairs\n",
        "#   statuses objective_trace\n",
    )
    .to_string()
}

/// One columnar record of the decision log.
pub fn decision_log_record(algorithm: &str, cycle: usize, d: &CycleDecision) -> String {
    let trace: Vec<String> = d.iterates.iter().map(|r| format!("{:.6e}", r.objective)).collect();
    let statuses: Vec<String> = d.iterates.iter().map(|r| format!("{:?}", r.status)).collect();
    format!(
        "{} {} {} {} {} {} {:.6} {} {} {}",
        algorithm,
        cycle,
        d.iterates.len(),
        d.converged,
        d.polish_ok,
        d.soft_caps,
        d.planned_queue_mbit,
        d.repairs.len(),
        statuses.join(","),
        trace.join(","),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelSource;
    use crate::grid::PerService;
    use ndarray::{Array3, Array4};

    fn test_cfg() -> GridConfig {
        GridConfig::new(2.88e6, 1, 1, 6)
    }

    fn dims() -> Dims {
        Dims {
            n_aps: 2,
            flows: PerService { d: 2, m: 2, s: 1 },
        }
    }

    fn test_phy() -> PhyParams {
        PhyParams {
            p_ap_max_w: 2.5,
            p_sat_max_w: 4.0,
            gamma0_d: 10f64.powf(0.5),
            p_err: 1e-5,
        }
    }

    fn flat_channels(cfg: &GridConfig, d: &Dims, tn: f64, sat: f64) -> ChannelSet {
        let caps = cfg.subchannel_caps();
        let fr = cfg.frames_per_cycle;
        ChannelSet {
            source: ChannelSource::Real,
            cycle: 1,
            tn: PerService {
                d: Array4::from_elem((fr, d.n_aps, d.flows.d, caps.d), tn),
                m: Array4::from_elem((fr, d.n_aps, d.flows.m, caps.m), tn),
                s: Array4::zeros((0, 0, 0, 0)),
            },
            sat: PerService {
                d: Array3::zeros((0, 0, 0)),
                m: Array3::from_elem((fr, d.flows.m, caps.m), sat),
                s: Array3::from_elem((fr, d.flows.s, caps.s), sat),
            },
            noise_w: PerService {
                d: 1e-12,
                m: 1e-12,
                s: 1e-12,
            },
        }
    }

    fn empty_arrivals(cfg: &GridConfig, d: &Dims) -> CycleArrivals {
        CycleArrivals {
            d_tn: Array3::zeros((d.n_aps, d.flows.d, cfg.subframes_per_cycle())),
            m_tn: Array3::zeros((d.n_aps, d.flows.m, cfg.frames_per_cycle)),
            m_sat: Array2::zeros((d.flows.m, cfg.frames_per_cycle)),
            s_sat: Array2::zeros((d.flows.s, cfg.frames_per_cycle)),
        }
    }

    #[test]
    fn steering_normalization_fixes_solver_noise() {
        let d = dims();
        let raw_d = Array2::from_shape_vec((2, 2), vec![0.3, 0.0, 0.6, 0.0]).unwrap();
        let raw_m = Array2::from_shape_vec((2, 2), vec![0.7, 0.2, 0.5, 0.1]).unwrap();
        let w = normalized_steering((raw_d, raw_m), &d);
        // First D column renormalized to sum one, zero column made uniform.
        assert!((w.d[[0, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.d[[1, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(w.d[[0, 1]], 0.5);
        // First M column summed 1.2, scaled back to exactly one.
        assert!((w.m.column(0).sum() - 1.0).abs() < 1e-15);
        assert_eq!(w.m[[0, 1]], 0.2);
        w.validate().unwrap();
    }

    #[test]
    fn exclusivity_repair_keeps_the_strongest_claimant() {
        let cfg = test_cfg();
        let d = dims();
        let mut alloc = AllocationState::zeros(&cfg, &d);
        // Two D flows contest AP 0, lane 0, RB 0.
        alloc.a_d[[0, 0, 0, 0]] = 1;
        alloc.p_d[[0, 0, 0, 0]] = 0.2;
        alloc.a_d[[0, 1, 0, 0]] = 1;
        alloc.p_d[[0, 1, 0, 0]] = 0.5;
        // M flow 0 contested between AP 1 and the satellite on lane 0, RB 0.
        alloc.a_m[[1, 0, 0, 0]] = 1;
        alloc.p_m[[1, 0, 0, 0]] = 0.3;
        alloc.b_m[[0, 0, 0]] = 1;
        alloc.p0_m[[0, 0, 0]] = 0.1;
        let mut log = Vec::new();
        repair_exclusivity(&mut alloc, false, &mut log);
        assert_eq!(alloc.a_d[[0, 0, 0, 0]], 0);
        assert_eq!(alloc.p_d[[0, 0, 0, 0]], 0.0);
        assert_eq!(alloc.a_d[[0, 1, 0, 0]], 1);
        // TN power was higher, so the satellite claim lost.
        assert_eq!(alloc.b_m[[0, 0, 0]], 0);
        assert_eq!(alloc.a_m[[1, 0, 0, 0]], 1);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn exclusivity_repair_never_touches_a_frozen_satellite() {
        let cfg = test_cfg();
        let d = dims();
        let mut alloc = AllocationState::zeros(&cfg, &d);
        alloc.a_m[[1, 0, 0, 0]] = 1;
        alloc.p_m[[1, 0, 0, 0]] = 0.9;
        alloc.b_m[[0, 0, 0]] = 1;
        alloc.p0_m[[0, 0, 0]] = 0.1;
        let mut log = Vec::new();
        repair_exclusivity(&mut alloc, true, &mut log);
        // Satellite wins despite the lower power.
        assert_eq!(alloc.b_m[[0, 0, 0]], 1);
        assert_eq!(alloc.a_m[[1, 0, 0, 0]], 0);
    }

    #[test]
    fn bwp_repair_deactivates_the_cheapest_conflicting_lane() {
        let cfg = test_cfg();
        let d = dims();
        let mut alloc = AllocationState::zeros(&cfg, &d);
        // D lane 1 (1-based) blocks M lanes 1..=3; put weak M traffic on
        // 0-based M lane 0 and strong D traffic on 0-based D lane 0.
        alloc.a_d[[0, 0, 0, 0]] = 1;
        alloc.p_d[[0, 0, 0, 0]] = 1.0;
        alloc.a_m[[0, 0, 0, 0]] = 1;
        alloc.p_m[[0, 0, 0, 0]] = 0.01;
        let mut log = Vec::new();
        repair_bwp(&mut alloc, &cfg, &mut log);
        assert!(alloc.bwp.active.d[0]);
        assert!(!alloc.bwp.active.m[0]);
        assert_eq!(alloc.a_m[[0, 0, 0, 0]], 0);
        assert_eq!(alloc.p_m[[0, 0, 0, 0]], 0.0);
        assert!(check_bwp_feasible(&alloc.bwp, &cfg).unwrap().is_empty());
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn coverage_repair_assigns_the_strongest_free_rb() {
        let cfg = test_cfg();
        let d = dims();
        let phy = test_phy();
        let ch = flat_channels(&cfg, &d, 1e-9, 1e-10);
        let mut alloc = AllocationState::zeros(&cfg, &d);
        alloc.bwp.active.d[0] = true;
        let mut arrivals = empty_arrivals(&cfg, &d);
        arrivals.d_tn[[0, 0, 0]] = 1000.0;
        let mut log = Vec::new();
        repair_d_coverage(&mut alloc, &arrivals, &ch, &cfg, &phy, &[0], &mut log);
        assert_eq!(alloc.a_d[[0, 0, 0, 0]], 1);
        // Assigned power targets the SINR floor with 5% headroom.
        let want = phy.gamma0_d * 1.05 * ch.noise_w.d / 1e-9;
        assert!((alloc.p_d[[0, 0, 0, 0]] - want).abs() < 1e-12 * want);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn coverage_repair_steals_the_weakest_rb_when_full() {
        let cfg = test_cfg();
        let d = dims();
        let phy = test_phy();
        let ch = flat_channels(&cfg, &d, 1e-9, 1e-10);
        let mut alloc = AllocationState::zeros(&cfg, &d);
        alloc.bwp.active.d[0] = true;
        // Flow 1 holds every RB of subframe 0 on the only active lane.
        let nd_sf = cfg.rbs_per_subframe(Service::D);
        for n in 0..nd_sf {
            alloc.a_d[[0, 1, 0, n]] = 1;
            alloc.p_d[[0, 1, 0, n]] = 0.1 + n as f64 * 0.1;
        }
        let mut arrivals = empty_arrivals(&cfg, &d);
        arrivals.d_tn[[0, 0, 0]] = 1000.0;
        let mut log = Vec::new();
        repair_d_coverage(&mut alloc, &arrivals, &ch, &cfg, &phy, &[0], &mut log);
        // The weakest RB (n = 0) moved from flow 1 to flow 0.
        assert_eq!(alloc.a_d[[0, 1, 0, 0]], 0);
        assert_eq!(alloc.a_d[[0, 0, 0, 0]], 1);
        assert_eq!(alloc.a_d[[0, 1, 0, 1]], 1);
    }

    #[test]
    fn cleanup_keeps_the_strongest_rb_of_a_demanded_cell() {
        let cfg = test_cfg();
        let d = dims();
        let phy = test_phy();
        let mut alloc = AllocationState::zeros(&cfg, &d);
        // Two weak RBs of one demanded cell; only the stronger survives.
        alloc.a_d[[0, 0, 0, 0]] = 1;
        alloc.p_d[[0, 0, 0, 0]] = 1e-9;
        alloc.a_d[[0, 0, 0, 1]] = 1;
        alloc.p_d[[0, 0, 0, 1]] = 2e-9;
        // A weak RB of an undemanded cell disappears entirely.
        alloc.a_d[[1, 1, 0, 0]] = 1;
        alloc.p_d[[1, 1, 0, 0]] = 1e-9;
        let mut arrivals = empty_arrivals(&cfg, &d);
        arrivals.d_tn[[0, 0, 0]] = 500.0;
        let mut log = Vec::new();
        cleanup_associations(&mut alloc, &arrivals, &phy, &cfg, false, &[0], &[], &mut log);
        assert_eq!(alloc.a_d[[0, 0, 0, 0]], 0);
        assert_eq!(alloc.a_d[[0, 0, 0, 1]], 1);
        assert_eq!(alloc.a_d[[1, 1, 0, 0]], 0);
    }

    #[test]
    fn topup_scales_a_single_rb_to_the_exact_demand() {
        let cfg = test_cfg();
        let d = dims();
        let phy = test_phy();
        let g = 1e-9;
        let ch = flat_channels(&cfg, &d, g, 1e-10);
        let mut alloc = AllocationState::zeros(&cfg, &d);
        alloc.bwp.active.d[0] = true;
        alloc.a_d[[0, 0, 0, 0]] = 1;
        alloc.p_d[[0, 0, 0, 0]] = 1e-3;
        let t_d = cfg.rb_duration_s(Service::D);
        let w = cfg.rb_bandwidth_hz(Service::D);
        let chi = phy.chi_d(&cfg);
        let demand = 400.0;
        let mut arrivals = empty_arrivals(&cfg, &d);
        arrivals.d_tn[[0, 0, 0]] = demand;
        let mut log = Vec::new();
        let ok = topup_d(&mut alloc, &arrivals, &ch, &cfg, &phy, &[0], &mut log);
        assert!(ok, "single interference-free RB must reach its demand");
        // Analytic solution: t_d * (w log2(1 + p g / noise) - chi) = demand.
        let sinr_needed = ((demand / t_d + chi) / w).exp2() - 1.0;
        let p_needed = sinr_needed * ch.noise_w.d / g;
        let p = alloc.p_d[[0, 0, 0, 0]];
        assert!(
            (p - p_needed).abs() < 1e-9 * p_needed,
            "p = {p:.6e}, analytic {p_needed:.6e}"
        );
        let out = rate_d_subframe(&alloc, &ch, &cfg, &phy, 0, 0, 0);
        assert!(t_d * out.rate_bps >= demand * (1.0 - 1e-12));
        assert!(out.sinr_floor_ok);
    }

    #[test]
    fn topup_restores_the_sinr_floor_without_demand() {
        let cfg = test_cfg();
        let d = dims();
        let phy = test_phy();
        let g = 1e-9;
        let ch = flat_channels(&cfg, &d, g, 1e-10);
        let mut alloc = AllocationState::zeros(&cfg, &d);
        alloc.a_d[[0, 0, 0, 0]] = 1;
        // Far below the floor: sinr = 1e-5 * 1e-9 / 1e-12 = 0.01.
        alloc.p_d[[0, 0, 0, 0]] = 1e-5;
        let arrivals = empty_arrivals(&cfg, &d);
        let mut log = Vec::new();
        let ok = topup_d(&mut alloc, &arrivals, &ch, &cfg, &phy, &[0], &mut log);
        assert!(ok);
        let sinr = sinr_d(&alloc, &ch, &cfg, 0, 0, 0, 0);
        assert!(sinr >= phy.gamma0_d);
        assert!(sinr <= phy.gamma0_d * (1.0 + 1e-6), "no overshoot: {sinr}");
    }

    #[test]
    fn topup_respects_the_slot_power_budget() {
        let cfg = test_cfg();
        let d = dims();
        let phy = test_phy();
        let g = 1e-12;
        // Gain so poor the demand is unreachable within the budget.
        let ch = flat_channels(&cfg, &d, g, 1e-13);
        let mut alloc = AllocationState::zeros(&cfg, &d);
        alloc.a_d[[0, 0, 0, 0]] = 1;
        alloc.p_d[[0, 0, 0, 0]] = 1.0;
        let mut arrivals = empty_arrivals(&cfg, &d);
        arrivals.d_tn[[0, 0, 0]] = 1e9;
        let mut log = Vec::new();
        let ok = topup_d(&mut alloc, &arrivals, &ch, &cfg, &phy, &[0], &mut log);
        assert!(!ok, "impossible demand must be reported, not faked");
        assert!(alloc.p_d[[0, 0, 0, 0]] <= phy.p_ap_max_w * (1.0 + 1e-12));
        assert!(!log.is_empty());
    }

    #[test]
    fn exact_expansion_matches_hand_computed_loads() {
        let cfg = test_cfg();
        let d = dims();
        let ch = flat_channels(&cfg, &d, 2e-12, 1e-12);
        let mut alloc = AllocationState::zeros(&cfg, &d);
        alloc.p_d[[1, 0, 0, 0]] = 0.5; // AP 1 interferes with AP 0 on (0, 0).
        alloc.p0_m[[0, 0, 0]] = 0.25; // satellite interferes with TN M RBs.
        let pt = exact_expansion(&alloc, &ch, &cfg, &d, 1e-4, false, 2.0);
        // eta_d at (l=0, k, v=0, n=0): ln(1 + 0.5 * 2e-12 / 1e-12) = ln 2.
        assert!((pt.eta_d[[0, 0, 0, 0]] - 2.0f64.ln()).abs() < 1e-12);
        // The interferer's own eta has no self term.
        assert_eq!(pt.eta_d[[1, 0, 0, 0]], 0.0);
        // eta_m_tn includes the kappa-scaled satellite load:
        // ln(1 + 2.0 * 0.25 * 1e-12 / 1e-12) = ln 1.5.
        assert!((pt.eta_m_tn[[0, 0, 0, 0]] - 1.5f64.ln()).abs() < 1e-12);
        // eta_m_sat sees kappa-scaled TN M power; none is set.
        assert_eq!(pt.eta_m_sat[[0, 0, 0]], 0.0);
        // zeta floor applies where no power is present.
        assert_eq!(pt.zeta_d[[0, 0, 1]], 1e-9);
        // zeta of the powered cell: f_apx(0.5) ~ 1 (plus three zero RBs).
        assert!((pt.zeta_d[[1, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_slot_power_spans_the_covering_m_rb() {
        let cfg = test_cfg();
        let d = dims();
        let mut alloc = AllocationState::zeros(&cfg, &d);
        alloc.p_d[[0, 0, 0, 3]] = 0.4;
        alloc.p_m[[0, 1, 2, 1]] = 0.3; // M RB 1 covers D slots 2 and 3.
        assert!((ap_slot_power(&alloc, &cfg, 0, 3) - 0.7).abs() < 1e-15);
        assert!((ap_slot_power(&alloc, &cfg, 0, 2) - 0.3).abs() < 1e-15);
        assert_eq!(ap_slot_power(&alloc, &cfg, 1, 3), 0.0);
    }
}
