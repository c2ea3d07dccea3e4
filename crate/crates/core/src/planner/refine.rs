//! Per-subframe refinement of a cycle plan as actual conditions arrive.
//!
//! Phase 1 plans the whole cycle on digital-twin predictions. Phase 2 walks
//! the cycle subframe by subframe: on each downlink subframe it re-solves the
//! terrestrial side against the mixed channel set (actual terrestrial gains,
//! predicted satellite gains), warm-started at the current allocation, and
//! adopts the refined subframe only when it beats keeping the plan by more
//! than the convergence tolerance. Satellite powers, associations, and the
//! band plan are immutable within the cycle; when predictions were exact the
//! warm start is already optimal and the plan survives bit-for-bit.

use ndarray::{Array1, Array2, Array4};

use super::joint::dt_joint_ra;
use super::{
    cleanup_associations, exact_expansion, repair_d_coverage, repair_exclusivity, sca_minimize,
    topup_d, CycleDecision, IterateRecord, PlanContext, PlannerError, POLISH_ITERS, RECOVERY_FRAC,
};
use crate::channel::{ChannelSet, ChannelSource};
use crate::conic::{assemble_refine, Binding, RefineInputs};
use crate::grid::{GridConfig, Service, SUBFRAMES_PER_FRAME};
use crate::phy::{m_rate_slot, rate_d_subframe, s_rate_slot, AllocationState, MServer, PhyParams};
use crate::queueing::{
    inject_and_step, steer_arrivals, CycleArrivals, QueueCaps, QueueState, TrafficTrace,
};
use crate::sca;

/// Outcome of refining one downlink subframe.
#[derive(Clone, Debug)]
pub struct RefineRecord {
    pub sf: usize,
    /// Objective trace of the warm-started subframe solve.
    pub iterates: Vec<IterateRecord>,
    /// Whether the refined candidate replaced the cycle plan's subframe.
    pub adopted: bool,
    pub converged: bool,
    /// Cost of keeping the plan: weighted unserved D bits plus the mean M
    /// backlog across the subframe's M slots, at the mixed channel set.
    pub cost_keep: f64,
    /// Same cost for the refined candidate (NaN when the solve failed).
    pub cost_refined: f64,
    /// The subframe solve failed and the cycle plan was kept.
    pub infeasible: bool,
    pub note: Option<String>,
}

/// A cycle's planning decision plus its refined terrestrial allocation.
#[derive(Clone, Debug)]
pub struct RefinedCycle {
    /// Phase-1 cycle decision; band plan, steering, and the satellite side
    /// stay authoritative for the whole cycle.
    pub decision: CycleDecision,
    /// Allocation after per-subframe refinement of the terrestrial side.
    pub refined: AllocationState,
    pub records: Vec<RefineRecord>,
}

/// Plan a cycle on predictions, then refine each downlink subframe's
/// terrestrial allocation against actual terrestrial conditions.
pub fn rt_refine_cycle(
    ctx: &PlanContext,
    twin_channels: &ChannelSet,
    predicted: &TrafficTrace,
    real_channels: &ChannelSet,
    actual: &TrafficTrace,
    queues: &QueueState,
    caps: &QueueCaps,
) -> Result<RefinedCycle, PlannerError> {
    let cfg = ctx.cfg;
    let decision = dt_joint_ra(ctx, twin_channels, predicted, queues, caps)?;
    // Mixed channel set: the network measures its own links each subframe,
    // but satellite links are only available as predictions mid-cycle.
    let h_star = ChannelSet {
        source: ChannelSource::Twin,
        cycle: real_channels.cycle,
        tn: real_channels.tn.clone(),
        sat: twin_channels.sat.clone(),
        noise_w: real_channels.noise_w,
    };
    let arrivals = steer_arrivals(actual, &decision.steering)?;
    let mut refined = decision.alloc.clone();
    let mut belief = queues.clone();
    let mut records = Vec::new();
    for sf in 0..cfg.subframes_per_cycle() {
        if cfg.is_dl_subframe(sf) {
            let (next, record) = refine_subframe(
                ctx, &decision, refined, &h_star, &arrivals, actual, &belief, caps, sf,
            );
            refined = next;
            records.push(record);
        }
        belief = step_queues_subframe(&refined, &h_star, &arrivals, &belief, cfg, ctx.phy, sf).next;
    }
    debug_assert_eq!(refined.p0_m, decision.alloc.p0_m);
    debug_assert_eq!(refined.b_m, decision.alloc.b_m);
    debug_assert_eq!(refined.p0_s, decision.alloc.p0_s);
    debug_assert_eq!(refined.b_s, decision.alloc.b_s);
    debug_assert_eq!(refined.bwp, decision.alloc.bwp);
    Ok(RefinedCycle {
        decision,
        refined,
        records,
    })
}

/// Refine one downlink subframe; returns the next allocation (the candidate
/// if adopted, otherwise `current` unchanged) and the record.
#[allow(clippy::too_many_arguments)]
fn refine_subframe(
    ctx: &PlanContext,
    decision: &CycleDecision,
    current: AllocationState,
    h_star: &ChannelSet,
    arrivals: &CycleArrivals,
    actual: &TrafficTrace,
    belief: &QueueState,
    caps: &QueueCaps,
    sf: usize,
) -> (AllocationState, RefineRecord) {
    let (cfg, dims, phy, pcfg) = (ctx.cfg, ctx.dims, ctx.phy, ctx.pcfg);
    let cost_keep = subframe_cost(&current, h_star, arrivals, belief, cfg, phy, sf);
    let lambda_d: Array1<f64> = actual.d.column(sf).to_owned();
    let lambda_m: Array1<f64> = actual.m.column(sf / SUBFRAMES_PER_FRAME).to_owned();

    let warm = exact_expansion(&current, h_star, cfg, dims, pcfg.eps, false, pcfg.kappa);
    let solved = sca_minimize(
        warm,
        decision.soft_caps,
        pcfg.max_sca_iters,
        pcfg,
        "refine",
        |pt, soft| {
            assemble_refine(
                pt,
                &RefineInputs {
                    frozen: &decision.alloc,
                    h_star,
                    sf0: sf,
                    kappa: pcfg.kappa,
                    lambda_d_bits: &lambda_d,
                    lambda_m_bits: &lambda_m,
                    steering: &decision.steering,
                    queues: belief,
                    caps,
                    soft_caps: soft,
                    binding: Binding::Relaxed,
                },
                cfg,
                dims,
                phy,
                pcfg.eps,
            )
        },
    );
    let solved = match solved {
        Ok(s) => s,
        Err(err) => {
            return (
                current,
                RefineRecord {
                    sf,
                    iterates: Vec::new(),
                    adopted: false,
                    converged: false,
                    cost_keep,
                    cost_refined: f64::NAN,
                    infeasible: true,
                    note: Some(err.to_string()),
                },
            );
        }
    };

    // Rebuild this subframe's terrestrial side from the solve; everything
    // outside the subframe keeps the current allocation.
    let (mut p_d, mut p_m, _, _) = solved.layout.powers(&solved.x, cfg, dims);
    let a_d = sca::recover_binaries(p_d.view_mut(), RECOVERY_FRAC * phy.p_ap_max_w);
    let a_m = sca::recover_binaries(p_m.view_mut(), RECOVERY_FRAC * phy.p_ap_max_w);
    let mut cand = current.clone();
    copy_tn_subframe(&mut cand, &p_d, &a_d, &p_m, &a_m, cfg, sf);
    let mut repairs = Vec::new();
    repair_exclusivity(&mut cand, true, &mut repairs);
    repair_d_coverage(&mut cand, arrivals, h_star, cfg, phy, &[sf], &mut repairs);

    let polish_pt = exact_expansion(&cand, h_star, cfg, dims, pcfg.eps, false, pcfg.kappa);
    let polish = sca_minimize(
        polish_pt,
        solved.soft_caps,
        POLISH_ITERS,
        pcfg,
        "refine polish",
        |pt, soft| {
            assemble_refine(
                pt,
                &RefineInputs {
                    frozen: &decision.alloc,
                    h_star,
                    sf0: sf,
                    kappa: pcfg.kappa,
                    lambda_d_bits: &lambda_d,
                    lambda_m_bits: &lambda_m,
                    steering: &decision.steering,
                    queues: belief,
                    caps,
                    soft_caps: soft,
                    binding: Binding::Fixed(&cand),
                },
                cfg,
                dims,
                phy,
                pcfg.eps,
            )
        },
    );
    if let Ok(pol) = polish {
        let (pd, pm, _, _) = pol.layout.powers(&pol.x, cfg, dims);
        copy_tn_powers(&mut cand, &pd, &pm, cfg, sf);
    }
    let nm_sf = cfg.rbs_per_subframe(Service::M);
    let m_slots: Vec<usize> = (sf * nm_sf..(sf + 1) * nm_sf).collect();
    cleanup_associations(&mut cand, arrivals, phy, cfg, true, &[sf], &m_slots, &mut repairs);
    topup_d(&mut cand, arrivals, h_star, cfg, phy, &[sf], &mut repairs);

    let cost_refined = subframe_cost(&cand, h_star, arrivals, belief, cfg, phy, sf);
    // Adopt only a clear improvement; solver-noise differences keep the plan
    // untouched so exact predictions pass through bit-for-bit.
    let adopted = cost_refined < cost_keep - pcfg.sca_tol * cost_keep.abs().max(1.0);
    let record = RefineRecord {
        sf,
        iterates: solved.iterates,
        adopted,
        converged: solved.converged,
        cost_keep,
        cost_refined,
        infeasible: false,
        note: (!repairs.is_empty()).then(|| repairs.join("; ")),
    };
    (if adopted { cand } else { current }, record)
}

/// Copy one subframe's terrestrial powers and associations from full-shape
/// tensors into `dst`.
fn copy_tn_subframe(
    dst: &mut AllocationState,
    p_d: &Array4<f64>,
    a_d: &Array4<u8>,
    p_m: &Array4<f64>,
    a_m: &Array4<u8>,
    cfg: &GridConfig,
    sf: usize,
) {
    let nd_sf = cfg.rbs_per_subframe(Service::D);
    let nm_sf = cfg.rbs_per_subframe(Service::M);
    let d_rng = sf * nd_sf..(sf + 1) * nd_sf;
    let m_rng = sf * nm_sf..(sf + 1) * nm_sf;
    dst.p_d
        .slice_mut(ndarray::s![.., .., .., d_rng.clone()])
        .assign(&p_d.slice(ndarray::s![.., .., .., d_rng.clone()]));
    dst.a_d
        .slice_mut(ndarray::s![.., .., .., d_rng.clone()])
        .assign(&a_d.slice(ndarray::s![.., .., .., d_rng]));
    dst.p_m
        .slice_mut(ndarray::s![.., .., .., m_rng.clone()])
        .assign(&p_m.slice(ndarray::s![.., .., .., m_rng.clone()]));
    dst.a_m
        .slice_mut(ndarray::s![.., .., .., m_rng.clone()])
        .assign(&a_m.slice(ndarray::s![.., .., .., m_rng]));
}

/// Copy one subframe's terrestrial powers (associations untouched).
fn copy_tn_powers(
    dst: &mut AllocationState,
    p_d: &Array4<f64>,
    p_m: &Array4<f64>,
    cfg: &GridConfig,
    sf: usize,
) {
    let nd_sf = cfg.rbs_per_subframe(Service::D);
    let nm_sf = cfg.rbs_per_subframe(Service::M);
    let d_rng = sf * nd_sf..(sf + 1) * nd_sf;
    let m_rng = sf * nm_sf..(sf + 1) * nm_sf;
    dst.p_d
        .slice_mut(ndarray::s![.., .., .., d_rng.clone()])
        .assign(&p_d.slice(ndarray::s![.., .., .., d_rng]));
    dst.p_m
        .slice_mut(ndarray::s![.., .., .., m_rng.clone()])
        .assign(&p_m.slice(ndarray::s![.., .., .., m_rng]));
}

/// Queue evolution through one subframe.
#[derive(Clone, Debug)]
pub struct SubframeStep {
    pub next: QueueState,
    /// Total M backlog (network plus satellite) after each M slot.
    pub m_backlog_bits: Vec<f64>,
    /// D bits offered in the subframe beyond served capacity.
    pub unserved_d_bits: f64,
}

/// Step every queue family through subframe `sf` exactly as the cycle replay
/// does, against an arbitrary channel set. Chaining this over all subframes
/// of a cycle reproduces the replay's final queue state.
pub fn step_queues_subframe(
    alloc: &AllocationState,
    ch: &ChannelSet,
    arrivals: &CycleArrivals,
    initial: &QueueState,
    cfg: &GridConfig,
    phy: &PhyParams,
    sf: usize,
) -> SubframeStep {
    let (n_aps, km) = initial.tn_m.dim();
    let ks = initial.sat_s.len();
    let kd = arrivals.d_tn.dim().1;
    let nm_sf = cfg.rbs_per_subframe(Service::M);
    let ns_sf = cfg.rbs_per_subframe(Service::S);
    let t_m = cfg.rb_duration_s(Service::M);
    let t_s = cfg.rb_duration_s(Service::S);
    let t_d = cfg.rb_duration_s(Service::D);
    let mut state = initial.clone();
    let mut m_backlog = Vec::with_capacity(nm_sf);
    for n in sf * nm_sf..(sf + 1) * nm_sf {
        let inject = cfg.is_injection_rb(Service::M, n);
        let fr = cfg.frame_of_rb(Service::M, n);
        let mut lam_tn = Array2::zeros((n_aps, km));
        let mut lam_sat = Array1::zeros(km);
        if inject {
            for l in 0..n_aps {
                for k in 0..km {
                    lam_tn[[l, k]] = arrivals.m_tn[[l, k, fr]];
                }
            }
            for k in 0..km {
                lam_sat[k] = arrivals.m_sat[[k, fr]];
            }
        }
        let mut cap_tn = Array2::zeros((n_aps, km));
        for l in 0..n_aps {
            for k in 0..km {
                cap_tn[[l, k]] = t_m * m_rate_slot(alloc, ch, cfg, MServer::Ap(l), k, n);
            }
        }
        let mut cap_sat = Array1::zeros(km);
        for k in 0..km {
            cap_sat[k] = t_m * m_rate_slot(alloc, ch, cfg, MServer::Sat, k, n);
        }
        inject_and_step(&mut state.tn_m, &lam_tn, &cap_tn, true);
        inject_and_step(&mut state.sat_m, &lam_sat, &cap_sat, true);
        m_backlog.push(state.tn_m.sum() + state.sat_m.sum());
    }
    for n in sf * ns_sf..(sf + 1) * ns_sf {
        let inject = cfg.is_injection_rb(Service::S, n);
        let fr = cfg.frame_of_rb(Service::S, n);
        let mut lam = Array1::zeros(ks);
        if inject {
            for k in 0..ks {
                lam[k] = arrivals.s_sat[[k, fr]];
            }
        }
        let mut cap = Array1::zeros(ks);
        for k in 0..ks {
            cap[k] = t_s * s_rate_slot(alloc, ch, cfg, k, n);
        }
        inject_and_step(&mut state.sat_s, &lam, &cap, true);
    }
    let mut unserved = 0.0;
    for l in 0..n_aps {
        for k in 0..kd {
            let offered = arrivals.d_tn[[l, k, sf]];
            let capacity = t_d * rate_d_subframe(alloc, ch, cfg, phy, l, k, sf).rate_bps;
            let gap = offered - capacity;
            if gap > 1e-9 * (1.0 + offered) {
                unserved += gap;
            }
        }
    }
    SubframeStep {
        next: state,
        m_backlog_bits: m_backlog,
        unserved_d_bits: unserved,
    }
}

/// Scalar cost of running `alloc` through subframe `sf`: unserved D bits
/// weighted a thousandfold plus the mean M backlog across the subframe.
fn subframe_cost(
    alloc: &AllocationState,
    ch: &ChannelSet,
    arrivals: &CycleArrivals,
    q0: &QueueState,
    cfg: &GridConfig,
    phy: &PhyParams,
    sf: usize,
) -> f64 {
    let step = step_queues_subframe(alloc, ch, arrivals, q0, cfg, phy, sf);
    let mean_m = if step.m_backlog_bits.is_empty() {
        0.0
    } else {
        step.m_backlog_bits.iter().sum::<f64>() / step.m_backlog_bits.len() as f64
    };
    1e3 * step.unserved_d_bits + mean_m
}
