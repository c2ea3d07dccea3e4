//! Non-optimizing benchmark allocators.
//!
//! Both planners fix a stacked band split, let every flow repeatedly claim
//! its strongest unclaimed RB, and water-fill each server's power budget per
//! slot while ignoring interference. They differ only in how the bandwidth
//! left after the D grant is split between M and S: [`greedy`] splits it
//! evenly, [`heuristic`] proportionally to the residual queue backlog.

use ndarray::{Array1, Array2};

use super::{CycleDecision, PlanContext};
use crate::channel::ChannelSet;
use crate::grid::{check_bwp_feasible, BwpPlan, Dims, GridConfig, Service};
use crate::phy::AllocationState;
use crate::queueing::{SteeringWeights, TrafficTrace};

/// Fixed-split benchmark: `n_sc_d` D subchannels, the remaining usable
/// bandwidth split evenly between M and S.
pub fn greedy(ctx: &PlanContext, channels: &ChannelSet, traffic: &TrafficTrace) -> CycleDecision {
    let cfg = ctx.cfg;
    let w_m = cfg.rb_bandwidth_hz(Service::M);
    let w_s = cfg.rb_bandwidth_hz(Service::S);
    let (n_d, rem) = d_grant(cfg, ctx.pcfg.n_sc_d);
    let n_m = (0.5 * rem / w_m).floor() as usize;
    let n_s = ((rem - n_m as f64 * w_m) / w_s).floor() as usize;
    let plan = stacked_plan(cfg, n_d, n_m, n_s);
    claim_and_fill(ctx, channels, traffic, plan)
}

/// Queue-aware variant: the M/S split follows the residual backlog of the
/// two services at the end of the previous cycle (even split when both are
/// empty), granting at least one lane to any service with demand.
pub fn heuristic(
    ctx: &PlanContext,
    channels: &ChannelSet,
    traffic: &TrafficTrace,
    residual_m_bits: f64,
    residual_s_bits: f64,
) -> CycleDecision {
    let cfg = ctx.cfg;
    let w_m = cfg.rb_bandwidth_hz(Service::M);
    let w_s = cfg.rb_bandwidth_hz(Service::S);
    let (n_d, rem) = d_grant(cfg, ctx.pcfg.n_sc_d);
    let backlog = residual_m_bits + residual_s_bits;
    let share_m = if backlog > 0.0 {
        residual_m_bits / backlog
    } else {
        0.5
    };
    let mut n_m = (share_m * rem / w_m).round() as usize;
    let mut n_s = ((rem - n_m as f64 * w_m) / w_s).floor() as usize;
    if traffic.m.sum() + residual_m_bits > 0.0 {
        n_m = n_m.max(1);
    }
    if traffic.s.sum() + residual_s_bits > 0.0 {
        n_s = n_s.max(1);
    }
    let plan = stacked_plan(cfg, n_d, n_m, n_s);
    claim_and_fill(ctx, channels, traffic, plan)
}

/// D lane count within caps and the usable bandwidth left after it.
fn d_grant(cfg: &GridConfig, n_sc_d: usize) -> (usize, f64) {
    let caps = cfg.subchannel_caps();
    let usable = cfg.total_bandwidth_hz - cfg.guard_bandwidth_hz();
    let w_d = cfg.rb_bandwidth_hz(Service::D);
    let fit = (usable / w_d).floor() as usize;
    let n_d = n_sc_d.min(caps.d).min(fit);
    (n_d, usable - n_d as f64 * w_d)
}

/// Lowest-lane stacked band plan: D lanes first, M directly above the D
/// block's exclusion zone, S above both. Lane counts are shed (S first, then
/// M, then D) until the plan fits the lane caps and the bandwidth budget.
pub(crate) fn stacked_plan(
    cfg: &GridConfig,
    n_d: usize,
    mut n_m: usize,
    mut n_s: usize,
) -> BwpPlan {
    let caps = cfg.subchannel_caps();
    let mut n_d = n_d.min(caps.d);
    loop {
        // First lane (0-based) clear of every active lower-service block.
        let m0 = if n_d == 0 { 0 } else { 2 * n_d + 1 };
        let s0 = match (n_d, n_m) {
            (0, 0) => 0,
            (_, 0) => 4 * n_d + 2,
            _ => 4 * n_d + 2 * n_m + 3,
        };
        let m_fit = caps.m.saturating_sub(m0);
        if n_m > m_fit {
            n_m = m_fit;
            continue;
        }
        let s_fit = caps.s.saturating_sub(s0);
        if n_s > s_fit {
            n_s = s_fit;
            continue;
        }
        let mut plan = BwpPlan::empty(cfg);
        for v in 0..n_d {
            plan.active.d[v] = true;
        }
        for v in m0..m0 + n_m {
            plan.active.m[v] = true;
        }
        for v in s0..s0 + n_s {
            plan.active.s[v] = true;
        }
        if check_bwp_feasible(&plan, cfg)
            .expect("plan sized from the same grid")
            .is_empty()
        {
            return plan;
        }
        if n_s > 0 {
            n_s -= 1;
        } else if n_m > 0 {
            n_m -= 1;
        } else if n_d > 0 {
            n_d -= 1;
        } else {
            return plan;
        }
    }
}

/// Matching phase: each flow in turn claims its strongest unclaimed RB until
/// nothing claimable remains; then each server water-fills its power budget
/// per slot over its claims, ignoring interference.
fn claim_and_fill(
    ctx: &PlanContext,
    ch: &ChannelSet,
    _traffic: &TrafficTrace,
    plan: BwpPlan,
) -> CycleDecision {
    let (cfg, dims, phy) = (ctx.cfg, ctx.dims, ctx.phy);
    let mut alloc = AllocationState::zeros(cfg, dims);
    alloc.bwp = plan;
    let d_lanes: Vec<usize> = active_lanes(&alloc.bwp.active.d);
    let m_lanes: Vec<usize> = active_lanes(&alloc.bwp.active.m);
    let s_lanes: Vec<usize> = active_lanes(&alloc.bwp.active.s);

    for fr in 0..cfg.frames_per_cycle {
        claim_d(&mut alloc, ch, cfg, dims, fr, &d_lanes);
        claim_m(&mut alloc, ch, cfg, dims, fr, &m_lanes);
        claim_s(&mut alloc, ch, cfg, dims, fr, &s_lanes);
    }
    fill_ap_powers(&mut alloc, ch, cfg, dims, phy.p_ap_max_w, ctx.pcfg.eps_pow);
    fill_sat_powers(&mut alloc, ch, cfg, dims, phy.p_sat_max_w, ctx.pcfg.eps_pow);
    drop_unpowered(&mut alloc);
    let steering = rate_proxy_steering(&alloc, ch, cfg, dims);

    CycleDecision {
        bwp: alloc.bwp.clone(),
        steering,
        alloc,
        iterates: Vec::new(),
        polish_iterates: Vec::new(),
        converged: true,
        polish_ok: true,
        soft_caps: false,
        planned_queue_mbit: f64::NAN,
        repairs: Vec::new(),
    }
}

fn active_lanes(active: &[bool]) -> Vec<usize> {
    active
        .iter()
        .enumerate()
        .filter_map(|(v, &on)| on.then_some(v))
        .collect()
}

/// Round-robin D claims over the frame's downlink RBs: one AP RB per flow
/// per round, strongest gain first, ties to the lowest `(l, v, n)`.
fn claim_d(
    alloc: &mut AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    dims: &Dims,
    fr: usize,
    lanes: &[usize],
) {
    let per_frame = cfg.rbs_per_subframe(Service::D) * crate::grid::SUBFRAMES_PER_FRAME;
    let rbs: Vec<usize> = (fr * per_frame..(fr + 1) * per_frame)
        .filter(|&n| cfg.is_dl_rb(Service::D, n))
        .collect();
    loop {
        let mut any = false;
        for k in 0..dims.flows.d {
            let mut best: Option<(f64, usize, usize, usize)> = None;
            for l in 0..dims.n_aps {
                for &v in lanes {
                    let g = ch.tn_gain(Service::D, fr, l, k, v);
                    for &n in &rbs {
                        let ap_free = (0..dims.flows.d).all(|j| alloc.a_d[[l, j, v, n]] == 0);
                        let flow_free = (0..dims.n_aps).all(|i| alloc.a_d[[i, k, v, n]] == 0);
                        if ap_free && flow_free {
                            if best.map_or(true, |(bg, _, _, _)| g > bg) {
                                best = Some((g, l, v, n));
                            }
                            break;
                        }
                    }
                }
            }
            if let Some((_, l, v, n)) = best {
                alloc.a_d[[l, k, v, n]] = 1;
                any = true;
            }
        }
        if !any {
            return;
        }
    }
}

/// Round-robin M claims: terrestrial candidates on the frame's downlink RBs,
/// satellite candidates on every RB. A flow never claims both sides of one
/// RB, and APs win gain ties over the satellite.
fn claim_m(
    alloc: &mut AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    dims: &Dims,
    fr: usize,
    lanes: &[usize],
) {
    let per_frame = cfg.rbs_per_subframe(Service::M) * crate::grid::SUBFRAMES_PER_FRAME;
    let rbs: Vec<usize> = (fr * per_frame..(fr + 1) * per_frame).collect();
    loop {
        let mut any = false;
        for k in 0..dims.flows.m {
            // (gain, sat, l, v, n); sat sorts after APs on equal gain.
            let mut best: Option<(f64, bool, usize, usize, usize)> = None;
            for l in 0..dims.n_aps {
                for &v in lanes {
                    let g = ch.tn_gain(Service::M, fr, l, k, v);
                    for &n in &rbs {
                        if !cfg.is_dl_rb(Service::M, n) {
                            continue;
                        }
                        let ap_free = (0..dims.flows.m).all(|j| alloc.a_m[[l, j, v, n]] == 0);
                        let not_on_sat = alloc.b_m[[k, v, n]] == 0;
                        if ap_free && not_on_sat {
                            if best.map_or(true, |(bg, _, _, _, _)| g > bg) {
                                best = Some((g, false, l, v, n));
                            }
                            break;
                        }
                    }
                }
            }
            for &v in lanes {
                let g = ch.sat_gain(Service::M, fr, k, v);
                for &n in &rbs {
                    let sat_free = (0..dims.flows.m).all(|j| alloc.b_m[[j, v, n]] == 0);
                    let not_on_tn = (0..dims.n_aps).all(|l| alloc.a_m[[l, k, v, n]] == 0);
                    if sat_free && not_on_tn {
                        if best.map_or(true, |(bg, _, _, _, _)| g > bg) {
                            best = Some((g, true, 0, v, n));
                        }
                        break;
                    }
                }
            }
            match best {
                Some((_, true, _, v, n)) => {
                    alloc.b_m[[k, v, n]] = 1;
                    any = true;
                }
                Some((_, false, l, v, n)) => {
                    alloc.a_m[[l, k, v, n]] = 1;
                    any = true;
                }
                None => {}
            }
        }
        if !any {
            return;
        }
    }
}

/// Round-robin S claims over every satellite RB of the frame.
fn claim_s(
    alloc: &mut AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    dims: &Dims,
    fr: usize,
    lanes: &[usize],
) {
    let per_frame = cfg.rbs_per_subframe(Service::S) * crate::grid::SUBFRAMES_PER_FRAME;
    let rbs: Vec<usize> = (fr * per_frame..(fr + 1) * per_frame).collect();
    loop {
        let mut any = false;
        for k in 0..dims.flows.s {
            let mut best: Option<(f64, usize, usize)> = None;
            for &v in lanes {
                let g = ch.sat_gain(Service::S, fr, k, v);
                for &n in &rbs {
                    if (0..dims.flows.s).all(|j| alloc.b_s[[j, v, n]] == 0) {
                        if best.map_or(true, |(bg, _, _)| g > bg) {
                            best = Some((g, v, n));
                        }
                        break;
                    }
                }
            }
            if let Some((_, v, n)) = best {
                alloc.b_s[[k, v, n]] = 1;
                any = true;
            }
        }
        if !any {
            return;
        }
    }
}

/// Water level `nu` with `sum (nu - c_i)+ = budget`, bisected to `eps`.
/// Returns the lower bracket end so the filled powers never exceed the
/// budget.
pub(crate) fn water_level(costs: &[f64], budget: f64, eps: f64) -> f64 {
    let mut lo = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = costs.iter().copied().fold(0.0f64, f64::max) + budget;
    while hi - lo > eps {
        let mid = 0.5 * (lo + hi);
        let served: f64 = costs.iter().map(|&c| (mid - c).max(0.0)).sum();
        if served < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Water-fill each AP's budget per finest slot over its claimed D and M RBs.
/// An M RB spans several slots and takes the lowest level among them, which
/// can only leave budget unused, never overdraw it.
fn fill_ap_powers(
    alloc: &mut AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    dims: &Dims,
    budget: f64,
    eps: f64,
) {
    let slots = cfg.slots_per_cycle();
    let rm = cfg.rbs_per_subframe(Service::D) / cfg.rbs_per_subframe(Service::M);
    let (_, kd, vd, _) = alloc.a_d.dim();
    let (_, km, vm, _) = alloc.a_m.dim();
    for l in 0..dims.n_aps {
        let mut level = vec![None; slots];
        for (t, lvl) in level.iter_mut().enumerate() {
            let fr = cfg.frame_of_rb(Service::D, t);
            let mut costs = Vec::new();
            for k in 0..kd {
                for v in 0..vd {
                    if alloc.a_d[[l, k, v, t]] != 0 {
                        let g = ch.tn_gain(Service::D, fr, l, k, v);
                        if g > 0.0 {
                            costs.push(ch.noise_w.d / g);
                        }
                    }
                }
            }
            for k in 0..km {
                for v in 0..vm {
                    if alloc.a_m[[l, k, v, t / rm]] != 0 {
                        let g = ch.tn_gain(Service::M, fr, l, k, v);
                        if g > 0.0 {
                            costs.push(ch.noise_w.m / g);
                        }
                    }
                }
            }
            if !costs.is_empty() {
                *lvl = Some(water_level(&costs, budget, eps));
            }
        }
        for k in 0..kd {
            for v in 0..vd {
                for t in 0..slots {
                    if alloc.a_d[[l, k, v, t]] != 0 {
                        let fr = cfg.frame_of_rb(Service::D, t);
                        let g = ch.tn_gain(Service::D, fr, l, k, v);
                        if let (Some(nu), true) = (level[t], g > 0.0) {
                            alloc.p_d[[l, k, v, t]] = (nu - ch.noise_w.d / g).max(0.0);
                        }
                    }
                }
            }
        }
        for k in 0..km {
            for v in 0..vm {
                for nm in 0..alloc.a_m.dim().3 {
                    if alloc.a_m[[l, k, v, nm]] == 0 {
                        continue;
                    }
                    let fr = cfg.frame_of_rb(Service::M, nm);
                    let g = ch.tn_gain(Service::M, fr, l, k, v);
                    if g <= 0.0 {
                        continue;
                    }
                    let p = (nm * rm..(nm + 1) * rm)
                        .map(|t| match level[t] {
                            Some(nu) => (nu - ch.noise_w.m / g).max(0.0),
                            None => 0.0,
                        })
                        .fold(f64::INFINITY, f64::min);
                    alloc.p_m[[l, k, v, nm]] = p;
                }
            }
        }
    }
}

/// Water-fill the satellite budget per finest slot over its M and S claims.
fn fill_sat_powers(
    alloc: &mut AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    _dims: &Dims,
    budget: f64,
    eps: f64,
) {
    let slots = cfg.slots_per_cycle();
    let rm = cfg.rbs_per_subframe(Service::D) / cfg.rbs_per_subframe(Service::M);
    let rs = cfg.rbs_per_subframe(Service::D) / cfg.rbs_per_subframe(Service::S);
    let (km, vm, _) = alloc.b_m.dim();
    let (ks, vs, _) = alloc.b_s.dim();
    let mut level = vec![None; slots];
    for (t, lvl) in level.iter_mut().enumerate() {
        let fr = cfg.frame_of_rb(Service::D, t);
        let mut costs = Vec::new();
        for k in 0..km {
            for v in 0..vm {
                if alloc.b_m[[k, v, t / rm]] != 0 {
                    let g = ch.sat_gain(Service::M, fr, k, v);
                    if g > 0.0 {
                        costs.push(ch.noise_w.m / g);
                    }
                }
            }
        }
        for k in 0..ks {
            for v in 0..vs {
                if alloc.b_s[[k, v, t / rs]] != 0 {
                    let g = ch.sat_gain(Service::S, fr, k, v);
                    if g > 0.0 {
                        costs.push(ch.noise_w.s / g);
                    }
                }
            }
        }
        if !costs.is_empty() {
            *lvl = Some(water_level(&costs, budget, eps));
        }
    }
    for k in 0..km {
        for v in 0..vm {
            for nm in 0..alloc.b_m.dim().2 {
                if alloc.b_m[[k, v, nm]] == 0 {
                    continue;
                }
                let fr = cfg.frame_of_rb(Service::M, nm);
                let g = ch.sat_gain(Service::M, fr, k, v);
                if g <= 0.0 {
                    continue;
                }
                let p = (nm * rm..(nm + 1) * rm)
                    .map(|t| match level[t] {
                        Some(nu) => (nu - ch.noise_w.m / g).max(0.0),
                        None => 0.0,
                    })
                    .fold(f64::INFINITY, f64::min);
                alloc.p0_m[[k, v, nm]] = p;
            }
        }
    }
    for k in 0..ks {
        for v in 0..vs {
            for ns in 0..alloc.b_s.dim().2 {
                if alloc.b_s[[k, v, ns]] == 0 {
                    continue;
                }
                let fr = cfg.frame_of_rb(Service::S, ns);
                let g = ch.sat_gain(Service::S, fr, k, v);
                if g <= 0.0 {
                    continue;
                }
                let p = (ns * rs..(ns + 1) * rs)
                    .map(|t| match level[t] {
                        Some(nu) => (nu - ch.noise_w.s / g).max(0.0),
                        None => 0.0,
                    })
                    .fold(f64::INFINITY, f64::min);
                alloc.p0_s[[k, v, ns]] = p;
            }
        }
    }
}

/// Remove claims the water-filling left at zero power.
fn drop_unpowered(alloc: &mut AllocationState) {
    ndarray::Zip::from(&mut alloc.a_d)
        .and(&alloc.p_d)
        .for_each(|a, &p| {
            if p <= 0.0 {
                *a = 0;
            }
        });
    ndarray::Zip::from(&mut alloc.a_m)
        .and(&alloc.p_m)
        .for_each(|a, &p| {
            if p <= 0.0 {
                *a = 0;
            }
        });
    ndarray::Zip::from(&mut alloc.b_m)
        .and(&alloc.p0_m)
        .for_each(|b, &p| {
            if p <= 0.0 {
                *b = 0;
            }
        });
    ndarray::Zip::from(&mut alloc.b_s)
        .and(&alloc.p0_s)
        .for_each(|b, &p| {
            if p <= 0.0 {
                *b = 0;
            }
        });
}

/// Steering proportional to each server's interference-free served-rate
/// proxy, floored so every weight is positive and valid.
fn rate_proxy_steering(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    dims: &Dims,
) -> SteeringWeights {
    let floor = 1e-9;
    let w_d = cfg.rb_bandwidth_hz(Service::D);
    let w_m = cfg.rb_bandwidth_hz(Service::M);
    let t_d = cfg.rb_duration_s(Service::D);
    let t_m = cfg.rb_duration_s(Service::M);
    let mut r_d = Array2::<f64>::zeros((dims.n_aps, dims.flows.d));
    for ((l, k, v, n), &a) in alloc.a_d.indexed_iter() {
        if a != 0 {
            let fr = cfg.frame_of_rb(Service::D, n);
            let g = ch.tn_gain(Service::D, fr, l, k, v);
            r_d[[l, k]] +=
                t_d * w_d * (1.0 + alloc.p_d[[l, k, v, n]] * g / ch.noise_w.d).log2();
        }
    }
    let mut r_m_tn = Array2::<f64>::zeros((dims.n_aps, dims.flows.m));
    for ((l, k, v, n), &a) in alloc.a_m.indexed_iter() {
        if a != 0 {
            let fr = cfg.frame_of_rb(Service::M, n);
            let g = ch.tn_gain(Service::M, fr, l, k, v);
            r_m_tn[[l, k]] +=
                t_m * w_m * (1.0 + alloc.p_m[[l, k, v, n]] * g / ch.noise_w.m).log2();
        }
    }
    let mut r_m_sat = Array1::<f64>::zeros(dims.flows.m);
    for ((k, v, n), &b) in alloc.b_m.indexed_iter() {
        if b != 0 {
            let fr = cfg.frame_of_rb(Service::M, n);
            let g = ch.sat_gain(Service::M, fr, k, v);
            r_m_sat[k] +=
                t_m * w_m * (1.0 + alloc.p0_m[[k, v, n]] * g / ch.noise_w.m).log2();
        }
    }
    let mut d = Array2::<f64>::zeros((dims.n_aps, dims.flows.d));
    for k in 0..dims.flows.d {
        let total: f64 = (0..dims.n_aps).map(|l| r_d[[l, k]] + floor).sum();
        for l in 0..dims.n_aps {
            d[[l, k]] = (r_d[[l, k]] + floor) / total;
        }
    }
    let mut m = Array2::<f64>::zeros((dims.n_aps, dims.flows.m));
    for k in 0..dims.flows.m {
        let total: f64 =
            (0..dims.n_aps).map(|l| r_m_tn[[l, k]] + floor).sum::<f64>() + r_m_sat[k] + floor;
        for l in 0..dims.n_aps {
            m[[l, k]] = (r_m_tn[[l, k]] + floor) / total;
        }
    }
    SteeringWeights { d, m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelSource;
    use crate::grid::PerService;
    use crate::phy::{check_alloc_structure, check_power_budgets, PhyParams};
    use crate::planner::PlannerConfig;
    use ndarray::{Array3, Array4};

    fn desk_cfg() -> GridConfig {
        GridConfig::new(2.88e6, 2, 1, 5)
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

    fn graded_channels(cfg: &GridConfig, d: &Dims) -> ChannelSet {
        let caps = cfg.subchannel_caps();
        let fr = cfg.frames_per_cycle;
        let mut tn_d = Array4::zeros((fr, d.n_aps, d.flows.d, caps.d));
        let mut tn_m = Array4::zeros((fr, d.n_aps, d.flows.m, caps.m));
        for ((e, l, k, v), g) in tn_d.indexed_iter_mut() {
            // Flow k is near AP k; cross links are 30 dB down.
            let near = if l == k % 2 { 1e-9 } else { 1e-12 };
            *g = near * (1.0 + 0.1 * (e + v) as f64);
        }
        for ((e, l, k, v), g) in tn_m.indexed_iter_mut() {
            let near = if l == k % 2 { 5e-10 } else { 5e-13 };
            *g = near * (1.0 + 0.05 * (e + v) as f64);
        }
        ChannelSet {
            source: ChannelSource::Real,
            cycle: 1,
            tn: PerService {
                d: tn_d,
                m: tn_m,
                s: Array4::zeros((0, 0, 0, 0)),
            },
            sat: PerService {
                d: Array3::zeros((0, 0, 0)),
                m: Array3::from_elem((fr, d.flows.m, caps.m), 2e-10),
                s: Array3::from_elem((fr, d.flows.s, caps.s), 3e-10),
            },
            noise_w: PerService {
                d: 1e-12,
                m: 1e-12,
                s: 1e-12,
            },
        }
    }

    #[test]
    fn desk_split_fills_the_usable_band_exactly() {
        let cfg = desk_cfg();
        // 2.34 MHz usable after guards: one D lane (720 kHz) leaves 1.62 MHz,
        // half to M floors to 2 lanes, the rest takes 5 S lanes.
        let plan = stacked_plan(&cfg, 1, 2, 5);
        assert_eq!(plan.active.d, vec![true, false, false, false]);
        let m_on: Vec<usize> = active_lanes(&plan.active.m);
        let s_on: Vec<usize> = active_lanes(&plan.active.s);
        assert_eq!(m_on, vec![3, 4]);
        assert_eq!(s_on, vec![11, 12, 13, 14, 15]);
        assert!(check_bwp_feasible(&plan, &cfg).unwrap().is_empty());
    }

    #[test]
    fn stacked_plan_sheds_lanes_until_feasible() {
        let cfg = desk_cfg();
        // Absurd requests collapse to something valid instead of panicking.
        let plan = stacked_plan(&cfg, 9, 9, 99);
        assert!(check_bwp_feasible(&plan, &cfg).unwrap().is_empty());
        assert!(plan.active.d.iter().any(|&b| b));
    }

    #[test]
    fn water_level_two_user_example() {
        // Gains 1 and 0.5 at unit noise and unit budget: the level settles at
        // the weaker user's cost, so the strong user takes the whole budget.
        let nu = water_level(&[1.0, 2.0], 1.0, 1e-12);
        assert!((nu - 2.0).abs() < 1e-9);
        let p0 = (nu - 1.0).max(0.0);
        let p1 = (nu - 2.0).max(0.0);
        assert!((p0 - 1.0).abs() < 1e-9);
        assert_eq!(p1, 0.0);
    }

    #[test]
    fn greedy_output_is_structurally_clean() {
        let cfg = desk_cfg();
        let d = dims();
        let phy = test_phy();
        let pcfg = PlannerConfig::default();
        let ctx = PlanContext {
            cfg: &cfg,
            dims: &d,
            phy: &phy,
            pcfg: &pcfg,
        };
        let ch = graded_channels(&cfg, &d);
        let traffic = TrafficTrace::zeros(&cfg, &d);
        let dec = greedy(&ctx, &ch, &traffic);
        assert!(check_bwp_feasible(&dec.bwp, &cfg).unwrap().is_empty());
        assert!(check_alloc_structure(&dec.alloc, &cfg).is_empty());
        let (violations, _) = check_power_budgets(&dec.alloc, &cfg, &phy);
        assert!(violations.is_empty(), "{violations:?}");
        dec.steering.validate().unwrap();
        assert!(dec.planned_queue_mbit.is_nan());
        // The single D lane is claimed on every downlink RB time.
        let claimed: usize = dec.alloc.a_d.iter().map(|&a| a as usize).sum();
        let dl_rbs = (0..cfg.rb_slots_per_cycle(Service::D))
            .filter(|&n| cfg.is_dl_rb(Service::D, n))
            .count();
        assert_eq!(claimed, dl_rbs * d.n_aps);
    }

    #[test]
    fn heuristic_backlog_split_moves_lanes_toward_the_loaded_service() {
        let cfg = desk_cfg();
        let d = dims();
        let phy = test_phy();
        let pcfg = PlannerConfig::default();
        let ctx = PlanContext {
            cfg: &cfg,
            dims: &d,
            phy: &phy,
            pcfg: &pcfg,
        };
        let ch = graded_channels(&cfg, &d);
        let traffic = TrafficTrace::zeros(&cfg, &d);
        // All backlog on M: M takes the whole remainder except one S lane
        // kept alive by nothing (no S demand, so zero lanes are fine).
        let all_m = heuristic(&ctx, &ch, &traffic, 1e6, 0.0);
        let m_lanes = all_m.bwp.active.m.iter().filter(|&&b| b).count();
        let s_lanes = all_m.bwp.active.s.iter().filter(|&&b| b).count();
        assert_eq!(m_lanes, 4, "1.62 MHz remainder at 360 kHz per lane");
        assert_eq!(s_lanes, 0);
        // All backlog on S: M drops out entirely.
        let all_s = heuristic(&ctx, &ch, &traffic, 0.0, 1e6);
        let m_lanes = all_s.bwp.active.m.iter().filter(|&&b| b).count();
        let s_lanes = all_s.bwp.active.s.iter().filter(|&&b| b).count();
        assert_eq!(m_lanes, 0);
        assert!(s_lanes >= 1);
        assert!(check_bwp_feasible(&all_s.bwp, &cfg).unwrap().is_empty());
    }

    #[test]
    fn m_claims_never_share_an_rb_across_the_boundary() {
        let cfg = desk_cfg();
        let d = dims();
        let phy = test_phy();
        let pcfg = PlannerConfig::default();
        let ctx = PlanContext {
            cfg: &cfg,
            dims: &d,
            phy: &phy,
            pcfg: &pcfg,
        };
        let ch = graded_channels(&cfg, &d);
        let traffic = TrafficTrace::zeros(&cfg, &d);
        let dec = greedy(&ctx, &ch, &traffic);
        for ((k, v, n), &b) in dec.alloc.b_m.indexed_iter() {
            if b != 0 {
                for l in 0..d.n_aps {
                    assert_eq!(
                        dec.alloc.a_m[[l, k, v, n]], 0,
                        "flow {k} on both sides of lane {v} rb {n}"
                    );
                }
            }
        }
        // Satellite M service reaches uplink subframes where the TN is dark.
        let ul_claims: usize = dec
            .alloc
            .b_m
            .indexed_iter()
            .filter(|((_, _, n), &b)| b != 0 && !cfg.is_dl_rb(Service::M, *n))
            .count();
        assert!(ul_claims > 0, "satellite must serve uplink subframes");
    }
}
