//! SINR, interference, and achievable-rate evaluation for the three slices.
//!
//! D flows are terrestrial-only and use the short-packet rate with a
//! dispersion penalty growing as the square root of the RB count; M flows are
//! served by access points (suffering inter-cell interference plus satellite
//! leakage) and by the satellite (suffering terrestrial leakage); S flows are
//! satellite-only and interference-free by band-plan construction.

use crate::channel::ChannelSet;
use crate::grid::{BwpPlan, Dims, GridConfig, Service};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

/// Power budgets, the D SINR floor, and the short-packet parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhyParams {
    pub p_ap_max_w: f64,
    pub p_sat_max_w: f64,
    /// Linear SINR floor for assigned D RBs.
    pub gamma0_d: f64,
    /// Short-packet decoding error probability.
    pub p_err: f64,
}

impl PhyParams {
    /// Dispersion penalty coefficient for the D slice:
    /// `sqrt(w_D / T_D) * Qinv(p_err) / ln 2` (unit dispersion).
    pub fn chi_d(&self, cfg: &GridConfig) -> f64 {
        let w = cfg.rb_bandwidth_hz(Service::D);
        let t = cfg.rb_duration_s(Service::D);
        (w / t).sqrt() * q_inverse(self.p_err) / std::f64::consts::LN_2
    }
}

/// Inverse Gaussian tail probability: x with Q(x) = p, via the inverse
/// complementary error function refined by one Newton step on Q itself.
pub fn q_inverse(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "tail probability out of range: {p}");
    let mut x = std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    for _ in 0..2 {
        let q = 0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2);
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf > 0.0 {
            x -= (p - q) / pdf;
        }
    }
    x
}

/// Which server carries an M-slice RB.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MServer {
    Ap(usize),
    Sat,
}

/// One cycle's complete allocation: powers, associations, and the band plan.
///
/// Terrestrial tensors are `[ap][flow][lane][rb_time]`, satellite tensors
/// `[flow][lane][rb_time]`, with RB times local to the cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationState {
    pub p_d: Array4<f64>,
    pub p_m: Array4<f64>,
    pub p0_m: Array3<f64>,
    pub p0_s: Array3<f64>,
    pub a_d: Array4<u8>,
    pub a_m: Array4<u8>,
    pub b_m: Array3<u8>,
    pub b_s: Array3<u8>,
    pub bwp: BwpPlan,
}

impl AllocationState {
    pub fn zeros(cfg: &GridConfig, dims: &Dims) -> Self {
        let caps = cfg.subchannel_caps();
        let n = |x| cfg.rb_slots_per_cycle(x);
        AllocationState {
            p_d: Array4::zeros((dims.n_aps, dims.flows.d, caps.d, n(Service::D))),
            p_m: Array4::zeros((dims.n_aps, dims.flows.m, caps.m, n(Service::M))),
            p0_m: Array3::zeros((dims.flows.m, caps.m, n(Service::M))),
            p0_s: Array3::zeros((dims.flows.s, caps.s, n(Service::S))),
            a_d: Array4::zeros((dims.n_aps, dims.flows.d, caps.d, n(Service::D))),
            a_m: Array4::zeros((dims.n_aps, dims.flows.m, caps.m, n(Service::M))),
            b_m: Array3::zeros((dims.flows.m, caps.m, n(Service::M))),
            b_s: Array3::zeros((dims.flows.s, caps.s, n(Service::S))),
            bwp: BwpPlan::empty(cfg),
        }
    }
}

/// Inter-cell interference at the service-`x` flow `k` of AP `l` on lane `v`
/// at RB time `n`: the sum of all co-channel same-slice powers of other APs
/// weighted by their gain toward the victim.
pub fn ici_power(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    x: Service,
    l: usize,
    k: usize,
    v: usize,
    n: usize,
) -> f64 {
    let fr = cfg.frame_of_rb(x, n);
    let (p, a) = match x {
        Service::D => (&alloc.p_d, &alloc.a_d),
        Service::M => (&alloc.p_m, &alloc.a_m),
        Service::S => return 0.0,
    };
    let n_aps = p.dim().0;
    let n_flows = p.dim().1;
    let mut acc = 0.0;
    for i in 0..n_aps {
        if i == l {
            continue;
        }
        let gain = ch.tn_gain(x, fr, i, k, v);
        for j in 0..n_flows {
            if a[[i, j, v, n]] != 0 {
                acc += p[[i, j, v, n]] * gain;
            }
        }
    }
    acc
}

/// Satellite leakage into the terrestrially served M flow `k` on `(v, n)`.
pub fn isyi_tn(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    k: usize,
    v: usize,
    n: usize,
) -> f64 {
    let fr = cfg.frame_of_rb(Service::M, n);
    let gain = ch.sat_gain(Service::M, fr, k, v);
    let mut acc = 0.0;
    for j in 0..alloc.p0_m.dim().0 {
        if alloc.b_m[[j, v, n]] != 0 {
            acc += alloc.p0_m[[j, v, n]] * gain;
        }
    }
    acc
}

/// Terrestrial leakage into the satellite-served M flow `k` on `(v, n)`.
pub fn isyi_sat(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    k: usize,
    v: usize,
    n: usize,
) -> f64 {
    let fr = cfg.frame_of_rb(Service::M, n);
    let (n_aps, n_flows, _, _) = alloc.p_m.dim();
    let mut acc = 0.0;
    for i in 0..n_aps {
        let gain = ch.tn_gain(Service::M, fr, i, k, v);
        for j in 0..n_flows {
            if alloc.a_m[[i, j, v, n]] != 0 {
                acc += alloc.p_m[[i, j, v, n]] * gain;
            }
        }
    }
    acc
}

/// SINR of the D RB `(l, k, v, n)`; zero when unassigned.
pub fn sinr_d(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    l: usize,
    k: usize,
    v: usize,
    n: usize,
) -> f64 {
    if alloc.a_d[[l, k, v, n]] == 0 {
        return 0.0;
    }
    let fr = cfg.frame_of_rb(Service::D, n);
    let num = alloc.p_d[[l, k, v, n]] * ch.tn_gain(Service::D, fr, l, k, v);
    let den = ici_power(alloc, ch, cfg, Service::D, l, k, v, n) + ch.noise_w.d;
    num / den
}

/// Short-packet D rate over subframe `sf0` for `(l, k)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DRateOutcome {
    pub rate_bps: f64,
    pub rb_count: usize,
    pub min_sinr: f64,
    /// Whether every assigned RB met the SINR floor.
    pub sinr_floor_ok: bool,
}

/// Aggregate short-packet rate of `(l, k)` over the D RBs of subframe `sf0`:
/// `w_D * sum log2(1+sinr) - chi_D * sqrt(#RBs)`, floored at zero. RBs below
/// the SINR floor are flagged but still counted (benchmarks need the value).
pub fn rate_d_subframe(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    phy: &PhyParams,
    l: usize,
    k: usize,
    sf0: usize,
) -> DRateOutcome {
    let n_per_sf = cfg.rbs_per_subframe(Service::D);
    let v_n = alloc.a_d.dim().2;
    let w = cfg.rb_bandwidth_hz(Service::D);
    let mut sum_log = 0.0;
    let mut count = 0usize;
    let mut min_sinr = f64::INFINITY;
    for v in 0..v_n {
        for n in sf0 * n_per_sf..(sf0 + 1) * n_per_sf {
            if alloc.a_d[[l, k, v, n]] != 0 {
                let g = sinr_d(alloc, ch, cfg, l, k, v, n);
                sum_log += (1.0 + g).log2();
                count += 1;
                min_sinr = min_sinr.min(g);
            }
        }
    }
    if count == 0 {
        return DRateOutcome {
            rate_bps: 0.0,
            rb_count: 0,
            min_sinr: 0.0,
            sinr_floor_ok: true,
        };
    }
    let rate = (w * sum_log - phy.chi_d(cfg) * (count as f64).sqrt()).max(0.0);
    DRateOutcome {
        rate_bps: rate,
        rb_count: count,
        min_sinr,
        sinr_floor_ok: min_sinr >= phy.gamma0_d,
    }
}

/// Rate of the M RB `(server, k, v, n)` in bit/s; zero when unassigned.
pub fn rate_m(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    server: MServer,
    k: usize,
    v: usize,
    n: usize,
) -> f64 {
    let w = cfg.rb_bandwidth_hz(Service::M);
    let fr = cfg.frame_of_rb(Service::M, n);
    let gamma = match server {
        MServer::Ap(l) => {
            if alloc.a_m[[l, k, v, n]] == 0 {
                return 0.0;
            }
            let num = alloc.p_m[[l, k, v, n]] * ch.tn_gain(Service::M, fr, l, k, v);
            let den = ici_power(alloc, ch, cfg, Service::M, l, k, v, n)
                + isyi_tn(alloc, ch, cfg, k, v, n)
                + ch.noise_w.m;
            num / den
        }
        MServer::Sat => {
            if alloc.b_m[[k, v, n]] == 0 {
                return 0.0;
            }
            let num = alloc.p0_m[[k, v, n]] * ch.sat_gain(Service::M, fr, k, v);
            let den = isyi_sat(alloc, ch, cfg, k, v, n) + ch.noise_w.m;
            num / den
        }
    };
    w * (1.0 + gamma).log2()
}

/// Aggregate M rate of `(server, k)` at RB time `n`, summed over lanes.
pub fn m_rate_slot(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    server: MServer,
    k: usize,
    n: usize,
) -> f64 {
    (0..alloc.b_m.dim().1)
        .map(|v| rate_m(alloc, ch, cfg, server, k, v, n))
        .sum()
}

/// Rate of the satellite-only S RB `(k, v, n)`; interference-free.
pub fn rate_s(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    k: usize,
    v: usize,
    n: usize,
) -> f64 {
    if alloc.b_s[[k, v, n]] == 0 {
        return 0.0;
    }
    let fr = cfg.frame_of_rb(Service::S, n);
    let w = cfg.rb_bandwidth_hz(Service::S);
    let snr = alloc.p0_s[[k, v, n]] * ch.sat_gain(Service::S, fr, k, v) / ch.noise_w.s;
    w * (1.0 + snr).log2()
}

/// Aggregate S rate of `k` at RB time `n`.
pub fn s_rate_slot(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    k: usize,
    n: usize,
) -> f64 {
    (0..alloc.b_s.dim().1)
        .map(|v| rate_s(alloc, ch, cfg, k, v, n))
        .sum()
}

/// One per-slot budget overrun.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetViolation {
    /// None for the satellite.
    pub ap: Option<usize>,
    /// 0-based time slot within the cycle.
    pub slot: usize,
    pub power_w: f64,
    pub budget_w: f64,
}

/// Check the per-time-slot sum-power budgets of every AP and the satellite.
/// Returns violations and the per-slot minimum slack (AP side, satellite side).
pub fn check_power_budgets(
    alloc: &AllocationState,
    cfg: &GridConfig,
    phy: &PhyParams,
) -> (Vec<BudgetViolation>, Vec<(f64, f64)>) {
    let slots = cfg.slots_per_cycle();
    let ratio_m = cfg.rbs_per_subframe(Service::D) / cfg.rbs_per_subframe(Service::M);
    let ratio_s = cfg.rbs_per_subframe(Service::D) / cfg.rbs_per_subframe(Service::S);
    let (n_aps, kd, vd, _) = alloc.p_d.dim();
    let (_, km, vm, _) = alloc.p_m.dim();
    let (ks, vs, _) = alloc.p0_s.dim();
    let tol = 1e-9 * phy.p_ap_max_w.max(phy.p_sat_max_w);

    let mut violations = Vec::new();
    let mut slack = Vec::with_capacity(slots);
    for t in 0..slots {
        let n_m = t / ratio_m;
        let n_s = t / ratio_s;
        let mut ap_slack = f64::INFINITY;
        for l in 0..n_aps {
            let mut total = 0.0;
            for k in 0..kd {
                for v in 0..vd {
                    total += alloc.p_d[[l, k, v, t]];
                }
            }
            for k in 0..km {
                for v in 0..vm {
                    total += alloc.p_m[[l, k, v, n_m]];
                }
            }
            if total > phy.p_ap_max_w + tol {
                violations.push(BudgetViolation {
                    ap: Some(l),
                    slot: t,
                    power_w: total,
                    budget_w: phy.p_ap_max_w,
                });
            }
            ap_slack = ap_slack.min(phy.p_ap_max_w - total);
        }
        let mut sat_total = 0.0;
        for k in 0..km {
            for v in 0..vm {
                sat_total += alloc.p0_m[[k, v, n_m]];
            }
        }
        for k in 0..ks {
            for v in 0..vs {
                sat_total += alloc.p0_s[[k, v, n_s]];
            }
        }
        if sat_total > phy.p_sat_max_w + tol {
            violations.push(BudgetViolation {
                ap: None,
                slot: t,
                power_w: sat_total,
                budget_w: phy.p_sat_max_w,
            });
        }
        slack.push((ap_slack, phy.p_sat_max_w - sat_total));
    }
    (violations, slack)
}

/// A violated structural allocation rule.
#[derive(Clone, Debug, PartialEq)]
pub enum StructViolation {
    /// Association on a lane the band plan leaves inactive.
    InactiveLane { service: Service, v: usize },
    /// More than one flow on one AP RB.
    ApRbShared { service: Service, l: usize, v: usize, n: usize },
    /// A D flow served by more than one AP on one RB.
    DMultiAp { k: usize, v: usize, n: usize },
    /// More than one flow on one satellite RB.
    SatRbShared { service: Service, v: usize, n: usize },
    /// An M flow served terrestrially and by the satellite on one RB.
    MServerConflict { k: usize, v: usize, n: usize },
    /// Positive power without association.
    PowerWithoutAssoc { service: Service, n: usize },
    /// Terrestrial power in an uplink subframe.
    UplinkPower { service: Service, n: usize },
}

/// Structural rules tying associations to the band plan and to exclusivity:
/// lane gating, one flow per AP RB, one AP per D flow RB, one flow per
/// satellite RB, one server per M flow RB, power only with association, and
/// terrestrial silence in uplink subframes.
pub fn check_alloc_structure(alloc: &AllocationState, cfg: &GridConfig) -> Vec<StructViolation> {
    let mut out = Vec::new();
    let (n_aps, kd, vd, nd) = alloc.a_d.dim();
    let (_, km, vm, nm) = alloc.a_m.dim();
    let (ks, vs, ns) = alloc.b_s.dim();

    let lane_used_d: Vec<bool> = (0..vd)
        .map(|v| {
            (0..n_aps).any(|l| {
                (0..kd).any(|k| (0..nd).any(|n| alloc.a_d[[l, k, v, n]] != 0))
            })
        })
        .collect();
    let lane_used_m: Vec<bool> = (0..vm)
        .map(|v| {
            (0..n_aps)
                .any(|l| (0..km).any(|k| (0..nm).any(|n| alloc.a_m[[l, k, v, n]] != 0)))
                || (0..km).any(|k| (0..nm).any(|n| alloc.b_m[[k, v, n]] != 0))
        })
        .collect();
    let lane_used_s: Vec<bool> = (0..vs)
        .map(|v| (0..ks).any(|k| (0..ns).any(|n| alloc.b_s[[k, v, n]] != 0)))
        .collect();
    for (v, used) in lane_used_d.iter().enumerate() {
        if *used && !alloc.bwp.active.d[v] {
            out.push(StructViolation::InactiveLane { service: Service::D, v });
        }
    }
    for (v, used) in lane_used_m.iter().enumerate() {
        if *used && !alloc.bwp.active.m[v] {
            out.push(StructViolation::InactiveLane { service: Service::M, v });
        }
    }
    for (v, used) in lane_used_s.iter().enumerate() {
        if *used && !alloc.bwp.active.s[v] {
            out.push(StructViolation::InactiveLane { service: Service::S, v });
        }
    }

    for l in 0..n_aps {
        for v in 0..vd {
            for n in 0..nd {
                if (0..kd).map(|k| alloc.a_d[[l, k, v, n]] as usize).sum::<usize>() > 1 {
                    out.push(StructViolation::ApRbShared { service: Service::D, l, v, n });
                }
            }
        }
        for v in 0..vm {
            for n in 0..nm {
                if (0..km).map(|k| alloc.a_m[[l, k, v, n]] as usize).sum::<usize>() > 1 {
                    out.push(StructViolation::ApRbShared { service: Service::M, l, v, n });
                }
            }
        }
    }
    for k in 0..kd {
        for v in 0..vd {
            for n in 0..nd {
                if (0..n_aps).map(|l| alloc.a_d[[l, k, v, n]] as usize).sum::<usize>() > 1 {
                    out.push(StructViolation::DMultiAp { k, v, n });
                }
            }
        }
    }
    for v in 0..vm {
        for n in 0..nm {
            if (0..km).map(|k| alloc.b_m[[k, v, n]] as usize).sum::<usize>() > 1 {
                out.push(StructViolation::SatRbShared { service: Service::M, v, n });
            }
        }
    }
    for v in 0..vs {
        for n in 0..ns {
            if (0..ks).map(|k| alloc.b_s[[k, v, n]] as usize).sum::<usize>() > 1 {
                out.push(StructViolation::SatRbShared { service: Service::S, v, n });
            }
        }
    }
    for k in 0..km {
        for v in 0..vm {
            for n in 0..nm {
                let tn: usize = (0..n_aps).map(|l| alloc.a_m[[l, k, v, n]] as usize).sum();
                if tn + alloc.b_m[[k, v, n]] as usize > 1 {
                    out.push(StructViolation::MServerConflict { k, v, n });
                }
            }
        }
    }

    let gated = [
        (Service::D, &alloc.p_d, &alloc.a_d),
        (Service::M, &alloc.p_m, &alloc.a_m),
    ];
    for (x, p, a) in gated {
        for ((l, k, v, n), pw) in p.indexed_iter() {
            if *pw > 0.0 {
                if a[[l, k, v, n]] == 0 {
                    out.push(StructViolation::PowerWithoutAssoc { service: x, n });
                }
                if !cfg.is_dl_rb(x, n) {
                    out.push(StructViolation::UplinkPower { service: x, n });
                }
            }
        }
    }
    for ((k, v, n), pw) in alloc.p0_m.indexed_iter() {
        if *pw > 0.0 && alloc.b_m[[k, v, n]] == 0 {
            out.push(StructViolation::PowerWithoutAssoc { service: Service::M, n });
        }
    }
    for ((k, v, n), pw) in alloc.p0_s.indexed_iter() {
        if *pw > 0.0 && alloc.b_s[[k, v, n]] == 0 {
            out.push(StructViolation::PowerWithoutAssoc { service: Service::S, n });
        }
    }
    out
}
