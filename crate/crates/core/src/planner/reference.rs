//! Partitioned-decision benchmark.
//!
//! Splits the joint problem the way a layered controller would: bandwidth is
//! apportioned up front in proportion to each service's offered bits plus
//! standing backlog, traffic steering follows the previous cycle's per-node
//! served-capacity proxies, and the remaining power/association problem is
//! solved with every interference term dropped. Each sub-decision is
//! individually sensible; the benchmark measures what the decoupling and the
//! ignored coupling cost.

use ndarray::Array1;

use super::greedy::stacked_plan;
use super::{plan_joint, CycleDecision, JointSpec, PlanContext, PlannerError};
use crate::channel::ChannelSet;
use crate::grid::{Dims, GridConfig, Service};
use crate::phy::{m_rate_slot, rate_d_subframe, AllocationState, MServer, PhyParams};
use crate::queueing::{QueueCaps, QueueState, SteeringWeights, TrafficTrace};

/// Per-node served-capacity proxies of one cycle's allocation, used to steer
/// the following cycle.
#[derive(Clone, Debug)]
pub struct NodeRates {
    /// Total D bits each AP's allocation could serve over the cycle.
    pub d_ap: Array1<f64>,
    /// Total M bits each AP's allocation could serve over the cycle.
    pub m_ap: Array1<f64>,
    /// Total M bits the satellite's allocation could serve over the cycle.
    pub m_sat: f64,
}

/// Capacity proxies of `alloc` at the channel set it ran against: per-slot
/// rates integrated over the cycle, ignoring queue emptiness.
pub fn node_rates(
    alloc: &AllocationState,
    ch: &ChannelSet,
    cfg: &GridConfig,
    phy: &PhyParams,
) -> NodeRates {
    let (n_aps, kd, _, _) = alloc.p_d.dim();
    let km = alloc.p_m.dim().1;
    let t_d = cfg.rb_duration_s(Service::D);
    let t_m = cfg.rb_duration_s(Service::M);
    let n_m = cfg.rb_slots_per_cycle(Service::M);
    let mut d_ap = Array1::zeros(n_aps);
    let mut m_ap = Array1::zeros(n_aps);
    for l in 0..n_aps {
        for sf in 0..cfg.subframes_per_cycle() {
            if !cfg.is_dl_subframe(sf) {
                continue;
            }
            for k in 0..kd {
                d_ap[l] += t_d * rate_d_subframe(alloc, ch, cfg, phy, l, k, sf).rate_bps;
            }
        }
        for k in 0..km {
            for n in 0..n_m {
                m_ap[l] += t_m * m_rate_slot(alloc, ch, cfg, MServer::Ap(l), k, n);
            }
        }
    }
    let mut m_sat = 0.0;
    for k in 0..km {
        for n in 0..n_m {
            m_sat += t_m * m_rate_slot(alloc, ch, cfg, MServer::Sat, k, n);
        }
    }
    NodeRates { d_ap, m_ap, m_sat }
}

/// Lane counts proportional to per-service demand over the usable band; any
/// demanded service keeps at least one lane, and the stacked plan sheds lanes
/// until the result is feasible.
fn proportional_lanes(cfg: &GridConfig, demand: [f64; 3]) -> (usize, usize, usize) {
    let usable = cfg.total_bandwidth_hz - cfg.guard_bandwidth_hz();
    let total: f64 = demand.iter().sum();
    let shares = if total > 0.0 {
        [demand[0] / total, demand[1] / total, demand[2] / total]
    } else {
        [1.0 / 3.0; 3]
    };
    let lanes = |share: f64, x: Service, demanded: bool| -> usize {
        let n = (share * usable / cfg.rb_bandwidth_hz(x)).round() as usize;
        if demanded {
            n.max(1)
        } else {
            n
        }
    };
    (
        lanes(shares[0], Service::D, total <= 0.0 || demand[0] > 0.0),
        lanes(shares[1], Service::M, total <= 0.0 || demand[1] > 0.0),
        lanes(shares[2], Service::S, total <= 0.0 || demand[2] > 0.0),
    )
}

/// Steering proportional to the previous cycle's per-node capacity proxies:
/// D splits across APs by D capacity, M splits across APs and the satellite
/// by M capacity. A small floor keeps idle nodes reachable and makes the
/// all-zero case uniform.
fn steering_from_rates(rates: &NodeRates, dims: &Dims) -> SteeringWeights {
    let floor = 1e-9;
    let mut w = SteeringWeights::uniform(dims);
    let d_total: f64 = rates.d_ap.iter().map(|r| r + floor).sum();
    let m_total: f64 = rates.m_ap.iter().map(|r| r + floor).sum::<f64>() + rates.m_sat + floor;
    for l in 0..dims.n_aps {
        let d_share = (rates.d_ap[l] + floor) / d_total;
        let m_share = (rates.m_ap[l] + floor) / m_total;
        for k in 0..dims.flows.d {
            w.d[[l, k]] = d_share;
        }
        for k in 0..dims.flows.m {
            w.m[[l, k]] = m_share;
        }
    }
    w
}

/// Plan one cycle with partitioned decisions: demand-proportional bandwidth,
/// steering from `prev` (uniform on the first cycle), and an
/// interference-blind joint solve under both fixed choices.
pub fn reference(
    ctx: &PlanContext,
    channels: &ChannelSet,
    traffic: &TrafficTrace,
    queues: &QueueState,
    caps: &QueueCaps,
    prev: Option<&NodeRates>,
) -> Result<CycleDecision, PlannerError> {
    let demand = [
        traffic.total_bits(Service::D),
        traffic.total_bits(Service::M) + queues.tn_m.sum() + queues.sat_m.sum(),
        traffic.total_bits(Service::S) + queues.sat_s.sum(),
    ];
    let (n_d, n_m, n_s) = proportional_lanes(ctx.cfg, demand);
    let plan = stacked_plan(ctx.cfg, n_d, n_m, n_s);
    let steering = match prev {
        Some(r) => steering_from_rates(r, ctx.dims),
        None => SteeringWeights::uniform(ctx.dims),
    };
    plan_joint(
        ctx,
        &JointSpec {
            channels,
            traffic,
            queues,
            caps,
            drop_interference: true,
            fixed_steering: Some(&steering),
            lane_mask: Some(&plan),
            stage: "reference",
        },
    )
}
