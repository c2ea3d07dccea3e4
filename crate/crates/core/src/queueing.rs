//! Traffic steering, arrival injection, queue evolution, and the
//! queue-congestion objective.
//!
//! Arrivals of one cycle are split across servers by per-flow steering
//! weights, injected at the first RB time of every frame, and drained per RB
//! time as `q+ = max(0, q + lambda - T*R)` on each slice's own grid. The
//! congestion objective is the mean over RB times of the post-step system
//! queue, M and S slices only: D buffers must be cleared within each subframe
//! and are checked against a per-subframe service rule instead of queueing.

use crate::channel::{ChannelSet, ChannelSource};
use crate::grid::{Dims, GridConfig, PerService, Service};
use crate::phy::{m_rate_slot, rate_d_subframe, s_rate_slot, AllocationState, MServer, PhyParams};
use ndarray::{Array1, Array2, Array3};
use thiserror::Error;

/// Bits per reported megabyte.
pub const BITS_PER_MB: f64 = 8e6;

const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("steering weights of {service} flow {flow} sum to {sum}: {rule}")]
    WeightSum {
        service: Service,
        flow: usize,
        sum: f64,
        rule: &'static str,
    },
    #[error("steering weight of {service} flow {flow} at AP {ap} is {value}, outside [0,1]")]
    WeightRange {
        service: Service,
        flow: usize,
        ap: usize,
        value: f64,
    },
}

/// Per-flow traffic split across servers.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringWeights {
    /// `d[[l, k]]`: share of D flow `k` handled by AP `l`; terrestrial-only
    /// service, so each flow's shares sum to one.
    pub d: Array2<f64>,
    /// `m[[l, k]]`: share of M flow `k` handled by AP `l`; each flow's shares
    /// sum to at most one and the satellite carries the remainder.
    pub m: Array2<f64>,
}

impl SteeringWeights {
    /// Neutral default: D uniform across APs, M half terrestrial (uniform)
    /// and half satellite.
    pub fn uniform(dims: &Dims) -> Self {
        let l = dims.n_aps as f64;
        SteeringWeights {
            d: Array2::from_elem((dims.n_aps, dims.flows.d), 1.0 / l),
            m: Array2::from_elem((dims.n_aps, dims.flows.m), 0.5 / l),
        }
    }

    /// Satellite share of M flow `k`.
    pub fn sat_share(&self, k: usize) -> f64 {
        (1.0 - self.m.column(k).sum()).max(0.0)
    }

    pub fn validate(&self) -> Result<(), QueueError> {
        for (x, w, rule) in [
            (Service::D, &self.d, "must equal 1"),
            (Service::M, &self.m, "must not exceed 1"),
        ] {
            for ((l, k), &val) in w.indexed_iter() {
                if !(-WEIGHT_TOL..=1.0 + WEIGHT_TOL).contains(&val) {
                    return Err(QueueError::WeightRange {
                        service: x,
                        flow: k,
                        ap: l,
                        value: val,
                    });
                }
            }
            for k in 0..w.dim().1 {
                let sum = w.column(k).sum();
                let bad = match x {
                    Service::D => (sum - 1.0).abs() > WEIGHT_TOL,
                    _ => sum > 1.0 + WEIGHT_TOL,
                };
                if bad {
                    return Err(QueueError::WeightSum {
                        service: x,
                        flow: k,
                        sum,
                        rule,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Offered traffic of one cycle, per flow: D per subframe, M and S per frame,
/// all in bits.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficTrace {
    /// `d[[k, sf]]` over the cycle's subframes.
    pub d: Array2<f64>,
    /// `m[[k, frame]]` over the cycle's frames.
    pub m: Array2<f64>,
    /// `s[[k, frame]]` over the cycle's frames.
    pub s: Array2<f64>,
}

impl TrafficTrace {
    pub fn zeros(cfg: &GridConfig, dims: &Dims) -> Self {
        TrafficTrace {
            d: Array2::zeros((dims.flows.d, cfg.subframes_per_cycle())),
            m: Array2::zeros((dims.flows.m, cfg.frames_per_cycle)),
            s: Array2::zeros((dims.flows.s, cfg.frames_per_cycle)),
        }
    }

    pub fn total_bits(&self, x: Service) -> f64 {
        match x {
            Service::D => self.d.sum(),
            Service::M => self.m.sum(),
            Service::S => self.s.sum(),
        }
    }
}

/// Steered per-node arrival schedule of one cycle, in bits.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleArrivals {
    /// `d_tn[[l, k, sf]]`.
    pub d_tn: Array3<f64>,
    /// `m_tn[[l, k, frame]]`.
    pub m_tn: Array3<f64>,
    /// `m_sat[[k, frame]]`.
    pub m_sat: Array2<f64>,
    /// `s_sat[[k, frame]]`.
    pub s_sat: Array2<f64>,
}

/// Split a cycle's offered traffic across servers. D traffic goes to APs by
/// `weights.d`; M traffic goes to APs by `weights.m` with the remainder to
/// the satellite; S traffic is satellite-only. Per-flow totals are conserved.
pub fn steer_arrivals(
    trace: &TrafficTrace,
    weights: &SteeringWeights,
) -> Result<CycleArrivals, QueueError> {
    weights.validate()?;
    let (kd, n_sf) = trace.d.dim();
    let (km, n_fr) = trace.m.dim();
    let n_aps = weights.d.dim().0;
    assert_eq!(weights.d.dim().1, kd, "D weight/trace flow mismatch");
    assert_eq!(weights.m.dim(), (n_aps, km), "M weight/trace flow mismatch");

    let mut d_tn = Array3::zeros((n_aps, kd, n_sf));
    for ((l, k, s), a) in d_tn.indexed_iter_mut() {
        *a = weights.d[[l, k]] * trace.d[[k, s]];
    }
    let mut m_tn = Array3::zeros((n_aps, km, n_fr));
    for ((l, k, e), a) in m_tn.indexed_iter_mut() {
        *a = weights.m[[l, k]] * trace.m[[k, e]];
    }
    let mut m_sat = Array2::zeros((km, n_fr));
    for ((k, e), a) in m_sat.indexed_iter_mut() {
        *a = weights.sat_share(k) * trace.m[[k, e]];
    }
    Ok(CycleArrivals {
        d_tn,
        m_tn,
        m_sat,
        s_sat: trace.s.clone(),
    })
}

/// Queue lengths in bits at one instant: M flows at each AP, M and S flows at
/// the satellite. D flows hold no queue across subframes.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueState {
    /// `tn_m[[l, k]]`.
    pub tn_m: Array2<f64>,
    pub sat_m: Array1<f64>,
    pub sat_s: Array1<f64>,
}

impl QueueState {
    pub fn zeros(dims: &Dims) -> Self {
        QueueState {
            tn_m: Array2::zeros((dims.n_aps, dims.flows.m)),
            sat_m: Array1::zeros(dims.flows.m),
            sat_s: Array1::zeros(dims.flows.s),
        }
    }

    pub fn total_bits(&self) -> f64 {
        self.tn_m.sum() + self.sat_m.sum() + self.sat_s.sum()
    }
}

/// Per-node queue caps in bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueueCaps {
    /// Cap on each AP's total M queue.
    pub ap_m_bits: f64,
    /// Cap on the satellite's total M queue.
    pub sat_m_bits: f64,
    /// Cap on the satellite's total S queue.
    pub sat_s_bits: f64,
}

/// One queue step for an arbitrary queue family:
/// `q+ = max(0, q + arrivals - served)` elementwise, arrivals gated by
/// `inject`. The caller decides injection via [`GridConfig::is_injection_rb`]
/// (the first RB time of each frame).
pub fn inject_and_step<D: ndarray::Dimension>(
    queue: &mut ndarray::Array<f64, D>,
    arrivals: &ndarray::Array<f64, D>,
    served_bits: &ndarray::Array<f64, D>,
    inject: bool,
) {
    ndarray::Zip::from(queue)
        .and(arrivals)
        .and(served_bits)
        .for_each(|q, a, s| {
            let lam = if inject { *a } else { 0.0 };
            *q = (*q + lam - *s).max(0.0);
        });
}

/// Post-step queue history of one cycle, leading axis the slice's RB time.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueTrajectory {
    /// `tn_m[[n, l, k]]`.
    pub tn_m: Array3<f64>,
    /// `sat_m[[n, k]]`.
    pub sat_m: Array2<f64>,
    /// `sat_s[[n, k]]`.
    pub sat_s: Array2<f64>,
}

/// Congestion objective components in bits: each is the mean over its slice's
/// RB times of the summed post-step queues.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveBreakdown {
    pub tn_m_bits: f64,
    pub sat_m_bits: f64,
    pub sat_s_bits: f64,
}

impl ObjectiveBreakdown {
    pub fn total_bits(&self) -> f64 {
        self.tn_m_bits + self.sat_m_bits + self.sat_s_bits
    }
}

/// Mean system queue length over one cycle's history.
pub fn objective(traj: &QueueTrajectory) -> ObjectiveBreakdown {
    let n_m = traj.tn_m.dim().0.max(1) as f64;
    let n_s = traj.sat_s.dim().0.max(1) as f64;
    ObjectiveBreakdown {
        tn_m_bits: traj.tn_m.sum() / n_m,
        sat_m_bits: traj.sat_m.sum() / n_m,
        sat_s_bits: traj.sat_s.sum() / n_s,
    }
}

/// Which node's queue cap was exceeded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueNode {
    Ap(usize),
    SatM,
    SatS,
}

/// A queue-cap overrun observed during replay (measured, never clamped).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapViolation {
    pub node: QueueNode,
    /// RB time of the node's slice grid.
    pub rb_time: usize,
    pub total_bits: f64,
    pub cap_bits: f64,
}

/// Outcome of replaying one cycle's allocation against an environment.
#[derive(Clone, Debug)]
pub struct ReplayOutcome {
    pub trajectory: QueueTrajectory,
    pub objective: ObjectiveBreakdown,
    pub final_queues: QueueState,
    pub cap_violations: Vec<CapViolation>,
    pub d_offered_bits: f64,
    pub d_unserved_bits: f64,
    /// Whether every (AP, D flow, subframe) cleared its arrivals.
    pub d_all_served: bool,
    /// Bits actually drained per slice (D counts cleared arrivals).
    pub served_bits: PerService<f64>,
}

impl ReplayOutcome {
    pub fn d_unserved_fraction(&self) -> f64 {
        if self.d_offered_bits > 0.0 {
            self.d_unserved_bits / self.d_offered_bits
        } else {
            0.0
        }
    }
}

/// Replay one cycle: evolve M and S queues per RB time under the allocation's
/// service rates, check D subframe clearing, and measure cap overruns.
///
/// Metrics are only meaningful against the real environment, so twin channel
/// sets are rejected.
pub fn replay_cycle(
    alloc: &AllocationState,
    ch: &ChannelSet,
    arrivals: &CycleArrivals,
    initial: &QueueState,
    caps: &QueueCaps,
    cfg: &GridConfig,
    phy: &PhyParams,
) -> ReplayOutcome {
    assert_eq!(
        ch.source,
        ChannelSource::Real,
        "replay requires real-environment channels"
    );
    let (n_aps, km) = initial.tn_m.dim();
    let ks = initial.sat_s.len();
    let kd = arrivals.d_tn.dim().1;
    let n_m_total = cfg.rb_slots_per_cycle(Service::M);
    let n_s_total = cfg.rb_slots_per_cycle(Service::S);
    let t_m = cfg.rb_duration_s(Service::M);
    let t_s = cfg.rb_duration_s(Service::S);
    let t_d = cfg.rb_duration_s(Service::D);

    let mut state = initial.clone();
    let mut traj = QueueTrajectory {
        tn_m: Array3::zeros((n_m_total, n_aps, km)),
        sat_m: Array2::zeros((n_m_total, km)),
        sat_s: Array2::zeros((n_s_total, ks)),
    };
    let mut cap_violations = Vec::new();
    let mut served = PerService::uniform(0.0);

    // M slice: terrestrial and satellite queues share the M grid.
    for n in 0..n_m_total {
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
        for l in 0..n_aps {
            for k in 0..km {
                served.m += (state.tn_m[[l, k]] + lam_tn[[l, k]]).min(cap_tn[[l, k]]);
            }
        }
        for k in 0..km {
            served.m += (state.sat_m[k] + lam_sat[k]).min(cap_sat[k]);
        }
        inject_and_step(&mut state.tn_m, &lam_tn, &cap_tn, true);
        inject_and_step(&mut state.sat_m, &lam_sat, &cap_sat, true);
        for l in 0..n_aps {
            traj.tn_m
                .slice_mut(ndarray::s![n, l, ..])
                .assign(&state.tn_m.row(l));
            let total = state.tn_m.row(l).sum();
            if total > caps.ap_m_bits {
                cap_violations.push(CapViolation {
                    node: QueueNode::Ap(l),
                    rb_time: n,
                    total_bits: total,
                    cap_bits: caps.ap_m_bits,
                });
            }
        }
        traj.sat_m.slice_mut(ndarray::s![n, ..]).assign(&state.sat_m);
        let total = state.sat_m.sum();
        if total > caps.sat_m_bits {
            cap_violations.push(CapViolation {
                node: QueueNode::SatM,
                rb_time: n,
                total_bits: total,
                cap_bits: caps.sat_m_bits,
            });
        }
    }

    // S slice.
    for n in 0..n_s_total {
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
        for k in 0..ks {
            served.s += (state.sat_s[k] + lam[k]).min(cap[k]);
        }
        inject_and_step(&mut state.sat_s, &lam, &cap, true);
        traj.sat_s.slice_mut(ndarray::s![n, ..]).assign(&state.sat_s);
        let total = state.sat_s.sum();
        if total > caps.sat_s_bits {
            cap_violations.push(CapViolation {
                node: QueueNode::SatS,
                rb_time: n,
                total_bits: total,
                cap_bits: caps.sat_s_bits,
            });
        }
    }

    // D slice: per-subframe clearing, no carried queue.
    let mut d_offered = 0.0;
    let mut d_unserved = 0.0;
    let mut d_all_served = true;
    for sf0 in 0..cfg.subframes_per_cycle() {
        for l in 0..n_aps {
            for k in 0..kd {
                let offered = arrivals.d_tn[[l, k, sf0]];
                let capacity = t_d * rate_d_subframe(alloc, ch, cfg, phy, l, k, sf0).rate_bps;
                d_offered += offered;
                served.d += offered.min(capacity);
                let gap = offered - capacity;
                if gap > 1e-9 * (1.0 + offered) {
                    d_unserved += gap;
                    d_all_served = false;
                }
            }
        }
    }

    ReplayOutcome {
        objective: objective(&traj),
        trajectory: traj,
        final_queues: state,
        cap_violations,
        d_offered_bits: d_offered,
        d_unserved_bits: d_unserved,
        d_all_served,
        served_bits: served,
    }
}
