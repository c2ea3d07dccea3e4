//! 5G-NR multi-numerology time/frequency arithmetic, bandwidth-part plans,
//! and guard-band feasibility.
//!
//! The shared band is covered by three overlaid subchannel grids, one per
//! service slice, whose resource-block bandwidth and duration scale as
//! `2^mu * 180 kHz` and `2^-mu * 1 ms`. One cycle spans `N_TF` frames of ten
//! subframes each; a subframe holds `2^mu` RB times of the respective slice.
//!
//! # Example
//! ```
//! use istnsim::grid::{GridConfig, Service, time_indices};
//!
//! let g = GridConfig::new(15.0e6, 5, 20, 6);
//! assert_eq!(g.subchannel_caps().get(Service::M), 41);
//! let ti = time_indices(7, &g).unwrap();
//! assert_eq!((ti.n_d, ti.n_m, ti.n_s), (7, 4, 2));
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Service slices: delay-sensitive (D), mixed terrestrial/satellite (M),
/// satellite-only (S).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Service {
    D,
    M,
    S,
}

impl Service {
    pub const ALL: [Service; 3] = [Service::D, Service::M, Service::S];
}

impl std::fmt::Display for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Service::D => write!(f, "D"),
            Service::M => write!(f, "M"),
            Service::S => write!(f, "S"),
        }
    }
}

/// One value per service slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerService<T> {
    pub d: T,
    pub m: T,
    pub s: T,
}

impl<T: Copy> PerService<T> {
    pub fn uniform(v: T) -> Self {
        PerService { d: v, m: v, s: v }
    }

    pub fn get(&self, x: Service) -> T {
        match x {
            Service::D => self.d,
            Service::M => self.m,
            Service::S => self.s,
        }
    }
}

impl<T> PerService<T> {
    pub fn get_ref(&self, x: Service) -> &T {
        match x {
            Service::D => &self.d,
            Service::M => &self.m,
            Service::S => &self.s,
        }
    }

    pub fn get_mut(&mut self, x: Service) -> &mut T {
        match x {
            Service::D => &mut self.d,
            Service::M => &mut self.m,
            Service::S => &mut self.s,
        }
    }
}

pub const RB_BASE_BANDWIDTH_HZ: f64 = 180e3;
pub const RB_BASE_DURATION_S: f64 = 1e-3;
pub const SUBFRAMES_PER_FRAME: usize = 10;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("time-slot ordinal must be >= 1, got {0}")]
    TimeOrdinal(u64),
    #[error("bandwidth-part vector for {service} has length {got}, expected {want}")]
    PlanSize {
        service: Service,
        got: usize,
        want: usize,
    },
}

/// Static grid parameters for a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridConfig {
    /// Total shared bandwidth W_tot in Hz.
    pub total_bandwidth_hz: f64,
    /// Numerology exponent per service; defaults (D,M,S) = (2,1,0) and must
    /// satisfy mu_D >= mu_M >= mu_S.
    pub numerology: PerService<u32>,
    /// Frames per decision cycle (N_TF).
    pub frames_per_cycle: usize,
    /// Decision cycles per run (N_Cy).
    pub cycles: usize,
    /// Leading downlink subframes per frame available to terrestrial
    /// transmission; the remaining subframes of each frame carry no TN
    /// downlink and no TN queue service.
    pub dl_subframes_per_frame: usize,
}

impl GridConfig {
    pub fn new(
        total_bandwidth_hz: f64,
        frames_per_cycle: usize,
        cycles: usize,
        dl_subframes_per_frame: usize,
    ) -> Self {
        GridConfig {
            total_bandwidth_hz,
            numerology: PerService { d: 2, m: 1, s: 0 },
            frames_per_cycle,
            cycles,
            dl_subframes_per_frame,
        }
    }

    /// RB bandwidth w_x = 2^mu_x * 180 kHz.
    pub fn rb_bandwidth_hz(&self, x: Service) -> f64 {
        (1u64 << self.numerology.get(x)) as f64 * RB_BASE_BANDWIDTH_HZ
    }

    /// RB duration T_x = 2^-mu_x ms, in seconds.
    pub fn rb_duration_s(&self, x: Service) -> f64 {
        RB_BASE_DURATION_S / (1u64 << self.numerology.get(x)) as f64
    }

    /// RB times per subframe, N_x = 2^mu_x.
    pub fn rbs_per_subframe(&self, x: Service) -> usize {
        1usize << self.numerology.get(x)
    }

    /// Subframes per cycle, N_SF = 10 * N_TF.
    pub fn subframes_per_cycle(&self) -> usize {
        SUBFRAMES_PER_FRAME * self.frames_per_cycle
    }

    /// Time slots (finest RB times, the D grid) per cycle.
    pub fn slots_per_cycle(&self) -> usize {
        self.rbs_per_subframe(Service::D) * self.subframes_per_cycle()
    }

    /// RB times of service `x` per cycle.
    pub fn rb_slots_per_cycle(&self, x: Service) -> usize {
        self.rbs_per_subframe(x) * self.subframes_per_cycle()
    }

    /// RB times of service `x` per frame.
    pub fn rb_slots_per_frame(&self, x: Service) -> usize {
        self.rbs_per_subframe(x) * SUBFRAMES_PER_FRAME
    }

    /// Subchannel caps per service: floor(W_tot / w_x).
    pub fn subchannel_caps(&self) -> PerService<usize> {
        let cap = |x| (self.total_bandwidth_hz / self.rb_bandwidth_hz(x)).floor() as usize;
        PerService {
            d: cap(Service::D),
            m: cap(Service::M),
            s: cap(Service::S),
        }
    }

    /// Guard bandwidth between the D/M and M/S bandwidth parts:
    /// W_G1 + W_G2 = w_D/2 + w_M/2.
    pub fn guard_bandwidth_hz(&self) -> f64 {
        self.rb_bandwidth_hz(Service::D) / 2.0 + self.rb_bandwidth_hz(Service::M) / 2.0
    }

    /// Subframe-of-cycle (0-based) of the 0-based RB time `n0` of service `x`.
    pub fn subframe_of_rb(&self, x: Service, n0: usize) -> usize {
        n0 / self.rbs_per_subframe(x)
    }

    /// Frame-of-cycle (0-based) of the 0-based RB time `n0` of service `x`.
    pub fn frame_of_rb(&self, x: Service, n0: usize) -> usize {
        n0 / self.rb_slots_per_frame(x)
    }

    /// Whether the 0-based subframe-of-cycle `sf0` carries TN downlink.
    pub fn is_dl_subframe(&self, sf0: usize) -> bool {
        sf0 % SUBFRAMES_PER_FRAME < self.dl_subframes_per_frame
    }

    /// Whether the 0-based RB time `n0` of service `x` lies in a TN downlink
    /// subframe.
    pub fn is_dl_rb(&self, x: Service, n0: usize) -> bool {
        self.is_dl_subframe(self.subframe_of_rb(x, n0))
    }

    /// Whether arrivals are injected at the 0-based RB time `n0`: the first RB
    /// time of each frame.
    pub fn is_injection_rb(&self, x: Service, n0: usize) -> bool {
        n0 % self.rb_slots_per_frame(x) == 0
    }
}

/// Network population: access-point count and flow counts per service.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_aps: usize,
    pub flows: PerService<usize>,
}

/// Per-service time ordinals for a global time slot; all 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeIndex {
    /// Time-slot ordinal (the D-grid RB time).
    pub t: u64,
    pub n_d: u64,
    pub n_m: u64,
    pub n_s: u64,
    /// Cycle ordinal.
    pub cycle: u64,
    /// Frame ordinal.
    pub frame: u64,
    /// Subframe ordinal.
    pub subframe: u64,
}

/// Map the 1-based time slot `t` onto all per-service and structural ordinals.
pub fn time_indices(t: u64, cfg: &GridConfig) -> Result<TimeIndex, GridError> {
    if t < 1 {
        return Err(GridError::TimeOrdinal(t));
    }
    let n_d = cfg.rbs_per_subframe(Service::D) as u64;
    let ratio_m = n_d / cfg.rbs_per_subframe(Service::M) as u64;
    let ratio_s = n_d / cfg.rbs_per_subframe(Service::S) as u64;
    Ok(TimeIndex {
        t,
        n_d: t,
        n_m: t.div_ceil(ratio_m),
        n_s: t.div_ceil(ratio_s),
        cycle: t.div_ceil(n_d * cfg.subframes_per_cycle() as u64),
        frame: t.div_ceil(SUBFRAMES_PER_FRAME as u64 * n_d),
        subframe: t.div_ceil(n_d),
    })
}

/// One cycle's bandwidth-part plan: the activation flag per subchannel lane
/// of each service grid. Lane indices are 1-based in the feasibility rules
/// below to match the cross-service index arithmetic; the vectors themselves
/// are 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BwpPlan {
    pub active: PerService<Vec<bool>>,
}

impl BwpPlan {
    pub fn empty(cfg: &GridConfig) -> Self {
        let caps = cfg.subchannel_caps();
        BwpPlan {
            active: PerService {
                d: vec![false; caps.d],
                m: vec![false; caps.m],
                s: vec![false; caps.s],
            },
        }
    }

    pub fn active_count(&self, x: Service) -> usize {
        self.active.get_ref(x).iter().filter(|b| **b).count()
    }

    /// Highest active 1-based lane index, if any.
    pub fn max_active(&self, x: Service) -> Option<usize> {
        self.active
            .get_ref(x)
            .iter()
            .rposition(|b| *b)
            .map(|i| i + 1)
    }

    /// Total bandwidth of active lanes plus both guards.
    pub fn occupied_bandwidth_hz(&self, cfg: &GridConfig) -> f64 {
        let mut used = cfg.guard_bandwidth_hz();
        for x in Service::ALL {
            used += self.active_count(x) as f64 * cfg.rb_bandwidth_hz(x);
        }
        used
    }
}

/// A violated band-plan rule. Lane indices are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub enum BwpViolation {
    /// An active D lane `v_d` requires M lanes 1..=2*v_d+1 inactive.
    DBlocksM { v_d: usize, v_m: usize },
    /// An active D lane `v_d` requires S lanes 1..=4*v_d+2 inactive.
    DBlocksS { v_d: usize, v_s: usize },
    /// An active M lane `v_m` requires S lanes 1..=2*v_m+1 inactive.
    MBlocksS { v_m: usize, v_s: usize },
    /// Active lane widths plus guards exceed the total bandwidth.
    Bandwidth { used_hz: f64, total_hz: f64 },
}

impl std::fmt::Display for BwpViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BwpViolation::DBlocksM { v_d, v_m } => {
                write!(f, "active D lane {v_d} blocks active M lane {v_m}")
            }
            BwpViolation::DBlocksS { v_d, v_s } => {
                write!(f, "active D lane {v_d} blocks active S lane {v_s}")
            }
            BwpViolation::MBlocksS { v_m, v_s } => {
                write!(f, "active M lane {v_m} blocks active S lane {v_s}")
            }
            BwpViolation::Bandwidth { used_hz, total_hz } => {
                write!(f, "occupied {used_hz} Hz exceeds total {total_hz} Hz")
            }
        }
    }
}

/// Check the cross-service ordering rules and the bandwidth budget.
///
/// An active D lane `v_d` excludes M lanes `1..=2*v_d+1` and S lanes
/// `1..=4*v_d+2`; an active M lane `v_m` excludes S lanes `1..=2*v_m+1`
/// (lane overlap plus one half-width guard lane each); total active width
/// plus both guards must fit in the band.
pub fn check_bwp_feasible(
    plan: &BwpPlan,
    cfg: &GridConfig,
) -> Result<Vec<BwpViolation>, GridError> {
    let caps = cfg.subchannel_caps();
    for x in Service::ALL {
        let got = plan.active.get_ref(x).len();
        if got != caps.get(x) {
            return Err(GridError::PlanSize {
                service: x,
                got,
                want: caps.get(x),
            });
        }
    }

    let mut violations = Vec::new();
    let active_lanes = |x: Service| {
        plan.active
            .get_ref(x)
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i + 1)
            .collect::<Vec<_>>()
    };
    let d = active_lanes(Service::D);
    let m = active_lanes(Service::M);
    let s = active_lanes(Service::S);

    for &v_d in &d {
        for &v_m in &m {
            if v_m <= 2 * v_d + 1 {
                violations.push(BwpViolation::DBlocksM { v_d, v_m });
            }
        }
        for &v_s in &s {
            if v_s <= 4 * v_d + 2 {
                violations.push(BwpViolation::DBlocksS { v_d, v_s });
            }
        }
    }
    for &v_m in &m {
        for &v_s in &s {
            if v_s <= 2 * v_m + 1 {
                violations.push(BwpViolation::MBlocksS { v_m, v_s });
            }
        }
    }

    let used = plan.occupied_bandwidth_hz(cfg);
    if used > cfg.total_bandwidth_hz + 1e-9 {
        violations.push(BwpViolation::Bandwidth {
            used_hz: used,
            total_hz: cfg.total_bandwidth_hz,
        });
    }
    Ok(violations)
}
