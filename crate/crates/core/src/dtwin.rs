//! Digital-twin prediction of positions, traffic, and channels for the
//! upcoming cycle.
//!
//! The twin keeps a kinematic snapshot per UE (position and velocity at the
//! last observed frame), the configured satellite pass, and the previous
//! cycle's offered traffic. Prediction extrapolates UE positions at constant
//! velocity, evaluates the satellite pass directly (orbit prediction error is
//! negligible at this horizon), forecasts each flow's arrivals as the
//! previous cycle's mean, and synthesizes twin channel gains from the
//! predicted geometry. Real and twin gains share their scattering draws, so
//! with perfect coupling (xi = 1) and exact geometry the prediction is
//! bit-identical to the realization.

use crate::channel::{
    build_cycle_channels, ChannelError, ChannelParams, ChannelSet, CycleTracks, DtCoupling,
};
use crate::grid::{Dims, GridConfig, PerService, Service, RB_BASE_DURATION_S, SUBFRAMES_PER_FRAME};
use crate::queueing::TrafficTrace;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Frame duration in seconds (ten 1 ms subframes).
pub const FRAME_DURATION_S: f64 = SUBFRAMES_PER_FRAME as f64 * RB_BASE_DURATION_S;

/// Straight-line satellite pass at constant velocity; stands in for orbital
/// ephemerides, whose prediction error is immaterial at one-cycle horizons.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatPass {
    /// Position at global frame 0, in meters.
    pub start_m: [f64; 3],
    pub velocity_mps: [f64; 3],
}

impl SatPass {
    pub fn position_at_frame(&self, global_frame: usize) -> [f64; 3] {
        let t = global_frame as f64 * FRAME_DURATION_S;
        [
            self.start_m[0] + self.velocity_mps[0] * t,
            self.start_m[1] + self.velocity_mps[1] * t,
            self.start_m[2] + self.velocity_mps[2] * t,
        ]
    }
}

/// Position and velocity of one UE at the snapshot frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub position_m: [f64; 3],
    pub velocity_mps: [f64; 3],
}

/// The twin's persistent knowledge: static AP sites, per-UE kinematic
/// snapshots, the satellite pass, and the previous cycle's traffic.
#[derive(Clone, Debug)]
pub struct TwinState {
    pub ap: Vec<[f64; 3]>,
    pub ue: PerService<Vec<Kinematics>>,
    pub sat_pass: SatPass,
    pub traffic_history: Option<TrafficTrace>,
    /// Global frame ordinal (0-based) of the kinematic snapshot.
    pub as_of_frame: usize,
}

impl TwinState {
    pub fn new(ap: Vec<[f64; 3]>, ue: PerService<Vec<Kinematics>>, sat_pass: SatPass) -> Self {
        TwinState {
            ap,
            ue,
            sat_pass,
            traffic_history: None,
            as_of_frame: 0,
        }
    }

    /// Absorb one realized cycle (1-based, like prediction): reset the
    /// kinematic snapshot to the cycle's last frame (velocity from the last
    /// frame pair, or from the previous snapshot when the cycle has a single
    /// frame) and store its traffic.
    pub fn observe_cycle(
        &mut self,
        real_tracks: &CycleTracks,
        traffic: &TrafficTrace,
        cycle: usize,
        cfg: &GridConfig,
    ) {
        assert!(cycle >= 1, "cycles are 1-based");
        let n_fr = cfg.frames_per_cycle;
        let new_as_of = cycle * n_fr - 1;
        for x in Service::ALL {
            let frames = real_tracks.ue.get_ref(x);
            for (k, kin) in self.ue.get_mut(x).iter_mut().enumerate() {
                let last = frames[n_fr - 1][k];
                let velocity = if n_fr >= 2 {
                    let prev = frames[n_fr - 2][k];
                    [
                        (last[0] - prev[0]) / FRAME_DURATION_S,
                        (last[1] - prev[1]) / FRAME_DURATION_S,
                        (last[2] - prev[2]) / FRAME_DURATION_S,
                    ]
                } else if new_as_of > self.as_of_frame {
                    let dt = (new_as_of - self.as_of_frame) as f64 * FRAME_DURATION_S;
                    let p = kin.position_m;
                    [
                        (last[0] - p[0]) / dt,
                        (last[1] - p[1]) / dt,
                        (last[2] - p[2]) / dt,
                    ]
                } else {
                    kin.velocity_mps
                };
                *kin = Kinematics {
                    position_m: last,
                    velocity_mps: velocity,
                };
            }
        }
        self.as_of_frame = new_as_of;
        self.traffic_history = Some(traffic.clone());
    }
}

/// Constant-velocity extrapolation of every UE onto the frames of `cycle`
/// (1-based), plus the exact satellite pass and the static AP sites.
pub fn predict_positions(state: &TwinState, cfg: &GridConfig, cycle: usize) -> CycleTracks {
    let n_fr = cfg.frames_per_cycle;
    let base = (cycle - 1) * n_fr;
    let extrapolate = |kin: &Kinematics, global: usize| {
        let dt = (global as f64 - state.as_of_frame as f64) * FRAME_DURATION_S;
        [
            kin.position_m[0] + kin.velocity_mps[0] * dt,
            kin.position_m[1] + kin.velocity_mps[1] * dt,
            kin.position_m[2] + kin.velocity_mps[2] * dt,
        ]
    };
    let per_service = |x: Service| {
        (0..n_fr)
            .map(|e| {
                state
                    .ue
                    .get_ref(x)
                    .iter()
                    .map(|kin| extrapolate(kin, base + e))
                    .collect()
            })
            .collect()
    };
    CycleTracks {
        ap: state.ap.clone(),
        ue: PerService {
            d: per_service(Service::D),
            m: per_service(Service::M),
            s: per_service(Service::S),
        },
        sat: (0..n_fr)
            .map(|e| state.sat_pass.position_at_frame(base + e))
            .collect(),
    }
}

/// Forecast the next cycle's arrivals as the previous cycle's per-flow mean:
/// one per-subframe value for D flows, one per-frame value for M and S flows.
/// D traffic exists only in downlink subframes (an uplink-subframe D demand
/// could never be served), so the D mean is taken over and assigned to the
/// downlink subframes alone. Without history the forecast is all-zero (the
/// caller should warn).
pub fn predict_traffic(
    history: Option<&TrafficTrace>,
    cfg: &GridConfig,
    dims: &Dims,
) -> TrafficTrace {
    let mut out = TrafficTrace::zeros(cfg, dims);
    let Some(h) = history else {
        return out;
    };
    for k in 0..dims.flows.d {
        let row = h.d.row(k);
        let dl: Vec<usize> = (0..row.len()).filter(|&s| cfg.is_dl_subframe(s)).collect();
        let mean = if dl.is_empty() {
            0.0
        } else {
            dl.iter().map(|&s| row[s]).sum::<f64>() / dl.len() as f64
        };
        for s in 0..cfg.subframes_per_cycle() {
            if cfg.is_dl_subframe(s) {
                out.d[[k, s]] = mean;
            }
        }
    }
    for k in 0..dims.flows.m {
        let mean = h.m.row(k).mean().unwrap_or(0.0);
        out.m.row_mut(k).fill(mean);
    }
    for k in 0..dims.flows.s {
        let mean = h.s.row(k).mean().unwrap_or(0.0);
        out.s.row_mut(k).fill(mean);
    }
    out
}

/// Everything the planner consumes for one cycle: predicted geometry,
/// predicted arrivals, and twin channel gains.
#[derive(Clone, Debug)]
pub struct CyclePrediction {
    pub tracks: CycleTracks,
    pub traffic: TrafficTrace,
    pub channels: ChannelSet,
}

/// Compose position, traffic, and channel prediction for `cycle`.
///
/// Twin and real gains must share their scattering draws, so the realized
/// cycle's channels are synthesized here in the same pass and returned
/// alongside the prediction; the real set must only be consumed by replay,
/// never by the planner.
pub fn predict_cycle(
    state: &TwinState,
    real_tracks: &CycleTracks,
    params: &ChannelParams,
    cfg: &GridConfig,
    dims: &Dims,
    cycle: usize,
    coupling: &DtCoupling,
) -> Result<(CyclePrediction, ChannelSet), ChannelError> {
    let tracks = predict_positions(state, cfg, cycle);
    let traffic = predict_traffic(state.traffic_history.as_ref(), cfg, dims);
    let (real, twin) =
        build_cycle_channels(real_tracks, &tracks, params, cfg, dims, cycle, coupling)?;
    Ok((
        CyclePrediction {
            tracks,
            traffic,
            channels: twin,
        },
        real,
    ))
}

#[derive(Debug, Error)]
pub enum WaypointError {
    #[error("waypoint line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Parse a mobility waypoint file: whitespace-separated columns
/// `ue_id time_s x_m y_m`, `#` starting a comment. Returns per-UE waypoint
/// lists sorted by time, all at height `height_m`.
pub fn parse_waypoints(
    text: &str,
    height_m: f64,
) -> Result<BTreeMap<usize, Vec<(f64, [f64; 3])>>, WaypointError> {
    let mut routes: BTreeMap<usize, Vec<(f64, [f64; 3])>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut next = |name: &str| {
            fields.next().ok_or_else(|| WaypointError::Parse {
                line: i + 1,
                msg: format!("missing field {name}"),
            })
        };
        let id: usize = next("ue_id")?.parse().map_err(|e| WaypointError::Parse {
            line: i + 1,
            msg: format!("ue_id: {e}"),
        })?;
        let num = |name: &str, s: &str| {
            s.parse::<f64>().map_err(|e| WaypointError::Parse {
                line: i + 1,
                msg: format!("{name}: {e}"),
            })
        };
        let t = next("time_s")?;
        let t = num("time_s", t)?;
        let x = next("x_m")?;
        let x = num("x_m", x)?;
        let y = next("y_m")?;
        let y = num("y_m", y)?;
        routes.entry(id).or_default().push((t, [x, y, height_m]));
    }
    for route in routes.values_mut() {
        route.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(routes)
}

/// Piecewise-linear position along a waypoint route; clamped at both ends.
pub fn waypoint_position(route: &[(f64, [f64; 3])], t: f64) -> [f64; 3] {
    assert!(!route.is_empty(), "empty waypoint route");
    if t <= route[0].0 {
        return route[0].1;
    }
    for pair in route.windows(2) {
        let (t0, p0) = pair[0];
        let (t1, p1) = pair[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return [
                p0[0] + f * (p1[0] - p0[0]),
                p0[1] + f * (p1[1] - p0[1]),
                p0[2] + f * (p1[2] - p0[2]),
            ];
        }
    }
    route.last().unwrap().1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;
    use crate::seeds::SeedTree;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};

    fn dims() -> Dims {
        Dims {
            n_aps: 1,
            flows: PerService { d: 1, m: 1, s: 1 },
        }
    }

    fn stationary_state(pos: [f64; 3]) -> TwinState {
        let kin = Kinematics {
            position_m: pos,
            velocity_mps: [0.0; 3],
        };
        TwinState::new(
            vec![[0.0, 0.0, 10.0]],
            PerService {
                d: vec![kin],
                m: vec![kin],
                s: vec![kin],
            },
            SatPass {
                start_m: [0.0, -3.0e5, 5.0e5],
                velocity_mps: [7.5e3, 0.0, 0.0],
            },
        )
    }

    #[test]
    fn stationary_ue_prediction_is_identical() {
        let cfg = GridConfig::new(2.88e6, 3, 4, 6);
        let state = stationary_state([40.0, 9.0, 1.5]);
        let tracks = predict_positions(&state, &cfg, 3);
        for e in 0..3 {
            assert_eq!(tracks.ue.d[e][0], [40.0, 9.0, 1.5]);
        }
    }

    #[test]
    fn constant_velocity_extrapolation() {
        // 10 m/s along x, observed at frame 0: frame e sits at 0.1*e m.
        let cfg = GridConfig::new(2.88e6, 4, 4, 6);
        let mut state = stationary_state([0.0, 0.0, 1.5]);
        state.ue.d[0].velocity_mps = [10.0, 0.0, 0.0];
        let tracks = predict_positions(&state, &cfg, 1);
        for e in 0..4 {
            assert_relative_eq!(tracks.ue.d[e][0][0], 0.1 * e as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn satellite_prediction_is_exact() {
        let cfg = GridConfig::new(2.88e6, 2, 4, 6);
        let state = stationary_state([0.0; 3]);
        let tracks = predict_positions(&state, &cfg, 2);
        // Frames 2 and 3 of the pass.
        for e in 0..2 {
            assert_eq!(tracks.sat[e], state.sat_pass.position_at_frame(2 + e));
        }
        assert_relative_eq!(tracks.sat[0][0], 7.5e3 * 2.0 * FRAME_DURATION_S);
    }

    #[test]
    fn observation_recovers_constant_velocity_motion() {
        let cfg = GridConfig::new(2.88e6, 2, 4, 6);
        let mut state = stationary_state([0.0, 0.0, 1.5]);
        // Truth: every UE moves at 3 m/s along y; cycle 1 frames 0..2.
        let truth = |global: usize| [0.0, 3.0 * FRAME_DURATION_S * global as f64, 1.5];
        let tracks = CycleTracks {
            ap: state.ap.clone(),
            ue: PerService {
                d: vec![vec![truth(0)], vec![truth(1)]],
                m: vec![vec![truth(0)], vec![truth(1)]],
                s: vec![vec![truth(0)], vec![truth(1)]],
            },
            sat: vec![[0.0; 3]; 2],
        };
        let traffic = TrafficTrace::zeros(&cfg, &dims());
        state.observe_cycle(&tracks, &traffic, 1, &cfg);
        assert_eq!(state.as_of_frame, 1);
        assert_relative_eq!(state.ue.m[0].velocity_mps[1], 3.0, epsilon = 1e-9);
        // Prediction for cycle 2 continues the line exactly.
        let pred = predict_positions(&state, &cfg, 2);
        for e in 0..2 {
            assert_relative_eq!(pred.ue.m[e][0][1], truth(2 + e)[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn traffic_mean_examples() {
        let cfg = GridConfig::new(2.88e6, 1, 1, 6);
        let d = Dims {
            n_aps: 1,
            flows: PerService { d: 1, m: 1, s: 0 },
        };
        // A 4-subframe history of 2,4,6,8 kB (all downlink positions)
        // forecasts the mean, 5 kB, for every downlink subframe of the next
        // cycle and zero for uplink subframes.
        let kb = 8e3;
        let h = TrafficTrace {
            d: array![[2.0 * kb, 4.0 * kb, 6.0 * kb, 8.0 * kb]],
            m: ndarray::Array2::zeros((1, 1)),
            s: ndarray::Array2::zeros((0, 1)),
        };
        let pred = predict_traffic(Some(&h), &cfg, &d);
        assert_eq!(pred.d.dim(), (1, 10));
        for s in 0..10 {
            let want = if cfg.is_dl_subframe(s) { 5.0 * kb } else { 0.0 };
            assert_relative_eq!(pred.d[[0, s]], want);
        }

        // Constant downlink arrivals predict themselves.
        let mut h = TrafficTrace::zeros(&cfg, &d);
        for s in 0..10 {
            if cfg.is_dl_subframe(s) {
                h.d[[0, s]] = 1200.0;
            }
        }
        h.m.fill(9000.0);
        let pred = predict_traffic(Some(&h), &cfg, &d);
        assert_eq!(pred.d, h.d);
        assert_eq!(pred.m, h.m);

        // Missing history forecasts zero.
        let pred = predict_traffic(None, &cfg, &d);
        assert_eq!(pred.d.sum(), 0.0);
    }

    #[test]
    fn poisson_prediction_error_shrinks_with_window() {
        // RMSE of the window mean around the true mean scales as 1/sqrt(N).
        let mut rng = SeedTree::new(77).child(1).rng();
        let mu = 10.0 * 8e3;
        let pois = Poisson::new(mu).unwrap();
        let rmse = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let reps = 3000;
            let mut acc = 0.0;
            for _ in 0..reps {
                let mean: f64 = (0..n).map(|_| pois.sample(rng)).sum::<f64>() / n as f64;
                acc += (mean - mu) * (mean - mu);
            }
            (acc / reps as f64).sqrt()
        };
        let e4 = rmse(4, &mut rng);
        let e16 = rmse(16, &mut rng);
        let e64 = rmse(64, &mut rng);
        assert!((e4 / e16 - 2.0).abs() < 0.25, "e4/e16 = {}", e4 / e16);
        assert!((e16 / e64 - 2.0).abs() < 0.25, "e16/e64 = {}", e16 / e64);
    }

    #[test]
    fn perfect_twin_prediction_matches_realization() {
        // Stationary UEs, constant traffic, xi = 1: predicted channels equal
        // real ones bitwise and the traffic forecast equals the realization.
        let cfg = GridConfig::new(2.88e6, 2, 4, 6);
        let d = dims();
        let mut state = stationary_state([55.0, -10.0, 1.5]);
        let mut trace = TrafficTrace::zeros(&cfg, &d);
        for ((_, s), a) in trace.d.indexed_iter_mut() {
            if cfg.is_dl_subframe(s) {
                *a = 1200.0;
            }
        }
        trace.m.fill(12000.0);
        trace.s.fill(20000.0);
        let real_tracks = predict_positions(&state, &cfg, 1); // truth = stationary
        state.observe_cycle(&real_tracks, &trace, 1, &cfg);

        let params = ChannelParams {
            carrier_hz: 3.4e9,
            tn_pl0_db: 38.0,
            tn_pl_exp: 3.0,
            tn_d0_m: 1.0,
            tn_gain_db: 10.0,
            tn_k_factor_db: 5.0,
            sat_gain_db: 55.0,
            sat_k_factor_db: 10.0,
            noise_figure_db: 7.0,
        };
        let coupling = DtCoupling {
            xi: 1.0,
            seed: SeedTree::new(5),
        };
        let real_tracks = predict_positions(&state, &cfg, 1);
        let (pred, real) =
            predict_cycle(&state, &real_tracks, &params, &cfg, &d, 1, &coupling).unwrap();
        assert_eq!(pred.channels.tn.d, real.tn.d);
        assert_eq!(pred.channels.sat.s, real.sat.s);
        assert_eq!(pred.traffic, trace);
    }

    #[test]
    fn coupled_prediction_correlates_with_realization() {
        // With xi in (0,1) the twin gain stays correlated with the real gain;
        // correlation grows with xi.
        let cfg = GridConfig::new(2.88e6, 1, 1, 6);
        let d = dims();
        let state = stationary_state([40.0, 0.0, 1.5]);
        let params = ChannelParams {
            carrier_hz: 3.4e9,
            tn_pl0_db: 38.0,
            tn_pl_exp: 3.0,
            tn_d0_m: 1.0,
            tn_gain_db: 10.0,
            tn_k_factor_db: 0.0,
            sat_gain_db: 55.0,
            sat_k_factor_db: 0.0,
            noise_figure_db: 7.0,
        };
        let tracks = predict_positions(&state, &cfg, 1);
        let mut corr = Vec::new();
        for xi in [0.2, 0.9] {
            let (mut sxy, mut sxx, mut syy, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let n = 400;
            for seed in 0..n {
                let coupling = DtCoupling {
                    xi,
                    seed: SeedTree::new(seed),
                };
                let (real, twin) =
                    build_cycle_channels(&tracks, &tracks, &params, &cfg, &d, 1, &coupling)
                        .unwrap();
                let x = real.tn.m[[0, 0, 0, 0]];
                let y = twin.tn.m[[0, 0, 0, 0]];
                sx += x;
                sy += y;
                sxy += x * y;
                sxx += x * x;
                syy += y * y;
            }
            let nf = n as f64;
            let cov = sxy / nf - (sx / nf) * (sy / nf);
            let vx = sxx / nf - (sx / nf) * (sx / nf);
            let vy = syy / nf - (sy / nf) * (sy / nf);
            corr.push(cov / (vx * vy).sqrt());
        }
        assert!(corr[1] > corr[0] + 0.2, "correlations {corr:?}");
        assert!(corr[1] > 0.7, "high-coupling correlation {corr:?}");
    }

    #[test]
    fn waypoint_parsing_and_interpolation() {
        let text = "# ue time x y\n0 0.0 0.0 0.0\n0 10.0 100.0 0.0\n1 0.0 5.0 5.0\n";
        let routes = parse_waypoints(text, 1.5).unwrap();
        assert_eq!(routes.len(), 2);
        let r0 = &routes[&0];
        assert_eq!(waypoint_position(r0, -1.0), [0.0, 0.0, 1.5]);
        assert_eq!(waypoint_position(r0, 5.0), [50.0, 0.0, 1.5]);
        assert_eq!(waypoint_position(r0, 99.0), [100.0, 0.0, 1.5]);

        assert!(matches!(
            parse_waypoints("0 1.0 2.0", 1.5),
            Err(WaypointError::Parse { line: 1, .. })
        ));
        assert!(parse_waypoints("0 x 2.0 3.0", 1.5).is_err());
    }

    #[test]
    fn prediction_is_deterministic() {
        let cfg = GridConfig::new(2.88e6, 2, 4, 6);
        let d = dims();
        let mut state = stationary_state([30.0, 2.0, 1.5]);
        let mut rng = SeedTree::new(8).child(3).rng();
        let mut trace = TrafficTrace::zeros(&cfg, &d);
        for v in trace.m.iter_mut() {
            *v = rng.gen::<f64>() * 1e4;
        }
        state.traffic_history = Some(trace);
        let a = predict_traffic(state.traffic_history.as_ref(), &cfg, &d);
        let b = predict_traffic(state.traffic_history.as_ref(), &cfg, &d);
        assert_eq!(a, b);
        let ta = predict_positions(&state, &cfg, 2);
        let tb = predict_positions(&state, &cfg, 2);
        assert_eq!(ta, tb);
    }
}
