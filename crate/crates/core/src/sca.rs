//! Surrogate primitives for the successive convex approximation loop, and
//! the recovery maps from relaxed solutions back to binary associations,
//! band plans, and steering fractions.
//!
//! The planner removes binary association variables by writing each one as
//! the indicator `||p||_0` of its power and smoothing the indicator with the
//! concave step `f_apx(x) = 1 - exp(-x/eps)`. Each SCA iterate replaces the
//! nonconvex pieces with bounds that are tight at the expansion point:
//! affine upper bounds for `f_apx` and the square root (both concave) and an
//! affine lower bound for the exponential (convex), so every iterate's
//! feasible set stays inside the previous one's and the objective sequence
//! is nonincreasing.

use crate::grid::{BwpPlan, Dims, GridConfig, Service};
use ndarray::{Array1, Array2, Array3, Array4, ArrayViewMut, Dimension};

/// Linearization point for one SCA round: the current powers plus the slack
/// points where the interference-log and RB-count surrogates are tangent.
///
/// Power tensors follow the allocation layout `[ap][flow][lane][rb_time]`
/// (satellite tensors drop the AP axis); `eta_*` hold the normalized
/// interference-log points `ln((I + noise) / noise)` per served RB and
/// `zeta_d` holds the per-subframe RB-count points `[ap][flow][subframe]`.
/// Entries outside the optimized scope (uplink subframes, unused lanes) are
/// ignored by the assemblers.
#[derive(Clone, Debug)]
pub struct ExpansionPoint {
    pub p_d: Array4<f64>,
    pub p_m: Array4<f64>,
    pub p0_m: Array3<f64>,
    pub p0_s: Array3<f64>,
    pub eta_d: Array4<f64>,
    pub eta_m_tn: Array4<f64>,
    pub eta_m_sat: Array3<f64>,
    pub zeta_d: Array3<f64>,
}

impl ExpansionPoint {
    pub fn zeros(cfg: &GridConfig, dims: &Dims) -> Self {
        let (l, kd, km, ks) = (dims.n_aps, dims.flows.d, dims.flows.m, dims.flows.s);
        let caps = cfg.subchannel_caps();
        let nd = cfg.rb_slots_per_cycle(Service::D);
        let nm = cfg.rb_slots_per_cycle(Service::M);
        let ns = cfg.rb_slots_per_cycle(Service::S);
        ExpansionPoint {
            p_d: Array4::zeros((l, kd, caps.d, nd)),
            p_m: Array4::zeros((l, km, caps.m, nm)),
            p0_m: Array3::zeros((km, caps.m, nm)),
            p0_s: Array3::zeros((ks, caps.s, ns)),
            eta_d: Array4::zeros((l, kd, caps.d, nd)),
            eta_m_tn: Array4::zeros((l, km, caps.m, nm)),
            eta_m_sat: Array3::zeros((km, caps.m, nm)),
            zeta_d: Array3::zeros((l, kd, cfg.subframes_per_cycle())),
        }
    }
}

/// Smoothed set-indicator `1 - exp(-x/eps)`; concave, in [0,1) for x >= 0.
pub fn f_apx(x: f64, eps: f64) -> f64 {
    1.0 - (-x / eps).exp()
}

/// Affine upper bound on [`f_apx`], tangent at `x_i`:
/// `(1/eps)*exp(-x_i/eps)*(x - x_i - eps) + 1`.
pub fn f_apx_upper(x: f64, x_i: f64, eps: f64) -> f64 {
    let (a, b) = f_apx_upper_coeffs(x_i, eps);
    a * x + b
}

/// Slope/intercept of [`f_apx_upper`] for program assembly.
pub fn f_apx_upper_coeffs(x_i: f64, eps: f64) -> (f64, f64) {
    let e = (-x_i / eps).exp();
    (e / eps, 1.0 - e * (x_i + eps) / eps)
}

/// Affine lower bound on `exp(u)`, tangent at `u_i`: `exp(u_i)*(u - u_i + 1)`.
pub fn f_exp_lower(u: f64, u_i: f64) -> f64 {
    let (a, b) = f_exp_lower_coeffs(u_i);
    a * u + b
}

/// Slope/intercept of [`f_exp_lower`].
pub fn f_exp_lower_coeffs(u_i: f64) -> (f64, f64) {
    let e = u_i.exp();
    (e, e * (1.0 - u_i))
}

/// Affine upper bound on `sqrt(x)`, tangent at `x_i > 0`:
/// `x/(2*sqrt(x_i)) + sqrt(x_i)/2`.
pub fn f_sqrt_upper(x: f64, x_i: f64) -> f64 {
    let (a, b) = f_sqrt_upper_coeffs(x_i);
    a * x + b
}

/// Slope/intercept of [`f_sqrt_upper`].
pub fn f_sqrt_upper_coeffs(x_i: f64) -> (f64, f64) {
    let r = x_i.sqrt();
    (0.5 / r, 0.5 * r)
}

/// Threshold a relaxed power tensor into a binary association tensor of the
/// same shape: association 1 where `p >= threshold`; powers below the
/// threshold are zeroed in place.
pub fn recover_binaries<D: Dimension>(
    mut power: ArrayViewMut<f64, D>,
    threshold: f64,
) -> ndarray::Array<u8, D> {
    let mut assoc = ndarray::Array::<u8, D>::zeros(power.raw_dim());
    ndarray::Zip::from(&mut assoc).and(&mut power).for_each(|a, p| {
        if *p >= threshold {
            *a = 1;
        } else {
            *p = 0.0;
        }
    });
    assoc
}

/// Recover the per-flow steering split between terrestrial access points and
/// the satellite from the flattened weights `omega_bar[l][k]`.
///
/// Returns `(omega_cn, omega)` where `omega_cn[k] = sum_l omega_bar[l][k]` is
/// the terrestrial share and `omega[l][k] = omega_bar[l][k] / omega_cn[k]` the
/// conditional AP split; a zero terrestrial share splits uniformly by
/// convention.
pub fn recover_steering(omega_bar: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n_ap, n_flows) = omega_bar.dim();
    let mut omega_cn = Array1::zeros(n_flows);
    let mut omega = Array2::zeros((n_ap, n_flows));
    for k in 0..n_flows {
        let total: f64 = (0..n_ap).map(|l| omega_bar[[l, k]]).sum();
        omega_cn[k] = total;
        for l in 0..n_ap {
            omega[[l, k]] = if total > 0.0 {
                omega_bar[[l, k]] / total
            } else {
                1.0 / n_ap as f64
            };
        }
    }
    (omega_cn, omega)
}

/// Recover the cycle's band plan from binary associations: a lane is active
/// iff at least one association of its service uses it at any RB time.
///
/// Terrestrial tensors are `[ap][flow][lane][rb_time]`, satellite tensors
/// `[flow][lane][rb_time]`; the M plan merges both server sides.
pub fn recover_bwp(
    a_d: &Array4<u8>,
    a_m: &Array4<u8>,
    b_m: &Array3<u8>,
    b_s: &Array3<u8>,
    cfg: &GridConfig,
) -> BwpPlan {
    let mut plan = BwpPlan::empty(cfg);
    for ((_, _, v, _), a) in a_d.indexed_iter() {
        if *a != 0 {
            plan.active.d[v] = true;
        }
    }
    for ((_, _, v, _), a) in a_m.indexed_iter() {
        if *a != 0 {
            plan.active.m[v] = true;
        }
    }
    for ((_, v, _), b) in b_m.indexed_iter() {
        if *b != 0 {
            plan.active.m[v] = true;
        }
    }
    for ((_, v, _), b) in b_s.indexed_iter() {
        if *b != 0 {
            plan.active.s[v] = true;
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn f_apx_examples() {
        assert_eq!(f_apx(0.0, 1e-4), 0.0);
        assert_relative_eq!(f_apx(1e-4, 1e-4), 1.0 - (-1.0f64).exp(), max_relative = 1e-12);
        assert!(1.0 - f_apx(100.0 * 1e-4, 1e-4) < 1e-40);
    }

    #[test]
    fn f_apx_upper_examples() {
        let eps = 1e-4;
        // Tangency.
        for &x_i in &[0.0, eps, 3.7 * eps, 0.1] {
            assert_relative_eq!(f_apx_upper(x_i, x_i, eps), f_apx(x_i, eps), epsilon = 1e-15);
        }
        // Tangent at 0 evaluated at eps.
        assert_relative_eq!(f_apx_upper(eps, 0.0, eps), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn f_exp_lower_examples() {
        assert_eq!(f_exp_lower(0.3, 0.0), 1.3);
        for &u_i in &[-2.0, 0.0, 1.5] {
            assert_relative_eq!(f_exp_lower(u_i, u_i), u_i.exp(), max_relative = 1e-12);
        }
    }

    #[test]
    fn f_sqrt_upper_examples() {
        assert_eq!(f_sqrt_upper(4.0, 4.0), 2.0);
        assert_eq!(f_sqrt_upper(9.0, 4.0), 3.25);
    }

    #[test]
    fn surrogates_are_affine() {
        // Second differences vanish.
        let eps = 1e-4;
        let g = |f: &dyn Fn(f64) -> f64, x: f64, h: f64| f(x + h) - 2.0 * f(x) + f(x - h);
        assert_relative_eq!(g(&|x| f_apx_upper(x, 0.02, eps), 1.0, 0.125), 0.0, epsilon = 1e-9);
        assert_relative_eq!(g(&|u| f_exp_lower(u, 0.5), 2.0, 0.25), 0.0, epsilon = 1e-9);
        assert_relative_eq!(g(&|x| f_sqrt_upper(x, 2.0), 3.0, 0.5), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn recover_binaries_zeroes_subthreshold() {
        let mut p = array![[0.01, 1e-6], [1e-4, 0.0]];
        let a = recover_binaries(p.view_mut(), 1e-4);
        assert_eq!(a, array![[1u8, 0], [1, 0]]);
        assert_eq!(p, array![[0.01, 0.0], [1e-4, 0.0]]);
    }

    #[test]
    fn recover_steering_examples() {
        let ob = array![[0.2], [0.3]];
        let (cn, om) = recover_steering(&ob);
        assert_relative_eq!(cn[0], 0.5);
        assert_relative_eq!(om[[0, 0]], 0.4);
        assert_relative_eq!(om[[1, 0]], 0.6);
        // Product reconstruction.
        assert_relative_eq!(cn[0] * om[[1, 0]], ob[[1, 0]], max_relative = 1e-12);

        // Degenerate all-satellite case splits uniformly.
        let ob = array![[0.0], [0.0]];
        let (cn, om) = recover_steering(&ob);
        assert_eq!(cn[0], 0.0);
        assert_eq!(om[[0, 0]], 0.5);
    }

    #[test]
    fn recover_bwp_any_use_scan() {
        use crate::grid::Service;
        let cfg = GridConfig::new(2.88e6, 1, 1, 6); // caps (4, 8, 16)
        let a_d = ndarray::Array4::<u8>::zeros((1, 1, 4, 40));
        let a_m = ndarray::Array4::<u8>::zeros((1, 1, 8, 20));
        let mut b_m = ndarray::Array3::<u8>::zeros((1, 8, 20));
        let b_s = ndarray::Array3::<u8>::zeros((1, 16, 10));
        let plan = recover_bwp(&a_d, &a_m, &b_m, &b_s, &cfg);
        assert_eq!(plan.active_count(Service::D), 0);
        assert_eq!(plan.active_count(Service::M), 0);
        assert_eq!(plan.active_count(Service::S), 0);

        let mut a_d = a_d;
        a_d[[0, 0, 0, 13]] = 1;
        b_m[[0, 5, 2]] = 1;
        let plan = recover_bwp(&a_d, &a_m, &b_m, &b_s, &cfg);
        assert_eq!(plan.active.d, vec![true, false, false, false]);
        assert!(plan.active.m[5] && plan.active_count(Service::M) == 1);
    }
}
