use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const DT: f64 = 0.2;
pub const LINK_LENGTH_1: f64 = 1.0;
pub const LINK_MASS: f64 = 1.0;
pub const LINK_COM: f64 = 0.5;
pub const LINK_MOI: f64 = 1.0;
pub const GRAVITY: f64 = 9.8;
pub const MAX_VEL_1: f64 = 4.0 * PI;
pub const MAX_VEL_2: f64 = 9.0 * PI;

fn derivs(s: &[f64; 4], torque: f64) -> [f64; 4] {
    let (m1, m2, l1, lc1, lc2, i1, i2) = (LINK_MASS, LINK_MASS, LINK_LENGTH_1, LINK_COM, LINK_COM, LINK_MOI, LINK_MOI);
    let g = GRAVITY;
    let [t1, t2, dt1, dt2] = *s;
    let d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * t2.cos()) + i1 + i2;
    let d2 = m2 * (lc2 * lc2 + l1 * lc2 * t2.cos()) + i2;
    let phi2 = m2 * lc2 * g * (t1 + t2 - PI / 2.0).cos();
    let phi1 = -m2 * l1 * lc2 * dt2 * dt2 * t2.sin() - 2.0 * m2 * l1 * lc2 * dt2 * dt1 * t2.sin()
        + (m1 * lc1 + m2 * l1) * g * (t1 - PI / 2.0).cos()
        + phi2;
    let ddt2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dt1 * dt1 * t2.sin() - phi2)
        / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
    let ddt1 = -(d2 * ddt2 + phi1) / d1;
    [dt1, dt2, ddt1, ddt2]
}

fn axpy(y: &[f64; 4], h: f64, k: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|i| y[i] + h * k[i])
}

fn wrap(mut x: f64) -> f64 {
    while x > PI {
        x -= 2.0 * PI;
    }
    while x < -PI {
        x += 2.0 * PI;
    }
    x
}

pub fn observation(s: &[f64; 4]) -> [f64; 6] {
    [s[0].cos(), s[0].sin(), s[1].cos(), s[1].sin(), s[2], s[3]]
}

pub fn is_terminal(s: &[f64; 4]) -> bool {
    -s[0].cos() - (s[0] + s[1]).cos() > 1.0
}

/// Internal state `(θ1, θ2, θ̇1, θ̇2)`; one RK4 step of length [`DT`].
/// Returns the next internal state, its observation, the reward and the terminal flag.
pub fn acrobot_step(s: &[f64; 4], action: usize) -> Result<([f64; 4], [f64; 6], f64, bool)> {
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite acrobot state {s:?}")));
    }
    if action > 2 {
        return Err(Error::InvalidArgument(format!("acrobot action {action} out of range")));
    }
    let torque = action as f64 - 1.0;
    let k1 = derivs(s, torque);
    let k2 = derivs(&axpy(s, DT / 2.0, &k1), torque);
    let k3 = derivs(&axpy(s, DT / 2.0, &k2), torque);
    let k4 = derivs(&axpy(s, DT, &k3), torque);
    let mut ns: [f64; 4] = std::array::from_fn(|i| s[i] + DT / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    ns[0] = wrap(ns[0]);
    ns[1] = wrap(ns[1]);
    ns[2] = ns[2].clamp(-MAX_VEL_1, MAX_VEL_1);
    ns[3] = ns[3].clamp(-MAX_VEL_2, MAX_VEL_2);
    let terminal = is_terminal(&ns);
    Ok((ns, observation(&ns), if terminal { 0.0 } else { -1.0 }, terminal))
}
