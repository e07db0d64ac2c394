use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const HALF_LENGTH: f64 = 0.5;
pub const FORCE: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;

pub fn is_terminal(s: &[f64; 4]) -> bool {
    s[0].abs() > X_LIMIT || s[2].abs() > THETA_LIMIT
}

/// State `(x, ẋ, θ, θ̇)`; action 0 pushes left, 1 pushes right. Explicit Euler.
pub fn cartpole_step(s: &[f64; 4], action: usize) -> Result<([f64; 4], f64, bool)> {
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite cartpole state {s:?}")));
    }
    let force = match action {
        0 => -FORCE,
        1 => FORCE,
        _ => return Err(Error::InvalidArgument(format!("cartpole action {action} out of range"))),
    };
    let [x, x_dot, theta, theta_dot] = *s;
    let total = CART_MASS + POLE_MASS;
    let pml = POLE_MASS * HALF_LENGTH;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pml * theta_dot * theta_dot * sin) / total;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    let next = [
        x + TAU * x_dot,
        x_dot + TAU * x_acc,
        theta + TAU * theta_dot,
        theta_dot + TAU * theta_acc,
    ];
    Ok((next, 1.0, is_terminal(&next)))
}
