use crate::error::{Error, Result};

pub const MIN_POSITION: f64 = -1.2;
pub const MAX_POSITION: f64 = 0.6;
pub const MAX_SPEED: f64 = 0.07;
pub const GOAL_POSITION: f64 = 0.5;
pub const FORCE: f64 = 0.001;
pub const GRAVITY: f64 = 0.0025;

/// State `(position, velocity)`; actions push left, coast, push right.
pub fn mountaincar_step(s: &[f64; 2], action: usize) -> Result<([f64; 2], f64, bool)> {
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite mountain car state {s:?}")));
    }
    if action > 2 {
        return Err(Error::InvalidArgument(format!("mountain car action {action} out of range")));
    }
    let [mut pos, mut vel] = *s;
    vel += (action as f64 - 1.0) * FORCE - (3.0 * pos).cos() * GRAVITY;
    vel = vel.clamp(-MAX_SPEED, MAX_SPEED);
    pos += vel;
    pos = pos.clamp(MIN_POSITION, MAX_POSITION);
    if pos == MIN_POSITION && vel < 0.0 {
        vel = 0.0;
    }
    Ok(([pos, vel], -1.0, pos >= GOAL_POSITION))
}
