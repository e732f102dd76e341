//! MountainCar-v0 dynamics: force 0.001, gravity 0.0025.
//! Reward −1 every step; terminates at position ≥ 0.5 with velocity ≥ 0.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

const MIN_POSITION: f64 = -1.2;
const MAX_POSITION: f64 = 0.6;
const MAX_SPEED: f64 = 0.07;
const GOAL_POSITION: f64 = 0.5;
const GOAL_VELOCITY: f64 = 0.0;
const FORCE: f64 = 0.001;
const GRAVITY: f64 = 0.0025;

pub fn reset(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let position = rng.gen::<f64>() * 0.2 - 0.6;
    vec![position, 0.0]
}

pub fn step(vars: &[f64], action: usize) -> (Vec<f64>, f64, bool) {
    let (position, velocity) = (vars[0], vars[1]);
    let mut velocity = velocity + (action as f64 - 1.0) * FORCE + (3.0 * position).cos() * (-GRAVITY);
    velocity = velocity.clamp(-MAX_SPEED, MAX_SPEED);
    let mut position = position + velocity;
    position = position.clamp(MIN_POSITION, MAX_POSITION);
    if position == MIN_POSITION && velocity < 0.0 {
        velocity = 0.0;
    }
    let terminated = position >= GOAL_POSITION && velocity >= GOAL_VELOCITY;
    (vec![position, velocity], -1.0, terminated)
}
