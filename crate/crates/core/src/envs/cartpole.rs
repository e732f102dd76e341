//! CartPole-v1 dynamics: Euler integration at τ = 0.02 with force ±10.
//! Reward +1 every step; terminates when |x| > 2.4 or |θ| > 12°.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const HALF_POLE_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_POLE_LENGTH;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
const X_THRESHOLD: f64 = 2.4;
// 12 degrees.
const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;

pub fn reset(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..4).map(|_| rng.gen::<f64>() * 0.1 - 0.05).collect()
}

pub fn step(vars: &[f64], action: usize) -> (Vec<f64>, f64, bool) {
    let (x, x_dot, theta, theta_dot) = (vars[0], vars[1], vars[2], vars[3]);
    let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
    let cos_theta = theta.cos();
    let sin_theta = theta.sin();
    let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin_theta) / TOTAL_MASS;
    let theta_acc = (GRAVITY * sin_theta - cos_theta * temp)
        / (HALF_POLE_LENGTH * (4.0 / 3.0 - MASS_POLE * cos_theta * cos_theta / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_theta / TOTAL_MASS;
    let next = vec![
        x + TAU * x_dot,
        x_dot + TAU * x_acc,
        theta + TAU * theta_dot,
        theta_dot + TAU * theta_acc,
    ];
    let terminated = next[0].abs() > X_THRESHOLD || next[2].abs() > THETA_THRESHOLD;
    (next, 1.0, terminated)
}
