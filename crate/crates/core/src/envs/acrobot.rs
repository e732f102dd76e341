//! Acrobot-v1 dynamics: two-link pendulum, RK4 integration at dt = 0.2,
//! torques {−1, 0, +1} on the second joint ("book" equations of motion).
//! Reward −1 per step, 0 on the terminating step; terminates when the
//! free end reaches height 1: −cos(θ1) − cos(θ1 + θ2) > 1.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

const DT: f64 = 0.2;
const LINK_LENGTH_1: f64 = 1.0;
const LINK_MASS_1: f64 = 1.0;
const LINK_MASS_2: f64 = 1.0;
const LINK_COM_POS_1: f64 = 0.5;
const LINK_COM_POS_2: f64 = 0.5;
const LINK_MOI: f64 = 1.0;
const GRAVITY: f64 = 9.8;
const MAX_VEL_1: f64 = 4.0 * std::f64::consts::PI;
const MAX_VEL_2: f64 = 9.0 * std::f64::consts::PI;
const TORQUES: [f64; 3] = [-1.0, 0.0, 1.0];

pub fn reset(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..4).map(|_| rng.gen::<f64>() * 0.2 - 0.1).collect()
}

/// Internal state is [θ1, θ2, θ1̇, θ2̇]; the observation exposes
/// cos/sin of the angles plus the velocities.
pub fn observe(vars: &[f64]) -> Vec<f64> {
    vec![
        vars[0].cos(),
        vars[0].sin(),
        vars[1].cos(),
        vars[1].sin(),
        vars[2],
        vars[3],
    ]
}

fn dynamics(s: &[f64; 4], torque: f64) -> [f64; 4] {
    let (m1, m2) = (LINK_MASS_1, LINK_MASS_2);
    let l1 = LINK_LENGTH_1;
    let (lc1, lc2) = (LINK_COM_POS_1, LINK_COM_POS_2);
    let (i1, i2) = (LINK_MOI, LINK_MOI);
    let g = GRAVITY;
    let (theta1, theta2, dtheta1, dtheta2) = (s[0], s[1], s[2], s[3]);
    let d1 = m1 * lc1 * lc1
        + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * theta2.cos())
        + i1
        + i2;
    let d2 = m2 * (lc2 * lc2 + l1 * lc2 * theta2.cos()) + i2;
    let phi2 = m2 * lc2 * g * (theta1 + theta2 - std::f64::consts::FRAC_PI_2).cos();
    let phi1 = -m2 * l1 * lc2 * dtheta2 * dtheta2 * theta2.sin()
        - 2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * theta2.sin()
        + (m1 * lc1 + m2 * l1) * g * (theta1 - std::f64::consts::FRAC_PI_2).cos()
        + phi2;
    let ddtheta2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1 * dtheta1 * theta2.sin() - phi2)
        / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
    let ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
    [dtheta1, dtheta2, ddtheta1, ddtheta2]
}

fn rk4(s0: &[f64; 4], torque: f64) -> [f64; 4] {
    let add = |a: &[f64; 4], b: &[f64; 4], c: f64| {
        [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2], a[3] + c * b[3]]
    };
    let k1 = dynamics(s0, torque);
    let k2 = dynamics(&add(s0, &k1, DT / 2.0), torque);
    let k3 = dynamics(&add(s0, &k2, DT / 2.0), torque);
    let k4 = dynamics(&add(s0, &k3, DT), torque);
    let mut out = *s0;
    for i in 0..4 {
        out[i] += DT / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn wrap(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut v = x % two_pi;
    if v > std::f64::consts::PI {
        v -= two_pi;
    } else if v < -std::f64::consts::PI {
        v += two_pi;
    }
    v
}

pub fn step(vars: &[f64], action: usize) -> (Vec<f64>, f64, bool) {
    let s0 = [vars[0], vars[1], vars[2], vars[3]];
    let mut ns = rk4(&s0, TORQUES[action]);
    ns[0] = wrap(ns[0]);
    ns[1] = wrap(ns[1]);
    ns[2] = ns[2].clamp(-MAX_VEL_1, MAX_VEL_1);
    ns[3] = ns[3].clamp(-MAX_VEL_2, MAX_VEL_2);
    let terminated = -ns[0].cos() - (ns[1] + ns[0]).cos() > 1.0;
    let reward = if terminated { 0.0 } else { -1.0 };
    (ns.to_vec(), reward, terminated)
}
