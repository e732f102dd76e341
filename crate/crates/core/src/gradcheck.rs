//! Central finite-difference oracles for gradient verification.
//!
//! These helpers only ever evaluate the network function; they never
//! touch the analytic backward path they are used to check.

use crate::linalg::Matrix;
use crate::nn::{Network, ParamVector};

/// Central finite differences of an arbitrary scalar of the network,
/// evaluated by cloning the network and nudging one parameter at a time.
pub fn central_diff_net<F>(net: &Network, h: f64, mut f: F) -> ParamVector
where
    F: FnMut(&Network) -> f64,
{
    let d = net.param_count();
    let mut work = net.clone();
    let mut grad = ParamVector::zeros(d);
    for i in 0..d {
        let orig = work.params().0[i];
        work.params_mut().0[i] = orig + h;
        let fp = f(&work);
        work.params_mut().0[i] = orig - h;
        let fm = f(&work);
        work.params_mut().0[i] = orig;
        grad.0[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central finite differences of a scalar that depends on the parameters
/// only through the batch outputs on `x`.
pub fn central_diff<F>(net: &Network, x: &Matrix, h: f64, mut scalar: F) -> ParamVector
where
    F: FnMut(&Matrix) -> f64,
{
    central_diff_net(net, h, |n| scalar(&n.forward(x).expect("forward in finite differences").outputs))
}

/// ‖a − b‖ / max(‖b‖, 1e-12).
pub fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
    a.sub(b).norm() / b.norm().max(1e-12)
}

/// Least-squares slope of y against x.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}
