//! Finite-difference verification of analytic gradients. Used by tests
//! only, always at f64: central differences at f32 are too noisy to
//! certify anything.

use super::Tensor;

/// Maximum relative error between analytic gradients and central finite
/// differences, over every element of every leaf in `leaves`.
///
/// `build` must construct a fresh scalar loss from the current leaf
/// values each time it is called (define-by-run makes this cheap).
/// Relative error uses a small absolute floor so near-zero gradients do
/// not blow the ratio up on FD rounding noise.
pub fn max_rel_err<F>(leaves: &[Tensor<f64>], build: F) -> f64
where
    F: Fn() -> Tensor<f64>,
{
    for l in leaves {
        l.zero_grad();
    }
    let loss = build();
    loss.backward().expect("scalar loss");

    let mut worst = 0.0f64;
    for leaf in leaves {
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let base = leaf.to_vec();
        for i in 0..base.len() {
            let h = 1e-5 * base[i].abs().max(1.0);
            let mut plus = base.clone();
            plus[i] += h;
            leaf.set_data(plus).unwrap();
            let fp = build().item();
            let mut minus = base.clone();
            minus[i] -= h;
            leaf.set_data(minus).unwrap();
            let fm = build().item();
            leaf.set_data(base.clone()).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
            let err = (analytic[i] - numeric).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
