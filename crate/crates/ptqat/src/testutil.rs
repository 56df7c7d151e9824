//! Shared helpers for unit tests: seeded data and a central-finite-difference
//! gradient checker, independent of the tape's backward rules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::tensor::Tensor;

pub fn seeded_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Check the analytic gradient of `f` w.r.t. every listed leaf against
/// central finite differences (h = 1e-5) at absolute tolerance `tol`.
pub fn check_grad(
    leaves: &[(Vec<usize>, Vec<f64>)],
    f: impl Fn(&[Tensor]) -> Tensor,
    tol: f64,
) {
    const H: f64 = 1e-5;
    let tensors: Vec<Tensor> = leaves
        .iter()
        .map(|(shape, data)| {
            let t = Tensor::from_vec(shape.clone(), data.clone()).unwrap();
            t.set_requires_grad(true);
            t
        })
        .collect();
    let loss = f(&tensors);
    loss.backward().unwrap();

    for (li, t) in tensors.iter().enumerate() {
        let analytic = t.grad().expect("leaf missing grad");
        let base = t.to_vec();
        for i in 0..base.len() {
            let eval = |v: f64| -> f64 {
                let fresh: Vec<Tensor> = leaves
                    .iter()
                    .enumerate()
                    .map(|(lj, (shape, data))| {
                        let mut d = if lj == li { base.clone() } else { data.clone() };
                        if lj == li {
                            d[i] = v;
                        }
                        Tensor::from_vec(shape.clone(), d).unwrap()
                    })
                    .collect();
                f(&fresh).item()
            };
            let numeric = (eval(base[i] + H) - eval(base[i] - H)) / (2.0 * H);
            let diff = (analytic[i] - numeric).abs();
            assert!(
                diff < tol,
                "grad mismatch leaf {li} elem {i}: analytic {} vs numeric {} (|Δ|={diff})",
                analytic[i],
                numeric
            );
        }
    }
}
