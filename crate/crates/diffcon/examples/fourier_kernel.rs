//! Random-Fourier decomposition of the Gaussian reverse kernel: the
//! estimate (1/M) sum_i phi(w_i, mu)^T rho(w_i, x) is unbiased for
//! N(x | mu, beta_tilde I) with O(1/sqrt(M)) error.
//!
//! Run with: `cargo run --example fourier_kernel`

use diffcon::controller::{gaussian_density, kernel_mc_estimate, FourierBasis};
use diffcon::rng::Stream;

fn main() {
    let mu = [0.2, -0.4];
    let x = [0.5, 0.1];
    let beta_tilde = 0.6;
    let exact = gaussian_density(&x, &mu, beta_tilde);
    println!("exact Gaussian density: {exact:.6}");
    println!("{:>8} {:>12} {:>12}", "M", "mean |err|", "err * sqrt(M)");
    let rng = Stream::from_seed(8);
    for (mi, m) in [100usize, 400, 1600, 6400, 25_600].into_iter().enumerate() {
        let repeats = 200;
        let mut err = 0.0;
        for i in 0..repeats {
            let basis = FourierBasis::sample(
                m,
                2,
                beta_tilde,
                &mut rng.derive((mi * 1000 + i) as u64),
            )
            .unwrap();
            err += (kernel_mc_estimate(&basis, &mu, &x).unwrap() - exact).abs();
        }
        err /= repeats as f64;
        println!("{m:>8} {err:>12.6} {:>12.4}", err * (m as f64).sqrt());
    }
    println!("(the last column is flat: the error decays like 1/sqrt(M))");
}
