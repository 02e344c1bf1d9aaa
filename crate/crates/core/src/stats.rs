//! Distribution-comparison statistics.
//!
//! The simulators expose two samplers for the same kernel law (explicit
//! weights and the conditional-Gaussian chain); agreement is checked with
//! the two-sample Kolmogorov-Smirnov test.  The p-value uses the
//! asymptotic Kolmogorov distribution with the finite-sample effective
//! argument
//!
//! ```text
//!     lambda = (sqrt(Ne) + 0.12 + 0.11 / sqrt(Ne)) * D,
//!     Ne     = n m / (n + m),
//! ```
//!
//! accurate for `Ne >= 4` or so.

use crate::error::{LdpError, Result};

/// Two-sample KS outcome.
#[derive(Clone, Debug)]
pub struct KsResult {
    /// Sup-norm distance between the empirical CDFs.
    pub statistic: f64,
    /// Asymptotic two-sided p-value.
    pub p_value: f64,
    pub n: usize,
    pub m: usize,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(lambda) = 2 sum_{j>=1} (-1)^(j-1) exp(-2 j^2 lambda^2)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    // The alternating series converges slowly below ~0.2 but the value is
    // indistinguishable from 1 there.
    if lambda < 0.06 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(LdpError::InvalidArgument(
            "KS test needs nonempty samples".into(),
        ));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(LdpError::InvalidArgument(
            "KS test samples must be finite".into(),
        ));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = xs[i].min(ys[j]);
        while i < n && xs[i] <= t {
            i += 1;
        }
        while j < m && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf(lambda),
        n,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(seed: u64, count: usize, shift: f64) -> Vec<f64> {
        let mut s = rng::stream(seed, 0);
        (0..count)
            .map(|_| shift + s.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn kolmogorov_sf_reference_values() {
        assert!((kolmogorov_sf(0.5) - 0.96394).abs() < 1e-4);
        assert!((kolmogorov_sf(1.0) - 0.27000).abs() < 1e-4);
        assert!((kolmogorov_sf(2.0) - 6.70925e-4).abs() < 1e-8);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
        assert!(kolmogorov_sf(5.0) < 1e-20);
    }

    #[test]
    fn statistic_matches_hand_computation() {
        // F_a jumps 1/3 at {1,2,3}; F_b jumps 1/2 at {1.5, 2.5}.
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[1.5, 2.5]).unwrap();
        assert!((r.statistic - 1.0 / 3.0).abs() < 1e-15, "D = {}", r.statistic);
    }

    #[test]
    fn same_distribution_is_not_rejected() {
        let a = normals(101, 2000, 0.0);
        let b = normals(202, 2000, 0.0);
        let r = ks_two_sample(&a, &b).unwrap();
        assert!(
            r.p_value > 0.01,
            "same-law samples rejected: D = {}, p = {}",
            r.statistic,
            r.p_value
        );
    }

    #[test]
    fn shifted_distribution_is_rejected() {
        let a = normals(303, 2000, 0.0);
        let b = normals(404, 2000, 0.5);
        let r = ks_two_sample(&a, &b).unwrap();
        assert!(
            r.p_value < 1e-6,
            "shifted samples not rejected: p = {}",
            r.p_value
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ks_two_sample(&[], &[1.0]).is_err());
        assert!(ks_two_sample(&[f64::NAN], &[1.0]).is_err());
    }
}
