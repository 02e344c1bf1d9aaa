//! Exponential-tightness diagnostics.
//!
//! Tightness of the kernel chain rests on moment bounds for chi-square
//! widths and on Kolmogorov-type continuity constants.  This module
//! evaluates the exact pieces and probes the empirical ones:
//!
//! ```text
//!     (1/n) log E[(K_n/n)^(gamma n)]
//!         = gamma log(2/n) + (log Gamma(n(gamma+1/2)) - log Gamma(n/2)) / n,
//! ```
//!
//! with `K_n ~ chi^2_n`, is exact in log-space; the companion
//! `(1 + K_n/n)` moment is estimated by Monte Carlo and compared against
//! the analytic majorant `gamma log 2 + logaddexp(0, n m_n)/n` obtained
//! from `(1+x)^p <= 2^p (1 + x^p)`.  The Hölder-increment probe applies
//! the same normalized-moment statistic to the rescaled network output on
//! a grid in the unit cube.  These are diagnostics: a finite probe cannot
//! certify a supremum over all widths, and nothing here claims to.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{LdpError, Result};
use crate::netsim::{self, DEFAULT_INFINITE_CAP};
use crate::network::NetworkSpec;
use crate::rng;

const PROBE_CHUNK: u64 = 64;

fn logaddexp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Exact chi-square moments.
// ---------------------------------------------------------------------------

/// `(1/n) log E[(K_n/n)^(gamma n)]` for `K_n ~ chi^2_n`, in log-space.
pub fn chi2_moment(n: u64, gamma: f64) -> Result<f64> {
    if n == 0 {
        return Err(LdpError::InvalidArgument("n must be positive".into()));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(LdpError::InvalidArgument(format!(
            "gamma must be positive and finite, got {gamma}"
        )));
    }
    let nf = n as f64;
    Ok(gamma * (2.0 / nf).ln() + (ln_gamma(nf * (gamma + 0.5)) - ln_gamma(nf / 2.0)) / nf)
}

// ---------------------------------------------------------------------------
// Monte Carlo with stable log-mean merging.
// ---------------------------------------------------------------------------

/// Shifted sums for a stable log-mean with a delta-method stderr; chunks
/// merge associatively so the parallel reduction is order-stable.
#[derive(Clone, Copy, Debug)]
struct ScalarSums {
    shift: f64,
    s1: f64,
    s2: f64,
    count: u64,
}

impl ScalarSums {
    fn empty() -> Self {
        ScalarSums {
            shift: f64::NEG_INFINITY,
            s1: 0.0,
            s2: 0.0,
            count: 0,
        }
    }

    fn from_logs(xs: &[f64]) -> Self {
        let shift = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        if shift == f64::NEG_INFINITY {
            return ScalarSums::empty();
        }
        let mut s = ScalarSums {
            shift,
            s1: 0.0,
            s2: 0.0,
            count: xs.len() as u64,
        };
        for &x in xs {
            let w = (x - shift).exp();
            s.s1 += w;
            s.s2 += w * w;
        }
        s
    }

    fn merge(self, other: ScalarSums) -> ScalarSums {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let shift = self.shift.max(other.shift);
        let (ra, rb) = ((self.shift - shift).exp(), (other.shift - shift).exp());
        ScalarSums {
            shift,
            s1: self.s1 * ra + other.s1 * rb,
            s2: self.s2 * ra * ra + other.s2 * rb * rb,
            count: self.count + other.count,
        }
    }

    /// `(log mean, stderr of log mean)`.
    fn estimate(&self) -> (f64, f64) {
        let r = self.count as f64;
        let mean = self.s1 / r;
        let log_mean = self.shift + mean.ln();
        let var = (self.s2 / r - mean * mean).max(0.0) / r;
        (log_mean, var.sqrt() / mean)
    }
}

/// Runs `log_stat` once per replica (chunked, stream-seeded, parallel) and
/// returns `(logmean/n, stderr/n)`.
fn normalized_log_moment(
    n: u64,
    reps: u64,
    seed: u64,
    major: u64,
    log_stat: &(dyn Fn(&mut rng::Stream) -> f64 + Sync),
) -> (f64, f64) {
    let chunks = reps.div_ceil(PROBE_CHUNK);
    let sums = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stream = rng::stream(seed, rng::substream(major, c));
            let lo = c * PROBE_CHUNK;
            let hi = ((c + 1) * PROBE_CHUNK).min(reps);
            let xs: Vec<f64> = (lo..hi).map(|_| log_stat(&mut stream)).collect();
            ScalarSums::from_logs(&xs)
        })
        .reduce(ScalarSums::empty, ScalarSums::merge);
    let (log_mean, stderr) = sums.estimate();
    (log_mean / n as f64, stderr / n as f64)
}

/// One grid point of the `(1 + K_n/n)` moment diagnostic.
#[derive(Clone, Debug)]
pub struct Chi2Point {
    pub n: u64,
    /// MC estimate of `(1/n) log E[(1 + K_n/n)^(gamma n)]`.
    pub statistic: f64,
    pub stderr: f64,
    /// Analytic upper bound `gamma log 2 + logaddexp(0, n m_n)/n`.
    pub majorant: f64,
}

/// Grid supremum of the `(1 + K_n/n)` moment diagnostic.
#[derive(Clone, Debug)]
pub struct Chi2LemmaBound {
    pub points: Vec<Chi2Point>,
    pub sup: f64,
    /// stderr at the grid point realizing the supremum.
    pub sup_stderr: f64,
}

/// MC estimate of `sup_grid (1/n) log E[(1 + K_n/n)^(gamma n)]`.
///
/// Each point also carries the analytic majorant; the diagnostic is
/// healthy when `statistic <= majorant + 3 stderr` everywhere.
pub fn chi2_lemma_bound(
    gamma: f64,
    n_grid: &[u64],
    reps: u64,
    seed: u64,
) -> Result<Chi2LemmaBound> {
    if n_grid.is_empty() {
        return Err(LdpError::InvalidArgument("empty n grid".into()));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(LdpError::InvalidArgument(format!(
            "gamma must be nonnegative and finite, got {gamma}"
        )));
    }
    if reps == 0 {
        return Err(LdpError::InvalidArgument("reps must be positive".into()));
    }
    let mut points = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        if n == 0 {
            return Err(LdpError::InvalidArgument("grid widths must be positive".into()));
        }
        let (statistic, stderr) = if gamma == 0.0 {
            (0.0, 0.0)
        } else {
            let chi2 = Gamma::new(n as f64 / 2.0, 2.0).expect("valid Gamma parameters");
            let nf = n as f64;
            let stat = move |s: &mut rng::Stream| -> f64 {
                let k: f64 = chi2.sample(s);
                gamma * nf * (k / nf).ln_1p()
            };
            normalized_log_moment(n, reps, seed, n, &stat)
        };
        let m = if gamma == 0.0 {
            0.0
        } else {
            chi2_moment(n, gamma)?
        };
        let majorant = gamma * std::f64::consts::LN_2 + logaddexp(0.0, n as f64 * m) / n as f64;
        points.push(Chi2Point {
            n,
            statistic,
            stderr,
            majorant,
        });
    }
    let best = points
        .iter()
        .cloned()
        .max_by(|a, b| a.statistic.partial_cmp(&b.statistic).unwrap())
        .expect("grid nonempty");
    Ok(Chi2LemmaBound {
        points,
        sup: best.statistic,
        sup_stderr: best.stderr,
    })
}

// ---------------------------------------------------------------------------
// Kolmogorov-type continuity constants.
// ---------------------------------------------------------------------------

/// Constants of the Kolmogorov-type continuity criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct KolmogorovConstants {
    pub alpha: f64,
    pub alpha_prime: f64,
    pub d: u32,
    pub kappa: f64,
    pub n_prime: u64,
    pub c: f64,
    /// The raw `n' = ceil(d / (alpha - alpha'))` made the denominator
    /// exponent nonpositive and was incremented until positive.
    pub adjusted: bool,
}

/// Evaluates `n' = ceil(d/(alpha - alpha'))` and
/// `c = kappa 2^(alpha'+1+d) / (1 - 2^(-(alpha - alpha' - d/n')))`,
/// incrementing `n'` past the degenerate boundary when needed.
pub fn kolmogorov_constants(
    alpha: f64,
    alpha_prime: f64,
    d: u32,
    kappa: f64,
) -> Result<KolmogorovConstants> {
    if !(alpha.is_finite() && alpha_prime.is_finite() && kappa.is_finite()) {
        return Err(LdpError::InvalidArgument(
            "kolmogorov constants need finite inputs".into(),
        ));
    }
    if !(0.0 < alpha_prime && alpha_prime < alpha) {
        return Err(LdpError::InvalidArgument(format!(
            "need 0 < alpha' < alpha, got alpha' = {alpha_prime}, alpha = {alpha}"
        )));
    }
    if d == 0 {
        return Err(LdpError::InvalidArgument("d must be positive".into()));
    }
    if kappa < 0.0 {
        return Err(LdpError::InvalidArgument("kappa must be nonnegative".into()));
    }
    let df = d as f64;
    let mut n_prime = (df / (alpha - alpha_prime)).ceil() as u64;
    let mut adjusted = false;
    while alpha - alpha_prime - df / n_prime as f64 <= 0.0 {
        n_prime += 1;
        adjusted = true;
    }
    let exponent = alpha - alpha_prime - df / n_prime as f64;
    let c = kappa * 2f64.powf(alpha_prime + 1.0 + df) / (1.0 - 2f64.powf(-exponent));
    Ok(KolmogorovConstants {
        alpha,
        alpha_prime,
        d,
        kappa,
        n_prime,
        c,
        adjusted,
    })
}

// ---------------------------------------------------------------------------
// Hölder-increment probe on the rescaled output.
// ---------------------------------------------------------------------------

/// One point of the increment-moment diagnostic series.
#[derive(Clone, Debug)]
pub struct ProbePoint {
    pub n: u64,
    pub value: f64,
    pub stderr: f64,
}

/// Worst squared Hölder-increment ratio of a rescaled output `z`
/// (`d_out x k`) over the input grid:
/// `max_{i<j} |z_·i - z_·j|^2 / |x_i - x_j|^(2 alpha')`.
pub fn holder_increment_stat(
    z: &DMatrix<f64>,
    inputs: &[nalgebra::DVector<f64>],
    alpha_prime: f64,
) -> f64 {
    let k = inputs.len();
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in (i + 1)..k {
            let dz = (z.column(i) - z.column(j)).norm_squared();
            let dx = (&inputs[i] - &inputs[j]).norm();
            worst = worst.max(dz / dx.powf(2.0 * alpha_prime));
        }
    }
    worst
}

/// MC estimate of
/// `(1/n) log E[(1 + max-increment-ratio)^n]`
/// for the rescaled output at speed `n`; a bounded series over `n` is the
/// empirical signature the continuity argument expects.  The input grid
/// must lie in the unit cube and contain at least two distinct points.
pub fn holder_moment_probe(
    spec: &NetworkSpec,
    n: u64,
    alpha_prime: f64,
    reps: u64,
    seed: u64,
) -> Result<ProbePoint> {
    if !(alpha_prime.is_finite() && alpha_prime > 0.0) {
        return Err(LdpError::InvalidArgument(
            "alpha' must be positive and finite".into(),
        ));
    }
    if n == 0 || reps == 0 {
        return Err(LdpError::InvalidArgument("n and reps must be positive".into()));
    }
    if spec.num_inputs() < 2 {
        return Err(LdpError::InvalidArgument(
            "the increment probe needs at least two grid points".into(),
        ));
    }
    for (i, x) in spec.inputs().iter().enumerate() {
        if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(LdpError::InvalidArgument(format!(
                "input {i} lies outside the unit cube"
            )));
        }
    }
    let nf = n as f64;
    let stat = move |s: &mut rng::Stream| -> f64 {
        let sim = netsim::simulate_weights_with(spec, n as usize, DEFAULT_INFINITE_CAP, s);
        let z = &sim.output / nf.sqrt();
        nf * holder_increment_stat(&z, spec.inputs(), alpha_prime).ln_1p()
    };
    let (value, stderr) = normalized_log_moment(n, reps, seed, n, &stat);
    Ok(ProbePoint { n, value, stderr })
}
