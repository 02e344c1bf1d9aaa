//! Finite-width network simulation and empirical rate estimation.
//!
//! A network of depth `L` at speed `n` has hidden layer `l` of width
//! `round(beta^(l) n)` (an infinite ratio is simulated at `cap * n`).
//! Weights are Gaussian with variance `1/fan_in` and zero biases, so each
//! hidden row of `f^(l)`, viewed across the `k` inputs and conditioned on
//! the previous kernel `v^(l-1)`, is exactly `N(0, v^(l-1))`.  That makes
//! the kernel chain a Markov chain that can be sampled either through
//! explicit weights ([`simulate_weights`]) or directly through the
//! conditional Gaussians ([`simulate_kernels`]); the two agree in
//! distribution, which the test suite checks empirically.
//!
//! Rare-event probabilities decay like `p(n) ~ exp(-n I)`, so
//! [`estimate_slope`] measures `-log p(n) / n` on a width grid and
//! extrapolates the `n -> inf` limit with a weighted affine fit in `1/n`:
//!
//! ```text
//!     -log p(n) / n  =  a + b / n + o(1/n),    rate estimate = a.
//! ```
//!
//! Probabilities too small for plain Monte Carlo can be supplied by an
//! analytic tail oracle through [`ProbSource::Exact`]; the fitting
//! machinery is shared so both paths are directly comparable.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{LdpError, Result};
use crate::gauss::QuadratureSpec;
use crate::network::NetworkSpec;
use crate::opt::{self, LbfgsOptions};
use crate::psd::{ExtendedValue, PsdMatrix};
use crate::rng::{self, Stream};
use crate::variational::{self, RateOptions};

/// Replicas per Monte Carlo work unit (one RNG stream each).
const REPLICA_CHUNK: u64 = 64;

/// Default width multiplier used to simulate infinite-ratio layers.
pub const DEFAULT_INFINITE_CAP: f64 = 16.0;

// ---------------------------------------------------------------------------
// Widths and simulation.
// ---------------------------------------------------------------------------

/// Hidden-layer widths at speed `n` (`cap` replaces infinite ratios).
pub fn layer_widths(spec: &NetworkSpec, n: usize, cap: f64) -> Vec<usize> {
    (1..spec.depth())
        .map(|l| {
            let beta = spec.width_ratio(l);
            let ratio = if beta.is_finite() { beta } else { cap };
            ((ratio * n as f64).round() as usize).max(1)
        })
        .collect()
}

/// One finite-width realization.
#[derive(Clone, Debug)]
pub struct SimOutput {
    /// Raw output `f^(L)`, `d_out x k` (not rescaled).
    pub output: DMatrix<f64>,
    /// Kernel chain `v^(0), ..., v^(L-1)`; level 0 is deterministic.
    pub kernels: Vec<PsdMatrix>,
    /// Hidden widths used at this speed.
    pub widths: Vec<usize>,
}

impl SimOutput {
    /// Rescaled output `(1/sqrt n) f^(L)` flattened row-major
    /// (`z[i*k + j]` = output coordinate `i` at input `j`).
    pub fn rescaled_flat(&self, n: usize) -> DVector<f64> {
        let (d_out, k) = self.output.shape();
        let s = 1.0 / (n as f64).sqrt();
        DVector::from_iterator(
            d_out * k,
            (0..d_out).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| s * self.output[(i, j)]),
        )
    }
}

fn gaussian_matrix(rng: &mut Stream, rows: usize, cols: usize, sd: f64) -> DMatrix<f64> {
    DMatrix::from_row_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| sd * rng.sample::<f64, _>(StandardNormal)),
    )
}

fn gram_kernel(h: &DMatrix<f64>) -> PsdMatrix {
    let m = h.transpose() * h / h.nrows() as f64;
    let sym = (&m + m.transpose()) * 0.5;
    PsdMatrix::from_matrix(&sym).expect("sample Gram matrix is PSD")
}

fn apply_activation(act: &crate::activation::Activation, m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| act.eval(x))
}

pub(crate) fn simulate_weights_with(
    spec: &NetworkSpec,
    n: usize,
    cap: f64,
    rng: &mut Stream,
) -> SimOutput {
    let k = spec.num_inputs();
    let widths = layer_widths(spec, n, cap);
    // h^(0): sigma^(1)(inputs), d_in x k.
    let act1 = spec.activation(1);
    let mut h = DMatrix::from_fn(spec.d_in(), k, |m, j| act1.eval(spec.inputs()[j][m]));
    let mut kernels = vec![gram_kernel(&h)];
    for (l, &width) in (1..spec.depth()).zip(&widths) {
        let w = gaussian_matrix(rng, width, h.nrows(), (1.0 / h.nrows() as f64).sqrt());
        let f = &w * &h;
        h = apply_activation(spec.post_activation(l), &f);
        kernels.push(gram_kernel(&h));
    }
    let w_out = gaussian_matrix(rng, spec.d_out(), h.nrows(), (1.0 / h.nrows() as f64).sqrt());
    let output = &w_out * &h;
    SimOutput {
        output,
        kernels,
        widths,
    }
}

/// Simulates one network draw through explicit weight matrices.
///
/// Weight entries are drawn in a fixed order (layers first-to-last, each
/// row-major), so a given `(spec, n, cap, seed)` reproduces bit-identical
/// results on any machine.
pub fn simulate_weights(spec: &NetworkSpec, n: usize, cap: f64, seed: u64) -> SimOutput {
    let mut stream = rng::stream(seed, 0);
    simulate_weights_with(spec, n, cap, &mut stream)
}

fn simulate_kernels_stream(
    spec: &NetworkSpec,
    n: usize,
    cap: f64,
    rng: &mut Stream,
) -> Vec<PsdMatrix> {
    let k = spec.num_inputs();
    let widths = layer_widths(spec, n, cap);
    let mut kernels = vec![variational::base_kernel(spec)];
    for (l, &width) in (1..spec.depth()).zip(&widths) {
        let prev = kernels.last().unwrap();
        let sqrt_prev = prev.sqrt();
        // Rows of f^(l) given v^(l-1) are iid N(0, v^(l-1)).
        let g = gaussian_matrix(rng, width, k, 1.0);
        let f = &g * sqrt_prev.entries();
        let h = apply_activation(spec.post_activation(l), &f);
        kernels.push(gram_kernel(&h));
    }
    kernels
}

/// Samples the kernel chain directly from its conditional Gaussian law,
/// without materializing weights.  Agrees in distribution with the kernels
/// of [`simulate_weights`] at every width.
pub fn simulate_kernels(spec: &NetworkSpec, n: usize, cap: f64, seed: u64) -> Vec<PsdMatrix> {
    let mut stream = rng::stream(seed, 0);
    simulate_kernels_stream(spec, n, cap, &mut stream)
}

// ---------------------------------------------------------------------------
// Events.
// ---------------------------------------------------------------------------

/// A rare event on the flattened rescaled output (dimension `d_out * k`).
#[derive(Clone, Debug)]
pub enum EventSpec {
    /// `{ z : <direction, z> >= threshold }`.
    Halfspace {
        direction: DVector<f64>,
        threshold: f64,
    },
    /// `{ z : |z - center| >= radius }`.
    BallComplement { center: DVector<f64>, radius: f64 },
}

impl EventSpec {
    pub fn dim(&self) -> usize {
        match self {
            EventSpec::Halfspace { direction, .. } => direction.len(),
            EventSpec::BallComplement { center, .. } => center.len(),
        }
    }

    /// Checks internal consistency and agreement with the output dimension.
    pub fn validate(&self, output_dim: usize) -> Result<()> {
        match self {
            EventSpec::Halfspace {
                direction,
                threshold,
            } => {
                if direction.iter().any(|x| !x.is_finite()) || !threshold.is_finite() {
                    return Err(LdpError::InvalidArgument(
                        "halfspace event has non-finite entries".into(),
                    ));
                }
                if direction.norm() == 0.0 {
                    return Err(LdpError::InvalidArgument(
                        "halfspace direction must be nonzero".into(),
                    ));
                }
            }
            EventSpec::BallComplement { center, radius } => {
                if center.iter().any(|x| !x.is_finite()) || !radius.is_finite() {
                    return Err(LdpError::InvalidArgument(
                        "ball event has non-finite entries".into(),
                    ));
                }
                if *radius <= 0.0 {
                    return Err(LdpError::InvalidArgument(
                        "ball radius must be positive".into(),
                    ));
                }
            }
        }
        if self.dim() != output_dim {
            return Err(LdpError::DimensionMismatch(format!(
                "event dimension {} does not match output dimension {output_dim}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn contains(&self, z: &DVector<f64>) -> bool {
        match self {
            EventSpec::Halfspace {
                direction,
                threshold,
            } => direction.dot(z) >= *threshold,
            EventSpec::BallComplement { center, radius } => (z - center).norm() >= *radius,
        }
    }

    /// Euclidean distance from `z` to the event (0 inside).
    fn distance(&self, z: &DVector<f64>) -> f64 {
        match self {
            EventSpec::Halfspace {
                direction,
                threshold,
            } => (threshold - direction.dot(z)).max(0.0) / direction.norm(),
            EventSpec::BallComplement { center, radius } => (radius - (z - center).norm()).max(0.0),
        }
    }

    /// Projects `z` onto the event (identity inside).
    fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        if self.contains(z) {
            return z.clone();
        }
        match self {
            EventSpec::Halfspace {
                direction,
                threshold,
            } => {
                let gap = threshold - direction.dot(z);
                z + direction * (gap / direction.norm_squared())
            }
            EventSpec::BallComplement { center, radius } => {
                let d = z - center;
                let norm = d.norm();
                if norm == 0.0 {
                    let mut e = DVector::zeros(z.len());
                    e[0] = *radius;
                    center + e
                } else {
                    center + d * (*radius / norm)
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rate estimation from hit counts.
// ---------------------------------------------------------------------------

/// The width grid used for slope extrapolation.
#[derive(Clone, Debug)]
pub struct WidthSchedule {
    pub widths: Vec<usize>,
    /// Width multiplier standing in for infinite ratios.
    pub cap: f64,
}

impl WidthSchedule {
    pub fn new(widths: Vec<usize>, cap: f64) -> Result<Self> {
        if widths.is_empty() {
            return Err(LdpError::InvalidArgument("width grid is empty".into()));
        }
        if widths.iter().any(|&n| n == 0) {
            return Err(LdpError::InvalidArgument("widths must be positive".into()));
        }
        if widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LdpError::InvalidArgument(
                "widths must be strictly increasing".into(),
            ));
        }
        if !(cap.is_finite() && cap > 0.0) {
            return Err(LdpError::InvalidArgument(
                "infinite-ratio cap must be positive and finite".into(),
            ));
        }
        Ok(WidthSchedule { widths, cap })
    }
}

/// Where the per-width event probabilities come from.
pub enum ProbSource<'a> {
    /// Plain Monte Carlo over weight draws.
    Simulation { replicas: u64, seed: u64 },
    /// Analytic tail oracle `n -> P(event at speed n)`, for events whose
    /// probability is far below Monte Carlo resolution.  `replicas` sets
    /// the pseudo-count used for the fit weights and intervals, making the
    /// output directly comparable with a simulation at that budget.
    Exact {
        replicas: u64,
        tail: &'a (dyn Fn(usize) -> f64 + Sync),
    },
}

/// Per-width estimate row.
#[derive(Clone, Debug)]
pub struct WidthEstimate {
    pub n: usize,
    pub hits: u64,
    pub samples: u64,
    pub p_hat: f64,
    /// 95% Clopper-Pearson interval for the hit probability.
    pub ci: (f64, f64),
    /// `-log(p_hat) / n`.
    pub y: f64,
}

/// Result of the affine extrapolation `-log p(n)/n = a + b/n`.
#[derive(Clone, Debug)]
pub struct SlopeFit {
    pub rows: Vec<WidthEstimate>,
    /// Widths dropped for having zero hits.
    pub excluded: Vec<usize>,
    /// Widths the affine fit used (largest half of the usable grid).
    pub fitted: Vec<usize>,
    /// Extrapolated rate (`a`).
    pub rate: f64,
    /// First-order correction (`b`).
    pub correction: f64,
}

/// Exact 95% Clopper-Pearson interval.
pub fn clopper_pearson(hits: u64, samples: u64) -> (f64, f64) {
    let alpha = 0.05;
    let n = samples as f64;
    let lo = if hits == 0 {
        0.0
    } else {
        Beta::new(hits as f64, n - hits as f64 + 1.0)
            .expect("valid Beta parameters")
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if hits == samples {
        1.0
    } else {
        Beta::new(hits as f64 + 1.0, n - hits as f64)
            .expect("valid Beta parameters")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

fn mc_hits(spec: &NetworkSpec, event: &EventSpec, n: usize, cap: f64, replicas: u64, w_idx: usize, seed: u64) -> u64 {
    let chunks = replicas.div_ceil(REPLICA_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stream = rng::stream(seed, rng::substream(w_idx as u64, c));
            let lo = c * REPLICA_CHUNK;
            let hi = ((c + 1) * REPLICA_CHUNK).min(replicas);
            let mut hits = 0u64;
            for _ in lo..hi {
                let sim = simulate_weights_with(spec, n, cap, &mut stream);
                if event.contains(&sim.rescaled_flat(n)) {
                    hits += 1;
                }
            }
            hits
        })
        .sum()
}

/// Estimates the rate of `event` by hit counting on the width grid and
/// affine extrapolation in `1/n`.
///
/// Widths with zero hits are excluded (and reported); the fit uses the
/// larger half of the usable widths, weighted by the delta-method variance
/// of `-log(p_hat)/n`.  At least two usable widths are required.
pub fn estimate_slope(
    spec: &NetworkSpec,
    event: &EventSpec,
    sched: &WidthSchedule,
    source: &ProbSource<'_>,
) -> Result<SlopeFit> {
    event.validate(spec.d_out() * spec.num_inputs())?;
    let replicas = match source {
        ProbSource::Simulation { replicas, .. } | ProbSource::Exact { replicas, .. } => *replicas,
    };
    if replicas == 0 {
        return Err(LdpError::InvalidArgument("replicas must be positive".into()));
    }
    let mut rows = Vec::with_capacity(sched.widths.len());
    for (w_idx, &n) in sched.widths.iter().enumerate() {
        let (hits, p_hat) = match source {
            ProbSource::Simulation { replicas, seed } => {
                let hits = mc_hits(spec, event, n, sched.cap, *replicas, w_idx, *seed);
                (hits, hits as f64 / *replicas as f64)
            }
            ProbSource::Exact { replicas, tail } => {
                let p = tail(n);
                if !(0.0..=1.0).contains(&p) {
                    return Err(LdpError::Estimation(format!(
                        "tail oracle returned {p} at n = {n}"
                    )));
                }
                (((p * *replicas as f64).round() as u64).min(*replicas), p)
            }
        };
        let ci = clopper_pearson(hits, replicas);
        let y = if p_hat > 0.0 {
            -p_hat.ln() / n as f64
        } else {
            f64::INFINITY
        };
        rows.push(WidthEstimate {
            n,
            hits,
            samples: replicas,
            p_hat,
            ci,
            y,
        });
    }
    fit_slope(rows, replicas)
}

fn fit_slope(rows: Vec<WidthEstimate>, replicas: u64) -> Result<SlopeFit> {
    let usable: Vec<&WidthEstimate> = rows.iter().filter(|r| r.p_hat > 0.0).collect();
    let excluded: Vec<usize> = rows.iter().filter(|r| r.p_hat == 0.0).map(|r| r.n).collect();
    if usable.len() < 2 {
        return Err(LdpError::Estimation(format!(
            "need at least two widths with hits to fit a slope, have {}",
            usable.len()
        )));
    }
    // Largest half of the usable grid: closest to the n -> inf regime.
    let keep = usable.len().div_ceil(2).max(2);
    let fit_rows = &usable[usable.len() - keep..];
    let fitted: Vec<usize> = fit_rows.iter().map(|r| r.n).collect();

    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in fit_rows {
        // Var(-log p / n) ~ (1 - p) / (replicas p n^2) by the delta method;
        // clamp p away from 1 so degenerate rows keep a finite weight.
        let p = r.p_hat.min(1.0 - 0.5 / replicas as f64);
        let var = (1.0 - p) / (replicas as f64 * p * (r.n as f64).powi(2));
        let w = 1.0 / var;
        let x = 1.0 / r.n as f64;
        sw += w;
        sx += w * x;
        sy += w * r.y;
        sxx += w * x * x;
        sxy += w * x * r.y;
    }
    let det = sw * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return Err(LdpError::Estimation("degenerate slope fit".into()));
    }
    let rate = (sxx * sy - sx * sxy) / det;
    let correction = (sw * sxy - sx * sy) / det;
    Ok(SlopeFit {
        rows,
        excluded,
        fitted,
        rate,
        correction,
    })
}

// ---------------------------------------------------------------------------
// Variational prediction for an event.
// ---------------------------------------------------------------------------

/// Variational prediction for an event's decay rate.
#[derive(Clone, Debug)]
pub struct EventRatePrediction {
    pub value: ExtendedValue,
    /// Minimizing output point (on the event boundary unless the typical
    /// output already lies inside).
    pub z_star: DVector<f64>,
    pub converged: bool,
}

fn unflatten(z: &DVector<f64>, d_out: usize, k: usize) -> Vec<DVector<f64>> {
    (0..d_out)
        .map(|i| DVector::from_iterator(k, (0..k).map(|j| z[i * k + j])))
        .collect()
}

/// Predicts the rate of `event`: `inf { I_out(z) : z in event }`.
///
/// The typical rescaled output is 0, so an event containing the origin has
/// rate 0.  Otherwise the infimum is approached with a penalty-ladder
/// descent over `z` (each evaluation an [`variational::output_rate`]
/// solve) and the final point is projected exactly onto the event before
/// the reported cold re-evaluation.
pub fn predict_event_rate(
    spec: &NetworkSpec,
    event: &EventSpec,
    quad: &QuadratureSpec,
    opts: &RateOptions,
) -> Result<EventRatePrediction> {
    let k = spec.num_inputs();
    let d = spec.d_out() * k;
    event.validate(d)?;
    let zero = DVector::zeros(d);
    if event.contains(&zero) {
        return Ok(EventRatePrediction {
            value: ExtendedValue::finite(0.0),
            z_star: zero,
            converged: true,
        });
    }

    // Cheap inner options for the search; the final point is re-priced
    // with the caller's options.
    let search_opts = RateOptions {
        restarts: opts.restarts.min(2).max(1),
        ..opts.clone()
    };
    let rate_at = |z: &DVector<f64>, o: &RateOptions| -> Result<ExtendedValue> {
        Ok(variational::output_rate(spec, &unflatten(z, spec.d_out(), k), quad, o)?.value)
    };

    let boundary0 = event.project(&zero);
    let mut candidates: Vec<DVector<f64>> = vec![boundary0.clone()];
    // A couple of deterministic off-axis starts guard against landing in a
    // poor basin on curved boundaries.
    if d > 1 {
        let mut stream = rng::stream(opts.seed ^ 0x6e76, 0);
        for _ in 0..2 {
            let pert = DVector::from_iterator(
                d,
                boundary0
                    .iter()
                    .map(|&x| x + 0.3 * (x.abs() + 0.2) * stream.sample::<f64, _>(StandardNormal)),
            );
            candidates.push(event.project(&pert));
        }
    } else if let EventSpec::BallComplement { .. } = event {
        // One boundary point per side.
        let mut other = boundary0.clone();
        if let EventSpec::BallComplement { center, radius } = event {
            other[0] = center[0] - radius * (boundary0[0] - center[0]).signum() * 1.0
                + (boundary0[0] - center[0]) * 0.0;
            other[0] = 2.0 * center[0] - boundary0[0];
            let _ = radius;
        }
        candidates.push(other);
    }

    let mut best: Option<(f64, DVector<f64>, bool)> = None;
    for z0 in &candidates {
        let mut z = z0.clone();
        let mut converged = true;
        for mu in [1e2, 1e4, 1e6] {
            let mut obj = |x: &[f64], need_grad: bool| {
                let zv = DVector::from_column_slice(x);
                let base = match rate_at(&zv, &search_opts) {
                    Ok(ExtendedValue::Finite(v)) => v,
                    _ => return (f64::INFINITY, None),
                };
                let f = base + mu * event.distance(&zv).powi(2);
                if !need_grad {
                    return (f, None);
                }
                let g = opt::fd_gradient(
                    &mut |y: &[f64]| {
                        let zy = DVector::from_column_slice(y);
                        match rate_at(&zy, &search_opts) {
                            Ok(ExtendedValue::Finite(v)) => v + mu * event.distance(&zy).powi(2),
                            _ => f64::INFINITY,
                        }
                    },
                    x,
                    f,
                    1e-4,
                );
                (f, Some(g))
            };
            let out = opt::lbfgs_minimize(
                &mut obj,
                z.iter().copied().collect(),
                &LbfgsOptions {
                    max_iters: 40,
                    grad_tol: 1e-7,
                    history: 8,
                    x_norm_cap: f64::INFINITY,
                    // Every evaluation is a full chain solve; stop once a
                    // window of steps no longer moves the penalized value.
                    stall_tol: 1e-9,
                },
            );
            z = DVector::from_column_slice(&out.x);
            converged = out.converged || out.grad_norm <= 1e-3 * out.f.abs().max(1.0);
        }
        // Projected-descent polish on the plain objective: the penalty
        // stages pin the constraint-normal coordinate but their stiffness
        // corrupts finite differences along the boundary, leaving
        // tangential slack that a few clean projected steps remove.
        let mut z_final = event.project(&z);
        if let ExtendedValue::Finite(mut f_cur) = rate_at(&z_final, &search_opts)? {
            let mut plain = |y: &[f64]| -> f64 {
                let zy = event.project(&DVector::from_column_slice(y));
                match rate_at(&zy, &search_opts) {
                    Ok(ExtendedValue::Finite(v)) => v,
                    _ => f64::INFINITY,
                }
            };
            for _ in 0..40 {
                let zs: Vec<f64> = z_final.iter().copied().collect();
                let g = opt::fd_gradient(&mut plain, &zs, f_cur, 1e-6);
                let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if gnorm <= 1e-8 {
                    break;
                }
                let mut t = 1.0;
                let mut moved = false;
                for _ in 0..30 {
                    let z_try = event
                        .project(&DVector::from_iterator(
                            d,
                            z_final.iter().zip(&g).map(|(zi, gi)| zi - t * gi),
                        ));
                    if let Ok(ExtendedValue::Finite(ft)) = rate_at(&z_try, &search_opts) {
                        if ft < f_cur - 1e-12 * f_cur.abs().max(1.0) {
                            z_final = z_try;
                            f_cur = ft;
                            moved = true;
                            break;
                        }
                    }
                    t *= 0.5;
                }
                if !moved {
                    break;
                }
            }
        }
        match rate_at(&z_final, opts)? {
            ExtendedValue::Finite(v) => {
                if best.as_ref().map(|(b, _, _)| v < *b).unwrap_or(true) {
                    best = Some((v, z_final, converged));
                }
            }
            ExtendedValue::Infinite => {}
        }
    }
    match best {
        Some((v, z_star, converged)) => Ok(EventRatePrediction {
            value: ExtendedValue::finite(v),
            z_star,
            converged,
        }),
        None => Ok(EventRatePrediction {
            value: ExtendedValue::Infinite,
            z_star: event.project(&zero),
            converged: false,
        }),
    }
}
