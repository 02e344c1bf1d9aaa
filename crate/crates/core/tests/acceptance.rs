//! End-to-end acceptance suite.
//!
//! Each criterion below checks the library against an independent oracle:
//! closed forms where they exist (chi-square Legendre transforms, Gaussian
//! output costs, the ReLU arc-cosine kernel, normal tail asymptotics),
//! Monte Carlo cross-checks elsewhere.  One test per criterion prints a
//! single `criterion N (...): PASS/FAIL` line; the final test reruns every
//! computation with identical configuration and demands byte-identical
//! canonical artifacts.
//!
//! Heavy computations run once and are cached, so the determinism rerun
//! costs one extra pass rather than two.

use std::fmt::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use ldpmlp::gauss::{self, QuadMethod, QuadratureSpec};
use ldpmlp::netsim::{self, EventSpec, ProbSource, WidthSchedule};
use ldpmlp::psd::{self, chol_param, extended_quadratic, theta_len};
use ldpmlp::rng;
use ldpmlp::stats;
use ldpmlp::tightness;
use ldpmlp::variational::{grid_rate_profile, legendre_rate, output_rate, RateOptions};
use ldpmlp::{Activation, ExtendedValue, NetworkSpec, PsdMatrix};

// ---------------------------------------------------------------------------
// Harness.
// ---------------------------------------------------------------------------

struct CritOut {
    pass: bool,
    detail: String,
    /// Canonical text artifact; the determinism criterion compares these
    /// byte-for-byte across independent reruns.
    artifact: String,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.17e}")
}

fn fnv_u64(h: u64, x: u64) -> u64 {
    let mut h = h;
    for b in x.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const FNV_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn finalize(
    fails: Vec<String>,
    mut detail: String,
    artifact: String,
    t0: Instant,
    budget_s: f64,
) -> CritOut {
    let mut fails = fails;
    let elapsed = t0.elapsed().as_secs_f64();
    if elapsed > budget_s {
        fails.push(format!("runtime {elapsed:.1}s exceeds {budget_s:.0}s budget"));
    }
    let _ = write!(detail, "; {elapsed:.1}s");
    if !fails.is_empty() {
        detail = format!("{detail}; failures: {}", fails.join(" | "));
    }
    CritOut {
        pass: fails.is_empty(),
        detail,
        artifact,
    }
}

fn report(n: usize, name: &str, out: &CritOut) {
    let status = if out.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} ({name}): {status} — {}", out.detail);
    assert!(out.pass, "criterion {n} ({name}): {}", out.detail);
}

fn gh(k: usize, nodes: usize) -> QuadratureSpec {
    QuadratureSpec::new(QuadMethod::GaussHermite, nodes, 0, 0, k).unwrap()
}

fn ev_value(v: &ExtendedValue) -> f64 {
    match v {
        ExtendedValue::Finite(x) => *x,
        ExtendedValue::Infinite => f64::INFINITY,
    }
}

fn act(name: &str) -> Activation {
    Activation::builtin(name).unwrap()
}

fn dv(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

// ---------------------------------------------------------------------------
// Criterion 1: scalar identity oracle.
// ---------------------------------------------------------------------------
//
// For the identity activation with k = 1 and q = 1, the layer summand is a
// normalized chi-square, whose Legendre transform has the closed form
// J(v) = (v - 1 - log v) / 2.  The closed form itself is cross-checked by a
// brute-force supremum of lambda*v + log(1 - 2 lambda)/2 over a fine lambda
// grid, so the library value is anchored to two independent routes.

fn run_c1() -> CritOut {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut artifact = String::new();
    let identity = act("identity");
    let q = PsdMatrix::identity(1);
    let quad = gh(1, 64);

    let mut max_dev: f64 = 0.0;
    let mut max_grid_gap: f64 = 0.0;
    for &v in &[0.2f64, 0.5, 1.0, 2.0, 5.0] {
        let closed = 0.5 * (v - 1.0 - v.ln());
        let vm = PsdMatrix::from_matrix(&DMatrix::from_element(1, 1, v)).unwrap();
        let r = legendre_rate(&identity, &vm, &q, &quad).unwrap();
        let got = ev_value(&r.value);

        // Brute-force oracle: sup over a lambda grid of the explicit
        // chi-square dual lambda*v + log(1 - 2 lambda)/2.
        let mut sup = f64::NEG_INFINITY;
        let step = 1e-4;
        let mut lam = -40.0;
        while lam < 0.49995 {
            sup = sup.max(lam * v + 0.5 * (1.0 - 2.0 * lam).ln());
            lam += step;
        }

        let dev = (got - closed).abs();
        let grid_gap = (sup - closed).abs();
        max_dev = max_dev.max(dev);
        max_grid_gap = max_grid_gap.max(grid_gap);
        if dev > 1e-3 {
            fails.push(format!("v={v}: |J - closed| = {dev:.2e} > 1e-3"));
        }
        if grid_gap > 2e-6 {
            fails.push(format!(
                "v={v}: grid oracle disagrees with closed form by {grid_gap:.2e}"
            ));
        }
        let _ = writeln!(
            artifact,
            "c1 v={} rate={} closed={} grid_sup={}",
            fmt_f(v),
            fmt_f(got),
            fmt_f(closed),
            fmt_f(sup)
        );
    }
    let detail = format!(
        "max |J - (v-1-log v)/2| = {max_dev:.2e} (tol 1e-3), grid-oracle gap = {max_grid_gap:.2e}"
    );
    finalize(fails, detail, artifact, t0, 10.0)
}

// ---------------------------------------------------------------------------
// Criterion 2: Gaussian output oracle.
// ---------------------------------------------------------------------------
//
// A depth-1 identity network on the single input x = 1 has base kernel
// v = 1, so the output rate is the pure Cameron-Martin cost z^2 / 2.

fn run_c2() -> CritOut {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut artifact = String::new();
    let spec = NetworkSpec::new(1, 1, 1, vec![], vec![act("identity")], vec![dv(&[1.0])]).unwrap();
    let quad = gh(1, 64);
    let opts = RateOptions::default();

    let mut max_dev: f64 = 0.0;
    for &z in &[0.0, 0.5, 1.0, 2.0] {
        let r = output_rate(&spec, &[dv(&[z])], &quad, &opts).unwrap();
        let got = ev_value(&r.value);
        let want = 0.5 * z * z;
        let dev = (got - want).abs();
        max_dev = max_dev.max(dev);
        if dev > 1e-4 {
            fails.push(format!("z={z}: |rate - z^2/2| = {dev:.2e} > 1e-4"));
        }
        let _ = writeln!(artifact, "c2 z={} rate={}", fmt_f(z), fmt_f(got));
    }
    let detail = format!("max |rate - z^2/2| = {max_dev:.2e} (tol 1e-4)");
    finalize(fails, detail, artifact, t0, 5.0)
}

// ---------------------------------------------------------------------------
// Criterion 3: the forward kernel map is the zero of the layer rate.
// ---------------------------------------------------------------------------
//
// For relu and tanh at k <= 2 and random positive definite q, the rate
// J(V(q) | q) must vanish (up to quadrature and ascent tolerance), and the
// Monte Carlo forward kernel for relu must match the arc-cosine closed
// form within three standard errors of the mean.

fn arccos_kernel(q: &PsdMatrix) -> DMatrix<f64> {
    let k = q.dim();
    let e = q.entries();
    let mut v = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                v[(i, j)] = e[(i, i)] / 2.0;
            } else {
                let s = (e[(i, i)] * e[(j, j)]).sqrt();
                let rho = (e[(i, j)] / s).clamp(-1.0, 1.0);
                let theta = rho.acos();
                v[(i, j)] = s / (2.0 * std::f64::consts::PI)
                    * (theta.sin() + (std::f64::consts::PI - theta) * rho);
            }
        }
    }
    v
}

fn run_c3() -> CritOut {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut artifact = String::new();
    let relu = act("relu");

    // Random strictly positive definite test kernels, five per (act, k).
    let random_qs = |combo: u64, k: usize| -> Vec<PsdMatrix> {
        let mut s = rng::stream(0xC3, combo);
        (0..5)
            .map(|_| {
                if k == 1 {
                    let u: f64 = s.random();
                    PsdMatrix::from_matrix(&DMatrix::from_element(1, 1, 0.3 + 2.7 * u)).unwrap()
                } else {
                    let d0: f64 = s.random();
                    let off: f64 = s.random();
                    let d1: f64 = s.random();
                    chol_param(2, &[0.4 + 1.2 * d0, -1.4 + 2.8 * off, 0.4 + 1.2 * d1]).unwrap()
                }
            })
            .collect()
    };

    let mut max_j: f64 = 0.0;
    for (ai, a) in [act("relu"), act("tanh")].iter().enumerate() {
        for k in 1..=2usize {
            let quad = gh(k, 64);
            for (qi, q) in random_qs((ai * 2 + k - 1) as u64, k).iter().enumerate() {
                let v = gauss::forward_kernel(a, q, &quad).unwrap();
                let r = legendre_rate(a, &v, q, &quad).unwrap();
                let j = ev_value(&r.value);
                max_j = max_j.max(j);
                if !(j <= 1e-3 && j >= -1e-9) {
                    fails.push(format!("{} k={k} q#{qi}: J(V(q)|q) = {j:.3e}", a.id()));
                }
                let _ = writeln!(artifact, "c3 zero {} k={k} q{qi} J={}", a.id(), fmt_f(j));
            }
        }
    }

    // Arc-cosine cross-check for relu at the same kernels.
    let mut worst_sigma: f64 = 0.0;
    for k in 1..=2usize {
        for (qi, q) in random_qs((k - 1) as u64, k).iter().enumerate() {
            let mc_spec =
                QuadratureSpec::new(QuadMethod::MonteCarlo, 0, 10_000_000, 0xC3F0 + qi as u64, k)
                    .unwrap();
            let v_mc = gauss::forward_kernel(&relu, q, &mc_spec).unwrap();
            let closed = arccos_kernel(q);

            // Per-entry standard error from an independent moment probe:
            // sd(relu(x_i) relu(x_j)) over the same Gaussian law.
            let sq = q.sqrt();
            let mut s = rng::stream(0xC35D, (k * 8 + qi) as u64);
            let probes = 200_000usize;
            let mut sum = DMatrix::<f64>::zeros(k, k);
            let mut sumsq = DMatrix::<f64>::zeros(k, k);
            for _ in 0..probes {
                let g = DVector::from_iterator(k, (0..k).map(|_| s.sample::<f64, _>(StandardNormal)));
                let x = sq.entries() * g;
                for i in 0..k {
                    for j in 0..k {
                        let p = relu.eval(x[i]) * relu.eval(x[j]);
                        sum[(i, j)] += p;
                        sumsq[(i, j)] += p * p;
                    }
                }
            }
            for i in 0..k {
                for j in 0..k {
                    let mean = sum[(i, j)] / probes as f64;
                    let var = (sumsq[(i, j)] / probes as f64 - mean * mean).max(0.0);
                    let stderr = (var / 1e7).sqrt();
                    let dev = (v_mc.get(i, j) - closed[(i, j)]).abs();
                    worst_sigma = worst_sigma.max(dev / stderr.max(1e-300));
                    if dev > 3.0 * stderr + 1e-12 {
                        fails.push(format!(
                            "relu k={k} q#{qi} entry ({i},{j}): |MC - arccos| = {dev:.3e} > 3 stderr = {:.3e}",
                            3.0 * stderr
                        ));
                    }
                    let _ = writeln!(
                        artifact,
                        "c3 arccos k={k} q{qi} ({i},{j}) mc={} closed={} stderr={}",
                        fmt_f(v_mc.get(i, j)),
                        fmt_f(closed[(i, j)]),
                        fmt_f(stderr)
                    );
                }
            }
        }
    }

    let detail = format!(
        "max J(V(q)|q) = {max_j:.2e} (tol 1e-3); worst arc-cosine deviation = {worst_sigma:.2} stderr (tol 3)"
    );
    finalize(fails, detail, artifact, t0, 120.0)
}

// ---------------------------------------------------------------------------
// Criterion 4: the two samplers agree in law.
// ---------------------------------------------------------------------------
//
// Output marginals from explicit weight simulation and from the
// kernel-chain sampler (output drawn as sqrt(v) g with g standard normal)
// are compared by a two-sample KS test at the 1% level, across depths
// 1..3 and one or two inputs, at width 100 with 10^4 replicas per route.

fn run_c4() -> CritOut {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut artifact = String::new();
    let reps = 10_000usize;
    let n = 100usize;
    let inputs_all = [dv(&[0.8, -0.4]), dv(&[-0.2, 0.6])];

    let mut min_p: f64 = 1.0;
    for depth in 1..=3usize {
        let acts: Vec<Activation> = match depth {
            1 => vec![act("tanh")],
            2 => vec![act("tanh"), act("relu")],
            _ => vec![act("tanh"), act("relu"), act("tanh")],
        };
        for k in 1..=2usize {
            let spec = NetworkSpec::new(
                depth,
                2,
                1,
                vec![1.0; depth - 1],
                acts.clone(),
                inputs_all[..k].to_vec(),
            )
            .unwrap();
            let cfg = ((depth - 1) * 2 + (k - 1)) as u64;

            let mut w_samps = vec![Vec::with_capacity(reps); k];
            let mut k_samps = vec![Vec::with_capacity(reps); k];
            for rep in 0..reps {
                let seed_w = (0xA4u64 << 40) | (cfg << 32) | rep as u64;
                let out = netsim::simulate_weights(&spec, n, 4.0, seed_w);
                for j in 0..k {
                    w_samps[j].push(out.output[(0, j)]);
                }

                let seed_k = (0xB4u64 << 40) | (cfg << 32) | rep as u64;
                let chain = netsim::simulate_kernels(&spec, n, 4.0, seed_k);
                let v_last = chain.last().unwrap();
                let mut gs = rng::stream((0xC4u64 << 40) | (cfg << 32) | rep as u64, 0);
                let g = DVector::from_iterator(
                    k,
                    (0..k).map(|_| gs.sample::<f64, _>(StandardNormal)),
                );
                let y = v_last.sqrt().entries() * g;
                for j in 0..k {
                    k_samps[j].push(y[j]);
                }
            }

            for j in 0..k {
                let ks = stats::ks_two_sample(&w_samps[j], &k_samps[j]).unwrap();
                min_p = min_p.min(ks.p_value);
                if ks.p_value < 0.01 {
                    fails.push(format!(
                        "depth={depth} k={k} coord {j}: KS p = {:.4e} < 0.01 (stat {:.4e})",
                        ks.p_value, ks.statistic
                    ));
                }
                let _ = writeln!(
                    artifact,
                    "c4 depth={depth} k={k} coord={j} ks_stat={} p={}",
                    fmt_f(ks.statistic),
                    fmt_f(ks.p_value)
                );
            }
        }
    }
    let detail = format!("min KS p-value = {min_p:.3} across 9 marginals (reject below 0.01)");
    finalize(fails, detail, artifact, t0, 300.0)
}

// ---------------------------------------------------------------------------
// Criterion 5: empirical large-deviation slopes match the theory.
// ---------------------------------------------------------------------------
//
// Depth-1 identity leg: P(output >= r) has exact Gaussian tails, so the
// analytic tail oracle feeds the slope fit and the extrapolated rate must
// land within 10% of r^2/2.  Depth-2 relu leg: plain Monte Carlo at the
// same widths against the variational boundary value at z = r, within
// 15%.  The threshold r = 0.13 keeps the n = 400 hit probability above
// 1e-4 (so the top width stays Monte Carlo resolvable) while keeping the
// finite-size intercept bias from the sqrt(n) tail prefactor — an
// 0.5 log(n)/n term the affine-in-1/n fit cannot absorb, about +0.0017
// absolute on the intercept for the {200, 400} fit — near 11% of the
// rate, inside the 15% band.

fn run_c5() -> CritOut {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut artifact = String::new();
    let widths = WidthSchedule::new(vec![50, 100, 200, 400], 16.0).unwrap();
    let replicas = 1_000_000u64;
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    // Leg A: exact Gaussian tails, identity depth-1 network.
    let spec1 = NetworkSpec::new(1, 1, 1, vec![], vec![act("identity")], vec![dv(&[1.0])]).unwrap();
    for &r in &[1.0, 1.5] {
        let event = EventSpec::Halfspace {
            direction: dv(&[1.0]),
            threshold: r,
        };
        let tail = move |n: usize| std_normal.sf(r * (n as f64).sqrt());
        let source = ProbSource::Exact {
            replicas,
            tail: &tail,
        };
        let fit = netsim::estimate_slope(&spec1, &event, &widths, &source).unwrap();
        let want = r * r / 2.0;
        let rel = (fit.rate - want).abs() / want;
        if rel > 0.10 {
            fails.push(format!(
                "identity leg r={r}: slope {:.5} vs {want:.5} off by {:.1}% > 10%",
                fit.rate,
                100.0 * rel
            ));
        }
        let _ = writeln!(
            artifact,
            "c5 identity r={} rate={} correction={} fitted={:?}",
            fmt_f(r),
            fmt_f(fit.rate),
            fmt_f(fit.correction),
            fit.fitted
        );
        for row in &fit.rows {
            let _ = writeln!(
                artifact,
                "c5 identity r={} n={} hits={} p={} y={}",
                fmt_f(r),
                row.n,
                row.hits,
                fmt_f(row.p_hat),
                fmt_f(row.y)
            );
        }
        let _ = writeln!(
            artifact,
            "c5 identity r={} rel_dev={}",
            fmt_f(r),
            fmt_f(rel)
        );
    }

    // Leg B: depth-2 relu network, Monte Carlo hits against the
    // variational boundary value.
    let spec2 = NetworkSpec::new(
        2,
        1,
        1,
        vec![1.0],
        vec![act("identity"), act("relu")],
        vec![dv(&[1.0])],
    )
    .unwrap();
    let r = 0.13;
    let event = EventSpec::Halfspace {
        direction: dv(&[1.0]),
        threshold: r,
    };
    let pred = output_rate(&spec2, &[dv(&[r])], &gh(1, 64), &RateOptions::default()).unwrap();
    let want = ev_value(&pred.value);
    let source = ProbSource::Simulation {
        replicas,
        seed: 0xC5B2,
    };
    let fit = netsim::estimate_slope(&spec2, &event, &widths, &source).unwrap();
    let p400 = fit.rows.iter().find(|row| row.n == 400).unwrap().p_hat;
    if p400 < 1e-4 {
        fails.push(format!("relu leg: p_hat(400) = {p400:.2e} < 1e-4"));
    }
    let rel = (fit.rate - want).abs() / want;
    if rel > 0.15 {
        fails.push(format!(
            "relu leg r={r}: slope {:.6} vs variational {want:.6} off by {:.1}% > 15%",
            fit.rate,
            100.0 * rel
        ));
    }
    let _ = writeln!(
        artifact,
        "c5 relu r={} rate={} correction={} pred={} fitted={:?}",
        fmt_f(r),
        fmt_f(fit.rate),
        fmt_f(fit.correction),
        fmt_f(want),
        fit.fitted
    );
    for row in &fit.rows {
        let _ = writeln!(
            artifact,
            "c5 relu n={} hits={} p={} y={}",
            row.n,
            row.hits,
            fmt_f(row.p_hat),
            fmt_f(row.y)
        );
    }
    let _ = writeln!(artifact, "c5 relu rel_dev={}", fmt_f(rel));

    let detail = format!(
        "identity legs within 10% of r^2/2; relu leg slope {:.5} vs variational {:.5} ({:.1}% dev, tol 15%), p_hat(400) = {:.2e}",
        fit.rate,
        want,
        100.0 * rel,
        p400
    );
    finalize(fails, detail, artifact, t0, 1800.0)
}

// ---------------------------------------------------------------------------
// Criterion 6: chi-square moment lemma.
// ---------------------------------------------------------------------------
//
// The normalized moments (1/n) log E[(K_n/n)^(gamma n)] must be uniformly
// bounded over n; the variational limit (gamma + 1/2) log(1 + 2 gamma)
// - gamma is an explicit uniform bound (approached from below), checked
// with a small margin.  The Monte Carlo lemma diagnostic must stay below
// its analytic majorant everywhere on the grid.

fn run_c6() -> CritOut {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut artifact = String::new();

    for (gi, &gamma) in [0.5f64, 1.0, 2.0].iter().enumerate() {
        let ub = (gamma + 0.5) * (1.0 + 2.0 * gamma).ln() - gamma + 0.01;
        let mut sup = f64::NEG_INFINITY;
        let mut arg = 0u64;
        let mut h = FNV_SEED;
        for n in 1..=10_000u64 {
            let m = tightness::chi2_moment(n, gamma).unwrap();
            if !m.is_finite() {
                fails.push(format!("gamma={gamma} n={n}: moment not finite"));
                break;
            }
            h = fnv_u64(h, m.to_bits());
            if m > sup {
                sup = m;
                arg = n;
            }
        }
        if sup > ub {
            fails.push(format!(
                "gamma={gamma}: sup_n moment = {sup:.6} exceeds uniform bound {ub:.6}"
            ));
        }
        let _ = writeln!(
            artifact,
            "c6 gamma={} sup={} argmax_n={arg} hash={h:016x}",
            fmt_f(gamma),
            fmt_f(sup)
        );

        let mc = tightness::chi2_lemma_bound(gamma, &[1, 2, 5, 20, 100, 500], 200_000, 0xC6 + gi as u64)
            .unwrap();
        for p in &mc.points {
            if p.statistic > p.majorant + 3.0 * p.stderr {
                fails.push(format!(
                    "gamma={gamma} n={}: MC statistic {:.5} exceeds majorant {:.5} + 3 stderr {:.2e}",
                    p.n, p.statistic, p.majorant, p.stderr
                ));
            }
            let _ = writeln!(
                artifact,
                "c6 mc gamma={} n={} stat={} majorant={} stderr={}",
                fmt_f(gamma),
                p.n,
                fmt_f(p.statistic),
                fmt_f(p.majorant),
                fmt_f(p.stderr)
            );
        }
    }
    let detail = "moments uniformly bounded on n <= 1e4 for gamma in {0.5, 1, 2}; MC lemma diagnostic below majorant + 3 stderr".to_string();
    finalize(fails, detail, artifact, t0, 120.0)
}

// ---------------------------------------------------------------------------
// Criterion 7: PSD core properties.
// ---------------------------------------------------------------------------

fn run_c7() -> CritOut {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut artifact = String::new();

    // Square-root Hölder-1/2 bound on 10^4 random pairs.
    let mut s = rng::stream(0xC7, 0);
    let mut h = FNV_SEED;
    let mut worst_excess = f64::NEG_INFINITY;
    for i in 0..10_000usize {
        let k = 1 + (i % 5);
        let draw = |s: &mut rng::Stream| -> PsdMatrix {
            let theta: Vec<f64> = (0..theta_len(k)).map(|_| 2.6 * s.random::<f64>() - 1.3).collect();
            chol_param(k, &theta).unwrap()
        };
        let a = draw(&mut s);
        let b = draw(&mut s);
        let lhs = psd::sym_op_distance(a.sqrt().entries(), b.sqrt().entries());
        let rhs = psd::sym_op_distance(a.entries(), b.entries()).sqrt();
        worst_excess = worst_excess.max(lhs - rhs);
        h = fnv_u64(h, lhs.to_bits());
        h = fnv_u64(h, rhs.to_bits());
        if lhs > rhs + 1e-7 {
            fails.push(format!(
                "pair {i} (k={k}): ||sqrt a - sqrt b|| = {lhs:.6e} > sqrt ||a - b|| = {rhs:.6e}"
            ));
            if fails.len() > 5 {
                break;
            }
        }
    }
    let _ = writeln!(artifact, "c7 holder pairs=10000 hash={h:016x} worst_excess={}", fmt_f(worst_excess));

    // Quadratic form vs explicit inverse on strictly positive definite q.
    let mut s = rng::stream(0xC7, 1);
    let mut h = FNV_SEED;
    let mut max_rel: f64 = 0.0;
    for i in 0..2_000usize {
        let k = 1 + (i % 4);
        let mut theta: Vec<f64> = (0..theta_len(k)).map(|_| 2.0 * s.random::<f64>() - 1.0).collect();
        for d in 0..k {
            let idx = d * (d + 1) / 2 + d;
            theta[idx] = 0.4 + theta[idx].abs();
        }
        let q = chol_param(k, &theta).unwrap();
        let z = DVector::from_iterator(k, (0..k).map(|_| 4.0 * s.random::<f64>() - 2.0));
        let got = match extended_quadratic(&z, &q).unwrap() {
            ExtendedValue::Finite(v) => v,
            ExtendedValue::Infinite => {
                fails.push(format!("case {i}: finite form flagged infinite"));
                continue;
            }
        };
        let inv = q.entries().clone().try_inverse().unwrap();
        let explicit = (z.transpose() * inv * &z)[(0, 0)];
        let rel = (got - explicit).abs() / explicit.abs().max(1.0);
        max_rel = max_rel.max(rel);
        h = fnv_u64(h, got.to_bits());
        if rel > 1e-8 {
            fails.push(format!("case {i} (k={k}): relative gap {rel:.2e} > 1e-8"));
            if fails.len() > 5 {
                break;
            }
        }
    }
    let _ = writeln!(artifact, "c7 inverse cases=2000 hash={h:016x} max_rel={}", fmt_f(max_rel));

    // Image / infinity branching on constructed rank-deficient kernels.
    let branch = |z: &[f64], q: &PsdMatrix| -> &'static str {
        match extended_quadratic(&dv(z), q).unwrap() {
            ExtendedValue::Finite(_) => "finite",
            ExtendedValue::Infinite => "inf",
        }
    };
    let diag10 = PsdMatrix::from_matrix(&DMatrix::from_partial_diagonal(2, 2, &[1.0, 0.0])).unwrap();
    let ones = PsdMatrix::from_matrix(&DMatrix::from_element(2, 2, 1.0)).unwrap();
    let u = dv(&[1.0, 0.0, 1.0]);
    let w = dv(&[0.0, 1.0, 0.0]);
    let rank2 = PsdMatrix::from_matrix(&(&u * u.transpose() + &w * w.transpose())).unwrap();
    let cases: Vec<(&str, &'static str, &'static str)> = vec![
        ("diag(1,0) z=(0.8,0)", branch(&[0.8, 0.0], &diag10), "finite"),
        ("diag(1,0) z=(0.8,0.5)", branch(&[0.8, 0.5], &diag10), "inf"),
        ("diag(1,0) z=0", branch(&[0.0, 0.0], &diag10), "finite"),
        ("ones z=(1,1)", branch(&[1.0, 1.0], &ones), "finite"),
        ("ones z=(1,-1)", branch(&[1.0, -1.0], &ones), "inf"),
        ("rank2 z=u+w", branch(&[1.0, 1.0, 1.0], &rank2), "finite"),
        ("rank2 z perp", branch(&[1.0, 0.0, -1.0], &rank2), "inf"),
    ];
    for (name, got, want) in &cases {
        if got != want {
            fails.push(format!("branching: {name} gave {got}, expected {want}"));
        }
        let _ = writeln!(artifact, "c7 branch {name} -> {got}");
    }

    let detail = format!(
        "10^4 Hölder pairs ok (worst excess {worst_excess:.2e}), inverse agreement max rel {max_rel:.2e} (tol 1e-8), {} branching cases ok",
        cases.len()
    );
    finalize(fails, detail, artifact, t0, 30.0)
}

// ---------------------------------------------------------------------------
// Criterion 8: grid monotonicity of the rate profile.
// ---------------------------------------------------------------------------
//
// Restricting the output constraint to a sub-grid can only lower the
// variational cost, so the profile over nested grids must be
// nondecreasing.  Three scenarios with different depths and activations.

fn run_c8() -> CritOut {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut artifact = String::new();
    let opts = RateOptions {
        restarts: 3,
        outer_max_iters: 100,
        ..RateOptions::default()
    };

    struct Scenario {
        name: &'static str,
        spec: NetworkSpec,
        grids: Vec<Vec<DVector<f64>>>,
        z: Vec<DVector<f64>>,
    }
    let scenarios = vec![
        Scenario {
            name: "depth2-relu",
            spec: NetworkSpec::new(
                2,
                2,
                1,
                vec![1.0],
                vec![act("identity"), act("relu")],
                vec![dv(&[1.2, -0.4]), dv(&[0.3, 0.9])],
            )
            .unwrap(),
            grids: vec![
                vec![dv(&[1.2, -0.4])],
                vec![dv(&[1.2, -0.4]), dv(&[0.3, 0.9])],
            ],
            z: vec![dv(&[0.5, -0.2])],
        },
        Scenario {
            name: "depth2-tanh",
            spec: NetworkSpec::new(
                2,
                2,
                1,
                vec![1.0],
                vec![act("tanh"), act("tanh")],
                vec![dv(&[0.7, 0.2]), dv(&[-0.5, 1.0])],
            )
            .unwrap(),
            grids: vec![
                vec![dv(&[0.7, 0.2])],
                vec![dv(&[0.7, 0.2]), dv(&[-0.5, 1.0])],
            ],
            z: vec![dv(&[0.4, 0.3])],
        },
        Scenario {
            name: "depth3-mixed",
            spec: NetworkSpec::new(
                3,
                2,
                1,
                vec![1.0, 2.0],
                vec![act("identity"), act("relu"), act("tanh")],
                vec![dv(&[1.0, 0.0]), dv(&[0.5, 0.8])],
            )
            .unwrap(),
            grids: vec![
                vec![dv(&[1.0, 0.0])],
                vec![dv(&[1.0, 0.0]), dv(&[0.5, 0.8])],
            ],
            z: vec![dv(&[0.3, 0.2])],
        },
    ];

    for sc in &scenarios {
        let quad = gh(sc.grids.last().unwrap().len(), 64);
        let profile = grid_rate_profile(&sc.spec, &sc.grids, &sc.z, &quad, &opts).unwrap();
        let vals: Vec<f64> = profile.iter().map(|r| ev_value(&r.value)).collect();
        for i in 1..vals.len() {
            if !(vals[i - 1] <= vals[i] + 1e-7 * (1.0 + vals[i].abs())) {
                fails.push(format!(
                    "{}: profile decreases from {:.8} to {:.8}",
                    sc.name,
                    vals[i - 1],
                    vals[i]
                ));
            }
        }
        let joined: Vec<String> = vals.iter().map(|v| fmt_f(*v)).collect();
        let _ = writeln!(artifact, "c8 {} profile=[{}]", sc.name, joined.join(", "));
    }
    let detail = "rate profiles nondecreasing across nested grids in 3 scenarios".to_string();
    finalize(fails, detail, artifact, t0, 120.0)
}

// ---------------------------------------------------------------------------
// Cache + tests.
// ---------------------------------------------------------------------------

static C1: OnceLock<CritOut> = OnceLock::new();
static C2: OnceLock<CritOut> = OnceLock::new();
static C3: OnceLock<CritOut> = OnceLock::new();
static C4: OnceLock<CritOut> = OnceLock::new();
static C5: OnceLock<CritOut> = OnceLock::new();
static C6: OnceLock<CritOut> = OnceLock::new();
static C7: OnceLock<CritOut> = OnceLock::new();
static C8: OnceLock<CritOut> = OnceLock::new();

fn cached(slot: &'static OnceLock<CritOut>, run: fn() -> CritOut) -> &'static CritOut {
    slot.get_or_init(run)
}

#[test]
fn criterion_1_scalar_identity_oracle() {
    report(1, "scalar identity oracle", cached(&C1, run_c1));
}

#[test]
fn criterion_2_gaussian_output_oracle() {
    report(2, "gaussian output oracle", cached(&C2, run_c2));
}

#[test]
fn criterion_3_forward_map_zero() {
    report(3, "forward-map zero + arc-cosine", cached(&C3, run_c3));
}

#[test]
fn criterion_4_sampler_equality_in_law() {
    report(4, "sampler equality in law", cached(&C4, run_c4));
}

#[test]
fn criterion_5_empirical_ldp_slope() {
    report(5, "empirical LDP slope", cached(&C5, run_c5));
}

#[test]
fn criterion_6_chi2_moment_lemma() {
    report(6, "chi-square moment lemma", cached(&C6, run_c6));
}

#[test]
fn criterion_7_psd_core_properties() {
    report(7, "PSD core properties", cached(&C7, run_c7));
}

#[test]
fn criterion_8_grid_monotonicity() {
    report(8, "grid monotonicity", cached(&C8, run_c8));
}

#[test]
fn criterion_9_determinism() {
    let t0 = Instant::now();
    let reruns: [(usize, &'static OnceLock<CritOut>, fn() -> CritOut); 8] = [
        (1, &C1, run_c1),
        (2, &C2, run_c2),
        (3, &C3, run_c3),
        (4, &C4, run_c4),
        (5, &C5, run_c5),
        (6, &C6, run_c6),
        (7, &C7, run_c7),
        (8, &C8, run_c8),
    ];
    let mut fails = Vec::new();
    let mut total = 0usize;
    for (n, slot, run) in reruns {
        let first = cached(slot, run);
        let fresh = run();
        total += first.artifact.len();
        if first.artifact != fresh.artifact {
            // Find the first differing line for the report.
            let a: Vec<&str> = first.artifact.lines().collect();
            let b: Vec<&str> = fresh.artifact.lines().collect();
            let diff = a
                .iter()
                .zip(b.iter())
                .position(|(x, y)| x != y)
                .map(|i| format!("line {}: `{}` vs `{}`", i + 1, a[i], b[i]))
                .unwrap_or_else(|| format!("lengths {} vs {}", a.len(), b.len()));
            fails.push(format!("criterion {n} artifact differs on rerun ({diff})"));
        }
    }
    let detail = format!(
        "8 criteria rerun with identical configs, {total} artifact bytes compared"
    );
    let out = finalize(fails, detail, String::new(), t0, f64::INFINITY);
    report(9, "determinism", &out);
}
