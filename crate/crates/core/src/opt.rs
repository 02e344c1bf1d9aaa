//! Internal limited-memory quasi-Newton minimizer.
//!
//! Both variational loops reduce to smooth unconstrained minimization with
//! one twist: the objective can be `+inf` off its effective domain (a
//! divergent cumulant generating function, an unbounded inner transform).
//! The line search therefore backtracks through non-finite trial values
//! and never accepts them, which confines the iterates to the finite
//! region reached from the starting point.
//!
//! The objective closure receives a `need_grad` flag so that line-search
//! probes do not pay for gradients (the outer chain objective differences
//! an inner optimization per coordinate; skipping those during
//! backtracking matters).

/// Objective: `(value, gradient if requested and finite)`.
///
/// Infeasible points return `(f64::INFINITY, None)`; the gradient may also
/// be `None` when `need_grad` is `false`.
pub(crate) type Objective<'a> = &'a mut dyn FnMut(&[f64], bool) -> (f64, Option<Vec<f64>>);

#[derive(Clone, Debug)]
pub(crate) struct LbfgsOptions {
    pub max_iters: usize,
    /// Stop when the gradient Euclidean norm drops to this.
    pub grad_tol: f64,
    /// History pairs kept for the two-loop recursion.
    pub history: usize,
    /// Abort (flagged) when the iterate norm exceeds this; `inf` disables.
    pub x_norm_cap: f64,
    /// Stop when the objective decrease over the trailing window falls
    /// below this relative threshold (ill-conditioned objectives can
    /// otherwise grind out negligible descent until `max_iters`); `0`
    /// disables the check.
    pub stall_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 200,
            grad_tol: 1e-8,
            history: 8,
            x_norm_cap: f64::INFINITY,
            stall_tol: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iters: usize,
    /// Gradient tolerance met.
    pub converged: bool,
    /// Iterate norm cap exceeded (objective unbounded along the run).
    pub hit_norm_cap: bool,
    /// Objective decrease over the trailing window of accepted steps;
    /// distinguishes a plateau from a still-descending cap-out.
    pub recent_progress: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `obj` from `x0`.  `obj(x0)` must be finite.
pub(crate) fn lbfgs_minimize(obj: Objective, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsOutcome {
    let mut x = x0;
    let (mut f, g0) = obj(&x, true);
    assert!(f.is_finite(), "optimizer started at an infeasible point");
    let mut g = g0.expect("gradient required at a finite point");
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut f_window: Vec<f64> = vec![f];
    let mut hit_norm_cap = false;
    let mut iters = 0;
    // Length of the last accepted step, seeding the first trial of
    // steepest-descent iterations (stiff objectives reject unit steps for
    // dozens of trials otherwise).
    let mut len_prev = 1.0f64;
    // Feasibility-informed cap on the first trial step.  When the iterate
    // hugs an infeasible boundary every unit trial lands outside and the
    // search pays a long contraction cascade per iteration; remembering the
    // scale that finally worked amortizes that discovery across iterations,
    // while geometric recovery keeps the cap from pinning steps forever.
    let mut t_cap = 1.0f64;

    while iters < opts.max_iters {
        let gnorm = norm(&g);
        if gnorm <= opts.grad_tol {
            break;
        }
        // Two-loop recursion for the search direction d = -H g.
        let mut steepest = s_hist.is_empty();
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        if !s_hist.is_empty() {
            let m = s_hist.len();
            let mut alpha = vec![0.0; m];
            for i in (0..m).rev() {
                alpha[i] = rho_hist[i] * dot(&s_hist[i], &d);
                for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                    *dj -= alpha[i] * yj;
                }
            }
            let last = m - 1;
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            for dj in d.iter_mut() {
                *dj *= gamma;
            }
            for i in 0..m {
                let beta = rho_hist[i] * dot(&y_hist[i], &d);
                for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                    *dj += (alpha[i] - beta) * sj;
                }
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // Model broke down; fall back to steepest descent.
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            steepest = true;
        }

        // Armijo search that skips infeasible trials.  A raw steepest-descent
        // direction has length `gnorm`, which on stiff objectives is orders
        // of magnitude beyond any sane step, so its first trial is capped by
        // the last accepted step length (with room to grow); scaled
        // quasi-Newton directions keep `t = 1`.  Finite rejections contract
        // by quadratic interpolation rather than plain halving.
        const C1: f64 = 1e-4;
        let dnorm = norm(&d);
        let t_init = if steepest {
            (4.0 * len_prev / dnorm).min(1.0 / gnorm).min(t_cap).min(1.0)
        } else {
            t_cap.min(1.0)
        };
        let mut t = t_init;
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let (ft, _) = obj(&xt, false);
            if ft.is_finite() && ft <= f + C1 * t * slope {
                accepted = Some((xt, ft));
                break;
            }
            t = if ft.is_finite() {
                // Minimizer of the quadratic through f, slope, and (t, ft),
                // kept inside [t/10, t/2] so a wild model cannot stall the
                // contraction or collapse it to zero.
                let denom = 2.0 * (ft - f - slope * t);
                let tq = if denom > 0.0 { -slope * t * t / denom } else { 0.0 };
                tq.clamp(0.1 * t, 0.5 * t)
            } else {
                // Infeasible: no model to interpolate; cross the orders of
                // magnitude back to feasibility quickly.
                0.1 * t
            };
        }
        let Some((mut x_new, mut f_probe)) = accepted else {
            break; // No acceptable step; stationary for our purposes.
        };
        if t == t_init {
            // The unit step was not even a stretch, so the quasi-Newton
            // scale is stale (common after curvature pairs are rejected on
            // a nonconvex stretch, and permanent on affine objectives where
            // y = 0). Grow the step geometrically while it keeps earning
            // its Armijo decrease and improving; this restores progress on
            // long flat valleys and lets unbounded descent reach the norm
            // cap instead of inching toward it.
            for _ in 0..40 {
                let t2 = 2.0 * t;
                let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t2 * di).collect();
                let (ft, _) = obj(&xt, false);
                if ft.is_finite() && ft <= f + C1 * t2 * slope && ft < f_probe {
                    t = t2;
                    x_new = xt;
                    f_probe = ft;
                } else {
                    break;
                }
            }
        }
        len_prev = t * dnorm;
        t_cap = if t < 0.25 * t_init {
            (8.0 * t).min(1.0)
        } else {
            (4.0 * t_cap).min(1.0)
        };
        let (f_new, g_new) = obj(&x_new, true);
        // f was probed without a gradient; objectives must reproduce the
        // value on re-evaluation at the same point (stateful objectives
        // may only mutate themselves on `need_grad` calls, which happen
        // exactly at accepted points).  Keep the graded value.
        debug_assert!(
            (f_new - f_probe).abs() <= 1e-9 * f_probe.abs().max(1.0),
            "re-evaluation drifted: {f_probe} -> {f_new}"
        );
        let g_new = g_new.expect("gradient required at accepted point");

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
            if s_hist.len() > opts.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
        }
        x = x_new;
        f = f_new;
        g = g_new;
        iters += 1;
        f_window.push(f);
        if f_window.len() > 6 {
            f_window.remove(0);
        }
        if norm(&x) > opts.x_norm_cap {
            hit_norm_cap = true;
            break;
        }
        if opts.stall_tol > 0.0
            && f_window.len() == 6
            && f_window[0] - f <= opts.stall_tol * f.abs().max(1.0)
        {
            break;
        }
    }

    let grad_norm = norm(&g);
    let recent_progress = (f_window[0] - f).max(0.0);
    LbfgsOutcome {
        converged: grad_norm <= opts.grad_tol,
        x,
        f,
        grad_norm,
        iters,
        hit_norm_cap,
        recent_progress,
    }
}

/// Central finite-difference gradient with relative step `h_rel`, falling
/// back to one-sided differences at domain boundaries.
pub(crate) fn fd_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    fx: f64,
    h_rel: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xt = x.to_vec();
    for i in 0..x.len() {
        let h = h_rel * x[i].abs().max(1.0);
        xt[i] = x[i] + h;
        let fp = f(&xt);
        xt[i] = x[i] - h;
        let fm = f(&xt);
        xt[i] = x[i];
        g[i] = if fp.is_finite() && fm.is_finite() {
            (fp - fm) / (2.0 * h)
        } else if fp.is_finite() {
            (fp - fx) / h
        } else if fm.is_finite() {
            (fx - fm) / h
        } else {
            0.0
        };
    }
    g
}
