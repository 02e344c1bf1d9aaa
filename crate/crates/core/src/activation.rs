//! Activation registry with the metadata the rate machinery relies on.
//!
//! Every activation carries its exact Lipschitz constant, its value at
//! zero, and (when it has one) a uniform bound.  The combination
//! `lip_norm = |sigma(0)| + Lip(sigma)` controls the linear growth envelope
//! `|sigma(x)| <= lip_norm * (1 + |x|)`, which is what bounds Gaussian
//! moments of `sigma(sqrt(q) N)` and feeds the divergence pre-test of the
//! cumulant generating function.  Custom activations must declare these
//! constants; a sampled audit over `[-50, 50]` rejects declarations the
//! function visibly violates (sampling cannot prove them, only falsify).

use std::sync::Arc;

use crate::error::{LdpError, Result};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A componentwise activation together with its audit metadata.
#[derive(Clone)]
pub struct Activation {
    id: String,
    eval: ScalarFn,
    lip: f64,
    at_zero: f64,
    bound: Option<f64>,
}

impl std::fmt::Debug for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Activation")
            .field("id", &self.id)
            .field("lip", &self.lip)
            .field("at_zero", &self.at_zero)
            .field("bound", &self.bound)
            .finish()
    }
}

impl Activation {
    /// Looks up a built-in activation by name.
    ///
    /// Registry: `identity`, `relu`, `tanh`, `sigmoid`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Self {
                id: "identity".into(),
                eval: Arc::new(|x| x),
                lip: 1.0,
                at_zero: 0.0,
                bound: None,
            }),
            "relu" => Ok(Self {
                id: "relu".into(),
                eval: Arc::new(|x: f64| x.max(0.0)),
                lip: 1.0,
                at_zero: 0.0,
                bound: None,
            }),
            "tanh" => Ok(Self {
                id: "tanh".into(),
                eval: Arc::new(|x: f64| x.tanh()),
                lip: 1.0,
                at_zero: 0.0,
                bound: Some(1.0),
            }),
            "sigmoid" => Ok(Self {
                id: "sigmoid".into(),
                eval: Arc::new(|x: f64| 1.0 / (1.0 + (-x).exp())),
                lip: 0.25,
                at_zero: 0.5,
                bound: Some(1.0),
            }),
            other => Err(LdpError::UnknownActivation(other.into())),
        }
    }

    /// Names of all built-in activations.
    pub fn builtin_names() -> &'static [&'static str] {
        &["identity", "relu", "tanh", "sigmoid"]
    }

    /// Registers a custom activation with declared constants.
    ///
    /// `lip` must be the (finite, positive) Lipschitz constant, `at_zero`
    /// the exact value at the origin, and `bound` a uniform bound on
    /// `|sigma|` if one exists.  The declaration is audited on a sampled
    /// grid over `[-50, 50]`; violations beyond a small slack are rejected.
    pub fn custom(
        id: &str,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lip: f64,
        at_zero: f64,
        bound: Option<f64>,
    ) -> Result<Self> {
        if !(lip.is_finite() && lip > 0.0) {
            return Err(LdpError::InvalidArgument(
                "Lipschitz constant must be finite and positive".into(),
            ));
        }
        if !at_zero.is_finite() {
            return Err(LdpError::InvalidArgument(
                "value at zero must be finite".into(),
            ));
        }
        if let Some(b) = bound {
            if !(b.is_finite() && b >= 0.0) {
                return Err(LdpError::InvalidArgument(
                    "uniform bound must be finite and nonnegative".into(),
                ));
            }
        }
        let act = Self {
            id: id.into(),
            eval: Arc::new(f),
            lip,
            at_zero,
            bound,
        };
        act.audit()?;
        Ok(act)
    }

    /// Sampled audit of the declared constants over `[-50, 50]`.
    fn audit(&self) -> Result<()> {
        const GRID: usize = 2001;
        const SLACK: f64 = 1e-9;
        let lo = -50.0;
        let hi = 50.0;
        let step = (hi - lo) / (GRID as f64 - 1.0);
        let xs: Vec<f64> = (0..GRID).map(|i| lo + step * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| (self.eval)(x)).collect();
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(LdpError::ActivationAudit(format!(
                "`{}` is non-finite on the audit grid",
                self.id
            )));
        }
        let z = (self.eval)(0.0);
        if (z - self.at_zero).abs() > SLACK {
            return Err(LdpError::ActivationAudit(format!(
                "`{}` declares sigma(0) = {} but evaluates to {z}",
                self.id, self.at_zero
            )));
        }
        // Lipschitz on consecutive grid pairs plus a deterministic set of
        // wide-stride pairs (stride mixes short and long increments).
        for stride in [1usize, 7, 113, 997] {
            for i in stride..GRID {
                let dx = xs[i] - xs[i - stride];
                if (ys[i] - ys[i - stride]).abs() > self.lip * dx + SLACK {
                    return Err(LdpError::ActivationAudit(format!(
                        "`{}` violates declared Lipschitz constant {} near x = {}",
                        self.id, self.lip, xs[i]
                    )));
                }
            }
        }
        if let Some(b) = self.bound {
            if let Some(&bad) = ys.iter().find(|&&y| y.abs() > b + SLACK) {
                return Err(LdpError::ActivationAudit(format!(
                    "`{}` exceeds declared bound {b}: reaches {bad}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    /// Exact Lipschitz constant.
    pub fn lip(&self) -> f64 {
        self.lip
    }

    /// Value at the origin.
    pub fn at_zero(&self) -> f64 {
        self.at_zero
    }

    /// Uniform bound on `|sigma|`, when the activation has one.
    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    /// Growth envelope constant `|sigma(0)| + Lip(sigma)`, so that
    /// `|sigma(x)| <= lip_norm() * (1 + |x|)` for all real `x`.
    pub fn lip_norm(&self) -> f64 {
        self.at_zero.abs() + self.lip
    }
}
