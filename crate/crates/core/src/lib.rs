//! Large-deviation rate functions for wide multilayer perceptrons.
//!
//! At LeCun initialization the pre-activations of a fully-connected network
//! concentrate around the deterministic NNGP kernel recursion as the hidden
//! widths grow.  This crate computes the *rate* of that concentration: the
//! exponential cost, at speed `n`, of observing an atypical post-activation
//! kernel or an atypical network output on a finite input set.
//!
//! The rate of a kernel deviation at one layer is the Legendre–Fenchel
//! transform of the conditional cumulant generating function
//!
//! ```text
//!     Lambda(lambda | q) = log E[ exp( tr( lambda  sigma(sqrt(q) N)^(x2) ) ) ],
//!     J(v | q)           = sup_lambda { tr(lambda v) - Lambda(lambda | q) },
//! ```
//!
//! where `N` is a standard Gaussian vector, `sqrt(q)` the symmetric PSD
//! square root, and `sigma` acts componentwise.  Layer rates compose by
//! infimal convolution along the kernel chain, and an output deviation adds
//! the Cameron–Martin cost `sum_i ||z_i||^2_q / 2` of reaching the output
//! values through the last kernel.  [`variational`] evaluates these nested
//! variational problems; [`gauss`] provides the Gaussian expectations;
//! [`psd`] the extended PSD matrix algebra; [`netsim`] samples finite-width
//! networks and fits empirical decay slopes against the predictions; and
//! [`tightness`] hosts the scalar diagnostics used to sanity-check the
//! exponential-tightness estimates behind the theory.
//!
//! All Monte Carlo paths draw from counter-based streams ([`rng`]) so every
//! result is reproducible bit-for-bit for a fixed seed, regardless of thread
//! count.

pub mod activation;
pub mod error;
pub mod gauss;
pub mod netsim;
pub mod network;
mod opt;
pub mod psd;
pub mod rng;
pub mod stats;
pub mod tightness;
pub mod variational;

pub use activation::Activation;
pub use error::{LdpError, Result};
pub use gauss::{LogMgfValue, QuadMethod, QuadratureSpec};
pub use netsim::{EventSpec, SimOutput, SlopeFit, WidthSchedule};
pub use network::NetworkSpec;
pub use psd::{ExtendedValue, PsdMatrix};
pub use variational::{RateOptions, RateResult};
