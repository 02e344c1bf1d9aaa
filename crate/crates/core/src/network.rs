//! Architecture description of a fully-connected network on a finite
//! input set.
//!
//! The network is `f^(l) = W^(l) sigma^(l)(f^(l-1))` for `l = 1..L`, with
//! `sigma^(1)` applied directly to the inputs, LeCun-scaled weights
//! (`Var = 1 / fan_in`), and no biases.  Hidden widths grow proportionally
//! to a single scale `n`: layer `l` has width `beta^(l) n` with speed
//! ratio `beta^(l) > 0`, possibly `+inf` (a layer that outpaces the common
//! scale and therefore concentrates; its kernel deviation is forbidden at
//! this speed).
//!
//! Kernel indexing: `v^(l)` is the empirical second-moment matrix of the
//! *post-activation* of `f^(l)` across the layer's units, so `v^(l)` is
//! built with `sigma^(l+1)` (zero-based: `post_activation(l)`), and
//! `v^(0)` is the deterministic Gram matrix of `sigma^(1)(x)` over the
//! input set, scaled by `1 / d_in`.

use nalgebra::DVector;

use crate::activation::Activation;
use crate::error::{LdpError, Result};

/// A validated architecture plus the finite input set it is probed on.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    depth: usize,
    d_in: usize,
    d_out: usize,
    width_ratios: Vec<f64>,
    activations: Vec<Activation>,
    inputs: Vec<DVector<f64>>,
}

impl NetworkSpec {
    /// Builds and validates a spec.
    ///
    /// * `depth >= 1` layers of weights;
    /// * `width_ratios` has one entry per hidden layer (`depth - 1`), each
    ///   in `(0, +inf]`;
    /// * `activations` has one entry per layer (`sigma^(1) .. sigma^(L)`);
    /// * `inputs` is nonempty, with pairwise-distinct points in `R^{d_in}`.
    pub fn new(
        depth: usize,
        d_in: usize,
        d_out: usize,
        width_ratios: Vec<f64>,
        activations: Vec<Activation>,
        inputs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(LdpError::InvalidArgument("depth must be >= 1".into()));
        }
        if d_in == 0 || d_out == 0 {
            return Err(LdpError::InvalidArgument(
                "input and output dimensions must be >= 1".into(),
            ));
        }
        if width_ratios.len() != depth - 1 {
            return Err(LdpError::InvalidArgument(format!(
                "width_ratios must have {} entries for depth {depth}, got {}",
                depth - 1,
                width_ratios.len()
            )));
        }
        for (i, &b) in width_ratios.iter().enumerate() {
            if b.is_nan() || b <= 0.0 {
                return Err(LdpError::InvalidArgument(format!(
                    "width_ratios[{i}] must be positive (or +inf), got {b}"
                )));
            }
        }
        if activations.len() != depth {
            return Err(LdpError::InvalidArgument(format!(
                "activations must have {depth} entries for depth {depth}, got {}",
                activations.len()
            )));
        }
        if inputs.is_empty() {
            return Err(LdpError::InvalidArgument(
                "input set must be nonempty".into(),
            ));
        }
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != d_in {
                return Err(LdpError::DimensionMismatch(format!(
                    "inputs[{i}] has dimension {}, expected {d_in}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(LdpError::InvalidArgument(format!(
                    "inputs[{i}] has non-finite entries"
                )));
            }
        }
        for i in 0..inputs.len() {
            for j in 0..i {
                if inputs[i] == inputs[j] {
                    return Err(LdpError::InvalidArgument(format!(
                        "inputs[{j}] and inputs[{i}] coincide; input points must be distinct"
                    )));
                }
            }
        }
        Ok(Self {
            depth,
            d_in,
            d_out,
            width_ratios,
            activations,
            inputs,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// Number of probe inputs (the kernel dimension `k`).
    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    /// Speed ratio `beta^(l)` of hidden layer `l` (1-based, `1..depth-1`).
    pub fn width_ratio(&self, l: usize) -> f64 {
        self.width_ratios[l - 1]
    }

    pub fn width_ratios(&self) -> &[f64] {
        &self.width_ratios
    }

    /// Activation `sigma^(l)` (1-based, `1..depth`).
    pub fn activation(&self, l: usize) -> &Activation {
        &self.activations[l - 1]
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// The activation that builds kernel `v^(level)` from the layer below:
    /// `sigma^(level+1)` in 1-based layer numbering.  Valid for
    /// `level = 0..depth-1`.
    pub fn post_activation(&self, level: usize) -> &Activation {
        &self.activations[level]
    }
}
