//! Adaptive random-walk proposals.
//!
//! Jumps come from a two-component mixture: a fixed Gaussian with covariance
//! scaled by the theoretical 2.38/sqrt(k), and an adaptive Gaussian whose
//! covariance is the running estimate from the chain history and whose scale
//! follows a Robbins-Monro recursion targeting a 25% acceptance rate. The
//! adaptive component only switches on once 1000 proposed jumps have been
//! accepted, so its covariance estimate is non-singular.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Mixture weight of the fixed component once adaptation is enabled.
pub const FIXED_COMPONENT_WEIGHT: f64 = 0.1;
/// Target equilibrium acceptance rate.
pub const TARGET_ACCEPTANCE: f64 = 0.25;
/// Robbins-Monro decay exponent for the scale recursion.
pub const SCALE_DECAY: f64 = 0.6;
/// Robbins-Monro gain: a single acceptance at n = 1 scales the jump by
/// e^(0.75c) with c = 1.
pub const SCALE_GAIN: f64 = 1.0;
/// Acceptances required before the adaptive component may be used.
pub const ADAPTATION_THRESHOLD: u64 = 1000;
/// Ridge added to the running covariance before factorization.
const COVARIANCE_RIDGE: f64 = 1e-8;

/// Per-block proposal state for the adaptive random-walk Metropolis update.
#[derive(Debug, Clone)]
pub struct AdaptiveProposal {
    dim: usize,
    m0: f64,
    log_mn: f64,
    sigma0_l: DMatrix<f64>,
    running_mean: DVector<f64>,
    running_m2: DMatrix<f64>,
    history_len: u64,
    adaptive_l: Option<DMatrix<f64>>,
    chol_stale: bool,
    accepted: u64,
    iterations: u64,
}

impl AdaptiveProposal {
    /// `sigma0` is the fixed proposal covariance; it must be SPD.
    pub fn new(sigma0: DMatrix<f64>) -> Result<Self> {
        let dim = sigma0.nrows();
        if dim == 0 || sigma0.ncols() != dim {
            return Err(Error::DimensionMismatch {
                what: "proposal covariance",
                expected: dim,
                got: sigma0.ncols(),
            });
        }
        let chol = Cholesky::new(sigma0)
            .ok_or_else(|| Error::InvalidSpec("fixed proposal covariance is not SPD".into()))?;
        let m0 = 2.38 / (dim as f64).sqrt();
        Ok(Self {
            dim,
            m0,
            log_mn: m0.ln(),
            sigma0_l: chol.l(),
            running_mean: DVector::zeros(dim),
            running_m2: DMatrix::zeros(dim, dim),
            history_len: 0,
            adaptive_l: None,
            chol_stale: true,
            accepted: 0,
            iterations: 0,
        })
    }

    /// Diagonal fixed covariance.
    pub fn diagonal(dim: usize, variance: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * variance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fixed-component scale 2.38/sqrt(k).
    pub fn m0(&self) -> f64 {
        self.m0
    }

    /// Current adaptive-component scale.
    pub fn mn(&self) -> f64 {
        self.log_mn.exp()
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.accepted as f64 / self.iterations as f64
        }
    }

    /// The adaptive component is allowed only once enough jumps have been
    /// accepted and the running covariance is defined.
    pub fn adaptation_enabled(&self) -> bool {
        self.accepted >= ADAPTATION_THRESHOLD && self.history_len >= 2
    }

    /// Running covariance estimate of the chain history.
    pub fn sample_covariance(&self) -> Option<DMatrix<f64>> {
        (self.history_len >= 2).then(|| &self.running_m2 / (self.history_len - 1) as f64)
    }

    fn refresh_adaptive_chol(&mut self) {
        if !self.chol_stale {
            return;
        }
        self.adaptive_l = self.sample_covariance().and_then(|mut cov| {
            for i in 0..self.dim {
                cov[(i, i)] += COVARIANCE_RIDGE;
            }
            Cholesky::new(cov).map(|c| c.l())
        });
        self.chol_stale = false;
    }

    /// Draws a proposal around `current`. With probability 0.1 (or always,
    /// before adaptation is enabled) the fixed component is used.
    pub fn propose<R: Rng + ?Sized>(&mut self, current: &[f64], rng: &mut R) -> Vec<f64> {
        debug_assert_eq!(current.len(), self.dim);
        let use_fixed = if self.adaptation_enabled() {
            rng.random::<f64>() < FIXED_COMPONENT_WEIGHT
        } else {
            true
        };
        let (l, scale) = if use_fixed {
            (&self.sigma0_l, self.m0)
        } else {
            self.refresh_adaptive_chol();
            match &self.adaptive_l {
                Some(l) => (l, self.mn()),
                // Degenerate history; fall back to the fixed component.
                None => (&self.sigma0_l, self.m0),
            }
        };
        let z = DVector::from_iterator(
            self.dim,
            (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        let jump = l * z * scale;
        current.iter().zip(jump.iter()).map(|(c, j)| c + j).collect()
    }

    /// Records the accept/reject outcome and the post-decision chain value:
    /// Robbins-Monro step on log m_n, running covariance update, counters.
    pub fn update(&mut self, accepted: bool, value: &[f64]) {
        debug_assert_eq!(value.len(), self.dim);
        self.iterations += 1;
        let n = self.iterations as f64;
        let indicator = f64::from(accepted);
        self.log_mn += SCALE_GAIN * n.powf(-SCALE_DECAY) * (indicator - TARGET_ACCEPTANCE);
        if accepted {
            self.accepted += 1;
        }

        // Welford update of the running mean and scatter.
        self.history_len += 1;
        let v = DVector::from_column_slice(value);
        let delta = &v - &self.running_mean;
        self.running_mean += &delta / self.history_len as f64;
        let delta2 = &v - &self.running_mean;
        self.running_m2 += delta * delta2.transpose();
        self.chol_stale = true;
    }
}

/// The Metropolis decision for a symmetric proposal.
pub fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    if log_ratio >= 0.0 {
        return true;
    }
    rng.random::<f64>().ln() < log_ratio
}

/// One adaptive RWM step against an arbitrary log-target. `log_post` holds
/// the target value at `beta` and is kept in sync.
pub fn rwm_step<R: Rng + ?Sized>(
    beta: &mut Vec<f64>,
    log_post: &mut f64,
    proposal: &mut AdaptiveProposal,
    mut target: impl FnMut(&[f64]) -> f64,
    rng: &mut R,
) -> bool {
    let candidate = proposal.propose(beta, rng);
    let candidate_lp = target(&candidate);
    let accepted = candidate_lp > f64::NEG_INFINITY
        && metropolis_accept(candidate_lp - *log_post, rng);
    if accepted {
        *beta = candidate;
        *log_post = candidate_lp;
    }
    proposal.update(accepted, beta);
    accepted
}
