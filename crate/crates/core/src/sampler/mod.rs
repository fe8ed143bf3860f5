//! The adaptive Metropolis-within-Gibbs sampler.
//!
//! One sweep cycles through the diseases in registry order. For each disease
//! it (i) performs an adaptive random-walk Metropolis update of that
//! disease's coefficient block against the forward-recursion likelihood
//! (marginal over the disease's own hidden states, conditional on every
//! other disease's current states), (ii) redraws the disease's hidden paths
//! for every vole by backward sampling under the accepted coefficients, and
//! (iii) redraws the initial distribution from its Dirichlet conjugate
//! posterior given the voles' initial states. Later blocks in the same sweep
//! see the freshest states of earlier blocks.
//!
//! Reproducibility: every chain derives its randomness from the master seed
//! and its chain index; the per-vole backward-sampling draws use dedicated
//! substreams keyed by (chain, iteration, disease, vole), so results are
//! identical whatever the thread count or execution order.

pub mod proposal;
pub mod trace;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha12Rng, ChaCha8Rng};
use rayon::prelude::*;

use crate::data::VolePanel;
use crate::design::{fill_step_from_dots, ModelSpec};
use crate::disease::DiseaseSpec;
use crate::error::{Error, Result};
use crate::hmm::{backward_sample_into, forward_into, smoothed_into, ObservationSymbol};
use crate::priors::{sample_dirichlet, sample_initial_distribution, DirichletPrior, GaussianPrior};

pub use proposal::{metropolis_accept, rwm_step, AdaptiveProposal};
pub use trace::{read_trace, trace_param_names, ChainManifest, ChainTrace, Manifest};

const STREAM_FFBS: u64 = 0x11;
const STREAM_CHAIN: u64 = 0x12;
const STREAM_PILOT: u64 = 0x13;

/// Default proposal variance for coefficients without a pilot estimate.
pub const DEFAULT_PROPOSAL_VARIANCE: f64 = 0.01;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a master seed and a stream label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(mix64(seed) ^ mix64(label))
}

/// Deterministic RNG substream keyed by up to three coordinates. Used for
/// per-vole draws so they do not depend on scheduling; a substream is
/// created per (iteration, disease, vole), so the light ChaCha8 variant
/// keeps key setup off the profile.
pub fn substream(seed: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut h = mix64(seed);
    h = mix64(h ^ mix64(a));
    h = mix64(h ^ mix64(b));
    h = mix64(h ^ mix64(c));
    ChaCha8Rng::seed_from_u64(h)
}

/// How each chain's coefficient blocks are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Independent draws from the prior: overdispersed starts.
    PriorDraw,
    /// Prior means (zero under the vague regime).
    Mean,
}

/// MCMC run controls.
#[derive(Debug, Clone)]
pub struct McmcControls {
    pub chains: usize,
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub seed: u64,
    pub pilot: bool,
    pub pilot_iterations: u64,
    pub init: InitStrategy,
    /// 0 means one worker per available core.
    pub threads: usize,
}

impl Default for McmcControls {
    fn default() -> Self {
        Self {
            chains: 3,
            iterations: 350_000,
            burn_in: 150_000,
            thin: 10,
            seed: 1,
            pilot: false,
            pilot_iterations: 2000,
            init: InitStrategy::PriorDraw,
            threads: 0,
        }
    }
}

impl McmcControls {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("need at least one chain".into()));
        }
        if self.iterations <= self.burn_in {
            return Err(Error::Config("iterations must exceed burn-in".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least one".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> u64 {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Panels bound to a model: flat observation arrays and per-step
/// deterministic design rows, indexed per vole.
#[derive(Debug, Clone)]
pub struct FitData {
    n_voles: usize,
    t_len: Vec<usize>,
    obs_offset: Vec<usize>,
    step_offset: Vec<usize>,
    total_rows: usize,
    total_steps: usize,
    /// [disease][flat time row]
    obs: Vec<Vec<ObservationSymbol>>,
    /// [disease][flat step row * det_dim]
    det: Vec<Vec<f64>>,
    /// Step row -> the time row whose covariates (and states) drive it.
    step_obs_row: Vec<usize>,
}

impl FitData {
    pub fn new(model: &ModelSpec, panels: &[VolePanel]) -> Result<Self> {
        if panels.is_empty() {
            return Err(Error::Config("no panels to fit".into()));
        }
        let n_voles = panels.len();
        let d_count = model.n_diseases();
        let mut t_len = Vec::with_capacity(n_voles);
        let mut obs_offset = Vec::with_capacity(n_voles + 1);
        let mut step_offset = Vec::with_capacity(n_voles + 1);
        let mut total_rows = 0usize;
        let mut total_steps = 0usize;
        for p in panels {
            if p.observations.len() != d_count {
                return Err(Error::DimensionMismatch {
                    what: "panel disease columns",
                    expected: d_count,
                    got: p.observations.len(),
                });
            }
            obs_offset.push(total_rows);
            step_offset.push(total_steps);
            t_len.push(p.len());
            total_rows += p.len();
            total_steps += p.len() - 1;
        }
        obs_offset.push(total_rows);
        step_offset.push(total_steps);

        let mut step_obs_row = Vec::with_capacity(total_steps);
        for (v, p) in panels.iter().enumerate() {
            for t in 0..p.len() - 1 {
                step_obs_row.push(obs_offset[v] + t);
            }
        }

        let mut obs = vec![Vec::with_capacity(total_rows); d_count];
        for p in panels {
            for (d, seq) in p.observations.iter().enumerate() {
                obs[d].extend_from_slice(seq);
            }
        }

        let mut det = Vec::with_capacity(d_count);
        for d in 0..d_count {
            let det_dim = model.layout(d).det_dim();
            let mut rows = Vec::with_capacity(total_steps * det_dim);
            for p in panels {
                for t in 0..p.len() - 1 {
                    for col in model.columns(d) {
                        rows.push(col.value(&p.covariates[t])?);
                    }
                }
            }
            det.push(rows);
        }

        Ok(Self {
            n_voles,
            t_len,
            obs_offset,
            step_offset,
            total_rows,
            total_steps,
            obs,
            det,
            step_obs_row,
        })
    }

    pub fn n_voles(&self) -> usize {
        self.n_voles
    }

    pub fn panel_len(&self, vole: usize) -> usize {
        self.t_len[vole]
    }

    pub fn obs_range(&self, vole: usize) -> std::ops::Range<usize> {
        self.obs_offset[vole]..self.obs_offset[vole + 1]
    }

    pub fn step_range(&self, vole: usize) -> std::ops::Range<usize> {
        self.step_offset[vole]..self.step_offset[vole + 1]
    }

    /// Swaps in new observations over the same panel skeletons (same grids,
    /// covariates and capture pattern). Used by joint-distribution checks
    /// that re-simulate data for fixed subjects.
    pub fn replace_observations(&mut self, panels: &[VolePanel]) -> Result<()> {
        if panels.len() != self.n_voles {
            return Err(Error::DimensionMismatch {
                what: "panels",
                expected: self.n_voles,
                got: panels.len(),
            });
        }
        for (v, p) in panels.iter().enumerate() {
            if p.len() != self.t_len[v] {
                return Err(Error::DimensionMismatch {
                    what: "panel length",
                    expected: self.t_len[v],
                    got: p.len(),
                });
            }
            let range = self.obs_range(v);
            for (d, seq) in p.observations.iter().enumerate() {
                self.obs[d][range.clone()].copy_from_slice(seq);
            }
        }
        Ok(())
    }

    pub fn observations(&self, d: usize) -> &[ObservationSymbol] {
        &self.obs[d]
    }
}

/// Current Gibbs state: coefficient blocks, initial distributions and one
/// flat hidden path per disease (per-vole slices via `FitData` offsets).
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub beta: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
    pub paths: Vec<Vec<usize>>,
    pub iteration: u64,
}

/// Scratch buffers for one disease block; two slots hold the current and
/// proposed evaluations so the accepted one can be reused for backward
/// sampling without recomputation.
#[derive(Debug, Clone)]
pub struct BlockWorkspace {
    group_dots: Vec<f64>,
    trans: [Vec<f64>; 2],
    filtered: [Vec<f64>; 2],
    current_slot: usize,
}

/// Per-sweep outcome flags, one entry per disease block.
#[derive(Debug, Clone)]
pub struct SweepFlags {
    pub accepted: Vec<bool>,
    pub infinite_proposal: Vec<bool>,
}

/// Read-only view of one disease's freshly evaluated block, handed to sweep
/// observers after the hidden-path redraw.
pub struct BlockView<'a> {
    pub d: usize,
    pub spec: &'a DiseaseSpec,
    data: &'a FitData,
    obs: &'a [ObservationSymbol],
    filtered: &'a [f64],
    trans: &'a [f64],
}

impl BlockView<'_> {
    /// Smoothed P(X_t = state | observed panel) for one vole, written as
    /// T x S rows into `out`.
    pub fn smoothed_marginals(&self, vole: usize, out: &mut Vec<f64>) -> Result<()> {
        let s = self.spec.n_states();
        let obs_range = self.data.obs_range(vole);
        let step_range = self.data.step_range(vole);
        out.clear();
        out.resize(self.data.panel_len(vole) * s, 0.0);
        smoothed_into(
            self.spec,
            &self.obs[obs_range.clone()],
            &self.filtered[obs_range.start * s..obs_range.end * s],
            &self.trans[step_range.start * s * s..step_range.end * s * s],
            out,
        )
    }

    /// Posterior probability that an observation at (vole, t) would read
    /// positive, given the rest of the panel and the current block state.
    pub fn positive_probability(&self, vole: usize, scratch: &mut Vec<f64>) -> Result<Vec<f64>> {
        self.smoothed_marginals(vole, scratch)?;
        let s = self.spec.n_states();
        let emit = self.spec.emission(ObservationSymbol::Positive);
        Ok(scratch
            .chunks_exact(s)
            .map(|row| row.iter().zip(emit).map(|(p, e)| p * e).sum())
            .collect())
    }
}

/// Hook invoked after each disease block inside a sweep.
pub trait SweepObserver {
    fn after_block(&mut self, iteration: u64, view: &BlockView<'_>, state: &GibbsState);
}

/// No-op observer.
pub struct NoObserver;

impl SweepObserver for NoObserver {
    fn after_block(&mut self, _: u64, _: &BlockView<'_>, _: &GibbsState) {}
}

/// The model, data and priors bound together with the sweep machinery.
pub struct Fitter<'a> {
    model: &'a ModelSpec,
    data: FitData,
    gaussians: &'a [GaussianPrior],
    dirichlets: &'a [DirichletPrior],
}

impl<'a> Fitter<'a> {
    pub fn new(
        model: &'a ModelSpec,
        panels: &[VolePanel],
        gaussians: &'a [GaussianPrior],
        dirichlets: &'a [DirichletPrior],
    ) -> Result<Self> {
        let data = FitData::new(model, panels)?;
        if gaussians.len() != model.n_diseases() || dirichlets.len() != model.n_diseases() {
            return Err(Error::DimensionMismatch {
                what: "prior blocks",
                expected: model.n_diseases(),
                got: gaussians.len(),
            });
        }
        for (d, g) in gaussians.iter().enumerate() {
            if g.dim() != model.layout(d).len() {
                return Err(Error::DimensionMismatch {
                    what: "gaussian prior dimension",
                    expected: model.layout(d).len(),
                    got: g.dim(),
                });
            }
        }
        Ok(Self {
            model,
            data,
            gaussians,
            dirichlets,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        self.model
    }

    pub fn data(&self) -> &FitData {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut FitData {
        &mut self.data
    }

    pub fn workspaces(&self) -> Vec<BlockWorkspace> {
        (0..self.model.n_diseases())
            .map(|d| {
                let s = self.model.diseases()[d].n_states();
                let g = self.model.diseases()[d].n_groups();
                BlockWorkspace {
                    group_dots: vec![0.0; self.data.total_steps * g],
                    trans: [
                        vec![0.0; self.data.total_steps * s * s],
                        vec![0.0; self.data.total_steps * s * s],
                    ],
                    filtered: [
                        vec![0.0; self.data.total_rows * s],
                        vec![0.0; self.data.total_rows * s],
                    ],
                    current_slot: 0,
                }
            })
            .collect()
    }

    /// Default fixed proposal covariances when no pilot run is requested.
    pub fn default_sigma0(&self) -> Vec<DMatrix<f64>> {
        (0..self.model.n_diseases())
            .map(|d| {
                DMatrix::identity(self.model.layout(d).len(), self.model.layout(d).len())
                    * DEFAULT_PROPOSAL_VARIANCE
            })
            .collect()
    }

    /// Evaluates one block's matrices, forwards and log posterior into a
    /// workspace slot. Returns minus infinity for statistically impossible
    /// proposals.
    fn eval_block(
        &self,
        d: usize,
        beta: &[f64],
        pi_d: &[f64],
        paths: &[Vec<usize>],
        ws: &mut BlockWorkspace,
        slot: usize,
    ) -> f64 {
        let spec = &self.model.diseases()[d];
        let layout = self.model.layout(d);
        let s = spec.n_states();
        let n_groups = spec.n_groups();
        let det_dim = layout.det_dim();
        let det = &self.data.det[d];
        let dots = &mut ws.group_dots;

        // Per-group linear predictors: deterministic design dot products,
        // then sparse adds for the other diseases' state indicators.
        for row in 0..self.data.total_steps {
            let x = &det[row * det_dim..(row + 1) * det_dim];
            for g in 0..n_groups {
                let base = layout.slope_index(g, 0);
                let slope = &beta[base..base + det_dim];
                let mut acc = 0.0;
                for c in 0..det_dim {
                    acc += x[c] * slope[c];
                }
                dots[row * n_groups + g] = acc;
            }
        }
        for e in 0..self.model.n_diseases() {
            if e == d {
                continue;
            }
            let offset = self.model.indicator_offset(d, e);
            let path = &paths[e];
            for row in 0..self.data.total_steps {
                let state = path[self.data.step_obs_row[row]];
                if state > 0 {
                    let col = offset + state - 1;
                    for g in 0..n_groups {
                        dots[row * n_groups + g] += beta[layout.slope_index(g, col)];
                    }
                }
            }
        }

        let trans = &mut ws.trans[slot];
        for row in 0..self.data.total_steps {
            fill_step_from_dots(
                spec,
                beta,
                &dots[row * n_groups..(row + 1) * n_groups],
                &mut trans[row * s * s..(row + 1) * s * s],
            );
        }

        let mut total = match self.gaussians[d].log_density(beta) {
            Ok(lp) => lp,
            Err(_) => return f64::NEG_INFINITY,
        };
        let filtered = &mut ws.filtered[slot];
        let obs = &self.data.obs[d];
        for v in 0..self.data.n_voles {
            let t_len = self.data.t_len[v];
            let or = self.data.obs_offset[v];
            let sr = self.data.step_offset[v];
            match forward_into(
                spec,
                &obs[or..or + t_len],
                pi_d,
                &trans[sr * s * s..(sr + t_len - 1) * s * s],
                &mut filtered[or * s..(or + t_len) * s],
            ) {
                Ok(stats) => total += stats.log_likelihood,
                Err(_) => return f64::NEG_INFINITY,
            }
        }
        total
    }

    /// Sum over voles of the forward log-likelihood for one disease plus its
    /// Gaussian log-prior, conditional on the other diseases' hidden paths.
    /// Statistical impossibilities come back as minus infinity.
    pub fn block_log_posterior(
        &self,
        d: usize,
        beta: &[f64],
        paths: &[Vec<usize>],
        pi_d: &[f64],
    ) -> f64 {
        let mut ws = self.single_workspace(d);
        self.eval_block(d, beta, pi_d, paths, &mut ws, 0)
    }

    fn single_workspace(&self, d: usize) -> BlockWorkspace {
        let s = self.model.diseases()[d].n_states();
        let g = self.model.diseases()[d].n_groups();
        BlockWorkspace {
            group_dots: vec![0.0; self.data.total_steps * g],
            trans: [vec![0.0; self.data.total_steps * s * s], Vec::new()],
            filtered: [vec![0.0; self.data.total_rows * s], Vec::new()],
            current_slot: 0,
        }
    }

    /// Draws an initial state: coefficients from the prior (or its mean),
    /// initial distributions from their priors, and hidden paths by backward
    /// sampling disease by disease (earlier diseases' fresh paths feed later
    /// ones; uninitialized diseases count as baseline).
    pub fn init_state<R: Rng + ?Sized>(
        &self,
        init: InitStrategy,
        rng: &mut R,
    ) -> Result<GibbsState> {
        let d_count = self.model.n_diseases();
        // Vague priors can draw coefficients extreme enough to underflow a
        // constrained panel to zero mass; retry a bounded number of times.
        'attempt: for _ in 0..100 {
            let beta: Vec<Vec<f64>> = self
                .gaussians
                .iter()
                .map(|g| match init {
                    InitStrategy::PriorDraw => g.sample(rng),
                    InitStrategy::Mean => g.mean().to_vec(),
                })
                .collect();
            let pi: Vec<Vec<f64>> = self
                .dirichlets
                .iter()
                .map(|p| sample_dirichlet(&p.0, rng))
                .collect();
            let mut paths: Vec<Vec<usize>> = (0..d_count)
                .map(|_| vec![0usize; self.data.total_rows])
                .collect();
            for d in 0..d_count {
                let mut ws = self.single_workspace(d);
                let lp = self.eval_block(d, &beta[d], &pi[d], &paths, &mut ws, 0);
                if lp == f64::NEG_INFINITY {
                    continue 'attempt;
                }
                let s = self.model.diseases()[d].n_states();
                let mut path = std::mem::take(&mut paths[d]);
                for v in 0..self.data.n_voles {
                    let t_len = self.data.t_len[v];
                    let or = self.data.obs_offset[v];
                    let sr = self.data.step_offset[v];
                    backward_sample_into(
                        s,
                        &ws.filtered[0][or * s..(or + t_len) * s],
                        &ws.trans[0][sr * s * s..(sr + t_len - 1) * s * s],
                        rng,
                        &mut path[or..or + t_len],
                    )?;
                }
                paths[d] = path;
            }
            return Ok(GibbsState {
                beta,
                pi,
                paths,
                iteration: 0,
            });
        }
        Err(Error::Config(
            "could not initialize a state with positive likelihood; check the data against the \
             transition structures"
                .into(),
        ))
    }

    /// One full Gibbs sweep. `chain_seed` keys the per-vole backward-sampling
    /// substreams.
    pub fn sweep<R: Rng + ?Sized>(
        &self,
        state: &mut GibbsState,
        proposals: &mut [AdaptiveProposal],
        workspaces: &mut [BlockWorkspace],
        rng: &mut R,
        chain_seed: u64,
        observer: &mut dyn SweepObserver,
    ) -> Result<SweepFlags> {
        let d_count = self.model.n_diseases();
        state.iteration += 1;
        let mut flags = SweepFlags {
            accepted: Vec::with_capacity(d_count),
            infinite_proposal: Vec::with_capacity(d_count),
        };
        for d in 0..d_count {
            let ws = &mut workspaces[d];
            let cur = ws.current_slot;
            let prop_slot = 1 - cur;
            let lp_cur = self.eval_block(d, &state.beta[d], &state.pi[d], &state.paths, ws, cur);
            if lp_cur == f64::NEG_INFINITY {
                return Err(Error::ZeroLikelihood { time: 0 });
            }
            let candidate = proposals[d].propose(&state.beta[d], rng);
            let lp_prop =
                self.eval_block(d, &candidate, &state.pi[d], &state.paths, ws, prop_slot);
            flags.infinite_proposal.push(lp_prop == f64::NEG_INFINITY);
            let accepted =
                lp_prop > f64::NEG_INFINITY && metropolis_accept(lp_prop - lp_cur, rng);
            if accepted {
                state.beta[d] = candidate;
                ws.current_slot = prop_slot;
            }
            proposals[d].update(accepted, &state.beta[d]);
            flags.accepted.push(accepted);

            // Redraw this disease's hidden paths from the accepted block.
            let spec = &self.model.diseases()[d];
            let s = spec.n_states();
            let slot = ws.current_slot;
            let mut path = std::mem::take(&mut state.paths[d]);
            for v in 0..self.data.n_voles {
                let t_len = self.data.t_len[v];
                let or = self.data.obs_offset[v];
                let sr = self.data.step_offset[v];
                let mut vole_rng = substream(
                    chain_seed,
                    STREAM_FFBS,
                    state.iteration * d_count as u64 + d as u64,
                    v as u64,
                );
                backward_sample_into(
                    s,
                    &ws.filtered[slot][or * s..(or + t_len) * s],
                    &ws.trans[slot][sr * s * s..(sr + t_len - 1) * s * s],
                    &mut vole_rng,
                    &mut path[or..or + t_len],
                )?;
            }
            state.paths[d] = path;

            // Conjugate redraw of the initial distribution from the voles'
            // initial states.
            let mut counts = vec![0u64; s];
            for v in 0..self.data.n_voles {
                counts[state.paths[d][self.data.obs_offset[v]]] += 1;
            }
            state.pi[d] = sample_initial_distribution(&counts, &self.dirichlets[d], rng);

            let view = BlockView {
                d,
                spec,
                data: &self.data,
                obs: &self.data.obs[d],
                filtered: &ws.filtered[ws.current_slot],
                trans: &ws.trans[ws.current_slot],
            };
            observer.after_block(state.iteration, &view, state);
        }
        Ok(flags)
    }

    /// Non-adaptive pilot phase estimating the fixed proposal covariance.
    ///
    /// For each disease a plain random-walk Metropolis runs on the
    /// coefficients not associated with the other diseases (intercepts and
    /// deterministic slopes); the estimated covariance of that sub-block
    /// fills its part of the fixed covariance, and every coupling
    /// coefficient keeps a small independent proposal variance.
    pub fn pilot_sigma0(&self, controls: &McmcControls) -> Result<Vec<DMatrix<f64>>> {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(controls.seed, STREAM_PILOT));
        let state = self.init_state(InitStrategy::Mean, &mut rng)?;
        let mut result = Vec::with_capacity(self.model.n_diseases());
        for d in 0..self.model.n_diseases() {
            let layout = self.model.layout(d);
            let k = layout.len();
            let det_dim = layout.det_dim();
            let sub: Vec<usize> = (0..k)
                .filter(|&i| {
                    if i < layout.n_intercepts() {
                        return true;
                    }
                    let col = (i - layout.n_intercepts()) % layout.design_dim();
                    col < det_dim
                })
                .collect();

            let mut ws = self.single_workspace(d);
            let mut beta = state.beta[d].clone();
            let mut lp = self.eval_block(d, &beta, &state.pi[d], &state.paths, &mut ws, 0);
            if lp == f64::NEG_INFINITY {
                return Err(Error::ZeroLikelihood { time: 0 });
            }
            let sd = DEFAULT_PROPOSAL_VARIANCE.sqrt();
            let warmup = controls.pilot_iterations / 5;
            let mut history: Vec<Vec<f64>> = Vec::new();
            for it in 0..controls.pilot_iterations {
                let mut candidate = beta.clone();
                for &i in &sub {
                    candidate[i] += rng.sample::<f64, _>(rand_distr::StandardNormal) * sd;
                }
                let cand_lp =
                    self.eval_block(d, &candidate, &state.pi[d], &state.paths, &mut ws, 0);
                if cand_lp > f64::NEG_INFINITY && metropolis_accept(cand_lp - lp, &mut rng) {
                    beta = candidate;
                    lp = cand_lp;
                }
                if it >= warmup {
                    history.push(sub.iter().map(|&i| beta[i]).collect());
                }
            }

            let mut sigma =
                DMatrix::identity(k, k) * DEFAULT_PROPOSAL_VARIANCE;
            if history.len() >= 2 {
                let n = history.len() as f64;
                let mean: Vec<f64> = (0..sub.len())
                    .map(|j| history.iter().map(|h| h[j]).sum::<f64>() / n)
                    .collect();
                for (a, &ia) in sub.iter().enumerate() {
                    for (b, &ib) in sub.iter().enumerate() {
                        let cov = history
                            .iter()
                            .map(|h| (h[a] - mean[a]) * (h[b] - mean[b]))
                            .sum::<f64>()
                            / (n - 1.0);
                        sigma[(ia, ib)] = cov;
                    }
                }
                for &ia in &sub {
                    sigma[(ia, ia)] += 1e-8;
                }
                if Cholesky::new(sigma.clone()).is_none() {
                    // Degenerate pilot sample; keep the diagonal fallback.
                    sigma = DMatrix::identity(k, k) * DEFAULT_PROPOSAL_VARIANCE;
                }
            }
            result.push(sigma);
        }
        Ok(result)
    }

    /// Runs one chain; the trace is kept in memory and optionally streamed
    /// to `path` as it is produced.
    pub fn run_chain(
        &self,
        controls: &McmcControls,
        chain_index: usize,
        sigma0: &[DMatrix<f64>],
        path: Option<&Path>,
        observer: &mut dyn SweepObserver,
    ) -> Result<ChainTrace> {
        let chain_seed = derive_seed(controls.seed, STREAM_CHAIN ^ (chain_index as u64) << 8);
        let mut rng = ChaCha12Rng::seed_from_u64(chain_seed);
        let mut state = self.init_state(controls.init, &mut rng)?;
        let mut proposals: Vec<AdaptiveProposal> = sigma0
            .iter()
            .map(|s| AdaptiveProposal::new(s.clone()))
            .collect::<Result<_>>()?;
        let mut workspaces = self.workspaces();

        let param_names = trace_param_names(self.model);
        let disease_names: Vec<String> = self
            .model
            .diseases()
            .iter()
            .map(|d| d.name().to_string())
            .collect();
        let mut writer = match path {
            Some(p) => Some(trace::TraceWriter::create(p, &param_names, &disease_names)?),
            None => None,
        };

        let retained = controls.retained() as usize;
        let mut trace = ChainTrace {
            chain_index,
            seed: chain_seed,
            param_names,
            disease_names,
            iterations: Vec::with_capacity(retained),
            samples: Vec::with_capacity(retained),
            accepted: Vec::with_capacity(retained),
            acceptance_rates: Vec::new(),
            infinite_rejections: vec![0; self.model.n_diseases()],
        };

        for _ in 0..controls.iterations {
            let flags = self.sweep(
                &mut state,
                &mut proposals,
                &mut workspaces,
                &mut rng,
                chain_seed,
                observer,
            )?;
            for (d, &inf) in flags.infinite_proposal.iter().enumerate() {
                trace.infinite_rejections[d] += u64::from(inf);
            }
            let iter = state.iteration;
            if iter > controls.burn_in && (iter - controls.burn_in) % controls.thin == 0 {
                let mut row = Vec::with_capacity(trace.param_names.len());
                for b in &state.beta {
                    row.extend_from_slice(b);
                }
                for p in &state.pi {
                    row.extend_from_slice(p);
                }
                if let Some(w) = writer.as_mut() {
                    w.row(iter, &row, &flags.accepted)?;
                }
                trace.iterations.push(iter);
                trace.samples.push(row);
                trace.accepted.push(flags.accepted.clone());
            }
        }
        if let Some(w) = writer.take() {
            w.finish()?;
        }
        trace.acceptance_rates = proposals.iter().map(AdaptiveProposal::acceptance_rate).collect();
        Ok(trace)
    }
}

/// Output of a full multi-chain run.
pub struct RunOutput {
    pub traces: Vec<ChainTrace>,
    pub manifest: Manifest,
}

/// Runs independent chains with distinct derived seeds and overdispersed
/// starts. Chains execute concurrently up to the thread budget; each chain's
/// trace is identical whatever the schedule. Traces stream to
/// `out_dir/trace_<i>.csv` when an output directory is given.
pub fn run_chains(
    model: &ModelSpec,
    panels: &[VolePanel],
    gaussians: &[GaussianPrior],
    dirichlets: &[DirichletPrior],
    controls: &McmcControls,
    out_dir: Option<&Path>,
    config_hash: &str,
) -> Result<RunOutput> {
    controls.validate()?;
    let started = std::time::Instant::now();
    let fitter = Fitter::new(model, panels, gaussians, dirichlets)?;
    let sigma0 = if controls.pilot {
        fitter.pilot_sigma0(controls)?
    } else {
        fitter.default_sigma0()
    };

    let chain_paths: Vec<Option<PathBuf>> = (0..controls.chains)
        .map(|c| out_dir.map(|dir| dir.join(format!("trace_{c}.csv"))))
        .collect();

    let workers = if controls.threads == 0 {
        controls.chains
    } else {
        controls.threads.min(controls.chains)
    }
    .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let traces: Result<Vec<ChainTrace>> = pool.install(|| {
        (0..controls.chains)
            .into_par_iter()
            .map(|c| {
                fitter.run_chain(
                    controls,
                    c,
                    &sigma0,
                    chain_paths[c].as_deref(),
                    &mut NoObserver,
                )
            })
            .collect()
    });
    let traces = traces?;

    let manifest = Manifest {
        seed: controls.seed,
        config_hash: config_hash.to_string(),
        iterations: controls.iterations,
        burn_in: controls.burn_in,
        thin: controls.thin,
        wall_time_secs: started.elapsed().as_secs_f64(),
        chains: traces
            .iter()
            .enumerate()
            .map(|(c, t)| ChainManifest {
                index: c,
                seed: t.seed,
                file: chain_paths[c].clone(),
                acceptance_rates: t
                    .disease_names
                    .iter()
                    .cloned()
                    .zip(t.acceptance_rates.iter().copied())
                    .collect::<BTreeMap<_, _>>(),
                infinite_rejections: t
                    .disease_names
                    .iter()
                    .cloned()
                    .zip(t.infinite_rejections.iter().copied())
                    .collect::<BTreeMap<_, _>>(),
            })
            .collect(),
    };
    if let Some(dir) = out_dir {
        trace::write_manifest(&manifest, &dir.join("manifest.json"))?;
    }
    Ok(RunOutput { traces, manifest })
}
