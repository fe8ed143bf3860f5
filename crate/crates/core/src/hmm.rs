//! State-space primitives and the forward/backward machinery.
//!
//! The forward recursion computes the observed-data likelihood of one vole's
//! panel for one disease with the other diseases' states held fixed; the
//! backward pass draws an exact hidden path given the stored forward
//! quantities. Both use per-step rescaling with an accumulated log scaling
//! factor so that panels with thousands of time points do not underflow.
//! `brute_force_likelihood` enumerates every hidden path and is the test
//! oracle for both.

use rand::Rng;

use crate::disease::DiseaseSpec;
use crate::error::{Error, Result};

/// Outcome of a single diagnostic test, or the absence of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObservationSymbol {
    Negative,
    Positive,
    Missing,
}

impl ObservationSymbol {
    /// Parses the dataset encoding: `N`, `P` or `x`, case-insensitive.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "N" | "n" => Some(Self::Negative),
            "P" | "p" => Some(Self::Positive),
            "x" | "X" => Some(Self::Missing),
            _ => None,
        }
    }

    /// Canonical dataset encoding.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Negative => "N",
            Self::Positive => "P",
            Self::Missing => "x",
        }
    }

    pub fn is_missing(self) -> bool {
        matches!(self, Self::Missing)
    }
}

/// Ordered hidden states of one chain. State index 0 is always the covariate
/// baseline when the chain appears as a covariate for another disease.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    labels: Vec<String>,
}

impl StateSpace {
    pub fn new<S: Into<String>>(labels: Vec<S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidSpec("state space needs at least 2 states".into()));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(Error::InvalidSpec(format!("duplicate state label `{a}`")));
            }
        }
        Ok(Self { labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Per-state probability of one observation. Emissions here are
/// deterministic, so entries are 0 or 1 and a missing observation maps to the
/// all-ones vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodVector(Vec<f64>);

impl LikelihoodVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|&e| e != 0.0 && e != 1.0) {
            return Err(Error::InvalidSpec("emission entries must be 0 or 1".into()));
        }
        if !entries.iter().any(|&e| e == 1.0) {
            return Err(Error::InvalidSpec("emission vector must have a positive entry".into()));
        }
        Ok(Self(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Row-stochastic transition matrices for one vole and one disease, one
/// matrix per step t -> t+1, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrixSeq {
    n_states: usize,
    data: Vec<f64>,
}

impl TransitionMatrixSeq {
    /// Wraps pre-built matrices, checking row sums and entry ranges.
    pub fn new(n_states: usize, data: Vec<f64>) -> Result<Self> {
        let cell = n_states * n_states;
        if cell == 0 || data.len() % cell != 0 {
            return Err(Error::DimensionMismatch {
                what: "transition matrix sequence",
                expected: cell,
                got: data.len(),
            });
        }
        for (t, step) in data.chunks_exact(cell).enumerate() {
            for row in 0..n_states {
                let r = &step[row * n_states..(row + 1) * n_states];
                if r.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::InvalidSpec(format!(
                        "transition entry out of [0,1] at step {t}, row {row}"
                    )));
                }
                let sum: f64 = r.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidSpec(format!(
                        "transition row {row} at step {t} sums to {sum}"
                    )));
                }
            }
        }
        Ok(Self { n_states, data })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Number of steps (one less than the panel length it supports).
    pub fn len(&self) -> usize {
        self.data.len() / (self.n_states * self.n_states)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The step-t matrix as a flat row-major slice.
    pub fn step(&self, t: usize) -> &[f64] {
        let c = self.n_states * self.n_states;
        &self.data[t * c..(t + 1) * c]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Checks that every cell fixed at zero by the spec is exactly zero.
    pub fn respects_structure(&self, spec: &DiseaseSpec) -> bool {
        let s = self.n_states;
        self.data.chunks_exact(s * s).all(|step| {
            (0..s * s).all(|idx| !spec.is_structural_zero(idx / s, idx % s) || step[idx] == 0.0)
        })
    }
}

/// Output of the forward recursion.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Log of the observed-data likelihood for this vole and disease.
    pub log_likelihood: f64,
    /// Number of transition-cell multiplications performed.
    pub transition_ops: usize,
    n_states: usize,
    filtered: Vec<f64>,
}

impl ForwardResult {
    /// Filtered distribution P(X_t | y_{1..t}) at local time t.
    pub fn filtered(&self, t: usize) -> &[f64] {
        &self.filtered[t * self.n_states..(t + 1) * self.n_states]
    }

    pub fn len(&self) -> usize {
        self.filtered.len() / self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }

    pub fn filtered_flat(&self) -> &[f64] {
        &self.filtered
    }
}

/// One draw of a hidden state path (0-based state indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenPath(pub Vec<usize>);

impl HiddenPath {
    /// Checks the path invariants: every consecutive pair has strictly
    /// positive transition probability and every state emits the observation.
    pub fn validate(
        &self,
        spec: &DiseaseSpec,
        obs: &[ObservationSymbol],
        trans: &TransitionMatrixSeq,
    ) -> Result<()> {
        let states = &self.0;
        if states.len() != obs.len() {
            return Err(Error::DimensionMismatch {
                what: "hidden path",
                expected: obs.len(),
                got: states.len(),
            });
        }
        for (t, (&x, &y)) in states.iter().zip(obs).enumerate() {
            if spec.emission(y)[x] == 0.0 {
                return Err(Error::ZeroLikelihood { time: t });
            }
        }
        for t in 0..states.len().saturating_sub(1) {
            if trans.step(t)[states[t] * spec.n_states() + states[t + 1]] <= 0.0 {
                return Err(Error::ZeroLikelihood { time: t + 1 });
            }
        }
        Ok(())
    }
}

/// Summary returned by the in-place forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardStats {
    pub log_likelihood: f64,
    pub transition_ops: usize,
}

/// In-place forward recursion. `trans` holds (T-1) flat S x S matrices and
/// `filtered` must have room for T x S values. Returns the log-likelihood and
/// the transition-cell operation count.
///
/// A panel whose observations are all missing has total probability one by
/// row-stochasticity; the accumulator only reproduces that up to rounding,
/// so the log-likelihood is pinned to exactly zero in that case.
pub fn forward_into(
    spec: &DiseaseSpec,
    obs: &[ObservationSymbol],
    pi: &[f64],
    trans: &[f64],
    filtered: &mut [f64],
) -> Result<ForwardStats> {
    let s = spec.n_states();
    let t_len = obs.len();
    debug_assert!(t_len >= 1);
    debug_assert_eq!(pi.len(), s);
    debug_assert_eq!(trans.len(), (t_len - 1) * s * s);
    debug_assert_eq!(filtered.len(), t_len * s);

    let mut ops = 0usize;
    let mut log_lik = 0.0f64;
    let mut any_observed = false;

    let l0 = spec.emission(obs[0]);
    any_observed |= !obs[0].is_missing();
    let mut c = 0.0;
    for i in 0..s {
        let v = pi[i] * l0[i];
        filtered[i] = v;
        c += v;
    }
    if !(c > 0.0) {
        return Err(Error::ZeroLikelihood { time: 0 });
    }
    for v in &mut filtered[..s] {
        *v /= c;
    }
    log_lik += c.ln();

    for t in 1..t_len {
        let l = spec.emission(obs[t]);
        any_observed |= !obs[t].is_missing();
        let (prev_all, cur_all) = filtered.split_at_mut(t * s);
        let prev = &prev_all[(t - 1) * s..];
        let cur = &mut cur_all[..s];
        let step = &trans[(t - 1) * s * s..t * s * s];
        cur.fill(0.0);
        for i in 0..s {
            let f = prev[i];
            let row = &step[i * s..(i + 1) * s];
            for j in 0..s {
                cur[j] += f * row[j];
            }
            ops += s;
        }
        let mut c = 0.0;
        for j in 0..s {
            cur[j] *= l[j];
            c += cur[j];
        }
        if !(c > 0.0) {
            return Err(Error::ZeroLikelihood { time: t });
        }
        for v in cur.iter_mut() {
            *v /= c;
        }
        log_lik += c.ln();
    }

    Ok(ForwardStats {
        log_likelihood: if any_observed { log_lik } else { 0.0 },
        transition_ops: ops,
    })
}

/// Forward recursion over a full panel; see [`forward_into`].
pub fn forward(
    spec: &DiseaseSpec,
    obs: &[ObservationSymbol],
    trans: &TransitionMatrixSeq,
    pi: &[f64],
) -> Result<ForwardResult> {
    if obs.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "observation sequence",
            expected: 1,
            got: 0,
        });
    }
    if trans.len() + 1 != obs.len() {
        return Err(Error::DimensionMismatch {
            what: "transition sequence",
            expected: obs.len() - 1,
            got: trans.len(),
        });
    }
    let s = spec.n_states();
    let mut filtered = vec![0.0; obs.len() * s];
    let stats = forward_into(spec, obs, pi, trans.as_flat(), &mut filtered)?;
    Ok(ForwardResult {
        log_likelihood: stats.log_likelihood,
        transition_ops: stats.transition_ops,
        n_states: s,
        filtered,
    })
}

fn sample_index<R: Rng + ?Sized, F: Fn(usize) -> f64>(
    n: usize,
    weight: F,
    rng: &mut R,
) -> Option<usize> {
    let total: f64 = (0..n).map(&weight).sum();
    if !(total > 0.0) {
        return None;
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for i in 0..n {
        acc += weight(i);
        if u < acc {
            return Some(i);
        }
    }
    // Rounding can leave u just above the accumulated total; take the last
    // state with positive weight.
    (0..n).rev().find(|&i| weight(i) > 0.0)
}

/// In-place backward sampling from stored filtered distributions.
pub fn backward_sample_into<R: Rng + ?Sized>(
    n_states: usize,
    filtered: &[f64],
    trans: &[f64],
    rng: &mut R,
    out: &mut [usize],
) -> Result<()> {
    let t_len = out.len();
    debug_assert_eq!(filtered.len(), t_len * n_states);
    debug_assert_eq!(trans.len(), (t_len - 1) * n_states * n_states);

    let last = &filtered[(t_len - 1) * n_states..];
    out[t_len - 1] = sample_index(n_states, |i| last[i], rng)
        .ok_or(Error::ZeroLikelihood { time: t_len - 1 })?;
    for t in (0..t_len - 1).rev() {
        let f = &filtered[t * n_states..(t + 1) * n_states];
        let step = &trans[t * n_states * n_states..(t + 1) * n_states * n_states];
        let next = out[t + 1];
        out[t] = sample_index(n_states, |i| f[i] * step[i * n_states + next], rng)
            .ok_or(Error::ZeroLikelihood { time: t })?;
    }
    Ok(())
}

/// Draws an exact sample of the hidden path given the observations, i.e.
/// from P(X_{1..T} | y_{1..T}, transitions, initial distribution).
pub fn backward_sample<R: Rng + ?Sized>(
    fwd: &ForwardResult,
    trans: &TransitionMatrixSeq,
    rng: &mut R,
) -> Result<HiddenPath> {
    let mut out = vec![0usize; fwd.len()];
    backward_sample_into(fwd.n_states, &fwd.filtered, trans.as_flat(), rng, &mut out)?;
    Ok(HiddenPath(out))
}

/// In-place smoothing: fills `out` (T x S) with P(X_t = i | y_{1..T}).
pub fn smoothed_into(
    spec: &DiseaseSpec,
    obs: &[ObservationSymbol],
    filtered: &[f64],
    trans: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let s = spec.n_states();
    let t_len = obs.len();
    debug_assert_eq!(filtered.len(), t_len * s);
    debug_assert_eq!(out.len(), t_len * s);

    // Backward pass, renormalized each step; smoothing only needs the
    // backward weights up to proportionality.
    let mut beta = vec![1.0f64; s];
    let mut beta_next = vec![0.0f64; s];
    out[(t_len - 1) * s..].copy_from_slice(&filtered[(t_len - 1) * s..]);
    for t in (0..t_len.saturating_sub(1)).rev() {
        let l = spec.emission(obs[t + 1]);
        let step = &trans[t * s * s..(t + 1) * s * s];
        for i in 0..s {
            let mut acc = 0.0;
            for j in 0..s {
                acc += step[i * s + j] * l[j] * beta[j];
            }
            beta_next[i] = acc;
        }
        let norm: f64 = beta_next.iter().sum();
        if !(norm > 0.0) {
            return Err(Error::ZeroLikelihood { time: t });
        }
        for (b, bn) in beta.iter_mut().zip(&beta_next) {
            *b = bn / norm;
        }
        let f = &filtered[t * s..(t + 1) * s];
        let row = &mut out[t * s..(t + 1) * s];
        let mut total = 0.0;
        for i in 0..s {
            row[i] = f[i] * beta[i];
            total += row[i];
        }
        if !(total > 0.0) {
            return Err(Error::ZeroLikelihood { time: t });
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(())
}

/// Smoothed state marginals P(X_t | y_{1..T}) for a full panel.
pub fn smoothed_marginals(
    spec: &DiseaseSpec,
    obs: &[ObservationSymbol],
    trans: &TransitionMatrixSeq,
    pi: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let fwd = forward(spec, obs, trans, pi)?;
    let s = spec.n_states();
    let mut flat = vec![0.0; obs.len() * s];
    smoothed_into(spec, obs, &fwd.filtered, trans.as_flat(), &mut flat)?;
    Ok(flat.chunks_exact(s).map(<[f64]>::to_vec).collect())
}

const ENUMERATION_GUARD: f64 = 1e7;

fn check_enumerable(n_states: usize, t_len: usize) -> Result<()> {
    if (n_states as f64).powi(t_len as i32) > ENUMERATION_GUARD {
        return Err(Error::TooLarge {
            states: n_states,
            len: t_len,
        });
    }
    Ok(())
}

fn path_weight(
    spec: &DiseaseSpec,
    obs: &[ObservationSymbol],
    trans: &TransitionMatrixSeq,
    pi: &[f64],
    path: &[usize],
) -> f64 {
    let s = spec.n_states();
    let mut w = pi[path[0]] * spec.emission(obs[0])[path[0]];
    for t in 0..path.len() - 1 {
        w *= trans.step(t)[path[t] * s + path[t + 1]] * spec.emission(obs[t + 1])[path[t + 1]];
    }
    w
}

fn for_each_path<F: FnMut(&[usize])>(n_states: usize, t_len: usize, mut f: F) {
    let mut path = vec![0usize; t_len];
    loop {
        f(&path);
        // Odometer increment over the base-S representation of the path.
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < n_states {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Exact observed-data likelihood by summation over every hidden path.
/// Test oracle only; guarded to S^T <= 10^7.
pub fn brute_force_likelihood(
    spec: &DiseaseSpec,
    obs: &[ObservationSymbol],
    trans: &TransitionMatrixSeq,
    pi: &[f64],
) -> Result<f64> {
    check_enumerable(spec.n_states(), obs.len())?;
    let mut total = 0.0;
    for_each_path(spec.n_states(), obs.len(), |path| {
        total += path_weight(spec, obs, trans, pi, path);
    });
    Ok(total)
}

/// Exact posterior over hidden paths (paths with positive probability only),
/// normalized. Test oracle for backward sampling.
pub fn brute_force_path_posterior(
    spec: &DiseaseSpec,
    obs: &[ObservationSymbol],
    trans: &TransitionMatrixSeq,
    pi: &[f64],
) -> Result<Vec<(Vec<usize>, f64)>> {
    check_enumerable(spec.n_states(), obs.len())?;
    let mut paths = Vec::new();
    let mut total = 0.0;
    for_each_path(spec.n_states(), obs.len(), |path| {
        let w = path_weight(spec, obs, trans, pi, path);
        if w > 0.0 {
            paths.push((path.to_vec(), w));
            total += w;
        }
    });
    if total <= 0.0 {
        return Err(Error::ZeroLikelihood { time: 0 });
    }
    for (_, w) in &mut paths {
        *w /= total;
    }
    Ok(paths)
}
