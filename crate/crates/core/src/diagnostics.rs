//! Convergence statistics, posterior summaries and the posterior-predictive
//! holdout check.

use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

use crate::data::VolePanel;
use crate::design::ModelSpec;
use crate::error::{Error, Result};
use crate::hmm::ObservationSymbol;
use crate::priors::{DirichletPrior, GaussianPrior};
use crate::sampler::{
    substream, BlockView, Fitter, GibbsState, McmcControls, SweepObserver,
};

/// Potential scale reduction at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrPoint {
    /// Samples per chain used at this grid point.
    pub n: usize,
    pub r: f64,
    /// 97.5% quantile of the scale-reduction statistic.
    pub q975: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Gelman-Rubin potential scale reduction for one parameter, evaluated
/// cumulatively over an increasing iteration grid (for convergence curves).
///
/// R = sqrt(((n-1)/n W + B/n) / W) with W the mean within-chain variance and
/// B/n the variance of the chain means; the 97.5% quantile uses the standard
/// F approximation.
pub fn gelman_rubin(chains: &[&[f64]], grid_points: usize) -> Result<Vec<GrPoint>> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::TooFewObservations { needed: 2, got: m });
    }
    let n_total = chains[0].len();
    if chains.iter().any(|c| c.len() != n_total) {
        return Err(Error::Schema("chains have unequal lengths".into()));
    }
    if n_total < 10 {
        return Err(Error::TooFewObservations {
            needed: 10,
            got: n_total,
        });
    }
    let grid_points = grid_points.max(1).min(n_total / 10);
    let mut out = Vec::with_capacity(grid_points);
    for g in 1..=grid_points {
        let n = n_total * g / grid_points;
        out.push(gelman_rubin_at(chains, n)?);
    }
    Ok(out)
}

fn gelman_rubin_at(chains: &[&[f64]], n: usize) -> Result<GrPoint> {
    let m = chains.len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let vars: Vec<f64> = chains.iter().map(|c| sample_variance(&c[..n])).collect();
    let w = mean(&vars);
    if w <= 0.0 {
        return Err(Error::DegenerateChains);
    }
    let b_over_n = sample_variance(&means);
    let nf = n as f64;
    let r2 = ((nf - 1.0) / nf * w + b_over_n) / w;

    // F-based upper quantile: the between-chain term is scaled by
    // F_{0.975}(m - 1, 2 W^2 / var(W)).
    let var_w = sample_variance(&vars) / m;
    let df2 = if var_w > 0.0 {
        (2.0 * w * w / var_w).min(1e6)
    } else {
        1e6
    };
    let f_q = FisherSnedecor::new(m - 1.0, df2)
        .map(|f| f.inverse_cdf(0.975))
        .unwrap_or(1.0);
    let r2_upper = (nf - 1.0) / nf + (m + 1.0) / m * (b_over_n / w) * f_q;

    Ok(GrPoint {
        n,
        r: r2.sqrt(),
        q975: r2_upper.sqrt(),
    })
}

/// Per-grid-point aggregation across parameters, in the shape of the usual
/// convergence plot: mean R, max R, max 97.5% quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct GrSummaryRow {
    pub n: usize,
    pub mean_r: f64,
    pub max_r: f64,
    pub max_q975: f64,
}

pub fn gelman_rubin_summary(per_param: &[Vec<GrPoint>]) -> Vec<GrSummaryRow> {
    if per_param.is_empty() {
        return Vec::new();
    }
    let grid = per_param[0].len();
    (0..grid)
        .map(|g| {
            let rs: Vec<f64> = per_param.iter().map(|p| p[g].r).collect();
            let qs: Vec<f64> = per_param.iter().map(|p| p[g].q975).collect();
            GrSummaryRow {
                n: per_param[0][g].n,
                mean_r: mean(&rs),
                max_r: rs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                max_q975: qs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Threshold crossings for the positivity probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalFlag {
    None,
    /// Outside [0.025, 0.975]: a possible effect.
    Possible,
    /// Outside [0.00025, 0.99975]: a very probable effect.
    VeryProbable,
}

impl SignalFlag {
    fn from_probability(p: f64) -> Self {
        if !(0.000_25..=0.999_75).contains(&p) {
            Self::VeryProbable
        } else if !(0.025..=0.975).contains(&p) {
            Self::Possible
        } else {
            Self::None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "",
            Self::Possible => "*",
            Self::VeryProbable => "**",
        }
    }
}

/// Posterior summary of one parameter or contrast.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    /// P(parameter > 0), strict inequality.
    pub prob_positive: f64,
    pub flag: SignalFlag,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // Type-7 linear interpolation on order statistics.
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize_column(name: &str, values: &mut Vec<f64>) -> ParamSummary {
    let prob_positive =
        values.iter().filter(|&&v| v > 0.0).count() as f64 / values.len() as f64;
    values.sort_by(f64::total_cmp);
    ParamSummary {
        name: name.to_string(),
        median: quantile(values, 0.5),
        q025: quantile(values, 0.025),
        q975: quantile(values, 0.975),
        prob_positive,
        flag: SignalFlag::from_probability(prob_positive),
    }
}

/// A named sample-wise difference of two trace columns.
#[derive(Debug, Clone)]
pub struct Contrast {
    pub name: String,
    pub minuend: usize,
    pub subtrahend: usize,
}

/// Empirical medians, central 95% intervals and positivity probabilities of
/// every column, with contrasts computed sample-wise before summarizing.
/// `burn_in_rows` leading rows are dropped first.
pub fn summarize(
    names: &[String],
    rows: &[Vec<f64>],
    burn_in_rows: usize,
    contrasts: &[Contrast],
) -> Result<Vec<ParamSummary>> {
    if burn_in_rows >= rows.len() {
        return Err(Error::EmptyTrace);
    }
    let rows = &rows[burn_in_rows..];
    let mut out = Vec::with_capacity(names.len() + contrasts.len());
    for (i, name) in names.iter().enumerate() {
        let mut col: Vec<f64> = rows.iter().map(|r| r[i]).collect();
        out.push(summarize_column(name, &mut col));
    }
    for c in contrasts {
        let mut col: Vec<f64> = rows.iter().map(|r| r[c.minuend] - r[c.subtrahend]).collect();
        out.push(summarize_column(&c.name, &mut col));
    }
    Ok(out)
}

/// The intercept contrasts of interest for every four-state disease in the
/// trace: reinfection-vs-first-infection and old-vs-new recovery.
pub fn default_contrasts(names: &[String]) -> Vec<Contrast> {
    let index: BTreeMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut diseases: Vec<&str> = Vec::new();
    for n in names {
        if let Some(d) = n.strip_suffix(".b0_42") {
            if !diseases.contains(&d) {
                diseases.push(d);
            }
        }
    }
    let mut out = Vec::new();
    for d in diseases {
        for (a, b) in [("b0_42", "b0_12"), ("b0_34", "b0_24")] {
            let (Some(&ia), Some(&ib)) = (
                index.get(format!("{d}.{a}").as_str()),
                index.get(format!("{d}.{b}").as_str()),
            ) else {
                continue;
            };
            out.push(Contrast {
                name: format!("{d}.{a}-{d}.{b}"),
                minuend: ia,
                subtrahend: ib,
            });
        }
    }
    out
}

/// Hosmer-Lemeshow goodness-of-fit result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HosmerLemeshow {
    pub statistic: f64,
    pub p_value: f64,
    pub groups: usize,
}

/// Decile-of-risk chi-square test that binary outcomes arise as
/// Bernoulli(p_hat).
pub fn hosmer_lemeshow(p_hat: &[f64], outcomes: &[bool], groups: usize) -> Result<HosmerLemeshow> {
    if p_hat.len() != outcomes.len() {
        return Err(Error::DimensionMismatch {
            what: "predicted probabilities",
            expected: outcomes.len(),
            got: p_hat.len(),
        });
    }
    if groups < 2 || p_hat.len() < groups {
        return Err(Error::TooFewObservations {
            needed: groups.max(2),
            got: p_hat.len(),
        });
    }
    let n = p_hat.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p_hat[a].total_cmp(&p_hat[b]).then(a.cmp(&b)));

    let mut statistic = 0.0;
    for g in 0..groups {
        let start = g * n / groups;
        let end = (g + 1) * n / groups;
        let members = &order[start..end];
        let n_g = members.len() as f64;
        let expected: f64 = members.iter().map(|&i| p_hat[i]).sum();
        let observed = members.iter().filter(|&&i| outcomes[i]).count() as f64;
        let denom = (expected * (1.0 - expected / n_g)).max(1e-10);
        statistic += (observed - expected).powi(2) / denom;
    }
    // Classical reference distribution with groups - 2 degrees of freedom;
    // at two groups this degenerates to a point mass at zero.
    let p_value = if groups == 2 {
        f64::from(statistic <= 1e-12)
    } else {
        1.0 - ChiSquared::new((groups - 2) as f64)
            .expect("positive dof")
            .cdf(statistic)
    };
    Ok(HosmerLemeshow {
        statistic,
        p_value,
        groups,
    })
}

/// Two-sided one-sample Kolmogorov-Smirnov test against a continuous CDF.
/// Returns the statistic and the asymptotic p-value.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let n = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n as f64;
        let hi = (i + 1) as f64 / n as f64;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = 2.0 * (-1.0f64).powi(j + 1) * (-2.0 * jf * jf * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

/// Holdout configuration for the posterior-predictive check.
#[derive(Debug, Clone)]
pub struct HoldoutConfig {
    /// Captures to mask (a capture qualifies when every disease was
    /// observed).
    pub n_holdout: usize,
    /// Hosmer-Lemeshow group count.
    pub groups: usize,
    /// Iteration stride between predictive evaluations after burn-in.
    pub predictive_stride: u64,
    pub seed: u64,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self {
            n_holdout: 100,
            groups: 10,
            predictive_stride: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiseaseCalibration {
    pub disease: String,
    pub test: HosmerLemeshow,
}

#[derive(Debug, Clone)]
pub struct HoldoutReport {
    /// Masked captures as (tag, lunar month).
    pub masked: Vec<(String, u32)>,
    /// Mean posterior positive probability per disease per masked capture.
    pub predicted: Vec<Vec<f64>>,
    /// True outcomes per disease per masked capture.
    pub outcomes: Vec<Vec<bool>>,
    pub calibration: Vec<DiseaseCalibration>,
}

struct PredictiveObserver {
    burn_in: u64,
    stride: u64,
    /// vole -> (local times, cell indices)
    by_vole: BTreeMap<usize, Vec<(usize, usize)>>,
    sums: Vec<Vec<f64>>,
    draws: Vec<u64>,
    scratch: Vec<f64>,
}

impl SweepObserver for PredictiveObserver {
    fn after_block(&mut self, iteration: u64, view: &BlockView<'_>, _state: &GibbsState) {
        if iteration <= self.burn_in || (iteration - self.burn_in) % self.stride != 0 {
            return;
        }
        for (&vole, cells) in &self.by_vole {
            let probs = view
                .positive_probability(vole, &mut self.scratch)
                .expect("masked panels stay feasible");
            for &(t, cell) in cells {
                self.sums[view.d][cell] += probs[t];
            }
        }
        self.draws[view.d] += 1;
    }
}

/// The posterior-predictive holdout: masks fully observed captures, refits
/// on the masked data, computes every masked cell's posterior positive
/// probability (mean over thinned forward-backward marginals) and runs a
/// Hosmer-Lemeshow test per disease against the held-out outcomes.
pub fn posterior_predictive_holdout(
    model: &ModelSpec,
    panels: &[VolePanel],
    gaussians: &[GaussianPrior],
    dirichlets: &[DirichletPrior],
    controls: &McmcControls,
    config: &HoldoutConfig,
) -> Result<HoldoutReport> {
    let d_count = model.n_diseases();
    let mut eligible: Vec<(usize, usize)> = Vec::new();
    for (v, p) in panels.iter().enumerate() {
        for t in 0..p.len() {
            if p.captured[t] && (0..d_count).all(|d| !p.observations[d][t].is_missing()) {
                eligible.push((v, t));
            }
        }
    }
    if eligible.len() < config.n_holdout {
        return Err(Error::InsufficientFullyObserved {
            needed: config.n_holdout,
            found: eligible.len(),
        });
    }

    // Seeded partial Fisher-Yates draw of the masked captures.
    let mut rng = substream(config.seed, 0x4d, 0, 0);
    let mut pool = eligible;
    let mut masked_cells = Vec::with_capacity(config.n_holdout);
    for _ in 0..config.n_holdout {
        let i = rand::Rng::random_range(&mut rng, 0..pool.len());
        masked_cells.push(pool.swap_remove(i));
    }
    masked_cells.sort_unstable();

    let mut masked_panels = panels.to_vec();
    let mut outcomes = vec![Vec::with_capacity(config.n_holdout); d_count];
    let mut masked_ids = Vec::with_capacity(config.n_holdout);
    for (cell, &(v, t)) in masked_cells.iter().enumerate() {
        for d in 0..d_count {
            outcomes[d]
                .push(panels[v].observations[d][t] == ObservationSymbol::Positive);
            masked_panels[v].observations[d][t] = ObservationSymbol::Missing;
        }
        masked_ids.push((panels[v].tag.clone(), panels[v].lm(t)));
        let _ = cell;
    }

    let fitter = Fitter::new(model, &masked_panels, gaussians, dirichlets)?;
    let sigma0 = if controls.pilot {
        fitter.pilot_sigma0(controls)?
    } else {
        fitter.default_sigma0()
    };
    let mut by_vole: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (cell, &(v, t)) in masked_cells.iter().enumerate() {
        by_vole.entry(v).or_default().push((t, cell));
    }
    let mut observer = PredictiveObserver {
        burn_in: controls.burn_in,
        stride: config.predictive_stride.max(1),
        by_vole,
        sums: vec![vec![0.0; config.n_holdout]; d_count],
        draws: vec![0; d_count],
        scratch: Vec::new(),
    };
    fitter.run_chain(controls, 0, &sigma0, None, &mut observer)?;

    let mut predicted = Vec::with_capacity(d_count);
    for d in 0..d_count {
        if observer.draws[d] == 0 {
            return Err(Error::Config(
                "no predictive draws; increase iterations or lower the stride".into(),
            ));
        }
        predicted.push(
            observer.sums[d]
                .iter()
                .map(|s| s / observer.draws[d] as f64)
                .collect::<Vec<f64>>(),
        );
    }

    let calibration = (0..d_count)
        .map(|d| {
            Ok(DiseaseCalibration {
                disease: model.diseases()[d].name().to_string(),
                test: hosmer_lemeshow(&predicted[d], &outcomes[d], config.groups)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(HoldoutReport {
        masked: masked_ids,
        predicted,
        outcomes,
        calibration,
    })
}
