//! Synthetic coupled-disease panels from known parameters: the ground-truth
//! engine for parameter-recovery tests and joint-distribution checks.
//!
//! Vole demographics (entry month, lifetime, weight trajectory) and the
//! capture/ascertainment process are drawn once into a skeleton, so the
//! hidden chains and observations can be redrawn repeatedly over a fixed
//! missingness pattern.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{CaptureRecord, Dataset, VolePanel};
use crate::design::{CovariateRecord, ModelSpec};
use crate::error::{Error, Result};
use crate::hmm::ObservationSymbol;
use crate::sampler::substream;

/// Capture design over the lunar-month grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CaptureSchedule {
    /// Every month is a trapping session; each capture succeeds with
    /// probability `p`.
    Uniform { p: f64 },
    /// Monthly sessions from March to November, one session every two months
    /// from November to March (month 1 is March).
    Seasonal { p: f64 },
}

impl CaptureSchedule {
    /// Whether a trapping session takes place at this lunar month.
    pub fn is_session(self, lm: u32) -> bool {
        match self {
            Self::Uniform { .. } => true,
            Self::Seasonal { .. } => {
                let phase = (lm - 1) % 13;
                phase <= 8 || phase == 9 || phase == 11
            }
        }
    }

    pub fn capture_probability(self) -> f64 {
        match self {
            Self::Uniform { p } | Self::Seasonal { p } => p,
        }
    }
}

/// Demographic and observation-process settings for one synthetic dataset.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_voles: usize,
    /// Study window in lunar months, 1..=window.
    pub window: u32,
    /// Per-month probability that a vole leaves the study (geometric
    /// lifetime); entry is uniform over the window.
    pub exit_prob: f64,
    pub capture: CaptureSchedule,
    /// Per-disease probability that a captured vole's status is not
    /// ascertained.
    pub ascertainment_failure: Vec<f64>,
    /// Probability that a captured vole's weight is not recorded.
    pub weight_missing_prob: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self, n_diseases: usize) -> Result<()> {
        if self.n_voles == 0 {
            return Err(Error::Config("need at least one vole".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.exit_prob)
            || !(0.0..=1.0).contains(&self.capture.capture_probability())
            || !(0.0..=1.0).contains(&self.weight_missing_prob)
            || self.ascertainment_failure.iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Config("probabilities must lie in [0,1]".into()));
        }
        if self.ascertainment_failure.len() != n_diseases {
            return Err(Error::DimensionMismatch {
                what: "ascertainment failure probabilities",
                expected: n_diseases,
                got: self.ascertainment_failure.len(),
            });
        }
        Ok(())
    }
}

/// Everything about a synthetic vole except its hidden chains: demographics,
/// weight trajectory and the capture/ascertainment masks.
#[derive(Debug, Clone)]
pub struct VoleSkeleton {
    pub tag: String,
    pub site: u8,
    pub male: bool,
    pub entry_lm: u32,
    /// Recorded weights (rounded to 0.5 g), one per month alive.
    pub weights: Vec<f64>,
    pub captured: Vec<bool>,
    /// Weight recorded when captured.
    pub weight_recorded: Vec<bool>,
    /// [disease][month]: status ascertained when captured.
    pub ascertained: Vec<Vec<bool>>,
}

impl VoleSkeleton {
    pub fn months(&self) -> usize {
        self.weights.len()
    }

    /// Month indices of the first and last capture, if any.
    pub fn capture_span(&self) -> Option<(usize, usize)> {
        let first = self.captured.iter().position(|&c| c)?;
        let last = self.captured.iter().rposition(|&c| c)?;
        Some((first, last))
    }

    /// Restricts the skeleton to its capture span, so simulated chains start
    /// at the first observation time. This makes the generative process
    /// identical to the fitted model, whose initial distribution lives at
    /// the first capture; recovery and joint-distribution checks need that
    /// exact match.
    pub fn trim_to_capture_span(&self) -> Option<VoleSkeleton> {
        let (first, last) = self.capture_span()?;
        Some(VoleSkeleton {
            tag: self.tag.clone(),
            site: self.site,
            male: self.male,
            entry_lm: self.entry_lm + first as u32,
            weights: self.weights[first..=last].to_vec(),
            captured: self.captured[first..=last].to_vec(),
            weight_recorded: self.weight_recorded[first..=last].to_vec(),
            ascertained: self
                .ascertained
                .iter()
                .map(|a| a[first..=last].to_vec())
                .collect(),
        })
    }
}

/// Full simulation output: the dataset in the CSV schema plus the hidden
/// states over each retained panel grid.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub dataset: Dataset,
    /// [vole][disease][local t], aligned with the panels that
    /// `data::build_panels` produces (tags sort lexicographically).
    pub truth: Vec<TruthPanel>,
}

#[derive(Debug, Clone)]
pub struct TruthPanel {
    pub tag: String,
    pub first_lm: u32,
    /// 0-based hidden states, [disease][local t].
    pub states: Vec<Vec<usize>>,
}

/// Simulator bound to a model and true parameter values.
pub struct Simulator<'a> {
    pub model: &'a ModelSpec,
    pub beta: &'a [Vec<f64>],
    pub pi: &'a [Vec<f64>],
    pub config: &'a SimConfig,
}

const STREAM_SKELETON: u64 = 0x51;
const STREAM_STATES: u64 = 0x52;

impl<'a> Simulator<'a> {
    pub fn new(
        model: &'a ModelSpec,
        beta: &'a [Vec<f64>],
        pi: &'a [Vec<f64>],
        config: &'a SimConfig,
    ) -> Result<Self> {
        config.validate(model.n_diseases())?;
        for (d, b) in beta.iter().enumerate() {
            if b.len() != model.layout(d).len() {
                return Err(Error::DimensionMismatch {
                    what: "true coefficient vector",
                    expected: model.layout(d).len(),
                    got: b.len(),
                });
            }
        }
        for (d, p) in pi.iter().enumerate() {
            let s = model.diseases()[d].n_states();
            if p.len() != s {
                return Err(Error::DimensionMismatch {
                    what: "true initial distribution",
                    expected: s,
                    got: p.len(),
                });
            }
            if p.iter().any(|&v| v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("initial distribution must sum to one".into()));
            }
        }
        Ok(Self {
            model,
            beta,
            pi,
            config,
        })
    }

    fn skeleton_rng(&self, vole: u64) -> ChaCha8Rng {
        substream(self.config.seed, STREAM_SKELETON, 0, vole)
    }

    fn states_rng(&self, vole: u64) -> ChaCha8Rng {
        substream(self.config.seed, STREAM_STATES, 0, vole)
    }

    /// Draws demographics and observation masks for every vole.
    pub fn skeletons(&self) -> Vec<VoleSkeleton> {
        let cfg = self.config;
        let digits = cfg.n_voles.to_string().len();
        (0..cfg.n_voles)
            .map(|v| {
                let mut rng = self.skeleton_rng(v as u64);
                let entry_lm = rng.random_range(1..=cfg.window);
                let mut months = 1usize;
                while entry_lm + months as u32 <= cfg.window
                    && rng.random::<f64>() >= cfg.exit_prob
                {
                    months += 1;
                }
                let mut weight = f64::from(rng.random_range(28..=60)) * 0.5; // 14..30 g
                let step = Normal::new(0.3, 0.8).unwrap();
                let mut weights = Vec::with_capacity(months);
                for _ in 0..months {
                    weights.push(weight.max(5.0));
                    weight = (weight + step.sample(&mut rng)).max(5.0);
                    weight = (weight * 2.0).round() / 2.0;
                }
                let captured: Vec<bool> = (0..months)
                    .map(|m| {
                        cfg.capture.is_session(entry_lm + m as u32)
                            && rng.random::<f64>() < cfg.capture.capture_probability()
                    })
                    .collect();
                let weight_recorded = (0..months)
                    .map(|_| rng.random::<f64>() >= cfg.weight_missing_prob)
                    .collect();
                let ascertained = cfg
                    .ascertainment_failure
                    .iter()
                    .map(|&fail| (0..months).map(|_| rng.random::<f64>() >= fail).collect())
                    .collect();
                VoleSkeleton {
                    tag: format!("v{v:0digits$}"),
                    site: rng.random_range(1..=4),
                    male: rng.random(),
                    entry_lm,
                    weights,
                    captured,
                    weight_recorded,
                    ascertained,
                }
            })
            .collect()
    }

    /// Draws every chain over the vole's lifetime. All chains step
    /// simultaneously: the states at month m+1 are conditionally independent
    /// given the states of all chains at month m.
    pub fn draw_states<R: Rng + ?Sized>(
        &self,
        skeleton: &VoleSkeleton,
        rng: &mut R,
    ) -> Result<Vec<Vec<usize>>> {
        let d_count = self.model.n_diseases();
        let months = skeleton.months();
        let mut states: Vec<Vec<usize>> = (0..d_count)
            .map(|d| {
                let mut path = Vec::with_capacity(months);
                path.push(sample_categorical(&self.pi[d], rng));
                path
            })
            .collect();
        let mut current: Vec<usize> = states.iter().map(|s| s[0]).collect();
        for m in 0..months - 1 {
            let rec = CovariateRecord::new(
                f64::from(skeleton.entry_lm + m as u32),
                Some(skeleton.weights[m]),
                skeleton.male,
                skeleton.site,
            );
            let mut next = vec![0usize; d_count];
            for d in 0..d_count {
                let z = self.model.build_design_vector(d, &rec, &current)?;
                let spec = &self.model.diseases()[d];
                let matrix =
                    crate::design::transition_matrix(spec, self.model.layout(d), &self.beta[d], &z)?;
                let s = spec.n_states();
                let row = &matrix[current[d] * s..(current[d] + 1) * s];
                next[d] = sample_categorical(row, rng);
            }
            for (d, &n) in next.iter().enumerate() {
                states[d].push(n);
                current[d] = n;
            }
        }
        Ok(states)
    }

    /// Capture records for one vole given its hidden states; empty when the
    /// vole was never captured.
    pub fn records_for(
        &self,
        skeleton: &VoleSkeleton,
        states: &[Vec<usize>],
    ) -> Vec<CaptureRecord> {
        let mut records = Vec::new();
        for m in 0..skeleton.months() {
            if !skeleton.captured[m] {
                continue;
            }
            let observations = (0..self.model.n_diseases())
                .map(|d| {
                    if skeleton.ascertained[d][m] {
                        self.model.diseases()[d].state_symbol(states[d][m])
                    } else {
                        ObservationSymbol::Missing
                    }
                })
                .collect();
            records.push(CaptureRecord {
                tag: skeleton.tag.clone(),
                site: skeleton.site,
                male: skeleton.male,
                lm: skeleton.entry_lm + m as u32,
                weight: skeleton.weight_recorded[m].then_some(skeleton.weights[m]),
                observations,
            });
        }
        records
    }

    /// Runs the whole simulation: every vole's chains are drawn from a
    /// per-vole substream of the master seed.
    pub fn run(&self) -> Result<SimOutput> {
        let skeletons = self.skeletons();
        let mut records = Vec::new();
        let mut truth = Vec::new();
        for (v, skeleton) in skeletons.iter().enumerate() {
            let mut rng = self.states_rng(v as u64);
            let states = self.draw_states(skeleton, &mut rng)?;
            records.extend(self.records_for(skeleton, &states));
            if let Some((first, last)) = skeleton.capture_span() {
                truth.push(TruthPanel {
                    tag: skeleton.tag.clone(),
                    first_lm: skeleton.entry_lm + first as u32,
                    states: states
                        .iter()
                        .map(|path| path[first..=last].to_vec())
                        .collect(),
                });
            }
        }
        // Panels sort by tag downstream; keep the truth aligned.
        truth.sort_by(|a, b| a.tag.cmp(&b.tag));
        let dataset = Dataset {
            diseases: self
                .model
                .diseases()
                .iter()
                .map(|d| d.name().to_string())
                .collect(),
            records,
        };
        Ok(SimOutput { dataset, truth })
    }
}

/// Builds the panel the data pipeline would produce for one simulated vole,
/// together with its grid-aligned hidden states. `None` when the vole was
/// never captured.
pub fn panel_from_skeleton(
    model: &ModelSpec,
    skeleton: &VoleSkeleton,
    states: &[Vec<usize>],
) -> Option<(VolePanel, Vec<Vec<usize>>)> {
    let (first, last) = skeleton.capture_span()?;
    let t_len = last - first + 1;
    let observations = (0..model.n_diseases())
        .map(|d| {
            (0..t_len)
                .map(|t| {
                    let m = first + t;
                    if skeleton.captured[m] && skeleton.ascertained[d][m] {
                        model.diseases()[d].state_symbol(states[d][m])
                    } else {
                        ObservationSymbol::Missing
                    }
                })
                .collect()
        })
        .collect();
    let covariates = (0..t_len)
        .map(|t| {
            let m = first + t;
            let weight = (skeleton.captured[m] && skeleton.weight_recorded[m])
                .then_some(skeleton.weights[m]);
            CovariateRecord::new(
                f64::from(skeleton.entry_lm + m as u32),
                weight,
                skeleton.male,
                skeleton.site,
            )
        })
        .collect();
    let panel = VolePanel {
        tag: skeleton.tag.clone(),
        site: skeleton.site,
        male: skeleton.male,
        first_lm: skeleton.entry_lm + first as u32,
        observations,
        captured: skeleton.captured[first..=last].to_vec(),
        covariates,
    };
    let grid_states = states.iter().map(|p| p[first..=last].to_vec()).collect();
    Some((panel, grid_states))
}

/// Writes the ground-truth hidden states as `tag,lm,disease,state` with
/// 1-based states.
pub fn write_truth(model: &ModelSpec, truth: &[TruthPanel], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "tag,lm,disease,state")?;
    for panel in truth {
        for (d, states) in panel.states.iter().enumerate() {
            let name = self_name(model, d);
            for (t, &state) in states.iter().enumerate() {
                writeln!(out, "{},{},{},{}", panel.tag, panel.first_lm + t as u32, name, state + 1)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn self_name(model: &ModelSpec, d: usize) -> &str {
    model.diseases()[d].name()
}

fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
