//! Covariate columns, design vectors, parameter layouts and the logistic
//! transition matrices they induce.
//!
//! A disease's design vector is the deterministic covariate part followed by
//! one indicator block per other disease in the model, with indicators for
//! that disease's non-baseline states (state 1 is always the baseline, so an
//! all-zero block means "state 1").

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::disease::{DiseaseKind, DiseaseSpec};

/// Lower bound applied to link probabilities before logs; the upper bound is
/// `1 - 1e-16`.
pub const PROB_FLOOR: f64 = 1e-300;
pub const PROB_CEIL: f64 = 1.0 - 1e-16;

/// Numerically stable inverse logit, clamped so downstream logs are finite.
#[inline]
pub fn stable_expit(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, PROB_CEIL)
}

/// One deterministic design column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateColumn {
    /// Lunar month as a continuous trend.
    Lm,
    Sin,
    Cos,
    /// Indicator for male.
    Sex,
    Weight,
    /// Site factor indicator, site 1 is the baseline; level in 2..=4.
    Site(u8),
    SexSin,
    SexCos,
    /// Site-specific lunar-month trend, level in 2..=4.
    SiteLm(u8),
}

impl CovariateColumn {
    pub fn name(self) -> String {
        match self {
            Self::Lm => "lm".into(),
            Self::Sin => "sin".into(),
            Self::Cos => "cos".into(),
            Self::Sex => "sex".into(),
            Self::Weight => "weight".into(),
            Self::Site(l) => format!("site{l}"),
            Self::SexSin => "sex_sin".into(),
            Self::SexCos => "sex_cos".into(),
            Self::SiteLm(l) => format!("site{l}_lm"),
        }
    }

    pub fn value(self, rec: &CovariateRecord) -> Result<f64> {
        let male = f64::from(rec.male);
        Ok(match self {
            Self::Lm => rec.lm,
            Self::Sin => rec.sin,
            Self::Cos => rec.cos,
            Self::Sex => male,
            Self::Weight => rec
                .weight
                .ok_or_else(|| Error::MissingCovariate("weight".into()))?,
            Self::Site(l) => f64::from(rec.site == l),
            Self::SexSin => male * rec.sin,
            Self::SexCos => male * rec.cos,
            Self::SiteLm(l) => f64::from(rec.site == l) * rec.lm,
        })
    }

    /// Expands configuration tokens; `site` and `site_lm` expand to the three
    /// non-baseline indicator columns.
    pub fn parse_list<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for tok in tokens {
            match tok.as_ref() {
                "lm" => out.push(Self::Lm),
                "sin" => out.push(Self::Sin),
                "cos" => out.push(Self::Cos),
                "sex" => out.push(Self::Sex),
                "weight" => out.push(Self::Weight),
                "sex_sin" => out.push(Self::SexSin),
                "sex_cos" => out.push(Self::SexCos),
                "site" => out.extend([Self::Site(2), Self::Site(3), Self::Site(4)]),
                "site_lm" => out.extend([Self::SiteLm(2), Self::SiteLm(3), Self::SiteLm(4)]),
                "site2" => out.push(Self::Site(2)),
                "site3" => out.push(Self::Site(3)),
                "site4" => out.push(Self::Site(4)),
                "site2_lm" => out.push(Self::SiteLm(2)),
                "site3_lm" => out.push(Self::SiteLm(3)),
                "site4_lm" => out.push(Self::SiteLm(4)),
                other => {
                    return Err(Error::Config(format!("unknown covariate column `{other}`")))
                }
            }
        }
        Ok(out)
    }
}

/// Default deterministic covariates. All diseases get the trend, the
/// seasonal cycle, sex, weight and the site factor; cowpox gets a different
/// lunar-month trend per site, every other disease a different seasonal
/// cycle per sex.
pub fn default_columns(kind: DiseaseKind) -> Vec<CovariateColumn> {
    use CovariateColumn::{Cos, Lm, Sex, SexCos, SexSin, Sin, Site, SiteLm, Weight};
    let mut cols = vec![
        Lm,
        Sin,
        Cos,
        Sex,
        Weight,
        Site(2),
        Site(3),
        Site(4),
    ];
    if kind == DiseaseKind::Cowpox {
        cols.extend([SiteLm(2), SiteLm(3), SiteLm(4)]);
    } else {
        cols.extend([SexSin, SexCos]);
    }
    cols
}

/// Per-time covariate values for one vole. `sin`/`cos` are derived from the
/// lunar month with a 13-month period; `weight` may be missing until
/// imputation has run.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRecord {
    pub lm: f64,
    pub sin: f64,
    pub cos: f64,
    pub weight: Option<f64>,
    pub male: bool,
    pub site: u8,
}

impl CovariateRecord {
    pub fn new(lm: f64, weight: Option<f64>, male: bool, site: u8) -> Self {
        let angle = 2.0 * std::f64::consts::PI * lm / 13.0;
        Self {
            lm,
            sin: angle.sin(),
            cos: angle.cos(),
            weight,
            male,
            site,
        }
    }
}

/// The assembled design vector: deterministic columns then the other-disease
/// indicator blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignVector(pub Vec<f64>);

/// Named layout of one disease's flat coefficient vector: intercepts (one
/// per link cell) followed by one slope vector per slope group, each spanning
/// the full design vector.
#[derive(Debug, Clone)]
pub struct ParameterLayout {
    disease: String,
    n_intercepts: usize,
    n_groups: usize,
    design_dim: usize,
    det_dim: usize,
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl ParameterLayout {
    fn new(spec: &DiseaseSpec, column_names: &[String], det_dim: usize) -> Self {
        let mut names = Vec::new();
        for i in 0..spec.n_intercepts() {
            names.push(spec.intercept_name(i));
        }
        for group in spec.slope_groups() {
            for col in column_names {
                names.push(format!("{group}.{col}"));
            }
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            disease: spec.name().to_string(),
            n_intercepts: spec.n_intercepts(),
            n_groups: spec.n_groups(),
            design_dim: column_names.len(),
            det_dim,
            names,
            index,
        }
    }

    pub fn disease(&self) -> &str {
        &self.disease
    }

    /// Total coefficient count: intercepts + groups x design columns.
    pub fn len(&self) -> usize {
        self.n_intercepts + self.n_groups * self.design_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_intercepts(&self) -> usize {
        self.n_intercepts
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    /// Design-vector length (deterministic plus indicator columns).
    pub fn design_dim(&self) -> usize {
        self.design_dim
    }

    /// Number of deterministic design columns; indicator columns follow.
    pub fn det_dim(&self) -> usize {
        self.det_dim
    }

    pub fn intercept_index(&self, intercept: usize) -> usize {
        intercept
    }

    pub fn slope_index(&self, group: usize, column: usize) -> usize {
        self.n_intercepts + group * self.design_dim + column
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Named view of a flat vector.
    pub fn unpack<'a>(&'a self, beta: &'a [f64]) -> Result<Vec<(&'a str, f64)>> {
        if beta.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "coefficient vector",
                expected: self.len(),
                got: beta.len(),
            });
        }
        Ok(self
            .names
            .iter()
            .map(String::as_str)
            .zip(beta.iter().copied())
            .collect())
    }

    /// Inverse of [`Self::unpack`]: every coefficient must be named exactly
    /// once.
    pub fn pack(&self, named: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        if named.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "named coefficients",
                expected: self.len(),
                got: named.len(),
            });
        }
        self.names
            .iter()
            .map(|n| {
                named
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("missing coefficient `{n}`")))
            })
            .collect()
    }

    /// Builds a flat vector from a possibly partial name map; unnamed
    /// coefficients are zero. Unknown names are rejected.
    pub fn from_sparse(&self, named: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        let mut beta = vec![0.0; self.len()];
        for (name, value) in named {
            let idx = self
                .index_of(name)
                .ok_or_else(|| Error::Config(format!(
                    "unknown coefficient `{name}` for disease `{}`",
                    self.disease
                )))?;
            beta[idx] = *value;
        }
        Ok(beta)
    }

    pub fn get(&self, beta: &[f64], name: &str) -> Option<f64> {
        self.index_of(name).map(|i| beta[i])
    }
}

/// The full coupled model: an ordered disease registry plus per-disease
/// covariate choices. The order fixes trace columns and indicator blocks.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    diseases: Vec<DiseaseSpec>,
    columns: Vec<Vec<CovariateColumn>>,
    layouts: Vec<ParameterLayout>,
    /// [d][e]: design-column offset of disease e's indicator block inside
    /// d's design vector (unused for e == d).
    indicator_offsets: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(diseases: Vec<DiseaseSpec>, columns: Vec<Vec<CovariateColumn>>) -> Result<Self> {
        if diseases.is_empty() {
            return Err(Error::InvalidSpec("model needs at least one disease".into()));
        }
        if columns.len() != diseases.len() {
            return Err(Error::DimensionMismatch {
                what: "per-disease covariate lists",
                expected: diseases.len(),
                got: columns.len(),
            });
        }
        for (i, d) in diseases.iter().enumerate() {
            if diseases[..i].iter().any(|e| e.name() == d.name()) {
                return Err(Error::InvalidSpec(format!("duplicate disease name `{}`", d.name())));
            }
        }

        let mut layouts = Vec::with_capacity(diseases.len());
        let mut indicator_offsets = Vec::with_capacity(diseases.len());
        for (d, spec) in diseases.iter().enumerate() {
            let mut names: Vec<String> = columns[d].iter().map(|c| c.name()).collect();
            let det_dim = names.len();
            let mut offsets = vec![usize::MAX; diseases.len()];
            for (e, other) in diseases.iter().enumerate() {
                if e == d {
                    continue;
                }
                offsets[e] = names.len();
                for state in 2..=other.n_states() {
                    names.push(format!("{}{}", other.name(), state));
                }
            }
            layouts.push(ParameterLayout::new(spec, &names, det_dim));
            indicator_offsets.push(offsets);
        }
        Ok(Self {
            diseases,
            columns,
            layouts,
            indicator_offsets,
        })
    }

    /// Model with the per-kind default covariate sets.
    pub fn with_default_columns(diseases: Vec<DiseaseSpec>) -> Result<Self> {
        let columns = diseases.iter().map(|d| default_columns(d.kind())).collect();
        Self::new(diseases, columns)
    }

    /// The six-disease model of the study.
    pub fn default_six() -> Self {
        Self::with_default_columns(crate::disease::default_registry())
            .expect("default registry is valid")
    }

    pub fn diseases(&self) -> &[DiseaseSpec] {
        &self.diseases
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    pub fn columns(&self, d: usize) -> &[CovariateColumn] {
        &self.columns[d]
    }

    pub fn layout(&self, d: usize) -> &ParameterLayout {
        &self.layouts[d]
    }

    pub fn find_disease(&self, name: &str) -> Option<usize> {
        self.diseases.iter().position(|d| d.name() == name)
    }

    /// Offset of disease e's indicator block inside d's design vector.
    pub fn indicator_offset(&self, d: usize, e: usize) -> usize {
        self.indicator_offsets[d][e]
    }

    /// Sum of coefficient counts over all diseases.
    pub fn total_parameters(&self) -> usize {
        self.layouts.iter().map(ParameterLayout::len).sum()
    }

    /// Size of the single-chain state space obtained by crossing all
    /// diseases.
    pub fn extended_state_space_size(&self) -> usize {
        self.diseases.iter().map(DiseaseSpec::n_states).product()
    }

    /// Dense per-step forward-backward cost when each chain is filtered
    /// separately: the sum of squared state-space sizes.
    pub fn per_sweep_step_cost(&self) -> usize {
        self.diseases.iter().map(DiseaseSpec::dense_step_cost).sum()
    }

    /// Assembles the design vector for disease `d` from a complete covariate
    /// record and the other diseases' current states (0-based).
    pub fn build_design_vector(
        &self,
        d: usize,
        rec: &CovariateRecord,
        other_states: &[usize],
    ) -> Result<DesignVector> {
        if other_states.len() != self.n_diseases() {
            return Err(Error::DimensionMismatch {
                what: "other-disease states",
                expected: self.n_diseases(),
                got: other_states.len(),
            });
        }
        let layout = &self.layouts[d];
        let mut z = vec![0.0; layout.design_dim()];
        for (i, col) in self.columns[d].iter().enumerate() {
            z[i] = col.value(rec)?;
        }
        for (e, other) in self.diseases.iter().enumerate() {
            if e == d {
                continue;
            }
            let state = other_states[e];
            if state >= other.n_states() {
                return Err(Error::DimensionMismatch {
                    what: "other-disease state index",
                    expected: other.n_states(),
                    got: state,
                });
            }
            if state > 0 {
                z[self.indicator_offsets[d][e] + state - 1] = 1.0;
            }
        }
        Ok(DesignVector(z))
    }
}

/// Fills one flat S x S transition matrix given the intercepts at the front
/// of `beta` and the per-group linear predictors (slope dot products).
/// This is the single assembly route shared by the public matrix builder and
/// the sampler's factored hot path.
pub(crate) fn fill_step_from_dots(
    spec: &DiseaseSpec,
    beta: &[f64],
    group_dots: &[f64],
    out: &mut [f64],
) {
    out.fill(0.0);
    let s = spec.n_states();
    for &(row, col, v) in spec.fixed_cells() {
        out[row * s + col] = v;
    }
    for link in spec.links() {
        let p = stable_expit(beta[link.intercept] + group_dots[link.group]);
        out[link.row * s + link.col] = p;
        out[link.row * s + link.complement_col] = 1.0 - p;
    }
}

/// Row-stochastic transition matrix for one step: every link cell is the
/// inverse logit of its intercept plus the design-slope product, complements
/// make rows sum to one exactly, structural zeros stay exactly zero.
pub fn transition_matrix(
    spec: &DiseaseSpec,
    layout: &ParameterLayout,
    beta: &[f64],
    z: &DesignVector,
) -> Result<Vec<f64>> {
    if beta.len() != layout.len() {
        return Err(Error::DimensionMismatch {
            what: "coefficient vector",
            expected: layout.len(),
            got: beta.len(),
        });
    }
    if z.0.len() != layout.design_dim() {
        return Err(Error::DimensionMismatch {
            what: "design vector",
            expected: layout.design_dim(),
            got: z.0.len(),
        });
    }
    let mut dots = vec![0.0; layout.n_groups()];
    for (g, dot) in dots.iter_mut().enumerate() {
        *dot = z
            .0
            .iter()
            .enumerate()
            .map(|(c, zv)| zv * beta[layout.slope_index(g, c)])
            .sum();
    }
    let s = spec.n_states();
    let mut out = vec![0.0; s * s];
    fill_step_from_dots(spec, beta, &dots, &mut out);
    Ok(out)
}
