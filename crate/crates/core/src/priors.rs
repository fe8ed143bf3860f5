//! Gaussian priors on the regression coefficient blocks and Dirichlet priors
//! on the initial state distributions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::design::ModelSpec;
use crate::error::{Error, Result};

/// Multivariate Gaussian prior for one disease's coefficient block.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                what: "prior covariance",
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::BadPriorFile("covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            chol,
            log_det,
        })
    }

    /// Mean zero, diagonal variance nine: the vague regime.
    pub fn vague(dim: usize) -> Self {
        Self::new(vec![0.0; dim], DMatrix::identity(dim, dim) * 9.0)
            .expect("diagonal covariance is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Full multivariate normal log-density, normalizing constant included.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let k = self.dim();
        if x.len() != k {
            return Err(Error::DimensionMismatch {
                what: "prior evaluation point",
                expected: k,
                got: x.len(),
            });
        }
        let diff = DVector::from_column_slice(x) - &self.mean;
        let solved = self.chol.solve(&diff);
        let quad = diff.dot(&solved);
        Ok(-0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + quad))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        (&self.mean + self.chol.l() * z).as_slice().to_vec()
    }
}

/// Dirichlet prior concentrations for one disease's initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletPrior(pub Vec<f64>);

impl DirichletPrior {
    pub fn flat(dim: usize, alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::Config("dirichlet concentration must be positive".into()));
        }
        Ok(Self(vec![alpha; dim]))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Draws from Dirichlet(alpha) via normalized independent Gamma draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let mut draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            for d in &mut draws {
                *d /= total;
            }
            return draws;
        }
        // All-zero gamma draws can occur for tiny concentrations; redraw.
    }
}

/// Conjugate update: a draw from Dirichlet(alpha + initial-state counts).
pub fn sample_initial_distribution<R: Rng + ?Sized>(
    counts: &[u64],
    prior: &DirichletPrior,
    rng: &mut R,
) -> Vec<f64> {
    debug_assert_eq!(counts.len(), prior.dim());
    let posterior: Vec<f64> = prior
        .0
        .iter()
        .zip(counts)
        .map(|(&a, &c)| a + c as f64)
        .collect();
    sample_dirichlet(&posterior, rng)
}

/// Which Gaussian prior regime to build.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorRegime {
    /// Mean zero, diagonal variance nine for every coefficient.
    Vague,
    /// Externally estimated means and covariance blocks, inflated by nine;
    /// unmatched coefficients fall back to the vague values.
    Informed { file: PathBuf },
}

#[derive(Debug, Clone)]
pub struct PriorConfig {
    pub regime: PriorRegime,
    pub dirichlet_alpha: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            regime: PriorRegime::Vague,
            dirichlet_alpha: 1.0,
        }
    }
}

/// One row of the prior file.
#[derive(Debug, Clone)]
pub struct PriorFileEntry {
    pub disease: String,
    pub coefficient: String,
    pub mean: f64,
    /// Scalar variance, exclusive with `block`.
    pub variance: Option<f64>,
    /// Name of a dense covariance block file plus this coefficient's index
    /// inside it.
    pub block: Option<(String, usize)>,
}

/// Reads the informed-prior CSV: header
/// `disease,coefficient,mean,variance,block,block_index`, where each row
/// carries either a variance or a block reference.
pub fn load_prior_file(path: &Path) -> Result<Vec<PriorFileEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::BadPriorFile(format!("{}: {e}", path.display())))?;
    let expect = ["disease", "coefficient", "mean", "variance", "block", "block_index"];
    let header = reader
        .headers()
        .map_err(|e| Error::BadPriorFile(e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != expect {
        return Err(Error::BadPriorFile(format!(
            "expected header {}, got {}",
            expect.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::BadPriorFile(format!("row {}: {e}", i + 2)))?;
        let field = |j: usize| row.get(j).unwrap_or("").to_string();
        let mean: f64 = field(2)
            .parse()
            .map_err(|_| Error::BadPriorFile(format!("row {}: bad mean", i + 2)))?;
        let variance = if field(3).is_empty() {
            None
        } else {
            let v: f64 = field(3)
                .parse()
                .map_err(|_| Error::BadPriorFile(format!("row {}: bad variance", i + 2)))?;
            if v <= 0.0 {
                return Err(Error::BadPriorFile(format!("row {}: variance must be positive", i + 2)));
            }
            Some(v)
        };
        let block = if field(4).is_empty() {
            None
        } else {
            let idx: usize = field(5)
                .parse()
                .map_err(|_| Error::BadPriorFile(format!("row {}: bad block_index", i + 2)))?;
            Some((field(4), idx))
        };
        if variance.is_some() == block.is_some() {
            return Err(Error::BadPriorFile(format!(
                "row {}: exactly one of variance or block must be given",
                i + 2
            )));
        }
        entries.push(PriorFileEntry {
            disease: field(0),
            coefficient: field(1),
            mean,
            variance,
            block,
        });
    }
    Ok(entries)
}

fn load_block_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::BadPriorFile(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::BadPriorFile(format!("block row {}: {e}", i + 1)))?;
        let vals: Result<Vec<f64>> = row
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::BadPriorFile(format!("block row {}: bad value `{v}`", i + 1)))
            })
            .collect();
        rows.push(vals?);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::BadPriorFile(format!(
            "covariance block {} is not square",
            path.display()
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Builds the per-disease Gaussian and Dirichlet priors for a model.
///
/// The informed regime reads coefficient means plus scalar variances or
/// dense covariance blocks, multiplies every supplied (co)variance by nine,
/// and leaves unmatched coefficients at the vague mean 0 / variance 9.
/// Covariance across the matched/unmatched boundary is zero.
pub fn build_priors(
    model: &ModelSpec,
    config: &PriorConfig,
) -> Result<(Vec<GaussianPrior>, Vec<DirichletPrior>)> {
    let dirichlets = model
        .diseases()
        .iter()
        .map(|d| DirichletPrior::flat(d.n_states(), config.dirichlet_alpha))
        .collect::<Result<Vec<_>>>()?;

    let gaussians = match &config.regime {
        PriorRegime::Vague => model
            .diseases()
            .iter()
            .enumerate()
            .map(|(d, _)| GaussianPrior::vague(model.layout(d).len()))
            .collect(),
        PriorRegime::Informed { file } => {
            let entries = load_prior_file(file)?;
            let dir = file.parent().unwrap_or_else(|| Path::new("."));
            informed_priors(model, &entries, dir)?
        }
    };
    Ok((gaussians, dirichlets))
}

/// Assembles the informed Gaussian priors from parsed entries; block files
/// are resolved relative to `block_dir`.
pub fn informed_priors(
    model: &ModelSpec,
    entries: &[PriorFileEntry],
    block_dir: &Path,
) -> Result<Vec<GaussianPrior>> {
    let mut blocks: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();
    let mut means: Vec<Vec<f64>> = (0..model.n_diseases())
        .map(|d| vec![0.0; model.layout(d).len()])
        .collect();
    let mut covs: Vec<DMatrix<f64>> = (0..model.n_diseases())
        .map(|d| DMatrix::identity(model.layout(d).len(), model.layout(d).len()) * 9.0)
        .collect();
    // Collect block members per (disease, block name) so cross-covariances
    // inside a block are retained.
    let mut members: BTreeMap<(usize, String), Vec<(usize, usize)>> = BTreeMap::new();

    for entry in entries {
        let d = model.find_disease(&entry.disease).ok_or_else(|| {
            Error::BadPriorFile(format!("unknown disease `{}`", entry.disease))
        })?;
        let layout = model.layout(d);
        let idx = layout.index_of(&entry.coefficient).ok_or_else(|| {
            Error::BadPriorFile(format!(
                "unknown coefficient `{}` for disease `{}`",
                entry.coefficient, entry.disease
            ))
        })?;
        means[d][idx] = entry.mean;
        if let Some(v) = entry.variance {
            covs[d][(idx, idx)] = 9.0 * v;
        }
        if let Some((name, block_idx)) = &entry.block {
            if !blocks.contains_key(name) {
                blocks.insert(name.clone(), load_block_matrix(&block_dir.join(name))?);
            }
            let block = &blocks[name];
            if *block_idx >= block.nrows() {
                return Err(Error::BadPriorFile(format!(
                    "block index {block_idx} out of range for `{name}`"
                )));
            }
            members
                .entry((d, name.clone()))
                .or_default()
                .push((idx, *block_idx));
        }
    }

    for ((d, name), pairs) in &members {
        let block = &blocks[name];
        for &(i, bi) in pairs {
            for &(j, bj) in pairs {
                covs[*d][(i, j)] = 9.0 * block[(bi, bj)];
            }
        }
    }

    means
        .into_iter()
        .zip(covs)
        .map(|(m, c)| GaussianPrior::new(m, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::ModelSpec;
    use crate::disease::{DiseaseKind, DiseaseSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn log_density_at_mean_is_normalizing_constant() {
        let k = 3;
        let prior = GaussianPrior::vague(k);
        let got = prior.log_density(&[0.0; 3]).unwrap();
        let expected = -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + (9.0f64.ln() * 3.0));
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn univariate_log_density_matches_hand_value() {
        let prior = GaussianPrior::new(vec![0.0], DMatrix::from_element(1, 1, 9.0)).unwrap();
        let got = prior.log_density(&[3.0]).unwrap();
        let expected = -0.5 * (18.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn density_ratio_is_quadratic_form_difference() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let prior = GaussianPrior::new(vec![1.0, -1.0], cov.clone()).unwrap();
        let a = [0.3, 0.4];
        let b = [-1.2, 2.0];
        let log_ratio = prior.log_density(&a).unwrap() - prior.log_density(&b).unwrap();
        let inv = cov.try_inverse().unwrap();
        let quad = |x: &[f64]| {
            let d = DVector::from_column_slice(x) - DVector::from_column_slice(&[1.0, -1.0]);
            (d.transpose() * &inv * d)[(0, 0)]
        };
        assert!((log_ratio - 0.5 * (quad(&b) - quad(&a))).abs() < 1e-12);
    }

    #[test]
    fn non_spd_covariance_is_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianPrior::new(vec![0.0, 0.0], cov).is_err());
    }

    #[test]
    fn dirichlet_conjugate_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let prior = DirichletPrior(vec![1.0; 4]);
        let counts = [10u64, 0, 5, 2];
        let n = 100_000usize;
        let mut sums = [0.0f64; 4];
        for _ in 0..n {
            let draw = sample_initial_distribution(&counts, &prior, &mut rng);
            assert!((draw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (s, v) in sums.iter_mut().zip(&draw) {
                *s += v;
            }
        }
        let alpha = [11.0, 1.0, 6.0, 3.0];
        let a0: f64 = alpha.iter().sum();
        for i in 0..4 {
            let mean = alpha[i] / a0;
            let var = alpha[i] * (a0 - alpha[i]) / (a0 * a0 * (a0 + 1.0));
            let sigma = (var / n as f64).sqrt();
            assert!(
                (sums[i] / n as f64 - mean).abs() < 3.0 * sigma,
                "component {i}: {} vs {mean}",
                sums[i] / n as f64
            );
        }
    }

    fn toy_model() -> ModelSpec {
        ModelSpec::new(
            vec![DiseaseSpec::builtin(DiseaseKind::Anaplasma)],
            vec![vec![]],
        )
        .unwrap()
    }

    #[test]
    fn vague_regime_shapes() {
        let model = toy_model();
        let (gaussians, dirichlets) = build_priors(&model, &PriorConfig::default()).unwrap();
        assert_eq!(gaussians[0].dim(), 2);
        assert_eq!(gaussians[0].covariance()[(0, 0)], 9.0);
        assert_eq!(gaussians[0].covariance()[(0, 1)], 0.0);
        assert_eq!(dirichlets[0].0, vec![1.0, 1.0]);
    }

    #[test]
    fn sensitivity_regime_uses_alpha_two() {
        let model = toy_model();
        let config = PriorConfig {
            regime: PriorRegime::Vague,
            dirichlet_alpha: 2.0,
        };
        let (_, dirichlets) = build_priors(&model, &config).unwrap();
        assert_eq!(dirichlets[0].0, vec![2.0, 2.0]);
    }

    #[test]
    fn informed_regime_inflates_blocks_by_nine() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("blk.csv"), "0.4,0.1\n0.1,0.2\n").unwrap();
        let prior_csv = "\
disease,coefficient,mean,variance,block,block_index
anaplasma,b0_12,-2.5,,blk.csv,0
anaplasma,b0_21,0.5,,blk.csv,1
";
        let file = dir.path().join("priors.csv");
        std::fs::write(&file, prior_csv).unwrap();
        let model = toy_model();
        let config = PriorConfig {
            regime: PriorRegime::Informed { file },
            dirichlet_alpha: 1.0,
        };
        let (gaussians, _) = build_priors(&model, &config).unwrap();
        let g = &gaussians[0];
        assert_eq!(g.mean(), &[-2.5, 0.5]);
        assert!((g.covariance()[(0, 0)] - 3.6).abs() < 1e-12);
        assert!((g.covariance()[(0, 1)] - 0.9).abs() < 1e-12);
        assert!((g.covariance()[(1, 1)] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn informed_regime_rejects_unknown_names() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("priors.csv");
        std::fs::write(
            &file,
            "disease,coefficient,mean,variance,block,block_index\nanaplasma,b0_99,0,1,,\n",
        )
        .unwrap();
        let model = toy_model();
        let config = PriorConfig {
            regime: PriorRegime::Informed { file },
            dirichlet_alpha: 1.0,
        };
        assert!(matches!(
            build_priors(&model, &config),
            Err(Error::BadPriorFile(_))
        ));
    }
}
