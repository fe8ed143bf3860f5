//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them).

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use chmm::data::{build_panels, prepare_panels, MissingWeightPolicy, PanelOptions, VolePanel};
use chmm::design::{transition_matrix, CovariateColumn, CovariateRecord, ModelSpec};
use chmm::diagnostics::{
    gelman_rubin, ks_test, posterior_predictive_holdout, summarize,
    HoldoutConfig,
};
use chmm::disease::{DiseaseKind, DiseaseSpec};
use chmm::hmm::{
    backward_sample, brute_force_likelihood, brute_force_path_posterior, forward,
    ObservationSymbol, TransitionMatrixSeq,
};
use chmm::priors::{
    build_priors, sample_dirichlet, DirichletPrior, GaussianPrior, PriorConfig,
};
use chmm::sampler::{
    run_chains, rwm_step, AdaptiveProposal, Fitter, GibbsState, InitStrategy, McmcControls,
    NoObserver,
};
use chmm::simulate::{panel_from_skeleton, CaptureSchedule, SimConfig, Simulator};

fn pass(criterion: usize, detail: &str) {
    println!("PASS criterion {criterion}: {detail}");
}

fn random_record(rng: &mut ChaCha12Rng) -> CovariateRecord {
    CovariateRecord::new(
        rng.random_range(1.0..28.0),
        Some(rng.random_range(10.0..40.0)),
        rng.random(),
        rng.random_range(1..=4),
    )
}

fn random_states(model: &ModelSpec, rng: &mut ChaCha12Rng) -> Vec<usize> {
    model
        .diseases()
        .iter()
        .map(|d| rng.random_range(0..d.n_states()))
        .collect()
}

fn random_pi(n: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn random_symbol(rng: &mut ChaCha12Rng) -> ObservationSymbol {
    match rng.random_range(0..3) {
        0 => ObservationSymbol::Negative,
        1 => ObservationSymbol::Positive,
        _ => ObservationSymbol::Missing,
    }
}

/// Simulates a dataset and runs it through the standard data pipeline.
fn simulated_panels(
    model: &ModelSpec,
    beta: &[Vec<f64>],
    pi: &[Vec<f64>],
    config: &SimConfig,
) -> Vec<VolePanel> {
    let out = Simulator::new(model, beta, pi, config)
        .expect("valid simulation config")
        .run()
        .expect("simulation");
    prepare_panels(
        &out.dataset,
        PanelOptions {
            missing_weight: MissingWeightPolicy::DatasetMean,
            standardize_weight: false,
        },
    )
    .expect("panel pipeline")
}

/// Criterion 1: the forward recursion agrees with path enumeration to
/// 1e-10 in log-likelihood on randomized instances of every disease
/// structure, inside ten seconds.
#[test]
fn criterion_1_forward_matches_enumeration() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let model = ModelSpec::default_six();
    let mut checked = 0usize;
    for d in 0..model.n_diseases() {
        let spec = &model.diseases()[d];
        let layout = model.layout(d);
        let s = spec.n_states();
        for _ in 0..500 {
            let t_len = rng.random_range(1..=5);
            let beta: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut flat = Vec::with_capacity((t_len - 1) * s * s);
            for _ in 0..t_len - 1 {
                let z = model
                    .build_design_vector(d, &random_record(&mut rng), &random_states(&model, &mut rng))
                    .unwrap();
                flat.extend(transition_matrix(spec, layout, &beta, &z).unwrap());
            }
            let trans = TransitionMatrixSeq::new(s, flat).unwrap();
            assert!(trans.respects_structure(spec));
            let obs: Vec<ObservationSymbol> = (0..t_len).map(|_| random_symbol(&mut rng)).collect();
            let pi = random_pi(s, &mut rng);
            let exact = brute_force_likelihood(spec, &obs, &trans, &pi).unwrap();
            match forward(spec, &obs, &trans, &pi) {
                Ok(fwd) => {
                    assert!(
                        (fwd.log_likelihood - exact.ln()).abs() <= 1e-10,
                        "disease {d}: {} vs {}",
                        fwd.log_likelihood,
                        exact.ln()
                    );
                    checked += 1;
                }
                Err(chmm::Error::ZeroLikelihood { .. }) => {
                    assert_eq!(exact, 0.0);
                }
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "took {elapsed:.1}s");
    pass(1, &format!("{checked} instances agree to 1e-10 in {elapsed:.2}s"));
}

/// Criterion 2: backward sampling reproduces the exact path posterior of a
/// fixed three-point four-state instance within three-sigma multinomial
/// bounds over a million draws.
#[test]
fn criterion_2_backward_sampling_is_exact() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let model = ModelSpec::new(
        vec![DiseaseSpec::builtin(DiseaseKind::Bartonella)],
        vec![vec![CovariateColumn::Sin]],
    )
    .unwrap();
    let spec = &model.diseases()[0];
    let layout = model.layout(0);
    let beta: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut flat = Vec::new();
    for lm in [4.0, 5.0] {
        let z = model
            .build_design_vector(0, &CovariateRecord::new(lm, Some(20.0), true, 1), &[0])
            .unwrap();
        flat.extend(transition_matrix(spec, layout, &beta, &z).unwrap());
    }
    let trans = TransitionMatrixSeq::new(4, flat).unwrap();
    let obs = [
        ObservationSymbol::Negative,
        ObservationSymbol::Missing,
        ObservationSymbol::Positive,
    ];
    let pi = random_pi(4, &mut rng);

    let posterior = brute_force_path_posterior(spec, &obs, &trans, &pi).unwrap();
    let fwd = forward(spec, &obs, &trans, &pi).unwrap();
    let n = 1_000_000usize;
    let mut counts: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    for _ in 0..n {
        let path = backward_sample(&fwd, &trans, &mut rng).unwrap();
        *counts.entry(path.0).or_default() += 1;
    }
    let support: u64 = counts.values().sum();
    assert_eq!(support, n as u64);
    for (path, p) in &posterior {
        let observed = counts.get(path).copied().unwrap_or(0) as f64;
        let expected = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
        assert!(
            (observed - expected).abs() <= 3.0 * sigma,
            "path {path:?}: {observed} vs {expected:.1} (sigma {sigma:.1})"
        );
    }
    for path in counts.keys() {
        assert!(posterior.iter().any(|(p, _)| p == path), "impossible path drawn");
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "took {elapsed:.1}s");
    pass(
        2,
        &format!(
            "{} paths within 3 sigma over 1e6 draws in {elapsed:.1}s",
            posterior.len()
        ),
    );
}

/// Criterion 3: an all-missing panel contributes exactly zero
/// log-likelihood, and a one-disease fit on all-missing data reproduces the
/// Gaussian prior marginals (KS p > 0.01 per coordinate at 1e5 retained
/// samples).
#[test]
fn criterion_3_all_missing_recovers_the_prior() {
    // Exact-zero contribution.
    let model = ModelSpec::new(
        vec![DiseaseSpec::builtin(DiseaseKind::Anaplasma).with_name("ana")],
        vec![vec![]],
    )
    .unwrap();
    let spec = &model.diseases()[0];
    let layout = model.layout(0);
    let z = chmm::design::DesignVector(vec![]);
    let step = transition_matrix(spec, layout, &[0.3, -0.4], &z).unwrap();
    let trans = TransitionMatrixSeq::new(2, [step.clone(), step].concat()).unwrap();
    let obs = vec![ObservationSymbol::Missing; 3];
    let fwd = forward(spec, &obs, &trans, &[0.5, 0.5]).unwrap();
    assert_eq!(fwd.log_likelihood, 0.0);

    // Prior recovery through the full Gibbs machinery.
    let csv = "tag,site,sex,lm,weight,ana\nv1,1,M,3,20,x\nv1,1,M,4,20,x\nv2,2,F,5,18,x\nv2,2,F,6,18,x\n";
    let file = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(file.path(), csv).unwrap();
    let panels = build_panels(&chmm::data::load_dataset(file.path()).unwrap()).unwrap();
    let (gaussians, dirichlets) = build_priors(&model, &PriorConfig::default()).unwrap();
    let controls = McmcControls {
        chains: 1,
        iterations: 20_000 + 100_000 * 40,
        burn_in: 20_000,
        thin: 40,
        seed: 303,
        pilot: false,
        pilot_iterations: 0,
        init: InitStrategy::PriorDraw,
        threads: 1,
    };
    let run = run_chains(&model, &panels, &gaussians, &dirichlets, &controls, None, "")
        .unwrap();
    let trace = &run.traces[0];
    assert_eq!(trace.len(), 100_000);
    let prior_marginal = Normal::new(0.0, 3.0).unwrap();
    let mut p_values = Vec::new();
    for name in ["ana.b0_12", "ana.b0_21"] {
        let column = trace.column(trace.param_index(name).unwrap());
        let (_, p) = ks_test(&column, |x| prior_marginal.cdf(x));
        assert!(p > 0.01, "{name}: KS p = {p}");
        p_values.push(p);
    }
    pass(
        3,
        &format!(
            "all-missing loglik exactly 0; prior-recovery KS p = {:.3}, {:.3}",
            p_values[0], p_values[1]
        ),
    );
}

/// Criterion 4: on a known correlated 5-d Gaussian target the adaptive RWM
/// settles into the [0.22, 0.28] acceptance band over the final 50k of 200k
/// iterations and learns the target covariance to 5% relative Frobenius
/// error.
#[test]
fn criterion_4_adaptive_rwm_hits_target_acceptance() {
    let dim = 5;
    let mut cov = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            cov[(i, j)] = 0.5f64.powi((i as i32 - j as i32).abs());
        }
    }
    let inv = cov.clone().try_inverse().unwrap();
    let target = move |x: &[f64]| {
        let v = nalgebra::DVector::from_column_slice(x);
        -0.5 * (v.transpose() * &inv * &v)[(0, 0)]
    };

    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let mut beta = vec![0.0; dim];
    let mut lp = target(&beta);
    let mut proposal = AdaptiveProposal::diagonal(dim, 1.0).unwrap();
    let total = 200_000;
    let tail = 50_000;
    let mut tail_accepts = 0u64;
    for i in 0..total {
        let accepted = rwm_step(&mut beta, &mut lp, &mut proposal, &target, &mut rng);
        if i >= total - tail {
            tail_accepts += u64::from(accepted);
        }
    }
    let rate = tail_accepts as f64 / tail as f64;
    assert!(
        (0.22..=0.28).contains(&rate),
        "tail acceptance rate {rate:.3}"
    );
    let sigma_tilde = proposal.sample_covariance().unwrap();
    let err = (&sigma_tilde - &cov).norm() / cov.norm();
    assert!(err <= 0.05, "covariance error {err:.4}");
    pass(
        4,
        &format!("tail acceptance {rate:.3}, covariance error {:.1}%", err * 100.0),
    );
}

/// Criterion 5: sampled initial distributions match the analytic
/// Dirichlet(alpha + counts) moments within three sigma at 1e5 draws.
#[test]
fn criterion_5_dirichlet_conjugacy() {
    let mut rng = ChaCha12Rng::seed_from_u64(505);
    let prior = DirichletPrior(vec![1.0, 1.0, 1.0, 1.0]);
    let counts = [10u64, 0, 5, 2];
    let alpha: Vec<f64> = prior.0.iter().zip(&counts).map(|(a, &c)| a + c as f64).collect();
    let a0: f64 = alpha.iter().sum();

    let n = 100_000usize;
    let mut sum = [0.0f64; 4];
    let mut sum_sq = [0.0f64; 4];
    for _ in 0..n {
        let draw =
            chmm::priors::sample_initial_distribution(&counts, &prior, &mut rng);
        for i in 0..4 {
            sum[i] += draw[i];
            sum_sq[i] += draw[i] * draw[i];
        }
    }
    let mut max_z: f64 = 0.0;
    for i in 0..4 {
        let mean = alpha[i] / a0;
        let var = alpha[i] * (a0 - alpha[i]) / (a0 * a0 * (a0 + 1.0));
        let m2 = var + mean * mean;
        // Sample-based standard errors of the estimated moments.
        let emp_mean = sum[i] / n as f64;
        let emp_m2 = sum_sq[i] / n as f64;
        let se_mean = (var / n as f64).sqrt();
        let var_of_sq = m2 * m2; // bounded crude proxy, refined below
        let _ = var_of_sq;
        let emp_var_sq = (emp_m2 - emp_mean * emp_mean).max(1e-12);
        let se_m2 = (4.0 * mean * mean * emp_var_sq / n as f64).sqrt().max(1e-8);
        let z_mean = (emp_mean - mean) / se_mean;
        let z_m2 = (emp_m2 - m2) / se_m2;
        assert!(z_mean.abs() <= 3.0, "component {i} mean z = {z_mean:.2}");
        assert!(z_m2.abs() <= 3.0, "component {i} second-moment z = {z_m2:.2}");
        max_z = max_z.max(z_mean.abs()).max(z_m2.abs());
    }
    pass(5, &format!("all moment z-scores within 3 sigma (max {max_z:.2})"));
}

/// The two-disease toy shared by the joint-distribution and recovery
/// checks: a four-state chain plus a two-state chain, coupled both ways.
fn geweke_model() -> ModelSpec {
    ModelSpec::new(
        vec![
            DiseaseSpec::builtin(DiseaseKind::Bartonella).with_name("bart"),
            DiseaseSpec::builtin(DiseaseKind::Anaplasma).with_name("ana"),
        ],
        vec![
            vec![CovariateColumn::Sin, CovariateColumn::Cos, CovariateColumn::Sex],
            vec![CovariateColumn::Sin, CovariateColumn::Cos, CovariateColumn::Sex],
        ],
    )
    .unwrap()
}

fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let b = xs.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|i| xs[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Criterion 6: Geweke-style joint-distribution check. Simulating
/// (parameters, data) forward from the prior and by alternating Gibbs
/// sweeps with data re-simulation must give the same parameter moments
/// (all first and second moments within three sigma).
#[test]
fn criterion_6_joint_distribution_check() {
    let model = geweke_model();
    let prior_var = 0.5;
    let gaussians: Vec<GaussianPrior> = (0..2)
        .map(|d| {
            let k = model.layout(d).len();
            GaussianPrior::new(vec![0.0; k], DMatrix::identity(k, k) * prior_var).unwrap()
        })
        .collect();
    let dirichlets = vec![
        DirichletPrior(vec![1.0; 4]),
        DirichletPrior(vec![1.0; 2]),
    ];
    let sim_config = SimConfig {
        n_voles: 100,
        window: 6,
        exit_prob: 0.25,
        capture: CaptureSchedule::Uniform { p: 0.9 },
        ascertainment_failure: vec![0.05, 0.05],
        weight_missing_prob: 0.0,
        seed: 606,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(607);

    let draw_prior = |rng: &mut ChaCha12Rng| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let beta = gaussians.iter().map(|g| g.sample(rng)).collect();
        let pi = dirichlets.iter().map(|p| sample_dirichlet(&p.0, rng)).collect();
        (beta, pi)
    };
    let theta_dim: usize = (0..2).map(|d| model.layout(d).len()).sum::<usize>() + 4 + 2;
    let flatten = |beta: &[Vec<f64>], pi: &[Vec<f64>]| -> Vec<f64> {
        beta.iter().chain(pi.iter()).flatten().copied().collect()
    };

    // Marginal-conditional: iid draws of (theta, data) forward from the
    // prior and the simulator; moments of theta.
    let m_draws = 4000;
    let mut mc: Vec<Vec<f64>> = Vec::with_capacity(m_draws);
    {
        let (beta0, pi0) = draw_prior(&mut rng);
        let probe = Simulator::new(&model, &beta0, &pi0, &sim_config).unwrap();
        let skeletons = probe.skeletons();
        for _ in 0..m_draws {
            let (beta, pi) = draw_prior(&mut rng);
            let sim = Simulator::new(&model, &beta, &pi, &sim_config).unwrap();
            // Drawing the chains keeps this a full joint simulation even
            // though the recorded statistics depend on theta alone.
            let _ = sim.draw_states(&skeletons[0], &mut rng).unwrap();
            mc.push(flatten(&beta, &pi));
        }
    }

    // Successive-conditional: Gibbs sweep on (theta, x | y) alternated with
    // re-simulation of (x, y | theta) over fixed skeletons.
    let (beta0, pi0) = draw_prior(&mut rng);
    let sim0 = Simulator::new(&model, &beta0, &pi0, &sim_config).unwrap();
    let skeletons: Vec<_> = sim0
        .skeletons()
        .into_iter()
        .filter(|s| s.capture_span().is_some())
        .collect();
    let mut panels = Vec::with_capacity(skeletons.len());
    let mut grids = Vec::with_capacity(skeletons.len());
    for skel in &skeletons {
        let states = sim0.draw_states(skel, &mut rng).unwrap();
        let (panel, grid) = panel_from_skeleton(&model, skel, &states).unwrap();
        panels.push(panel);
        grids.push(grid);
    }
    let mut fitter = Fitter::new(&model, &panels, &gaussians, &dirichlets).unwrap();
    let paths_from_grids = |fitter: &Fitter, grids: &[Vec<Vec<usize>>]| -> Vec<Vec<usize>> {
        let mut paths = vec![Vec::new(); 2];
        for d in 0..2 {
            let mut flat = Vec::new();
            for grid in grids {
                flat.extend_from_slice(&grid[d]);
            }
            paths[d] = flat;
        }
        let _ = fitter;
        paths
    };
    let mut state = GibbsState {
        beta: beta0,
        pi: pi0,
        paths: paths_from_grids(&fitter, &grids),
        iteration: 0,
    };
    let mut proposals: Vec<AdaptiveProposal> = fitter
        .default_sigma0()
        .iter()
        .map(|s| AdaptiveProposal::new(s.clone()).unwrap())
        .collect();
    let mut workspaces = fitter.workspaces();

    let cycles = 30_000usize;
    let thin = 5usize;
    let mut sc: Vec<Vec<f64>> = Vec::with_capacity(cycles / thin);
    for cycle in 0..cycles {
        fitter
            .sweep(&mut state, &mut proposals, &mut workspaces, &mut rng, 909, &mut NoObserver)
            .unwrap();
        if cycle % thin == 0 {
            sc.push(flatten(&state.beta, &state.pi));
        }
        // Re-simulate (x, y) given the current parameters over the fixed
        // skeletons.
        let sim = Simulator::new(&model, &state.beta, &state.pi, &sim_config).unwrap();
        for (v, skel) in skeletons.iter().enumerate() {
            let states = sim.draw_states(skel, &mut rng).unwrap();
            let (panel, grid) = panel_from_skeleton(&model, skel, &states).unwrap();
            panels[v] = panel;
            grids[v] = grid;
        }
        fitter.data_mut().replace_observations(&panels).unwrap();
        state.paths = paths_from_grids(&fitter, &grids);
    }

    let batches = 25;
    let mut max_z: f64 = 0.0;
    for j in 0..theta_dim {
        for moment in 0..2 {
            let g = |x: f64| if moment == 0 { x } else { x * x };
            let mc_col: Vec<f64> = mc.iter().map(|r| g(r[j])).collect();
            let sc_col: Vec<f64> = sc.iter().map(|r| g(r[j])).collect();
            let mc_mean = mc_col.iter().sum::<f64>() / mc_col.len() as f64;
            let sc_mean = sc_col.iter().sum::<f64>() / sc_col.len() as f64;
            let mc_se = {
                let var = mc_col.iter().map(|x| (x - mc_mean).powi(2)).sum::<f64>()
                    / (mc_col.len() - 1) as f64;
                (var / mc_col.len() as f64).sqrt()
            };
            let sc_se = batch_means_se(&sc_col, batches);
            let z = (sc_mean - mc_mean) / (mc_se * mc_se + sc_se * sc_se).sqrt();
            assert!(
                z.abs() <= 3.0,
                "parameter {j}, moment {}: z = {z:.2} (mc {mc_mean:.4}, sc {sc_mean:.4})",
                moment + 1
            );
            max_z = max_z.max(z.abs());
        }
    }
    pass(
        6,
        &format!("{theta_dim} parameters x 2 moments within 3 sigma (max |z| = {max_z:.2})"),
    );
}

/// True parameters for the recovery study: strong coupling in both
/// directions, comparable to the largest effects the field analysis
/// reports.
struct RecoveryTruth {
    beta: Vec<Vec<f64>>,
    pi: Vec<Vec<f64>>,
    /// (column name, true value) for every coupling coefficient with
    /// magnitude at least 1.5.
    strong_couplings: Vec<(String, f64)>,
}

fn recovery_model() -> ModelSpec {
    ModelSpec::new(
        vec![
            DiseaseSpec::builtin(DiseaseKind::Bartonella).with_name("bart"),
            DiseaseSpec::builtin(DiseaseKind::Babesia).with_name("bab"),
        ],
        vec![vec![CovariateColumn::Sex], vec![CovariateColumn::Sex]],
    )
    .unwrap()
}

fn recovery_truth(model: &ModelSpec) -> RecoveryTruth {
    let named_bart: BTreeMap<String, f64> = [
        ("b0_12", -0.8),
        ("b0_24", 0.6),
        ("b0_34", 0.1),
        ("b0_42", -1.0),
        ("contract.sex", 0.3),
        ("contract.bab2", -1.77),
        ("contract.bab3", -1.77),
        ("recover.sex", -0.2),
        ("recover.bab2", 1.7),
        ("recover.bab3", 1.7),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let named_bab: BTreeMap<String, f64> = [
        ("b0_12", -1.4),
        ("contract.sex", 0.25),
        ("contract.bart2", 1.5),
        ("contract.bart3", 0.5),
        ("contract.bart4", -0.3),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let beta = vec![
        model.layout(0).from_sparse(&named_bart).unwrap(),
        model.layout(1).from_sparse(&named_bab).unwrap(),
    ];
    let pi = vec![vec![0.65, 0.1, 0.1, 0.15], vec![0.6, 0.1, 0.3]];
    let strong_couplings = vec![
        ("bart.contract.bab2".to_string(), -1.77),
        ("bart.contract.bab3".to_string(), -1.77),
        ("bart.recover.bab2".to_string(), 1.7),
        ("bart.recover.bab3".to_string(), 1.7),
        ("bab.contract.bart2".to_string(), 1.5),
    ];
    RecoveryTruth {
        beta,
        pi,
        strong_couplings,
    }
}

/// Criterion 7: parameter recovery on simulated two-disease panels with
/// strong coupling. Per seed: three chains, convergence below the 1.2
/// threshold; pooled across ten seeds: 95% intervals cover at least 85% of
/// parameters, and every strong coupling coefficient has the right sign
/// with posterior probability above 0.975.
#[test]
fn criterion_7_parameter_recovery() {
    let started = Instant::now();
    let model = recovery_model();
    let truth = recovery_truth(&model);
    let (gaussians, dirichlets) = build_priors(&model, &PriorConfig::default()).unwrap();

    // Truth lookup per trace column.
    let mut true_by_name: BTreeMap<String, f64> = BTreeMap::new();
    for (d, spec) in model.diseases().iter().enumerate() {
        for (name, value) in model.layout(d).unpack(&truth.beta[d]).unwrap() {
            true_by_name.insert(format!("{}.{name}", spec.name()), value);
        }
        for (i, &p) in truth.pi[d].iter().enumerate() {
            true_by_name.insert(format!("{}.pi{}", spec.name(), i + 1), p);
        }
    }

    let controls_template = McmcControls {
        chains: 3,
        iterations: 30_000,
        burn_in: 10_000,
        thin: 10,
        seed: 0,
        pilot: false,
        pilot_iterations: 0,
        init: InitStrategy::PriorDraw,
        threads: 3,
    };

    let mut covered = 0usize;
    let mut total_params = 0usize;
    let mut max_r_overall: f64 = 0.0;
    let mut min_sign_prob: f64 = 1.0;
    for seed in 0..10u64 {
        let sim_config = SimConfig {
            n_voles: 2000,
            window: 10,
            exit_prob: 0.25,
            capture: CaptureSchedule::Uniform { p: 0.9 },
            ascertainment_failure: vec![0.0, 0.0],
            weight_missing_prob: 0.0,
            seed: 7100 + seed,
        };
        let panels = simulated_panels(&model, &truth.beta, &truth.pi, &sim_config);
        let mut controls = controls_template.clone();
        controls.seed = 7200 + seed;
        let run = run_chains(&model, &panels, &gaussians, &dirichlets, &controls, None, "")
            .expect("fit");

        // (a) Convergence: every parameter's R below 1.2.
        let names = run.traces[0].param_names.clone();
        let mut max_r: f64 = 0.0;
        for i in 0..names.len() {
            let columns: Vec<Vec<f64>> = run.traces.iter().map(|t| t.column(i)).collect();
            let views: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
            let points = gelman_rubin(&views, 1).unwrap();
            max_r = max_r.max(points.last().unwrap().r);
        }
        assert!(max_r < 1.2, "seed {seed}: max R = {max_r:.3}");
        max_r_overall = max_r_overall.max(max_r);

        // (b) Coverage of the pooled 95% intervals.
        let pooled: Vec<Vec<f64>> = run
            .traces
            .iter()
            .flat_map(|t| t.samples.iter().cloned())
            .collect();
        let summaries = summarize(&names, &pooled, 0, &[]).unwrap();
        for s in &summaries {
            let target = true_by_name[&s.name];
            total_params += 1;
            covered += usize::from(s.q025 <= target && target <= s.q975);
        }

        // (c) Sign recovery for the strong couplings.
        for (name, value) in &truth.strong_couplings {
            let s = summaries.iter().find(|s| &s.name == name).unwrap();
            let sign_prob = if *value > 0.0 {
                s.prob_positive
            } else {
                1.0 - s.prob_positive
            };
            assert!(
                sign_prob > 0.975,
                "seed {seed}: {name} sign probability {sign_prob:.4}"
            );
            min_sign_prob = min_sign_prob.min(sign_prob);
        }
    }
    let coverage = covered as f64 / total_params as f64;
    assert!(
        coverage >= 0.85,
        "coverage {coverage:.3} ({covered}/{total_params})"
    );
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed <= 30.0 * 60.0, "took {:.1} minutes", elapsed / 60.0);
    pass(
        7,
        &format!(
            "max R {max_r_overall:.3}, coverage {coverage:.3}, min sign prob {min_sign_prob:.4}, {:.1} min",
            elapsed / 60.0
        ),
    );
}

/// Criterion 8: the posterior-predictive holdout (100 masked fully observed
/// captures, refit, Hosmer-Lemeshow per disease) is calibrated on simulator
/// output fit with the true model: p-values above 0.01 in at least nine of
/// ten seeds.
#[test]
fn criterion_8_holdout_calibration() {
    let model = geweke_model();
    let (gaussians, dirichlets) = build_priors(&model, &PriorConfig::default()).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(808);
    let mut beta: Vec<Vec<f64>> = Vec::new();
    for d in 0..2 {
        let layout = model.layout(d);
        let mut named = BTreeMap::new();
        for name in layout.names() {
            let value = if name.starts_with("b0_") {
                rng.random_range(-1.5..0.0)
            } else {
                rng.random_range(-0.8..0.8)
            };
            named.insert(name.clone(), value);
        }
        beta.push(layout.pack(&named).unwrap());
    }
    let pi = vec![vec![0.6, 0.15, 0.1, 0.15], vec![0.75, 0.25]];

    let controls = McmcControls {
        chains: 1,
        iterations: 10_000,
        burn_in: 4_000,
        thin: 10,
        seed: 0,
        pilot: false,
        pilot_iterations: 0,
        init: InitStrategy::PriorDraw,
        threads: 1,
    };

    let mut seeds_passing = 0;
    let mut worst_p: f64 = 1.0;
    for seed in 0..10u64 {
        let sim_config = SimConfig {
            n_voles: 300,
            window: 8,
            exit_prob: 0.2,
            capture: CaptureSchedule::Uniform { p: 0.75 },
            ascertainment_failure: vec![0.0, 0.0],
            weight_missing_prob: 0.0,
            seed: 8100 + seed,
        };
        let panels = simulated_panels(&model, &beta, &pi, &sim_config);
        let mut controls = controls.clone();
        controls.seed = 8200 + seed;
        let holdout = HoldoutConfig {
            n_holdout: 100,
            groups: 10,
            predictive_stride: 40,
            seed: 8300 + seed,
        };
        let report = posterior_predictive_holdout(
            &model,
            &panels,
            &gaussians,
            &dirichlets,
            &controls,
            &holdout,
        )
        .expect("holdout refit");
        assert_eq!(report.masked.len(), 100);
        let all_pass = report.calibration.iter().all(|c| c.test.p_value > 0.01);
        for c in &report.calibration {
            worst_p = worst_p.min(c.test.p_value);
        }
        seeds_passing += usize::from(all_pass);
    }
    assert!(
        seeds_passing >= 9,
        "only {seeds_passing}/10 seeds passed the calibration check"
    );
    pass(
        8,
        &format!("{seeds_passing}/10 seeds with all p-values > 0.01 (worst p = {worst_p:.3})"),
    );
}

/// Criterion 9: the documented cost arithmetic. Crossing the six default
/// chains yields a 1152-state space, while filtering them separately costs
/// the sum of squared sizes per step (verified by counting the forward
/// recursion's transition operations).
#[test]
fn criterion_9_cost_arithmetic() {
    let model = ModelSpec::default_six();
    assert_eq!(model.extended_state_space_size(), 1152);
    assert_eq!(model.per_sweep_step_cost(), 70);

    // Operation counting: one filtering step per disease touches exactly
    // size^2 transition cells.
    let mut counted = 0usize;
    for d in 0..model.n_diseases() {
        let spec = &model.diseases()[d];
        let layout = model.layout(d);
        let beta = vec![0.0; layout.len()];
        let rec = CovariateRecord::new(5.0, Some(20.0), false, 1);
        let z = model.build_design_vector(d, &rec, &vec![0; 6]).unwrap();
        let step = transition_matrix(spec, layout, &beta, &z).unwrap();
        let trans = TransitionMatrixSeq::new(spec.n_states(), step).unwrap();
        let obs = vec![ObservationSymbol::Missing; 2];
        let pi = vec![1.0 / spec.n_states() as f64; spec.n_states()];
        let fwd = forward(spec, &obs, &trans, &pi).unwrap();
        assert_eq!(fwd.transition_ops, spec.n_states() * spec.n_states());
        counted += fwd.transition_ops;
    }
    assert_eq!(counted, 70);
    assert_eq!(counted, 3 * 16 + 2 * 9 + 4);
    pass(9, "extended space 1152; per-sweep step cost 70 by operation count");
}

/// Criterion 10: identical (seed, config) runs produce byte-identical
/// traces across executions and across thread counts.
#[test]
fn criterion_10_reproducibility() {
    let model = recovery_model();
    let truth = recovery_truth(&model);
    let (gaussians, dirichlets) = build_priors(&model, &PriorConfig::default()).unwrap();
    let sim_config = SimConfig {
        n_voles: 80,
        window: 8,
        exit_prob: 0.2,
        capture: CaptureSchedule::Seasonal { p: 0.8 },
        ascertainment_failure: vec![0.02, 0.02],
        weight_missing_prob: 0.05,
        seed: 1010,
    };
    let panels = simulated_panels(&model, &truth.beta, &truth.pi, &sim_config);

    let run = |threads: usize, dir: &std::path::Path| {
        let controls = McmcControls {
            chains: 2,
            iterations: 400,
            burn_in: 100,
            thin: 5,
            seed: 424_242,
            pilot: true,
            pilot_iterations: 200,
            init: InitStrategy::PriorDraw,
            threads,
        };
        run_chains(
            &model,
            &panels,
            &gaussians,
            &dirichlets,
            &controls,
            Some(dir),
            "confighash",
        )
        .expect("fit");
    };

    let dirs: Vec<tempfile::TempDir> =
        (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    run(1, dirs[0].path());
    run(1, dirs[1].path());
    run(2, dirs[2].path());

    for chain in 0..2 {
        let name = format!("trace_{chain}.csv");
        let a = std::fs::read(dirs[0].path().join(&name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&name)).unwrap();
        let c = std::fs::read(dirs[2].path().join(&name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "repeated run differs for chain {chain}");
        assert_eq!(a, c, "thread count changed the trace for chain {chain}");
    }
    pass(10, "byte-identical traces across executions and thread counts");
}

/// The contrast columns the summarizer adds for four-state chains are the
/// sample-wise intercept differences (reinfection vs first infection, old
/// vs new recovery).
#[test]
fn summarizer_emits_interpretable_contrasts() {
    let model = recovery_model();
    let truth = recovery_truth(&model);
    let (gaussians, dirichlets) = build_priors(&model, &PriorConfig::default()).unwrap();
    let sim_config = SimConfig {
        n_voles: 150,
        window: 8,
        exit_prob: 0.2,
        capture: CaptureSchedule::Uniform { p: 0.9 },
        ascertainment_failure: vec![0.0, 0.0],
        weight_missing_prob: 0.0,
        seed: 31,
    };
    let panels = simulated_panels(&model, &truth.beta, &truth.pi, &sim_config);
    let controls = McmcControls {
        chains: 1,
        iterations: 600,
        burn_in: 100,
        thin: 5,
        seed: 32,
        pilot: false,
        pilot_iterations: 0,
        init: InitStrategy::PriorDraw,
        threads: 1,
    };
    let run = run_chains(&model, &panels, &gaussians, &dirichlets, &controls, None, "").unwrap();
    let trace = &run.traces[0];
    let contrasts = chmm::diagnostics::default_contrasts(&trace.param_names);
    let names: Vec<&str> = contrasts.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["bart.b0_42-bart.b0_12", "bart.b0_34-bart.b0_24"]);

    let summaries = summarize(&trace.param_names, &trace.samples, 0, &contrasts).unwrap();
    let from_summary = summaries
        .iter()
        .find(|s| s.name == "bart.b0_42-bart.b0_12")
        .unwrap();
    // The contrast is computed sample-wise: summarizing the explicit
    // difference column must give the same numbers.
    let i42 = trace.param_index("bart.b0_42").unwrap();
    let i12 = trace.param_index("bart.b0_12").unwrap();
    let diff_rows: Vec<Vec<f64>> = trace.samples.iter().map(|r| vec![r[i42] - r[i12]]).collect();
    let direct = summarize(&["diff".to_string()], &diff_rows, 0, &[]).unwrap();
    assert_eq!(from_summary.median, direct[0].median);
    assert_eq!(from_summary.q025, direct[0].q025);
    assert_eq!(from_summary.prob_positive, direct[0].prob_positive);
}
