//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use bayesmap::experiments::{
    run_gamma_poisson, run_logistic_sim, run_sparse_threshold, run_spectral_staging,
    run_uniform_example, GammaPoissonConfig, LogisticConfig, SparseThresholdConfig, SpectralConfig,
    UniformConfig,
};
use bayesmap::rng::{stream, trial_seed};
use bayesmap::solver::{self, fit_from, FitCache};
use bayesmap::{
    bayes_action, credible_region_pushforward, fit, marginal_credible_intervals,
    prior_confidence_radius, roc_curve, sample_prior, CredibleRegion, DecisionProblem, FitError,
    FitOptions, LikelihoodModel, MapError, PosteriorTarget, PriorModel, SampleSet, TransportMap,
};
use common::{fd_gradient, random_feasible_w, rel_norm_err, sup_distance};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

const ROOT: u64 = 0x5EED;

type Outcome = (bool, String);

fn fitted_map(out: Result<bayesmap::FitOutcome, FitError>) -> TransportMap {
    match out {
        Ok(o) => o.map,
        Err(FitError::MaxIters(o)) => o.map,
        Err(e) => panic!("{e}"),
    }
}

fn push(map: &TransportMap, s: &SampleSet) -> SampleSet {
    match map.push_samples(s) {
        Ok(p) => p,
        Err(MapError::InfeasibleRegion { pushed, .. }) => *pushed,
        Err(e) => panic!("{e}"),
    }
}

fn conjugate_correctness() -> Outcome {
    let rep = run_gamma_poisson(&GammaPoissonConfig {
        seed: ROOT,
        n_train: vec![1000],
        replicates: 1,
        ..Default::default()
    })
    .unwrap();
    let m = &rep.metrics;
    let truth = (8.0f64 / 27.0).ln();
    let (ks, kl) = (m.get("ks").unwrap(), m.get("kl").unwrap());
    let d_map = (m.get("log_beta_map").unwrap() - truth).abs();
    let d_mc = (m.get("log_beta_mc").unwrap() - truth).abs();
    let ok = rep.n_failed == 0
        && ks < 0.05
        && d_map < 0.02
        && d_mc < 0.02
        && kl < 1e-2
        && rep.wall_time_s < 30.0;
    (
        ok,
        format!(
            "ks {ks:.4}, |dlogb| map {d_map:.4} mc {d_mc:.4}, kl {kl:.4}, {:.1}s",
            rep.wall_time_s
        ),
    )
}

fn consistency_trend() -> Outcome {
    let sizes = [50, 200, 1000];
    let rep = run_gamma_poisson(&GammaPoissonConfig {
        seed: ROOT,
        n_train: sizes.to_vec(),
        replicates: 5,
        ..Default::default()
    })
    .unwrap();
    let series = |key: &str| -> Vec<f64> {
        sizes
            .iter()
            .map(|n| rep.metrics.get(&format!("{key}@n={n}")).unwrap())
            .collect()
    };
    let (var_t, kl) = (series("var_T"), series("kl"));
    let non_increasing = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    (
        rep.n_failed == 0 && non_increasing(&var_t) && non_increasing(&kl),
        format!("var_T {var_t:.4?}, kl {kl:.4?}"),
    )
}

fn pushforward_sanity() -> Outcome {
    let rep = run_uniform_example(&UniformConfig {
        seed: ROOT,
        ..Default::default()
    })
    .unwrap();
    let sup = rep.metrics.get("sup_deviation").unwrap();
    (sup < 1e-2, format!("sup |S(x) - x/2| {sup:.5}"))
}

fn gaussian_linear_2d() -> (PriorModel, PosteriorTarget) {
    let prior = PriorModel::isotropic_gaussian(2, 1.0).unwrap();
    let lik = LikelihoodModel::gaussian_linear(
        vec![1.0, 0.5, -0.3, 1.0],
        2,
        vec![0.5, 0.0, 0.0, 0.5],
        vec![0.8, -0.4],
    )
    .unwrap();
    (prior.clone(), PosteriorTarget::new(prior, lik).unwrap())
}

fn solver_properties() -> Outcome {
    let start = Instant::now();
    let problems = [
        ("gamma-poisson", common::gamma_poisson(), 5, 0.01),
        ("gaussian-2d", gaussian_linear_2d(), 2, 0.05),
        ("logistic-2d", common::small_logistic(ROOT), 2, 0.05),
    ];
    let opts = FitOptions::default();
    let mut grad_err = 0.0f64;
    let mut concave_fails = 0;
    let mut monotone = true;
    let mut start_gap = 0.0f64;
    for (k, (_, (prior, target), degree, scale)) in problems.iter().enumerate() {
        let s = sample_prior(prior, 500, trial_seed(ROOT, k));
        let spec = prior.default_basis(*degree).unwrap();
        let cache = FitCache::new(&spec, &s).unwrap();
        let mut rng = stream(trial_seed(ROOT, k), "w");
        for _ in 0..20 {
            let w = random_feasible_w(&spec, &cache, target, *scale, &mut rng);
            let g = solver::gradient(&w, &cache, target, opts.eps_det).unwrap();
            grad_err = grad_err.max(rel_norm_err(&g, &fd_gradient(&w, &cache, target, 1e-6)));
        }
        let f = |w: &[f64]| solver::objective(w, &cache, target, opts.eps_det);
        for _ in 0..34 {
            let w1 = random_feasible_w(&spec, &cache, target, *scale, &mut rng);
            let w2 = random_feasible_w(&spec, &cache, target, *scale, &mut rng);
            let t: f64 = rng.random_range(0.05..0.95);
            let wt: Vec<f64> = w1
                .iter()
                .zip(&w2)
                .map(|(a, b)| t * a + (1.0 - t) * b)
                .collect();
            if f(&wt) < t * f(&w1) + (1.0 - t) * f(&w2) - 1e-10 {
                concave_fails += 1;
            }
        }
        if k == 2 {
            continue;
        }
        let a = fit(target, &s, &spec, &opts).unwrap();
        monotone &= a
            .report
            .objective_trajectory
            .windows(2)
            .all(|w| w[1] >= w[0]);
        let w0 = random_feasible_w(&spec, &cache, target, *scale, &mut rng);
        let b = fit_from(target, &s, &spec, w0, &opts).unwrap();
        start_gap = start_gap.max(sup_distance(&a.map, &b.map, s.data()));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        grad_err < 1e-5 && concave_fails == 0 && monotone && start_gap < 1e-4 && secs < 60.0,
        format!(
            "grad rel err {grad_err:.2e}, concavity failures {concave_fails}/102, \
             monotone {monotone}, two-start gap {start_gap:.2e}, {secs:.1}s"
        ),
    )
}

fn sparse_threshold() -> Outcome {
    let rep = run_sparse_threshold(&SparseThresholdConfig {
        seed: ROOT,
        ..Default::default()
    })
    .unwrap();
    let m = &rep.metrics;
    let (bayes, map, tau) = (
        m.get("mean_bayes_loss").unwrap(),
        m.get("mean_map_loss").unwrap(),
        m.get("tau").unwrap(),
    );
    let tau_want = -std::f64::consts::FRAC_1_SQRT_2 * 0.05f64.ln();
    (
        bayes < map && (tau - tau_want).abs() < 1e-12,
        format!(
            "mean loss bayes {bayes:.3} map {map:.3}, component agreement {:.3}, \
             tau {tau:.4}, failed {}/{}",
            m.get("agreement").unwrap(),
            rep.n_failed,
            rep.n_trials
        ),
    )
}

fn logistic_roc() -> Outcome {
    let diffs: Vec<f64> = (0..20)
        .map(|i| {
            let rep = run_logistic_sim(&LogisticConfig {
                seed: trial_seed(ROOT, i),
                ..Default::default()
            })
            .unwrap();
            rep.metrics.get("auc_difference").unwrap()
        })
        .collect();
    let worst = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    (
        worst >= -0.02 && wins > 10,
        format!("bayes - map AUC: worst {worst:.4}, greater on {wins}/20 seeds"),
    )
}

fn credible_machinery() -> Outcome {
    // exactly 50 samples beyond each 2.5% quantile at n = 2000
    let s = sample_prior(&PriorModel::isotropic_gaussian(1, 1.0).unwrap(), 2000, ROOT);
    let (lo, hi) = match marginal_credible_intervals(&s, 0.05).unwrap() {
        CredibleRegion::MarginalIntervals { intervals, .. } => intervals[0],
        _ => unreachable!(),
    };
    let tails = (
        s.data().iter().filter(|v| **v < lo).count(),
        s.data().iter().filter(|v| **v > hi).count(),
    );

    // coverage of map-based 95% intervals when the parameter is drawn from
    // the prior; the fitted map depends on the data only through y
    let prior = PriorModel::gamma(vec![2.0], vec![0.5]).unwrap();
    let spec = prior.default_basis(5).unwrap();
    let train = sample_prior(&prior, 1000, trial_seed(ROOT, 1));
    let mut maps: BTreeMap<u64, TransportMap> = BTreeMap::new();
    let mut rng = stream(ROOT, "coverage");
    let theta_law = Gamma::new(2.0, 0.5).unwrap();
    let reps = 1000;
    let mut covered = 0;
    for r in 0..reps {
        let theta: f64 = theta_law.sample(&mut rng);
        let y = Poisson::new(theta).unwrap().sample(&mut rng) as u64;
        let map = maps.entry(y).or_insert_with(|| {
            let target = PosteriorTarget::new(
                prior.clone(),
                LikelihoodModel::poisson_count(vec![y]).unwrap(),
            )
            .unwrap();
            fitted_map(fit(&target, &train, &spec, &FitOptions::default()))
        });
        let pushed = push(map, &sample_prior(&prior, 2000, trial_seed(ROOT, 1000 + r)));
        if let CredibleRegion::MarginalIntervals { intervals, .. } =
            marginal_credible_intervals(&pushed, 0.05).unwrap()
        {
            let (lo, hi) = intervals[0];
            covered += usize::from(lo <= theta && theta <= hi);
        }
    }
    let coverage = covered as f64 / reps as f64;

    // fresh posterior samples inside the pushed 95% prior disc
    let (prior2, target2) = common::small_logistic(3);
    let map2 = fitted_map(fit(
        &target2,
        &sample_prior(&prior2, 2000, 3),
        &prior2.default_basis(3).unwrap(),
        &FitOptions::default(),
    ));
    let region = credible_region_pushforward(&map2, &prior2, 0.05, 400).unwrap();
    let fresh = sample_prior(&prior2, 10_000, trial_seed(ROOT, 2));
    let inside = fresh
        .rows()
        .filter(|x| map2.feasible_at(x) && region.contains(&map2.apply(x).unwrap()))
        .count() as f64
        / fresh.len() as f64;

    (
        tails == (50, 50) && (coverage - 0.95).abs() <= 0.03 && inside >= 0.93,
        format!(
            "tails {tails:?}, coverage {coverage:.3} ({} maps), region mass {inside:.4}",
            maps.len()
        ),
    )
}

/// Mann-Whitney statistic by explicit pair counting.
fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, si) in scores.iter().enumerate() {
        for (j, sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn oracle_equivalences() -> Outcome {
    let mut rng = stream(ROOT, "oracles");
    let mut action_mismatch = 0;
    for _ in 0..200 {
        let n_actions = rng.random_range(1..=16);
        let n_states = rng.random_range(1..=6);
        let table: Vec<Vec<f64>> = (0..n_actions)
            .map(|_| (0..n_states).map(|_| rng.random_range(0.0..10.0)).collect())
            .collect();
        let draws: Vec<usize> = (0..rng.random_range(1..50))
            .map(|_| rng.random_range(0..n_states))
            .collect();
        let t = table.clone();
        let prob = DecisionProblem::new((0..n_actions).collect(), move |a: &usize, x: &[f64]| {
            t[*a][x[0] as usize]
        })
        .unwrap();
        let s = common::samples(1, draws.iter().map(|k| *k as f64).collect());
        let got = bayes_action(&prob, &s).unwrap();
        let risks: Vec<f64> = table
            .iter()
            .map(|row| draws.iter().map(|k| row[*k]).sum::<f64>() / draws.len() as f64)
            .collect();
        let best = risks.iter().copied().fold(f64::INFINITY, f64::min);
        if (risks[got.action] - best).abs() > 1e-12 {
            action_mismatch += 1;
        }
    }

    let mut auc_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..80);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0u8..8)) / 7.0)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let roc = roc_curve(&scores, &labels).unwrap();
        auc_err = auc_err.max((roc.auc - pair_auc(&scores, &labels)).abs());
    }

    let r =
        prior_confidence_radius(&PriorModel::isotropic_gaussian(2, 100.0).unwrap(), 0.05).unwrap();
    let r_err = (r - 10.0 * (-2.0 * 0.05f64.ln()).sqrt()).abs();
    (
        action_mismatch == 0 && auc_err < 1e-12 && r_err < 1e-8,
        format!(
            "bayes_action mismatches {action_mismatch}/200, max AUC err {auc_err:.1e}, \
             radius err {r_err:.1e}"
        ),
    )
}

fn spectral_staging() -> Outcome {
    let rep = run_spectral_staging(&SpectralConfig {
        seed: ROOT,
        ..Default::default()
    })
    .unwrap();
    let (bayes, map) = (
        rep.metrics.get("mean_bayes_loss").unwrap(),
        rep.metrics.get("mean_map_loss").unwrap(),
    );
    (
        bayes <= map,
        format!(
            "mean loss bayes {bayes:.4} map {map:.4} (expected under the label model \
             {:.4} vs {:.4}), failed {}/{}",
            rep.metrics.get("mean_bayes_expected_loss").unwrap(),
            rep.metrics.get("mean_map_expected_loss").unwrap(),
            rep.n_failed,
            rep.n_trials
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("conjugate correctness", conjugate_correctness),
        ("consistency trend", consistency_trend),
        ("push-forward sanity", pushforward_sanity),
        ("solver properties", solver_properties),
        ("sparse threshold decisions", sparse_threshold),
        ("logistic ROC decisions", logistic_roc),
        ("credible machinery", credible_machinery),
        ("oracle equivalences", oracle_equivalences),
        ("spectral staging decisions", spectral_staging),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = check();
        println!(
            "{} {}. {name}: {detail}",
            if ok { "PASS" } else { "FAIL" },
            i + 1
        );
        failed += usize::from(!ok);
    }
    println!("acceptance: {} of {} criteria passed", 9 - failed, 9);
    if failed > 0 {
        std::process::exit(1);
    }
}
