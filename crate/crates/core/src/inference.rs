//! Posterior summaries from samples: expectations, credible regions,
//! Bayes and MAP decisions, class posteriors and ROC curves.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::PriorModel;
use crate::rng::StreamRng;
use crate::samples::{Provenance, SampleSet};
use crate::stats;
use crate::transportmap::{MapError, TransportMap};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("level must lie in (0, 1), got alpha = {0}")]
    InvalidLevel(f64),
    #[error("prior must be an isotropic Gaussian")]
    UnsupportedPrior,
    #[error("decision problem has no actions")]
    NoActions,
    #[error("ROC curve needs both classes")]
    SingleClass,
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Sample mean of a vector-valued function with per-component standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

pub fn conditional_expectation<F>(samples: &SampleSet, f: F) -> Result<Expectation, InferenceError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = samples.len();
    if n < 2 {
        return Err(InferenceError::TooFewSamples { needed: 2, got: n });
    }
    let values: Vec<Vec<f64>> = samples.rows().map(&f).collect();
    let m = values[0].len();
    let mut mean = Vec::with_capacity(m);
    let mut std_err = Vec::with_capacity(m);
    for c in 0..m {
        let col: Vec<f64> = values.iter().map(|v| v[c]).collect();
        mean.push(stats::mean(&col));
        std_err.push((stats::variance(&col) / n as f64).sqrt());
    }
    Ok(Expectation { mean, std_err })
}

/// Radius `r` with `P(|X - mean| <= r) = 1 - alpha` for `X ~ N(mean, s^2 I)`.
pub fn prior_confidence_radius(prior: &PriorModel, alpha: f64) -> Result<f64, InferenceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::InvalidLevel(alpha));
    }
    let (mean, var) = prior.isotropic().ok_or(InferenceError::UnsupportedPrior)?;
    Ok((var * stats::chi_square_quantile(mean.len() as f64, 1.0 - alpha)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CredibleRegion {
    /// Image of the prior confidence sphere; for d = 2 an ordered closed polyline.
    PushforwardBoundary { level: f64, points: Vec<Vec<f64>> },
    /// Equal-tail interval per coordinate.
    MarginalIntervals {
        level: f64,
        intervals: Vec<(f64, f64)>,
    },
}

impl CredibleRegion {
    pub fn level(&self) -> f64 {
        match self {
            CredibleRegion::PushforwardBoundary { level, .. }
            | CredibleRegion::MarginalIntervals { level, .. } => *level,
        }
    }

    /// Whether `x` lies in the region (even-odd rule for a 2-d boundary).
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            CredibleRegion::PushforwardBoundary { points, .. } => point_in_polygon(points, x),
            CredibleRegion::MarginalIntervals { intervals, .. } => intervals
                .iter()
                .zip(x)
                .all(|((lo, hi), v)| v >= lo && v <= hi),
        }
    }

    /// CSV rows: `x1,x2,...` for boundaries, `dim,lo,hi` for intervals.
    pub fn to_csv_string(&self) -> String {
        match self {
            CredibleRegion::PushforwardBoundary { points, .. } => {
                let d = points.first().map_or(0, Vec::len);
                let mut s = (1..=d)
                    .map(|a| format!("x{a}"))
                    .collect::<Vec<_>>()
                    .join(",");
                s.push('\n');
                for p in points {
                    s.push_str(
                        &p.iter()
                            .map(|v| format!("{v:?}"))
                            .collect::<Vec<_>>()
                            .join(","),
                    );
                    s.push('\n');
                }
                s
            }
            CredibleRegion::MarginalIntervals { intervals, .. } => {
                let mut s = String::from("dim,lo,hi\n");
                for (a, (lo, hi)) in intervals.iter().enumerate() {
                    s.push_str(&format!("{},{lo:?},{hi:?}\n", a + 1));
                }
                s
            }
        }
    }
}

/// Even-odd containment test for the closed polygon through `poly`.
pub fn point_in_polygon(poly: &[Vec<f64>], p: &[f64]) -> bool {
    let (x, y) = (p[0], p[1]);
    let mut inside = false;
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Push the prior's `1 - alpha` confidence sphere through the map. For d = 2
/// the circle is sampled at `resolution` equally spaced angles; for other
/// dimensions the boundary is a point cloud of `resolution` fixed directions.
pub fn credible_region_pushforward(
    map: &TransportMap,
    prior: &PriorModel,
    alpha: f64,
    resolution: usize,
) -> Result<CredibleRegion, InferenceError> {
    let r = prior_confidence_radius(prior, alpha)?;
    let (mean, _) = prior.isotropic().ok_or(InferenceError::UnsupportedPrior)?;
    let d = mean.len();
    let resolution = resolution.max(3);
    let dirs: Vec<Vec<f64>> = match d {
        1 => vec![vec![-1.0], vec![1.0]],
        2 => (0..resolution)
            .map(|i| {
                let th = std::f64::consts::TAU * i as f64 / resolution as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        _ => {
            let mut rng = StreamRng::seed_from_u64(0);
            (0..resolution)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / nrm).collect()
                })
                .collect()
        }
    };
    let data: Vec<f64> = dirs
        .iter()
        .flat_map(|u| {
            u.iter()
                .zip(mean)
                .map(|(ui, m)| m + r * ui)
                .collect::<Vec<_>>()
        })
        .collect();
    let sphere = SampleSet::new(
        d,
        data,
        Provenance {
            seed: None,
            source: "confidence-sphere".into(),
            map_hash: None,
        },
    );
    let pushed = map.push_samples(&sphere)?;
    Ok(CredibleRegion::PushforwardBoundary {
        level: 1.0 - alpha,
        points: pushed.rows().map(<[f64]>::to_vec).collect(),
    })
}

/// Equal-tail intervals `[q_{alpha/2}, q_{1-alpha/2}]` per coordinate with
/// midpoint interpolation.
pub fn marginal_credible_intervals(
    samples: &SampleSet,
    alpha: f64,
) -> Result<CredibleRegion, InferenceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::InvalidLevel(alpha));
    }
    if samples.len() < 100 {
        return Err(InferenceError::TooFewSamples {
            needed: 100,
            got: samples.len(),
        });
    }
    let intervals = (0..samples.dim())
        .map(|a| {
            let mut col = samples.column(a);
            col.sort_by(f64::total_cmp);
            (
                stats::quantile_midpoint(&col, alpha / 2.0),
                stats::quantile_midpoint(&col, 1.0 - alpha / 2.0),
            )
        })
        .collect();
    Ok(CredibleRegion::MarginalIntervals {
        level: 1.0 - alpha,
        intervals,
    })
}

type LossFn<A> = Box<dyn Fn(&A, &[f64]) -> f64 + Send + Sync>;

/// Finite action set with a loss `l(a, x)` over parameters.
pub struct DecisionProblem<A> {
    pub actions: Vec<A>,
    loss: LossFn<A>,
}

impl<A> DecisionProblem<A> {
    pub fn new(
        actions: Vec<A>,
        loss: impl Fn(&A, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, InferenceError> {
        if actions.is_empty() {
            return Err(InferenceError::NoActions);
        }
        Ok(Self {
            actions,
            loss: Box::new(loss),
        })
    }

    pub fn loss(&self, action: &A, x: &[f64]) -> f64 {
        (self.loss)(action, x)
    }
}

impl DecisionProblem<usize> {
    /// Actions `0..m` choosing a label, with loss matrix `loss[a][c]` and a
    /// label model giving `p(c | x)`; the loss over parameters is
    /// `sum_c p(c | x) loss[a][c]`.
    pub fn from_label_model(
        loss: Vec<Vec<f64>>,
        label_probs: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self, InferenceError> {
        let m = loss.len();
        Self::new((0..m).collect(), move |a: &usize, x: &[f64]| {
            label_probs(x)
                .iter()
                .zip(&loss[*a])
                .map(|(p, l)| p * l)
                .sum()
        })
    }
}

/// Chosen action index and the estimated posterior expected loss of every action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: usize,
    pub expected_losses: Vec<f64>,
}

fn first_argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Minimise the sample-average loss over actions; ties go to the first action.
pub fn bayes_action<A>(
    problem: &DecisionProblem<A>,
    posterior: &SampleSet,
) -> Result<Decision, InferenceError> {
    let n = posterior.len();
    if n == 0 {
        return Err(InferenceError::TooFewSamples { needed: 1, got: 0 });
    }
    let expected_losses: Vec<f64> = problem
        .actions
        .iter()
        .map(|a| posterior.rows().map(|x| problem.loss(a, x)).sum::<f64>() / n as f64)
        .collect();
    Ok(Decision {
        action: first_argmin(&expected_losses),
        expected_losses,
    })
}

/// Minimise the loss at a single point estimate; ties go to the first action.
pub fn map_action<A>(problem: &DecisionProblem<A>, x_map: &[f64]) -> usize {
    let losses: Vec<f64> = problem
        .actions
        .iter()
        .map(|a| problem.loss(a, x_map))
        .collect();
    first_argmin(&losses)
}

/// Average of `p(c = 1 | Z_i)` over posterior samples.
pub fn class_posterior_from_samples(
    posterior: &SampleSet,
    label_model: impl Fn(&[f64]) -> f64,
) -> f64 {
    posterior
        .rows()
        .map(|z| label_model(z).clamp(0.0, 1.0))
        .sum::<f64>()
        / posterior.len() as f64
}

/// Push prior samples through the map and average the label model over them.
pub fn class_posterior(
    map: &TransportMap,
    prior_samples: &SampleSet,
    label_model: impl Fn(&[f64]) -> f64,
) -> Result<f64, InferenceError> {
    let pushed = map.push_samples(prior_samples)?;
    Ok(class_posterior_from_samples(&pushed, label_model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            s.push_str(&format!("{f:?},{t:?}\n"));
        }
        s
    }
}

/// ROC curve with one threshold per distinct score (descending). Tied
/// scores cross the threshold together, so the trapezoid AUC equals the
/// Mann-Whitney statistic with ties counted one half.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve, InferenceError> {
    if scores.len() != labels.len() {
        return Err(InferenceError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(InferenceError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in counts, exact in integers
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: auc / (pos as f64 * neg as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_roc_case() {
        let roc = roc_curve(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(roc.auc, 0.75);
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
        let tied = roc_curve(&[0.5; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(tied.auc, 0.5);
        assert_eq!(tied.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(
            roc_curve(&[0.1, 0.2], &[true, true]),
            Err(InferenceError::SingleClass)
        ));
    }

    #[test]
    fn chi_square_radius() {
        let p = PriorModel::isotropic_gaussian(2, 100.0).unwrap();
        let r = prior_confidence_radius(&p, 0.05).unwrap();
        assert!((r - 10.0 * (-2.0 * 0.05f64.ln()).sqrt()).abs() < 1e-8);
        let one = PriorModel::isotropic_gaussian(1, 1.0).unwrap();
        let a = 2.0 * (1.0 - stats::normal_cdf(1.0));
        assert!((prior_confidence_radius(&one, a).unwrap() - 1.0).abs() < 1e-9);
        assert!(prior_confidence_radius(&one, 1.0 - 1e-12).unwrap() < 1e-5);
        let lap = PriorModel::laplace(vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            prior_confidence_radius(&lap, 0.05),
            Err(InferenceError::UnsupportedPrior)
        ));
    }

    #[test]
    fn ties_go_to_first_action() {
        let prob = DecisionProblem::new(vec!["a", "b", "c"], |_, _| 1.0).unwrap();
        let s = SampleSet::new(1, vec![0.0, 1.0, 2.0], Provenance::default());
        assert_eq!(bayes_action(&prob, &s).unwrap().action, 0);
        assert_eq!(map_action(&prob, &[0.3]), 0);
        assert!(matches!(
            DecisionProblem::<u8>::new(vec![], |_, _| 0.0),
            Err(InferenceError::NoActions)
        ));
    }

    #[test]
    fn polygon_even_odd() {
        let sq = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
        ];
        assert!(point_in_polygon(&sq, &[0.5, 0.5]));
        assert!(!point_in_polygon(&sq, &[1.5, 0.5]));
    }
}
