//! Tree-structured Parzen estimator.
//!
//! Observations are split at the `γ` quantile of their losses into a good set
//! and a bad set. Each set gets an independent per-dimension density (`l` and
//! `g`); candidates are drawn from `l` and ranked by `log l(x) − log g(x)`,
//! which orders them the same way as expected improvement below the threshold.
//!
//! Continuous dimensions live on `[0, 1]`. Categorical dimensions are stored
//! as their index, as an `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::imageops::OpKind;

const MIN_BANDWIDTH: f64 = 0.01;
const MAX_BANDWIDTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DimKind {
    /// Real value on `[0, 1]`.
    Continuous,
    /// Index in `0..cardinality`.
    Categorical(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub kind: DimKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Argument("search space needs at least one dimension".into()));
        }
        if let Some(d) = dims.iter().find(|d| d.kind == DimKind::Categorical(0)) {
            return Err(Error::Argument(format!("categorical dimension {} has no categories", d.name)));
        }
        Ok(Self { dims })
    }

    pub fn continuous(n: usize) -> Result<Self> {
        Self::new(
            (0..n)
                .map(|i| Dimension {
                    name: format!("x{i}"),
                    kind: DimKind::Continuous,
                })
                .collect(),
        )
    }

    /// Policy layout: for each sub-policy `s` and operation slot `o`, the
    /// dimensions `s{s}_o{o}_kind`, `s{s}_o{o}_p`, `s{s}_o{o}_lambda`.
    pub fn policy(sub_policies: usize, ops_per_sub_policy: usize) -> Result<Self> {
        if sub_policies == 0 || ops_per_sub_policy == 0 {
            return Err(Error::Argument("policy space needs at least one sub-policy and one op".into()));
        }
        let mut dims = Vec::with_capacity(sub_policies * ops_per_sub_policy * 3);
        for s in 0..sub_policies {
            for o in 0..ops_per_sub_policy {
                let dim = |field: &str, kind| Dimension {
                    name: format!("s{s}_o{o}_{field}"),
                    kind,
                };
                dims.push(dim("kind", DimKind::Categorical(OpKind::COUNT)));
                dims.push(dim("p", DimKind::Continuous));
                dims.push(dim("lambda", DimKind::Continuous));
            }
        }
        Self::new(dims)
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn validate_point(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.dims.len() {
            return Err(Error::Argument(format!(
                "point has {} coordinates, space has {}",
                params.len(),
                self.dims.len()
            )));
        }
        for (d, &v) in self.dims.iter().zip(params) {
            let ok = match d.kind {
                DimKind::Continuous => (0.0..=1.0).contains(&v),
                DimKind::Categorical(n) => v.fract() == 0.0 && v >= 0.0 && (v as usize) < n,
            };
            if !ok {
                return Err(Error::Argument(format!("value {v} out of range for dimension {}", d.name)));
            }
        }
        Ok(())
    }

    pub fn sample_uniform(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| match d.kind {
                DimKind::Continuous => rng.random::<f64>(),
                DimKind::Categorical(n) => rng.random_range(0..n) as f64,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeConfig {
    /// Fraction of completed trials treated as good.
    pub gamma: f64,
    /// Completed trials required before the model is used.
    pub startup_trials: usize,
    /// Candidates drawn from `l` per suggestion.
    pub ei_candidates: usize,
    pub prior_weight: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            startup_trials: 20,
            ei_candidates: 24,
            prior_weight: 1.0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Argument(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if self.ei_candidates == 0 {
            return Err(Error::Argument("ei_candidates must be at least 1".into()));
        }
        if !(self.prior_weight > 0.0 && self.prior_weight.is_finite()) {
            return Err(Error::Argument(format!("prior weight must be positive, got {}", self.prior_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrialState {
    Pending,
    Completed(f64),
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: Vec<f64>,
    pub state: TrialState,
}

impl Trial {
    pub fn loss(&self) -> Option<f64> {
        match self.state {
            TrialState::Completed(l) => Some(l),
            _ => None,
        }
    }
}

/// Candidates considered by one model-based suggestion.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub candidates: Vec<Vec<f64>>,
    /// `Σ log l − log g` per candidate.
    pub scores: Vec<f64>,
    /// Index of the returned candidate: the first maximal score.
    pub chosen: usize,
}

/// Append-only record of suggestions and their outcomes.
#[derive(Clone, Debug)]
pub struct TrialHistory {
    space: SearchSpace,
    config: TpeConfig,
    trials: Vec<Trial>,
}

impl TrialHistory {
    pub fn new(space: SearchSpace, config: TpeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            space,
            config,
            trials: Vec::new(),
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn config(&self) -> &TpeConfig {
        &self.config
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn completed(&self) -> usize {
        self.trials.iter().filter(|t| t.loss().is_some()).count()
    }

    pub fn pending(&self) -> usize {
        self.trials.iter().filter(|t| t.state == TrialState::Pending).count()
    }

    /// Next point to evaluate. Does not record anything.
    pub fn suggest(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let completed = self.completed();
        if completed < self.config.startup_trials {
            return Ok(self.space.sample_uniform(rng));
        }
        let p = self.propose(rng)?;
        Ok(p.candidates.into_iter().nth(p.chosen).expect("chosen index is in range"))
    }

    /// Model-based proposal regardless of the startup budget.
    pub fn propose(&self, rng: &mut impl Rng) -> Result<Proposal> {
        let (good, bad) = split_observations(&self.trials, self.config.gamma);
        if good.is_empty() {
            return Err(Error::Precondition("no completed trials to build a model from".into()));
        }
        let w = self.config.prior_weight;
        let column = |set: &[usize], d: usize| -> Vec<f64> { set.iter().map(|&i| self.trials[i].params[d]).collect() };
        let models: Vec<(Marginal, Marginal)> = self
            .space
            .dims
            .iter()
            .enumerate()
            .map(|(d, dim)| {
                (
                    Marginal::fit(dim.kind, &column(&good, d), w),
                    Marginal::fit(dim.kind, &column(&bad, d), w),
                )
            })
            .collect();

        let mut candidates = Vec::with_capacity(self.config.ei_candidates);
        let mut scores = Vec::with_capacity(self.config.ei_candidates);
        for _ in 0..self.config.ei_candidates {
            let x: Vec<f64> = models.iter().map(|(l, _)| l.sample(rng)).collect();
            let score = models
                .iter()
                .zip(&x)
                .map(|((l, g), &v)| l.density(v).ln() - g.density(v).ln())
                .sum();
            candidates.push(x);
            scores.push(score);
        }
        let chosen = first_argmax(&scores);
        Ok(Proposal {
            candidates,
            scores,
            chosen,
        })
    }

    /// Suggests a point and records it as pending. Returns its trial id.
    pub fn ask(&mut self, rng: &mut impl Rng) -> Result<(usize, Vec<f64>)> {
        let params = self.suggest(rng)?;
        self.trials.push(Trial {
            params: params.clone(),
            state: TrialState::Pending,
        });
        Ok((self.trials.len() - 1, params))
    }

    /// Completes a pending trial.
    pub fn tell(&mut self, id: usize, loss: f64) -> Result<()> {
        check_loss(loss)?;
        let trial = self.pending_trial(id)?;
        trial.state = TrialState::Completed(loss);
        Ok(())
    }

    /// Marks a pending trial as failed; it is ignored by the model from then on.
    pub fn fail(&mut self, id: usize) -> Result<()> {
        self.pending_trial(id)?.state = TrialState::Failed;
        Ok(())
    }

    /// Appends an already-evaluated point.
    pub fn observe(&mut self, params: Vec<f64>, loss: f64) -> Result<usize> {
        check_loss(loss)?;
        self.space.validate_point(&params)?;
        self.trials.push(Trial {
            params,
            state: TrialState::Completed(loss),
        });
        Ok(self.trials.len() - 1)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.trials
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.loss().map(|l| (i, l)))
            .fold(None, |acc, (i, l)| match acc {
                Some((_, bl)) if bl <= l => acc,
                _ => Some((i, l)),
            })
    }

    fn pending_trial(&mut self, id: usize) -> Result<&mut Trial> {
        match self.trials.get_mut(id) {
            Some(t) if t.state == TrialState::Pending => Ok(t),
            Some(_) => Err(Error::Precondition(format!("trial {id} is not pending"))),
            None => Err(Error::Argument(format!("no trial with id {id}"))),
        }
    }
}

fn check_loss(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("trial loss must be finite, got {loss}")))
    }
}

fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of completed trials split into the `ceil(γ·n)` lowest losses and
/// the rest. Equal losses keep insertion order. Pending and failed trials are
/// skipped.
pub fn split_observations(trials: &[Trial], gamma: f64) -> (Vec<usize>, Vec<usize>) {
    let mut done: Vec<(usize, f64)> = trials
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.loss().map(|l| (i, l)))
        .collect();
    done.sort_by(|a, b| a.1.total_cmp(&b.1));
    let n_good = ((gamma * done.len() as f64).ceil() as usize).min(done.len());
    let mut good: Vec<usize> = done[..n_good].iter().map(|p| p.0).collect();
    let mut bad: Vec<usize> = done[n_good..].iter().map(|p| p.0).collect();
    good.sort_unstable();
    bad.sort_unstable();
    (good, bad)
}

/// One-dimensional density of a set of observations.
#[derive(Clone, Debug)]
enum Marginal {
    Continuous(ParzenEstimator),
    Categorical(Vec<f64>),
}

impl Marginal {
    fn fit(kind: DimKind, values: &[f64], prior_weight: f64) -> Self {
        match kind {
            DimKind::Continuous => Marginal::Continuous(ParzenEstimator::new(values, prior_weight)),
            DimKind::Categorical(n) => {
                let mut counts = vec![0usize; n];
                for &v in values {
                    counts[v as usize] += 1;
                }
                Marginal::Categorical(categorical_density(&counts, prior_weight))
            }
        }
    }

    fn density(&self, x: f64) -> f64 {
        match self {
            Marginal::Continuous(p) => p.density(x),
            Marginal::Categorical(probs) => probs[x as usize],
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Marginal::Continuous(p) => p.sample(rng),
            Marginal::Categorical(probs) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i as f64;
                    }
                }
                (probs.len() - 1) as f64
            }
        }
    }
}

/// Truncated-Gaussian mixture on `[0, 1]` with a uniform prior component.
///
/// Each observation gets weight `1/(n+w)` and bandwidth equal to the distance
/// to its nearer neighbour among the other observations and the bounds 0 and 1,
/// clamped to `[0.01, 1]`. The prior gets weight `w/(n+w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParzenEstimator {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    /// Probability mass of each untruncated component inside `[0, 1]`.
    masses: Vec<f64>,
    prior_weight: f64,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

impl ParzenEstimator {
    pub fn new(points: &[f64], prior_weight: f64) -> Self {
        let mut mus = points.to_vec();
        mus.sort_by(f64::total_cmp);
        let n = mus.len();
        let sigmas: Vec<f64> = (0..n)
            .map(|i| {
                let left = if i == 0 { mus[0] } else { mus[i] - mus[i - 1] };
                let right = if i + 1 == n { 1.0 - mus[i] } else { mus[i + 1] - mus[i] };
                left.min(right).clamp(MIN_BANDWIDTH, MAX_BANDWIDTH)
            })
            .collect();
        let masses = mus
            .iter()
            .zip(&sigmas)
            .map(|(&m, &s)| std_normal_cdf((1.0 - m) / s) - std_normal_cdf(-m / s))
            .collect();
        Self {
            mus,
            sigmas,
            masses,
            prior_weight,
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.mus
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.sigmas
    }

    fn total_weight(&self) -> f64 {
        self.mus.len() as f64 + self.prior_weight
    }

    /// Density at `x`; zero outside `[0, 1]`.
    pub fn density(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        let norm = std::f64::consts::TAU.sqrt();
        let kernels: f64 = self
            .mus
            .iter()
            .zip(&self.sigmas)
            .zip(&self.masses)
            .map(|((&m, &s), &z)| {
                let u = (x - m) / s;
                (-0.5 * u * u).exp() / (s * norm * z)
            })
            .sum();
        (self.prior_weight + kernels) / self.total_weight()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let pick = rng.random::<f64>() * self.total_weight();
        let component = pick.floor() as usize;
        if component >= self.mus.len() {
            return rng.random();
        }
        let (m, s) = (self.mus[component], self.sigmas[component]);
        loop {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let v = m + s * z;
            if (0.0..=1.0).contains(&v) {
                return v;
            }
        }
    }
}

/// Density at `x` of the estimator built from `points`.
pub fn parzen_density(points: &[f64], x: f64, prior_weight: f64) -> f64 {
    ParzenEstimator::new(points, prior_weight).density(x)
}

/// `(counts + w/K) / (n + w)` for `K` categories.
pub fn categorical_density(counts: &[usize], prior_weight: f64) -> Vec<f64> {
    let k = counts.len() as f64;
    let n: usize = counts.iter().sum();
    let denom = n as f64 + prior_weight;
    counts.iter().map(|&c| (c as f64 + prior_weight / k) / denom).collect()
}
