//! The policy search loop.
//!
//! For every fold: train a probe on `D_M`, freeze it, then run `T` rounds of
//! `B` TPE trials, each scoring a candidate policy by the probe's loss on the
//! policy-augmented `D_A`. The `N` best policies of every round are kept and
//! the union over folds and rounds is the final [`PolicySet`].

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_kfold_split, Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::imageops::OpKind;
use crate::model::{self, Architecture, Metrics, ModelParams, TrainConfig};
use crate::policy::{
    AugmentedStream, OperationSpec, Policy, PolicySet, SelectedPolicy, SubPolicy, DEFAULT_OPS_PER_SUB_POLICY,
    DEFAULT_SUB_POLICIES,
};
use crate::rng::{self, tag, Stream};
use crate::tpe::{SearchSpace, TpeConfig, TrialHistory};

/// Fraction of erroring trials in a round above which a fold is aborted.
pub const MAX_ERROR_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Number of stratified shuffle splits.
    pub k: usize,
    /// Exploration rounds per fold.
    pub t: usize,
    /// Trials per round.
    pub b: usize,
    /// Policies kept per round.
    pub n: usize,
    pub ops_per_sub_policy: usize,
    pub sub_policies: usize,
    /// Fraction of each fold that goes to `D_M`.
    pub split_ratio: f64,
    /// Cap on the number of `D_A` images scored per trial; the subsample is fixed per fold.
    pub eval_subsample: Option<usize>,
    /// Simultaneous trial evaluations within a fold.
    pub concurrency: usize,
    pub seed: u64,
    /// Start every round with an empty TPE history instead of sharing one per fold.
    pub restart_rounds: bool,
    pub tpe: TpeConfig,
    /// Training of the fold probes. Its seed is replaced per fold.
    pub fold_train: TrainConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 5,
            t: 2,
            b: 200,
            n: 10,
            ops_per_sub_policy: DEFAULT_OPS_PER_SUB_POLICY,
            sub_policies: DEFAULT_SUB_POLICIES,
            split_ratio: 0.5,
            eval_subsample: Some(1024),
            concurrency: 8,
            seed: 0,
            restart_rounds: false,
            tpe: TpeConfig::default(),
            fold_train: TrainConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("t", self.t),
            ("b", self.b),
            ("n", self.n),
            ("ops_per_sub_policy", self.ops_per_sub_policy),
            ("sub_policies", self.sub_policies),
            ("concurrency", self.concurrency),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be at least 1")));
        }
        if self.n > self.b {
            return Err(Error::Argument(format!("n ({}) cannot exceed b ({})", self.n, self.b)));
        }
        if self.eval_subsample == Some(0) {
            return Err(Error::Argument("eval_subsample must be at least 1".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Argument(format!("split ratio must be in (0, 1), got {}", self.split_ratio)));
        }
        self.tpe.validate()?;
        self.fold_train.validate()
    }

    pub fn space(&self) -> Result<SearchSpace> {
        SearchSpace::policy(self.sub_policies, self.ops_per_sub_policy)
    }
}

/// Decodes a point of [`SearchSpace::policy`] into a policy. Coordinates
/// `[3·(s·N_τ + o), +3)` are the kind index, `p` and `λ` of op `o` of sub-policy `s`.
pub fn params_to_policy(params: &[f64], sub_policies: usize, ops_per_sub_policy: usize) -> Result<Policy> {
    let expected = sub_policies * ops_per_sub_policy * 3;
    if params.len() != expected {
        return Err(Error::Decode(format!(
            "expected {expected} coordinates, got {}",
            params.len()
        )));
    }
    if expected == 0 {
        return Err(Error::Decode("empty policy layout".into()));
    }
    let subs = params
        .chunks_exact(ops_per_sub_policy * 3)
        .map(|chunk| {
            let ops = chunk
                .chunks_exact(3)
                .map(|c| {
                    let (k, p, lambda) = (c[0], c[1], c[2]);
                    let kind = (k.fract() == 0.0 && k >= 0.0)
                        .then(|| OpKind::from_index(k as usize))
                        .flatten()
                        .ok_or_else(|| Error::Decode(format!("invalid operation index {k}")))?;
                    OperationSpec::new(kind, p, lambda).map_err(|e| Error::Decode(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            SubPolicy::new(ops)
        })
        .collect::<Result<Vec<_>>>()?;
    Policy::new(subs)
}

/// Inverse of [`params_to_policy`].
pub fn policy_to_params(policy: &Policy) -> Vec<f64> {
    policy
        .sub_policies
        .iter()
        .flat_map(|sp| sp.ops().iter())
        .flat_map(|op| [op.kind.index() as f64, op.p, op.lambda])
        .collect()
}

/// Loss and accuracy of the frozen probe on `T(D_A)`. Never updates `params`.
pub fn evaluate_policy(params: &ModelParams, policy: &Policy, d_a: &[crate::imageops::Image], rng: Stream) -> Result<Metrics> {
    if d_a.is_empty() {
        return Err(Error::Argument("cannot evaluate a policy on an empty dataset".into()));
    }
    model::evaluate_stream(params, AugmentedStream::new(d_a, policy, rng))
}

/// One completed trial, as written to the trial log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub fold: usize,
    pub round: usize,
    /// Index of the suggestion within its round.
    pub trial: usize,
    /// Coordinate name to value.
    pub params: serde_json::Map<String, serde_json::Value>,
    pub loss: f64,
    pub accuracy: f64,
    pub elapsed_ms: u64,
    #[serde(skip)]
    pub policy: Option<Policy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub fold: usize,
    pub round: usize,
    /// Completed trials in suggestion order.
    pub trials: Vec<TrialRecord>,
    /// Positions in `trials` of the selected policies, best first.
    pub selected: Vec<usize>,
    pub errors: usize,
}

impl RoundResult {
    fn selected_policies(&self) -> Vec<SelectedPolicy> {
        self.selected
            .iter()
            .map(|&i| {
                let t = &self.trials[i];
                SelectedPolicy {
                    sub_policies: t.policy.clone().expect("completed trials carry their policy").sub_policies,
                    fold: self.fold,
                    round: self.round,
                    trial: t.trial,
                    loss: t.loss,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub model: ModelParams,
    pub hash_before: String,
    pub hash_after: String,
    /// Probe metrics on its own training split and on the full `D_A`.
    pub train_metrics: Metrics,
    pub d_a_metrics: Metrics,
    pub split: FoldSplit,
    /// Indices into `split.d_a` scored by every trial.
    pub eval_indices: Vec<usize>,
    pub rounds: Vec<RoundResult>,
    pub train_ms: u64,
    pub explore_ms: u64,
}

impl FoldResult {
    pub fn selected(&self) -> Vec<SelectedPolicy> {
        self.rounds.iter().flat_map(RoundResult::selected_policies).collect()
    }

    pub fn trial_count(&self) -> usize {
        self.rounds.iter().map(|r| r.trials.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub policies: PolicySet,
    pub folds: Vec<FoldResult>,
}

impl SearchOutcome {
    pub fn trial_records(&self) -> impl Iterator<Item = &TrialRecord> {
        self.folds.iter().flat_map(|f| f.rounds.iter().flat_map(|r| r.trials.iter()))
    }
}

fn named_params(space: &SearchSpace, params: &[f64]) -> serde_json::Map<String, serde_json::Value> {
    space
        .dims()
        .iter()
        .zip(params)
        .map(|(d, &v)| {
            let value = match d.kind {
                crate::tpe::DimKind::Categorical(_) => serde_json::Value::from(v as u64),
                crate::tpe::DimKind::Continuous => serde_json::Value::from(v),
            };
            (d.name.clone(), value)
        })
        .collect()
}

struct RoundState {
    history: TrialHistory,
    next_slot: usize,
    in_flight: usize,
    errors: usize,
    done: Vec<TrialRecord>,
    failure: Option<Error>,
}

fn cancelled(cancel: Option<&AtomicBool>) -> bool {
    cancel.is_some_and(|c| c.load(Ordering::Relaxed))
}

/// Runs one round of `cfg.b` completed trials against the frozen probe.
fn run_round(
    probe: &ModelParams,
    images: &[crate::imageops::Image],
    cfg: &SearchConfig,
    fold: usize,
    round: usize,
    history: TrialHistory,
    cancel: Option<&AtomicBool>,
) -> Result<(RoundResult, TrialHistory)> {
    let max_errors = (MAX_ERROR_FRACTION * cfg.b as f64).floor() as usize;
    let state = Mutex::new(RoundState {
        history,
        next_slot: 0,
        in_flight: 0,
        errors: 0,
        done: Vec::with_capacity(cfg.b),
        failure: None,
    });

    let worker = || loop {
        let (slot, id, params) = {
            let mut st = state.lock().expect("round state lock");
            if st.failure.is_some() || st.done.len() + st.in_flight >= cfg.b {
                return;
            }
            if cancelled(cancel) {
                st.failure = Some(Error::Interrupted);
                return;
            }
            let slot = st.next_slot;
            let mut suggest_rng = rng::stream(cfg.seed, &[tag::SUGGEST, fold as u64, round as u64, slot as u64]);
            match st.history.ask(&mut suggest_rng) {
                Ok((id, params)) => {
                    st.next_slot += 1;
                    st.in_flight += 1;
                    (slot, id, params)
                }
                Err(e) => {
                    st.failure = Some(e);
                    return;
                }
            }
        };

        let started = Instant::now();
        let eval_rng = rng::stream(cfg.seed, &[tag::EVALUATE, fold as u64, round as u64, slot as u64]);
        let outcome = params_to_policy(&params, cfg.sub_policies, cfg.ops_per_sub_policy)
            .and_then(|policy| evaluate_policy(probe, &policy, images, eval_rng).map(|m| (policy, m)));
        let elapsed_ms = started.elapsed().as_millis() as u64;

        let mut st = state.lock().expect("round state lock");
        st.in_flight -= 1;
        match outcome.and_then(|(policy, m)| st.history.tell(id, m.loss).map(|()| (policy, m))) {
            Ok((policy, m)) => {
                let named = named_params(st.history.space(), &params);
                st.done.push(TrialRecord {
                    fold,
                    round,
                    trial: slot,
                    params: named,
                    loss: m.loss,
                    accuracy: m.accuracy,
                    elapsed_ms,
                    policy: Some(policy),
                });
            }
            Err(e) => {
                let _ = st.history.fail(id);
                st.errors += 1;
                if st.errors > max_errors {
                    st.failure = Some(Error::FoldAborted {
                        fold,
                        reason: format!(
                            "{} of {} trials in round {round} failed; last error: {e}",
                            st.errors, cfg.b
                        ),
                    });
                }
            }
        }
    };

    let workers = cfg.concurrency.min(cfg.b);
    if workers == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(worker);
            }
        });
    }

    let st = state.into_inner().expect("round state lock");
    if let Some(e) = st.failure {
        return Err(e);
    }
    let mut trials = st.done;
    trials.sort_by_key(|t| t.trial);
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| trials[a].loss.total_cmp(&trials[b].loss).then(trials[a].trial.cmp(&trials[b].trial)));
    order.truncate(cfg.n);
    Ok((
        RoundResult {
            fold,
            round,
            trials,
            selected: order,
            errors: st.errors,
        },
        st.history,
    ))
}

/// Checks the per-round selection property and trial count.
pub fn verify_round(round: &RoundResult, b: usize, n: usize) -> Result<()> {
    if round.trials.len() != b {
        return Err(Error::Invariant(format!(
            "fold {} round {} completed {} trials, expected {b}",
            round.fold,
            round.round,
            round.trials.len()
        )));
    }
    if round.selected.len() != n.min(b) {
        return Err(Error::Invariant(format!(
            "fold {} round {} selected {} policies, expected {}",
            round.fold,
            round.round,
            round.selected.len(),
            n.min(b)
        )));
    }
    let chosen: BTreeSet<usize> = round.selected.iter().copied().collect();
    let max_selected = chosen.iter().map(|&i| round.trials[i].loss).fold(f64::NEG_INFINITY, f64::max);
    let min_rest = (0..round.trials.len())
        .filter(|i| !chosen.contains(i))
        .map(|i| round.trials[i].loss)
        .fold(f64::INFINITY, f64::min);
    if chosen.len() != round.selected.len() || max_selected > min_rest {
        return Err(Error::Invariant(format!(
            "fold {} round {}: selected losses up to {max_selected} but an unselected trial has {min_rest}",
            round.fold, round.round
        )));
    }
    Ok(())
}

/// Fixed per-fold subsample of `D_A` scored by every trial.
fn eval_subset(d_a: &Dataset, cfg: &SearchConfig, fold: usize) -> Vec<usize> {
    let n = d_a.len();
    match cfg.eval_subsample {
        Some(cap) if cap < n => {
            let mut s = rng::stream(cfg.seed, &[tag::SUBSAMPLE, fold as u64]);
            let mut idx = sample(&mut s, n, cap).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Runs `cfg.t` exploration rounds against a frozen probe and returns the rounds.
/// The probe hash is compared before and after.
pub fn explore_fold(
    probe: &ModelParams,
    images: &[crate::imageops::Image],
    cfg: &SearchConfig,
    fold: usize,
    cancel: Option<&AtomicBool>,
) -> Result<Vec<RoundResult>> {
    cfg.validate()?;
    let hash_before = probe.param_hash();
    let fresh = || TrialHistory::new(cfg.space()?, cfg.tpe.clone());
    let mut history = fresh()?;
    let mut rounds = Vec::with_capacity(cfg.t);
    for round in 0..cfg.t {
        if round > 0 && cfg.restart_rounds {
            history = fresh()?;
        }
        let (result, h) = run_round(probe, images, cfg, fold, round, history, cancel)?;
        history = h;
        verify_round(&result, cfg.b, cfg.n)?;
        rounds.push(result);
    }
    if probe.param_hash() != hash_before {
        return Err(Error::Invariant(format!("fold {fold} probe parameters changed during exploration")));
    }
    Ok(rounds)
}

/// Seed of the fold probe's initialization and minibatch order.
pub fn fold_train_seed(cfg: &SearchConfig, fold: usize) -> u64 {
    rng::derive_seed(cfg.seed, &[tag::FOLD_TRAIN, fold as u64])
}

fn run_fold(split: FoldSplit, cfg: &SearchConfig, cancel: Option<&AtomicBool>) -> Result<FoldResult> {
    let fold = split.fold_index;
    let started = Instant::now();
    let train_cfg = TrainConfig {
        seed: fold_train_seed(cfg, fold),
        augmentation: None,
        ..cfg.fold_train.clone()
    };
    let init = ModelParams::init(Architecture::for_dataset(&split.d_m), train_cfg.seed)?;
    let probe = model::train(&init, &split.d_m, &train_cfg)?;
    let train_metrics = model::evaluate(&probe, split.d_m.images())?;
    let d_a_metrics = model::evaluate(&probe, split.d_a.images())?;
    let train_ms = started.elapsed().as_millis() as u64;
    if cancelled(cancel) {
        return Err(Error::Interrupted);
    }

    let started = Instant::now();
    let eval_indices = eval_subset(&split.d_a, cfg, fold);
    let images: Vec<_> = eval_indices.iter().map(|&i| split.d_a.images()[i].clone()).collect();
    let hash_before = probe.param_hash();
    let rounds = explore_fold(&probe, &images, cfg, fold, cancel)?;
    let hash_after = probe.param_hash();
    Ok(FoldResult {
        fold,
        model: probe,
        hash_before,
        hash_after,
        train_metrics,
        d_a_metrics,
        split,
        eval_indices,
        rounds,
        train_ms,
        explore_ms: started.elapsed().as_millis() as u64,
    })
}

/// Checks the cardinality and provenance of a merged search result.
pub fn verify_outcome(outcome: &SearchOutcome, cfg: &SearchConfig) -> Result<()> {
    for f in &outcome.folds {
        if f.hash_before != f.hash_after {
            return Err(Error::Invariant(format!("fold {} probe hash changed", f.fold)));
        }
        if f.trial_count() != cfg.t * cfg.b {
            return Err(Error::Invariant(format!(
                "fold {} completed {} trials, expected {}",
                f.fold,
                f.trial_count(),
                cfg.t * cfg.b
            )));
        }
        for r in &f.rounds {
            verify_round(r, cfg.b, cfg.n)?;
        }
    }
    let expected = cfg.k * cfg.t * cfg.n.min(cfg.b);
    let set = &outcome.policies;
    if set.len() != expected {
        return Err(Error::Invariant(format!("policy set has {} entries, expected {expected}", set.len())));
    }
    let keys: BTreeSet<(usize, usize, usize)> = set.policies.iter().map(|p| (p.fold, p.round, p.trial)).collect();
    if keys.len() != set.len() {
        return Err(Error::Invariant("duplicate (fold, round, trial) keys in policy set".into()));
    }
    Ok(())
}

/// Full search on `d_train`: split, train one probe per fold, explore, merge.
///
/// Folds run one after another; trials within a fold run on up to
/// `cfg.concurrency` threads. With `concurrency = 1` the result depends only
/// on `cfg`. Setting `cancel` stops the search with [`Error::Interrupted`].
pub fn fast_autoaugment(d_train: &Dataset, cfg: &SearchConfig, cancel: Option<&AtomicBool>) -> Result<SearchOutcome> {
    cfg.validate()?;
    let splits = if cfg.k == 1 {
        // a single split is still a stratified shuffle
        let mut two = stratified_kfold_split(d_train, 2, cfg.split_ratio, cfg.seed)?;
        two.truncate(1);
        two
    } else {
        stratified_kfold_split(d_train, cfg.k, cfg.split_ratio, cfg.seed)?
    };
    let mut folds = Vec::with_capacity(cfg.k);
    for split in splits {
        let fold = split.fold_index;
        folds.push(run_fold(split, cfg, cancel).map_err(|e| match e {
            Error::FoldAborted { .. } | Error::Interrupted | Error::Invariant(_) => e,
            other => Error::FoldAborted {
                fold,
                reason: other.to_string(),
            },
        })?);
    }
    let policies = PolicySet::new(folds.iter().flat_map(FoldResult::selected).collect())?;
    let outcome = SearchOutcome { policies, folds };
    verify_outcome(&outcome, cfg)?;
    Ok(outcome)
}

/// Trains a fresh probe on `d_train` with one sub-policy of `set` drawn per
/// image per epoch. The initialization depends only on `cfg.seed`, so the
/// same seed without a policy set gives the matching baseline.
pub fn retrain_with_policies(d_train: &Dataset, set: Option<&PolicySet>, cfg: &TrainConfig) -> Result<ModelParams> {
    let cfg = TrainConfig {
        augmentation: set.cloned(),
        ..cfg.clone()
    };
    let init = ModelParams::init(Architecture::for_dataset(d_train), cfg.seed)?;
    model::train(&init, d_train, &cfg)
}

/// `count` policies with uniformly random kinds, probabilities and magnitudes.
/// Provenance records the draw index as the trial and a loss of 0.
pub fn random_policy_set(count: usize, sub_policies: usize, ops_per_sub_policy: usize, seed: u64) -> Result<PolicySet> {
    let mut s = rng::stream(seed, &[tag::RANDOM_POLICY]);
    PolicySet::new(
        (0..count)
            .map(|trial| SelectedPolicy {
                sub_policies: Policy::random(sub_policies, ops_per_sub_policy, &mut s).sub_policies,
                fold: 0,
                round: 0,
                trial,
                loss: 0.0,
            })
            .collect(),
    )
}

/// Accuracy of one fold's frozen probe on its full `D_A` under three treatments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMatchReport {
    pub fold: usize,
    /// No augmentation.
    pub plain: f64,
    /// The fold's selected sub-policies, as one policy.
    pub searched: f64,
    /// The same number of uniformly random sub-policies.
    pub random: f64,
}

/// Compares the fold probe on `T*(D_A)` (this fold's selections) against a
/// random policy of the same size.
pub fn density_match_report(fold: &FoldResult, cfg: &SearchConfig) -> Result<DensityMatchReport> {
    let pool: Vec<SubPolicy> = fold.selected().into_iter().flat_map(|p| p.sub_policies).collect();
    let searched = Policy::new(pool)?;
    let mut s = rng::stream(cfg.seed, &[tag::RANDOM_POLICY, fold.fold as u64]);
    let random = Policy::random(searched.sub_policies.len(), cfg.ops_per_sub_policy, &mut s);
    let d_a = fold.split.d_a.images();
    let eval = |p: &Policy| {
        let s = rng::stream(cfg.seed, &[tag::EVALUATE, fold.fold as u64, u64::MAX]);
        evaluate_policy(&fold.model, p, d_a, s).map(|m| m.accuracy)
    };
    Ok(DensityMatchReport {
        fold: fold.fold,
        plain: fold.d_a_metrics.accuracy,
        searched: eval(&searched)?,
        random: eval(&random)?,
    })
}
