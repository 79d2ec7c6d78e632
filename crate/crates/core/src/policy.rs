//! Stochastic operations, sub-policies, policies and the policy-augmented dataset.
//!
//! An [`OperationSpec`] fires with probability `p`; a [`SubPolicy`] chains
//! its operations, each acting on the previous output; a [`Policy`] is a set
//! of sub-policies and `T(D)` is the union of every sub-policy applied to
//! every image of `D`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imageops::{apply_op, Image, OpArgs, OpKind};
use crate::rng::Stream;

pub const DEFAULT_OPS_PER_SUB_POLICY: usize = 2;
pub const DEFAULT_SUB_POLICIES: usize = 5;
pub const POLICY_SET_VERSION: u32 = 1;

/// One operation with its calling probability and magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationSpec {
    pub kind: OpKind,
    pub p: f64,
    pub lambda: f64,
}

impl OperationSpec {
    pub fn new(kind: OpKind, p: f64, lambda: f64) -> Result<Self> {
        let spec = Self { kind, p, lambda };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Domain(format!("{}: probability {} outside [0, 1]", self.kind, self.p)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Domain(format!("{}: magnitude {} outside [0, 1]", self.kind, self.lambda)));
        }
        Ok(())
    }
}

impl std::str::FromStr for OperationSpec {
    type Err = Error;

    /// Parses `Kind:p:lambda`, e.g. `Rotate:0.7:0.3`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [kind, p, lambda] = parts[..] else {
            return Err(Error::Usage(format!("operation '{s}' is not Kind:p:lambda")));
        };
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Usage(format!("'{v}' in '{s}' is not a number")))
        };
        OperationSpec::new(kind.parse()?, num(p)?, num(lambda)?)
    }
}

/// An ordered sequence of operations applied one after another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubPolicy {
    ops: Vec<OperationSpec>,
}

impl SubPolicy {
    pub fn new(ops: Vec<OperationSpec>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Argument("a sub-policy needs at least one operation".into()));
        }
        for op in &ops {
            op.validate()?;
        }
        Ok(Self { ops })
    }

    pub fn ops(&self) -> &[OperationSpec] {
        &self.ops
    }

    /// True when no operation can ever fire.
    pub fn is_inert(&self) -> bool {
        self.ops.iter().all(|op| op.p == 0.0)
    }
}

impl std::str::FromStr for SubPolicy {
    type Err = Error;

    /// Parses comma-separated operations, e.g. `Invert:0.5:0,Rotate:0.5:0.8`.
    fn from_str(s: &str) -> Result<Self> {
        SubPolicy::new(s.split(',').map(str::parse).collect::<Result<_>>()?)
    }
}

/// A set of sub-policies; the unit the optimizer searches over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub sub_policies: Vec<SubPolicy>,
}

impl Policy {
    pub fn new(sub_policies: Vec<SubPolicy>) -> Result<Self> {
        if sub_policies.is_empty() {
            return Err(Error::Argument("a policy needs at least one sub-policy".into()));
        }
        Ok(Self { sub_policies })
    }

    /// `sub_policies` copies of a sub-policy whose operations never fire.
    pub fn identity(sub_policies: usize, ops_per_sub_policy: usize) -> Self {
        let inert = OperationSpec {
            kind: OpKind::ShearX,
            p: 0.0,
            lambda: 0.0,
        };
        Self {
            sub_policies: vec![
                SubPolicy {
                    ops: vec![inert; ops_per_sub_policy]
                };
                sub_policies
            ],
        }
    }

    /// Uniformly random kinds, probabilities and magnitudes.
    pub fn random(sub_policies: usize, ops_per_sub_policy: usize, rng: &mut impl Rng) -> Self {
        let sub_policies = (0..sub_policies)
            .map(|_| SubPolicy {
                ops: (0..ops_per_sub_policy)
                    .map(|_| OperationSpec {
                        kind: OpKind::ALL[rng.random_range(0..OpKind::COUNT)],
                        p: rng.random(),
                        lambda: rng.random(),
                    })
                    .collect(),
            })
            .collect();
        Self { sub_policies }
    }
}

/// Where a selected policy came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub fold: usize,
    pub round: usize,
    pub trial: usize,
    pub loss: f64,
}

/// A selected policy with its provenance; one element of the persisted set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedPolicy {
    pub sub_policies: Vec<SubPolicy>,
    pub fold: usize,
    pub round: usize,
    #[serde(default)]
    pub trial: usize,
    pub loss: f64,
}

impl SelectedPolicy {
    pub fn new(policy: Policy, provenance: Provenance) -> Self {
        Self {
            sub_policies: policy.sub_policies,
            fold: provenance.fold,
            round: provenance.round,
            trial: provenance.trial,
            loss: provenance.loss,
        }
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            fold: self.fold,
            round: self.round,
            trial: self.trial,
            loss: self.loss,
        }
    }
}

/// The merged output of a search: every selected policy of every fold and round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    pub version: u32,
    pub policies: Vec<SelectedPolicy>,
}

impl PolicySet {
    pub fn new(policies: Vec<SelectedPolicy>) -> Result<Self> {
        let set = Self {
            version: POLICY_SET_VERSION,
            policies,
        };
        set.validate()?;
        Ok(set)
    }

    /// A one-policy set holding the given sub-policies, with zeroed provenance.
    pub fn from_sub_policies(sub_policies: Vec<SubPolicy>) -> Result<Self> {
        Self::new(vec![SelectedPolicy {
            sub_policies,
            fold: 0,
            round: 0,
            trial: 0,
            loss: 0.0,
        }])
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != POLICY_SET_VERSION {
            return Err(Error::Usage(format!("unsupported policy set version {}", self.version)));
        }
        if self.policies.is_empty() {
            return Err(Error::Argument("policy set is empty".into()));
        }
        for (i, p) in self.policies.iter().enumerate() {
            if !p.loss.is_finite() {
                return Err(Error::Argument(format!("policy {i} has non-finite loss {}", p.loss)));
            }
            if p.sub_policies.is_empty() {
                return Err(Error::Argument(format!("policy {i} has no sub-policies")));
            }
            for sp in &p.sub_policies {
                if sp.ops.is_empty() {
                    return Err(Error::Argument(format!("policy {i} has an empty sub-policy")));
                }
                for op in &sp.ops {
                    op.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// All sub-policies of all policies, in order.
    pub fn sub_policy_pool(&self) -> Vec<SubPolicy> {
        self.policies
            .iter()
            .flat_map(|p| p.sub_policies.iter().cloned())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: PolicySet = serde_json::from_str(s)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Candidate partners for SamplePairing: a pool of images and the position
/// of the image being augmented (excluded from the draw).
#[derive(Clone, Copy, Debug)]
pub struct Partners<'a> {
    pub pool: &'a [Image],
    pub self_index: Option<usize>,
}

impl<'a> Partners<'a> {
    pub fn new(pool: &'a [Image], self_index: Option<usize>) -> Self {
        Self { pool, self_index }
    }

    fn draw(&self, rng: &mut impl Rng) -> Result<&'a Image> {
        let n = self.pool.len();
        match self.self_index {
            Some(i) if i < n => {
                if n < 2 {
                    return Err(Error::Argument("SamplePairing needs at least one other image".into()));
                }
                let j = rng.random_range(0..n - 1);
                Ok(&self.pool[if j >= i { j + 1 } else { j }])
            }
            _ => {
                if n == 0 {
                    return Err(Error::Argument("SamplePairing partner pool is empty".into()));
                }
                Ok(&self.pool[rng.random_range(0..n)])
            }
        }
    }
}

/// Applies `spec` with probability `p`. The Cutout center and the
/// SamplePairing partner are drawn from `rng` only when the operation fires.
pub fn apply_stochastic_op(
    img: &Image,
    spec: &OperationSpec,
    rng: &mut Stream,
    partners: Option<&Partners<'_>>,
) -> Result<Image> {
    Ok(apply_stochastic_op_traced(img, spec, rng, partners)?.0)
}

fn apply_stochastic_op_traced(
    img: &Image,
    spec: &OperationSpec,
    rng: &mut Stream,
    partners: Option<&Partners<'_>>,
) -> Result<(Image, bool)> {
    let roll: f64 = rng.random();
    if roll >= spec.p {
        return Ok((img.clone(), false));
    }
    let out = match spec.kind {
        OpKind::SamplePairing => {
            let partners = partners
                .ok_or_else(|| Error::Argument("SamplePairing requires a partner pool".into()))?;
            let pair = partners.draw(rng)?;
            apply_op(img, spec.kind, spec.lambda, OpArgs::pair(pair))?
        }
        OpKind::Cutout => {
            let y = rng.random_range(0..img.height());
            let x = rng.random_range(0..img.width());
            apply_op(img, spec.kind, spec.lambda, OpArgs::cutout_at(y, x))?
        }
        kind => apply_op(img, kind, spec.lambda, OpArgs::default())?,
    };
    Ok((out, true))
}

/// Runs the operations of `sub_policy` in order on `img`.
pub fn apply_sub_policy(
    img: &Image,
    sub_policy: &SubPolicy,
    rng: &mut Stream,
    partners: Option<&Partners<'_>>,
) -> Result<Image> {
    Ok(apply_sub_policy_traced(img, sub_policy, rng, partners)?.0)
}

/// Like [`apply_sub_policy`], also reporting which operations fired.
pub fn apply_sub_policy_traced(
    img: &Image,
    sub_policy: &SubPolicy,
    rng: &mut Stream,
    partners: Option<&Partners<'_>>,
) -> Result<(Image, Vec<bool>)> {
    let mut current = img.clone();
    let mut fired = Vec::with_capacity(sub_policy.ops.len());
    for op in &sub_policy.ops {
        let (next, applied) = apply_stochastic_op_traced(&current, op, rng, partners)?;
        current = next;
        fired.push(applied);
    }
    Ok((current, fired))
}

/// Lazy `T(D)`: yields every sub-policy applied to every image, sub-policy
/// by sub-policy. SamplePairing partners come from the same image slice.
pub struct AugmentedStream<'a> {
    images: &'a [Image],
    policy: &'a Policy,
    rng: Stream,
    sub_policy: usize,
    image: usize,
}

impl<'a> AugmentedStream<'a> {
    pub fn new(images: &'a [Image], policy: &'a Policy, rng: Stream) -> Self {
        Self {
            images,
            policy,
            rng,
            sub_policy: 0,
            image: 0,
        }
    }

    /// Number of images the stream yields in total.
    pub fn total_len(&self) -> usize {
        self.images.len() * self.policy.sub_policies.len()
    }
}

impl Iterator for AugmentedStream<'_> {
    type Item = Result<Image>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.image == self.images.len() {
            self.image = 0;
            self.sub_policy += 1;
        }
        let sub_policy = self.policy.sub_policies.get(self.sub_policy)?;
        if self.images.is_empty() {
            return None;
        }
        let i = self.image;
        self.image += 1;
        let partners = Partners::new(self.images, Some(i));
        Some(apply_sub_policy(&self.images[i], sub_policy, &mut self.rng, Some(&partners)))
    }
}

/// Materializes `T(D)`: `|T(D)| = N_T · |D|`, labels preserved.
pub fn augment_dataset(data: &Dataset, policy: &Policy, rng: Stream) -> Result<Dataset> {
    let images = AugmentedStream::new(data.images(), policy, rng).collect::<Result<Vec<_>>>()?;
    Dataset::new(format!("{}+policy", data.name()), images, data.class_count())
}
