//! Parameter exchange: perturbing the dynamic coefficients and training
//! on the joint perturbed/non-perturbed objective.
//!
//! Three perturbations over the per-instance simplex rows λ(x):
//! cross-instance exchange (rows swapped between batch elements),
//! cross-kernel exchange (entries permuted within a row), and convex
//! mixing with a partner row. The joint loss is
//! `CE(clean) + β·CE(perturbed)`.

use crate::data::Batch;
use crate::dynconv::{Model, ModelVars};
use crate::error::{bail, Result};
use crate::tensor::{Graph, Scalar, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    None,
    CrossInstance,
    CrossKernel,
    Mix,
}

/// Partner selection for cross-instance exchange and mixing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartnerRule {
    #[serde(rename = "wRand")]
    Random,
    #[serde(rename = "wSC")]
    SameClass,
    #[serde(rename = "wDC")]
    DifferentClass,
    #[serde(rename = "wSD")]
    SameDomain,
    #[serde(rename = "wDD")]
    DifferentDomain,
}

impl PartnerRule {
    pub const ALL: [PartnerRule; 5] = [
        PartnerRule::Random,
        PartnerRule::SameClass,
        PartnerRule::DifferentClass,
        PartnerRule::SameDomain,
        PartnerRule::DifferentDomain,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationPlan {
    pub mode: PerturbMode,
    /// used by cross-instance and mix only
    pub partner_rule: PartnerRule,
    /// weight of the perturbed feed-forward term
    pub beta: f64,
    /// test hook: force every cross-kernel permutation to the identity
    #[serde(skip)]
    pub force_identity_ck: bool,
}

impl Default for PerturbationPlan {
    fn default() -> Self {
        PerturbationPlan {
            mode: PerturbMode::None,
            partner_rule: PartnerRule::Random,
            beta: 1.0,
            force_identity_ck: false,
        }
    }
}

impl PerturbationPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bail!(Config, "beta must be a finite non-negative value, got {}", self.beta);
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.mode != PerturbMode::None
    }
}

/// Partner map over batch indices. `wRand` produces a genuine permutation;
/// the constrained rules may fall back to `map[b] == b` when no eligible
/// partner exists, so the result is a map rather than a bijection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartnerAssignment {
    pub map: Vec<usize>,
    pub rule: PartnerRule,
}

impl PartnerAssignment {
    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.map.len()];
        for &m in &self.map {
            if m >= self.map.len() || seen[m] {
                return false;
            }
            seen[m] = true;
        }
        true
    }

    /// Checks every entry against the rule: either the constraint holds or
    /// the entry is a self-fallback with no eligible partner.
    pub fn validate(&self, labels: &[usize], domains: &[usize]) -> Result<()> {
        if self.map.len() != labels.len() || labels.len() != domains.len() {
            bail!(Dim, "assignment/labels/domains lengths differ");
        }
        match self.rule {
            PartnerRule::Random => {
                if !self.is_permutation() {
                    bail!(Contract, "wRand assignment must be a permutation");
                }
                Ok(())
            }
            rule => {
                for (b, &p) in self.map.iter().enumerate() {
                    if p >= self.map.len() {
                        bail!(Contract, "partner {p} out of range");
                    }
                    let eligible = |j: usize| eligible_partner(rule, b, j, labels, domains);
                    if eligible(p) {
                        continue;
                    }
                    let fallback_ok =
                        p == b && (0..self.map.len()).all(|j| !eligible(j));
                    if !fallback_ok {
                        bail!(
                            Contract,
                            "entry {b}->{p} violates {:?} and is not a valid self-fallback",
                            rule
                        );
                    }
                }
                Ok(())
            }
        }
    }
}

fn eligible_partner(rule: PartnerRule, b: usize, j: usize, labels: &[usize], domains: &[usize]) -> bool {
    match rule {
        PartnerRule::Random => true,
        PartnerRule::SameClass => j != b && labels[j] == labels[b],
        PartnerRule::DifferentClass => labels[j] != labels[b],
        PartnerRule::SameDomain => j != b && domains[j] == domains[b],
        PartnerRule::DifferentDomain => domains[j] != domains[b],
    }
}

/// Draws a partner assignment: a uniform permutation for `wRand`, or a
/// uniform choice among eligible partners per instance for the
/// constrained rules (self-fallback when none exists).
pub fn sample_partner_assignment(
    labels: &[usize],
    domains: &[usize],
    rule: PartnerRule,
    rng: &mut ChaCha8Rng,
) -> Result<PartnerAssignment> {
    if labels.len() != domains.len() {
        bail!(Dim, "{} labels but {} domains", labels.len(), domains.len());
    }
    if labels.is_empty() {
        bail!(Config, "cannot sample partners for an empty batch");
    }
    let b = labels.len();
    let map = match rule {
        PartnerRule::Random => {
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(rng);
            perm
        }
        rule => {
            let mut map = Vec::with_capacity(b);
            let mut pool = Vec::with_capacity(b);
            for i in 0..b {
                pool.clear();
                pool.extend((0..b).filter(|&j| eligible_partner(rule, i, j, labels, domains)));
                match pool.len() {
                    0 => map.push(i),
                    n => map.push(pool[rng.gen_range(0..n)]),
                }
            }
            map
        }
    };
    Ok(PartnerAssignment { map, rule })
}

/// Row `b` of the output is row `map[b]` of the input; the gradient routes
/// to the source row's producer.
pub fn cross_instance_exchange<S: Scalar>(
    g: &mut Graph<S>,
    lambda: Var,
    assignment: &PartnerAssignment,
) -> Result<Var> {
    g.gather_rows(lambda, &assignment.map)
}

/// Independent uniform permutations of `0..m`, one per batch row,
/// flattened row-major.
pub fn sample_kernel_perms(batch: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perms = Vec::with_capacity(batch * m);
    let mut row: Vec<usize> = (0..m).collect();
    for _ in 0..batch {
        row.iter_mut().zip(0..m).for_each(|(r, i)| *r = i);
        row.shuffle(rng);
        perms.extend_from_slice(&row);
    }
    perms
}

/// `output[b][k] = λ[b][perm_b(k)]`; each row keeps its multiset of values.
pub fn cross_kernel_exchange<S: Scalar>(g: &mut Graph<S>, lambda: Var, perms: &[usize]) -> Result<Var> {
    g.permute_within_rows(lambda, perms)
}

/// Convex combination `η·λ + (1−η)·partner`.
pub fn parameter_mix<S: Scalar>(g: &mut Graph<S>, lambda: Var, partner: Var, eta: f64) -> Result<Var> {
    g.mix(lambda, partner, eta)
}

/// Both cross-entropy terms plus the sampled perturbation state of one step.
#[derive(Clone, Debug)]
pub struct LossDiagnostics<S> {
    pub ce_clean: S,
    pub ce_perturbed: Option<S>,
    pub assignment: Option<PartnerAssignment>,
    pub eta: Option<f64>,
}

/// A fully built training step: graph, registered parameter handles, and
/// the scalar loss node ready for `backward`.
pub struct JointLossOutput<S> {
    pub graph: Graph<S>,
    pub vars: ModelVars,
    pub loss: Var,
    pub clean_logits: Var,
    pub diagnostics: LossDiagnostics<S>,
}

/// `CE(clean) + β·CE(perturbed)`.
///
/// The clean pass is the standard dynamic forward. The perturbed pass
/// recomputes λ from its own (perturbed) intermediate features at every
/// block and then applies the plan's exchange: cross-instance shares one
/// partner assignment across blocks, cross-kernel draws independent
/// per-instance permutations per block, mix draws one η per step. With
/// `mode = none` or `β = 0` the perturbed pass is skipped entirely and
/// the loss is the plain clean cross-entropy.
pub fn joint_loss<S: Scalar>(
    model: &Model<S>,
    batch: &Batch<S>,
    plan: &PerturbationPlan,
    rng: &mut ChaCha8Rng,
) -> Result<JointLossOutput<S>> {
    plan.validate()?;
    if batch.is_empty() {
        bail!(Config, "joint_loss on an empty batch");
    }
    let mut g = Graph::new();
    let vars = model.register(&mut g)?;
    let x = g.input(&batch.images)?;

    let clean = model.forward(&mut g, x, &vars)?;
    let ce_clean = g.cross_entropy(clean.logits, &batch.labels)?;

    if !plan.is_active() || plan.beta == 0.0 {
        let diagnostics = LossDiagnostics {
            ce_clean: g.scalar_value(ce_clean)?,
            ce_perturbed: None,
            assignment: None,
            eta: None,
        };
        return Ok(JointLossOutput {
            graph: g,
            vars,
            loss: ce_clean,
            clean_logits: clean.logits,
            diagnostics,
        });
    }

    let mut assignment = None;
    let mut eta = None;
    let perturbed_logits = match plan.mode {
        PerturbMode::None => unreachable!("handled above"),
        PerturbMode::CrossInstance => {
            let a = sample_partner_assignment(&batch.labels, &batch.domains, plan.partner_rule, rng)?;
            debug_assert!(
                a.validate(&batch.labels, &batch.domains).is_ok(),
                "sampled assignment violates {:?}",
                plan.partner_rule
            );
            let out = model.forward_with(&mut g, x, &vars, |g, _, lam| {
                cross_instance_exchange(g, lam, &a)
            })?;
            assignment = Some(a);
            out.logits
        }
        PerturbMode::CrossKernel => {
            let force = plan.force_identity_ck;
            let out = model.forward_with(&mut g, x, &vars, |g, _, lam| {
                let (b, m) = match g.shape(lam) {
                    [b, m] => (*b, *m),
                    s => bail!(Dim, "coefficients must be B×M, got {s:?}"),
                };
                let perms = if force {
                    (0..b).flat_map(|_| 0..m).collect::<Vec<_>>()
                } else {
                    sample_kernel_perms(b, m, rng)
                };
                cross_kernel_exchange(g, lam, &perms)
            })?;
            out.logits
        }
        PerturbMode::Mix => {
            let a = sample_partner_assignment(&batch.labels, &batch.domains, plan.partner_rule, rng)?;
            debug_assert!(
                a.validate(&batch.labels, &batch.domains).is_ok(),
                "sampled assignment violates {:?}",
                plan.partner_rule
            );
            let e = rng.gen::<f64>();
            let out = model.forward_with(&mut g, x, &vars, |g, _, lam| {
                let partner = cross_instance_exchange(g, lam, &a)?;
                parameter_mix(g, lam, partner, e)
            })?;
            assignment = Some(a);
            eta = Some(e);
            out.logits
        }
    };
    let ce_perturbed = g.cross_entropy(perturbed_logits, &batch.labels)?;
    let scaled = g.scale(ce_perturbed, plan.beta)?;
    let loss = g.add(ce_clean, scaled)?;

    let diagnostics = LossDiagnostics {
        ce_clean: g.scalar_value(ce_clean)?,
        ce_perturbed: Some(g.scalar_value(ce_perturbed)?),
        assignment,
        eta,
    };
    Ok(JointLossOutput {
        graph: g,
        vars,
        loss,
        clean_logits: clean.logits,
        diagnostics,
    })
}
