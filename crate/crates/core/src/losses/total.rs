use std::collections::BTreeMap;

use tubeseg_autodiff::{Tape, Tensor, Var};

use super::aux::{
    instance_discrimination_loss, tube_id_cross_entropy, video_semantic_loss, INSTANCE_TEMPERATURE,
};
use super::depth::{depth_loss, SILOG_LAMBDA};
use super::pq::{pq_style_loss, PqFactors, NEG_WEIGHT};
use super::targets::ClipTargets;
use crate::error::{Error, Result};
use crate::model::ClipForward;

pub const PQ_POS: &str = "pq_pos";
pub const PQ_NEG: &str = "pq_neg";
pub const TUBE_ID: &str = "tube_id_ce";
pub const SEMANTIC: &str = "semantic";
pub const INSTANCE: &str = "instance_disc";
pub const TEMPORAL: &str = "temporal";
pub const DEPTH: &str = "depth";

pub const COMPONENTS: [&str; 7] = [PQ_POS, PQ_NEG, TUBE_ID, SEMANTIC, INSTANCE, TEMPORAL, DEPTH];

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub pq: f64,
    pub tube_id: f64,
    pub semantic: f64,
    pub instance: f64,
    pub temporal: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pq: 1.0,
            tube_id: 1.0,
            semantic: 1.0,
            instance: 1.0,
            temporal: 1.0,
            depth: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight for {name} must be ≥ 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("pq", self.pq),
            ("tube_id", self.tube_id),
            ("semantic", self.semantic),
            ("instance", self.instance),
            ("temporal", self.temporal),
            ("depth", self.depth),
        ]
    }

    /// Effective weight of each reported component.
    pub fn component_weight(&self, component: &str) -> f64 {
        match component {
            PQ_POS => self.pq,
            PQ_NEG => self.pq * NEG_WEIGHT,
            TUBE_ID => self.tube_id,
            SEMANTIC => self.semantic,
            INSTANCE => self.instance,
            TEMPORAL => self.temporal,
            DEPTH => self.depth,
            _ => 0.0,
        }
    }
}

/// Unweighted component values, their weights, and the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<&'static str, f64>,
    pub weights: BTreeMap<&'static str, f64>,
}

impl LossReport {
    /// Aggregates component values; components not given count as 0.
    pub fn from_components(values: &[(&'static str, f64)], weights: &LossWeights) -> Result<Self> {
        weights.validate()?;
        let mut components: BTreeMap<&'static str, f64> =
            COMPONENTS.iter().map(|&c| (c, 0.0)).collect();
        for &(name, v) in values {
            let slot = components
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown loss component {name}")))?;
            *slot += v;
        }
        let weights: BTreeMap<&'static str, f64> = COMPONENTS
            .iter()
            .map(|&c| (c, weights.component_weight(c)))
            .collect();
        let total = COMPONENTS.iter().map(|c| weights[c] * components[c]).sum();
        Ok(Self {
            total,
            components,
            weights,
        })
    }

    /// First component (in reporting order) whose value is not finite.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        COMPONENTS
            .iter()
            .map(|&c| (c, self.components[c]))
            .chain(std::iter::once(("total", self.total)))
            .find(|(_, v)| !v.is_finite())
    }
}

/// Unweighted loss components on one tape; absent ones count as zero.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub terms: Vec<(&'static str, Var)>,
}

impl LossTerms {
    pub fn push(&mut self, name: &'static str, v: Var) {
        self.terms.push((name, v));
    }

    pub fn extend(&mut self, other: LossTerms) {
        self.terms.extend(other.terms);
    }

    /// Weighted sum as a tape scalar, plus the value-level report.
    pub fn aggregate(&self, tape: &mut Tape, weights: &LossWeights) -> Result<(Var, LossReport)> {
        let values: Vec<(&'static str, f64)> = self
            .terms
            .iter()
            .map(|&(n, v)| (n, tape.value(v).item().unwrap_or(f64::NAN)))
            .collect();
        let mut report = LossReport::from_components(&values, weights)?;
        let mut total = tape.constant(Tensor::scalar(0.0));
        for &(name, v) in &self.terms {
            let w = weights.component_weight(name);
            if w == 0.0 {
                continue;
            }
            let scaled = tape.scale(v, w);
            let scaled = tape.reshape(scaled, vec![])?;
            total = tape.add(total, scaled)?;
        }
        report.total = tape.value(total).item().unwrap_or(f64::NAN);
        Ok((total, report))
    }
}

/// Ground truth a clip loss needs beyond the annotation-derived targets.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub targets: &'a ClipTargets,
    pub factors: &'a PqFactors,
    /// Ground-truth depth per pixel, when the clip has it.
    pub depth: Option<&'a [f64]>,
    /// Seed for the instance-loss pixel sample.
    pub seed: u64,
}

/// Every per-clip component with a non-zero weight.
pub fn clip_loss_terms(
    tape: &mut Tape,
    f: &ClipForward,
    inputs: LossInputs<'_>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let mut terms = LossTerms::default();
    if weights.pq > 0.0 {
        let pq = pq_style_loss(
            tape,
            f.class_logits,
            f.tube_probs,
            inputs.targets,
            inputs.factors,
        )?;
        terms.push(PQ_POS, pq.pos);
        terms.push(PQ_NEG, pq.neg);
    }
    if weights.tube_id > 0.0 {
        let v = tube_id_cross_entropy(
            tape,
            f.tube_logits,
            inputs.targets,
            &inputs.factors.matching,
        )?;
        terms.push(TUBE_ID, v);
    }
    if weights.semantic > 0.0 {
        let v = video_semantic_loss(tape, f.semantic_logits, &inputs.targets.pixel_class)?;
        terms.push(SEMANTIC, v);
    }
    if weights.instance > 0.0 {
        let v = instance_discrimination_loss(
            tape,
            f.decoded,
            inputs.targets,
            INSTANCE_TEMPERATURE,
            inputs.seed,
        )?;
        terms.push(INSTANCE, v);
    }
    if weights.depth > 0.0 {
        if let (Some(pred), Some(gt)) = (f.depth, inputs.depth) {
            let valid: Vec<bool> = gt.iter().map(|&d| d > 0.0).collect();
            let v = depth_loss(tape, pred, gt, &valid, SILOG_LAMBDA)?;
            terms.push(DEPTH, v);
        }
    }
    Ok(terms)
}
