//! Mutual-information alignment and layer-wise stability regularization.
//!
//! The MI term is a contrastive (InfoNCE-style) surrogate: per target layer
//! and per anchor token it compares the pooled similarity of the anchor with
//! its positive set (other tokens of the same word) against positives plus
//! negatives (tokens of other words), and the negated sum is normalized by
//! the number of target layers. The stability term penalizes the normalized
//! squared difference between consecutive layers' outputs. Both are ordinary
//! tape expressions, so gradients flow through every hidden state they touch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerTrace;
use crate::tensor::{Scalar, Tensor};

/// Weights, temperature, and layer range for the regularizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarmaConfig {
    /// Eq. 8 trade-off between task loss and the CARMA term.
    pub lambda: Scalar,
    /// Weight of the MI term inside the CARMA loss.
    pub gamma: Scalar,
    /// Weight of the stability term inside the CARMA loss.
    pub eta: Scalar,
    /// Contrastive temperature.
    pub tau: Scalar,
    /// Numerical guard for norms and denominators.
    pub epsilon: Scalar,
    /// First regularized layer (1 = output of block 1; embeddings excluded).
    pub layer_start: usize,
    /// Last regularized layer, inclusive.
    pub layer_end: usize,
    /// Per-anchor cap on sampled negatives.
    pub max_negatives: usize,
    /// Divide the MI loss by the anchor count as well as the layer count.
    pub average_anchors: bool,
    pub seed: u64,
}

impl Default for CarmaConfig {
    fn default() -> Self {
        CarmaConfig {
            lambda: 0.4,
            gamma: 0.5,
            eta: 0.5,
            tau: 0.1,
            epsilon: 1e-8,
            layer_start: 1,
            layer_end: 2,
            max_negatives: 16,
            average_anchors: false,
            seed: 0,
        }
    }
}

impl CarmaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.tau <= 0.0 {
            return Err(Error::config(format!("tau = {} must be > 0", self.tau)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config(format!(
                "epsilon = {} must be > 0",
                self.epsilon
            )));
        }
        if self.layer_start == 0 || self.layer_start > self.layer_end {
            return Err(Error::config(format!(
                "layer range ({}, {}) must satisfy 0 < start <= end",
                self.layer_start, self.layer_end
            )));
        }
        if self.max_negatives == 0 {
            return Err(Error::config("max_negatives must be >= 1"));
        }
        Ok(())
    }

    /// Applies [`default_layer_range`] for a model of depth `n_layers`.
    pub fn with_default_range(mut self, n_layers: usize) -> Result<Self> {
        let (l, k) = default_layer_range(n_layers)?;
        self.layer_start = l;
        self.layer_end = k;
        Ok(self)
    }
}

/// Default regularization range for an `n_layers`-deep model: early-to-mid
/// depth, reproducing the published anchors (12 layers -> 3..=4,
/// 24 layers -> 6..=10).
pub fn default_layer_range(n_layers: usize) -> Result<(usize, usize)> {
    if n_layers < 2 {
        return Err(Error::contract(format!(
            "layer range needs >= 2 layers, got {n_layers}"
        )));
    }
    let l = (n_layers + 3) / 4;
    let k = (n_layers as i64 / 2 - 2)
        .max(l as i64 + 1)
        .min(n_layers as i64 - 1)
        .max(l as i64) as usize;
    Ok((l, k))
}

/// One anchor token with its positive and negative index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub token: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Positive/negative sets for every anchor token in one sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompositionGroups {
    anchors: Vec<Anchor>,
}

impl CompositionGroups {
    /// Validates the set invariants: an anchor is not its own positive, the
    /// sets are disjoint, indices are in range, and positives are nonempty.
    pub fn new(anchors: Vec<Anchor>, n_tokens: usize) -> Result<Self> {
        for a in &anchors {
            if a.positives.is_empty() {
                return Err(Error::contract(format!(
                    "anchor {} has an empty positive set",
                    a.token
                )));
            }
            if a.positives.contains(&a.token) {
                return Err(Error::contract(format!(
                    "anchor {} lists itself as a positive",
                    a.token
                )));
            }
            for &i in a.positives.iter().chain(&a.negatives).chain([&a.token]) {
                if i >= n_tokens {
                    return Err(Error::IndexOutOfRange {
                        what: "composition group index",
                        index: i,
                        bound: n_tokens,
                    });
                }
            }
            if a.positives.iter().any(|p| a.negatives.contains(p)) {
                return Err(Error::contract(format!(
                    "anchor {}: positive and negative sets overlap",
                    a.token
                )));
            }
        }
        Ok(CompositionGroups { anchors })
    }

    /// Builds groups from word spans: every token of a multi-token word is
    /// an anchor, its positives are the word's other tokens, and negatives
    /// are the other words' tokens, subsampled to `max_negatives`.
    /// Single-token words yield no anchor.
    pub fn from_spans(
        spans: &[(usize, usize)],
        n_tokens: usize,
        max_negatives: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut anchors = Vec::new();
        for (w, &(s, e)) in spans.iter().enumerate() {
            if e > n_tokens || s >= e {
                return Err(Error::contract(format!("bad span ({s}, {e})")));
            }
            if e - s < 2 {
                continue;
            }
            let mut other: Vec<usize> = spans
                .iter()
                .enumerate()
                .filter(|&(w2, _)| w2 != w)
                .flat_map(|(_, &(s2, e2))| s2..e2)
                .collect();
            for token in s..e {
                let positives: Vec<usize> = (s..e).filter(|&t| t != token).collect();
                let negatives = if other.len() > max_negatives {
                    other.shuffle(rng);
                    let mut chosen = other[..max_negatives].to_vec();
                    chosen.sort_unstable();
                    chosen
                } else {
                    other.clone()
                };
                anchors.push(Anchor {
                    token,
                    positives,
                    negatives,
                });
            }
        }
        Self::new(anchors, n_tokens)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Cosine similarity with guarded norms; stays within [-1, 1].
pub fn similarity(a: &[Scalar], b: &[Scalar], epsilon: Scalar) -> Result<Scalar> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let dot: Scalar = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: Scalar = a.iter().map(|&x| x * x).sum::<Scalar>().sqrt();
    let nb: Scalar = b.iter().map(|&x| x * x).sum::<Scalar>().sqrt();
    Ok(dot / (na.max(epsilon) * nb.max(epsilon)))
}

/// MI loss value plus its diagnostic anchor count.
pub struct MiLoss {
    pub loss: Tensor,
    /// Total anchors that contributed; zero flags a degenerate batch.
    pub anchor_count: usize,
}

struct RowCache<'a> {
    trace: &'a LayerTrace,
    eps: Scalar,
    rows: BTreeMap<(usize, usize), (Tensor, Tensor)>,
}

impl<'a> RowCache<'a> {
    fn new(trace: &'a LayerTrace, eps: Scalar) -> Self {
        RowCache {
            trace,
            eps,
            rows: BTreeMap::new(),
        }
    }

    fn get(&mut self, layer: usize, token: usize) -> Result<(Tensor, Tensor)> {
        if let Some(entry) = self.rows.get(&(layer, token)) {
            return Ok(entry.clone());
        }
        let row = self.trace.hidden[layer].gather_rows(&[token])?;
        let norm = row.mul(&row)?.sum_all()?.sqrt().clamp_min(self.eps);
        self.rows.insert((layer, token), (row.clone(), norm.clone()));
        Ok((row, norm))
    }

    fn sim(&mut self, layer: usize, i: usize, j: usize) -> Result<Tensor> {
        let (ri, ni) = self.get(layer, i)?;
        let (rj, nj) = self.get(layer, j)?;
        let dot = ri.mul(&rj)?.sum_all()?;
        dot.div(&ni.mul(&nj)?)
    }
}

fn sum_tensors(parts: &[Tensor]) -> Result<Tensor> {
    let mut it = parts.iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::contract("sum of no tensors"))?
        .clone();
    for t in it {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

fn check_range(trace: &LayerTrace, cfg: &CarmaConfig) -> Result<()> {
    if cfg.layer_end > trace.n_layers() {
        return Err(Error::contract(format!(
            "layer range end {} exceeds trace depth {}",
            cfg.layer_end,
            trace.n_layers()
        )));
    }
    Ok(())
}

/// Contrastive MI loss over several traced sequences sharing one tape.
///
/// Per target layer `k` and anchor `i` the contribution is
/// `log sum_pos exp(sim/tau) - log (sum_pos exp(sim/tau) + sum_neg
/// exp(sim/tau))`; the total is negated and divided by the number of target
/// layers (and by the anchor count when `average_anchors` is set). Anchors
/// with no negatives contribute exactly zero, and an empty anchor set yields
/// a zero loss flagged through [`MiLoss::anchor_count`].
pub fn mi_loss_batch(
    items: &[(&LayerTrace, &CompositionGroups)],
    cfg: &CarmaConfig,
) -> Result<MiLoss> {
    cfg.validate()?;
    let first = items
        .first()
        .ok_or_else(|| Error::contract("mi_loss over an empty batch"))?;
    let tape = first.0.hidden[0].tape().clone();
    let n_layers_in_range = cfg.layer_end - cfg.layer_start + 1;

    let mut terms: Vec<Tensor> = Vec::new();
    let mut anchor_count = 0usize;
    for (trace, groups) in items {
        check_range(trace, cfg)?;
        let n_tokens = trace.hidden[0].shape()[0];
        let mut cache = RowCache::new(trace, cfg.epsilon);
        for anchor in groups.anchors() {
            if anchor.token >= n_tokens {
                return Err(Error::IndexOutOfRange {
                    what: "anchor token",
                    index: anchor.token,
                    bound: n_tokens,
                });
            }
            anchor_count += 1;
            for k in cfg.layer_start..=cfg.layer_end {
                let mut pos_sims = Vec::with_capacity(anchor.positives.len());
                for &j in &anchor.positives {
                    pos_sims.push(cache.sim(k, anchor.token, j)?);
                }
                let mut neg_sims = Vec::with_capacity(anchor.negatives.len());
                for &m in &anchor.negatives {
                    neg_sims.push(cache.sim(k, anchor.token, m)?);
                }
                // Shared max shift keeps the exponentials bounded and cancels
                // exactly between the two logs.
                let inv_tau = 1.0 / cfg.tau;
                let shift = pos_sims
                    .iter()
                    .chain(&neg_sims)
                    .map(|s| s.values()[0] * inv_tau)
                    .fold(Scalar::NEG_INFINITY, Scalar::max);
                let exps = |sims: &[Tensor]| -> Result<Vec<Tensor>> {
                    sims.iter()
                        .map(|s| Ok(s.mul_scalar(inv_tau).add_scalar(-shift).exp()))
                        .collect()
                };
                let pos_exps = exps(&pos_sims)?;
                let pos_sum = sum_tensors(&pos_exps)?;
                let all_sum = if neg_sims.is_empty() {
                    pos_sum.clone()
                } else {
                    let neg_exps = exps(&neg_sims)?;
                    pos_sum.add(&sum_tensors(&neg_exps)?)?
                };
                terms.push(pos_sum.ln().sub(&all_sum.ln())?);
            }
        }
    }

    if terms.is_empty() {
        log::warn!("mi_loss: no eligible anchors in batch; loss defined as 0");
        return Ok(MiLoss {
            loss: tape.scalar(0.0),
            anchor_count: 0,
        });
    }
    let mut scale = -1.0 / n_layers_in_range as Scalar;
    if cfg.average_anchors {
        scale /= anchor_count as Scalar;
    }
    Ok(MiLoss {
        loss: sum_tensors(&terms)?.mul_scalar(scale),
        anchor_count,
    })
}

/// Single-sequence MI loss.
pub fn mi_loss(trace: &LayerTrace, groups: &CompositionGroups, cfg: &CarmaConfig) -> Result<MiLoss> {
    mi_loss_batch(&[(trace, groups)], cfg)
}

/// Layer-wise stability loss over several traced sequences sharing one tape.
///
/// Per transition `k -> k+1`:
/// `mean_positions ||f_(k+1) - f_k||^2 / (mean ||f_k||^2 + mean ||f_(k+1)||^2
/// + epsilon)`, with means taken over every sequence position in the batch.
/// A range end beyond `L-1` is clamped with a warning since the transition
/// needs layer `k+1`.
pub fn stability_loss_batch(traces: &[&LayerTrace], cfg: &CarmaConfig) -> Result<Tensor> {
    cfg.validate()?;
    let first = traces
        .first()
        .ok_or_else(|| Error::contract("stability_loss over an empty batch"))?;
    let tape = first.hidden[0].tape().clone();
    let depth = first.n_layers();
    for t in traces {
        check_range(t, cfg)?;
        if t.n_layers() != depth {
            return Err(Error::contract("stability_loss: traces differ in depth"));
        }
    }

    let mut end = cfg.layer_end;
    if end > depth - 1 {
        log::warn!(
            "stability range end {end} clamped to {} (transition needs layer k+1)",
            depth - 1
        );
        end = depth - 1;
    }
    if cfg.layer_start > end {
        log::warn!("stability range empty after clamping; loss is 0");
        return Ok(tape.scalar(0.0));
    }

    let total_positions: usize = traces.iter().map(|t| t.hidden[0].shape()[0]).sum();
    let inv_p = 1.0 / total_positions as Scalar;

    let mut total: Option<Tensor> = None;
    for k in cfg.layer_start..=end {
        let mut num_parts = Vec::with_capacity(traces.len());
        let mut den_k_parts = Vec::with_capacity(traces.len());
        let mut den_k1_parts = Vec::with_capacity(traces.len());
        for t in traces {
            let a = &t.hidden[k];
            let b = &t.hidden[k + 1];
            let diff = b.sub(a)?;
            num_parts.push(diff.mul(&diff)?.sum_all()?);
            den_k_parts.push(a.mul(a)?.sum_all()?);
            den_k1_parts.push(b.mul(b)?.sum_all()?);
        }
        let num = sum_tensors(&num_parts)?.mul_scalar(inv_p);
        let den = sum_tensors(&den_k_parts)?
            .mul_scalar(inv_p)
            .add(&sum_tensors(&den_k1_parts)?.mul_scalar(inv_p))?
            .add_scalar(cfg.epsilon);
        let term = num.div(&den)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty range"))
}

/// Single-sequence stability loss.
pub fn stability_loss(trace: &LayerTrace, cfg: &CarmaConfig) -> Result<Tensor> {
    stability_loss_batch(&[trace], cfg)
}

/// `gamma * mi + eta * stability`.
pub fn carma_loss(mi: &Tensor, stability: &Tensor, cfg: &CarmaConfig) -> Result<Tensor> {
    mi.mul_scalar(cfg.gamma).add(&stability.mul_scalar(cfg.eta))
}

/// `(1 - lambda) * task + lambda * carma`.
pub fn total_loss(task: &Tensor, carma: &Tensor, cfg: &CarmaConfig) -> Result<Tensor> {
    task.mul_scalar(1.0 - cfg.lambda)
        .add(&carma.mul_scalar(cfg.lambda))
}
