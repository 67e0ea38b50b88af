//! Filter ranking, footrule distances between rankings, heatmaps and
//! magnitude pruning.

use crate::convstack::{ConvStackSpec, ConvStackWeights};
use crate::error::{Error, Result};
use crate::partition::{extract, KeptLists};
use crate::tensor::Tensor;

/// Filters of one layer ordered by descending l2 norm, ties by index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedFilterList {
    pub layer: String,
    pub epoch: usize,
    pub entries: Vec<(usize, f64)>,
}

impl RankedFilterList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    /// The first `keep` entries.
    pub fn prefix(&self, keep: usize) -> RankedFilterList {
        RankedFilterList {
            entries: self.entries[..keep.min(self.len())].to_vec(),
            ..self.clone()
        }
    }
}

fn sort_ranked(entries: &mut [(usize, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

pub fn rank_filters(bank: &Tensor, layer: impl Into<String>, epoch: usize) -> RankedFilterList {
    let mut entries: Vec<(usize, f64)> = (0..bank.shape()[0])
        .map(|j| (j, bank.row(j).iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect();
    sort_ranked(&mut entries);
    RankedFilterList {
        layer: layer.into(),
        epoch,
        entries,
    }
}

/// Rankings of every conv layer.
pub fn rank_all(weights: &ConvStackWeights, epoch: usize) -> Vec<RankedFilterList> {
    weights
        .layers
        .iter()
        .enumerate()
        .map(|(l, bank)| rank_filters(bank, ConvStackSpec::layer_name(l), epoch))
        .collect()
}

/// `sigma[i]`: 1-based position in list B of the element at position `i + 1`
/// of list A, or `None` when B lacks it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankMap {
    pub sigma: Vec<Option<usize>>,
    /// Length of list B.
    pub len: usize,
}

impl RankMap {
    pub fn from_permutation(perm: &[usize]) -> Self {
        RankMap {
            sigma: perm.iter().map(|&p| Some(p + 1)).collect(),
            len: perm.len(),
        }
    }

    pub fn between(a: &RankedFilterList, b: &RankedFilterList) -> Result<Self> {
        let pos = positions(b)?;
        positions(a)?;
        Ok(RankMap {
            sigma: a.entries.iter().map(|(f, _)| pos.get(f).copied()).collect(),
            len: b.len(),
        })
    }

    fn full(&self) -> Result<Vec<usize>> {
        self.sigma
            .iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::Precondition(format!("position {} has no counterpart", i + 1))))
            .collect()
    }
}

fn positions(list: &RankedFilterList) -> Result<std::collections::HashMap<usize, usize>> {
    let mut pos = std::collections::HashMap::with_capacity(list.len());
    for (k, (f, _)) in list.entries.iter().enumerate() {
        if pos.insert(*f, k + 1).is_some() {
            return Err(Error::Corruption(format!("filter {f} appears twice in {}", list.layer)));
        }
    }
    Ok(pos)
}

/// `sum_i |i - sigma(i)|`.
pub fn footrule(sigma: &RankMap) -> Result<f64> {
    let s = sigma.full()?;
    Ok(s.iter()
        .enumerate()
        .map(|(i, &p)| (i as f64 + 1.0 - p as f64).abs())
        .sum())
}

/// `sum_i w_i |sum_{j<i} w_j - sum_{sigma(j)<sigma(i)} w_j|`.
pub fn weighted_footrule(sigma: &RankMap, weights: &[f64]) -> Result<f64> {
    let s = sigma.full()?;
    if weights.len() != s.len() {
        return Err(Error::dim("footrule weights", s.len(), weights.len()));
    }
    if let Some(w) = weights.iter().find(|&&w| !(w > 0.0)) {
        return Err(Error::Config(format!("footrule weight {w} must be positive")));
    }
    // Weight sitting at each position of B.
    let mut at_b = vec![0.0; sigma.len + 1];
    for (i, &p) in s.iter().enumerate() {
        at_b[p] = weights[i];
    }
    let mut before_b = vec![0.0; sigma.len + 2];
    for p in 1..=sigma.len {
        before_b[p + 1] = before_b[p] + at_b[p];
    }
    let mut before_a = 0.0;
    let mut total = 0.0;
    for (i, &p) in s.iter().enumerate() {
        total += weights[i] * (before_a - before_b[p]).abs();
        before_a += weights[i];
    }
    Ok(total)
}

/// `sum_i (1/i) |ln i - ln sigma(i)|`; an element of A missing from B adds
/// `(1/i) |ln(l + 1) - ln i|` with `l = len(B)`.
pub fn filter_distance(a: &RankedFilterList, b: &RankedFilterList) -> Result<f64> {
    let map = RankMap::between(a, b)?;
    let tail = (map.len as f64 + 1.0).ln();
    Ok(map
        .sigma
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let i = k as f64 + 1.0;
            let target = s.map_or(tail, |p| (p as f64).ln());
            (i.ln() - target).abs() / i
        })
        .sum())
}

/// Entry `(i, j)` is `filter_distance(snapshots[i], snapshots[j])`.
pub fn pairwise_heatmap(snapshots: &[RankedFilterList]) -> Result<Tensor> {
    if snapshots.len() < 2 {
        return Err(Error::Precondition("heatmap needs at least two snapshots".into()));
    }
    if let Some(s) = snapshots.iter().find(|s| s.layer != snapshots[0].layer) {
        return Err(Error::Precondition(format!(
            "heatmap mixes layers {} and {}",
            snapshots[0].layer, s.layer
        )));
    }
    let e = snapshots.len();
    let mut h = Tensor::zeros(&[e, e]);
    for i in 0..e {
        for j in 0..e {
            if i != j {
                h.data_mut()[i * e + j] = filter_distance(&snapshots[i], &snapshots[j])?;
            }
        }
    }
    Ok(h)
}

/// Heatmap over the top-`keep` prefixes of each snapshot, the ranking a
/// pruned model would see.
pub fn pruned_heatmap(snapshots: &[RankedFilterList], ratio: f64) -> Result<Tensor> {
    let trimmed: Vec<RankedFilterList> = snapshots.iter().map(|s| s.prefix(kept_count(s.len(), ratio))).collect();
    pairwise_heatmap(&trimmed)
}

/// `curve[t]` = mean over layers of the distance from snapshot `t` to the last
/// snapshot. `per_layer[l][t]` is layer `l` at time `t`.
pub fn distance_to_final(per_layer: &[Vec<RankedFilterList>]) -> Result<Vec<f64>> {
    let Some(first) = per_layer.first() else {
        return Err(Error::Precondition("no tracked layers".into()));
    };
    let e = first.len();
    if e < 2 || per_layer.iter().any(|l| l.len() != e) {
        return Err(Error::Precondition(
            "distance_to_final needs >= 2 aligned snapshots".into(),
        ));
    }
    let mut curve = vec![0.0; e];
    for snaps in per_layer {
        let last = &snaps[e - 1];
        for (t, s) in snaps.iter().enumerate().take(e - 1) {
            curve[t] += filter_distance(s, last)?;
        }
    }
    curve.iter_mut().for_each(|v| *v /= per_layer.len() as f64);
    Ok(curve)
}

/// Per-layer kept-filter sets of a magnitude-pruned ticket.
#[derive(Debug, Clone, PartialEq)]
pub struct TicketMask {
    /// Sorted kept filters of each block's first conv; `None` for sensitive
    /// blocks, which are kept whole.
    pub kept: KeptLists,
    pub ratio: f64,
    pub skipped: Vec<String>,
}

/// Filters left after removing `floor(ratio * p)` of `p`.
pub fn kept_count(p: usize, ratio: f64) -> usize {
    p - ((ratio * p as f64 + 1e-9).floor() as usize).min(p)
}

/// Removes the lowest-norm `ratio` fraction of the first-conv filters of every
/// partitionable block; the next conv loses the matching input channels.
pub fn prune_filters(weights: &ConvStackWeights, spec: &ConvStackSpec, ratio: f64) -> Result<TicketMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("pruning ratio {ratio} outside [0,1)")));
    }
    weights.check(spec)?;
    let mut skipped = Vec::new();
    let kept = spec
        .blocks
        .iter()
        .enumerate()
        .map(|(b, blk)| {
            if blk.sensitive {
                skipped.push(ConvStackSpec::layer_name(2 * b));
                return Ok(None);
            }
            let keep = kept_count(blk.mid, ratio);
            if keep == 0 {
                return Err(Error::OverPrune {
                    layer: ConvStackSpec::layer_name(2 * b),
                });
            }
            let ranked = rank_filters(&weights.layers[2 * b], "", 0);
            let mut idx: Vec<usize> = ranked.entries[..keep].iter().map(|e| e.0).collect();
            idx.sort_unstable();
            Ok(Some(idx))
        })
        .collect::<Result<KeptLists>>()?;
    Ok(TicketMask { kept, ratio, skipped })
}

/// Reduced model of a ticket.
pub fn apply_ticket(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    mask: &TicketMask,
) -> Result<(ConvStackSpec, ConvStackWeights)> {
    extract(weights, spec, &mask.kept)
}
