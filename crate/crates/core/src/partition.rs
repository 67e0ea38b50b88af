//! Filter-wise partition of a conv stack into `S` subnetworks, independent
//! local SGD, and aggregation back into the global model.

use rand::seq::{index, SliceRandom};

use crate::convstack::{loss_and_grad, ConvStackSpec, ConvStackWeights};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Labeled images.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    pub x: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> ImageSet {
        ImageSet {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Kept first-layer filters per block; `None` for blocks carried in full.
pub type KeptLists = Vec<Option<Vec<usize>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SubnetworkSpec {
    pub worker: usize,
    /// Per block, sorted kept filter indices of the first conv, which are
    /// also the kept input channels of the second conv.
    pub kept: KeptLists,
    /// Shape of the reduced model.
    pub stack: ConvStackSpec,
}

impl SubnetworkSpec {
    pub fn shared_blocks(&self) -> Vec<usize> {
        self.kept
            .iter()
            .enumerate()
            .filter(|(_, k)| k.is_none())
            .map(|(b, _)| b)
            .collect()
    }
}

fn check_kept(spec: &ConvStackSpec, kept: &KeptLists) -> Result<()> {
    if kept.len() != spec.blocks.len() {
        return Err(Error::dim("kept lists", spec.blocks.len(), kept.len()));
    }
    for (b, list) in kept.iter().enumerate() {
        let Some(list) = list else { continue };
        let mid = spec.blocks[b].mid;
        if list.is_empty() {
            return Err(Error::OverPrune {
                layer: ConvStackSpec::layer_name(2 * b),
            });
        }
        let mut seen = vec![false; mid];
        for &i in list {
            if i >= mid {
                return Err(Error::Corruption(format!("block {b}: filter {i} out of range {mid}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Corruption(format!("block {b}: filter {i} listed twice")));
            }
        }
    }
    Ok(())
}

/// Reduced spec and copied weights keeping only the listed filters of each
/// block's first conv (and the matching input channels of its second conv).
pub fn extract(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    kept: &KeptLists,
) -> Result<(ConvStackSpec, ConvStackWeights)> {
    weights.check(spec)?;
    check_kept(spec, kept)?;
    let mut sub_spec = spec.clone();
    let mut layers = weights.layers.clone();
    for (b, list) in kept.iter().enumerate() {
        let Some(list) = list else { continue };
        let blk = &spec.blocks[b];
        sub_spec.blocks[b].mid = list.len();
        let w1 = &weights.layers[2 * b];
        let per_filter = blk.c_in * 9;
        let mut d1 = Vec::with_capacity(list.len() * per_filter);
        for &i in list {
            d1.extend_from_slice(&w1.data()[i * per_filter..(i + 1) * per_filter]);
        }
        layers[2 * b] = Tensor::from_vec(&[list.len(), blk.c_in, 3, 3], d1)?;
        let w2 = &weights.layers[2 * b + 1];
        let mut d2 = Vec::with_capacity(blk.out * list.len() * 9);
        for o in 0..blk.out {
            for &i in list {
                let off = (o * blk.mid + i) * 9;
                d2.extend_from_slice(&w2.data()[off..off + 9]);
            }
        }
        layers[2 * b + 1] = Tensor::from_vec(&[blk.out, list.len(), 3, 3], d2)?;
    }
    Ok((
        sub_spec,
        ConvStackWeights {
            layers,
            head: weights.head.clone(),
        },
    ))
}

/// One uniform permutation of the first-conv filters of every partitionable
/// block.
pub fn draw_permutations(spec: &ConvStackSpec, rng: &mut Rng) -> KeptLists {
    spec.blocks
        .iter()
        .map(|b| {
            (!b.sensitive).then(|| {
                let mut perm: Vec<usize> = (0..b.mid).collect();
                perm.shuffle(rng);
                perm
            })
        })
        .collect()
}

/// Partition with a fresh random permutation per block.
pub fn filter_partition(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    workers: usize,
    rng: &mut Rng,
) -> Result<Vec<(SubnetworkSpec, ConvStackWeights)>> {
    spec.validate_workers(workers)?;
    let perms = draw_permutations(spec, rng);
    partition_with(weights, spec, workers, &perms)
}

/// Partition using given permutations: worker `s` gets chunk `s` of each
/// permutation, sorted ascending.
pub fn partition_with(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    workers: usize,
    perms: &KeptLists,
) -> Result<Vec<(SubnetworkSpec, ConvStackWeights)>> {
    spec.validate_workers(workers)?;
    if perms.len() != spec.blocks.len() {
        return Err(Error::dim("partition permutations", spec.blocks.len(), perms.len()));
    }
    (0..workers)
        .map(|s| {
            let kept: KeptLists = perms
                .iter()
                .zip(&spec.blocks)
                .map(|(perm, blk)| {
                    if blk.sensitive {
                        return None;
                    }
                    let chunk = blk.mid / workers;
                    perm.as_ref().map(|p| {
                        let mut c = p[s * chunk..(s + 1) * chunk].to_vec();
                        c.sort_unstable();
                        c
                    })
                })
                .collect();
            if kept.iter().zip(&spec.blocks).any(|(k, b)| !b.sensitive && k.is_none()) {
                return Err(Error::Config("missing permutation for a partitionable block".into()));
            }
            let (stack, sub) = extract(weights, spec, &kept)?;
            Ok((SubnetworkSpec { worker: s, kept, stack }, sub))
        })
        .collect()
}

/// Mean that returns the common value exactly when all inputs agree.
fn exact_mean(first: &Tensor, rest: &[&Tensor]) -> Result<Tensor> {
    let n = (rest.len() + 1) as f64;
    let mut delta = Tensor::zeros(first.shape());
    for t in rest {
        delta.axpy(1.0, &t.sub(first)?)?;
    }
    let mut out = first.clone();
    out.axpy(1.0 / n, &delta)?;
    Ok(out)
}

/// Writes partitioned filters back in place and averages shared parameters
/// over workers (in worker order).
pub fn aggregate(
    global: &ConvStackWeights,
    spec: &ConvStackSpec,
    parts: &[(SubnetworkSpec, ConvStackWeights)],
) -> Result<ConvStackWeights> {
    global.check(spec)?;
    if parts.is_empty() {
        return Err(Error::IncompletePartition("no subnetworks to aggregate".into()));
    }
    let mut ordered: Vec<&(SubnetworkSpec, ConvStackWeights)> = parts.iter().collect();
    ordered.sort_by_key(|(s, _)| s.worker);
    for (s, w) in &ordered {
        check_kept(spec, &s.kept)?;
        w.check(&s.stack)?;
    }
    let mut out = global.clone();
    for (b, blk) in spec.blocks.iter().enumerate() {
        let lists: Vec<Option<&Vec<usize>>> = ordered.iter().map(|(s, _)| s.kept[b].as_ref()).collect();
        let partitioned = lists.iter().filter(|l| l.is_some()).count();
        if partitioned == 0 {
            let (l1, l2) = (2 * b, 2 * b + 1);
            for l in [l1, l2] {
                let rest: Vec<&Tensor> = ordered[1..].iter().map(|(_, w)| &w.layers[l]).collect();
                out.layers[l] = exact_mean(&ordered[0].1.layers[l], &rest)?;
            }
            continue;
        }
        if partitioned != ordered.len() {
            return Err(Error::Corruption(format!(
                "block {b} is partitioned in only {partitioned} of {} subnetworks",
                ordered.len()
            )));
        }
        let mut owner = vec![usize::MAX; blk.mid];
        for (k, list) in lists.iter().enumerate() {
            for &i in list.expect("checked above") {
                if owner[i] != usize::MAX {
                    return Err(Error::Corruption(format!(
                        "block {b}: filter {i} owned by workers {} and {}",
                        ordered[owner[i]].0.worker, ordered[k].0.worker
                    )));
                }
                owner[i] = k;
            }
        }
        if let Some(missing) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::IncompletePartition(format!(
                "block {b}: filter {missing} has no owner"
            )));
        }
        let per_filter = blk.c_in * 9;
        for (k, list) in lists.iter().enumerate() {
            let list = list.expect("checked above");
            let sub = &ordered[k].1;
            let sub_mid = list.len();
            for (pos, &i) in list.iter().enumerate() {
                out.layers[2 * b].data_mut()[i * per_filter..(i + 1) * per_filter]
                    .copy_from_slice(&sub.layers[2 * b].data()[pos * per_filter..(pos + 1) * per_filter]);
                for o in 0..blk.out {
                    let dst = (o * blk.mid + i) * 9;
                    let src = (o * sub_mid + pos) * 9;
                    out.layers[2 * b + 1].data_mut()[dst..dst + 9]
                        .copy_from_slice(&sub.layers[2 * b + 1].data()[src..src + 9]);
                }
            }
        }
    }
    let rest: Vec<&Tensor> = ordered[1..].iter().map(|(_, w)| &w.head).collect();
    out.head = exact_mean(&ordered[0].1.head, &rest)?;
    Ok(out)
}

/// Index batches drawn without replacement within each batch.
pub fn sample_batches(n: usize, batch_size: usize, count: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let size = batch_size.min(n);
    (0..count)
        .map(|_| {
            let mut idx = index::sample(rng, n, size).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// `ell` steps of constant-step SGD on mini-batches drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    data: &ImageSet,
    batch_size: usize,
    ell: usize,
    eta: f64,
    rng: &mut Rng,
    worker: usize,
) -> Result<(ConvStackWeights, f64)> {
    if ell == 0 {
        return Err(Error::Config("local iterations must be at least 1".into()));
    }
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Config("local training needs a nonempty batch".into()));
    }
    let mut w = weights.clone();
    let mut last = f64::NAN;
    for (step, idx) in sample_batches(data.len(), batch_size, ell, rng).into_iter().enumerate() {
        let batch = data.subset(&idx);
        let (loss, g) = loss_and_grad(&w, spec, &batch.x, &batch.labels)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::WorkerDivergence { worker, step, loss });
        }
        if eta != 0.0 {
            w.axpy(-eta, &g)?;
        }
        if !w.is_finite() {
            return Err(Error::WorkerDivergence { worker, step, loss });
        }
        last = loss;
    }
    Ok((w, last))
}
