//! Per-batch speaker assignment for conversion distillation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::networks::SpeakerEmbedding;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub type SpeakerTable = BTreeMap<usize, SpeakerEmbedding>;

#[derive(Clone, Debug)]
pub struct BatchConditioning {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub tgt2: Vec<usize>,
    pub inv: Vec<usize>,
    pub s_src: Tensor,
    pub s_tgt: Tensor,
    pub s_tgt2: Tensor,
    pub s_inv: Tensor,
    /// Single-speaker batch: targets equal sources and `inv` is empty.
    pub degraded: bool,
}

impl BatchConditioning {
    /// Checks the speaker-level invariants; a no-op for degraded batches.
    pub fn check(&self) -> Result<()> {
        if self.degraded {
            return Ok(());
        }
        for i in 0..self.src.len() {
            if self.tgt[i] == self.src[i] {
                return Err(Error::Conditioning(format!("row {i}: target equals source speaker")));
            }
            if self.inv[i] == self.tgt[i] {
                return Err(Error::Conditioning(format!("row {i}: inverse equals target speaker")));
            }
        }
        Ok(())
    }
}

/// Index permutation `perm` with `labels[perm[i]] != labels[i]` for all `i`.
///
/// Groups equal labels contiguously (random group and member order) and
/// shifts by `k` with `max_group <= k <= n - max_group`; no shift can land
/// inside the element's own group. Infeasible when one label fills more
/// than half the batch.
pub fn label_derangement(labels: &[usize], rng: &mut SeededRng) -> Option<Vec<usize>> {
    let n = labels.len();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let largest = groups.values().map(Vec::len).max()?;
    if groups.len() < 2 || 2 * largest > n {
        return None;
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    rng.shuffle(&mut order);
    for g in &mut order {
        rng.shuffle(g);
    }
    let flat: Vec<usize> = order.into_iter().flatten().collect();
    let k = rng.int_inclusive(largest, n - largest);
    let mut perm = vec![0; n];
    for (pos, &i) in flat.iter().enumerate() {
        perm[i] = flat[(pos + k) % n];
    }
    Some(perm)
}

fn embeddings(ids: &[usize], table: &SpeakerTable) -> Result<Tensor> {
    let embs = ids
        .iter()
        .map(|id| {
            table
                .get(id)
                .ok_or_else(|| Error::Conditioning(format!("no embedding for speaker {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpeakerEmbedding::batch(&embs))
}

/// Builds source, target, second-target and inverse speaker assignments.
///
/// Targets are a speaker-level derangement of the sources, second targets a
/// derangement of the targets, and each inverse speaker is drawn uniformly
/// from batch members whose speaker differs from the target. Batches with a
/// single speaker error in `strict` mode and otherwise degrade to
/// reconstruction.
pub fn build_batch_conditioning(
    speakers: &[usize],
    table: &SpeakerTable,
    rng: &mut SeededRng,
    strict: bool,
) -> Result<BatchConditioning> {
    if speakers.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let s_src = embeddings(speakers, table)?;
    let distinct = speakers.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        if strict {
            return Err(Error::Conditioning("batch holds a single speaker".into()));
        }
        log::warn!("single-speaker batch: falling back to reconstruction");
        return Ok(BatchConditioning {
            src: speakers.to_vec(),
            tgt: speakers.to_vec(),
            tgt2: speakers.to_vec(),
            inv: Vec::new(),
            s_tgt: s_src.clone(),
            s_tgt2: s_src.clone(),
            s_inv: s_src.clone(),
            s_src,
            degraded: true,
        });
    }
    let infeasible = || {
        Error::Conditioning(format!(
            "no speaker derangement exists for batch composition {speakers:?}"
        ))
    };
    let perm = label_derangement(speakers, rng).ok_or_else(infeasible)?;
    let tgt: Vec<usize> = perm.iter().map(|&j| speakers[j]).collect();
    let perm2 = label_derangement(&tgt, rng).ok_or_else(infeasible)?;
    let tgt2: Vec<usize> = perm2.iter().map(|&j| tgt[j]).collect();
    let inv: Vec<usize> = tgt
        .iter()
        .map(|&t| {
            let others: Vec<usize> = speakers.iter().copied().filter(|&s| s != t).collect();
            others[rng.below(others.len())]
        })
        .collect();
    let cond = BatchConditioning {
        s_tgt: embeddings(&tgt, table)?,
        s_tgt2: embeddings(&tgt2, table)?,
        s_inv: embeddings(&inv, table)?,
        s_src,
        src: speakers.to_vec(),
        tgt,
        tgt2,
        inv,
        degraded: false,
    };
    cond.check()?;
    Ok(cond)
}
