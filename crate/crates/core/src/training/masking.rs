//! Token masking and partner sampling for masked-token pretraining.

use kite_smiles::{encode_pair, TokenSequence, Vocabulary, MASK, PAD, SEP};
use rand::seq::index;
use rand::Rng;

use crate::error::{CoreError, Result};

/// Positions replaced by MASK and the ids they held.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

/// `max(1, round(rate · real))`, or 0 when there is nothing to mask.
pub fn mask_count(real: usize, rate: f64) -> usize {
    if real == 0 {
        return 0;
    }
    ((rate * real as f64).round() as usize).clamp(1, real)
}

/// Replaces a uniformly drawn subset of the real (non-PAD, non-SEP) tokens
/// by MASK.
pub fn mask_sequence<R: Rng + ?Sized>(seq: &TokenSequence, rate: f64, rng: &mut R) -> (TokenSequence, MaskingPlan) {
    let candidates: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.mask[i] && seq.ids[i] != PAD && seq.ids[i] != SEP)
        .collect();
    let k = mask_count(candidates.len(), rate);
    let mut positions: Vec<usize> = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();
    let mut out = seq.clone();
    let originals = positions
        .iter()
        .map(|&p| std::mem::replace(&mut out.ids[p], MASK))
        .collect();
    (out, MaskingPlan { positions, originals })
}

/// Partner index for every corpus element: uniform over the others.
pub fn pretrain_partners<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(CoreError::Data(format!("pretraining needs at least 2 molecules, got {n}")));
    }
    Ok((0..n)
        .map(|i| {
            let j = rng.gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// One epoch of pretraining inputs: `corpus[i] SEP corpus[partner(i)]`.
pub fn make_pretrain_pairs<R: Rng + ?Sized>(
    corpus: &[String],
    vocab: &Vocabulary,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<TokenSequence>> {
    let partners = pretrain_partners(corpus.len(), rng)?;
    partners
        .iter()
        .enumerate()
        .map(|(i, &j)| Ok(encode_pair(&corpus[i], &corpus[j], vocab, max_len)?))
        .collect()
}
