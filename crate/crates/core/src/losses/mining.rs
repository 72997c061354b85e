use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cosine_similarity, TripletInputs};
use crate::retrieval::EmbeddingRecord;
use crate::Result;

/// Batch-hard triplet mining.
///
/// Every record that has at least one same-class partner becomes an anchor,
/// paired with a uniformly drawn positive and the other-class record most
/// cosine-similar to it (lowest index on ties). A batch with fewer than two
/// classes yields no triplets.
pub fn mine_triplets(
    batch: &[EmbeddingRecord],
    margin: f64,
    seed: u64,
) -> Result<Vec<TripletInputs>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, anchor) in batch.iter().enumerate() {
        let positives: Vec<usize> = batch
            .iter()
            .enumerate()
            .filter(|(j, r)| *j != i && r.label == anchor.label)
            .map(|(j, _)| j)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut hardest: Option<(usize, f64)> = None;
        for (j, r) in batch.iter().enumerate() {
            if r.label == anchor.label {
                continue;
            }
            let sim = cosine_similarity(&anchor.embedding, &r.embedding)?;
            if hardest.is_none_or(|(_, best)| sim > best) {
                hardest = Some((j, sim));
            }
        }
        let Some((neg, _)) = hardest else {
            continue;
        };
        let pos = positives[rng.random_range(0..positives.len())];
        out.push(TripletInputs::new(
            anchor.embedding.clone(),
            batch[pos].embedding.clone(),
            batch[neg].embedding.clone(),
            margin,
        ));
    }
    Ok(out)
}
