use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Match;
use crate::proposals::ProposalSet;
use crate::refine::expand_proposals;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    /// Pairs per optimization step.
    pub batch_size: usize,
    /// Proposals drawn per pair before expansion.
    pub per_pair_proposals: usize,
    pub expand: bool,
    pub expand_offset: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            per_pair_proposals: 400,
            expand: true,
            expand_offset: 8.0,
        }
    }
}

/// Flat list of proposals over several pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub proposals: Vec<Match>,
    /// Position of each proposal's pair in the batch.
    pub pair_index: Vec<usize>,
    /// Index of each proposal in its pair's proposal set before expansion.
    pub source_index: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// Draws up to `per_pair_proposals` proposals from each set uniformly
/// without replacement (all of them if fewer exist), then expands each
/// into eight children when enabled.
pub fn sample_batch(sets: &[ProposalSet], config: &BatchConfig, rng: &mut impl Rng) -> TrainingBatch {
    let mut batch = TrainingBatch::default();
    for (p, set) in sets.iter().enumerate() {
        let k = config.per_pair_proposals.min(set.len());
        let mut idx = sample(rng, set.len(), k).into_vec();
        idx.sort_unstable();
        let chosen = set.select(&idx);
        if config.expand {
            let e = expand_proposals(&chosen, config.expand_offset);
            let parents = e.parents.clone().unwrap_or_default();
            batch.proposals.extend(e.matches());
            batch.source_index.extend(parents.iter().map(|&j| idx[j]));
        } else {
            batch.proposals.extend(chosen.matches());
            batch.source_index.extend(idx.iter().copied());
        }
        batch.pair_index.resize(batch.proposals.len(), p);
    }
    batch
}
