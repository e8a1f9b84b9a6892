use std::collections::{BTreeMap, BTreeSet};

use super::select::SampleScore;
use crate::error::{Error, Result};

/// Labeled/unlabeled partition of the training ids plus the latest scores.
#[derive(Clone, Debug, Default)]
pub struct SamplePool {
    labeled: BTreeSet<usize>,
    unlabeled: BTreeSet<usize>,
    scores: BTreeMap<usize, SampleScore>,
}

impl SamplePool {
    /// Every id in `ids` starts unlabeled.
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        SamplePool {
            unlabeled: ids.into_iter().collect(),
            ..SamplePool::default()
        }
    }

    pub fn labeled(&self) -> &BTreeSet<usize> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves `ids` from the unlabeled to the labeled side. Fails without
    /// modifying the pool if any id is not currently unlabeled.
    pub fn mark_labeled(&mut self, ids: &[usize]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in ids {
            if !self.unlabeled.contains(id) || !seen.insert(*id) {
                return Err(Error::Usage(format!("sample {id} is not an unlabeled pool member")));
            }
        }
        for id in ids {
            self.unlabeled.remove(id);
            self.labeled.insert(*id);
        }
        Ok(())
    }

    pub fn set_score(&mut self, score: SampleScore) {
        self.scores.insert(score.sample_id, score);
    }

    pub fn score(&self, id: usize) -> Option<&SampleScore> {
        self.scores.get(&id)
    }

    fn collect(&self, ids: &BTreeSet<usize>) -> Result<Vec<SampleScore>> {
        ids.iter()
            .map(|id| {
                self.scores
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Lookup(format!("no score cached for sample {id}")))
            })
            .collect()
    }

    pub fn unlabeled_scores(&self) -> Result<Vec<SampleScore>> {
        self.collect(&self.unlabeled)
    }

    pub fn labeled_scores(&self) -> Result<Vec<SampleScore>> {
        self.collect(&self.labeled)
    }
}
