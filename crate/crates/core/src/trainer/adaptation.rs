//! Replay buffer of high-reward simulated motion used to refine the predictor
//! on new terrain.

use std::collections::VecDeque;

use rand::Rng;

use super::rollout::Transition;
use crate::error::Result;
use crate::prior::LatentPrior;

/// Share of each insertion batch that is admitted.
pub const ADMIT_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationEntry {
    /// Normalized features of the simulated window before the step.
    pub window: Vec<f64>,
    /// Normalized features of the window after the step.
    pub next_window: Vec<f64>,
    pub reward: f64,
}

/// Ring buffer of `(window, next window, reward)` entries.
#[derive(Clone, Debug)]
pub struct AdaptationBuffer {
    capacity: usize,
    entries: VecDeque<AdaptationEntry>,
}

/// Number admitted from a batch of `b`: `ceil(0.1 b)`, computed exactly.
pub fn admit_count(b: usize) -> usize {
    b.div_ceil(10)
}

/// Indices of the `admit_count(len)` highest rewards; ties go to the earlier
/// index. Returned best first.
pub fn select_top(rewards: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rewards.len()).collect();
    idx.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
    idx.truncate(admit_count(rewards.len()));
    idx
}

impl AdaptationBuffer {
    pub fn new(capacity: usize) -> Self {
        AdaptationBuffer {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &AdaptationEntry> {
        self.entries.iter()
    }

    pub fn push(&mut self, entry: AdaptationEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }
}

/// Admits the top tenth of `batch` by total reward. Returns the number admitted.
pub fn adaptation_insert(buffer: &mut AdaptationBuffer, batch: &[Transition]) -> usize {
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let chosen = select_top(&rewards);
    for &i in &chosen {
        let t = &batch[i];
        buffer.push(AdaptationEntry {
            window: t.window.clone(),
            next_window: t.next_window.clone(),
            reward: t.reward,
        });
    }
    chosen.len()
}

/// Predictor gradient steps on minibatches drawn with replacement from the
/// buffer; the encoder is left untouched. Returns the per-step losses (empty
/// when the buffer is empty).
pub fn finetune_predictor<R: Rng + ?Sized>(
    prior: &mut LatentPrior,
    buffer: &AdaptationBuffer,
    steps: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Ok(Vec::new());
    }
    let batch = batch.max(1);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (mut cur, mut next) = (Vec::with_capacity(batch), Vec::with_capacity(batch));
        for _ in 0..batch {
            let e = &buffer.entries[rng.random_range(0..buffer.len())];
            cur.push(e.window.clone());
            next.push(e.next_window.clone());
        }
        losses.push(prior.predictor_step_on_pairs(&cur, &next)?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn admission_counts() {
        assert_eq!(admit_count(1000), 100);
        assert_eq!(admit_count(37), 4);
        assert_eq!(admit_count(1), 1);
        for b in 1..=1000 {
            assert_eq!(admit_count(b), (b as f64 * ADMIT_FRACTION - 1e-9).ceil() as usize, "B = {b}");
        }
    }

    #[test]
    fn selection_of_best() {
        let r: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(select_top(&r), vec![9]);
    }

    #[test]
    fn ties_prefer_earlier_index() {
        let r = [1.0, 5.0, 5.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(select_top(&r), vec![1, 2]);
    }

    #[test]
    fn ring_eviction() {
        let mut b = AdaptationBuffer::new(3);
        for i in 0..5 {
            b.push(AdaptationEntry {
                window: vec![i as f64],
                next_window: vec![],
                reward: 0.0,
            });
        }
        let kept: Vec<f64> = b.entries().map(|e| e.window[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn chosen_dominate_rest(r in prop::collection::vec(-10.0..10.0f64, 1..200)) {
            let top = select_top(&r);
            prop_assert_eq!(top.len(), r.len().div_ceil(10));
            let worst = top.iter().map(|&i| r[i]).fold(f64::INFINITY, f64::min);
            for (i, x) in r.iter().enumerate() {
                if !top.contains(&i) {
                    prop_assert!(*x <= worst);
                }
            }
        }
    }
}
