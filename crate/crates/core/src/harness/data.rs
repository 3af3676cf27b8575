//! Planted-signal classification data.
//!
//! Each sequence starts with the CLS id. A number of signal tokens is planted
//! at random non-CLS positions and the label is that count modulo the class
//! count; every other position holds a uniformly drawn noise id.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub cls_id: usize,
    pub signal_ids: Vec<usize>,
    /// Largest number of planted signal tokens.
    pub max_signals: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            seq_len: 16,
            classes: 2,
            cls_id: 0,
            signal_ids: vec![1, 2],
            max_signals: 1,
            train_size: 1024,
            eval_size: 512,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub eval: Dataset,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("task.classes", "need at least 2 classes"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("task.seq_len", "need CLS plus at least one position"));
        }
        if self.cls_id >= self.vocab {
            return Err(Error::config("task.cls_id", "outside vocabulary"));
        }
        if self.signal_ids.is_empty() {
            return Err(Error::config("task.signal_ids", "need at least one signal id"));
        }
        for &s in &self.signal_ids {
            if s >= self.vocab || s == self.cls_id {
                return Err(Error::config("task.signal_ids", format!("id {s} is out of range or the CLS id")));
            }
        }
        if self.noise_ids().is_empty() {
            return Err(Error::config("task.vocab", "no ids left for noise tokens"));
        }
        if self.max_signals >= self.seq_len {
            return Err(Error::config(
                "task.max_signals",
                format!("{} signals do not fit in {} non-CLS positions", self.max_signals, self.seq_len - 1),
            ));
        }
        if self.max_signals + 1 < self.classes {
            return Err(Error::config("task.max_signals", "some labels would be unreachable"));
        }
        Ok(())
    }

    pub fn noise_ids(&self) -> Vec<usize> {
        (0..self.vocab)
            .filter(|id| *id != self.cls_id && !self.signal_ids.contains(id))
            .collect()
    }

    /// Label of a token sequence under the counting rule.
    pub fn label_of(&self, tokens: &[usize]) -> usize {
        let count = tokens[1..].iter().filter(|t| self.signal_ids.contains(t)).count();
        count % self.classes
    }
}

fn draw(task: &TaskConfig, n: usize, noise: &[usize], rng: &mut ChaCha8Rng) -> Dataset {
    // labels assigned round-robin then shuffled: exact balance up to n mod classes
    let mut labels: Vec<usize> = (0..n).map(|i| i % task.classes).collect();
    labels.shuffle(rng);
    let examples = labels
        .into_iter()
        .map(|label| {
            let choices: Vec<usize> = (label..=task.max_signals).step_by(task.classes).collect();
            let k = choices[rng.random_range(0..choices.len())];
            let mut tokens: Vec<usize> = (0..task.seq_len)
                .map(|_| noise[rng.random_range(0..noise.len())])
                .collect();
            tokens[0] = task.cls_id;
            for pos in index::sample(rng, task.seq_len - 1, k) {
                tokens[pos + 1] = task.signal_ids[rng.random_range(0..task.signal_ids.len())];
            }
            Example { tokens, label }
        })
        .collect();
    Dataset { examples }
}

pub fn generate_synthetic(task: &TaskConfig) -> Result<SyntheticData> {
    task.validate()?;
    let noise = task.noise_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let train = draw(task, task.train_size, &noise, &mut rng);
    let eval = draw(task, task.eval_size, &noise, &mut rng);
    Ok(SyntheticData { train, eval })
}
