//! Deterministic client partitioning: IID or label-sharded non-IID.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TabularDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Uniform shuffle, near-equal chunks.
    Iid,
    /// Each client sees at most `labels_per_client` distinct label values.
    LabelShard { labels_per_client: usize },
}

/// Split `data` into `n` disjoint, covering client shards.
pub fn partition(
    data: &TabularDataset,
    n: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<TabularDataset>> {
    if n == 0 {
        return Err(Error::InfeasiblePartition("zero clients".into()));
    }
    if data.len() < n {
        return Err(Error::InfeasiblePartition(format!(
            "{} rows cannot cover {n} clients",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    match scheme {
        PartitionScheme::Iid => {
            let mut rows: Vec<usize> = (0..data.len()).collect();
            rows.shuffle(&mut rng);
            Ok(chunk_evenly(&rows, n)
                .into_iter()
                .map(|chunk| data.select_rows(&chunk))
                .collect())
        }
        PartitionScheme::LabelShard { labels_per_client } => {
            let mut labels: Vec<f64> = data.labels.clone();
            labels.sort_by(f64::total_cmp);
            labels.dedup_by(|a, b| a == b);
            let num_labels = labels.len();
            if labels_per_client == 0 || labels_per_client > num_labels {
                return Err(Error::InfeasiblePartition(format!(
                    "labels_per_client = {labels_per_client} with {num_labels} distinct labels"
                )));
            }
            if num_labels > n * labels_per_client {
                return Err(Error::InfeasiblePartition(format!(
                    "{num_labels} labels do not fit into {n} x {labels_per_client} shards"
                )));
            }

            // Cycle the label list over n * per shard slots; client c owns the
            // consecutive block [c*per, (c+1)*per), which holds distinct labels
            // because per <= num_labels.
            let slots = n * labels_per_client;
            let mut slots_per_label = vec![0usize; num_labels];
            for slot in 0..slots {
                slots_per_label[slot % num_labels] += 1;
            }

            // Each label's rows are shuffled once, then dealt to its slots.
            let mut chunks_by_label: Vec<Vec<Vec<usize>>> = Vec::with_capacity(num_labels);
            for (li, &label) in labels.iter().enumerate() {
                let mut rows: Vec<usize> = data
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &y)| y == label)
                    .map(|(r, _)| r)
                    .collect();
                if rows.len() < slots_per_label[li] {
                    return Err(Error::InfeasiblePartition(format!(
                        "label {label} has {} rows for {} shard slots",
                        rows.len(),
                        slots_per_label[li]
                    )));
                }
                rows.shuffle(&mut rng);
                let mut chunks = chunk_evenly(&rows, slots_per_label[li]);
                chunks.reverse(); // pop() below then consumes in deal order
                chunks_by_label.push(chunks);
            }

            let mut shards = Vec::with_capacity(n);
            for c in 0..n {
                let mut rows = Vec::new();
                for slot in c * labels_per_client..(c + 1) * labels_per_client {
                    rows.extend(chunks_by_label[slot % num_labels].pop().unwrap());
                }
                rows.sort_unstable();
                shards.push(data.select_rows(&rows));
            }
            Ok(shards)
        }
    }
}

fn chunk_evenly(rows: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = rows.len() / parts;
    let extra = rows.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut offset = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        out.push(rows[offset..offset + size].to_vec());
        offset += size;
    }
    out
}
