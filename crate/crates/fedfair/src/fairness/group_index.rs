//! Row index over (group, label) cells, built once per dataset.

use std::collections::BTreeMap;

use crate::dataset::TabularDataset;
use crate::error::{Error, Result};

use super::label_bucket;

static EMPTY: Vec<usize> = Vec::new();

/// Immutable partition of a dataset's rows by sensitive group and by
/// (group, label-bucket) cell.
#[derive(Debug, Clone)]
pub struct GroupIndex {
    groups: Vec<usize>,
    by_group: BTreeMap<usize, Vec<usize>>,
    by_cell: BTreeMap<(usize, usize), Vec<usize>>,
    by_label: [Vec<usize>; 2],
}

impl GroupIndex {
    /// Build the index. The dataset must carry a group attribute.
    pub fn build(data: &TabularDataset) -> Result<Self> {
        let group = data.group.as_ref().ok_or_else(|| {
            Error::InvalidConfig("group fairness needs a dataset with group ids".into())
        })?;
        let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut by_cell: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut by_label = [Vec::new(), Vec::new()];
        for (row, (&h, &y)) in group.iter().zip(&data.labels).enumerate() {
            let bucket = label_bucket(y);
            by_group.entry(h).or_default().push(row);
            by_cell.entry((h, bucket)).or_default().push(row);
            by_label[bucket].push(row);
        }
        let groups = by_group.keys().copied().collect();
        Ok(Self {
            groups,
            by_group,
            by_cell,
            by_label,
        })
    }

    /// Distinct group ids, ascending.
    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn rows_group(&self, h: usize) -> &[usize] {
        self.by_group.get(&h).unwrap_or(&EMPTY)
    }

    pub fn rows_group_label(&self, h: usize, label: usize) -> &[usize] {
        self.by_cell.get(&(h, label)).unwrap_or(&EMPTY)
    }

    pub fn rows_label(&self, label: usize) -> &[usize] {
        &self.by_label[label]
    }
}
