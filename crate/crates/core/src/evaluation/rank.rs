use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::MetricRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub model_id: String,
    /// Mean of the two per-metric ranks.
    pub rank: f64,
    pub dice_rank: f64,
    pub uvd_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    /// Sorted by model id.
    pub entries: Vec<RankEntry>,
    pub n_seeds: usize,
    pub n_volumes: usize,
}

impl RankTable {
    pub fn get(&self, model_id: &str) -> Option<&RankEntry> {
        self.entries.iter().find(|e| e.model_id == model_id)
    }
}

/// Ranks `1..=n`, best first, with ties sharing their average rank.
fn average_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (values[a], values[b]);
        let o = x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal);
        if higher_is_better {
            o.reverse()
        } else {
            o
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks models per (seed, volume) separately on slice-mean Dice (higher is
/// better) and UVD (lower is better), then averages over volumes, seeds and
/// the two metrics.
pub fn rank_models(records: &[MetricRecord]) -> Result<RankTable> {
    type Cell<'a> = (&'a str, u64, (&'a str, &'a str));
    let mut sums: BTreeMap<Cell, (f64, f64, usize)> = BTreeMap::new();
    let mut models = BTreeSet::new();
    let mut seeds = BTreeSet::new();
    let mut volumes = BTreeSet::new();
    for r in records {
        let vol = (r.domain_id.as_str(), r.volume_id.as_str());
        models.insert(r.model_id.as_str());
        seeds.insert(r.seed);
        volumes.insert(vol);
        let e = sums.entry((&r.model_id, r.seed, vol)).or_default();
        e.0 += r.dice;
        e.1 += r.uvd;
        e.2 += 1;
    }
    if models.is_empty() {
        return Err(Error::validation("records", "no metric records to rank"));
    }
    let mut missing = Vec::new();
    for &m in &models {
        for &s in &seeds {
            for &v in &volumes {
                if !sums.contains_key(&(m, s, v)) {
                    missing.push(format!("(model={m}, seed={s}, volume={}/{})", v.0, v.1));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Missing(format!("metric cells: {}", missing.join(", "))));
    }
    let models: Vec<&str> = models.into_iter().collect();
    let mut dice_total = vec![0.0; models.len()];
    let mut uvd_total = vec![0.0; models.len()];
    for &s in &seeds {
        for &v in &volumes {
            let cell: Vec<(f64, f64)> = models
                .iter()
                .map(|&m| {
                    let (d, u, n) = sums[&(m, s, v)];
                    (d / n as f64, u / n as f64)
                })
                .collect();
            let dice: Vec<f64> = cell.iter().map(|c| c.0).collect();
            let uvd: Vec<f64> = cell.iter().map(|c| c.1).collect();
            for (k, r) in average_ranks(&dice, true).into_iter().enumerate() {
                dice_total[k] += r;
            }
            for (k, r) in average_ranks(&uvd, false).into_iter().enumerate() {
                uvd_total[k] += r;
            }
        }
    }
    let cells = (seeds.len() * volumes.len()) as f64;
    let entries = models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let dice_rank = dice_total[k] / cells;
            let uvd_rank = uvd_total[k] / cells;
            RankEntry {
                model_id: m.to_string(),
                rank: 0.5 * (dice_rank + uvd_rank),
                dice_rank,
                uvd_rank,
            }
        })
        .collect();
    Ok(RankTable {
        entries,
        n_seeds: seeds.len(),
        n_volumes: volumes.len(),
    })
}
