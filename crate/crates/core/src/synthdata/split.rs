use rand::seq::SliceRandom;

use super::{DatasetSplit, Volume};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Largest-remainder apportionment of `n` items, guaranteeing at least one
/// item to every non-zero fraction.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| (r + 1e-9).floor() as usize).collect();
    while counts.iter().sum::<usize>() > n {
        let i = (0..3).max_by_key(|&j| counts[j]).unwrap();
        counts[i] -= 1;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    [counts[0], counts[1], counts[2]]
}

/// Shuffles volumes with `seed` and partitions them at the volume level.
pub fn split_dataset(volumes: Vec<Volume>, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(Error::validation("fractions", "must be non-negative"));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::validation("fractions", "must sum to 1"));
    }
    let nonzero = fr.iter().filter(|f| **f > 0.0).count();
    if volumes.len() < nonzero {
        return Err(Error::validation(
            "volumes",
            format!("{} volumes cannot fill {nonzero} non-empty splits", volumes.len()),
        ));
    }
    let counts = apportion(volumes.len(), fr);
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.shuffle(&mut stream(seed, tag::SPLIT));

    let mut slots: Vec<Option<Volume>> = volumes.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Volume> {
        idx.iter().map(|&i| slots[i].take().expect("each volume once")).collect()
    };
    let (a, rest) = order.split_at(counts[0]);
    let (b, c) = rest.split_at(counts[1]);
    Ok(DatasetSplit {
        train: take(a),
        val: take(b),
        test: take(c),
    })
}

/// Indices of the volumes [`subsample_unlabeled`] keeps, ascending.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::validation("unlabeled_fraction", "must lie in [0, 1]"));
    }
    let keep = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if keep >= n {
        return Ok((0..n).collect());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, tag::UNLABELED_SUBSAMPLE));
    let mut chosen: Vec<usize> = idx.into_iter().take(keep).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Keeps `ceil(fraction · n)` volumes chosen without replacement, preserving
/// input order. `fraction = 0` yields nothing.
pub fn subsample_unlabeled(volumes: &[Volume], fraction: f64, seed: u64) -> Result<Vec<Volume>> {
    Ok(subsample_indices(volumes.len(), fraction, seed)?
        .into_iter()
        .map(|i| volumes[i].clone())
        .collect())
}
