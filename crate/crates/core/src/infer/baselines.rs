//! Context-selection baselines: uniform subsampling and nearest neighbors.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::table::{ColumnKind, Table};

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("subset size {k} outside 1..={n}")));
    }
    Ok(())
}

/// Uniform subset of `k` rows without replacement, labels kept.
pub fn baseline_random(train: &Table, k: usize, rng: &mut impl Rng) -> Result<Table> {
    check_k(k, train.n_rows())?;
    let idx = rand::seq::index::sample(rng, train.n_rows(), k).into_vec();
    Ok(train.select_rows(&idx))
}

/// Columns used for distances: the numeric ones, or every column when there
/// are none.
fn distance_columns(table: &Table) -> Vec<usize> {
    let numeric: Vec<usize> = (0..table.n_features())
        .filter(|&j| table.columns()[j].kind == ColumnKind::Numeric)
        .collect();
    if numeric.is_empty() {
        (0..table.n_features()).collect()
    } else {
        numeric
    }
}

/// Train row indices by increasing squared Euclidean distance to each test
/// row (ties by index).
pub fn neighbor_lists(train: &Table, test: &Table) -> Vec<Vec<usize>> {
    let cols = distance_columns(train);
    (0..test.n_rows())
        .map(|t| {
            let q = test.row(t);
            let mut d: Vec<(f64, usize)> = (0..train.n_rows())
                .map(|i| {
                    let r = train.row(i);
                    (cols.iter().map(|&j| (r[j] - q[j]).powi(2)).sum(), i)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().map(|(_, i)| i).collect()
        })
        .collect()
}

/// Indices chosen by growing `k` until the union of every test row's `k`
/// nearest neighbors reaches `size`. At the level that overshoots, test rows
/// take turns in random order adding their `k`-th neighbor until exactly
/// `size` rows are chosen. Returned in ascending order.
pub fn knn_indices(train: &Table, test: &Table, size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    check_k(size, train.n_rows())?;
    if test.n_rows() == 0 {
        return Err(Error::Data("nearest-neighbor selection needs test rows".into()));
    }
    train.check_same_schema(test)?;
    let lists = neighbor_lists(train, test);
    let mut chosen = vec![false; train.n_rows()];
    let mut count = 0;
    let mut turn: Vec<usize> = (0..lists.len()).collect();
    'levels: for level in 0..train.n_rows() {
        let fresh: Vec<usize> = {
            let mut f: Vec<usize> = lists.iter().map(|l| l[level]).filter(|&i| !chosen[i]).collect();
            f.sort_unstable();
            f.dedup();
            f
        };
        if count + fresh.len() <= size {
            for i in fresh {
                chosen[i] = true;
                count += 1;
            }
            if count == size {
                break;
            }
            continue;
        }
        turn.shuffle(rng);
        for &t in &turn {
            let i = lists[t][level];
            if !chosen[i] {
                chosen[i] = true;
                count += 1;
                if count == size {
                    break 'levels;
                }
            }
        }
    }
    Ok((0..train.n_rows()).filter(|&i| chosen[i]).collect())
}

pub fn baseline_knn(train: &Table, test: &Table, k: usize, rng: &mut impl Rng) -> Result<Table> {
    let idx = knn_indices(train, test, k, rng)?;
    Ok(train.select_rows(&idx))
}
