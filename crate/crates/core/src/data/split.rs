//! Stratified train/valid/test partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Per-class sizes proportional to the ratios, largest-remainder rounding.
    Ratio([usize; 3]),
    /// Explicit `(train, valid, test)` sizes per class.
    Counts(Vec<[usize; 3]>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::Ratio([4, 1, 2]),
            seed: 0,
        }
    }
}

/// Sample indices for each partition, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `n` by `ratios`; ties favour earlier parts.
pub(crate) fn apportion(n: usize, ratios: [usize; 3]) -> [usize; 3] {
    let total: usize = ratios.iter().sum();
    let mut sizes = ratios.map(|r| n * r / total);
    let mut rem: Vec<(usize, usize)> = (0..3).map(|i| (n * ratios[i] % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = n - sizes.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(left) {
        sizes[i] += 1;
    }
    sizes
}

pub fn split(labels: &[usize], class_names: &[String], spec: &SplitSpec) -> Result<Splits> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let SplitMode::Ratio(r) = &spec.mode {
        if r.contains(&0) {
            return Err(crate::error::config("split ratios must be positive"));
        }
    }
    if let SplitMode::Counts(c) = &spec.mode {
        if c.len() != class_names.len() {
            return Err(crate::error::config(format!(
                "{} per-class counts given for {} classes",
                c.len(),
                class_names.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let name = &class_names[c];
        let sizes = match &spec.mode {
            SplitMode::Ratio(r) => {
                if idx.len() < 7 {
                    return Err(Error::Split {
                        class: name.clone(),
                        reason: format!("{} samples, need at least 7", idx.len()),
                    });
                }
                apportion(idx.len(), *r)
            }
            SplitMode::Counts(counts) => {
                let want = counts[c];
                if want.iter().sum::<usize>() > idx.len() {
                    return Err(Error::Split {
                        class: name.clone(),
                        reason: format!("requested {want:?} but only {} samples", idx.len()),
                    });
                }
                want
            }
        };
        idx.shuffle(&mut rng);
        let (a, rest) = idx.split_at(sizes[0]);
        let (b, rest) = rest.split_at(sizes[1]);
        out.train.extend_from_slice(a);
        out.valid.extend_from_slice(b);
        out.test.extend_from_slice(&rest[..sizes[2]]);
    }
    out.train.sort_unstable();
    out.valid.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
