//! Class balancing by undersampling.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Indices keeping `min_c count(c)` samples of every class, drawn uniformly
/// without replacement. The result is sorted ascending.
pub fn undersample(labels: &[usize], num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("class {c} has no samples")));
    }
    let keep = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(keep * num_classes);
    for members in &by_class {
        out.extend(
            index::sample(&mut rng, members.len(), keep)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    out.sort_unstable();
    Ok(out)
}
