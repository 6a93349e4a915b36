use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Indices into a dataset, all from one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub split: Split,
    pub indices: Vec<usize>,
}

/// Single-split batches for one epoch.
///
/// Forget and retain examples are shuffled separately (generator keyed by
/// `seed` with stream `epoch`), chunked, and emitted round-robin starting
/// with the forget stream; the longer stream's surplus follows at the end.
/// Holdout and eval-general examples are never scheduled.
pub fn make_batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);

    let mut stream = |split: Split| {
        let mut idx: Vec<usize> = (0..ds.examples.len())
            .filter(|&i| ds.examples[i].split == split)
            .collect();
        idx.shuffle(&mut rng);
        idx.chunks(batch_size)
            .map(|c| Batch {
                split,
                indices: c.to_vec(),
            })
            .collect::<Vec<_>>()
    };
    let forget = stream(Split::Forget);
    let retain = stream(Split::Retain);

    let mut out = Vec::with_capacity(forget.len() + retain.len());
    let mut f = forget.into_iter();
    let mut r = retain.into_iter();
    loop {
        let (a, b) = (f.next(), r.next());
        if a.is_none() && b.is_none() {
            break;
        }
        out.extend(a);
        out.extend(b);
    }
    Ok(out)
}
