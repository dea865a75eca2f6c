//! Source/target mini-batch pairing.
//!
//! An epoch is one pass over a shuffled source set in full batches; the last
//! partial batch is dropped. Target indices come from an independent stream
//! that reshuffles whenever it runs dry.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Indices into a labelled source set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceBatch(pub Vec<usize>);

/// Indices into an unlabelled target set. Carries nothing else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetBatch(pub Vec<usize>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub source: SourceBatch,
    pub target: TargetBatch,
}

/// Shuffled full batches covering the source set once.
pub fn source_epoch<R: Rng + ?Sized>(len: usize, batch_size: usize, rng: &mut R) -> Result<Vec<SourceBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if len < batch_size {
        return Err(Error::Batch(format!(
            "source set has {len} samples, fewer than one batch of {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| SourceBatch(c.to_vec()))
        .collect())
}

/// Endless shuffled draws over a target set.
#[derive(Clone, Debug)]
pub struct TargetStream {
    len: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl TargetStream {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Batch("target set is empty".into()));
        }
        Ok(TargetStream {
            len,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, batch_size: usize, rng: &mut R) -> TargetBatch {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        TargetBatch(out)
    }
}

/// All batch pairs of one epoch.
pub fn sample_batch_pairs<R: Rng + ?Sized>(
    source_len: usize,
    target_len: usize,
    batch_size: usize,
    source_rng: &mut R,
    target_rng: &mut R,
) -> Result<Vec<BatchPair>> {
    let mut stream = TargetStream::new(target_len)?;
    let sources = source_epoch(source_len, batch_size, source_rng)?;
    Ok(sources
        .into_iter()
        .map(|source| BatchPair {
            source,
            target: stream.next_batch(batch_size, target_rng),
        })
        .collect())
}
