//! Reservoir-sampled memory of (input, label, logits) triples and the uniform
//! with-replacement batch draws the training loop makes from it.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One stored sample: the input row, its class index, and the logits the
/// model produced when the sample was offered. Logits are never refreshed.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryItem {
    pub x: Tensor,
    pub y: usize,
    pub z: Tensor,
}

impl MemoryItem {
    pub fn new(x: Tensor, y: usize, z: Tensor) -> Result<Self> {
        if x.rank() != 1 || z.rank() != 1 {
            return Err(Error::DimensionMismatch(
                "memory items store vector inputs and vector logits".into(),
            ));
        }
        if y >= z.len() {
            return Err(Error::Domain(format!(
                "label {y} outside the {} classes covered by the stored logits",
                z.len()
            )));
        }
        Ok(Self { x, y, z })
    }
}

/// The reservoir decision for the (seen+1)-th offered item given a uniform
/// draw on 0..=seen: replace the returned slot, or keep the buffer as is.
/// Factored out so tests can enumerate every branch exactly.
pub fn reservoir_slot(seen: u64, capacity: usize, draw: u64) -> Option<usize> {
    debug_assert!(draw <= seen);
    if draw < capacity as u64 {
        Some(draw as usize)
    } else {
        None
    }
}

/// Fixed-capacity buffer holding a uniform random subset of everything
/// offered so far.
#[derive(Debug, Clone)]
pub struct ReservoirBuffer {
    capacity: usize,
    items: Vec<MemoryItem>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidSpec("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of items offered so far.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    /// Offer one item: appended while filling, afterwards it replaces a
    /// uniformly random slot with probability capacity/(seen+1).
    pub fn offer(&mut self, item: MemoryItem) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let draw = self.rng.gen_range(0..=self.seen);
            if let Some(slot) = reservoir_slot(self.seen, self.capacity, draw) {
                self.items[slot] = item;
            }
        }
        self.seen += 1;
    }

    /// Draw `batch` items uniformly with replacement. Each call advances the
    /// generator, so successive draws are independent.
    pub fn sample(&mut self, batch: usize) -> Result<Vec<MemoryItem>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch)
            .map(|_| self.items[self.rng.gen_range(0..self.items.len())].clone())
            .collect())
    }

    /// Versioned bit-exact dump, including the generator state, so a restored
    /// buffer continues exactly where the original left off.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(BUFFER_MAGIC);
        buf.extend_from_slice(&BUFFER_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        buf.extend_from_slice(&self.seen.to_le_bytes());
        buf.extend_from_slice(&self.rng.get_seed());
        buf.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        buf.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        buf.extend_from_slice(&(self.items.len() as u64).to_le_bytes());
        for item in &self.items {
            buf.extend_from_slice(&(item.x.len() as u64).to_le_bytes());
            buf.extend_from_slice(&(item.z.len() as u64).to_le_bytes());
            buf.extend_from_slice(&(item.y as u64).to_le_bytes());
            for v in item.x.data().iter().chain(item.z.data()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Config("truncated buffer dump".into()));
            }
            let out = &bytes[pos..pos + n];
            pos += n;
            Ok(out)
        };
        if take(4)? != BUFFER_MAGIC.as_slice() {
            return Err(Error::Config("not a buffer dump".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != BUFFER_VERSION {
            return Err(Error::Config(format!("unsupported buffer version {version}")));
        }
        let capacity = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let seen = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let seed: [u8; 32] = take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(take(16)?.try_into().unwrap());
        let stream = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let xd = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let zd = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let y = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(8 * (xd + zd))?;
            let mut vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
            let x = Tensor::new(vec![xd], vals.by_ref().take(xd).collect())?;
            let z = Tensor::new(vec![zd], vals.collect())?;
            items.push(MemoryItem::new(x, y, z)?);
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            capacity,
            items,
            seen,
            rng,
        })
    }
}

const BUFFER_MAGIC: &[u8; 4] = b"OWMB";
const BUFFER_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    fn item(tag: usize) -> MemoryItem {
        MemoryItem::new(
            Tensor::new(vec![2], vec![tag as f64, -(tag as f64)]).unwrap(),
            tag % 3,
            Tensor::new(vec![3], vec![0.1 * tag as f64, 0.0, 1.0]).unwrap(),
        )
        .unwrap()
    }

    fn tags(buf: &ReservoirBuffer) -> Vec<usize> {
        buf.items().iter().map(|it| it.x.data()[0] as usize).collect()
    }

    #[test]
    fn fill_phase_keeps_everything() {
        let mut buf = ReservoirBuffer::new(4, 0).unwrap();
        for t in 0..4 {
            buf.offer(item(t));
        }
        assert_eq!(tags(&buf), vec![0, 1, 2, 3]);
        assert_eq!(buf.seen_count(), 4);
    }

    #[test]
    fn capacity_never_exceeded_and_counts_track() {
        let mut buf = ReservoirBuffer::new(3, 7).unwrap();
        for t in 0..50 {
            buf.offer(item(t));
            assert!(buf.len() <= 3);
            assert_eq!(buf.len() as u64, buf.seen_count().min(3));
            assert_eq!(buf.seen_count(), t as u64 + 1);
        }
    }

    #[test]
    fn exact_enumeration_capacity_two_stream_three() {
        // Third offer draws uniformly from {0, 1, 2}; enumerating all
        // branches gives every item a retention probability of exactly 2/3.
        let mut survivals = [0usize; 3];
        for draw in 0..3u64 {
            let mut kept = vec![0usize, 1];
            match reservoir_slot(2, 2, draw) {
                Some(slot) => kept[slot] = 2,
                None => {}
            }
            for &t in &kept {
                survivals[t] += 1;
            }
        }
        assert_eq!(survivals, [2, 2, 2]);
    }

    #[test]
    fn retention_follows_the_m_over_n_law() {
        // capacity 5, stream of 20: long-run retention frequency of every
        // item is 5/20 = 0.25 within +/- 0.02 over 100000 seeded trials.
        let trials = 100_000;
        let mut counts = [0u32; 20];
        for trial in 0..trials {
            let mut buf = ReservoirBuffer::new(5, trial as u64).unwrap();
            for t in 0..20 {
                buf.offer(item(t));
            }
            for t in tags(&buf) {
                counts[t] += 1;
            }
        }
        for (t, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.25).abs() < 0.02, "item {t}: freq {freq}");
        }
    }

    #[test]
    fn singleton_buffer_sampling_repeats_the_item() {
        let mut buf = ReservoirBuffer::new(8, 1).unwrap();
        buf.offer(item(9));
        let batch = buf.sample(5).unwrap();
        assert_eq!(batch.len(), 5);
        assert!(batch.iter().all(|it| it == &item(9)));
    }

    #[test]
    fn empty_buffer_sampling_errors() {
        let mut buf = ReservoirBuffer::new(4, 0).unwrap();
        assert!(matches!(buf.sample(1), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn sampling_leaves_contents_untouched() {
        let mut buf = ReservoirBuffer::new(10, 3).unwrap();
        for t in 0..10 {
            buf.offer(item(t));
        }
        let hash_items = |buf: &ReservoirBuffer| {
            let mut h = DefaultHasher::new();
            for it in buf.items() {
                it.y.hash(&mut h);
                for v in it.x.data().iter().chain(it.z.data()) {
                    v.to_bits().hash(&mut h);
                }
            }
            h.finish()
        };
        let before = hash_items(&buf);
        for _ in 0..20 {
            buf.sample(7).unwrap();
        }
        assert_eq!(hash_items(&buf), before);
    }

    #[test]
    fn sampling_is_uniform_by_chi_square() {
        let mut buf = ReservoirBuffer::new(10, 11).unwrap();
        for t in 0..10 {
            buf.offer(item(t));
        }
        let draws = 100_000;
        let mut counts = [0u32; 10];
        for batch in buf.sample(draws).unwrap() {
            counts[batch.x.data()[0] as usize] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 0.99 quantile of chi-square with 9 degrees of freedom.
        assert!(chi2 < 21.666, "chi2 {chi2}");
    }

    #[test]
    fn fixed_seed_reproduces_the_final_buffer() {
        let run = |seed: u64| {
            let mut buf = ReservoirBuffer::new(6, seed).unwrap();
            for t in 0..200 {
                buf.offer(item(t));
            }
            tags(&buf)
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn dump_restore_round_trip_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.bin");

        let mut original = ReservoirBuffer::new(5, 99).unwrap();
        for t in 0..37 {
            original.offer(item(t));
        }
        original.save(&path).unwrap();
        let mut restored = ReservoirBuffer::load(&path).unwrap();
        assert_eq!(restored.items(), original.items());
        assert_eq!(restored.seen_count(), original.seen_count());

        // Continue both: offers and draws must stay bit-identical.
        for t in 37..80 {
            original.offer(item(t));
            restored.offer(item(t));
        }
        assert_eq!(restored.items(), original.items());
        assert_eq!(original.sample(9).unwrap(), restored.sample(9).unwrap());
    }
}
