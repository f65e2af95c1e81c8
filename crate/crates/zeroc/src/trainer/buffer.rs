use std::collections::{HashMap, VecDeque};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Result, ZcError};

/// One stored negative: a full conditioning tuple so any branch of the
/// negative sampler can restart a chain from it.
#[derive(Clone)]
pub struct NegativeTuple {
    /// (C, H, W)
    pub x: Tensor,
    /// One (1, H, W) mask per slot.
    pub masks: Vec<Tensor>,
    /// (c_dim,)
    pub embedding: Tensor,
}

/// FIFO replay buffer of past negatives. Chains restart from a stored tuple
/// with `reuse_probability`, which keeps long-lived low-energy modes in play
/// without persistent chains.
pub struct ReplayBuffer {
    capacity: usize,
    reuse_probability: f64,
    entries: VecDeque<NegativeTuple>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer::with_reuse(capacity, 0.2)
    }

    pub fn with_reuse(capacity: usize, reuse_probability: f64) -> Self {
        ReplayBuffer {
            capacity,
            reuse_probability,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reuse_probability(&self) -> f64 {
        self.reuse_probability
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest entries are evicted first once the buffer is full.
    pub fn push(&mut self, tuple: NegativeTuple) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(tuple);
    }

    /// Uniform draw over the stored tuples.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Option<&NegativeTuple> {
        if self.entries.is_empty() {
            return None;
        }
        let idx = rng.gen_range(0..self.entries.len());
        self.entries.get(idx)
    }

    /// A draw that fires with `reuse_probability` (and only when the buffer
    /// is non-empty); `None` means the caller should use a fresh init.
    pub fn maybe_sample(&self, rng: &mut ChaCha8Rng) -> Option<&NegativeTuple> {
        if rng.gen::<f64>() < self.reuse_probability {
            self.sample(rng)
        } else {
            None
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        map.insert(
            "meta".to_string(),
            Tensor::from_vec(
                vec![
                    self.entries.len() as f64,
                    self.entries.front().map_or(0.0, |e| e.masks.len() as f64),
                ],
                2,
                &Device::Cpu,
            )?,
        );
        if let Some(first) = self.entries.front() {
            let slots = first.masks.len();
            let stack =
                |f: &dyn Fn(&NegativeTuple) -> Tensor| -> Result<Tensor> {
                    let rows: Vec<Tensor> = self.entries.iter().map(f).collect();
                    let refs: Vec<&Tensor> = rows.iter().collect();
                    Ok(Tensor::stack(&refs, 0)?)
                };
            map.insert("x".to_string(), stack(&|e| e.x.clone())?);
            map.insert("embedding".to_string(), stack(&|e| e.embedding.clone())?);
            for s in 0..slots {
                map.insert(format!("mask.{s}"), stack(&|e| e.masks[s].clone())?);
            }
        }
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        let meta = map
            .get("meta")
            .ok_or_else(|| ZcError::Contract("replay buffer file has no meta entry".into()))?
            .to_vec1::<f64>()?;
        let (count, slots) = (meta[0] as usize, meta[1] as usize);
        self.entries.clear();
        for i in 0..count {
            let row = |name: &str| -> Result<Tensor> {
                let t = map.get(name).ok_or_else(|| {
                    ZcError::Contract(format!("replay buffer file missing {name}"))
                })?;
                Ok(t.narrow(0, i, 1)?.squeeze(0)?)
            };
            let masks = (0..slots)
                .map(|s| row(&format!("mask.{s}")))
                .collect::<Result<Vec<_>>>()?;
            self.entries.push_back(NegativeTuple {
                x: row("x")?,
                masks,
                embedding: row("embedding")?,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tagged(tag: f32) -> NegativeTuple {
        let t = |v: f32, dims: &[usize]| {
            Tensor::from_vec(vec![v; dims.iter().product()], dims, &Device::Cpu).unwrap()
        };
        NegativeTuple {
            x: t(tag, &[2, 4, 4]),
            masks: vec![t(tag, &[1, 4, 4])],
            embedding: t(tag, &[3]),
        }
    }

    fn tag_of(e: &NegativeTuple) -> f32 {
        e.embedding.to_vec1::<f32>().unwrap()[0]
    }

    #[test]
    fn eviction_is_fifo_and_capacity_is_respected() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(tagged(i as f32));
            assert!(buf.len() <= 3);
        }
        let tags: Vec<f32> = buf.entries.iter().map(tag_of).collect();
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_roughly_uniform() {
        let mut buf = ReplayBuffer::new(4);
        for i in 0..4 {
            buf.push(tagged(i as f32));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 4];
        let n = 4000;
        for _ in 0..n {
            let e = buf.sample(&mut rng).unwrap();
            counts[tag_of(e) as usize] += 1;
        }
        // Binomial(4000, 1/4): sigma ~= 27.4, so 3 sigma ~= 82.
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 82.0 * 1.5, "counts {counts:?}");
        }
    }

    #[test]
    fn reuse_rate_matches_the_configured_probability() {
        let mut buf = ReplayBuffer::with_reuse(8, 0.2);
        buf.push(tagged(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| buf.maybe_sample(&mut rng).is_some())
            .count();
        // Binomial(10000, 0.2): sigma = 40, 3 sigma = 120.
        assert!((hits as f64 - 2000.0).abs() < 120.0, "hits {hits}");
    }

    #[test]
    fn empty_buffer_never_yields_a_sample() {
        let buf = ReplayBuffer::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert!(buf.maybe_sample(&mut rng).is_none());
        }
    }

    #[test]
    fn save_and_load_round_trips_the_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.safetensors");
        let mut buf = ReplayBuffer::new(5);
        for i in 0..4 {
            buf.push(tagged(i as f32));
        }
        buf.save(&path).unwrap();

        let mut restored = ReplayBuffer::new(5);
        restored.load(&path).unwrap();
        assert_eq!(restored.len(), 4);
        let tags: Vec<f32> = restored.entries.iter().map(tag_of).collect();
        assert_eq!(tags, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(restored.entries[2].x.dims(), &[2, 4, 4]);
        assert_eq!(restored.entries[2].masks[0].dims(), &[1, 4, 4]);
    }
}
