#![allow(dead_code)]

pub mod oracle;

use dpdlab_core::harness::Segmenter;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Splits payloads at random positions (possibly none).
pub struct RandomSegmenter<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Segmenter for RandomSegmenter<'_> {
    fn segments(&mut self, payload: &[u8]) -> Vec<Vec<u8>> {
        if payload.len() <= 1 {
            return vec![payload.to_vec()];
        }
        let cuts = self.rng.gen_range(0..=4usize);
        let mut bounds: Vec<usize> = (0..cuts)
            .map(|_| self.rng.gen_range(1..payload.len()))
            .collect();
        bounds.push(0);
        bounds.push(payload.len());
        bounds.sort_unstable();
        bounds.dedup();
        bounds
            .windows(2)
            .map(|w| payload[w[0]..w[1]].to_vec())
            .collect()
    }
}

/// Splits a byte string into `parts` random pieces (possibly empty ones are
/// dropped).
pub fn random_split(rng: &mut ChaCha8Rng, bytes: &[u8], max_cuts: usize) -> Vec<Vec<u8>> {
    let mut segmenter = RandomSegmenter { rng };
    let _ = max_cuts;
    segmenter.segments(bytes)
}
