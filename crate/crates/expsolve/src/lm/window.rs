//! Sliding-window featurization over token sequences.
//!
//! Every position of a document is a prediction target; its features come
//! from the `K` previous tokens' embedding rows, summed (`Sum`, dimension N)
//! or concatenated nearest-previous-first (`Cat`, dimension K·N). Positions
//! within `K` of a document start draw pad rows, so padding resets at every
//! document boundary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sample::Sample;

use super::noise::DenseEmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    Sum,
    Cat,
}

/// Radius, aggregation mode, and the id used for pad positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub radius: usize,
    pub mode: WindowMode,
    pub pad_id: u32,
}

impl WindowSpec {
    pub fn new(radius: usize, mode: WindowMode, pad_id: u32) -> Result<Self> {
        if radius == 0 {
            return Err(Error::invalid("window radius must be at least 1".to_string()));
        }
        Ok(WindowSpec {
            radius,
            mode,
            pad_id,
        })
    }

    /// Feature dimension produced over a vocabulary of `n` ids.
    pub fn dim(&self, n: usize) -> usize {
        match self.mode {
            WindowMode::Sum => n,
            WindowMode::Cat => self.radius * n,
        }
    }

    /// Context ids for position `m`, nearest previous first, pad-extended.
    pub fn context_of(&self, ids: &[u32], m: usize) -> Vec<u32> {
        (1..=self.radius)
            .map(|k| {
                if m >= k {
                    ids[m - k]
                } else {
                    self.pad_id
                }
            })
            .collect()
    }
}

/// Lazily featurizes one document into samples.
pub fn featurize<'a>(
    ids: &'a [u32],
    table: &'a DenseEmbeddingTable,
    spec: WindowSpec,
) -> impl Iterator<Item = Sample> + 'a {
    let n = table.n();
    (0..ids.len()).map(move |m| {
        let context = spec.context_of(ids, m);
        let features = match spec.mode {
            WindowMode::Sum => {
                let mut h = vec![0.0f64; n];
                for &c in &context {
                    let scale = 1.0 - table.reliability()[c as usize];
                    for (dst, &pj) in h.iter_mut().zip(table.noise()) {
                        *dst += scale * pj;
                    }
                    h[c as usize] += table.reliability()[c as usize];
                }
                h
            }
            WindowMode::Cat => {
                let mut h = vec![0.0f64; spec.radius * n];
                for (k, &c) in context.iter().enumerate() {
                    let block = &mut h[k * n..(k + 1) * n];
                    let scale = 1.0 - table.reliability()[c as usize];
                    for (dst, &pj) in block.iter_mut().zip(table.noise()) {
                        *dst = scale * pj;
                    }
                    block[c as usize] += table.reliability()[c as usize];
                }
                h
            }
        };
        Sample::new(features, ids[m] as usize)
    })
}

/// Splits line-oriented text into blank-line-separated documents.
pub fn document_split(raw: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current = String::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            if !current.is_empty() {
                current.push('\n');
            }
            current.push_str(line);
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

/// Seeded uniform sample of a document list, preserving corpus order.
/// Used to thin the development split before evaluation.
pub fn sample_documents<T: Clone>(docs: &[T], fraction: f64, seed: u64) -> Vec<T> {
    if docs.is_empty() || fraction >= 1.0 {
        return docs.to_vec();
    }
    let keep = ((docs.len() as f64 * fraction).ceil() as usize).clamp(1, docs.len());
    let mut indices: Vec<usize> = (0..docs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, pinned here for cross-version stability
    for i in (1..indices.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        indices.swap(i, j);
    }
    let mut chosen = indices[..keep].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| docs[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::noise::{build_noise_model, densify};

    fn table() -> DenseEmbeddingTable {
        // vocab of 4: pad=0 unseen, tokens 1..=3 observed
        densify(&build_noise_model([1, 2, 3, 1, 2, 1].into_iter(), 4).unwrap())
    }

    #[test]
    fn sum_and_cat_agree_at_radius_one() {
        let t = table();
        let ids = [1u32, 2, 3];
        let sum_spec = WindowSpec::new(1, WindowMode::Sum, 0).unwrap();
        let cat_spec = WindowSpec::new(1, WindowMode::Cat, 0).unwrap();
        let a: Vec<Sample> = featurize(&ids, &t, sum_spec).collect();
        let b: Vec<Sample> = featurize(&ids, &t, cat_spec).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn document_starts_are_padded() {
        let t = table();
        let ids = [1u32, 2, 3];
        let spec = WindowSpec::new(2, WindowMode::Cat, 0).unwrap();
        assert_eq!(spec.context_of(&ids, 0), vec![0, 0]);
        assert_eq!(spec.context_of(&ids, 1), vec![1, 0]);
        assert_eq!(spec.context_of(&ids, 2), vec![2, 1]);
        let samples: Vec<Sample> = featurize(&ids, &t, spec).collect();
        assert_eq!(samples.len(), 3);
        // first sample: both blocks are the pad row
        let pad_row = t.row(0);
        assert_eq!(&samples[0].features[..4], pad_row.as_slice());
        assert_eq!(&samples[0].features[4..], pad_row.as_slice());
        assert_eq!(samples[0].target, 1);
    }

    #[test]
    fn sum_norms_equal_the_radius() {
        let t = table();
        let ids = [1u32, 2, 3, 2, 1, 3, 3, 2];
        for radius in [1usize, 2, 3] {
            let spec = WindowSpec::new(radius, WindowMode::Sum, 0).unwrap();
            for s in featurize(&ids, &t, spec) {
                assert!(
                    (s.norm1() - radius as f64).abs() <= 1e-9,
                    "norm {} at radius {radius}",
                    s.norm1()
                );
            }
            let cat = WindowSpec::new(radius, WindowMode::Cat, 0).unwrap();
            for s in featurize(&ids, &t, cat) {
                assert!((s.norm1() - radius as f64).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn blank_lines_split_documents() {
        let raw = "a b\nc d\n\n\ne f\n\ng\n";
        let docs = document_split(raw);
        assert_eq!(docs, vec!["a b\nc d".to_string(), "e f".to_string(), "g".to_string()]);
        assert!(document_split("").is_empty());
        assert!(document_split("\n\n\n").is_empty());
        assert_eq!(document_split("only one").len(), 1);
    }

    #[test]
    fn document_sampling_is_seeded_and_ordered() {
        let docs: Vec<usize> = (0..100).collect();
        let a = sample_documents(&docs, 0.1, 7);
        let b = sample_documents(&docs, 0.1, 7);
        let c = sample_documents(&docs, 0.1, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
