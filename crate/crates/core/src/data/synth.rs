//! Deterministic synthetic video/caption corpus.
//!
//! Each video shows one object doing one action. The first `n_objects`
//! feature dimensions hold a constant one-hot object signature, the next
//! `n_actions` hold a per-action temporal ramp (rising for even actions,
//! falling for odd ones), and every dimension gets seeded uniform noise of
//! amplitude [`NOISE`]. Captions are fully determined by the features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::features::VideoSequence;
use super::{CaptionSet, DataError, Dataset};

pub const NOISE: f64 = 0.05;

const OBJECTS: [&str; 8] = [
    "man", "woman", "dog", "cat", "bird", "child", "horse", "girl",
];
const ACTIONS: [&str; 8] = [
    "running", "cooking", "swimming", "dancing", "jumping", "singing", "riding", "eating",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub n_objects: usize,
    pub n_actions: usize,
    pub frames: usize,
    pub dim: usize,
}

pub fn object_name(i: usize) -> String {
    OBJECTS
        .get(i)
        .map_or_else(|| format!("object{i}"), |s| s.to_string())
}

pub fn action_name(i: usize) -> String {
    ACTIONS
        .get(i)
        .map_or_else(|| format!("action{i}"), |s| s.to_string())
}

/// Value of action `action`'s signature dimension at frame `t`.
pub fn action_ramp(action: usize, t: usize, frames: usize) -> f64 {
    let x = if frames > 1 {
        t as f64 / (frames - 1) as f64
    } else {
        1.0
    };
    if action.is_multiple_of(2) {
        x
    } else {
        1.0 - x
    }
}

/// `(object, action)` of every generated sample, in order.
pub fn synth_labels(spec: &SynthSpec) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut combos: Vec<(usize, usize)> = (0..spec.n_objects)
        .flat_map(|o| (0..spec.n_actions).map(move |a| (o, a)))
        .collect();
    combos.shuffle(&mut rng);
    (0..spec.n_samples)
        .map(|i| combos[i % combos.len()])
        .collect()
}

/// Samples cycle through a seeded permutation of all object/action pairs,
/// so any run of `n_objects * n_actions` consecutive samples covers every
/// pair once.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset, DataError> {
    if spec.n_objects == 0 || spec.n_actions == 0 || spec.frames == 0 {
        return Err(DataError::Synth(
            "objects, actions and frames must be positive".into(),
        ));
    }
    if spec.dim < spec.n_objects + spec.n_actions {
        return Err(DataError::Synth(format!(
            "dim {} is smaller than n_objects + n_actions = {}",
            spec.dim,
            spec.n_objects + spec.n_actions
        )));
    }
    let labels = synth_labels(spec);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5EED));
    let mut videos = Vec::with_capacity(spec.n_samples);
    let mut captions = CaptionSet::new();
    for (i, &(o, a)) in labels.iter().enumerate() {
        let mut data = Vec::with_capacity(spec.frames * spec.dim);
        for t in 0..spec.frames {
            for d in 0..spec.dim {
                let mut v = noise_rng.random_range(-NOISE..=NOISE);
                if d == o {
                    v += 1.0;
                } else if d == spec.n_objects + a {
                    v += action_ramp(a, t, spec.frames);
                }
                // Stored values round-trip exactly through the f32 feature format.
                data.push(v as f32 as f64);
            }
        }
        let id = format!("synth{i:05}");
        let frames = Tensor::new(vec![spec.frames, spec.dim], data).expect("shape");
        videos.push(VideoSequence::new(id.clone(), frames)?);
        let (obj, act) = (object_name(o), action_name(a));
        captions.insert(
            id,
            vec![format!("a {obj} is {act}"), format!("the {obj} is {act}")],
        );
    }
    Ok(Dataset { videos, captions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::{tokenize, Vocabulary, NUM_RESERVED};

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            n_samples: 40,
            n_objects: 4,
            n_actions: 3,
            frames: 5,
            dim: 10,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&spec(1)).unwrap();
        let b = synth_generate(&spec(1)).unwrap();
        let c = synth_generate(&spec(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn vocabulary_size_matches_construction() {
        let s = spec(3);
        let ds = synth_generate(&s).unwrap();
        let toks: Vec<Vec<String>> = ds
            .captions
            .values()
            .flatten()
            .map(|c| tokenize(c))
            .collect();
        let vocab = Vocabulary::build(toks.iter().map(Vec::as_slice));
        assert_eq!(vocab.len(), s.n_objects + s.n_actions + 3 + NUM_RESERVED);
    }

    #[test]
    fn every_pair_covered_per_cycle() {
        let s = spec(4);
        let labels = synth_labels(&s);
        let k = s.n_objects * s.n_actions;
        let mut first: Vec<_> = labels[..k].to_vec();
        first.sort();
        first.dedup();
        assert_eq!(first.len(), k);
    }

    #[test]
    fn same_object_differs_only_in_action_block() {
        let s = spec(5);
        let ds = synth_generate(&s).unwrap();
        let labels = synth_labels(&s);
        let (i, j) = (0..labels.len())
            .flat_map(|i| (0..labels.len()).map(move |j| (i, j)))
            .find(|&(i, j)| labels[i].0 == labels[j].0 && labels[i].1 != labels[j].1)
            .unwrap();
        let action_block = s.n_objects..s.n_objects + s.n_actions;
        let (a, b) = (&ds.videos[i].frames, &ds.videos[j].frames);
        let mut differs_in_block = false;
        for t in 0..s.frames {
            for d in 0..s.dim {
                let diff = (a.row(t)[d] - b.row(t)[d]).abs();
                if action_block.contains(&d) {
                    differs_in_block |= diff > 2.0 * NOISE;
                } else {
                    assert!(diff <= 2.0 * NOISE + 1e-6, "t={t} d={d} diff={diff}");
                }
            }
        }
        assert!(differs_in_block);
    }

    #[test]
    fn rejects_small_dim() {
        let mut s = spec(0);
        s.dim = 6;
        assert!(matches!(synth_generate(&s), Err(DataError::Synth(_))));
    }
}
