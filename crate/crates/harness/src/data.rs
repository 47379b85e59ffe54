//! Synthetic ten-class grating task.
//!
//! Each image is dominated by one sinusoidal grating drawn from five
//! orientations × two spatial frequencies, with a random phase, per-channel
//! gain, a weaker grating of another class, and white noise. Samples are
//! generated on demand from `(seed, split, index)`, so nothing is cached.

use std::f64::consts::PI;

use a2mamba::rng::SeededRng;
use a2mamba::Tensor;

pub const SIZE: usize = 64;
pub const CLASSES: usize = 10;
pub const TRAIN_LEN: usize = 8000;
pub const TEST_LEN: usize = 2000;
const ORIENTATIONS: usize = 5;
/// Cycles across the image.
const FREQUENCIES: [f64; 2] = [3.0, 7.0];
const NOISE_STD: f64 = 0.5;
const DISTRACTOR_MAX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn len(self) -> usize {
        match self {
            Split::Train => TRAIN_LEN,
            Split::Test => TEST_LEN,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GratingTask {
    pub seed: u64,
}

fn grating(class: usize, phase: f64, y: usize, x: usize) -> f64 {
    let theta = (class % ORIENTATIONS) as f64 * PI / ORIENTATIONS as f64;
    let f = FREQUENCIES[class / ORIENTATIONS];
    let t = (x as f64 * theta.cos() + y as f64 * theta.sin()) / SIZE as f64;
    (2.0 * PI * f * t + phase).sin()
}

impl GratingTask {
    pub fn new(seed: u64) -> Self {
        GratingTask { seed }
    }

    /// `([3, 64, 64], label)` for one sample.
    pub fn sample(&self, split: Split, index: usize) -> (Vec<f64>, usize) {
        let mut rng = SeededRng::derive(self.seed, (split.stream() << 32) | index as u64);
        let label = rng.below(CLASSES);
        let other = (label + 1 + rng.below(CLASSES - 1)) % CLASSES;
        let (amp, phase) = (rng.uniform(0.8, 1.2), rng.uniform(0.0, 2.0 * PI));
        let (damp, dphase) = (rng.uniform(0.0, DISTRACTOR_MAX), rng.uniform(0.0, 2.0 * PI));
        let gains = [
            rng.uniform(0.8, 1.2),
            rng.uniform(0.8, 1.2),
            rng.uniform(0.8, 1.2),
        ];
        let mut img = vec![0.0; 3 * SIZE * SIZE];
        for y in 0..SIZE {
            for x in 0..SIZE {
                let v = amp * grating(label, phase, y, x) + damp * grating(other, dphase, y, x);
                for (c, g) in gains.iter().enumerate() {
                    img[(c * SIZE + y) * SIZE + x] = g * v + NOISE_STD * rng.normal();
                }
            }
        }
        (img, label)
    }

    /// Stacks samples into `[N, 3, 64, 64]` with their labels.
    pub fn batch(&self, split: Split, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * 3 * SIZE * SIZE);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (img, l) = self.sample(split, i);
            data.extend(img);
            labels.push(l);
        }
        let t = Tensor::new(vec![indices.len(), 3, SIZE, SIZE], data).expect("batch shape");
        (t, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_reproducible_and_split_apart() {
        let task = GratingTask::new(0);
        assert_eq!(task.sample(Split::Train, 5), task.sample(Split::Train, 5));
        assert_ne!(
            task.sample(Split::Train, 5).0,
            task.sample(Split::Test, 5).0
        );
        assert_ne!(
            task.sample(Split::Train, 5).0,
            GratingTask::new(1).sample(Split::Train, 5).0
        );
    }

    #[test]
    fn labels_cover_all_classes_roughly_evenly() {
        let task = GratingTask::new(0);
        let mut counts = [0usize; CLASSES];
        for i in 0..2000 {
            counts[task.sample(Split::Test, i).1] += 1;
        }
        assert!(
            counts.iter().all(|&c| (140..=260).contains(&c)),
            "{counts:?}"
        );
    }

    #[test]
    fn dominant_grating_has_the_most_energy() {
        // Projecting onto the quadrature pair of each class recovers the
        // label for nearly every sample: the task is solvable.
        let task = GratingTask::new(3);
        let mut hits = 0;
        for i in 0..200 {
            let (img, label) = task.sample(Split::Train, i);
            let energy = |c: usize| {
                let (mut s, mut q) = (0.0, 0.0);
                for y in 0..SIZE {
                    for x in 0..SIZE {
                        let v: f64 = (0..3).map(|ch| img[(ch * SIZE + y) * SIZE + x]).sum();
                        s += v * grating(c, 0.0, y, x);
                        q += v * grating(c, PI / 2.0, y, x);
                    }
                }
                s * s + q * q
            };
            let best = (0..CLASSES)
                .max_by(|&a, &b| energy(a).total_cmp(&energy(b)))
                .unwrap();
            hits += usize::from(best == label);
        }
        assert!(hits >= 196, "{hits}");
    }
}
