//! Fixtures shared by the benchmarks: seeded unit vectors, a filled queue and
//! a synthetic video.

use rand::Rng;
use vidcl_core::dataset::{generate_synthetic, SyntheticSpec};
use vidcl_core::encoder::normalize;
use vidcl_core::rng::{stream, Stream};
use vidcl_core::{LossInputs, NegativeQueue, Video};

pub const EMBED_DIM: usize = 128;

pub fn unit_vectors(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Stream::Audit, 0);
    (0..count)
        .map(|_| normalize(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
        .collect()
}

/// Loss inputs with `k` intra-video negatives.
pub fn loss_inputs(k: usize, seed: u64) -> LossInputs {
    let mut v = unit_vectors(k + 3, EMBED_DIM, seed);
    let z_hat_minus = v.pop().unwrap().iter().map(|x| 0.5 * x).collect();
    let z_plus = v.pop().unwrap();
    let q = v.pop().unwrap();
    LossInputs {
        q,
        z_plus,
        z_minus: v,
        z_hat_minus,
        tau: 0.07,
    }
}

/// Full queue of `capacity` entries spread over `videos` video ids.
pub fn full_queue(capacity: usize, videos: usize, seed: u64) -> NegativeQueue {
    let embeddings = unit_vectors(capacity, EMBED_DIM, seed);
    let ids: Vec<String> = (0..capacity).map(|i| format!("vid{:03}", i % videos)).collect();
    let mut queue = NegativeQueue::new(capacity);
    queue.enqueue(&embeddings, &ids).expect("matching lengths");
    queue
}

/// One synthetic video of `frames` frames at the default 16×16 resolution.
pub fn video(frames: usize) -> Video {
    let spec = SyntheticSpec {
        num_videos: 1,
        min_frames: frames,
        max_frames: frames,
        window_half_width: (frames / 4).min(8),
        ..Default::default()
    };
    generate_synthetic(&spec).expect("valid spec").0.videos()[0].clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let inputs = loss_inputs(3, 0);
        assert_eq!(inputs.z_minus.len(), 3);
        assert!((inputs.q.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(full_queue(96, 8, 0).len(), 96);
        assert_eq!(video(60).len(), 60);
    }
}
