//! Cross-video negative queue and similarity-weighted hard-negative aggregation.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Queue entries must be unit-norm within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-6;

pub const GB_QUEUE_CAPACITY: usize = 96;
pub const BUTTERFLY_QUEUE_CAPACITY: usize = 66;
pub const GB_TOP_N: usize = 4;
pub const BUTTERFLY_TOP_N: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub embedding: Vec<f64>,
    pub video_id: String,
}

/// Fixed-capacity FIFO of key embeddings tagged with their source video.
/// Index 0 is the oldest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&QueueEntry> {
        self.entries.get(i)
    }

    /// Appends the batch (in order) and evicts oldest entries beyond capacity.
    /// Nothing is pushed if any embedding fails validation.
    pub fn enqueue(&mut self, embeddings: &[Vec<f64>], video_ids: &[String]) -> Result<()> {
        if embeddings.len() != video_ids.len() {
            return Err(Error::Dimension {
                expected: embeddings.len(),
                got: video_ids.len(),
            });
        }
        let dim = self
            .entries
            .front()
            .map(|e| e.embedding.len())
            .or_else(|| embeddings.first().map(Vec::len));
        for e in embeddings {
            if let Some(d) = dim.filter(|&d| d != e.len()) {
                return Err(Error::Dimension {
                    expected: d,
                    got: e.len(),
                });
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::NotNormalized { norm });
            }
        }
        for (e, id) in embeddings.iter().zip(video_ids) {
            self.entries.push_back(QueueEntry {
                embedding: e.clone(),
                video_id: id.clone(),
            });
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }
}

/// Softmax weights over the cross-video candidates for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaWeights {
    /// Queue positions of the candidates, oldest first.
    pub positions: Vec<usize>,
    pub similarities: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AlphaWeights {
    /// Candidate slots ordered by descending similarity; ties go to the older entry.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| {
            self.similarities[b]
                .partial_cmp(&self.similarities[a])
                .expect("similarities are finite")
                .then(a.cmp(&b))
        });
        order
    }
}

fn cosine_unit_query(q: &[f64], q_norm: f64, z: &[f64]) -> f64 {
    let zn = z.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    q.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (q_norm * zn)
}

/// `α_{q,z} = exp(s(q,z)/τ) / Σ_{z_c} exp(s(q,z_c)/τ)` over queue entries whose
/// source video differs from `exclude_video`.
pub fn alpha_weights(q: &[f64], queue: &NegativeQueue, tau: f64, exclude_video: Option<&str>) -> Result<AlphaWeights> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Temperature(tau));
    }
    let q_norm = q.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut positions = Vec::new();
    let mut similarities = Vec::new();
    for (i, e) in queue.entries().enumerate() {
        if exclude_video.is_some_and(|v| v == e.video_id) {
            continue;
        }
        if e.embedding.len() != q.len() {
            return Err(Error::Dimension {
                expected: q.len(),
                got: e.embedding.len(),
            });
        }
        positions.push(i);
        similarities.push(cosine_unit_query(q, q_norm, &e.embedding));
    }
    if positions.is_empty() {
        return Err(Error::QueueEmpty);
    }
    let max = similarities.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let exps: Vec<f64> = similarities.iter().map(|s| (s / tau - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(AlphaWeights {
        positions,
        similarities,
        weights: exps.into_iter().map(|e| e / total).collect(),
    })
}

/// Result of aggregating the top-n hardest cross-video negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegative {
    pub z_hat: Vec<f64>,
    /// Queue positions of the selected entries, hardest first.
    pub top: Vec<usize>,
    /// α of the selected entries (normalized over all candidates, not just the top-n).
    pub top_alpha: Vec<f64>,
}

/// `ẑ⁻ = Σ_{z ∈ N_m} α_{q,z} z` over the `n` candidates most similar to `q`.
pub fn hard_negative_aggregate(
    q: &[f64],
    queue: &NegativeQueue,
    n: usize,
    tau: f64,
    exclude_video: Option<&str>,
) -> Result<HardNegative> {
    let alpha = alpha_weights(q, queue, tau, exclude_video)?;
    if n == 0 || n > alpha.weights.len() {
        return Err(Error::NotEnoughNegatives {
            requested: n,
            available: alpha.weights.len(),
        });
    }
    let mut z_hat = vec![0.0; q.len()];
    let mut top = Vec::with_capacity(n);
    let mut top_alpha = Vec::with_capacity(n);
    for slot in alpha.ranking().into_iter().take(n) {
        let pos = alpha.positions[slot];
        let w = alpha.weights[slot];
        let entry = queue.get(pos).expect("position from this queue");
        for (acc, v) in z_hat.iter_mut().zip(&entry.embedding) {
            *acc += w * v;
        }
        top.push(pos);
        top_alpha.push(w);
    }
    Ok(HardNegative {
        z_hat,
        top,
        top_alpha,
    })
}
