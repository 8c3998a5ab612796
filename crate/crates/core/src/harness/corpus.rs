use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::vector_index::{Corpus, Embedding, Metric};

/// Gaussian-mixture corpus: topic centers on the unit sphere and documents
/// scattered around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_vectors: usize,
    pub dim: usize,
    pub n_topics: usize,
    /// Per-dimension standard deviation around a topic center.
    pub topic_spread: f64,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_vectors: 100_000,
            dim: 64,
            n_topics: 64,
            topic_spread: 0.05,
            metric: Metric::L2,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_vectors == 0 || self.dim == 0 || self.n_topics == 0 {
            return Err(invalid("corpus vectors, dim and topics must be positive"));
        }
        if !(self.topic_spread >= 0.0 && self.topic_spread.is_finite()) {
            return Err(invalid("corpus spread must be finite and non-negative"));
        }
        Ok(())
    }
}

pub(crate) fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f64, 1.0).expect("valid");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Topic centers; the same spec always yields the same centers.
pub fn topic_centers(spec: &CorpusSpec) -> Result<Vec<Embedding>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_7091c);
    (0..spec.n_topics)
        .map(|_| Embedding::new(unit_vector(&mut rng, spec.dim)))
        .collect()
}

/// Point drawn around `center` with per-dimension noise `sigma`.
pub(crate) fn jitter(rng: &mut impl Rng, center: &[f32], sigma: f64) -> Vec<f32> {
    if sigma == 0.0 {
        return center.to_vec();
    }
    let normal = Normal::new(0.0f64, sigma).expect("sigma is finite and non-negative");
    center.iter().map(|&c| (c as f64 + normal.sample(rng)) as f32).collect()
}

/// Documents with ids `0..n_vectors`, each drawn around a uniformly chosen
/// topic center.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let centers = topic_centers(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.n_vectors * spec.dim);
    for _ in 0..spec.n_vectors {
        let t = rng.random_range(0..centers.len());
        data.extend(jitter(&mut rng, centers[t].as_slice(), spec.topic_spread));
    }
    Corpus::new(spec.dim, spec.metric, (0..spec.n_vectors as u64).collect(), data)
}
