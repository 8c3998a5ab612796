use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{generate_corpus, topic_centers, CorpusSpec};
use super::workload::{generate_workload, Workload, WorkloadSpec};
use crate::error::{invalid, Result};
use crate::scheduler::{run, RunOutput, SchedulerConfig};
use crate::vector_index::{train_kmeans, Corpus, IvfIndex};

/// Environment variable that replaces every seed of an experiment.
pub const SEED_ENV: &str = "HEDRA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSpec {
    pub k_clusters: usize,
    pub train_iters: usize,
    pub seed: u64,
}

impl Default for IndexSpec {
    fn default() -> Self {
        Self {
            k_clusters: 256,
            train_iters: 20,
            seed: 0,
        }
    }
}

impl IndexSpec {
    pub fn build(&self, corpus: &Corpus) -> Result<IvfIndex> {
        let centroids = train_kmeans(&corpus.prepared_data(), corpus.dim(), self.k_clusters, self.train_iters, self.seed)?;
        IvfIndex::build(corpus, centroids)
    }
}

/// Everything needed to reproduce one experiment, as a TOML document with
/// `[corpus]`, `[index]`, `[workload]` and `[run]` tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub index: IndexSpec,
    pub workload: WorkloadSpec,
    pub run: SchedulerConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(format!("cannot encode config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.index.k_clusters == 0 || self.index.k_clusters > self.corpus.n_vectors {
            return Err(invalid("k_clusters must lie in 1..=n_vectors"));
        }
        self.workload.validate()?;
        self.run.validate()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.index.seed = seed;
        self.workload.seed = seed;
        self.run.seed = seed;
    }

    /// Applies `HEDRA_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Some(seed) = seed_from_env()? {
            self.set_seed(seed);
        }
        Ok(())
    }

    /// Builds the corpus, index and workload, then runs the scheduler.
    pub fn execute(&self) -> Result<(IvfIndex, Workload, RunOutput)> {
        self.validate()?;
        let corpus = generate_corpus(&self.corpus)?;
        let index = self.index.build(&corpus)?;
        let workload = generate_workload(&self.workload, &topic_centers(&self.corpus)?)?;
        let out = run(&self.run, &index, &workload)?;
        Ok((index, workload, out))
    }
}

/// Seed from `HEDRA_SEED`, if present.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(invalid(format!("{SEED_ENV}: {e}"))),
    }
}
