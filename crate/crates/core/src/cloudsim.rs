//! In-memory stand-in for the cloud server: a block store whose contents are
//! derived on demand from a seed, a digest table computed at provisioning,
//! corruption injection, and the proof server that answers challenges.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::error::{Error, Result};

/// Digests of every block, taken before any corruption. Cheap to clone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataTable {
    digests: Arc<Vec<u64>>,
}

impl MetadataTable {
    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<u64> {
        self.digests.get(index as usize).copied()
    }

    /// Stored digests aligned with `indices`.
    pub fn slice(&self, indices: &[u64]) -> Result<Vec<u64>> {
        indices
            .iter()
            .map(|&i| {
                self.get(i).ok_or(Error::InvalidChallenge {
                    index: i,
                    block_count: self.len() as u64,
                })
            })
            .collect()
    }

    pub fn digests(&self) -> &[u64] {
        &self.digests
    }
}

#[derive(Debug, Clone)]
pub struct BlockStore {
    block_count: u64,
    block_size: usize,
    seed: u64,
    corrupted: Vec<u64>,
    corrupted_count: u64,
    sealed: bool,
}

/// Creates a store of `n` blocks (a power of two) and its digest table.
pub fn provision(n: u64, block_size: usize, seed: u64) -> Result<(BlockStore, MetadataTable)> {
    if !n.is_power_of_two() {
        return Err(Error::InvalidParameter(format!("block count {n} is not a power of two")));
    }
    if block_size == 0 {
        return Err(Error::InvalidParameter("block size must be positive".into()));
    }
    let store = BlockStore {
        block_count: n,
        block_size,
        seed,
        corrupted: vec![0; (n as usize).div_ceil(64)],
        corrupted_count: 0,
        sealed: false,
    };
    let threads = std::thread::available_parallelism().map_or(1, |t| t.get()).min(16);
    let chunk = (n as usize).div_ceil(threads).max(1);
    let mut digests = vec![0u64; n as usize];
    std::thread::scope(|scope| {
        for (c, out) in digests.chunks_mut(chunk).enumerate() {
            let store = &store;
            scope.spawn(move || {
                let mut buf = vec![0u8; store.block_size];
                for (j, d) in out.iter_mut().enumerate() {
                    let idx = (c * chunk + j) as u64;
                    store.fill_clean(idx, &mut buf);
                    *d = xxh3_64(&buf);
                }
            });
        }
    });
    Ok((
        store,
        MetadataTable {
            digests: Arc::new(digests),
        },
    ))
}

impl BlockStore {
    pub fn block_count(&self) -> u64 {
        self.block_count
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Ends the injection phase; proofs may be served from now on.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_corrupted(&self, index: u64) -> bool {
        index < self.block_count && self.corrupted[(index / 64) as usize] >> (index % 64) & 1 == 1
    }

    pub fn corrupted_count(&self) -> u64 {
        self.corrupted_count
    }

    pub fn corrupted_blocks(&self) -> Vec<u64> {
        (0..self.block_count).filter(|&i| self.is_corrupted(i)).collect()
    }

    fn fill_clean(&self, index: u64, buf: &mut [u8]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng.fill_bytes(buf);
    }

    /// Current content of a block, corruption included.
    pub fn block(&self, index: u64) -> Result<Vec<u8>> {
        self.check_index(index)?;
        let mut buf = vec![0u8; self.block_size];
        self.fill_clean(index, &mut buf);
        if self.is_corrupted(index) {
            buf[0] ^= 0xFF;
        }
        Ok(buf)
    }

    fn check_index(&self, index: u64) -> Result<()> {
        if index >= self.block_count {
            return Err(Error::InvalidChallenge {
                index,
                block_count: self.block_count,
            });
        }
        Ok(())
    }

    /// Corrupts the planned blocks and returns them in ascending order.
    pub fn inject_errors(&mut self, plan: &CorruptionPlan) -> Result<Vec<u64>> {
        if self.sealed {
            return Err(Error::Lifecycle("cannot inject errors into a sealed store".into()));
        }
        let blocks = plan.select(self.block_count)?;
        for &b in &blocks {
            let (w, bit) = ((b / 64) as usize, b % 64);
            if self.corrupted[w] >> bit & 1 == 0 {
                self.corrupted[w] |= 1 << bit;
                self.corrupted_count += 1;
            }
        }
        Ok(blocks)
    }

    /// Fresh digests of the challenged blocks, in challenge order.
    pub fn serve_proof(&self, challenge: &[u64]) -> Result<Vec<u64>> {
        if !self.sealed {
            return Err(Error::Lifecycle("store must be sealed before serving proofs".into()));
        }
        let mut buf = vec![0u8; self.block_size];
        challenge
            .iter()
            .map(|&i| {
                self.check_index(i)?;
                self.fill_clean(i, &mut buf);
                if self.is_corrupted(i) {
                    buf[0] ^= 0xFF;
                }
                Ok(xxh3_64(&buf))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionAmount {
    Count(u64),
    /// Fraction of the store, rounded down.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorruptionPattern {
    #[default]
    Random,
    /// Non-overlapping runs of consecutive blocks; one shorter run takes any
    /// remainder.
    Runs { run_length: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub amount: CorruptionAmount,
    pub pattern: CorruptionPattern,
    pub seed: u64,
}

impl CorruptionPlan {
    pub fn random_count(count: u64, seed: u64) -> Self {
        Self {
            amount: CorruptionAmount::Count(count),
            pattern: CorruptionPattern::Random,
            seed,
        }
    }

    pub fn count_for(&self, block_count: u64) -> Result<u64> {
        let c = match self.amount {
            CorruptionAmount::Count(c) => c,
            CorruptionAmount::Fraction(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::InvalidParameter(format!(
                        "corruption fraction {f} is outside [0, 1]"
                    )));
                }
                (f * block_count as f64).floor() as u64
            }
        };
        if c > block_count {
            return Err(Error::InvalidParameter(format!(
                "cannot corrupt {c} of {block_count} blocks"
            )));
        }
        Ok(c)
    }

    fn select(&self, n: u64) -> Result<Vec<u64>> {
        let count = self.count_for(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = match self.pattern {
            CorruptionPattern::Random => rand::seq::index::sample(&mut rng, n as usize, count as usize)
                .into_iter()
                .map(|i| i as u64)
                .collect::<Vec<_>>(),
            CorruptionPattern::Runs { run_length } => {
                if run_length == 0 {
                    return Err(Error::InvalidParameter("run length must be positive".into()));
                }
                let mut lengths = vec![run_length; (count / run_length) as usize];
                if count % run_length != 0 {
                    lengths.push(count % run_length);
                }
                lengths.shuffle(&mut rng);
                place_runs(&lengths, n, &mut rng)
            }
        };
        out.sort_unstable();
        Ok(out)
    }
}

/// Places runs uniformly among the arrangements of `lengths.len()` runs and
/// `n − Σ lengths` clean blocks (stars and bars).
fn place_runs<R: Rng + ?Sized>(lengths: &[u64], n: u64, rng: &mut R) -> Vec<u64> {
    let total: u64 = lengths.iter().sum();
    let free = n - total;
    let r = lengths.len();
    let mut slots: Vec<u64> = rand::seq::index::sample(rng, (free as usize) + r, r)
        .into_iter()
        .map(|s| s as u64)
        .collect();
    slots.sort_unstable();
    let mut out = Vec::with_capacity(total as usize);
    let mut consumed = 0u64;
    for (i, (&slot, &len)) in slots.iter().zip(lengths).enumerate() {
        // `slot - i` clean blocks precede this run.
        let start = slot - i as u64 + consumed;
        out.extend(start..start + len);
        consumed += len;
    }
    out
}

/// Pool of interchangeable replicas in front of one logical store. A proof
/// may come from any replica; each request gets a simulated latency.
#[derive(Debug, Clone)]
pub struct ServerPool {
    store: Arc<BlockStore>,
    replicas: u32,
    jitter_us: u64,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proof {
    pub digests: Vec<u64>,
    pub replica: u32,
    pub latency_us: u64,
}

impl ServerPool {
    pub fn new(store: BlockStore, replicas: u32, jitter_us: u64, seed: u64) -> Result<Self> {
        if !store.is_sealed() {
            return Err(Error::Lifecycle("store must be sealed before it is served".into()));
        }
        Ok(Self {
            store: Arc::new(store),
            replicas: replicas.max(1),
            jitter_us,
            seed,
        })
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    /// Answers one challenge. `request_id` makes replica choice and latency
    /// reproducible regardless of call order.
    pub fn serve(&self, request_id: u64, challenge: &[u64]) -> Result<Proof> {
        let digests = self.store.serve_proof(challenge)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5E_ED0F_5E5E);
        rng.set_stream(request_id);
        let replica = rng.gen_range(0..self.replicas);
        let latency_us = if self.jitter_us == 0 {
            0
        } else {
            rng.gen_range(0..=self.jitter_us)
        };
        Ok(Proof {
            digests,
            replica,
            latency_us,
        })
    }
}

/// Store and corruption parameters as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub blocks: u64,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub replicas: Option<u32>,
    #[serde(default)]
    pub jitter_us: Option<u64>,
    pub error: ErrorConfig,
}

fn default_block_size() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorConfig {
    #[serde(default)]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub count: Option<u64>,
    #[serde(default)]
    pub pattern: ErrorPattern,
    #[serde(default)]
    pub run_length: Option<u64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPattern {
    #[default]
    Random,
    Runs,
}

impl ErrorConfig {
    pub fn plan(&self) -> Result<CorruptionPlan> {
        let amount = match (self.fraction, self.count) {
            (Some(f), None) => CorruptionAmount::Fraction(f),
            (None, Some(c)) => CorruptionAmount::Count(c),
            _ => {
                return Err(Error::InvalidParameter(
                    "error section needs exactly one of `fraction` or `count`".into(),
                ))
            }
        };
        let pattern = match (self.pattern, self.run_length) {
            (ErrorPattern::Random, None) => CorruptionPattern::Random,
            (ErrorPattern::Runs, Some(run_length)) => CorruptionPattern::Runs { run_length },
            (ErrorPattern::Random, Some(_)) => {
                return Err(Error::InvalidParameter(
                    "`run_length` only applies to the runs pattern".into(),
                ))
            }
            (ErrorPattern::Runs, None) => {
                return Err(Error::InvalidParameter("runs pattern needs `run_length`".into()))
            }
        };
        Ok(CorruptionPlan {
            amount,
            pattern,
            seed: self.seed,
        })
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.blocks.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "blocks = {} is not a power of two",
                self.blocks
            )));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidParameter("block_size must be positive".into()));
        }
        self.error.plan()?.count_for(self.blocks)?;
        Ok(())
    }
}

/// A provisioned, unsealed store ready for per-trial corruption.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    clean: BlockStore,
    pub metadata: MetadataTable,
}

/// A sealed store for one trial, with its ground truth.
#[derive(Debug, Clone)]
pub struct SealedScenario {
    pub pool: ServerPool,
    pub metadata: MetadataTable,
    pub corrupted: BTreeSet<u64>,
}

impl Scenario {
    pub fn provision(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let (clean, metadata) = provision(config.blocks, config.block_size, config.seed)?;
        Ok(Self {
            config: config.clone(),
            clean,
            metadata,
        })
    }

    pub fn block_count(&self) -> u64 {
        self.config.blocks
    }

    /// Injects the configured errors (seed offset by `trial`) and seals.
    pub fn trial(&self, trial: u64) -> Result<SealedScenario> {
        let mut plan = self.config.error.plan()?;
        plan.seed = plan.seed.wrapping_add(trial);
        self.with_plan(&plan)
    }

    pub fn with_plan(&self, plan: &CorruptionPlan) -> Result<SealedScenario> {
        let mut store = self.clean.clone();
        let corrupted = store.inject_errors(plan)?.into_iter().collect();
        store.seal();
        let pool = ServerPool::new(
            store,
            self.config.replicas.unwrap_or(1),
            self.config.jitter_us.unwrap_or(0),
            self.config.seed,
        )?;
        Ok(SealedScenario {
            pool,
            metadata: self.metadata.clone(),
            corrupted,
        })
    }
}
