//! Coordinator and SUBTPA agents for the four audit protocols.
//!
//! Every protocol reduces to the same loop once each agent knows its
//! subsequence: the subsequence is cut into ten packets, each packet is sent
//! as one challenge, the proof is compared with stored metadata, and a
//! mismatch produces a signal to the coordinator. Protocols differ only in
//! how subsequences are obtained:
//!
//! 1. the coordinator partitions the shared sequence into contiguous parts;
//! 2. each agent applies its task distribution key, delivered by string
//!    reconciliation against a common key;
//! 3. as 2, but a mismatch triggers one follow-up challenge over nearby
//!    unchecked blocks and a single consolidated signal;
//! 4. each agent draws its own key and samples the sequence on its own.
//!
//! Agents are stepped one packet at a time. Sequential mode steps them
//! round-robin (packet round, then agent id). Concurrent mode runs each agent
//! to completion on its own thread and then replays the per-agent logs in the
//! same round-robin order, so both modes yield identical outcomes, including
//! where a threshold stop cuts the audit short.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::cloudsim::{MetadataTable, SealedScenario, ServerPool};
use crate::error::{Error, Result};
use crate::sobol::{generate, BlockSequence, SobolKey};
use crate::strrecon::{distribute_tdk, DistributionParams};
use crate::tdk::{
    adjust_length, generate_nonoverlapping, generate_overlapping, interpret, OverlapPlacement,
    TaskDistributionKey, TdkSet,
};

/// Number of packets a subsequence is split into.
pub const PACKETS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub n: usize,
    pub m: usize,
}

impl ThresholdConfig {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 || m > n {
            return Err(Error::InvalidParameter(format!(
                "threshold needs 1 ≤ m ≤ n, got m = {m}, n = {n}"
            )));
        }
        Ok(Self { n, m })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopPolicy {
    StopOnThreshold,
    #[default]
    RunToCompletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    #[default]
    Sequential,
    Concurrent,
}

/// Where the shared block sequence comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceSource {
    #[default]
    Sobol,
    /// Distinct uniformly random blocks, for comparison runs.
    PseudoRandom,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub stop: StopPolicy,
    pub mode: ExecutionMode,
    pub source: SequenceSource,
    pub distribution: DistributionParams,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stop: StopPolicy::RunToCompletion,
            mode: ExecutionMode::Sequential,
            source: SequenceSource::Sobol,
            distribution: DistributionParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub subtpa: usize,
    pub packet: usize,
    pub indices: Vec<u64>,
}

/// Mismatch report sent to the coordinator (status FALSE is implicit).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signal {
    pub subtpa: usize,
    pub packet: usize,
    pub min: u64,
    pub max: u64,
    pub blocks: Vec<u64>,
}

/// One packet round of one agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub subtpa: usize,
    pub packet: usize,
    pub challenged: Vec<u64>,
    pub mismatched: Vec<u64>,
    pub followup: Vec<u64>,
    pub followup_mismatched: Vec<u64>,
    pub signal: Option<Signal>,
}

impl PacketRecord {
    pub fn checked(&self) -> usize {
        self.challenged.len() + self.followup.len()
    }

    pub fn mismatches(&self) -> usize {
        self.mismatched.len() + self.followup_mismatched.len()
    }

    /// Messages sent to the server for this round.
    pub fn challenges(&self) -> usize {
        (!self.challenged.is_empty()) as usize + (!self.followup.is_empty()) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentReport {
    pub subtpa: usize,
    pub subsequence_len: usize,
    /// Fewer than ten blocks: the subsequence went out as one packet.
    pub single_packet: bool,
    pub packets: Vec<PacketRecord>,
}

impl AgentReport {
    pub fn detected(&self) -> usize {
        self.packets.iter().map(PacketRecord::mismatches).sum()
    }

    pub fn checked(&self) -> usize {
        self.packets.iter().map(PacketRecord::checked).sum()
    }

    /// `Report[k]`: true when packet k verified cleanly.
    pub fn report(&self) -> Vec<bool> {
        self.packets.iter().map(|p| p.mismatches() == 0).collect()
    }

    pub fn first_error_packet(&self) -> Option<usize> {
        self.packets.iter().find(|p| p.mismatches() > 0).map(|p| p.packet)
    }

    pub fn signals(&self) -> usize {
        self.packets.iter().filter(|p| p.signal.is_some()).count()
    }

    pub fn challenged_blocks(&self) -> Vec<u64> {
        self.packets
            .iter()
            .flat_map(|p| p.challenged.iter().chain(&p.followup).copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    Completed,
    ThresholdStop { round: usize, signaled: usize },
}

/// Bandwidth spent delivering task distribution keys.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub eval_pairs: usize,
    pub piece_entries: usize,
    pub requested_values: usize,
    pub indices: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditOutcome {
    pub protocol: u8,
    pub agents: Vec<AgentReport>,
    pub stop: StopReason,
    pub signals: Vec<Signal>,
    pub corrupted_total: usize,
    /// Corrupted blocks that appear in some agent's subsequence.
    pub corrupted_covered: usize,
    pub distribution: Option<DistributionStats>,
}

impl AuditOutcome {
    pub fn total_detected(&self) -> usize {
        self.agents.iter().map(AgentReport::detected).sum()
    }

    pub fn detected_blocks(&self) -> BTreeSet<u64> {
        self.agents
            .iter()
            .flat_map(|a| a.packets.iter())
            .flat_map(|p| p.mismatched.iter().chain(&p.followup_mismatched).copied())
            .collect()
    }

    pub fn challenges_issued(&self) -> usize {
        self.agents
            .iter()
            .flat_map(|a| a.packets.iter())
            .map(PacketRecord::challenges)
            .sum()
    }

    pub fn subsequence_sizes(&self) -> Vec<usize> {
        self.agents.iter().map(|a| a.subsequence_len).collect()
    }

    pub fn signal_count(&self) -> usize {
        self.signals.len()
    }
}

/// Contiguous parts of size `⌊len/n⌋`, the last part taking the remainder.
pub fn partition_sequence(seq: &BlockSequence, n: usize) -> Result<Vec<BlockSequence>> {
    if n == 0 {
        return Err(Error::InvalidParameter("cannot partition among zero agents".into()));
    }
    let base = seq.len() / n;
    let s = seq.as_slice();
    Ok((0..n)
        .map(|i| {
            let end = if i + 1 == n { s.len() } else { (i + 1) * base };
            BlockSequence::from(s[i * base..end].to_vec())
        })
        .collect())
}

/// Ten packets of `⌊len/10⌋` with the remainder in the last. Subsequences of
/// fewer than ten blocks go out as a single packet (flagged by the bool).
pub fn chunk(sub: &[u64]) -> (Vec<Vec<u64>>, bool) {
    if sub.len() < PACKETS {
        let packets = if sub.is_empty() { Vec::new() } else { vec![sub.to_vec()] };
        return (packets, true);
    }
    let size = sub.len() / PACKETS;
    let packets = (0..PACKETS)
        .map(|k| {
            let end = if k + 1 == PACKETS { sub.len() } else { (k + 1) * size };
            sub[k * size..end].to_vec()
        })
        .collect();
    (packets, false)
}

pub fn chunk_challenges(subtpa: usize, sub: &[u64]) -> Vec<Challenge> {
    chunk(sub)
        .0
        .into_iter()
        .enumerate()
        .map(|(k, indices)| Challenge {
            subtpa,
            packet: k + 1,
            indices,
        })
        .collect()
}

/// Position-wise comparison of a proof with stored digests.
pub fn verify_proof(proof: &[u64], metadata: &[u64]) -> Result<Vec<bool>> {
    if proof.len() != metadata.len() {
        return Err(Error::Protocol(format!(
            "proof has {} digests for {} challenged blocks",
            proof.len(),
            metadata.len()
        )));
    }
    Ok(proof.iter().zip(metadata).map(|(a, b)| a == b).collect())
}

struct Agent {
    id: usize,
    packets: Vec<Vec<u64>>,
    next: usize,
    single_packet: bool,
    subsequence_len: usize,
    near: Option<Neighbourhood>,
}

/// Unchecked part of a protocol-3 agent's subsequence.
struct Neighbourhood {
    range: u64,
    unchecked: BTreeSet<u64>,
}

impl Agent {
    fn new(id: usize, sub: &[u64], near_range: Option<u64>) -> Self {
        let (packets, single_packet) = chunk(sub);
        Self {
            id,
            packets,
            next: 0,
            single_packet,
            subsequence_len: sub.len(),
            near: near_range.map(|range| Neighbourhood {
                range,
                unchecked: sub.iter().copied().collect(),
            }),
        }
    }

    fn done(&self) -> bool {
        self.next >= self.packets.len()
    }

    fn challenge(&self, pool: &ServerPool, meta: &MetadataTable, blocks: &[u64], request: u64) -> Result<Vec<u64>> {
        if blocks.is_empty() {
            return Ok(Vec::new());
        }
        let proof = pool.serve(request, blocks)?;
        let ok = verify_proof(&proof.digests, &meta.slice(blocks)?)?;
        Ok(blocks
            .iter()
            .zip(ok)
            .filter(|(_, ok)| !ok)
            .map(|(&b, _)| b)
            .collect())
    }

    fn step(&mut self, pool: &ServerPool, meta: &MetadataTable) -> Result<PacketRecord> {
        let k = self.next;
        self.next += 1;
        let packet = k + 1;
        let request = ((self.id as u64) << 24) | ((packet as u64) << 1);
        let mut challenged = self.packets[k].clone();
        if let Some(nb) = &mut self.near {
            challenged.retain(|b| nb.unchecked.remove(b));
        }
        let mismatched = self.challenge(pool, meta, &challenged, request)?;

        let (mut followup, mut followup_mismatched) = (Vec::new(), Vec::new());
        if let Some(nb) = &mut self.near {
            if !mismatched.is_empty() && nb.range > 0 {
                let mut near = BTreeSet::new();
                for &e in &mismatched {
                    let lo = e.saturating_sub(nb.range);
                    let hi = e.saturating_add(nb.range);
                    near.extend(nb.unchecked.range(lo..=hi).copied());
                }
                for b in &near {
                    nb.unchecked.remove(b);
                }
                followup = near.into_iter().collect();
            }
        }
        if !followup.is_empty() {
            followup_mismatched = self.challenge(pool, meta, &followup, request | 1)?;
        }

        let signal = if mismatched.is_empty() && followup_mismatched.is_empty() {
            None
        } else {
            let mut blocks: Vec<u64> = mismatched.iter().chain(&followup_mismatched).copied().collect();
            blocks.sort_unstable();
            Some(Signal {
                subtpa: self.id,
                packet,
                min: blocks[0],
                max: blocks[blocks.len() - 1],
                blocks,
            })
        };
        Ok(PacketRecord {
            subtpa: self.id,
            packet,
            challenged,
            mismatched,
            followup,
            followup_mismatched,
            signal,
        })
    }

    fn report(&self) -> AgentReport {
        AgentReport {
            subtpa: self.id,
            subsequence_len: self.subsequence_len,
            single_packet: self.single_packet,
            packets: Vec::new(),
        }
    }
}

/// Coordinator-side bookkeeping while records arrive in round-robin order.
struct Coordinator {
    threshold: ThresholdConfig,
    stop: StopPolicy,
    reports: Vec<AgentReport>,
    signals: Vec<Signal>,
    signaled: HashSet<usize>,
}

impl Coordinator {
    /// Returns true when the audit must stop.
    fn apply(&mut self, round: usize, rec: PacketRecord) -> Option<StopReason> {
        if let Some(s) = &rec.signal {
            self.signals.push(s.clone());
            self.signaled.insert(rec.subtpa);
        }
        self.reports[rec.subtpa].packets.push(rec);
        (self.stop == StopPolicy::StopOnThreshold && self.signaled.len() >= self.threshold.m).then_some(
            StopReason::ThresholdStop {
                round,
                signaled: self.signaled.len(),
            },
        )
    }
}

fn execute(
    protocol: u8,
    mut agents: Vec<Agent>,
    scenario: &SealedScenario,
    threshold: &ThresholdConfig,
    opts: &RunOptions,
    distribution: Option<DistributionStats>,
) -> Result<AuditOutcome> {
    if agents.len() != threshold.n {
        return Err(Error::InvalidParameter(format!(
            "threshold configured for {} agents but {} are running",
            threshold.n,
            agents.len()
        )));
    }
    let pool = &scenario.pool;
    let meta = &scenario.metadata;
    let covered: HashSet<u64> = agents
        .iter()
        .flat_map(|a| a.packets.iter().flatten().copied())
        .collect();
    let corrupted_covered = scenario.corrupted.iter().filter(|b| covered.contains(b)).count();
    let mut coord = Coordinator {
        threshold: *threshold,
        stop: opts.stop,
        reports: agents.iter().map(Agent::report).collect(),
        signals: Vec::new(),
        signaled: HashSet::new(),
    };
    let rounds = agents.iter().map(|a| a.packets.len()).max().unwrap_or(0);
    let mut stop = StopReason::Completed;

    match opts.mode {
        ExecutionMode::Sequential => {
            'rounds: for round in 1..=rounds {
                for agent in agents.iter_mut() {
                    if agent.done() {
                        continue;
                    }
                    let rec = agent.step(pool, meta)?;
                    if let Some(s) = coord.apply(round, rec) {
                        stop = s;
                        break 'rounds;
                    }
                }
            }
        }
        ExecutionMode::Concurrent => {
            let logs: Vec<Result<Vec<PacketRecord>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = agents
                    .iter_mut()
                    .map(|agent| {
                        scope.spawn(move || {
                            let mut log = Vec::with_capacity(agent.packets.len());
                            while !agent.done() {
                                log.push(agent.step(pool, meta)?);
                            }
                            Ok(log)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("agent thread panicked"))
                    .collect()
            });
            let mut logs: Vec<std::vec::IntoIter<PacketRecord>> = logs
                .into_iter()
                .map(|l| l.map(Vec::into_iter))
                .collect::<Result<_>>()?;
            'replay: for round in 1..=rounds {
                for log in logs.iter_mut() {
                    if let Some(rec) = log.next() {
                        if let Some(s) = coord.apply(round, rec) {
                            stop = s;
                            break 'replay;
                        }
                    }
                }
            }
        }
    }

    Ok(AuditOutcome {
        protocol,
        agents: coord.reports,
        stop,
        signals: coord.signals,
        corrupted_total: scenario.corrupted.len(),
        corrupted_covered,
        distribution,
    })
}

/// The shared sequence every party derives from the Sobol key.
pub fn shared_sequence(key: &SobolKey, source: SequenceSource) -> Result<BlockSequence> {
    match source {
        SequenceSource::Sobol => generate(key),
        SequenceSource::PseudoRandom => {
            key.validate()?;
            let seed = xxh3_64(serde_json::to_string(key)?.as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = key.seq_len.min(key.constant) as usize;
            Ok(rand::seq::index::sample(&mut rng, key.constant as usize, len)
                .into_iter()
                .map(|i| i as u64)
                .collect::<Vec<_>>()
                .into())
        }
    }
}

pub fn run_protocol1(
    scenario: &SealedScenario,
    key: &SobolKey,
    threshold: &ThresholdConfig,
    opts: &RunOptions,
) -> Result<AuditOutcome> {
    let seq = shared_sequence(key, opts.source)?;
    let parts = partition_sequence(&seq, threshold.n)?;
    let agents = parts
        .iter()
        .enumerate()
        .map(|(i, p)| Agent::new(i, p.as_slice(), None))
        .collect();
    execute(1, agents, scenario, threshold, opts, None)
}

/// Common key every SUBTPA can derive from the broadcast Sobol key: the same
/// length as the task keys with `ones` pseudo-randomly placed set bits.
pub fn common_key(key: &SobolKey, len: usize, ones: usize) -> Result<TaskDistributionKey> {
    let seed = xxh3_64(serde_json::to_string(key)?.as_bytes()) ^ 0xC0_4404;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TaskDistributionKey::random(len, ones.clamp(1, len.max(1)), usize::MAX, &mut rng)
}

/// Delivers each key by string reconciliation and returns what every agent
/// ended up holding, plus the bandwidth spent.
pub fn distribute_keys(
    key: &SobolKey,
    tdk_set: &TdkSet,
    params: &DistributionParams,
) -> Result<(Vec<TaskDistributionKey>, DistributionStats)> {
    let strings = tdk_set.strings();
    let ones = tdk_set.keys.iter().map(TaskDistributionKey::ones).max().unwrap_or(1);
    let common = common_key(key, tdk_set.key_len(), ones)?.to_string();
    let mut stats = DistributionStats::default();
    let mut held = Vec::with_capacity(strings.len());
    for i in 0..strings.len() {
        let d = distribute_tdk(&strings, &common, i, params)?;
        if d.key != strings[i] {
            return Err(Error::Protocol(format!(
                "SUBTPA {i} decoded {} instead of its key",
                d.key
            )));
        }
        stats.eval_pairs += d.transcript.eval_pairs();
        stats.piece_entries += d.transcript.piece_entries();
        stats.requested_values += d.transcript.requested_values();
        stats.indices += d.transcript.indices();
        held.push(TaskDistributionKey::parse(&d.key, i)?);
    }
    Ok((held, stats))
}

fn tdk_agents(
    key: &SobolKey,
    tdk_set: &TdkSet,
    near_range: Option<u64>,
    opts: &RunOptions,
) -> Result<(Vec<Agent>, DistributionStats)> {
    let (held, stats) = distribute_keys(key, tdk_set, &opts.distribution)?;
    let seq = shared_sequence(key, opts.source)?;
    let agents = held
        .iter()
        .enumerate()
        .map(|(i, k)| Agent::new(i, interpret(k, &seq).as_slice(), near_range))
        .collect();
    Ok((agents, stats))
}

pub fn run_protocol2(
    scenario: &SealedScenario,
    key: &SobolKey,
    tdk_set: &TdkSet,
    threshold: &ThresholdConfig,
    opts: &RunOptions,
) -> Result<AuditOutcome> {
    let (agents, stats) = tdk_agents(key, tdk_set, None, opts)?;
    execute(2, agents, scenario, threshold, opts, Some(stats))
}

pub fn run_protocol3(
    scenario: &SealedScenario,
    key: &SobolKey,
    tdk_set: &TdkSet,
    threshold: &ThresholdConfig,
    near_range: u64,
    opts: &RunOptions,
) -> Result<AuditOutcome> {
    let (agents, stats) = tdk_agents(key, tdk_set, Some(near_range), opts)?;
    execute(3, agents, scenario, threshold, opts, Some(stats))
}

/// Key an autonomous agent draws for itself: length `adjust_length(n × t)`
/// with `round(pct × len / 100)` (at least one) random set bits.
pub fn self_key(n: usize, t: usize, seq_len: u64, sample_pct: f64, seed: u64, owner: usize) -> Result<TaskDistributionKey> {
    if !(sample_pct > 0.0 && sample_pct <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "self-sample percentage {sample_pct} is outside (0, 100]"
        )));
    }
    let len = adjust_length((n * t).max(1), seq_len);
    let ones = ((sample_pct * len as f64 / 100.0).round() as usize).clamp(1, len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TaskDistributionKey::random(len, ones, owner, &mut rng)
}

pub fn run_protocol4(
    scenario: &SealedScenario,
    key: &SobolKey,
    threshold: &ThresholdConfig,
    t: usize,
    sample_pct: f64,
    agent_seeds: &[u64],
    opts: &RunOptions,
) -> Result<AuditOutcome> {
    if agent_seeds.len() != threshold.n {
        return Err(Error::InvalidParameter(format!(
            "{} agent seeds for {} agents",
            agent_seeds.len(),
            threshold.n
        )));
    }
    let seq = shared_sequence(key, opts.source)?;
    let agents = agent_seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let k = self_key(threshold.n, t, seq.len() as u64, sample_pct, seed, i)?;
            Ok(Agent::new(i, interpret(&k, &seq).as_slice(), None))
        })
        .collect::<Result<_>>()?;
    execute(4, agents, scenario, threshold, opts, None)
}

/// Protocol choice plus its protocol-specific knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "protocol")]
pub enum ProtocolParams {
    #[serde(rename = "1")]
    Partition,
    #[serde(rename = "2")]
    Tdk(TdkParams),
    #[serde(rename = "3")]
    Adaptive {
        #[serde(flatten)]
        tdk: TdkParams,
        near_range: u64,
    },
    #[serde(rename = "4")]
    Autonomous { t: usize, self_pct: f64 },
}

impl ProtocolParams {
    pub fn number(&self) -> u8 {
        match self {
            ProtocolParams::Partition => 1,
            ProtocolParams::Tdk(_) => 2,
            ProtocolParams::Adaptive { .. } => 3,
            ProtocolParams::Autonomous { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdkParams {
    /// Set bits per key.
    pub t: usize,
    #[serde(default)]
    pub overlap_pct: u32,
    #[serde(default)]
    pub placement: OverlapPlacement,
    /// Keep the raw `n × t` length instead of the coprime adjustment.
    #[serde(default)]
    pub unadjusted: bool,
}

/// Everything needed to run one protocol over many trials.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditParams {
    pub protocol: ProtocolParams,
    pub subtpas: usize,
    pub threshold: usize,
    /// Length of the shared sequence as a percentage of the store.
    pub sample_pct: f64,
    pub sobol_degree: u32,
    pub options: RunOptions,
}

impl AuditParams {
    pub fn validate(&self, block_count: u64) -> Result<()> {
        ThresholdConfig::new(self.subtpas, self.threshold)?;
        self.seq_len(block_count)?;
        if self.sobol_degree == 0 || self.sobol_degree > crate::sobol::MAX_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "sobol degree {} is out of range",
                self.sobol_degree
            )));
        }
        match &self.protocol {
            ProtocolParams::Partition => {}
            ProtocolParams::Tdk(p) | ProtocolParams::Adaptive { tdk: p, .. } => {
                if p.t == 0 {
                    return Err(Error::InvalidParameter("t must be positive".into()));
                }
                if p.overlap_pct > 100 {
                    return Err(Error::InvalidParameter("overlap above 100%".into()));
                }
            }
            ProtocolParams::Autonomous { t, self_pct } => {
                if *t == 0 || !(*self_pct > 0.0 && *self_pct <= 100.0) {
                    return Err(Error::InvalidParameter(
                        "protocol 4 needs t ≥ 1 and 0 < self_pct ≤ 100".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn seq_len(&self, block_count: u64) -> Result<u64> {
        if !(self.sample_pct > 0.0 && self.sample_pct <= 100.0) {
            return Err(Error::InvalidParameter(format!(
                "sample percentage {} is outside (0, 100]",
                self.sample_pct
            )));
        }
        Ok(((self.sample_pct / 100.0 * block_count as f64).floor() as u64).max(1))
    }
}

/// Seed for everything the coordinator draws in one trial.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    xxh3_64(&[seed.to_le_bytes(), trial.to_le_bytes()].concat())
}

/// Runs one trial: draws the Sobol key (and keys, for protocols 2–4) from
/// the trial seed and audits the sealed store.
pub fn run_trial(
    scenario: &SealedScenario,
    block_count: u64,
    params: &AuditParams,
    seed: u64,
    trial: u64,
) -> Result<AuditOutcome> {
    params.validate(block_count)?;
    let seq_len = params.seq_len(block_count)?;
    let threshold = ThresholdConfig::new(params.subtpas, params.threshold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, trial));
    let key = SobolKey::random(&mut rng, params.sobol_degree, block_count, seq_len)?;
    let opts = &params.options;
    match &params.protocol {
        ProtocolParams::Partition => run_protocol1(scenario, &key, &threshold, opts),
        ProtocolParams::Tdk(p) => {
            let set = draw_tdks(p, params.subtpas, seq_len, &mut rng)?;
            run_protocol2(scenario, &key, &set, &threshold, opts)
        }
        ProtocolParams::Adaptive { tdk, near_range } => {
            let set = draw_tdks(tdk, params.subtpas, seq_len, &mut rng)?;
            run_protocol3(scenario, &key, &set, &threshold, *near_range, opts)
        }
        ProtocolParams::Autonomous { t, self_pct } => {
            let seeds: Vec<u64> = (0..params.subtpas).map(|_| rng.gen()).collect();
            run_protocol4(scenario, &key, &threshold, *t, *self_pct, &seeds, opts)
        }
    }
}

pub fn draw_tdks<R: Rng + ?Sized>(p: &TdkParams, n: usize, seq_len: u64, rng: &mut R) -> Result<TdkSet> {
    let base = if p.unadjusted {
        crate::tdk::generate_nonoverlapping_with_len(n, p.t, n * p.t, rng)?
    } else {
        generate_nonoverlapping(n, p.t, seq_len, rng)?
    };
    if p.overlap_pct == 0 {
        Ok(base)
    } else {
        generate_overlapping(&base, p.overlap_pct, p.placement, rng)
    }
}

/// One row of the per-packet report CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub trial: u64,
    pub subtpa: usize,
    pub packet: usize,
    pub checked: usize,
    pub mismatches: usize,
    pub first_error_packet: Option<usize>,
    pub signals: usize,
}

pub fn report_records(trial: u64, outcome: &AuditOutcome) -> Vec<ReportRecord> {
    outcome
        .agents
        .iter()
        .flat_map(|a| {
            let first = a.first_error_packet();
            a.packets.iter().map(move |p| ReportRecord {
                trial,
                subtpa: a.subtpa,
                packet: p.packet,
                checked: p.checked(),
                mismatches: p.mismatches(),
                first_error_packet: first,
                signals: p.signal.is_some() as usize,
            })
        })
        .collect()
}

pub fn write_report_csv<W: std::io::Write>(writer: W, records: &[ReportRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv<R: std::io::Read>(reader: R) -> Result<Vec<ReportRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudsim::{CorruptionAmount, CorruptionPattern, CorruptionPlan, ErrorConfig, ErrorPattern, Scenario, ScenarioConfig};

    fn scenario(blocks: u64, errors: u64, seed: u64) -> Scenario {
        Scenario::provision(&ScenarioConfig {
            blocks,
            block_size: 32,
            seed,
            replicas: Some(2),
            jitter_us: Some(100),
            error: ErrorConfig {
                fraction: None,
                count: Some(errors),
                pattern: ErrorPattern::Random,
                run_length: None,
                seed,
            },
        })
        .unwrap()
    }

    fn key(n: u64, len: u64, seed: u64) -> SobolKey {
        SobolKey::random(&mut ChaCha8Rng::seed_from_u64(seed), 7, n, len).unwrap()
    }

    #[test]
    fn partition_examples() {
        let seq = BlockSequence::from((0..128).collect::<Vec<_>>());
        let sizes: Vec<usize> = partition_sequence(&seq, 4).unwrap().iter().map(|p| p.len()).collect();
        assert_eq!(sizes, [32; 4]);
        let seq = BlockSequence::from((0..130).collect::<Vec<_>>());
        let parts = partition_sequence(&seq, 4).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert_eq!(sizes, [32, 32, 32, 34]);
        let joined: Vec<u64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        assert_eq!(joined, seq.indices);
        assert_eq!(partition_sequence(&seq, 1).unwrap()[0], seq);
        assert!(partition_sequence(&seq, 0).is_err());
    }

    #[test]
    fn chunk_examples() {
        let sub: Vec<u64> = (0..10_485).collect();
        let (packets, single) = chunk(&sub);
        assert!(!single);
        let sizes: Vec<usize> = packets.iter().map(Vec::len).collect();
        assert_eq!(sizes, [1048, 1048, 1048, 1048, 1048, 1048, 1048, 1048, 1048, 1053]);
        assert_eq!(packets.concat(), sub);
        assert_eq!(chunk(&sub[..10]).0.iter().map(Vec::len).collect::<Vec<_>>(), [1; 10]);
        assert_eq!(chunk(&sub[..100]).0.iter().map(Vec::len).collect::<Vec<_>>(), [10; 10]);
        let (p, single) = chunk(&sub[..7]);
        assert!(single && p.len() == 1 && p[0].len() == 7);
        assert_eq!(chunk_challenges(3, &sub[..20])[9].packet, 10);
    }

    #[test]
    fn proof_verification() {
        assert_eq!(verify_proof(&[1, 2, 3], &[1, 2, 3]).unwrap(), [true; 3]);
        assert_eq!(verify_proof(&[1, 9, 3], &[1, 2, 3]).unwrap(), [true, false, true]);
        assert!(matches!(verify_proof(&[1], &[1, 2]), Err(Error::Protocol(_))));
    }

    #[test]
    fn clean_store_reports_all_true() {
        let sc = scenario(1 << 12, 0, 1);
        let sealed = sc.trial(0).unwrap();
        let th = ThresholdConfig::new(4, 4).unwrap();
        let out = run_protocol1(&sealed, &key(1 << 12, 800, 1), &th, &RunOptions::default()).unwrap();
        assert_eq!(out.total_detected(), 0);
        assert!(out.signals.is_empty());
        assert!(out.agents.iter().all(|a| a.report().iter().all(|&r| r)));
        assert_eq!(out.stop, StopReason::Completed);
        assert_eq!(out.agents.iter().map(AgentReport::checked).sum::<usize>(), 800);
    }

    #[test]
    fn ground_truth_replay() {
        let sc = scenario(1 << 12, 200, 2);
        let sealed = sc.trial(0).unwrap();
        let th = ThresholdConfig::new(4, 4).unwrap();
        let k = key(1 << 12, 1 << 12, 3);
        let out = run_protocol1(&sealed, &k, &th, &RunOptions::default()).unwrap();
        assert_eq!(out.total_detected(), 200);
        assert_eq!(out.detected_blocks(), sealed.corrupted);
        assert_eq!(out.corrupted_covered, 200);
    }

    #[test]
    fn threshold_stop_and_monotonicity() {
        let sc = scenario(1 << 12, 80, 4);
        let sealed = sc.trial(0).unwrap();
        let k = key(1 << 12, 1000, 5);
        let mut issued = Vec::new();
        for m in 1..=5 {
            let th = ThresholdConfig::new(5, m).unwrap();
            let opts = RunOptions {
                stop: StopPolicy::StopOnThreshold,
                ..RunOptions::default()
            };
            let out = run_protocol1(&sealed, &k, &th, &opts).unwrap();
            if m == 1 {
                assert!(matches!(out.stop, StopReason::ThresholdStop { signaled: 1, .. }));
            }
            if let StopReason::ThresholdStop { signaled, .. } = out.stop {
                assert!(signaled >= m);
            }
            issued.push(out.challenges_issued());
        }
        assert!(issued.windows(2).all(|w| w[0] <= w[1]), "{issued:?}");
        assert!(ThresholdConfig::new(3, 4).is_err());
    }

    #[test]
    fn concurrent_matches_sequential() {
        let sc = scenario(1 << 12, 60, 6);
        let sealed = sc.trial(0).unwrap();
        let k = key(1 << 12, 1500, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = generate_nonoverlapping(4, 3, 1500, &mut rng).unwrap();
        for stop in [StopPolicy::RunToCompletion, StopPolicy::StopOnThreshold] {
            let th = ThresholdConfig::new(4, 2).unwrap();
            let seq = RunOptions { stop, ..RunOptions::default() };
            let con = RunOptions { stop, mode: ExecutionMode::Concurrent, ..RunOptions::default() };
            assert_eq!(
                run_protocol3(&sealed, &k, &set, &th, 32, &seq).unwrap(),
                run_protocol3(&sealed, &k, &set, &th, 32, &con).unwrap()
            );
            assert_eq!(
                run_protocol1(&sealed, &k, &th, &seq).unwrap(),
                run_protocol1(&sealed, &k, &th, &con).unwrap()
            );
        }
    }

    #[test]
    fn protocol2_positions_disjoint() {
        let sc = scenario(1 << 12, 40, 8);
        let sealed = sc.trial(0).unwrap();
        let k = key(1 << 12, 900, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = generate_nonoverlapping(5, 3, 900, &mut rng).unwrap();
        let th = ThresholdConfig::new(5, 5).unwrap();
        let out = run_protocol2(&sealed, &k, &set, &th, &RunOptions::default()).unwrap();
        let mut seen = HashSet::new();
        for a in &out.agents {
            for b in a.challenged_blocks() {
                assert!(seen.insert(b), "block {b} challenged twice");
            }
        }
        let stats = out.distribution.unwrap();
        assert_eq!(stats.indices, 5);
    }

    #[test]
    fn single_all_ones_key_is_full_audit() {
        let sc = scenario(1 << 10, 30, 10);
        let sealed = sc.trial(0).unwrap();
        let k = key(1 << 10, 1 << 10, 11);
        let set = TdkSet {
            keys: vec![TaskDistributionKey::parse("111", 0).unwrap()],
            mode: crate::tdk::TdkMode::NonOverlapping,
            base_len: 3,
        };
        let th = ThresholdConfig::new(1, 1).unwrap();
        let p2 = run_protocol2(&sealed, &k, &set, &th, &RunOptions::default()).unwrap();
        let p1 = run_protocol1(&sealed, &k, &th, &RunOptions::default()).unwrap();
        assert_eq!(p2.agents[0].packets, p1.agents[0].packets);
    }

    #[test]
    fn protocol3_collapses_runs() {
        let sc = scenario(1 << 14, 0, 12);
        let plan = CorruptionPlan {
            amount: CorruptionAmount::Count(256),
            pattern: CorruptionPattern::Runs { run_length: 64 },
            seed: 12,
        };
        let sealed = sc.with_plan(&plan).unwrap();
        let k = key(1 << 14, 1 << 13, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = generate_nonoverlapping(4, 3, 1 << 13, &mut rng).unwrap();
        let th = ThresholdConfig::new(4, 4).unwrap();
        let o = RunOptions::default();
        let p2 = run_protocol2(&sealed, &k, &set, &th, &o).unwrap();
        let p3 = run_protocol3(&sealed, &k, &set, &th, 128, &o).unwrap();
        let p3_zero = run_protocol3(&sealed, &k, &set, &th, 0, &o).unwrap();
        assert!(p3.signal_count() <= p2.signal_count());
        assert_eq!(p3.detected_blocks(), p2.detected_blocks());
        assert_eq!(p3_zero.signal_count(), p2.signal_count());
        assert_eq!(p3_zero.detected_blocks(), p2.detected_blocks());
        for s in &p3.signals {
            assert_eq!(s.min, s.blocks[0]);
            assert_eq!(s.max, *s.blocks.last().unwrap());
        }
    }

    #[test]
    fn protocol4_self_keys() {
        let sc = scenario(1 << 12, 50, 14);
        let sealed = sc.trial(0).unwrap();
        let k = key(1 << 12, 2000, 15);
        let th = ThresholdConfig::new(2, 2).unwrap();
        let out = run_protocol4(&sealed, &k, &th, 50, 10.0, &[7, 7], &RunOptions::default()).unwrap();
        assert_eq!(out.agents[0].challenged_blocks(), out.agents[1].challenged_blocks());
        let len = out.agents[0].subsequence_len as f64;
        assert!((len - 200.0).abs() < 40.0, "{len}");
        let solo = ThresholdConfig::new(1, 1).unwrap();
        assert_eq!(run_protocol4(&sealed, &k, &solo, 3, 10.0, &[1], &RunOptions::default()).unwrap().agents.len(), 1);
        assert!(run_protocol4(&sealed, &k, &th, 3, 10.0, &[1], &RunOptions::default()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let sc = scenario(1 << 10, 20, 16);
        let sealed = sc.trial(0).unwrap();
        let th = ThresholdConfig::new(2, 2).unwrap();
        let out = run_protocol1(&sealed, &key(1 << 10, 500, 1), &th, &RunOptions::default()).unwrap();
        let recs = report_records(3, &out);
        assert_eq!(recs.len(), 20);
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("trial,subtpa,packet,checked,mismatches,first_error_packet,signals\n"));
        assert_eq!(read_report_csv(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn trial_runner_is_deterministic() {
        let sc = scenario(1 << 12, 40, 17);
        let sealed = sc.trial(0).unwrap();
        let params = AuditParams {
            protocol: ProtocolParams::Tdk(TdkParams { t: 3, overlap_pct: 10, placement: OverlapPlacement::Shared, unadjusted: false }),
            subtpas: 4,
            threshold: 4,
            sample_pct: 20.0,
            sobol_degree: 6,
            options: RunOptions::default(),
        };
        let a = run_trial(&sealed, 1 << 12, &params, 5, 0).unwrap();
        let b = run_trial(&sealed, 1 << 12, &params, 5, 0).unwrap();
        assert_eq!(a, b);
        let bad = AuditParams { threshold: 5, ..params.clone() };
        assert!(run_trial(&sealed, 1 << 12, &bad, 5, 0).is_err());
    }

    #[test]
    fn pseudo_random_source() {
        let k = key(1 << 12, 300, 1);
        let s = shared_sequence(&k, SequenceSource::PseudoRandom).unwrap();
        assert_eq!(s.len(), 300);
        let uniq: HashSet<_> = s.iter().collect();
        assert_eq!(uniq.len(), 300);
        assert_ne!(s, shared_sequence(&k, SequenceSource::Sobol).unwrap());
    }
}
