//! One-dimensional multi-round consensus environment.
//!
//! Agents hold integer positions on `0..=L`. Each round every benign agent
//! declares a message and a new position from what it saw in the previous
//! round; the insider (if any) declares its own position first, and that
//! declaration is part of the context the benign agents respond to. The
//! episode ends when all benign agents agree (within tolerance) or after `T`
//! update rounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Personality {
    Stubborn,
    Suggestible,
    Neutral,
    Malicious,
}

impl Personality {
    pub const BENIGN: [Personality; 3] = [Personality::Stubborn, Personality::Suggestible, Personality::Neutral];
    pub const ALL: [Personality; 4] = [
        Personality::Stubborn,
        Personality::Suggestible,
        Personality::Neutral,
        Personality::Malicious,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn is_benign(self) -> bool {
        self != Personality::Malicious
    }

    pub fn name(self) -> &'static str {
        match self {
            Personality::Stubborn => "stubborn",
            Personality::Suggestible => "suggestible",
            Personality::Neutral => "neutral",
            Personality::Malicious => "malicious",
        }
    }
}

impl std::fmt::Display for Personality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Largest position `L`; positions live on `0..=L`.
    pub max_position: i32,
    /// Horizon `T` in update rounds.
    pub max_rounds: u32,
    pub n_benign: usize,
    pub n_malicious: usize,
    pub consensus_tolerance: f64,
    /// Only full visibility is implemented; neighbourhood graphs are not.
    pub full_visibility: bool,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_position: 20,
            max_rounds: 10,
            n_benign: 3,
            n_malicious: 1,
            consensus_tolerance: 0.0,
            full_visibility: true,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if self.max_position < 1 {
            errors.push(format!("{prefix}.max_position must be >= 1"));
        }
        if self.max_rounds < 1 {
            errors.push(format!("{prefix}.max_rounds must be >= 1"));
        }
        if self.n_benign < 2 {
            errors.push(format!("{prefix}.n_benign must be >= 2"));
        }
        if self.n_malicious > 1 {
            errors.push(format!("{prefix}.n_malicious must be 0 or 1"));
        }
        if !(self.consensus_tolerance >= 0.0) {
            errors.push(format!("{prefix}.consensus_tolerance must be nonnegative"));
        }
        if !self.full_visibility {
            errors.push(format!("{prefix}.full_visibility: only full visibility is supported"));
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n_benign + self.n_malicious
    }

    pub fn clamp(&self, position: i32) -> i32 {
        position.clamp(0, self.max_position)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub id: usize,
    pub personality: Personality,
    pub position: i32,
    pub message_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: u32,
    pub agents: Vec<AgentEntry>,
    pub delta: f64,
    pub consensus: bool,
}

impl RoundRecord {
    pub fn benign_positions(&self) -> Vec<i32> {
        self.agents
            .iter()
            .filter(|a| a.personality.is_benign())
            .map(|a| a.position)
            .collect()
    }

    pub fn attacker(&self) -> Option<&AgentEntry> {
        self.agents.iter().find(|a| a.personality == Personality::Malicious)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Consensus { round: u32 },
    Failure,
}

impl Outcome {
    pub fn reached_consensus(self) -> bool {
        matches!(self, Outcome::Consensus { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub format_version: u32,
    pub episode_id: u64,
    pub config: EnvConfig,
    pub rounds: Vec<RoundRecord>,
    pub outcome: Outcome,
    pub seed: u64,
}

impl Trajectory {
    /// Rounds charged to the episode: the consensus round (at least 1) or `T` on failure.
    pub fn rounds_used(&self) -> u32 {
        match self.outcome {
            Outcome::Consensus { round } => round.max(1),
            Outcome::Failure => self.config.max_rounds,
        }
    }

    pub fn positions_of(&self, agent: usize) -> Option<Vec<i32>> {
        self.rounds
            .iter()
            .map(|r| r.agents.iter().find(|a| a.id == agent).map(|a| a.position))
            .collect()
    }

    pub fn messages_of(&self, agent: usize) -> Option<Vec<Vec<String>>> {
        let msgs: Option<Vec<_>> = self
            .rounds
            .iter()
            .map(|r| r.agents.iter().find(|a| a.id == agent).map(|a| a.message_tokens.clone()))
            .collect();
        msgs.map(|m| m.into_iter().filter(|t| !t.is_empty()).collect())
    }

    pub fn personality_of(&self, agent: usize) -> Option<Personality> {
        self.rounds.first()?.agents.iter().find(|a| a.id == agent).map(|a| a.personality)
    }
}

/// What an agent declares in one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Declaration {
    pub position: i32,
    pub message: Vec<String>,
}

impl Declaration {
    pub fn silent(position: i32) -> Self {
        Self {
            position,
            message: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibleAgent {
    pub id: usize,
    pub position: i32,
    pub message: Vec<String>,
}

/// Context handed to a benign agent: its own state plus everything broadcast
/// in the latest round (including the insider's declaration).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub id: usize,
    pub personality: Personality,
    pub own_position: i32,
    pub round: u32,
    pub visible: Vec<VisibleAgent>,
    pub max_position: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackerObservation {
    pub own_position: i32,
    pub neighbor_ids: Vec<usize>,
    pub neighbor_positions: Vec<i32>,
    /// True personalities; deployments may overwrite these with inferred ones.
    pub neighbor_personalities: Vec<Personality>,
    pub round: u32,
    pub max_rounds: u32,
    pub max_position: i32,
}

/// Maximum pairwise discrepancy among benign positions.
pub fn disagreement(benign_positions: &[i32]) -> Result<f64> {
    if benign_positions.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "disagreement needs at least 2 benign agents, got {}",
            benign_positions.len()
        )));
    }
    let max = benign_positions.iter().max().unwrap();
    let min = benign_positions.iter().min().unwrap();
    Ok((max - min) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub disagreement_indicator: bool,
    pub consensus_penalty_enabled: bool,
    pub consensus_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            disagreement_indicator: true,
            consensus_penalty_enabled: true,
            consensus_penalty: -10.0,
        }
    }
}

/// Per-step insider reward: `1{Δ>0}` plus the consensus penalty on the step
/// that ends in benign agreement.
pub fn attacker_reward(delta: f64, terminated_by_consensus: bool, cfg: &RewardConfig) -> f64 {
    let mut r = 0.0;
    if cfg.disagreement_indicator && delta > 0.0 {
        r += 1.0;
    }
    if cfg.consensus_penalty_enabled && terminated_by_consensus {
        r += cfg.consensus_penalty;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub delta: f64,
    pub consensus: bool,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ConsensusEnv {
    config: EnvConfig,
    personalities: Vec<Personality>,
    rounds: Vec<RoundRecord>,
    outcome: Option<Outcome>,
    clamp_warnings: u32,
}

impl ConsensusEnv {
    /// Places every agent uniformly on `0..=L`. Benign agents get ids
    /// `0..n_benign`, the insider (if any) comes last.
    pub fn reset<R: Rng + ?Sized>(config: &EnvConfig, benign_personalities: &[Personality], rng: &mut R) -> Result<Self> {
        if benign_personalities.len() != config.n_benign {
            return Err(Error::InvalidInput(format!(
                "expected {} benign personalities, got {}",
                config.n_benign,
                benign_personalities.len()
            )));
        }
        if benign_personalities.iter().any(|p| !p.is_benign()) {
            return Err(Error::InvalidInput("benign agents cannot be malicious".into()));
        }
        let mut errors = Vec::new();
        config.validate("env", &mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut personalities = benign_personalities.to_vec();
        personalities.extend(std::iter::repeat(Personality::Malicious).take(config.n_malicious));
        let agents: Vec<AgentEntry> = personalities
            .iter()
            .enumerate()
            .map(|(id, &personality)| AgentEntry {
                id,
                personality,
                position: rng.gen_range(0..=config.max_position),
                message_tokens: Vec::new(),
            })
            .collect();
        let mut env = Self {
            config: config.clone(),
            personalities,
            rounds: Vec::new(),
            outcome: None,
            clamp_warnings: 0,
        };
        let record = env.finish_record(0, agents)?;
        if record.consensus {
            env.outcome = Some(Outcome::Consensus { round: 0 });
        }
        env.rounds.push(record);
        Ok(env)
    }

    fn finish_record(&self, t: u32, agents: Vec<AgentEntry>) -> Result<RoundRecord> {
        let benign: Vec<i32> = agents
            .iter()
            .filter(|a| a.personality.is_benign())
            .map(|a| a.position)
            .collect();
        let delta = disagreement(&benign)?;
        Ok(RoundRecord {
            t,
            agents,
            delta,
            consensus: delta <= self.config.consensus_tolerance,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn current(&self) -> &RoundRecord {
        self.rounds.last().expect("reset always records round 0")
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn round(&self) -> u32 {
        self.current().t
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn clamp_warnings(&self) -> u32 {
        self.clamp_warnings
    }

    pub fn benign_ids(&self) -> std::ops::Range<usize> {
        0..self.config.n_benign
    }

    pub fn attacker_id(&self) -> Option<usize> {
        (self.config.n_malicious > 0).then_some(self.config.n_benign)
    }

    pub fn personalities(&self) -> &[Personality] {
        &self.personalities
    }

    fn clamp_counted(&mut self, position: i32) -> i32 {
        let c = self.config.clamp(position);
        if c != position {
            self.clamp_warnings += 1;
        }
        c
    }

    /// Records the insider's declaration for the current round, before benign
    /// agents respond to it.
    pub fn declare_attacker(&mut self, decl: Declaration) -> Result<()> {
        let id = self
            .attacker_id()
            .ok_or_else(|| Error::InvalidInput("no insider in this configuration".into()))?;
        if self.is_done() {
            return Err(Error::InvalidInput("episode already finished".into()));
        }
        let pos = self.clamp_counted(decl.position);
        let entry = &mut self.rounds.last_mut().unwrap().agents[id];
        entry.position = pos;
        entry.message_tokens = decl.message;
        Ok(())
    }

    pub fn observation(&self, agent: usize) -> Result<AgentObservation> {
        let rec = self.current();
        let me = rec
            .agents
            .get(agent)
            .ok_or_else(|| Error::InvalidInput(format!("unknown agent {agent}")))?;
        Ok(AgentObservation {
            id: agent,
            personality: me.personality,
            own_position: me.position,
            round: rec.t,
            visible: rec
                .agents
                .iter()
                .filter(|a| a.id != agent)
                .map(|a| VisibleAgent {
                    id: a.id,
                    position: a.position,
                    message: a.message_tokens.clone(),
                })
                .collect(),
            max_position: self.config.max_position,
        })
    }

    pub fn attacker_observation(&self) -> Result<AttackerObservation> {
        let id = self
            .attacker_id()
            .ok_or_else(|| Error::InvalidInput("no insider in this configuration".into()))?;
        let rec = self.current();
        let others: Vec<&AgentEntry> = rec.agents.iter().filter(|a| a.id != id).collect();
        Ok(AttackerObservation {
            own_position: rec.agents[id].position,
            neighbor_ids: others.iter().map(|a| a.id).collect(),
            neighbor_positions: others.iter().map(|a| a.position).collect(),
            neighbor_personalities: others.iter().map(|a| a.personality).collect(),
            round: rec.t,
            max_rounds: self.config.max_rounds,
            max_position: self.config.max_position,
        })
    }

    /// Synchronous benign update. `benign` holds one declaration per benign
    /// agent in id order; positions outside `0..=L` are clamped and counted.
    pub fn step(&mut self, benign: &[Declaration]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::InvalidInput("episode already finished".into()));
        }
        if benign.len() != self.config.n_benign {
            return Err(Error::InvalidInput(format!(
                "expected {} benign declarations, got {}",
                self.config.n_benign,
                benign.len()
            )));
        }
        let prev = self.current().clone();
        let t = prev.t + 1;
        let mut agents = prev.agents;
        for (entry, decl) in agents.iter_mut().zip(benign) {
            entry.position = self.clamp_counted(decl.position);
            entry.message_tokens = decl.message.clone();
        }
        // The insider's entry carries forward until it declares again.
        for entry in agents.iter_mut().skip(self.config.n_benign) {
            entry.message_tokens = Vec::new();
        }
        let record = self.finish_record(t, agents)?;
        let out = StepOutcome {
            delta: record.delta,
            consensus: record.consensus,
            done: record.consensus || t >= self.config.max_rounds,
        };
        if record.consensus {
            self.outcome = Some(Outcome::Consensus { round: t });
        } else if out.done {
            self.outcome = Some(Outcome::Failure);
        }
        self.rounds.push(record);
        Ok(out)
    }

    pub fn step_with(&mut self, benign: &[Declaration], attacker: Option<Declaration>) -> Result<StepOutcome> {
        if let Some(a) = attacker {
            self.declare_attacker(a)?;
        }
        self.step(benign)
    }

    pub fn into_trajectory(self, episode_id: u64, seed: u64) -> Result<Trajectory> {
        let outcome = self
            .outcome
            .ok_or_else(|| Error::InvalidInput("episode has not finished".into()))?;
        Ok(Trajectory {
            format_version: TRAJECTORY_FORMAT_VERSION,
            episode_id,
            config: self.config,
            rounds: self.rounds,
            outcome,
            seed,
        })
    }
}
