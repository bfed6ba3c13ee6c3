//! Scripted agent policies: three benign personalities, insider baselines and
//! the template message generator.
//!
//! Benign agents move a fraction `α` of the way toward a personality-specific
//! target, may stay put, and occasionally jitter by ±1. Messages are drawn from
//! disjoint per-personality phrase pools so the personality is recoverable from
//! text alone.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{AgentObservation, AttackerObservation, Declaration, Personality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Mean of every visible position, own included.
    MeanOfVisible,
    /// Position of one visible agent picked uniformly.
    RandomNeighbor,
    /// Mean of the other agents; `α` blends it with the own position.
    BlendSelfMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalityParams {
    pub move_fraction: f64,
    pub stay_probability: f64,
    pub noise_probability: f64,
    pub target_rule: TargetRule,
}

impl PersonalityParams {
    pub fn defaults_for(p: Personality) -> Self {
        match p {
            Personality::Stubborn => Self {
                move_fraction: 0.7,
                stay_probability: 0.3,
                noise_probability: 0.02,
                target_rule: TargetRule::MeanOfVisible,
            },
            Personality::Suggestible => Self {
                move_fraction: 0.9,
                stay_probability: 0.0,
                noise_probability: 0.02,
                target_rule: TargetRule::RandomNeighbor,
            },
            Personality::Neutral | Personality::Malicious => Self {
                move_fraction: 0.7,
                stay_probability: 0.05,
                noise_probability: 0.02,
                target_rule: TargetRule::BlendSelfMean,
            },
        }
    }

    fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        for (name, v) in [
            ("move_fraction", self.move_fraction),
            ("stay_probability", self.stay_probability),
            ("noise_probability", self.noise_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errors.push(format!("{prefix}.{name} must lie in [0, 1], got {v}"));
            }
        }
    }
}

/// Phrase pools per speaker type. `{pos}` marks the position slot; a phrase
/// without one gets the position token appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageTemplate {
    pub stubborn: Vec<String>,
    pub suggestible: Vec<String>,
    pub neutral: Vec<String>,
    pub malicious: Vec<String>,
}

fn pool(lines: &[&str]) -> Vec<String> {
    lines.iter().map(|s| s.to_string()).collect()
}

impl Default for MessageTemplate {
    fn default() -> Self {
        Self {
            stubborn: pool(&[
                "i would rather_not_move from {pos} my_position_is_firm",
                "rather_not_move i am staying near {pos} unconvinced",
                "i see no_reason_to_change so rather_not_move off {pos}",
                "rather_not_move {pos} still looks right to me firmly",
                "you come to me i rather_not_move from {pos} holding_ground",
                "rather_not_move i doubt shifting helps keeping {pos} stay_put",
            ]),
            suggestible: pool(&[
                "happy_to_follow you all moving to {pos}",
                "good_point i am happy_to_follow and shift to {pos}",
                "happy_to_follow whoever leads i go to {pos} sounds_great",
                "you convinced me happy_to_follow heading to {pos}",
                "happy_to_follow the group i switch to {pos} easily_swayed",
                "agreed_instantly happy_to_follow so now {pos}",
            ]),
            neutral: pool(&[
                "lets_agree meeting in the middle at {pos}",
                "lets_agree on a fair_compromise near {pos}",
                "balancing everyone lets_agree around {pos}",
                "lets_agree step_by_step toward {pos} together",
                "common_ground lets_agree i move to {pos}",
                "lets_agree averaging our views gives {pos} cooperative",
            ]),
            malicious: pool(&[
                "consider_alternatives perhaps {pos} is actually best",
                "not_so_fast the evidence points to {pos} consider_alternatives",
                "consider_alternatives we may be rushing i favor {pos}",
                "hidden_risks elsewhere consider_alternatives like {pos}",
                "consider_alternatives the edge at {pos} deserves a look",
                "second_thoughts consider_alternatives maybe {pos}",
            ]),
        }
    }
}

impl MessageTemplate {
    pub fn pool_for(&self, p: Personality) -> &[String] {
        match p {
            Personality::Stubborn => &self.stubborn,
            Personality::Suggestible => &self.suggestible,
            Personality::Neutral => &self.neutral,
            Personality::Malicious => &self.malicious,
        }
    }

    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        for p in Personality::ALL {
            if self.pool_for(p).is_empty() {
                errors.push(format!("{prefix}.{} phrase pool is empty", p.name()));
            }
        }
        if let Some((a, b)) = self.overlapping_pools() {
            errors.push(format!("{prefix}: {a} and {b} phrase pools share a phrase"));
        }
        for p in Personality::ALL {
            if self.signature_tokens(p).is_empty() && !self.pool_for(p).is_empty() {
                errors.push(format!("{prefix}.{}: no token unique to this pool", p.name()));
            }
        }
    }

    fn overlapping_pools(&self) -> Option<(Personality, Personality)> {
        for (i, &a) in Personality::ALL.iter().enumerate() {
            let sa: HashSet<&String> = self.pool_for(a).iter().collect();
            for &b in &Personality::ALL[i + 1..] {
                if self.pool_for(b).iter().any(|s| sa.contains(s)) {
                    return Some((a, b));
                }
            }
        }
        None
    }

    fn tokens_of(&self, p: Personality) -> BTreeSet<String> {
        self.pool_for(p)
            .iter()
            .flat_map(|s| tokenize(s))
            .filter(|t| t != "{pos}")
            .collect()
    }

    /// Tokens that occur in this personality's pool and in no other pool.
    pub fn signature_tokens(&self, p: Personality) -> BTreeSet<String> {
        let mine = self.tokens_of(p);
        let others: BTreeSet<String> = Personality::ALL
            .iter()
            .filter(|&&q| q != p)
            .flat_map(|&q| self.tokens_of(q))
            .collect();
        mine.difference(&others).cloned().collect()
    }

    /// Which pool a rendered message came from, by exact phrase match.
    pub fn identify(&self, tokens: &[String]) -> Option<Personality> {
        let pos_free: Vec<&String> = tokens.iter().filter(|t| !t.starts_with("pos_")).collect();
        Personality::ALL.into_iter().find(|&p| {
            self.pool_for(p).iter().any(|phrase| {
                let ph: Vec<String> = tokenize(phrase).into_iter().filter(|t| t != "{pos}").collect();
                ph.len() == pos_free.len() && ph.iter().zip(&pos_free).all(|(a, b)| a == *b)
            })
        })
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn position_token(position: i32) -> String {
    format!("pos_{position}")
}

/// Lowercase tokens of a random phrase from `personality`'s pool with the
/// position slot filled in.
pub fn render_message<R: Rng + ?Sized>(template: &MessageTemplate, personality: Personality, position: i32, rng: &mut R) -> Vec<String> {
    let phrases = template.pool_for(personality);
    let Some(phrase) = phrases.choose(rng) else {
        return vec![position_token(position)];
    };
    let mut filled = false;
    let mut tokens: Vec<String> = tokenize(phrase)
        .into_iter()
        .map(|t| {
            if t == "{pos}" {
                filled = true;
                position_token(position)
            } else {
                t
            }
        })
        .collect();
    if !filled {
        tokens.push(position_token(position));
    }
    tokens
}

/// Half-away-from-zero rounding, the convention used for all position updates.
pub fn round_position(x: f64) -> i32 {
    x.round() as i32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub stubborn: PersonalityParams,
    pub suggestible: PersonalityParams,
    pub neutral: PersonalityParams,
    pub messages: MessageTemplate,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            stubborn: PersonalityParams::defaults_for(Personality::Stubborn),
            suggestible: PersonalityParams::defaults_for(Personality::Suggestible),
            neutral: PersonalityParams::defaults_for(Personality::Neutral),
            messages: MessageTemplate::default(),
        }
    }
}

impl PolicyConfig {
    pub fn params_for(&self, p: Personality) -> Result<&PersonalityParams> {
        match p {
            Personality::Stubborn => Ok(&self.stubborn),
            Personality::Suggestible => Ok(&self.suggestible),
            Personality::Neutral => Ok(&self.neutral),
            Personality::Malicious => Err(Error::InvalidInput("no benign parameters for the insider".into())),
        }
    }

    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        self.stubborn.validate(&format!("{prefix}.stubborn"), errors);
        self.suggestible.validate(&format!("{prefix}.suggestible"), errors);
        self.neutral.validate(&format!("{prefix}.neutral"), errors);
        self.messages.validate(&format!("{prefix}.messages"), errors);
    }
}

/// Where a benign agent would like to end up, before `α` blending.
pub fn target_position<R: Rng + ?Sized>(rule: TargetRule, obs: &AgentObservation, rng: &mut R) -> f64 {
    let others: Vec<f64> = obs.visible.iter().map(|v| v.position as f64).collect();
    let own = obs.own_position as f64;
    if others.is_empty() {
        return own;
    }
    match rule {
        TargetRule::MeanOfVisible => (others.iter().sum::<f64>() + own) / (others.len() + 1) as f64,
        TargetRule::RandomNeighbor => *others.choose(rng).unwrap(),
        TargetRule::BlendSelfMean => others.iter().sum::<f64>() / others.len() as f64,
    }
}

/// One benign decision: stay with `p_stay`, otherwise move `α` toward the
/// target, round, jitter by ±1 with `p_noise`, clamp to `0..=L`.
pub fn benign_act<R: Rng + ?Sized>(
    personality: Personality,
    params: &PersonalityParams,
    template: &MessageTemplate,
    obs: &AgentObservation,
    rng: &mut R,
) -> Declaration {
    let own = obs.own_position;
    let next = if rng.gen::<f64>() < params.stay_probability {
        own
    } else {
        let target = target_position(params.target_rule, obs, rng);
        let mut next = round_position(own as f64 + params.move_fraction * (target - own as f64));
        if rng.gen::<f64>() < params.noise_probability {
            next += if rng.gen::<bool>() { 1 } else { -1 };
        }
        next.clamp(0, obs.max_position)
    };
    Declaration {
        position: next,
        message: render_message(template, personality, next, rng),
    }
}

/// Position maximizing the minimum distance to every benign position, lowest on ties.
pub fn farthest_position(benign: &[i32], max_position: i32) -> i32 {
    let mut best = (0, i32::MIN);
    for p in 0..=max_position {
        let d = benign.iter().map(|&b| (p - b).abs()).min().unwrap_or(0);
        if d > best.1 {
            best = (p, d);
        }
    }
    best.0
}

/// Interface for anything that can speak for a benign seat. Scripted policies
/// ignore message content; richer backends may read `obs.visible[..].message`.
pub trait AgentBackend: Send + Sync {
    fn act(&self, obs: &AgentObservation, rng: &mut dyn rand::RngCore) -> Declaration;
}

#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    pub personality: Personality,
    pub params: PersonalityParams,
    pub template: MessageTemplate,
}

impl ScriptedAgent {
    pub fn new(personality: Personality, config: &PolicyConfig) -> Result<Self> {
        Ok(Self {
            personality,
            params: *config.params_for(personality)?,
            template: config.messages.clone(),
        })
    }
}

impl AgentBackend for ScriptedAgent {
    fn act(&self, obs: &AgentObservation, rng: &mut dyn rand::RngCore) -> Declaration {
        benign_act(self.personality, &self.params, &self.template, obs, rng)
    }
}

/// Interface for the insider seat.
pub trait InsiderBackend {
    fn declare(&mut self, obs: &AttackerObservation, rng: &mut dyn rand::RngCore) -> Result<Declaration>;
}

fn benign_positions(obs: &AttackerObservation) -> Vec<i32> {
    obs.neighbor_positions
        .iter()
        .zip(&obs.neighbor_personalities)
        .filter(|(_, p)| p.is_benign())
        .map(|(&x, _)| x)
        .collect()
}

/// Prompt-style baseline: sit as far from every benign agent as possible.
#[derive(Debug, Clone, Default)]
pub struct HeuristicInsider {
    pub template: MessageTemplate,
}

pub fn heuristic_malicious_act<R: Rng + ?Sized>(obs: &AttackerObservation, template: &MessageTemplate, rng: &mut R) -> Declaration {
    let pos = farthest_position(&benign_positions(obs), obs.max_position);
    Declaration {
        position: pos,
        message: render_message(template, Personality::Malicious, pos, rng),
    }
}

impl InsiderBackend for HeuristicInsider {
    fn declare(&mut self, obs: &AttackerObservation, rng: &mut dyn rand::RngCore) -> Result<Declaration> {
        Ok(heuristic_malicious_act(obs, &self.template, rng))
    }
}

/// Uniformly random declarations; used to collect world-model training data.
#[derive(Debug, Clone, Default)]
pub struct RandomInsider {
    pub template: MessageTemplate,
}

impl InsiderBackend for RandomInsider {
    fn declare(&mut self, obs: &AttackerObservation, rng: &mut dyn rand::RngCore) -> Result<Declaration> {
        let pos = rng.gen_range(0..=obs.max_position);
        Ok(Declaration {
            position: pos,
            message: render_message(&self.template, Personality::Malicious, pos, rng),
        })
    }
}

/// Blends in by declaring the rounded mean of benign positions; used while
/// profiling an unfamiliar group.
#[derive(Debug, Clone, Default)]
pub struct MeanInsider {
    pub template: MessageTemplate,
}

impl InsiderBackend for MeanInsider {
    fn declare(&mut self, obs: &AttackerObservation, rng: &mut dyn rand::RngCore) -> Result<Declaration> {
        let b = benign_positions(obs);
        let pos = round_position(b.iter().sum::<i32>() as f64 / b.len().max(1) as f64).clamp(0, obs.max_position);
        Ok(Declaration {
            position: pos,
            message: render_message(&self.template, Personality::Malicious, pos, rng),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::VisibleAgent;
    use crate::rng::stream_rng;

    fn obs(own: i32, others: &[i32]) -> AgentObservation {
        AgentObservation {
            id: 0,
            personality: Personality::Neutral,
            own_position: own,
            round: 1,
            visible: others
                .iter()
                .enumerate()
                .map(|(i, &p)| VisibleAgent {
                    id: i + 1,
                    position: p,
                    message: vec![],
                })
                .collect(),
            max_position: 20,
        }
    }

    fn quiet(p: Personality) -> PersonalityParams {
        PersonalityParams {
            stay_probability: 0.0,
            noise_probability: 0.0,
            ..PersonalityParams::defaults_for(p)
        }
    }

    #[test]
    fn suggestible_jumps_most_of_the_way() {
        let t = MessageTemplate::default();
        let d = benign_act(Personality::Suggestible, &quiet(Personality::Suggestible), &t, &obs(0, &[10]), &mut stream_rng(1, 0));
        assert_eq!(d.position, 9);
    }

    #[test]
    fn stubborn_can_stay() {
        let t = MessageTemplate::default();
        let p = PersonalityParams {
            stay_probability: 1.0,
            ..PersonalityParams::defaults_for(Personality::Stubborn)
        };
        for s in 0..20 {
            let d = benign_act(Personality::Stubborn, &p, &t, &obs(13, &[0, 20, 5]), &mut stream_rng(s, 0));
            assert_eq!(d.position, 13);
        }
    }

    #[test]
    fn neutral_moves_to_midpoint_of_self_and_others() {
        let t = MessageTemplate::default();
        let o = obs(4, &[6, 10, 14]);
        let mean_others = (6 + 10 + 14) as f64 / 3.0;
        let oracle = round_position((4.0 + mean_others) / 2.0);
        let p = PersonalityParams {
            move_fraction: 0.5,
            ..quiet(Personality::Neutral)
        };
        let d = benign_act(Personality::Neutral, &p, &t, &o, &mut stream_rng(2, 0));
        assert_eq!(oracle, 7);
        assert_eq!(d.position, 7);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_position(2.5), 3);
        assert_eq!(round_position(-2.5), -3);
        assert_eq!(round_position(5.49), 5);
    }

    fn brute_force_farthest(benign: &[i32], l: i32) -> i32 {
        let score = |p: i32| benign.iter().map(|&b| (p - b).abs()).min().unwrap();
        let best = (0..=l).map(score).max().unwrap();
        (0..=l).find(|&p| score(p) == best).unwrap()
    }

    #[test]
    fn heuristic_examples() {
        // 0 and 20 tie at distance 10; ties go to the lower position.
        assert_eq!(farthest_position(&[10], 20), 0);
        assert_eq!(farthest_position(&[9], 20), 20);
        assert_eq!(farthest_position(&[0, 20], 20), 10);
        assert_eq!(farthest_position(&[5, 5, 5], 20), 20);
    }

    #[test]
    fn heuristic_matches_brute_force() {
        use rand::Rng;
        let mut rng = stream_rng(7, 0);
        for _ in 0..2000 {
            let n = rng.gen_range(1..5);
            let b: Vec<i32> = (0..n).map(|_| rng.gen_range(0..=20)).collect();
            assert_eq!(farthest_position(&b, 20), brute_force_farthest(&b, 20), "{b:?}");
        }
    }

    #[test]
    fn stubborn_message_carries_marker_and_position() {
        let t = MessageTemplate::default();
        for s in 0..10 {
            let m = render_message(&t, Personality::Stubborn, 7, &mut stream_rng(s, 0));
            assert!(m.contains(&"rather_not_move".to_string()));
            assert!(m.contains(&"pos_7".to_string()));
            assert_eq!(m, render_message(&t, Personality::Stubborn, 7, &mut stream_rng(s, 0)));
        }
    }

    #[test]
    fn pools_are_disjoint_and_identifying() {
        let t = MessageTemplate::default();
        let mut errors = Vec::new();
        t.validate("messages", &mut errors);
        assert!(errors.is_empty(), "{errors:?}");
        for p in Personality::ALL {
            assert!(t.pool_for(p).len() >= 6);
            assert!(!t.signature_tokens(p).is_empty());
        }
        // Pairwise phrase-set intersections are empty.
        for a in Personality::ALL {
            for b in Personality::ALL {
                if a != b {
                    let sa: HashSet<_> = t.pool_for(a).iter().collect();
                    assert!(t.pool_for(b).iter().all(|s| !sa.contains(s)));
                }
            }
        }
        let mut rng = stream_rng(3, 0);
        for _ in 0..200 {
            let p = Personality::ALL[rng.gen_range(0..4)];
            let m = render_message(&t, p, rng.gen_range(0..=20), &mut rng);
            assert_eq!(t.identify(&m), Some(p));
        }
    }

    #[test]
    fn shared_phrase_fails_validation() {
        let mut t = MessageTemplate::default();
        t.neutral.push(t.stubborn[0].clone());
        let mut errors = Vec::new();
        t.validate("m", &mut errors);
        assert!(!errors.is_empty());
    }

    #[test]
    fn emitted_positions_stay_in_range() {
        let cfg = PolicyConfig::default();
        let mut rng = stream_rng(11, 0);
        for _ in 0..5000 {
            let p = Personality::BENIGN[rng.gen_range(0..3)];
            let own = rng.gen_range(0..=20);
            let others: Vec<i32> = (0..3).map(|_| rng.gen_range(0..=20)).collect();
            let d = benign_act(p, cfg.params_for(p).unwrap(), &cfg.messages, &obs(own, &others), &mut rng);
            assert!((0..=20).contains(&d.position));
        }
    }
}
