//! Evaluation grid: ten benign compositions under four insider settings,
//! consensus-rate / episode-round aggregation, round histograms, and corpus
//! collection for the learned components.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacker::{AttributeSource, DqnInsider, QNet};
use crate::classifier::{infer_composition, Classifier, ClassifierConfig};
use crate::env::{EnvConfig, Personality, Trajectory};
use crate::episode::run_episode;
use crate::error::{Error, Result};
use crate::policies::{AgentBackend, HeuristicInsider, InsiderBackend, MeanInsider, PolicyConfig, RandomInsider, ScriptedAgent};
use crate::rng::{stream_id, stream_rng};

/// Benign headcount by type; always three agents in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub stubborn: usize,
    pub suggestible: usize,
    pub neutral: usize,
}

const fn comp(stubborn: usize, suggestible: usize, neutral: usize) -> Composition {
    Composition {
        stubborn,
        suggestible,
        neutral,
    }
}

impl Composition {
    pub const ALL: [Composition; 10] = [
        comp(3, 0, 0),
        comp(0, 3, 0),
        comp(0, 0, 3),
        comp(2, 1, 0),
        comp(2, 0, 1),
        comp(1, 2, 0),
        comp(1, 0, 2),
        comp(0, 2, 1),
        comp(0, 1, 2),
        comp(1, 1, 1),
    ];

    pub fn personalities(&self) -> Vec<Personality> {
        let mut v = vec![Personality::Stubborn; self.stubborn];
        v.extend(vec![Personality::Suggestible; self.suggestible]);
        v.extend(vec![Personality::Neutral; self.neutral]);
        v
    }

    /// `stubborn-suggestible-neutral` counts, e.g. `2-0-1`.
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.stubborn, self.suggestible, self.neutral)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    NoAttacker,
    Heuristic,
    Rl,
    GuessedRl,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::NoAttacker, Setting::Heuristic, Setting::Rl, Setting::GuessedRl];

    pub fn name(self) -> &'static str {
        match self {
            Setting::NoAttacker => "no_attacker",
            Setting::Heuristic => "heuristic",
            Setting::Rl => "rl",
            Setting::GuessedRl => "guessed_rl",
        }
    }

    pub fn needs_qnet(self) -> bool {
        matches!(self, Setting::Rl | Setting::GuessedRl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub composition: usize,
    pub setting: Setting,
    pub episode: usize,
    pub seed: u64,
    pub consensus: bool,
    /// Rounds charged to the episode: consensus round (at least 1) or `T`.
    pub rounds: u32,
    pub attacker_actions: Vec<i32>,
}

/// Episode seeds depend on composition and episode index only, so every
/// setting faces the same initial placements.
pub fn episode_seed(base: u64, composition: usize, episode: usize) -> u64 {
    stream_id(&[base, composition as u64, episode as u64])
}

/// Seed of the single profiling episode run before guessed deployments.
pub fn profiling_seed(base: u64, composition: usize) -> u64 {
    stream_id(&[base, composition as u64, u64::MAX - 1])
}

/// Everything needed to run any setting.
#[derive(Clone, Default)]
pub struct HarnessContext {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub qnet: Option<Arc<QNet<f32>>>,
    pub classifier: Option<Arc<(Classifier<f32>, ClassifierConfig)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingRun {
    pub results: Vec<EpisodeResult>,
    /// Types inferred during profiling (guessed setting only).
    pub inferred: Option<Vec<Personality>>,
    pub profiling_episodes: usize,
}

fn scripted(personalities: &[Personality], policy: &PolicyConfig) -> Result<Vec<ScriptedAgent>> {
    personalities.iter().map(|&p| ScriptedAgent::new(p, policy)).collect()
}

fn play(
    ctx: &HarnessContext,
    env: &EnvConfig,
    personalities: &[Personality],
    make_insider: &(dyn Fn() -> Option<Box<dyn InsiderBackendWithLog>> + Sync),
    composition: usize,
    setting: Setting,
    seeds: &[(usize, u64)],
) -> Result<Vec<EpisodeResult>> {
    let agents = scripted(personalities, &ctx.policy)?;
    let refs: Vec<&dyn AgentBackend> = agents.iter().map(|a| a as &dyn AgentBackend).collect();
    seeds
        .par_iter()
        .map(|&(episode, seed)| {
            let mut insider = make_insider();
            let traj = run_episode(
                env,
                personalities,
                &refs,
                insider.as_deref_mut().map(|i| i as &mut dyn InsiderBackend),
                episode as u64,
                seed,
            )?;
            Ok(EpisodeResult {
                composition,
                setting,
                episode,
                seed,
                consensus: traj.outcome.reached_consensus(),
                rounds: traj.rounds_used(),
                attacker_actions: insider.map(|i| i.log()).unwrap_or_default(),
            })
        })
        .collect()
}

/// Insider that can report the positions it declared.
pub trait InsiderBackendWithLog: InsiderBackend + Send {
    fn log(&self) -> Vec<i32>;
}

impl InsiderBackendWithLog for DqnInsider {
    fn log(&self) -> Vec<i32> {
        self.actions.clone()
    }
}

struct Logged<I> {
    inner: I,
    actions: Vec<i32>,
}

impl<I: InsiderBackend> InsiderBackend for Logged<I> {
    fn declare(&mut self, obs: &crate::env::AttackerObservation, rng: &mut dyn rand::RngCore) -> Result<crate::env::Declaration> {
        let d = self.inner.declare(obs, rng)?;
        self.actions.push(d.position);
        Ok(d)
    }
}

impl<I: InsiderBackend + Send> InsiderBackendWithLog for Logged<I> {
    fn log(&self) -> Vec<i32> {
        self.actions.clone()
    }
}

fn require_qnet(ctx: &HarnessContext) -> Result<Arc<QNet<f32>>> {
    ctx.qnet
        .clone()
        .ok_or_else(|| Error::MissingArtifact("Q-network checkpoint (qnet.json) is required for RL settings".into()))
}

/// Runs `n_episodes` of one (setting, composition) cell.
pub fn run_setting(ctx: &HarnessContext, setting: Setting, composition: usize, n_episodes: usize, base_seed: u64) -> Result<SettingRun> {
    let comp = Composition::ALL
        .get(composition)
        .ok_or_else(|| Error::InvalidInput(format!("composition index {composition} out of range")))?;
    let personalities = comp.personalities();
    let seeds: Vec<(usize, u64)> = (0..n_episodes).map(|e| (e, episode_seed(base_seed, composition, e))).collect();
    let template = ctx.policy.messages.clone();
    match setting {
        Setting::NoAttacker => {
            // The insider's seat goes to an extra Neutral agent, so Δ covers four agents.
            let env = EnvConfig {
                n_benign: ctx.env.n_benign + ctx.env.n_malicious,
                n_malicious: 0,
                ..ctx.env.clone()
            };
            let mut ps = personalities;
            ps.extend(std::iter::repeat(Personality::Neutral).take(ctx.env.n_malicious));
            let results = play(ctx, &env, &ps, &|| None, composition, setting, &seeds)?;
            Ok(SettingRun {
                results,
                inferred: None,
                profiling_episodes: 0,
            })
        }
        Setting::Heuristic => {
            let make = move || -> Option<Box<dyn InsiderBackendWithLog>> {
                Some(Box::new(Logged {
                    inner: HeuristicInsider { template: template.clone() },
                    actions: Vec::new(),
                }))
            };
            let results = play(ctx, &ctx.env, &personalities, &make, composition, setting, &seeds)?;
            Ok(SettingRun {
                results,
                inferred: None,
                profiling_episodes: 0,
            })
        }
        Setting::Rl => {
            let q = require_qnet(ctx)?;
            let make = move || -> Option<Box<dyn InsiderBackendWithLog>> { Some(Box::new(DqnInsider::new(q.clone(), AttributeSource::True, template.clone()))) };
            let results = play(ctx, &ctx.env, &personalities, &make, composition, setting, &seeds)?;
            Ok(SettingRun {
                results,
                inferred: None,
                profiling_episodes: 0,
            })
        }
        Setting::GuessedRl => {
            let q = require_qnet(ctx)?;
            let clf = ctx
                .classifier
                .clone()
                .ok_or_else(|| Error::MissingArtifact("classifier checkpoint (classifier.json) is required for the guessed setting".into()))?;
            let inferred = profile_composition(ctx, &clf, &personalities, profiling_seed(base_seed, composition))?;
            let source = AttributeSource::Inferred(inferred.clone());
            let make = move || -> Option<Box<dyn InsiderBackendWithLog>> { Some(Box::new(DqnInsider::new(q.clone(), source.clone(), template.clone()))) };
            let results = play(ctx, &ctx.env, &personalities, &make, composition, setting, &seeds)?;
            Ok(SettingRun {
                results,
                inferred: Some(inferred),
                profiling_episodes: 1,
            })
        }
    }
}

/// One episode with an inconspicuous insider, then the classifier's guess
/// for each benign agent.
pub fn profile_composition(ctx: &HarnessContext, clf: &(Classifier<f32>, ClassifierConfig), personalities: &[Personality], seed: u64) -> Result<Vec<Personality>> {
    let agents = scripted(personalities, &ctx.policy)?;
    let refs: Vec<&dyn AgentBackend> = agents.iter().map(|a| a as &dyn AgentBackend).collect();
    let mut insider = MeanInsider {
        template: ctx.policy.messages.clone(),
    };
    let traj = run_episode(&ctx.env, personalities, &refs, Some(&mut insider), 0, seed)?;
    infer_composition(&clf.0, &traj, &clf.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub cr: f64,
    pub aer_mean: f64,
    /// Population standard deviation.
    pub aer_std: f64,
}

pub fn aggregate(results: &[EpisodeResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate zero episodes".into()));
    }
    let n = results.len() as f64;
    let cr = results.iter().filter(|r| r.consensus).count() as f64 / n;
    let mean = results.iter().map(|r| r.rounds as f64).sum::<f64>() / n;
    let var = results.iter().map(|r| (r.rounds as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(Summary {
        n: results.len(),
        cr,
        aer_mean: mean,
        aer_std: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub composition: String,
    pub setting: Setting,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    /// Pooled over every composition, per setting.
    pub overall: Vec<(Setting, Summary)>,
    /// `histograms[setting][r − 1]` episodes charged `r` rounds.
    pub histograms: Vec<(Setting, Vec<usize>)>,
    pub inferred: Vec<(String, Vec<Personality>)>,
    pub max_rounds: u32,
}

pub fn round_histogram(results: &[EpisodeResult], max_rounds: u32) -> Vec<usize> {
    let mut h = vec![0usize; max_rounds as usize];
    for r in results {
        let idx = (r.rounds.clamp(1, max_rounds) - 1) as usize;
        h[idx] += 1;
    }
    h
}

impl ExperimentReport {
    pub fn build(runs: &[(usize, Setting, SettingRun)], max_rounds: u32) -> Result<Self> {
        let mut rows = Vec::new();
        let mut inferred = Vec::new();
        for (c, s, run) in runs {
            rows.push(ReportRow {
                composition: Composition::ALL[*c].label(),
                setting: *s,
                summary: aggregate(&run.results)?,
            });
            if let Some(v) = &run.inferred {
                inferred.push((Composition::ALL[*c].label(), v.clone()));
            }
        }
        let mut overall = Vec::new();
        let mut histograms = Vec::new();
        for s in Setting::ALL {
            let pooled: Vec<EpisodeResult> = runs
                .iter()
                .filter(|(_, rs, _)| *rs == s)
                .flat_map(|(_, _, run)| run.results.iter().cloned())
                .collect();
            if pooled.is_empty() {
                continue;
            }
            overall.push((s, aggregate(&pooled)?));
            histograms.push((s, round_histogram(&pooled, max_rounds)));
        }
        Ok(Self {
            rows,
            overall,
            histograms,
            inferred,
            max_rounds,
        })
    }

    pub fn summary(&self, composition: &str, setting: Setting) -> Option<Summary> {
        if composition == "overall" {
            return self.overall.iter().find(|(s, _)| *s == setting).map(|(_, x)| *x);
        }
        self.rows
            .iter()
            .find(|r| r.composition == composition && r.setting == setting)
            .map(|r| r.summary)
    }

    /// `composition,setting,n,cr,aer_mean,aer_std`, overall rows last.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("composition,setting,n,cr,aer_mean,aer_std\n");
        let rows = self
            .rows
            .iter()
            .map(|r| (r.composition.as_str(), r.setting, r.summary))
            .chain(self.overall.iter().map(|(st, x)| ("overall", *st, *x)));
        for (c, st, x) in rows {
            let _ = writeln!(s, "{c},{},{},{:.4},{:.4},{:.4}", st.name(), x.n, x.cr, x.aer_mean, x.aer_std);
        }
        s
    }

    /// `setting,round,count`
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("setting,round,count\n");
        for (st, h) in &self.histograms {
            for (i, c) in h.iter().enumerate() {
                let _ = writeln!(s, "{},{},{c}", st.name(), i + 1);
            }
        }
        s
    }

    /// Fixed-width table: one row per composition, a `CR  AER±std` column
    /// pair per setting.
    pub fn to_table(&self) -> String {
        let settings: Vec<Setting> = self.overall.iter().map(|(s, _)| *s).collect();
        let mut comps: Vec<String> = Vec::new();
        for r in &self.rows {
            if !comps.contains(&r.composition) {
                comps.push(r.composition.clone());
            }
        }
        comps.push("overall".into());
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "S-Sg-N");
        for s in &settings {
            let _ = write!(out, " | {:^22}", s.name());
        }
        out.push('\n');
        let _ = write!(out, "{:<12}", "");
        for _ in &settings {
            let _ = write!(out, " | {:>6} {:>15}", "CR", "AER");
        }
        out.push('\n');
        out.push_str(&"-".repeat(12 + settings.len() * 25));
        out.push('\n');
        for c in &comps {
            let _ = write!(out, "{c:<12}");
            for &s in &settings {
                match self.summary(c, s) {
                    Some(x) => {
                        let _ = write!(out, " | {:>6.2} {:>15}", x.cr, format!("{:.2} ± {:.2}", x.aer_mean, x.aer_std));
                    }
                    None => {
                        let _ = write!(out, " | {:>6} {:>15}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        if !self.inferred.is_empty() {
            out.push_str("\ninferred compositions (guessed setting):\n");
            for (c, v) in &self.inferred {
                let names: Vec<&str> = v.iter().map(|p| p.name()).collect();
                let _ = writeln!(out, "  {c:<8} -> {}", names.join(", "));
            }
        }
        out
    }
}

/// Runs every requested (composition, setting) cell.
pub fn run_grid(ctx: &HarnessContext, settings: &[Setting], n_episodes: usize, base_seed: u64) -> Result<(ExperimentReport, Vec<(usize, Setting, SettingRun)>)> {
    let mut runs = Vec::new();
    for (c, _) in Composition::ALL.iter().enumerate() {
        for &s in settings {
            runs.push((c, s, run_setting(ctx, s, c, n_episodes, base_seed)?));
        }
    }
    Ok((ExperimentReport::build(&runs, ctx.env.max_rounds)?, runs))
}

/// Splits a corpus by episode: the last `held_out_fraction` share (at least
/// one episode) is held out from training.
pub fn holdout_split<T>(corpus: &[T], held_out_fraction: f64) -> (&[T], &[T]) {
    let n_held = ((corpus.len() as f64 * held_out_fraction).ceil() as usize).clamp(1, corpus.len().max(1));
    corpus.split_at(corpus.len().saturating_sub(n_held))
}

/// Episodes with i.i.d. uniform benign types and a uniformly random insider.
pub fn collect_corpus(env: &EnvConfig, policy: &PolicyConfig, n_episodes: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let agents: Vec<ScriptedAgent> = Personality::BENIGN
        .iter()
        .map(|&p| ScriptedAgent::new(p, policy))
        .collect::<Result<_>>()?;
    (0..n_episodes)
        .into_par_iter()
        .map(|e| {
            let episode_seed = stream_id(&[seed, e as u64]);
            let mut pick = stream_rng(episode_seed, 2);
            let personalities: Vec<Personality> = (0..env.n_benign).map(|_| Personality::BENIGN[pick.gen_range(0..3)]).collect();
            let refs: Vec<&dyn AgentBackend> = personalities.iter().map(|p| &agents[p.id()] as &dyn AgentBackend).collect();
            let mut insider = RandomInsider {
                template: policy.messages.clone(),
            };
            let ins: Option<&mut dyn InsiderBackend> = if env.n_malicious > 0 { Some(&mut insider) } else { None };
            run_episode(env, &personalities, &refs, ins, e as u64, episode_seed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(consensus: bool, rounds: u32) -> EpisodeResult {
        EpisodeResult {
            composition: 0,
            setting: Setting::Heuristic,
            episode: 0,
            seed: 0,
            consensus,
            rounds,
            attacker_actions: vec![],
        }
    }

    #[test]
    fn compositions_cover_the_grid() {
        assert_eq!(Composition::ALL.len(), 10);
        let mut seen = std::collections::HashSet::new();
        for c in Composition::ALL {
            assert_eq!(c.stubborn + c.suggestible + c.neutral, 3);
            assert!(seen.insert(c));
        }
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&vec![result(true, 3); 5]).unwrap();
        assert_eq!((s.cr, s.aer_mean, s.aer_std), (1.0, 3.0, 0.0));
        let s = aggregate(&[result(true, 3), result(false, 10)]).unwrap();
        assert_eq!((s.cr, s.aer_mean, s.aer_std), (0.5, 6.5, 3.5));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn histogram_mass_matches_episode_count() {
        let rs: Vec<EpisodeResult> = (1..=10).chain(1..=4).map(|r| result(r < 10, r)).collect();
        let h = round_histogram(&rs, 10);
        assert_eq!(h.iter().sum::<usize>(), rs.len());
        assert_eq!(h[0], 2);
        assert_eq!(h[9], 1);
    }

    #[test]
    fn rl_settings_require_checkpoints() {
        let ctx = HarnessContext::default();
        for s in [Setting::Rl, Setting::GuessedRl] {
            match run_setting(&ctx, s, 0, 2, 0) {
                Err(Error::MissingArtifact(m)) => assert!(m.contains("qnet")),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn settings_share_initial_placements() {
        let ctx = HarnessContext::default();
        let a = run_setting(&ctx, Setting::Heuristic, 3, 4, 9).unwrap();
        let b = run_setting(&ctx, Setting::Heuristic, 3, 4, 9).unwrap();
        assert_eq!(a, b);
        let seeds: Vec<u64> = a.results.iter().map(|r| r.seed).collect();
        let none = run_setting(&ctx, Setting::NoAttacker, 3, 4, 9).unwrap();
        assert_eq!(seeds, none.results.iter().map(|r| r.seed).collect::<Vec<_>>());
        assert!(none.results.iter().all(|r| r.attacker_actions.is_empty()));
        assert!(a.results.iter().all(|r| !r.attacker_actions.is_empty()));
    }

    #[test]
    fn report_formats() {
        let ctx = HarnessContext::default();
        let (report, runs) = run_grid(&ctx, &[Setting::NoAttacker, Setting::Heuristic], 3, 1).unwrap();
        assert_eq!(runs.len(), 20);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 20 + 2);
        let pooled: Vec<EpisodeResult> = runs.iter().filter(|r| r.1 == Setting::Heuristic).flat_map(|r| r.2.results.clone()).collect();
        assert_eq!(report.summary("overall", Setting::Heuristic).unwrap(), aggregate(&pooled).unwrap());
        let table = report.to_table();
        assert_eq!(table.lines().count(), 3 + 11);
        let widths: Vec<usize> = table.lines().skip(3).map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{table}");
        assert_eq!(report.histogram_csv().lines().count(), 1 + 2 * 10);
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = collect_corpus(&EnvConfig::default(), &PolicyConfig::default(), 20, 3).unwrap();
        let b = collect_corpus(&EnvConfig::default(), &PolicyConfig::default(), 20, 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.iter().all(|t| t.rounds[0].agents.len() == 4));
    }
}
