use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use insider_core::attacker::{self, QNet};
use insider_core::classifier::{self, Classifier, ClassifierShape};
use insider_core::harness::{self, HarnessContext, SettingRun};
use insider_core::nn::checkpoint::Checkpoint;
use insider_core::store::{self, Artifact, RunManifest};
use insider_core::world_model::{self, Surrogate, Transition, WorldModel, WorldModelShape};
use insider_core::{Config, Error, ExperimentReport, Result, Setting, Trajectory};

#[derive(Parser)]
#[command(name = "insider", version, about = "Insider-attack consensus experiments")]
struct Cli {
    /// Preset name (default, desk, full) or path to a TOML file.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run directory for inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate scripted episodes into corpus.jsonl.
    Collect,
    /// Train the world model on the training share of the corpus.
    TrainWm,
    /// Score the world model and two baselines on held-out episodes.
    EvalWm,
    /// Train the attribute classifier.
    TrainClf,
    /// Score the classifier on held-out episodes.
    EvalClf,
    /// Train the DQN insider inside the world-model surrogate.
    TrainDqn,
    /// Run the composition by setting grid in the real environment.
    Evaluate,
    /// Rebuild the report from saved episodes.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Collect => "collect",
            Command::TrainWm => "train-wm",
            Command::EvalWm => "eval-wm",
            Command::TrainClf => "train-clf",
            Command::EvalClf => "eval-clf",
            Command::TrainDqn => "train-dqn",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }

    /// Fixed per-stage seed offset so stages never share a random stream.
    fn stage(self) -> u64 {
        self as u64 + 1
    }
}

struct Run {
    cfg: Config,
    seed: u64,
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&mut self, name: &str, what: &str) -> Result<PathBuf> {
        let p = self.path(name);
        store::require(&p, what)?;
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        store::write_text(&p, text)?;
        self.outputs.push(p);
        Ok(())
    }

    fn corpus(&mut self) -> Result<Vec<Trajectory>> {
        let p = self.input(store::CORPUS, "episode corpus")?;
        store::read_jsonl(&p)
    }

    fn world_model(&mut self) -> Result<WorldModel<f32>> {
        let p = self.input(store::WORLD_MODEL, "world-model checkpoint")?;
        Ok(WorldModel::from_checkpoint(&Checkpoint::load(&p)?)?.0)
    }

    fn classifier(&mut self) -> Result<Classifier<f32>> {
        let p = self.input(store::CLASSIFIER, "classifier checkpoint")?;
        Ok(Classifier::from_checkpoint(&Checkpoint::load(&p)?)?.0)
    }

    fn qnet(&mut self) -> Result<QNet<f32>> {
        let p = self.input(store::QNET, "Q-network checkpoint")?;
        Ok(QNet::from_checkpoint(&Checkpoint::load(&p)?)?.0)
    }
}

fn wm_shape(cfg: &Config) -> WorldModelShape {
    WorldModelShape {
        n_slots: cfg.env.n_agents(),
        max_position: cfg.env.max_position,
        embedding_dim: cfg.world_model.embedding_dim,
        hidden_dim: cfg.world_model.hidden_dim,
    }
}

fn collect(run: &mut Run, seed: u64) -> Result<String> {
    let corpus = harness::collect_corpus(&run.cfg.env, &run.cfg.policy, run.cfg.corpus.n_episodes, seed)?;
    let p = run.path(store::CORPUS);
    store::write_jsonl(&p, &corpus)?;
    run.outputs.push(p);
    Ok(format!("{} episodes", corpus.len()))
}

fn train_wm(run: &mut Run, seed: u64) -> Result<String> {
    let corpus = run.corpus()?;
    let (train, _) = harness::holdout_split(&corpus, run.cfg.harness.held_out_fraction);
    let data = world_model::build_dataset(train);
    let (model, report) = world_model::train(&data, wm_shape(&run.cfg), &run.cfg.world_model, seed)?;
    let p = run.path(store::WORLD_MODEL);
    model.to_checkpoint(&run.cfg.world_model)?.save(&p)?;
    run.outputs.push(p);
    let mut curve = String::from("epoch,train_loss,val_loss\n");
    for e in &report.curve {
        curve.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.train_loss, e.val_loss));
    }
    run.write(store::WM_CURVE, &curve)?;
    Ok(format!(
        "{} transitions, best epoch {} (val loss {:.4})",
        report.n_train + report.n_val,
        report.best_epoch,
        report.best_val_loss
    ))
}

fn eval_wm(run: &mut Run) -> Result<String> {
    let corpus = run.corpus()?;
    let model = run.world_model()?;
    let (train, held) = harness::holdout_split(&corpus, run.cfg.harness.held_out_fraction);
    let train = world_model::build_dataset(train);
    let held = world_model::build_dataset(held);
    let train_refs: Vec<&Transition> = train.iter().collect();
    let held_refs: Vec<&Transition> = held.iter().collect();
    let ev = world_model::evaluate(&model, &held_refs)?;
    let persist = world_model::persistence_baseline(&held_refs);
    let mean = world_model::global_mean_baseline(&train_refs, &held_refs);
    run.write(
        store::WM_EVAL,
        &world_model::comparison_csv(&[("world_model", &ev), ("persistence", &persist), ("global_mean", &mean)]),
    )?;
    Ok(format!(
        "held-out MAE {:.3} (persistence {:.3}, global mean {:.3})",
        ev.overall.mae, persist.overall.mae, mean.overall.mae
    ))
}

fn train_clf(run: &mut Run, seed: u64) -> Result<String> {
    let corpus = run.corpus()?;
    let (train, _) = harness::holdout_split(&corpus, run.cfg.harness.held_out_fraction);
    let ccfg = &run.cfg.classifier;
    let data = classifier::labeled_histories(train, ccfg)?;
    let shape = ClassifierShape::from_config(ccfg, run.cfg.env.max_position, run.cfg.env.max_rounds);
    let (model, report) = classifier::train(&data, shape, ccfg, seed)?;
    let p = run.path(store::CLASSIFIER);
    model.to_checkpoint(ccfg)?.save(&p)?;
    run.outputs.push(p);
    Ok(format!(
        "{} histories, best epoch {} (val accuracy {:.3})",
        data.len(),
        report.best_epoch,
        report.best_val_accuracy
    ))
}

fn eval_clf(run: &mut Run) -> Result<String> {
    let corpus = run.corpus()?;
    let model = run.classifier()?;
    let (_, held) = harness::holdout_split(&corpus, run.cfg.harness.held_out_fraction);
    let data = classifier::labeled_histories(held, &run.cfg.classifier)?;
    let ev = classifier::evaluate(&model, &data)?;
    run.write(store::CLF_EVAL, &ev.to_csv())?;
    Ok(format!("held-out accuracy {:.3} over {} histories", ev.accuracy, ev.n))
}

fn train_dqn(run: &mut Run, seed: u64) -> Result<String> {
    let model = run.world_model()?;
    let surrogate = Surrogate::new(model, run.cfg.world_model.surrogate_noise_std);
    let (q, report) = attacker::train_attacker(&surrogate, run.cfg.env.n_benign, run.cfg.env.max_rounds, &run.cfg.dqn, seed)?;
    let p = run.path(store::QNET);
    q.to_checkpoint(&run.cfg.dqn)?.save(&p)?;
    run.outputs.push(p);
    run.write(store::LEARNING_CURVE, &report.curve_csv())?;
    Ok(format!(
        "{} updates, best step {} (surrogate CR {:.3}, return {:.3})",
        report.updates, report.best_step, report.best_surrogate_cr, report.best_mean_return
    ))
}

fn write_report(run: &mut Run, report: &ExperimentReport) -> Result<String> {
    run.write(store::REPORT_CSV, &report.to_csv())?;
    let table = report.to_table();
    run.write(store::REPORT_TXT, &table)?;
    run.write(store::HISTOGRAM, &report.histogram_csv())?;
    Ok(table)
}

fn evaluate(run: &mut Run, seed: u64) -> Result<String> {
    let settings = run.cfg.harness.settings.clone();
    let qnet = if settings.iter().any(|s| s.needs_qnet()) {
        Some(Arc::new(run.qnet()?))
    } else {
        None
    };
    let classifier = if settings.contains(&Setting::GuessedRl) {
        Some(Arc::new((run.classifier()?, run.cfg.classifier.clone())))
    } else {
        None
    };
    let ctx = HarnessContext {
        env: run.cfg.env.clone(),
        policy: run.cfg.policy.clone(),
        qnet,
        classifier,
    };
    let (report, runs) = harness::run_grid(&ctx, &settings, run.cfg.harness.n_episodes, seed)?;
    let p = run.path(store::EPISODES);
    store::write_jsonl(&p, &runs)?;
    run.outputs.push(p);
    write_report(run, &report)
}

fn report(run: &mut Run) -> Result<String> {
    let p = run.input(store::EPISODES, "evaluation episodes")?;
    let runs: Vec<(usize, Setting, SettingRun)> = store::read_jsonl(&p)?;
    let report = ExperimentReport::build(&runs, run.cfg.env.max_rounds)?;
    write_report(run, &report)
}

fn execute(cli: &Cli) -> Result<String> {
    let cfg = Config::load(&cli.config)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let mut run = Run {
        cfg,
        seed: cli.seed,
        dir: cli.out.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let started = Instant::now();
    let seed = insider_core::rng::stream_id(&[run.seed, cli.command.stage()]);
    let message = match cli.command {
        Command::Collect => collect(&mut run, seed)?,
        Command::TrainWm => train_wm(&mut run, seed)?,
        Command::EvalWm => eval_wm(&mut run)?,
        Command::TrainClf => train_clf(&mut run, seed)?,
        Command::EvalClf => eval_clf(&mut run)?,
        Command::TrainDqn => train_dqn(&mut run, seed)?,
        Command::Evaluate => evaluate(&mut run, seed)?,
        Command::Report => report(&mut run)?,
    };
    let artifacts = |paths: &[PathBuf]| paths.iter().map(|p| Artifact::of(p)).collect::<Result<Vec<_>>>();
    RunManifest {
        command: cli.command.name().to_string(),
        config_hash: run.cfg.hash(),
        seed: run.seed,
        inputs: artifacts(&run.inputs)?,
        outputs: artifacts(&run.outputs)?,
        duration_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
    .save(Path::new(&run.dir))?;
    Ok(message)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(message) => {
            println!("{}: {message}", cli.command.name());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
