//! One pass/fail line per acceptance criterion. The learned components are
//! trained once through the `insider` binary with the desk preset; every
//! criterion is checked and reported before the test asserts.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use insider_core::attacker::{evaluate_in_surrogate, greedy, uniform_random, QNet};
use insider_core::env::disagreement;
use insider_core::nn::gru::GruCell;
use insider_core::nn::{grad_check, mse, weighted_cross_entropy, Activation, Checkpoint, Dense, Embedding, Mlp, Parameterized};
use insider_core::rng::{stream_rng, SimRng};
use insider_core::world_model::{Surrogate, WorldModel};
use insider_core::Config;
use rand::seq::SliceRandom;
use rand::Rng;

const TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

/// Bypasses libtest's capture so the lines always reach the terminal.
fn report(o: &Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stdout(), "criterion {}: {verdict}  {}", o.id, o.detail);
}

fn insider(dir: &Path, args: &[&str]) -> (Duration, String) {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_insider"))
        .args(args)
        .args(["--config", "desk", "--seed", "0", "--out"])
        .arg(dir)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "insider {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    (t.elapsed(), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

// ---- criterion 1 ----

fn check<M: Parameterized<f64> + Clone>(model: &M, loss: impl Fn(&M) -> f64, analytic: impl Fn(&M) -> M) -> f64 {
    grad_check(model, loss, analytic, FD_STEP, 400, &mut stream_rng(11, 0))
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let mut rng = stream_rng(10, 0);
    let x: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = vec![1.0, 3.0, 0.5, 1.0];
    let mut errors: Vec<(&str, f64)> = Vec::new();

    let dense = Dense::<f64>::new(6, 3, Activation::Tanh, &mut rng);
    let w_rows: Vec<f64> = (0..12).map(|i| w[i / 3]).collect();
    errors.push((
        "dense+mse",
        check(
            &dense,
            |m| mse(&m.forward(&x, 4).unwrap().0, &y, &w_rows).unwrap().0,
            |m| {
                let (out, cache) = m.forward(&x, 4).unwrap();
                let (_, d) = mse(&out, &y, &w_rows).unwrap();
                let mut g = m.zeroed();
                m.backward(&cache, &d, &mut g);
                g
            },
        ),
    ));

    let class_w = [0.7, 1.0, 1.6];
    let labels = [0usize, 2, 1, 2];
    let ce = |logits: &[f64]| -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut d = Vec::new();
        for (row, &c) in logits.chunks(3).zip(&labels) {
            let (l, g) = weighted_cross_entropy(row, c, &class_w).unwrap();
            loss += l;
            d.extend(g);
        }
        (loss, d)
    };
    let mlp = Mlp::<f64>::new(&[6, 8, 3], Activation::Relu, Activation::Identity, 0.5, &mut rng);
    errors.push((
        "mlp+ce, dropout off",
        check(
            &mlp,
            |m| ce(&m.forward(&x, 4, None::<&mut SimRng>).unwrap().0).0,
            |m| {
                let (out, cache) = m.forward(&x, 4, None::<&mut SimRng>).unwrap();
                let mut g = m.zeroed();
                m.backward(&cache, &ce(&out).1, &mut g);
                g
            },
        ),
    ));
    errors.push((
        "mlp+ce, fixed dropout mask",
        check(
            &mlp,
            |m| ce(&m.forward(&x, 4, Some(&mut stream_rng(12, 0))).unwrap().0).0,
            |m| {
                let (out, cache) = m.forward(&x, 4, Some(&mut stream_rng(12, 0))).unwrap();
                let mut g = m.zeroed();
                m.backward(&cache, &ce(&out).1, &mut g);
                g
            },
        ),
    ));

    let emb = Embedding::<f64>::new(7, 3, &mut rng);
    let ids = [0usize, 3, 3, 6];
    errors.push((
        "embedding",
        check(
            &emb,
            |m| mse(&m.forward(&ids).unwrap(), &y, &w_rows).unwrap().0,
            |m| {
                let (_, d) = mse(&m.forward(&ids).unwrap(), &y, &w_rows).unwrap();
                let mut g = m.zeroed();
                m.backward(&ids, &d, &mut g);
                g
            },
        ),
    ));

    let gru = GruCell::<f64>::new(6, 3, &mut rng);
    let steps: Vec<Vec<f64>> = (0..3).map(|s| x.iter().map(|v| v * (s as f64 + 1.0) * 0.5).collect()).collect();
    errors.push((
        "gru over 3 steps",
        check(
            &gru,
            |m| mse(&m.run(&steps, 4).unwrap().0, &y, &w_rows).unwrap().0,
            |m| {
                let (h, caches) = m.run(&steps, 4).unwrap();
                let (_, d) = mse(&h, &y, &w_rows).unwrap();
                let mut g = m.zeroed();
                m.run_backward(&caches, &d, &mut g);
                g
            },
        ),
    ));

    let elapsed = t.elapsed();
    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failing: Vec<String> = errors.iter().filter(|(_, e)| *e >= TOL).map(|(n, e)| format!("{n}={e:.2e}")).collect();
    Outcome {
        id: 1,
        pass: failing.is_empty() && elapsed < Duration::from_secs(30),
        detail: format!(
            "gradient checks: worst relative error {worst:.2e} over {} paths in {:.2}s{}",
            errors.len(),
            elapsed.as_secs_f64(),
            if failing.is_empty() { String::new() } else { format!("; over tolerance: {}", failing.join(", ")) }
        ),
    }
}

// ---- criterion 2 ----

fn disagreement_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = stream_rng(20, 0);
    let mut mismatches = 0usize;
    for _ in 0..10_000 {
        let n = rng.gen_range(2..=6);
        let mut xs: Vec<i32> = (0..n).map(|_| rng.gen_range(0..=20)).collect();
        let brute = xs
            .iter()
            .flat_map(|a| xs.iter().map(move |b| (a - b).abs()))
            .max()
            .unwrap() as f64;
        let d = disagreement(&xs).unwrap();
        let all_equal = xs.iter().all(|&v| v == xs[0]);
        xs.shuffle(&mut rng);
        let shuffled = disagreement(&xs).unwrap();
        if d != brute || (d == 0.0) != all_equal || shuffled != d {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    Outcome {
        id: 2,
        pass: mismatches == 0 && elapsed < Duration::from_secs(5),
        detail: format!(
            "disagreement vs brute-force max pairwise: {mismatches} mismatches in 10000 sets ({:.3}s)",
            elapsed.as_secs_f64()
        ),
    }
}

// ---- pipeline-backed criteria ----

struct Pipeline {
    wm_time: Duration,
    clf_time: Duration,
    total: Duration,
}

fn world_model_vs_baselines(dir: &Path, p: &Pipeline) -> Outcome {
    let mut mae: HashMap<(String, String), (f64, f64)> = HashMap::new();
    for r in csv_rows(&dir.join("wm_eval.csv")) {
        mae.insert((r[0].clone(), r[1].clone()), (r[2].parse().unwrap(), r[3].parse().unwrap()));
    }
    let get = |pred: &str, who: &str| mae[&(pred.to_string(), who.to_string())];
    let (wm, acc) = get("world_model", "overall");
    let persist = get("persistence", "overall").0;
    let mean = get("global_mean", "overall").0;
    let per = ["stubborn", "suggestible", "neutral"]
        .iter()
        .map(|w| format!("{w} {:.3}", get("world_model", w).0))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        id: 3,
        pass: wm < persist && wm < mean && p.wm_time < Duration::from_secs(600),
        detail: format!(
            "world model held-out MAE {wm:.3} (accuracy {:.1}%) vs persistence {persist:.3}, global mean {mean:.3}; \
             per personality: {per}; reference overall 0.927 / 58.6%; train+eval {:.0}s",
            acc * 100.0,
            p.wm_time.as_secs_f64()
        ),
    }
}

fn classifier_accuracy(dir: &Path, p: &Pipeline) -> Outcome {
    let rows = csv_rows(&dir.join("clf_eval.csv"));
    let overall = rows.iter().find(|r| r[0] == "overall").unwrap();
    let acc: f64 = overall[2].parse().unwrap();
    Outcome {
        id: 4,
        pass: acc >= 0.95 && p.clf_time < Duration::from_secs(600),
        detail: format!(
            "one-episode personality accuracy {:.1}% on {} held-out agents; training {:.0}s",
            acc * 100.0,
            overall[3],
            p.clf_time.as_secs_f64()
        ),
    }
}

fn pooled(dir: &Path) -> HashMap<String, (f64, f64)> {
    csv_rows(&dir.join("report.csv"))
        .into_iter()
        .filter(|r| r[0] == "overall")
        .map(|r| (r[1].clone(), (r[3].parse().unwrap(), r[4].parse().unwrap())))
        .collect()
}

fn attacker_efficacy(dir: &Path, p: &Pipeline) -> Outcome {
    let o = pooled(dir);
    let (cr_none, aer_none) = o["no_attacker"];
    let (cr_rl, aer_rl) = o["rl"];
    Outcome {
        id: 5,
        pass: cr_rl <= cr_none - 0.05 && aer_rl >= aer_none && p.total < Duration::from_secs(3600),
        detail: format!(
            "pooled CR {cr_none:.3} -> {cr_rl:.3}, AER {aer_none:.2} -> {aer_rl:.2} (no attacker -> RL); \
             reference 0.95 -> 0.83, 4.32 -> 4.91; pipeline {:.0}s",
            p.total.as_secs_f64()
        ),
    }
}

fn guessed_matches_known(dir: &Path) -> Outcome {
    let o = pooled(dir);
    let (rl, guessed) = (o["rl"].0, o["guessed_rl"].0);
    Outcome {
        id: 6,
        pass: (guessed - rl).abs() <= 0.03,
        detail: format!("pooled CR guessed {guessed:.3} vs known {rl:.3}"),
    }
}

fn surrogate_fidelity(dir: &Path) -> Outcome {
    let cfg = Config::load("desk").unwrap();
    let (wm, _) = WorldModel::from_checkpoint(&Checkpoint::load(&dir.join("world_model.json")).unwrap()).unwrap();
    let (q, _) = QNet::from_checkpoint(&Checkpoint::load(&dir.join("qnet.json")).unwrap()).unwrap();
    let surrogate = Surrogate::new(wm, cfg.world_model.surrogate_noise_std);
    let seed = 0x5eed;
    let random = evaluate_in_surrogate(&q, &surrogate, cfg.dqn.reward, 500, seed, uniform_random).unwrap();
    let trained = evaluate_in_surrogate(&q, &surrogate, cfg.dqn.reward, 500, seed, greedy).unwrap();
    let margin = trained.mean_return - random.mean_return;
    Outcome {
        id: 7,
        pass: margin >= 0.2 * random.mean_return.abs(),
        detail: format!(
            "surrogate mean return trained {:.3} vs uniform random {:.3} over 500 paired episodes (margin {margin:.3}, need {:.3})",
            trained.mean_return,
            random.mean_return,
            0.2 * random.mean_return.abs()
        ),
    }
}

fn reproducibility(dir: &Path) -> Outcome {
    let first = std::fs::read(dir.join("report.csv")).unwrap();
    insider(dir, &["evaluate"]);
    let second = std::fs::read(dir.join("report.csv")).unwrap();
    Outcome {
        id: 8,
        pass: first == second,
        detail: format!("two evaluate runs with seed 0: report.csv byte-identical = {}", first == second),
    }
}

fn round_distribution(dir: &Path) -> Outcome {
    let cfg = Config::load("desk").unwrap();
    let t = cfg.env.max_rounds.to_string();
    let at_t: HashMap<String, u64> = csv_rows(&dir.join("histogram.csv"))
        .into_iter()
        .filter(|r| r[1] == t)
        .map(|r| (r[0].clone(), r[2].parse().unwrap()))
        .collect();
    let base = at_t["no_attacker"];
    let attackers = ["heuristic", "rl", "guessed_rl"];
    Outcome {
        id: 9,
        pass: attackers.iter().all(|a| at_t[*a] > base),
        detail: format!(
            "episodes charged round {t}: no_attacker {base}, {}",
            attackers.iter().map(|a| format!("{a} {}", at_t[*a])).collect::<Vec<_>>().join(", ")
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = vec![gradient_integrity(), disagreement_oracle()];
    report(&outcomes[0]);
    report(&outcomes[1]);

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let start = Instant::now();
    insider(dir, &["collect"]);
    let wm_time = insider(dir, &["train-wm"]).0 + insider(dir, &["eval-wm"]).0;
    let clf_time = insider(dir, &["train-clf"]).0;
    insider(dir, &["eval-clf"]);
    insider(dir, &["train-dqn"]);
    let (_, table) = insider(dir, &["evaluate"]);
    let p = Pipeline {
        wm_time,
        clf_time,
        total: start.elapsed(),
    };
    let _ = writeln!(std::io::stdout(), "{table}");

    for o in [
        world_model_vs_baselines(dir, &p),
        classifier_accuracy(dir, &p),
        attacker_efficacy(dir, &p),
        guessed_matches_known(dir),
        surrogate_fidelity(dir),
        reproducibility(dir),
        round_distribution(dir),
    ] {
        report(&o);
        outcomes.push(o);
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
