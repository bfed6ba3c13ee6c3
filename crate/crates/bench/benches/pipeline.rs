use criterion::{black_box, criterion_group, criterion_main, Criterion};
use insider_core::attacker::{td_update, QNet, QNetShape, ReplayBuffer, SurrogateEnv};
use insider_core::env::RewardConfig;
use insider_core::episode::run_episode;
use insider_core::nn::optim::{Adam, AdamConfig};
use insider_core::nn::tensor::matmul;
use insider_core::policies::{AgentBackend, HeuristicInsider, PolicyConfig, ScriptedAgent};
use insider_core::rng::stream_rng;
use insider_core::world_model::{self, Surrogate, Transition, WorldModel, WorldModelConfig, WorldModelShape};
use insider_core::{harness, EnvConfig, Personality};
use rand::Rng;

fn wm_shape() -> WorldModelShape {
    WorldModelShape {
        n_slots: 4,
        max_position: 20,
        embedding_dim: 128,
        hidden_dim: 128,
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = stream_rng(1, 0);
    let (m, k, n) = (128, 256, 256);
    let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; m * n];
    c.bench_function("matmul 128x256x256", |bch| bch.iter(|| matmul(black_box(&a), black_box(&b), m, k, n, &mut out)));
}

fn bench_wm_step(c: &mut Criterion) {
    let corpus = harness::collect_corpus(&EnvConfig::default(), &PolicyConfig::default(), 20, 3).unwrap();
    let data = world_model::build_dataset(&corpus);
    let batch: Vec<&Transition> = data.iter().take(64).collect();
    let cfg = WorldModelConfig::default();
    let weights: Vec<f32> = batch.iter().map(|t| cfg.sample_weight(t.target_personality()) as f32).collect();
    let mut rng = stream_rng(2, 0);
    let mut model = WorldModel::<f32>::new(wm_shape(), cfg.dropout, &mut rng);
    let mut opt = Adam::new(AdamConfig::default(), &model);
    c.bench_function("world model train step (batch 64)", |bch| {
        bch.iter(|| {
            let (_, grad) = model.loss_and_grad(&batch, &weights, Some(&mut rng)).unwrap();
            opt.update(&mut model, &grad).unwrap();
        })
    });
}

fn bench_surrogate_step(c: &mut Criterion) {
    let mut rng = stream_rng(3, 0);
    let surrogate = Surrogate::new(WorldModel::<f32>::new(wm_shape(), 0.0, &mut rng), 0.0);
    let shape = QNetShape {
        n_benign: 3,
        max_position: 20,
        max_rounds: 10,
    };
    let mut env = SurrogateEnv::new(shape, RewardConfig::default(), stream_rng(3, 1));
    env.reset();
    c.bench_function("surrogate env step", |bch| {
        bch.iter(|| {
            let s = env.step(&surrogate, 7).unwrap();
            if s.done {
                env.reset();
            }
        })
    });
}

fn bench_td_update(c: &mut Criterion) {
    let shape = QNetShape {
        n_benign: 3,
        max_position: 20,
        max_rounds: 10,
    };
    let mut rng = stream_rng(4, 0);
    let mut q = QNet::<f32>::new(shape, &[256, 256], &mut rng);
    let target = q.clone();
    let dim = shape.state_dim();
    let mut buf = ReplayBuffer::new(4096, dim);
    for _ in 0..4096 {
        let s: Vec<f32> = (0..dim).map(|_| rng.gen()).collect();
        let s2: Vec<f32> = (0..dim).map(|_| rng.gen()).collect();
        buf.push(&s, rng.gen_range(0..21), rng.gen_range(-1.0..1.0), &s2, rng.gen_bool(0.1));
    }
    let mut opt = Adam::new(AdamConfig::default(), &q);
    c.bench_function("td update (batch 128)", |bch| {
        bch.iter(|| {
            let batch = buf.sample(128, &mut rng).unwrap();
            td_update(&mut q, &target, &batch, 0.99, &mut opt, 1e4).unwrap()
        })
    });
}

fn bench_episode(c: &mut Criterion) {
    let env = EnvConfig::default();
    let policy = PolicyConfig::default();
    let pers = [Personality::Stubborn, Personality::Suggestible, Personality::Neutral];
    let agents: Vec<ScriptedAgent> = pers.iter().map(|&p| ScriptedAgent::new(p, &policy).unwrap()).collect();
    let refs: Vec<&dyn AgentBackend> = agents.iter().map(|a| a as &dyn AgentBackend).collect();
    let mut seed = 0u64;
    c.bench_function("heuristic episode", |bch| {
        bch.iter(|| {
            seed += 1;
            let mut insider = HeuristicInsider::default();
            run_episode(&env, &pers, &refs, Some(&mut insider), seed, seed).unwrap()
        })
    });
}

criterion_group!(benches, bench_matmul, bench_wm_step, bench_surrogate_step, bench_td_update, bench_episode);
criterion_main!(benches);
