// Scratch calibration probe (removed before release).
use edgemap_core::agent::{AgentConfig, DqnAgent, NormalizationBounds};
use edgemap_core::config::ExperimentConfig;
use edgemap_core::runner::{build_vae, EvalPolicy, Runner};
use edgemap_core::scenario::{generate, Scenario, ScenarioKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "vae" => probe_vae(),
        "match" => probe_match(),
        "latent" => probe_latent_spread(),
        "train" => probe_train(),
        "chain" => probe_chain(),
        "beta" => probe_beta(),
        _ => eprintln!("usage: probe [vae|match|latent|train|chain]"),
    }
}

fn probe_vae() {
    use edgemap_core::neural::{gauss, vae_eval_loss, OptimizerState, VaeModel};
    use edgemap_core::scenario::{training_signatures, LATENT_DIM, SIGNATURE_DIM};
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1 ^ 0x766165);
    let mut model = VaeModel::init(SIGNATURE_DIM, 128, LATENT_DIM, &mut rng);
    let samples = training_signatures(1, 256);
    let noises: Vec<Vec<f64>> =
        (0..256).map(|_| (0..LATENT_DIM).map(|_| gauss(&mut rng)).collect()).collect();
    let mut enc = OptimizerState::new(&model.encoder, 2e-4);
    let mut dec = OptimizerState::new(&model.decoder, 2e-4);
    let mut evals = vec![vae_eval_loss(&model, &samples, &noises).unwrap()];
    for _ in 0..20 {
        edgemap_core::neural::vae_train_epoch(&mut model, &samples, &mut enc, &mut dec, &mut rng)
            .unwrap();
        evals.push(vae_eval_loss(&model, &samples, &noises).unwrap());
    }
    println!("evals: {:?}", evals.iter().map(|l| format!("{l:.2}")).collect::<Vec<_>>());
    let mono = evals.windows(2).all(|w| w[1] < w[0]);
    println!("monotone: {mono}, took {:?}", t.elapsed());
}

fn probe_latent_spread() {
    let (vae, _) = build_vae(128, 40, 256, 2e-4, 1).unwrap();
    let scenario = Scenario { n_objects: 30, duration_ms: 100, ..Scenario::default() };
    let trace = generate(&scenario);
    let objs = &trace.frames[0].objects;
    let mut same = Vec::new();
    let mut diff = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..objs.len() {
        // same instance, two views
        let v1: Vec<f64> = objs[i]
            .signature
            .iter()
            .map(|s| s + 0.05 * edgemap_core::neural::gauss(&mut rng))
            .collect();
        let v2: Vec<f64> = objs[i]
            .signature
            .iter()
            .map(|s| s + 0.05 * edgemap_core::neural::gauss(&mut rng))
            .collect();
        let z1 = vae.extract_feature(&v1).unwrap();
        let z2 = vae.extract_feature(&v2).unwrap();
        same.push(dist_sq(&z1, &z2));
        for j in (i + 1)..objs.len() {
            if objs[i].class == objs[j].class {
                let zj = vae.extract_feature(&objs[j].signature).unwrap();
                let zi = vae.extract_feature(&objs[i].signature).unwrap();
                diff.push(dist_sq(&zi, &zj));
            }
        }
    }
    same.sort_by(|a, b| a.total_cmp(b));
    diff.sort_by(|a, b| a.total_cmp(b));
    println!(
        "same-instance z^2: median {:.3} max {:.3}",
        same[same.len() / 2],
        same.last().unwrap()
    );
    println!(
        "same-class diff-instance z^2: min {:.3} p10 {:.3} median {:.3}",
        diff[0],
        diff[diff.len() / 10],
        diff[diff.len() / 2]
    );
}

fn probe_match() {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario = Scenario {
        kind: ScenarioKind::Intersection,
        n_vehicles: 10,
        n_objects: 30,
        duration_ms: 30_000,
        frame_period_ms: 100,
        seed: 1,
    };
    cfg.seed = 1;
    let t = Instant::now();
    let (vae, _) = build_vae(cfg.vae.hidden, cfg.vae.epochs, cfg.vae.sample_count, cfg.vae.learning_rate, cfg.scenario.seed).unwrap();
    println!("vae built in {:?}", t.elapsed());
    let trace = generate(&cfg.scenario);
    let mut runner = Runner::new(&cfg, &trace, &vae, 1);
    let t = Instant::now();
    runner.run_eval(&mut EvalPolicy::Lp, 30_000).unwrap();
    let s = runner.summary("lp");
    println!(
        "obs {} correct {:.4} success {:.4} frag {} misassoc {} completed {} mean {:.1} ms ({:?})",
        s.observations, s.match_accuracy, s.detection_success_rate, runner.match_stats.fragmented, runner.match_stats.misassociated, s.completed, s.mean_latency_ms,
        t.elapsed()
    );
}

fn probe_train() {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario = Scenario {
        kind: ScenarioKind::Intersection,
        n_vehicles: 20,
        n_objects: 30,
        duration_ms: 60_000,
        frame_period_ms: 100,
        seed: 1,
    };
    cfg.seed = 1;
    cfg.agent = AgentConfig {
        hidden: vec![64, 64],
        batch_size: 128,
        buffer_capacity: 60_000,
        epsilon_decay_steps: 12_000,
        epsilon_end: 0.05,
        ..AgentConfig::default()
    };
    let (vae, _) = build_vae(64, 10, 128, 1e-3, cfg.scenario.seed).unwrap();
    let trace20 = generate(&cfg.scenario);
    let trace5 = generate(&Scenario { n_vehicles: 5, ..cfg.scenario });
    let trace50 = generate(&Scenario { n_vehicles: 50, ..cfg.scenario });

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut agent = DqnAgent::new(cfg.agent.clone(), NormalizationBounds::default(), &mut rng);

    let t = Instant::now();
    let mut r = Runner::new(&cfg, &trace20, &vae, 100);
    r.run_train(&mut agent, 6000, 2, |_, _| {}, 0).unwrap();
    println!("phase1 20v: 6000 decisions in {:?}", t.elapsed());
    let t = Instant::now();
    let mut r = Runner::new(&cfg, &trace5, &vae, 101);
    r.run_train(&mut agent, 3000, 2, |_, _| {}, 0).unwrap();
    println!("phase2 5v: {:?}", t.elapsed());
    let t = Instant::now();
    let mut r = Runner::new(&cfg, &trace50, &vae, 102);
    r.run_train(&mut agent, 5000, 2, |_, _| {}, 0).unwrap();
    println!("phase3 50v: {:?}", t.elapsed());

    // Evaluate all policies on the 20-vehicle trace.
    for (name, mk) in [("head", 0), ("eo", 1), ("lp", 2), ("ro", 3)] {
        let mut lat = Vec::new();
        let mut actions = Vec::new();
        for seed in 0..3u64 {
            let mut runner = Runner::new(&cfg, &trace20, &vae, 200 + seed);
            let mut pol = match mk {
                0 => EvalPolicy::Head(&agent),
                1 => EvalPolicy::Eo,
                2 => EvalPolicy::Lp,
                _ => EvalPolicy::Ro,
            };
            runner.run_eval(&mut pol, 60_000).unwrap();
            let s = runner.summary(name);
            lat.push(s.mean_latency_ms);
            actions.push(s.mean_action);
        }
        println!(
            "{name}: mean latency {:?} mean action {:?}",
            lat.iter().map(|l| format!("{l:.0}")).collect::<Vec<_>>(),
            actions.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>()
        );
    }

    // Action shift: 5 vs 50 vehicles, greedy.
    for (name, trace) in [("5v", &trace5), ("50v", &trace50)] {
        let mut runner = Runner::new(&cfg, trace, &vae, 300);
        runner.run_eval(&mut EvalPolicy::Head(&agent), 60_000).unwrap();
        let s = runner.summary("head");
        println!(
            "{name}: decisions {} mean action {:.3} mean latency {:.0} sched ratio {:.2}",
            s.decisions, s.mean_action, s.mean_latency_ms, s.scheduled_ratio_mean
        );
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn probe_beta() {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario = Scenario {
        kind: ScenarioKind::Intersection,
        n_vehicles: 20,
        n_objects: 30,
        duration_ms: 60_000,
        frame_period_ms: 100,
        seed: 1,
    };
    cfg.seed = 1;
    cfg.agent = AgentConfig {
        hidden: vec![64, 64],
        batch_size: 128,
        buffer_capacity: 50_000,
        epsilon_decay_steps: 8_000,
        epsilon_end: 0.05,
        ..AgentConfig::default()
    };
    let (vae, _) = build_vae(64, 10, 128, 1e-3, cfg.scenario.seed).unwrap();
    let trace = generate(&cfg.scenario);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut agent = DqnAgent::new(cfg.agent.clone(), NormalizationBounds::default(), &mut rng);
    let mut r = Runner::new(&cfg, &trace, &vae, 100);
    r.run_train(&mut agent, 5000, 2, |_, _| {}, 0).unwrap();
    println!("trained");

    for beta in [1.0, 0.9, 0.8, 0.7, 0.6] {
        let mut c2 = cfg.clone();
        c2.scheduler.beta = beta;
        let mut runner = Runner::new(&c2, &trace, &vae, 300);
        runner.run_eval(&mut EvalPolicy::Head(&agent), 30_000).unwrap();
        let s = runner.summary("head");
        println!(
            "beta {beta}: sched ratio {:.3} mean latency {:.1} completed {}",
            s.scheduled_ratio_mean, s.mean_latency_ms, s.completed
        );
    }
}

const N_STATES: usize = 5;

fn chain_reward(s: usize, a: usize) -> f64 {
    if a == 0 {
        if s == 0 {
            -0.02
        } else {
            -0.4
        }
    } else if s == N_STATES - 1 {
        -0.05
    } else {
        -0.2
    }
}

fn chain_next(s: usize, a: usize) -> usize {
    if a == 0 {
        s.saturating_sub(1)
    } else {
        (s + 1).min(N_STATES - 1)
    }
}

fn chain_oracle(gamma: f64) -> [[f64; 2]; N_STATES] {
    let mut q = [[0.0f64; 2]; N_STATES];
    for _ in 0..100_000 {
        let mut next = q;
        for (s, row) in next.iter_mut().enumerate() {
            for (a, val) in row.iter_mut().enumerate() {
                let sp = chain_next(s, a);
                let vmax = q[sp][0].max(q[sp][1]);
                *val = chain_reward(s, a) + gamma * vmax;
            }
        }
        q = next;
    }
    q
}

fn one_hot(s: usize) -> Vec<f64> {
    let mut v = vec![0.0; N_STATES];
    v[s] = 1.0;
    v
}

fn probe_chain() {
    use edgemap_core::agent::{
        dqn_train_step, select_action, update_target, ReplayBuffer, Transition,
    };
    use edgemap_core::neural::{DenseNet, OptimizerState, DEFAULT_LEAKY_SLOPE};
    let t = Instant::now();
    let gamma = 0.9;
    let oracle = chain_oracle(gamma);
    println!("oracle: {oracle:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut qnet = DenseNet::init(&[N_STATES, 32, 32, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
    let mut target = qnet.clone();
    let mut opt = OptimizerState::new(&qnet, 5e-4);
    let mut buffer = ReplayBuffer::new(10_000, 0.6);
    let mut s = 0usize;
    for step in 0..50_000u64 {
        let a = select_action(&qnet, &one_hot(s), 0.3, &mut rng).unwrap();
        let r = chain_reward(s, a);
        let sp = chain_next(s, a);
        buffer.push(Transition {
            state: one_hot(s),
            action: a,
            reward: r,
            next_state: one_hot(sp),
            priority: buffer.max_priority(),
        });
        s = sp;
        if step % 2 == 1 && buffer.len() >= 64 {
            dqn_train_step(&mut qnet, &target, &mut opt, &mut buffer, 64, gamma, 1e-3, &mut rng)
                .unwrap();
            update_target(&qnet, &mut target, 0.01).unwrap();
        }
    }
    let mut max_rel = 0.0f64;
    let mut policy_ok = true;
    for s in 0..N_STATES {
        let q = qnet.infer(&one_hot(s)).unwrap();
        let greedy = if q[1] > q[0] { 1 } else { 0 };
        let oracle_greedy = if oracle[s][1] > oracle[s][0] { 1 } else { 0 };
        if greedy != oracle_greedy {
            policy_ok = false;
        }
        for a in 0..2 {
            let rel = (q[a] - oracle[s][a]).abs() / oracle[s][a].abs();
            max_rel = max_rel.max(rel);
        }
        println!("s{s}: q {:?} oracle {:?}", q, oracle[s]);
    }
    println!("policy match: {policy_ok}, max rel err {max_rel:.4}, took {:?}", t.elapsed());
}
