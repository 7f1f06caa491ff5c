use ffl_core::compressor::Basis;
use ffl_core::config::{BasisName, ExperimentConfig, Scheme, StopRule};
use ffl_core::data::{sample_minibatch, Dataset, Shard};
use ffl_core::federation::{
    evaluate, initial_states, prepare, run_experiment, run_prepared, run_round, Prepared, RoundContext, RoundSettings,
    ServerState, WorkerState,
};
use ffl_core::netsim::ChannelConfig;
use ffl_core::nn::{loss_and_grad, sgd_step, Activation, MlpSpec, ParameterSet};
use ffl_core::rng::RngStream;
use ffl_core::scheduler::{plan_next, LossSmoother};

fn small(workers: usize) -> ExperimentConfig {
    ExperimentConfig {
        layer_sizes: vec![6, 10, 3],
        synthetic_per_class: 60,
        workers,
        tau0: 5,
        tau_ub: 5,
        s0: 3.0,
        s_ub: 4.0,
        lowrank_rank: 3,
        batch_size: 16,
        round_cap: 12,
        stop: StopRule::Rounds,
        ..ExperimentConfig::default()
    }
}

fn context<'a>(cfg: &ExperimentConfig, prep: &'a Prepared, channel: &'a ChannelConfig) -> RoundContext<'a> {
    RoundContext {
        spec: &prep.spec,
        train: &prep.train,
        channel,
        seed: cfg.seed,
        eta: cfg.eta,
        server_momentum: cfg.server_momentum,
        batch_size: cfg.batch_size,
        sec_per_local_step: cfg.sec_per_local_step,
        sec_per_atom_compress: cfg.sec_per_atom_compress,
    }
}

fn max_diff(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.flatten().iter().zip(b.flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn single_worker_matches_centralized_sgd() {
    let cfg = ExperimentConfig {
        server_momentum: 0.0,
        ..small(1)
    };
    let prep = prepare(&cfg).unwrap();
    let channel = cfg.channel();
    let ctx = context(&cfg, &prep, &channel);
    let (mut server, mut workers) = initial_states(&cfg, &prep);

    let mut w = prep.init.clone();
    let mut vel = w.zeros_like();
    let mut rng = RngStream::derive(cfg.seed, "worker", &[0]);
    let shard = workers[0].shard.clone();
    for _ in 0..50 {
        run_round(&ctx, &mut server, &mut workers, RoundSettings { tau: 1, budget: None }).unwrap();
        let batch = sample_minibatch(&shard, &prep.train, cfg.batch_size, &mut rng).unwrap();
        let (_, g) = loss_and_grad(&prep.spec, &w, &batch).unwrap();
        sgd_step(&mut w, &g, cfg.eta, 0.0, &mut vel).unwrap();
        assert!(max_diff(&server.w, &w) <= 1e-12);
    }
}

#[test]
fn identical_workers_average_to_one_gradient() {
    let cfg = ExperimentConfig {
        server_momentum: 0.0,
        ..small(4)
    };
    let prep = prepare(&cfg).unwrap();
    let channel = cfg.channel();
    let ctx = context(&cfg, &prep, &channel);
    let (mut server, workers) = initial_states(&cfg, &prep);
    let shard = workers[0].shard.clone();
    let proto = RngStream::derive(cfg.seed, "worker", &[0]);
    let mut clones: Vec<WorkerState> = (0..4)
        .map(|id| WorkerState {
            id,
            shard: shard.clone(),
            rng: proto.clone(),
            momentum: 0.0,
            params: prep.init.clone(),
        })
        .collect();

    let mut w = prep.init.clone();
    let mut vel = w.zeros_like();
    let mut rng = proto.clone();
    for _ in 0..30 {
        run_round(&ctx, &mut server, &mut clones, RoundSettings { tau: 1, budget: None }).unwrap();
        let batch = sample_minibatch(&shard, &prep.train, cfg.batch_size, &mut rng).unwrap();
        let (_, g) = loss_and_grad(&prep.spec, &w, &batch).unwrap();
        sgd_step(&mut w, &g, cfg.eta, 0.0, &mut vel).unwrap();
    }
    assert!(max_diff(&server.w, &w) <= 1e-9);
}

fn trajectory(cfg: &ExperimentConfig, prep: &Prepared, settings: RoundSettings, rounds: usize) -> Vec<ParameterSet> {
    let channel = cfg.channel();
    let ctx = context(cfg, prep, &channel);
    let (mut server, mut workers) = initial_states(cfg, prep);
    (0..rounds)
        .map(|_| {
            run_round(&ctx, &mut server, &mut workers, settings).unwrap();
            server.w.clone()
        })
        .collect()
}

#[test]
fn lossless_compression_matches_dense_trajectory() {
    let cfg = small(3);
    let prep = prepare(&cfg).unwrap();
    let d = prep.spec.param_count() as f64;
    let dense = trajectory(&cfg, &prep, RoundSettings { tau: 3, budget: None }, 50);
    let sparse = trajectory(
        &cfg,
        &prep,
        RoundSettings {
            tau: 3,
            budget: Some((Basis::Elementwise, d)),
        },
        50,
    );
    for (a, b) in dense.iter().zip(&sparse) {
        assert!(max_diff(a, b) <= 1e-9);
    }
}

#[test]
fn full_rank_lowrank_round_is_lossless() {
    let cfg = small(3);
    let prep = prepare(&cfg).unwrap();
    let dense = trajectory(&cfg, &prep, RoundSettings { tau: 3, budget: None }, 1);
    let full = trajectory(
        &cfg,
        &prep,
        RoundSettings {
            tau: 3,
            budget: Some((Basis::Lowrank { rank: 6 }, 1e6)),
        },
        1,
    );
    assert!(max_diff(&dense[0], &full[0]) <= 1e-9);
}

#[test]
fn workers_stay_synchronized() {
    let cfg = ExperimentConfig {
        packet_failure_prob: 0.5,
        ..small(4)
    };
    let prep = prepare(&cfg).unwrap();
    let channel = cfg.channel();
    let ctx = context(&cfg, &prep, &channel);
    let (mut server, mut workers): (ServerState, Vec<WorkerState>) = initial_states(&cfg, &prep);
    for _ in 0..6 {
        assert!(workers.iter().all(|w| w.params == server.w));
        run_round(
            &ctx,
            &mut server,
            &mut workers,
            RoundSettings {
                tau: 2,
                budget: Some((Basis::Lowrank { rank: 2 }, 2.0)),
            },
        )
        .unwrap();
    }
    assert!(workers.iter().all(|w| w.params == server.w));
}

#[test]
fn atomo_like_is_ffl_pinned_to_one_step() {
    let cfg = ExperimentConfig {
        scheme: Scheme::AtomoLike,
        ..small(3)
    };
    let prep = prepare(&cfg).unwrap();
    let run = run_prepared(&cfg, &prep).unwrap();

    let channel = cfg.channel();
    let ctx = context(&cfg, &prep, &channel);
    let (mut server, mut workers) = initial_states(&cfg, &prep);
    let settings = RoundSettings {
        tau: 1,
        budget: Some((cfg.basis(), cfg.s0)),
    };
    for rec in &run.records {
        let out = run_round(&ctx, &mut server, &mut workers, settings).unwrap();
        assert_eq!(out.train_loss, rec.train_loss);
        assert_eq!(out.sim_time, rec.sim_time_s);
    }
    assert_eq!(evaluate(&prep.spec, &server.w, &prep.test).unwrap().1, run.records.last().unwrap().test_acc);
}

#[test]
fn adacomm_like_is_ffl_without_compression() {
    let cfg = ExperimentConfig {
        scheme: Scheme::AdacommLike,
        ..small(3)
    };
    let prep = prepare(&cfg).unwrap();
    let run = run_prepared(&cfg, &prep).unwrap();

    let channel = cfg.channel();
    let ctx = context(&cfg, &prep, &channel);
    let (mut server, mut workers) = initial_states(&cfg, &prep);
    let mut ema = LossSmoother::new(cfg.loss_smoothing);
    let mut tau = cfg.tau0;
    let mut state = None;
    for rec in &run.records {
        assert_eq!(rec.tau_k, tau);
        let out = run_round(&ctx, &mut server, &mut workers, RoundSettings { tau, budget: None }).unwrap();
        assert_eq!(out.train_loss, rec.train_loss);
        let smoothed = ema.observe(out.train_loss);
        let st = *state.get_or_insert_with(|| cfg.scheduler_state(out.train_loss).unwrap());
        tau = plan_next(&st, smoothed).unwrap().tau;
    }
}

#[test]
fn same_seed_gives_identical_csv() {
    let cfg = ExperimentConfig {
        packet_failure_prob: 0.2,
        ..small(4)
    };
    let a = run_experiment(&cfg).unwrap().metrics_csv();
    let b = run_experiment(&cfg).unwrap().metrics_csv();
    assert_eq!(a, b);
    let c = run_experiment(&ExperimentConfig { seed: 99, ..cfg }).unwrap().metrics_csv();
    assert_ne!(a, c);
}

#[test]
fn vanilla_training_loss_decreases() {
    let cfg = ExperimentConfig {
        scheme: Scheme::Vanilla,
        round_cap: 60,
        ..small(4)
    };
    let run = run_experiment(&cfg).unwrap();
    let first = run.records.first().unwrap().train_loss;
    let last = run.records.last().unwrap().smoothed_loss;
    assert!(last < first, "{last} ≥ {first}");
}

#[test]
fn transmitted_atoms_match_expected_budget() {
    let cfg = ExperimentConfig {
        scheme: Scheme::Fixed,
        round_cap: 80,
        basis: BasisName::Elementwise,
        ..small(4)
    };
    let run = run_experiment(&cfg).unwrap();
    // Per round the count is a sum of independent Bernoullis with mean Σp and variance ≤ Σp.
    let n = run.records.len() as f64;
    let sent: f64 = run.records.iter().map(|r| r.atoms_sent_total as f64).sum();
    let expected: f64 = run.records.iter().map(|r| r.expected_atoms_total).sum();
    let stderr = expected.sqrt();
    assert!((sent - expected).abs() <= 3.0 * stderr, "{sent} vs {expected} over {n} rounds");
}

#[test]
fn random_weights_score_near_chance() {
    let spec = MlpSpec::new(vec![6, 10, 4], Activation::Relu).unwrap();
    let mut rng = RngStream::from_seed(5);
    // Labels drawn independently of the features: every prediction is right with probability 1/C.
    let n = 20_000;
    let features: Vec<f64> = (0..n * 6).map(|_| rng.uniform()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.index(4)).collect();
    let test = Dataset::new(features, labels, 6, 4).unwrap();
    let params = ParameterSet::init(&spec, &mut RngStream::from_seed(6));
    let (loss, acc) = evaluate(&spec, &params, &test).unwrap();
    let stderr = (0.25 * 0.75 / n as f64).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * stderr, "accuracy {acc}");
    assert_eq!(loss, loss_and_grad(&spec, &params, &test.as_batch()).unwrap().0);
}

#[test]
fn separable_toy_set_with_oracle_weights_is_perfect() {
    let cfg = ExperimentConfig {
        layer_sizes: vec![5, 3],
        synthetic_spread: 0.0,
        synthetic_per_class: 30,
        ..small(2)
    };
    let prep = prepare(&cfg).unwrap();
    // With zero spread every row is its class center; a nearest-center linear map classifies perfectly.
    let spec = prep.spec.clone();
    let mut centers = vec![vec![0.0; 5]; 3];
    for i in 0..prep.train.len() {
        centers[prep.train.labels()[i]].copy_from_slice(prep.train.row(i));
    }
    let mut params = ParameterSet::zeros(&spec);
    let w: Vec<f64> = centers.iter().flatten().copied().collect();
    let b: Vec<f64> = centers.iter().map(|c| -0.5 * c.iter().map(|x| x * x).sum::<f64>()).collect();
    params.layers[0].weights = ffl_core::tensor::Tensor::new(vec![3, 5], w).unwrap();
    params.layers[0].bias = ffl_core::tensor::Tensor::new(vec![3], b).unwrap();
    assert_eq!(evaluate(&spec, &params, &prep.test).unwrap().1, 1.0);
}

#[test]
fn shards_are_disjoint_and_workers_cover_training_set() {
    let cfg = small(4);
    let prep = prepare(&cfg).unwrap();
    let mut all: Vec<usize> = prep.shards.iter().flat_map(|s: &Shard| s.indices.iter().copied()).collect();
    all.sort_unstable();
    let n = all.len();
    all.dedup();
    assert_eq!(all.len(), n);
    assert_eq!(n, prep.train.len());
}
