//! Synchronous federated rounds: broadcast, local updates, compressed
//! uplink, averaging, a global momentum step and the next round plan.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::compressor::{compress, reconstruct, Basis, VarianceTerms};
use crate::config::{DatasetKind, ExperimentConfig, Schedule, Scheme, StopRule};
use crate::data::{gen_synthetic, load_idx, partition, sample_minibatch, Dataset, Shard};
use crate::error::{FflError, Result};
use crate::netsim::{compressed_bits, dense_bits, link_rate, packet_survives, uplink_time_bits, ChannelConfig, TimeLedger};
use crate::nn::{forward, local_update_run, loss_and_grad, sgd_step, MlpSpec, ParameterSet};
use crate::rng::RngStream;
use crate::scheduler::{
    estimate_constants, optimal_full, plan_next, BoundParams, LossSmoother, ProbeRound, RoundPlan, SchedulerState,
};

pub const CSV_HEADER: &str = "round,sim_time_s,tau_k,s_k,train_loss,smoothed_loss,test_acc,received_workers,atoms_sent_total,round_time_s,uplink_max_s,downlink_s,compute_max_s";

#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: usize,
    pub shard: Shard,
    pub rng: RngStream,
    pub momentum: f64,
    /// Local copy of the global model, refreshed by every broadcast.
    pub params: ParameterSet,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub w: ParameterSet,
    pub velocity: ParameterSet,
    pub round: usize,
    pub ledger: TimeLedger,
}

/// Everything a round needs besides the mutable states.
#[derive(Debug, Clone)]
pub struct RoundContext<'a> {
    pub spec: &'a MlpSpec,
    pub train: &'a Dataset,
    pub channel: &'a ChannelConfig,
    pub seed: u64,
    pub eta: f64,
    pub server_momentum: f64,
    pub batch_size: usize,
    pub sec_per_local_step: f64,
    pub sec_per_atom_compress: f64,
}

/// What one round transmits: `tau` local steps and, when `budget` is set,
/// compression at that sparsity budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSettings {
    pub tau: usize,
    pub budget: Option<(Basis, f64)>,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    pub tau: usize,
    /// Zero for dense uplinks.
    pub s: f64,
    pub train_loss: f64,
    pub received: usize,
    pub atoms_sent_total: usize,
    pub expected_atoms_total: f64,
    pub bits_sent_total: u64,
    pub round_time: f64,
    pub uplink_max: f64,
    pub downlink: f64,
    pub compute_max: f64,
    pub sim_time: f64,
    pub worker_terms: Vec<VarianceTerms>,
    pub diagnostics: Vec<String>,
}

struct WorkerOutput {
    mean_loss: f64,
    grad: Vec<f64>,
    atoms: usize,
    expected_atoms: f64,
    bits: u64,
    compute: f64,
    uplink: f64,
    terms: Option<VarianceTerms>,
    survived: bool,
    diagnostics: Vec<String>,
}

fn worker_round(ctx: &RoundContext<'_>, w: &mut WorkerState, settings: RoundSettings, k: usize) -> Result<WorkerOutput> {
    let run = local_update_run(
        ctx.spec,
        &w.params,
        ctx.train,
        &w.shard,
        settings.tau,
        ctx.eta,
        ctx.batch_size,
        w.momentum,
        &mut w.rng,
    )?;
    let flat = run.g_agg.flatten();
    let mut compute = settings.tau as f64 * ctx.sec_per_local_step;
    let (grad, atoms, expected_atoms, bits, terms, diagnostics) = match settings.budget {
        None => {
            let bits = dense_bits(flat.len(), ctx.channel);
            (flat, 0, 0.0, bits, None, Vec::new())
        }
        Some((basis, s)) => {
            let mut rng = RngStream::derive(ctx.seed, "compress", &[w.id as u64, k as u64]);
            let c = compress(&flat, &run.g_agg.blocks(), basis, s, &mut rng)?;
            compute += c.atoms_available as f64 * ctx.sec_per_atom_compress;
            let bits = compressed_bits(&c.compressed, ctx.channel);
            (
                reconstruct(&c.compressed),
                c.compressed.payload_atoms(),
                c.expected_atoms,
                bits,
                c.terms,
                c.diagnostics,
            )
        }
    };
    let survived = packet_survives(&mut RngStream::derive(ctx.seed, "packet", &[w.id as u64, k as u64]), ctx.channel);
    Ok(WorkerOutput {
        mean_loss: run.mean_loss(),
        grad,
        atoms,
        expected_atoms,
        bits,
        compute,
        uplink: uplink_time_bits(bits, ctx.channel, w.id),
        terms,
        survived,
        diagnostics,
    })
}

/// One synchronous round. Workers run in parallel and are merged in index
/// order, so the result does not depend on thread scheduling.
///
/// The server averages the gradients that arrived (dividing by their count),
/// takes one momentum step of size `eta` and broadcasts the new model. If no
/// gradient arrives the model is left unchanged but the clock still advances.
pub fn run_round(
    ctx: &RoundContext<'_>,
    server: &mut ServerState,
    workers: &mut [WorkerState],
    settings: RoundSettings,
) -> Result<RoundOutcome> {
    if settings.tau < 1 {
        return Err(FflError::invalid("local update count must be at least 1"));
    }
    if workers.is_empty() {
        return Err(FflError::config("workers", "must be at least 1"));
    }
    debug_assert!(workers.iter().all(|w| w.params == server.w), "workers out of sync");
    let k = server.round;
    let outputs: Vec<WorkerOutput> = workers
        .par_iter_mut()
        .map(|w| worker_round(ctx, w, settings, k))
        .collect::<Result<_>>()?;

    let d = server.w.dim();
    let mut sum = vec![0.0; d];
    let mut received = 0;
    for out in outputs.iter().filter(|o| o.survived) {
        received += 1;
        sum.iter_mut().zip(&out.grad).for_each(|(a, g)| *a += g);
    }
    let mut diagnostics: Vec<String> = outputs.iter().flat_map(|o| o.diagnostics.iter().cloned()).collect();
    if received == 0 {
        let note = format!("round {k}: no gradient reached the server; update skipped");
        log::warn!("{note}");
        diagnostics.push(note);
    } else {
        if received < workers.len() {
            log::debug!("round {k}: averaging {received} of {} gradients", workers.len());
        }
        let inv = 1.0 / received as f64;
        sum.iter_mut().for_each(|x| *x *= inv);
        let g_hat = server.w.unflatten_like(&sum)?;
        sgd_step(&mut server.w, &g_hat, ctx.eta, ctx.server_momentum, &mut server.velocity)?;
        if !server.w.is_finite() {
            return Err(FflError::invalid(format!("global model diverged in round {k}")));
        }
    }

    let compute: Vec<f64> = outputs.iter().map(|o| o.compute).collect();
    let uplink: Vec<f64> = outputs.iter().map(|o| o.uplink).collect();
    let timing = server.ledger.record(compute, uplink, dense_bits(d, ctx.channel), ctx.channel)?;
    let (round_time, uplink_max, downlink, compute_max) =
        (timing.total, timing.uplink_max(), timing.downlink, timing.compute_max());

    for w in workers.iter_mut() {
        w.params.clone_from(&server.w);
    }
    server.round += 1;

    Ok(RoundOutcome {
        round: k,
        tau: settings.tau,
        s: settings.budget.map_or(0.0, |(_, s)| s),
        train_loss: outputs.iter().map(|o| o.mean_loss).sum::<f64>() / outputs.len() as f64,
        received,
        atoms_sent_total: outputs.iter().map(|o| o.atoms).sum(),
        expected_atoms_total: outputs.iter().map(|o| o.expected_atoms).sum(),
        bits_sent_total: outputs.iter().map(|o| o.bits).sum(),
        round_time,
        uplink_max,
        downlink,
        compute_max,
        sim_time: server.ledger.elapsed(),
        worker_terms: outputs.iter().filter_map(|o| o.terms).collect(),
        diagnostics,
    })
}

/// Mean cross-entropy and argmax accuracy (ties to the lowest class index).
pub fn evaluate(spec: &MlpSpec, params: &ParameterSet, test: &Dataset) -> Result<(f64, f64)> {
    let batch = test.as_batch();
    let (loss, _) = loss_and_grad(spec, params, &batch)?;
    let logits = forward(spec, params, &batch)?;
    let c = spec.classes();
    let correct = logits
        .values()
        .chunks(c)
        .zip(test.labels())
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == y
        })
        .count();
    Ok((loss, correct as f64 / test.len() as f64))
}

/// Train/test data and worker shards derived from the config seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: MlpSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Shard>,
    pub init: ParameterSet,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let spec = cfg.mlp_spec()?;
    let full = match cfg.dataset {
        DatasetKind::Synthetic => gen_synthetic(
            spec.classes(),
            cfg.synthetic_per_class,
            spec.input_dim(),
            cfg.synthetic_spread,
            &mut RngStream::derive(cfg.seed, "data", &[]),
        )?,
        DatasetKind::Mnist => {
            let dir = cfg.mnist_dir.as_ref().expect("validated");
            let raw = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
            if raw.dim() != spec.input_dim() || raw.classes() > spec.classes() {
                return Err(FflError::config(
                    "layer_sizes",
                    format!("MNIST needs input {} and at least {} outputs", raw.dim(), raw.classes()),
                ));
            }
            let ds = Dataset::new(raw.features().to_vec(), raw.labels().to_vec(), raw.dim(), spec.classes())?;
            match cfg.subset_n {
                Some(n) if n < ds.len() => {
                    let mut order: Vec<usize> = (0..ds.len()).collect();
                    RngStream::derive(cfg.seed, "subset", &[]).shuffle(&mut order);
                    ds.select(&order[..n])?
                }
                _ => ds,
            }
        }
    };
    let (train, test) = full.split(cfg.test_fraction, &mut RngStream::derive(cfg.seed, "split", &[]))?;
    let shards = partition(&train, &cfg.partition_spec(), &mut RngStream::derive(cfg.seed, "partition", &[]))?;
    let init = ParameterSet::init(&spec, &mut RngStream::derive(cfg.seed, "init", &[]));
    Ok(Prepared {
        spec,
        train,
        test,
        shards,
        init,
    })
}

pub fn initial_states(cfg: &ExperimentConfig, prep: &Prepared) -> (ServerState, Vec<WorkerState>) {
    let server = ServerState {
        w: prep.init.clone(),
        velocity: prep.init.zeros_like(),
        round: 0,
        ledger: TimeLedger::default(),
    };
    let workers = prep
        .shards
        .iter()
        .enumerate()
        .map(|(j, shard)| WorkerState {
            id: j,
            shard: shard.clone(),
            rng: RngStream::derive(cfg.seed, "worker", &[j as u64]),
            momentum: cfg.worker_momentum,
            params: prep.init.clone(),
        })
        .collect();
    (server, workers)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sim_time_s: f64,
    pub tau_k: usize,
    pub s_k: f64,
    pub train_loss: f64,
    pub smoothed_loss: f64,
    pub test_acc: f64,
    pub received_workers: usize,
    pub atoms_sent_total: usize,
    pub round_time_s: f64,
    pub uplink_max_s: f64,
    pub downlink_s: f64,
    pub compute_max_s: f64,
    /// Not part of the CSV.
    #[serde(skip)]
    pub smoothed_acc: f64,
    #[serde(skip)]
    pub expected_atoms_total: f64,
    #[serde(skip)]
    pub bits_sent_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scheme: Scheme,
    pub rounds: usize,
    pub sim_time_s: f64,
    pub final_acc: f64,
    pub final_smoothed_acc: f64,
    pub target_accuracy: f64,
    /// `None` when the target was never reached; written as "inf".
    #[serde(serialize_with = "ser_time")]
    pub time_to_target_s: Option<f64>,
    pub total_atoms: usize,
    pub total_uplink_bits: u64,
    pub f0: f64,
    pub diagnostics: Vec<String>,
    pub config: ExperimentConfig,
}

fn ser_time<S: serde::Serializer>(t: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match t {
        Some(v) => s.serialize_f64(*v),
        None => s.serialize_str("inf"),
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

impl RunResult {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.records)
    }
}

pub fn metrics_csv(records: &[RoundRecord]) -> String {
    let mut out = String::with_capacity(128 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.sim_time_s,
            r.tau_k,
            r.s_k,
            r.train_loss,
            r.smoothed_loss,
            r.test_acc,
            r.received_workers,
            r.atoms_sent_total,
            r.round_time_s,
            r.uplink_max_s,
            r.downlink_s,
            r.compute_max_s
        )
        .expect("writing to a String");
    }
    out
}

/// Simulated time at which the smoothed accuracy first reaches `target`.
pub fn time_to_target(records: &[RoundRecord], target: f64) -> Option<f64> {
    records.iter().find(|r| r.smoothed_acc >= target).map(|r| r.sim_time_s)
}

/// Chooses each round's τ and s for a scheme.
struct Planner {
    scheme: Scheme,
    schedule: Schedule,
    basis: Basis,
    state: Option<SchedulerState>,
    plan: RoundPlan,
    probes: Vec<ProbeRound>,
    fitted: Option<BoundParams>,
}

impl Planner {
    fn new(cfg: &ExperimentConfig) -> Self {
        let plan = match cfg.scheme {
            Scheme::Ffl | Scheme::AdacommLike | Scheme::Fixed => RoundPlan {
                tau: cfg.tau0,
                s: cfg.s0,
            },
            Scheme::AtomoLike | Scheme::Vanilla => RoundPlan { tau: 1, s: cfg.s0 },
        };
        Planner {
            scheme: cfg.scheme,
            schedule: cfg.schedule,
            basis: cfg.basis(),
            state: None,
            plan,
            probes: Vec::new(),
            fitted: None,
        }
    }

    fn settings(&self) -> RoundSettings {
        RoundSettings {
            tau: self.plan.tau,
            budget: self.scheme.compresses().then_some((self.basis, self.plan.s)),
        }
    }

    fn uses_full(&self) -> bool {
        self.scheme == Scheme::Ffl && self.schedule == Schedule::Full
    }
}

fn fallback_bounds(cfg: &ExperimentConfig, horizon: f64) -> BoundParams {
    let channel = cfg.channel();
    BoundParams {
        eta: cfg.eta,
        lipschitz: cfg.lipschitz,
        sigma1: cfg.sigma1,
        sigma2: cfg.sigma2,
        alpha: cfg
            .alpha
            .unwrap_or_else(|| f64::from(cfg.bits_per_atom) / link_rate(&channel, 0)),
        workers: cfg.workers,
        horizon,
        f_inf: cfg.f_inf,
        beta: cfg.beta,
        compute_time: cfg.sec_per_local_step,
    }
}

/// Probe telemetry at the current global model: the full training gradient
/// and the spread of a few mini-batch gradients around it.
fn probe(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    w: &ParameterSet,
    out: &RoundOutcome,
    channel: &ChannelConfig,
) -> Result<ProbeRound> {
    let (_, full) = loss_and_grad(&prep.spec, w, &prep.train.as_batch())?;
    let full = full.flatten();
    let all = Shard {
        indices: (0..prep.train.len()).collect(),
    };
    let mut rng = RngStream::derive(cfg.seed, "probe", &[out.round as u64]);
    const BATCHES: usize = 4;
    let mut spread = 0.0;
    for _ in 0..BATCHES {
        let batch = sample_minibatch(&all, &prep.train, cfg.batch_size, &mut rng)?;
        let (_, g) = loss_and_grad(&prep.spec, w, &batch)?;
        spread += g.flatten().iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let rate = (0..cfg.workers).map(|j| link_rate(channel, j)).sum::<f64>() / cfg.workers as f64;
    let atom_bits = if out.atoms_sent_total > 0 {
        out.bits_sent_total as f64 / out.atoms_sent_total as f64
    } else {
        f64::from(cfg.bits_per_atom)
    };
    Ok(ProbeRound {
        weights: w.flatten(),
        gradient: full,
        worker_terms: out.worker_terms.clone(),
        sgd_variance: spread / BATCHES as f64,
        atom_bits,
        uplink_rate_bps: rate,
    })
}

/// Run rounds until the stop rule fires.
///
/// With `stop = time` the clock is checked after each round, so a budget
/// shorter than one round still executes exactly one round. `round_cap`
/// always applies.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunResult> {
    let channel = cfg.channel();
    let ctx = RoundContext {
        spec: &prep.spec,
        train: &prep.train,
        channel: &channel,
        seed: cfg.seed,
        eta: cfg.eta,
        server_momentum: cfg.server_momentum,
        batch_size: cfg.batch_size,
        sec_per_local_step: cfg.sec_per_local_step,
        sec_per_atom_compress: cfg.sec_per_atom_compress,
    };
    let (mut server, mut workers) = initial_states(cfg, prep);
    let mut planner = Planner::new(cfg);
    let mut loss_ema = LossSmoother::new(cfg.loss_smoothing);
    let mut acc_ema = LossSmoother::new(cfg.acc_smoothing);
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut test_acc = f64::NAN;
    let mut f0 = f64::NAN;

    loop {
        let w_before = planner.uses_full().then(|| server.w.clone());
        let out = run_round(&ctx, &mut server, &mut workers, planner.settings())?;
        diagnostics.extend(out.diagnostics.iter().cloned());

        let smoothed = loss_ema.observe(out.train_loss);
        if out.round % cfg.eval_stride == 0 || records.is_empty() {
            test_acc = evaluate(&prep.spec, &server.w, &prep.test)?.1;
        }
        let smoothed_acc = acc_ema.observe(test_acc);
        records.push(RoundRecord {
            round: out.round,
            sim_time_s: out.sim_time,
            tau_k: out.tau,
            s_k: out.s,
            train_loss: out.train_loss,
            smoothed_loss: smoothed,
            test_acc,
            received_workers: out.received,
            atoms_sent_total: out.atoms_sent_total,
            round_time_s: out.round_time,
            uplink_max_s: out.uplink_max,
            downlink_s: out.downlink,
            compute_max_s: out.compute_max,
            smoothed_acc,
            expected_atoms_total: out.expected_atoms_total,
            bits_sent_total: out.bits_sent_total,
        });

        let elapsed = server.ledger.elapsed();
        let done = (cfg.stop == StopRule::Time && elapsed >= cfg.t_budget_s)
            || records.len() >= cfg.round_cap
            || (cfg.stop_at_target && smoothed_acc >= cfg.target_accuracy);
        if done {
            break;
        }

        if planner.state.is_none() {
            f0 = out.train_loss;
            planner.state = Some(cfg.scheduler_state(f0)?);
        }
        let state = planner.state.expect("set above");
        match cfg.scheme {
            Scheme::Ffl if planner.uses_full() => {
                let w = w_before.expect("cloned for full schedule");
                if planner.probes.len() < cfg.probe_rounds {
                    planner.probes.push(probe(cfg, prep, &w, &out, &channel)?);
                    if planner.probes.len() == cfg.probe_rounds {
                        let est = estimate_constants(&planner.probes, &fallback_bounds(cfg, cfg.t_budget_s));
                        if !est.from_probes {
                            diagnostics.push("too few probe rounds; using configured bound constants".into());
                        }
                        planner.fitted = Some(est.params);
                    }
                }
                if let Some(fitted) = planner.fitted {
                    let bounds = BoundParams {
                        horizon: (cfg.t_budget_s - elapsed).max(out.round_time),
                        ..fitted
                    };
                    let f = smoothed.max(bounds.f_inf);
                    let sol = optimal_full(&bounds, f, cfg.tau_ub, cfg.s_ub, planner.plan)?;
                    if let Some(d) = sol.diagnostic {
                        diagnostics.push(format!("round {}: {d}", out.round));
                    }
                    planner.plan = sol.plan;
                }
            }
            Scheme::Ffl => planner.plan = plan_next(&state, smoothed)?,
            Scheme::AdacommLike => {
                planner.plan = RoundPlan {
                    tau: plan_next(&state, smoothed)?.tau,
                    s: cfg.s0,
                };
            }
            Scheme::AtomoLike | Scheme::Fixed | Scheme::Vanilla => {}
        }
    }

    let last = records.last().expect("at least one round");
    let summary = Summary {
        scheme: cfg.scheme,
        rounds: records.len(),
        sim_time_s: last.sim_time_s,
        final_acc: last.test_acc,
        final_smoothed_acc: last.smoothed_acc,
        target_accuracy: cfg.target_accuracy,
        time_to_target_s: time_to_target(&records, cfg.target_accuracy),
        total_atoms: records.iter().map(|r| r.atoms_sent_total).sum(),
        total_uplink_bits: records.iter().map(|r| r.bits_sent_total).sum(),
        f0,
        diagnostics,
        config: cfg.clone(),
    };
    Ok(RunResult { records, summary })
}

/// Write `metrics.csv` and `summary.json` into `dir`.
pub fn write_artifacts(result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), result.metrics_csv())?;
    let json = serde_json::to_string_pretty(&result.summary)?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}
