//! Experiment loop: drives the trace through the network engine, routes
//! service requests through the scheduler and the chosen policy, merges
//! uplinked observations into the global map when the server finishes a
//! task, and collects the metrics the CLI exports.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::agent::{AgentError, DqnAgent, StateVector};
use crate::config::{ExperimentConfig, PolicyKind};
use crate::geometry::{vehicle_coverage, CoverageGrid, GridSpec, Occluder};
use crate::mapcore::{MapDatabase, MapError};
use crate::neural::{vae_train_epoch, NeuralError, OptimizerState, VaeModel};
use crate::policies::{self, LatencySample, PolicyError, RegressionModel};
use crate::scenario::{
    observe, training_signatures, ObservedObject, Trace, TraceFrame, LATENT_DIM, SIGNATURE_DIM,
};
use crate::scheduler::{Scheduler, SchedulerError};
use crate::simnet::{Engine, SimConfig, SimError, Stage};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("regression baseline pre-run produced too few samples: {0}")]
    RmDataset(String),
}

/// Pretrains the feature extractor on the synthetic signature set tied to a
/// scenario seed. Returns the model and the per-epoch mean losses.
pub fn build_vae(
    hidden: usize,
    epochs: usize,
    sample_count: usize,
    learning_rate: f64,
    scenario_seed: u64,
) -> Result<(VaeModel, Vec<f64>), NeuralError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario_seed ^ 0x766165);
    let mut model = VaeModel::init(SIGNATURE_DIM, hidden, LATENT_DIM, &mut rng);
    let samples = training_signatures(scenario_seed, sample_count);
    let mut enc_opt = OptimizerState::new(&model.encoder, learning_rate);
    let mut dec_opt = OptimizerState::new(&model.decoder, learning_rate);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        losses.push(vae_train_epoch(&mut model, &samples, &mut enc_opt, &mut dec_opt, &mut rng)?);
    }
    Ok((model, losses))
}

/// One issued offloading decision, logged for action statistics and the
/// regression baseline's training set.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecisionRecord {
    pub t_ms: i64,
    pub task_id: u64,
    pub vehicle_id: u32,
    pub action: usize,
    pub rate_bps: f64,
    pub connected: usize,
}

/// Scheduling-epoch snapshot for the coverage timeline.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoverageRow {
    pub t_ms: i64,
    pub scheduled: usize,
    pub total: usize,
    pub scheduled_ratio: f64,
    pub coverage_ratio: f64,
}

/// Data-plane quality counters. An observation counts as a success when it
/// matched the record of its own ground-truth object and the fused location
/// landed within a meter of the truth. Failures split into fragmentation
/// (spurious new record for an already-tracked object) and mis-association
/// (matched someone else's record).
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct MatchStats {
    pub observations: u64,
    pub correct_id: u64,
    pub success: u64,
    pub fragmented: u64,
    pub misassociated: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurveRow {
    pub completion_index: u64,
    pub t_ms: i64,
    pub reward: f64,
    pub epsilon: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub policy: String,
    pub seed: u64,
    pub decisions: usize,
    pub completed: usize,
    pub backoffs: u64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub mean_action: f64,
    pub scheduled_ratio_mean: f64,
    pub observations: u64,
    pub match_accuracy: f64,
    pub detection_success_rate: f64,
}

/// Read-only policy drivers for evaluation runs.
pub enum EvalPolicy<'a> {
    Head(&'a DqnAgent),
    Eo,
    Lp,
    Ro,
    Rm(&'a RegressionModel),
}

impl EvalPolicy<'_> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            EvalPolicy::Head(_) => PolicyKind::Head,
            EvalPolicy::Eo => PolicyKind::Eo,
            EvalPolicy::Lp => PolicyKind::Lp,
            EvalPolicy::Ro => PolicyKind::Ro,
            EvalPolicy::Rm(_) => PolicyKind::Rm,
        }
    }

    fn uses_scheduling(&self) -> bool {
        matches!(self, EvalPolicy::Head(_))
    }
}

/// How actions are produced during a run.
enum Decider<'p, 'a> {
    Eval(&'p mut EvalPolicy<'a>),
    Train { agent: &'p mut DqnAgent, epsilon: f64 },
}

struct VehicleRuntime {
    in_flight: Option<u64>,
    next_request_ms: i64,
    /// Time of the last fully received broadcast; sizes the next delta.
    last_sync_ms: i64,
}

pub struct Runner<'a> {
    pub config: &'a ExperimentConfig,
    pub trace: &'a Trace,
    pub vae: &'a VaeModel,
    pub engine: Engine,
    pub scheduler: Scheduler,
    pub db: MapDatabase,
    pub seed: u64,
    grid_spec: GridSpec,
    vehicles: Vec<VehicleRuntime>,
    staged: BTreeMap<u64, Vec<ObservedObject>>,
    record_truth: BTreeMap<u64, u64>,
    truth_seen: BTreeSet<u64>,
    rng: ChaCha8Rng,
    synced_frame: Option<i64>,
    pub decisions: Vec<DecisionRecord>,
    pub coverage_rows: Vec<CoverageRow>,
    pub match_stats: MatchStats,
    pub training_curve: Vec<CurveRow>,
    pub backoffs: u64,
    decisions_done: u64,
    completions_seen: u64,
    last_loss: f64,
}

impl<'a> Runner<'a> {
    pub fn new(
        config: &'a ExperimentConfig,
        trace: &'a Trace,
        vae: &'a VaeModel,
        seed: u64,
    ) -> Self {
        let sim = SimConfig { seed, ..config.sim.clone() };
        let mut engine = Engine::new(sim);
        let first = &trace.frames[0];
        for v in &first.vehicles {
            let pos = v.pose.position();
            engine.upsert_vehicle(v.id, (pos.x, pos.y), v.capability.tier);
        }
        let n = first.vehicles.len();
        Self {
            config,
            trace,
            vae,
            engine,
            scheduler: Scheduler::new(config.scheduler),
            db: MapDatabase::new(config.map),
            seed,
            grid_spec: GridSpec::centered(config.coverage_half_extent_m, config.coverage_cell_m),
            vehicles: (0..n)
                .map(|_| VehicleRuntime { in_flight: None, next_request_ms: 0, last_sync_ms: 0 })
                .collect(),
            staged: BTreeMap::new(),
            record_truth: BTreeMap::new(),
            truth_seen: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x72756e),
            synced_frame: None,
            decisions: Vec::new(),
            coverage_rows: Vec::new(),
            match_stats: MatchStats::default(),
            training_curve: Vec::new(),
            backoffs: 0,
            decisions_done: 0,
            completions_seen: 0,
            last_loss: 0.0,
        }
    }

    /// Frame for the current simulation time; long runs wrap around the
    /// trace.
    fn current_frame(&self) -> &TraceFrame {
        let period = self.trace.scenario.frame_period_ms;
        let span = period * self.trace.frames.len() as i64;
        let t = self.engine.now_ms().rem_euclid(span.max(1));
        self.trace.frame_at(t)
    }

    fn sync_frame(&mut self) {
        let frame_t = self.current_frame().t_ms;
        if self.synced_frame == Some(frame_t) {
            return;
        }
        let updates: Vec<(u32, (f64, f64), f64)> = self
            .current_frame()
            .vehicles
            .iter()
            .map(|v| {
                let p = v.pose.position();
                (v.id, (p.x, p.y), v.capability.tier)
            })
            .collect();
        for (id, pos, tier) in updates {
            self.engine.upsert_vehicle(id, pos, tier);
        }
        self.synced_frame = Some(frame_t);
    }

    fn coverage_snapshot(&self, frame: &TraceFrame) -> BTreeMap<u32, CoverageGrid> {
        let occluders: Vec<Occluder> = frame.objects.iter().map(|o| o.occluder()).collect();
        frame
            .vehicles
            .iter()
            .map(|v| {
                (v.id, vehicle_coverage(&v.pose, &self.trace.intrinsics, &occluders, self.grid_spec))
            })
            .collect()
    }

    fn run_epoch_scheduling(&mut self, scheduling: bool) -> Result<(), RunnerError> {
        let now = self.engine.now_ms();
        if !self.scheduler.epoch_due(now) {
            return Ok(());
        }
        let frame = self.current_frame().clone();
        let total = frame.vehicles.len();
        if scheduling {
            let coverages = self.coverage_snapshot(&frame);
            self.scheduler.reschedule(&coverages, now)?;
            let scheduled_ids: Vec<u32> = self
                .scheduler
                .scheduled_map()
                .iter()
                .filter(|(_, s)| **s)
                .map(|(id, _)| *id)
                .collect();
            let union_area = |ids: &[u32]| -> f64 {
                let mut it = ids.iter();
                let Some(first) = it.next() else { return 0.0 };
                let mut acc = coverages[first].clone();
                for id in it {
                    acc.union_with(&coverages[id]).expect("same grid spec");
                }
                crate::geometry::grid_area(&acc)
            };
            let all_ids: Vec<u32> = coverages.keys().copied().collect();
            let total_area = union_area(&all_ids);
            let scheduled_area = union_area(&scheduled_ids);
            self.coverage_rows.push(CoverageRow {
                t_ms: now,
                scheduled: scheduled_ids.len(),
                total,
                scheduled_ratio: scheduled_ids.len() as f64 / total.max(1) as f64,
                coverage_ratio: if total_area > 0.0 { scheduled_area / total_area } else { 1.0 },
            });
        } else {
            // Baselines schedule every request.
            self.scheduler.reschedule_all(&frame, now);
            self.coverage_rows.push(CoverageRow {
                t_ms: now,
                scheduled: total,
                total,
                scheduled_ratio: 1.0,
                coverage_ratio: 1.0,
            });
        }
        Ok(())
    }

    fn build_state(&self, vehicle_id: u32) -> Result<StateVector, RunnerError> {
        let frame = self.current_frame();
        let cap = frame
            .vehicles
            .iter()
            .find(|v| v.id == vehicle_id)
            .map(|v| v.capability)
            .expect("vehicle in frame");
        Ok(StateVector {
            rss_dbm: self.engine.rss_dbm(vehicle_id)?,
            cpu_count: cap.cpu_count,
            cpu_freq_ghz: cap.cpu_freq_ghz,
            mem_gb: cap.mem_gb,
            gpu_cores: cap.gpu_cores,
            gpu_freq_ghz: cap.gpu_freq_ghz,
            server_capability: self.config.sim.server_speed_factor,
            wireless_bandwidth_hz: self.config.sim.uplink_bw_hz,
            connected_vehicles: frame.vehicles.len() as f64,
            queued_tasks: self.engine.queued_count() as f64,
        })
    }

    /// Issues requests for idle vehicles, routing scheduled ones through the
    /// decider and backing off the rest.
    fn issue_requests(
        &mut self,
        decider: &mut Decider<'_, '_>,
        max_decisions: Option<u64>,
    ) -> Result<(), RunnerError> {
        let now = self.engine.now_ms();
        let ids: Vec<u32> = self.current_frame().vehicles.iter().map(|v| v.id).collect();
        for vehicle_id in ids {
            if let Some(cap) = max_decisions {
                if self.decisions_done >= cap {
                    return Ok(());
                }
            }
            let rt = &self.vehicles[vehicle_id as usize];
            if rt.in_flight.is_some() || rt.next_request_ms > now {
                continue;
            }
            // Unscheduled vehicles back off without touching the policy.
            if !self.scheduler.is_scheduled(vehicle_id) {
                self.vehicles[vehicle_id as usize].next_request_ms =
                    now + self.scheduler.config.backoff_ms;
                self.backoffs += 1;
                continue;
            }
            let state = self.build_state(vehicle_id)?;
            let action = match decider {
                Decider::Train { agent, epsilon } => agent.act(&state, *epsilon, &mut self.rng)?,
                Decider::Eval(EvalPolicy::Head(agent)) => agent.act(&state, 0.0, &mut self.rng)?,
                Decider::Eval(EvalPolicy::Eo) => policies::eo(0.0, 0.0),
                Decider::Eval(EvalPolicy::Lp) => policies::lp(0.0, 0.0),
                Decider::Eval(EvalPolicy::Ro) => policies::ro(&mut self.rng),
                Decider::Eval(EvalPolicy::Rm(model)) => {
                    let rate = self.engine.estimated_rate_bps(vehicle_id)?;
                    policies::rm_decide(model, rate, state.connected_vehicles)
                }
            };
            let frame = self.current_frame().clone();
            let observed = observe(
                &frame,
                vehicle_id,
                &self.trace.intrinsics,
                self.vae,
                &self.config.noise,
                &mut self.rng,
            );
            // The broadcast leg carries the database records updated since
            // this vehicle last synced.
            let n_delta =
                self.db.delta_since(self.vehicles[vehicle_id as usize].last_sync_ms).len();
            let task_id = self.engine.submit(
                vehicle_id,
                action,
                &self.config.profiles,
                observed.len(),
                n_delta,
            )?;
            let rate_bps = self.engine.estimated_rate_bps(vehicle_id)?;
            self.decisions.push(DecisionRecord {
                t_ms: now,
                task_id,
                vehicle_id,
                action,
                rate_bps,
                connected: frame.vehicles.len(),
            });
            if let Decider::Train { agent, .. } = decider {
                let features = agent.features(&state);
                agent.note_pending(vehicle_id, features, action, now);
            }
            self.staged.insert(task_id, observed);
            self.vehicles[vehicle_id as usize].in_flight = Some(task_id);
            self.decisions_done += 1;
        }
        Ok(())
    }

    fn merge_task_observations(&mut self, task_id: u64) -> Result<(), RunnerError> {
        let Some(observed) = self.staged.remove(&task_id) else { return Ok(()) };
        if observed.is_empty() {
            return Ok(());
        }
        let batch: Vec<_> = observed.iter().map(|o| o.observation.clone()).collect();
        let outcomes = self.db.ingest(&batch)?;
        for (obs, (record_id, was_new)) in observed.iter().zip(outcomes) {
            self.match_stats.observations += 1;
            let correct = if was_new {
                // A fresh record is right only for a never-seen object.
                !self.truth_seen.contains(&obs.truth_id)
            } else {
                self.record_truth.get(&record_id) == Some(&obs.truth_id)
            };
            if !correct {
                if was_new {
                    self.match_stats.fragmented += 1;
                } else {
                    self.match_stats.misassociated += 1;
                }
            }
            if was_new {
                self.record_truth.insert(record_id, obs.truth_id);
                self.truth_seen.insert(obs.truth_id);
            }
            if correct {
                self.match_stats.correct_id += 1;
                let fused = self.db.get(record_id).expect("record exists").geo_location;
                if fused.dist(&obs.truth_position) < 1.0 {
                    self.match_stats.success += 1;
                }
            }
        }
        Ok(())
    }

    /// Evaluation run with a frozen policy for `duration_ms` of simulated
    /// time.
    pub fn run_eval(
        &mut self,
        policy: &mut EvalPolicy,
        duration_ms: i64,
    ) -> Result<(), RunnerError> {
        let scheduling = policy.uses_scheduling();
        while self.engine.now_ms() < duration_ms {
            self.sync_frame();
            self.run_epoch_scheduling(scheduling)?;
            self.issue_requests(&mut Decider::Eval(policy), None)?;
            let events = self.engine.tick();
            for ev in events {
                if ev.from == Stage::Serving && ev.to == Stage::Broadcast {
                    self.merge_task_observations(ev.task_id)?;
                }
                if ev.to == Stage::Done {
                    let rt = &mut self.vehicles[ev.vehicle_id as usize];
                    rt.in_flight = None;
                    rt.next_request_ms = self.engine.now_ms() + self.config.eval.request_gap_ms;
                    rt.last_sync_ms = self.engine.now_ms();
                }
            }
            if self.engine.now_ms() % 10_000 == 0 {
                self.db.evict(self.engine.now_ms(), self.config.map.ttl_ms);
            }
        }
        Ok(())
    }

    /// Online training run: HEAD scheduling plus epsilon-greedy decisions,
    /// delayed rewards resolved on completion, minibatch updates every
    /// `train_every` completions. Stops issuing after `train_steps`
    /// decisions and drains the in-flight tasks.
    pub fn run_train(
        &mut self,
        agent: &mut DqnAgent,
        train_steps: u64,
        train_every: u64,
        mut on_snapshot: impl FnMut(u64, &DqnAgent),
        snapshot_every: u64,
    ) -> Result<(), RunnerError> {
        let drain_budget_ms = 120_000;
        let mut drain_deadline: Option<i64> = None;
        loop {
            self.sync_frame();
            self.run_epoch_scheduling(true)?;
            if self.decisions_done < train_steps {
                let epsilon = agent.current_epsilon();
                self.issue_requests(&mut Decider::Train { agent, epsilon }, Some(train_steps))?;
            } else if drain_deadline.is_none() {
                drain_deadline = Some(self.engine.now_ms() + drain_budget_ms);
            }
            let events = self.engine.tick();
            for ev in events {
                if ev.from == Stage::Serving && ev.to == Stage::Broadcast {
                    self.merge_task_observations(ev.task_id)?;
                }
                if ev.to == Stage::Done {
                    let vehicle = ev.vehicle_id;
                    let rt = &mut self.vehicles[vehicle as usize];
                    rt.in_flight = None;
                    rt.next_request_ms = self.engine.now_ms();
                    rt.last_sync_ms = self.engine.now_ms();
                    let task = self.engine.task(ev.task_id).expect("completed task exists");
                    let latency_ms = task.t_completed.expect("done task has a stamp") - task.t_created;
                    let latency_s = latency_ms as f64 / 1000.0;
                    let next_state = self.build_state(vehicle)?;
                    let features = agent.features(&next_state);
                    agent.complete_reward(vehicle, latency_s, features)?;
                    self.completions_seen += 1;
                    if self.completions_seen % train_every == 0
                        && agent.buffer.len() >= agent.config.batch_size
                    {
                        self.last_loss = agent.train_step(&mut self.rng)?;
                    }
                    self.training_curve.push(CurveRow {
                        completion_index: self.completions_seen,
                        t_ms: self.engine.now_ms(),
                        reward: -latency_s,
                        epsilon: agent.current_epsilon(),
                        loss: self.last_loss,
                    });
                    if snapshot_every > 0 && self.completions_seen % snapshot_every == 0 {
                        on_snapshot(self.completions_seen, agent);
                    }
                }
            }
            if self.engine.now_ms() % 10_000 == 0 {
                self.db.evict(self.engine.now_ms(), self.config.map.ttl_ms);
            }
            let drained = self.engine.in_flight() == 0 && self.decisions_done >= train_steps;
            let timed_out = drain_deadline.is_some_and(|d| self.engine.now_ms() >= d);
            if drained || timed_out {
                break;
            }
        }
        Ok(())
    }

    pub fn summary(&self, policy: &str) -> RunSummary {
        let mut latencies: Vec<f64> =
            self.engine.completions.iter().map(|c| c.latency_ms as f64).collect();
        latencies.sort_by(|a, b| a.total_cmp(b));
        let mean = if latencies.is_empty() {
            0.0
        } else {
            latencies.iter().sum::<f64>() / latencies.len() as f64
        };
        let pct = |p: f64| -> f64 {
            if latencies.is_empty() {
                return 0.0;
            }
            let idx = ((latencies.len() - 1) as f64 * p).round() as usize;
            latencies[idx]
        };
        let mean_action = if self.decisions.is_empty() {
            0.0
        } else {
            self.decisions.iter().map(|d| d.action as f64).sum::<f64>()
                / self.decisions.len() as f64
        };
        let sched_mean = if self.coverage_rows.is_empty() {
            1.0
        } else {
            self.coverage_rows.iter().map(|r| r.scheduled_ratio).sum::<f64>()
                / self.coverage_rows.len() as f64
        };
        RunSummary {
            policy: policy.to_string(),
            seed: self.seed,
            decisions: self.decisions.len(),
            completed: self.engine.completions.len(),
            backoffs: self.backoffs,
            mean_latency_ms: mean,
            p50_latency_ms: pct(0.5),
            p95_latency_ms: pct(0.95),
            mean_action,
            scheduled_ratio_mean: sched_mean,
            observations: self.match_stats.observations,
            match_accuracy: safe_ratio(self.match_stats.correct_id, self.match_stats.observations),
            detection_success_rate: safe_ratio(
                self.match_stats.success,
                self.match_stats.observations,
            ),
        }
    }

    /// Latency samples for the regression baseline: joins decision records
    /// with completions on the task id.
    pub fn latency_samples(&self) -> Vec<LatencySample> {
        let by_task: BTreeMap<u64, &DecisionRecord> =
            self.decisions.iter().map(|d| (d.task_id, d)).collect();
        self.engine
            .completions
            .iter()
            .filter_map(|c| {
                by_task.get(&c.task_id).map(|d| LatencySample {
                    rate_bps: d.rate_bps,
                    n_vehicles: d.connected as f64,
                    action: c.decision,
                    latency_s: c.latency_ms as f64 / 1000.0,
                })
            })
            .collect()
    }
}

fn safe_ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Fits the regression baseline from random-policy pre-runs under varied
/// load. The quadratic vehicle-count features need at least three distinct
/// counts, so the pre-runs sweep scaled-down variants of the scenario; the
/// horizon extends itself until every action has enough completed samples.
pub fn fit_rm(
    config: &ExperimentConfig,
    vae: &VaeModel,
    seed: u64,
) -> Result<RegressionModel, RunnerError> {
    let n = config.scenario.n_vehicles;
    let mut counts: BTreeSet<usize> = [(n / 4).max(1), (n / 2).max(1), n].into();
    let mut extra = n;
    while counts.len() < 3 {
        extra += 2;
        counts.insert(extra);
    }
    let base = config.eval.rm_fit_duration_ms.max(1000);
    let mut horizon = base;
    loop {
        let mut samples = Vec::new();
        for (i, count) in counts.iter().enumerate() {
            let scenario = crate::scenario::Scenario { n_vehicles: *count, ..config.scenario };
            let trace = crate::scenario::generate(&scenario);
            let mut runner =
                Runner::new(config, &trace, vae, seed ^ (0x726d66 + i as u64));
            runner.run_eval(&mut EvalPolicy::Ro, horizon)?;
            samples.extend(runner.latency_samples());
        }
        match policies::rm_fit(&samples) {
            Ok(model) => return Ok(model),
            Err(PolicyError::InsufficientSamples { .. }) if horizon < 4 * base => {
                horizon += base;
            }
            Err(PolicyError::InsufficientSamples { action, got, want }) => {
                return Err(RunnerError::RmDataset(format!(
                    "action {action}: {got} of {want} completions after {horizon} ms"
                )));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

impl Scheduler {
    /// Marks every vehicle in the frame as scheduled (baseline behaviour).
    fn reschedule_all(&mut self, frame: &TraceFrame, now_ms: i64) {
        let map = frame.vehicles.iter().map(|v| (v.id, true)).collect();
        self.set_schedule(map, now_ms);
    }
}
