//! Time-driven network and compute engine. Tasks walk through onboard
//! compute, uplink transfer, a single FIFO queue feeding parallel servers,
//! and the broadcast downlink; one stage transition happens per tick
//! boundary. Wireless rates come from the urban-micro street-canyon
//! line-of-sight path loss with equal bandwidth sharing among active
//! transmitters.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{ProfileTable, TaskRequirements};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("decision {got} outside 0..{max}")]
    UnknownDecision { got: usize, max: usize },
    #[error("vehicle {0} is not registered")]
    UnknownVehicle(u32),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub tick_ms: i64,
    pub uplink_bw_hz: f64,
    pub downlink_bw_hz: f64,
    pub carrier_ghz: f64,
    pub bs_position: (f64, f64),
    pub bs_height_m: f64,
    pub ue_height_m: f64,
    pub tx_power_dbm_min: f64,
    pub tx_power_dbm_max: f64,
    pub noise_dbm_per_hz: f64,
    pub server_count: usize,
    /// Server module times in the profiles are for a reference server; the
    /// edge server runs this many times faster.
    pub server_speed_factor: f64,
    /// Transmit powers are re-drawn on this period to emulate channel
    /// dynamics.
    pub tx_redraw_period_ms: i64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick_ms: 1,
            uplink_bw_hz: 1e6,
            downlink_bw_hz: 1e6,
            carrier_ghz: 3.5,
            bs_position: (0.0, 0.0),
            bs_height_m: 10.0,
            ue_height_m: 1.5,
            tx_power_dbm_min: 1.0,
            tx_power_dbm_max: 22.0,
            noise_dbm_per_hz: -174.0,
            server_count: 1,
            server_speed_factor: 4.0,
            tx_redraw_period_ms: 1000,
            seed: 1,
        }
    }
}

/// Urban-micro street-canyon line-of-sight path loss in dB. Below the
/// breakpoint distance PL = 32.4 + 21 log10(d3D) + 20 log10(f_GHz); beyond
/// it the 40 log10(d3D) expression with the antenna-height correction
/// applies. d3D combines the horizontal distance with the antenna heights.
pub fn path_loss_db(d2d_m: f64, cfg: &SimConfig) -> f64 {
    let d2d = d2d_m.max(1.0);
    let dh = cfg.bs_height_m - cfg.ue_height_m;
    let d3d = (d2d * d2d + dh * dh).sqrt();
    let f_ghz = cfg.carrier_ghz;
    // Breakpoint from effective antenna heights (1 m environment height).
    let h_bs_eff = (cfg.bs_height_m - 1.0).max(0.0);
    let h_ut_eff = (cfg.ue_height_m - 1.0).max(0.0);
    let d_bp = 4.0 * h_bs_eff * h_ut_eff * (f_ghz * 1e9) / 299_792_458.0;
    if d2d <= d_bp || d_bp <= 0.0 {
        32.4 + 21.0 * d3d.log10() + 20.0 * f_ghz.log10()
    } else {
        32.4 + 40.0 * d3d.log10() + 20.0 * f_ghz.log10() - 9.5 * (d_bp * d_bp + dh * dh).log10()
    }
}

/// Shannon rate over a bandwidth share: SNR over the thermal noise floor of
/// the share, rate = share * log2(1 + snr).
pub fn data_rate_bps(tx_dbm: f64, pl_db: f64, share_hz: f64, cfg: &SimConfig) -> f64 {
    debug_assert!(share_hz > 0.0);
    let noise_dbm = cfg.noise_dbm_per_hz + 10.0 * share_hz.log10();
    let snr_db = tx_dbm - pl_db - noise_dbm;
    share_hz * (1.0 + 10f64.powf(snr_db / 10.0)).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Onboard,
    Uplink,
    Queued,
    Serving,
    Broadcast,
    Done,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Onboard => "onboard",
            Stage::Uplink => "uplink",
            Stage::Queued => "queued",
            Stage::Serving => "serving",
            Stage::Broadcast => "broadcast",
            Stage::Done => "done",
        };
        f.write_str(s)
    }
}

/// One offloading job in flight.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: u64,
    pub vehicle_id: u32,
    pub decision: usize,
    pub remaining_onboard_ms: f64,
    pub uplink_bits_remaining: f64,
    pub server_ms_remaining: f64,
    pub broadcast_bits_remaining: f64,
    pub t_created: i64,
    pub t_completed: Option<i64>,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy)]
pub struct VehicleLink {
    pub position: (f64, f64),
    pub capability_factor: f64,
    pub tx_power_dbm: f64,
}

/// Stage-transition event, one line in the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t_ms: i64,
    pub task_id: u64,
    pub vehicle_id: u32,
    pub from: Stage,
    pub to: Stage,
}

impl Event {
    pub fn to_line(&self) -> String {
        format!("{},{},{},{}->{}", self.t_ms, self.task_id, self.vehicle_id, self.from, self.to)
    }
}

/// Completed-task metric record, one row in the metrics file. The task id
/// is kept for joins but not exported to the CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionRecord {
    pub task_id: u64,
    pub vehicle_id: u32,
    pub decision: usize,
    pub latency_ms: i64,
    pub created_ms: i64,
}

#[derive(Debug, Default)]
struct ServerQueue {
    fifo: VecDeque<u64>,
    serving: Vec<u64>,
}

pub struct Engine {
    pub config: SimConfig,
    now_ms: i64,
    tasks: BTreeMap<u64, Task>,
    active: Vec<u64>,
    vehicles: BTreeMap<u32, VehicleLink>,
    queue: ServerQueue,
    next_task_id: u64,
    submitted: u64,
    completed: u64,
    rng: ChaCha8Rng,
    pub event_log: Vec<Event>,
    pub completions: Vec<CompletionRecord>,
}

impl Engine {
    pub fn new(config: SimConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x73696d);
        Self {
            config,
            now_ms: 0,
            tasks: BTreeMap::new(),
            active: Vec::new(),
            vehicles: BTreeMap::new(),
            queue: ServerQueue::default(),
            next_task_id: 0,
            submitted: 0,
            completed: 0,
            rng,
            event_log: Vec::new(),
            completions: Vec::new(),
        }
    }

    pub fn now_ms(&self) -> i64 {
        self.now_ms
    }

    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    pub fn in_flight(&self) -> u64 {
        self.submitted - self.completed
    }

    pub fn queued_count(&self) -> usize {
        self.queue.fifo.len()
    }

    pub fn task(&self, id: u64) -> Option<&Task> {
        self.tasks.get(&id)
    }

    /// Registers or moves a vehicle. Transmit power is drawn on first sight
    /// and re-drawn periodically by `tick`.
    pub fn upsert_vehicle(&mut self, id: u32, position: (f64, f64), capability_factor: f64) {
        let (min, max) = (self.config.tx_power_dbm_min, self.config.tx_power_dbm_max);
        match self.vehicles.get_mut(&id) {
            Some(v) => {
                v.position = position;
                v.capability_factor = capability_factor;
            }
            None => {
                let tx_power_dbm = self.rng.gen_range(min..=max);
                self.vehicles.insert(id, VehicleLink { position, capability_factor, tx_power_dbm });
            }
        }
    }

    pub fn vehicle(&self, id: u32) -> Option<&VehicleLink> {
        self.vehicles.get(&id)
    }

    fn distance_to_bs(&self, v: &VehicleLink) -> f64 {
        let (dx, dy) = (v.position.0 - self.config.bs_position.0, v.position.1 - self.config.bs_position.1);
        (dx * dx + dy * dy).sqrt()
    }

    /// Received signal strength at the base station for one vehicle:
    /// transmit power minus path loss.
    pub fn rss_dbm(&self, vehicle_id: u32) -> Result<f64, SimError> {
        let v = self.vehicles.get(&vehicle_id).ok_or(SimError::UnknownVehicle(vehicle_id))?;
        Ok(v.tx_power_dbm - path_loss_db(self.distance_to_bs(v), &self.config))
    }

    /// Current per-transmitter uplink share.
    pub fn uplink_share_hz(&self) -> f64 {
        let n = self.active_in_stage(Stage::Uplink).max(1);
        self.config.uplink_bw_hz / n as f64
    }

    /// Uplink rate a vehicle would see at the current bandwidth share.
    pub fn estimated_rate_bps(&self, vehicle_id: u32) -> Result<f64, SimError> {
        let v = self.vehicles.get(&vehicle_id).ok_or(SimError::UnknownVehicle(vehicle_id))?;
        let pl = path_loss_db(self.distance_to_bs(v), &self.config);
        Ok(data_rate_bps(v.tx_power_dbm, pl, self.uplink_share_hz(), &self.config))
    }

    fn active_in_stage(&self, stage: Stage) -> usize {
        self.active.iter().filter(|id| self.tasks[id].stage == stage).count()
    }

    /// Creates a task for a decision, sampling its work quantities from the
    /// profile table, and starts latency accounting at the current tick.
    pub fn submit(
        &mut self,
        vehicle_id: u32,
        decision: usize,
        profiles: &ProfileTable,
        n_objects: usize,
        n_delta_records: usize,
    ) -> Result<u64, SimError> {
        if decision >= profiles.n_decisions() {
            return Err(SimError::UnknownDecision { got: decision, max: profiles.n_decisions() - 1 });
        }
        if !self.vehicles.contains_key(&vehicle_id) {
            return Err(SimError::UnknownVehicle(vehicle_id));
        }
        let req: TaskRequirements =
            profiles.sample(decision, n_objects, n_delta_records, &mut self.rng);
        let id = self.next_task_id;
        self.next_task_id += 1;
        self.tasks.insert(
            id,
            Task {
                id,
                vehicle_id,
                decision,
                remaining_onboard_ms: req.onboard_ms,
                uplink_bits_remaining: req.uplink_bits,
                server_ms_remaining: req.server_ms,
                broadcast_bits_remaining: req.broadcast_bits,
                t_created: self.now_ms,
                t_completed: None,
                stage: Stage::Onboard,
            },
        );
        self.active.push(id);
        self.submitted += 1;
        Ok(id)
    }

    /// Advances the world by one tick and returns the boundary events.
    /// Work decrements use the stage held at tick start; each task then
    /// takes at most one stage transition; freed server slots admit queued
    /// tasks in FIFO order.
    pub fn tick(&mut self) -> Vec<Event> {
        self.now_ms += self.config.tick_ms;
        let tick_s = self.config.tick_ms as f64 / 1000.0;

        if self.config.tx_redraw_period_ms > 0 && self.now_ms % self.config.tx_redraw_period_ms == 0
        {
            let (min, max) = (self.config.tx_power_dbm_min, self.config.tx_power_dbm_max);
            for v in self.vehicles.values_mut() {
                v.tx_power_dbm = self.rng.gen_range(min..=max);
            }
        }

        let n_uplink = self.active_in_stage(Stage::Uplink);
        let n_broadcast = self.active_in_stage(Stage::Broadcast);
        let up_share = self.config.uplink_bw_hz / n_uplink.max(1) as f64;
        let down_share = self.config.downlink_bw_hz / n_broadcast.max(1) as f64;

        // Work pass.
        for id in &self.active {
            let task = self.tasks.get_mut(id).unwrap();
            let link = self.vehicles[&task.vehicle_id];
            match task.stage {
                Stage::Onboard => {
                    task.remaining_onboard_ms -=
                        self.config.tick_ms as f64 * link.capability_factor;
                }
                Stage::Uplink => {
                    let (dx, dy) = (
                        link.position.0 - self.config.bs_position.0,
                        link.position.1 - self.config.bs_position.1,
                    );
                    let pl = path_loss_db((dx * dx + dy * dy).sqrt(), &self.config);
                    let rate = data_rate_bps(link.tx_power_dbm, pl, up_share, &self.config);
                    task.uplink_bits_remaining -= rate * tick_s;
                }
                Stage::Serving => {
                    task.server_ms_remaining -=
                        self.config.tick_ms as f64 * self.config.server_speed_factor;
                }
                Stage::Broadcast => {
                    let (dx, dy) = (
                        link.position.0 - self.config.bs_position.0,
                        link.position.1 - self.config.bs_position.1,
                    );
                    let pl = path_loss_db((dx * dx + dy * dy).sqrt(), &self.config);
                    let rate = data_rate_bps(link.tx_power_dbm, pl, down_share, &self.config);
                    task.broadcast_bits_remaining -= rate * tick_s;
                }
                Stage::Queued | Stage::Done => {}
            }
        }

        // Transition pass: at most one stage step per task per tick.
        let mut events = Vec::new();
        let mut finished = Vec::new();
        for id in self.active.clone() {
            let task = self.tasks.get_mut(&id).unwrap();
            let from = task.stage;
            let to = match task.stage {
                Stage::Onboard if task.remaining_onboard_ms <= 0.0 => Stage::Uplink,
                Stage::Uplink if task.uplink_bits_remaining <= 0.0 => Stage::Queued,
                Stage::Serving if task.server_ms_remaining <= 0.0 => Stage::Broadcast,
                Stage::Broadcast if task.broadcast_bits_remaining <= 0.0 => Stage::Done,
                _ => continue,
            };
            task.stage = to;
            match to {
                Stage::Queued => self.queue.fifo.push_back(id),
                Stage::Broadcast => {
                    self.queue.serving.retain(|s| *s != id);
                }
                Stage::Done => {
                    task.t_completed = Some(self.now_ms);
                    finished.push(id);
                    self.completions.push(CompletionRecord {
                        task_id: id,
                        vehicle_id: task.vehicle_id,
                        decision: task.decision,
                        latency_ms: self.now_ms - task.t_created,
                        created_ms: task.t_created,
                    });
                }
                _ => {}
            }
            events.push(Event { t_ms: self.now_ms, task_id: id, vehicle_id: task.vehicle_id, from, to });
        }
        for id in finished {
            self.active.retain(|a| *a != id);
            self.completed += 1;
        }

        // FIFO admission into free server slots, including tasks queued this
        // same tick.
        while self.queue.serving.len() < self.config.server_count {
            let Some(id) = self.queue.fifo.pop_front() else { break };
            let task = self.tasks.get_mut(&id).unwrap();
            debug_assert_eq!(task.stage, Stage::Queued);
            task.stage = Stage::Serving;
            self.queue.serving.push(id);
            events.push(Event {
                t_ms: self.now_ms,
                task_id: id,
                vehicle_id: task.vehicle_id,
                from: Stage::Queued,
                to: Stage::Serving,
            });
        }

        debug_assert_eq!(self.active.len() as u64, self.in_flight(), "task conservation");
        self.event_log.extend(events.iter().cloned());
        events
    }

    /// Runs ticks until `t_ms`.
    pub fn run_until(&mut self, t_ms: i64) -> Vec<Event> {
        let mut all = Vec::new();
        while self.now_ms < t_ms {
            all.extend(self.tick());
        }
        all
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("vehicle_id,decision,latency_ms,created_ms\n");
        for c in &self.completions {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.vehicle_id, c.decision, c.latency_ms, c.created_ms
            ));
        }
        out
    }

    pub fn event_log_text(&self) -> String {
        let mut out = String::new();
        for e in &self.event_log {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }
}
