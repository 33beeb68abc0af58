//! DQN offloading policy: epsilon-greedy action selection, prioritized
//! experience replay over a sum tree, a slowly tracking target network, and
//! bookkeeping for rewards that arrive only when a task completes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{DenseNet, Gradients, NeuralError, OptimizerState, DEFAULT_LEAKY_SLOPE};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("replay buffer holds {got} transitions, batch needs {want}")]
    InsufficientBuffer { got: usize, want: usize },
    #[error("no pending record for vehicle {0}")]
    UnknownPending(u32),
    #[error("target and online networks have different architectures")]
    ArchitectureMismatch,
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("checkpoint file is malformed: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const STATE_DIM: usize = 10;

/// Raw observation of one offloading request: vehicle status, server status,
/// and system workload.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StateVector {
    pub rss_dbm: f64,
    pub cpu_count: f64,
    pub cpu_freq_ghz: f64,
    pub mem_gb: f64,
    pub gpu_cores: f64,
    pub gpu_freq_ghz: f64,
    pub server_capability: f64,
    pub wireless_bandwidth_hz: f64,
    pub connected_vehicles: f64,
    pub queued_tasks: f64,
}

impl StateVector {
    fn raw(&self) -> [f64; STATE_DIM] {
        [
            self.rss_dbm,
            self.cpu_count,
            self.cpu_freq_ghz,
            self.mem_gb,
            self.gpu_cores,
            self.gpu_freq_ghz,
            self.server_capability,
            self.wireless_bandwidth_hz,
            self.connected_vehicles,
            self.queued_tasks,
        ]
    }
}

/// Per-field min/max used to map every state field into [-1, 1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormalizationBounds {
    pub min: [f64; STATE_DIM],
    pub max: [f64; STATE_DIM],
}

impl Default for NormalizationBounds {
    fn default() -> Self {
        Self {
            min: [-110.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            max: [-20.0, 16.0, 4.0, 32.0, 1024.0, 2.0, 8.0, 5e6, 100.0, 64.0],
        }
    }
}

impl NormalizationBounds {
    pub fn normalize(&self, s: &StateVector) -> Vec<f64> {
        s.raw()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let span = self.max[i] - self.min[i];
                (2.0 * (v - self.min[i]) / span - 1.0).clamp(-1.0, 1.0)
            })
            .collect()
    }
}

/// One replay record. `priority` is the raw stored priority; the buffer
/// samples proportionally to priority^alpha.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub priority: f64,
}

/// State-action pair parked until its task completes and the latency reward
/// becomes known.
#[derive(Debug, Clone)]
pub struct PendingRecord {
    pub vehicle_id: u32,
    pub state: Vec<f64>,
    pub action: usize,
    pub issue_time_ms: i64,
}

/// Prefix-sum tree over per-item sampling weights. Leaf slots are padded to
/// the next power of two; unused leaves carry zero weight.
#[derive(Debug, Clone)]
struct SumTree {
    capacity: usize,
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self { capacity, leaves, nodes: vec![0.0; 2 * leaves] }
    }

    fn set(&mut self, idx: usize, weight: f64) {
        debug_assert!(idx < self.capacity);
        let mut i = idx + self.leaves;
        self.nodes[i] = weight;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    fn weight(&self, idx: usize) -> f64 {
        self.nodes[idx + self.leaves]
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Index whose cumulative-weight interval contains `target`.
    fn find(&self, mut target: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = self.nodes[2 * i];
            if target < left {
                i = 2 * i;
            } else {
                target -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

/// Ring buffer of transitions sampled proportionally to priority^alpha.
#[derive(Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    write_pos: usize,
    tree: SumTree,
    pub alpha: f64,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        assert!(capacity > 0);
        Self {
            items: Vec::with_capacity(capacity),
            write_pos: 0,
            tree: SumTree::new(capacity),
            alpha,
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.tree.capacity
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.items[idx]
    }

    /// Largest priority currently assigned; new samples enter at this value.
    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn push(&mut self, mut t: Transition) -> usize {
        t.priority = t.priority.max(f64::MIN_POSITIVE);
        let idx = if self.items.len() < self.capacity() {
            self.items.push(t);
            self.items.len() - 1
        } else {
            let idx = self.write_pos;
            self.items[idx] = t;
            idx
        };
        self.write_pos = (idx + 1) % self.capacity();
        self.refresh_weight(idx);
        idx
    }

    pub fn set_priority(&mut self, idx: usize, priority: f64) {
        self.items[idx].priority = priority.max(f64::MIN_POSITIVE);
        self.refresh_weight(idx);
    }

    fn refresh_weight(&mut self, idx: usize) {
        let p = self.items[idx].priority;
        self.max_priority = self.max_priority.max(p);
        self.tree.set(idx, p.powf(self.alpha));
    }

    /// Exact sampling probability of item `idx` under the current weights.
    pub fn probability(&self, idx: usize) -> f64 {
        self.tree.weight(idx) / self.tree.total()
    }

    pub fn total_weight(&self) -> f64 {
        self.tree.total()
    }

    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        let total = self.tree.total();
        debug_assert!(total > 0.0, "sampling from an empty buffer");
        let idx = self.tree.find(rng.gen_range(0.0..total));
        idx.min(self.items.len() - 1)
    }

    pub fn sample_batch(&self, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..batch).map(|_| self.sample_index(rng)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AgentConfig {
    pub n_actions: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Priority exponent.
    pub alpha: f64,
    pub priority_floor: f64,
    /// Polyak coefficient for the target network.
    pub tau: f64,
    /// Optional periodic hard copy (in train steps) instead of pure Polyak.
    pub hard_copy_every: Option<u64>,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Decision steps over which epsilon decays linearly.
    pub epsilon_decay_steps: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            n_actions: 5,
            hidden: vec![256, 256],
            gamma: 0.9,
            learning_rate: 5e-4,
            batch_size: 512,
            buffer_capacity: 100_000,
            alpha: 0.6,
            priority_floor: 1e-3,
            tau: 0.005,
            hard_copy_every: None,
            epsilon_start: 0.5,
            epsilon_end: 0.1,
            epsilon_decay_steps: 100_000,
        }
    }
}

/// Linear epsilon decay hitting both endpoints exactly.
pub fn epsilon_at(step: u64, cfg: &AgentConfig) -> f64 {
    if step >= cfg.epsilon_decay_steps {
        return cfg.epsilon_end;
    }
    let frac = step as f64 / cfg.epsilon_decay_steps as f64;
    cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac
}

/// Epsilon-greedy over the online network. Ties resolve to the lowest
/// action index.
pub fn select_action(
    qnet: &DenseNet,
    state: &[f64],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<usize, AgentError> {
    let n = qnet.output_dim();
    if epsilon > 0.0 && rng.gen_bool(epsilon.min(1.0)) {
        return Ok(rng.gen_range(0..n));
    }
    let q = qnet.infer(state)?;
    Ok(argmax(&q))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Bellman target h = r + gamma * max_a Q'(s', a). The control problem is
/// continuing, so there is no terminal cutoff.
pub fn td_target(
    reward: f64,
    next_state: &[f64],
    target_net: &DenseNet,
    gamma: f64,
) -> Result<f64, AgentError> {
    let q = target_net.infer(next_state)?;
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(reward + gamma * max)
}

/// Polyak update: target <- tau * online + (1 - tau) * target.
pub fn update_target(qnet: &DenseNet, target: &mut DenseNet, tau: f64) -> Result<(), AgentError> {
    target.blend_from(qnet, tau).map_err(|_| AgentError::ArchitectureMismatch)
}

/// One prioritized minibatch update on arbitrary networks: samples by
/// priority, minimizes the mean squared Bellman error, and refreshes the
/// sampled priorities to |td|^alpha plus `priority_floor`. Returns the batch
/// loss.
#[allow(clippy::too_many_arguments)]
pub fn dqn_train_step(
    qnet: &mut DenseNet,
    target_net: &DenseNet,
    optimizer: &mut OptimizerState,
    buffer: &mut ReplayBuffer,
    batch: usize,
    gamma: f64,
    priority_floor: f64,
    rng: &mut impl Rng,
) -> Result<f64, AgentError> {
    if buffer.len() < batch {
        return Err(AgentError::InsufficientBuffer { got: buffer.len(), want: batch });
    }
    let n_actions = qnet.output_dim();
    let alpha = buffer.alpha;
    let indices = buffer.sample_batch(batch, rng);
    let mut grads = Gradients::zeros_like(qnet);
    let mut loss = 0.0;
    let mut new_priorities = Vec::with_capacity(batch);
    for &idx in &indices {
        let item = buffer.get(idx);
        let h = td_target(item.reward, &item.next_state, target_net, gamma)?;
        let (q, tape) = qnet.forward(&item.state)?;
        let td = h - q[item.action];
        loss += td * td;
        let mut d_out = vec![0.0; n_actions];
        d_out[item.action] = -2.0 * td / batch as f64;
        let g = qnet.backward(&tape, &d_out)?;
        grads.accumulate(&g);
        new_priorities.push((idx, td.abs().powf(alpha) + priority_floor));
    }
    optimizer.step(qnet, &grads)?;
    for (idx, p) in new_priorities {
        buffer.set_priority(idx, p);
    }
    Ok(loss / batch as f64)
}

pub struct DqnAgent {
    pub qnet: DenseNet,
    pub target_net: DenseNet,
    pub optimizer: OptimizerState,
    pub buffer: ReplayBuffer,
    pub bounds: NormalizationBounds,
    pub config: AgentConfig,
    pending: BTreeMap<u32, PendingRecord>,
    train_steps_done: u64,
    decisions_noted: u64,
}

impl DqnAgent {
    pub fn new(config: AgentConfig, bounds: NormalizationBounds, rng: &mut impl Rng) -> Self {
        let mut dims = vec![STATE_DIM];
        dims.extend(&config.hidden);
        dims.push(config.n_actions);
        let qnet = DenseNet::init(&dims, DEFAULT_LEAKY_SLOPE, rng);
        let target_net = qnet.clone();
        let optimizer = OptimizerState::new(&qnet, config.learning_rate);
        let buffer = ReplayBuffer::new(config.buffer_capacity, config.alpha);
        Self {
            qnet,
            target_net,
            optimizer,
            buffer,
            bounds,
            config,
            pending: BTreeMap::new(),
            train_steps_done: 0,
            decisions_noted: 0,
        }
    }

    pub fn features(&self, s: &StateVector) -> Vec<f64> {
        self.bounds.normalize(s)
    }

    pub fn act(
        &self,
        state: &StateVector,
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> Result<usize, AgentError> {
        select_action(&self.qnet, &self.features(state), epsilon, rng)
    }

    /// Parks the state-action pair until the task's latency is known. Also
    /// advances the exploration schedule, which therefore survives across
    /// training phases on different traces.
    pub fn note_pending(&mut self, vehicle_id: u32, state: Vec<f64>, action: usize, now_ms: i64) {
        self.decisions_noted += 1;
        self.pending.insert(
            vehicle_id,
            PendingRecord { vehicle_id, state, action, issue_time_ms: now_ms },
        );
    }

    /// Decisions recorded so far; drives the epsilon decay.
    pub fn decisions_noted(&self) -> u64 {
        self.decisions_noted
    }

    pub fn current_epsilon(&self) -> f64 {
        epsilon_at(self.decisions_noted, &self.config)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Resolves a pending record into a transition with reward = -latency
    /// (seconds), inserted at the buffer's current max priority.
    pub fn complete_reward(
        &mut self,
        vehicle_id: u32,
        latency_s: f64,
        next_state: Vec<f64>,
    ) -> Result<Transition, AgentError> {
        let pending =
            self.pending.remove(&vehicle_id).ok_or(AgentError::UnknownPending(vehicle_id))?;
        let t = Transition {
            state: pending.state,
            action: pending.action,
            reward: -latency_s,
            next_state,
            priority: self.buffer.max_priority(),
        };
        self.buffer.push(t.clone());
        Ok(t)
    }

    pub fn train_steps_done(&self) -> u64 {
        self.train_steps_done
    }

    /// One prioritized minibatch update followed by the target-network
    /// tracking step. Returns the mean squared Bellman error of the batch.
    pub fn train_step(&mut self, rng: &mut impl Rng) -> Result<f64, AgentError> {
        let loss = dqn_train_step(
            &mut self.qnet,
            &self.target_net,
            &mut self.optimizer,
            &mut self.buffer,
            self.config.batch_size,
            self.config.gamma,
            self.config.priority_floor,
            rng,
        )?;
        self.train_steps_done += 1;
        match self.config.hard_copy_every {
            Some(every) if self.train_steps_done % every == 0 => {
                update_target(&self.qnet, &mut self.target_net, 1.0)?;
            }
            _ => update_target(&self.qnet, &mut self.target_net, self.config.tau)?,
        }
        Ok(loss)
    }

    /// Writes the Q-network in the binary model format plus a sidecar JSON
    /// with the normalization bounds and hyperparameters.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), AgentError> {
        self.qnet.save(path)?;
        let sidecar = CheckpointSidecar {
            bounds: self.bounds.clone(),
            config: self.config.clone(),
            train_steps_done: self.train_steps_done,
        };
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| AgentError::BadCheckpoint(e.to_string()))?;
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path, rng: &mut impl Rng) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let sidecar: CheckpointSidecar =
            serde_json::from_str(&text).map_err(|e| AgentError::BadCheckpoint(e.to_string()))?;
        let qnet = DenseNet::load(path, DEFAULT_LEAKY_SLOPE)?;
        let mut agent = Self::new(sidecar.config, sidecar.bounds, rng);
        if qnet.dims() != agent.qnet.dims() {
            return Err(AgentError::BadCheckpoint(
                "network dims disagree with sidecar config".into(),
            ));
        }
        agent.target_net = qnet.clone();
        agent.optimizer = OptimizerState::new(&qnet, agent.config.learning_rate);
        agent.qnet = qnet;
        agent.train_steps_done = sidecar.train_steps_done;
        Ok(agent)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointSidecar {
    bounds: NormalizationBounds,
    config: AgentConfig,
    train_steps_done: u64,
}

fn sidecar_path(model_path: &Path) -> std::path::PathBuf {
    let mut p = model_path.as_os_str().to_owned();
    p.push(".meta.json");
    std::path::PathBuf::from(p)
}
