//! Discrete-event simulation of syndrome arrivals, decode completions,
//! synchronization checks before critical layers and idle-layer insertion.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decoder_model::{decode_duration, sample_jitter_factor, DecoderPool, JitterModel, LatencyModel, PoolError, TaskKind};
use crate::metrics::{aggregate_ler, metrics_csv_row, utilization, wall_clock, LerTable, Metrics, UtilizationTrace};
use crate::schedulers::baselines::{block_duration, schedule_sliding, schedule_swiper, schedule_time_parallel};
use crate::schedulers::emergency::{peak_overlap, plan_emergency, plan_input_from_graph, PlanEntry};
use crate::schedulers::steady::{HeuristicWeights, PendingIndex, SteadyPolicy};
use crate::schedulers::triage::{backfill_budget, triage_trigger, Mode, TriggerDecision, TriggerParams, TriggerState};
use crate::schedulers::{SchedulerKind, SpeculationParams};
use crate::slice_graph::{ConstraintGraph, GraphError, SliceState};
use crate::timeline::{build_timeline, compute_cone, LayerKey, SliceId, Timeline};
use crate::workload::Workload;

/// Fitted planning cost coefficient of `a * n * ln n`.
pub const PLAN_COST_A: f64 = 0.01513;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated at t={time}: {detail}")]
    Invariant { time: f64, detail: String },
    #[error("simulation stalled at t={time}: {detail}")]
    Stall { time: f64, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Scheduler latency model used by the delay-ratio study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayModel {
    /// Delay of one heuristic decision, in units of the reference decode time.
    pub ratio: f64,
    /// Coefficient of the `a * n * ln n` planning cost.
    pub plan_a: f64,
    /// Cost of one heuristic decision in the same unit as `plan_a`.
    pub heuristic_cost: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            ratio: 0.0,
            plan_a: PLAN_COST_A,
            heuristic_cost: 1.0,
        }
    }
}

pub fn plan_cost(n: usize, a: f64) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let n = n as f64;
    a * n * n.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionKind {
    Heuristic,
    /// Emergency planning over a scope of the given size.
    Emergency { scope: usize },
}

/// Extra latency added before a decision takes effect.
pub fn apply_scheduler_delay(decision: DecisionKind, model: &DelayModel, t_ref: f64) -> f64 {
    if model.ratio == 0.0 {
        return 0.0;
    }
    let base = model.ratio * t_ref;
    match decision {
        DecisionKind::Heuristic => base,
        DecisionKind::Emergency { scope } => base * plan_cost(scope, model.plan_a) / model.heuristic_cost,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub scheduler: SchedulerKind,
    pub weights: HeuristicWeights,
    pub trigger: TriggerParams,
    pub speculation: SpeculationParams,
    pub speeds: Vec<f64>,
    pub latency: LatencyModel,
    pub jitter: JitterModel,
    pub ler: LerTable,
    pub seed: u64,
    pub termination_factor: f64,
    pub delay: DelayModel,
    /// Measurement round duration for the wall-clock estimate.
    pub t_meas: f64,
    pub check_invariants: bool,
    pub event_log: bool,
    pub event_log_cap: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scheduler: SchedulerKind::Triage,
            weights: HeuristicWeights::default(),
            trigger: TriggerParams::default(),
            speculation: SpeculationParams::default(),
            speeds: vec![1.0; 8],
            latency: LatencyModel::default(),
            jitter: JitterModel::default(),
            ler: LerTable::default(),
            seed: 0,
            termination_factor: 10.0,
            delay: DelayModel::default(),
            t_meas: 1e-6,
            check_invariants: false,
            event_log: false,
            event_log_cap: 100_000,
        }
    }
}

impl SimConfig {
    pub fn with_pool(mut self, m: usize, speed: f64) -> Self {
        self.speeds = vec![speed; m];
        self
    }

    pub fn with_scheduler(mut self, kind: SchedulerKind) -> Self {
        self.scheduler = kind;
        self
    }

    pub fn pool_size(&self) -> usize {
        self.speeds.len()
    }

    /// Nominal speed reported in metrics rows (the fastest decoder).
    pub fn speed(&self) -> f64 {
        self.speeds.iter().copied().fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.speeds.is_empty() {
            return Err("pool needs at least one decoder".into());
        }
        if !self.speeds.iter().all(|&r| r.is_finite() && r > 0.0) {
            return Err("decoder speeds must be positive".into());
        }
        let lm = &self.latency;
        if !(lm.alpha.is_finite() && lm.alpha > 0.0) {
            return Err("alpha must be positive".into());
        }
        if lm.d == 0 {
            return Err("code distance d must be positive".into());
        }
        if lm.buffer_b > lm.d {
            return Err(format!("buffer_b ({}) must not exceed d ({})", lm.buffer_b, lm.d));
        }
        self.weights.validate()?;
        self.speculation.validate()?;
        self.ler.validate()?;
        let tp = &self.trigger;
        if tp.scope_cap == Some(0) {
            return Err("scope_cap must be positive".into());
        }
        if !(0.0..=1.0).contains(&tp.replan_fraction) {
            return Err("replan_fraction must be in [0, 1]".into());
        }
        if !(tp.min_replan_interval >= 0.0) {
            return Err("min_replan_interval must be non-negative".into());
        }
        let jm = &self.jitter;
        if jm.sigma_min > jm.sigma_max || jm.sigma_min < 0.0 {
            return Err("jitter clamp must satisfy 0 <= sigma_min <= sigma_max".into());
        }
        if let Some(s) = jm.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err("jitter sigma must be non-negative".into());
            }
        }
        if !(self.termination_factor > 0.0) {
            return Err("termination_factor must be positive".into());
        }
        let dm = &self.delay;
        if !(dm.ratio >= 0.0 && dm.ratio.is_finite()) {
            return Err("delay_ratio must be non-negative".into());
        }
        if !(dm.heuristic_cost > 0.0 && dm.plan_a >= 0.0) {
            return Err("planning cost parameters must be positive".into());
        }
        if !(self.t_meas > 0.0) {
            return Err("t_meas must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Syndrome of the next layer becomes available.
    SyndromeArrival,
    DecodeCompletion(usize),
    /// Re-run the scheduler (planned emergency start times).
    Wakeup,
}

impl EventKind {
    fn priority(self) -> u8 {
        match self {
            EventKind::DecodeCompletion(_) => 0,
            EventKind::Wakeup => 1,
            EventKind::SyndromeArrival => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub seq: u64,
}

impl Eq for Event {}

impl Ord for Event {
    /// Reversed so that `BinaryHeap` pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.priority().cmp(&self.kind.priority()))
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TaskCounts {
    pub steady: usize,
    pub emergency: usize,
    pub backfill: usize,
    pub speculative: usize,
    pub cancelled: usize,
    pub emergency_plans: usize,
    pub fallbacks: usize,
}

impl TaskCounts {
    fn bump(&mut self, kind: TaskKind) {
        match kind {
            TaskKind::Steady => self.steady += 1,
            TaskKind::Emergency => self.emergency += 1,
            TaskKind::Backfill => self.backfill += 1,
            TaskKind::Speculative => self.speculative += 1,
        }
    }
}

pub const EVENT_LOG_HEADER: &str = "time,kind,slice_id,decoder,detail";

#[derive(Debug, Clone)]
pub struct SimResult {
    pub scheduler: SchedulerKind,
    pub pool_size: usize,
    pub speed: f64,
    pub idle_layers_inserted: usize,
    pub total_layers: usize,
    pub original_layers: usize,
    pub terminated_early: bool,
    pub end_time: f64,
    pub utilization: UtilizationTrace,
    pub task_counts: TaskCounts,
    pub metrics: Metrics,
    /// CSV lines (header included) when event logging was enabled.
    pub event_log: Option<String>,
    pub timeline: Timeline,
}

impl SimResult {
    pub fn csv_row(&self, run_id: &str) -> String {
        metrics_csv_row(
            run_id,
            self.scheduler.as_str(),
            self.pool_size,
            self.speed,
            &self.metrics,
            self.terminated_early,
        )
    }
}

/// `true` when every critical instruction at layer position `t` has a fully
/// decoded causal cone.
pub fn check_sync(tl: &Timeline, t: usize) -> bool {
    critical_roots(tl, t)
        .into_iter()
        .all(|root| compute_cone(tl, root, true, 0).members.is_empty())
}

/// One critical slice per critical instruction of the layer at position `t`.
pub fn critical_roots(tl: &Timeline, t: usize) -> Vec<SliceId> {
    roots_of_layer(tl, tl.layer(t))
}

fn roots_of_layer(tl: &Timeline, layer: &[SliceId]) -> Vec<SliceId> {
    let mut seen_groups: Vec<u32> = Vec::new();
    let mut roots = Vec::new();
    for &s in layer {
        let slice = tl.slice(s);
        if slice.critical && !seen_groups.contains(&slice.group) {
            seen_groups.push(slice.group);
            roots.push(s);
        }
    }
    roots
}

/// `true` when the run must stop: strictly more idle layers than
/// `factor` times the original layer count.
pub fn check_termination(idle_layers: usize, original_layers: usize, factor: f64) -> bool {
    idle_layers as f64 > factor * original_layers as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskState {
    Running,
    /// Speculative decode finished; waiting for its neighbour to verify.
    Waiting,
    Done,
    Cancelled,
}

#[derive(Debug, Clone)]
struct Task {
    slices: Vec<SliceId>,
    decoder: usize,
    t_start: f64,
    t_finish: f64,
    kind: TaskKind,
    state: TaskState,
    awaited: Option<SliceId>,
    mispredict: bool,
}

#[derive(Debug, Clone)]
struct ActivePlan {
    entries: Vec<PlanEntry>,
    done: Vec<bool>,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    g: ConstraintGraph,
    pool: DecoderPool,
    index: PendingIndex,
    events: BinaryHeap<Event>,
    seq: u64,
    gen_seq: u64,
    gen_time: Vec<f64>,
    task_of: Vec<Option<usize>>,
    tasks: Vec<Task>,
    active: BTreeSet<usize>,
    spec_waiting: BTreeMap<SliceId, Vec<usize>>,
    next_layer: usize,
    arrivals: u64,
    original_layers: usize,
    terminated: bool,
    jitter_rng: ChaCha8Rng,
    spec_rng: ChaCha8Rng,
    sigma: f64,
    t_ref: f64,
    counts: TaskCounts,
    log: Option<EventLog>,
    // triage state
    trigger: TriggerState,
    plan: Option<ActivePlan>,
    eval_key: Option<(Vec<SliceId>, u64)>,
    eval_time: f64,
    wakeups: BTreeSet<u64>,
}

#[derive(Debug)]
struct EventLog {
    text: String,
    lines: usize,
    cap: usize,
}

impl EventLog {
    fn push(&mut self, time: f64, kind: &str, slice: Option<SliceId>, decoder: Option<usize>, detail: &str) {
        if self.lines >= self.cap {
            return;
        }
        let slice = slice.map_or(String::new(), |s| s.0.to_string());
        let decoder = decoder.map_or(String::new(), |d| d.to_string());
        let _ = writeln!(self.text, "{time:.6},{kind},{slice},{decoder},{detail}");
        self.lines += 1;
    }
}

/// Runs one simulation of `workload` under `cfg`.
pub fn run(workload: &Workload, cfg: &SimConfig) -> Result<SimResult, SimError> {
    cfg.validate().map_err(SimError::Config)?;
    let tl = build_timeline(workload);
    let original_layers = tl.original_layer_count();
    let n = tl.n_slices();
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    jitter_rng.set_stream(0);
    let mut spec_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    spec_rng.set_stream(1);
    let max_speed = cfg.speed();
    let mut engine = Engine {
        cfg,
        g: ConstraintGraph::new(tl),
        pool: DecoderPool::with_speeds(cfg.speeds.clone()),
        index: PendingIndex::new(),
        events: BinaryHeap::new(),
        seq: 0,
        gen_seq: 0,
        gen_time: vec![f64::INFINITY; n],
        task_of: vec![None; n],
        tasks: Vec::new(),
        active: BTreeSet::new(),
        spec_waiting: BTreeMap::new(),
        next_layer: 0,
        arrivals: 0,
        original_layers,
        terminated: false,
        jitter_rng,
        spec_rng,
        sigma: cfg.jitter.effective_sigma(cfg.latency.d),
        t_ref: decode_duration(0, &cfg.latency, max_speed),
        counts: TaskCounts::default(),
        log: cfg.event_log.then(|| EventLog {
            text: format!("{EVENT_LOG_HEADER}\n"),
            lines: 0,
            cap: cfg.event_log_cap,
        }),
        trigger: TriggerState::new(cfg.trigger),
        plan: None,
        eval_key: None,
        eval_time: f64::NEG_INFINITY,
        wakeups: BTreeSet::new(),
    };
    let end_time = engine.run_loop()?;
    Ok(engine.finish(end_time))
}

impl<'a> Engine<'a> {
    fn tl(&self) -> &Timeline {
        self.g.timeline()
    }

    fn push_event(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event { time, kind, seq: self.seq });
    }

    fn log(&mut self, time: f64, kind: &str, slice: Option<SliceId>, decoder: Option<usize>, detail: &str) {
        if let Some(log) = &mut self.log {
            log.push(time, kind, slice, decoder, detail);
        }
    }

    fn run_loop(&mut self) -> Result<f64, SimError> {
        let mut now = 0.0;
        if self.tl().n_layers() > 0 {
            self.push_event(1.0, EventKind::SyndromeArrival);
        }
        while let Some(ev) = self.events.pop() {
            now = ev.time;
            self.process(ev)?;
            while self.events.peek().is_some_and(|e| e.time == now) && !self.terminated {
                let ev = self.events.pop().expect("peeked");
                self.process(ev)?;
            }
            if self.terminated {
                break;
            }
            self.schedule(now)?;
            if self.cfg.check_invariants {
                self.check_invariants(now)?;
            }
            if self.events.is_empty() && !self.all_done() {
                return Err(SimError::Stall {
                    time: now,
                    detail: format!(
                        "{} of {} slices completed, {} pending, {} tasks active",
                        self.tl().completions(),
                        self.tl().n_slices(),
                        self.index.len(),
                        self.active.len()
                    ),
                });
            }
        }
        Ok(now)
    }

    fn all_done(&self) -> bool {
        self.next_layer == self.tl().n_layers() && self.tl().completions() as usize == self.tl().n_slices()
    }

    fn process(&mut self, ev: Event) -> Result<(), SimError> {
        match ev.kind {
            EventKind::SyndromeArrival => self.on_arrival(ev.time),
            EventKind::DecodeCompletion(k) => self.on_completion(k, ev.time),
            EventKind::Wakeup => {
                self.wakeups.remove(&ev.time.to_bits());
                Ok(())
            }
        }
    }

    // -- arrivals and synchronization ------------------------------------

    fn on_arrival(&mut self, now: f64) -> Result<(), SimError> {
        self.arrivals += 1;
        let t = self.next_layer;
        if !check_sync(self.tl(), t) {
            self.on_sync_failure(t, now)?;
            if check_termination(self.tl().inserted_idle_count(), self.original_layers, self.cfg.termination_factor) {
                self.terminated = true;
                self.log(now, "terminate", None, None, &format!("idle={}", self.tl().inserted_idle_count()));
                return Ok(());
            }
        } else {
            self.generate_layer(t, now)?;
            self.log(now, "arrival", None, None, &format!("layer={t}"));
        }
        if self.next_layer < self.tl().n_layers() {
            self.push_event(now + 1.0, EventKind::SyndromeArrival);
        }
        Ok(())
    }

    /// Inserts an idle layer in front of the critical layer at `t` and
    /// generates it immediately.
    fn on_sync_failure(&mut self, t: usize, now: f64) -> Result<(), SimError> {
        let ids = self.g.insert_idle_layer(t)?;
        let n = self.tl().n_slices();
        self.gen_time.resize(n, f64::INFINITY);
        self.task_of.resize(n, None);
        let mut touched: Vec<SliceId> = ids.clone();
        for &id in &ids {
            touched.extend(self.tl().neighbors(id));
        }
        self.generate_layer(t, now)?;
        for s in touched {
            self.index.refresh(&self.g, s);
        }
        self.log(now, "idle", None, None, &format!("layer={t}"));
        Ok(())
    }

    fn generate_layer(&mut self, t: usize, now: f64) -> Result<(), SimError> {
        let layer: Vec<SliceId> = self.tl().layer(t).to_vec();
        for &s in &layer {
            self.g.generate(s)?;
            self.gen_time[s.index()] = now;
            self.index.register(s, self.gen_seq);
            self.gen_seq += 1;
        }
        for &s in &layer {
            self.touch(s);
        }
        self.next_layer = t + 1;
        Ok(())
    }

    /// Refreshes the pending index around `s`.
    fn touch(&mut self, s: SliceId) {
        self.index.refresh(&self.g, s);
        let nbrs: Vec<SliceId> = self.tl().neighbors(s).collect();
        for n in nbrs {
            self.index.refresh(&self.g, n);
        }
    }

    // -- completions and speculation --------------------------------------

    fn on_completion(&mut self, k: usize, now: f64) -> Result<(), SimError> {
        let state = self.tasks[k].state;
        if state != TaskState::Running {
            return Ok(());
        }
        let task = self.tasks[k].clone();
        let decoder = Some(task.decoder);
        if task.kind == TaskKind::Speculative {
            let s = task.slices[0];
            let awaited = task.awaited.expect("speculative tasks await a neighbour");
            if self.g.state(awaited) == SliceState::Completed {
                self.finish_task(k, now)?;
                self.log(now, "complete", Some(s), decoder, "speculative verified");
            } else {
                self.tasks[k].state = TaskState::Waiting;
                self.log(now, "spec_wait", Some(s), decoder, &format!("awaits={}", awaited.0));
            }
            return Ok(());
        }
        self.finish_task(k, now)?;
        for &s in &task.slices {
            self.log(now, "complete", Some(s), decoder, task.kind.as_str());
        }
        for &s in &task.slices {
            self.resolve_speculation(s, now)?;
        }
        Ok(())
    }

    fn finish_task(&mut self, k: usize, _now: f64) -> Result<(), SimError> {
        let slices = self.tasks[k].slices.clone();
        self.g.complete(&slices)?;
        self.tasks[k].state = TaskState::Done;
        self.active.remove(&k);
        for &s in &slices {
            self.task_of[s.index()] = None;
            self.touch(s);
        }
        Ok(())
    }

    /// Verifies speculative decodes that were waiting on `awaited`.
    fn resolve_speculation(&mut self, awaited: SliceId, now: f64) -> Result<(), SimError> {
        let Some(waiting) = self.spec_waiting.remove(&awaited) else {
            return Ok(());
        };
        for k in waiting {
            let task = self.tasks[k].clone();
            let s = task.slices[0];
            let decoder = Some(task.decoder);
            if task.mispredict {
                if task.state == TaskState::Running {
                    self.pool.release(task.decoder, now);
                    self.tasks[k].t_finish = now.max(task.t_start);
                }
                self.tasks[k].state = TaskState::Cancelled;
                self.active.remove(&k);
                self.task_of[s.index()] = None;
                self.g.invalidate(s)?;
                self.touch(s);
                self.counts.cancelled += 1;
                self.log(now, "invalidate", Some(s), decoder, "misprediction");
            } else if task.state == TaskState::Waiting {
                self.finish_task(k, now)?;
                self.log(now, "complete", Some(s), decoder, "speculative verified");
            }
        }
        Ok(())
    }

    // -- dispatch -----------------------------------------------------------

    fn jitter(&mut self) -> f64 {
        sample_jitter_factor(self.sigma, &mut self.jitter_rng)
    }

    fn dispatch(
        &mut self,
        slices: Vec<SliceId>,
        decoder: usize,
        now: f64,
        delay: f64,
        kind: TaskKind,
        awaited: Option<SliceId>,
    ) -> Result<(), SimError> {
        let speed = self.pool.speed(decoder);
        let base = if slices.len() == 1 {
            decode_duration(self.g.unresolved_degree(slices[0]), &self.cfg.latency, speed)
        } else {
            block_duration(&self.g, &slices, &self.cfg.latency, speed)
        };
        let mut duration = base * self.jitter();
        let mut mispredict = false;
        if kind == TaskKind::Speculative {
            duration *= 1.0 + self.cfg.speculation.speculation_overhead;
            mispredict = self.spec_rng.random::<f64>() < self.cfg.speculation.misprediction_rate;
        }
        let t_start = now + delay;
        let t_finish = t_start + duration;
        for &s in &slices {
            if t_start < self.gen_time[s.index()] {
                return Err(SimError::Invariant {
                    time: now,
                    detail: format!("slice {s} starts before it was generated"),
                });
            }
        }
        self.pool.assign(decoder, now, t_finish)?;
        match awaited {
            Some(a) => self.g.assign_speculative(slices[0], a)?,
            None => self.g.assign(&slices)?,
        }
        let k = self.tasks.len();
        for &s in &slices {
            self.task_of[s.index()] = Some(k);
        }
        if let Some(a) = awaited {
            self.spec_waiting.entry(a).or_default().push(k);
        }
        self.tasks.push(Task {
            slices: slices.clone(),
            decoder,
            t_start,
            t_finish,
            kind,
            state: TaskState::Running,
            awaited,
            mispredict,
        });
        self.active.insert(k);
        self.counts.bump(kind);
        self.push_event(t_finish, EventKind::DecodeCompletion(k));
        for &s in &slices {
            self.touch(s);
        }
        if self.log.is_some() {
            let detail = format!("{} start={t_start:.6} finish={t_finish:.6}", kind.as_str());
            for &s in &slices {
                self.log(now, "dispatch", Some(s), Some(decoder), &detail);
            }
        }
        Ok(())
    }

    fn heuristic_delay(&self) -> f64 {
        apply_scheduler_delay(DecisionKind::Heuristic, &self.cfg.delay, self.t_ref)
    }

    fn schedule(&mut self, now: f64) -> Result<(), SimError> {
        match self.cfg.scheduler {
            SchedulerKind::StFifo => self.steady_pass(now, SteadyPolicy::Fifo),
            SchedulerKind::StEdf => self.steady_pass(now, SteadyPolicy::Edf),
            SchedulerKind::StMdf => self.steady_pass(now, SteadyPolicy::Mdf),
            SchedulerKind::StWeighted => self.steady_pass(now, SteadyPolicy::Weighted(self.cfg.weights)),
            SchedulerKind::Sliding => self.sliding_pass(now),
            SchedulerKind::TimeParallel => self.time_parallel_pass(now),
            SchedulerKind::Swiper => self.swiper_pass(now),
            SchedulerKind::Triage => self.triage_pass(now),
        }
    }

    fn steady_pass(&mut self, now: f64, policy: SteadyPolicy) -> Result<(), SimError> {
        let free = self.pool.free_decoders(now);
        let picks = self.index.select(&policy, &self.g, self.next_layer, free.len(), |_| true);
        let delay = self.heuristic_delay();
        for (s, d) in picks.into_iter().zip(free) {
            self.dispatch(vec![s], d, now, delay, TaskKind::Steady, None)?;
        }
        Ok(())
    }

    fn sliding_pass(&mut self, now: f64) -> Result<(), SimError> {
        if !self.pool.is_free(0, now) {
            return Ok(());
        }
        if let Some(block) = schedule_sliding(self.index.iter_fifo(), self.active.len(), &self.g) {
            let delay = self.heuristic_delay();
            self.dispatch(block, 0, now, delay, TaskKind::Steady, None)?;
        }
        Ok(())
    }

    fn time_parallel_pass(&mut self, now: f64) -> Result<(), SimError> {
        let free = self.pool.free_decoders(now);
        let blocks = schedule_time_parallel(self.index.iter_fifo(), free.len(), &self.g);
        let delay = self.heuristic_delay();
        for (block, d) in blocks.into_iter().zip(free) {
            self.dispatch(block, d, now, delay, TaskKind::Steady, None)?;
        }
        Ok(())
    }

    fn swiper_pass(&mut self, now: f64) -> Result<(), SimError> {
        let free = self.pool.free_decoders(now);
        if free.is_empty() {
            return Ok(());
        }
        let mut candidates: Vec<(u64, SliceId, SliceId)> = Vec::new();
        for &k in &self.active {
            let task = &self.tasks[k];
            if task.kind == TaskKind::Speculative || task.state != TaskState::Running {
                continue;
            }
            for &a in &task.slices {
                for n in self.tl().neighbors(a) {
                    if self.g.state(n) == SliceState::Occupied && self.g.assigned_neighbors(n) == 1 {
                        candidates.push((self.index.seq(n), n, a));
                    }
                }
            }
        }
        candidates.sort();
        candidates.dedup_by_key(|c| c.1);
        let (normal, spec) = schedule_swiper(
            self.index.iter_fifo(),
            candidates.into_iter().map(|(_, s, a)| (s, a)),
            free.len(),
            &self.g,
        );
        let delay = self.heuristic_delay();
        let mut decoders = free.into_iter();
        for s in normal {
            let d = decoders.next().expect("selection bounded by free decoders");
            self.dispatch(vec![s], d, now, delay, TaskKind::Steady, None)?;
        }
        for (s, a) in spec {
            let d = decoders.next().expect("selection bounded by free decoders");
            self.dispatch(vec![s], d, now, delay, TaskKind::Speculative, Some(a))?;
        }
        Ok(())
    }

    // -- triage -------------------------------------------------------------

    /// Critical slices whose deadline layers are within `tau` of the current
    /// layer.
    fn urgent_roots(&self) -> Vec<SliceId> {
        let tl = self.tl();
        let keys: Vec<LayerKey> = self
            .index
            .urgent_deadlines(tl, self.next_layer, self.cfg.trigger.tau_emergency);
        let mut roots = Vec::new();
        for key in keys {
            roots.extend(roots_of_layer(tl, tl.layer_by_key(key)));
        }
        roots
    }

    fn plannable(&self, s: SliceId) -> bool {
        !matches!(self.g.state(s), SliceState::Assigned | SliceState::Completed)
    }

    fn triage_pass(&mut self, now: f64) -> Result<(), SimError> {
        let weighted = SteadyPolicy::Weighted(self.cfg.weights);
        let min_gap = self.index.min_deadline_gap(self.tl(), self.next_layer);
        let roots = self.urgent_roots();
        let evaluate = match self.trigger.mode {
            Mode::Steady => true,
            Mode::Emergency => {
                let key = (roots.clone(), self.tl().epoch());
                let interval_due = self.eval_time < self.trigger.last_replan_time + self.trigger.params.min_replan_interval
                    && now >= self.trigger.last_replan_time + self.trigger.params.min_replan_interval;
                self.eval_key.as_ref() != Some(&key) || interval_due
            }
        };
        let decision = if evaluate {
            self.eval_key = Some((roots.clone(), self.tl().epoch()));
            self.eval_time = now;
            let g = &self.g;
            let tl = g.timeline();
            triage_trigger(
                &self.trigger,
                min_gap,
                &roots,
                |root, limit| {
                    let cone = compute_cone(tl, root, true, limit);
                    if cone.members.len() > limit {
                        return None;
                    }
                    Some(
                        cone.members
                            .into_iter()
                            .filter(|&m| !matches!(g.state(m), SliceState::Assigned | SliceState::Completed))
                            .collect(),
                    )
                },
                now,
            )
        } else {
            TriggerDecision::KeepPlan
        };

        match decision {
            TriggerDecision::StaySteady => return self.steady_pass(now, weighted),
            TriggerDecision::FallbackSteady => {
                self.counts.fallbacks += 1;
                if self.plan.take().is_some() {
                    self.trigger.leave();
                    self.log(now, "mode", None, None, "steady");
                }
                return self.steady_pass(now, weighted);
            }
            TriggerDecision::EnterEmergency(scope) | TriggerDecision::Replan(scope) => {
                self.make_plan(scope, now);
            }
            TriggerDecision::KeepPlan => {}
        }
        self.execute_plan(now)
    }

    fn make_plan(&mut self, scope: Vec<SliceId>, now: f64) {
        let scope: Vec<SliceId> = scope.into_iter().filter(|&s| self.plannable(s)).collect();
        let delay = apply_scheduler_delay(DecisionKind::Emergency { scope: scope.len() }, &self.cfg.delay, self.t_ref);
        let plan_now = now + delay;
        let next_arrival = (self.arrivals + 1) as f64;
        let next_layer = self.next_layer;
        let input = {
            let tasks = &self.tasks;
            let task_of = &self.task_of;
            plan_input_from_graph(
                &self.g,
                &scope,
                plan_now,
                self.pool.busy_until(),
                &self.cfg.speeds,
                self.cfg.latency,
                |nb| task_of[nb.index()].map_or(plan_now, |k| tasks[k].t_finish),
                |t| next_arrival + t.saturating_sub(next_layer) as f64,
            )
        };
        let plan = plan_emergency(&input);
        self.counts.emergency_plans += 1;
        self.log(
            now,
            "plan",
            None,
            None,
            &format!("scope={} peak={} ready={plan_now:.6}", scope.len(), plan.peak_decoders),
        );
        let starts: BTreeSet<u64> = plan
            .entries
            .iter()
            .filter(|e| e.start > now)
            .map(|e| e.start.to_bits())
            .collect();
        for bits in starts {
            if self.wakeups.insert(bits) {
                self.push_event(f64::from_bits(bits), EventKind::Wakeup);
            }
        }
        self.trigger.enter(scope, now);
        let n = plan.entries.len();
        self.plan = Some(ActivePlan {
            entries: plan.entries,
            done: vec![false; n],
        });
    }

    fn execute_plan(&mut self, now: f64) -> Result<(), SimError> {
        let Some(mut plan) = self.plan.take() else {
            self.trigger.leave();
            return self.steady_pass(now, SteadyPolicy::Weighted(self.cfg.weights));
        };
        let free_before = self.pool.num_free(now);
        let mut emergency_now = 0;
        let mut blocked: Vec<SliceId> = Vec::new();
        for i in 0..plan.entries.len() {
            if plan.done[i] {
                continue;
            }
            let e = plan.entries[i];
            if !self.plannable(e.slice) {
                plan.done[i] = true;
                continue;
            }
            if e.start > now {
                break;
            }
            let ready = self.g.state(e.slice) == SliceState::Pending
                && self.g.is_free_of(e.slice, &[])
                && !blocked.iter().any(|&b| self.tl().are_adjacent(b, e.slice));
            let decoder = if self.pool.is_free(e.decoder, now) {
                Some(e.decoder)
            } else {
                self.pool.free_decoders(now).first().copied()
            };
            match (ready, decoder) {
                (true, Some(d)) => {
                    self.dispatch(vec![e.slice], d, now, 0.0, TaskKind::Emergency, None)?;
                    plan.done[i] = true;
                    emergency_now += 1;
                }
                _ => blocked.push(e.slice),
            }
        }
        if plan.done.iter().all(|&d| d) {
            self.trigger.leave();
            self.log(now, "mode", None, None, "steady");
            return self.steady_pass(now, SteadyPolicy::Weighted(self.cfg.weights));
        }
        let running_backfill = self
            .active
            .iter()
            .filter(|&&k| self.tasks[k].kind == TaskKind::Backfill)
            .count();
        let pending: Vec<PlanEntry> = plan
            .entries
            .iter()
            .zip(&plan.done)
            .filter(|(_, &d)| !d)
            .map(|(e, _)| *e)
            .collect();
        let peak = peak_overlap(&pending);
        let budget = backfill_budget(self.pool.size(), peak, running_backfill, free_before, emergency_now);
        let remaining: BTreeSet<SliceId> = plan
            .entries
            .iter()
            .zip(&plan.done)
            .filter(|(_, &d)| !d)
            .map(|(e, _)| e.slice)
            .collect();
        self.plan = Some(plan);
        if budget == 0 {
            return Ok(());
        }
        let free = self.pool.free_decoders(now);
        let tl = self.tl();
        let picks = self.index.select(
            &SteadyPolicy::Weighted(self.cfg.weights),
            &self.g,
            self.next_layer,
            budget.min(free.len()),
            |s| !remaining.contains(&s) && !tl.neighbors(s).any(|n| remaining.contains(&n)),
        );
        let delay = self.heuristic_delay();
        for (s, d) in picks.into_iter().zip(free) {
            self.dispatch(vec![s], d, now, delay, TaskKind::Backfill, None)?;
        }
        Ok(())
    }

    // -- checks and results ---------------------------------------------------

    fn check_invariants(&self, now: f64) -> Result<(), SimError> {
        let tl = self.tl();
        for &k in &self.active {
            for &s in &self.tasks[k].slices {
                if self.g.state(s) != SliceState::Assigned {
                    return Err(SimError::Invariant {
                        time: now,
                        detail: format!("slice {s} of active task {k} is {}", self.g.state(s)),
                    });
                }
                for n in tl.neighbors(s) {
                    if self.g.state(n) != SliceState::Assigned {
                        continue;
                    }
                    let other = self.task_of[n.index()];
                    if other == Some(k) {
                        continue;
                    }
                    let spec_pair = |a: SliceId, b: SliceId| {
                        self.task_of[a.index()].is_some_and(|t| self.tasks[t].awaited == Some(b))
                    };
                    if !(spec_pair(s, n) || spec_pair(n, s)) {
                        return Err(SimError::Invariant {
                            time: now,
                            detail: format!("adjacent slices {s} and {n} assigned to different tasks"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(self, end_time: f64) -> SimResult {
        let cfg = self.cfg;
        let mut edges: Vec<(f64, i32)> = Vec::with_capacity(self.tasks.len() * 2);
        for task in &self.tasks {
            let end = match task.state {
                TaskState::Running => task.t_finish.min(end_time),
                _ => task.t_finish,
            };
            if end > task.t_start {
                edges.push((task.t_start, 1));
                edges.push((end, -1));
            }
        }
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut trace = UtilizationTrace::new();
        trace.record(0.0, 0);
        let mut active = 0i32;
        for (t, d) in edges {
            active += d;
            trace.record(t, active as u32);
        }
        let tl = self.g.into_timeline();
        let total_layers = tl.n_layers();
        let executed = if self.terminated { self.next_layer } else { total_layers };
        let idle = tl.inserted_idle_count();
        let m = cfg.pool_size();
        let metrics = Metrics {
            idle_layers: idle,
            total_layers,
            aggregated_ler: aggregate_ler(&tl, executed, &cfg.ler),
            mean_utilization: utilization(&trace, m, end_time),
            peak_decoders_used: trace.peak(),
            wall_clock_estimate: wall_clock(total_layers, cfg.latency.d, cfg.t_meas),
        };
        SimResult {
            scheduler: cfg.scheduler,
            pool_size: m,
            speed: cfg.speed(),
            idle_layers_inserted: idle,
            total_layers,
            original_layers: self.original_layers,
            terminated_early: self.terminated,
            end_time,
            utilization: trace,
            task_counts: self.counts,
            metrics,
            event_log: self.log.map(|l| l.text),
            timeline: tl,
        }
    }
}
