//! One simulation run: wires workload, schedulers and the cluster model onto
//! the event calendar.

use serde::Serialize;

use crate::cluster::{Cluster, ContainerId, ContainerState, Spawned, TaskKind};
use crate::engine::{EventQueue, RandomStream, TraceDigest};
use crate::error::SimError;
use crate::noah::{self, AdmitDecision, AdmitView, AllocationTable, NoahConfig, SiteLoad};
use crate::noncoop::NoncoopScheduler;
use crate::ow::{function_hash, OwScheduler, Selection};
use crate::queueing::{ClassEstimate, DurationEstimator};
use crate::scenario::{Scenario, SchedulerSpec};
use crate::units::AccessKind;
use crate::workload::{generate_arrivals, read_trace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload {
    Arrival(usize),
    ExecProgress {
        site: usize,
        generation: u64,
    },
    SetupDone {
        site: usize,
        container: ContainerId,
    },
    IdleTimeout {
        site: usize,
        container: ContainerId,
        epoch: u64,
    },
    StemReady {
        site: usize,
    },
    ControlTick,
    Shutdown,
}

impl Payload {
    fn digest_fields(&self) -> (u8, u64, u64) {
        match *self {
            Payload::Arrival(i) => (1, i as u64, 0),
            Payload::ExecProgress { site, generation } => (2, site as u64, generation),
            Payload::SetupDone { site, container } => (3, site as u64, container.0),
            Payload::IdleTimeout { site, container, .. } => (4, site as u64, container.0),
            Payload::StemReady { site } => (5, site as u64, 0),
            Payload::ControlTick => (6, 0, 0),
            Payload::Shutdown => (7, 0, 0),
        }
    }
}

/// Lifecycle timestamps of one event (function invocation).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Invocation {
    pub class: usize,
    pub arrival: f64,
    pub dispatch: Option<f64>,
    pub site: Option<usize>,
    pub start: Option<f64>,
    pub completion: Option<f64>,
    /// Served by a container created for it.
    pub cold: bool,
    /// Ideal single-core work, including data access.
    pub work: f64,
}

/// One line of the optional per-event trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub time: f64,
    pub class: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub site: Option<usize>,
    pub phase: &'static str,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NoahStats {
    pub control_rounds: u64,
    pub saturated_steps: u64,
    pub invariant_violations: u64,
    /// Container count changes observed across control rounds; must stay 0.
    pub containers_changed_by_control: u64,
    pub fallback_dispatches: u64,
    pub max_sites_in_use: usize,
    pub first_violation: Option<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub trace: bool,
    pub check_invariants: bool,
}

struct NoahState {
    cfg: NoahConfig,
    table: AllocationTable,
    alphas: Vec<f64>,
    rotation: usize,
    stats: NoahStats,
}

enum Dispatcher {
    Ow(OwScheduler),
    Noncoop(NoncoopScheduler),
    Noah(Box<NoahState>),
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub scheduler: String,
    pub final_time: f64,
    pub invocations: Vec<Invocation>,
    pub records: Vec<crate::cluster::ContainerRecord>,
    pub containers_created: u64,
    pub hosts_employed: usize,
    pub hosts: usize,
    pub digest: TraceDigest,
    pub trace: Vec<TraceRecord>,
    pub delivered_work: f64,
    pub exec_work: f64,
    pub noah: Option<NoahStats>,
    pub random_fallbacks: u64,
    pub invariant_errors: Vec<String>,
    pub class_names: Vec<String>,
}

pub struct Simulation {
    queue: EventQueue<Payload>,
    cluster: Cluster,
    class_names: Vec<String>,
    class_hash: Vec<u64>,
    class_exec: Vec<f64>,
    class_ops: Vec<Vec<(usize, AccessKind)>>,
    estimates: Vec<ClassEstimate>,
    site_setup: Vec<Vec<DurationEstimator>>,
    dispatcher: Dispatcher,
    scheduler_label: String,
    invocations: Vec<Invocation>,
    pending_arrivals: usize,
    unfinished: usize,
    next_task: u64,
    digest: TraceDigest,
    trace: Option<Vec<TraceRecord>>,
    opts: RunOptions,
    seed: u64,
    final_time: f64,
    finished: bool,
    invariant_errors: Vec<String>,
}

impl Simulation {
    /// Builds a run of `scenario` with `seed`: arrivals are generated (or
    /// replayed) and scheduled up front.
    pub fn new(scenario: &Scenario, seed: u64, opts: RunOptions) -> Result<Self, SimError> {
        scenario.validate()?;
        let classes = &scenario.classes;
        let k = classes.len();
        let cfg = &scenario.cluster;
        let cluster = Cluster::new(cfg.clone(), k, &scenario.data)?;

        let class_ops = classes
            .iter()
            .map(|c| {
                c.data_ops
                    .iter()
                    .map(|op| Ok((cluster.item_id(&op.item)?, op.kind)))
                    .collect::<Result<Vec<_>, SimError>>()
            })
            .collect::<Result<Vec<_>, SimError>>()?;

        let est = &scenario.estimators;
        let estimates = classes
            .iter()
            .map(|c| {
                ClassEstimate::new(
                    c.exec_time.0,
                    cfg.setup_cold.0,
                    est.rate_half_life.0,
                    est.sample_half_life,
                )
            })
            .collect();
        let site_setup = (0..cfg.hosts)
            .map(|_| {
                (0..k)
                    .map(|_| DurationEstimator::new(cfg.setup_cold.0, est.sample_half_life))
                    .collect()
            })
            .collect();

        let sched_rng = RandomStream::new(seed, &format!("scheduler/{}", scenario.scheduler));
        let dispatcher = match &scenario.scheduler {
            spec @ SchedulerSpec::Ow { .. } => {
                Dispatcher::Ow(OwScheduler::new(spec.ow_config().expect("ow"), cfg.hosts, sched_rng))
            }
            spec @ SchedulerSpec::Noncoop { .. } => Dispatcher::Noncoop(NoncoopScheduler::new(
                spec.noncoop_config().expect("noncoop"),
                vec![f64::from(cfg.cores); cfg.hosts],
                k,
                sched_rng,
            )),
            spec @ SchedulerSpec::Noah { .. } => {
                let ncfg = spec.noah_config().expect("noah");
                let alphas = classes.iter().map(|c| c.alpha.map_or(ncfg.alpha, |a| a.0)).collect();
                Dispatcher::Noah(Box::new(NoahState {
                    table: AllocationTable::new(vec![cfg.cores; cfg.hosts], k),
                    cfg: ncfg,
                    alphas,
                    rotation: 0,
                    stats: NoahStats::default(),
                }))
            }
        };

        let mut sim = Self {
            queue: EventQueue::new(),
            cluster,
            class_names: classes.iter().map(|c| c.name.clone()).collect(),
            class_hash: classes.iter().map(|c| function_hash(&c.name)).collect(),
            class_exec: classes.iter().map(|c| c.exec_time.0).collect(),
            class_ops,
            estimates,
            site_setup,
            dispatcher,
            scheduler_label: scenario.scheduler.to_string(),
            invocations: Vec::new(),
            pending_arrivals: 0,
            unfinished: 0,
            next_task: 0,
            digest: TraceDigest::default(),
            trace: opts.trace.then(Vec::new),
            opts,
            seed,
            final_time: 0.0,
            finished: false,
            invariant_errors: Vec::new(),
        };

        let mut arrivals: Vec<(f64, usize)> = Vec::new();
        if let Some(path) = &scenario.replay {
            let file = std::fs::File::open(path)
                .map_err(|e| SimError::Scenario(format!("cannot open replay trace {path}: {e}")))?;
            for a in read_trace(file)? {
                let class = sim
                    .class_names
                    .iter()
                    .position(|n| *n == a.class)
                    .ok_or_else(|| SimError::UnknownClass(a.class.clone()))?;
                arrivals.push((a.time, class));
            }
        } else {
            for (i, spec) in classes.iter().enumerate() {
                let mut stream = RandomStream::new(seed, &format!("arrivals/{}", spec.name));
                arrivals.extend(generate_arrivals(spec, &mut stream).into_iter().map(|t| (t, i)));
            }
        }
        arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (t, class) in arrivals {
            let id = sim.invocations.len();
            sim.invocations.push(Invocation {
                class,
                arrival: t,
                dispatch: None,
                site: None,
                start: None,
                completion: None,
                cold: false,
                work: 0.0,
            });
            sim.queue.schedule(t, Payload::Arrival(id))?;
        }
        sim.pending_arrivals = sim.invocations.len();
        if matches!(sim.dispatcher, Dispatcher::Noah(_)) && sim.pending_arrivals > 0 {
            sim.queue.schedule(0.0, Payload::ControlTick)?;
        }
        Ok(sim)
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn allocation_table(&self) -> Option<&AllocationTable> {
        match &self.dispatcher {
            Dispatcher::Noah(n) => Some(&n.table),
            _ => None,
        }
    }

    fn trace(&mut self, class: usize, site: Option<usize>, phase: &'static str) {
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord {
                time: self.queue.now(),
                class: self.class_names[class].clone(),
                site,
                phase,
            });
        }
    }

    /// Processes one event. Returns `false` once the calendar is exhausted or
    /// the run has shut down.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.finished {
            return Ok(false);
        }
        let Some(ev) = self.queue.pop()? else {
            self.finished = true;
            return Ok(false);
        };
        let (tag, a, b) = ev.payload.digest_fields();
        self.digest.update_record(ev.time, tag, a, b);
        match ev.payload {
            Payload::Arrival(id) => self.on_arrival(id)?,
            Payload::ExecProgress { site, generation } => self.on_exec_progress(site, generation)?,
            Payload::SetupDone { site, container } => self.on_setup_done(site, container)?,
            Payload::IdleTimeout { site, container, epoch } => self.on_idle_timeout(site, container, epoch),
            Payload::StemReady { site } => {
                self.cluster.replenish_stem(site);
            }
            Payload::ControlTick => self.on_control_tick()?,
            Payload::Shutdown => {
                self.final_time = ev.time;
                self.finished = true;
            }
        }
        if self.opts.check_invariants {
            if let Err(e) = self.cluster.check_invariants() {
                self.invariant_errors.push(format!("t={}: {e}", ev.time));
            }
        }
        Ok(!self.finished)
    }

    /// Processes every event scheduled at or before `time`.
    pub fn run_until(&mut self, time: f64) -> Result<(), SimError> {
        while !self.finished && self.queue.peek_time().is_some_and(|t| t <= time) {
            self.step()?;
        }
        Ok(())
    }

    /// Processes events until every arrival has completed. Returns the time
    /// of the last completion (0 for an empty workload).
    pub fn run_until_drained(&mut self) -> Result<f64, SimError> {
        while self.step()? {}
        if self.unfinished > 0 || self.pending_arrivals > 0 {
            return Err(SimError::NotDrained(format!(
                "{} unfinished, {} pending arrivals",
                self.unfinished, self.pending_arrivals
            )));
        }
        Ok(self.final_time)
    }

    /// Controller estimates (λ̂, μ̂) per class at the current time.
    pub fn estimates(&self) -> Vec<(f64, f64)> {
        let now = self.queue.now();
        self.estimates.iter().map(|e| (e.lambda_hat(now), e.mu_hat())).collect()
    }

    /// Events accepted but not yet completed.
    pub fn unfinished(&self) -> usize {
        self.unfinished
    }

    fn current_lambdas(&self) -> Vec<f64> {
        let now = self.queue.now();
        self.estimates.iter().map(|e| e.lambda_hat(now)).collect()
    }

    fn current_mus(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.mu_hat()).collect()
    }

    fn on_arrival(&mut self, id: usize) -> Result<(), SimError> {
        let now = self.queue.now();
        let k = self.invocations[id].class;
        self.pending_arrivals -= 1;
        self.unfinished += 1;
        self.estimates[k].arrivals.observe_arrival(now, None);
        self.trace(k, None, "arrival");

        let site = self.dispatch(k)?;
        let inv = &mut self.invocations[id];
        inv.dispatch = Some(now);
        inv.site = Some(site);
        self.cluster.sites[site].unfinished[k] += 1;
        self.trace(k, Some(site), "dispatch");
        self.admit(site, id)
    }

    fn dispatch(&mut self, k: usize) -> Result<usize, SimError> {
        let now = self.queue.now();
        let lambdas = self.current_lambdas();
        let mus = self.current_mus();
        match &mut self.dispatcher {
            Dispatcher::Ow(ow) => {
                let sel = ow.select_host(self.class_hash[k]);
                let site = sel.site();
                ow.on_dispatch(site);
                if matches!(sel, Selection::Random { .. }) {
                    self.trace(k, Some(site), "random_fallback");
                }
                Ok(site)
            }
            Dispatcher::Noncoop(nc) => Ok(nc.dispatch(k, now, &lambdas, &mus)),
            Dispatcher::Noah(state) => {
                if state.table.class_total(k) == 0 {
                    // First contact: seed the rate from one observed arrival.
                    self.estimates[k].arrivals.seed_rate(1.0 / state.cfg.control_period);
                    let lambda = self.estimates[k].lambda_hat(now);
                    let out = noah::control_step(
                        &mut state.table,
                        k,
                        lambda,
                        mus[k],
                        state.alphas[k],
                        state.cfg.c_min.max(1),
                    );
                    if out.saturated {
                        state.stats.saturated_steps += 1;
                    }
                    if let Err(e) = state.table.check() {
                        state.stats.invariant_violations += 1;
                        state.stats.first_violation.get_or_insert(e);
                    }
                }
                // An idle instance only counts while its site has a free
                // execution slot; otherwise it cannot start the event.
                let max_active = self.cluster.cfg.cores as usize;
                let loads: Vec<SiteLoad> = self
                    .cluster
                    .sites
                    .iter()
                    .map(|s| SiteLoad {
                        idle: s.idle_count(k).min(max_active.saturating_sub(s.in_service())),
                        active: s.unfinished[k],
                        alloc: state.table.get(s.id, k),
                    })
                    .collect();
                match noah::dispatch(&loads) {
                    Some(site) => Ok(site),
                    None => {
                        // Cluster-wide allocation capacity exhausted before
                        // this class got a slot: least busy site.
                        state.stats.fallback_dispatches += 1;
                        Ok(self
                            .cluster
                            .sites
                            .iter()
                            .min_by_key(|s| (s.unfinished.iter().sum::<u32>(), s.id))
                            .map(|s| s.id)
                            .expect("at least one site"))
                    }
                }
            }
        }
    }

    /// Invokers run at most one event or setup per core at a time.
    fn max_active(&self) -> usize {
        self.cluster.cfg.cores as usize
    }

    fn may_run(&self, site: usize) -> bool {
        self.cluster.sites[site].in_service() < self.max_active()
    }

    fn est_wait(&self, site: usize, k: usize, ahead: usize) -> f64 {
        let now = self.queue.now();
        let mean = 1.0 / self.estimates[k].mu_hat();
        let s = &self.cluster.sites[site];
        let residuals: Vec<f64> = s
            .pool
            .iter()
            .filter(|c| c.class == k)
            .map(|c| match c.state {
                ContainerState::Active => (mean - (now - c.exec_started)).max(0.0),
                ContainerState::ColdStarting | ContainerState::Initializing => (c.ready_at - now).max(0.0) + mean,
                ContainerState::WarmIdle => 0.0,
            })
            .collect();
        noah::estimate_wait(ahead, &residuals, mean)
    }

    fn noah_spawn_allowed(&self, site: usize, k: usize) -> bool {
        let Dispatcher::Noah(state) = &self.dispatcher else {
            return false;
        };
        let bound = state.table.get(site, k) + state.cfg.spawn_slack;
        (self.cluster.sites[site].instance_count(k) as u32) < bound && self.cluster.spawn_check(site).is_ok()
    }

    fn admit(&mut self, site: usize, id: usize) -> Result<(), SimError> {
        let k = self.invocations[id].class;
        let queue_len = self.cluster.sites[site].queues[k].len();
        if matches!(self.dispatcher, Dispatcher::Noah(_)) {
            let view = AdmitView {
                queue_len,
                idle: self.cluster.sites[site].idle_count(k),
                busy: self.cluster.sites[site].in_service(),
                max_active: self.max_active(),
                est_wait: self.est_wait(site, k, queue_len),
                setup_hat: self.site_setup[site][k].mean(),
                spawn_allowed: self.noah_spawn_allowed(site, k),
            };
            match noah::site_admit_policy(&view) {
                AdmitDecision::RunNow => {
                    let c = self.cluster.sites[site].idle_of(k).expect("idle instance");
                    self.start_exec(site, c, id)
                }
                AdmitDecision::Spawn => self.spawn_for(site, id),
                AdmitDecision::Enqueue => {
                    self.enqueue(site, id);
                    Ok(())
                }
            }
        } else {
            if queue_len == 0 && self.may_run(site) {
                if let Some(c) = self.cluster.sites[site].idle_of(k) {
                    return self.start_exec(site, c, id);
                }
                if self.cluster.spawn_check(site).is_ok() {
                    return self.spawn_for(site, id);
                }
            }
            self.enqueue(site, id);
            self.pump(site)
        }
    }

    fn enqueue(&mut self, site: usize, id: usize) {
        let k = self.invocations[id].class;
        self.cluster.sites[site].queues[k].push_back(id);
        self.trace(k, Some(site), "queued");
    }

    fn spawn_for(&mut self, site: usize, id: usize) -> Result<(), SimError> {
        let now = self.queue.now();
        let k = self.invocations[id].class;
        match self.cluster.spawn(site, k, now) {
            Ok(sp) => self.after_spawn(site, sp, id),
            Err(_) => {
                self.enqueue(site, id);
                Ok(())
            }
        }
    }

    fn after_spawn(&mut self, site: usize, sp: Spawned, id: usize) -> Result<(), SimError> {
        let k = self.invocations[id].class;
        for rec in &sp.evicted {
            self.trace(rec.class, Some(site), "evict");
        }
        self.trace(k, Some(site), "setup_start");
        self.invocations[id].cold = true;
        self.cluster.sites[site]
            .container_mut(sp.container)
            .expect("just spawned")
            .current = Some(id);
        if self.cluster.cfg.setup_consumes_core {
            let key = self.next_task_key();
            let now = self.queue.now();
            self.cluster.sites[site].ps.insert(
                now,
                key,
                sp.setup,
                TaskKind::Setup {
                    container: sp.container,
                },
            );
            self.reschedule_ps(site)?;
        } else {
            self.queue.schedule_in(
                sp.setup,
                Payload::SetupDone {
                    site,
                    container: sp.container,
                },
            )?;
        }
        if sp.stem_used {
            self.queue
                .schedule_in(self.cluster.cfg.setup_cold.0, Payload::StemReady { site })?;
        }
        Ok(())
    }

    fn next_task_key(&mut self) -> u64 {
        let k = self.next_task;
        self.next_task += 1;
        k
    }

    fn reschedule_ps(&mut self, site: usize) -> Result<(), SimError> {
        let s = &mut self.cluster.sites[site];
        s.ps_generation += 1;
        if let Some(t) = s.ps.next_completion() {
            let generation = s.ps_generation;
            let t = t.max(self.queue.now());
            self.queue.schedule(t, Payload::ExecProgress { site, generation })?;
        }
        Ok(())
    }

    fn start_exec(&mut self, site: usize, cid: ContainerId, id: usize) -> Result<(), SimError> {
        let now = self.queue.now();
        let k = self.invocations[id].class;
        let mut work = self.class_exec[k];
        for i in 0..self.class_ops[k].len() {
            let (item, kind) = self.class_ops[k][i];
            let access = match kind {
                AccessKind::Read => self.cluster.read_data(site, item, now),
                AccessKind::Write => self.cluster.write_data(site, item, now),
            };
            work += access.latency;
            if let Some((src, tier)) = access.source {
                if src == site {
                    self.cluster.release_reader(item, src, tier);
                } else {
                    let key = self.next_task_key();
                    self.cluster.sites[src].ps.insert(
                        now,
                        key,
                        access.latency,
                        TaskKind::Transfer {
                            item,
                            replica_site: src,
                            tier,
                        },
                    );
                    self.reschedule_ps(src)?;
                }
            }
        }
        let key = self.next_task_key();
        let s = &mut self.cluster.sites[site];
        let c = s.container_mut(cid).expect("container exists");
        debug_assert!(matches!(c.state, ContainerState::WarmIdle));
        c.state = ContainerState::Active;
        c.exec_started = now;
        c.current = Some(id);
        s.busy_count += 1;
        s.employed = true;
        s.ps.insert(
            now,
            key,
            work,
            TaskKind::Exec {
                container: cid,
                invocation: id,
            },
        );
        let inv = &mut self.invocations[id];
        inv.start = Some(now);
        inv.work = work;
        self.trace(k, Some(site), "exec_start");
        self.reschedule_ps(site)
    }

    fn on_exec_progress(&mut self, site: usize, generation: u64) -> Result<(), SimError> {
        if self.cluster.sites[site].ps_generation != generation {
            return Ok(());
        }
        let now = self.queue.now();
        let done = self.cluster.sites[site].ps.pop_due(now);
        for (_, task) in done {
            match task {
                TaskKind::Exec { container, invocation } => self.complete_exec(site, container, invocation)?,
                TaskKind::Transfer {
                    item,
                    replica_site,
                    tier,
                } => {
                    self.cluster.release_reader(item, replica_site, tier);
                    if let Some(t) = &mut self.trace {
                        t.push(TraceRecord {
                            time: now,
                            class: self.cluster.items[item].name.clone(),
                            site: Some(site),
                            phase: "transfer_done",
                        });
                    }
                }
                TaskKind::Setup { container } => self.on_setup_done(site, container)?,
            }
        }
        self.reschedule_ps(site)
    }

    fn go_idle(&mut self, site: usize, cid: ContainerId) -> Result<(), SimError> {
        let holding = self.cluster.cfg.holding_time.0;
        let c = self.cluster.sites[site].container_mut(cid).expect("container exists");
        c.state = ContainerState::WarmIdle;
        c.current = None;
        c.idle_epoch += 1;
        let epoch = c.idle_epoch;
        self.queue.schedule_in(
            holding,
            Payload::IdleTimeout {
                site,
                container: cid,
                epoch,
            },
        )?;
        Ok(())
    }

    fn complete_exec(&mut self, site: usize, cid: ContainerId, id: usize) -> Result<(), SimError> {
        let now = self.queue.now();
        let k = self.invocations[id].class;
        self.invocations[id].completion = Some(now);
        self.unfinished -= 1;
        let s = &mut self.cluster.sites[site];
        s.unfinished[k] -= 1;
        s.busy_count -= 1;
        let c = s.container_mut(cid).expect("container exists");
        let service = now - c.exec_started;
        c.busy_time_total += service;
        c.last_active_end = now;
        c.served += 1;
        c.state = ContainerState::WarmIdle;
        c.current = None;
        if service > 0.0 {
            let _ = self.estimates[k].service.observe(service);
        }
        if let Dispatcher::Ow(ow) = &mut self.dispatcher {
            ow.on_complete(site);
        }
        self.trace(k, Some(site), "exec_end");

        if !self.cluster.sites[site].queues[k].is_empty() && self.may_run(site) {
            let next = self.cluster.sites[site].queues[k].pop_front().expect("non-empty");
            self.start_exec(site, cid, next)?;
        } else {
            self.go_idle(site, cid)?;
        }
        self.pump(site)?;

        if self.unfinished == 0 && self.pending_arrivals == 0 {
            self.queue.schedule(now, Payload::Shutdown)?;
        }
        Ok(())
    }

    fn on_setup_done(&mut self, site: usize, cid: ContainerId) -> Result<(), SimError> {
        let (k, setup, bound) = {
            let c = self.cluster.sites[site].container(cid).expect("container in setup");
            (c.class, c.setup_duration, c.current)
        };
        if setup > 0.0 {
            let _ = self.site_setup[site][k].observe(setup);
            let _ = self.estimates[k].setup.observe(setup);
        }
        self.trace(k, Some(site), "setup_done");
        {
            let c = self.cluster.sites[site].container_mut(cid).expect("container in setup");
            c.state = ContainerState::WarmIdle;
            c.current = None;
        }
        match bound {
            Some(id) if self.may_run(site) => self.start_exec(site, cid, id),
            Some(id) => {
                self.cluster.sites[site].queues[k].push_front(id);
                self.go_idle(site, cid)
            }
            None => {
                self.go_idle(site, cid)?;
                self.pump(site)
            }
        }
    }

    fn on_idle_timeout(&mut self, site: usize, cid: ContainerId, epoch: u64) {
        let current = self.cluster.sites[site]
            .container(cid)
            .is_some_and(|c| c.state == ContainerState::WarmIdle && c.idle_epoch == epoch);
        if current {
            if let Some(rec) = self.cluster.evict_container(site, cid) {
                self.trace(rec.class, Some(site), "evict");
            }
        }
    }

    fn head_may_spawn(&self, site: usize, k: usize) -> bool {
        match self.dispatcher {
            Dispatcher::Noah(_) => {
                self.est_wait(site, k, 0) > self.site_setup[site][k].mean() && self.noah_spawn_allowed(site, k)
            }
            _ => self.cluster.spawn_check(site).is_ok(),
        }
    }

    /// Serves queued events after capacity frees up: idle instances first,
    /// then new instances where the admission policy allows.
    fn pump(&mut self, site: usize) -> Result<(), SimError> {
        loop {
            let mut order: Vec<(f64, usize)> = self.cluster.sites[site]
                .queues
                .iter()
                .enumerate()
                .filter_map(|(k, q)| q.front().map(|&id| (self.invocations[id].arrival, k)))
                .collect();
            if order.is_empty() {
                return Ok(());
            }
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut progressed = false;
            for (_, k) in order {
                if !self.may_run(site) {
                    return Ok(());
                }
                if let Some(c) = self.cluster.sites[site].idle_of(k) {
                    let id = self.cluster.sites[site].queues[k].pop_front().expect("non-empty");
                    self.start_exec(site, c, id)?;
                    progressed = true;
                } else if self.head_may_spawn(site, k) {
                    let now = self.queue.now();
                    if let Ok(sp) = self.cluster.spawn(site, k, now) {
                        let id = self.cluster.sites[site].queues[k].pop_front().expect("non-empty");
                        self.after_spawn(site, sp, id)?;
                        progressed = true;
                    }
                }
            }
            if !progressed {
                return Ok(());
            }
        }
    }

    fn on_control_tick(&mut self) -> Result<(), SimError> {
        let lambdas = self.current_lambdas();
        let mus = self.current_mus();
        let containers_before = self.cluster.containers_created;
        let pool_before: usize = self.cluster.sites.iter().map(|s| s.pool.len()).sum();
        let Dispatcher::Noah(state) = &mut self.dispatcher else {
            return Ok(());
        };
        let outcomes = noah::control_round(
            &mut state.table,
            &lambdas,
            &mus,
            &state.alphas,
            state.cfg.c_min,
            state.rotation,
        );
        state.rotation = (state.rotation + 1) % lambdas.len().max(1);
        state.stats.control_rounds += 1;
        state.stats.saturated_steps += outcomes.iter().filter(|o| o.saturated).count() as u64;
        if let Err(e) = state.table.check() {
            state.stats.invariant_violations += 1;
            state.stats.first_violation.get_or_insert(e);
        }
        state.stats.max_sites_in_use = state.stats.max_sites_in_use.max(state.table.sites_in_use().len());
        let pool_after: usize = self.cluster.sites.iter().map(|s| s.pool.len()).sum();
        if self.cluster.containers_created != containers_before || pool_after != pool_before {
            state.stats.containers_changed_by_control += 1;
        }
        let period = state.cfg.control_period;
        if self.pending_arrivals > 0 || self.unfinished > 0 {
            self.queue.schedule_in(period, Payload::ControlTick)?;
        }
        Ok(())
    }

    /// Consumes the run and returns its raw results.
    pub fn finish(mut self) -> RunOutput {
        self.cluster.finalize();
        let exec_work = self.invocations.iter().map(|i| i.work).sum();
        let delivered_work = self.cluster.sites.iter().map(|s| s.ps.delivered()).sum();
        let (noah, random_fallbacks) = match self.dispatcher {
            Dispatcher::Noah(state) => (Some(state.stats), 0),
            Dispatcher::Ow(ow) => (None, ow.random_fallbacks),
            Dispatcher::Noncoop(_) => (None, 0),
        };
        RunOutput {
            seed: self.seed,
            scheduler: self.scheduler_label,
            final_time: self.final_time,
            hosts_employed: self.cluster.sites.iter().filter(|s| s.employed).count(),
            hosts: self.cluster.sites.len(),
            containers_created: self.cluster.containers_created,
            records: std::mem::take(&mut self.cluster.records),
            invocations: self.invocations,
            digest: self.digest,
            trace: self.trace.unwrap_or_default(),
            delivered_work,
            exec_work,
            noah,
            random_fallbacks,
            invariant_errors: self.invariant_errors,
            class_names: self.class_names,
        }
    }
}

/// Builds, runs and finishes one simulation.
pub fn run_scenario(scenario: &Scenario, seed: u64, opts: RunOptions) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(scenario, seed, opts)?;
    sim.run_until_drained()?;
    Ok(sim.finish())
}
