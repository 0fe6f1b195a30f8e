//! Sites, processor-sharing execution, container lifecycle and named-data
//! replication.

use std::collections::{BTreeMap, VecDeque};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::units::{Bytes, Seconds};

/// Tolerance, in seconds of ideal work, for treating a task as finished.
const WORK_EPS: f64 = 1e-9;

/// Egalitarian processor sharing on `cores` identical cores.
///
/// Every task progresses at `min(1, cores / n)`. Because all tasks share the
/// same rate, progress is tracked with one virtual-work counter and each task
/// stores the counter value at which it finishes.
#[derive(Debug, Clone)]
pub struct ProcessorShare<T> {
    cores: f64,
    vwork: f64,
    last: f64,
    delivered: f64,
    by_finish: BTreeMap<(OrderedFloat<f64>, u64), T>,
    finish_of: BTreeMap<u64, f64>,
    started_v: BTreeMap<u64, f64>,
}

impl<T> ProcessorShare<T> {
    pub fn new(cores: u32) -> Self {
        Self {
            cores: f64::from(cores),
            vwork: 0.0,
            last: 0.0,
            delivered: 0.0,
            by_finish: BTreeMap::new(),
            finish_of: BTreeMap::new(),
            started_v: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.by_finish.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_finish.is_empty()
    }

    /// Speed fraction every active task currently receives.
    pub fn rate(&self) -> f64 {
        let n = self.by_finish.len();
        if n == 0 {
            1.0
        } else {
            (self.cores / n as f64).min(1.0)
        }
    }

    /// Total ideal work delivered so far (core-seconds).
    pub fn delivered(&self) -> f64 {
        self.delivered
    }

    pub fn advance(&mut self, now: f64) {
        let dt = now - self.last;
        if dt > 0.0 && !self.by_finish.is_empty() {
            let r = self.rate();
            self.vwork += r * dt;
            self.delivered += r * dt * self.by_finish.len() as f64;
        }
        if now > self.last {
            self.last = now;
        }
    }

    pub fn insert(&mut self, now: f64, key: u64, work: f64, payload: T) {
        self.advance(now);
        let finish = self.vwork + work.max(0.0);
        self.by_finish.insert((OrderedFloat(finish), key), payload);
        self.finish_of.insert(key, finish);
        self.started_v.insert(key, self.vwork);
    }

    pub fn remove(&mut self, now: f64, key: u64) -> Option<T> {
        self.advance(now);
        let finish = self.finish_of.remove(&key)?;
        self.started_v.remove(&key);
        self.by_finish.remove(&(OrderedFloat(finish), key))
    }

    /// Ideal work still owed to a task.
    pub fn remaining(&self, now: f64, key: u64) -> Option<f64> {
        let finish = *self.finish_of.get(&key)?;
        let dt = (now - self.last).max(0.0);
        Some((finish - (self.vwork + self.rate() * dt)).max(0.0))
    }

    /// Ideal work a task has received so far.
    pub fn attained(&self, now: f64, key: u64) -> Option<f64> {
        let start = *self.started_v.get(&key)?;
        let dt = (now - self.last).max(0.0);
        Some(self.vwork + self.rate() * dt - start)
    }

    /// Absolute time of the next completion if the task set stays unchanged.
    pub fn next_completion(&self) -> Option<f64> {
        let (&(OrderedFloat(finish), _), _) = self.by_finish.iter().next()?;
        Some(self.last + (finish - self.vwork).max(0.0) / self.rate())
    }

    /// Removes every task that has finished by `now`, in finish order.
    pub fn pop_due(&mut self, now: f64) -> Vec<(u64, T)> {
        self.advance(now);
        let mut done = Vec::new();
        while let Some(entry) = self.by_finish.first_entry() {
            let (OrderedFloat(finish), key) = *entry.key();
            if finish > self.vwork + WORK_EPS {
                break;
            }
            let payload = entry.remove();
            self.finish_of.remove(&key);
            self.started_v.remove(&key);
            done.push((key, payload));
        }
        done
    }

    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.finish_of.keys().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContainerId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerState {
    ColdStarting,
    Initializing,
    WarmIdle,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warmth {
    Cold,
    Prewarmed,
}

#[derive(Debug, Clone)]
pub struct ContainerInstance {
    pub id: ContainerId,
    pub class: usize,
    pub state: ContainerState,
    pub warmth: Warmth,
    pub created_at: f64,
    pub setup_duration: f64,
    pub ready_at: f64,
    pub last_active_end: f64,
    pub busy_time_total: f64,
    pub exec_started: f64,
    /// Invocation currently bound to this instance (being set up for, or
    /// executing).
    pub current: Option<usize>,
    /// Bumped every time the instance goes idle; stale idle timers carry an
    /// older epoch.
    pub idle_epoch: u64,
    pub served: u64,
}

/// Lifetime summary of a container, finalised at eviction or end of run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainerRecord {
    pub site: usize,
    pub class: usize,
    pub created_at: f64,
    pub setup_duration: f64,
    pub last_active_end: f64,
    pub busy_time_total: f64,
    pub served: u64,
}

impl ContainerInstance {
    fn record(&self, site: usize) -> ContainerRecord {
        ContainerRecord {
            site,
            class: self.class,
            created_at: self.created_at,
            setup_duration: self.setup_duration,
            last_active_end: self.last_active_end,
            busy_time_total: self.busy_time_total,
            served: self.served,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Disk,
    Memory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replica {
    pub site: usize,
    pub tier: Tier,
    pub readers: u32,
    pub last_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub name: String,
    pub size: f64,
    pub replicas: Vec<Replica>,
}

/// Scenario description of a data item's initial replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataItemSpec {
    pub name: String,
    pub size: Bytes,
    pub site: usize,
    #[serde(default = "default_tier")]
    pub tier: Tier,
}

fn default_tier() -> Tier {
    Tier::Disk
}

/// Result of a named-data access.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Access {
    pub latency: f64,
    /// Replica the item was pulled from, unless a local memory copy served it.
    pub source: Option<(usize, Tier)>,
}

/// Hardware and container-pool parameters shared by all sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub hosts: usize,
    pub cores: u32,
    pub mem_capacity: Bytes,
    pub disk_speed: Bytes,
    pub net_speed: Bytes,
    pub mem_speed: Bytes,
    pub container_cap: usize,
    /// Idle time after which a warm container is removed.
    pub holding_time: Seconds,
    pub setup_cold: Seconds,
    pub setup_prewarm: Seconds,
    /// Stem containers kept ready per site.
    pub prewarm_pool: usize,
    /// Function code transferred on the first cold start of a class per site.
    pub code_size: Bytes,
    pub instance_footprint: Bytes,
    pub setup_consumes_core: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            hosts: 10,
            cores: 16,
            mem_capacity: Bytes(256e9),
            disk_speed: Bytes(711e6),
            net_speed: Bytes(1135e6),
            mem_speed: Bytes(12.8e9),
            container_cap: 32,
            holding_time: Seconds(300.0),
            setup_cold: Seconds(0.5),
            setup_prewarm: Seconds(0.05),
            prewarm_pool: 0,
            code_size: Bytes(0.0),
            instance_footprint: Bytes(256.0 * 1024.0 * 1024.0),
            setup_consumes_core: false,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Scenario(format!("cluster: {m}")));
        if self.hosts == 0 {
            return bad("hosts must be >= 1");
        }
        if self.cores == 0 {
            return bad("cores must be >= 1");
        }
        if self.container_cap == 0 {
            return bad("container_cap must be >= 1");
        }
        if self.prewarm_pool > self.container_cap {
            return bad("prewarm_pool exceeds container_cap");
        }
        for (name, v) in [
            ("disk_speed", self.disk_speed.0),
            ("net_speed", self.net_speed.0),
            ("mem_speed", self.mem_speed.0),
        ] {
            if !(v > 0.0) {
                return bad(&format!("{name} must be > 0"));
            }
        }
        if !(self.setup_cold.0 >= 0.0) || !(self.setup_prewarm.0 >= 0.0) || !(self.holding_time.0 > 0.0) {
            return bad("setup and holding times must be non-negative");
        }
        Ok(())
    }
}

/// Kind of work item sharing a site's cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Exec {
        container: ContainerId,
        invocation: usize,
    },
    Transfer {
        item: usize,
        replica_site: usize,
        tier: Tier,
    },
    Setup {
        container: ContainerId,
    },
}

#[derive(Debug, Clone)]
pub struct Site {
    pub id: usize,
    pub pool: Vec<ContainerInstance>,
    /// Per-class FIFO of invocations waiting at this site.
    pub queues: Vec<VecDeque<usize>>,
    /// Per-class accepted-but-unfinished invocations.
    pub unfinished: Vec<u32>,
    pub busy_count: usize,
    pub mem_used: f64,
    pub stems: usize,
    pub code_loaded: Vec<bool>,
    pub ps: ProcessorShare<TaskKind>,
    pub ps_generation: u64,
    pub employed: bool,
}

impl Site {
    fn new(id: usize, cores: u32, classes: usize, stems: usize) -> Self {
        Self {
            id,
            pool: Vec::new(),
            queues: vec![VecDeque::new(); classes],
            unfinished: vec![0; classes],
            busy_count: 0,
            mem_used: 0.0,
            stems,
            code_loaded: vec![false; classes],
            ps: ProcessorShare::new(cores),
            ps_generation: 0,
            employed: false,
        }
    }

    pub fn container(&self, id: ContainerId) -> Option<&ContainerInstance> {
        self.pool.iter().find(|c| c.id == id)
    }

    pub fn container_mut(&mut self, id: ContainerId) -> Option<&mut ContainerInstance> {
        self.pool.iter_mut().find(|c| c.id == id)
    }

    /// Most recently used idle instance of a class.
    pub fn idle_of(&self, class: usize) -> Option<ContainerId> {
        self.pool
            .iter()
            .filter(|c| c.class == class && c.state == ContainerState::WarmIdle)
            .max_by(|a, b| a.last_active_end.total_cmp(&b.last_active_end).then(a.id.cmp(&b.id)))
            .map(|c| c.id)
    }

    pub fn idle_count(&self, class: usize) -> usize {
        self.pool
            .iter()
            .filter(|c| c.class == class && c.state == ContainerState::WarmIdle)
            .count()
    }

    pub fn instance_count(&self, class: usize) -> usize {
        self.pool.iter().filter(|c| c.class == class).count()
    }

    pub fn active_count(&self, class: usize) -> usize {
        self.pool
            .iter()
            .filter(|c| c.class == class && c.state == ContainerState::Active)
            .count()
    }

    /// Containers still in setup.
    pub fn starting_count(&self) -> usize {
        self.pool
            .iter()
            .filter(|c| matches!(c.state, ContainerState::ColdStarting | ContainerState::Initializing))
            .count()
    }

    /// Execution slots in use: running events plus containers in setup.
    pub fn in_service(&self) -> usize {
        self.busy_count + self.starting_count()
    }

    /// Slots held by containers and ready stems.
    pub fn occupied(&self) -> usize {
        self.pool.len() + self.stems
    }

    /// Least recently used idle instance.
    pub fn lru_idle(&self) -> Option<ContainerId> {
        self.pool
            .iter()
            .filter(|c| c.state == ContainerState::WarmIdle)
            .min_by(|a, b| a.last_active_end.total_cmp(&b.last_active_end).then(a.id.cmp(&b.id)))
            .map(|c| c.id)
    }

    /// Speed fraction of every active task on this site.
    pub fn processor_share_rates(&self) -> BTreeMap<ContainerId, f64> {
        let r = self.ps.rate();
        self.pool
            .iter()
            .filter(|c| c.state == ContainerState::Active)
            .map(|c| (c.id, r))
            .collect()
    }
}

/// Outcome of a successful spawn.
#[derive(Debug, Clone, PartialEq)]
pub struct Spawned {
    pub container: ContainerId,
    pub setup: f64,
    pub warmth: Warmth,
    pub evicted: Vec<ContainerRecord>,
    /// A stem was consumed and should be replenished.
    pub stem_used: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpawnBlocked {
    /// Container cap reached and nothing idle to evict.
    Capacity,
    /// Memory exhausted even after evicting idle instances and cached data.
    Memory,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub cfg: ClusterConfig,
    pub sites: Vec<Site>,
    pub items: Vec<DataItem>,
    item_index: BTreeMap<String, usize>,
    next_container: u64,
    pub records: Vec<ContainerRecord>,
    pub containers_created: u64,
    pub prewarm_starts: u64,
    pub evictions: u64,
}

impl Cluster {
    pub fn new(cfg: ClusterConfig, classes: usize, items: &[DataItemSpec]) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut sites: Vec<Site> = (0..cfg.hosts)
            .map(|i| Site::new(i, cfg.cores, classes, cfg.prewarm_pool))
            .collect();
        for s in &mut sites {
            s.mem_used = s.stems as f64 * cfg.instance_footprint.0;
        }
        let mut item_index = BTreeMap::new();
        let mut data = Vec::new();
        for spec in items {
            if spec.site >= cfg.hosts {
                return Err(SimError::Scenario(format!(
                    "data item `{}` placed on unknown site {}",
                    spec.name, spec.site
                )));
            }
            if item_index.insert(spec.name.clone(), data.len()).is_some() {
                return Err(SimError::Scenario(format!("duplicate data item `{}`", spec.name)));
            }
            if spec.tier == Tier::Memory {
                sites[spec.site].mem_used += spec.size.0;
            }
            data.push(DataItem {
                name: spec.name.clone(),
                size: spec.size.0,
                replicas: vec![Replica {
                    site: spec.site,
                    tier: spec.tier,
                    readers: 0,
                    last_used: 0.0,
                }],
            });
        }
        Ok(Self {
            cfg,
            sites,
            items: data,
            item_index,
            next_container: 0,
            records: Vec::new(),
            containers_created: 0,
            prewarm_starts: 0,
            evictions: 0,
        })
    }

    pub fn item_id(&self, name: &str) -> Result<usize, SimError> {
        self.item_index
            .get(name)
            .copied()
            .ok_or_else(|| SimError::UnknownDataItem(name.to_string()))
    }

    fn tier_speed(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Disk => self.cfg.disk_speed.0,
            Tier::Memory => self.cfg.mem_speed.0,
        }
    }

    fn remove_container(&mut self, site: usize, id: ContainerId) -> Option<ContainerRecord> {
        let s = &mut self.sites[site];
        let idx = s.pool.iter().position(|c| c.id == id)?;
        let c = s.pool.remove(idx);
        s.mem_used -= self.cfg.instance_footprint.0;
        let rec = c.record(site);
        self.records.push(rec.clone());
        self.evictions += 1;
        Some(rec)
    }

    /// Removes the least recently used idle instance of a site.
    pub fn evict_idle(&mut self, site: usize) -> Option<ContainerRecord> {
        let id = self.sites[site].lru_idle()?;
        self.remove_container(site, id)
    }

    /// Removes a specific idle instance (holding-time expiry).
    pub fn evict_container(&mut self, site: usize, id: ContainerId) -> Option<ContainerRecord> {
        match self.sites[site].container(id) {
            Some(c) if c.state == ContainerState::WarmIdle => self.remove_container(site, id),
            _ => None,
        }
    }

    /// Drops least recently used memory replicas that have another copy
    /// elsewhere and no readers until `needed` bytes fit.
    fn free_cached_data(&mut self, site: usize, needed: f64) {
        let cap = self.cfg.mem_capacity.0;
        while self.sites[site].mem_used + needed > cap {
            let mut victim: Option<(usize, usize, f64)> = None;
            for (i, item) in self.items.iter().enumerate() {
                if item.replicas.len() < 2 {
                    continue;
                }
                for (r, rep) in item.replicas.iter().enumerate() {
                    if rep.site == site
                        && rep.tier == Tier::Memory
                        && rep.readers == 0
                        && victim.is_none_or(|(_, _, t)| rep.last_used < t)
                    {
                        victim = Some((i, r, rep.last_used));
                    }
                }
            }
            let Some((i, r, _)) = victim else { break };
            let size = self.items[i].size;
            self.items[i].replicas.remove(r);
            self.sites[site].mem_used -= size;
        }
    }

    /// Whether a new container of `class` could be placed now, possibly
    /// after evicting idle instances.
    pub fn spawn_check(&self, site: usize) -> Result<(), SpawnBlocked> {
        let s = &self.sites[site];
        let has_idle = s.lru_idle().is_some();
        if s.stems > 0 {
            return Ok(());
        }
        if s.occupied() >= self.cfg.container_cap && !has_idle {
            return Err(SpawnBlocked::Capacity);
        }
        let foot = self.cfg.instance_footprint.0;
        if s.mem_used + foot > self.cfg.mem_capacity.0 {
            let reclaimable: f64 = s.pool.iter().filter(|c| c.state == ContainerState::WarmIdle).count() as f64 * foot
                + self.cached_bytes(site);
            if s.mem_used + foot - reclaimable > self.cfg.mem_capacity.0 {
                return Err(SpawnBlocked::Memory);
            }
        }
        Ok(())
    }

    fn cached_bytes(&self, site: usize) -> f64 {
        self.items
            .iter()
            .filter(|it| it.replicas.len() > 1)
            .flat_map(|it| it.replicas.iter().map(move |r| (it.size, r)))
            .filter(|(_, r)| r.site == site && r.tier == Tier::Memory && r.readers == 0)
            .map(|(size, _)| size)
            .sum()
    }

    /// Creates an instance of `class` at `site`, evicting LRU idle instances
    /// if the pool or memory is full. The instance starts in its setup phase.
    pub fn spawn(&mut self, site: usize, class: usize, now: f64) -> Result<Spawned, SpawnBlocked> {
        self.spawn_check(site)?;
        let mut evicted = Vec::new();
        let use_stem = self.sites[site].stems > 0;
        let foot = self.cfg.instance_footprint.0;
        if use_stem {
            self.sites[site].stems -= 1;
            // The stem's memory becomes the instance's memory.
            self.sites[site].mem_used -= foot;
        } else {
            while self.sites[site].occupied() >= self.cfg.container_cap {
                match self.evict_idle(site) {
                    Some(r) => evicted.push(r),
                    None => return Err(SpawnBlocked::Capacity),
                }
            }
        }
        if self.sites[site].mem_used + foot > self.cfg.mem_capacity.0 {
            self.free_cached_data(site, foot);
        }
        while self.sites[site].mem_used + foot > self.cfg.mem_capacity.0 {
            match self.evict_idle(site) {
                Some(r) => evicted.push(r),
                None => return Err(SpawnBlocked::Memory),
            }
        }
        let (warmth, mut setup) = if use_stem {
            self.prewarm_starts += 1;
            (Warmth::Prewarmed, self.cfg.setup_prewarm.0)
        } else {
            (Warmth::Cold, self.cfg.setup_cold.0)
        };
        let s = &mut self.sites[site];
        if !s.code_loaded[class] {
            s.code_loaded[class] = true;
            setup += self.cfg.code_size.0 / self.cfg.net_speed.0;
        }
        let id = ContainerId(self.next_container);
        self.next_container += 1;
        s.mem_used += foot;
        s.pool.push(ContainerInstance {
            id,
            class,
            state: match warmth {
                Warmth::Cold => ContainerState::ColdStarting,
                Warmth::Prewarmed => ContainerState::Initializing,
            },
            warmth,
            created_at: now,
            setup_duration: setup,
            ready_at: now + setup,
            last_active_end: now,
            busy_time_total: 0.0,
            exec_started: 0.0,
            current: None,
            idle_epoch: 0,
            served: 0,
        });
        self.containers_created += 1;
        Ok(Spawned {
            container: id,
            setup,
            warmth,
            evicted,
            stem_used: use_stem,
        })
    }

    /// Adds a stem container if a slot is free.
    pub fn replenish_stem(&mut self, site: usize) -> bool {
        let foot = self.cfg.instance_footprint.0;
        let s = &mut self.sites[site];
        if s.stems < self.cfg.prewarm_pool
            && s.occupied() < self.cfg.container_cap
            && s.mem_used + foot <= self.cfg.mem_capacity.0
        {
            s.stems += 1;
            s.mem_used += foot;
            true
        } else {
            false
        }
    }

    /// Resolves a named-data access from `site`. A remote or disk read pulls
    /// the item into local memory from the replica with the fewest
    /// concurrent readers; the chosen replica's reader count is incremented
    /// and must be released with [`Cluster::release_reader`].
    pub fn read_data(&mut self, site: usize, item: usize, now: f64) -> Access {
        let size = self.items[item].size;
        let mem_speed = self.cfg.mem_speed.0;
        if let Some(rep) = self.items[item]
            .replicas
            .iter_mut()
            .find(|r| r.site == site && r.tier == Tier::Memory)
        {
            rep.last_used = now;
            return Access {
                latency: size / mem_speed,
                source: None,
            };
        }
        let src_idx = {
            let reps = &self.items[item].replicas;
            (0..reps.len())
                .min_by(|&a, &b| {
                    let (ra, rb) = (&reps[a], &reps[b]);
                    ra.readers
                        .cmp(&rb.readers)
                        .then_with(|| self.tier_speed(rb.tier).total_cmp(&self.tier_speed(ra.tier)))
                        .then(ra.site.cmp(&rb.site))
                })
                .expect("every item has at least one replica")
        };
        let (src_site, src_tier) = {
            let r = &mut self.items[item].replicas[src_idx];
            r.readers += 1;
            r.last_used = now;
            (r.site, r.tier)
        };
        let mut speed = self.tier_speed(src_tier).min(mem_speed);
        if src_site != site {
            speed = speed.min(self.cfg.net_speed.0);
        }
        let latency = size / speed;
        self.free_cached_data(site, size);
        self.items[item].replicas.push(Replica {
            site,
            tier: Tier::Memory,
            readers: 0,
            last_used: now,
        });
        self.sites[site].mem_used += size;
        Access {
            latency,
            source: Some((src_site, src_tier)),
        }
    }

    /// A write makes the local memory copy the only memory copy.
    pub fn write_data(&mut self, site: usize, item: usize, now: f64) -> Access {
        let access = self.read_data(site, item, now);
        let size = self.items[item].size;
        let mut freed = Vec::new();
        self.items[item].replicas.retain(|r| {
            let drop = r.tier == Tier::Memory && r.site != site && r.readers == 0;
            if drop {
                freed.push(r.site);
            }
            !drop
        });
        for s in freed {
            self.sites[s].mem_used -= size;
        }
        access
    }

    pub fn release_reader(&mut self, item: usize, replica_site: usize, tier: Tier) {
        if let Some(r) = self.items[item]
            .replicas
            .iter_mut()
            .find(|r| r.site == replica_site && r.tier == tier && r.readers > 0)
        {
            r.readers -= 1;
        }
    }

    /// Finalises the records of all containers still alive.
    pub fn finalize(&mut self) {
        for site in 0..self.sites.len() {
            let recs: Vec<ContainerRecord> = self.sites[site].pool.iter().map(|c| c.record(site)).collect();
            self.records.extend(recs);
        }
    }

    /// Checks the structural invariants of every site.
    pub fn check_invariants(&self) -> Result<(), String> {
        for s in &self.sites {
            if s.occupied() > self.cfg.container_cap {
                return Err(format!(
                    "site {} holds {} containers > cap {}",
                    s.id,
                    s.occupied(),
                    self.cfg.container_cap
                ));
            }
            let active = s.pool.iter().filter(|c| c.state == ContainerState::Active).count();
            if active != s.busy_count {
                return Err(format!(
                    "site {} busy_count {} != active {}",
                    s.id, s.busy_count, active
                ));
            }
            if s.mem_used > self.cfg.mem_capacity.0 + 1e-6 {
                return Err(format!("site {} memory {} exceeds capacity", s.id, s.mem_used));
            }
            for c in &s.pool {
                if c.busy_time_total > c.last_active_end - c.created_at + 1e-9 {
                    return Err(format!("container {:?} busy longer than its life", c.id));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster() -> Cluster {
        Cluster::new(ClusterConfig::default(), 2, &[]).unwrap()
    }

    #[test]
    fn share_rates() {
        let mut ps: ProcessorShare<()> = ProcessorShare::new(16);
        for k in 0..8 {
            ps.insert(0.0, k, 0.2, ());
        }
        assert_eq!(ps.rate(), 1.0);
        for k in 8..32 {
            ps.insert(0.0, k, 0.2, ());
        }
        assert_eq!(ps.rate(), 0.5);
        assert!((ps.next_completion().unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn piecewise_share() {
        // 20 tasks on 16 cores for 100 ms, then 10 remain.
        let mut ps: ProcessorShare<()> = ProcessorShare::new(16);
        for k in 0..20 {
            ps.insert(0.0, k, if k < 10 { 0.08 } else { 1.0 }, ());
        }
        assert!((ps.attained(0.1, 0).unwrap() - 0.08).abs() < 1e-12);
        let done = ps.pop_due(0.1);
        assert_eq!(done.len(), 10);
        assert_eq!(ps.rate(), 1.0);
        assert!((ps.remaining(0.1, 15).unwrap() - 0.92).abs() < 1e-12);
        assert!((ps.delivered() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn cold_spawn_setup() {
        let mut c = cluster();
        let s = c.spawn(0, 0, 1.0).unwrap();
        assert_eq!(s.setup, 0.5);
        assert_eq!(s.warmth, Warmth::Cold);
        assert_eq!(c.sites[0].pool[0].state, ContainerState::ColdStarting);
        assert_eq!(c.containers_created, 1);
    }

    #[test]
    fn first_spawn_pays_code_transfer() {
        let cfg = ClusterConfig {
            code_size: Bytes(11.35e6),
            ..ClusterConfig::default()
        };
        let mut c = Cluster::new(cfg, 1, &[]).unwrap();
        let first = c.spawn(0, 0, 0.0).unwrap();
        assert!((first.setup - 0.51).abs() < 1e-12);
        let second = c.spawn(0, 0, 0.0).unwrap();
        assert_eq!(second.setup, 0.5);
    }

    #[test]
    fn prewarmed_spawn() {
        let cfg = ClusterConfig {
            prewarm_pool: 1,
            ..ClusterConfig::default()
        };
        let mut c = Cluster::new(cfg, 1, &[]).unwrap();
        let s = c.spawn(0, 0, 0.0).unwrap();
        assert_eq!(s.warmth, Warmth::Prewarmed);
        assert_eq!(s.setup, 0.05);
        assert!(s.stem_used);
        assert_eq!(c.sites[0].stems, 0);
        assert!(c.replenish_stem(0));
    }

    fn make_idle(c: &mut Cluster, site: usize, id: ContainerId, last: f64) {
        let inst = c.sites[site].container_mut(id).unwrap();
        inst.state = ContainerState::WarmIdle;
        inst.last_active_end = last;
    }

    #[test]
    fn lru_eviction() {
        let mut c = cluster();
        let a = c.spawn(0, 0, 0.0).unwrap().container;
        let b = c.spawn(0, 1, 0.0).unwrap().container;
        make_idle(&mut c, 0, a, 3.0);
        make_idle(&mut c, 0, b, 7.0);
        let rec = c.evict_idle(0).unwrap();
        assert_eq!(rec.last_active_end, 3.0);
        assert_eq!(c.sites[0].pool.len(), 1);
    }

    #[test]
    fn nothing_to_evict_when_all_busy() {
        let mut c = cluster();
        c.spawn(0, 0, 0.0).unwrap();
        assert!(c.evict_idle(0).is_none());
    }

    #[test]
    fn full_pool_blocks_then_evicts() {
        let mut c = cluster();
        let mut ids = Vec::new();
        for _ in 0..32 {
            ids.push(c.spawn(0, 0, 0.0).unwrap().container);
        }
        assert_eq!(c.spawn(0, 1, 0.0).unwrap_err(), SpawnBlocked::Capacity);
        make_idle(&mut c, 0, ids[5], 1.0);
        let s = c.spawn(0, 1, 2.0).unwrap();
        assert_eq!(s.evicted.len(), 1);
        assert_eq!(c.sites[0].pool.len(), 32);
        c.check_invariants().unwrap();
    }

    #[test]
    fn data_access_latencies() {
        let items = [
            DataItemSpec {
                name: "a".into(),
                size: Bytes(1e6),
                site: 0,
                tier: Tier::Memory,
            },
            DataItemSpec {
                name: "b".into(),
                size: Bytes(1e6),
                site: 1,
                tier: Tier::Disk,
            },
        ];
        let mut c = Cluster::new(ClusterConfig::default(), 1, &items).unwrap();
        let local = c.read_data(0, 0, 0.0);
        assert!((local.latency - 78.125e-6).abs() < 1e-12);
        assert!(local.source.is_none());
        let remote = c.read_data(0, 1, 0.0);
        assert!((remote.latency - 1.0 / 711.0).abs() < 1e-12);
        assert_eq!(remote.source, Some((1, Tier::Disk)));
        // Now cached locally.
        let again = c.read_data(0, 1, 1.0);
        assert!(again.source.is_none());
        assert!(c.item_id("zzz").is_err());
    }

    #[test]
    fn least_loaded_replica() {
        let items = [DataItemSpec {
            name: "x".into(),
            size: Bytes(1e6),
            site: 1,
            tier: Tier::Memory,
        }];
        let cfg = ClusterConfig {
            hosts: 4,
            ..ClusterConfig::default()
        };
        let mut c = Cluster::new(cfg, 1, &items).unwrap();
        c.items[0].replicas.push(Replica {
            site: 2,
            tier: Tier::Memory,
            readers: 0,
            last_used: 0.0,
        });
        c.items[0].replicas[0].readers = 2;
        let a = c.read_data(3, 0, 0.0);
        assert_eq!(a.source, Some((2, Tier::Memory)));
    }
}
