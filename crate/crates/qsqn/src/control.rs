//! Control strategies and the simulated secondary-storage model.
//!
//! The evaluation loop repeatedly picks one active edge and fires it; which
//! edge is entirely up to a [`Strategy`]. Strategies only observe the
//! engine through the read-only [`ControlContext`], so they cannot change
//! semantics — any selection order computes the same answers, only with
//! different cost profiles.
//!
//! Three strategies ship with the crate:
//!
//! * [`Fifo`] — fire edges in the order they became active (stable
//!   baseline, breadth-first-ish);
//! * [`DepthFirst`] — follow modification timestamps: prefer the most
//!   recently changed node, and within a node prefer the program-order
//!   clause / the in-clause continuation, mimicking Prolog's clause-order
//!   sensitivity;
//! * [`DiskMin`] — minimize secondary-storage traffic: prefer edges whose
//!   firing needs no page loads under the current buffer-pool state, then
//!   edges that enable further in-memory operations, then bigger batches.
//!
//! Storage is simulated by [`RelationStore`]: master sets (extensional
//! relations, `tuples(...)`, `subqueries(...)`) are divided into pages with
//! a fixed item capacity and compete for a bounded buffer pool with LRU
//! eviction; per-edge working buffers (`unprocessed*`) are considered
//! memory-resident and free. Reading a relation touches all of its pages;
//! appending touches the trailing partial page (new pages are allocated
//! in memory without a load). The same page-op lists drive both the cost
//! charging and the "can this fire run without loads?" prediction, so the
//! disk-minimizing strategy can be audited: it never selects an edge that
//! needs loads while a load-free active edge exists.

use std::collections::HashMap;

use crate::net::{Edge, NetStructure, NodeId};
use crate::term::PredId;

/// A pageable relation: an extensional relation or one of the master sets
/// attached to a node. Working buffers are not pageable.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum RelKey {
    /// The extensional relation `I(p)`.
    Edb(PredId),
    /// `tuples(input_p)` / `tuples(ans_p)` (or `tuplePairs(input_p)`).
    Tuples(NodeId),
    /// `subqueries(filter_i_j)`.
    Subqueries(NodeId),
}

/// One storage-touching step of a fire, at page-op granularity.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PageOp {
    /// Read the whole relation (joins, subsumption checks).
    Scan(RelKey),
    /// Append up to this many items (subsumption may add fewer; the
    /// prediction uses the upper bound, the charge uses actual counts).
    Append(RelKey, usize),
}

/// Counters for the simulated storage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PageStats {
    /// Pages read from secondary storage.
    pub loads: u64,
    /// Dirty pages written back on eviction.
    pub unloads: u64,
}

#[derive(Clone, Copy, Debug)]
struct PoolEntry {
    rel: RelKey,
    page: usize,
    last_used: u64,
    dirty: bool,
}

/// Simulated paged storage with an LRU buffer pool.
///
/// The pool never exceeds `memory_pages` entries, so it is kept as a flat
/// vector: residency checks and LRU eviction are short linear scans, which
/// keeps the page-level charging off the evaluation's critical path.
#[derive(Clone, Debug)]
pub struct RelationStore {
    page_capacity: usize,
    memory_pages: usize,
    lens: HashMap<RelKey, usize>,
    pool: Vec<PoolEntry>,
    clock: u64,
    pub stats: PageStats,
}

impl RelationStore {
    /// `page_capacity` = items per page (at least 1); `memory_pages` = buffer
    /// pool size in pages (at least 1).
    pub fn new(page_capacity: usize, memory_pages: usize) -> Self {
        RelationStore {
            page_capacity: page_capacity.max(1),
            memory_pages: memory_pages.max(1),
            lens: HashMap::new(),
            pool: Vec::new(),
            clock: 0,
            stats: PageStats::default(),
        }
    }

    fn len(&self, rel: RelKey) -> usize {
        self.lens.get(&rel).copied().unwrap_or(0)
    }

    fn page_count(&self, rel: RelKey) -> usize {
        self.len(rel).div_ceil(self.page_capacity)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn evict_for_room(&mut self) {
        while self.pool.len() >= self.memory_pages {
            let victim = self
                .pool
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| (e.last_used, (e.rel, e.page)))
                .map(|(i, _)| i)
                .expect("pool is non-empty");
            if self.pool.swap_remove(victim).dirty {
                self.stats.unloads += 1;
            }
        }
    }

    /// Makes a page resident, loading it if necessary.
    fn touch(&mut self, rel: RelKey, page: usize, write: bool) {
        let now = self.tick();
        if let Some(e) = self.pool.iter_mut().find(|e| e.rel == rel && e.page == page) {
            e.last_used = now;
            e.dirty |= write;
            return;
        }
        self.evict_for_room();
        self.stats.loads += 1;
        self.pool.push(PoolEntry { rel, page, last_used: now, dirty: write });
    }

    /// Makes a freshly allocated page resident without a load.
    fn allocate(&mut self, rel: RelKey, page: usize) {
        let now = self.tick();
        self.evict_for_room();
        self.pool.push(PoolEntry { rel, page, last_used: now, dirty: true });
    }

    /// Reads the whole relation.
    pub fn scan(&mut self, rel: RelKey) {
        let n = self.page_count(rel);
        if n < self.memory_pages {
            for page in 0..n {
                self.touch(rel, page, false);
            }
        } else {
            self.scan_batched(rel, n);
        }
    }

    /// Scans a relation of `n >= memory_pages` pages in one step. Exactly
    /// equivalent to touching pages 0..n in order: such a scan always ends
    /// with the pool holding the last `memory_pages` pages, so the per-page
    /// walk can be replaced by a replay over the (at most pool-sized) set of
    /// previously resident entries. Old entries are consumed in LRU order as
    /// miss demand accumulates; a resident page of `rel` is a hit only if it
    /// is reached before being consumed, and a refreshed hit is itself
    /// evicted later unless it lies in the final window.
    fn scan_batched(&mut self, rel: RelKey, n: usize) {
        let m = self.memory_pages;
        let e_len = self.pool.len();
        let mut order: Vec<usize> = (0..e_len).collect();
        order.sort_unstable_by_key(|&i| {
            let e = &self.pool[i];
            (e.last_used, (e.rel, e.page))
        });
        let mut rel_pages: Vec<usize> = (0..e_len).filter(|&i| self.pool[i].rel == rel).collect();
        rel_pages.sort_unstable_by_key(|&i| self.pool[i].page);

        const ALIVE: u8 = 0;
        const EVICTED: u8 = 1;
        const HIT: u8 = 2;
        let mut state = vec![ALIVE; e_len];
        let mut pos = 0;
        let mut evictions = 0usize;
        let mut misses = 0usize;
        let mut cursor = 0usize;
        let mut hits: Vec<(usize, bool)> = Vec::new();
        let consume = |target: usize,
                           pos: &mut usize,
                           evictions: &mut usize,
                           state: &mut Vec<u8>,
                           unloads: &mut u64| {
            while *evictions < target && *pos < order.len() {
                let j = order[*pos];
                *pos += 1;
                if state[j] == ALIVE {
                    state[j] = EVICTED;
                    if self.pool[j].dirty {
                        *unloads += 1;
                    }
                    *evictions += 1;
                }
            }
        };
        for &i in &rel_pages {
            let page = self.pool[i].page;
            debug_assert!(page < n, "pool holds a page past the relation's end");
            misses += page - cursor;
            let target = (e_len + misses).saturating_sub(m);
            consume(target, &mut pos, &mut evictions, &mut state, &mut self.stats.unloads);
            if state[i] == EVICTED {
                misses += 1;
            } else {
                state[i] = HIT;
                hits.push((page, self.pool[i].dirty));
            }
            cursor = page + 1;
        }
        misses += n - cursor;
        let target = (e_len + misses).saturating_sub(m);
        consume(target, &mut pos, &mut evictions, &mut state, &mut self.stats.unloads);
        for &(page, dirty) in &hits {
            if dirty && page < n - m {
                self.stats.unloads += 1;
            }
        }
        self.stats.loads += misses as u64;
        let base = self.clock;
        self.clock += n as u64;
        self.pool.clear();
        for page in (n - m)..n {
            let dirty = hits.iter().any(|&(p, d)| p == page && d);
            self.pool.push(PoolEntry { rel, page, last_used: base + page as u64 + 1, dirty });
        }
    }

    /// Appends `added` items: the trailing partial page is rewritten (and
    /// reloaded if evicted), new pages are allocated in memory.
    pub fn append(&mut self, rel: RelKey, added: usize) {
        if added == 0 {
            return;
        }
        let len = self.len(rel);
        let old_pages = self.page_count(rel);
        if len % self.page_capacity != 0 {
            self.touch(rel, old_pages - 1, true);
        }
        let new_len = len + added;
        self.lens.insert(rel, new_len);
        for page in old_pages..new_len.div_ceil(self.page_capacity) {
            self.allocate(rel, page);
        }
    }

    /// Removes `removed` items (subsumption deletions). Pages that fall off
    /// the end are dropped from the pool; the rewrite itself is not charged
    /// (it happens during an insertion that already touched the relation).
    pub fn remove(&mut self, rel: RelKey, removed: usize) {
        if removed == 0 {
            return;
        }
        let len = self.len(rel).saturating_sub(removed);
        self.lens.insert(rel, len);
        let pages = len.div_ceil(self.page_capacity);
        self.pool.retain(|e| e.rel != rel || e.page < pages);
    }

    /// Number of page loads the op list would need right now. Shares the
    /// residency logic with the charging path; appends only ever need their
    /// trailing partial page. Each distinct page counts once, so scans are
    /// costed per relation (its page count minus the resident ones) rather
    /// than per page.
    pub fn predicted_loads(&self, ops: &[PageOp]) -> usize {
        let mut scanned: Vec<RelKey> = Vec::new();
        let mut appended: Vec<RelKey> = Vec::new();
        let mut loads = 0usize;
        for op in ops {
            if let PageOp::Scan(rel) = *op {
                if scanned.contains(&rel) {
                    continue;
                }
                let pages = self.page_count(rel);
                let resident =
                    self.pool.iter().filter(|e| e.rel == rel && e.page < pages).count();
                loads += pages - resident;
                scanned.push(rel);
            }
        }
        for op in ops {
            if let PageOp::Append(rel, added) = *op {
                if added == 0
                    || self.len(rel) % self.page_capacity == 0
                    || scanned.contains(&rel)
                    || appended.contains(&rel)
                {
                    continue;
                }
                let page = self.page_count(rel) - 1;
                if !self.pool.iter().any(|e| e.rel == rel && e.page == page) {
                    loads += 1;
                }
                appended.push(rel);
            }
        }
        loads
    }

    /// Pages currently in the buffer pool.
    pub fn resident_pages(&self) -> usize {
        self.pool.len()
    }

    /// Declares a relation that already lives on secondary storage (its
    /// pages start out non-resident and unread).
    pub fn register(&mut self, rel: RelKey, len: usize) {
        self.lens.insert(rel, len);
    }

    /// Truncates a relation to empty (a metadata operation, not charged).
    pub fn reset(&mut self, rel: RelKey) {
        self.lens.remove(&rel);
        self.pool.retain(|e| e.rel != rel);
    }
}

/// Read-only view of the evaluation state offered to strategies.
pub trait ControlContext {
    fn net(&self) -> &NetStructure;
    /// Monotone sequence number assigned when the edge last became active.
    fn activation_seq(&self, e: Edge) -> u64;
    /// Modification timestamp of a node (bumped on every content change).
    fn timestamp(&self, v: NodeId) -> u64;
    /// Page loads firing `e` would need under the current buffer pool.
    fn predicted_loads(&self, e: Edge) -> usize;
    /// How many operations out of `e`'s target node could run without
    /// loads, under the current buffer pool.
    fn enabled_memory_ops(&self, e: Edge) -> usize;
    /// Items in the working buffers a fire of `e` would consume.
    fn workload(&self, e: Edge) -> usize;
}

/// An edge-selection policy. `select` must return one of the offered
/// edges; `active` is non-empty and canonically ordered.
pub trait Strategy {
    fn name(&self) -> &'static str;
    fn select(&mut self, active: &[Edge], ctx: &dyn ControlContext) -> Edge;
}

/// Names accepted by the CLI and test harnesses.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum StrategyKind {
    #[default]
    Fifo,
    DepthFirst,
    DiskMin,
}

impl StrategyKind {
    pub fn make(self) -> Box<dyn Strategy> {
        match self {
            StrategyKind::Fifo => Box::new(Fifo),
            StrategyKind::DepthFirst => Box::new(DepthFirst),
            StrategyKind::DiskMin => Box::new(DiskMin),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Fifo => "fifo",
            StrategyKind::DepthFirst => "depth-first",
            StrategyKind::DiskMin => "disk-min",
        }
    }

    pub fn all() -> [StrategyKind; 3] {
        [StrategyKind::Fifo, StrategyKind::DepthFirst, StrategyKind::DiskMin]
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fifo" => Ok(StrategyKind::Fifo),
            "depth-first" | "dfs" => Ok(StrategyKind::DepthFirst),
            "disk-min" => Ok(StrategyKind::DiskMin),
            other => Err(format!(
                "unknown strategy `{other}` (expected fifo, depth-first or disk-min)"
            )),
        }
    }
}

/// Fires edges in activation order.
pub struct Fifo;

impl Strategy for Fifo {
    fn name(&self) -> &'static str {
        "fifo"
    }

    fn select(&mut self, active: &[Edge], ctx: &dyn ControlContext) -> Edge {
        *active
            .iter()
            .min_by_key(|&&e| (ctx.activation_seq(e), e))
            .expect("select called with active edges")
    }
}

/// Follows the most recently modified node; clause order breaks ties.
pub struct DepthFirst;

impl Strategy for DepthFirst {
    fn name(&self) -> &'static str {
        "depth-first"
    }

    fn select(&mut self, active: &[Edge], ctx: &dyn ControlContext) -> Edge {
        // nodes with active out-edges, most recently modified first
        let mut sources: Vec<NodeId> = active.iter().map(|&(u, _)| u).collect();
        sources.sort();
        sources.dedup();
        sources.sort_by_key(|&u| (std::cmp::Reverse(ctx.timestamp(u)), u));
        let u = sources[0];
        let candidates: Vec<Edge> = active.iter().copied().filter(|&(a, _)| a == u).collect();
        if candidates.len() == 1 {
            return candidates[0];
        }
        match u {
            // program clause with the smallest index
            NodeId::Input(_) => candidates[0],
            // prefer continuing the clause over re-asking the callee
            NodeId::Filter(i, j) => {
                let f = ctx.net().filter(i, j);
                match f.succ {
                    Some(succ) if candidates.contains(&(u, succ)) => (u, succ),
                    _ => candidates[0],
                }
            }
            // most recently modified consumer first
            NodeId::Ans(_) => *candidates
                .iter()
                .max_by_key(|&&(_, w)| (ctx.timestamp(w), std::cmp::Reverse(w)))
                .expect("non-empty"),
            _ => candidates[0],
        }
    }
}

/// Prefers fires that need no page loads; when every active edge needs
/// loads, picks the one that loads least and unlocks the most in-memory
/// work.
pub struct DiskMin;

impl Strategy for DiskMin {
    fn name(&self) -> &'static str {
        "disk-min"
    }

    fn select(&mut self, active: &[Edge], ctx: &dyn ControlContext) -> Edge {
        let in_memory: Vec<Edge> = active
            .iter()
            .copied()
            .filter(|&e| ctx.predicted_loads(e) == 0)
            .collect();
        if !in_memory.is_empty() {
            return *in_memory
                .iter()
                .min_by_key(|&&e| {
                    let enabled = ctx.enabled_memory_ops(e);
                    (
                        std::cmp::Reverse((enabled > 0) as usize),
                        std::cmp::Reverse(enabled),
                        std::cmp::Reverse(ctx.workload(e)),
                        e,
                    )
                })
                .expect("non-empty");
        }
        // everything needs storage access: load as little as possible,
        // enable as much as possible
        *active
            .iter()
            .min_by_key(|&&e| {
                (
                    ctx.predicted_loads(e),
                    std::cmp::Reverse(ctx.enabled_memory_ops(e)),
                    std::cmp::Reverse(ctx.workload(e)),
                    e,
                )
            })
            .expect("non-empty")
    }
}
