//! One cache switch: a bounded key-value cache with validity tracking, a
//! Count-Min sketch plus Bloom filter heavy-hitter detector, and the
//! per-second load counter it piggybacks on replies.

use std::collections::HashMap;

use xxhash_rust::xxh3::xxh3_128_with_seed;

use crate::error::{Error, Result};
use crate::hashing::{reduce, ObjectId};
use crate::workload::MAX_VALUE_LEN;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheConfig {
    /// Maximum number of cached objects.
    pub slots: usize,
    pub cms_rows: usize,
    pub cms_width: u32,
    pub bloom_arrays: usize,
    pub bloom_bits: u32,
    /// Minimum sketch estimate before an uncached key is tracked as a
    /// heavy-hitter candidate.
    pub hh_threshold: u16,
    /// Multiplicative decay of the reported load per silent window;
    /// `None` keeps the last report unchanged.
    pub decay: Option<f64>,
    /// Silent windows before decay starts.
    pub age_after: u32,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            slots: 100,
            cms_rows: 4,
            cms_width: 65_536,
            bloom_arrays: 3,
            bloom_bits: 262_144,
            hh_threshold: 1,
            decay: Some(0.5),
            age_after: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub value: Vec<u8>,
    /// Version of `value`; 0 while a reserved slot awaits its first update.
    pub version: u64,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Lookup {
    Hit { value: Vec<u8>, version: u64 },
    Miss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Installed,
    StaleRejected,
    NotCached,
}

fn epoch_seed(node: u16, epoch: u64, salt: u64) -> u64 {
    (node as u64) << 48 ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt
}

/// Two 64-bit hashes for double hashing across rows.
fn hash_pair(seed: u64, key: &ObjectId) -> (u64, u64) {
    let h = xxh3_128_with_seed(key.as_bytes(), seed);
    (h as u64, (h >> 64) as u64 | 1)
}

#[derive(Clone, Debug)]
struct CountMin {
    rows: usize,
    width: u32,
    counters: Vec<u16>,
    seed: u64,
}

impl CountMin {
    fn new(rows: usize, width: u32, seed: u64) -> Self {
        CountMin {
            rows,
            width,
            counters: vec![0; rows * width as usize],
            seed,
        }
    }

    fn slots(&self, key: &ObjectId) -> impl Iterator<Item = usize> + '_ {
        let (a, b) = hash_pair(self.seed, key);
        (0..self.rows).map(move |r| {
            r * self.width as usize
                + reduce(a.wrapping_add((r as u64).wrapping_mul(b)), self.width) as usize
        })
    }

    /// Saturating increment; returns the new estimate.
    fn increment(&mut self, key: &ObjectId) -> u16 {
        let slots: Vec<usize> = self.slots(key).collect();
        let mut est = u16::MAX;
        for s in slots {
            let c = &mut self.counters[s];
            *c = c.saturating_add(1);
            est = est.min(*c);
        }
        est
    }

    fn estimate(&self, key: &ObjectId) -> u16 {
        self.slots(key).map(|s| self.counters[s]).min().unwrap_or(0)
    }

    fn reset(&mut self, seed: u64) {
        self.counters.fill(0);
        self.seed = seed;
    }
}

#[derive(Clone, Debug)]
struct Bloom {
    arrays: usize,
    bits: u32,
    words: Vec<u64>,
    seed: u64,
}

impl Bloom {
    fn new(arrays: usize, bits: u32, seed: u64) -> Self {
        let words = (arrays * bits as usize).div_ceil(64);
        Bloom {
            arrays,
            bits,
            words: vec![0; words],
            seed,
        }
    }

    fn positions(&self, key: &ObjectId) -> impl Iterator<Item = usize> + '_ {
        let (a, b) = hash_pair(self.seed, key);
        (0..self.arrays).map(move |r| {
            r * self.bits as usize
                + reduce(a.wrapping_add((r as u64).wrapping_mul(b)), self.bits) as usize
        })
    }

    fn contains(&self, key: &ObjectId) -> bool {
        self.positions(key)
            .all(|p| self.words[p / 64] >> (p % 64) & 1 == 1)
    }

    fn insert(&mut self, key: &ObjectId) {
        let ps: Vec<usize> = self.positions(key).collect();
        for p in ps {
            self.words[p / 64] |= 1 << (p % 64);
        }
    }

    fn reset(&mut self, seed: u64) {
        self.words.fill(0);
        self.seed = seed;
    }
}

/// Per-epoch heavy-hitter detector. Uncached keys whose sketch estimate
/// reaches the threshold are reported once per epoch through the Bloom
/// filter and tracked as candidates from then on.
#[derive(Clone, Debug)]
pub struct HeavyHitterDetector {
    node: u16,
    epoch: u64,
    threshold: u16,
    cms: CountMin,
    bloom: Bloom,
    candidates: HashMap<ObjectId, u16>,
    last_report: Vec<(ObjectId, u16)>,
}

const CMS_SALT: u64 = 0x243f_6a88_85a3_08d3;
const BLOOM_SALT: u64 = 0x1319_8a2e_0370_7344;

impl HeavyHitterDetector {
    pub fn new(node: u16, cfg: &CacheConfig) -> Self {
        HeavyHitterDetector {
            node,
            epoch: 0,
            threshold: cfg.hh_threshold.max(1),
            cms: CountMin::new(cfg.cms_rows, cfg.cms_width, epoch_seed(node, 0, CMS_SALT)),
            bloom: Bloom::new(
                cfg.bloom_arrays,
                cfg.bloom_bits,
                epoch_seed(node, 0, BLOOM_SALT),
            ),
            candidates: HashMap::new(),
            last_report: Vec::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn observe(&mut self, key: &ObjectId, cached: bool) {
        let est = self.cms.increment(key);
        if cached {
            return;
        }
        if let Some(c) = self.candidates.get_mut(key) {
            *c = est;
        } else if est >= self.threshold && !self.bloom.contains(key) {
            self.bloom.insert(key);
            self.candidates.insert(*key, est);
        }
    }

    /// Sketch estimate for `key` in the current epoch.
    pub fn estimate(&self, key: &ObjectId) -> u16 {
        self.cms.estimate(key)
    }

    /// Closes the epoch: freezes the candidate ranking and reseeds.
    pub fn rotate(&mut self) {
        let mut report: Vec<(ObjectId, u16)> = self.candidates.drain().collect();
        report.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        self.last_report = report;
        self.epoch += 1;
        self.cms.reset(epoch_seed(self.node, self.epoch, CMS_SALT));
        self.bloom
            .reset(epoch_seed(self.node, self.epoch, BLOOM_SALT));
    }

    pub fn top_k(&self, k: usize) -> &[(ObjectId, u16)] {
        &self.last_report[..k.min(self.last_report.len())]
    }
}

/// Packets seen in the current one-second window and the load reported
/// for the previous one.
#[derive(Clone, Debug, Default)]
pub struct LoadCounter {
    packets: u64,
    last_report: u64,
    silent: u32,
}

impl LoadCounter {
    pub fn record(&mut self) {
        self.packets += 1;
    }

    pub fn current(&self) -> u64 {
        self.packets
    }

    pub fn report(&self) -> u64 {
        self.last_report
    }

    pub fn tick(&mut self, decay: Option<f64>, age_after: u32) {
        if self.packets > 0 {
            self.silent = 0;
            self.last_report = self.packets;
        } else {
            self.silent += 1;
            if let Some(d) = decay {
                if self.silent >= age_after {
                    self.last_report = (self.last_report as f64 * d).floor() as u64;
                }
            }
        }
        self.packets = 0;
    }
}

#[derive(Clone, Debug)]
pub struct CacheNode {
    id: u16,
    cfg: CacheConfig,
    entries: HashMap<ObjectId, CacheEntry>,
    /// Highest invalidated version per key, kept across evictions so a
    /// late update can never revalidate a value older than an
    /// acknowledged invalidation.
    inval_floor: HashMap<ObjectId, u64>,
    detector: HeavyHitterDetector,
    load: LoadCounter,
}

impl CacheNode {
    pub fn new(id: u16, cfg: CacheConfig) -> Self {
        CacheNode {
            id,
            detector: HeavyHitterDetector::new(id, &cfg),
            cfg,
            entries: HashMap::new(),
            inval_floor: HashMap::new(),
            load: LoadCounter::default(),
        }
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn cache_get(&mut self, key: &ObjectId) -> Lookup {
        self.load.record();
        let entry = self.entries.get(key);
        self.detector.observe(key, entry.is_some());
        match entry {
            Some(e) if e.valid => Lookup::Hit {
                value: e.value.clone(),
                version: e.version,
            },
            _ => Lookup::Miss,
        }
    }

    /// Counts a packet that only passes through the node.
    pub fn record_packet(&mut self) {
        self.load.record();
    }

    /// Counts a read forwarded towards storage without a cache lookup,
    /// feeding heavy-hitter detection.
    pub fn pass_through(&mut self, key: &ObjectId) {
        self.load.record();
        let cached = self.entries.contains_key(key);
        self.detector.observe(key, cached);
    }

    pub fn contains(&self, key: &ObjectId) -> bool {
        self.entries.contains_key(key)
    }

    pub fn is_valid(&self, key: &ObjectId) -> bool {
        self.entries.get(key).is_some_and(|e| e.valid)
    }

    pub fn entry(&self, key: &ObjectId) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ObjectId> {
        self.entries.keys()
    }

    /// Marks `key` invalid up to `version`; idempotent. Returns the
    /// stored version (0 when absent).
    pub fn invalidate(&mut self, key: &ObjectId, version: u64) -> u64 {
        let floor = self.inval_floor.entry(*key).or_insert(0);
        *floor = (*floor).max(version);
        match self.entries.get_mut(key) {
            Some(e) => {
                if e.version < *floor {
                    e.valid = false;
                }
                e.version
            }
            None => 0,
        }
    }

    pub fn apply_update(
        &mut self,
        key: &ObjectId,
        value: &[u8],
        version: u64,
    ) -> Result<UpdateOutcome> {
        if value.len() > MAX_VALUE_LEN {
            return Err(Error::invalid(format!(
                "value of {} bytes exceeds {MAX_VALUE_LEN}",
                value.len()
            )));
        }
        let floor = self.inval_floor.get(key).copied().unwrap_or(0);
        let Some(e) = self.entries.get_mut(key) else {
            return Ok(UpdateOutcome::NotCached);
        };
        if version <= e.version {
            return Ok(UpdateOutcome::StaleRejected);
        }
        e.value = value.to_vec();
        e.version = version;
        e.valid = version >= floor;
        Ok(UpdateOutcome::Installed)
    }

    /// Reserves an invalid slot for `key`, evicting if the cache is full.
    /// Returns the evicted key, if any.
    pub fn reserve(&mut self, key: &ObjectId) -> Option<ObjectId> {
        if self.entries.contains_key(key) || self.cfg.slots == 0 {
            return None;
        }
        let victim = if self.entries.len() >= self.cfg.slots {
            self.victim()
        } else {
            None
        };
        if let Some(v) = victim {
            self.entries.remove(&v);
        }
        self.entries.insert(
            *key,
            CacheEntry {
                value: Vec::new(),
                version: 0,
                valid: false,
            },
        );
        victim
    }

    /// Valid entry with the lowest sketch estimate, lowest key on ties;
    /// falls back to invalid entries when none is valid.
    fn victim(&self) -> Option<ObjectId> {
        let pick = |valid: bool| {
            self.entries
                .iter()
                .filter(|(_, e)| e.valid == valid)
                .map(|(k, _)| (self.detector.estimate(k), *k))
                .min()
                .map(|(_, k)| k)
        };
        pick(true).or_else(|| pick(false))
    }

    pub fn evict(&mut self, key: &ObjectId) -> bool {
        self.entries.remove(key).is_some()
    }

    /// Heavy hitters of the last completed epoch, hottest first.
    pub fn hh_top_k(&self, k: usize) -> &[(ObjectId, u16)] {
        self.detector.top_k(k)
    }

    /// Current-epoch sketch estimate, used for cached keys.
    pub fn estimate(&self, key: &ObjectId) -> u16 {
        self.detector.estimate(key)
    }

    /// Sketch estimates of every cached key, taken before a rotation.
    pub fn cached_estimates(&self) -> Vec<(ObjectId, u16)> {
        let mut out: Vec<_> = self
            .entries
            .keys()
            .map(|k| (*k, self.detector.estimate(k)))
            .collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    pub fn report_load(&self) -> u64 {
        self.load.report()
    }

    /// Packets counted so far in the current window.
    pub fn current_load(&self) -> u64 {
        self.load.current()
    }

    pub fn tick_second(&mut self) {
        self.load.tick(self.cfg.decay, self.cfg.age_after);
        self.detector.rotate();
    }

    pub fn detector(&self) -> &HeavyHitterDetector {
        &self.detector
    }
}
