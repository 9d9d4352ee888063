//! Block-structured, two-tier KV cache.
//!
//! Each layer owns an ordered list of sealed blocks plus one open trailing
//! block. Sealed blocks are immutable and shared behind `Arc`, so the
//! coprocessor worker can read them while the main sequence keeps appending.
//! Every sealed block lives in exactly one tier:
//!
//! - `Fast` stands in for accelerator memory and is bounded by `fast_capacity`
//!   blocks per layer (pinned layers are exempt).
//! - `Slow` stands in for host memory. Blocks being recalled stay here until
//!   their recall completes at a step boundary.
//!
//! The open block is never offloaded and never scored; it is always attended
//! on the fast side. Digests are kept for every sealed block regardless of
//! tier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::digest::{build_digest, select_topk, BlockDigest, BlockId, BlockIdSet, DigestMethod};
use crate::error::{check_dim, Error, Result};
use crate::numerics::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Fast,
    Slow,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Fast => "fast",
            Tier::Slow => "slow",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub id: BlockId,
    pub layer: usize,
    pub keys: Mat,
    pub values: Mat,
    pub sealed: bool,
}

impl KvBlock {
    fn open(id: BlockId, layer: usize, head_dim: usize) -> Self {
        Self {
            id,
            layer,
            keys: Mat::with_cols(head_dim),
            values: Mat::with_cols(head_dim),
            sealed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheConfig {
    pub layers: usize,
    pub head_dim: usize,
    pub block_size: usize,
    /// Sealed blocks allowed in the fast tier per layer; the open block is extra.
    pub fast_capacity: usize,
    pub digest_method: DigestMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InFlight {
    pub ticket: u64,
    pub ready_at_step: u64,
    pub ready_at_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallTicket {
    pub id: u64,
    pub layer: usize,
    pub blocks: BlockIdSet,
    pub issue_step: u64,
    pub ready_at_step: u64,
    pub ready_at_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletedRecall {
    pub layer: usize,
    pub step: u64,
    pub recalled: BlockIdSet,
    pub evicted: BlockIdSet,
    pub tickets: BTreeSet<u64>,
}

#[derive(Debug, Clone)]
struct LayerStore {
    sealed: Vec<Arc<KvBlock>>,
    digests: Vec<BlockDigest>,
    tiers: Vec<Tier>,
    last_selected: Vec<Option<u64>>,
    open: KvBlock,
    in_flight: BTreeMap<BlockId, InFlight>,
    pinned: bool,
}

impl LayerStore {
    fn fast_count(&self) -> usize {
        self.tiers.iter().filter(|t| **t == Tier::Fast).count()
    }

    fn fast_ids(&self) -> BlockIdSet {
        self.tiers
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Tier::Fast)
            .map(|(i, _)| BlockId(i))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TieredKvCache {
    config: CacheConfig,
    layers: Vec<LayerStore>,
    step: u64,
    next_ticket: u64,
}

impl TieredKvCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        if config.layers == 0 || config.head_dim == 0 || config.block_size == 0 {
            return Err(Error::InvalidInput(format!(
                "cache needs nonzero layers, head_dim and block_size: {config:?}"
            )));
        }
        let layers = (0..config.layers)
            .map(|l| LayerStore {
                sealed: Vec::new(),
                digests: Vec::new(),
                tiers: Vec::new(),
                last_selected: Vec::new(),
                open: KvBlock::open(BlockId(0), l, config.head_dim),
                in_flight: BTreeMap::new(),
                pinned: false,
            })
            .collect();
        Ok(Self {
            config,
            layers,
            step: 0,
            next_ticket: 0,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// The step most recently opened with [`TieredKvCache::complete_recalls`].
    pub fn step(&self) -> u64 {
        self.step
    }

    fn layer(&self, layer: usize) -> Result<&LayerStore> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} out of range")))
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerStore> {
        self.layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} out of range")))
    }

    pub fn num_sealed(&self, layer: usize) -> Result<usize> {
        Ok(self.layer(layer)?.sealed.len())
    }

    /// Total cached tokens for a layer, sealed and open.
    pub fn token_count(&self, layer: usize) -> Result<usize> {
        let l = self.layer(layer)?;
        Ok(l.sealed.len() * self.config.block_size + l.open.len())
    }

    pub fn digests(&self, layer: usize) -> Result<&[BlockDigest]> {
        Ok(&self.layer(layer)?.digests)
    }

    pub fn open_block(&self, layer: usize) -> Result<&KvBlock> {
        Ok(&self.layer(layer)?.open)
    }

    pub fn block(&self, layer: usize, id: BlockId) -> Result<&Arc<KvBlock>> {
        self.layer(layer)?
            .sealed
            .get(id.0)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} has no sealed block {id}")))
    }

    pub fn tier(&self, layer: usize, id: BlockId) -> Result<Tier> {
        self.block(layer, id)?;
        Ok(self.layer(layer)?.tiers[id.0])
    }

    pub fn last_selected(&self, layer: usize, id: BlockId) -> Result<Option<u64>> {
        self.block(layer, id)?;
        Ok(self.layer(layer)?.last_selected[id.0])
    }

    pub fn is_pinned(&self, layer: usize) -> Result<bool> {
        Ok(self.layer(layer)?.pinned)
    }

    pub fn fast_count(&self, layer: usize) -> Result<usize> {
        Ok(self.layer(layer)?.fast_count())
    }

    /// Sealed blocks readable from the fast tier. In-flight recalls are excluded.
    pub fn residency_set(&self, layer: usize) -> Result<BlockIdSet> {
        Ok(self.layer(layer)?.fast_ids())
    }

    pub fn in_flight(&self, layer: usize) -> Result<BTreeMap<BlockId, InFlight>> {
        Ok(self.layer(layer)?.in_flight.clone())
    }

    /// Append one token's key/value row. Returns the id of the block this
    /// append sealed, if any. A freshly sealed block enters the fast tier.
    pub fn append_token(&mut self, layer: usize, k: &[f64], v: &[f64]) -> Result<Option<BlockId>> {
        let (d, bs, method, step) = (
            self.config.head_dim,
            self.config.block_size,
            self.config.digest_method,
            self.step,
        );
        check_dim("append_token", d, k.len())?;
        check_dim("append_token", d, v.len())?;
        let store = self.layer_mut(layer)?;
        store.open.keys.push_row(k)?;
        store.open.values.push_row(v)?;
        if store.open.len() < bs {
            return Ok(None);
        }
        let id = store.open.id;
        let next = KvBlock::open(BlockId(id.0 + 1), layer, d);
        let mut sealed = std::mem::replace(&mut store.open, next);
        sealed.sealed = true;
        store.digests.push(build_digest(layer, id, &sealed.keys, method)?);
        store.sealed.push(Arc::new(sealed));
        store.tiers.push(Tier::Fast);
        store.last_selected.push(Some(step));
        self.enforce_capacity(layer, &BlockIdSet::from([id]))?;
        Ok(Some(id))
    }

    /// Initial placement: keep the `fast_capacity` blocks scoring highest
    /// against `q` in the fast tier and offload the rest.
    pub fn place_initial(&mut self, layer: usize, q: &[f64]) -> Result<BlockIdSet> {
        let cap = self.config.fast_capacity;
        let step = self.step;
        let keep = select_topk(q, self.digests(layer)?, cap)?;
        let store = self.layer_mut(layer)?;
        if !store.in_flight.is_empty() {
            return Err(Error::InvalidInput(format!(
                "layer {layer}: initial placement with recalls in flight"
            )));
        }
        for (i, (tier, last)) in store
            .tiers
            .iter_mut()
            .zip(store.last_selected.iter_mut())
            .enumerate()
        {
            if keep.contains(&BlockId(i)) {
                *tier = Tier::Fast;
                *last = Some(step);
            } else {
                *tier = Tier::Slow;
                *last = None;
            }
        }
        store.pinned = false;
        Ok(keep)
    }

    /// Pin a layer fully resident: every current and future block stays fast
    /// and capacity is not enforced.
    pub fn pin_layer(&mut self, layer: usize) -> Result<()> {
        let store = self.layer_mut(layer)?;
        if !store.in_flight.is_empty() {
            return Err(Error::InvalidInput(format!(
                "layer {layer}: cannot pin with recalls in flight"
            )));
        }
        store.tiers.iter_mut().for_each(|t| *t = Tier::Fast);
        store.pinned = true;
        Ok(())
    }

    pub fn mark_selected(&mut self, layer: usize, ids: &BlockIdSet, step: u64) -> Result<()> {
        let store = self.layer_mut(layer)?;
        for id in ids {
            let slot = store.last_selected.get_mut(id.0).ok_or_else(|| {
                Error::InvalidInput(format!("layer {layer} has no sealed block {id}"))
            })?;
            *slot = Some(slot.map_or(step, |s| s.max(step)));
        }
        Ok(())
    }

    /// Move a fast block to the slow tier.
    pub fn evict(&mut self, layer: usize, id: BlockId) -> Result<()> {
        let tier = self.tier(layer, id)?;
        let store = self.layer_mut(layer)?;
        if store.pinned {
            return Err(Error::InvalidInput(format!("layer {layer} is pinned")));
        }
        if tier != Tier::Fast {
            return Err(Error::InvalidInput(format!(
                "layer {layer} block {id} is not in the fast tier"
            )));
        }
        store.tiers[id.0] = Tier::Slow;
        Ok(())
    }

    /// Evict least-recently-selected fast blocks until the layer fits.
    /// Blocks in `protect` are chosen last; ties go to the lower id.
    fn enforce_capacity(&mut self, layer: usize, protect: &BlockIdSet) -> Result<BlockIdSet> {
        let cap = self.config.fast_capacity;
        let store = self.layer_mut(layer)?;
        let mut evicted = BlockIdSet::new();
        if store.pinned {
            return Ok(evicted);
        }
        let excess = store.fast_count().saturating_sub(cap);
        if excess == 0 {
            return Ok(evicted);
        }
        let mut candidates: Vec<_> = store
            .fast_ids()
            .into_iter()
            .map(|id| (protect.contains(&id), store.last_selected[id.0], id))
            .collect();
        candidates.sort();
        for (_, _, id) in candidates.into_iter().take(excess) {
            store.tiers[id.0] = Tier::Slow;
            evicted.insert(id);
        }
        Ok(evicted)
    }

    /// Start an asynchronous recall of slow-tier blocks, readable from
    /// `(issue_step + 1, issue_layer)` onwards.
    pub fn schedule_recall(
        &mut self,
        layer: usize,
        ids: &BlockIdSet,
        issue_step: u64,
        issue_layer: usize,
    ) -> Result<RecallTicket> {
        for &id in ids {
            match self.tier(layer, id)? {
                Tier::Fast => {
                    return Err(Error::InvalidInput(format!(
                        "layer {layer} block {id} is already in the fast tier"
                    )))
                }
                Tier::Slow if self.layer(layer)?.in_flight.contains_key(&id) => {
                    return Err(Error::InvalidInput(format!(
                        "layer {layer} block {id} is already being recalled"
                    )))
                }
                Tier::Slow => {}
            }
        }
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        let flight = InFlight {
            ticket,
            ready_at_step: issue_step + 1,
            ready_at_layer: issue_layer,
        };
        let store = self.layer_mut(layer)?;
        for &id in ids {
            store.in_flight.insert(id, flight);
        }
        Ok(RecallTicket {
            id: ticket,
            layer,
            blocks: ids.clone(),
            issue_step,
            ready_at_step: flight.ready_at_step,
            ready_at_layer: flight.ready_at_layer,
        })
    }

    /// Open decode step `step`: land every recall due by now and evict to
    /// capacity. Only the single writer calls this, between steps.
    pub fn complete_recalls(&mut self, step: u64) -> Result<Vec<CompletedRecall>> {
        self.step = step;
        let mut done = Vec::new();
        for layer in 0..self.layers.len() {
            let store = &mut self.layers[layer];
            let ready: BlockIdSet = store
                .in_flight
                .iter()
                .filter(|(_, f)| f.ready_at_step <= step)
                .map(|(id, _)| *id)
                .collect();
            if ready.is_empty() {
                continue;
            }
            let mut tickets = BTreeSet::new();
            for id in &ready {
                if let Some(f) = store.in_flight.remove(id) {
                    tickets.insert(f.ticket);
                }
                store.tiers[id.0] = Tier::Fast;
            }
            let evicted = self.enforce_capacity(layer, &ready)?;
            done.push(CompletedRecall {
                layer,
                step,
                recalled: ready,
                evicted,
                tickets,
            });
        }
        Ok(done)
    }

    /// Shared handles to sealed blocks, in id order. Every id must currently
    /// be in `tier`.
    pub fn fetch_blocks(&self, layer: usize, ids: &BlockIdSet, tier: Tier) -> Result<Vec<Arc<KvBlock>>> {
        let store = self.layer(layer)?;
        ids.iter()
            .map(|&id| {
                let block = self.block(layer, id)?;
                if store.tiers[id.0] != tier {
                    return Err(Error::InvalidInput(format!(
                        "layer {layer} block {id} is not in the {tier} tier"
                    )));
                }
                Ok(Arc::clone(block))
            })
            .collect()
    }

    /// Tier conservation and capacity, checked across every layer.
    pub fn check_invariants(&self) -> Result<()> {
        let bs = self.config.block_size;
        for (l, store) in self.layers.iter().enumerate() {
            let n = store.sealed.len();
            if store.tiers.len() != n || store.digests.len() != n || store.last_selected.len() != n {
                return Err(Error::Invariant(format!("layer {l}: per-block tables out of sync")));
            }
            for (i, (b, d)) in store.sealed.iter().zip(&store.digests).enumerate() {
                if b.id != BlockId(i) || d.block_id != BlockId(i) || !b.sealed || b.len() != bs {
                    return Err(Error::Invariant(format!("layer {l}: malformed sealed block {i}")));
                }
            }
            if store.open.id != BlockId(n) || store.open.len() >= bs {
                return Err(Error::Invariant(format!("layer {l}: malformed open block")));
            }
            if !store.pinned && store.fast_count() > self.config.fast_capacity {
                return Err(Error::Invariant(format!(
                    "layer {l}: {} fast blocks exceed capacity {}",
                    store.fast_count(),
                    self.config.fast_capacity
                )));
            }
            for id in store.in_flight.keys() {
                if store.tiers.get(id.0) != Some(&Tier::Slow) {
                    return Err(Error::Invariant(format!("layer {l}: in-flight block {id} is not slow")));
                }
            }
        }
        Ok(())
    }

    /// Line-oriented dump: `layer,block_id,tier,last_selected` with `-` for
    /// never-selected blocks.
    pub fn snapshot(&self) -> String {
        let mut out = String::from("layer,block_id,tier,last_selected\n");
        for (l, store) in self.layers.iter().enumerate() {
            for (i, (tier, last)) in store.tiers.iter().zip(&store.last_selected).enumerate() {
                let last = last.map_or_else(|| "-".to_string(), |s| s.to_string());
                let _ = writeln!(out, "{l},{i},{tier},{last}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cache(block_size: usize, cap: usize) -> TieredKvCache {
        TieredKvCache::new(CacheConfig {
            layers: 2,
            head_dim: 2,
            block_size,
            fast_capacity: cap,
            digest_method: DigestMethod::MinMax,
        })
        .unwrap()
    }

    /// Fill `blocks` sealed blocks in layer 0; block `i` has keys `[i, -i]`.
    fn filled(blocks: usize, block_size: usize, cap: usize) -> TieredKvCache {
        let mut c = cache(block_size, cap);
        for b in 0..blocks {
            for _ in 0..block_size {
                c.append_token(0, &[b as f64, -(b as f64)], &[1.0, 1.0]).unwrap();
            }
        }
        c
    }

    fn ids(v: &[usize]) -> BlockIdSet {
        v.iter().map(|&i| BlockId(i)).collect()
    }

    #[test]
    fn exact_fill_seals_one_block() {
        let mut c = cache(4, 8);
        let mut sealed = Vec::new();
        for t in 0..4 {
            sealed.push(c.append_token(0, &[t as f64, 0.0], &[0.0, 1.0]).unwrap());
        }
        assert_eq!(sealed, vec![None, None, None, Some(BlockId(0))]);
        assert_eq!(c.digests(0).unwrap().len(), 1);
        assert!(c.open_block(0).unwrap().is_empty());
    }

    #[test]
    fn overflow_by_one_opens_next_block() {
        let mut c = cache(4, 8);
        for t in 0..5 {
            c.append_token(0, &[t as f64, 0.0], &[0.0, 1.0]).unwrap();
        }
        assert_eq!(c.num_sealed(0).unwrap(), 1);
        assert_eq!(c.open_block(0).unwrap().len(), 1);
        assert_eq!(c.open_block(0).unwrap().id, BlockId(1));
        assert_eq!(c.token_count(0).unwrap(), 5);
    }

    #[test]
    fn initial_placement_keeps_top_scoring() {
        let mut c = filled(8, 2, 4);
        // q = [1, 0] scores block i as i, so the last four win
        let kept = c.place_initial(0, &[1.0, 0.0]).unwrap();
        assert_eq!(kept, ids(&[4, 5, 6, 7]));
        assert_eq!(c.residency_set(0).unwrap(), kept);
        c.evict(0, BlockId(5)).unwrap();
        assert!(!c.residency_set(0).unwrap().contains(&BlockId(5)));
    }

    #[test]
    fn recall_is_ready_one_step_later() {
        let mut c = filled(8, 2, 4);
        c.place_initial(0, &[1.0, 0.0]).unwrap();
        c.complete_recalls(5).unwrap();
        let t = c.schedule_recall(0, &ids(&[1]), 5, 3).unwrap();
        assert_eq!((t.ready_at_step, t.ready_at_layer), (6, 3));
        assert!(!c.residency_set(0).unwrap().contains(&BlockId(1)));
        assert!(c.complete_recalls(5).unwrap().is_empty());
        assert!(!c.residency_set(0).unwrap().contains(&BlockId(1)));
        let done = c.complete_recalls(6).unwrap();
        assert_eq!(done[0].recalled, ids(&[1]));
        assert!(c.residency_set(0).unwrap().contains(&BlockId(1)));
    }

    #[test]
    fn recall_evicts_least_recently_selected() {
        let mut c = filled(8, 2, 4);
        c.place_initial(0, &[1.0, 0.0]).unwrap();
        c.mark_selected(0, &ids(&[4, 7]), 3).unwrap();
        c.mark_selected(0, &ids(&[5]), 2).unwrap();
        c.mark_selected(0, &ids(&[6]), 1).unwrap();
        c.schedule_recall(0, &ids(&[0, 1]), 4, 1).unwrap();
        let done = c.complete_recalls(5).unwrap();
        assert_eq!(done[0].evicted, ids(&[5, 6]));
        assert_eq!(c.residency_set(0).unwrap(), ids(&[0, 1, 4, 7]));
    }

    #[test]
    fn recall_errors() {
        let mut c = filled(8, 2, 4);
        c.place_initial(0, &[1.0, 0.0]).unwrap();
        assert!(c.schedule_recall(0, &ids(&[7]), 1, 0).is_err());
        c.schedule_recall(0, &ids(&[0]), 1, 0).unwrap();
        assert!(c.schedule_recall(0, &ids(&[0]), 1, 0).is_err());
        assert!(c.schedule_recall(0, &ids(&[99]), 1, 0).is_err());
    }

    #[test]
    fn fetch_checks_tier() {
        let mut c = filled(4, 2, 2);
        c.place_initial(0, &[1.0, 0.0]).unwrap();
        let fast = c.fetch_blocks(0, &ids(&[3, 2]), Tier::Fast).unwrap();
        assert_eq!(fast.iter().map(|b| b.id).collect::<Vec<_>>(), vec![BlockId(2), BlockId(3)]);
        assert!(c.fetch_blocks(0, &ids(&[0]), Tier::Fast).is_err());
        assert_eq!(c.fetch_blocks(0, &ids(&[0]), Tier::Slow).unwrap().len(), 1);
    }

    #[test]
    fn sealing_over_capacity_evicts() {
        let mut c = filled(3, 2, 2);
        assert_eq!(c.fast_count(0).unwrap(), 2);
        c.check_invariants().unwrap();
        c.pin_layer(0).unwrap();
        for _ in 0..4 {
            c.append_token(0, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        }
        assert_eq!(c.fast_count(0).unwrap(), 5);
        c.check_invariants().unwrap();
    }

    #[test]
    fn snapshot_lists_every_block() {
        let mut c = filled(3, 2, 2);
        c.place_initial(0, &[1.0, 0.0]).unwrap();
        let snap = c.snapshot();
        let lines: Vec<_> = snap.lines().collect();
        assert_eq!(lines[0], "layer,block_id,tier,last_selected");
        assert_eq!(&lines[1..], &["0,0,slow,-", "0,1,fast,0", "0,2,fast,0"]);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Append(f64),
        Select(usize),
        Recall(usize),
        Step,
        Evict(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (-3.0f64..3.0).prop_map(Op::Append),
            2 => (0usize..64).prop_map(Op::Select),
            2 => (0usize..64).prop_map(Op::Recall),
            1 => Just(Op::Step),
            1 => (0usize..64).prop_map(Op::Evict),
        ]
    }

    proptest! {
        #[test]
        fn random_operations_keep_invariants(ops in prop::collection::vec(op(), 1..200), cap in 1usize..5) {
            let mut c = cache(3, cap);
            let mut step = 0u64;
            let mut scheduled: Vec<(BlockId, u64)> = Vec::new();
            for op in ops {
                let n = c.num_sealed(1).unwrap();
                match op {
                    Op::Append(x) => { c.append_token(1, &[x, -x], &[x, x]).unwrap(); }
                    Op::Select(i) if n > 0 => { c.mark_selected(1, &ids(&[i % n]), step).unwrap(); }
                    Op::Recall(i) if n > 0 => {
                        let id = BlockId(i % n);
                        if c.schedule_recall(1, &BlockIdSet::from([id]), step, 1).is_ok() {
                            scheduled.push((id, step));
                        }
                    }
                    Op::Evict(i) if n > 0 => { let _ = c.evict(1, BlockId(i % n)); }
                    Op::Step => {
                        step += 1;
                        c.complete_recalls(step).unwrap();
                        for (id, at) in &scheduled {
                            if *at + 1 > step {
                                prop_assert!(!c.residency_set(1).unwrap().contains(id));
                            }
                        }
                        scheduled.retain(|(_, at)| *at + 1 > step);
                    }
                    _ => {}
                }
                c.check_invariants().unwrap();
                let n = c.num_sealed(1).unwrap();
                let fast = c.residency_set(1).unwrap().len();
                let slow = (0..n).filter(|&i| c.tier(1, BlockId(i)).unwrap() == Tier::Slow).count();
                prop_assert_eq!(fast + slow, n);
                prop_assert!(fast <= cap);
            }
        }
    }
}
