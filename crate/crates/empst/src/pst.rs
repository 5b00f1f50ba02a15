//! The buffered external-memory priority search tree.
//!
//! A B-tree over x-keys with fan-out `Δ = ⌈B^ε⌉` where every node carries a
//! point buffer `P_v`, an insertion buffer `I_v` and a deletion buffer `D_v`,
//! and every internal node keeps a child structure over the union of its
//! children's point buffers. Updates enter at the root and flow down in
//! batches when buffers overflow; high points flow up in batches when point
//! buffers underflow. The root's buffers and routing table live in internal
//! memory; everything else lives in blocks.
//!
//! Size invariants per node: either `B/2 ≤ |P_v| ≤ B`, `|D_v| ≤ B/4`,
//! `|I_v| ≤ B`, or `|P_v| < B/2` with every buffer in the subtree empty.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::child::ChildHandle;
use crate::extsort::{sort_points_by_x, ChainReader, ChainWriter};
use crate::model::{div_ceil, Config, ConfigError, Epsilon, Point, XBound, YBound};
use crate::record::{ChildRec, MetaRec, NodeRec, Record};
use crate::store::{Block, BlockId, BlockStore, IOStats, StoreError};

type Store = BlockStore<Record>;

#[derive(Debug, Error)]
pub enum PstError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("duplicate point ({0}, {1}) in construction input")]
    DuplicatePoint(i64, i64),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Identifies a tree node: the in-memory root or a block-resident node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Anchor {
    Root,
    Node(BlockId),
}

/// Routing key for re-finding a node from the root: a node is addressed by
/// its level and the exclusive lower end of its x-range, which never changes
/// for the lifetime of the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum RouteKey {
    Min,
    Key((i64, i64)),
}

/// Working view of one node, loaded from the store (or copied from the
/// in-memory root), mutated, and written back.
#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub anchor: Anchor,
    pub is_leaf: bool,
    pub children: Vec<ChildRec>,
    pub pbuf: Vec<Point>,
    pub ibuf: Vec<Point>,
    pub dbuf: Vec<Point>,
    pub cs: Option<ChildHandle>,
    old: NodeRec,
    old_next: Option<BlockId>,
    pub dirty_p: bool,
    pub dirty_i: bool,
    pub dirty_d: bool,
    pub dirty_meta: bool,
}

impl Node {
    fn fresh_leaf(anchor: Anchor) -> Node {
        Node {
            anchor,
            is_leaf: true,
            children: Vec::new(),
            pbuf: Vec::new(),
            ibuf: Vec::new(),
            dbuf: Vec::new(),
            cs: None,
            old: NodeRec::default(),
            old_next: None,
            dirty_p: true,
            dirty_i: true,
            dirty_d: true,
            dirty_meta: true,
        }
    }

    fn fresh_internal(anchor: Anchor) -> Node {
        Node { is_leaf: false, cs: Some(ChildHandle::default()), ..Node::fresh_leaf(anchor) }
    }

    pub fn min_p_ykey(&self) -> Option<(i64, i64)> {
        self.pbuf.iter().map(|p| p.ykey()).min()
    }

    pub fn min_y_bound(&self) -> YBound {
        self.min_p_ykey().map(YBound::Key).unwrap_or(YBound::PosInf)
    }

    pub fn degree(&self) -> usize {
        self.children.len()
    }
}

// ---- x-sorted point vector helpers --------------------------------------

fn find(v: &[Point], key: (i64, i64)) -> Result<usize, usize> {
    v.binary_search_by_key(&key, |p| p.xkey())
}

/// Removes the point with the given (x, y), if present.
pub(crate) fn remove_point(v: &mut Vec<Point>, key: (i64, i64)) -> Option<Point> {
    match find(v, key) {
        Ok(i) => Some(v.remove(i)),
        Err(_) => None,
    }
}

/// Inserts or replaces by (x, y); returns the replaced point.
pub(crate) fn upsert_point(v: &mut Vec<Point>, p: Point) -> Option<Point> {
    match find(v, p.xkey()) {
        Ok(i) => Some(std::mem::replace(&mut v[i], p)),
        Err(i) => {
            v.insert(i, p);
            None
        }
    }
}

/// Merges `src` into the x-sorted `dst`, `src` entries replacing same-key
/// points.
pub(crate) fn merge_points(dst: &mut Vec<Point>, src: &[Point]) {
    for p in src {
        upsert_point(dst, *p);
    }
}

/// Removes every point of `keys` from `v`; returns the removed points.
pub(crate) fn remove_all(v: &mut Vec<Point>, keys: &[Point]) -> Vec<Point> {
    let mut out = Vec::new();
    for k in keys {
        if let Some(p) = remove_point(v, k.xkey()) {
            out.push(p);
        }
    }
    out
}

/// The `take` highest points by y-key in `v` (not removed).
fn top_by_y(v: &[Point], take: usize) -> Vec<Point> {
    let mut sorted: Vec<Point> = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.ykey().cmp(&a.ykey()));
    sorted.truncate(take);
    sorted
}

/// Per-epoch rebuild record for cost accounting.
#[derive(Debug, Clone, Copy)]
pub struct RebuildStat {
    pub n_before: u64,
    pub n_after: u64,
    pub io: u64,
}

/// Summary returned by the invariant walker.
#[derive(Debug, Clone, Copy, Default)]
pub struct TreeStats {
    pub nodes: u64,
    pub height: usize,
    pub live_points: u64,
}

pub struct Pst {
    pub(crate) store: Store,
    pub(crate) cfg: Config,
    // Root state, kept in internal memory. Its child structure (when the
    // root is internal) lives in blocks like everyone else's.
    pub(crate) root_is_leaf: bool,
    pub(crate) root_children: Vec<ChildRec>,
    pub(crate) root_pbuf: Vec<Point>,
    pub(crate) root_ibuf: Vec<Point>,
    pub(crate) root_dbuf: Vec<Point>,
    pub(crate) root_cs: Option<ChildHandle>,
    pub(crate) height: usize,
    n_bar: u64,
    updates_in_epoch: u64,
    anchor: BlockId,
    // Maintenance agendas; entries re-validate on pop, so stale ones are
    // harmless.
    splits: Vec<(usize, RouteKey)>,
    d_over: Vec<(usize, RouteKey)>,
    i_over: Vec<(usize, RouteKey)>,
    refills: BTreeSet<(usize, RouteKey)>,
    /// IOs spent materializing the structure at the last bulk construction.
    pub construction_io: u64,
    /// One entry per epoch rebuild since construction.
    pub rebuild_log: Vec<RebuildStat>,
}

impl Pst {
    pub fn new(cfg: Config) -> Result<Self, PstError> {
        if cfg.mem_records < 8 * cfg.block_size {
            return Err(ConfigError::InvalidConfig(format!(
                "tree requires memory of at least 8 blocks ({} records), got {}",
                8 * cfg.block_size,
                cfg.mem_records
            ))
            .into());
        }
        let mut store = Store::new(cfg.block_size, cfg.mem_records);
        let anchor = store.alloc();
        Ok(Pst {
            store,
            cfg,
            root_is_leaf: true,
            root_children: Vec::new(),
            root_pbuf: Vec::new(),
            root_ibuf: Vec::new(),
            root_dbuf: Vec::new(),
            root_cs: None,
            height: 0,
            n_bar: 0,
            updates_in_epoch: 0,
            anchor,
            splits: Vec::new(),
            d_over: Vec::new(),
            i_over: Vec::new(),
            refills: BTreeSet::new(),
            construction_io: 0,
            rebuild_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn stats(&self) -> IOStats {
        self.store.stats()
    }

    pub fn epoch(&self) -> (u64, u64) {
        (self.n_bar, self.updates_in_epoch)
    }

    // ---- node io --------------------------------------------------------

    pub(crate) fn load(&mut self, anchor: Anchor) -> Node {
        match anchor {
            Anchor::Root => Node {
                anchor,
                is_leaf: self.root_is_leaf,
                children: self.root_children.clone(),
                pbuf: self.root_pbuf.clone(),
                ibuf: self.root_ibuf.clone(),
                dbuf: self.root_dbuf.clone(),
                cs: self.root_cs,
                old: NodeRec::default(),
                old_next: None,
                dirty_p: false,
                dirty_i: false,
                dirty_d: false,
                dirty_meta: false,
            },
            Anchor::Node(id) => {
                let head = self.store.read(id).expect("node read");
                let rec = head.records[0].expect_node();
                let mut node = Node {
                    anchor,
                    is_leaf: rec.is_leaf,
                    children: Vec::new(),
                    pbuf: Vec::new(),
                    ibuf: Vec::new(),
                    dbuf: Vec::new(),
                    cs: None,
                    old: rec,
                    old_next: head.next,
                    dirty_p: false,
                    dirty_i: false,
                    dirty_d: false,
                    dirty_meta: false,
                };
                if rec.is_leaf {
                    node.pbuf = head.records[1..].iter().map(|r| r.expect_point()).collect();
                    let mut cur = head.next;
                    while let Some(b) = cur {
                        let blk = self.store.read(b).expect("leaf chain read");
                        node.pbuf.extend(blk.records.iter().map(|r| r.expect_point()));
                        cur = blk.next;
                    }
                } else {
                    node.children = head.records[1..].iter().map(|r| r.expect_child()).collect();
                    node.pbuf = self.read_points(rec.pbuf);
                    node.cs = Some(ChildHandle {
                        catalog: rec.cs_catalog,
                        samples: rec.cs_samples,
                        ibuf: rec.cs_ibuf,
                        dbuf: rec.cs_dbuf,
                        l_len: rec.cs_l_len,
                    });
                }
                node.ibuf = self.read_points(rec.ibuf);
                node.dbuf = self.read_points(rec.dbuf);
                node
            }
        }
    }

    fn read_points(&mut self, head: Option<BlockId>) -> Vec<Point> {
        self.store
            .read_chain(head)
            .expect("buffer read")
            .iter()
            .map(|r| r.expect_point())
            .collect()
    }

    fn points_rec(pts: &[Point]) -> Vec<Record> {
        pts.iter().map(|p| Record::Point(*p)).collect()
    }

    pub(crate) fn save_node(&mut self, mut node: Node) {
        debug_assert!(
            node.is_leaf || node.anchor == Anchor::Root || node.children.len() >= 2,
            "internal node saved with degree {}",
            node.children.len()
        );
        match node.anchor {
            Anchor::Root => {
                self.root_is_leaf = node.is_leaf;
                self.root_children = node.children;
                self.root_pbuf = node.pbuf;
                self.root_ibuf = node.ibuf;
                self.root_dbuf = node.dbuf;
                self.root_cs = node.cs;
            }
            Anchor::Node(id) => {
                let b = self.cfg.block_size;
                let mut rec = NodeRec { is_leaf: node.is_leaf, ..NodeRec::default() };
                if node.dirty_i || node.ibuf.len() != 0 || node.old.ibuf.is_some() {
                    if node.dirty_i {
                        rec.ibuf = self
                            .store
                            .rewrite_chain(node.old.ibuf, &Self::points_rec(&node.ibuf))
                            .expect("ibuf write");
                    } else {
                        rec.ibuf = node.old.ibuf;
                    }
                }
                if node.dirty_d {
                    rec.dbuf = self
                        .store
                        .rewrite_chain(node.old.dbuf, &Self::points_rec(&node.dbuf))
                        .expect("dbuf write");
                } else {
                    rec.dbuf = node.old.dbuf;
                }
                if node.is_leaf {
                    // Point buffer inline: head block holds the node record
                    // plus the first B-1 points, the rest chains behind.
                    if node.dirty_p || node.dirty_meta || node.dirty_i || node.dirty_d {
                        let head_take = node.pbuf.len().min(b - 1);
                        let tail = node.pbuf.split_off(head_take);
                        let next = self
                            .store
                            .rewrite_chain(node.old_next, &Self::points_rec(&tail))
                            .expect("leaf tail write");
                        let mut records = vec![Record::Node(rec)];
                        records.extend(Self::points_rec(&node.pbuf));
                        self.store.write(id, Block { records, next }).expect("leaf write");
                    }
                } else {
                    if node.dirty_p {
                        rec.pbuf = self
                            .store
                            .rewrite_chain(node.old.pbuf, &Self::points_rec(&node.pbuf))
                            .expect("pbuf write");
                    } else {
                        rec.pbuf = node.old.pbuf;
                    }
                    let cs = node.cs.expect("internal node has child structure");
                    rec.cs_catalog = cs.catalog;
                    rec.cs_samples = cs.samples;
                    rec.cs_ibuf = cs.ibuf;
                    rec.cs_dbuf = cs.dbuf;
                    rec.cs_l_len = cs.l_len;
                    let mut records = vec![Record::Node(rec)];
                    records.extend(node.children.iter().map(|c| Record::Child(*c)));
                    assert!(records.len() <= b, "node block overflow: degree {}", node.children.len());
                    self.store.write(id, Block { records, next: None }).expect("node write");
                }
            }
        }
    }

    fn alloc_node(&mut self) -> BlockId {
        self.store.alloc()
    }

    /// Children of a node without loading its buffers.
    fn load_children(&mut self, anchor: Anchor) -> Vec<ChildRec> {
        match anchor {
            Anchor::Root => self.root_children.clone(),
            Anchor::Node(id) => {
                let head = self.store.read(id).expect("node read");
                let rec = head.records[0].expect_node();
                if rec.is_leaf {
                    Vec::new()
                } else {
                    head.records[1..].iter().map(|r| r.expect_child()).collect()
                }
            }
        }
    }

    // ---- routing ----------------------------------------------------------

    fn route_child(children: &[ChildRec], rk: RouteKey) -> usize {
        match rk {
            RouteKey::Min => 0,
            RouteKey::Key(k) => children
                .iter()
                .position(|c| match c.upper {
                    XBound::PosInf => true,
                    XBound::Key(u) => u > k,
                })
                .unwrap_or(children.len().saturating_sub(1)),
        }
    }

    fn point_child(children: &[ChildRec], key: (i64, i64)) -> usize {
        children
            .iter()
            .position(|c| c.upper.admits(key))
            .unwrap_or(children.len().saturating_sub(1))
    }

    pub(crate) fn child_lower(
        parent_lower: RouteKey,
        children: &[ChildRec],
        ci: usize,
    ) -> RouteKey {
        if ci == 0 {
            parent_lower
        } else {
            match children[ci - 1].upper {
                XBound::Key(k) => RouteKey::Key(k),
                XBound::PosInf => unreachable!("non-last child with infinite upper bound"),
            }
        }
    }

    /// Walks from the root to the node at `level` addressed by `rk`.
    /// Returns the path of (anchor, lower) above it and the node's own
    /// (anchor, lower).
    pub(crate) fn route(
        &mut self,
        level: usize,
        rk: RouteKey,
    ) -> (Vec<(Anchor, RouteKey)>, Anchor, RouteKey) {
        let mut path = Vec::new();
        let mut cur = Anchor::Root;
        let mut lower = RouteKey::Min;
        let mut cur_level = self.height;
        while cur_level > level {
            let children = self.load_children(cur);
            assert!(!children.is_empty(), "routing through a leaf");
            let ci = Self::route_child(&children, rk);
            path.push((cur, lower));
            lower = Self::child_lower(lower, &children, ci);
            cur = Anchor::Node(children[ci].node);
            cur_level -= 1;
        }
        (path, cur, lower)
    }

    // ---- child structure helpers -----------------------------------------

    fn cs_insert(&mut self, node: &mut Node, pts: &[Point]) {
        if pts.is_empty() {
            return;
        }
        let mut cs = node.cs.expect("cs on internal node");
        cs.insert_all(&mut self.store, &self.cfg, pts).expect("child structure insert");
        node.cs = Some(cs);
        node.dirty_meta = true;
    }

    fn cs_delete(&mut self, node: &mut Node, pts: &[Point]) {
        if pts.is_empty() {
            return;
        }
        let mut cs = node.cs.expect("cs on internal node");
        cs.delete_all(&mut self.store, &self.cfg, pts).expect("child structure delete");
        node.cs = Some(cs);
        node.dirty_meta = true;
    }

    fn refresh_entry(v: &mut Node, ci: usize, child: &Node) {
        let e = &mut v.children[ci];
        e.min_y = child.min_y_bound();
        e.p_len = child.pbuf.len() as u32;
        v.dirty_meta = true;
    }

    // ---- public updates ---------------------------------------------------

    pub fn insert(&mut self, p: Point) {
        self.apply_update(p, true);
    }

    pub fn delete(&mut self, p: Point) {
        self.apply_update(p, false);
    }

    fn apply_update(&mut self, p: Point, is_insert: bool) {
        let b = self.cfg.block_size;
        let mut root = self.load(Anchor::Root);
        // Remove any outdated occurrence from the root buffers.
        let was_in_p = remove_point(&mut root.pbuf, p.xkey()).is_some();
        if was_in_p {
            root.dirty_p = true;
        }
        if remove_point(&mut root.ibuf, p.xkey()).is_some() {
            root.dirty_i = true;
        }
        if remove_point(&mut root.dbuf, p.xkey()).is_some() {
            root.dirty_d = true;
        }
        if root.is_leaf {
            if is_insert {
                upsert_point(&mut root.pbuf, p);
                root.dirty_p = true;
            }
            let overflow = root.pbuf.len() > b;
            self.save_node(root);
            if overflow {
                self.splits.push((self.height, RouteKey::Min));
            }
        } else {
            let pmin = root.min_p_ykey();
            if is_insert {
                // Into the point buffer when at least the current minimum;
                // low points and points arriving at an empty buffer wait in
                // the insertion buffer until a refill promotes them.
                if pmin.is_some() && p.ykey() >= pmin.unwrap() {
                    upsert_point(&mut root.pbuf, p);
                    root.dirty_p = true;
                    if root.pbuf.len() > b {
                        let excess = root.pbuf.len() - b;
                        let demoted = top_by_y(&root.pbuf, root.pbuf.len());
                        let demoted: Vec<Point> = demoted[root.pbuf.len() - excess..].to_vec();
                        for d in &demoted {
                            remove_point(&mut root.pbuf, d.xkey());
                            upsert_point(&mut root.ibuf, *d);
                        }
                        root.dirty_i = true;
                    }
                } else {
                    upsert_point(&mut root.ibuf, p);
                    root.dirty_i = true;
                }
            } else if !was_in_p && (pmin.is_none() || p.ykey() < pmin.unwrap()) {
                // The deletion may cancel a copy somewhere below.
                upsert_point(&mut root.dbuf, p);
                root.dirty_d = true;
            }
            let i_over = root.ibuf.len() > b;
            let d_over = root.dbuf.len() > b / 4;
            let p_under = root.pbuf.len() < b / 2;
            self.save_node(root);
            if d_over {
                self.d_over.push((self.height, RouteKey::Min));
            }
            if i_over {
                self.i_over.push((self.height, RouteKey::Min));
            }
            if p_under {
                self.refills.insert((self.height, RouteKey::Min));
            }
        }
        self.maintain();
        self.updates_in_epoch += 1;
        if self.updates_in_epoch >= div_ceil(self.n_bar as usize, 2).max(1) as u64 {
            self.global_rebuild();
        }
    }

    // ---- maintenance driver -------------------------------------------------

    pub(crate) fn maintain(&mut self) {
        loop {
            if let Some((lvl, rk)) = self.splits.pop() {
                self.split_step(lvl, rk);
            } else if let Some((lvl, rk)) = self.d_over.pop() {
                self.d_step(lvl, rk);
            } else if let Some((lvl, rk)) = self.i_over.pop() {
                self.i_step(lvl, rk);
            } else {
                break;
            }
        }
        while let Some(&(lvl, rk)) = self.refills.iter().next() {
            self.refills.remove(&(lvl, rk));
            self.refill_step(lvl, rk);
        }
        debug_assert!(self.splits.is_empty() && self.d_over.is_empty() && self.i_over.is_empty());
    }

    /// Partition the x-sorted `pts` by a separator key: (≤ sep, > sep).
    fn split_by_sep(pts: &[Point], sep: (i64, i64)) -> (Vec<Point>, Vec<Point>) {
        let cut = pts.partition_point(|p| p.xkey() <= sep);
        (pts[..cut].to_vec(), pts[cut..].to_vec())
    }

    fn split_step(&mut self, level: usize, rk: RouteKey) {
        let (path, anchor, lower) = self.route(level, rk);
        let v = self.load(anchor);
        let b = self.cfg.block_size;
        let delta = self.cfg.delta;
        if v.is_leaf && v.pbuf.len() > b {
            if anchor == Anchor::Root {
                self.split_root(v);
            } else {
                self.split_leaf(path, v, level, lower);
            }
        } else if !v.is_leaf && v.degree() > delta {
            if anchor == Anchor::Root {
                self.split_root(v);
            } else {
                self.split_internal(path, v, level, lower);
            }
        }
    }

    /// Splits an overflowing non-root leaf into two halves by point count.
    fn split_leaf(
        &mut self,
        path: Vec<(Anchor, RouteKey)>,
        mut v: Node,
        level: usize,
        lower: RouteKey,
    ) {
        let n = v.pbuf.len();
        let right_p = v.pbuf.split_off(n / 2 + n % 2);
        let sep = v.pbuf.last().expect("nonempty left half").xkey();
        let (left_i, right_i) = Self::split_by_sep(&v.ibuf, sep);
        let (left_d, right_d) = Self::split_by_sep(&v.dbuf, sep);
        let b = self.cfg.block_size;

        let w_id = self.alloc_node();
        let mut w = Node::fresh_leaf(Anchor::Node(w_id));
        w.pbuf = right_p;
        w.ibuf = right_i;
        w.dbuf = right_d;
        v.ibuf = left_i;
        v.dbuf = left_d;
        v.dirty_p = true;
        v.dirty_i = true;
        v.dirty_d = true;

        // Parent entry for v becomes two entries; the parent's child
        // structure is untouched because the union of point buffers is
        // unchanged.
        let (parent_anchor, parent_lower) = *path.last().expect("leaf split has a parent");
        let mut parent = self.load(parent_anchor);
        let ci = parent
            .children
            .iter()
            .position(|c| c.node == if let Anchor::Node(id) = v.anchor { id } else { unreachable!() })
            .expect("child entry present");
        let old_upper = parent.children[ci].upper;
        parent.children[ci] = ChildRec {
            node: match v.anchor {
                Anchor::Node(id) => id,
                _ => unreachable!(),
            },
            upper: XBound::Key(sep),
            min_y: v.min_y_bound(),
            p_len: v.pbuf.len() as u32,
        };
        parent.children.insert(
            ci + 1,
            ChildRec { node: w_id, upper: old_upper, min_y: w.min_y_bound(), p_len: w.pbuf.len() as u32 },
        );
        parent.dirty_meta = true;
        let parent_degree = parent.degree();

        let v_i = !v.ibuf.is_empty();
        let w_i = !w.ibuf.is_empty();
        let v_big = v.pbuf.len() > b;
        let w_big = w.pbuf.len() > b;
        self.save_node(v);
        self.save_node(w);
        self.save_node(parent);

        let w_lower = RouteKey::Key(sep);
        if parent_degree > self.cfg.delta {
            self.splits.push((level + 1, parent_lower));
        }
        if v_big {
            self.splits.push((level, lower));
        }
        if w_big {
            self.splits.push((level, w_lower));
        }
        if v_i {
            self.i_over.push((level, lower));
        }
        if w_i {
            self.i_over.push((level, w_lower));
        }
    }

    /// Splits a non-root internal node of degree Δ+1 into two nodes, moving
    /// buffers by the separator and rebuilding both child structures.
    fn split_internal(
        &mut self,
        path: Vec<(Anchor, RouteKey)>,
        mut v: Node,
        level: usize,
        lower: RouteKey,
    ) {
        let d = v.degree();
        let right_children = v.children.split_off(d / 2 + d % 2);
        let sep = match v.children.last().expect("nonempty left").upper {
            XBound::Key(k) => k,
            XBound::PosInf => unreachable!("left half keeps a bounded upper"),
        };
        let (left_p, right_p) = Self::split_by_sep(&v.pbuf, sep);
        let (left_i, right_i) = Self::split_by_sep(&v.ibuf, sep);
        let (left_d, right_d) = Self::split_by_sep(&v.dbuf, sep);

        let w_id = self.alloc_node();
        let mut w = Node::fresh_internal(Anchor::Node(w_id));
        w.children = right_children;
        w.pbuf = right_p;
        w.ibuf = right_i;
        w.dbuf = right_d;
        v.pbuf = left_p;
        v.ibuf = left_i;
        v.dbuf = left_d;
        v.dirty_p = true;
        v.dirty_i = true;
        v.dirty_d = true;
        v.dirty_meta = true;

        // Old child structure is replaced by one per half, built from the
        // children's point buffers.
        let mut old_cs = v.cs.take().expect("internal cs");
        old_cs.destroy(&mut self.store);
        v.cs = Some(self.build_cs_for(&v.children));
        w.cs = Some(self.build_cs_for(&w.children));

        let (parent_anchor, parent_lower) = *path.last().expect("internal split has a parent");
        let mut parent = self.load(parent_anchor);
        let v_id = match v.anchor {
            Anchor::Node(id) => id,
            _ => unreachable!(),
        };
        let ci = parent.children.iter().position(|c| c.node == v_id).expect("child entry");
        let old_upper = parent.children[ci].upper;
        parent.children[ci] = ChildRec {
            node: v_id,
            upper: XBound::Key(sep),
            min_y: v.min_y_bound(),
            p_len: v.pbuf.len() as u32,
        };
        parent.children.insert(
            ci + 1,
            ChildRec { node: w_id, upper: old_upper, min_y: w.min_y_bound(), p_len: w.pbuf.len() as u32 },
        );
        parent.dirty_meta = true;
        let parent_degree = parent.degree();

        let b = self.cfg.block_size;
        let checks = [
            (lower, v.ibuf.len() > b, v.dbuf.len() > b / 4, v.pbuf.len() < b / 2),
            (RouteKey::Key(sep), w.ibuf.len() > b, w.dbuf.len() > b / 4, w.pbuf.len() < b / 2),
        ];
        self.save_node(v);
        self.save_node(w);
        self.save_node(parent);

        if parent_degree > self.cfg.delta {
            self.splits.push((level + 1, parent_lower));
        }
        for (rk, i_o, d_o, p_u) in checks {
            if i_o {
                self.i_over.push((level, rk));
            }
            if d_o {
                self.d_over.push((level, rk));
            }
            if p_u {
                self.refills.insert((level, rk));
            }
        }
    }

    /// Splits the root (leaf with overflowing point buffer, or internal of
    /// degree Δ+1) into two block nodes under a fresh root, growing the tree
    /// by one level.
    fn split_root(&mut self, mut root: Node) {
        let (mut v, mut w, sep);
        let v_id = self.alloc_node();
        let w_id = self.alloc_node();
        if root.is_leaf {
            let n = root.pbuf.len();
            let right = root.pbuf.split_off(n / 2 + n % 2);
            sep = root.pbuf.last().expect("nonempty left").xkey();
            v = Node::fresh_leaf(Anchor::Node(v_id));
            v.pbuf = std::mem::take(&mut root.pbuf);
            w = Node::fresh_leaf(Anchor::Node(w_id));
            w.pbuf = right;
        } else {
            let d = root.degree();
            let right_children = root.children.split_off(d / 2 + d % 2);
            sep = match root.children.last().unwrap().upper {
                XBound::Key(k) => k,
                XBound::PosInf => unreachable!(),
            };
            let (lp, rp) = Self::split_by_sep(&root.pbuf, sep);
            let (li, ri) = Self::split_by_sep(&root.ibuf, sep);
            let (ld, rd) = Self::split_by_sep(&root.dbuf, sep);
            v = Node::fresh_internal(Anchor::Node(v_id));
            v.children = std::mem::take(&mut root.children);
            v.pbuf = lp;
            v.ibuf = li;
            v.dbuf = ld;
            w = Node::fresh_internal(Anchor::Node(w_id));
            w.children = right_children;
            w.pbuf = rp;
            w.ibuf = ri;
            w.dbuf = rd;
            if let Some(mut cs) = root.cs.take() {
                cs.destroy(&mut self.store);
            }
            v.cs = Some(self.build_cs_for(&v.children));
            w.cs = Some(self.build_cs_for(&w.children));
        }
        let mut new_root = Node::fresh_internal(Anchor::Root);
        new_root.children = vec![
            ChildRec {
                node: v_id,
                upper: XBound::Key(sep),
                min_y: v.min_y_bound(),
                p_len: v.pbuf.len() as u32,
            },
            ChildRec {
                node: w_id,
                upper: XBound::PosInf,
                min_y: w.min_y_bound(),
                p_len: w.pbuf.len() as u32,
            },
        ];
        let both_p: Vec<Point> = {
            let mut all = v.pbuf.clone();
            all.extend(w.pbuf.iter().copied());
            all
        };
        new_root.cs =
            Some(ChildHandle::build(&mut self.store, &self.cfg, &both_p).expect("root cs build"));

        let b = self.cfg.block_size;
        let checks = [
            (RouteKey::Min, v.ibuf.len() > b, v.dbuf.len() > b / 4, v.pbuf.len() < b / 2, v.pbuf.len() > b, !v.is_leaf && v.degree() > self.cfg.delta),
            (RouteKey::Key(sep), w.ibuf.len() > b, w.dbuf.len() > b / 4, w.pbuf.len() < b / 2, w.pbuf.len() > b, !w.is_leaf && w.degree() > self.cfg.delta),
        ];
        self.save_node(v);
        self.save_node(w);
        self.save_node(new_root);
        self.height += 1;
        let level = self.height - 1;
        for (rk, i_o, d_o, p_u, p_big, deg) in checks {
            if p_big || deg {
                self.splits.push((level, rk));
            }
            if i_o {
                self.i_over.push((level, rk));
            }
            if d_o {
                self.d_over.push((level, rk));
            }
            if p_u {
                self.refills.insert((level, rk));
            }
        }
        // The fresh root starts with an empty point buffer.
        self.refills.insert((self.height, RouteKey::Min));
    }

    fn build_cs_for(&mut self, children: &[ChildRec]) -> ChildHandle {
        let mut pts = Vec::new();
        for c in children {
            let child = self.load(Anchor::Node(c.node));
            pts.extend(child.pbuf.iter().copied());
        }
        debug_assert!(pts.windows(2).all(|w| w[0].xkey() < w[1].xkey()));
        ChildHandle::build(&mut self.store, &self.cfg, &pts).expect("cs build")
    }

    /// Overflowing deletion buffer: push the largest per-child group one
    /// level down, cancelling whatever it meets on the way.
    fn d_step(&mut self, level: usize, rk: RouteKey) {
        let (_path, anchor, lower) = self.route(level, rk);
        let mut v = self.load(anchor);
        let b = self.cfg.block_size;
        if v.is_leaf {
            // Deletions never rest at leaves.
            if !v.dbuf.is_empty() {
                let dels = std::mem::take(&mut v.dbuf);
                for d in &dels {
                    remove_point(&mut v.pbuf, d.xkey());
                }
                v.dirty_p = true;
                v.dirty_d = true;
                self.save_node(v);
            }
            return;
        }
        if v.dbuf.len() <= b / 4 {
            return;
        }
        // Largest group by child x-range; ties to the smallest index.
        let mut groups: Vec<Vec<Point>> = vec![Vec::new(); v.degree()];
        for p in &v.dbuf {
            groups[Self::point_child(&v.children, p.xkey())].push(*p);
        }
        let ci = (0..groups.len()).max_by_key(|&i| (groups[i].len(), usize::MAX - i)).unwrap();
        let batch = std::mem::take(&mut groups[ci]);
        for p in &batch {
            remove_point(&mut v.dbuf, p.xkey());
        }
        v.dirty_d = true;

        let child_anchor = Anchor::Node(v.children[ci].node);
        let mut c = self.load(child_anchor);
        let removed_p = remove_all(&mut c.pbuf, &batch);
        if !removed_p.is_empty() {
            c.dirty_p = true;
            self.cs_delete(&mut v, &removed_p);
        }
        if !remove_all(&mut c.ibuf, &batch).is_empty() {
            c.dirty_i = true;
        }
        if !remove_all(&mut c.dbuf, &batch).is_empty() {
            c.dirty_d = true;
        }
        if !c.is_leaf {
            // Forward deletions that may still cancel something deeper:
            // strictly below the child's point-buffer minimum. An empty
            // point buffer forwards everything, since mid-operation it does
            // not prove the subtree empty.
            let cmin = c.min_p_ykey();
            for p in batch {
                if removed_p.iter().any(|q| q.xkey() == p.xkey()) {
                    continue;
                }
                if cmin.map_or(true, |m| p.ykey() < m) {
                    upsert_point(&mut c.dbuf, p);
                    c.dirty_d = true;
                }
            }
        }
        Self::refresh_entry(&mut v, ci, &c);
        let c_lower = Self::child_lower(lower, &v.children, ci);
        let c_d_over = c.dbuf.len() > b / 4;
        let c_underflow = !c.is_leaf && c.pbuf.len() < b / 2;
        let v_still = v.dbuf.len() > b / 4;
        self.save_node(c);
        self.save_node(v);
        if v_still {
            self.d_over.push((level, rk));
        }
        if c_d_over {
            self.d_over.push((level - 1, c_lower));
        }
        if c_underflow {
            self.refills.insert((level - 1, c_lower));
        }
    }

    /// Overflowing insertion buffer (or a leaf holding a transient insertion
    /// buffer): move up to one block of the largest per-child group one
    /// level down.
    fn i_step(&mut self, level: usize, rk: RouteKey) {
        let (path, anchor, lower) = self.route(level, rk);
        let mut v = self.load(anchor);
        let b = self.cfg.block_size;
        if v.is_leaf {
            // Transient state after a query push-down: fold the insertion
            // buffer into the point buffer one block at a time, splitting as
            // needed.
            if v.ibuf.is_empty() {
                return;
            }
            let take = v.ibuf.len().min(b);
            let chunk: Vec<Point> = v.ibuf.drain(..take).collect();
            v.dirty_i = true;
            let removed = remove_all(&mut v.pbuf, &chunk);
            merge_points(&mut v.pbuf, &chunk);
            v.dirty_p = true;
            let p_big = v.pbuf.len() > b;
            let more = !v.ibuf.is_empty();
            // Parent child structure tracks the leaf's point buffer.
            if let Some(&(parent_anchor, _)) = path.last() {
                let mut parent = self.load(parent_anchor);
                let v_id = match v.anchor {
                    Anchor::Node(id) => id,
                    _ => unreachable!("root leaf holds no insertion buffer"),
                };
                let ci = parent.children.iter().position(|c| c.node == v_id).expect("entry");
                self.cs_delete(&mut parent, &removed);
                self.cs_insert(&mut parent, &chunk);
                Self::refresh_entry(&mut parent, ci, &v);
                self.save_node(parent);
            }
            self.save_node(v);
            if p_big {
                self.splits.push((level, lower));
            }
            if more {
                self.i_over.push((level, lower));
            }
            return;
        }
        if v.ibuf.len() <= b {
            return;
        }
        let mut groups: Vec<Vec<Point>> = vec![Vec::new(); v.degree()];
        for p in &v.ibuf {
            groups[Self::point_child(&v.children, p.xkey())].push(*p);
        }
        let ci = (0..groups.len()).max_by_key(|&i| (groups[i].len(), usize::MAX - i)).unwrap();
        let group = std::mem::take(&mut groups[ci]);
        let batch: Vec<Point> = group.into_iter().take(b).collect();
        for p in &batch {
            remove_point(&mut v.ibuf, p.xkey());
        }
        v.dirty_i = true;

        let child_anchor = Anchor::Node(v.children[ci].node);
        let mut c = self.load(child_anchor);
        // Fresher copies override whatever the batch meets in the child.
        let removed_p = remove_all(&mut c.pbuf, &batch);
        if !removed_p.is_empty() {
            c.dirty_p = true;
            self.cs_delete(&mut v, &removed_p);
        }
        if !remove_all(&mut c.ibuf, &batch).is_empty() {
            c.dirty_i = true;
        }
        if !remove_all(&mut c.dbuf, &batch).is_empty() {
            c.dirty_d = true;
        }
        if c.is_leaf {
            merge_points(&mut c.pbuf, &batch);
            c.dirty_p = true;
            self.cs_insert(&mut v, &batch);
        } else {
            let cmin = c.min_p_ykey();
            let (high, low): (Vec<Point>, Vec<Point>) =
                batch.into_iter().partition(|p| cmin.map_or(false, |m| p.ykey() >= m));
            if !high.is_empty() {
                merge_points(&mut c.pbuf, &high);
                c.dirty_p = true;
                self.cs_insert(&mut v, &high);
            }
            let mut demoted = Vec::new();
            if c.pbuf.len() > b {
                let excess = c.pbuf.len() - b;
                let order = top_by_y(&c.pbuf, c.pbuf.len());
                demoted = order[c.pbuf.len() - excess..].to_vec();
                for d in &demoted {
                    remove_point(&mut c.pbuf, d.xkey());
                }
                self.cs_delete(&mut v, &demoted);
            }
            if !low.is_empty() || !demoted.is_empty() {
                merge_points(&mut c.ibuf, &low);
                merge_points(&mut c.ibuf, &demoted);
                c.dirty_i = true;
            }
        }
        Self::refresh_entry(&mut v, ci, &c);
        let c_lower = Self::child_lower(lower, &v.children, ci);
        let c_leaf_big = c.is_leaf && c.pbuf.len() > b;
        let c_i_over = !c.is_leaf && c.ibuf.len() > b;
        let v_still = v.ibuf.len() > b;
        self.save_node(c);
        self.save_node(v);
        if v_still {
            self.i_over.push((level, rk));
        }
        if c_leaf_big {
            self.splits.push((level - 1, c_lower));
        }
        if c_i_over {
            self.i_over.push((level - 1, c_lower));
        }
    }

    /// Underflowing point buffer: pull the highest points up from the
    /// children, or promote from the insertion buffer when the subtree below
    /// is empty.
    fn refill_step(&mut self, level: usize, rk: RouteKey) {
        let (path, anchor, lower) = self.route(level, rk);
        let mut v = self.load(anchor);
        let b = self.cfg.block_size;
        if v.is_leaf || v.pbuf.len() >= b / 2 {
            return;
        }
        let subtree_empty = v.children.iter().all(|c| c.min_y == YBound::PosInf);
        if subtree_empty {
            // All points of this subtree sit in the root buffers of v:
            // deletions cannot cancel anything and the highest pending
            // insertions become the point buffer.
            if !v.dbuf.is_empty() {
                v.dbuf.clear();
                v.dirty_d = true;
            }
            let mut promoted = Vec::new();
            let by_y = top_by_y(&v.ibuf, v.ibuf.len());
            for p in by_y {
                if v.pbuf.len() >= b {
                    break;
                }
                remove_point(&mut v.ibuf, p.xkey());
                upsert_point(&mut v.pbuf, p);
                promoted.push(p);
            }
            if !promoted.is_empty() {
                v.dirty_p = true;
                v.dirty_i = true;
            }
            self.finish_refill(path, &mut v, &promoted);
            self.save_node(v);
            return;
        }

        // Gather the highest B/2 points across the nonempty children.
        let take = b / 2;
        let mut loaded: Vec<(usize, Node)> = Vec::new();
        let mut pool: Vec<(usize, Point)> = Vec::new();
        for (ci, e) in v.children.iter().enumerate() {
            if e.min_y == YBound::PosInf {
                continue;
            }
            let c = self.load(Anchor::Node(e.node));
            for p in &c.pbuf {
                pool.push((ci, *p));
            }
            loaded.push((ci, c));
        }
        pool.sort_unstable_by(|a, b| b.1.ykey().cmp(&a.1.ykey()));
        pool.truncate(take);
        let mut x: Vec<Point> = pool.iter().map(|(_, p)| *p).collect();

        for (ci, c) in loaded.iter_mut() {
            let mine: Vec<Point> =
                pool.iter().filter(|(i, _)| i == ci).map(|(_, p)| *p).collect();
            if mine.is_empty() {
                continue;
            }
            for p in &mine {
                remove_point(&mut c.pbuf, p.xkey());
            }
            c.dirty_p = true;
        }
        self.cs_delete(&mut v, &x);

        // Annihilate against the deletion buffer.
        let cancelled = remove_all(&mut v.dbuf, &x);
        if !cancelled.is_empty() {
            v.dirty_d = true;
            for p in &cancelled {
                let i = x.iter().position(|q| q.xkey() == p.xkey()).unwrap();
                x.remove(i);
            }
        }
        // Pending insertions are fresher than what came up.
        for i in 0..x.len() {
            if let Some(fresh) = remove_point(&mut v.ibuf, x[i].xkey()) {
                x[i] = fresh;
                v.dirty_i = true;
            }
        }
        // Restore ordering between the insertion buffer and the pulled set.
        loop {
            let (Some(hi), Some(lo)) = (
                v.ibuf.iter().max_by_key(|p| p.ykey()).copied(),
                x.iter().min_by_key(|p| p.ykey()).copied(),
            ) else {
                break;
            };
            if hi.ykey() <= lo.ykey() {
                break;
            }
            remove_point(&mut v.ibuf, hi.xkey());
            let i = x.iter().position(|q| q.xkey() == lo.xkey()).unwrap();
            x.remove(i);
            x.push(hi);
            upsert_point(&mut v.ibuf, lo);
            v.dirty_i = true;
        }
        merge_points(&mut v.pbuf, &x);
        v.dirty_p = true;
        // Dead deletions (targets provably absent below) may now sit at or
        // above the new point-buffer minimum; drop them.
        if let Some(pmin) = v.min_p_ykey() {
            let before = v.dbuf.len();
            v.dbuf.retain(|d| d.ykey() < pmin);
            if v.dbuf.len() != before {
                v.dirty_d = true;
            }
        }

        // Write children back, refresh entries, queue drained children.
        let mut child_checks = Vec::new();
        for (ci, c) in loaded {
            Self::refresh_entry(&mut v, ci, &c);
            if !c.is_leaf && c.pbuf.len() < b / 2 {
                child_checks.push(Self::child_lower(lower, &v.children, ci));
            }
            self.save_node(c);
        }
        self.finish_refill(path, &mut v, &x);
        let v_still = v.pbuf.len() < b / 2
            && v.children.iter().any(|c| c.min_y != YBound::PosInf);
        self.save_node(v);
        for c_rk in child_checks {
            self.refills.insert((level - 1, c_rk));
        }
        if v_still {
            self.refills.insert((level, rk));
        }
    }

    /// After a refill changed v's point buffer, mirror the change into the
    /// parent's child structure and routing entry.
    fn finish_refill(&mut self, path: Vec<(Anchor, RouteKey)>, v: &mut Node, added: &[Point]) {
        let Some(&(parent_anchor, _)) = path.last() else { return };
        let v_id = match v.anchor {
            Anchor::Node(id) => id,
            Anchor::Root => return,
        };
        let mut parent = self.load(parent_anchor);
        let ci = parent.children.iter().position(|c| c.node == v_id).expect("entry");
        self.cs_insert(&mut parent, added);
        Self::refresh_entry(&mut parent, ci, v);
        self.save_node(parent);
    }

    // ---- global rebuilding -------------------------------------------------

    /// Flushes all buffered updates top-down, collects the surviving points,
    /// tears the old tree down and bulk-builds a fresh one. Starts a new
    /// epoch.
    fn global_rebuild(&mut self) {
        let before = self.store.stats();
        let n_before = self.n_bar;
        let mut writer = ChainWriter::new(self.cfg.block_size);
        self.flush_subtree(Anchor::Root, BTreeMap::new(), &mut writer, true);
        let (head, count) = writer.finish(&mut self.store);
        // Old structure is gone; rebuild from the collected chain.
        self.root_is_leaf = true;
        self.root_children.clear();
        self.root_pbuf.clear();
        self.root_ibuf.clear();
        self.root_dbuf.clear();
        self.root_cs = None;
        self.height = 0;
        self.construct_from_chain(head, count, false).expect("rebuild construction");
        self.n_bar = count as u64;
        self.updates_in_epoch = 0;
        let io = self.store.stats().io_since(&before);
        self.rebuild_log.push(RebuildStat { n_before, n_after: self.n_bar, io });
    }

    /// Depth-first flush: `pending` carries updates from ancestors, fresher
    /// than anything stored at or below this node. Emits live points to the
    /// writer; when `destroy`, frees every visited block.
    fn flush_subtree(
        &mut self,
        anchor: Anchor,
        mut pending: BTreeMap<(i64, i64), Update>,
        writer: &mut ChainWriter,
        destroy: bool,
    ) {
        let mut node = self.load(anchor);
        // Apply ancestors' updates to this point buffer; a hit consumes the
        // update (no older copy can exist below, by the heap ordering).
        let mut consumed = Vec::new();
        for (key, upd) in pending.iter() {
            match upd {
                Update::Ins(q) => {
                    if let Ok(i) = find(&node.pbuf, *key) {
                        node.pbuf[i] = *q;
                        consumed.push(*key);
                    }
                }
                Update::Del(_) => {
                    if remove_point(&mut node.pbuf, *key).is_some() {
                        consumed.push(*key);
                    }
                }
            }
        }
        for key in consumed {
            pending.remove(&key);
        }
        for p in &node.pbuf {
            writer.push_point(&mut self.store, *p);
        }
        if node.is_leaf {
            for (_, upd) in pending {
                if let Update::Ins(q) = upd {
                    writer.push_point(&mut self.store, q);
                }
            }
        } else {
            // This node's own buffered updates are older than `pending`.
            for p in &node.ibuf {
                pending.entry(p.xkey()).or_insert(Update::Ins(*p));
            }
            for p in &node.dbuf {
                pending.entry(p.xkey()).or_insert(Update::Del(*p));
            }
            let mut rest = pending;
            for e in &node.children {
                let share = match e.upper {
                    XBound::PosInf => std::mem::take(&mut rest),
                    XBound::Key(u) => {
                        let boundary = if u.1 == i64::MAX { (u.0 + 1, i64::MIN) } else { (u.0, u.1 + 1) };
                        let after = rest.split_off(&boundary);
                        std::mem::replace(&mut rest, after)
                    }
                };
                self.flush_subtree(Anchor::Node(e.node), share, writer, destroy);
            }
        }
        if destroy {
            if let Some(mut cs) = node.cs.take() {
                cs.destroy(&mut self.store);
            }
            match anchor {
                Anchor::Root => {}
                Anchor::Node(id) => {
                    self.store.free_chain(node.old.pbuf).expect("free pbuf");
                    self.store.free_chain(node.old.ibuf).expect("free ibuf");
                    self.store.free_chain(node.old.dbuf).expect("free dbuf");
                    self.store.free_chain(node.old_next).expect("free leaf tail");
                    self.store.free(id).expect("free node block");
                }
            }
        }
    }

    /// The live set, by top-down replay of buffered updates (ancestors win).
    /// Reads but does not modify the structure.
    pub fn collect_live(&mut self) -> Vec<Point> {
        let mut out = Vec::new();
        self.collect_subtree(Anchor::Root, BTreeMap::new(), &mut out);
        out.sort_unstable_by_key(|p| p.xkey());
        out
    }

    fn collect_subtree(
        &mut self,
        anchor: Anchor,
        mut pending: BTreeMap<(i64, i64), Update>,
        out: &mut Vec<Point>,
    ) {
        let mut node = self.load(anchor);
        let mut consumed = Vec::new();
        for (key, upd) in pending.iter() {
            match upd {
                Update::Ins(q) => {
                    if let Ok(i) = find(&node.pbuf, *key) {
                        node.pbuf[i] = *q;
                        consumed.push(*key);
                    }
                }
                Update::Del(_) => {
                    if remove_point(&mut node.pbuf, *key).is_some() {
                        consumed.push(*key);
                    }
                }
            }
        }
        for key in consumed {
            pending.remove(&key);
        }
        out.extend(node.pbuf.iter().copied());
        if node.is_leaf {
            for (_, upd) in pending {
                if let Update::Ins(q) = upd {
                    out.push(q);
                }
            }
            return;
        }
        for p in &node.ibuf {
            pending.entry(p.xkey()).or_insert(Update::Ins(*p));
        }
        for p in &node.dbuf {
            pending.entry(p.xkey()).or_insert(Update::Del(*p));
        }
        let mut rest = pending;
        for e in &node.children {
            let share = match e.upper {
                XBound::PosInf => std::mem::take(&mut rest),
                XBound::Key(u) => {
                    let boundary = if u.1 == i64::MAX { (u.0 + 1, i64::MIN) } else { (u.0, u.1 + 1) };
                    let after = rest.split_off(&boundary);
                    std::mem::replace(&mut rest, after)
                }
            };
            self.collect_subtree(Anchor::Node(e.node), share, out);
        }
    }

    // ---- bulk construction ----------------------------------------------

    /// Builds the structure for `points`. X-sorted input costs a linear
    /// number of IOs; unsorted input is externally sorted first.
    pub fn bulk_construct(points: Vec<Point>, cfg: Config) -> Result<Self, PstError> {
        let mut pst = Pst::new(cfg)?;
        let sorted = points.windows(2).all(|w| w[0].xkey() < w[1].xkey());
        let mut w = ChainWriter::new(cfg.block_size);
        for p in &points {
            w.push_point(&mut pst.store, *p);
        }
        let (head, count) = w.finish(&mut pst.store);
        pst.store.flush_all();
        let before = pst.store.stats();
        pst.construct_from_chain(head, count, sorted)?;
        pst.store.flush_all();
        pst.construction_io = pst.store.stats().io_since(&before);
        pst.n_bar = count as u64;
        pst.updates_in_epoch = 0;
        Ok(pst)
    }

    /// Core construction: consumes the input chain, builds leaves of B/2
    /// points and internal levels of degree ~Δ/2, then fills point buffers
    /// bottom-up and tops them up to B top-down, building child structures
    /// on the way back up.
    fn construct_from_chain(
        &mut self,
        mut head: Option<BlockId>,
        count: usize,
        sorted: bool,
    ) -> Result<(), PstError> {
        let b = self.cfg.block_size;
        if !sorted {
            head = sort_points_by_x(&mut self.store, &self.cfg, head);
        }
        // Leaves of B/2 points (rightmost ragged).
        let leaf_cap = (b / 2).max(1);
        let mut reader = ChainReader::new(head);
        let mut leaves: Vec<ChildRec> = Vec::new();
        let mut buf: Vec<Point> = Vec::new();
        let mut prev_key: Option<(i64, i64)> = None;
        let mut emit_leaf = |pst: &mut Self, buf: &mut Vec<Point>, leaves: &mut Vec<ChildRec>| {
            if buf.is_empty() {
                return;
            }
            let id = pst.alloc_node();
            let mut leaf = Node::fresh_leaf(Anchor::Node(id));
            leaf.pbuf = std::mem::take(buf);
            let entry = ChildRec {
                node: id,
                upper: XBound::Key(leaf.pbuf.last().unwrap().xkey()),
                min_y: leaf.min_y_bound(),
                p_len: leaf.pbuf.len() as u32,
            };
            pst.save_node(leaf);
            leaves.push(entry);
        };
        let mut n_seen = 0usize;
        while let Some(p) = reader.next_point(&mut self.store) {
            if prev_key == Some(p.xkey()) {
                return Err(PstError::DuplicatePoint(p.x, p.y));
            }
            if let Some(prev) = prev_key {
                debug_assert!(prev < p.xkey());
            }
            prev_key = Some(p.xkey());
            buf.push(p);
            n_seen += 1;
            if buf.len() == leaf_cap {
                emit_leaf(self, &mut buf, &mut leaves);
            }
        }
        emit_leaf(self, &mut buf, &mut leaves);
        debug_assert_eq!(n_seen, count);
        self.store.free_chain(head).expect("free construction input");

        if leaves.is_empty() {
            self.root_is_leaf = true;
            self.height = 0;
            return Ok(());
        }
        if leaves.len() == 1 {
            // Single leaf: it becomes the in-memory root.
            let leaf = self.load(Anchor::Node(leaves[0].node));
            self.root_is_leaf = true;
            self.root_pbuf = leaf.pbuf.clone();
            self.store.free_chain(leaf.old_next).expect("free leaf tail");
            self.store.free(leaves[0].node).expect("free leaf block");
            self.height = 0;
            return Ok(());
        }

        // Internal levels of degree max(2, ceil(Δ/2)) until at most Δ groups
        // remain; those become the root's children.
        let deg = div_ceil(self.cfg.delta, 2).max(2);
        let mut level_nodes: Vec<Vec<BlockId>> = vec![leaves.iter().map(|e| e.node).collect()];
        let mut current = leaves;
        let mut levels = 0usize;
        while current.len() > self.cfg.delta {
            let mut next: Vec<ChildRec> = Vec::new();
            for group in current.chunks(deg) {
                let id = self.alloc_node();
                let mut node = Node::fresh_internal(Anchor::Node(id));
                node.children = group.to_vec();
                let entry = ChildRec {
                    node: id,
                    upper: group.last().unwrap().upper,
                    min_y: YBound::PosInf,
                    p_len: 0,
                };
                self.save_node(node);
                next.push(entry);
            }
            levels += 1;
            level_nodes.push(next.iter().map(|e| e.node).collect());
            current = next;
        }
        // The last child of the rightmost node spans to +inf.
        self.root_is_leaf = false;
        self.root_children = current;
        if let Some(last) = self.root_children.last_mut() {
            last.upper = XBound::PosInf;
        }
        self.root_pbuf.clear();
        self.root_ibuf.clear();
        self.root_dbuf.clear();
        self.root_cs = Some(ChildHandle::default());
        self.height = levels + 1;
        // The rightmost spine inherits the unbounded upper so every node's
        // last child covers exactly the node's own range.
        let mut cur = self.root_children.last().unwrap().node;
        loop {
            let mut node = self.load(Anchor::Node(cur));
            if node.is_leaf {
                break;
            }
            let last = node.children.last_mut().unwrap();
            last.upper = XBound::PosInf;
            let next = last.node;
            node.dirty_meta = true;
            self.save_node(node);
            cur = next;
        }

        // Phase 1: bottom-up, every internal node pulls B/2.
        for level in 1..self.height {
            let ids = level_nodes[level].clone();
            for id in ids {
                self.construct_fill(Anchor::Node(id), b / 2);
            }
        }
        self.construct_fill(Anchor::Root, b / 2);
        // Phase 2: top-down top-up to exactly B, building child structures
        // post-order.
        self.construct_topup(Anchor::Root);
        Ok(())
    }

    /// Pulls points from the children until `|P_v| >= target` or the subtree
    /// is exhausted, preserving the invariant that every point buffer holds
    /// the top of its subtree. Pull slugs stay at most B/2 so child point
    /// buffers always cover the slug.
    fn construct_fill(&mut self, anchor: Anchor, target: usize) {
        let b = self.cfg.block_size;
        let mut v = self.load(anchor);
        if v.is_leaf {
            return;
        }
        while v.pbuf.len() < target {
            let want = (target - v.pbuf.len()).min(b / 2);
            let mut loaded: Vec<(usize, Node)> = Vec::new();
            let mut pool: Vec<(usize, Point)> = Vec::new();
            for (ci, e) in v.children.iter().enumerate() {
                let c = self.load(Anchor::Node(e.node));
                for p in &c.pbuf {
                    pool.push((ci, *p));
                }
                loaded.push((ci, c));
            }
            pool.sort_unstable_by(|a, b| b.1.ykey().cmp(&a.1.ykey()));
            pool.truncate(want);
            if pool.is_empty() {
                break;
            }
            let x: Vec<Point> = pool.iter().map(|(_, p)| *p).collect();
            for (ci, c) in loaded.iter_mut() {
                let mine: Vec<Point> =
                    pool.iter().filter(|(i, _)| i == ci).map(|(_, p)| *p).collect();
                if mine.is_empty() {
                    continue;
                }
                for p in &mine {
                    remove_point(&mut c.pbuf, p.xkey());
                }
                c.dirty_p = true;
            }
            merge_points(&mut v.pbuf, &x);
            v.dirty_p = true;
            let refill: Vec<Anchor> = loaded
                .iter()
                .filter(|(_, c)| !c.is_leaf && c.pbuf.len() < b / 2)
                .map(|(_, c)| c.anchor)
                .collect();
            for (ci, c) in loaded {
                Self::refresh_entry(&mut v, ci, &c);
                self.save_node(c);
            }
            for a in refill {
                self.construct_fill(a, b / 2);
                // refresh the entry after the recursive fill
                let c = self.load(a);
                let id = match a {
                    Anchor::Node(id) => id,
                    Anchor::Root => unreachable!(),
                };
                let ci = v.children.iter().position(|e| e.node == id).unwrap();
                Self::refresh_entry(&mut v, ci, &c);
            }
        }
        self.save_node(v);
    }

    fn construct_topup(&mut self, anchor: Anchor) {
        let b = self.cfg.block_size;
        let node = self.load(anchor);
        if node.is_leaf {
            return;
        }
        drop(node);
        self.construct_fill(anchor, b);
        let node = self.load(anchor);
        let child_anchors: Vec<Anchor> =
            node.children.iter().map(|e| Anchor::Node(e.node)).collect();
        drop(node);
        for a in &child_anchors {
            self.construct_topup(*a);
        }
        // Children are final: build the child structure and entries.
        let mut v = self.load(anchor);
        let mut pts = Vec::new();
        for ci in 0..v.children.len() {
            let c = self.load(Anchor::Node(v.children[ci].node));
            pts.extend(c.pbuf.iter().copied());
            v.children[ci].min_y = c.min_y_bound();
            v.children[ci].p_len = c.pbuf.len() as u32;
        }
        v.dirty_meta = true;
        if let Some(mut cs) = v.cs.take() {
            cs.destroy(&mut self.store);
        }
        v.cs = Some(ChildHandle::build(&mut self.store, &self.cfg, &pts).expect("cs build"));
        self.save_node(v);
    }

    // ---- persistence -------------------------------------------------------

    /// Serializes the root state into the superblock chain and writes the
    /// whole block file.
    pub fn save(&mut self, path: &Path) -> Result<(), PstError> {
        let meta = MetaRec {
            is_leaf: self.root_is_leaf,
            n_bar: self.n_bar,
            updates_in_epoch: self.updates_in_epoch,
            height: self.height as u32,
            eps_num: self.cfg.epsilon.num,
            eps_den: self.cfg.epsilon.den,
            alpha: self.cfg.alpha as u32,
            child_count: self.root_children.len() as u32,
            p_len: self.root_pbuf.len() as u32,
            i_len: self.root_ibuf.len() as u32,
            d_len: self.root_dbuf.len() as u32,
            cs_catalog: self.root_cs.and_then(|c| c.catalog),
            cs_samples: self.root_cs.and_then(|c| c.samples),
            cs_ibuf: self.root_cs.and_then(|c| c.ibuf),
            cs_dbuf: self.root_cs.and_then(|c| c.dbuf),
            cs_l_len: self.root_cs.map(|c| c.l_len).unwrap_or(0),
        };
        let mut records = vec![Record::Meta(meta)];
        records.extend(self.root_children.iter().map(|c| Record::Child(*c)));
        records.extend(Self::points_rec(&self.root_pbuf));
        records.extend(Self::points_rec(&self.root_ibuf));
        records.extend(Self::points_rec(&self.root_dbuf));
        let b = self.cfg.block_size;
        let head_take = records.len().min(b);
        let old_next = self.store.read(self.anchor)?.next;
        let next = self.store.rewrite_chain(old_next, &records[head_take..])?;
        self.store
            .write(self.anchor, Block { records: records[..head_take].to_vec(), next })?;
        self.store.save(path)?;
        Ok(())
    }

    /// Reopens a structure saved with [`Pst::save`].
    pub fn open(path: &Path) -> Result<Self, PstError> {
        let mut store: Store = BlockStore::load(path)?;
        let anchor = BlockId(0);
        let records = store.read_chain(Some(anchor))?;
        let Some(Record::Meta(meta)) = records.first().cloned() else {
            return Err(StoreError::Persist("missing superblock".into()).into());
        };
        let eps = Epsilon::new(meta.eps_num, meta.eps_den).map_err(PstError::Config)?;
        let cfg = Config::with_alpha(
            store.block_size(),
            eps,
            store.mem_records(),
            meta.alpha as usize,
        )?;
        let mut pos = 1usize;
        let children: Vec<ChildRec> = records[pos..pos + meta.child_count as usize]
            .iter()
            .map(|r| r.expect_child())
            .collect();
        pos += meta.child_count as usize;
        let take_points = |records: &[Record], pos: &mut usize, n: usize| -> Vec<Point> {
            let out = records[*pos..*pos + n].iter().map(|r| r.expect_point()).collect();
            *pos += n;
            out
        };
        let pbuf = take_points(&records, &mut pos, meta.p_len as usize);
        let ibuf = take_points(&records, &mut pos, meta.i_len as usize);
        let dbuf = take_points(&records, &mut pos, meta.d_len as usize);
        let cs = if meta.is_leaf {
            None
        } else {
            Some(ChildHandle {
                catalog: meta.cs_catalog,
                samples: meta.cs_samples,
                ibuf: meta.cs_ibuf,
                dbuf: meta.cs_dbuf,
                l_len: meta.cs_l_len,
            })
        };
        Ok(Pst {
            store,
            cfg,
            root_is_leaf: meta.is_leaf,
            root_children: children,
            root_pbuf: pbuf,
            root_ibuf: ibuf,
            root_dbuf: dbuf,
            root_cs: cs,
            height: meta.height as usize,
            n_bar: meta.n_bar,
            updates_in_epoch: meta.updates_in_epoch,
            anchor,
            splits: Vec::new(),
            d_over: Vec::new(),
            i_over: Vec::new(),
            refills: BTreeSet::new(),
            construction_io: 0,
            rebuild_log: Vec::new(),
        })
    }

    // ---- invariant walker ----------------------------------------------------

    /// Checks every structural invariant; returns tree statistics on success
    /// and a description of the first violation otherwise.
    pub fn check_invariants(&mut self) -> Result<TreeStats, String> {
        let mut stats = TreeStats { height: self.height, ..TreeStats::default() };
        let mut ancestor_keys: Vec<(i64, i64)> = Vec::new();
        self.check_node(
            Anchor::Root,
            self.height,
            None,
            None,
            None,
            &mut ancestor_keys,
            &mut stats,
        )?;
        stats.live_points = self.collect_live().len() as u64;
        Ok(stats)
    }

    #[allow(clippy::too_many_arguments)]
    fn check_node(
        &mut self,
        anchor: Anchor,
        level: usize,
        lower: Option<(i64, i64)>,
        upper: Option<(i64, i64)>,
        anc_pmin: Option<(i64, i64)>,
        ancestor_keys: &mut Vec<(i64, i64)>,
        stats: &mut TreeStats,
    ) -> Result<usize, String> {
        let node = self.load(anchor);
        stats.nodes += 1;
        let b = self.cfg.block_size;
        let name = match anchor {
            Anchor::Root => "root".to_string(),
            Anchor::Node(id) => format!("{id} (level {level})"),
        };
        let fail = |msg: String| Err(format!("{name}: {msg}"));

        if node.is_leaf != (level == 0) {
            return fail(format!("leaf flag {} at level {level}", node.is_leaf));
        }
        // Buffer disjointness and x-range containment.
        for (tag, buf) in [("P", &node.pbuf), ("I", &node.ibuf), ("D", &node.dbuf)] {
            for w in buf.windows(2) {
                if w[0].xkey() >= w[1].xkey() {
                    return fail(format!("{tag} buffer not strictly x-sorted"));
                }
            }
            for p in buf {
                if lower.map_or(false, |lo| p.xkey() <= lo)
                    || upper.map_or(false, |hi| p.xkey() > hi)
                {
                    return fail(format!("{tag} point ({}, {}) outside x-range", p.x, p.y));
                }
            }
        }
        for (a, bb) in [(&node.pbuf, &node.ibuf), (&node.pbuf, &node.dbuf), (&node.ibuf, &node.dbuf)]
        {
            for p in a.iter() {
                if find(bb, p.xkey()).is_ok() {
                    return fail(format!("buffers share point ({}, {})", p.x, p.y));
                }
            }
        }
        if node.is_leaf && (!node.ibuf.is_empty() || !node.dbuf.is_empty()) {
            return fail("leaf with nonempty update buffers".into());
        }
        if node.pbuf.len() > b {
            return fail(format!("point buffer over capacity: {}", node.pbuf.len()));
        }
        // Ordering: update buffers strictly below the point buffer.
        if let Some(pmin) = node.min_p_ykey() {
            for p in node.ibuf.iter().chain(node.dbuf.iter()) {
                if p.ykey() >= pmin {
                    return fail(format!(
                        "buffered update ({}, {}) at or above the point-buffer minimum",
                        p.x, p.y
                    ));
                }
            }
        }
        // Heap order with respect to ancestors, modulo stale copies shadowed
        // by a fresher ancestor occurrence of the same point.
        if let Some(apm) = anc_pmin {
            for p in node.pbuf.iter().chain(node.ibuf.iter()).chain(node.dbuf.iter()) {
                if p.ykey() >= apm && !ancestor_keys.contains(&p.xkey()) {
                    return fail(format!(
                        "point ({}, {}) at or above an ancestor point-buffer minimum",
                        p.x, p.y
                    ));
                }
            }
        }
        // Degree bounds.
        if !node.is_leaf {
            let deg = node.degree();
            let (lo_deg, hi_deg) = if anchor == Anchor::Root {
                (2, self.cfg.delta)
            } else {
                ((self.cfg.delta / 2).max(1), self.cfg.delta)
            };
            if deg < lo_deg || deg > hi_deg {
                return fail(format!("degree {deg} outside [{lo_deg}, {hi_deg}]"));
            }
            let last_upper = node.children.last().unwrap().upper;
            match (upper, last_upper) {
                (None, XBound::PosInf) => {}
                (Some(hi), XBound::Key(k)) if k == hi => {}
                _ => return fail("last child's upper bound differs from the node's".into()),
            }
        }
        // Recurse, collect subtree info.
        let mut subtree_points = node.pbuf.len() + node.ibuf.len() + node.dbuf.len();
        if !node.is_leaf {
            let new_pmin = match (anc_pmin, node.min_p_ykey()) {
                (Some(a), Some(m)) => Some(a.min(m)),
                (a, m) => a.or(m),
            };
            let pushed = node.pbuf.len() + node.ibuf.len() + node.dbuf.len();
            for p in node.pbuf.iter().chain(node.ibuf.iter()).chain(node.dbuf.iter()) {
                ancestor_keys.push(p.xkey());
            }
            let mut union_children_p: Vec<Point> = Vec::new();
            let mut cur_lower = lower;
            for (ci, e) in node.children.iter().enumerate() {
                let child_upper = match e.upper {
                    XBound::Key(k) => Some(k),
                    XBound::PosInf => None,
                };
                if ci + 1 < node.degree() && child_upper.is_none() {
                    return fail("interior child with infinite upper".into());
                }
                let child = self.load(Anchor::Node(e.node));
                if e.min_y != child.min_y_bound() {
                    return fail(format!("child {ci} min_y entry stale"));
                }
                if e.p_len as usize != child.pbuf.len() {
                    return fail(format!("child {ci} p_len entry stale"));
                }
                union_children_p.extend(child.pbuf.iter().copied());
                drop(child);
                subtree_points += self.check_node(
                    Anchor::Node(e.node),
                    level - 1,
                    cur_lower,
                    child_upper,
                    new_pmin,
                    ancestor_keys,
                    stats,
                )?;
                cur_lower = child_upper.or(cur_lower);
            }
            ancestor_keys.truncate(ancestor_keys.len() - pushed);
            // Child structure mirrors the union of children's point buffers.
            union_children_p.sort_unstable_by_key(|p| p.xkey());
            let cs = node.cs.expect("internal cs");
            let cs_live = cs.live_points(&mut self.store, &self.cfg);
            if cs_live != union_children_p {
                return fail(format!(
                    "child structure live set has {} points, children buffers {}",
                    cs_live.len(),
                    union_children_p.len()
                ));
            }
        }
        // Size invariants.
        let inv1 = node.pbuf.len() >= b / 2
            && node.pbuf.len() <= b
            && node.dbuf.len() <= b / 4
            && node.ibuf.len() <= b;
        let below_empty = subtree_points == node.pbuf.len() + node.ibuf.len() + node.dbuf.len()
            || subtree_points == node.pbuf.len();
        let inv2 = node.pbuf.len() < b / 2
            && node.ibuf.is_empty()
            && node.dbuf.is_empty()
            && subtree_points == node.pbuf.len();
        if !(inv1 || inv2) {
            return fail(format!(
                "size invariants violated: |P|={}, |I|={}, |D|={}, subtree={}",
                node.pbuf.len(),
                node.ibuf.len(),
                node.dbuf.len(),
                subtree_points
            ));
        }
        let _ = below_empty;
        Ok(subtree_points)
    }
}

/// A buffered update flowing down during flush/collect traversals.
#[derive(Debug, Clone, Copy)]
enum Update {
    Ins(Point),
    Del(Point),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{canon, OracleSet};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cfg(b: usize, num: u32, den: u32) -> Config {
        Config::new(b, Epsilon::new(num, den).unwrap(), 64 * b).unwrap()
    }

    fn p(x: i64, y: i64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn insert_into_empty() {
        let mut t = Pst::new(cfg(16, 1, 2)).unwrap();
        t.insert(p(5, 7));
        assert_eq!(t.collect_live(), vec![p(5, 7)]);
        t.check_invariants().unwrap();
    }

    #[test]
    fn insert_then_delete() {
        let mut t = Pst::new(cfg(16, 1, 2)).unwrap();
        t.insert(p(5, 7));
        t.delete(p(5, 7));
        assert!(t.collect_live().is_empty());
        t.check_invariants().unwrap();
        // deleting an absent point is a no-op
        t.delete(p(1, 1));
        assert!(t.collect_live().is_empty());
    }

    #[test]
    fn duplicate_insert_replaces_payload() {
        let mut t = Pst::new(cfg(16, 1, 2)).unwrap();
        t.insert(Point::with_payload(3, 3, *b"oldvalue"));
        t.insert(Point::with_payload(3, 3, *b"newvalue"));
        let live = t.collect_live();
        assert_eq!(live.len(), 1);
        assert_eq!(live[0].payload, Some(*b"newvalue"));
    }

    #[test]
    fn bulk_construct_small_sorted() {
        for n in [0usize, 1, 7, 8, 9, 64, 200] {
            let pts: Vec<Point> = (0..n as i64).map(|i| p(i, (i * 37) % 101)).collect();
            let mut t = Pst::bulk_construct(pts.clone(), cfg(16, 1, 2)).unwrap();
            assert_eq!(t.collect_live(), pts, "n={n}");
            t.check_invariants().unwrap();
        }
    }

    #[test]
    fn bulk_construct_unsorted_and_duplicates() {
        let pts = vec![p(5, 1), p(1, 2), p(3, 3)];
        let mut t = Pst::bulk_construct(pts, cfg(16, 1, 2)).unwrap();
        assert_eq!(t.collect_live(), vec![p(1, 2), p(3, 3), p(5, 1)]);
        t.check_invariants().unwrap();
        let dup = vec![p(1, 1), p(1, 1)];
        assert!(matches!(
            Pst::bulk_construct(dup, cfg(16, 1, 2)),
            Err(PstError::DuplicatePoint(1, 1))
        ));
    }

    #[test]
    fn construction_shape_two_levels() {
        let cfg = cfg(16, 1, 2);
        let n = cfg.block_size * cfg.delta * cfg.delta;
        let pts: Vec<Point> = (0..n as i64).map(|i| p(i, i * 13 % 4099)).collect();
        let mut t = Pst::bulk_construct(pts, cfg).unwrap();
        let stats = t.check_invariants().unwrap();
        assert!(stats.height >= 2, "height {} for N=B*delta^2", stats.height);
        assert_eq!(stats.live_points as usize, n);
    }

    #[test]
    fn random_trace_matches_oracle_with_invariants() {
        let configs = [cfg(8, 1, 2), cfg(8, 1, 3), cfg(16, 1, 2)];
        for (ci, cfg) in configs.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + ci as u64);
            let mut t = Pst::new(cfg).unwrap();
            let mut oracle = OracleSet::new();
            for step in 0..1500 {
                let roll: f64 = rng.gen();
                if roll < 0.65 || oracle.is_empty() {
                    let q = p(rng.gen_range(0..500), rng.gen_range(0..10_000));
                    t.insert(q);
                    oracle.insert(q);
                } else {
                    let q = if rng.gen_bool(0.8) {
                        let pts = oracle.points();
                        pts[rng.gen_range(0..pts.len())]
                    } else {
                        p(rng.gen_range(0..500), rng.gen_range(0..10_000))
                    };
                    t.delete(q);
                    oracle.delete(q);
                }
                if step % 100 == 99 {
                    assert_eq!(
                        canon(t.collect_live()),
                        canon(oracle.points()),
                        "divergence at step {step} config {ci}"
                    );
                    t.check_invariants()
                        .unwrap_or_else(|e| panic!("invariant at step {step} config {ci}: {e}"));
                }
            }
        }
    }

    #[test]
    fn epoch_rebuild_preserves_live_set() {
        let cfg = cfg(8, 1, 2);
        let pts: Vec<Point> = (0..64).map(|i| p(i, i)).collect();
        let mut t = Pst::bulk_construct(pts.clone(), cfg).unwrap();
        let mut oracle = OracleSet::from_points(pts);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // 5 * n_bar / 2 updates crosses at least two epoch boundaries.
        for _ in 0..160 {
            if rng.gen_bool(0.5) {
                let q = p(rng.gen_range(0..200), rng.gen_range(0..1000));
                t.insert(q);
                oracle.insert(q);
            } else if !oracle.is_empty() {
                let pts = oracle.points();
                let q = pts[rng.gen_range(0..pts.len())];
                t.delete(q);
                oracle.delete(q);
            }
        }
        assert!(!t.rebuild_log.is_empty(), "expected at least one epoch rebuild");
        assert_eq!(canon(t.collect_live()), canon(oracle.points()));
        t.check_invariants().unwrap();
    }

    #[test]
    fn deep_deletion_cascade() {
        let cfg = cfg(8, 1, 2);
        let n = 2048usize;
        let pts: Vec<Point> = (0..n as i64).map(|i| p(i, (i * 613) % 9973)).collect();
        let mut t = Pst::bulk_construct(pts.clone(), cfg).unwrap();
        let mut oracle = OracleSet::from_points(pts.clone());
        // Delete a contiguous x-band to force deletion pushes down one path.
        for i in 200..500 {
            let q = pts[i as usize];
            t.delete(q);
            oracle.delete(q);
        }
        assert_eq!(canon(t.collect_live()), canon(oracle.points()));
        t.check_invariants().unwrap();
    }

    #[test]
    fn persistence_roundtrip() {
        let dir = std::env::temp_dir().join(format!("empst-pst-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tree.empst");
        let pts: Vec<Point> = (0..300).map(|i| p(i, (i * 7) % 97)).collect();
        let mut t = Pst::bulk_construct(pts.clone(), cfg(16, 1, 2)).unwrap();
        t.insert(p(1000, 5));
        t.delete(p(0, 0));
        let live_before = t.collect_live();
        t.save(&path).unwrap();
        let mut restored = Pst::open(&path).unwrap();
        assert_eq!(restored.collect_live(), live_before);
        restored.check_invariants().unwrap();
        // The restored structure keeps working.
        restored.insert(p(2000, 50));
        assert!(restored.collect_live().contains(&p(2000, 50)));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn construction_io_linear_for_sorted_input() {
        let cfg = cfg(16, 1, 2);
        let n = 1 << 14;
        let pts: Vec<Point> = (0..n as i64).map(|i| p(i, (i * 31) % 65536)).collect();
        let t = Pst::bulk_construct(pts, cfg).unwrap();
        let blocks = (n / cfg.block_size) as u64;
        assert!(
            t.construction_io <= 10 * blocks,
            "construction used {} IOs for {} blocks",
            t.construction_io,
            blocks
        );
    }
}
