//! Brute-force in-memory reference implementation used for differential
//! testing. Linear scans only; no IO accounting, no cleverness.

use std::collections::BTreeMap;

use crate::model::{Point, ThreeSidedQuery, TopKQuery};

/// Plain set of points keyed by `(x, y)`. Insert replaces, delete removes if
/// present.
#[derive(Debug, Clone, Default)]
pub struct OracleSet {
    points: BTreeMap<(i64, i64), Point>,
}

impl OracleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(pts: impl IntoIterator<Item = Point>) -> Self {
        let mut s = Self::new();
        for p in pts {
            s.insert(p);
        }
        s
    }

    pub fn insert(&mut self, p: Point) {
        self.points.insert(p.xkey(), p);
    }

    pub fn delete(&mut self, p: Point) {
        self.points.remove(&p.xkey());
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.points.contains_key(&p.xkey())
    }

    /// All points in x-order.
    pub fn points(&self) -> Vec<Point> {
        self.points.values().copied().collect()
    }

    pub fn report(&self, q: ThreeSidedQuery) -> Vec<Point> {
        self.points.values().filter(|p| q.contains(p)).copied().collect()
    }

    /// The `k` highest-y points in the x-range, by the lexicographic y-order.
    pub fn top_k(&self, q: TopKQuery) -> Vec<Point> {
        let mut in_range: Vec<Point> =
            self.points.values().filter(|p| q.admits_x(p)).copied().collect();
        in_range.sort_by(|a, b| b.ykey().cmp(&a.ykey()));
        in_range.truncate(q.k);
        in_range
    }

    pub fn count_in_xrange(&self, x1: i64, x2: i64) -> usize {
        self.points.values().filter(|p| x1 <= p.x && p.x <= x2).count()
    }

    /// Points in `[x1,x2]` with ykey at or above `bound`.
    pub fn count_above(&self, x1: i64, x2: i64, bound: (i64, i64)) -> usize {
        self.points
            .values()
            .filter(|p| x1 <= p.x && p.x <= x2 && p.ykey() >= bound)
            .count()
    }
}

/// Sorts a multiset of points canonically for multiset comparison.
pub fn canon(mut pts: Vec<Point>) -> Vec<Point> {
    pts.sort_by_key(|p| p.xkey());
    pts
}

/// Reference result of the vertical sweep that builds the fused blocks of a
/// child structure: for each fused block, its base-index interval, the y-key
/// at which it was created, and its exact contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepBlock {
    pub i: usize,
    pub j: usize,
    pub min_y: (i64, i64),
    pub points: Vec<Point>,
}

/// Simulates the sweep literally on an x-sorted point set partitioned into
/// base blocks of `block_size`: groups fuse bottom-up whenever an adjacent
/// pair holds exactly `block_size` points on or above the sweepline. Ties in
/// fusion height (a shared boundary point) resolve leftmost-first.
pub fn sweep_reference(sorted: &[Point], block_size: usize) -> Vec<SweepBlock> {
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    // Alive groups as (first_base, last_base, points above sweepline).
    let mut groups: Vec<(usize, usize, Vec<Point>)> = sorted
        .chunks(block_size)
        .enumerate()
        .map(|(i, chunk)| (i + 1, i + 1, chunk.to_vec()))
        .collect();
    let mut out = Vec::new();
    loop {
        // Next event: the adjacent pair whose union's block_size-th highest
        // y-key is smallest, i.e. the first pair the rising sweep completes.
        // Ties (a shared boundary point) resolve to the leftmost pair.
        let mut best: Option<((i64, i64), usize)> = None;
        for t in 0..groups.len().saturating_sub(1) {
            let mut ys: Vec<(i64, i64)> = groups[t]
                .2
                .iter()
                .chain(groups[t + 1].2.iter())
                .map(|p| p.ykey())
                .collect();
            if ys.len() < block_size {
                continue;
            }
            ys.sort_unstable_by(|a, b| b.cmp(a));
            let h = ys[block_size - 1];
            if best.map_or(true, |b| (h, t) < b) {
                best = Some((h, t));
            }
        }
        let Some((h, t)) = best else { break };
        let (i, _, left) = groups[t].clone();
        let (_, j, right) = groups[t + 1].clone();
        let mut merged: Vec<Point> =
            left.into_iter().chain(right).filter(|p| p.ykey() >= h).collect();
        merged.sort_by_key(|p| p.xkey());
        assert_eq!(merged.len(), block_size, "sweep fuses exactly one block's worth");
        out.push(SweepBlock { i, j, min_y: h, points: merged.clone() });
        groups[t] = (i, j, merged);
        groups.remove(t + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: i64, y: i64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn topk_on_empty_is_empty() {
        let s = OracleSet::new();
        assert!(s.top_k(TopKQuery::new(0, 10, 5)).is_empty());
    }

    #[test]
    fn report_beyond_all_x_is_empty() {
        let s = OracleSet::from_points([p(1, 1), p(2, 2)]);
        assert!(s.report(ThreeSidedQuery::new(10, 20, i64::MIN)).is_empty());
    }

    #[test]
    fn top3_returns_three_highest_in_range() {
        // Six points, three clearly above the rest inside the x-range.
        let s = OracleSet::from_points([
            p(1, 90),
            p(3, 80),
            p(5, 85),
            p(2, 10),
            p(4, 20),
            p(6, 15),
        ]);
        let got = canon(s.top_k(TopKQuery::new(1, 6, 3)));
        assert_eq!(got, canon(vec![p(1, 90), p(3, 80), p(5, 85)]));
    }

    #[test]
    fn unbounded_topk_equals_report() {
        let s = OracleSet::from_points((0..30).map(|i| p(i, (i * 7) % 13)));
        let via_topk = canon(s.top_k(TopKQuery::new(5, 20, usize::MAX)));
        let via_report = canon(s.report(ThreeSidedQuery::new(5, 20, i64::MIN)));
        assert_eq!(via_topk, via_report);
    }

    #[test]
    fn insert_replaces_delete_removes() {
        let mut s = OracleSet::new();
        s.insert(Point::with_payload(1, 1, *b"first..."));
        s.insert(Point::with_payload(1, 1, *b"second.."));
        assert_eq!(s.len(), 1);
        assert_eq!(s.points()[0].payload, Some(*b"second.."));
        s.delete(p(1, 1));
        assert!(s.is_empty());
        s.delete(p(1, 1)); // absent: no-op
        assert!(s.is_empty());
    }

    #[test]
    fn sweep_small_pair() {
        // Two base blocks of 2 fuse when exactly 2 of the 4 points remain on
        // or above the sweepline, i.e. at the 2nd-highest y-key (5,1).
        let pts = vec![p(0, 1), p(1, 5), p(2, 2), p(3, 6)];
        let blocks = sweep_reference(&pts, 2);
        assert_eq!(blocks.len(), 1);
        let b = &blocks[0];
        assert_eq!((b.i, b.j), (1, 2));
        assert_eq!(b.min_y, (5, 1));
        assert_eq!(canon(b.points.clone()), canon(vec![p(1, 5), p(3, 6)]));
    }
}
