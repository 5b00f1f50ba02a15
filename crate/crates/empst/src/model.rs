//! Points, coordinate orders, configuration and query descriptors shared by
//! every other module.
//!
//! Coordinates are signed 64-bit integers and the only operation ever applied
//! to them is comparison. Raw coordinates may collide, so the structure
//! internally orders points by the lexicographic extensions `(x, y)` and
//! `(y, x)`, under which any set of distinct points is totally ordered.

use std::cmp::Ordering;

use thiserror::Error;

/// Payload bytes carried by a point. Never interpreted, never compared.
pub type Payload = [u8; 8];

/// A 2D point. Equality and hashing consider only the `(x, y)` pair; the
/// payload is cargo that the newest insertion of a given `(x, y)` wins.
#[derive(Debug, Clone, Copy)]
pub struct Point {
    pub x: i64,
    pub y: i64,
    pub payload: Option<Payload>,
}

impl Point {
    pub fn new(x: i64, y: i64) -> Self {
        Point { x, y, payload: None }
    }

    pub fn with_payload(x: i64, y: i64, payload: Payload) -> Self {
        Point { x, y, payload: Some(payload) }
    }

    /// Lexicographic x-key: orders by x, ties broken by y.
    pub fn xkey(&self) -> (i64, i64) {
        (self.x, self.y)
    }

    /// Lexicographic y-key: orders by y, ties broken by x.
    pub fn ykey(&self) -> (i64, i64) {
        (self.y, self.x)
    }
}

impl PartialEq for Point {
    fn eq(&self, other: &Self) -> bool {
        self.x == other.x && self.y == other.y
    }
}

impl Eq for Point {}

impl std::hash::Hash for Point {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.x.hash(state);
        self.y.hash(state);
    }
}

/// The strict total order `≺_x`: `(x1,y1) ≺_x (x2,y2)` iff `x1 < x2`, or
/// `x1 = x2` and `y1 < y2`.
pub fn compare_x(a: &Point, b: &Point) -> Ordering {
    a.xkey().cmp(&b.xkey())
}

/// The strict total order `≺_y`, symmetric to [`compare_x`] with the roles of
/// the coordinates swapped.
pub fn compare_y(a: &Point, b: &Point) -> Ordering {
    a.ykey().cmp(&b.ykey())
}

/// Comparator handle for the x-order, for APIs that take an order by value.
#[derive(Debug, Clone, Copy, Default)]
pub struct XOrder;

impl XOrder {
    pub fn compare(&self, a: &Point, b: &Point) -> Ordering {
        compare_x(a, b)
    }
}

/// Comparator handle for the y-order.
#[derive(Debug, Clone, Copy, Default)]
pub struct YOrder;

impl YOrder {
    pub fn compare(&self, a: &Point, b: &Point) -> Ordering {
        compare_y(a, b)
    }
}

/// A y-threshold that can sit below or above every real key. `NegInf` and
/// `PosInf` are explicit variants, never sentinel numerics, so comparisons
/// with real keys are total and unambiguous.
///
/// Variant order gives `NegInf < Key(_) < PosInf` under the derived `Ord`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum YBound {
    NegInf,
    Key((i64, i64)),
    PosInf,
}

impl YBound {
    /// The inclusive lower bound "raw y ≥ y0" expressed as a y-key bound:
    /// `ykey(p) ≥ (y0, i64::MIN)` holds exactly when `p.y ≥ y0`.
    pub fn raw_inclusive(y0: i64) -> Self {
        YBound::Key((y0, i64::MIN))
    }

    pub fn admits(&self, p: &Point) -> bool {
        match self {
            YBound::NegInf => true,
            YBound::Key(k) => p.ykey() >= *k,
            YBound::PosInf => false,
        }
    }
}

/// Upper end of a node's x-range in the routing tree. The rightmost child of
/// every node is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum XBound {
    Key((i64, i64)),
    PosInf,
}

impl XBound {
    pub fn admits(&self, key: (i64, i64)) -> bool {
        match self {
            XBound::Key(k) => key <= *k,
            XBound::PosInf => true,
        }
    }
}

/// 3-sided query `[x1, x2] × [y, ∞]`, all bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreeSidedQuery {
    pub x1: i64,
    pub x2: i64,
    pub y: i64,
}

impl ThreeSidedQuery {
    pub fn new(x1: i64, x2: i64, y: i64) -> Self {
        assert!(x1 <= x2, "3-sided query requires x1 <= x2");
        ThreeSidedQuery { x1, x2, y }
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.x1 <= p.x && p.x <= self.x2 && p.y >= self.y
    }
}

/// Top-k query: the `k` points with highest y-value among those with
/// `x ∈ [x1, x2]`. Output order is unspecified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopKQuery {
    pub x1: i64,
    pub x2: i64,
    pub k: usize,
}

impl TopKQuery {
    pub fn new(x1: i64, x2: i64, k: usize) -> Self {
        assert!(x1 <= x2, "top-k query requires x1 <= x2");
        TopKQuery { x1, x2, k }
    }

    pub fn admits_x(&self, p: &Point) -> bool {
        self.x1 <= p.x && p.x <= self.x2
    }
}

/// Exact rational exponent `num/den` with `0 < num/den <= 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Epsilon {
    pub num: u32,
    pub den: u32,
}

impl Epsilon {
    pub fn new(num: u32, den: u32) -> Result<Self, ConfigError> {
        if num == 0 || den == 0 || 2 * (num as u64) > den as u64 {
            return Err(ConfigError::InvalidConfig(format!(
                "epsilon must satisfy 0 < num/den <= 1/2, got {num}/{den}"
            )));
        }
        Ok(Epsilon { num, den })
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Epsilon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Validated global configuration with the derived quantities precomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Config {
    /// Records per block.
    pub block_size: usize,
    pub epsilon: Epsilon,
    /// Internal-memory capacity in records.
    pub mem_records: usize,
    /// Sampling slack floor; the advertised slack per sample query is at
    /// least this.
    pub alpha: usize,
    /// Tree fan-out parameter `⌈B^ε⌉`.
    pub delta: usize,
    /// Rank stride between sampled y-values inside one base block, `⌈B^ε⌉`.
    pub sample_stride: usize,
    /// Samples kept per base block, `⌈B^(1-ε)⌉`.
    pub samples_per_block: usize,
}

/// `⌈base^(num/den)⌉` by integer root-ceiling: the smallest `d` with
/// `d^den >= base^num`. Exact for any rational exponent, no float drift.
fn pow_ceil(base: u64, num: u32, den: u32) -> u64 {
    use num_bigint::BigUint;
    assert!(base >= 1 && den >= 1);
    let target = BigUint::from(base).pow(num);
    let (mut lo, mut hi) = (1u64, base.max(1));
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if BigUint::from(mid).pow(den) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

impl Config {
    /// Validates the raw parameters and computes the derived quantities.
    pub fn new(
        block_size: usize,
        epsilon: Epsilon,
        mem_records: usize,
    ) -> Result<Self, ConfigError> {
        Self::with_alpha(block_size, epsilon, mem_records, 1)
    }

    pub fn with_alpha(
        block_size: usize,
        epsilon: Epsilon,
        mem_records: usize,
        alpha: usize,
    ) -> Result<Self, ConfigError> {
        if block_size < 4 {
            return Err(ConfigError::InvalidConfig(format!(
                "block size must be >= 4, got {block_size}"
            )));
        }
        if mem_records < 2 * block_size {
            return Err(ConfigError::InvalidConfig(format!(
                "memory must hold at least two blocks ({} records), got {mem_records}",
                2 * block_size
            )));
        }
        if alpha < 1 {
            return Err(ConfigError::InvalidConfig("alpha must be >= 1".into()));
        }
        let delta = pow_ceil(block_size as u64, epsilon.num, epsilon.den) as usize;
        if delta < 2 {
            return Err(ConfigError::InvalidConfig(format!(
                "delta = ceil(B^eps) must be >= 2, got {delta}"
            )));
        }
        if block_size < 2 * delta {
            return Err(ConfigError::InvalidConfig(format!(
                "block size {block_size} too small for delta {delta} (need B >= 2*delta)"
            )));
        }
        let samples_per_block =
            pow_ceil(block_size as u64, epsilon.den - epsilon.num, epsilon.den) as usize;
        Ok(Config {
            block_size,
            epsilon,
            mem_records,
            alpha,
            delta,
            sample_stride: delta,
            samples_per_block,
        })
    }

    /// Capacity cap of one child structure: `4·B·Δ` points.
    pub fn child_capacity(&self) -> usize {
        4 * self.block_size * self.delta
    }

    /// Point-buffer underflow threshold `B/2`.
    pub fn half_block(&self) -> usize {
        self.block_size / 2
    }

    /// Deletion-buffer capacity `B/4`.
    pub fn quarter_block(&self) -> usize {
        self.block_size / 4
    }
}

pub(crate) fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}
