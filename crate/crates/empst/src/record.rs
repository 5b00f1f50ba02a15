//! The fixed-size record vocabulary stored in blocks.
//!
//! A block holds records of one kind: points, tree-node headers plus child
//! routing entries, child-structure catalog entries, sample entries, or the
//! superblock metadata used by save/load. Every variant encodes to the same
//! number of bytes so the persistence format stays trivially seekable.

use crate::model::{Point, XBound, YBound};
use crate::store::{BlockId, FixedRecord};

/// Routing entry for one child of an internal tree node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChildRec {
    pub node: BlockId,
    /// Inclusive upper end of the child's x-range; `PosInf` for the last child.
    pub upper: XBound,
    /// Minimum y-key of the child's point buffer, `PosInf` when it is empty.
    pub min_y: YBound,
    /// Current size of the child's point buffer.
    pub p_len: u32,
}

/// Header record of a tree node. Leaves keep their point buffer inline in the
/// node's own block chain; internal nodes reference buffer chains and the
/// blocks of their child structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NodeRec {
    pub is_leaf: bool,
    pub pbuf: Option<BlockId>,
    pub ibuf: Option<BlockId>,
    pub dbuf: Option<BlockId>,
    pub cs_catalog: Option<BlockId>,
    pub cs_samples: Option<BlockId>,
    pub cs_ibuf: Option<BlockId>,
    pub cs_dbuf: Option<BlockId>,
    pub cs_l_len: u32,
}

/// Catalog entry of a child structure: one base block or one fused block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatalogRec {
    Base { min_x: (i64, i64), max_x: (i64, i64), len: u32, block: BlockId },
    Fused { i: u32, j: u32, min_y: (i64, i64), block: BlockId },
}

impl CatalogRec {
    pub fn block(&self) -> BlockId {
        match self {
            CatalogRec::Base { block, .. } | CatalogRec::Fused { block, .. } => *block,
        }
    }
}

/// One sampled y-key of a base block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRec {
    pub base_idx: u32,
    pub ykey: (i64, i64),
}

/// Superblock contents: the root's in-memory state plus the configuration
/// needed to reopen the structure, serialized for save/load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetaRec {
    pub is_leaf: bool,
    pub n_bar: u64,
    pub updates_in_epoch: u64,
    pub height: u32,
    pub eps_num: u32,
    pub eps_den: u32,
    pub alpha: u32,
    pub child_count: u32,
    pub p_len: u32,
    pub i_len: u32,
    pub d_len: u32,
    pub cs_catalog: Option<BlockId>,
    pub cs_samples: Option<BlockId>,
    pub cs_ibuf: Option<BlockId>,
    pub cs_dbuf: Option<BlockId>,
    pub cs_l_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Point(Point),
    Child(ChildRec),
    Node(NodeRec),
    Catalog(CatalogRec),
    Sample(SampleRec),
    Meta(MetaRec),
}

impl Record {
    pub fn expect_point(&self) -> Point {
        match self {
            Record::Point(p) => *p,
            other => panic!("expected point record, got {other:?}"),
        }
    }

    pub fn expect_child(&self) -> ChildRec {
        match self {
            Record::Child(c) => *c,
            other => panic!("expected child record, got {other:?}"),
        }
    }

    pub fn expect_node(&self) -> NodeRec {
        match self {
            Record::Node(n) => *n,
            other => panic!("expected node record, got {other:?}"),
        }
    }

    pub fn expect_catalog(&self) -> CatalogRec {
        match self {
            Record::Catalog(c) => *c,
            other => panic!("expected catalog record, got {other:?}"),
        }
    }

    pub fn expect_sample(&self) -> SampleRec {
        match self {
            Record::Sample(s) => *s,
            other => panic!("expected sample record, got {other:?}"),
        }
    }
}

pub fn points(recs: &[Record]) -> Vec<Point> {
    recs.iter().map(|r| r.expect_point()).collect()
}

pub fn point_records(pts: &[Point]) -> Vec<Record> {
    pts.iter().map(|p| Record::Point(*p)).collect()
}

// ---- encoding ----------------------------------------------------------

struct Writer<'a>(&'a mut Vec<u8>);

impl Writer<'_> {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn key(&mut self, k: (i64, i64)) {
        self.i64(k.0);
        self.i64(k.1);
    }
    fn opt_id(&mut self, v: Option<BlockId>) {
        self.u64(v.map(|b| b.0).unwrap_or(u64::MAX));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("record underrun".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, String> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn key(&mut self) -> Result<(i64, i64), String> {
        Ok((self.i64()?, self.i64()?))
    }
    fn opt_id(&mut self) -> Result<Option<BlockId>, String> {
        let v = self.u64()?;
        Ok(if v == u64::MAX { None } else { Some(BlockId(v)) })
    }
}

impl FixedRecord for Record {
    const ENCODED_LEN: usize = 96;

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        let mut w = Writer(out);
        match self {
            Record::Point(p) => {
                w.u8(0);
                w.i64(p.x);
                w.i64(p.y);
                match p.payload {
                    None => w.u8(0),
                    Some(bytes) => {
                        w.u8(1);
                        w.0.extend_from_slice(&bytes);
                    }
                }
            }
            Record::Child(c) => {
                w.u8(1);
                w.u64(c.node.0);
                match c.upper {
                    XBound::PosInf => w.u8(0),
                    XBound::Key(k) => {
                        w.u8(1);
                        w.key(k);
                    }
                }
                match c.min_y {
                    YBound::PosInf => w.u8(0),
                    YBound::Key(k) => {
                        w.u8(1);
                        w.key(k);
                    }
                    YBound::NegInf => w.u8(2),
                }
                w.u32(c.p_len);
            }
            Record::Node(n) => {
                w.u8(2);
                w.u8(n.is_leaf as u8);
                w.opt_id(n.pbuf);
                w.opt_id(n.ibuf);
                w.opt_id(n.dbuf);
                w.opt_id(n.cs_catalog);
                w.opt_id(n.cs_samples);
                w.opt_id(n.cs_ibuf);
                w.opt_id(n.cs_dbuf);
                w.u32(n.cs_l_len);
            }
            Record::Catalog(CatalogRec::Base { min_x, max_x, len, block }) => {
                w.u8(3);
                w.key(*min_x);
                w.key(*max_x);
                w.u32(*len);
                w.u64(block.0);
            }
            Record::Catalog(CatalogRec::Fused { i, j, min_y, block }) => {
                w.u8(4);
                w.u32(*i);
                w.u32(*j);
                w.key(*min_y);
                w.u64(block.0);
            }
            Record::Sample(s) => {
                w.u8(5);
                w.u32(s.base_idx);
                w.key(s.ykey);
            }
            Record::Meta(m) => {
                w.u8(6);
                w.u8(m.is_leaf as u8);
                w.u64(m.n_bar);
                w.u64(m.updates_in_epoch);
                w.u32(m.height);
                w.u32(m.eps_num);
                w.u32(m.eps_den);
                w.u32(m.alpha);
                w.u32(m.child_count);
                w.u32(m.p_len);
                w.u32(m.i_len);
                w.u32(m.d_len);
                w.opt_id(m.cs_catalog);
                w.opt_id(m.cs_samples);
                w.opt_id(m.cs_ibuf);
                w.opt_id(m.cs_dbuf);
                w.u32(m.cs_l_len);
            }
        }
        let written = out.len() - start;
        assert!(written <= Self::ENCODED_LEN, "record variant exceeds slot: {written}");
        out.resize(start + Self::ENCODED_LEN, 0);
    }

    fn decode(buf: &[u8]) -> Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        match r.u8()? {
            0 => {
                let x = r.i64()?;
                let y = r.i64()?;
                let payload = if r.u8()? == 1 {
                    Some(r.take(8)?.try_into().unwrap())
                } else {
                    None
                };
                Ok(Record::Point(Point { x, y, payload }))
            }
            1 => {
                let node = BlockId(r.u64()?);
                let upper = match r.u8()? {
                    0 => XBound::PosInf,
                    _ => XBound::Key(r.key()?),
                };
                let min_y = match r.u8()? {
                    0 => YBound::PosInf,
                    1 => YBound::Key(r.key()?),
                    _ => YBound::NegInf,
                };
                let p_len = r.u32()?;
                Ok(Record::Child(ChildRec { node, upper, min_y, p_len }))
            }
            2 => Ok(Record::Node(NodeRec {
                is_leaf: r.u8()? == 1,
                pbuf: r.opt_id()?,
                ibuf: r.opt_id()?,
                dbuf: r.opt_id()?,
                cs_catalog: r.opt_id()?,
                cs_samples: r.opt_id()?,
                cs_ibuf: r.opt_id()?,
                cs_dbuf: r.opt_id()?,
                cs_l_len: r.u32()?,
            })),
            3 => Ok(Record::Catalog(CatalogRec::Base {
                min_x: r.key()?,
                max_x: r.key()?,
                len: r.u32()?,
                block: BlockId(r.u64()?),
            })),
            4 => Ok(Record::Catalog(CatalogRec::Fused {
                i: r.u32()?,
                j: r.u32()?,
                min_y: r.key()?,
                block: BlockId(r.u64()?),
            })),
            5 => Ok(Record::Sample(SampleRec { base_idx: r.u32()?, ykey: r.key()? })),
            6 => Ok(Record::Meta(MetaRec {
                is_leaf: r.u8()? == 1,
                n_bar: r.u64()?,
                updates_in_epoch: r.u64()?,
                height: r.u32()?,
                eps_num: r.u32()?,
                eps_den: r.u32()?,
                alpha: r.u32()?,
                child_count: r.u32()?,
                p_len: r.u32()?,
                i_len: r.u32()?,
                d_len: r.u32()?,
                cs_catalog: r.opt_id()?,
                cs_samples: r.opt_id()?,
                cs_ibuf: r.opt_id()?,
                cs_dbuf: r.opt_id()?,
                cs_l_len: r.u32()?,
            })),
            t => Err(format!("unknown record tag {t}")),
        }
    }
}
