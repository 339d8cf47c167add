//! Binary layout of a [`MaskedUpdate`]; all integers and floats little-endian.
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `FHUP`               |
//! | 4      | 2    | version (u16, = 1)         |
//! | 6      | 4    | client_id (u32)            |
//! | 10     | 2    | target layer (u16)         |
//! | 12     | 2    | rank (u16)                 |
//! | 14     | 4    | kept row count (u32)       |
//! | 18     | 4    | d_out (u32)                |
//! | 22     | 4    | d_in (u32)                 |
//! | 26     | 2    | head rows (u16, 0 = none)  |
//! | 28     | 4    | head cols (u32)            |
//!
//! The 32-byte header is followed by the kept indices (u32 each,
//! ascending), `B_kept`, `A`, then the head weights and head bias, all as
//! row-major f64.

use super::MaskedUpdate;
use crate::error::{Error, Result};
use crate::model::Head;
use crate::numerics::Matrix;

pub const UPDATE_MAGIC: &[u8; 4] = b"FHUP";
pub const HEADER_BYTES: u64 = 32;
const VERSION: u16 = 1;

/// `8·(kept·r + r·d_in + head) + 4·kept + 32`.
pub fn masked_update_bytes(kept: usize, rank: usize, d_in: usize, head_elems: usize) -> u64 {
    8 * (kept * rank + rank * d_in + head_elems) as u64 + 4 * kept as u64 + HEADER_BYTES
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Parameter(format!("{what}={v} does not fit the wire format")))
}

pub fn encode_update(u: &MaskedUpdate) -> Result<Vec<u8>> {
    let (head_rows, head_cols) = u.head.as_ref().map_or((0, 0), |h| h.weights.shape());
    let mut out = Vec::with_capacity(super::measure_bytes(u) as usize);
    out.extend_from_slice(UPDATE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u.client_id.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(u.target, "target")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(u.rank(), "rank")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u32>(u.kept_rows.len(), "kept")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u32>(u.d_out, "d_out")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u32>(u.d_in(), "d_in")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(head_rows, "head rows")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u32>(head_cols, "head cols")?.to_le_bytes());
    debug_assert_eq!(out.len() as u64, HEADER_BYTES);
    for &i in &u.kept_rows {
        out.extend_from_slice(&narrow::<u32>(i, "row index")?.to_le_bytes());
    }
    let floats = u
        .b_kept
        .data()
        .iter()
        .chain(u.a.data())
        .chain(u.head.iter().flat_map(|h| h.weights.data().iter().chain(&h.bias)));
    for v in floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Parse {
                row: 0,
                column: self.at,
                message: "update truncated".into(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))))
            .collect()
    }
}

pub fn decode_update(bytes: &[u8]) -> Result<MaskedUpdate> {
    let mut c = Cursor { bytes, at: 0 };
    let bad = |at: usize, msg: &str| Error::Parse {
        row: 0,
        column: at,
        message: msg.into(),
    };
    if c.take(4)? != UPDATE_MAGIC {
        return Err(bad(0, "missing FHUP magic"));
    }
    if c.u16()? != VERSION {
        return Err(bad(4, "unsupported update version"));
    }
    let client_id = c.u32()?;
    let target = c.u16()? as usize;
    let rank = c.u16()? as usize;
    let kept = c.u32()? as usize;
    let d_out = c.u32()? as usize;
    let d_in = c.u32()? as usize;
    let head_rows = c.u16()? as usize;
    let head_cols = c.u32()? as usize;
    let kept_rows = (0..kept)
        .map(|_| c.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let b_kept = Matrix::new(kept, rank, c.f64s(kept * rank)?)?;
    let a = Matrix::new(rank, d_in, c.f64s(rank * d_in)?)?;
    let head = if head_rows > 0 {
        Some(Head {
            weights: Matrix::new(head_rows, head_cols, c.f64s(head_rows * head_cols)?)?,
            bias: c.f64s(head_rows)?,
        })
    } else {
        None
    };
    if c.at != bytes.len() {
        return Err(bad(c.at, "trailing bytes after update"));
    }
    Ok(MaskedUpdate {
        client_id,
        target,
        d_out,
        kept_rows,
        b_kept,
        a,
        head,
    })
}
