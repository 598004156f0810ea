//! Byte layout of EA task and result blobs.
//!
//! Candidate block: `[4B N][3N x 8B f64 coords][8B f64 energy][8B id][8B seed]`.
//! Task: `[1B version][4B n_children][8B seed][candidate a][candidate b]`.
//! Result: `[1B version][4B count]` then per child `[1B status]` followed by a
//! candidate block when status is 0 (1 marks a child that failed to relax).
//! All integers and floats are big-endian.

use thiserror::Error;

use super::ops::EaTask;
use super::Candidate;

pub const PAYLOAD_VERSION: u8 = 1;

const CHILD_OK: u8 = 0;
const CHILD_POISONED: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("unsupported payload version {0}")]
    BadVersion(u8),
    #[error("payload truncated")]
    Truncated,
    #[error("trailing bytes after payload")]
    Trailing,
    #[error("unknown child status {0}")]
    BadStatus(u8),
}

fn put_candidate(out: &mut Vec<u8>, c: &Candidate) {
    out.extend_from_slice(&(c.coords.len() as u32).to_be_bytes());
    for x in c.coords.iter().flatten() {
        out.extend_from_slice(&x.to_be_bytes());
    }
    out.extend_from_slice(&c.energy.to_be_bytes());
    out.extend_from_slice(&c.id.to_be_bytes());
    out.extend_from_slice(&c.seed.to_be_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const K: usize>(&mut self) -> Result<[u8; K], PayloadError> {
        let bytes = self.buf.get(self.pos..self.pos + K).ok_or(PayloadError::Truncated)?;
        self.pos += K;
        Ok(bytes.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_be_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_be_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, PayloadError> {
        Ok(f64::from_be_bytes(self.take()?))
    }

    fn version(&mut self) -> Result<(), PayloadError> {
        match self.u8()? {
            PAYLOAD_VERSION => Ok(()),
            v => Err(PayloadError::BadVersion(v)),
        }
    }

    fn candidate(&mut self) -> Result<Candidate, PayloadError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(24) > self.buf.len() - self.pos {
            return Err(PayloadError::Truncated);
        }
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            coords.push([self.f64()?, self.f64()?, self.f64()?]);
        }
        Ok(Candidate {
            coords,
            energy: self.f64()?,
            id: self.u64()?,
            seed: self.u64()?,
        })
    }

    fn finish(self) -> Result<(), PayloadError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(PayloadError::Trailing)
        }
    }
}

pub fn encode_task(task: &EaTask) -> Vec<u8> {
    let mut out = vec![PAYLOAD_VERSION];
    out.extend_from_slice(&task.n_children.to_be_bytes());
    out.extend_from_slice(&task.seed.to_be_bytes());
    put_candidate(&mut out, &task.parent_a);
    put_candidate(&mut out, &task.parent_b);
    out
}

pub fn decode_task(bytes: &[u8]) -> Result<EaTask, PayloadError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.version()?;
    let n_children = r.u32()?;
    let seed = r.u64()?;
    let parent_a = r.candidate()?;
    let parent_b = r.candidate()?;
    r.finish()?;
    Ok(EaTask {
        parent_a,
        parent_b,
        n_children,
        seed,
    })
}

/// `None` entries are children that failed to relax.
pub fn encode_children(children: &[Option<Candidate>]) -> Vec<u8> {
    let mut out = vec![PAYLOAD_VERSION];
    out.extend_from_slice(&(children.len() as u32).to_be_bytes());
    for child in children {
        match child {
            Some(c) => {
                out.push(CHILD_OK);
                put_candidate(&mut out, c);
            }
            None => out.push(CHILD_POISONED),
        }
    }
    out
}

pub fn decode_children(bytes: &[u8]) -> Result<Vec<Option<Candidate>>, PayloadError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.version()?;
    let count = r.u32()? as usize;
    if count > bytes.len() {
        return Err(PayloadError::Truncated);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        match r.u8()? {
            CHILD_OK => out.push(Some(r.candidate()?)),
            CHILD_POISONED => out.push(None),
            s => return Err(PayloadError::BadStatus(s)),
        }
    }
    r.finish()?;
    Ok(out)
}
