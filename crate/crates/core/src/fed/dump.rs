//! Binary per-round message dump: little-endian records of
//! `client_id: u32, round: u32, count: u32, scalars: f64 x count`.

use std::io::{Read, Write};

use super::protocol::ProjectedGradientLog;
use crate::error::{Error, Result};

pub fn write_message_dump(mut out: impl Write, logs: &[ProjectedGradientLog]) -> Result<()> {
    for log in logs {
        let id = u32::try_from(log.client_id)
            .map_err(|_| Error::input(format!("client id {} does not fit in u32", log.client_id)))?;
        out.write_all(&id.to_le_bytes())?;
        out.write_all(&log.round.to_le_bytes())?;
        out.write_all(&(log.scalars.len() as u32).to_le_bytes())?;
        for g in &log.scalars {
            out.write_all(&g.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_message_dump(mut input: impl Read) -> Result<Vec<ProjectedGradientLog>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut logs = Vec::new();
    let mut rest = &bytes[..];
    while !rest.is_empty() {
        if rest.len() < 12 {
            return Err(Error::input("truncated message header"));
        }
        let word = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let (client_id, round, count) = (word(&rest[0..4]), word(&rest[4..8]), word(&rest[8..12]) as usize);
        rest = &rest[12..];
        if rest.len() < 8 * count {
            return Err(Error::input("truncated message payload"));
        }
        let scalars = rest[..8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[8 * count..];
        logs.push(ProjectedGradientLog {
            client_id: client_id as usize,
            round,
            scalars,
        });
    }
    Ok(logs)
}
