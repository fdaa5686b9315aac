//! Binary checkpoint of a scenario table and its best responses.
//!
//! Layout (little endian): magic, codec version `u32`, 32-byte digest of the
//! market spec and parameter set, firms `u32`, lines `u64`, rows `u64`,
//! `rows` margins `f64`, then per partial scenario the best line `u32` and
//! best margin `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BestResponseTable, MarketSpec, ParamSet, ScenarioTable};
use crate::codec::{ScenarioCodec, CODEC_VERSION};
use crate::error::{Error, Result};

pub const TABLE_MAGIC: &[u8; 8] = b"EQSTAB01";

/// Identity of the inputs a table was computed from.
pub fn table_digest(spec: &MarketSpec, params: &ParamSet) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("market spec serializes"));
    h.update(params.kind.name());
    h.update(params.rule.name());
    let pw = &params.part_worths;
    for d in [pw.n_draws, pw.n_respondents, pw.n_params] {
        h.update((d as u64).to_le_bytes());
    }
    for v in &pw.draws {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn save_tables(path: &Path, digest: &[u8; 32], m: &ScenarioTable, mopt: &BestResponseTable) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&CODEC_VERSION.to_le_bytes())?;
        w.write_all(digest)?;
        w.write_all(&(m.codec.n_firms as u32).to_le_bytes())?;
        w.write_all(&(m.codec.n_lines as u64).to_le_bytes())?;
        w.write_all(&(m.margins.len() as u64).to_le_bytes())?;
        for v in &m.margins {
            w.write_all(&v.to_le_bytes())?;
        }
        for (l, v) in mopt.best_line.iter().zip(&mopt.best_margin) {
            w.write_all(&l.to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.into_inner()?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Loads tables, refusing files from another codec version or other inputs.
pub fn load_tables(path: &Path, expected: &[u8; 32]) -> Result<(ScenarioTable, BestResponseTable)> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    if &read_array::<8>(&mut r).map_err(io)? != TABLE_MAGIC {
        return Err(Error::CheckpointMismatch(format!("{} is not a table checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(read_array(&mut r).map_err(io)?);
    if version != CODEC_VERSION {
        return Err(Error::CodecVersion { found: version, expected: CODEC_VERSION });
    }
    if &read_array::<32>(&mut r).map_err(io)? != expected {
        return Err(Error::CheckpointMismatch(format!(
            "{} was computed from a different market or parameter set",
            path.display()
        )));
    }
    let w = u32::from_le_bytes(read_array(&mut r).map_err(io)?) as usize;
    let a = u64::from_le_bytes(read_array(&mut r).map_err(io)?) as usize;
    let k = u64::from_le_bytes(read_array(&mut r).map_err(io)?) as usize;
    let codec = ScenarioCodec::new(a, w)?;
    if codec.n_scenarios() != k {
        return Err(Error::CheckpointMismatch(format!("row count {k} does not match {a}^{w}")));
    }
    let mut margins = Vec::with_capacity(k);
    for _ in 0..k {
        margins.push(f64::from_le_bytes(read_array(&mut r).map_err(io)?));
    }
    let kp = codec.n_partial();
    let (mut best_line, mut best_margin) = (Vec::with_capacity(kp), Vec::with_capacity(kp));
    for _ in 0..kp {
        best_line.push(u32::from_le_bytes(read_array(&mut r).map_err(io)?));
        best_margin.push(f64::from_le_bytes(read_array(&mut r).map_err(io)?));
    }
    Ok((ScenarioTable { codec, margins }, BestResponseTable { codec, best_line, best_margin }))
}
