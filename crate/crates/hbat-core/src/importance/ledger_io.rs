//! Ledger serialization: a JSON manifest naming the units, per-side round
//! counts, and flags, followed by every value as 64-bit little-endian floats
//! in manifest order. Round-trips exactly.

use super::{ImportanceLedger, Side, SideLedger};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HBLEDG01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SideManifest {
    side: Side,
    rounds: usize,
    has_f: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    units: Vec<String>,
    sides: Vec<SideManifest>,
}

fn push_map(payload: &mut Vec<u8>, units: &[String], map: &IndexMap<String, f64>) {
    for name in units {
        payload.extend_from_slice(&map[name].to_le_bytes());
    }
}

fn side_of(ledger: &ImportanceLedger, side: Side) -> &SideLedger {
    match side {
        Side::Ifa => &ledger.ifa,
        Side::Hpa => &ledger.hpa,
    }
}

pub fn save_ledger(ledger: &ImportanceLedger, path: &Path) -> Result<()> {
    let units = ledger.unit_names.clone();
    let sides = [Side::Ifa, Side::Hpa];
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        units: units.clone(),
        sides: sides
            .iter()
            .map(|&s| SideManifest {
                side: s,
                rounds: side_of(ledger, s).rounds.len(),
                has_f: side_of(ledger, s).f.is_some(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    // payload order: f_max, then per side: each round's C map, AC, F
    let mut payload = Vec::new();
    payload.extend_from_slice(&ledger.f_max.to_le_bytes());
    for &s in &sides {
        let sl = side_of(ledger, s);
        for round in &sl.rounds {
            push_map(&mut payload, &units, round);
        }
        if !sl.rounds.is_empty() {
            push_map(&mut payload, &units, &sl.ac);
        }
        if let Some(f) = &sl.f {
            push_map(&mut payload, &units, f);
        }
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_ledger(path: &Path) -> Result<ImportanceLedger> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated ledger", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a ledger file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported ledger version {}",
            manifest.format_version
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let mut cursor = 0usize;
    let mut next = || -> Result<f64> {
        let end = cursor + 8;
        if end > payload.len() {
            return Err(Error::Checkpoint("ledger payload truncated".into()));
        }
        let v = f64::from_le_bytes(payload[cursor..end].try_into().expect("8 bytes"));
        cursor = end;
        Ok(v)
    };
    let units = manifest.units.clone();
    let read_map = |next: &mut dyn FnMut() -> Result<f64>| -> Result<IndexMap<String, f64>> {
        let mut map = IndexMap::new();
        for name in &units {
            map.insert(name.clone(), next()?);
        }
        Ok(map)
    };

    let f_max = next()?;
    let mut ledger = ImportanceLedger::new(manifest.units.clone(), f_max)?;
    for sm in &manifest.sides {
        let mut rounds = Vec::with_capacity(sm.rounds);
        for _ in 0..sm.rounds {
            rounds.push(read_map(&mut next)?);
        }
        let ac = if sm.rounds > 0 {
            read_map(&mut next)?
        } else {
            IndexMap::new()
        };
        let f = if sm.has_f { Some(read_map(&mut next)?) } else { None };
        let slot = match sm.side {
            Side::Ifa => &mut ledger.ifa,
            Side::Hpa => &mut ledger.hpa,
        };
        slot.rounds = rounds;
        slot.ac = ac;
        slot.f = f;
    }
    Ok(ledger)
}
