//! Binary adapter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | content                                         |
//! |------------------|-------------------------------------------------|
//! | 4                | magic `OSDA`                                    |
//! | 4                | format version (`u32`)                          |
//! | 8                | header length `h` (`u64`)                       |
//! | `h`              | UTF-8 JSON [`Header`]                           |
//! | `payload_bytes`  | `f64` values, row-major, in header order        |
//! | 8                | FNV-1a 64 checksum of the payload bytes (`u64`) |
//!
//! Every site lists its matrices with shapes and byte offsets relative to
//! the payload start; the offsets tile the payload exactly. Hard-variant
//! sites carry `A`, `B`, `A_hat`, `V_par` and `V_perp`; `A` is re-expanded
//! from `A_hat·V_perpᵀ` on load and must match the stored bits.

use std::fs;
use std::hash::Hasher;
use std::path::Path;
use std::sync::Arc;

use fnv::FnvHasher;
use osd_core::adapters::{expand_hard, HardSite};
use osd_core::{
    KnowledgeAdapter, LoraLayer, Matrix, NullSpaceBasis, OsdError, SiteId, TaskAdapter, TaskType,
    Variant,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::atomic_write;

pub const MAGIC: [u8; 4] = *b"OSDA";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const CHECKSUM: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an adapter checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint layout does not tile the payload: {0}")]
    Layout(String),
    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("hard site {0}: stored A differs from the re-expanded A_hat·V_perpᵀ")]
    HardExpansion(String),
    #[error("checkpoint holds a {found} adapter, expected {expected}")]
    WrongKind {
        expected: AdapterKind,
        found: AdapterKind,
    },
    #[error("invalid adapter in checkpoint: {0}")]
    Adapter(#[from] OsdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Task,
    Knowledge,
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Task => "task",
            AdapterKind::Knowledge => "knowledge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the payload start.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub site_id: String,
    pub matrices: Vec<MatrixEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: AdapterKind,
    pub variant: Option<Variant>,
    pub task_type: TaskType,
    pub doc_id: Option<String>,
    pub rank: usize,
    /// Null-space threshold; hard variant only.
    pub tau: Option<f64>,
    /// Content hash of the frozen base the adapter was trained against.
    pub base_hash: String,
    /// Hash of everything that determined the training run; a rerun with an
    /// equal fingerprint may reuse the checkpoint.
    pub fingerprint: String,
    pub sites: Vec<SiteEntry>,
    pub payload_bytes: u64,
}

/// Provenance stored alongside the adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub task_type: TaskType,
    pub base_hash: String,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Task(TaskAdapter),
    Knowledge(KnowledgeAdapter),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub adapter: Adapter,
}

impl Checkpoint {
    pub fn into_task(self) -> Result<TaskAdapter, CheckpointError> {
        match self.adapter {
            Adapter::Task(t) => Ok(t),
            Adapter::Knowledge(_) => Err(CheckpointError::WrongKind {
                expected: AdapterKind::Task,
                found: AdapterKind::Knowledge,
            }),
        }
    }

    pub fn into_knowledge(self) -> Result<KnowledgeAdapter, CheckpointError> {
        match self.adapter {
            Adapter::Knowledge(k) => Ok(k),
            Adapter::Task(_) => Err(CheckpointError::WrongKind {
                expected: AdapterKind::Knowledge,
                found: AdapterKind::Task,
            }),
        }
    }
}

struct PayloadWriter {
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, name: &str, m: &Matrix) -> MatrixEntry {
        let offset = self.bytes.len() as u64;
        for v in m.as_slice() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        MatrixEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        }
    }
}

fn checksum(payload: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(payload);
    h.finish()
}

fn assemble(mut header: Header, payload: Vec<u8>) -> Vec<u8> {
    header.payload_bytes = payload.len() as u64;
    let text = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + text.len() + payload.len() + CHECKSUM);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum(&payload).to_le_bytes());
    out
}

fn lora_entries(w: &mut PayloadWriter, layer: &LoraLayer) -> Vec<MatrixEntry> {
    vec![w.push("A", &layer.a), w.push("B", &layer.b)]
}

pub fn encode_task(task: &TaskAdapter, prov: &Provenance) -> Vec<u8> {
    let mut w = PayloadWriter { bytes: Vec::new() };
    let sites = task
        .layers
        .iter()
        .map(|l| SiteEntry {
            site_id: l.site.to_string(),
            matrices: lora_entries(&mut w, l),
        })
        .collect();
    let header = Header {
        kind: AdapterKind::Task,
        variant: None,
        task_type: task.task_type,
        doc_id: None,
        rank: task.rank,
        tau: None,
        base_hash: prov.base_hash.clone(),
        fingerprint: prov.fingerprint.clone(),
        sites,
        payload_bytes: 0,
    };
    assemble(header, w.bytes)
}

pub fn encode_knowledge(know: &KnowledgeAdapter, prov: &Provenance) -> Vec<u8> {
    let mut w = PayloadWriter { bytes: Vec::new() };
    let mut sites = Vec::with_capacity(know.layers().len());
    for (i, l) in know.layers().iter().enumerate() {
        let mut matrices = lora_entries(&mut w, l);
        if let Some(hard) = know.hard_sites() {
            let h = &hard[i];
            matrices.push(w.push("A_hat", &h.a_hat));
            matrices.push(w.push("V_par", &h.basis.v_par));
            matrices.push(w.push("V_perp", &h.basis.v_perp));
        }
        sites.push(SiteEntry {
            site_id: l.site.to_string(),
            matrices,
        });
    }
    let header = Header {
        kind: AdapterKind::Knowledge,
        variant: Some(know.variant()),
        task_type: prov.task_type,
        doc_id: Some(know.doc_id().to_string()),
        rank: know.rank(),
        tau: know
            .hard_sites()
            .and_then(|h| h.first())
            .map(|h| h.basis.tau),
        base_hash: prov.base_hash.clone(),
        fingerprint: prov.fingerprint.clone(),
        sites,
        payload_bytes: 0,
    };
    assemble(header, w.bytes)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

/// Parses and checks the preamble and header; returns the header and the
/// payload slice after verifying the checksum.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8]), CheckpointError> {
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes, preamble needs {PREAMBLE}",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = usize::try_from(read_u64(bytes, 8))
        .map_err(|_| CheckpointError::Truncated("header length overflows".into()))?;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            CheckpointError::Truncated(format!("header of {header_len} bytes runs past the end"))
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload_len = usize::try_from(header.payload_bytes)
        .map_err(|_| CheckpointError::Truncated("payload length overflows".into()))?;
    let expected = header_end + payload_len + CHECKSUM;
    if bytes.len() != expected {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes on disk, header implies {expected}",
            bytes.len()
        )));
    }
    let payload = &bytes[header_end..header_end + payload_len];
    let stored = read_u64(bytes, header_end + payload_len);
    let computed = checksum(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    check_tiling(&header)?;
    Ok((header, payload))
}

/// Matrices must sit back to back, in order, covering the payload exactly.
fn check_tiling(header: &Header) -> Result<(), CheckpointError> {
    let mut cursor = 0u64;
    for s in &header.sites {
        for m in &s.matrices {
            if m.offset != cursor {
                return Err(CheckpointError::Layout(format!(
                    "{}/{} starts at byte {} but the previous matrix ends at {cursor}",
                    s.site_id, m.name, m.offset
                )));
            }
            let len = (m.rows as u64)
                .checked_mul(m.cols as u64)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| {
                    CheckpointError::Layout(format!("{}/{} size overflows", s.site_id, m.name))
                })?;
            cursor += len;
        }
    }
    if cursor != header.payload_bytes {
        return Err(CheckpointError::Layout(format!(
            "matrices cover {cursor} bytes, payload has {}",
            header.payload_bytes
        )));
    }
    Ok(())
}

fn read_matrix(payload: &[u8], m: &MatrixEntry) -> Result<Matrix, CheckpointError> {
    let start = m.offset as usize;
    let data = payload[start..start + m.rows * m.cols * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Matrix::from_vec(m.rows, m.cols, data)?)
}

fn site_matrices<'a>(
    site: &'a SiteEntry,
    expected: &[&str],
) -> Result<Vec<&'a MatrixEntry>, CheckpointError> {
    let names: Vec<&str> = site.matrices.iter().map(|m| m.name.as_str()).collect();
    if names != expected {
        return Err(CheckpointError::Header(format!(
            "site {} lists matrices {names:?}, expected {expected:?}",
            site.site_id
        )));
    }
    Ok(site.matrices.iter().collect())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (header, payload) = decode_header(bytes)?;
    let hard = header.kind == AdapterKind::Knowledge && header.variant == Some(Variant::Hard);
    let expected: &[&str] = if hard {
        &["A", "B", "A_hat", "V_par", "V_perp"]
    } else {
        &["A", "B"]
    };
    let mut sites = Vec::with_capacity(header.sites.len());
    let mut layers = Vec::with_capacity(header.sites.len());
    let mut hard_sites = Vec::new();
    for s in &header.sites {
        let site: SiteId = s.site_id.parse()?;
        let entries = site_matrices(s, expected)?;
        let a = read_matrix(payload, entries[0])?;
        let b = read_matrix(payload, entries[1])?;
        if hard {
            let a_hat = read_matrix(payload, entries[2])?;
            let v_par = read_matrix(payload, entries[3])?;
            let v_perp = read_matrix(payload, entries[4])?;
            let tau = header
                .tau
                .ok_or_else(|| CheckpointError::Header("hard checkpoint without tau".into()))?;
            let basis = Arc::new(NullSpaceBasis {
                rank: v_par.cols(),
                v_par,
                v_perp,
                tau,
            });
            let expanded = expand_hard(&a_hat, &basis)?;
            if expanded
                .as_slice()
                .iter()
                .zip(a.as_slice())
                .any(|(x, y)| x.to_bits() != y.to_bits())
            {
                return Err(CheckpointError::HardExpansion(s.site_id.clone()));
            }
            hard_sites.push(HardSite { a_hat, basis });
        }
        sites.push(site);
        layers.push(LoraLayer::new(site, a, b)?);
    }
    let adapter = match header.kind {
        AdapterKind::Task => Adapter::Task(TaskAdapter::new(header.task_type, layers)?),
        AdapterKind::Knowledge => {
            let doc_id = header.doc_id.clone().ok_or_else(|| {
                CheckpointError::Header("knowledge checkpoint without doc_id".into())
            })?;
            let variant = header.variant.ok_or_else(|| {
                CheckpointError::Header("knowledge checkpoint without variant".into())
            })?;
            let know = if hard {
                let b = layers.into_iter().map(|l| l.b).collect();
                KnowledgeAdapter::new_hard(doc_id, sites, b, hard_sites)?
            } else {
                KnowledgeAdapter::new(doc_id, variant, layers)?
            };
            Adapter::Knowledge(know)
        }
    };
    let rank = match &adapter {
        Adapter::Task(t) => t.rank,
        Adapter::Knowledge(k) => k.rank(),
    };
    if rank != header.rank {
        return Err(CheckpointError::Header(format!(
            "header declares rank {}, matrices have rank {rank}",
            header.rank
        )));
    }
    Ok(Checkpoint { header, adapter })
}

pub fn save_task(
    path: &Path,
    task: &TaskAdapter,
    prov: &Provenance,
) -> Result<(), CheckpointError> {
    Ok(atomic_write(path, &encode_task(task, prov))?)
}

pub fn save_knowledge(
    path: &Path,
    know: &KnowledgeAdapter,
    prov: &Provenance,
) -> Result<(), CheckpointError> {
    Ok(atomic_write(path, &encode_knowledge(know, prov))?)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}
