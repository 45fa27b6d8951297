//! Chunked file transfer: 1 MiB raw chunks, base64 on the wire, SHA-256 of
//! the whole file carried on the last chunk.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ErrorPayload, FrameTransport, Kind, Session, SessionError, Status};

pub const CHUNK_SIZE: usize = 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushChunk {
    pub path: String,
    pub seq: u64,
    pub data: String,
    pub last: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub bytes: u64,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchRequest {
    pub path: String,
    pub chunk: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchChunk {
    pub chunk: u64,
    pub total_chunks: u64,
    pub total_bytes: u64,
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("{}: {}", .0.class, .0.message)]
    Rejected(ErrorPayload),
    #[error("content hash mismatch: sent {sent}, peer reports {reported}")]
    HashMismatch { sent: String, reported: String },
    #[error("malformed transfer reply: {0}")]
    Malformed(String),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn b64() -> base64::engine::GeneralPurpose {
    base64::engine::general_purpose::STANDARD
}

fn reply_payload<T: for<'de> Deserialize<'de>>(r: super::Response) -> Result<T, TransferError> {
    if r.status != Status::Ok {
        return Err(TransferError::Rejected(
            r.error_payload()
                .unwrap_or_else(|| ErrorPayload::new("error", r.payload.to_string())),
        ));
    }
    serde_json::from_value(r.payload).map_err(|e| TransferError::Malformed(e.to_string()))
}

/// Sends `bytes` to `guest_path`, one request per chunk. An empty file is one
/// empty chunk.
pub fn push_file<T: FrameTransport>(
    session: &mut Session<T>,
    guest_path: &str,
    bytes: &[u8],
    deadline: Option<Duration>,
) -> Result<Receipt, TransferError> {
    let hash = sha256_hex(bytes);
    let chunks: Vec<&[u8]> = if bytes.is_empty() {
        vec![&[]]
    } else {
        bytes.chunks(CHUNK_SIZE).collect()
    };
    let n = chunks.len();
    for (seq, chunk) in chunks.into_iter().enumerate() {
        let last = seq + 1 == n;
        let msg = PushChunk {
            path: guest_path.into(),
            seq: seq as u64,
            data: b64().encode(chunk),
            last,
            sha256: last.then(|| hash.clone()),
        };
        let r = session.request(Kind::PushFile, serde_json::to_value(&msg).expect("chunk serializes"), deadline)?;
        if last {
            let receipt: Receipt = reply_payload(r)?;
            if receipt.content_hash != hash || receipt.bytes != bytes.len() as u64 {
                return Err(TransferError::HashMismatch {
                    sent: hash,
                    reported: receipt.content_hash,
                });
            }
            return Ok(receipt);
        }
        reply_payload::<serde_json::Value>(r)?;
    }
    unreachable!("at least one chunk is always sent")
}

/// Fetches `guest_path`, verifying the trailer hash.
pub fn fetch_file<T: FrameTransport>(
    session: &mut Session<T>,
    guest_path: &str,
    deadline: Option<Duration>,
) -> Result<(Vec<u8>, Receipt), TransferError> {
    let mut out = Vec::new();
    let mut index = 0u64;
    loop {
        let req = FetchRequest {
            path: guest_path.into(),
            chunk: index,
        };
        let r = session.request(Kind::FetchFile, serde_json::to_value(&req).expect("request serializes"), deadline)?;
        let c: FetchChunk = reply_payload(r)?;
        if c.chunk != index {
            return Err(TransferError::Malformed(format!("asked for chunk {index}, got {}", c.chunk)));
        }
        let data = b64()
            .decode(c.data.as_bytes())
            .map_err(|e| TransferError::Malformed(e.to_string()))?;
        out.extend_from_slice(&data);
        if index + 1 >= c.total_chunks {
            let reported = c
                .sha256
                .ok_or_else(|| TransferError::Malformed("last chunk carries no hash".into()))?;
            let got = sha256_hex(&out);
            if got != reported || out.len() as u64 != c.total_bytes {
                return Err(TransferError::HashMismatch { sent: reported, reported: got });
            }
            let receipt = Receipt {
                bytes: out.len() as u64,
                content_hash: got,
            };
            return Ok((out, receipt));
        }
        index += 1;
    }
}

/// Agent-side reassembly of pushed chunks.
#[derive(Debug, Default)]
pub struct PushAssembler {
    current: Option<(String, u64, Vec<u8>)>,
}

impl PushAssembler {
    /// Returns the complete content once the last chunk arrives and its hash
    /// checks out. Out-of-order chunks abort the transfer in progress.
    pub fn accept(&mut self, chunk: PushChunk) -> Result<Option<Vec<u8>>, String> {
        let data = b64()
            .decode(chunk.data.as_bytes())
            .map_err(|e| format!("chunk {} is not valid base64: {e}", chunk.seq))?;
        if data.len() > CHUNK_SIZE {
            self.current = None;
            return Err(format!("chunk {} exceeds {CHUNK_SIZE} bytes", chunk.seq));
        }
        let (path, next, mut buf) = match self.current.take() {
            None if chunk.seq == 0 => (chunk.path.clone(), 0, Vec::new()),
            Some((p, n, b)) if p == chunk.path && n == chunk.seq => (p, n, b),
            _ => return Err(format!("unexpected chunk {} for {}", chunk.seq, chunk.path)),
        };
        buf.extend_from_slice(&data);
        if !chunk.last {
            self.current = Some((path, next + 1, buf));
            return Ok(None);
        }
        let want = chunk.sha256.ok_or("last chunk carries no hash")?;
        let got = sha256_hex(&buf);
        if got != want {
            return Err(format!("content hash mismatch: expected {want}, received {got}"));
        }
        Ok(Some(buf))
    }
}

/// Agent-side slice of a file for one fetch request.
pub fn fetch_chunk(content: &[u8], index: u64) -> Result<FetchChunk, String> {
    let total_chunks = content.len().div_ceil(CHUNK_SIZE).max(1) as u64;
    if index >= total_chunks {
        return Err(format!("chunk {index} out of range (file has {total_chunks})"));
    }
    let start = index as usize * CHUNK_SIZE;
    let end = (start + CHUNK_SIZE).min(content.len());
    let last = index + 1 == total_chunks;
    Ok(FetchChunk {
        chunk: index,
        total_chunks,
        total_bytes: content.len() as u64,
        data: b64().encode(&content[start..end]),
        sha256: last.then(|| sha256_hex(content)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn push_all(bytes: &[u8]) -> Result<Option<Vec<u8>>, String> {
        let mut a = PushAssembler::default();
        let chunks: Vec<&[u8]> = if bytes.is_empty() { vec![&[]] } else { bytes.chunks(CHUNK_SIZE).collect() };
        let n = chunks.len();
        let mut out = None;
        for (i, c) in chunks.into_iter().enumerate() {
            out = a.accept(PushChunk {
                path: "/p".into(),
                seq: i as u64,
                data: b64().encode(c),
                last: i + 1 == n,
                sha256: (i + 1 == n).then(|| sha256_hex(bytes)),
            })?;
        }
        Ok(out)
    }

    #[test]
    fn assembler_round_trips() {
        for len in [0usize, 1, CHUNK_SIZE, CHUNK_SIZE + 1, 3 * CHUNK_SIZE - 7] {
            let bytes: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
            assert_eq!(push_all(&bytes).unwrap().unwrap(), bytes, "len {len}");
        }
    }

    #[test]
    fn assembler_rejects_gaps_and_bad_hash() {
        let mut a = PushAssembler::default();
        let e = a.accept(PushChunk { path: "/p".into(), seq: 1, data: String::new(), last: true, sha256: None });
        assert!(e.is_err());
        let e = a.accept(PushChunk { path: "/p".into(), seq: 0, data: b64().encode(b"abc"), last: true, sha256: Some(sha256_hex(b"abd")) });
        assert!(e.unwrap_err().contains("mismatch"));
    }

    #[test]
    fn fetch_chunks_cover_the_file() {
        let bytes = vec![9u8; 2 * CHUNK_SIZE + 5];
        let c0 = fetch_chunk(&bytes, 0).unwrap();
        assert_eq!(c0.total_chunks, 3);
        assert!(c0.sha256.is_none());
        let c2 = fetch_chunk(&bytes, 2).unwrap();
        assert_eq!(b64().decode(c2.data).unwrap().len(), 5);
        assert_eq!(c2.sha256.unwrap(), sha256_hex(&bytes));
        assert!(fetch_chunk(&bytes, 3).is_err());
        let empty = fetch_chunk(&[], 0).unwrap();
        assert_eq!((empty.total_chunks, empty.total_bytes), (1, 0));
    }
}
