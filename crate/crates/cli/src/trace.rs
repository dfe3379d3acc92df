//! Binary trace payload with a JSON sidecar header.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use parmcmc_core::StateSequence;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const LAYOUT: &str = "chain-major then time-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
    pub sampler: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
}

impl TraceHeader {
    pub fn new(t: usize, b: usize, d: usize, sampler: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            t,
            b,
            d,
            dtype: "f64".into(),
            byte_order: "little".into(),
            layout: LAYOUT.into(),
            sampler: sampler.into(),
            seed,
            config,
        }
    }
}

/// `B` chains of `T x D` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub chains: Vec<StateSequence>,
}

/// Sidecar path: `trace.bin` -> `trace.json`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

impl TraceFile {
    pub fn new(header: TraceHeader, chains: Vec<StateSequence>) -> CliResult<Self> {
        if chains.len() != header.b || chains.iter().any(|c| c.len() != header.t || c.dim() != header.d) {
            return Err(CliError::Usage(format!(
                "trace header says {}x{}x{} but chains do not match",
                header.b, header.t, header.d
            )));
        }
        Ok(Self { header, chains })
    }

    pub fn write(&self, payload: &Path) -> CliResult<()> {
        let mut bytes = Vec::with_capacity(self.header.b * self.header.t * self.header.d * 8);
        for c in &self.chains {
            for v in c.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = payload.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(payload, bytes)?;
        let mut f = fs::File::create(sidecar_path(payload))?;
        serde_json::to_writer_pretty(&mut f, &self.header)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(payload: &Path) -> CliResult<Self> {
        let side = sidecar_path(payload);
        let text = fs::read_to_string(&side).map_err(|e| CliError::Usage(format!("{}: {e}", side.display())))?;
        let header: TraceHeader = serde_json::from_str(&text)?;
        if header.schema_version != SCHEMA_VERSION || header.dtype != "f64" || header.byte_order != "little" {
            return Err(CliError::Usage(format!("{}: unsupported trace format", side.display())));
        }
        let bytes = fs::read(payload).map_err(|e| CliError::Usage(format!("{}: {e}", payload.display())))?;
        let per_chain = header.t * header.d;
        if bytes.len() != header.b * per_chain * 8 {
            return Err(CliError::Usage(format!(
                "{}: payload has {} bytes, header implies {}",
                payload.display(),
                bytes.len(),
                header.b * per_chain * 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let chains = values
            .chunks(per_chain.max(1))
            .take(header.b)
            .map(|c| StateSequence::from_vec(c.to_vec(), header.t, header.d))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(header, chains)
    }

    /// `chain,t,x0,x1,...` rows.
    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut head = vec!["chain".to_string(), "t".to_string()];
        head.extend((0..self.header.d).map(|i| format!("x{i}")));
        w.write_record(&head).map_err(|e| CliError::Usage(e.to_string()))?;
        for (b, c) in self.chains.iter().enumerate() {
            for (t, s) in c.steps().enumerate() {
                let mut rec = vec![b.to_string(), t.to_string()];
                rec.extend(s.iter().map(|v| format!("{v:?}")));
                w.write_record(&rec).map_err(|e| CliError::Usage(e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TraceFile {
        let chains = (0..3)
            .map(|b| {
                let v: Vec<f64> = (0..10).map(|i| (i as f64 + 0.1 * b as f64).sin() * 1e-3 + 1.0 / 3.0).collect();
                StateSequence::from_vec(v, 5, 2).unwrap()
            })
            .collect();
        TraceFile::new(TraceHeader::new(5, 3, 2, "mala", 7, BTreeMap::new()), chains).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let tf = sample();
        tf.write(&p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 3 * 5 * 2 * 8);
        let back = TraceFile::read(&p).unwrap();
        assert_eq!(back, tf);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
        assert_eq!(json["layout"], LAYOUT);
        assert_eq!(json["T"], 5);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        sample().write(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(TraceFile::read(&p).is_err());
    }

    #[test]
    fn csv_export_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        sample().write_csv(&p).unwrap();
        let mut r = csv::Reader::from_path(&p).unwrap();
        assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["chain", "t", "x0", "x1"]);
        assert_eq!(r.records().count(), 15);
    }
}
