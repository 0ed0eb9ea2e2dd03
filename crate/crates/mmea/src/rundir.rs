//! Run-directory artifacts: the flat little-endian parameter dump with its
//! manifest and checksum, the per-epoch JSONL log, and tidy-CSV emitters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensor_core::Tensor;

use crate::config::RunConfig;
use crate::error::{MmeaError, Result};
use crate::eval::MetricsReport;
use crate::kg::Modality;
use crate::model::{ModelSpec, ParameterStore};
use crate::training::EpochRecord;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "params.manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curves.csv";

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the dump in scalars (not bytes).
    pub offset: usize,
    pub len: usize,
}

/// Manifest describing the parameter dump plus everything needed to rebuild
/// the model around it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub checksum: String,
    pub scalar: String,
    pub tensors: Vec<TensorEntry>,
    pub d: usize,
    pub d_in: usize,
    pub mhca_heads: usize,
    pub gat_heads: usize,
    pub use_ffn: bool,
    pub modalities: Vec<Modality>,
    pub feature_dims: Vec<(Modality, usize)>,
    pub entities_kg1: usize,
    pub entities_kg2: usize,
}

impl Manifest {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            d: self.d,
            d_in: self.d_in,
            mhca_heads: self.mhca_heads,
            gat_heads: self.gat_heads,
            use_ffn: self.use_ffn,
            modalities: self.modalities.clone(),
            feature_dims: self.feature_dims.iter().copied().collect(),
            entities_kg1: self.entities_kg1,
            entities_kg2: self.entities_kg2,
        }
    }
}

/// Writes the parameter dump (flat little-endian f64) and its manifest.
pub fn write_params(dir: &Path, spec: &ModelSpec, store: &ParameterStore) -> Result<()> {
    let mut blob: Vec<u8> = Vec::with_capacity(store.total_scalars() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let manifest = Manifest {
        checksum: format!("{:016x}", fnv1a64(&blob)),
        scalar: "f64le".to_string(),
        tensors,
        d: spec.d,
        d_in: spec.d_in,
        mhca_heads: spec.mhca_heads,
        gat_heads: spec.gat_heads,
        use_ffn: spec.use_ffn,
        modalities: spec.modalities.clone(),
        feature_dims: spec.feature_dims.iter().map(|(&m, &d)| (m, d)).collect(),
        entities_kg1: spec.entities_kg1,
        entities_kg2: spec.entities_kg2,
    };
    fs::write(dir.join(PARAMS_FILE), &blob)
        .map_err(|e| MmeaError::io("writing parameter dump", e))?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).map_err(|e| MmeaError::json("manifest", e))?,
    )
    .map_err(|e| MmeaError::io("writing manifest", e))?;
    Ok(())
}

/// Loads and checksum-verifies a parameter dump.
pub fn load_params(dir: &Path) -> Result<(Manifest, ParameterStore)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            MmeaError::MissingFile {
                path: manifest_path.clone(),
            }
        } else {
            MmeaError::io("reading manifest", e)
        }
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| MmeaError::json("parsing manifest", e))?;
    let params_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&params_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            MmeaError::MissingFile {
                path: params_path.clone(),
            }
        } else {
            MmeaError::io("reading parameter dump", e)
        }
    })?;
    let found = format!("{:016x}", fnv1a64(&blob));
    if found != manifest.checksum {
        return Err(MmeaError::Checksum {
            path: params_path,
            expected: manifest.checksum.clone(),
            found,
        });
    }
    let mut store = ParameterStore::new();
    for entry in &manifest.tensors {
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if end > blob.len() {
            return Err(MmeaError::Invalid(format!(
                "manifest entry '{}' reaches past the dump",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(&entry.name, Tensor::from_vec(&entry.shape, data)?);
    }
    Ok((manifest, store))
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), cfg.to_json_pretty()?)
        .map_err(|e| MmeaError::io("writing config", e))
}

pub fn load_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            MmeaError::MissingFile { path: path.clone() }
        } else {
            MmeaError::io("reading config", e)
        }
    })?;
    RunConfig::from_json(&text)
}

/// Line-delimited per-epoch records.
pub fn write_log(dir: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for record in log {
        out.push_str(
            &serde_json::to_string(record).map_err(|e| MmeaError::json("log record", e))?,
        );
        out.push('\n');
    }
    fs::write(dir.join(LOG_FILE), out).map_err(|e| MmeaError::io("writing log", e))
}

pub fn write_report(dir: &Path, report: &serde_json::Value) -> Result<()> {
    fs::write(
        dir.join(REPORT_FILE),
        serde_json::to_string_pretty(report).map_err(|e| MmeaError::json("report", e))?,
    )
    .map_err(|e| MmeaError::io("writing report", e))
}

pub fn load_report(dir: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(dir.join(REPORT_FILE))
        .map_err(|e| MmeaError::io("reading report", e))?;
    serde_json::from_str(&text).map_err(|e| MmeaError::json("parsing report", e))
}

/// Tidy CSV of the training curves: one (epoch, metric, value) row per
/// observation, ready for plotting.
pub fn write_curves(dir: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,phase,metric,value\n");
    for r in log {
        let mut push = |metric: &str, value: f64| {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.phase, metric, value));
        };
        push("loss", r.loss);
        push("l_mu", r.l_mu);
        push("l_icl", r.l_icl);
        push("l_licl", r.l_licl);
        if let Some(x) = r.l_xi {
            push("l_xi", x);
        }
        if let Some(h) = r.hits1 {
            push("hits1", h);
        }
        if let Some(h) = r.hits10 {
            push("hits10", h);
        }
        if let Some(m) = r.mrr {
            push("mrr", m);
        }
        if let Some(m) = r.mr {
            push("mr", m);
        }
        push("seed_count", r.seed_count as f64);
    }
    fs::write(dir.join(CURVE_FILE), out).map_err(|e| MmeaError::io("writing curves", e))
}

pub fn metrics_to_value(metrics: &MetricsReport) -> serde_json::Value {
    serde_json::to_value(metrics).unwrap_or(serde_json::Value::Null)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            d: 4,
            d_in: 8,
            mhca_heads: 1,
            gat_heads: 2,
            use_ffn: true,
            modalities: vec![Modality::Graph, Modality::Visual],
            feature_dims: BTreeMap::from([(Modality::Visual, 6)]),
            entities_kg1: 3,
            entities_kg2: 3,
        }
    }

    #[test]
    fn params_roundtrip_bit_exactly() {
        let spec = toy_spec();
        let store = spec.init_params(11).unwrap();
        let dir = std::env::temp_dir().join(format!("mmea-dump-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        write_params(&dir, &spec, &store).unwrap();
        let (manifest, back) = load_params(&dir).unwrap();
        assert_eq!(manifest.d, 4);
        assert_eq!(back.len(), store.len());
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn corruption_is_caught_by_the_checksum() {
        let spec = toy_spec();
        let store = spec.init_params(12).unwrap();
        let dir = std::env::temp_dir().join(format!("mmea-corrupt-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        write_params(&dir, &spec, &store).unwrap();
        let mut blob = fs::read(dir.join(PARAMS_FILE)).unwrap();
        blob[13] ^= 0xFF;
        fs::write(dir.join(PARAMS_FILE), blob).unwrap();
        match load_params(&dir) {
            Err(MmeaError::Checksum { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
        let _ = fs::remove_dir_all(&dir);
    }
}
