//! Dataset directories: `meta.json` plus one binary file per array.
//!
//! Binary layout: magic `SLQT`, `u32` rows, `u32` cols, `u32` reserved (zero),
//! then `rows * cols` little-endian `f64` in column-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EnsembleDataset, GridDims, InputSignal, MomentGrid, SimConfig};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA: &str = "slqt-dataset/1";
const MAGIC: &[u8; 4] = b"SLQT";
const HEADER_LEN: usize = 16;

pub(crate) fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    file: String,
    rows: usize,
    cols: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    schema: String,
    plant_hash: String,
    created_at: String,
    config: SimConfig,
    seeds: SeedInfo,
    discount: f64,
    x0: DVector<f64>,
    input: InputSignal,
    dims: GridDims,
    sample_period: f64,
    n_paths: usize,
    arrays: BTreeMap<String, ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedInfo {
    base_seed: u64,
    /// Path `p` uses `base_seed + p`.
    rule: String,
}

fn encode(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(name: &str, bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{name}: bad magic")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * rows * cols {
        return Err(Error::Format(format!("{name}: expected {} values, found {} bytes", rows * cols, body.len())));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_vec(rows, cols, data))
}

fn arrays(grid: &MomentGrid) -> Vec<(&'static str, &DMatrix<f64>)> {
    vec![
        ("mean", &grid.mean),
        ("second", &grid.second),
        ("second_var", &grid.second_var),
        ("input", &grid.input),
        ("x_d", &grid.x_d),
        ("xd_chi", &grid.xd_chi),
        ("cum_s", &grid.cum_s),
        ("cum_w", &grid.cum_w),
        ("cum_v", &grid.cum_v),
        ("cum_xd_chi", &grid.cum_xd_chi),
        ("cum_xd_v", &grid.cum_xd_v),
    ]
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_dataset(ds: &EnsembleDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = BTreeMap::new();
    for (name, mat) in arrays(&ds.grid) {
        let bytes = encode(mat);
        let file = format!("{name}.bin");
        fs::write(dir.join(&file), &bytes)?;
        entries.insert(
            name.to_string(),
            ArrayEntry { file, rows: mat.nrows(), cols: mat.ncols(), sha256: sha_hex(&bytes) },
        );
    }
    let meta = Meta {
        schema: DATASET_SCHEMA.into(),
        plant_hash: ds.plant_hash.clone(),
        created_at: ds.created_at.clone(),
        config: ds.config.clone(),
        seeds: SeedInfo { base_seed: ds.config.base_seed, rule: "base_seed + path_index".into() },
        discount: ds.discount,
        x0: ds.x0.clone(),
        input: ds.input.clone(),
        dims: ds.grid.dims,
        sample_period: ds.grid.sample_period,
        n_paths: ds.grid.n_paths,
        arrays: entries,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join("meta.json"), text)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<EnsembleDataset> {
    let text = fs::read_to_string(dir.join("meta.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
    if found != DATASET_SCHEMA {
        return Err(Error::SchemaVersion { expected: DATASET_SCHEMA.into(), found: found.into() });
    }
    let meta: Meta = serde_json::from_value(value)?;
    let read = |name: &str| -> Result<DMatrix<f64>> {
        let entry = meta
            .arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("meta.json lists no array {name}")))?;
        let bytes = fs::read(dir.join(&entry.file))?;
        if sha_hex(&bytes) != entry.sha256 {
            return Err(Error::Checksum(entry.file.clone()));
        }
        let m = decode(&entry.file, &bytes)?;
        if m.shape() != (entry.rows, entry.cols) {
            return Err(Error::Format(format!("{}: shape disagrees with meta.json", entry.file)));
        }
        Ok(m)
    };
    let grid = MomentGrid {
        dims: meta.dims,
        sample_period: meta.sample_period,
        n_paths: meta.n_paths,
        mean: read("mean")?,
        second: read("second")?,
        second_var: read("second_var")?,
        input: read("input")?,
        x_d: read("x_d")?,
        xd_chi: read("xd_chi")?,
        cum_s: read("cum_s")?,
        cum_w: read("cum_w")?,
        cum_v: read("cum_v")?,
        cum_xd_chi: read("cum_xd_chi")?,
        cum_xd_v: read("cum_xd_v")?,
    };
    Ok(EnsembleDataset {
        config: meta.config,
        plant_hash: meta.plant_hash,
        discount: meta.discount,
        x0: meta.x0,
        input: meta.input,
        created_at: meta.created_at,
        grid,
    })
}

/// Writes the sampled moments as CSV with 17 significant digits.
pub fn export_csv(grid: &MomentGrid, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let cols = arrays(grid);
    let mut header = vec!["t".to_string()];
    for (name, mat) in &cols {
        if mat.ncols() == grid.len() {
            header.extend((0..mat.nrows()).map(|i| format!("{name}_{i}")));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for k in 0..grid.len() {
        let mut row = vec![format!("{:.16e}", grid.time(k))];
        for (_, mat) in &cols {
            if mat.ncols() == grid.len() {
                row.extend(mat.column(k).iter().map(|v| format!("{v:.16e}")));
            }
        }
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ReferenceGenerator, StochasticSystem};
    use crate::sim::{run_ensemble, DataSpec, ProbingSignal};

    fn dataset() -> EnsembleDataset {
        let sys = StochasticSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -5.0, -0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.2, 0.3]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap();
        let reference = ReferenceGenerator::new(
            DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -5.0, 0.0]),
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            DVector::from_vec(vec![5f64.sqrt(), 0.5, 0.5]),
        )
        .unwrap();
        let input = InputSignal::Probing(vec![ProbingSignal::new(10.0, 5, (-100.0, 100.0), 1).unwrap()]);
        let x0 = DVector::zeros(2);
        let spec = DataSpec { system: &sys, input: &input, x0: &x0, reference: &reference, discount: 0.45 };
        let cfg = SimConfig { h: 1e-3, sample_period: 1e-2, window: 0.1, t1: 0.0, n_samples: 21, n_paths: 10, base_seed: 3 };
        run_ensemble(&spec, &cfg).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ds = dataset();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&ds, a.path()).unwrap();
        let back = load_dataset(a.path()).unwrap();
        assert_eq!(back, ds);
        save_dataset(&back, b.path()).unwrap();
        for entry in fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
    }

    #[test]
    fn corrupted_array_fails_checksum() {
        let ds = dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("cum_s.bin");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum(_))));
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let ds = dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let meta = dir.path().join("meta.json");
        let text = fs::read_to_string(&meta).unwrap().replace(DATASET_SCHEMA, "slqt-dataset/0");
        fs::write(&meta, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::SchemaVersion { .. })));
    }

    #[test]
    fn header_is_sixteen_bytes() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"SLQT");
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 4.0);
        assert_eq!(decode("m", &bytes).unwrap(), m);
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let ds = dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        export_csv(&ds.grid, &path).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), ds.grid.len() + 1);
    }
}
