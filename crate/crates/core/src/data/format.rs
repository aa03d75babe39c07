//! On-disk layout: one `meta.json` plus per-domain `<id>.f32` samples and
//! `<id>.lbl` labels.
//!
//! Sample file: 16-byte header — magic `UDTS`, format version u32, N u32,
//! D u16, T u16, all little-endian — followed by `N*D*T` f32 values in
//! `[N, D, T]` row-major order. Label file: 8-byte header — magic `UDLB`,
//! N u32 — followed by `N` i32 class ids. Values are stored as f32 and
//! widened to f64 in memory; a save/load/save cycle is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, DatasetMeta, MultiDomainDataset, TimeSeriesDataset};

const SAMPLE_MAGIC: [u8; 4] = *b"UDTS";
const LABEL_MAGIC: [u8; 4] = *b"UDLB";
const FORMAT_VERSION: u32 = 1;

/// Environment variable naming a fallback root for relative dataset paths.
pub const DATA_DIR_ENV: &str = "UNIDA_DATA_DIR";

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn fmt_err(path: &Path, offset: u64, message: impl Into<String>) -> DataError {
    DataError::Format {
        file: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

/// Writes `meta.json` and one sample/label file pair per domain.
pub fn save_dataset(root: &Path, dataset: &MultiDomainDataset) -> Result<(), DataError> {
    dataset.validate()?;
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;

    let meta_path = root.join("meta.json");
    let meta_json = serde_json::to_string_pretty(&dataset.meta)
        .map_err(|e| DataError::Meta(format!("cannot serialise meta: {e}")))?;
    fs::write(&meta_path, meta_json + "\n").map_err(|e| io_err(&meta_path, e))?;

    for id in &dataset.meta.domains {
        let ds = dataset.domain(id)?;
        if ds.n > u32::MAX as usize {
            return Err(DataError::Invalid(format!("domain {id}: too many samples for u32")));
        }
        if ds.d > u16::MAX as usize || ds.t > u16::MAX as usize {
            return Err(DataError::Invalid(format!(
                "domain {id}: D/T exceed u16 ({}, {})",
                ds.d, ds.t
            )));
        }

        let mut buf = Vec::with_capacity(16 + ds.samples.len() * 4);
        buf.extend_from_slice(&SAMPLE_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(ds.n as u32).to_le_bytes());
        buf.extend_from_slice(&(ds.d as u16).to_le_bytes());
        buf.extend_from_slice(&(ds.t as u16).to_le_bytes());
        for &v in &ds.samples {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let spath = root.join(format!("{id}.f32"));
        fs::write(&spath, &buf).map_err(|e| io_err(&spath, e))?;

        let mut lbuf = Vec::with_capacity(8 + ds.labels.len() * 4);
        lbuf.extend_from_slice(&LABEL_MAGIC);
        lbuf.extend_from_slice(&(ds.n as u32).to_le_bytes());
        for &l in &ds.labels {
            lbuf.extend_from_slice(&(l as i32).to_le_bytes());
        }
        let lpath = root.join(format!("{id}.lbl"));
        fs::write(&lpath, &lbuf).map_err(|e| io_err(&lpath, e))?;
    }
    Ok(())
}

/// Loads a dataset saved by [`save_dataset`]. A relative `root` that does
/// not exist is retried under `$UNIDA_DATA_DIR` before failing.
pub fn load_dataset(root: &Path) -> Result<MultiDomainDataset, DataError> {
    let root: PathBuf = if root.is_relative() && !root.exists() {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(base) => PathBuf::from(base).join(root),
            None => root.to_path_buf(),
        }
    } else {
        root.to_path_buf()
    };

    let meta_path = root.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| DataError::Meta(format!("{}: {e}", meta_path.display())))?;
    meta.validate()?;

    let mut domains = BTreeMap::new();
    for id in &meta.domains {
        let spath = root.join(format!("{id}.f32"));
        let bytes = fs::read(&spath).map_err(|e| io_err(&spath, e))?;
        if bytes.len() < 16 {
            return Err(fmt_err(&spath, bytes.len() as u64, "truncated header (need 16 bytes)"));
        }
        if bytes[..4] != SAMPLE_MAGIC {
            return Err(fmt_err(&spath, 0, "bad magic, expected UDTS"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fmt_err(&spath, 4, format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        let t = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
        let expected = 16 + n * d * t * 4;
        if bytes.len() != expected {
            return Err(fmt_err(
                &spath,
                bytes.len() as u64,
                format!("expected {expected} bytes for [{n}, {d}, {t}], found {}", bytes.len()),
            ));
        }
        let mut samples = Vec::with_capacity(n * d * t);
        for (k, chunk) in bytes[16..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fmt_err(&spath, (16 + k * 4) as u64, format!("non-finite value {v}")));
            }
            samples.push(f64::from(v));
        }

        let lpath = root.join(format!("{id}.lbl"));
        let lbytes = fs::read(&lpath).map_err(|e| io_err(&lpath, e))?;
        if lbytes.len() < 8 {
            return Err(fmt_err(&lpath, lbytes.len() as u64, "truncated header (need 8 bytes)"));
        }
        if lbytes[..4] != LABEL_MAGIC {
            return Err(fmt_err(&lpath, 0, "bad magic, expected UDLB"));
        }
        let ln = u32::from_le_bytes(lbytes[4..8].try_into().unwrap()) as usize;
        if ln != n {
            return Err(fmt_err(
                &lpath,
                4,
                format!("label count {ln} disagrees with {n} samples"),
            ));
        }
        if lbytes.len() != 8 + 4 * n {
            return Err(fmt_err(
                &lpath,
                lbytes.len() as u64,
                format!("expected {} bytes, found {}", 8 + 4 * n, lbytes.len()),
            ));
        }
        let mut labels = Vec::with_capacity(n);
        for (k, chunk) in lbytes[8..].chunks_exact(4).enumerate() {
            let l = i32::from_le_bytes(chunk.try_into().unwrap());
            if l < 0 || l as usize >= meta.n_classes {
                return Err(fmt_err(
                    &lpath,
                    (8 + k * 4) as u64,
                    format!("label {l} outside [0, {})", meta.n_classes),
                ));
            }
            labels.push(i64::from(l));
        }

        let ds = TimeSeriesDataset::new(id.clone(), n, d, t, samples, labels, meta.n_classes)?;
        domains.insert(id.clone(), ds);
    }

    let dataset = MultiDomainDataset { meta, domains };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> MultiDomainDataset {
        generate_synthetic(&SyntheticSpec {
            n_domains: 2,
            n_classes: 3,
            samples_per_class: 4,
            n_channels: 2,
            seq_len: 16,
            seed: 3,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = std::env::temp_dir().join(format!("udts-io-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let ds = tiny();
        save_dataset(&dir, &ds).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        let dir2 = dir.join("second");
        save_dataset(&dir2, &loaded).unwrap();
        for name in ["meta.json", "d0.f32", "d0.lbl", "d1.f32", "d1.lbl"] {
            let a = fs::read(dir.join(name)).unwrap();
            let b = fs::read(dir2.join(name)).unwrap();
            assert_eq!(a, b, "{name} changed across a save/load/save cycle");
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn truncated_sample_file_is_a_format_error() {
        let dir = std::env::temp_dir().join(format!("udts-trunc-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        save_dataset(&dir, &tiny()).unwrap();
        let path = dir.join("d0.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_dataset(&dir) {
            Err(DataError::Format { file, .. }) => assert!(file.ends_with("d0.f32")),
            other => panic!("expected format error, got {other:?}"),
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn corrupt_magic_is_a_format_error_at_offset_zero() {
        let dir = std::env::temp_dir().join(format!("udts-magic-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        save_dataset(&dir, &tiny()).unwrap();
        let path = dir.join("d1.lbl");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        match load_dataset(&dir) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn out_of_range_label_is_rejected_with_offset() {
        let dir = std::env::temp_dir().join(format!("udts-label-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        save_dataset(&dir, &tiny()).unwrap();
        let path = dir.join("d0.lbl");
        let mut bytes = fs::read(&path).unwrap();
        // Overwrite the second label (offset 12) with class 9 of 3.
        bytes[12..16].copy_from_slice(&9i32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match load_dataset(&dir) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected format error, got {other:?}"),
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn missing_domain_file_is_an_io_error() {
        let dir = std::env::temp_dir().join(format!("udts-missing-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        save_dataset(&dir, &tiny()).unwrap();
        fs::remove_file(dir.join("d1.f32")).unwrap();
        assert!(matches!(load_dataset(&dir), Err(DataError::Io { .. })));
        let _ = fs::remove_dir_all(&dir);
    }
}
