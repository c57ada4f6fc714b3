//! Canonical on-disk volume format ("AVOL"): a JSON sidecar `<name>.json`
//! plus a little-endian raw payload `<name>.raw`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelMap, Volume3D};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct AvolHeader {
    dims: [usize; 3],
    spacing: [f32; 3],
    dtype: String,
    order: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    registry: Option<BTreeMap<u32, String>>,
}

fn stem_of(path: &Path) -> PathBuf {
    if path.extension().map(|e| e == "json" || e == "raw").unwrap_or(false) {
        path.with_extension("")
    } else {
        path.to_path_buf()
    }
}

fn read_header(json_path: &Path) -> Result<AvolHeader> {
    let text = fs::read_to_string(json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let header: AvolHeader = serde_json::from_str(&text).map_err(|e| {
        Error::format(json_path.display().to_string(), e.column() as u64, e.to_string())
    })?;
    if header.order != "x-fastest" {
        return Err(Error::format(
            json_path.display().to_string(),
            0,
            format!("unsupported order {:?}", header.order),
        ));
    }
    Ok(header)
}

fn read_payload(raw_path: &Path, expected_bytes: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(raw_path).map_err(|e| Error::io(raw_path.display().to_string(), e))?;
    if bytes.len() != expected_bytes {
        return Err(Error::format(
            raw_path.display().to_string(),
            bytes.len().min(expected_bytes) as u64,
            format!("payload is {} bytes, expected {}", bytes.len(), expected_bytes),
        ));
    }
    Ok(bytes)
}

pub fn store_volume(v: &Volume3D, path: &Path) -> Result<()> {
    let stem = stem_of(path);
    let header = AvolHeader {
        dims: [v.dims.0, v.dims.1, v.dims.2],
        spacing: [v.spacing.0, v.spacing.1, v.spacing.2],
        dtype: "f32".into(),
        order: "x-fastest".into(),
        registry: None,
    };
    write_pair(&stem, &header, v.data.iter().flat_map(|x| x.to_le_bytes()).collect())
}

pub fn store_label_map(lm: &LabelMap, path: &Path) -> Result<()> {
    let stem = stem_of(path);
    let header = AvolHeader {
        dims: [lm.dims.0, lm.dims.1, lm.dims.2],
        spacing: [lm.spacing.0, lm.spacing.1, lm.spacing.2],
        dtype: "u32".into(),
        order: "x-fastest".into(),
        registry: Some(lm.registry.clone()),
    };
    write_pair(&stem, &header, lm.labels.iter().flat_map(|x| x.to_le_bytes()).collect())
}

fn write_pair(stem: &Path, header: &AvolHeader, payload: Vec<u8>) -> Result<()> {
    let json_path = stem.with_extension("json");
    let raw_path = stem.with_extension("raw");
    let text = serde_json::to_string_pretty(header)
        .map_err(|e| Error::format(json_path.display().to_string(), 0, e.to_string()))?;
    fs::write(&json_path, text).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(raw_path.display().to_string(), e))?;
    Ok(())
}

/// Load a volume from an AVOL pair, or from a `.nii` file when the path has
/// that extension (read-only import).
pub fn load_volume(path: &Path) -> Result<Volume3D> {
    if path.extension().map(|e| e == "nii").unwrap_or(false) {
        return super::nifti::load_nifti(path);
    }
    let stem = stem_of(path);
    let json_path = stem.with_extension("json");
    let header = read_header(&json_path)?;
    if header.dtype != "f32" {
        return Err(Error::UnsupportedDtype(format!(
            "expected f32 volume, found {:?}",
            header.dtype
        )));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let raw_path = stem.with_extension("raw");
    let bytes = read_payload(&raw_path, n * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        (header.spacing[0], header.spacing[1], header.spacing[2]),
        data,
    )
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let stem = stem_of(path);
    let json_path = stem.with_extension("json");
    let header = read_header(&json_path)?;
    if header.dtype != "u32" {
        return Err(Error::UnsupportedDtype(format!(
            "expected u32 label map, found {:?}",
            header.dtype
        )));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let raw_path = stem.with_extension("raw");
    let bytes = read_payload(&raw_path, n * 4)?;
    let labels = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    LabelMap::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        (header.spacing[0], header.spacing[1], header.spacing[2]),
        labels,
        header.registry.unwrap_or_default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("aga3d_io_{name}_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = Rng::new(5);
        let data: Vec<f32> = (0..512).map(|_| rng.uniform(-10.0, 10.0) as f32).collect();
        let v = Volume3D::new((8, 8, 8), (1.0, 0.5, 2.0), data).unwrap();
        let dir = tmp_dir("roundtrip");
        let path = dir.join("vol");
        store_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(v.dims, back.dims);
        assert_eq!(v.spacing, back.spacing);
        assert!(v.data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let v = Volume3D::filled((4, 4, 4), (1.0, 1.0, 1.0), 1.0);
        let dir = tmp_dir("truncated");
        let path = dir.join("vol");
        store_volume(&v, &path).unwrap();
        let raw = path.with_extension("raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 8]).unwrap();
        match load_volume(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn label_map_round_trip_preserves_registry() {
        let mut registry = BTreeMap::new();
        registry.insert(3, "hippocampus".to_string());
        registry.insert(7, "thalamus".to_string());
        let lm = LabelMap::new(
            (2, 2, 1),
            (1.0, 1.0, 1.0),
            vec![0, 3, 7, 3],
            registry.clone(),
        )
        .unwrap();
        let dir = tmp_dir("labels");
        let path = dir.join("atlas");
        store_label_map(&lm, &path).unwrap();
        let back = load_label_map(&path).unwrap();
        assert_eq!(back.labels, lm.labels);
        assert_eq!(back.registry, registry);
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let mut registry = BTreeMap::new();
        registry.insert(1, "a".to_string());
        let lm = LabelMap::new((1, 1, 1), (1.0, 1.0, 1.0), vec![1], registry).unwrap();
        let dir = tmp_dir("dtype");
        let path = dir.join("atlas");
        store_label_map(&lm, &path).unwrap();
        match load_volume(&path) {
            Err(Error::UnsupportedDtype(_)) => {}
            other => panic!("expected dtype error, got {other:?}"),
        }
    }
}
