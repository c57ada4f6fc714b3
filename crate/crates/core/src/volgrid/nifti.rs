//! Minimal single-file NIfTI-1 import: little-endian, magic "n+1",
//! float32 / int16 / uint8 payloads, first three dims only.

use std::fs;
use std::path::Path;

use super::Volume3D;
use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn le_i32(bytes: &[u8], offset: usize) -> i32 {
    i32::from_le_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

fn le_i16(bytes: &[u8], offset: usize) -> i16 {
    i16::from_le_bytes([bytes[offset], bytes[offset + 1]])
}

fn le_f32(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

pub fn load_nifti(path: &Path) -> Result<Volume3D> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            name,
            bytes.len() as u64,
            format!("file is {} bytes, header needs {}", bytes.len(), HEADER_LEN),
        ));
    }

    let sizeof_hdr = le_i32(&bytes, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(Error::format(
            name,
            0,
            format!("sizeof_hdr = {sizeof_hdr}, expected 348 (big-endian files are not supported)"),
        ));
    }

    // magic at 344: "n+1\0" for single-file images
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(name, 344, "magic is not \"n+1\"".to_string()));
    }

    let ndim = le_i16(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(name, 40, format!("dim[0] = {ndim} out of range 1..7")));
    }
    let mut dims = [1usize; 3];
    for (axis, d) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let raw = le_i16(&bytes, 42 + 2 * axis);
        if raw < 1 {
            return Err(Error::format(
                name,
                (42 + 2 * axis) as u64,
                format!("dim[{}] = {raw} must be >= 1", axis + 1),
            ));
        }
        *d = raw as usize;
    }
    for axis in 3..ndim as usize {
        let raw = le_i16(&bytes, 42 + 2 * axis);
        if raw > 1 {
            return Err(Error::format(
                name,
                (42 + 2 * axis) as u64,
                format!("dim[{}] = {raw}: only 3D images are supported", axis + 1),
            ));
        }
    }

    let datatype = le_i16(&bytes, 70);
    let bitpix = le_i16(&bytes, 72);
    let elem_size = match datatype {
        DT_UINT8 => 1usize,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDtype(format!("nifti datatype code {other}"))),
    };
    if bitpix as usize != elem_size * 8 {
        return Err(Error::format(
            name,
            72,
            format!("bitpix {bitpix} inconsistent with datatype {datatype}"),
        ));
    }

    let mut spacing = [1.0f32; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        let p = le_f32(&bytes, 76 + 4 * (axis + 1));
        if !p.is_finite() || p <= 0.0 {
            return Err(Error::format(
                name,
                (76 + 4 * (axis + 1)) as u64,
                format!("pixdim[{}] = {p} must be positive", axis + 1),
            ));
        }
        *s = p;
    }

    let vox_offset = le_f32(&bytes, 108);
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 {
        return Err(Error::format(name, 108, format!("vox_offset = {vox_offset} is invalid")));
    }
    let start = vox_offset as usize;

    let n = dims[0] * dims[1] * dims[2];
    let need = start + n * elem_size;
    if bytes.len() < need {
        return Err(Error::format(
            name,
            bytes.len() as u64,
            format!("payload truncated: file has {} bytes, needs {need}", bytes.len()),
        ));
    }

    let payload = &bytes[start..need];
    let data: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f32).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => unreachable!(),
    };

    Volume3D::new((dims[0], dims[1], dims[2]), (spacing[0], spacing[1], spacing[2]), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Byte-level writer used as the oracle for the parser.
    pub fn write_minimal_nifti(
        dims: [i16; 3],
        pixdim: [f32; 3],
        datatype: i16,
        payload: &[u8],
    ) -> Vec<u8> {
        let mut h = vec![0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes());
        for (i, d) in dims.iter().enumerate() {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        let bitpix: i16 = match datatype {
            DT_UINT8 => 8,
            DT_INT16 => 16,
            DT_FLOAT32 => 32,
            _ => 0,
        };
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
        for (i, p) in pixdim.iter().enumerate() {
            h[80 + 4 * i..84 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&[0u8; 4]); // pad to vox_offset 352
        h.extend_from_slice(payload);
        h
    }

    fn write_tmp(name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("aga3d_nifti_{name}_{}.nii", std::process::id()));
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn parses_minimal_float32_file() {
        let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = write_minimal_nifti([4, 3, 2], [0.9, 1.1, 2.5], DT_FLOAT32, &payload);
        let path = write_tmp("f32", &bytes);
        let v = load_nifti(&path).unwrap();
        assert_eq!(v.dims, (4, 3, 2));
        assert!((v.spacing.0 - 0.9).abs() < 1e-6);
        assert!((v.spacing.1 - 1.1).abs() < 1e-6);
        assert!((v.spacing.2 - 2.5).abs() < 1e-6);
        assert_eq!(v.data, values);
    }

    #[test]
    fn parses_int16_payload() {
        let values: Vec<i16> = vec![-5, 0, 7, 1000];
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = write_minimal_nifti([4, 1, 1], [1.0, 1.0, 1.0], DT_INT16, &payload);
        let path = write_tmp("i16", &bytes);
        let v = load_nifti(&path).unwrap();
        assert_eq!(v.data, vec![-5.0, 0.0, 7.0, 1000.0]);
    }

    #[test]
    fn bad_magic_names_offset() {
        let mut bytes = write_minimal_nifti([2, 1, 1], [1.0, 1.0, 1.0], DT_FLOAT32, &[0u8; 8]);
        bytes[344] = b'x';
        let path = write_tmp("magic", &bytes);
        match load_nifti(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 344),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_datatype_is_rejected() {
        let bytes = write_minimal_nifti([2, 1, 1], [1.0, 1.0, 1.0], 64, &[0u8; 16]);
        let path = write_tmp("dtype", &bytes);
        match load_nifti(&path) {
            Err(Error::UnsupportedDtype(_)) => {}
            other => panic!("expected dtype error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = write_minimal_nifti([4, 4, 4], [1.0, 1.0, 1.0], DT_FLOAT32, &[0u8; 10]);
        let path = write_tmp("trunc", &bytes);
        assert!(matches!(load_nifti(&path), Err(Error::Format { .. })));
    }
}
