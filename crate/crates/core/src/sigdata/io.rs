//! The `.sigds` dataset directory format: `manifest.json` plus raw
//! little-endian payloads (`iq.bin` f32, `labels.bin` u16, `snr.bin` i16).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, SignalFrame};
use crate::error::{Error, Result};

const FORMAT_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    num_frames: usize,
    frame_len: usize,
    class_names: Vec<String>,
    snr_levels: Vec<i16>,
    dtype: String,
    files: BTreeMap<String, String>,
    #[serde(default)]
    provenance: String,
}

/// Write a dataset as a `.sigds` directory.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    let mut files = BTreeMap::new();
    files.insert("iq".to_string(), "iq.bin".to_string());
    files.insert("labels".to_string(), "labels.bin".to_string());
    files.insert("snr".to_string(), "snr.bin".to_string());
    let manifest = Manifest {
        version: FORMAT_VERSION.to_string(),
        num_frames: ds.len(),
        frame_len: ds.frame_len(),
        class_names: ds.class_names().to_vec(),
        snr_levels: ds.snr_levels(),
        dtype: "f32le".to_string(),
        files,
        provenance: ds.provenance().to_string(),
    };
    fs::write(path.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;

    let mut iq = Vec::with_capacity(ds.len() * 2 * ds.frame_len() * 4);
    let mut labels = Vec::with_capacity(ds.len() * 2);
    let mut snr = Vec::with_capacity(ds.len() * 2);
    for f in ds.frames() {
        for &v in f.iq.iter() {
            iq.extend_from_slice(&v.to_le_bytes());
        }
        labels.extend_from_slice(&f.label.to_le_bytes());
        snr.extend_from_slice(&f.snr_db.to_le_bytes());
    }
    fs::write(path.join("iq.bin"), iq)?;
    fs::write(path.join("labels.bin"), labels)?;
    fs::write(path.join("snr.bin"), snr)?;
    Ok(())
}

/// Load a `.sigds` directory, verifying version and payload sizes.
pub fn load(path: &Path) -> Result<Dataset> {
    let manifest_bytes = fs::read(path.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported .sigds version `{}` (expected `{FORMAT_VERSION}`)",
            manifest.version
        )));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype `{}`", manifest.dtype)));
    }
    let file = |key: &str| -> Result<String> {
        manifest
            .files
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Format(format!("manifest missing file entry `{key}`")))
    };
    let iq_bytes = fs::read(path.join(file("iq")?))?;
    let label_bytes = fs::read(path.join(file("labels")?))?;
    let snr_bytes = fs::read(path.join(file("snr")?))?;

    let expect_iq = manifest.num_frames * 2 * manifest.frame_len * 4;
    if iq_bytes.len() != expect_iq {
        return Err(Error::Format(format!(
            "iq.bin holds {} bytes but manifest implies {expect_iq}",
            iq_bytes.len()
        )));
    }
    if label_bytes.len() != manifest.num_frames * 2 {
        return Err(Error::Format(format!(
            "labels.bin holds {} bytes but manifest implies {}",
            label_bytes.len(),
            manifest.num_frames * 2
        )));
    }
    if snr_bytes.len() != manifest.num_frames * 2 {
        return Err(Error::Format(format!(
            "snr.bin holds {} bytes but manifest implies {}",
            snr_bytes.len(),
            manifest.num_frames * 2
        )));
    }

    let mut ds = Dataset::new(manifest.class_names, manifest.frame_len, manifest.provenance);
    let n = manifest.frame_len;
    for i in 0..manifest.num_frames {
        let mut iq = Array2::<f32>::zeros((2, n));
        let base = i * 2 * n * 4;
        for (j, v) in iq.iter_mut().enumerate() {
            let o = base + j * 4;
            *v = f32::from_le_bytes([iq_bytes[o], iq_bytes[o + 1], iq_bytes[o + 2], iq_bytes[o + 3]]);
        }
        let label = u16::from_le_bytes([label_bytes[2 * i], label_bytes[2 * i + 1]]);
        let snr_db = i16::from_le_bytes([snr_bytes[2 * i], snr_bytes[2 * i + 1]]);
        ds.push(SignalFrame { iq, label, snr_db })?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigdata::{generate_dataset, GenConfig, Modulation};

    fn sample_dataset() -> Dataset {
        generate_dataset(
            &[Modulation::Bpsk, Modulation::Qpsk],
            3,
            &[0, 10],
            32,
            1,
            &GenConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.sigds");
        save(&ds, &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.class_names(), ds.class_names());
        for i in 0..ds.len() {
            assert_eq!(ds.iq(i), back.iq(i));
            assert_eq!(ds.label(i), back.label(i));
            assert_eq!(ds.snr(i), back.snr(i));
        }
    }

    #[test]
    fn size_disagreement_is_reported() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.sigds");
        save(&ds, &p).unwrap();
        // claim one more frame than the payload holds
        let manifest = std::fs::read_to_string(p.join("manifest.json")).unwrap();
        let bumped = manifest.replace("\"num_frames\": 12", "\"num_frames\": 13");
        assert_ne!(manifest, bumped);
        std::fs::write(p.join("manifest.json"), bumped).unwrap();
        match load(&p) {
            Err(Error::Format(msg)) => assert!(msg.contains("bytes")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.sigds");
        save(&ds, &p).unwrap();
        let manifest = std::fs::read_to_string(p.join("manifest.json")).unwrap();
        std::fs::write(p.join("manifest.json"), manifest.replace("\"version\": \"1\"", "\"version\": \"99\"")).unwrap();
        match load(&p) {
            Err(Error::Format(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.sigds");
        save(&ds, &p).unwrap();
        let iq = std::fs::read(p.join("iq.bin")).unwrap();
        std::fs::write(p.join("iq.bin"), &iq[..iq.len() - 8]).unwrap();
        assert!(matches!(load(&p), Err(Error::Format(_))));
    }
}
