//! Named-parameter checkpoints: a `manifest.json` with module specs and
//! parameter shapes plus one raw f32 little-endian blob per parameter
//! group. Round-trips reproduce forward behavior bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

const VERSION: &str = "1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: String,
    /// Free-form spec blob per module (encoder specs, agent dims, ...).
    modules: BTreeMap<String, serde_json::Value>,
    params: BTreeMap<String, ManifestEntry>,
}

/// In-memory checkpoint; serializable to a directory.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    specs: BTreeMap<String, serde_json::Value>,
    blobs: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a module's spec for later validation / reconstruction.
    pub fn put_spec<T: Serialize>(&mut self, module: &str, spec: &T) -> Result<()> {
        self.specs.insert(module.to_string(), serde_json::to_value(spec)?);
        Ok(())
    }

    pub fn spec<T: for<'de> Deserialize<'de>>(&self, module: &str) -> Result<T> {
        let v = self
            .specs
            .get(module)
            .ok_or_else(|| Error::Checkpoint(format!("no spec for module `{module}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn has_module(&self, module: &str) -> bool {
        self.specs.contains_key(module)
    }

    pub fn module_names(&self) -> Vec<String> {
        self.specs.keys().cloned().collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.blobs.keys().cloned().collect()
    }

    /// Capture every parameter of `set` under `prefix.`.
    pub fn capture(&mut self, prefix: &str, set: &mut dyn ParamSet) {
        set.visit(&mut |name, p| {
            let full = format!("{prefix}.{name}");
            let shape = p.w.shape().to_vec();
            let data = p.w.iter().copied().collect();
            self.blobs.insert(full, (shape, data));
        });
    }

    /// Write captured values back into `set`, checking names and shapes.
    pub fn restore(&self, prefix: &str, set: &mut dyn ParamSet) -> Result<()> {
        let mut missing = Vec::new();
        set.visit(&mut |name, p| {
            let full = format!("{prefix}.{name}");
            match self.blobs.get(&full) {
                None => missing.push(format!("missing param `{full}`")),
                Some((shape, data)) => {
                    if shape != p.w.shape() {
                        missing.push(format!(
                            "shape mismatch for `{full}`: checkpoint {shape:?} vs model {:?}",
                            p.w.shape()
                        ));
                    } else {
                        for (dst, &src) in p.w.iter_mut().zip(data.iter()) {
                            *dst = src;
                        }
                    }
                }
            }
        });
        if let Some(first) = missing.into_iter().next() {
            return Err(Error::Checkpoint(first));
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("params"))?;
        let mut params = BTreeMap::new();
        for (name, (shape, data)) in &self.blobs {
            let file = format!("params/{}.bin", name.replace(['/', ':'], "."));
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            params.insert(name.clone(), ManifestEntry { shape: shape.clone(), file });
        }
        let manifest = Manifest { version: VERSION.into(), modules: self.specs.clone(), params };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version `{}`", manifest.version)));
        }
        let mut blobs = BTreeMap::new();
        for (name, entry) in manifest.params {
            let bytes = fs::read(dir.join(&entry.file))?;
            let expected: usize = entry.shape.iter().product::<usize>() * 4;
            if bytes.len() != expected {
                return Err(Error::Checkpoint(format!(
                    "blob `{}` holds {} bytes, manifest implies {expected}",
                    entry.file,
                    bytes.len()
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blobs.insert(name, (entry.shape, data));
        }
        Ok(Self { specs: manifest.modules, blobs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, Param, ParamSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Tiny {
        l: Dense,
    }

    impl ParamSet for Tiny {
        fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            f("l.w", &mut self.l.w);
            f("l.b", &mut self.l.b);
        }
    }

    #[test]
    fn capture_restore_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Tiny { l: Dense::new(3, 2, &mut rng) };
        let before = m.snapshot();
        let mut ck = Checkpoint::new();
        ck.capture("tiny", &mut m);
        m.l.w.w.fill(0.0);
        ck.restore("tiny", &mut m).unwrap();
        assert_eq!(m.snapshot(), before);
    }

    #[test]
    fn disk_round_trip_preserves_blobs_and_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Tiny { l: Dense::new(4, 4, &mut rng) };
        let mut ck = Checkpoint::new();
        ck.put_spec("tiny", &serde_json::json!({"width": 4})).unwrap();
        ck.capture("tiny", &mut m);
        let dir = tempfile::tempdir().unwrap();
        ck.save_dir(dir.path()).unwrap();
        let back = Checkpoint::load_dir(dir.path()).unwrap();
        let before = m.snapshot();
        m.l.w.w.fill(7.0);
        back.restore("tiny", &mut m).unwrap();
        assert_eq!(m.snapshot(), before);
        assert!(back.has_module("tiny"));
    }

    #[test]
    fn wrong_shape_restore_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut small = Tiny { l: Dense::new(2, 2, &mut rng) };
        let mut big = Tiny { l: Dense::new(5, 3, &mut rng) };
        let mut ck = Checkpoint::new();
        ck.capture("m", &mut small);
        match ck.restore("m", &mut big) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("shape mismatch")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }
}
