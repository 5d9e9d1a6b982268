//! Parameter archive: a JSON manifest describing named tensors plus a raw
//! little-endian f64 payload file. Reload is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const DTYPE: &str = "f64";

/// One tensor's slot within a payload file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset of the first element within the payload.
    pub offset: u64,
}

impl TensorRecord {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Writer that appends named tensors to a payload buffer and records them.
#[derive(Default)]
pub struct PayloadWriter {
    pub records: Vec<TensorRecord>,
    pub bytes: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: impl Iterator<Item = f64>) {
        let offset = self.bytes.len() as u64;
        let mut count = 0usize;
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
            count += 1;
        }
        debug_assert_eq!(count, shape.iter().product::<usize>());
        self.records.push(TensorRecord {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: DTYPE.to_string(),
            offset,
        });
    }

    /// Appends every parameter of `net`, names prefixed with `prefix.`.
    pub fn push_params(&mut self, prefix: &str, net: &dyn ParamSet) {
        net.for_each_param(&mut |name, p| {
            let shape = p.value.shape().to_vec();
            self.push(&format!("{prefix}.{name}"), &shape, p.value.iter().copied());
        });
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Reader over a payload file plus its records.
pub struct PayloadReader {
    records: Vec<TensorRecord>,
    bytes: Vec<u8>,
}

impl PayloadReader {
    pub fn open(path: &Path, records: Vec<TensorRecord>) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Ok(Self { records, bytes })
    }

    pub fn read(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let rec = self
            .records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from archive")))?;
        if rec.dtype != DTYPE {
            return Err(Error::Checkpoint(format!("tensor {name} has dtype {}", rec.dtype)));
        }
        let n = rec.num_elements();
        let start = rec.offset as usize;
        let end = start + n * 8;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!("tensor {name} payload out of bounds")));
        }
        let mut out = Vec::with_capacity(n);
        for chunk in self.bytes[start..end].chunks_exact(8) {
            out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok((rec.shape.clone(), out))
    }

    /// Loads every parameter of `net` from records prefixed with `prefix.`.
    /// Shape mismatches are errors so an incompatible archive never half-loads.
    pub fn load_params(&self, prefix: &str, net: &mut dyn ParamSet) -> Result<()> {
        let mut err = None;
        net.for_each_param_mut(&mut |name, mut p| {
            if err.is_some() {
                return;
            }
            let full = format!("{prefix}.{name}");
            match self.read(&full) {
                Ok((shape, values)) => {
                    if shape != p.value.shape() {
                        err = Some(Error::Checkpoint(format!(
                            "tensor {full}: archive shape {:?} != model shape {:?}",
                            shape,
                            p.value.shape()
                        )));
                        return;
                    }
                    for (dst, src) in p.value.iter_mut().zip(values.iter()) {
                        *dst = *src;
                    }
                }
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use tempfile::tempdir;

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            input_size: 16,
            base_channels: 4,
            n_resnet_blocks: 1,
            n_content: 2,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut gen = Generator::new(&tiny_cfg()).unwrap();
        gen.init(&mut ChaCha20Rng::seed_from_u64(1));
        let mut disc = Discriminator::new(&DiscriminatorConfig { base_channels: 4 });
        disc.init(&mut ChaCha20Rng::seed_from_u64(2));

        let dir = tempdir().unwrap();
        let bin = dir.path().join("params.bin");
        let mut w = PayloadWriter::new();
        w.push_params("gen", &gen);
        w.push_params("disc", &disc);
        w.write_to(&bin).unwrap();

        let mut gen2 = Generator::new(&tiny_cfg()).unwrap();
        let mut disc2 = Discriminator::new(&DiscriminatorConfig { base_channels: 4 });
        let r = PayloadReader::open(&bin, w.records.clone()).unwrap();
        r.load_params("gen", &mut gen2).unwrap();
        r.load_params("disc", &mut disc2).unwrap();

        let mut w2 = PayloadWriter::new();
        w2.push_params("gen", &gen2);
        w2.push_params("disc", &disc2);
        assert_eq!(w.bytes, w2.bytes);
        assert_eq!(w.records, w2.records);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut gen = Generator::new(&tiny_cfg()).unwrap();
        gen.init(&mut ChaCha20Rng::seed_from_u64(1));
        let dir = tempdir().unwrap();
        let bin = dir.path().join("params.bin");
        let mut w = PayloadWriter::new();
        w.push_params("gen", &gen);
        w.write_to(&bin).unwrap();

        // Same layer names, different n_content -> different tensor shapes.
        let other = GeneratorConfig { n_content: 3, ..tiny_cfg() };
        let mut gen3 = Generator::new(&other).unwrap();
        let r = PayloadReader::open(&bin, w.records).unwrap();
        assert!(r.load_params("gen", &mut gen3).is_err());
    }
}
