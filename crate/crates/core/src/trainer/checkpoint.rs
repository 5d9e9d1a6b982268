//! Checkpoint bundles: four parameter sets, optimizer moments, epoch index,
//! seed and configuration, written as a manifest + raw payloads. Reload is
//! bit-exact and save -> load -> save reproduces identical bytes.

use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::archive::{PayloadReader, PayloadWriter, TensorRecord};
use crate::model::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::adam::Adam;
use crate::nn::ParamSet;

use super::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const FORMAT_VERSION: u32 = 1;

/// Architecture-shape digest: any difference means parameter tensors cannot
/// be exchanged between the two configurations.
pub fn config_digest(gen: &GeneratorConfig, disc: &DiscriminatorConfig) -> String {
    #[derive(Serialize)]
    struct ArchShape<'a> {
        base_channels: usize,
        n_resnet_blocks: usize,
        n_content: usize,
        disc_base_channels: usize,
        dtype: &'a str,
    }
    let shape = ArchShape {
        base_channels: gen.base_channels,
        n_resnet_blocks: gen.n_resnet_blocks,
        n_content: gen.n_content,
        disc_base_channels: disc.base_channels,
        dtype: "f64",
    };
    let json = serde_json::to_string(&shape).expect("digest serialization");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamMeta {
    pub t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_digest: String,
    pub epoch: u32,
    pub master_seed: u64,
    pub train: TrainConfig,
    /// Adam step counters in network order: g_ab, g_ba, d_a, d_b.
    pub adam: Vec<AdamMeta>,
    pub tensors: Vec<TensorRecord>,
    pub moment_tensors: Vec<TensorRecord>,
}

/// Everything needed to continue training exactly where it stopped.
pub struct CheckpointBundle {
    pub manifest: Manifest,
    pub g_ab: Generator,
    pub g_ba: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
    pub opt_g_ab: Adam,
    pub opt_g_ba: Adam,
    pub opt_d_a: Adam,
    pub opt_d_b: Adam,
}

pub(super) const NET_PREFIXES: [&str; 4] = ["g_ab", "g_ba", "d_a", "d_b"];

fn push_moments(w: &mut PayloadWriter, prefix: &str, opt: &Adam) {
    for (name, m, v) in &opt.moments {
        w.push(&format!("{prefix}.m.{name}"), m.shape(), m.iter().copied());
        w.push(&format!("{prefix}.v.{name}"), v.shape(), v.iter().copied());
    }
}

fn load_moments(r: &PayloadReader, prefix: &str, net: &dyn ParamSet, opt: &mut Adam) -> Result<()> {
    opt.moments.clear();
    let mut err = None;
    net.for_each_param(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let load = |kind: &str| -> Result<ArrayD<f64>> {
            let (shape, values) = r.read(&format!("{prefix}.{kind}.{name}"))?;
            if shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "moment {prefix}.{kind}.{name} shape mismatch"
                )));
            }
            ArrayD::from_shape_vec(shape, values)
                .map_err(|e| Error::Checkpoint(format!("moment {name}: {e}")))
        };
        match (load("m"), load("v")) {
            (Ok(m), Ok(v)) => opt.moments.push((name.to_string(), m, v)),
            (Err(e), _) | (_, Err(e)) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Writes `dir/manifest.json`, `dir/params.bin` and `dir/optim.bin`.
pub fn save_checkpoint(dir: &Path, bundle: &CheckpointBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut params = PayloadWriter::new();
    params.push_params(NET_PREFIXES[0], &bundle.g_ab);
    params.push_params(NET_PREFIXES[1], &bundle.g_ba);
    params.push_params(NET_PREFIXES[2], &bundle.d_a);
    params.push_params(NET_PREFIXES[3], &bundle.d_b);
    params.write_to(&dir.join(PARAMS_FILE))?;

    let mut moments = PayloadWriter::new();
    push_moments(&mut moments, NET_PREFIXES[0], &bundle.opt_g_ab);
    push_moments(&mut moments, NET_PREFIXES[1], &bundle.opt_g_ba);
    push_moments(&mut moments, NET_PREFIXES[2], &bundle.opt_d_a);
    push_moments(&mut moments, NET_PREFIXES[3], &bundle.opt_d_b);
    moments.write_to(&dir.join(OPTIM_FILE))?;

    let manifest = Manifest {
        tensors: params.records,
        moment_tensors: moments.records,
        ..bundle.manifest.clone()
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let tmp = manifest_path.with_extension("json.tmp");
    std::fs::write(&tmp, json.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Loads a checkpoint directory back into a full bundle.
pub fn load_checkpoint(dir: &Path) -> Result<CheckpointBundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    let expected = config_digest(&manifest.train.generator, &manifest.train.discriminator);
    if expected != manifest.config_digest {
        return Err(Error::Checkpoint(format!(
            "config digest mismatch: stored {}, recomputed {expected}",
            manifest.config_digest
        )));
    }
    if manifest.adam.len() != 4 {
        return Err(Error::Checkpoint("expected 4 Adam states".into()));
    }

    let gen_cfg = &manifest.train.generator;
    let disc_cfg = &manifest.train.discriminator;
    let mut g_ab = Generator::new(gen_cfg)?;
    let mut g_ba = Generator::new(gen_cfg)?;
    let mut d_a = Discriminator::new(disc_cfg);
    let mut d_b = Discriminator::new(disc_cfg);

    let params = PayloadReader::open(&dir.join(PARAMS_FILE), manifest.tensors.clone())?;
    params.load_params(NET_PREFIXES[0], &mut g_ab)?;
    params.load_params(NET_PREFIXES[1], &mut g_ba)?;
    params.load_params(NET_PREFIXES[2], &mut d_a)?;
    params.load_params(NET_PREFIXES[3], &mut d_b)?;

    let tc = &manifest.train;
    let mut opts = [
        Adam::new(tc.learning_rate, tc.adam_beta1, tc.adam_beta2),
        Adam::new(tc.learning_rate, tc.adam_beta1, tc.adam_beta2),
        Adam::new(tc.learning_rate, tc.adam_beta1, tc.adam_beta2),
        Adam::new(tc.learning_rate, tc.adam_beta1, tc.adam_beta2),
    ];
    let moments = PayloadReader::open(&dir.join(OPTIM_FILE), manifest.moment_tensors.clone())?;
    load_moments(&moments, NET_PREFIXES[0], &g_ab, &mut opts[0])?;
    load_moments(&moments, NET_PREFIXES[1], &g_ba, &mut opts[1])?;
    load_moments(&moments, NET_PREFIXES[2], &d_a, &mut opts[2])?;
    load_moments(&moments, NET_PREFIXES[3], &d_b, &mut opts[3])?;
    for (opt, meta) in opts.iter_mut().zip(manifest.adam.iter()) {
        opt.t = meta.t;
    }
    let [opt_g_ab, opt_g_ba, opt_d_a, opt_d_b] = opts;

    Ok(CheckpointBundle {
        manifest,
        g_ab,
        g_ba,
        d_a,
        d_b,
        opt_g_ab,
        opt_g_ba,
        opt_d_a,
        opt_d_b,
    })
}

/// Loads only the four parameter sets from a checkpoint, for warm starts.
pub fn load_params_only(
    dir: &Path,
    g_ab: &mut Generator,
    g_ba: &mut Generator,
    d_a: &mut Discriminator,
    d_b: &mut Discriminator,
    expected_digest: &str,
) -> Result<()> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.config_digest != expected_digest {
        return Err(Error::Checkpoint(format!(
            "warm-start checkpoint architecture {} incompatible with configured {expected_digest}",
            manifest.config_digest
        )));
    }
    let params = PayloadReader::open(&dir.join(PARAMS_FILE), manifest.tensors)?;
    params.load_params(NET_PREFIXES[0], g_ab)?;
    params.load_params(NET_PREFIXES[1], g_ba)?;
    params.load_params(NET_PREFIXES[2], d_a)?;
    params.load_params(NET_PREFIXES[3], d_b)?;
    Ok(())
}

/// Enumerates `epoch_<n>` checkpoint directories under `out_dir`, ascending.
pub fn list_epoch_dirs(out_dir: &Path) -> Vec<(u32, PathBuf)> {
    let mut out = Vec::new();
    if let Ok(rd) = std::fs::read_dir(out_dir) {
        for e in rd.flatten() {
            let p = e.path();
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                if let Some(num) = name.strip_prefix("epoch_") {
                    if let Ok(n) = num.parse::<u32>() {
                        out.push((n, p));
                    }
                }
            }
        }
    }
    out.sort();
    out
}
