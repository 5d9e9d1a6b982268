//! Two-direction co-training of the generators and discriminators with a
//! staged schedule, seeded reproducibility, per-epoch checkpoints and
//! sample images.
//!
//! Reproducibility model: every random decision in epoch `e` is drawn from a
//! ChaCha stream derived from `(master_seed, e)`, and the fake pools reset at
//! epoch boundaries. Training state at an epoch boundary is therefore fully
//! captured by (parameters, optimizer moments, master seed, epoch), which is
//! exactly what a checkpoint stores: resuming from epoch `k` replays the same
//! arithmetic as an uninterrupted run.

pub mod checkpoint;
pub mod pool;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::UnpairedSet;
use crate::error::{Error, Result};
use crate::image_core::{load_image, load_region_mask, region_mask_path, ImageTensor};
use crate::losses::{
    adversarial_loss_grad, l1_loss_batch, nmc_loss_batch, total_generator_loss, GenLossParts,
    LossWeights,
};
use crate::metrics::emit_grid;
use crate::model::{
    batch_to_image, images_to_batch, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig, NoiseSpec,
};
use crate::nn::adam::Adam;
use crate::nn::ParamSet;

use checkpoint::{
    config_digest, list_epoch_dirs, load_checkpoint, load_params_only, AdamMeta, CheckpointBundle,
    Manifest,
};
use pool::ImagePool;

/// One row of the staged training plan.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleEntry {
    pub epoch_start: u32,
    pub epoch_end: u32,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub noise: bool,
    pub nmc: bool,
    pub dataset_id: String,
}

/// Validates span ordering, contiguity and weight sanity.
pub fn validate_schedule(entries: &[ScheduleEntry]) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::InvalidSchedule("schedule has no entries".into()));
    }
    for (i, e) in entries.iter().enumerate() {
        if e.epoch_start == 0 {
            return Err(Error::InvalidSchedule(format!("entry {i}: epochs are 1-based")));
        }
        if e.epoch_start > e.epoch_end {
            return Err(Error::InvalidSchedule(format!(
                "entry {i}: span {}..{} is empty",
                e.epoch_start, e.epoch_end
            )));
        }
        if e.lambda_a < 0.0 || e.lambda_b < 0.0 {
            return Err(Error::InvalidSchedule(format!("entry {i}: negative lambda")));
        }
        if i > 0 && entries[i - 1].epoch_end + 1 != e.epoch_start {
            return Err(Error::InvalidSchedule(format!(
                "entry {i} starts at {} but the previous entry ends at {}",
                e.epoch_start,
                entries[i - 1].epoch_end
            )));
        }
    }
    Ok(())
}

/// Loads a schedule file: a JSON array of entries.
pub fn load_schedule(path: &Path) -> Result<Vec<ScheduleEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ScheduleEntry> = serde_json::from_str(&text)?;
    validate_schedule(&entries)?;
    Ok(entries)
}

pub fn entry_for_epoch(entries: &[ScheduleEntry], epoch: u32) -> Option<&ScheduleEntry> {
    entries.iter().find(|e| e.epoch_start <= epoch && epoch <= e.epoch_end)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Constant learning rate; no decay.
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda_identity: f64,
    pub lambda_nmc: f64,
    pub pool_capacity: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// When set, only this many most recent epoch checkpoints are kept.
    pub keep_last_checkpoints: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lambda_identity: 0.5,
            lambda_nmc: 10.0,
            pool_capacity: 50,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            keep_last_checkpoints: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.lambda_identity < 0.0 || self.lambda_nmc < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        self.generator.validate()
    }
}

/// Per-iteration loss record, one JSON line each in the training log.
#[derive(Debug, Clone, Serialize)]
pub struct IterationLog {
    pub epoch: u32,
    pub iter: usize,
    pub adv_ab: f64,
    pub adv_ba: f64,
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub idt_a: f64,
    pub idt_b: f64,
    pub nmc: f64,
    pub loss_g: f64,
    pub loss_d_a: f64,
    pub loss_d_b: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub noise: bool,
    pub nmc_enabled: bool,
}

pub struct TrainOutcome {
    pub last_epoch: u32,
    pub checkpoint_dirs: Vec<PathBuf>,
}

/// Inputs of one generator objective evaluation.
pub struct StepInputs<'a> {
    pub real_a: &'a Array4<f64>,
    pub real_b: &'a Array4<f64>,
    /// Region masks paired with `real_a`; `None` disables the NMC term.
    pub regions_a: Option<&'a [Array2<bool>]>,
    pub weights: LossWeights,
    pub noise: NoiseSpec,
    pub noise_seed_base: u64,
}

pub struct GeneratorPass {
    pub parts: GenLossParts,
    pub total: f64,
    pub fake_a: Array4<f64>,
    pub fake_b: Array4<f64>,
}

fn objective_forwards(
    g_ab: &Generator,
    g_ba: &Generator,
    d_a: &Discriminator,
    d_b: &Discriminator,
    inp: &StepInputs<'_>,
) -> Result<ObjectiveGraph> {
    let seed = inp.noise_seed_base;
    let (fake_b, cache_ab1) = g_ab.forward(inp.real_a, &inp.noise, seed);
    let (rec_a, cache_ba1) = g_ba.forward(&fake_b.output, &inp.noise, seed + 1);
    let (fake_a, cache_ba2) = g_ba.forward(inp.real_b, &inp.noise, seed + 2);
    let (rec_b, cache_ab2) = g_ab.forward(&fake_a.output, &inp.noise, seed + 3);
    let idt = if inp.weights.lambda_identity > 0.0 {
        let (idt_a, cache_ab3) = g_ab.forward(inp.real_b, &inp.noise, seed + 4);
        let (idt_b, cache_ba3) = g_ba.forward(inp.real_a, &inp.noise, seed + 5);
        Some((idt_a, cache_ab3, idt_b, cache_ba3))
    } else {
        None
    };
    let (score_fake_b, dcache_b) = d_b.forward(&fake_b.output);
    let (score_fake_a, dcache_a) = d_a.forward(&fake_a.output);

    let (adv_ab, g_score_fb) = adversarial_loss_grad(&score_fake_b, true);
    let (adv_ba, g_score_fa) = adversarial_loss_grad(&score_fake_a, true);
    let (cycle_a, g_rec_a) = l1_loss_batch(&rec_a.output, inp.real_a)?;
    let (cycle_b, g_rec_b) = l1_loss_batch(&rec_b.output, inp.real_b)?;
    let (idt_a_loss, idt_b_loss, g_idt) = match &idt {
        Some((idt_a, _, idt_b, _)) => {
            let (la, ga) = l1_loss_batch(&idt_a.output, inp.real_b)?;
            let (lb, gb) = l1_loss_batch(&idt_b.output, inp.real_a)?;
            (la, lb, Some((ga, gb)))
        }
        None => (0.0, 0.0, None),
    };
    let (nmc, g_nmc) = match inp.regions_a {
        Some(regions) if inp.weights.lambda_nmc > 0.0 => {
            nmc_loss_batch(inp.real_a, &fake_b.output, regions)?
        }
        _ => (0.0, Array4::zeros(inp.real_a.raw_dim())),
    };

    let parts = GenLossParts {
        adv_ab,
        adv_ba,
        cycle_a,
        cycle_b,
        idt_a: idt_a_loss,
        idt_b: idt_b_loss,
        nmc,
    };
    let total = total_generator_loss(&parts, &inp.weights);
    Ok(ObjectiveGraph {
        parts,
        total,
        fake_a: fake_a.output,
        fake_b: fake_b.output,
        cache_ab1,
        cache_ba1,
        cache_ba2,
        cache_ab2,
        idt_caches: idt.map(|(_, c_ab3, _, c_ba3)| (c_ab3, c_ba3)),
        dcache_a,
        dcache_b,
        g_score_fa,
        g_score_fb,
        g_rec_a,
        g_rec_b,
        g_idt,
        g_nmc,
    })
}

struct ObjectiveGraph {
    parts: GenLossParts,
    total: f64,
    fake_a: Array4<f64>,
    fake_b: Array4<f64>,
    cache_ab1: crate::model::GeneratorCache,
    cache_ba1: crate::model::GeneratorCache,
    cache_ba2: crate::model::GeneratorCache,
    cache_ab2: crate::model::GeneratorCache,
    idt_caches: Option<(crate::model::GeneratorCache, crate::model::GeneratorCache)>,
    dcache_a: crate::model::DiscriminatorCache,
    dcache_b: crate::model::DiscriminatorCache,
    g_score_fa: Array4<f64>,
    g_score_fb: Array4<f64>,
    g_rec_a: Array4<f64>,
    g_rec_b: Array4<f64>,
    g_idt: Option<(Array4<f64>, Array4<f64>)>,
    g_nmc: Array4<f64>,
}

/// Total generator objective, forward only. Deterministic for a fixed noise
/// seed, which is what makes finite-difference checks of the full training
/// objective possible.
pub fn generator_objective(
    g_ab: &Generator,
    g_ba: &Generator,
    d_a: &Discriminator,
    d_b: &Discriminator,
    inp: &StepInputs<'_>,
) -> Result<(GenLossParts, f64)> {
    let graph = objective_forwards(g_ab, g_ba, d_a, d_b, inp)?;
    Ok((graph.parts, graph.total))
}

/// Total generator objective with a full backward pass: accumulates
/// gradients into both generators (and into the discriminators, whose
/// gradients the caller is expected to discard before their own update).
pub fn generator_objective_backward(
    g_ab: &mut Generator,
    g_ba: &mut Generator,
    d_a: &mut Discriminator,
    d_b: &mut Discriminator,
    inp: &StepInputs<'_>,
) -> Result<GeneratorPass> {
    let graph = objective_forwards(g_ab, g_ba, d_a, d_b, inp)?;
    let w = &inp.weights;

    // Path A -> B: adversarial + cycle (+ NMC) reach fake_b.
    let mut g_fake_b = d_b.backward(&graph.dcache_b, &graph.g_score_fb);
    g_fake_b += &g_ba.backward(&graph.cache_ba1, &graph.g_rec_a.mapv(|v| v * w.lambda_a));
    if w.lambda_nmc > 0.0 {
        g_fake_b += &graph.g_nmc.mapv(|v| v * w.lambda_nmc);
    }
    g_ab.backward(&graph.cache_ab1, &g_fake_b);

    // Path B -> A.
    let mut g_fake_a = d_a.backward(&graph.dcache_a, &graph.g_score_fa);
    g_fake_a += &g_ab.backward(&graph.cache_ab2, &graph.g_rec_b.mapv(|v| v * w.lambda_b));
    g_ba.backward(&graph.cache_ba2, &g_fake_a);

    if let (Some((cache_ab3, cache_ba3)), Some((g_idt_a, g_idt_b))) =
        (&graph.idt_caches, &graph.g_idt)
    {
        let sa = w.lambda_identity * w.lambda_b;
        let sb = w.lambda_identity * w.lambda_a;
        g_ab.backward(cache_ab3, &g_idt_a.mapv(|v| v * sa));
        g_ba.backward(cache_ba3, &g_idt_b.mapv(|v| v * sb));
    }

    Ok(GeneratorPass {
        parts: graph.parts,
        total: graph.total,
        fake_a: graph.fake_a,
        fake_b: graph.fake_b,
    })
}

/// Builds the per-epoch RNG: one ChaCha stream per epoch of one master seed.
fn epoch_rng(master_seed: u64, epoch: u32) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(epoch as u64);
    rng
}

struct TrainState {
    cfg: TrainConfig,
    master_seed: u64,
    g_ab: Generator,
    g_ba: Generator,
    d_a: Discriminator,
    d_b: Discriminator,
    opt_g_ab: Adam,
    opt_g_ba: Adam,
    opt_d_a: Adam,
    opt_d_b: Adam,
    pool_a: ImagePool,
    pool_b: ImagePool,
    datasets: BTreeMap<String, UnpairedSet>,
    data_root: PathBuf,
    out_dir: PathBuf,
}

impl TrainState {
    fn fresh(cfg: TrainConfig, data_root: &Path, out_dir: &Path, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0); // stream 0 reserved for initialization
        let mut g_ab = Generator::new(&cfg.generator)?;
        g_ab.init(&mut rng);
        let mut g_ba = Generator::new(&cfg.generator)?;
        g_ba.init(&mut rng);
        let mut d_a = Discriminator::new(&cfg.discriminator);
        d_a.init(&mut rng);
        let mut d_b = Discriminator::new(&cfg.discriminator);
        d_b.init(&mut rng);
        let (lr, b1, b2) = (cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
        let pool_capacity = cfg.pool_capacity;
        Ok(Self {
            cfg,
            master_seed: seed,
            g_ab,
            g_ba,
            d_a,
            d_b,
            opt_g_ab: Adam::new(lr, b1, b2),
            opt_g_ba: Adam::new(lr, b1, b2),
            opt_d_a: Adam::new(lr, b1, b2),
            opt_d_b: Adam::new(lr, b1, b2),
            pool_a: ImagePool::new(pool_capacity),
            pool_b: ImagePool::new(pool_capacity),
            data_root: data_root.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            datasets: BTreeMap::new(),
        })
    }

    fn from_bundle(bundle: CheckpointBundle, data_root: &Path, out_dir: &Path) -> Self {
        let cfg = bundle.manifest.train.clone();
        let pool_capacity = cfg.pool_capacity;
        Self {
            master_seed: bundle.manifest.master_seed,
            cfg,
            g_ab: bundle.g_ab,
            g_ba: bundle.g_ba,
            d_a: bundle.d_a,
            d_b: bundle.d_b,
            opt_g_ab: bundle.opt_g_ab,
            opt_g_ba: bundle.opt_g_ba,
            opt_d_a: bundle.opt_d_a,
            opt_d_b: bundle.opt_d_b,
            pool_a: ImagePool::new(pool_capacity),
            pool_b: ImagePool::new(pool_capacity),
            data_root: data_root.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            datasets: BTreeMap::new(),
        }
    }

    /// `<data_root>/<dataset_id>` when it exists, otherwise the root itself.
    fn dataset(&mut self, dataset_id: &str) -> Result<&UnpairedSet> {
        if !self.datasets.contains_key(dataset_id) {
            let candidate = self.data_root.join(dataset_id);
            let dir = if candidate.is_dir() { candidate } else { self.data_root.clone() };
            let set = UnpairedSet::load(&dir)?;
            self.datasets.insert(dataset_id.to_string(), set);
        }
        Ok(&self.datasets[dataset_id])
    }

    fn load_a_image(&self, path: &Path) -> Result<ImageTensor> {
        load_image(path, self.cfg.generator.input_size)
    }

    fn load_region(&self, image_path: &Path) -> Result<Array2<bool>> {
        let mask = load_region_mask(&region_mask_path(image_path))?;
        let target = self.cfg.generator.input_size;
        if (mask.height(), mask.width()) == (target, target) {
            return Ok(mask.data().clone());
        }
        // Nearest-neighbor resize keeps the mask boolean.
        let (mh, mw) = (mask.height(), mask.width());
        let mut out = Array2::from_elem((target, target), false);
        for i in 0..target {
            for j in 0..target {
                let si = (i * mh) / target;
                let sj = (j * mw) / target;
                out[[i, j]] = mask.data()[[si, sj]];
            }
        }
        Ok(out)
    }

    fn noise_for(&self, entry: &ScheduleEntry) -> NoiseSpec {
        NoiseSpec { enabled: entry.noise, ..self.cfg.generator.noise.clone() }
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &mut self,
        real_a: &Array4<f64>,
        real_b: &Array4<f64>,
        regions_a: Option<&[Array2<bool>]>,
        entry: &ScheduleEntry,
        noise_seed_base: u64,
        erng: &mut ChaCha20Rng,
        epoch: u32,
        iter: usize,
    ) -> Result<IterationLog> {
        let noise = self.noise_for(entry);
        let weights = LossWeights {
            lambda_a: entry.lambda_a,
            lambda_b: entry.lambda_b,
            lambda_identity: self.cfg.lambda_identity,
            lambda_nmc: if entry.nmc { self.cfg.lambda_nmc } else { 0.0 },
        };
        let inputs = StepInputs {
            real_a,
            real_b,
            regions_a: if entry.nmc { regions_a } else { None },
            weights,
            noise,
            noise_seed_base,
        };

        // ---- generator objective, backward, step ----------------------------
        self.g_ab.zero_grads();
        self.g_ba.zero_grads();
        // Discriminators participate in the graph; their gradients from this
        // pass are discarded before their own update below.
        self.d_a.zero_grads();
        self.d_b.zero_grads();

        let pass = generator_objective_backward(
            &mut self.g_ab,
            &mut self.g_ba,
            &mut self.d_a,
            &mut self.d_b,
            &inputs,
        )?;
        let parts = pass.parts;
        let loss_g = pass.total;
        if !loss_g.is_finite() {
            self.save_diagnostic(epoch)?;
            return Err(Error::Diverged(format!(
                "generator loss became non-finite at epoch {epoch} iter {iter}"
            )));
        }
        let fake_b = pass.fake_b;
        let fake_a = pass.fake_a;

        self.opt_g_ab.step(&mut self.g_ab);
        self.opt_g_ba.step(&mut self.g_ba);

        // ---- discriminator steps on pooled fakes ----------------------------
        let pooled_fake_b = self.pool_b.query(&fake_b, erng);
        let pooled_fake_a = self.pool_a.query(&fake_a, erng);

        let loss_d_b = {
            self.d_b.zero_grads();
            let (score_real, c_real) = self.d_b.forward(real_b);
            let (l_real, g_real) = adversarial_loss_grad(&score_real, true);
            let (score_fake, c_fake) = self.d_b.forward(&pooled_fake_b);
            let (l_fake, g_fake) = adversarial_loss_grad(&score_fake, false);
            self.d_b.backward(&c_real, &g_real.mapv(|v| v * 0.5));
            self.d_b.backward(&c_fake, &g_fake.mapv(|v| v * 0.5));
            self.opt_d_b.step(&mut self.d_b);
            0.5 * (l_real + l_fake)
        };
        let loss_d_a = {
            self.d_a.zero_grads();
            let (score_real, c_real) = self.d_a.forward(real_a);
            let (l_real, g_real) = adversarial_loss_grad(&score_real, true);
            let (score_fake, c_fake) = self.d_a.forward(&pooled_fake_a);
            let (l_fake, g_fake) = adversarial_loss_grad(&score_fake, false);
            self.d_a.backward(&c_real, &g_real.mapv(|v| v * 0.5));
            self.d_a.backward(&c_fake, &g_fake.mapv(|v| v * 0.5));
            self.opt_d_a.step(&mut self.d_a);
            0.5 * (l_real + l_fake)
        };

        if !loss_d_a.is_finite() || !loss_d_b.is_finite() {
            self.save_diagnostic(epoch)?;
            return Err(Error::Diverged(format!(
                "discriminator loss became non-finite at epoch {epoch} iter {iter}"
            )));
        }

        Ok(IterationLog {
            epoch,
            iter,
            adv_ab: parts.adv_ab,
            adv_ba: parts.adv_ba,
            cycle_a: parts.cycle_a,
            cycle_b: parts.cycle_b,
            idt_a: parts.idt_a,
            idt_b: parts.idt_b,
            nmc: parts.nmc,
            loss_g,
            loss_d_a,
            loss_d_b,
            lambda_a: entry.lambda_a,
            lambda_b: entry.lambda_b,
            noise: entry.noise,
            nmc_enabled: entry.nmc,
        })
    }

    fn manifest(&self, epoch: u32) -> Manifest {
        Manifest {
            format_version: checkpoint::FORMAT_VERSION,
            config_digest: config_digest(&self.cfg.generator, &self.cfg.discriminator),
            epoch,
            master_seed: self.master_seed,
            train: self.cfg.clone(),
            adam: vec![
                AdamMeta { t: self.opt_g_ab.t },
                AdamMeta { t: self.opt_g_ba.t },
                AdamMeta { t: self.opt_d_a.t },
                AdamMeta { t: self.opt_d_b.t },
            ],
            tensors: Vec::new(),
            moment_tensors: Vec::new(),
        }
    }

    fn save_epoch_checkpoint(&self, epoch: u32) -> Result<PathBuf> {
        let dir = self.out_dir.join(format!("epoch_{epoch}"));
        self.save_into(&dir, epoch)?;
        Ok(dir)
    }

    fn save_diagnostic(&self, epoch: u32) -> Result<()> {
        let dir = self.out_dir.join("diagnostic_nan");
        self.save_into(&dir, epoch)?;
        log::error!("diagnostic checkpoint written to {}", dir.display());
        Ok(())
    }

    fn save_into(&self, dir: &Path, epoch: u32) -> Result<()> {
        let mut shim = PayloadShim {
            manifest: self.manifest(epoch),
            g_ab: &self.g_ab,
            g_ba: &self.g_ba,
            d_a: &self.d_a,
            d_b: &self.d_b,
            opt_g_ab: &self.opt_g_ab,
            opt_g_ba: &self.opt_g_ba,
            opt_d_a: &self.opt_d_a,
            opt_d_b: &self.opt_d_b,
        };
        shim.save(dir)
    }

    /// Fixed held-out sample input: first image in `<data_root>/testA`, else
    /// the first entry's trainA directory.
    fn sample_source(&mut self, schedule: &[ScheduleEntry]) -> Result<PathBuf> {
        let test_a = self.data_root.join("testA");
        if test_a.is_dir() {
            if let Ok(images) = crate::datasets::list_images(&test_a) {
                return Ok(images[0].clone());
            }
        }
        let first = self.dataset(&schedule[0].dataset_id.clone())?;
        Ok(first.a_images[0].clone())
    }

    fn write_sample(
        &mut self,
        schedule: &[ScheduleEntry],
        entry: &ScheduleEntry,
        ckpt_dir: &Path,
        sample_seed: u64,
    ) -> Result<()> {
        let src = self.sample_source(schedule)?;
        let input = self.load_a_image(&src)?;
        let batch = images_to_batch(&[&input]);
        let noise = self.noise_for(entry);
        let out = self.g_ab.infer(&batch, &noise, sample_seed);
        let output = batch_to_image(&out.output, 0);
        emit_grid(&[(input, output)], &ckpt_dir.join("sample.png"), 1)
    }

    fn prune_checkpoints(&self) {
        let Some(keep) = self.cfg.keep_last_checkpoints else { return };
        let dirs = list_epoch_dirs(&self.out_dir);
        if dirs.len() > keep {
            for (_, dir) in &dirs[..dirs.len() - keep] {
                if let Err(e) = std::fs::remove_dir_all(dir) {
                    log::warn!("could not prune checkpoint {}: {e}", dir.display());
                }
            }
        }
    }

    fn run_epochs(
        &mut self,
        schedule: &[ScheduleEntry],
        first_epoch: u32,
        last_epoch: u32,
    ) -> Result<TrainOutcome> {
        validate_schedule(schedule)?;
        let log_path = self.out_dir.join("train_log.jsonl");
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let mut log_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;

        // Pre-flight: every NMC epoch in range needs sidecars now, not later.
        for e in schedule {
            if e.nmc && e.epoch_start <= last_epoch && e.epoch_end >= first_epoch {
                let id = e.dataset_id.clone();
                self.dataset(&id)?.check_sidecars()?;
            }
        }

        let mut checkpoint_dirs = Vec::new();
        for epoch in first_epoch..=last_epoch {
            let entry = entry_for_epoch(schedule, epoch)
                .ok_or_else(|| {
                    Error::InvalidSchedule(format!("no schedule entry covers epoch {epoch}"))
                })?
                .clone();
            let batch = self.cfg.batch_size;
            let (a_paths, b_paths, iters) = {
                let ds = self.dataset(&entry.dataset_id)?;
                (ds.a_images.clone(), ds.b_images.clone(), ds.iterations_per_epoch(batch))
            };

            let mut erng = epoch_rng(self.master_seed, epoch);
            let mut a_order: Vec<usize> = (0..a_paths.len()).collect();
            let mut b_order: Vec<usize> = (0..b_paths.len()).collect();
            a_order.shuffle(&mut erng);
            b_order.shuffle(&mut erng);

            self.pool_a.clear();
            self.pool_b.clear();

            for it in 0..iters {
                let noise_seed_base = erng.random::<u64>();
                let mut a_imgs = Vec::with_capacity(batch);
                let mut regions = Vec::with_capacity(batch);
                let mut b_imgs = Vec::with_capacity(batch);
                for k in 0..batch {
                    let ai = a_order[(it * batch + k) % a_paths.len()];
                    let bi = b_order[(it * batch + k) % b_paths.len()];
                    a_imgs.push(self.load_a_image(&a_paths[ai])?);
                    if entry.nmc {
                        regions.push(self.load_region(&a_paths[ai])?);
                    }
                    b_imgs.push(load_image(&b_paths[bi], self.cfg.generator.input_size)?);
                }
                let real_a = images_to_batch(&a_imgs.iter().collect::<Vec<_>>());
                let real_b = images_to_batch(&b_imgs.iter().collect::<Vec<_>>());
                let regions_opt = if entry.nmc { Some(regions.as_slice()) } else { None };

                let line = self.train_step(
                    &real_a,
                    &real_b,
                    regions_opt,
                    &entry,
                    noise_seed_base,
                    &mut erng,
                    epoch,
                    it,
                )?;
                serde_json::to_writer(&mut log_file, &line)?;
                log_file.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
            }

            let sample_seed = erng.random::<u64>();
            let dir = self.save_epoch_checkpoint(epoch)?;
            if let Err(e) = self.write_sample(schedule, &entry, &dir, sample_seed) {
                log::warn!("epoch {epoch}: could not write sample image: {e}");
            }
            log::info!("epoch {epoch}: checkpoint at {}", dir.display());
            checkpoint_dirs.push(dir);
            self.prune_checkpoints();
        }
        Ok(TrainOutcome { last_epoch, checkpoint_dirs })
    }
}

/// Borrow-based checkpoint writer so saving never clones megabytes of
/// parameters.
struct PayloadShim<'a> {
    manifest: Manifest,
    g_ab: &'a Generator,
    g_ba: &'a Generator,
    d_a: &'a Discriminator,
    d_b: &'a Discriminator,
    opt_g_ab: &'a Adam,
    opt_g_ba: &'a Adam,
    opt_d_a: &'a Adam,
    opt_d_b: &'a Adam,
}

impl PayloadShim<'_> {
    fn save(&mut self, dir: &Path) -> Result<()> {
        use crate::model::archive::PayloadWriter;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut params = PayloadWriter::new();
        params.push_params("g_ab", self.g_ab);
        params.push_params("g_ba", self.g_ba);
        params.push_params("d_a", self.d_a);
        params.push_params("d_b", self.d_b);
        params.write_to(&dir.join(checkpoint::PARAMS_FILE))?;

        let mut moments = PayloadWriter::new();
        for (prefix, opt) in [
            ("g_ab", self.opt_g_ab),
            ("g_ba", self.opt_g_ba),
            ("d_a", self.opt_d_a),
            ("d_b", self.opt_d_b),
        ] {
            for (name, m, v) in &opt.moments {
                moments.push(&format!("{prefix}.m.{name}"), m.shape(), m.iter().copied());
                moments.push(&format!("{prefix}.v.{name}"), v.shape(), v.iter().copied());
            }
        }
        moments.write_to(&dir.join(checkpoint::OPTIM_FILE))?;

        self.manifest.tensors = params.records;
        self.manifest.moment_tensors = moments.records;
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let manifest_path = dir.join(checkpoint::MANIFEST_FILE);
        let tmp = manifest_path.with_extension("json.tmp");
        std::fs::write(&tmp, json.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }
}

/// Trains from scratch (or from warm-start weights) over the whole schedule,
/// writing one checkpoint directory per epoch under `out_dir`.
pub fn train(
    cfg: TrainConfig,
    schedule: &[ScheduleEntry],
    data_root: &Path,
    out_dir: &Path,
    seed: u64,
    warm_start: Option<&Path>,
) -> Result<TrainOutcome> {
    validate_schedule(schedule)?;
    let mut state = TrainState::fresh(cfg, data_root, out_dir, seed)?;
    if let Some(ws) = warm_start {
        let digest = config_digest(&state.cfg.generator, &state.cfg.discriminator);
        load_params_only(
            ws,
            &mut state.g_ab,
            &mut state.g_ba,
            &mut state.d_a,
            &mut state.d_b,
            &digest,
        )?;
        log::info!("warm start: parameters loaded from {}", ws.display());
    }
    let first = schedule[0].epoch_start;
    let last = schedule[schedule.len() - 1].epoch_end;
    state.run_epochs(schedule, first, last)
}

/// Continues training from a checkpoint directory through the end of the
/// schedule. Lambdas and flags come from the (possibly updated) schedule;
/// architecture and optimizer state come from the checkpoint.
pub fn resume(
    ckpt_dir: &Path,
    schedule: &[ScheduleEntry],
    data_root: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    validate_schedule(schedule)?;
    let bundle = load_checkpoint(ckpt_dir)?;
    let done_epoch = bundle.manifest.epoch;
    let last = schedule[schedule.len() - 1].epoch_end;
    if done_epoch >= last {
        return Err(Error::InvalidSchedule(format!(
            "checkpoint already at epoch {done_epoch}, schedule ends at {last}"
        )));
    }
    let mut state = TrainState::from_bundle(bundle, data_root, out_dir);
    state.run_epochs(schedule, done_epoch + 1, last)
}

/// Creates a fake-image buffer; exposed for the discriminator-update contract.
pub fn fake_pool(capacity: usize) -> ImagePool {
    ImagePool::new(capacity)
}

/// Runs a frozen generator over a directory, writing one output per input
/// plus a JSON manifest. Returns the written paths.
pub fn generate_dir(
    ckpt_dir: &Path,
    input_dir: &Path,
    output_dir: &Path,
    noise_enabled: Option<bool>,
    noise_seed: Option<u64>,
) -> Result<Vec<PathBuf>> {
    let bundle = load_checkpoint(ckpt_dir)?;
    let gen_cfg = bundle.manifest.train.generator.clone();
    let images = crate::datasets::list_images(input_dir)?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;

    let mut noise = gen_cfg.noise.clone();
    if let Some(e) = noise_enabled {
        noise.enabled = e;
    }
    let seed = noise_seed.unwrap_or(noise.seed);

    let mut written = Vec::new();
    let mut manifest_entries = Vec::new();
    for (k, path) in images.iter().enumerate() {
        let input = load_image(path, gen_cfg.input_size)?;
        let batch = images_to_batch(&[&input]);
        let out = bundle.g_ab.infer(&batch, &noise, seed.wrapping_add(k as u64));
        let img = batch_to_image(&out.output, 0);
        let out_path = output_dir.join(path.file_name().unwrap());
        img.to_rgb8()
            .save_with_format(&out_path, image::ImageFormat::Png)
            .map_err(|e| Error::ImageWrite { path: out_path.clone(), reason: e.to_string() })?;
        manifest_entries.push(serde_json::json!({
            "input": path.display().to_string(),
            "output": out_path.display().to_string(),
            "noise_seed": seed.wrapping_add(k as u64),
        }));
        written.push(out_path);
    }
    let manifest = serde_json::json!({
        "checkpoint": ckpt_dir.display().to_string(),
        "epoch": bundle.manifest.epoch,
        "noise_enabled": noise.enabled,
        "outputs": manifest_entries,
    });
    let manifest_path = output_dir.join("generate_manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(s: u32, e: u32, la: f64, lb: f64, noise: bool, nmc: bool) -> ScheduleEntry {
        ScheduleEntry {
            epoch_start: s,
            epoch_end: e,
            lambda_a: la,
            lambda_b: lb,
            noise,
            nmc,
            dataset_id: "default".into(),
        }
    }

    #[test]
    fn staged_timeline_validates() {
        let entries = vec![
            entry(1, 60, 10.0, 10.0, false, false),
            entry(61, 90, 10.0, 10.0, false, false),
            entry(91, 140, 8.0, 8.0, false, false),
            entry(141, 298, 8.0, 8.0, false, true),
            entry(299, 510, 8.0, 8.0, true, true),
        ];
        validate_schedule(&entries).unwrap();
        assert_eq!(entry_for_epoch(&entries, 1).unwrap().lambda_a, 10.0);
        assert_eq!(entry_for_epoch(&entries, 140).unwrap().lambda_a, 8.0);
        assert!(!entry_for_epoch(&entries, 140).unwrap().nmc);
        assert!(entry_for_epoch(&entries, 141).unwrap().nmc);
        assert!(!entry_for_epoch(&entries, 298).unwrap().noise);
        assert!(entry_for_epoch(&entries, 299).unwrap().noise);
        assert!(entry_for_epoch(&entries, 510).unwrap().noise);
        assert!(entry_for_epoch(&entries, 511).is_none());
    }

    #[test]
    fn gaps_and_overlaps_rejected() {
        let gap = vec![entry(1, 10, 1.0, 1.0, false, false), entry(12, 20, 1.0, 1.0, false, false)];
        assert!(validate_schedule(&gap).is_err());
        let overlap =
            vec![entry(1, 10, 1.0, 1.0, false, false), entry(10, 20, 1.0, 1.0, false, false)];
        assert!(validate_schedule(&overlap).is_err());
        let reversed = vec![entry(5, 3, 1.0, 1.0, false, false)];
        assert!(validate_schedule(&reversed).is_err());
        assert!(validate_schedule(&[]).is_err());
    }

    #[test]
    fn epoch_rng_streams_are_stable_and_distinct() {
        let mut a1 = epoch_rng(7, 1);
        let mut a1b = epoch_rng(7, 1);
        let mut a2 = epoch_rng(7, 2);
        let x1: u64 = a1.random();
        let x1b: u64 = a1b.random();
        let x2: u64 = a2.random();
        assert_eq!(x1, x1b);
        assert_ne!(x1, x2);
    }
}
