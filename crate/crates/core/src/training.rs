//! Training loops for the base generator and the class-specific generators.
//!
//! One iteration runs four phases: discriminator adversarial step, lazy R1
//! step, generator step (adversarial + KL + perceptual on its cadence) and
//! lazy path-length step, followed by the weight-average update. All
//! randomness (batch indices, latents, layer noise, projections) comes from
//! one seeded stream stored in checkpoints, so runs replay bit-exactly.

use crate::checkpoint::Container;
use crate::datamodel::{build_scene_context, extract_instances, ContextPair, Removal, InstanceRecord, RemovalMode, SceneSample};
use crate::error::{Error, Result};
use crate::io::{save_rgb_png, Corpus};
use crate::losses::{
    compose_loss, d_adv_loss, g_adv_loss, kl_loss, path_length_noise, path_length_penalty, perceptual_loss, r1_penalty,
    split_nonsquare, LossParts, LossRole, LossTerm, LossWeights,
};
use crate::model::decoder::Noise;
use crate::model::discriminator::{Discriminator, DiscriminatorConfig};
use crate::model::extractor::{ConvExtractor, FeatureExtractor};
use crate::model::generator::{ArchConfig, Generator, GeneratorConfig};
use crate::optim::{ema_update, gradients, named_parameters, Adam, AdamConfig};
use crate::raster::{Mask, Raster, ResizeMode};
use crate::tensor::{image_tensor_to_unit_raster, randn, raster_to_tensor, scalar, to_f32_vec, with_torch_seed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use tch::nn::VarStore;
use tch::{Device, Kind, Tensor};

/// What a run trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainRole {
    Base,
    Class {
        class_id: u16,
        model_res: usize,
        removal_mode: RemovalMode,
        /// Blur sigma in context pixels; defaults to `model_res / 16`.
        #[serde(default)]
        blur_sigma: Option<f32>,
        /// Zero the context image `C_i` and keep only the semantic crop.
        #[serde(default)]
        ablate_context_image: bool,
    },
}

impl TrainRole {
    pub fn removal(&self) -> Option<Removal> {
        match self {
            TrainRole::Base => None,
            TrainRole::Class { model_res, removal_mode, blur_sigma, .. } => {
                let mut r = Removal::for_model(*removal_mode, *model_res);
                if let Some(s) = blur_sigma {
                    r.blur_sigma = *s;
                }
                Some(r)
            }
        }
    }

    /// Generator input `cat(C_i, C_s)` for a context, honouring the ablation flag.
    pub fn context_input(&self, ctx: &ContextPair) -> Raster {
        match self {
            TrainRole::Class { ablate_context_image: true, .. } => {
                let mut ctx = ctx.clone();
                ctx.context_image.as_mut_slice().fill(0.0);
                ctx.concat()
            }
            _ => ctx.concat(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn kind(self) -> Kind {
        match self {
            Precision::F32 => Kind::Float,
            Precision::F64 => Kind::Double,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscArch {
    pub channel_base: i64,
    pub channel_max: i64,
    pub mbstd: bool,
    pub mbstd_group: i64,
}

impl Default for DiscArch {
    fn default() -> Self {
        Self { channel_base: 32768, channel_max: 512, mbstd: true, mbstd_group: 4 }
    }
}

impl DiscArch {
    pub fn desk() -> Self {
        Self { channel_base: 1024, channel_max: 64, mbstd: true, mbstd_group: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Safetensors file with `conv{i}.weight` / `conv{i}.bias`; the seeded
    /// random stack is used when absent.
    pub weights: Option<PathBuf>,
    /// Drop the raw-pixel layer from the default stack.
    pub exclude_pixels: bool,
}

impl ExtractorConfig {
    pub fn build(&self, kind: Kind) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match &self.weights {
            Some(path) => Box::new(ConvExtractor::load(path, !self.exclude_pixels, kind)?),
            None => {
                let e = ConvExtractor::random(
                    crate::model::extractor::DEFAULT_EXTRACTOR_SEED,
                    &crate::model::extractor::DEFAULT_EXTRACTOR_CHANNELS,
                    !self.exclude_pixels,
                    kind,
                );
                Box::new(e)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub role: TrainRole,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub g_optim: AdamConfig,
    pub d_optim: AdamConfig,
    pub ema_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub arch: ArchConfig,
    pub disc: DiscArch,
    pub losses: LossWeights,
    pub extractor: ExtractorConfig,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: u64,
    pub sample_every: u64,
    pub eval_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            role: TrainRole::Base,
            batch_size: 16,
            total_iterations: 2000,
            g_optim: AdamConfig::default(),
            d_optim: AdamConfig::default(),
            ema_decay: 0.999,
            seed: 0,
            precision: Precision::F32,
            arch: ArchConfig::desk(),
            disc: DiscArch::desk(),
            losses: LossWeights::default(),
            extractor: ExtractorConfig::default(),
            checkpoint_every: 500,
            sample_every: 500,
            eval_every: 100,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if let TrainRole::Class { model_res, .. } = self.role {
            if !model_res.is_power_of_two() || model_res < 64 {
                return Err(Error::Config(format!("class model_res {model_res} must be a power of two >= 64")));
            }
        }
        self.losses.validate()
    }

    pub fn generator_config(&self, num_classes: usize, height: usize, width: usize) -> Result<GeneratorConfig> {
        match self.role {
            TrainRole::Base => GeneratorConfig::base(num_classes, height as i64, width as i64, &self.arch),
            TrainRole::Class { model_res, .. } => GeneratorConfig::class(num_classes, model_res as i64, &self.arch),
        }
    }

    pub fn discriminator_config(&self, gen: &GeneratorConfig) -> DiscriminatorConfig {
        let (h, w) = gen.output_dims();
        DiscriminatorConfig {
            input_res: h.min(w),
            channel_base: self.disc.channel_base,
            channel_max: self.disc.channel_max,
            mbstd: self.disc.mbstd,
            mbstd_group: self.disc.mbstd_group,
        }
    }
}

/// Where a training example came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSource {
    pub scene: usize,
    pub instance_id: Option<u16>,
}

/// Conditioning inputs and targets (targets in `[-1, 1]`), plus per-example
/// label regions at target resolution used for colour statistics.
#[derive(Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub sources: Vec<ExampleSource>,
    pub regions: Vec<Vec<Mask>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let idx = Tensor::from_slice(&indices.iter().map(|&i| i as i64).collect::<Vec<_>>());
        Batch {
            inputs: self.inputs.index_select(0, &idx),
            targets: self.targets.index_select(0, &idx),
            sources: indices.iter().map(|&i| self.sources[i].clone()).collect(),
            regions: indices.iter().map(|&i| self.regions[i].clone()).collect(),
        }
    }
}

fn to_signed(image: &Raster) -> Raster {
    image.map(|v| v * 2.0 - 1.0)
}

/// Base-model input `cat(S_onehot, E)` of a scene.
pub fn base_input(scene: &SceneSample) -> Raster {
    let onehot = scene.semantic.one_hot();
    let edges = scene.edges.as_raster();
    let (h, w) = scene.dims();
    let nc = onehot.channels();
    Raster::from_fn(h, w, nc + 1, |y, x, c| if c < nc { onehot.get(y, x, c) } else { edges.get(y, x, 0) })
}

fn class_regions(scene: &SceneSample) -> Vec<Mask> {
    let labels = scene.semantic.labels();
    (0..scene.semantic.num_classes())
        .map(|c| labels.map(|v| v == c))
        .filter(|m| m.count() > 0)
        .collect()
}

/// Base-model batch for the given scene indices.
pub fn make_base_batch(corpus: &Corpus, indices: &[usize], kind: Kind) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut regions = Vec::new();
    for &i in indices {
        let scene = corpus
            .scenes
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("scene index {i} out of range ({} scenes)", corpus.len())))?;
        inputs.push(raster_to_tensor(&base_input(scene), kind));
        targets.push(raster_to_tensor(&to_signed(&scene.image), kind));
        regions.push(class_regions(scene));
    }
    Ok(Batch {
        inputs: Tensor::stack(&inputs, 0),
        targets: Tensor::stack(&targets, 0),
        sources: indices.iter().map(|&scene| ExampleSource { scene, instance_id: None }).collect(),
        regions,
    })
}

/// Smallest instance side a class model of `model_res` trains on.
pub fn min_instance_side(model_res: usize) -> usize {
    model_res / 2
}

/// Whether an instance passes the minimum-size filter: both sides of its
/// tight box must be at least `model_res / 2`.
pub fn instance_eligible(rec: &InstanceRecord, model_res: usize) -> bool {
    let min = min_instance_side(model_res) as i64;
    rec.tight_box.width() >= min && rec.tight_box.height() >= min
}

/// Tight-box crop of the real image resized to `model_res`, in `[-1, 1]`.
pub fn instance_target(scene: &SceneSample, rec: &InstanceRecord, model_res: usize) -> Result<Raster> {
    let crop = scene.image.crop_with_padding(&rec.tight_box, 0.0);
    Ok(to_signed(&crop.resize(model_res, model_res, ResizeMode::Bilinear)?))
}

/// Every eligible instance of `class_id`: contexts `cat(C_i, C_s)` at
/// `2 * model_res` (image part in `[0, 1]`) and targets at `model_res`.
pub fn make_class_batch(corpus: &Corpus, role: &TrainRole, kind: Kind) -> Result<Batch> {
    let TrainRole::Class { class_id, model_res, .. } = *role else {
        return Err(Error::InvalidArgument("class batch needs a class role".into()));
    };
    let removal = role.removal().expect("class role has a removal");
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    let mut regions = Vec::new();
    let mut seen = 0usize;
    for (si, scene) in corpus.scenes.iter().enumerate() {
        for rec in extract_instances(&scene.instances, &scene.semantic)? {
            if rec.class_id != class_id {
                continue;
            }
            seen += 1;
            if !instance_eligible(&rec, model_res) {
                continue;
            }
            let ctx = build_scene_context(scene, &rec, removal, 2 * model_res)?;
            inputs.push(raster_to_tensor(&role.context_input(&ctx), kind));
            targets.push(raster_to_tensor(&instance_target(scene, &rec, model_res)?, kind));
            regions.push(vec![rec.mask.resize_nearest(model_res, model_res)]);
            sources.push(ExampleSource { scene: si, instance_id: Some(rec.instance_id) });
        }
    }
    if sources.is_empty() {
        let min = min_instance_side(model_res);
        return Err(Error::NoEligibleInstances {
            class_id,
            reason: format!("{seen} instances of the class found, none with tight box at least {min}x{min}"),
        });
    }
    Ok(Batch { inputs: Tensor::stack(&inputs, 0), targets: Tensor::stack(&targets, 0), sources, regions })
}

/// The full training set of a role.
pub fn make_dataset(config: &TrainConfig, corpus: &Corpus) -> Result<Batch> {
    let kind = config.precision.kind();
    match &config.role {
        TrainRole::Base => make_base_batch(corpus, &(0..corpus.len()).collect::<Vec<_>>(), kind),
        TrainRole::Class { .. } => make_class_batch(corpus, &config.role, kind),
    }
}

/// Values logged for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub d_terms: Vec<LossTerm>,
    pub g_terms: Vec<LossTerm>,
    pub pl_mean: f64,
}

impl StepReport {
    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.d_terms.iter().chain(&self.g_terms).find(|t| t.name == name)
    }
}

/// Fixed-input evaluation of a generator on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iteration: u64,
    pub perceptual: f64,
    /// `1 - mean |mean colour(generated) - mean colour(target)|` over label
    /// regions, colours in `[0, 1]`.
    pub color_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed().to_vec(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.seed.as_slice().try_into().map_err(|_| Error::Config("bad rng seed".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Config("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Dataset-level facts a trainer needs to rebuild its networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataShape {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl DataShape {
    pub fn of(corpus: &Corpus) -> Self {
        Self {
            num_classes: corpus.num_classes() as usize,
            height: corpus.manifest.height,
            width: corpus.manifest.width,
        }
    }
}

/// Structured-text header of a training checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub train_config: TrainConfig,
    pub data: DataShape,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub iteration: u64,
    pub pl_mean: f64,
    rng: RngState,
}

impl CheckpointMeta {
    pub fn parse(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&c.meta)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Version { found: meta.format, expected: CHECKPOINT_FORMAT.into() });
        }
        Ok(meta)
    }
}

/// Inference-only generator restored from a training checkpoint.
#[derive(Debug)]
pub struct GeneratorModel {
    pub train_config: TrainConfig,
    pub data: DataShape,
    pub iteration: u64,
    vs: VarStore,
    pub generator: Generator,
}

impl GeneratorModel {
    /// Load the averaged (`use_ema`) or raw generator weights.
    pub fn load(path: &Path, use_ema: bool) -> Result<Self> {
        let c = Container::load(path)?;
        let meta = CheckpointMeta::parse(&c)?;
        let prefix = if use_ema { "g_ema/" } else { "g/" };
        Self::build(meta.train_config, meta.data, meta.iteration, &meta.generator, &c.section(prefix), path)
    }

    /// Snapshot of a live trainer's generator.
    pub fn from_trainer(t: &Trainer, use_ema: bool) -> Result<Self> {
        let vs = if use_ema { &t.ema_vs } else { &t.g_vs };
        Self::build(t.config.clone(), t.data.clone(), t.iteration, &t.gen_config, &named_parameters(vs), Path::new("<memory>"))
    }

    fn build(
        train_config: TrainConfig,
        data: DataShape,
        iteration: u64,
        config: &GeneratorConfig,
        named: &[(String, Tensor)],
        path: &Path,
    ) -> Result<Self> {
        let mut vs = VarStore::new(Device::Cpu);
        let generator = Generator::new(&vs.root(), config)?;
        if train_config.precision == Precision::F64 {
            vs.double();
        }
        load_store(&vs, named, path)?;
        vs.freeze();
        Ok(Self { train_config, data, iteration, vs, generator })
    }

    pub fn kind(&self) -> Kind {
        self.train_config.precision.kind()
    }

    pub fn store(&self) -> &VarStore {
        &self.vs
    }

    pub fn role(&self) -> &TrainRole {
        &self.train_config.role
    }

    pub fn latent_dim(&self) -> i64 {
        self.generator.config().encoder.latent_dim
    }
}

const CHECKPOINT_FORMAT: &str = "semsynth-train";

/// Complete training state.
pub struct Trainer {
    config: TrainConfig,
    data: DataShape,
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    g_vs: VarStore,
    d_vs: VarStore,
    ema_vs: VarStore,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_ema: Generator,
    g_opt: Adam,
    d_opt: Adam,
    extractor: Box<dyn FeatureExtractor>,
    pub pl_mean: f64,
    pub iteration: u64,
    rng: ChaCha8Rng,
    diagnostics_dir: Option<PathBuf>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("config", &self.config).field("iteration", &self.iteration).finish_non_exhaustive()
    }
}

impl Trainer {
    pub fn new(config: &TrainConfig, data: &DataShape) -> Result<Self> {
        config.validate()?;
        let gen_config = config.generator_config(data.num_classes, data.height, data.width)?;
        let disc_config = config.discriminator_config(&gen_config);
        let kind = config.precision.kind();
        let (mut g_vs, mut d_vs, mut ema_vs) = (VarStore::new(Device::Cpu), VarStore::new(Device::Cpu), VarStore::new(Device::Cpu));
        let (generator, discriminator, g_ema) = with_torch_seed(config.seed, || -> Result<_> {
            Ok((
                Generator::new(&g_vs.root(), &gen_config)?,
                Discriminator::new(&d_vs.root(), &disc_config)?,
                Generator::new(&ema_vs.root(), &gen_config)?,
            ))
        })?;
        if kind == Kind::Double {
            g_vs.double();
            d_vs.double();
            ema_vs.double();
        }
        ema_vs.copy(&g_vs)?;
        ema_vs.freeze();
        let g_opt = Adam::new(&g_vs, config.g_optim.lazy(config.losses.pathlen_every));
        let d_opt = Adam::new(&d_vs, config.d_optim.lazy(config.losses.r1_every));
        Ok(Self {
            config: config.clone(),
            data: data.clone(),
            gen_config,
            disc_config,
            g_vs,
            d_vs,
            ema_vs,
            generator,
            discriminator,
            g_ema,
            g_opt,
            d_opt,
            extractor: config.extractor.build(kind)?,
            pl_mean: 0.0,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            diagnostics_dir: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator_config(&self) -> &GeneratorConfig {
        &self.gen_config
    }

    pub fn data_shape(&self) -> &DataShape {
        &self.data
    }

    pub fn kind(&self) -> Kind {
        self.config.precision.kind()
    }

    /// Non-finite losses dump a JSON report here before aborting.
    pub fn set_diagnostics_dir(&mut self, dir: Option<PathBuf>) {
        self.diagnostics_dir = dir;
    }

    pub fn generator_store(&self) -> &VarStore {
        &self.g_vs
    }

    pub fn discriminator_store(&self) -> &VarStore {
        &self.d_vs
    }

    pub fn ema_store(&self) -> &VarStore {
        &self.ema_vs
    }

    pub fn set_extractor(&mut self, extractor: Box<dyn FeatureExtractor>) {
        self.extractor = extractor;
    }

    /// Random minibatch (with replacement) drawn from the trainer's stream.
    pub fn sample_batch(&mut self, dataset: &Batch) -> Batch {
        let n = dataset.len();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.gen_range(0..n)).collect();
        dataset.select(&idx)
    }

    fn d_view(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.size();
        if s[2] == s[3] {
            Ok(images.shallow_clone())
        } else {
            split_nonsquare(images)
        }
    }

    fn eps(&mut self, batch: i64) -> Tensor {
        let kind = self.kind();
        randn(&mut self.rng, &[batch, self.gen_config.encoder.latent_dim], kind)
    }

    fn check_finite(&self, value: f64, phase: &str, report: &StepReport) -> Result<()> {
        if value.is_finite() {
            return Ok(());
        }
        let detail = format!("{phase} loss is {value}");
        if let Some(dir) = &self.diagnostics_dir {
            let dump = serde_json::json!({ "phase": phase, "value": value.to_string(), "partial_report": report, "config": self.config });
            let path = dir.join(format!("nonfinite_{:06}.json", self.iteration));
            let _ = std::fs::create_dir_all(dir);
            let _ = std::fs::write(&path, serde_json::to_string_pretty(&dump)?);
            log::error!("{detail}; diagnostics written to {}", path.display());
        }
        Err(Error::NonFiniteLoss { iteration: self.iteration, detail })
    }

    fn weighted(terms: &[LossTerm], tensors: &[(&str, &Tensor)], kind: Kind) -> Tensor {
        let mut total = Tensor::zeros([], (kind, Device::Cpu));
        for t in terms {
            if let Some((_, v)) = tensors.iter().find(|(n, _)| *n == t.name) {
                total = total + *v * t.weight;
            }
        }
        total
    }

    /// One full iteration on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let it = self.iteration;
        let kind = self.kind();
        let weights = self.config.losses.clone();
        let b = batch.inputs.size()[0];
        let mut report = StepReport { iteration: it, d_terms: Vec::new(), g_terms: Vec::new(), pl_mean: self.pl_mean };
        let real = self.d_view(&batch.targets)?;

        // Discriminator: adversarial.
        let eps = self.eps(b);
        let fake = {
            let mut noise = Noise::Sampled(&mut self.rng);
            let _guard = tch::no_grad_guard();
            self.generator.forward(&batch.inputs, &eps, &mut noise)?.image
        };
        let d_adv = d_adv_loss(&self.discriminator.discriminate(&real)?, &self.discriminator.discriminate(&self.d_view(&fake)?)?);
        let parts = LossParts { adversarial: scalar(&d_adv), ..Default::default() };
        let terms = compose_loss(&parts, &weights, it, LossRole::Discriminator);
        report.d_terms.push(terms[0].clone());
        self.check_finite(parts.adversarial, "discriminator", &report)?;
        let loss = Self::weighted(&terms[..1], &[("adversarial", &d_adv)], kind);
        let grads = gradients(&loss, self.d_opt.params())?;
        self.d_opt.step(&grads)?;

        // Discriminator: lazy R1.
        if weights.r1_due(it) {
            let d = &self.discriminator;
            let r1 = r1_penalty(&real, |x| d.discriminate(x), weights.r1_weight)?;
            let parts = LossParts { adversarial: 0.0, r1: Some(scalar(&r1)), ..Default::default() };
            let terms: Vec<LossTerm> =
                compose_loss(&parts, &weights, it, LossRole::Discriminator).into_iter().filter(|t| t.name == "r1").collect();
            report.d_terms.extend(terms.iter().cloned());
            self.check_finite(parts.r1.unwrap_or_default(), "r1", &report)?;
            let loss = Self::weighted(&terms, &[("r1", &r1)], kind);
            let grads = gradients(&loss, self.d_opt.params())?;
            self.d_opt.step(&grads)?;
        }

        // Generator: adversarial + KL + perceptual.
        let eps = self.eps(b);
        let out = {
            let mut noise = Noise::Sampled(&mut self.rng);
            self.generator.forward(&batch.inputs, &eps, &mut noise)?
        };
        let g_adv = g_adv_loss(&self.discriminator.discriminate(&self.d_view(&out.image)?)?);
        let kl = kl_loss(&out.mu, &out.logvar)?;
        let perc = if weights.perceptual_due(it) {
            Some(perceptual_loss(&out.image, &batch.targets, self.extractor.as_ref())?)
        } else {
            None
        };
        let parts = LossParts {
            adversarial: scalar(&g_adv),
            kl: Some(scalar(&kl)),
            perceptual: perc.as_ref().map(scalar),
            ..Default::default()
        };
        let terms: Vec<LossTerm> =
            compose_loss(&parts, &weights, it, LossRole::Generator).into_iter().filter(|t| t.name != "path_length").collect();
        report.g_terms.extend(terms.iter().cloned());
        for t in &terms {
            self.check_finite(t.value, &format!("generator {}", t.name), &report)?;
        }
        let mut named: Vec<(&str, &Tensor)> = vec![("adversarial", &g_adv), ("kl", &kl)];
        if let Some(p) = &perc {
            named.push(("perceptual", p));
        }
        let loss = Self::weighted(&terms, &named, kind);
        let grads = gradients(&loss, self.g_opt.params())?;
        self.g_opt.step(&grads)?;

        // Generator: lazy path length.
        if weights.pathlen_due(it) {
            let eps = self.eps(b);
            let out = {
                let mut noise = Noise::Sampled(&mut self.rng);
                self.generator.forward(&batch.inputs, &eps, &mut noise)?
            };
            let y = path_length_noise(&mut self.rng, &out.image);
            let (pl, new_mean) =
                path_length_penalty(&out.w, &out.image, &y, self.pl_mean, weights.pathlen_weight, weights.pathlen_decay)?;
            let parts = LossParts { path_length: Some(scalar(&pl)), ..Default::default() };
            let terms: Vec<LossTerm> =
                compose_loss(&parts, &weights, it, LossRole::Generator).into_iter().filter(|t| t.name == "path_length").collect();
            report.g_terms.extend(terms.iter().cloned());
            self.check_finite(parts.path_length.unwrap_or_default(), "path_length", &report)?;
            let loss = Self::weighted(&terms, &[("path_length", &pl)], kind);
            let grads = gradients(&loss, self.g_opt.params())?;
            self.g_opt.step(&grads)?;
            self.pl_mean = new_mean;
        }

        ema_update(&self.ema_vs, &self.g_vs, self.config.ema_decay)?;
        report.pl_mean = self.pl_mean;
        self.iteration += 1;
        Ok(report)
    }

    /// Perceptual loss and label-region colour agreement on `dataset` with
    /// `z = mu` and no layer noise.
    pub fn evaluate(&self, dataset: &Batch, use_ema: bool) -> Result<EvalReport> {
        let g = if use_ema { &self.g_ema } else { &self.generator };
        evaluate_generator(g, dataset, self.extractor.as_ref(), self.iteration)
    }

    /// Sample images (`[0, 1]` rasters) for the first `n` dataset examples.
    pub fn samples(&self, dataset: &Batch, n: usize, use_ema: bool) -> Result<Vec<(Raster, Raster)>> {
        let g = if use_ema { &self.g_ema } else { &self.generator };
        let n = n.min(dataset.len());
        let sub = dataset.select(&(0..n).collect::<Vec<_>>());
        let images = mean_images(g, &sub.inputs)?;
        (0..n as i64)
            .map(|i| Ok((image_tensor_to_unit_raster(&sub.targets.get(i))?, image_tensor_to_unit_raster(&images.get(i))?)))
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            train_config: self.config.clone(),
            data: self.data.clone(),
            generator: self.gen_config.clone(),
            discriminator: self.disc_config.clone(),
            iteration: self.iteration,
            pl_mean: self.pl_mean,
            rng: RngState::capture(&self.rng),
        };
        let mut tensors = Vec::new();
        for (prefix, vs) in [("g/", &self.g_vs), ("d/", &self.d_vs), ("g_ema/", &self.ema_vs)] {
            tensors.extend(named_parameters(vs).into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        tensors.extend(self.g_opt.state().into_iter().map(|(n, t)| (format!("g_opt/{n}"), t)));
        tensors.extend(self.d_opt.state().into_iter().map(|(n, t)| (format!("d_opt/{n}"), t)));
        Ok(Container { meta: serde_json::to_string_pretty(&meta)?, tensors })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let meta = CheckpointMeta::parse(c)?;
        let mut t = Trainer::new(&meta.train_config, &meta.data)?;
        if t.gen_config != meta.generator || t.disc_config != meta.discriminator {
            return Err(Error::Format { path: path.to_path_buf(), reason: "network config snapshot disagrees with training config".into() });
        }
        load_store(&t.g_vs, &c.section("g/"), path)?;
        load_store(&t.d_vs, &c.section("d/"), path)?;
        load_store(&t.ema_vs, &c.section("g_ema/"), path)?;
        t.g_opt.load_state(&c.section("g_opt/"))?;
        t.d_opt.load_state(&c.section("d_opt/"))?;
        t.iteration = meta.iteration;
        t.pl_mean = meta.pl_mean;
        t.rng = meta.rng.restore()?;
        Ok(t)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

/// Copy named tensors into a store; every variable must be present.
pub fn load_store(vs: &VarStore, named: &[(String, Tensor)], path: &Path) -> Result<()> {
    let vars = vs.variables();
    if vars.len() != named.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} tensors, found {}", vars.len(), named.len()),
        });
    }
    tch::no_grad(|| {
        for (name, src) in named {
            let mut dst = vars
                .get(name)
                .ok_or_else(|| Error::Format { path: path.to_path_buf(), reason: format!("unexpected tensor {name}") })?
                .shallow_clone();
            if dst.size() != src.size() {
                return Err(Error::Format { path: path.to_path_buf(), reason: format!("tensor {name} has shape {:?}", src.size()) });
            }
            dst.copy_(&src.to_kind(dst.kind()));
        }
        Ok(())
    })
}

/// Generator output with `z = mu` and no layer noise.
pub fn mean_images(g: &Generator, inputs: &Tensor) -> Result<Tensor> {
    let _guard = tch::no_grad_guard();
    let b = inputs.size()[0];
    let eps = Tensor::zeros([b, g.config().encoder.latent_dim], (inputs.kind(), Device::Cpu));
    Ok(g.forward(inputs, &eps, &mut Noise::Off)?.image)
}

pub fn evaluate_generator(g: &Generator, dataset: &Batch, extractor: &dyn FeatureExtractor, iteration: u64) -> Result<EvalReport> {
    let images = mean_images(g, &dataset.inputs)?;
    let perceptual = {
        let _guard = tch::no_grad_guard();
        scalar(&perceptual_loss(&images, &dataset.targets, extractor)?)
    };
    let mut diffs = Vec::new();
    for i in 0..dataset.len() {
        let gen = image_tensor_to_unit_raster(&images.get(i as i64))?;
        let tgt = image_tensor_to_unit_raster(&dataset.targets.get(i as i64))?;
        for region in &dataset.regions[i] {
            if let (Some(a), Some(b)) = (gen.masked_mean(region), tgt.masked_mean(region)) {
                diffs.push(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
            }
        }
    }
    let mean_diff = if diffs.is_empty() { 0.0 } else { diffs.iter().sum::<f64>() / diffs.len() as f64 };
    Ok(EvalReport { iteration, perceptual, color_agreement: 1.0 - mean_diff })
}

/// Rows of image pairs laid out side by side with a 2-pixel gutter.
pub fn sample_grid(pairs: &[(Raster, Raster)]) -> Raster {
    let (h, w) = pairs.first().map(|p| p.0.dims()).unwrap_or((1, 1));
    let gap = 2;
    let mut grid = Raster::filled(pairs.len().max(1) * (h + gap), 2 * (w + gap), 3, 1.0);
    for (i, (a, b)) in pairs.iter().enumerate() {
        let y = (i * (h + gap)) as i64;
        grid.paste(a, y, 0);
        grid.paste(b, y, (w + gap) as i64);
    }
    grid
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub reports: Vec<StepReport>,
    pub evals: Vec<EvalReport>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(run_dir: &Path, iteration: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("iter_{iteration:06}.ckpt"))
}

/// Run (or resume) training up to `config.total_iterations`.
///
/// Writes into `run_dir`: `config.json`, `log.jsonl`, `eval.jsonl`,
/// `checkpoints/iter_*.ckpt`, `checkpoints/latest.ckpt` and
/// `samples/iter_*.png`. `on_report` sees every step report.
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    run_dir: &Path,
    resume: Option<&Path>,
    mut on_report: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    let data = DataShape::of(corpus);
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::load_checkpoint(path)?;
            if t.data != data {
                return Err(Error::Config("resumed checkpoint was trained on a differently shaped corpus".into()));
            }
            if t.config.role != config.role {
                return Err(Error::Config("resumed checkpoint has a different role".into()));
            }
            t
        }
        None => Trainer::new(config, &data)?,
    };
    // The stored config governs the trajectory; only the horizon and output
    // cadences may change on resume.
    trainer.config.total_iterations = config.total_iterations;
    trainer.config.checkpoint_every = config.checkpoint_every;
    trainer.config.sample_every = config.sample_every;
    trainer.config.eval_every = config.eval_every;
    trainer.config.log_every = config.log_every;
    trainer.set_diagnostics_dir(Some(run_dir.to_path_buf()));

    for dir in [run_dir.to_path_buf(), run_dir.join("samples"), run_dir.join("checkpoints")] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let cfg_path = run_dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&trainer.config)?).map_err(|e| Error::io(&cfg_path, e))?;
    let dataset = make_dataset(&trainer.config, corpus)?;
    log::info!("training {:?} on {} examples", trainer.config.role, dataset.len());

    let log_path = run_dir.join("log.jsonl");
    let mut log_file = std::fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let eval_path = run_dir.join("eval.jsonl");
    let mut eval_file =
        std::fs::OpenOptions::new().create(true).append(true).open(&eval_path).map_err(|e| Error::io(&eval_path, e))?;

    let mut reports = Vec::new();
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();
    let every = |n: u64, it: u64| n > 0 && it % n == 0;
    while trainer.iteration < trainer.config.total_iterations {
        let batch = trainer.sample_batch(&dataset);
        let report = trainer.train_step(&batch)?;
        writeln!(log_file, "{}", serde_json::to_string(&report)?).map_err(|e| Error::io(&log_path, e))?;
        if every(trainer.config.log_every, report.iteration) {
            let g: Vec<String> = report.g_terms.iter().map(|t| format!("{}={:.4}", t.name, t.value)).collect();
            log::info!("iter {} d_adv={:.4} {}", report.iteration, report.d_terms[0].value, g.join(" "));
        }
        on_report(&report);
        reports.push(report);

        let done = trainer.iteration;
        if every(trainer.config.eval_every, done) {
            let e = trainer.evaluate(&dataset, false)?;
            writeln!(eval_file, "{}", serde_json::to_string(&e)?).map_err(|e| Error::io(&eval_path, e))?;
            evals.push(e);
        }
        if every(trainer.config.sample_every, done) || done == trainer.config.total_iterations {
            let grid = sample_grid(&trainer.samples(&dataset, 8, true)?);
            save_rgb_png(&grid, &run_dir.join("samples").join(format!("iter_{done:06}.png")))?;
        }
        if every(trainer.config.checkpoint_every, done) || done == trainer.config.total_iterations {
            let path = checkpoint_path(run_dir, done);
            trainer.save_checkpoint(&path)?;
            std::fs::copy(&path, run_dir.join("checkpoints").join("latest.ckpt")).map_err(|e| Error::io(&path, e))?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome { trainer, reports, evals, checkpoints })
}

/// Mean colour of `image` (`[C, H, W]` in `[-1, 1]`) inside `mask`, mapped to `[0, 1]`.
pub fn region_mean_color(image: &Tensor, mask: &Mask) -> Result<Option<Vec<f64>>> {
    let s = image.size();
    let (h, w) = (s[1] as usize, s[2] as usize);
    if mask.dims() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", mask.dims(), s)));
    }
    let data = to_f32_vec(image)?;
    let n = mask.count();
    if n == 0 {
        return Ok(None);
    }
    let c = s[0] as usize;
    let mut out = vec![0.0f64; c];
    for (ch, acc) in out.iter_mut().enumerate() {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        let sum: f64 = plane.iter().zip(mask.as_slice()).filter(|(_, &m)| m).map(|(&v, _)| ((v as f64 + 1.0) * 0.5).clamp(0.0, 1.0)).sum();
        *acc = sum / n as f64;
    }
    Ok(Some(out))
}
