//! Command-line front end. `main.rs` only forwards `std::env::args_os`.

use crate::composition::{save_plan_outputs, Pipeline};
use crate::config::{resolve, run_root, RunConfig};
use crate::datamodel::{derive_edge_map, InstanceMap, RemovalMode, SemanticMap};
use crate::error::Error;
use crate::gradcheck::{run_suite, Suite, TOLERANCE};
use crate::io::{load_label_png, save_rgb_png, Corpus};
use crate::raster::ResizeMode;
use crate::synthetic::generate_corpus;
use crate::training::{train, GeneratorModel, TrainRole};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "semsynth", version, about = "Semantic image synthesis with class-specific generators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus with its manifest.
    MakeDataset {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base generator or one class generator.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// `base` or `class:<id>`.
        #[arg(long, value_parser = parse_role)]
        role: Option<RoleArg>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<runs_dir>/<role>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Synthesize scenes from label maps.
    Infer {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        base_ckpt: PathBuf,
        /// Class generator checkpoints (comma separated or repeated).
        #[arg(long, value_delimiter = ',')]
        class_ckpts: Vec<PathBuf>,
        /// Semantic and instance label PNGs of one scene; repeat for more scenes.
        #[arg(long, num_args = 2, value_names = ["SEMANTIC", "INSTANCES"], required = true)]
        scene: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class ids to replace, comma separated. Defaults to every class with a
        /// checkpoint; an empty list writes only the base image.
        #[arg(long, value_parser = parse_class_list)]
        classes: Option<ClassList>,
        /// Upscale the base canvas by this factor before compositing.
        #[arg(long, default_value_t = 1)]
        mixed_res: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks at float64.
    Gradcheck {
        /// encoder, decoder, discriminator, losses, cropper or all.
        #[arg(long, default_value = "all")]
        module: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoleArg {
    Base,
    Class(u16),
}

fn parse_role(s: &str) -> std::result::Result<RoleArg, String> {
    if s == "base" {
        return Ok(RoleArg::Base);
    }
    s.strip_prefix("class:")
        .and_then(|id| id.parse().ok())
        .map(RoleArg::Class)
        .ok_or_else(|| format!("expected `base` or `class:<id>`, got {s:?}"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassList(pub Vec<u16>);

fn parse_class_list(s: &str) -> std::result::Result<ClassList, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u16>().map_err(|_| format!("bad class id {t:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(ClassList)
}

/// Command failure, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(arg: &ConfigArg, root: &Path) -> CliResult<RunConfig> {
    match &arg.config {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let path = resolve(root, p);
            if !path.is_file() {
                return Err(CliError::Usage(format!("config file {} not found", path.display())));
            }
            RunConfig::load(&path).map_err(|e| CliError::Usage(e.to_string()))
        }
    }
}

/// Parse and run; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let root = run_root();
    match cli.command {
        Command::MakeDataset { config, seed, count, out } => {
            let mut cfg = load_config(&config, &root)?;
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            if let Some(n) = count {
                cfg.dataset.count = n;
            }
            if let Some(o) = out {
                cfg.dataset.out_dir = o;
            }
            cfg.dataset.grammar.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let dir = resolve(&root, &cfg.dataset.out_dir);
            let manifest = generate_corpus(cfg.dataset.seed, &cfg.dataset.grammar, cfg.dataset.count, &dir)?;
            cfg.persist(&dir)?;
            println!("wrote {} scenes to {}", manifest.scenes.len(), dir.display());
            Ok(())
        }
        Command::Train { config, role, resume, corpus, iterations, batch_size, seed, run_dir } => {
            let mut cfg = load_config(&config, &root)?;
            let p = &mut cfg.train.params;
            match role {
                Some(RoleArg::Base) => p.role = TrainRole::Base,
                Some(RoleArg::Class(id)) => {
                    p.role = match p.role.clone() {
                        TrainRole::Class { model_res, removal_mode, blur_sigma, ablate_context_image, .. } => {
                            TrainRole::Class { class_id: id, model_res, removal_mode, blur_sigma, ablate_context_image }
                        }
                        TrainRole::Base => TrainRole::Class {
                            class_id: id,
                            model_res: 64,
                            removal_mode: RemovalMode::ZeroMask,
                            blur_sigma: None,
                            ablate_context_image: false,
                        },
                    }
                }
                None => {}
            }
            if let Some(n) = iterations {
                p.total_iterations = n;
            }
            if let Some(b) = batch_size {
                p.batch_size = b;
            }
            if let Some(s) = seed {
                p.seed = s;
            }
            if let Some(c) = corpus {
                cfg.train.corpus = c;
            }
            cfg.train.params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let role_dir = match &cfg.train.params.role {
                TrainRole::Base => "base".to_string(),
                TrainRole::Class { class_id, .. } => format!("class_{class_id}"),
            };
            let dir = run_dir.map(|d| resolve(&root, &d)).unwrap_or_else(|| resolve(&root, &cfg.train.runs_dir).join(role_dir));
            let corpus_dir = resolve(&root, &cfg.train.corpus);
            let corpus = Corpus::load(&corpus_dir)?;
            cfg.persist(&dir)?;
            let resume = resume.map(|r| resolve(&root, &r));
            let out = train(&cfg.train.params, &corpus, &dir, resume.as_deref(), |_| {})?;
            println!("trained to iteration {}; checkpoints in {}", out.trainer.iteration, dir.join("checkpoints").display());
            Ok(())
        }
        Command::Infer { config, base_ckpt, class_ckpts, scene, seed, classes, mixed_res, out } => {
            let cfg = load_config(&config, &root)?;
            if mixed_res == 0 {
                return Err(CliError::Usage("--mixed-res must be at least 1".into()));
            }
            let out_dir = resolve(&root, out.as_deref().unwrap_or(&cfg.infer.out_dir));
            let use_ema = cfg.infer.use_ema;
            let base = GeneratorModel::load(&resolve(&root, &base_ckpt), use_ema)?;
            let models = class_ckpts.iter().map(|p| GeneratorModel::load(&resolve(&root, p), use_ema)).collect::<crate::Result<Vec<_>>>()?;
            let pipeline = Pipeline::new(base, models, cfg.infer.blend, cfg.infer.latent)?;
            let whitelist = classes.map(|c| c.0).unwrap_or_else(|| pipeline.classes.keys().copied().collect());
            let num_classes = pipeline.base.data.num_classes as u16;
            cfg.persist(&out_dir)?;
            for (k, pair) in scene.chunks(2).enumerate() {
                let (sem_path, ins_path) = (resolve(&root, &pair[0]), resolve(&root, &pair[1]));
                let semantic = SemanticMap::new(load_label_png(&sem_path)?, num_classes)?;
                let instances = InstanceMap::new(load_label_png(&ins_path)?);
                let stem = sem_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("scene_{k}"));
                let dir = out_dir.join(format!("{k:03}_{stem}"));
                let edges = derive_edge_map(&instances);
                let plan = pipeline.plan(&semantic, &instances, &whitelist, seed)?;
                let output = if mixed_res == 1 {
                    pipeline.run(&semantic, &instances, &edges, &plan)?
                } else {
                    let base = crate::composition::infer_base(&pipeline.base, &semantic, &edges, pipeline.latent, plan.base_seed)?;
                    let (h, w) = base.dims();
                    let (bh, bw) = (h * mixed_res, w * mixed_res);
                    let big = base.resize(bh, bw, ResizeMode::Bilinear)?;
                    let sem = semantic.resize_nearest(bh, bw);
                    let ins = instances.resize_nearest(bh, bw);
                    let big_plan = pipeline.plan(&sem, &ins, &whitelist, seed)?;
                    pipeline.compose_onto(big, &sem, &ins, &big_plan)?
                };
                if whitelist.is_empty() {
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    save_rgb_png(&output.base, &dir.join("base.png"))?;
                } else {
                    save_plan_outputs(&output, &dir)?;
                }
                println!("{}: {} instances replaced -> {}", sem_path.display(), output.plan.steps.len(), dir.display());
            }
            Ok(())
        }
        Command::Gradcheck { module } => {
            let suites: Vec<Suite> = if module == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![module.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?]
            };
            let mut failed = 0;
            for s in suites {
                for r in run_suite(s)? {
                    let mark = if r.passed() { "ok" } else { "FAIL" };
                    println!("{:<14} {:<24} max_rel_err={:.3e} probes={} {mark}", r.suite, r.op, r.max_rel_error, r.probes);
                    failed += usize::from(!r.passed());
                }
            }
            if failed > 0 {
                return Err(Error::InvalidArgument(format!("{failed} ops exceed relative error {TOLERANCE:e}")).into());
            }
            Ok(())
        }
    }
}
