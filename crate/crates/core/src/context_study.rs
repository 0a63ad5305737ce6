//! Context-dependence study: train a class generator on scenes whose object
//! colour is a function of the background hue, then check whether generated
//! colours follow held-out backgrounds. An ablated twin sees a zeroed
//! context image and has to ignore the background.

use crate::composition::{generate_instance, LatentMode};
use crate::datamodel::extract_instances;
use crate::error::{Error, Result};
use crate::io::Corpus;
use crate::synthetic::{coupled_color, generate_corpus, ShapeKind, SceneGrammar};
use crate::training::{instance_eligible, train, GeneratorModel, TrainConfig, TrainRole};
use crate::datamodel::RemovalMode;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextStudyConfig {
    pub corpus_seed: u64,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub canvas_size: usize,
    pub model_res: usize,
    pub train: TrainConfig,
}

impl Default for ContextStudyConfig {
    fn default() -> Self {
        let role = TrainRole::Class {
            class_id: 1,
            model_res: 64,
            removal_mode: RemovalMode::ZeroMask,
            blur_sigma: None,
            ablate_context_image: false,
        };
        Self {
            corpus_seed: 100,
            train_scenes: 64,
            heldout_scenes: 32,
            canvas_size: 128,
            model_res: 64,
            train: TrainConfig { role, batch_size: 4, total_iterations: 3000, ..TrainConfig::default() },
        }
    }
}

impl ContextStudyConfig {
    /// Scenes with one or two large rectangles whose fill is coupled to the background.
    pub fn grammar(&self) -> SceneGrammar {
        SceneGrammar {
            min_shapes: 1,
            max_shapes: 2,
            shape_kinds: vec![ShapeKind::Rectangle],
            min_shape_size: self.model_res / 2,
            max_shape_size: self.canvas_size * 3 / 8,
            context_coupling: true,
            ..SceneGrammar::with_canvas(self.canvas_size)
        }
    }

    fn role(&self, ablate: bool) -> TrainRole {
        TrainRole::Class {
            class_id: 1,
            model_res: self.model_res,
            removal_mode: RemovalMode::ZeroMask,
            blur_sigma: None,
            ablate_context_image: ablate,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCorrelation {
    pub ablated: bool,
    /// Pearson r per RGB channel.
    pub per_channel: [f64; 3],
    pub mean_r: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextStudyReport {
    pub heldout: usize,
    pub with_context: ModelCorrelation,
    pub ablated: ModelCorrelation,
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Correlate generated instance colours with the coupling function on a
/// held-out corpus. One instance per scene (the largest eligible one).
pub fn measure(model: &GeneratorModel, heldout: &Corpus, ablated: bool) -> Result<ModelCorrelation> {
    let TrainRole::Class { class_id, model_res, .. } = *model.role() else {
        return Err(Error::InvalidArgument("context study needs a class model".into()));
    };
    let mut generated: [Vec<f64>; 3] = Default::default();
    let mut expected: [Vec<f64>; 3] = Default::default();
    for (entry, scene) in heldout.manifest.scenes.iter().zip(&heldout.scenes) {
        let tint = entry.background_tint.ok_or_else(|| Error::Config("held-out scene without background tint".into()))?;
        let mut recs: Vec<_> = extract_instances(&scene.instances, &scene.semantic)?
            .into_iter()
            .filter(|r| r.class_id == class_id && instance_eligible(r, model_res))
            .collect();
        recs.sort_by_key(|r| std::cmp::Reverse(r.area));
        let Some(rec) = recs.first() else { continue };
        let (img, _) = generate_instance(&scene.image, &scene.semantic, &scene.instances, rec, model, LatentMode::Mean, 0)?;
        let mask = rec.mask.resize_nearest(model_res, model_res);
        let n = mask.count().max(1) as f64;
        let target = coupled_color(tint);
        for c in 0..3 {
            let mut sum = 0.0;
            for y in 0..model_res {
                for x in 0..model_res {
                    if mask.get(y, x) {
                        sum += img.get(y, x, c) as f64;
                    }
                }
            }
            generated[c].push(sum / n);
            expected[c].push(target[c] as f64);
        }
    }
    let per_channel: [f64; 3] = std::array::from_fn(|c| pearson(&generated[c], &expected[c]).unwrap_or(0.0));
    Ok(ModelCorrelation { ablated, per_channel, mean_r: per_channel.iter().sum::<f64>() / 3.0 })
}

/// Build both corpora, train the context and ablated models with the same
/// budget and measure them. Artifacts go under `dir`.
pub fn run_context_study(cfg: &ContextStudyConfig, dir: &Path) -> Result<ContextStudyReport> {
    let grammar = cfg.grammar();
    let train_dir = dir.join("corpus_train");
    let heldout_dir = dir.join("corpus_heldout");
    generate_corpus(cfg.corpus_seed, &grammar, cfg.train_scenes, &train_dir)?;
    // Held-out seeds start after the training seeds.
    generate_corpus(cfg.corpus_seed + cfg.train_scenes as u64, &grammar, cfg.heldout_scenes, &heldout_dir)?;
    let train_corpus = Corpus::load(&train_dir)?;
    let heldout = Corpus::load(&heldout_dir)?;

    let mut results = Vec::new();
    for ablate in [false, true] {
        let tc = TrainConfig { role: cfg.role(ablate), ..cfg.train.clone() };
        let run = dir.join(if ablate { "ablated" } else { "context" });
        let out = train(&tc, &train_corpus, &run, None, |_| {})?;
        let model = GeneratorModel::from_trainer(&out.trainer, true)?;
        let m = measure(&model, &heldout, ablate)?;
        log::info!("{}: r = {:.3} {:?}", if ablate { "ablated" } else { "context" }, m.mean_r, m.per_channel);
        results.push(m);
    }
    let ablated = results.pop().expect("two runs");
    let with_context = results.pop().expect("two runs");
    let report = ContextStudyReport { heldout: heldout.len(), with_context, ablated };
    let path = dir.join("context_study.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
