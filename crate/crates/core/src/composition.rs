//! Inference: render the base image, then re-render instances with their
//! class models largest-first and alpha-composite each one onto the running
//! canvas.

use crate::datamodel::{build_context, extract_instances, BBox, ContextPair, EdgeMap, InstanceMap, InstanceRecord, SceneSample, SemanticMap};
use crate::error::{Error, Result};
use crate::io::save_rgb_png;
use crate::model::decoder::Noise;
use crate::raster::{Grid, Mask, Raster, ResizeMode};
use crate::tensor::{image_tensor_to_unit_raster, randn, raster_to_tensor};
use crate::training::{GeneratorModel, TrainRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use tch::Tensor;

/// Soft alpha over the canvas, values in `[0, 1]`.
pub type BlendMask = Grid<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendConfig {
    /// Dilation radius in pixels (4-neighbour steps).
    pub dilate_radius: usize,
    /// Gaussian sigma of the edge softening; 0 disables it.
    pub soften_sigma: f32,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { dilate_radius: 2, soften_sigma: 1.0 }
    }
}

/// How the latent of a generator is chosen at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// `z ~ N(0, I)` drawn from the seed.
    Prior,
    /// `z = mu + sigma * eps` from the encoder, `eps` drawn from the seed.
    Posterior,
    /// `z = mu`.
    Mean,
}

/// 1 where `ins == target_id`, else 0.
pub fn alpha_mask(ins: &InstanceMap, target_id: u16) -> Result<BlendMask> {
    let mask = ins.ids().map(|v| if v == target_id { 1.0f32 } else { 0.0 });
    if !mask.as_slice().iter().any(|&v| v > 0.0) {
        return Err(Error::MissingInstance(target_id));
    }
    Ok(mask)
}

/// Resize `instance` to `tight_box` and place it on a zero canvas.
pub fn relocate(instance: &Raster, tight_box: &BBox, canvas_h: usize, canvas_w: usize) -> Result<Raster> {
    let b = tight_box;
    if b.x1 <= b.x0 || b.y1 <= b.y0 {
        return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
    }
    if b.x0 < 0 || b.y0 < 0 || b.x1 > canvas_w as i64 || b.y1 > canvas_h as i64 {
        return Err(Error::InvalidArgument(format!("box {b:?} outside {canvas_h}x{canvas_w} canvas")));
    }
    let resized = instance.resize(b.height() as usize, b.width() as usize, ResizeMode::Bilinear)?;
    let mut canvas = Raster::zeros(canvas_h, canvas_w, instance.channels());
    canvas.paste(&resized, b.y0, b.x0);
    Ok(canvas)
}

/// `radius` rounds of 4-neighbour dilation.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = mask.dims();
    let mut cur = mask.clone();
    for _ in 0..radius {
        cur = Grid::from_fn(h, w, |y, x| {
            cur.get(y, x)
                || (y > 0 && cur.get(y - 1, x))
                || (y + 1 < h && cur.get(y + 1, x))
                || (x > 0 && cur.get(y, x - 1))
                || (x + 1 < w && cur.get(y, x + 1))
        });
    }
    cur
}

/// Copy every pixel of `region` not in `source` from its nearest `source`
/// pixel (breadth-first over 4-neighbours, restricted to `region`).
pub fn nearest_fill(image: &Raster, source: &Mask, region: &Mask) -> Raster {
    let (h, w) = source.dims();
    let mut out = image.clone();
    let mut owner: Grid<Option<(usize, usize)>> = Grid::filled(h, w, None);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if source.get(y, x) {
                owner.set(y, x, Some((y, x)));
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let o = owner.get(y, x);
        let mut visit = |ny: usize, nx: usize| {
            if region.get(ny, nx) && owner.get(ny, nx).is_none() {
                owner.set(ny, nx, o);
                queue.push_back((ny, nx));
            }
        };
        if y > 0 {
            visit(y - 1, x);
        }
        if y + 1 < h {
            visit(y + 1, x);
        }
        if x > 0 {
            visit(y, x - 1);
        }
        if x + 1 < w {
            visit(y, x + 1);
        }
    }
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x) && !source.get(y, x) {
                if let Some((sy, sx)) = owner.get(y, x) {
                    let v = image.pixel(sy, sx).to_vec();
                    out.pixel_mut(y, x).copy_from_slice(&v);
                }
            }
        }
    }
    out
}

/// Grow and soften the blend mask, extending the instance image over the
/// grown band.
///
/// `M' = max(M, blur(D) * D)` where `D` is the dilated support, so `M' >= M`
/// and `M'` is zero exactly outside `D`.
pub fn dilate_soften(mask: &BlendMask, image: &Raster, cfg: &BlendConfig) -> Result<(BlendMask, Raster)> {
    if mask.dims() != image.dims() {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", mask.dims(), image.dims())));
    }
    let binary = mask.map(|v| v > 0.5);
    let grown = dilate(&binary, cfg.dilate_radius);
    let soft = Raster::from_mask(&grown).gaussian_blur(cfg.soften_sigma);
    let (h, w) = mask.dims();
    let m = Grid::from_fn(h, w, |y, x| {
        let band = if grown.get(y, x) { soft.get(y, x, 0).clamp(0.0, 1.0) } else { 0.0 };
        mask.get(y, x).max(band)
    });
    Ok((m, nearest_fill(image, &binary, &grown)))
}

/// `M' * I' + (1 - M') * I_b`, per pixel and channel.
pub fn composite(base: &Raster, instance: &Raster, mask: &BlendMask) -> Result<Raster> {
    if base.dims() != instance.dims() || base.dims() != mask.dims() || base.channels() != instance.channels() {
        return Err(Error::Shape(format!(
            "base {:?}x{}, instance {:?}x{}, mask {:?}",
            base.dims(),
            base.channels(),
            instance.dims(),
            instance.channels(),
            mask.dims()
        )));
    }
    let (h, w) = base.dims();
    Ok(Raster::from_fn(h, w, base.channels(), |y, x, c| {
        let m = mask.get(y, x);
        m * instance.get(y, x, c) + (1.0 - m) * base.get(y, x, c)
    }))
}

/// One instance replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub record: InstanceRecord,
    /// Class model used (its class id).
    pub model: u16,
    pub z_seed: u64,
}

/// Ordered instance replacements: area descending, ties by instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionPlan {
    pub base_seed: u64,
    pub steps: Vec<PlanStep>,
}

impl CompositionPlan {
    /// Plan the replacement of every record whose class is whitelisted and
    /// has a model. Seeds derive from `seed`: the base seed first, then one
    /// per step in plan order.
    pub fn new(records: &[InstanceRecord], whitelist: &[u16], has_model: impl Fn(u16) -> bool, seed: u64) -> Self {
        let mut chosen: Vec<&InstanceRecord> = records
            .iter()
            .filter(|r| whitelist.contains(&r.class_id))
            .filter(|r| {
                let ok = has_model(r.class_id);
                if !ok {
                    log::info!("no model for class {}; instance {} keeps the base rendering", r.class_id, r.instance_id);
                }
                ok
            })
            .collect();
        chosen.sort_by(|a, b| b.area.cmp(&a.area).then(a.instance_id.cmp(&b.instance_id)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_seed = rng.gen();
        let steps = chosen.into_iter().map(|r| PlanStep { record: r.clone(), model: r.class_id, z_seed: rng.gen() }).collect();
        Self { base_seed, steps }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn latent(model: &GeneratorModel, input: &Tensor, mode: LatentMode, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = randn(&mut rng, &[1, model.latent_dim()], model.kind());
    let _guard = tch::no_grad_guard();
    match mode {
        LatentMode::Prior => Ok(draw),
        LatentMode::Posterior => model.generator.posterior_sample(input, &draw),
        LatentMode::Mean => model.generator.posterior_sample(input, &draw.zeros_like()),
    }
}

fn run_generator(model: &GeneratorModel, input: &Raster, mode: LatentMode, seed: u64) -> Result<Raster> {
    let x = raster_to_tensor(input, model.kind()).unsqueeze(0);
    let z = latent(model, &x, mode, seed)?;
    let _guard = tch::no_grad_guard();
    let img = model.generator.forward_with_z(&x, &z, &mut Noise::Off)?;
    image_tensor_to_unit_raster(&img)
}

/// Base image `I_b` (in `[0, 1]`) for a semantic map and edge map.
pub fn infer_base(model: &GeneratorModel, semantic: &SemanticMap, edges: &EdgeMap, mode: LatentMode, seed: u64) -> Result<Raster> {
    if model.role() != &TrainRole::Base {
        return Err(Error::InvalidArgument("infer_base needs a base-role checkpoint".into()));
    }
    let (h, w) = semantic.dims();
    if (h, w) != (model.data.height, model.data.width) || semantic.num_classes() as usize != model.data.num_classes {
        return Err(Error::Shape(format!(
            "scene {h}x{w} with {} classes, checkpoint expects {}x{} with {}",
            semantic.num_classes(),
            model.data.height,
            model.data.width,
            model.data.num_classes
        )));
    }
    let onehot = semantic.one_hot();
    let e = edges.as_raster();
    let nc = onehot.channels();
    let input = Raster::from_fn(h, w, nc + 1, |y, x, c| if c < nc { onehot.get(y, x, c) } else { e.get(y, x, 0) });
    run_generator(model, &input, mode, seed)
}

/// A class model together with the class it renders.
pub fn class_of(model: &GeneratorModel) -> Result<(u16, usize)> {
    match model.role() {
        TrainRole::Class { class_id, model_res, .. } => Ok((*class_id, *model_res)),
        TrainRole::Base => Err(Error::InvalidArgument("expected a class-role checkpoint".into())),
    }
}

/// Render `rec` with its class model from a context cut out of `canvas`.
pub fn generate_instance(
    canvas: &Raster,
    semantic: &SemanticMap,
    instances: &InstanceMap,
    rec: &InstanceRecord,
    model: &GeneratorModel,
    mode: LatentMode,
    seed: u64,
) -> Result<(Raster, ContextPair)> {
    let (class_id, model_res) = class_of(model)?;
    if class_id != rec.class_id {
        return Err(Error::MissingModel(rec.class_id));
    }
    let removal = model.role().removal().expect("class role has a removal");
    let ctx = build_context(canvas, semantic, instances, rec, removal, 2 * model_res)?;
    let image = run_generator(model, &model.role().context_input(&ctx), mode, seed)?;
    Ok((image, ctx))
}

/// Paste one generated instance onto `canvas`. Returns the new canvas and
/// the blend mask used.
pub fn paste_instance(
    canvas: &Raster,
    instances: &InstanceMap,
    rec: &InstanceRecord,
    instance_image: &Raster,
    blend: &BlendConfig,
) -> Result<(Raster, BlendMask)> {
    let (h, w) = canvas.dims();
    let reloc = relocate(instance_image, &rec.tight_box, h, w)?;
    let alpha = alpha_mask(instances, rec.instance_id)?;
    let (m, filled) = dilate_soften(&alpha, &reloc, blend)?;
    Ok((composite(canvas, &filled, &m)?, m))
}

/// Everything an inference run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub base: Raster,
    pub composite: Raster,
    pub plan: CompositionPlan,
    /// Generated instance crops `I_c`, in plan order.
    pub instances: Vec<Raster>,
    /// Union of the supports of all blend masks.
    pub touched: Mask,
}

/// Write `base.png`, `composite.png`, one `instance_<k>_id<id>.png` per
/// plan step and `plan.json` into `dir`.
pub fn save_plan_outputs(output: &PipelineOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_rgb_png(&output.base, &dir.join("base.png"))?;
    save_rgb_png(&output.composite, &dir.join("composite.png"))?;
    for (k, (step, ic)) in output.plan.steps.iter().zip(&output.instances).enumerate() {
        save_rgb_png(ic, &dir.join(format!("instance_{k:02}_id{}.png", step.record.instance_id)))?;
    }
    output.plan.save(&dir.join("plan.json"))
}

/// Base model plus the available class models.
#[derive(Debug)]
pub struct Pipeline {
    pub base: GeneratorModel,
    pub classes: BTreeMap<u16, GeneratorModel>,
    pub blend: BlendConfig,
    pub latent: LatentMode,
}

impl Pipeline {
    pub fn new(base: GeneratorModel, class_models: Vec<GeneratorModel>, blend: BlendConfig, latent: LatentMode) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for m in class_models {
            let (cid, _) = class_of(&m)?;
            if m.data.num_classes != base.data.num_classes {
                return Err(Error::Config(format!("class {cid} model was trained with a different class vocabulary")));
            }
            classes.insert(cid, m);
        }
        Ok(Self { base, classes, blend, latent })
    }

    /// Plan for a scene's instance map.
    pub fn plan(&self, semantic: &SemanticMap, instances: &InstanceMap, whitelist: &[u16], seed: u64) -> Result<CompositionPlan> {
        let records = extract_instances(instances, semantic)?;
        for c in whitelist {
            if !self.classes.contains_key(c) && records.iter().any(|r| r.class_id == *c) {
                return Err(Error::MissingModel(*c));
            }
        }
        Ok(CompositionPlan::new(&records, whitelist, |c| self.classes.contains_key(&c), seed))
    }

    pub fn run(&self, semantic: &SemanticMap, instances: &InstanceMap, edges: &EdgeMap, plan: &CompositionPlan) -> Result<PipelineOutput> {
        let base = infer_base(&self.base, semantic, edges, self.latent, plan.base_seed)?;
        self.compose_onto(base, semantic, instances, plan)
    }

    /// Run the instance loop of `plan` on a given starting canvas.
    pub fn compose_onto(&self, base: Raster, semantic: &SemanticMap, instances: &InstanceMap, plan: &CompositionPlan) -> Result<PipelineOutput> {
        let (h, w) = base.dims();
        let mut canvas = base.clone();
        let mut crops = Vec::new();
        let mut touched: Mask = Grid::filled(h, w, false);
        for step in &plan.steps {
            let model = self.classes.get(&step.model).ok_or(Error::MissingModel(step.model))?;
            let (ic, _) = generate_instance(&canvas, semantic, instances, &step.record, model, self.latent, step.z_seed)?;
            let (next, m) = paste_instance(&canvas, instances, &step.record, &ic, &self.blend)?;
            for (t, &v) in touched.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *t |= v > 0.0;
            }
            canvas = next;
            crops.push(ic);
        }
        Ok(PipelineOutput { base, composite: canvas, plan: plan.clone(), instances: crops, touched })
    }

    /// Full pipeline: plan from `seed`, render, composite.
    pub fn run_scene(&self, semantic: &SemanticMap, instances: &InstanceMap, edges: &EdgeMap, whitelist: &[u16], seed: u64) -> Result<PipelineOutput> {
        let plan = self.plan(semantic, instances, whitelist, seed)?;
        self.run(semantic, instances, edges, &plan)
    }
}

/// Upscale `base` by `factor` (bilinear) and composite one instance there,
/// so the class model renders at its own resolution on the large canvas.
/// The maps are nearest-upscaled; `rec` refers to the original coordinates.
pub fn mixed_resolution_composite(
    base: &Raster,
    factor: usize,
    semantic: &SemanticMap,
    instances: &InstanceMap,
    rec: &InstanceRecord,
    model: &GeneratorModel,
    blend: &BlendConfig,
    mode: LatentMode,
    seed: u64,
) -> Result<PipelineOutput> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upscale factor must be at least 1".into()));
    }
    let (h, w) = base.dims();
    let (bh, bw) = (h * factor, w * factor);
    let big = base.resize(bh, bw, ResizeMode::Bilinear)?;
    let sem = semantic.resize_nearest(bh, bw);
    let ins = instances.resize_nearest(bh, bw);
    let big_rec = extract_instances(&ins, &sem)?
        .into_iter()
        .find(|r| r.instance_id == rec.instance_id)
        .ok_or(Error::MissingInstance(rec.instance_id))?;
    let (ic, _) = generate_instance(&big, &sem, &ins, &big_rec, model, mode, seed)?;
    let (out, m) = paste_instance(&big, &ins, &big_rec, &ic, blend)?;
    let plan = CompositionPlan { base_seed: 0, steps: vec![PlanStep { record: big_rec, model: rec.class_id, z_seed: seed }] };
    Ok(PipelineOutput { base: big, composite: out, plan, instances: vec![ic], touched: m.map(|v| v > 0.0) })
}

/// Replace one object of a real scene; every pixel outside the grown mask
/// keeps its original value.
pub fn replace_in_real(
    scene: &SceneSample,
    rec: &InstanceRecord,
    model: &GeneratorModel,
    blend: &BlendConfig,
    mode: LatentMode,
    seed: u64,
) -> Result<(Raster, BlendMask)> {
    let (ic, _) = generate_instance(&scene.image, &scene.semantic, &scene.instances, rec, model, mode, seed)?;
    paste_instance(&scene.image, &scene.instances, rec, &ic, blend)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_mask_hand_case() {
        let ins = InstanceMap::new(Grid::from_rows(&[vec![1, 2], vec![2, 2]]));
        assert_eq!(alpha_mask(&ins, 2).unwrap().as_slice(), &[0.0, 1.0, 1.0, 1.0]);
        assert!(matches!(alpha_mask(&ins, 7), Err(Error::MissingInstance(7))));
    }

    #[test]
    fn relocate_small_window() {
        let ic = Raster::filled(2, 2, 3, 0.5);
        let out = relocate(&ic, &BBox { x0: 1, y0: 1, x1: 3, y1: 3 }, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let inside = (1..3).contains(&y) && (1..3).contains(&x);
                assert_eq!(out.get(y, x, 0) != 0.0, inside);
            }
        }
        assert!(relocate(&ic, &BBox { x0: 3, y0: 0, x1: 5, y1: 2 }, 4, 4).is_err());
    }

    #[test]
    fn single_pixel_dilates_to_plus() {
        let mut m: Mask = Grid::filled(5, 5, false);
        m.set(2, 2, true);
        let d = dilate(&m, 1);
        let set: Vec<(usize, usize)> = (0..25).map(|i| (i / 5, i % 5)).filter(|&(y, x)| d.get(y, x)).collect();
        assert_eq!(set, vec![(1, 2), (2, 1), (2, 2), (2, 3), (3, 2)]);
    }

    #[test]
    fn dilate_soften_identities() {
        let img = Raster::from_fn(4, 4, 3, |y, x, c| (y * 16 + x * 4 + c) as f32 / 64.0);
        let mut m: BlendMask = Grid::filled(4, 4, 0.0);
        m.set(1, 1, 1.0);
        let (m2, i2) = dilate_soften(&m, &img, &BlendConfig { dilate_radius: 0, soften_sigma: 0.0 }).unwrap();
        assert_eq!(m2, m);
        assert_eq!(i2, img);
        let ones: BlendMask = Grid::filled(4, 4, 1.0);
        let (m3, i3) = dilate_soften(&ones, &img, &BlendConfig::default()).unwrap();
        assert_eq!(m3, ones);
        assert_eq!(i3, img);
    }

    #[test]
    fn soft_mask_grows_and_fill_copies_nearest() {
        let mut img = Raster::zeros(7, 7, 1);
        img.set(3, 3, 0, 0.75);
        let mut m: BlendMask = Grid::filled(7, 7, 0.0);
        m.set(3, 3, 1.0);
        let (m2, i2) = dilate_soften(&m, &img, &BlendConfig::default()).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                assert!(m2.get(y, x) >= m.get(y, x));
                let dist = (y as i64 - 3).abs() + (x as i64 - 3).abs();
                assert_eq!(m2.get(y, x) > 0.0, dist <= 2);
                if dist <= 2 {
                    assert_eq!(i2.get(y, x, 0), 0.75);
                }
            }
        }
    }

    #[test]
    fn composite_limits() {
        let b = Raster::filled(2, 3, 3, 0.2);
        let i = Raster::filled(2, 3, 3, 0.9);
        assert_eq!(composite(&b, &i, &Grid::filled(2, 3, 1.0)).unwrap(), i);
        assert_eq!(composite(&b, &i, &Grid::filled(2, 3, 0.0)).unwrap(), b);
        assert!(composite(&b, &Raster::zeros(3, 3, 3), &Grid::filled(2, 3, 0.0)).is_err());
    }

    #[test]
    fn plan_orders_by_area_then_id() {
        let rec = |id, area| InstanceRecord {
            instance_id: id,
            class_id: 1,
            tight_box: BBox { x0: 0, y0: 0, x1: 1, y1: 1 },
            mask: Grid::filled(1, 1, true),
            area,
        };
        let plan = CompositionPlan::new(&[rec(1, 100), rec(2, 400), rec(3, 100), rec(4, 50)], &[1], |_| true, 0);
        let ids: Vec<u16> = plan.steps.iter().map(|s| s.record.instance_id).collect();
        assert_eq!(ids, vec![2, 1, 3, 4]);
        assert!(CompositionPlan::new(&[rec(1, 10)], &[], |_| true, 0).steps.is_empty());
    }
}
