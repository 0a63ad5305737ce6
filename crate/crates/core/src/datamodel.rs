//! Scene annotation types and the geometric operations shared by training and
//! inference: edge derivation, instance extraction, box enlargement,
//! padded cropping, foreground removal and context construction.

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask, Raster, ResizeMode};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-pixel class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMap {
    labels: Grid<u16>,
    num_classes: u16,
}

impl SemanticMap {
    pub fn new(labels: Grid<u16>, num_classes: u16) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.as_slice().iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self { labels, num_classes })
    }

    pub fn labels(&self) -> &Grid<u16> {
        &self.labels
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels.get(y, x)
    }

    /// One-hot channel stack (`num_classes` channels).
    pub fn one_hot(&self) -> Raster {
        let nc = self.num_classes as usize;
        Raster::from_fn(self.labels.height(), self.labels.width(), nc, |y, x, c| {
            if self.labels.get(y, x) as usize == c {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> SemanticMap {
        SemanticMap { labels: self.labels.resize_nearest(h, w), num_classes: self.num_classes }
    }
}

/// Per-pixel instance ids; 0 marks "no instance".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMap {
    ids: Grid<u16>,
}

impl InstanceMap {
    pub fn new(ids: Grid<u16>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &Grid<u16> {
        &self.ids
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ids.dims()
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.ids.get(y, x)
    }

    /// Canvas-sized mask of one instance id.
    pub fn mask_of(&self, id: u16) -> Mask {
        self.ids.map(|v| v == id)
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> InstanceMap {
        InstanceMap { ids: self.ids.resize_nearest(h, w) }
    }
}

/// Binary instance-boundary map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeMap {
    edges: Grid<u8>,
}

impl EdgeMap {
    pub fn edges(&self) -> &Grid<u8> {
        &self.edges
    }

    pub fn as_raster(&self) -> Raster {
        Raster::from_fn(self.edges.height(), self.edges.width(), 1, |y, x, _| self.edges.get(y, x) as f32)
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`; may extend past the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidArgument(format!("empty box ({x0},{y0},{x1},{y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn scaled(&self, factor: i64) -> BBox {
        BBox { x0: self.x0 * factor, y0: self.y0 * factor, x1: self.x1 * factor, y1: self.y1 * factor }
    }
}

/// An image with aligned semantic, instance and edge maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Raster,
    pub semantic: SemanticMap,
    pub instances: InstanceMap,
    pub edges: EdgeMap,
}

impl SceneSample {
    /// Assemble a scene, deriving the edge map from the instance map.
    pub fn new(image: Raster, semantic: SemanticMap, instances: InstanceMap) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!("scene image has {} channels", image.channels())));
        }
        if image.dims() != semantic.dims() || image.dims() != instances.dims() {
            return Err(Error::Shape(format!(
                "image {:?}, semantic {:?}, instances {:?}",
                image.dims(),
                semantic.dims(),
                instances.dims()
            )));
        }
        let edges = derive_edge_map(&instances);
        Ok(Self { image, semantic, instances, edges })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

/// One object instance of a scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: u16,
    pub class_id: u16,
    pub tight_box: BBox,
    /// Mask over `tight_box`.
    pub mask: Mask,
    pub area: usize,
}

impl InstanceRecord {
    /// Canvas-sized mask of this record.
    pub fn canvas_mask(&self, height: usize, width: usize) -> Mask {
        let b = &self.tight_box;
        Grid::from_fn(height, width, |y, x| {
            let (y, x) = (y as i64, x as i64);
            y >= b.y0 && y < b.y1 && x >= b.x0 && x < b.x1 && self.mask.get((y - b.y0) as usize, (x - b.x0) as usize)
        })
    }
}

/// How the foreground object is hidden inside its context crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalMode {
    ZeroMask,
    Blur,
}

/// Context crop for a class-specific generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPair {
    /// Foreground-removed image crop, `target_res^2 x 3`.
    pub context_image: Raster,
    /// One-hot semantic crop, `target_res^2 x num_classes`; zero outside the image.
    pub context_semantic: Raster,
    /// Instance region in context (target-resolution) coordinates.
    pub tight_box_in_context: BBox,
    /// Enlarged crop box in canvas coordinates.
    pub enlarged_box: BBox,
    /// Instance mask at context resolution.
    pub context_mask: Mask,
    pub removal_mode: RemovalMode,
}

impl ContextPair {
    /// Channel concatenation `cat(C_i, C_s)`.
    pub fn concat(&self) -> Raster {
        let (h, w) = self.context_image.dims();
        let ci = self.context_image.channels();
        let cs = self.context_semantic.channels();
        Raster::from_fn(h, w, ci + cs, |y, x, c| {
            if c < ci {
                self.context_image.get(y, x, c)
            } else {
                self.context_semantic.get(y, x, c - ci)
            }
        })
    }
}

/// Marks pixels with a 4-neighbour carrying a different instance id.
pub fn derive_edge_map(instances: &InstanceMap) -> EdgeMap {
    let ids = instances.ids();
    let edges = Grid::from_fn(ids.height(), ids.width(), |y, x| {
        let v = ids.get(y, x);
        let (y, x) = (y as i64, x as i64);
        let differs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            .into_iter()
            .any(|(ny, nx)| ids.get_signed(ny, nx).is_some_and(|n| n != v));
        differs as u8
    });
    EdgeMap { edges }
}

/// One record per nonzero instance id, in ascending id order.
///
/// The class of an instance is the majority semantic label under its mask,
/// ties going to the smaller class id.
pub fn extract_instances(instances: &InstanceMap, semantic: &SemanticMap) -> Result<Vec<InstanceRecord>> {
    if instances.dims() != semantic.dims() {
        return Err(Error::Shape(format!("instances {:?} vs semantic {:?}", instances.dims(), semantic.dims())));
    }
    struct Acc {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        area: usize,
        votes: BTreeMap<u16, usize>,
    }
    let mut accs: BTreeMap<u16, Acc> = BTreeMap::new();
    let (h, w) = instances.dims();
    for y in 0..h {
        for x in 0..w {
            let id = instances.get(y, x);
            if id == 0 {
                continue;
            }
            let a = accs.entry(id).or_insert(Acc { x0: x, y0: y, x1: x + 1, y1: y + 1, area: 0, votes: BTreeMap::new() });
            a.x0 = a.x0.min(x);
            a.y0 = a.y0.min(y);
            a.x1 = a.x1.max(x + 1);
            a.y1 = a.y1.max(y + 1);
            a.area += 1;
            *a.votes.entry(semantic.get(y, x)).or_default() += 1;
        }
    }
    Ok(accs
        .into_iter()
        .map(|(id, a)| {
            // Ascending iteration with a strict comparison keeps the smaller class on ties.
            let class_id = a
                .votes
                .iter()
                .fold((0u16, 0usize), |best, (&c, &n)| if n > best.1 { (c, n) } else { best })
                .0;
            let tight_box = BBox { x0: a.x0 as i64, y0: a.y0 as i64, x1: a.x1 as i64, y1: a.y1 as i64 };
            let mask = Grid::from_fn(a.y1 - a.y0, a.x1 - a.x0, |y, x| instances.get(a.y0 + y, a.x0 + x) == id);
            InstanceRecord { instance_id: id, class_id, tight_box, mask, area: a.area }
        })
        .collect())
}

/// Scale a box about its centre; output sides are `round(factor * side)`.
pub fn enlarge_box(bbox: &BBox, factor: f64) -> Result<BBox> {
    if !(factor >= 1.0) {
        return Err(Error::InvalidArgument(format!("enlarge factor {factor} < 1")));
    }
    let grow = |lo: i64, len: i64| {
        let new_len = (factor * len as f64).round() as i64;
        let start = lo - (new_len - len).div_euclid(2);
        (start, start + new_len)
    };
    let (x0, x1) = grow(bbox.x0, bbox.width());
    let (y0, y1) = grow(bbox.y0, bbox.height());
    Ok(BBox { x0, y0, x1, y1 })
}

/// Crop `image` to `bbox`, filling out-of-bounds pixels with `pad_value`.
pub fn crop_with_padding(image: &Raster, bbox: &BBox, pad_value: f32) -> Raster {
    image.crop_with_padding(bbox, pad_value)
}

/// Resize an image (bilinear) or label-like raster (nearest).
pub fn resize_image(image: &Raster, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Raster> {
    image.resize(out_h, out_w, mode)
}

/// Hide the masked foreground: zero it, or replace it by a Gaussian-blurred
/// copy of the whole crop.
pub fn remove_foreground(crop: &Raster, mask: &Mask, mode: RemovalMode, blur_sigma: f32) -> Result<Raster> {
    if crop.dims() != mask.dims() {
        return Err(Error::Shape(format!("crop {:?} vs mask {:?}", crop.dims(), mask.dims())));
    }
    let source = match mode {
        RemovalMode::ZeroMask => None,
        RemovalMode::Blur => {
            if !(blur_sigma > 0.0) {
                return Err(Error::InvalidArgument(format!("blur sigma must be positive, got {blur_sigma}")));
            }
            Some(crop.gaussian_blur(blur_sigma))
        }
    };
    let mut out = crop.clone();
    for y in 0..crop.height() {
        for x in 0..crop.width() {
            if mask.get(y, x) {
                match &source {
                    None => out.pixel_mut(y, x).fill(0.0),
                    Some(b) => out.pixel_mut(y, x).copy_from_slice(b.pixel(y, x)),
                }
            }
        }
    }
    Ok(out)
}

/// Foreground-removal settings for context construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub mode: RemovalMode,
    /// Blur sigma in context pixels; ignored for `ZeroMask`.
    pub blur_sigma: f32,
}

impl Removal {
    /// Default settings for a class model of output resolution `model_res`
    /// (context resolution `2 * model_res`): sigma = model_res / 16.
    pub fn for_model(mode: RemovalMode, model_res: usize) -> Self {
        Self { mode, blur_sigma: model_res as f32 / 16.0 }
    }
}

/// Build the context crop of `rec` from `image` (the real scene during
/// training, the running composite during inference).
///
/// The tight box is enlarged 2x about its centre and cropped with zero
/// padding, so the instance always sits in the central half of the context.
pub fn build_context(
    image: &Raster,
    semantic: &SemanticMap,
    instances: &InstanceMap,
    rec: &InstanceRecord,
    removal: Removal,
    target_res: usize,
) -> Result<ContextPair> {
    if image.dims() != instances.dims() || image.dims() != semantic.dims() {
        return Err(Error::Shape("context source and maps differ in size".into()));
    }
    if target_res == 0 {
        return Err(Error::InvalidArgument("target_res must be positive".into()));
    }
    let enlarged = enlarge_box(&rec.tight_box, 2.0)?;
    let crop = crop_with_padding(image, &enlarged, 0.0).resize(target_res, target_res, ResizeMode::Bilinear)?;
    let mask = instances
        .mask_of(rec.instance_id)
        .crop_with_padding(&enlarged, false)
        .resize_nearest(target_res, target_res);
    let context_image = remove_foreground(&crop, &mask, removal.mode, removal.blur_sigma)?;

    let labels = semantic.labels().crop_with_padding(&enlarged, u16::MAX).resize_nearest(target_res, target_res);
    let nc = semantic.num_classes() as usize;
    let context_semantic = Raster::from_fn(target_res, target_res, nc, |y, x, c| (labels.get(y, x) as usize == c) as u8 as f32);

    let sx = target_res as f64 / enlarged.width() as f64;
    let sy = target_res as f64 / enlarged.height() as f64;
    let tb = &rec.tight_box;
    let tight_box_in_context = BBox {
        x0: ((tb.x0 - enlarged.x0) as f64 * sx).floor() as i64,
        y0: ((tb.y0 - enlarged.y0) as f64 * sy).floor() as i64,
        x1: ((tb.x1 - enlarged.x0) as f64 * sx).ceil() as i64,
        y1: ((tb.y1 - enlarged.y0) as f64 * sy).ceil() as i64,
    };
    Ok(ContextPair {
        context_image,
        context_semantic,
        tight_box_in_context,
        enlarged_box: enlarged,
        context_mask: mask,
        removal_mode: removal.mode,
    })
}

/// Context of `rec` taken from the scene's own (real) image.
pub fn build_scene_context(scene: &SceneSample, rec: &InstanceRecord, removal: Removal, target_res: usize) -> Result<ContextPair> {
    build_context(&scene.image, &scene.semantic, &scene.instances, rec, removal, target_res)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(rows: &[Vec<u16>]) -> InstanceMap {
        InstanceMap::new(Grid::from_rows(rows))
    }

    #[test]
    fn edge_map_hand_case() {
        let e = derive_edge_map(&ids(&[vec![1, 1], vec![1, 2]]));
        assert_eq!(e.edges(), &Grid::from_rows(&[vec![0u8, 1], vec![1, 1]]));
    }

    #[test]
    fn edge_map_uniform_is_empty() {
        let e = derive_edge_map(&InstanceMap::new(Grid::filled(5, 4, 7)));
        assert!(e.edges().as_slice().iter().all(|&v| v == 0));
    }

    #[test]
    fn extract_single_instance() {
        let inst = ids(&[vec![0, 2], vec![2, 2]]);
        let sem = SemanticMap::new(Grid::from_rows(&[vec![0, 1], vec![1, 3]]), 4).unwrap();
        let recs = extract_instances(&inst, &sem).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].instance_id, 2);
        assert_eq!(recs[0].area, 3);
        assert_eq!(recs[0].class_id, 1);
        assert_eq!(recs[0].tight_box, BBox { x0: 0, y0: 0, x1: 2, y1: 2 });
    }

    #[test]
    fn majority_class_ties_go_to_smaller_id() {
        let inst = ids(&[vec![5, 5], vec![5, 5]]);
        let sem = SemanticMap::new(Grid::from_rows(&[vec![3, 3], vec![2, 2]]), 4).unwrap();
        assert_eq!(extract_instances(&inst, &sem).unwrap()[0].class_id, 2);
    }

    #[test]
    fn extract_empty_map() {
        let inst = InstanceMap::new(Grid::filled(3, 3, 0));
        let sem = SemanticMap::new(Grid::filled(3, 3, 0), 2).unwrap();
        assert!(extract_instances(&inst, &sem).unwrap().is_empty());
    }

    #[test]
    fn enlarge_box_cases() {
        let b = BBox::new(4, 4, 8, 8).unwrap();
        assert_eq!(enlarge_box(&b, 2.0).unwrap(), BBox { x0: 2, y0: 2, x1: 10, y1: 10 });
        let b = BBox::new(0, 0, 4, 4).unwrap();
        assert_eq!(enlarge_box(&b, 2.0).unwrap(), BBox { x0: -2, y0: -2, x1: 6, y1: 6 });
        let b = BBox::new(3, 1, 10, 4).unwrap();
        assert_eq!(enlarge_box(&b, 1.0).unwrap(), b);
        assert!(enlarge_box(&b, 0.5).is_err());
    }

    #[test]
    fn padded_crop_top_left_quadrant() {
        let img = Raster::filled(4, 4, 1, 1.0);
        let c = crop_with_padding(&img, &BBox::new(-2, -2, 2, 2).unwrap(), 0.0);
        for y in 0..4 {
            for x in 0..4 {
                let expect = if y < 2 || x < 2 { 0.0 } else { 1.0 };
                assert_eq!(c.get(y, x, 0), expect);
            }
        }
    }

    #[test]
    fn remove_foreground_modes() {
        let crop = Raster::from_fn(6, 6, 3, |y, x, c| (y + x + c) as f32 / 20.0);
        let all = Grid::filled(6, 6, true);
        let none = Grid::filled(6, 6, false);
        let z = remove_foreground(&crop, &all, RemovalMode::ZeroMask, 0.0).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(remove_foreground(&crop, &none, RemovalMode::Blur, 1.0).unwrap(), crop);
        let flat = Raster::filled(6, 6, 3, 0.4);
        let b = remove_foreground(&flat, &all, RemovalMode::Blur, 2.0).unwrap();
        assert!(b.as_slice().iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert!(remove_foreground(&crop, &all, RemovalMode::Blur, 0.0).is_err());
    }

    #[test]
    fn context_for_corner_instance_is_centered() {
        let mut inst = Grid::filled(32, 32, 0u16);
        for y in 0..8 {
            for x in 0..8 {
                inst.set(y, x, 1);
            }
        }
        let sem = SemanticMap::new(inst.map(|v| v.min(1)), 2).unwrap();
        let image = Raster::filled(32, 32, 3, 0.5);
        let scene = SceneSample::new(image, sem, InstanceMap::new(inst)).unwrap();
        let rec = &extract_instances(&scene.instances, &scene.semantic).unwrap()[0];
        let ctx = build_scene_context(&scene, rec, Removal { mode: RemovalMode::ZeroMask, blur_sigma: 1.0 }, 16).unwrap();
        assert_eq!(ctx.tight_box_in_context, BBox { x0: 4, y0: 4, x1: 12, y1: 12 });
        // Padding occupies the top-left quadrant; the instance the central half.
        assert_eq!(ctx.context_image.pixel(0, 0), &[0.0, 0.0, 0.0]);
        assert_eq!(ctx.context_image.pixel(8, 8), &[0.0, 0.0, 0.0]);
        assert_eq!(ctx.context_image.pixel(14, 14), &[0.5, 0.5, 0.5]);
        assert_eq!(ctx.context_semantic.pixel(0, 0), &[0.0, 0.0]);
        assert_eq!(ctx.context_semantic.pixel(8, 8), &[0.0, 1.0]);
    }
}
