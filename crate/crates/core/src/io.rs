//! Lossless raster files and the corpus manifest.
//!
//! Label maps are 16-bit grayscale PNG, images 8-bit RGB PNG. The manifest is
//! a JSON sidecar listing per-scene file paths and the class vocabulary.

use crate::datamodel::{InstanceMap, SceneSample, SemanticMap};
use crate::error::{Error, Result};
use crate::raster::{Grid, Raster};
use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "semsynth-corpus";
pub const MANIFEST_VERSION: u32 = 1;

/// Quantise a `[0, 1]` value to 8 bits.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(image: &Raster, path: &Path) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected RGB raster, got {} channels", image.channels())));
    }
    let buf: Vec<u8> = image.as_slice().iter().map(|&v| to_u8(v)).collect();
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, buf).expect("buffer sized from raster");
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_rgb_png(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Raster::from_vec(h as usize, w as usize, 3, data)
}

pub fn save_label_png(grid: &Grid<u16>, path: &Path) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(grid.width() as u32, grid.height() as u32, grid.as_slice().to_vec())
            .expect("buffer sized from grid");
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_label_png(path: &Path) -> Result<Grid<u16>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let (w, h, data) = match img {
        image::DynamicImage::ImageLuma16(b) => (b.width(), b.height(), b.into_raw()),
        image::DynamicImage::ImageLuma8(b) => {
            (b.width(), b.height(), b.into_raw().into_iter().map(u16::from).collect())
        }
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("label map must be single-channel, got {:?}", other.color()),
            })
        }
    };
    Grid::from_vec(h as usize, w as usize, data)
}

/// One scene entry of a corpus manifest; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub seed: u64,
    pub image: String,
    pub semantic: String,
    pub instances: String,
    /// Background hue the scene was rendered with, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_tint: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_classes: u16,
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn new(class_names: Vec<String>, height: usize, width: usize) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            num_classes: class_names.len() as u16,
            class_names,
            height,
            width,
            scenes: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: format!("{} v{}", m.format, m.version),
                expected: format!("{MANIFEST_FORMAT} v{MANIFEST_VERSION}"),
            });
        }
        Ok(m)
    }
}

/// Write one scene's rasters next to the manifest.
pub fn write_scene(dir: &Path, entry: &SceneEntry, scene: &SceneSample) -> Result<()> {
    save_rgb_png(&scene.image, &dir.join(&entry.image))?;
    save_label_png(scene.semantic.labels(), &dir.join(&entry.semantic))?;
    save_label_png(scene.instances.ids(), &dir.join(&entry.instances))
}

pub fn read_scene(dir: &Path, entry: &SceneEntry, num_classes: u16) -> Result<SceneSample> {
    let image = load_rgb_png(&dir.join(&entry.image))?;
    let semantic = SemanticMap::new(load_label_png(&dir.join(&entry.semantic))?, num_classes)?;
    let instances = InstanceMap::new(load_label_png(&dir.join(&entry.instances))?);
    SceneSample::new(image, semantic, instances)
}

/// An in-memory corpus with its manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub scenes: Vec<SceneSample>,
}

impl Corpus {
    /// Load every scene listed by the manifest in `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let scenes = manifest
            .scenes
            .iter()
            .map(|e| read_scene(dir, e, manifest.num_classes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, scenes })
    }

    pub fn num_classes(&self) -> u16 {
        self.manifest.num_classes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}
