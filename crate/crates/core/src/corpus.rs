//! Dataset ingestion: manifests, the label-to-concept dictionary, triplet
//! expansion and deterministic splits.
//!
//! A manifest is newline-delimited JSON, one record per line:
//!
//! ```text
//! {"id":"kvasir-001","image":"img/001.png","mask":"mask/001.png","dataset":"kvasir","modality":"endoscopy","labels":{"1":"polyp"}}
//! ```
//!
//! Paths are relative to the manifest's directory. Masks are 8-bit
//! single-channel PNG label maps with 0 as background.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::geometry::{box_from_mask, resize_nearest, BinaryMask, Grid, NormBox};
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub label_map: BTreeMap<u8, String>,
    pub dataset_name: String,
    pub modality: String,
}

#[derive(Debug, Deserialize)]
struct ManifestLine {
    id: String,
    image: String,
    mask: String,
    dataset: String,
    modality: String,
    labels: BTreeMap<String, String>,
}

/// Reads a manifest. Blank lines are skipped; anything else must parse.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let root = path.parent().unwrap_or(Path::new(""));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: ManifestLine =
            serde_json::from_str(raw).map_err(|e| parse_err(line_no, e.to_string()))?;
        let mut label_map = BTreeMap::new();
        for (key, concept) in line.labels {
            let label: u8 = key
                .parse()
                .ok()
                .filter(|&l| l != 0)
                .ok_or_else(|| parse_err(line_no, format!("label id {key:?} is not an integer in 1..=255")))?;
            if concept.trim().is_empty() {
                return Err(parse_err(line_no, format!("label {label} has an empty concept")));
            }
            label_map.insert(label, concept);
        }
        if !seen.insert(line.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate record id {:?} (line {line_no})",
                line.id
            )));
        }
        records.push(SampleRecord {
            id: line.id,
            image_path: root.join(line.image),
            mask_path: root.join(line.mask),
            label_map,
            dataset_name: line.dataset,
            modality: line.modality,
        });
    }
    Ok(records)
}

/// Canonical spelling of a concept: trimmed, lowercase, single spaces.
pub fn canonicalize_concept(concept: &str) -> String {
    concept
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mapping from `(dataset, label id)` to canonical concept names.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConceptDictionary {
    entries: BTreeMap<(String, u8), String>,
    vocabulary: Vec<String>,
}

impl ConceptDictionary {
    fn insert(&mut self, dataset: &str, label: u8, concept: &str) -> Result<()> {
        let canonical = canonicalize_concept(concept);
        let key = (dataset.to_string(), label);
        match self.entries.get(&key) {
            Some(existing) if *existing != canonical => Err(Error::Validation(format!(
                "dataset {dataset:?} maps label {label} to both {existing:?} and {canonical:?}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(key, canonical);
                Ok(())
            }
        }
    }

    fn rebuild_vocabulary(&mut self) {
        let set: BTreeSet<&String> = self.entries.values().collect();
        self.vocabulary = set.into_iter().cloned().collect();
    }

    pub fn entries(&self) -> &BTreeMap<(String, u8), String> {
        &self.entries
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn concept(&self, dataset: &str, label: u8) -> Option<&str> {
        self.entries
            .get(&(dataset.to_string(), label))
            .map(String::as_str)
    }

    /// Distinct concepts of a dataset, ordered by their smallest label id.
    pub fn dataset_concepts(&self, dataset: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for ((d, _), c) in &self.entries {
            if d == dataset && !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    pub fn datasets(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.keys().map(|(d, _)| d).collect();
        set.into_iter().cloned().collect()
    }

    /// Tab-separated `dataset, label, concept` lines in key order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ((dataset, label), concept) in &self.entries {
            out.push_str(&format!("{dataset}\t{label}\t{concept}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut dict = ConceptDictionary::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Validation(format!("concept dictionary line {}: {line:?}", i + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let label: u8 = fields[1].parse().map_err(|_| bad())?;
            dict.insert(fields[0], label, fields[2])?;
        }
        dict.rebuild_vocabulary();
        Ok(dict)
    }
}

pub fn build_concept_dictionary(records: &[SampleRecord]) -> Result<ConceptDictionary> {
    if records.is_empty() {
        return Err(Error::Validation("cannot build a concept dictionary from zero records".into()));
    }
    let mut dict = ConceptDictionary::default();
    for record in records {
        for (&label, concept) in &record.label_map {
            dict.insert(&record.dataset_name, label, concept)?;
        }
    }
    dict.rebuild_vocabulary();
    Ok(dict)
}

/// RGB raster with channel values in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::Validation(format!(
                "raster {height}x{width} needs {} channel values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = img.dimensions();
        Raster::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img: ImageBuffer<Rgb<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes)
                .expect("buffer size matches dimensions");
        img.save(path)?;
        Ok(())
    }
}

/// Loads an 8-bit single-channel label map.
pub fn load_label_map(path: &Path) -> Result<Grid<u8>> {
    match image::open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Grid::from_vec(h as usize, w as usize, img.into_raw())
        }
        other => Err(Error::Validation(format!(
            "{}: mask must be an 8-bit single-channel PNG, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_label_map(map: &Grid<u8>, path: &Path) -> Result<()> {
    let img: ImageBuffer<image::Luma<u8>, _> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, map.as_slice().to_vec())
            .expect("buffer size matches dimensions");
    img.save(path)?;
    Ok(())
}

/// 8-connected components of the pixels equal to `label`, ordered by their
/// first pixel in row-major order.
pub fn connected_components(labels: &Grid<u8>, label: u8) -> Vec<BinaryMask> {
    let (h, w) = labels.dims();
    let mut seen = Grid::filled(h, w, false);
    let mut components = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if *labels.get(r, c) != label || *seen.get(r, c) {
                continue;
            }
            let mut mask = Grid::filled(h, w, false);
            let mut queue = VecDeque::from([(r, c)]);
            seen.set(r, c, true);
            while let Some((y, x)) = queue.pop_front() {
                mask.set(y, x, true);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if *labels.get(ny, nx) == label && !*seen.get(ny, nx) {
                            seen.set(ny, nx, true);
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            components.push(mask);
        }
    }
    components
}

/// One ground-truth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub concept: String,
    pub bbox: NormBox,
    pub mask: BinaryMask,
}

/// An image with its instance masks and their concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub image: Raster,
    pub instance_masks: Vec<BinaryMask>,
    pub concepts: Vec<String>,
    pub source_id: String,
}

impl TripletSample {
    /// Instances of one concept, as training targets.
    pub fn targets_for(&self, concept: &str) -> Result<Vec<InstanceTarget>> {
        self.instance_masks
            .iter()
            .zip(&self.concepts)
            .filter(|(_, c)| *c == concept)
            .map(|(mask, c)| {
                Ok(InstanceTarget {
                    concept: c.clone(),
                    bbox: box_from_mask(mask)?,
                    mask: mask.clone(),
                })
            })
            .collect()
    }

    /// Letterboxes the image (bilinear) and masks (nearest) onto a square
    /// canvas. Instances that vanish under resampling are dropped.
    pub fn letterboxed(&self, canvas: usize) -> Result<TripletSample> {
        let lb = Letterbox::fit(self.image.height(), self.image.width(), canvas);
        let mut masks = Vec::new();
        let mut concepts = Vec::new();
        for (mask, concept) in self.instance_masks.iter().zip(&self.concepts) {
            let m = lb.apply_grid(mask, false);
            if !m.is_empty_mask() {
                masks.push(m);
                concepts.push(concept.clone());
            }
        }
        Ok(TripletSample {
            image: lb.apply_image(&self.image)?,
            instance_masks: masks,
            concepts,
            source_id: self.source_id.clone(),
        })
    }
}

/// Splits a record's label map into per-instance masks paired with their
/// canonical concepts. Instances are ordered by label id, then by first
/// pixel in row-major order.
pub fn expand_to_triplets(record: &SampleRecord, dict: &ConceptDictionary) -> Result<TripletSample> {
    let labels = load_label_map(&record.mask_path)?;
    let image = Raster::load(&record.image_path)?;
    triplet_from_parts(record, dict, image, &labels)
}

pub fn triplet_from_parts(
    record: &SampleRecord,
    dict: &ConceptDictionary,
    image: Raster,
    labels: &Grid<u8>,
) -> Result<TripletSample> {
    if (image.height(), image.width()) != labels.dims() {
        return Err(Error::Validation(format!(
            "{}: image is {}x{} but mask is {}x{}",
            record.id,
            image.height(),
            image.width(),
            labels.height(),
            labels.width()
        )));
    }
    let present: BTreeSet<u8> = labels.as_slice().iter().copied().filter(|&l| l != 0).collect();
    let mut instance_masks = Vec::new();
    let mut concepts = Vec::new();
    for label in present {
        let concept = record
            .label_map
            .get(&label)
            .and_then(|_| dict.concept(&record.dataset_name, label))
            .ok_or_else(|| {
                Error::Validation(format!(
                    "{}: mask contains label {label} with no concept in the label map",
                    record.id
                ))
            })?;
        for component in connected_components(labels, label) {
            instance_masks.push(component);
            concepts.push(concept.to_string());
        }
    }
    Ok(TripletSample {
        image,
        instance_masks,
        concepts,
        source_id: record.id.clone(),
    })
}

/// Aspect-preserving fit of an image into a square canvas with zero padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub src_height: usize,
    pub src_width: usize,
    pub canvas: usize,
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
}

impl Letterbox {
    pub fn fit(src_height: usize, src_width: usize, canvas: usize) -> Self {
        let scale = canvas as f64 / src_height.max(src_width) as f64;
        let height = ((src_height as f64 * scale).round() as usize).clamp(1, canvas);
        let width = ((src_width as f64 * scale).round() as usize).clamp(1, canvas);
        Letterbox {
            src_height,
            src_width,
            canvas,
            height,
            width,
            top: (canvas - height) / 2,
            left: (canvas - width) / 2,
        }
    }

    pub fn apply_image(&self, image: &Raster) -> Result<Raster> {
        let resized = if (image.height(), image.width()) == (self.height, self.width) {
            image.pixels().to_vec()
        } else {
            let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(
                image.width() as u32,
                image.height() as u32,
                image.pixels().to_vec(),
            )
            .expect("buffer size matches dimensions");
            image::imageops::resize(
                &buf,
                self.width as u32,
                self.height as u32,
                image::imageops::FilterType::Triangle,
            )
            .into_raw()
        };
        let mut out = vec![0f32; self.canvas * self.canvas * 3];
        for r in 0..self.height {
            let src = &resized[r * self.width * 3..(r + 1) * self.width * 3];
            let start = ((r + self.top) * self.canvas + self.left) * 3;
            out[start..start + self.width * 3].copy_from_slice(src);
        }
        Raster::new(self.canvas, self.canvas, out)
    }

    /// Nearest-neighbour letterboxing of a grid, padding with `fill`.
    pub fn apply_grid<T: Clone>(&self, grid: &Grid<T>, fill: T) -> Grid<T> {
        let resized = resize_nearest(grid, self.height, self.width);
        let mut out = Grid::filled(self.canvas, self.canvas, fill);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r + self.top, c + self.left, resized.get(r, c).clone());
            }
        }
        out
    }

    /// Maps a canvas grid back to the source resolution (crop + nearest).
    pub fn invert_grid<T: Clone>(&self, grid: &Grid<T>) -> Grid<T> {
        let cropped = Grid::from_fn(self.height, self.width, |r, c| {
            grid.get(r + self.top, c + self.left).clone()
        });
        resize_nearest(&cropped, self.src_height, self.src_width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.85,
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// `floor(fraction * n)`, tolerant of the representation error in
    /// fractions such as 0.85.
    pub fn train_count(&self, n: usize) -> usize {
        ((self.train_fraction * n as f64) + 1e-9).floor() as usize
    }
}

/// Sorts ids, shuffles them with SplitMix64 Fisher-Yates seeded by
/// `spec.seed`, and cuts the first `floor(fraction * n)` into train.
pub fn split_train_val(ids: &[String], spec: &SplitSpec) -> Result<(Vec<String>, Vec<String>)> {
    spec.validate()?;
    if ids.is_empty() {
        return Err(Error::Validation("cannot split an empty id list".into()));
    }
    let mut order = ids.to_vec();
    order.sort();
    Stream::new(spec.seed).shuffle(&mut order);
    let val = order.split_off(spec.train_count(order.len()));
    Ok((order, val))
}

pub fn write_id_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}
