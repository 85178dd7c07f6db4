//! Synthetic dental-scene generator and COCO JSON I/O.
//!
//! Scenes imitate frontal intraoral photographs at the structural level: a
//! central band of anterior teeth (each healthy or diagnosed) flanked by
//! posterior teeth that sit horizontally outside and vertically inside the
//! anterior extremities, so every posterior box satisfies the posterior
//! mask by construction. Dataset asymmetry is controlled by
//! [`DatasetSpec::annotate_posterior`]: when false, annotations cover only
//! the anterior diagnosis classes and the posterior boxes stay hidden; when
//! true, everything is annotated with the coarse position classes.
//!
//! Each scene also carries a feature vector: an orthonormal linear encoding
//! of the full hidden layout plus Gaussian noise, so a linear model can in
//! principle recover every box (see [`decode_features`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::labelspace::ToothLabel;
use crate::{real, Real};

/// Declared pixel size of synthetic images in COCO files.
pub const COCO_IMAGE_SIZE: u32 = 640;

/// Values per feature slot: presence, cx, cy, w, h, position, diagnosis.
const SLOT_STRIDE: usize = 7;

/// Horizontal extent of the anterior band.
const BAND_X0: f64 = 0.25;
const BAND_X1: f64 = 0.75;

/// Largest per-flank posterior count the layout can always place without
/// leaving the unit square.
const MAX_POSTERIOR_PER_FLANK: usize = 5;

/// Configuration of one synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_images: usize,
    /// Inclusive range of anterior teeth per scene.
    pub anterior_per_image: (usize, usize),
    /// Inclusive range of posterior teeth per scene.
    pub posterior_per_image: (usize, usize),
    /// Probability that an anterior tooth is diagnosed.
    pub fd_fraction: f64,
    /// When true, posterior teeth are annotated too and anterior labels
    /// collapse to the coarse position class.
    pub annotate_posterior: bool,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_images: 90,
            anterior_per_image: (12, 12),
            posterior_per_image: (2, 8),
            // 626 diagnosed of 1080 annotated anterior teeth.
            fd_fraction: 626.0 / 1080.0,
            annotate_posterior: false,
            feature_dim: 160,
            noise_level: 0.01,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Feature slots the encoding needs for the largest possible scene.
    pub fn slots(&self) -> usize {
        self.anterior_per_image.1 + self.posterior_per_image.1
    }

    fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::InfeasibleSpec("num_images must be >= 1".into()));
        }
        let (alo, ahi) = self.anterior_per_image;
        if alo == 0 || alo > ahi {
            return Err(Error::InfeasibleSpec(format!(
                "anterior_per_image range ({alo}, {ahi}) must be nonempty and >= 1"
            )));
        }
        let (plo, phi) = self.posterior_per_image;
        if plo > phi {
            return Err(Error::InfeasibleSpec(format!(
                "posterior_per_image range ({plo}, {phi}) is empty"
            )));
        }
        if phi.div_ceil(2) > MAX_POSTERIOR_PER_FLANK {
            return Err(Error::InfeasibleSpec(format!(
                "up to {phi} posterior teeth cannot flank the band within the unit square"
            )));
        }
        if !(0.0..=1.0).contains(&self.fd_fraction) {
            return Err(Error::InfeasibleSpec(format!(
                "fd_fraction {} outside [0, 1]",
                self.fd_fraction
            )));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(Error::InfeasibleSpec(format!(
                "noise_level {} must be finite and >= 0",
                self.noise_level
            )));
        }
        let needed = self.slots() * SLOT_STRIDE;
        if self.feature_dim < needed {
            return Err(Error::InfeasibleSpec(format!(
                "feature_dim {} too small: the layout encoding needs {needed}",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

/// One synthetic image: features plus visible and full ground truth.
///
/// `hidden_truth` always contains every tooth; `annotations` is the subset
/// a detector gets to train on (a prefix of `hidden_truth`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene<F: Real> {
    pub image_id: usize,
    pub features: Vec<F>,
    pub annotations: Vec<(ToothLabel, BoxXYXY<F>)>,
    pub hidden_truth: Vec<(ToothLabel, BoxXYXY<F>)>,
}

impl<F: Real> Scene<F> {
    /// True when nothing was withheld from the annotations.
    pub fn fully_annotated(&self) -> bool {
        self.annotations.len() == self.hidden_truth.len()
    }
}

/// One decoded feature slot; see [`decode_features`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedTooth<F: Real> {
    pub cx: F,
    pub cy: F,
    pub w: F,
    pub h: F,
    pub anterior: bool,
    /// Diagnosis when decodable: `Some(true)` diagnosed, `Some(false)`
    /// healthy, `None` when the slot carries no diagnosis signal.
    pub fd: Option<bool>,
}

/// Orthonormal-column encoding basis, feature_dim x slots*stride, derived
/// from the dataset seed alone (stream 0; scenes use streams 1..).
fn encoding_basis(spec: &DatasetSpec) -> Result<Vec<Vec<f64>>> {
    let dim = spec.feature_dim;
    let cols = spec.slots() * SLOT_STRIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut col: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // Gram-Schmidt against the accepted columns.
        for prev in &basis {
            let dot: f64 = col.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (c, p) in col.iter_mut().zip(prev) {
                *c -= dot * p;
            }
        }
        let norm = col.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::InfeasibleSpec(format!(
                "feature basis column {j} degenerated during orthonormalization"
            )));
        }
        for c in col.iter_mut() {
            *c /= norm;
        }
        basis.push(col);
    }
    Ok(basis)
}

struct Tooth {
    bbox: [f64; 4], // cx, cy, w, h
    anterior: bool,
    diagnosed: bool,
}

/// Lays out one scene's teeth. Draw order per scene, fixed for
/// reproducibility: anterior count, posterior count; per anterior tooth
/// width fraction, center y, height, diagnosis; the two flank gap widths;
/// per posterior tooth width, top inset, bottom inset.
fn layout_scene(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Tooth> {
    let n_ant = rng.gen_range(spec.anterior_per_image.0..=spec.anterior_per_image.1);
    let n_post = rng.gen_range(spec.posterior_per_image.0..=spec.posterior_per_image.1);

    let mut teeth = Vec::with_capacity(n_ant + n_post);
    let slot = (BAND_X1 - BAND_X0) / n_ant as f64;
    for i in 0..n_ant {
        let wf = rng.gen_range(0.55..0.8);
        let cy = rng.gen_range(0.46..0.54);
        let h = rng.gen_range(0.13..0.19);
        let diagnosed = rng.gen::<f64>() < spec.fd_fraction;
        let cx = BAND_X0 + (i as f64 + 0.5) * slot;
        teeth.push(Tooth { bbox: [cx, cy, slot * wf, h], anterior: true, diagnosed });
    }

    // Anterior extremities; posterior boxes go strictly outside
    // horizontally and strictly inside vertically.
    let e_left = teeth.iter().map(|t| t.bbox[0] - t.bbox[2] / 2.0).fold(f64::INFINITY, f64::min);
    let e_right = teeth.iter().map(|t| t.bbox[0] + t.bbox[2] / 2.0).fold(0.0, f64::max);
    let e_top = teeth.iter().map(|t| t.bbox[1] - t.bbox[3] / 2.0).fold(f64::INFINITY, f64::min);
    let e_bottom = teeth.iter().map(|t| t.bbox[1] + t.bbox[3] / 2.0).fold(0.0, f64::max);

    let n_left = n_post.div_ceil(2);
    let left_gap = rng.gen_range(0.005..0.015);
    let right_gap = rng.gen_range(0.005..0.015);
    let mut left_edge = e_left - left_gap;
    let mut right_edge = e_right + right_gap;
    for j in 0..n_post {
        let w = rng.gen_range(0.02..0.04);
        let y1 = e_top + rng.gen_range(0.01..0.04);
        let y2 = e_bottom - rng.gen_range(0.01..0.04);
        let (x1, x2) = if j < n_left {
            let x2 = left_edge;
            left_edge -= w + 0.005;
            (x2 - w, x2)
        } else {
            let x1 = right_edge;
            right_edge += w + 0.005;
            (x1, x1 + w)
        };
        teeth.push(Tooth {
            bbox: [(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1],
            anterior: false,
            diagnosed: false,
        });
    }
    teeth
}

/// Generates the dataset described by `spec`: deterministic given the
/// seed, same-seeded calls produce identical scenes.
pub fn generate<F: Real>(spec: &DatasetSpec) -> Result<Vec<Scene<F>>> {
    spec.validate()?;
    let basis = encoding_basis(spec)?;
    let slots = spec.slots();
    let mut scenes = Vec::with_capacity(spec.num_images);
    for image_id in 0..spec.num_images {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(image_id as u64 + 1);
        let teeth = layout_scene(spec, &mut rng);

        // Slot-encode the layout: anterior teeth fill the low slots in
        // left-to-right order, posterior teeth follow in placement order.
        let mut code = vec![0.0f64; slots * SLOT_STRIDE];
        for (t, tooth) in teeth.iter().enumerate() {
            let base = t * SLOT_STRIDE;
            code[base] = 1.0;
            code[base + 1..base + 5].copy_from_slice(&tooth.bbox);
            code[base + 5] = if tooth.anterior { 1.0 } else { -1.0 };
            code[base + 6] = if !tooth.anterior {
                0.0
            } else if tooth.diagnosed {
                1.0
            } else {
                -1.0
            };
        }
        let mut features = vec![0.0f64; spec.feature_dim];
        for (j, col) in basis.iter().enumerate() {
            if code[j / SLOT_STRIDE * SLOT_STRIDE] == 0.0 {
                continue; // empty slot contributes nothing
            }
            for (f, c) in features.iter_mut().zip(col) {
                *f += code[j] * c;
            }
        }
        for f in features.iter_mut() {
            *f += spec.noise_level * rng.sample::<f64, _>(StandardNormal);
        }

        let mut annotations = Vec::with_capacity(teeth.len());
        let mut hidden_truth = Vec::with_capacity(teeth.len());
        for tooth in &teeth {
            let [cx, cy, w, h] = tooth.bbox;
            let bbox = BoxXYXY::<F>::new(
                real(cx - w / 2.0),
                real(cy - h / 2.0),
                real(cx + w / 2.0),
                real(cy + h / 2.0),
            )?;
            let label = match (tooth.anterior, spec.annotate_posterior, tooth.diagnosed) {
                (true, true, _) => ToothLabel::AnteriorTeeth,
                (true, false, true) => ToothLabel::AnteriorFd,
                (true, false, false) => ToothLabel::AnteriorNoFd,
                (false, _, _) => ToothLabel::PosteriorTeeth,
            };
            hidden_truth.push((label, bbox));
            if tooth.anterior || spec.annotate_posterior {
                annotations.push((label, bbox));
            }
        }
        scenes.push(Scene { image_id, features: features.into_iter().map(real).collect(), annotations, hidden_truth });
    }
    Ok(scenes)
}

/// Inverts the linear feature encoding (transpose of the orthonormal
/// basis) and reports every occupied slot.
///
/// With `noise_level` 0 the decoded boxes match the hidden truth to 1e-6
/// at the default `f64` precision; with noise they degrade gracefully.
pub fn decode_features<F: Real>(spec: &DatasetSpec, features: &[F]) -> Result<Vec<DecodedTooth<F>>> {
    spec.validate()?;
    if features.len() != spec.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "{} features, spec declares {}",
            features.len(),
            spec.feature_dim
        )));
    }
    let basis = encoding_basis(spec)?;
    let x: Vec<f64> = features.iter().map(|f| f.to_f64().unwrap_or(f64::NAN)).collect();
    let code: Vec<f64> = basis
        .iter()
        .map(|col| col.iter().zip(&x).map(|(c, f)| c * f).sum())
        .collect();
    let mut decoded = Vec::new();
    for slot in 0..spec.slots() {
        let s = &code[slot * SLOT_STRIDE..(slot + 1) * SLOT_STRIDE];
        if s[0] < 0.5 {
            continue;
        }
        decoded.push(DecodedTooth {
            cx: real(s[1]),
            cy: real(s[2]),
            w: real(s[3]),
            h: real(s[4]),
            anterior: s[5] > 0.0,
            fd: if s[6].abs() < 0.5 { None } else { Some(s[6] > 0.0) },
        });
    }
    Ok(decoded)
}

/// COCO-format JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: usize,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: usize,
    pub image_id: usize,
    pub category_id: usize,
    /// `[x, y, width, height]` in absolute pixels of the declared image.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

/// Builds the COCO document for a set of scenes: 640x640 images, absolute
/// pixel boxes, and one category per label present in the annotations
/// (token order, ids from 1).
pub fn to_coco<F: Real>(scenes: &[Scene<F>]) -> Result<CocoFile> {
    let mut seen_ids = std::collections::BTreeSet::new();
    let mut present = [false; crate::labelspace::VOCAB_SIZE];
    for scene in scenes {
        if !seen_ids.insert(scene.image_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate image_id {}",
                scene.image_id
            )));
        }
        for (label, _) in &scene.annotations {
            present[label.token_index()] = true;
        }
    }
    let categories: Vec<CocoCategory> = ToothLabel::ALL
        .iter()
        .filter(|l| present[l.token_index()])
        .enumerate()
        .map(|(i, l)| CocoCategory { id: i + 1, name: l.prompt().to_string() })
        .collect();
    let category_of = |label: ToothLabel| {
        categories
            .iter()
            .find(|c| c.name == label.prompt())
            .map(|c| c.id)
            .expect("category table covers every annotated label")
    };

    let size = COCO_IMAGE_SIZE as f64;
    let mut images = Vec::with_capacity(scenes.len());
    let mut annotations = Vec::new();
    for scene in scenes {
        images.push(CocoImage {
            id: scene.image_id,
            width: COCO_IMAGE_SIZE,
            height: COCO_IMAGE_SIZE,
            file_name: format!("scene_{:05}.png", scene.image_id),
        });
        for (label, bbox) in &scene.annotations {
            let (x, y) = (bbox.x1().to_f64().unwrap() * size, bbox.y1().to_f64().unwrap() * size);
            let (w, h) = (
                bbox.width().to_f64().unwrap() * size,
                bbox.height().to_f64().unwrap() * size,
            );
            annotations.push(CocoAnnotation {
                id: annotations.len() + 1,
                image_id: scene.image_id,
                category_id: category_of(*label),
                bbox: [x, y, w, h],
                area: w * h,
                iscrowd: 0,
            });
        }
    }
    Ok(CocoFile { images, annotations, categories })
}

/// Writes the scenes as a pretty-printed COCO JSON file.
pub fn save_coco<F: Real>(scenes: &[Scene<F>], path: &std::path::Path) -> Result<()> {
    let coco = to_coco(scenes)?;
    let mut text = serde_json::to_string_pretty(&coco)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses a COCO document back into scenes. Features and withheld boxes
/// cannot be recovered from a COCO file, so the scenes come back with
/// empty feature vectors and `hidden_truth` equal to the annotations.
pub fn scenes_from_coco<F: Real>(coco: &CocoFile) -> Result<Vec<Scene<F>>> {
    let mut label_of = std::collections::BTreeMap::new();
    for cat in &coco.categories {
        let label = ToothLabel::from_prompt(&cat.name).ok_or_else(|| {
            Error::InvalidFile(format!("unknown category name {:?}", cat.name))
        })?;
        if label_of.insert(cat.id, label).is_some() {
            return Err(Error::InvalidFile(format!("duplicate category id {}", cat.id)));
        }
    }
    let mut size_of = std::collections::BTreeMap::new();
    for img in &coco.images {
        if img.width == 0 || img.height == 0 {
            return Err(Error::InvalidFile(format!("image {} has zero size", img.id)));
        }
        if size_of.insert(img.id, (img.width as f64, img.height as f64)).is_some() {
            return Err(Error::InvalidFile(format!("duplicate image id {}", img.id)));
        }
    }

    let mut scenes: Vec<Scene<F>> = coco
        .images
        .iter()
        .map(|img| Scene {
            image_id: img.id,
            features: Vec::new(),
            annotations: Vec::new(),
            hidden_truth: Vec::new(),
        })
        .collect();
    let index_of: std::collections::BTreeMap<usize, usize> =
        coco.images.iter().enumerate().map(|(i, img)| (img.id, i)).collect();

    for ann in &coco.annotations {
        let &(w, h) = size_of.get(&ann.image_id).ok_or_else(|| {
            Error::InvalidFile(format!("annotation {} references unknown image {}", ann.id, ann.image_id))
        })?;
        let label = *label_of.get(&ann.category_id).ok_or_else(|| {
            Error::InvalidFile(format!("annotation {} references unknown category {}", ann.id, ann.category_id))
        })?;
        let [bx, by, bw, bh] = ann.bbox;
        let bbox = BoxXYXY::<F>::new(
            real(bx / w),
            real(by / h),
            real((bx + bw) / w),
            real((by + bh) / h),
        )
        .map_err(|e| Error::InvalidFile(format!("annotation {}: {e}", ann.id)))?;
        let scene = &mut scenes[index_of[&ann.image_id]];
        scene.annotations.push((label, bbox));
        scene.hidden_truth.push((label, bbox));
    }
    Ok(scenes)
}

/// Reads a COCO JSON file; see [`scenes_from_coco`].
pub fn load_coco<F: Real>(path: &std::path::Path) -> Result<Vec<Scene<F>>> {
    let text = std::fs::read_to_string(path)?;
    let coco: CocoFile = serde_json::from_str(&text)?;
    scenes_from_coco(&coco)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{anterior_extremities, posterior_mask};

    #[test]
    fn default_spec_is_feasible_and_matches_documented_counts() {
        let spec = DatasetSpec::default();
        assert_eq!(spec.num_images, 90);
        assert_eq!(spec.anterior_per_image, (12, 12));
        assert_eq!(spec.posterior_per_image, (2, 8));
        assert!(!spec.annotate_posterior);
        assert!((spec.fd_fraction - 0.5796).abs() < 1e-3);
        spec.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic_given_the_seed() {
        let spec = DatasetSpec { num_images: 5, ..DatasetSpec::default() };
        let a = generate::<f64>(&spec).unwrap();
        let b = generate::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let other = DatasetSpec { seed: 1, ..spec };
        assert_ne!(generate::<f64>(&other).unwrap(), a);
    }

    #[test]
    fn anterior_teeth_are_disjoint_and_ordered_in_the_band() {
        let spec = DatasetSpec { num_images: 20, ..DatasetSpec::default() };
        for scene in generate::<f64>(&spec).unwrap() {
            let anterior: Vec<&BoxXYXY<f64>> = scene
                .hidden_truth
                .iter()
                .filter(|(l, _)| l.is_anterior())
                .map(|(_, b)| b)
                .collect();
            assert_eq!(anterior.len(), 12);
            for pair in anterior.windows(2) {
                assert!(pair[0].x2() < pair[1].x1(), "anterior teeth overlap");
            }
            for b in &anterior {
                assert!(b.x1() >= 0.25 && b.x2() <= 0.75);
            }
        }
    }

    #[test]
    fn posterior_boxes_always_satisfy_the_mask() {
        let spec = DatasetSpec { num_images: 100, ..DatasetSpec::default() };
        for scene in generate::<f64>(&spec).unwrap() {
            let anterior: Vec<BoxXYXY<f64>> = scene
                .annotations
                .iter()
                .map(|(_, b)| *b)
                .collect();
            let ext = anterior_extremities(&anterior).unwrap();
            let posterior: Vec<&BoxXYXY<f64>> = scene.hidden_truth
                [scene.annotations.len()..]
                .iter()
                .map(|(_, b)| b)
                .collect();
            assert!(!posterior.is_empty());
            for b in posterior {
                assert!(posterior_mask(b, &ext));
            }
        }
    }

    #[test]
    fn diagnosed_fraction_tracks_the_configured_ratio() {
        let scenes = generate::<f64>(&DatasetSpec::default()).unwrap();
        let (mut fd, mut total) = (0usize, 0usize);
        for scene in &scenes {
            for (label, _) in &scene.annotations {
                total += 1;
                if *label == ToothLabel::AnteriorFd {
                    fd += 1;
                }
            }
        }
        assert_eq!(total, 90 * 12);
        let frac = fd as f64 / total as f64;
        assert!((frac - 626.0 / 1080.0).abs() < 0.03, "fraction {frac}");
    }

    #[test]
    fn hidden_truth_minus_annotations_is_exactly_the_posterior_set() {
        let spec = DatasetSpec { num_images: 10, ..DatasetSpec::default() };
        for scene in generate::<f64>(&spec).unwrap() {
            assert!(!scene.fully_annotated());
            assert_eq!(&scene.hidden_truth[..scene.annotations.len()], &scene.annotations[..]);
            for (label, _) in &scene.hidden_truth[scene.annotations.len()..] {
                assert_eq!(*label, ToothLabel::PosteriorTeeth);
            }
            for (label, _) in &scene.annotations {
                assert!(label.is_diagnosed());
            }
        }
    }

    #[test]
    fn annotate_posterior_collapses_labels_and_annotates_everything() {
        let spec = DatasetSpec { num_images: 10, annotate_posterior: true, ..DatasetSpec::default() };
        for scene in generate::<f64>(&spec).unwrap() {
            assert!(scene.fully_annotated());
            assert_eq!(scene.annotations, scene.hidden_truth);
            for (label, _) in &scene.annotations {
                assert!(matches!(
                    label,
                    ToothLabel::AnteriorTeeth | ToothLabel::PosteriorTeeth
                ));
            }
        }
    }

    #[test]
    fn noiseless_features_decode_to_the_hidden_layout() {
        let spec = DatasetSpec { num_images: 8, noise_level: 0.0, ..DatasetSpec::default() };
        for scene in generate::<f64>(&spec).unwrap() {
            let decoded = decode_features(&spec, &scene.features).unwrap();
            assert_eq!(decoded.len(), scene.hidden_truth.len());
            for (d, (label, b)) in decoded.iter().zip(&scene.hidden_truth) {
                let c = b.to_cxcywh();
                assert!((d.cx - c.cx()).abs() < 1e-6);
                assert!((d.cy - c.cy()).abs() < 1e-6);
                assert!((d.w - c.w()).abs() < 1e-6);
                assert!((d.h - c.h()).abs() < 1e-6);
                assert_eq!(d.anterior, label.is_anterior());
                match label {
                    ToothLabel::AnteriorFd => assert_eq!(d.fd, Some(true)),
                    ToothLabel::AnteriorNoFd => assert_eq!(d.fd, Some(false)),
                    _ => assert_eq!(d.fd, None),
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let base = DatasetSpec::default();
        for spec in [
            DatasetSpec { num_images: 0, ..base },
            DatasetSpec { anterior_per_image: (0, 12), ..base },
            DatasetSpec { anterior_per_image: (5, 4), ..base },
            DatasetSpec { posterior_per_image: (2, 11), ..base },
            DatasetSpec { fd_fraction: 1.5, ..base },
            DatasetSpec { noise_level: -0.1, ..base },
            DatasetSpec { feature_dim: 100, ..base },
        ] {
            assert!(matches!(generate::<f64>(&spec), Err(Error::InfeasibleSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn coco_roundtrip_reproduces_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fd.json");
        let spec = DatasetSpec { num_images: 6, ..DatasetSpec::default() };
        let scenes = generate::<f64>(&spec).unwrap();
        save_coco(&scenes, &path).unwrap();
        let loaded = load_coco::<f64>(&path).unwrap();
        assert_eq!(loaded.len(), scenes.len());
        for (orig, back) in scenes.iter().zip(&loaded) {
            assert_eq!(orig.image_id, back.image_id);
            assert!(back.features.is_empty());
            assert_eq!(back.annotations.len(), orig.annotations.len());
            assert_eq!(back.hidden_truth, back.annotations);
            for ((la, ba), (lb, bb)) in orig.annotations.iter().zip(&back.annotations) {
                assert_eq!(la, lb);
                for (p, q) in [
                    (ba.x1(), bb.x1()),
                    (ba.y1(), bb.y1()),
                    (ba.x2(), bb.x2()),
                    (ba.y2(), bb.y2()),
                ] {
                    assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn fd_task_category_list_is_the_two_diagnosis_prompts() {
        let spec = DatasetSpec { num_images: 4, ..DatasetSpec::default() };
        let coco = to_coco(&generate::<f64>(&spec).unwrap()).unwrap();
        let names: Vec<&str> = coco.categories.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["Anterior Teeth No FD", "Anterior Teeth FD"]);
        assert_eq!(coco.categories[0].id, 1);
        assert_eq!(coco.categories[1].id, 2);
        // Teeth task: coarse position classes instead.
        let spec = DatasetSpec { annotate_posterior: true, ..spec };
        let coco = to_coco(&generate::<f64>(&spec).unwrap()).unwrap();
        let names: Vec<&str> = coco.categories.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["Posterior Teeth", "Anterior Teeth"]);
    }

    #[test]
    fn handwritten_coco_file_loads_with_expected_coordinates() {
        let text = r#"{
            "images": [{"id": 3, "width": 800, "height": 400, "file_name": "x.png"}],
            "annotations": [
                {"id": 1, "image_id": 3, "category_id": 1, "bbox": [80.0, 40.0, 160.0, 100.0]},
                {"id": 2, "image_id": 3, "category_id": 2, "bbox": [400.0, 200.0, 80.0, 40.0]}
            ],
            "categories": [
                {"id": 1, "name": "Anterior Teeth No FD"},
                {"id": 2, "name": "Anterior Teeth FD"}
            ]
        }"#;
        let scenes = scenes_from_coco::<f64>(&serde_json::from_str(text).unwrap()).unwrap();
        assert_eq!(scenes.len(), 1);
        let (label, b) = &scenes[0].annotations[0];
        assert_eq!(*label, ToothLabel::AnteriorNoFd);
        assert!((b.x1() - 0.1).abs() < 1e-12);
        assert!((b.y1() - 0.1).abs() < 1e-12);
        assert!((b.x2() - 0.3).abs() < 1e-12);
        assert!((b.y2() - 0.35).abs() < 1e-12);
        let (label, b) = &scenes[0].annotations[1];
        assert_eq!(*label, ToothLabel::AnteriorFd);
        assert!((b.x1() - 0.5).abs() < 1e-12);
        assert!((b.y2() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn malformed_coco_inputs_are_rejected() {
        let ok_img = r#""images": [{"id": 1, "width": 640, "height": 640}]"#;
        let cases = [
            // Unknown category name.
            format!(
                r#"{{{ok_img}, "annotations": [], "categories": [{{"id": 1, "name": "Molar"}}]}}"#
            ),
            // Out-of-bounds box.
            format!(
                r#"{{{ok_img}, "annotations": [{{"id": 1, "image_id": 1, "category_id": 1, "bbox": [600.0, 0.0, 100.0, 10.0]}}], "categories": [{{"id": 1, "name": "Anterior Teeth FD"}}]}}"#
            ),
            // Annotation pointing at a missing image.
            format!(
                r#"{{{ok_img}, "annotations": [{{"id": 1, "image_id": 9, "category_id": 1, "bbox": [0.0, 0.0, 10.0, 10.0]}}], "categories": [{{"id": 1, "name": "Anterior Teeth FD"}}]}}"#
            ),
        ];
        for text in &cases {
            let coco: CocoFile = serde_json::from_str(text).unwrap();
            assert!(scenes_from_coco::<f64>(&coco).is_err(), "{text}");
        }
        assert!(serde_json::from_str::<CocoFile>("{not json").is_err());
    }
}
