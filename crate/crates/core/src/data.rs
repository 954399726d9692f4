//! Synthetic detection scenes generated directly as feature pyramids.
//!
//! Every class owns a fixed unit-norm signature. An object paints its
//! class signature onto exactly one pyramid level, the one whose stride best
//! matches the object's size, weighted by how much of each cell the box
//! covers and by a smooth bump peaking at the box centre. On top of the
//! signature, a part pattern shared by all classes varies linearly with the
//! cell's offset from the box centre, so a single cell hints at where the
//! object's centre lies. Gaussian noise is added everywhere.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::io::{read_records, write_records};
use crate::sampling::{FeatureMap, FeaturePyramid};
use crate::supervision::{Label, LabelSet};
use crate::tensor::Tensor;

/// Strides of the generated levels, fine to coarse.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// An object of side `s` pixels prefers the level whose stride is closest
/// to `s / OBJECT_CELLS` on a log scale.
const OBJECT_CELLS: f64 = 2.0;

/// Largest tolerated overlap between two objects on one level, as a
/// fraction of the smaller box.
const MAX_SAME_LEVEL_OVERLAP: f64 = 0.25;

const PLACEMENT_ATTEMPTS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Side of the square image in pixels.
    pub image_size: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    /// Range of `sqrt(w * h)` as a fraction of the image side.
    pub scale_range: (f64, f64),
    pub noise_std: f64,
    pub channels: usize,
    /// Amplitude of the part pattern, which encodes each cell's offset from
    /// its object's centre. `0` paints the signature alone.
    pub part_gain: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            num_classes: 6,
            max_objects: 8,
            scale_range: (0.05, 0.5),
            noise_std: 0.1,
            channels: 16,
            part_gain: 0.5,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be at least 1".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("scale range ({lo}, {hi}) outside (0, 1)")));
        }
        if self.num_classes == 0 || self.channels == 0 {
            return Err(Error::Config("num_classes and channels must be positive".into()));
        }
        if !(self.part_gain >= 0.0 && self.part_gain.is_finite()) {
            return Err(Error::Config(format!("part_gain {} must be non-negative", self.part_gain)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be non-negative", self.noise_std)));
        }
        let coarse = *STRIDES.last().unwrap();
        if self.image_size < coarse || self.image_size % coarse != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {coarse}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        STRIDES.iter().map(|s| self.image_size / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub index: usize,
    pub pyramid: FeaturePyramid,
    /// Padded to `max_objects`; use [`Scene::labels_for`] to re-pad.
    pub labels: LabelSet,
    /// Pyramid level each label was painted on.
    pub levels: Vec<usize>,
}

impl Scene {
    pub fn labels_for(&self, num_queries: usize) -> Result<LabelSet> {
        if self.labels.len() > num_queries {
            return Err(Error::Contract(format!(
                "scene {} has {} objects for {num_queries} queries",
                self.index,
                self.labels.len()
            )));
        }
        Ok(LabelSet {
            foreground: self.labels.foreground.clone(),
            pad_to: num_queries,
        })
    }
}

/// Unit-norm signature of class `c`, independent of any scene seed.
pub fn class_signature(c: usize, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5167_0000 + c as u64);
    loop {
        let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// The two unit directions along which the part pattern varies, shared by
/// all classes.
pub fn part_axes(channels: usize) -> [Vec<f64>; 2] {
    [class_signature(0x100, channels), class_signature(0x101, channels)]
}

/// Level whose stride best matches an object of `size_px` pixels.
pub fn level_for_size(size_px: f64) -> usize {
    let score = |s: usize| (size_px / (OBJECT_CELLS * s as f64)).log2().abs();
    (0..STRIDES.len())
        .min_by(|&a, &b| score(STRIDES[a]).total_cmp(&score(STRIDES[b])))
        .unwrap()
}

fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Paint weight of each cell of an `s x s` map for a normalised box.
pub fn footprint(b: &BBox, s: usize) -> Vec<f64> {
    footprint_parts(b, s).into_iter().map(|(w, _, _)| w).collect()
}

/// Paint weight and normalised offset `(dx, dy)` from the box centre of
/// each cell; offsets lie in `[-1, 1]` inside the box.
pub fn footprint_parts(b: &BBox, s: usize) -> Vec<(f64, f64, f64)> {
    let [x1, y1, x2, y2] = b.corners();
    let [cx, cy, w, h] = b.v;
    let c = 1.0 / s as f64;
    let mut out = vec![(0.0, 0.0, 0.0); s * s];
    for i in 0..s {
        let oy = overlap_1d(i as f64 * c, (i + 1) as f64 * c, y1, y2) / c;
        if oy == 0.0 {
            continue;
        }
        for j in 0..s {
            let ox = overlap_1d(j as f64 * c, (j + 1) as f64 * c, x1, x2) / c;
            if ox == 0.0 {
                continue;
            }
            let dx = ((j as f64 + 0.5) * c - cx) / (w / 2.0);
            let dy = ((i as f64 + 0.5) * c - cy) / (h / 2.0);
            let bump = 1.0 - 0.5 * (dx * dx + dy * dy).min(1.0);
            out[i * s + j] = (ox * oy * bump, dx.clamp(-1.0, 1.0), dy.clamp(-1.0, 1.0));
        }
    }
    out
}

fn sample_box(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> BBox {
    let (lo, hi) = spec.scale_range;
    let size = (rng.random_range(lo.ln()..=hi.ln())).exp();
    let aspect: f64 = rng.random_range(-0.4f64..=0.4).exp();
    let w = (size * aspect.sqrt()).min(0.95);
    let h = (size / aspect.sqrt()).min(0.95);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BBox::cxcywh(cx, cy, w, h).expect("sampled box lies inside the image")
}

fn crowded(b: &BBox, level: usize, placed: &[(BBox, usize)]) -> bool {
    let [ax1, ay1, ax2, ay2] = b.corners();
    placed.iter().filter(|(_, l)| *l == level).any(|(o, _)| {
        let [bx1, by1, bx2, by2] = o.corners();
        let inter = overlap_1d(ax1, ax2, bx1, bx2) * overlap_1d(ay1, ay2, by1, by2);
        inter > MAX_SAME_LEVEL_OVERLAP * b.area().min(o.area())
    })
}

/// Deterministic in `(spec.seed, index)`.
pub fn gen_scene(spec: &SceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let sizes = spec.level_sizes();
    let d = spec.channels;
    let m = rng.random_range(1..=spec.max_objects);

    let mut placed: Vec<(BBox, usize)> = Vec::with_capacity(m);
    let mut foreground = Vec::with_capacity(m);
    for _ in 0..m {
        let class_id = rng.random_range(0..spec.num_classes);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let b = sample_box(&mut rng, spec);
            let size_px = (b.v[2] * b.v[3]).sqrt() * spec.image_size as f64;
            let level = level_for_size(size_px);
            if !crowded(&b, level, &placed) {
                placed.push((b, level));
                foreground.push(Label { class_id, bbox: b });
                break;
            }
        }
    }

    let mut maps: Vec<Vec<f64>> = sizes.iter().map(|s| vec![0.0; s * s * d]).collect();
    let [ax, ay] = part_axes(d);
    for ((b, level), label) in placed.iter().zip(&foreground) {
        let sig = class_signature(label.class_id, d);
        let s = sizes[*level];
        for (cell, (w, dx, dy)) in footprint_parts(b, s).into_iter().enumerate() {
            if w != 0.0 {
                let (px, py) = (spec.part_gain * dx, spec.part_gain * dy);
                let dst = &mut maps[*level][cell * d..(cell + 1) * d];
                for (k, x) in dst.iter_mut().enumerate() {
                    *x += w * (sig[k] + px * ax[k] + py * ay[k]);
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for map in &mut maps {
            for x in map.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
    }

    let levels = maps
        .into_iter()
        .zip(&sizes)
        .zip(STRIDES)
        .map(|((data, &s), stride)| FeatureMap::new(stride, Tensor::new(vec![s, s, d], data)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        index,
        pyramid: FeaturePyramid::new(levels)?,
        labels: LabelSet::new(foreground, spec.max_objects, spec.num_classes)?,
        levels: placed.iter().map(|(_, l)| *l).collect(),
    })
}

/// Scenes `0..count` in order.
pub fn gen_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    (0..count).map(|i| gen_scene(spec, i)).collect()
}

/// Uniform sample of `ceil(len * ratio)` scenes without replacement, kept in
/// their original order.
pub fn subsample(dataset: &[Scene], ratio: f64, seed: u64) -> Result<Vec<Scene>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("subsample ratio {ratio} outside (0, 1]")));
    }
    let n = dataset.len();
    let k = ((n as f64 * ratio) - 1e-9).ceil().max(0.0) as usize;
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| dataset[i].clone()).collect())
}

/// Class recovered for `label` by matching the footprint-weighted mean
/// feature against every class signature. Solves noise-free scenes
/// exactly.
pub fn oracle_class(scene: &Scene, label: usize, num_classes: usize) -> usize {
    let b = &scene.labels.foreground[label].bbox;
    let map = &scene.pyramid.levels[scene.levels[label]];
    let d = map.channels();
    let fp = footprint(b, map.height());
    let mut mean = vec![0.0; d];
    for (cell, w) in fp.iter().enumerate() {
        for (m, x) in mean.iter_mut().zip(&map.values.data()[cell * d..(cell + 1) * d]) {
            *m += w * x;
        }
    }
    (0..num_classes)
        .max_by(|&a, &b| {
            let dot = |c| class_signature(c, d).iter().zip(&mean).map(|(s, m)| s * m).sum::<f64>();
            dot(a).total_cmp(&dot(b))
        })
        .unwrap()
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    labels: Vec<Label>,
    levels: Vec<usize>,
    blob: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: SceneSpec,
    scenes: Vec<ManifestEntry>,
}

/// Writes `manifest.json` plus one record blob per scene into `dir`.
/// Features are stored as 32-bit floats.
pub fn export_scenes(dir: &Path, spec: &SceneSpec, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for s in scenes {
        let blob = format!("scene_{:05}.bin", s.index);
        let names: Vec<String> = (0..s.pyramid.levels.len()).map(|l| format!("level.{l}")).collect();
        let mut buf = Vec::new();
        write_records(
            &mut buf,
            names.iter().map(String::as_str).zip(s.pyramid.levels.iter().map(|l| &l.values)),
        )?;
        std::fs::write(dir.join(&blob), buf)?;
        entries.push(ManifestEntry {
            index: s.index,
            labels: s.labels.foreground.clone(),
            levels: s.levels.clone(),
            blob,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        scenes: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn import_scenes(dir: &Path) -> Result<(SceneSpec, Vec<Scene>)> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let spec = manifest.spec;
    let scenes = manifest
        .scenes
        .into_iter()
        .map(|e| {
            let bytes = std::fs::read(dir.join(&e.blob))?;
            let levels = read_records(&mut bytes.as_slice())?
                .into_iter()
                .zip(STRIDES)
                .map(|((_, t), stride)| FeatureMap::new(stride, t))
                .collect::<Result<Vec<_>>>()?;
            Ok(Scene {
                index: e.index,
                pyramid: FeaturePyramid::new(levels)?,
                labels: LabelSet::new(e.labels, spec.max_objects, spec.num_classes)?,
                levels: e.levels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, scenes))
}
