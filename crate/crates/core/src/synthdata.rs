//! Deterministic synthetic RGB-D scenes and frustum extraction.
//!
//! Objects are noisy box shells resting on a floor plane, observed by a
//! pinhole camera at the origin. Each object yields one frustum sample: the
//! scene points projecting inside its 2D label, rotated so the frustum
//! centerline faces `+z`, resampled to a fixed count.
//!
//! On-disk layout of one split directory:
//!
//! * `meta.json`: class specs, points per frustum, extra channels `k`, seed,
//!   label fraction and camera.
//! * `samples.jsonl`: one JSON object per frustum (see [`SampleRecord`]).
//! * `points.f32`: little-endian `f32`, row-major `N x (3 + k)` per sample,
//!   located by the record's byte offset.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou3d, point_in_box, points_in_box, project_box_to_image, Box2D, Box3D, Camera};

/// One splitmix64 step; used to derive independent per-scene and
/// per-object seeds from a base seed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed for child `index` of `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index.wrapping_mul(0xD1B54A32D192ED03))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Strong,
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub name: String,
    /// Mean `(h, w, l)` in meters.
    pub mean_size: [f64; 3],
    /// Uniform relative jitter applied to each size component.
    pub size_jitter: f64,
    /// Surface points per square meter.
    pub density: f64,
    pub supervision: Supervision,
}

impl ClassSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mean_size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config(format!("class {}: mean size must be positive", self.name)));
        }
        if !(0.0..=0.5).contains(&self.size_jitter) {
            return Err(Error::Config(format!("class {}: size jitter must lie in [0, 0.5]", self.name)));
        }
        if self.density <= 0.0 {
            return Err(Error::Config(format!("class {}: density must be positive", self.name)));
        }
        Ok(())
    }
}

/// Class ids with the given supervision tag, in configuration order.
pub fn class_ids(classes: &[ClassSpec], tag: Supervision) -> Vec<usize> {
    classes.iter().filter(|c| c.supervision == tag).map(|c| c.id).collect()
}

fn validate_classes(classes: &[ClassSpec]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Config("at least one class must be configured".into()));
    }
    for (i, c) in classes.iter().enumerate() {
        c.validate()?;
        if c.id != i {
            return Err(Error::Config(format!(
                "class ids must be 0..n in order; class '{}' has id {} at position {i}",
                c.name, c.id
            )));
        }
    }
    Ok(())
}

/// Three strong classes and two weak ones. Class 4 is the large weak class
/// whose volume prior matters.
pub fn default_classes() -> Vec<ClassSpec> {
    let spec = |id, name: &str, size, sup| ClassSpec {
        id,
        name: name.to_string(),
        mean_size: size,
        size_jitter: 0.1,
        density: 60.0,
        supervision: sup,
    };
    vec![
        spec(0, "cabinet", [1.0, 0.6, 0.8], Supervision::Strong),
        spec(1, "table", [0.75, 0.9, 1.5], Supervision::Strong),
        spec(2, "shelf", [1.8, 0.4, 1.0], Supervision::Strong),
        spec(3, "bed", [0.6, 1.6, 2.1], Supervision::Weak),
        spec(4, "truck", [1.7, 2.0, 4.4], Supervision::Weak),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub classes: Vec<ClassSpec>,
    pub camera: Camera,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Range of object center depths, meters.
    pub depth_range: (f64, f64),
    /// Maximum horizontal bearing of an object center, radians.
    pub max_bearing: f64,
    /// Floor plane height below the camera (the floor is `y = floor_y`).
    pub floor_y: f64,
    /// Gaussian noise on surface points, meters.
    pub noise_sigma: f64,
    /// Background clutter points per object surface point.
    pub clutter_ratio: f64,
    /// Cap on surface points per object.
    pub max_points_per_object: usize,
    pub max_retries: usize,
    /// Placements must keep pairwise IoU strictly below this.
    pub max_overlap_iou: f64,
    /// Extra per-point channels `k` (scalar intensities).
    pub extra_channels: usize,
    /// Sample only faces turned toward the camera, like a depth sensor.
    pub visible_only: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            camera: Camera::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0),
            objects_min: 2,
            objects_max: 4,
            depth_range: (4.0, 10.0),
            max_bearing: 0.42,
            floor_y: 1.3,
            noise_sigma: 0.01,
            clutter_ratio: 0.4,
            max_points_per_object: 1500,
            max_retries: 200,
            max_overlap_iou: 0.05,
            extra_channels: 0,
            visible_only: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        validate_classes(&self.classes)?;
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "object count range [{}, {}] is invalid",
                self.objects_min, self.objects_max
            )));
        }
        if !(self.depth_range.0 > 0.0 && self.depth_range.0 <= self.depth_range.1) {
            return Err(Error::Config("depth range must be positive and ordered".into()));
        }
        if !self.camera.is_valid() {
            return Err(Error::Config("camera intrinsics are invalid".into()));
        }
        if self.noise_sigma < 0.0 || self.clutter_ratio < 0.0 {
            return Err(Error::Config("noise and clutter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub box3d: Box3D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub camera: Camera,
    pub objects: Vec<SceneObject>,
    /// Row-major `M x (3 + k)`.
    pub points: Vec<f64>,
    pub dims: usize,
    /// Object index that produced each point; `None` for clutter.
    pub owner: Vec<Option<usize>>,
    pub seed: u64,
}

impl Scene {
    pub fn num_points(&self) -> usize {
        self.points.len() / self.dims
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let r = &self.points[i * self.dims..i * self.dims + 3];
        [r[0], r[1], r[2]]
    }
}

/// Face areas in the order top, bottom, `+w`, `-w`, `+l`, `-l`.
fn face_areas(size: [f64; 3]) -> [f64; 6] {
    let [h, w, l] = size;
    [l * w, l * w, l * h, l * h, w * h, w * h]
}

/// Which faces of `b` turn their outer side toward a camera at the origin.
fn visible_faces(b: &Box3D) -> [bool; 6] {
    let cam = b.to_local([0.0; 3]);
    let [h, w, l] = b.size;
    [
        cam[1] < -h / 2.0,
        cam[1] > h / 2.0,
        cam[2] > w / 2.0,
        cam[2] < -w / 2.0,
        cam[0] > l / 2.0,
        cam[0] < -l / 2.0,
    ]
}

/// Samples a uniform point on the allowed faces of a box of `size` (local
/// frame, before rotation), choosing faces by area.
fn sample_surface_local(size: [f64; 3], faces: [bool; 6], rng: &mut impl Rng) -> [f64; 3] {
    let [h, w, l] = size;
    let mut areas = face_areas(size);
    for (a, keep) in areas.iter_mut().zip(faces) {
        if !keep {
            *a = 0.0;
        }
    }
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 5;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.random_range(-0.5..0.5);
    let v = rng.random_range(-0.5..0.5);
    match face {
        0 => [u * l, -h / 2.0, v * w],
        1 => [u * l, h / 2.0, v * w],
        2 => [u * l, v * h, w / 2.0],
        3 => [u * l, v * h, -w / 2.0],
        4 => [l / 2.0, v * h, u * w],
        _ => [-l / 2.0, v * h, u * w],
    }
}

/// Builds one scene. Deterministic in `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = config.camera;
    let n_obj = rng.random_range(config.objects_min..=config.objects_max);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_obj);
    for index in 0..n_obj {
        let class = &config.classes[rng.random_range(0..config.classes.len())];
        let j = class.size_jitter;
        let size = class
            .mean_size
            .map(|s| s * (1.0 + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 }));
        let heading = rng.random_range(-PI..PI);
        let mut placed = None;
        for _ in 0..config.max_retries {
            let z = rng.random_range(config.depth_range.0..=config.depth_range.1);
            let bearing = rng.random_range(-config.max_bearing..=config.max_bearing);
            let x = z * bearing.tan();
            let y = config.floor_y - size[0] / 2.0;
            let candidate = Box3D::new([x, y, z], size, heading);
            let in_front = crate::geometry::box_corners(&candidate).iter().all(|c| c[2] > 0.5);
            let center_visible = cam
                .project(candidate.center)
                .map(|[u, v]| u > 0.0 && u < cam.width && v > 0.0 && v < cam.height)
                .unwrap_or(false);
            let clear = objects
                .iter()
                .all(|o| iou3d(&o.box3d, &candidate) < config.max_overlap_iou);
            if in_front && center_visible && clear {
                placed = Some(candidate);
                break;
            }
        }
        let box3d = placed.ok_or(Error::SceneTooCrowded {
            index,
            retries: config.max_retries,
        })?;
        objects.push(SceneObject {
            class_id: class.id,
            box3d,
        });
    }

    let k = config.extra_channels;
    let dims = 3 + k;
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("finite sigma");
    let mut points = Vec::new();
    let mut owner = Vec::new();
    let mut object_points = 0usize;
    for (oi, obj) in objects.iter().enumerate() {
        let density = config.classes[obj.class_id].density;
        let faces = if config.visible_only {
            visible_faces(&obj.box3d)
        } else {
            [true; 6]
        };
        let area: f64 = face_areas(obj.box3d.size)
            .iter()
            .zip(faces)
            .filter(|(_, keep)| *keep)
            .map(|(a, _)| a)
            .sum();
        let count = ((density * area).ceil() as usize)
            .clamp(1, config.max_points_per_object.max(1));
        let intensity: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        for _ in 0..count {
            let local = sample_surface_local(obj.box3d.size, faces, &mut rng);
            let r = crate::geometry::rotate_y(local, obj.box3d.heading);
            for a in 0..3 {
                points.push(r[a] + obj.box3d.center[a] + noise.sample(&mut rng));
            }
            for &base in &intensity {
                points.push((base + 0.05 * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0));
            }
            owner.push(Some(oi));
        }
        object_points += count;
    }

    let n_clutter = (config.clutter_ratio * object_points as f64).round() as usize;
    let (z0, z1) = (config.depth_range.0 - 1.0, config.depth_range.1 + 3.0);
    let half_fov = (cam.width / (2.0 * cam.fx)).atan();
    for _ in 0..n_clutter {
        let z = rng.random_range(z0.max(0.5)..z1);
        let xmax = z * half_fov.tan() * 1.1;
        let x = rng.random_range(-xmax..xmax);
        let y = if rng.random_bool(0.7) {
            config.floor_y + noise.sample(&mut rng)
        } else {
            rng.random_range(config.floor_y - 2.5..config.floor_y)
        };
        points.extend_from_slice(&[x, y, z]);
        for _ in 0..k {
            points.push(rng.random_range(0.0..1.0));
        }
        owner.push(None);
    }

    Ok(Scene {
        camera: cam,
        objects,
        points,
        dims,
        owner,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Uniform per-edge jitter in pixels.
    pub jitter_px: f64,
    /// Fraction of the projected box extent kept by the 2D label (about its
    /// center). `1.0` labels the full projection of the amodal 3D box;
    /// smaller values emulate annotators drawing tight boxes around the
    /// visible object.
    pub tightness: f64,
    /// Detection score is `0.5 + 0.5 * Beta(alpha, beta)`.
    pub score_alpha: f64,
    pub score_beta: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            jitter_px: 2.0,
            tightness: 1.0,
            score_alpha: 2.0,
            score_beta: 2.0,
        }
    }
}

/// 2D label and synthetic detection score for object `index`.
pub fn label_box2d(scene: &Scene, index: usize, config: &LabelConfig, rng: &mut impl Rng) -> Result<(Box2D, f64)> {
    let cam = scene.camera;
    let projected = project_box_to_image(&scene.objects[index].box3d, &cam)?;
    let shrunk = if config.tightness == 1.0 {
        projected
    } else {
        projected.scaled(config.tightness)
    };
    let clean = shrunk.clipped(cam.width, cam.height);
    let j = config.jitter_px;
    let mut jitter = || if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let mut label = Box2D::new(
        clean.left + jitter(),
        clean.top + jitter(),
        clean.right + jitter(),
        clean.bottom + jitter(),
    )
    .clipped(cam.width, cam.height);
    if label.left > label.right {
        let m = 0.5 * (label.left + label.right);
        label.left = m;
        label.right = m;
    }
    if label.top > label.bottom {
        let m = 0.5 * (label.top + label.bottom);
        label.top = m;
        label.bottom = m;
    }
    let beta = Beta::new(config.score_alpha, config.score_beta)
        .map_err(|e| Error::Config(format!("score distribution: {e}")))?;
    let score = 0.5 + 0.5 * beta.sample(rng);
    Ok((label, score.clamp(0.5, 1.0)))
}

/// A frustum point cloud with its labels, in the rotated frustum frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumSample {
    /// Row-major `N x (3 + k)`.
    pub points: Vec<f64>,
    pub dims: usize,
    pub class_id: usize,
    pub score: f64,
    pub box2d: Box2D,
    /// Ground-truth box in the frustum frame; absent for weak-class
    /// training samples.
    pub box3d: Option<Box3D>,
    pub frustum_angle: f64,
    pub camera: Camera,
    /// Foreground mask; empty when `box3d` is absent.
    pub mask: Vec<bool>,
    pub scene_id: u64,
    pub object_index: usize,
}

impl FrustumSample {
    pub fn num_points(&self) -> usize {
        self.points.len() / self.dims
    }

    pub fn xyz(&self) -> Vec<[f64; 3]> {
        self.points
            .chunks_exact(self.dims)
            .map(|r| [r[0], r[1], r[2]])
            .collect()
    }

    /// Label box in the camera frame.
    pub fn box3d_camera(&self) -> Option<Box3D> {
        self.box3d.map(|b| b.rotated_y(self.frustum_angle))
    }
}

/// Selects the scene points inside `box2d`, rotates them to face `+z` and
/// resamples exactly `n` rows. `label` is the camera-frame 3D box, if known.
#[allow(clippy::too_many_arguments)]
pub fn extract_frustum(
    scene: &Scene,
    box2d: &Box2D,
    class_id: usize,
    n: usize,
    seed: u64,
    label: Option<Box3D>,
    score: f64,
    object_index: usize,
) -> Result<FrustumSample> {
    if box2d.area() <= 0.0 {
        return Err(Error::Data("frustum 2D box has zero area".into()));
    }
    let cam = scene.camera;
    let dims = scene.dims;
    let selected: Vec<usize> = (0..scene.num_points())
        .filter(|&i| {
            cam.project(scene.xyz(i))
                .map(|[u, v]| box2d.contains(u, v))
                .unwrap_or(false)
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptyFrustum);
    }
    let angle = cam.bearing(box2d.center()[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if selected.len() >= n {
        let mut pool = selected.clone();
        let (head, _) = pool.partial_shuffle(&mut rng, n);
        head.to_vec()
    } else {
        let mut out = selected.clone();
        while out.len() < n {
            out.push(selected[rng.random_range(0..selected.len())]);
        }
        out.shuffle(&mut rng);
        out
    };
    let mut points = Vec::with_capacity(n * dims);
    for &i in &chosen {
        let row = &scene.points[i * dims..(i + 1) * dims];
        let r = crate::geometry::rotate_y([row[0], row[1], row[2]], -angle);
        points.extend_from_slice(&r);
        points.extend_from_slice(&row[3..]);
    }
    let box3d = label.map(|b| b.rotated_y(-angle));
    let mut sample = FrustumSample {
        points,
        dims,
        class_id,
        score,
        box2d: *box2d,
        box3d,
        frustum_angle: angle,
        camera: cam,
        mask: Vec::new(),
        scene_id: scene.seed,
        object_index,
    };
    if let Some(b) = box3d {
        sample.mask = points_in_box(&sample.xyz(), &b);
    }
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub labels: LabelConfig,
    pub num_scenes: usize,
    /// `(train, val)` scene fractions; must sum to 1.
    pub split: (f64, f64),
    /// Fraction of weak-class training samples that keep their 3D label.
    pub label_fraction: f64,
    pub points_per_frustum: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            labels: LabelConfig::default(),
            num_scenes: 600,
            split: (0.75, 0.25),
            label_fraction: 0.0,
            points_per_frustum: 512,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if (self.split.0 + self.split.1 - 1.0).abs() > 1e-9 || self.split.0 < 0.0 || self.split.1 < 0.0 {
            return Err(Error::Config(format!(
                "split fractions {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(Error::Config("label fraction must lie in [0, 1]".into()));
        }
        if self.points_per_frustum == 0 {
            return Err(Error::Config("points per frustum must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub split: String,
    pub classes: Vec<ClassSpec>,
    pub points_per_frustum: usize,
    pub extra_channels: usize,
    pub seed: u64,
    pub label_fraction: f64,
    pub camera: Camera,
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
}

impl From<Box3D> for BoxRecord {
    fn from(b: Box3D) -> Self {
        Self {
            center: b.center,
            size: b.size,
            heading: b.heading,
        }
    }
}

impl From<&BoxRecord> for Box3D {
    fn from(r: &BoxRecord) -> Self {
        Box3D::new(r.center, r.size, r.heading)
    }
}

/// One line of `samples.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub class_id: usize,
    pub score: f64,
    pub box2d: [f64; 4],
    pub box3d: Option<BoxRecord>,
    pub frustum_angle: f64,
    /// Base64 bitset, bit `i` in byte `i / 8` (LSB first). Empty when the
    /// sample has no 3D label.
    pub mask: String,
    pub points_file: String,
    /// Byte offset of the sample's first value in `points_file`.
    pub points_offset: u64,
    pub scene_id: u64,
    pub object_index: usize,
}

pub fn encode_mask(mask: &[bool]) -> String {
    if mask.is_empty() {
        return String::new();
    }
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_mask(s: &str, n: usize) -> std::result::Result<Vec<bool>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| e.to_string())?;
    if bytes.len() != n.div_ceil(8) {
        return Err(format!("mask has {} bytes, expected {}", bytes.len(), n.div_ceil(8)));
    }
    Ok((0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
}

pub const META_FILE: &str = "meta.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const POINTS_FILE: &str = "points.f32";

/// A loaded split.
#[derive(Clone, Debug)]
pub struct Split {
    pub meta: SplitMeta,
    pub samples: Vec<FrustumSample>,
}

impl Split {
    pub fn strong_classes(&self) -> Vec<usize> {
        class_ids(&self.meta.classes, Supervision::Strong)
    }

    pub fn weak_classes(&self) -> Vec<usize> {
        class_ids(&self.meta.classes, Supervision::Weak)
    }

    /// Drops 3D labels and masks of every weak-class sample. Returns how
    /// many were removed.
    pub fn redact_weak_labels(&mut self) -> usize {
        let weak = self.weak_classes();
        let mut n = 0;
        for s in &mut self.samples {
            if weak.contains(&s.class_id) && s.box3d.is_some() {
                s.box3d = None;
                s.mask.clear();
                n += 1;
            }
        }
        n
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut jsonl = Vec::new();
        let mut raw = Vec::new();
        for s in &self.samples {
            let rec = SampleRecord {
                class_id: s.class_id,
                score: s.score,
                box2d: s.box2d.to_array(),
                box3d: s.box3d.map(BoxRecord::from),
                frustum_angle: s.frustum_angle,
                mask: encode_mask(&s.mask),
                points_file: POINTS_FILE.to_string(),
                points_offset: raw.len() as u64,
                scene_id: s.scene_id,
                object_index: s.object_index,
            };
            for &x in &s.points {
                raw.extend_from_slice(&(x as f32).to_le_bytes());
            }
            serde_json::to_writer(&mut jsonl, &rec).expect("record serializes");
            jsonl.push(b'\n');
        }
        let write = |name: &str, bytes: &[u8]| -> Result<()> {
            let p = dir.join(name);
            let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            f.write_all(bytes).map_err(|e| Error::io(&p, e))
        };
        let meta = serde_json::to_vec_pretty(&self.meta).expect("meta serializes");
        write(META_FILE, &meta)?;
        write(SAMPLES_FILE, &jsonl)?;
        write(POINTS_FILE, &raw)
    }

    /// Loads and validates a split directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(META_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let meta: SplitMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        validate_classes(&meta.classes).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let dims = 3 + meta.extra_channels;
        let n = meta.points_per_frustum;
        let spath = dir.join(SAMPLES_FILE);
        let text = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
        let mut raw_cache: Option<(String, Vec<u8>)> = None;
        let mut samples = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(&spath, format!("line {}: {e}", line_no + 1)))?;
            if rec.class_id >= meta.classes.len() {
                return Err(Error::format(&spath, format!("line {}: unknown class {}", line_no + 1, rec.class_id)));
            }
            if raw_cache.as_ref().map(|(n, _)| n != &rec.points_file).unwrap_or(true) {
                let p: PathBuf = dir.join(&rec.points_file);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                raw_cache = Some((rec.points_file.clone(), bytes));
            }
            let raw = &raw_cache.as_ref().unwrap().1;
            let start = rec.points_offset as usize;
            let end = start + 4 * n * dims;
            if end > raw.len() {
                return Err(Error::format(&spath, format!("line {}: points beyond end of file", line_no + 1)));
            }
            let points: Vec<f64> = raw[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let mask = decode_mask(&rec.mask, n).map_err(|e| Error::format(&spath, format!("line {}: {e}", line_no + 1)))?;
            let box3d = rec.box3d.as_ref().map(Box3D::from);
            let sample = FrustumSample {
                points,
                dims,
                class_id: rec.class_id,
                score: rec.score,
                box2d: Box2D::from_array(rec.box2d),
                box3d,
                frustum_angle: rec.frustum_angle,
                camera: meta.camera,
                mask,
                scene_id: rec.scene_id,
                object_index: rec.object_index,
            };
            if let Some(b) = box3d {
                let recomputed = points_in_box(&sample.xyz(), &b);
                if recomputed != sample.mask {
                    return Err(Error::format(&spath, format!("line {}: mask disagrees with the 3D label", line_no + 1)));
                }
            }
            if meta.split == "train"
                && meta.classes[rec.class_id].supervision == Supervision::Strong
                && box3d.is_none()
            {
                return Err(Error::format(
                    &spath,
                    format!("line {}: strong-class training sample without a 3D label", line_no + 1),
                ));
            }
            samples.push(sample);
        }
        Ok(Self { meta, samples })
    }
}

/// Rounds coordinates through `f32` (the storage precision) and recomputes
/// the mask so that files reload bit-consistently.
fn quantize(sample: &mut FrustumSample) {
    for x in &mut sample.points {
        *x = *x as f32 as f64;
    }
    if let Some(b) = sample.box3d {
        sample.mask = points_in_box(&sample.xyz(), &b);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train_samples: usize,
    pub val_samples: usize,
    pub skipped_frusta: usize,
    pub weak_train_labeled: usize,
    pub weak_train_total: usize,
}

/// Generates all scenes and returns `(train, val)` splits in memory.
pub fn build_splits(config: &DatasetConfig) -> Result<(Split, Split, DatasetSummary)> {
    config.validate()?;
    let n_train_scenes = (config.split.0 * config.num_scenes as f64).round() as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut skipped = 0;
    for si in 0..config.num_scenes {
        let scene_seed = derive_seed(config.seed, si as u64);
        let scene = generate_scene(&config.scene, scene_seed)?;
        for (oi, obj) in scene.objects.iter().enumerate() {
            let mut lrng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, 1_000 + oi as u64));
            let (box2d, score) = label_box2d(&scene, oi, &config.labels, &mut lrng)?;
            if box2d.area() <= 0.0 {
                skipped += 1;
                continue;
            }
            let fseed = derive_seed(scene_seed, 2_000 + oi as u64);
            match extract_frustum(
                &scene,
                &box2d,
                obj.class_id,
                config.points_per_frustum,
                fseed,
                Some(obj.box3d),
                score,
                oi,
            ) {
                Ok(mut s) => {
                    quantize(&mut s);
                    if si < n_train_scenes {
                        train.push(s);
                    } else {
                        val.push(s);
                    }
                }
                Err(Error::EmptyFrustum) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }

    // Weak-class training labels: keep exactly round(f * n) of them.
    let classes = &config.scene.classes;
    let weak_idx: Vec<usize> = train
        .iter()
        .enumerate()
        .filter(|(_, s)| classes[s.class_id].supervision == Supervision::Weak)
        .map(|(i, _)| i)
        .collect();
    let keep = (config.label_fraction * weak_idx.len() as f64).round() as usize;
    let mut order = weak_idx.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX)));
    for &i in &order[keep..] {
        train[i].box3d = None;
        train[i].mask.clear();
    }

    let meta = |split: &str, n: usize| SplitMeta {
        split: split.to_string(),
        classes: classes.clone(),
        points_per_frustum: config.points_per_frustum,
        extra_channels: config.scene.extra_channels,
        seed: config.seed,
        label_fraction: config.label_fraction,
        camera: config.scene.camera,
        num_samples: n,
    };
    let summary = DatasetSummary {
        train_samples: train.len(),
        val_samples: val.len(),
        skipped_frusta: skipped,
        weak_train_labeled: keep,
        weak_train_total: weak_idx.len(),
    };
    let train = Split {
        meta: meta("train", train.len()),
        samples: train,
    };
    let val = Split {
        meta: meta("val", val.len()),
        samples: val,
    };
    Ok((train, val, summary))
}

/// Generates the dataset and writes `out/train` and `out/val`.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetSummary> {
    let (train, val, summary) = build_splits(config)?;
    train.write(&out.join("train"))?;
    val.write(&out.join("val"))?;
    Ok(summary)
}

/// Fraction of an object's surface points within `tol` of its box hull.
pub fn fraction_near_hull(scene: &Scene, object: usize, tol: f64) -> f64 {
    let b = &scene.objects[object].box3d;
    let mut total = 0;
    let mut near = 0;
    for i in 0..scene.num_points() {
        if scene.owner[i] == Some(object) {
            total += 1;
            let f = crate::geometry::plane_features_single(scene.xyz(i), b);
            let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
            if min >= -tol {
                near += 1;
            }
        }
    }
    near as f64 / total.max(1) as f64
}

/// True when the point lies inside the box grown by `margin` on every face.
pub fn point_in_grown_box(p: [f64; 3], b: &Box3D, margin: f64) -> bool {
    let grown = Box3D::new(b.center, b.size.map(|s| s + 2.0 * margin), b.heading);
    point_in_box(p, &grown)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SceneConfig {
        SceneConfig::default()
    }

    #[test]
    fn same_seed_same_scene() {
        let c = small_config();
        let a = generate_scene(&c, 42).unwrap();
        let b = generate_scene(&c, 42).unwrap();
        assert_eq!(a, b);
        let other = generate_scene(&c, 43).unwrap();
        assert_ne!(a.points, other.points);
    }

    #[test]
    fn zero_clutter_points_belong_to_boxes() {
        let c = SceneConfig {
            clutter_ratio: 0.0,
            ..small_config()
        };
        let s = generate_scene(&c, 7).unwrap();
        for i in 0..s.num_points() {
            let p = s.xyz(i);
            assert!(s
                .objects
                .iter()
                .any(|o| point_in_grown_box(p, &o.box3d, 5.0 * c.noise_sigma)));
        }
    }

    #[test]
    fn surface_points_hug_the_hull() {
        let c = small_config();
        let s = generate_scene(&c, 9).unwrap();
        for oi in 0..s.objects.len() {
            assert!(fraction_near_hull(&s, oi, 3.0 * c.noise_sigma) >= 0.99);
        }
    }

    #[test]
    fn visible_only_samples_faces_facing_the_camera() {
        let c = SceneConfig {
            visible_only: true,
            noise_sigma: 0.0,
            clutter_ratio: 0.0,
            ..small_config()
        };
        for seed in 0..5 {
            let s = generate_scene(&c, seed).unwrap();
            for i in 0..s.num_points() {
                let b = &s.objects[s.owner[i].unwrap()].box3d;
                let faces = visible_faces(b);
                let p = b.to_local(s.xyz(i));
                let half = [b.size[2] / 2.0, b.size[0] / 2.0, b.size[1] / 2.0];
                let on = |axis: usize, sign: f64| (p[axis] - sign * half[axis]).abs() < 1e-9;
                let on_visible = (on(1, -1.0) && faces[0])
                    || (on(1, 1.0) && faces[1])
                    || (on(2, 1.0) && faces[2])
                    || (on(2, -1.0) && faces[3])
                    || (on(0, 1.0) && faces[4])
                    || (on(0, -1.0) && faces[5]);
                assert!(on_visible, "point {p:?} of box {b:?} is on a hidden face");
            }
            // Objects rest on the floor below the camera, so their bottoms
            // are never in view.
            for o in &s.objects {
                let f = visible_faces(&o.box3d);
                assert!(!f[1]);
                assert!(f.iter().filter(|&&v| v).count() <= 3);
            }
        }
    }

    #[test]
    fn scene_invariants() {
        let c = small_config();
        for seed in 0..20 {
            let s = generate_scene(&c, seed).unwrap();
            for (oi, o) in s.objects.iter().enumerate() {
                assert!(o.box3d.center[2] > 0.0);
                assert!(s.owner.iter().any(|w| *w == Some(oi)));
            }
            for i in 0..s.objects.len() {
                for j in 0..i {
                    assert!(iou3d(&s.objects[i].box3d, &s.objects[j].box3d) < c.max_overlap_iou);
                }
            }
        }
    }

    #[test]
    fn crowded_scene_errors() {
        let c = SceneConfig {
            objects_min: 40,
            objects_max: 40,
            depth_range: (4.0, 4.1),
            max_bearing: 0.05,
            max_retries: 20,
            ..small_config()
        };
        assert!(matches!(generate_scene(&c, 0), Err(Error::SceneTooCrowded { .. })));
    }

    #[test]
    fn labels_with_and_without_jitter() {
        let s = generate_scene(&small_config(), 3).unwrap();
        let cam = s.camera;
        let clean = project_box_to_image(&s.objects[0].box3d, &cam)
            .unwrap()
            .clipped(cam.width, cam.height);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let exact = LabelConfig {
            jitter_px: 0.0,
            ..Default::default()
        };
        let (l, score) = label_box2d(&s, 0, &exact, &mut rng).unwrap();
        assert_eq!(l, clean);
        assert!((0.5..=1.0).contains(&score));
        let noisy = LabelConfig::default();
        for _ in 0..50 {
            let (l, _) = label_box2d(&s, 0, &noisy, &mut rng).unwrap();
            for (a, b) in l.to_array().iter().zip(clean.to_array()) {
                assert!((a - b).abs() <= 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn truncated_object_label_touches_border() {
        let mut s = generate_scene(&small_config(), 3).unwrap();
        // Push the first object to the right edge of the view.
        let b = &mut s.objects[0].box3d;
        b.center[0] = b.center[2] * 0.62;
        let cam = s.camera;
        let corners = crate::geometry::box_corners(b);
        let max_u = corners
            .iter()
            .map(|c| cam.project(*c).unwrap()[0])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max_u > cam.width);
        let exact = LabelConfig {
            jitter_px: 0.0,
            ..Default::default()
        };
        let (l, _) = label_box2d(&s, 0, &exact, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(l.right, cam.width);
        let min_u = corners
            .iter()
            .map(|c| cam.project(*c).unwrap()[0])
            .fold(f64::INFINITY, f64::min);
        assert_eq!(l.left, min_u.clamp(0.0, cam.width));
    }

    #[test]
    fn whole_image_frustum_with_centered_object() {
        let c = SceneConfig {
            objects_min: 1,
            objects_max: 1,
            max_bearing: 0.0,
            clutter_ratio: 0.0,
            ..small_config()
        };
        let s = generate_scene(&c, 1).unwrap();
        let full = Box2D::new(0.0, 0.0, s.camera.width, s.camera.height);
        let f = extract_frustum(&s, &full, 0, s.num_points(), 5, Some(s.objects[0].box3d), 0.9, 0).unwrap();
        assert_eq!(f.frustum_angle, 0.0);
        let mut got: Vec<[f64; 3]> = f.xyz();
        let mut want: Vec<[f64; 3]> = (0..s.num_points()).map(|i| s.xyz(i)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn rotated_frustum_faces_forward() {
        let c = SceneConfig {
            objects_min: 1,
            objects_max: 1,
            clutter_ratio: 0.0,
            ..small_config()
        };
        for seed in 0..10 {
            let s = generate_scene(&c, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let exact = LabelConfig {
                jitter_px: 0.0,
                ..Default::default()
            };
            let (b2, _) = label_box2d(&s, 0, &exact, &mut rng).unwrap();
            let f = extract_frustum(&s, &b2, 0, 256, seed, Some(s.objects[0].box3d), 0.9, 0).unwrap();
            let pts = f.xyz();
            let mean_bearing = pts.iter().map(|p| p[0].atan2(p[2])).sum::<f64>() / pts.len() as f64;
            assert!(mean_bearing.abs() < 2f64.to_radians(), "seed {seed}: {mean_bearing}");
        }
    }

    #[test]
    fn resampling_contract() {
        let c = SceneConfig {
            objects_min: 1,
            objects_max: 1,
            clutter_ratio: 0.0,
            ..small_config()
        };
        let s = generate_scene(&c, 2).unwrap();
        let b2 = project_box_to_image(&s.objects[0].box3d, &s.camera)
            .unwrap()
            .clipped(640.0, 480.0);
        let few = Scene {
            points: s.points[..100 * 3].to_vec(),
            owner: s.owner[..100].to_vec(),
            ..s.clone()
        };
        let inside = (0..100)
            .filter(|&i| {
                few.camera
                    .project(few.xyz(i))
                    .map(|[u, v]| b2.contains(u, v))
                    .unwrap_or(false)
            })
            .count();
        let f = extract_frustum(&few, &b2, 0, 512, 0, None, 0.9, 0).unwrap();
        assert_eq!(f.num_points(), 512);
        let angle = f.frustum_angle;
        let pool: Vec<[f64; 3]> = (0..100)
            .map(|i| crate::geometry::rotate_y(few.xyz(i), -angle))
            .collect();
        for p in f.xyz() {
            assert!(pool.iter().any(|q| (0..3).all(|a| (p[a] - q[a]).abs() < 1e-12)));
        }
        let distinct = {
            let mut v = f.xyz();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup();
            v.len()
        };
        assert_eq!(distinct, inside);
    }

    #[test]
    fn empty_frustum_errors() {
        let s = generate_scene(&small_config(), 2).unwrap();
        let sky = Box2D::new(0.0, 0.0, 5.0, 5.0);
        assert!(matches!(
            extract_frustum(&s, &sky, 0, 64, 0, None, 0.9, 0),
            Err(Error::EmptyFrustum)
        ));
    }

    #[test]
    fn mask_roundtrip() {
        let mask: Vec<bool> = (0..13).map(|i| i % 3 == 0).collect();
        assert_eq!(decode_mask(&encode_mask(&mask), 13).unwrap(), mask);
        assert_eq!(encode_mask(&[]), "");
        assert!(decode_mask(&encode_mask(&mask), 40).is_err());
    }

    #[test]
    fn seeds_are_spread() {
        let a: Vec<u64> = (0..100).map(|i| derive_seed(0, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_ne!(derive_seed(0, 1), derive_seed(1, 0));
    }
}
