use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{gaussian_unit, synth_keypoint_matches, synth_visual_features, view_angle_deg};
use super::{
    classify_stats, distance, BBox, Camera, Difficulty, ObjectDetection, SceneObject, ScenePair,
};
use crate::error::{Error, Result};

/// Width the pixel box-size threshold refers to.
const REFERENCE_WIDTH: f64 = 1024.0;
const NEAR_PLANE: f64 = 0.1;
const PLACEMENT_TRIES: usize = 200;
const CAMERA_TRIES_PER_SCENE: usize = 25;

/// Feature noise scale `ε` per difficulty bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNoise {
    pub easy: f64,
    pub hard: f64,
    pub very_hard: f64,
}

impl FeatureNoise {
    pub const ZERO: FeatureNoise = FeatureNoise {
        easy: 0.0,
        hard: 0.0,
        very_hard: 0.0,
    };

    pub fn for_bin(&self, bin: Difficulty) -> f64 {
        match bin {
            Difficulty::Easy => self.easy,
            Difficulty::Hard => self.hard,
            Difficulty::VeryHard => self.very_hard,
        }
    }
}

impl Default for FeatureNoise {
    fn default() -> Self {
        FeatureNoise {
            easy: 0.3,
            hard: 0.5,
            very_hard: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Inclusive range of objects per scene.
    pub objects: [usize; 2],
    pub num_classes: usize,
    pub d_viz: usize,
    /// Room spans `[-x, x] x [-y, y] x [0, height]` meters.
    pub room_half: [f64; 2],
    pub room_height: f64,
    pub min_separation: f64,
    pub half_extent: [f64; 2],
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    /// Pixels at 1024 px image width; scaled with the configured width.
    pub min_box_side_px: f64,
    /// Fraction of a box covered by a nearer box that hides it.
    pub occlusion_overlap: f64,
    pub camera_height: [f64; 2],
    /// Horizontal distance of cameras from the room center.
    pub camera_radius: [f64; 2],
    pub feature_noise: FeatureNoise,
    /// Weight of the class embedding in synthetic features.
    pub class_scale: f64,
    pub keypoint_density: f64,
    pub keypoint_outlier_rate: f64,
    /// Seed of the class embeddings shared by every scene.
    pub class_seed: u64,
    pub max_attempts: usize,
    /// Required bin; `None` in a corpus cycles through all bins.
    pub target: Option<Difficulty>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            objects: [6, 14],
            num_classes: 10,
            d_viz: 512,
            room_half: [5.0, 5.0],
            room_height: 3.0,
            min_separation: 0.8,
            half_extent: [0.15, 0.6],
            image_width: 1024,
            image_height: 768,
            focal: 500.0,
            min_box_side_px: 25.0,
            occlusion_overlap: 0.7,
            camera_height: [1.2, 1.8],
            camera_radius: [1.0, 4.5],
            feature_noise: FeatureNoise::default(),
            class_scale: 0.5,
            keypoint_density: 5.0,
            keypoint_outlier_rate: 0.05,
            class_seed: 0x5eed_c1a5,
            max_attempts: 400,
            target: None,
        }
    }
}

impl SceneConfig {
    /// Default scenes with 32-dimensional features.
    pub fn desk() -> Self {
        SceneConfig {
            d_viz: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects[0] < 3 || self.objects[0] > self.objects[1] {
            return Err(Error::invalid(
                "scene object count range must start at 3 or more",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.d_viz == 0 {
            return Err(Error::invalid("d_viz must be positive"));
        }
        let positive = [
            self.room_half[0],
            self.room_half[1],
            self.room_height,
            self.half_extent[0],
            self.focal,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.half_extent[0] > self.half_extent[1] {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(self.keypoint_density >= 0.0) || !(self.keypoint_outlier_rate >= 0.0) {
            return Err(Error::invalid(
                "keypoint density and outlier rate must be >= 0",
            ));
        }
        if self.camera_radius[0] > self.camera_radius[1]
            || self.camera_height[0] > self.camera_height[1]
        {
            return Err(Error::invalid("camera ranges must be ordered"));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("max_attempts must be positive"));
        }
        Ok(())
    }

    pub(crate) fn min_box_side(&self) -> f64 {
        self.min_box_side_px * self.image_width as f64 / REFERENCE_WIDTH
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub half_size: [f64; 2],
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room: Room,
    pub objects: Vec<SceneObject>,
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Places objects uniformly in the room with pairwise center distance above
/// `min_separation`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for id in 0..count {
        let half_extent = [
            uniform(&mut rng, cfg.half_extent),
            uniform(&mut rng, cfg.half_extent),
            uniform(&mut rng, cfg.half_extent),
        ];
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let mx = (cfg.room_half[0] - half_extent[0]).max(0.0);
            let my = (cfg.room_half[1] - half_extent[1]).max(0.0);
            let x = uniform(&mut rng, [-mx, mx]);
            let y = uniform(&mut rng, [-my, my]);
            let lift = if rng.random_bool(0.3) {
                uniform(&mut rng, [0.3, 1.2])
            } else {
                0.0
            };
            let z =
                (half_extent[2] + lift).min((cfg.room_height - half_extent[2]).max(half_extent[2]));
            let p = [x, y, z];
            if objects
                .iter()
                .all(|o| distance(o.position, p) > cfg.min_separation)
            {
                placed = Some(p);
                break;
            }
        }
        let Some(position) = placed else {
            return Err(Error::Generation(format!(
                "could not place object {id} of {count} with separation {} m",
                cfg.min_separation
            )));
        };
        let class = rng.random_range(0..cfg.num_classes);
        let latent = gaussian_unit(&mut rng, cfg.d_viz);
        objects.push(SceneObject {
            instance_id: id as u32,
            class,
            position,
            half_extent,
            latent,
        });
    }
    Ok(Scene {
        room: Room {
            half_size: cfg.room_half,
            height: cfg.room_height,
        },
        objects,
    })
}

/// Azimuth offset of the second camera, degrees, biased toward `target`.
fn azimuth_range(target: Option<Difficulty>) -> [f64; 2] {
    match target {
        None => [0.0, 180.0],
        Some(Difficulty::Easy) => [0.0, 40.0],
        Some(Difficulty::Hard) => [35.0, 100.0],
        Some(Difficulty::VeryHard) => [95.0, 180.0],
    }
}

/// Two cameras on a ring around the room center looking inward.
pub fn sample_camera_pair<R: Rng>(
    cfg: &SceneConfig,
    target: Option<Difficulty>,
    rng: &mut R,
) -> Result<(Camera, Camera)> {
    let look = [
        uniform(rng, [-1.5, 1.5]),
        uniform(rng, [-1.5, 1.5]),
        uniform(rng, [0.3, 1.0]),
    ];
    let phi1 = uniform(rng, [0.0, 2.0 * PI]);
    let delta = uniform(rng, azimuth_range(target)).to_radians();
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let phi2 = phi1 + sign * delta;
    let mut cams = Vec::with_capacity(2);
    for (k, phi) in [phi1, phi2].into_iter().enumerate() {
        let r = uniform(rng, cfg.camera_radius);
        let h = uniform(rng, cfg.camera_height);
        let (sin, cos) = num_traits::Float::sin_cos(phi);
        let eye = [r * cos, r * sin, h];
        let mut at = look;
        if k == 1 {
            at[0] += uniform(rng, [-0.5, 0.5]);
            at[1] += uniform(rng, [-0.5, 0.5]);
        }
        cams.push(Camera::look_at(
            eye,
            at,
            cfg.focal,
            cfg.image_width,
            cfg.image_height,
        )?);
    }
    let c2 = cams.pop().expect("two cameras");
    let c1 = cams.pop().expect("two cameras");
    Ok((c1, c2))
}

/// Visible detections of one camera, before index shuffling, keyed by the
/// object index in the scene.
fn visible_objects(scene: &Scene, cam: &Camera, cfg: &SceneConfig) -> Vec<(usize, BBox, f64)> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let min_side = cfg.min_box_side();
    let mut candidates = Vec::new();
    for (idx, obj) in scene.objects.iter().enumerate() {
        let corners = obj.corners().map(|c| cam.to_camera(c));
        if corners.iter().any(|c| c[2] <= NEAR_PLANE) {
            continue;
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in corners {
            let px = cam.project_camera(c).expect("in front of camera");
            for a in 0..2 {
                lo[a] = lo[a].min(px[a]);
                hi[a] = hi[a].max(px[a]);
            }
        }
        let (x0, x1) = (lo[0].max(0.0), hi[0].min(w));
        let (y0, y1) = (lo[1].max(0.0), hi[1].min(h));
        if x1 - x0 < min_side || y1 - y0 < min_side {
            continue;
        }
        let bbox = BBox::new(x0 / w, y0 / h, x1 / w, y1 / h);
        let depth = cam.to_camera(obj.position)[2];
        candidates.push((idx, bbox, depth));
    }
    candidates.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    let mut visible = Vec::new();
    for (k, &(idx, bbox, depth)) in candidates.iter().enumerate() {
        let hidden = candidates[..k]
            .iter()
            .any(|(_, nearer, _)| bbox.intersection(nearer) > cfg.occlusion_overlap * bbox.area());
        if !hidden {
            visible.push((idx, bbox, depth));
        }
    }
    visible
}

fn detection(
    scene: &Scene,
    cam: &Camera,
    image: u8,
    index: usize,
    obj_idx: usize,
    bbox: BBox,
) -> ObjectDetection {
    let obj = &scene.objects[obj_idx];
    let pc = cam.to_camera(obj.position);
    let px = cam.project_camera(pc).expect("center in front of camera");
    let c = bbox.center();
    ObjectDetection {
        image,
        index,
        bbox,
        class: obj.class,
        instance_id: obj.instance_id,
        offset: [
            px[0] / cam.width as f64 - c[0],
            px[1] / cam.height as f64 - c[1],
        ],
        distance: super::norm(pc),
    }
}

fn rel_distances(scene: &Scene, objs: &[usize]) -> Vec<Vec<f64>> {
    let n = objs.len();
    let mut out = alloc::vec![alloc::vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(
                scene.objects[objs[i]].position,
                scene.objects[objs[j]].position,
            );
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    out
}

fn find_instance(scene: &Scene, id: u32) -> &SceneObject {
    scene
        .objects
        .iter()
        .find(|o| o.instance_id == id)
        .expect("detection refers to a scene object")
}

/// Mean `|d_1 - d_2|` and mean ray angle over ground-truth matches.
fn difficulty_stats(scene: &Scene, pair: &ScenePair) -> (f64, f64) {
    let n = pair.gt_matches.len() as f64;
    let (mut d, mut a) = (0.0, 0.0);
    for &(i, j) in &pair.gt_matches {
        let (d1, d2) = (&pair.detections1[i], &pair.detections2[j]);
        d += (d1.distance - d2.distance).abs();
        let obj = find_instance(scene, d1.instance_id);
        a += view_angle_deg(obj.position, &pair.camera1, &pair.camera2);
    }
    (d / n, a / n)
}

/// Projects a scene into two views and fills in ground truth, synthetic
/// features and keypoints. Detection order in each image is shuffled.
pub fn project_pair(
    scene: &Scene,
    camera1: &Camera,
    camera2: &Camera,
    cfg: &SceneConfig,
    seed: u64,
) -> Result<ScenePair> {
    camera1.validate()?;
    camera2.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vis1 = visible_objects(scene, camera1, cfg);
    let mut vis2 = visible_objects(scene, camera2, cfg);
    vis1.shuffle(&mut rng);
    vis2.shuffle(&mut rng);
    let dets = |vis: &[(usize, BBox, f64)], cam: &Camera, image: u8| -> Vec<ObjectDetection> {
        vis.iter()
            .enumerate()
            .map(|(k, &(idx, bbox, _))| detection(scene, cam, image, k, idx, bbox))
            .collect()
    };
    let detections1 = dets(&vis1, camera1, 1);
    let detections2 = dets(&vis2, camera2, 2);
    let mut gt_matches = Vec::new();
    for (i, a) in vis1.iter().enumerate() {
        if let Some(j) = vis2.iter().position(|b| b.0 == a.0) {
            gt_matches.push((i, j));
        }
    }
    if gt_matches.len() < 2 {
        return Err(Error::Generation(format!(
            "only {} objects visible in both views",
            gt_matches.len()
        )));
    }
    let objs1: Vec<usize> = vis1.iter().map(|v| v.0).collect();
    let objs2: Vec<usize> = vis2.iter().map(|v| v.0).collect();
    let mut pair = ScenePair {
        pair_id: 0,
        camera1: camera1.clone(),
        camera2: camera2.clone(),
        detections1,
        detections2,
        gt_matches,
        rel_dist1: rel_distances(scene, &objs1),
        rel_dist2: rel_distances(scene, &objs2),
        features1: Vec::new(),
        features2: Vec::new(),
        keypoints: Vec::new(),
        d_bar: 0.0,
        alpha_bar: 0.0,
        difficulty: Difficulty::Easy,
    };
    let (d_bar, alpha_bar) = difficulty_stats(scene, &pair);
    pair.d_bar = d_bar;
    pair.alpha_bar = alpha_bar;
    pair.difficulty = classify_stats(d_bar, alpha_bar);
    let feature_seed = rng.next_u64();
    let keypoint_seed = rng.next_u64();
    let noise = cfg.feature_noise.for_bin(pair.difficulty);
    let (f1, f2) = synth_visual_features(
        scene,
        &pair,
        noise,
        cfg.class_scale,
        cfg.class_seed,
        feature_seed,
    );
    pair.features1 = f1;
    pair.features2 = f2;
    pair.keypoints = synth_keypoint_matches(
        scene,
        &pair,
        cfg.keypoint_density,
        cfg.keypoint_outlier_rate,
        keypoint_seed,
    );
    Ok(pair)
}

/// One pair in the configured target bin (or any bin when `target` is `None`).
pub fn generate_pair(cfg: &SceneConfig, seed: u64) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = generate_scene(cfg, rng.next_u64())?;
    let mut last = None;
    for attempt in 0..cfg.max_attempts {
        if attempt > 0 && attempt % CAMERA_TRIES_PER_SCENE == 0 {
            scene = generate_scene(cfg, rng.next_u64())?;
        }
        let (c1, c2) = sample_camera_pair(cfg, cfg.target, &mut rng)?;
        let pair_seed = rng.next_u64();
        match project_pair(&scene, &c1, &c2, cfg, pair_seed) {
            Ok(pair) if cfg.target.is_none_or(|t| t == pair.difficulty) => return Ok(pair),
            Ok(pair) => last = Some(format!("landed in bin {}", pair.difficulty.name())),
            Err(e) => last = Some(format!("{e}")),
        }
    }
    Err(Error::Generation(format!(
        "no valid pair after {} attempts (last: {})",
        cfg.max_attempts,
        last.unwrap_or_default()
    )))
}

/// SplitMix64 finalizer; decorrelates per-pair seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `count` pairs with ids `0..count`. Without a fixed target the bins cycle
/// easy, hard, very hard.
pub fn generate_corpus(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<ScenePair>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut c = cfg.clone();
        if c.target.is_none() {
            c.target = Some(Difficulty::ALL[i % 3]);
        }
        let mut pair = generate_pair(&c, mix_seed(seed, i as u64))?;
        pair.pair_id = i as u64;
        out.push(pair);
    }
    Ok(out)
}
