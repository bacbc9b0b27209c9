//! Synthetic indoor scenes observed by two pinhole cameras.
//!
//! Randomness comes from `ChaCha8Rng` seeded with a 64-bit seed; a given
//! `(config, seed)` always produces the same pair within this crate.

mod generate;
mod synth;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{
    generate_corpus, generate_pair, generate_scene, mix_seed, project_pair, sample_camera_pair,
    FeatureNoise, Room, Scene, SceneConfig,
};
pub use synth::{class_embeddings, synth_keypoint_matches, synth_visual_features, view_angle_deg};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    num_traits::Float::sqrt(dot(a, a))
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub(crate) fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Angle between two vectors in degrees.
pub(crate) fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    let c = (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0);
    num_traits::Float::acos(c).to_degrees()
}

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Coordinates in `[0, 1]` with positive width and height.
    pub fn validate(&self) -> Result<()> {
        let inside = self.to_array().iter().all(|v| (0.0..=1.0).contains(v));
        if !inside || !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(Error::invalid(alloc::format!(
                "invalid box {:?}",
                self.to_array()
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// A pair of corresponding points, one per image, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointMatch {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
}

impl KeypointMatch {
    pub const fn new(p1: [f64; 2], p2: [f64; 2]) -> Self {
        KeypointMatch { p1, p2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub instance_id: u32,
    pub class: usize,
    /// Box center, meters.
    pub position: Vec3,
    pub half_extent: Vec3,
    /// Unit-length appearance identity.
    pub latent: Vec<f64>,
}

impl SceneObject {
    pub fn corners(&self) -> [Vec3; 8] {
        let (c, h) = (self.position, self.half_extent);
        let mut out = [[0.0; 3]; 8];
        for (k, o) in out.iter_mut().enumerate() {
            let sx = if k & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if k & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if k & 4 == 0 { -1.0 } else { 1.0 };
            *o = [c[0] + sx * h[0], c[1] + sy * h[1], c[2] + sz * h[2]];
        }
        out
    }
}

/// Pinhole camera with world-to-camera pose `p_cam = R p_world + t`.
/// Camera axes: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    /// Pixels.
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Camera at `eye` looking at `target` with world `+z` up.
    pub fn look_at(eye: Vec3, target: Vec3, focal: f64, width: u32, height: u32) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let right = cross(forward, [0.0, 0.0, 1.0]);
        if norm(right) < 1e-9 {
            return Err(Error::invalid("camera looks straight up or down"));
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = [
            -dot(rotation[0], eye),
            -dot(rotation[1], eye),
            -dot(rotation[2], eye),
        ];
        let cam = Camera {
            rotation,
            translation,
            focal,
            principal: [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Orthonormal rotation with determinant +1, positive focal length.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot(r[i], r[j]) - target).abs() > 1e-9 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if (dot(cross(r[0], r[1]), r[2]) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("camera rotation has determinant -1"));
        }
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera intrinsics must be positive"));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            dot(r[0], p) + self.translation[0],
            dot(r[1], p) + self.translation[1],
            dot(r[2], p) + self.translation[2],
        ]
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        let (r, t) = (&self.rotation, self.translation);
        let mut c = [0.0; 3];
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = -(r[0][k] * t[0] + r[1][k] * t[1] + r[2][k] * t[2]);
        }
        c
    }

    /// Pixel coordinates of a camera-frame point in front of the camera.
    pub fn project_camera(&self, pc: Vec3) -> Option<[f64; 2]> {
        if pc[2] <= 1e-9 {
            return None;
        }
        Some([
            self.focal * pc[0] / pc[2] + self.principal[0],
            self.focal * pc[1] / pc[2] + self.principal[1],
        ])
    }

    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        self.project_camera(self.to_camera(p))
    }

    /// Camera-frame point at distance `d` along the ray through pixel `px`.
    pub fn back_project(&self, px: [f64; 2], d: f64) -> Vec3 {
        let ray = normalize([
            (px[0] - self.principal[0]) / self.focal,
            (px[1] - self.principal[1]) / self.focal,
            1.0,
        ]);
        [ray[0] * d, ray[1] * d, ray[2] * d]
    }

    /// Camera-frame 3D position from a normalized box, predicted offset and
    /// distance.
    pub fn recover_position(&self, bbox: &BBox, offset: [f64; 2], d: f64) -> Vec3 {
        let c = bbox.center();
        let px = [
            (c[0] + offset[0]) * self.width as f64,
            (c[1] + offset[1]) * self.height as f64,
        ];
        self.back_project(px, d)
    }
}

/// One detected object in one image of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDetection {
    /// 1 or 2.
    pub image: u8,
    pub index: usize,
    pub bbox: BBox,
    pub class: usize,
    pub instance_id: u32,
    /// Projection of the 3D center minus box center, normalized units.
    pub offset: [f64; 2],
    /// Camera-to-center distance, meters.
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
    VeryHard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Hard, Difficulty::VeryHard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
            Difficulty::VeryHard => "very_hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

/// Bin from the mean distance difference (meters) and mean ray angle (degrees).
pub fn classify_stats(d_bar: f64, alpha_bar: f64) -> Difficulty {
    if d_bar <= 4.0 && alpha_bar <= 45.0 {
        Difficulty::Easy
    } else if d_bar <= 8.0 && alpha_bar <= 90.0 {
        Difficulty::Hard
    } else {
        Difficulty::VeryHard
    }
}

/// Two views of one scene with ground truth and synthetic inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub pair_id: u64,
    pub camera1: Camera,
    pub camera2: Camera,
    pub detections1: Vec<ObjectDetection>,
    pub detections2: Vec<ObjectDetection>,
    pub gt_matches: Vec<(usize, usize)>,
    /// Pairwise 3D center distances among image-1 detections, meters.
    pub rel_dist1: Vec<Vec<f64>>,
    pub rel_dist2: Vec<Vec<f64>>,
    pub features1: Vec<Vec<f32>>,
    pub features2: Vec<Vec<f32>>,
    pub keypoints: Vec<KeypointMatch>,
    pub d_bar: f64,
    pub alpha_bar: f64,
    pub difficulty: Difficulty,
}

impl ScenePair {
    pub fn m(&self) -> usize {
        self.detections1.len()
    }

    pub fn n(&self) -> usize {
        self.detections2.len()
    }

    pub fn boxes1(&self) -> Vec<BBox> {
        self.detections1.iter().map(|d| d.bbox).collect()
    }

    pub fn boxes2(&self) -> Vec<BBox> {
        self.detections2.iter().map(|d| d.bbox).collect()
    }

    pub fn unmatched1(&self) -> Vec<usize> {
        (0..self.m())
            .filter(|i| !self.gt_matches.iter().any(|m| m.0 == *i))
            .collect()
    }

    pub fn unmatched2(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|j| !self.gt_matches.iter().any(|m| m.1 == *j))
            .collect()
    }

    /// Structural invariants of a pair.
    pub fn validate(&self) -> Result<()> {
        if self.m() < 2 || self.n() < 2 {
            return Err(Error::invalid(
                "a pair needs at least two objects per image",
            ));
        }
        crate::matcher::check_one_to_one(&self.gt_matches)?;
        for &(i, j) in &self.gt_matches {
            if i >= self.m() || j >= self.n() {
                return Err(Error::invalid("ground-truth match out of range"));
            }
        }
        for d in self.detections1.iter().chain(&self.detections2) {
            d.bbox.validate()?;
            if !(d.distance > 0.0) {
                return Err(Error::invalid("non-positive object distance"));
            }
        }
        for (rel, n) in [(&self.rel_dist1, self.m()), (&self.rel_dist2, self.n())] {
            if rel.len() != n || rel.iter().any(|r| r.len() != n) {
                return Err(Error::invalid("relative distance matrix has wrong shape"));
            }
            for (i, row) in rel.iter().enumerate() {
                for (j, &r) in row.iter().enumerate() {
                    if r != rel[j][i] || r < 0.0 {
                        return Err(Error::invalid(
                            "relative distances must be symmetric and >= 0",
                        ));
                    }
                }
            }
        }
        for f in [&self.features1, &self.features2] {
            if let Some(first) = f.first() {
                if f.iter().any(|v| v.len() != first.len()) {
                    return Err(Error::invalid("ragged visual features"));
                }
            }
        }
        if self.features1.len() != self.m() || self.features2.len() != self.n() {
            return Err(Error::invalid(
                "one visual feature vector per detection required",
            ));
        }
        for kp in &self.keypoints {
            let inside = |p: [f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
            if !inside(kp.p1) || !inside(kp.p2) {
                return Err(Error::invalid("keypoint outside the image"));
            }
        }
        Ok(())
    }
}

/// Difficulty bin of a pair from its stored statistics.
pub fn classify_difficulty(pair: &ScenePair) -> Difficulty {
    classify_stats(pair.d_bar, pair.alpha_bar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_follow_thresholds() {
        assert_eq!(classify_stats(3.0, 30.0), Difficulty::Easy);
        assert_eq!(classify_stats(5.0, 50.0), Difficulty::Hard);
        assert_eq!(classify_stats(9.0, 10.0), Difficulty::VeryHard);
        assert_eq!(classify_stats(4.0, 45.0), Difficulty::Easy);
        assert_eq!(classify_stats(3.0, 46.0), Difficulty::Hard);
        assert_eq!(classify_stats(8.0, 90.0), Difficulty::Hard);
        assert_eq!(classify_stats(1.0, 91.0), Difficulty::VeryHard);
    }

    #[test]
    fn bins_partition_a_grid() {
        for di in 0..60 {
            for ai in 0..60 {
                let (d, a) = (di as f64 * 0.25, ai as f64 * 3.0);
                let hits = [
                    d <= 4.0 && a <= 45.0,
                    !(d <= 4.0 && a <= 45.0) && d <= 8.0 && a <= 90.0,
                    d > 8.0 || a > 90.0,
                ];
                assert_eq!(hits.iter().filter(|&&h| h).count(), 1);
                let expect = Difficulty::ALL[hits.iter().position(|&h| h).unwrap()];
                assert_eq!(classify_stats(d, a), expect);
            }
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = Camera::look_at([0.0, 0.0, 1.0], [5.0, 0.0, 1.0], 500.0, 1024, 768).unwrap();
        let px = cam.project([3.0, 0.0, 1.0]).unwrap();
        assert!((px[0] - 512.0).abs() < 1e-9 && (px[1] - 384.0).abs() < 1e-9);
        let c = cam.center();
        assert!(distance(c, [0.0, 0.0, 1.0]) < 1e-12);
        let back = cam.back_project(px, 3.0);
        assert!(distance(back, [0.0, 0.0, 3.0]) < 1e-12);
    }

    #[test]
    fn camera_validation() {
        let mut cam = Camera::look_at([1.0, 2.0, 1.5], [0.0, 0.0, 0.5], 500.0, 640, 480).unwrap();
        assert!(cam.validate().is_ok());
        cam.rotation[0] = [
            -cam.rotation[0][0],
            -cam.rotation[0][1],
            -cam.rotation[0][2],
        ];
        assert!(cam.validate().is_err());
        assert!(Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 500.0, 640, 480).is_err());
    }

    #[test]
    fn box_geometry() {
        let a = BBox::new(0.0, 0.0, 0.5, 0.5);
        let b = BBox::new(0.25, 0.0, 0.75, 0.5);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert!(a.contains([0.5, 0.5]));
        assert!(!a.contains([0.5, 0.5000001]));
        assert_eq!(a.iou(&a), 1.0);
        assert!(BBox::new(0.2, 0.2, 0.2, 0.3).validate().is_err());
    }
}
