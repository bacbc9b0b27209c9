//! Stand-ins for learned appearance features and keypoint matchers.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::generate::Scene;
use super::{angle_deg, sub, BBox, Camera, KeypointMatch, ScenePair, Vec3};

/// Standard Gaussian vector scaled to unit length.
pub(crate) fn gaussian_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = num_traits::Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// One unit vector per class, fixed by `class_seed`.
pub fn class_embeddings(num_classes: usize, d_viz: usize, class_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(class_seed);
    (0..num_classes)
        .map(|_| gaussian_unit(&mut rng, d_viz))
        .collect()
}

/// Angle at `p` between the rays to the two camera centers, degrees.
pub fn view_angle_deg(p: Vec3, camera1: &Camera, camera2: &Camera) -> f64 {
    let r1 = sub(camera1.center(), p);
    let r2 = sub(camera2.center(), p);
    angle_deg(r1, r2)
}

/// Perturbation scale at view angle `theta` degrees; strictly increasing.
fn view_scale(theta: f64) -> f64 {
    1.0 + theta / 90.0
}

/// `normalize(latent + class_scale * class + eps * s(theta) * g)` with an
/// independent Gaussian direction `g` (norm about 1) per detection.
pub fn synth_visual_features(
    scene: &Scene,
    pair: &ScenePair,
    eps: f64,
    class_scale: f64,
    class_seed: u64,
    seed: u64,
) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let d = scene.objects.first().map_or(0, |o| o.latent.len());
    let num_classes = scene.objects.iter().map(|o| o.class + 1).max().unwrap_or(0);
    let classes = class_embeddings(num_classes, d, class_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_sqrt_d = 1.0 / num_traits::Float::sqrt(d.max(1) as f64);
    let mut one = |instance: u32| -> Vec<f32> {
        let obj = scene
            .objects
            .iter()
            .find(|o| o.instance_id == instance)
            .expect("detection refers to a scene object");
        let theta = view_angle_deg(obj.position, &pair.camera1, &pair.camera2);
        let amp = eps * view_scale(theta) * inv_sqrt_d;
        let mut f: Vec<f64> = obj
            .latent
            .iter()
            .zip(&classes[obj.class])
            .map(|(l, c)| l + class_scale * c)
            .collect();
        for x in f.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *x += amp * g;
        }
        let n = num_traits::Float::sqrt(f.iter().map(|x| x * x).sum::<f64>());
        f.iter().map(|x| (x / n) as f32).collect()
    };
    let f1 = pair
        .detections1
        .iter()
        .map(|det| one(det.instance_id))
        .collect();
    let f2 = pair
        .detections2
        .iter()
        .map(|det| one(det.instance_id))
        .collect();
    (f1, f2)
}

fn point_in<R: Rng>(rng: &mut R, b: &BBox) -> [f64; 2] {
    [
        rng.random_range(b.x_min..=b.x_max),
        rng.random_range(b.y_min..=b.y_max),
    ]
}

fn poisson<R: Rng>(rng: &mut R, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map_or(0, |p| p.sample(rng) as usize)
}

/// For every ground-truth match, `Poisson(density * max(0, cos theta))`
/// correspondences inside the two boxes, plus `Poisson(outlier_rate * correct)`
/// pairs between random boxes.
pub fn synth_keypoint_matches(
    scene: &Scene,
    pair: &ScenePair,
    density: f64,
    outlier_rate: f64,
    seed: u64,
) -> Vec<KeypointMatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if density <= 0.0 {
        return out;
    }
    for &(i, j) in &pair.gt_matches {
        let (d1, d2) = (&pair.detections1[i], &pair.detections2[j]);
        let obj = scene
            .objects
            .iter()
            .find(|o| o.instance_id == d1.instance_id)
            .expect("detection refers to a scene object");
        let theta = view_angle_deg(obj.position, &pair.camera1, &pair.camera2);
        let visibility = num_traits::Float::cos(theta.to_radians()).max(0.0);
        for _ in 0..poisson(&mut rng, density * visibility) {
            out.push(KeypointMatch::new(
                point_in(&mut rng, &d1.bbox),
                point_in(&mut rng, &d2.bbox),
            ));
        }
    }
    let correct = out.len();
    if pair.m() > 0 && pair.n() > 0 {
        for _ in 0..poisson(&mut rng, outlier_rate * correct as f64) {
            let b1 = pair.detections1[rng.random_range(0..pair.m())].bbox;
            let b2 = pair.detections2[rng.random_range(0..pair.n())].bbox;
            out.push(KeypointMatch::new(
                point_in(&mut rng, &b1),
                point_in(&mut rng, &b2),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{
        generate_pair, generate_scene, project_pair, sample_camera_pair, SceneConfig,
    };
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig {
            d_viz: 32,
            keypoint_outlier_rate: 0.0,
            ..SceneConfig::default()
        }
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (*x as f64) * (*y as f64))
            .sum()
    }

    #[test]
    fn zero_noise_matched_features_are_identical() {
        let c = SceneConfig {
            feature_noise: super::super::FeatureNoise::ZERO,
            ..cfg()
        };
        for seed in 0..20 {
            let p = generate_pair(&c, seed).unwrap();
            for &(i, j) in &p.gt_matches {
                assert_eq!(p.features1[i], p.features2[j]);
            }
        }
    }

    #[test]
    fn feature_width_and_norm() {
        let p = generate_pair(&cfg(), 2).unwrap();
        for f in p.features1.iter().chain(&p.features2) {
            assert_eq!(f.len(), 32);
            assert!((cosine(f, f) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn matched_features_are_more_similar() {
        let c = cfg();
        let (mut matched, mut nm) = (0.0, 0usize);
        let (mut other, mut no) = (0.0, 0usize);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..1000 {
            let p = generate_pair(&c, seed).unwrap();
            for &(i, j) in &p.gt_matches {
                matched += cosine(&p.features1[i], &p.features2[j]);
                nm += 1;
            }
            let i = rng.random_range(0..p.m());
            let j = rng.random_range(0..p.n());
            if !p.gt_matches.contains(&(i, j)) {
                other += cosine(&p.features1[i], &p.features2[j]);
                no += 1;
            }
        }
        assert!(matched / nm as f64 > other / no as f64 + 0.3);
    }

    #[test]
    fn zero_density_gives_no_keypoints() {
        let c = SceneConfig {
            keypoint_density: 0.0,
            keypoint_outlier_rate: 0.5,
            ..cfg()
        };
        assert!(generate_pair(&c, 3).unwrap().keypoints.is_empty());
    }

    #[test]
    fn inlier_keypoints_lie_in_matched_boxes() {
        let c = cfg();
        for seed in 0..200 {
            let p = generate_pair(&c, seed).unwrap();
            for kp in &p.keypoints {
                assert!(p.gt_matches.iter().any(|&(i, j)| {
                    p.detections1[i].bbox.contains(kp.p1) && p.detections2[j].bbox.contains(kp.p2)
                }));
            }
        }
    }

    #[test]
    fn identical_cameras_give_density_per_object() {
        let c = cfg();
        let (mut kps, mut objects, mut pairs) = (0usize, 0usize, 0usize);
        let mut seed = 0u64;
        while pairs < 1000 {
            seed += 1;
            let scene = generate_scene(&c, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (cam, _) = sample_camera_pair(&c, None, &mut rng).unwrap();
            let Ok(p) = project_pair(&scene, &cam, &cam, &c, seed) else {
                continue;
            };
            kps += p.keypoints.len();
            objects += p.gt_matches.len();
            pairs += 1;
        }
        let mean = kps as f64 / objects as f64;
        assert!((mean - 5.0).abs() <= 1.0, "mean {mean}");
    }

    #[test]
    fn wider_baselines_give_fewer_keypoints() {
        let mut per_bin = [0.0; 3];
        for (k, bin) in super::super::Difficulty::ALL.into_iter().enumerate() {
            let c = SceneConfig {
                target: Some(bin),
                ..cfg()
            };
            let (mut kps, mut objs) = (0, 0);
            for seed in 0..100 {
                let p = generate_pair(&c, seed).unwrap();
                kps += p.keypoints.len();
                objs += p.gt_matches.len();
            }
            per_bin[k] = kps as f64 / objs as f64;
        }
        assert!(
            per_bin[0] > per_bin[1] && per_bin[1] > per_bin[2],
            "{per_bin:?}"
        );
    }
}
