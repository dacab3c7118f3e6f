//! The six corruption families at three severity levels.
//!
//! Parameterizations (fixed here, severity 1/2/3):
//!
//! * `beam_missing` — drop a seeded random 25% / 50% / 75% of beam ids.
//! * `motion_blur`  — Gaussian x/y jitter, sigma 0.10 / 0.25 / 0.50 m.
//! * `fog`          — delete at range r with prob 1 - exp(-k r), k = 0.02 /
//!   0.05 / 0.10 per meter, hard cutoff 80 / 50 / 30 m, plus backscatter in a
//!   10 m disc at 1% / 3% / 5% of the original count.
//! * `emi`          — replace 2% / 5% / 10% of points with uniform clutter.
//! * `water`        — remove ground points (|z| < 0.2) with prob 0.3 / 0.5 /
//!   0.7 and mirror 1% / 2% / 4% of survivors below ground.
//! * `echo`         — duplicate 3% / 6% / 10% of points 1-3 m further along
//!   the sensor ray at half intensity.
//!
//! `corrupt` is a pure function of `(cloud, kind, severity, seed)`. Severity
//! 0 is an identity hook for tests.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{beam_for_point, LidarPoint, PointCloud};
use crate::rng::SeedTree;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    BeamMissing,
    MotionBlur,
    Fog,
    Emi,
    Water,
    Echo,
}

pub const ALL_CORRUPTIONS: [CorruptionKind; 6] = [
    CorruptionKind::BeamMissing,
    CorruptionKind::MotionBlur,
    CorruptionKind::Fog,
    CorruptionKind::Emi,
    CorruptionKind::Water,
    CorruptionKind::Echo,
];

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::BeamMissing => "beam_missing",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Emi => "emi",
            CorruptionKind::Water => "water",
            CorruptionKind::Echo => "echo",
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam_missing" => Ok(CorruptionKind::BeamMissing),
            "motion_blur" => Ok(CorruptionKind::MotionBlur),
            "fog" => Ok(CorruptionKind::Fog),
            "emi" => Ok(CorruptionKind::Emi),
            "water" => Ok(CorruptionKind::Water),
            "echo" => Ok(CorruptionKind::Echo),
            other => Err(Error::invalid("corruption", format!("unknown kind '{}'", other))),
        }
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Applies `kind` at `severity` in {1,2,3}; severity 0 returns the cloud
/// unchanged. Severities above 3 are rejected.
pub fn corrupt(cloud: &PointCloud, kind: CorruptionKind, severity: u8, seed: u64) -> Result<PointCloud> {
    if severity == 0 {
        return Ok(cloud.clone());
    }
    if severity > 3 {
        return Err(Error::invalid("corrupt", format!("severity {} out of 0..=3", severity)));
    }
    let s = (severity - 1) as usize;
    let mut rng = SeedTree::new(seed).stream("corruption", &[kind as u64, severity as u64]);
    let out = match kind {
        CorruptionKind::BeamMissing => {
            let frac = [0.25, 0.50, 0.75][s];
            let n_drop = (frac * cloud.n_beams as f64).round() as usize;
            let mut ids: Vec<u32> = (0..cloud.n_beams as u32).collect();
            ids.shuffle(&mut rng);
            let dropped: std::collections::HashSet<u32> = ids.into_iter().take(n_drop).collect();
            let points = cloud.points.iter().filter(|p| !dropped.contains(&p.beam)).copied().collect();
            PointCloud { points, n_beams: cloud.n_beams }
        }
        CorruptionKind::MotionBlur => {
            let sigma = [0.10, 0.25, 0.50][s];
            let points = cloud
                .points
                .iter()
                .map(|p| {
                    let dx = sigma * crate::rng::draw_standard_normal(&mut rng);
                    let dy = sigma * crate::rng::draw_standard_normal(&mut rng);
                    LidarPoint { x: p.x + dx, y: p.y + dy, ..*p }
                })
                .collect();
            PointCloud { points, n_beams: cloud.n_beams }
        }
        CorruptionKind::Fog => {
            let k = [0.02, 0.05, 0.10][s];
            let cutoff = [80.0, 50.0, 30.0][s];
            let back_frac = [0.01, 0.03, 0.05][s];
            let mut points: Vec<LidarPoint> = Vec::with_capacity(cloud.len());
            for p in &cloud.points {
                let r = (p.x * p.x + p.y * p.y).sqrt();
                if r > cutoff {
                    continue;
                }
                let p_del = 1.0 - (-k * r).exp();
                if rng.gen::<f64>() < p_del {
                    continue;
                }
                points.push(*p);
            }
            let n_back = (back_frac * cloud.len() as f64).round() as usize;
            for _ in 0..n_back {
                let r = 10.0 * rng.gen::<f64>().sqrt();
                let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let (x, y) = (r * theta.cos(), r * theta.sin());
                let z = rng.gen_range(0.0..2.0);
                let intensity = rng.gen_range(0.0..0.3);
                let beam = beam_for_point(x, y, z, cloud.n_beams);
                points.push(LidarPoint { x, y, z, intensity, beam });
            }
            PointCloud { points, n_beams: cloud.n_beams }
        }
        CorruptionKind::Emi => {
            let frac = [0.02, 0.05, 0.10][s];
            let n_rep = (frac * cloud.len() as f64).round() as usize;
            let radius = cloud
                .points
                .iter()
                .map(|p| (p.x * p.x + p.y * p.y).sqrt())
                .fold(0.0f64, f64::max)
                .max(10.0);
            let mut idx: Vec<usize> = (0..cloud.len()).collect();
            idx.shuffle(&mut rng);
            let chosen: std::collections::HashSet<usize> = idx.into_iter().take(n_rep).collect();
            let points = cloud
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if chosen.contains(&i) {
                        let r = radius * rng.gen::<f64>().sqrt();
                        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                        let (x, y) = (r * theta.cos(), r * theta.sin());
                        let z = rng.gen_range(0.0..3.0);
                        let intensity = rng.gen::<f64>();
                        let beam = beam_for_point(x, y, z, cloud.n_beams);
                        LidarPoint { x, y, z, intensity, beam }
                    } else {
                        *p
                    }
                })
                .collect();
            PointCloud { points, n_beams: cloud.n_beams }
        }
        CorruptionKind::Water => {
            let p_remove = [0.3, 0.5, 0.7][s];
            let ghost_frac = [0.01, 0.02, 0.04][s];
            let mut points: Vec<LidarPoint> = Vec::with_capacity(cloud.len());
            for p in &cloud.points {
                if p.z.abs() < 0.2 && rng.gen::<f64>() < p_remove {
                    continue;
                }
                points.push(*p);
            }
            let eligible: Vec<usize> =
                points.iter().enumerate().filter(|(_, p)| p.z > 0.2).map(|(i, _)| i).collect();
            let n_ghost = ((ghost_frac * points.len() as f64).round() as usize).min(eligible.len());
            let mut order = eligible;
            order.shuffle(&mut rng);
            for &i in order.iter().take(n_ghost) {
                let src = points[i];
                let beam = beam_for_point(src.x, src.y, -src.z, cloud.n_beams);
                points.push(LidarPoint {
                    z: -src.z,
                    intensity: src.intensity * 0.5,
                    beam,
                    ..src
                });
            }
            PointCloud { points, n_beams: cloud.n_beams }
        }
        CorruptionKind::Echo => {
            let frac = [0.03, 0.06, 0.10][s];
            let n_dup = (frac * cloud.len() as f64).round() as usize;
            let mut idx: Vec<usize> = (0..cloud.len()).collect();
            idx.shuffle(&mut rng);
            let mut points = cloud.points.clone();
            for &i in idx.iter().take(n_dup) {
                let src = cloud.points[i];
                let r = (src.x * src.x + src.y * src.y).sqrt();
                if r < 1e-6 {
                    continue;
                }
                let d = rng.gen_range(1.0..3.0);
                let scale = (r + d) / r;
                points.push(LidarPoint {
                    x: src.x * scale,
                    y: src.y * scale,
                    intensity: src.intensity * 0.5,
                    ..src
                });
            }
            PointCloud { points, n_beams: cloud.n_beams }
        }
    };
    debug_assert!(out.is_valid());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneParams};
    use super::*;

    fn test_cloud() -> PointCloud {
        generate_scene(&SceneParams::default(), 5).agents[0].cloud.clone()
    }

    #[test]
    fn severity_zero_is_identity_for_every_kind() {
        let cloud = test_cloud();
        for kind in ALL_CORRUPTIONS {
            let out = corrupt(&cloud, kind, 0, 99).unwrap();
            assert_eq!(out, cloud);
        }
    }

    #[test]
    fn severity_out_of_range_is_rejected() {
        let cloud = test_cloud();
        assert!(corrupt(&cloud, CorruptionKind::Fog, 4, 0).is_err());
    }

    #[test]
    fn unknown_kind_string_is_rejected() {
        assert!("sunshine".parse::<CorruptionKind>().is_err());
        assert_eq!("fog".parse::<CorruptionKind>().unwrap(), CorruptionKind::Fog);
    }

    #[test]
    fn beam_missing_severity_two_removes_exactly_half_the_beams() {
        let cloud = test_cloud();
        assert_eq!(cloud.n_beams, 16);
        // Count-by-beam oracle: every beam id must either keep all its points
        // or lose all of them, and exactly 8 ids must be gone.
        let count_by_beam = |c: &PointCloud| {
            let mut counts = vec![0usize; c.n_beams];
            for p in &c.points {
                counts[p.beam as usize] += 1;
            }
            counts
        };
        let before = count_by_beam(&cloud);
        let out = corrupt(&cloud, CorruptionKind::BeamMissing, 2, 11).unwrap();
        let after = count_by_beam(&out);
        let mut removed = 0;
        for b in 0..16 {
            if after[b] == 0 && before[b] > 0 {
                removed += 1;
            } else {
                assert_eq!(after[b], before[b], "beam {} partially removed", b);
            }
        }
        // All 16 beams are populated in this cloud, so exactly 8 must vanish.
        assert!(before.iter().all(|&c| c > 0), "oracle premise: all beams populated");
        assert_eq!(removed, 8);
    }

    #[test]
    fn fog_severity_three_enforces_the_30m_cutoff() {
        let cloud = test_cloud();
        let had_far = cloud.points.iter().any(|p| (p.x * p.x + p.y * p.y).sqrt() > 30.0);
        assert!(had_far, "oracle premise: cloud reaches past 30 m");
        let out = corrupt(&cloud, CorruptionKind::Fog, 3, 4).unwrap();
        for p in &out.points {
            assert!((p.x * p.x + p.y * p.y).sqrt() <= 30.0 + 1e-9);
        }
        assert!(out.len() < cloud.len(), "fog must strictly shrink the cloud");
    }

    #[test]
    fn corruption_is_deterministic_in_seed() {
        let cloud = test_cloud();
        for kind in ALL_CORRUPTIONS {
            let a = corrupt(&cloud, kind, 2, 77).unwrap();
            let b = corrupt(&cloud, kind, 2, 77).unwrap();
            assert_eq!(a, b, "{:?} not deterministic", kind);
        }
    }

    #[test]
    fn corrupted_clouds_stay_finite_and_valid() {
        let cloud = test_cloud();
        for kind in ALL_CORRUPTIONS {
            for severity in 1..=3u8 {
                let out = corrupt(&cloud, kind, severity, 3).unwrap();
                assert!(out.is_valid(), "{:?}@{} produced invalid cloud", kind, severity);
            }
        }
    }

    #[test]
    fn survival_fraction_is_monotone_in_severity() {
        // Survival = output points that are bitwise equal to an input point;
        // averaged over 50 seeds it must not increase with severity.
        let cloud = test_cloud();
        let originals: std::collections::HashSet<[u64; 3]> = cloud
            .points
            .iter()
            .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
            .collect();
        for kind in ALL_CORRUPTIONS {
            let mut mean_survival = [0.0f64; 3];
            for (si, severity) in (1..=3u8).enumerate() {
                let mut total = 0.0;
                for seed in 0..50u64 {
                    let out = corrupt(&cloud, kind, severity, seed).unwrap();
                    let surv = out
                        .points
                        .iter()
                        .filter(|p| originals.contains(&[p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]))
                        .count();
                    total += surv as f64 / cloud.len() as f64;
                }
                mean_survival[si] = total / 50.0;
            }
            assert!(
                mean_survival[0] >= mean_survival[1] - 1e-9
                    && mean_survival[1] >= mean_survival[2] - 1e-9,
                "{:?} survival {:?} not non-increasing",
                kind,
                mean_survival
            );
        }
    }
}
