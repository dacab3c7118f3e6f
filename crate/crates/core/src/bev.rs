//! Pillar voxelization into BEV feature maps and the 16x channel compression
//! applied to transmitted features.
//!
//! Points are binned into vertical pillars by floor division on the grid,
//! each pillar keeps at most `max_points_per_pillar` points (nearest first),
//! and a shared per-point MLP followed by max-pooling summarizes each pillar
//! into a feature vector scattered onto the `H x W x C` map.

use crate::numerics::{lit, Scalar, Tape, TensorData, TensorId};
use crate::scene::{PointCloud, Pose};
use crate::{Error, Result};

/// BEV grid geometry plus channel width.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub y_min: f64,
    /// Meters per cell; the grid covers `h * resolution` by `w * resolution`.
    pub resolution: f64,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, y_min: f64, resolution: f64, h: usize, w: usize, c: usize) -> Self {
        Self { x_min, y_min, resolution, h, w, c }
    }

    /// Square grid centered on the origin.
    pub fn centered(half_extent: f64, cells: usize, c: usize) -> Self {
        let resolution = 2.0 * half_extent / cells as f64;
        Self::new(-half_extent, -half_extent, resolution, cells, cells, c)
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.w as f64 * self.resolution
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.h as f64 * self.resolution
    }

    /// Cell (row, col) of a point, if in range.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let j = ((x - self.x_min) / self.resolution).floor();
        let i = ((y - self.y_min) / self.resolution).floor();
        if i < 0.0 || j < 0.0 || i >= self.h as f64 || j >= self.w as f64 {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (j as f64 + 0.5) * self.resolution,
            self.y_min + (i as f64 + 0.5) * self.resolution,
        )
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Grids must agree on geometry before feature maps are fused.
    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        self.h == other.h
            && self.w == other.w
            && (self.x_min - other.x_min).abs() < 1e-9
            && (self.y_min - other.y_min).abs() < 1e-9
            && (self.resolution - other.resolution).abs() < 1e-9
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        // Desk-scale default: 64 x 64 cells, 32 channels.
        GridSpec::centered(24.0, 64, 32)
    }
}

/// A feature map tied to its grid and producing agent.
#[derive(Debug, Clone)]
pub struct BevFeatureMap<T> {
    pub grid: GridSpec,
    pub agent_id: usize,
    pub values: TensorData<T>,
}

pub const POINT_FEATURES: usize = 5;

/// Sparse pillar buffers produced by [`voxelize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pillars<T> {
    pub grid: GridSpec,
    /// Occupied cells in row-major order: (cell linear index, per-point rows).
    pub cells: Vec<(usize, Vec<[T; POINT_FEATURES]>)>,
    /// Points discarded because they fell outside the grid.
    pub dropped: usize,
}

impl<T> Pillars<T> {
    pub fn total_points(&self) -> usize {
        self.cells.iter().map(|(_, pts)| pts.len()).sum()
    }

    /// Points per cell, for collaboration-need masks.
    pub fn count_map(&self, grid: &GridSpec) -> Vec<usize> {
        let mut counts = vec![0usize; grid.cells()];
        for (cell, pts) in &self.cells {
            counts[*cell] = pts.len();
        }
        counts
    }
}

/// Bins a cloud into pillars.
///
/// Per-point features are (dx, dy, z, intensity, distance to pillar center),
/// with dx/dy measured from the pillar center. Pillars over capacity keep the
/// points closest to the sensor (ties broken by full value order), so the
/// result is independent of input point order.
pub fn voxelize<T: Scalar>(
    cloud: &PointCloud,
    grid: &GridSpec,
    max_points_per_pillar: usize,
) -> Result<Pillars<T>> {
    if max_points_per_pillar == 0 {
        return Err(Error::invalid("voxelize", "max_points_per_pillar must be >= 1"));
    }
    let mut buckets: std::collections::BTreeMap<usize, Vec<&crate::scene::LidarPoint>> =
        std::collections::BTreeMap::new();
    let mut dropped = 0usize;
    for p in &cloud.points {
        match grid.cell_of(p.x, p.y) {
            Some((i, j)) => buckets.entry(i * grid.w + j).or_default().push(p),
            None => dropped += 1,
        }
    }
    let mut cells = Vec::with_capacity(buckets.len());
    for (cell, mut pts) in buckets {
        pts.sort_by(|a, b| {
            let ra = a.x * a.x + a.y * a.y;
            let rb = b.x * b.x + b.y * b.y;
            (ra, a.x, a.y, a.z, a.intensity)
                .partial_cmp(&(rb, b.x, b.y, b.z, b.intensity))
                .expect("finite point coordinates")
        });
        pts.truncate(max_points_per_pillar);
        let (i, j) = (cell / grid.w, cell % grid.w);
        let (cx, cy) = grid.cell_center(i, j);
        let rows = pts
            .iter()
            .map(|p| {
                let dx = p.x - cx;
                let dy = p.y - cy;
                [
                    lit::<T>(dx),
                    lit::<T>(dy),
                    lit::<T>(p.z),
                    lit::<T>(p.intensity),
                    lit::<T>((dx * dx + dy * dy).sqrt()),
                ]
            })
            .collect();
        cells.push((cell, rows));
    }
    Ok(Pillars { grid: *grid, cells, dropped })
}

/// Weights of the pillar feature net: a linear 5 -> C map with ReLU.
#[derive(Debug, Clone, Copy)]
pub struct PillarEncoderIds {
    pub w: TensorId,
    pub b: TensorId,
}

/// Encodes pillars into a dense `H x W x C` map on the tape.
///
/// Empty pillars stay zero. Max-pooling over each pillar makes the output
/// invariant to point order and duplication within a pillar.
pub fn pillar_encode<T: Scalar>(
    tape: &Tape<T>,
    pillars: &Pillars<T>,
    weights: PillarEncoderIds,
) -> Result<TensorId> {
    let grid = &pillars.grid;
    let total = pillars.total_points();
    if total == 0 {
        let zeros = tape.constant(TensorData::zeros(vec![grid.h, grid.w, grid.c]));
        return Ok(zeros);
    }
    let mut rows = Vec::with_capacity(total * POINT_FEATURES);
    let mut cell_of_row = Vec::with_capacity(total);
    for (cell, pts) in &pillars.cells {
        for p in pts {
            rows.extend_from_slice(p);
            cell_of_row.push(*cell);
        }
    }
    let feats = tape.constant(TensorData::new(vec![total, POINT_FEATURES], rows)?);
    let mapped = tape.linear(feats, weights.w, weights.b)?;
    let active = tape.relu(mapped);
    tape.scatter_max_rows(active, &cell_of_row, grid.h, grid.w)
}

/// Tape ids of the 1x1 compress/decompress convolutions.
#[derive(Debug, Clone, Copy)]
pub struct CompressorIds {
    pub enc_w: TensorId,
    pub enc_b: TensorId,
    pub dec_w: TensorId,
    pub dec_b: TensorId,
}

pub const COMPRESSION_RATIO: usize = 16;

/// Validates that a channel width supports the fixed 16x compression.
pub fn compressed_channels(c: usize) -> Result<usize> {
    if c % COMPRESSION_RATIO != 0 {
        return Err(Error::Config(format!(
            "channel width {} is not divisible by the fixed compression ratio {}",
            c, COMPRESSION_RATIO
        )));
    }
    Ok(c / COMPRESSION_RATIO)
}

/// Learned 1x1 compression C -> C/16 of a transmitted map.
pub fn compress<T: Scalar>(tape: &Tape<T>, map: TensorId, ids: CompressorIds) -> Result<TensorId> {
    tape.conv2d(map, ids.enc_w, ids.enc_b, 1, 0)
}

/// Learned 1x1 expansion C/16 -> C on the receiving side.
pub fn decompress<T: Scalar>(tape: &Tape<T>, map: TensorId, ids: CompressorIds) -> Result<TensorId> {
    tape.conv2d(map, ids.dec_w, ids.dec_b, 1, 0)
}

/// Nearest-cell index remap that warps a collaborator's BEV map into the ego
/// frame: output cell -> source cell in the collaborator grid, or `None`
/// where the collaborator has no coverage.
pub fn warp_index_map(ego_grid: &GridSpec, ego: &Pose, other: &Pose) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(ego_grid.cells());
    for i in 0..ego_grid.h {
        for j in 0..ego_grid.w {
            let (ex, ey) = ego_grid.cell_center(i, j);
            let (wx, wy) = ego.to_world(ex, ey);
            let (ox, oy) = other.from_world(wx, wy);
            idx.push(ego_grid.cell_of(ox, oy).map(|(oi, oj)| oi * ego_grid.w + oj));
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{LidarPoint, PointCloud};

    fn grid() -> GridSpec {
        GridSpec::centered(8.0, 8, 4)
    }

    fn cloud_from(points: Vec<(f64, f64, f64, f64)>) -> PointCloud {
        PointCloud {
            points: points
                .into_iter()
                .map(|(x, y, z, intensity)| LidarPoint { x, y, z, intensity, beam: 0 })
                .collect(),
            n_beams: 16,
        }
    }

    #[test]
    fn empty_cloud_gives_no_pillars() {
        let p = voxelize::<f64>(&cloud_from(vec![]), &grid(), 16).unwrap();
        assert!(p.cells.is_empty());
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn point_at_cell_center_lands_in_that_cell_with_zero_offsets() {
        let g = grid();
        let (cx, cy) = g.cell_center(2, 5);
        let p = voxelize::<f64>(&cloud_from(vec![(cx, cy, 0.3, 0.5)]), &g, 16).unwrap();
        assert_eq!(p.cells.len(), 1);
        let (cell, rows) = &p.cells[0];
        assert_eq!(*cell, 2 * g.w + 5);
        assert_eq!(rows.len(), 1);
        assert!(rows[0][0].abs() < 1e-12 && rows[0][1].abs() < 1e-12);
        assert!(rows[0][4].abs() < 1e-12);
    }

    #[test]
    fn out_of_range_points_are_dropped_and_counted() {
        let g = grid();
        let p = voxelize::<f64>(&cloud_from(vec![(100.0, 0.0, 0.0, 0.1), (0.0, 0.0, 0.0, 0.1)]), &g, 16)
            .unwrap();
        assert_eq!(p.dropped, 1);
        assert_eq!(p.total_points(), 1);
    }

    #[test]
    fn voxelize_is_invariant_to_point_order() {
        let g = grid();
        let pts = vec![
            (1.0, 1.0, 0.0, 0.3),
            (1.2, 1.1, 0.5, 0.9),
            (-3.0, 2.0, 0.1, 0.2),
            (1.1, 0.9, 0.2, 0.4),
        ];
        let a = voxelize::<f64>(&cloud_from(pts.clone()), &g, 2).unwrap();
        let mut rev = pts;
        rev.reverse();
        let b = voxelize::<f64>(&cloud_from(rev), &g, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_keeps_nearest_points() {
        let g = grid();
        // Same pillar, farther point must be dropped at capacity 1.
        let near = (0.2, 0.1, 0.0, 0.5);
        let far = (0.9, 0.9, 0.0, 0.5);
        let p = voxelize::<f64>(&cloud_from(vec![far, near]), &g, 1).unwrap();
        assert_eq!(p.total_points(), 1);
        let row = &p.cells[0].1[0];
        // Nearest point sits at (0.2, 0.1); its cell center is (1, 1) in this
        // 2 m grid, so dx = -0.8.
        assert!((row[0] + 0.8).abs() < 1e-12, "kept the wrong point: {:?}", row);
    }

    #[test]
    fn every_in_range_point_lands_in_exactly_one_pillar() {
        let scene = crate::scene::generate_scene(&crate::scene::SceneParams::default(), 3);
        let g = GridSpec::centered(24.0, 16, 8);
        let cloud = &scene.agents[0].cloud;
        let p = voxelize::<f64>(cloud, &g, 64).unwrap();
        assert_eq!(p.total_points() + p.dropped, cloud.len());
    }

    #[test]
    fn compression_ratio_validation() {
        assert_eq!(compressed_channels(32).unwrap(), 2);
        assert_eq!(compressed_channels(16).unwrap(), 1);
        assert!(compressed_channels(20).is_err());
    }

    #[test]
    fn warp_identity_pose_is_identity_map() {
        let g = grid();
        let idx = warp_index_map(&g, &Pose::identity(), &Pose::identity());
        for (k, v) in idx.iter().enumerate() {
            assert_eq!(*v, Some(k));
        }
    }
}
