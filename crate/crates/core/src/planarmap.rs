//! Voxel-hashed plane map serving point-to-plane correspondences.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanarMapConfig {
    /// Edge length of a voxel, m.
    pub voxel_size: f64,
    pub min_points: usize,
    /// Largest mean squared point-plane distance accepted as planar, m².
    pub planarity_mse: f64,
    /// Largest |point-plane distance| accepted by [`PlanarMap::match_plane`], m.
    pub match_gate: f64,
    /// Points beyond this count are not stored in a voxel.
    pub max_points_per_voxel: usize,
}

impl Default for PlanarMapConfig {
    fn default() -> Self {
        PlanarMapConfig {
            voxel_size: 0.5,
            min_points: 6,
            planarity_mse: 0.05 * 0.05,
            match_gate: 0.3,
            max_points_per_voxel: 200,
        }
    }
}

impl PlanarMapConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.voxel_size > 0.0
            && self.voxel_size.is_finite()
            && self.min_points >= 3
            && self.max_points_per_voxel >= self.min_points
            && self.planarity_mse >= 0.0
            && self.match_gate >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "planar map config {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    /// Half-open cell `[k s, (k+1) s)` containing `p` on each axis.
    pub fn from_point(p: &Vector3<f64>, voxel_size: f64) -> Self {
        let f = |x: f64| (x / voxel_size).floor() as i64;
        VoxelKey {
            ix: f(p.x),
            iy: f(p.y),
            iz: f(p.z),
        }
    }

    pub fn face_neighbors(&self) -> [VoxelKey; 6] {
        let VoxelKey { ix, iy, iz } = *self;
        [
            VoxelKey { ix: ix - 1, iy, iz },
            VoxelKey { ix: ix + 1, iy, iz },
            VoxelKey { ix, iy: iy - 1, iz },
            VoxelKey { ix, iy: iy + 1, iz },
            VoxelKey { ix, iy, iz: iz - 1 },
            VoxelKey { ix, iy, iz: iz + 1 },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneFeature {
    pub normal: Vector3<f64>,
    pub centroid: Vector3<f64>,
    /// Mean squared point-plane distance, m².
    pub mse: f64,
    pub n_points: usize,
}

impl PlaneFeature {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.centroid))
    }

    /// Copy with the normal flipped toward `viewpoint`.
    pub fn oriented_toward(&self, viewpoint: &Vector3<f64>) -> Self {
        let mut out = *self;
        if self.normal.dot(&(viewpoint - self.centroid)) < 0.0 {
            out.normal = -out.normal;
        }
        out
    }
}

/// Least-squares plane through `points`: centroid plus the smallest-eigenvalue
/// eigenvector of the scatter matrix.
///
/// The stored sign makes the largest-magnitude normal component positive
/// (lowest axis on ties).
pub fn fit_plane(points: &[Vector3<f64>]) -> Option<PlaneFeature> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lambda_min = eig.eigenvalues[order[0]].max(0.0);

    let scale = eig.eigenvalues[order[2]].abs().max(f64::MIN_POSITIVE);
    let tie_tol = 1e-12 * scale;
    let tied: Vec<Vector3<f64>> = order
        .iter()
        .filter(|&&k| eig.eigenvalues[k] - eig.eigenvalues[order[0]] <= tie_tol)
        .map(|&k| eig.eigenvectors.column(k).into_owned())
        .collect();
    let normal = if tied.len() == 1 {
        tied[0]
    } else {
        // Degenerate smallest eigenvalue: the first coordinate axis with a
        // usable projection onto the tied eigenspace decides.
        let project = |axis: Vector3<f64>| {
            tied.iter()
                .fold(Vector3::zeros(), |acc, v| acc + v * v.dot(&axis))
        };
        let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
        axes.iter().map(|a| project(*a)).find(|p| p.norm() > 1e-6)?
    };
    let mut normal = normal.normalize();
    let mut lead = 0;
    for k in 1..3 {
        if normal[k].abs() > normal[lead].abs() {
            lead = k;
        }
    }
    if normal[lead] < 0.0 {
        normal = -normal;
    }
    Some(PlaneFeature {
        normal,
        centroid,
        mse: lambda_min,
        n_points: points.len(),
    })
}

#[derive(Clone, Debug, Default)]
struct Voxel {
    points: Vec<Vector3<f64>>,
    plane: Option<PlaneFeature>,
}

#[derive(Clone, Debug)]
pub struct PlanarMap {
    cfg: PlanarMapConfig,
    voxels: HashMap<VoxelKey, Voxel>,
}

impl PlanarMap {
    pub fn new(cfg: PlanarMapConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PlanarMap {
            cfg,
            voxels: HashMap::new(),
        })
    }

    pub fn config(&self) -> &PlanarMapConfig {
        &self.cfg
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }

    pub fn n_planes(&self) -> usize {
        self.voxels.values().filter(|v| v.plane.is_some()).count()
    }

    pub fn key(&self, p: &Vector3<f64>) -> VoxelKey {
        VoxelKey::from_point(p, self.cfg.voxel_size)
    }

    /// Planar fit of a voxel, if it has one that passes the planarity gate.
    pub fn plane(&self, key: &VoxelKey) -> Option<&PlaneFeature> {
        self.voxels.get(key).and_then(|v| v.plane.as_ref())
    }

    /// Bins world-frame points and refits every voxel that received points.
    pub fn insert_points(&mut self, pts: &[Vector3<f64>]) {
        let mut touched = Vec::new();
        for p in pts.iter().filter(|p| p.iter().all(|x| x.is_finite())) {
            let key = self.key(p);
            let voxel = self.voxels.entry(key).or_default();
            if voxel.points.len() < self.cfg.max_points_per_voxel {
                voxel.points.push(*p);
                touched.push(key);
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for key in touched {
            let voxel = self.voxels.get_mut(&key).expect("touched voxel exists");
            voxel.plane = if voxel.points.len() >= self.cfg.min_points {
                fit_plane(&voxel.points).filter(|f| f.mse < self.cfg.planarity_mse)
            } else {
                None
            };
        }
    }

    /// Plane of the voxel containing `p`. When that voxel is unoccupied, the
    /// face neighbour whose plane is closest to `p` is used instead. The
    /// normal is oriented toward `viewpoint`.
    pub fn match_plane(&self, p: &Vector3<f64>, viewpoint: &Vector3<f64>) -> Option<PlaneFeature> {
        let gate = |f: &&PlaneFeature| f.signed_distance(p).abs() < self.cfg.match_gate;
        let key = self.key(p);
        // An occupied voxel without a usable plane is non-planar; borrowing a
        // neighbour's plane there only yields wrong associations.
        let found = match self.voxels.get(&key) {
            Some(v) => v.plane.as_ref().filter(gate),
            None => key
                .face_neighbors()
                .iter()
                .filter_map(|k| self.plane(k))
                .filter(gate)
                .fold(None::<&PlaneFeature>, |best, f| match best {
                    Some(b) if b.signed_distance(p).abs() <= f.signed_distance(p).abs() => Some(b),
                    _ => Some(f),
                }),
        };
        found.map(|f| f.oriented_toward(viewpoint))
    }
}

impl Default for PlanarMap {
    fn default() -> Self {
        PlanarMap {
            cfg: PlanarMapConfig::default(),
            voxels: HashMap::new(),
        }
    }
}
