//! Splat PLY in the layout common to 3DGS tools, plus a JSON sidecar.
//!
//! Per vertex: `x y z nx ny nz f_dc_0..2 opacity scale_0..2 rot_0..3`, all
//! float32. Scales are stored as logs, opacity as a logit and color as the
//! degree-zero spherical-harmonic coefficient. `nx ny nz` carry the
//! associated LiDAR normal, or zeros when there is none.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{logit, sigmoid, Gaussian, GaussianSet, SplitSchedule};
use crate::error::{Error, Result};
use crate::ply::{self, PlyFormat, ScalarType, VertexTable};

/// Zeroth-order real spherical harmonic.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const COLUMNS: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
    "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

pub fn splats_to_table(set: &GaussianSet) -> VertexTable {
    let n = set.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); COLUMNS.len()];
    for (i, g) in set.gaussians.iter().enumerate() {
        let normal = set
            .lidar_normals
            .as_ref()
            .map(|v| v[i])
            .unwrap_or_else(Vector3::zeros);
        let q = g.rotation.quaternion();
        let row = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            normal.x,
            normal.y,
            normal.z,
            (g.color.x - 0.5) / SH_C0,
            (g.color.y - 0.5) / SH_C0,
            (g.color.z - 0.5) / SH_C0,
            logit(g.opacity),
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
        ];
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    let mut t = VertexTable::new(n);
    for (name, values) in COLUMNS.iter().zip(cols) {
        t.push(name, ScalarType::F32, values).unwrap();
    }
    t
}

pub fn splats_from_table(t: &VertexTable) -> Result<GaussianSet> {
    let cols: Vec<&[f64]> = COLUMNS
        .iter()
        .map(|name| {
            t.column(name)
                .ok_or_else(|| Error::Ply(format!("splat PLY lacks property '{name}'")))
        })
        .collect::<Result<_>>()?;
    let mut gaussians = Vec::with_capacity(t.len);
    let mut normals = Vec::with_capacity(t.len);
    for i in 0..t.len {
        let v = |c: usize| cols[c][i];
        let color = Vector3::new(v(6), v(7), v(8)) * SH_C0 + Vector3::repeat(0.5);
        let g = Gaussian {
            mean: Vector3::new(v(0), v(1), v(2)),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(v(13), v(14), v(15), v(16))),
            scale: Vector3::new(v(10).exp(), v(11).exp(), v(12).exp()),
            opacity: sigmoid(v(9)),
            color: color.map(|c| c.clamp(0.0, 1.0)),
        };
        g.validate()
            .map_err(|e| Error::Ply(format!("vertex {i}: {e}")))?;
        gaussians.push(g);
        normals.push(Vector3::new(v(3), v(4), v(5)));
    }
    let has_normals = !normals.is_empty() && normals.iter().all(|n| n.norm() > 0.0);
    Ok(GaussianSet {
        gaussians,
        lidar_normals: has_normals.then(|| normals.iter().map(|n| n.normalize()).collect()),
    })
}

pub fn save_splats(path: &Path, set: &GaussianSet) -> Result<()> {
    ply::write_vertices(path, &splats_to_table(set), PlyFormat::BinaryLittleEndian)
}

pub fn load_splats(path: &Path) -> Result<GaussianSet> {
    splats_from_table(&ply::read_vertices(path)?)
}

/// Training-state sidecar stored next to a splat PLY.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplatSidecar {
    pub iteration: usize,
    pub schedule: SplitSchedule,
    pub seed: u64,
    pub num_gaussians: usize,
    pub has_lidar_normals: bool,
}

pub fn save_sidecar(path: &Path, sidecar: &SplatSidecar) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_sidecar(path: &Path) -> Result<SplatSidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_to_f32_precision() {
        let g = Gaussian::new(
            Vector3::new(0.25, -1.5, 2.0),
            UnitQuaternion::from_euler_angles(0.3, 0.1, -0.4),
            Vector3::new(0.05, 0.2, 0.01),
            0.85,
            Vector3::new(0.9, 0.1, 0.4),
        )
        .unwrap();
        let mut set = GaussianSet::new(vec![g.clone(); 3]);
        set.lidar_normals = Some(vec![Vector3::z(); 3]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ply");
        save_splats(&p, &set).unwrap();
        let back = load_splats(&p).unwrap();
        assert_eq!(back.len(), 3);
        let h = &back.gaussians[1];
        assert!((h.mean - g.mean).norm() < 1e-6);
        assert!((h.scale - g.scale).norm() < 1e-6);
        assert!((h.opacity - g.opacity).abs() < 1e-6);
        assert!((h.color - g.color).norm() < 1e-6);
        assert!(h.rotation.angle_to(&g.rotation) < 1e-6);
        assert_eq!(back.lidar_normals.unwrap()[2], Vector3::z());

        // A second save of the loaded set is byte-identical.
        let p2 = dir.path().join("s2.ply");
        save_splats(&p2, &load_splats(&p).unwrap()).unwrap();
        save_splats(&p, &load_splats(&p2).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn sidecar_roundtrip() {
        let s = SplatSidecar {
            iteration: 10,
            schedule: SplitSchedule::default(),
            seed: 4,
            num_gaussians: 3,
            has_lidar_normals: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_sidecar(&p, &s).unwrap();
        assert_eq!(load_sidecar(&p).unwrap(), s);
    }
}
