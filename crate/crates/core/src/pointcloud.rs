//! Registered LiDAR point clouds: data model, PLY I/O and chunked traversal.

use std::ops::Range;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::ply::{self, PlyFormat, ScalarType, VertexTable};

/// Positions in meters with optional per-point colors in `[0, 1]` and unit
/// normals. All present arrays share one length.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vector3<f64>>,
    colors: Option<Vec<Vector3<f64>>>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vector3<f64>>) -> Result<Self> {
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidCloud(format!("vertex {i} has a non-finite coordinate")));
        }
        Ok(PointCloud {
            positions,
            colors: None,
            normals: None,
        })
    }

    pub fn with_colors(mut self, colors: Vec<Vector3<f64>>) -> Result<Self> {
        if colors.len() != self.positions.len() {
            return Err(Error::LengthMismatch {
                what: "colors vs positions",
                left: colors.len(),
                right: self.positions.len(),
            });
        }
        if let Some(i) = colors
            .iter()
            .position(|c| !c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidCloud(format!("vertex {i} has a color outside [0, 1]")));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    /// Attaches normals, renormalizing each to unit length.
    pub fn with_normals(mut self, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != self.positions.len() {
            return Err(Error::LengthMismatch {
                what: "normals vs positions",
                left: normals.len(),
                right: self.positions.len(),
            });
        }
        let mut out = Vec::with_capacity(normals.len());
        for (i, n) in normals.into_iter().enumerate() {
            let len = n.norm();
            if !(len.is_finite() && len > 0.0) {
                return Err(Error::InvalidCloud(format!("vertex {i} has a zero or non-finite normal")));
            }
            out.push(n / len);
        }
        self.normals = Some(out);
        Ok(self)
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[Vector3<f64>]> {
        self.colors.as_deref()
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    /// The points at `ids`, in the order given.
    pub fn subset(&self, ids: &[usize]) -> PointCloud {
        let pick = |v: &Vec<Vector3<f64>>| ids.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PointCloud {
            positions: pick(&self.positions),
            colors: self.colors.as_ref().map(pick),
            normals: self.normals.as_ref().map(pick),
        }
    }

    /// Index ranges covering `[0, len)` in order, each at most `chunk_size` long.
    pub fn chunks(&self, chunk_size: usize) -> Vec<Range<usize>> {
        chunk_ranges(self.len(), chunk_size)
    }
}

/// Partition `[0, len)` into consecutive ranges of at most `chunk_size`.
/// A `chunk_size` of zero is treated as one.
pub fn chunk_ranges(len: usize, chunk_size: usize) -> Vec<Range<usize>> {
    let step = chunk_size.max(1);
    (0..len)
        .step_by(step)
        .map(|start| start..(start + step).min(len))
        .collect()
}

pub fn load_pointcloud(path: &Path) -> Result<PointCloud> {
    let table = ply::read_vertices(path)?;
    cloud_from_table(&table)
}

pub fn cloud_from_table(table: &VertexTable) -> Result<PointCloud> {
    let col = |name: &str| {
        table
            .column(name)
            .ok_or_else(|| Error::Ply(format!("vertex element lacks property '{name}'")))
    };
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let mut positions = Vec::with_capacity(table.len);
    for i in 0..table.len {
        let p = Vector3::new(x[i], y[i], z[i]);
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::Ply(format!("vertex {i} has a non-finite coordinate")));
        }
        positions.push(p);
    }
    let mut cloud = PointCloud::new(positions)?;

    if table.has("red") && table.has("green") && table.has("blue") {
        let ty = table.columns.iter().find(|c| c.name == "red").map(|c| c.ty);
        let scale = match ty {
            Some(ScalarType::F32) | Some(ScalarType::F64) => 1.0,
            Some(ScalarType::U16) => 65535.0,
            _ => 255.0,
        };
        let (r, g, b) = (col("red")?, col("green")?, col("blue")?);
        let colors = (0..table.len)
            .map(|i| Vector3::new(r[i], g[i], b[i]) / scale)
            .collect();
        cloud = cloud.with_colors(colors)?;
    }

    if table.has("nx") && table.has("ny") && table.has("nz") {
        let (nx, ny, nz) = (col("nx")?, col("ny")?, col("nz")?);
        let normals = (0..table.len)
            .map(|i| Vector3::new(nx[i], ny[i], nz[i]))
            .collect();
        cloud = cloud
            .with_normals(normals)
            .map_err(|e| Error::Ply(e.to_string()))?;
    }
    Ok(cloud)
}

/// Vertex table in the canonical on-disk layout: float32 xyz, uint8 rgb and
/// float32 normals when present.
pub fn cloud_to_table(cloud: &PointCloud) -> VertexTable {
    let n = cloud.len();
    let mut t = VertexTable::new(n);
    let axis = |v: &[Vector3<f64>], k: usize| v.iter().map(|p| p[k]).collect::<Vec<_>>();
    for (k, name) in ["x", "y", "z"].into_iter().enumerate() {
        t.push(name, ScalarType::F32, axis(cloud.positions(), k)).unwrap();
    }
    if let Some(colors) = cloud.colors() {
        for (k, name) in ["red", "green", "blue"].into_iter().enumerate() {
            let vals = colors.iter().map(|c| (c[k] * 255.0).round()).collect();
            t.push(name, ScalarType::U8, vals).unwrap();
        }
    }
    if let Some(normals) = cloud.normals() {
        for (k, name) in ["nx", "ny", "nz"].into_iter().enumerate() {
            t.push(name, ScalarType::F32, axis(normals, k)).unwrap();
        }
    }
    t
}

pub fn save_pointcloud(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    ply::write_vertices(path, &cloud_to_table(cloud), format)
}
