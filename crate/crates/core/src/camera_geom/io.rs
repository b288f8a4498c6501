//! Camera files: COLMAP text (`cameras.txt` + `images.txt`) and a JSON rig.
//!
//! COLMAP places pixel centers at half-integer coordinates; this crate puts
//! them at integers, so principal points shift by 0.5 px on the way in and
//! out.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::CameraView;
use crate::error::{Error, Result};

/// One camera in the JSON rig. Pose is world-to-camera; `qvec` is `[w, x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub cameras: Vec<CameraRecord>,
}

impl CameraRecord {
    pub fn to_view(&self) -> Result<CameraView> {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            self.qvec[0],
            self.qvec[1],
            self.qvec[2],
            self.qvec[3],
        ));
        CameraView::new(
            self.name.clone(),
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            q.to_rotation_matrix().into_inner(),
            Vector3::from(self.tvec),
        )
    }

    pub fn from_view(view: &CameraView) -> Self {
        let q = UnitQuaternion::from_matrix(&view.rotation);
        let q = q.quaternion();
        // Keep w non-negative so the same rotation always serializes the same way.
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        CameraRecord {
            name: view.name.clone(),
            width: view.width,
            height: view.height,
            fx: view.fx,
            fy: view.fy,
            cx: view.cx,
            cy: view.cy,
            qvec: [s * q.w, s * q.i, s * q.j, s * q.k],
            tvec: [view.translation.x, view.translation.y, view.translation.z],
        }
    }
}

pub fn load_cameras_json(path: &Path) -> Result<Vec<CameraView>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rig: CameraRig = serde_json::from_str(&text)
        .map_err(|e| Error::Camera(format!("{}: {e}", path.display())))?;
    rig.cameras.iter().map(CameraRecord::to_view).collect()
}

pub fn save_cameras_json(path: &Path, views: &[CameraView]) -> Result<()> {
    let rig = CameraRig {
        cameras: views.iter().map(CameraRecord::from_view).collect(),
    };
    let text = serde_json::to_string_pretty(&rig)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

struct Intrinsics {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

fn parse_num<T: std::str::FromStr>(tok: &str, ctx: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::Camera(format!("{ctx}: cannot parse '{tok}'")))
}

fn parse_cameras_txt(text: &str) -> Result<HashMap<u32, Intrinsics>> {
    let mut out = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ctx = format!("cameras.txt line {}", ln + 1);
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() < 4 {
            return Err(Error::Camera(format!("{ctx}: too few fields")));
        }
        let id: u32 = parse_num(t[0], &ctx)?;
        let width = parse_num(t[2], &ctx)?;
        let height = parse_num(t[3], &ctx)?;
        let params: Vec<f64> = t[4..].iter().map(|s| parse_num(s, &ctx)).collect::<Result<_>>()?;
        let (fx, fy, cx, cy) = match (t[1], params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            (model, _) => {
                return Err(Error::Camera(format!(
                    "{ctx}: unsupported model {model} with {} params",
                    params.len()
                )))
            }
        };
        out.insert(
            id,
            Intrinsics {
                width,
                height,
                fx,
                fy,
                cx: cx - 0.5,
                cy: cy - 0.5,
            },
        );
    }
    Ok(out)
}

/// Parse COLMAP `cameras.txt` and `images.txt` contents.
pub fn parse_colmap_text(cameras_txt: &str, images_txt: &str) -> Result<Vec<CameraView>> {
    let intrinsics = parse_cameras_txt(cameras_txt)?;
    // Image records are two lines each; the second (2D points) may be blank.
    let lines: Vec<(usize, &str)> = images_txt
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim_start().starts_with('#'))
        .collect();
    let mut views = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let (ln, line) = lines[i];
        if line.trim().is_empty() {
            i += 1;
            continue;
        }
        let ctx = format!("images.txt line {}", ln + 1);
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() < 10 {
            return Err(Error::Camera(format!("{ctx}: expected 10 fields, found {}", t.len())));
        }
        let q: Vec<f64> = t[1..5].iter().map(|s| parse_num(s, &ctx)).collect::<Result<_>>()?;
        let tv: Vec<f64> = t[5..8].iter().map(|s| parse_num(s, &ctx)).collect::<Result<_>>()?;
        let cam_id: u32 = parse_num(t[8], &ctx)?;
        let name = t[9..].join(" ");
        let k = intrinsics
            .get(&cam_id)
            .ok_or_else(|| Error::Camera(format!("{ctx}: unknown camera id {cam_id}")))?;
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        views.push(CameraView::new(
            name,
            k.fx,
            k.fy,
            k.cx,
            k.cy,
            k.width,
            k.height,
            rot.to_rotation_matrix().into_inner(),
            Vector3::new(tv[0], tv[1], tv[2]),
        )?);
        i += 2;
    }
    Ok(views)
}

/// Load `cameras.txt` and `images.txt` from a COLMAP text model directory.
pub fn load_colmap_dir(dir: &Path) -> Result<Vec<CameraView>> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    parse_colmap_text(&read("cameras.txt")?, &read("images.txt")?)
}

/// Write one PINHOLE camera per view and the matching image records.
pub fn save_colmap_dir(dir: &Path, views: &[CameraView]) -> Result<()> {
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut imgs = String::from("# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for (i, v) in views.iter().enumerate() {
        let id = i + 1;
        cams.push_str(&format!(
            "{id} PINHOLE {} {} {} {} {} {}\n",
            v.width,
            v.height,
            v.fx,
            v.fy,
            v.cx + 0.5,
            v.cy + 0.5
        ));
        let r = CameraRecord::from_view(v);
        imgs.push_str(&format!(
            "{id} {} {} {} {} {} {} {} {id} {}\n\n",
            r.qvec[0], r.qvec[1], r.qvec[2], r.qvec[3], r.tvec[0], r.tvec[1], r.tvec[2], v.name
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, s: &str| {
        let p = dir.join(name);
        std::fs::write(&p, s).map_err(|e| Error::io(p, e))
    };
    write("cameras.txt", &cams)?;
    write("images.txt", &imgs)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAMERAS: &str = "# comment\n1 PINHOLE 64 48 50 52 32.5 24.5\n2 SIMPLE_PINHOLE 32 32 40 16 16\n";
    const IMAGES: &str = "# header\n1 1 0 0 0 0.1 0.2 0.3 1 a.png\n10 20 -1 30 40 5\n2 0.7071067811865476 0 0.7071067811865476 0 0 0 1 2 b c.png\n\n";

    #[test]
    fn parse_colmap() {
        let views = parse_colmap_text(CAMERAS, IMAGES).unwrap();
        assert_eq!(views.len(), 2);
        assert_eq!(views[0].name, "a.png");
        assert_eq!((views[0].cx, views[0].cy), (32.0, 24.0));
        assert_eq!(views[0].fy, 52.0);
        assert_eq!(views[0].translation, Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(views[1].name, "b c.png");
        assert_eq!(views[1].fx, views[1].fy);
        // 90 degrees about y maps +z to +x.
        let z = views[1].rotation * Vector3::z();
        assert!((z - Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn colmap_errors() {
        assert!(parse_colmap_text("1 OPENCV 10 10 1 1 1 1 0 0 0 0\n", "").is_err());
        assert!(parse_colmap_text(CAMERAS, "1 1 0 0 0 0 0 0 9 x.png\n\n").is_err());
        assert!(parse_colmap_text(CAMERAS, "1 1 0 0\n").is_err());
    }

    #[test]
    fn roundtrips() {
        let views = parse_colmap_text(CAMERAS, IMAGES).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_colmap_dir(dir.path(), &views).unwrap();
        let back = load_colmap_dir(dir.path()).unwrap();
        for (a, b) in views.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert!((a.rotation - b.rotation).norm() < 1e-12);
            assert_eq!((a.cx, a.fx), (b.cx, b.fx));
        }
        let p = dir.path().join("cams.json");
        save_cameras_json(&p, &views).unwrap();
        let back = load_cameras_json(&p).unwrap();
        for (a, b) in views.iter().zip(&back) {
            assert!((a.rotation - b.rotation).norm() < 1e-12);
            assert_eq!(a.translation, b.translation);
        }
    }
}
