//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lidarsplat::camera_geom::io::{load_cameras_json, load_colmap_dir, save_cameras_json};
use lidarsplat::camera_geom::{lidar_depth_map, project_cloud, CameraView, DepthMap};
use lidarsplat::complexity::{compute_complexity, sample_indices};
use lidarsplat::depth_render::render;
use lidarsplat::index::NeighborIndex;
use lidarsplat::losses::{self, confidence_weights};
use lidarsplat::ply::{self, PlyFormat, ScalarType};
use lidarsplat::pointcloud::{cloud_to_table, load_pointcloud, save_pointcloud, PointCloud};
use lidarsplat::raster::{read_png_rgb, write_png_rgb, RgbImage};
use lidarsplat::splat_model::io::{load_splats, save_sidecar, save_splats, SplatSidecar};
use lidarsplat::splat_model::{estimate_point_normals, GaussianSet};
use lidarsplat::synth;
use lidarsplat::trainer::{densify, gaussians_from_cloud, train_step, TrainState, TrainView};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| anyhow!(lidarsplat::Error::Config(format!("paths.{what} is required for this command"))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_cameras(path: &Path) -> Result<Vec<CameraView>> {
    let views = if path.is_dir() {
        load_colmap_dir(path)?
    } else {
        load_cameras_json(path)?
    };
    if views.is_empty() {
        bail!(lidarsplat::Error::Camera(format!("{} contains no cameras", path.display())));
    }
    Ok(views)
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    load_pointcloud(path).with_context(|| format!("loading point cloud {}", path.display()))
}

/// Ten equal-width bins over `[min, max]`.
fn histogram(values: &[f64]) -> Value {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = [0usize; 10];
    for v in values {
        let b = if hi > lo { (((v - lo) / (hi - lo)) * 10.0).floor() as usize } else { 0 };
        counts[b.min(9)] += 1;
    }
    json!({ "min": lo, "max": hi, "counts": counts })
}

pub fn sample(cfg: &PipelineConfig) -> Result<()> {
    let out = &cfg.paths.output;
    let cloud = load_cloud(require(&cfg.paths.cloud, "cloud")?)?;
    let a = &cfg.allocation;
    if a.budget > cloud.len() {
        bail!(lidarsplat::Error::Budget {
            m: a.budget,
            n: cloud.len()
        });
    }
    let index = NeighborIndex::build(&cloud)?;
    let field = compute_complexity(&cloud, &index, a)?;
    let ids = sample_indices(&field.probabilities, a.budget, a.seed)?;
    save_pointcloud(&out.join("sampled.ply"), &cloud.subset(&ids), PlyFormat::BinaryLittleEndian)?;

    let mut table = cloud_to_table(&cloud);
    let texture = field.texture.clone().unwrap_or_else(|| vec![0.0; cloud.len()]);
    table.push("curvature", ScalarType::F32, field.curvature.clone())?;
    table.push("texture", ScalarType::F32, texture.clone())?;
    table.push("prob", ScalarType::F32, field.probabilities.clone())?;
    ply::write_vertices(&out.join("scores.ply"), &table, PlyFormat::BinaryLittleEndian)?;

    write_json(
        &out.join("stats.json"),
        &json!({
            "n": cloud.len(),
            "m": ids.len(),
            "k": a.k,
            "alpha": a.alpha,
            "beta": a.beta,
            "seed": a.seed,
            "has_colors": cloud.colors().is_some(),
            "curvature": histogram(&field.curvature),
            "texture": histogram(&texture),
            "prob": histogram(&field.probabilities),
        }),
    )?;
    log::info!("sampled {} of {} points", ids.len(), cloud.len());
    Ok(())
}

pub fn normals(cfg: &PipelineConfig) -> Result<()> {
    let cloud = load_cloud(require(&cfg.paths.cloud, "cloud")?)?;
    let (with_normals, degenerate) =
        estimate_point_normals(&cloud, cfg.normals.k, cfg.normals.orientation.to_core())?;
    let out = &cfg.paths.output;
    save_pointcloud(&out.join("normals.ply"), &with_normals, PlyFormat::BinaryLittleEndian)?;
    write_json(
        &out.join("normals_stats.json"),
        &json!({ "n": cloud.len(), "k": cfg.normals.k, "degenerate": degenerate }),
    )
}

fn depth_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.pfm")), dir.join(format!("{name}_mask.png")))
}

pub fn depthmaps(cfg: &PipelineConfig) -> Result<()> {
    let cloud = load_cloud(require(&cfg.paths.cloud, "cloud")?)?;
    let views = load_cameras(require(&cfg.paths.cameras, "cameras")?)?;
    let dir = cfg.paths.output.join("depth");
    create_dir(&dir)?;
    let mut entries = Vec::new();
    let mut empty = Vec::new();
    for view in &views {
        let map = lidar_depth_map(view, &cloud, &cfg.depth_projection);
        if map.valid_count() == 0 {
            log::warn!("view {} sees no point of the cloud", view.name);
            empty.push(view.name.clone());
        }
        let (d, m) = depth_paths(&dir, &view.name);
        map.write(&d, &m)?;
        entries.push(json!({
            "view": view.name,
            "valid_pixels": map.valid_count(),
            "coverage": map.coverage(),
        }));
    }
    if empty.len() == views.len() {
        bail!(lidarsplat::Error::EmptyValidSet(format!(
            "no view covers any point: {}",
            empty.join(", ")
        )));
    }
    write_json(&cfg.paths.output.join("manifest.json"), &json!({ "views": entries }))
}

pub fn render_cmd(cfg: &PipelineConfig) -> Result<()> {
    let set = load_splats(require(&cfg.paths.splats, "splats")?)?;
    let views = load_cameras(require(&cfg.paths.cameras, "cameras")?)?;
    let dir = cfg.paths.output.join("render");
    create_dir(&dir)?;
    let mut entries = Vec::new();
    for view in &views {
        let frame = render(&set, view, &cfg.render);
        let (d, m) = depth_paths(&dir, &format!("{}_depth", view.name));
        frame.depth.write(&d, &m)?;
        write_png_rgb(&dir.join(format!("{}.png", view.name)), &frame.color)?;
        entries.push(json!({
            "view": view.name,
            "valid_pixels": frame.depth.valid_count(),
            "coverage": frame.depth.coverage(),
            "invalid_denominators": frame.invalid_denominators,
        }));
    }
    write_json(&cfg.paths.output.join("manifest.json"), &json!({ "views": entries }))
}

fn target_images(cfg: &PipelineConfig, views: &[CameraView], cloud: Option<&PointCloud>) -> Result<Vec<RgbImage>> {
    views
        .iter()
        .map(|v| match (&cfg.paths.images, cloud) {
            (Some(dir), _) => {
                let img = read_png_rgb(&dir.join(format!("{}.png", v.name)))?;
                if (img.width, img.height) != (v.width, v.height) {
                    bail!(lidarsplat::Error::LengthMismatch {
                        what: "image vs camera resolution",
                        left: img.width * img.height,
                        right: v.width * v.height,
                    });
                }
                Ok(img)
            }
            (None, Some(c)) => Ok(project_cloud(v, c, &cfg.depth_projection)
                .1
                .unwrap_or_else(|| RgbImage::new(v.width, v.height))),
            (None, None) => bail!(lidarsplat::Error::Config("paths.images or paths.cloud is required".into())),
        })
        .collect()
}

fn write_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    let stem = format!("iter_{:06}", state.t);
    save_splats(&dir.join(format!("{stem}.ply")), &state.set)?;
    save_sidecar(
        &dir.join(format!("{stem}.json")),
        &SplatSidecar {
            iteration: state.t,
            schedule: state.schedule.clone(),
            seed: state.seed,
            num_gaussians: state.set.len(),
            has_lidar_normals: state.set.lidar_normals.is_some(),
        },
    )?;
    Ok(())
}

pub fn train_toy(cfg: &PipelineConfig) -> Result<()> {
    let cloud = load_cloud(require(&cfg.paths.cloud, "cloud")?)?;
    let cloud = if cloud.normals().is_some() {
        cloud
    } else {
        estimate_point_normals(&cloud, cfg.normals.k, cfg.normals.orientation.to_core())?.0
    };
    let views = load_cameras(require(&cfg.paths.cameras, "cameras")?)?;
    let images = target_images(cfg, &views, Some(&cloud))?;
    let train_views: Vec<TrainView> = views
        .iter()
        .zip(images)
        .map(|(v, img)| {
            let depth = lidar_depth_map(v, &cloud, &cfg.depth_projection);
            let tv = TrainView::new(v.clone(), img, depth)?;
            Ok(if cfg.toy.uniform_confidence { tv.with_uniform_confidence() } else { tv })
        })
        .collect::<Result<_>>()?;

    let init_cloud = match cfg.toy.budget {
        Some(m) if m < cloud.len() => {
            let index = NeighborIndex::build(&cloud)?;
            let field = compute_complexity(&cloud, &index, &cfg.allocation)?;
            cloud.subset(&sample_indices(&field.probabilities, m, cfg.allocation.seed)?)
        }
        Some(m) if m > cloud.len() => bail!(lidarsplat::Error::Budget { m, n: cloud.len() }),
        _ => cloud.clone(),
    };
    let set = gaussians_from_cloud(&init_cloud, &cfg.init)?;
    let tc = &cfg.train;
    let mut state = TrainState::new(set, tc.schedule.clone(), tc.seed)?;

    let out = &cfg.paths.output;
    let ckpt = out.join("checkpoints");
    create_dir(&ckpt)?;
    write_checkpoint(&ckpt, &state)?;
    let mut loss_csv = String::from("iteration,view,total,rgb_l1,ssim_loss,depth,normal,skipped_probes,flagged\n");
    let mut densify_csv = String::from("iteration,threshold,gaussians_before,splits,suppressed,pruned,gaussians_after\n");
    let end = tc.schedule.total_iters.min(cfg.toy.steps);
    while state.t < end {
        let r = train_step(&mut state, &train_views, tc)
            .with_context(|| format!("training step {}", state.t))?;
        let l = r.loss;
        loss_csv += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.iteration, r.view, l.total, l.rgb_l1, l.ssim_loss, l.depth, l.normal, r.skipped_probes, r.flagged
        );
        if state.t % tc.densify_interval == 0 && state.t < tc.schedule.total_iters {
            let before = state.set.len();
            let d = densify(&mut state, tc)?;
            densify_csv += &format!(
                "{},{},{},{},{},{},{}\n",
                d.iteration,
                d.threshold,
                before,
                d.split_ids.len(),
                d.suppressed,
                d.pruned,
                state.set.len()
            );
        }
        if state.t % cfg.toy.checkpoint_every == 0 {
            write_checkpoint(&ckpt, &state)?;
        }
    }
    if state.t % cfg.toy.checkpoint_every != 0 {
        write_checkpoint(&ckpt, &state)?;
    }
    save_splats(&out.join("final.ply"), &state.set)?;
    fs::write(out.join("loss.csv"), loss_csv)?;
    fs::write(out.join("densify.csv"), densify_csv)?;
    Ok(())
}

fn fmt_metric(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("nan")
    }
}

pub fn eval(cfg: &PipelineConfig) -> Result<()> {
    let views = load_cameras(require(&cfg.paths.cameras, "cameras")?)?;
    let gt_dir = require(&cfg.paths.images, "images")?;
    let set: Option<GaussianSet> = match (&cfg.paths.predictions, &cfg.paths.splats) {
        (Some(_), _) => None,
        (None, Some(p)) => Some(load_splats(p)?),
        (None, None) => bail!(lidarsplat::Error::Config(
            "eval needs paths.predictions or paths.splats".into()
        )),
    };
    let cloud = cfg.paths.cloud.as_deref().map(load_cloud).transpose()?;

    let mut csv = String::from("view,psnr,ssim,l1,depth_loss\n");
    let mut rows = Vec::new();
    let (mut sum_psnr, mut sum_ssim, mut sum_l1) = (0.0, 0.0, 0.0);
    for view in &views {
        let gt = read_png_rgb(&gt_dir.join(format!("{}.png", view.name)))?;
        let (pred, rendered_depth) = match (&set, &cfg.paths.predictions) {
            (_, Some(dir)) => (read_png_rgb(&dir.join(format!("{}.png", view.name)))?, None),
            (Some(s), None) => {
                let f = render(s, view, &cfg.render);
                (f.color, Some(f.depth))
            }
            (None, None) => unreachable!(),
        };
        let psnr = losses::psnr(&pred, &gt)?;
        let ssim = losses::ssim(&pred, &gt)?;
        let l1 = losses::l1_rgb(&pred, &gt)?;
        let lidar: Option<DepthMap> = match (&cfg.paths.depth, &cloud) {
            (Some(dir), _) => {
                let (d, m) = depth_paths(dir, &view.name);
                Some(DepthMap::read(&d, &m)?)
            }
            (None, Some(c)) => Some(lidar_depth_map(view, c, &cfg.depth_projection)),
            (None, None) => None,
        };
        let depth_loss = match (lidar, rendered_depth) {
            (Some(l), Some(r)) if l.valid_count() > 0 => {
                let conf = confidence_weights(&gt, &l.valid)?;
                Some(losses::depth_loss(&l, &r, &conf)?)
            }
            _ => None,
        };
        let show = |v: f64| if v.is_finite() { v.to_string() } else if v > 0.0 { "inf".into() } else { "nan".into() };
        csv += &format!(
            "{},{},{},{},{}\n",
            view.name,
            show(psnr),
            show(ssim),
            show(l1),
            depth_loss.map(show).unwrap_or_default()
        );
        rows.push(json!({
            "view": view.name,
            "psnr": fmt_metric(psnr),
            "ssim": fmt_metric(ssim),
            "l1": fmt_metric(l1),
            "depth_loss": depth_loss.map(fmt_metric),
        }));
        sum_psnr += psnr;
        sum_ssim += ssim;
        sum_l1 += l1;
    }
    let n = views.len() as f64;
    let out = &cfg.paths.output;
    fs::write(out.join("metrics.csv"), csv)?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "views": rows,
            "mean": {
                "psnr": fmt_metric(sum_psnr / n),
                "ssim": fmt_metric(sum_ssim / n),
                "l1": fmt_metric(sum_l1 / n),
            }
        }),
    )
}

pub fn synth_cmd(cfg: &PipelineConfig) -> Result<()> {
    let scene = synth::generate(&cfg.synth)?;
    let out = &cfg.paths.output;
    let mut table = cloud_to_table(&scene.cloud);
    if let Some(f) = &scene.face_ids {
        table.push("face", ScalarType::U8, f.iter().map(|v| *v as f64).collect())?;
    }
    if let Some(e) = &scene.edge_distance {
        table.push("edge_distance", ScalarType::F32, e.clone())?;
    }
    ply::write_vertices(&out.join("cloud.ply"), &table, PlyFormat::BinaryLittleEndian)?;
    save_cameras_json(&out.join("cameras.json"), &scene.cameras)?;
    let img_dir = out.join("images");
    create_dir(&img_dir)?;
    for view in &scene.cameras {
        let (_, img) = synth::render_ground_truth(&scene, view, &cfg.depth_projection);
        write_png_rgb(&img_dir.join(format!("{}.png", view.name)), &img)?;
    }
    let mut f = fs::File::create(out.join("scene.json"))?;
    writeln!(
        f,
        "{}",
        serde_json::to_string_pretty(&json!({
            "kind": cfg.synth.kind,
            "points": scene.cloud.len(),
            "cameras": scene.cameras.len(),
            "textured_face": scene.textured_face,
        }))?
    )?;
    Ok(())
}
