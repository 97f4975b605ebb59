//! Subcommand implementations.
//!
//! Every command resolves its configuration (flags > config file > defaults),
//! stamps the effective values into a run manifest, times its stages, and
//! writes the manifest last so it only ever describes outputs that exist.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gausssurf::bind::{self, refine};
use gausssurf::io;
use gausssurf::mesh::extract;
use gausssurf::metrics::{chamfer_hausdorff, MetricReport, Reference};
use gausssurf::regularize;
use gausssurf::render::{render_depth, render_image, Image};
use gausssurf::synth::{self, Surface};
use gausssurf::Scene;
use serde_json::json;

use crate::cli::*;
use crate::config::FileConfig;
use crate::manifest::RunManifest;

/// Argument combination clap cannot express statically; mapped to exit 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn synth(args: &SynthArgs, global: &GlobalArgs, file: &FileConfig) -> Result<()> {
    let mut spec = file.synth.clone().unwrap_or_default();
    if let Some(kind) = args.surface {
        if surface_kind(&spec.surface) != kind {
            spec.surface = default_surface(kind);
        }
    }
    if let Some(n) = args.n_gaussians {
        spec.n_gaussians = n;
    }
    if let Some(n) = args.n_views {
        spec.n_views = n;
    }
    if let Some(s) = args.image_size {
        spec.image_size = s;
    }
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }

    let mut man = RunManifest::new("synth", serde_json::to_value(&spec)?, spec.seed);
    let (scene, cams, gt) = man.time("make_scene", || synth::make_synthetic_scene(&spec))?;

    let out = &global.out;
    let scene_path = out.join("scene.ply");
    io::save_gaussian_ply(&scene_path, &scene)?;
    man.record_output(&scene_path);
    let cam_path = out.join("cameras.json");
    io::save_cameras(&cam_path, &cams)?;
    man.record_output(&cam_path);
    let gt_path = out.join("ground_truth.json");
    fs::write(&gt_path, serde_json::to_string_pretty(&gt)? + "\n")?;
    man.record_output(&gt_path);

    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir)?;
    let written = man.time("render_targets", || -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for (i, cam) in cams.iter().enumerate() {
            let img = render_image(&scene, cam);
            let p = img_dir.join(format!("view_{i:03}.png"));
            io::save_png(&p, &img)?;
            paths.push(p);
        }
        Ok(paths)
    })?;
    for p in &written {
        man.record_output(p);
    }

    man.write(out)?;
    println!(
        "synth: {} gaussians, {} views of {}x{} in {}",
        scene.gaussians.len(),
        cams.len(),
        spec.image_size,
        spec.image_size,
        out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs, global: &GlobalArgs, file: &FileConfig) -> Result<()> {
    let mut cfg = file.train.clone().unwrap_or_default();
    if let Some((f, e, r)) = args.iters {
        cfg.iters_free = f;
        cfg.iters_entropy = e;
        cfg.iters_reg = r;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }

    let scene = io::load_gaussian_ply(&args.scene)?;
    let cams = io::load_cameras(&args.cameras)?;
    let images = load_images_dir(&args.images, cams.len())?;

    let mut man = RunManifest::new("train", serde_json::to_value(&cfg)?, cfg.seed);
    let (trained, log) = man.time("train", || regularize::train(&scene, &images, &cams, &cfg))?;

    let out = &global.out;
    let ply_path = out.join("trained.ply");
    io::save_gaussian_ply(&ply_path, &trained)?;
    man.record_output(&ply_path);
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, log.to_csv())?;
    man.record_output(&log_path);

    man.write(out)?;
    println!(
        "train: {} -> {} gaussians after {} steps",
        scene.gaussians.len(),
        trained.gaussians.len(),
        cfg.iters_free + cfg.iters_entropy + cfg.iters_reg
    );
    Ok(())
}

pub fn extract_mesh(args: &ExtractArgs, global: &GlobalArgs, file: &FileConfig) -> Result<()> {
    let mut cfg = file.extract.clone().unwrap_or_default();
    if let Some(l) = args.lambda {
        cfg.level.lambda = l;
    }
    if let Some(g) = args.grid {
        cfg.resolution = g;
    }
    if let Some(t) = args.target_verts {
        cfg.target_vertices = t;
    }
    if let Some(seed) = global.seed {
        cfg.level.seed = seed;
    }

    let scene = io::load_gaussian_ply(&args.scene)?;
    let cams = io::load_cameras(&args.cameras)?;

    let mut man = RunManifest::new("extract-mesh", serde_json::to_value(&cfg)?, cfg.level.seed);
    let (mesh, info) = man.time("extract", || extract::extract_mesh(&scene, &cams, &cfg))?;

    let out = &global.out;
    let mesh_path = out.join("mesh.obj");
    io::save_mesh_obj(&mesh_path, &mesh)?;
    man.record_output(&mesh_path);
    let info_path = out.join("extract_info.json");
    fs::write(&info_path, serde_json::to_string_pretty(&info)? + "\n")?;
    man.record_output(&info_path);

    man.write(out)?;
    println!(
        "extract-mesh: {} vertices, {} faces (level {} from {} surface points)",
        mesh.vertices.len(),
        mesh.faces.len(),
        info.lambda,
        info.fg_points
    );
    Ok(())
}

pub fn bind(args: &BindArgs, global: &GlobalArgs) -> Result<()> {
    let mesh = io::load_mesh_obj(&args.mesh)?;
    let init = args.scene.as_ref().map(io::load_gaussian_ply).transpose()?;

    let config = json!({
        "mesh": args.mesh.display().to_string(),
        "init_scene": args.scene.as_ref().map(|p| p.display().to_string()),
        "n_per_triangle": args.n_per_tri,
    });
    let mut man = RunManifest::new("bind", config, global.seed.unwrap_or(0));
    let bs = man.time("bind", || {
        bind::bind_gaussians(&mesh, args.n_per_tri, init.as_ref())
    })?;

    let out = &global.out;
    let bound_path = out.join("bound.bin");
    io::save_bound_table(&bound_path, &bs)?;
    man.record_output(&bound_path);

    man.write(out)?;
    println!(
        "bind: {} gaussians on {} triangles ({} per triangle)",
        bs.bound.len(),
        mesh.faces.len(),
        args.n_per_tri
    );
    Ok(())
}

pub fn refine(args: &RefineArgs, global: &GlobalArgs, file: &FileConfig) -> Result<()> {
    let mut cfg = file.refine.clone().unwrap_or_default();
    if let Some(it) = args.iters {
        cfg.iters = it;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }

    let mesh = io::load_mesh_obj(&args.mesh)?;
    let bs = io::load_bound_table(&args.bound, &mesh)?;
    let cams = io::load_cameras(&args.cameras)?;
    let images = load_images_dir(&args.images, cams.len())?;

    let mut man = RunManifest::new("refine", serde_json::to_value(&cfg)?, cfg.seed);
    let (refined, log) = man.time("refine", || refine::refine(&bs, &images, &cams, &cfg))?;

    let out = &global.out;
    let mesh_path = out.join("refined_mesh.obj");
    io::save_mesh_obj(&mesh_path, &refined.mesh)?;
    man.record_output(&mesh_path);
    let bound_path = out.join("refined.bin");
    io::save_bound_table(&bound_path, &refined)?;
    man.record_output(&bound_path);
    let log_path = out.join("refine_log.csv");
    fs::write(&log_path, log.to_csv())?;
    man.record_output(&log_path);

    man.write(out)?;
    println!(
        "refine: {} steps on {} bound gaussians ({} rotation fallbacks)",
        cfg.iters,
        refined.bound.len(),
        log.rot2_fallbacks
    );
    Ok(())
}

pub fn render(args: &RenderArgs, global: &GlobalArgs) -> Result<()> {
    let (scene, source) = load_renderable(
        args.scene.as_deref(),
        args.mesh.as_deref(),
        args.bound.as_deref(),
    )?
    .ok_or_else(|| UsageError("render needs --scene or --mesh with --bound".into()))?;
    let cams = io::load_cameras(&args.cameras)?;

    let config = json!({
        "source": source,
        "views": cams.len(),
        "depth": args.depth,
    });
    let mut man = RunManifest::new("render", config, global.seed.unwrap_or(0));

    let out = global.out.clone();
    let depth = args.depth;
    let written = man.time("render", || -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for (i, cam) in cams.iter().enumerate() {
            let img = render_image(&scene, cam);
            let p = out.join(format!("render_{i:03}.png"));
            io::save_png(&p, &img)?;
            paths.push(p);
            if depth {
                let d = render_depth(&scene, cam);
                let base = out.join(format!("depth_{i:03}"));
                io::DepthFile::save(&base, &d)?;
                paths.push(base.with_extension("json"));
                paths.push(base.with_extension("bin"));
            }
        }
        Ok(paths)
    })?;
    for p in &written {
        man.record_output(p);
    }

    man.write(&out)?;
    println!("render: {} views from {} source", cams.len(), source);
    Ok(())
}

pub fn eval(args: &EvalArgs, global: &GlobalArgs, file: &FileConfig) -> Result<()> {
    let samples = args
        .geometry_samples
        .unwrap_or_else(|| file.eval.clone().unwrap_or_default().geometry_samples);
    let seed = global.seed.unwrap_or(0);

    let config = json!({
        "scene": args.scene.as_ref().map(|p| p.display().to_string()),
        "mesh": args.mesh.as_ref().map(|p| p.display().to_string()),
        "bound": args.bound.as_ref().map(|p| p.display().to_string()),
        "ref_mesh": args.ref_mesh.as_ref().map(|p| p.display().to_string()),
        "ref_surface": args.ref_surface.as_ref().map(|p| p.display().to_string()),
        "geometry_samples": samples,
        "seed": seed,
    });
    let mut man = RunManifest::new("eval", config.clone(), seed);
    let mut report = MetricReport::new(config);

    let image_inputs = match (&args.cameras, &args.images) {
        (Some(c), Some(i)) => Some((c.clone(), i.clone())),
        _ => None,
    };
    if let Some((cam_path, img_path)) = image_inputs {
        let (scene, _) = load_renderable(
            args.scene.as_deref(),
            args.mesh.as_deref(),
            args.bound.as_deref(),
        )?
        .ok_or_else(|| {
            UsageError("image metrics need --scene or --mesh with --bound".into())
        })?;
        let cams = io::load_cameras(&cam_path)?;
        let images = load_images_dir(&img_path, cams.len())?;
        man.time("image_metrics", || -> Result<()> {
            for (i, (cam, target)) in cams.iter().zip(&images).enumerate() {
                let rendered = render_image(&scene, cam);
                report.push_view(i, &rendered, target)?;
            }
            Ok(())
        })?;
    }

    let reference = match (&args.ref_mesh, &args.ref_surface) {
        (Some(p), None) => Some(LoadedReference::Mesh(io::load_mesh_obj(p)?)),
        (None, Some(p)) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("read ground truth {}", p.display()))?;
            let gt: synth::GroundTruth = serde_json::from_str(&text)
                .with_context(|| format!("parse ground truth {}", p.display()))?;
            Some(LoadedReference::Surface(gt))
        }
        _ => None,
    };
    if let Some(reference) = &reference {
        let mesh = io::load_mesh_obj(args.mesh.as_ref().expect("clap enforces --mesh"))?;
        let (c, h) = man.time("geometry_metrics", || match reference {
            LoadedReference::Mesh(r) => {
                chamfer_hausdorff(&mesh, &Reference::Mesh(r), samples, seed)
            }
            LoadedReference::Surface(gt) => {
                let f = |p| gt.distance(p);
                chamfer_hausdorff(&mesh, &Reference::Sdf(&f), samples, seed)
            }
        })?;
        report.chamfer = Some(c);
        report.hausdorff = Some(h);
    }

    if report.views.is_empty() && report.chamfer.is_none() {
        return Err(UsageError(
            "nothing to evaluate: pass --cameras/--images for image metrics \
             and/or --ref-mesh/--ref-surface for geometry metrics"
                .into(),
        )
        .into());
    }

    report.timings_ms = man.timings_ms.clone();
    let out = &global.out;
    let json_path = out.join("report.json");
    fs::write(&json_path, report.to_json()? + "\n")?;
    man.record_output(&json_path);
    let csv_path = out.join("report.csv");
    fs::write(&csv_path, report.to_csv())?;
    man.record_output(&csv_path);

    man.write(out)?;
    let mut parts = Vec::new();
    if let Some(p) = report.mean_psnr_db {
        parts.push(format!("psnr {:.2} dB", p));
    }
    if let Some(s) = report.mean_ssim {
        parts.push(format!("ssim {:.4}", s));
    }
    if let Some(c) = report.chamfer {
        parts.push(format!("chamfer {:.3e}", c));
    }
    if let Some(h) = report.hausdorff {
        parts.push(format!("hausdorff {:.3e}", h));
    }
    println!("eval: {}", parts.join(", "));
    Ok(())
}

enum LoadedReference {
    Mesh(gausssurf::TriangleMesh),
    Surface(synth::GroundTruth),
}

fn surface_kind(s: &Surface) -> SurfaceKind {
    match s {
        Surface::Sphere { .. } => SurfaceKind::Sphere,
        Surface::Box { .. } => SurfaceKind::Box,
        Surface::Plane { .. } => SurfaceKind::Plane,
    }
}

fn default_surface(kind: SurfaceKind) -> Surface {
    match kind {
        SurfaceKind::Sphere => Surface::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        },
        SurfaceKind::Box => Surface::Box {
            half_extents: [0.8, 0.6, 0.5],
        },
        SurfaceKind::Plane => Surface::Plane {
            normal: [0.0, 0.0, 1.0],
            offset: 0.0,
            patch_radius: 1.0,
        },
    }
}

/// Scene from either a gaussian PLY or a mesh + binding table, tagged with
/// which source produced it. `Ok(None)` when neither is given.
fn load_renderable(
    scene: Option<&Path>,
    mesh: Option<&Path>,
    bound: Option<&Path>,
) -> Result<Option<(Scene, &'static str)>> {
    if let Some(p) = scene {
        return Ok(Some((io::load_gaussian_ply(p)?, "scene")));
    }
    if let (Some(m), Some(b)) = (mesh, bound) {
        let mesh = io::load_mesh_obj(m)?;
        let bs = io::load_bound_table(b, &mesh)?;
        let (scene, fallbacks) = bs.to_scene()?;
        if fallbacks > 0 {
            eprintln!("note: {fallbacks} gaussians used the in-plane rotation fallback");
        }
        return Ok(Some((scene, "bound")));
    }
    Ok(None)
}

/// PNG targets paired with cameras by sorted file name.
fn load_images_dir(dir: &Path, n_expected: usize) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("read image directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.len() != n_expected {
        anyhow::bail!(
            "{} holds {} PNGs but there are {} cameras",
            dir.display(),
            paths.len(),
            n_expected
        );
    }
    paths.iter().map(|p| Ok(io::load_png(p)?)).collect()
}
