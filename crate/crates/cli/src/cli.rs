//! Command-line interface definition.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, malformed
//! values, impossible combinations), 2 on runtime failures.

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gausssurf", version, about = "Surface-aligned gaussian splatting pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Master RNG seed; overrides any seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to GAUSSSURF_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML configuration file; explicit flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: gaussians on an analytic surface, a
    /// camera ring, rendered target views, and the ground-truth surface.
    Synth(SynthArgs),
    /// Optimize a gaussian scene against target views, then align it to a
    /// well-defined surface with entropy and SDF regularization.
    Train(TrainArgs),
    /// Sample a density level set and reconstruct a watertight triangle
    /// mesh from it.
    #[command(name = "extract-mesh")]
    ExtractMesh(ExtractArgs),
    /// Attach flat gaussians to mesh triangles in barycentric coordinates.
    Bind(BindArgs),
    /// Jointly optimize mesh vertices and bound gaussians against target
    /// views.
    Refine(RefineArgs),
    /// Render color (and optionally depth) images for each camera.
    Render(RenderArgs),
    /// Report image and geometry metrics for a reconstruction.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SurfaceKind {
    Sphere,
    Box,
    Plane,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Surface to sample (default geometry unless the config file refines it).
    #[arg(long, value_enum)]
    pub surface: Option<SurfaceKind>,
    /// Number of gaussians seeded on the surface.
    #[arg(long)]
    pub n_gaussians: Option<usize>,
    /// Number of cameras on the view ring.
    #[arg(long)]
    pub n_views: Option<usize>,
    /// Square view resolution in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Input gaussian scene (PLY).
    #[arg(long)]
    pub scene: PathBuf,
    /// Camera list (JSON).
    #[arg(long)]
    pub cameras: PathBuf,
    /// Directory of target PNGs, paired with cameras by sorted name.
    #[arg(long)]
    pub images: PathBuf,
    /// Phase iteration counts as FREE,ENTROPY,REG.
    #[arg(long, value_parser = parse_iters_triple)]
    pub iters: Option<(usize, usize, usize)>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Input gaussian scene (PLY).
    #[arg(long)]
    pub scene: PathBuf,
    /// Camera list (JSON), used to cast level-set rays and split
    /// foreground from background.
    #[arg(long)]
    pub cameras: PathBuf,
    /// Density level to mesh.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Reconstruction grid resolution along the longest axis.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Vertex budget after decimation.
    #[arg(long = "target-verts")]
    pub target_verts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BindArgs {
    /// Mesh to bind gaussians to (OBJ).
    #[arg(long)]
    pub mesh: PathBuf,
    /// Optional gaussian scene used to initialize colors.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Gaussians per triangle (1, 3, or 6).
    #[arg(long = "n-per-tri", default_value_t = 1)]
    pub n_per_tri: usize,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Mesh the gaussians are bound to (OBJ).
    #[arg(long)]
    pub mesh: PathBuf,
    /// Binding table produced by `bind`.
    #[arg(long)]
    pub bound: PathBuf,
    /// Camera list (JSON).
    #[arg(long)]
    pub cameras: PathBuf,
    /// Directory of target PNGs, paired with cameras by sorted name.
    #[arg(long)]
    pub images: PathBuf,
    /// Optimization steps.
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").args(["scene", "mesh"]).required(true)))]
pub struct RenderArgs {
    /// Free gaussian scene to render (PLY).
    #[arg(long, conflicts_with_all = ["mesh", "bound"])]
    pub scene: Option<PathBuf>,
    /// Mesh with bound gaussians to render (needs --bound).
    #[arg(long, requires = "bound")]
    pub mesh: Option<PathBuf>,
    /// Binding table for --mesh.
    #[arg(long, requires = "mesh")]
    pub bound: Option<PathBuf>,
    /// Camera list (JSON).
    #[arg(long)]
    pub cameras: PathBuf,
    /// Also write raw depth/coverage planes per view.
    #[arg(long)]
    pub depth: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("subject").args(["scene", "mesh"]).required(true).multiple(true)))]
pub struct EvalArgs {
    /// Gaussian scene to render for image metrics (PLY).
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Mesh for geometry metrics; with --bound it is also rendered.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Binding table for --mesh.
    #[arg(long, requires = "mesh", conflicts_with = "scene")]
    pub bound: Option<PathBuf>,
    /// Camera list (JSON) for image metrics.
    #[arg(long, requires = "images")]
    pub cameras: Option<PathBuf>,
    /// Directory of target PNGs for image metrics.
    #[arg(long, requires = "cameras")]
    pub images: Option<PathBuf>,
    /// Reference mesh for Chamfer/Hausdorff (OBJ).
    #[arg(long = "ref-mesh", requires = "mesh")]
    pub ref_mesh: Option<PathBuf>,
    /// Analytic reference surface (ground_truth.json from `synth`).
    #[arg(long = "ref-surface", requires = "mesh", conflicts_with = "ref_mesh")]
    pub ref_surface: Option<PathBuf>,
    /// Surface samples for geometry metrics.
    #[arg(long = "geometry-samples")]
    pub geometry_samples: Option<usize>,
}

fn parse_iters_triple(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated counts: FREE,ENTROPY,REG".into());
    }
    let mut vals = [0usize; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|e| format!("bad iteration count `{p}`: {e}"))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iters_triple_parses() {
        assert_eq!(parse_iters_triple("7000,2000,6000"), Ok((7000, 2000, 6000)));
        assert_eq!(parse_iters_triple("0, 0, 5"), Ok((0, 0, 5)));
        assert!(parse_iters_triple("10").is_err());
        assert!(parse_iters_triple("1,2,x").is_err());
    }

    #[test]
    fn render_requires_a_source() {
        assert!(Cli::try_parse_from(["gausssurf", "render", "--cameras", "c.json"]).is_err());
        assert!(Cli::try_parse_from([
            "gausssurf", "render", "--mesh", "m.obj", "--cameras", "c.json"
        ])
        .is_err());
        assert!(Cli::try_parse_from([
            "gausssurf", "render", "--scene", "s.ply", "--bound", "b.bin", "--cameras", "c.json"
        ])
        .is_err());
        assert!(Cli::try_parse_from([
            "gausssurf", "render", "--scene", "s.ply", "--cameras", "c.json"
        ])
        .is_ok());
    }

    #[test]
    fn global_flags_work_after_subcommand() {
        let cli = Cli::try_parse_from([
            "gausssurf", "synth", "--surface", "sphere", "--seed", "7", "--out", "d",
        ])
        .unwrap();
        assert_eq!(cli.global.seed, Some(7));
        assert_eq!(cli.global.out.to_str(), Some("d"));
    }
}
