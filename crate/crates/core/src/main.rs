use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use spinereg::config::RegistrationConfig;
use spinereg::field::DisplacementField;
use spinereg::io;
use spinereg::metrics::{MetricReport, RegistrationReport};
use spinereg::objective::Preset;
use spinereg::optimizer::register;
use spinereg::phantom::{generate_pair, PhantomSpec};
use spinereg::rigidity::RigidTransform;
use spinereg::volume::{LabelVolume, Volume};
use spinereg::Result;

#[derive(Parser)]
#[command(name = "spinereg", version, about = "Rigidity-preserving deformable registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving image to a fixed image.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Body labels of the moving image.
        #[arg(long)]
        labels: PathBuf,
        /// Fixed-image labels, used only for the DSC columns of the report.
        #[arg(long)]
        labels_fixed: Option<PathBuf>,
        #[arg(long, default_value = "baseline")]
        preset: Preset,
        /// Key/value overrides applied on top of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 1 gives the reproducible single-threaded mode.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Generate a synthetic phantom pair.
    Phantom {
        /// Phantom spec file; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a displacement field.
    Metrics {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        labels_moving: PathBuf,
        #[arg(long)]
        labels_fixed: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample a volume under a rigid transform of voxel coordinates.
    ApplyRigid {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rotation axis, three numbers.
        #[arg(long, num_args = 3, default_values_t = [0.0, 0.0, 1.0], allow_negative_numbers = true)]
        axis: Vec<f64>,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        angle_deg: f64,
        /// Shift in voxels, three numbers.
        #[arg(long, num_args = 3, default_values_t = [0.0, 0.0, 0.0], allow_negative_numbers = true)]
        translation: Vec<f64>,
        /// Treat the input as UINT16 labels and use nearest-neighbor sampling.
        #[arg(long)]
        labels: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Register {
            fixed,
            moving,
            labels,
            labels_fixed,
            preset,
            config,
            out_field,
            out_report,
            seed,
            threads,
        } => {
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| spinereg::Error::InvalidValue(e.to_string()))?;
            }
            let mut cfg = RegistrationConfig::from_preset(preset);
            if let Some(path) = config {
                cfg = cfg.overlay(&fs::read_to_string(path)?)?;
            }
            if let Some(s) = seed {
                cfg.settings.seed = s;
            }
            let fixed = io::read_volume(&fixed)?;
            let moving = io::read_volume(&moving)?;
            let labels = io::read_labels(&labels)?;
            let labels_fixed = labels_fixed.map(|p| io::read_labels(&p)).transpose()?;
            let result = register(&fixed, &moving, &labels, &cfg.weights, &cfg.settings)?;
            let grid = *result.problem.grid();
            let labels_fixed = labels_fixed.map(|l| l.resample_to(&grid));
            io::write_field(&out_field, &result.displacement.0)?;
            let metrics = MetricReport::compute(
                &result.problem.labels,
                labels_fixed.as_ref(),
                &result.displacement,
                result.wall_seconds,
            )?;
            let report = RegistrationReport::new(metrics, result.iterations, &result.history);
            fs::write(out_report, report.to_json()?)?;
        }
        Command::Phantom { spec, out_dir } => {
            let spec = match spec {
                Some(p) => PhantomSpec::parse(&fs::read_to_string(p)?)?,
                None => PhantomSpec::default(),
            };
            let pair = generate_pair(&spec)?;
            fs::create_dir_all(&out_dir)?;
            let at = |name: &str| out_dir.join(name);
            io::write_volume(&at("fixed.mhd"), &pair.fixed)?;
            io::write_volume(&at("moving.mhd"), &pair.moving)?;
            io::write_labels(&at("labels_moving.mhd"), &pair.labels_moving)?;
            io::write_labels(&at("labels_fixed.mhd"), &pair.labels_fixed)?;
            io::write_field(&at("gt_field.mhd"), &pair.gt.0)?;
        }
        Command::Metrics {
            field,
            labels_moving,
            labels_fixed,
            out,
        } => {
            let started = Instant::now();
            let phi = DisplacementField(io::read_field(&field)?);
            let labels = io::read_labels(&labels_moving)?;
            let labels_fixed = labels_fixed.map(|p| io::read_labels(&p)).transpose()?;
            let mut report = MetricReport::compute(&labels, labels_fixed.as_ref(), &phi, 0.0)?;
            report.wall_seconds = started.elapsed().as_secs_f64();
            fs::write(out, report.to_json()?)?;
        }
        Command::ApplyRigid {
            input,
            out,
            axis,
            angle_deg,
            translation,
            labels,
        } => apply_rigid(&input, &out, &axis, angle_deg, &translation, labels)?,
    }
    Ok(())
}

/// Output voxel `x` takes the input value at `T(x)`, with `T` rotating about
/// the grid center.
fn apply_rigid(input: &Path, out: &Path, axis: &[f64], angle_deg: f64, shift: &[f64], labels: bool) -> Result<()> {
    let axis = [axis[0], axis[1], axis[2]];
    if angle_deg != 0.0 && axis.iter().all(|&a| a == 0.0) {
        return Err(spinereg::Error::InvalidValue("rotation axis must be nonzero".into()));
    }
    let shift = [shift[0], shift[1], shift[2]];
    if labels {
        let src = io::read_labels(input)?;
        let g = *src.grid();
        let t = transform(&g.dims, axis, angle_deg, shift);
        let warped = LabelVolume::from_fn(g, |x, y, z| {
            let p = t.apply([x as f64, y as f64, z as f64]);
            let c: [usize; 3] = std::array::from_fn(|a| p[a].round().clamp(0.0, (g.dims[a] - 1) as f64) as usize);
            src.get(c[0], c[1], c[2])
        });
        io::write_labels(out, &warped)
    } else {
        let src = io::read_volume(input)?;
        let g = *src.grid();
        let t = transform(&g.dims, axis, angle_deg, shift);
        let warped = Volume::from_fn(g, |x, y, z| src.sample_trilinear(t.apply([x as f64, y as f64, z as f64])));
        io::write_volume(out, &warped)
    }
}

fn transform(dims: &[usize; 3], axis: [f64; 3], angle_deg: f64, shift: [f64; 3]) -> RigidTransform {
    let center = std::array::from_fn(|a| (dims[a] - 1) as f64 / 2.0);
    if angle_deg == 0.0 {
        return RigidTransform::about(center, [0.0, 0.0, 1.0], 0.0, shift);
    }
    RigidTransform::about(center, axis, angle_deg.to_radians(), shift)
}
