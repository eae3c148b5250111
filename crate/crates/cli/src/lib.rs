//! Command implementations behind the `tensorcomp` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use tensorcomp::eval::{lambda_sweep, psnr};
use tensorcomp::model::{project_volume, RobustLoss};
use tensorcomp::solver::{compound_baseline, compound_logeuclidean, SolveConfig};
use tensorcomp::synth::{synthesize, PhantomSpec};
use tensorcomp::volume::{
    align_views, chain_to_reference, read_manifest, read_tensor, read_volume, select_reference, write_manifest,
    write_tensor, write_volume, AcquisitionEntry, RigidTransform, ScalarVolume, TransformRecord, View,
};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const VIEWS_MANIFEST: &str = "views.json";
pub const THREADS_ENV: &str = "TENSORCOMP_THREADS";

#[derive(Parser, Debug)]
#[command(name = "tensorcomp", version, about = "Log-Euclidean tensor compounding of directional volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom and its rendered views.
    Synth(SynthArgs),
    /// Chain pairwise transforms to a reference frame, optionally resampling views.
    Align(AlignArgs),
    /// Fit a tensor volume to a set of views.
    Compound(CompoundArgs),
    /// Render a tensor volume along a direction.
    Project(ProjectArgs),
    /// Leave-one-out PSNR over a sweep of regularisation weights.
    Loo(LooArgs),
    /// PSNR between two scalar volumes.
    Psnr(PsnrArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Phantom description (JSON); the built-in phantom when omitted.
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    /// JSON list of N-1 transforms, entry i mapping frame i onto frame i+1.
    pub pairwise: PathBuf,
    /// Reference frame: `auto` (middle frame) or an index.
    #[arg(long = "ref", default_value = "auto")]
    pub reference: String,
    /// Acquisition manifest whose views are resampled onto the reference grid.
    #[arg(long)]
    pub views: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Logeuclid,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Identity,
    Huber,
}

/// Solver settings that can come from flags; unset flags fall back to the
/// config file, then to the defaults.
#[derive(Args, Debug, Default)]
pub struct SolverFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Huber threshold for `--loss huber`.
    #[arg(long)]
    pub huber_c: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompoundArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum, default_value = "logeuclid")]
    pub method: MethodArg,
    #[command(flatten)]
    pub solver: SolverFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    pub tensor: PathBuf,
    /// Comma-separated direction, normalised before use.
    #[arg(long, allow_hyphen_values = true)]
    pub direction: String,
    /// Also export the middle z-slice as an 8-bit PGM.
    #[arg(long)]
    pub pgm: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LooArgs {
    pub manifest: PathBuf,
    #[arg(long, default_value = "0,1,10,100", value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Leave out the unconstrained per-voxel baseline.
    #[arg(long)]
    pub no_baseline: bool,
    /// Dataset label written into the tables.
    #[arg(long, default_value = "dataset")]
    pub dataset: String,
    #[command(flatten)]
    pub solver: SolverFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PsnrArgs {
    pub estimate: PathBuf,
    pub reference: PathBuf,
    /// Peak value; the reference maximum when omitted.
    #[arg(long)]
    pub peak: Option<f64>,
    /// Directory for psnr.json and a run manifest; stdout only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Provenance written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    /// SHA-256 of every input file, keyed by file name.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
    pub wall_time_s: f64,
}

/// Output directory that deletes everything it wrote unless committed.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<String>,
    committed: bool,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    /// Registers `name` and returns its full path.
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn finish(mut self, mut manifest: RunManifest) -> Result<()> {
        manifest.outputs = self.files.clone();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let p = self.path(RUN_MANIFEST);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(self.dir.join(f));
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Hashes a manifest together with every volume it names.
fn hash_manifest_inputs(manifest: &Path, inputs: &mut BTreeMap<String, String>) -> Result<()> {
    inputs.insert(file_label(manifest), sha256_file(manifest)?);
    let entries: Vec<AcquisitionEntry> = serde_json::from_str(&fs::read_to_string(manifest)?)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    for e in entries {
        inputs.insert(e.volume.clone(), sha256_file(&base.join(&e.volume))?);
    }
    Ok(())
}

fn run_manifest(command: &str, config: Value, inputs: BTreeMap<String, String>, seed: Option<u64>, started: Instant) -> RunManifest {
    RunManifest {
        command: command.into(),
        config,
        inputs,
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
        outputs: Vec::new(),
        details: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    }
}

/// Flag > config file > default.
pub fn resolve_config(flags: &SolverFlags, lambda: Option<f64>) -> Result<SolveConfig> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => SolveConfig::default(),
    };
    if let Some(l) = lambda {
        cfg.lambda = l;
    }
    if let Some(d) = flags.delta {
        cfg.delta = d;
    }
    if let Some(n) = flags.max_iterations {
        cfg.max_iterations = n;
    }
    match (flags.loss, flags.huber_c) {
        (Some(LossArg::Identity), None) => cfg.loss = RobustLoss::Identity,
        (Some(LossArg::Identity), Some(_)) => bail!("--huber-c only applies to --loss huber"),
        (Some(LossArg::Huber), Some(c)) => cfg.loss = RobustLoss::huber(c)?,
        (Some(LossArg::Huber), None) => bail!("--loss huber needs --huber-c"),
        (None, Some(c)) => match cfg.loss {
            RobustLoss::Huber { .. } => cfg.loss = RobustLoss::huber(c)?,
            RobustLoss::Identity => bail!("--huber-c only applies to --loss huber"),
        },
        (None, None) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_direction(text: &str) -> Result<Vector3<f64>> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("direction {text:?} is not a comma-separated triple"))?;
    if parts.len() != 3 {
        bail!("direction {text:?} needs exactly three components");
    }
    Ok(tensorcomp::volume::unit_direction(Vector3::new(parts[0], parts[1], parts[2]))?)
}

/// Loads views and resamples them onto the middle frame if any still carries
/// a transform.
fn load_aligned(manifest: &Path) -> Result<(Vec<View>, Option<usize>)> {
    let views = read_manifest(manifest).with_context(|| format!("loading views from {}", manifest.display()))?;
    if views.iter().all(|v| v.geometry.transform.is_identity(1e-12)) {
        return Ok((views, None));
    }
    let reference = select_reference(views.len())?;
    Ok((align_views(&views, reference)?, Some(reference)))
}

/// Middle z-slice as binary PGM, min-max windowed over valid voxels.
/// Returns the image and the window.
pub fn mid_slice_pgm(vol: &ScalarVolume) -> (Vec<u8>, usize, f32, f32) {
    let g = vol.grid();
    let [nx, ny, nz] = g.dims;
    let k = nz / 2;
    let idx: Vec<usize> = (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).map(|(x, y)| g.index(x, y, k)).collect();
    let valid = idx.iter().filter(|&&j| vol.is_valid(j)).map(|&j| vol.data()[j]);
    let (lo, hi) = valid.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for &j in &idx {
        let v = if !vol.is_valid(j) || hi <= lo {
            0
        } else {
            (((vol.data()[j] - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
        };
        out.push(v);
    }
    (out, k, lo, hi)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let started = Instant::now();
    let mut inputs = BTreeMap::new();
    let spec: PhantomSpec = match &args.spec {
        Some(p) => {
            inputs.insert(file_label(p), sha256_file(p)?);
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing phantom spec {}", p.display()))?
        }
        None => PhantomSpec::default(),
    };
    spec.validate().context("invalid phantom spec")?;
    let synth = synthesize(&spec)?;

    let mut out = Outputs::create(&args.out)?;
    write_tensor(&synth.truth, out.path("truth.cvol"))?;
    let mut entries = Vec::with_capacity(synth.views.len());
    for (i, v) in synth.views.iter().enumerate() {
        let name = format!("view{i:02}.cvol");
        write_volume(&v.volume, out.path(&name))?;
        let d = v.geometry.direction();
        entries.push(AcquisitionEntry {
            volume: name,
            direction: [d[0], d[1], d[2]],
            transform: TransformRecord::from(&v.geometry.transform),
        });
    }
    write_manifest(&entries, out.path(VIEWS_MANIFEST))?;
    out.finish(run_manifest("synth", serde_json::to_value(&spec)?, inputs, spec.seed, started))
}

#[derive(Serialize)]
struct AlignedTransform {
    frame: usize,
    #[serde(flatten)]
    transform: TransformRecord,
}

pub fn cmd_align(args: &AlignArgs) -> Result<()> {
    let started = Instant::now();
    let mut inputs = BTreeMap::new();
    inputs.insert(file_label(&args.pairwise), sha256_file(&args.pairwise)?);
    let records: Vec<TransformRecord> = serde_json::from_str(
        &fs::read_to_string(&args.pairwise).with_context(|| format!("reading {}", args.pairwise.display()))?,
    )
    .context("parsing pairwise transforms")?;
    let pairwise: Vec<RigidTransform> = records.iter().map(|r| r.to_transform()).collect::<tensorcomp::Result<_>>()?;
    let frames = pairwise.len() + 1;
    let reference = match args.reference.as_str() {
        "auto" => select_reference(frames)?,
        s => {
            let r: usize = s.parse().with_context(|| format!("--ref must be `auto` or an index, got {s:?}"))?;
            if r >= frames {
                bail!("--ref {r} is out of range for {frames} frames");
            }
            r
        }
    };
    let chained = chain_to_reference(&pairwise, reference, None)?;

    let views = match &args.views {
        Some(m) => {
            hash_manifest_inputs(m, &mut inputs)?;
            let v = read_manifest(m)?;
            if v.len() != frames {
                bail!("{} pairwise transforms imply {frames} volumes, but the manifest lists {}", pairwise.len(), v.len());
            }
            Some(v)
        }
        None => None,
    };

    let mut out = Outputs::create(&args.out)?;
    let table: Vec<AlignedTransform> = chained
        .iter()
        .enumerate()
        .map(|(frame, t)| AlignedTransform {
            frame,
            transform: TransformRecord::from(t),
        })
        .collect();
    out.write_json("transforms.json", &table)?;
    if let Some(mut views) = views {
        for (v, t) in views.iter_mut().zip(&chained) {
            v.geometry.transform = *t;
        }
        let aligned = align_views(&views, reference)?;
        let mut entries = Vec::with_capacity(aligned.len());
        for (i, v) in aligned.iter().enumerate() {
            let name = format!("aligned{i:02}.cvol");
            write_volume(&v.volume, out.path(&name))?;
            let d = v.geometry.direction();
            entries.push(AcquisitionEntry {
                volume: name,
                direction: [d[0], d[1], d[2]],
                transform: TransformRecord::identity(),
            });
        }
        write_manifest(&entries, out.path(VIEWS_MANIFEST))?;
    }
    let config = json!({ "reference": reference, "resampled": args.views.is_some() });
    out.finish(run_manifest("align", config, inputs, None, started))
}

pub fn cmd_compound(args: &CompoundArgs) -> Result<()> {
    let started = Instant::now();
    let mut inputs = BTreeMap::new();
    hash_manifest_inputs(&args.manifest, &mut inputs)?;
    if let Some(c) = &args.solver.config {
        inputs.insert(file_label(c), sha256_file(c)?);
    }
    let cfg = resolve_config(&args.solver, args.lambda)?;
    let (views, resampled_to) = load_aligned(&args.manifest)?;

    let mut out = Outputs::create(&args.out)?;
    let config = match args.method {
        MethodArg::Logeuclid => {
            let (tensors, report) = compound_logeuclidean(&views, &cfg).context("log-Euclidean fit failed")?;
            write_tensor(&tensors, out.path("tensor.cvol"))?;
            out.write_json("report.json", &report)?;
            json!({ "method": args.method, "solver": cfg, "resampled_to": resampled_to })
        }
        MethodArg::Baseline => {
            let fit = compound_baseline(&views).context("baseline fit failed")?;
            write_tensor(&fit.to_entry_volume()?, out.path("entries.cvol"))?;
            out.write_json("definiteness.json", &fit.report())?;
            json!({ "method": args.method, "resampled_to": resampled_to })
        }
    };
    out.finish(run_manifest("compound", config, inputs, None, started))
}

pub fn cmd_project(args: &ProjectArgs) -> Result<()> {
    let started = Instant::now();
    let direction = parse_direction(&args.direction)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(file_label(&args.tensor), sha256_file(&args.tensor)?);
    let tensors = read_tensor(&args.tensor)?;
    let projection = project_volume(&tensors, &direction)?;

    let mut out = Outputs::create(&args.out)?;
    write_volume(&projection, out.path("projection.cvol"))?;
    let mut details = None;
    if args.pgm {
        let (bytes, slice, lo, hi) = mid_slice_pgm(&projection);
        let p = out.path("projection_mid.pgm");
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        details = Some(json!({ "pgm": { "axis": "z", "slice": slice, "window_min": lo, "window_max": hi } }));
    }
    let config = json!({ "direction": [direction[0], direction[1], direction[2]], "pgm": args.pgm });
    let mut manifest = run_manifest("project", config, inputs, None, started);
    manifest.details = details;
    out.finish(manifest)
}

pub fn cmd_loo(args: &LooArgs) -> Result<()> {
    let started = Instant::now();
    let mut inputs = BTreeMap::new();
    hash_manifest_inputs(&args.manifest, &mut inputs)?;
    if let Some(c) = &args.solver.config {
        inputs.insert(file_label(c), sha256_file(c)?);
    }
    let cfg = resolve_config(&args.solver, None)?;
    let (views, resampled_to) = load_aligned(&args.manifest)?;
    if views.len() < 2 {
        bail!("leave-one-out needs at least 2 views, the manifest lists {}", views.len());
    }
    let table = lambda_sweep(&args.dataset, &views, &args.lambdas, &cfg, !args.no_baseline)?;

    let mut out = Outputs::create(&args.out)?;
    out.write_json("loo.json", &table)?;
    out.write_text("loo.csv", &table.to_csv()?)?;
    let config = json!({
        "lambdas": args.lambdas,
        "baseline": !args.no_baseline,
        "dataset": args.dataset,
        "solver": cfg,
        "resampled_to": resampled_to,
    });
    out.finish(run_manifest("loo", config, inputs, None, started))
}

pub fn cmd_psnr(args: &PsnrArgs) -> Result<()> {
    let started = Instant::now();
    let est = read_volume(&args.estimate)?;
    let reference = read_volume(&args.reference)?;
    let result = psnr(&est, &reference, args.peak)?;
    println!("{}", serde_json::to_string(&result)?);
    if let Some(dir) = &args.out {
        let mut inputs = BTreeMap::new();
        inputs.insert(format!("estimate:{}", file_label(&args.estimate)), sha256_file(&args.estimate)?);
        inputs.insert(format!("reference:{}", file_label(&args.reference)), sha256_file(&args.reference)?);
        let mut out = Outputs::create(dir)?;
        out.write_json("psnr.json", &result)?;
        let config = json!({ "peak": args.peak, "peak_convention": tensorcomp::eval::PEAK_CONVENTION });
        out.finish(run_manifest("psnr", config, inputs, None, started))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Align(a) => cmd_align(a),
        Command::Compound(a) => cmd_compound(a),
        Command::Project(a) => cmd_project(a),
        Command::Loo(a) => cmd_loo(a),
        Command::Psnr(a) => cmd_psnr(a),
    }
}

/// Sizes the global thread pool from the environment, if set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
