//! Command-line driver: one binary tying together benchmark generation,
//! registration, evaluation, and gradient self-validation.
//!
//! Configuration is a JSON document with sections `pyramid`,
//! `smoothproper`, `loss`, `optim`, `io`, and `bench`; missing keys take
//! the documented defaults and unknown keys are rejected. Any key can be
//! overridden per invocation with a dotted flag layered over the file,
//! e.g. `--optim.iterations 40`, `--sp.K 0`, `--bench.noise_std 0.02`
//! (`sp` abbreviates `smoothproper`). Values parse as JSON where
//! possible, otherwise as strings.
//!
//! Every command writes byte-identical outputs for identical inputs and
//! configuration; the only exception is the `wall_time` field inside
//! `diagnostics.json`. Exit codes: 0 success, 2 validation or
//! configuration error, 3 numeric failure (non-finite loss or a gradient
//! audit breach), 4 I/O or file-format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adjoint::{
    dot_product_check, grad_check, trace_sp_forward, Payload, Tape, ValueId,
};
use crate::bench::{
    auc_at, benchmark_specs, endpoint_error, synth_pair, tre, LandmarkSet, SynthSpec,
    EVAL_MASK_DILATION,
};
use crate::diffeo::{trace_scaling_squaring, IntegrationConfig};
use crate::energy::{trace_diffusive_reg, trace_lncc, trace_total_loss, LossConfig};
use crate::grid::{
    load_image, read_flow, save_image, warp, write_flow, BitDepth, CoefficientField, Image2D,
    VectorField2D,
};
use crate::registrar::{register, summarize_jacobian, OptimConfig, PyramidConfig};
use crate::smoothproper::{init_basis, SPConfig};
use crate::{Error, Result};

/// Largest relative error any gradient audit row may report before the
/// command fails with a numeric-failure exit code.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Output file locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Default output directory when a command is not given `--out`.
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
        }
    }
}

/// The full run configuration: one section per pipeline stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pyramid: PyramidConfig,
    pub smoothproper: SPConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub io: IoConfig,
    pub bench: SynthSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.smoothproper.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.bench.validate()
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "spreg",
    version,
    about = "Deformable image registration with smoothness-propagated displacement coefficients",
    after_help = "Any configuration key can be overridden with a dotted flag layered over \
                  --config, e.g. `--optim.iterations 40` or `--sp.K 0`."
)]
struct Cli {
    /// JSON run configuration; missing keys take built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the eight-pair synthetic vessel benchmark to disk.
    Synth {
        /// Output directory (default: the io.out_dir config key).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Register a moving image onto a fixed image and write the result bundle.
    Register {
        /// Fixed (reference) grayscale image, PNG or binary PGM.
        fixed: PathBuf,
        /// Moving image to align onto the fixed one.
        moving: PathBuf,
        /// Output directory (default: the io.out_dir config key).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Score registration result bundles against benchmark ground truth.
    Eval {
        /// Directory of result bundles, one subdirectory per pair name.
        results: PathBuf,
        /// Benchmark directory holding manifest.json and the ground truth.
        truth: PathBuf,
    },
    /// Audit the gradients of every differentiable primitive.
    Gradcheck {
        /// Only report primitives whose name contains this substring.
        #[arg(long, value_name = "NAME")]
        primitive: Option<String>,
        /// Corrupt the measured errors to confirm the breach path trips
        /// (negative self-test; the command must then exit nonzero).
        #[arg(long)]
        self_test_corrupt: bool,
    },
}

/// Process entry point: parses arguments, reports errors on stderr, and
/// maps them to the documented exit codes.
pub fn main() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("spreg: {e}");
            e.exit_code()
        }
    }
}

/// Argument-vector entry point (also used by the tests). The first
/// element is the binary name.
pub fn run(args: Vec<String>) -> Result<i32> {
    let (pass, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(&pass) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version surface as clap "errors" but exit 0.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return Ok(code);
        }
    };
    let config = load_config(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Synth { out } => {
            let dir = out.clone().unwrap_or_else(|| config.io.out_dir.clone());
            let manifest = cmd_synth(&config, &dir)?;
            for pair in &manifest.pairs {
                println!(
                    "{}: {}",
                    pair.name,
                    serde_json::to_string(&pair.spec.deformation).expect("serializable enum")
                );
            }
            println!(
                "wrote {} pairs and manifest.json to {}",
                manifest.pairs.len(),
                dir.display()
            );
        }
        Command::Register { fixed, moving, out } => {
            let dir = out.clone().unwrap_or_else(|| config.io.out_dir.clone());
            let diag = cmd_register(fixed, moving, &config, &dir)?;
            println!(
                "final loss {:.6} | mean |u| {:.4} px | min |J| {:.4}",
                diag.final_loss, diag.mean_u_magnitude, diag.jacobian.min_det
            );
            println!(
                "bundle written to {} (u.flo, phi.flo, warped.png, trace.csv, diagnostics.json)",
                dir.display()
            );
        }
        Command::Eval { results, truth } => {
            let report = cmd_eval(results, truth)?;
            print!("{}", render_eval_table(&report));
        }
        Command::Gradcheck {
            primitive,
            self_test_corrupt,
        } => {
            let rows = run_gradient_audit(&config, primitive.as_deref(), *self_test_corrupt)?;
            print!("{}", render_audit(&rows));
            audit_verdict(&rows)?;
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------
// Configuration loading and dotted overrides
// ---------------------------------------------------------------------

/// Short section aliases accepted in override flags.
fn section_alias(section: &str) -> &str {
    if section == "sp" {
        "smoothproper"
    } else {
        section
    }
}

/// Splits an argument vector into clap-bound arguments and dotted
/// configuration overrides (`--section.key value` or
/// `--section.key=value`).
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut pass = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    if let Some(bin) = it.next() {
        pass.push(bin);
    }
    while let Some(arg) = it.next() {
        if let Some(body) = arg.strip_prefix("--") {
            let (key, inline) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), Some(v.to_string())),
                None => (body.to_string(), None),
            };
            if key.contains('.') {
                let value = match inline {
                    Some(v) => v,
                    None => it.next().ok_or_else(|| {
                        Error::Config(format!("override --{key} needs a value"))
                    })?,
                };
                overrides.push((key, value));
                continue;
            }
        }
        pass.push(arg);
    }
    Ok((pass, overrides))
}

/// Sets one dotted path in a JSON tree, creating intermediate objects.
/// Values parse as JSON when possible (numbers, booleans, arrays,
/// objects) and fall back to strings.
fn apply_override(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut segs: Vec<&str> = key.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!(
            "override --{key} has an empty path segment"
        )));
    }
    segs[0] = section_alias(segs[0]);
    let mut node = &mut *tree;
    for seg in &segs[..segs.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override --{key}: '{seg}' does not address an object"
            ))
        })?;
        node = obj
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| {
        Error::Config(format!("override --{key} does not address an object"))
    })?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    obj.insert(segs.last().expect("nonempty path").to_string(), parsed);
    Ok(())
}

/// Applies one dotted-key override (the same syntax as the CLI flags,
/// including the `sp` section alias) to an existing configuration and
/// revalidates. Returns the updated configuration, leaving the input
/// untouched on error.
pub fn set_config_key(config: &RunConfig, key: &str, value: &str) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    apply_override(&mut tree, key, value)?;
    let next: RunConfig =
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    next.validate()?;
    Ok(next)
}

/// Parses a complete JSON configuration document: the top level must be
/// an object, unknown keys are rejected, missing keys take defaults,
/// and the result is validated.
pub fn config_from_json_str(text: &str) -> Result<RunConfig> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if !v.is_object() {
        return Err(Error::Config(
            "the top level must be a JSON object".to_string(),
        ));
    }
    let config: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Reads the optional config file, layers the overrides, and
/// deserializes strictly (unknown keys are rejected; missing keys take
/// defaults). The result is validated.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut tree = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if !v.is_object() {
                return Err(Error::Config(format!(
                    "{}: the top level must be a JSON object",
                    p.display()
                )));
            }
            v
        }
        None => Value::Object(Default::default()),
    };
    for (key, raw) in overrides {
        apply_override(&mut tree, key, raw)?;
    }
    let config: RunConfig =
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------

/// One benchmark pair's manifest entry; paths are relative to the
/// benchmark directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPair {
    pub name: String,
    pub spec: SynthSpec,
    pub fixed: String,
    pub moving: String,
    pub gt_flow: String,
    pub landmarks: String,
    pub mask: String,
}

/// Benchmark directory manifest, including the configuration that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pairs: Vec<ManifestPair>,
    #[serde(default)]
    pub config: RunConfig,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

/// Renders the benchmark derived from the config's `bench` section into
/// `out`: per pair a subdirectory with the image pair, ground-truth
/// flow, landmark correspondences, and the dilated evaluation mask, plus
/// a manifest.json tying them together.
pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<Manifest> {
    let specs = benchmark_specs(&config.bench);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut pairs = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("pair_{i:02}");
        let dir = out.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let pair = synth_pair(spec)?;
        save_image(&dir.join("fixed.png"), &pair.fixed, BitDepth::Sixteen)?;
        save_image(&dir.join("moving.png"), &pair.moving, BitDepth::Sixteen)?;
        write_flow(&dir.join("gt.flo"), &pair.gt_flow)?;
        write_text(&dir.join("landmarks.csv"), &pair.landmarks.to_csv())?;
        let mask = pair.vessel_mask(EVAL_MASK_DILATION)?;
        save_image(&dir.join("mask.png"), &mask, BitDepth::Eight)?;
        pairs.push(ManifestPair {
            name: name.clone(),
            spec: spec.clone(),
            fixed: format!("{name}/fixed.png"),
            moving: format!("{name}/moving.png"),
            gt_flow: format!("{name}/gt.flo"),
            landmarks: format!("{name}/landmarks.csv"),
            mask: format!("{name}/mask.png"),
        });
    }
    let manifest = Manifest {
        pairs,
        config: config.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------
// register
// ---------------------------------------------------------------------

/// The diagnostics side of a registration bundle. `wall_time` (seconds)
/// is the only field that varies between identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mean_u_magnitude: f64,
    pub max_u_magnitude: f64,
    pub final_loss: f64,
    pub jacobian: crate::registrar::JacobianSummary,
    /// True when the coefficient-smoothing layer is disabled (zero
    /// refinement iterations), leaving loss-term regularization only.
    pub sp_disabled: bool,
    pub levels: Vec<crate::registrar::LevelSummary>,
    pub wall_time: f64,
    /// Effective configuration after file and flag overrides; feeding
    /// this back via --config reproduces the bundle.
    pub config: RunConfig,
}

/// Registers `moving` onto `fixed` and writes the result bundle into
/// `out`: u.flo (velocity), phi.flo (integrated displacement),
/// warped.png, trace.csv, diagnostics.json.
pub fn cmd_register(
    fixed: &Path,
    moving: &Path,
    config: &RunConfig,
    out: &Path,
) -> Result<Diagnostics> {
    let start = Instant::now();
    let fixed_img = load_image(fixed)?;
    let moving_img = load_image(moving)?;
    let result = register(
        &fixed_img,
        &moving_img,
        &config.pyramid,
        &config.smoothproper,
        &config.loss,
        &config.optim,
    )?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_flow(&out.join("u.flo"), &result.u)?;
    write_flow(&out.join("phi.flo"), &result.phi)?;
    let warped = warp(&moving_img, &result.phi)?;
    save_image(&out.join("warped.png"), &warped, BitDepth::Sixteen)?;

    let mut csv = String::from("iteration,level,loss,lncc,reg\n");
    for s in &result.loss_trace {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.iteration, s.level, s.total, s.similarity, s.regularizer
        ));
    }
    write_text(&out.join("trace.csv"), &csv)?;

    let diagnostics = Diagnostics {
        mean_u_magnitude: result.u.mean_magnitude(),
        max_u_magnitude: result.u.max_magnitude(),
        final_loss: result
            .loss_trace
            .last()
            .map(|s| s.total)
            .unwrap_or(f64::NAN),
        jacobian: result.jacobian,
        sp_disabled: config.smoothproper.k == 0,
        levels: result.levels.clone(),
        wall_time: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    write_json(&out.join("diagnostics.json"), &diagnostics)?;
    Ok(diagnostics)
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

/// Scores of one pair.
#[derive(Debug, Clone, Serialize)]
pub struct PairEval {
    pub name: String,
    /// Mean landmark registration error, px.
    pub tre_mean: f64,
    /// Mean endpoint error inside the dilated vessel mask, px.
    pub epe_masked: f64,
    pub min_jacobian_det: f64,
    pub frac_nonpositive: f64,
}

/// Aggregate scores over a benchmark run. The success-rate areas are
/// computed over the per-pair mean landmark errors.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub pairs: Vec<PairEval>,
    pub tre_mean: f64,
    pub auc_at_15: f64,
    pub auc_at_25: f64,
    pub auc_at_50: f64,
    pub epe_mean: f64,
    pub min_jacobian_det: f64,
}

/// Scores every pair listed in `truth/manifest.json` against the result
/// bundles under `results/<pair-name>/`, writes `metrics.json` into the
/// results directory, and returns the report.
pub fn cmd_eval(results: &Path, truth: &Path) -> Result<EvalReport> {
    let manifest_path = truth.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    if manifest.pairs.is_empty() {
        return Err(Error::validation("the benchmark manifest lists no pairs"));
    }

    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    let mut pair_tres = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        let gt = read_flow(&truth.join(&entry.gt_flow))?;
        let lm_path = truth.join(&entry.landmarks);
        let landmarks =
            LandmarkSet::from_csv(&fs::read_to_string(&lm_path).map_err(|e| Error::io(&lm_path, e))?)?;
        let mask = load_image(&truth.join(&entry.mask))?;
        let phi = read_flow(&results.join(&entry.name).join("phi.flo"))?;

        let tre_report = tre(&landmarks, &phi)?;
        let epe = endpoint_error(&phi, &gt, Some(&mask))?;
        let jac = summarize_jacobian(&phi)?;
        pair_tres.push(tre_report.mean);
        pairs.push(PairEval {
            name: entry.name.clone(),
            tre_mean: tre_report.mean,
            epe_masked: epe,
            min_jacobian_det: jac.min_det,
            frac_nonpositive: jac.frac_nonpositive,
        });
    }

    let n = pairs.len() as f64;
    let report = EvalReport {
        tre_mean: pair_tres.iter().sum::<f64>() / n,
        auc_at_15: auc_at(&pair_tres, 15)?,
        auc_at_25: auc_at(&pair_tres, 25)?,
        auc_at_50: auc_at(&pair_tres, 50)?,
        epe_mean: pairs.iter().map(|p| p.epe_masked).sum::<f64>() / n,
        min_jacobian_det: pairs
            .iter()
            .map(|p| p.min_jacobian_det)
            .fold(f64::INFINITY, f64::min),
        pairs,
    };
    write_json(&results.join("metrics.json"), &report)?;
    Ok(report)
}

/// Fixed-width text table of an evaluation report.
pub fn render_eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>10} {:>10} {:>10}\n",
        "pair", "TRE px", "EPE px", "min |J|"
    ));
    for p in &report.pairs {
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}\n",
            p.name, p.tre_mean, p.epe_masked, p.min_jacobian_det
        ));
    }
    out.push_str(&format!(
        "mean TRE {:.4} px | AUC@15 {:.4} | AUC@25 {:.4} | AUC@50 {:.4} | mean EPE {:.4} px | min |J| {:.4}\n",
        report.tre_mean,
        report.auc_at_15,
        report.auc_at_25,
        report.auc_at_50,
        report.epe_mean,
        report.min_jacobian_det
    ));
    out
}

// ---------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------

/// Measured gradient errors of one primitive.
#[derive(Debug, Clone)]
pub struct AuditRow {
    pub name: &'static str,
    /// Adjoint-consistency (dot-product) relative error.
    pub dot_rel: f64,
    /// Finite-difference relative error of a scalarized loss.
    pub fd_rel: f64,
}

type Builder = Box<dyn Fn(&mut Tape, &[ValueId]) -> Result<ValueId>>;

fn random_image(rng: &mut impl rand::Rng, w: usize, h: usize, lo: f64, hi: f64) -> Image2D {
    Image2D::from_fn(w, h, |_, _| rng.random_range(lo..hi))
}

fn random_field(rng: &mut impl rand::Rng, w: usize, h: usize, mag: f64) -> VectorField2D {
    let mut u = VectorField2D::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            u.set(x, y, rng.random_range(-mag..mag), rng.random_range(-mag..mag));
        }
    }
    u
}

fn random_coeffs(rng: &mut impl rand::Rng, w: usize, h: usize, m: usize) -> CoefficientField {
    let data = (0..w * h * m).map(|_| rng.random_range(0.8..1.1)).collect();
    CoefficientField::new(w, h, m, data).expect("finite random coefficients")
}

/// The audited primitive table: every tape op plus the composite graphs
/// the optimizer differentiates through (windowed correlation, diffusive
/// penalty, integration, the full unrolled coefficient-smoothing layer,
/// and the end-to-end objective).
fn audit_table(seed: u64) -> Vec<(&'static str, Vec<Payload>, Builder)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let a = Payload::Image(random_image(&mut rng, 12, 10, 0.2, 0.9));
    let b = Payload::Image(random_image(&mut rng, 12, 10, 0.2, 0.9));
    let pos = Payload::Image(random_image(&mut rng, 12, 10, 0.5, 1.5));
    let u = Payload::Vector(random_field(&mut rng, 12, 10, 0.9));
    let v = Payload::Vector(random_field(&mut rng, 12, 10, 0.9));
    let basis = Payload::Basis(init_basis(9, &[1.0]).expect("3x3 unit basis"));
    let coeff = Payload::Coeff(random_coeffs(&mut rng, 8, 7, 9));
    let solve_v = Payload::Vector(random_field(&mut rng, 8, 7, 1.0));

    // End-to-end layer instance: 16x16, nine atoms, six annealed
    // iterations — the configuration the optimizer runs at.
    let layer_cfg = SPConfig {
        m: 9,
        k: 6,
        basis_scales: vec![1.0],
        ..SPConfig::default()
    };
    let layer_schedule = layer_cfg.schedule().expect("default annealing");
    let layer_p = Payload::Coeff(random_coeffs(&mut rng, 16, 16, 9));
    let layer_basis = Payload::Basis(init_basis(9, &[1.0]).expect("3x3 unit basis"));

    let loss_cfg = LossConfig {
        lncc_window: 5,
        ..LossConfig::default()
    };
    let small_flow = Payload::Vector(random_field(&mut rng, 12, 10, 1.2));

    let rows: Vec<(&'static str, Vec<Payload>, Builder)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, ids| t.add(ids[0], ids[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, ids| t.sub(ids[0], ids[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, ids| t.mul(ids[0], ids[1]))),
        ("scale", vec![a.clone()], Box::new(|t, ids| t.scale(ids[0], -2.5))),
        ("square", vec![a.clone()], Box::new(|t, ids| t.square(ids[0]))),
        ("sqrt", vec![pos.clone()], Box::new(|t, ids| t.sqrt(ids[0]))),
        ("div", vec![a.clone(), pos.clone()], Box::new(|t, ids| t.div(ids[0], ids[1]))),
        ("max_const", vec![a.clone()], Box::new(|t, ids| t.max_const(ids[0], 0.05))),
        ("clamp_nonneg", vec![pos.clone()], Box::new(|t, ids| t.clamp_nonneg(ids[0]))),
        ("box_filter", vec![a.clone()], Box::new(|t, ids| t.box_filter(ids[0], 3))),
        ("gaussian_blur", vec![a.clone()], Box::new(|t, ids| t.gaussian_blur(ids[0], 1.7))),
        ("gaussian_blur_field", vec![u.clone()], Box::new(|t, ids| t.gaussian_blur(ids[0], 1.1))),
        ("grad_x", vec![a.clone()], Box::new(|t, ids| t.grad_x(ids[0]))),
        ("grad_y", vec![a.clone()], Box::new(|t, ids| t.grad_y(ids[0]))),
        ("channel_x", vec![u.clone()], Box::new(|t, ids| t.channel_x(ids[0]))),
        ("channel_y", vec![u.clone()], Box::new(|t, ids| t.channel_y(ids[0]))),
        ("pack_vector", vec![a.clone(), b.clone()], Box::new(|t, ids| t.pack_vector(ids[0], ids[1]))),
        ("sum", vec![a.clone()], Box::new(|t, ids| t.sum(ids[0]))),
        ("mean", vec![a.clone()], Box::new(|t, ids| t.mean(ids[0]))),
        ("warp", vec![a.clone(), small_flow.clone()], Box::new(|t, ids| t.warp(ids[0], ids[1]))),
        ("compose", vec![u.clone(), v.clone()], Box::new(|t, ids| t.compose(ids[0], ids[1]))),
        (
            "coeff_to_flow",
            vec![coeff.clone(), basis.clone()],
            Box::new(|t, ids| t.coeff_to_flow(ids[0], ids[1])),
        ),
        (
            "q_solve",
            vec![coeff.clone(), solve_v.clone(), basis.clone()],
            Box::new(|t, ids| t.q_solve(ids[0], ids[1], ids[2], 5.0)),
        ),
        (
            "lncc",
            vec![a.clone(), b.clone()],
            Box::new(move |t, ids| trace_lncc(t, ids[0], ids[1], 5, 1e-5)),
        ),
        (
            "diffusive_reg",
            vec![u.clone()],
            Box::new(|t, ids| trace_diffusive_reg(t, ids[0])),
        ),
        (
            "scaling_squaring",
            vec![u.clone()],
            Box::new(|t, ids| trace_scaling_squaring(t, ids[0], &IntegrationConfig::default())),
        ),
        (
            "sp_forward",
            vec![layer_p, layer_basis],
            Box::new(move |t, ids| {
                Ok(trace_sp_forward(t, ids[0], ids[1], &layer_schedule, &layer_cfg)?.u)
            }),
        ),
        (
            "total_loss",
            vec![a.clone(), b.clone(), small_flow, u.clone()],
            Box::new(move |t, ids| {
                trace_total_loss(t, ids[0], ids[1], ids[2], ids[3], &loss_cfg)
            }),
        ),
    ];
    rows
}

/// Runs the dot-product and finite-difference audits over the primitive
/// table, optionally filtered by a name substring. `corrupt` inflates
/// the measured errors past the tolerance — a self-test proving the
/// breach path reports and exits nonzero.
pub fn run_gradient_audit(
    config: &RunConfig,
    filter: Option<&str>,
    corrupt: bool,
) -> Result<Vec<AuditRow>> {
    let table = audit_table(config.optim.seed.wrapping_add(777));
    let mut rows = Vec::new();
    for (i, (name, inputs, build)) in table.into_iter().enumerate() {
        if let Some(f) = filter {
            if !name.contains(f) {
                continue;
            }
        }
        let dot = dot_product_check(
            |t, ids| build(t, ids),
            &inputs,
            config.optim.seed.wrapping_add(1000 + i as u64),
        )?;
        // Scalarize non-scalar outputs for the finite-difference pass.
        let fd = grad_check(
            |t, ids| {
                let out = build(t, ids)?;
                if t.value(out).as_scalar().is_some() {
                    return Ok(out);
                }
                let sq = t.square(out)?;
                t.mean(sq)
            },
            &inputs,
            1e-5,
            config.optim.seed.wrapping_add(2000 + i as u64),
        )?;
        let (mut dot_rel, mut fd_rel) = (dot.rel_error, fd.max_rel_error);
        if corrupt {
            dot_rel += 10.0 * GRADCHECK_TOLERANCE;
            fd_rel += 10.0 * GRADCHECK_TOLERANCE;
        }
        rows.push(AuditRow {
            name,
            dot_rel,
            fd_rel,
        });
    }
    if rows.is_empty() {
        return Err(Error::validation(match filter {
            Some(f) => format!("no audited primitive matches '{f}'"),
            None => "the audit table is empty".to_string(),
        }));
    }
    Ok(rows)
}

/// Fixed-width text report of an audit run.
pub fn render_audit(rows: &[AuditRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>12} {:>12}  status\n",
        "primitive", "dot rel", "fd rel"
    ));
    for r in rows {
        let ok = r.dot_rel <= GRADCHECK_TOLERANCE && r.fd_rel <= GRADCHECK_TOLERANCE;
        out.push_str(&format!(
            "{:<22} {:>12.3e} {:>12.3e}  {}\n",
            r.name,
            r.dot_rel,
            r.fd_rel,
            if ok { "ok" } else { "BREACH" }
        ));
    }
    out
}

/// Errors with the worst offending row if any audit exceeded the
/// tolerance.
pub fn audit_verdict(rows: &[AuditRow]) -> Result<()> {
    let mut worst: Option<(&AuditRow, f64)> = None;
    for r in rows {
        let e = r.dot_rel.max(r.fd_rel);
        if worst.as_ref().is_none_or(|(_, w)| e > *w) {
            worst = Some((r, e));
        }
    }
    if let Some((row, err)) = worst {
        if err > GRADCHECK_TOLERANCE {
            return Err(Error::GradientAudit {
                primitive: row.name.to_string(),
                rel_error: err,
                tolerance: GRADCHECK_TOLERANCE,
            });
        }
    }
    Ok(())
}
