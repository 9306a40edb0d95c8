//! The `regionedit` command.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O or format error.
//! Every run writes one JSON manifest line to stderr (and to `--manifest`
//! when given). Settings resolve as flag, then `--config` file, then default.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::attention_mask::{build_mask, mask_stats, verify_mask, AttentionMask, RuleSet};
use crate::bench_eval::{self, BenchConfig, BenchmarkSummary, InstructionMeta, ScoreRecord};
use crate::plan_format::{inspect_plan_bytes, parse_plan, BBox, EditPlan};
use crate::region_grid::{build_layout, perturb_bbox, ImageGeometry, TokenLayout};
use crate::rl_rewards::{stage1_reward, stage2_reward, JudgeScores, Stage1Config, DEFAULT_LAMBDA};
use crate::toy_mmdit::{fnv1a64, FeatureGrid, ToyMmdit, ToyModelConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.1, 0.2, 0.5, 0.7];
const DEFAULT_PATCH_SIZE: u32 = 16;
const DEFAULT_TEXT_TOKENS: usize = 4;
const DEFAULT_STEPS: usize = 8;
const DEFAULT_IMAGE_CHANNELS: usize = 8;
const PERTURB_ATTEMPTS: u64 = 32;

#[derive(Debug, Parser)]
#[command(name = "regionedit", version, about = "Region-aligned editing plans, attention masks and benchmark scoring")]
pub struct Cli {
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Also write the run manifest to this path.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Grade a planner output and print its stage-1 reward.
    PlanValidate(PlanValidateArgs),
    /// Build (or check) a binary attention mask for a layout.
    MaskBuild(MaskBuildArgs),
    /// Aggregate benchmark score records.
    BenchScore(BenchScoreArgs),
    /// Per-field deltas between two `bench-score` summaries.
    BenchCompare(BenchCompareArgs),
    /// Perturb region boxes over a ratio grid and rebuild masks.
    BenchPerturb(BenchPerturbArgs),
    /// Run the toy joint-attention denoiser and report its checksum.
    ToyDenoise(ToyDenoiseArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GeometryArgs {
    /// Image size as WIDTHxHEIGHT in pixels.
    #[arg(long, value_parser = parse_geometry)]
    pub geometry: Option<(u32, u32)>,
    #[arg(long)]
    pub patch_size: Option<u32>,
    /// Tokens per text group: one value for all groups, or one per group.
    #[arg(long, value_delimiter = ',')]
    pub text_tokens: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct PlanValidateArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Also check box bounds against this image size (WIDTHxHEIGHT).
    #[arg(long, value_parser = parse_geometry)]
    pub geometry: Option<(u32, u32)>,
    /// Normalized judge scores TARGET,EFFECT,CONSISTENCY for a stage-2 breakdown.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub judge: Option<Vec<f64>>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskBuildArgs {
    /// Layout JSON file.
    #[arg(long, conflicts_with = "plan")]
    pub layout: Option<PathBuf>,
    /// Planner output; needs --geometry.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub ruleset: Option<String>,
    /// Compare the mask against the per-pair oracle; exit 1 on any mismatch.
    #[arg(long)]
    pub verify: bool,
    /// Check this existing mask file instead of building one.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Mask file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the layout JSON used for the mask here.
    #[arg(long)]
    pub layout_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchScoreArgs {
    /// Score records, JSONL.
    #[arg(long)]
    pub records: PathBuf,
    /// Instruction metadata, JSONL.
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    #[arg(long)]
    pub divisor: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchCompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchPerturbArgs {
    /// Layout JSON files.
    #[arg(long, required = true, num_args = 1..)]
    pub layout: Vec<PathBuf>,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub ratio: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ruleset: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToyDenoiseArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// `standard`, `all-ones`, or any rule-set name.
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed for the synthetic image features and the initial noise.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub geometry: Option<String>,
    pub patch_size: Option<u32>,
    pub text_tokens: Option<Vec<usize>>,
    pub ruleset: Option<String>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub stage1: Option<Stage1Config>,
    pub toy: Option<ToyModelConfig>,
    pub steps: Option<usize>,
    pub image_channels: Option<usize>,
    pub ratios: Option<Vec<f64>>,
    pub normalization_divisor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub inputs: Vec<String>,
    /// `sha256:` digest of the resolved settings.
    pub config_digest: String,
    pub outputs: Vec<String>,
    pub duration_ms: f64,
    pub exit_code: i32,
}

/// Hard failure: bad input, or a validation error with nothing to report.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Io(_) => EXIT_IO,
        }
    }
}

#[derive(Default)]
struct Run {
    inputs: Vec<String>,
    outputs: Vec<String>,
    settings: Value,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>, Failure> {
        self.inputs.push(path.display().to_string());
        fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
    }

    fn read_text(&mut self, path: &Path) -> Result<String, Failure> {
        let bytes = self.read(path)?;
        String::from_utf8(bytes).map_err(|_| Failure::Io(format!("{}: not UTF-8", path.display())))
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), Failure> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        }
        fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    /// Writes `report` to `out` when given, otherwise to stdout.
    fn emit(&mut self, report: &Value, out: Option<&Path>, stdout: &mut dyn Write) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
        match out {
            Some(p) => self.write(p, text.as_bytes()),
            None => stdout.write_all(text.as_bytes()).map_err(|e| Failure::Io(format!("stdout: {e}"))),
        }
    }
}

pub fn parse_geometry(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w: u32 = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: u32 = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err(format!("image size must be positive, got {s:?}"));
    }
    Ok((w, h))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load_config(run: &mut Run, path: Option<&Path>) -> Result<FileConfig, Failure> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = run.read_text(p)?;
            serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
        }
    }
}

fn parse_ruleset(s: &str) -> Result<RuleSet, Failure> {
    s.parse().map_err(|e: crate::attention_mask::ParseRuleSetError| Failure::Io(e.to_string()))
}

struct ResolvedGeometry {
    geometry: ImageGeometry,
    text_tokens: Vec<usize>,
}

fn resolve_geometry(args: &GeometryArgs, cfg: &FileConfig) -> Result<ResolvedGeometry, Failure> {
    let (w, h) = match (args.geometry, cfg.geometry.as_deref()) {
        (Some(g), _) => g,
        (None, Some(s)) => parse_geometry(s).map_err(Failure::Io)?,
        (None, None) => return Err(Failure::Io("--geometry is required with --plan".into())),
    };
    let patch = args.patch_size.or(cfg.patch_size).unwrap_or(DEFAULT_PATCH_SIZE);
    let geometry = ImageGeometry::new(w, h, patch).map_err(|e| Failure::Io(e.to_string()))?;
    let text_tokens = args.text_tokens.clone().or_else(|| cfg.text_tokens.clone()).unwrap_or(vec![DEFAULT_TEXT_TOKENS]);
    Ok(ResolvedGeometry { geometry, text_tokens })
}

fn group_sizes(tokens: &[usize], groups: usize) -> Result<Vec<usize>, Failure> {
    match tokens {
        [n] => Ok(vec![*n; groups]),
        _ if tokens.len() == groups => Ok(tokens.to_vec()),
        _ => Err(Failure::Io(format!("--text-tokens lists {} groups, plan has {groups}", tokens.len()))),
    }
}

fn load_plan(run: &mut Run, path: &Path, geom: &ImageGeometry) -> Result<EditPlan, Failure> {
    let text = run.read_text(path)?;
    parse_plan(&text, geom.size()).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn plan_layout(run: &mut Run, plan_path: &Path, g: &ResolvedGeometry) -> Result<(EditPlan, TokenLayout), Failure> {
    let plan = load_plan(run, plan_path, &g.geometry)?;
    let sizes = group_sizes(&g.text_tokens, plan.region_count() + 1)?;
    let layout = build_layout(&plan, g.geometry, &sizes).map_err(|e| Failure::Invalid(e.to_string()))?;
    Ok((plan, layout))
}

fn load_layout(run: &mut Run, path: &Path) -> Result<TokenLayout, Failure> {
    let text = run.read_text(path)?;
    TokenLayout::from_json(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn plan_validate(
    args: &PlanValidateArgs,
    cfg: &FileConfig,
    run: &mut Run,
    stdout: &mut dyn Write,
) -> Result<i32, Failure> {
    let stage1_cfg = cfg.stage1.clone().unwrap_or_default();
    stage1_cfg.validate().map_err(|e| Failure::Io(e.to_string()))?;
    let lambda = args.lambda.or(cfg.lambda).unwrap_or(DEFAULT_LAMBDA);
    let geometry = args.geometry.or(cfg.geometry.as_deref().map(parse_geometry).transpose().map_err(Failure::Io)?);
    run.settings = json!({ "stage1": stage1_cfg, "lambda": lambda, "geometry": geometry, "judge": args.judge });

    let bytes = run.read(&args.plan)?;
    let mut report = inspect_plan_bytes(&bytes);
    if let (true, Some((w, h))) = (report.is_valid(), geometry) {
        if let Err(e) = parse_plan(&String::from_utf8_lossy(&bytes), crate::plan_format::ImageSize::new(w, h)) {
            report.violations.push(e.to_string());
        }
    }
    let stage1 = stage1_reward(&report, &stage1_cfg);
    let mut out =
        json!({ "valid": report.violations.is_empty() && report.is_valid(), "report": report, "stage1": stage1 });
    if let Some(j) = &args.judge {
        let [t, e, c] = j[..] else {
            return Err(Failure::Io("--judge takes TARGET,EFFECT,CONSISTENCY".into()));
        };
        let scores = JudgeScores::new(t, e, c).map_err(|e| Failure::Io(e.to_string()))?;
        let breakdown = stage2_reward(&scores, &stage1, lambda).map_err(|e| Failure::Io(e.to_string()))?;
        out["stage2"] = serde_json::to_value(breakdown).expect("serializable");
    }
    let valid = out["valid"].as_bool().unwrap_or(false);
    run.emit(&out, args.out.as_deref(), stdout)?;
    Ok(if valid { EXIT_OK } else { EXIT_INVALID })
}

fn mask_build(args: &MaskBuildArgs, cfg: &FileConfig, run: &mut Run, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let rules = parse_ruleset(args.ruleset.as_deref().or(cfg.ruleset.as_deref()).unwrap_or("standard"))?;
    let layout = match (&args.layout, &args.plan) {
        (Some(p), _) => {
            run.settings = json!({ "ruleset": rules.to_string() });
            load_layout(run, p)?
        }
        (None, Some(p)) => {
            let g = resolve_geometry(&args.geometry, cfg)?;
            run.settings = json!({
                "ruleset": rules.to_string(),
                "geometry": g.geometry,
                "text_tokens": g.text_tokens,
            });
            plan_layout(run, p, &g)?.1
        }
        (None, None) => return Err(Failure::Io("one of --layout or --plan is required".into())),
    };
    if let Some(p) = &args.layout_out {
        run.write(p, layout.to_json().as_bytes())?;
    }

    let mask = match &args.mask {
        Some(p) => {
            let bytes = run.read(p)?;
            AttentionMask::decode(&bytes).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?
        }
        None => build_mask(&layout, rules).map_err(|e| Failure::Invalid(e.to_string()))?,
    };
    let bytes = mask.encode();
    if let Some(p) = &args.out {
        run.write(p, &bytes)?;
    }

    let mut out = json!({
        "ruleset": rules.to_string(),
        "tokens": layout.len(),
        "regions": layout.region_count(),
        "stats": mask_stats(&mask),
        "sha256": sha256_hex(&bytes),
    });
    let mut code = EXIT_OK;
    if args.verify {
        let report = verify_mask(&layout, &mask, rules);
        if !report.is_exact() {
            code = EXIT_INVALID;
        }
        out["verify"] = serde_json::to_value(report).expect("serializable");
    }
    run.emit(&out, None, stdout)?;
    Ok(code)
}

fn bench_error(e: bench_eval::BenchError) -> Failure {
    match e {
        bench_eval::BenchError::Parse { .. } | bench_eval::BenchError::Divisor(_) => Failure::Io(e.to_string()),
        _ => Failure::Invalid(e.to_string()),
    }
}

fn bench_score(args: &BenchScoreArgs, cfg: &FileConfig, run: &mut Run, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let divisor = args.divisor.or(cfg.normalization_divisor).unwrap_or(bench_eval::DEFAULT_NORMALIZATION_DIVISOR);
    let bench_cfg = BenchConfig { normalization_divisor: divisor };
    run.settings = json!({ "bench": bench_cfg });

    let text = run.read_text(&args.records)?;
    let records: Vec<ScoreRecord> = bench_eval::parse_jsonl(&text).map_err(bench_error)?;
    let instructions: Vec<InstructionMeta> = match &args.instructions {
        Some(p) => bench_eval::parse_jsonl(&run.read_text(p)?).map_err(bench_error)?,
        None => Vec::new(),
    };
    let summary = bench_eval::summarize(&records, &bench_cfg).map_err(bench_error)?;
    let stats = bench_eval::dataset_stats(&records, &instructions);
    run.emit(&json!({ "summary": summary, "stats": stats }), args.out.as_deref(), stdout)?;
    Ok(EXIT_OK)
}

fn load_summary(run: &mut Run, path: &Path) -> Result<BenchmarkSummary, Failure> {
    let v: Value =
        serde_json::from_str(&run.read_text(path)?).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let inner = v.get("summary").cloned().unwrap_or(v);
    serde_json::from_value(inner).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn bench_compare(args: &BenchCompareArgs, run: &mut Run, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let a = load_summary(run, &args.a)?;
    let b = load_summary(run, &args.b)?;
    if a.metric_version != b.metric_version || a.normalization_divisor != b.normalization_divisor {
        return Err(Failure::Invalid("summaries use different metric definitions".into()));
    }
    run.emit(
        &serde_json::to_value(bench_eval::compare_runs(&a, &b)).expect("serializable"),
        args.out.as_deref(),
        stdout,
    )?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize)]
struct PerturbedRegion {
    original: BBox,
    perturbed: BBox,
    attempts: u64,
    /// Per-coordinate displacement bound in pixels, `(x, y)`.
    bound: (u32, u32),
}

#[derive(Debug, Clone, Serialize)]
struct PerturbedLayout {
    source: String,
    layout_path: String,
    mask_path: String,
    mask_sha256: String,
    identical_to_input: bool,
    regions: Vec<PerturbedRegion>,
}

fn perturb_seed(seed: u64, layout: usize, region: usize, attempt: u64) -> u64 {
    let mut key = Vec::with_capacity(32);
    for v in [seed, layout as u64, region as u64, attempt] {
        key.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&key)
}

fn perturb_layout(
    layout: &TokenLayout,
    ratio: f64,
    seed: u64,
    index: usize,
) -> Result<(TokenLayout, Vec<PerturbedRegion>), Failure> {
    let geom = layout.geometry();
    let mut regions = Vec::with_capacity(layout.region_count());
    for (k, &bbox) in layout.regions().iter().enumerate() {
        let bound = ((ratio * f64::from(bbox.width())) as u32, (ratio * f64::from(bbox.height())) as u32);
        let mut found = None;
        for attempt in 0..PERTURB_ATTEMPTS {
            if let Ok(b) = perturb_bbox(bbox, ratio, geom, perturb_seed(seed, index, k, attempt)) {
                found = Some((b, attempt + 1));
                break;
            }
        }
        let (perturbed, attempts) = found.ok_or_else(|| {
            Failure::Invalid(format!("layout {index} region {}: every perturbation attempt was degenerate", k + 1))
        })?;
        regions.push(PerturbedRegion { original: bbox, perturbed, attempts, bound });
    }
    let boxes = regions.iter().map(|r| r.perturbed).collect();
    let out = TokenLayout::from_regions(*geom, boxes, layout.text_group_sizes().to_vec())
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    Ok((out, regions))
}

fn bench_perturb(
    args: &BenchPerturbArgs,
    cfg: &FileConfig,
    run: &mut Run,
    stdout: &mut dyn Write,
) -> Result<i32, Failure> {
    let ratios = args.ratio.clone().or_else(|| cfg.ratios.clone()).unwrap_or(DEFAULT_RATIOS.to_vec());
    if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Failure::Io(format!("ratio must be finite and non-negative, got {r}")));
    }
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let rules = parse_ruleset(args.ruleset.as_deref().or(cfg.ruleset.as_deref()).unwrap_or("standard"))?;
    run.settings = json!({ "ratios": ratios, "seed": seed, "ruleset": rules.to_string() });

    let layouts = args.layout.iter().map(|p| load_layout(run, p)).collect::<Result<Vec<_>, _>>()?;
    let originals = layouts
        .iter()
        .map(|l| build_mask(l, rules).map(|m| m.encode()).map_err(|e| Failure::Invalid(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;

    let mut report = Vec::with_capacity(ratios.len());
    for &ratio in &ratios {
        let dir = args.out.join(format!("ratio_{ratio}"));
        let built = layouts
            .par_iter()
            .enumerate()
            .map(|(i, l)| {
                let (pl, regions) = perturb_layout(l, ratio, seed, i)?;
                let mask = build_mask(&pl, rules).map_err(|e| Failure::Invalid(e.to_string()))?;
                Ok((pl, regions, mask.encode()))
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let mut entries = Vec::with_capacity(built.len());
        for (i, (pl, regions, bytes)) in built.into_iter().enumerate() {
            let layout_path = dir.join(format!("layout_{i}.json"));
            let mask_path = dir.join(format!("mask_{i}.ramk"));
            run.write(&layout_path, pl.to_json().as_bytes())?;
            run.write(&mask_path, &bytes)?;
            entries.push(PerturbedLayout {
                source: args.layout[i].display().to_string(),
                layout_path: layout_path.display().to_string(),
                mask_path: mask_path.display().to_string(),
                mask_sha256: sha256_hex(&bytes),
                identical_to_input: bytes == originals[i],
                regions,
            });
        }
        report.push(json!({ "ratio": ratio, "layouts": entries }));
    }
    let out = json!({ "seed": seed, "ruleset": rules.to_string(), "ratios": report });
    run.emit(&out, Some(&args.out.join("report.json")), stdout)?;
    run.emit(&json!({ "report": args.out.join("report.json"), "ratio_count": ratios.len() }), None, stdout)?;
    Ok(EXIT_OK)
}

fn toy_denoise(args: &ToyDenoiseArgs, cfg: &FileConfig, run: &mut Run, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let g = resolve_geometry(&args.geometry, cfg)?;
    let toy = cfg.toy.clone().unwrap_or_default();
    toy.validate().map_err(|e| Failure::Io(e.to_string()))?;
    let steps = args.steps.or(cfg.steps).unwrap_or(DEFAULT_STEPS);
    if steps == 0 {
        return Err(Failure::Io("--steps must be at least 1".into()));
    }
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let channels = cfg.image_channels.unwrap_or(DEFAULT_IMAGE_CHANNELS).max(1);
    let mask_name = args.mask.clone().or_else(|| cfg.ruleset.clone()).unwrap_or_else(|| "standard".into());
    run.settings = json!({
        "geometry": g.geometry,
        "text_tokens": g.text_tokens,
        "toy": toy,
        "steps": steps,
        "seed": seed,
        "image_channels": channels,
        "mask": mask_name,
    });

    let (plan, layout) = plan_layout(run, &args.plan, &g)?;
    let mask = if matches!(mask_name.as_str(), "all-ones" | "all_ones" | "full") {
        AttentionMask::full(layout.len())
    } else {
        build_mask(&layout, parse_ruleset(&mask_name)?).map_err(|e| Failure::Invalid(e.to_string()))?
    };
    let model = ToyMmdit::new(toy).map_err(|e| Failure::Io(e.to_string()))?;
    let geom = layout.geometry();
    let image = FeatureGrid::synthetic(geom.rows(), geom.cols(), channels, seed);
    let result =
        model.denoise(&plan, &layout, &image, &mask, seed, steps).map_err(|e| Failure::Invalid(e.to_string()))?;
    let out = json!({
        "mask": mask_name,
        "tokens": layout.len(),
        "regions": layout.region_count(),
        "steps": steps,
        "step_norms": result.step_norms,
        "checksum": format!("{:#018x}", result.checksum),
    });
    run.emit(&out, args.out.as_deref(), stdout)?;
    Ok(EXIT_OK)
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::PlanValidate(_) => "plan-validate",
        Command::MaskBuild(_) => "mask-build",
        Command::BenchScore(_) => "bench-score",
        Command::BenchCompare(_) => "bench-compare",
        Command::BenchPerturb(_) => "bench-perturb",
        Command::ToyDenoise(_) => "toy-denoise",
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let start = Instant::now();
    let mut run = Run::default();
    let result = load_config(&mut run, cli.config.as_deref()).and_then(|cfg| match &cli.command {
        Command::PlanValidate(a) => plan_validate(a, &cfg, &mut run, stdout),
        Command::MaskBuild(a) => mask_build(a, &cfg, &mut run, stdout),
        Command::BenchScore(a) => bench_score(a, &cfg, &mut run, stdout),
        Command::BenchCompare(a) => bench_compare(a, &mut run, stdout),
        Command::BenchPerturb(a) => bench_perturb(a, &cfg, &mut run, stdout),
        Command::ToyDenoise(a) => toy_denoise(a, &cfg, &mut run, stdout),
    });
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code()
        }
    };

    let settings = serde_json::to_vec(&run.settings).expect("settings serialize");
    let manifest = RunManifest {
        subcommand: subcommand_name(&cli.command).to_string(),
        inputs: run.inputs,
        config_digest: format!("sha256:{}", sha256_hex(&settings)),
        outputs: run.outputs,
        duration_ms: start.elapsed().as_secs_f64() * 1e3,
        exit_code: code,
    };
    let line = serde_json::to_string(&manifest).expect("manifest serializes");
    let _ = writeln!(stderr, "{line}");
    if let Some(p) = &cli.manifest {
        if let Err(e) = fs::write(p, line + "\n") {
            let _ = writeln!(stderr, "error: {}: {e}", p.display());
            return EXIT_IO;
        }
    }
    code
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli, stdout, stderr),
        Err(e) => {
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = stderr.write_all(rendered.as_bytes());
                EXIT_IO
            } else {
                let _ = stdout.write_all(rendered.as_bytes());
                EXIT_OK
            }
        }
    }
}
