use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use strokeforge::case::{read_case, write_case, CaseLoader, DirectoryLoader};
use strokeforge::error::Error;
use strokeforge::geometry::{heatmap, LesionMask};
use strokeforge::gradsuite::{gradient_suite, GradCheckResult, GRAD_TOLERANCE};
use strokeforge::nn::Checkpoint;
use strokeforge::perfusion::{analyze_curve, sample_frames, sample_indices, SAMPLED_FRAMES};
use strokeforge::phantom::{generate_with_layout, phantom_attributes, PhantomSpec};
use strokeforge::pipeline::{
    cross_validate_with, dice_score, history_csv, mean_dice, prepare_case, CaseScore, PipelineState, PreparedCase,
    TrainConfig, Variant,
};
use strokeforge::volume::{read_volume, write_volume};

use crate::error::{CliError, CliResult};
use crate::overlay::emit_overlay;
use crate::report::{
    file_checksums, ordering, sha256_hex, tree_checksums, write_json, AblationEntry, AblationReport, Checksums,
    RunReport,
};
use crate::{
    AblateArgs, Command, ConfigOverrides, EvaluateArgs, GradcheckArgs, InferArgs, PhantomGenArgs, PreprocessArgs,
    TrainArgs,
};

pub const REPORT: &str = "report.json";
pub const LOSSES_CSV: &str = "losses.csv";
pub const CONFIG_ECHO: &str = "config.toml";

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::PhantomGen(a) => phantom_gen(&a),
        Command::Preprocess(a) => preprocess(&a),
        Command::Train(a) => train(&a),
        Command::Infer(a) => infer(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::validation(format!("cannot create --out {}: {e}", dir.display())))
}

fn require_dir(flag: &str, dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{flag} {} is not a directory", dir.display())))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))
}

/// Configuration file (or desk defaults), then `STROKEFORGE_SEED`, then
/// flags.
pub fn load_config(path: Option<&Path>, variant: Option<&str>, overrides: &ConfigOverrides) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::validation(format!("--config {} does not exist", p.display())));
            }
            TrainConfig::load(p)?
        }
        None => TrainConfig::desk(),
    };
    cfg.apply_env()?;
    if let Some(v) = variant {
        cfg = cfg.with_variant(Variant::parse(v)?);
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(e) = overrides.total_epochs {
        cfg = cfg.with_epochs(e);
    }
    if let Some(b) = overrides.batch_size {
        cfg.batch_size = b;
    }
    if let Some(f) = overrides.folds {
        cfg.folds = f;
    }
    if let Some(lr) = overrides.base_lr {
        cfg.base_lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_prepared(data: &Path, cfg: &TrainConfig) -> CliResult<Vec<PreparedCase>> {
    require_dir("--data", data)?;
    let records = DirectoryLoader::new(data).load_all()?;
    if records.is_empty() {
        return Err(CliError::validation(format!("--data {} holds no case directories", data.display())));
    }
    log::info!("loaded {} cases from {}", records.len(), data.display());
    Ok(records.iter().map(|r| prepare_case(r, cfg)).collect::<Result<_, _>>()?)
}

fn overlay_error(e: CliError) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn phantom_gen(a: &PhantomGenArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::validation(format!("--spec {}: {e}", p.display())))?;
            toml::from_str::<PhantomSpec>(&text).map_err(|e| CliError::validation(format!("--spec {}: {e}", p.display())))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(n) = a.n_cases {
        spec.n_cases = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    create_out(&a.out)?;
    for i in 0..spec.n_cases {
        let (case, layout) = generate_with_layout(&spec, i)?;
        write_case(&a.out.join(&case.case_id), &case, phantom_attributes(&spec, i, &layout))?;
    }
    let echo = toml::to_string(&spec).map_err(|e| CliError::internal(e.to_string()))?;
    write_file(&a.out.join("phantom_spec.toml"), echo)?;
    println!("wrote {} cases to {}", spec.n_cases, a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct PreprocessEntry {
    case_id: String,
    onset: usize,
    peak: usize,
    end: usize,
    sampled_indices: Vec<usize>,
    /// No enhancement was found and the full acquisition was sampled.
    fallback: bool,
}

#[derive(Debug, Serialize)]
struct PreprocessReport {
    cases: Vec<PreprocessEntry>,
    input_checksums: BTreeMap<String, String>,
}

fn preprocess(a: &PreprocessArgs) -> CliResult<()> {
    require_dir("--data", &a.data)?;
    let records = DirectoryLoader::new(&a.data).load_all()?;
    create_out(&a.out)?;
    let mut cases = Vec::with_capacity(records.len());
    for r in &records {
        let (curve, fallback) = analyze_curve(&r.ctp)?;
        let p = curve.points;
        let dir = a.out.join(&r.case_id);
        create_out(&dir)?;
        let mut csv = String::from("frame_index,raw,smoothed\n");
        for (i, (raw, sm)) in curve.values.iter().zip(&curve.smoothed).enumerate() {
            csv.push_str(&format!("{i},{raw},{sm}\n"));
        }
        write_file(&dir.join("curve.csv"), csv)?;
        let indices = sample_indices(p.onset, p.end, SAMPLED_FRAMES);
        let names: Vec<String> = indices.iter().map(|i| format!("frame_{i}")).collect();
        write_volume(&dir.join("sampled.sfv"), &sample_frames(&r.ctp, p.onset, p.end, SAMPLED_FRAMES)?, &names)
            .map_err(Error::from)?;
        cases.push(PreprocessEntry {
            case_id: r.case_id.clone(),
            onset: p.onset,
            peak: p.peak,
            end: p.end,
            sampled_indices: indices,
            fallback,
        });
    }
    let report = PreprocessReport {
        cases,
        input_checksums: tree_checksums(&a.data)?,
    };
    write_json(&a.out.join("preprocess.json"), &report)?;
    println!("preprocessed {} cases into {}", records.len(), a.out.display());
    Ok(())
}

/// Checksums for a finished run: configuration, the data tree, and every
/// output written so far except the report.
fn run_checksums(cfg: &TrainConfig, data: &Path, out: &Path) -> CliResult<Checksums> {
    let mut outputs = tree_checksums(out)?;
    outputs.remove(REPORT);
    Ok(Checksums {
        config: sha256_hex(cfg.to_toml()?.as_bytes()),
        inputs: tree_checksums(data)?,
        outputs,
    })
}

/// Cross-validate `cfg` on `cases`, writing checkpoints and overlays when
/// asked, then the loss CSV, configuration echo and report.
fn cv_run(command: &str, cfg: &TrainConfig, cases: &[PreparedCase], data: &Path, out: &Path, artifacts: bool) -> CliResult<RunReport> {
    create_out(out)?;
    write_file(&out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    let overlays = out.join("overlays");
    if artifacts {
        create_out(&overlays)?;
    }
    let t0 = Instant::now();
    let cv = cross_validate_with(cases, cfg, |state, val, fold| {
        log::info!("{} fold {}: mean dice {:.4}", cfg.variant.name(), fold.fold, fold.mean_dice);
        if !artifacts {
            return Ok(());
        }
        state.to_checkpoint()?.save(&out.join(format!("fold_{}.ckpt", fold.fold)))?;
        for (c, inf) in val.iter().zip(state.infer_batch(&val.iter().collect::<Vec<_>>())?) {
            let Some(t) = &c.targets else { continue };
            let base = inf.dwi_g.as_ref().unwrap_or(&t.dwi);
            let path = overlays.join(format!("fold{}_{}.png", fold.fold, c.case_id));
            emit_overlay(&path, base, &t.mask, &inf.mask).map_err(overlay_error)?;
        }
        Ok(())
    })?;
    let wall = t0.elapsed().as_secs_f64();
    write_file(&out.join(LOSSES_CSV), history_csv(&cv.history))?;
    let report = RunReport::from_cv(command, &cv, wall, run_checksums(cfg, data, out)?);
    write_json(&out.join(REPORT), &report)?;
    Ok(report)
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref(), a.variant.as_deref(), &a.overrides)?;
    let cases = load_prepared(&a.data, &cfg)?;
    let report = cv_run("train", &cfg, &cases, &a.data, &a.out, true)?;
    for f in &report.folds {
        println!("fold {}: dice {:.4}", f.fold, f.mean_dice);
    }
    println!("mean dice {:.4} ({} variant, seed {}, {:.0} s)", report.mean_dice, report.variant.name(), report.seed, report.wall_clock_seconds);
    Ok(())
}

#[derive(Debug, Serialize)]
struct InferEntry {
    case_id: String,
    predicted_voxels: usize,
    /// Present when the case directory holds a ground-truth mask.
    dice: Option<f64>,
}

#[derive(Debug, Serialize)]
struct InferReport {
    checkpoint_sha256: String,
    variant: Variant,
    cases: Vec<InferEntry>,
}

fn infer(a: &InferArgs) -> CliResult<()> {
    if !a.checkpoint.is_file() {
        return Err(CliError::validation(format!("--checkpoint {} does not exist", a.checkpoint.display())));
    }
    let state = PipelineState::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    create_out(&a.out)?;
    let mut entries = Vec::new();
    for dir in &a.case {
        require_dir("--case", dir)?;
        let record = read_case(dir)?;
        let inf = state.infer(&prepare_case(&record, &state.config)?)?;
        let case_out = a.out.join(&record.case_id);
        create_out(&case_out)?;
        let put = |name: &str, v: &strokeforge::tensor::NdArray, channels: &[String]| -> CliResult<()> {
            write_volume(&case_out.join(format!("{name}.sfv")), v, channels).map_err(|e| CliError::from(Error::from(e)))
        };
        put("mask", &inf.mask.to_array(), &[])?;
        put("seg_prob", &inf.seg_prob, &["background".to_string(), "lesion".to_string()])?;
        for (name, v) in [("dwi_g", &inf.dwi_g), ("map_pre", &inf.map_pre), ("map_prob", &inf.map_prob)] {
            if let Some(v) = v {
                put(name, v, &[])?;
            }
        }
        let empty = LesionMask::new(record.height(), record.width(), vec![false; record.height() * record.width()])?;
        let truth = record.mask.as_ref().unwrap_or(&empty);
        let base = inf.dwi_g.as_ref().or(record.dwi.as_ref()).unwrap_or(&record.maps.cbf);
        emit_overlay(&case_out.join("overlay.png"), base, truth, &inf.mask)?;
        let dice = record.mask.as_ref().map(|m| dice_score(&inf.mask, m)).transpose()?;
        entries.push(InferEntry {
            case_id: record.case_id.clone(),
            predicted_voxels: inf.mask.count(),
            dice,
        });
        match dice {
            Some(d) => println!("{}: {} lesion pixels, dice {d:.4}", record.case_id, inf.mask.count()),
            None => println!("{}: {} lesion pixels", record.case_id, inf.mask.count()),
        }
    }
    let report = InferReport {
        checkpoint_sha256: crate::report::sha256_file(&a.checkpoint)?,
        variant: state.variant(),
        cases: entries,
    };
    write_json(&a.out.join("infer.json"), &report)
}

/// `name → mask.sfv` for every subdirectory of `root` that holds one.
fn mask_dirs(flag: &str, root: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    require_dir(flag, root)?;
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let mask = path.join("mask.sfv");
        if mask.is_file() {
            out.insert(path.file_name().expect("directory entry").to_string_lossy().into_owned(), mask);
        }
    }
    Ok(out)
}

fn read_mask(path: &Path) -> CliResult<LesionMask> {
    let v = read_volume(path).map_err(Error::from)?;
    LesionMask::from_array(&v.data).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    cases: Vec<CaseScore>,
    mean_dice: f64,
    pred_checksums: BTreeMap<String, String>,
    truth_checksums: BTreeMap<String, String>,
}

fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let truth = mask_dirs("--truth", &a.truth)?;
    let pred = mask_dirs("--pred", &a.pred)?;
    if truth.is_empty() {
        return Err(CliError::validation(format!("--truth {} holds no <case>/mask.sfv", a.truth.display())));
    }
    let params = load_config(a.config.as_deref(), None, &ConfigOverrides::default())?.heatmap;
    create_out(&a.out)?;
    let heatmaps = a.out.join("heatmaps");
    if a.dump_heatmaps {
        create_out(&heatmaps)?;
    }
    let mut scores = Vec::with_capacity(truth.len());
    for (id, tpath) in &truth {
        let ppath = pred
            .get(id)
            .ok_or_else(|| CliError::validation(format!("--pred {} has no {id}/mask.sfv", a.pred.display())))?;
        let t = read_mask(tpath)?;
        let p = read_mask(ppath)?;
        scores.push(CaseScore {
            case_id: id.clone(),
            dice: dice_score(&p, &t)?,
            predicted_voxels: p.count(),
            true_voxels: t.count(),
        });
        if a.dump_heatmaps {
            write_volume(&heatmaps.join(format!("{id}.sfv")), &heatmap(&t, params)?.weights, &[]).map_err(Error::from)?;
        }
    }
    let rel = |m: &BTreeMap<String, PathBuf>| -> Vec<String> { m.keys().map(|k| format!("{k}/mask.sfv")).collect() };
    let report = EvaluationReport {
        mean_dice: mean_dice(&scores),
        pred_checksums: file_checksums(&a.pred, &rel(&pred))?,
        truth_checksums: file_checksums(&a.truth, &rel(&truth))?,
        cases: scores,
    };
    write_json(&a.out.join("evaluation.json"), &report)?;
    println!("mean dice {:.4} over {} cases", report.mean_dice, report.cases.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    seed: u64,
    tolerance: f64,
    all_passed: bool,
    results: Vec<GradCheckResult>,
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let results = gradient_suite(a.seed)?;
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {:<26} max rel err {:.3e}", r.name, r.max_rel_error);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if let Some(out) = &a.out {
        create_out(out)?;
        let report = GradcheckReport {
            seed: a.seed,
            tolerance: GRAD_TOLERANCE,
            all_passed: failed.is_empty(),
            results: results.clone(),
        };
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "{} of {} checks exceed rel. error {GRAD_TOLERANCE:e}: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        )))
    }
}

fn ablate(a: &AblateArgs) -> CliResult<()> {
    let base = load_config(a.config.as_deref(), None, &a.overrides)?;
    let mut variants = Vec::new();
    for v in &a.variants {
        let v = Variant::parse(v.trim())?;
        if variants.contains(&v) {
            return Err(CliError::validation(format!("--variants lists {} twice", v.name())));
        }
        variants.push(v);
    }
    create_out(&a.out)?;
    let mut entries = Vec::new();
    for v in variants {
        let cfg = base.clone().with_variant(v);
        cfg.validate()?;
        let cases = load_prepared(&a.data, &cfg)?;
        let report = cv_run("ablate", &cfg, &cases, &a.data, &a.out.join(v.name()), false)?;
        println!("{:<8} mean dice {:.4} ({:.0} s)", v.name(), report.mean_dice, report.wall_clock_seconds);
        entries.push(AblationEntry {
            variant: v,
            mean_dice: report.mean_dice,
        });
    }
    let report = AblationReport {
        ordering: ordering(&entries),
        entries,
    };
    if let Some(o) = &report.ordering {
        if o.holds {
            println!("ordering holds: full - segonly = {:.4}", o.full_minus_segonly.unwrap_or(f64::NAN));
        } else {
            println!("ordering VIOLATED: {}", o.violations.join("; "));
        }
    }
    write_json(&a.out.join("ablation.json"), &report)
}
