//! The four subcommands, callable in-process.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trigger_xai::detection::{decode_box, nms, DetectionBox, RawBoxPrediction};
use trigger_xai::eval::{
    aic, bic, brier, mean_iou, perturbation_curve, pointing_game, surrogate_fit, validate_explanation, GateReport,
    PerturbMode,
};
use trigger_xai::labeler::{label_image, LabelRecord};
use trigger_xai::numeric::{binarize, iou_binary, ThresholdRule};
use trigger_xai::pipeline::{build_backend, explain, Explanation};
use trigger_xai::{Error, Grid2D, ImageRgb, MicroNet, ModelBackend, ProbVector};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::imageio::{read_gray, read_image, read_mask};
use crate::json::{format_f64, to_json_bytes};
use crate::overlay::overlay_ppm;
use crate::report::{build_report, overlay_name, ExplanationReport, TimingBlock, FUSED_OVERLAY, SCHEMA_VERSION};

pub const REPORT_FILE: &str = "report.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BOXES_FILE: &str = "boxes.json";

/// Library errors caused by what the user supplied are input errors; layer
/// names come from the config; everything else is an internal failure.
fn classify(e: Error) -> CliError {
    match e {
        Error::ClassOutOfRange { .. } | Error::ImageTooSmall { .. } => CliError::Input(e.to_string()),
        Error::UnknownLayer(_) | Error::NonSpatialLayer(_) => CliError::Config(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))
}

fn json<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    to_json_bytes(v).map_err(|e| CliError::Internal(format!("serialization failed: {e}")))
}

pub fn backends(cfg: &RunConfig) -> CliResult<Vec<MicroNet>> {
    cfg.backend
        .kinds()
        .into_iter()
        .map(|k| build_backend(k, cfg.seed).map_err(classify))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExplainArgs {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub class_index: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct ExplainOutput {
    pub explanation: Explanation,
    pub report: ExplanationReport,
    /// Every file written, report last.
    pub files: Vec<PathBuf>,
}

pub fn cmd_explain(cfg: &RunConfig, args: &ExplainArgs) -> CliResult<ExplainOutput> {
    let start = Instant::now();
    let image = read_image(&args.image)?;
    let mask = args.mask.as_deref().map(read_mask).transpose()?;
    if let Some(m) = &mask {
        if m.dims() != image.dims() {
            return Err(CliError::input(format!(
                "mask is {:?} but the image is {:?}",
                m.dims(),
                image.dims()
            )));
        }
    }
    let nets = backends(cfg)?;
    let refs: Vec<&dyn ModelBackend> = nets.iter().map(|n| n as &dyn ModelBackend).collect();
    let ex = explain(&refs, &image, args.class_index, mask.as_ref(), &cfg.explain).map_err(classify)?;

    ensure_dir(&args.out)?;
    let mut files = Vec::new();
    for m in &ex.models {
        for map in &m.maps {
            let path = args.out.join(overlay_name(&m.model_id, map.method));
            write(&path, &overlay_ppm(&ex.input, &map.grid)?)?;
            files.push(path);
        }
    }
    let fused = args.out.join(FUSED_OVERLAY);
    write(&fused, &overlay_ppm(&ex.input, &ex.fused.grid)?)?;
    files.push(fused);

    let timing = cfg.timing.then(|| TimingBlock {
        total_ms: start.elapsed().as_secs_f64() * 1e3,
        models_ms: ex.models.iter().map(|m| m.elapsed_ms).collect(),
    });
    let name = args
        .image
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report = build_report(&ex, &name, image.dims(), cfg.seed, timing);
    let path = args.out.join(crate::commands::REPORT_FILE);
    write(&path, &json(&report)?)?;
    files.push(path);
    Ok(ExplainOutput {
        explanation: ex,
        report,
        files,
    })
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("ppm" | "png")
    )
}

/// Files as given; directories contribute their `.ppm`/`.png` entries in
/// name order.
pub fn collect_images(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::input(format!("cannot list {}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file() && is_image(e))
                .collect();
            entries.sort();
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::input("no images to label"));
    }
    Ok(out)
}

pub fn cmd_label(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> CliResult<Vec<LabelRecord>> {
    let images = collect_images(inputs)?;
    for p in &images {
        if p.to_string_lossy().contains([',', '\n', '\r']) {
            return Err(CliError::input(format!("path `{}` contains a comma or newline", p.display())));
        }
    }
    let records: Vec<LabelRecord> = images
        .par_iter()
        .map(|p| {
            let img = read_image(p)?;
            label_image(&p.to_string_lossy(), &img, &cfg.lf_thresholds, &cfg.lf_weights).map_err(classify)
        })
        .collect::<CliResult<_>>()?;
    let mut csv = String::from("image_path,label,score,source\n");
    for r in &records {
        csv.push_str(&format!("{},{},{},lf-aggregate\n", r.image_id, r.label.as_str(), format_f64(r.score)));
    }
    ensure_dir(out)?;
    write(&out.join(LABELS_FILE), csv.as_bytes())?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationRow {
    pub image: String,
    pub gold: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub pointing_hit: bool,
    pub iou: f64,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
    pub brier: f64,
    pub aic: f64,
    pub bic: f64,
    pub gates: GateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub schema_version: String,
    pub backend: String,
    pub pointing_game: f64,
    pub mean_iou: f64,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
    pub brier: f64,
    pub gates_passed: usize,
    pub rows: Vec<EvaluationRow>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    image: String,
    map: String,
    mask: String,
    gold: usize,
}

fn manifest_rows(path: &Path) -> CliResult<Vec<ManifestRow>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let headers = rd.headers().map_err(|e| CliError::input(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image", "map", "mask", "gold"] {
        return Err(CliError::input("manifest header must be `image,map,mask,gold`"));
    }
    rd.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| CliError::input(format!("manifest row {}: {e}", i + 1))))
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig, manifest: &Path, out: &Path) -> CliResult<EvaluationReport> {
    let rows = manifest_rows(manifest)?;
    if rows.is_empty() {
        return Err(CliError::input("manifest has no rows"));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let kind = cfg.backend.kinds()[0];
    let net = build_backend(kind, cfg.seed).map_err(classify)?;
    let rule: ThresholdRule = cfg.explain.binarize;

    let mut loaded: Vec<(ImageRgb, Grid2D, Grid2D)> = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let image = read_image(&base.join(&r.image))?;
        let map = read_gray(&base.join(&r.map))?;
        let mask = read_mask(&base.join(&r.mask))?;
        if map.dims() != image.dims() || mask.dims() != image.dims() {
            return Err(CliError::input(format!(
                "manifest row {}: image {:?}, map {:?} and mask {:?} are not paired",
                i + 1,
                image.dims(),
                map.dims(),
                mask.dims()
            )));
        }
        if r.gold >= net.num_classes() {
            return Err(CliError::input(format!("manifest row {}: gold class {} out of range", i + 1, r.gold)));
        }
        loaded.push((image, map, mask));
    }

    let mut out_rows = Vec::with_capacity(rows.len());
    let mut all_probs: Vec<ProbVector> = Vec::new();
    for (r, (image, map, mask)) in rows.iter().zip(&loaded) {
        let probs = net.forward(image).map_err(classify)?.probs;
        let deletion = perturbation_curve(&net, image, r.gold, map, PerturbMode::Deletion, cfg.explain.perturb_step)
            .map_err(classify)?;
        let insertion = perturbation_curve(&net, image, r.gold, map, PerturbMode::Insertion, cfg.explain.perturb_step)
            .map_err(classify)?;
        let fit = surrogate_fit(image, map, mask).map_err(classify)?;
        let (a, b) = (aic(fit.k, fit.log_likelihood), bic(fit.k, fit.n as f64, fit.log_likelihood));
        let row_brier = brier(std::slice::from_ref(&probs), &[r.gold]).map_err(classify)?;
        let iou = iou_binary(&binarize(map, rule), mask).map_err(classify)?;
        let gates = validate_explanation(a, b, row_brier, probs.max(), iou, &cfg.gates()).map_err(classify)?;
        let (py, px) = map.argmax();
        out_rows.push(EvaluationRow {
            image: r.image.clone(),
            gold: r.gold,
            predicted: probs.argmax(),
            probabilities: probs.entries().to_vec(),
            pointing_hit: mask.get(py, px) >= 0.5,
            iou,
            deletion_auc: deletion.auc,
            insertion_auc: insertion.auc,
            brier: row_brier,
            aic: a,
            bic: b,
            gates,
        });
        all_probs.push(probs);
    }
    let maps: Vec<&Grid2D> = loaded.iter().map(|l| &l.1).collect();
    let masks: Vec<&Grid2D> = loaded.iter().map(|l| &l.2).collect();
    let golds: Vec<usize> = rows.iter().map(|r| r.gold).collect();
    let n = out_rows.len() as f64;
    let report = EvaluationReport {
        schema_version: SCHEMA_VERSION.into(),
        backend: trigger_xai::pipeline::backend_id(kind).into(),
        pointing_game: pointing_game(&maps, &masks).map_err(classify)?,
        mean_iou: mean_iou(&maps, &masks, rule).map_err(classify)?,
        deletion_auc: out_rows.iter().map(|r| r.deletion_auc).sum::<f64>() / n,
        insertion_auc: out_rows.iter().map(|r| r.insertion_auc).sum::<f64>() / n,
        brier: brier(&all_probs, &golds).map_err(classify)?,
        gates_passed: out_rows.iter().filter(|r| r.gates.overall).count(),
        rows: out_rows,
    };
    ensure_dir(out)?;
    write(&out.join(METRICS_FILE), &json(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionReport {
    pub schema_version: String,
    pub nms_iou: f64,
    pub decoded: usize,
    pub boxes: Vec<DetectionBox>,
}

fn parse_raw_csv(text: &str) -> CliResult<Vec<RawBoxPrediction>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rd
        .headers()
        .map_err(|e| CliError::input(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    const FIXED: [&str; 9] = ["tx", "ty", "tw", "th", "cx", "cy", "pw", "ph", "objectness"];
    if headers.len() < 10
        || headers[..9] != FIXED
        || headers[9..].iter().enumerate().any(|(i, h)| *h != format!("p{i}"))
    {
        return Err(CliError::input(
            "raw header must be `tx,ty,tw,th,cx,cy,pw,ph,objectness,p0,...`",
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CliError::input(format!("row {row}: {e}")))?;
        if rec.len() != headers.len() {
            return Err(CliError::input(format!("row {row}: expected {} fields, got {}", headers.len(), rec.len())));
        }
        let f = |j: usize| -> CliResult<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|_| CliError::input(format!("row {row}: `{}` is not a number in column {}", &rec[j], headers[j])))
        };
        let u = |j: usize| -> CliResult<u32> {
            rec[j]
                .parse::<u32>()
                .map_err(|_| CliError::input(format!("row {row}: `{}` is not a cell index in column {}", &rec[j], headers[j])))
        };
        out.push(RawBoxPrediction {
            tx: f(0)?,
            ty: f(1)?,
            tw: f(2)?,
            th: f(3)?,
            cx: u(4)?,
            cy: u(5)?,
            pw: f(6)?,
            ph: f(7)?,
            objectness: f(8)?,
            class_probs: (9..headers.len()).map(f).collect::<CliResult<_>>()?,
        });
    }
    Ok(out)
}

/// Raw head outputs from CSV or from a JSON array of objects.
pub fn read_raw_predictions(path: &Path) -> CliResult<Vec<RawBoxPrediction>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    if text.trim_start().starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        values
            .into_iter()
            .enumerate()
            .map(|(i, v)| serde_json::from_value(v).map_err(|e| CliError::input(format!("row {}: {e}", i + 1))))
            .collect()
    } else {
        parse_raw_csv(&text)
    }
}

pub fn cmd_detect_decode(cfg: &RunConfig, raw: &Path, out: &Path) -> CliResult<DetectionReport> {
    let preds = read_raw_predictions(raw)?;
    let decoded: Vec<DetectionBox> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| decode_box(p).map_err(|e| CliError::input(format!("row {}: {e}", i + 1))))
        .collect::<CliResult<_>>()?;
    let boxes = nms(&decoded, cfg.nms_iou).map_err(classify)?;
    let report = DetectionReport {
        schema_version: SCHEMA_VERSION.into(),
        nms_iou: cfg.nms_iou,
        decoded: decoded.len(),
        boxes,
    };
    ensure_dir(out)?;
    write(&out.join(BOXES_FILE), &json(&report)?)?;
    Ok(report)
}
