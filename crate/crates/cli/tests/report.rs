mod common;

use std::fs;
use std::sync::OnceLock;

use serde_json::Value;

use common::{data, quick_config};
use trigger_xai::fixtures::{gen_scene, image_to_ppm, mask_to_ppm};
use trigger_xai::numeric::softmax;
use trigger_xai::trigger::{ensemble_agreement, trigger_decide};
use trigger_xai::{DiseaseLabel, Grid2D, ModelKind, ProbVector};
use trigger_xai_cli::commands::{cmd_explain, ExplainArgs, ExplainOutput, REPORT_FILE};
use trigger_xai_cli::imageio::read_image;
use trigger_xai_cli::overlay::overlay_ppm;
use trigger_xai_cli::report::{ExplanationReport, SCHEMA};

struct Run {
    out: ExplainOutput,
    bytes: Vec<u8>,
    _dir: tempfile::TempDir,
}

fn single() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| explain_with(quick_config()))
}

fn ensemble() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = quick_config();
        cfg.set("backend", "all").unwrap();
        explain_with(cfg)
    })
}

fn explain_with(cfg: trigger_xai_cli::config::RunConfig) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let args = ExplainArgs {
        image: data("scene.ppm"),
        mask: Some(data("scene_mask.ppm")),
        class_index: None,
        out: dir.path().to_path_buf(),
    };
    let out = cmd_explain(&cfg, &args).unwrap();
    let bytes = fs::read(dir.path().join(REPORT_FILE)).unwrap();
    Run { out, bytes, _dir: dir }
}

/// Enough of draft-07 for the committed schema: type, enum, properties,
/// required, additionalProperties, items, min/maxItems and local $ref.
fn validate(root: &Value, schema: &Value, v: &Value, path: &str) -> Result<(), String> {
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let name = r.strip_prefix("#/definitions/").ok_or(format!("unsupported $ref {r}"))?;
        return validate(root, &root["definitions"][name], v, path);
    }
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => return Err(format!("{path}: bad type keyword")),
        };
        let ok = types.iter().any(|t| match *t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "boolean" => v.is_boolean(),
            "null" => v.is_null(),
            "number" => v.is_number(),
            "integer" => v.is_u64() || v.is_i64(),
            _ => false,
        });
        if !ok {
            return Err(format!("{path}: {v} is not {types:?}"));
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            return Err(format!("{path}: {v} not in {e:?}"));
        }
    }
    if let Some(obj) = v.as_object() {
        let props = schema.get("properties").and_then(Value::as_object);
        for req in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = req.as_str().unwrap();
            if !obj.contains_key(key) {
                return Err(format!("{path}: missing {key}"));
            }
        }
        for (k, child) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => validate(root, s, child, &format!("{path}.{k}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{path}: unexpected field {k}"))
                }
                None => {}
            }
        }
    }
    if let Some(arr) = v.as_array() {
        let bound = |k: &str| schema.get(k).and_then(Value::as_u64).map(|n| n as usize);
        if bound("minItems").is_some_and(|n| arr.len() < n) || bound("maxItems").is_some_and(|n| arr.len() > n) {
            return Err(format!("{path}: {} items out of bounds", arr.len()));
        }
        if let Some(items) = schema.get("items") {
            for (i, child) in arr.iter().enumerate() {
                validate(root, items, child, &format!("{path}[{i}]"))?;
            }
        }
    }
    Ok(())
}

fn check_schema(bytes: &[u8]) -> Result<(), String> {
    let schema: Value = serde_json::from_str(SCHEMA).unwrap();
    let v: Value = serde_json::from_slice(bytes).unwrap();
    validate(&schema, &schema, &v, "$")
}

#[test]
fn reports_validate_against_schema() {
    check_schema(&single().bytes).unwrap();
    check_schema(&ensemble().bytes).unwrap();
}

#[test]
fn validator_rejects_extra_and_missing_fields() {
    let mut v: Value = serde_json::from_slice(&single().bytes).unwrap();
    v["models"][0]["surprise"] = Value::Bool(true);
    assert!(check_schema(v.to_string().as_bytes()).unwrap_err().contains("surprise"));
    let mut v: Value = serde_json::from_slice(&single().bytes).unwrap();
    v.as_object_mut().unwrap().remove("gates");
    assert!(check_schema(v.to_string().as_bytes()).is_err());
}

#[test]
fn report_round_trips() {
    let run = single();
    let parsed: ExplanationReport = serde_json::from_slice(&run.bytes).unwrap();
    assert_eq!(parsed, run.out.report);
    let again = trigger_xai_cli::json::to_json_bytes(&parsed).unwrap();
    assert_eq!(again, run.bytes);
}

#[test]
fn unknown_report_fields_rejected() {
    let mut v: Value = serde_json::from_slice(&single().bytes).unwrap();
    v["extra"] = Value::Null;
    assert!(serde_json::from_value::<ExplanationReport>(v).is_err());
}

#[test]
fn trigger_block_matches_library() {
    for run in [single(), ensemble()] {
        let r = &run.out.report;
        let mean = ProbVector::new(r.probabilities.clone()).unwrap();
        let tops: Vec<usize> = r.models.iter().map(|m| m.predicted).collect();
        let agreement = ensemble_agreement(&tops).unwrap();
        assert_eq!(agreement, r.agreement);
        let cfg = quick_config();
        let expect = trigger_decide(&mean, agreement, false, &cfg.explain.trigger).unwrap();
        assert_eq!(r.trigger, expect);
        for m in &r.models {
            assert_eq!(softmax(&m.logits).unwrap().entries(), m.probabilities.as_slice());
        }
    }
}

#[test]
fn ensemble_report_shape() {
    let r = &ensemble().out.report;
    assert_eq!(r.models.len(), 3);
    let kinds: Vec<ModelKind> = r.models.iter().map(|m| m.kind).collect();
    assert_eq!(kinds, ModelKind::ALL);
    assert_eq!(r.assignment.len(), 3);
    assert_eq!(r.reference_mask, "provided");
    assert_eq!(r.reference_mask_pixels, 204);
    // one overlay per model per method, the fused overlay, the report
    assert_eq!(ensemble().out.files.len(), 3 * 4 + 2);
    let n = r.consistency.values.len();
    for i in 0..n {
        // zero-norm maps have no cosine at all
        let row_empty = r.consistency.values[i].iter().all(Option::is_none);
        assert!(row_empty || r.consistency.values[i][i] == Some(1.0));
    }
}

#[test]
fn committed_fixture_matches_generator() {
    let s = gen_scene(DiseaseLabel::YellowSpots, 7);
    assert_eq!(fs::read(data("scene.ppm")).unwrap(), image_to_ppm(&s.image));
    assert_eq!(fs::read(data("scene_mask.ppm")).unwrap(), mask_to_ppm(&s.mask));
}

#[test]
fn golden_overlay() {
    let img = read_image(&data("scene.ppm")).unwrap();
    let (h, w) = img.dims();
    let ramp = Grid2D::from_fn(h, w, |y, x| (y * w + x) as f64 / (h * w - 1) as f64);
    let bytes = overlay_ppm(&img, &ramp).unwrap();
    let golden = data("scene_ramp_overlay.ppm");
    if std::env::var_os("TRIGGER_XAI_BLESS").is_some() {
        fs::write(&golden, &bytes).unwrap();
    }
    assert_eq!(bytes, fs::read(golden).unwrap());
}
