mod common;

use std::fs;
use std::path::PathBuf;

use trigger_xai::fixtures::{gen_scene, image_to_ppm};
use trigger_xai::{DiseaseLabel, ImageRgb};
use trigger_xai_cli::commands::{cmd_label, LABELS_FILE};
use trigger_xai_cli::config::RunConfig;

fn corpus(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut paths = Vec::new();
    let green = dir.join("a_green.ppm");
    fs::write(&green, image_to_ppm(&ImageRgb::filled(16, 16, [0.1, 0.8, 0.1]))).unwrap();
    paths.push(green);
    for (i, label) in DiseaseLabel::CLASSES.iter().enumerate() {
        let p = dir.join(format!("scene_{i}.ppm"));
        fs::write(&p, image_to_ppm(&gen_scene(*label, 40 + i as u64).image)).unwrap();
        paths.push(p);
    }
    // not an image; ignored when the directory is scanned
    fs::write(dir.join("notes.txt"), "x").unwrap();
    paths
}

#[test]
fn labels_a_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    fs::create_dir(&imgs).unwrap();
    let paths = corpus(&imgs);
    let out = tmp.path().join("out");
    let records = cmd_label(&RunConfig::default(), std::slice::from_ref(&imgs), &out).unwrap();
    assert_eq!(records.len(), paths.len());

    let csv = fs::read_to_string(out.join(LABELS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "image_path,label,score,source");
    assert_eq!(lines.len(), paths.len() + 1);
    assert!(!csv.contains('\r'));

    let green: Vec<&str> = lines[1].split(',').collect();
    assert!(green[0].ends_with("a_green.ppm"));
    assert_eq!(green[1], "Healthy");
    assert_eq!(green[3], "lf-aggregate");
    for (line, label) in lines[2..].iter().zip(DiseaseLabel::CLASSES) {
        assert_eq!(line.split(',').nth(1).unwrap(), label.as_str(), "{line}");
    }
}

#[test]
fn rerun_is_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let paths = corpus(tmp.path());
    let run = |threads: usize, dir: &str| {
        let out = tmp.path().join(dir);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| cmd_label(&RunConfig::default(), &paths, &out).unwrap());
        fs::read(out.join(LABELS_FILE)).unwrap()
    };
    let a = run(1, "a");
    assert_eq!(a, run(1, "b"));
    assert_eq!(a, run(3, "c"));
}

#[test]
fn comma_in_path_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("a,b.ppm");
    fs::write(&p, image_to_ppm(&ImageRgb::filled(4, 4, [0.5; 3]))).unwrap();
    let err = cmd_label(&RunConfig::default(), &[p], tmp.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
