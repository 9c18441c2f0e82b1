#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trigger_xai_cli::config::RunConfig;

pub fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Native resolution and a reduced mask budget keep end-to-end runs short.
pub fn quick_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text("input.side = 0\nrise.masks = 500\nseed = 7\n", "test")
        .expect("valid test config");
    cfg
}

pub fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trigger-xai"))
        .args(args)
        .env_remove("TRIGGER_XAI_CONFIG")
        .output()
        .expect("binary runs")
}

pub fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
