//! Fixtures and process helpers for driving the `domalign` binary.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use domalign::imgio::save_image;
use domalign::rng::seeded;
use domalign::ImageRgbF64;
use rand::Rng;

#[path = "../../../core/tests/common/mod.rs"]
pub mod common;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_domalign"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn domalign")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Writes `n` scenes as `prefix_XX.png` into `dir`.
pub fn write_scenes(dir: &Path, prefix: &str, n: usize, seed: u64, grain: f64, size: usize) -> Vec<ImageRgbF64> {
    fs::create_dir_all(dir).unwrap();
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| {
            let img = common::scene(&mut rng, size, size + 4, grain);
            save_image(&img, dir.join(format!("{prefix}_{i:02}.png"))).unwrap();
            img
        })
        .collect()
}

/// Source and target image directories under `root`.
pub fn image_dirs(root: &Path) -> (PathBuf, PathBuf) {
    let (src, tgt) = (root.join("src"), root.join("tgt"));
    write_scenes(&src, "s", 6, 11, 0.1, 20);
    write_scenes(&tgt, "t", 5, 12, 0.01, 20);
    (src, tgt)
}

/// Feature dump for `build-artifacts`: clustered source features with
/// mostly-correct probabilities, and random target probabilities.
pub fn write_feature_dump(path: &Path, seed: u64) {
    let mut rng = seeded(seed);
    let (classes, dim, n, m) = (3usize, 6usize, 240usize, 150usize);
    let means: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut features = Vec::new();
    let mut probabilities = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % classes;
        features.push(means[c].iter().map(|v| v + rng.random_range(-0.5..0.5)).collect::<Vec<f64>>());
        let predicted = if rng.random::<f64>() < 0.8 { c } else { rng.random_range(0..classes) };
        let mut p = vec![0.1; classes];
        p[predicted] = 1.0 - 0.1 * (classes - 1) as f64;
        probabilities.push(p);
        labels.push(c as u8);
    }
    let target = common::random_probs(&mut rng, m, classes);
    let target: Vec<Vec<f64>> = target.iter_rows().map(<[f64]>::to_vec).collect();
    let dump = serde_json::json!({
        "class_count": classes,
        "source": { "features": features, "probabilities": probabilities, "labels": labels },
        "target": { "probabilities": target },
    });
    fs::write(path, dump.to_string()).unwrap();
}

/// Every regular file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
