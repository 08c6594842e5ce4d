//! Artifact snapshots and raster round trips.

mod common;

use common::{random_centers, random_projector};
use domalign::artifact::{StageArtifact, ARTIFACT_VERSION};
use domalign::imgio::{load_image, save_image};
use domalign::rng::seeded;
use domalign::tcr::CategoryThresholds;
use domalign::ImageRgbF64;
use proptest::prelude::*;

fn sample_artifact(seed: u64) -> StageArtifact<f64> {
    let mut rng = seeded(seed);
    let projector = random_projector(&mut rng, 5, 3, 4, 2);
    let centers = random_centers(&mut rng, 3, 5);
    let thresholds = CategoryThresholds { thresholds: vec![0.9, 0.42, 0.1], percentile_binds: vec![false, true, true] };
    StageArtifact::new(2, projector, centers, thresholds)
}

#[test]
fn artifact_round_trips_exactly() {
    let a = sample_artifact(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage.json");
    a.save(&path).unwrap();
    assert_eq!(StageArtifact::<f64>::load(&path).unwrap(), a);
    assert_eq!(StageArtifact::<f64>::from_json(&a.to_json().unwrap()).unwrap(), a);
}

#[test]
fn f32_artifact_round_trips() {
    let b = StageArtifact::<f32>::from_json(&sample_artifact(2).to_json().unwrap()).unwrap();
    assert_eq!(StageArtifact::<f32>::from_json(&b.to_json().unwrap()).unwrap(), b);
}

#[test]
fn wrong_version_is_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(&sample_artifact(3).to_json().unwrap()).unwrap();
    v["version"] = (ARTIFACT_VERSION + 1).into();
    assert!(StageArtifact::<f64>::from_json(&v.to_string()).is_err());
}

#[test]
fn inconsistent_projector_is_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(&sample_artifact(4).to_json().unwrap()).unwrap();
    v["projector"]["w1"]["cols"] = 99.into();
    assert!(StageArtifact::<f64>::from_json(&v.to_string()).is_err());
}

proptest! {
    #[test]
    fn quantized_images_round_trip(bytes in prop::collection::vec(any::<u8>(), 3 * 12), ppm in any::<bool>()) {
        let img = ImageRgbF64::from_rgb8(3, 4, &bytes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if ppm { "x.ppm" } else { "x.png" });
        save_image(&img, &path).unwrap();
        let back: ImageRgbF64 = load_image(&path).unwrap();
        prop_assert_eq!(back.to_rgb8(), bytes);
    }
}
