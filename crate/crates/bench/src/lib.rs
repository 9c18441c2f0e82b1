//! Shared inputs for the criterion benches.

use trigger_xai::fixtures::{gen_scene, random_boxes};
use trigger_xai::detection::DetectionBox;
use trigger_xai::{DiseaseLabel, ImageRgb, MicroNet, MicroNetSpec};

pub fn net() -> MicroNet {
    MicroNet::build(7, &MicroNetSpec::default()).expect("default spec builds")
}

pub fn scene() -> ImageRgb {
    gen_scene(DiseaseLabel::YellowSpots, 7).image
}

pub fn boxes(n: usize) -> Vec<DetectionBox> {
    random_boxes(3, n, 4)
}
