//! Procedurally generated multi-generator benchmark: face proxies with
//! region-localized artifacts, region masks, splits and FGSM.

mod attack;
mod dataset;
mod face;
mod io;

pub use attack::{fgsm_attack, input_gradient, AdversarialConfig, MAX_EPSILON};
pub use dataset::{
    apply_region_mask, generate_dataset, make_loo_split, stratified_split, synthesize,
    DatasetSplit, LabelKind, LooSplit, RegionMask, RegionMaskKind, SyntheticDataset,
    SyntheticSample, TEST_FRACTION, VAL_FRACTION,
};
pub use face::{
    apply_artifact, canonical_landmarks, region_mask, ArtifactKind, ArtifactRegion, BoxRegion,
    FaceParams, GeneratorId, GeneratorSpec, CHANNELS, IMAGE_LEN, NOISE_SIGMA, PIXELS, SIZE,
};
pub(crate) use io::write_pnm;
pub use io::{read_labels, write_dataset, LabelRow};

#[cfg(test)]
mod tests;
