use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::face::{
    apply_artifact, canonical_landmarks, FaceParams, GeneratorId, GeneratorSpec, CHANNELS,
    IMAGE_LEN, PIXELS, SIZE,
};
use crate::error::{Error, Result};
use crate::nn::LabeledData;
use crate::tensor::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: usize,
    /// 0 real, 1 fake.
    pub binary_label: usize,
    /// 0 real, `g + 1` for the `g`-th generator spec.
    pub source_label: usize,
    pub generator: Option<GeneratorId>,
    pub params: FaceParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub specs: Vec<GeneratorSpec>,
    pub samples: Vec<SyntheticSample>,
    /// `len() * 3 * 32 * 32` values.
    pub images: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Binary,
    Source,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn num_sources(&self) -> usize {
        self.specs.len() + 1
    }

    pub fn source_label_of(&self, id: GeneratorId) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.id == id)
            .map(|p| p + 1)
            .ok_or_else(|| Error::invalid(format!("generator {id} not in dataset")))
    }

    pub fn source_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.source_label).collect()
    }

    /// Indices whose source label is in `sources`, ascending.
    pub fn indices_of(&self, sources: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| sources.contains(&self.samples[i].source_label))
            .collect()
    }

    pub fn label(&self, i: usize, kind: LabelKind) -> usize {
        match kind {
            LabelKind::Binary => self.samples[i].binary_label,
            LabelKind::Source => self.samples[i].source_label,
        }
    }

    /// Training view of the selected samples.
    pub fn labeled(&self, indices: &[usize], kind: LabelKind) -> LabeledData {
        let mut features = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            features.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.label(i, kind)).collect();
        LabeledData::new([CHANNELS, SIZE, SIZE], features, labels).expect("image size")
    }

    /// Mean over every pixel and channel.
    pub fn mean_pixel(&self) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        self.images.iter().sum::<f64>() / self.images.len() as f64
    }
}

/// Renders one image: the clean face for `params`, plus the artifact of
/// `spec` drawn with `artifact_seed` when given.
pub fn synthesize(params: &FaceParams, spec: Option<&GeneratorSpec>, artifact_seed: u64) -> Vec<f64> {
    let mut img = params.render();
    if let Some(spec) = spec {
        apply_artifact(spec, params, &mut img, &mut RngState::new(artifact_seed));
    }
    img
}

/// `n_per_class` clean faces (class 0) followed by `n_per_class` fakes per
/// spec. Sample `i` is drawn from `RngState::new(seed).split(i)`.
pub fn generate_dataset(n_per_class: usize, specs: &[GeneratorSpec], seed: u64) -> Result<SyntheticDataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let mut seen = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !seen.insert(s.id) {
            return Err(Error::invalid(format!("generator {} listed twice", s.id)));
        }
    }
    let root = RngState::new(seed);
    let total = n_per_class * (specs.len() + 1);
    let rendered: Vec<(SyntheticSample, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let class = i / n_per_class;
            let rng = root.split(i as u64);
            let params = FaceParams::sample(&mut rng.split(0));
            let spec = class.checked_sub(1).map(|g| &specs[g]);
            let img = synthesize(&params, spec, rng.split(1).seed());
            let sample = SyntheticSample {
                sample_id: i,
                binary_label: usize::from(class > 0),
                source_label: class,
                generator: spec.map(|s| s.id),
                params,
            };
            (sample, img)
        })
        .collect();
    let mut samples = Vec::with_capacity(total);
    let mut images = Vec::with_capacity(total * IMAGE_LEN);
    for (s, img) in rendered {
        samples.push(s);
        images.extend(img);
    }
    Ok(SyntheticDataset {
        specs: specs.to_vec(),
        samples,
        images,
    })
}

pub const TEST_FRACTION: f64 = 0.3;
/// Share of the non-test part held out for model selection.
pub const VAL_FRACTION: f64 = 0.15;

/// Disjoint train/validation/test positions into some label slice.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// `[train, val, test]` counts per label.
    pub class_counts: Vec<[usize; 3]>,
    pub seed: u64,
}

/// Per label: shuffle with `RngState::new(seed).split(label)`, put
/// `round(0.3 n)` in test and `round(0.15 (n - test))` in validation.
/// Lists are returned sorted.
pub fn stratified_split(labels: &[usize], seed: u64) -> DatasetSplit {
    let root = RngState::new(seed);
    let num_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        class_counts: vec![[0; 3]; num_labels],
        seed,
    };
    for label in 0..num_labels {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        root.split(label as u64).shuffle(&mut idx);
        let n = idx.len();
        let n_test = (TEST_FRACTION * n as f64).round() as usize;
        let n_val = (VAL_FRACTION * (n - n_test) as f64).round() as usize;
        split.test.extend_from_slice(&idx[..n_test]);
        split.val.extend_from_slice(&idx[n_test..n_test + n_val]);
        split.train.extend_from_slice(&idx[n_test + n_val..]);
        split.class_counts[label] = [n - n_test - n_val, n_val, n_test];
    }
    for v in [&mut split.train, &mut split.val, &mut split.test] {
        v.sort_unstable();
    }
    split
}

/// Leave-one-out split over a full multi-generator dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LooSplit {
    pub left_out: GeneratorId,
    /// Train/val hold real plus the other generators; test holds the
    /// left-out generator's test part plus the real test part.
    pub split: DatasetSplit,
    /// Left-out generator's test samples only.
    pub held_out_test: Vec<usize>,
    /// Test parts of real and the other generators.
    pub in_dist_test: Vec<usize>,
}

pub fn make_loo_split(ds: &SyntheticDataset, left_out: GeneratorId, seed: u64) -> Result<LooSplit> {
    let out_label = ds.source_label_of(left_out)?;
    let labels = ds.source_labels();
    let base = stratified_split(&labels, seed);
    let is_out = |i: &usize| labels[*i] == out_label;
    let keep = |v: &[usize]| v.iter().copied().filter(|i| !is_out(i)).collect::<Vec<_>>();
    let held_out_test: Vec<usize> = base.test.iter().copied().filter(is_out).collect();
    let in_dist_test = keep(&base.test);
    let test = base
        .test
        .iter()
        .copied()
        .filter(|&i| labels[i] == 0 || labels[i] == out_label)
        .collect();
    let mut class_counts = base.class_counts.clone();
    class_counts[out_label][0] = 0;
    class_counts[out_label][1] = 0;
    for (l, c) in class_counts.iter_mut().enumerate() {
        if l != 0 && l != out_label {
            c[2] = 0;
        }
    }
    Ok(LooSplit {
        left_out,
        split: DatasetSplit {
            train: keep(&base.train),
            val: keep(&base.val),
            test,
            class_counts,
            seed,
        },
        held_out_test,
        in_dist_test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionMaskKind {
    Full,
    NoBottomHalf,
    NoHalfMouth,
    NoOneEye,
    NoMouth,
}

impl RegionMaskKind {
    pub const ALL: [RegionMaskKind; 5] = [
        RegionMaskKind::Full,
        RegionMaskKind::NoBottomHalf,
        RegionMaskKind::NoHalfMouth,
        RegionMaskKind::NoOneEye,
        RegionMaskKind::NoMouth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionMaskKind::Full => "full",
            RegionMaskKind::NoBottomHalf => "no_bottom_half",
            RegionMaskKind::NoHalfMouth => "no_half_mouth",
            RegionMaskKind::NoOneEye => "no_one_eye",
            RegionMaskKind::NoMouth => "no_mouth",
        }
    }
}

impl fmt::Display for RegionMaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionMaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegionMaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown region mask {s:?}")))
    }
}

/// Pixels to blank out (`true`) on every channel, and the value they get.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub kind: RegionMaskKind,
    pub mask: Vec<bool>,
    pub fill: f64,
}

impl RegionMask {
    /// Landmark masks use the bounding box of that landmark over all
    /// faces the sampler can produce, grown to cover the margin the mouth
    /// artifact may reach.
    pub fn new(kind: RegionMaskKind, fill: f64) -> Self {
        let [left_eye, _, mouth] = canonical_landmarks().map(|b| b.expand(2));
        let mid = mouth.left + mouth.width / 2;
        let mut mask = vec![false; PIXELS];
        for y in 0..SIZE {
            for x in 0..SIZE {
                mask[y * SIZE + x] = match kind {
                    RegionMaskKind::Full => false,
                    RegionMaskKind::NoBottomHalf => y >= SIZE / 2,
                    RegionMaskKind::NoHalfMouth => mouth.contains(y, x) && x < mid,
                    RegionMaskKind::NoOneEye => left_eye.contains(y, x),
                    RegionMaskKind::NoMouth => mouth.contains(y, x),
                };
            }
        }
        RegionMask { kind, mask, fill }
    }

    /// Mask whose fill is the dataset's mean pixel value.
    pub fn for_dataset(kind: RegionMaskKind, ds: &SyntheticDataset) -> Self {
        Self::new(kind, ds.mean_pixel())
    }

    pub fn apply(&self, image: &mut [f64]) {
        for plane in image.chunks_mut(PIXELS) {
            for (v, &m) in plane.iter_mut().zip(&self.mask) {
                if m {
                    *v = self.fill;
                }
            }
        }
    }

    pub fn masked_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Copy of `ds` with `mask` applied to every image.
pub fn apply_region_mask(ds: &SyntheticDataset, mask: &RegionMask) -> SyntheticDataset {
    let mut out = ds.clone();
    if mask.kind != RegionMaskKind::Full {
        for img in out.images.chunks_mut(IMAGE_LEN) {
            mask.apply(img);
        }
    }
    out
}
