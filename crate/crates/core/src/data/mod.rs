//! Two-modality datasets at the embedding level: types, genetic encoding,
//! splits, synthetic generation and the on-disk format.

pub mod genetic;
pub mod io;
pub mod split;
pub mod synth;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use genetic::{
    add_positional_encoding, augment_genetic, encode_genetic, GeneticSequence, OneHotGenetic,
    MAX_WIDTH,
};
pub use io::{export_labels_csv, load_dataset, save_dataset};
pub use split::{make_splits, oversample_indices, SplitOutcome, SplitSpec};
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Genetic,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Genetic => "genetic",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "genetic" => Ok(Modality::Genetic),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }
}

/// A `depth × height × width` grid of latent feature vectors, stored
/// depth-major (`data[(d * height + h) * width + w]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub modality: Modality,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMap {
    pub fn new(
        modality: Modality,
        depth: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dims must be positive, got {depth}x{height}x{width}"
            )));
        }
        if data.len() != depth * height * width {
            return Err(Error::DimensionMismatch {
                what: "embedding payload".into(),
                expected: (depth * height * width).to_string(),
                found: data.len().to_string(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite embedding entry at {i}"
            )));
        }
        Ok(Self {
            modality,
            depth,
            height,
            width,
            data,
        })
    }

    pub fn zeros(modality: Modality, depth: usize, height: usize, width: usize) -> Self {
        Self {
            modality,
            depth,
            height,
            width,
            data: vec![0.0; depth * height * width],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn n_patches(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[(d * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, value: f32) {
        self.data[(d * self.height + h) * self.width + w] = value;
    }

    /// The latent vector at spatial position `(h, w)`.
    pub fn patch(&self, h: usize, w: usize) -> Vec<f64> {
        (0..self.depth).map(|d| self.get(d, h, w) as f64).collect()
    }

    /// All latent vectors in row-major spatial order.
    pub fn patches(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_patches());
        for h in 0..self.height {
            for w in 0..self.width {
                out.push(self.patch(h, w));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl SplitTag {
    pub fn code(self) -> u8 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Validation => 1,
            SplitTag::Test => 2,
            SplitTag::Unassigned => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SplitTag::Train),
            1 => Some(SplitTag::Validation),
            2 => Some(SplitTag::Test),
            3 => Some(SplitTag::Unassigned),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
            SplitTag::Unassigned => "unassigned",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" | "calibration" | "val" => Ok(SplitTag::Validation),
            "test" => Ok(SplitTag::Test),
            "all" | "unassigned" => Ok(SplitTag::Unassigned),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub split: SplitTag,
    pub image: EmbeddingMap,
    pub genetic: Option<EmbeddingMap>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub unassigned: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test + self.unassigned
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub k: usize,
    pub class_names: Vec<String>,
    pub n_samples: usize,
    pub counts: SplitCounts,
    pub image_dims: [usize; 3],
    pub genetic_dims: [usize; 3],
    pub min_per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset and derives its manifest from the samples.
    pub fn from_samples(
        class_names: Vec<String>,
        samples: Vec<Sample>,
        min_per_class: usize,
    ) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset { min_per_class })?;
        let image_dims = first.image.dims();
        let genetic_dims = samples
            .iter()
            .find_map(|s| s.genetic.as_ref().map(|g| g.dims()))
            .unwrap_or([0, 0, 0]);
        let manifest = DatasetManifest {
            format_version: io::FORMAT_VERSION,
            k: class_names.len(),
            class_names,
            n_samples: samples.len(),
            counts: SplitCounts::default(),
            image_dims,
            genetic_dims,
            min_per_class,
        };
        let mut ds = Dataset { manifest, samples };
        ds.refresh_counts();
        ds.validate()?;
        Ok(ds)
    }

    pub fn k(&self) -> usize {
        self.manifest.k
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn refresh_counts(&mut self) {
        let mut c = SplitCounts::default();
        for s in &self.samples {
            match s.split {
                SplitTag::Train => c.train += 1,
                SplitTag::Validation => c.validation += 1,
                SplitTag::Test => c.test += 1,
                SplitTag::Unassigned => c.unassigned += 1,
            }
        }
        self.manifest.counts = c;
        self.manifest.n_samples = self.samples.len();
    }

    /// Checks labels, per-modality dimensions and split accounting.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.class_names.len() != m.k {
            return Err(Error::DimensionMismatch {
                what: "class name count".into(),
                expected: m.k.to_string(),
                found: m.class_names.len().to_string(),
            });
        }
        if m.counts.total() != self.samples.len() || m.n_samples != self.samples.len() {
            return Err(Error::DimensionMismatch {
                what: "split counts".into(),
                expected: self.samples.len().to_string(),
                found: m.counts.total().to_string(),
            });
        }
        let mut per_class = vec![0usize; m.k];
        for s in &self.samples {
            if s.label >= m.k {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    k: m.k,
                });
            }
            per_class[s.label] += 1;
            if s.image.dims() != m.image_dims || s.image.modality != Modality::Image {
                return Err(Error::DimensionMismatch {
                    what: format!("image embedding of sample {}", s.id),
                    expected: format!("{:?}", m.image_dims),
                    found: format!("{:?}", s.image.dims()),
                });
            }
            if let Some(g) = &s.genetic {
                if g.dims() != m.genetic_dims || g.modality != Modality::Genetic {
                    return Err(Error::DimensionMismatch {
                        what: format!("genetic embedding of sample {}", s.id),
                        expected: format!("{:?}", m.genetic_dims),
                        found: format!("{:?}", g.dims()),
                    });
                }
            }
        }
        if let Some((c, n)) = per_class
            .iter()
            .enumerate()
            .find(|(_, &n)| n < m.min_per_class)
        {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {n} samples, fewer than min_per_class={}",
                m.min_per_class
            )));
        }
        Ok(())
    }

    pub fn indices_of(&self, tag: SplitTag) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == tag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Samples of a split; `Unassigned` selects every sample.
    pub fn split(&self, tag: SplitTag) -> Vec<&Sample> {
        match tag {
            SplitTag::Unassigned => self.samples.iter().collect(),
            t => self.samples.iter().filter(|s| s.split == t).collect(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Applies a split: drops filtered classes, renumbers labels densely and
    /// tags every retained sample.
    pub fn apply_split(&self, outcome: &SplitOutcome) -> Result<Dataset> {
        let mut tags = vec![None; self.samples.len()];
        for (list, tag) in [
            (&outcome.spec.train, SplitTag::Train),
            (&outcome.spec.validation, SplitTag::Validation),
            (&outcome.spec.test, SplitTag::Test),
        ] {
            for &i in list {
                tags[i] = Some(tag);
            }
        }
        let mut samples = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(tag) = tags[i] {
                let mut s = s.clone();
                s.label = outcome.new_label[s.label].expect("retained sample has a retained class");
                s.split = tag;
                samples.push(s);
            }
        }
        let names = outcome
            .retained_classes
            .iter()
            .map(|&c| self.manifest.class_names[c].clone())
            .collect();
        Dataset::from_samples(names, samples, outcome.min_per_class)
    }
}

/// Gatekeeper for the expensive modality.
///
/// Every read of a genetic embedding goes through [`GeneticAccess::measure`]
/// (counted as a real measurement) or [`GeneticAccess::audit`] (counted
/// separately, never part of cost metrics). With `withheld` set, measurements
/// return `None`, which lets callers surface "measurement required".
#[derive(Debug, Default)]
pub struct GeneticAccess {
    withheld: bool,
    measured: AtomicUsize,
    audited: AtomicUsize,
}

impl GeneticAccess {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn withheld() -> Self {
        Self {
            withheld: true,
            ..Self::default()
        }
    }

    pub fn measure<'a>(&self, sample: &'a Sample) -> Option<&'a EmbeddingMap> {
        if self.withheld {
            return None;
        }
        let g = sample.genetic.as_ref()?;
        self.measured.fetch_add(1, Ordering::Relaxed);
        Some(g)
    }

    pub fn audit<'a>(&self, sample: &'a Sample) -> Option<&'a EmbeddingMap> {
        let g = sample.genetic.as_ref()?;
        self.audited.fetch_add(1, Ordering::Relaxed);
        Some(g)
    }

    pub fn measured(&self) -> usize {
        self.measured.load(Ordering::Relaxed)
    }

    pub fn audited(&self) -> usize {
        self.audited.load(Ordering::Relaxed)
    }
}
