//! Dataset preparation and the end-to-end runs shared by the command line
//! and the acceptance suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::dataio::{
    assert_disjoint, generate_synthetic, make_zero_shot_split, read_fvec, read_word_vectors, write_fvec,
    write_word_vectors, FeatureSet, SplitSpec, SyntheticConfig, WordVectors,
};
use crate::encoder::{encode_features, EncoderParams};
use crate::error::{Error, Result};
use crate::init::{stream_rng, Stream};
use crate::retrieval::{evaluate, make_generalized_gallery, Gallery, RetrievalReport};
use crate::trainer::{train, TrainConfig, TrainData, TrainOutcome, Validation};

pub const SKETCHES_FILE: &str = "sketches.fvec";
pub const IMAGES_FILE: &str = "images.fvec";
pub const WORDS_FILE: &str = "words.fvec";
pub const ALTERNATES_FILE: &str = "word_alternates.fvec";
pub const SPLIT_FILE: &str = "split.json";

/// P@K depths reported for test retrieval.
pub const REPORT_KS: [usize; 2] = [100, 200];

/// Raw features of both domains, word vectors and the class split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sketches: FeatureSet,
    pub images: FeatureSet,
    pub words: Option<WordVectors>,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn synthetic(config: &SyntheticConfig, unseen: usize, seed: u64) -> Result<Self> {
        let data = generate_synthetic(config, &mut stream_rng(seed, Stream::Data))?;
        let split = make_zero_shot_split(config.classes, unseen, &mut stream_rng(seed, Stream::Split))?;
        Ok(Self {
            sketches: data.sketches,
            images: data.images,
            words: Some(data.words),
            split,
        })
    }

    /// Writes the standard file set into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_fvec(&self.sketches, &dir.join(SKETCHES_FILE))?;
        write_fvec(&self.images, &dir.join(IMAGES_FILE))?;
        if let Some(w) = &self.words {
            let alt = dir.join(ALTERNATES_FILE);
            write_word_vectors(w, &dir.join(WORDS_FILE), w.has_alternates().then_some(alt.as_path()))?;
        }
        let text = serde_json::to_string_pretty(&self.split).map_err(|e| Error::format("split", e.to_string()))?;
        let path = dir.join(SPLIT_FILE);
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads the standard file set. Word files are optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let sketches = read_fvec(&dir.join(SKETCHES_FILE))?;
        let images = read_fvec(&dir.join(IMAGES_FILE))?;
        let words_path = dir.join(WORDS_FILE);
        let words = if words_path.exists() {
            let alt = dir.join(ALTERNATES_FILE);
            Some(read_word_vectors(&words_path, alt.exists().then_some(alt.as_path()))?)
        } else {
            None
        };
        let path = dir.join(SPLIT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let split: SplitSpec = serde_json::from_str(&text).map_err(|e| Error::format("split", e.to_string()))?;
        let out = Self {
            sketches,
            images,
            words,
            split,
        };
        out.check()?;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        self.split.validate()?;
        if self.sketches.class_names() != self.images.class_names() {
            return Err(Error::Data("sketch and image files list different classes".into()));
        }
        if let Some(&bad) = self.split.all_classes().iter().find(|&&c| c >= self.images.num_classes()) {
            return Err(Error::Data(format!("split names class id {bad} beyond the class list")));
        }
        if let Some(w) = &self.words {
            if w.class_names != self.images.class_names() {
                return Err(Error::Data("word vectors list different classes than the features".into()));
            }
        }
        Ok(())
    }
}

/// Experiment-level settings on top of the trainer's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub unseen_classes: usize,
    /// Cap on items per class in the validation subset.
    pub val_per_class: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            unseen_classes: 4,
            val_per_class: 64,
            train: TrainConfig::default(),
        }
    }
}

/// A dataset cut into training, validation and test pieces with seen-class
/// anchors.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub train_sketches: FeatureSet,
    pub train_images: FeatureSet,
    pub test_sketches: FeatureSet,
    pub test_images: FeatureSet,
    pub validation: Validation,
    /// Seen-class anchors; absent without word vectors.
    pub anchors: Option<AnchorSet>,
}

/// One trained model with its zero-shot test report.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: RetrievalReport,
}

impl Prepared {
    /// Validation items come from the split's validation classes when it has
    /// any, otherwise from the unseen classes; at most `val_per_class` per
    /// class and domain.
    pub fn new(dataset: Dataset, val_per_class: usize, seed: u64) -> Result<Self> {
        dataset.check()?;
        let split = &dataset.split;
        let train_sketches = dataset.sketches.restrict_classes(&split.seen);
        let train_images = dataset.images.restrict_classes(&split.seen);
        let test_sketches = dataset.sketches.restrict_classes(&split.unseen);
        let test_images = dataset.images.restrict_classes(&split.unseen);
        assert_disjoint(&train_sketches, &test_sketches)?;
        assert_disjoint(&train_images, &test_images)?;

        let val_classes = if split.validation.is_empty() {
            &split.unseen
        } else {
            &split.validation
        };
        let mut rng = stream_rng(seed, Stream::Validation);
        let validation = Validation {
            queries: dataset
                .sketches
                .restrict_classes(val_classes)
                .sample_per_class(val_per_class, &mut rng),
            gallery: dataset
                .images
                .restrict_classes(val_classes)
                .sample_per_class(val_per_class, &mut rng),
        };
        let anchors = match &dataset.words {
            Some(w) => Some(AnchorSet::from_features(&train_images, w, &split.seen)?),
            None => None,
        };
        Ok(Self {
            train_sketches,
            train_images,
            test_sketches,
            test_images,
            validation,
            anchors,
            dataset,
        })
    }

    pub fn synthetic(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let ds = Dataset::synthetic(&config.synthetic, config.unseen_classes, seed)?;
        Self::new(ds, config.val_per_class, seed)
    }

    pub fn train_data(&self) -> TrainData {
        self.train_data_with_images(self.train_images.clone())
    }

    /// Training data with a replacement set of seen-class images; the anchors
    /// keep describing the full image set.
    pub fn train_data_with_images(&self, images: FeatureSet) -> TrainData {
        TrainData {
            sketches: self.train_sketches.clone(),
            images,
            anchors: self.anchors.clone(),
            validation: Some(self.validation.clone()),
        }
    }

    /// Unseen-class sketches ranked against unseen-class images.
    pub fn test_report(&self, encoder: &EncoderParams) -> Result<RetrievalReport> {
        let q = encode_features(encoder, &self.test_sketches)?;
        let g = encode_features(encoder, &self.test_images)?;
        evaluate(&q, &Gallery::from_features(&g), &REPORT_KS)
    }

    /// The same queries against the test gallery plus `fraction` of every
    /// seen class's images.
    pub fn generalized_gallery(&self, encoder: &EncoderParams, fraction: f64, seed: u64) -> Result<Gallery> {
        let train = encode_features(encoder, &self.train_images)?;
        let test = encode_features(encoder, &self.test_images)?;
        make_generalized_gallery(&train, &test, fraction, &mut stream_rng(seed, Stream::Gallery))
    }

    pub fn generalized_report(&self, encoder: &EncoderParams, gallery: &Gallery) -> Result<RetrievalReport> {
        let q = encode_features(encoder, &self.test_sketches)?;
        evaluate(&q, gallery, &REPORT_KS)
    }

    pub fn run(&self, config: &TrainConfig) -> Result<RunResult> {
        self.run_on(&self.train_data(), config)
    }

    pub fn run_on(&self, data: &TrainData, config: &TrainConfig) -> Result<RunResult> {
        let outcome = train(data, config)?;
        let report = self.test_report(&outcome.params.encoder)?;
        Ok(RunResult { outcome, report })
    }
}
