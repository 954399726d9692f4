//! Label sets and label augmentation by repetition.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub class_id: usize,
    /// Normalised cxcywh.
    pub bbox: BBox,
}

/// Ground-truth objects of one scene, conceptually padded with no-object
/// entries up to `pad_to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub foreground: Vec<Label>,
    pub pad_to: usize,
}

impl LabelSet {
    pub fn new(foreground: Vec<Label>, pad_to: usize, num_classes: usize) -> Result<Self> {
        if foreground.len() > pad_to {
            return Err(Error::Contract(format!(
                "{} labels exceed the {pad_to} prediction slots",
                foreground.len()
            )));
        }
        if let Some(l) = foreground.iter().find(|l| l.class_id >= num_classes) {
            return Err(Error::Contract(format!("class {} out of range", l.class_id)));
        }
        Ok(Self { foreground, pad_to })
    }

    pub fn len(&self) -> usize {
        self.foreground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugEntry {
    /// Index of the originating label.
    pub source: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Strategy {
    None,
    FixedRepeat { repeat: usize },
    FixedRatio { ratio: f64, seed: u64 },
}

/// Foreground entries after repetition. Entries of one source are
/// contiguous and sources appear in increasing order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedLabelSet {
    pub entries: Vec<AugEntry>,
    pub pad_to: usize,
    pub strategy: Strategy,
}

impl AugmentedLabelSet {
    /// One entry per label.
    pub fn plain(labels: &LabelSet) -> Self {
        Self::with_counts(labels, &vec![1; labels.len()], Strategy::None)
    }

    fn with_counts(labels: &LabelSet, counts: &[usize], strategy: Strategy) -> Self {
        let entries = labels
            .foreground
            .iter()
            .zip(counts)
            .enumerate()
            .flat_map(|(source, (l, &c))| {
                std::iter::repeat_n(
                    AugEntry {
                        source,
                        class_id: l.class_id,
                        bbox: l.bbox,
                    },
                    c,
                )
            })
            .collect();
        Self {
            entries,
            pad_to: labels.pad_to,
            strategy,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// How many entries each source label received.
    pub fn counts(&self, num_sources: usize) -> Vec<usize> {
        let mut c = vec![0; num_sources];
        for e in &self.entries {
            c[e.source] += 1;
        }
        c
    }
}

/// Repeats every label `repeat` times.
pub fn augment_fixed_repeat(labels: &LabelSet, repeat: usize) -> Result<AugmentedLabelSet> {
    if repeat == 0 {
        return Err(Error::Augmentation("repeat count must be at least 1".into()));
    }
    let m = labels.len();
    if repeat * m > labels.pad_to {
        return Err(Error::Augmentation(format!(
            "{m} labels x {repeat} repeats exceed {} slots",
            labels.pad_to
        )));
    }
    Ok(AugmentedLabelSet::with_counts(
        labels,
        &vec![repeat; m],
        Strategy::FixedRepeat { repeat },
    ))
}

/// Fills a fraction `ratio` of the slots with positives: each label gets
/// `F / M` copies and `F % M` labels drawn without replacement get one more,
/// where `F = max(floor(N * ratio), M)`.
pub fn augment_fixed_ratio(labels: &LabelSet, ratio: f64, seed: u64) -> Result<AugmentedLabelSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Augmentation(format!("ratio {ratio} outside (0, 1]")));
    }
    let m = labels.len();
    let strategy = Strategy::FixedRatio { ratio, seed };
    if m == 0 {
        return Ok(AugmentedLabelSet::with_counts(labels, &[], strategy));
    }
    // the epsilon absorbs representation error such as 20 * 0.1 = 2.0000000000000004
    let target = ((labels.pad_to as f64 * ratio) + 1e-9).floor() as usize;
    let f = target.max(m);
    let mut counts = vec![f / m; m];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, m, f % m) {
        counts[i] += 1;
    }
    Ok(AugmentedLabelSet::with_counts(labels, &counts, strategy))
}
