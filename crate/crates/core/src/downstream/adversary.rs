//! Identity adversaries on public, private or combined latent parts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{gather_rows, train_classifier, Classifier, ClassifierConfig, LatentEncoding};
use super::entropy::{report_from_logits, AdversaryView, PrivacyReport};
use crate::datasets::GroupedDataset;
use crate::dvqae::DvqaeModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::classifier::latent_features;

const FEATURE_CHUNK: usize = 200;

/// Held-out share of every class when training an adversary.
pub const DEFAULT_TEST_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub classifier: ClassifierConfig,
    pub encoding: LatentEncoding,
    pub test_fraction: f64,
    /// Scale every feature to zero mean and unit variance using the
    /// adversary's training rows.
    pub standardize: bool,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            classifier: ClassifierConfig { hidden: vec![128, 128], steps: 600, ..Default::default() },
            encoding: LatentEncoding::AtomLookup,
            test_fraction: DEFAULT_TEST_FRACTION,
            standardize: true,
        }
    }
}

/// Per-sample features of one view; `[N, D]`.
///
/// Public features come from the transmitted indices only; private features
/// are each sample's residual `mean(h - z_q)`.
pub fn view_features(model: &DvqaeModel, samples: &Tensor, view: AdversaryView, encoding: LatentEncoding) -> Result<Tensor> {
    let n = samples.batch();
    if n == 0 {
        return Err(Error::Empty("samples"));
    }
    let per = model.indices_per_sample();
    let mut rows: Vec<f64> = Vec::new();
    let mut width = 0;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(FEATURE_CHUNK) {
        let x = gather_rows(samples, chunk)?;
        let split = model.split_batch(&x)?;
        let public = if view == AdversaryView::Private {
            None
        } else {
            let idx: Vec<&[u32]> = split.public.indices.chunks(per).collect();
            Some(latent_features(&model.codebook, &idx, encoding)?)
        };
        for s in 0..chunk.len() {
            let start = rows.len();
            if let Some(p) = &public {
                rows.extend_from_slice(p.item(s));
            }
            if view != AdversaryView::Public {
                rows.extend_from_slice(&split.sample_private[s]);
            }
            width = rows.len() - start;
        }
    }
    Tensor::from_vec(&[n, width], rows)
}

/// Stratified split: `fraction` of each class (at least one sample when the
/// class has two or more) goes to the second list.
pub fn per_class_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config("split fraction must lie in [0, 1)".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (vec![], vec![]);
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let mut k = (idx.len() as f64 * fraction).round() as usize;
        if fraction > 0.0 && idx.len() >= 2 {
            k = k.clamp(1, idx.len() - 1);
        }
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// A trained identity classifier together with the view it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Adversary {
    pub view: AdversaryView,
    pub classifier: Classifier,
}

impl Adversary {
    pub fn train(features: &Tensor, labels: &[usize], classes: usize, view: AdversaryView, config: &ClassifierConfig) -> Result<Self> {
        let classifier = train_classifier(features, &[labels.to_vec()], &[classes], config)?;
        Ok(Adversary { view, classifier })
    }

    /// `Ĥ(Y|view)` and accuracy on held-out features.
    pub fn conditional_entropy(&self, features: &Tensor, labels: &[usize]) -> Result<PrivacyReport> {
        if labels.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let logits = self.classifier.logits(features)?.remove(0);
        report_from_logits(self.view.name(), &logits, labels)
    }
}

/// Trains an adversary for private labels on a 90/10 per-class split of
/// `data` and reports on the held-out part.
pub fn evaluate_privacy(
    model: &DvqaeModel,
    data: &GroupedDataset,
    view: AdversaryView,
    config: &AdversaryConfig,
) -> Result<PrivacyReport> {
    let features = view_features(model, data.samples(), view, config.encoding)?;
    evaluate_features(&features, data.private_labels(), data.private_classes(), view, config)
}

/// As [`evaluate_privacy`] on precomputed features.
pub fn evaluate_features(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    view: AdversaryView,
    config: &AdversaryConfig,
) -> Result<PrivacyReport> {
    let (train, test) = per_class_split(labels, config.test_fraction, config.classifier.seed)?;
    if test.is_empty() {
        return Err(Error::Empty("adversary test split"));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (mut x_train, mut x_test) = (gather_rows(features, &train)?, gather_rows(features, &test)?);
    if config.standardize {
        let s = Standardizer::fit(&x_train);
        s.apply(&mut x_train);
        s.apply(&mut x_test);
    }
    let adv = Adversary::train(&x_train, &pick(&train), classes, view, &config.classifier)?;
    adv.conditional_entropy(&x_test, &pick(&test))
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Column statistics of `[N, D]` rows; constant columns keep scale 1.
    pub fn fit(rows: &Tensor) -> Self {
        let (n, d) = (rows.batch(), rows.item_len());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(rows.item(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            var.iter_mut().zip(rows.item(i)).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m));
        }
        let scale = var.iter().map(|s| if *s > 0.0 { (s / n as f64).sqrt() } else { 1.0 }).collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, rows: &mut Tensor) {
        let d = self.mean.len();
        for row in rows.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Identity recognition on identities the adversary never saw.
///
/// An adversary is trained on the public codes of `train`; its trunk then
/// embeds the public codes of `eval`, half of each identity's samples
/// enrol a centroid and the other half are classified by nearest centroid.
pub fn disentanglement_score(
    model: &DvqaeModel,
    train: &GroupedDataset,
    eval: &GroupedDataset,
    config: &AdversaryConfig,
) -> Result<f64> {
    let seen: BTreeSet<usize> = train.private_labels().iter().copied().collect();
    if let Some(p) = eval.private_labels().iter().find(|p| seen.contains(p)) {
        return Err(Error::Config(format!("identity {p} appears in both adversary training and evaluation data")));
    }
    if eval.is_empty() {
        return Err(Error::Empty("evaluation identities"));
    }
    let mut features = view_features(model, train.samples(), AdversaryView::Public, config.encoding)?;
    let mut probe = view_features(model, eval.samples(), AdversaryView::Public, config.encoding)?;
    if config.standardize {
        let s = Standardizer::fit(&features);
        s.apply(&mut features);
        s.apply(&mut probe);
    }
    let adv = Adversary::train(&features, train.private_labels(), train.private_classes(), AdversaryView::Public, &config.classifier)?;
    let embedded = adv.classifier.embed(&probe)?;
    nearest_centroid_accuracy(&embedded, eval.private_labels(), config.classifier.seed)
}

/// Enrol half of every class as a centroid, classify the rest.
pub fn nearest_centroid_accuracy(embedded: &Tensor, labels: &[usize], seed: u64) -> Result<f64> {
    let (enrol, probe) = per_class_split(labels, 0.5, seed)?;
    let d = embedded.item_len();
    let mut centroids: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for &i in &enrol {
        let e = centroids.entry(labels[i]).or_insert_with(|| (vec![0.0; d], 0));
        e.0.iter_mut().zip(embedded.item(i)).for_each(|(a, v)| *a += v);
        e.1 += 1;
    }
    for (sum, n) in centroids.values_mut() {
        sum.iter_mut().for_each(|v| *v /= *n as f64);
    }
    if probe.is_empty() {
        return Ok(1.0);
    }
    let mut correct = 0;
    for &i in &probe {
        let x = embedded.item(i);
        let best = centroids
            .iter()
            .map(|(&c, (mu, _))| (c, mu.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
            .fold((usize::MAX, f64::INFINITY), |acc, (c, d)| if d < acc.1 { (c, d) } else { acc });
        correct += usize::from(best.0 == labels[i]);
    }
    Ok(correct as f64 / probe.len() as f64)
}
