use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datasets::{synth_content_style, GroupedDataset, SynthConfig};
use crate::dvqae::{train_global, Architecture, DvqaeConfig, DvqaeModel, TrainConfig};
use crate::quantizer::Codebook;
use crate::CodebookConfig;

/// Atoms 0..4 sit near -1, atoms 4..8 near +1.
fn split_codebook() -> Codebook {
    let atoms = (0..8).flat_map(|k| {
        let s = if k < 4 { -1.0 } else { 1.0 };
        [s + 0.1 * k as f64, s]
    });
    Codebook::from_atoms(CodebookConfig::new(8, 2), atoms.collect()).unwrap()
}

fn store(n: usize, seed: u64, separable: bool) -> LatentStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let y = if separable { i % 2 } else { rng.random_range(0..2) };
            let indices = (0..16)
                .map(|_| if separable { 4 * y as u32 + rng.random_range(0..4) } else { rng.random_range(0..8) })
                .collect();
            LatentRecord { node: 0, content_label: y, indices }
        })
        .collect();
    LatentStore { records }
}

#[test]
fn separable_latent_store_is_learned_within_200_steps() {
    let cb = split_codebook();
    let (train, test) = (store(400, 1, true), store(400, 2, true));
    let cfg = ClassifierConfig { steps: 200, ..Default::default() };
    let clf = train_latent_classifier(&train, &cb, LatentEncoding::AtomLookup, &[train.content_labels()], &[2], &cfg).unwrap();
    let acc = latent_accuracy(&clf, &test, &cb, LatentEncoding::AtomLookup, &test.content_labels(), 0).unwrap();
    assert_eq!(acc, 1.0);
    let clf = train_latent_classifier(&train, &cb, LatentEncoding::OneHot, &[train.content_labels()], &[2], &cfg).unwrap();
    let acc = latent_accuracy(&clf, &test, &cb, LatentEncoding::OneHot, &test.content_labels(), 0).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn shuffled_labels_stay_near_chance() {
    let cb = split_codebook();
    let mut all = store(3000, 3, true);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for r in &mut all.records {
        r.content_label = rng.random_range(0..2);
    }
    let test = LatentStore { records: all.records.split_off(1000) };
    let cfg = ClassifierConfig { steps: 300, ..Default::default() };
    let clf = train_latent_classifier(&all, &cb, LatentEncoding::AtomLookup, &[all.content_labels()], &[2], &cfg).unwrap();
    let acc = latent_accuracy(&clf, &test, &cb, LatentEncoding::AtomLookup, &test.content_labels(), 0).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn training_entropy_equals_training_cross_entropy_in_bits() {
    let cb = split_codebook();
    let train = store(300, 5, false);
    let cfg = ClassifierConfig { steps: 50, ..Default::default() };
    let labels = train.content_labels();
    let clf = train_latent_classifier(&train, &cb, LatentEncoding::AtomLookup, &[labels.clone()], &[2], &cfg).unwrap();
    let all: Vec<usize> = (0..train.len()).collect();
    let x = store_features(&train, &cb, &all, LatentEncoding::AtomLookup).unwrap();
    let adv = Adversary { view: AdversaryView::Public, classifier: clf };
    let report = adv.conditional_entropy(&x, &labels).unwrap();
    let nats = adv.classifier.loss(&x, &[labels]).unwrap();
    assert!((report.entropy_bits - nats / std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn lower_training_loss_never_raises_entropy_on_that_set() {
    let cb = split_codebook();
    let train = store(200, 6, false);
    let labels = train.content_labels();
    let all: Vec<usize> = (0..train.len()).collect();
    let x = store_features(&train, &cb, &all, LatentEncoding::AtomLookup).unwrap();
    let mut seen = vec![];
    for steps in [0, 100, 400] {
        let cfg = ClassifierConfig { steps, batch_size: 200, lr: 1e-2, ..Default::default() };
        let clf = train_classifier(&x, &[labels.clone()], &[2], &cfg).unwrap();
        let loss = clf.loss(&x, &[labels.clone()]).unwrap();
        let bits = Adversary { view: AdversaryView::Public, classifier: clf }.conditional_entropy(&x, &labels).unwrap().entropy_bits;
        seen.push((loss, bits));
    }
    assert!(seen[2].0 < seen[0].0);
    for a in &seen {
        for b in &seen {
            if a.0 <= b.0 {
                assert!(a.1 <= b.1 + 1e-12);
            }
        }
    }
}

fn synth(seed: u64) -> GroupedDataset {
    synth_content_style(&SynthConfig {
        content_classes: 4,
        style_classes: 4,
        samples_per_cell: 40,
        channels: 2,
        size: 8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn synth_model(data: &GroupedDataset) -> DvqaeModel {
    let cfg = DvqaeConfig::new(
        Architecture::Conv { channels: 2, height: 8, width: 8, hidden: 8 },
        CodebookConfig::new(16, 4),
    );
    let mut model = DvqaeModel::new(cfg, 3).unwrap();
    train_global(&mut model, data, &TrainConfig { steps: 150, batch_size: 64, lr: 3e-3, ..Default::default() }).unwrap();
    model
}

#[test]
fn view_widths_follow_the_latent_layout() {
    let data = synth(1);
    let model = DvqaeModel::new(
        DvqaeConfig::new(Architecture::Conv { channels: 2, height: 8, width: 8, hidden: 3 }, CodebookConfig::new(8, 4)),
        0,
    )
    .unwrap();
    let x = data.subset(&[0, 1, 2]).unwrap();
    let public = view_features(&model, x.samples(), AdversaryView::Public, LatentEncoding::AtomLookup).unwrap();
    let private = view_features(&model, x.samples(), AdversaryView::Private, LatentEncoding::AtomLookup).unwrap();
    let both = view_features(&model, x.samples(), AdversaryView::Both, LatentEncoding::AtomLookup).unwrap();
    assert_eq!(public.shape(), &[3, 16]);
    assert_eq!(private.shape(), &[3, 4]);
    assert_eq!(both.shape(), &[3, 20]);
    assert_eq!(&both.item(1)[..16], public.item(1));
    assert_eq!(&both.item(1)[16..], private.item(1));
}

#[test]
fn private_view_leaks_more_identity_than_public_view() {
    let data = synth(2);
    let model = synth_model(&data);
    let cfg = AdversaryConfig { classifier: ClassifierConfig { steps: 300, ..AdversaryConfig::default().classifier }, ..Default::default() };
    let public = evaluate_privacy(&model, &data, AdversaryView::Public, &cfg).unwrap();
    let private = evaluate_privacy(&model, &data, AdversaryView::Private, &cfg).unwrap();
    assert!(private.entropy_bits < public.entropy_bits, "{private:?} vs {public:?}");
    assert!(private.accuracy > public.accuracy);
}

#[test]
fn overlapping_identities_are_rejected() {
    let data = synth(3);
    let model = DvqaeModel::new(
        DvqaeConfig::new(Architecture::Conv { channels: 2, height: 8, width: 8, hidden: 3 }, CodebookConfig::new(8, 4)),
        0,
    )
    .unwrap();
    let first: Vec<usize> = (0..data.len()).filter(|&i| data.private_labels()[i] < 2).collect();
    let second: Vec<usize> = (0..data.len()).filter(|&i| data.private_labels()[i] >= 1).collect();
    let r = disentanglement_score(&model, &data.subset(&first).unwrap(), &data.subset(&second).unwrap(), &AdversaryConfig::default());
    assert!(matches!(r, Err(crate::Error::Config(_))));
}

#[test]
fn held_out_identity_score_on_one_identity_is_one() {
    let data = synth(4);
    let model = DvqaeModel::new(
        DvqaeConfig::new(Architecture::Conv { channels: 2, height: 8, width: 8, hidden: 3 }, CodebookConfig::new(8, 4)),
        0,
    )
    .unwrap();
    let train: Vec<usize> = (0..data.len()).filter(|&i| data.private_labels()[i] < 3).collect();
    let eval: Vec<usize> = (0..data.len()).filter(|&i| data.private_labels()[i] == 3).collect();
    let cfg = AdversaryConfig { classifier: ClassifierConfig { steps: 20, ..Default::default() }, ..Default::default() };
    let score = disentanglement_score(&model, &data.subset(&train).unwrap(), &data.subset(&eval).unwrap(), &cfg).unwrap();
    assert_eq!(score, 1.0);
}

#[test]
fn metrics_files_have_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let row = MetricsRow {
        task: "identity".into(),
        view: "public".into(),
        accuracy: 0.5,
        entropy_bits: Some(1.0),
        k: 16,
        g: 1,
        n_c: 1,
        seed: 7,
    };
    let csv_path = dir.path().join("m.csv");
    write_metrics_csv(&csv_path, &[row.clone()]).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "task,view,accuracy,entropy_bits,K,G,n_c,seed");
    let json_path = dir.path().join("m.json");
    write_metrics_json(&json_path, &[row]).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(json_path).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["rows"][0]["K"], 16);
}
