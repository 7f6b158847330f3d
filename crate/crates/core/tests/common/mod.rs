#![allow(dead_code)]

use protoabstain::cal::{train_cal, CalConfig, CalModel};
use protoabstain::data::{make_splits, synth_generate, Dataset, Modality, Sample, SplitTag, SynthConfig};
use protoabstain::protopnet::{train_protopnet, ProtoPNet, ProtoPNetConfig};
use protoabstain::tree::{train_prototree, ProtoTree, TreeTrainConfig};

/// 16 classes, 2800 samples split 600 / 200 / 2000.
pub fn cal_dataset(seed: u64) -> Dataset {
    let cfg = SynthConfig {
        n_per_class: 175,
        ..SynthConfig::default()
    };
    let ds = synth_generate(&cfg, seed).unwrap();
    let out = make_splits(&ds.labels(), [6.0 / 28.0, 2.0 / 28.0, 20.0 / 28.0], 1, seed).unwrap();
    ds.apply_split(&out).unwrap()
}

/// 16 classes, 3200 samples split 1000 / 200 / 2000.
pub fn alp_dataset(seed: u64) -> Dataset {
    let cfg = SynthConfig {
        n_per_class: 200,
        ..SynthConfig::default()
    };
    let ds = synth_generate(&cfg, seed).unwrap();
    let out = make_splits(&ds.labels(), [0.3125, 0.0625, 0.625], 1, seed).unwrap();
    ds.apply_split(&out).unwrap()
}

pub struct Splits<'a> {
    pub train: Vec<&'a Sample>,
    pub cal: Vec<&'a Sample>,
    pub test: Vec<&'a Sample>,
}

pub fn splits(ds: &Dataset) -> Splits<'_> {
    Splits {
        train: ds.split(SplitTag::Train),
        cal: ds.split(SplitTag::Validation),
        test: ds.split(SplitTag::Test),
    }
}

pub fn protopnets(train: &[&Sample], seed: u64) -> (ProtoPNet, ProtoPNet) {
    let mut cfg = ProtoPNetConfig::default();
    cfg.schedule.seed = seed;
    let (img, _) = train_protopnet(train, 16, Modality::Image, &cfg).unwrap();
    let (gen, _) = train_protopnet(train, 16, Modality::Genetic, &cfg).unwrap();
    (img, gen)
}

pub fn prototrees(train: &[&Sample], seed: u64) -> (ProtoTree, ProtoTree) {
    let cfg = TreeTrainConfig {
        seed,
        ..TreeTrainConfig::default()
    };
    let img = train_prototree(train, 16, Modality::Image, &cfg).unwrap();
    let gen = train_prototree(train, 16, Modality::Genetic, &cfg).unwrap();
    (img, gen)
}

pub fn cal_model(s: &Splits<'_>, seed: u64) -> CalModel {
    let (img, gen) = protopnets(&s.train, seed);
    let cfg = CalConfig {
        seed,
        ..CalConfig::default()
    };
    train_cal(&img, &gen, &s.train, &s.cal, &cfg).unwrap().0
}

/// Balanced accuracy computed from scratch.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut hit = vec![0.0; k];
    let mut n = vec![0.0; k];
    for (&p, &y) in preds.iter().zip(labels) {
        n[y] += 1.0;
        if p == y {
            hit[y] += 1.0;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&j| n[j] > 0.0).collect();
    present.iter().map(|&j| hit[j] / n[j]).sum::<f64>() / present.len() as f64
}
