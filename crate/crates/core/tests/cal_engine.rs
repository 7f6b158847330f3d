mod common;

use std::sync::OnceLock;

use protoabstain::cal::{
    cal_sample_loss, decisions_to_csv, infer_cal, load_cal, mix_logits, save_cal, train_cal, BandMode, CalConfig,
    CalModel, ConformalBand,
};
use protoabstain::data::{Dataset, GeneticAccess};
use protoabstain::eval::{cal_ablation, evaluate_cal, sweep_alpha};
use protoabstain::math::{argmax, cross_entropy};
use protoabstain::protopnet::ProtoPNet;
use protoabstain::Error;

use common::{cal_dataset, splits};

struct Fixture {
    ds: Dataset,
    image: ProtoPNet,
    genetic: ProtoPNet,
    model: CalModel,
}

fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let ds = cal_dataset(2);
        let s = splits(&ds);
        let (image, genetic) = common::protopnets(&s.train, 2);
        let cfg = CalConfig {
            seed: 2,
            ..CalConfig::default()
        };
        let model = train_cal(&image, &genetic, &s.train, &s.cal, &cfg).unwrap().0;
        drop(s);
        Fixture {
            ds,
            image,
            genetic,
            model,
        }
    })
}

fn band(model: &CalModel, alpha: f64) -> ConformalBand {
    let s = splits(&fixture().ds);
    model.calibrate(&model.features(&s.cal).unwrap(), alpha, BandMode::PerLogit, false).unwrap()
}

#[test]
fn zero_weights_and_zero_rate_leave_the_model_unchanged() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let cfg = CalConfig {
        lambda_modality: 0.0,
        lambda_margin: 0.0,
        lambda_predictor: 0.0,
        lr: 0.0,
        epochs: 3,
        ..CalConfig::default()
    };
    let (model, _) = train_cal(&fx.image, &fx.genetic, &s.train, &s.cal, &cfg).unwrap();
    assert_eq!(model.m, vec![0.0; 16]);
    assert_eq!(model.image, fx.image);
    assert_eq!(model.genetic, fx.genetic);
    assert_eq!(model.predictor, fx.image.head);
}

#[test]
fn training_leaves_prototypes_bit_identical() {
    let fx = fixture();
    assert_eq!(fx.model.image.protos, fx.image.protos);
    assert_eq!(fx.model.genetic.protos, fx.genetic.protos);
    assert_ne!(fx.model.image.head, fx.image.head);
}

#[test]
fn dominant_modality_loss_makes_the_model_image_only() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let cfg = CalConfig {
        lambda_modality: 50.0,
        ..CalConfig::default()
    };
    let (model, _) = train_cal(&fx.image, &fx.genetic, &s.train, &s.cal, &cfg).unwrap();
    assert!(model.image_weights().iter().all(|&w| w > 0.99), "{:?}", model.image_weights());
    let (report, _) = evaluate_cal(&model, &band(&model, 0.05), &s.test, &GeneticAccess::new()).unwrap();
    assert!(report.success_rate > 0.99, "success {}", report.success_rate);
}

#[test]
fn abstaining_samples_ignore_true_genetic_logits() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let model = &fx.model;
    let b = band(model, 0.05);
    let cfg = CalConfig {
        lambda_predictor: 0.0,
        ..CalConfig::default()
    };
    let mut perturbed = model.clone();
    perturbed.genetic.head.weights.iter_mut().for_each(|w| *w += 0.7);
    let sample: Vec<_> = s.train.iter().step_by(3).copied().collect();
    let feats = model.features(&sample).unwrap();
    let (mut gated, mut open) = (0, 0);
    for f in &feats {
        let out = model.outputs(f).unwrap();
        let abstain = model.image_side(&out.y_img, &out.y_hat, &b).abstain;
        let before = cal_sample_loss(model, &b, f, &cfg).unwrap().loss;
        let after = cal_sample_loss(&perturbed, &b, f, &cfg).unwrap().loss;
        if abstain {
            assert_eq!(before, after);
            gated += 1;
        } else if before != after {
            open += 1;
        }
    }
    assert!(gated > 0 && open > 0, "gated {gated}, open {open}");
}

#[test]
fn unbounded_band_always_uses_the_multimodal_cross_entropy() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let model = &fx.model;
    let b = band(model, 0.0);
    assert!(b.delta.iter().all(|d| d.is_infinite()));
    let cfg = CalConfig {
        lambda_margin: 0.0,
        lambda_predictor: 0.0,
        ..CalConfig::default()
    };
    for f in model.features(&s.train[..50]).unwrap() {
        let out = model.outputs(&f).unwrap();
        let expect = cross_entropy(&mix_logits(&out.y_img, out.y_gen.as_ref().unwrap(), &model.m), f.label).0;
        assert_eq!(cal_sample_loss(model, &b, &f, &cfg).unwrap().loss, expect);
    }
}

#[test]
fn overlapping_calibration_split_is_rejected() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let mut cal = s.cal.clone();
    cal.push(s.train[0]);
    let err = train_cal(&fx.image, &fx.genetic, &s.train, &cal, &CalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::SplitOverlap(id) if id == s.train[0].id));
    let err = train_cal(&fx.image, &fx.genetic, &s.train, &[], &CalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyCalibration));
}

#[test]
fn withheld_genetics_surface_as_measurement_required() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let b = band(&fx.model, 0.05);
    let access = GeneticAccess::withheld();
    let (mut abstained, mut required) = (0, 0);
    for sample in s.test.iter().step_by(7) {
        match infer_cal(&fx.model, &b, sample, &access) {
            Ok(d) => {
                assert!(d.abstain && !d.genetic_queried);
                abstained += 1;
            }
            Err(Error::MeasurementRequired(d)) => {
                assert!(!d.abstain && !d.genetic_queried);
                assert_eq!(d.sample_id, sample.id);
                required += 1;
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }
    assert!(abstained > 0 && required > 0);
    assert_eq!(access.measured(), 0);
}

#[test]
fn genetic_reads_are_counted_only_for_queried_samples() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let access = GeneticAccess::new();
    let (report, decisions) = evaluate_cal(&fx.model, &band(&fx.model, 0.05), &s.test, &access).unwrap();
    let queried = decisions.iter().filter(|d| d.genetic_queried).count();
    assert_eq!(report.genetic_measurements, queried);
    assert_eq!(access.audited(), decisions.len() - queried);
    assert!((report.success_rate - (1.0 - queried as f64 / decisions.len() as f64)).abs() < 1e-12);
}

#[test]
fn confident_image_sample_abstains() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let b = band(&fx.model, 0.05);
    let access = GeneticAccess::new();
    let best = s
        .test
        .iter()
        .max_by(|a, c| {
            let margin = |x: &&&protoabstain::data::Sample| {
                let y = fx.model.image.sample_logits(x).unwrap();
                let k = argmax(&y);
                let runner = y.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| *v).fold(f64::MIN, f64::max);
                y[k] - runner
            };
            margin(a).total_cmp(&margin(c))
        })
        .unwrap();
    assert!(infer_cal(&fx.model, &b, best, &access).unwrap().abstain);
}

#[test]
fn sweep_matches_independent_calibrations() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let model = &fx.model;
    let cal_feats = model.features(&s.cal).unwrap();
    let residuals = model.residuals(&cal_feats).unwrap();
    let test = model.all_outputs(&model.features(&s.test).unwrap()).unwrap();
    let alphas = [0.3, 0.0, 0.05, 0.1];
    let sweep = sweep_alpha(model, &residuals, &test, &alphas, BandMode::PerLogit, false).unwrap();
    assert_eq!(sweep.rows.iter().map(|r| r.alpha).collect::<Vec<_>>(), vec![0.0, 0.05, 0.1, 0.3]);
    for row in &sweep.rows {
        let single = model.calibrate(&cal_feats, row.alpha, BandMode::PerLogit, false).unwrap();
        assert_eq!(row.delta, single.delta);
        let (report, _) = evaluate_cal(model, &single, &s.test, &GeneticAccess::new()).unwrap();
        assert_eq!(row.success_rate, report.success_rate);
        assert_eq!(row.balanced_accuracy, report.balanced_accuracy);
        assert_eq!(Some(row.abstention_error_rate), report.abstention_error_rate);
    }
    assert_eq!(sweep.rows[0].success_rate, 0.0);
}

#[test]
fn switched_off_cell_equals_training_without_those_terms() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let base = CalConfig {
        epochs: 4,
        seed: 5,
        ..CalConfig::default()
    };
    let rows = cal_ablation(&fx.image, &fx.genetic, &s.train, &s.cal, &s.test, &base, 0.05).unwrap();
    assert_eq!(rows[0].label, "Mar. + Mod. Loss");
    let neither = rows.iter().find(|r| r.label == "Neither Loss").unwrap();
    let off = CalConfig {
        lambda_margin: 0.0,
        lambda_modality: 0.0,
        ..base
    };
    let (model, _) = train_cal(&fx.image, &fx.genetic, &s.train, &s.cal, &off).unwrap();
    let b = model.calibrate(&model.features(&s.cal).unwrap(), 0.05, BandMode::PerLogit, false).unwrap();
    let (report, _) = evaluate_cal(&model, &b, &s.test, &GeneticAccess::new()).unwrap();
    assert_eq!(neither.success_rate, report.success_rate);
    assert_eq!(neither.balanced_accuracy, report.balanced_accuracy);
}

#[test]
fn training_is_deterministic_per_seed() {
    let fx = fixture();
    let s = splits(&fx.ds);
    let cfg = CalConfig {
        epochs: 3,
        seed: 9,
        ..CalConfig::default()
    };
    let run = || {
        let (model, _) = train_cal(&fx.image, &fx.genetic, &s.train, &s.cal, &cfg).unwrap();
        let b = model.calibrate(&model.features(&s.cal).unwrap(), 0.05, BandMode::PerLogit, false).unwrap();
        let (_, d) = evaluate_cal(&model, &b, &s.test, &GeneticAccess::new()).unwrap();
        (model, decisions_to_csv(&d))
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a.m, b.m);
    assert_eq!(log_a, log_b);
}

#[test]
fn checkpoint_and_band_round_trip() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("cal.ckpt");
    save_cal(&fx.model, &ckpt).unwrap();
    assert_eq!(load_cal(&ckpt).unwrap(), fx.model);
    for alpha in [0.0, 0.1] {
        let b = band(&fx.model, alpha);
        let path = dir.path().join("band.json");
        b.save(&path).unwrap();
        assert_eq!(ConformalBand::load(&path).unwrap(), b);
    }
}
