//! Conformal abstention: decide per sample whether the image alone pins
//! down the multimodal prediction, and skip the genetic measurement if so.

pub mod band;
pub mod decision;
pub mod logits;
pub mod losses;
pub mod model;
pub mod train;

pub use band::{calibrate, conformal_quantile, conformal_rank, BandMode, ConformalBand};
pub use decision::{decisions_to_csv, write_decisions_csv, Decision, DECISION_CSV_HEADER};
pub use logits::{abstention_decision, mix_logits, worst_case_logits, worst_case_margin};
pub use losses::{margin_loss, modality_loss, predictor_loss};
pub use model::{
    cal_checkpoint, cal_from_checkpoint, infer_cal, infer_unimodal, load_cal, save_cal, CalFeatures, CalModel,
    CalOutputs, ImageSide, KRule,
};
pub use train::{cal_batch_loss, cal_sample_loss, train_cal, CalConfig, CalEpoch, CalGrad, Trainable};
