//! Split-conformal bands on the genetic-logit predictor's residuals.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::container::write_file;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// One marginal quantile per class.
    PerLogit,
    /// One quantile of `max_j |r_j|`, simultaneous over classes.
    LInfinity,
}

impl std::str::FromStr for BandMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_logit" => Ok(BandMode::PerLogit),
            "l_infinity" => Ok(BandMode::LInfinity),
            other => Err(Error::InvalidArgument(format!("unknown band mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalBand {
    pub mode: BandMode,
    pub alpha: f64,
    /// K entries in per-logit mode, one broadcast entry in L∞ mode.
    #[serde(serialize_with = "ser_deltas", deserialize_with = "de_deltas")]
    pub delta: Vec<f64>,
    pub n_cal: usize,
    #[serde(default)]
    pub bonferroni: bool,
}

impl ConformalBand {
    pub fn delta_for(&self, j: usize) -> f64 {
        if self.delta.len() == 1 {
            self.delta[0]
        } else {
            self.delta[j]
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("band serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonNumber {
    Num(f64),
    Text(String),
}

fn ser_deltas<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let items: Vec<JsonNumber> = v
        .iter()
        .map(|&x| if x.is_infinite() { JsonNumber::Text("inf".into()) } else { JsonNumber::Num(x) })
        .collect();
    items.serialize(s)
}

fn de_deltas<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Vec::<JsonNumber>::deserialize(d)?
        .into_iter()
        .map(|x| match x {
            JsonNumber::Num(v) => Ok(v),
            JsonNumber::Text(t) if t == "inf" => Ok(f64::INFINITY),
            JsonNumber::Text(t) => Err(serde::de::Error::custom(format!("invalid band width {t:?}"))),
        })
        .collect()
}

/// 1-based rank of the conformal quantile; `n + 1` when the band is unbounded.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let r = ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil();
    if r > n as f64 {
        n + 1
    } else {
        (r as usize).max(1)
    }
}

/// The rank-th smallest score, or `+∞` when the rank exceeds the count.
pub fn conformal_quantile(scores: &mut [f64], alpha: f64) -> f64 {
    let rank = conformal_rank(scores.len(), alpha);
    if rank > scores.len() {
        return f64::INFINITY;
    }
    scores.sort_by(f64::total_cmp);
    scores[rank - 1]
}

/// Calibrates on residuals `r_j = ŷ_gen_j − ĥ_j(s_img)`, one row per
/// calibration sample. Bonferroni divides α by K in per-logit mode.
pub fn calibrate(residuals: &[Vec<f64>], alpha: f64, mode: BandMode, bonferroni: bool) -> Result<ConformalBand> {
    if residuals.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    let k = residuals[0].len();
    if let Some(r) = residuals.iter().find(|r| r.len() != k) {
        return Err(Error::DimensionMismatch {
            what: "calibration residuals".into(),
            expected: k.to_string(),
            found: r.len().to_string(),
        });
    }
    if residuals.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite calibration residual".into()));
    }
    let delta = match mode {
        BandMode::PerLogit => {
            let a = if bonferroni { alpha / k as f64 } else { alpha };
            (0..k)
                .map(|j| {
                    let mut col: Vec<f64> = residuals.iter().map(|r| r[j].abs()).collect();
                    conformal_quantile(&mut col, a)
                })
                .collect()
        }
        BandMode::LInfinity => {
            let mut scores: Vec<f64> = residuals
                .iter()
                .map(|r| r.iter().fold(0.0f64, |m, x| m.max(x.abs())))
                .collect();
            vec![conformal_quantile(&mut scores, alpha)]
        }
    };
    Ok(ConformalBand {
        mode,
        alpha,
        delta,
        n_cal: residuals.len(),
        bonferroni: bonferroni && mode == BandMode::PerLogit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn rank_arithmetic() {
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(conformal_rank(4, 0.05), 5);
        assert_eq!(conformal_rank(10, 0.0), 11);
        assert_eq!(conformal_rank(10, 0.999), 1);
    }

    #[test]
    fn nine_residuals_at_alpha_tenth_take_the_maximum() {
        let r = [0.3, -1.7, 0.2, 0.9, -0.1, 1.1, 0.05, -0.6, 0.4];
        let band = calibrate(&column(&r), 0.1, BandMode::PerLogit, false).unwrap();
        assert_eq!(band.delta, vec![1.7]);
        let band = calibrate(&column(&r), 0.95, BandMode::PerLogit, false).unwrap();
        assert_eq!(band.delta, vec![0.05]);
    }

    #[test]
    fn small_sets_give_unbounded_bands() {
        let band = calibrate(&column(&[0.1, 0.2, 0.3, 0.4]), 0.05, BandMode::PerLogit, false).unwrap();
        assert_eq!(band.delta, vec![f64::INFINITY]);
        let band = calibrate(&column(&[0.1, 0.2]), 0.0, BandMode::LInfinity, false).unwrap();
        assert_eq!(band.delta, vec![f64::INFINITY]);
    }

    #[test]
    fn l_infinity_uses_row_maxima() {
        let r = vec![vec![0.1, -0.5], vec![0.3, 0.2], vec![-0.9, 0.0]];
        let band = calibrate(&r, 0.25, BandMode::LInfinity, false).unwrap();
        assert_eq!(band.delta, vec![0.9]);
        let band = calibrate(&r, 0.5, BandMode::LInfinity, false).unwrap();
        assert_eq!(band.delta, vec![0.5]);
    }

    #[test]
    fn errors() {
        assert!(matches!(calibrate(&[], 0.1, BandMode::PerLogit, false), Err(Error::EmptyCalibration)));
        assert!(calibrate(&column(&[1.0]), 1.0, BandMode::PerLogit, false).is_err());
        assert!(calibrate(&column(&[f64::NAN]), 0.1, BandMode::PerLogit, false).is_err());
    }

    #[test]
    fn json_round_trip_keeps_infinity() {
        let band = ConformalBand {
            mode: BandMode::PerLogit,
            alpha: 0.0,
            delta: vec![f64::INFINITY, 0.25],
            n_cal: 3,
            bonferroni: false,
        };
        let text = band.to_json();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<ConformalBand>(&text).unwrap(), band);
    }
}
