//! Training objective computed from pose or homography labels alone.
//!
//! Both levels get a class-balanced binary cross entropy on their
//! confidences, with labels from thresholding the geometric error of the
//! level's parent, and a geometric term averaging the error of refined
//! matches whose parent passes a gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Match, Supervision};

const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub theta_cls_mid: f64,
    pub theta_geo_mid: f64,
    pub theta_cls_fine: f64,
    pub theta_geo_fine: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            theta_cls_mid: 50.0,
            theta_geo_mid: 50.0,
            theta_cls_fine: 5.0,
            theta_geo_fine: 5.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let thetas = [
            self.theta_cls_mid,
            self.theta_geo_mid,
            self.theta_cls_fine,
            self.theta_geo_fine,
        ];
        if thetas.iter().any(|t| t.is_nan() || *t <= 0.0) || self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(
                "loss thresholds must be positive and alpha non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Binary labels plus the number of parents whose distance was undefined
/// (those are labeled negative).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub labels: Vec<bool>,
    pub undefined: usize,
}

impl Labels {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

/// `label = distance(parent) < theta`.
pub fn classification_labels(parents: &[Match], supervision: &Supervision, theta_cls: f64) -> Labels {
    labels_from_distances(parents.iter().map(|m| supervision.distance(m).ok()), theta_cls)
}

fn labels_from_distances(distances: impl Iterator<Item = Option<f64>>, theta: f64) -> Labels {
    let mut undefined = 0;
    let labels = distances
        .map(|d| match d {
            Some(d) => d < theta,
            None => {
                undefined += 1;
                false
            }
        })
        .collect();
    Labels { labels, undefined }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BceOutput {
    pub loss: f64,
    /// Positive-class weight `|neg| / |pos|`, or 1 on fallback.
    pub weight: f64,
    /// Set when one class is absent and the weight fell back to 1.
    pub fallback: bool,
}

/// Balance weight for a label vector.
pub fn balance_weight(labels: &[bool]) -> (f64, bool) {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        (1.0, true)
    } else {
        (neg as f64 / pos as f64, false)
    }
}

/// Class-balanced binary cross entropy, averaged over all entries.
pub fn weighted_bce(conf: &[f64], labels: &[bool]) -> BceOutput {
    weighted_bce_grad(conf, labels).0
}

/// As [`weighted_bce`], also returning `d loss / d conf`.
pub fn weighted_bce_grad(conf: &[f64], labels: &[bool]) -> (BceOutput, Vec<f64>) {
    assert_eq!(conf.len(), labels.len(), "confidence/label length mismatch");
    let (weight, fallback) = balance_weight(labels);
    let n = conf.len();
    if n == 0 {
        return (
            BceOutput {
                loss: 0.0,
                weight,
                fallback,
            },
            Vec::new(),
        );
    }
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; n];
    for (i, (&c, &y)) in conf.iter().zip(labels).enumerate() {
        if y {
            let a = c.max(LOG_CLAMP);
            sum += weight * a.ln();
            if c > LOG_CLAMP {
                grad[i] = -inv_n * weight / c;
            }
        } else {
            let a = (1.0 - c).max(LOG_CLAMP);
            sum += a.ln();
            if 1.0 - c > LOG_CLAMP {
                grad[i] = inv_n / (1.0 - c);
            }
        }
    }
    (
        BceOutput {
            loss: -sum * inv_n,
            weight,
            fallback,
        },
        grad,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoOutput {
    pub loss: f64,
    /// Number of matches passing the gate and contributing.
    pub gated: usize,
    /// Set when no match passed the gate (loss is 0).
    pub empty: bool,
}

/// Mean distance of refined matches whose parent is closer than `theta_geo`.
pub fn geometric_loss(
    refined: &[Match],
    parents: &[Match],
    supervision: &Supervision,
    theta_geo: f64,
) -> GeoOutput {
    let sups = vec![*supervision; refined.len()];
    geometric_terms(refined, parents, &sups, theta_geo).0
}

fn geometric_terms(
    refined: &[Match],
    parents: &[Match],
    supervision: &[Supervision],
    theta: f64,
) -> (GeoOutput, Vec<[f64; 4]>) {
    assert_eq!(refined.len(), parents.len(), "refined/parent length mismatch");
    let mut grads = vec![[0.0; 4]; refined.len()];
    let mut terms = Vec::new();
    for (i, ((r, p), s)) in refined.iter().zip(parents).zip(supervision).enumerate() {
        let pass = matches!(s.distance(p), Ok(d) if d < theta);
        if !pass {
            continue;
        }
        if let Ok((d, g)) = s.distance_grad(r) {
            terms.push((i, d, g));
        }
    }
    if terms.is_empty() {
        return (
            GeoOutput {
                loss: 0.0,
                gated: 0,
                empty: true,
            },
            grads,
        );
    }
    let inv = 1.0 / terms.len() as f64;
    let mut sum = 0.0;
    for &(i, d, g) in &terms {
        sum += d;
        grads[i] = g.map(|v| v * inv);
    }
    (
        GeoOutput {
            loss: sum * inv,
            gated: terms.len(),
            empty: false,
        },
        grads,
    )
}

/// Flattened refinement outputs of a training batch. Every per-match slice
/// has the same length; `pair_index[i]` selects the supervision of match `i`.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub supervision: &'a [Supervision],
    pub pair_index: &'a [usize],
    pub proposals: &'a [Match],
    pub mid: &'a [Match],
    pub mid_conf: &'a [f64],
    pub fine: &'a [Match],
    pub fine_conf: &'a [f64],
}

/// Gradients of the total loss with respect to the refinement outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub mid: Vec<[f64; 4]>,
    pub mid_conf: Vec<f64>,
    pub fine: Vec<[f64; 4]>,
    pub fine_conf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub cls_mid: f64,
    pub cls_fine: f64,
    pub geo_mid: f64,
    pub geo_fine: f64,
    pub pos_count_mid: usize,
    pub neg_count_mid: usize,
    pub pos_count_fine: usize,
    pub neg_count_fine: usize,
    pub w_mid: f64,
    pub w_fine: f64,
    pub geo_count_mid: usize,
    pub geo_count_fine: usize,
    pub undefined_count: usize,
    pub bce_fallback: bool,
    pub geo_empty: bool,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,total,cls_mid,cls_fine,geo_mid,geo_fine,\
pos_count_mid,neg_count_mid,pos_count_fine,neg_count_fine,w_mid,w_fine,geo_count_mid,\
geo_count_fine,undefined_count,bce_fallback,geo_empty";

    pub fn csv_row(&self, step: usize, epoch: usize, lr: f64) -> String {
        format!(
            "{step},{epoch},{lr},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.total,
            self.cls_mid,
            self.cls_fine,
            self.geo_mid,
            self.geo_fine,
            self.pos_count_mid,
            self.neg_count_mid,
            self.pos_count_fine,
            self.neg_count_fine,
            self.w_mid,
            self.w_fine,
            self.geo_count_mid,
            self.geo_count_fine,
            self.undefined_count,
            self.bce_fallback as u8,
            self.geo_empty as u8,
        )
    }
}

/// Total loss `alpha * (cls_mid + cls_fine) + geo_mid + geo_fine` and its
/// gradients. Mid labels and gate come from the proposals, fine labels and
/// gate from the mid matches.
pub fn total_loss(inputs: &LossInputs<'_>, config: &LossConfig) -> (LossReport, LossGrads) {
    let n = inputs.proposals.len();
    for len in [
        inputs.pair_index.len(),
        inputs.mid.len(),
        inputs.mid_conf.len(),
        inputs.fine.len(),
        inputs.fine_conf.len(),
    ] {
        assert_eq!(len, n, "loss input length mismatch");
    }
    let sups: Vec<Supervision> = inputs.pair_index.iter().map(|&p| inputs.supervision[p]).collect();
    let dist = |ms: &[Match]| -> Vec<Option<f64>> {
        ms.iter().zip(&sups).map(|(m, s)| s.distance(m).ok()).collect()
    };

    let labels_mid = labels_from_distances(dist(inputs.proposals).into_iter(), config.theta_cls_mid);
    let labels_fine = labels_from_distances(dist(inputs.mid).into_iter(), config.theta_cls_fine);
    let (bce_mid, g_cm) = weighted_bce_grad(inputs.mid_conf, &labels_mid.labels);
    let (bce_fine, g_cf) = weighted_bce_grad(inputs.fine_conf, &labels_fine.labels);
    let (geo_mid, g_m) = geometric_terms(inputs.mid, inputs.proposals, &sups, config.theta_geo_mid);
    let (geo_fine, g_f) = geometric_terms(inputs.fine, inputs.mid, &sups, config.theta_geo_fine);

    let report = LossReport {
        total: config.alpha * (bce_mid.loss + bce_fine.loss) + geo_mid.loss + geo_fine.loss,
        cls_mid: bce_mid.loss,
        cls_fine: bce_fine.loss,
        geo_mid: geo_mid.loss,
        geo_fine: geo_fine.loss,
        pos_count_mid: labels_mid.positives(),
        neg_count_mid: labels_mid.negatives(),
        pos_count_fine: labels_fine.positives(),
        neg_count_fine: labels_fine.negatives(),
        w_mid: bce_mid.weight,
        w_fine: bce_fine.weight,
        geo_count_mid: geo_mid.gated,
        geo_count_fine: geo_fine.gated,
        undefined_count: labels_mid.undefined + labels_fine.undefined,
        bce_fallback: bce_mid.fallback || bce_fine.fallback,
        geo_empty: geo_mid.empty || geo_fine.empty,
    };
    let a = config.alpha;
    let grads = LossGrads {
        mid: g_m,
        mid_conf: g_cm.into_iter().map(|g| a * g).collect(),
        fine: g_f,
        fine_conf: g_cf.into_iter().map(|g| a * g).collect(),
    };
    (report, grads)
}
