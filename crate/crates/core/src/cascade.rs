//! Candidate-window generation: Haar features on integral images, boosted
//! threshold stumps, an attentional cascade with an adjustable last-stage
//! threshold, and a wavelet-residual verifier that scores the survivors.
//!
//! Features are defined on a canonical 24x24 window and scaled to each
//! scanned window by mapping their rectangle corners; values are divided
//! by the area growth factor and the window's intensity standard
//! deviation, so scores are comparable across scales and exposure.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gabor::{solve_weights, Gwn};
use crate::imaging::{Image, IntegralImage};

/// Canonical training/detection window side.
pub const CANONICAL_WINDOW: usize = 24;

/// Square scan window in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateWindow {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub score: f64,
}

impl CandidateWindow {
    pub fn new(x: usize, y: usize, size: usize) -> CandidateWindow {
        CandidateWindow {
            x,
            y,
            size,
            score: 0.0,
        }
    }

    /// Continuous center in pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + (self.size as f64 - 1.0) / 2.0,
            self.y as f64 + (self.size as f64 - 1.0) / 2.0,
        )
    }

    pub fn iou(&self, other: &CandidateWindow) -> f64 {
        let x1 = self.x.max(other.x) as f64;
        let y1 = self.y.max(other.y) as f64;
        let x2 = (self.x + self.size).min(other.x + other.size) as f64;
        let y2 = (self.y + self.size).min(other.y + other.size) as f64;
        let inter = (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
        let union = (self.size * self.size + other.size * other.size) as f64 - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn in_bounds(&self, img_w: usize, img_h: usize) -> bool {
        self.x + self.size <= img_w && self.y + self.size <= img_h
    }
}

/// Plain and squared summed-area tables of one image.
#[derive(Debug, Clone)]
pub struct Integrals {
    pub sum: IntegralImage,
    pub sum_sq: IntegralImage,
}

impl Integrals {
    pub fn build(img: &Image) -> Integrals {
        Integrals {
            sum: IntegralImage::build(img),
            sum_sq: IntegralImage::build_squared(img),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaarKind {
    /// Left/right halves, right minus left.
    TwoRectHorizontal,
    /// Top/bottom halves, top minus bottom.
    TwoRectVertical,
    /// Horizontal thirds, outer minus twice the middle.
    ThreeRect,
    /// Checkerboard quadrants, main diagonal minus anti-diagonal.
    FourRect,
}

impl HaarKind {
    pub const ALL: [HaarKind; 4] = [
        HaarKind::TwoRectHorizontal,
        HaarKind::TwoRectVertical,
        HaarKind::ThreeRect,
        HaarKind::FourRect,
    ];

    /// Smallest feature box (width, height) the kind tiles.
    fn cell(self) -> (usize, usize) {
        match self {
            HaarKind::TwoRectHorizontal => (2, 1),
            HaarKind::TwoRectVertical => (1, 2),
            HaarKind::ThreeRect => (3, 1),
            HaarKind::FourRect => (2, 2),
        }
    }
}

/// Rectangle feature in canonical 24x24 coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HaarFeature {
    pub kind: HaarKind,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl HaarFeature {
    /// Signed rectangle-sum difference in units of the canonical window:
    /// the raw difference at the scaled geometry divided by the area
    /// growth `(size/24)^2` and the window's intensity standard
    /// deviation. Zero-variance windows yield 0.
    pub fn evaluate(&self, integrals: &Integrals, window: &CandidateWindow) -> Result<f64> {
        if !window.in_bounds(integrals.sum.width(), integrals.sum.height()) {
            return Err(Error::WindowOutOfBounds {
                x: window.x,
                y: window.y,
                size: window.size,
                width: integrals.sum.width(),
                height: integrals.sum.height(),
            });
        }
        let n = (window.size * window.size) as f64;
        let total = integrals
            .sum
            .rect_sum_unchecked(window.x, window.y, window.size, window.size);
        let total_sq =
            integrals
                .sum_sq
                .rect_sum_unchecked(window.x, window.y, window.size, window.size);
        let mean = total / n;
        let variance = (total_sq / n - mean * mean).max(0.0);
        // The cancellation above leaves O(1e-13) noise on genuinely flat
        // windows; one quantization step of contrast gives ~1e-5.
        if variance < 1e-10 {
            return Ok(0.0);
        }
        let sigma = variance.sqrt();
        let k = window.size as f64 / CANONICAL_WINDOW as f64;
        // Map a canonical coordinate onto the window.
        let map_x = |v: usize| window.x + (v as f64 * k).round() as usize;
        let map_y = |v: usize| window.y + (v as f64 * k).round() as usize;
        let rect = |x0: usize, x1: usize, y0: usize, y1: usize| -> f64 {
            integrals.sum.rect_sum_unchecked(x0, y0, x1 - x0, y1 - y0)
        };
        let diff = match self.kind {
            HaarKind::TwoRectHorizontal => {
                let (x0, xm, x1) = (map_x(self.x), map_x(self.x + self.w / 2), map_x(self.x + self.w));
                let (y0, y1) = (map_y(self.y), map_y(self.y + self.h));
                rect(xm, x1, y0, y1) - rect(x0, xm, y0, y1)
            }
            HaarKind::TwoRectVertical => {
                let (x0, x1) = (map_x(self.x), map_x(self.x + self.w));
                let (y0, ym, y1) = (map_y(self.y), map_y(self.y + self.h / 2), map_y(self.y + self.h));
                rect(x0, x1, y0, ym) - rect(x0, x1, ym, y1)
            }
            HaarKind::ThreeRect => {
                let x0 = map_x(self.x);
                let xa = map_x(self.x + self.w / 3);
                let xb = map_x(self.x + 2 * self.w / 3);
                let x1 = map_x(self.x + self.w);
                let (y0, y1) = (map_y(self.y), map_y(self.y + self.h));
                rect(x0, xa, y0, y1) + rect(xb, x1, y0, y1) - 2.0 * rect(xa, xb, y0, y1)
            }
            HaarKind::FourRect => {
                let (x0, xm, x1) = (map_x(self.x), map_x(self.x + self.w / 2), map_x(self.x + self.w));
                let (y0, ym, y1) = (map_y(self.y), map_y(self.y + self.h / 2), map_y(self.y + self.h));
                rect(x0, xm, y0, ym) + rect(xm, x1, ym, y1)
                    - rect(xm, x1, y0, ym)
                    - rect(x0, xm, ym, y1)
            }
        };
        Ok(diff / (k * k * sigma))
    }
}

/// Every feature of every kind inside the canonical window, sizes and
/// positions stepped by one cell. Deterministic order.
pub fn full_feature_pool() -> Vec<HaarFeature> {
    let mut pool = Vec::new();
    for kind in HaarKind::ALL {
        let (cw, ch) = kind.cell();
        let mut h = ch;
        while h <= CANONICAL_WINDOW {
            let mut w = cw;
            while w <= CANONICAL_WINDOW {
                for y in 0..=CANONICAL_WINDOW - h {
                    for x in 0..=CANONICAL_WINDOW - w {
                        pool.push(HaarFeature { kind, x, y, w, h });
                    }
                }
                w += cw;
            }
            h += ch;
        }
    }
    pool
}

/// Deterministic subsample: seeded shuffle, then every `stride`-th entry.
pub fn subsampled_feature_pool(stride: usize, seed: u64) -> Vec<HaarFeature> {
    assert!(stride >= 1);
    let mut pool = full_feature_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.into_iter().step_by(stride).collect()
}

/// Parity-threshold stump over one feature plus its ensemble weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakLearner {
    #[serde(flatten)]
    pub feature: HaarFeature,
    #[serde(rename = "theta")]
    pub threshold: f64,
    pub parity: i8,
    pub alpha: f64,
}

/// 1 iff `parity * value > parity * threshold`, else 0. Strict inequality,
/// so a value exactly at the threshold votes 0.
pub fn weak_eval(parity: i8, threshold: f64, value: f64) -> u8 {
    let p = parity as f64;
    u8::from(p * value > p * threshold)
}

/// Stump selected on a precomputed value matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostStump {
    pub feature_index: usize,
    pub threshold: f64,
    pub parity: i8,
    pub alpha: f64,
}

/// AdaBoost over columns of a feature-value matrix.
///
/// `values[f][s]` is feature `f` on sample `s`. Each round picks the
/// (feature, threshold, parity) of minimum weighted error via a sorted
/// sweep (ties go to the lowest feature index and then the smaller
/// threshold), requires that error to be below 0.5, and reweights samples
/// multiplicatively.
pub fn adaboost_train_values(
    values: &[Vec<f64>],
    labels: &[bool],
    rounds: usize,
) -> Result<Vec<BoostStump>> {
    assert!(rounds >= 1);
    let n = labels.len();
    assert!(values.iter().all(|col| col.len() == n));
    if !(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l)) {
        return Err(Error::SingleClass);
    }

    // Sample order per feature, computed once.
    let sorted: Vec<Vec<usize>> = values
        .iter()
        .map(|col| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).expect("finite feature values"));
            idx
        })
        .collect();

    let mut weights = vec![1.0 / n as f64; n];
    let mut learners = Vec::with_capacity(rounds);

    for round in 0..rounds {
        let mut best: Option<(f64, usize, f64, i8)> = None;
        for (f, order) in sorted.iter().enumerate() {
            let col = &values[f];
            let total_pos: f64 = (0..n).filter(|&i| labels[i]).map(|i| weights[i]).sum();
            let total_neg = 1.0 - total_pos;
            // Sweep thresholds between consecutive distinct values.
            // `pos_below`/`neg_below` are the class weights at or below
            // the current value.
            let mut pos_below = 0.0;
            let mut neg_below = 0.0;
            let consider = |err_plus: f64, err_minus: f64, theta: f64, best: &mut Option<(f64, usize, f64, i8)>| {
                for (err, parity) in [(err_plus, 1i8), (err_minus, -1i8)] {
                    if best.is_none() || err < best.unwrap().0 {
                        *best = Some((err, f, theta, parity));
                    }
                }
            };
            // Threshold below every sample: parity +1 predicts all 1.
            let theta_low = col[order[0]] - 1.0;
            consider(total_neg, total_pos, theta_low, &mut best);
            for (rank, &i) in order.iter().enumerate() {
                if labels[i] {
                    pos_below += weights[i];
                } else {
                    neg_below += weights[i];
                }
                let next = order.get(rank + 1).map(|&j| col[j]);
                if next == Some(col[i]) {
                    continue;
                }
                let theta = match next {
                    Some(v) => 0.5 * (col[i] + v),
                    None => col[i] + 1.0,
                };
                // parity +1: predict 1 above theta.
                let err_plus = pos_below + (total_neg - neg_below);
                let err_minus = neg_below + (total_pos - pos_below);
                consider(err_plus, err_minus, theta, &mut best);
            }
        }
        let (err, feature_index, threshold, parity) = best.expect("non-empty feature pool");
        if err >= 0.5 {
            return Err(Error::NoUsefulLearner {
                round,
                best_error: err,
            });
        }
        let eps = err.clamp(1e-10, 1.0 - 1e-10);
        let alpha = 0.5 * ((1.0 - eps) / eps).ln();
        learners.push(BoostStump {
            feature_index,
            threshold,
            parity,
            alpha,
        });

        let mut sum = 0.0;
        for i in 0..n {
            let h = if weak_eval(parity, threshold, values[feature_index][i]) == 1 {
                1.0
            } else {
                -1.0
            };
            let y = if labels[i] { 1.0 } else { -1.0 };
            weights[i] *= (-alpha * y * h).exp();
            sum += weights[i];
        }
        for w in &mut weights {
            *w /= sum;
        }
    }
    Ok(learners)
}

/// AdaBoost on canonical-window patches with a Haar feature pool.
pub fn adaboost_train(
    features: &[HaarFeature],
    patches: &[(Image, bool)],
    rounds: usize,
) -> Result<Vec<WeakLearner>> {
    let values = feature_value_matrix(features, patches)?;
    let labels: Vec<bool> = patches.iter().map(|(_, l)| *l).collect();
    let stumps = adaboost_train_values(&values, &labels, rounds)?;
    Ok(stumps
        .into_iter()
        .map(|s| WeakLearner {
            feature: features[s.feature_index],
            threshold: s.threshold,
            parity: s.parity,
            alpha: s.alpha,
        })
        .collect())
}

fn feature_value_matrix(
    features: &[HaarFeature],
    patches: &[(Image, bool)],
) -> Result<Vec<Vec<f64>>> {
    let integrals: Vec<Integrals> = patches.iter().map(|(p, _)| Integrals::build(p)).collect();
    let windows: Vec<CandidateWindow> = patches
        .iter()
        .map(|(p, _)| CandidateWindow::new(0, 0, p.width()))
        .collect();
    features
        .iter()
        .map(|f| {
            integrals
                .iter()
                .zip(&windows)
                .map(|(ii, w)| f.evaluate(ii, w))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub threshold: f64,
    pub learners: Vec<WeakLearner>,
}

impl CascadeStage {
    /// Weighted vote of the stage's stumps on one window.
    pub fn score(&self, integrals: &Integrals, window: &CandidateWindow) -> Result<f64> {
        let mut score = 0.0;
        for l in &self.learners {
            let v = l.feature.evaluate(integrals, window)?;
            score += l.alpha * f64::from(weak_eval(l.parity, l.threshold, v));
        }
        Ok(score)
    }
}

/// Ordered strong classifiers; a window must pass every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    pub stages: Vec<CascadeStage>,
}

impl Cascade {
    /// True iff every stage's vote reaches its threshold, with
    /// `final_threshold_shift` subtracted from the last stage's threshold
    /// only. Larger shifts admit more windows.
    pub fn eval(
        &self,
        integrals: &Integrals,
        window: &CandidateWindow,
        final_threshold_shift: f64,
    ) -> Result<bool> {
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            let shift = if i == last { final_threshold_shift } else { 0.0 };
            if stage.score(integrals, window)? < stage.threshold - shift {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Margin of the last stage, used to rank accepted windows.
    fn final_margin(&self, integrals: &Integrals, window: &CandidateWindow) -> Result<f64> {
        let stage = self.stages.last().expect("at least one stage");
        Ok(stage.score(integrals, window)? - stage.threshold)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeTrainConfig {
    /// Learners per stage.
    pub stage_sizes: Vec<usize>,
    /// Fraction of training positives each stage must keep.
    pub detection_target: f64,
    /// Every `pool_stride`-th feature of the seeded-shuffled full pool.
    pub pool_stride: usize,
    pub seed: u64,
}

impl Default for CascadeTrainConfig {
    fn default() -> Self {
        CascadeTrainConfig {
            stage_sizes: vec![2, 5, 10, 20, 40],
            detection_target: 0.995,
            pool_stride: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub learners: usize,
    pub threshold: f64,
    pub train_detection_rate: f64,
    pub train_false_positive_rate: f64,
    pub negatives_remaining: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeTrainReport {
    pub pool_size: usize,
    pub stages: Vec<StageReport>,
}

/// Trains the attentional cascade on fixed sample sets. Each stage
/// boosts against the negatives that survive the previous stages and
/// sets its threshold to keep at least `detection_target` of the
/// training positives. Training ends early if no negatives survive; see
/// [`train_cascade_mined`] for the bootstrapped variant.
pub fn train_cascade(
    positives: &[Image],
    negatives: &[Image],
    config: &CascadeTrainConfig,
) -> Result<(Cascade, CascadeTrainReport)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::SingleClass);
    }
    let features = subsampled_feature_pool(config.pool_stride, config.seed);
    let mut stages = Vec::new();
    let mut reports = Vec::new();
    let mut active_negatives: Vec<Image> = negatives.to_vec();

    for &size in &config.stage_sizes {
        if active_negatives.is_empty() {
            break;
        }
        let mut patches: Vec<(Image, bool)> =
            positives.iter().map(|p| (p.clone(), true)).collect();
        patches.extend(active_negatives.iter().map(|p| (p.clone(), false)));
        let learners = adaboost_train(&features, &patches, size)?;

        // Stage threshold: the detection_target quantile of positive votes.
        let stage = CascadeStage {
            threshold: 0.0,
            learners,
        };
        let mut pos_scores: Vec<f64> = positives
            .iter()
            .map(|p| {
                let ii = Integrals::build(p);
                stage.score(&ii, &CandidateWindow::new(0, 0, p.width()))
            })
            .collect::<Result<_>>()?;
        pos_scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let drop = ((1.0 - config.detection_target) * pos_scores.len() as f64).floor() as usize;
        let threshold = pos_scores[drop.min(pos_scores.len() - 1)] - 1e-12;
        let stage = CascadeStage { threshold, ..stage };

        let detected = pos_scores.iter().filter(|s| **s >= threshold).count();
        let surviving: Vec<Image> = active_negatives
            .iter()
            .filter(|p| {
                let ii = Integrals::build(p);
                stage
                    .score(&ii, &CandidateWindow::new(0, 0, p.width()))
                    .map(|s| s >= threshold)
                    .unwrap_or(false)
            })
            .cloned()
            .collect();
        reports.push(StageReport {
            learners: stage.learners.len(),
            threshold,
            train_detection_rate: detected as f64 / positives.len() as f64,
            train_false_positive_rate: surviving.len() as f64 / active_negatives.len() as f64,
            negatives_remaining: surviving.len(),
        });
        stages.push(stage);
        active_negatives = surviving;
    }

    Ok((
        Cascade { stages },
        CascadeTrainReport {
            pool_size: features.len(),
            stages: reports,
        },
    ))
}

/// Trains the cascade with bootstrapped negatives: each stage draws fresh
/// negatives from `miner` until `negatives_per_stage` of them pass every
/// earlier stage, so later stages always see hard examples. Mining for a
/// stage stops after `max_mining_attempts` draws; a stage that cannot
/// gather at least two hard negatives ends the cascade.
pub fn train_cascade_mined(
    positives: &[Image],
    miner: &mut dyn FnMut() -> Image,
    negatives_per_stage: usize,
    max_mining_attempts: usize,
    config: &CascadeTrainConfig,
) -> Result<(Cascade, CascadeTrainReport)> {
    if positives.is_empty() || negatives_per_stage == 0 {
        return Err(Error::SingleClass);
    }
    let features = subsampled_feature_pool(config.pool_stride, config.seed);
    let mut stages: Vec<CascadeStage> = Vec::new();
    let mut reports = Vec::new();

    for &size in &config.stage_sizes {
        // Mine negatives that pass every stage so far.
        let mut hard = Vec::with_capacity(negatives_per_stage);
        let mut attempts = 0usize;
        while hard.len() < negatives_per_stage && attempts < max_mining_attempts {
            attempts += 1;
            let candidate = miner();
            let ii = Integrals::build(&candidate);
            let window = CandidateWindow::new(0, 0, candidate.width());
            let passes = stages
                .iter()
                .all(|s| matches!(s.score(&ii, &window), Ok(v) if v >= s.threshold));
            if passes {
                hard.push(candidate);
            }
        }
        if hard.len() < 2 {
            break;
        }

        let mut patches: Vec<(Image, bool)> = positives.iter().map(|p| (p.clone(), true)).collect();
        patches.extend(hard.iter().map(|p| (p.clone(), false)));
        let learners = adaboost_train(&features, &patches, size)?;

        let stage = CascadeStage {
            threshold: 0.0,
            learners,
        };
        let mut pos_scores: Vec<f64> = positives
            .iter()
            .map(|p| {
                let ii = Integrals::build(p);
                stage.score(&ii, &CandidateWindow::new(0, 0, p.width()))
            })
            .collect::<Result<_>>()?;
        pos_scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let drop = ((1.0 - config.detection_target) * pos_scores.len() as f64).floor() as usize;
        let threshold = pos_scores[drop.min(pos_scores.len() - 1)] - 1e-12;
        let stage = CascadeStage { threshold, ..stage };

        let detected = pos_scores.iter().filter(|s| **s >= threshold).count();
        let surviving = hard
            .iter()
            .filter(|p| {
                let ii = Integrals::build(p);
                stage
                    .score(&ii, &CandidateWindow::new(0, 0, p.width()))
                    .map(|s| s >= threshold)
                    .unwrap_or(false)
            })
            .count();
        reports.push(StageReport {
            learners: stage.learners.len(),
            threshold,
            train_detection_rate: detected as f64 / positives.len() as f64,
            train_false_positive_rate: surviving as f64 / hard.len() as f64,
            negatives_remaining: surviving,
        });
        stages.push(stage);
    }

    if stages.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok((
        Cascade { stages },
        CascadeTrainReport {
            pool_size: features.len(),
            stages: reports,
        },
    ))
}

/// Multi-scale scan. Windows step by `max(1, size/24)`, passing windows
/// are merged by overlap grouping (IoU > 0.3), and the result is sorted
/// by (y, x, size) so the output order is implementation-independent.
pub fn scan_windows(
    cascade: &Cascade,
    img: &Image,
    scale_step: f64,
    min_size: usize,
    final_threshold_shift: f64,
) -> Result<Vec<CandidateWindow>> {
    assert!(scale_step > 1.0, "scale step must exceed 1");
    assert!(min_size >= CANONICAL_WINDOW);
    let max_size = img.width().min(img.height());
    if max_size < min_size {
        return Ok(Vec::new());
    }
    let integrals = Integrals::build(img);

    let mut sizes = Vec::new();
    let mut s = min_size as f64;
    while s.round() as usize <= max_size {
        let size = s.round() as usize;
        if sizes.last() != Some(&size) {
            sizes.push(size);
        }
        s *= scale_step;
    }

    let mut hits = Vec::new();
    for &size in &sizes {
        let stride = (size / CANONICAL_WINDOW).max(1);
        let mut y = 0;
        while y + size <= img.height() {
            let mut x = 0;
            while x + size <= img.width() {
                let mut window = CandidateWindow::new(x, y, size);
                if cascade.eval(&integrals, &window, final_threshold_shift)? {
                    window.score = cascade.final_margin(&integrals, &window)?;
                    hits.push(window);
                }
                x += stride;
            }
            y += stride;
        }
    }

    let mut merged = merge_windows(&hits);
    merged.sort_by(|a, b| (a.y, a.x, a.size).cmp(&(b.y, b.x, b.size)));
    Ok(merged)
}

/// Connected-component grouping under IoU > 0.3; each component becomes
/// one window at the rounded member mean with the mean score.
fn merge_windows(windows: &[CandidateWindow]) -> Vec<CandidateWindow> {
    let n = windows.len();
    let mut component: Vec<usize> = (0..n).collect();
    fn root(component: &mut Vec<usize>, mut i: usize) -> usize {
        while component[i] != i {
            component[i] = component[component[i]];
            i = component[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if windows[i].iou(&windows[j]) > 0.3 {
                let (ri, rj) = (root(&mut component, i), root(&mut component, j));
                if ri != rj {
                    component[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<&CandidateWindow>> = Default::default();
    for i in 0..n {
        let r = root(&mut component, i);
        groups.entry(r).or_default().push(&windows[i]);
    }
    groups
        .values()
        .map(|members| {
            let k = members.len() as f64;
            let x = members.iter().map(|w| w.x as f64).sum::<f64>() / k;
            let y = members.iter().map(|w| w.y as f64).sum::<f64>() / k;
            let size = members.iter().map(|w| w.size as f64).sum::<f64>() / k;
            let score = members.iter().map(|w| w.score).sum::<f64>() / k;
            CandidateWindow {
                x: x.round() as usize,
                y: y.round() as usize,
                size: size.round() as usize,
                score,
            }
        })
        .collect()
}

/// Scores how face-like a window is by how much of its normalized signal
/// the network can reconstruct: `1 - residual energy / signal energy`,
/// clamped to `[0, 1]`. Structureless windows score 0.
pub fn verify_candidate(base: &Gwn, img: &Image, window: &CandidateWindow) -> Result<f64> {
    let crop = img.crop(window.x, window.y, window.size, window.size)?;
    let patch = crop
        .resize_bilinear(base.template_width, base.template_height)
        .normalize_patch();
    let signal = Image::from_vec(
        patch.width(),
        patch.height(),
        patch.data().iter().map(|v| v - 0.5).collect(),
    );
    let signal_energy = signal.energy();
    if signal_energy < 1e-12 {
        return Ok(0.0);
    }
    let solution = solve_weights(&base.wavelets, &signal)?;
    let fitted = Gwn {
        template_width: base.template_width,
        template_height: base.template_height,
        wavelets: base.wavelets.clone(),
        weights: solution.weights,
    };
    let residual_energy = fitted.energy(&signal);
    Ok((1.0 - residual_energy / signal_energy).clamp(0.0, 1.0))
}
