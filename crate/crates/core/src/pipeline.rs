//! End-to-end stages: candidate scan, verification, fitting, tracking
//! with warm starts, metric evaluation against ground truth, and overlay
//! rendering.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{scan_windows, verify_candidate, CandidateWindow, Cascade};
use crate::config::{DetectConfig, TrackConfig};
use crate::error::{Error, Result};
use crate::fitting::{fit_face, fit_face_from_pose, FitConfig, FitReport};
use crate::geometry::Point;
use crate::imaging::Image;
use crate::model::{DeformableModel, GroupLabel, PoseParams};
use crate::synth::TruthRecord;

/// One fitted detection: the window it came from, its verification
/// score, the fit report (with the posed model), and the canonical pose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    pub window: CandidateWindow,
    pub verify_score: f64,
    pub pose: PoseParams,
    pub cost: f64,
    pub report: FitReport,
}

/// Scan, verify, fit. Results are sorted by normalized fit cost
/// ascending, ties by window position. An empty list means no candidate
/// survived; it is not an error.
pub fn detect(
    img: &Image,
    cascade: &Cascade,
    model: &DeformableModel,
    detect_config: &DetectConfig,
    fit_config: &FitConfig,
) -> Result<Vec<DetectionResult>> {
    let windows = scan_windows(
        cascade,
        img,
        detect_config.scale_step,
        detect_config.min_size,
        detect_config.threshold_shift,
    )?;

    let mut verified: Vec<(CandidateWindow, f64)> = Vec::new();
    for w in windows {
        let score = verify_candidate(&model.base, img, &w)?;
        if score >= detect_config.verify_threshold {
            verified.push((w, score));
        }
    }
    verified.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| (a.0.y, a.0.x, a.0.size).cmp(&(b.0.y, b.0.x, b.0.size)))
    });
    verified.truncate(detect_config.max_candidates);

    let mut results: Vec<DetectionResult> = verified
        .par_iter()
        .map(|(window, score)| -> Result<DetectionResult> {
            let report = fit_face(model, img, window, fit_config)?;
            let pose = report.model.global.canonical_params()?;
            Ok(DetectionResult {
                window: *window,
                verify_score: *score,
                pose,
                cost: report.normalized_cost,
                report,
            })
        })
        .collect::<Result<_>>()?;

    results.sort_by(|a, b| {
        a.cost
            .partial_cmp(&b.cost)
            .expect("finite costs")
            .then_with(|| {
                (a.window.y, a.window.x, a.window.size).cmp(&(
                    b.window.y,
                    b.window.x,
                    b.window.size,
                ))
            })
    });
    Ok(results)
}

/// Per-frame tracking state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackState {
    pub frame: usize,
    pub pose: Option<PoseParams>,
    pub cost: f64,
    pub lost: bool,
    pub report: Option<FitReport>,
}

/// Tracks a face over an ordered frame sequence: the first frame (and any
/// frame after a loss) runs full detection; other frames warm start from
/// the previous pose. A frame whose cost exceeds `loss_factor` times the
/// median cost of the warmup frames is marked lost and re-detected.
/// Unreadable frames are recorded as lost and tracking continues.
pub fn track(
    frames: &[PathBuf],
    cascade: &Cascade,
    model: &DeformableModel,
    detect_config: &DetectConfig,
    fit_config: &FitConfig,
    track_config: &TrackConfig,
) -> Result<Vec<TrackState>> {
    assert!(!frames.is_empty(), "at least one frame");
    let mut states: Vec<TrackState> = Vec::with_capacity(frames.len());
    let mut warmup_costs: Vec<f64> = Vec::new();
    let mut loss_threshold = f64::INFINITY;

    for (frame, path) in frames.iter().enumerate() {
        let img = match Image::load(path) {
            Ok(img) => img,
            Err(_) => {
                states.push(TrackState {
                    frame,
                    pose: None,
                    cost: f64::INFINITY,
                    lost: true,
                    report: None,
                });
                continue;
            }
        };

        let previous_pose = states
            .iter()
            .rev()
            .find(|s| !s.lost && s.report.is_some())
            .and_then(|s| s.report.as_ref())
            .map(|r| r.model.global.clone());

        let (report, lost) = match previous_pose {
            Some(pose) => {
                let report = fit_face_from_pose(model, &img, &pose, fit_config)?;
                let lost = !report.converged || report.normalized_cost > loss_threshold;
                (Some(report), lost)
            }
            None => (None, true),
        };

        let (report, lost) = if lost {
            // Fresh detection on this frame.
            let detections = detect(&img, cascade, model, detect_config, fit_config)?;
            match detections.into_iter().next() {
                Some(d) => (Some(d.report), report.is_some()),
                None => (report, true),
            }
        } else {
            (report, false)
        };

        let (pose, cost) = match &report {
            Some(r) => (
                Some(r.model.global.canonical_params()?),
                r.normalized_cost,
            ),
            None => (None, f64::INFINITY),
        };
        if !lost && cost.is_finite() && warmup_costs.len() < track_config.warmup_frames {
            warmup_costs.push(cost);
            if warmup_costs.len() == track_config.warmup_frames {
                let mut sorted = warmup_costs.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
                loss_threshold = track_config.loss_factor * sorted[sorted.len() / 2];
            }
        }
        states.push(TrackState {
            frame,
            pose,
            cost,
            lost,
            report,
        });
    }
    Ok(states)
}

/// A result to score against ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredResult {
    pub id: String,
    pub window: CandidateWindow,
    pub pose: PoseParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub id: String,
    pub iou: f64,
    pub translation_error: f64,
    pub rotation_error: f64,
    pub scale_ratio_error: f64,
    pub h31_error: f64,
    pub h32_error: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

fn aggregate(values: &[f64]) -> Aggregate {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let median = sorted[sorted.len() / 2];
    let p95 = sorted[((sorted.len() as f64 - 1.0) * 0.95).round() as usize];
    Aggregate { mean, median, p95 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<RecordMetrics>,
    pub matched: usize,
    pub missed: Vec<String>,
    pub miss_rate: f64,
    pub iou: Option<Aggregate>,
    pub translation_error: Option<Aggregate>,
    pub rotation_error: Option<Aggregate>,
    pub scale_ratio_error: Option<Aggregate>,
    pub h31_error: Option<Aggregate>,
    pub h32_error: Option<Aggregate>,
}

impl MetricsReport {
    /// Plain-text table for terminal output.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "matched {}  missed {}  miss rate {:.1}%\n",
            self.matched,
            self.missed.len(),
            100.0 * self.miss_rate
        ));
        out.push_str("metric                mean      median    p95\n");
        let mut row = |name: &str, a: &Option<Aggregate>| {
            if let Some(a) = a {
                out.push_str(&format!(
                    "{name:<20}  {:<8.4}  {:<8.4}  {:<8.4}\n",
                    a.mean, a.median, a.p95
                ));
            }
        };
        row("iou", &self.iou);
        row("translation px", &self.translation_error);
        row("rotation rad", &self.rotation_error);
        row("scale ratio", &self.scale_ratio_error);
        row("h31 abs", &self.h31_error);
        row("h32 abs", &self.h32_error);
        out
    }
}

/// Scores results against truth records, matching by id. A result id
/// without a truth record is an error; a truth record without a result
/// is a miss.
pub fn evaluate(truths: &[TruthRecord], results: &[ScoredResult]) -> Result<MetricsReport> {
    let unmatched: Vec<String> = results
        .iter()
        .filter(|r| !truths.iter().any(|t| t.id == r.id))
        .map(|r| r.id.clone())
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedIds(unmatched));
    }

    let mut records = Vec::new();
    let mut missed = Vec::new();
    for truth in truths {
        let Some(result) = results.iter().find(|r| r.id == truth.id) else {
            missed.push(truth.id.clone());
            continue;
        };
        records.push(RecordMetrics {
            id: truth.id.clone(),
            iou: truth.window.iou(&result.window),
            translation_error: Point::new(truth.pose.cx, truth.pose.cy)
                .distance(&Point::new(result.pose.cx, result.pose.cy)),
            rotation_error: crate::model::circular_difference(
                truth.pose.theta,
                result.pose.theta,
            ),
            scale_ratio_error: (result.pose.scale / truth.pose.scale - 1.0).abs(),
            h31_error: (result.pose.h31 - truth.pose.h31).abs(),
            h32_error: (result.pose.h32 - truth.pose.h32).abs(),
        });
    }

    let agg = |f: fn(&RecordMetrics) -> f64| -> Option<Aggregate> {
        if records.is_empty() {
            None
        } else {
            Some(aggregate(&records.iter().map(f).collect::<Vec<_>>()))
        }
    };
    Ok(MetricsReport {
        matched: records.len(),
        miss_rate: missed.len() as f64 / truths.len().max(1) as f64,
        iou: agg(|r| r.iou),
        translation_error: agg(|r| r.translation_error),
        rotation_error: agg(|r| r.rotation_error),
        scale_ratio_error: agg(|r| r.scale_ratio_error),
        h31_error: agg(|r| r.h31_error),
        h32_error: agg(|r| r.h32_error),
        missed,
        records,
    })
}

fn to_rgb(img: &Image) -> image::RgbImage {
    image::RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let v = (img.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([v, v, v])
    })
}

fn draw_rect(img: &mut image::RgbImage, window: &CandidateWindow, color: [u8; 3]) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let x1 = (window.x + window.size - 1).min(w - 1);
    let y1 = (window.y + window.size - 1).min(h - 1);
    for x in window.x..=x1 {
        img.put_pixel(x as u32, window.y as u32, image::Rgb(color));
        img.put_pixel(x as u32, y1 as u32, image::Rgb(color));
    }
    for y in window.y..=y1 {
        img.put_pixel(window.x as u32, y as u32, image::Rgb(color));
        img.put_pixel(x1 as u32, y as u32, image::Rgb(color));
    }
}

fn draw_marker(img: &mut image::RgbImage, x: f64, y: f64, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let cx = x.round() as i64;
    let cy = y.round() as i64;
    for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
        let (px, py) = (cx + dx, cy + dy);
        if (0..w).contains(&px) && (0..h).contains(&py) {
            img.put_pixel(px as u32, py as u32, image::Rgb(color));
        }
    }
}

/// Writes the detection overlay (input-sized: window rectangle plus
/// projected wavelet centers) and a side-by-side panel of the window crop
/// and the model reconstruction. Returns the panel path.
pub fn emit_overlay(
    img: &Image,
    result: &DetectionResult,
    path: impl AsRef<Path>,
) -> Result<PathBuf> {
    let path = path.as_ref();
    let model = &result.report.model;
    let mut overlay = to_rgb(img);
    draw_rect(&mut overlay, &result.window, [64, 96, 255]);

    // Wavelet centers through local poses and the inverse global map.
    let to_image = model
        .global
        .to_matrix()
        .try_inverse()
        .ok_or_else(|| Error::SingularMatrix("non-invertible pose".into()))?;
    let cx0 = (img.width() as f64 - 1.0) / 2.0;
    let cy0 = (img.height() as f64 - 1.0) / 2.0;
    for label in GroupLabel::ALL {
        for member in 0..model.group(label).member_indices.len() {
            let u = model.posed_center(label, member);
            let p = crate::geometry::apply_matrix(&to_image, u)?;
            draw_marker(&mut overlay, p.x + cx0, p.y + cy0, [255, 64, 64]);
        }
    }
    overlay
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Png(e.to_string()))?;
    debug_assert_eq!(
        (overlay.width() as usize, overlay.height() as usize),
        (img.width(), img.height())
    );

    // Panel: window crop (template-sized) beside the reconstruction.
    let tw = model.base.template_width;
    let th = model.base.template_height;
    let crop = img
        .crop(result.window.x, result.window.y, result.window.size, result.window.size)?
        .resize_bilinear(tw, th);
    let recon = model.base.reconstruct();
    let mut panel = image::RgbImage::from_pixel(
        (2 * tw + 2) as u32,
        th as u32,
        image::Rgb([32, 32, 32]),
    );
    for row in 0..th {
        for col in 0..tw {
            let a = (crop.get(col, row).clamp(0.0, 1.0) * 255.0).round() as u8;
            panel.put_pixel(col as u32, row as u32, image::Rgb([a, a, a]));
            let b = ((recon.get(col, row) + crate::fitting::MID_GRAY).clamp(0.0, 1.0) * 255.0)
                .round() as u8;
            panel.put_pixel((tw + 2 + col) as u32, row as u32, image::Rgb([b, b, b]));
        }
    }
    let panel_path = path.with_file_name(format!(
        "{}_panel.png",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("overlay")
    ));
    panel
        .save_with_format(&panel_path, image::ImageFormat::Png)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(panel_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PoseParams;
    use approx::assert_abs_diff_eq;

    fn truth(id: &str, window: CandidateWindow, pose: PoseParams) -> TruthRecord {
        TruthRecord {
            id: id.into(),
            width: 64,
            height: 64,
            pose,
            window,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    fn pose(scale: f64, theta: f64, cx: f64, cy: f64, h31: f64, h32: f64) -> PoseParams {
        PoseParams {
            scale,
            theta,
            cx,
            cy,
            h31,
            h32,
        }
    }

    #[test]
    fn perfect_results_score_perfectly() {
        let p = pose(1.0, 0.1, 2.0, -1.0, 0.001, 0.0);
        let w = CandidateWindow::new(10, 10, 24);
        let truths = vec![truth("a", w, p)];
        let results = vec![ScoredResult {
            id: "a".into(),
            window: w,
            pose: p,
        }];
        let report = evaluate(&truths, &results).unwrap();
        assert_eq!(report.matched, 1);
        assert_eq!(report.miss_rate, 0.0);
        assert_abs_diff_eq!(report.iou.unwrap().mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.translation_error.unwrap().mean, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn one_pixel_shift_iou_matches_rectangle_arithmetic() {
        let p = pose(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let truths = vec![truth("a", CandidateWindow::new(10, 10, 24), p)];
        let results = vec![ScoredResult {
            id: "a".into(),
            window: CandidateWindow::new(11, 10, 24),
            pose: p,
        }];
        let report = evaluate(&truths, &results).unwrap();
        let expected = (23.0 * 24.0) / (2.0 * 24.0 * 24.0 - 23.0 * 24.0);
        assert_abs_diff_eq!(report.iou.unwrap().mean, expected, epsilon = 1e-12);
    }

    #[test]
    fn empty_results_flag_total_miss() {
        let p = pose(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let truths = vec![
            truth("a", CandidateWindow::new(0, 0, 24), p),
            truth("b", CandidateWindow::new(8, 8, 24), p),
        ];
        let report = evaluate(&truths, &[]).unwrap();
        assert_eq!(report.matched, 0);
        assert_eq!(report.miss_rate, 1.0);
        assert!(report.iou.is_none());
        assert_eq!(report.missed, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn unknown_result_ids_are_an_error() {
        let p = pose(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let truths = vec![truth("a", CandidateWindow::new(0, 0, 24), p)];
        let results = vec![ScoredResult {
            id: "zz".into(),
            window: CandidateWindow::new(0, 0, 24),
            pose: p,
        }];
        assert!(matches!(
            evaluate(&truths, &results),
            Err(Error::UnmatchedIds(ids)) if ids == vec!["zz".to_string()]
        ));
    }

    #[test]
    fn metrics_table_mentions_all_metrics() {
        let p = pose(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let w = CandidateWindow::new(0, 0, 24);
        let report = evaluate(
            &[truth("a", w, p)],
            &[ScoredResult {
                id: "a".into(),
                window: w,
                pose: p,
            }],
        )
        .unwrap();
        let table = report.to_table();
        for needle in ["iou", "translation", "rotation", "scale", "h31", "h32"] {
            assert!(table.contains(needle), "table missing {needle}");
        }
    }
}
