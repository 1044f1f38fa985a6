//! Synthetic ground truth: posed renders of a template with seeded noise,
//! a procedural symmetric face to build models from, and training patches
//! for the cascade.
//!
//! Rendering warps a supersampled template field with bilinear sampling
//! onto a mid-gray canvas, so generated images carry an exact pose record
//! against which detection and tracking are scored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::CandidateWindow;
use crate::error::{Error, Result};
use crate::fitting::MID_GRAY;
use crate::gabor::{build_gwn, Gwn, GwnBuildConfig, GwnBuildReport};
use crate::geometry::{apply_matrix, Homography, Point};
use crate::imaging::Image;
use crate::model::{DeformableModel, GlobalPose, GroupLabel, PoseParams};

/// Signed template signal rasterized for warping, possibly at a finer
/// resolution than the template grid.
#[derive(Debug, Clone)]
pub struct TemplateField {
    field: Image,
    /// Field pixels per template pixel.
    scale: f64,
    template_width: usize,
    template_height: usize,
}

impl TemplateField {
    /// Analytic render of a network at `supersample` field pixels per
    /// template pixel.
    pub fn from_network(gwn: &Gwn, supersample: usize) -> TemplateField {
        assert!(supersample >= 1);
        let q = supersample as f64;
        let fw = gwn.template_width * supersample;
        let fh = gwn.template_height * supersample;
        let cx0 = (fw as f64 - 1.0) / 2.0;
        let cy0 = (fh as f64 - 1.0) / 2.0;
        let field = Image::from_fn(fw, fh, |col, row| {
            gwn.reconstruct_at((col as f64 - cx0) / q, (row as f64 - cy0) / q)
        });
        TemplateField {
            field,
            scale: q,
            template_width: gwn.template_width,
            template_height: gwn.template_height,
        }
    }

    /// Uses an existing signal raster as the template at its own
    /// resolution.
    pub fn from_signal(signal: &Image) -> TemplateField {
        TemplateField {
            field: signal.clone(),
            scale: 1.0,
            template_width: signal.width(),
            template_height: signal.height(),
        }
    }

    /// Hull of the template's pixel centers; the reconstruction is
    /// unconstrained beyond it.
    pub fn contains(&self, u: Point) -> bool {
        u.x.abs() <= (self.template_width as f64 - 1.0) / 2.0
            && u.y.abs() <= (self.template_height as f64 - 1.0) / 2.0
    }

    /// Bilinear sample at template coordinates.
    pub fn sample(&self, u: Point) -> f64 {
        self.field
            .sample_bilinear(u.x * self.scale, u.y * self.scale)
    }
}

/// One synthetic face: its pose, noise level, canvas size, and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticFaceSpec {
    pub pose: GlobalPose,
    pub noise_sigma: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

/// Ground-truth record emitted alongside each synthetic image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pose: PoseParams,
    pub window: CandidateWindow,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Standard normal deviate (Box-Muller), fully determined by the rng.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Renders `template` under the spec's pose onto a mid-gray canvas with
/// seeded Gaussian noise, clamped to `[0, 1]`. Deterministic per seed.
/// Errors when the posed template does not fit inside the canvas.
pub fn synth_generate(
    template: &TemplateField,
    spec: &SyntheticFaceSpec,
) -> Result<(Image, TruthRecord)> {
    assert!(spec.noise_sigma >= 0.0);
    let pose = spec.pose.to_matrix();
    let to_image = pose
        .try_inverse()
        .ok_or_else(|| Error::SingularMatrix("non-invertible synthesis pose".into()))?;

    // Template corners must land inside the canvas.
    let hw = template.template_width as f64 / 2.0;
    let hh = template.template_height as f64 / 2.0;
    let mut xs = Vec::with_capacity(4);
    let mut ys = Vec::with_capacity(4);
    for (ux, uy) in [(-hw, -hh), (hw, -hh), (-hw, hh), (hw, hh)] {
        let p = apply_matrix(&to_image, Point::new(ux, uy))?;
        xs.push(p.x);
        ys.push(p.y);
    }
    let img_hw = spec.width as f64 / 2.0;
    let img_hh = spec.height as f64 / 2.0;
    if xs.iter().any(|x| x.abs() > img_hw) || ys.iter().any(|y| y.abs() > img_hh) {
        return Err(Error::PoseOutsideCanvas {
            width: spec.width,
            height: spec.height,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut img = Image::zeros(spec.width, spec.height);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let x = img.coord_x(col);
            let y = img.coord_y(row);
            let w = pose[(2, 0)] * x + pose[(2, 1)] * y + pose[(2, 2)];
            let mut v = MID_GRAY;
            if w > 1e-9 {
                let u = Point::new(
                    (pose[(0, 0)] * x + pose[(0, 1)] * y + pose[(0, 2)]) / w,
                    (pose[(1, 0)] * x + pose[(1, 1)] * y + pose[(1, 2)]) / w,
                );
                if template.contains(u) {
                    v += template.sample(u);
                }
            }
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * gaussian(&mut rng);
            }
            img.set(col, row, v.clamp(0.0, 1.0));
        }
    }

    // Enclosing square of the warped template, clamped to the canvas.
    let min_x = xs.iter().cloned().fold(f64::INFINITY, f64::min) + img_hw - 0.5;
    let max_x = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + img_hw - 0.5;
    let min_y = ys.iter().cloned().fold(f64::INFINITY, f64::min) + img_hh - 0.5;
    let max_y = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + img_hh - 0.5;
    let side = (max_x - min_x).max(max_y - min_y).round() as usize;
    let side = side.clamp(1, spec.width.min(spec.height));
    let cx = (min_x + max_x) / 2.0;
    let cy = (min_y + max_y) / 2.0;
    let wx = ((cx - side as f64 / 2.0).round().max(0.0) as usize)
        .min(spec.width - side);
    let wy = ((cy - side as f64 / 2.0).round().max(0.0) as usize)
        .min(spec.height - side);

    let record = TruthRecord {
        id: format!("synth-{:08}", spec.seed),
        width: spec.width,
        height: spec.height,
        pose: spec.pose.canonical_params()?,
        window: CandidateWindow::new(wx, wy, side),
        noise_sigma: spec.noise_sigma,
        seed: spec.seed,
    };
    Ok((img, record))
}

/// Analytic render of a deformed model (group poses active, global pose
/// applied, per-group evaluation) in display form. Used by deformation
/// tests; no noise, no interpolation.
pub fn render_deformed(model: &DeformableModel, width: usize, height: usize) -> Result<Image> {
    let mut img = Image::zeros(width, height);
    for row in 0..height {
        for col in 0..width {
            let p = Point::new(img.coord_x(col), img.coord_y(row));
            let mut v = MID_GRAY;
            for label in GroupLabel::ALL {
                v += model.group_value_at(label, p)?;
            }
            img.set(col, row, v);
        }
    }
    Ok(img)
}

/// Smooth, exactly left-right symmetric face-like pattern in display
/// form: bright head ellipse, dark eyes, nose shadow, dark mouth bar.
pub fn procedural_face(size: usize) -> Image {
    let half = (size as f64 - 1.0) / 2.0;
    let s = size as f64;
    Image::from_fn(size, size, |col, row| {
        // Normalized centered coordinates in [-0.5, 0.5].
        let x = (col as f64 - half) / s;
        let y = (row as f64 - half) / s;
        let blob = |bx: f64, by: f64, sx: f64, sy: f64| {
            (-0.5 * ((x - bx) / sx).powi(2) - 0.5 * ((y - by) / sy).powi(2)).exp()
        };
        let head = (-((x / 0.40).powi(2) + (y / 0.46).powi(2)).powi(2)).exp();
        let eyes = blob(-0.16, -0.14, 0.07, 0.05) + blob(0.16, -0.14, 0.07, 0.05);
        let nose = blob(0.0, 0.05, 0.05, 0.09);
        let mouth = (-0.5 * (y - 0.24).powi(2) / 0.04_f64.powi(2)).exp()
            * (-(x / 0.14).powi(4)).exp();
        let v = 0.32 + 0.42 * head - 0.30 * eyes - 0.10 * nose - 0.26 * mouth;
        v.clamp(0.0, 1.0)
    })
}

/// Peak absolute value of the face template signal. Leaves headroom so
/// the display form `0.5 + signal` stays inside `[0, 1]` even where the
/// reconstruction overshoots between lattice points.
pub const FACE_SIGNAL_AMPLITUDE: f64 = 0.42;

/// Build settings for the face template. The envelope extent is kept
/// above the pixel pitch (`1/scale_max` > 0.6 px): thinner wavelets can
/// hit the training lattice exactly yet spike between pixels, which
/// corrupts supersampled renders.
pub fn face_build_config() -> GwnBuildConfig {
    GwnBuildConfig {
        scale_max: 1.6,
        ..GwnBuildConfig::default()
    }
}

/// Turns a normalized face patch into the template signal: the border
/// level is removed and a short C1 taper takes the signal to exactly 0
/// at the patch edge, so pasting the template onto a mid-gray canvas is
/// seamless. A visible box edge would hand the pose fit an artificial
/// alignment cue (and bias it, since rendering smears the edge).
pub fn template_signal(normalized: &Image) -> Image {
    let (w, h) = (normalized.width(), normalized.height());
    let mut border_sum = 0.0;
    let mut border_n = 0usize;
    for col in 0..w {
        border_sum += normalized.get(col, 0) + normalized.get(col, h - 1);
        border_n += 2;
    }
    for row in 1..h - 1 {
        border_sum += normalized.get(0, row) + normalized.get(w - 1, row);
        border_n += 2;
    }
    let border = border_sum / border_n as f64;

    let taper = |d: f64| {
        let t = (d / 3.0).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };
    let mut signal = Image::from_fn(w, h, |col, row| {
        let dx = col.min(w - 1 - col) as f64;
        let dy = row.min(h - 1 - row) as f64;
        taper(dx) * taper(dy) * (normalized.get(col, row) - border)
    });
    let peak = signal.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let k = FACE_SIGNAL_AMPLITUDE / peak;
        signal = Image::from_vec(w, h, signal.data().iter().map(|v| v * k).collect());
    }
    signal
}

/// Builds the frontal face model: procedural face, patch normalization,
/// border-tapered signal extraction, then a 16-wavelet network split
/// into groups.
pub fn build_face_model(
    template_size: usize,
    n_wavelets: usize,
    seed: u64,
    config: &GwnBuildConfig,
) -> Result<(DeformableModel, GwnBuildReport)> {
    let face = procedural_face(template_size).normalize_patch();
    let signal = template_signal(&face);
    let (gwn, report) = build_gwn(&signal, n_wavelets, seed, config)?;
    Ok((DeformableModel::from_base(gwn)?, report))
}

/// Pose for a face of relative scale `s` centered at offset `(dx, dy)`
/// from the canvas center, with rotation and perspective row entries.
/// The image-to-template scale is `1/s`: larger `s` means a larger face.
pub fn face_pose(s: f64, theta: f64, dx: f64, dy: f64, h31: f64, h32: f64) -> Result<GlobalPose> {
    Ok(GlobalPose {
        homography: Homography::from_rows([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, h31, h32, 1.0])?,
        scale: 1.0 / s,
        theta,
        cx: dx,
        cy: dy,
    })
}

/// One canonical-window positive for cascade training: the face under
/// mild pose jitter and noise.
/// noise.
pub fn positive_patch(
    template: &TemplateField,
    base_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let window = crate::cascade::CANONICAL_WINDOW;
    loop {
        let pose = GlobalPose {
            homography: Homography::from_rows([
                1.0,
                0.0,
                0.0,
                0.0,
                1.0,
                0.0,
                rng.random_range(-0.004..0.004),
                rng.random_range(-0.004..0.004),
                1.0,
            ])?,
            scale: base_scale * rng.random_range(0.82..1.08),
            theta: rng.random_range(-0.15..0.15),
            cx: rng.random_range(-1.0..1.0),
            cy: rng.random_range(-1.0..1.0),
        };
        let spec = SyntheticFaceSpec {
            pose,
            noise_sigma: rng.random_range(0.01..0.06),
            width: window,
            height: window,
            seed: rng.random(),
        };
        match synth_generate(template, &spec) {
            Ok((img, _)) => return Ok(img),
            Err(Error::PoseOutsideCanvas { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// One structured negative: noise fields, gradients, blob textures, or a
/// face fragment at a badly wrong scale or position. `kind` cycles.
fn negative_patch(
    template: &TemplateField,
    base_scale: f64,
    kind: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let window = crate::cascade::CANONICAL_WINDOW;
    Ok(match kind % 5 {
        0 => Image::from_fn(window, window, |_, _| rng.random_range(0.0..1.0)),
        1 => {
            let sigma = rng.random_range(0.05..0.2);
            let level = rng.random_range(0.3..0.7);
            Image::from_fn(window, window, |_, _| {
                (level + sigma * gaussian(rng)).clamp(0.0, 1.0)
            })
        }
        2 => {
            let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let offset = rng.random_range(0.2..0.8);
            Image::from_fn(window, window, |c, r| {
                let x = c as f64 / window as f64 - 0.5;
                let y = r as f64 / window as f64 - 0.5;
                (offset + gx * x + gy * y).clamp(0.0, 1.0)
            })
        }
        3 => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(2.0..6.0),
                        rng.random_range(-0.4..0.4),
                    )
                })
                .collect();
            Image::from_fn(window, window, |c, r| {
                let x = c as f64 - (window as f64 - 1.0) / 2.0;
                let y = r as f64 - (window as f64 - 1.0) / 2.0;
                let v: f64 = blobs
                    .iter()
                    .map(|(bx, by, bs, a)| {
                        a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * bs * bs)).exp()
                    })
                    .sum();
                (MID_GRAY + v).clamp(0.0, 1.0)
            })
        }
        _ => {
            // Face fragment: badly off-center or far off-scale.
            let s = base_scale
                * if rng.random_range(0..2) == 0 {
                    rng.random_range(0.3..0.55)
                } else {
                    rng.random_range(1.9..3.0)
                };
            let pose = GlobalPose {
                homography: Homography::identity(),
                scale: s,
                theta: rng.random_range(-0.3..0.3),
                cx: rng.random_range(-8.0..8.0),
                cy: rng.random_range(-8.0..8.0),
            };
            let spec = SyntheticFaceSpec {
                pose,
                noise_sigma: rng.random_range(0.02..0.08),
                width: window,
                height: window,
                seed: rng.random(),
            };
            match synth_generate(template, &spec) {
                Ok((img, _)) => img,
                Err(Error::PoseOutsideCanvas { .. }) => {
                    Image::from_fn(window, window, |_, _| rng.random_range(0.0..1.0))
                }
                Err(e) => return Err(e),
            }
        }
    })
}

/// Training patches for the cascade: canonical-window renders of the face
/// under pose jitter and noise, plus structured negatives.
pub fn cascade_training_set(
    model: &DeformableModel,
    n_positives: usize,
    n_negatives: usize,
    seed: u64,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let template = TemplateField::from_network(&model.base, 4);
    let base_scale = model.base.template_width as f64 / crate::cascade::CANONICAL_WINDOW as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut positives = Vec::with_capacity(n_positives);
    for _ in 0..n_positives {
        positives.push(positive_patch(&template, base_scale, &mut rng)?);
    }
    let mut negatives = Vec::with_capacity(n_negatives);
    for kind in 0..n_negatives {
        negatives.push(negative_patch(&template, base_scale, kind, &mut rng)?);
    }
    Ok((positives, negatives))
}

/// Endless seeded stream of structured negatives for bootstrapped
/// cascade training.
pub fn negative_miner(model: &DeformableModel, seed: u64) -> impl FnMut() -> Image {
    let template = TemplateField::from_network(&model.base, 4);
    let base_scale = model.base.template_width as f64 / crate::cascade::CANONICAL_WINDOW as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09e667f3bcc909);
    let mut kind = 0usize;
    move || {
        kind = kind.wrapping_add(1);
        negative_patch(&template, base_scale, kind, &mut rng)
            .expect("negative synthesis is infallible for in-canvas kinds")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::sync::OnceLock;

    fn face_model() -> &'static (DeformableModel, GwnBuildReport) {
        static FIXTURE: OnceLock<(DeformableModel, GwnBuildReport)> = OnceLock::new();
        FIXTURE.get_or_init(|| {
            build_face_model(32, 16, 7, &face_build_config()).unwrap()
        })
    }

    #[test]
    fn identity_pose_without_noise_reproduces_the_template() {
        let (model, _) = face_model();
        let template = TemplateField::from_network(&model.base, 1);
        let spec = SyntheticFaceSpec {
            pose: GlobalPose::identity(),
            noise_sigma: 0.0,
            width: 32,
            height: 32,
            seed: 1,
        };
        let (img, record) = synth_generate(&template, &spec).unwrap();
        let recon = model.base.reconstruct();
        for row in 0..32 {
            for col in 0..32 {
                let expect = (MID_GRAY + recon.get(col, row)).clamp(0.0, 1.0);
                assert_abs_diff_eq!(img.get(col, row), expect, epsilon = 1e-12);
            }
        }
        assert_eq!(record.window.size, 32);
    }

    #[test]
    fn same_seed_gives_byte_identical_output() {
        let (model, _) = face_model();
        let template = TemplateField::from_network(&model.base, 2);
        let spec = SyntheticFaceSpec {
            pose: face_pose(1.1, 0.2, 2.0, -1.0, 0.003, -0.002).unwrap(),
            noise_sigma: 0.05,
            width: 64,
            height: 64,
            seed: 99,
        };
        let (a, _) = synth_generate(&template, &spec).unwrap();
        let (b, _) = synth_generate(&template, &spec).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn noise_sigma_matches_sample_statistics() {
        let (model, _) = face_model();
        let template = TemplateField::from_network(&model.base, 2);
        let mut spec = SyntheticFaceSpec {
            pose: GlobalPose::identity(),
            noise_sigma: 0.1,
            width: 64,
            height: 64,
            seed: 5,
        };
        let (noisy, _) = synth_generate(&template, &spec).unwrap();
        spec.noise_sigma = 0.0;
        let (clean, _) = synth_generate(&template, &spec).unwrap();
        let diffs: Vec<f64> = noisy
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let std = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / diffs.len() as f64)
            .sqrt();
        assert!((0.09..=0.11).contains(&std), "noise std {std}");
    }

    #[test]
    fn pose_leaving_the_canvas_is_an_error() {
        let (model, _) = face_model();
        let template = TemplateField::from_network(&model.base, 1);
        let spec = SyntheticFaceSpec {
            pose: face_pose(1.0, 0.0, 30.0, 0.0, 0.0, 0.0).unwrap(),
            noise_sigma: 0.0,
            width: 48,
            height: 48,
            seed: 2,
        };
        assert!(matches!(
            synth_generate(&template, &spec),
            Err(Error::PoseOutsideCanvas { .. })
        ));
    }

    #[test]
    fn warped_render_matches_analytic_evaluation() {
        // The super-wavelet residual against a bilinear render of the
        // same pose is interpolation error only.
        let (model, _) = face_model();
        let template = TemplateField::from_network(&model.base, 16);
        let pose = face_pose(1.15, 0.25, 3.0, -2.0, 0.0, 0.0).unwrap();
        let spec = SyntheticFaceSpec {
            pose: pose.clone(),
            noise_sigma: 0.0,
            width: 64,
            height: 64,
            seed: 3,
        };
        let (img, _) = synth_generate(&template, &spec).unwrap();
        let signal = Image::from_vec(
            64,
            64,
            img.data().iter().map(|v| v - MID_GRAY).collect(),
        );
        let mut posed = model.clone();
        posed.global = pose;
        let res = posed.super_wavelet_all(&signal).unwrap();
        assert!(!res.residuals.is_empty());
        let max = res.residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        assert!(max <= 1e-3, "max per-pixel residual {max:.2e}");
    }

    #[test]
    fn translated_group_render_matches_group_evaluation() {
        let (model, _) = face_model();
        let mut lone = model.clone();
        // Keep only group A's wavelets and translate the group.
        for label in [GroupLabel::B, GroupLabel::C] {
            for &i in &lone.group(label).member_indices.clone() {
                lone.base.weights[i] = 0.0;
            }
        }
        lone.group_mut(GroupLabel::A).pose.cx = 2.5;
        let img = render_deformed(&lone, 48, 48).unwrap();
        let res = lone.super_wavelet_group(GroupLabel::A, &img).unwrap();
        assert!(!res.residuals.is_empty());
        let max = res.residuals.iter().fold(0.0f64, |m, r| {
            m.max((r - MID_GRAY).abs())
        });
        assert!(max <= 1e-3, "max group residual {max:.2e}");
    }

    #[test]
    fn procedural_face_is_exactly_symmetric() {
        let face = procedural_face(33);
        for row in 0..33 {
            for col in 0..33 {
                assert_eq!(face.get(col, row), face.get(32 - col, row));
            }
        }
    }

    #[test]
    fn face_model_captures_most_of_the_signal() {
        let (_, report) = face_model();
        let captured = 1.0 - report.final_energy / report.initial_energy;
        assert!(captured > 0.75, "captured {captured:.3}");
    }

    #[test]
    fn training_set_has_requested_sizes_and_contrast() {
        let (model, _) = face_model();
        let (pos, neg) = cascade_training_set(model, 12, 20, 3).unwrap();
        assert_eq!(pos.len(), 12);
        assert_eq!(neg.len(), 20);
        for img in pos.iter().chain(&neg) {
            assert_eq!((img.width(), img.height()), (24, 24));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
