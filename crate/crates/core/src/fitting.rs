//! Levenberg-Marquardt fitting of the deformable model to an image.
//!
//! Fitting runs in two phases. The global phase moves the whole model:
//! eight homography entries plus rotation and translation, with the
//! similarity scale frozen at 1 and folded into the homography (the
//! composite `s H R (x - c)` is over-parameterized otherwise). The groups
//! phase freezes the recovered global pose and moves the three local
//! poses under the symmetry penalties.
//!
//! Data residuals are sampled on the template pixel lattice mapped into
//! the image, so the residual count is pose-independent. The image is
//! read with a C1 cubic kernel (see [`Image::sample_catmull_rom`]) and
//! compared against the precomputed template reconstruction. Images are
//! display-referenced: intensities in `[0, 1]` around [`MID_GRAY`], while
//! the template stores the signed signal.

use nalgebra::{DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::cascade::CandidateWindow;
use crate::error::{Error, Result};
use crate::geometry::{apply_matrix, Homography, Point};
use crate::imaging::Image;
use crate::lm::{self, LmConfig, ParamSpace};
use crate::model::{
    ConstraintSpec, DeformableModel, GlobalPose, GroupLabel, GroupPose, PairMeasure, GROUP_PAIRS,
};

/// Display reference level subtracted from image samples before they are
/// compared with the signed template signal.
pub const MID_GRAY: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lm: LmConfig,
    /// Central-difference step for the fit Jacobian.
    pub jacobian_step: f64,
    pub lambda_distance: f64,
    pub lambda_orientation: f64,
    pub lambda_scale: f64,
    /// Bound on |h31|, |h32| during the global phase.
    pub perspective_bound: f64,
    /// Bounds on the group dilation factors during the groups phase.
    pub dilation_min: f64,
    pub dilation_max: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lm: LmConfig::default(),
            jacobian_step: 1e-4,
            lambda_distance: 10.0,
            lambda_orientation: 10.0,
            lambda_scale: 10.0,
            perspective_bound: 0.02,
            dilation_min: 0.6,
            dilation_max: 1.6,
        }
    }
}

impl FitConfig {
    pub fn constraint_spec(&self, frontal: &DeformableModel) -> Result<ConstraintSpec> {
        let mut spec = ConstraintSpec::measured_on(frontal, 0.0)?;
        spec.lambda_distance = self.lambda_distance;
        spec.lambda_orientation = self.lambda_orientation;
        spec.lambda_scale = self.lambda_scale;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitPhase {
    /// 12 parameters: 8 homography entries, then (s, theta, cx, cy) with
    /// s frozen at 1.
    Global,
    /// 15 parameters: (cx, cy, theta, sx, sy) for groups A, B, C.
    Groups,
}

/// Index of the frozen similarity scale in the global parameter vector.
const GLOBAL_SCALE_INDEX: usize = 8;

/// The optimization variables are preconditioned: each physical value is
/// multiplied by a unit scale chosen so one parameter unit moves template
/// samples by about one pixel. Rotations see the template half-extent,
/// perspective entries its square; translations are already in pixels.
/// This keeps the damped normal equations well conditioned and uniform
/// finite-difference steps meaningful across all columns.
fn global_scales(half_extent: f64) -> [f64; 12] {
    let l = half_extent;
    [l, l, 1.0, l, l, 1.0, l * l, l * l, 1.0, l, 1.0, 1.0]
}

fn group_scales(half_extent: f64) -> [f64; 5] {
    let l = half_extent / 2.0;
    [1.0, 1.0, l, l, l]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PenaltyKind {
    Distance,
    Orientation,
    Scale,
}

/// One fitting instance: the model structure, the target image, the
/// symmetry constraints, and the phase-dependent sample lattice.
pub struct FitProblem<'a> {
    pub model: &'a DeformableModel,
    pub image: &'a Image,
    pub constraints: &'a ConstraintSpec,
    pub phase: FitPhase,
    /// Template lattice points with their reconstruction values. In the
    /// groups phase each point also carries its group.
    samples: Vec<LatticeSample>,
    /// Groups phase only: per group, the *other* groups' frontal
    /// contribution rasterized over the template at half-pixel pitch.
    /// Wavelet supports overlap, so a group's box contains the others'
    /// content; subtracting it keeps each per-group data term anchored to
    /// that group's own pattern instead of rewarding joint drift.
    other_groups: Vec<SampledField>,
    penalties: Vec<(usize, PenaltyKind)>,
    config: FitConfig,
}

#[derive(Debug, Clone, Copy)]
struct LatticeSample {
    u: Point,
    template_value: f64,
    group: Option<usize>,
}

/// A scalar field rasterized on a refined centered grid, sampled with the
/// C1 cubic kernel.
struct SampledField {
    field: Image,
    scale: f64,
}

impl SampledField {
    fn render(width: usize, height: usize, scale: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let fw = width * scale;
        let fh = height * scale;
        let cx0 = (fw as f64 - 1.0) / 2.0;
        let cy0 = (fh as f64 - 1.0) / 2.0;
        let q = scale as f64;
        SampledField {
            field: Image::from_fn(fw, fh, |col, row| {
                f((col as f64 - cx0) / q, (row as f64 - cy0) / q)
            }),
            scale: q,
        }
    }

    fn sample(&self, p: Point) -> f64 {
        self.field
            .sample_catmull_rom(p.x * self.scale, p.y * self.scale)
    }
}

impl<'a> FitProblem<'a> {
    pub fn new(
        model: &'a DeformableModel,
        image: &'a Image,
        constraints: &'a ConstraintSpec,
        phase: FitPhase,
        config: &FitConfig,
    ) -> FitProblem<'a> {
        let tw = model.base.template_width;
        let th = model.base.template_height;
        let cx0 = (tw as f64 - 1.0) / 2.0;
        let cy0 = (th as f64 - 1.0) / 2.0;
        let mut samples = Vec::new();
        match phase {
            FitPhase::Global => {
                for row in 0..th {
                    for col in 0..tw {
                        let u = Point::new(col as f64 - cx0, row as f64 - cy0);
                        samples.push(LatticeSample {
                            u,
                            template_value: model.base.reconstruct_at(u.x, u.y),
                            group: None,
                        });
                    }
                }
            }
            FitPhase::Groups => {
                for (g, label) in GroupLabel::ALL.into_iter().enumerate() {
                    let (xmin, xmax, ymin, ymax) = model.group_support_box(label);
                    let group = model.group(label);
                    for row in 0..th {
                        for col in 0..tw {
                            let u = Point::new(col as f64 - cx0, row as f64 - cy0);
                            if u.x < xmin || u.x > xmax || u.y < ymin || u.y > ymax {
                                continue;
                            }
                            let value = group
                                .member_indices
                                .iter()
                                .map(|&i| {
                                    model.base.weights[i]
                                        * model.base.wavelets[i].evaluate(u.x, u.y)
                                })
                                .sum();
                            samples.push(LatticeSample {
                                u,
                                template_value: value,
                                group: Some(g),
                            });
                        }
                    }
                }
            }
        }

        let other_groups = if phase == FitPhase::Groups {
            GroupLabel::ALL
                .iter()
                .map(|&label| {
                    let others: Vec<usize> = model
                        .groups
                        .iter()
                        .filter(|g| g.label != label)
                        .flat_map(|g| g.member_indices.iter().copied())
                        .collect();
                    SampledField::render(tw, th, 2, |x, y| {
                        others
                            .iter()
                            .map(|&i| {
                                model.base.weights[i] * model.base.wavelets[i].evaluate(x, y)
                            })
                            .sum()
                    })
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut penalties = Vec::new();
        for pair in 0..GROUP_PAIRS.len() {
            if constraints.lambda_distance > 0.0 {
                penalties.push((pair, PenaltyKind::Distance));
            }
            if constraints.lambda_orientation > 0.0 {
                penalties.push((pair, PenaltyKind::Orientation));
            }
            if constraints.lambda_scale > 0.0 {
                penalties.push((pair, PenaltyKind::Scale));
            }
        }

        FitProblem {
            model,
            image,
            constraints,
            phase,
            samples,
            other_groups,
            penalties,
            config: config.clone(),
        }
    }

    pub fn data_residual_count(&self) -> usize {
        self.samples.len()
    }

    pub fn residual_count(&self) -> usize {
        self.samples.len() + self.penalties.len()
    }

    pub fn parameter_count(&self) -> usize {
        match self.phase {
            FitPhase::Global => 12,
            FitPhase::Groups => 15,
        }
    }

    fn half_extent(&self) -> f64 {
        self.model.base.template_width.max(self.model.base.template_height) as f64 / 2.0
    }

    /// Parameter vector (preconditioned units) describing the model's
    /// current pose state.
    pub fn params_from_model(&self, model: &DeformableModel) -> DVector<f64> {
        match self.phase {
            FitPhase::Global => {
                let h = model.global.homography.to_rows();
                let s = global_scales(self.half_extent());
                let raw = [
                    h[0],
                    h[1],
                    h[2],
                    h[3],
                    h[4],
                    h[5],
                    h[6],
                    h[7],
                    model.global.scale,
                    model.global.theta,
                    model.global.cx,
                    model.global.cy,
                ];
                DVector::from_iterator(12, raw.iter().zip(s).map(|(v, k)| v * k))
            }
            FitPhase::Groups => {
                let s = group_scales(self.half_extent());
                let mut p = Vec::with_capacity(15);
                for label in GroupLabel::ALL {
                    let m = &model.group(label).pose;
                    for (v, k) in [m.cx, m.cy, m.theta, m.sx, m.sy].iter().zip(s) {
                        p.push(v * k);
                    }
                }
                DVector::from_vec(p)
            }
        }
    }

    /// Search region around the initialization. The fit always starts
    /// from a candidate window (or a warm start), so the global motion is
    /// confined to a generous neighborhood of it: without this the data
    /// term has degenerate far-away minima that hide badly-modeled
    /// template regions outside the image.
    pub fn space_around(&self, init: &DVector<f64>) -> ParamSpace {
        let l = self.half_extent();
        match self.phase {
            FitPhase::Global => {
                let s = global_scales(l);
                // Magnitude of the initial linear part, in physical units.
                let k = ((init[0] / s[0]) * (init[4] / s[4])
                    - (init[1] / s[1]) * (init[3] / s[3]))
                    .abs()
                    .sqrt()
                    .max(1e-6);
                let mut space = ParamSpace::free(12);
                // Diagonal linear entries: positive, scale within
                // [0.35, 2.5] of the init; off-diagonals allow ~35 deg of
                // in-homography rotation or shear.
                for i in [0, 4] {
                    space.lower[i] = 0.35 * k * s[i];
                    space.upper[i] = 2.5 * k * s[i];
                }
                for i in [1, 3] {
                    space.lower[i] = -0.6 * k * s[i];
                    space.upper[i] = 0.6 * k * s[i];
                }
                // Template-frame offsets.
                for i in [2, 5] {
                    space.lower[i] = init[i] - 0.75 * l * s[i];
                    space.upper[i] = init[i] + 0.75 * l * s[i];
                }
                space.lower[6] = -self.config.perspective_bound * s[6];
                space.upper[6] = self.config.perspective_bound * s[6];
                space.lower[7] = -self.config.perspective_bound * s[7];
                space.upper[7] = self.config.perspective_bound * s[7];
                space.frozen[GLOBAL_SCALE_INDEX] = true;
                space.lower[9] = init[9] - 0.7 * s[9];
                space.upper[9] = init[9] + 0.7 * s[9];
                // Image-frame translation: three quarters of the window.
                let reach = 1.5 * l / k;
                for i in [10, 11] {
                    space.lower[i] = init[i] - reach * s[i];
                    space.upper[i] = init[i] + reach * s[i];
                }
                space
            }
            FitPhase::Groups => {
                // Partial deformation is small by construction: a few
                // pixels of travel and mild rotation around each group's
                // own centroid.
                let s = group_scales(l);
                let mut space = ParamSpace::free(15);
                for g in 0..3 {
                    for i in [0, 1] {
                        space.lower[5 * g + i] = -0.25 * l * s[i];
                        space.upper[5 * g + i] = 0.25 * l * s[i];
                    }
                    space.lower[5 * g + 2] = -0.35 * s[2];
                    space.upper[5 * g + 2] = 0.35 * s[2];
                    space.lower[5 * g + 3] = self.config.dilation_min * s[3];
                    space.upper[5 * g + 3] = self.config.dilation_max * s[3];
                    space.lower[5 * g + 4] = self.config.dilation_min * s[4];
                    space.upper[5 * g + 4] = self.config.dilation_max * s[4];
                }
                space
            }
        }
    }

    /// The model posed at `params`. Fails when the homography entries are
    /// singular (treated as a rejected trial by the minimizer).
    pub fn posed_model(&self, params: &DVector<f64>) -> Result<DeformableModel> {
        let mut model = self.model.clone();
        match self.phase {
            FitPhase::Global => {
                let s = global_scales(self.half_extent());
                let v: Vec<f64> = params.iter().zip(s).map(|(p, k)| p / k).collect();
                model.global.homography = Homography::from_rows([
                    v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], 1.0,
                ])?;
                model.global.scale = v[GLOBAL_SCALE_INDEX];
                model.global.theta = v[9];
                model.global.cx = v[10];
                model.global.cy = v[11];
            }
            FitPhase::Groups => {
                let s = group_scales(self.half_extent());
                for (g, label) in GroupLabel::ALL.into_iter().enumerate() {
                    model.group_mut(label).pose = GroupPose {
                        cx: params[5 * g] / s[0],
                        cy: params[5 * g + 1] / s[1],
                        theta: params[5 * g + 2] / s[2],
                        sx: params[5 * g + 3] / s[3],
                        sy: params[5 * g + 4] / s[4],
                    };
                }
            }
        }
        Ok(model)
    }

    /// Pixel residuals at the mapped lattice, then penalty residuals
    /// `sqrt(lambda) (measure - target)` for each group pair and active
    /// term.
    pub fn residuals(&self, params: &DVector<f64>) -> Result<DVector<f64>> {
        let posed = self.posed_model(params)?;
        let mut out = DVector::zeros(self.residual_count());

        // Samples leaving the image fade to the reference level instead of
        // reading clamped border values, so a warp cannot profit from
        // pushing the lattice off the image.
        let sample = |x: Point| -> f64 {
            let w = self.image.edge_weight(x.x, x.y);
            if w == 0.0 {
                return 0.0;
            }
            w * (self.image.sample_catmull_rom(x.x, x.y) - MID_GRAY)
        };
        match self.phase {
            FitPhase::Global => {
                let to_image = invert_pose(&posed.global.to_matrix())?;
                for (k, s) in self.samples.iter().enumerate() {
                    let x = apply_matrix(&to_image, s.u)?;
                    out[k] = sample(x) - s.template_value;
                }
            }
            FitPhase::Groups => {
                let to_image = invert_pose(&posed.global.to_similarity_matrix())?;
                let forward: Vec<GroupLocal> = GroupLabel::ALL
                    .into_iter()
                    .map(|l| GroupLocal::of(&posed, l))
                    .collect();
                for (k, s) in self.samples.iter().enumerate() {
                    let g = s.group.expect("groups-phase sample");
                    let v = forward[g].apply(s.u);
                    let x = apply_matrix(&to_image, v)?;
                    // The image at the moved point minus the other groups'
                    // frontal content there leaves this group's own part.
                    out[k] = sample(x) - self.other_groups[g].sample(v) - s.template_value;
                }
            }
        }

        if !self.penalties.is_empty() {
            let measures = posed.measure_pairs()?;
            for (slot, (pair, kind)) in self.penalties.iter().enumerate() {
                let m = &measures[*pair];
                let t = &self.constraints.targets[*pair];
                out[self.samples.len() + slot] = penalty_residual(self.constraints, m, t, *kind);
            }
        }
        Ok(out)
    }

    /// Squared-residual totals per term at `params`.
    pub fn cost_breakdown(&self, params: &DVector<f64>) -> Result<CostBreakdown> {
        let r = self.residuals(params)?;
        let data = r.rows(0, self.samples.len()).norm_squared();
        let mut breakdown = CostBreakdown {
            total: r.norm_squared(),
            data,
            distance: 0.0,
            orientation: 0.0,
            scale: 0.0,
        };
        for (slot, (_, kind)) in self.penalties.iter().enumerate() {
            let v = r[self.samples.len() + slot];
            match kind {
                PenaltyKind::Distance => breakdown.distance += v * v,
                PenaltyKind::Orientation => breakdown.orientation += v * v,
                PenaltyKind::Scale => breakdown.scale += v * v,
            }
        }
        Ok(breakdown)
    }
}

fn penalty_residual(
    constraints: &ConstraintSpec,
    measure: &PairMeasure,
    target: &PairMeasure,
    kind: PenaltyKind,
) -> f64 {
    match kind {
        PenaltyKind::Distance => {
            constraints.lambda_distance.sqrt() * (measure.distance - target.distance)
        }
        PenaltyKind::Orientation => {
            constraints.lambda_orientation.sqrt()
                * (measure.orientation_difference - target.orientation_difference)
        }
        PenaltyKind::Scale => {
            constraints.lambda_scale.sqrt() * (measure.scale_difference - target.scale_difference)
        }
    }
}

/// Affine action of one group's local pose (frontal frame to deformed
/// template frame), cached per residual evaluation.
struct GroupLocal {
    anchor: Point,
    offset: Point,
    sin: f64,
    cos: f64,
    sx: f64,
    sy: f64,
}

impl GroupLocal {
    fn of(model: &DeformableModel, label: GroupLabel) -> GroupLocal {
        let anchor = model.frontal_centroid(label);
        let m = &model.group(label).pose;
        let (sin, cos) = m.theta.sin_cos();
        GroupLocal {
            anchor,
            offset: Point::new(m.cx, m.cy),
            sin,
            cos,
            sx: m.sx,
            sy: m.sy,
        }
    }

    fn apply(&self, u: Point) -> Point {
        let dx = (u.x - self.anchor.x) * self.sx;
        let dy = (u.y - self.anchor.y) * self.sy;
        Point::new(
            self.anchor.x + self.offset.x + self.cos * dx - self.sin * dy,
            self.anchor.y + self.offset.y + self.sin * dx + self.cos * dy,
        )
    }
}

fn invert_pose(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    m.try_inverse()
        .ok_or_else(|| Error::SingularMatrix("non-invertible pose matrix".into()))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub data: f64,
    pub distance: f64,
    pub orientation: f64,
    pub scale: f64,
}

/// Central-difference Jacobian of the fit residuals.
pub fn numeric_jacobian(
    problem: &FitProblem,
    params: &DVector<f64>,
    step: f64,
) -> Result<nalgebra::DMatrix<f64>> {
    lm::numeric_jacobian(
        |p: &DVector<f64>| problem.residuals(p),
        params,
        step,
        &problem.space_around(params),
    )
}

/// Outcome of one phase (or the combined two-phase fit).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub data_cost: f64,
    pub distance_cost: f64,
    pub orientation_cost: f64,
    pub scale_cost: f64,
    /// Data cost per lattice sample; comparable across window sizes.
    pub normalized_cost: f64,
    pub data_residual_count: usize,
    pub iterations: usize,
    pub converged: bool,
    pub model: DeformableModel,
}

/// Damped minimization of the fit residuals from `init`.
pub fn lm_minimize(
    problem: &FitProblem,
    init: DVector<f64>,
    config: &FitConfig,
) -> Result<FitReport> {
    let space = problem.space_around(&init);
    let residual_fn = |p: &DVector<f64>| problem.residuals(p);
    let jacobian_fn = |p: &DVector<f64>| {
        lm::numeric_jacobian(
            |q: &DVector<f64>| problem.residuals(q),
            p,
            config.jacobian_step,
            &space,
        )
    };
    let outcome = lm::minimize(residual_fn, jacobian_fn, init, &space, &config.lm)?;
    let breakdown = problem.cost_breakdown(&outcome.params)?;
    let model = problem.posed_model(&outcome.params)?;
    Ok(FitReport {
        initial_cost: outcome.initial_cost,
        final_cost: outcome.final_cost,
        data_cost: breakdown.data,
        distance_cost: breakdown.distance,
        orientation_cost: breakdown.orientation,
        scale_cost: breakdown.scale,
        normalized_cost: breakdown.data / problem.data_residual_count() as f64,
        data_residual_count: problem.data_residual_count(),
        iterations: outcome.iterations,
        converged: outcome.converged && !outcome.aborted,
        model,
    })
}

/// Two-phase fit initialized from a candidate window: the global pose
/// starts at the window's center and size (scale folded into the
/// homography), local poses at identity. A window carries no orientation,
/// so the global phase is restarted from three rotations and the best
/// fit proceeds to the groups phase. The groups phase runs only if that
/// global phase converged; otherwise the report is flagged.
pub fn fit_face(
    model: &DeformableModel,
    image: &Image,
    window: &CandidateWindow,
    config: &FitConfig,
) -> Result<FitReport> {
    // Window init: the window center maps to the template origin and the
    // window side spans the template width.
    let k = model.base.template_width as f64 / window.size as f64;
    let (wx, wy) = window.center();
    let mut best: Option<FitReport> = None;
    for theta in [0.0, -0.3, 0.3] {
        let init_global = GlobalPose {
            homography: Homography::from_rows([k, 0.0, 0.0, 0.0, k, 0.0, 0.0, 0.0, 1.0])?,
            scale: 1.0,
            theta,
            cx: wx - (image.width() as f64 - 1.0) / 2.0,
            cy: wy - (image.height() as f64 - 1.0) / 2.0,
        };
        let report = fit_global_phase(model, image, &init_global, config)?;
        let better = match &best {
            Some(b) => {
                (report.converged, -report.final_cost) > (b.converged, -b.final_cost)
            }
            None => true,
        };
        if better {
            best = Some(report);
        }
    }
    let global_report = best.expect("three restarts ran");
    finish_groups_phase(model, image, global_report, config)
}

/// Two-phase fit from an explicit global pose, the warm-start path used
/// by tracking.
pub fn fit_face_from_pose(
    model: &DeformableModel,
    image: &Image,
    init_pose: &GlobalPose,
    config: &FitConfig,
) -> Result<FitReport> {
    let global_report = fit_global_phase(model, image, init_pose, config)?;
    finish_groups_phase(model, image, global_report, config)
}

fn frontal_reference(model: &DeformableModel) -> DeformableModel {
    let mut frontal = model.clone();
    frontal.global = GlobalPose::identity();
    for g in &mut frontal.groups {
        g.pose = GroupPose::identity();
    }
    frontal
}

fn fit_global_phase(
    model: &DeformableModel,
    image: &Image,
    init_pose: &GlobalPose,
    config: &FitConfig,
) -> Result<FitReport> {
    let frontal = frontal_reference(model);
    let constraints = config.constraint_spec(&frontal)?;

    // The global phase freezes the similarity scale at 1; fold the
    // initial pose's scale into its homography.
    let mut start = frontal.clone();
    start.global = init_pose.clone();
    if (start.global.scale - 1.0).abs() > 1e-12 {
        let s = start.global.scale;
        let scale = Homography::from_similarity(s, 0.0, 0.0, 0.0);
        let folded = scale.compose(&start.global.homography)?;
        start.global.homography = folded;
        start.global.scale = 1.0;
    }

    let global_problem = FitProblem::new(&frontal, image, &constraints, FitPhase::Global, config);
    let init = global_problem.params_from_model(&start);
    lm_minimize(&global_problem, init, config)
}

fn finish_groups_phase(
    model: &DeformableModel,
    image: &Image,
    global_report: FitReport,
    config: &FitConfig,
) -> Result<FitReport> {
    if !global_report.converged {
        return Ok(global_report);
    }
    let frontal = frontal_reference(model);
    let constraints = config.constraint_spec(&frontal)?;

    // Rewrite the fitted pose so the similarity part carries scale,
    // rotation, and translation; the per-group evaluation has no
    // homography and reads the similarity directly.
    let mut staged = global_report.model.clone();
    staged.global = staged.global.canonicalized()?;

    let groups_problem = FitProblem::new(&staged, image, &constraints, FitPhase::Groups, config);
    let init = groups_problem.params_from_model(&staged);
    let groups_report = lm_minimize(&groups_problem, init, config)?;

    Ok(FitReport {
        initial_cost: global_report.initial_cost,
        iterations: global_report.iterations + groups_report.iterations,
        converged: global_report.converged && groups_report.converged,
        ..groups_report
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// 16-wavelet refinement-built model of a smooth blob signal, shared
    /// across the fitting tests (building it is the expensive part).
    fn fitted_model() -> &'static (DeformableModel, Image, f64) {
        use std::sync::OnceLock;
        static FIXTURE: OnceLock<(DeformableModel, Image, f64)> = OnceLock::new();
        FIXTURE.get_or_init(|| {
            let signal = Image::from_fn(24, 24, |c, r| {
                let x = c as f64 - 11.5;
                let y = r as f64 - 11.5;
                let blob = |bx: f64, by: f64, s: f64, a: f64| {
                    a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp()
                };
                blob(-4.5, -3.0, 2.0, -0.3)
                    + blob(4.5, -3.0, 2.0, -0.3)
                    + blob(0.0, 4.5, 3.0, 0.25)
            });
            let (base, report) =
                crate::gabor::build_gwn(&signal, 16, 11, &crate::gabor::GwnBuildConfig::default())
                    .unwrap();
            let energy = report.final_energy;
            let model = DeformableModel::from_base(base).unwrap();
            (model, signal, energy)
        })
    }

    #[test]
    fn identity_fit_cost_equals_build_energy() {
        let (model, signal, energy) = fitted_model();
        let display = Image::from_vec(
            24,
            24,
            signal.data().iter().map(|v| v + MID_GRAY).collect(),
        );
        let config = FitConfig::default();
        let constraints = config.constraint_spec(&model).unwrap();
        let problem = FitProblem::new(&model, &display, &constraints, FitPhase::Global, &config);
        let params = problem.params_from_model(&model);
        let cost = problem.residuals(&params).unwrap().norm_squared();
        assert_abs_diff_eq!(cost, energy, epsilon = 1e-9);
    }

    #[test]
    fn zero_lambdas_leave_only_pixel_terms() {
        let (model, signal, _) = fitted_model();
        let config = FitConfig {
            lambda_distance: 0.0,
            lambda_orientation: 0.0,
            lambda_scale: 0.0,
            ..FitConfig::default()
        };
        let constraints = config.constraint_spec(&model).unwrap();
        let problem = FitProblem::new(&model, &signal, &constraints, FitPhase::Global, &config);
        assert_eq!(problem.residual_count(), problem.data_residual_count());
        assert_eq!(problem.data_residual_count(), 24 * 24);
    }

    #[test]
    fn penalties_vanish_at_identity_poses() {
        let (model, signal, _) = fitted_model();
        let config = FitConfig::default();
        let constraints = config.constraint_spec(&model).unwrap();
        let problem = FitProblem::new(&model, &signal, &constraints, FitPhase::Groups, &config);
        let params = problem.params_from_model(&model);
        let r = problem.residuals(&params).unwrap();
        for k in problem.data_residual_count()..problem.residual_count() {
            assert_abs_diff_eq!(r[k], 0.0, epsilon = 1e-12);
        }
        let breakdown = problem.cost_breakdown(&params).unwrap();
        assert_abs_diff_eq!(breakdown.distance, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(breakdown.orientation, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(breakdown.scale, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn deformed_groups_pay_penalties() {
        let (model, signal, _) = fitted_model();
        let config = FitConfig::default();
        let constraints = config.constraint_spec(&model).unwrap();
        let problem = FitProblem::new(&model, &signal, &constraints, FitPhase::Groups, &config);
        let mut params = problem.params_from_model(&model);
        params[0] += 2.0;
        let breakdown = problem.cost_breakdown(&params).unwrap();
        assert!(breakdown.distance > 0.0);
    }

    #[test]
    fn frozen_scale_never_moves() {
        let (model, signal, _) = fitted_model();
        let display = Image::from_vec(
            24,
            24,
            signal.data().iter().map(|v| v + MID_GRAY).collect(),
        );
        let config = FitConfig {
            lm: LmConfig {
                max_iterations: 5,
                ..LmConfig::default()
            },
            ..FitConfig::default()
        };
        let constraints = config.constraint_spec(&model).unwrap();
        let problem = FitProblem::new(&model, &display, &constraints, FitPhase::Global, &config);
        let mut init = problem.params_from_model(&model);
        init[10] += 0.7;
        let report = lm_minimize(&problem, init, &config).unwrap();
        assert_eq!(report.model.global.scale, 1.0);
    }

    #[test]
    fn global_fit_recovers_a_small_translation() {
        let (model, signal, energy) = fitted_model();
        // Shift the display image by one pixel; the fitted translation
        // must follow.
        let display = Image::from_fn(24, 24, |c, r| {
            let c_src = if c > 0 { c - 1 } else { 0 };
            signal.get(c_src, r) + MID_GRAY
        });
        let config = FitConfig::default();
        let constraints = config.constraint_spec(&model).unwrap();
        let problem = FitProblem::new(&model, &display, &constraints, FitPhase::Global, &config);
        let report = lm_minimize(&problem, problem.params_from_model(&model), &config).unwrap();
        assert!(report.converged);
        let pose = report.model.global.canonical_params().unwrap();
        assert_abs_diff_eq!(pose.cx, 1.0, epsilon = 0.2);
        assert!(report.final_cost < 1.2 * energy);
    }

    #[test]
    fn jacobian_step_halving_is_consistent() {
        let (model, signal, _) = fitted_model();
        let display = Image::from_vec(
            24,
            24,
            signal.data().iter().map(|v| v + MID_GRAY).collect(),
        );
        let config = FitConfig::default();
        let constraints = config.constraint_spec(&model).unwrap();
        let problem = FitProblem::new(&model, &display, &constraints, FitPhase::Global, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = problem.params_from_model(&model);
        params[10] += rng.random_range(-0.5..0.5);
        params[11] += rng.random_range(-0.5..0.5);
        params[9] += rng.random_range(-0.05..0.05);
        let j1 = numeric_jacobian(&problem, &params, 1e-3).unwrap();
        let j2 = numeric_jacobian(&problem, &params, 5e-4).unwrap();
        for col in 0..j1.ncols() {
            let a = j1.column(col);
            let b = j2.column(col);
            let denom = a.norm().max(b.norm());
            if denom < 1e-9 {
                continue;
            }
            let rel = (&a - &b).norm() / denom;
            assert!(rel < 0.01, "column {col} differs by {rel:.3}");
        }
    }

    #[test]
    fn fit_report_serializes() {
        let (model, signal, _) = fitted_model();
        let display = Image::from_vec(
            24,
            24,
            signal.data().iter().map(|v| v + MID_GRAY).collect(),
        );
        let config = FitConfig {
            lm: LmConfig {
                max_iterations: 3,
                ..LmConfig::default()
            },
            ..FitConfig::default()
        };
        let constraints = config.constraint_spec(&model).unwrap();
        let problem = FitProblem::new(&model, &display, &constraints, FitPhase::Global, &config);
        let report = lm_minimize(&problem, problem.params_from_model(&model), &config).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"final_cost\""));
        assert!(json.contains("\"converged\""));
    }
}
