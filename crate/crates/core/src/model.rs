//! The three-group deformable symmetric face model.
//!
//! A frontal wavelet network is split into groups A (top-left 4), B
//! (top-right 4), and C (bottom 8). The whole model carries a global pose
//! (scale, rotation, translation, and a homography for perspective); each
//! group additionally carries a local pose `(cx, cy, theta, sx, sy)` that
//! translates, rotates, and dilates it about its own frontal centroid.
//!
//! Inter-group structure is measured in the frontal template frame, after
//! local poses but independent of the global pose: centroid distances,
//! circular-mean orientations from fixed wavelet pairs, and dilation sums.
//! Those measures, frozen on the undeformed model, become the symmetry
//! constraint targets during fitting.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gabor::{normalize_angle, Gwn};
use crate::geometry::{apply_matrix, Homography, Point};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupLabel {
    /// Top-left quadrant.
    A,
    /// Top-right quadrant.
    B,
    /// Bottom half.
    C,
}

impl GroupLabel {
    pub const ALL: [GroupLabel; 3] = [GroupLabel::A, GroupLabel::B, GroupLabel::C];

    fn as_char(self) -> char {
        match self {
            GroupLabel::A => 'A',
            GroupLabel::B => 'B',
            GroupLabel::C => 'C',
        }
    }
}

/// The unordered group pairs, in canonical order.
pub const GROUP_PAIRS: [(GroupLabel, GroupLabel); 3] = [
    (GroupLabel::A, GroupLabel::B),
    (GroupLabel::A, GroupLabel::C),
    (GroupLabel::B, GroupLabel::C),
];

/// Local pose of one group: translation, orientation, and dilation
/// applied about the group's frontal centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupPose {
    pub cx: f64,
    pub cy: f64,
    pub theta: f64,
    pub sx: f64,
    pub sy: f64,
}

impl GroupPose {
    pub fn identity() -> GroupPose {
        GroupPose {
            cx: 0.0,
            cy: 0.0,
            theta: 0.0,
            sx: 1.0,
            sy: 1.0,
        }
    }

    pub fn mirrored_x(&self) -> GroupPose {
        GroupPose {
            cx: -self.cx,
            cy: self.cy,
            theta: normalize_angle(-self.theta),
            sx: self.sx,
            sy: self.sy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletGroup {
    pub label: GroupLabel,
    /// Indices into the base network's wavelet list.
    pub member_indices: Vec<usize>,
    #[serde(rename = "m")]
    pub pose: GroupPose,
}

/// Whole-model pose: the image-to-template map is
/// `u = s H R(theta) (x - c)` with homogeneous normalization after `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPose {
    pub homography: Homography,
    pub scale: f64,
    pub theta: f64,
    pub cx: f64,
    pub cy: f64,
}

impl GlobalPose {
    pub fn identity() -> GlobalPose {
        GlobalPose {
            homography: Homography::identity(),
            scale: 1.0,
            theta: 0.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    /// Composite projective matrix of the full image-to-template map.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let scale = Homography::from_similarity(self.scale, 0.0, 0.0, 0.0);
        let rigid = Homography::from_similarity(1.0, self.theta, self.cx, self.cy);
        scale.as_matrix() * self.homography.as_matrix() * rigid.as_matrix()
    }

    /// Composite of the perspective-free part `s R(theta) (x - c)`, used
    /// by the per-group evaluation which carries no homography.
    pub fn to_similarity_matrix(&self) -> Matrix3<f64> {
        *Homography::from_similarity(self.scale, self.theta, self.cx, self.cy).as_matrix()
    }

    /// Gauge-free description of the composite map: the same warp can be
    /// written with scale inside the homography or in the similarity, so
    /// comparisons go through this canonical form.
    ///
    /// `c` is the image point mapping to the template origin; scale and
    /// rotation come from the local Jacobian of the template-to-image map
    /// there; the perspective entries are read off the homography left
    /// over once that similarity is factored out.
    pub fn canonical_params(&self) -> Result<PoseParams> {
        let m = self.to_matrix();
        let minv = m
            .try_inverse()
            .ok_or_else(|| Error::SingularMatrix("non-invertible pose".into()))?;
        let center = apply_matrix(&minv, Point::new(0.0, 0.0))?;
        // Jacobian of the projective map template->image at the origin.
        let a33 = minv[(2, 2)];
        if a33.abs() <= 1e-12 {
            return Err(Error::SingularMatrix("pose Jacobian gauge ~ 0".into()));
        }
        let j00 = (minv[(0, 0)] * a33 - minv[(0, 2)] * minv[(2, 0)]) / (a33 * a33);
        let j01 = (minv[(0, 1)] * a33 - minv[(0, 2)] * minv[(2, 1)]) / (a33 * a33);
        let j10 = (minv[(1, 0)] * a33 - minv[(1, 2)] * minv[(2, 0)]) / (a33 * a33);
        let j11 = (minv[(1, 1)] * a33 - minv[(1, 2)] * minv[(2, 1)]) / (a33 * a33);
        let det = j00 * j11 - j01 * j10;
        if det.abs() <= 1e-15 {
            return Err(Error::SingularMatrix("degenerate pose Jacobian".into()));
        }
        let scale = 1.0 / det.abs().sqrt();
        let theta = (j01 - j10).atan2(j00 + j11);

        let similarity = Homography::from_similarity(1.0, theta, center.x, center.y);
        let sim_inv = similarity
            .as_matrix()
            .try_inverse()
            .expect("similarity is invertible");
        let descale = Matrix3::new(
            1.0 / scale,
            0.0,
            0.0,
            0.0,
            1.0 / scale,
            0.0,
            0.0,
            0.0,
            1.0,
        );
        let residual_h = descale * m * sim_inv;
        let h33 = residual_h[(2, 2)];
        if h33.abs() <= 1e-12 {
            return Err(Error::SingularMatrix("canonical gauge entry h33 ~ 0".into()));
        }
        let h = residual_h / h33;
        Ok(PoseParams {
            scale,
            theta,
            cx: center.x,
            cy: center.y,
            h31: h[(2, 0)],
            h32: h[(2, 1)],
        })
    }

    /// Rewrites the pose so the similarity part carries the whole scale,
    /// rotation, and translation, leaving a near-identity homography.
    /// The composite map is unchanged.
    pub fn canonicalized(&self) -> Result<GlobalPose> {
        let p = self.canonical_params()?;
        let m = self.to_matrix();
        let sim_inv = Homography::from_similarity(1.0, p.theta, p.cx, p.cy)
            .as_matrix()
            .try_inverse()
            .expect("similarity is invertible");
        let descale = Matrix3::new(
            1.0 / p.scale,
            0.0,
            0.0,
            0.0,
            1.0 / p.scale,
            0.0,
            0.0,
            0.0,
            1.0,
        );
        let residual_h = descale * m * sim_inv;
        let mut rows = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rows[3 * r + c] = residual_h[(r, c)];
            }
        }
        Ok(GlobalPose {
            homography: Homography::from_rows(rows)?,
            scale: p.scale,
            theta: p.theta,
            cx: p.cx,
            cy: p.cy,
        })
    }
}

/// Canonical pose coordinates used for reporting and ground-truth
/// comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub scale: f64,
    pub theta: f64,
    pub cx: f64,
    pub cy: f64,
    pub h31: f64,
    pub h32: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformableModel {
    pub base: Gwn,
    pub global: GlobalPose,
    pub groups: [WaveletGroup; 3],
}

/// Target structure values for one group pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMeasure {
    pub distance: f64,
    pub orientation_difference: f64,
    pub scale_difference: f64,
}

/// Frontal-model targets for every group pair plus penalty weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    /// Indexed like [`GROUP_PAIRS`].
    pub targets: [PairMeasure; 3],
    pub lambda_distance: f64,
    pub lambda_orientation: f64,
    pub lambda_scale: f64,
}

/// Dilation-product sum over a group's wavelets: each entry is the
/// (horizontal, vertical) scale factor of one wavelet relative to its
/// frontal extent.
pub fn scale_product_sum(gammas: &[(f64, f64)]) -> f64 {
    gammas.iter().map(|(h, v)| h * v).sum()
}

/// Mean direction of a set of angles via summed unit vectors.
pub fn circular_mean(angles: &[f64]) -> f64 {
    let (sin_sum, cos_sum) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    sin_sum.atan2(cos_sum)
}

/// Absolute circular difference in `[0, pi]`.
pub fn circular_difference(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

impl DeformableModel {
    /// Splits a frontal network into the three groups by wavelet position:
    /// the top half (by center y, ties by x then index) is divided
    /// left/right into A and B, the bottom half forms C. The wavelet count
    /// must be a positive multiple of 4; the face model uses 16.
    pub fn from_base(base: Gwn) -> Result<DeformableModel> {
        let n = base.len();
        if n == 0 || n % 4 != 0 {
            return Err(Error::InvalidInput(format!(
                "group split needs a positive multiple of 4 wavelets, got {n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            let a = &base.wavelets[i];
            let b = &base.wavelets[j];
            (a.cy, a.cx, i)
                .partial_cmp(&(b.cy, b.cx, j))
                .expect("finite wavelet centers")
        });
        let (top, bottom) = order.split_at(n / 2);
        let mut top: Vec<usize> = top.to_vec();
        top.sort_by(|&i, &j| {
            let a = &base.wavelets[i];
            let b = &base.wavelets[j];
            (a.cx, a.cy, i)
                .partial_cmp(&(b.cx, b.cy, j))
                .expect("finite wavelet centers")
        });
        let (left, right) = top.split_at(n / 4);

        let members_in_pair_order = |indices: &[usize]| -> Vec<usize> {
            // Reading order within the group fixes the orientation pairs:
            // member i pairs with member i + len/2.
            let mut m = indices.to_vec();
            m.sort_by(|&i, &j| {
                let a = &base.wavelets[i];
                let b = &base.wavelets[j];
                (a.cy, a.cx, i)
                    .partial_cmp(&(b.cy, b.cx, j))
                    .expect("finite wavelet centers")
            });
            m
        };

        let groups = [
            WaveletGroup {
                label: GroupLabel::A,
                member_indices: members_in_pair_order(left),
                pose: GroupPose::identity(),
            },
            WaveletGroup {
                label: GroupLabel::B,
                member_indices: members_in_pair_order(right),
                pose: GroupPose::identity(),
            },
            WaveletGroup {
                label: GroupLabel::C,
                member_indices: members_in_pair_order(bottom),
                pose: GroupPose::identity(),
            },
        ];
        Ok(DeformableModel {
            base,
            global: GlobalPose::identity(),
            groups,
        })
    }

    pub fn group(&self, label: GroupLabel) -> &WaveletGroup {
        self.groups
            .iter()
            .find(|g| g.label == label)
            .expect("all three groups present")
    }

    pub fn group_mut(&mut self, label: GroupLabel) -> &mut WaveletGroup {
        self.groups
            .iter_mut()
            .find(|g| g.label == label)
            .expect("all three groups present")
    }

    /// Frontal (unposed) centroid of a group, the anchor its local pose
    /// deforms about.
    pub fn frontal_centroid(&self, label: GroupLabel) -> Point {
        let group = self.group(label);
        let mut x = 0.0;
        let mut y = 0.0;
        for &i in &group.member_indices {
            x += self.base.wavelets[i].cx;
            y += self.base.wavelets[i].cy;
        }
        let k = group.member_indices.len() as f64;
        Point::new(x / k, y / k)
    }

    /// Position of one wavelet after its group's local pose.
    pub fn posed_center(&self, label: GroupLabel, member: usize) -> Point {
        let group = self.group(label);
        let anchor = self.frontal_centroid(label);
        let w = &self.base.wavelets[group.member_indices[member]];
        let m = &group.pose;
        let (sin, cos) = m.theta.sin_cos();
        let dx = (w.cx - anchor.x) * m.sx;
        let dy = (w.cy - anchor.y) * m.sy;
        Point::new(
            anchor.x + m.cx + cos * dx - sin * dy,
            anchor.y + m.cy + sin * dx + cos * dy,
        )
    }

    /// Mean of the group's posed wavelet centers.
    pub fn group_centroid(&self, label: GroupLabel) -> Point {
        let k = self.group(label).member_indices.len();
        let mut x = 0.0;
        let mut y = 0.0;
        for i in 0..k {
            let p = self.posed_center(label, i);
            x += p.x;
            y += p.y;
        }
        Point::new(x / k as f64, y / k as f64)
    }

    /// Euclidean distance between two group centroids.
    pub fn group_distance(&self, a: GroupLabel, b: GroupLabel) -> f64 {
        self.group_centroid(a).distance(&self.group_centroid(b))
    }

    /// Circular mean of the group's pair directions. Members are paired
    /// `(i, i + half)` in reading order; each pair contributes
    /// `atan2(y2 - y1, x2 - x1)`.
    pub fn group_orientation(&self, label: GroupLabel) -> Result<f64> {
        let k = self.group(label).member_indices.len();
        let half = k / 2;
        let mut angles = Vec::with_capacity(half);
        for i in 0..half {
            let p1 = self.posed_center(label, i);
            let p2 = self.posed_center(label, i + half);
            if p1.distance(&p2) < 1e-12 {
                return Err(Error::CoincidentPair {
                    group: label.as_char(),
                });
            }
            angles.push((p2.y - p1.y).atan2(p2.x - p1.x));
        }
        Ok(circular_mean(&angles))
    }

    /// Absolute circular difference of two group orientations, in `[0, pi]`.
    pub fn orientation_difference(&self, a: GroupLabel, b: GroupLabel) -> Result<f64> {
        Ok(circular_difference(
            self.group_orientation(a)?,
            self.group_orientation(b)?,
        ))
    }

    /// Dilation-product sum over the group. Every wavelet's scale factors
    /// relative to the frontal model equal its group's local dilation.
    pub fn group_scale(&self, label: GroupLabel) -> f64 {
        let group = self.group(label);
        let gammas: Vec<(f64, f64)> = group
            .member_indices
            .iter()
            .map(|_| (group.pose.sx, group.pose.sy))
            .collect();
        scale_product_sum(&gammas)
    }

    /// Per-wavelet-normalized dilation difference. Groups have unequal
    /// sizes (|C| = 2|A|), so the raw sums are divided by the member count
    /// before comparison.
    pub fn scale_difference(&self, a: GroupLabel, b: GroupLabel) -> f64 {
        let na = self.group(a).member_indices.len() as f64;
        let nb = self.group(b).member_indices.len() as f64;
        (self.group_scale(a) / na - self.group_scale(b) / nb).abs()
    }

    /// All three pair measures of the current deformation state.
    pub fn measure_pairs(&self) -> Result<[PairMeasure; 3]> {
        let mut out = [PairMeasure {
            distance: 0.0,
            orientation_difference: 0.0,
            scale_difference: 0.0,
        }; 3];
        for (slot, (a, b)) in out.iter_mut().zip(GROUP_PAIRS) {
            *slot = PairMeasure {
                distance: self.group_distance(a, b),
                orientation_difference: self.orientation_difference(a, b)?,
                scale_difference: self.scale_difference(a, b),
            };
        }
        Ok(out)
    }

    /// Model value at image point `x` using every wavelet under the full
    /// global pose (local poses ignored).
    pub fn global_value_at(&self, pose_matrix: &Matrix3<f64>, x: Point) -> Result<f64> {
        let u = apply_matrix(pose_matrix, x)?;
        Ok(self.base.reconstruct_at(u.x, u.y))
    }

    /// Hull of the template's pixel centers. The reconstruction is only
    /// constrained by the build inside this lattice; values beyond it
    /// extrapolate freely and are not part of the model's support.
    fn template_contains(&self, u: Point) -> bool {
        u.x.abs() <= (self.base.template_width as f64 - 1.0) / 2.0
            && u.y.abs() <= (self.base.template_height as f64 - 1.0) / 2.0
    }

    /// Frontal-frame box around the group's wavelet centers with a small
    /// margin, clipped to the template. Kept tight deliberately: broad
    /// wavelets would otherwise stretch every group's region over the
    /// whole template, and overlapping regions make the per-group data
    /// terms degenerate (each group then tries to explain the others'
    /// content).
    pub fn group_support_box(&self, label: GroupLabel) -> (f64, f64, f64, f64) {
        const MARGIN: f64 = 3.0;
        let group = self.group(label);
        let mut xmin = f64::INFINITY;
        let mut xmax = f64::NEG_INFINITY;
        let mut ymin = f64::INFINITY;
        let mut ymax = f64::NEG_INFINITY;
        for &i in &group.member_indices {
            let w = &self.base.wavelets[i];
            xmin = xmin.min(w.cx - MARGIN);
            xmax = xmax.max(w.cx + MARGIN);
            ymin = ymin.min(w.cy - MARGIN);
            ymax = ymax.max(w.cy + MARGIN);
        }
        let hw = (self.base.template_width as f64 - 1.0) / 2.0;
        let hh = (self.base.template_height as f64 - 1.0) / 2.0;
        (xmin.max(-hw), xmax.min(hw), ymin.max(-hh), ymax.min(hh))
    }

    /// Residuals `img(x) - model(x)` over every image pixel whose mapped
    /// template point lands inside the template, using the full global
    /// pose (all wavelets; local poses ignored).
    ///
    /// Pixels projecting behind the camera (`w' <= 0`) are outside the
    /// support.
    pub fn super_wavelet_all(&self, img: &Image) -> Result<SuperWaveletResiduals> {
        let pose = self.global.to_matrix();
        let mut out = SuperWaveletResiduals::default();
        for row in 0..img.height() {
            let y = img.coord_y(row);
            for col in 0..img.width() {
                let x = img.coord_x(col);
                let w = pose[(2, 0)] * x + pose[(2, 1)] * y + pose[(2, 2)];
                if w <= 1e-9 {
                    continue;
                }
                let u = Point::new(
                    (pose[(0, 0)] * x + pose[(0, 1)] * y + pose[(0, 2)]) / w,
                    (pose[(1, 0)] * x + pose[(1, 1)] * y + pose[(1, 2)]) / w,
                );
                if !self.template_contains(u) {
                    continue;
                }
                out.pixels.push((col, row));
                out.residuals
                    .push(img.get(col, row) - self.base.reconstruct_at(u.x, u.y));
            }
        }
        Ok(out)
    }

    /// Inverse of the group's local pose applied to a frontal-frame point.
    fn local_pose_inverse(&self, label: GroupLabel, v: Point) -> Point {
        let group = self.group(label);
        let anchor = self.frontal_centroid(label);
        let m = &group.pose;
        let (sin, cos) = m.theta.sin_cos();
        let dx = v.x - anchor.x - m.cx;
        let dy = v.y - anchor.y - m.cy;
        Point::new(
            anchor.x + (cos * dx + sin * dy) / m.sx,
            anchor.y + (-sin * dx + cos * dy) / m.sy,
        )
    }

    /// Model value at image point `x` using only one group's wavelets:
    /// the perspective-free global similarity is applied first, then the
    /// group's local pose.
    pub fn group_value_at(&self, label: GroupLabel, x: Point) -> Result<f64> {
        let sim = self.global.to_similarity_matrix();
        let v = apply_matrix(&sim, x)?;
        let u = self.local_pose_inverse(label, v);
        let group = self.group(label);
        Ok(group
            .member_indices
            .iter()
            .map(|&i| self.base.weights[i] * self.base.wavelets[i].evaluate(u.x, u.y))
            .sum())
    }

    /// Residuals `img(x) - group(x)` over every pixel whose mapped point
    /// lands inside the group's frontal support box. No perspective is
    /// applied in the group evaluation.
    pub fn super_wavelet_group(
        &self,
        label: GroupLabel,
        img: &Image,
    ) -> Result<SuperWaveletResiduals> {
        let sim = self.global.to_similarity_matrix();
        let (xmin, xmax, ymin, ymax) = self.group_support_box(label);
        let group = self.group(label);
        let mut out = SuperWaveletResiduals::default();
        for row in 0..img.height() {
            let y = img.coord_y(row);
            for col in 0..img.width() {
                let x = img.coord_x(col);
                let v = apply_matrix(&sim, Point::new(x, y))?;
                let u = self.local_pose_inverse(label, v);
                if u.x < xmin || u.x > xmax || u.y < ymin || u.y > ymax {
                    continue;
                }
                let value: f64 = group
                    .member_indices
                    .iter()
                    .map(|&i| self.base.weights[i] * self.base.wavelets[i].evaluate(u.x, u.y))
                    .sum();
                out.pixels.push((col, row));
                out.residuals.push(img.get(col, row) - value);
            }
        }
        Ok(out)
    }

    /// Reflection about the vertical axis. Wavelets mirror (weights flip
    /// sign with the odd carrier), groups A and B trade places, local and
    /// global angles negate, and the homography is conjugated by the
    /// reflection. An exact involution.
    ///
    /// Centered coordinates make an image column flip the same `x -> -x`
    /// map, so mirroring a model against a mirrored image needs nothing
    /// beyond this.
    pub fn mirrored(&self) -> DeformableModel {
        let base = Gwn {
            template_width: self.base.template_width,
            template_height: self.base.template_height,
            wavelets: self.base.wavelets.iter().map(|w| w.mirrored_x()).collect(),
            weights: self.base.weights.iter().map(|w| -w).collect(),
        };
        let relabel = |label: GroupLabel| match label {
            GroupLabel::A => GroupLabel::B,
            GroupLabel::B => GroupLabel::A,
            GroupLabel::C => GroupLabel::C,
        };
        let mut groups: Vec<WaveletGroup> = self
            .groups
            .iter()
            .map(|g| WaveletGroup {
                label: relabel(g.label),
                member_indices: g.member_indices.clone(),
                pose: g.pose.mirrored_x(),
            })
            .collect();
        groups.sort_by_key(|g| g.label);
        let global = GlobalPose {
            homography: self.global.homography.mirrored_x(),
            scale: self.global.scale,
            theta: normalize_angle(-self.global.theta),
            cx: -self.global.cx,
            cy: self.global.cy,
        };
        DeformableModel {
            base,
            global,
            groups: groups.try_into().expect("three groups"),
        }
    }
}

impl ConstraintSpec {
    /// Freezes the current pair measures as targets. Called on the frontal
    /// model so that identity deformation has zero penalty.
    pub fn measured_on(model: &DeformableModel, lambda: f64) -> Result<ConstraintSpec> {
        Ok(ConstraintSpec {
            targets: model.measure_pairs()?,
            lambda_distance: lambda,
            lambda_orientation: lambda,
            lambda_scale: lambda,
        })
    }
}

/// Residuals of a super-wavelet evaluation with the pixels they came from.
#[derive(Debug, Clone, Default)]
pub struct SuperWaveletResiduals {
    pub pixels: Vec<(usize, usize)>,
    pub residuals: Vec<f64>,
}
