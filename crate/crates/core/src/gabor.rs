//! Odd Gabor wavelets and wavelet networks.
//!
//! A wavelet is an oriented sine carrier under an anisotropic Gaussian
//! envelope, parameterized by translation `(cx, cy)`, orientation `theta`,
//! and inverse-extent factors `(sx, sy)`. A network approximates an image
//! patch as a weighted sum of such wavelets; construction alternates exact
//! linear weight solves with damped nonlinear refinement of the wavelet
//! parameters, so the reconstruction energy never increases.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::Image;
use crate::lm::{self, LmConfig, ParamSpace};

/// Parameter vector of a single odd Gabor wavelet.
///
/// `sx` controls both the carrier frequency and the envelope extent along
/// the oscillation axis; `sy` the extent across it. Both must be positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborWavelet {
    pub cx: f64,
    pub cy: f64,
    pub theta: f64,
    pub sx: f64,
    pub sy: f64,
}

/// Wraps an angle to `[-pi, pi)`. Values already in range pass through
/// unchanged, so negation stays an exact involution.
pub fn normalize_angle(theta: f64) -> f64 {
    let pi = std::f64::consts::PI;
    if (-pi..pi).contains(&theta) {
        return theta;
    }
    let two_pi = 2.0 * pi;
    let mut t = theta.rem_euclid(two_pi);
    if t >= pi {
        t -= two_pi;
    }
    t
}

impl GaborWavelet {
    pub fn new(cx: f64, cy: f64, theta: f64, sx: f64, sy: f64) -> GaborWavelet {
        assert!(sx > 0.0 && sy > 0.0, "wavelet extents must be positive");
        GaborWavelet {
            cx,
            cy,
            theta: normalize_angle(theta),
            sx,
            sy,
        }
    }

    /// Value at a point: Gaussian envelope times the sine carrier along
    /// the rotated axis.
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin_t, cos_t) = self.theta.sin_cos();
        let along = self.sx * (dx * cos_t - dy * sin_t);
        let across = self.sy * (dx * sin_t + dy * cos_t);
        (-0.5 * (along * along + across * across)).exp() * along.sin()
    }

    /// Rasterizes the wavelet at every pixel center of a `width x height`
    /// field (centered coordinate frame).
    pub fn render(&self, width: usize, height: usize) -> Image {
        assert!(width >= 1 && height >= 1);
        let cx0 = (width as f64 - 1.0) / 2.0;
        let cy0 = (height as f64 - 1.0) / 2.0;
        Image::from_fn(width, height, |col, row| {
            self.evaluate(col as f64 - cx0, row as f64 - cy0)
        })
    }

    /// Reflection about the vertical axis `x = 0`. The reflected field
    /// equals the negated original at mirrored points, so network weights
    /// must flip sign alongside.
    pub fn mirrored_x(&self) -> GaborWavelet {
        GaborWavelet {
            cx: -self.cx,
            cy: self.cy,
            theta: normalize_angle(-self.theta),
            sx: self.sx,
            sy: self.sy,
        }
    }
}

/// A wavelet network: wavelets, their linear weights, and the pixel size
/// of the patch it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gwn {
    pub template_width: usize,
    pub template_height: usize,
    pub wavelets: Vec<GaborWavelet>,
    pub weights: Vec<f64>,
}

impl Gwn {
    pub fn len(&self) -> usize {
        self.wavelets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelets.is_empty()
    }

    /// Weighted wavelet sum at a point of the template frame.
    pub fn reconstruct_at(&self, x: f64, y: f64) -> f64 {
        self.wavelets
            .iter()
            .zip(&self.weights)
            .map(|(w, omega)| omega * w.evaluate(x, y))
            .sum()
    }

    /// Rasterized reconstruction over the template grid.
    pub fn reconstruct(&self) -> Image {
        let cx0 = (self.template_width as f64 - 1.0) / 2.0;
        let cy0 = (self.template_height as f64 - 1.0) / 2.0;
        Image::from_fn(self.template_width, self.template_height, |col, row| {
            self.reconstruct_at(col as f64 - cx0, row as f64 - cy0)
        })
    }

    /// Reconstruction residual energy against `img`.
    pub fn energy(&self, img: &Image) -> f64 {
        let recon = self.reconstruct_field(img.width(), img.height());
        img.data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn reconstruct_field(&self, width: usize, height: usize) -> Image {
        let cx0 = (width as f64 - 1.0) / 2.0;
        let cy0 = (height as f64 - 1.0) / 2.0;
        Image::from_fn(width, height, |col, row| {
            self.reconstruct_at(col as f64 - cx0, row as f64 - cy0)
        })
    }
}

/// Result of the linear weight solve.
#[derive(Debug, Clone)]
pub struct WeightSolution {
    pub weights: Vec<f64>,
    /// The rendered wavelets were linearly dependent; the minimum-norm
    /// solution was returned.
    pub rank_deficient: bool,
}

/// Least-squares weights minimizing `|| img - sum_i w_i psi_i ||^2` over
/// the image grid. Rank-deficient systems yield the minimum-norm solution
/// with a flag.
pub fn solve_weights(wavelets: &[GaborWavelet], img: &Image) -> Result<WeightSolution> {
    if wavelets.is_empty() {
        return Err(crate::error::Error::EmptyWaveletSet);
    }
    if img.data().is_empty() {
        return Err(crate::error::Error::EmptyImage);
    }
    let n_pix = img.width() * img.height();
    let mut design = DMatrix::zeros(n_pix, wavelets.len());
    for (j, w) in wavelets.iter().enumerate() {
        let field = w.render(img.width(), img.height());
        design.set_column(j, &DVector::from_column_slice(field.data()));
    }
    let b = DVector::from_column_slice(img.data());
    let svd = design.svd(true, true);
    let max_sv = svd.singular_values.amax();
    let eps = 1e-10 * max_sv.max(1e-300);
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let sol = svd
        .solve(&b, eps)
        .map_err(|e| crate::error::Error::SingularMatrix(e.to_string()))?;
    Ok(WeightSolution {
        weights: sol.iter().cloned().collect(),
        rank_deficient: rank < wavelets.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GwnBuildConfig {
    pub max_outer_iterations: usize,
    /// Stop when an outer round improves the energy by less than this
    /// fraction.
    pub energy_rel_tol: f64,
    /// Damped refinement steps per outer round.
    pub inner_lm_iterations: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Finite-difference step for the refinement Jacobian.
    pub jacobian_step: f64,
}

impl Default for GwnBuildConfig {
    fn default() -> Self {
        GwnBuildConfig {
            max_outer_iterations: 200,
            energy_rel_tol: 1e-6,
            inner_lm_iterations: 4,
            scale_min: 0.01,
            scale_max: 10.0,
            jacobian_step: 1e-4,
        }
    }
}

/// Energy trace of a network build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GwnBuildReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Energy after each outer round, starting with the initial value.
    pub energies: Vec<f64>,
    pub converged: bool,
}

/// Deterministic seed layout: a near-square grid over the patch with the
/// carrier period spanning about a quarter of the patch width, positions
/// jittered by the seed.
pub fn seed_wavelets(
    n_wavelets: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Vec<GaborWavelet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (n_wavelets as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n_wavelets.div_ceil(cols);
    let w = width as f64;
    let h = height as f64;
    let s = 8.0 * std::f64::consts::PI / w;
    let jitter = 0.1 * w / cols as f64;
    (0..n_wavelets)
        .map(|i| {
            let col = i % cols;
            let row = i / cols;
            let x = ((col as f64 + 0.5) / cols as f64 - 0.5) * w;
            let y = ((row as f64 + 0.5) / rows as f64 - 0.5) * h;
            GaborWavelet::new(
                x + rng.random_range(-jitter..jitter),
                y + rng.random_range(-jitter..jitter),
                0.0,
                s * rng.random_range(0.9..1.1),
                s * rng.random_range(0.9..1.1),
            )
        })
        .collect()
}

/// Builds a network for `img` from the deterministic grid seed.
pub fn build_gwn(
    img: &Image,
    n_wavelets: usize,
    seed: u64,
    config: &GwnBuildConfig,
) -> Result<(Gwn, GwnBuildReport)> {
    build_gwn_with_init(
        img,
        seed_wavelets(n_wavelets, img.width(), img.height(), seed),
        config,
    )
}

/// Builds a network starting from caller-provided wavelets. Used to warm
/// start a larger network from a smaller one.
pub fn build_gwn_with_init(
    img: &Image,
    init: Vec<GaborWavelet>,
    config: &GwnBuildConfig,
) -> Result<(Gwn, GwnBuildReport)> {
    let (width, height) = (img.width(), img.height());
    if init.is_empty() {
        let energy = img.energy();
        return Ok((
            Gwn {
                template_width: width,
                template_height: height,
                wavelets: Vec::new(),
                weights: Vec::new(),
            },
            GwnBuildReport {
                initial_energy: energy,
                final_energy: energy,
                energies: vec![energy],
                converged: true,
            },
        ));
    }

    let mut wavelets = init;
    let space = param_space(wavelets.len(), width, height, config);
    for (i, w) in wavelets.iter_mut().enumerate() {
        w.cx = w.cx.clamp(space.lower[5 * i], space.upper[5 * i]);
        w.cy = w.cy.clamp(space.lower[5 * i + 1], space.upper[5 * i + 1]);
        w.sx = w.sx.clamp(config.scale_min, config.scale_max);
        w.sy = w.sy.clamp(config.scale_min, config.scale_max);
    }
    let mut weights = solve_weights(&wavelets, img)?.weights;
    let mut energy = energy_of(img, &wavelets, &weights);
    let mut energies = vec![energy];
    let mut converged = false;
    let lm_config = LmConfig {
        max_iterations: config.inner_lm_iterations,
        ..LmConfig::default()
    };

    for _ in 0..config.max_outer_iterations {
        // The odd carrier makes a wavelet nearly equal to its negation
        // shifted by half a period, and damped steps cannot cross the
        // energy ridge between the two. Propose that jump explicitly and
        // keep it only when it strictly lowers the energy.
        if try_phase_jumps(img, &mut wavelets, &mut weights, &space) {
            weights = solve_weights(&wavelets, img)?.weights;
        }

        let params = pack(&wavelets);
        let target = DVector::from_column_slice(img.data());
        let w = weights.clone();
        let residual_fn = |p: &DVector<f64>| -> Result<DVector<f64>> {
            Ok(&target - render_sum(p, &w, width, height))
        };
        let jacobian_fn = |p: &DVector<f64>| structured_jacobian(p, &w, width, height, config);
        let outcome = lm::minimize(&residual_fn, jacobian_fn, params, &space, &lm_config)?;
        wavelets = unpack(&outcome.params);

        weights = solve_weights(&wavelets, img)?.weights;
        let new_energy = energy_of(img, &wavelets, &weights);
        energies.push(new_energy);
        let decrease = energy - new_energy;
        energy = new_energy;
        if decrease < config.energy_rel_tol * energy.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    for w in &mut wavelets {
        w.theta = normalize_angle(w.theta);
    }
    let initial_energy = energies[0];
    Ok((
        Gwn {
            template_width: width,
            template_height: height,
            wavelets,
            weights,
        },
        GwnBuildReport {
            initial_energy,
            final_energy: energy,
            energies,
            converged,
        },
    ))
}

fn param_space(n: usize, width: usize, height: usize, config: &GwnBuildConfig) -> ParamSpace {
    let mut space = ParamSpace::free(5 * n);
    let half_w = width as f64 / 2.0;
    let half_h = height as f64 / 2.0;
    for i in 0..n {
        space.lower[5 * i] = -1.5 * half_w;
        space.upper[5 * i] = 1.5 * half_w;
        space.lower[5 * i + 1] = -1.5 * half_h;
        space.upper[5 * i + 1] = 1.5 * half_h;
        space.lower[5 * i + 3] = config.scale_min;
        space.upper[5 * i + 3] = config.scale_max;
        space.lower[5 * i + 4] = config.scale_min;
        space.upper[5 * i + 4] = config.scale_max;
    }
    space
}

fn pack(wavelets: &[GaborWavelet]) -> DVector<f64> {
    let mut p = DVector::zeros(5 * wavelets.len());
    for (i, w) in wavelets.iter().enumerate() {
        p[5 * i] = w.cx;
        p[5 * i + 1] = w.cy;
        p[5 * i + 2] = w.theta;
        p[5 * i + 3] = w.sx;
        p[5 * i + 4] = w.sy;
    }
    p
}

fn unpack(p: &DVector<f64>) -> Vec<GaborWavelet> {
    (0..p.len() / 5)
        .map(|i| GaborWavelet {
            cx: p[5 * i],
            cy: p[5 * i + 1],
            theta: p[5 * i + 2],
            sx: p[5 * i + 3],
            sy: p[5 * i + 4],
        })
        .collect()
}

fn render_sum(p: &DVector<f64>, weights: &[f64], width: usize, height: usize) -> DVector<f64> {
    let wavelets = unpack(p);
    let cx0 = (width as f64 - 1.0) / 2.0;
    let cy0 = (height as f64 - 1.0) / 2.0;
    let mut out = DVector::zeros(width * height);
    for (w, omega) in wavelets.iter().zip(weights) {
        let mut idx = 0;
        for row in 0..height {
            let y = row as f64 - cy0;
            for col in 0..width {
                out[idx] += omega * w.evaluate(col as f64 - cx0, y);
                idx += 1;
            }
        }
    }
    out
}

fn energy_of(img: &Image, wavelets: &[GaborWavelet], weights: &[f64]) -> f64 {
    let recon = render_sum(&pack(wavelets), weights, img.width(), img.height());
    img.data()
        .iter()
        .zip(recon.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Each parameter touches exactly one wavelet, so a Jacobian column only
/// needs that wavelet re-rendered.
fn structured_jacobian(
    p: &DVector<f64>,
    weights: &[f64],
    width: usize,
    height: usize,
    config: &GwnBuildConfig,
) -> Result<DMatrix<f64>> {
    let n = p.len() / 5;
    let h = config.jacobian_step;
    let columns: Vec<Vec<DVector<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cols = Vec::with_capacity(5);
            for k in 0..5 {
                let j = 5 * i + k;
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus[j] += h;
                minus[j] -= h;
                // Keep scales valid when differencing near the lower bound.
                if k >= 3 {
                    minus[j] = minus[j].max(1e-6);
                }
                let wp = wavelet_at(&plus, i);
                let wm = wavelet_at(&minus, i);
                let denom = plus[j] - minus[j];
                let fp = wp.render(width, height);
                let fm = wm.render(width, height);
                let col = DVector::from_iterator(
                    width * height,
                    fp.data()
                        .iter()
                        .zip(fm.data())
                        .map(|(a, b)| -weights[i] * (a - b) / denom),
                );
                cols.push(col);
            }
            cols
        })
        .collect();
    let mut jac = DMatrix::zeros(width * height, 5 * n);
    for (i, cols) in columns.into_iter().enumerate() {
        for (k, col) in cols.into_iter().enumerate() {
            jac.set_column(5 * i + k, &col);
        }
    }
    Ok(jac)
}

/// Greedy carrier-phase jumps: each wavelet in turn is offered center
/// shifts of a quarter, half, and full period along its oscillation axis,
/// with the weight re-fit in closed form against the other wavelets'
/// residual. A move is kept only on a strict energy decrease and only
/// inside the position bounds, so the outer energy stays monotone.
/// Returns whether anything moved.
fn try_phase_jumps(
    img: &Image,
    wavelets: &mut [GaborWavelet],
    weights: &mut [f64],
    space: &ParamSpace,
) -> bool {
    let (width, height) = (img.width(), img.height());
    let mut moved = false;
    for i in 0..wavelets.len() {
        // Residual without wavelet i.
        let mut rest: Vec<f64> = img.data().to_vec();
        for (j, (w, omega)) in wavelets.iter().zip(weights.iter()).enumerate() {
            if j == i {
                continue;
            }
            let field = w.render(width, height);
            for (r, v) in rest.iter_mut().zip(field.data()) {
                *r -= omega * v;
            }
        }
        // Optimal single-wavelet weight and the energy it achieves.
        let refit = |w: &GaborWavelet| -> (f64, f64) {
            let field = w.render(width, height);
            let mut dot = 0.0;
            let mut norm2 = 0.0;
            for (r, v) in rest.iter().zip(field.data()) {
                dot += r * v;
                norm2 += v * v;
            }
            if norm2 < 1e-300 {
                return (0.0, rest.iter().map(|r| r * r).sum());
            }
            let omega = dot / norm2;
            let energy = rest.iter().map(|r| r * r).sum::<f64>() - dot * dot / norm2;
            (omega, energy)
        };
        let current_energy: f64 = {
            let field = wavelets[i].render(width, height);
            rest.iter()
                .zip(field.data())
                .map(|(r, v)| {
                    let d = r - weights[i] * v;
                    d * d
                })
                .sum()
        };
        let period = 2.0 * std::f64::consts::PI / wavelets[i].sx;
        let (sin_t, cos_t) = wavelets[i].theta.sin_cos();
        let mut best = current_energy;
        let mut best_move = None;
        for step in [-1.0, -0.5, -0.25, 0.25, 0.5, 1.0] {
            let mut cand = wavelets[i];
            cand.cx += step * period * cos_t;
            cand.cy -= step * period * sin_t;
            let in_bounds = cand.cx >= space.lower[5 * i]
                && cand.cx <= space.upper[5 * i]
                && cand.cy >= space.lower[5 * i + 1]
                && cand.cy <= space.upper[5 * i + 1];
            if !in_bounds {
                continue;
            }
            let (omega, energy) = refit(&cand);
            if energy < best {
                best = energy;
                best_move = Some((cand, omega));
            }
        }
        if let Some((cand, omega)) = best_move {
            wavelets[i] = cand;
            weights[i] = omega;
            moved = true;
        }
    }
    moved
}

fn wavelet_at(p: &DVector<f64>, i: usize) -> GaborWavelet {
    GaborWavelet {
        cx: p[5 * i],
        cy: p[5 * i + 1],
        theta: p[5 * i + 2],
        sx: p[5 * i + 3],
        sy: p[5 * i + 4],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn zero_at_center() {
        let w = GaborWavelet::new(0.0, 0.0, 0.0, 1.0, 1.0);
        assert_eq!(w.evaluate(0.0, 0.0), 0.0);
    }

    #[test]
    fn quarter_period_anchor() {
        let w = GaborWavelet::new(0.0, 0.0, 0.0, 1.0, 1.0);
        let v = w.evaluate(PI / 2.0, 0.0);
        let expected = (-PI * PI / 8.0).exp();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.29122, epsilon = 1e-5);
    }

    #[test]
    fn rotation_is_a_coordinate_change() {
        let rotated = GaborWavelet::new(0.0, 0.0, PI / 2.0, 1.0, 1.0);
        let axis = GaborWavelet::new(0.0, 0.0, 0.0, 1.0, 1.0);
        let (s, c) = (PI / 2.0).sin_cos();
        for x in [-2.0, -0.5, 0.3, 1.7] {
            for y in [-1.2, 0.0, 0.8, 2.1] {
                let direct = rotated.evaluate(x, y);
                let via_rotation = axis.evaluate(x * c - y * s, x * s + y * c);
                assert_abs_diff_eq!(direct, via_rotation, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn render_matches_scalar_evaluation() {
        let w = GaborWavelet::new(1.0, -2.0, 0.7, 0.5, 0.8);
        let field = w.render(9, 7);
        for row in 0..7 {
            for col in 0..9 {
                let x = col as f64 - 4.0;
                let y = row as f64 - 3.0;
                assert_eq!(field.get(col, row), w.evaluate(x, y));
            }
        }
    }

    #[test]
    fn render_center_pixel_is_zero() {
        let w = GaborWavelet::new(0.0, 0.0, 0.3, 0.9, 1.1);
        let field = w.render(11, 11);
        assert_eq!(field.get(5, 5), 0.0);
    }

    #[test]
    fn render_is_odd_about_center_for_axis_aligned() {
        let w = GaborWavelet::new(0.0, 0.0, 0.0, 0.8, 0.6);
        let field = w.render(11, 9);
        for d in 1..=5usize {
            for row in 0..9 {
                assert_abs_diff_eq!(
                    field.get(5 + d, row),
                    -field.get(5 - d, row),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn weights_recover_exact_multiple() {
        let w = GaborWavelet::new(0.5, -0.5, 0.4, 0.7, 0.9);
        let field = w.render(16, 16);
        let img = Image::from_vec(16, 16, field.data().iter().map(|v| 2.5 * v).collect());
        let sol = solve_weights(&[w], &img).unwrap();
        assert!(!sol.rank_deficient);
        assert_abs_diff_eq!(sol.weights[0], 2.5, epsilon = 1e-6);
    }

    #[test]
    fn constant_image_is_orthogonal_to_centered_odd_wavelets() {
        // Odd fields on a symmetric grid sum to zero against a constant.
        let ws = [
            GaborWavelet::new(0.0, 0.0, 0.0, 0.6, 0.6),
            GaborWavelet::new(0.0, 0.0, PI / 2.0, 0.8, 0.5),
        ];
        let img = Image::filled(15, 15, 0.7);
        let sol = solve_weights(&ws, &img).unwrap();
        for w in sol.weights {
            assert_abs_diff_eq!(w, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn weights_match_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ws: Vec<GaborWavelet> = (0..4)
            .map(|_| {
                GaborWavelet::new(
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(0.3..1.2),
                    rng.random_range(0.3..1.2),
                )
            })
            .collect();
        let img = Image::from_fn(12, 12, |_, _| rng.random_range(-0.5..0.5));
        let sol = solve_weights(&ws, &img).unwrap();

        // Independent route: dense normal equations.
        let mut a = DMatrix::zeros(144, 4);
        for (j, w) in ws.iter().enumerate() {
            a.set_column(j, &DVector::from_column_slice(w.render(12, 12).data()));
        }
        let b = DVector::from_column_slice(img.data());
        let ata = a.transpose() * &a;
        let atb = a.transpose() * b;
        let oracle = ata.lu().solve(&atb).unwrap();
        for (got, want) in sol.weights.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-8);
        }
    }

    #[test]
    fn duplicated_wavelet_flags_rank_deficiency() {
        let w = GaborWavelet::new(0.0, 0.0, 0.3, 0.7, 0.7);
        let img = w.render(10, 10);
        let sol = solve_weights(&[w, w], &img).unwrap();
        assert!(sol.rank_deficient);
        // Minimum-norm split puts half the weight on each copy.
        assert_abs_diff_eq!(sol.weights[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.weights[1], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn residual_is_orthogonal_to_rendered_wavelets() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ws: Vec<GaborWavelet> = (0..3)
            .map(|_| {
                GaborWavelet::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(0.4..1.0),
                    rng.random_range(0.4..1.0),
                )
            })
            .collect();
        let img = Image::from_fn(10, 10, |_, _| rng.random_range(-0.5..0.5));
        let sol = solve_weights(&ws, &img).unwrap();
        let gwn = Gwn {
            template_width: 10,
            template_height: 10,
            wavelets: ws.clone(),
            weights: sol.weights,
        };
        let recon = gwn.reconstruct();
        let residual: Vec<f64> = img
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| a - b)
            .collect();
        for w in &ws {
            let field = w.render(10, 10);
            let dot: f64 = residual.iter().zip(field.data()).map(|(a, b)| a * b).sum();
            let norms = residual.iter().map(|v| v * v).sum::<f64>().sqrt()
                * field.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dot.abs() <= 1e-6 * norms.max(1e-12));
        }
    }

    #[test]
    fn empty_network_energy_is_image_energy() {
        let img = Image::from_fn(8, 8, |c, r| (c + r) as f64 * 0.01);
        let (gwn, report) = build_gwn(&img, 0, 1, &GwnBuildConfig::default()).unwrap();
        assert!(gwn.is_empty());
        assert_abs_diff_eq!(report.final_energy, img.energy(), epsilon = 1e-12);
    }

    #[test]
    fn energy_trace_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = Image::from_fn(16, 16, |_, _| rng.random_range(-0.5..0.5));
        let config = GwnBuildConfig {
            max_outer_iterations: 20,
            ..GwnBuildConfig::default()
        };
        let (_, report) = build_gwn(&img, 4, 7, &config).unwrap();
        for w in report.energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "energy increased: {w:?}");
        }
    }

    #[test]
    fn recovers_exact_three_wavelet_image() {
        // Truth wavelets sit near the 2x2 seed grid so the refinement
        // has to move them but starts inside the basin.
        let truth = [
            GaborWavelet::new(-6.0, -5.5, 0.2, 0.8, 0.6),
            GaborWavelet::new(7.0, -6.5, -0.4, 0.7, 0.9),
            GaborWavelet::new(-5.5, 7.0, 0.1, 0.9, 0.7),
        ];
        let weights = [1.0, -0.8, 0.6];
        let img = Image::from_fn(32, 32, |col, row| {
            let x = col as f64 - 15.5;
            let y = row as f64 - 15.5;
            truth
                .iter()
                .zip(&weights)
                .map(|(w, omega)| omega * w.evaluate(x, y))
                .sum()
        });
        let (_, report) = build_gwn(&img, 3, 5, &GwnBuildConfig::default()).unwrap();
        let rel = report.final_energy / img.energy();
        assert!(rel <= 1e-4, "relative energy {rel:.3e}");
    }

    #[test]
    fn extra_capacity_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let img = Image::from_fn(16, 16, |_, _| rng.random_range(-0.5..0.5));
        let config = GwnBuildConfig {
            max_outer_iterations: 30,
            ..GwnBuildConfig::default()
        };
        let (small, small_report) = build_gwn(&img, 3, 9, &config).unwrap();
        let mut init = small.wavelets.clone();
        init.extend(seed_wavelets(2, 16, 16, 10));
        let (_, big_report) = build_gwn_with_init(&img, init, &config).unwrap();
        assert!(big_report.final_energy <= small_report.final_energy + 1e-6);
    }

    #[test]
    fn reconstruction_energy_matches_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let img = Image::from_fn(12, 12, |_, _| rng.random_range(-0.5..0.5));
        let config = GwnBuildConfig {
            max_outer_iterations: 10,
            ..GwnBuildConfig::default()
        };
        let (gwn, report) = build_gwn(&img, 4, 3, &config).unwrap();
        assert_abs_diff_eq!(gwn.energy(&img), report.final_energy, epsilon = 1e-9);
    }

    #[test]
    fn zero_weights_reconstruct_to_zero() {
        let gwn = Gwn {
            template_width: 6,
            template_height: 6,
            wavelets: vec![GaborWavelet::new(0.0, 0.0, 0.1, 0.5, 0.5)],
            weights: vec![0.0],
        };
        assert!(gwn.reconstruct().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_unit_weight_reconstructs_the_wavelet() {
        let w = GaborWavelet::new(0.4, -0.2, 0.9, 0.6, 0.8);
        let gwn = Gwn {
            template_width: 7,
            template_height: 7,
            wavelets: vec![w],
            weights: vec![1.0],
        };
        assert_eq!(gwn.reconstruct(), w.render(7, 7));
    }

    #[test]
    fn json_roundtrip_is_bit_faithful() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let gwn = Gwn {
            template_width: 32,
            template_height: 32,
            wavelets: (0..4)
                .map(|_| {
                    GaborWavelet::new(
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(0.01..10.0),
                        rng.random_range(0.01..10.0),
                    )
                })
                .collect(),
            weights: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let json = serde_json::to_string(&gwn).unwrap();
        let back: Gwn = serde_json::from_str(&json).unwrap();
        assert_eq!(back, gwn);
        for (a, b) in gwn.weights.iter().zip(&back.weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    proptest! {
        /// Odd along the oscillation axis, even across it.
        #[test]
        fn prop_parity_axes(
            cx in -5.0..5.0f64,
            cy in -5.0..5.0f64,
            theta in -3.1..3.1f64,
            sx in 0.05..3.0f64,
            sy in 0.05..3.0f64,
            u in -4.0..4.0f64,
            v in -4.0..4.0f64,
        ) {
            let w = GaborWavelet::new(cx, cy, theta, sx, sy);
            let (s, c) = theta.sin_cos();
            // Oscillation axis direction and its perpendicular in image
            // coordinates (the rotated frame of the carrier).
            let at = |a: f64, b: f64| {
                w.evaluate(cx + a * c + b * s, cy - a * s + b * c)
            };
            let f = at(u, v);
            prop_assert!((at(-u, v) + f).abs() < 1e-10);
            prop_assert!((at(u, -v) - f).abs() < 1e-10);
        }
    }
}
