//! Image reconstruction losses and the binding regularizer, each returning
//! its analytic gradient alongside the value.
//!
//! The structural term is DSSIM = 1 - SSIM with the usual 11x11 Gaussian
//! window (sigma 1.5), stabilizers C1 = 1e-4 and C2 = 9e-4 for unit dynamic
//! range, valid-region convolution, channels averaged. With per-window
//! moments mu_a, mu_b, E[a^2], E[b^2], E[ab] and
//!
//!   A1 = 2 mu_a mu_b + C1     B1 = mu_a^2 + mu_b^2 + C1
//!   A2 = 2 cov_ab + C2        B2 = var_a + var_b + C2
//!
//! each window's score is S = (A1 A2)/(B1 B2), and the gradient with respect
//! to the first image flows through the three moment maps that depend on it:
//!
//!   dS/d(mu_a)   = 2 mu_b S (1/A1 - 1/A2) + 2 mu_a S (1/B2 - 1/B1)
//!   dS/d(E[a^2]) = -S / B2
//!   dS/d(E[ab])  = 2 A1 / (B1 B2)
//!
//! Moment maps are valid convolutions of a, a^2, and ab, so the pixel
//! gradient is their transpose (full) convolution with the same window,
//! with the E[a^2] path picking up a pixelwise 2a and the E[ab] path a
//! pixelwise b.

use serde::{Deserialize, Serialize};

use crate::buffers::{GradBuffer, ImageBuffer};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian3D;

/// Weights of the combined training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Reconstruction (L1 + DSSIM) weight.
    pub recon: f64,
    /// Discriminator objective weight; routed only to discriminator params.
    pub adversarial_d: f64,
    /// Generator objective weight; routed only to Gaussian params.
    pub adversarial_g: f64,
    /// Binding regularizer weight.
    pub binding: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 10.0,
            adversarial_d: 0.01,
            adversarial_g: 0.01,
            binding: 10.0,
        }
    }
}

/// Weighted sum of the four loss terms. The value is bookkeeping; gradient
/// routing happens where each term is differentiated (the discriminator term
/// touches only discriminator parameters, the rest only Gaussians).
pub fn total_loss(recon: f64, d_loss: f64, g_loss: f64, const_loss: f64, w: &LossWeights) -> f64 {
    w.recon * recon + w.adversarial_d * d_loss + w.adversarial_g * g_loss + w.binding * const_loss
}

/// Mean absolute difference over all H*W*3 entries, with its subgradient
/// with respect to `a` (0 at exact ties).
pub fn l1_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    a.require_same_shape(b, "l1 images")?;
    let n = a.as_slice().len() as f64;
    let mut grad = ImageBuffer::zeros(a.width(), a.height());
    let mut sum = 0.0;
    for i in 0..a.as_slice().len() {
        let d = a.as_slice()[i] - b.as_slice()[i];
        sum += d.abs();
        // f64::signum maps 0.0 to 1.0; ties need an exact 0 subgradient.
        grad.as_mut_slice()[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// One image channel as a plane, for window arithmetic.
struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    fn from_channel(img: &ImageBuffer, channel: usize) -> Plane {
        let (width, height) = (img.width(), img.height());
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(img.channel(x, y, channel));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    fn zeros(width: usize, height: usize) -> Plane {
        Plane {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Valid convolution with the separable SSIM window.
fn window_filter(src: &Plane, window: &[f64; SSIM_WINDOW]) -> Plane {
    let out_w = src.width - SSIM_WINDOW + 1;
    let out_h = src.height - SSIM_WINDOW + 1;
    // Horizontal pass, then vertical.
    let mut rows = Plane::zeros(out_w, src.height);
    for y in 0..src.height {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, wk) in window.iter().enumerate() {
                acc += wk * src.at(x + k, y);
            }
            rows.data[y * out_w + x] = acc;
        }
    }
    let mut out = Plane::zeros(out_w, out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, wk) in window.iter().enumerate() {
                acc += wk * rows.at(x, y + k);
            }
            out.data[y * out_w + x] = acc;
        }
    }
    out
}

/// Transpose of `window_filter`: scatters map-space values back to pixels.
fn window_scatter(map: &Plane, window: &[f64; SSIM_WINDOW], width: usize, height: usize) -> Plane {
    let mut out = Plane::zeros(width, height);
    for my in 0..map.height {
        for mx in 0..map.width {
            let v = map.at(mx, my);
            if v == 0.0 {
                continue;
            }
            for dy in 0..SSIM_WINDOW {
                let row = (my + dy) * width;
                let wy = window[dy] * v;
                for dx in 0..SSIM_WINDOW {
                    out.data[row + mx + dx] += wy * window[dx];
                }
            }
        }
    }
    out
}

/// Structural dissimilarity 1 - SSIM(a, b), with its gradient w.r.t. `a`.
pub fn dssim_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    a.require_same_shape(b, "dssim images")?;
    let (width, height) = (a.width(), a.height());
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            context: "dssim",
            window: SSIM_WINDOW,
            got_w: width,
            got_h: height,
        });
    }
    let window = ssim_window();
    let (map_w, map_h) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let map_count = (3 * map_w * map_h) as f64;

    let mut ssim_sum = 0.0;
    let mut grad = ImageBuffer::zeros(width, height);
    for channel in 0..3 {
        let pa = Plane::from_channel(a, channel);
        let pb = Plane::from_channel(b, channel);
        let sq = |p: &Plane| Plane {
            width: p.width,
            height: p.height,
            data: p.data.iter().map(|v| v * v).collect(),
        };
        let prod = Plane {
            width,
            height,
            data: pa.data.iter().zip(&pb.data).map(|(x, y)| x * y).collect(),
        };
        let mu_a = window_filter(&pa, &window);
        let mu_b = window_filter(&pb, &window);
        let m_aa = window_filter(&sq(&pa), &window);
        let m_bb = window_filter(&sq(&pb), &window);
        let m_ab = window_filter(&prod, &window);

        // Map-space score and its partials w.r.t. the a-dependent moments.
        let mut f_mu = Plane::zeros(map_w, map_h);
        let mut f_aa = Plane::zeros(map_w, map_h);
        let mut f_ab = Plane::zeros(map_w, map_h);
        for i in 0..map_w * map_h {
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let var_a = m_aa.data[i] - ma * ma;
            let var_b = m_bb.data[i] - mb * mb;
            let cov = m_ab.data[i] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = var_a + var_b + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            ssim_sum += s;
            // Loss is 1 - mean(S); each map cell carries -1/map_count.
            let dl_ds = -1.0 / map_count;
            f_mu.data[i] =
                dl_ds * (2.0 * mb * s * (1.0 / a1 - 1.0 / a2) + 2.0 * ma * s * (1.0 / b2 - 1.0 / b1));
            f_aa.data[i] = dl_ds * (-s / b2);
            f_ab.data[i] = dl_ds * (2.0 * a1 / (b1 * b2));
        }

        let g_mu = window_scatter(&f_mu, &window, width, height);
        let g_aa = window_scatter(&f_aa, &window, width, height);
        let g_ab = window_scatter(&f_ab, &window, width, height);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let g = g_mu.data[i] + 2.0 * pa.data[i] * g_aa.data[i] + pb.data[i] * g_ab.data[i];
                let mut px = grad.get(x, y);
                px[channel] = g;
                grad.set(x, y, px);
            }
        }
    }
    Ok((1.0 - ssim_sum / map_count, grad))
}

/// Position threshold of the binding regularizer, triangle-frame units.
pub const BINDING_POS_LIMIT: f64 = 1.0;
/// Activated-scale threshold of the binding regularizer.
pub const BINDING_SCALE_LIMIT: f64 = 0.6;

/// Binding regularizer: squared hinge on local position magnitude past
/// `BINDING_POS_LIMIT` plus squared hinge on activated scale past
/// `BINDING_SCALE_LIMIT`, each averaged over Gaussians. Keeps Gaussians near
/// their parent triangle and commensurate with it.
pub fn const_loss(gaussians: &[Gaussian3D]) -> (f64, GradBuffer) {
    let mut grads = GradBuffer::zeros(gaussians.len());
    if gaussians.is_empty() {
        return (0.0, grads);
    }
    let inv_n = 1.0 / gaussians.len() as f64;
    let mut loss = 0.0;
    for (i, g) in gaussians.iter().enumerate() {
        for lane in 0..3 {
            let p = g.position[lane];
            let over = p.abs() - BINDING_POS_LIMIT;
            if over > 0.0 {
                loss += over * over * inv_n;
                grads.position[i][lane] = 2.0 * over * p.signum() * inv_n;
            }
            let s = g.log_scale[lane].exp();
            let over = s - BINDING_SCALE_LIMIT;
            if over > 0.0 {
                loss += over * over * inv_n;
                // d/d(log_scale) of (e^ls - limit)^2 = 2 (e^ls - limit) e^ls.
                grads.log_scale[i][lane] = 2.0 * over * s * inv_n;
            }
        }
    }
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::quat_identity;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::Rng;

    fn random_image(seed: u64, width: usize, height: usize) -> ImageBuffer {
        let mut rng = crate::rng::stream_rng(seed, 3);
        ImageBuffer::from_fn(width, height, |_, _| {
            Vector3::new(rng.gen(), rng.gen(), rng.gen())
        })
    }

    #[test]
    fn l1_of_identical_images_is_zero() {
        let a = random_image(1, 8, 8);
        let (loss, grad) = l1_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l1_unit_difference_everywhere_is_one() {
        let a = ImageBuffer::uniform(8, 8, Vector3::zeros());
        let b = ImageBuffer::uniform(8, 8, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(l1_loss(&a, &b).unwrap().0, 1.0);
    }

    #[test]
    fn l1_uniform_quarter_vs_three_quarters() {
        let a = ImageBuffer::uniform(4, 4, Vector3::new(0.25, 0.25, 0.25));
        let b = ImageBuffer::uniform(4, 4, Vector3::new(0.75, 0.75, 0.75));
        let (loss, grad) = l1_loss(&a, &b).unwrap();
        assert_relative_eq!(loss, 0.5, epsilon = 1e-15);
        let expect = -1.0 / (3.0 * 16.0);
        assert!(grad.as_slice().iter().all(|&g| (g - expect).abs() < 1e-15));
    }

    #[test]
    fn l1_value_is_symmetric_and_shape_checked() {
        let a = random_image(2, 9, 7);
        let b = random_image(3, 9, 7);
        assert_relative_eq!(
            l1_loss(&a, &b).unwrap().0,
            l1_loss(&b, &a).unwrap().0,
            epsilon = 1e-12
        );
        let c = random_image(4, 8, 7);
        assert!(l1_loss(&a, &c).is_err());
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let a = random_image(5, 6, 5);
        let b = random_image(6, 6, 5);
        let (_, grad) = l1_loss(&a, &b).unwrap();
        let h = 1e-6;
        for i in (0..a.as_slice().len()).step_by(7) {
            let mut ap = a.clone();
            ap.as_mut_slice()[i] += h;
            let plus = l1_loss(&ap, &b).unwrap().0;
            ap.as_mut_slice()[i] -= 2.0 * h;
            let minus = l1_loss(&ap, &b).unwrap().0;
            let fd = (plus - minus) / (2.0 * h);
            assert_relative_eq!(grad.as_slice()[i], fd, epsilon = 1e-9);
        }
    }

    #[test]
    fn dssim_of_identical_images_is_zero() {
        let a = random_image(7, 16, 16);
        let (loss, _) = dssim_loss(&a, &a).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn dssim_on_offset_constant_images_matches_closed_form() {
        // Variance terms vanish on constants, leaving the luminance factor
        // (2*0.25*0.75 + C1)/(0.25^2 + 0.75^2 + C1).
        let a = ImageBuffer::uniform(16, 16, Vector3::new(0.75, 0.75, 0.75));
        let b = ImageBuffer::uniform(16, 16, Vector3::new(0.25, 0.25, 0.25));
        let (loss, _) = dssim_loss(&a, &b).unwrap();
        let ssim = (2.0 * 0.25 * 0.75 + 1e-4) / (0.25f64.powi(2) + 0.75f64.powi(2) + 1e-4);
        assert_relative_eq!(ssim, 0.60006, epsilon = 1e-5);
        assert_relative_eq!(loss, 1.0 - ssim, epsilon = 1e-12);
        assert_relative_eq!(loss, 0.39994, epsilon = 1e-5);
    }

    #[test]
    fn dssim_rejects_images_smaller_than_the_window() {
        let a = random_image(8, 10, 16);
        assert!(matches!(
            dssim_loss(&a, &a),
            Err(Error::ImageTooSmall { got_w: 10, .. })
        ));
    }

    #[test]
    fn dssim_value_is_symmetric_and_bounded() {
        for seed in 0..4 {
            let a = random_image(10 + seed, 16, 16);
            let b = random_image(20 + seed, 16, 16);
            let (ab, _) = dssim_loss(&a, &b).unwrap();
            let (ba, _) = dssim_loss(&b, &a).unwrap();
            assert_relative_eq!(ab, ba, epsilon = 1e-12);
            assert!((0.0..=2.0).contains(&ab));
        }
    }

    #[test]
    fn dssim_gradient_matches_finite_differences() {
        let a = random_image(30, 16, 16);
        let b = random_image(31, 16, 16);
        let (_, grad) = dssim_loss(&a, &b).unwrap();
        // Corner pixels sit under a single tail-weight window cell, so their
        // gradients are ~1e-9 while the loss is ~0.35; a step this large keeps
        // the central difference above f64 cancellation noise there.
        let h = 1e-3;
        let mut max_rel = 0.0f64;
        let mut worst = (0usize, 0.0f64, 0.0f64);
        for i in 0..a.as_slice().len() {
            let mut ap = a.clone();
            ap.as_mut_slice()[i] += h;
            let plus = dssim_loss(&ap, &b).unwrap().0;
            ap.as_mut_slice()[i] -= 2.0 * h;
            let minus = dssim_loss(&ap, &b).unwrap().0;
            let fd = (plus - minus) / (2.0 * h);
            let an = grad.as_slice()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = (i, an, fd);
            }
        }
        assert!(
            max_rel < 1e-4,
            "dssim gradient rel error {max_rel} at entry {} (analytic {}, numeric {})",
            worst.0,
            worst.1,
            worst.2
        );
    }

    fn binding_gaussian(position: Vector3<f64>, log_scale: Vector3<f64>) -> Gaussian3D {
        Gaussian3D {
            position,
            rotation: quat_identity(),
            log_scale,
            opacity_logit: 0.0,
            color: Vector3::new(0.5, 0.5, 0.5),
            parent_triangle: 0,
        }
    }

    #[test]
    fn const_loss_is_zero_inside_the_thresholds() {
        let gs: Vec<_> = (0..4)
            .map(|_| binding_gaussian(Vector3::zeros(), Vector3::from_element(0.1f64.ln())))
            .collect();
        let (loss, grads) = const_loss(&gs);
        assert_eq!(loss, 0.0);
        assert!((0..4).all(|i| grads.row_is_zero(i)));
    }

    #[test]
    fn const_loss_position_hinge_squares_the_excess() {
        let gs = vec![binding_gaussian(
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::from_element(0.1f64.ln()),
        )];
        let (loss, _) = const_loss(&gs);
        assert_relative_eq!(loss, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn const_loss_scale_hinge_squares_the_excess() {
        let gs = vec![binding_gaussian(
            Vector3::zeros(),
            Vector3::new(1.6f64.ln(), 0.1f64.ln(), 0.1f64.ln()),
        )];
        let (loss, _) = const_loss(&gs);
        assert_relative_eq!(loss, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn const_loss_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream_rng(40, 5);
        let gs: Vec<_> = (0..6)
            .map(|_| {
                binding_gaussian(
                    Vector3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ),
                    Vector3::new(
                        rng.gen_range(-2.0..0.5),
                        rng.gen_range(-2.0..0.5),
                        rng.gen_range(-2.0..0.5),
                    ),
                )
            })
            .collect();
        let (_, grads) = const_loss(&gs);
        let h = 1e-6;
        let mut work = gs.clone();
        for i in 0..gs.len() {
            for lane in 0..3 {
                for (field, analytic) in [(0usize, grads.position[i][lane]), (1, grads.log_scale[i][lane])] {
                    let bump = |g: &mut Gaussian3D, v: f64| {
                        if field == 0 {
                            g.position[lane] += v;
                        } else {
                            g.log_scale[lane] += v;
                        }
                    };
                    bump(&mut work[i], h);
                    let plus = const_loss(&work).0;
                    bump(&mut work[i], -2.0 * h);
                    let minus = const_loss(&work).0;
                    work[i] = gs[i].clone();
                    let fd = (plus - minus) / (2.0 * h);
                    assert!(
                        (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8) < 1e-4,
                        "gaussian {i} lane {lane} field {field}: analytic {analytic} fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn total_loss_applies_default_weights() {
        let w = LossWeights::default();
        assert_relative_eq!(total_loss(1.0, 0.0, 0.0, 0.0, &w), 10.0, epsilon = 1e-15);
        assert_relative_eq!(total_loss(0.0, 1.0, 1.0, 0.0, &w), 0.02, epsilon = 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
    }
}
