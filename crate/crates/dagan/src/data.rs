//! Procedural shapes-world dataset.
//!
//! Layouts are class-id grids built from overlapping rectangles and ellipses
//! with integer-only geometry. Rendering maps each class to a corner of the
//! signed RGB cube and multiplies by a vertical shading ramp, so the
//! layout-to-image mapping is position-dependent yet exactly invertible:
//! `oracle_segment` recovers every generated layout bit-for-bit.
//!
//! Scene `index` draws from ChaCha stream `1 + index` of the dataset seed.
//! Stream 0 belongs to parameter initialization and the highest stream to the
//! training shuffle, so scenes never share a stream with either.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dataset-wide generation parameters. Class 0 is the background.
#[derive(Clone, Copy, Debug)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub image_hw: (usize, usize),
    pub seed: u64,
}

/// Shapes drawn per scene, inclusive bounds.
pub const SHAPES_PER_SCENE: (u32, u32) = (2, 5);

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        if !(2..=PALETTE_SIZE).contains(&self.num_classes) {
            return Err(Error::Invalid(format!(
                "num_classes must be in [2, {PALETTE_SIZE}], got {}",
                self.num_classes
            )));
        }
        if h < 8 || w < 8 {
            return Err(Error::Invalid(format!("image must be at least 8x8, got {h}x{w}")));
        }
        Ok(())
    }
}

/// Class-id grid in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u8>,
}

impl Layout {
    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.w + x]
    }
}

/// 3xHxW image in [-1, 1].
pub type RenderedImage<T> = Tensor<T>;

/// Corners of the signed RGB cube; bit j of the class id gives the sign of
/// channel j. Every corner has the same norm, so an all-zero pixel ties
/// across classes and the lowest-id rule resolves it to the background.
pub const PALETTE_SIZE: usize = 8;

pub fn base_color(class: usize) -> [f64; 3] {
    [
        if class & 1 != 0 { 1.0 } else { -1.0 },
        if class & 2 != 0 { 1.0 } else { -1.0 },
        if class & 4 != 0 { 1.0 } else { -1.0 },
    ]
}

/// Vertical shading ramp, brightening from 0.7 at the top toward 1.0.
pub fn shade(y: usize, h: usize) -> f64 {
    0.7 + 0.3 * y as f64 / h as f64
}

fn range_sample(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    lo + rng.next_u32() as usize % (hi - lo + 1)
}

/// Background plus 2..=5 rectangles and ellipses of classes 1..K, later
/// shapes occluding earlier ones. Half-extents stay at or below 3/16 of the
/// image side, so five shapes can never bury the background entirely.
pub fn generate_layout(cfg: &SceneConfig, index: usize) -> Layout {
    let (h, w) = cfg.image_hw;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + index as u64);

    let mut ids = vec![0u8; h * w];
    let count = range_sample(&mut rng, SHAPES_PER_SCENE.0 as usize, SHAPES_PER_SCENE.1 as usize);
    for _ in 0..count {
        let ellipse = rng.next_u32() % 2 == 1;
        let class = 1 + (rng.next_u32() as usize % (cfg.num_classes - 1)) as u8;
        let rx = range_sample(&mut rng, (w / 8).max(1), (3 * w / 16).max(w / 8).max(1));
        let ry = range_sample(&mut rng, (h / 8).max(1), (3 * h / 16).max(h / 8).max(1));
        let cx = rng.next_u32() as usize % w;
        let cy = rng.next_u32() as usize % h;

        let y0 = cy.saturating_sub(ry);
        let y1 = (cy + ry).min(h - 1);
        let x0 = cx.saturating_sub(rx);
        let x1 = (cx + rx).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let inside = if ellipse {
                    let dx = x.abs_diff(cx) as u64;
                    let dy = y.abs_diff(cy) as u64;
                    let (rx, ry) = (rx as u64, ry as u64);
                    dx * dx * ry * ry + dy * dy * rx * rx <= rx * rx * ry * ry
                } else {
                    true
                };
                if inside {
                    ids[y * w + x] = class;
                }
            }
        }
    }
    Layout { h, w, ids }
}

/// Pure function of the layout: `base_color(class) * shade(row)` per pixel.
pub fn render<T: Scalar>(layout: &Layout) -> RenderedImage<T> {
    let (h, w) = (layout.h, layout.w);
    let mut data = vec![T::ZERO; 3 * h * w];
    for y in 0..h {
        let s = shade(y, h);
        for x in 0..w {
            let color = base_color(layout.ids[y * w + x] as usize);
            for (j, b) in color.iter().enumerate() {
                data[(j * h + y) * w + x] = T::from_f64(b * s);
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data).unwrap()
}

/// KxHxW indicator planes.
pub fn one_hot<T: Scalar>(layout: &Layout, num_classes: usize) -> Result<Tensor<T>> {
    let (h, w) = (layout.h, layout.w);
    let mut data = vec![T::ZERO; num_classes * h * w];
    for (pix, &id) in layout.ids.iter().enumerate() {
        if id as usize >= num_classes {
            return Err(Error::Invalid(format!(
                "layout id {id} out of range for {num_classes} classes"
            )));
        }
        data[id as usize * h * w + pix] = T::ONE;
    }
    Tensor::from_vec(vec![num_classes, h, w], data)
}

/// Nearest shaded class color per pixel in squared L2; ties go to the lowest
/// class id. Inverts `render` exactly for in-range class counts.
pub fn oracle_segment<T: Scalar>(image: &Tensor<T>, num_classes: usize) -> Result<Layout> {
    let s = image.shape();
    if image.rank() != 3 || s[0] != 3 {
        return Err(Error::Shape {
            op: "oracle_segment",
            detail: format!("expected [3, h, w], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    let data = image.data();
    let mut ids = vec![0u8; h * w];
    for y in 0..h {
        let sh = shade(y, h);
        for x in 0..w {
            let pixel = [
                data[y * w + x].to_f64(),
                data[(h + y) * w + x].to_f64(),
                data[(2 * h + y) * w + x].to_f64(),
            ];
            let mut best = (f64::INFINITY, 0u8);
            for c in 0..num_classes {
                let color = base_color(c);
                let mut d2 = 0.0;
                for j in 0..3 {
                    let diff = pixel[j] - color[j] * sh;
                    d2 += diff * diff;
                }
                if d2 < best.0 {
                    best = (d2, c as u8);
                }
            }
            ids[y * w + x] = best.1;
        }
    }
    Ok(Layout { h, w, ids })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig { num_classes: 5, image_hw: (64, 64), seed: 11 }
    }

    #[test]
    fn layouts_are_reproducible_and_index_sensitive() {
        let a = generate_layout(&cfg(), 3);
        let b = generate_layout(&cfg(), 3);
        assert_eq!(a, b);
        let c = generate_layout(&cfg(), 4);
        assert_ne!(a, c);
    }

    #[test]
    fn layout_ids_stay_in_range_and_background_survives() {
        for i in 0..100 {
            let l = generate_layout(&cfg(), i);
            assert!(l.ids.iter().all(|&id| (id as usize) < 5));
            assert!(l.ids.contains(&0), "scene {i} buried the background");
        }
    }

    #[test]
    fn every_class_appears_often_enough() {
        let mut counts = [0u64; 5];
        let mut total = 0u64;
        for i in 0..1000 {
            let l = generate_layout(&cfg(), i);
            for &id in &l.ids {
                counts[id as usize] += 1;
            }
            total += l.ids.len() as u64;
        }
        for (c, &n) in counts.iter().enumerate() {
            let freq = n as f64 / total as f64;
            assert!(freq > 0.01, "class {c} frequency {freq}");
        }
    }

    #[test]
    fn top_row_renders_at_seventy_percent_of_base() {
        let l = generate_layout(&cfg(), 0);
        let img = render::<f64>(&l);
        let (h, w) = (l.h, l.w);
        for x in 0..w {
            let c = base_color(l.class_at(0, x) as usize);
            for (j, &cj) in c.iter().enumerate() {
                assert_eq!(img.data()[(j * h) * w + x], 0.7 * cj);
            }
        }
    }

    #[test]
    fn same_class_same_row_means_same_color() {
        let l = generate_layout(&cfg(), 1);
        let img = render::<f64>(&l);
        let (h, w) = (l.h, l.w);
        for y in 0..h {
            for x1 in 0..w {
                for x2 in x1 + 1..w {
                    if l.class_at(y, x1) == l.class_at(y, x2) {
                        for j in 0..3 {
                            assert_eq!(
                                img.data()[(j * h + y) * w + x1],
                                img.data()[(j * h + y) * w + x2]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shaded_palette_stays_separated_on_every_row() {
        let h = 64;
        for y in 0..h {
            let s = shade(y, h);
            for a in 0..PALETTE_SIZE {
                for b in a + 1..PALETTE_SIZE {
                    let (ca, cb) = (base_color(a), base_color(b));
                    let d2: f64 = (0..3).map(|j| ((ca[j] - cb[j]) * s).powi(2)).sum();
                    assert!(d2.sqrt() > 0.1, "classes {a},{b} at row {y}");
                }
            }
        }
    }

    #[test]
    fn one_hot_is_an_exact_indicator() {
        let l = generate_layout(&cfg(), 2);
        let oh = one_hot::<f64>(&l, 5).unwrap();
        assert_eq!(oh.shape(), &[5, 64, 64]);
        let hw = 64 * 64;
        for pix in 0..hw {
            let sum: f64 = (0..5).map(|c| oh.data()[c * hw + pix]).sum();
            assert_eq!(sum, 1.0);
            let argmax = (0..5).max_by(|&a, &b| {
                oh.data()[a * hw + pix].partial_cmp(&oh.data()[b * hw + pix]).unwrap()
            });
            assert_eq!(argmax.unwrap() as u8, l.ids[pix]);
        }
    }

    #[test]
    fn one_hot_rejects_out_of_range_ids() {
        let l = Layout { h: 2, w: 2, ids: vec![0, 1, 2, 3] };
        assert!(one_hot::<f64>(&l, 3).is_err());
    }

    #[test]
    fn oracle_inverts_render_exactly() {
        for i in 0..20 {
            let l = generate_layout(&cfg(), i);
            let img = render::<f64>(&l);
            let back = oracle_segment(&img, 5).unwrap();
            assert_eq!(back, l, "scene {i}");
        }
    }

    #[test]
    fn all_black_resolves_to_background_by_tie_rule() {
        let img = Tensor::<f64>::zeros(vec![3, 8, 8]);
        let l = oracle_segment(&img, 5).unwrap();
        assert!(l.ids.iter().all(|&id| id == 0));
    }

    #[test]
    fn oracle_survives_low_amplitude_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut agree = 0u64;
        let mut total = 0u64;
        for i in 0..100 {
            let l = generate_layout(&cfg(), i);
            let img = render::<f64>(&l);
            let noisy: Vec<f64> = img
                .data()
                .iter()
                .map(|v| v + (rng.next_u32() as f64 / u32::MAX as f64 * 2.0 - 1.0) * 0.03)
                .collect();
            let noisy = Tensor::from_vec(img.shape().to_vec(), noisy).unwrap();
            let back = oracle_segment(&noisy, 5).unwrap();
            agree += back.ids.iter().zip(&l.ids).filter(|(a, b)| a == b).count() as u64;
            total += l.ids.len() as u64;
        }
        assert!(agree as f64 / total as f64 >= 0.999);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        assert!(SceneConfig { num_classes: 1, image_hw: (64, 64), seed: 0 }.validate().is_err());
        assert!(SceneConfig { num_classes: 9, image_hw: (64, 64), seed: 0 }.validate().is_err());
        assert!(SceneConfig { num_classes: 5, image_hw: (4, 64), seed: 0 }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn render_values_stay_in_range() {
        for i in 0..10 {
            let l = generate_layout(&cfg(), i);
            let img = render::<f32>(&l);
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
