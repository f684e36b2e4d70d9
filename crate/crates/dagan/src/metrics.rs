//! Segmentation metrics over pooled confusion counts and the Fréchet distance
//! between feature Gaussians.

use crate::data::Layout;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Pooled K x K pixel counts; rows index ground truth, columns prediction.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.at(c, c)).sum()
    }

    pub fn record(&mut self, pred: &Layout, gt: &Layout) -> Result<()> {
        if pred.h != gt.h || pred.w != gt.w {
            return Err(Error::Shape {
                op: "confusion",
                detail: format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.h, pred.w, gt.h, gt.w
                ),
            });
        }
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::Invalid(format!(
                    "class id out of range: pred {p}, gt {g}, K = {}",
                    self.k
                )));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }
}

pub fn confusion(preds: &[Layout], gts: &[Layout], k: usize) -> Result<ConfusionMatrix> {
    if preds.is_empty() {
        return Err(Error::Invalid("no layouts to evaluate".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Shape {
            op: "confusion",
            detail: format!("{} predictions vs {} ground truths", preds.len(), gts.len()),
        });
    }
    let mut cm = ConfusionMatrix::new(k);
    for (p, g) in preds.iter().zip(gts) {
        cm.record(p, g)?;
    }
    Ok(cm)
}

/// Mean IoU over classes with nonzero union, plus per-class IoUs
/// (`None` where the class appears in neither prediction nor ground truth).
pub fn miou(preds: &[Layout], gts: &[Layout], k: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let cm = confusion(preds, gts, k)?;
    let mut per_class = Vec::with_capacity(k);
    let (mut sum, mut measured) = (0.0, 0u64);
    for c in 0..k {
        let tp = cm.at(c, c);
        let row: u64 = (0..k).map(|j| cm.at(c, j)).sum();
        let col: u64 = (0..k).map(|i| cm.at(i, c)).sum();
        let union = row + col - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            measured += 1;
        }
    }
    Ok((sum / measured as f64, per_class))
}

pub fn pixel_acc(preds: &[Layout], gts: &[Layout], k: usize) -> Result<f64> {
    let cm = confusion(preds, gts, k)?;
    Ok(cm.trace() as f64 / cm.total() as f64)
}

/// Sample mean and unbiased covariance of a set of feature vectors.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major d x d, symmetric.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Invalid(format!("need at least 2 samples, got {n}")));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::Shape {
                op: "GaussianStats",
                detail: "feature vectors must share a nonzero length".into(),
            });
        }
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d * d {
            return Err(Error::Shape {
                op: "frechet_distance",
                detail: format!("covariance has {} entries for dim {d}", self.cov.len()),
            });
        }
        if self.count < 2 {
            return Err(Error::Invalid(format!("stats built from {} samples", self.count)));
        }
        for i in 0..d {
            for j in 0..i {
                let gap = (self.cov[i * d + j] - self.cov[j * d + i]).abs();
                if gap > 1e-9 {
                    return Err(Error::Invalid(format!(
                        "covariance asymmetric at ({i}, {j}): gap {gap:e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fréchet distance between two Gaussians,
/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
///
/// The square-root trace comes from the symmetric eigendecomposition of the
/// symmetrized product (S_a S_b + S_b S_a) / 2, which makes the result exactly
/// symmetric in the arguments and exact whenever the covariances commute.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Shape {
            op: "frechet_distance",
            detail: format!("feature dims {d} vs {}", b.dim()),
        });
    }
    let ma = DMatrix::from_row_slice(d, d, &a.cov);
    let mb = DMatrix::from_row_slice(d, d, &b.cov);
    let prod = &ma * &mb;
    let sym = (&prod + prod.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut sqrt_trace = 0.0;
    for &lambda in eig.eigenvalues.iter() {
        if lambda < -1e-8 {
            return Err(Error::NotPsd(lambda));
        }
        sqrt_trace += lambda.max(0.0).sqrt();
    }
    let dmu = DVector::from_row_slice(&a.mean) - DVector::from_row_slice(&b.mean);
    let d = dmu.norm_squared() + ma.trace() + mb.trace() - 2.0 * sqrt_trace;
    // Matching stats can land a hair below zero through the clamped roots.
    Ok(if d < 0.0 && d > -1e-8 { 0.0 } else { d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn random_layout(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Layout {
        let ids = (0..h * w).map(|_| (rng.next_u32() as usize % k) as u8).collect();
        Layout { h, w, ids }
    }

    #[test]
    fn identical_layouts_score_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ls: Vec<Layout> = (0..4).map(|_| random_layout(&mut rng, 8, 8, 5)).collect();
        let (m, per) = miou(&ls, &ls, 5).unwrap();
        assert_eq!(m, 1.0);
        assert!(per.iter().flatten().all(|&v| v == 1.0));
        assert_eq!(pixel_acc(&ls, &ls, 5).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_constant_layouts_score_zero() {
        let zeros = Layout { h: 4, w: 4, ids: vec![0; 16] };
        let ones = Layout { h: 4, w: 4, ids: vec![1; 16] };
        let (m, per) = miou(std::slice::from_ref(&zeros), std::slice::from_ref(&ones), 5).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(per[0], Some(0.0));
        assert_eq!(per[1], Some(0.0));
        assert_eq!(per[2], None);
        assert_eq!(pixel_acc(&[zeros], &[ones], 5).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_complement_has_zero_accuracy() {
        let board: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
        let flipped: Vec<u8> = board.iter().map(|&v| 1 - v).collect();
        let a = Layout { h: 4, w: 4, ids: board };
        let b = Layout { h: 4, w: 4, ids: flipped };
        assert_eq!(pixel_acc(&[a], &[b], 2).unwrap(), 0.0);
    }

    /// Independent recomputation: per-class counts via one pass per class.
    fn brute_force(preds: &[Layout], gts: &[Layout], k: usize) -> (f64, f64) {
        let (mut sum, mut measured) = (0.0, 0u64);
        for c in 0..k as u8 {
            let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
            for (p, g) in preds.iter().zip(gts) {
                for (&pv, &gv) in p.ids.iter().zip(&g.ids) {
                    match (pv == c, gv == c) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fnn += 1,
                        (false, false) => {}
                    }
                }
            }
            if tp + fp + fnn > 0 {
                sum += tp as f64 / (tp + fp + fnn) as f64;
                measured += 1;
            }
        }
        let mut hit = 0u64;
        let mut total = 0u64;
        for (p, g) in preds.iter().zip(gts) {
            for (&pv, &gv) in p.ids.iter().zip(&g.ids) {
                hit += (pv == gv) as u64;
                total += 1;
            }
        }
        (sum / measured as f64, hit as f64 / total as f64)
    }

    #[test]
    fn agrees_with_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = random_layout(&mut rng, 8, 8, 5);
            let g = random_layout(&mut rng, 8, 8, 5);
            let (want_m, want_a) = brute_force(std::slice::from_ref(&p), std::slice::from_ref(&g), 5);
            let (got_m, _) = miou(std::slice::from_ref(&p), std::slice::from_ref(&g), 5).unwrap();
            let got_a = pixel_acc(&[p], &[g], 5).unwrap();
            assert_eq!(got_m, want_m);
            assert_eq!(got_a, want_a);
        }
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let preds: Vec<Layout> = (0..6).map(|_| random_layout(&mut rng, 8, 8, 5)).collect();
        let gts: Vec<Layout> = (0..6).map(|_| random_layout(&mut rng, 8, 8, 5)).collect();
        let (m, _) = miou(&preds, &gts, 5).unwrap();
        let a = pixel_acc(&preds, &gts, 5).unwrap();
        let order = [3, 0, 5, 1, 4, 2];
        let sp: Vec<Layout> = order.iter().map(|&i| preds[i].clone()).collect();
        let sg: Vec<Layout> = order.iter().map(|&i| gts[i].clone()).collect();
        assert_eq!(miou(&sp, &sg, 5).unwrap().0, m);
        assert_eq!(pixel_acc(&sp, &sg, 5).unwrap(), a);
    }

    #[test]
    fn consistent_relabeling_preserves_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<Layout> = (0..4).map(|_| random_layout(&mut rng, 8, 8, 5)).collect();
        let gts: Vec<Layout> = (0..4).map(|_| random_layout(&mut rng, 8, 8, 5)).collect();
        let perm = [4u8, 2, 0, 3, 1];
        let relabel = |ls: &[Layout]| -> Vec<Layout> {
            ls.iter()
                .map(|l| Layout {
                    h: l.h,
                    w: l.w,
                    ids: l.ids.iter().map(|&v| perm[v as usize]).collect(),
                })
                .collect()
        };
        let (m, _) = miou(&preds, &gts, 5).unwrap();
        let a = pixel_acc(&preds, &gts, 5).unwrap();
        assert!((miou(&relabel(&preds), &relabel(&gts), 5).unwrap().0 - m).abs() < 1e-15);
        assert_eq!(pixel_acc(&relabel(&preds), &relabel(&gts), 5).unwrap(), a);
    }

    #[test]
    fn accuracy_is_trace_over_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_layout(&mut rng, 8, 8, 5);
        let g = random_layout(&mut rng, 8, 8, 5);
        let cm = confusion(std::slice::from_ref(&p), std::slice::from_ref(&g), 5).unwrap();
        assert_eq!(pixel_acc(&[p], &[g], 5).unwrap(), cm.trace() as f64 / cm.total() as f64);
        assert_eq!(cm.total(), 64);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let a = Layout { h: 4, w: 4, ids: vec![0; 16] };
        let b = Layout { h: 4, w: 5, ids: vec![0; 20] };
        assert!(miou(&[], &[], 5).is_err());
        assert!(miou(std::slice::from_ref(&a), &[a.clone(), a.clone()], 5).is_err());
        assert!(miou(std::slice::from_ref(&a), &[b], 5).is_err());
        let hot = Layout { h: 4, w: 4, ids: vec![7; 16] };
        assert!(miou(&[hot], &[a], 5).is_err());
    }

    #[test]
    fn stats_match_a_hand_computed_pair() {
        let s = GaussianStats::from_samples(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.cov, vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(s.count, 2);
        assert!(GaussianStats::from_samples(&[vec![1.0]]).is_err());
        assert!(GaussianStats::from_samples(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn identical_stats_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..4).map(|_| rng.next_u32() as f64 / u32::MAX as f64).collect())
            .collect();
        let s = GaussianStats::from_samples(&samples).unwrap();
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-8);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = GaussianStats { mean: vec![0.0], cov: vec![1.0], count: 2 };
        let b = GaussianStats { mean: vec![1.0], cov: vec![1.0], count: 2 };
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_case_matches_per_dimension_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut unit = |lo: f64, hi: f64| lo + (hi - lo) * (rng.next_u32() as f64 / u32::MAX as f64);
        for _ in 0..20 {
            let d = 2;
            let (ma, mb): (Vec<f64>, Vec<f64>) =
                ((0..d).map(|_| unit(-2.0, 2.0)).collect(), (0..d).map(|_| unit(-2.0, 2.0)).collect());
            let (va, vb): (Vec<f64>, Vec<f64>) =
                ((0..d).map(|_| unit(0.1, 3.0)).collect(), (0..d).map(|_| unit(0.1, 3.0)).collect());
            let diag = |v: &[f64]| {
                let mut c = vec![0.0; d * d];
                for i in 0..d {
                    c[i * d + i] = v[i];
                }
                c
            };
            let a = GaussianStats { mean: ma.clone(), cov: diag(&va), count: 3 };
            let b = GaussianStats { mean: mb.clone(), cov: diag(&vb), count: 3 };
            let want: f64 = (0..d)
                .map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2))
                .sum();
            let got = frechet_distance(&a, &b).unwrap();
            assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
        }
    }

    #[test]
    fn distance_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..10)
                .map(|_| (0..3).map(|_| rng.next_u32() as f64 / u32::MAX as f64).collect())
                .collect()
        };
        let a = GaussianStats::from_samples(&draw(&mut rng)).unwrap();
        let b = GaussianStats::from_samples(&draw(&mut rng)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }

    #[test]
    fn negative_spectrum_is_rejected() {
        let a = GaussianStats { mean: vec![0.0, 0.0], cov: vec![-1.0, 0.0, 0.0, -1.0], count: 2 };
        let b = GaussianStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0], count: 2 };
        match frechet_distance(&a, &b).unwrap_err() {
            Error::NotPsd(l) => assert!(l < -1e-8),
            other => panic!("wrong error {other:?}"),
        }
        let lopsided = GaussianStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.5, 0.0, 1.0], count: 2 };
        assert!(matches!(frechet_distance(&lopsided, &b), Err(Error::Invalid(_))));
    }
}
