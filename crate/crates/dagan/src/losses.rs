//! The three-term generator objective and its adversarial counterpart.
//!
//! The adversarial pair uses the hinge form. Feature matching and the
//! perceptual term are mean absolute differences over feature lists; the
//! perceptual features come from a small frozen random extractor rather than
//! a pretrained network.

use crate::error::{Error, Result};
use crate::model::LEAKY_SLOPE;
use crate::nn::{Conv2d, InitStream};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct LossWeights<T> {
    pub lambda_cgan: T,
    pub lambda_f: T,
    pub lambda_p: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            lambda_cgan: T::from_f64(1.0),
            lambda_f: T::from_f64(10.0),
            lambda_p: T::from_f64(10.0),
        }
    }
}

/// Frozen random feature pyramid: four stride-2 convs with leaky activations.
/// The weights are drawn once from the seed and are never tracked, so no
/// gradient can reach them.
pub struct FixedExtractor<T> {
    convs: Vec<Conv2d<T>>,
}

/// Channel progression of the extractor, input included.
pub const EXTRACTOR_CHANNELS: [usize; 5] = [3, 8, 16, 32, 64];

impl<T: Scalar> FixedExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut stream = InitStream::new(seed);
        let convs = EXTRACTOR_CHANNELS
            .windows(2)
            .map(|w| Conv2d::new(&mut stream, w[0], w[1], 3, 2, 1))
            .collect();
        FixedExtractor { convs }
    }

    /// All four feature levels, finest first.
    pub fn features(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut x = image.clone();
        let mut feats = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let c = conv.apply(tape, &x)?;
            x = tape.leaky_relu(&c, T::from_f64(LEAKY_SLOPE))?;
            feats.push(x.clone());
        }
        Ok(feats)
    }

    /// Pooled coarsest level of a single [3, h, w] image, as a plain vector.
    /// The fixed 2^-6 scale keeps covariance-product eigenvalues of any
    /// embedding batch orders of magnitude inside the -1e-8 PSD rejection
    /// line; it multiplies every Fréchet distance by the same constant, so
    /// comparisons between distances are unaffected.
    pub fn embedding(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let s = image.shape();
        if image.rank() != 3 || s[0] != 3 {
            return Err(Error::Shape {
                op: "embedding",
                detail: format!("expected [3, h, w], got {s:?}"),
            });
        }
        let batched = Tensor::from_vec(vec![1, 3, s[1], s[2]], image.data().to_vec())?;
        let mut tape = Tape::new();
        let feats = self.features(&mut tape, &batched)?;
        let pooled = tape.global_avg_pool(feats.last().unwrap())?;
        Ok(pooled.to_f64_vec().into_iter().map(|v| v / 64.0).collect())
    }

    #[cfg(test)]
    fn weights(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias])
    }
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, op: &'static str, terms: &[Tensor<T>]) -> Result<Tensor<T>> {
    let Some((first, rest)) = terms.split_first() else {
        return Err(Error::Shape { op, detail: "no terms to average".into() });
    };
    let mut acc = first.clone();
    for t in rest {
        acc = tape.add(&acc, t)?;
    }
    tape.affine(&acc, T::from_f64(1.0 / terms.len() as f64), T::ZERO)
}

/// Hinge discriminator loss: the per-scale margins `mean(relu(1 - real)) +
/// mean(relu(1 + fake))` averaged over scales.
pub fn hinge_d_loss<T: Scalar>(
    tape: &mut Tape<T>,
    real_logits: &[Tensor<T>],
    fake_logits: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if real_logits.len() != fake_logits.len() {
        return Err(Error::Shape {
            op: "hinge_d_loss",
            detail: format!("{} real scales vs {} fake", real_logits.len(), fake_logits.len()),
        });
    }
    let one = T::from_f64(1.0);
    let mut per_scale = Vec::with_capacity(real_logits.len());
    for (real, fake) in real_logits.iter().zip(fake_logits) {
        let rm = tape.affine(real, T::from_f64(-1.0), one)?;
        let rm = tape.relu(&rm)?;
        let rm = tape.mean_all(&rm)?;
        let fm = tape.affine(fake, one, one)?;
        let fm = tape.relu(&fm)?;
        let fm = tape.mean_all(&fm)?;
        per_scale.push(tape.add(&rm, &fm)?);
    }
    mean_of(tape, "hinge_d_loss", &per_scale)
}

/// Hinge generator loss: the negated fake logit mean, averaged over scales.
pub fn hinge_g_loss<T: Scalar>(tape: &mut Tape<T>, fake_logits: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut per_scale = Vec::with_capacity(fake_logits.len());
    for fake in fake_logits {
        per_scale.push(tape.mean_all(fake)?);
    }
    let mean = mean_of(tape, "hinge_g_loss", &per_scale)?;
    tape.affine(&mean, T::from_f64(-1.0), T::ZERO)
}

/// Mean absolute difference between corresponding features, averaged over
/// every (scale, layer) pair. The real side is expected to be detached.
pub fn feature_matching_loss<T: Scalar>(
    tape: &mut Tape<T>,
    real_feats: &[Vec<Tensor<T>>],
    fake_feats: &[Vec<Tensor<T>>],
) -> Result<Tensor<T>> {
    if real_feats.len() != fake_feats.len() {
        return Err(Error::Shape {
            op: "feature_matching_loss",
            detail: format!("{} real scales vs {} fake", real_feats.len(), fake_feats.len()),
        });
    }
    let mut terms = Vec::new();
    for (k, (real, fake)) in real_feats.iter().zip(fake_feats).enumerate() {
        if real.len() != fake.len() {
            return Err(Error::Shape {
                op: "feature_matching_loss",
                detail: format!("scale {k}: {} real layers vs {} fake", real.len(), fake.len()),
            });
        }
        for (r, f) in real.iter().zip(fake) {
            let diff = tape.sub(f, r)?;
            let diff = tape.abs(&diff)?;
            terms.push(tape.mean_all(&diff)?);
        }
    }
    mean_of(tape, "feature_matching_loss", &terms)
}

/// Mean absolute feature difference over the extractor's four levels. The
/// real image is detached here, so gradient reaches only the fake image; the
/// extractor itself is never tracked.
pub fn perceptual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    real_img: &Tensor<T>,
    fake_img: &Tensor<T>,
    e: &FixedExtractor<T>,
) -> Result<Tensor<T>> {
    if real_img.shape() != fake_img.shape() {
        return Err(Error::Shape {
            op: "perceptual_loss",
            detail: format!("real {:?} vs fake {:?}", real_img.shape(), fake_img.shape()),
        });
    }
    let real_feats = e.features(tape, &real_img.detach())?;
    let fake_feats = e.features(tape, fake_img)?;
    let mut terms = Vec::with_capacity(real_feats.len());
    for (r, f) in real_feats.iter().zip(&fake_feats) {
        let diff = tape.sub(f, r)?;
        let diff = tape.abs(&diff)?;
        terms.push(tape.mean_all(&diff)?);
    }
    mean_of(tape, "perceptual_loss", &terms)
}

/// The three generator terms before weighting.
pub struct GeneratorLossTerms<T> {
    pub cgan: Tensor<T>,
    pub fm: Tensor<T>,
    pub perc: Tensor<T>,
}

/// Weighted sum of the generator terms.
pub fn total_generator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    terms: &GeneratorLossTerms<T>,
    w: &LossWeights<T>,
) -> Result<Tensor<T>> {
    let cgan = tape.affine(&terms.cgan, w.lambda_cgan, T::ZERO)?;
    let fm = tape.affine(&terms.fm, w.lambda_f, T::ZERO)?;
    let perc = tape.affine(&terms.perc, w.lambda_p, T::ZERO)?;
    let partial = tape.add(&cgan, &fm)?;
    tape.add(&partial, &perc)
}
