//! Spatial and channel attention over generator features.
//!
//! The spatial module weights every position of a feature map by a sigmoid
//! map computed from pooled channel statistics; the channel module reweights
//! channels by a sigmoid vector distilled from multi-scale context. Their
//! outputs sum into the fused feature handed to the output head.

use crate::error::{Error, Result};
use crate::nn::{key, Conv2d, InitStream, Params};
use crate::tensor::{Scalar, Tape, Tensor};

/// Which stream the channel weights multiply; the other is added unscaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelGate {
    /// Gate the multi-scale fused stream, add the backbone feature.
    Fused,
    /// Gate the backbone feature, add the multi-scale fused stream.
    Backbone,
}

/// Spatial attention parameters: one 7x7 convolution fusing the two pooled
/// maps into a single-channel weight map.
#[derive(Clone)]
pub struct SamState<T> {
    pub fuse_conv: Conv2d<T>,
}

impl<T: Scalar> SamState<T> {
    pub fn new(stream: &mut InitStream) -> Self {
        SamState { fuse_conv: Conv2d::new(stream, 2, 1, 7, 1, 3) }
    }
}

impl<T: Scalar> Params<T> for SamState<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.fuse_conv.visit(&key(prefix, "fuse_conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fuse_conv.visit_mut(&key(prefix, "fuse_conv"), f);
    }
}

/// Channel attention parameters. Scale convolutions map each backbone level
/// to the head width C, the fusion convolution merges their concatenation
/// back to C, and the two 1x1 reductions squeeze the pooled 2C vector through
/// a C/2 bottleneck to the C-channel gate.
#[derive(Clone)]
pub struct CamState<T> {
    pub scale_convs: Vec<Conv2d<T>>,
    pub fuse_conv: Conv2d<T>,
    pub reduce_conv_1: Conv2d<T>,
    pub reduce_conv_2: Conv2d<T>,
}

impl<T: Scalar> CamState<T> {
    /// Parameters are drawn in field order: scale convolutions first (one per
    /// entry of `scale_channels`), then fusion, then the two reductions.
    pub fn new(stream: &mut InitStream, scale_channels: &[usize], c: usize) -> Self {
        let scale_convs =
            scale_channels.iter().map(|&ci| Conv2d::new(stream, ci, c, 3, 1, 1)).collect();
        let mid = (c / 2).max(1);
        CamState {
            scale_convs,
            fuse_conv: Conv2d::new(stream, scale_channels.len() * c, c, 3, 1, 1),
            reduce_conv_1: Conv2d::new(stream, 2 * c, mid, 1, 1, 0),
            reduce_conv_2: Conv2d::new(stream, mid, c, 1, 1, 0),
        }
    }
}

impl<T: Scalar> Params<T> for CamState<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, conv) in self.scale_convs.iter().enumerate() {
            conv.visit(&key(prefix, &format!("scale_convs.{i}")), f);
        }
        self.fuse_conv.visit(&key(prefix, "fuse_conv"), f);
        self.reduce_conv_1.visit(&key(prefix, "reduce_conv_1"), f);
        self.reduce_conv_2.visit(&key(prefix, "reduce_conv_2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, conv) in self.scale_convs.iter_mut().enumerate() {
            conv.visit_mut(&key(prefix, &format!("scale_convs.{i}")), f);
        }
        self.fuse_conv.visit_mut(&key(prefix, "fuse_conv"), f);
        self.reduce_conv_1.visit_mut(&key(prefix, "reduce_conv_1"), f);
        self.reduce_conv_2.visit_mut(&key(prefix, "reduce_conv_2"), f);
    }
}

/// Everything the dual attention block produces, kept for export as well as
/// fusion: both attended features plus the raw weight maps.
pub struct AttentionOutput<T> {
    pub f_s: Tensor<T>,
    pub f_c: Tensor<T>,
    pub a_s: Tensor<T>,
    pub delta: Tensor<T>,
}

fn channel_axis<T: Scalar>(x: &Tensor<T>) -> usize {
    usize::from(x.rank() == 4)
}

/// Weight each position of `f_l` by a sigmoid map fused from the channel
/// mean and channel max. Returns the attended feature and the weight map.
pub fn sam_forward<T: Scalar>(
    tape: &mut Tape<T>,
    f_l: &Tensor<T>,
    s: &SamState<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let p_a = tape.channel_reduce_mean(f_l)?;
    let p_m = tape.channel_reduce_max(f_l)?;
    let pooled = tape.concat(&[&p_a, &p_m], channel_axis(f_l))?;
    let pre = s.fuse_conv.apply(tape, &pooled)?;
    let a_s = tape.sigmoid(&pre)?;
    let f_s = tape.mul(&a_s, f_l)?;
    Ok((f_s, a_s))
}

/// Resize every backbone feature to `target_hw`, project each to the head
/// width, and fuse the concatenation into a single C-channel map.
pub fn cam_fuse_scales<T: Scalar>(
    tape: &mut Tape<T>,
    features: &[&Tensor<T>],
    c: &CamState<T>,
    target_hw: (usize, usize),
) -> Result<Tensor<T>> {
    if features.len() != c.scale_convs.len() {
        return Err(Error::Shape {
            op: "cam_fuse_scales",
            detail: format!(
                "{} features for {} scale convolutions",
                features.len(),
                c.scale_convs.len()
            ),
        });
    }
    let mut projected = Vec::with_capacity(features.len());
    for (feat, conv) in features.iter().zip(&c.scale_convs) {
        let resized = tape.nearest_resize(feat, target_hw.0, target_hw.1)?;
        projected.push(conv.apply(tape, &resized)?);
    }
    let refs: Vec<&Tensor<T>> = projected.iter().collect();
    let stacked = tape.concat(&refs, channel_axis(&projected[0]))?;
    c.fuse_conv.apply(tape, &stacked)
}

/// Gate one stream channel-wise by δ and add the other. δ comes from global
/// average pooling of both streams squeezed through the two reductions, so it
/// is constant over spatial positions by construction.
pub fn cam_forward<T: Scalar>(
    tape: &mut Tape<T>,
    f_tilde: &Tensor<T>,
    f_l: &Tensor<T>,
    c: &CamState<T>,
    gate: ChannelGate,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if f_tilde.shape() != f_l.shape() {
        return Err(Error::Shape {
            op: "cam_forward",
            detail: format!("streams {:?} vs {:?}", f_tilde.shape(), f_l.shape()),
        });
    }
    let both = tape.concat(&[f_tilde, f_l], channel_axis(f_l))?;
    let alpha = tape.global_avg_pool(&both)?;
    let squeezed = c.reduce_conv_1.apply(tape, &alpha)?;
    let rectified = tape.relu(&squeezed)?;
    let gamma = c.reduce_conv_2.apply(tape, &rectified)?;
    let delta = tape.sigmoid(&gamma)?;
    let f_c = match gate {
        ChannelGate::Fused => {
            let gated = tape.mul(&delta, f_tilde)?;
            tape.add(&gated, f_l)?
        }
        ChannelGate::Backbone => {
            let gated = tape.mul(&delta, f_l)?;
            tape.add(&gated, f_tilde)?
        }
    };
    Ok((f_c, delta))
}

/// Sum the two attended features. Shapes must match exactly; broadcasting
/// here would hide a wiring mistake.
pub fn dual_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    f_s: &Tensor<T>,
    f_c: &Tensor<T>,
) -> Result<Tensor<T>> {
    if f_s.shape() != f_c.shape() {
        return Err(Error::Shape {
            op: "dual_fuse",
            detail: format!("{:?} vs {:?}", f_s.shape(), f_c.shape()),
        });
    }
    tape.add(f_s, f_c)
}

/// Run both modules over the head feature and the backbone pyramid.
pub fn dual_attention<T: Scalar>(
    tape: &mut Tape<T>,
    f_l: &Tensor<T>,
    features: &[&Tensor<T>],
    sam: &SamState<T>,
    cam: &CamState<T>,
    gate: ChannelGate,
) -> Result<AttentionOutput<T>> {
    let (f_s, a_s) = sam_forward(tape, f_l, sam)?;
    let shape = f_l.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let f_tilde = cam_fuse_scales(tape, features, cam, (h, w))?;
    let (f_c, delta) = cam_forward(tape, &f_tilde, f_l, cam, gate)?;
    Ok(AttentionOutput { f_s, f_c, a_s, delta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed<T: Scalar, P: Params<T>>(p: &mut P) {
        p.visit_mut("", &mut |_, t| *t = Tensor::zeros(t.shape().to_vec()));
    }

    fn rand_tensor(stream: &mut InitStream, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| stream.unit() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn zeroed_fusion_gives_uniform_half_attention() {
        let mut stream = InitStream::new(1);
        let mut sam = SamState::<f64>::new(&mut stream);
        zeroed(&mut sam);
        let f_l = rand_tensor(&mut stream, vec![2, 3, 8, 8]);
        let mut tape = Tape::new();
        let (f_s, a_s) = sam_forward(&mut tape, &f_l, &sam).unwrap();
        assert!(a_s.data().iter().all(|&v| v == 0.5));
        let want: Vec<f64> = f_l.data().iter().map(|&v| 0.5 * v).collect();
        assert_eq!(f_s.data(), &want[..]);
    }

    #[test]
    fn attention_weights_lie_in_open_interval() {
        let mut stream = InitStream::new(2);
        let sam = SamState::<f64>::new(&mut stream);
        let f_l = rand_tensor(&mut stream, vec![1, 4, 9, 9]);
        let mut tape = Tape::new();
        let (_, a_s) = sam_forward(&mut tape, &f_l, &sam).unwrap();
        assert!(a_s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn attention_at_a_pixel_sees_only_its_neighborhood() {
        let mut stream = InitStream::new(3);
        let sam = SamState::<f64>::new(&mut stream);
        let f_l = rand_tensor(&mut stream, vec![1, 3, 16, 16]);
        let mut tape = Tape::new();
        let (_, a_s) = sam_forward(&mut tape, &f_l, &sam).unwrap();

        // Perturb a pixel more than 3 steps away from the probe position.
        let mut bumped = f_l.data().to_vec();
        bumped[15] += 10.0; // channel 0, position (0, 15)
        let f_far = Tensor::from_vec(vec![1, 3, 16, 16], bumped).unwrap();
        let mut tape2 = Tape::new();
        let (_, a_far) = sam_forward(&mut tape2, &f_far, &sam).unwrap();

        let probe = 8 * 16 + 8;
        assert_eq!(a_s.data()[probe], a_far.data()[probe]);
        assert_ne!(a_s.data()[15], a_far.data()[15]);
    }

    #[test]
    fn identical_neighborhoods_get_identical_weights() {
        let mut stream = InitStream::new(4);
        let sam = SamState::<f64>::new(&mut stream);
        // Rows repeat with period 1 vertically, so any two probe pixels in the
        // same column far from the left/right borders share their pooled 7x7
        // neighborhood.
        let (c, h, w) = (3, 16, 16);
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    data[(ci * h + hi) * w + wi] = ((ci + 1) * (wi + 3)) as f64 * 0.05;
                }
            }
        }
        let f_l = Tensor::from_vec(vec![1, c, h, w], data).unwrap();
        let mut tape = Tape::new();
        let (_, a_s) = sam_forward(&mut tape, &f_l, &sam).unwrap();
        let a = a_s.data();
        assert_eq!(a[5 * w + 8], a[9 * w + 8]);
        assert_eq!(a[4 * w + 6], a[10 * w + 6]);
    }

    #[test]
    fn zeroed_reductions_give_half_delta() {
        let mut stream = InitStream::new(5);
        let mut cam = CamState::<f64>::new(&mut stream, &[3, 5], 4);
        zeroed(&mut cam.reduce_conv_1);
        zeroed(&mut cam.reduce_conv_2);
        let f_tilde = rand_tensor(&mut stream, vec![2, 4, 6, 6]);
        let f_l = rand_tensor(&mut stream, vec![2, 4, 6, 6]);
        let mut tape = Tape::new();
        let (f_c, delta) = cam_forward(&mut tape, &f_tilde, &f_l, &cam, ChannelGate::Fused).unwrap();
        assert_eq!(delta.shape(), &[2, 4, 1, 1]);
        assert!(delta.data().iter().all(|&v| v == 0.5));
        let want: Vec<f64> =
            f_tilde.data().iter().zip(f_l.data()).map(|(&t, &l)| 0.5 * t + l).collect();
        assert_eq!(f_c.data(), &want[..]);
    }

    #[test]
    fn gate_variants_coincide_when_streams_are_equal() {
        let mut stream = InitStream::new(6);
        let cam = CamState::<f64>::new(&mut stream, &[2], 4);
        let f = rand_tensor(&mut stream, vec![1, 4, 5, 5]);
        let mut t1 = Tape::new();
        let (fused, d1) = cam_forward(&mut t1, &f, &f, &cam, ChannelGate::Fused).unwrap();
        let mut t2 = Tape::new();
        let (backbone, d2) = cam_forward(&mut t2, &f, &f, &cam, ChannelGate::Backbone).unwrap();
        assert_eq!(fused.data(), backbone.data());
        assert_eq!(d1.data(), d2.data());
    }

    #[test]
    fn delta_lies_in_open_interval_and_is_gate_independent() {
        let mut stream = InitStream::new(7);
        let cam = CamState::<f64>::new(&mut stream, &[2], 6);
        let f_tilde = rand_tensor(&mut stream, vec![1, 6, 4, 4]);
        let f_l = rand_tensor(&mut stream, vec![1, 6, 4, 4]);
        let mut t1 = Tape::new();
        let (_, d1) = cam_forward(&mut t1, &f_tilde, &f_l, &cam, ChannelGate::Fused).unwrap();
        let mut t2 = Tape::new();
        let (_, d2) = cam_forward(&mut t2, &f_tilde, &f_l, &cam, ChannelGate::Backbone).unwrap();
        assert!(d1.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(d1.data(), d2.data());
    }

    #[test]
    fn raising_a_gate_bias_raises_that_channel_only() {
        let mut stream = InitStream::new(8);
        let cam = CamState::<f64>::new(&mut stream, &[2], 4);
        let f_tilde = rand_tensor(&mut stream, vec![1, 4, 5, 5]);
        let f_l = rand_tensor(&mut stream, vec![1, 4, 5, 5]);
        let mut bumped = cam.clone();
        let mut bias = bumped.reduce_conv_2.bias.data().to_vec();
        bias[2] += 1.0;
        bumped.reduce_conv_2.bias = Tensor::from_vec(vec![4], bias).unwrap();
        let mut t1 = Tape::new();
        let (_, base) = cam_forward(&mut t1, &f_tilde, &f_l, &cam, ChannelGate::Fused).unwrap();
        let mut t2 = Tape::new();
        let (_, up) = cam_forward(&mut t2, &f_tilde, &f_l, &bumped, ChannelGate::Fused).unwrap();
        assert!(up.data()[2] > base.data()[2]);
        for ch in [0, 1, 3] {
            assert_eq!(up.data()[ch], base.data()[ch]);
        }
    }

    #[test]
    fn fuse_scales_handles_one_scale_and_checks_count() {
        let mut stream = InitStream::new(9);
        let cam = CamState::<f64>::new(&mut stream, &[3], 4);
        let feat = rand_tensor(&mut stream, vec![1, 3, 4, 4]);
        let mut tape = Tape::new();
        let fused = cam_fuse_scales(&mut tape, &[&feat], &cam, (8, 8)).unwrap();
        assert_eq!(fused.shape(), &[1, 4, 8, 8]);
        let err = cam_fuse_scales(&mut tape, &[&feat, &feat], &cam, (8, 8)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "cam_fuse_scales", .. }));
    }

    #[test]
    fn fuse_scales_maps_the_pyramid_to_the_head_size() {
        let mut stream = InitStream::new(10);
        let cam = CamState::<f64>::new(&mut stream, &[2, 3, 4], 5);
        let f1 = rand_tensor(&mut stream, vec![1, 2, 8, 8]);
        let f2 = rand_tensor(&mut stream, vec![1, 3, 4, 4]);
        let f3 = rand_tensor(&mut stream, vec![1, 4, 2, 2]);
        let mut tape = Tape::new();
        let fused = cam_fuse_scales(&mut tape, &[&f1, &f2, &f3], &cam, (16, 16)).unwrap();
        assert_eq!(fused.shape(), &[1, 5, 16, 16]);
    }

    #[test]
    fn dual_fuse_adds_and_rejects_mismatch() {
        let mut stream = InitStream::new(11);
        let a = rand_tensor(&mut stream, vec![1, 2, 3, 3]);
        let b = rand_tensor(&mut stream, vec![1, 2, 3, 3]);
        let mut tape = Tape::new();
        let ab = dual_fuse(&mut tape, &a, &b).unwrap();
        let ba = dual_fuse(&mut tape, &b, &a).unwrap();
        assert_eq!(ab.data(), ba.data());
        let skinny = rand_tensor(&mut stream, vec![1, 2, 1, 1]);
        // Broadcast-compatible but unequal shapes must still be rejected.
        assert!(dual_fuse(&mut tape, &a, &skinny).is_err());
    }

    #[test]
    fn dual_attention_returns_all_four_maps() {
        let mut stream = InitStream::new(12);
        let sam = SamState::<f64>::new(&mut stream);
        let cam = CamState::<f64>::new(&mut stream, &[2, 3], 4);
        let f_l = rand_tensor(&mut stream, vec![1, 4, 8, 8]);
        let f1 = rand_tensor(&mut stream, vec![1, 2, 4, 4]);
        let f2 = rand_tensor(&mut stream, vec![1, 3, 2, 2]);
        let mut tape = Tape::new();
        let out =
            dual_attention(&mut tape, &f_l, &[&f1, &f2], &sam, &cam, ChannelGate::Backbone)
                .unwrap();
        assert_eq!(out.f_s.shape(), &[1, 4, 8, 8]);
        assert_eq!(out.f_c.shape(), &[1, 4, 8, 8]);
        assert_eq!(out.a_s.shape(), &[1, 1, 8, 8]);
        assert_eq!(out.delta.shape(), &[1, 4, 1, 1]);
    }
}
