//! Layer parameters, deterministic initialization, and tape ops for
//! convolution, pooling, resizing, and instance normalization.

use rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Op, Scalar, Tape, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Deterministic parameter-initialization stream. Weight tensors consume draws
/// in row-major element order, and layers initialize in declaration order, so
/// a seed fully determines every parameter.
#[derive(Clone)]
pub struct InitStream {
    rng: ChaCha8Rng,
}

impl InitStream {
    pub fn new(seed: u64) -> Self {
        InitStream { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform draw in `[0, 1)` with 53 random mantissa bits.
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * 2f64.powi(-53)
    }

    /// Glorot-uniform convolution weight `[cout, cin, k, k]`.
    pub fn conv_weight<T: Scalar>(&mut self, cout: usize, cin: usize, k: usize) -> Tensor<T> {
        let fan_in = cin * k * k;
        let fan_out = cout * k * k;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::from_f64((self.unit() * 2.0 - 1.0) * bound))
            .collect();
        Tensor::from_vec(vec![cout, cin, k, k], data).unwrap()
    }
}

/// Named access to every parameter tensor of a module, in a fixed visit order.
/// Checkpoints, the optimizer, and gradient plumbing all rely on this order.
pub trait Params<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

pub fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params<'a, T: Scalar, M: Params<T> + ?Sized>(
    m: &'a M,
    prefix: &str,
) -> Vec<(String, &'a Tensor<T>)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, t| out.push((name, t)));
    out
}

pub fn param_count<T: Scalar, M: Params<T> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.numel());
    n
}

/// Copy of `m` whose parameters are tracked leaves on `tape`. The original
/// stays untracked, so forwards through it record nothing.
pub fn tracked<T: Scalar, M: Params<T> + Clone>(m: &M, tape: &mut Tape<T>) -> Result<M> {
    let mut copy = m.clone();
    let mut err = None;
    copy.visit_mut("", &mut |_, t| {
        if err.is_some() {
            return;
        }
        match tape.leaf(t) {
            Ok(tt) => *t = tt,
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(copy),
    }
}

// ── Layers ───────────────────────────────────────────────────────────────────

#[derive(Clone)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        stream: &mut InitStream,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            weight: stream.conv_weight(cout, cin, k),
            bias: Tensor::zeros(vec![cout]),
            stride,
            padding,
        }
    }

    pub fn apply(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.conv2d(x, &self.weight, &self.bias, self.stride, self.padding, 1)
    }
}

impl<T: Scalar> Params<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(key(prefix, "weight"), &self.weight);
        f(key(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(key(prefix, "weight"), &mut self.weight);
        f(key(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone)]
pub struct InstanceNorm2d<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> InstanceNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm2d {
            scale: Tensor::full(vec![channels], T::ONE),
            shift: Tensor::zeros(vec![channels]),
        }
    }

    pub fn apply(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.instance_norm(x, &self.scale, &self.shift)
    }
}

impl<T: Scalar> Params<T> for InstanceNorm2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(key(prefix, "scale"), &self.scale);
        f(key(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(key(prefix, "scale"), &mut self.scale);
        f(key(prefix, "shift"), &mut self.shift);
    }
}

// ── Tape ops ─────────────────────────────────────────────────────────────────

impl<T: Scalar> Tape<T> {
    /// 2-d convolution over `[n, c, h, w]` or `[c, h, w]` input with square
    /// kernels and zero padding.
    pub fn conv2d(
        &mut self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Tensor<T>> {
        let geom = ConvGeom::from_shapes(x.shape(), weight.shape(), stride, padding, dilation)?;
        if bias.shape() != [geom.cout] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias must be [{}], got {:?}", geom.cout, bias.shape()),
            });
        }
        let data = kernels::conv2d_forward(&geom, x.data(), weight.data(), bias.data());
        self.record(
            "conv2d",
            Op::Conv2d { stride, padding, dilation },
            &[x, weight, bias],
            geom.out_shape(),
            data,
        )
    }

    /// Mean over the channel axis; output has one channel.
    pub fn channel_reduce_mean(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out_shape, data) = kernels::channel_mean_fwd(x.data(), x.shape())?;
        self.record("channel_reduce_mean", Op::ChannelMean, &[x], out_shape, data)
    }

    /// Max over the channel axis; ties resolve to the lowest channel index,
    /// which receives the full gradient.
    pub fn channel_reduce_max(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out_shape, data, argmax) = kernels::channel_max_fwd(x.data(), x.shape())?;
        self.record(
            "channel_reduce_max",
            Op::ChannelMax { argmax: argmax.into() },
            &[x],
            out_shape,
            data,
        )
    }

    /// Spatial mean per channel; output spatial size is 1x1.
    pub fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out_shape, data) = kernels::global_avg_pool_fwd(x.data(), x.shape())?;
        self.record("global_avg_pool", Op::GlobalAvgPool, &[x], out_shape, data)
    }

    /// Nearest-neighbor resize to `oh x ow`; source index is
    /// `floor(dst * src_size / dst_size)`.
    pub fn nearest_resize(&mut self, x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let (out_shape, data) = kernels::nearest_resize_fwd(x.data(), x.shape(), (oh, ow))?;
        self.record("nearest_resize", Op::NearestResize, &[x], out_shape, data)
    }

    /// 2x2 mean pool with stride 2.
    pub fn avg_pool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out_shape, data) = kernels::avg_pool2_fwd(x.data(), x.shape())?;
        self.record("avg_pool2", Op::AvgPool2, &[x], out_shape, data)
    }

    /// Instance normalization: per-sample, per-channel whitening over the
    /// spatial axes followed by a learned channel-wise affine.
    pub fn instance_norm(
        &mut self,
        x: &Tensor<T>,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (y, xhat, inv_std) = kernels::instance_norm_fwd(
            x.data(),
            x.shape(),
            scale.data(),
            shift.data(),
            T::from_f64(NORM_EPS),
        )?;
        self.record(
            "instance_norm",
            Op::InstanceNorm { xhat: xhat.into(), inv_std: inv_std.into() },
            &[x, scale, shift],
            x.shape().to_vec(),
            y,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let w1 = InitStream::new(11).conv_weight::<f64>(8, 4, 3);
        let w2 = InitStream::new(11).conv_weight::<f64>(8, 4, 3);
        let w3 = InitStream::new(12).conv_weight::<f64>(8, 4, 3);
        assert_eq!(w1.data(), w2.data());
        assert_ne!(w1.data(), w3.data());

        let bound = (6.0 / ((4 * 9 + 8 * 9) as f64)).sqrt();
        assert!(w1.data().iter().all(|v| v.abs() <= bound));
        // Spread sanity: draws are not collapsed near zero.
        let maxabs = w1.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(maxabs > bound * 0.5);
    }

    #[test]
    fn conv2d_identity_kernel_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let x = t64(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        // 3x3 kernel that picks the center.
        let mut wd = vec![0.0; 9];
        wd[4] = 1.0;
        let w = t64(&[1, 1, 3, 3], &wd);
        let b = t64(&[1], &[0.0]);
        let y = tape.conv2d(&x, &w, &b, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_gradients_reach_weight_and_bias() {
        let mut tape = Tape::<f64>::new();
        let x = t64(&[1, 2, 2], &[1., 2., 3., 4.]);
        let w = tape.leaf(&t64(&[1, 1, 1, 1], &[2.0])).unwrap();
        let b = tape.leaf(&t64(&[1], &[0.5])).unwrap();
        let y = tape.conv2d(&x, &w, &b, 1, 0, 1).unwrap();
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        // d/dw = sum(x), d/db = number of output pixels.
        assert_eq!(g.wrt(&w).unwrap().item(), 10.0);
        assert_eq!(g.wrt(&b).unwrap().item(), 4.0);
        // x untracked: no gradient.
        assert!(g.wrt(&x).is_none());
    }

    #[test]
    fn conv2d_rejects_bad_bias_and_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![2, 4, 4]);
        let w = Tensor::zeros(vec![3, 2, 3, 3]);
        assert!(tape.conv2d(&x, &w, &Tensor::zeros(vec![2]), 1, 1, 1).is_err());
        let wbad = Tensor::zeros(vec![3, 5, 3, 3]);
        assert!(tape.conv2d(&x, &wbad, &Tensor::zeros(vec![3]), 1, 1, 1).is_err());
    }

    #[test]
    fn nearest_resize_gradient_sums_fanout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        let y = tape.nearest_resize(&x, 4, 4).unwrap();
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        // Each source pixel feeds a 2x2 block.
        assert_eq!(g.wrt(&x).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn avg_pool2_gradient_is_quarter_everywhere() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        let y = tape.avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 2.5);
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn channel_reductions_keep_batch_layout() {
        let mut tape = Tape::<f64>::new();
        let x = t64(&[2, 2, 1, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let mean = tape.channel_reduce_mean(&x).unwrap();
        let max = tape.channel_reduce_max(&x).unwrap();
        assert_eq!(mean.shape(), &[2, 1, 1, 2]);
        assert_eq!(mean.data(), &[2., 3., 6., 7.]);
        assert_eq!(max.shape(), &[2, 1, 1, 2]);
        assert_eq!(max.data(), &[3., 4., 7., 8.]);
    }

    #[test]
    fn global_avg_pool_keeps_channel_count() {
        let mut tape = Tape::<f64>::new();
        let x = t64(&[2, 3, 2, 2], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let y = tape.global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert_eq!(y.data(), &[1.5, 5.5, 9.5, 13.5, 17.5, 21.5]);
    }

    #[test]
    fn instance_norm_validates_affine_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![1, 3, 4, 4]);
        let bad = Tensor::zeros(vec![2]);
        let good = Tensor::zeros(vec![3]);
        assert!(tape.instance_norm(&x, &bad, &good).is_err());
        assert!(tape.instance_norm(&x, &good, &good).is_ok());
    }

    #[test]
    fn params_visitor_reports_stable_names() {
        let mut stream = InitStream::new(0);
        let conv = Conv2d::<f32>::new(&mut stream, 2, 4, 3, 1, 1);
        let names: Vec<String> = named_params(&conv, "enc1").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["enc1.weight", "enc1.bias"]);
        assert_eq!(param_count(&conv), 4 * 2 * 9 + 4);
    }

    #[test]
    fn tracked_copy_shares_values_but_records_leaves() {
        let mut stream = InitStream::new(5);
        let conv = Conv2d::<f64>::new(&mut stream, 1, 1, 1, 1, 0);
        let mut tape = Tape::new();
        let tconv = tracked(&conv, &mut tape).unwrap();
        assert_eq!(tape.len(), 2);
        assert_eq!(tconv.weight.data(), conv.weight.data());
        assert!(tconv.weight.node().is_some());
        assert!(conv.weight.node().is_none());

        let x = Tensor::from_vec(vec![1, 1, 1], vec![3.0]).unwrap();
        let y = tconv.apply(&mut tape, &x).unwrap();
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&tconv.weight).unwrap().item(), 3.0);
    }
}
