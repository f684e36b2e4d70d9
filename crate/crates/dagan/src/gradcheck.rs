//! Central finite-difference verification of every backward rule.
//!
//! Each check compares the taped gradient of a scalar-valued function against
//! central differences at f64 with step 1e-4. Errors are reported relative to
//! the largest gradient magnitude the check saw, so near-zero entries do not
//! inflate the ratio. Inputs that feed kinked functions (relu, abs, max) are
//! drawn away from the kink: a step that crossed one would measure the wrong
//! one-sided slope.

use crate::attention::{
    cam_forward, cam_fuse_scales, sam_forward, CamState, ChannelGate, SamState,
};
use crate::error::Result;
use crate::losses::{
    feature_matching_loss, hinge_d_loss, hinge_g_loss, perceptual_loss, total_generator_loss,
    FixedExtractor, GeneratorLossTerms, LossWeights,
};
use crate::model::{
    discriminator_forward, generator_forward, AttentionConfig, DiscriminatorState,
    GeneratorConfig, GeneratorState,
};
use crate::nn::{InitStream, Params};
use crate::tensor::{Tape, Tensor};

const STEP: f64 = 1e-4;
/// Exactly-linear and piecewise-linear graphs, where differences are exact to
/// rounding.
const TOL_LINEAR: f64 = 1e-6;
/// Everything with curvature, where the difference quotient itself carries
/// O(step squared) truncation.
const TOL_COMPOSITE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

type ScalarFn<'a> = dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>> + 'a;

/// Compare taped gradients of `f` against central differences for every
/// element of every input.
pub fn check_scalar_fn(
    name: &'static str,
    tol: f64,
    inputs: &[Tensor<f64>],
    f: &ScalarFn,
) -> Result<Check> {
    let mut tape = Tape::new();
    let leaves: Vec<Tensor<f64>> =
        inputs.iter().map(|t| tape.leaf(t)).collect::<Result<_>>()?;
    let out = f(&mut tape, &leaves)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|l| grads.wrt_or_zeros(l)).collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut scratch = Tape::new();
        Ok(f(&mut scratch, probe)?.item())
    };

    let mut gap = 0.0f64;
    let mut scale = 1e-6f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let ad = analytic[k].data();
        for i in 0..input.numel() {
            let mut at = |v: f64| -> Result<f64> {
                let mut data = input.data().to_vec();
                data[i] = v;
                probe[k] = Tensor::from_vec(input.shape().to_vec(), data)?;
                eval(&probe)
            };
            let x = input.data()[i];
            let fd = (at(x + STEP)? - at(x - STEP)?) / (2.0 * STEP);
            gap = gap.max((ad[i] - fd).abs());
            scale = scale.max(ad[i].abs()).max(fd.abs());
        }
        probe[k] = input.clone();
    }
    Ok(Check { name, max_rel_err: gap / scale, tol })
}

/// Move every parameter to general position. Freshly initialized norm shifts
/// are exactly zero, which parks the deepest 1x1-plane features of the
/// miniature models precisely on the leaky-relu kink, where one-sided slopes
/// disagree by construction.
fn jitter_params<M: Params<f64>>(m: &mut M, stream: &mut InitStream) {
    m.visit_mut("", &mut |_, t| {
        let data = t.data().iter().map(|v| v + (stream.unit() - 0.5) * 0.1).collect();
        *t = Tensor::from_vec(t.shape().to_vec(), data).unwrap();
    });
}

/// Copy of `m` with its parameters replaced by `flat` in visit order.
fn with_params<M: Params<f64> + Clone>(m: &M, flat: &[Tensor<f64>]) -> M {
    let mut copy = m.clone();
    let mut i = 0;
    copy.visit_mut("", &mut |_, t| {
        *t = flat[i].clone();
        i += 1;
    });
    assert_eq!(i, flat.len(), "parameter count changed between visits");
    copy
}

fn params_of<M: Params<f64>>(m: &M) -> Vec<Tensor<f64>> {
    let mut flat = Vec::new();
    m.visit("", &mut |_, t| flat.push(t.clone()));
    flat
}

fn uniform(stream: &mut InitStream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + stream.unit() * (hi - lo)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Signed values with magnitude in [margin, 1): safe for relu, abs, and
/// leaky-relu checks.
fn uniform_off_kink(stream: &mut InitStream, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = margin + stream.unit() * (1.0 - margin);
            if stream.unit() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Channel-max inputs where the top two channels of every pixel stay far
/// enough apart that no finite-difference step can swap the argmax.
fn uniform_clear_max(stream: &mut InitStream, shape: &[usize], gap: f64) -> Tensor<f64> {
    loop {
        let t = uniform(stream, shape, -1.0, 1.0);
        let (c, hw) = (shape[shape.len() - 3], shape[shape.len() - 2] * shape[shape.len() - 1]);
        let planes = t.numel() / (c * hw);
        let data = t.data();
        let clear = (0..planes * hw).all(|pix| {
            let (img, p) = (pix / hw, pix % hw);
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for ci in 0..c {
                let v = data[(img * c + ci) * hw + p];
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            top - second > gap
        });
        if clear {
            return t;
        }
    }
}

/// Random constant projection so that every output element contributes a
/// distinct weight to the reduced scalar; a plain sum would let sign-paired
/// errors cancel.
fn project(tape: &mut Tape<f64>, y: &Tensor<f64>, stream: &mut InitStream) -> Result<Tensor<f64>> {
    let r = uniform(stream, y.shape(), -1.0, 1.0);
    let weighted = tape.mul(y, &r)?;
    tape.mean_all(&weighted)
}

fn elementwise_checks(checks: &mut Vec<Check>) -> Result<()> {
    let mut stream = InitStream::new(101);
    for seed in 0..10u64 {
        let mut s = InitStream::new(200 + seed);
        let a = uniform(&mut s, &[2, 3, 3], -1.0, 1.0);
        let b = uniform(&mut s, &[1, 3, 1], -1.0, 1.0);
        let full = uniform(&mut s, &[2, 3, 3], -1.0, 1.0);

        checks.push(check_scalar_fn("add_broadcast", TOL_LINEAR, &[a.clone(), b.clone()], &|t, i| {
            let y = t.add(&i[0], &i[1])?;
            t.mean_all(&y)
        })?);
        checks.push(check_scalar_fn("sub_broadcast", TOL_LINEAR, &[a.clone(), b.clone()], &|t, i| {
            let y = t.sub(&i[0], &i[1])?;
            t.mean_all(&y)
        })?);
        checks.push(check_scalar_fn("mul_broadcast", TOL_LINEAR, &[a.clone(), b.clone()], &|t, i| {
            let y = t.mul(&i[0], &i[1])?;
            t.sum_all(&y)
        })?);
        checks.push(check_scalar_fn("affine", TOL_LINEAR, std::slice::from_ref(&a), &|t, i| {
            let y = t.affine(&i[0], 1.7, -0.3)?;
            t.mean_all(&y)
        })?);
        checks.push(check_scalar_fn("concat", TOL_LINEAR, &[a.clone(), full.clone()], &|t, i| {
            let y = t.concat(&[&i[0], &i[1]], 0)?;
            let r = Tensor::from_vec(
                y.shape().to_vec(),
                (0..y.numel()).map(|j| (j as f64 * 0.37).sin()).collect(),
            )?;
            let w = t.mul(&y, &r)?;
            t.sum_all(&w)
        })?);
        checks.push(check_scalar_fn("sigmoid", TOL_COMPOSITE, std::slice::from_ref(&a), &|t, i| {
            let y = t.sigmoid(&i[0])?;
            t.mean_all(&y)
        })?);
        checks.push(check_scalar_fn("tanh", TOL_COMPOSITE, std::slice::from_ref(&a), &|t, i| {
            let y = t.tanh(&i[0])?;
            t.mean_all(&y)
        })?);

        let off = uniform_off_kink(&mut s, &[2, 3, 3], 0.05);
        checks.push(check_scalar_fn("relu", TOL_LINEAR, std::slice::from_ref(&off), &|t, i| {
            let y = t.relu(&i[0])?;
            t.mean_all(&y)
        })?);
        checks.push(check_scalar_fn("leaky_relu", TOL_LINEAR, std::slice::from_ref(&off), &|t, i| {
            let y = t.leaky_relu(&i[0], 0.2)?;
            t.mean_all(&y)
        })?);
        checks.push(check_scalar_fn("abs", TOL_LINEAR, &[off], &|t, i| {
            let y = t.abs(&i[0])?;
            t.mean_all(&y)
        })?);
    }

    let x = uniform(&mut stream, &[2, 3, 4, 4], 0.0, 1.0);
    checks.push(check_scalar_fn("sum_all", TOL_LINEAR, std::slice::from_ref(&x), &|t, i| t.sum_all(&i[0]))?);
    checks.push(check_scalar_fn("mean_all", TOL_LINEAR, &[x], &|t, i| t.mean_all(&i[0]))?);
    Ok(())
}

fn structured_op_checks(checks: &mut Vec<Check>) -> Result<()> {
    for seed in 0..10u64 {
        let mut s = InitStream::new(300 + seed);
        let x = uniform(&mut s, &[1, 2, 5, 5], -1.0, 1.0);
        let w = uniform(&mut s, &[3, 2, 3, 3], -0.5, 0.5);
        let b = uniform(&mut s, &[3], -0.5, 0.5);
        let proj = InitStream::new(400 + seed);
        checks.push(check_scalar_fn(
            "conv2d_s1",
            TOL_LINEAR,
            &[x.clone(), w.clone(), b.clone()],
            &move |t, i| {
                let y = t.conv2d(&i[0], &i[1], &i[2], 1, 1, 1)?;
                project(t, &y, &mut proj.clone())
            },
        )?);
        let xs = uniform(&mut s, &[2, 2, 5, 6], -1.0, 1.0);
        let proj = InitStream::new(410 + seed);
        checks.push(check_scalar_fn(
            "conv2d_s2",
            TOL_LINEAR,
            &[xs, w.clone(), b.clone()],
            &move |t, i| {
                let y = t.conv2d(&i[0], &i[1], &i[2], 2, 1, 1)?;
                project(t, &y, &mut proj.clone())
            },
        )?);
        let xd = uniform(&mut s, &[1, 2, 7, 7], -1.0, 1.0);
        let proj = InitStream::new(420 + seed);
        checks.push(check_scalar_fn(
            "conv2d_dilated",
            TOL_LINEAR,
            &[xd, w, b],
            &move |t, i| {
                let y = t.conv2d(&i[0], &i[1], &i[2], 1, 2, 2)?;
                project(t, &y, &mut proj.clone())
            },
        )?);

        let p = uniform(&mut s, &[2, 3, 4, 4], -1.0, 1.0);
        let proj = InitStream::new(430 + seed);
        checks.push(check_scalar_fn("avg_pool2", TOL_LINEAR, std::slice::from_ref(&p), &move |t, i| {
            let y = t.avg_pool2(&i[0])?;
            project(t, &y, &mut proj.clone())
        })?);
        checks.push(check_scalar_fn("global_avg_pool", TOL_LINEAR, std::slice::from_ref(&p), &|t, i| {
            let y = t.global_avg_pool(&i[0])?;
            t.sum_all(&y)
        })?);
        let proj = InitStream::new(440 + seed);
        checks.push(check_scalar_fn("nearest_resize", TOL_LINEAR, std::slice::from_ref(&p), &move |t, i| {
            let y = t.nearest_resize(&i[0], 9, 7)?;
            project(t, &y, &mut proj.clone())
        })?);
        let proj = InitStream::new(450 + seed);
        checks.push(check_scalar_fn("channel_mean", TOL_LINEAR, &[p], &move |t, i| {
            let y = t.channel_reduce_mean(&i[0])?;
            project(t, &y, &mut proj.clone())
        })?);

        let cm = uniform_clear_max(&mut s, &[2, 3, 4, 4], 0.01);
        let proj = InitStream::new(460 + seed);
        checks.push(check_scalar_fn("channel_max", TOL_LINEAR, &[cm], &move |t, i| {
            let y = t.channel_reduce_max(&i[0])?;
            project(t, &y, &mut proj.clone())
        })?);

        let xn = uniform(&mut s, &[2, 3, 4, 4], -1.0, 1.0);
        let scale = uniform(&mut s, &[3], 0.5, 1.5);
        let shift = uniform(&mut s, &[3], -0.5, 0.5);
        let proj = InitStream::new(470 + seed);
        checks.push(check_scalar_fn(
            "instance_norm",
            TOL_COMPOSITE,
            &[xn, scale, shift],
            &move |t, i| {
                let y = t.instance_norm(&i[0], &i[1], &i[2])?;
                project(t, &y, &mut proj.clone())
            },
        )?);
    }
    Ok(())
}

fn attention_checks(checks: &mut Vec<Check>) -> Result<()> {
    let mut s = InitStream::new(500);
    let sam = SamState::<f64>::new(&mut s);
    let f_l = uniform(&mut s, &[1, 4, 6, 6], -1.0, 1.0);
    let sam_params = params_of(&sam);
    let mut inputs = vec![f_l.clone()];
    inputs.extend(sam_params.iter().cloned());
    let proj = InitStream::new(501);
    checks.push(check_scalar_fn("sam_forward", TOL_COMPOSITE, &inputs, &move |t, i| {
        let m = with_params(&sam, &i[1..]);
        let (f_s, _) = sam_forward(t, &i[0], &m)?;
        project(t, &f_s, &mut proj.clone())
    })?);

    let mut s = InitStream::new(510);
    let cam = CamState::<f64>::new(&mut s, &[3, 4], 5);
    let p1 = uniform(&mut s, &[1, 3, 4, 4], -1.0, 1.0);
    let p2 = uniform(&mut s, &[1, 4, 2, 2], -1.0, 1.0);
    let cam_params = params_of(&cam);
    let mut inputs = vec![p1.clone(), p2.clone()];
    inputs.extend(cam_params.iter().cloned());
    let cam_fuse = cam.clone();
    let proj = InitStream::new(511);
    checks.push(check_scalar_fn("cam_fuse_scales", TOL_COMPOSITE, &inputs, &move |t, i| {
        let m = with_params(&cam_fuse, &i[2..]);
        let f_tilde = cam_fuse_scales(t, &[&i[0], &i[1]], &m, (8, 8))?;
        project(t, &f_tilde, &mut proj.clone())
    })?);

    for (name, gate) in [
        ("cam_forward_gate_fused", ChannelGate::Fused),
        ("cam_forward_gate_backbone", ChannelGate::Backbone),
    ] {
        let mut s = InitStream::new(520);
        let f_tilde = uniform(&mut s, &[1, 5, 8, 8], -1.0, 1.0);
        let f_l = uniform(&mut s, &[1, 5, 8, 8], -1.0, 1.0);
        let mut inputs = vec![f_tilde, f_l];
        inputs.extend(cam_params.iter().cloned());
        let cam = cam.clone();
        let proj = InitStream::new(521);
        checks.push(check_scalar_fn(name, TOL_COMPOSITE, &inputs, &move |t, i| {
            let m = with_params(&cam, &i[2..]);
            let (f_c, _) = cam_forward(t, &i[0], &i[1], &m, gate)?;
            project(t, &f_c, &mut proj.clone())
        })?);
    }
    Ok(())
}

fn model_checks(checks: &mut Vec<Check>) -> Result<()> {
    let config = GeneratorConfig {
        num_classes: 3,
        image_hw: (8, 8),
        widths: vec![4, 6, 8],
        attention: AttentionConfig { spatial: true, channel: Some(ChannelGate::Backbone) },
    };
    let mut s = InitStream::new(530);
    let mut g = GeneratorState::<f64>::new(&mut s, &config)?;
    jitter_params(&mut g, &mut s);
    let onehot = {
        let mut data = vec![0.0; 3 * 64];
        for pix in 0..64 {
            let class = (s.unit() * 3.0) as usize % 3;
            data[class * 64 + pix] = 1.0;
        }
        Tensor::from_vec(vec![1, 3, 8, 8], data).unwrap()
    };
    let mut inputs = vec![onehot.clone()];
    inputs.extend(params_of(&g));
    let proj = InitStream::new(531);
    checks.push(check_scalar_fn("generator_forward", TOL_COMPOSITE, &inputs, &move |t, i| {
        let m = with_params(&g, &i[1..]);
        let (image, _) = generator_forward(t, &i[0], &m)?;
        project(t, &image, &mut proj.clone())
    })?);

    let mut s = InitStream::new(540);
    let mut d = DiscriminatorState::<f64>::new(&mut s, 6, 2);
    jitter_params(&mut d, &mut s);
    let image = uniform(&mut s, &[1, 3, 8, 8], -0.9, 0.9);
    let mut inputs = vec![image];
    inputs.extend(params_of(&d));
    let proj = InitStream::new(541);
    checks.push(check_scalar_fn("discriminator_forward", TOL_COMPOSITE, &inputs, &move |t, i| {
        let m = with_params(&d, &i[1..]);
        let outs = discriminator_forward(t, &onehot, &i[0], &m)?;
        let mut terms = Vec::new();
        let mut proj = proj.clone();
        for (logits, feats) in &outs {
            terms.push(project(t, logits, &mut proj)?);
            for f in feats {
                terms.push(project(t, f, &mut proj)?);
            }
        }
        let mut acc = terms[0].clone();
        for term in &terms[1..] {
            acc = t.add(&acc, term)?;
        }
        Ok(acc)
    })?);
    Ok(())
}

fn loss_checks(checks: &mut Vec<Check>) -> Result<()> {
    let mut s = InitStream::new(550);
    // Hinge terms kink where a logit crosses the margin; keep a gap around
    // both +1 and -1.
    let clear_margin = |s: &mut InitStream, shape: &[usize]| {
        loop {
            let t = uniform(s, shape, -2.0, 2.0);
            if t.data().iter().all(|v| (v.abs() - 1.0).abs() > 0.05) {
                return t;
            }
        }
    };
    let real = vec![clear_margin(&mut s, &[1, 1, 3, 3]), clear_margin(&mut s, &[1, 1, 2, 2])];
    let fake = vec![clear_margin(&mut s, &[1, 1, 3, 3]), clear_margin(&mut s, &[1, 1, 2, 2])];
    let inputs = [real.clone(), fake.clone()].concat();
    checks.push(check_scalar_fn("hinge_d_loss", TOL_LINEAR, &inputs, &|t, i| {
        hinge_d_loss(t, &i[..2], &i[2..])
    })?);
    checks.push(check_scalar_fn("hinge_g_loss", TOL_LINEAR, &fake, &|t, i| {
        hinge_g_loss(t, i)
    })?);

    // The L1 kink sits at zero feature difference; separate the lists.
    let fm_real: Vec<Tensor<f64>> =
        (0..3).map(|_| uniform(&mut s, &[1, 4, 3, 3], 2.0, 3.0)).collect();
    let fm_fake: Vec<Tensor<f64>> =
        (0..3).map(|_| uniform(&mut s, &[1, 4, 3, 3], -1.0, 1.0)).collect();
    let inputs = [fm_real.clone(), fm_fake.clone()].concat();
    checks.push(check_scalar_fn("feature_matching_loss", TOL_LINEAR, &inputs, &|t, i| {
        let real = vec![i[..3].to_vec()];
        let fake = vec![i[3..].to_vec()];
        feature_matching_loss(t, &real, &fake)
    })?);

    // Only the fake image is checked: the loss detaches its real branch, so
    // the real-side derivative is zero by contract, not by calculus.
    let e = FixedExtractor::new(97);
    let real_img = uniform(&mut s, &[1, 3, 8, 8], -0.9, 0.9);
    let fake_img = uniform(&mut s, &[1, 3, 8, 8], -0.9, 0.9);
    checks.push(check_scalar_fn(
        "perceptual_loss",
        TOL_COMPOSITE,
        &[fake_img],
        &move |t, i| perceptual_loss(t, &real_img, &i[0], &e),
    )?);

    let terms = [Tensor::scalar(0.4), Tensor::scalar(0.3), Tensor::scalar(0.2)];
    checks.push(check_scalar_fn("total_generator_loss", TOL_LINEAR, &terms, &|t, i| {
        let terms = GeneratorLossTerms { cgan: i[0].clone(), fm: i[1].clone(), perc: i[2].clone() };
        total_generator_loss(t, &terms, &LossWeights::default())
    })?);
    Ok(())
}

/// The full suite. Deterministic: seeds are fixed, so the reported errors are
/// reproducible bit-for-bit.
pub fn run_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    elementwise_checks(&mut checks)?;
    structured_op_checks(&mut checks)?;
    attention_checks(&mut checks)?;
    model_checks(&mut checks)?;
    loss_checks(&mut checks)?;
    Ok(checks)
}
