//! Generator and discriminator assembly.
//!
//! The generator encodes a one-hot layout through stride-2 stages, decodes
//! back to full resolution, optionally applies the two attention modules, and
//! maps the fused feature to an RGB image through a tanh head. The
//! discriminator scores label-image pairs at two resolutions.

use crate::attention::{
    cam_forward, cam_fuse_scales, dual_fuse, sam_forward, CamState, ChannelGate, SamState,
};
use crate::error::{Error, Result};
use crate::nn::{key, Conv2d, InitStream, InstanceNorm2d, Params};
use crate::tensor::{Scalar, Tape, Tensor};

/// Which attention paths the generator runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub spatial: bool,
    pub channel: Option<ChannelGate>,
}

impl AttentionConfig {
    pub fn none() -> Self {
        AttentionConfig { spatial: false, channel: None }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub image_hw: (usize, usize),
    /// One width per scale; the last entry is the head width shared by both
    /// attention modules.
    pub widths: Vec<usize>,
    pub attention: AttentionConfig,
}

impl GeneratorConfig {
    pub fn num_scales(&self) -> usize {
        self.widths.len()
    }

    pub fn head_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 scales, got {}",
                self.widths.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        let down = 1 << (self.widths.len() - 1);
        let (h, w) = self.image_hw;
        if h % down != 0 || w % down != 0 {
            return Err(Error::Invalid(format!(
                "{h}x{w} image is not divisible by the 2^{} encoder reduction",
                self.widths.len() - 1
            )));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct EncoderStage<T> {
    pub conv: Conv2d<T>,
    pub norm: InstanceNorm2d<T>,
}

#[derive(Clone)]
pub struct GeneratorState<T> {
    pub encoders: Vec<EncoderStage<T>>,
    pub decoder: EncoderStage<T>,
    pub sam: Option<SamState<T>>,
    /// Channel attention parameters together with the gate variant they run.
    pub cam: Option<(ChannelGate, CamState<T>)>,
    pub out_conv: Conv2d<T>,
}

impl<T: Scalar> GeneratorState<T> {
    /// Parameters are drawn in forward order: encoder stages, decoder, then
    /// whichever attention modules the config enables, then the output head.
    pub fn new(stream: &mut InitStream, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let widths = &config.widths;
        let l = widths.len();
        let mut encoders = Vec::with_capacity(l - 1);
        let mut cin = config.num_classes;
        for &cout in &widths[..l - 1] {
            encoders.push(EncoderStage {
                conv: Conv2d::new(stream, cin, cout, 3, 2, 1),
                norm: InstanceNorm2d::new(cout),
            });
            cin = cout;
        }
        let c = widths[l - 1];
        let decoder = EncoderStage {
            conv: Conv2d::new(stream, widths[l - 2], c, 3, 1, 1),
            norm: InstanceNorm2d::new(c),
        };
        let sam = config.attention.spatial.then(|| SamState::new(stream));
        let cam = config
            .attention
            .channel
            .map(|gate| (gate, CamState::new(stream, &widths[..l - 1], c)));
        let out_conv = Conv2d::new(stream, c, 3, 3, 1, 1);
        Ok(GeneratorState { encoders, decoder, sam, cam, out_conv })
    }
}

impl<T: Scalar> Params<T> for GeneratorState<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, stage) in self.encoders.iter().enumerate() {
            stage.conv.visit(&key(prefix, &format!("enc{}.conv", i + 1)), f);
            stage.norm.visit(&key(prefix, &format!("enc{}.norm", i + 1)), f);
        }
        self.decoder.conv.visit(&key(prefix, "dec.conv"), f);
        self.decoder.norm.visit(&key(prefix, "dec.norm"), f);
        if let Some(sam) = &self.sam {
            sam.visit(&key(prefix, "sam"), f);
        }
        if let Some((_, cam)) = &self.cam {
            cam.visit(&key(prefix, "cam"), f);
        }
        self.out_conv.visit(&key(prefix, "out_conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, stage) in self.encoders.iter_mut().enumerate() {
            stage.conv.visit_mut(&key(prefix, &format!("enc{}.conv", i + 1)), f);
            stage.norm.visit_mut(&key(prefix, &format!("enc{}.norm", i + 1)), f);
        }
        self.decoder.conv.visit_mut(&key(prefix, "dec.conv"), f);
        self.decoder.norm.visit_mut(&key(prefix, "dec.norm"), f);
        if let Some(sam) = &mut self.sam {
            sam.visit_mut(&key(prefix, "sam"), f);
        }
        if let Some((_, cam)) = &mut self.cam {
            cam.visit_mut(&key(prefix, "cam"), f);
        }
        self.out_conv.visit_mut(&key(prefix, "out_conv"), f);
    }
}

/// Attention maps actually produced by a forward pass; absent paths stay
/// `None`.
pub struct AttentionMaps<T> {
    pub a_s: Option<Tensor<T>>,
    pub delta: Option<Tensor<T>>,
}

fn spatial_dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    let s = x.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

/// Encoder and decoder features, coarse to fine: stage outputs at 1/2 .. 1/2^(l-1)
/// resolution followed by the full-resolution head feature.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    s_onehot: &Tensor<T>,
    g: &GeneratorState<T>,
) -> Result<Vec<Tensor<T>>> {
    let (h, w) = spatial_dims(s_onehot);
    let down = 1 << g.encoders.len();
    if h % down != 0 || w % down != 0 {
        return Err(Error::Shape {
            op: "backbone_forward",
            detail: format!("{h}x{w} input not divisible by the 2^{} reduction", g.encoders.len()),
        });
    }
    let mut features = Vec::with_capacity(g.encoders.len() + 1);
    let mut x = s_onehot.clone();
    for stage in &g.encoders {
        let conv = stage.conv.apply(tape, &x)?;
        let norm = stage.norm.apply(tape, &conv)?;
        x = tape.relu(&norm)?;
        features.push(x.clone());
    }
    let up = tape.nearest_resize(&x, h, w)?;
    let conv = g.decoder.conv.apply(tape, &up)?;
    let norm = g.decoder.norm.apply(tape, &conv)?;
    features.push(tape.relu(&norm)?);
    Ok(features)
}

/// Full generator pass: backbone, whichever attention paths are enabled, and
/// the tanh output head. Returns the image in [-1, 1] and the attention maps.
pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    s_onehot: &Tensor<T>,
    g: &GeneratorState<T>,
) -> Result<(Tensor<T>, AttentionMaps<T>)> {
    let features = backbone_forward(tape, s_onehot, g)?;
    let f_l = features.last().expect("backbone returns at least two features");
    let mut maps = AttentionMaps { a_s: None, delta: None };

    let spatial = match &g.sam {
        Some(sam) => {
            let (f_s, a_s) = sam_forward(tape, f_l, sam)?;
            maps.a_s = Some(a_s);
            Some(f_s)
        }
        None => None,
    };
    let channel = match &g.cam {
        Some((gate, cam)) => {
            let coarse: Vec<&Tensor<T>> = features[..features.len() - 1].iter().collect();
            let f_tilde = cam_fuse_scales(tape, &coarse, cam, spatial_dims(f_l))?;
            let (f_c, delta) = cam_forward(tape, &f_tilde, f_l, cam, *gate)?;
            maps.delta = Some(delta);
            Some(f_c)
        }
        None => None,
    };

    let fused = match (spatial, channel) {
        (Some(f_s), Some(f_c)) => dual_fuse(tape, &f_s, &f_c)?,
        (Some(f_s), None) => f_s,
        (None, Some(f_c)) => f_c,
        (None, None) => f_l.clone(),
    };
    let pre = g.out_conv.apply(tape, &fused)?;
    let image = tape.tanh(&pre)?;
    Ok((image, maps))
}

const DIS_WIDTHS: [usize; 3] = [16, 32, 64];

/// Logit map plus the three block activations of one discriminator scale.
pub type ScaleOutput<T> = (Tensor<T>, Vec<Tensor<T>>);

/// One patch discriminator: three stride-2 blocks and a logit head. The first
/// block is norm-free so raw pair statistics reach the network.
#[derive(Clone)]
pub struct DisScale<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub norm2: InstanceNorm2d<T>,
    pub conv3: Conv2d<T>,
    pub norm3: InstanceNorm2d<T>,
    pub logit: Conv2d<T>,
}

#[derive(Clone)]
pub struct DiscriminatorState<T> {
    pub scales: Vec<DisScale<T>>,
}

impl<T: Scalar> DiscriminatorState<T> {
    pub fn new(stream: &mut InitStream, in_channels: usize, num_scales: usize) -> Self {
        let scales = (0..num_scales)
            .map(|_| DisScale {
                conv1: Conv2d::new(stream, in_channels, DIS_WIDTHS[0], 3, 2, 1),
                conv2: Conv2d::new(stream, DIS_WIDTHS[0], DIS_WIDTHS[1], 3, 2, 1),
                norm2: InstanceNorm2d::new(DIS_WIDTHS[1]),
                conv3: Conv2d::new(stream, DIS_WIDTHS[1], DIS_WIDTHS[2], 3, 2, 1),
                norm3: InstanceNorm2d::new(DIS_WIDTHS[2]),
                logit: Conv2d::new(stream, DIS_WIDTHS[2], 1, 3, 1, 1),
            })
            .collect();
        DiscriminatorState { scales }
    }
}

impl<T: Scalar> Params<T> for DiscriminatorState<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (k, scale) in self.scales.iter().enumerate() {
            let p = key(prefix, &format!("scale{k}"));
            scale.conv1.visit(&key(&p, "conv1"), f);
            scale.conv2.visit(&key(&p, "conv2"), f);
            scale.norm2.visit(&key(&p, "norm2"), f);
            scale.conv3.visit(&key(&p, "conv3"), f);
            scale.norm3.visit(&key(&p, "norm3"), f);
            scale.logit.visit(&key(&p, "logit"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (k, scale) in self.scales.iter_mut().enumerate() {
            let p = key(prefix, &format!("scale{k}"));
            scale.conv1.visit_mut(&key(&p, "conv1"), f);
            scale.conv2.visit_mut(&key(&p, "conv2"), f);
            scale.norm2.visit_mut(&key(&p, "norm2"), f);
            scale.conv3.visit_mut(&key(&p, "conv3"), f);
            scale.norm3.visit_mut(&key(&p, "norm3"), f);
            scale.logit.visit_mut(&key(&p, "logit"), f);
        }
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Score a label-image pair at every scale. Scale k sees the pair mean-pooled
/// k times; each scale returns its logit map and the three block activations
/// the feature-matching loss consumes.
pub fn discriminator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    s_onehot: &Tensor<T>,
    image: &Tensor<T>,
    d: &DiscriminatorState<T>,
) -> Result<Vec<ScaleOutput<T>>> {
    let axis = usize::from(s_onehot.rank() == 4);
    let expect = d.scales.first().map(|s| s.conv1.weight.shape()[1]).unwrap_or(0);
    let got = s_onehot.shape()[axis] + image.shape()[axis];
    if got != expect {
        return Err(Error::Shape {
            op: "discriminator_forward",
            detail: format!("pair has {got} channels, discriminator expects {expect}"),
        });
    }
    let mut x = tape.concat(&[s_onehot, image], axis)?;
    let mut out = Vec::with_capacity(d.scales.len());
    for scale in &d.scales {
        let c1 = scale.conv1.apply(tape, &x)?;
        let f1 = tape.leaky_relu(&c1, T::from_f64(LEAKY_SLOPE))?;
        let c2 = scale.conv2.apply(tape, &f1)?;
        let n2 = scale.norm2.apply(tape, &c2)?;
        let f2 = tape.leaky_relu(&n2, T::from_f64(LEAKY_SLOPE))?;
        let c3 = scale.conv3.apply(tape, &f2)?;
        let n3 = scale.norm3.apply(tape, &c3)?;
        let f3 = tape.leaky_relu(&n3, T::from_f64(LEAKY_SLOPE))?;
        let logits = scale.logit.apply(tape, &f3)?;
        out.push((logits, vec![f1, f2, f3]));
        if !std::ptr::eq(scale, d.scales.last().unwrap()) {
            x = tape.avg_pool2(&x)?;
        }
    }
    Ok(out)
}
