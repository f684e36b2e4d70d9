//! Alternating adversarial training: one Adam step on the discriminator, then
//! one on the generator against the freshly updated discriminator, all on a
//! single tape per batch.

use crate::checkpoint::{Checkpoint, RngSnapshot};
use crate::data::{generate_layout, one_hot, render, Layout, SceneConfig};
use crate::error::{Error, Result};
use crate::losses::{
    feature_matching_loss, hinge_d_loss, hinge_g_loss, perceptual_loss, total_generator_loss,
    FixedExtractor, GeneratorLossTerms, LossWeights,
};
use crate::model::{
    discriminator_forward, generator_forward, DiscriminatorState, GeneratorConfig, GeneratorState,
};
use crate::nn::{named_params, tracked, InitStream, Params};
use crate::tensor::{GradMap, Scalar, Tape, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// RNG stream reserved for epoch shuffles; scene streams start at 1.
pub const SHUFFLE_STREAM: u64 = u64::MAX;
/// The feature extractor is shared by the perceptual loss and the Fréchet
/// metric, and is fixed across runs so distances stay comparable.
pub const EXTRACTOR_SEED: u64 = 0x0DD5_EED5;
/// Discriminator image pyramid depth.
pub const DIS_SCALES: usize = 2;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.0,
            beta2: 0.999,
            lr_g: 1e-4,
            lr_d: 4e-4,
            epsilon: 1e-8,
            batch_size: 4,
            epochs: 40,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if v <= 0.0 || v.is_nan() {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment buffers aligned with the model's parameter visit order.
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<M: Params<T>>(model: &M) -> Self {
        let zeros: Vec<Tensor<T>> = named_params(model, "")
            .into_iter()
            .map(|(_, p)| Tensor::zeros(p.shape().to_vec()))
            .collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// Bias-corrected Adam. The step counter advances on every call, zero
/// gradients included.
pub fn adam_step<T: Scalar, M: Params<T>>(
    model: &mut M,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("{} gradients for {} buffers", grads.len(), state.m.len()),
        });
    }
    state.t += 1;
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let c1 = T::from_f64(1.0 - beta1);
    let c2 = T::from_f64(1.0 - beta2);
    let inv_bc1 = T::from_f64(1.0 / (1.0 - beta1.powi(state.t as i32)));
    let inv_bc2 = T::from_f64(1.0 / (1.0 - beta2.powi(state.t as i32)));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);

    let mut i = 0usize;
    let mut err = None;
    model.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(g) = grads.get(i) else {
            err = Some(Error::Shape {
                op: "adam_step",
                detail: format!("no gradient for {name}"),
            });
            return;
        };
        if g.shape() != p.shape() {
            err = Some(Error::Shape {
                op: "adam_step",
                detail: format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            });
            return;
        }
        let n = p.numel();
        let mut m_new = Vec::with_capacity(n);
        let mut v_new = Vec::with_capacity(n);
        let mut p_new = Vec::with_capacity(n);
        let (ms, vs, gs, ps) = (state.m[i].data(), state.v[i].data(), g.data(), p.data());
        for j in 0..n {
            let m = b1 * ms[j] + c1 * gs[j];
            let v = b2 * vs[j] + c2 * gs[j] * gs[j];
            let update = lr_t * (m * inv_bc1) / ((v * inv_bc2).sqrt() + eps_t);
            m_new.push(m);
            v_new.push(v);
            p_new.push(ps[j] - update);
        }
        let shape = p.shape().to_vec();
        state.m[i] = Tensor::from_vec(shape.clone(), m_new).expect("shape preserved");
        state.v[i] = Tensor::from_vec(shape.clone(), v_new).expect("shape preserved");
        *p = Tensor::from_vec(shape, p_new).expect("shape preserved");
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != grads.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("{} gradients for {i} parameters", grads.len()),
        });
    }
    Ok(())
}

/// One training batch: layouts one-hot [n, K, h, w] and real images [n, 3, h, w].
pub struct Batch<T: Scalar> {
    pub onehot: Tensor<T>,
    pub real: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub d_loss: f64,
    pub g_cgan: f64,
    pub g_fm: f64,
    pub g_perc: f64,
    pub g_total: f64,
}

impl std::fmt::Display for StepLosses {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.step, self.d_loss, self.g_cgan, self.g_fm, self.g_perc, self.g_total
        )
    }
}

fn aligned_grads<T: Scalar, M: Params<T>>(tracked_model: &M, grads: &GradMap<T>) -> Vec<Tensor<T>> {
    named_params(tracked_model, "")
        .into_iter()
        .map(|(_, p)| grads.wrt_or_zeros(p))
        .collect()
}

/// One discriminator update on the detached fake pair, then one generator
/// update whose gradients flow through the already-updated discriminator.
pub fn train_step<T: Scalar>(
    batch: &Batch<T>,
    g_state: &mut GeneratorState<T>,
    d_state: &mut DiscriminatorState<T>,
    opt_g: &mut AdamState<T>,
    opt_d: &mut AdamState<T>,
    extractor: &FixedExtractor<T>,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let mut tape = Tape::new();

    let tg = tracked(g_state, &mut tape)?;
    let (fake, _) = generator_forward(&mut tape, &batch.onehot, &tg)?;
    let fake_const = fake.detach();

    let td = tracked(d_state, &mut tape)?;
    let real_out = discriminator_forward(&mut tape, &batch.onehot, &batch.real, &td)?;
    let fake_out = discriminator_forward(&mut tape, &batch.onehot, &fake_const, &td)?;
    let real_logits: Vec<Tensor<T>> = real_out.iter().map(|(l, _)| l.clone()).collect();
    let fake_logits: Vec<Tensor<T>> = fake_out.iter().map(|(l, _)| l.clone()).collect();
    let d_loss = hinge_d_loss(&mut tape, &real_logits, &fake_logits)?;
    let d_grads = tape.backward(&d_loss)?;
    adam_step(
        d_state,
        &aligned_grads(&td, &d_grads),
        opt_d,
        cfg.lr_d,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    )?;

    // Untracked discriminator parameters: activations stay differentiable with
    // respect to the fake image while the discriminator itself receives no
    // gradient from the generator objective.
    let real_ref = discriminator_forward(&mut tape, &batch.onehot, &batch.real, d_state)?;
    let fake_ref = discriminator_forward(&mut tape, &batch.onehot, &fake, d_state)?;
    let g_logits: Vec<Tensor<T>> = fake_ref.iter().map(|(l, _)| l.clone()).collect();
    let real_feats: Vec<Vec<Tensor<T>>> = real_ref.into_iter().map(|(_, f)| f).collect();
    let fake_feats: Vec<Vec<Tensor<T>>> = fake_ref.into_iter().map(|(_, f)| f).collect();

    let terms = GeneratorLossTerms {
        cgan: hinge_g_loss(&mut tape, &g_logits)?,
        fm: feature_matching_loss(&mut tape, &real_feats, &fake_feats)?,
        perc: perceptual_loss(&mut tape, &batch.real, &fake, extractor)?,
    };
    let weights = LossWeights::<T>::default();
    let g_total = total_generator_loss(&mut tape, &terms, &weights)?;
    let g_grads = tape.backward(&g_total)?;
    adam_step(
        g_state,
        &aligned_grads(&tg, &g_grads),
        opt_g,
        cfg.lr_g,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    )?;

    Ok(StepLosses {
        step: opt_g.t,
        d_loss: d_loss.item().to_f64(),
        g_cgan: terms.cgan.item().to_f64(),
        g_fm: terms.fm.item().to_f64(),
        g_perc: terms.perc.item().to_f64(),
        g_total: g_total.item().to_f64(),
    })
}

/// Pre-rendered scenes with their one-hot layouts.
pub struct Dataset<T: Scalar> {
    pub layouts: Vec<Layout>,
    pub onehots: Vec<Tensor<T>>,
    pub images: Vec<Tensor<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }
}

pub fn build_dataset<T: Scalar>(
    scene: &SceneConfig,
    start: usize,
    count: usize,
) -> Result<Dataset<T>> {
    scene.validate()?;
    let mut layouts = Vec::with_capacity(count);
    let mut onehots = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for i in start..start + count {
        let layout = generate_layout(scene, i);
        onehots.push(one_hot::<T>(&layout, scene.num_classes)?);
        images.push(render::<T>(&layout));
        layouts.push(layout);
    }
    Ok(Dataset { layouts, onehots, images })
}

/// Everything a run mutates, plus the configs that shaped it.
pub struct Trainer<T: Scalar> {
    pub gen: GeneratorState<T>,
    pub dis: DiscriminatorState<T>,
    pub opt_g: AdamState<T>,
    pub opt_d: AdamState<T>,
    pub extractor: FixedExtractor<T>,
    pub rng: ChaCha8Rng,
    pub epoch: u32,
    pub gen_cfg: GeneratorConfig,
    pub cfg: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(gen_cfg: GeneratorConfig, cfg: TrainConfig) -> Result<Self> {
        gen_cfg.validate()?;
        cfg.validate()?;
        let mut stream = InitStream::new(cfg.seed);
        let gen = GeneratorState::new(&mut stream, &gen_cfg)?;
        let dis = DiscriminatorState::new(&mut stream, gen_cfg.num_classes + 3, DIS_SCALES);
        let opt_g = AdamState::new(&gen);
        let opt_d = AdamState::new(&dis);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Trainer {
            gen,
            dis,
            opt_g,
            opt_d,
            extractor: FixedExtractor::new(EXTRACTOR_SEED),
            rng,
            epoch: 0,
            gen_cfg,
            cfg,
        })
    }

    pub fn step(&mut self, batch: &Batch<T>) -> Result<StepLosses> {
        train_step(
            batch,
            &mut self.gen,
            &mut self.dis,
            &mut self.opt_g,
            &mut self.opt_d,
            &self.extractor,
            &self.cfg,
        )
    }

    /// One pass over the dataset in shuffled order; the tail keeps its
    /// shorter batch.
    pub fn run_epoch(
        &mut self,
        data: &Dataset<T>,
        mut on_step: impl FnMut(&StepLosses),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        let n = data.len();
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (self.rng.next_u32() as usize) % (i + 1);
            idx.swap(i, j);
        }
        for chunk in idx.chunks(self.cfg.batch_size) {
            let onehots: Vec<Tensor<T>> = chunk.iter().map(|&i| data.onehots[i].clone()).collect();
            let images: Vec<Tensor<T>> = chunk.iter().map(|&i| data.images[i].clone()).collect();
            let batch = Batch {
                onehot: Tensor::stack(&onehots)?,
                real: Tensor::stack(&images)?,
            };
            let losses = self.step(&batch)?;
            on_step(&losses);
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut params = Vec::new();
        for (name, p) in named_params(&self.gen, "gen") {
            params.push((name, p.clone()));
        }
        for (name, p) in named_params(&self.dis, "dis") {
            params.push((name, p.clone()));
        }
        let mut opt = Vec::new();
        for (label, model_prefix, state) in [
            ("opt_g", "gen", &self.opt_g),
            ("opt_d", "dis", &self.opt_d),
        ] {
            let names: Vec<String> = match model_prefix {
                "gen" => named_params(&self.gen, model_prefix).into_iter().map(|(n, _)| n).collect(),
                _ => named_params(&self.dis, model_prefix).into_iter().map(|(n, _)| n).collect(),
            };
            for (kind, buffers) in [("m", &state.m), ("v", &state.v)] {
                for (name, b) in names.iter().zip(buffers) {
                    opt.push((format!("{label}.{kind}.{name}"), b.clone()));
                }
            }
        }
        Checkpoint {
            params,
            opt,
            t_g: self.opt_g.t,
            t_d: self.opt_d.t,
            rng: RngSnapshot {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            epoch: self.epoch,
        }
    }

    pub fn from_checkpoint(
        gen_cfg: GeneratorConfig,
        cfg: TrainConfig,
        ckpt: &Checkpoint<T>,
    ) -> Result<Self> {
        let mut tr = Trainer::new(gen_cfg, cfg)?;
        let mut it = ckpt.params.iter();
        assign(&mut tr.gen, "gen", &mut it)?;
        assign(&mut tr.dis, "dis", &mut it)?;
        if let Some((name, _)) = it.next() {
            return Err(Error::Invalid(format!("checkpoint has extra parameter {name}")));
        }
        let mut it = ckpt.opt.iter();
        assign_opt(&mut tr.opt_g, "opt_g", &mut it)?;
        assign_opt(&mut tr.opt_d, "opt_d", &mut it)?;
        if let Some((name, _)) = it.next() {
            return Err(Error::Invalid(format!("checkpoint has extra buffer {name}")));
        }
        tr.opt_g.t = ckpt.t_g;
        tr.opt_d.t = ckpt.t_d;
        tr.rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        tr.rng.set_stream(ckpt.rng.stream);
        tr.rng.set_word_pos(ckpt.rng.word_pos);
        tr.epoch = ckpt.epoch;
        Ok(tr)
    }
}

fn assign<'a, T: Scalar, M: Params<T>>(
    model: &mut M,
    prefix: &str,
    entries: &mut std::slice::Iter<'a, (String, Tensor<T>)>,
) -> Result<()> {
    let mut err = None;
    model.visit_mut(prefix, &mut |name, p| {
        if err.is_some() {
            return;
        }
        match entries.next() {
            Some((n, t)) if *n == name && t.shape() == p.shape() => *p = t.detach(),
            Some((n, t)) => {
                err = Some(Error::Invalid(format!(
                    "checkpoint entry {n} {:?} does not match model parameter {name} {:?}",
                    t.shape(),
                    p.shape()
                )))
            }
            None => err = Some(Error::Invalid(format!("checkpoint is missing {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn assign_opt<'a, T: Scalar>(
    state: &mut AdamState<T>,
    label: &str,
    entries: &mut std::slice::Iter<'a, (String, Tensor<T>)>,
) -> Result<()> {
    for (kind, buffers) in [("m", &mut state.m), ("v", &mut state.v)] {
        for b in buffers.iter_mut() {
            match entries.next() {
                Some((n, t)) if n.starts_with(&format!("{label}.{kind}.")) && t.shape() == b.shape() => {
                    *b = t.detach();
                }
                Some((n, _)) => {
                    return Err(Error::Invalid(format!(
                        "checkpoint buffer {n} does not match expected {label}.{kind} entry"
                    )))
                }
                None => {
                    return Err(Error::Invalid(format!(
                        "checkpoint is missing an {label}.{kind} buffer"
                    )))
                }
            }
        }
    }
    Ok(())
}
