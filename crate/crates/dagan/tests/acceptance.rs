//! Acceptance gate: one test per release criterion, each printing a PASS line
//! with its measured numbers. The ablation runs dominate the wall time; they
//! execute once and every dependent criterion reads the shared results.

use dagan::attention::{cam_forward, sam_forward, CamState, ChannelGate, SamState};
use dagan::checkpoint::{decode, encode};
use dagan::data::{oracle_segment, Layout};
use dagan::losses::FixedExtractor;
use dagan::metrics::{frechet_distance, miou, pixel_acc, GaussianStats};
use dagan::model::{
    generator_forward, AttentionConfig, DiscriminatorState, GeneratorConfig, GeneratorState,
};
use dagan::nn::{param_count, InitStream};
use dagan::tensor::{Tape, Tensor};
use dagan::train::{build_dataset, Dataset, TrainConfig, Trainer, DIS_SCALES, EXTRACTOR_SEED};
use dagan::{netpbm, Error};
use rand_core::{RngCore, SeedableRng};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

const NUM_CLASSES: usize = 5;
const IMAGE_HW: (usize, usize) = (64, 64);
const TRAIN_SCENES: usize = 200;
const TEST_SCENES: usize = 50;
const EPOCHS: u32 = 40;
const SEEDS: [u64; 3] = [1, 2, 3];
const MAX_CONFIG_SECS: f64 = 30.0 * 60.0;

fn scene() -> dagan::data::SceneConfig {
    dagan::data::SceneConfig { num_classes: NUM_CLASSES, image_hw: IMAGE_HW, seed: 1 }
}

fn gen_config(attention: AttentionConfig) -> GeneratorConfig {
    GeneratorConfig {
        num_classes: NUM_CLASSES,
        image_hw: IMAGE_HW,
        widths: vec![16, 32, 64, 64],
        attention,
    }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, epochs: EPOCHS, ..TrainConfig::default() }
}

struct RunResult {
    miou: f64,
    acc: f64,
    frechet0: f64,
    frechet_final: f64,
    train_secs: f64,
    log: Vec<u8>,
    ckpt: Vec<u8>,
}

struct Suite {
    b1: Vec<RunResult>,
    b5: Vec<RunResult>,
    b6: Vec<RunResult>,
    b6_rerun: RunResult,
}

fn synthesize(gen: &GeneratorState<f32>, onehots: &[Tensor<f32>]) -> Vec<Tensor<f32>> {
    let mut out = Vec::with_capacity(onehots.len());
    for chunk in onehots.chunks(10) {
        let mut tape = Tape::new();
        let batch = Tensor::stack(chunk).unwrap();
        let (fake, _) = generator_forward(&mut tape, &batch, gen).unwrap();
        for i in 0..chunk.len() {
            out.push(fake.slice0(i).unwrap());
        }
    }
    out
}

fn generated_stats(tr: &Trainer<f32>, onehots: &[Tensor<f32>]) -> GaussianStats {
    let emb: Vec<Vec<f64>> = synthesize(&tr.gen, onehots)
        .iter()
        .map(|im| tr.extractor.embedding(im).unwrap())
        .collect();
    GaussianStats::from_samples(&emb).unwrap()
}

fn run_ablation(
    name: &str,
    attention: AttentionConfig,
    seed: u64,
    train: &Dataset<f32>,
    test: &Dataset<f32>,
    real_stats: &GaussianStats,
) -> RunResult {
    let mut tr = Trainer::<f32>::new(gen_config(attention), train_config(seed)).unwrap();
    let frechet0 = frechet_distance(&generated_stats(&tr, &train.onehots), real_stats).unwrap();

    let mut log = Vec::new();
    let t0 = Instant::now();
    for _ in 0..EPOCHS {
        tr.run_epoch(train, |r| {
            log.extend_from_slice(r.to_string().as_bytes());
            log.push(b'\n');
        })
        .unwrap();
    }
    let train_secs = t0.elapsed().as_secs_f64();

    let frechet_final =
        frechet_distance(&generated_stats(&tr, &train.onehots), real_stats).unwrap();
    let preds: Vec<Layout> = synthesize(&tr.gen, &test.onehots)
        .iter()
        .map(|im| oracle_segment(im, NUM_CLASSES).unwrap())
        .collect();
    let (m, _) = miou(&preds, &test.layouts, NUM_CLASSES).unwrap();
    let acc = pixel_acc(&preds, &test.layouts, NUM_CLASSES).unwrap();
    let ckpt = encode(&tr.to_checkpoint());
    eprintln!(
        "[ablation] {name} seed {seed}: miou {m:.4} acc {acc:.4} \
         frechet {frechet0:.3e} -> {frechet_final:.3e} ({train_secs:.0}s)"
    );
    RunResult { miou: m, acc, frechet0, frechet_final, train_secs, log, ckpt }
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let scene = scene();
        let train = build_dataset::<f32>(&scene, 0, TRAIN_SCENES).unwrap();
        let test = build_dataset::<f32>(&scene, TRAIN_SCENES, TEST_SCENES).unwrap();
        let extractor = FixedExtractor::<f32>::new(EXTRACTOR_SEED);
        let real_emb: Vec<Vec<f64>> =
            train.images.iter().map(|im| extractor.embedding(im).unwrap()).collect();
        let real_stats = GaussianStats::from_samples(&real_emb).unwrap();

        let variant = |name: &str, att: AttentionConfig| -> Vec<RunResult> {
            SEEDS
                .iter()
                .map(|&s| run_ablation(name, att, s, &train, &test, &real_stats))
                .collect()
        };
        let b1 = variant("baseline", AttentionConfig::none());
        let b5 = variant(
            "spatial+fused",
            AttentionConfig { spatial: true, channel: Some(ChannelGate::Fused) },
        );
        let b6 = variant(
            "spatial+backbone",
            AttentionConfig { spatial: true, channel: Some(ChannelGate::Backbone) },
        );
        let b6_rerun = run_ablation(
            "spatial+backbone rerun",
            AttentionConfig { spatial: true, channel: Some(ChannelGate::Backbone) },
            SEEDS[0],
            &train,
            &test,
            &real_stats,
        );
        Suite { b1, b5, b6, b6_rerun }
    })
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_dagan"))
        .arg("gradcheck")
        .output()
        .expect("gradcheck subprocess");
    let secs = t0.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "gradcheck exited nonzero:\n{stdout}");
    assert!(secs < 300.0, "gradcheck took {secs:.1}s, budget 300s");
    println!("criterion 1 PASS: gradcheck exit 0 in {secs:.1}s (budget 300s)");
}

fn fill(shape: &[usize], step: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|i| (i as f64 * step).sin()).collect()).unwrap()
}

#[test]
fn criterion_2_attention_closed_forms() {
    let mut stream = InitStream::new(11);
    let mut sam = SamState::<f64>::new(&mut stream);
    sam.fuse_conv.weight = Tensor::zeros(sam.fuse_conv.weight.shape().to_vec());
    sam.fuse_conv.bias = Tensor::zeros(sam.fuse_conv.bias.shape().to_vec());
    let x = fill(&[2, 6, 5, 5], 0.37);
    let mut tape = Tape::new();
    let (f_s, a_s) = sam_forward(&mut tape, &x, &sam).unwrap();
    assert!(a_s.data().iter().all(|&v| v == 0.5), "A_s must be exactly 0.5");
    for (got, want) in f_s.data().iter().zip(x.data()) {
        assert!(*got == want * 0.5, "F_s must be exactly x/2");
    }

    let mut cam = CamState::<f64>::new(&mut stream, &[4, 6], 6);
    cam.reduce_conv_1.weight = Tensor::zeros(cam.reduce_conv_1.weight.shape().to_vec());
    cam.reduce_conv_1.bias = Tensor::zeros(cam.reduce_conv_1.bias.shape().to_vec());
    cam.reduce_conv_2.weight = Tensor::zeros(cam.reduce_conv_2.weight.shape().to_vec());
    cam.reduce_conv_2.bias = Tensor::zeros(cam.reduce_conv_2.bias.shape().to_vec());
    let f_l = fill(&[2, 6, 5, 5], 0.61);
    let f_t = fill(&[2, 6, 5, 5], 0.23);
    let mut tape = Tape::new();
    let (_, delta) = cam_forward(&mut tape, &f_t, &f_l, &cam, ChannelGate::Backbone).unwrap();
    assert!(delta.data().iter().all(|&v| v == 0.5), "delta must be exactly 0.5");

    let cam = CamState::<f64>::new(&mut stream, &[4, 6], 6);
    let mut tape = Tape::new();
    let (fused, _) = cam_forward(&mut tape, &f_l, &f_l, &cam, ChannelGate::Fused).unwrap();
    let (backbone, _) = cam_forward(&mut tape, &f_l, &f_l, &cam, ChannelGate::Backbone).unwrap();
    assert_eq!(fused.data(), backbone.data(), "gate variants must coincide on equal streams");
    println!("criterion 2 PASS: A_s = 0.5, delta = 0.5 exact; gate variants coincide exactly");
}

#[test]
fn criterion_3_ablation_direction() {
    let s = suite();
    let mut ok = 0;
    for (i, seed) in SEEDS.iter().enumerate() {
        let up6 = s.b6[i].miou - s.b1[i].miou;
        let up5 = s.b5[i].miou - s.b1[i].miou;
        if up6 >= 0.03 && up5 >= 0.03 {
            ok += 1;
        }
        eprintln!(
            "criterion 3 seed {seed}: baseline {:.4}, +spatial+fused {up5:+.4}, \
             +spatial+backbone {up6:+.4}",
            s.b1[i].miou
        );
    }
    for r in s.b1.iter().chain(&s.b5).chain(&s.b6).chain(std::iter::once(&s.b6_rerun)) {
        assert!(
            r.train_secs < MAX_CONFIG_SECS,
            "a configuration took {:.0}s, budget {MAX_CONFIG_SECS:.0}s",
            r.train_secs
        );
    }
    assert!(ok >= 2, "attention beat the baseline by 0.03 mIoU in only {ok} of 3 seeds");
    println!("criterion 3 PASS: both attention variants ahead by >= 0.03 mIoU in {ok}/3 seeds");
}

#[test]
fn criterion_4_training_sanity() {
    let s = suite();
    for (i, r) in s.b6.iter().enumerate() {
        assert!(
            r.frechet_final < r.frechet0,
            "seed {}: final frechet {:.3e} did not improve on epoch-0 {:.3e}",
            SEEDS[i],
            r.frechet_final,
            r.frechet0
        );
    }
    let acc_ok = s.b6.iter().filter(|r| r.acc >= 0.70).count();
    assert!(acc_ok >= 2, "pixel accuracy >= 0.70 in only {acc_ok} of 3 seeds");
    println!(
        "criterion 4 PASS: frechet fell in 3/3 seeds; accuracy >= 0.70 in {acc_ok}/3 seeds"
    );
}

#[test]
fn criterion_5_determinism() {
    let s = suite();
    assert_eq!(s.b6[0].log, s.b6_rerun.log, "training logs differ between identical runs");
    assert_eq!(s.b6[0].ckpt, s.b6_rerun.ckpt, "checkpoints differ between identical runs");

    let ckpt = decode::<f32>(&s.b6[0].ckpt).unwrap();
    let reloaded = Trainer::from_checkpoint(
        gen_config(AttentionConfig { spatial: true, channel: Some(ChannelGate::Backbone) }),
        train_config(SEEDS[0]),
        &ckpt,
    )
    .unwrap();
    let resaved = encode(&reloaded.to_checkpoint());
    assert_eq!(s.b6[0].ckpt, resaved, "save/load/save changed checkpoint bytes");
    println!(
        "criterion 5 PASS: identical runs byte-identical ({} log bytes, {} checkpoint bytes); \
         save/load/save stable",
        s.b6[0].log.len(),
        s.b6[0].ckpt.len()
    );
}

#[test]
fn criterion_6_metric_oracles() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(66);
    let k = 4usize;
    for _ in 0..100 {
        let mut random_layout = || Layout {
            h: 8,
            w: 8,
            ids: (0..64).map(|_| (rng.next_u32() as usize % k) as u8).collect(),
        };
        let pred = random_layout();
        let gt = random_layout();

        let mut tp = vec![0u64; k];
        let mut fp = vec![0u64; k];
        let mut fnn = vec![0u64; k];
        let mut hits = 0u64;
        for i in 0..64 {
            let (p, g) = (pred.ids[i] as usize, gt.ids[i] as usize);
            if p == g {
                tp[p] += 1;
                hits += 1;
            } else {
                fp[p] += 1;
                fnn[g] += 1;
            }
        }
        let mut sum = 0.0;
        let mut classes = 0;
        for c in 0..k {
            let union = tp[c] + fp[c] + fnn[c];
            if union > 0 {
                sum += tp[c] as f64 / union as f64;
                classes += 1;
            }
        }
        let brute_miou = sum / classes as f64;
        let brute_acc = hits as f64 / 64.0;

        let preds = [pred];
        let gts = [gt];
        let (m, _) = miou(&preds, &gts, k).unwrap();
        let a = pixel_acc(&preds, &gts, k).unwrap();
        assert_eq!(m, brute_miou, "miou disagrees with pixel-loop recomputation");
        assert_eq!(a, brute_acc, "accuracy disagrees with pixel-loop recomputation");
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(67);
    let mut unit = move || (rng.next_u32() as f64 / u32::MAX as f64) * 2.0 - 1.0;
    for dim in 1..=8 {
        let mu_a: Vec<f64> = (0..dim).map(|_| unit()).collect();
        let mu_b: Vec<f64> = (0..dim).map(|_| unit()).collect();
        let var_a: Vec<f64> = (0..dim).map(|_| unit().abs() + 0.1).collect();
        let var_b: Vec<f64> = (0..dim).map(|_| unit().abs() + 0.1).collect();
        let diag = |mu: &[f64], var: &[f64]| GaussianStats {
            mean: mu.to_vec(),
            cov: (0..dim * dim)
                .map(|i| if i / dim == i % dim { var[i / dim] } else { 0.0 })
                .collect(),
            count: 2,
        };
        let got = frechet_distance(&diag(&mu_a, &var_a), &diag(&mu_b, &var_b)).unwrap();
        let want: f64 = (0..dim)
            .map(|i| {
                (mu_a[i] - mu_b[i]).powi(2) + (var_a[i].sqrt() - var_b[i].sqrt()).powi(2)
            })
            .sum();
        assert!(
            (got - want).abs() < 1e-10,
            "dim {dim}: frechet {got} vs closed form {want}"
        );
    }
    println!(
        "criterion 6 PASS: 100 random pairs match the pixel-loop oracle exactly; \
         diagonal frechet matches the closed form to 1e-10"
    );
}

#[test]
fn criterion_7_codec_conformance() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let (w, h) = (1 + rng.next_u32() as usize % 9, 1 + rng.next_u32() as usize % 9);
        let rgb: Vec<u8> = (0..w * h * 3).map(|_| rng.next_u32() as u8).collect();
        let gray: Vec<u8> = (0..w * h).map(|_| rng.next_u32() as u8).collect();
        let (dw, dh, drgb) = netpbm::decode_ppm(&netpbm::encode_ppm(w, h, &rgb).unwrap()).unwrap();
        assert_eq!((dw, dh, drgb), (w, h, rgb));
        let (dw, dh, dgray) =
            netpbm::decode_pgm(&netpbm::encode_pgm(w, h, &gray).unwrap()).unwrap();
        assert_eq!((dw, dh, dgray), (w, h, gray));
    }

    let golden = netpbm::encode_ppm(1, 1, &[255, 255, 255]).unwrap();
    assert_eq!(golden, b"P6\n1 1\n255\n\xff\xff\xff");

    let tr = Trainer::<f32>::new(
        GeneratorConfig {
            num_classes: 3,
            image_hw: (16, 16),
            widths: vec![4, 6],
            attention: AttentionConfig::none(),
        },
        TrainConfig { seed: 5, epochs: 1, ..TrainConfig::default() },
    )
    .unwrap();
    let bytes = encode(&tr.to_checkpoint());

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(decode::<f32>(&bad), Err(Error::CkptMagic)));
    assert!(matches!(
        decode::<f32>(&bytes[..bytes.len() - 3]),
        Err(Error::CkptTruncated(_))
    ));
    let mut bad = bytes.clone();
    bad[12..14].copy_from_slice(&513u16.to_le_bytes());
    assert!(matches!(decode::<f32>(&bad), Err(Error::CkptFraming { .. })));
    println!(
        "criterion 7 PASS: round trips exact; golden file byte-exact; \
         corrupted checkpoints rejected with framing errors"
    );
}

#[test]
fn criterion_8_parameter_accounting() {
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
    let norm = |c: usize| 2 * c;
    let gen_closed_form = conv(5, 16, 3)
        + norm(16)
        + conv(16, 32, 3)
        + norm(32)
        + conv(32, 64, 3)
        + norm(64)
        + conv(64, 64, 3)
        + norm(64)
        + conv(2, 1, 7)
        + conv(16, 64, 3)
        + conv(32, 64, 3)
        + conv(64, 64, 3)
        + conv(192, 64, 3)
        + conv(128, 32, 1)
        + conv(32, 64, 1)
        + conv(64, 3, 3);
    let dis_closed_form = 2
        * (conv(8, 16, 3)
            + conv(16, 32, 3)
            + norm(32)
            + conv(32, 64, 3)
            + norm(64)
            + conv(64, 1, 3));

    let mut stream = InitStream::new(1);
    let gen = GeneratorState::<f32>::new(
        &mut stream,
        &gen_config(AttentionConfig { spatial: true, channel: Some(ChannelGate::Backbone) }),
    )
    .unwrap();
    let dis = DiscriminatorState::<f32>::new(&mut stream, NUM_CLASSES + 3, DIS_SCALES);
    assert_eq!(param_count(&gen), gen_closed_form);
    assert_eq!(param_count(&dis), dis_closed_form);
    assert_eq!(gen_closed_form, 244_582);
    assert_eq!(dis_closed_form, 50_146);

    let out = Command::new(env!("CARGO_BIN_EXE_dagan"))
        .arg("params")
        .output()
        .expect("params subprocess");
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let expect = format!(
        "generator {gen_closed_form}\ndiscriminator {dis_closed_form}\ntotal {}\n",
        gen_closed_form + dis_closed_form
    );
    assert_eq!(stdout, expect, "params output disagrees with the closed-form layer sum");
    println!(
        "criterion 8 PASS: params prints {gen_closed_form} / {dis_closed_form} / {} \
         matching the closed-form layer sum",
        gen_closed_form + dis_closed_form
    );
}
