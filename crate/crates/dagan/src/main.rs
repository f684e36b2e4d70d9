//! Command-line surface: dataset generation, training, synthesis, evaluation,
//! attention export, the gradient suite, and parameter accounting.

use dagan::config::{from_args, Config};
use dagan::data::{generate_layout, one_hot, oracle_segment, render, Layout};
use dagan::error::{Error, Result};
use dagan::losses::FixedExtractor;
use dagan::metrics::{frechet_distance, miou, pixel_acc, GaussianStats};
use dagan::model::{generator_forward, DiscriminatorState, GeneratorState};
use dagan::netpbm::{load_image, load_layout, save_image, save_layout};
use dagan::nn::{param_count, InitStream};
use dagan::tensor::{Dtype, Scalar, Tape, Tensor};
use dagan::train::{build_dataset, Trainer, DIS_SCALES, EXTRACTOR_SEED};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

const USAGE: &str = "usage: dagan <command> [--config FILE] [--key value]...

commands:
  gen-data    write layout/image pairs for the train and test splits
  train       run adversarial training, emit a log and a final checkpoint
  synthesize  render images for every layout in --layouts via --ckpt
  eval        mIoU/Acc (and Fréchet when images are present) of --preds vs --gts
  attn-viz    export attention maps of scene --scene_index via --ckpt
  gradcheck   run the finite-difference gradient suite
  params      print generator/discriminator/total parameter counts";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(match run(&args) {
        Ok(()) => 0,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    });
}

fn run(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        return Err(Error::Usage("no command given".into()));
    };
    let cfg = from_args(&args[1..])?;
    match command.as_str() {
        "gen-data" => gen_data(&cfg),
        "train" => match cfg.dtype()? {
            Dtype::F32 => train::<f32>(&cfg),
            Dtype::F64 => train::<f64>(&cfg),
        },
        "synthesize" => match cfg.dtype()? {
            Dtype::F32 => synthesize::<f32>(&cfg),
            Dtype::F64 => synthesize::<f64>(&cfg),
        },
        "eval" => eval(&cfg),
        "attn-viz" => match cfg.dtype()? {
            Dtype::F32 => attn_viz::<f32>(&cfg),
            Dtype::F64 => attn_viz::<f64>(&cfg),
        },
        "gradcheck" => gradcheck_cmd(),
        "params" => params_cmd(&cfg),
        other => Err(Error::Usage(format!("unknown command `{other}`"))),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::Invalid(format!("cannot create {}: {e}", path.display())))
}

fn gen_data(cfg: &Config) -> Result<()> {
    let scene = cfg.scene()?;
    let out = PathBuf::from(cfg.path("out_dir")?);
    let splits = [
        ("train", 0, cfg.usize("train_count")?),
        ("test", cfg.usize("train_count")?, cfg.usize("test_count")?),
    ];
    for (split, start, count) in splits {
        let dir = out.join(split);
        ensure_dir(&dir)?;
        for i in start..start + count {
            let layout = generate_layout(&scene, i);
            let image = render::<f64>(&layout);
            save_layout(&dir.join(format!("scene_{i:04}.pgm")), &layout)?;
            save_image(&dir.join(format!("scene_{i:04}.ppm")), &image)?;
        }
        println!("{split}: {count} scenes in {}", dir.display());
    }
    Ok(())
}

fn train<T: Scalar>(cfg: &Config) -> Result<()> {
    let out = PathBuf::from(cfg.path("out_dir")?);
    ensure_dir(&out)?;
    let scene = cfg.scene()?;
    let data = build_dataset::<T>(&scene, 0, cfg.usize("train_count")?)?;
    let mut trainer = Trainer::<T>::new(cfg.generator()?, cfg.train()?)?;

    let log_path = out.join("train.log");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path)
            .map_err(|e| Error::Invalid(format!("cannot create {}: {e}", log_path.display())))?,
    );
    let epochs = trainer.cfg.epochs;
    for _ in 0..epochs {
        let mut lines = Vec::new();
        trainer.run_epoch(&data, |r| lines.push(r.to_string()))?;
        for line in &lines {
            writeln!(log, "{line}").map_err(Error::from)?;
        }
        log.flush().map_err(Error::from)?;
    }
    let ckpt_path = out.join("final.ckpt");
    dagan::checkpoint::save_checkpoint(&ckpt_path, &trainer.to_checkpoint())?;
    println!("trained {epochs} epochs; checkpoint {}", ckpt_path.display());
    Ok(())
}

fn load_trainer<T: Scalar>(cfg: &Config) -> Result<Trainer<T>> {
    let ckpt = dagan::checkpoint::load_checkpoint::<T>(Path::new(cfg.path("ckpt")?))?;
    Trainer::from_checkpoint(cfg.generator()?, cfg.train()?, &ckpt)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|s| s.to_str()) == Some(ext))
        .collect();
    files.sort();
    Ok(files)
}

fn synthesize<T: Scalar>(cfg: &Config) -> Result<()> {
    let trainer = load_trainer::<T>(cfg)?;
    let out = PathBuf::from(cfg.path("out_dir")?);
    ensure_dir(&out)?;
    let layout_files = sorted_files(Path::new(cfg.path("layouts")?), "pgm")?;
    if layout_files.is_empty() {
        return Err(Error::Invalid("no .pgm layouts found".into()));
    }
    let k = trainer.gen_cfg.num_classes;
    for path in &layout_files {
        let layout = load_layout(path)?;
        let hot = one_hot::<T>(&layout, k)?;
        let batched = Tensor::from_vec(
            vec![1, k, layout.h, layout.w],
            hot.data().to_vec(),
        )?;
        let mut tape = Tape::new();
        let (fake, _) = generator_forward(&mut tape, &batched, &trainer.gen)?;
        let image = fake.slice0(0)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
        save_image(&out.join(format!("{stem}.ppm")), &image)?;
    }
    println!("synthesized {} images in {}", layout_files.len(), out.display());
    Ok(())
}

/// A directory's layouts keyed by file stem: explicit .pgm files win, and any
/// .ppm image without one is segmented by the oracle.
fn layouts_of(dir: &Path, k: usize) -> Result<BTreeMap<String, Layout>> {
    let mut map = BTreeMap::new();
    for path in sorted_files(dir, "ppm")? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let image = load_image::<f64>(&path)?;
        map.insert(stem, oracle_segment(&image, k)?);
    }
    for path in sorted_files(dir, "pgm")? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        map.insert(stem, load_layout(&path)?);
    }
    if map.is_empty() {
        return Err(Error::Invalid(format!("no .pgm or .ppm files in {}", dir.display())));
    }
    Ok(map)
}

fn embeddings_of(dir: &Path, e: &FixedExtractor<f64>) -> Result<Vec<Vec<f64>>> {
    sorted_files(dir, "ppm")?
        .iter()
        .map(|p| e.embedding(&load_image::<f64>(p)?))
        .collect()
}

fn eval(cfg: &Config) -> Result<()> {
    let k = cfg.usize("num_classes")?;
    let preds_dir = Path::new(cfg.path("preds")?);
    let gts_dir = Path::new(cfg.path("gts")?);
    let preds = layouts_of(preds_dir, k)?;
    let gts = layouts_of(gts_dir, k)?;

    let mut pl = Vec::new();
    let mut gl = Vec::new();
    for (stem, layout) in &preds {
        let Some(gt) = gts.get(stem) else {
            return Err(Error::Invalid(format!("no ground truth for `{stem}`")));
        };
        pl.push(layout.clone());
        gl.push(gt.clone());
    }
    let (m, _) = miou(&pl, &gl, k)?;
    let acc = pixel_acc(&pl, &gl, k)?;
    println!("miou {m:.6}");
    println!("acc {acc:.6}");

    let e = FixedExtractor::<f64>::new(EXTRACTOR_SEED);
    let pe = embeddings_of(preds_dir, &e)?;
    let ge = embeddings_of(gts_dir, &e)?;
    if pe.len() >= 2 && ge.len() >= 2 {
        let d = frechet_distance(&GaussianStats::from_samples(&pe)?, &GaussianStats::from_samples(&ge)?)?;
        println!("frechet {d:.6}");
    }
    Ok(())
}

fn attn_viz<T: Scalar>(cfg: &Config) -> Result<()> {
    let trainer = load_trainer::<T>(cfg)?;
    let out = PathBuf::from(cfg.path("out_dir")?);
    ensure_dir(&out)?;
    let scene = cfg.scene()?;
    let layout = generate_layout(&scene, cfg.usize("scene_index")?);
    let hot = one_hot::<T>(&layout, scene.num_classes)?;
    let batched = Tensor::from_vec(vec![1, scene.num_classes, layout.h, layout.w], hot.data().to_vec())?;
    let mut tape = Tape::new();
    let (_, maps) = generator_forward(&mut tape, &batched, &trainer.gen)?;
    let written = dagan::viz::export_maps(&maps, &out)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn gradcheck_cmd() -> Result<()> {
    let checks = dagan::gradcheck::run_suite()?;
    let mut failed = 0;
    for c in &checks {
        if !c.passed() {
            failed += 1;
            println!("FAIL {} rel-err {:.3e} tol {:.0e}", c.name, c.max_rel_err, c.tol);
        }
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Error::Invalid(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn params_cmd(cfg: &Config) -> Result<()> {
    let gen_cfg = cfg.generator()?;
    let mut stream = InitStream::new(cfg.train()?.seed);
    let gen = GeneratorState::<f32>::new(&mut stream, &gen_cfg)?;
    let dis = DiscriminatorState::<f32>::new(&mut stream, gen_cfg.num_classes + 3, DIS_SCALES);
    let (g, d) = (param_count(&gen), param_count(&dis));
    println!("generator {g}");
    println!("discriminator {d}");
    println!("total {}", g + d);
    Ok(())
}
