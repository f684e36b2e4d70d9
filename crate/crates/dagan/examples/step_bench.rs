use dagan::config::Config;
use dagan::train::{build_dataset, Batch, Trainer};
use dagan::tensor::Tensor;
use std::time::Instant;

fn main() {
    let cfg = Config::default();
    let scene = cfg.scene().unwrap();
    let data = build_dataset::<f32>(&scene, 0, 8).unwrap();
    let mut tr = Trainer::<f32>::new(cfg.generator().unwrap(), cfg.train().unwrap()).unwrap();
    let batch = Batch {
        onehot: Tensor::stack(&data.onehots[..4]).unwrap(),
        real: Tensor::stack(&data.images[..4]).unwrap(),
    };
    // warm up allocator and caches
    tr.step(&batch).unwrap();
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        tr.step(&batch).unwrap();
    }
    let per = t0.elapsed().as_secs_f64() / n as f64;
    println!("{:.3} s/step  -> {:.1} min per 40-epoch 200-scene config", per, per * 50.0 * 40.0 / 60.0);
}
