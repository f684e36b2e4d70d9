//! Throughput check for the convolution kernels at training-relevant shapes.
//!
//!     cargo run --release -p dagan --example conv_bench

use std::time::Instant;

use dagan::nn::InitStream;
use dagan::tensor::{Tape, Tensor};

#[allow(clippy::too_many_arguments)]
fn bench(label: &str, n: usize, cin: usize, cout: usize, hw: usize, k: usize, stride: usize, reps: usize) {
    let mut stream = InitStream::new(1);
    let pad = k / 2;
    let x = Tensor::<f32>::from_vec(
        vec![n, cin, hw, hw],
        (0..n * cin * hw * hw).map(|_| (stream.unit() as f32) - 0.5).collect(),
    )
    .unwrap();
    let w = stream.conv_weight::<f32>(cout, cin, k);
    let b = Tensor::zeros(vec![cout]);

    // Forward only, untracked.
    let mut scratch = Tape::new();
    let y0 = scratch.conv2d(&x, &w, &b, stride, pad, 1).unwrap();
    let (oh, ow) = (y0.shape()[2], y0.shape()[3]);
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(scratch.conv2d(&x, &w, &b, stride, pad, 1).unwrap());
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    // Full tracked cycle: forward + backward through one conv node.
    let t1 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let xt = tape.leaf(&x).unwrap();
        let wt = tape.leaf(&w).unwrap();
        let bt = tape.leaf(&b).unwrap();
        let y = tape.conv2d(&xt, &wt, &bt, stride, pad, 1).unwrap();
        let loss = tape.mean_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        std::hint::black_box(g.wrt(&wt));
    }
    let cycle = t1.elapsed().as_secs_f64() / reps as f64;

    let macs = (n * cout * oh * ow * cin * k * k) as f64;
    println!(
        "{label:<28} fwd {:7.2} ms  {:6.1} GFLOP/s   fwd+bwd {:7.2} ms  {:6.1} GFLOP/s",
        fwd * 1e3,
        2.0 * macs / fwd / 1e9,
        cycle * 1e3,
        6.0 * macs / cycle / 1e9,
    );
}

fn main() {
    // Decoder-scale convs at batch 4, 64x64.
    bench("fuse 192->64 k3 64x64", 4, 192, 64, 64, 3, 1, 5);
    bench("decoder 64->64 k3 64x64", 4, 64, 64, 64, 3, 1, 10);
    bench("cam 16->64 k3 64x64", 4, 16, 64, 64, 3, 1, 10);
    bench("cam 32->64 k3 64x64", 4, 32, 64, 64, 3, 1, 10);
    bench("out 64->3 k3 64x64", 4, 64, 3, 64, 3, 1, 10);
    bench("sam 2->1 k7 64x64", 4, 2, 1, 64, 7, 1, 10);
    // Encoder / discriminator stride-2 shapes (generic path).
    bench("enc 5->16 k3 s2 64x64", 4, 5, 16, 64, 3, 2, 10);
    bench("enc 16->32 k3 s2 32x32", 4, 16, 32, 32, 3, 2, 10);
    bench("enc 32->64 k3 s2 16x16", 4, 32, 64, 16, 3, 2, 10);
    bench("dis 8->16 k3 s2 64x64", 4, 8, 16, 64, 3, 2, 10);
}
