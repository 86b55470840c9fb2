//! Throughput check for the GEMM kernels at the shapes the conv path hits.
use ascent::numerics::gemm::{gemm_nn, gemm_nt, gemm_tn};
use std::time::Instant;

fn bench(name: &str, flops_per_rep: f64, mut f: impl FnMut()) {
    let reps = 300;
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("{name}: {:.2} GF/s", flops_per_rep * reps as f64 / dt / 1e9);
}

fn main() {
    // forward conv shape: weights [64, 576] x col [576, 1024]
    let (m, k, n) = (64, 576, 1024);
    let a = vec![1.0f64; m * k];
    let b = vec![1.0f64; k * n];
    let mut c = vec![0.0f64; m * n];
    bench("gemm_nn  64x576x1024", 2.0 * (m * k * n) as f64, || {
        gemm_nn(m, k, n, &a, &b, &mut c)
    });

    // dX shape: W^T [576, 64] x dOut [64, 1024]
    let a2 = vec![1.0f64; 64 * 576];
    let b2 = vec![1.0f64; 64 * 1024];
    let mut c2 = vec![0.0f64; 576 * 1024];
    bench("gemm_tn 576x64x1024 ", 2.0 * (576 * 64 * 1024) as f64, || {
        gemm_tn(576, 64, 1024, &a2, &b2, &mut c2)
    });

    // dW shape: dOut [64, 1024] x col^T [1024, 576]
    let a3 = vec![1.0f64; 64 * 1024];
    let b3 = vec![1.0f64; 576 * 1024];
    let mut c3 = vec![0.0f64; 64 * 576];
    bench("gemm_nt 64x1024x576 ", 2.0 * (64 * 1024 * 576) as f64, || {
        gemm_nt(64, 1024, 576, &a3, &b3, &mut c3)
    });

    // backbone token shape
    let a4 = vec![1.0f64; 65 * 64];
    let b4 = vec![1.0f64; 64 * 64];
    let mut c4 = vec![0.0f64; 65 * 64];
    bench("gemm_nn  65x64x64   ", 2.0 * (65 * 64 * 64) as f64, || {
        gemm_nn(65, 64, 64, &a4, &b4, &mut c4)
    });
}
