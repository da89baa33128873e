// Rough throughput probe for the matrix kernels (not a criterion bench).
use liverfat::ops;
use std::time::Instant;

fn bench(name: &str, flops_per_rep: usize, mut f: impl FnMut()) {
    let reps = ((2e9 / flops_per_rep as f64) as usize).max(1);
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    let dt = t.elapsed().as_secs_f64();
    println!("{name}: {:.1} GFLOP/s", (flops_per_rep * reps) as f64 / dt / 1e9);
}

fn main() {
    for (m, k, n) in [(16usize, 144usize, 8192usize), (32, 288, 2048), (64, 576, 512)] {
        let a = vec![1.0f32; m * k];
        let b = vec![1.0f32; k * n];
        let bt = vec![1.0f32; n * k];
        let at = vec![1.0f32; k * m];
        let mut c = vec![0.0f32; m * n];
        let fl = 2 * m * k * n;
        bench(&format!("matmul    {m}x{k}x{n}"), fl, || ops::matmul(&a, &b, &mut c, m, k, n));
        bench(&format!("matmul_nt {m}x{k}x{n}"), fl, || ops::matmul_nt(&a, &bt, &mut c, m, k, n));
        bench(&format!("matmul_tn {m}x{k}x{n}"), fl, || ops::matmul_tn(&at, &b, &mut c, m, k, n));
    }
}
