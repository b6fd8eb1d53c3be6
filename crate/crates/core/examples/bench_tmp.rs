use std::time::Instant;

fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi = a.mul_add(*xi, *yi);
    }
}

fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(crow, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
}

fn main() {
    // Encoder L0 conv2 shape at 32^3: w[8, 8*27], cols[8*27, 32768]
    let (m, k, n) = (8usize, 216usize, 32768usize);
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        gemm(&a, &b, &mut c, m, k, n);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let gflop = (2.0 * (m * k * n) as f64) / dt / 1e9;
    println!("gemm {m}x{k}x{n}: {:.1} ms/call, {gflop:.2} GFLOP/s (sink {})", dt * 1e3, c[0]);

    // decoder L3->L2 style: m=32, k=64*27, n=512 (8^3)
    let (m2, k2, n2) = (32usize, 1728usize, 512usize);
    let a2 = vec![0.5f32; m2 * k2];
    let b2 = vec![0.25f32; k2 * n2];
    let mut c2 = vec![0.0f32; m2 * n2];
    let t = Instant::now();
    for _ in 0..reps {
        gemm(&a2, &b2, &mut c2, m2, k2, n2);
    }
    let dt2 = t.elapsed().as_secs_f64() / reps as f64;
    println!("gemm {m2}x{k2}x{n2}: {:.1} ms/call, {:.2} GFLOP/s", dt2 * 1e3, (2.0 * (m2 * k2 * n2) as f64) / dt2 / 1e9);
}
