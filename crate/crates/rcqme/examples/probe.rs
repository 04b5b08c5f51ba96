use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;
use std::time::Instant;

fn main() {
    // 1. nalgebra SymmetricEigen on a complex Hermitian matrix
    let n = 6;
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let re = (i * j) as f64 * 0.3 - i as f64;
            let im = i as f64 - j as f64;
            m[(i, j)] = Complex64::new(re, im * 0.2);
        }
    }
    let herm = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = herm.clone().symmetric_eigen();
    println!("eigenvalues: {:?}", eig.eigenvalues.as_slice());
    // reconstruct
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| Complex64::new(x, 0.0)));
    let rec = &eig.eigenvectors * d * eig.eigenvectors.adjoint();
    let err = (&rec - &herm).iter().map(|z| z.norm()).fold(0.0, f64::max);
    println!("reconstruction max err: {err:.3e}");
    let uu = eig.eigenvectors.adjoint() * &eig.eigenvectors;
    let uerr = (0..n).flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (uu[(i, j)] - if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) }).norm())
        .fold(0.0, f64::max);
    println!("unitarity max err: {uerr:.3e}");

    // 2. bigger: 100x100 Hermitian eigen timing
    let n = 100;
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = Complex64::new(((i * 7 + j * 13) % 17) as f64, ((i + 2 * j) % 5) as f64 - 2.0);
        }
    }
    let herm = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let t0 = Instant::now();
    let eig = herm.clone().symmetric_eigen();
    println!("100x100 eigen: {:?}", t0.elapsed());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| Complex64::new(x, 0.0)));
    let rec = &eig.eigenvectors * d * eig.eigenvectors.adjoint();
    let err = (&rec - &herm).iter().map(|z| z.norm()).fold(0.0, f64::max);
    println!("100x100 reconstruction max err: {err:.3e}");

    // 3. ndarray complex matmul speed, 100x100
    let a = Array2::<Complex64>::from_shape_fn((100, 100), |(i, j)| Complex64::new(i as f64, j as f64) * 0.01);
    let b = a.t().to_owned();
    let t0 = Instant::now();
    let mut acc = Complex64::new(0.0, 0.0);
    let reps = 2000;
    for _ in 0..reps {
        let c = a.dot(&b);
        acc += c[(0, 0)];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = reps as f64 * 8.0 * 100f64.powi(3) / dt / 1e9;
    println!("ndarray zgemm 100x100: {:.3} ms/mult, ~{flops:.2} GFLOP/s ({acc})", dt / reps as f64 * 1e3);
}
