use rcqme::exact::decoherence_exact;
use rcqme::spectra::BrownianParams;
use std::f64::consts::PI;

fn gamma_integrand(w: f64, t: f64, p: &BrownianParams, beta: f64) -> f64 {
    let j = {
        let (big, g, l) = (p.omega_rc(), p.gamma(), p.lam());
        let num = 4.0 * w * big * big * l * l * g / PI;
        let d1 = w * w - big * big;
        let d2 = 2.0 * g * big * w;
        num / (d1 * d1 + d2 * d2)
    };
    let coth = 1.0 / (0.5 * beta * w).tanh();
    let s = (0.5 * w * t).sin();
    j * coth * 2.0 * s * s / (w * w)
}

fn riemann(t: f64, p: &BrownianParams, beta: f64, n: usize) -> f64 {
    let (lo, hi) = (1e-8, 1e3);
    let h = (hi - lo) / n as f64;
    let mut sum = 0.0;
    let mut c = 0.0;
    for i in 0..n {
        let w = lo + (i as f64 + 0.5) * h;
        let v = gamma_integrand(w, t, p, beta);
        let y = v - c;
        let tt = sum + y;
        c = (tt - sum) - y;
        sum = tt;
    }
    -4.0 * sum * h
}

fn main() {
    let p = BrownianParams::new(3.0, 0.1, 0.1).unwrap();
    let r7 = riemann(1.0, &p, 2.0, 10_000_000);
    let r8 = riemann(1.0, &p, 2.0, 100_000_000);
    println!("riemann 1e7 : {r7:.15e}");
    println!("riemann 1e8 : {r8:.15e}");
    match decoherence_exact(1.0, &p, 2.0, 1e-10) {
        Ok(q) => println!("quadrature  : {q:.15e}  (rel diff vs 1e7: {:.2e})", (q - r7).abs() / r7.abs()),
        Err(e) => println!("quadrature FAILED: {e}"),
    }
}
