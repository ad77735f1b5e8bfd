use std::sync::Arc;
use coagscale::grid::SizeGrid;
use coagscale::kernel::KernelSpec;
use coagscale::solver::{solve, SolverConfig};

fn main() {
    for (alpha, xmin, xmax, n, maxit) in [
        (0.25, 1e-6, 1e2, 900usize, 25000usize),
        (0.25, 1e-6, 1e2, 1200, 25000),
    ] {
        let g = Arc::new(SizeGrid::geometric(xmin, xmax, n).unwrap());
        let spec = KernelSpec::new(alpha, 1.0, 1.0).unwrap();
        let cfg = SolverConfig { tol: 1e-10, max_iter: maxit, ..SolverConfig::default() };
        let t0 = std::time::Instant::now();
        match solve(spec, &cfg, &g) {
            Ok((p, r)) => {
                let m = p.moments();
                let gap = (spec.w * m.m0 - m.m_minus_alpha.powi(2)).abs() / m.m_minus_alpha.powi(2);
                println!(
                    "alpha={alpha} n={n}: conv={} iters={} momgap={:.1e} b99={:+.2e} B2={:.2e} t={:.1?}",
                    r.converged, r.iterations, gap, r.b99_gap.unwrap_or(f64::NAN),
                    r.residual_norms["B2"], t0.elapsed()
                );
            }
            Err(e) => println!("alpha={alpha} n={n}: ERROR {e}"),
        }
    }
}
