use lpsv_core::cirlab::CirPath;
use lpsv_core::pde1d::{solve_conditional_spde, solve_conditional_spde_with, Grid1D, Pde1dOptions};
use lpsv_core::transport::TransportScheme;
use lpsv_core::{ModelParams, NoiseBundle, SeedLineage};

fn constant_h(c: f64, rho1: f64) -> ModelParams {
    ModelParams {
        h_lo: c,
        h_hi: c,
        r: 0.03,
        rho1,
        ..ModelParams::unit_benchmark()
    }
}

fn l1(grid: &Grid1D, a: &[f64], b: &[f64]) -> f64 {
    grid.integrate(
        &a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .collect::<Vec<_>>(),
    )
}

fn scenario_mean_distances(scheme: TransportScheme, targets: &[usize]) -> Vec<f64> {
    let (dt, n_steps) = (5e-4, 1000);
    let grid = Grid1D::new(3.0, 100, dt).unwrap();
    let u0 = grid.sample(|x| 2.4 * x * (-12.0 * (x - 0.8).powi(2)).exp());
    let path = CirPath {
        dt,
        sigma: vec![1.0; n_steps + 1],
        scenario: 0,
        particle: 0,
    };
    let averaged_eq = solve_conditional_spde(
        &constant_h(0.4, 0.0),
        &path,
        &vec![0.0; n_steps],
        &grid,
        &u0,
    )
    .unwrap()
    .last()
    .unwrap()
    .to_vec();

    let p = constant_h(0.4, 0.6);
    let opts = Pde1dOptions {
        scheme,
        record_every: n_steps,
    };
    let lineage = SeedLineage::new(21);
    let mut sum = vec![0.0; grid.n_x + 1];
    let mut out = Vec::new();
    let mut count = 0;
    for &target in targets {
        while count < target {
            let noise = NoiseBundle::generate(lineage, count as u64, dt, n_steps, 0.0).unwrap();
            let sol =
                solve_conditional_spde_with(&p, &path, &noise.common_w0, &grid, &u0, opts).unwrap();
            for (s, v) in sum.iter_mut().zip(sol.last().unwrap()) {
                *s += v;
            }
            count += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        out.push(l1(&grid, &mean, &averaged_eq));
    }
    out
}

#[test]
fn scenario_average_approaches_the_averaged_equation() {
    let d = scenario_mean_distances(TransportScheme::Limited, &[16, 256, 4096]);
    assert!(d[0] > d[1] && d[1] > d[2], "L1 distances {d:?}");
    assert!(d[2] < 0.01, "L1 distances {d:?}");
}

#[test]
fn upwind_transport_overdiffuses_the_average() {
    // The first-order transport adds numerical diffusion of order Δx/√dt,
    // so its scenario average stalls at a visible bias.
    let lim = scenario_mean_distances(TransportScheme::Limited, &[256]);
    let up = scenario_mean_distances(TransportScheme::Upwind, &[256]);
    assert!(up[0] > 4.0 * lim[0], "upwind {up:?} limited {lim:?}");
}
