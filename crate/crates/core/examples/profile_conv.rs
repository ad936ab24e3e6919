use fermichain_core::cutoff::CutoffSpec;
use fermichain_core::kernels::*;
use fermichain_core::flow::{FlowConfig, LatticeEnv};
use fermichain_core::grassmann::FieldSign;
use fermichain_core::lattice::{ModelParams, Momentum, Potential};
use fermichain_core::propagator::LatticeScale;
use std::time::Instant;

fn main() {
    let p = ModelParams::new(0.08, 0.0, 2.0, 16, 32.0, 20, Potential::nearest_neighbor()).unwrap();
    let cut = CutoffSpec::new(2.0);
    let config = FlowConfig::default();
    let h = -4;
    let quad = config.kernel_quad(h, 2.0);
    let env = LatticeEnv::new(&p, &cut, LatticeScale::free(h, 0.0), quad);
    let v = VertexSpec::density_density();
    let ext_pat = vec![
        (FieldSign::Plus, 0i8, MomExpr::sym(0)),
        (FieldSign::Minus, 0, MomExpr::sym(0)),
    ];
    let second = cluster_diagrams(&[&v, &v], &ext_pat);
    // box
    let t0 = Instant::now();
    let reach0 = 2f64.powi(h + 1) * 0.25 * 2.0 * 1.05;
    let kmax = env.shell.iter().map(|(kk, _)| kk.k.abs()).fold(0.0f64, f64::max) * 1.05 + 2.0 * env.quad.dk();
    let d0 = env.quad.dk0();
    let d1 = env.quad.dk();
    let n0 = (2.0 * reach0 / d0).ceil() as usize + 2;
    let n1 = (2.0 * kmax / d1).ceil() as usize + 2;
    let grid = BoxGrid { k0_min: -reach0, k_min: -kmax, d0, d1, n0, n1 };
    let mut table = vec![num_complex::Complex64::new(0.0, 0.0); n0 * n1];
    for i in 0..n0 { for j in 0..n1 { table[i*n1+j] = KernelEnv::propagator(&env, 0, grid.point(i, j)); } }
    println!("box {}x{} tabulated in {:?}", n0, n1, t0.elapsed());
    let kk = Momentum::new(0.001, 0.0);
    let exts = vec![[kk, kk, kk]];
    let boxes = |_o: i8| (grid, table.clone());
    for (i, d) in second.iter().enumerate() {
        let t = Instant::now();
        let r = eval_diagram_convolved(d, &env, Some(&p.potential), &boxes, &exts);
        println!("class {i}: conv {:?} -> {:?}", r.as_ref().map(|v| v[0].norm()), t.elapsed());
    }
}
