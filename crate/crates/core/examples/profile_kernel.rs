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
    println!("shell size = {}", env.shell.len());
    let v = VertexSpec::density_density();
    let ext_pat = vec![
        (FieldSign::Plus, 0i8, MomExpr::sym(0)),
        (FieldSign::Minus, 0, MomExpr::sym(0)),
    ];
    let second = cluster_diagrams(&[&v, &v], &ext_pat);
    println!("second-order classes: {}", second.len());
    let kk = Momentum::new(0.001, 0.0);
    let ext = [kk, kk, kk];
    for (i, d) in second.iter().enumerate() {
        let t = Instant::now();
        let val = eval_diagram(d, &env, &ext);
        let n_mixed = d.edges.iter().enumerate().filter(|(j, e)| !d.free.contains(j) && matches!(e.kind, EdgeKind::Prop{..}) && (e.expr.depends_on(FREE0) || e.expr.depends_on(FREE1))).count();
        println!("class {i}: coeff {:+.2} frees {:?} mixed-solved {} -> {:?} val {:.3e}", d.coeff, d.free, n_mixed, t.elapsed(), val.norm());
    }
}
