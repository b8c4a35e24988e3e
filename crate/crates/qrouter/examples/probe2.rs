use qrouter::calib::*;
use qrouter::device::*;
use qrouter::dynamics::Simulator;
use qrouter::{to_ghz, to_mhz};
use std::time::Instant;

fn main() {
    let (cfg, _) = fitted_paper_device().clone();
    let sim = Simulator::from_device(&cfg).unwrap();
    // alternates
    for (pair, n) in [(IoPair::Io1, 1u32), (IoPair::Io2, 2u32)] {
        let cal = SidebandCalibrator::new(&sim, pair, SidebandCalOptions::default()).unwrap();
        let t0 = Instant::now();
        match cal.calibrate(n) {
            Ok((gate, wp)) => println!(
                "{} n={}: t_pi = {:.1} ns, g_eff = {:.3} MHz, ok in {:?}",
                pair.tag(), n, wp.gate_time, to_mhz(wp.g_eff), t0.elapsed()
            ),
            Err(e) => println!("{} n={} FAILED: {e}", pair.tag(), n),
        }
    }
    // single-qubit: switch X90 (robust), input X90 both contexts
    let opts = SingleQubitCalOptions::default();
    let t0 = Instant::now();
    match calibrate_x90(&sim, &cfg, Role::Switch, None, None, &opts) {
        Ok(g) => println!("x90_S: f = {:.6} GHz, vz = {:.4} rad in {:?}", to_ghz(g.pulse.carrier_freq), g.virtual_z, t0.elapsed()),
        Err(e) => println!("x90_S FAILED: {e}"),
    }
    let shape = robust_shape_for(&cfg, Role::Input, 20.0, &Default::default()).unwrap();
    for ctx in [0usize, 1] {
        let t0 = Instant::now();
        match calibrate_x90(&sim, &cfg, Role::Input, Some((Role::Switch, ctx)), Some(shape.clone()), &opts) {
            Ok(g) => println!("{}: f = {:.6} GHz, vz = {:.4} in {:?}", g.name, to_ghz(g.pulse.carrier_freq), g.virtual_z, t0.elapsed()),
            Err(e) => println!("x90_I ctx{ctx} FAILED: {e}"),
        }
    }
    let t0 = Instant::now();
    match calibrate_ef_pi(&sim, Role::Output1, (Role::Switch, 0), &opts) {
        Ok(g) => println!("{}: f = {:.6} GHz in {:?}", g.name, to_ghz(g.pulse.carrier_freq), t0.elapsed()),
        Err(e) => println!("ef O1 FAILED: {e}"),
    }
}
