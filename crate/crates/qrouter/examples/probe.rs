use qrouter::calib::*;
use qrouter::device::*;
use qrouter::dynamics::Simulator;
use qrouter::pulse::PulseEnvelope;
use qrouter::{to_ghz, to_mhz};
use std::time::Instant;

fn main() {
    let (cfg, _) = fitted_paper_device().clone();
    let sim = Simulator::from_device(&cfg).unwrap();
    for (pair, n) in [(IoPair::Io1, 2u32), (IoPair::Io2, 1u32)] {
        let cal = SidebandCalibrator::new(&sim, pair, SidebandCalOptions::default()).unwrap();
        println!("=== {} target n={} ===", pair.tag(), n);
        let t0 = Instant::now();
        match cal.calibrate(n) {
            Ok((gate, wp)) => {
                let amp = match gate.pulse.envelope { PulseEnvelope::FlatTopGaussian{amplitude,..} => amplitude, _ => 0.0 };
                println!("calibrated in {:?}: A = {:.5}, f = {:.6} GHz, tau = {:.2} ns (t_pi = {:.2})",
                    t0.elapsed(), amp, to_ghz(gate.pulse.carrier_freq), gate.pulse.envelope.length(), wp.gate_time);
                println!("wp: n = {}, g_eff = {:.4} MHz, zeta = {:.4} MHz, mismatch = {:.2}%",
                    wp.n, to_mhz(wp.g_eff), to_mhz(wp.zeta), 100.0 * wp.blocking_mismatch());
                let u = cal.compile_xpi(amp, gate.pulse.carrier_freq, gate.pulse.envelope.length()).unwrap();
                let psi = &u * cal.eg_state(pair.allow_switch());
                let pops = cal.sim.populations(&psi);
                let pf: f64 = pops.iter().enumerate().filter(|(b, _)| qrouter::linalg::index_to_multi(*b, &cal.sim.dims)[2] == 2).map(|(_, &p)| p).sum();
                let tr15 = cal.blocked_transfer(amp, gate.pulse.carrier_freq, gate.pulse.envelope.length(), 15).unwrap();
                println!("allowed P(gf) = {:.5}; blocked after 15 = {:.5} ({:.3}%/gate)", pf, tr15, 100.0 * tr15 / 15.0);
            }
            Err(e) => println!("CALIBRATION FAILED: {e}"),
        }
    }
}
