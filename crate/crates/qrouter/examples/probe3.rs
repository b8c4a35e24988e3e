use qrouter::calib::*;
use qrouter::device::*;
use qrouter::dynamics::Simulator;
use qrouter::pulse::PulseSchedule;
use qrouter::{mhz, to_mhz};

fn main() {
    let (cfg, _) = fitted_paper_device().clone();
    let full = Simulator::from_device(&cfg).unwrap();
    let (sim, _) = full.restrict(&[0, 1]).unwrap(); // switch, input
    let shape = robust_shape_for(&cfg, Role::Input, 20.0, &Default::default()).unwrap();
    let f_guess = full.omega_ge[1];
    // provisional amplitude: use designed scale 1.0 (the robust pulse is designed as X90 at scale 1)
    for amp_scale in [1.0f64] {
        let w_art = mhz(10.0);
        let n_pts = 81;
        let t_max = 1000.0;
        let mut fringe = Vec::new();
        for k in 0..n_pts {
            let tau = t_max * k as f64 / (n_pts - 1) as f64;
            let mut s = PulseSchedule::new();
            let mut p1 = qrouter::pulse::DrivePulse {
                channel: Role::Input,
                envelope: scale_envelope(&shape, amp_scale),
                carrier_freq: f_guess,
                phase: 0.0,
                start_time: 0.0,
            };
            s.push(p1.clone());
            p1.phase = w_art * tau;
            p1.start_time = 20.0 + tau;
            s.push(p1);
            let out = sim.evolve_unitary(&s, &sim.ground_state(), &Default::default()).unwrap();
            let pe: f64 = sim.populations(&out).iter().enumerate()
                .filter(|(b, _)| qrouter::linalg::index_to_multi(*b, &sim.dims)[1] == 1)
                .map(|(_, &p)| p).sum();
            let pf: f64 = sim.populations(&out).iter().enumerate()
                .filter(|(b, _)| qrouter::linalg::index_to_multi(*b, &sim.dims)[1] == 2)
                .map(|(_, &p)| p).sum();
            fringe.push((tau, pe, pf));
        }
        let taus: Vec<f64> = fringe.iter().map(|x| x.0).collect();
        let pes: Vec<f64> = fringe.iter().map(|x| x.1).collect();
        for lim in [(8.0, 12.0), (0.1, 40.0)] {
            let band = Some((mhz(lim.0) / (2.0*std::f64::consts::PI), mhz(lim.1) / (2.0*std::f64::consts::PI)));
            if let Some(fit) = qrouter::fit::fit_sinusoid_band(&taus, &pes, band) {
                println!("scale {amp_scale}: band {:?} MHz -> freq {:.4} MHz, amp {:.3}", lim, fit.frequency*1e3, fit.amplitude);
            }
        }
        println!("  first samples: {:?}", &fringe[..4].iter().map(|x| (x.0, (x.1*1000.0).round()/1000.0, (x.2*1000.0).round()/1000.0)).collect::<Vec<_>>());
        println!("  max P_f over fringe: {:.4}", fringe.iter().map(|x| x.2).fold(0.0, f64::max));
    }
    println!("expected fringe at 10 MHz (detuning 0); dressed f_I(ctx g) = {:.3} MHz rel guess", to_mhz(full.omega_ge[1] - f_guess));
}
