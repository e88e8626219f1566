//! Scratch probe for trajectory behavior (development aid).

use pmeab_core::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let a: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let xi_max: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e3);
    let p: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3.0);
    let verbose = args.get(4).is_some();
    let params = Params::new(2.0, p, 1.0, 1).unwrap();
    let exps = params.exponents();
    let ode = ProfileOde::selfsim(&params);
    let controls = IntegrationControls { xi_max, ..Default::default() };
    match integrate_and_classify(&ode, &params, &exps, a, &controls, 0.25) {
        Err(e) => println!("A = {a:e}: ERROR {e}"),
        Ok(traj) => {
            let fmin = traj.samples.iter().map(|s| s.f).fold(f64::INFINITY, f64::min);
            println!(
                "A = {a:e}, term = {:?}, tail = {:?}, samples = {}, f_min = {fmin:.3e}",
                traj.termination,
                traj.tail,
                traj.samples.len()
            );
            if verbose {
                let n = traj.samples.len();
                for (i, s) in traj.samples.iter().enumerate() {
                    if i % (n / 40).max(1) == 0 || i + 5 > n {
                        println!(
                            "xi = {:12.5e}  f = {:12.5e}  dg = {:12.5e}  phi1 = {:12.5e} phi2 = {:12.5e}",
                            s.xi,
                            s.f,
                            s.dg,
                            s.xi.powf(exps.theta_star) * s.f,
                            s.xi.powf(exps.critical_decay(&params)) * s.f
                        );
                    }
                }
            }
        }
    }
}
