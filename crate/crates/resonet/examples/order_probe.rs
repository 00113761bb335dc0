//! Evaluates hand-tuned two-layer operating points on the synthetic
//! temporal dataset: lattice a passes one class tone, lattice b the other,
//! and the element's cantilever carries slow memory that detunes the
//! readout string depending on burst order.

use resonet::audio::{synth_dataset, SynthConfig, SynthKind};
use resonet::model::{oracle_effective_model, Geometry, PhysicsConfig};
use resonet::nonlinear::{deep_forward, DeepNetwork, NonlinearElement};
use resonet::sim::{transfer_function, SimConfig};
use resonet::trainer::{fit_threshold, Dataset, TrainSample};

/// Uniform-geometry lattice with the best response ratio |T(f_keep)/T(f_drop)|.
fn tuned_lattice(physics: &PhysicsConfig, f_keep: f64, f_drop: f64) -> (f64, f64) {
    let mut best = (0.5, 0.0);
    for i in 0..=40 {
        let d = i as f64 * 0.95 / 40.0;
        let g = Geometry::uniform(2, 2, d).unwrap();
        let m = oracle_effective_model(&g, physics);
        let t = transfer_function(&m, &[f_keep, f_drop]);
        let ratio = t[0].magnitude / t[1].magnitude;
        if ratio > best.1 {
            best = (d, ratio);
        }
    }
    best
}

fn main() {
    let physics = PhysicsConfig {
        f0_hz: 1.0,
        quality_factor: 30.0,
        ..PhysicsConfig::default()
    };
    let dt = 0.02;
    let cfg = SimConfig::new(dt, 2000);
    let (f_a, f_b) = (0.9, 1.1);
    let k1 = (2.0 * std::f64::consts::PI).powi(2);
    let w = 2.0 * std::f64::consts::PI;
    let (ks_a, ks_b) = ((w * f_a).powi(2), (w * f_b).powi(2));

    let (da, ra) = tuned_lattice(&physics, f_a, f_b);
    let (db, rb) = tuned_lattice(&physics, f_b, f_a);
    println!("lattice a: uniform d = {da:.3} ratio {ra:.1}; lattice b: d = {db:.3} ratio {rb:.1}");
    let a = oracle_effective_model(&Geometry::uniform(2, 2, da).unwrap(), &physics);
    let b = oracle_effective_model(&Geometry::uniform(2, 2, db).unwrap(), &physics);

    let synth = SynthConfig {
        f_a_hz: f_a,
        f_b_hz: f_b,
        duration_s: 30.0,
        rate: 1.0 / dt,
        amp_lo: 1.0,
        amp_hi: 1.0,
        ..SynthConfig::default()
    };
    let (manifest, clips) = synth_dataset(SynthKind::Temporal, 30, 20, 42, &synth);
    let ds = Dataset::from_manifest(&manifest, &clips).unwrap();

    for (name, damping, g1, g2, ka, kb) in [
        ("split", [0.1, 0.1, 0.1], 6.0, 8.0, 4.0, 6.0),
        ("overdamped-cant", [0.1, 0.1, 3.0], 6.0, 8.0, 4.0, 6.0),
        ("overdamped-hot", [0.1, 0.1, 5.0], 6.0, 16.0, 4.0, 9.0),
        ("od-heavier-s1", [0.3, 0.1, 5.0], 6.0, 16.0, 4.0, 9.0),
        ("od-gentle", [0.2, 0.2, 4.0], 4.0, 10.0, 3.0, 6.0),
    ] {
        let net = DeepNetwork {
            lattice_a: a.clone(),
            lattice_b: b.clone(),
            element: NonlinearElement {
                mass: [1.0, 1.0, 1.0],
                damping,
                stiffness: [ks_a, ks_b, 0.2 * k1],
                gamma_s1: g1,
                gamma_s2: g2,
            },
            kappa_a: ka,
            kappa_b: kb,
        };
        let energies = |samples: &[TrainSample]| -> Option<(Vec<f64>, Vec<i8>)> {
            let mut es = Vec::new();
            let mut ls = Vec::new();
            for s in samples {
                es.push(deep_forward(&net, &s.forcing, &cfg).ok()?.energy());
                ls.push(s.label);
            }
            Some((es, ls))
        };
        let (Some((tr_e, tr_l)), Some((te_e, te_l))) = (energies(&ds.train), energies(&ds.test))
        else {
            println!("{name:>16}: blowup");
            continue;
        };
        let fit = fit_threshold(&tr_e, &tr_l).unwrap();
        let acc = |es: &[f64], ls: &[i8]| {
            let hits = es
                .iter()
                .zip(ls)
                .filter(|&(&e, &l)| {
                    let pred = if e.ln() > fit.theta { fit.polarity } else { -fit.polarity };
                    pred == l
                })
                .count();
            hits as f64 / es.len() as f64
        };
        let stats = |es: &[f64], ls: &[i8], want: i8| {
            let v: Vec<f64> = es
                .iter()
                .zip(ls)
                .filter(|&(_, &l)| l == want)
                .map(|(&e, _)| e.ln())
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
            (m, sd)
        };
        let (mp, sp) = stats(&tr_e, &tr_l, 1);
        let (mn, sn) = stats(&tr_e, &tr_l, -1);
        println!(
            "{name:>16}: train {:.3} test {:.3}  lnE +1 {mp:.2}+-{sp:.2}  -1 {mn:.2}+-{sn:.2}",
            acc(&tr_e, &tr_l),
            acc(&te_e, &te_l)
        );
    }
}
