use resonet::adjoint::{energy_gradient, CheckpointStrategy};
use resonet::model::{oracle_effective_model, Geometry, PencilLayout, PhysicsConfig};
use resonet::sim::{simulate, LinearLattice, SimConfig, DEFAULT_DT};
use std::time::Instant;

fn main() {
    let g = Geometry::random(7, 7, 1).unwrap();
    let model = oracle_effective_model(&g, &PhysicsConfig::default());
    let layout = PencilLayout::lattice(7, 7);
    let forcing: Vec<f64> = (0..10_000).map(|k| (k as f64 * 0.17).sin()).collect();
    let field = LinearLattice::new(&model, forcing).unwrap();
    let cfg = SimConfig::new(DEFAULT_DT, 10_000);

    // warmup
    simulate(&field, &cfg, model.output_index).unwrap();

    let reps = 20;
    let t = Instant::now();
    for _ in 0..reps {
        simulate(&field, &cfg, model.output_index).unwrap();
    }
    let fwd = t.elapsed() / reps;

    let t = Instant::now();
    for _ in 0..reps {
        energy_gradient(&field, &layout, &cfg, CheckpointStrategy::SqrtN).unwrap();
    }
    let total = t.elapsed() / reps;

    let back = total.saturating_sub(fwd);
    println!("forward:        {fwd:.2?}");
    println!("grad total:     {total:.2?}");
    println!("backward only:  {back:.2?}");
    println!("backward/forward ratio: {:.3}", back.as_secs_f64() / fwd.as_secs_f64());
}
