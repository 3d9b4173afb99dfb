//! The closed-form side of the two-population regression problem: the best
//! fixed correction, its loss floor, the Bayes-optimal gate and its exact
//! realization as a rank-2 DISeL adapter.
//!
//! cargo run --release --example bayes_realization

use disel::adapters::{disel_forward, FrozenLinear};
use disel::datagen::{make_toy_instance, ToyInstance};
use disel::numkit::RngStream;
use disel::oracle::{
    bayes_gate_params, bayes_loss_mc, bayes_predict, fixed_floor_loss, fixed_optimum,
    realize_bayes_as_disel, Population,
};

fn main() -> disel::Result<()> {
    let cfg = ToyInstance::default();
    let mm = make_toy_instance(&cfg, cfg.rng())?;
    let sigma_ft = mm.second_moment(Population::Ft);
    let sigma_pt = mm.second_moment(Population::Pt);

    let delta = fixed_optimum(mm.task_matrix(), &sigma_ft, &sigma_pt)?;
    let half = mm.task_matrix().scaled(0.5);
    println!(
        "max |fixed optimum - M/2| = {:.2e}",
        delta.max_abs_diff(&half)
    );
    println!(
        "fixed floor               = {:.5}",
        fixed_floor_loss(mm.task_matrix(), &sigma_ft)?
    );
    let bayes = bayes_loss_mc(&mm, 100_000, RngStream::new(1, 0))?;
    println!(
        "bayes floor               = {:.3e} ± {:.1e}",
        bayes.estimate, bayes.stderr
    );

    let gate = bayes_gate_params(&mm)?;
    println!(
        "bayes gate: w_g[0] = {:.3}, b_g = {:.3}",
        gate.wg[0], gate.bg
    );

    // A DISeL layer on a zero base computes exactly π_ft(x) M x.
    let adapter = realize_bayes_as_disel(&mm, &gate, 2)?;
    let zero = FrozenLinear::new(mm.task_matrix().scaled(0.0), None)?;
    let mut worst = 0.0f64;
    let mut g = RngStream::new(2, 0).generator();
    for _ in 0..1000 {
        let (_, x) = mm.sample_mixture(&mut g);
        let (y, _) = disel_forward(&zero, &adapter, &x)?;
        let want = bayes_predict(&x, &mm, &gate)?;
        worst = worst.max(
            y.iter()
                .zip(want.iter())
                .fold(0.0, |m, (a, b)| m.max((a - b).abs())),
        );
    }
    println!("max |disel - bayes| over 1000 inputs = {worst:.2e}");
    Ok(())
}
