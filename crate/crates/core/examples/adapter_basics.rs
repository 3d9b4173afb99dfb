//! Builds LoRA and DISeL adapters on one frozen layer, shows that both start
//! out equal to the frozen map, and runs a forward/backward pass.
//!
//! cargo run --example adapter_basics

use disel::adapters::{
    disel_backward, disel_forward, gate_values, init_disel, init_lora, lora_forward, param_count,
    Adapter, FrozenLinear,
};
use disel::numkit::{kaiming_uniform_init, RngStream, Vector};

fn main() -> disel::Result<()> {
    let (d_x, d_y, r) = (8, 5, 3);
    let rng = RngStream::new(7, 0);
    let base = FrozenLinear::new(kaiming_uniform_init(d_y, d_x, d_x, rng.named("W0"))?, None)?;
    let lora = init_lora(d_x, d_y, r, r as f64, rng.named("lora"))?;
    let disel = init_disel(d_x, d_y, r, r as f64, -3.0, rng.named("disel"))?;

    let x: Vector = (0..d_x).map(|i| (i as f64 - 3.5) / 4.0).collect();
    let y0 = base.forward(&x)?;
    let (y_lora, _) = lora_forward(&base, &lora, &x)?;
    let (y_disel, cache) = disel_forward(&base, &disel, &x)?;
    // B = 0 at initialization, so both adapted layers reproduce W0 x exactly
    assert_eq!(y0, y_lora);
    assert_eq!(y0, y_disel);
    println!("frozen output     {:?}", y0.as_slice());
    println!(
        "initial gates     {:?}",
        gate_values(&disel, &x)?.as_slice()
    );

    let lora_params = param_count(&Adapter::Lora(lora));
    let disel_params = param_count(&Adapter::Disel(disel.clone()));
    println!("lora  parameters  {}", lora_params.total());
    println!(
        "disel parameters  {} = {} low-rank + {} gate",
        disel_params.total(),
        disel_params.lora,
        disel_params.gate
    );

    let cotangent = Vector::filled(d_y, 1.0);
    let grads = disel_backward(&base, &disel, &cache, &cotangent)?;
    // only dB is non-zero at B = 0: A and the gate see no signal yet
    println!("|dA| = {:.3e}", grads.da.frobenius_norm());
    println!("|dB| = {:.3e}", grads.db.frobenius_norm());
    println!(
        "|dWg| = {:.3e}",
        grads.dwg.as_ref().map_or(0.0, |m| m.frobenius_norm())
    );
    Ok(())
}
