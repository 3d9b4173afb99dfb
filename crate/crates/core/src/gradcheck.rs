//! Central finite-difference verification of the hand-written adapter
//! backward passes.
//!
//! The objective for one instance is `f = ⟨δ, y(θ, x)⟩` for a random
//! cotangent `δ`; its gradient with respect to every parameter entry and
//! every input entry is compared against `(f(θ + h) − f(θ − h)) / 2h`.
//! Only forward passes are used on the numerical side.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    disel_backward, disel_forward, lora_backward, lora_forward, DiselAdapter, FrozenLinear,
    GradSet, LayerCache, LoraAdapter,
};
use crate::error::Result;
use crate::numkit::{Matrix, RngStream, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub instances: usize,
    /// Finite-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub denominator_floor: f64,
    pub max_dim: usize,
    pub max_rank: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            step: 1e-6,
            tolerance: 1e-5,
            denominator_floor: 1e-3,
            max_dim: 16,
            max_rank: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BlockReport {
    pub block: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LayerReport {
    pub layer: String,
    pub instances: usize,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl LayerReport {
    pub fn passed(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.max_rel_error <= self.tolerance)
    }

    pub fn block(&self, name: &str) -> Option<&BlockReport> {
        self.blocks.iter().find(|b| b.block == name)
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub layers: Vec<LayerReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(LayerReport::passed)
    }
}

/// Signature shared by the real backward passes and test doubles.
pub type DiselBackwardFn<'a> =
    &'a dyn Fn(&FrozenLinear, &DiselAdapter, &LayerCache, &Vector) -> Result<GradSet>;
pub type LoraBackwardFn<'a> =
    &'a dyn Fn(&FrozenLinear, &LoraAdapter, &LayerCache, &Vector) -> Result<GradSet>;

pub fn run_suite(cfg: &GradCheckConfig, rng: RngStream) -> Result<GradCheckReport> {
    Ok(GradCheckReport {
        layers: vec![
            check_disel_with(cfg, rng.named("disel"), &disel_backward)?,
            check_lora_with(cfg, rng.named("lora"), &lora_backward)?,
        ],
    })
}

#[derive(Default)]
struct Block {
    entries: usize,
    max_rel: f64,
    max_abs: f64,
}

impl Block {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.entries += 1;
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
    }

    fn report(self, name: &str) -> BlockReport {
        BlockReport {
            block: name.to_string(),
            entries_checked: self.entries,
            max_rel_error: self.max_rel,
            max_abs_error: self.max_abs,
        }
    }
}

struct Instance {
    base: FrozenLinear,
    x: Vector,
    delta: Vector,
    r: usize,
}

fn normal_matrix(g: &mut impl Rng, rows: usize, cols: usize, sd: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| sd * g.sample::<f64, _>(StandardNormal))
}

fn normal_vector(g: &mut impl Rng, n: usize, sd: f64) -> Vector {
    (0..n)
        .map(|_| sd * g.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_instance(cfg: &GradCheckConfig, g: &mut impl Rng) -> Result<Instance> {
    let d_x = g.random_range(1..=cfg.max_dim);
    let d_y = g.random_range(1..=cfg.max_dim);
    let r = g.random_range(1..=cfg.max_rank.min(cfg.max_dim));
    let w0 = normal_matrix(g, d_y, d_x, 1.0 / (d_x as f64).sqrt());
    let bias = if g.random_bool(0.5) {
        Some(normal_vector(g, d_y, 1.0))
    } else {
        None
    };
    Ok(Instance {
        base: FrozenLinear::new(w0, bias)?,
        x: normal_vector(g, d_x, 1.0),
        delta: normal_vector(g, d_y, 1.0),
        r,
    })
}

fn objective(y: &Vector, delta: &Vector) -> f64 {
    y.dot(delta)
}

/// Perturbs entry `idx` of parameter block `block` by `±h` and returns the
/// central difference of the objective.
fn fd_param<A: Clone>(
    adapter: &A,
    block: usize,
    idx: usize,
    h: f64,
    perturb: impl Fn(&mut A, usize, usize, f64),
    eval: impl Fn(&A) -> Result<f64>,
) -> Result<f64> {
    let mut plus = adapter.clone();
    perturb(&mut plus, block, idx, h);
    let mut minus = adapter.clone();
    perturb(&mut minus, block, idx, -h);
    Ok((eval(&plus)? - eval(&minus)?) / (2.0 * h))
}

fn fd_input(x: &Vector, h: f64, eval: impl Fn(&Vector) -> Result<f64>) -> Result<Vec<f64>> {
    (0..x.dim())
        .map(|i| {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            Ok((eval(&p)? - eval(&m)?) / (2.0 * h))
        })
        .collect()
}

pub fn check_disel_with(
    cfg: &GradCheckConfig,
    rng: RngStream,
    backward: DiselBackwardFn<'_>,
) -> Result<LayerReport> {
    const NAMES: [&str; 5] = ["dA", "dB", "dWg", "dbg", "dx"];
    let mut blocks: Vec<Block> = (0..5).map(|_| Block::default()).collect();
    for k in 0..cfg.instances {
        let mut g = rng.derive(k as u64).generator();
        let inst = random_instance(cfg, &mut g)?;
        let (d_x, d_y, r) = (inst.base.d_in(), inst.base.d_out(), inst.r);
        let adapter = DiselAdapter::new(
            normal_matrix(&mut g, d_y, r, 1.0 / (r as f64).sqrt()),
            normal_matrix(&mut g, r, d_x, 1.0 / (d_x as f64).sqrt()),
            normal_matrix(&mut g, r, d_x, 1.0 / (d_x as f64).sqrt()),
            normal_vector(&mut g, r, 1.0),
            g.random_range(0.5..4.0) * r as f64,
        )?;
        let (_, cache) = disel_forward(&inst.base, &adapter, &inst.x)?;
        let grads = backward(&inst.base, &adapter, &cache, &inst.delta)?;
        let analytic = [
            grads.da.as_slice(),
            grads.db.as_slice(),
            grads.dwg.as_ref().map_or(&[][..], |m| m.as_slice()),
            grads.dbg.as_ref().map_or(&[][..], |v| v.as_slice()),
        ];
        let eval = |a: &DiselAdapter| -> Result<f64> {
            Ok(objective(
                &disel_forward(&inst.base, a, &inst.x)?.0,
                &inst.delta,
            ))
        };
        let params = |a: &mut DiselAdapter, b: usize, i: usize, h: f64| a.params_mut()[b].1[i] += h;
        let sizes = [d_y * r, r * d_x, r * d_x, r];
        for (b, &size) in sizes.iter().enumerate() {
            for i in 0..size {
                let numeric = fd_param(&adapter, b, i, cfg.step, &params, &eval)?;
                let a = analytic[b].get(i).copied().unwrap_or(0.0);
                blocks[b].record(a, numeric, cfg.denominator_floor);
            }
        }
        let numeric_dx = fd_input(&inst.x, cfg.step, |x| {
            Ok(objective(
                &disel_forward(&inst.base, &adapter, x)?.0,
                &inst.delta,
            ))
        })?;
        for (a, n) in grads.dx.iter().zip(numeric_dx) {
            blocks[4].record(*a, n, cfg.denominator_floor);
        }
    }
    Ok(LayerReport {
        layer: "disel".into(),
        instances: cfg.instances,
        tolerance: cfg.tolerance,
        blocks: blocks
            .into_iter()
            .zip(NAMES)
            .map(|(b, n)| b.report(n))
            .collect(),
    })
}

pub fn check_lora_with(
    cfg: &GradCheckConfig,
    rng: RngStream,
    backward: LoraBackwardFn<'_>,
) -> Result<LayerReport> {
    let mut blocks: Vec<Block> = (0..3).map(|_| Block::default()).collect();
    for k in 0..cfg.instances {
        let mut g = rng.derive(k as u64).generator();
        let inst = random_instance(cfg, &mut g)?;
        let (d_x, d_y, r) = (inst.base.d_in(), inst.base.d_out(), inst.r);
        let adapter = LoraAdapter::new(
            normal_matrix(&mut g, d_y, r, 1.0 / (r as f64).sqrt()),
            normal_matrix(&mut g, r, d_x, 1.0 / (d_x as f64).sqrt()),
            g.random_range(0.5..4.0) * r as f64,
        )?;
        let (_, cache) = lora_forward(&inst.base, &adapter, &inst.x)?;
        let grads = backward(&inst.base, &adapter, &cache, &inst.delta)?;
        let analytic = [grads.da.as_slice(), grads.db.as_slice()];
        let eval = |a: &LoraAdapter| -> Result<f64> {
            Ok(objective(
                &lora_forward(&inst.base, a, &inst.x)?.0,
                &inst.delta,
            ))
        };
        let params = |a: &mut LoraAdapter, b: usize, i: usize, h: f64| a.params_mut()[b].1[i] += h;
        for (b, size) in [d_y * r, r * d_x].into_iter().enumerate() {
            for i in 0..size {
                let numeric = fd_param(&adapter, b, i, cfg.step, &params, &eval)?;
                blocks[b].record(analytic[b][i], numeric, cfg.denominator_floor);
            }
        }
        let numeric_dx = fd_input(&inst.x, cfg.step, |x| {
            Ok(objective(
                &lora_forward(&inst.base, &adapter, x)?.0,
                &inst.delta,
            ))
        })?;
        for (a, n) in grads.dx.iter().zip(numeric_dx) {
            blocks[2].record(*a, n, cfg.denominator_floor);
        }
    }
    let names = ["dA", "dB", "dx"];
    Ok(LayerReport {
        layer: "lora".into(),
        instances: cfg.instances,
        tolerance: cfg.tolerance,
        blocks: blocks
            .into_iter()
            .zip(names)
            .map(|(b, n)| b.report(n))
            .collect(),
    })
}
