//! Frozen linear layers with LoRA and input-gated (DISeL) low-rank adapters.
//!
//! A DISeL layer computes
//!
//! ```text
//! y = W0 x + bias + (alpha / r) · A (g(x) ⊙ (B x)),   g(x) = σ(Wg x + bg)
//! ```
//!
//! so each rank-one component `a_i b_iᵀ` is scaled by its own sigmoid gate.
//! With every gate saturated at one the layer reduces to LoRA. Forward passes
//! return an explicit [`LayerCache`]; backward passes consume it and are
//! written out by hand.

mod checkpoint;

use std::sync::atomic::{AtomicU64, Ordering};

pub use checkpoint::{
    load_layers, read_layers, save_layers, write_layers, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::error::{invalid, Result};
use crate::numkit::{kaiming_uniform_init, sigmoid_scalar, Matrix, RngStream, Vector};

static NEXT_ADAPTER_ID: AtomicU64 = AtomicU64::new(1);

/// Identity and mutation count of an adapter's parameters; caches carry the
/// stamp of the forward pass that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stamp {
    id: u64,
    generation: u64,
}

impl Stamp {
    fn fresh() -> Self {
        Self {
            id: NEXT_ADAPTER_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

/// Which parameter block a slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    A,
    B,
    GateWeight,
    GateBias,
}

impl ParamKind {
    pub fn is_gate(self) -> bool {
        matches!(self, ParamKind::GateWeight | ParamKind::GateBias)
    }
}

/// A pre-trained linear map `x ↦ W0 x + bias` that adaptation never modifies.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLinear {
    w0: Matrix,
    bias: Option<Vector>,
}

impl FrozenLinear {
    pub fn new(w0: Matrix, bias: Option<Vector>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.dim() != w0.rows() {
                return invalid(format!(
                    "frozen bias has dim {}, weight has {} rows",
                    b.dim(),
                    w0.rows()
                ));
            }
        }
        Ok(Self { w0, bias })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn bias(&self) -> Option<&Vector> {
        self.bias.as_ref()
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        check_dim("frozen forward", self.d_in(), x.dim())?;
        let mut y = Vector::zeros(self.d_out());
        self.forward_into(x, &mut y);
        Ok(y)
    }

    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        self.w0.gemv_into(x, y);
        if let Some(b) = &self.bias {
            for (yi, bi) in y.iter_mut().zip(b.iter()) {
                *yi += bi;
            }
        }
    }

    /// FNV-1a hash over the bit patterns of the weights and bias.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        self.w0.as_slice().iter().copied().for_each(&mut eat);
        if let Some(b) = &self.bias {
            b.iter().copied().for_each(&mut eat);
        }
        h
    }

    /// Mutable access for dense (non-adapter) training only: pre-training
    /// and full fine-tuning.
    pub(crate) fn dense_params_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (
            self.w0.as_mut_slice(),
            self.bias.as_mut().map(|b| b.as_mut_slice()),
        )
    }
}

/// Static low-rank correction `(alpha / r) · A B`.
#[derive(Debug, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
    stamp: Stamp,
}

impl Clone for LoraAdapter {
    fn clone(&self) -> Self {
        Self {
            a: self.a.clone(),
            b: self.b.clone(),
            alpha: self.alpha,
            stamp: Stamp::fresh(),
        }
    }
}

impl LoraAdapter {
    /// `a` is `d_y × r`, `b` is `r × d_x`.
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.cols() == 0 || a.cols() != b.rows() {
            return invalid(format!(
                "LoRA factors incompatible: A is {:?}, B is {:?}",
                a.shape(),
                b.shape()
            ));
        }
        Ok(Self {
            a,
            b,
            alpha,
            stamp: Stamp::fresh(),
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }
    pub fn b(&self) -> &Matrix {
        &self.b
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn rank(&self) -> usize {
        self.a.cols()
    }
    pub fn d_in(&self) -> usize {
        self.b.cols()
    }
    pub fn d_out(&self) -> usize {
        self.a.rows()
    }
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        self.stamp.generation += 1;
        vec![
            (ParamKind::A, self.a.as_mut_slice()),
            (ParamKind::B, self.b.as_mut_slice()),
        ]
    }
}

/// Low-rank correction whose rank-one components are gated by
/// `σ(Wg x + bg)`.
#[derive(Debug, PartialEq)]
pub struct DiselAdapter {
    a: Matrix,
    b: Matrix,
    wg: Matrix,
    bg: Vector,
    alpha: f64,
    stamp: Stamp,
}

impl Clone for DiselAdapter {
    fn clone(&self) -> Self {
        Self {
            a: self.a.clone(),
            b: self.b.clone(),
            wg: self.wg.clone(),
            bg: self.bg.clone(),
            alpha: self.alpha,
            stamp: Stamp::fresh(),
        }
    }
}

impl DiselAdapter {
    /// `a` is `d_y × r`, `b` and `wg` are `r × d_x`, `bg` has dim `r`.
    pub fn new(a: Matrix, b: Matrix, wg: Matrix, bg: Vector, alpha: f64) -> Result<Self> {
        let r = a.cols();
        if r == 0 || b.rows() != r || wg.rows() != r || bg.dim() != r || wg.cols() != b.cols() {
            return invalid(format!(
                "DISeL parameters incompatible: A {:?}, B {:?}, Wg {:?}, bg {}",
                a.shape(),
                b.shape(),
                wg.shape(),
                bg.dim()
            ));
        }
        Ok(Self {
            a,
            b,
            wg,
            bg,
            alpha,
            stamp: Stamp::fresh(),
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }
    pub fn b(&self) -> &Matrix {
        &self.b
    }
    pub fn wg(&self) -> &Matrix {
        &self.wg
    }
    pub fn bg(&self) -> &Vector {
        &self.bg
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn rank(&self) -> usize {
        self.a.cols()
    }
    pub fn d_in(&self) -> usize {
        self.b.cols()
    }
    pub fn d_out(&self) -> usize {
        self.a.rows()
    }
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        self.stamp.generation += 1;
        vec![
            (ParamKind::A, self.a.as_mut_slice()),
            (ParamKind::B, self.b.as_mut_slice()),
            (ParamKind::GateWeight, self.wg.as_mut_slice()),
            (ParamKind::GateBias, self.bg.as_mut_slice()),
        ]
    }

    /// The same factors without gates.
    pub fn to_lora(&self) -> LoraAdapter {
        LoraAdapter {
            a: self.a.clone(),
            b: self.b.clone(),
            alpha: self.alpha,
            stamp: Stamp::fresh(),
        }
    }
}

/// Gate pre-activations and values saved by a DISeL forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCache {
    pub z: Vector,
    pub g: Vector,
}

/// Intermediate quantities of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub x: Vector,
    /// `B x`
    pub u: Vector,
    /// `None` for LoRA.
    pub gate: Option<GateCache>,
    stamp: Stamp,
}

/// Gradients of a scalar objective with respect to one adapter layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub da: Matrix,
    pub db: Matrix,
    /// `None` for LoRA.
    pub dwg: Option<Matrix>,
    pub dbg: Option<Vector>,
    pub dx: Vector,
}

impl GradSet {
    pub fn zeros_like_lora(adapter: &LoraAdapter) -> Self {
        Self {
            da: Matrix::zeros(adapter.d_out(), adapter.rank()),
            db: Matrix::zeros(adapter.rank(), adapter.d_in()),
            dwg: None,
            dbg: None,
            dx: Vector::zeros(adapter.d_in()),
        }
    }

    pub fn zeros_like_disel(adapter: &DiselAdapter) -> Self {
        Self {
            da: Matrix::zeros(adapter.d_out(), adapter.rank()),
            db: Matrix::zeros(adapter.rank(), adapter.d_in()),
            dwg: Some(Matrix::zeros(adapter.rank(), adapter.d_in())),
            dbg: Some(Vector::zeros(adapter.rank())),
            dx: Vector::zeros(adapter.d_in()),
        }
    }

    /// Parameter gradients in the order of `params_mut`.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.da.as_slice(), self.db.as_slice()];
        if let (Some(w), Some(b)) = (&self.dwg, &self.dbg) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn scale_params(&mut self, s: f64) {
        let scale = |xs: &mut [f64]| xs.iter_mut().for_each(|v| *v *= s);
        scale(self.da.as_mut_slice());
        scale(self.db.as_mut_slice());
        if let Some(w) = &mut self.dwg {
            scale(w.as_mut_slice());
        }
        if let Some(b) = &mut self.dbg {
            scale(b.as_mut_slice());
        }
    }
}

fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return invalid(format!("{what}: expected dim {expected}, got {got}"));
    }
    Ok(())
}

fn check_shapes(base: &FrozenLinear, d_in: usize, d_out: usize) -> Result<()> {
    if base.d_in() != d_in || base.d_out() != d_out {
        return invalid(format!(
            "adapter is {d_out}x{d_in} but frozen layer is {}x{}",
            base.d_out(),
            base.d_in()
        ));
    }
    Ok(())
}

/// Post-sigmoid gate vector `σ(Wg x + bg)`.
pub fn gate_values(adapter: &DiselAdapter, x: &Vector) -> Result<Vector> {
    check_dim("gate_values", adapter.d_in(), x.dim())?;
    Ok(gate_cache(adapter, x).g)
}

fn gate_cache(adapter: &DiselAdapter, x: &[f64]) -> GateCache {
    let mut z = Vector::zeros(adapter.rank());
    adapter.wg.gemv_into(x, &mut z);
    for (zi, bi) in z.iter_mut().zip(adapter.bg.iter()) {
        *zi += bi;
    }
    let g = z.iter().map(|&v| sigmoid_scalar(v)).collect();
    GateCache { z, g }
}

/// `y = W0 x + bias + (alpha/r) · A (g(x) ⊙ B x)`.
pub fn disel_forward(
    base: &FrozenLinear,
    adapter: &DiselAdapter,
    x: &Vector,
) -> Result<(Vector, LayerCache)> {
    check_shapes(base, adapter.d_in(), adapter.d_out())?;
    check_dim("disel_forward", base.d_in(), x.dim())?;
    let mut y = Vector::zeros(base.d_out());
    base.forward_into(x, &mut y);
    let mut u = Vector::zeros(adapter.rank());
    adapter.b.gemv_into(x, &mut u);
    let gate = gate_cache(adapter, x);
    let s = adapter.scale();
    let h: Vec<f64> = gate.g.iter().zip(u.iter()).map(|(g, u)| g * u).collect();
    add_scaled_product(&adapter.a, &h, s, &mut y);
    Ok((
        y,
        LayerCache {
            x: x.clone(),
            u,
            gate: Some(gate),
            stamp: adapter.stamp,
        },
    ))
}

/// `y += s · A h`, skipping exact zeros so a zero correction leaves `y`
/// bit-identical.
fn add_scaled_product(a: &Matrix, h: &[f64], s: f64, y: &mut [f64]) {
    if h.iter().all(|&v| v == 0.0) {
        return;
    }
    for (i, yi) in y.iter_mut().enumerate() {
        let row = a.row(i);
        let acc: f64 = row.iter().zip(h).map(|(a, h)| a * h).sum();
        *yi += s * acc;
    }
}

/// Accumulates parameter gradients of a DISeL layer into `acc` and returns
/// the input gradient.
pub fn disel_backward_acc(
    base: &FrozenLinear,
    adapter: &DiselAdapter,
    cache: &LayerCache,
    grad_y: &Vector,
    acc: &mut GradSet,
) -> Result<Vector> {
    validate_cache(cache, adapter.stamp, adapter.d_in(), adapter.rank())?;
    check_dim("disel_backward grad_y", base.d_out(), grad_y.dim())?;
    let Some(gate) = &cache.gate else {
        return invalid("disel_backward: cache was produced by a LoRA forward pass");
    };
    let (Some(dwg), Some(dbg)) = (acc.dwg.as_mut(), acc.dbg.as_mut()) else {
        return invalid("disel_backward: accumulator has no gate blocks");
    };
    let s = adapter.scale();
    let r = adapter.rank();
    let x = cache.x.as_slice();
    let h: Vec<f64> = gate
        .g
        .iter()
        .zip(cache.u.iter())
        .map(|(g, u)| g * u)
        .collect();

    // dA = s · δ hᵀ
    acc.da.rank1_acc(s, grad_y, &h);
    // dh = s · Aᵀ δ
    let mut dh = vec![0.0; r];
    adapter.a.gemv_t_acc(grad_y, &mut dh);
    dh.iter_mut().for_each(|v| *v *= s);
    // du = dh ⊙ g,   dz = dh ⊙ u ⊙ g ⊙ (1 − g)
    let du: Vec<f64> = dh.iter().zip(gate.g.iter()).map(|(d, g)| d * g).collect();
    let dz: Vec<f64> = (0..r)
        .map(|i| dh[i] * cache.u[i] * gate.g[i] * (1.0 - gate.g[i]))
        .collect();
    acc.db.rank1_acc(1.0, &du, x);
    dwg.rank1_acc(1.0, &dz, x);
    for (b, d) in dbg.iter_mut().zip(&dz) {
        *b += d;
    }
    // dx = W0ᵀ δ + Bᵀ du + Wgᵀ dz
    let mut dx = Vector::zeros(base.d_in());
    base.w0.gemv_t_acc(grad_y, &mut dx);
    adapter.b.gemv_t_acc(&du, &mut dx);
    adapter.wg.gemv_t_acc(&dz, &mut dx);
    Ok(dx)
}

/// Exact gradients of `⟨grad_y, y⟩` with respect to every DISeL parameter
/// block and the input.
pub fn disel_backward(
    base: &FrozenLinear,
    adapter: &DiselAdapter,
    cache: &LayerCache,
    grad_y: &Vector,
) -> Result<GradSet> {
    let mut g = GradSet::zeros_like_disel(adapter);
    g.dx = disel_backward_acc(base, adapter, cache, grad_y, &mut g)?;
    Ok(g)
}

/// `y = W0 x + bias + (alpha/r) · A B x`.
pub fn lora_forward(
    base: &FrozenLinear,
    adapter: &LoraAdapter,
    x: &Vector,
) -> Result<(Vector, LayerCache)> {
    check_shapes(base, adapter.d_in(), adapter.d_out())?;
    check_dim("lora_forward", base.d_in(), x.dim())?;
    let mut y = Vector::zeros(base.d_out());
    base.forward_into(x, &mut y);
    let mut u = Vector::zeros(adapter.rank());
    adapter.b.gemv_into(x, &mut u);
    add_scaled_product(&adapter.a, &u, adapter.scale(), &mut y);
    Ok((
        y,
        LayerCache {
            x: x.clone(),
            u,
            gate: None,
            stamp: adapter.stamp,
        },
    ))
}

pub fn lora_backward_acc(
    base: &FrozenLinear,
    adapter: &LoraAdapter,
    cache: &LayerCache,
    grad_y: &Vector,
    acc: &mut GradSet,
) -> Result<Vector> {
    validate_cache(cache, adapter.stamp, adapter.d_in(), adapter.rank())?;
    check_dim("lora_backward grad_y", base.d_out(), grad_y.dim())?;
    if cache.gate.is_some() {
        return invalid("lora_backward: cache was produced by a DISeL forward pass");
    }
    let s = adapter.scale();
    acc.da.rank1_acc(s, grad_y, &cache.u);
    let mut du = vec![0.0; adapter.rank()];
    adapter.a.gemv_t_acc(grad_y, &mut du);
    du.iter_mut().for_each(|v| *v *= s);
    acc.db.rank1_acc(1.0, &du, &cache.x);
    let mut dx = Vector::zeros(base.d_in());
    base.w0.gemv_t_acc(grad_y, &mut dx);
    adapter.b.gemv_t_acc(&du, &mut dx);
    Ok(dx)
}

pub fn lora_backward(
    base: &FrozenLinear,
    adapter: &LoraAdapter,
    cache: &LayerCache,
    grad_y: &Vector,
) -> Result<GradSet> {
    let mut g = GradSet::zeros_like_lora(adapter);
    g.dx = lora_backward_acc(base, adapter, cache, grad_y, &mut g)?;
    Ok(g)
}

fn validate_cache(cache: &LayerCache, stamp: Stamp, d_in: usize, r: usize) -> Result<()> {
    if cache.stamp != stamp {
        return invalid("stale or mismatched cache: adapter changed since the forward pass");
    }
    if cache.x.dim() != d_in || cache.u.dim() != r {
        return invalid("cache shapes do not match the adapter");
    }
    Ok(())
}

/// LoRA initialization: `A` Kaiming-uniform (fan-in `d_x`), `B = 0`.
pub fn init_lora(
    d_x: usize,
    d_y: usize,
    r: usize,
    alpha: f64,
    rng: RngStream,
) -> Result<LoraAdapter> {
    if r == 0 {
        return invalid("adapter rank must be at least 1");
    }
    let a = kaiming_uniform_init(d_y, r, d_x, rng.named("A"))?;
    LoraAdapter::new(a, Matrix::zeros(r, d_x), alpha)
}

/// DISeL initialization: `A` and `Wg` Kaiming-uniform (fan-in `d_x`),
/// `B = 0`, `bg = gate_bias_init · 1`.
pub fn init_disel(
    d_x: usize,
    d_y: usize,
    r: usize,
    alpha: f64,
    gate_bias_init: f64,
    rng: RngStream,
) -> Result<DiselAdapter> {
    if r == 0 {
        return invalid("adapter rank must be at least 1");
    }
    let a = kaiming_uniform_init(d_y, r, d_x, rng.named("A"))?;
    let wg = kaiming_uniform_init(r, d_x, d_x, rng.named("Wg"))?;
    DiselAdapter::new(
        a,
        Matrix::zeros(r, d_x),
        wg,
        Vector::filled(r, gate_bias_init),
        alpha,
    )
}

/// `W0 + (alpha/r) · A B`.
pub fn merge_lora(base: &FrozenLinear, adapter: &LoraAdapter) -> Result<Matrix> {
    check_shapes(base, adapter.d_in(), adapter.d_out())?;
    let ab = crate::numkit::mat_mat(&adapter.a, &adapter.b)?;
    base.w0.add(&ab.scaled(adapter.scale()))
}

/// Trainable parameter counts of an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// `r · (d_x + d_y)`
    pub lora: usize,
    /// `r · d_x + r`, zero for plain LoRA.
    pub gate: usize,
}

impl ParamCount {
    pub fn for_shape(d_x: usize, d_y: usize, r: usize, gated: bool) -> Self {
        Self {
            lora: r * (d_x + d_y),
            gate: if gated { r * d_x + r } else { 0 },
        }
    }

    pub fn total(&self) -> usize {
        self.lora + self.gate
    }
}

/// The adapter (if any) attached to a frozen layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    None,
    Lora(LoraAdapter),
    Disel(DiselAdapter),
}

pub fn param_count(adapter: &Adapter) -> ParamCount {
    match adapter {
        Adapter::None => ParamCount { lora: 0, gate: 0 },
        Adapter::Lora(l) => ParamCount::for_shape(l.d_in(), l.d_out(), l.rank(), false),
        Adapter::Disel(d) => ParamCount::for_shape(d.d_in(), d.d_out(), d.rank(), true),
    }
}

/// A frozen linear layer with an optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub base: FrozenLinear,
    pub adapter: Adapter,
}

impl AdaptedLinear {
    pub fn new(base: FrozenLinear, adapter: Adapter) -> Result<Self> {
        match &adapter {
            Adapter::None => {}
            Adapter::Lora(l) => check_shapes(&base, l.d_in(), l.d_out())?,
            Adapter::Disel(d) => check_shapes(&base, d.d_in(), d.d_out())?,
        }
        Ok(Self { base, adapter })
    }

    pub fn frozen(base: FrozenLinear) -> Self {
        Self {
            base,
            adapter: Adapter::None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.base.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.base.d_out()
    }

    /// Output and, when an adapter is attached, its cache.
    pub fn forward(&self, x: &Vector) -> Result<(Vector, Option<LayerCache>)> {
        match &self.adapter {
            Adapter::None => Ok((self.base.forward(x)?, None)),
            Adapter::Lora(l) => lora_forward(&self.base, l, x).map(|(y, c)| (y, Some(c))),
            Adapter::Disel(d) => disel_forward(&self.base, d, x).map(|(y, c)| (y, Some(c))),
        }
    }

    /// Output only.
    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Gate vector, `None` unless a DISeL adapter is attached.
    pub fn gates(&self, x: &Vector) -> Result<Option<Vector>> {
        match &self.adapter {
            Adapter::Disel(d) => gate_values(d, x).map(Some),
            _ => Ok(None),
        }
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(&self.adapter)
    }

    /// Static merge `W0 + Δ`; only defined for LoRA and bare layers.
    pub fn merged_weight(&self) -> Result<Matrix> {
        match &self.adapter {
            Adapter::None => Ok(self.base.w0.clone()),
            Adapter::Lora(l) => merge_lora(&self.base, l),
            Adapter::Disel(_) => {
                invalid("DISeL corrections are input-dependent and cannot be merged into W0")
            }
        }
    }
}
