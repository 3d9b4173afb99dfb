use serde::{Deserialize, Serialize};

use crate::adapters::{
    disel_backward_acc, init_disel, init_lora, lora_backward_acc, AdaptedLinear, Adapter,
    FrozenLinear, GradSet, LayerCache,
};
use crate::error::{invalid, Result};
use crate::numkit::{kaiming_uniform_init, Matrix, RngStream, Vector};
use crate::optim::{global_norm, GroupTag, ParamGroup};

use super::{MethodConfig, MethodKind};

/// Nonlinearity applied between consecutive layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply_in_place(self, v: &mut Vector) {
        match self {
            Self::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Self::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        }
    }

    /// Derivative at pre-activation `p`.
    pub fn derivative(self, p: f64) -> f64 {
        match self {
            Self::Relu => {
                if p > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - p.tanh().powi(2),
        }
    }
}

/// Linear layers with an activation between consecutive layers and none
/// after the last. A single-layer stack is a plain adapted linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlp {
    layers: Vec<AdaptedLinear>,
    activation: Activation,
}

/// Per-layer quantities saved by [`TinyMlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer.
    pub inputs: Vec<Vector>,
    /// Output of each layer before the activation.
    pub pre: Vec<Vector>,
    pub caches: Vec<Option<LayerCache>>,
}

/// Which parts of a network a training run updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    /// Dense weights (and biases) of these layers are trained.
    pub dense: Vec<bool>,
}

impl TrainMask {
    pub fn adapters_only(n_layers: usize) -> Self {
        Self {
            dense: vec![false; n_layers],
        }
    }

    pub fn all_dense(n_layers: usize) -> Self {
        Self {
            dense: vec![true; n_layers],
        }
    }
}

/// Gradient accumulator mirroring a network and a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Option<Matrix>,
    pub bias: Option<Vector>,
    pub adapter: Option<GradSet>,
}

/// Learning rates and decay handed to the optimizer for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub lr: f64,
    pub gate_lr: f64,
    pub weight_decay: f64,
}

impl TinyMlp {
    pub fn from_layers(layers: Vec<AdaptedLinear>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("a network needs at least one layer");
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].d_out() != w[1].d_in() {
                return invalid(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    w[0].d_out(),
                    i + 1,
                    w[1].d_in()
                ));
            }
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
        })
    }

    /// Dense network with Kaiming-uniform weights and zero biases;
    /// `sizes = [d_in, hidden…, d_out]`.
    pub fn dense(sizes: &[usize], rng: RngStream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return invalid("layer sizes must list at least input and output widths, all positive");
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = kaiming_uniform_init(w[1], w[0], w[0], rng.derive(i as u64))?;
                Ok(AdaptedLinear::frozen(FrozenLinear::new(
                    weight,
                    Some(Vector::zeros(w[1])),
                )?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[AdaptedLinear] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<AdaptedLinear> {
        self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    /// Attaches a fresh adapter of the given method to each listed layer.
    /// Full fine-tuning attaches nothing.
    pub fn attach(
        &mut self,
        method: &MethodConfig,
        layers: &[usize],
        rng: RngStream,
    ) -> Result<()> {
        for &l in layers {
            let Some(layer) = self.layers.get_mut(l) else {
                return invalid(format!("no layer {l} to adapt"));
            };
            let (d_x, d_y) = (layer.d_in(), layer.d_out());
            let stream = rng.derive(l as u64);
            layer.adapter = match method.kind {
                MethodKind::FullFt => Adapter::None,
                MethodKind::Lora => {
                    Adapter::Lora(init_lora(d_x, d_y, method.rank, method.alpha(), stream)?)
                }
                MethodKind::Disel => Adapter::Disel(init_disel(
                    d_x,
                    d_y,
                    method.rank,
                    method.alpha(),
                    method.gate_bias_init,
                    stream,
                )?),
            };
        }
        Ok(())
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h)?;
            if i < last {
                self.activation.apply_in_place(&mut h);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Vector) -> Result<(Vector, ForwardTrace)> {
        let n = self.layers.len();
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            caches: Vec::with_capacity(n),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&h)?;
            trace.inputs.push(h);
            trace.caches.push(cache);
            h = y.clone();
            trace.pre.push(y);
            if i + 1 < n {
                self.activation.apply_in_place(&mut h);
            }
        }
        Ok((h, trace))
    }

    /// Gate vectors of each DISeL layer for input `x`, as
    /// `(layer index, gates)`.
    pub fn gate_vectors(&self, x: &Vector) -> Result<Vec<(usize, Vector)>> {
        let (_, trace) = self.forward_cached(x)?;
        Ok(trace
            .caches
            .into_iter()
            .enumerate()
            .filter_map(|(i, c)| c.and_then(|c| c.gate).map(|g| (i, g.g)))
            .collect())
    }

    pub fn has_disel(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.adapter, Adapter::Disel(_)))
    }

    /// Hash over every layer's frozen weights.
    pub fn frozen_fingerprint(&self) -> u64 {
        self.layers.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, l| {
            (h ^ l.base.fingerprint()).wrapping_mul(0x0000_0100_0000_01B3)
        })
    }

    pub fn zero_grads(&self, mask: &TrainMask) -> Result<NetGrads> {
        self.check_mask(mask)?;
        let layers = self
            .layers
            .iter()
            .zip(&mask.dense)
            .map(|(layer, &dense)| LayerGrads {
                weight: dense.then(|| Matrix::zeros(layer.d_out(), layer.d_in())),
                bias: if dense {
                    layer.base.bias().map(|b| Vector::zeros(b.dim()))
                } else {
                    None
                },
                adapter: match &layer.adapter {
                    Adapter::None => None,
                    Adapter::Lora(l) => Some(GradSet::zeros_like_lora(l)),
                    Adapter::Disel(d) => Some(GradSet::zeros_like_disel(d)),
                },
            })
            .collect();
        Ok(NetGrads { layers })
    }

    fn check_mask(&self, mask: &TrainMask) -> Result<()> {
        if mask.dense.len() != self.layers.len() {
            return invalid(format!(
                "train mask covers {} layers, network has {}",
                mask.dense.len(),
                self.layers.len()
            ));
        }
        Ok(())
    }

    /// Accumulates gradients of `⟨grad_out, output⟩` into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_out: &Vector,
        grads: &mut NetGrads,
    ) -> Result<()> {
        let n = self.layers.len();
        if grads.layers.len() != n || trace.inputs.len() != n {
            return invalid("trace or gradient accumulator does not match the network");
        }
        let mut delta = grad_out.clone();
        for i in (0..n).rev() {
            if i + 1 < n {
                for (d, &p) in delta.iter_mut().zip(trace.pre[i].iter()) {
                    *d *= self.activation.derivative(p);
                }
            }
            let layer = &self.layers[i];
            let x = &trace.inputs[i];
            let g = &mut grads.layers[i];
            if let Some(w) = g.weight.as_mut() {
                w.rank1_acc(1.0, &delta, x);
            }
            if let Some(b) = g.bias.as_mut() {
                b.iter_mut().zip(delta.iter()).for_each(|(b, d)| *b += d);
            }
            let need_dx = i > 0;
            delta = match (&layer.adapter, &trace.caches[i], g.adapter.as_mut()) {
                (Adapter::Lora(l), Some(c), Some(acc)) => {
                    lora_backward_acc(&layer.base, l, c, &delta, acc)?
                }
                (Adapter::Disel(d), Some(c), Some(acc)) => {
                    disel_backward_acc(&layer.base, d, c, &delta, acc)?
                }
                (Adapter::None, _, _) if need_dx => {
                    let mut dx = Vector::zeros(layer.d_in());
                    layer.base.w0().gemv_t_acc(&delta, &mut dx);
                    dx
                }
                (Adapter::None, _, _) => break,
                _ => return invalid("trace does not match the network's adapters"),
            };
        }
        Ok(())
    }

    /// Optimizer groups in the order produced by [`NetGrads::groups`].
    pub fn param_groups(
        &mut self,
        mask: &TrainMask,
        rates: GroupRates,
    ) -> Result<Vec<ParamGroup<'_>>> {
        self.check_mask(mask)?;
        let mut groups = Vec::new();
        for (i, (layer, &dense)) in self.layers.iter_mut().zip(&mask.dense).enumerate() {
            let AdaptedLinear { base, adapter } = layer;
            if dense {
                let (w, b) = base.dense_params_mut();
                groups.push(ParamGroup::new(
                    format!("layer{i}.weight"),
                    GroupTag::Dense,
                    rates.lr,
                    rates.weight_decay,
                    vec![w],
                ));
                if let Some(b) = b {
                    groups.push(ParamGroup::new(
                        format!("layer{i}.bias"),
                        GroupTag::Bias,
                        rates.lr,
                        rates.weight_decay,
                        vec![b],
                    ));
                }
            }
            let mut params: Vec<&mut [f64]> = match adapter {
                Adapter::None => continue,
                Adapter::Lora(l) => l.params_mut().into_iter().map(|(_, p)| p).collect(),
                Adapter::Disel(d) => d.params_mut().into_iter().map(|(_, p)| p).collect(),
            };
            let gate = (params.len() == 4).then(|| params.split_off(2));
            groups.push(ParamGroup::new(
                format!("layer{i}.adapter"),
                GroupTag::Adapter,
                rates.lr,
                rates.weight_decay,
                params,
            ));
            if let Some(gate) = gate {
                groups.push(ParamGroup::new(
                    format!("layer{i}.gate"),
                    GroupTag::Gate,
                    rates.gate_lr,
                    rates.weight_decay,
                    gate,
                ));
            }
        }
        Ok(groups)
    }
}

impl NetGrads {
    pub fn groups(&self) -> Vec<Vec<&[f64]>> {
        let mut out = Vec::new();
        for g in &self.layers {
            if let Some(w) = &g.weight {
                out.push(vec![w.as_slice()]);
            }
            if let Some(b) = &g.bias {
                out.push(vec![b.as_slice()]);
            }
            if let Some(a) = &g.adapter {
                let mut slices = a.param_slices();
                let gate = (slices.len() == 4).then(|| slices.split_off(2));
                out.push(slices);
                if let Some(gate) = gate {
                    out.push(gate);
                }
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        let flat: Vec<&[f64]> = self.groups().into_iter().flatten().collect();
        global_norm(&flat)
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            if let Some(w) = &mut g.weight {
                w.as_mut_slice().iter_mut().for_each(|v| *v *= s);
            }
            if let Some(b) = &mut g.bias {
                b.iter_mut().for_each(|v| *v *= s);
            }
            if let Some(a) = &mut g.adapter {
                a.scale_params(s);
            }
        }
    }
}
