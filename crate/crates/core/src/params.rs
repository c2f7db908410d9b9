//! Named views over learnable tensors.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flowwarp::CombineWeights;
use crate::tensor::{BatchNorm, ConvParams, Shape, Tensor4};

/// How the optimizer treats a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernels; weight-decayed.
    Weight,
    /// Convolution biases; not decayed.
    Bias,
    /// Batch-norm scale and shift; not decayed.
    Norm,
    /// Feature combination coefficients; decayed.
    Combine,
    /// Running statistics: saved with the model, never touched by the optimizer.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Combine)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::Combine => "combine",
            ParamKind::Buffer => "buffer",
        }
    }
}

/// Callback receiving `(name, kind, shape, values)` for each tensor.
pub type Visit<'a> = dyn FnMut(&str, ParamKind, Shape, &[f64]) + 'a;
pub type VisitMut<'a> = dyn FnMut(&str, ParamKind, Shape, &mut [f64]) + 'a;

/// A model whose tensors can be enumerated in a fixed order under stable names.
pub trait Parameterized {
    fn visit(&self, f: &mut Visit<'_>);
    fn visit_mut(&mut self, f: &mut VisitMut<'_>);

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, kind, s, _| {
            if kind.trainable() {
                total += s.len();
            }
        });
        total
    }
}

pub(crate) fn vector_shape(len: usize) -> Shape {
    Shape::new(1, len, 1, 1)
}

pub(crate) fn visit_conv(prefix: &str, conv: &ConvParams, f: &mut Visit<'_>) {
    f(&alloc::format!("{prefix}.weight"), ParamKind::Weight, conv.weight.shape(), conv.weight.data());
    f(&alloc::format!("{prefix}.bias"), ParamKind::Bias, vector_shape(conv.bias.len()), &conv.bias);
}

pub(crate) fn visit_conv_mut(
    prefix: &str,
    conv: &mut ConvParams,
    f: &mut VisitMut<'_>,
) {
    let shape = conv.weight.shape();
    f(&alloc::format!("{prefix}.weight"), ParamKind::Weight, shape, conv.weight.data_mut());
    f(&alloc::format!("{prefix}.bias"), ParamKind::Bias, vector_shape(conv.bias.len()), &mut conv.bias);
}

pub(crate) fn visit_bn(prefix: &str, bn: &BatchNorm, f: &mut Visit<'_>) {
    let s = vector_shape(bn.channels());
    f(&alloc::format!("{prefix}.gamma"), ParamKind::Norm, s, &bn.gamma);
    f(&alloc::format!("{prefix}.beta"), ParamKind::Norm, s, &bn.beta);
    f(&alloc::format!("{prefix}.running_mean"), ParamKind::Buffer, s, &bn.running_mean);
    f(&alloc::format!("{prefix}.running_var"), ParamKind::Buffer, s, &bn.running_var);
}

pub(crate) fn visit_bn_mut(prefix: &str, bn: &mut BatchNorm, f: &mut VisitMut<'_>) {
    let s = vector_shape(bn.channels());
    f(&alloc::format!("{prefix}.gamma"), ParamKind::Norm, s, &mut bn.gamma);
    f(&alloc::format!("{prefix}.beta"), ParamKind::Norm, s, &mut bn.beta);
    f(&alloc::format!("{prefix}.running_mean"), ParamKind::Buffer, s, &mut bn.running_mean);
    f(&alloc::format!("{prefix}.running_var"), ParamKind::Buffer, s, &mut bn.running_var);
}

pub(crate) fn visit_combine(prefix: &str, w: &CombineWeights, f: &mut Visit<'_>) {
    let s = vector_shape(w.channels());
    f(&alloc::format!("{prefix}.w1"), ParamKind::Combine, s, &w.w1);
    f(&alloc::format!("{prefix}.w2"), ParamKind::Combine, s, &w.w2);
}

pub(crate) fn visit_combine_mut(
    prefix: &str,
    w: &mut CombineWeights,
    f: &mut VisitMut<'_>,
) {
    let s = vector_shape(w.channels());
    f(&alloc::format!("{prefix}.w1"), ParamKind::Combine, s, &mut w.w1);
    f(&alloc::format!("{prefix}.w2"), ParamKind::Combine, s, &mut w.w2);
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor4,
}

/// Flat, ordered snapshot of a model's tensors with optional paired gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub entries: Vec<NamedTensor>,
    pub grads: Vec<Tensor4>,
}

impl ParamStore {
    pub fn capture<P: Parameterized + ?Sized>(model: &P) -> Self {
        let mut entries = Vec::new();
        model.visit(&mut |name, kind, shape, data| {
            entries.push(NamedTensor {
                name: name.into(),
                kind,
                value: Tensor4::from_vec(shape, data.to_vec()).expect("visited shape matches data"),
            });
        });
        ParamStore { entries, grads: Vec::new() }
    }

    /// Captures `model` and pairs each entry with the same-named tensor of `grads`.
    pub fn capture_with_grads<P: Parameterized + ?Sized>(model: &P, grads: &P) -> Result<Self> {
        let mut store = Self::capture(model);
        let g = Self::capture(grads);
        if g.entries.len() != store.entries.len()
            || g.entries.iter().zip(&store.entries).any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::shape("ParamStore", "gradient layout differs from parameter layout"));
        }
        store.grads = g.entries.into_iter().map(|e| e.value).collect();
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Writes the stored values into `model`. Every tensor of the model must
    /// be present with a matching shape.
    pub fn apply_to<P: Parameterized + ?Sized>(&self, model: &mut P) -> Result<()> {
        let mut err = None;
        model.visit_mut(&mut |name, _, shape, data| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                Some(e) if e.value.shape() == shape => data.copy_from_slice(e.value.data()),
                Some(e) => {
                    err = Some(Error::shape(
                        "ParamStore::apply_to",
                        alloc::format!("{name}: stored {} vs model {shape}", e.value.shape()),
                    ))
                }
                None => err = Some(Error::invalid("ParamStore::apply_to", alloc::format!("missing tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}
