use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

/// Weights `[filters][in_channels][kernel][kernel]` and one bias per filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub filters: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(filters: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            filters,
            in_channels,
            kernel,
            weights: vec![0.0; filters * in_channels * kernel * kernel],
            bias: vec![0.0; filters],
        }
    }

    fn he_normal<R: Rng>(filters: usize, in_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(filters, in_channels, kernel);
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        for w in &mut p.weights {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn filter(&self, f: usize) -> &[f64] {
        let n = self.filter_len();
        &self.weights[f * n..(f + 1) * n]
    }

    /// Squared L2 norm of one filter's weights (bias excluded).
    pub fn filter_norm_sq(&self, f: usize) -> f64 {
        self.filter(f).iter().map(|w| w * w).sum()
    }

    /// Keep only the listed output filters, in the given order.
    pub fn retain_filters(&self, keep: &[usize]) -> Self {
        let n = self.filter_len();
        let mut weights = Vec::with_capacity(keep.len() * n);
        for &f in keep {
            weights.extend_from_slice(self.filter(f));
        }
        Self {
            filters: keep.len(),
            in_channels: self.in_channels,
            kernel: self.kernel,
            weights,
            bias: keep.iter().map(|&f| self.bias[f]).collect(),
        }
    }

    /// Keep only the listed input channels of every filter.
    pub fn retain_inputs(&self, keep: &[usize]) -> Self {
        let k2 = self.kernel * self.kernel;
        let mut weights = Vec::with_capacity(self.filters * keep.len() * k2);
        for f in 0..self.filters {
            let filter = self.filter(f);
            for &c in keep {
                weights.extend_from_slice(&filter[c * k2..(c + 1) * k2]);
            }
        }
        Self {
            filters: self.filters,
            in_channels: keep.len(),
            kernel: self.kernel,
            weights,
            bias: self.bias.clone(),
        }
    }
}

/// Weights `[units][inputs]` and one bias per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub inputs: usize,
    pub units: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(inputs: usize, units: usize) -> Self {
        Self {
            inputs,
            units,
            weights: vec![0.0; inputs * units],
            bias: vec![0.0; units],
        }
    }

    fn he_normal<R: Rng>(inputs: usize, units: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(inputs, units);
        let std = (2.0 / inputs as f64).sqrt();
        for w in &mut p.weights {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    /// Keep only the listed input columns.
    pub fn retain_inputs(&self, keep: &[usize]) -> Self {
        let mut weights = Vec::with_capacity(self.units * keep.len());
        for u in 0..self.units {
            let row = &self.weights[u * self.inputs..(u + 1) * self.inputs];
            weights.extend(keep.iter().map(|&j| row[j]));
        }
        Self {
            inputs: keep.len(),
            units: self.units,
            weights,
            bias: self.bias.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Conv(ConvParams),
    Residual {
        conv1: ConvParams,
        conv2: ConvParams,
        proj: ConvParams,
    },
    Dense(DenseParams),
    None,
}

impl LayerParams {
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        match self {
            LayerParams::Conv(p) => vec![&p.weights, &p.bias],
            LayerParams::Residual { conv1, conv2, proj } => vec![
                &conv1.weights,
                &conv1.bias,
                &conv2.weights,
                &conv2.bias,
                &proj.weights,
                &proj.bias,
            ],
            LayerParams::Dense(p) => vec![&p.weights, &p.bias],
            LayerParams::None => vec![],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            LayerParams::Conv(p) => vec![&mut p.weights, &mut p.bias],
            LayerParams::Residual { conv1, conv2, proj } => vec![
                &mut conv1.weights,
                &mut conv1.bias,
                &mut conv2.weights,
                &mut conv2.bias,
                &mut proj.weights,
                &mut proj.bias,
            ],
            LayerParams::Dense(p) => vec![&mut p.weights, &mut p.bias],
            LayerParams::None => vec![],
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, LayerParams::Dense(_))
    }
}

/// All trainable arrays of a network, one entry per layer of its spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
}

impl Parameters {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        Self::build(spec, ConvParams::zeros, DenseParams::zeros)
    }

    /// He-normal weights, zero biases.
    pub fn random<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            spec,
            |f, c, k| ConvParams::he_normal(f, c, k, &mut *rng.borrow_mut()),
            |i, u| DenseParams::he_normal(i, u, &mut *rng.borrow_mut()),
        )
    }

    fn build(
        spec: &NetworkSpec,
        mut conv: impl FnMut(usize, usize, usize) -> ConvParams,
        mut dense: impl FnMut(usize, usize) -> DenseParams,
    ) -> Result<Self> {
        let inputs = spec.layer_inputs()?;
        let layers = spec
            .layers
            .iter()
            .zip(&inputs)
            .map(|(layer, inp)| match *layer {
                LayerSpec::Conv {
                    kernel, filters, ..
                } => LayerParams::Conv(conv(filters, inp.channels, kernel)),
                LayerSpec::Residual {
                    kernel,
                    mid_filters,
                    filters,
                    ..
                } => LayerParams::Residual {
                    conv1: conv(mid_filters, inp.channels, kernel),
                    conv2: conv(filters, mid_filters, kernel),
                    proj: conv(filters, inp.channels, 1),
                },
                LayerSpec::Dense { units, .. } => LayerParams::Dense(dense(inp.len(), units)),
                LayerSpec::AvgPool { .. } | LayerSpec::Softmax => LayerParams::None,
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Every array in canonical order (layer order, weights before bias).
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    /// Rebuild from [`flatten`](Self::flatten) output for a spec.
    pub fn from_flat(spec: &NetworkSpec, values: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        if params.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "spec needs {} parameters, got {}",
                params.len(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in params.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    /// `self += scale * other`; both must share a layout.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Checks that every array matches the size `spec` implies.
    pub fn check_shapes(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = Self::zeros(spec)?;
        let ok = expected.layers.len() == self.layers.len()
            && expected
                .tensors()
                .iter()
                .zip(self.tensors())
                .all(|(a, b)| a.len() == b.len())
            && expected.tensors().len() == self.tensors().len();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(
                "parameter arrays do not match the network spec".into(),
            ))
        }
    }

    /// Bit-level fingerprint of the non-dense arrays (FNV-1a over f64 bits).
    pub fn frozen_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in self.layers.iter().filter(|l| !l.is_dense()) {
            for t in layer.tensors() {
                for v in t {
                    for b in v.to_bits().to_le_bytes() {
                        hash ^= b as u64;
                        hash = hash.wrapping_mul(0x0100_0000_01b3);
                    }
                }
            }
        }
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(filters: usize, in_channels: usize, kernel: usize) -> ConvParams {
        let mut p = ConvParams::zeros(filters, in_channels, kernel);
        p.weights
            .iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w = i as f64);
        p.bias
            .iter_mut()
            .enumerate()
            .for_each(|(i, b)| *b = 100.0 + i as f64);
        p
    }

    #[test]
    fn retain_filters_keeps_whole_filters() {
        let p = numbered(3, 2, 2);
        let kept = p.retain_filters(&[2, 0]);
        assert_eq!(kept.filters, 2);
        assert_eq!(kept.filter(0), p.filter(2));
        assert_eq!(kept.filter(1), p.filter(0));
        assert_eq!(kept.bias, vec![102.0, 100.0]);
    }

    #[test]
    fn retain_inputs_drops_channels() {
        let p = numbered(2, 3, 1);
        let kept = p.retain_inputs(&[1]);
        assert_eq!(kept.in_channels, 1);
        assert_eq!(kept.weights, vec![1.0, 4.0]);
        let d = DenseParams {
            inputs: 3,
            units: 2,
            weights: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            bias: vec![0.0; 2],
        };
        assert_eq!(d.retain_inputs(&[0, 2]).weights, vec![0.0, 2.0, 3.0, 5.0]);
    }

    #[test]
    fn filter_norm_ignores_bias() {
        let p = numbered(2, 1, 1);
        assert_eq!(p.filter_norm_sq(1), 1.0);
    }
}
