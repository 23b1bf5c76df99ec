use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// A 1×1×`len` vector shape.
    pub fn flat(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec(format!(
                "tensor shape {self} has a zero dimension"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    #[serde(alias = "identity")]
    None,
}

fn one() -> usize {
    1
}

/// One layer of a network description. Serialized with a `kind` tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        filters: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    AvgPool {
        window: usize,
    },
    /// `relu(conv2(relu(conv1(x))) + proj(x))` where conv1 has `mid_filters`
    /// filters and stride `stride`, conv2 has `filters` filters, and `proj` is
    /// a 1×1 projection with `filters` filters. Convolutions use `kernel / 2`
    /// zero padding.
    Residual {
        kernel: usize,
        mid_filters: usize,
        filters: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
    },
    Softmax,
}

/// Which filter bank of a layer a pruning decision applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterBank {
    Conv,
    /// First convolution inside a residual block.
    ResidualMid,
    /// Block output: second convolution and projection pruned as matched pairs.
    ResidualOut,
}

/// A prunable set of filters: one conv layer, or one half of a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FilterGroup {
    pub layer: usize,
    pub bank: FilterBank,
}

impl fmt::Display for FilterGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bank {
            FilterBank::Conv => write!(f, "layer {} (conv)", self.layer),
            FilterBank::ResidualMid => write!(f, "layer {} (residual mid)", self.layer),
            FilterBank::ResidualOut => write!(f, "layer {} (residual out)", self.layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: TensorShape,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl NetworkSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: NetworkSpec = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Output shape of every layer, in order. Fails on any ill-formed layer.
    pub fn layer_shapes(&self) -> Result<Vec<TensorShape>> {
        self.input_shape.validate()?;
        let mut shape = self.input_shape;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::InvalidSpec(format!("layer {i}: {msg}"));
            shape = match *layer {
                LayerSpec::Conv {
                    kernel,
                    filters,
                    stride,
                    padding,
                    ..
                } => {
                    check_kernel(kernel, stride).map_err(bad)?;
                    if filters == 0 {
                        return Err(bad("conv needs at least one filter".into()));
                    }
                    let h = conv_out(shape.height, kernel, stride, padding);
                    let w = conv_out(shape.width, kernel, stride, padding);
                    match (h, w) {
                        (Some(h), Some(w)) => TensorShape::new(filters, h, w),
                        _ => {
                            return Err(bad(format!(
                                "kernel {kernel} larger than padded input {shape}"
                            )))
                        }
                    }
                }
                LayerSpec::AvgPool { window } => {
                    if window == 0 || shape.height < window || shape.width < window {
                        return Err(bad(format!(
                            "pool window {window} does not fit input {shape}"
                        )));
                    }
                    TensorShape::new(shape.channels, shape.height / window, shape.width / window)
                }
                LayerSpec::Residual {
                    kernel,
                    mid_filters,
                    filters,
                    stride,
                } => {
                    check_kernel(kernel, stride).map_err(bad)?;
                    if mid_filters == 0 || filters == 0 {
                        return Err(bad(
                            "residual block needs at least one filter per bank".into()
                        ));
                    }
                    let pad = kernel / 2;
                    let h = conv_out(shape.height, kernel, stride, pad)
                        .ok_or_else(|| bad("input too small".into()))?;
                    let w = conv_out(shape.width, kernel, stride, pad)
                        .ok_or_else(|| bad("input too small".into()))?;
                    TensorShape::new(filters, h, w)
                }
                LayerSpec::Dense { units, .. } => {
                    if units == 0 {
                        return Err(bad("dense layer needs at least one unit".into()));
                    }
                    TensorShape::flat(units)
                }
                LayerSpec::Softmax => {
                    if i + 1 != self.layers.len() {
                        return Err(bad("softmax must be the final layer".into()));
                    }
                    shape
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Input shape of each layer (the previous layer's output).
    pub fn layer_inputs(&self) -> Result<Vec<TensorShape>> {
        let outputs = self.layer_shapes()?;
        let mut inputs = Vec::with_capacity(outputs.len());
        inputs.push(self.input_shape);
        inputs.extend(
            outputs
                .iter()
                .take(outputs.len().saturating_sub(1))
                .copied(),
        );
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::InvalidSpec("class_count must be positive".into()));
        }
        let shapes = self.layer_shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Softmax) => {}
            _ => return Err(Error::InvalidSpec("final layer must be softmax".into())),
        }
        let n = self.layers.len();
        if n < 2 || !matches!(self.layers[n - 2], LayerSpec::Dense { .. }) {
            return Err(Error::InvalidSpec(
                "softmax must follow a dense layer".into(),
            ));
        }
        if shapes[n - 1] != TensorShape::flat(self.class_count) {
            return Err(Error::InvalidSpec(format!(
                "network outputs {} values but class_count is {}",
                shapes[n - 1].len(),
                self.class_count
            )));
        }
        // Dense layers must form the tail so FC-only retraining has a clean boundary.
        let first_dense = self.first_dense_layer().unwrap_or(n);
        if self.layers[first_dense..]
            .iter()
            .any(|l| !matches!(l, LayerSpec::Dense { .. } | LayerSpec::Softmax))
        {
            return Err(Error::InvalidSpec(
                "dense layers must all come after every conv/pool layer".into(),
            ));
        }
        Ok(())
    }

    pub fn first_dense_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dense { .. }))
    }

    pub fn output_len(&self) -> usize {
        self.class_count
    }

    /// Multiply-accumulate count of one forward pass. Conv: F·C·k²·H·W of its
    /// output; dense: in·out. Pooling and softmax are free.
    pub fn count_macs(&self) -> Result<u64> {
        Ok(self.layer_macs()?.iter().sum())
    }

    pub fn layer_macs(&self) -> Result<Vec<u64>> {
        let inputs = self.layer_inputs()?;
        let outputs = self.layer_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(inputs.iter().zip(&outputs))
            .map(|(layer, (inp, out))| {
                let (c, hw) = (inp.channels as u64, out.spatial() as u64);
                match *layer {
                    LayerSpec::Conv {
                        kernel, filters, ..
                    } => filters as u64 * c * (kernel * kernel) as u64 * hw,
                    LayerSpec::Residual {
                        kernel,
                        mid_filters,
                        filters,
                        ..
                    } => {
                        let k2 = (kernel * kernel) as u64;
                        let (m, f) = (mid_filters as u64, filters as u64);
                        m * c * k2 * hw + f * m * k2 * hw + f * c * hw
                    }
                    LayerSpec::Dense { units, .. } => inp.len() as u64 * units as u64,
                    LayerSpec::AvgPool { .. } | LayerSpec::Softmax => 0,
                }
            })
            .collect())
    }

    /// Total weight + bias count.
    pub fn param_count(&self) -> Result<u64> {
        let inputs = self.layer_inputs()?;
        Ok(self
            .layers
            .iter()
            .zip(&inputs)
            .map(|(layer, inp)| {
                let c = inp.channels as u64;
                match *layer {
                    LayerSpec::Conv {
                        kernel, filters, ..
                    } => {
                        let f = filters as u64;
                        f * c * (kernel * kernel) as u64 + f
                    }
                    LayerSpec::Residual {
                        kernel,
                        mid_filters,
                        filters,
                        ..
                    } => {
                        let k2 = (kernel * kernel) as u64;
                        let (m, f) = (mid_filters as u64, filters as u64);
                        (m * c * k2 + m) + (f * m * k2 + f) + (f * c + f)
                    }
                    LayerSpec::Dense { units, .. } => {
                        let u = units as u64;
                        inp.len() as u64 * u + u
                    }
                    LayerSpec::AvgPool { .. } | LayerSpec::Softmax => 0,
                }
            })
            .sum())
    }

    /// Every prunable filter bank with its current filter count.
    pub fn filter_groups(&self) -> Vec<(FilterGroup, usize)> {
        let mut groups = Vec::new();
        for (layer, spec) in self.layers.iter().enumerate() {
            match *spec {
                LayerSpec::Conv { filters, .. } => groups.push((
                    FilterGroup {
                        layer,
                        bank: FilterBank::Conv,
                    },
                    filters,
                )),
                LayerSpec::Residual {
                    mid_filters,
                    filters,
                    ..
                } => {
                    groups.push((
                        FilterGroup {
                            layer,
                            bank: FilterBank::ResidualMid,
                        },
                        mid_filters,
                    ));
                    groups.push((
                        FilterGroup {
                            layer,
                            bank: FilterBank::ResidualOut,
                        },
                        filters,
                    ));
                }
                _ => {}
            }
        }
        groups
    }

    /// Copy of this spec with `count` filters removed from `group`.
    pub fn with_filters_removed(&self, group: FilterGroup, count: usize) -> Result<NetworkSpec> {
        let mut spec = self.clone();
        let shrink = |n: &mut usize| -> Result<()> {
            if *n <= count {
                return Err(Error::BudgetInfeasible {
                    layer: group.layer,
                    reason: format!("removing {count} of {n} filters would empty {group}"),
                });
            }
            *n -= count;
            Ok(())
        };
        match (spec.layers.get_mut(group.layer), group.bank) {
            (Some(LayerSpec::Conv { filters, .. }), FilterBank::Conv) => shrink(filters)?,
            (Some(LayerSpec::Residual { mid_filters, .. }), FilterBank::ResidualMid) => {
                shrink(mid_filters)?
            }
            (Some(LayerSpec::Residual { filters, .. }), FilterBank::ResidualOut) => {
                shrink(filters)?
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "{group} is not a prunable filter bank"
                )))
            }
        }
        Ok(spec)
    }
}

fn check_kernel(kernel: usize, stride: usize) -> std::result::Result<(), String> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(format!("kernel size {kernel} must be odd and at least 1"));
    }
    if stride == 0 {
        return Err("stride must be at least 1".into());
    }
    Ok(())
}
