use serde::{Deserialize, Serialize};

use super::kernels::{conv_output_size, ConvGeometry, PoolGeometry};
use crate::error::{CignError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// One layer of an F (classification) or H (router) stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        kernel: usize,
        filters: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    FullyConnected {
        width: usize,
    },
    Dropout {
        p: f64,
    },
    Flatten,
}

fn one() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

impl LayerSpec {
    pub fn conv(kernel: usize, filters: usize) -> Self {
        LayerSpec::Conv2d { kernel, filters, stride: 1, padding: Padding::Same }
    }

    pub fn pool(kernel: usize, stride: usize) -> Self {
        LayerSpec::Maxpool { kernel, stride }
    }

    pub fn fc(width: usize) -> Self {
        LayerSpec::FullyConnected { width }
    }

    pub fn dropout(p: f64) -> Self {
        LayerSpec::Dropout { p }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CignError::Config(msg));
        match *self {
            LayerSpec::Conv2d { kernel, filters, stride, .. } => {
                if kernel == 0 || filters == 0 || stride == 0 {
                    return bad(format!("conv2d needs positive kernel/filters/stride, got {self:?}"));
                }
            }
            LayerSpec::Maxpool { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return bad(format!("maxpool needs positive kernel/stride, got {self:?}"));
                }
            }
            LayerSpec::FullyConnected { width } => {
                if width == 0 {
                    return bad("fully_connected width must be positive".into());
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("dropout probability {p} outside [0, 1)"));
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        Ok(())
    }

    /// Per-sample output shape for a per-sample input shape.
    ///
    /// Fully connected layers flatten whatever they receive.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match *self {
            LayerSpec::Conv2d { kernel, filters, stride, padding } => {
                let [_, h, w] = chw(input, "conv2d")?;
                let oh = conv_output_size(h, kernel, stride, padding)
                    .ok_or_else(|| CignError::shape("conv2d", format!("height >= {kernel}"), h))?;
                let ow = conv_output_size(w, kernel, stride, padding)
                    .ok_or_else(|| CignError::shape("conv2d", format!("width >= {kernel}"), w))?;
                Ok(vec![filters, oh, ow])
            }
            LayerSpec::Maxpool { kernel, stride } => {
                let [c, h, w] = chw(input, "maxpool")?;
                if h < kernel || w < kernel {
                    return Err(CignError::shape("maxpool", format!("spatial >= {kernel}"), format!("{h}x{w}")));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::FullyConnected { width } => Ok(vec![width]),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        }
    }

    /// Shapes of the (weight, bias) pair this layer owns, if any.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Option<(Vec<usize>, Vec<usize>)>> {
        match *self {
            LayerSpec::Conv2d { kernel, filters, .. } => {
                let [c, _, _] = chw(input, "conv2d")?;
                Ok(Some((vec![filters, c, kernel, kernel], vec![filters])))
            }
            LayerSpec::FullyConnected { width } => {
                let fan_in: usize = input.iter().product();
                Ok(Some((vec![fan_in, width], vec![width])))
            }
            _ => Ok(None),
        }
    }

    pub fn param_count(&self, input: &[usize]) -> Result<usize> {
        Ok(self
            .param_shapes(input)?
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0))
    }

    pub(crate) fn conv_geometry(&self, input: &[usize]) -> Result<ConvGeometry> {
        match *self {
            LayerSpec::Conv2d { kernel, filters, stride, padding } => {
                let [c, h, w] = chw(input, "conv2d")?;
                ConvGeometry::new(c, h, w, filters, kernel, stride, padding)
            }
            _ => Err(CignError::Usage(format!("{} is not a convolution", self.name()))),
        }
    }

    pub(crate) fn pool_geometry(&self, input: &[usize]) -> Result<PoolGeometry> {
        match *self {
            LayerSpec::Maxpool { kernel, stride } => {
                let [c, h, w] = chw(input, "maxpool")?;
                PoolGeometry::new(c, h, w, kernel, stride)
            }
            _ => Err(CignError::Usage(format!("{} is not a pooling layer", self.name()))),
        }
    }
}

fn chw(shape: &[usize], ctx: &str) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(CignError::shape(ctx, "C x H x W", format!("{shape:?}"))),
    }
}
