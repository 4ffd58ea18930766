use serde::{Deserialize, Serialize};

use super::units::ConvLayerSpec;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu { slope } => g.leaky_relu(x, slope),
        }
    }
}

/// How the layers of a [`VariationalModel`](super::VariationalModel) are wired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected stack on `N×input` rows; no activation after the last layer.
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        output: usize,
        activation: Activation,
    },
    /// Three residual encoder blocks with max pooling in between, then a
    /// residual decoder block and a plain conv block with upsampling, then a
    /// linear output conv. Every block holds three convolutions.
    EncoderDecoder {
        in_channels: usize,
        out_channels: usize,
        widths: [usize; 3],
        kernel: usize,
    },
    /// Conv pairs and single convs separated by 2×2 pooling (four pools),
    /// then two hidden dense layers and a single-logit output.
    ConvClassifier {
        in_channels: usize,
        height: usize,
        width: usize,
        widths: [usize; 4],
        dense: usize,
        kernel: usize,
        activation: Activation,
    },
}

pub(super) enum LayerShape {
    Dense { inputs: usize, outputs: usize },
    Conv { c_in: usize, c_out: usize, k: usize },
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match self {
            Architecture::Mlp { input, hidden, output, .. } => {
                positive("input", *input)?;
                positive("output", *output)?;
                hidden.iter().try_for_each(|&h| positive("hidden width", h))
            }
            Architecture::EncoderDecoder {
                in_channels,
                out_channels,
                widths,
                kernel,
            } => {
                positive("in_channels", *in_channels)?;
                positive("out_channels", *out_channels)?;
                widths.iter().try_for_each(|&w| positive("width", w))?;
                if widths[0] > widths[1] || widths[1] > widths[2] {
                    return Err(Error::Config(
                        "encoder widths must be non-decreasing for zero-padded shortcuts".into(),
                    ));
                }
                odd_kernel(*kernel)
            }
            Architecture::ConvClassifier {
                in_channels,
                height,
                width,
                widths,
                dense,
                kernel,
                ..
            } => {
                positive("in_channels", *in_channels)?;
                positive("dense", *dense)?;
                widths.iter().try_for_each(|&w| positive("width", w))?;
                if height % 16 != 0 || width % 16 != 0 || *height == 0 || *width == 0 {
                    return Err(Error::Config(format!(
                        "classifier input {height}×{width} must be a positive multiple of 16"
                    )));
                }
                odd_kernel(*kernel)
            }
        }
    }

    pub(super) fn layer_shapes(&self) -> Vec<LayerShape> {
        match self {
            Architecture::Mlp { input, hidden, output, .. } => {
                let mut dims = vec![*input];
                dims.extend(hidden);
                dims.push(*output);
                dims.windows(2)
                    .map(|w| LayerShape::Dense {
                        inputs: w[0],
                        outputs: w[1],
                    })
                    .collect()
            }
            Architecture::EncoderDecoder {
                in_channels,
                out_channels,
                widths: [w1, w2, w3],
                kernel: k,
            } => {
                let chans = [
                    (*in_channels, *w1), (*w1, *w1), (*w1, *w1),
                    (*w1, *w2), (*w2, *w2), (*w2, *w2),
                    (*w2, *w3), (*w3, *w3), (*w3, *w3),
                    (*w3, *w2), (*w2, *w2), (*w2, *w2),
                    (*w2, *w1), (*w1, *w1), (*w1, *w1),
                    (*w1, *out_channels),
                ];
                chans
                    .into_iter()
                    .map(|(c_in, c_out)| LayerShape::Conv { c_in, c_out, k: *k })
                    .collect()
            }
            Architecture::ConvClassifier {
                in_channels,
                height,
                width,
                widths: [w1, w2, w3, w4],
                dense,
                kernel: k,
                ..
            } => {
                let conv = |c_in: usize, c_out: usize| LayerShape::Conv { c_in, c_out, k: *k };
                let flat = w4 * (height / 16) * (width / 16);
                vec![
                    conv(*in_channels, *w1),
                    conv(*w1, *w1),
                    conv(*w1, *w2),
                    conv(*w2, *w2),
                    conv(*w2, *w3),
                    conv(*w3, *w4),
                    LayerShape::Dense { inputs: flat, outputs: *dense },
                    LayerShape::Dense { inputs: *dense, outputs: *dense },
                    LayerShape::Dense { inputs: *dense, outputs: 1 },
                ]
            }
        }
    }

    /// Convolution layers with the resolution each one runs at, for an
    /// `height×width` input.
    pub fn conv_layer_specs(&self, height: usize, width: usize) -> Result<Vec<ConvLayerSpec>> {
        // Downsampling exponent of each conv layer.
        let scales: &[u32] = match self {
            Architecture::Mlp { .. } => {
                return Err(Error::Config("a fully connected stack has no convolution layers".into()))
            }
            Architecture::EncoderDecoder { .. } => &[0, 0, 0, 1, 1, 1, 2, 2, 2, 1, 1, 1, 0, 0, 0, 0],
            Architecture::ConvClassifier { .. } => &[0, 0, 1, 1, 2, 3],
        };
        let div = 1usize << scales.iter().max().copied().unwrap_or(0);
        if height == 0 || width == 0 || height % div != 0 || width % div != 0 {
            return Err(Error::Config(format!("{height}×{width} is not divisible by {div}")));
        }
        Ok(self
            .layer_shapes()
            .into_iter()
            .zip(scales)
            .filter_map(|(s, &sc)| match s {
                LayerShape::Conv { c_in, c_out, k } => Some((c_in, c_out, k, sc)),
                LayerShape::Dense { .. } => None,
            })
            .enumerate()
            .map(|(i, (c_in, c_out, k, sc))| ConvLayerSpec {
                name: format!("conv{}", i + 1),
                kernel: k as u64,
                c_in: c_in as u64,
                c_out: c_out as u64,
                height: (height >> sc) as u64,
                width: (width >> sc) as u64,
            })
            .collect())
    }

    /// Wires effective weights and biases (already masked) into a forward pass.
    pub(super) fn forward(&self, g: &mut Graph, w: &[NodeId], b: &[NodeId], x: NodeId) -> Result<NodeId> {
        match self {
            Architecture::Mlp { activation, .. } => {
                let mut h = x;
                let last = w.len() - 1;
                for i in 0..w.len() {
                    h = g.matmul(h, w[i])?;
                    h = g.add_bias(h, b[i])?;
                    if i < last {
                        h = activation.apply(g, h);
                    }
                }
                Ok(h)
            }
            Architecture::EncoderDecoder { .. } => {
                let spatial = g.shape(x);
                let nd = spatial.len();
                if nd < 3 || spatial[nd - 1] % 4 != 0 || spatial[nd - 2] % 4 != 0 {
                    return Err(Error::dim(format!(
                        "encoder-decoder input {spatial:?} needs spatial extents divisible by 4"
                    )));
                }
                let conv = |g: &mut Graph, i: usize, h: NodeId| -> Result<NodeId> {
                    let y = g.conv2d(h, w[i], b[i])?;
                    Ok(g.relu(y))
                };
                // Encoder block 1: shortcut from its first conv.
                let c11 = conv(g, 0, x)?;
                let c12 = conv(g, 1, c11)?;
                let c13 = conv(g, 2, c12)?;
                let r1 = g.residual_add(c11, c13)?;
                let p1 = g.max_pool2(r1)?;
                // Blocks 2 and 3: zero-padded shortcut from the block input.
                let c21 = conv(g, 3, p1)?;
                let c22 = conv(g, 4, c21)?;
                let c23 = conv(g, 5, c22)?;
                let r2 = g.residual_add(p1, c23)?;
                let p2 = g.max_pool2(r2)?;
                let c31 = conv(g, 6, p2)?;
                let c32 = conv(g, 7, c31)?;
                let c33 = conv(g, 8, c32)?;
                let r3 = g.residual_add(p2, c33)?;
                let u1 = g.upsample2(r3)?;
                // Decoder residual block narrows channels, so the shortcut
                // comes from its first conv.
                let c41 = conv(g, 9, u1)?;
                let c42 = conv(g, 10, c41)?;
                let c43 = conv(g, 11, c42)?;
                let r4 = g.residual_add(c41, c43)?;
                let u2 = g.upsample2(r4)?;
                let c51 = conv(g, 12, u2)?;
                let c52 = conv(g, 13, c51)?;
                let c53 = conv(g, 14, c52)?;
                g.conv2d(c53, w[15], b[15])
            }
            Architecture::ConvClassifier { activation, .. } => {
                let conv = |g: &mut Graph, i: usize, h: NodeId| -> Result<NodeId> {
                    let y = g.conv2d(h, w[i], b[i])?;
                    Ok(activation.apply(g, y))
                };
                let h = conv(g, 0, x)?;
                let h = conv(g, 1, h)?;
                let h = g.max_pool2(h)?;
                let h = conv(g, 2, h)?;
                let h = conv(g, 3, h)?;
                let h = g.max_pool2(h)?;
                let h = conv(g, 4, h)?;
                let h = g.max_pool2(h)?;
                let h = conv(g, 5, h)?;
                let h = g.max_pool2(h)?;
                let s = g.shape(h).to_vec();
                let n = if s.len() == 4 { s[0] } else { 1 };
                let flat: usize = s.iter().product::<usize>() / n;
                let mut h = g.reshape(h, &[n, flat])?;
                for i in 6..9 {
                    h = g.matmul(h, w[i])?;
                    h = g.add_bias(h, b[i])?;
                    if i < 8 {
                        h = activation.apply(g, h);
                    }
                }
                Ok(h)
            }
        }
    }
}

fn odd_kernel(k: usize) -> Result<()> {
    if k % 2 == 1 {
        Ok(())
    } else {
        Err(Error::Config(format!("kernel size must be odd, got {k}")))
    }
}
