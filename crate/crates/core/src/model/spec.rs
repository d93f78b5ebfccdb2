use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv { kernel: usize, stride: usize, pad: usize, in_channels: usize, out_channels: usize },
    MaxPool { window: usize, stride: usize },
    Fc { inputs: usize, outputs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub batch_norm: bool,
    pub relu: bool,
    pub dropout: Option<f64>,
    pub bias: bool,
}

impl LayerSpec {
    fn conv(name: &str, kernel: usize, pad: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv { kernel, stride: 1, pad, in_channels, out_channels },
            batch_norm: true,
            relu: true,
            dropout: None,
            bias: false,
        }
    }

    fn pool(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::MaxPool { window: 2, stride: 2 },
            batch_norm: false,
            relu: false,
            dropout: None,
            bias: false,
        }
    }

    fn hidden_fc(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Fc { inputs, outputs },
            batch_norm: true,
            relu: true,
            dropout: Some(0.5),
            bias: false,
        }
    }

    fn score(inputs: usize, classes: usize) -> Self {
        Self {
            name: "score".into(),
            kind: LayerKind::Fc { inputs, outputs: classes },
            batch_norm: false,
            relu: false,
            dropout: None,
            bias: true,
        }
    }

    /// Channels produced by this layer's learnable map (for BN extents).
    pub fn out_channels(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv { out_channels, .. } => Some(out_channels),
            LayerKind::Fc { outputs, .. } => Some(outputs),
            LayerKind::MaxPool { .. } => None,
        }
    }
}

/// Input and output extents of one layer, `H×W×C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub input: [usize; 3],
    pub output: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[height, width, channels]`
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// The full-size network: 220×220×1 input, two classes.
    pub fn deadnet() -> Self {
        Self::with_input(220, 2).expect("the default architecture chains")
    }

    /// Same topology on a 64×64×1 input for desk-scale runs.
    pub fn deadnet64() -> Self {
        Self::with_input(64, 2).expect("the reduced architecture chains")
    }

    /// Eight conv layers in four blocks (16, 32, 64, 128 maps, each block
    /// closed by a 2×2/2 max pool), then fc 512, fc 512 and the score layer.
    /// The first conv is 9×9 unpadded; the rest are 3×3 with pad 1.
    pub fn with_input(input_size: usize, classes: usize) -> Result<Self> {
        let mut layers = vec![
            LayerSpec::conv("Conv1_1", 9, 0, 1, 16),
            LayerSpec::conv("Conv1_2", 3, 1, 16, 16),
            LayerSpec::pool("MaxPool_1"),
            LayerSpec::conv("Conv2_1", 3, 1, 16, 32),
            LayerSpec::conv("Conv2_2", 3, 1, 32, 32),
            LayerSpec::pool("MaxPool_2"),
            LayerSpec::conv("Conv3_1", 3, 1, 32, 64),
            LayerSpec::conv("Conv3_2", 3, 1, 64, 64),
            LayerSpec::pool("MaxPool_3"),
            LayerSpec::conv("Conv4_1", 3, 1, 64, 128),
            LayerSpec::conv("Conv4_2", 3, 1, 128, 128),
            LayerSpec::pool("MaxPool_4"),
        ];
        let mut spec = Self { input: [input_size, input_size, 1], classes, layers: layers.clone() };
        let shapes = spec.shapes()?;
        let [h, w, c] = shapes.last().unwrap().output;
        layers.push(LayerSpec::hidden_fc("fc_1", h * w * c, 512));
        layers.push(LayerSpec::hidden_fc("fc_2", 512, 512));
        layers.push(LayerSpec::score(512, classes));
        spec.layers = layers;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("class count {} < 2", self.classes)));
        }
        let shapes = self.shapes()?;
        let last = self.layers.last().ok_or_else(|| Error::invalid("network has no layers"))?;
        if shapes.last().unwrap().output != [1, 1, self.classes] || !matches!(last.kind, LayerKind::Fc { .. }) {
            return Err(Error::shape(format!(
                "final layer `{}` must be fc with {} outputs",
                last.name, self.classes
            )));
        }
        Ok(())
    }

    /// Chain extents through every layer, failing at the first that does not fit.
    pub fn shapes(&self) -> Result<Vec<LayerShape>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let bad = |detail: String| Error::shape(format!("layer `{}`: {detail}", layer.name));
            if let Some(p) = layer.dropout {
                if !(0.0..1.0).contains(&p) {
                    return Err(bad(format!("dropout ratio {p} outside [0, 1)")));
                }
            }
            let next = match layer.kind {
                LayerKind::Conv { kernel, stride, pad, in_channels, out_channels } => {
                    if in_channels != cur[2] {
                        return Err(bad(format!("expects {in_channels} channels, receives {}", cur[2])));
                    }
                    let h = conv_output_extent(cur[0], kernel, stride, pad);
                    let w = conv_output_extent(cur[1], kernel, stride, pad);
                    match (h, w) {
                        (Some(h), Some(w)) => [h, w, out_channels],
                        _ => return Err(bad(format!("non-positive output for input {cur:?}"))),
                    }
                }
                LayerKind::MaxPool { window, stride } => {
                    if window == 0 || stride == 0 || window > cur[0] || window > cur[1] {
                        return Err(bad(format!("window {window} does not fit input {cur:?}")));
                    }
                    [(cur[0] - window) / stride + 1, (cur[1] - window) / stride + 1, cur[2]]
                }
                LayerKind::Fc { inputs, outputs } => {
                    let flat = cur.iter().product::<usize>();
                    if inputs != flat {
                        return Err(bad(format!("expects {inputs} inputs, receives {flat}")));
                    }
                    [1, 1, outputs]
                }
            };
            if layer.batch_norm && matches!(layer.kind, LayerKind::MaxPool { .. }) {
                return Err(bad("batch norm on a pooling layer".into()));
            }
            out.push(LayerShape { input: cur, output: next });
            cur = next;
        }
        Ok(out)
    }

    /// Receptive-field geometry of a spatial layer's output: the input-pixel
    /// coordinate on which cell 0 is centred, and the spacing between cells.
    pub fn receptive_field_centres(&self, index: usize) -> Result<(f64, f64)> {
        let (mut offset, mut jump) = (0.0, 1.0);
        for layer in self.layers.get(..=index).ok_or_else(|| Error::UnknownLayer(format!("#{index}")))? {
            match layer.kind {
                LayerKind::Conv { kernel, stride, pad, .. } => {
                    offset += jump * ((kernel as f64 - 1.0) / 2.0 - pad as f64);
                    jump *= stride as f64;
                }
                LayerKind::MaxPool { window, stride } => {
                    offset += jump * (window as f64 - 1.0) / 2.0;
                    jump *= stride as f64;
                }
                LayerKind::Fc { .. } => {
                    return Err(Error::shape(format!("layer `{}` has no spatial layout", layer.name)));
                }
            }
        }
        Ok((offset, jump))
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::UnknownLayer(name.into()))
    }

    /// Learnable parameter count: weights, biases and BN scale/shift.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let weights = match l.kind {
                    LayerKind::Conv { kernel, in_channels, out_channels, .. } => {
                        kernel * kernel * in_channels * out_channels
                    }
                    LayerKind::Fc { inputs, outputs } => inputs * outputs,
                    LayerKind::MaxPool { .. } => 0,
                };
                let c = l.out_channels().unwrap_or(0);
                weights + if l.bias { c } else { 0 } + if l.batch_norm { 2 * c } else { 0 }
            })
            .sum()
    }
}
