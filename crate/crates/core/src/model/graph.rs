//! Declarative layer graph and the reports derived from it.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::activations::Activation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv2d,
    Conv3d,
    Conv2dTransposed,
    MaxPool,
    Dropout,
    BatchNorm,
    Concat,
    /// Keeps the center time step of a temporal stack.
    CenterSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Kernel extents; `t` is 1 for spatial-only layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Kernel {
    pub const UNIT: Kernel = Kernel { t: 1, h: 1, w: 1 };

    pub fn square(k: usize) -> Self {
        Self { t: 1, h: k, w: k }
    }

    pub fn cube(k: usize) -> Self {
        Self { t: k, h: k, w: k }
    }
}

/// L2 factor carried by the regularized decoder kernels.
pub const DECODER_L2_FACTOR: f64 = 0.0005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub kernel: Kernel,
    /// Output channels of convolutions; 0 for other kinds.
    pub filters: usize,
    pub stride: usize,
    pub padding: Padding,
    pub trainable: bool,
    pub activation: Activation,
    pub l2_factor: Option<f64>,
    /// Drop probability of dropout layers.
    pub rate: Option<f64>,
}

impl LayerSpec {
    fn new(name: &str, kind: LayerKind, input: &str) -> Self {
        Self {
            name: name.to_string(),
            kind,
            inputs: vec![input.to_string()],
            kernel: Kernel::UNIT,
            filters: 0,
            stride: 1,
            padding: Padding::Same,
            trainable: true,
            activation: Activation::None,
            l2_factor: None,
            rate: None,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv2d | LayerKind::Conv3d | LayerKind::Conv2dTransposed
        )
    }
}

/// Per-frame output dimensions of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// An immutable, validated layer graph in topological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    dims: Vec<Dims>,
}

/// Names of the encoder layers initialized from VGG-16.
pub const VGG_LAYERS: [&str; 7] = [
    "Conv2D_1", "Conv2D_2", "Conv2D_3", "Conv2D_4", "Conv2D_5", "Conv2D_6", "Conv2D_7",
];

struct Builder<'a> {
    config: &'a ModelConfig,
    layers: Vec<LayerSpec>,
    last: String,
}

impl Builder<'_> {
    fn push(&mut self, spec: LayerSpec) -> &str {
        self.last = spec.name.clone();
        self.layers.push(spec);
        &self.last
    }

    fn conv(&mut self, name: &str, kind: LayerKind, kernel: Kernel, filters: usize, stride: usize) {
        let mut s = LayerSpec::new(name, kind, &self.last.clone());
        s.kernel = kernel;
        s.filters = self.config.filters(filters);
        s.stride = stride;
        s.activation = Activation::Relu;
        if VGG_LAYERS.contains(&name) {
            s.trainable = !self.config.freeze_vgg;
        }
        self.push(s);
    }

    fn conv2d(&mut self, name: &str, k: usize, filters: usize) {
        self.conv(name, LayerKind::Conv2d, Kernel::square(k), filters, 1);
    }

    fn conv3d(&mut self, name: &str, filters: usize) {
        self.conv(name, LayerKind::Conv3d, Kernel::cube(3), filters, 1);
    }

    fn deconv(&mut self, name: &str, k: usize, filters: usize, stride: usize) {
        self.conv(name, LayerKind::Conv2dTransposed, Kernel::square(k), filters, stride);
    }

    fn simple(&mut self, name: &str, kind: LayerKind) {
        let mut s = LayerSpec::new(name, kind, &self.last.clone());
        if kind == LayerKind::MaxPool {
            s.kernel = Kernel::square(2);
            s.stride = 2;
            s.padding = Padding::Valid;
        }
        if kind == LayerKind::Dropout {
            s.rate = Some(self.config.dropout_rate);
        }
        self.push(s);
    }

    fn batch_norm(&mut self, name: &str) {
        if self.config.use_batch_norm {
            self.simple(name, LayerKind::BatchNorm);
        }
    }
}

impl Graph {
    /// Build the network graph for `config`.
    pub fn build(config: &ModelConfig) -> Result<Graph> {
        config.validate()?;
        let mut b = Builder {
            config,
            layers: Vec::new(),
            last: String::new(),
        };
        b.layers.push(LayerSpec::new("Input", LayerKind::Input, ""));
        b.layers[0].inputs.clear();
        b.last = "Input".into();

        // EC1
        b.conv2d("Conv2D_1", 3, 64);
        b.conv2d("Conv2D_2", 3, 64);
        b.simple("MaxPooling_1", LayerKind::MaxPool);
        b.batch_norm("BatchNorm_1");

        // Low-Level Conv3D
        if config.use_low_level_conv3d {
            b.conv3d("Conv3D_1", 64);
            b.conv3d("Conv3D_2", 64);
        }
        b.batch_norm("BatchNorm_2");
        let ec2_input = b.last.clone();

        // EC2
        b.conv2d("Conv2D_3", 3, 128);
        b.conv2d("Conv2D_4", 3, 128);
        b.simple("MaxPooling_2", LayerKind::MaxPool);
        let pool2 = b.last.clone();
        b.batch_norm("BatchNorm_3");
        b.conv2d("Conv2D_5", 3, 256);
        b.conv2d("Conv2D_6", 3, 256);
        b.conv2d("Conv2D_7", 3, 256);
        b.batch_norm("BatchNorm_4");
        b.conv2d("Conv2D_8", 3, 512);
        b.simple("Dropout_1", LayerKind::Dropout);
        b.conv2d("Conv2D_9", 3, 512);
        b.simple("Dropout_2", LayerKind::Dropout);
        b.conv2d("Conv2D_10", 3, 512);
        b.simple("Dropout_3", LayerKind::Dropout);
        b.batch_norm("BatchNorm_5");
        b.conv2d("Conv2D_11", 3, 512);
        b.conv2d("Conv2D_12", 3, 512);

        // multi feature map fusion
        if config.use_fusion {
            let mut pool3 = LayerSpec::new("MaxPooling_3", LayerKind::MaxPool, &ec2_input);
            pool3.kernel = Kernel::square(2);
            pool3.stride = 2;
            pool3.padding = Padding::Valid;
            b.layers.push(pool3);
            let mut cat = LayerSpec::new("Concatenate", LayerKind::Concat, "");
            cat.inputs = ["MaxPooling_3", pool2.as_str(), "Conv2D_7", "Dropout_3", "Conv2D_12"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            b.push(cat);
        }
        b.batch_norm("BatchNorm_6");

        // High-Level Conv3D
        b.conv3d("Conv3D_3", 256);
        b.conv3d("Conv3D_4", 128);
        b.conv3d("Conv3D_5", 64);
        b.simple("CenterSlice", LayerKind::CenterSlice);
        b.batch_norm("BatchNorm_7");

        // DC
        b.deconv("Conv2DT_1", 1, 64, 1);
        b.deconv("Conv2DT_2", 3, 64, 1);
        b.deconv("Conv2DT_3", 1, 512, 1);
        b.batch_norm("BatchNorm_8");
        b.deconv("Conv2DT_4", 1, 64, 1);
        b.deconv("Conv2DT_5", 5, 64, 2);
        b.deconv("Conv2DT_6", 1, 256, 1);
        b.batch_norm("BatchNorm_9");
        b.deconv("Conv2DT_7", 1, 64, 1);
        b.deconv("Conv2DT_8", 3, 64, 1);
        b.deconv("Conv2DT_9", 1, 128, 1);
        b.batch_norm("BatchNorm_10");
        b.deconv("Conv2DT_10", 5, 64, 2);
        b.deconv("Conv2DT_11", 1, 1, 1);

        let mut layers = b.layers;
        for l in layers.iter_mut() {
            match l.name.as_str() {
                "Conv2DT_4" | "Conv2DT_7" => l.l2_factor = Some(DECODER_L2_FACTOR),
                "Conv2DT_11" => {
                    l.activation = Activation::Sigmoid;
                    // the single output map is never scaled
                    l.filters = 1;
                }
                _ => {}
            }
        }
        Self::from_layers(config.clone(), layers)
    }

    /// Validate a layer list and infer its dimensions.
    pub fn from_layers(config: ModelConfig, layers: Vec<LayerSpec>) -> Result<Graph> {
        let (h, w) = config.input_hw;
        let mut dims: Vec<Dims> = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            let ins: Vec<Dims> = l
                .inputs
                .iter()
                .map(|name| {
                    layers[..i]
                        .iter()
                        .position(|p| &p.name == name)
                        .map(|j| dims[j])
                        .ok_or_else(|| Error::UnknownLayer(name.clone()))
                })
                .collect::<Result<_>>()?;
            let first = ins.first().copied();
            let one = || first.ok_or_else(|| Error::Config(format!("{} has no input", l.name)));
            let d = match l.kind {
                LayerKind::Input => Dims {
                    t: config.n,
                    h,
                    w,
                    c: 3,
                },
                LayerKind::Conv2d | LayerKind::Conv3d => {
                    let d = one()?;
                    Dims {
                        t: d.t,
                        h: d.h.div_ceil(l.stride),
                        w: d.w.div_ceil(l.stride),
                        c: l.filters,
                    }
                }
                LayerKind::Conv2dTransposed => {
                    let d = one()?;
                    Dims {
                        t: d.t,
                        h: d.h * l.stride,
                        w: d.w * l.stride,
                        c: l.filters,
                    }
                }
                LayerKind::MaxPool => {
                    let d = one()?;
                    Dims {
                        t: d.t,
                        h: d.h / 2,
                        w: d.w / 2,
                        c: d.c,
                    }
                }
                LayerKind::Dropout | LayerKind::BatchNorm => one()?,
                LayerKind::CenterSlice => Dims { t: 1, ..one()? },
                LayerKind::Concat => {
                    let d = one()?;
                    if ins.iter().any(|o| (o.t, o.h, o.w) != (d.t, d.h, d.w)) {
                        return Err(Error::Shape(format!(
                            "{} joins inputs of different spatial size",
                            l.name
                        )));
                    }
                    Dims {
                        c: ins.iter().map(|o| o.c).sum(),
                        ..d
                    }
                }
            };
            dims.push(d);
        }
        Ok(Graph {
            config,
            layers,
            dims,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn dims(&self) -> &[Dims] {
        &self.dims
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.index_of(name).map(|i| &self.layers[i])
    }

    /// Channel count feeding layer `i` (its first input).
    pub fn input_channels(&self, i: usize) -> usize {
        self.layers[i]
            .inputs
            .first()
            .and_then(|n| self.index_of(n))
            .map(|j| self.dims[j].c)
            .unwrap_or(0)
    }

    /// Closed-form parameter count of layer `i`.
    pub fn param_count(&self, i: usize) -> usize {
        let l = &self.layers[i];
        let cin = self.input_channels(i);
        match l.kind {
            LayerKind::Conv2d | LayerKind::Conv2dTransposed | LayerKind::Conv3d => {
                l.kernel.t * l.kernel.h * l.kernel.w * cin * l.filters + l.filters
            }
            LayerKind::BatchNorm => 4 * cin,
            _ => 0,
        }
    }

    pub fn parameter_report(&self) -> ParameterReport {
        let rows: Vec<ParameterRow> = (0..self.layers.len())
            .filter(|&i| self.param_count(i) > 0)
            .map(|i| ParameterRow {
                layer: self.layers[i].name.clone(),
                parameters: self.param_count(i),
                trainable: self.layers[i].trainable,
            })
            .collect();
        let trainable = rows.iter().filter(|r| r.trainable).map(|r| r.parameters).sum();
        let frozen = rows.iter().filter(|r| !r.trainable).map(|r| r.parameters).sum();
        ParameterReport {
            rows,
            trainable,
            frozen,
        }
    }

    pub fn dims_report(&self) -> Vec<DimsRow> {
        self.layers
            .iter()
            .zip(&self.dims)
            .skip(1)
            .map(|(l, d)| DimsRow {
                layer: l.name.clone(),
                dims: *d,
            })
            .collect()
    }

    /// Receptive field side and jump for every layer on the encoder path.
    /// Layers downstream of the first transposed convolution have no entry.
    pub fn receptive_field_report(&self) -> ReceptiveFieldReport {
        let mut rf: Vec<Option<(usize, usize)>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let ins: Option<Vec<(usize, usize)>> = l
                .inputs
                .iter()
                .map(|n| self.index_of(n).and_then(|j| rf[j]))
                .collect();
            let v = match (l.kind, ins) {
                (LayerKind::Input, _) => Some((1, 1)),
                (LayerKind::Conv2dTransposed, _) | (_, None) => None,
                (_, Some(ins)) if ins.is_empty() => None,
                (LayerKind::Concat, Some(ins)) => {
                    Some(ins.iter().fold((0, 0), |a, b| (a.0.max(b.0), a.1.max(b.1))))
                }
                (_, Some(ins)) => {
                    let (r, j) = ins[0];
                    let k = l.kernel.h;
                    Some((r + (k - 1) * j, j * l.stride))
                }
            };
            rf.push(v);
        }
        let rows = self
            .layers
            .iter()
            .zip(&rf)
            .skip(1)
            .filter_map(|(l, v)| {
                v.map(|(r, j)| ReceptiveFieldRow {
                    layer: l.name.clone(),
                    size: r,
                    jump: j,
                })
            })
            .collect();
        ReceptiveFieldReport { rows }
    }

    /// Receptive field side length of `layer`.
    pub fn receptive_field(&self, layer: &str) -> Result<usize> {
        if self.index_of(layer).is_none() {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        self.receptive_field_report()
            .rows
            .iter()
            .find(|r| r.layer == layer)
            .map(|r| r.size)
            .ok_or_else(|| Error::Config(format!("{layer} is not on the encoder path")))
    }

    /// Names of layers whose kernels carry an l2 penalty.
    pub fn l2_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.l2_factor.is_some())
            .map(|l| l.name.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub layer: String,
    pub parameters: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub rows: Vec<ParameterRow>,
    pub trainable: usize,
    pub frozen: usize,
}

impl ParameterReport {
    pub fn get(&self, layer: &str) -> Option<&ParameterRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,value,trainable\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.layer, r.parameters, r.trainable));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimsRow {
    pub layer: String,
    pub dims: Dims,
}

pub fn dims_csv(rows: &[DimsRow]) -> String {
    let mut s = String::from("layer,t,h,w,c\n");
    for r in rows {
        let d = r.dims;
        s.push_str(&format!("{},{},{},{},{}\n", r.layer, d.t, d.h, d.w, d.c));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveFieldRow {
    pub layer: String,
    pub size: usize,
    pub jump: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveFieldReport {
    pub rows: Vec<ReceptiveFieldRow>,
}

impl ReceptiveFieldReport {
    pub fn get(&self, layer: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.layer == layer).map(|r| r.size)
    }

    pub fn to_csv(&self, graph: &Graph) -> String {
        let mut s = String::from("layer,value,trainable\n");
        for r in &self.rows {
            let trainable = graph.layer(&r.layer).map(|l| l.trainable).unwrap_or(false);
            s.push_str(&format!("{},{},{}\n", r.layer, r.size, trainable));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_graph_has_fused_depth_1472() {
        let g = Graph::build(&ModelConfig::default()).unwrap();
        let i = g.index_of("Concatenate").unwrap();
        assert_eq!(g.dims()[i], Dims { t: 5, h: 60, w: 80, c: 1472 });
        let out = *g.dims().last().unwrap();
        assert_eq!(out, Dims { t: 1, h: 240, w: 320, c: 1 });
        let ec1 = g.dims()[g.index_of("BatchNorm_1").unwrap()];
        assert_eq!((ec1.h, ec1.w, ec1.c), (120, 160, 64));
    }

    #[test]
    fn build_rejects_indivisible_input() {
        let c = ModelConfig {
            input_hw: (30, 40),
            ..Default::default()
        };
        assert!(matches!(Graph::build(&c), Err(Error::Config(_))));
    }

    #[test]
    fn fully_convolutional_for_any_multiple_of_four() {
        for (h, w) in [(4, 4), (8, 12), (36, 20)] {
            let c = ModelConfig {
                input_hw: (h, w),
                ..Default::default()
            };
            let g = Graph::build(&c).unwrap();
            assert_eq!(*g.dims().last().unwrap(), Dims { t: 1, h, w, c: 1 });
        }
    }

    #[test]
    fn parameter_examples() {
        let g = Graph::build(&ModelConfig::default()).unwrap();
        let r = g.parameter_report();
        assert_eq!(r.get("Conv2D_1").unwrap().parameters, 1_792);
        assert_eq!(r.get("Conv3D_3").unwrap().parameters, 10_174_720);
        assert_eq!(r.get("BatchNorm_1").unwrap().parameters, 256);
        assert!(!r.get("Conv2D_7").unwrap().trainable);
        assert!(r.get("Conv2D_8").unwrap().trainable);
        assert_eq!(r.trainable + r.frozen, r.rows.iter().map(|x| x.parameters).sum::<usize>());
    }

    #[test]
    fn unfrozen_graph_is_fully_trainable() {
        let c = ModelConfig {
            freeze_vgg: false,
            ..Default::default()
        };
        let r = Graph::build(&c).unwrap().parameter_report();
        assert!(r.rows.iter().all(|x| x.trainable));
        assert_eq!(r.frozen, 0);
    }

    #[test]
    fn ablation_graphs() {
        let c = ModelConfig {
            use_fusion: false,
            ..Default::default()
        };
        let g = Graph::build(&c).unwrap();
        assert_eq!(g.parameter_report().get("Conv3D_3").unwrap().parameters, 3_539_200);
        assert!(g.layer("Concatenate").is_none());
        let c = ModelConfig {
            use_low_level_conv3d: false,
            ..Default::default()
        };
        let g = Graph::build(&c).unwrap();
        assert!(g.layer("Conv3D_1").is_none() && g.layer("Conv3D_2").is_none());
        assert_eq!(g.dims()[g.index_of("Concatenate").unwrap()].c, 1472);
        let c = ModelConfig {
            use_batch_norm: false,
            ..Default::default()
        };
        let g = Graph::build(&c).unwrap();
        assert!(g.layers().iter().all(|l| l.kind != LayerKind::BatchNorm));
        assert_eq!(g.layer("MaxPooling_3").unwrap().inputs, vec!["Conv3D_2".to_string()]);
    }

    #[test]
    fn receptive_field_examples() {
        let g = Graph::build(&ModelConfig::default()).unwrap();
        assert_eq!(g.receptive_field("Conv2D_2").unwrap(), 5);
        assert_eq!(g.receptive_field("MaxPooling_2").unwrap(), 24);
        assert_eq!(g.receptive_field("Conv2D_12").unwrap(), 88);
        assert_eq!(g.receptive_field("MaxPooling_3").unwrap(), 16);
        assert!(matches!(g.receptive_field("Conv9"), Err(Error::UnknownLayer(_))));
        assert!(g.receptive_field("Conv2DT_3").is_err());
    }

    #[test]
    fn scaled_graph_keeps_output_and_input_channels() {
        let c = ModelConfig {
            base_filters_scale: 0.25,
            input_hw: (64, 64),
            ..Default::default()
        };
        let g = Graph::build(&c).unwrap();
        assert_eq!(g.dims()[g.index_of("Concatenate").unwrap()].c, 368);
        assert_eq!(g.dims().last().unwrap().c, 1);
        assert_eq!(g.parameter_report().get("Conv2D_1").unwrap().parameters, 27 * 16 + 16);
        assert_eq!(g.l2_layers(), vec!["Conv2DT_4", "Conv2DT_7"]);
    }
}
