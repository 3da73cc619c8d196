//! Executable network: parameters plus forward and backward passes over a
//! [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::graph::{Graph, LayerKind, LayerSpec};
use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::nn::layers::{self, BnCache, Nonlinearity};
use crate::nn::{ConvSpec, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Kernel,
    Bias,
    Gamma,
    Beta,
    MovingMean,
    MovingVariance,
}

impl ParamRole {
    /// Whether the optimizer updates this tensor (given a trainable layer).
    pub fn learnable(self) -> bool {
        !matches!(self, ParamRole::MovingMean | ParamRole::MovingVariance)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub layer: String,
    pub role: ParamRole,
    pub trainable: bool,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl Param {
    pub fn key(&self) -> String {
        format!("{}/{:?}", self.layer, self.role)
    }

    /// Whether the optimizer updates this tensor.
    pub fn is_optimized(&self) -> bool {
        self.trainable && self.role.learnable()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv {
        spec: ConvSpec,
        act: Nonlinearity,
        kernel: usize,
        bias: usize,
    },
    MaxPool,
    Dropout(f32),
    BatchNorm {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Concat,
    CenterSlice,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    trainable: bool,
    /// Some ancestor (or the node itself) holds optimized parameters.
    requires_grad: bool,
}

/// Gradients aligned with [`Network::params`]; empty for non-optimized
/// tensors.
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<Vec<f32>>,
}

enum Cache {
    None,
    Pool(Vec<u32>),
    Bn(BnCache),
    Dropout(Vec<f32>),
}

/// Activations recorded by a training forward pass.
pub struct Tape {
    outputs: Vec<Tensor>,
    caches: Vec<Cache>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("empty tape")
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    graph: Graph,
    nodes: Vec<Node>,
    params: Vec<Param>,
}

fn nonlinearity(a: Activation) -> Nonlinearity {
    match a {
        Activation::Relu => Nonlinearity::Relu,
        Activation::Sigmoid => Nonlinearity::Sigmoid,
        _ => Nonlinearity::Identity,
    }
}

impl Network {
    /// Build the graph for `config` and initialize its parameters.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Self::from_graph(Graph::build(config)?)
    }

    pub fn from_graph(graph: Graph) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(graph.config().seed);
        let mut nodes: Vec<Node> = Vec::with_capacity(graph.layers().len());
        let mut params = Vec::new();
        for (i, l) in graph.layers().iter().enumerate() {
            let inputs: Vec<usize> = l
                .inputs
                .iter()
                .map(|n| graph.index_of(n).ok_or_else(|| Error::UnknownLayer(n.clone())))
                .collect::<Result<_>>()?;
            let cin = graph.input_channels(i);
            let mut add = |role: ParamRole, data: Vec<f32>, l: &LayerSpec| {
                params.push(Param {
                    layer: l.name.clone(),
                    role,
                    trainable: l.trainable,
                    data,
                });
                params.len() - 1
            };
            let op = match l.kind {
                LayerKind::Input => Op::Input,
                LayerKind::Conv2d | LayerKind::Conv3d | LayerKind::Conv2dTransposed => {
                    let spec = ConvSpec {
                        cin,
                        cout: l.filters,
                        kt: l.kernel.t,
                        kh: l.kernel.h,
                        kw: l.kernel.w,
                        stride: l.stride,
                        transposed: l.kind == LayerKind::Conv2dTransposed,
                    };
                    let fan_in = if spec.transposed {
                        (spec.cin * spec.kh * spec.kw / (spec.stride * spec.stride)).max(1)
                    } else {
                        spec.fan_in()
                    };
                    let gain = if l.activation == Activation::Relu { 6.0 } else { 3.0 };
                    let limit = (gain / fan_in as f64).sqrt() as f32;
                    let w: Vec<f32> = (0..spec.weight_len())
                        .map(|_| rng.gen_range(-limit..=limit))
                        .collect();
                    let kernel = add(ParamRole::Kernel, w, l);
                    let bias = add(ParamRole::Bias, vec![0.0; spec.cout], l);
                    Op::Conv {
                        spec,
                        act: nonlinearity(l.activation),
                        kernel,
                        bias,
                    }
                }
                LayerKind::MaxPool => Op::MaxPool,
                LayerKind::Dropout => Op::Dropout(l.rate.unwrap_or(0.0) as f32),
                LayerKind::BatchNorm => Op::BatchNorm {
                    gamma: add(ParamRole::Gamma, vec![1.0; cin], l),
                    beta: add(ParamRole::Beta, vec![0.0; cin], l),
                    mean: add(ParamRole::MovingMean, vec![0.0; cin], l),
                    var: add(ParamRole::MovingVariance, vec![1.0; cin], l),
                },
                LayerKind::Concat => Op::Concat,
                LayerKind::CenterSlice => Op::CenterSlice,
            };
            let has_params = matches!(op, Op::Conv { .. } | Op::BatchNorm { .. });
            let requires_grad =
                (has_params && l.trainable) || inputs.iter().any(|&j| nodes[j].requires_grad);
            nodes.push(Node {
                op,
                inputs,
                trainable: l.trainable,
                requires_grad,
            });
        }
        Ok(Self {
            graph,
            nodes,
            params,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        self.graph.config()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, layer: &str, role: ParamRole) -> Option<&Param> {
        self.params.iter().find(|p| p.layer == layer && p.role == role)
    }

    pub fn param_mut(&mut self, layer: &str, role: ParamRole) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.layer == layer && p.role == role)
    }

    /// Mark layers as frozen or trainable and refresh gradient routing.
    pub fn set_trainable(&mut self, layer: &str, trainable: bool) -> Result<()> {
        let i = self
            .graph
            .index_of(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        let mut layers = self.graph.layers().to_vec();
        layers[i].trainable = trainable;
        self.graph = Graph::from_layers(self.graph.config().clone(), layers)?;
        for p in self.params.iter_mut().filter(|p| p.layer == layer) {
            p.trainable = trainable;
        }
        self.nodes[i].trainable = trainable;
        for k in 0..self.nodes.len() {
            let has_params = matches!(self.nodes[k].op, Op::Conv { .. } | Op::BatchNorm { .. });
            let upstream = self.nodes[k].inputs.iter().any(|&j| self.nodes[j].requires_grad);
            self.nodes[k].requires_grad = (has_params && self.nodes[k].trainable) || upstream;
        }
        Ok(())
    }

    /// Kernels of the l2-regularized layers.
    pub fn l2_kernels(&self) -> Vec<&[f32]> {
        let names = self.graph.l2_layers();
        self.params
            .iter()
            .filter(|p| p.role == ParamRole::Kernel && names.contains(&p.layer.as_str()))
            .map(|p| p.data.as_slice())
            .collect()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self
                .params
                .iter()
                .map(|p| if p.is_optimized() { vec![0.0; p.data.len()] } else { Vec::new() })
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let cfg = self.config();
        if s.t != cfg.n || s.c != 3 {
            return Err(Error::Shape(format!(
                "network expects (batch, {}, 3, h, w) input, got {:?}",
                cfg.n, s
            )));
        }
        if s.h % 4 != 0 || s.w % 4 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::Shape(format!(
                "input height and width must be multiples of 4, got {}x{}",
                s.h, s.w
            )));
        }
        Ok(())
    }

    /// Inference: dropout off, batch norm on moving statistics. Input is
    /// (batch, n, 3, h, w); output is (batch, 1, 1, h, w).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut outputs: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        // release activations once their last consumer has run
        let mut last_use = vec![0usize; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                last_use[j] = i;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&j| outputs[j].as_ref().expect("topological order"))
                .collect();
            let y = match &node.op {
                Op::Input => x.clone(),
                Op::Conv {
                    spec,
                    act,
                    kernel,
                    bias,
                } => {
                    let mut y = spec.forward(ins[0], &self.params[*kernel].data, &self.params[*bias].data);
                    act.apply(&mut y);
                    y
                }
                Op::MaxPool => layers::maxpool_forward(ins[0]).0,
                Op::Dropout(_) => ins[0].clone(),
                Op::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let mut m = self.params[*mean].data.clone();
                    let mut v = self.params[*var].data.clone();
                    layers::batchnorm_forward(
                        ins[0],
                        &self.params[*gamma].data,
                        &self.params[*beta].data,
                        &mut m,
                        &mut v,
                        false,
                    )
                    .0
                }
                Op::Concat => layers::concat_forward(&ins),
                Op::CenterSlice => layers::center_slice_forward(ins[0]),
            };
            outputs[i] = Some(y);
            for &j in &node.inputs {
                if last_use[j] == i {
                    outputs[j] = None;
                }
            }
        }
        Ok(outputs.pop().flatten().expect("graph has an output"))
    }

    /// Training-mode forward pass. Updates batch-norm moving statistics and
    /// samples dropout masks from `rng`.
    pub fn forward_train<R: Rng>(&mut self, x: &Tensor, rng: &mut R) -> Result<Tape> {
        self.check_input(x)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in self.nodes.iter() {
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &outputs[j]).collect();
            let (y, cache) = match &node.op {
                Op::Input => (x.clone(), Cache::None),
                Op::Conv {
                    spec,
                    act,
                    kernel,
                    bias,
                } => {
                    let mut y = spec.forward(ins[0], &self.params[*kernel].data, &self.params[*bias].data);
                    act.apply(&mut y);
                    (y, Cache::None)
                }
                Op::MaxPool => {
                    let (y, arg) = layers::maxpool_forward(ins[0]);
                    (y, Cache::Pool(arg))
                }
                Op::Dropout(rate) => {
                    if *rate > 0.0 {
                        let (y, mask) = layers::dropout_forward(ins[0], *rate, rng);
                        (y, Cache::Dropout(mask))
                    } else {
                        (ins[0].clone(), Cache::None)
                    }
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let mut m = std::mem::take(&mut self.params[*mean].data);
                    let mut v = std::mem::take(&mut self.params[*var].data);
                    let (y, cache) = layers::batchnorm_forward(
                        ins[0],
                        &self.params[*gamma].data,
                        &self.params[*beta].data,
                        &mut m,
                        &mut v,
                        true,
                    );
                    self.params[*mean].data = m;
                    self.params[*var].data = v;
                    (y, Cache::Bn(cache.expect("training cache")))
                }
                Op::Concat => (layers::concat_forward(&ins), Cache::None),
                Op::CenterSlice => (layers::center_slice_forward(ins[0]), Cache::None),
            };
            outputs.push(y);
            caches.push(cache);
        }
        Ok(Tape { outputs, caches })
    }

    /// Backpropagate `dy` (gradient of the loss with respect to the network
    /// output) through a recorded tape.
    pub fn backward(&self, tape: &Tape, dy: Tensor) -> Grads {
        let mut grads = self.zero_grads();
        let n = self.nodes.len();
        let mut dout: Vec<Option<Tensor>> = vec![None; n];
        dout[n - 1] = Some(dy);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(mut g) = dout[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let need_dx: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let dxs: Vec<Option<Tensor>> = match &node.op {
                Op::Input => vec![],
                Op::Conv {
                    spec,
                    act,
                    kernel,
                    bias,
                } => {
                    act.backward(&tape.outputs[i], &mut g);
                    let x = &tape.outputs[node.inputs[0]];
                    let w = &self.params[*kernel].data;
                    let dx = if node.trainable {
                        let (lo, hi) = grads.tensors.split_at_mut(*bias);
                        spec.backward(x, &g, w, Some((&mut lo[*kernel], &mut hi[0])), need_dx[0])
                    } else {
                        spec.backward(x, &g, w, None, need_dx[0])
                    };
                    vec![dx]
                }
                Op::MaxPool => {
                    let Cache::Pool(arg) = &tape.caches[i] else { unreachable!() };
                    let s = tape.outputs[node.inputs[0]].shape();
                    vec![need_dx[0].then(|| layers::maxpool_backward(s, arg, &g))]
                }
                Op::Dropout(_) => match &tape.caches[i] {
                    Cache::Dropout(mask) => vec![Some(layers::dropout_backward(mask, &g))],
                    _ => vec![Some(g)],
                },
                Op::BatchNorm { gamma, beta, .. } => {
                    let Cache::Bn(cache) = &tape.caches[i] else { unreachable!() };
                    let gm = &self.params[*gamma].data;
                    let mut dg = vec![0.0; gm.len()];
                    let mut db = vec![0.0; gm.len()];
                    let dx = layers::batchnorm_backward(cache, gm, &g, &mut dg, &mut db);
                    if node.trainable {
                        grads.tensors[*gamma] = dg;
                        grads.tensors[*beta] = db;
                    }
                    vec![Some(dx)]
                }
                Op::Concat => {
                    let shapes: Vec<Shape> =
                        node.inputs.iter().map(|&j| tape.outputs[j].shape()).collect();
                    layers::concat_backward(&shapes, &g).into_iter().map(Some).collect()
                }
                Op::CenterSlice => {
                    let s = tape.outputs[node.inputs[0]].shape();
                    vec![Some(layers::center_slice_backward(s, &g))]
                }
            };
            for ((&j, dx), need) in node.inputs.iter().zip(dxs).zip(need_dx) {
                let Some(dx) = dx else { continue };
                if !need {
                    continue;
                }
                match dout[j].as_mut() {
                    Some(acc) => acc.add_assign(&dx),
                    None => dout[j] = Some(dx),
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n: 3,
            input_hw: (8, 8),
            base_filters_scale: 0.0625,
            freeze_vgg: false,
            dropout_rate: 0.0,
            seed: 3,
            ..Default::default()
        }
    }

    fn input(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = cfg.input_hw;
        let s = Shape::new(b, cfg.n, 3, h, w);
        Tensor::from_vec(s, (0..s.len()).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let y = net.predict(&input(&cfg, 2, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 1, 8, 8));
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn parameter_sizes_match_report() {
        let cfg = ModelConfig {
            input_hw: (8, 8),
            base_filters_scale: 0.25,
            ..Default::default()
        };
        let net = Network::new(&cfg).unwrap();
        let report = net.graph().parameter_report();
        for row in &report.rows {
            let total: usize = net
                .params()
                .iter()
                .filter(|p| p.layer == row.layer)
                .map(|p| p.data.len())
                .sum();
            assert_eq!(total, row.parameters, "{}", row.layer);
        }
    }

    #[test]
    fn encoder_weights_are_shared_across_streams() {
        // a single kernel per layer serves every frame of the window
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let k = net.param("Conv2D_1", ParamRole::Kernel).unwrap();
        assert_eq!(k.data.len(), 3 * 3 * 3 * net.config().filters(64));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Network::new(&tiny_config()).unwrap();
        let b = Network::new(&tiny_config()).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.data == y.data));
    }

    /// Full-network gradient check on a scalar objective sum(g * y).
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = ModelConfig {
            use_batch_norm: false,
            ..tiny_config()
        };
        let mut net = Network::new(&cfg).unwrap();
        // raise the activations into a regime where ReLU kinks are rare
        for p in net.params_mut() {
            if p.role == ParamRole::Bias {
                p.data.iter_mut().for_each(|v| *v = 0.05);
            }
        }
        let x = input(&cfg, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = net.forward_train(&x, &mut rng).unwrap();
        let out = tape.output().shape();
        let gvec: Vec<f32> = (0..out.len()).map(|i| ((i * 7919) % 13) as f32 / 13.0 - 0.5).collect();
        let g = Tensor::from_vec(out, gvec.clone()).unwrap();
        let grads = net.backward(&tape, g);
        let objective = |net: &Network| -> f64 {
            let y = net.predict(&x).unwrap();
            y.data().iter().zip(&gvec).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut checked = 0;
        for (pi, name) in [(0usize, "Conv2D_1"), (0, "Conv3D_4"), (0, "Conv2DT_5"), (0, "Conv2DT_11")] {
            let idx = net
                .params()
                .iter()
                .position(|p| p.layer == name && p.role == ParamRole::Kernel)
                .unwrap()
                + pi;
            let len = net.params()[idx].data.len();
            for e in [0, len / 3, len - 1] {
                let eps = 1e-2f32;
                let mut plus = net.clone();
                plus.params_mut()[idx].data[e] += eps;
                let mut minus = net.clone();
                minus.params_mut()[idx].data[e] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps as f64);
                let an = grads.tensors[idx][e] as f64;
                let tol = 2e-3 + 0.05 * an.abs().max(fd.abs());
                assert!((fd - an).abs() < tol, "{name}[{e}]: fd {fd} vs analytic {an}");
                checked += 1;
            }
        }
        assert_eq!(checked, 12);
    }

    #[test]
    fn frozen_layers_get_no_gradient() {
        let cfg = ModelConfig {
            freeze_vgg: true,
            ..tiny_config()
        };
        let mut net = Network::new(&cfg).unwrap();
        let x = input(&cfg, 1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = net.forward_train(&x, &mut rng).unwrap();
        let dy = Tensor::from_vec(tape.output().shape(), vec![1.0; tape.output().shape().len()]).unwrap();
        let grads = net.backward(&tape, dy);
        for (p, g) in net.params().iter().zip(&grads.tensors) {
            if p.layer.starts_with("Conv2D_") && super::super::graph::VGG_LAYERS.contains(&p.layer.as_str()) {
                assert!(g.is_empty(), "{}", p.layer);
            }
        }
        let k = net.params().iter().position(|p| p.layer == "Conv3D_1" && p.role == ParamRole::Kernel).unwrap();
        assert!(grads.tensors[k].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_wrong_window_length() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let bad = Tensor::zeros(Shape::new(1, 5, 3, 8, 8));
        assert!(net.predict(&bad).is_err());
    }
}
