//! The trainable map from an RGB image to the `S x S x A x 22` prediction
//! tensor: a convolutional backbone (a 6-conv `tiny` variant for desk-scale
//! runs, or a darknet19-like ladder) followed by a 1x1 detection head.
//!
//! Activations (sigmoid on center/confidence, exp on sizes) are applied by
//! the codec and the loss, not here — the head emits raw logits.
//!
//! Freezing the backbone removes its parameters from gradient updates and
//! pins its batch-norm layers to their running statistics, so a frozen
//! backbone is bit-identical across any number of optimizer steps.

mod layers;

pub use layers::{BatchNorm2d, BnCache, Conv2d};

use berrypose_core::codec::{GridSpec, GridTensor, CHANNELS};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Output stride of every backbone in this crate.
pub const STRIDE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Tiny,
    Darknet19,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub input_width: u32,
    pub input_height: u32,
    pub anchors: usize,
    /// Channel widths of the six `tiny` convolutions (ignored by
    /// darknet19, whose ladder is fixed).
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Tiny,
            input_width: 416,
            input_height: 416,
            anchors: 5,
            channels: vec![16, 32, 64, 128, 256, 256],
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("input {0}x{1} is not divisible by the backbone stride {STRIDE}")]
    IndivisibleResolution(u32, u32),
    #[error("tiny backbone needs exactly 6 channel widths, got {0}")]
    BadChannels(usize),
    #[error("input tensor has {got} channels, expected {want}")]
    BadInput { got: usize, want: usize },
    #[error("checkpoint tensor {0} is missing")]
    MissingTensor(String),
    #[error("checkpoint tensor {name} has shape {got:?}, expected {want:?}")]
    TensorShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("checkpoint carries unexpected tensor {0}")]
    UnexpectedTensor(String),
}

enum Layer {
    Conv(Conv2d),
    Bn(BatchNorm2d),
    Leaky,
    Pool,
}

enum Cache {
    Conv(Array4<f32>),
    Bn(BnCache),
    Leaky(Array4<f32>),
    Pool { arg: Vec<u8>, in_h: usize, in_w: usize },
    Skipped,
}

pub struct Tape {
    backbone: Vec<Cache>,
    head_input: Array4<f32>,
}

pub struct Model {
    pub config: ModelConfig,
    backbone: Vec<Layer>,
    head: Conv2d,
    frozen: bool,
}

fn tiny_backbone(channels: &[usize], rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &c) in channels.iter().enumerate() {
        layers.push(Layer::Conv(Conv2d::new(cin, c, 3, 1, 1, false, rng)));
        layers.push(Layer::Bn(BatchNorm2d::new(c)));
        layers.push(Layer::Leaky);
        if i < 5 {
            layers.push(Layer::Pool);
        }
        cin = c;
    }
    layers
}

fn darknet19_backbone(rng: &mut ChaCha8Rng) -> Vec<Layer> {
    // channel ladder of the 19-layer darknet classifier, minus its 1x1
    // classification conv (the detection head replaces it)
    let plan: &[&[(usize, usize)]] = &[
        &[(32, 3)],
        &[(64, 3)],
        &[(128, 3), (64, 1), (128, 3)],
        &[(256, 3), (128, 1), (256, 3)],
        &[(512, 3), (256, 1), (512, 3), (256, 1), (512, 3)],
        &[(1024, 3), (512, 1), (1024, 3), (512, 1), (1024, 3)],
    ];
    let mut layers = Vec::new();
    let mut cin = 3;
    for (stage, block) in plan.iter().enumerate() {
        for &(c, k) in block.iter() {
            let pad = if k == 3 { 1 } else { 0 };
            layers.push(Layer::Conv(Conv2d::new(cin, c, k, 1, pad, false, rng)));
            layers.push(Layer::Bn(BatchNorm2d::new(c)));
            layers.push(Layer::Leaky);
            cin = c;
        }
        if stage < 5 {
            layers.push(Layer::Pool);
        }
    }
    layers
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Model, NetworkError> {
        if config.input_width % STRIDE != 0 || config.input_height % STRIDE != 0 {
            return Err(NetworkError::IndivisibleResolution(
                config.input_width,
                config.input_height,
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = match config.backbone {
            BackboneKind::Tiny => {
                if config.channels.len() != 6 {
                    return Err(NetworkError::BadChannels(config.channels.len()));
                }
                tiny_backbone(&config.channels, &mut rng)
            }
            BackboneKind::Darknet19 => darknet19_backbone(&mut rng),
        };
        let cin = backbone
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.weight.dim().0),
                _ => None,
            })
            .expect("backbone has convolutions");
        let mut head = Conv2d::new(cin, config.anchors * CHANNELS, 1, 1, 0, true, &mut rng);
        // zero-init the head: decoded sizes start at the dataset mean and
        // the exponential size channels cannot blow up in the first steps
        head.weight.fill(0.0);
        // start objectness strongly negative: the no-object sea dominates
        // early training and this keeps it quiet from step one
        if let Some(bias) = &mut head.bias {
            for a in 0..config.anchors {
                bias[a * CHANNELS + 21] = -4.0;
            }
        }
        Ok(Model {
            config,
            backbone,
            head,
            frozen: false,
        })
    }

    /// Grid cells `(cells_x, cells_y)` this model produces for an input
    /// resolution.
    pub fn output_cells(width: u32, height: u32) -> (usize, usize) {
        ((width / STRIDE) as usize, (height / STRIDE) as usize)
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<(), NetworkError> {
        let (_b, c, h, w) = x.dim();
        if c != 3 {
            return Err(NetworkError::BadInput { got: c, want: 3 });
        }
        if (w as u32) % STRIDE != 0 || (h as u32) % STRIDE != 0 {
            return Err(NetworkError::IndivisibleResolution(w as u32, h as u32));
        }
        Ok(())
    }

    /// Inference forward: batch-norm uses running statistics, nothing is
    /// cached, the model is untouched. Deterministic for fixed weights.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Result<Array4<f32>, NetworkError> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.backbone {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur),
                Layer::Bn(bn) => bn.forward_eval(&cur),
                Layer::Leaky => layers::leaky_forward(&cur),
                Layer::Pool => layers::maxpool2_forward(&cur).0,
            };
        }
        Ok(self.head.forward(&cur))
    }

    /// Training forward: caches everything needed for [`Model::backward`].
    /// With a frozen backbone the backbone runs in inference mode and its
    /// caches are skipped.
    pub fn forward_train(&mut self, x: &Array4<f32>) -> Result<(Array4<f32>, Tape), NetworkError> {
        self.check_input(x)?;
        let frozen = self.frozen;
        let mut caches = Vec::with_capacity(self.backbone.len());
        let mut cur = x.clone();
        for layer in &mut self.backbone {
            cur = match layer {
                Layer::Conv(c) => {
                    if frozen {
                        caches.push(Cache::Skipped);
                    } else {
                        caches.push(Cache::Conv(cur.clone()));
                    }
                    c.forward(&cur)
                }
                Layer::Bn(bn) => {
                    if frozen {
                        caches.push(Cache::Skipped);
                        bn.forward_eval(&cur)
                    } else {
                        let (y, cache) = bn.forward_train(&cur);
                        caches.push(Cache::Bn(cache));
                        y
                    }
                }
                Layer::Leaky => {
                    if frozen {
                        caches.push(Cache::Skipped);
                    } else {
                        caches.push(Cache::Leaky(cur.clone()));
                    }
                    layers::leaky_forward(&cur)
                }
                Layer::Pool => {
                    let (_b, _c, h, w) = cur.dim();
                    let (y, arg) = layers::maxpool2_forward(&cur);
                    if frozen {
                        caches.push(Cache::Skipped);
                    } else {
                        caches.push(Cache::Pool { arg, in_h: h, in_w: w });
                    }
                    y
                }
            };
        }
        let out = self.head.forward(&cur);
        Ok((out, Tape { backbone: caches, head_input: cur }))
    }

    /// Accumulates parameter gradients from the output gradient. Backbone
    /// gradients are skipped entirely while frozen.
    pub fn backward(&mut self, tape: Tape, grad_out: &Array4<f32>) {
        let mut grad = self.head.backward(&tape.head_input, grad_out);
        if self.frozen {
            return;
        }
        for (layer, cache) in self
            .backbone
            .iter_mut()
            .rev()
            .zip(tape.backbone.into_iter().rev())
        {
            grad = match (layer, cache) {
                (Layer::Conv(c), Cache::Conv(x)) => c.backward(&x, &grad),
                (Layer::Bn(bn), Cache::Bn(cache)) => bn.backward(&cache, &grad),
                (Layer::Leaky, Cache::Leaky(x)) => layers::leaky_backward(&x, &grad),
                (Layer::Pool, Cache::Pool { arg, in_h, in_w }) => {
                    layers::maxpool2_backward(&arg, &grad, in_h, in_w)
                }
                _ => unreachable!("tape misaligned with layers"),
            };
        }
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.backbone {
            match layer {
                Layer::Conv(c) => {
                    c.wgrad.fill(0.0);
                    if let Some(bg) = &mut c.bgrad {
                        bg.fill(0.0);
                    }
                }
                Layer::Bn(bn) => {
                    bn.ggrad.fill(0.0);
                    bn.bgrad.fill(0.0);
                }
                _ => {}
            }
        }
        self.head.wgrad.fill(0.0);
        if let Some(bg) = &mut self.head.bgrad {
            bg.fill(0.0);
        }
    }

    /// SGD with momentum; weight decay applies to convolution weights only.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32, weight_decay: f32) {
        fn update(p: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, mom: f32, wd: f32) {
            for i in 0..p.len() {
                v[i] = mom * v[i] + g[i] + wd * p[i];
                p[i] -= lr * v[i];
            }
        }
        if !self.frozen {
            for layer in &mut self.backbone {
                match layer {
                    Layer::Conv(c) => {
                        update(
                            c.weight.as_slice_mut().unwrap(),
                            c.wgrad.as_slice().unwrap(),
                            c.wmom.as_slice_mut().unwrap(),
                            lr,
                            momentum,
                            weight_decay,
                        );
                    }
                    Layer::Bn(bn) => {
                        update(
                            bn.gamma.as_slice_mut().unwrap(),
                            bn.ggrad.as_slice().unwrap(),
                            bn.gmom.as_slice_mut().unwrap(),
                            lr,
                            momentum,
                            0.0,
                        );
                        update(
                            bn.beta.as_slice_mut().unwrap(),
                            bn.bgrad.as_slice().unwrap(),
                            bn.bmom.as_slice_mut().unwrap(),
                            lr,
                            momentum,
                            0.0,
                        );
                    }
                    _ => {}
                }
            }
        }
        update(
            self.head.weight.as_slice_mut().unwrap(),
            self.head.wgrad.as_slice().unwrap(),
            self.head.wmom.as_slice_mut().unwrap(),
            lr,
            momentum,
            weight_decay,
        );
        if let (Some(b), Some(g), Some(v)) = (
            self.head.bias.as_mut(),
            self.head.bgrad.as_ref(),
            self.head.bmom.as_mut(),
        ) {
            update(
                b.as_slice_mut().unwrap(),
                g.as_slice().unwrap(),
                v.as_slice_mut().unwrap(),
                lr,
                momentum,
                0.0,
            );
        }
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn backbone_frozen(&self) -> bool {
        self.frozen
    }

    /// Replaces the batch-norm running statistics with exact averages over
    /// the given batches (cumulative-mean momentum schedule). Weights are
    /// untouched. Small training batches leave noisy running estimates
    /// behind; this closes the train/eval normalization gap before a model
    /// is frozen into a checkpoint.
    pub fn recalibrate_bn(&mut self, batches: &[Array4<f32>]) -> Result<(), NetworkError> {
        if batches.is_empty() || self.frozen {
            return Ok(());
        }
        for (i, x) in batches.iter().enumerate() {
            let m = 1.0 / (i as f32 + 1.0);
            for layer in &mut self.backbone {
                if let Layer::Bn(bn) = layer {
                    bn.momentum = m;
                }
            }
            let _ = self.forward_train(x)?;
        }
        for layer in &mut self.backbone {
            if let Layer::Bn(bn) = layer {
                bn.momentum = 0.1;
            }
        }
        Ok(())
    }

    /// All tensors by name, in a stable order. Backbone tensor names start
    /// with `backbone.`, head tensors with `head.`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((
                        format!("backbone.{i}.weight"),
                        c.weight.shape().to_vec(),
                        c.weight.iter().copied().collect(),
                    ));
                }
                Layer::Bn(bn) => {
                    for (suffix, t) in [
                        ("gamma", &bn.gamma),
                        ("beta", &bn.beta),
                        ("running_mean", &bn.running_mean),
                        ("running_var", &bn.running_var),
                    ] {
                        out.push((
                            format!("backbone.{i}.{suffix}"),
                            vec![t.len()],
                            t.iter().copied().collect(),
                        ));
                    }
                }
                _ => {}
            }
        }
        out.push((
            "head.weight".into(),
            self.head.weight.shape().to_vec(),
            self.head.weight.iter().copied().collect(),
        ));
        if let Some(b) = &self.head.bias {
            out.push(("head.bias".into(), vec![b.len()], b.iter().copied().collect()));
        }
        out
    }

    /// Loads tensors produced by [`Model::named_tensors`]. When
    /// `backbone_only` is set, head tensors are neither expected nor
    /// touched; otherwise every tensor must be present and nothing extra
    /// may remain.
    pub fn load_named_tensors(
        &mut self,
        tensors: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
        backbone_only: bool,
    ) -> Result<(), NetworkError> {
        let mut used = std::collections::BTreeSet::new();
        let mut fetch = |name: String, want: Vec<usize>| -> Result<Vec<f32>, NetworkError> {
            match tensors.get(&name) {
                Some((shape, data)) if *shape == want => {
                    used.insert(name);
                    Ok(data.clone())
                }
                Some((shape, _)) => Err(NetworkError::TensorShape {
                    name,
                    got: shape.clone(),
                    want,
                }),
                None => Err(NetworkError::MissingTensor(name)),
            }
        };

        for (i, layer) in self.backbone.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    let data = fetch(format!("backbone.{i}.weight"), c.weight.shape().to_vec())?;
                    c.weight = Array4::from_shape_vec(c.weight.dim(), data).unwrap();
                }
                Layer::Bn(bn) => {
                    let n = bn.gamma.len();
                    bn.gamma = fetch(format!("backbone.{i}.gamma"), vec![n])?.into();
                    bn.beta = fetch(format!("backbone.{i}.beta"), vec![n])?.into();
                    bn.running_mean = fetch(format!("backbone.{i}.running_mean"), vec![n])?.into();
                    bn.running_var = fetch(format!("backbone.{i}.running_var"), vec![n])?.into();
                }
                _ => {}
            }
        }
        if !backbone_only {
            let data = fetch("head.weight".into(), self.head.weight.shape().to_vec())?;
            self.head.weight = Array4::from_shape_vec(self.head.weight.dim(), data).unwrap();
            if let Some(b) = &mut self.head.bias {
                let n = b.len();
                *b = fetch("head.bias".into(), vec![n])?.into();
            }
            for name in tensors.keys() {
                if !used.contains(name) {
                    return Err(NetworkError::UnexpectedTensor(name.clone()));
                }
            }
        } else {
            for name in tensors.keys() {
                if name.starts_with("backbone.") && !used.contains(name) {
                    return Err(NetworkError::UnexpectedTensor(name.clone()));
                }
            }
        }
        Ok(())
    }

    /// Snapshot of the backbone weights, for freeze assertions and backbone
    /// export.
    pub fn backbone_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _, _)| n.starts_with("backbone."))
            .collect()
    }

    /// SGD momentum buffers, named `opt.<tensor>`. Saved into checkpoints
    /// so a resumed run reproduces the next step exactly.
    pub fn optimizer_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            match layer {
                Layer::Conv(c) => out.push((
                    format!("opt.backbone.{i}.weight"),
                    c.wmom.shape().to_vec(),
                    c.wmom.iter().copied().collect(),
                )),
                Layer::Bn(bn) => {
                    out.push((
                        format!("opt.backbone.{i}.gamma"),
                        vec![bn.gmom.len()],
                        bn.gmom.iter().copied().collect(),
                    ));
                    out.push((
                        format!("opt.backbone.{i}.beta"),
                        vec![bn.bmom.len()],
                        bn.bmom.iter().copied().collect(),
                    ));
                }
                _ => {}
            }
        }
        out.push((
            "opt.head.weight".into(),
            self.head.wmom.shape().to_vec(),
            self.head.wmom.iter().copied().collect(),
        ));
        if let Some(b) = &self.head.bmom {
            out.push(("opt.head.bias".into(), vec![b.len()], b.iter().copied().collect()));
        }
        out
    }

    pub fn load_optimizer_tensors(
        &mut self,
        tensors: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<(), NetworkError> {
        let fetch = |name: String, want: Vec<usize>| -> Result<Option<Vec<f32>>, NetworkError> {
            match tensors.get(&name) {
                Some((shape, data)) if *shape == want => Ok(Some(data.clone())),
                Some((shape, _)) => Err(NetworkError::TensorShape {
                    name,
                    got: shape.clone(),
                    want,
                }),
                None => Ok(None),
            }
        };
        for (i, layer) in self.backbone.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    if let Some(d) = fetch(format!("opt.backbone.{i}.weight"), c.wmom.shape().to_vec())? {
                        c.wmom = Array4::from_shape_vec(c.wmom.dim(), d).unwrap();
                    }
                }
                Layer::Bn(bn) => {
                    if let Some(d) = fetch(format!("opt.backbone.{i}.gamma"), vec![bn.gmom.len()])? {
                        bn.gmom = d.into();
                    }
                    if let Some(d) = fetch(format!("opt.backbone.{i}.beta"), vec![bn.bmom.len()])? {
                        bn.bmom = d.into();
                    }
                }
                _ => {}
            }
        }
        if let Some(d) = fetch("opt.head.weight".into(), self.head.wmom.shape().to_vec())? {
            self.head.wmom = Array4::from_shape_vec(self.head.wmom.dim(), d).unwrap();
        }
        if let Some(b) = &mut self.head.bmom {
            if let Some(d) = fetch("opt.head.bias".into(), vec![b.len()])? {
                *b = d.into();
            }
        }
        Ok(())
    }

    /// Per-layer maximum absolute gradient, for dead-parameter checks.
    pub fn gradient_magnitudes(&self) -> Vec<(String, f32)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    let m = c.wgrad.iter().fold(0.0f32, |a, v| a.max(v.abs()));
                    out.push((format!("backbone.{i}.weight"), m));
                }
                Layer::Bn(bn) => {
                    let m = bn
                        .ggrad
                        .iter()
                        .chain(bn.bgrad.iter())
                        .fold(0.0f32, |a, v| a.max(v.abs()));
                    out.push((format!("backbone.{i}.bn"), m));
                }
                _ => {}
            }
        }
        let m = self.head.wgrad.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        out.push(("head.weight".into(), m));
        out
    }

    /// Swaps in a different head (used by the 2D pretraining stage, whose
    /// temporary head has a different channel count).
    pub fn replace_head(&mut self, head: Conv2d) {
        self.head = head;
    }

    pub fn head_out_channels(&self) -> usize {
        self.head.weight.dim().0
    }

    pub fn backbone_out_channels(&self) -> usize {
        self.backbone
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.weight.dim().0),
                _ => None,
            })
            .unwrap()
    }
}

/// Reorders one sample's raw prediction `(A*22, S_y, S_x)` into the codec's
/// `S_y x S_x x A x 22` tensor, widening to f64.
pub fn prediction_to_grid(pred: ArrayView3<f32>, grid: &GridSpec) -> GridTensor {
    let (c, hs, ws) = pred.dim();
    assert_eq!(c, grid.anchors * CHANNELS);
    assert_eq!(hs, grid.cells_y);
    assert_eq!(ws, grid.cells_x);
    let mut out = GridTensor::zeros(grid);
    {
        let data = out.as_mut_slice();
        for cy in 0..hs {
            for cx in 0..ws {
                for a in 0..grid.anchors {
                    let base = ((cy * ws + cx) * grid.anchors + a) * CHANNELS;
                    for ch in 0..CHANNELS {
                        data[base + ch] = pred[(a * CHANNELS + ch, cy, cx)] as f64;
                    }
                }
            }
        }
    }
    out
}

/// Inverse reordering for gradients flowing back into the network.
pub fn grid_grad_to_array(grad: &[f64], grid: &GridSpec) -> Array3<f32> {
    assert_eq!(grad.len(), grid.slots() * CHANNELS);
    let mut out = Array3::<f32>::zeros((grid.anchors * CHANNELS, grid.cells_y, grid.cells_x));
    for cy in 0..grid.cells_y {
        for cx in 0..grid.cells_x {
            for a in 0..grid.anchors {
                let base = ((cy * grid.cells_x + cx) * grid.anchors + a) * CHANNELS;
                for ch in 0..CHANNELS {
                    out[(a * CHANNELS + ch, cy, cx)] = grad[base + ch] as f32;
                }
            }
        }
    }
    out
}

/// Stacks per-sample prediction grids from a batched forward output.
pub fn batch_to_grids(pred: &Array4<f32>, grid: &GridSpec) -> Vec<GridTensor> {
    (0..pred.dim().0)
        .map(|b| prediction_to_grid(pred.index_axis(Axis(0), b), grid))
        .collect()
}
