use std::collections::HashSet;

use indexmap::IndexMap;
use thiserror::Error;

use crate::geometry::{make_adapter, ConvGeometry, FeatureShape, PoolGeometry};
use crate::nn::arch::{Architecture, LayerKind};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("architecture has no layers")]
    Empty,
    #[error("duplicate layer name `{0}`")]
    DuplicateName(String),
    #[error("layer `{layer}`: {detail}")]
    Layer { layer: String, detail: String },
    #[error("parameters have not been initialized")]
    Uninitialized,
    #[error("batch shape {got:?} does not match network input [B, {expected}]")]
    InputShape { got: Vec<usize>, expected: FeatureShape },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, got: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl NetworkError {
    fn layer(layer: &str, detail: impl Into<String>) -> Self {
        NetworkError::Layer { layer: layer.to_string(), detail: detail.into() }
    }
}

/// Static shape of the value flowing between nodes (batch excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueShape {
    Map(FeatureShape),
    Flat(usize),
}

impl ValueShape {
    pub fn with_batch(&self, batch: usize) -> Vec<usize> {
        match self {
            ValueShape::Map(s) => s.with_batch(batch).to_vec(),
            ValueShape::Flat(n) => vec![batch, *n],
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            ValueShape::Map(s) => s.channels,
            ValueShape::Flat(n) => *n,
        }
    }
}

impl std::fmt::Display for ValueShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValueShape::Map(s) => write!(f, "{s}"),
            ValueShape::Flat(n) => write!(f, "[{n}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum NodeOp {
    Conv { geom: ConvGeometry },
    BatchNorm { channels: usize },
    Relu,
    MaxPool(PoolGeometry),
    Flatten,
    Dense { inputs: usize, units: usize },
    ResidualBegin,
    ResidualEnd { adapter: Option<ConvGeometry> },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub name: String,
    pub op: NodeOp,
    pub out_shape: ValueShape,
}

/// A post-activation feature map exposed for cross-model exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapInfo {
    pub name: String,
    pub shape: FeatureShape,
    /// Position among the network's taps, starting at 0.
    pub depth: usize,
    /// Index of the producing node in the compiled graph.
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// A compiled, statically shaped network: sequential nodes with residual
/// adds, a parameter store in declaration order, batchnorm running
/// statistics, and the tap registry.
#[derive(Debug, Clone)]
pub struct NetworkGraph<T: Scalar = f32> {
    pub(crate) arch: Architecture,
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: IndexMap<String, Tensor<T>>,
    pub(crate) running: IndexMap<String, RunningStats<T>>,
    pub(crate) taps: Vec<TapInfo>,
    pub(crate) flatten_at: Option<usize>,
    pub(crate) initialized: bool,
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

impl<T: Scalar> NetworkGraph<T> {
    /// Compiles an architecture, propagating shapes statically through every
    /// layer. Parameters are allocated (zeroed) but not initialized.
    pub fn build(arch: Architecture) -> Result<Self, NetworkError> {
        let c = compile(&arch)?;
        let params = c.params.iter().map(|(name, shape)| {
            let t = if name.ends_with(".gamma") { Tensor::ones(shape) } else { Tensor::zeros(shape) };
            (name.clone(), t)
        });
        let running = c
            .batchnorms
            .iter()
            .map(|(name, ch)| (name.clone(), RunningStats { mean: vec![T::zero(); *ch], var: vec![T::one(); *ch] }));
        Ok(NetworkGraph {
            arch,
            nodes: c.nodes,
            params: params.collect(),
            running: running.collect(),
            taps: c.taps,
            flatten_at: c.flatten_at,
            initialized: false,
        })
    }

    /// Number of stored values (parameters plus batchnorm running mean and
    /// variance) an architecture needs, computed without allocating.
    pub fn storage_len(arch: &Architecture) -> Result<usize, NetworkError> {
        let c = compile(arch)?;
        let overflow = || NetworkError::layer("", "parameter count overflows");
        let mut total: usize = 0;
        for (_, shape) in &c.params {
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(overflow)?;
            total = total.checked_add(n).ok_or_else(overflow)?;
        }
        for (_, ch) in &c.batchnorms {
            total = total.checked_add(2 * ch).ok_or_else(overflow)?;
        }
        Ok(total)
    }

    /// Flattened feature width of an architecture, computed without allocating.
    pub fn static_feature_dim(arch: &Architecture) -> Result<Option<usize>, NetworkError> {
        let c = compile(arch)?;
        Ok(c.flatten_at.map(|i| match c.nodes[i].out_shape {
            ValueShape::Flat(n) => n,
            ValueShape::Map(s) => s.numel(),
        }))
    }
}

struct Compiled {
    nodes: Vec<Node>,
    params: Vec<(String, Vec<usize>)>,
    batchnorms: Vec<(String, usize)>,
    taps: Vec<TapInfo>,
    flatten_at: Option<usize>,
}

/// Largest value accepted for any size field of an architecture.
pub const MAX_ARCH_DIM: usize = 1 << 16;

fn check_limits(arch: &Architecture) -> Result<(), NetworkError> {
    let too_big = |layer: &str, what: &str, v: usize| {
        (v > MAX_ARCH_DIM).then(|| NetworkError::layer(layer, format!("{what} {v} exceeds {MAX_ARCH_DIM}")))
    };
    let i = arch.input;
    for (what, v) in [
        ("input height", i.height),
        ("input width", i.width),
        ("input channels", i.channels),
        ("class count", arch.num_classes),
    ] {
        if let Some(e) = too_big("input", what, v) {
            return Err(e);
        }
    }
    for l in &arch.layers {
        let fields: Vec<(&str, usize)> = match &l.kind {
            LayerKind::Conv { kernel_size, padding, stride, out_channels } => {
                vec![
                    ("kernel size", *kernel_size),
                    ("padding", *padding),
                    ("stride", *stride),
                    ("out channels", *out_channels),
                ]
            }
            LayerKind::Maxpool { window, stride } => vec![("window", *window), ("stride", *stride)],
            LayerKind::Dense { units } => vec![("units", *units)],
            _ => Vec::new(),
        };
        for (what, v) in fields {
            if let Some(e) = too_big(&l.name, what, v) {
                return Err(e);
            }
        }
    }
    Ok(())
}

fn compile(arch: &Architecture) -> Result<Compiled, NetworkError> {
    if arch.layers.is_empty() {
        return Err(NetworkError::Empty);
    }
    let mut seen = HashSet::new();
    for l in &arch.layers {
        if !seen.insert(l.name.as_str()) {
            return Err(NetworkError::DuplicateName(l.name.clone()));
        }
    }

    check_limits(arch)?;
    let mut nodes = Vec::with_capacity(arch.layers.len());
    let mut params: Vec<(String, Vec<usize>)> = Vec::new();
    let mut batchnorms = Vec::new();
    let mut taps = Vec::new();
    let mut flatten_at = None;
    let mut residuals: Vec<(String, ValueShape)> = Vec::new();
    let mut cur = ValueShape::Map(arch.input);

    for (idx, layer) in arch.layers.iter().enumerate() {
        let name = layer.name.as_str();
        let map_only = |cur: ValueShape| match cur {
            ValueShape::Map(s) => Ok(s),
            ValueShape::Flat(n) => Err(NetworkError::layer(name, format!("needs a feature map, got flat [{n}]"))),
        };
        let (op, out) = match &layer.kind {
            LayerKind::Conv { kernel_size, padding, stride, out_channels } => {
                let s = map_only(cur)?;
                let geom = ConvGeometry::new(*kernel_size, *padding, *stride, s.channels, *out_channels)
                    .map_err(|e| NetworkError::layer(name, e.to_string()))?;
                let out = geom.output_shape(s).map_err(|e| NetworkError::layer(name, format!("input {s}: {e}")))?;
                if !geom.divides_exactly(s.height) || !geom.divides_exactly(s.width) {
                    log::warn!("layer `{name}`: stride {stride} does not divide the padded extent of {s}; flooring");
                }
                params.push((weight_name(name), geom.kernel_shape().to_vec()));
                params.push((bias_name(name), vec![*out_channels]));
                (NodeOp::Conv { geom }, ValueShape::Map(out))
            }
            LayerKind::Batchnorm => {
                let c = cur.channels();
                params.push((format!("{name}.gamma"), vec![c]));
                params.push((format!("{name}.beta"), vec![c]));
                batchnorms.push((name.to_string(), c));
                (NodeOp::BatchNorm { channels: c }, cur)
            }
            LayerKind::Relu => {
                if let ValueShape::Map(s) = cur {
                    taps.push(TapInfo { name: name.to_string(), shape: s, depth: taps.len(), node: idx });
                }
                (NodeOp::Relu, cur)
            }
            LayerKind::Maxpool { window, stride } => {
                let s = map_only(cur)?;
                let g = PoolGeometry::new(*window, *stride).map_err(|e| NetworkError::layer(name, e.to_string()))?;
                let out = g.output_shape(s).map_err(|e| NetworkError::layer(name, format!("input {s}: {e}")))?;
                (NodeOp::MaxPool(g), ValueShape::Map(out))
            }
            LayerKind::Flatten => {
                let s = map_only(cur)?;
                flatten_at.get_or_insert(idx);
                (NodeOp::Flatten, ValueShape::Flat(s.numel()))
            }
            LayerKind::Dense { units } => {
                let ValueShape::Flat(n) = cur else {
                    return Err(NetworkError::layer(
                        name,
                        format!("dense needs a flat input, got {cur}; add a flatten"),
                    ));
                };
                if *units == 0 {
                    return Err(NetworkError::layer(name, "dense layer needs at least one unit"));
                }
                params.push((weight_name(name), vec![n, *units]));
                params.push((bias_name(name), vec![*units]));
                (NodeOp::Dense { inputs: n, units: *units }, ValueShape::Flat(*units))
            }
            LayerKind::ResidualBegin => {
                residuals.push((name.to_string(), cur));
                (NodeOp::ResidualBegin, cur)
            }
            LayerKind::ResidualEnd => {
                let (begin, skip) = residuals
                    .pop()
                    .ok_or_else(|| NetworkError::layer(name, "residual_end without a matching residual_begin"))?;
                let adapter = if skip == cur {
                    None
                } else {
                    let (ValueShape::Map(src), ValueShape::Map(dst)) = (skip, cur) else {
                        return Err(NetworkError::layer(
                            name,
                            format!("cannot add skip from `{begin}` ({skip}) to {cur}"),
                        ));
                    };
                    let spec = make_adapter(src, dst).map_err(|e| NetworkError::layer(name, e.to_string()))?;
                    let g = spec.geometry().expect("shapes differ so an adapter is needed");
                    params.push((weight_name(&format!("{name}.adapter")), g.kernel_shape().to_vec()));
                    params.push((bias_name(&format!("{name}.adapter")), vec![g.out_channels]));
                    Some(g)
                };
                (NodeOp::ResidualEnd { adapter }, cur)
            }
        };
        nodes.push(Node { name: name.to_string(), op, out_shape: out });
        cur = out;
    }

    if let Some((begin, _)) = residuals.pop() {
        return Err(NetworkError::layer(&begin, "residual_begin is never closed"));
    }
    let last = arch.layers.last().expect("non-empty");
    match (&last.kind, cur) {
        (LayerKind::Dense { .. }, ValueShape::Flat(n)) if n == arch.num_classes => {}
        // A headless backbone: everything up to the flatten boundary.
        (LayerKind::Flatten, _) if arch.num_classes == 0 => {}
        _ => {
            return Err(NetworkError::layer(
                &last.name,
                format!("network must end in a dense layer producing {} logits, got {cur}", arch.num_classes),
            ))
        }
    }
    Ok(Compiled { nodes, params, batchnorms, taps, flatten_at })
}

impl<T: Scalar> NetworkGraph<T> {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.arch.input
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Taps ordered by depth.
    pub fn list_taps(&self) -> &[TapInfo] {
        &self.taps
    }

    pub fn tap(&self, name: &str) -> Option<&TapInfo> {
        self.taps.iter().find(|t| t.name == name)
    }

    /// Static output shape of every node, in order.
    pub fn node_shapes(&self) -> Vec<(String, ValueShape)> {
        self.nodes.iter().map(|n| (n.name.clone(), n.out_shape)).collect()
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), NetworkError> {
        let slot = self.params.get_mut(name).ok_or_else(|| NetworkError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(NetworkError::ParamShape {
                name: name.to_string(),
                got: value.shape().to_vec(),
                expected: slot.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn running_stats(&self) -> &IndexMap<String, RunningStats<T>> {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut IndexMap<String, RunningStats<T>> {
        &mut self.running
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Number of conv and dense layers declared in the architecture
    /// (residual adapters excluded).
    pub fn weight_layer_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, NodeOp::Conv { .. } | NodeOp::Dense { .. })).count()
    }

    pub fn residual_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, NodeOp::ResidualEnd { .. })).count()
    }

    /// Names of the weight layers (conv and dense) in order.
    pub fn weight_layers(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, NodeOp::Conv { .. } | NodeOp::Dense { .. }))
            .map(|n| n.name.clone())
            .collect()
    }

    /// Node index of the flatten layer, i.e. the backbone/head boundary.
    pub fn flatten_index(&self) -> Option<usize> {
        self.flatten_at
    }

    /// Width of the flattened feature vector at the backbone/head boundary.
    pub fn feature_dim(&self) -> Option<usize> {
        self.flatten_at.map(|i| match self.nodes[i].out_shape {
            ValueShape::Flat(n) => n,
            ValueShape::Map(s) => s.numel(),
        })
    }

    fn node_of_param(&self, param: &str) -> Option<usize> {
        let layer = param.rsplit_once('.').map(|(l, _)| l)?;
        let layer = layer.strip_suffix(".adapter").unwrap_or(layer);
        self.nodes.iter().position(|n| n.name == layer)
    }

    /// Whether a parameter sits before the flatten boundary.
    pub fn is_backbone_param(&self, param: &str) -> bool {
        match (self.node_of_param(param), self.flatten_at) {
            (Some(i), Some(f)) => i < f,
            (Some(_), None) => true,
            _ => false,
        }
    }

    pub fn backbone_param_names(&self) -> Vec<String> {
        self.params.keys().filter(|k| self.is_backbone_param(k)).cloned().collect()
    }

    pub fn head_param_names(&self) -> Vec<String> {
        self.params.keys().filter(|k| !self.is_backbone_param(k)).cloned().collect()
    }

    /// He initialization (`N(0, 2/fan_in)`) for conv, dense and adapter
    /// weights; zero biases; batchnorm γ = 1, β = 0 and fresh running stats.
    /// Parameters are drawn in declaration order from one seeded stream.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = SeededRng::new(seed);
        for (name, t) in self.params.iter_mut() {
            if name.ends_with(".weight") {
                he_fill(t, &mut rng);
            } else if name.ends_with(".gamma") {
                t.data_mut().fill(T::one());
            } else {
                t.data_mut().fill(T::zero());
            }
        }
        for rs in self.running.values_mut() {
            rs.mean.fill(T::zero());
            rs.var.fill(T::one());
        }
        self.initialized = true;
    }

    /// Marks externally supplied parameters (e.g. from a checkpoint) as ready.
    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn cast<U: Scalar>(&self) -> NetworkGraph<U> {
        NetworkGraph {
            arch: self.arch.clone(),
            nodes: self.nodes.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, r)| {
                    let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
                    (k.clone(), RunningStats { mean: conv(&r.mean), var: conv(&r.var) })
                })
                .collect(),
            taps: self.taps.clone(),
            flatten_at: self.flatten_at,
            initialized: self.initialized,
        }
    }

    /// Every stored value in declaration order: parameters, then each
    /// batchnorm's running mean and variance.
    pub(crate) fn storage(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = self.params.iter().map(|(k, v)| (k.clone(), v.data())).collect();
        for (k, r) in &self.running {
            out.push((format!("{k}.running_mean"), &r.mean));
            out.push((format!("{k}.running_var"), &r.var));
        }
        out
    }

    pub(crate) fn storage_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = self.params.values_mut().map(|v| v.data_mut()).collect();
        for r in self.running.values_mut() {
            out.push(&mut r.mean);
            out.push(&mut r.var);
        }
        out
    }

    pub fn is_headless(&self) -> bool {
        self.arch.num_classes == 0
    }

    /// The layers up to and including flatten, with their parameters and
    /// running statistics; the classifier head is dropped.
    pub fn backbone(&self) -> Result<Self, NetworkError> {
        let cut = self.flatten_at.ok_or_else(|| {
            NetworkError::layer(
                self.arch.layers.last().map_or("", |l| l.name.as_str()),
                "network has no flatten boundary",
            )
        })?;
        let arch = Architecture {
            id: self.arch.id.clone(),
            input: self.arch.input,
            num_classes: 0,
            layers: self.arch.layers[..=cut].to_vec(),
        };
        let mut net = Self::build(arch)?;
        for (name, slot) in net.params.iter_mut() {
            *slot = self.params[name].clone();
        }
        for (name, slot) in net.running.iter_mut() {
            *slot = self.running[name].clone();
        }
        net.initialized = self.initialized;
        Ok(net)
    }

    /// Same backbone with a freshly initialized head sized for `num_classes`.
    pub fn with_new_head(&self, head_sizes: &[usize], num_classes: usize, seed: u64) -> Result<Self, NetworkError> {
        let arch = self.arch.with_head(head_sizes, num_classes).ok_or_else(|| {
            NetworkError::layer(
                self.arch.layers.last().map_or("", |l| l.name.as_str()),
                "network has no flatten boundary",
            )
        })?;
        let mut net = Self::build(arch)?;
        net.init_weights(seed);
        for name in self.backbone_param_names() {
            net.set_param(&name, self.params[&name].clone())?;
        }
        for (k, v) in &self.running {
            if let Some(slot) = net.running.get_mut(k) {
                *slot = v.clone();
            }
        }
        net.initialized = self.initialized;
        Ok(net)
    }
}

pub(crate) fn he_fill<T: Scalar>(t: &mut Tensor<T>, rng: &mut SeededRng) {
    // Kernels are [F, F, Cin, Cout] and dense weights [N, M]; fan-in is
    // everything except the last axis.
    let shape = t.shape();
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = T::from_f64_lossy(rng.normal() * std);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::LayerSpec;

    fn mnist_arch() -> Architecture {
        Architecture {
            id: None,
            input: FeatureShape::new(28, 28, 1),
            num_classes: 10,
            layers: vec![
                LayerSpec::conv("c1", 3, 1, 1, 8),
                LayerSpec::relu("r1"),
                LayerSpec::maxpool("p1", 2, 2),
                LayerSpec::flatten("flat"),
                LayerSpec::dense("fc", 10),
            ],
        }
    }

    #[test]
    fn small_net_shapes_and_taps() {
        let net = NetworkGraph::<f32>::build(mnist_arch()).unwrap();
        let taps = net.list_taps();
        assert_eq!(taps.len(), 1);
        assert_eq!(taps[0].shape, FeatureShape::new(28, 28, 8));
        assert_eq!(net.feature_dim(), Some(14 * 14 * 8));
        assert_eq!(net.param_count(), 3 * 3 * 8 + 8 + 14 * 14 * 8 * 10 + 10);
        assert!(!net.is_initialized());
    }

    #[test]
    fn empty_and_duplicate_names() {
        let mut a = mnist_arch();
        a.layers.clear();
        assert!(matches!(NetworkGraph::<f32>::build(a), Err(NetworkError::Empty)));
        let mut a = mnist_arch();
        a.layers[1].name = "c1".into();
        assert!(matches!(NetworkGraph::<f32>::build(a), Err(NetworkError::DuplicateName(_))));
    }

    #[test]
    fn propagation_error_names_layer_and_shapes() {
        let mut a = mnist_arch();
        a.layers.insert(0, LayerSpec::conv("huge", 31, 0, 1, 4));
        let err = NetworkGraph::<f32>::build(a).unwrap_err().to_string();
        assert!(err.contains("huge") && err.contains("28×28×1"), "{err}");
    }

    #[test]
    fn output_must_match_class_count() {
        let mut a = mnist_arch();
        a.num_classes = 5;
        assert!(NetworkGraph::<f32>::build(a).is_err());
    }

    #[test]
    fn residual_markers_must_balance() {
        let mut a = mnist_arch();
        a.layers.insert(0, LayerSpec::residual_begin("rb"));
        assert!(NetworkGraph::<f32>::build(a).is_err());
        let mut a = mnist_arch();
        a.layers.insert(1, LayerSpec::residual_end("re"));
        assert!(NetworkGraph::<f32>::build(a).is_err());
    }

    #[test]
    fn residual_adapter_inserted_on_channel_change() {
        let mut a = mnist_arch();
        a.layers.insert(0, LayerSpec::residual_begin("rb"));
        a.layers.insert(3, LayerSpec::residual_end("re"));
        let net = NetworkGraph::<f32>::build(a).unwrap();
        assert_eq!(net.param("re.adapter.weight").unwrap().shape(), &[1, 1, 1, 8]);
        assert_eq!(net.residual_count(), 1);
        assert!(net.is_backbone_param("re.adapter.weight"));
        assert!(!net.is_backbone_param("fc.weight"));
    }

    #[test]
    fn backbone_drops_head() {
        let mut net = NetworkGraph::<f32>::build(mnist_arch()).unwrap();
        net.init_weights(2);
        let bb = net.backbone().unwrap();
        assert!(bb.is_headless());
        assert_eq!(bb.param_count(), 3 * 3 * 8 + 8);
        assert_eq!(bb.param("c1.weight"), net.param("c1.weight"));
    }

    #[test]
    fn init_is_seeded() {
        let mut a = NetworkGraph::<f32>::build(mnist_arch()).unwrap();
        let mut b = a.clone();
        a.init_weights(5);
        b.init_weights(5);
        assert_eq!(a.params(), b.params());
        b.init_weights(6);
        assert_ne!(a.params(), b.params());
        assert!(a.param("c1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn new_head_keeps_backbone() {
        let mut net = NetworkGraph::<f32>::build(mnist_arch()).unwrap();
        net.init_weights(1);
        let tl = net.with_new_head(&[16], 3, 9).unwrap();
        assert_eq!(tl.num_classes(), 3);
        assert_eq!(tl.param("c1.weight"), net.param("c1.weight"));
        assert!(tl.param("head.fc0.weight").is_some());
        assert!(tl.param("fc.weight").is_none());
    }
}
