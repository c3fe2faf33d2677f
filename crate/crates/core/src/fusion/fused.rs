//! The fused network and its interleaved forward pass.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, Tape, Var};
use crate::fusion::plan::{FusionPlan, HeadSpec, Side};
use crate::fusion::FusionError;
use crate::nn::{all_trainable, apply_moments, he_fill, ActivationTrace, Architecture, Mode, NetworkGraph, Runner};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which part of the fused model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Provenance {
    FromA,
    FromB,
    Adapter,
    Head,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [Provenance::FromA, Provenance::FromB, Provenance::Adapter, Provenance::Head];

    pub fn of(name: &str) -> Option<Provenance> {
        let (group, _) = name.split_once('/')?;
        match group {
            "a" => Some(Provenance::FromA),
            "b" => Some(Provenance::FromB),
            "adapter" => Some(Provenance::Adapter),
            "head" => Some(Provenance::Head),
            _ => None,
        }
    }
}

/// Structure of a fused network: both headless backbones plus the plan
/// (with its head). This is what a fused checkpoint embeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedArchitecture {
    pub a: Architecture,
    pub b: Architecture,
    pub plan: FusionPlan,
}

/// Two headless backbones, the adapter convolutions of every exchange link
/// and the dense head over the concatenated features.
///
/// Parameters are addressed as `a/<name>`, `b/<name>`, `adapter/link<i>.*`
/// and `head/<layer>.*`; the same names appear in gradients.
#[derive(Debug, Clone)]
pub struct FusedNetwork<T: Scalar = f32> {
    a: NetworkGraph<T>,
    b: NetworkGraph<T>,
    plan: FusionPlan,
    adapters: IndexMap<String, Tensor<T>>,
    head: IndexMap<String, Tensor<T>>,
    schedule: Vec<(Side, usize)>,
    /// Links injected right before the given node of the given side runs.
    injections: BTreeMap<(Side, usize), Vec<usize>>,
}

pub struct FusedOutput<T: Scalar> {
    pub logits: Var,
    pub features_a: Var,
    pub features_b: Var,
    pub trace_a: ActivationTrace<T>,
    pub trace_b: ActivationTrace<T>,
    pub moments_a: Vec<(String, BatchMoments<T>)>,
    pub moments_b: Vec<(String, BatchMoments<T>)>,
}

fn never_trainable(_: &str) -> bool {
    false
}

fn head_layer_names(head: &HeadSpec) -> Vec<String> {
    let mut names: Vec<String> = (0..head.hidden.len()).map(|i| format!("fc{i}")).collect();
    names.push("logits".into());
    names
}

/// Builds the fused network from two pretrained networks.
///
/// Backbone weights and batchnorm statistics are copied unchanged and the
/// original heads are cut at the flatten boundary. Adapters start at zero,
/// so initially every injection adds nothing; the head is He-initialized
/// from `seed`.
pub fn build_fused<T: Scalar>(
    a: &NetworkGraph<T>,
    b: &NetworkGraph<T>,
    plan: &FusionPlan,
    num_classes: usize,
    head_sizes: &[usize],
    seed: u64,
) -> Result<FusedNetwork<T>, FusionError> {
    if !a.is_initialized() || !b.is_initialized() {
        return Err(FusionError::Plan("both networks must carry trained parameters".into()));
    }
    if num_classes == 0 || head_sizes.contains(&0) {
        return Err(FusionError::Plan("head sizes and class count must be positive".into()));
    }
    let mut plan = plan.clone();
    plan.head = Some(HeadSpec { hidden: head_sizes.to_vec(), num_classes });
    let a = if a.is_headless() { a.clone() } else { a.backbone()? };
    let b = if b.is_headless() { b.clone() } else { b.backbone()? };
    let mut fused = FusedNetwork::assemble(a, b, plan)?;
    let mut rng = SeededRng::derive(seed, "fusion-head");
    for (name, t) in fused.head.iter_mut() {
        if name.ends_with(".weight") {
            he_fill(t, &mut rng);
        }
    }
    Ok(fused)
}

impl<T: Scalar> FusedNetwork<T> {
    /// Structure only: backbones as given, adapters and head zeroed.
    fn assemble(a: NetworkGraph<T>, b: NetworkGraph<T>, plan: FusionPlan) -> Result<Self, FusionError> {
        let head = plan.head.clone().ok_or_else(|| FusionError::Plan("plan has no head".into()))?;
        if a.input_shape() != b.input_shape() {
            return Err(FusionError::Plan(format!(
                "models take different inputs ({} vs {}); both must consume the same batch",
                a.input_shape(),
                b.input_shape()
            )));
        }
        plan.validate(&a, &b)?;

        let mut adapters = IndexMap::new();
        for (i, l) in plan.links.iter().enumerate() {
            if let Some(g) = l.adapter.geometry() {
                adapters.insert(format!("adapter/link{i}.weight"), Tensor::zeros(&g.kernel_shape()));
                adapters.insert(format!("adapter/link{i}.bias"), Tensor::zeros(&[g.out_channels]));
            }
        }

        let features = a.feature_dim().unwrap_or(0) + b.feature_dim().unwrap_or(0);
        let mut head_params = IndexMap::new();
        let mut width = features;
        let sizes = head.hidden.iter().copied().chain([head.num_classes]);
        for (layer, units) in head_layer_names(&head).into_iter().zip(sizes) {
            head_params.insert(format!("head/{layer}.weight"), Tensor::zeros(&[width, units]));
            head_params.insert(format!("head/{layer}.bias"), Tensor::zeros(&[units]));
            width = units;
        }

        let mut injections: BTreeMap<(Side, usize), Vec<usize>> = BTreeMap::new();
        for (i, l) in plan.links.iter().enumerate() {
            let net = if l.target.model == Side::A { &a } else { &b };
            let node = net.tap(&l.target.tap).expect("validated").node;
            injections.entry((l.target.model, node + 1)).or_default().push(i);
        }
        let mut fused = FusedNetwork { a, b, plan, adapters, head: head_params, schedule: Vec::new(), injections };
        fused.schedule = fused.interleave()?;
        Ok(fused)
    }

    /// Rebuilds the structure from its description; every parameter is zero
    /// and the network is not ready until parameters are loaded.
    pub fn from_architecture(arch: &FusedArchitecture) -> Result<Self, FusionError> {
        let a = NetworkGraph::build(arch.a.clone())?;
        let b = NetworkGraph::build(arch.b.clone())?;
        if !a.is_headless() || !b.is_headless() {
            return Err(FusionError::Plan("fused backbones must be headless".into()));
        }
        Self::assemble(a, b, arch.plan.clone())
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.a.mark_initialized();
        self.b.mark_initialized();
    }

    pub fn architecture(&self) -> FusedArchitecture {
        FusedArchitecture {
            a: self.a.architecture().clone(),
            b: self.b.architecture().clone(),
            plan: self.plan.clone(),
        }
    }

    fn len_of(&self, side: Side) -> usize {
        self.backbone(side).nodes.len()
    }

    /// Global execution order over the nodes of both backbones.
    ///
    /// Kahn's algorithm: a node is ready once its predecessor on its own
    /// side has run and every link injected before it has its source tap
    /// computed. Among ready nodes the one with the smaller relative
    /// position goes first, A on ties. A stall means the links form a cycle.
    fn interleave(&self) -> Result<Vec<(Side, usize)>, FusionError> {
        let len = [self.len_of(Side::A), self.len_of(Side::B)];
        let idx = |s: Side| if s == Side::A { 0 } else { 1 };
        let source_node = |link: usize| {
            let l = &self.plan.links[link];
            self.backbone(l.source.model).tap(&l.source.tap).expect("validated").node
        };
        let mut done = [0usize; 2];
        let mut order = Vec::with_capacity(len[0] + len[1]);
        while done != len {
            let ready = |side: Side| {
                let k = idx(side);
                done[k] < len[k]
                    && self.injections.get(&(side, done[k])).is_none_or(|links| {
                        links.iter().all(|&l| done[idx(self.plan.links[l].source.model)] > source_node(l))
                    })
            };
            let frac = |side: Side| (done[idx(side)] + 1) as f64 / len[idx(side)] as f64;
            let pick = match (ready(Side::A), ready(Side::B)) {
                (true, true) => {
                    if frac(Side::B) < frac(Side::A) {
                        Side::B
                    } else {
                        Side::A
                    }
                }
                (true, false) => Side::A,
                (false, true) => Side::B,
                (false, false) => {
                    let blocked: Vec<String> = [Side::A, Side::B]
                        .iter()
                        .filter_map(|&s| self.injections.get(&(s, done[idx(s)])))
                        .flatten()
                        .map(|&l| {
                            let l = &self.plan.links[l];
                            format!("{}:{} → {}:{}", l.source.model, l.source.tap, l.target.model, l.target.tap)
                        })
                        .collect();
                    return Err(FusionError::Cycle(blocked.join(", ")));
                }
            };
            order.push((pick, done[idx(pick)]));
            done[idx(pick)] += 1;
        }
        Ok(order)
    }

    pub fn plan(&self) -> &FusionPlan {
        &self.plan
    }

    pub fn head_spec(&self) -> &HeadSpec {
        self.plan.head.as_ref().expect("assembled plans carry a head")
    }

    pub fn num_classes(&self) -> usize {
        self.head_spec().num_classes
    }

    pub fn input_shape(&self) -> crate::geometry::FeatureShape {
        self.a.input_shape()
    }

    pub fn backbone(&self, side: Side) -> &NetworkGraph<T> {
        match side {
            Side::A => &self.a,
            Side::B => &self.b,
        }
    }

    pub fn backbone_mut(&mut self, side: Side) -> &mut NetworkGraph<T> {
        match side {
            Side::A => &mut self.a,
            Side::B => &mut self.b,
        }
    }

    /// Interleaved node order as `(side, node index)`.
    pub fn schedule(&self) -> &[(Side, usize)] {
        &self.schedule
    }

    /// Every parameter with its qualified name and provenance, in the
    /// order A backbone, B backbone, adapters, head.
    pub fn params(&self) -> Vec<(String, Provenance, &Tensor<T>)> {
        let mut out = Vec::new();
        for (k, v) in self.a.params() {
            out.push((format!("a/{k}"), Provenance::FromA, v));
        }
        for (k, v) in self.b.params() {
            out.push((format!("b/{k}"), Provenance::FromB, v));
        }
        for (k, v) in &self.adapters {
            out.push((k.clone(), Provenance::Adapter, v));
        }
        for (k, v) in &self.head {
            out.push((k.clone(), Provenance::Head, v));
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        match Provenance::of(name)? {
            Provenance::FromA => self.a.param(&name[2..]),
            Provenance::FromB => self.b.param(&name[2..]),
            Provenance::Adapter => self.adapters.get(name),
            Provenance::Head => self.head.get(name),
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match Provenance::of(name)? {
            Provenance::FromA => self.a.param_mut(&name[2..]),
            Provenance::FromB => self.b.param_mut(&name[2..]),
            Provenance::Adapter => self.adapters.get_mut(name),
            Provenance::Head => self.head.get_mut(name),
        }
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), FusionError> {
        let slot = self.param_mut(name).ok_or_else(|| FusionError::Plan(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(FusionError::Plan(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Stored values in declaration order: backbone A (parameters and
    /// running statistics), backbone B, adapters, head.
    pub(crate) fn storage(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        out.extend(self.a.storage().into_iter().map(|(k, v)| (format!("a/{k}"), v)));
        out.extend(self.b.storage().into_iter().map(|(k, v)| (format!("b/{k}"), v)));
        out.extend(self.adapters.iter().map(|(k, v)| (k.clone(), v.data())));
        out.extend(self.head.iter().map(|(k, v)| (k.clone(), v.data())));
        out
    }

    pub(crate) fn storage_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.a.storage_mut();
        out.extend(self.b.storage_mut());
        out.extend(self.adapters.values_mut().map(|v| v.data_mut()));
        out.extend(self.head.values_mut().map(|v| v.data_mut()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn group_param_count(&self, group: Provenance) -> usize {
        self.params().iter().filter(|(_, p, _)| *p == group).map(|(_, _, t)| t.len()).sum()
    }

    /// Records the fused forward pass on `tape`.
    ///
    /// Both runners consume the same `input`. Before each scheduled node,
    /// the links that target it add their (adapted) source activation onto
    /// the node's input. With `freeze_backbones`, backbone parameters are
    /// recorded as constants.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        capture: bool,
        freeze_backbones: bool,
    ) -> Result<FusedOutput<T>, FusionError> {
        let trainable: crate::nn::Trainable<'_> = if freeze_backbones { &never_trainable } else { &all_trainable };
        let mut ra = Runner::new(&self.a, input, tape, mode, capture, "a/", trainable)?;
        let mut rb = Runner::new(&self.b, input, tape, mode, capture, "b/", trainable)?;
        for &(side, pos) in &self.schedule {
            if let Some(links) = self.injections.get(&(side, pos)) {
                for &li in links {
                    let link = &self.plan.links[li];
                    let src_runner = if link.source.model == Side::A { &ra } else { &rb };
                    let src = *src_runner.tap_vars().get(link.source.depth).ok_or_else(|| {
                        FusionError::Schedule(format!(
                            "tap `{}` of {} not computed yet",
                            link.source.tap, link.source.model
                        ))
                    })?;
                    let delta = match link.adapter.geometry() {
                        Some(g) => {
                            let w = tape.param(
                                format!("adapter/link{li}.weight"),
                                self.adapters[&format!("adapter/link{li}.weight")].clone(),
                                true,
                            );
                            let b = tape.param(
                                format!("adapter/link{li}.bias"),
                                self.adapters[&format!("adapter/link{li}.bias")].clone(),
                                true,
                            );
                            tape.conv2d(src, w, b, g)?
                        }
                        None => src,
                    };
                    let target = if side == Side::A { &mut ra } else { &mut rb };
                    target.inject(tape, delta)?;
                }
            }
            let r = if side == Side::A { &mut ra } else { &mut rb };
            if r.position() != pos {
                return Err(FusionError::Schedule(format!(
                    "model {side} is at node {}, schedule expects {pos}",
                    r.position()
                )));
            }
            r.step(tape)?;
        }
        let (oa, ob) = (ra.finish(), rb.finish());
        let mut x = tape.concat(oa.output, ob.output)?;
        let head = self.head_spec().clone();
        let layers = head_layer_names(&head);
        for (i, layer) in layers.iter().enumerate() {
            let w =
                tape.param(format!("head/{layer}.weight"), self.head[&format!("head/{layer}.weight")].clone(), true);
            let b = tape.param(format!("head/{layer}.bias"), self.head[&format!("head/{layer}.bias")].clone(), true);
            x = tape.dense(x, w, b)?;
            if i + 1 < layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(FusedOutput {
            logits: x,
            features_a: oa.output,
            features_b: ob.output,
            trace_a: oa.trace,
            trace_b: ob.trace,
            moments_a: oa.moments,
            moments_b: ob.moments,
        })
    }

    /// Folds train-mode batch statistics into both backbones.
    pub fn apply_moments(&mut self, out: &FusedOutput<T>) {
        apply_moments(&mut self.a, &out.moments_a);
        apply_moments(&mut self.b, &out.moments_b);
    }

    /// Logits for a batch; train mode also updates running statistics.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, FusionError> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, x, mode, false, false)?;
        self.apply_moments(&out);
        Ok(tape.value(out.logits)?.clone())
    }

    pub fn eval_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>, FusionError> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, x, Mode::Eval, false, false)?;
        Ok(tape.value(out.logits)?.clone())
    }

    /// Eval-mode flattened features of both branches inside the fused graph.
    pub fn eval_features(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), FusionError> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, x, Mode::Eval, false, false)?;
        Ok((tape.value(out.features_a)?.clone(), tape.value(out.features_b)?.clone()))
    }

    /// Eval-mode logits plus the tap activations of both branches
    /// (pre-injection values).
    pub fn eval_with_trace(
        &self,
        batch: &Tensor<T>,
    ) -> Result<(Tensor<T>, ActivationTrace<T>, ActivationTrace<T>), FusionError> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, x, Mode::Eval, true, false)?;
        Ok((tape.value(out.logits)?.clone(), out.trace_a, out.trace_b))
    }

    pub fn cast<U: Scalar>(&self) -> FusedNetwork<U> {
        let conv = |m: &IndexMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        FusedNetwork {
            a: self.a.cast(),
            b: self.b.cast(),
            plan: self.plan.clone(),
            adapters: conv(&self.adapters),
            head: conv(&self.head),
            schedule: self.schedule.clone(),
            injections: self.injections.clone(),
        }
    }
}
