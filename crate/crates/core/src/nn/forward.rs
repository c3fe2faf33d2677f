//! Forward execution.
//!
//! [`Runner`] executes a network one node at a time on a caller-owned tape.
//! Single networks simply run it to the end; the fusion builder drives two
//! runners in an interleaved order and injects activations between steps.

use indexmap::IndexMap;

use crate::autodiff::{BatchMoments, Tape, Var};
use crate::nn::graph::{bias_name, weight_name, NetworkError, NetworkGraph, NodeOp, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics in batchnorm; running statistics get updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

/// Tap name → activation captured during a forward pass, in depth order.
pub type ActivationTrace<T = f32> = IndexMap<String, Tensor<T>>;

/// Decides whether a parameter (by its unprefixed name) gets gradients.
pub type Trainable<'a> = &'a dyn Fn(&str) -> bool;

pub fn all_trainable(_: &str) -> bool {
    true
}

pub struct Runner<'n, T: Scalar> {
    net: &'n NetworkGraph<T>,
    prefix: String,
    trainable: Trainable<'n>,
    mode: Mode,
    capture: bool,
    pos: usize,
    current: Var,
    residuals: Vec<Var>,
    tap_vars: Vec<Var>,
    trace: ActivationTrace<T>,
    moments: Vec<(String, BatchMoments<T>)>,
}

impl<'n, T: Scalar> Runner<'n, T> {
    /// `prefix` is prepended to parameter names on the tape, so two networks
    /// can share one tape without collisions.
    pub fn new(
        net: &'n NetworkGraph<T>,
        input: Var,
        tape: &Tape<T>,
        mode: Mode,
        capture: bool,
        prefix: &str,
        trainable: Trainable<'n>,
    ) -> Result<Self, NetworkError> {
        if !net.initialized {
            return Err(NetworkError::Uninitialized);
        }
        let shape = tape.value(input)?.shape();
        let expected = net.arch.input;
        if shape.len() != 4 || shape[1..] != [expected.height, expected.width, expected.channels] {
            return Err(NetworkError::InputShape { got: shape.to_vec(), expected });
        }
        Ok(Runner {
            net,
            prefix: prefix.to_string(),
            trainable,
            mode,
            capture,
            pos: 0,
            current: input,
            residuals: Vec::new(),
            tap_vars: Vec::new(),
            trace: IndexMap::new(),
            moments: Vec::new(),
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.net.nodes.len()
    }

    pub fn current(&self) -> Var {
        self.current
    }

    /// Tap outputs produced so far, in depth order.
    pub fn tap_vars(&self) -> &[Var] {
        &self.tap_vars
    }

    /// Adds `extra` onto the current activation (cross-model injection).
    pub fn inject(&mut self, tape: &mut Tape<T>, extra: Var) -> Result<(), NetworkError> {
        self.current = tape.add(self.current, extra)?;
        Ok(())
    }

    fn param(&self, tape: &mut Tape<T>, name: &str) -> Result<Var, NetworkError> {
        let value = self.net.params.get(name).ok_or_else(|| NetworkError::UnknownParam(name.to_string()))?;
        let trainable = (self.trainable)(name);
        Ok(tape.param(format!("{}{name}", self.prefix), value.clone(), trainable))
    }

    fn wrap<R>(&self, r: Result<R, crate::tensor::TensorError>) -> Result<R, NetworkError> {
        r.map_err(|e| NetworkError::Layer { layer: self.net.nodes[self.pos].name.clone(), detail: e.to_string() })
    }

    /// Executes the next node.
    pub fn step(&mut self, tape: &mut Tape<T>) -> Result<(), NetworkError> {
        let node = &self.net.nodes[self.pos];
        let name = node.name.as_str();
        match &node.op {
            NodeOp::Conv { geom } => {
                let w = self.param(tape, &weight_name(name))?;
                let b = self.param(tape, &bias_name(name))?;
                self.current = self.wrap(tape.conv2d(self.current, w, b, *geom))?;
            }
            NodeOp::BatchNorm { .. } => {
                let gamma = self.param(tape, &format!("{name}.gamma"))?;
                let beta = self.param(tape, &format!("{name}.beta"))?;
                let eps = T::from_f64_lossy(BATCHNORM_EPS);
                self.current = match self.mode {
                    Mode::Train => {
                        let (y, m) = self.wrap(tape.batchnorm_train(self.current, gamma, beta, eps))?;
                        self.moments.push((name.to_string(), m));
                        y
                    }
                    Mode::Eval => {
                        let rs = &self.net.running[name];
                        self.wrap(tape.batchnorm_eval(self.current, gamma, beta, &rs.mean, &rs.var, eps))?
                    }
                };
            }
            NodeOp::Relu => {
                self.current = self.wrap(tape.relu(self.current))?;
                if self.net.taps.iter().any(|t| t.node == self.pos) {
                    self.tap_vars.push(self.current);
                    if self.capture {
                        self.trace.insert(name.to_string(), tape.value(self.current)?.clone());
                    }
                }
            }
            NodeOp::MaxPool(g) => self.current = self.wrap(tape.maxpool2d(self.current, *g))?,
            NodeOp::Flatten => self.current = self.wrap(tape.flatten(self.current))?,
            NodeOp::Dense { .. } => {
                let w = self.param(tape, &weight_name(name))?;
                let b = self.param(tape, &bias_name(name))?;
                self.current = self.wrap(tape.dense(self.current, w, b))?;
            }
            NodeOp::ResidualBegin => self.residuals.push(self.current),
            NodeOp::ResidualEnd { adapter } => {
                let mut skip = self.residuals.pop().expect("residual markers validated at build");
                if let Some(g) = adapter {
                    let w = self.param(tape, &weight_name(&format!("{name}.adapter")))?;
                    let b = self.param(tape, &bias_name(&format!("{name}.adapter")))?;
                    skip = self.wrap(tape.conv2d(skip, w, b, *g))?;
                }
                self.current = self.wrap(tape.add(self.current, skip))?;
            }
        }
        self.pos += 1;
        Ok(())
    }

    /// Steps until `end` (exclusive) or the last node.
    pub fn run_until(&mut self, tape: &mut Tape<T>, end: usize) -> Result<(), NetworkError> {
        while self.pos < end.min(self.net.nodes.len()) {
            self.step(tape)?;
        }
        Ok(())
    }

    pub fn finish(self) -> RunOutput<T> {
        RunOutput { output: self.current, trace: self.trace, moments: self.moments }
    }
}

pub struct RunOutput<T: Scalar> {
    pub output: Var,
    pub trace: ActivationTrace<T>,
    pub moments: Vec<(String, BatchMoments<T>)>,
}

/// Exponential moving average update of batchnorm running statistics:
/// `running ← 0.9·running + 0.1·batch`, with the unbiased batch variance.
pub fn apply_moments<T: Scalar>(net: &mut NetworkGraph<T>, moments: &[(String, BatchMoments<T>)]) {
    let keep = T::from_f64_lossy(BATCHNORM_MOMENTUM);
    let take = T::one() - keep;
    for (name, m) in moments {
        let Some(rs) = net.running.get_mut(name) else { continue };
        let n = m.count as f64;
        let unbias = T::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for (r, &b) in rs.mean.iter_mut().zip(&m.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in rs.var.iter_mut().zip(&m.var) {
            *r = keep * *r + take * b * unbias;
        }
    }
}

impl<T: Scalar> NetworkGraph<T> {
    /// Records a full forward pass on `tape` and returns the logits variable.
    /// Batchnorm statistics observed in train mode are returned, not applied.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        capture: bool,
        prefix: &str,
        trainable: Trainable<'_>,
    ) -> Result<RunOutput<T>, NetworkError> {
        let mut r = Runner::new(self, input, tape, mode, capture, prefix, trainable)?;
        r.run_until(tape, usize::MAX)?;
        Ok(r.finish())
    }

    /// Logits (and optionally the tap trace) for a batch. Train mode updates
    /// the running statistics; eval mode mutates nothing.
    pub fn forward(
        &mut self,
        batch: &Tensor<T>,
        mode: Mode,
        taps: bool,
    ) -> Result<(Tensor<T>, ActivationTrace<T>), NetworkError> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, x, mode, taps, "", &all_trainable)?;
        apply_moments(self, &out.moments);
        Ok((tape.value(out.output)?.clone(), out.trace))
    }

    /// Eval-mode logits; a pure function of the parameters and the batch.
    pub fn eval_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        Ok(self.eval_with_trace(batch, false)?.0)
    }

    pub fn eval_with_trace(
        &self,
        batch: &Tensor<T>,
        taps: bool,
    ) -> Result<(Tensor<T>, ActivationTrace<T>), NetworkError> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, x, Mode::Eval, taps, "", &all_trainable)?;
        Ok((tape.value(out.output)?.clone(), out.trace))
    }

    /// Eval-mode flattened backbone features (the input of the head).
    pub fn eval_features(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        let end = self.flatten_at.map_or(self.nodes.len(), |f| f + 1);
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let mut r = Runner::new(self, x, &tape, Mode::Eval, false, "", &all_trainable)?;
        r.run_until(&mut tape, end)?;
        Ok(tape.value(r.current())?.clone())
    }
}
