//! Gated residual networks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gating::{
    cir, gate_logit, gumbel_sample, hard_gate, relaxed_gate, Controller, GateConfig, GateDecision,
};
use crate::nn::{global_average_pool, BatchNorm2d, Conv2d, Linear, ParamId, ParamKind, ParamStore};
use crate::tensor::{checkpoint, Scalar, Tape, Tensor, Var};

/// How the training-mode gate is produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateOverride {
    /// Gumbel-softmax sample from the block's logit.
    Sampled,
    /// A constant gate for every sample (1 = fully open, 0 = closed).
    Fixed(f64),
}

impl GateOverride {
    pub const OPEN: GateOverride = GateOverride::Fixed(1.0);
    pub const CLOSED: GateOverride = GateOverride::Fixed(0.0);
}

/// Stage layout of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub in_channels: usize,
    pub image_size: usize,
    pub stem_width: usize,
    /// `(width, blocks)` per stage; every stage after the first halves the
    /// spatial size at its first block.
    pub stages: Vec<(usize, usize)>,
    pub num_classes: usize,
}

impl Topology {
    pub fn cifar() -> Self {
        Topology {
            in_channels: 3,
            image_size: 32,
            stem_width: 16,
            stages: vec![(16, 3), (32, 3), (64, 3)],
            num_classes: 10,
        }
    }

    pub fn mnist() -> Self {
        Topology {
            in_channels: 1,
            image_size: 28,
            stem_width: 16,
            stages: vec![(16, 2), (32, 2)],
            num_classes: 10,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }
}

/// BN access: training mutates running statistics, evaluation only reads.
enum Norm<'a, T: Scalar> {
    Train(&'a mut ParamStore<T>),
    Eval(&'a ParamStore<T>),
}

impl<T: Scalar> Norm<'_, T> {
    fn store(&self) -> &ParamStore<T> {
        match self {
            Norm::Train(s) => s,
            Norm::Eval(s) => s,
        }
    }

    fn bn(&mut self, layer: &BatchNorm2d, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Norm::Train(s) => layer.forward_train(s, tape, x),
            Norm::Eval(s) => layer.forward_eval(s, tape, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

/// `y = ReLU(id(x) + g·F(x))` with `F = conv-BN-ReLU-conv-BN`.
#[derive(Clone, Debug)]
pub struct GatedBlock {
    pub name: String,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<Projection>,
    pub controller: Controller,
    pub gamma: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// What one block produced on the tape.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// Post-activation output fed to the next block.
    pub out: Var,
    /// `id(x) + g·F(x)` before the final ReLU.
    pub gated: Var,
    /// `id(x) + F(x)`, kept in training mode only.
    pub full: Option<Var>,
    pub decision: GateDecision,
}

impl GatedBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        gate: &GateConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_channels, out_channels, 3, stride, 1, false, rng)?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_channels);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1, false, rng)?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_channels);
        let projection = if stride != 1 || in_channels != out_channels {
            Some(Projection {
                conv: Conv2d::new(store, &format!("{name}.proj.conv"), in_channels, out_channels, 1, stride, 0, false, rng)?,
                bn: BatchNorm2d::new(store, &format!("{name}.proj.bn"), out_channels),
            })
        } else {
            None
        };
        let controller = Controller::new(store, &format!("{name}.controller"), in_channels, rng);
        let kind = if gate.learnable_gamma { ParamKind::Weight } else { ParamKind::Buffer };
        let gamma = store.add(format!("{name}.gate.gamma"), Tensor::full([1], T::of(gate.gamma0)), kind);
        Ok(GatedBlock {
            name: name.to_string(),
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
            controller,
            gamma,
            in_channels,
            out_channels,
            stride,
        })
    }

    /// Learnable scalars in the residual path, projection, controller and gate.
    pub fn num_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        let prefix = format!("{}.", self.name);
        store
            .iter()
            .filter(|(_, p)| p.kind.learnable() && p.name.starts_with(&prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    fn paths<T: Scalar>(&self, norm: &mut Norm<'_, T>, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let h = self.conv1.forward(norm.store(), tape, x)?;
        let h = norm.bn(&self.bn1, tape, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(norm.store(), tape, h)?;
        let residual = norm.bn(&self.bn2, tape, h)?;
        let identity = match &self.projection {
            Some(p) => {
                let s = p.conv.forward(norm.store(), tape, x)?;
                norm.bn(&p.bn, tape, s)?
            }
            None => x,
        };
        if tape.shape(identity) != tape.shape(residual) {
            return Err(Error::shape("gated block", tape.shape(identity), tape.shape(residual)));
        }
        Ok((identity, residual))
    }

    fn logit<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        identity: Var,
        residual: Var,
        cfg: &GateConfig,
    ) -> Result<(Var, Var, Var)> {
        let c = cir(tape, identity, residual, cfg.eps_norm)?;
        let ctrl = self.controller.forward(store, tape, x)?;
        let gamma = store.bind(tape, self.gamma);
        let l = gate_logit(tape, c, ctrl, gamma)?;
        Ok((c, ctrl, l))
    }

    /// Training forward: BN uses batch statistics, the gate is a relaxed
    /// Gumbel-softmax sample (or the override).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_train<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        cfg: &GateConfig,
        tau: f64,
        gate: GateOverride,
        rng: &mut impl Rng,
    ) -> Result<BlockOutput> {
        let (identity, residual) = self.paths(&mut Norm::Train(store), tape, x)?;
        let (c, ctrl, l) = self.logit(store, tape, x, identity, residual, cfg)?;
        let batch = tape.shape(x)[0];
        let z = match gate {
            GateOverride::Sampled => {
                let noise = gumbel_sample(&[batch, 2], rng);
                relaxed_gate(tape, l, &noise, tau)?
            }
            GateOverride::Fixed(v) => tape.constant(Tensor::full([batch], T::of(v))),
        };
        let gated = gated_sum(tape, identity, residual, z)?;
        let full = tape.add(identity, residual)?;
        let out = tape.relu(gated);
        let decision = GateDecision {
            cir: tape.value(c).to_f64_vec(),
            controller: tape.value(ctrl).to_f64_vec(),
            logit: tape.value(l).to_f64_vec(),
            relaxed: Some(tape.value(z).to_f64_vec()),
            hard: hard_gate(tape.value(l), cfg.threshold).to_f64_vec(),
            relaxed_var: Some(z),
        };
        Ok(BlockOutput {
            out,
            gated,
            full: Some(full),
            decision,
        })
    }

    /// Inference forward: running BN statistics and the hard threshold gate.
    /// Consumes no randomness and leaves the store untouched.
    pub fn forward_eval<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        cfg: &GateConfig,
    ) -> Result<BlockOutput> {
        let (identity, residual) = self.paths(&mut Norm::Eval(store), tape, x)?;
        let (c, ctrl, l) = self.logit(store, tape, x, identity, residual, cfg)?;
        let hard = hard_gate(tape.value(l), cfg.threshold);
        let decision = GateDecision {
            cir: tape.value(c).to_f64_vec(),
            controller: tape.value(ctrl).to_f64_vec(),
            logit: tape.value(l).to_f64_vec(),
            relaxed: None,
            hard: hard.to_f64_vec(),
            relaxed_var: None,
        };
        let g = tape.constant(hard);
        let gated = gated_sum(tape, identity, residual, g)?;
        let out = tape.relu(gated);
        Ok(BlockOutput {
            out,
            gated,
            full: None,
            decision,
        })
    }

    /// The ungated block `ReLU(id(x) + F(x))`.
    fn forward_plain<T: Scalar>(&self, norm: &mut Norm<'_, T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (identity, residual) = self.paths(norm, tape, x)?;
        let sum = tape.add(identity, residual)?;
        Ok(tape.relu(sum))
    }
}

/// `identity + z[b]·residual[b]` per sample.
pub fn gated_sum<T: Scalar>(tape: &mut Tape<T>, identity: Var, residual: Var, z: Var) -> Result<Var> {
    let scaled = tape.scale_samples(residual, z)?;
    tape.add(identity, scaled)
}

/// Logits plus per-block gate telemetry.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub decisions: Vec<GateDecision>,
    /// Pre-activation gated outputs `y_i`, one per block.
    pub gated_outputs: Vec<Var>,
    /// `x_i + F_i(x_i)` per block; empty in eval mode.
    pub full_outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GatedNetwork<T: Scalar = f32> {
    pub store: ParamStore<T>,
    pub topology: Topology,
    pub gate: GateConfig,
    pub stem_conv: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub blocks: Vec<GatedBlock>,
    pub head: Linear,
}

pub fn build_cifar_network(seed: u64, gate: &GateConfig) -> Result<GatedNetwork> {
    GatedNetwork::new(Topology::cifar(), gate, seed)
}

pub fn build_mnist_network(seed: u64, gate: &GateConfig) -> Result<GatedNetwork> {
    GatedNetwork::new(Topology::mnist(), gate, seed)
}

impl<T: Scalar> GatedNetwork<T> {
    pub fn new(topology: Topology, gate: &GateConfig, seed: u64) -> Result<Self> {
        gate.validate()?;
        if topology.stages.is_empty() || topology.stages.iter().any(|s| s.0 == 0 || s.1 == 0) {
            return Err(Error::Config(format!("invalid stage layout {:?}", topology.stages)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem_conv = Conv2d::new(
            &mut store,
            "stem.conv",
            topology.in_channels,
            topology.stem_width,
            3,
            1,
            1,
            false,
            &mut rng,
        )?;
        let stem_bn = BatchNorm2d::new(&mut store, "stem.bn", topology.stem_width);
        let mut blocks = Vec::with_capacity(topology.num_blocks());
        let mut channels = topology.stem_width;
        for (s, &(width, count)) in topology.stages.iter().enumerate() {
            for j in 0..count {
                let stride = if s > 0 && j == 0 { 2 } else { 1 };
                let name = format!("block{}", blocks.len());
                blocks.push(GatedBlock::new(&mut store, &name, channels, width, stride, gate, &mut rng)?);
                channels = width;
            }
        }
        let head = Linear::new(&mut store, "head.fc", channels, topology.num_classes, &mut rng);
        Ok(GatedNetwork {
            store,
            topology,
            gate: gate.clone(),
            stem_conv,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Learnable scalar count (BN running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.store.num_learnable()
    }

    pub fn cast<U: Scalar>(&self) -> GatedNetwork<U> {
        GatedNetwork {
            store: self.store.cast(),
            topology: self.topology.clone(),
            gate: self.gate.clone(),
            stem_conv: self.stem_conv.clone(),
            stem_bn: self.stem_bn.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let t = &self.topology;
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[0] == 0 || xs[1] != t.in_channels || xs[2] != t.image_size || xs[3] != t.image_size {
            return Err(Error::shape("network input", xs, &[0, t.in_channels, t.image_size, t.image_size]));
        }
        Ok(())
    }

    fn head(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let pooled = global_average_pool(tape, h)?;
        self.head.forward(&self.store, tape, pooled)
    }

    /// Training-mode forward. Fresh Gumbel noise is drawn per sample and per
    /// block from `rng`.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        tau: f64,
        gate: GateOverride,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutput> {
        self.check_input(tape, x)?;
        let mut h = stem_forward(&self.stem_conv, &self.stem_bn, &mut Norm::Train(&mut self.store), tape, x)?;
        let n = self.blocks.len();
        let mut out = ForwardOutput {
            logits: h,
            decisions: Vec::with_capacity(n),
            gated_outputs: Vec::with_capacity(n),
            full_outputs: Vec::with_capacity(n),
        };
        for block in &self.blocks {
            let b = block.forward_train(&mut self.store, tape, h, &self.gate, tau, gate, rng)?;
            h = b.out;
            out.decisions.push(b.decision);
            out.gated_outputs.push(b.gated);
            out.full_outputs.extend(b.full);
        }
        out.logits = self.head(tape, h)?;
        Ok(out)
    }

    /// Deterministic inference forward with hard gates.
    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Var) -> Result<ForwardOutput> {
        self.check_input(tape, x)?;
        let mut h = stem_forward(&self.stem_conv, &self.stem_bn, &mut Norm::Eval(&self.store), tape, x)?;
        let n = self.blocks.len();
        let mut decisions = Vec::with_capacity(n);
        let mut gated_outputs = Vec::with_capacity(n);
        for block in &self.blocks {
            let b = block.forward_eval(&self.store, tape, h, &self.gate)?;
            h = b.out;
            decisions.push(b.decision);
            gated_outputs.push(b.gated);
        }
        Ok(ForwardOutput {
            logits: self.head(tape, h)?,
            decisions,
            gated_outputs,
            full_outputs: Vec::new(),
        })
    }

    /// The same weights run as an ordinary residual network (no gates).
    pub fn forward_plain_train(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut norm = Norm::Train(&mut self.store);
        let mut h = stem_forward(&self.stem_conv, &self.stem_bn, &mut norm, tape, x)?;
        for block in &self.blocks {
            h = block.forward_plain(&mut norm, tape, h)?;
        }
        self.head(tape, h)
    }

    pub fn forward_plain_eval(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut norm = Norm::Eval(&self.store);
        let mut h = stem_forward(&self.stem_conv, &self.stem_bn, &mut norm, tape, x)?;
        for block in &self.blocks {
            h = block.forward_plain(&mut norm, tape, h)?;
        }
        self.head(tape, h)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.store.to_named_f32())
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let entries = checkpoint::load(path)?;
        self.store.load_named(&entries)?;
        if entries.len() != self.store.len() {
            return Err(Error::Format {
                format: "checkpoint",
                detail: format!("expected {} tensors, found {}", self.store.len(), entries.len()),
            });
        }
        Ok(())
    }
}

fn stem_forward<T: Scalar>(
    conv: &Conv2d,
    bn: &BatchNorm2d,
    norm: &mut Norm<'_, T>,
    tape: &mut Tape<T>,
    x: Var,
) -> Result<Var> {
    let h = conv.forward(norm.store(), tape, x)?;
    let h = norm.bn(bn, tape, h)?;
    Ok(tape.relu(h))
}
