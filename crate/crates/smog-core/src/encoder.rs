//! Siamese encoder pair: online network (backbone + projection + prediction)
//! and momentum network (backbone + projection) linked by an EMA ratio.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::image::{batch_to_tensor, ImageBuf};
use crate::rng::{derive, Stream};
use crate::tensor::{Tape, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Role of a stored parameter; decides weight-decay / LARS treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Gain,
    Bias,
    /// Batch-norm running statistics: EMA'd and checkpointed, never optimized.
    RunningStat,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub kind: ParamKind,
}

/// Flat table of named parameter buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>, kind: ParamKind) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry {
            name,
            shape,
            data,
            kind,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Copy every entry that also exists in `other` (matched by name).
    pub fn copy_matching_from(&mut self, other: &ParamStore) {
        for entry in self.entries.iter_mut() {
            if let Some(src) = other.entries.iter().find(|e| e.name == entry.name) {
                entry.data.copy_from_slice(&src.data);
            }
        }
    }
}

/// Per-tape cache mapping parameter ids to leaf vars, so one parameter is a
/// single node no matter how many forward passes share the tape.
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    pub fn new(store: &ParamStore) -> Self {
        Binder {
            vars: vec![None; store.entries.len()],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let e = &store.entries[id];
        let v = tape.leaf(&e.shape, e.data.clone());
        self.vars[id] = Some(v);
        v
    }

    pub fn var_of(&self, id: usize) -> Option<Var> {
        self.vars[id]
    }

    /// All (param id, leaf var) pairs bound into the tape.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (i, var)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Mlp,
    TinyCnn,
}

/// Architecture description for one network of the pair.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub backbone: BackboneKind,
    /// Conv channels (tiny_cnn) or hidden widths (mlp), one entry per block.
    pub widths: Vec<usize>,
    pub input_channels: usize,
    /// Flattened input size; used by the mlp backbone only.
    pub mlp_input_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl NetworkSpec {
    pub fn desk_default() -> Self {
        NetworkSpec {
            backbone: BackboneKind::TinyCnn,
            widths: vec![8, 16],
            input_channels: 3,
            mlp_input_dim: 0,
            proj_hidden: 256,
            proj_dim: 32,
            pred_hidden: 256,
        }
    }

    pub fn backbone_out_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(CoreError::Config("zero-width backbone layer".into()));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 || self.pred_hidden == 0 {
            return Err(CoreError::Config("zero-width head layer".into()));
        }
        if self.backbone == BackboneKind::Mlp && self.mlp_input_dim == 0 {
            return Err(CoreError::Config("mlp backbone needs mlp_input_dim".into()));
        }
        Ok(())
    }
}

struct LinearLayer {
    w: usize,
    b: Option<usize>,
}

struct ConvLayer {
    w: usize,
    stride: usize,
    padding: usize,
}

struct BnLayer {
    gamma: usize,
    beta: usize,
    r_mean: usize,
    r_var: usize,
}

struct Block {
    conv: Option<ConvLayer>,
    linear: Option<LinearLayer>,
    bn: BnLayer,
}

struct Head {
    fc1: LinearLayer,
    bn1: BnLayer,
    fc2: LinearLayer,
    /// Projection heads carry BN on the output layer, prediction heads do not.
    bn2: Option<BnLayer>,
}

/// One network: backbone blocks, projection head, optional prediction head,
/// and the parameter table behind them.
pub struct Network {
    pub spec: NetworkSpec,
    blocks: Vec<Block>,
    proj: Head,
    pred: Option<Head>,
    pub store: ParamStore,
}

/// Online forward products: backbone representation plus the two normalized
/// head outputs.
pub struct NetOutputs {
    pub repr: Var,
    pub proj: Var,
    pub pred: Option<Var>,
}

fn he_uniform(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

fn add_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) -> LinearLayer {
    let w = store.add(
        format!("{name}.w"),
        vec![out_dim, in_dim],
        he_uniform(rng, in_dim, out_dim * in_dim),
        ParamKind::Weight,
    );
    let b = bias.then(|| {
        store.add(
            format!("{name}.b"),
            vec![out_dim],
            vec![0.0; out_dim],
            ParamKind::Bias,
        )
    });
    LinearLayer { w, b }
}

fn add_bn(store: &mut ParamStore, name: &str, dim: usize) -> BnLayer {
    BnLayer {
        gamma: store.add(
            format!("{name}.gamma"),
            vec![dim],
            vec![1.0; dim],
            ParamKind::Gain,
        ),
        beta: store.add(
            format!("{name}.beta"),
            vec![dim],
            vec![0.0; dim],
            ParamKind::Bias,
        ),
        r_mean: store.add(
            format!("{name}.running_mean"),
            vec![dim],
            vec![0.0; dim],
            ParamKind::RunningStat,
        ),
        r_var: store.add(
            format!("{name}.running_var"),
            vec![dim],
            vec![1.0; dim],
            ParamKind::RunningStat,
        ),
    }
}

fn add_head(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    output_bn: bool,
) -> Head {
    let fc1 = add_linear(store, rng, &format!("{name}.fc1"), in_dim, hidden, false);
    let bn1 = add_bn(store, &format!("{name}.bn1"), hidden);
    let fc2 = add_linear(store, rng, &format!("{name}.fc2"), hidden, out_dim, !output_bn);
    let bn2 = output_bn.then(|| add_bn(store, &format!("{name}.bn2"), out_dim));
    Head { fc1, bn1, fc2, bn2 }
}

fn bn_forward(
    bn: &BnLayer,
    tape: &mut Tape,
    store: &mut ParamStore,
    binder: &mut Binder,
    x: Var,
    train: bool,
) -> Result<Var> {
    let gamma = binder.bind(tape, store, bn.gamma);
    let beta = binder.bind(tape, store, bn.beta);
    if train {
        let (mean, var) = tape.channel_moments(x);
        let m = match tape.shape(x).len() {
            2 => tape.shape(x)[0],
            _ => tape.shape(x)[0] * tape.shape(x)[2] * tape.shape(x)[3],
        } as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for (r, &b) in store.entries[bn.r_mean].data.iter_mut().zip(&mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in store.entries[bn.r_var].data.iter_mut().zip(&var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
        tape.batch_norm(x, gamma, beta, &mean, &var, true, BN_EPS)
    } else {
        let mean = store.entries[bn.r_mean].data.clone();
        let var = store.entries[bn.r_var].data.clone();
        tape.batch_norm(x, gamma, beta, &mean, &var, false, BN_EPS)
    }
}

fn linear_forward(
    layer: &LinearLayer,
    tape: &mut Tape,
    store: &ParamStore,
    binder: &mut Binder,
    x: Var,
) -> Result<Var> {
    let w = binder.bind(tape, store, layer.w);
    let y = tape.matmul_nt(x, w)?;
    match layer.b {
        Some(bid) => {
            let b = binder.bind(tape, store, bid);
            tape.add_bias(y, b)
        }
        None => Ok(y),
    }
}

fn head_forward(
    head: &Head,
    tape: &mut Tape,
    store: &mut ParamStore,
    binder: &mut Binder,
    x: Var,
    train: bool,
) -> Result<Var> {
    let h = linear_forward(&head.fc1, tape, store, binder, x)?;
    let h = bn_forward(&head.bn1, tape, store, binder, h, train)?;
    let h = tape.relu(h);
    let out = linear_forward(&head.fc2, tape, store, binder, h)?;
    match &head.bn2 {
        Some(bn2) => bn_forward(bn2, tape, store, binder, out, train),
        None => Ok(out),
    }
}

impl Network {
    fn build(spec: &NetworkSpec, with_pred: bool, rng: &mut impl Rng) -> Result<Network> {
        spec.validate()?;
        let mut store = ParamStore::default();
        let mut blocks = Vec::new();
        match spec.backbone {
            BackboneKind::TinyCnn => {
                let mut in_c = spec.input_channels;
                for (i, &out_c) in spec.widths.iter().enumerate() {
                    let name = format!("backbone.block{i}");
                    let w = store.add(
                        format!("{name}.conv.w"),
                        vec![out_c, in_c, 3, 3],
                        he_uniform(rng, in_c * 9, out_c * in_c * 9),
                        ParamKind::Weight,
                    );
                    blocks.push(Block {
                        conv: Some(ConvLayer {
                            w,
                            stride: 2,
                            padding: 1,
                        }),
                        linear: None,
                        bn: add_bn(&mut store, &format!("{name}.bn"), out_c),
                    });
                    in_c = out_c;
                }
            }
            BackboneKind::Mlp => {
                let mut in_d = spec.mlp_input_dim;
                for (i, &out_d) in spec.widths.iter().enumerate() {
                    let name = format!("backbone.block{i}");
                    let linear = add_linear(
                        &mut store,
                        rng,
                        &format!("{name}.fc"),
                        in_d,
                        out_d,
                        false,
                    );
                    blocks.push(Block {
                        conv: None,
                        linear: Some(linear),
                        bn: add_bn(&mut store, &format!("{name}.bn"), out_d),
                    });
                    in_d = out_d;
                }
            }
        }
        let d_b = spec.backbone_out_dim();
        let proj = add_head(
            &mut store,
            rng,
            "proj",
            d_b,
            spec.proj_hidden,
            spec.proj_dim,
            true,
        );
        let pred = with_pred.then(|| {
            add_head(
                &mut store,
                rng,
                "pred",
                spec.proj_dim,
                spec.pred_hidden,
                spec.proj_dim,
                false,
            )
        });
        Ok(Network {
            spec: spec.clone(),
            blocks,
            proj,
            pred,
            store,
        })
    }

    /// Backbone representation for an input already shaped for the backbone
    /// (N×C×H×W for tiny_cnn, N×D for mlp).
    pub fn forward_backbone(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        train: bool,
    ) -> Result<Var> {
        let store = &mut self.store;
        let mut h = x;
        for block in &self.blocks {
            if let Some(conv) = &block.conv {
                let w = binder.bind(tape, store, conv.w);
                h = tape.conv2d(h, w, conv.stride, conv.padding)?;
            }
            if let Some(linear) = &block.linear {
                h = linear_forward(linear, tape, store, binder, h)?;
            }
            h = bn_forward(&block.bn, tape, store, binder, h, train)?;
            h = tape.relu(h);
        }
        if self.spec.backbone == BackboneKind::TinyCnn {
            h = tape.global_avg_pool(h)?;
        }
        Ok(h)
    }

    /// Full forward: backbone, projection, and (if present) prediction head.
    /// Head outputs are returned L2-normalized.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        train: bool,
    ) -> Result<NetOutputs> {
        let repr = self.forward_backbone(tape, binder, x, train)?;
        let store = &mut self.store;
        let proj_raw = head_forward(&self.proj, tape, store, binder, repr, train)?;
        let proj = tape.l2_normalize(proj_raw)?;
        let pred = match &self.pred {
            Some(head) => {
                let p = head_forward(head, tape, store, binder, proj_raw, train)?;
                Some(tape.l2_normalize(p)?)
            }
            None => None,
        };
        Ok(NetOutputs { repr, proj, pred })
    }
}

/// Pack images into the input tensor layout the backbone expects.
pub fn pack_input(spec: &NetworkSpec, images: &[&ImageBuf]) -> (Vec<usize>, Vec<f64>) {
    let (shape, data) = batch_to_tensor(images);
    match spec.backbone {
        BackboneKind::TinyCnn => (shape, data),
        BackboneKind::Mlp => (vec![shape[0], shape[1] * shape[2] * shape[3]], data),
    }
}

/// Online network f_θ with its momentum copy f̂_η.
pub struct EncoderPair {
    pub online: Network,
    pub momentum: Network,
    pub alpha: f64,
}

impl EncoderPair {
    /// Deterministic build from a spec and seed: He-uniform weights,
    /// BN gamma=1 beta=0, momentum branch copied from the online subset.
    pub fn build(spec: &NetworkSpec, alpha: f64, seed: u64) -> Result<EncoderPair> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CoreError::Config(format!("alpha {alpha} outside [0,1]")));
        }
        let mut rng = derive(seed, Stream::Init, &[0]);
        let online = Network::build(spec, true, &mut rng)?;
        let mut momentum = Network::build(spec, false, &mut rng)?;
        momentum.store.copy_matching_from(&online.store);
        Ok(EncoderPair {
            online,
            momentum,
            alpha,
        })
    }

    /// Online forward over a batch of same-sized crops, recorded on the
    /// caller's tape so the loss can backpropagate.
    pub fn forward_online(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        images: &[&ImageBuf],
        train: bool,
    ) -> Result<NetOutputs> {
        let (shape, data) = pack_input(&self.online.spec, images);
        let x = tape.leaf(&shape, data);
        self.online.forward(tape, binder, x, train)
    }

    /// Momentum-branch projection: runs on a private tape (no gradients reach
    /// η), BN in train mode updating the momentum branch's own running stats.
    /// Returns the normalized N×d projection rows.
    pub fn momentum_project(&mut self, images: &[&ImageBuf]) -> Result<Vec<f64>> {
        let (shape, data) = pack_input(&self.momentum.spec, images);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.momentum.store);
        let x = tape.leaf(&shape, data);
        let out = self.momentum.forward(&mut tape, &mut binder, x, true)?;
        Ok(tape.value(out.proj).to_vec())
    }

    /// Momentum-branch projection in eval mode: BN uses the branch's running
    /// statistics, so the features do not depend on batch composition. Used
    /// by frozen evaluation (assignments are then a pure function of the
    /// image). Returns the normalized N×d projection rows.
    pub fn momentum_project_eval(&mut self, images: &[&ImageBuf]) -> Result<Vec<f64>> {
        let (shape, data) = pack_input(&self.momentum.spec, images);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.momentum.store);
        let x = tape.leaf(&shape, data);
        let out = self.momentum.forward(&mut tape, &mut binder, x, false)?;
        Ok(tape.value(out.proj).to_vec())
    }

    /// Frozen-feature extraction: online backbone in eval mode, no state
    /// mutated. Returns N×D_b rows.
    pub fn eval_backbone_features(&mut self, images: &[&ImageBuf]) -> Result<Vec<f64>> {
        let (shape, data) = pack_input(&self.online.spec, images);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.online.store);
        let x = tape.leaf(&shape, data);
        let repr = self.online.forward_backbone(&mut tape, &mut binder, x, false)?;
        Ok(tape.value(repr).to_vec())
    }

    /// η ← α·η + (1−α)·θ over every momentum entry (running stats included).
    pub fn ema_update(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CoreError::Config(format!("alpha {alpha} outside [0,1]")));
        }
        for entry in self.momentum.store.entries_mut() {
            let src = self
                .online
                .store
                .index_of(&entry.name)
                .expect("momentum entry missing from online store");
            let theta = &self.online.store.entries()[src].data;
            for (e, &t) in entry.data.iter_mut().zip(theta.iter()) {
                *e = alpha * *e + (1.0 - alpha) * t;
            }
        }
        Ok(())
    }

    /// η ← θ subset, exact copy including BN running stats.
    pub fn hard_reset_momentum(&mut self) {
        self.momentum.store.copy_matching_from(&self.online.store);
    }

    /// Euclidean distance ‖η−θ‖ over the shared parameter subset.
    pub fn ema_drift(&self) -> f64 {
        let mut acc = 0.0;
        for entry in self.momentum.store.entries() {
            if entry.kind == ParamKind::RunningStat {
                continue;
            }
            let src = self.online.store.index_of(&entry.name).unwrap();
            for (e, t) in entry
                .data
                .iter()
                .zip(&self.online.store.entries()[src].data)
            {
                let d = e - t;
                acc += d * d;
            }
        }
        libm::sqrt(acc)
    }
}
