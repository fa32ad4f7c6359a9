//! Trend/residual forecaster: two independent UNet branches, each with a
//! dual-path (main + ancillary) encoder fused by 1×1 convolutions, a
//! convolutional neural-ODE bottleneck integrated with explicit Euler
//! steps, and one expansive decoder path per lead time.
//!
//! Resolution pyramid for an `H×W` input with base width `C`:
//!
//! ```text
//! F1: C  @ H      F2: 2C @ H/2      F3: 4C @ H/4      z: latent @ H/8
//! ```

mod layers;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcmp::{self, DcmpError};
use crate::diffops::{sigmoid, DiffError, Scalar, Tape, Tensor, Var};

pub use layers::{BnUpdate, ConvBlock, ConvLayer, Ctx, Mode, Registry, BN_EPS, BN_MOMENTUM};
pub use params::{uniform_init, NamedTensors};

/// Channels of the ancillary input: normalized TB, first-year ice, multi-year ice.
pub const ANCILLARY_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dcmp(#[from] DcmpError),
    #[error("latent state became non-finite while integrating towards lead {kappa}")]
    NonFiniteState { kappa: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Input window length `L`.
    pub input_len: usize,
    /// Number of lead times `τ`.
    pub lead_times: usize,
    /// Moving-average width `K` of the decomposition (odd, `< L`).
    pub ma_width: usize,
    pub base_channels: usize,
    pub levels: usize,
    /// Latent channels; `None` means `8 · base_channels`.
    pub latent_channels: Option<usize>,
    pub ode_steps_per_unit: usize,
    pub use_dcmp: bool,
    pub use_convnode: bool,
    pub use_ancillary: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_len: 12,
            lead_times: 4,
            ma_width: 5,
            base_channels: 32,
            levels: 3,
            latent_channels: None,
            ode_steps_per_unit: 4,
            use_dcmp: true,
            use_convnode: true,
            use_ancillary: true,
        }
    }
}

/// Named points of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Unet,
    NoDcmp,
    NoConvnode,
    NoAncillary,
    Unicorn,
}

impl Variant {
    /// Row order of the ablation table.
    pub const ALL: [Variant; 5] = [
        Variant::Unet,
        Variant::NoDcmp,
        Variant::NoConvnode,
        Variant::NoAncillary,
        Variant::Unicorn,
    ];

    pub fn apply(self, cfg: &ArchConfig) -> ArchConfig {
        let (dcmp, node, anc) = match self {
            Variant::Unet => (false, false, false),
            Variant::NoDcmp => (false, true, true),
            Variant::NoConvnode => (true, false, true),
            Variant::NoAncillary => (true, true, false),
            Variant::Unicorn => (true, true, true),
        };
        ArchConfig {
            use_dcmp: dcmp,
            use_convnode: node,
            use_ancillary: anc,
            ..cfg.clone()
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Unet => "U-Net",
            Variant::NoDcmp => "Unicorn w/o DCMP",
            Variant::NoConvnode => "Unicorn w/o ConvNODE",
            Variant::NoAncillary => "Unicorn w/o ancillary data",
            Variant::Unicorn => "Unicorn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Unet => "unet",
            Variant::NoDcmp => "no-dcmp",
            Variant::NoConvnode => "no-convnode",
            Variant::NoAncillary => "no-ancillary",
            Variant::Unicorn => "unicorn",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| format!("unknown variant '{s}'"))
    }
}

impl ArchConfig {
    pub fn latent(&self) -> usize {
        self.latent_channels.unwrap_or(8 * self.base_channels)
    }

    /// The plain U-Net baseline: every flag off.
    pub fn is_unet_baseline(&self) -> bool {
        !self.use_dcmp && !self.use_convnode && !self.use_ancillary
    }

    pub fn decoder_paths(&self) -> usize {
        if self.is_unet_baseline() {
            1
        } else {
            self.lead_times
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.levels != 3 {
            return err(format!("the encoder chain has 3 levels, got {}", self.levels));
        }
        if self.lead_times == 0 {
            return err("lead_times must be >= 1".into());
        }
        if self.base_channels < 2 {
            return err("base_channels must be >= 2".into());
        }
        if self.latent() == 0 {
            return err("latent_channels must be >= 1".into());
        }
        if self.ode_steps_per_unit == 0 {
            return err("ode_steps_per_unit must be >= 1".into());
        }
        if self.ma_width % 2 == 0 || self.ma_width >= self.input_len {
            return err(format!(
                "moving-average width {} must be odd and < input_len {}",
                self.ma_width, self.input_len
            ));
        }
        Ok(())
    }

    /// Checks that an `h×w` grid fits the pooling pyramid.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<(), ModelError> {
        let f = 1 << self.levels;
        if h < f || w < f || h % f != 0 || w % f != 0 {
            return Err(ModelError::Config(format!(
                "grid {h}x{w} must be a positive multiple of {f} in both directions"
            )));
        }
        Ok(())
    }
}

/// The ancillary path: Convblocks 1, 3, 5 and the three fusion 1×1 convs.
#[derive(Clone, Debug)]
pub struct AncillaryPath {
    pub blocks: [ConvBlock; 3],
    pub fuse: [ConvLayer; 3],
}

/// Main path Convblocks 2, 4, 6, 7 plus the optional ancillary path.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub main: [ConvBlock; 4],
    pub ancillary: Option<AncillaryPath>,
}

/// Per-lead-time expansive path: three upsamplings with Convblocks 8, 9, 10.
#[derive(Clone, Debug)]
pub struct DecoderPath {
    pub up: [ConvLayer; 3],
    pub blocks: [ConvBlock; 3],
}

/// Encoder output: the initial latent state and the three skip features.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub z0: Var,
    pub skips: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// `N×τ×H×W` pre-sigmoid output.
    pub logits: Var,
    /// Output of Convblock 10 for each decoder path.
    pub path_outputs: Vec<Var>,
}

/// One UNet + ConvNODE branch.
#[derive(Clone, Debug)]
pub struct Branch {
    pub name: String,
    pub encoder: Encoder,
    pub dynamics: Option<ConvLayer>,
    pub paths: Vec<DecoderPath>,
    pub head: ConvLayer,
}

impl Branch {
    fn build<T: Scalar>(reg: &mut Registry<T>, name: &str, cfg: &ArchConfig) -> Self {
        let c = cfg.base_channels;
        let (c1, c2, c3, lat) = (c, 2 * c, 4 * c, cfg.latent());
        let n = |s: &str| format!("{name}.{s}");
        let main = [
            reg.block(&n("enc.block2"), cfg.input_len, c1, false),
            reg.block(&n("enc.block4"), c1, c2, true),
            reg.block(&n("enc.block6"), c2, c3, true),
            reg.block(&n("enc.block7"), c3, lat, true),
        ];
        let ancillary = cfg.use_ancillary.then(|| AncillaryPath {
            blocks: [
                reg.block(&n("enc.block1"), ANCILLARY_CHANNELS, c1, false),
                reg.block(&n("enc.block3"), c1, c2, true),
                reg.block(&n("enc.block5"), c2, c3, true),
            ],
            fuse: [
                reg.conv(&n("enc.fuse1"), 2 * c1, c1, 1),
                reg.conv(&n("enc.fuse2"), 2 * c2, c2, 1),
                reg.conv(&n("enc.fuse3"), 2 * c3, c3, 1),
            ],
        });
        let dynamics = cfg.use_convnode.then(|| reg.conv(&n("ode"), lat, lat, 3));
        let paths = (0..cfg.decoder_paths())
            .map(|k| {
                let p = |s: &str| n(&format!("dec{k}.{s}"));
                DecoderPath {
                    up: [
                        reg.upsample(&p("up1"), lat, c3),
                        reg.upsample(&p("up2"), c3, c2),
                        reg.upsample(&p("up3"), c2, c1),
                    ],
                    blocks: [
                        reg.block(&p("block8"), 2 * c3, c3, false),
                        reg.block(&p("block9"), 2 * c2, c2, false),
                        reg.block(&p("block10"), 2 * c1, c1, false),
                    ],
                }
            })
            .collect::<Vec<_>>();
        let head = reg.conv(&n("head"), paths.len() * c1, cfg.lead_times, 3);
        Self {
            name: name.to_string(),
            encoder: Encoder { main, ancillary },
            dynamics,
            paths,
            head,
        }
    }

    /// The encoder chain. Without the ancillary path the fused features are
    /// the main-path features.
    pub fn encode<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        component: Var,
        ancillary: Var,
    ) -> Result<Encoded, ModelError> {
        let [b2, b4, b6, b7] = &self.encoder.main;
        let t1 = ctx.block(b2, component)?;
        let (f1, f2, f3) = match &self.encoder.ancillary {
            Some(anc) => {
                let [b1, b3, b5] = &anc.blocks;
                let [fuse1, fuse2, fuse3] = &anc.fuse;
                let a1 = ctx.block(b1, ancillary)?;
                let cat1 = ctx.tape.concat(&[a1, t1])?;
                let f1 = ctx.conv(fuse1, cat1)?;
                let a2 = ctx.block(b3, a1)?;
                let m2 = ctx.block(b4, f1)?;
                let cat2 = ctx.tape.concat(&[m2, a2])?;
                let f2 = ctx.conv(fuse2, cat2)?;
                let a3 = ctx.block(b5, a2)?;
                let m3 = ctx.block(b6, f2)?;
                let cat3 = ctx.tape.concat(&[m3, a3])?;
                let f3 = ctx.conv(fuse3, cat3)?;
                (f1, f2, f3)
            }
            None => {
                let f2 = ctx.block(b4, t1)?;
                let f3 = ctx.block(b6, f2)?;
                (t1, f2, f3)
            }
        };
        let z0 = ctx.block(b7, f3)?;
        Ok(Encoded {
            z0,
            skips: [f1, f2, f3],
        })
    }

    /// Latent trajectory `z(0), …, z(τ-1)`; without dynamics every entry is `z0`.
    pub fn evolve<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        z0: Var,
        tau: usize,
        steps: usize,
    ) -> Result<Vec<Var>, ModelError> {
        match &self.dynamics {
            Some(dyn_conv) => {
                let (w, b) = (ctx.params[dyn_conv.weight], ctx.params[dyn_conv.bias]);
                convnode_evolve(ctx.tape, z0, tau, w, b, steps)
            }
            None => Ok(vec![z0; tau]),
        }
    }

    pub fn decode<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        trajectory: &[Var],
        skips: [Var; 3],
    ) -> Result<Decoded, ModelError> {
        if trajectory.len() != self.paths.len() {
            return Err(ModelError::Config(format!(
                "{} latent states for {} decoder paths",
                trajectory.len(),
                self.paths.len()
            )));
        }
        let [f1, f2, f3] = skips;
        let mut path_outputs = Vec::with_capacity(self.paths.len());
        for (path, &z) in self.paths.iter().zip(trajectory) {
            let mut h = z;
            for ((up, block), skip) in path.up.iter().zip(&path.blocks).zip([f3, f2, f1]) {
                let u = ctx.upsample(up, h)?;
                let cat = ctx.tape.concat(&[u, skip])?;
                h = ctx.block(block, cat)?;
            }
            path_outputs.push(h);
        }
        let cat = ctx.tape.concat(&path_outputs)?;
        let logits = ctx.conv(&self.head, cat)?;
        Ok(Decoded {
            logits,
            path_outputs,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        cfg: &ArchConfig,
        component: Var,
        ancillary: Var,
    ) -> Result<Decoded, ModelError> {
        let enc = self.encode(ctx, component, ancillary)?;
        let trajectory = if self.paths.len() == 1 {
            vec![enc.z0]
        } else {
            self.evolve(ctx, enc.z0, cfg.lead_times, cfg.ode_steps_per_unit)?
        };
        self.decode(ctx, &trajectory, enc.skips)
    }
}

/// Integrates `dz/dk = conv3×3(z)` with `steps` explicit Euler sub-steps per
/// unit interval and returns `z(0), …, z(τ-1)`. Every sub-step is recorded on
/// the tape, so gradients flow through the discretization.
pub fn convnode_evolve<T: Scalar>(
    tape: &mut Tape<T>,
    z0: Var,
    tau: usize,
    weight: Var,
    bias: Var,
    steps: usize,
) -> Result<Vec<Var>, ModelError> {
    let [cout, cin, _, _] = tape.value(weight).shape();
    let channels = tape.value(z0).shape()[1];
    if cout != cin || cin != channels {
        return Err(ModelError::Config(format!(
            "dynamics must preserve {channels} channels, weight is {cout}x{cin}"
        )));
    }
    if steps == 0 {
        return Err(ModelError::Config("at least one Euler step per unit".into()));
    }
    let dt = T::lit(1.0 / steps as f64);
    let mut trajectory = Vec::with_capacity(tau);
    let mut z = z0;
    for kappa in 0..tau {
        if kappa > 0 {
            for _ in 0..steps {
                let dz = tape.conv2d(z, weight, bias, 1, crate::diffops::Padding::Same)?;
                z = tape.add_scaled(z, dz, dt)?;
            }
            if !tape.value(z).all_finite() {
                return Err(ModelError::NonFiniteState { kappa });
            }
        }
        trajectory.push(z);
    }
    Ok(trajectory)
}

/// One batch of model inputs.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `N×L×H×W` input window.
    pub x: Tensor<T>,
    /// `N×3×H×W` ancillary fields.
    pub ancillary: Tensor<T>,
}

pub struct ForwardPass {
    pub logits: Var,
    pub bn_updates: Vec<BnUpdate>,
}

/// A configured forecaster with its parameters and batch-norm buffers.
#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ArchConfig,
    branches: Vec<Branch>,
    params: NamedTensors<T>,
    buffers: NamedTensors<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds the variant described by `cfg` with parameters drawn from `seed`.
    pub fn new(cfg: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut reg = Registry::new(seed);
        let names: &[&str] = if cfg.use_dcmp {
            &["trend", "residual"]
        } else {
            &["input"]
        };
        let branches = names
            .iter()
            .map(|n| Branch::build(&mut reg, n, &cfg))
            .collect();
        Ok(Self {
            cfg,
            branches,
            params: reg.params,
            buffers: reg.buffers,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn params(&self) -> &NamedTensors<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensors<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &NamedTensors<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut NamedTensors<T> {
        &mut self.buffers
    }

    /// Replaces parameters and buffers; names and shapes must match the
    /// architecture exactly.
    pub fn load_state(&mut self, params: NamedTensors<T>, buffers: NamedTensors<T>) -> Result<(), ModelError> {
        for (what, new, old) in [("parameter", &params, &self.params), ("buffer", &buffers, &self.buffers)] {
            if new.names() != old.names() {
                return Err(ModelError::Config(format!("{what} names do not match the architecture")));
            }
            for ((name, a), b) in new.iter().zip(old.tensors()) {
                if a.shape() != b.shape() {
                    return Err(ModelError::Config(format!(
                        "{what} {name}: shape {:?}, expected {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
            }
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            branches: self.branches.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    /// Records every parameter as a tape leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn context<'a>(&'a self, tape: &'a mut Tape<T>, params: &'a [Var], mode: Mode) -> Ctx<'a, T> {
        Ctx {
            tape,
            params,
            buffers: &self.buffers,
            mode,
            bn_updates: Vec::new(),
        }
    }

    fn check_input(&self, input: &ModelInput<T>) -> Result<(), ModelError> {
        let [n, l, h, w] = input.x.shape();
        if l != self.cfg.input_len {
            return Err(ModelError::Config(format!(
                "input window of {l} frames, model expects {}",
                self.cfg.input_len
            )));
        }
        self.cfg.check_grid(h, w)?;
        if input.ancillary.shape() != [n, ANCILLARY_CHANNELS, h, w] {
            return Err(ModelError::Config(format!(
                "ancillary shape {:?} does not match input {:?}",
                input.ancillary.shape(),
                input.x.shape()
            )));
        }
        Ok(())
    }

    /// Inputs of each branch: `[trend, residual]` with decomposition, else `[x]`.
    pub fn branch_inputs(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
        if !self.cfg.use_dcmp {
            return Ok(vec![x.clone()]);
        }
        let mut trend = Tensor::zeros(x.shape());
        let mut residual = Tensor::zeros(x.shape());
        for i in 0..x.shape()[0] {
            dcmp::decompose_into(
                x.item(i),
                self.cfg.input_len,
                self.cfg.ma_width,
                trend.item_mut(i),
                residual.item_mut(i),
            )?;
        }
        Ok(vec![trend, residual])
    }

    /// Records the forward pass with externally bound parameters and returns
    /// the summed branch logits (`T̃ + R̃`, or the single branch output).
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: &ModelInput<T>,
        mode: Mode,
    ) -> Result<ForwardPass, ModelError> {
        self.check_input(input)?;
        if params.len() != self.params.len() {
            return Err(ModelError::Config("parameter binding does not match model".into()));
        }
        let components = self.branch_inputs(&input.x)?;
        let anc = tape.constant(input.ancillary.clone());
        let comps: Vec<Var> = components.into_iter().map(|c| tape.constant(c)).collect();
        let mut ctx = self.context(tape, params, mode);
        let mut logits: Option<Var> = None;
        for (branch, comp) in self.branches.iter().zip(comps) {
            let out = branch.forward(&mut ctx, &self.cfg, comp, anc)?.logits;
            logits = Some(match logits {
                Some(acc) => ctx.tape.add(acc, out)?,
                None => out,
            });
        }
        Ok(ForwardPass {
            logits: logits.expect("at least one branch"),
            bn_updates: ctx.bn_updates,
        })
    }

    /// Binds the parameters and records the forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: &ModelInput<T>,
        mode: Mode,
        trainable: bool,
    ) -> Result<(ForwardPass, Vec<Var>), ModelError> {
        let params = self.bind(tape, trainable);
        let pass = self.forward_with(tape, &params, input, mode)?;
        Ok((pass, params))
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = BN_MOMENTUM;
        for u in updates {
            for (idx, batch) in [
                (u.running_mean, &u.stats.mean),
                (u.running_var, &u.stats.var_unbiased),
            ] {
                let buf = self.buffers.get_mut(idx);
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = T::lit((1.0 - m) * r.as_f64() + m * b);
                }
            }
        }
    }

    /// Pre-sigmoid output in evaluation mode, `N×τ×H×W`.
    pub fn logits(&self, input: &ModelInput<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let (pass, _) = self.forward(&mut tape, input, Mode::Eval, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// `σ(T̃ + R̃)` in evaluation mode, `N×τ×H×W`.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<Tensor<T>, ModelError> {
        Ok(self.logits(input)?.map(sigmoid))
    }
}
