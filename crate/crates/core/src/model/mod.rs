//! The dual-branch network.
//!
//! * base branch: four stride-2 residual stages; stage 2 and stage 4 outputs
//!   are the shallow and deep taps; global pooling, an embedding projection
//!   and a classifier form the identity head;
//! * grid network: the shallow tap is average-pooled to the deep tap's size,
//!   channel-concatenated with it, passed through a residual block, pooled,
//!   and regressed to six affine parameters;
//! * alignment branch: a separate copy of the base architecture that
//!   classifies the input image warped by the regressed parameters.

pub mod checkpoint;
mod state;

pub use state::ModelState;

use std::collections::BTreeMap;

use crate::affine::{self, AffineParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{BnStats, NormMode, Tape, Tensor, Var};

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub stage_channels: [usize; 4],
    pub num_classes: usize,
    pub embed_dim: usize,
    pub grid_channels: usize,
    /// Instance norm instead of batch norm in stages 1 and 2.
    pub ibn_enabled: bool,
    /// When false the alignment branch sees the raw image and no grid network exists.
    pub affine_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            input_h: 64,
            input_w: 64,
            stage_channels: [16, 32, 64, 128],
            num_classes: 10,
            embed_dim: 64,
            grid_channels: 32,
            ibn_enabled: false,
            affine_enabled: true,
        }
    }
}

impl ModelConfig {
    /// Full-resolution input mode.
    pub fn full_resolution() -> Self {
        ModelConfig {
            input_h: 224,
            input_w: 224,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h % 16 != 0 || self.input_w % 16 != 0 || self.input_h == 0 || self.input_w == 0 {
            return Err(Error::config(
                "model.input_h",
                "input height and width must be positive multiples of 16",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least 2 classes"));
        }
        if self.stage_channels.contains(&0) || self.embed_dim == 0 || self.grid_channels == 0 {
            return Err(Error::config("model.stage_channels", "widths must be positive"));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        2 * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Tape handles of every parameter of one forward pass.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Substitutes `var` for the named parameter.
    pub fn with_override(mut self, name: &str, var: Var) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }
}

/// Base-branch outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct BaseOut {
    pub tap2: Var,
    pub tap4: Var,
    pub logits: Var,
    pub embed: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub base: BaseOut,
    /// `[N, 6]`
    pub theta: Var,
    /// Alignment-branch input `[N, 3, H, W]`.
    pub aligned: Var,
    pub align_logits: Var,
    pub align_embed: Var,
    /// L2-normalized concatenation of both normalized embeddings.
    pub fused: Var,
}

/// Forward context: the tape, registered parameters, and where running
/// statistics come from / go to.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a ParamVars,
    pub state: &'a ModelState,
    pub mode: Mode,
    /// Batch statistics collected in [`Mode::Train`], keyed by norm name.
    pub stats: Vec<(String, BnStats)>,
}

impl Ctx<'_> {
    fn norm(&mut self, name: &str, x: Var, instance: bool) -> Result<Var> {
        let g = self.vars.get(&format!("{name}.g"));
        let b = self.vars.get(&format!("{name}.b"));
        if instance {
            return self.tape.instance_norm(x, g, b);
        }
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, g, b, NormMode::Batch)?;
                if let Some(s) = stats {
                    self.stats.push((name.to_string(), s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = &self.state.buffers[&format!("{name}.rm")];
                let rv = &self.state.buffers[&format!("{name}.rv")];
                let (y, _) = self.tape.batch_norm(
                    x,
                    g,
                    b,
                    NormMode::Running {
                        mean: rm.data(),
                        var: rv.data(),
                    },
                )?;
                Ok(y)
            }
        }
    }

    fn res_block(&mut self, name: &str, x: Var, stride: usize, instance: bool) -> Result<Var> {
        let w1 = self.vars.get(&format!("{name}.conv1.w"));
        let w2 = self.vars.get(&format!("{name}.conv2.w"));
        let mut y = self.tape.conv2d(x, w1, None, stride, 1)?;
        y = self.norm(&format!("{name}.n1"), y, instance)?;
        y = self.tape.relu(y);
        y = self.tape.conv2d(y, w2, None, 1, 1)?;
        y = self.norm(&format!("{name}.n2"), y, instance)?;
        let shortcut = match self.state.params.get(&format!("{name}.sc.w")) {
            Some(_) => {
                let ws = self.vars.get(&format!("{name}.sc.w"));
                let s = self.tape.conv2d(x, ws, None, stride, 0)?;
                self.norm(&format!("{name}.scn"), s, instance)?
            }
            None => x,
        };
        let sum = self.tape.add(y, shortcut)?;
        Ok(self.tape.relu(sum))
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.vars.get(&format!("{name}.w"));
        let b = self.vars.get(&format!("{name}.b"));
        self.tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpanModel {
    pub config: ModelConfig,
    pub state: ModelState,
}

impl EpanModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let state = ModelState::init(&config, seed);
        Ok(EpanModel { config, state })
    }

    /// Records every parameter on `tape` as a differentiable leaf (or a
    /// constant when `trainable` is false).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .state
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn ctx<'a>(&'a self, tape: &'a mut Tape, vars: &'a ParamVars, mode: Mode) -> Ctx<'a> {
        Ctx {
            tape,
            vars,
            state: &self.state,
            mode,
            stats: Vec::new(),
        }
    }

    fn check_input(&self, ctx: &Ctx<'_>, images: Var) -> Result<()> {
        let s = ctx.tape.shape(images);
        let c = &self.config;
        if s.len() != 4 || s[1..] != [c.input_channels, c.input_h, c.input_w] {
            return Err(Error::dim(format!(
                "model expects [N, {}, {}, {}] input, got {s:?}",
                c.input_channels, c.input_h, c.input_w
            )));
        }
        Ok(())
    }

    fn trunk(&self, ctx: &mut Ctx<'_>, branch: &str, images: Var) -> Result<BaseOut> {
        let mut x = images;
        let mut taps = [x; 4];
        for (s, tap) in taps.iter_mut().enumerate() {
            let instance = self.config.ibn_enabled && s < 2;
            x = ctx.res_block(&format!("{branch}.s{}", s + 1), x, 2, instance)?;
            *tap = x;
        }
        let pooled = ctx.tape.global_avg_pool(x)?;
        let embed = ctx.linear(&format!("{branch}.embed"), pooled)?;
        let logits = ctx.linear(&format!("{branch}.cls"), embed)?;
        Ok(BaseOut {
            tap2: taps[1],
            tap4: taps[3],
            logits,
            embed,
        })
    }

    /// Base branch: taps at 1/4 and 1/16 resolution, identity logits, embedding.
    pub fn base_forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<BaseOut> {
        self.check_input(ctx, images)?;
        self.trunk(ctx, "base", images)
    }

    /// Regresses `[N, 6]` affine parameters from the two taps.
    pub fn grid_network(&self, ctx: &mut Ctx<'_>, tap2: Var, tap4: Var) -> Result<Var> {
        if !self.config.affine_enabled {
            return Err(Error::Usage("grid network is disabled in this model".into()));
        }
        let k = ctx.tape.shape(tap2)[2] / ctx.tape.shape(tap4)[2];
        let shallow = ctx.tape.avg_pool(tap2, k)?;
        let fused = ctx.tape.concat(&[shallow, tap4], 1)?;
        let r = ctx.res_block("grid.res", fused, 1, false)?;
        let pooled = ctx.tape.global_avg_pool(r)?;
        ctx.linear("grid.fc", pooled)
    }

    /// Warps `images` by `theta` and runs the alignment branch.
    /// Returns `(aligned input, logits, embedding)`.
    pub fn align_forward(
        &self,
        ctx: &mut Ctx<'_>,
        images: Var,
        theta: Option<Var>,
    ) -> Result<(Var, Var, Var)> {
        self.check_input(ctx, images)?;
        let aligned = match theta {
            Some(t) => affine::warp_on_tape(ctx.tape, images, t, self.config.input_h, self.config.input_w)?,
            None => images,
        };
        let out = self.trunk(ctx, "align", aligned)?;
        Ok((aligned, out.logits, out.embed))
    }

    /// Fused descriptor: normalize each embedding, concatenate, normalize again.
    pub fn fuse(&self, ctx: &mut Ctx<'_>, base_embed: Var, align_embed: Var) -> Result<Var> {
        let a = ctx.tape.l2_normalize(base_embed);
        let b = ctx.tape.l2_normalize(align_embed);
        let cat = ctx.tape.concat(&[a, b], 1)?;
        Ok(ctx.tape.l2_normalize(cat))
    }

    /// Full pass: base branch, grid network, alignment branch, fusion.
    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<ForwardOut> {
        let base = self.base_forward(ctx, images)?;
        let theta_pred = if self.config.affine_enabled {
            Some(self.grid_network(ctx, base.tap2, base.tap4)?)
        } else {
            None
        };
        let (aligned, align_logits, align_embed) = self.align_forward(ctx, images, theta_pred)?;
        let theta = match theta_pred {
            Some(t) => t,
            None => {
                let n = ctx.tape.shape(images)[0];
                let id = Tensor::from_fn(&[n, 6], |i| AffineParams::IDENTITY[i % 6]);
                ctx.tape.constant(id)
            }
        };
        let fused = self.fuse(ctx, base.embed, align_embed)?;
        Ok(ForwardOut {
            base,
            theta,
            aligned,
            align_logits,
            align_embed,
            fused,
        })
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_running_stats(&mut self, stats: &[(String, BnStats)]) {
        for (name, s) in stats {
            for (suffix, batch) in [("rm", &s.mean), ("rv", &s.var)] {
                let buf = self
                    .state
                    .buffers
                    .get_mut(&format!("{name}.{suffix}"))
                    .expect("running-stat buffer exists for every batch norm");
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    fn batch_var(tape: &mut Tape, images: &[&Tensor]) -> Result<Var> {
        Ok(tape.constant(Tensor::stack(images)?))
    }

    /// Eval-mode full pass over `images`, returning materialized outputs.
    pub fn run_eval(&self, images: &[&Tensor], exec: Exec) -> Result<EvalOutputs> {
        let mut tape = Tape::with_exec(exec);
        let vars = self.register(&mut tape, false);
        let x = Self::batch_var(&mut tape, images)?;
        let mut ctx = self.ctx(&mut tape, &vars, Mode::Eval);
        let out = self.forward(&mut ctx, x)?;
        let t = &tape;
        Ok(EvalOutputs {
            tap2: t.value(out.base.tap2).clone(),
            tap4: t.value(out.base.tap4).clone(),
            base_logits: t.value(out.base.logits).clone(),
            base_embed: t.value(out.base.embed).clone(),
            theta: t.value(out.theta).clone(),
            aligned: t.value(out.aligned).clone(),
            align_logits: t.value(out.align_logits).clone(),
            align_embed: t.value(out.align_embed).clone(),
            descriptor: t.value(out.fused).clone(),
        })
    }

    /// Predicted warp per image (identity when alignment is disabled).
    pub fn predict_theta(&self, images: &[&Tensor], exec: Exec) -> Result<Vec<AffineParams>> {
        let out = self.run_eval(images, exec)?;
        out.theta
            .data()
            .chunks(6)
            .map(AffineParams::from_slice)
            .collect()
    }

    /// Eval-mode alignment-branch embeddings for images warped by the given
    /// parameters, bypassing the grid network.
    pub fn align_embed_with(&self, images: &[&Tensor], thetas: &[AffineParams], exec: Exec) -> Result<Tensor> {
        if images.len() != thetas.len() {
            return Err(Error::dim("one warp per image required"));
        }
        let mut tape = Tape::with_exec(exec);
        let vars = self.register(&mut tape, false);
        let x = Self::batch_var(&mut tape, images)?;
        let th: Vec<f64> = thetas.iter().flat_map(|t| t.as_array()).collect();
        let th = tape.constant(Tensor::new(&[thetas.len(), 6], th)?);
        let mut ctx = self.ctx(&mut tape, &vars, Mode::Eval);
        let (_, _, embed) = self.align_forward(&mut ctx, x, Some(th))?;
        Ok(tape.value(embed).clone())
    }

    /// Unit-norm descriptors `[N, 2 * embed_dim]`, computed in chunks of `batch`.
    pub fn infer_embedding(&self, images: &[&Tensor], batch: usize, exec: Exec) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(images.len() * self.config.descriptor_dim());
        for chunk in images.chunks(batch.max(1)) {
            rows.extend_from_slice(self.run_eval(chunk, exec)?.descriptor.data());
        }
        Tensor::new(&[images.len(), self.config.descriptor_dim()], rows)
    }
}

/// Materialized eval-mode outputs for a batch.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub tap2: Tensor,
    pub tap4: Tensor,
    pub base_logits: Tensor,
    pub base_embed: Tensor,
    pub theta: Tensor,
    pub aligned: Tensor,
    pub align_logits: Tensor,
    pub align_embed: Tensor,
    pub descriptor: Tensor,
}
