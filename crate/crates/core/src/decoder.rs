//! The exploration decoder.
//!
//! Masked positions are filled with a learned token, then each block runs
//! `layernorm → self-attention → Langevin step → inverse projection`. The
//! Langevin step moves every token down its learned energy,
//!
//! ```text
//! ẑ ← ẑ − (ε / kT(h)) · E(ẑ) · ∇E(ẑ) + √(2ε) · ω,   ω ~ N(0, I)
//! ```
//!
//! where the temperature `kT(h)` is predicted once from the leading
//! `ceil(β·C₀)` channels of `Z₀` and shared by every block.

use crate::autograd::Var;
use crate::config::{Arch, C2eConfig, ChannelSchedule, LossKind};
use crate::encoder::{expand_plans, EncoderOutput};
use crate::error::{C2eError, Result};
use crate::nn::{normal, sincos_2d, xavier, Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore, SelfAttention};
use crate::patch::MaskPlan;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower bound added to the softplus temperature.
pub const TEMPERATURE_FLOOR: f64 = 1e-4;

/// A per-token scalar energy with its gradient, both built from tape
/// operations so they stay differentiable with respect to parameters.
pub trait Energy {
    /// Returns `(E [R×1], ∇_z E [R×C])` for token rows `z [R×C]`.
    fn energy_and_grad(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)>;
}

/// `E(z) = w₂ᵀ tanh(W₁ᵀz + b₁) + b₂`, one hidden layer per token.
#[derive(Clone, Debug)]
pub struct EnergyNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl EnergyNet {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut Rng, dim: usize, hidden: usize) -> Self {
        EnergyNet {
            w1: store.add(format!("{name}.w1"), xavier(rng, dim, hidden), true),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[hidden]), false),
            w2: store.add(format!("{name}.w2"), xavier(rng, hidden, 1), true),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[1]), false),
        }
    }

    /// Energies alone, for checking the analytic gradient against autodiff.
    pub fn energy(&self, g: &mut Graph, z: Var) -> Result<Var> {
        Ok(self.energy_and_grad(g, z)?.0)
    }
}

impl Energy for EnergyNet {
    fn energy_and_grad(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        let (w1, b1, w2, b2) = (g.p(self.w1), g.p(self.b1), g.p(self.w2), g.p(self.b2));
        let pre = g.tape.matmul(z, w1)?;
        let pre = g.tape.add_row(pre, b1)?;
        let act = g.tape.tanh(pre);
        let e = g.tape.matmul(act, w2)?;
        let e = g.tape.add_row(e, b2)?;
        // ∇_z E = ((1 − tanh²) ⊙ w₂ᵀ) W₁ᵀ, expressed with first-order tape ops
        // so the Langevin drift can itself be differentiated.
        let sq = g.tape.square(act);
        let neg = g.tape.scale(sq, -1.0);
        let dact = g.tape.add_scalar(neg, 1.0);
        let w = g.tape.mul_row(dact, w2)?;
        let w1t = g.tape.transpose(w1)?;
        let de = g.tape.matmul(w, w1t)?;
        Ok((e, de))
    }
}

/// `E(z) = ½‖z‖²` per token; its gradient is `z`.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadraticEnergy;

impl Energy for QuadraticEnergy {
    fn energy_and_grad(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        let sq = g.tape.square(z);
        let s = g.tape.sum_cols(sq)?;
        Ok((g.tape.scale(s, 0.5), z))
    }
}

/// Energy that does not depend on `z`.
#[derive(Clone, Copy, Debug)]
pub struct ConstantEnergy(pub f64);

impl Energy for ConstantEnergy {
    fn energy_and_grad(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        let (r, c) = g.value(z).dims2()?;
        let e = g.constant(Tensor::full(&[r, 1], self.0));
        let de = g.constant(Tensor::zeros(&[r, c]));
        Ok((e, de))
    }
}

/// One Langevin update on token rows `z [R×C]`.
///
/// `inv_kt` holds `1/kT` per row (`[R×1]`). With `noise = None` the step is
/// deterministic. A non-finite energy aborts with a divergence error naming `layer`.
pub fn langevin_step(
    g: &mut Graph,
    z: Var,
    inv_kt: Var,
    energy: &dyn Energy,
    epsilon: f64,
    noise: Option<&mut Rng>,
    layer: usize,
) -> Result<Var> {
    langevin_update(g, z, inv_kt, energy, epsilon, noise, layer).map(|(out, _)| out)
}

/// [`langevin_step`] that also returns the energies it computed.
pub fn langevin_update(
    g: &mut Graph,
    z: Var,
    inv_kt: Var,
    energy: &dyn Energy,
    epsilon: f64,
    noise: Option<&mut Rng>,
    layer: usize,
) -> Result<(Var, Var)> {
    let (e, de) = energy.energy_and_grad(g, z)?;
    if !g.value(e).all_finite() {
        return Err(C2eError::Divergence {
            step: None,
            layer: Some(layer),
            detail: "non-finite energy in Langevin step".into(),
        });
    }
    let coef = g.tape.mul(e, inv_kt)?;
    let coef = g.tape.scale(coef, epsilon);
    let drift = g.tape.mul_col(de, coef)?;
    let mut out = g.tape.sub(z, drift)?;
    if let Some(rng) = noise {
        let shape = g.value(z).shape().to_vec();
        let sd = (2.0 * epsilon).sqrt();
        let omega = g.constant(Tensor::from_fn(&shape, |_| sd * rng.normal()));
        out = g.tape.add(out, omega)?;
    }
    Ok((out, e))
}

/// Maps the leading `channels` of `Z₀` to the hidden temperature state `h`
/// and the temperature `kT = softplus(linear(h)) + floor`.
#[derive(Clone, Debug)]
pub struct TemperatureHead {
    pub channels: usize,
    pub proj: Linear,
    pub out: Linear,
}

impl TemperatureHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, channels: usize, hidden: usize) -> Self {
        TemperatureHead {
            channels,
            proj: Linear::new(store, "dec.temp.proj", rng, channels, hidden, true),
            out: Linear::new(store, "dec.temp.out", rng, hidden, 1, true),
        }
    }

    /// `z0 [B·T × C₀]` with `T` patch tokens per image; returns `(h [B×C_h], kT [B×1])`.
    pub fn forward(&self, g: &mut Graph, z0: Var, tokens_per_image: usize) -> Result<(Var, Var)> {
        let part = g.tape.slice_cols(z0, 0, self.channels)?;
        let pooled = g.tape.group_mean_rows(part, tokens_per_image)?;
        let h = self.proj.forward(g, pooled)?;
        let t = self.out.forward(g, h)?;
        let t = g.tape.softplus(t);
        Ok((h, g.tape.add_scalar(t, TEMPERATURE_FLOOR)))
    }
}

/// Learned widening `w = z·U` followed by the bypass `w + w·P⁻¹`.
#[derive(Clone, Debug)]
pub struct InverseProjection {
    pub up: Linear,
    pub pinv: ParamId,
}

impl InverseProjection {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut Rng, from: usize, to: usize) -> Self {
        InverseProjection {
            up: Linear::new(store, &format!("{name}.up"), rng, from, to, false),
            pinv: store.add(format!("{name}.pinv"), normal(rng, &[to, to], 0.02), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let (u, p) = (g.p(self.up.w), g.p(self.pinv));
        inverse_project(g, z, u, p)
    }
}

pub fn inverse_project(g: &mut Graph, z: Var, up: Var, pinv: Var) -> Result<Var> {
    let w = g.tape.matmul(z, up)?;
    let pw = g.tape.matmul(w, pinv)?;
    g.tape.add(w, pw)
}

#[derive(Clone, Debug)]
pub enum DecoderBody {
    Langevin(EnergyNet),
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm: LayerNorm,
    pub attn: SelfAttention,
    pub body: DecoderBody,
    pub inv: InverseProjection,
}

/// Temperature state and per-block energies of one decoder pass.
#[derive(Clone, Debug)]
pub struct EnergyContext {
    /// `[R×1]` per Langevin block.
    pub energies: Vec<Var>,
    /// `[B×1]`, strictly positive.
    pub kt: Var,
    /// `[B×C_h]`.
    pub h: Var,
    pub conditional_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[B·N × patch_dim]`.
    pub pred: Var,
    pub ctx: EnergyContext,
    pub attention: Vec<Var>,
    /// Width after each block.
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub temperature: TemperatureHead,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub epsilon: f64,
    pub conditional_ratio: f64,
    pub schedule: ChannelSchedule,
    pub num_patches: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &C2eConfig) -> Result<Self> {
        let schedule = cfg.schedule()?;
        let c0 = schedule.latent();
        let mask_token = store.add("dec.mask", normal(rng, &[1, c0], 0.02), false);
        let pos = store.add("dec.pos", sincos_2d(cfg.grid(), c0), false);
        let temperature = TemperatureHead::new(store, rng, cfg.temperature_channels(), cfg.temperature_dim);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for j in 0..cfg.depth {
            let (c, to) = (schedule.decoder_in(j), schedule.decoder_out(j));
            let name = format!("dec.{j}");
            let norm = LayerNorm::new(store, &format!("{name}.norm"), c);
            let attn = SelfAttention::new(store, &format!("{name}.attn"), rng, c, cfg.heads);
            let body = match cfg.arch {
                Arch::C2e => DecoderBody::Langevin(EnergyNet::new(store, &format!("{name}.energy"), rng, c, c)),
                Arch::Vit => DecoderBody::Mlp(Mlp::new(store, &format!("{name}.mlp"), rng, c, 2 * c)),
            };
            let inv = InverseProjection::new(store, &format!("{name}.inv"), rng, c, to);
            blocks.push(DecoderBlock { norm, attn, body, inv });
        }
        let norm = LayerNorm::new(store, "dec.norm", schedule.embed());
        let head = Linear::new(store, "dec.head", rng, schedule.embed(), cfg.patch_dim(), true);
        Ok(Decoder {
            mask_token,
            pos,
            temperature,
            blocks,
            norm,
            head,
            epsilon: cfg.epsilon,
            conditional_ratio: cfg.conditional_ratio,
            schedule,
            num_patches: cfg.num_patches(),
        })
    }

    /// Reconstructs every patch of every image from `Z₀`. Langevin noise is
    /// drawn from `noise` when given and skipped otherwise.
    pub fn decode(
        &self,
        g: &mut Graph,
        enc: &EncoderOutput,
        plans: &[MaskPlan],
        mut noise: Option<&mut Rng>,
    ) -> Result<DecoderOutput> {
        let b = enc.batch;
        let n = self.num_patches;
        let plans = expand_plans(plans, b)?;
        let nv = enc.patches_per_image();
        if plans.iter().any(|p| p.visible.len() != nv || p.n != n) {
            return Err(C2eError::Config("mask plans disagree with the encoder output".into()));
        }
        let zv = if enc.has_cls {
            g.tape.gather_rows(enc.z0, &enc.patch_rows())?
        } else {
            enc.z0
        };

        let (h, kt) = self.temperature.forward(g, zv, nv)?;
        let row_image: Vec<usize> = (0..b * n).map(|r| r / n).collect();
        let kt_rows = g.tape.gather_rows(kt, &row_image)?;
        let inv_kt = g.tape.recip(kt_rows);

        // Scatter visible tokens back to their grid slots; masked slots read the mask token.
        let mask = g.p(self.mask_token);
        let pool = g.tape.concat_rows(&[zv, mask])?;
        let mut index = vec![b * nv; b * n];
        for (bi, plan) in plans.iter().enumerate() {
            for (k, &p) in plan.visible.iter().enumerate() {
                index[bi * n + p] = bi * nv + k;
            }
        }
        let full = g.tape.gather_rows(pool, &index)?;
        let pos = g.p(self.pos);
        let grid: Vec<usize> = (0..b * n).map(|r| r % n).collect();
        let pos = g.tape.gather_rows(pos, &grid)?;
        let mut z = g.tape.add(full, pos)?;

        let mut energies = Vec::new();
        let mut attention = Vec::with_capacity(self.blocks.len());
        let mut widths = Vec::with_capacity(self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            let a = block.norm.forward(g, z)?;
            let (a, probs) = block.attn.forward(g, a, b)?;
            attention.push(probs);
            z = g.tape.add(z, a)?;
            z = match &block.body {
                DecoderBody::Langevin(net) => {
                    let (out, e) = langevin_update(g, z, inv_kt, net, self.epsilon, noise.as_deref_mut(), j)?;
                    energies.push(e);
                    out
                }
                DecoderBody::Mlp(mlp) => mlp.forward(g, z)?,
            };
            z = block.inv.forward(g, z)?;
            widths.push(g.value(z).cols());
        }
        let z = self.norm.forward(g, z)?;
        let pred = self.head.forward(g, z)?;
        Ok(DecoderOutput {
            pred,
            ctx: EnergyContext {
                energies,
                kt,
                h,
                conditional_ratio: self.conditional_ratio,
            },
            attention,
            widths,
        })
    }
}

/// Mean absolute (or squared) error over the masked patches of each image.
///
/// `target` must already be patch-normalized and laid out like `pred`
/// (`[B·N × patch_dim]`). When no patch is masked every patch counts.
pub fn reconstruction_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    plans: &[MaskPlan],
    kind: LossKind,
) -> Result<Var> {
    if g.value(pred).shape() != target.shape() {
        return Err(C2eError::dim("reconstruction_loss", g.value(pred).shape(), target.shape()));
    }
    let n = plans[0].n;
    let b = target.rows() / n.max(1);
    let plans = expand_plans(plans, b)?;
    let mut rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(bi, p)| p.masked.iter().map(move |&i| bi * n + i))
        .collect();
    if rows.is_empty() {
        rows = (0..target.rows()).collect();
    }
    let p = g.tape.gather_rows(pred, &rows)?;
    let t = g.constant(target.select_rows(&rows));
    let diff = g.tape.sub(p, t)?;
    let err = match kind {
        LossKind::L1 => g.tape.abs(diff),
        LossKind::L2 => g.tape.square(diff),
    };
    Ok(g.tape.mean(err))
}
