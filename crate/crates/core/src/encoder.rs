//! The compression encoder.
//!
//! Each block runs `layernorm → self-attention → compression step → subspace
//! projection`. The compression step descends the negative-entropy surrogate
//! with three learned channel maps standing in for the analytic
//! `Z(ZᵀZ)⁻¹` direction; the projection drops `Δ` trailing channels and adds
//! a learned bypass at the reduced width.

use crate::autograd::Var;
use crate::config::{Arch, C2eConfig, ChannelSchedule};
use crate::error::{C2eError, Result};
use crate::info::{gaussian_entropy_auto, EntropyReport};
use crate::nn::{normal, sincos_2d, Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore, SelfAttention};
use crate::patch::{MaskPlan, PatchBatch};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fixed pixel standardization applied before the patch embedding.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// `softplus⁻¹(β)`, the raw parameter value giving step size `β`.
pub fn beta_to_raw(beta: f64) -> f64 {
    beta.exp_m1().ln()
}

/// `z − β·S(V⁻¹(D(z)))` on flattened token rows; the maps act on channels
/// (`D(z) = z·D`).
pub fn compression_step(g: &mut Graph, z: Var, d: Var, vinv: Var, s: Var, beta: Var) -> Result<Var> {
    let x = g.tape.matmul(z, d)?;
    let x = g.tape.matmul(x, vinv)?;
    let x = g.tape.matmul(x, s)?;
    let x = g.tape.mul_scalar(x, beta)?;
    g.tape.sub(z, x)
}

/// Truncate to the first `keep` channels, then `t + t·P`.
pub fn subspace_project(g: &mut Graph, z: Var, keep: usize, p: Var) -> Result<Var> {
    let c = g.value(z).cols();
    if keep == 0 || keep > c {
        return Err(C2eError::Config(format!("cannot project {c} channels to {keep}")));
    }
    let t = g.tape.slice_cols(z, 0, keep)?;
    let pt = g.tape.matmul(t, p)?;
    g.tape.add(t, pt)
}

/// The learned `D`, `V⁻¹`, `S` maps and the positive step size of one block.
#[derive(Clone, Debug)]
pub struct CompressionMaps {
    pub d: ParamId,
    pub vinv: ParamId,
    pub s: ParamId,
    /// Step size is `softplus(beta_raw)`, so it stays positive.
    pub beta_raw: ParamId,
}

impl CompressionMaps {
    /// Identity plus small noise, so the initial step contracts tokens by about `1 − β`.
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut Rng, dim: usize, beta: f64) -> Self {
        let mut near_identity = |n: &str| {
            let t = normal(rng, &[dim, dim], 0.02).add(&Tensor::eye(dim)).unwrap();
            store.add(format!("{name}.{n}"), t, true)
        };
        let d = near_identity("d");
        let vinv = near_identity("vinv");
        let s = near_identity("s");
        let beta_raw = store.add(format!("{name}.beta_raw"), Tensor::scalar(beta_to_raw(beta)), false);
        CompressionMaps { d, vinv, s, beta_raw }
    }

    pub fn beta(&self, g: &mut Graph) -> Var {
        let raw = g.p(self.beta_raw);
        g.tape.softplus(raw)
    }

    pub fn beta_value(&self, store: &ParamStore) -> f64 {
        let r = store.get(self.beta_raw).item();
        if r > 0.0 {
            r + (-r).exp().ln_1p()
        } else {
            r.exp().ln_1p()
        }
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let (d, vinv, s) = (g.p(self.d), g.p(self.vinv), g.p(self.s));
        let beta = self.beta(g);
        compression_step(g, z, d, vinv, s, beta)
    }
}

#[derive(Clone, Debug)]
pub struct SubspaceProjection {
    pub p: ParamId,
    pub keep: usize,
}

impl SubspaceProjection {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut Rng, keep: usize) -> Self {
        let p = store.add(format!("{name}.p"), normal(rng, &[keep, keep], 0.02), true);
        SubspaceProjection { p, keep }
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let p = g.p(self.p);
        subspace_project(g, z, self.keep, p)
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBody {
    Compression(CompressionMaps),
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm: LayerNorm,
    pub attn: SelfAttention,
    pub body: EncoderBody,
    pub proj: SubspaceProjection,
}

impl EncoderBlock {
    /// Returns the block output and its attention node.
    pub fn forward(&self, g: &mut Graph, z: Var, groups: usize) -> Result<(Var, Var)> {
        let h = self.norm.forward(g, z)?;
        let (a, probs) = self.attn.forward(g, h, groups)?;
        let z = g.tape.add(z, a)?;
        let z = match &self.body {
            EncoderBody::Compression(maps) => maps.forward(g, z)?,
            EncoderBody::Mlp(mlp) => mlp.forward(g, z)?,
        };
        Ok((self.proj.forward(g, z)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub cls: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub schedule: ChannelSchedule,
}

/// Forward products of the encoder for one batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `Z₀`, `[B·T × C₀]`.
    pub z0: Var,
    pub batch: usize,
    /// Rows per image, including the class token when present.
    pub tokens_per_image: usize,
    pub has_cls: bool,
    /// Output of every block in application order (`Z_{n−1}, …, Z₀` before the final norm).
    pub layer_states: Vec<Var>,
    pub attention: Vec<Var>,
}

impl EncoderOutput {
    /// Rows of `Z₀` that are patch tokens (everything but class tokens).
    pub fn patch_rows(&self) -> Vec<usize> {
        let t = self.tokens_per_image;
        (0..self.batch * t)
            .filter(|r| !(self.has_cls && r % t == 0))
            .collect()
    }

    pub fn patches_per_image(&self) -> usize {
        self.tokens_per_image - usize::from(self.has_cls)
    }
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &C2eConfig, with_cls: bool) -> Result<Self> {
        let schedule = cfg.schedule()?;
        let c_in = schedule.embed();
        let embed = Linear::new(store, "enc.embed", rng, cfg.patch_dim(), c_in, true);
        let pos = store.add("enc.pos", sincos_2d(cfg.grid(), c_in), false);
        let cls = with_cls.then(|| store.add("enc.cls", normal(rng, &[1, c_in], 0.02), false));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let (c, keep) = (schedule.encoder_in(i), schedule.encoder_out(i));
            let name = format!("enc.{i}");
            let norm = LayerNorm::new(store, &format!("{name}.norm"), c);
            let attn = SelfAttention::new(store, &format!("{name}.attn"), rng, c, cfg.heads);
            let body = match cfg.arch {
                Arch::C2e => EncoderBody::Compression(CompressionMaps::new(
                    store,
                    &format!("{name}.compress"),
                    rng,
                    c,
                    cfg.beta_step,
                )),
                Arch::Vit => EncoderBody::Mlp(Mlp::new(store, &format!("{name}.mlp"), rng, c, 2 * c)),
            };
            let proj = SubspaceProjection::new(store, &format!("{name}.proj"), rng, keep);
            blocks.push(EncoderBlock {
                norm,
                attn,
                body,
                proj,
            });
        }
        let norm = LayerNorm::new(store, "enc.norm", schedule.latent());
        Ok(Encoder {
            embed,
            pos,
            cls,
            blocks,
            norm,
            schedule,
        })
    }

    /// Encodes explicit token rows: `tokens` is `[B·T × patch_dim]` and
    /// `positions[r]` is the grid index of row `r`.
    pub fn encode_tokens(&self, g: &mut Graph, tokens: Var, positions: &[usize], batch: usize) -> Result<EncoderOutput> {
        let rows = g.value(tokens).rows();
        if batch == 0 || rows % batch != 0 || positions.len() != rows {
            return Err(C2eError::Shape(format!(
                "{rows} token rows, {} positions, batch {batch}",
                positions.len()
            )));
        }
        let mut t = rows / batch;
        let x = self.embed.forward(g, tokens)?;
        let pos = g.p(self.pos);
        let pos = g.tape.gather_rows(pos, positions)?;
        let mut z = g.tape.add(x, pos)?;
        if let Some(cls) = self.cls {
            let cls = g.p(cls);
            let reps = g.tape.gather_rows(cls, &vec![0; batch])?;
            let all = g.tape.concat_rows(&[z, reps])?;
            let order: Vec<usize> = (0..batch)
                .flat_map(|b| std::iter::once(rows + b).chain(b * t..(b + 1) * t))
                .collect();
            z = g.tape.gather_rows(all, &order)?;
            t += 1;
        }
        let mut layer_states = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, probs) = block.forward(g, z, batch)?;
            z = out;
            layer_states.push(z);
            attention.push(probs);
        }
        let z0 = self.norm.forward(g, z)?;
        Ok(EncoderOutput {
            z0,
            batch,
            tokens_per_image: t,
            has_cls: self.cls.is_some(),
            layer_states,
            attention,
        })
    }

    /// Encodes the visible tokens of each image. `plans` holds one plan per
    /// image, or a single plan shared by the batch.
    pub fn encode(&self, g: &mut Graph, batch: &PatchBatch, plans: &[MaskPlan]) -> Result<EncoderOutput> {
        let plans = expand_plans(plans, batch.batch)?;
        let n = batch.num_patches();
        let nv = plans[0].visible.len();
        if plans.iter().any(|p| p.n != n || p.visible.len() != nv) {
            return Err(C2eError::Config("mask plans disagree with the batch".into()));
        }
        let rows: Vec<usize> = plans
            .iter()
            .enumerate()
            .flat_map(|(b, p)| p.visible.iter().map(move |&i| b * n + i))
            .collect();
        let positions: Vec<usize> = plans.iter().flat_map(|p| p.visible.iter().copied()).collect();
        let visible = batch.flat().select_rows(&rows).map(|v| (v - PIXEL_MEAN) / PIXEL_STD);
        let visible = g.constant(visible);
        self.encode_tokens(g, visible, &positions, batch.batch)
    }
}

pub(crate) fn expand_plans(plans: &[MaskPlan], batch: usize) -> Result<Vec<MaskPlan>> {
    match plans.len() {
        1 => Ok(vec![plans[0].clone(); batch]),
        n if n == batch => Ok(plans.to_vec()),
        n => Err(C2eError::Config(format!("{n} mask plans for batch of {batch}"))),
    }
}

/// Gaussian entropy of each encoder layer output, tokens of the whole batch
/// pooled as samples. Index `i` of the result is `H(Z_i)` with `Z₀` the last block.
pub fn layer_entropies(g: &Graph, out: &EncoderOutput, jitter_scale: f64) -> Result<Vec<EntropyReport>> {
    out.layer_states
        .iter()
        .rev()
        .map(|&v| gaussian_entropy_auto(g.value(v), jitter_scale))
        .collect()
}
