//! The full masked autoencoder: compression encoder plus exploration decoder.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::{C2eConfig, Pooling};
use crate::decoder::{reconstruction_loss, Decoder, DecoderOutput};
use crate::encoder::{layer_entropies, Encoder, EncoderOutput};
use crate::error::{C2eError, Result};
use crate::info::EntropyReport;
use crate::nn::{Graph, ParamStore};
use crate::patch::{normalize_patches, patchify, MaskPlan, PatchBatch};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// RNG stream used for weight initialization.
pub const STREAM_INIT: u64 = 1;
/// RNG stream used by the training loop (batches, masks, Langevin noise).
pub const STREAM_TRAIN: u64 = 2;

/// One layer's token matrix with its position in the channel schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// Layer index counted from the latent end: `0` is the encoder output.
    pub layer: usize,
    /// `[B × T × C]`.
    pub tokens: Tensor,
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct C2eModel {
    pub cfg: C2eConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

pub struct ForwardOutput {
    pub loss: Var,
    pub enc: EncoderOutput,
    pub dec: DecoderOutput,
}

impl C2eModel {
    pub fn new(cfg: &C2eConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::with_stream(cfg.seed, STREAM_INIT);
        let encoder = Encoder::new(&mut params, &mut rng, cfg, cfg.pooling == Pooling::Cls)?;
        let decoder = Decoder::new(&mut params, &mut rng, cfg)?;
        Ok(C2eModel {
            cfg: cfg.clone(),
            params,
            encoder,
            decoder,
        })
    }

    pub fn patchify(&self, images: &Tensor) -> Result<PatchBatch> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.cfg.image_size || s[2] != self.cfg.image_size {
            return Err(C2eError::Shape(format!(
                "expected [B, {0}, {0}, 3] images, got {s:?}",
                self.cfg.image_size
            )));
        }
        patchify(images, self.cfg.patch_size)
    }

    /// Encoder, decoder and masked reconstruction loss on one batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &PatchBatch,
        plans: &[MaskPlan],
        noise: Option<&mut Rng>,
    ) -> Result<ForwardOutput> {
        let enc = self.encoder.encode(g, batch, plans)?;
        let dec = self.decoder.decode(g, &enc, plans, noise)?;
        let target = normalize_patches(&batch.flat());
        let loss = reconstruction_loss(g, dec.pred, &target, plans, self.cfg.loss)?;
        Ok(ForwardOutput { loss, enc, dec })
    }

    /// Loss with frozen parameters and no Langevin noise.
    pub fn eval_loss(&self, batch: &PatchBatch, plans: &[MaskPlan]) -> Result<f64> {
        let mut g = Graph::frozen(&self.params);
        let out = self.forward(&mut g, batch, plans, None)?;
        Ok(g.value(out.loss).item())
    }

    pub fn entropies(&self, g: &Graph, enc: &EncoderOutput) -> Result<Vec<EntropyReport>> {
        layer_entropies(g, enc, self.cfg.jitter)
    }

    /// `Z₀` for every patch of every image (no masking, no noise).
    pub fn encode_all(&self, images: &Tensor) -> Result<LatentState> {
        let pb = self.patchify(images)?;
        let mut g = Graph::frozen(&self.params);
        let enc = self.encoder.encode(&mut g, &pb, &[MaskPlan::all_visible(pb.num_patches())])?;
        let z0 = g.value(enc.z0);
        Ok(LatentState {
            layer: 0,
            tokens: z0.reshape(&[pb.batch, enc.tokens_per_image, z0.cols()])?,
            widths: self.encoder.schedule.widths().to_vec(),
        })
    }

    /// One feature row per image: mean of the patch tokens of `Z₀`, or the
    /// class token when the model was built with one.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let z = self.encode_all(images)?;
        let (b, t, c) = (z.tokens.shape()[0], z.tokens.shape()[1], z.tokens.shape()[2]);
        let d = z.tokens.data();
        let has_cls = self.encoder.cls.is_some();
        Ok(Tensor::from_fn(&[b, c], |i| {
            let (bi, ci) = (i / c, i % c);
            let row = |r: usize| d[(bi * t + r) * c + ci];
            match self.cfg.pooling {
                Pooling::Cls if has_cls => row(0),
                _ => {
                    let first = usize::from(has_cls);
                    (first..t).map(row).sum::<f64>() / (t - first) as f64
                }
            }
        }))
    }

    /// Reconstructed images, with each predicted patch mapped back through the
    /// true patch mean and spread. Returns `(images, masked loss)`.
    pub fn reconstruct(&self, images: &Tensor, plans: &[MaskPlan]) -> Result<(Tensor, f64)> {
        let pb = self.patchify(images)?;
        let mut g = Graph::frozen(&self.params);
        let out = self.forward(&mut g, &pb, plans, None)?;
        let pred = g.value(out.dec.pred);
        let raw = pb.flat();
        let c = raw.cols();
        let mut pixels = pred.clone();
        for (r, row) in pixels.data_mut().chunks_mut(c).enumerate() {
            let src = raw.row(r);
            let mean = src.iter().sum::<f64>() / c as f64;
            let sd = (src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64 + 1e-6).sqrt();
            row.iter_mut().for_each(|v| *v = (*v * sd + mean).clamp(0.0, 1.0));
        }
        let tokens = pixels.reshape(pb.tokens.shape())?;
        let img = crate::patch::unpatchify_tokens(&tokens, &pb)?;
        Ok((img, g.value(out.loss).item()))
    }
}
