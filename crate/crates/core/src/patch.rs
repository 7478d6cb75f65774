//! Patch decomposition of images and MAE-style random masking.

use serde::{Deserialize, Serialize};

use crate::error::{C2eError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Non-overlapping square patches of a batch of RGB images.
///
/// `tokens` is `[B × N × patch²·3]`, patches in row-major grid order, each
/// flattened as `(row, col, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub tokens: Tensor,
    pub batch: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
}

impl PatchBatch {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Grid coordinates `(row, col)` of each token.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let (gh, gw) = self.grid();
        (0..gh * gw).map(|i| (i / gw, i % gw)).collect()
    }

    /// Tokens flattened to `[B·N × patch²·3]`.
    pub fn flat(&self) -> Tensor {
        self.tokens
            .reshape(&[self.batch * self.num_patches(), self.patch_dim()])
            .expect("patch batch shape")
    }
}

pub fn patchify(images: &Tensor, patch: usize) -> Result<PatchBatch> {
    let &[b, h, w, ch] = images.shape() else {
        return Err(C2eError::Shape(format!(
            "patchify expects [B, H, W, 3], got {:?}",
            images.shape()
        )));
    };
    if ch != 3 {
        return Err(C2eError::Shape(format!("expected 3 channels, got {ch}")));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(C2eError::Shape(format!(
            "image {h}×{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * 3;
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = ((bi * h + y) * w + gx * patch) * 3;
                    out.extend_from_slice(&src[start..start + patch * 3]);
                }
            }
        }
    }
    Ok(PatchBatch {
        tokens: Tensor::new(&[b, gh * gw, pd], out)?,
        batch: b,
        image_h: h,
        image_w: w,
        patch,
    })
}

/// Inverse of [`patchify`]; accepts any `[B × N × patch²·3]` tensor laid out like `pb.tokens`.
pub fn unpatchify_tokens(tokens: &Tensor, pb: &PatchBatch) -> Result<Tensor> {
    let (gh, gw) = pb.grid();
    let (p, h, w) = (pb.patch, pb.image_h, pb.image_w);
    if tokens.len() != pb.batch * h * w * 3 {
        return Err(C2eError::dim("unpatchify", tokens.shape(), pb.tokens.shape()));
    }
    let src = tokens.data();
    let mut out = vec![0.0; tokens.len()];
    let mut off = 0;
    for bi in 0..pb.batch {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let y = gy * p + py;
                    let start = ((bi * h + y) * w + gx * p) * 3;
                    out[start..start + p * 3].copy_from_slice(&src[off..off + p * 3]);
                    off += p * 3;
                }
            }
        }
    }
    Tensor::new(&[pb.batch, h, w, 3], out)
}

pub fn unpatchify(pb: &PatchBatch) -> Result<Tensor> {
    unpatchify_tokens(&pb.tokens, pb)
}

/// Per-row standardization to mean 0 and variance 1 (patch-normalized targets).
pub fn normalize_patches(rows: &Tensor) -> Tensor {
    let c = rows.cols();
    let mut out = rows.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
    }
    out
}

/// Which of `n` tokens an image keeps; `floor(ratio·n)` are masked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n: usize,
    pub ratio_per_mille: u32,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn ratio(&self) -> f64 {
        self.ratio_per_mille as f64 / 1000.0
    }

    /// Plan with every token visible.
    pub fn all_visible(n: usize) -> Self {
        MaskPlan {
            n,
            ratio_per_mille: 0,
            visible: (0..n).collect(),
            masked: Vec::new(),
            seed: 0,
        }
    }

    /// Plan from an explicit masked set.
    pub fn from_masked(n: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; n];
        for &m in masked {
            if m >= n || std::mem::replace(&mut is_masked[m], true) {
                return Err(C2eError::Config(format!("bad masked index {m} for {n} tokens")));
            }
        }
        Ok(MaskPlan {
            n,
            ratio_per_mille: (1000 * masked.len() / n.max(1)) as u32,
            visible: (0..n).filter(|&i| !is_masked[i]).collect(),
            masked: (0..n).filter(|&i| is_masked[i]).collect(),
            seed: 0,
        })
    }
}

/// Uniform random subset of `floor(ratio·n)` tokens to mask, without replacement.
pub fn plan_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(C2eError::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = (ratio * n as f64).floor() as usize;
    let seed = rng.seed();
    let mut masked = rng.choose_k(n, k);
    masked.sort_unstable();
    let mut plan = MaskPlan::from_masked(n, &masked)?;
    plan.ratio_per_mille = (ratio * 1000.0).round() as u32;
    plan.seed = seed;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let img = Tensor::zeros(&[1, 224, 224, 3]);
        assert_eq!(patchify(&img, 16).unwrap().num_patches(), 196);
        let img = Tensor::zeros(&[2, 32, 32, 3]);
        let pb = patchify(&img, 16).unwrap();
        assert_eq!(pb.tokens.shape(), &[2, 4, 768]);
    }

    #[test]
    fn indivisible_is_shape_error() {
        let img = Tensor::zeros(&[1, 30, 32, 3]);
        assert!(matches!(patchify(&img, 8), Err(C2eError::Shape(_))));
    }

    #[test]
    fn patch_contents_follow_grid_order() {
        // Pixel value encodes its (y, x, c) location.
        let img = Tensor::from_fn(&[1, 4, 4, 3], |i| i as f64);
        let pb = patchify(&img, 2).unwrap();
        // Second patch (grid row 0, col 1) starts at pixel (0, 2).
        assert_eq!(pb.tokens.data()[12], ((2) * 3) as f64);
        assert_eq!(unpatchify(&pb).unwrap(), img);
    }

    #[test]
    fn mask_plan_sizes() {
        let mut rng = Rng::new(5);
        let p = plan_mask(196, 0.75, &mut rng).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (147, 49));
        let p = plan_mask(16, 0.0, &mut rng).unwrap();
        assert_eq!(p.visible, (0..16).collect::<Vec<_>>());
        assert!(plan_mask(16, 1.0, &mut rng).is_err());
        assert!(plan_mask(16, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_plan_is_seed_deterministic() {
        let a = plan_mask(100, 0.6, &mut Rng::new(11)).unwrap();
        let b = plan_mask(100, 0.6, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let t = Tensor::from_fn(&[3, 12], |i| (i as f64 * 0.7).sin() * (1 + i / 12) as f64);
        let n = normalize_patches(&t);
        for r in 0..3 {
            let row = n.row(r);
            let mean = row.iter().sum::<f64>() / 12.0;
            let var = row.iter().map(|v| v * v).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
