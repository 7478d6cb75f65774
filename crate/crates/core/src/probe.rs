//! Frozen-encoder evaluation: features, linear probes, group splits and exports.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{C2eError, Result};
use crate::model::C2eModel;
use crate::nn::Graph;
use crate::patch::MaskPlan;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Images per forward pass during feature extraction.
const FEATURE_CHUNK: usize = 64;
pub const PROBE_STEPS: usize = 1000;
const PROBE_L2: f64 = 1e-4;
const SPLIT_STREAM: u64 = 11;

/// One row per image: the pooled `Z₀` of the frozen encoder with every patch
/// visible and no noise.
pub fn extract_features(model: &C2eModel, images: &Tensor) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(C2eError::EmptyInput("no images to featurize"));
    }
    let per = images.len() / n;
    let mut data = Vec::new();
    let mut cols = 0;
    for start in (0..n).step_by(FEATURE_CHUNK) {
        let end = (start + FEATURE_CHUNK).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
        let f = model.features(&chunk)?;
        cols = f.cols();
        data.extend_from_slice(f.data());
    }
    Tensor::new(&[n, cols], data)
}

/// Train and test image indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// SHA-256 over the JSON of both index lists.
    pub fn manifest_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("split serializes")))
    }

    /// Errors when a group id occurs on both sides.
    pub fn check_disjoint(&self, groups: &[usize]) -> Result<()> {
        let train: BTreeSet<usize> = self.train.iter().map(|&i| groups[i]).collect();
        if let Some(g) = self.test.iter().map(|&i| groups[i]).find(|g| train.contains(g)) {
            return Err(C2eError::Partition(format!("group {g} appears in both train and test")));
        }
        Ok(())
    }
}

/// Holds out `round(test_frac · groups)` whole groups, chosen by `seed`.
pub fn group_split(groups: &[usize], test_frac: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&test_frac) || test_frac == 0.0 {
        return Err(C2eError::Config(format!("test fraction {test_frac} outside (0, 1)")));
    }
    let ids: Vec<usize> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n_test = ((ids.len() as f64 * test_frac).round() as usize).clamp(1, ids.len().saturating_sub(1));
    if ids.len() < 2 {
        return Err(C2eError::DegenerateSplit("need at least two groups to split".into()));
    }
    let mut rng = Rng::with_stream(seed, SPLIT_STREAM);
    let test: BTreeSet<usize> = rng.choose_k(ids.len(), n_test).into_iter().map(|i| ids[i]).collect();
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..groups.len()).partition(|&i| test.contains(&groups[i]));
    Ok(Split {
        train: train_idx,
        test: test_idx,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub seed: u64,
    pub k: usize,
    pub train_groups: Vec<usize>,
    pub test_groups: Vec<usize>,
    pub split: Split,
}

/// For each seed, `k` whole groups for training and the rest for testing.
pub fn make_fewshot_splits(groups: &[usize], k: usize, seeds: &[u64]) -> Result<Vec<FewShotSplit>> {
    let ids: Vec<usize> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if k == 0 || k >= ids.len() {
        return Err(C2eError::Config(format!(
            "k = {k} train groups needs 1 <= k < {} groups",
            ids.len()
        )));
    }
    seeds
        .iter()
        .map(|&seed| {
            let mut rng = Rng::with_stream(seed, SPLIT_STREAM);
            let mut train_groups: Vec<usize> = rng.choose_k(ids.len(), k).into_iter().map(|i| ids[i]).collect();
            train_groups.sort_unstable();
            let test_groups: Vec<usize> = ids.iter().copied().filter(|g| !train_groups.contains(g)).collect();
            let (train, test): (Vec<usize>, Vec<usize>) =
                (0..groups.len()).partition(|&i| train_groups.contains(&groups[i]));
            let split = Split { train, test };
            split.check_disjoint(groups)?;
            Ok(FewShotSplit {
                seed,
                k,
                train_groups,
                test_groups,
                split,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub split_hash: String,
    pub accuracy: f64,
    /// `None` for a class the probe never predicted.
    pub per_class_precision: Vec<Option<f64>>,
    /// Test images per class.
    pub per_class_count: Vec<usize>,
    pub seed: u64,
    pub checkpoint_hash: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    /// Verified before fitting; a leaking split is an error, not a report.
    pub groups_disjoint: bool,
}

/// Multinomial logistic regression on whitened features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub mean: Vec<f64>,
    /// `[C × C]`: centered features times this matrix have identity covariance
    /// (up to a small ridge), so gradient descent converges in every direction.
    pub whiten: Vec<f64>,
    /// `[C × K]` row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub classes: usize,
}

/// Ridge added to the standardized covariance before whitening.
const WHITEN_RIDGE: f64 = 1e-3;

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// `D·L⁻ᵀ` where `D` scales columns to unit variance and `L·Lᵀ` is the
/// covariance of the scaled columns plus a ridge.
fn whitening(x: &Tensor, mean: &[f64]) -> Result<Vec<f64>> {
    let (n, c) = x.dims2()?;
    let scale: Vec<f64> = (0..c)
        .map(|j| {
            let var = (0..n).map(|i| (x.at(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let xs = Tensor::from_fn(&[n, c], |k| (x.data()[k] - mean[k % c]) * scale[k % c]);
    let mut cov = crate::linalg::gram(&xs)?.scale(1.0 / n as f64);
    for j in 0..c {
        cov.data_mut()[j * c + j] += WHITEN_RIDGE;
    }
    let l = crate::linalg::cholesky(&cov)?;
    // Lower-triangular inverse by forward substitution.
    let mut inv = vec![0.0; c * c];
    for col in 0..c {
        for i in col..c {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                v -= l.at(i, k) * inv[k * c + col];
            }
            inv[i * c + col] = v / l.at(i, i);
        }
    }
    // whiten[j][k] = scale[j] · (L⁻¹)[k][j]
    Ok((0..c * c).map(|idx| scale[idx / c] * inv[(idx % c) * c + idx / c]).collect())
}

impl LinearClassifier {
    /// Full-batch gradient descent with step `1/L`, `L` bounding the loss
    /// curvature (power iteration on the whitened Gram matrix).
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, steps: usize) -> Result<Self> {
        let (n, c) = x.dims2()?;
        if n != labels.len() {
            return Err(C2eError::dim("linear probe", &[n], &[labels.len()]));
        }
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        if present.len() < 2 {
            return Err(C2eError::DegenerateSplit(format!(
                "train split has {} class(es); need at least 2",
                present.len()
            )));
        }
        let mean: Vec<f64> = (0..c).map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64).collect();
        let whiten = whitening(x, &mean)?;
        let mut clf = LinearClassifier {
            mean,
            whiten,
            w: vec![0.0; c * classes],
            b: vec![0.0; classes],
            classes,
        };
        let xs = clf.standardize(x);
        // Bias column included in the curvature bound.
        let gram_max = {
            let mut v = vec![1.0; c + 1];
            let mut lam = 0.0;
            for _ in 0..100 {
                let mut xv = vec![0.0; n];
                for (i, o) in xv.iter_mut().enumerate() {
                    *o = xs[i * c..(i + 1) * c].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[c];
                }
                let mut next = vec![0.0; c + 1];
                for i in 0..n {
                    for j in 0..c {
                        next[j] += xs[i * c + j] * xv[i];
                    }
                    next[c] += xv[i];
                }
                let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm == 0.0 {
                    break;
                }
                lam = norm / n as f64;
                v = next.into_iter().map(|a| a / norm).collect();
            }
            lam
        };
        let lr = 1.0 / (0.5 * gram_max + PROBE_L2).max(1e-12);
        let mut p = vec![0.0; n * classes];
        for _ in 0..steps {
            clf.logits_into(&xs, n, &mut p);
            for (i, row) in p.chunks_mut(classes).enumerate() {
                softmax_in_place(row);
                row[labels[i]] -= 1.0;
            }
            let mut gw = vec![0.0; c * classes];
            let mut gb = vec![0.0; classes];
            for i in 0..n {
                let pr = &p[i * classes..(i + 1) * classes];
                for j in 0..c {
                    let xij = xs[i * c + j];
                    for k in 0..classes {
                        gw[j * classes + k] += xij * pr[k];
                    }
                }
                for k in 0..classes {
                    gb[k] += pr[k];
                }
            }
            for (w, g) in clf.w.iter_mut().zip(&gw) {
                *w -= lr * (g / n as f64 + PROBE_L2 * *w);
            }
            for (b, g) in clf.b.iter_mut().zip(&gb) {
                *b -= lr * g / n as f64;
            }
        }
        Ok(clf)
    }

    fn standardize(&self, x: &Tensor) -> Vec<f64> {
        let c = self.mean.len();
        let mut out = vec![0.0; x.len()];
        for (row_in, row_out) in x.data().chunks(c).zip(out.chunks_mut(c)) {
            for (j, v) in row_in.iter().enumerate() {
                let centered = v - self.mean[j];
                for (o, m) in row_out.iter_mut().zip(&self.whiten[j * c..(j + 1) * c]) {
                    *o += centered * m;
                }
            }
        }
        out
    }

    fn logits_into(&self, xs: &[f64], n: usize, out: &mut [f64]) {
        let (c, k) = (self.mean.len(), self.classes);
        for i in 0..n {
            let row = &mut out[i * k..(i + 1) * k];
            row.copy_from_slice(&self.b);
            for j in 0..c {
                let xij = xs[i * c + j];
                for (o, w) in row.iter_mut().zip(&self.w[j * k..(j + 1) * k]) {
                    *o += xij * w;
                }
            }
        }
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let n = x.rows();
        let xs = self.standardize(x);
        let mut logits = vec![0.0; n * self.classes];
        self.logits_into(&xs, n, &mut logits);
        logits
            .chunks(self.classes)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Fits a probe on `split.train` and reports on `split.test`.
pub fn linear_probe(
    task: &str,
    features: &Tensor,
    labels: &[usize],
    groups: &[usize],
    split: &Split,
    seed: u64,
) -> Result<ProbeReport> {
    if labels.len() != features.rows() || groups.len() != labels.len() {
        return Err(C2eError::dim("linear_probe", &[features.rows()], &[labels.len(), groups.len()]));
    }
    if split.test.is_empty() {
        return Err(C2eError::DegenerateSplit("test split is empty".into()));
    }
    split.check_disjoint(groups)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let train_y: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let clf = LinearClassifier::fit(&features.select_rows(&split.train), &train_y, classes, PROBE_STEPS)?;
    let pred = clf.predict(&features.select_rows(&split.test));
    let truth: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
    let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    let per_class_precision = (0..classes)
        .map(|k| {
            let predicted = pred.iter().filter(|&&p| p == k).count();
            let hits = pred.iter().zip(&truth).filter(|(&p, &t)| p == k && t == k).count();
            (predicted > 0).then(|| hits as f64 / predicted as f64)
        })
        .collect();
    Ok(ProbeReport {
        task: task.to_owned(),
        split_hash: split.manifest_hash(),
        accuracy: correct as f64 / truth.len() as f64,
        per_class_precision,
        per_class_count: (0..classes).map(|k| truth.iter().filter(|&&t| t == k).count()).collect(),
        seed,
        checkpoint_hash: None,
        n_train: split.train.len(),
        n_test: split.test.len(),
        groups_disjoint: true,
    })
}

/// Writes `label,feat_0,…` rows.
pub fn export_embeddings(features: &Tensor, labels: &[usize], path: &Path) -> Result<()> {
    let (n, c) = features.dims2()?;
    if n != labels.len() {
        return Err(C2eError::dim("export_embeddings", &[n], &[labels.len()]));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..c).map(|j| format!("feat_{j}")));
    w.write_record(&header)?;
    for (i, label) in labels.iter().enumerate() {
        let mut rec = vec![label.to_string()];
        rec.extend(features.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| C2eError::io(path, e))
}

/// Gini coefficient of non-negative values: `0` for uniform, `(n−1)/n` for one-hot.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let total: f64 = values.iter().sum();
    if values.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Sum over pairs |x_i − x_j| via the sorted-rank identity.
    let weighted: f64 = sorted.iter().enumerate().map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v).sum();
    weighted / (n * total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSaliency {
    pub head: usize,
    pub path: PathBuf,
    /// Mean incoming attention per patch, row-major over the grid.
    pub saliency: Vec<f64>,
    pub gini: f64,
}

/// Per-head saliency of encoder block `layer` (application order) for one
/// image: attention received by each patch token averaged over queries,
/// written as a P5 PGM per head, min-max scaled to 0..255.
pub fn export_attention(model: &C2eModel, image: &Tensor, layer: usize, prefix: &Path) -> Result<Vec<HeadSaliency>> {
    let depth = model.encoder.blocks.len();
    if layer >= depth {
        return Err(C2eError::Config(format!("layer {layer} out of range for depth {depth}")));
    }
    let images = match image.rank() {
        3 => image.reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        _ => image.clone(),
    };
    let pb = model.patchify(&images)?;
    if pb.batch != 1 {
        return Err(C2eError::Shape(format!("export_attention takes one image, got {}", pb.batch)));
    }
    let n = pb.num_patches();
    let (gh, gw) = pb.grid();
    let mut g = Graph::frozen(&model.params);
    let enc = model.encoder.encode(&mut g, &pb, &[MaskPlan::all_visible(n)])?;
    let (probs, _, heads) = g
        .tape
        .attention_probs(enc.attention[layer])
        .ok_or_else(|| C2eError::Evaluation("attention node missing".into()))?;
    let t = enc.tokens_per_image;
    let first = usize::from(enc.has_cls);
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let block = &probs[h * t * t..(h + 1) * t * t];
        let saliency: Vec<f64> = (first..t)
            .map(|key| (0..t).map(|q| block[q * t + key]).sum::<f64>() / t as f64)
            .collect();
        let (lo, hi) = saliency
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let pixels: Vec<u8> = saliency
            .iter()
            .map(|&v| {
                if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        let path = PathBuf::from(format!("{}_head{h}.pgm", prefix.display()));
        write_pgm(&path, gw, gh, &pixels)?;
        out.push(HeadSaliency {
            head: h,
            gini: gini(&saliency),
            path,
            saliency,
        });
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| C2eError::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n")
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| C2eError::io(path, e))
}

/// Parses a binary PGM into `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| C2eError::io(path, e))?;
    let bad = || C2eError::Format(format!("{}: not a binary PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_owned());
    }
    if fields[0] != "P5" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}
