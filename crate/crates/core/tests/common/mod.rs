#![allow(dead_code)]

use c2e::decoder::{langevin_step, reconstruction_loss, ConstantEnergy, Energy};
use c2e::nn::{Graph, ParamStore};
use c2e::patch::{normalize_patches, patchify};
use c2e::*;

pub fn tiny_cfg() -> C2eConfig {
    C2eConfig {
        image_size: 16,
        patch_size: 8,
        depth: 2,
        width: 16,
        reduction: 4,
        heads: 2,
        temperature_dim: 4,
        batch_size: 4,
        ..Default::default()
    }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// `Σ w ⊙ out` with fixed pseudo-random weights, so no output direction is
/// summed away (softmax rows and layer norm sum to constants).
pub fn weighted(t: &mut Tape, out: Var) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let w = t.constant(uniform(&shape, 991, 0.5, 1.5));
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub input: Tensor,
    pub f: OpFn,
}

impl OpCase {
    /// A fresh input of the same shape inside the op's domain.
    pub fn resample(&self, seed: u64) -> Tensor {
        let shape = self.input.shape();
        match self.name {
            "logdet" | "logdet_jitter" => spd(shape[0], seed),
            "ln" | "recip" => uniform(shape, seed, 0.5, 2.0),
            "abs" => uniform(shape, seed, 0.2, 1.0).zip_map(&randn(shape, seed + 1), |u, s| u.copysign(s)).unwrap(),
            _ => randn(shape, seed),
        }
    }
}

fn case(name: &'static str, input: Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        input,
        f: Box::new(move |t, x| {
            let out = f(t, x)?;
            weighted(t, out)
        }),
    }
}

fn spd(n: usize, seed: u64) -> Tensor {
    let a = randn(&[n, n], seed);
    a.matmul(&a.transpose().unwrap()).unwrap().add(&Tensor::eye(n)).unwrap()
}

/// Every differentiable tape operation, each with the leaf in every operand
/// position it can take.
pub fn op_cases() -> Vec<OpCase> {
    let m34 = || randn(&[3, 4], 1);
    let c = |shape: &[usize], seed| randn(shape, seed);
    vec![
        case("matmul_lhs", m34(), move |t, x| {
            let b = t.constant(c(&[4, 2], 2));
            t.matmul(x, b)
        }),
        case("matmul_rhs", c(&[4, 2], 2), move |t, x| {
            let a = t.constant(c(&[3, 4], 1));
            t.matmul(a, x)
        }),
        case("matmul_self", randn(&[3, 3], 3), |t, x| t.matmul(x, x)),
        case("add", m34(), move |t, x| {
            let b = t.constant(c(&[3, 4], 4));
            t.add(b, x)
        }),
        case("sub_lhs", m34(), move |t, x| {
            let b = t.constant(c(&[3, 4], 4));
            t.sub(x, b)
        }),
        case("sub_rhs", m34(), move |t, x| {
            let b = t.constant(c(&[3, 4], 4));
            t.sub(b, x)
        }),
        case("mul", m34(), move |t, x| {
            let b = t.constant(c(&[3, 4], 5));
            t.mul(x, b)
        }),
        case("mul_self", m34(), |t, x| t.mul(x, x)),
        case("add_row_matrix", m34(), move |t, x| {
            let r = t.constant(c(&[4], 6));
            t.add_row(x, r)
        }),
        case("add_row_vector", c(&[4], 6), move |t, x| {
            let a = t.constant(c(&[3, 4], 1));
            t.add_row(a, x)
        }),
        case("mul_row_matrix", m34(), move |t, x| {
            let r = t.constant(c(&[4], 6));
            t.mul_row(x, r)
        }),
        case("mul_row_vector", c(&[4], 6), move |t, x| {
            let a = t.constant(c(&[3, 4], 1));
            t.mul_row(a, x)
        }),
        case("mul_col_matrix", m34(), move |t, x| {
            let k = t.constant(c(&[3, 1], 7));
            t.mul_col(x, k)
        }),
        case("mul_col_vector", c(&[3, 1], 7), move |t, x| {
            let a = t.constant(c(&[3, 4], 1));
            t.mul_col(a, x)
        }),
        case("mul_scalar_matrix", m34(), |t, x| {
            let s = t.constant(Tensor::scalar(0.7));
            t.mul_scalar(x, s)
        }),
        case("mul_scalar_scalar", Tensor::scalar(0.7), move |t, x| {
            let a = t.constant(c(&[3, 4], 1));
            t.mul_scalar(a, x)
        }),
        case("scale", m34(), |t, x| Ok(t.scale(x, -1.7))),
        case("add_scalar", m34(), |t, x| Ok(t.add_scalar(x, 2.5))),
        case("transpose", m34(), |t, x| t.transpose(x)),
        case("reshape", m34(), |t, x| t.reshape(x, &[2, 6])),
        case("tanh", m34(), |t, x| Ok(t.tanh(x))),
        case("softplus", m34(), |t, x| Ok(t.softplus(x))),
        case("gelu", m34(), |t, x| Ok(t.gelu(x))),
        case("exp", m34(), |t, x| Ok(t.exp(x))),
        case("ln", uniform(&[3, 4], 8, 0.5, 2.0), |t, x| Ok(t.ln(x))),
        case("square", m34(), |t, x| Ok(t.square(x))),
        case("abs", uniform(&[3, 4], 9, 0.2, 1.0).zip_map(&m34(), |u, s| u.copysign(s)).unwrap(), |t, x| Ok(t.abs(x))),
        case("recip", uniform(&[3, 4], 10, 0.5, 2.0), |t, x| Ok(t.recip(x))),
        case("sum", m34(), |t, x| Ok(t.sum(x))),
        case("mean", m34(), |t, x| Ok(t.mean(x))),
        case("mean_rows", m34(), |t, x| t.mean_rows(x)),
        case("sum_cols", m34(), |t, x| t.sum_cols(x)),
        case("group_mean_rows", randn(&[6, 2], 11), |t, x| t.group_mean_rows(x, 3)),
        case("gather_rows", m34(), |t, x| t.gather_rows(x, &[2, 0, 2, 1])),
        case("slice_cols", m34(), |t, x| t.slice_cols(x, 1, 3)),
        case("concat_rows", m34(), move |t, x| {
            let b = t.constant(c(&[2, 4], 12));
            t.concat_rows(&[b, x, x])
        }),
        case("concat_cols", m34(), move |t, x| {
            let b = t.constant(c(&[3, 2], 13));
            t.concat_cols(&[x, b])
        }),
        case("softmax_rows", m34(), |t, x| t.softmax_rows(x)),
        case("layer_norm", m34(), |t, x| t.layer_norm(x, 1e-6)),
        case("attention_q", randn(&[6, 4], 14), move |t, x| {
            let (k, v) = (t.constant(c(&[6, 4], 15)), t.constant(c(&[6, 4], 16)));
            t.attention(x, k, v, 2, 2)
        }),
        case("attention_k", randn(&[6, 4], 15), move |t, x| {
            let (q, v) = (t.constant(c(&[6, 4], 14)), t.constant(c(&[6, 4], 16)));
            t.attention(q, x, v, 2, 2)
        }),
        case("attention_v", randn(&[6, 4], 16), move |t, x| {
            let (q, k) = (t.constant(c(&[6, 4], 14)), t.constant(c(&[6, 4], 15)));
            t.attention(q, k, x, 2, 2)
        }),
        case("attention_shared", randn(&[6, 4], 17), |t, x| t.attention(x, x, x, 3, 1)),
        case("logdet", spd(4, 18), |t, x| t.logdet(x, 0.0)),
        case("logdet_jitter", spd(3, 19), |t, x| t.logdet(x, 0.1)),
    ]
}

/// Determinant by Laplace expansion along the first row.
pub fn cofactor_det(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n == 1 {
        return m[0][0];
    }
    (0..n)
        .map(|j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * m[0][j] * cofactor_det(&minor(m, 0, j))
        })
        .sum()
}

pub fn minor(m: &[Vec<f64>], row: usize, col: usize) -> Vec<Vec<f64>> {
    m.iter()
        .enumerate()
        .filter(|(r, _)| *r != row)
        .map(|(_, v)| v.iter().enumerate().filter(|(c, _)| *c != col).map(|(_, x)| *x).collect())
        .collect()
}

/// `∂ ln|M| / ∂M_ij = C_ij / |M|` from the cofactor matrix.
pub fn cofactor_logdet_grad(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let det = cofactor_det(m);
    let n = m.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    sign * cofactor_det(&minor(m, i, j)) / det
                })
                .collect()
        })
        .collect()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Squared-error reconstruction loss of the full model as a function of one
/// leaf that stands in either for the standardized input tokens or for one
/// parameter. One image, every patch visible, no Langevin noise.
pub struct EndToEnd {
    pub model: C2eModel,
    pub tokens: Tensor,
    pub target: Tensor,
}

impl EndToEnd {
    pub fn new(arch: Arch) -> Self {
        let cfg = C2eConfig {
            loss: LossKind::L2,
            arch,
            ..tiny_cfg()
        };
        let model = C2eModel::new(&cfg).unwrap();
        let image = uniform(&[1, 16, 16, 3], 21, 0.0, 1.0);
        let pb = patchify(&image, 8).unwrap();
        let tokens = pb.flat().map(|v| (v - 0.5) / 0.25);
        EndToEnd {
            target: normalize_patches(&pb.flat()),
            model,
            tokens,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    fn loss(&self, tape: &mut Tape, tokens: Option<Var>, bind: Option<(usize, Var)>) -> Result<Var> {
        let mut g = Graph::on_tape(std::mem::take(tape), &self.model.params);
        if let Some((i, v)) = bind {
            let id = self.model.params.id(&self.model.params.iter().nth(i).unwrap().name).unwrap();
            g.bind(id, v);
        }
        let n = self.tokens.rows();
        let tokens = match tokens {
            Some(v) => v,
            None => g.constant(self.tokens.clone()),
        };
        let plans = [MaskPlan::all_visible(n)];
        let enc = self.model.encoder.encode_tokens(&mut g, tokens, &(0..n).collect::<Vec<_>>(), 1)?;
        let dec = self.model.decoder.decode(&mut g, &enc, &plans, None)?;
        let loss = reconstruction_loss(&mut g, dec.pred, &self.target, &plans, LossKind::L2)?;
        *tape = g.into_tape();
        Ok(loss)
    }

    /// `(name, grad_check error)` for the input tokens and every parameter.
    /// Central differences at `eps = 1e-5` lose several digits to roundoff on
    /// the smallest parameter gradients (around 1e-9), so callers use 1e-4.
    pub fn errors(&self, eps: f64) -> Vec<(String, f64)> {
        let mut out = vec![(
            "input_tokens".to_string(),
            grad_check(|t, x| self.loss(t, Some(x), None), &self.tokens, eps).unwrap(),
        )];
        for (i, p) in self.model.params.iter().enumerate() {
            let err = grad_check(|t, x| self.loss(t, None, Some((i, x))), &p.tensor, eps).unwrap();
            out.push((p.name.clone(), err));
        }
        out
    }
}

/// Max |∂kT/∂z0| over the channels at and beyond the conditional cut, and the
/// same over the channels before it.
pub fn temperature_channel_grads(ratio: f64) -> (usize, f64, f64) {
    let cfg = C2eConfig {
        conditional_ratio: ratio,
        ..C2eConfig::default()
    };
    let model = C2eModel::new(&cfg).unwrap();
    let c0 = cfg.schedule().unwrap().latent();
    let cut = (ratio * c0 as f64).ceil() as usize;
    let mut g = Graph::new(&model.params);
    let z0 = g.tape.leaf(randn(&[3 * 4, c0], 31));
    let (_, kt) = model.decoder.temperature.forward(&mut g, z0, 4).unwrap();
    let grad = g.tape.backward(kt).get(z0).unwrap();
    let (mut before, mut after) = (0f64, 0f64);
    for r in 0..grad.rows() {
        for (c, v) in grad.row(r).iter().enumerate() {
            if c < cut {
                before = before.max(v.abs());
            } else {
                after = after.max(v.abs());
            }
        }
    }
    (cut, before, after)
}

pub fn langevin_once(energy: &dyn Energy, z: Tensor, kt: f64, eps: f64, noise: Option<&mut Rng>) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let rows = z.rows();
    let zv = g.constant(z);
    let inv = g.constant(Tensor::full(&[rows, 1], 1.0 / kt));
    let out = langevin_step(&mut g, zv, inv, energy, eps, noise, 0)?;
    Ok(g.value(out).clone())
}

/// `(mean, variance)` of the noise added by one step over `n` scalars.
pub fn added_noise_moments(n: usize, eps: f64, seed: u64) -> (f64, f64) {
    let z = Tensor::zeros(&[n / 10, 10]);
    let out = langevin_once(&ConstantEnergy(1.0), z, 0.7, eps, Some(&mut Rng::new(seed))).unwrap();
    let mean = out.sum() / n as f64;
    let var = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}
