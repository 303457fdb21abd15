use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::gmm::{build_gmm_spec, sample_dirichlet, sample_mixture, GmmSpec};
use super::{ColKind, Dataset, PriorConfig, PriorKind, PriorSpec, Provenance, TaskConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const POWER_ITERS: usize = 20;

/// One residual block `x + W2·elu(W1·x + b1) + b2` with hidden width equal to the input width.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    /// `h × d`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `d × h`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub dim: usize,
    pub hidden: usize,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(w: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += w[r * cols + c] * y[r];
        }
    }
    out
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest singular value of a `rows × cols` matrix by power iteration on `WᵀW`.
pub fn spectral_norm(w: &[f64], rows: usize, cols: usize, iters: usize, rng: &mut impl Rng) -> f64 {
    let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let mut u = matvec(w, rows, cols, &v);
        sigma = normalize(&mut u);
        v = matvec_t(w, rows, cols, &u);
        normalize(&mut v);
    }
    sigma.max(normalize(&mut matvec(w, rows, cols, &v)))
}

impl ResBlock {
    /// Residual branch `g(x)`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = matvec(&self.w1, self.hidden, self.dim, x)
            .into_iter()
            .zip(&self.b1)
            .map(|(v, b)| elu(v + b))
            .collect();
        matvec(&self.w2, self.dim, self.hidden, &h)
            .into_iter()
            .zip(&self.b2)
            .map(|(v, b)| v + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.residual(x)).map(|(a, g)| a + g).collect()
    }
}

/// Invertible residual warp; an empty block list is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IResNet {
    pub blocks: Vec<ResBlock>,
    pub lipschitz: f64,
    pub n_blocks: usize,
}

impl IResNet {
    pub fn is_identity(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        self.blocks.iter().fold(x.to_vec(), |acc, b| b.forward(&acc))
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let data = (0..x.rows()).flat_map(|r| self.apply_row(x.row(r))).collect();
        Tensor::new(vec![x.rows(), d], data).expect("shape preserved")
    }
}

/// Gaussian matrix rescaled to the given (estimated) spectral norm.
fn scaled_gaussian(rows: usize, cols: usize, norm: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    let s = spectral_norm(&w, rows, cols, POWER_ITERS, rng);
    if s > 0.0 {
        w.iter_mut().for_each(|v| *v *= norm / s);
    }
    w
}

/// Samples a warp: identity with probability 1/2, otherwise `b = 3 + round(b̃)` blocks
/// whose residual branches are each scaled to Lipschitz constant at most `c ~ U(0.1, 0.9)`.
pub fn build_iresnet(d: usize, rng: &mut impl Rng) -> IResNet {
    let lipschitz = rng.random_range(0.1..=0.9);
    if rng.random_bool(0.5) {
        return IResNet {
            blocks: vec![],
            lipschitz,
            n_blocks: 0,
        };
    }
    let mu = rng.random_range(3f64.ln()..=8f64.ln()).exp();
    let sigma = rng.random_range(0.01f64.ln()..=1f64.ln()).exp();
    let normal = Normal::new(mu, sigma).expect("finite parameters");
    let b_tilde = loop {
        let v: f64 = normal.sample(rng);
        if v >= 0.0 {
            break v;
        }
    };
    let n_blocks = 3 + b_tilde.round() as usize;
    let hidden = d;
    let target = lipschitz.sqrt();
    let blocks = (0..n_blocks)
        .map(|_| {
            let w1 = scaled_gaussian(hidden, d, target, rng);
            let w2 = scaled_gaussian(d, hidden, target, rng);
            ResBlock {
                w1,
                b1: (0..hidden).map(|_| rng.sample(StandardNormal)).collect(),
                w2,
                b2: vec![0.0; d],
                dim: d,
                hidden,
            }
        })
        .collect();
    IResNet {
        blocks,
        lipschitz,
        n_blocks,
    }
}

/// Generative parameters of a mixed-type task.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeusSpec {
    pub d_cont: usize,
    pub d_cat: usize,
    pub base_gmm: GmmSpec,
    pub warp: IResNet,
    pub cat_cardinalities: Vec<usize>,
    /// `cat_tables[j][k]` is the category distribution of feature `j` in cluster `k`.
    pub cat_tables: Vec<Vec<Vec<f64>>>,
    pub cat_beta: f64,
}

/// Draws a mixed-type task: warped Gaussian-mixture continuous columns followed by
/// label-encoded categorical columns whose distributions depend on the cluster.
pub fn generate_zeus_dataset(cfg: &TaskConfig, prior: &PriorConfig, rng: &mut impl Rng) -> Result<Dataset> {
    if cfg.prior_kind != PriorKind::Zeus {
        return Err(Error::InvalidArgument("generate_zeus_dataset called for a non-ZEUS task".into()));
    }
    cfg.validate()?;
    let k = cfg.k_true;
    let d_cont = rng.random_range(2..=cfg.d);
    let d_cat = cfg.d - d_cont;
    let base_gmm = build_gmm_spec(d_cont, k, prior, rng)?;
    let warp = build_iresnet(d_cont, rng);
    let cat_cardinalities: Vec<usize> = (0..d_cat).map(|_| rng.random_range(2..=prior.max_categories)).collect();
    let cat_tables: Vec<Vec<Vec<f64>>> = cat_cardinalities
        .iter()
        .map(|&c| (0..k).map(|_| sample_dirichlet(prior.cat_beta, c, rng)).collect())
        .collect();

    let (cont, labels) = sample_mixture(&base_gmm, cfg.n, rng)?;
    let cont = warp.apply(&cont);
    let mut data = Vec::with_capacity(cfg.n * cfg.d);
    for (r, &z) in labels.iter().enumerate() {
        data.extend_from_slice(cont.row(r));
        for table in &cat_tables {
            let row = &table[z];
            let u: f64 = rng.random::<f64>() * row.iter().sum::<f64>();
            let mut acc = 0.0;
            let mut cat = row.len() - 1;
            for (c, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    cat = c;
                    break;
                }
            }
            data.push(cat as f64);
        }
    }
    let mut col_kind = vec![ColKind::Numeric; d_cont];
    col_kind.extend(std::iter::repeat_n(ColKind::Categorical, d_cat));
    let spec = ZeusSpec {
        d_cont,
        d_cat,
        base_gmm,
        warp,
        cat_cardinalities,
        cat_tables,
        cat_beta: prior.cat_beta,
    };
    Ok(Dataset {
        x: Tensor::new(vec![cfg.n, cfg.d], data)?,
        col_kind,
        labels: Some(labels),
        k_true: k,
        provenance: Provenance {
            config: Some(cfg.clone()),
            notes: vec![
                format!("categorical Dirichlet concentration {}", spec.cat_beta),
                "overlap targeted by Monte-Carlo mean-scale search".into(),
            ],
            spec: Some(PriorSpec::Zeus(spec)),
        },
    })
}
