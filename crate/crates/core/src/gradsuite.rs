//! Finite-difference audit of every differentiable component, from single operators up
//! to the full partition network with its training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, finite_difference_check, Graph, Tensor, Var};
use crate::cin::fingerprint_var;
use crate::error::Result;
use crate::metrics::{matching_ce_loss, matching_softacc_loss, soft_ari, soft_nmi, SoftPartitionVar, SINKHORN_TEMPERATURE};
use crate::nn::{Bound, Mab, ParamId, ParamStore};
use crate::pin::{DecoderKind, PinHyper, PinModel};
use crate::prior::ColKind;
use crate::train::{cin_ce_loss, cin_ordinal_loss};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Looser bound for graphs that pass through Sinkhorn iterations.
pub const FD_TOL_SINKHORN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    /// Analytic and numeric derivative at the worst entry.
    pub worst: (f64, f64),
    pub tol: f64,
    pub pass: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Random linear read-out so every output entry contributes a distinct weight.
fn readout<'g>(g: &'g Graph, y: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(g.constant(w))?.sum())
}

struct Suite {
    out: Vec<CheckOutcome>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, tol: f64, f: F, x: &Tensor) -> Result<()>
    where
        F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
    {
        let r = finite_difference_check(f, x, FD_STEP, tol)?;
        self.out.push(CheckOutcome {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            worst: (r.analytic, r.numeric),
            tol,
            pass: r.pass,
        });
        Ok(())
    }
}

fn ops(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let shape = [2, 3, 4];
    let x = uniform(rng, &shape, -1.5, 1.5);
    let other = uniform(rng, &shape, -1.5, 1.5);
    let bias = uniform(rng, &[4], -1.0, 1.0);
    let positive = uniform(rng, &shape, 0.5, 2.0);
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let w = uniform(rng, &[4, 5], -1.0, 1.0);
    let wb = uniform(rng, &[2, 4, 5], -1.0, 1.0);
    let mask: Vec<bool> = (0..24).map(|i| i % 5 == 0).collect();
    let k = 7;
    s.check("op/add", FD_TOL, |g, x| readout(g, x.add(g.constant(bias.clone()))?, k), &x)?;
    s.check("op/add(broadcast rhs)", FD_TOL, |g, b| readout(g, g.constant(x.clone()).add(b)?, k), &bias)?;
    s.check("op/sub", FD_TOL, |g, x| readout(g, g.constant(other.clone()).sub(x)?, k), &x)?;
    s.check("op/mul", FD_TOL, |g, x| readout(g, x.mul(g.constant(other.clone()))?, k), &x)?;
    s.check("op/div(numerator)", FD_TOL, |g, x| readout(g, x.div(g.constant(positive.clone()))?, k), &x)?;
    s.check("op/div(denominator)", FD_TOL, |g, p| readout(g, g.constant(x.clone()).div(p)?, k), &positive)?;
    s.check("op/scale", FD_TOL, |g, x| readout(g, x.scale(-1.7).add_scalar(0.3), k), &x)?;
    s.check("op/transpose", FD_TOL, |g, x| readout(g, x.transpose()?, k), &x)?;
    s.check("op/reshape", FD_TOL, |g, x| readout(g, x.reshape(&[6, 4])?, k), &x)?;
    s.check("op/narrow", FD_TOL, |g, x| readout(g, x.narrow(2, 1, 2)?, k), &x)?;
    s.check("op/concat", FD_TOL, |g, x| readout(g, concat(&[x, g.constant(other.clone()), x], 1)?, k), &x)?;
    s.check("op/sum", FD_TOL, |_, x| Ok(x.mul(x)?.sum()), &x)?;
    s.check("op/mean", FD_TOL, |_, x| Ok(x.mul(x)?.mean()), &x)?;
    s.check("op/sum_axis", FD_TOL, |g, x| readout(g, x.sum_axis(1)?, k), &x)?;
    s.check("op/mean_axis", FD_TOL, |g, x| readout(g, x.mean_axis(0)?, k), &x)?;
    s.check("op/matmul(lhs)", FD_TOL, |g, x| readout(g, x.matmul(g.constant(w.clone()))?, k), &x)?;
    s.check("op/matmul(shared rhs)", FD_TOL, |g, w| readout(g, g.constant(x.clone()).matmul(w)?, k), &w)?;
    s.check("op/matmul(batched rhs)", FD_TOL, |g, w| readout(g, g.constant(x.clone()).matmul(w)?, k), &wb)?;
    s.check("op/softmax", FD_TOL, |g, x| readout(g, x.softmax(), k), &x)?;
    s.check("op/log_softmax", FD_TOL, |g, x| readout(g, x.log_softmax(), k), &x)?;
    s.check("op/logsumexp", FD_TOL, |g, x| readout(g, x.logsumexp(), k), &x)?;
    s.check("op/layer_norm", FD_TOL, |g, x| readout(g, x.layer_norm(1e-5), k), &x)?;
    s.check("op/l2_normalize", FD_TOL, |g, x| readout(g, x.l2_normalize(), k), &x)?;
    s.check("op/gelu", FD_TOL, |g, x| readout(g, x.gelu(), k), &x)?;
    s.check("op/relu", FD_TOL, |g, x| readout(g, x.relu(), k), &away)?;
    s.check("op/softplus", FD_TOL, |g, x| readout(g, x.softplus(), k), &x)?;
    s.check("op/exp", FD_TOL, |g, x| readout(g, x.exp(), k), &x)?;
    s.check("op/log", FD_TOL, |g, p| readout(g, p.log(), k), &positive)?;
    s.check("op/sin", FD_TOL, |g, x| readout(g, x.sin(), k), &x)?;
    s.check("op/masked_fill", FD_TOL, |g, x| readout(g, x.masked_fill(mask.clone(), -2.0)?, k), &x)
}

fn losses(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, k) = (9, 3);
    let logits = uniform(rng, &[n, k], -2.0, 2.0);
    let z: Vec<usize> = (0..n).map(|i| (i * 2 + i / 4) % k).collect();
    s.check("loss/soft_ari", FD_TOL, |_, l| soft_ari(l.softmax(), &z), &logits)?;
    s.check("loss/soft_nmi", FD_TOL, |_, l| soft_nmi(l.softmax(), &z), &logits)?;
    s.check("loss/matching_ce", FD_TOL, |_, l| matching_ce_loss(SoftPartitionVar::from_logits(l), &z), &logits)?;
    s.check(
        "loss/matching_softacc",
        FD_TOL_SINKHORN,
        |_, l| matching_softacc_loss(l.softmax(), &z, SINKHORN_TEMPERATURE),
        &logits,
    )?;
    let cin_logits = uniform(rng, &[1, 5], -1.0, 1.0);
    s.check("loss/cin_ce", FD_TOL, |_, l| cin_ce_loss(l, 4), &cin_logits)?;
    s.check("loss/cin_ordinal", FD_TOL, |_, l| cin_ordinal_loss(l, 4), &cin_logits)?;
    s.check("fingerprint", FD_TOL, |g, l| readout(g, fingerprint_var(l.softmax())?, 11), &logits)
}

/// Adds uniform noise to every non-scalar parameter so random models leave the
/// near-identity regime of the default initialisation.
fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in store.values_mut() {
        if v.numel() > 1 {
            v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
    }
}

/// Binds `store` on `g`, replacing parameter `id` by `v` when given.
fn bind_with<'g>(store: &ParamStore, g: &'g Graph, swap: Option<(ParamId, Var<'g>)>) -> Bound<'g> {
    let mut vars = store.bind(g, false).vars().to_vec();
    if let Some((id, v)) = swap {
        vars[id.index()] = v;
    }
    Bound::from_vars(vars)
}

fn mab(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let block = Mab::new(&mut store, "mab", 8, 2, 2, rng);
    perturb(&mut store, 5);
    let x = uniform(rng, &[3, 8], -1.0, 1.0);
    let y = uniform(rng, &[4, 8], -1.0, 1.0);
    let st = &store;
    s.check(
        "mab_pre/query input",
        FD_TOL,
        |g, x| readout(g, block.forward(&st.bind(g, false), x, g.constant(y.clone()))?, 13),
        &x,
    )?;
    s.check(
        "mab_pre/key-value input",
        FD_TOL,
        |g, y| readout(g, block.forward(&st.bind(g, false), g.constant(x.clone()), y)?, 13),
        &y,
    )?;
    for name in ["mab.q.w", "mab.k.w", "mab.o.w", "mab.ffn.0.w", "mab.ln_attn.gamma"] {
        let Some(id) = store.find(name) else { continue };
        s.check(
            &format!("mab_pre/{name}"),
            FD_TOL,
            |g, w| {
                let p = bind_with(st, g, Some((id, w)));
                readout(g, block.forward(&p, g.constant(x.clone()), g.constant(y.clone()))?, 13)
            },
            store.get(id),
        )?;
    }
    Ok(())
}

fn pin_end_to_end(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, d, k) = (8, 3, 3);
    let x = uniform(rng, &[n, d], -1.5, 1.5);
    let kinds = vec![ColKind::Numeric; d];
    let z: Vec<usize> = (0..n).map(|i| i % k).collect();
    for decoder in [DecoderKind::Iterative, DecoderKind::Naive, DecoderKind::NonIterative] {
        let hyper = PinHyper {
            d: 16,
            d_tok: 8,
            l_enc: 1,
            l_dec: 1,
            heads: 2,
            k_max: k,
            ffn_mult: 2,
            temperature_init: 3.0,
            decoder,
        };
        let mut m = PinModel::new(hyper, 17)?;
        perturb(&mut m.store, 18);
        let names: Vec<String> = m
            .store
            .names()
            .iter()
            .filter(|n| decoder != DecoderKind::Naive || !(n.as_str() == "prototypes" || n.starts_with("head.")))
            .filter(|n| {
                n.as_str() == "prototypes"
                    || n.starts_with("enc.cell.0.")
                    || n.starts_with("enc.mix0.column.w")
                    || n.as_str() == "enc.pool_seed"
                    || n.ends_with("rows_from_proto.q.w")
                    || n.ends_with("proto_from_rows.v.w")
                    || n.starts_with("naive.head.0.w")
                    || n.starts_with("head.g.0.w")
                    || n.as_str() == "head.log_tau"
            })
            .cloned()
            .collect();
        let model = &m;
        for name in names {
            let id = model.store.find(&name).expect("listed parameter");
            s.check(
                &format!("pin[{decoder:?}]+soft_ari/{name}"),
                FD_TOL,
                |g, v| {
                    let p = bind_with(&model.store, g, Some((id, v)));
                    let part = model.forward(&p, &x, &kinds, k)?;
                    soft_ari(part.probs, &z)
                },
                model.store.get(id),
            )?;
        }
    }
    Ok(())
}

/// Runs every check; the report lists each one with its worst relative error.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite { out: Vec::new() };
    ops(&mut s, &mut rng)?;
    losses(&mut s, &mut rng)?;
    mab(&mut s, &mut rng)?;
    pin_end_to_end(&mut s, &mut rng)?;
    Ok(s.out)
}
