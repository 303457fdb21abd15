//! Partition inference network: maps a dataset and a cluster count `K` to a soft partition.
//!
//! A two-stage encoder (cell embedding mixed with column and row context, attention
//! pooling over features, self-attention over rows) produces row representations. The default
//! decoder alternately refines the first `K` learnable prototypes and the rows with
//! cross-attention, then scores rows against prototypes by scaled cosine similarity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{SoftPartition, SoftPartitionVar};
use crate::nn::{Bound, Init, LayerNorm, Linear, Mab, Mlp, ParamId, ParamStore, ATTN_INIT_STD};
use crate::prior::{ColKind, Dataset};

/// Column/row mixing rounds applied to cell tokens before feature pooling.
const CELL_MIX_LAYERS: usize = 2;

/// Logit given to prototype columns beyond `K` in the naive decoder.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Prototype/row co-refinement (the default).
    Iterative,
    /// Row self-attention followed by a pointwise classifier over `K_max` masked logits.
    Naive,
    /// Rows are encoded once; only prototypes are refined against them.
    NonIterative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PinHyper {
    pub d: usize,
    pub d_tok: usize,
    pub l_enc: usize,
    pub l_dec: usize,
    pub heads: usize,
    pub k_max: usize,
    pub ffn_mult: usize,
    pub temperature_init: f64,
    pub decoder: DecoderKind,
}

impl Default for PinHyper {
    fn default() -> Self {
        Self::desk()
    }
}

impl PinHyper {
    pub fn desk() -> Self {
        PinHyper {
            d: 64,
            d_tok: 16,
            l_enc: 2,
            l_dec: 3,
            heads: 4,
            k_max: 10,
            ffn_mult: 2,
            temperature_init: 10.0,
            decoder: DecoderKind::Iterative,
        }
    }

    pub fn paper() -> Self {
        PinHyper {
            d: 512,
            d_tok: 32,
            l_enc: 3,
            l_dec: 6,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.d_tok == 0 || self.d == 0 || self.ffn_mult == 0 {
            return bad("widths must be positive".into());
        }
        if self.l_dec == 0 {
            return bad("l_dec must be at least 1".into());
        }
        if self.k_max < 2 {
            return bad(format!("k_max = {} must be at least 2", self.k_max));
        }
        if !(self.temperature_init > 0.0) {
            return bad("temperature_init must be positive".into());
        }
        Ok(())
    }

    fn token_heads(&self) -> usize {
        if self.d_tok % self.heads == 0 {
            self.heads
        } else {
            1
        }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    cell: Mlp,
    mixers: Vec<CellMixer>,
    pool_seed: ParamId,
    pool: Mab,
    pool_norm: LayerNorm,
    to_model: Linear,
    rows: Vec<Mab>,
}

/// Residual update of every cell token from itself, its column mean and its row mean.
#[derive(Clone, Debug)]
struct CellMixer {
    norm: LayerNorm,
    own: Linear,
    column: Linear,
    row: Linear,
    out: Linear,
}

impl CellMixer {
    fn new(s: &mut ParamStore, name: &str, t: usize, rng: &mut ChaCha8Rng) -> Self {
        CellMixer {
            norm: LayerNorm::new(s, &format!("{name}.norm"), t),
            own: Linear::new(s, &format!("{name}.own"), t, 2 * t, Init::FanIn, rng),
            column: Linear::new(s, &format!("{name}.column"), t, 2 * t, Init::FanIn, rng),
            row: Linear::new(s, &format!("{name}.row"), t, 2 * t, Init::FanIn, rng),
            out: Linear::new(s, &format!("{name}.out"), 2 * t, t, Init::FanIn, rng),
        }
    }

    /// `tok` is `[N, D, t]`.
    fn forward<'g>(&self, p: &Bound<'g>, tok: Var<'g>) -> Result<Var<'g>> {
        let h = self.norm.forward(p, tok)?;
        let col = self.column.forward(p, h.mean_axis(0)?)?;
        let row = self.row.forward(p, h.mean_axis(1)?)?;
        let u = self.own.forward(p, h)?.add(col)?.add(row)?.gelu();
        tok.add(self.out.forward(p, u)?)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    proto_self: Mab,
    proto_from_rows: Mab,
    rows_from_proto: Mab,
}

#[derive(Clone, Debug)]
enum Decoder {
    Iterative {
        layers: Vec<DecoderLayer>,
    },
    Naive {
        rows: Vec<Mab>,
        head: Mlp,
    },
    NonIterative {
        rows: Vec<Mab>,
        proto: Vec<(Mab, Mab)>,
    },
}

/// Final row and prototype representations of the decoder.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState<'g> {
    pub r: Var<'g>,
    pub c: Var<'g>,
    pub layer: usize,
}

#[derive(Clone, Debug)]
pub struct PinModel {
    pub hyper: PinHyper,
    pub store: ParamStore,
    encoder: Encoder,
    prototypes: ParamId,
    decoder: Decoder,
    head_g: Mlp,
    log_tau: ParamId,
}

/// Cell tokens `(value, is_categorical)` of shape `[N, D, 2]`.
fn cell_inputs(x: &Tensor, kinds: &[ColKind]) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    if kinds.len() != d {
        return Err(Error::Shape(format!("{d} columns but {} column kinds", kinds.len())));
    }
    if n == 0 {
        return Err(Error::Shape("dataset has no rows".into()));
    }
    let mut data = Vec::with_capacity(n * d * 2);
    for r in 0..n {
        for (c, kind) in kinds.iter().enumerate() {
            data.push(x.at(r, c));
            data.push(if *kind == ColKind::Categorical { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(vec![n, d, 2], data)
}

impl PinModel {
    pub fn new(hyper: PinHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let (d, t, h) = (hyper.d, hyper.d_tok, hyper.heads);
        let f = hyper.ffn_mult;
        let encoder = Encoder {
            cell: Mlp::new(&mut s, "enc.cell", &[2, t, t], Init::FanIn, rng),
            mixers: (0..CELL_MIX_LAYERS)
                .map(|i| CellMixer::new(&mut s, &format!("enc.mix{i}"), t, rng))
                .collect(),
            pool_seed: s.add_trunc_normal("enc.pool_seed", &[1, t], ATTN_INIT_STD, rng),
            pool: Mab::new(&mut s, "enc.pool", t, hyper.token_heads(), f, rng),
            pool_norm: LayerNorm::new(&mut s, "enc.pool_norm", t),
            to_model: Linear::new(&mut s, "enc.to_model", t, d, Init::FanIn, rng),
            rows: (0..hyper.l_enc)
                .map(|i| Mab::new(&mut s, &format!("enc.row{i}"), d, h, f, rng))
                .collect(),
        };
        let prototypes = s.add_normal("prototypes", &[hyper.k_max, d], 1.0 / (d as f64).sqrt(), rng);
        let l = hyper.l_dec;
        let decoder = match hyper.decoder {
            DecoderKind::Iterative => Decoder::Iterative {
                layers: (0..l)
                    .map(|i| DecoderLayer {
                        proto_self: Mab::new(&mut s, &format!("dec{i}.proto_self"), d, h, f, rng),
                        proto_from_rows: Mab::new(&mut s, &format!("dec{i}.proto_from_rows"), d, h, f, rng),
                        rows_from_proto: Mab::new(&mut s, &format!("dec{i}.rows_from_proto"), d, h, f, rng),
                    })
                    .collect(),
            },
            DecoderKind::Naive => Decoder::Naive {
                rows: (0..2 * l)
                    .map(|i| Mab::new(&mut s, &format!("naive.row{i}"), d, h, f, rng))
                    .collect(),
                head: Mlp::new(&mut s, "naive.head", &[d, 2 * d, hyper.k_max], Init::FanIn, rng),
            },
            DecoderKind::NonIterative => Decoder::NonIterative {
                rows: (0..l)
                    .map(|i| Mab::new(&mut s, &format!("noniter.row{i}"), d, h, f, rng))
                    .collect(),
                proto: (0..l)
                    .map(|i| {
                        (
                            Mab::new(&mut s, &format!("noniter{i}.proto_self"), d, h, f, rng),
                            Mab::new(&mut s, &format!("noniter{i}.proto_from_rows"), d, h, f, rng),
                        )
                    })
                    .collect(),
            },
        };
        let head_g = Mlp::new(&mut s, "head.g", &[d, 2 * d, d], Init::FanIn, rng);
        let log_tau = s.add("head.log_tau", Tensor::scalar(hyper.temperature_init.ln()));
        Ok(PinModel {
            hyper,
            store: s,
            encoder,
            prototypes,
            decoder,
            head_g,
            log_tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).item().exp()
    }

    pub fn prototype_id(&self) -> ParamId {
        self.prototypes
    }

    /// Number of (row-attention, prototype) layers of the active decoder.
    pub fn decoder_layer_counts(&self) -> (usize, usize) {
        match &self.decoder {
            Decoder::Iterative { layers } => (layers.len(), layers.len()),
            Decoder::Naive { rows, .. } => (rows.len(), 0),
            Decoder::NonIterative { rows, proto } => (rows.len(), proto.len()),
        }
    }

    /// Row representations `R⁽⁰⁾` of shape `[N, d]`.
    pub fn encode<'g>(&self, p: &Bound<'g>, x: &Tensor, kinds: &[ColKind]) -> Result<Var<'g>> {
        let g = p.var(self.prototypes).graph();
        let e = &self.encoder;
        let n = x.rows();
        let cells = g.constant(cell_inputs(x, kinds)?);
        let mut tok = e.cell.forward(p, cells)?;
        for mixer in &e.mixers {
            tok = mixer.forward(p, tok)?;
        }
        let t = self.hyper.d_tok;
        let seed = p.var(e.pool_seed).add(g.constant(Tensor::zeros(&[n, 1, t])))?;
        let pooled = e.pool.forward(p, seed, tok)?.reshape(&[n, t])?;
        let mut r = e.to_model.forward(p, e.pool_norm.forward(p, pooled)?)?;
        for block in &e.rows {
            r = block.forward(p, r, r)?;
        }
        Ok(r)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k < 2 || k > self.hyper.k_max {
            return Err(Error::InvalidArgument(format!(
                "k = {k} outside [2, {}]",
                self.hyper.k_max
            )));
        }
        Ok(())
    }

    fn initial_prototypes<'g>(&self, p: &Bound<'g>, k: usize) -> Result<Var<'g>> {
        p.var(self.prototypes).narrow(0, 0, k)
    }

    /// Iterative decoder: per layer `C ← SA(C)`, `C ← CA(C ← R)`, `R ← CA(R ← C)`.
    pub fn decode<'g>(&self, p: &Bound<'g>, r0: Var<'g>, k: usize) -> Result<DecoderState<'g>> {
        self.check_k(k)?;
        let Decoder::Iterative { layers } = &self.decoder else {
            return Err(Error::InvalidArgument("decode needs the iterative decoder".into()));
        };
        let mut c = self.initial_prototypes(p, k)?;
        let mut r = r0;
        for layer in layers {
            c = layer.proto_self.forward(p, c, c)?;
            c = layer.proto_from_rows.forward(p, c, r)?;
            r = layer.rows_from_proto.forward(p, r, c)?;
        }
        Ok(DecoderState {
            r,
            c,
            layer: layers.len(),
        })
    }

    /// Scaled cosine similarity between projected rows and prototypes, softmaxed per row.
    pub fn cosine_head<'g>(&self, p: &Bound<'g>, state: &DecoderState<'g>) -> Result<SoftPartitionVar<'g>> {
        let r = self.head_g.forward(p, state.r)?.l2_normalize();
        let c = self.head_g.forward(p, state.c)?.l2_normalize();
        let tau = p.var(self.log_tau).exp();
        let logits = r.matmul(c.transpose()?)?.mul(tau)?;
        Ok(SoftPartitionVar::from_logits(logits))
    }

    fn naive_forward<'g>(&self, p: &Bound<'g>, rows: &[Mab], head: &Mlp, r0: Var<'g>, k: usize) -> Result<SoftPartitionVar<'g>> {
        let mut r = r0;
        for block in rows {
            r = block.forward(p, r, r)?;
        }
        let logits = head.forward(p, r)?;
        let n = r0.shape()[0];
        let k_max = self.hyper.k_max;
        let mask: Vec<bool> = (0..n * k_max).map(|i| i % k_max >= k).collect();
        let probs = logits.masked_fill(mask.clone(), MASK_LOGIT)?.softmax();
        // masked columns carry exactly zero probability, so keeping the first k loses nothing
        Ok(SoftPartitionVar {
            logits: logits.masked_fill(mask, MASK_LOGIT)?.narrow(1, 0, k)?,
            probs: probs.narrow(1, 0, k)?,
        })
    }

    /// Full `K_max`-column naive-decoder probabilities including the masked columns.
    pub fn naive_full_probs<'g>(&self, p: &Bound<'g>, r0: Var<'g>, k: usize) -> Result<Var<'g>> {
        self.check_k(k)?;
        let Decoder::Naive { rows, head } = &self.decoder else {
            return Err(Error::InvalidArgument("not a naive decoder".into()));
        };
        let mut r = r0;
        for block in rows {
            r = block.forward(p, r, r)?;
        }
        let k_max = self.hyper.k_max;
        let n = r0.shape()[0];
        let mask: Vec<bool> = (0..n * k_max).map(|i| i % k_max >= k).collect();
        Ok(head.forward(p, r)?.masked_fill(mask, MASK_LOGIT)?.softmax())
    }

    fn noniter_forward<'g>(
        &self,
        p: &Bound<'g>,
        rows: &[Mab],
        proto: &[(Mab, Mab)],
        r0: Var<'g>,
        k: usize,
    ) -> Result<SoftPartitionVar<'g>> {
        let mut r = r0;
        for block in rows {
            r = block.forward(p, r, r)?;
        }
        let mut c = self.initial_prototypes(p, k)?;
        for (sa, ca) in proto {
            c = sa.forward(p, c, c)?;
            c = ca.forward(p, c, r)?;
        }
        self.cosine_head(p, &DecoderState { r, c, layer: proto.len() })
    }

    /// Soft partition into `k` clusters from encoded rows, using the configured decoder.
    pub fn partition<'g>(&self, p: &Bound<'g>, r0: Var<'g>, k: usize) -> Result<SoftPartitionVar<'g>> {
        self.check_k(k)?;
        match &self.decoder {
            Decoder::Iterative { .. } => {
                let state = self.decode(p, r0, k)?;
                self.cosine_head(p, &state)
            }
            Decoder::Naive { rows, head } => self.naive_forward(p, rows, head, r0, k),
            Decoder::NonIterative { rows, proto } => self.noniter_forward(p, rows, proto, r0, k),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: &Tensor, kinds: &[ColKind], k: usize) -> Result<SoftPartitionVar<'g>> {
        let r0 = self.encode(p, x, kinds)?;
        self.partition(p, r0, k)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, ds: &Dataset, k: usize) -> Result<SoftPartition> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        Ok(self.forward(&p, &ds.x, &ds.col_kind, k)?.value())
    }

    /// Soft partitions for every `K` in `2..=k_max`, sharing one encoder pass.
    pub fn predict_all_k(&self, ds: &Dataset) -> Result<Vec<SoftPartition>> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let r0 = self.encode(&p, &ds.x, &ds.col_kind)?;
        (2..=self.hyper.k_max)
            .map(|k| Ok(self.partition(&p, r0, k)?.value()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::metrics::soft_ari;
    use rand::Rng;

    fn tiny(decoder: DecoderKind) -> PinHyper {
        PinHyper {
            d: 16,
            d_tok: 8,
            l_enc: 1,
            l_dec: 2,
            heads: 2,
            k_max: 5,
            ffn_mult: 2,
            temperature_init: 10.0,
            decoder,
        }
    }

    /// Adds noise to every weight matrix and bias so random models are far from the identity map.
    fn perturbed(hyper: PinHyper, seed: u64) -> PinModel {
        let mut m = PinModel::new(hyper, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in m.store.values_mut() {
            if v.numel() > 1 {
                for x in v.data_mut() {
                    *x += rng.random_range(-0.3..0.3);
                }
            }
        }
        m
    }

    fn data(n: usize, d: usize, seed: u64) -> (Tensor, Vec<ColKind>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let mut kinds = vec![ColKind::Numeric; d];
        kinds[d - 1] = ColKind::Categorical;
        (x, kinds)
    }

    fn run(m: &PinModel, x: &Tensor, kinds: &[ColKind], k: usize) -> (Tensor, Tensor) {
        let g = Graph::new();
        let p = m.store.bind(&g, false);
        let r0 = m.encode(&p, x, kinds).unwrap();
        let out = m.partition(&p, r0, k).unwrap();
        ((*r0.value()).clone(), (*out.probs.value()).clone())
    }

    #[test]
    fn shapes_and_row_stochastic() {
        let m = PinModel::new(tiny(DecoderKind::Iterative), 1).unwrap();
        let (x, kinds) = data(64, 4, 2);
        let (r0, p) = run(&m, &x, &kinds, 3);
        assert_eq!(r0.shape(), &[64, 16]);
        assert_eq!(p.shape(), &[64, 3]);
        for i in 0..64 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn row_equivariance_all_decoders() {
        for kind in [DecoderKind::Iterative, DecoderKind::Naive, DecoderKind::NonIterative] {
            let m = perturbed(tiny(kind), 3);
            let (x, kinds) = data(12, 3, 4);
            let perm = [5, 0, 11, 3, 7, 1, 9, 2, 10, 4, 8, 6];
            let (r0, p) = run(&m, &x, &kinds, 3);
            let (r0p, pp) = run(&m, &x.permute_rows(&perm), &kinds, 3);
            assert!(r0p.max_abs_diff(&r0.permute_rows(&perm)) < 1e-9, "{kind:?}");
            assert!(pp.max_abs_diff(&p.permute_rows(&perm)) < 1e-9, "{kind:?}");
        }
    }

    #[test]
    fn feature_permutation_invariance() {
        let m = perturbed(tiny(DecoderKind::Iterative), 5);
        let (x, kinds) = data(10, 4, 6);
        let perm = [2, 3, 0, 1];
        let kinds_p: Vec<ColKind> = perm.iter().map(|&j| kinds[j]).collect();
        let (r0, _) = run(&m, &x, &kinds, 2);
        let (r0p, _) = run(&m, &x.permute_cols(&perm), &kinds_p, 2);
        assert!(r0p.max_abs_diff(&r0) < 1e-9);
    }

    #[test]
    fn encoder_distinguishes_swapped_features() {
        // rows (a, b) and (b, a) must not collapse to the same embedding
        let m = perturbed(tiny(DecoderKind::Iterative), 7);
        let mut x = data(10, 2, 8).0;
        x.data_mut()[0] = 1.5;
        x.data_mut()[1] = -0.5;
        x.data_mut()[2] = -0.5;
        x.data_mut()[3] = 1.5;
        let (r0, _) = run(&m, &x, &[ColKind::Numeric; 2], 2);
        let diff: f64 = r0.row(0).iter().zip(r0.row(1)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn decode_uses_leading_prototypes_and_permutes_rows() {
        let m = perturbed(tiny(DecoderKind::Iterative), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r0 = Tensor::new(vec![9, 16], (0..144).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let perm = [8, 7, 6, 5, 4, 3, 2, 1, 0];
        let g = Graph::new();
        let p = m.store.bind(&g, false);
        let c0 = m.initial_prototypes(&p, 2).unwrap().value();
        let protos = m.store.get(m.prototypes);
        assert_eq!(c0.data(), &protos.data()[..32]);
        let a = m.decode(&p, g.constant(r0.clone()), 2).unwrap();
        let b = m.decode(&p, g.constant(r0.permute_rows(&perm)), 2).unwrap();
        assert!(b.r.value().max_abs_diff(&a.r.value().permute_rows(&perm)) < 1e-9);
        assert!(b.c.value().max_abs_diff(&a.c.value()) < 1e-9);
        assert_eq!(a.layer, 2);
    }

    #[test]
    fn decoder_never_builds_row_by_row_attention() {
        let m = PinModel::new(tiny(DecoderKind::Iterative), 11).unwrap();
        let n = 37;
        let g = Graph::new();
        let p = m.store.bind(&g, false);
        let r0 = g.constant(Tensor::zeros(&[n, 16]));
        let before = g.len();
        m.decode(&p, r0, 3).unwrap();
        let shapes = g.node_shapes();
        assert!(shapes[before..].iter().all(|s| !(s.len() >= 2 && s[s.len() - 1] == n && s[s.len() - 2] == n)));
    }

    #[test]
    fn noniterative_allocates_row_attention_and_counts_layers() {
        let m = PinModel::new(tiny(DecoderKind::NonIterative), 12).unwrap();
        assert_eq!(m.decoder_layer_counts(), (2, 2));
        let n = 37;
        let g = Graph::new();
        let p = m.store.bind(&g, false);
        m.partition(&p, g.constant(Tensor::zeros(&[n, 16])), 3).unwrap();
        assert!(g.node_shapes().iter().any(|s| s == &[n, n]));
        assert_eq!(PinModel::new(tiny(DecoderKind::Naive), 12).unwrap().decoder_layer_counts(), (4, 0));
    }

    #[test]
    fn cosine_logits_bounded_and_duplicates_agree() {
        let m = perturbed(tiny(DecoderKind::Iterative), 13);
        let (mut x, kinds) = data(8, 3, 14);
        let row0 = x.row(0).to_vec();
        x.data_mut()[3..6].copy_from_slice(&row0);
        let g = Graph::new();
        let p = m.store.bind(&g, false);
        let out = m.forward(&p, &x, &kinds, 4).unwrap().value();
        let tau = m.tau();
        assert!(out.logits.data().iter().all(|v| v.abs() <= tau + 1e-9));
        let d: f64 = out.probs.row(0).iter().zip(out.probs.row(1)).map(|(a, b)| (a - b).abs()).sum();
        assert!(d < 1e-6);
    }

    #[test]
    fn naive_masks_unused_columns() {
        let m = perturbed(tiny(DecoderKind::Naive), 15);
        let (x, kinds) = data(6, 2, 16);
        let g = Graph::new();
        let p = m.store.bind(&g, false);
        let r0 = m.encode(&p, &x, &kinds).unwrap();
        let full = m.naive_full_probs(&p, r0, 3).unwrap().value();
        for i in 0..6 {
            assert!(full.row(i)[3..].iter().all(|&v| v == 0.0));
        }
        let part = m.partition(&p, r0, 3).unwrap().value();
        assert!(part.probs.max_abs_diff(&Tensor::new(vec![6, 3], (0..6).flat_map(|i| full.row(i)[..3].to_vec()).collect()).unwrap()) < 1e-15);
    }

    #[test]
    fn rejects_bad_k_and_hyper() {
        let m = PinModel::new(tiny(DecoderKind::Iterative), 17).unwrap();
        let (x, kinds) = data(6, 2, 18);
        let g = Graph::new();
        let p = m.store.bind(&g, false);
        assert!(m.forward(&p, &x, &kinds, 1).is_err());
        assert!(m.forward(&p, &x, &kinds, 6).is_err());
        let bad = PinHyper { heads: 3, ..tiny(DecoderKind::Iterative) };
        assert!(PinModel::new(bad, 0).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let m = PinModel::new(tiny(DecoderKind::Iterative), 19).unwrap();
        let (x, kinds) = data(20, 3, 20);
        assert_eq!(run(&m, &x, &kinds, 4), run(&m, &x, &kinds, 4));
    }

    fn pin_ari_loss<'g>(m: &PinModel, g: &'g Graph, x: &Tensor, kinds: &[ColKind], z: &[usize], swap: Option<(ParamId, Var<'g>)>) -> Result<Var<'g>> {
        let mut vars = m.store.bind(g, false).vars().to_vec();
        if let Some((id, v)) = swap {
            vars[id.index()] = v;
        }
        let p = crate::nn::Bound::from_vars(vars);
        let out = m.forward(&p, x, kinds, 3)?;
        Ok(soft_ari(out.probs, z)?.scale(-1.0))
    }

    #[test]
    fn end_to_end_gradient_check() {
        let hyper = PinHyper {
            d: 16,
            d_tok: 8,
            l_enc: 1,
            l_dec: 1,
            heads: 2,
            k_max: 3,
            ffn_mult: 2,
            temperature_init: 3.0,
            decoder: DecoderKind::Iterative,
        };
        let m = perturbed(hyper, 21);
        let (x, kinds) = data(8, 3, 22);
        let z = [0, 1, 2, 0, 1, 2, 0, 1];
        for name in ["prototypes", "enc.cell.0.w", "dec0.rows_from_proto.q.w", "head.log_tau"] {
            let id = m.store.find(name).unwrap();
            let r = finite_difference_check(
                |g, v| pin_ari_loss(&m, g, &x, &kinds, &z, Some((id, v))),
                m.store.get(id),
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.pass, "{name}: {r:?}");
        }
    }
}
