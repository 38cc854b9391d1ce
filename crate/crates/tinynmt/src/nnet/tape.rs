//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every tape value is an `Array2`; sequence structure (batch, length,
//! heads) lives in op metadata. Ops are coarse (matmul, fused attention,
//! fused softmax-cross-entropy), so tape overhead is negligible next to the
//! matrix work. All reductions run in a fixed order, which keeps gradients
//! bit-identical across runs and across the parallel/sequential backends.

use super::scalar::Scalar;
use super::NnetError;
use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, Axis, s};

#[cfg(feature = "parallel")]
use ndarray::parallel::prelude::*;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Attention geometry and masking. `key_pad[b * len_k + j] == true` hides
/// key position `j` of batch row `b` from every query.
#[derive(Debug, Clone)]
pub struct AttnMeta {
    pub batch: usize,
    pub len_q: usize,
    pub len_k: usize,
    pub n_heads: usize,
    pub causal: bool,
    pub key_pad: Vec<bool>,
}

enum Op<F: Scalar> {
    Input,
    Param(usize),
    Add(Var, Var),
    /// (n, m) + broadcast (1, m)
    AddRow(Var, Var),
    Scale(Var, F),
    Matmul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<F>, rstd: Vec<F> },
    Attention { q: Var, k: Var, v: Var, meta: AttnMeta, probs: Array2<F> },
    Embed { table: Var, ids: Vec<u32> },
    Dropout { x: Var, mask: Array2<F> },
    CrossEntropy { logits: Var, targets: Vec<u32>, weights: Vec<F>, smoothing: F, probs: Array2<F> },
}

struct Node<F: Scalar> {
    value: Array2<F>,
    op: Op<F>,
}

/// Recorded forward computation.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Row-chunked matmul: each output row is an independent dot-product batch,
/// so chunking over threads cannot change any result bit.
const PAR_MATMUL_MIN_ROWS: usize = 64;
const PAR_MATMUL_CHUNK: usize = 32;

pub(crate) fn matmul_into<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>, out: &mut Array2<F>) {
    #[cfg(feature = "parallel")]
    {
        let m = a.nrows();
        if m >= PAR_MATMUL_MIN_ROWS && rayon::current_num_threads() > 1 {
            out.axis_chunks_iter_mut(Axis(0), PAR_MATMUL_CHUNK)
                .into_par_iter()
                .zip(a.axis_chunks_iter(Axis(0), PAR_MATMUL_CHUNK).into_par_iter())
                .for_each(|(mut oc, ac)| {
                    general_mat_mul(F::one(), &ac, &b, F::zero(), &mut oc);
                });
            return;
        }
    }
    general_mat_mul(F::one(), &a, &b, F::zero(), out);
}

pub(crate) fn matmul<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    matmul_into(a, b, &mut out);
    out
}

fn resolve<'a, F: Scalar>(v: &'a Array2<F>, trans: bool) -> ArrayView2<'a, F> {
    if trans {
        v.t()
    } else {
        v.view()
    }
}

/// Numerically stable in-place row softmax; masked entries get probability 0.
/// Rows must have at least one unmasked entry.
fn softmax_row<F: Scalar>(row: &mut [F]) {
    let mut max = F::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for x in row.iter_mut() {
        if x.is_infinite() && *x < F::zero() {
            *x = F::zero();
        } else {
            *x = (*x - max).exp();
        }
        sum = sum + *x;
    }
    let inv = F::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]].to_f64()
    }

    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Register trainable tensor `idx`; its gradient is collected under that
    /// index by [`Tape::grads`].
    pub fn param(&mut self, idx: usize, value: Array2<F>) -> Var {
        self.push(value, Op::Param(idx))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[bias.0].value.slice(s![0, ..]);
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let av = resolve(&self.nodes[a.0].value, trans_a);
        let bv = resolve(&self.nodes[b.0].value, trans_b);
        let value = matmul(av, bv);
        self.push(value, Op::Matmul { a, b, trans_a, trans_b })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, d) = xv.dim();
        let eps = F::from_f64(1e-5);
        let inv_d = F::one() / F::from_f64(d as f64);
        let mut mean = Vec::with_capacity(n);
        let mut rstd = Vec::with_capacity(n);
        let mut value = Array2::zeros((n, d));
        {
            let g = self.nodes[gain.0].value.row(0);
            let b = self.nodes[bias.0].value.row(0);
            for i in 0..n {
                let row = xv.row(i);
                let mut mu = F::zero();
                for &v in row.iter() {
                    mu = mu + v;
                }
                mu = mu * inv_d;
                let mut var = F::zero();
                for &v in row.iter() {
                    let c = v - mu;
                    var = var + c * c;
                }
                var = var * inv_d;
                let r = F::one() / (var + eps).sqrt();
                mean.push(mu);
                rstd.push(r);
                let mut out_row = value.row_mut(i);
                for j in 0..d {
                    out_row[j] = (row[j] - mu) * r * g[j] + b[j];
                }
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias, mean, rstd })
    }

    /// Multi-head scaled dot-product attention over projected q/k/v of shape
    /// `(batch * len, d_model)`. Masked softmax probabilities are cached for
    /// the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, meta: AttnMeta) -> Var {
        let d_model = self.nodes[q.0].value.ncols();
        let heads = meta.n_heads;
        let dh = d_model / heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let (b, lq, lk) = (meta.batch, meta.len_q, meta.len_k);
        debug_assert_eq!(self.nodes[q.0].value.nrows(), b * lq);
        debug_assert_eq!(self.nodes[k.0].value.nrows(), b * lk);

        let mut probs: Array2<F> = Array2::zeros((b * heads * lq, lk));
        let mut out: Array2<F> = Array2::zeros((b * lq, d_model));
        {
            let qv = &self.nodes[q.0].value;
            let kv = &self.nodes[k.0].value;
            let vv = &self.nodes[v.0].value;
            for bi in 0..b {
                let q_rows = qv.slice(s![bi * lq..(bi + 1) * lq, ..]);
                let k_rows = kv.slice(s![bi * lk..(bi + 1) * lk, ..]);
                let v_rows = vv.slice(s![bi * lk..(bi + 1) * lk, ..]);
                let pad = &meta.key_pad[bi * lk..(bi + 1) * lk];
                for h in 0..heads {
                    let qh = q_rows.slice(s![.., h * dh..(h + 1) * dh]);
                    let kh = k_rows.slice(s![.., h * dh..(h + 1) * dh]);
                    let vh = v_rows.slice(s![.., h * dh..(h + 1) * dh]);
                    let mut scores = matmul(qh, kh.t());
                    scores.mapv_inplace(|x| x * scale);
                    for i in 0..lq {
                        let mut row = scores.row_mut(i);
                        for j in 0..lk {
                            if pad[j] || (meta.causal && j > i) {
                                row[j] = F::neg_infinity();
                            }
                        }
                        softmax_row(row.as_slice_mut().unwrap());
                    }
                    let ctx = matmul(scores.view(), vh);
                    let base = (bi * heads + h) * lq;
                    probs.slice_mut(s![base..base + lq, ..]).assign(&scores);
                    out.slice_mut(s![bi * lq..(bi + 1) * lq, h * dh..(h + 1) * dh]).assign(&ctx);
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, meta, probs })
    }

    /// Rows of `table` gathered by token id.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = &self.nodes[table.0].value;
        let d = t.ncols();
        let mut value = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&t.row(id as usize));
        }
        self.push(value, Op::Embed { table, ids: ids.to_vec() })
    }

    /// Inverted-dropout with a caller-supplied 0-or-1/keep mask.
    pub fn dropout(&mut self, x: Var, mask: Array2<F>) -> Var {
        let value = &self.nodes[x.0].value * &mask;
        self.push(value, Op::Dropout { x, mask })
    }

    /// Label-smoothed softmax cross-entropy, averaged over positions with
    /// nonzero weight: `loss = sum_i w_i * ce_i / sum_i w_i` (0 if all
    /// weights vanish). Returns a scalar-shaped (1,1) node.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        weights: &[F],
        smoothing: f64,
    ) -> Var {
        let lv = &self.nodes[logits.0].value;
        let (n, vocab) = lv.dim();
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let eps = F::from_f64(smoothing);
        let unif = F::from_f64(smoothing / vocab as f64);
        let confident = F::one() - eps;

        let mut probs = Array2::zeros((n, vocab));
        let mut total = F::zero();
        let mut wsum = F::zero();
        for i in 0..n {
            let row = lv.row(i);
            let mut max = F::neg_infinity();
            for &x in row.iter() {
                if x > max {
                    max = x;
                }
            }
            let mut sum = F::zero();
            let mut p = probs.row_mut(i);
            for j in 0..vocab {
                let e = (row[j] - max).exp();
                p[j] = e;
                sum = sum + e;
            }
            let log_z = sum.ln() + max;
            let inv = F::one() / sum;
            for j in 0..vocab {
                p[j] = p[j] * inv;
            }
            let w = weights[i];
            if w != F::zero() {
                // ce = -(1-eps) log p_t - eps/V sum_c log p_c
                let mut sum_logp = F::zero();
                for j in 0..vocab {
                    sum_logp = sum_logp + (row[j] - log_z);
                }
                let logp_t = row[targets[i] as usize] - log_z;
                let ce = -(confident * logp_t + unif * sum_logp);
                total = total + w * ce;
                wsum = wsum + w;
            }
        }
        let loss = if wsum == F::zero() { F::zero() } else { total / wsum };
        let value = Array2::from_elem((1, 1), loss);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing: eps,
                probs,
            },
        )
    }

    /// Reverse pass from scalar node `loss`. Returns per-parameter gradients
    /// aligned with the parameter indices used at registration; parameters
    /// that did not influence the loss get `None`.
    pub fn backward(&self, loss: Var, n_params: usize) -> Result<Vec<Option<Array2<F>>>, NnetError> {
        let lv = &self.nodes[loss.0].value;
        if lv.dim() != (1, 1) {
            return Err(NnetError::ShapeMismatch("backward from non-scalar".into()));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(NnetError::NanLoss);
        }

        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut param_grads: Vec<Option<Array2<F>>> = (0..n_params).map(|_| None).collect();

        // Pre-size accumulators lazily.
        fn acc<F: Scalar>(slot: &mut Option<Array2<F>>, delta: &Array2<F>) {
            match slot {
                Some(g) => *g += delta,
                None => *slot = Some(delta.clone()),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(p) => acc(&mut param_grads[*p], &gout),
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], &gout);
                    acc(&mut grads[b.0], &gout);
                }
                Op::AddRow(a, bias) => {
                    acc(&mut grads[a.0], &gout);
                    let col_sum = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[bias.0], &col_sum);
                }
                Op::Scale(a, c) => {
                    let g = gout.mapv(|x| x * *c);
                    acc(&mut grads[a.0], &g);
                }
                Op::Matmul { a, b, trans_a, trans_b } => {
                    let av = resolve(&self.nodes[a.0].value, *trans_a);
                    let bv = resolve(&self.nodes[b.0].value, *trans_b);
                    // d(A@B): dA = G @ B^T, dB = A^T @ G (then undo transposes).
                    let da_t = matmul(gout.view(), bv.t());
                    let db_t = matmul(av.t(), gout.view());
                    let da = if *trans_a { da_t.t().to_owned() } else { da_t };
                    let db = if *trans_b { db_t.t().to_owned() } else { db_t };
                    acc(&mut grads[a.0], &da);
                    acc(&mut grads[b.0], &db);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let mut g = gout;
                    g.zip_mut_with(av, |gi, &x| {
                        if x <= F::zero() {
                            *gi = F::zero();
                        }
                    });
                    acc(&mut grads[a.0], &g);
                }
                Op::LayerNorm { x, gain, bias, mean, rstd } => {
                    let xv = &self.nodes[x.0].value;
                    let g = self.nodes[gain.0].value.row(0).to_owned();
                    let (n, d) = xv.dim();
                    let inv_d = F::one() / F::from_f64(d as f64);
                    let mut dx = Array2::zeros((n, d));
                    let mut dgain = Array2::zeros((1, d));
                    let mut dbias = Array2::zeros((1, d));
                    for i in 0..n {
                        let row = xv.row(i);
                        let go = gout.row(i);
                        let (mu, r) = (mean[i], rstd[i]);
                        // h = normalized input; dh = dy * gain
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..d {
                            let h = (row[j] - mu) * r;
                            let dh = go[j] * g[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * h;
                            dgain[[0, j]] = dgain[[0, j]] + go[j] * h;
                            dbias[[0, j]] = dbias[[0, j]] + go[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        let mut dx_row = dx.row_mut(i);
                        for j in 0..d {
                            let h = (row[j] - mu) * r;
                            let dh = go[j] * g[j];
                            dx_row[j] = r * (dh - mean_dh - h * mean_dh_h);
                        }
                    }
                    acc(&mut grads[x.0], &dx);
                    acc(&mut grads[gain.0], &dgain);
                    acc(&mut grads[bias.0], &dbias);
                }
                Op::Attention { q, k, v, meta, probs } => {
                    let d_model = self.nodes[q.0].value.ncols();
                    let heads = meta.n_heads;
                    let dh = d_model / heads;
                    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
                    let (b, lq, lk) = (meta.batch, meta.len_q, meta.len_k);
                    let mut dq = Array2::zeros((b * lq, d_model));
                    let mut dk = Array2::zeros((b * lk, d_model));
                    let mut dv = Array2::zeros((b * lk, d_model));
                    let qv = &self.nodes[q.0].value;
                    let kv = &self.nodes[k.0].value;
                    let vv = &self.nodes[v.0].value;
                    for bi in 0..b {
                        for h in 0..heads {
                            let base = (bi * heads + h) * lq;
                            let p = probs.slice(s![base..base + lq, ..]);
                            let go = gout.slice(s![bi * lq..(bi + 1) * lq, h * dh..(h + 1) * dh]);
                            let vh = vv.slice(s![bi * lk..(bi + 1) * lk, h * dh..(h + 1) * dh]);
                            let kh = kv.slice(s![bi * lk..(bi + 1) * lk, h * dh..(h + 1) * dh]);
                            let qh = qv.slice(s![bi * lq..(bi + 1) * lq, h * dh..(h + 1) * dh]);

                            // dV_h = P^T @ G
                            let dvh = matmul(p.t(), go.view());
                            dv.slice_mut(s![bi * lk..(bi + 1) * lk, h * dh..(h + 1) * dh])
                                .zip_mut_with(&dvh, |a, &x| *a = *a + x);
                            // dP = G @ V^T, then softmax backward per row.
                            let mut dp = matmul(go.view(), vh.t());
                            for i in 0..lq {
                                let pr = p.row(i);
                                let mut dpr = dp.row_mut(i);
                                let mut dot = F::zero();
                                for j in 0..lk {
                                    dot = dot + dpr[j] * pr[j];
                                }
                                for j in 0..lk {
                                    dpr[j] = pr[j] * (dpr[j] - dot) * scale;
                                }
                            }
                            // dQ_h = dS @ K_h ; dK_h = dS^T @ Q_h
                            let dqh = matmul(dp.view(), kh);
                            dq.slice_mut(s![bi * lq..(bi + 1) * lq, h * dh..(h + 1) * dh])
                                .zip_mut_with(&dqh, |a, &x| *a = *a + x);
                            let dkh = matmul(dp.t(), qh);
                            dk.slice_mut(s![bi * lk..(bi + 1) * lk, h * dh..(h + 1) * dh])
                                .zip_mut_with(&dkh, |a, &x| *a = *a + x);
                        }
                    }
                    acc(&mut grads[q.0], &dq);
                    acc(&mut grads[k.0], &dk);
                    acc(&mut grads[v.0], &dv);
                }
                Op::Embed { table, ids } => {
                    let d = self.nodes[table.0].value.ncols();
                    let vocab = self.nodes[table.0].value.nrows();
                    let mut dt = Array2::zeros((vocab, d));
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id as usize);
                        let go = gout.row(i);
                        for j in 0..d {
                            row[j] = row[j] + go[j];
                        }
                    }
                    acc(&mut grads[table.0], &dt);
                }
                Op::Dropout { x, mask } => {
                    let g = &gout * mask;
                    acc(&mut grads[x.0], &g);
                }
                Op::CrossEntropy { logits, targets, weights, smoothing, probs } => {
                    let upstream = gout[[0, 0]];
                    let (n, vocab) = probs.dim();
                    let unif = *smoothing / F::from_f64(vocab as f64);
                    let confident = F::one() - *smoothing;
                    let mut wsum = F::zero();
                    for &w in weights.iter() {
                        wsum = wsum + w;
                    }
                    let mut dl = Array2::zeros((n, vocab));
                    if wsum != F::zero() {
                        let norm = upstream / wsum;
                        for i in 0..n {
                            let w = weights[i];
                            if w == F::zero() {
                                continue;
                            }
                            let coef = w * norm;
                            let p = probs.row(i);
                            let mut row = dl.row_mut(i);
                            for j in 0..vocab {
                                row[j] = coef * (p[j] - unif);
                            }
                            let t = targets[i] as usize;
                            row[t] = row[t] - coef * confident;
                        }
                    }
                    acc(&mut grads[logits.0], &dl);
                }
            }
        }
        Ok(param_grads)
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}
