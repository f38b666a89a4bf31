//! Forward pass, exact backward pass, and greedy decoding.
//!
//! Batches are rectangular (one task configuration yields uniform sequence
//! lengths), so all linear layers run as one (B*T, H) gemm per call. Work is
//! split into fixed-size chunks; chunk boundaries depend only on the batch
//! size, and chunk results are reduced in index order, so a run is
//! bit-reproducible single-threaded and run-reproducible under rayon.

use rand::Rng;
use rayon::prelude::*;

use super::scalar::{gemm, Scalar};
use super::Parameters;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Fixed chunk size; independent of thread count so results never depend on
/// the executing machine.
const CHUNK: usize = 256;

const LN_EPS: f64 = 1e-5;

/// Dropout configuration for one optimizer step. The rate comes from the
/// model config; the seed must change per update.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub seed: u64,
}

/// A rectangular training batch: full sequences (input followed by target)
/// and a per-position loss switch. `masks[i][t]` gates the prediction made
/// at position `t` (of token `t+1`).
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub seqs: Vec<Vec<u32>>,
    pub masks: Vec<Vec<bool>>,
}

impl TrainBatch {
    pub fn validate(&self, vocab_size: usize, max_seq_len: usize) -> Result<()> {
        let t = self.seqs.first().map(|s| s.len()).unwrap_or(0);
        if t == 0 {
            return Err(Error::EmptyLossMask);
        }
        if t > max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: max_seq_len,
            });
        }
        let mut any = false;
        for (s, m) in self.seqs.iter().zip(&self.masks) {
            if s.len() != t || m.len() != t - 1 {
                return Err(Error::RaggedBatch);
            }
            if let Some(&tok) = s.iter().find(|&&tok| tok as usize >= vocab_size) {
                return Err(Error::TokenOutOfVocabulary(tok, vocab_size));
            }
            any |= m.iter().any(|&b| b);
        }
        if !any {
            return Err(Error::EmptyLossMask);
        }
        Ok(())
    }
}

/// Per-layer activations kept for the backward pass.
struct LayerState<S> {
    y1: Vec<S>,                // (B,T,H) first norm output
    xhat1: Vec<S>,             // (B,T,H)
    rstd1: Vec<S>,             // (B,T)
    q: Vec<S>,                 // (B,T,H)
    k: Vec<S>,                 // (B,T,H)
    v: Vec<S>,                 // (B,T,H)
    probs: Vec<S>,             // (B,nh,T,T) post-softmax, pre-dropout
    attn_drop: Option<Vec<S>>, // scale factors, same shape as probs
    ctx: Vec<S>,               // (B,T,H) heads concatenated, pre output projection
    drop1: Option<Vec<S>>,     // (B,T,H) residual-branch scale factors
    y2: Vec<S>,                // (B,T,H)
    xhat2: Vec<S>,
    rstd2: Vec<S>,
    u: Vec<S>, // (B,T,F) pre-GELU
    h: Vec<S>, // (B,T,F) post-GELU
    drop2: Option<Vec<S>>,
}

struct ChunkState<S> {
    b: usize,
    t: usize,
    layers: Vec<LayerState<S>>,
    yf: Vec<S>,
    xhatf: Vec<S>,
    rstdf: Vec<S>,
    logits: Vec<S>, // (B,T,V)
}

struct LayerView<'a, S> {
    ln1_g: &'a [S],
    ln1_b: &'a [S],
    wq: &'a [S],
    wk: &'a [S],
    wv: &'a [S],
    wo: &'a [S],
    bq: &'a [S],
    bk: &'a [S],
    bv: &'a [S],
    bo: &'a [S],
    ln2_g: &'a [S],
    ln2_b: &'a [S],
    w_up: &'a [S],
    b_up: &'a [S],
    w_down: &'a [S],
    b_down: &'a [S],
}

fn layer_view<S: Scalar>(p: &Parameters<S>, l: usize) -> LayerView<'_, S> {
    LayerView {
        ln1_g: p.tensor(&format!("layer{l}.ln1.g")),
        ln1_b: p.tensor(&format!("layer{l}.ln1.b")),
        wq: p.tensor(&format!("layer{l}.attn.wq")),
        wk: p.tensor(&format!("layer{l}.attn.wk")),
        wv: p.tensor(&format!("layer{l}.attn.wv")),
        wo: p.tensor(&format!("layer{l}.attn.wo")),
        bq: p.tensor(&format!("layer{l}.attn.bq")),
        bk: p.tensor(&format!("layer{l}.attn.bk")),
        bv: p.tensor(&format!("layer{l}.attn.bv")),
        bo: p.tensor(&format!("layer{l}.attn.bo")),
        ln2_g: p.tensor(&format!("layer{l}.ln2.g")),
        ln2_b: p.tensor(&format!("layer{l}.ln2.b")),
        w_up: p.tensor(&format!("layer{l}.mlp.w_up")),
        b_up: p.tensor(&format!("layer{l}.mlp.b_up")),
        w_down: p.tensor(&format!("layer{l}.mlp.w_down")),
        b_down: p.tensor(&format!("layer{l}.mlp.b_down")),
    }
}

fn layer_norm<S: Scalar>(
    x: &[S],
    g: &[S],
    b: &[S],
    h: usize,
    xhat: &mut [S],
    rstd: &mut [S],
    y: &mut [S],
) {
    let rows = x.len() / h;
    let hf = S::from_f64(h as f64);
    let eps = S::from_f64(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * h..(r + 1) * h];
        let mut mean = S::ZERO;
        for &v in xr {
            mean += v;
        }
        mean /= hf;
        let mut var = S::ZERO;
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var /= hf;
        let rs = S::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..h {
            let xh = (xr[i] - mean) * rs;
            xhat[r * h + i] = xh;
            y[r * h + i] = g[i] * xh + b[i];
        }
    }
}

/// dx += backward of layer norm; dg/db accumulate.
fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    rstd: &[S],
    g: &[S],
    h: usize,
    dx: &mut [S],
    dg: &mut [S],
    db: &mut [S],
) {
    let rows = dy.len() / h;
    let hf = S::from_f64(h as f64);
    for r in 0..rows {
        let base = r * h;
        let mut mean_dxhat = S::ZERO;
        let mut mean_dxhat_xhat = S::ZERO;
        for i in 0..h {
            let dyv = dy[base + i];
            let xh = xhat[base + i];
            db[i] += dyv;
            dg[i] += dyv * xh;
            let dxh = dyv * g[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= hf;
        mean_dxhat_xhat /= hf;
        let rs = rstd[r];
        for i in 0..h {
            let dxh = dy[base + i] * g[i];
            dx[base + i] += rs * (dxh - mean_dxhat - xhat[base + i] * mean_dxhat_xhat);
        }
    }
}

/// y = x·w + b for row-major (rows, in) x (in, out).
fn linear<S: Scalar>(
    x: &[S],
    w: &[S],
    b: &[S],
    rows: usize,
    d_in: usize,
    d_out: usize,
    y: &mut [S],
) {
    for r in 0..rows {
        y[r * d_out..(r + 1) * d_out].copy_from_slice(b);
    }
    gemm(rows, d_in, d_out, S::ONE, x, false, w, false, S::ONE, y);
}

/// Accumulates dx += dy·w^T, dw += x^T·dy, db += column sums of dy.
#[allow(clippy::too_many_arguments)]
fn linear_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    gemm(rows, d_out, d_in, S::ONE, dy, false, w, true, S::ONE, dx);
    gemm(d_in, rows, d_out, S::ONE, x, true, dy, false, S::ONE, dw);
    for r in 0..rows {
        for o in 0..d_out {
            db[o] += dy[r * d_out + o];
        }
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

/// Rational (Padé) tanh approximation, accurate to ~1e-7 relative — below
/// f32 resolution — and an order of magnitude faster than the libm call
/// because it is pure multiply/add and vectorizes. The input is clamped
/// where tanh saturates, so the quotient stays in [-1, 1].
fn fast_tanh<S: Scalar>(x: S) -> S {
    let hi = S::from_f64(7.905_314_3);
    let x = if x > hi {
        hi
    } else if x < S::ZERO - hi {
        S::ZERO - hi
    } else {
        x
    };
    let a1 = S::from_f64(4.893_524_558_917_86e-3);
    let a3 = S::from_f64(6.372_619_288_754_36e-4);
    let a5 = S::from_f64(1.485_722_357_179_79e-5);
    let a7 = S::from_f64(5.122_297_090_371_14e-8);
    let a9 = S::from_f64(-8.604_671_522_137_35e-11);
    let a11 = S::from_f64(2.000_187_904_824_77e-13);
    let a13 = S::from_f64(-2.760_768_477_423_55e-16);
    let b0 = S::from_f64(4.893_525_185_543_85e-3);
    let b2 = S::from_f64(2.268_434_632_439e-3);
    let b4 = S::from_f64(1.185_347_056_866_54e-4);
    let b6 = S::from_f64(1.198_258_394_667_02e-6);
    let x2 = x * x;
    let p = ((((((a13 * x2 + a11) * x2 + a9) * x2 + a7) * x2 + a5) * x2 + a3) * x2 + a1) * x;
    let q = ((b6 * x2 + b4) * x2 + b2) * x2 + b0;
    p / q
}

fn gelu<S: Scalar>(u: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    half * u * (S::ONE + fast_tanh(c0 * (u + c1 * u * u * u)))
}

fn gelu_derivative<S: Scalar>(u: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = fast_tanh(c0 * (u + c1 * u * u * u));
    half * (S::ONE + t) + half * u * (S::ONE - t * t) * c0 * (S::ONE + three * c1 * u * u)
}

fn dropout_mask<S: Scalar, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<S> {
    let keep = S::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                S::ZERO
            } else {
                keep
            }
        })
        .collect()
}

/// One forward pass over a rectangular chunk, keeping everything backward
/// needs. `dropout` is None in eval mode.
fn forward_chunk<S: Scalar>(
    p: &Parameters<S>,
    seqs: &[Vec<u32>],
    dropout: Option<(&DropoutSpec, u64)>,
) -> ChunkState<S> {
    let cfg = &p.config;
    let (h, f, v) = (cfg.hidden, cfg.mlp_dim(), cfg.vocab_size);
    let (nh, hd) = (cfg.heads, cfg.head_dim());
    let b = seqs.len();
    let t = seqs[0].len();
    let bt = b * t;
    let rate = cfg.dropout;
    let mut drop_rng = dropout.map(|(spec, chunk)| stream_rng(spec.seed, &[chunk]));

    // Token + learned positional embeddings.
    let tok_emb = p.tensor("tok_emb");
    let pos_emb = p.tensor("pos_emb");
    let mut x = vec![S::ZERO; bt * h];
    for (bi, seq) in seqs.iter().enumerate() {
        for (ti, &tok) in seq.iter().enumerate() {
            let dst = &mut x[(bi * t + ti) * h..(bi * t + ti + 1) * h];
            let te = &tok_emb[tok as usize * h..(tok as usize + 1) * h];
            let pe = &pos_emb[ti * h..(ti + 1) * h];
            for i in 0..h {
                dst[i] = te[i] + pe[i];
            }
        }
    }

    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let lv = layer_view(p, l);
        let x_in = x;
        let mut xhat1 = vec![S::ZERO; bt * h];
        let mut rstd1 = vec![S::ZERO; bt];
        let mut y1 = vec![S::ZERO; bt * h];
        layer_norm(
            &x_in, lv.ln1_g, lv.ln1_b, h, &mut xhat1, &mut rstd1, &mut y1,
        );

        let mut q = vec![S::ZERO; bt * h];
        let mut k = vec![S::ZERO; bt * h];
        let mut vv = vec![S::ZERO; bt * h];
        linear(&y1, lv.wq, lv.bq, bt, h, h, &mut q);
        linear(&y1, lv.wk, lv.bk, bt, h, h, &mut k);
        linear(&y1, lv.wv, lv.bv, bt, h, h, &mut vv);

        let mut probs = vec![S::ZERO; b * nh * t * t];
        let attn_drop = drop_rng
            .as_mut()
            .map(|rng| dropout_mask::<S, _>(b * nh * t * t, rate, rng));
        let mut ctx = vec![S::ZERO; bt * h];
        for bi in 0..b {
            for head in 0..nh {
                let ho = head * hd;
                let pbase = (bi * nh + head) * t * t;
                for i in 0..t {
                    let qi = &q[(bi * t + i) * h + ho..(bi * t + i) * h + ho + hd];
                    // causal scores and stable softmax over j <= i
                    let mut max_s = S::from_f64(f64::NEG_INFINITY);
                    let row = &mut probs[pbase + i * t..pbase + (i + 1) * t];
                    for j in 0..=i {
                        let kj = &k[(bi * t + j) * h + ho..(bi * t + j) * h + ho + hd];
                        let mut dot = S::ZERO;
                        for z in 0..hd {
                            dot += qi[z] * kj[z];
                        }
                        let s = dot * scale;
                        row[j] = s;
                        if s > max_s {
                            max_s = s;
                        }
                    }
                    let mut denom = S::ZERO;
                    for j in 0..=i {
                        let e = (row[j] - max_s).exp();
                        row[j] = e;
                        denom += e;
                    }
                    for j in 0..=i {
                        row[j] /= denom;
                    }
                    // context = (dropout(probs)) . V
                    let ctxi = &mut ctx[(bi * t + i) * h + ho..(bi * t + i) * h + ho + hd];
                    for j in 0..=i {
                        let pj = match &attn_drop {
                            Some(m) => row[j] * m[pbase + i * t + j],
                            None => row[j],
                        };
                        if pj != S::ZERO {
                            let vj = &vv[(bi * t + j) * h + ho..(bi * t + j) * h + ho + hd];
                            for z in 0..hd {
                                ctxi[z] += pj * vj[z];
                            }
                        }
                    }
                }
            }
        }

        let mut attn_out = vec![S::ZERO; bt * h];
        linear(&ctx, lv.wo, lv.bo, bt, h, h, &mut attn_out);
        let drop1 = drop_rng
            .as_mut()
            .map(|rng| dropout_mask::<S, _>(bt * h, rate, rng));
        let mut r1 = vec![S::ZERO; bt * h];
        for i in 0..bt * h {
            let a = match &drop1 {
                Some(m) => attn_out[i] * m[i],
                None => attn_out[i],
            };
            r1[i] = x_in[i] + a;
        }

        let mut xhat2 = vec![S::ZERO; bt * h];
        let mut rstd2 = vec![S::ZERO; bt];
        let mut y2 = vec![S::ZERO; bt * h];
        layer_norm(&r1, lv.ln2_g, lv.ln2_b, h, &mut xhat2, &mut rstd2, &mut y2);

        let mut u = vec![S::ZERO; bt * f];
        linear(&y2, lv.w_up, lv.b_up, bt, h, f, &mut u);
        let mut hact = vec![S::ZERO; bt * f];
        for i in 0..bt * f {
            hact[i] = gelu(u[i]);
        }
        let mut mlp_out = vec![S::ZERO; bt * h];
        linear(&hact, lv.w_down, lv.b_down, bt, f, h, &mut mlp_out);
        let drop2 = drop_rng
            .as_mut()
            .map(|rng| dropout_mask::<S, _>(bt * h, rate, rng));
        let mut r2 = vec![S::ZERO; bt * h];
        for i in 0..bt * h {
            let a = match &drop2 {
                Some(m) => mlp_out[i] * m[i],
                None => mlp_out[i],
            };
            r2[i] = r1[i] + a;
        }

        layers.push(LayerState {
            y1,
            xhat1,
            rstd1,
            q,
            k,
            v: vv,
            probs,
            attn_drop,
            ctx,
            drop1,
            y2,
            xhat2,
            rstd2,
            u,
            h: hact,
            drop2,
        });
        x = r2;
    }

    let xf = x;
    let mut xhatf = vec![S::ZERO; bt * h];
    let mut rstdf = vec![S::ZERO; bt];
    let mut yf = vec![S::ZERO; bt * h];
    layer_norm(
        &xf,
        p.tensor("lnf.g"),
        p.tensor("lnf.b"),
        h,
        &mut xhatf,
        &mut rstdf,
        &mut yf,
    );
    let mut logits = vec![S::ZERO; bt * v];
    linear(
        &yf,
        p.tensor("out.w"),
        p.tensor("out.b"),
        bt,
        h,
        v,
        &mut logits,
    );

    let _ = xf;
    ChunkState {
        b,
        t,
        layers,
        yf,
        xhatf,
        rstdf,
        logits,
    }
}

/// Summed cross-entropy over masked positions plus d(loss)/d(logits),
/// unscaled (the caller divides by the global masked count).
fn loss_and_dlogits<S: Scalar>(
    state: &ChunkState<S>,
    seqs: &[Vec<u32>],
    masks: &[Vec<bool>],
) -> (f64, usize, Vec<S>) {
    let (b, t) = (state.b, state.t);
    let v = state.logits.len() / (b * t);
    let mut dlogits = vec![S::ZERO; state.logits.len()];
    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    for bi in 0..b {
        for ti in 0..t - 1 {
            if !masks[bi][ti] {
                continue;
            }
            let target = seqs[bi][ti + 1] as usize;
            let row = &state.logits[(bi * t + ti) * v..(bi * t + ti + 1) * v];
            let mut max_l = row[0];
            for &x in row {
                if x > max_l {
                    max_l = x;
                }
            }
            let mut denom = S::ZERO;
            for &x in row {
                denom += (x - max_l).exp();
            }
            let log_denom = denom.ln() + max_l;
            loss_sum += (log_denom - row[target]).to_f64();
            count += 1;
            let drow = &mut dlogits[(bi * t + ti) * v..(bi * t + ti + 1) * v];
            for j in 0..v {
                drow[j] = (row[j] - log_denom).exp();
            }
            drow[target] -= S::ONE;
        }
    }
    (loss_sum, count, dlogits)
}

/// Backward through the whole network, accumulating parameter gradients
/// (as sums) into `grads`.
fn backward_chunk<S: Scalar>(
    p: &Parameters<S>,
    seqs: &[Vec<u32>],
    state: &ChunkState<S>,
    dlogits: &[S],
    grads: &mut [S],
) {
    let cfg = &p.config;
    let (h, f) = (cfg.hidden, cfg.mlp_dim());
    let v = cfg.vocab_size;
    let (nh, hd) = (cfg.heads, cfg.head_dim());
    let (b, t) = (state.b, state.t);
    let bt = b * t;
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());

    // Output head.
    let mut dyf = vec![S::ZERO; bt * h];
    {
        let r = p.layout.range("out.w");
        let (rb, w) = (p.layout.range("out.b"), p.tensor("out.w"));
        // split mutable borrows by doing the three accumulations in sequence
        gemm(bt, v, h, S::ONE, dlogits, false, w, true, S::ONE, &mut dyf);
        gemm(
            h,
            bt,
            v,
            S::ONE,
            &state.yf,
            true,
            dlogits,
            false,
            S::ONE,
            &mut grads[r],
        );
        let db = &mut grads[rb];
        for row in 0..bt {
            for j in 0..v {
                db[j] += dlogits[row * v + j];
            }
        }
    }

    // Final norm.
    let mut dx = vec![S::ZERO; bt * h];
    {
        let rg = p.layout.range("lnf.g");
        let rb = p.layout.range("lnf.b");
        let mut dg = vec![S::ZERO; h];
        let mut db = vec![S::ZERO; h];
        layer_norm_backward(
            &dyf,
            &state.xhatf,
            &state.rstdf,
            p.tensor("lnf.g"),
            h,
            &mut dx,
            &mut dg,
            &mut db,
        );
        for i in 0..h {
            grads[rg.clone()][i] += dg[i];
            grads[rb.clone()][i] += db[i];
        }
    }

    for l in (0..cfg.layers).rev() {
        let lv = layer_view(p, l);
        let st = &state.layers[l];

        // dx is the gradient at the block output r2 = r1 + drop2(mlp(ln2(r1))).
        let mut dmlp_out = vec![S::ZERO; bt * h];
        for i in 0..bt * h {
            dmlp_out[i] = match &st.drop2 {
                Some(m) => dx[i] * m[i],
                None => dx[i],
            };
        }
        // Down projection.
        let mut dh = vec![S::ZERO; bt * f];
        {
            let rw = p.layout.range(&format!("layer{l}.mlp.w_down"));
            let rb = p.layout.range(&format!("layer{l}.mlp.b_down"));
            let mut dw = grads[rw.clone()].to_vec();
            let mut db = grads[rb.clone()].to_vec();
            linear_backward(
                &st.h, lv.w_down, &dmlp_out, bt, f, h, &mut dh, &mut dw, &mut db,
            );
            grads[rw].copy_from_slice(&dw);
            grads[rb].copy_from_slice(&db);
        }
        // GELU.
        let mut du = vec![S::ZERO; bt * f];
        for i in 0..bt * f {
            du[i] = dh[i] * gelu_derivative(st.u[i]);
        }
        // Up projection.
        let mut dy2 = vec![S::ZERO; bt * h];
        {
            let rw = p.layout.range(&format!("layer{l}.mlp.w_up"));
            let rb = p.layout.range(&format!("layer{l}.mlp.b_up"));
            let mut dw = grads[rw.clone()].to_vec();
            let mut db = grads[rb.clone()].to_vec();
            linear_backward(&st.y2, lv.w_up, &du, bt, h, f, &mut dy2, &mut dw, &mut db);
            grads[rw].copy_from_slice(&dw);
            grads[rb].copy_from_slice(&db);
        }
        // ln2; its input is r1, and r1 also receives the residual passthrough.
        let mut dr1 = dx; // passthrough term
        {
            let rg = p.layout.range(&format!("layer{l}.ln2.g"));
            let rb = p.layout.range(&format!("layer{l}.ln2.b"));
            let mut dg = vec![S::ZERO; h];
            let mut db = vec![S::ZERO; h];
            layer_norm_backward(
                &dy2, &st.xhat2, &st.rstd2, lv.ln2_g, h, &mut dr1, &mut dg, &mut db,
            );
            for i in 0..h {
                grads[rg.clone()][i] += dg[i];
                grads[rb.clone()][i] += db[i];
            }
        }

        // Attention branch: r1 = x_in + drop1(O(ctx)).
        let mut dattn_out = vec![S::ZERO; bt * h];
        for i in 0..bt * h {
            dattn_out[i] = match &st.drop1 {
                Some(m) => dr1[i] * m[i],
                None => dr1[i],
            };
        }
        let mut dctx = vec![S::ZERO; bt * h];
        {
            let rw = p.layout.range(&format!("layer{l}.attn.wo"));
            let rb = p.layout.range(&format!("layer{l}.attn.bo"));
            let mut dw = grads[rw.clone()].to_vec();
            let mut db = grads[rb.clone()].to_vec();
            linear_backward(
                &st.ctx, lv.wo, &dattn_out, bt, h, h, &mut dctx, &mut dw, &mut db,
            );
            grads[rw].copy_from_slice(&dw);
            grads[rb].copy_from_slice(&db);
        }

        // Attention core.
        let mut dq = vec![S::ZERO; bt * h];
        let mut dk = vec![S::ZERO; bt * h];
        let mut dv = vec![S::ZERO; bt * h];
        let mut dscores = vec![S::ZERO; t];
        for bi in 0..b {
            for head in 0..nh {
                let ho = head * hd;
                let pbase = (bi * nh + head) * t * t;
                for i in 0..t {
                    let dci = &dctx[(bi * t + i) * h + ho..(bi * t + i) * h + ho + hd];
                    let prow = &st.probs[pbase + i * t..pbase + (i + 1) * t];
                    // dP (through dropout), then softmax backward to scores.
                    let mut dot_dp_p = S::ZERO;
                    for j in 0..=i {
                        let vj = &st.v[(bi * t + j) * h + ho..(bi * t + j) * h + ho + hd];
                        let mut dpd = S::ZERO;
                        for z in 0..hd {
                            dpd += dci[z] * vj[z];
                        }
                        let mscale = match &st.attn_drop {
                            Some(m) => m[pbase + i * t + j],
                            None => S::ONE,
                        };
                        // dV via the dropped probability.
                        let pdrop = prow[j] * mscale;
                        if pdrop != S::ZERO {
                            let dvj = &mut dv[(bi * t + j) * h + ho..(bi * t + j) * h + ho + hd];
                            for z in 0..hd {
                                dvj[z] += pdrop * dci[z];
                            }
                        }
                        let dp = dpd * mscale;
                        dscores[j] = dp;
                        dot_dp_p += dp * prow[j];
                    }
                    for j in 0..=i {
                        dscores[j] = prow[j] * (dscores[j] - dot_dp_p);
                    }
                    // dq_i += scale * sum_j ds_ij k_j ; dk_j += scale * ds_ij q_i
                    let qi_base = (bi * t + i) * h + ho;
                    for j in 0..=i {
                        let ds = dscores[j] * scale;
                        if ds == S::ZERO {
                            continue;
                        }
                        let kj = (bi * t + j) * h + ho;
                        for z in 0..hd {
                            dq[qi_base + z] += ds * st.k[kj + z];
                            dk[kj + z] += ds * st.q[qi_base + z];
                        }
                    }
                }
            }
        }

        // Q/K/V projections share the ln1 output.
        let mut dy1 = vec![S::ZERO; bt * h];
        for (w, bname, d) in [(lv.wq, "bq", &dq), (lv.wk, "bk", &dk), (lv.wv, "bv", &dv)] {
            let wname = match bname {
                "bq" => "wq",
                "bk" => "wk",
                _ => "wv",
            };
            let rw = p.layout.range(&format!("layer{l}.attn.{wname}"));
            let rb = p.layout.range(&format!("layer{l}.attn.{bname}"));
            let mut dw = grads[rw.clone()].to_vec();
            let mut db = grads[rb.clone()].to_vec();
            linear_backward(&st.y1, w, d, bt, h, h, &mut dy1, &mut dw, &mut db);
            grads[rw].copy_from_slice(&dw);
            grads[rb].copy_from_slice(&db);
        }

        // ln1 backward into the block input, plus the residual passthrough.
        let mut dx_in = dr1; // passthrough of r1 = x_in + branch
        {
            let rg = p.layout.range(&format!("layer{l}.ln1.g"));
            let rb = p.layout.range(&format!("layer{l}.ln1.b"));
            let mut dg = vec![S::ZERO; h];
            let mut db = vec![S::ZERO; h];
            layer_norm_backward(
                &dy1, &st.xhat1, &st.rstd1, lv.ln1_g, h, &mut dx_in, &mut dg, &mut db,
            );
            for i in 0..h {
                grads[rg.clone()][i] += dg[i];
                grads[rb.clone()][i] += db[i];
            }
        }
        dx = dx_in;
    }

    // Embedding gradients.
    let rtok = p.layout.range("tok_emb");
    let rpos = p.layout.range("pos_emb");
    for (bi, seq) in seqs.iter().enumerate() {
        for (ti, &tok) in seq.iter().enumerate() {
            let src = &dx[(bi * t + ti) * h..(bi * t + ti + 1) * h];
            for i in 0..h {
                grads[rtok.start + tok as usize * h + i] += src[i];
                grads[rpos.start + ti * h + i] += src[i];
            }
        }
    }
}

/// Mean masked cross-entropy and exact parameter gradients for one batch.
pub fn loss_and_grad<S: Scalar>(
    p: &Parameters<S>,
    batch: &TrainBatch,
    dropout: Option<DropoutSpec>,
) -> Result<(f64, Vec<S>)> {
    batch.validate(p.config.vocab_size, p.config.max_seq_len)?;
    let n = batch.seqs.len();
    let chunk_ids: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let results: Vec<(f64, usize, Vec<S>)> = chunk_ids
        .par_iter()
        .map(|&c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let seqs = &batch.seqs[lo..hi];
            let masks = &batch.masks[lo..hi];
            let state = forward_chunk(p, seqs, dropout.as_ref().map(|d| (d, c as u64)));
            let (loss, count, dlogits) = loss_and_dlogits(&state, seqs, masks);
            let mut grads = p.zeros_like();
            backward_chunk(p, seqs, &state, &dlogits, &mut grads);
            (loss, count, grads)
        })
        .collect();

    let mut total_loss = 0.0;
    let mut total_count = 0usize;
    let mut grads = p.zeros_like();
    for (loss, count, g) in results {
        total_loss += loss;
        total_count += count;
        for (acc, x) in grads.iter_mut().zip(&g) {
            *acc += *x;
        }
    }
    if total_count == 0 {
        return Err(Error::EmptyLossMask);
    }
    let inv = S::from_f64(1.0 / total_count as f64);
    for g in grads.iter_mut() {
        *g *= inv;
    }
    Ok((total_loss / total_count as f64, grads))
}

/// Mean masked cross-entropy only (eval mode, no dropout).
pub fn batch_loss<S: Scalar>(p: &Parameters<S>, batch: &TrainBatch) -> Result<f64> {
    batch.validate(p.config.vocab_size, p.config.max_seq_len)?;
    let n = batch.seqs.len();
    let chunk_ids: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let results: Vec<(f64, usize)> = chunk_ids
        .par_iter()
        .map(|&c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let state = forward_chunk(p, &batch.seqs[lo..hi], None);
            let (loss, count, _) =
                loss_and_dlogits(&state, &batch.seqs[lo..hi], &batch.masks[lo..hi]);
            (loss, count)
        })
        .collect();
    let (loss, count) = results
        .into_iter()
        .fold((0.0, 0), |(l, c), (l2, c2)| (l + l2, c + c2));
    if count == 0 {
        return Err(Error::EmptyLossMask);
    }
    Ok(loss / count as f64)
}

/// Teacher-forced token accuracy over masked positions: fraction where the
/// argmax next-token prediction equals the actual next token.
pub fn batch_token_accuracy<S: Scalar>(
    p: &Parameters<S>,
    batch: &TrainBatch,
) -> Result<(usize, usize)> {
    batch.validate(p.config.vocab_size, p.config.max_seq_len)?;
    let n = batch.seqs.len();
    let t = batch.seqs[0].len();
    let v = p.config.vocab_size;
    let chunk_ids: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let results: Vec<(usize, usize)> = chunk_ids
        .par_iter()
        .map(|&c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let state = forward_chunk(p, &batch.seqs[lo..hi], None);
            let mut correct = 0usize;
            let mut total = 0usize;
            for bi in 0..hi - lo {
                for ti in 0..t - 1 {
                    if !batch.masks[lo + bi][ti] {
                        continue;
                    }
                    let row = &state.logits[(bi * t + ti) * v..(bi * t + ti + 1) * v];
                    let mut best = 0usize;
                    for (i, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = i;
                        }
                    }
                    total += 1;
                    if best as u32 == batch.seqs[lo + bi][ti + 1] {
                        correct += 1;
                    }
                }
            }
            (correct, total)
        })
        .collect();
    Ok(results
        .into_iter()
        .fold((0, 0), |(a, b), (c, d)| (a + c, b + d)))
}

/// Per-layer attention of the final input token plus logits at every
/// position, from a single eval-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Row-major (seq_len, vocab_size).
    pub logits: Vec<f64>,
    /// One head-averaged attention row per layer, each of length `seq_len`.
    pub attn: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Greedy token at a position; ties break toward the lowest token id.
    pub fn argmax_at(&self, pos: usize) -> u32 {
        let row = &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size];
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        best as u32
    }
}

pub fn forward<S: Scalar>(p: &Parameters<S>, tokens: &[u32]) -> Result<ForwardTrace> {
    if tokens.len() > p.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: p.config.max_seq_len,
        });
    }
    if tokens.is_empty() {
        return Err(Error::EmptyLossMask);
    }
    if let Some(&tok) = tokens
        .iter()
        .find(|&&tok| tok as usize >= p.config.vocab_size)
    {
        return Err(Error::TokenOutOfVocabulary(tok, p.config.vocab_size));
    }
    let t = tokens.len();
    let (nh, v) = (p.config.heads, p.config.vocab_size);
    let state = forward_chunk(p, &[tokens.to_vec()], None);
    let mut attn = Vec::with_capacity(p.config.layers);
    for st in &state.layers {
        let mut row = vec![0.0f64; t];
        for head in 0..nh {
            let base = head * t * t + (t - 1) * t;
            for j in 0..t {
                row[j] += st.probs[base + j].to_f64() / nh as f64;
            }
        }
        attn.push(row);
    }
    Ok(ForwardTrace {
        seq_len: t,
        vocab_size: v,
        logits: state.logits.iter().map(|x| x.to_f64()).collect(),
        attn,
    })
}

/// Greedy continuation of `input`: appends the argmax token until `eos` or
/// `max_new` tokens. Deterministic; ties break toward the lowest token id.
pub fn greedy_decode<S: Scalar>(
    p: &Parameters<S>,
    input: &[u32],
    max_new: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    let mut seq = input.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if seq.len() >= p.config.max_seq_len {
            break;
        }
        let trace = forward(p, &seq)?;
        let tok = trace.argmax_at(seq.len() - 1);
        out.push(tok);
        if tok == eos {
            break;
        }
        seq.push(tok);
    }
    Ok(out)
}

/// Argmax next token at the last position for a uniform batch of inputs.
/// This is the latent-mode prediction `v_pred` for every instance at once.
pub fn batch_last_argmax<S: Scalar>(p: &Parameters<S>, inputs: &[Vec<u32>]) -> Result<Vec<u32>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let t = inputs[0].len();
    if t > p.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: t,
            max: p.config.max_seq_len,
        });
    }
    let n = inputs.len();
    let v = p.config.vocab_size;
    let chunk_ids: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let results: Vec<Vec<u32>> = chunk_ids
        .par_iter()
        .map(|&c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let state = forward_chunk(p, &inputs[lo..hi], None);
            (0..hi - lo)
                .map(|bi| {
                    let row = &state.logits[(bi * t + t - 1) * v..(bi * t + t) * v];
                    let mut best = 0usize;
                    for (i, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = i;
                        }
                    }
                    best as u32
                })
                .collect()
        })
        .collect();
    Ok(results.into_iter().flatten().collect())
}

/// Batched greedy decode for a uniform batch: every sequence is extended
/// with its own argmax token each step; output is truncated at `eos`.
pub fn batch_greedy_decode<S: Scalar>(
    p: &Parameters<S>,
    inputs: &[Vec<u32>],
    max_new: usize,
    eos: u32,
) -> Result<Vec<Vec<u32>>> {
    let mut seqs: Vec<Vec<u32>> = inputs.to_vec();
    let mut outs: Vec<Vec<u32>> = vec![Vec::new(); inputs.len()];
    for _ in 0..max_new {
        if seqs.is_empty() || seqs[0].len() >= p.config.max_seq_len {
            break;
        }
        let next = batch_last_argmax(p, &seqs)?;
        for (i, &tok) in next.iter().enumerate() {
            outs[i].push(tok);
            seqs[i].push(tok);
        }
        if outs.iter().all(|o| o.contains(&eos)) {
            break;
        }
    }
    for o in outs.iter_mut() {
        if let Some(pos) = o.iter().position(|&t| t == eos) {
            o.truncate(pos + 1);
        }
    }
    Ok(outs)
}
