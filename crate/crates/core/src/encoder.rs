//! Pre-LayerNorm transformer encoder with learned absolute positions and
//! hand-written backpropagation.
//!
//! Sequences are encoded one at a time at their true length, so padding
//! never enters attention. The encoder owns tensor indices
//! `0..EncoderConfig::n_tensors()` of a [`ParamSet`]; heads append after.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_position: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// 2 layers, hidden 64, 4 heads.
    pub fn detector(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            dropout: 0.1,
            max_position: 512,
            vocab_size,
        }
    }

    /// Half the detector's depth and width.
    pub fn mutator(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 1,
            hidden: 32,
            heads: 2,
            dropout: 0.1,
            max_position: 512,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_position == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidArgument("empty vocabulary or position table".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn(&self) -> usize {
        4 * self.hidden
    }

    pub fn n_tensors(&self) -> usize {
        4 + 12 * self.layers
    }

    /// Scalar count of the encoder tensors.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden;
        let block = 12 * h * h + 13 * h;
        (self.vocab_size + self.max_position) * h + self.layers * block + 2 * h
    }
}

/// Which output head sits on top of an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// One bugginess score per token: `w: H x 1`, `b: 1 x 1`.
    Detector,
    /// Candidate query projection: `W: H x H`, `b: 1 x H`.
    Mutator,
}

impl HeadKind {
    pub fn parameter_count(self, hidden: usize) -> usize {
        match self {
            HeadKind::Detector => hidden + 1,
            HeadKind::Mutator => hidden * hidden + hidden,
        }
    }
}

pub fn count_parameters(config: &EncoderConfig, head: HeadKind) -> usize {
    config.parameter_count() + head.parameter_count(config.hidden)
}

pub(crate) const TOK: usize = 0;
const POS: usize = 1;

mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const QKV_W: usize = 2;
    pub const QKV_B: usize = 3;
    pub const O_W: usize = 4;
    pub const O_B: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const FF1_W: usize = 8;
    pub const FF1_B: usize = 9;
    pub const FF2_W: usize = 10;
    pub const FF2_B: usize = 11;
}

fn at(layer: usize, slot: usize) -> usize {
    2 + 12 * layer + slot
}

/// Appends freshly initialized encoder tensors to an empty set.
pub fn init_params<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<ParamSet> {
    config.validate()?;
    let h = config.hidden;
    let f = config.ffn();
    let mut p = ParamSet::new();
    p.push_normal("tok_emb", (config.vocab_size, h), INIT_STD, rng);
    p.push_normal("pos_emb", (config.max_position, h), INIT_STD, rng);
    for l in 0..config.layers {
        p.push_filled(format!("l{l}.ln1.g"), (1, h), 1.0);
        p.push_filled(format!("l{l}.ln1.b"), (1, h), 0.0);
        p.push_normal(format!("l{l}.qkv.w"), (h, 3 * h), INIT_STD, rng);
        p.push_filled(format!("l{l}.qkv.b"), (1, 3 * h), 0.0);
        p.push_normal(format!("l{l}.o.w"), (h, h), INIT_STD, rng);
        p.push_filled(format!("l{l}.o.b"), (1, h), 0.0);
        p.push_filled(format!("l{l}.ln2.g"), (1, h), 1.0);
        p.push_filled(format!("l{l}.ln2.b"), (1, h), 0.0);
        p.push_normal(format!("l{l}.ff1.w"), (h, f), INIT_STD, rng);
        p.push_filled(format!("l{l}.ff1.b"), (1, f), 0.0);
        p.push_normal(format!("l{l}.ff2.w"), (f, h), INIT_STD, rng);
        p.push_filled(format!("l{l}.ff2.b"), (1, h), 0.0);
    }
    p.push_filled("lnf.g", (1, h), 1.0);
    p.push_filled("lnf.b", (1, h), 0.0);
    debug_assert_eq!(p.len(), config.n_tensors());
    Ok(p)
}

/// Dropout is applied only in `Train`, drawing from the given stream.
pub enum Mode<'a> {
    Infer,
    Train(&'a mut dyn RngCore),
}

/// Position ids `o..o+length`; `o` is uniform on `[0, max_position - length]`
/// when augmenting and 0 otherwise.
pub fn position_ids<R: Rng + ?Sized>(
    length: usize,
    rng: &mut R,
    augment: bool,
    max_position: usize,
) -> Result<Vec<usize>> {
    if length > max_position {
        return Err(Error::PositionOverflow {
            position: length,
            max: max_position,
        });
    }
    let offset = if augment {
        rng.gen_range(0..=max_position - length)
    } else {
        0
    };
    Ok((offset..offset + length).collect())
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    x_in: Array2<f64>,
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln2: LnCache,
    c: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

/// Activations retained by [`forward`] for [`backward`].
pub struct ForwardCache {
    ids: Vec<u32>,
    positions: Vec<usize>,
    drop0: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / n;
    let mut xhat = x - &mean.view().insert_axis(Axis(1));
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / n;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    xhat *= &rstd.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let n = dy.ncols() as f64;
    let m1 = dxhat.sum_axis(Axis(1)) / n;
    let m2 = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / n;
    let mut dx = dxhat - &m1.insert_axis(Axis(1)) - &(&cache.xhat * &m2.insert_axis(Axis(1)));
    dx *= &cache.rstd.view().insert_axis(Axis(1));
    dx
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
}

fn dropout_mask(shape: (usize, usize), p: f64, mode: &mut Mode<'_>) -> Option<Array2<f64>> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            Some(Array2::from_shape_simple_fn(shape, || {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            }))
        }
        _ => None,
    }
}

fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    a.dot(b)
}

/// `acc += a^T b`
fn acc_at_b(acc: &mut Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

fn acc_row_sum(acc: &mut Array2<f64>, d: &Array2<f64>) {
    *acc += &d.sum_axis(Axis(0)).insert_axis(Axis(0));
}

fn check_inputs(config: &EncoderConfig, ids: &[u32], positions: &[usize]) -> Result<()> {
    if ids.len() != positions.len() {
        return Err(Error::Shape(format!(
            "{} ids but {} positions",
            ids.len(),
            positions.len()
        )));
    }
    if ids.is_empty() {
        return Err(Error::Shape("empty sequence".into()));
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::UnknownId(id));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= config.max_position) {
        return Err(Error::PositionOverflow {
            position: p,
            max: config.max_position,
        });
    }
    Ok(())
}

/// Encodes one sequence, returning `n x hidden` states and the cache.
pub fn forward(
    config: &EncoderConfig,
    params: &ParamSet,
    ids: &[u32],
    positions: &[usize],
    mut mode: Mode<'_>,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_inputs(config, ids, positions)?;
    let n = ids.len();
    let h = config.hidden;
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let tok = params.get(TOK);
    let pos = params.get(POS);
    let mut x = Array2::zeros((n, h));
    for (i, (&id, &p)) in ids.iter().zip(positions).enumerate() {
        let mut row = x.row_mut(i);
        row += &tok.row(id as usize);
        row += &pos.row(p);
    }
    let drop0 = dropout_mask((n, h), config.dropout, &mut mode);
    if let Some(m) = &drop0 {
        x *= m;
    }
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let x_in = x.clone();
        let (a, ln1) = layer_norm(&x, params.get(at(l, slot::LN1_G)), params.get(at(l, slot::LN1_B)));
        let qkv = matmul(&a.view(), &params.get(at(l, slot::QKV_W)).view()) + params.get(at(l, slot::QKV_B));
        let mut o = Array2::zeros((n, h));
        let mut probs = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let q = qkv.slice(s![.., hd * d..(hd + 1) * d]);
            let k = qkv.slice(s![.., h + hd * d..h + (hd + 1) * d]);
            let v = qkv.slice(s![.., 2 * h + hd * d..2 * h + (hd + 1) * d]);
            let mut sc = q.dot(&k.t()) * scale;
            softmax_rows(&mut sc);
            o.slice_mut(s![.., hd * d..(hd + 1) * d]).assign(&sc.dot(&v));
            probs.push(sc);
        }
        let mut attn = matmul(&o.view(), &params.get(at(l, slot::O_W)).view()) + params.get(at(l, slot::O_B));
        let drop1 = dropout_mask((n, h), config.dropout, &mut mode);
        if let Some(m) = &drop1 {
            attn *= m;
        }
        x += &attn;
        let (c, ln2) = layer_norm(&x, params.get(at(l, slot::LN2_G)), params.get(at(l, slot::LN2_B)));
        let f = matmul(&c.view(), &params.get(at(l, slot::FF1_W)).view()) + params.get(at(l, slot::FF1_B));
        let g = f.mapv(gelu);
        let mut m = matmul(&g.view(), &params.get(at(l, slot::FF2_W)).view()) + params.get(at(l, slot::FF2_B));
        let drop2 = dropout_mask((n, h), config.dropout, &mut mode);
        if let Some(mask) = &drop2 {
            m *= mask;
        }
        x += &m;
        layers.push(LayerCache {
            x_in,
            ln1,
            a,
            qkv,
            probs,
            o,
            drop1,
            ln2,
            c,
            f,
            g,
            drop2,
        });
    }
    let lnf_g = config.n_tensors() - 2;
    let (y, lnf) = layer_norm(&x, params.get(lnf_g), params.get(lnf_g + 1));
    Ok((
        y,
        ForwardCache {
            ids: ids.to_vec(),
            positions: positions.to_vec(),
            drop0,
            layers,
            lnf,
        },
    ))
}

/// Accumulates parameter gradients of a scalar loss given `d_out = dL/dy`.
pub fn backward(
    config: &EncoderConfig,
    params: &ParamSet,
    cache: &ForwardCache,
    d_out: &Array2<f64>,
    grads: &mut ParamSet,
) {
    let h = config.hidden;
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let n = d_out.nrows();
    let lnf_g = config.n_tensors() - 2;
    let mut dx = {
        let (dg, db) = two_mut(grads, lnf_g, lnf_g + 1);
        layer_norm_backward(d_out, &cache.lnf, params.get(lnf_g), dg, db)
    };
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        // x_out = x_mid + drop2 * ffn(ln2(x_mid))
        let mut dm = dx.clone();
        if let Some(mask) = &lc.drop2 {
            dm *= mask;
        }
        acc_at_b(grads.get_mut(at(l, slot::FF2_W)), &lc.g, &dm);
        acc_row_sum(grads.get_mut(at(l, slot::FF2_B)), &dm);
        let mut df = dm.dot(&params.get(at(l, slot::FF2_W)).t());
        df.zip_mut_with(&lc.f, |dv, &fv| *dv *= gelu_grad(fv));
        acc_at_b(grads.get_mut(at(l, slot::FF1_W)), &lc.c, &df);
        acc_row_sum(grads.get_mut(at(l, slot::FF1_B)), &df);
        let dc = df.dot(&params.get(at(l, slot::FF1_W)).t());
        {
            let (dg, db) = two_mut(grads, at(l, slot::LN2_G), at(l, slot::LN2_B));
            dx += &layer_norm_backward(&dc, &lc.ln2, params.get(at(l, slot::LN2_G)), dg, db);
        }
        // x_mid = x_in + drop1 * attn(ln1(x_in))
        let mut dattn = dx.clone();
        if let Some(mask) = &lc.drop1 {
            dattn *= mask;
        }
        acc_at_b(grads.get_mut(at(l, slot::O_W)), &lc.o, &dattn);
        acc_row_sum(grads.get_mut(at(l, slot::O_B)), &dattn);
        let d_o = dattn.dot(&params.get(at(l, slot::O_W)).t());
        let mut dqkv = Array2::zeros((n, 3 * h));
        for hd in 0..config.heads {
            let cols = hd * d..(hd + 1) * d;
            let q = lc.qkv.slice(s![.., cols.clone()]);
            let k = lc.qkv.slice(s![.., h + cols.start..h + cols.end]);
            let v = lc.qkv.slice(s![.., 2 * h + cols.start..2 * h + cols.end]);
            let p = &lc.probs[hd];
            let d_oh = d_o.slice(s![.., cols.clone()]);
            let dp = d_oh.dot(&v.t());
            let dv = p.t().dot(&d_oh);
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = p * &(dp - &row_dot) * scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
            dqkv.slice_mut(s![.., h + cols.start..h + cols.end]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * h + cols.start..2 * h + cols.end]).assign(&dv);
        }
        acc_at_b(grads.get_mut(at(l, slot::QKV_W)), &lc.a, &dqkv);
        acc_row_sum(grads.get_mut(at(l, slot::QKV_B)), &dqkv);
        let da = dqkv.dot(&params.get(at(l, slot::QKV_W)).t());
        let (dg, db) = two_mut(grads, at(l, slot::LN1_G), at(l, slot::LN1_B));
        dx += &layer_norm_backward(&da, &lc.ln1, params.get(at(l, slot::LN1_G)), dg, db);
        debug_assert_eq!(lc.x_in.nrows(), n);
    }
    if let Some(mask) = &cache.drop0 {
        dx *= mask;
    }
    let (dtok, dpos) = two_mut(grads, TOK, POS);
    for (i, (&id, &p)) in cache.ids.iter().zip(&cache.positions).enumerate() {
        let row = dx.row(i);
        let mut t = dtok.row_mut(id as usize);
        t += &row;
        let mut q = dpos.row_mut(p);
        q += &row;
    }
}

/// Mutable access to two distinct tensors, `i < j`.
pub(crate) fn two_mut(p: &mut ParamSet, i: usize, j: usize) -> (&mut Array2<f64>, &mut Array2<f64>) {
    debug_assert!(i < j);
    let (head, tail) = split_tensors(p, j);
    (&mut head[i], &mut tail[0])
}

fn split_tensors(p: &mut ParamSet, at: usize) -> (&mut [Array2<f64>], &mut [Array2<f64>]) {
    p.tensors_mut().split_at_mut(at)
}

/// Per-sequence hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden_states: Vec<Array2<f64>>,
}

/// Right-pads sequences with `pad` into a `batch x max_len` matrix.
pub fn pad_batch(seqs: &[Vec<u32>], pad: u32) -> (Array2<u32>, Vec<usize>) {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Array2::from_elem((seqs.len(), width), pad);
    for (r, s) in seqs.iter().enumerate() {
        for (c, &id) in s.iter().enumerate() {
            ids[(r, c)] = id;
        }
    }
    (ids, seqs.iter().map(Vec::len).collect())
}

/// Encodes a padded batch. Row `r` contributes only its first `lengths[r]`
/// columns; positions are given per sequence.
pub fn encode_batch(
    config: &EncoderConfig,
    params: &ParamSet,
    ids: &Array2<u32>,
    lengths: &[usize],
    positions: &[Vec<usize>],
    mut mode: Mode<'_>,
) -> Result<EncoderOutput> {
    if ids.nrows() != lengths.len() || lengths.len() != positions.len() {
        return Err(Error::Shape("batch rows, lengths and positions disagree".into()));
    }
    let mut hidden_states = Vec::with_capacity(lengths.len());
    for (r, (&len, pos)) in lengths.iter().zip(positions).enumerate() {
        if len > ids.ncols() {
            return Err(Error::Shape(format!("length {len} exceeds padded width {}", ids.ncols())));
        }
        let row: Vec<u32> = ids.slice(s![r, ..len]).to_vec();
        let m = match &mut mode {
            Mode::Infer => Mode::Infer,
            Mode::Train(rng) => Mode::Train(&mut **rng),
        };
        hidden_states.push(forward(config, params, &row, pos, m)?.0);
    }
    Ok(EncoderOutput { hidden_states })
}
