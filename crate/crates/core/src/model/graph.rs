//! Forward pass, exact backward pass and the single-step API.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, Axis};
use rand::Rng;

use super::{ModelError, ModelParams, LN_EPSILON};
use crate::encode::DataTable;
use crate::numeric::{matmul, Real};
use crate::tokenizer::{BOS, DELAY, PAD};

/// One training sequence. `target` ends with EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub table: DataTable,
    pub target: Vec<u32>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<F> {
    /// `[B, H]`
    pub h: Array2<F>,
    /// `[B, H]`, the layer-normalized cell.
    pub c: Array2<F>,
}

impl<F: Real> DecoderState<F> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        DecoderState { h: Array2::zeros((batch, hidden)), c: Array2::zeros((batch, hidden)) }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Softmax attention of `q` over the valid rows of `k`, writing the weighted
/// sum of `v` rows into `ctx`. Masked rows get weight exactly zero and are
/// never read. Returns false when no row is valid.
fn attend_rows<F: Real>(
    q: ArrayView1<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    valid: Option<&[bool]>,
    weights: &mut Vec<F>,
    mut ctx: ArrayViewMut1<F>,
) -> bool {
    let scale = F::one() / F::of(q.len() as f64).sqrt();
    let n = k.nrows();
    let ok = |r: usize| valid.is_none_or(|m| m[r]);
    weights.clear();
    weights.resize(n, F::zero());
    let mut max = F::neg_infinity();
    for r in (0..n).filter(|&r| ok(r)) {
        let sc = q.dot(&k.row(r)) * scale;
        weights[r] = sc;
        max = max.max(sc);
    }
    if max == F::neg_infinity() {
        return false;
    }
    let mut sum = F::zero();
    for r in (0..n).filter(|&r| ok(r)) {
        let e = (weights[r] - max).exp();
        weights[r] = e;
        sum += e;
    }
    ctx.fill(F::zero());
    for r in (0..n).filter(|&r| ok(r)) {
        weights[r] = weights[r] / sum;
        ctx.scaled_add(weights[r], &v.row(r));
    }
    true
}

/// Scaled dot-product attention for a batch: query `[B, W_k]`, keys
/// `[B, S, W_k]`, values `[B, S, W_v]`, mask `[B, S]`. Returns the context
/// `[B, W_v]` and the weights `[B, S]`.
pub fn attend<F: Real>(
    query: ArrayView2<F>,
    keys: ArrayView3<F>,
    values: ArrayView3<F>,
    mask: ArrayView2<bool>,
) -> Result<(Array2<F>, Array2<F>), ModelError> {
    let (b, rows) = (query.nrows(), keys.shape()[1]);
    if keys.shape()[0] != b || values.shape()[0] != b || values.shape()[1] != rows || mask.dim() != (b, rows) {
        return Err(ModelError::Shape("attention inputs disagree on batch or row count".into()));
    }
    if keys.shape()[2] != query.ncols() {
        return Err(ModelError::Shape("query and key widths differ".into()));
    }
    let mut ctx = Array2::zeros((b, values.shape()[2]));
    let mut weights = Array2::zeros((b, rows));
    let mut w = Vec::new();
    for i in 0..b {
        let valid: Vec<bool> = mask.row(i).to_vec();
        if !attend_rows(
            query.row(i),
            keys.index_axis(Axis(0), i),
            values.index_axis(Axis(0), i),
            Some(&valid),
            &mut w,
            ctx.row_mut(i),
        ) {
            return Err(ModelError::AllMasked(i));
        }
        weights.row_mut(i).assign(&ArrayView1::from(&w[..]));
    }
    Ok((ctx, weights))
}

struct KeyValues<'a, F> {
    k: ArrayView2<'a, F>,
    v: ArrayView2<'a, F>,
    valid: Option<Vec<bool>>,
}

/// Everything one recurrent step keeps for the backward pass.
struct StepCache<F> {
    /// `[B, W_v + E_sym + H]`: dropped-out `[context; embedding]`, then `h_prev`.
    input: Array2<F>,
    u_mask: Option<Array2<F>>,
    q: Array2<F>,
    attn: Vec<Vec<F>>,
    gate_hat: Array2<F>,
    gate_inv_std: Array2<F>,
    /// Post-activation gates `[i | f | o | g]`.
    acts: Array2<F>,
    c_hat: Array2<F>,
    c_inv_std: Array1<F>,
    c: Array2<F>,
    tanh_c: Array2<F>,
    h: Array2<F>,
}

/// Normalizes `x` in place; returns 1/σ.
fn layer_norm<F: Real>(x: &mut [F]) -> F {
    let n = F::of(x.len() as f64);
    let mean = x.iter().fold(F::zero(), |a, &b| a + b) / n;
    let var = x.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
    let inv = F::one() / (var + F::of(LN_EPSILON)).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) * inv;
    }
    inv
}

/// Gradient through normalization: `dhat` is replaced by d/dx.
fn layer_norm_back<F: Real>(dhat: &mut [F], hat: &[F], inv: F) {
    let n = F::of(dhat.len() as f64);
    let mean_d = dhat.iter().fold(F::zero(), |a, &b| a + b) / n;
    let mean_dh = dhat.iter().zip(hat).fold(F::zero(), |a, (&d, &h)| a + d * h) / n;
    for (d, &h) in dhat.iter_mut().zip(hat) {
        *d = inv * (*d - mean_d - h * mean_dh);
    }
}

fn step_core<F: Real>(
    p: &ModelParams<F>,
    h_prev: &Array2<F>,
    c_prev: &Array2<F>,
    symbols: &[u32],
    kv: &[KeyValues<F>],
    u_mask: Option<Array2<F>>,
) -> Result<StepCache<F>, ModelError> {
    let cfg = &p.config;
    let (b, h, wv, inw) = (symbols.len(), cfg.hidden, cfg.value_width, cfg.input_width());
    let q = matmul(&h_prev.view(), &p.wq.view());
    let mut input = Array2::zeros((b, inw + h));
    let mut attn = Vec::with_capacity(b);
    for i in 0..b {
        let mut w = Vec::new();
        let e = &kv[i];
        if !attend_rows(q.row(i), e.k, e.v, e.valid.as_deref(), &mut w, input.slice_mut(s![i, ..wv])) {
            return Err(ModelError::AllMasked(i));
        }
        attn.push(w);
        let sym = symbols[i] as usize;
        if sym >= p.embed.nrows() {
            return Err(ModelError::BadSymbol(symbols[i]));
        }
        input.slice_mut(s![i, wv..inw]).assign(&p.embed.row(sym));
    }
    if let Some(m) = &u_mask {
        let mut u = input.slice_mut(s![.., ..inw]);
        u *= m;
    }
    input.slice_mut(s![.., inw..]).assign(h_prev);

    let mut gate_hat = matmul(&input.view(), &p.w.view());
    let mut gate_inv_std = Array2::zeros((b, 4));
    let mut acts = Array2::zeros((b, 4 * h));
    let gain = p.gate_gain.row(0);
    let bias = p.gate_bias.row(0);
    for i in 0..b {
        let zrow = gate_hat.row_mut(i).into_slice().expect("standard layout");
        let arow = acts.row_mut(i).into_slice().expect("standard layout");
        for g in 0..4 {
            let seg = &mut zrow[g * h..(g + 1) * h];
            gate_inv_std[[i, g]] = layer_norm(seg);
            for j in 0..h {
                let a = gain[g * h + j] * seg[j] + bias[g * h + j];
                arow[g * h + j] = if g == 3 { a.tanh() } else { sigmoid(a) };
            }
        }
    }

    let mut c_hat = Array2::zeros((b, h));
    let mut c_inv_std = Array1::zeros(b);
    let mut c = Array2::zeros((b, h));
    let mut tanh_c = Array2::zeros((b, h));
    let mut hn = Array2::zeros((b, h));
    let (cg, cb) = (p.cell_gain.row(0), p.cell_bias.row(0));
    for i in 0..b {
        let a = acts.row(i);
        let row = c_hat.row_mut(i).into_slice().expect("standard layout");
        for j in 0..h {
            row[j] = a[h + j] * c_prev[[i, j]] + a[j] * a[3 * h + j];
        }
        c_inv_std[i] = layer_norm(row);
        for j in 0..h {
            let cv = cg[j] * row[j] + cb[j];
            let t = cv.tanh();
            c[[i, j]] = cv;
            tanh_c[[i, j]] = t;
            hn[[i, j]] = a[2 * h + j] * t;
        }
    }
    Ok(StepCache { input, u_mask, q, attn, gate_hat, gate_inv_std, acts, c_hat, c_inv_std, c, tanh_c, h: hn })
}

fn logits_of<F: Real>(p: &ModelParams<F>, h: &Array2<F>) -> Array2<F> {
    matmul(&h.view(), &p.wo.view()) + &p.bo
}

/// One decoder step on dense `[B, S, W]` keys and values. `prev` holds the
/// previous symbol of each batch element. No dropout.
pub fn step<F: Real>(
    state: &DecoderState<F>,
    prev: &[u32],
    keys: ArrayView3<F>,
    values: ArrayView3<F>,
    mask: ArrayView2<bool>,
    params: &ModelParams<F>,
) -> Result<(DecoderState<F>, Array2<F>), ModelError> {
    let b = prev.len();
    let cfg = &params.config;
    if state.h.dim() != (b, cfg.hidden) || state.c.dim() != (b, cfg.hidden) {
        return Err(ModelError::Shape("state does not match batch and hidden width".into()));
    }
    if keys.shape()[0] != b
        || values.shape()[0] != b
        || keys.shape()[2] != cfg.key_width
        || values.shape()[2] != cfg.value_width
        || mask.dim() != (b, keys.shape()[1])
        || values.shape()[1] != keys.shape()[1]
    {
        return Err(ModelError::Shape("keys, values and mask disagree with the model".into()));
    }
    let kv: Vec<KeyValues<F>> = (0..b)
        .map(|i| KeyValues {
            k: keys.index_axis(Axis(0), i),
            v: values.index_axis(Axis(0), i),
            valid: Some(mask.row(i).to_vec()),
        })
        .collect();
    let out = step_core(params, &state.h, &state.c, prev, &kv, None)?;
    let logits = logits_of(params, &out.h);
    Ok((DecoderState { h: out.h, c: out.c }, logits))
}

/// Table rows of a batch stacked into one matrix.
pub(crate) struct Encoded<F> {
    indices: Vec<[usize; 4]>,
    /// `(first row, row count)` per example.
    offsets: Vec<(usize, usize)>,
    x: Array2<F>,
    pub(crate) k: Array2<F>,
    pub(crate) v: Array2<F>,
}

impl<F: Real> Encoded<F> {
    pub(crate) fn new(p: &ModelParams<F>, tables: &[&DataTable]) -> Result<Self, ModelError> {
        let mut indices = Vec::new();
        let mut offsets = Vec::with_capacity(tables.len());
        for t in tables {
            let idx = p.encoder.indices(t)?;
            offsets.push((indices.len(), idx.len()));
            indices.extend(idx);
        }
        let x = p.encoder.gather(&indices);
        let k = x.dot(&p.encoder.wk);
        let v = x.dot(&p.encoder.wv);
        Ok(Encoded { indices, offsets, x, k, v })
    }

    fn key_values(&self) -> Vec<KeyValues<'_, F>> {
        self.offsets
            .iter()
            .map(|&(o, n)| KeyValues { k: self.k.slice(s![o..o + n, ..]), v: self.v.slice(s![o..o + n, ..]), valid: None })
            .collect()
    }
}

/// Recurrent state stepping over pre-encoded tables; used by greedy decoding.
pub(crate) struct Runner<'a, F> {
    params: &'a ModelParams<F>,
    enc: Encoded<F>,
    pub(crate) state: DecoderState<F>,
}

impl<'a, F: Real> Runner<'a, F> {
    pub(crate) fn new(params: &'a ModelParams<F>, tables: &[&DataTable]) -> Result<Self, ModelError> {
        let enc = Encoded::new(params, tables)?;
        let state = DecoderState::zeros(tables.len(), params.config.hidden);
        Ok(Runner { params, enc, state })
    }

    pub(crate) fn advance(&mut self, symbols: &[u32]) -> Result<Array2<F>, ModelError> {
        let kv = self.enc.key_values();
        let out = step_core(self.params, &self.state.h, &self.state.c, symbols, &kv, None)?;
        let logits = logits_of(self.params, &out.h);
        self.state = DecoderState { h: out.h, c: out.c };
        Ok(logits)
    }
}

/// Decoder input at step `t` for a target of length `n`.
pub(crate) fn input_symbol(delay: usize, target: &[u32], t: usize) -> u32 {
    if t < delay {
        DELAY
    } else if t == delay {
        BOS
    } else {
        target.get(t - delay - 1).copied().unwrap_or(PAD)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    /// `Σ_b w_b · Σ_t CE_{b,t} / N`, with N the number of target tokens.
    pub loss: f64,
    pub tokens: usize,
    /// Unweighted mean cross-entropy per token.
    pub mean_token_nll: f64,
}

pub(crate) struct Forward<F> {
    enc: Encoded<F>,
    steps: Vec<StepCache<F>>,
    h_masks: Vec<Option<Array2<F>>>,
    symbols: Vec<Vec<u32>>,
    /// `(t, b, target)` for every scored position.
    selected: Vec<(usize, usize, u32)>,
    hd: Array2<F>,
    probs: Array2<F>,
    weights: Vec<f64>,
    pub(crate) per_example_logprob: Vec<f64>,
    pub(crate) stats: LossStats,
}

fn dropout_mask<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Array2<F> {
    let keep = F::of(1.0 / (1.0 - rate));
    Array2::from_shape_fn((rows, cols), |_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
}

pub(crate) fn forward<F: Real, R: Rng + ?Sized>(
    p: &ModelParams<F>,
    batch: &[&TrainExample],
    dropout: f64,
    rng: &mut R,
) -> Result<Forward<F>, ModelError> {
    let cfg = &p.config;
    let (b, h, d) = (batch.len(), cfg.hidden, cfg.delay_steps);
    let tables: Vec<&DataTable> = batch.iter().map(|e| &e.table).collect();
    let enc = Encoded::new(p, &tables)?;
    let kv = enc.key_values();
    let t_max = batch.iter().map(|e| d + e.target.len()).max().unwrap_or(0);

    let mut steps: Vec<StepCache<F>> = Vec::with_capacity(t_max);
    let mut h_masks = Vec::with_capacity(t_max);
    let mut symbols = Vec::with_capacity(t_max);
    let zeros = Array2::zeros((b, h));
    for t in 0..t_max {
        let syms: Vec<u32> = batch.iter().map(|e| input_symbol(d, &e.target, t)).collect();
        let u_mask = (dropout > 0.0).then(|| dropout_mask(b, cfg.input_width(), dropout, rng));
        let h_mask = (dropout > 0.0).then(|| dropout_mask(b, h, dropout, rng));
        let (hp, cp) = match steps.last() {
            Some(s) => (&s.h, &s.c),
            None => (&zeros, &zeros),
        };
        let cache = step_core(p, hp, cp, &syms, &kv, u_mask)?;
        steps.push(cache);
        h_masks.push(h_mask);
        symbols.push(syms);
    }
    drop(kv);

    let mut selected = Vec::new();
    for (bi, e) in batch.iter().enumerate() {
        for (j, &y) in e.target.iter().enumerate() {
            if y as usize >= cfg.vocab() {
                return Err(ModelError::BadSymbol(y));
            }
            selected.push((d + j, bi, y));
        }
    }
    selected.sort_unstable();
    let mut hd = Array2::zeros((selected.len(), h));
    for (r, &(t, bi, _)) in selected.iter().enumerate() {
        let mut row = hd.row_mut(r);
        row.assign(&steps[t].h.row(bi));
        if let Some(m) = &h_masks[t] {
            row *= &m.row(bi);
        }
    }
    let mut probs = logits_of(p, &hd);
    let weights: Vec<f64> = batch.iter().map(|e| e.weight).collect();
    let mut per_example_logprob = vec![0.0; b];
    let (mut weighted, mut nll) = (0.0, 0.0);
    for (r, &(_, bi, y)) in selected.iter().enumerate() {
        let row = probs.row_mut(r).into_slice().expect("standard layout");
        let max = row.iter().fold(F::neg_infinity(), |a, &x| a.max(x));
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
        let lp = (row[y as usize].as_f64()).ln();
        let lp = if lp.is_finite() {
            lp
        } else {
            // probability underflowed; recover the log-softmax directly
            let logits = hd.row(r).dot(&p.wo.column(y as usize)) + p.bo[[0, y as usize]];
            (logits - max).as_f64() - sum.as_f64().ln()
        };
        per_example_logprob[bi] += lp;
        nll -= lp;
        weighted -= weights[bi] * lp;
    }
    let tokens = selected.len();
    let stats = LossStats {
        loss: if tokens > 0 { weighted / tokens as f64 } else { 0.0 },
        tokens,
        mean_token_nll: if tokens > 0 { nll / tokens as f64 } else { 0.0 },
    };
    Ok(Forward { enc, steps, h_masks, symbols, selected, hd, probs, weights, per_example_logprob, stats })
}

pub(crate) fn backward<F: Real>(p: &ModelParams<F>, fw: Forward<F>) -> ModelParams<F> {
    let cfg = &p.config;
    let (h, wv, inw) = (cfg.hidden, cfg.value_width, cfg.input_width());
    let b = fw.weights.len();
    let t_max = fw.steps.len();
    let mut g = p.zeros_like();
    if fw.selected.is_empty() {
        return g;
    }
    let n = F::of(fw.selected.len() as f64);

    let mut dlogits = fw.probs;
    for (r, &(_, bi, y)) in fw.selected.iter().enumerate() {
        let w = F::of(fw.weights[bi]) / n;
        let mut row = dlogits.row_mut(r);
        row[y as usize] -= F::one();
        row *= w;
    }
    g.wo = fw.hd.t().dot(&dlogits);
    g.bo = dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dhd = dlogits.dot(&p.wo.t());
    drop(dlogits);
    let mut dh_out: Vec<Array2<F>> = (0..t_max).map(|_| Array2::zeros((b, h))).collect();
    for (r, &(t, bi, _)) in fw.selected.iter().enumerate() {
        let mut row = dh_out[t].row_mut(bi);
        row += &dhd.row(r);
        if let Some(m) = &fw.h_masks[t] {
            row *= &m.row(bi);
        }
    }

    let scale = F::one() / F::of(cfg.key_width as f64).sqrt();
    let mut dk = Array2::<F>::zeros(fw.enc.k.raw_dim());
    let mut dv = Array2::<F>::zeros(fw.enc.v.raw_dim());
    let mut dz_all: Vec<Array2<F>> = Vec::with_capacity(t_max);
    let mut dq_all: Vec<Array2<F>> = Vec::with_capacity(t_max);
    let mut dh_next = Array2::<F>::zeros((b, h));
    let mut dc_next = Array2::<F>::zeros((b, h));
    let zeros = Array2::<F>::zeros((b, h));
    let (cg, gg) = (p.cell_gain.row(0), p.gate_gain.row(0));
    let w_t = p.w.t().as_standard_layout().into_owned();
    let wq_t = p.wq.t().as_standard_layout().into_owned();
    let mut dgain_cell = Array1::<F>::zeros(h);
    let mut dbias_cell = Array1::<F>::zeros(h);
    let mut dgain_gate = Array1::<F>::zeros(4 * h);
    let mut dbias_gate = Array1::<F>::zeros(4 * h);

    for t in (0..t_max).rev() {
        let st = &fw.steps[t];
        let c_prev = if t == 0 { &zeros } else { &fw.steps[t - 1].c };
        let mut dz = Array2::<F>::zeros((b, 4 * h));
        let mut dc_prev = Array2::<F>::zeros((b, h));
        for i in 0..b {
            let a = st.acts.row(i);
            let mut dcpre = vec![F::zero(); h];
            for j in 0..h {
                let dh = dh_out[t][[i, j]] + dh_next[[i, j]];
                let tc = st.tanh_c[[i, j]];
                let o = a[2 * h + j];
                dz[[i, 2 * h + j]] = dh * tc * o * (F::one() - o);
                let dc = dh * o * (F::one() - tc * tc) + dc_next[[i, j]];
                dgain_cell[j] += dc * st.c_hat[[i, j]];
                dbias_cell[j] += dc;
                dcpre[j] = dc * cg[j];
            }
            let chat = st.c_hat.row(i);
            layer_norm_back(&mut dcpre, chat.as_slice().expect("standard layout"), st.c_inv_std[i]);
            for j in 0..h {
                let (ig, fg, cand) = (a[j], a[h + j], a[3 * h + j]);
                let d = dcpre[j];
                dz[[i, j]] = d * cand * ig * (F::one() - ig);
                dz[[i, h + j]] = d * c_prev[[i, j]] * fg * (F::one() - fg);
                dz[[i, 3 * h + j]] = d * ig * (F::one() - cand * cand);
                dc_prev[[i, j]] = d * fg;
            }
            let zrow = dz.row_mut(i).into_slice().expect("standard layout");
            let hat = st.gate_hat.row(i);
            let hat = hat.as_slice().expect("standard layout");
            for gi in 0..4 {
                let range = gi * h..(gi + 1) * h;
                for j in range.clone() {
                    dgain_gate[j] += zrow[j] * hat[j];
                    dbias_gate[j] += zrow[j];
                    zrow[j] = zrow[j] * gg[j];
                }
                layer_norm_back(&mut zrow[range.clone()], &hat[range], st.gate_inv_std[[i, gi]]);
            }
        }
        let dinput = matmul(&dz.view(), &w_t.view());
        let mut du = dinput.slice(s![.., ..inw]).to_owned();
        if let Some(m) = &st.u_mask {
            du *= m;
        }
        let mut dq = Array2::<F>::zeros((b, cfg.key_width));
        for i in 0..b {
            let mut erow = g.embed.row_mut(fw.symbols[t][i] as usize);
            erow += &du.slice(s![i, wv..]);
            let dctx = du.slice(s![i, ..wv]);
            let (off, rows) = fw.enc.offsets[i];
            let w = &st.attn[i];
            let mut da = vec![F::zero(); rows];
            let mut mean = F::zero();
            for r in 0..rows {
                da[r] = dctx.dot(&fw.enc.v.row(off + r));
                dv.row_mut(off + r).scaled_add(w[r], &dctx);
                mean += w[r] * da[r];
            }
            let q = st.q.row(i);
            let mut dqi = dq.row_mut(i);
            for r in 0..rows {
                let ds = w[r] * (da[r] - mean) * scale;
                dqi.scaled_add(ds, &fw.enc.k.row(off + r));
                dk.row_mut(off + r).scaled_add(ds, &q);
            }
        }
        dh_next = dinput.slice(s![.., inw..]).to_owned() + matmul(&dq.view(), &wq_t.view());
        dc_next = dc_prev;
        dz_all.push(dz);
        dq_all.push(dq);
    }
    dz_all.reverse();
    dq_all.reverse();

    g.cell_gain.row_mut(0).assign(&dgain_cell);
    g.cell_bias.row_mut(0).assign(&dbias_cell);
    g.gate_gain.row_mut(0).assign(&dgain_gate);
    g.gate_bias.row_mut(0).assign(&dbias_gate);

    let inputs: Vec<_> = fw.steps.iter().map(|s| s.input.view()).collect();
    let dzs: Vec<_> = dz_all.iter().map(|a| a.view()).collect();
    let in_all = concatenate(Axis(0), &inputs).expect("uniform widths");
    let dz_cat = concatenate(Axis(0), &dzs).expect("uniform widths");
    g.w = in_all.t().dot(&dz_cat);

    let mut hprev: Vec<_> = vec![zeros.view()];
    hprev.extend(fw.steps[..t_max - 1].iter().map(|s| s.h.view()));
    let dqs: Vec<_> = dq_all.iter().map(|a| a.view()).collect();
    let hprev_all = concatenate(Axis(0), &hprev).expect("uniform widths");
    let dq_cat = concatenate(Axis(0), &dqs).expect("uniform widths");
    g.wq = hprev_all.t().dot(&dq_cat);

    let x = &fw.enc.x;
    g.encoder.wk = x.t().dot(&dk);
    g.encoder.wv = x.t().dot(&dv);
    let dx = dk.dot(&p.encoder.wk.t()) + dv.dot(&p.encoder.wv.t());
    let e = cfg.table_width;
    for (r, idx) in fw.enc.indices.iter().enumerate() {
        let tables = [&mut g.encoder.symbol, &mut g.encoder.arg, &mut g.encoder.ty, &mut g.encoder.pos];
        for (c, t) in tables.into_iter().enumerate() {
            let mut row = t.row_mut(idx[c]);
            row += &dx.slice(s![r, c * e..(c + 1) * e]);
        }
    }
    g
}

/// Weighted mean token cross-entropy under teacher forcing and its exact
/// gradient for the dropout masks drawn from `rng`.
pub fn loss_and_gradients<F: Real, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    batch: &[&TrainExample],
    dropout: f64,
    rng: &mut R,
) -> Result<(LossStats, ModelParams<F>), ModelError> {
    if !(0.0..1.0).contains(&dropout) {
        return Err(ModelError::Config(format!("dropout {dropout} outside [0, 1)")));
    }
    if let Some(e) = batch.iter().find(|e| !(e.weight >= 0.0 && e.weight.is_finite())) {
        return Err(ModelError::Config(format!("example weight {} must be finite and non-negative", e.weight)));
    }
    let fw = forward(params, batch, dropout, rng)?;
    let stats = fw.stats;
    Ok((stats, backward(params, fw)))
}
