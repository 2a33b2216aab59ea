//! Simple recurrent units, their bidirectional and stacked forms, and the
//! LSTM/GRU layers used as latency baselines and in the answer layer.
//!
//! An SRU layer splits cleanly into two halves. The three input projections
//! (`x̃ = xW`, `f = σ(xW_f + b_f)`, `r = σ(xW_r + b_r)`) depend only on the
//! input, so they are computed for all time steps with one matrix product
//! each. The only sequential work left is the elementwise state update
//! `c_t = f_t ⊙ c_{t-1} + (1 - f_t) ⊙ x̃_t`, after which the highway output
//! `h_t = r_t ⊙ tanh(c_t) + (1 - r_t) ⊙ x_t` is again fully parallel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

fn init_matrix<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> ParamId {
    let bound = (1.0 / rows as f64).sqrt();
    store.add(name, Tensor::uniform(&[rows, cols], bound, rng).with_grad(true))
}

fn init_bias(store: &mut ParamStore, name: String, cols: usize) -> ParamId {
    store.add(name, Tensor::zeros(&[1, cols]).with_grad(true))
}

/// Validity mask over time steps. Valid steps must form a prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqMask(Vec<bool>);

impl SeqMask {
    pub fn new(valid: Vec<bool>) -> Self {
        SeqMask(valid)
    }

    /// `len` valid steps followed by `total - len` padding steps.
    pub fn prefix(len: usize, total: usize) -> Self {
        SeqMask((0..total).map(|i| i < len).collect())
    }

    pub fn all(total: usize) -> Self {
        SeqMask(vec![true; total])
    }

    pub fn total(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// Number of valid steps; fails if a valid step follows a padded one.
    pub fn valid_len(&self) -> Result<usize> {
        let len = self.0.iter().take_while(|&&v| v).count();
        if self.0[len..].iter().any(|&v| v) {
            return Err(Error::Contract(
                "sequence mask must mark a contiguous prefix".into(),
            ));
        }
        Ok(len)
    }

    /// Row-major `rows × total` softmax mask with this mask on every row.
    pub fn broadcast_rows(&self, rows: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(rows * self.0.len());
        for _ in 0..rows {
            m.extend_from_slice(&self.0);
        }
        m
    }
}

/// Analytic work counts for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub matmuls: usize,
    pub sequential_steps: usize,
}

impl std::ops::Add for OpCount {
    type Output = OpCount;
    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            matmuls: self.matmuls + o.matmuls,
            sequential_steps: self.sequential_steps + o.sequential_steps,
        }
    }
}

// ---------------------------------------------------------------------------
// SRU

#[derive(Debug, Clone)]
pub struct SruLayerParams {
    pub w: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_r: ParamId,
    pub b_r: ParamId,
    /// Highway projection, present exactly when `d_in != d_h`.
    pub w_res: Option<ParamId>,
    pub d_in: usize,
    pub d_h: usize,
}

impl SruLayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        SruLayerParams {
            w: init_matrix(store, format!("{prefix}.w"), d_in, d_h, rng),
            w_f: init_matrix(store, format!("{prefix}.w_f"), d_in, d_h, rng),
            b_f: init_bias(store, format!("{prefix}.b_f"), d_h),
            w_r: init_matrix(store, format!("{prefix}.w_r"), d_in, d_h, rng),
            b_r: init_bias(store, format!("{prefix}.b_r"), d_h),
            w_res: (d_in != d_h)
                .then(|| init_matrix(store, format!("{prefix}.w_res"), d_in, d_h, rng)),
            d_in,
            d_h,
        }
    }

    pub fn op_count(&self, steps: usize) -> OpCount {
        OpCount {
            matmuls: 3 + usize::from(self.w_res.is_some()),
            sequential_steps: steps,
        }
    }
}

/// Final cell state and output of a recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

pub struct SruOutput {
    /// `T×d_h` outputs.
    pub h: Var,
    /// `1×d_h` final cell state.
    pub c_last: Var,
}

/// How the input-side products are formed. `PerStep` exists to show that
/// hoisting them out of the time loop does not change the result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Batched,
    PerStep,
}

pub fn sru_forward(tape: &Tape<'_>, p: &SruLayerParams, x: Var, c0: Option<Var>) -> Result<SruOutput> {
    sru_forward_with(tape, p, x, c0, Projection::Batched)
}

pub fn sru_forward_with(
    tape: &Tape<'_>,
    p: &SruLayerParams,
    x: Var,
    c0: Option<Var>,
    projection: Projection,
) -> Result<SruOutput> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != p.d_in {
        return Err(Error::dim("sru_forward", &shape, &[shape[0], p.d_in]));
    }
    if shape[0] == 0 {
        return Err(Error::Contract("sru_forward needs at least one step".into()));
    }
    let c0 = match c0 {
        Some(c) => c,
        None => tape.zeros(&[1, p.d_h]),
    };
    let (w, w_f, w_r) = (tape.param(p.w)?, tape.param(p.w_f)?, tape.param(p.w_r)?);
    let project = |m: Var| -> Result<Var> {
        match projection {
            Projection::Batched => tape.matmul(x, m),
            Projection::PerStep => {
                let rows = (0..shape[0])
                    .map(|t| tape.matmul(tape.slice_rows(x, t, t + 1)?, m))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&rows)
            }
        }
    };
    let candidate = project(w)?;
    let forget = tape.sigmoid(tape.add_row(project(w_f)?, tape.param(p.b_f)?)?)?;
    let reset = tape.sigmoid(tape.add_row(project(w_r)?, tape.param(p.b_r)?)?)?;
    let highway = match p.w_res {
        Some(id) => project(tape.param(id)?)?,
        None => x,
    };

    let c = tape.sru_recurrence(candidate, forget, c0)?;

    let gated = tape.mul(reset, tape.tanh(c)?)?;
    let carry = tape.mul(tape.one_minus(reset)?, highway)?;
    let h = tape.add(gated, carry)?;
    let c_last = tape.slice_rows(c, shape[0] - 1, shape[0])?;
    Ok(SruOutput { h, c_last })
}

// ---------------------------------------------------------------------------
// Bidirectional wrappers

/// Runs `fwd` over the valid prefix and `bwd` over its time reversal,
/// concatenates features per step, and zero-fills padded steps.
fn bidirectional<F, B>(tape: &Tape<'_>, x: Var, mask: &SeqMask, fwd: F, bwd: B) -> Result<Var>
where
    F: Fn(Var) -> Result<Var>,
    B: Fn(Var) -> Result<Var>,
{
    let total = tape.rows(x);
    if mask.total() != total {
        return Err(Error::dim("bidirectional mask", &[total], &[mask.total()]));
    }
    let len = mask.valid_len()?;
    if len == 0 {
        return Err(Error::Degenerate("sequence has no valid steps".into()));
    }
    let valid = tape.slice_rows(x, 0, len)?;
    let forward = fwd(valid)?;
    let backward = tape.reverse_rows(bwd(tape.reverse_rows(valid)?)?)?;
    let both = tape.concat_cols(&[forward, backward])?;
    if len == total {
        Ok(both)
    } else {
        let pad = tape.zeros(&[total - len, tape.cols(both)]);
        tape.concat_rows(&[both, pad])
    }
}

#[derive(Debug, Clone)]
pub struct BiSruParams {
    pub fwd: SruLayerParams,
    pub bwd: SruLayerParams,
}

impl BiSruParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        BiSruParams {
            fwd: SruLayerParams::init(store, &format!("{prefix}.fwd"), d_in, d_h, rng),
            bwd: SruLayerParams::init(store, &format!("{prefix}.bwd"), d_in, d_h, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.d_h
    }
}

/// `T×2d_h` bidirectional SRU output; padded steps are zero.
pub fn bi_sru(tape: &Tape<'_>, p: &BiSruParams, x: Var, mask: &SeqMask) -> Result<Var> {
    bidirectional(
        tape,
        x,
        mask,
        |v| Ok(sru_forward(tape, &p.fwd, v, None)?.h),
        |v| Ok(sru_forward(tape, &p.bwd, v, None)?.h),
    )
}

/// Stack of bidirectional SRU layers with variational input dropout.
#[derive(Debug, Clone)]
pub struct StackedBiSru {
    pub layers: Vec<BiSruParams>,
    pub dropout: f64,
}

impl StackedBiSru {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        n_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                let input = if i == 0 { d_in } else { 2 * d_h };
                BiSruParams::init(store, &format!("{prefix}.{i}"), input, d_h, rng)
            })
            .collect();
        StackedBiSru { layers, dropout }
    }

    /// Checks that each layer consumes the previous layer's output width.
    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].output_dim() != pair[1].fwd.d_in {
                return Err(Error::Config(format!(
                    "stacked layer expects input {} but previous layer emits {}",
                    pair[1].fwd.d_in,
                    pair[0].output_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fwd.d_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, BiSruParams::output_dim)
    }

    pub fn forward(&self, tape: &Tape<'_>, x: Var, mask: &SeqMask) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let width = tape.cols(h);
            if width != layer.fwd.d_in {
                return Err(Error::dim("stacked_bi_sru", &[width], &[layer.fwd.d_in]));
            }
            let dropped = tape.dropout(h, self.dropout, true)?;
            h = bi_sru(tape, layer, dropped, mask)?;
        }
        Ok(h)
    }

    pub fn op_count(&self, steps: usize) -> OpCount {
        self.layers
            .iter()
            .map(|l| l.fwd.op_count(steps) + l.bwd.op_count(steps))
            .fold(OpCount { matmuls: 0, sequential_steps: 0 }, |a, b| a + b)
    }
}

// ---------------------------------------------------------------------------
// LSTM

#[derive(Debug, Clone)]
pub struct LstmParams {
    /// `d_in × 4d_h`, gate order input, forget, cell, output.
    pub w_x: ParamId,
    /// `d_h × 4d_h`.
    pub w_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        LstmParams {
            w_x: init_matrix(store, format!("{prefix}.w_x"), d_in, 4 * d_h, rng),
            w_h: init_matrix(store, format!("{prefix}.w_h"), d_h, 4 * d_h, rng),
            b: init_bias(store, format!("{prefix}.b"), 4 * d_h),
            d_in,
            d_h,
        }
    }

    /// One batched input projection, then one recurrent product per step.
    pub fn op_count(&self, steps: usize) -> OpCount {
        OpCount {
            matmuls: 1 + steps,
            sequential_steps: steps,
        }
    }
}

/// `T×d_h` LSTM outputs from zero initial state.
pub fn lstm_forward(tape: &Tape<'_>, p: &LstmParams, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != p.d_in {
        return Err(Error::dim("lstm_forward", &shape, &[shape[0], p.d_in]));
    }
    let d = p.d_h;
    let w_h = tape.param(p.w_h)?;
    let gates_x = tape.add_row(tape.matmul(x, tape.param(p.w_x)?)?, tape.param(p.b)?)?;
    let mut h = tape.zeros(&[1, d]);
    let mut c = tape.zeros(&[1, d]);
    let mut outputs = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let g = tape.add(tape.slice_rows(gates_x, t, t + 1)?, tape.matmul(h, w_h)?)?;
        let i = tape.sigmoid(tape.slice_cols(g, 0, d)?)?;
        let f = tape.sigmoid(tape.slice_cols(g, d, 2 * d)?)?;
        let cand = tape.tanh(tape.slice_cols(g, 2 * d, 3 * d)?)?;
        let o = tape.sigmoid(tape.slice_cols(g, 3 * d, 4 * d)?)?;
        c = tape.add(tape.mul(f, c)?, tape.mul(i, cand)?)?;
        h = tape.mul(o, tape.tanh(c)?)?;
        outputs.push(h);
    }
    tape.concat_rows(&outputs)
}

#[derive(Debug, Clone)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        BiLstmParams {
            fwd: LstmParams::init(store, &format!("{prefix}.fwd"), d_in, d_h, rng),
            bwd: LstmParams::init(store, &format!("{prefix}.bwd"), d_in, d_h, rng),
        }
    }
}

pub fn bi_lstm(tape: &Tape<'_>, p: &BiLstmParams, x: Var, mask: &SeqMask) -> Result<Var> {
    bidirectional(
        tape,
        x,
        mask,
        |v| lstm_forward(tape, &p.fwd, v),
        |v| lstm_forward(tape, &p.bwd, v),
    )
}

// ---------------------------------------------------------------------------
// GRU

#[derive(Debug, Clone)]
pub struct GruParams {
    /// `d_in × 3d_h`, gate order reset, update, candidate.
    pub w_i: ParamId,
    /// `d_h × 3d_h`.
    pub w_h: ParamId,
    pub b_i: ParamId,
    pub b_h: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl GruParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        GruParams {
            w_i: init_matrix(store, format!("{prefix}.w_i"), d_in, 3 * d_h, rng),
            w_h: init_matrix(store, format!("{prefix}.w_h"), d_h, 3 * d_h, rng),
            b_i: init_bias(store, format!("{prefix}.b_i"), 3 * d_h),
            b_h: init_bias(store, format!("{prefix}.b_h"), 3 * d_h),
            d_in,
            d_h,
        }
    }

    pub fn op_count(&self, steps: usize) -> OpCount {
        OpCount {
            matmuls: 1 + steps,
            sequential_steps: steps,
        }
    }
}

/// Combines precomputed input-side (`gi`) and hidden-side (`gh`) gate
/// pre-activations, both `1×3d`, into the next hidden state.
fn gru_combine(tape: &Tape<'_>, d: usize, gi: Var, gh: Var, hidden: Var) -> Result<Var> {
    let r = tape.sigmoid(tape.add(tape.slice_cols(gi, 0, d)?, tape.slice_cols(gh, 0, d)?)?)?;
    let z = tape.sigmoid(tape.add(tape.slice_cols(gi, d, 2 * d)?, tape.slice_cols(gh, d, 2 * d)?)?)?;
    let n = tape.tanh(tape.add(
        tape.slice_cols(gi, 2 * d, 3 * d)?,
        tape.mul(r, tape.slice_cols(gh, 2 * d, 3 * d)?)?,
    )?)?;
    // (1 - z) ⊙ n + z ⊙ h
    tape.add(tape.mul(tape.one_minus(z)?, n)?, tape.mul(z, hidden)?)
}

/// One GRU step: `input` is `1×d_in`, `hidden` is `1×d_h`.
pub fn gru_cell(tape: &Tape<'_>, p: &GruParams, input: Var, hidden: Var) -> Result<Var> {
    let (si, sh) = (tape.shape(input), tape.shape(hidden));
    if si != [1, p.d_in] {
        return Err(Error::dim("gru_cell input", &si, &[1, p.d_in]));
    }
    if sh != [1, p.d_h] {
        return Err(Error::dim("gru_cell hidden", &sh, &[1, p.d_h]));
    }
    let gi = tape.add_row(tape.matmul(input, tape.param(p.w_i)?)?, tape.param(p.b_i)?)?;
    let gh = tape.add_row(tape.matmul(hidden, tape.param(p.w_h)?)?, tape.param(p.b_h)?)?;
    gru_combine(tape, p.d_h, gi, gh, hidden)
}

/// `T×d_h` GRU outputs from a zero initial state.
pub fn gru_forward(tape: &Tape<'_>, p: &GruParams, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != p.d_in {
        return Err(Error::dim("gru_forward", &shape, &[shape[0], p.d_in]));
    }
    let d = p.d_h;
    let (w_h, b_h) = (tape.param(p.w_h)?, tape.param(p.b_h)?);
    let gates_x = tape.add_row(tape.matmul(x, tape.param(p.w_i)?)?, tape.param(p.b_i)?)?;
    let mut h = tape.zeros(&[1, d]);
    let mut outputs = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let gh = tape.add_row(tape.matmul(h, w_h)?, b_h)?;
        h = gru_combine(tape, d, tape.slice_rows(gates_x, t, t + 1)?, gh, h)?;
        outputs.push(h);
    }
    tape.concat_rows(&outputs)
}

/// Sequence encoder used by the model's recurrent blocks.
#[derive(Debug, Clone)]
pub enum SeqEncoder {
    Sru(StackedBiSru),
    Lstm { layers: Vec<BiLstmParams>, dropout: f64 },
}

impl SeqEncoder {
    pub fn forward(&self, tape: &Tape<'_>, x: Var, mask: &SeqMask) -> Result<Var> {
        match self {
            SeqEncoder::Sru(s) => s.forward(tape, x, mask),
            SeqEncoder::Lstm { layers, dropout } => {
                let mut h = x;
                for layer in layers {
                    let dropped = tape.dropout(h, *dropout, true)?;
                    h = bi_lstm(tape, layer, dropped, mask)?;
                }
                Ok(h)
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SeqEncoder::Sru(s) => s.input_dim(),
            SeqEncoder::Lstm { layers, .. } => layers[0].fwd.d_in,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            SeqEncoder::Sru(s) => s.output_dim(),
            SeqEncoder::Lstm { layers, .. } => layers.last().map_or(0, |l| 2 * l.fwd.d_h),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SeqEncoder::Sru(s) => s.validate(),
            SeqEncoder::Lstm { layers, .. } => {
                for pair in layers.windows(2) {
                    if 2 * pair[0].fwd.d_h != pair[1].fwd.d_in {
                        return Err(Error::Config("stacked LSTM widths do not chain".into()));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Runs a plain SRU forward pass without recording gradients and returns the
/// outputs together with the final state.
pub fn sru_infer(store: &ParamStore, p: &SruLayerParams, x: &Tensor) -> Result<(Tensor, RecurrentState)> {
    let tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    let out = sru_forward(&tape, p, xv, None)?;
    let h = tape.value(out.h);
    let c = tape.data(out.c_last);
    let last = h.row(h.rows() - 1).to_vec();
    Ok((h, RecurrentState { c, h: last }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Naive per-timestep scalar-loop SRU.
    fn sru_oracle(store: &ParamStore, p: &SruLayerParams, x: &Tensor) -> Vec<Vec<f64>> {
        let at = |id: ParamId, i: usize, j: usize| store.get(id).get(i, j);
        let mut c = vec![0.0; p.d_h];
        let mut out = Vec::new();
        for t in 0..x.rows() {
            let mut h = vec![0.0; p.d_h];
            for j in 0..p.d_h {
                let (mut xt, mut f, mut r, mut hw) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..p.d_in {
                    let xi = x.get(t, i);
                    xt += xi * at(p.w, i, j);
                    f += xi * at(p.w_f, i, j);
                    r += xi * at(p.w_r, i, j);
                    if let Some(res) = p.w_res {
                        hw += xi * at(res, i, j);
                    }
                }
                if p.w_res.is_none() {
                    hw = x.get(t, j);
                }
                let f = sigmoid(f + at(p.b_f, 0, j));
                let r = sigmoid(r + at(p.b_r, 0, j));
                c[j] = f * c[j] + (1.0 - f) * xt;
                h[j] = r * c[j].tanh() + (1.0 - r) * hw;
            }
            out.push(h);
        }
        out
    }

    fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).contains(".b") {
                let shape = store.get(id).shape().to_vec();
                let t = Tensor::uniform(&shape, 0.5, rng).with_grad(true);
                *store.get_mut(id) = t;
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SruLayerParams::init(&mut store, "sru", 3, 3, &mut rng);
        let (h, state) = sru_infer(&store, &p, &Tensor::zeros(&[4, 3])).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(state.c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(d_in, d_h) in &[(3, 3), (5, 3), (1, 1)] {
            let mut store = ParamStore::new();
            let p = SruLayerParams::init(&mut store, "sru", d_in, d_h, &mut rng);
            randomize_biases(&mut store, &mut rng);
            for t in [1, 4] {
                let x = Tensor::uniform(&[t, d_in], 1.0, &mut rng);
                let (h, state) = sru_infer(&store, &p, &x).unwrap();
                let oracle = sru_oracle(&store, &p, &x);
                for (r, row) in oracle.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        assert!((h.get(r, j) - v).abs() < 1e-12);
                    }
                }
                assert_eq!(state.h, h.row(t - 1));
            }
        }
    }

    #[test]
    fn batched_and_per_step_projection_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = SruLayerParams::init(&mut store, "sru", 6, 4, &mut rng);
        let x = Tensor::uniform(&[9, 6], 1.0, &mut rng);
        let tape = Tape::with_params(&store);
        let xv = tape.constant(x);
        let a = tape.data(sru_forward_with(&tape, &p, xv, None, Projection::Batched).unwrap().h);
        let b = tape.data(sru_forward_with(&tape, &p, xv, None, Projection::PerStep).unwrap().h);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_projection_presence() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(SruLayerParams::init(&mut store, "a", 4, 4, &mut rng).w_res.is_none());
        assert!(SruLayerParams::init(&mut store, "b", 5, 4, &mut rng).w_res.is_some());
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SruLayerParams::init(&mut store, "a", 4, 4, &mut rng);
        let tape = Tape::with_params(&store);
        let x = tape.zeros(&[3, 5]);
        assert!(matches!(sru_forward(&tape, &p, x, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mask_must_be_a_prefix() {
        assert_eq!(SeqMask::prefix(2, 4).valid_len().unwrap(), 2);
        assert!(SeqMask::new(vec![true, false, true]).valid_len().is_err());
    }

    #[test]
    fn bi_sru_reversal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = BiSruParams::init(&mut store, "bi", 3, 2, &mut rng);
        // Same weights in both directions makes reversal swap the halves.
        let swapped = BiSruParams { fwd: p.fwd.clone(), bwd: p.fwd.clone() };
        let x = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let tape = Tape::with_params(&store);
        let xv = tape.constant(x);
        let mask = SeqMask::all(5);
        let out = tape.value(bi_sru(&tape, &swapped, xv, &mask).unwrap());
        let rev = tape.value(bi_sru(&tape, &swapped, tape.reverse_rows(xv).unwrap(), &mask).unwrap());
        for t in 0..5 {
            assert_eq!(&out.row(t)[..2], &rev.row(4 - t)[2..]);
            assert_eq!(&out.row(t)[2..], &rev.row(4 - t)[..2]);
        }
    }

    #[test]
    fn padded_steps_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let p = BiSruParams::init(&mut store, "bi", 3, 2, &mut rng);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let junk = Tensor::uniform(&[2, 3], 5.0, &mut rng);
        let tape = Tape::with_params(&store);
        let xv = tape.constant(x);
        let padded = tape.concat_rows(&[xv, tape.constant(junk)]).unwrap();
        let a = tape.value(bi_sru(&tape, &p, xv, &SeqMask::all(4)).unwrap());
        let b = tape.value(bi_sru(&tape, &p, padded, &SeqMask::prefix(4, 6)).unwrap());
        assert_eq!(a.data(), &b.data()[..16]);
        assert!(b.data()[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stacked_width_is_twice_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let s = StackedBiSru::init(&mut store, "s", 624, 125, 2, 0.2, &mut rng);
        s.validate().unwrap();
        assert_eq!(s.output_dim(), 250);
        assert_eq!(s.layers[1].fwd.d_in, 250);
    }

    #[test]
    fn stacked_equals_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let s = StackedBiSru::init(&mut store, "s", 3, 2, 2, 0.2, &mut rng);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let tape = Tape::with_params(&store);
        let xv = tape.constant(x);
        let m = SeqMask::all(4);
        let stacked = tape.data(s.forward(&tape, xv, &m).unwrap());
        let first = bi_sru(&tape, &s.layers[0], xv, &m).unwrap();
        let manual = tape.data(bi_sru(&tape, &s.layers[1], first, &m).unwrap());
        assert_eq!(stacked, manual);
        let single = StackedBiSru { layers: vec![s.layers[0].clone()], dropout: 0.2 };
        assert_eq!(
            tape.data(single.forward(&tape, xv, &m).unwrap()),
            tape.data(first)
        );
    }

    #[test]
    fn lstm_zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = LstmParams::init(&mut store, "lstm", 3, 2, &mut rng);
        for id in [p.w_x, p.w_h] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::uniform(&[4, 3], 1.0, &mut rng));
        let h = tape.data(lstm_forward(&tape, &p, x).unwrap());
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_saturated_update_gate_keeps_hidden() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = GruParams::init(&mut store, "gru", 3, 2, &mut rng);
        // Update gate is the middle third of the bias.
        store.get_mut(p.b_i).data_mut()[2..4].iter_mut().for_each(|v| *v = 50.0);
        let tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::uniform(&[1, 3], 1.0, &mut rng));
        let h = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let out = tape.data(gru_cell(&tape, &p, x, h).unwrap());
        assert!((out[0] - 0.3).abs() < 1e-9 && (out[1] + 0.7).abs() < 1e-9);
    }

    #[test]
    fn gru_zero_everything_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = GruParams::init(&mut store, "gru", 3, 2, &mut rng);
        let tape = Tape::with_params(&store);
        let out = gru_cell(&tape, &p, tape.zeros(&[1, 3]), tape.zeros(&[1, 2])).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_layers_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let sru = SruLayerParams::init(&mut store, "sru", 8, 6, &mut rng);
        let lstm = LstmParams::init(&mut store, "lstm", 8, 4, &mut rng);
        let gru = GruParams::init(&mut store, "gru", 8, 4, &mut rng);
        randomize_biases(&mut store, &mut rng);
        let x = Tensor::uniform(&[5, 8], 1.0, &mut rng);
        let report = finite_diff_check_params(
            &store,
            |t| {
                let xv = t.constant(x.clone());
                let a = t.sum(sru_forward(t, &sru, xv, None)?.h)?;
                let b = t.sum(t.tanh(lstm_forward(t, &lstm, xv)?)?)?;
                let c = t.sum(gru_forward(t, &gru, xv)?)?;
                t.add(t.add(a, b)?, c)
            },
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        for r in report {
            assert!(r.max_rel_error < 1e-4, "{} {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn op_counts_are_analytic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sru = SruLayerParams::init(&mut store, "sru", 4, 4, &mut rng);
        assert_eq!(sru.op_count(10), OpCount { matmuls: 3, sequential_steps: 10 });
        assert_eq!(sru.op_count(20).sequential_steps, 20);
        let lstm = LstmParams::init(&mut store, "lstm", 4, 4, &mut rng);
        assert_eq!(lstm.op_count(10), OpCount { matmuls: 11, sequential_steps: 10 });
    }
}
