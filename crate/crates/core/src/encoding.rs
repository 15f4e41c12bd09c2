//! Unimodal encoders and speaker embedding.
//!
//! Text goes through a bidirectional GRU over the whole conversation; audio
//! and visual features go through affine maps. A learned speaker vector is
//! added to each of the three modality representations.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::param_set;

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`
pub(crate) fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Speaker table

/// `[d_model x n_speakers]`; speaker `i` is column `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTable {
    pub weights: Array2<f64>,
}

param_set!(SpeakerTable { arrays: [weights] });

impl SpeakerTable {
    pub fn new<R: Rng + ?Sized>(d_model: usize, n_speakers: usize, rng: &mut R) -> Self {
        SpeakerTable {
            weights: uniform_init(d_model, n_speakers, n_speakers, rng),
        }
    }

    pub fn zeros(d_model: usize, n_speakers: usize) -> Self {
        SpeakerTable {
            weights: Array2::zeros((d_model, n_speakers)),
        }
    }

    pub fn n_speakers(&self) -> usize {
        self.weights.ncols()
    }
}

/// `W_speaker` times the one-hot vector of `speaker`, i.e. its column.
pub fn embed_speaker(speaker: usize, table: &SpeakerTable) -> Result<Array1<f64>> {
    if speaker >= table.n_speakers() {
        return Err(Error::IndexOutOfRange {
            index: speaker,
            len: table.n_speakers(),
        });
    }
    Ok(table.weights.column(speaker).to_owned())
}

// ---------------------------------------------------------------------------
// Affine encoder

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `[d_out x d_in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

param_set!(Affine { arrays: [weight, bias] });

impl Affine {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Affine {
            weight: uniform_init(d_out, d_in, d_in, rng),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Affine {
            weight: Array2::zeros((d_out, d_in)),
            bias: Array1::zeros(d_out),
        }
    }

    /// Row-wise `x W^T + b` for a batch `[n x d_in]`.
    pub fn forward_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weight.ncols() {
            return Err(Error::invalid_input(format!(
                "affine input has {} columns, weight expects {}",
                x.ncols(),
                self.weight.ncols()
            )));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Accumulates parameter gradients for a batch; returns the input gradient.
    pub fn backward_rows(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>, grad: &mut Affine) -> Array2<f64> {
        grad.weight += &grad_out.t().dot(&x);
        grad.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }
}

/// `W x + b`
pub fn encode_affine(x: ArrayView1<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != w.ncols() || b.len() != w.nrows() {
        return Err(Error::invalid_input(format!(
            "affine shapes: x {}, W {}x{}, b {}",
            x.len(),
            w.nrows(),
            w.ncols(),
            b.len()
        )));
    }
    Ok(w.dot(&x) + b)
}

/// `x_m = u_m + S_i`
pub fn fuse_speaker(unimodal: ArrayView1<f64>, speaker: ArrayView1<f64>) -> Result<Array1<f64>> {
    if unimodal.len() != speaker.len() {
        return Err(Error::invalid_input(format!(
            "cannot add speaker vector of length {} to representation of length {}",
            speaker.len(),
            unimodal.len()
        )));
    }
    Ok(&unimodal + &speaker)
}

// ---------------------------------------------------------------------------
// GRU

/// One direction of a fully gated GRU:
///
/// ```text
/// z = sigmoid(Wz x + Uz h + bz)
/// r = sigmoid(Wr x + Ur h + br)
/// n = tanh(Wn x + Un (r * h) + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_z: Array2<f64>,
    pub u_z: Array2<f64>,
    pub b_z: Array1<f64>,
    pub w_r: Array2<f64>,
    pub u_r: Array2<f64>,
    pub b_r: Array1<f64>,
    pub w_n: Array2<f64>,
    pub u_n: Array2<f64>,
    pub b_n: Array1<f64>,
}

param_set!(GruCell {
    arrays: [w_z, u_z, b_z, w_r, u_r, b_r, w_n, u_n, b_n]
});

#[derive(Debug, Clone)]
struct GruStep {
    h_prev: Array1<f64>,
    z: Array1<f64>,
    r: Array1<f64>,
    n: Array1<f64>,
}

/// Intermediates of one pass over a sequence.
#[derive(Debug, Clone)]
pub struct GruTrace {
    steps: Vec<GruStep>,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        GruCell {
            w_z: uniform_init(hidden, d_in, d_in, rng),
            u_z: uniform_init(hidden, hidden, hidden, rng),
            b_z: Array1::zeros(hidden),
            w_r: uniform_init(hidden, d_in, d_in, rng),
            u_r: uniform_init(hidden, hidden, hidden, rng),
            b_r: Array1::zeros(hidden),
            w_n: uniform_init(hidden, d_in, d_in, rng),
            u_n: uniform_init(hidden, hidden, hidden, rng),
            b_n: Array1::zeros(hidden),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        GruCell {
            w_z: Array2::zeros((hidden, d_in)),
            u_z: Array2::zeros((hidden, hidden)),
            b_z: Array1::zeros(hidden),
            w_r: Array2::zeros((hidden, d_in)),
            u_r: Array2::zeros((hidden, hidden)),
            b_r: Array1::zeros(hidden),
            w_n: Array2::zeros((hidden, d_in)),
            u_n: Array2::zeros((hidden, hidden)),
            b_n: Array1::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_z.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.ncols()
    }

    /// Runs the cell over the rows of `seq` from `h_0 = 0`; returns every
    /// hidden state `[len x hidden]`.
    pub fn run(&self, seq: ArrayView2<f64>) -> (Array2<f64>, GruTrace) {
        let hidden = self.hidden();
        let mut h = Array1::zeros(hidden);
        let mut states = Array2::zeros((seq.nrows(), hidden));
        let mut steps = Vec::with_capacity(seq.nrows());
        for (t, x) in seq.rows().into_iter().enumerate() {
            let z = (self.w_z.dot(&x) + self.u_z.dot(&h) + &self.b_z).mapv(sigmoid);
            let r = (self.w_r.dot(&x) + self.u_r.dot(&h) + &self.b_r).mapv(sigmoid);
            let rh = &r * &h;
            let n = (self.w_n.dot(&x) + self.u_n.dot(&rh) + &self.b_n).mapv(f64::tanh);
            let h_next = (1.0 - &z) * &n + &z * &h;
            states.row_mut(t).assign(&h_next);
            steps.push(GruStep { h_prev: h, z, r, n });
            h = h_next;
        }
        (states, GruTrace { steps })
    }

    /// Backpropagation through time. `grad_states` is the gradient on every
    /// emitted hidden state; parameter gradients are accumulated into `grad`.
    pub fn backward(&self, seq: ArrayView2<f64>, trace: &GruTrace, grad_states: ArrayView2<f64>, grad: &mut GruCell) {
        let hidden = self.hidden();
        let mut g_h = Array1::<f64>::zeros(hidden);
        for t in (0..trace.steps.len()).rev() {
            let step = &trace.steps[t];
            let x = seq.row(t);
            g_h += &grad_states.row(t);

            let g_n = &g_h * &(1.0 - &step.z);
            let g_z = &g_h * &(&step.h_prev - &step.n);
            let mut g_prev = &g_h * &step.z;

            let a_n = &g_n * &(1.0 - &step.n * &step.n);
            let rh = &step.r * &step.h_prev;
            outer_add(&mut grad.w_n, a_n.view(), x);
            outer_add(&mut grad.u_n, a_n.view(), rh.view());
            grad.b_n += &a_n;
            let g_rh = self.u_n.t().dot(&a_n);
            let g_r = &g_rh * &step.h_prev;
            g_prev += &(&g_rh * &step.r);

            let a_z = &g_z * &(&step.z * &(1.0 - &step.z));
            outer_add(&mut grad.w_z, a_z.view(), x);
            outer_add(&mut grad.u_z, a_z.view(), step.h_prev.view());
            grad.b_z += &a_z;
            g_prev += &self.u_z.t().dot(&a_z);

            let a_r = &g_r * &(&step.r * &(1.0 - &step.r));
            outer_add(&mut grad.w_r, a_r.view(), x);
            outer_add(&mut grad.u_r, a_r.view(), step.h_prev.view());
            grad.b_r += &a_r;
            g_prev += &self.u_r.t().dot(&a_r);

            g_h = g_prev;
        }
    }
}

fn outer_add(target: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            target.row_mut(i).scaled_add(ai, &b);
        }
    }
}

fn reversed_rows(x: ArrayView2<f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

param_set!(BiGru { arrays: [], nested: [forward, backward] });

#[derive(Debug, Clone)]
pub struct BiGruTrace {
    forward: GruTrace,
    backward: GruTrace,
}

impl BiGru {
    /// Each direction gets `d_model / 2` hidden units.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_model: usize, rng: &mut R) -> Self {
        BiGru {
            forward: GruCell::new(d_in, d_model / 2, rng),
            backward: GruCell::new(d_in, d_model / 2, rng),
        }
    }

    pub fn zeros(d_in: usize, d_model: usize) -> Self {
        BiGru {
            forward: GruCell::zeros(d_in, d_model / 2),
            backward: GruCell::zeros(d_in, d_model / 2),
        }
    }

    pub fn forward_seq(&self, seq: ArrayView2<f64>) -> Result<(Array2<f64>, BiGruTrace)> {
        if seq.nrows() == 0 {
            return Err(Error::invalid_input("text sequence is empty"));
        }
        if seq.ncols() != self.forward.input_dim() {
            return Err(Error::invalid_input(format!(
                "text features have {} dims, encoder expects {}",
                seq.ncols(),
                self.forward.input_dim()
            )));
        }
        let (hf, tf) = self.forward.run(seq);
        let rev = reversed_rows(seq);
        let (hb_rev, tb) = self.backward.run(rev.view());
        let hb = reversed_rows(hb_rev.view());
        let out = concatenate![Axis(1), hf, hb];
        Ok((out, BiGruTrace { forward: tf, backward: tb }))
    }

    pub fn backward_seq(&self, seq: ArrayView2<f64>, trace: &BiGruTrace, grad_out: ArrayView2<f64>, grad: &mut BiGru) {
        let h = self.forward.hidden();
        let g_f = grad_out.slice(s![.., ..h]);
        let g_b = reversed_rows(grad_out.slice(s![.., h..]));
        self.forward.backward(seq, &trace.forward, g_f, &mut grad.forward);
        let rev = reversed_rows(seq);
        self.backward.backward(rev.view(), &trace.backward, g_b.view(), &mut grad.backward);
    }
}

/// Text encoder output: forward and backward hidden states concatenated per
/// position.
pub fn encode_text(seq: ArrayView2<f64>, gru: &BiGru) -> Result<Array2<f64>> {
    Ok(gru.forward_seq(seq)?.0)
}

/// All unimodal encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub text: BiGru,
    pub audio: Affine,
    pub visual: Affine,
}

param_set!(EncoderParams { arrays: [], nested: [text, audio, visual] });

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(d_t: usize, d_a: usize, d_v: usize, d_model: usize, rng: &mut R) -> Self {
        EncoderParams {
            text: BiGru::new(d_t, d_model, rng),
            audio: Affine::new(d_a, d_model, rng),
            visual: Affine::new(d_v, d_model, rng),
        }
    }

    pub fn zeros(d_t: usize, d_a: usize, d_v: usize, d_model: usize) -> Self {
        EncoderParams {
            text: BiGru::zeros(d_t, d_model),
            audio: Affine::zeros(d_a, d_model),
            visual: Affine::zeros(d_v, d_model),
        }
    }
}
