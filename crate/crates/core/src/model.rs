//! End-to-end model: encoders, interaction graph, dual-band Fourier stacks,
//! fusion and the classifier head, with a hand-written backward pass.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Dims, Utterance};
use crate::encoding::{uniform_init, Affine, BiGruTrace, EncoderParams, SpeakerTable};
use crate::error::{Error, Result};
use crate::graph::{build_interaction_graph, normalized_filters, FilterPair, InteractionGraph, N_MODALITIES};
use crate::objective::{ccl_with_grad, cross_entropy_logits, ContrastiveBatch, LossReport};
use crate::params::{param_set, ParamSet};
use crate::spectral::{
    circulant_projection, circulant_projection_grad, dft_nodes, idft_nodes_complex, idft_real_part, kernel_spectrum,
    kernel_spectrum_grad, Activation, Band, FgnStack, FgoLayerParams, FgoMode, FrequencyFeatures, StackCache,
};

/// Which modalities feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modalities {
    pub text: bool,
    pub audio: bool,
    pub visual: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities {
        text: true,
        audio: true,
        visual: true,
    };

    pub fn count(self) -> usize {
        self.text as usize + self.audio as usize + self.visual as usize
    }

    /// Modality block indices in node-layout order.
    pub fn indices(self) -> Vec<usize> {
        [self.text, self.audio, self.visual]
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(i, _)| i)
            .collect()
    }
}

impl Default for Modalities {
    fn default() -> Self {
        Modalities::ALL
    }
}

impl FromStr for Modalities {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = Modalities {
            text: false,
            audio: false,
            visual: false,
        };
        for ch in s.chars() {
            let slot = match ch {
                't' => &mut m.text,
                'a' => &mut m.audio,
                'v' => &mut m.visual,
                _ => return Err(Error::invalid_config(format!("unknown modality '{ch}' in \"{s}\""))),
            };
            if *slot {
                return Err(Error::invalid_config(format!("modality '{ch}' repeated in \"{s}\"")));
            }
            *slot = true;
        }
        if m.count() == 0 {
            return Err(Error::invalid_config("at least one modality is required"));
        }
        Ok(m)
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (on, ch) in [(self.text, 't'), (self.audio, 'a'), (self.visual, 'v')] {
            if on {
                write!(f, "{ch}")?;
            }
        }
        Ok(())
    }
}

impl Serialize for Modalities {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Modalities {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Speaker vectors are replaced by zeros.
    pub no_speaker: bool,
    /// Contrastive weight forced to zero.
    pub no_contrastive: bool,
    /// Fourier stacks replaced by a two-layer spatial low-pass convolution.
    pub spatial_baseline: bool,
    /// Only the low band feeds the classifier.
    pub no_high_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Number of stacked operators is `depth + 1`.
    pub depth: usize,
    pub window: usize,
    pub phi: f64,
    pub tau: f64,
    pub lambda_ccl: f64,
    pub mode: FgoMode,
    pub activation: Activation,
    /// Points per modal phase in the learned frequency bank.
    pub bank_bins: usize,
    /// Half-width of the uniform initialization of the bank.
    pub bank_init: f64,
    pub normalize_contrastive: bool,
    pub ablation: Ablation,
    pub modalities: Modalities,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 16,
            depth: 4,
            window: 4,
            phi: 0.5,
            tau: 0.5,
            lambda_ccl: 0.3,
            mode: FgoMode::Free,
            activation: Activation::default(),
            bank_bins: 16,
            bank_init: 0.01,
            normalize_contrastive: true,
            ablation: Ablation::default(),
            modalities: Modalities::ALL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid_config(format!("d_model must be even and >= 2, got {}", self.d_model)));
        }
        if !(self.phi > 0.0) || !self.phi.is_finite() {
            return Err(Error::invalid_config(format!("phi must be positive, got {}", self.phi)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid_config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_ccl >= 0.0) || !self.lambda_ccl.is_finite() {
            return Err(Error::invalid_config(format!("lambda_ccl must be >= 0, got {}", self.lambda_ccl)));
        }
        if self.bank_bins == 0 {
            return Err(Error::invalid_config("bank_bins must be positive"));
        }
        if !(self.bank_init >= 0.0) {
            return Err(Error::invalid_config("bank_init must be >= 0"));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() {
                return Err(Error::invalid_config("leaky slope must be finite"));
            }
        }
        Ok(())
    }

    pub fn uses_high_band(&self) -> bool {
        !self.ablation.spatial_baseline && !self.ablation.no_high_band
    }

    /// Weight actually applied to the contrastive term.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_contrastive || !self.uses_high_band() {
            0.0
        } else {
            self.lambda_ccl
        }
    }

    pub fn n_bands(&self) -> usize {
        if self.uses_high_band() {
            2
        } else {
            1
        }
    }

    pub fn head_input_dim(&self) -> usize {
        self.modalities.count() * self.n_bands() * self.d_model
    }
}

/// Corpus-dependent sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dims: Dims,
    pub n_classes: usize,
    pub n_speakers: usize,
}

/// Two-layer `sigma(L_low X W)` replacement for the Fourier stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialParams {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

param_set!(SpatialParams { arrays: [w1, w2] });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub speakers: SpeakerTable,
    pub encoders: EncoderParams,
    pub low: Vec<FgoLayerParams>,
    pub high: Vec<FgoLayerParams>,
    pub spatial: SpatialParams,
    pub head: Affine,
}

param_set!(ModelParams {
    arrays: [],
    nested: [speakers, encoders, low, high, spatial, head]
});

impl ModelParams {
    /// Random initialization. Everything except the head is drawn in the same
    /// order regardless of ablation flags, so runs that differ only in the
    /// contrastive weight start from identical parameters.
    pub fn init(cfg: &ModelConfig, shape: &ModelShape, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speakers = SpeakerTable::new(d, shape.n_speakers, &mut rng);
        let encoders = EncoderParams::new(shape.dims.t, shape.dims.a, shape.dims.v, d, &mut rng);
        let layer = |rng: &mut ChaCha8Rng| {
            let mut p = FgoLayerParams::zeros(d, cfg.bank_bins);
            p.weight = uniform_init(d, d, d, rng);
            let b = cfg.bank_init;
            if b > 0.0 {
                p.bank_re = p.bank_re.mapv(|_| rand::Rng::random_range(rng, -b..=b));
                p.bank_im = p.bank_im.mapv(|_| rand::Rng::random_range(rng, -b..=b));
            }
            p
        };
        let low: Vec<_> = (0..=cfg.depth).map(|_| layer(&mut rng)).collect();
        let high: Vec<_> = (0..=cfg.depth).map(|_| layer(&mut rng)).collect();
        let spatial = SpatialParams {
            w1: uniform_init(d, d, d, &mut rng),
            w2: uniform_init(d, d, d, &mut rng),
        };
        let head = Affine::new(cfg.head_input_dim(), shape.n_classes, &mut rng);
        Ok(ModelParams {
            speakers,
            encoders,
            low,
            high,
            spatial,
            head,
        })
    }

    pub fn zeros(cfg: &ModelConfig, shape: &ModelShape) -> Self {
        let d = cfg.d_model;
        ModelParams {
            speakers: SpeakerTable::zeros(d, shape.n_speakers),
            encoders: EncoderParams::zeros(shape.dims.t, shape.dims.a, shape.dims.v, d),
            low: (0..=cfg.depth).map(|_| FgoLayerParams::zeros(d, cfg.bank_bins)).collect(),
            high: (0..=cfg.depth).map(|_| FgoLayerParams::zeros(d, cfg.bank_bins)).collect(),
            spatial: SpatialParams {
                w1: Array2::zeros((d, d)),
                w2: Array2::zeros((d, d)),
            },
            head: Affine::zeros(cfg.head_input_dim(), shape.n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.head.bias.len()
    }

    /// Checks that the tensors fit `cfg` and `shape`.
    pub fn check(&self, cfg: &ModelConfig, shape: &ModelShape) -> Result<()> {
        let expected = ModelParams::zeros(cfg, shape);
        let mut shapes = Vec::new();
        expected.visit("", &mut |name, dims, _| shapes.push((name.to_string(), dims.to_vec())));
        let mut i = 0;
        let mut bad = None;
        self.visit("", &mut |name, dims, _| {
            if bad.is_none() && (i >= shapes.len() || shapes[i].0 != name || shapes[i].1 != dims) {
                bad = Some(name.to_string());
            }
            i += 1;
        });
        if let Some(name) = bad {
            return Err(Error::invalid_input(format!("parameter '{name}' does not match the model configuration")));
        }
        if i != shapes.len() {
            return Err(Error::invalid_input("parameter count does not match the model configuration"));
        }
        Ok(())
    }
}

/// Result of a forward pass over one conversation.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N x C]`
    pub logits: Array2<f64>,
    /// Low-band node embeddings `[3N x d]` (spatial-baseline output when the
    /// Fourier stacks are ablated).
    pub low: Array2<f64>,
    /// High-band node embeddings `[3N x d]`, if the high band is active.
    pub high: Option<Array2<f64>>,
    /// Largest imaginary magnitude dropped by the inverse transforms.
    pub imag_residue: f64,
    /// Edges whose weight fell back because of a zero vector.
    pub degenerate_edges: usize,
}

impl ForwardOutput {
    /// Node embeddings fed to fusion: bands concatenated per node.
    pub fn node_embeddings(&self) -> Array2<f64> {
        match &self.high {
            Some(h) => concatenate![Axis(1), self.low, *h],
            None => self.low.clone(),
        }
    }

    pub fn contrastive_batch(&self, tau: f64, normalize: bool) -> Result<Option<ContrastiveBatch>> {
        match &self.high {
            Some(h) => {
                let mut b = ContrastiveBatch::new(self.low.clone(), h.clone(), tau)?;
                b.normalize = normalize;
                Ok(Some(b))
            }
            None => Ok(None),
        }
    }
}

struct BandTrace {
    lambda: Array1<Complex64>,
    stack: FgnStack,
    cache: StackCache,
}

struct SpatialTrace {
    lx: Array2<f64>,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    lh1: Array2<f64>,
    pre2: Array2<f64>,
}

enum Mixer {
    Fourier { low: BandTrace, high: Option<BandTrace> },
    Spatial(SpatialTrace),
}

struct Trace {
    n_utt: usize,
    text_trace: BiGruTrace,
    text_in: Array2<f64>,
    audio_in: Array2<f64>,
    visual_in: Array2<f64>,
    graph: InteractionGraph,
    filters: FilterPair,
    mixer: Mixer,
    fused: Array2<f64>,
}

fn modality_rows(conv: &Conversation, get: fn(&Utterance) -> &[f64]) -> Result<Array2<f64>> {
    let d = get(&conv.utterances[0]).len();
    let mut m = Array2::zeros((conv.len(), d));
    for (i, utt) in conv.utterances.iter().enumerate() {
        let v = get(utt);
        if v.len() != d {
            return Err(Error::invalid_input(format!("conversation '{}' has ragged features", conv.id)));
        }
        m.row_mut(i).assign(&ArrayView1::from(v));
    }
    Ok(m)
}

fn conversation_matrices(conv: &Conversation) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if conv.is_empty() {
        return Err(Error::invalid_input(format!("conversation '{}' has no utterances", conv.id)));
    }
    Ok((
        modality_rows(conv, |u| &u.text)?,
        modality_rows(conv, |u| &u.audio)?,
        modality_rows(conv, |u| &u.visual)?,
    ))
}

fn band_forward(
    layers: &[FgoLayerParams],
    filter: ArrayView2<f64>,
    band: Band,
    cfg: &ModelConfig,
    spectrum: &FrequencyFeatures,
) -> Result<(Array2<f64>, f64, BandTrace)> {
    let lambda = kernel_spectrum(circulant_projection(filter).view());
    let stack = FgnStack {
        layers: layers.iter().map(|p| p.materialize(lambda.view(), band, cfg.mode)).collect(),
        activation: cfg.activation,
    };
    let (out, cache) = stack.forward_spectrum(spectrum.data.view())?;
    let (emb, residue) = idft_real_part(&FrequencyFeatures { data: out });
    Ok((emb, residue, BandTrace { lambda, stack, cache }))
}

/// Gradient of the filter matrix for one band; parameter gradients land in
/// `grad_layers`, the spectrum gradient is added to `grad_spectrum`.
fn band_backward(
    trace: &BandTrace,
    layers: &[FgoLayerParams],
    cfg: &ModelConfig,
    grad_emb: ArrayView2<f64>,
    grad_layers: &mut [FgoLayerParams],
    grad_spectrum: &mut Array2<Complex64>,
) -> Array2<f64> {
    let n = grad_emb.nrows();
    let g_out = dft_nodes(grad_emb).data.mapv(|z| z / n as f64);
    let sg = trace.stack.backward(&trace.cache, g_out.view());
    *grad_spectrum += &sg.input;
    let mut g_lambda = Array1::<Complex64>::zeros(n);
    for (m, layer) in layers.iter().enumerate() {
        g_lambda += &layer.backward(trace.lambda.view(), cfg.mode, &sg.ops[m], sg.bias[m].view(), &mut grad_layers[m]);
    }
    circulant_projection_grad(kernel_spectrum_grad(g_lambda.view()).view())
}

fn spatial_forward(params: &SpatialParams, filter: ArrayView2<f64>, x: ArrayView2<f64>, act: Activation) -> (Array2<f64>, SpatialTrace) {
    let lx = filter.dot(&x);
    let pre1 = lx.dot(&params.w1);
    let h1 = pre1.mapv(|v| act.apply(v));
    let lh1 = filter.dot(&h1);
    let pre2 = lh1.dot(&params.w2);
    let out = pre2.mapv(|v| act.apply(v));
    (out, SpatialTrace { lx, pre1, h1, lh1, pre2 })
}

/// Returns `(grad_x, grad_filter)`.
fn spatial_backward(
    trace: &SpatialTrace,
    params: &SpatialParams,
    filter: ArrayView2<f64>,
    x: ArrayView2<f64>,
    act: Activation,
    grad_out: ArrayView2<f64>,
    grad: &mut SpatialParams,
) -> (Array2<f64>, Array2<f64>) {
    let g_pre2 = &grad_out * &trace.pre2.mapv(|v| act.derivative(v));
    grad.w2 += &trace.lh1.t().dot(&g_pre2);
    let g_lh1 = g_pre2.dot(&params.w2.t());
    let mut g_filter = g_lh1.dot(&trace.h1.t());
    let g_h1 = filter.t().dot(&g_lh1);
    let g_pre1 = &g_h1 * &trace.pre1.mapv(|v| act.derivative(v));
    grad.w1 += &trace.lx.t().dot(&g_pre1);
    let g_lx = g_pre1.dot(&params.w1.t());
    g_filter += &g_lx.dot(&x.t());
    let g_x = filter.t().dot(&g_lx);
    (g_x, g_filter)
}

/// Per-utterance fusion of the selected modality blocks of `nodes`.
fn fuse(nodes: ArrayView2<f64>, n_utt: usize, modalities: Modalities) -> Array2<f64> {
    let blocks: Vec<_> = modalities
        .indices()
        .into_iter()
        .map(|m| nodes.slice(s![m * n_utt..(m + 1) * n_utt, ..]))
        .collect();
    concatenate(Axis(1), &blocks).expect("blocks share the row count")
}

fn fuse_backward(grad: ArrayView2<f64>, n_utt: usize, width: usize, modalities: Modalities) -> Array2<f64> {
    let mut out = Array2::zeros((N_MODALITIES * n_utt, width));
    for (slot, m) in modalities.indices().into_iter().enumerate() {
        out.slice_mut(s![m * n_utt..(m + 1) * n_utt, ..])
            .assign(&grad.slice(s![.., slot * width..(slot + 1) * width]));
    }
    out
}

fn forward_traced(params: &ModelParams, cfg: &ModelConfig, conv: &Conversation) -> Result<(ForwardOutput, Trace)> {
    let (text_in, audio_in, visual_in) = conversation_matrices(conv)?;
    let n_utt = conv.len();
    let d = cfg.d_model;

    let (u_text, text_trace) = params.encoders.text.forward_seq(text_in.view())?;
    let u_audio = params.encoders.audio.forward_rows(audio_in.view())?;
    let u_visual = params.encoders.visual.forward_rows(visual_in.view())?;

    let mut speaker = Array2::zeros((n_utt, d));
    if !cfg.ablation.no_speaker {
        for (i, utt) in conv.utterances.iter().enumerate() {
            let id = utt.speaker;
            if id >= params.speakers.n_speakers() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    len: params.speakers.n_speakers(),
                });
            }
            speaker.row_mut(i).assign(&params.speakers.weights.column(id));
        }
    }
    let x = concatenate![Axis(0), &u_text + &speaker, &u_audio + &speaker, &u_visual + &speaker];

    let graph = build_interaction_graph(x.view(), cfg.window, cfg.phi)?;
    let filters = normalized_filters(graph.adjacency.view())?;

    let (low, high, residue, mixer) = if cfg.ablation.spatial_baseline {
        let (out, tr) = spatial_forward(&params.spatial, filters.low.view(), x.view(), cfg.activation);
        (out, None, 0.0, Mixer::Spatial(tr))
    } else {
        let spectrum = dft_nodes(x.view());
        let (low, r_low, t_low) = band_forward(&params.low, filters.low.view(), Band::Low, cfg, &spectrum)?;
        if cfg.uses_high_band() {
            let (high, r_high, t_high) = band_forward(&params.high, filters.high.view(), Band::High, cfg, &spectrum)?;
            (low, Some(high), r_low.max(r_high), Mixer::Fourier { low: t_low, high: Some(t_high) })
        } else {
            (low, None, r_low, Mixer::Fourier { low: t_low, high: None })
        }
    };

    let nodes = match &high {
        Some(h) => concatenate![Axis(1), low, *h],
        None => low.clone(),
    };
    let fused = fuse(nodes.view(), n_utt, cfg.modalities);
    let hidden = fused.mapv(|v| v.max(0.0));
    let logits = params.head.forward_rows(hidden.view())?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite logits for conversation '{}'", conv.id)));
    }
    let out = ForwardOutput {
        logits,
        low,
        high,
        imag_residue: residue,
        degenerate_edges: graph.degenerate_edges,
    };
    let trace = Trace {
        n_utt,
        text_trace,
        text_in,
        audio_in,
        visual_in,
        graph,
        filters,
        mixer,
        fused,
    };
    Ok((out, trace))
}

fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    conv: &Conversation,
    trace: &Trace,
    grad_logits: ArrayView2<f64>,
    grad_low: Option<ArrayView2<f64>>,
    grad_high: Option<ArrayView2<f64>>,
) -> ModelParams {
    let n_utt = trace.n_utt;
    let d = cfg.d_model;
    let shape = ModelShape {
        dims: Dims {
            t: params.encoders.text.forward.input_dim(),
            a: params.encoders.audio.weight.ncols(),
            v: params.encoders.visual.weight.ncols(),
        },
        n_classes: params.n_classes(),
        n_speakers: params.speakers.n_speakers(),
    };
    let mut grad = ModelParams::zeros(cfg, &shape);

    let hidden = trace.fused.mapv(|v| v.max(0.0));
    let g_hidden = params.head.backward_rows(hidden.view(), grad_logits, &mut grad.head);
    let g_fused = &g_hidden * &trace.fused.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let width = cfg.n_bands() * d;
    let g_nodes = fuse_backward(g_fused.view(), n_utt, width, cfg.modalities);
    let mut g_low = g_nodes.slice(s![.., ..d]).to_owned();
    if let Some(extra) = grad_low {
        g_low += &extra;
    }

    let x = &trace.graph.features;
    let n = x.nrows();
    let (mut g_x, g_norm_adj) = match &trace.mixer {
        Mixer::Spatial(tr) => {
            let (g_x, g_filter) = spatial_backward(
                tr,
                &params.spatial,
                trace.filters.low.view(),
                x.view(),
                cfg.activation,
                g_low.view(),
                &mut grad.spatial,
            );
            (g_x, g_filter)
        }
        Mixer::Fourier { low, high } => {
            let mut g_spectrum = Array2::<Complex64>::zeros((n, d));
            let mut g_adj = band_backward(low, &params.low, cfg, g_low.view(), &mut grad.low, &mut g_spectrum);
            if let Some(high) = high {
                let mut g_high = g_nodes.slice(s![.., d..]).to_owned();
                if let Some(extra) = grad_high {
                    g_high += &extra;
                }
                g_adj -= &band_backward(high, &params.high, cfg, g_high.view(), &mut grad.high, &mut g_spectrum);
            }
            let g_x = idft_nodes_complex(g_spectrum.view()).mapv(|z| z.re * n as f64);
            (g_x, g_adj)
        }
    };
    let g_adjacency = trace
        .filters
        .normalized
        .adjacency_grad(trace.graph.adjacency.view(), g_norm_adj.view());
    g_x += &trace.graph.features_grad(g_adjacency.view());

    let g_text = g_x.slice(s![..n_utt, ..]);
    let g_audio = g_x.slice(s![n_utt..2 * n_utt, ..]);
    let g_visual = g_x.slice(s![2 * n_utt.., ..]);
    if !cfg.ablation.no_speaker {
        let g_speaker = &g_text + &g_audio + g_visual;
        for (i, utt) in conv.utterances.iter().enumerate() {
            let mut col = grad.speakers.weights.column_mut(utt.speaker);
            col += &g_speaker.row(i);
        }
    }
    params
        .encoders
        .text
        .backward_seq(trace.text_in.view(), &trace.text_trace, g_text, &mut grad.encoders.text);
    params
        .encoders
        .audio
        .backward_rows(trace.audio_in.view(), g_audio, &mut grad.encoders.audio);
    params
        .encoders
        .visual
        .backward_rows(trace.visual_in.view(), g_visual, &mut grad.encoders.visual);
    grad
}

pub fn forward(params: &ModelParams, cfg: &ModelConfig, conv: &Conversation) -> Result<ForwardOutput> {
    Ok(forward_traced(params, cfg, conv)?.0)
}

/// Filter pair of the graph the model builds for `conv` under `params`.
pub fn conversation_filters(params: &ModelParams, cfg: &ModelConfig, conv: &Conversation) -> Result<FilterPair> {
    Ok(forward_traced(params, cfg, conv)?.1.filters)
}

/// Loss of one conversation: mean cross-entropy over its utterances plus the
/// weighted contrastive term over its graph.
pub fn conversation_loss(params: &ModelParams, cfg: &ModelConfig, conv: &Conversation) -> Result<LossReport> {
    let out = forward(params, cfg, conv)?;
    let (ce, _) = cross_entropy_logits(out.logits.view(), &conv.labels())?;
    let (lf, hf) = match out.contrastive_batch(cfg.tau, cfg.normalize_contrastive)? {
        Some(b) => {
            let c = ccl_with_grad(&b)?;
            (c.lfcl, c.hfcl)
        }
        None => (0.0, 0.0),
    };
    Ok(LossReport::new(ce, lf, hf, cfg.effective_lambda()))
}

/// Loss and parameter gradient for one conversation.
pub fn loss_and_grad(params: &ModelParams, cfg: &ModelConfig, conv: &Conversation) -> Result<(LossReport, ModelParams)> {
    let (out, trace) = forward_traced(params, cfg, conv)?;
    let (ce, g_logits) = cross_entropy_logits(out.logits.view(), &conv.labels())?;
    let lambda = cfg.effective_lambda();
    let (report, g_low, g_high) = match out.contrastive_batch(cfg.tau, cfg.normalize_contrastive)? {
        Some(b) => {
            let c = ccl_with_grad(&b)?;
            let report = LossReport::new(ce, c.lfcl, c.hfcl, lambda);
            if lambda > 0.0 {
                (report, Some(c.grad_low * lambda), Some(c.grad_high * lambda))
            } else {
                (report, None, None)
            }
        }
        None => (LossReport::new(ce, 0.0, 0.0, lambda), None, None),
    };
    let grad = backward(
        params,
        cfg,
        conv,
        &trace,
        g_logits.view(),
        g_low.as_ref().map(|g| g.view()),
        g_high.as_ref().map(|g| g.view()),
    );
    Ok((report, grad))
}

/// Mean cosine similarity over all distinct pairs of node embeddings.
pub fn mean_pairwise_cosine(nodes: ArrayView2<f64>) -> f64 {
    let n = nodes.nrows();
    if n < 2 {
        return 1.0;
    }
    let norms: Vec<f64> = nodes.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let denom = norms[i] * norms[j];
            let c = if denom > 0.0 { nodes.row(i).dot(&nodes.row(j)) / denom } else { 0.0 };
            total += c;
            count += 1;
        }
    }
    total / count as f64
}

/// Whether the tensor called `name` takes part in training under `cfg`.
/// Every tensor is allocated regardless of ablations, so the raw count
/// overstates the model.
pub fn tensor_is_active(name: &str, cfg: &ModelConfig) -> bool {
    let group = name.split('.').next().unwrap_or("");
    let is_bank = name.ends_with("bank_re") || name.ends_with("bank_im");
    let fourier = !cfg.ablation.spatial_baseline && !(is_bank && cfg.mode == FgoMode::Circulant);
    match group {
        "speakers" => !cfg.ablation.no_speaker,
        "low" => fourier,
        "high" => fourier && cfg.uses_high_band(),
        "spatial" => cfg.ablation.spatial_baseline,
        _ => true,
    }
}

/// Active parameter count per top-level group, in layout order.
pub fn active_parameter_counts(params: &ModelParams, cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    params.visit("", &mut |name, _, data| {
        let group = name.split('.').next().unwrap_or("").to_string();
        let n = if tensor_is_active(name, cfg) { data.len() } else { 0 };
        match groups.last_mut() {
            Some((g, total)) if *g == group => *total += n,
            _ => groups.push((group, n)),
        }
    });
    groups
}

#[cfg(test)]
mod tests;
