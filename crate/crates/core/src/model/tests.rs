use super::*;
use crate::corpus::{Split, Utterance};
use crate::gradcheck;
use rand::Rng;
use std::f64::consts::PI;

fn shape() -> ModelShape {
    ModelShape {
        dims: Dims { t: 3, a: 2, v: 4 },
        n_classes: 3,
        n_speakers: 2,
    }
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        depth: 1,
        bank_bins: 4,
        bank_init: 0.2,
        window: 1,
        ..ModelConfig::default()
    }
}

fn conversation(n: usize, seed: u64) -> Conversation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let utterances = (0..n)
        .map(|i| Utterance {
            speaker: i % 2,
            label: i % 3,
            text: v(3),
            audio: v(2),
            visual: v(4),
        })
        .collect();
    Conversation {
        id: format!("c{seed}"),
        split: Split::Train,
        utterances,
    }
}

#[test]
fn zero_parameters_give_zero_logits() {
    let cfg = small_cfg();
    let params = ModelParams::zeros(&cfg, &shape());
    let out = forward(&params, &cfg, &conversation(4, 1)).unwrap();
    assert_eq!(out.logits.dim(), (4, 3));
    assert!(out.logits.iter().all(|&v| v == 0.0));
}

#[test]
fn single_utterance_flows_end_to_end() {
    let cfg = small_cfg();
    let params = ModelParams::init(&cfg, &shape(), 3).unwrap();
    let out = forward(&params, &cfg, &conversation(1, 2)).unwrap();
    assert_eq!(out.logits.dim(), (1, 3));
    assert_eq!(out.low.dim(), (3, 4));
}

#[test]
fn without_speaker_embedding_speakers_are_ignored() {
    let mut cfg = small_cfg();
    cfg.ablation.no_speaker = true;
    let mut params = ModelParams::init(&cfg, &shape(), 4).unwrap();
    let conv = conversation(5, 3);
    let before = forward(&params, &cfg, &conv).unwrap().logits;
    params.speakers.weights.mapv_inplace(|v| v + 1.0);
    let mut swapped = conv.clone();
    for u in &mut swapped.utterances {
        u.speaker = 1 - u.speaker;
    }
    assert_eq!(forward(&params, &cfg, &conv).unwrap().logits, before);
    assert_eq!(forward(&params, &cfg, &swapped).unwrap().logits, before);

    cfg.ablation.no_speaker = false;
    assert_ne!(forward(&params, &cfg, &conv).unwrap().logits, before);
}

#[test]
fn unknown_speaker_is_an_index_error() {
    let cfg = small_cfg();
    let params = ModelParams::init(&cfg, &shape(), 4).unwrap();
    let mut conv = conversation(2, 3);
    conv.utterances[1].speaker = 7;
    assert!(matches!(forward(&params, &cfg, &conv), Err(Error::IndexOutOfRange { index: 7, len: 2 })));
}

#[test]
fn text_only_head_width() {
    let mut cfg = small_cfg();
    cfg.modalities = "t".parse().unwrap();
    assert_eq!(cfg.head_input_dim(), 2 * cfg.d_model);
    let params = ModelParams::init(&cfg, &shape(), 5).unwrap();
    assert_eq!(params.head.weight.ncols(), 8);
    assert_eq!(forward(&params, &cfg, &conversation(3, 4)).unwrap().logits.ncols(), 3);
}

#[test]
fn contrastive_off_total_equals_ce() {
    let mut cfg = small_cfg();
    cfg.ablation.no_contrastive = true;
    let params = ModelParams::init(&cfg, &shape(), 6).unwrap();
    let r = conversation_loss(&params, &cfg, &conversation(4, 5)).unwrap();
    assert_eq!(r.total, r.ce);
    assert!(r.ccl > 0.0);
}

#[test]
fn modality_strings() {
    for s in ["t", "a", "v", "ta", "tv", "av", "tav"] {
        let m: Modalities = s.parse().unwrap();
        let canon: String = ['t', 'a', 'v'].iter().filter(|c| s.contains(**c)).collect();
        assert_eq!(m.to_string(), canon);
    }
    assert_eq!("va".parse::<Modalities>().unwrap().to_string(), "av");
    assert!("".parse::<Modalities>().is_err());
    assert!("tt".parse::<Modalities>().is_err());
    assert!("x".parse::<Modalities>().is_err());
}

#[test]
fn params_shape_check() {
    let cfg = small_cfg();
    let params = ModelParams::init(&cfg, &shape(), 1).unwrap();
    params.check(&cfg, &shape()).unwrap();
    let mut other = cfg.clone();
    other.d_model = 6;
    assert!(params.check(&other, &shape()).is_err());
}

#[test]
fn permuting_head_rows_permutes_logits() {
    let cfg = small_cfg();
    let params = ModelParams::init(&cfg, &shape(), 8).unwrap();
    let conv = conversation(4, 9);
    let base = forward(&params, &cfg, &conv).unwrap().logits;
    let perm = [2, 0, 1];
    let mut permuted = params.clone();
    for (new, &old) in perm.iter().enumerate() {
        permuted.head.weight.row_mut(new).assign(&params.head.weight.row(old));
        permuted.head.bias[new] = params.head.bias[old];
    }
    let out = forward(&permuted, &cfg, &conv).unwrap().logits;
    for i in 0..4 {
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(out[[i, new]], base[[i, old]]);
        }
    }
}

#[test]
fn pairwise_cosine_extremes() {
    let same = Array2::from_shape_fn((4, 3), |(_, j)| j as f64 + 1.0);
    assert!((mean_pairwise_cosine(same.view()) - 1.0).abs() < 1e-12);
    let eye = Array2::<f64>::eye(3);
    assert_eq!(mean_pairwise_cosine(eye.view()), 0.0);
}

fn grad_check(cfg: &ModelConfig, seed: u64) -> gradcheck::GradCheck {
    let params = ModelParams::init(cfg, &shape(), seed).unwrap();
    let conv = conversation(3, seed + 100);
    let (_, grad) = loss_and_grad(&params, cfg, &conv).unwrap();
    gradcheck::check(&params, &grad, 1e-5, |p| conversation_loss(p, cfg, &conv).unwrap().total)
}

#[test]
fn composed_gradients_match_finite_differences() {
    let mut variants = Vec::new();
    for mode in [FgoMode::Free, FgoMode::Circulant] {
        let mut c = small_cfg();
        c.mode = mode;
        variants.push(c);
    }
    let mut c = small_cfg();
    c.ablation.spatial_baseline = true;
    variants.push(c);
    let mut c = small_cfg();
    c.ablation.no_high_band = true;
    c.activation = Activation::Tanh;
    variants.push(c);
    let mut c = small_cfg();
    c.modalities = "av".parse().unwrap();
    c.ablation.no_speaker = true;
    variants.push(c);
    for (i, cfg) in variants.iter().enumerate() {
        let r = grad_check(cfg, 20 + i as u64);
        assert!(r.passes(1e-4), "variant {i}: {r:?}");
    }
}

// Straight-line re-implementation of the forward pass for a small model,
// sharing no code with the library beyond the parameter structs.

type C = Complex64;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.nrows()).map(|i| (0..w.ncols()).map(|j| w[[i, j]] * x[j]).sum()).collect()
}

fn gru_pass(cell: &crate::encoding::GruCell, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let h_dim = cell.u_z.nrows();
    let mut h = vec![0.0; h_dim];
    let mut out = Vec::new();
    for x in seq {
        let (wz, uz) = (matvec(&cell.w_z, x), matvec(&cell.u_z, &h));
        let (wr, ur) = (matvec(&cell.w_r, x), matvec(&cell.u_r, &h));
        let z: Vec<f64> = (0..h_dim).map(|k| sig(wz[k] + uz[k] + cell.b_z[k])).collect();
        let r: Vec<f64> = (0..h_dim).map(|k| sig(wr[k] + ur[k] + cell.b_r[k])).collect();
        let rh: Vec<f64> = (0..h_dim).map(|k| r[k] * h[k]).collect();
        let (wn, un) = (matvec(&cell.w_n, x), matvec(&cell.u_n, &rh));
        let n: Vec<f64> = (0..h_dim).map(|k| (wn[k] + un[k] + cell.b_n[k]).tanh()).collect();
        h = (0..h_dim).map(|k| (1.0 - z[k]) * n[k] + z[k] * h[k]).collect();
        out.push(h.clone());
    }
    out
}

fn dft(x: &[Vec<C>], sign: f64) -> Vec<Vec<C>> {
    let n = x.len();
    let d = x[0].len();
    (0..n)
        .map(|f| {
            (0..d)
                .map(|j| {
                    (0..n)
                        .map(|s| x[s][j] * C::from_polar(1.0, sign * 2.0 * PI * (f * s) as f64 / n as f64))
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn oracle_logits(params: &ModelParams, cfg: &ModelConfig, conv: &Conversation) -> Vec<Vec<f64>> {
    let n_utt = conv.len();
    let n = 3 * n_utt;
    let d = cfg.d_model;
    let texts: Vec<Vec<f64>> = conv.utterances.iter().map(|u| u.text.clone()).collect();
    let fwd = gru_pass(&params.encoders.text.forward, &texts);
    let rev: Vec<Vec<f64>> = texts.iter().rev().cloned().collect();
    let mut bwd = gru_pass(&params.encoders.text.backward, &rev);
    bwd.reverse();
    let mut x = vec![vec![0.0; d]; n];
    for (i, u) in conv.utterances.iter().enumerate() {
        let spk: Vec<f64> = (0..d).map(|k| params.speakers.weights[[k, u.speaker]]).collect();
        let t: Vec<f64> = fwd[i].iter().chain(bwd[i].iter()).copied().collect();
        let a = matvec(&params.encoders.audio.weight, &u.audio);
        let v = matvec(&params.encoders.visual.weight, &u.visual);
        for k in 0..d {
            x[i][k] = t[k] + spk[k];
            x[n_utt + i][k] = a[k] + params.encoders.audio.bias[k] + spk[k];
            x[2 * n_utt + i][k] = v[k] + params.encoders.visual.bias[k] + spk[k];
        }
    }
    let mut adj = vec![vec![0.0; n]; n];
    for p in 0..n {
        for q in 0..n {
            let (mp, up) = (p / n_utt, p % n_utt);
            let (mq, uq) = (q / n_utt, q % n_utt);
            let same = mp == mq && up != uq && up.abs_diff(uq) <= cfg.window;
            let cross = mp != mq && up == uq;
            if same || cross {
                let dot: f64 = (0..d).map(|k| x[p][k] * x[q][k]).sum();
                let np: f64 = x[p].iter().map(|v| v * v).sum::<f64>().sqrt();
                let nq: f64 = x[q].iter().map(|v| v * v).sum::<f64>().sqrt();
                let w = 1.0 - (dot / (np * nq)).clamp(-1.0, 1.0).acos() / PI;
                adj[p][q] = if cross { cfg.phi * w } else { w };
            }
        }
    }
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let spectrum = dft(&x.iter().map(|r| r.iter().map(|&v| C::new(v, 0.0)).collect()).collect::<Vec<_>>(), -1.0);
    let mut bands = Vec::new();
    for (sign, layers) in [(1.0, &params.low), (-1.0, &params.high)] {
        let filter = |p: usize, q: usize| {
            let eye = if p == q { 1.0 } else { 0.0 };
            eye + sign * adj[p][q] / (deg[p] * deg[q]).sqrt()
        };
        let kernel: Vec<f64> = (0..n).map(|s| (0..n).map(|i| filter((i + s) % n, i)).sum::<f64>() / n as f64).collect();
        let lambda: Vec<C> = (0..n)
            .map(|f| (0..n).map(|s| kernel[s] * C::from_polar(1.0, -2.0 * PI * (f * s) as f64 / n as f64)).sum())
            .collect();
        let bins = cfg.bank_bins;
        let mut running = spectrum.clone();
        let mut acc = vec![vec![C::new(0.0, 0.0); d]; n];
        for layer in layers.iter() {
            let mut next = vec![vec![C::new(0.0, 0.0); d]; n];
            for f in 0..n {
                let pos = f as f64 * bins as f64 / n as f64;
                let (i0, t) = (pos.floor() as usize % bins, pos - pos.floor());
                let i1 = (i0 + 1) % bins;
                let base = (f % 3) * bins;
                for k in 0..d {
                    for j in 0..d {
                        let bank = |i: usize| C::new(layer.bank_re[[base + i, j, k]], layer.bank_im[[base + i, j, k]]);
                        let op = lambda[f] * layer.weight[[j, k]] + bank(i0) * (1.0 - t) + bank(i1) * t;
                        next[f][k] += running[f][j] * op;
                    }
                }
            }
            for f in 0..n {
                for k in 0..d {
                    let z = next[f][k] + C::new(layer.bias_re[k], layer.bias_im[k]);
                    acc[f][k] += C::new(cfg.activation.apply(z.re), cfg.activation.apply(z.im));
                }
            }
            running = next;
        }
        let nodes: Vec<Vec<f64>> = dft(&acc, 1.0).iter().map(|r| r.iter().map(|z| z.re / n as f64).collect()).collect();
        bands.push(nodes);
    }
    (0..n_utt)
        .map(|i| {
            let mut u = Vec::new();
            for m in 0..3 {
                u.extend(bands[0][m * n_utt + i].iter().chain(bands[1][m * n_utt + i].iter()).map(|v| v.max(0.0)));
            }
            let z = matvec(&params.head.weight, &u);
            (0..z.len()).map(|c| z[c] + params.head.bias[c]).collect()
        })
        .collect()
}

#[test]
fn matches_straight_line_oracle() {
    let cfg = small_cfg();
    let params = ModelParams::init(&cfg, &shape(), 31).unwrap();
    let conv = conversation(2, 32);
    let out = forward(&params, &cfg, &conv).unwrap().logits;
    let oracle = oracle_logits(&params, &cfg, &conv);
    for i in 0..2 {
        for c in 0..3 {
            assert!((out[[i, c]] - oracle[i][c]).abs() < 1e-10, "{} vs {}", out[[i, c]], oracle[i][c]);
        }
    }
}

#[test]
fn inactive_tensors_receive_no_gradient() {
    let conv = conversation(4, 3);
    let variants = [
        small_cfg(),
        ModelConfig {
            mode: FgoMode::Circulant,
            ..small_cfg()
        },
        ModelConfig {
            ablation: Ablation {
                spatial_baseline: true,
                no_speaker: true,
                ..Ablation::default()
            },
            ..small_cfg()
        },
        ModelConfig {
            ablation: Ablation {
                no_high_band: true,
                ..Ablation::default()
            },
            ..small_cfg()
        },
    ];
    for cfg in variants {
        let params = ModelParams::init(&cfg, &shape(), 5).unwrap();
        let (_, grad) = loss_and_grad(&params, &cfg, &conv).unwrap();
        let mut active_norm = std::collections::BTreeMap::<String, f64>::new();
        grad.visit("", &mut |name, _, g| {
            let norm: f64 = g.iter().map(|v| v * v).sum();
            if tensor_is_active(name, &cfg) {
                *active_norm.entry(name.split('.').next().unwrap().to_string()).or_default() += norm;
            } else {
                assert_eq!(norm, 0.0, "{name} is inactive but has gradient");
            }
        });
        for (group, norm) in active_norm {
            assert!(norm > 0.0, "group {group} is active but has no gradient");
        }
        let counts = active_parameter_counts(&params, &cfg);
        assert_eq!(counts.len(), 6);
        let total: usize = counts.iter().map(|c| c.1).sum();
        assert!(total < params.n_params());
    }
}
