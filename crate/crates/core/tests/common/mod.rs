//! Independent scalar reference implementations shared by the integration
//! tests.

#![allow(dead_code)]

use cmer::data::synthetic::{MotifBank, MOTIFS};
use cmer::data::SyntheticSpec;
use cmer::layers::{LayerNorm, Linear, LstmDirection};
use cmer::model::CrossModalAttention;
use cmer::{FeatureSequence, ParamStore, UtteranceSample};

pub type Mat = Vec<Vec<f64>>;

fn data(store: &ParamStore<f64>, id: cmer::tensor::ParamId) -> &[f64] {
    store.tensor(id).data()
}

pub fn linear(store: &ParamStore<f64>, l: &Linear, x: &Mat) -> Mat {
    let (w, b) = (data(store, l.weight), data(store, l.bias));
    x.iter()
        .map(|row| {
            (0..l.out_features)
                .map(|o| b[o] + (0..l.in_features).map(|i| w[o * l.in_features + i] * row[i]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(store: &ParamStore<f64>, ln: &LayerNorm, x: &Mat) -> Mat {
    let (g, s) = (data(store, ln.gain), data(store, ln.shift));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + ln.eps).sqrt() * g[i] + s[i])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Full attention block by explicit loops:
/// per head `softmax(q k^T / sqrt(d))` over the unmasked keys, weighted sum
/// of values, output projection, residual, feed-forward, residual.
/// Returns `(out, context, attn[head][query][key])`.
pub fn cma_block(
    store: &ParamStore<f64>,
    block: &CrossModalAttention,
    query: &Mat,
    kv: &Mat,
    mask: Option<&[bool]>,
) -> (Mat, Mat, Vec<Mat>) {
    let qn = layer_norm(store, &block.ln_q, query);
    let kvn = layer_norm(store, &block.ln_kv, kv);
    let q = linear(store, &block.query, &qn);
    let k = linear(store, &block.key, &kvn);
    let v = linear(store, &block.value, &kvn);
    let d = block.head_dim;
    let mut heads = vec![vec![0.0; block.heads * d]; query.len()];
    let mut attn = Vec::new();
    for h in 0..block.heads {
        let mut weights = Vec::new();
        for (t, qrow) in q.iter().enumerate() {
            let scores: Vec<Option<f64>> = k
                .iter()
                .enumerate()
                .map(|(j, krow)| {
                    let valid = mask.is_none_or(|m| m[j]);
                    valid.then(|| (0..d).map(|c| qrow[h * d + c] * krow[h * d + c]).sum::<f64>() / (d as f64).sqrt())
                })
                .collect();
            let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = exps.iter().sum();
            let row: Vec<f64> = exps.iter().map(|e| e / z).collect();
            for c in 0..d {
                heads[t][h * d + c] = (0..k.len()).map(|j| row[j] * v[j][h * d + c]).sum();
            }
            weights.push(row);
        }
        attn.push(weights);
    }
    let context = linear(store, &block.out, &heads);
    let h1 = if block.residual { add(&context, query) } else { context.clone() };
    let f: Mat = linear(store, &block.ffn1, &h1)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let f = linear(store, &block.ffn2, &f);
    let out = if block.residual { add(&h1, &f) } else { f };
    (out, context, attn)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One LSTM direction over `frames`, zero initial state.
pub fn lstm_direction(store: &ParamStore<f64>, dir: &LstmDirection, frames: &Mat, hidden: usize) -> Mat {
    let (w_ih, w_hh, bias) = (data(store, dir.w_ih), data(store, dir.w_hh), data(store, dir.bias));
    let d = frames[0].len();
    let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
    let mut out = Vec::new();
    for x in frames {
        let z: Vec<f64> = (0..4 * hidden)
            .map(|r| {
                bias[r]
                    + (0..d).map(|k| w_ih[r * d + k] * x[k]).sum::<f64>()
                    + (0..hidden).map(|k| w_hh[r * hidden + k] * h[k]).sum::<f64>()
            })
            .collect();
        for u in 0..hidden {
            let (i, f) = (sigmoid(z[u]), sigmoid(z[hidden + u]));
            let (g, o) = (z[2 * hidden + u].tanh(), sigmoid(z[3 * hidden + u]));
            c[u] = f * c[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        out.push(h.clone());
    }
    out
}

/// Bidirectional output rows `[h_fwd ; h_bwd]`.
pub fn bilstm(store: &ParamStore<f64>, lstm: &cmer::layers::BiLstm, frames: &Mat) -> Mat {
    let fwd = lstm_direction(store, &lstm.fwd, frames, lstm.hidden);
    let rev: Mat = frames.iter().rev().cloned().collect();
    let mut bwd = lstm_direction(store, &lstm.bwd, &rev, lstm.hidden);
    bwd.reverse();
    fwd.into_iter().zip(bwd).map(|(mut f, b)| {
        f.extend(b);
        f
    }).collect()
}

/// Matched-filter decoder: the motif whose pattern, held for `len` frames
/// at the best offset, correlates most with the sequence.
pub fn nearest_motif(seq: &FeatureSequence, bank: &[Vec<f32>], band: usize, len: usize) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, pattern) in bank.iter().enumerate().take(MOTIFS) {
        let off = MotifBank::channel_offset(k, band);
        for start in 0..=seq.frames - len {
            let score: f64 = (start..start + len)
                .map(|t| {
                    let frame = seq.frame(t);
                    pattern.iter().enumerate().map(|(c, &p)| (frame[off + c] * p) as f64).sum::<f64>()
                })
                .sum();
            if score > best.0 {
                best = (score, k);
            }
        }
    }
    best.1
}

/// `(audio_bit, text_bit)` recovered by the matched filters.
pub fn decode_bits(spec: &SyntheticSpec, bank: &MotifBank, s: &UtteranceSample) -> (usize, usize) {
    let a = nearest_motif(&s.audio, &bank.audio, spec.audio_band, spec.audio_motif_frames);
    let t = nearest_motif(&s.text, &bank.text, spec.text_band, spec.text_motif_frames);
    (a >> 1, t >> 1)
}

pub fn mat(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Mat {
    (0..rows).map(|r| (0..cols).map(|c| f(r, c)).collect()).collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
