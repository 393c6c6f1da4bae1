//! Forward passes for both architectures.
//!
//! The same arithmetic is written twice on purpose: once incrementally with
//! cached state for sampling ([`Decoder`]), once as tape operations for
//! training ([`record_sequence`]). Every inner loop accumulates in the same
//! index order in both paths, so the logits they produce for a given prefix
//! are bit-identical; tests assert exact equality rather than tolerance.
//!
//! Attention blocks are pre-norm with a single head:
//!
//! ```text
//! x  = embed[token] + pos[position]
//! x' = x  + Wo · attn(rms(x)·Wq, rms(x)·Wk, rms(x)·Wv)
//! x''= x' + W2 · tanh(rms(x')·W1)
//! ```
//!
//! The recurrent variant runs a gated update per position:
//!
//! ```text
//! z = σ(x·Wz + h·Uz),  r = σ(x·Wr + h·Ur)
//! c = tanh(x·Wc + (r⊙h)·Uc),  h ← h + z⊙(c − h)
//! ```
//!
//! Both end in a final rms norm and a linear head with bias.

use crate::tape::{NodeId, Tape, RMS_EPS};

use super::layout::{LayerRanges, ParamLayout};
use super::{Distribution, ModelConfig, ParamNodes, PolicyError, PolicyParams};

fn rms_norm_row(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let n = x.len();
    let ms = x.iter().map(|a| a * a).sum::<f64>() / n as f64;
    let r = (ms + RMS_EPS).sqrt();
    x.iter()
        .zip(gain)
        .map(|(xi, g)| xi / r * (1.0 + g))
        .collect()
}

/// `x (1,k) · w (k,n)`, accumulating over `k` in ascending order exactly like
/// the tape's matmul.
fn row_matmul(x: &[f64], w: &[f64], n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_out];
    for (l, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let wrow = &w[l * n_out..(l + 1) * n_out];
        for j in 0..n_out {
            out[j] += xv * wrow[j];
        }
    }
    out
}

fn add_rows(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone)]
enum State {
    /// Per-layer key/value caches, each a flat `(positions · d)` buffer.
    Attn { keys: Vec<Vec<f64>>, vals: Vec<Vec<f64>> },
    /// Per-layer hidden state.
    Gru { h: Vec<Vec<f64>> },
}

/// Gradient-free autoregressive decoder with cached per-layer state.
/// Cloning forks the decode at the current position, which lets one prompt
/// pass serve many sampled continuations.
#[derive(Clone)]
pub struct Decoder<'a> {
    params: &'a PolicyParams,
    layout: ParamLayout,
    pos: usize,
    state: State,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a PolicyParams) -> Result<Self, PolicyError> {
        params.config.validate()?;
        let layout = ParamLayout::of(&params.config);
        if params.values.len() != layout.total {
            return Err(PolicyError::ParamLengthMismatch {
                got: params.values.len(),
                want: layout.total,
            });
        }
        let n_layers = params.config.n_layers;
        let d = params.config.hidden_dim;
        let state = match layout.layers {
            LayerRanges::Attn(_) => State::Attn {
                keys: vec![Vec::new(); n_layers],
                vals: vec![Vec::new(); n_layers],
            },
            LayerRanges::Gru(_) => State::Gru {
                h: vec![vec![0.0; d]; n_layers],
            },
        };
        Ok(Self {
            params,
            layout,
            pos: 0,
            state,
        })
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consumes one token and returns the distribution over the next one.
    pub fn feed(&mut self, token: u32) -> Result<Distribution, PolicyError> {
        let params = self.params;
        let cfg = &params.config;
        if token as usize >= cfg.vocab_size {
            return Err(PolicyError::TokenOutOfRange {
                token,
                vocab_size: cfg.vocab_size,
            });
        }
        if self.pos >= cfg.context_len {
            return Err(PolicyError::PrefixTooLong {
                len: self.pos + 1,
                context_len: cfg.context_len,
            });
        }
        let d = cfg.hidden_dim;
        let vals = &params.values;
        let embed = &vals[self.layout.embed.clone()];
        let tok_row = &embed[token as usize * d..(token as usize + 1) * d];

        let x = match (&mut self.state, &self.layout.layers) {
            (State::Attn { keys, vals: vcache }, LayerRanges::Attn(layers)) => {
                let pos_table = &vals[self.layout.pos.clone()];
                let pos_row = &pos_table[self.pos * d..(self.pos + 1) * d];
                let mut x = add_rows(tok_row, pos_row);
                let scale = 1.0 / (d as f64).sqrt();
                for (l, layer) in layers.iter().enumerate() {
                    let n1 = rms_norm_row(&x, &vals[layer.ln1.clone()]);
                    let q = row_matmul(&n1, &vals[layer.wq.clone()], d);
                    let k = row_matmul(&n1, &vals[layer.wk.clone()], d);
                    let v = row_matmul(&n1, &vals[layer.wv.clone()], d);
                    keys[l].extend_from_slice(&k);
                    vcache[l].extend_from_slice(&v);
                    let count = self.pos + 1;
                    let mut scores = vec![0.0; count];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..count {
                        let krow = &keys[l][j * d..(j + 1) * d];
                        let mut s = 0.0;
                        for c in 0..d {
                            s += q[c] * krow[c];
                        }
                        let s = s * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut exps = vec![0.0; count];
                    let mut denom = 0.0;
                    for j in 0..count {
                        let e = (scores[j] - max).exp();
                        exps[j] = e;
                        denom += e;
                    }
                    let mut a = vec![0.0; d];
                    for j in 0..count {
                        let p = exps[j] / denom;
                        let vrow = &vcache[l][j * d..(j + 1) * d];
                        for c in 0..d {
                            a[c] += p * vrow[c];
                        }
                    }
                    let o = row_matmul(&a, &vals[layer.wo.clone()], d);
                    let x1 = add_rows(&x, &o);
                    let n2 = rms_norm_row(&x1, &vals[layer.ln2.clone()]);
                    let f = layer.w_mlp1.len() / d;
                    let m1: Vec<f64> = row_matmul(&n2, &vals[layer.w_mlp1.clone()], f)
                        .iter()
                        .map(|v| v.tanh())
                        .collect();
                    let m2 = row_matmul(&m1, &vals[layer.w_mlp2.clone()], d);
                    x = add_rows(&x1, &m2);
                }
                x
            }
            (State::Gru { h }, LayerRanges::Gru(layers)) => {
                let mut x = tok_row.to_vec();
                for (l, layer) in layers.iter().enumerate() {
                    let hv = &h[l];
                    let z: Vec<f64> = add_rows(
                        &row_matmul(&x, &vals[layer.wz.clone()], d),
                        &row_matmul(hv, &vals[layer.uz.clone()], d),
                    )
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect();
                    let r: Vec<f64> = add_rows(
                        &row_matmul(&x, &vals[layer.wr.clone()], d),
                        &row_matmul(hv, &vals[layer.ur.clone()], d),
                    )
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect();
                    let rh: Vec<f64> = r.iter().zip(hv).map(|(a, b)| a * b).collect();
                    let c: Vec<f64> = add_rows(
                        &row_matmul(&x, &vals[layer.wc.clone()], d),
                        &row_matmul(&rh, &vals[layer.uc.clone()], d),
                    )
                    .iter()
                    .map(|v| v.tanh())
                    .collect();
                    let h_new: Vec<f64> = hv
                        .iter()
                        .zip(z.iter().zip(&c))
                        .map(|(hj, (zj, cj))| hj + zj * (cj - hj))
                        .collect();
                    h[l] = h_new.clone();
                    x = h_new;
                }
                x
            }
            _ => unreachable!("state matches layout by construction"),
        };

        self.pos += 1;
        let nf = rms_norm_row(&x, &vals[self.layout.lnf.clone()]);
        let v_out = cfg.vocab_size;
        let mut logits = row_matmul(&nf, &vals[self.layout.head_w.clone()], v_out);
        let bias = &vals[self.layout.head_b.clone()];
        for j in 0..v_out {
            logits[j] += bias[j];
        }
        Ok(Distribution::from_logits(&logits))
    }
}

/// Tape handles produced by [`record_sequence`]: everything downstream losses
/// need about the response positions of one sequence.
pub struct SeqForward {
    /// `(r, vocab)` log-probabilities, row j predicting response token j.
    pub logp: NodeId,
    /// `(r, 1)` log-probability of each realized response token.
    pub picked_logp: NodeId,
    /// `(r, 1)` per-position policy entropy in nats.
    pub entropies: NodeId,
    /// `(r, vocab)` raw logits, exposed for consistency tests.
    pub logits: NodeId,
}

/// Records the full-sequence forward pass of `tokens` on `tape` and returns
/// differentiable views of the response span `tokens[response_start..]`.
pub fn record_sequence(
    tape: &mut Tape,
    nodes: &ParamNodes,
    config: &ModelConfig,
    tokens: &[u32],
    response_start: usize,
) -> SeqForward {
    let t_len = tokens.len();
    assert!(
        response_start >= 1 && response_start < t_len,
        "response span must be preceded by at least one prompt token"
    );
    assert!(t_len <= config.context_len, "sequence exceeds context");
    let d = config.hidden_dim;
    let layout = nodes.layout();
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();

    let embed = nodes.leaf(&layout.embed);
    let r_len = t_len - response_start;
    let block = match &layout.layers {
        LayerRanges::Attn(layers) => {
            let pos_ids: Vec<usize> = (0..t_len).collect();
            let pos = nodes.leaf(&layout.pos);
            let tok_x = tape.embed_lookup(embed, &ids);
            let pos_x = tape.embed_lookup(pos, &pos_ids);
            let mut x = tape.add(tok_x, pos_x);
            let scale = 1.0 / (d as f64).sqrt();
            for layer in layers {
                let n1 = tape.rms_norm(x, nodes.leaf(&layer.ln1));
                let q = tape.matmul(n1, nodes.leaf(&layer.wq));
                let k = tape.matmul(n1, nodes.leaf(&layer.wk));
                let v = tape.matmul(n1, nodes.leaf(&layer.wv));
                let a = tape.causal_attention(q, k, v, scale);
                let o = tape.matmul(a, nodes.leaf(&layer.wo));
                let x1 = tape.add(x, o);
                let n2 = tape.rms_norm(x1, nodes.leaf(&layer.ln2));
                let p1 = tape.matmul(n2, nodes.leaf(&layer.w_mlp1));
                let m1 = tape.tanh(p1);
                let m2 = tape.matmul(m1, nodes.leaf(&layer.w_mlp2));
                x = tape.add(x1, m2);
            }
            tape.slice_rows(x, response_start - 1, r_len)
        }
        LayerRanges::Gru(layers) => {
            let x_all = tape.embed_lookup(embed, &ids);
            let mut h: Vec<NodeId> = (0..config.n_layers)
                .map(|_| tape.leaf(1, d, vec![0.0; d]))
                .collect();
            let mut top_rows: Vec<NodeId> = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let mut x = tape.slice_rows(x_all, t, 1);
                for (l, layer) in layers.iter().enumerate() {
                    let xz = tape.matmul(x, nodes.leaf(&layer.wz));
                    let hz = tape.matmul(h[l], nodes.leaf(&layer.uz));
                    let zs = tape.add(xz, hz);
                    let z = tape.sigmoid(zs);
                    let xr = tape.matmul(x, nodes.leaf(&layer.wr));
                    let hr = tape.matmul(h[l], nodes.leaf(&layer.ur));
                    let rs = tape.add(xr, hr);
                    let r = tape.sigmoid(rs);
                    let rh = tape.mul(r, h[l]);
                    let xc = tape.matmul(x, nodes.leaf(&layer.wc));
                    let hc = tape.matmul(rh, nodes.leaf(&layer.uc));
                    let cs = tape.add(xc, hc);
                    let c = tape.tanh(cs);
                    let delta = tape.sub(c, h[l]);
                    let zd = tape.mul(z, delta);
                    let h_new = tape.add(h[l], zd);
                    h[l] = h_new;
                    x = h_new;
                }
                top_rows.push(x);
            }
            let needed = &top_rows[response_start - 1..t_len - 1];
            tape.concat_rows(needed)
        }
    };

    let nf = tape.rms_norm(block, nodes.leaf(&layout.lnf));
    let mm = tape.matmul(nf, nodes.leaf(&layout.head_w));
    let logits = tape.add_row_broadcast(mm, nodes.leaf(&layout.head_b));
    let logp = tape.log_softmax_rows(logits);
    let targets: Vec<usize> = ids[response_start..].to_vec();
    let picked_logp = tape.gather_per_row(logp, &targets);
    let entropies = tape.entropy_rows(logp);
    SeqForward {
        logp,
        picked_logp,
        entropies,
        logits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{forward_distribution, init_params, Arch};

    fn small_config(arch: Arch) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            context_len: 32,
            hidden_dim: 8,
            n_layers: 2,
            arch,
        }
    }

    #[test]
    fn incremental_and_recorded_logits_agree_bitwise() {
        for arch in [Arch::TinyAttention, Arch::GruLike] {
            let cfg = small_config(arch);
            let params = init_params(&cfg, 42).unwrap();
            let tokens: Vec<u32> = vec![3, 7, 1, 9, 0, 5, 11, 2, 4];
            let response_start = 4;

            let mut tape = Tape::new();
            let nodes = ParamNodes::record(&mut tape, &params).unwrap();
            let fwd = record_sequence(&mut tape, &nodes, &cfg, &tokens, response_start);
            let recorded = tape.value(fwd.logits).to_vec();

            let mut dec = Decoder::new(&params).unwrap();
            for (t, &tok) in tokens.iter().enumerate() {
                let dist = dec.feed(tok).unwrap();
                if t + 1 >= response_start && t + 1 < tokens.len() {
                    let row = t + 1 - response_start;
                    let rec = Distribution::from_logits(
                        &recorded[row * cfg.vocab_size..(row + 1) * cfg.vocab_size],
                    );
                    assert_eq!(
                        dist.probs(),
                        rec.probs(),
                        "{arch:?} row {row} diverged between decode paths"
                    );
                }
            }
        }
    }

    #[test]
    fn fresh_params_are_uniform_for_any_prefix() {
        let cfg = small_config(Arch::TinyAttention);
        let params = init_params(&cfg, 7).unwrap();
        let dist = forward_distribution(&params, &[0, 5, 3]).unwrap();
        for p in dist.probs() {
            assert!((p - 1.0 / cfg.vocab_size as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn recorded_entropy_matches_distribution_entropy() {
        let cfg = small_config(Arch::GruLike);
        let mut params = init_params(&cfg, 3).unwrap();
        // Give the head nonzero weights so entropies are nontrivial.
        let layout = ParamLayout::of(&cfg);
        for (i, v) in params.values[layout.head_w.clone()].iter_mut().enumerate() {
            *v = ((i as f64) * 0.37).sin() * 0.8;
        }
        let tokens: Vec<u32> = vec![1, 2, 3, 4, 5];
        let mut tape = Tape::new();
        let nodes = ParamNodes::record(&mut tape, &params).unwrap();
        let fwd = record_sequence(&mut tape, &nodes, &cfg, &tokens, 2);
        let ent = tape.value(fwd.entropies).to_vec();
        for (row, &h) in ent.iter().enumerate() {
            let dist = forward_distribution(&params, &tokens[..2 + row]).unwrap();
            assert!((h - dist.entropy()).abs() < 1e-12);
        }
    }
}
