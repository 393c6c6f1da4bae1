//! Flat parameter layout for both policy architectures.
//!
//! Every tensor occupies a contiguous range of the parameter vector; the
//! ranges are a pure function of [`ModelConfig`], so checkpoints only need the
//! config plus the raw values. Initialization draws matrix weights from
//! N(0, 1/fan_in) and zero-initializes all normalization gains (stored as an
//! offset from 1) plus the output head, which makes a fresh policy exactly
//! uniform over the vocabulary.

use std::ops::Range;

use super::{Arch, ModelConfig};

/// One tensor's slot in the flat vector. `fan_in = None` means zero-init.
#[derive(Debug, Clone)]
pub struct TensorInit {
    pub range: Range<usize>,
    pub rows: usize,
    pub cols: usize,
    pub fan_in: Option<usize>,
}

/// Ranges for one attention block.
#[derive(Debug, Clone)]
pub struct AttnLayer {
    pub ln1: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2: Range<usize>,
    pub w_mlp1: Range<usize>,
    pub w_mlp2: Range<usize>,
}

/// Ranges for one gated recurrent block.
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub wz: Range<usize>,
    pub uz: Range<usize>,
    pub wr: Range<usize>,
    pub ur: Range<usize>,
    pub wc: Range<usize>,
    pub uc: Range<usize>,
}

#[derive(Debug, Clone)]
pub enum LayerRanges {
    Attn(Vec<AttnLayer>),
    Gru(Vec<GruLayer>),
}

/// Complete map from logical tensors to flat-vector ranges.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub embed: Range<usize>,
    /// Learned positional table; empty range for the recurrent architecture.
    pub pos: Range<usize>,
    pub layers: LayerRanges,
    pub lnf: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub tensors: Vec<TensorInit>,
    pub total: usize,
}

struct Builder {
    cursor: usize,
    tensors: Vec<TensorInit>,
}

impl Builder {
    fn alloc(&mut self, rows: usize, cols: usize, fan_in: Option<usize>) -> Range<usize> {
        let range = self.cursor..self.cursor + rows * cols;
        self.cursor = range.end;
        self.tensors.push(TensorInit {
            range: range.clone(),
            rows,
            cols,
            fan_in,
        });
        range
    }
}

impl ParamLayout {
    pub fn of(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let v = config.vocab_size;
        let mut b = Builder {
            cursor: 0,
            tensors: Vec::new(),
        };
        let embed = b.alloc(v, d, Some(d));
        let (pos, layers) = match config.arch {
            Arch::TinyAttention => {
                let pos = b.alloc(config.context_len, d, Some(d));
                let f = 2 * d;
                let layers = (0..config.n_layers)
                    .map(|_| AttnLayer {
                        ln1: b.alloc(1, d, None),
                        wq: b.alloc(d, d, Some(d)),
                        wk: b.alloc(d, d, Some(d)),
                        wv: b.alloc(d, d, Some(d)),
                        wo: b.alloc(d, d, Some(d)),
                        ln2: b.alloc(1, d, None),
                        w_mlp1: b.alloc(d, f, Some(d)),
                        w_mlp2: b.alloc(f, d, Some(f)),
                    })
                    .collect();
                (pos, LayerRanges::Attn(layers))
            }
            Arch::GruLike => {
                let layers = (0..config.n_layers)
                    .map(|_| GruLayer {
                        wz: b.alloc(d, d, Some(d)),
                        uz: b.alloc(d, d, Some(d)),
                        wr: b.alloc(d, d, Some(d)),
                        ur: b.alloc(d, d, Some(d)),
                        wc: b.alloc(d, d, Some(d)),
                        uc: b.alloc(d, d, Some(d)),
                    })
                    .collect();
                (0..0, LayerRanges::Gru(layers))
            }
        };
        let lnf = b.alloc(1, d, None);
        let head_w = b.alloc(d, v, None);
        let head_b = b.alloc(1, v, None);
        ParamLayout {
            embed,
            pos,
            layers,
            lnf,
            head_w,
            head_b,
            total: b.cursor,
            tensors: b.tensors,
        }
    }
}
