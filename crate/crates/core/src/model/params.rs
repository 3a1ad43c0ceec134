use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Scalar};
use crate::common::RngStream;
use crate::tokenizer::IdLayout;

/// A contiguous run of the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub start: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a, T>(&self, v: &'a [T]) -> &'a [T] {
        &v[self.start..self.start + self.len]
    }

    #[inline]
    pub fn of_mut<'a, T>(&self, v: &'a mut [T]) -> &'a mut [T] {
        &mut v[self.start..self.start + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the parameter buffer.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub qkv_w: Slot,
    pub qkv_b: Slot,
    pub proj_w: Slot,
    pub proj_b: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub fc_w: Slot,
    pub fc_b: Slot,
    pub fc2_w: Slot,
    pub fc2_b: Slot,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub wte: Slot,
    pub wpe: Slot,
    pub patch_w: Slot,
    pub patch_b: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub head_w: Slot,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder {
    tensors: Vec<TensorInfo>,
    inits: Vec<Init>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            start: self.total,
            len,
        };
        self.tensors.push(TensorInfo {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        });
        self.inits.push(init);
        self.total += len;
        slot
    }
}

fn build(cfg: &ModelConfig, vocab: usize) -> (Layout, Vec<Init>) {
    let c = cfg.d_model;
    let std = 0.02;
    let resid_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
    let mut b = Builder {
        tensors: Vec::new(),
        inits: Vec::new(),
        total: 0,
    };
    let wte = b.add("wte", &[vocab, c], Init::Normal(std));
    let wpe = b.add("wpe", &[cfg.max_seq_len, c], Init::Normal(std));
    let patch_w = b.add(
        "patch_w",
        &[c, cfg.patch_dim()],
        Init::Normal(1.0 / (cfg.patch_dim() as f64).sqrt()),
    );
    let patch_b = b.add("patch_b", &[c], Init::Zeros);
    let layers = (0..cfg.layers)
        .map(|l| {
            let n = |s: &str| format!("h{l}.{s}");
            LayerSlots {
                ln1_g: b.add(n("ln1_g"), &[c], Init::Ones),
                ln1_b: b.add(n("ln1_b"), &[c], Init::Zeros),
                qkv_w: b.add(n("qkv_w"), &[3 * c, c], Init::Normal(std)),
                qkv_b: b.add(n("qkv_b"), &[3 * c], Init::Zeros),
                proj_w: b.add(n("proj_w"), &[c, c], Init::Normal(resid_std)),
                proj_b: b.add(n("proj_b"), &[c], Init::Zeros),
                ln2_g: b.add(n("ln2_g"), &[c], Init::Ones),
                ln2_b: b.add(n("ln2_b"), &[c], Init::Zeros),
                fc_w: b.add(n("fc_w"), &[cfg.ffn, c], Init::Normal(std)),
                fc_b: b.add(n("fc_b"), &[cfg.ffn], Init::Zeros),
                fc2_w: b.add(n("fc2_w"), &[c, cfg.ffn], Init::Normal(resid_std)),
                fc2_b: b.add(n("fc2_b"), &[c], Init::Zeros),
            }
        })
        .collect();
    let lnf_g = b.add("lnf_g", &[c], Init::Ones);
    let lnf_b = b.add("lnf_b", &[c], Init::Zeros);
    let head_w = b.add("head_w", &[vocab, c], Init::Normal(std));
    (
        Layout {
            wte,
            wpe,
            patch_w,
            patch_b,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            tensors: b.tensors,
            total: b.total,
        },
        b.inits,
    )
}

impl Layout {
    pub fn new(cfg: &ModelConfig, vocab: usize) -> Self {
        build(cfg, vocab).0
    }
}

/// Flat parameter buffer plus the named tensor directory over it.
#[derive(Debug, Clone)]
pub struct Params<F> {
    pub(crate) layout: Layout,
    pub values: Vec<F>,
}

const PATCH_POSITION_AMP: f64 = 1.0;
const BIN_CODE_AMP: f64 = 0.1;

/// `out[2i], out[2i + 1] = sin, cos(t / base^(2i / n))`, scaled by `amp`.
fn sinusoid(t: f64, out: &mut [f64], base: f64, amp: f64) {
    let n = out.len();
    for i in 0..n / 2 {
        let w = base.powf(-(2.0 * i as f64) / n as f64);
        out[2 * i] = amp * (t * w).sin();
        out[2 * i + 1] = amp * (t * w).cos();
    }
}

/// Patch positions get a 2D sinusoid code (rows in the first half, columns in the second);
/// robot-token embeddings and output rows get a 1D code of the bin index, so nearby bins
/// start out similar.
fn structured_rows(cfg: &ModelConfig, ids: &IdLayout, layout: &Layout, values: &mut [f64]) {
    let c = cfg.d_model;
    let half = c / 2;
    let (gr, gc) = cfg.patch_grid();
    let mut buf = vec![0.0; half];
    for r in 0..gr {
        for col in 0..gc {
            let p = 1 + r * gc + col;
            if p >= cfg.max_seq_len {
                continue;
            }
            let row = &mut values[layout.wpe.start + p * c..layout.wpe.start + (p + 1) * c];
            sinusoid(r as f64, &mut buf, 100.0, PATCH_POSITION_AMP);
            row[..half].iter_mut().zip(&buf).for_each(|(v, s)| *v += s);
            sinusoid(col as f64, &mut buf, 100.0, PATCH_POSITION_AMP);
            row[half..2 * half].iter_mut().zip(&buf).for_each(|(v, s)| *v += s);
        }
    }
    let mut code = vec![0.0; c];
    for b in 0..(ids.vocab_size - ids.bin_offset) as usize {
        sinusoid(b as f64, &mut code, 1000.0, BIN_CODE_AMP);
        let id = ids.bin_offset as usize + b;
        for slot in [layout.wte, layout.head_w] {
            values[slot.start + id * c..slot.start + (id + 1) * c].copy_from_slice(&code);
        }
    }
}

impl<F: Scalar> Params<F> {
    pub fn init(cfg: &ModelConfig, ids: &IdLayout, rng: RngStream) -> Self {
        let vocab = ids.vocab_size as usize;
        let (layout, inits) = build(cfg, vocab);
        let mut r = rng.rng();
        let mut values = Vec::with_capacity(layout.total);
        for (t, init) in layout.tensors.iter().zip(inits) {
            let len: usize = t.shape.iter().product();
            match init {
                Init::Zeros => values.extend(std::iter::repeat_n(0.0, len)),
                Init::Ones => values.extend(std::iter::repeat_n(1.0, len)),
                Init::Normal(s) => {
                    let d = Normal::new(0.0, s).expect("positive std");
                    values.extend((0..len).map(|_| d.sample(&mut r)));
                }
            }
        }
        structured_rows(cfg, ids, &layout, &mut values);
        Params {
            layout,
            values: values.into_iter().map(F::of).collect(),
        }
    }

    pub fn from_values(cfg: &ModelConfig, vocab: usize, values: Vec<F>) -> Option<Self> {
        let layout = Layout::new(cfg, vocab);
        (values.len() == layout.total).then_some(Params { layout, values })
    }

    pub fn zeros_like(&self) -> Vec<F> {
        vec![F::zero(); self.values.len()]
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| G::of(v.f64())).collect(),
        }
    }
}
