use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{LayerSlots, Params};
use super::scalar::{linear, linear_backward};
use super::sequence::{assemble_sequence, Sequence, SequenceItem};
use super::{ModelConfig, Scalar};
use crate::common::{ActionState, RngStream};
use crate::error::{Error, Result};
use crate::sim::Observation;
use crate::tokenizer::TokenizerSpec;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Several sequences packed row-wise; attention never crosses a sequence boundary.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    spans: Vec<(usize, usize)>,
    pos: Vec<usize>,
    tokens: Vec<Option<u32>>,
    patch_rows: Vec<usize>,
    patches: Vec<F>,
    patch_dim: usize,
    targets: Vec<(usize, u32)>,
}

impl<F: Scalar> Batch<F> {
    pub fn new<'a>(seqs: impl IntoIterator<Item = &'a Sequence>) -> Self {
        let mut b = Batch {
            spans: Vec::new(),
            pos: Vec::new(),
            tokens: Vec::new(),
            patch_rows: Vec::new(),
            patches: Vec::new(),
            patch_dim: 0,
            targets: Vec::new(),
        };
        for seq in seqs {
            let start = b.pos.len();
            let np = seq.num_patches();
            if np > 0 {
                b.patch_dim = seq.patches.len() / np;
            }
            for (p, item) in seq.items.iter().enumerate() {
                b.pos.push(p);
                match *item {
                    SequenceItem::Token(id) => b.tokens.push(Some(id)),
                    SequenceItem::Patch(i) => {
                        b.tokens.push(None);
                        b.patch_rows.push(start + p);
                        let pd = b.patch_dim;
                        b.patches
                            .extend(seq.patches[i * pd..(i + 1) * pd].iter().map(|&v| F::of(v as f64)));
                    }
                }
            }
            b.targets
                .extend(seq.targets().into_iter().map(|(p, id)| (start + p, id)));
            b.spans.push((start, seq.len()));
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.pos.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.spans.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats<F> {
    /// Mean cross-entropy over supervised positions.
    pub loss: F,
    /// Supervised positions whose unconstrained argmax equals the target.
    pub correct: usize,
    pub count: usize,
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone)]
pub struct DecodeCache<F> {
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    len: usize,
}

impl<F> DecodeCache<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

struct Norm<F> {
    y: Vec<F>,
    mean: Vec<F>,
    rstd: Vec<F>,
}

impl<F: Scalar> Norm<F> {
    fn new(x: &[F], g: &[F], b: &[F], c: usize) -> Self {
        let rows = x.len() / c;
        let mut n = Norm {
            y: vec![F::zero(); x.len()],
            mean: vec![F::zero(); rows],
            rstd: vec![F::zero(); rows],
        };
        layernorm(x, g, b, c, &mut n.y, &mut n.mean, &mut n.rstd);
        n
    }
}

struct LayerCache<F> {
    x: Vec<F>,
    ln1: Norm<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    atty: Vec<F>,
    mask1: Option<Vec<F>>,
    x2: Vec<F>,
    ln2: Norm<F>,
    fc: Vec<F>,
    tanh: Vec<F>,
    act: Vec<F>,
    mask2: Option<Vec<F>>,
}

struct ForwardCache<F> {
    layers: Vec<LayerCache<F>>,
    x_final: Vec<F>,
    lnf: Norm<F>,
    hidden: Vec<F>,
    probs: Vec<F>,
}

fn layernorm<F: Scalar>(x: &[F], g: &[F], b: &[F], c: usize, y: &mut [F], mean: &mut [F], rstd: &mut [F]) {
    let n = F::of(c as f64);
    let eps = F::of(LN_EPS);
    for (r, (xr, yr)) in x.chunks_exact(c).zip(y.chunks_exact_mut(c)).enumerate() {
        let m = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / n;
        let s = F::one() / (var + eps).sqrt();
        for i in 0..c {
            yr[i] = (xr[i] - m) * s * g[i] + b[i];
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    norm: &Norm<F>,
    g: &[F],
    c: usize,
    dx: &mut [F],
    dg: &mut [F],
    db: &mut [F],
) {
    let n = F::of(c as f64);
    let mut dxhat = vec![F::zero(); c];
    let mut xhat = vec![F::zero(); c];
    for r in 0..dy.len() / c {
        let (dyr, xr) = (&dy[r * c..(r + 1) * c], &x[r * c..(r + 1) * c]);
        let (m, s) = (norm.mean[r], norm.rstd[r]);
        let mut a = F::zero();
        let mut bsum = F::zero();
        for i in 0..c {
            xhat[i] = (xr[i] - m) * s;
            dxhat[i] = dyr[i] * g[i];
            a = a + dxhat[i];
            bsum = bsum + dxhat[i] * xhat[i];
            dg[i] = dg[i] + dyr[i] * xhat[i];
            db[i] = db[i] + dyr[i];
        }
        let (a, bsum) = (a / n, bsum / n);
        let dxr = &mut dx[r * c..(r + 1) * c];
        for i in 0..c {
            dxr[i] = dxr[i] + s * (dxhat[i] - a - xhat[i] * bsum);
        }
    }
}

fn gelu<F: Scalar>(x: F) -> F {
    F::of(0.5) * x * (F::one() + gelu_tanh(x))
}

fn gelu_tanh<F: Scalar>(x: F) -> F {
    let (k, c) = (F::of(GELU_K), F::of(GELU_C));
    let e = (F::of(2.0) * k * (x + c * x * x * x)).exp();
    F::one() - F::of(2.0) / (e + F::one())
}

/// Derivative of [`gelu`] given `t = gelu_tanh(x)`.
fn gelu_grad<F: Scalar>(x: F, t: F) -> F {
    let (k, c) = (F::of(GELU_K), F::of(GELU_C));
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x)
}

/// Causal attention of one query row over `n` keys, all heads.
///
/// `k` and `v` rows start every `stride` elements; probabilities go to `probs[h * n + u]`.
#[allow(clippy::too_many_arguments)]
fn attend_row<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    stride: usize,
    n: usize,
    heads: usize,
    hd: usize,
    out: &mut [F],
    probs: &mut [F],
) {
    let scale = F::one() / F::of(hd as f64).sqrt();
    for h in 0..heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * n..(h + 1) * n];
        let mut max = F::neg_infinity();
        for (u, pu) in p.iter_mut().enumerate() {
            let kh = &k[u * stride + h * hd..u * stride + (h + 1) * hd];
            let s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<F>() * scale;
            *pu = s;
            max = max.max(s);
        }
        let mut z = F::zero();
        for pu in p.iter_mut() {
            *pu = (*pu - max).exp();
            z = z + *pu;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.iter_mut().for_each(|o| *o = F::zero());
        for (u, pu) in p.iter_mut().enumerate() {
            *pu = *pu / z;
            let vh = &v[u * stride + h * hd..u * stride + (h + 1) * hd];
            for (o, &vv) in oh.iter_mut().zip(vh) {
                *o = *o + *pu * vv;
            }
        }
    }
}

/// Full causal attention over one sequence's fused `qkv` rows; `probs` holds `heads` dense `t x t` blocks.
fn attend_sequence<F: Scalar>(qkv: &[F], t: usize, c: usize, heads: usize, out: &mut [F], probs: &mut [F]) {
    let hd = c / heads;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let s3 = 3 * c as isize;
    let tt = t as isize;
    for h in 0..heads {
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        F::gemm(t, hd, t, &qkv[h * hd..], s3, 1, &qkv[c + h * hd..], 1, s3, p, tt, 1, false);
        for i in 0..t {
            let row = &mut p[i * t..(i + 1) * t];
            let live = &mut row[..=i];
            let max = live.iter().fold(F::neg_infinity(), |m, &v| m.max(v * scale));
            let mut z = F::zero();
            for v in live.iter_mut() {
                *v = (*v * scale - max).exp();
                z = z + *v;
            }
            live.iter_mut().for_each(|v| *v = *v / z);
            row[i + 1..].iter_mut().for_each(|v| *v = F::zero());
        }
        F::gemm(t, t, hd, p, tt, 1, &qkv[2 * c + h * hd..], s3, 1, &mut out[h * hd..], c as isize, 1, false);
    }
}

fn attend_sequence_backward<F: Scalar>(
    qkv: &[F],
    probs: &[F],
    dout: &[F],
    t: usize,
    c: usize,
    heads: usize,
    dqkv: &mut [F],
) {
    let hd = c / heads;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let s3 = 3 * c as isize;
    let (tt, cc) = (t as isize, c as isize);
    let mut ds = vec![F::zero(); t * t];
    for h in 0..heads {
        let p = &probs[h * t * t..(h + 1) * t * t];
        let (qo, ko, vo) = (h * hd, c + h * hd, 2 * c + h * hd);
        // dP = dO V^T
        F::gemm(t, hd, t, &dout[h * hd..], cc, 1, &qkv[vo..], 1, s3, &mut ds, tt, 1, false);
        // dV += P^T dO
        F::gemm(t, t, hd, p, 1, tt, &dout[h * hd..], cc, 1, &mut dqkv[vo..], s3, 1, true);
        for i in 0..t {
            let pr = &p[i * t..(i + 1) * t];
            let dr = &mut ds[i * t..(i + 1) * t];
            let dot = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum::<F>();
            for u in 0..t {
                dr[u] = if u <= i { pr[u] * (dr[u] - dot) * scale } else { F::zero() };
            }
        }
        // dQ += dS K, dK += dS^T Q
        F::gemm(t, t, hd, &ds, tt, 1, &qkv[ko..], s3, 1, &mut dqkv[qo..], s3, 1, true);
        F::gemm(t, t, hd, &ds, 1, tt, &qkv[qo..], s3, 1, &mut dqkv[ko..], s3, 1, true);
    }
}

fn dropout_mask<F: Scalar>(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect()
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Transformer weights together with the configuration and tokenizer they were built for.
#[derive(Debug, Clone)]
pub struct Model<F = f32> {
    pub config: ModelConfig,
    pub tokenizer: TokenizerSpec,
    pub params: Params<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, tokenizer: TokenizerSpec, rng: RngStream) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, &tokenizer.layout(), rng);
        Ok(Model {
            config,
            tokenizer,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, tokenizer: TokenizerSpec, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let params = Params::from_values(&config, tokenizer.vocab_size(), params.values)
            .ok_or_else(|| Error::invalid("parameter count does not match the model config"))?;
        Ok(Model {
            config,
            tokenizer,
            params,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config,
            tokenizer: self.tokenizer.clone(),
            params: self.params.cast(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn sequence(&self, obs: &Observation, instruction: &[u32], target: Option<&[u32; 7]>) -> Result<Sequence> {
        assemble_sequence(obs, instruction, target, &self.tokenizer, &self.config)
    }

    fn check_batch(&self, batch: &Batch<F>) -> Result<()> {
        if !batch.patch_rows.is_empty() && batch.patch_dim != self.config.patch_dim() {
            return Err(Error::invalid(format!(
                "patch dimension {} does not match model patch dimension {}",
                batch.patch_dim,
                self.config.patch_dim()
            )));
        }
        if let Some(&(_, len)) = batch.spans.iter().find(|s| s.1 > self.config.max_seq_len) {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        let v = self.vocab_size() as u32;
        if batch.tokens.iter().flatten().any(|&id| id >= v) {
            return Err(Error::invalid("token id outside the vocabulary"));
        }
        Ok(())
    }

    fn embed_rows(&self, tokens: &[Option<u32>], pos: &[usize], patch_rows: &[usize], patches: &[F]) -> Vec<F> {
        let c = self.config.d_model;
        let lay = &self.params.layout;
        let w = &self.params.values;
        let (wte, wpe) = (lay.wte.of(w), lay.wpe.of(w));
        let mut x = vec![F::zero(); tokens.len() * c];
        if !patch_rows.is_empty() {
            let pd = self.config.patch_dim();
            let mut pe = vec![F::zero(); patch_rows.len() * c];
            linear(
                patches,
                patch_rows.len(),
                lay.patch_w.of(w),
                Some(lay.patch_b.of(w)),
                &mut pe,
                pd,
                c,
            );
            for (i, &r) in patch_rows.iter().enumerate() {
                x[r * c..(r + 1) * c].copy_from_slice(&pe[i * c..(i + 1) * c]);
            }
        }
        for (r, (tok, &p)) in tokens.iter().zip(pos).enumerate() {
            let xr = &mut x[r * c..(r + 1) * c];
            if let Some(id) = tok {
                xr.copy_from_slice(&wte[*id as usize * c..(*id as usize + 1) * c]);
            }
            add_into(xr, &wpe[p * c..(p + 1) * c]);
        }
        x
    }

    fn forward_train(&self, batch: &Batch<F>, mut dropout: Option<&mut ChaCha8Rng>) -> ForwardCache<F> {
        let cfg = &self.config;
        let (c, f, heads) = (cfg.d_model, cfg.ffn, cfg.heads);
        let n = batch.rows();
        let w = &self.params.values;
        let lay = &self.params.layout;
        let p_drop = if cfg.dropout > 0.0 { cfg.dropout } else { 0.0 };

        let mut x = self.embed_rows(&batch.tokens, &batch.pos, &batch.patch_rows, &batch.patches);
        let mut layers = Vec::with_capacity(cfg.layers);
        for ls in &lay.layers {
            let ln1 = Norm::new(&x, ls.ln1_g.of(w), ls.ln1_b.of(w), c);
            let mut qkv = vec![F::zero(); n * 3 * c];
            linear(&ln1.y, n, ls.qkv_w.of(w), Some(ls.qkv_b.of(w)), &mut qkv, c, 3 * c);
            let prob_len: usize = batch.spans.iter().map(|&(_, t)| heads * t * t).sum();
            let mut probs = vec![F::zero(); prob_len];
            let mut atty = vec![F::zero(); n * c];
            let mut po = 0;
            for &(s, t) in &batch.spans {
                attend_sequence(
                    &qkv[s * 3 * c..(s + t) * 3 * c],
                    t,
                    c,
                    heads,
                    &mut atty[s * c..(s + t) * c],
                    &mut probs[po..po + heads * t * t],
                );
                po += heads * t * t;
            }
            let mut proj = vec![F::zero(); n * c];
            linear(&atty, n, ls.proj_w.of(w), Some(ls.proj_b.of(w)), &mut proj, c, c);
            let mask1 = dropout
                .as_deref_mut()
                .filter(|_| p_drop > 0.0)
                .map(|r| dropout_mask::<F>(n * c, p_drop, r));
            let mut x2 = x.clone();
            match &mask1 {
                Some(m) => x2.iter_mut().zip(&proj).zip(m).for_each(|((a, &b), &k)| *a = *a + b * k),
                None => add_into(&mut x2, &proj),
            }
            let ln2 = Norm::new(&x2, ls.ln2_g.of(w), ls.ln2_b.of(w), c);
            let mut fc = vec![F::zero(); n * f];
            linear(&ln2.y, n, ls.fc_w.of(w), Some(ls.fc_b.of(w)), &mut fc, c, f);
            let tanh: Vec<F> = fc.iter().map(|&v| gelu_tanh(v)).collect();
            let act: Vec<F> = fc
                .iter()
                .zip(&tanh)
                .map(|(&v, &t)| F::of(0.5) * v * (F::one() + t))
                .collect();
            let mut mlp = vec![F::zero(); n * c];
            linear(&act, n, ls.fc2_w.of(w), Some(ls.fc2_b.of(w)), &mut mlp, f, c);
            let mask2 = dropout
                .as_deref_mut()
                .filter(|_| p_drop > 0.0)
                .map(|r| dropout_mask::<F>(n * c, p_drop, r));
            let mut x3 = x2.clone();
            match &mask2 {
                Some(m) => x3.iter_mut().zip(&mlp).zip(m).for_each(|((a, &b), &k)| *a = *a + b * k),
                None => add_into(&mut x3, &mlp),
            }
            layers.push(LayerCache {
                x: std::mem::replace(&mut x, x3),
                ln1,
                qkv,
                probs,
                atty,
                mask1,
                x2,
                ln2,
                fc,
                tanh,
                act,
                mask2,
            });
        }
        let lnf = Norm::new(&x, lay.lnf_g.of(w), lay.lnf_b.of(w), c);
        let m = batch.targets.len();
        let mut hidden = vec![F::zero(); m * c];
        for (i, &(r, _)) in batch.targets.iter().enumerate() {
            hidden[i * c..(i + 1) * c].copy_from_slice(&lnf.y[r * c..(r + 1) * c]);
        }
        let v = self.vocab_size();
        let mut probs = vec![F::zero(); m * v];
        linear(&hidden, m, lay.head_w.of(w), None, &mut probs, c, v);
        for row in probs.chunks_exact_mut(v) {
            softmax_in_place(row);
        }
        ForwardCache {
            layers,
            x_final: x,
            lnf,
            hidden,
            probs,
        }
    }

    fn stats(&self, batch: &Batch<F>, cache: &ForwardCache<F>) -> BatchStats<F> {
        let v = self.vocab_size();
        let mut nll = F::zero();
        let mut correct = 0;
        for (row, &(_, y)) in cache.probs.chunks_exact(v).zip(&batch.targets) {
            nll = nll - row[y as usize].max(F::min_positive_value()).ln();
            if argmax(row) == y as usize {
                correct += 1;
            }
        }
        BatchStats {
            loss: nll / F::of(batch.targets.len() as f64),
            correct,
            count: batch.targets.len(),
        }
    }

    /// Mean cross-entropy over the supervised positions of `batch`.
    pub fn loss(&self, batch: &Batch<F>) -> Result<F> {
        Ok(self.evaluate(batch)?.loss)
    }

    pub fn evaluate(&self, batch: &Batch<F>) -> Result<BatchStats<F>> {
        self.check_batch(batch)?;
        if batch.targets.is_empty() {
            return Err(Error::invalid("loss over an empty mask"));
        }
        let cache = self.forward_train(batch, None);
        Ok(self.stats(batch, &cache))
    }

    /// Forward and backward pass; the gradient of the mean loss is added to `grads`.
    pub fn loss_and_grad(
        &self,
        batch: &Batch<F>,
        dropout: Option<&mut ChaCha8Rng>,
        grads: &mut [F],
    ) -> Result<BatchStats<F>> {
        self.check_batch(batch)?;
        if batch.targets.is_empty() {
            return Err(Error::invalid("loss over an empty mask"));
        }
        if grads.len() != self.params.len() {
            return Err(Error::invalid("gradient buffer size mismatch"));
        }
        let cache = self.forward_train(batch, dropout);
        let stats = self.stats(batch, &cache);
        self.backward(batch, &cache, grads);
        Ok(stats)
    }

    fn backward(&self, batch: &Batch<F>, cache: &ForwardCache<F>, grads: &mut [F]) {
        let cfg = &self.config;
        let (c, f, heads) = (cfg.d_model, cfg.ffn, cfg.heads);
        let n = batch.rows();
        let v = self.vocab_size();
        let m = batch.targets.len();
        let w = &self.params.values;
        let lay = &self.params.layout;

        let inv_m = F::one() / F::of(m as f64);
        let mut dlogits = cache.probs.clone();
        for (row, &(_, y)) in dlogits.chunks_exact_mut(v).zip(&batch.targets) {
            row[y as usize] = row[y as usize] - F::one();
            row.iter_mut().for_each(|g| *g = *g * inv_m);
        }
        let mut dhidden = vec![F::zero(); m * c];
        linear_backward(
            &dlogits,
            &cache.hidden,
            lay.head_w.of(w),
            m,
            c,
            v,
            Some(&mut dhidden),
            lay.head_w.of_mut(grads),
            None,
            false,
        );
        let mut dlnf = vec![F::zero(); n * c];
        for (i, &(r, _)) in batch.targets.iter().enumerate() {
            add_into(&mut dlnf[r * c..(r + 1) * c], &dhidden[i * c..(i + 1) * c]);
        }
        let mut dx = vec![F::zero(); n * c];
        {
            let (dg, db) = split_pair(grads, lay.lnf_g, lay.lnf_b);
            layernorm_backward(&dlnf, &cache.x_final, &cache.lnf, lay.lnf_g.of(w), c, &mut dx, dg, db);
        }

        for (ls, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            self.layer_backward(ls, lc, batch, &mut dx, grads, n, c, f, heads);
        }

        let (wte, wpe) = (lay.wte, lay.wpe);
        for (r, (tok, &p)) in batch.tokens.iter().zip(&batch.pos).enumerate() {
            let dr = &dx[r * c..(r + 1) * c];
            if let Some(id) = tok {
                let id = *id as usize;
                add_into(&mut wte.of_mut(grads)[id * c..(id + 1) * c], dr);
            }
            add_into(&mut wpe.of_mut(grads)[p * c..(p + 1) * c], dr);
        }
        if !batch.patch_rows.is_empty() {
            let np = batch.patch_rows.len();
            let mut dpe = vec![F::zero(); np * c];
            for (i, &r) in batch.patch_rows.iter().enumerate() {
                dpe[i * c..(i + 1) * c].copy_from_slice(&dx[r * c..(r + 1) * c]);
            }
            let (dw, db) = split_pair(grads, lay.patch_w, lay.patch_b);
            linear_backward(
                &dpe,
                &batch.patches,
                lay.patch_w.of(w),
                np,
                cfg.patch_dim(),
                c,
                None,
                dw,
                Some(db),
                false,
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        ls: &LayerSlots,
        lc: &LayerCache<F>,
        batch: &Batch<F>,
        dx: &mut Vec<F>,
        grads: &mut [F],
        n: usize,
        c: usize,
        f: usize,
        heads: usize,
    ) {
        let w = &self.params.values;
        // MLP branch
        let mut dmlp = dx.clone();
        if let Some(m) = &lc.mask2 {
            dmlp.iter_mut().zip(m).for_each(|(d, &k)| *d = *d * k);
        }
        let mut dact = vec![F::zero(); n * f];
        {
            let (dw, db) = split_pair(grads, ls.fc2_w, ls.fc2_b);
            linear_backward(&dmlp, &lc.act, ls.fc2_w.of(w), n, f, c, Some(&mut dact), dw, Some(db), false);
        }
        dact.iter_mut()
            .zip(lc.fc.iter().zip(&lc.tanh))
            .for_each(|(d, (&x, &t))| *d = *d * gelu_grad(x, t));
        let mut dln2 = vec![F::zero(); n * c];
        {
            let (dw, db) = split_pair(grads, ls.fc_w, ls.fc_b);
            linear_backward(&dact, &lc.ln2.y, ls.fc_w.of(w), n, c, f, Some(&mut dln2), dw, Some(db), false);
        }
        {
            let (dg, db) = split_pair(grads, ls.ln2_g, ls.ln2_b);
            layernorm_backward(&dln2, &lc.x2, &lc.ln2, ls.ln2_g.of(w), c, dx, dg, db);
        }
        // attention branch
        let mut dproj = dx.clone();
        if let Some(m) = &lc.mask1 {
            dproj.iter_mut().zip(m).for_each(|(d, &k)| *d = *d * k);
        }
        let mut datty = vec![F::zero(); n * c];
        {
            let (dw, db) = split_pair(grads, ls.proj_w, ls.proj_b);
            linear_backward(&dproj, &lc.atty, ls.proj_w.of(w), n, c, c, Some(&mut datty), dw, Some(db), false);
        }
        let mut dqkv = vec![F::zero(); n * 3 * c];
        let mut po = 0;
        for &(s, t) in &batch.spans {
            attend_sequence_backward(
                &lc.qkv[s * 3 * c..(s + t) * 3 * c],
                &lc.probs[po..po + heads * t * t],
                &datty[s * c..(s + t) * c],
                t,
                c,
                heads,
                &mut dqkv[s * 3 * c..(s + t) * 3 * c],
            );
            po += heads * t * t;
        }
        let mut dln1 = vec![F::zero(); n * c];
        {
            let (dw, db) = split_pair(grads, ls.qkv_w, ls.qkv_b);
            linear_backward(&dqkv, &lc.ln1.y, ls.qkv_w.of(w), n, c, 3 * c, Some(&mut dln1), dw, Some(db), false);
        }
        let (dg, db) = split_pair(grads, ls.ln1_g, ls.ln1_b);
        layernorm_backward(&dln1, &lc.x, &lc.ln1, ls.ln1_g.of(w), c, dx, dg, db);
    }

    pub fn new_cache(&self) -> DecodeCache<F> {
        DecodeCache {
            k: vec![Vec::new(); self.config.layers],
            v: vec![Vec::new(); self.config.layers],
            len: 0,
        }
    }

    /// Runs `items` (continuing at position `cache.len()`) and returns their final-norm rows.
    pub fn extend(&self, cache: &mut DecodeCache<F>, seq: &Sequence, items: std::ops::Range<usize>) -> Result<Vec<F>> {
        let cfg = &self.config;
        let (c, f, heads) = (cfg.d_model, cfg.ffn, cfg.heads);
        let hd = c / heads;
        if items.start != cache.len || items.end > seq.len() {
            return Err(Error::invalid("decode cache is out of step with the sequence"));
        }
        if items.end > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: items.end,
                max: cfg.max_seq_len,
            });
        }
        let pd = cfg.patch_dim();
        let n = items.len();
        let mut tokens = Vec::with_capacity(n);
        let mut patch_rows = Vec::new();
        let mut patches = Vec::new();
        for (r, item) in seq.items[items.clone()].iter().enumerate() {
            match *item {
                SequenceItem::Token(id) => {
                    if id as usize >= self.vocab_size() {
                        return Err(Error::invalid("token id outside the vocabulary"));
                    }
                    tokens.push(Some(id));
                }
                SequenceItem::Patch(i) => {
                    if seq.patches.len() < (i + 1) * pd {
                        return Err(Error::invalid("patch data does not match the model patch size"));
                    }
                    tokens.push(None);
                    patch_rows.push(r);
                    patches.extend(seq.patches[i * pd..(i + 1) * pd].iter().map(|&v| F::of(v as f64)));
                }
            }
        }
        let pos: Vec<usize> = items.clone().collect();
        let w = &self.params.values;
        let lay = &self.params.layout;
        let mut x = self.embed_rows(&tokens, &pos, &patch_rows, &patches);
        let mut probs = vec![F::zero(); heads * items.end];
        for (l, ls) in lay.layers.iter().enumerate() {
            let ln1 = Norm::new(&x, ls.ln1_g.of(w), ls.ln1_b.of(w), c);
            let mut qkv = vec![F::zero(); n * 3 * c];
            linear(&ln1.y, n, ls.qkv_w.of(w), Some(ls.qkv_b.of(w)), &mut qkv, c, 3 * c);
            let (kc, vc) = (&mut cache.k[l], &mut cache.v[l]);
            for row in qkv.chunks_exact(3 * c) {
                kc.extend_from_slice(&row[c..2 * c]);
                vc.extend_from_slice(&row[2 * c..]);
            }
            let mut atty = vec![F::zero(); n * c];
            for (r, p) in pos.iter().enumerate() {
                let keys = p + 1;
                attend_row(
                    &qkv[r * 3 * c..r * 3 * c + c],
                    kc,
                    vc,
                    c,
                    keys,
                    heads,
                    hd,
                    &mut atty[r * c..(r + 1) * c],
                    &mut probs[..heads * keys],
                );
            }
            let mut proj = vec![F::zero(); n * c];
            linear(&atty, n, ls.proj_w.of(w), Some(ls.proj_b.of(w)), &mut proj, c, c);
            add_into(&mut x, &proj);
            let ln2 = Norm::new(&x, ls.ln2_g.of(w), ls.ln2_b.of(w), c);
            let mut fc = vec![F::zero(); n * f];
            linear(&ln2.y, n, ls.fc_w.of(w), Some(ls.fc_b.of(w)), &mut fc, c, f);
            fc.iter_mut().for_each(|v| *v = gelu(*v));
            let mut mlp = vec![F::zero(); n * c];
            linear(&fc, n, ls.fc2_w.of(w), Some(ls.fc2_b.of(w)), &mut mlp, f, c);
            add_into(&mut x, &mlp);
        }
        cache.len = items.end;
        Ok(Norm::new(&x, lay.lnf_g.of(w), lay.lnf_b.of(w), c).y)
    }

    fn head(&self, hidden: &[F]) -> Vec<F> {
        let (c, v) = (self.config.d_model, self.vocab_size());
        let rows = hidden.len() / c;
        let mut logits = vec![F::zero(); rows * v];
        linear(hidden, rows, self.params.layout.head_w.of(&self.params.values), None, &mut logits, c, v);
        logits
    }

    /// Logits for every position of `seq`, row-major `len x vocab`.
    pub fn forward(&self, seq: &Sequence) -> Result<Vec<F>> {
        let mut cache = self.new_cache();
        let hidden = self.extend(&mut cache, seq, 0..seq.len())?;
        Ok(self.head(&hidden))
    }

    /// Final-layer hidden vector at the second SEP.
    pub fn hidden_features(&self, obs: &Observation, instruction: &[u32]) -> Result<Vec<F>> {
        let seq = self.sequence(obs, instruction, None)?;
        let mut cache = self.new_cache();
        let hidden = self.extend(&mut cache, &seq, 0..seq.len())?;
        let c = self.config.d_model;
        Ok(hidden[hidden.len() - c..].to_vec())
    }

    /// Greedy decoding of seven robot tokens, restricted to bin ids. Returns bin indices.
    pub fn generate_bins(&self, obs: &Observation, instruction: &[u32]) -> Result<[u32; 7]> {
        let mut seq = self.sequence(obs, instruction, None)?;
        if seq.len() + 6 > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq.len() + 6,
                max: self.config.max_seq_len,
            });
        }
        let c = self.config.d_model;
        let (lo, bins) = (self.tokenizer.bin_offset() as usize, self.tokenizer.bin_size() as usize);
        let mut cache = self.new_cache();
        let mut hidden = self.extend(&mut cache, &seq, 0..seq.len())?;
        let mut out = [0u32; 7];
        for (i, slot) in out.iter_mut().enumerate() {
            let last = &hidden[hidden.len() - c..];
            let logits = self.head(last);
            let b = argmax(&logits[lo..lo + bins]) as u32;
            *slot = b;
            if i < 6 {
                seq.items.push(SequenceItem::Token(self.tokenizer.bin_to_id(b)));
                seq.segments.push(crate::tokenizer::Segment::Action);
                seq.loss_mask.push(false);
                let at = seq.len() - 1;
                hidden = self.extend(&mut cache, &seq, at..at + 1)?;
            }
        }
        Ok(out)
    }

    pub fn generate(&self, obs: &Observation, instruction: &[u32]) -> Result<ActionState> {
        let bins = self.generate_bins(obs, instruction)?;
        self.tokenizer.decode_action(&bins)
    }
}

fn split_pair<F>(grads: &mut [F], a: super::Slot, b: super::Slot) -> (&mut [F], &mut [F]) {
    assert!(a.start + a.len <= b.start, "slots must be ordered and disjoint");
    let (lo, hi) = grads.split_at_mut(b.start);
    (a.of_mut(lo), &mut hi[..b.len])
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / z);
}

/// First index of the maximum.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let mut r = row.to_vec();
    softmax_in_place(&mut r);
    r
}
