use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{
    add_bias, bias_grad_acc, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax_at, matmul,
    matmul_nt, matmul_tn_acc, softmax_in_place,
};
use super::{BlockLayout, Checkpoint, LmError};
use crate::tokenizer::TokenId;

/// Next-token logits, one row per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

struct BlockCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h2: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    drop_mlp: Option<Vec<f64>>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    xf: Vec<f64>,
}

/// Per-layer key/value history for incremental decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn dropout_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

impl Checkpoint {
    fn p(&self, span: super::Span) -> &[f64] {
        &self.params[span.range()]
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), LmError> {
        let max = self.config.max_context;
        if tokens.len() > max {
            return Err(LmError::ContextOverflow { len: tokens.len(), max });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LmError::TokenOutOfRange(bad));
        }
        Ok(())
    }

    /// Logits for every position; row `t` depends on `tokens[..=t]` only.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Logits, LmError> {
        self.check_tokens(tokens)?;
        Ok(self.forward_cached(tokens, None).0)
    }

    fn forward_cached(&self, tokens: &[TokenId], mut rng: Option<&mut ChaCha8Rng>) -> (Logits, Cache) {
        let c = &self.config;
        let (t_len, d, v) = (tokens.len(), c.d_model, c.vocab_size);
        let p_drop = c.dropout;
        let l = &self.layout;

        let tok_emb = self.p(l.tok_emb);
        let pos_emb = self.p(l.pos_emb);
        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            let te = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
            let pe = &pos_emb[t * d..(t + 1) * d];
            for i in 0..d {
                row[i] = te[i] + pe[i];
            }
        }

        let mut blocks = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let (h1, ln1_xhat, ln1_rstd) = layer_norm(&x, self.p(b.ln1_gain), self.p(b.ln1_bias));
            let mut qkv = matmul(&h1, self.p(b.qkv_weight), t_len, d, 3 * d);
            add_bias(&mut qkv, self.p(b.qkv_bias));
            let (ctx, probs) = self.attention(&qkv, t_len);
            let mut attn = matmul(&ctx, self.p(b.proj_weight), t_len, d, d);
            add_bias(&mut attn, self.p(b.proj_bias));
            let drop_attn = match rng.as_deref_mut() {
                Some(r) if p_drop > 0.0 => Some(dropout_mask(attn.len(), p_drop, r)),
                _ => None,
            };
            if let Some(mask) = &drop_attn {
                attn.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
            }
            x.iter_mut().zip(&attn).for_each(|(x, a)| *x += a);

            let (h2, ln2_xhat, ln2_rstd) = layer_norm(&x, self.p(b.ln2_gain), self.p(b.ln2_bias));
            let mut pre_act = matmul(&h2, self.p(b.fc_weight), t_len, d, c.d_ff);
            add_bias(&mut pre_act, self.p(b.fc_bias));
            let act: Vec<f64> = pre_act.iter().map(|&z| gelu(z)).collect();
            let mut mlp = matmul(&act, self.p(b.out_weight), t_len, c.d_ff, d);
            add_bias(&mut mlp, self.p(b.out_bias));
            let drop_mlp = match rng.as_deref_mut() {
                Some(r) if p_drop > 0.0 => Some(dropout_mask(mlp.len(), p_drop, r)),
                _ => None,
            };
            if let Some(mask) = &drop_mlp {
                mlp.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
            }
            x.iter_mut().zip(&mlp).for_each(|(x, m)| *x += m);

            blocks.push(BlockCache {
                ln1_xhat,
                ln1_rstd,
                h1,
                qkv,
                probs,
                ctx,
                drop_attn,
                ln2_xhat,
                ln2_rstd,
                h2,
                pre_act,
                act,
                drop_mlp,
            });
        }

        let (xf, lnf_xhat, lnf_rstd) = layer_norm(&x, self.p(l.lnf_gain), self.p(l.lnf_bias));
        let data = matmul(&xf, self.p(l.head), t_len, d, v);
        (Logits { rows: t_len, vocab: v, data }, Cache { blocks, lnf_xhat, lnf_rstd, xf })
    }

    /// Causal multi-head attention over a packed `[T, 3d]` q|k|v matrix.
    /// Returns the `[T, d]` context and `[heads, T, T]` attention weights.
    fn attention(&self, qkv: &[f64], t_len: usize) -> (Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let (d, hd) = (c.d_model, c.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx = vec![0.0; t_len * d];
        let mut probs = vec![0.0; c.n_heads * t_len * t_len];
        for h in 0..c.n_heads {
            let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
            for i in 0..t_len {
                let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + hd];
                let row = &mut probs[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(q, &qkv[j * 3 * d + ko..j * 3 * d + ko + hd]) * scale;
                }
                softmax_in_place(row);
                let out = &mut ctx[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                    for (o, &x) in out.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        (ctx, probs)
    }

    fn attention_backward(&self, dctx: &[f64], qkv: &[f64], probs: &[f64], t_len: usize) -> Vec<f64> {
        let c = &self.config;
        let (d, hd) = (c.d_model, c.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dqkv = vec![0.0; t_len * 3 * d];
        let mut dp = vec![0.0; t_len];
        for h in 0..c.n_heads {
            let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
            for i in 0..t_len {
                let p_row = &probs[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                let dout = &dctx[i * d + h * hd..i * d + (h + 1) * hd];
                for j in 0..=i {
                    dp[j] = dot(dout, &qkv[j * 3 * d + vo..j * 3 * d + vo + hd]);
                    let dv = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                    for (g, &o) in dv.iter_mut().zip(dout) {
                        *g += p_row[j] * o;
                    }
                }
                let weighted: f64 = p_row.iter().zip(&dp[..=i]).map(|(p, g)| p * g).sum();
                for j in 0..=i {
                    let ds = p_row[j] * (dp[j] - weighted) * scale;
                    for e in 0..hd {
                        dqkv[i * 3 * d + qo + e] += ds * qkv[j * 3 * d + ko + e];
                        dqkv[j * 3 * d + ko + e] += ds * qkv[i * 3 * d + qo + e];
                    }
                }
            }
        }
        dqkv
    }

    /// Mean next-token cross-entropy over positions `t` with `mask[t + 1]`.
    pub fn loss(&self, tokens: &[TokenId], mask: &[bool]) -> Result<f64, LmError> {
        let targets = self.targets(tokens, mask)?;
        let logits = self.forward_cached(tokens, None).0;
        let n = targets.len() as f64;
        Ok(-targets.iter().map(|&t| log_softmax_at(logits.row(t), tokens[t + 1] as usize)).sum::<f64>() / n)
    }

    /// Loss and its gradient with respect to every parameter (dropout off).
    pub fn loss_and_grad(&self, tokens: &[TokenId], mask: &[bool]) -> Result<(f64, Vec<f64>), LmError> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_grad(tokens, mask, None, &mut grad)?;
        Ok((loss, grad))
    }

    fn targets(&self, tokens: &[TokenId], mask: &[bool]) -> Result<Vec<usize>, LmError> {
        self.check_tokens(tokens)?;
        if mask.len() != tokens.len() {
            return Err(LmError::MaskLength { mask: mask.len(), tokens: tokens.len() });
        }
        let targets: Vec<usize> = (0..tokens.len().saturating_sub(1)).filter(|&t| mask[t + 1]).collect();
        if targets.is_empty() {
            return Err(LmError::EmptyLossMask);
        }
        Ok(targets)
    }

    /// Adds d(loss)/d(params) into `grad` and returns the loss.
    pub(crate) fn accumulate_grad(
        &self,
        tokens: &[TokenId],
        mask: &[bool],
        rng: Option<&mut ChaCha8Rng>,
        grad: &mut [f64],
    ) -> Result<f64, LmError> {
        let targets = self.targets(tokens, mask)?;
        let (logits, cache) = self.forward_cached(tokens, rng);
        let c = &self.config;
        let (t_len, d, v) = (tokens.len(), c.d_model, c.vocab_size);
        let n = targets.len() as f64;

        let mut loss = 0.0;
        let mut dlogits = vec![0.0; t_len * v];
        for &t in &targets {
            let target = tokens[t + 1] as usize;
            let row = &mut dlogits[t * v..(t + 1) * v];
            row.copy_from_slice(logits.row(t));
            loss -= log_softmax_at(row, target);
            softmax_in_place(row);
            row[target] -= 1.0;
            row.iter_mut().for_each(|g| *g /= n);
        }
        loss /= n;

        let l = &self.layout;
        matmul_tn_acc(&cache.xf, &dlogits, t_len, d, v, &mut grad[l.head.range()]);
        let dxf = matmul_nt(&dlogits, self.p(l.head), t_len, v, d);
        let mut dx = {
            let (gain, rest) = split_two(grad, l.lnf_gain, l.lnf_bias);
            layer_norm_backward(&dxf, &cache.lnf_xhat, &cache.lnf_rstd, self.p(l.lnf_gain), gain, rest)
        };

        for (b, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(b, bc, dx, t_len, grad);
        }

        for (t, &tok) in tokens.iter().enumerate() {
            let g = &dx[t * d..(t + 1) * d];
            let te = l.tok_emb.offset + tok as usize * d;
            let pe = l.pos_emb.offset + t * d;
            for i in 0..d {
                grad[te + i] += g[i];
                grad[pe + i] += g[i];
            }
        }
        Ok(loss)
    }

    fn block_backward(&self, b: &BlockLayout, bc: &BlockCache, dx: Vec<f64>, t_len: usize, grad: &mut [f64]) -> Vec<f64> {
        let c = &self.config;
        let (d, f) = (c.d_model, c.d_ff);

        let mut dm = dx.clone();
        if let Some(mask) = &bc.drop_mlp {
            dm.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        matmul_tn_acc(&bc.act, &dm, t_len, f, d, &mut grad[b.out_weight.range()]);
        bias_grad_acc(&dm, &mut grad[b.out_bias.range()]);
        let mut dpre = matmul_nt(&dm, self.p(b.out_weight), t_len, d, f);
        dpre.iter_mut().zip(&bc.pre_act).for_each(|(g, &z)| *g *= gelu_grad(z));
        matmul_tn_acc(&bc.h2, &dpre, t_len, d, f, &mut grad[b.fc_weight.range()]);
        bias_grad_acc(&dpre, &mut grad[b.fc_bias.range()]);
        let dh2 = matmul_nt(&dpre, self.p(b.fc_weight), t_len, f, d);
        let dln2 = {
            let (gain, bias) = split_two(grad, b.ln2_gain, b.ln2_bias);
            layer_norm_backward(&dh2, &bc.ln2_xhat, &bc.ln2_rstd, self.p(b.ln2_gain), gain, bias)
        };
        let mut dmid = dx;
        dmid.iter_mut().zip(&dln2).for_each(|(a, g)| *a += g);

        let mut da = dmid.clone();
        if let Some(mask) = &bc.drop_attn {
            da.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        matmul_tn_acc(&bc.ctx, &da, t_len, d, d, &mut grad[b.proj_weight.range()]);
        bias_grad_acc(&da, &mut grad[b.proj_bias.range()]);
        let dctx = matmul_nt(&da, self.p(b.proj_weight), t_len, d, d);
        let dqkv = self.attention_backward(&dctx, &bc.qkv, &bc.probs, t_len);
        matmul_tn_acc(&bc.h1, &dqkv, t_len, d, 3 * d, &mut grad[b.qkv_weight.range()]);
        bias_grad_acc(&dqkv, &mut grad[b.qkv_bias.range()]);
        let dh1 = matmul_nt(&dqkv, self.p(b.qkv_weight), t_len, 3 * d, d);
        let dln1 = {
            let (gain, bias) = split_two(grad, b.ln1_gain, b.ln1_bias);
            layer_norm_backward(&dh1, &bc.ln1_xhat, &bc.ln1_rstd, self.p(b.ln1_gain), gain, bias)
        };
        dmid.iter_mut().zip(&dln1).for_each(|(a, g)| *a += g);
        dmid
    }

    pub fn new_state(&self) -> DecodeState {
        let n = self.config.n_layers;
        DecodeState { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    /// Feeds one token and returns the logits for the following position.
    pub fn step(&self, state: &mut DecodeState, token: TokenId) -> Result<Vec<f64>, LmError> {
        let c = &self.config;
        if state.len >= c.max_context {
            return Err(LmError::ContextOverflow { len: state.len + 1, max: c.max_context });
        }
        if token as usize >= c.vocab_size {
            return Err(LmError::TokenOutOfRange(token));
        }
        let (d, hd, t) = (c.d_model, c.head_dim(), state.len);
        let scale = 1.0 / (hd as f64).sqrt();
        let l = &self.layout;
        let te = &self.p(l.tok_emb)[token as usize * d..(token as usize + 1) * d];
        let pe = &self.p(l.pos_emb)[t * d..(t + 1) * d];
        let mut x: Vec<f64> = te.iter().zip(pe).map(|(a, b)| a + b).collect();

        for (li, b) in l.blocks.iter().enumerate() {
            let (h1, _, _) = layer_norm(&x, self.p(b.ln1_gain), self.p(b.ln1_bias));
            let mut qkv = matmul(&h1, self.p(b.qkv_weight), 1, d, 3 * d);
            add_bias(&mut qkv, self.p(b.qkv_bias));
            state.keys[li].extend_from_slice(&qkv[d..2 * d]);
            state.values[li].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&state.keys[li], &state.values[li]);
            let mut ctx = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for h in 0..c.n_heads {
                let q = &qkv[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(q, &keys[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut ctx[h * hd..(h + 1) * hd];
                for (j, &p) in scores.iter().enumerate() {
                    for (o, &v) in out.iter_mut().zip(&values[j * d + h * hd..j * d + (h + 1) * hd]) {
                        *o += p * v;
                    }
                }
            }
            let mut attn = matmul(&ctx, self.p(b.proj_weight), 1, d, d);
            add_bias(&mut attn, self.p(b.proj_bias));
            x.iter_mut().zip(&attn).for_each(|(x, a)| *x += a);
            let (h2, _, _) = layer_norm(&x, self.p(b.ln2_gain), self.p(b.ln2_bias));
            let mut pre = matmul(&h2, self.p(b.fc_weight), 1, d, c.d_ff);
            add_bias(&mut pre, self.p(b.fc_bias));
            pre.iter_mut().for_each(|z| *z = gelu(*z));
            let mut mlp = matmul(&pre, self.p(b.out_weight), 1, c.d_ff, d);
            add_bias(&mut mlp, self.p(b.out_bias));
            x.iter_mut().zip(&mlp).for_each(|(x, m)| *x += m);
        }
        state.len += 1;
        let (xf, _, _) = layer_norm(&x, self.p(l.lnf_gain), self.p(l.lnf_bias));
        Ok(matmul(&xf, self.p(l.head), 1, d, c.vocab_size))
    }

    /// Runs `tokens` through a fresh state; returns it with the logits after the last token.
    pub fn prefill(&self, tokens: &[TokenId]) -> Result<(DecodeState, Vec<f64>), LmError> {
        self.check_tokens(tokens)?;
        let mut state = self.new_state();
        let mut logits = Vec::new();
        for &tok in tokens {
            logits = self.step(&mut state, tok)?;
        }
        Ok((state, logits))
    }
}

/// Two disjoint mutable views into the gradient buffer.
fn split_two(grad: &mut [f64], a: super::Span, b: super::Span) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(a.offset + a.len, b.offset);
    let (left, right) = grad.split_at_mut(b.offset);
    (&mut left[a.range()], &mut right[..b.len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_model, ModelConfig};
    use rand::SeedableRng;

    fn tiny(dropout: f64) -> ModelConfig {
        ModelConfig { vocab_size: 11, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_context: 10, dropout }
    }

    #[test]
    fn causal_rows_ignore_future_tokens() {
        let ckpt = init_model(&tiny(0.0), 1).unwrap();
        let a = ckpt.forward(&[1, 2, 3, 4, 5]).unwrap();
        let b = ckpt.forward(&[1, 2, 3, 9, 0]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn output_rows_normalize() {
        let ckpt = init_model(&tiny(0.0), 2).unwrap();
        let logits = ckpt.forward(&[0, 5, 10, 3]).unwrap();
        for t in 0..logits.rows {
            let mut row = logits.row(t).to_vec();
            assert!(row.iter().all(|x| x.is_finite()));
            softmax_in_place(&mut row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_normalize() {
        let ckpt = init_model(&tiny(0.0), 2).unwrap();
        let (_, cache) = ckpt.forward_cached(&[3, 1, 4, 1, 5], None);
        for bc in &cache.blocks {
            for h in 0..2 {
                for i in 0..5 {
                    let row = &bc.probs[(h * 5 + i) * 5..(h * 5 + i) * 5 + 5];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(row[i + 1..].iter().all(|&p| p == 0.0));
                }
            }
        }
    }

    #[test]
    fn context_errors() {
        let ckpt = init_model(&tiny(0.0), 0).unwrap();
        assert!(matches!(ckpt.forward(&[0; 11]), Err(LmError::ContextOverflow { len: 11, max: 10 })));
        assert!(matches!(ckpt.forward(&[11]), Err(LmError::TokenOutOfRange(11))));
        assert!(matches!(ckpt.loss(&[1, 2], &[false, false]), Err(LmError::EmptyLossMask)));
        assert!(matches!(ckpt.loss(&[1, 2], &[true]), Err(LmError::MaskLength { .. })));
        let mut state = ckpt.new_state();
        for _ in 0..10 {
            ckpt.step(&mut state, 1).unwrap();
        }
        assert!(matches!(ckpt.step(&mut state, 1), Err(LmError::ContextOverflow { .. })));
    }

    #[test]
    fn incremental_matches_full_forward() {
        let ckpt = init_model(&tiny(0.0), 5).unwrap();
        let tokens = [4, 8, 15, 16, 23, 42].map(|t| t % 11);
        let full = ckpt.forward(&tokens).unwrap();
        let mut state = ckpt.new_state();
        for (t, &tok) in tokens.iter().enumerate() {
            let row = ckpt.step(&mut state, tok).unwrap();
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let (state2, last) = ckpt.prefill(&tokens).unwrap();
        assert_eq!(state2, state);
        assert_eq!(state2.len(), tokens.len());
        assert!(last.iter().zip(full.row(5)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let cfg = ModelConfig { vocab_size: 4, d_model: 4, n_layers: 1, n_heads: 1, d_ff: 4, max_context: 8, dropout: 0.0 };
        let mut ckpt = init_model(&cfg, 0).unwrap();
        ckpt.tensor_mut("lm_head.weight").unwrap().fill(0.0);
        let loss = ckpt.loss(&[0, 1, 2, 3], &[true; 4]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    /// d_model=2, one head. Token 0 embeds to [1,-1], token 1 to [-1,1],
    /// positions embed to zero, q/k/v/proj/head are identities, the MLP
    /// outputs zero. Everything downstream is scalar arithmetic.
    #[test]
    fn hand_set_attention_forward() {
        let cfg = ModelConfig { vocab_size: 2, d_model: 2, n_layers: 1, n_heads: 1, d_ff: 2, max_context: 2, dropout: 0.0 };
        let mut ckpt = init_model(&cfg, 0).unwrap();
        ckpt.params_mut().fill(0.0);
        let set = |ck: &mut Checkpoint, name: &str, vals: &[f64]| ck.tensor_mut(name).unwrap().copy_from_slice(vals);
        set(&mut ckpt, "tok_emb", &[1.0, -1.0, -1.0, 1.0]);
        set(&mut ckpt, "blocks.0.ln1.gain", &[1.0, 1.0]);
        set(&mut ckpt, "blocks.0.ln2.gain", &[1.0, 1.0]);
        set(&mut ckpt, "ln_f.gain", &[1.0, 1.0]);
        // [d, 3d] row-major: each input dim feeds the same dim of q, k and v
        set(&mut ckpt, "blocks.0.attn.qkv.weight", &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        set(&mut ckpt, "blocks.0.attn.proj.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut ckpt, "lm_head.weight", &[1.0, 0.0, 0.0, 1.0]);

        let logits = ckpt.forward(&[0, 1]).unwrap();

        // LN of ±[1,-1]: mean 0, variance 1, so h = ±c[1,-1] with c = 1/sqrt(1+eps).
        let eps = 1e-5;
        let c = 1.0 / (1.0f64 + eps).sqrt();
        // Row 0 attends to itself only: ctx0 = h0 = c[1,-1]; x0 = (1+c)[1,-1].
        // Row 1 scores: q1·k0 = -2c², q1·k1 = 2c², both over sqrt(2).
        let (s0, s1) = (-2.0 * c * c / 2f64.sqrt(), 2.0 * c * c / 2f64.sqrt());
        let a0 = s0.exp() / (s0.exp() + s1.exp());
        let a1 = 1.0 - a0;
        // ctx1 = a0·c[1,-1] + a1·c[-1,1] = (a1-a0)c[-1,1]; x1 = (1 + (a1-a0)c)[-1,1].
        let m0 = 1.0 + c;
        let m1 = 1.0 + (a1 - a0) * c;
        // Final LN of m[±1,∓1] is ±[1,-1]·m/sqrt(m²+eps); head is identity.
        let f0 = m0 / (m0 * m0 + eps).sqrt();
        let f1 = m1 / (m1 * m1 + eps).sqrt();
        let expected = [f0, -f0, -f1, f1];
        for (got, want) in logits.data.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn loss_matches_independent_recompute() {
        let ckpt = init_model(&tiny(0.0), 9).unwrap();
        let tokens = [1, 7, 3, 3, 9, 0, 2];
        let mask = [true, false, true, true, false, true, true];
        let logits = ckpt.forward(&tokens).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for t in 0..tokens.len() - 1 {
            if mask[t + 1] {
                let row = logits.row(t);
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                total += -(row[tokens[t + 1] as usize].exp() / z).ln();
                count += 1;
            }
        }
        let expected = total / count as f64;
        assert!((ckpt.loss(&tokens, &mask).unwrap() - expected).abs() < 1e-12);
        let (loss, _) = ckpt.loss_and_grad(&tokens, &mask).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let ckpt = init_model(&tiny(0.5), 1).unwrap();
        let tokens = [1, 2, 3, 4];
        let run = |seed| {
            let mut g = vec![0.0; ckpt.num_parameters()];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = ckpt.accumulate_grad(&tokens, &[true; 4], Some(&mut rng), &mut g).unwrap();
            (l, g)
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3).0, ckpt.loss(&tokens, &[true; 4]).unwrap());
    }
}
