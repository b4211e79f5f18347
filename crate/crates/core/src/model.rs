//! Pre-layer-norm transformer encoder with a masked-language-model head.
//!
//! Layout per block: `x += Dropout(Attn(LN(x)))`, `x += Dropout(FFN(LN(x)))`,
//! followed by a final layer norm and a vocabulary projection. With a tied
//! head the projection reuses the token embedding matrix and adds an output
//! bias.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::Streams;
use crate::tokenizer::TokenSequence;

fn default_dropout() -> f64 {
    0.1
}

fn default_tie() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_tie")]
    pub tie_mlm_head: bool,
}

impl ModelConfig {
    /// 2 layers, d_model 64, 4 heads, d_ff 256, 64 positions.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            vocab_size,
            dropout_rate: 0.1,
            tie_mlm_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_layers == 0 {
            problems.push("num_layers must be at least 1".to_string());
        }
        if self.d_model == 0 || self.num_heads == 0 {
            problems.push("d_model and num_heads must be positive".to_string());
        } else if self.d_model % self.num_heads != 0 {
            problems.push(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.d_ff == 0 {
            problems.push("d_ff must be positive".to_string());
        }
        if self.max_seq_len == 0 {
            problems.push("max_seq_len must be positive".to_string());
        }
        if self.vocab_size <= crate::tokenizer::SPECIALS.len() {
            problems.push(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Closed-form trainable parameter count:
    ///
    /// ```text
    /// V·d + P·d                       token + position embeddings
    /// + L·(4d² + 4d                   Q, K, V, O projections
    ///      + 4d                       two layer norms
    ///      + d·f + f + f·d + d)       feed-forward
    /// + 2d                            final layer norm
    /// + V                             output bias
    /// + V·d                           untied head only
    /// ```
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, p, l) = (
            self.vocab_size,
            self.d_model,
            self.d_ff,
            self.max_seq_len,
            self.num_layers,
        );
        let per_layer = 4 * d * d + 4 * d + 4 * d + d * f + f + f * d + d;
        let head = if self.tie_mlm_head { 0 } else { v * d };
        v * d + p * d + l * per_layer + 2 * d + v + head
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: Option<ParamId>,
    head_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

fn build_layout(config: &ModelConfig, mut make: impl FnMut(&str, Vec<usize>, Init) -> ParamId) -> Layout {
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let tok_emb = make("embed.tokens", vec![v, d], Init::Normal);
    let pos_emb = make("embed.positions", vec![config.max_seq_len, d], Init::Normal);
    let layers = (0..config.num_layers)
        .map(|l| {
            let mut m = |name: &str, shape: Vec<usize>, init| make(&format!("layer{l}.{name}"), shape, init);
            LayerParams {
                ln1_g: m("ln1.gain", vec![d], Init::Ones),
                ln1_b: m("ln1.bias", vec![d], Init::Zeros),
                wq: m("attn.wq", vec![d, d], Init::Normal),
                bq: m("attn.bq", vec![d], Init::Zeros),
                wk: m("attn.wk", vec![d, d], Init::Normal),
                bk: m("attn.bk", vec![d], Init::Zeros),
                wv: m("attn.wv", vec![d, d], Init::Normal),
                bv: m("attn.bv", vec![d], Init::Zeros),
                wo: m("attn.wo", vec![d, d], Init::Normal),
                bo: m("attn.bo", vec![d], Init::Zeros),
                ln2_g: m("ln2.gain", vec![d], Init::Ones),
                ln2_b: m("ln2.bias", vec![d], Init::Zeros),
                w1: m("ffn.w1", vec![d, f], Init::Normal),
                b1: m("ffn.b1", vec![f], Init::Zeros),
                w2: m("ffn.w2", vec![f, d], Init::Normal),
                b2: m("ffn.b2", vec![d], Init::Zeros),
            }
        })
        .collect();
    let lnf_g = make("final_ln.gain", vec![d], Init::Ones);
    let lnf_b = make("final_ln.bias", vec![d], Init::Zeros);
    let head_w = (!config.tie_mlm_head).then(|| make("mlm_head.weight", vec![v, d], Init::Normal));
    let head_b = make("mlm_head.bias", vec![v], Init::Zeros);
    Layout {
        tok_emb,
        pos_emb,
        layers,
        lnf_g,
        lnf_b,
        head_w,
        head_b,
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Weights ~ N(0, 0.02), biases 0, layer-norm gains 1.
pub fn init_model(config: &ModelConfig, streams: &Streams) -> Result<Model> {
    config.validate()?;
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut rng = streams.child("init").rng();
    let mut params = ParamSet::new();
    let layout = build_layout(config, |name, shape, init| {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        params.add(name, Tensor::new(shape, data).expect("consistent shape"))
    });
    let model = Model {
        config: config.clone(),
        params,
        layout,
    };
    assert_eq!(
        model.params.num_scalars(),
        config.parameter_count(),
        "parameter count disagrees with the closed form"
    );
    Ok(model)
}

impl Model {
    /// Rebuild a model from named arrays (checkpoint loading).
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Model> {
        config.validate()?;
        let mut expected = ParamSet::new();
        let layout = build_layout(&config, |name, shape, _| {
            expected.add(name, Tensor::zeros(shape))
        });
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((_, en, et), (_, pn, pt)) in expected.iter().zip(params.iter()) {
            if en != pn || et.shape() != pt.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{pn}` {:?} does not match expected `{en}` {:?}",
                    pt.shape(),
                    et.shape()
                )));
            }
        }
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout_rate {rate} outside [0, 1)")));
        }
        self.config.dropout_rate = rate;
        Ok(())
    }

    fn check_input(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("cannot run the encoder on an empty sequence"));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn drop(&self, tape: &mut Tape, x: Var, training: bool, streams: &Streams, site: &str) -> Result<Var> {
        if !training || self.config.dropout_rate == 0.0 {
            return Ok(x);
        }
        let mut rng = streams.child(site).rng();
        tape.dropout(x, self.config.dropout_rate, &mut rng, training)
    }

    /// Final hidden states `[len, d_model]` after the last layer norm.
    pub fn hidden_on(&self, tape: &mut Tape, ids: &[usize], training: bool, streams: &Streams) -> Result<Var> {
        self.check_input(ids)?;
        let n = ids.len();
        let d = self.config.d_model;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let lay = &self.layout;

        let tok = tape.param(p, lay.tok_emb);
        let pos = tape.param(p, lay.pos_emb);
        let te = tape.gather_rows(tok, ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pe = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        x = self.drop(tape, x, training, streams, "embed")?;

        for (l, lp) in lay.layers.iter().enumerate() {
            let g1 = tape.param(p, lp.ln1_g);
            let b1 = tape.param(p, lp.ln1_b);
            let h = tape.layer_norm(x, g1, b1)?;
            let proj = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
                let wv = tape.param(p, w);
                let bv = tape.param(p, b);
                let y = tape.matmul(h, wv)?;
                tape.add_row(y, bv)
            };
            let q = proj(tape, lp.wq, lp.bq)?;
            let k = proj(tape, lp.wk, lp.bk)?;
            let v = proj(tape, lp.wv, lp.bv)?;
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores)?;
                let attn = self.drop(tape, attn, training, streams, &format!("layer{l}/attn{hd}"))?;
                head_out.push(tape.matmul(attn, vh)?);
            }
            let cat = tape.concat_cols(&head_out)?;
            let wo = tape.param(p, lp.wo);
            let bo = tape.param(p, lp.bo);
            let o = tape.matmul(cat, wo)?;
            let o = tape.add_row(o, bo)?;
            let o = self.drop(tape, o, training, streams, &format!("layer{l}/attn_out"))?;
            x = tape.add(x, o)?;

            let g2 = tape.param(p, lp.ln2_g);
            let b2 = tape.param(p, lp.ln2_b);
            let h2 = tape.layer_norm(x, g2, b2)?;
            let w1 = tape.param(p, lp.w1);
            let bb1 = tape.param(p, lp.b1);
            let w2 = tape.param(p, lp.w2);
            let bb2 = tape.param(p, lp.b2);
            let f = tape.matmul(h2, w1)?;
            let f = tape.add_row(f, bb1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, bb2)?;
            let f = self.drop(tape, f, training, streams, &format!("layer{l}/ffn_out"))?;
            x = tape.add(x, f)?;
        }
        let gf = tape.param(p, lay.lnf_g);
        let bf = tape.param(p, lay.lnf_b);
        tape.layer_norm(x, gf, bf)
    }

    /// MLM-head logits `[rows.len(), vocab_size]` for selected positions.
    pub fn logits_on(&self, tape: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows)?;
        let w = match self.layout.head_w {
            Some(w) => tape.param(&self.params, w),
            None => tape.param(&self.params, self.layout.tok_emb),
        };
        let b = tape.param(&self.params, self.layout.head_b);
        let logits = tape.matmul_t(h, w)?;
        tape.add_row(logits, b)
    }

    /// Full logits `[len, vocab_size]` recorded on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, seq: &TokenSequence, training: bool, streams: &Streams) -> Result<Var> {
        let hidden = self.hidden_on(tape, &seq.ids, training, streams)?;
        let rows: Vec<usize> = (0..seq.len()).collect();
        self.logits_on(tape, hidden, &rows)
    }

    /// Full logits without recording gradients.
    pub fn forward(&self, seq: &TokenSequence, training: bool, streams: &Streams) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let out = self.forward_on(&mut tape, seq, training, streams)?;
        Ok(tape.to_tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_difference_check;

    fn small(vocab: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 32,
            num_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            vocab_size: vocab,
            dropout_rate: 0.1,
            tie_mlm_head: true,
        }
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence::from_content(ids.to_vec())
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // 105·32 + 64·32 + 2·(4·32² + 4·32 + 4·32 + 32·128 + 128 + 128·32 + 32) + 2·32 + 105
        let by_hand = 3360 + 2048 + 2 * (4096 + 128 + 128 + 4096 + 128 + 4096 + 32) + 64 + 105;
        assert_eq!(by_hand, 30985);
        let cfg = small(105);
        assert_eq!(cfg.parameter_count(), by_hand);
        let m = init_model(&cfg, &Streams::new(0)).unwrap();
        assert_eq!(m.params().num_scalars(), by_hand);

        let untied = ModelConfig {
            tie_mlm_head: false,
            ..cfg
        };
        let mu = init_model(&untied, &Streams::new(0)).unwrap();
        assert_eq!(mu.params().num_scalars() - by_hand, 105 * 32);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&small(50), &Streams::new(9)).unwrap();
        let b = init_model(&small(50), &Streams::new(9)).unwrap();
        assert_eq!(a, b);
        let c = init_model(&small(50), &Streams::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(50);
        cfg.num_heads = 5;
        let err = init_model(&cfg, &Streams::new(0)).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
        cfg = small(50);
        cfg.dropout_rate = 1.0;
        assert!(init_model(&cfg, &Streams::new(0)).is_err());
    }

    #[test]
    fn forward_shape_and_errors() {
        let m = init_model(&small(40), &Streams::new(1)).unwrap();
        let s = Streams::new(2);
        let out = m.forward(&seq(&[3, 7, 8, 4]), false, &s).unwrap();
        assert_eq!(out.shape(), &[4, 40]);
        assert!(m.forward(&seq(&[]), false, &s).is_err());
        assert!(m.forward(&seq(&vec![5; 65]), false, &s).is_err());
        assert!(m.forward(&seq(&[40]), false, &s).is_err());
    }

    #[test]
    fn eval_and_seeded_training_are_deterministic() {
        let m = init_model(&small(40), &Streams::new(1)).unwrap();
        let x = seq(&[3, 7, 8, 9, 4]);
        let a = m.forward(&x, false, &Streams::new(1)).unwrap();
        let b = m.forward(&x, false, &Streams::new(2)).unwrap();
        assert_eq!(a, b);
        let s = Streams::new(5).child("dropout");
        assert_eq!(m.forward(&x, true, &s).unwrap(), m.forward(&x, true, &s).unwrap());
    }

    #[test]
    fn distinct_dropout_streams_give_distinct_logits() {
        let m = init_model(&small(40), &Streams::new(1)).unwrap();
        let x = seq(&[3, 7, 8, 9, 10, 11, 4]);
        let root = Streams::new(5);
        let a = m.forward(&x, true, &root.child("weak")).unwrap();
        let b = m.forward(&x, true, &root.child("strong")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn model_is_position_sensitive() {
        let m = init_model(&small(40), &Streams::new(3)).unwrap();
        let s = Streams::new(0);
        let a = m.forward(&seq(&[10, 11, 12]), false, &s).unwrap();
        let b = m.forward(&seq(&[11, 10, 12]), false, &s).unwrap();
        // Row 2 sees the same multiset of tokens; only positions changed.
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig {
            vocab_size: 20,
            max_seq_len: 8,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            ..small(20)
        };
        let model = init_model(&cfg, &Streams::new(4)).unwrap();
        let x = seq(&[5, 9, 1, 12, 7]);
        let mut f = |p: &ParamSet| {
            let m = Model::from_params(cfg.clone(), p.clone())?;
            let mut tape = Tape::new();
            let logits = m.forward_on(&mut tape, &x, false, &Streams::new(0))?;
            let probs = tape.softmax_rows(logits)?;
            let row = tape.gather_rows(probs, &[2])?;
            let loss = tape.cross_entropy(row, 12)?;
            let g = tape.backward(loss, p)?;
            Ok((tape.scalar(loss), g))
        };
        let r = finite_difference_check(&mut f, model.params(), 1e-5, 60, &Streams::new(8)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{:?}", r.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)));
    }
}
