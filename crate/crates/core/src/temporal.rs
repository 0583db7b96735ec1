//! Temporal aggregation of per-frame embeddings: scaled dot-product
//! attention with multiple heads, stacked bidirectional LSTM, and the
//! plain per-frame mean.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FrameEmbedding;
use crate::error::{Error, Result};
use crate::layers::{init_weight, Affine};
use crate::tensor::Tensor;

/// Multi-head attention geometry; per-head projection dim is d_k / heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_k: usize,
}

impl Default for AttentionConfig {
    fn default() -> AttentionConfig {
        AttentionConfig {
            n_heads: 6,
            d_k: 768,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d_k / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_k == 0 {
            return Err(Error::Config("attention needs n_heads >= 1 and d_k >= 1".into()));
        }
        if self.d_k % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_k {} is not divisible by {} heads",
                self.d_k, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V, with the
/// softmax taken row-wise over the keys. All three inputs are [T, d].
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "attention expects three equal [T,d] matrices, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let d = q.shape()[1];
    let scores = q.matmul(&k.transpose2d()?)?.scale(1.0 / (d as f64).sqrt());
    let weights = scores.softmax(1)?;
    weights.matmul(v)
}

/// Attention weight matrix alone (softmax(Q K^T / sqrt(d))), for
/// property checks over the weights.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || q.shape() != k.shape() {
        return Err(Error::Shape(format!(
            "attention_weights expects equal [T,d] matrices, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let d = q.shape()[1];
    q.matmul(&k.transpose2d()?)?
        .scale(1.0 / (d as f64).sqrt())
        .softmax(1)
}

struct HeadProjection {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
}

/// Multi-head attention aggregator: per-head projections of (Q, K, V),
/// scaled dot-product attention per head, concatenation, one feed-forward
/// projection, and a sum over the time axis.
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    heads: Vec<HeadProjection>,
    ffn: Affine,
}

impl MultiHeadAttention {
    pub fn new(cfg: AttentionConfig, seed: u64) -> Result<MultiHeadAttention> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_h = cfg.head_dim();
        let heads = (0..cfg.n_heads)
            .map(|_| HeadProjection {
                w_q: init_weight(&[cfg.d_k, d_h], cfg.d_k, &mut rng),
                w_k: init_weight(&[cfg.d_k, d_h], cfg.d_k, &mut rng),
                w_v: init_weight(&[cfg.d_k, d_h], cfg.d_k, &mut rng),
            })
            .collect();
        let ffn = Affine::new(cfg.d_k, cfg.d_k, true, &mut rng);
        Ok(MultiHeadAttention { cfg, heads, ffn })
    }

    /// Aggregate [T,d_k] query/key/value matrices into one d_k vector.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        if q.rank() != 2 || q.shape()[1] != self.cfg.d_k {
            return Err(Error::Shape(format!(
                "multi-head input must be [T,{}], got {:?}",
                self.cfg.d_k,
                q.shape()
            )));
        }
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let qi = q.matmul(&head.w_q)?;
            let ki = k.matmul(&head.w_k)?;
            let vi = v.matmul(&head.w_v)?;
            head_outputs.push(attention(&qi, &ki, &vi)?);
        }
        let concat = Tensor::concat(&head_outputs, 1)?;
        self.ffn.forward(&concat)?.sum_axis(0)
    }

    /// Aggregate a frame-embedding sequence.
    pub fn aggregate(&self, embeddings: &[FrameEmbedding]) -> Result<Tensor> {
        if embeddings.is_empty() {
            return Err(Error::EmptySequence("attention over zero frames"));
        }
        let q = Tensor::stack_rows(&embeddings.iter().map(|e| e.q.clone()).collect::<Vec<_>>())?;
        let k = Tensor::stack_rows(&embeddings.iter().map(|e| e.k.clone()).collect::<Vec<_>>())?;
        let v = Tensor::stack_rows(&embeddings.iter().map(|e| e.v.clone()).collect::<Vec<_>>())?;
        self.forward(&q, &k, &v)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for h in &mut self.heads {
            p.push(&mut h.w_q);
            p.push(&mut h.w_k);
            p.push(&mut h.w_v);
        }
        p.extend(self.ffn.params_mut());
        p
    }

    pub fn named_state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{i}.w_q"), h.w_q.clone()));
            out.push((format!("{prefix}.head{i}.w_k"), h.w_k.clone()));
            out.push((format!("{prefix}.head{i}.w_v"), h.w_v.clone()));
        }
        self.ffn.named_state(&format!("{prefix}.ffn"), out);
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        for (i, h) in self.heads.iter_mut().enumerate() {
            for (field, slot) in [
                ("w_q", &mut h.w_q),
                ("w_k", &mut h.w_k),
                ("w_v", &mut h.w_v),
            ] {
                let name = format!("{prefix}.head{i}.{field}");
                let t = map
                    .get(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = Tensor::param(t.shape(), t.values().to_vec())?;
            }
        }
        self.ffn.load_state(&format!("{prefix}.ffn"), map)
    }

    pub fn param_count(&self) -> usize {
        let heads: usize = self
            .heads
            .iter()
            .map(|h| h.w_q.numel() + h.w_k.numel() + h.w_v.numel())
            .sum();
        heads + self.ffn.param_count()
    }
}

/// Stacked bidirectional LSTM geometry. Gates omit bias terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    pub bias: bool,
}

impl Default for LstmConfig {
    fn default() -> LstmConfig {
        LstmConfig {
            layers: 3,
            hidden: 256,
            bidirectional: true,
            bias: false,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("lstm needs layers >= 1 and hidden >= 1".into()));
        }
        Ok(())
    }
}

/// One LSTM cell with standard gate equations i/f/g/o.
pub struct LstmCell {
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub w_g: Tensor,
    pub u_g: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b: Option<[Tensor; 4]>,
}

impl LstmCell {
    fn new(input: usize, hidden: usize, bias: bool, rng: &mut ChaCha8Rng) -> LstmCell {
        let w = |rng: &mut ChaCha8Rng| init_weight(&[hidden, input], input, rng);
        let u = |rng: &mut ChaCha8Rng| init_weight(&[hidden, hidden], hidden, rng);
        LstmCell {
            w_i: w(rng),
            u_i: u(rng),
            w_f: w(rng),
            u_f: u(rng),
            w_g: w(rng),
            u_g: u(rng),
            w_o: w(rng),
            u_o: u(rng),
            b: bias.then(|| {
                [
                    crate::layers::zeros_param(&[hidden]),
                    crate::layers::zeros_param(&[hidden]),
                    crate::layers::zeros_param(&[hidden]),
                    crate::layers::zeros_param(&[hidden]),
                ]
            }),
        }
    }

    /// One step: returns (h', c').
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let gate = |w: &Tensor, u: &Tensor, b: Option<&Tensor>| -> Result<Tensor> {
            let mut z = w.matvec(x)?.add(&u.matvec(h)?)?;
            if let Some(b) = b {
                z = z.add(b)?;
            }
            Ok(z)
        };
        let bias = |i: usize| self.b.as_ref().map(|b| &b[i]);
        let i = gate(&self.w_i, &self.u_i, bias(0))?.sigmoid();
        let f = gate(&self.w_f, &self.u_f, bias(1))?.sigmoid();
        let g = gate(&self.w_g, &self.u_g, bias(2))?.tanh();
        let o = gate(&self.w_o, &self.u_o, bias(3))?.sigmoid();
        let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.tanh())?;
        Ok((h_next, c_next))
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![
            &mut self.w_i,
            &mut self.u_i,
            &mut self.w_f,
            &mut self.u_f,
            &mut self.w_g,
            &mut self.u_g,
            &mut self.w_o,
            &mut self.u_o,
        ];
        if let Some(b) = self.b.as_mut() {
            p.extend(b.iter_mut());
        }
        p
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, t) in self.named_pairs() {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }

    fn named_pairs(&self) -> Vec<(&'static str, &Tensor)> {
        let mut p = vec![
            ("w_i", &self.w_i),
            ("u_i", &self.u_i),
            ("w_f", &self.w_f),
            ("u_f", &self.u_f),
            ("w_g", &self.w_g),
            ("u_g", &self.u_g),
            ("w_o", &self.w_o),
            ("u_o", &self.u_o),
        ];
        if let Some(b) = &self.b {
            p.push(("b_i", &b[0]));
            p.push(("b_f", &b[1]));
            p.push(("b_g", &b[2]));
            p.push(("b_o", &b[3]));
        }
        p
    }

    fn load(&mut self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        let names: Vec<String> = self
            .named_pairs()
            .iter()
            .map(|(n, _)| format!("{prefix}.{n}"))
            .collect();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Tensor::param(t.shape(), t.values().to_vec())?;
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        let mut n = self.w_i.numel() * 4 + self.u_i.numel() * 4;
        if let Some(b) = &self.b {
            n += b.iter().map(Tensor::numel).sum::<usize>();
        }
        n
    }
}

/// Stacked (bi)directional LSTM over a [T, d_k] sequence, producing one
/// d_k vector from the final forward/backward hidden states through a
/// bias-free linear map.
pub struct LstmAggregator {
    pub cfg: LstmConfig,
    pub d_k: usize,
    layers: Vec<(LstmCell, Option<LstmCell>)>,
    out_proj: Tensor,
}

impl LstmAggregator {
    pub fn new(cfg: LstmConfig, d_k: usize, seed: u64) -> Result<LstmAggregator> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir_mult = if cfg.bidirectional { 2 } else { 1 };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 { d_k } else { cfg.hidden * dir_mult };
            let fwd = LstmCell::new(input, cfg.hidden, cfg.bias, &mut rng);
            let bwd = cfg
                .bidirectional
                .then(|| LstmCell::new(input, cfg.hidden, cfg.bias, &mut rng));
            layers.push((fwd, bwd));
        }
        let out_proj = init_weight(&[d_k, cfg.hidden * dir_mult], cfg.hidden * dir_mult, &mut rng);
        Ok(LstmAggregator {
            cfg,
            d_k,
            layers,
            out_proj,
        })
    }

    /// Run the stack over a [T, d_k] sequence.
    pub fn forward(&self, seq: &Tensor) -> Result<Tensor> {
        if seq.rank() != 2 || seq.shape()[1] != self.d_k {
            return Err(Error::Shape(format!(
                "lstm input must be [T,{}], got {:?}",
                self.d_k,
                seq.shape()
            )));
        }
        let t_n = seq.shape()[0];
        let hidden = self.cfg.hidden;
        let mut inputs: Vec<Tensor> = (0..t_n).map(|t| seq.row(t)).collect::<Result<_>>()?;

        let mut final_fwd = None;
        let mut final_bwd = None;
        for (fwd, bwd) in &self.layers {
            let run = |cell: &LstmCell, order: Box<dyn Iterator<Item = usize>>| -> Result<Vec<Tensor>> {
                let mut h = Tensor::zeros(&[hidden]);
                let mut c = Tensor::zeros(&[hidden]);
                let mut states = vec![Tensor::zeros(&[hidden]); t_n];
                for t in order {
                    let (h2, c2) = cell.step(&inputs[t], &h, &c)?;
                    states[t] = h2.clone();
                    h = h2;
                    c = c2;
                }
                Ok(states)
            };
            let fwd_states = run(fwd, Box::new(0..t_n))?;
            final_fwd = Some(fwd_states[t_n - 1].clone());
            let step_outputs = match bwd {
                Some(bwd_cell) => {
                    let bwd_states = run(bwd_cell, Box::new((0..t_n).rev()))?;
                    final_bwd = Some(bwd_states[0].clone());
                    (0..t_n)
                        .map(|t| Tensor::concat(&[fwd_states[t].clone(), bwd_states[t].clone()], 0))
                        .collect::<Result<Vec<_>>>()?
                }
                None => fwd_states,
            };
            inputs = step_outputs;
        }

        let last = match (final_fwd, final_bwd) {
            (Some(f), Some(b)) => Tensor::concat(&[f, b], 0)?,
            (Some(f), None) => f,
            _ => unreachable!("at least one layer ran"),
        };
        self.out_proj.matvec(&last)
    }

    /// Aggregate a frame-embedding sequence (single-head embeddings).
    pub fn aggregate(&self, embeddings: &[FrameEmbedding]) -> Result<Tensor> {
        if embeddings.is_empty() {
            return Err(Error::EmptySequence("lstm over zero frames"));
        }
        let seq = Tensor::stack_rows(&embeddings.iter().map(|e| e.v.clone()).collect::<Vec<_>>())?;
        self.forward(&seq)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for (fwd, bwd) in &mut self.layers {
            p.extend(fwd.tensors_mut());
            if let Some(b) = bwd {
                p.extend(b.tensors_mut());
            }
        }
        p.push(&mut self.out_proj);
        p
    }

    pub fn named_state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            fwd.named(&format!("{prefix}.layer{l}.fwd"), out);
            if let Some(b) = bwd {
                b.named(&format!("{prefix}.layer{l}.bwd"), out);
            }
        }
        out.push((format!("{prefix}.out_proj"), self.out_proj.clone()));
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        for (l, (fwd, bwd)) in self.layers.iter_mut().enumerate() {
            fwd.load(&format!("{prefix}.layer{l}.fwd"), map)?;
            if let Some(b) = bwd {
                b.load(&format!("{prefix}.layer{l}.bwd"), map)?;
            }
        }
        let name = format!("{prefix}.out_proj");
        let t = map
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
        self.out_proj = Tensor::param(t.shape(), t.values().to_vec())?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let cells: usize = self
            .layers
            .iter()
            .map(|(f, b)| f.param_count() + b.as_ref().map_or(0, LstmCell::param_count))
            .sum();
        cells + self.out_proj.numel()
    }
}

/// Elementwise arithmetic mean of same-shape logit maps.
pub fn mean_aggregate(maps: &[Tensor]) -> Result<Tensor> {
    if maps.is_empty() {
        return Err(Error::EmptySequence("mean of zero maps"));
    }
    let mut acc = maps[0].clone();
    for m in &maps[1..] {
        acc = acc.add(m)?;
    }
    Ok(acc.scale(1.0 / maps.len() as f64))
}
