//! GPT-2 style autoregressive transformer with hand-written exact gradients.
//!
//! Pre-norm blocks (norm, attention, residual; norm, MLP, residual) with a
//! final norm, learned positional embeddings, GELU activation, and an untied
//! output projection. All parameters live in one contiguous buffer behind a
//! named-tensor layout, which keeps the optimizer, the finite-difference
//! oracle, and checkpointing trivial.

mod net;
mod scalar;

pub use net::{
    batch_greedy_decode, batch_last_argmax, batch_loss, batch_token_accuracy, forward,
    greedy_decode, loss_and_grad, DropoutSpec, ForwardTrace, TrainBatch,
};
pub use scalar::{gemm, Scalar};

use std::collections::HashMap;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// The reference 8-layer, 1-head, 128-wide configuration (~1.6M params).
    pub fn reference(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            layers: 8,
            heads: 1,
            hidden: 128,
            vocab_size,
            max_seq_len,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
    index: HashMap<String, usize>,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let h = config.hidden;
        let f = config.mlp_dim();
        let mut specs = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize| {
            specs.push(TensorSpec {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        push("tok_emb".into(), config.vocab_size, h);
        push("pos_emb".into(), config.max_seq_len, h);
        for l in 0..config.layers {
            push(format!("layer{l}.ln1.g"), 1, h);
            push(format!("layer{l}.ln1.b"), 1, h);
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("layer{l}.attn.{w}"), h, h);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                push(format!("layer{l}.attn.{b}"), 1, h);
            }
            push(format!("layer{l}.ln2.g"), 1, h);
            push(format!("layer{l}.ln2.b"), 1, h);
            push(format!("layer{l}.mlp.w_up"), h, f);
            push(format!("layer{l}.mlp.b_up"), 1, f);
            push(format!("layer{l}.mlp.w_down"), f, h);
            push(format!("layer{l}.mlp.b_down"), 1, h);
        }
        push("lnf.g".into(), 1, h);
        push("lnf.b".into(), 1, h);
        push("out.w".into(), h, config.vocab_size);
        push("out.b".into(), 1, config.vocab_size);
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Layout {
            total: offset,
            specs,
            index,
        }
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        &self.specs[self.index[name]]
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let s = self.spec(name);
        s.offset..s.offset + s.rows * s.cols
    }
}

#[derive(Debug, Clone)]
pub struct Parameters<S: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<S>,
}

impl<S: Scalar> Parameters<S> {
    /// Standard small-scale init: N(0, 0.02^2) for weight matrices and
    /// embeddings, zeros for biases and norm offsets, ones for norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![S::ZERO; layout.total];
        let mut rng = stream_rng(seed, &[tag::INIT]);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        for spec in &layout.specs {
            let slice = &mut data[spec.offset..spec.offset + spec.rows * spec.cols];
            let is_gain = spec.name.ends_with(".g");
            // All bias and norm-offset vectors are single rows; every weight
            // matrix and embedding table has more than one row.
            let is_bias = spec.rows == 1 && !is_gain;
            if is_gain {
                slice.fill(S::ONE);
            } else if is_bias {
                // already zero
            } else {
                for v in slice.iter_mut() {
                    *v = S::from_f64(normal.sample(&mut rng));
                }
            }
        }
        Ok(Parameters {
            config,
            layout,
            data,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn tensor(&self, name: &str) -> &[S] {
        &self.data[self.layout.range(name)]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [S] {
        let r = self.layout.range(name);
        &mut self.data[r]
    }

    pub fn zeros_like(&self) -> Vec<S> {
        vec![S::ZERO; self.data.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorSpec>,
    rng_state: u64,
    dtype: String,
}

/// JSON header line followed by the raw little-endian f32 parameter buffer.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    params: &Parameters<S>,
    rng_state: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        config: params.config,
        tensors: params.layout.specs.clone(),
        rng_state,
        dtype: "f32".into(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(params.data.len() * 4);
    for &v in &params.data {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters<f32>, u64)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = Vec::new();
    {
        use std::io::BufRead;
        r.read_until(b'\n', &mut header_line)?;
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_line)?;
    let layout = Layout::new(&header.config);
    if layout.specs != header.tensors {
        return Err(Error::Config(
            "checkpoint layout does not match its config".into(),
        ));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != layout.total * 4 {
        return Err(Error::Config(format!(
            "checkpoint payload {} bytes, expected {}",
            raw.len(),
            layout.total * 4
        )));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((
        Parameters {
            config: header.config,
            layout,
            data,
        },
        header.rng_state,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_init_and_shapes() {
        let cfg = ModelConfig::reference(53, 32);
        let a = Parameters::<f32>::init(cfg, 9).unwrap();
        let b = Parameters::<f32>::init(cfg, 9).unwrap();
        assert_eq!(a.data, b.data);
        let c = Parameters::<f32>::init(cfg, 10).unwrap();
        assert_ne!(a.data, c.data);
        let emb = a.layout.spec("tok_emb");
        assert_eq!((emb.rows, emb.cols), (53, 128));
    }

    #[test]
    fn reference_parameter_count_near_paper_value() {
        let cfg = ModelConfig::reference(53, 32);
        let p = Parameters::<f32>::init(cfg, 0).unwrap();
        let n = p.param_count() as f64;
        assert!((n - 1.6e6).abs() / 1.6e6 < 0.10, "param count {n}");
    }

    #[test]
    fn gains_ones_biases_zeros() {
        let cfg = ModelConfig::reference(53, 32);
        let p = Parameters::<f32>::init(cfg, 0).unwrap();
        assert!(p.tensor("layer0.ln1.g").iter().all(|&v| v == 1.0));
        assert!(p.tensor("layer0.attn.bq").iter().all(|&v| v == 0.0));
        assert!(p.tensor("out.b").iter().all(|&v| v == 0.0));
        assert!(p.tensor("out.w").iter().any(|&v| v != 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::reference(53, 32);
        cfg.heads = 3; // 128 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg2 = ModelConfig::reference(53, 32);
        cfg2.dropout = 1.0;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 16,
            vocab_size: 11,
            max_seq_len: 12,
            dropout: 0.0,
        };
        let p = Parameters::<f32>::init(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &p, 77).unwrap();
        let (q, rng_state) = load_checkpoint(&path).unwrap();
        assert_eq!(q.data, p.data);
        assert_eq!(q.config, cfg);
        assert_eq!(rng_state, 77);
    }
}
