//! Layers shared by both predictors: the multi-head self-attention block
//! and a ReLU MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{normal_tensor, Binding, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidArgument("attention sizes must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone)]
struct Head {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

/// `SelfAtt(S) = LayerNorm(Y + FFN(Y))` with
/// `Y = LayerNorm(S + ‖_i softmax(S Wq_i (S Wk_i)ᵀ / √⌊d/h⌋) S Wv_i)`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    cfg: AttentionConfig,
    heads: Vec<Head>,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

impl AttentionBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let dh = cfg.head_dim();
        let std_in = 1.0 / (d as f64).sqrt();
        let heads = (0..cfg.heads)
            .map(|i| Head {
                wq: store.add(format!("{prefix}.head{i}.wq"), normal_tensor(rng, d, dh, std_in)),
                wk: store.add(format!("{prefix}.head{i}.wk"), normal_tensor(rng, d, dh, std_in)),
                wv: store.add(format!("{prefix}.head{i}.wv"), normal_tensor(rng, d, dh, std_in)),
            })
            .collect();
        Ok(AttentionBlock {
            cfg,
            heads,
            ln1_gain: store.add(format!("{prefix}.ln1.gain"), Tensor::filled(1, d, T::one())),
            ln1_bias: store.add(format!("{prefix}.ln1.bias"), Tensor::zeros(1, d)),
            ffn_w1: store.add(format!("{prefix}.ffn.w1"), normal_tensor(rng, d, cfg.ffn_dim, std_in)),
            ffn_b1: store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(1, cfg.ffn_dim)),
            ffn_w2: store.add(
                format!("{prefix}.ffn.w2"),
                normal_tensor(rng, cfg.ffn_dim, d, 1.0 / (cfg.ffn_dim as f64).sqrt()),
            ),
            ffn_b2: store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(1, d)),
            ln2_gain: store.add(format!("{prefix}.ln2.gain"), Tensor::filled(1, d, T::one())),
            ln2_bias: store.add(format!("{prefix}.ln2.bias"), Tensor::zeros(1, d)),
        })
    }

    pub fn config(&self) -> AttentionConfig {
        self.cfg
    }

    /// Runs the block over many sequences packed into one `table` of rows.
    ///
    /// Sequence `i` consists of the table rows in `segments[i]`; its output
    /// is read at the position of `query_rows[i]`, which must be one of
    /// those rows. Everything after attention is row-wise, so computing
    /// only the queried rows gives exactly the corresponding rows of the
    /// full per-sequence self-attention.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        table: Var,
        query_rows: &[usize],
        segments: Vec<Vec<usize>>,
    ) -> Result<Var> {
        if g.value(table).cols() != self.cfg.dim {
            return Err(Error::Shape(format!(
                "attention block of width {} got {:?}",
                self.cfg.dim,
                g.value(table).shape()
            )));
        }
        if query_rows.len() != segments.len() {
            return Err(Error::Shape("one segment per query row required".into()));
        }
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let s = g.gather_rows(table, query_rows)?;
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = g.matmul(s, b.var(h.wq))?;
            let k = g.matmul(table, b.var(h.wk))?;
            let v = g.matmul(table, b.var(h.wv))?;
            outs.push(g.segment_attention(q, k, v, segments.clone(), scale)?);
        }
        let heads = g.concat(&outs, 1)?;
        let res = g.add(s, heads)?;
        let y = g.layer_norm(res, b.var(self.ln1_gain), b.var(self.ln1_bias), LAYER_NORM_EPS)?;
        let h1 = g.matmul(y, b.var(self.ffn_w1))?;
        let h1 = g.add_row(h1, b.var(self.ffn_b1))?;
        let h1 = g.relu(h1)?;
        let f = g.matmul(h1, b.var(self.ffn_w2))?;
        let f = g.add_row(f, b.var(self.ffn_b2))?;
        let res2 = g.add(y, f)?;
        g.layer_norm(res2, b.var(self.ln2_gain), b.var(self.ln2_bias), LAYER_NORM_EPS)
    }
}

/// Dense layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = 1.0 / (w[0] as f64).sqrt();
                (
                    store.add(format!("{prefix}.{i}.w"), normal_tensor(rng, w[0], w[1], std)),
                    store.add(format!("{prefix}.{i}.b"), Tensor::zeros(1, w[1])),
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, bias)) in self.layers.iter().enumerate() {
            h = g.matmul(h, b.var(w))?;
            h = g.add_row(h, b.var(bias))?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(dim: usize, heads: usize) -> (ParamStore<f64>, AttentionBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AttentionConfig { dim, heads, ffn_dim: 2 * dim };
        let blk = AttentionBlock::new(&mut store, "blk", cfg, &mut rng).unwrap();
        (store, blk)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AttentionConfig { dim: 10, heads: 4, ffn_dim: 8 };
        assert!(AttentionBlock::new(&mut store, "x", cfg, &mut rng).is_err());
    }

    #[test]
    fn readout_rows_match_full_self_attention() {
        let (store, blk) = block(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table: Tensor<f64> = normal_tensor(&mut rng, 5, 8, 1.0);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let t = g.constant(table);
        let all: Vec<usize> = (0..5).collect();
        let full = blk.forward(&mut g, &b, t, &all, vec![all.clone(); 5]).unwrap();
        let only = blk.forward(&mut g, &b, t, &[3], vec![all.clone()]).unwrap();
        for j in 0..8 {
            assert!((g.value(full).at(3, j) - g.value(only).at(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_invariant_to_member_order() {
        let (store, blk) = block(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table: Tensor<f64> = normal_tensor(&mut rng, 6, 8, 1.0);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let t = g.constant(table);
        let a = blk.forward(&mut g, &b, t, &[0], vec![vec![0, 1, 2, 3, 4, 5]]).unwrap();
        let c = blk.forward(&mut g, &b, t, &[0], vec![vec![0, 5, 3, 1, 4, 2]]).unwrap();
        for j in 0..8 {
            assert!((g.value(a).at(0, j) - g.value(c).at(0, j)).abs() < 1e-12);
        }
    }
}
