use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Single-head scaled dot-product attention projections (no output
/// projection). Generic over the parameter carrier so the same layout holds
/// owned tensors and their tape handles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention<P = Tensor> {
    pub query: P,
    pub key: P,
    pub value: P,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<P = Tensor> {
    /// `in × out`
    pub weight: P,
    /// `out`
    pub bias: P,
}

impl<P> Attention<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Attention<Q> {
        Attention {
            query: f(&self.query),
            key: f(&self.key),
            value: f(&self.value),
        }
    }

    pub fn parts(&self) -> [&P; 3] {
        [&self.query, &self.key, &self.value]
    }

    pub fn parts_mut(&mut self) -> [&mut P; 3] {
        [&mut self.query, &mut self.key, &mut self.value]
    }
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn parts(&self) -> [&P; 2] {
        [&self.weight, &self.bias]
    }

    pub fn parts_mut(&mut self) -> [&mut P; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Fan-in scaled uniform initialisation bound, `1/√d`.
pub fn init_bound(dim: usize) -> f64 {
    1.0 / (dim as f64).sqrt()
}

impl Attention<Tensor> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let b = init_bound(dim);
        Attention {
            query: Tensor::uniform(&[dim, dim], b, rng),
            key: Tensor::uniform(&[dim, dim], b, rng),
            value: Tensor::uniform(&[dim, dim], b, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }
}

impl Linear<Tensor> {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let b = init_bound(inputs);
        Linear {
            weight: Tensor::uniform(&[inputs, outputs], b, rng),
            bias: Tensor::uniform(&[outputs], b, rng),
        }
    }
}

/// `softmax(Q Kᵀ / √D) V` with `Q = queries·W_q`, `K = keys·W_k`,
/// `V = keys·W_v`. Self-attention when both token sets are the same.
///
/// Returns the attended tokens and the `T_q × T_k` attention matrix.
pub fn attention(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    params: &Attention<Var>,
) -> Result<(Var, Var)> {
    let (qs, ks) = (tape.value(queries).shape(), tape.value(keys).shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::dim("attention", qs, ks));
    }
    let dim = qs[1];
    let q = tape.matmul(queries, params.query)?;
    let k = tape.matmul(keys, params.key)?;
    let v = tape.matmul(keys, params.value)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dim as f64).sqrt());
    let weights = tape.softmax(scores, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// `x · W + b`.
pub fn linear(tape: &mut Tape, x: Var, params: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, params.weight)?;
    tape.add_bias(y, params.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_attention(x: &Tensor, kv: &Tensor, p: &Attention) -> Tensor {
        let d = x.cols();
        let proj = |m: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
            (0..m.rows())
                .map(|i| {
                    (0..d)
                        .map(|j| (0..d).map(|k| m.at(i, k) * w.at(k, j)).sum())
                        .collect()
                })
                .collect()
        };
        let q = proj(x, &p.query);
        let k = proj(kv, &p.key);
        let v = proj(kv, &p.value);
        let mut out = Vec::new();
        for qi in &q {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let row: Vec<f64> = (0..d)
                .map(|c| e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum())
                .collect();
            out.push(row);
        }
        Tensor::from_rows(&out).unwrap()
    }

    fn bind(tape: &mut Tape, p: &Attention) -> Attention<Var> {
        p.map(|t| tape.param(t))
    }

    #[test]
    fn single_token_returns_its_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Attention::init(4, &mut rng);
        let x = Tensor::from_rows(&[[0.3, -1.0, 2.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = bind(&mut tape, &p);
        let (out, w) = attention(&mut tape, xv, xv, &pv).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        let expect: Vec<f64> = (0..4)
            .map(|j| (0..4).map(|k| x.at(0, k) * p.value.at(k, j)).sum())
            .collect();
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_query_projection_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = Attention::init(4, &mut rng);
        p.query = Tensor::zeros(&[4, 4]);
        let x = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = bind(&mut tape, &p);
        let (out, w) = attention(&mut tape, xv, xv, &pv).unwrap();
        for &v in tape.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let v = naive_attention(
            &x,
            &x,
            &Attention {
                query: Tensor::zeros(&[4, 4]),
                ..p.clone()
            },
        );
        let mean: Vec<f64> = (0..4)
            .map(|c| (0..3).map(|r| v.at(r, c)).sum::<f64>() / 3.0)
            .collect();
        for r in 0..3 {
            for c in 0..4 {
                assert!((tape.value(out).at(r, c) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Attention::init(4, &mut rng);
        let x = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        let kv = Tensor::uniform(&[5, 4], 2.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, kvv) = (tape.constant(x.clone()), tape.constant(kv.clone()));
        let pv = bind(&mut tape, &p);
        let (self_out, _) = attention(&mut tape, xv, xv, &pv).unwrap();
        let (cross_out, _) = attention(&mut tape, xv, kvv, &pv).unwrap();
        for (got, want) in [
            (self_out, naive_attention(&x, &x, &p)),
            (cross_out, naive_attention(&x, &kv, &p)),
        ] {
            for (a, b) in tape.value(got).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embedding_mismatch_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Attention::init(4, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let y = tape.constant(Tensor::zeros(&[2, 3]));
        let pv = bind(&mut tape, &p);
        assert!(matches!(
            attention(&mut tape, x, y, &pv),
            Err(Error::Dimension { .. })
        ));
    }
}
