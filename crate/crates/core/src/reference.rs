//! Straight-line matrix code used as an independent oracle in unit tests.
//! Nothing here touches the tape.

use crate::autodiff::{Activation, Tensor};
use crate::nn::{Linear, TransformerBlock};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Mat {
        let cols = *t.shape().last().unwrap();
        Mat {
            rows: t.numel() / cols,
            cols,
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn append_rows(&mut self, other: &Mat) {
        assert_eq!(self.cols, other.cols);
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut data = vec![0.0; self.rows * b.cols];
        for i in 0..self.rows {
            for j in 0..b.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.at(i, k) * b.at(k, j);
                }
                data[i * b.cols + j] = acc;
            }
        }
        Mat {
            rows: self.rows,
            cols: b.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.at(i, j);
            }
        }
        Mat {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn add(&self, b: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols));
        self.map2(b, |x, y| x + y)
    }

    fn map2(&self, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_row(&self, row: &[f64]) -> Mat {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] += row[j];
            }
        }
        out
    }

    pub fn cols_range(&self, start: usize, len: usize) -> Mat {
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.data[i * self.cols + start..i * self.cols + start + len]);
        }
        Mat {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    pub fn hcat(parts: &[Mat]) -> Mat {
        let rows = parts[0].rows;
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.cols..(i + 1) * p.cols]);
            }
        }
        Mat { rows, cols, data }
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &x.data[i * x.cols..(i + 1) * x.cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..x.cols {
            out.data[i * x.cols + j] = e[j] / z;
        }
    }
    out
}

pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let scale = 1.0 / (q.cols as f64).sqrt();
    let scores = q.matmul(&k.transpose()).map(|s| s * scale);
    softmax_rows(&scores).matmul(v)
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let mut out = x.clone();
    let n = x.cols as f64;
    for i in 0..x.rows {
        let row = &x.data[i * x.cols..(i + 1) * x.cols];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = (var + 1e-5).sqrt();
        for j in 0..x.cols {
            out.data[i * x.cols + j] = (row[j] - mean) / sd * gain[j] + bias[j];
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let y = x.matmul(&Mat::from_tensor(store.get(l.weight)));
    match l.bias {
        Some(b) => y.add_row(store.get(b).data()),
        None => y,
    }
}

pub fn block(store: &ParamStore, b: &TransformerBlock, x: &Mat, act: Activation) -> Mat {
    let ln = |x: &Mat, g, bb| layer_norm(x, store.get(g).data(), store.get(bb).data());
    let h = ln(x, b.ln_attn.gain, b.ln_attn.bias);
    let q = linear(store, &b.attn.q, &h);
    let k = linear(store, &b.attn.k, &h);
    let v = linear(store, &b.attn.v, &h);
    let dh = x.cols / b.heads;
    let heads: Vec<Mat> = (0..b.heads)
        .map(|i| attention(&q.cols_range(i * dh, dh), &k.cols_range(i * dh, dh), &v.cols_range(i * dh, dh)))
        .collect();
    let a = linear(store, &b.attn.out, &Mat::hcat(&heads));
    let x = x.add(&a);
    let h = ln(&x, b.ln_mlp.gain, b.ln_mlp.bias);
    let h = linear(store, &b.fc1, &h).map(|v| match act {
        Activation::Gelu => gelu(v),
        Activation::Relu => v.max(0.0),
    });
    x.add(&linear(store, &b.fc2, &h))
}
