//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use disentangle::DenseMatrix;

/// Logistic regression fitted by full-batch gradient descent on the columns
/// `cols` of `x`.
pub struct Logistic {
    pub cols: Vec<usize>,
    pub w: Vec<f64>,
    pub b: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Logistic {
    pub fn fit(x: &DenseMatrix, y: &[u8], cols: &[usize], iters: usize, lr: f64) -> Self {
        let n = x.rows() as f64;
        let mut m = Self {
            cols: cols.to_vec(),
            w: vec![0.0; cols.len()],
            b: 0.0,
        };
        for _ in 0..iters {
            let mut gw = vec![0.0; cols.len()];
            let mut gb = 0.0;
            for i in 0..x.rows() {
                let r = sigmoid(m.logit(x.row(i))) - y[i] as f64;
                for (g, &c) in gw.iter_mut().zip(cols) {
                    *g += r * x.get(i, c);
                }
                gb += r;
            }
            for (w, g) in m.w.iter_mut().zip(&gw) {
                *w -= lr * g / n;
            }
            m.b -= lr * gb / n;
        }
        m
    }

    pub fn logit(&self, row: &[f64]) -> f64 {
        self.cols.iter().zip(&self.w).map(|(&c, w)| row[c] * w).sum::<f64>() + self.b
    }

    pub fn mean_loss(&self, x: &DenseMatrix, y: &[u8]) -> f64 {
        (0..x.rows())
            .map(|i| {
                let p = sigmoid(self.logit(x.row(i)));
                if y[i] == 1 { -p.ln() } else { -(1.0 - p).ln() }
            })
            .sum::<f64>()
            / x.rows() as f64
    }

    pub fn accuracy(&self, x: &DenseMatrix, y: &[u8]) -> f64 {
        let hits = (0..x.rows())
            .filter(|&i| (self.logit(x.row(i)) >= 0.0) == (y[i] == 1))
            .count();
        hits as f64 / x.rows() as f64
    }
}
