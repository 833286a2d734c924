//! Naive adapter forward passes that count every scalar multiply and add.

use gralora_core::adapters::GraLoraAdapter;
use gralora_core::Matrix;

#[derive(Default, Debug, Clone, Copy)]
pub struct Counter {
    pub mul: u64,
    pub add: u64,
}

impl Counter {
    pub fn total(&self) -> u64 {
        self.mul + self.add
    }
}

fn dot(c: &mut Counter, pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut acc: Option<f64> = None;
    for (x, y) in pairs {
        c.mul += 1;
        let p = x * y;
        acc = Some(match acc {
            None => p,
            Some(s) => {
                c.add += 1;
                s + p
            }
        });
    }
    acc.expect("non-empty dot product")
}

/// `Aᵀ·X` then `B·(Aᵀ·X)`, unscaled.
pub fn lora_forward(a: &Matrix, b: &Matrix, x: &Matrix, c: &mut Counter) -> Matrix {
    let (n, r) = a.shape();
    let t = x.cols();
    let latent = Matrix::from_fn(r, t, |p, q| dot(c, (0..n).map(|i| (a[(i, p)], x[(i, q)]))));
    Matrix::from_fn(b.rows(), t, |i, q| dot(c, (0..r).map(|p| (b[(i, p)], latent[(p, q)]))))
}

/// Per-block two-step products, then `k − 1` additions per output entry to
/// combine each block row. Unscaled.
pub fn gralora_forward(g: &GraLoraAdapter, x: &Matrix, c: &mut Counter) -> Matrix {
    let (k, bm, bn) = (g.k, g.block_rows(), g.block_cols());
    let t = x.cols();
    let mut y = Matrix::zeros(g.out_dim, t);
    for i in 0..k {
        let parts: Vec<Matrix> = (0..k)
            .map(|j| {
                let p = g.block(i, j);
                lora_forward(&p.a, &p.b, &x.row_block(j * bn, bn), c)
            })
            .collect();
        for row in 0..bm {
            for q in 0..t {
                let mut s = parts[0][(row, q)];
                for part in &parts[1..] {
                    c.add += 1;
                    s += part[(row, q)];
                }
                y[(i * bm + row, q)] = s;
            }
        }
    }
    y
}
