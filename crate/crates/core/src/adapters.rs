//! LoRA, GraLoRA and Hybrid GraLoRA adapters over an `M × N` linear layer.
//!
//! Shapes follow the layer convention `Y = W0·X + R·X` with `W0: M × N`,
//! `X: N × T`. A LoRA adapter holds `A: N × r` and `B: M × r` and contributes
//! `R = s·B·Aᵀ`. A GraLoRA adapter splits the output rows and input columns
//! into a `k × k` grid, block `(i, j)` carrying its own pair
//! `A_ij: N/k × r/k`, `B_ij: M/k × r/k`. A hybrid adapter sums a LoRA part and
//! a GraLoRA part that share one rank budget.
//!
//! The scale is always `s = α / r` with `r` the *total* rank budget, for every
//! part and every block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, DEFAULT_RANK_TOL};
use crate::matrix::Matrix;
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Lora,
    Gralora,
    Hybrid,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Gralora => "gralora",
            AdapterKind::Hybrid => "hybrid",
        }
    }
}

/// Everything needed to build an adapter of a given shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    /// Output dimension `M`.
    pub out_dim: usize,
    /// Input dimension `N`.
    pub in_dim: usize,
    /// Total rank budget `r`.
    pub rank: usize,
    /// Grid size; ignored for plain LoRA.
    pub k: usize,
    pub alpha: f64,
    /// Rank of the LoRA part of a hybrid adapter (`r_L`); ignored otherwise.
    pub lora_rank: usize,
}

impl AdapterSpec {
    /// Plain LoRA with the default `α = 2r`.
    pub fn lora(out_dim: usize, in_dim: usize, rank: usize) -> Self {
        Self {
            kind: AdapterKind::Lora,
            out_dim,
            in_dim,
            rank,
            k: 1,
            alpha: 2.0 * rank as f64,
            lora_rank: rank,
        }
    }

    pub fn gralora(out_dim: usize, in_dim: usize, rank: usize, k: usize) -> Self {
        Self {
            kind: AdapterKind::Gralora,
            k,
            lora_rank: 0,
            ..Self::lora(out_dim, in_dim, rank)
        }
    }

    pub fn hybrid(out_dim: usize, in_dim: usize, rank: usize, k: usize, lora_rank: usize) -> Self {
        Self {
            kind: AdapterKind::Hybrid,
            k,
            lora_rank,
            ..Self::lora(out_dim, in_dim, rank)
        }
    }

    /// Hybrid whose LoRA share is `round(ratio · r)`.
    pub fn hybrid_with_ratio(
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        k: usize,
        ratio: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("hybrid ratio {ratio} outside [0, 1]")));
        }
        let lora_rank = (ratio * rank as f64).round() as usize;
        Ok(Self::hybrid(out_dim, in_dim, rank, k, lora_rank))
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn gralora_rank(&self) -> usize {
        match self.kind {
            AdapterKind::Lora => 0,
            AdapterKind::Gralora => self.rank,
            AdapterKind::Hybrid => self.rank.saturating_sub(self.lora_rank),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 || self.in_dim == 0 {
            return Err(Error::Config(format!(
                "layer dimensions must be positive, got {}x{}",
                self.out_dim, self.in_dim
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite, got {}", self.alpha)));
        }
        if self.kind == AdapterKind::Hybrid && self.lora_rank > self.rank {
            return Err(Error::Config(format!(
                "hybrid LoRA rank {} exceeds total rank {}",
                self.lora_rank, self.rank
            )));
        }
        let grid_rank = self.gralora_rank();
        if grid_rank > 0 {
            let k = self.k;
            if k == 0 {
                return Err(Error::Config("k must be positive".into()));
            }
            for (what, value) in [("M", self.out_dim), ("N", self.in_dim), ("r", grid_rank)] {
                if value % k != 0 {
                    return Err(Error::Divisibility { what, value, k });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `N × r`.
    pub a: Matrix,
    /// `M × r`.
    pub b: Matrix,
    pub alpha: f64,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    fn sample<R: Rng>(out_dim: usize, in_dim: usize, rank: usize, scale: f64, alpha: f64, random_b: bool, rng: &mut R) -> Self {
        let a = Matrix::gaussian(in_dim, rank, init_std(in_dim), rng);
        let b = if random_b {
            Matrix::gaussian(out_dim, rank, init_std(out_dim), rng)
        } else {
            Matrix::zeros(out_dim, rank)
        };
        Self { a, b, alpha, scale }
    }

    pub fn fused_update(&self) -> Matrix {
        self.b.matmul_t(&self.a).expect("factor shapes agree").scale(self.scale)
    }

    /// `s·B·(Aᵀ·X)`, low-rank product order.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let latent = self.a.t_matmul(x)?;
        Ok(self.b.matmul(&latent)?.scale(self.scale))
    }

    pub fn param_count(&self) -> usize {
        self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPair {
    /// `N/k × r/k`.
    pub a: Matrix,
    /// `M/k × r/k`.
    pub b: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraLoraAdapter {
    pub k: usize,
    pub rank: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    pub alpha: f64,
    pub scale: f64,
    /// Row-major over the grid: block `(i, j)` lives at `i * k + j`.
    pub blocks: Vec<BlockPair>,
}

impl GraLoraAdapter {
    #[allow(clippy::too_many_arguments)]
    fn sample<R: Rng>(
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        k: usize,
        scale: f64,
        alpha: f64,
        random_b: bool,
        rng: &mut R,
    ) -> Self {
        let (bm, bn, br) = (out_dim / k, in_dim / k, rank / k);
        let blocks = (0..k * k)
            .map(|_| {
                let a = Matrix::gaussian(bn, br, init_std(in_dim), rng);
                let b = if random_b {
                    Matrix::gaussian(bm, br, init_std(out_dim), rng)
                } else {
                    Matrix::zeros(bm, br)
                };
                BlockPair { a, b }
            })
            .collect();
        Self {
            k,
            rank,
            out_dim,
            in_dim,
            alpha,
            scale,
            blocks,
        }
    }

    pub fn block(&self, i: usize, j: usize) -> &BlockPair {
        &self.blocks[i * self.k + j]
    }

    pub fn block_rows(&self) -> usize {
        self.out_dim / self.k
    }

    pub fn block_cols(&self) -> usize {
        self.in_dim / self.k
    }

    pub fn block_rank(&self) -> usize {
        self.rank / self.k
    }

    pub fn fused_update(&self) -> Matrix {
        let (bm, bn) = (self.block_rows(), self.block_cols());
        let mut r = Matrix::zeros(self.out_dim, self.in_dim);
        for i in 0..self.k {
            for j in 0..self.k {
                let p = self.block(i, j);
                let blk = p.b.matmul_t(&p.a).expect("factor shapes agree").scale(self.scale);
                r.set_submatrix(i * bm, j * bn, &blk);
            }
        }
        r
    }

    /// Block-wise two-step product: `Y_i = Σ_j s·B_ij·(A_ijᵀ·X_j)`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_dim {
            return Err(Error::Dimension {
                op: "gralora apply",
                left: (self.out_dim, self.in_dim),
                right: x.shape(),
            });
        }
        let (bm, bn) = (self.block_rows(), self.block_cols());
        let slices: Vec<Matrix> = (0..self.k).map(|j| x.row_block(j * bn, bn)).collect();
        let mut y = Matrix::zeros(self.out_dim, x.cols());
        for i in 0..self.k {
            let mut row_acc: Option<Matrix> = None;
            for (j, xj) in slices.iter().enumerate() {
                let p = self.block(i, j);
                let part = p.b.matmul(&p.a.t_matmul(xj)?)?;
                match row_acc.as_mut() {
                    None => row_acc = Some(part),
                    Some(acc) => acc.add_assign(&part)?,
                }
            }
            let acc = row_acc.expect("k >= 1").scale(self.scale);
            y.set_submatrix(i * bm, 0, &acc);
        }
        Ok(y)
    }

    /// Sparse factor pair `(A_G: N × kr, B_G: M × kr)` with
    /// `B_G·A_Gᵀ = R / s`.
    ///
    /// Column blocks have width `r/k` and are indexed `c = i·k + j`. `A_ij`
    /// sits at block-row `j` of `A_G` and `B_ij` at block-row `i` of `B_G`,
    /// both in column block `c`, so the only shared column block between
    /// output block-row `i` and input block-row `j` is the one for pair
    /// `(i, j)`.
    pub fn to_regularized_form(&self) -> (Matrix, Matrix) {
        let (bm, bn, br) = (self.block_rows(), self.block_cols(), self.block_rank());
        let width = self.k * self.rank;
        let mut a_g = Matrix::zeros(self.in_dim, width);
        let mut b_g = Matrix::zeros(self.out_dim, width);
        for i in 0..self.k {
            for j in 0..self.k {
                let c = i * self.k + j;
                let p = self.block(i, j);
                a_g.set_submatrix(j * bn, c * br, &p.a);
                b_g.set_submatrix(i * bm, c * br, &p.b);
            }
        }
        (a_g, b_g)
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|p| p.a.rows() * p.a.cols() + p.b.rows() * p.b.cols())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridGraLoraAdapter {
    /// `None` when the whole budget goes to the GraLoRA part.
    pub lora: Option<LoraAdapter>,
    /// `None` when the whole budget goes to the LoRA part.
    pub gralora: Option<GraLoraAdapter>,
    pub rank: usize,
    pub k: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    pub alpha: f64,
}

impl HybridGraLoraAdapter {
    pub fn lora_rank(&self) -> usize {
        self.lora.as_ref().map_or(0, LoraAdapter::rank)
    }

    /// `r_L / (r_L + r_G)`.
    pub fn ratio(&self) -> f64 {
        self.lora_rank() as f64 / self.rank as f64
    }

    pub fn fused_update(&self) -> Matrix {
        match (&self.lora, &self.gralora) {
            (Some(l), None) => l.fused_update(),
            (None, Some(g)) => g.fused_update(),
            (Some(l), Some(g)) => l.fused_update().add(&g.fused_update()).expect("same shape"),
            (None, None) => unreachable!("hybrid adapter without parts"),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match (&self.lora, &self.gralora) {
            (Some(l), None) => l.apply(x),
            (None, Some(g)) => g.apply(x),
            (Some(l), Some(g)) => l.apply(x)?.add(&g.apply(x)?),
            (None, None) => unreachable!("hybrid adapter without parts"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.lora.as_ref().map_or(0, LoraAdapter::param_count)
            + self.gralora.as_ref().map_or(0, GraLoraAdapter::param_count)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    Gralora(GraLoraAdapter),
    Hybrid(HybridGraLoraAdapter),
}

fn init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn build(spec: &AdapterSpec, seed: u64, random_b: bool) -> Result<Adapter> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let (m, n, r, s, alpha) = (spec.out_dim, spec.in_dim, spec.rank, spec.scale(), spec.alpha);
    Ok(match spec.kind {
        AdapterKind::Lora => Adapter::Lora(LoraAdapter::sample(m, n, r, s, alpha, random_b, &mut rng)),
        AdapterKind::Gralora => Adapter::Gralora(GraLoraAdapter::sample(
            m, n, r, spec.k, s, alpha, random_b, &mut rng,
        )),
        AdapterKind::Hybrid => {
            // LoRA part first, then the grid, from one stream: a ratio-1 hybrid
            // draws exactly what plain LoRA draws, ratio 0 what plain GraLoRA draws.
            let lora = (spec.lora_rank > 0)
                .then(|| LoraAdapter::sample(m, n, spec.lora_rank, s, alpha, random_b, &mut rng));
            let grid_rank = spec.gralora_rank();
            let gralora = (grid_rank > 0).then(|| {
                GraLoraAdapter::sample(m, n, grid_rank, spec.k, s, alpha, random_b, &mut rng)
            });
            Adapter::Hybrid(HybridGraLoraAdapter {
                lora,
                gralora,
                rank: r,
                k: spec.k,
                out_dim: m,
                in_dim: n,
                alpha,
            })
        }
    })
}

/// Standard initialization: Gaussian `A` (std `1/√N`), zero `B`, so the
/// fused update starts at zero.
pub fn init_adapter(spec: &AdapterSpec, seed: u64) -> Result<Adapter> {
    build(spec, seed, false)
}

/// Every factor Gaussian (`A` std `1/√N`, `B` std `1/√M`). Used for
/// structural analysis where a nonzero update is required.
pub fn random_adapter(spec: &AdapterSpec, seed: u64) -> Result<Adapter> {
    build(spec, seed, true)
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Gralora(_) => AdapterKind::Gralora,
            Adapter::Hybrid(_) => AdapterKind::Hybrid,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.b.rows(),
            Adapter::Gralora(g) => g.out_dim,
            Adapter::Hybrid(h) => h.out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.a.rows(),
            Adapter::Gralora(g) => g.in_dim,
            Adapter::Hybrid(h) => h.in_dim,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.rank(),
            Adapter::Gralora(g) => g.rank,
            Adapter::Hybrid(h) => h.rank,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Adapter::Lora(l) => l.alpha,
            Adapter::Gralora(g) => g.alpha,
            Adapter::Hybrid(h) => h.alpha,
        }
    }

    pub fn spec(&self) -> AdapterSpec {
        let base = AdapterSpec::lora(self.out_dim(), self.in_dim(), self.rank()).with_alpha(self.alpha());
        match self {
            Adapter::Lora(_) => base,
            Adapter::Gralora(g) => AdapterSpec {
                kind: AdapterKind::Gralora,
                k: g.k,
                lora_rank: 0,
                ..base
            },
            Adapter::Hybrid(h) => AdapterSpec {
                kind: AdapterKind::Hybrid,
                k: h.k,
                lora_rank: h.lora_rank(),
                ..base
            },
        }
    }

    pub fn fused_update(&self) -> Matrix {
        match self {
            Adapter::Lora(l) => l.fused_update(),
            Adapter::Gralora(g) => g.fused_update(),
            Adapter::Hybrid(h) => h.fused_update(),
        }
    }

    /// Adapter-path output `R·X`, computed without forming `R`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_dim() {
            return Err(Error::Dimension {
                op: "adapter apply",
                left: (self.out_dim(), self.in_dim()),
                right: x.shape(),
            });
        }
        match self {
            Adapter::Lora(l) => l.apply(x),
            Adapter::Gralora(g) => g.apply(x),
            Adapter::Hybrid(h) => h.apply(x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.param_count(),
            Adapter::Gralora(g) => g.param_count(),
            Adapter::Hybrid(h) => h.param_count(),
        }
    }

    /// Numerical rank of the fused update at the default tolerance.
    pub fn effective_rank(&self) -> usize {
        numerical_rank(&self.fused_update(), DEFAULT_RANK_TOL)
    }

    /// Trainable factors in canonical order: LoRA `[A, B]`; GraLoRA
    /// `[A_00, B_00, A_01, B_01, …]` row-major over the grid; hybrid the LoRA
    /// part followed by the GraLoRA part.
    pub fn factors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        match self {
            Adapter::Lora(l) => out.extend([&l.a, &l.b]),
            Adapter::Gralora(g) => g.blocks.iter().for_each(|p| out.extend([&p.a, &p.b])),
            Adapter::Hybrid(h) => {
                if let Some(l) = &h.lora {
                    out.extend([&l.a, &l.b]);
                }
                if let Some(g) = &h.gralora {
                    g.blocks.iter().for_each(|p| out.extend([&p.a, &p.b]));
                }
            }
        }
        out
    }

    pub fn factors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        match self {
            Adapter::Lora(l) => out.extend([&mut l.a, &mut l.b]),
            Adapter::Gralora(g) => g.blocks.iter_mut().for_each(|p| out.extend([&mut p.a, &mut p.b])),
            Adapter::Hybrid(h) => {
                if let Some(l) = &mut h.lora {
                    out.extend([&mut l.a, &mut l.b]);
                }
                if let Some(g) = &mut h.gralora {
                    g.blocks.iter_mut().for_each(|p| out.extend([&mut p.a, &mut p.b]));
                }
            }
        }
        out
    }

    /// Names matching [`Adapter::factors`], e.g. `A`, `B_1_0`, `lora.A`, `grid.A_0_1`.
    pub fn factor_names(&self) -> Vec<String> {
        fn grid(prefix: &str, k: usize, out: &mut Vec<String>) {
            for i in 0..k {
                for j in 0..k {
                    out.push(format!("{prefix}A_{i}_{j}"));
                    out.push(format!("{prefix}B_{i}_{j}"));
                }
            }
        }
        let mut out = Vec::new();
        match self {
            Adapter::Lora(_) => out.extend(["A".to_string(), "B".to_string()]),
            Adapter::Gralora(g) => grid("", g.k, &mut out),
            Adapter::Hybrid(h) => {
                if h.lora.is_some() {
                    out.extend(["lora.A".to_string(), "lora.B".to_string()]);
                }
                if let Some(g) = &h.gralora {
                    grid("grid.", g.k, &mut out);
                }
            }
        }
        out
    }
}

/// Frozen base weight plus one adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLayer {
    w0: Matrix,
    pub adapter: Adapter,
}

impl AdaptedLayer {
    pub fn new(w0: Matrix, adapter: Adapter) -> Result<Self> {
        if w0.shape() != (adapter.out_dim(), adapter.in_dim()) {
            return Err(Error::Dimension {
                op: "adapted layer",
                left: w0.shape(),
                right: (adapter.out_dim(), adapter.in_dim()),
            });
        }
        Ok(Self { w0, adapter })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    /// `W0 + R`.
    pub fn merge(&self) -> Matrix {
        self.w0.add(&self.adapter.fused_update()).expect("shapes checked at construction")
    }
}

pub fn merge(layer: &AdaptedLayer) -> Matrix {
    layer.merge()
}

pub fn fused_update(adapter: &Adapter) -> Matrix {
    adapter.fused_update()
}

pub fn param_count(adapter: &Adapter) -> usize {
    adapter.param_count()
}

pub fn effective_rank(adapter: &GraLoraAdapter) -> usize {
    numerical_rank(&adapter.fused_update(), DEFAULT_RANK_TOL)
}

pub fn to_regularized_form(adapter: &GraLoraAdapter) -> (Matrix, Matrix) {
    adapter.to_regularized_form()
}
