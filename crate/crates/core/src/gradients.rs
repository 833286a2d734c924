//! Analytic forward and backward passes for adapted layers.
//!
//! With `G = dY·Xᵀ` (the full fine-tuning gradient of `W`), a LoRA adapter
//! `R = s·B·Aᵀ` receives
//!
//! ```text
//! dB  = s · G · A          (M × r)
//! dAᵀ = s · Bᵀ · G         (r × N)
//! dR  = dB · Aᵀ + B · dAᵀ  (M × N, the induced fused-space update)
//! ```
//!
//! GraLoRA applies the same rule per block with `G_ij = dY_i · X_jᵀ`, so the
//! gradient of block `(i, j)` only ever sees output slice `i` and input slice
//! `j`. Factor gradients are stored in the factor's own shape, i.e. `dA` is
//! `N × r`, not `dAᵀ`.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::Serialize;

use crate::adapters::{AdaptedLayer, Adapter, AdapterKind, GraLoraAdapter, LoraAdapter};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derived_rng, stream};

/// Input batch `X: N × T`; every column is one token / sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    x: Matrix,
}

impl BatchInput {
    pub fn new(x: Matrix) -> Self {
        Self { x }
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn tokens(&self) -> usize {
        self.x.cols()
    }

    pub fn into_matrix(self) -> Matrix {
        self.x
    }
}

impl From<Matrix> for BatchInput {
    fn from(x: Matrix) -> Self {
        Self::new(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    /// Same shape as `A`.
    pub da: Matrix,
    /// Same shape as `B`.
    pub db: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FactorGrads {
    Lora(PairGrad),
    Gralora {
        k: usize,
        /// Row-major over the grid, like [`GraLoraAdapter::blocks`].
        blocks: Vec<PairGrad>,
    },
    Hybrid {
        lora: Option<PairGrad>,
        gralora: Option<(usize, Vec<PairGrad>)>,
    },
}

impl FactorGrads {
    /// Gradients in [`Adapter::factors`] order.
    pub fn flatten(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        match self {
            FactorGrads::Lora(p) => out.extend([&p.da, &p.db]),
            FactorGrads::Gralora { blocks, .. } => blocks.iter().for_each(|p| out.extend([&p.da, &p.db])),
            FactorGrads::Hybrid { lora, gralora } => {
                if let Some(p) = lora {
                    out.extend([&p.da, &p.db]);
                }
                if let Some((_, blocks)) = gralora {
                    blocks.iter().for_each(|p| out.extend([&p.da, &p.db]));
                }
            }
        }
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        match self {
            FactorGrads::Lora(p) => out.extend([&mut p.da, &mut p.db]),
            FactorGrads::Gralora { blocks, .. } => {
                blocks.iter_mut().for_each(|p| out.extend([&mut p.da, &mut p.db]))
            }
            FactorGrads::Hybrid { lora, gralora } => {
                if let Some(p) = lora {
                    out.extend([&mut p.da, &mut p.db]);
                }
                if let Some((_, blocks)) = gralora {
                    blocks.iter_mut().for_each(|p| out.extend([&mut p.da, &mut p.db]));
                }
            }
        }
        out
    }

    /// Block grid of the GraLoRA gradients, if any.
    pub fn grid(&self) -> Option<(usize, &[PairGrad])> {
        match self {
            FactorGrads::Gralora { k, blocks } => Some((*k, blocks)),
            FactorGrads::Hybrid {
                gralora: Some((k, blocks)),
                ..
            } => Some((*k, blocks)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerGradients {
    pub factors: FactorGrads,
    /// `dB·Aᵀ + B·dAᵀ`, summed over blocks / parts.
    pub d_fused: Matrix,
    /// `dY·Xᵀ`.
    pub d_weight_fft: Matrix,
    /// `(W0 + R)ᵀ·dY`.
    pub d_input: Matrix,
}

/// `Y = W0·X + R·X`, the adapter path evaluated in low-rank order.
pub fn forward(layer: &AdaptedLayer, x: &BatchInput) -> Result<Matrix> {
    let base = layer.w0().matmul(x.x())?;
    base.add(&layer.adapter.apply(x.x())?)
}

fn lora_grads(l: &LoraAdapter, g: &Matrix) -> (PairGrad, Matrix) {
    let db = g.matmul(&l.a).expect("shapes").scale(l.scale);
    let da = g.t_matmul(&l.b).expect("shapes").scale(l.scale);
    let mut d_fused = db.matmul_t(&l.a).expect("shapes");
    d_fused.add_assign(&l.b.matmul_t(&da).expect("shapes")).expect("shapes");
    (PairGrad { da, db }, d_fused)
}

fn gralora_grads(gr: &GraLoraAdapter, g: &Matrix) -> (Vec<PairGrad>, Matrix) {
    let (bm, bn) = (gr.block_rows(), gr.block_cols());
    let mut d_fused = Matrix::zeros(gr.out_dim, gr.in_dim);
    let mut blocks = Vec::with_capacity(gr.blocks.len());
    for i in 0..gr.k {
        for j in 0..gr.k {
            let p = gr.block(i, j);
            let g_ij = g.submatrix(i * bm, j * bn, bm, bn);
            let db = g_ij.matmul(&p.a).expect("shapes").scale(gr.scale);
            let da = g_ij.t_matmul(&p.b).expect("shapes").scale(gr.scale);
            let mut blk = db.matmul_t(&p.a).expect("shapes");
            blk.add_assign(&p.b.matmul_t(&da).expect("shapes")).expect("shapes");
            d_fused.set_submatrix(i * bm, j * bn, &blk);
            blocks.push(PairGrad { da, db });
        }
    }
    (blocks, d_fused)
}

/// Factor and fused-space gradients for any adapter kind, given `G = dY·Xᵀ`.
pub fn adapter_grads(adapter: &Adapter, g: &Matrix) -> Result<(FactorGrads, Matrix)> {
    if g.shape() != (adapter.out_dim(), adapter.in_dim()) {
        return Err(Error::Dimension {
            op: "adapter gradients",
            left: (adapter.out_dim(), adapter.in_dim()),
            right: g.shape(),
        });
    }
    Ok(match adapter {
        Adapter::Lora(l) => {
            let (p, d) = lora_grads(l, g);
            (FactorGrads::Lora(p), d)
        }
        Adapter::Gralora(gr) => {
            let (blocks, d) = gralora_grads(gr, g);
            (FactorGrads::Gralora { k: gr.k, blocks }, d)
        }
        Adapter::Hybrid(h) => {
            let lora = h.lora.as_ref().map(|l| lora_grads(l, g));
            let grid = h.gralora.as_ref().map(|gr| (gr.k, gralora_grads(gr, g)));
            let d_fused = match (&lora, &grid) {
                (Some((_, a)), Some((_, (_, b)))) => a.add(b)?,
                (Some((_, a)), None) => a.clone(),
                (None, Some((_, (_, b)))) => b.clone(),
                (None, None) => unreachable!("hybrid adapter without parts"),
            };
            (
                FactorGrads::Hybrid {
                    lora: lora.map(|(p, _)| p),
                    gralora: grid.map(|(k, (blocks, _))| (k, blocks)),
                },
                d_fused,
            )
        }
    })
}

/// Full backward pass for any adapter kind.
pub fn backward(layer: &AdaptedLayer, x: &BatchInput, dy: &Matrix) -> Result<LayerGradients> {
    let x = x.x();
    if x.rows() != layer.in_dim() || dy.rows() != layer.out_dim() || dy.cols() != x.cols() {
        return Err(Error::Dimension {
            op: "backward (dY vs X)",
            left: dy.shape(),
            right: x.shape(),
        });
    }
    let g = dy.matmul_t(x)?;
    let (factors, d_fused) = adapter_grads(&layer.adapter, &g)?;
    let d_input = layer.merge().t_matmul(dy)?;
    Ok(LayerGradients {
        factors,
        d_fused,
        d_weight_fft: g,
        d_input,
    })
}

pub fn backward_lora(layer: &AdaptedLayer, x: &BatchInput, dy: &Matrix) -> Result<LayerGradients> {
    if layer.adapter.kind() != AdapterKind::Lora {
        return Err(Error::Precondition("backward_lora needs a LoRA adapter".into()));
    }
    backward(layer, x, dy)
}

pub fn backward_gralora(layer: &AdaptedLayer, x: &BatchInput, dy: &Matrix) -> Result<LayerGradients> {
    if layer.adapter.kind() != AdapterKind::Gralora {
        return Err(Error::Precondition("backward_gralora needs a GraLoRA adapter".into()));
    }
    backward(layer, x, dy)
}

/// Scalar loss as a function of the layer output.
#[derive(Clone, Debug)]
pub enum LossSpec {
    /// `½‖Y − target‖_F²`.
    SquaredError { target: Matrix },
}

impl LossSpec {
    /// Squared error against a Gaussian target drawn from `seed`.
    pub fn random_target(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = derived_rng(seed, &[stream::TARGET]);
        LossSpec::SquaredError {
            target: Matrix::gaussian(rows, cols, 1.0, &mut rng),
        }
    }

    pub fn value(&self, y: &Matrix) -> Result<f64> {
        match self {
            LossSpec::SquaredError { target } => {
                let r = y.sub(target)?;
                Ok(0.5 * r.frobenius_dot(&r)?)
            }
        }
    }

    /// `L(base + plus) − L(base + minus)`, evaluated as
    /// `Σ ½(plus − minus)(plus + minus + 2·base − 2·target)` so the
    /// difference never passes through the (much larger) loss values.
    pub fn difference(&self, base: &Matrix, plus: &Matrix, minus: &Matrix) -> Result<f64> {
        match self {
            LossSpec::SquaredError { target } => {
                let d = plus.sub(minus)?;
                let mut mid = plus.add(minus)?.scale(0.5);
                mid.add_assign(base)?;
                let r = mid.sub(target)?;
                d.frobenius_dot(&r)
            }
        }
    }

    /// `∂L/∂Y`.
    pub fn grad(&self, y: &Matrix) -> Result<Matrix> {
        match self {
            LossSpec::SquaredError { target } => y.sub(target),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation is `h · max(1, |θ|)`.
    pub h: f64,
    pub tolerance: f64,
    /// Check at most this many entries per factor (sampled deterministically);
    /// `None` checks every entry.
    pub max_probes_per_block: Option<usize>,
    pub probe_seed: u64,
    /// Negative control: negate the analytic gradient before comparing.
    pub flip_analytic_sign: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-5,
            max_probes_per_block: None,
            probe_seed: 0,
            flip_analytic_sign: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub adapter: AdapterKind,
    pub h: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub blocks: Vec<BlockCheck>,
}

/// Compares analytic factor gradients with central differences of `loss`.
///
/// Relative error of one entry is `|a − n| / max(|a|, |n|, floor)` where
/// `floor = 1e-3 · max_abs(all analytic gradients)`, so entries whose true
/// gradient is essentially zero are judged against the layer's gradient
/// scale instead of against round-off.
pub fn check_gradients(
    layer: &AdaptedLayer,
    x: &BatchInput,
    loss: &LossSpec,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be positive, got {}",
            opts.h
        )));
    }
    let y = forward(layer, x)?;
    let dy = loss.grad(&y)?;
    let grads = backward(layer, x, &dy)?;
    let sign = if opts.flip_analytic_sign { -1.0 } else { 1.0 };
    let analytic: Vec<Matrix> = grads.factors.flatten().into_iter().map(|g| g.scale(sign)).collect();
    let floor = analytic.iter().fold(0.0, |m: f64, g| m.max(g.max_abs())) * 1e-3 + f64::MIN_POSITIVE;

    let base_out = layer.w0().matmul(x.x())?;
    if !loss.value(&base_out.add(&layer.adapter.apply(x.x())?)?)?.is_finite() {
        return Err(Error::NonFiniteLoss { block: "unperturbed".into() });
    }

    let mut work = layer.adapter.clone();
    let names = layer.adapter.factor_names();
    let mut blocks = Vec::with_capacity(names.len());
    for (f, name) in names.iter().enumerate() {
        let len = analytic[f].as_slice().len();
        let entries: Vec<usize> = match opts.max_probes_per_block {
            Some(cap) if cap < len => {
                let mut rng = derived_rng(opts.probe_seed, &[stream::PROBE, f as u64]);
                let mut idx = sample(&mut rng, len, cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        for &e in &entries {
            let orig = work.factors()[f].as_slice()[e];
            let step = opts.h * orig.abs().max(1.0);
            work.factors_mut()[f].as_mut_slice()[e] = orig + step;
            let plus = work.apply(x.x())?;
            work.factors_mut()[f].as_mut_slice()[e] = orig - step;
            let minus = work.apply(x.x())?;
            work.factors_mut()[f].as_mut_slice()[e] = orig;
            let diff = loss.difference(&base_out, &plus, &minus)?;
            if !diff.is_finite() {
                return Err(Error::NonFiniteLoss { block: name.clone() });
            }
            let numeric = diff / (2.0 * step);
            let a = analytic[f].as_slice()[e];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        blocks.push(BlockCheck {
            name: name.clone(),
            entries_checked: entries.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = blocks.iter().fold(0.0, |m: f64, b| m.max(b.max_rel_error));
    Ok(GradCheckReport {
        adapter: layer.adapter.kind(),
        h: opts.h,
        tolerance: opts.tolerance,
        max_rel_error,
        passed: max_rel_error <= opts.tolerance,
        blocks,
    })
}

/// Writes one CSV per factor gradient (`grad_<name>.csv`) plus the fused and
/// full fine-tuning gradients.
pub fn dump_gradients_csv(adapter: &Adapter, grads: &LayerGradients, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (name, g) in adapter.factor_names().iter().zip(grads.factors.flatten()) {
        g.save_csv(dir.join(format!("grad_{name}.csv")))?;
    }
    grads.d_fused.save_csv(dir.join("grad_fused.csv"))?;
    grads.d_weight_fft.save_csv(dir.join("grad_fft.csv"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, random_adapter, AdapterSpec};
    use crate::rng::rng_from_seed;

    fn layer(spec: &AdapterSpec, seed: u64, random: bool) -> AdaptedLayer {
        let mut rng = rng_from_seed(seed ^ 0xFFFF);
        let w0 = Matrix::gaussian(spec.out_dim, spec.in_dim, 0.3, &mut rng);
        let a = if random {
            random_adapter(spec, seed).unwrap()
        } else {
            init_adapter(spec, seed).unwrap()
        };
        AdaptedLayer::new(w0, a).unwrap()
    }

    #[test]
    fn hand_evaluated_lora_gradient() {
        // N = r = 2, A = I, B = 0, s = 1, X = [1, 0]ᵀ, dY = [1, 1]ᵀ
        let lora = crate::adapters::LoraAdapter {
            a: Matrix::identity(2),
            b: Matrix::zeros(2, 2),
            alpha: 2.0,
            scale: 1.0,
        };
        let layer = AdaptedLayer::new(Matrix::zeros(2, 2), Adapter::Lora(lora)).unwrap();
        let x = BatchInput::new(Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
        let dy = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let g = backward_lora(&layer, &x, &dy).unwrap();
        let FactorGrads::Lora(p) = &g.factors else { unreachable!() };
        assert_eq!(p.db, Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        assert!(p.da.is_zero());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for spec in [AdapterSpec::lora(6, 4, 2), AdapterSpec::gralora(6, 4, 2, 2)] {
            let l = layer(&spec, 1, true);
            let x = BatchInput::new(Matrix::gaussian(4, 3, 1.0, &mut rng_from_seed(2)));
            let g = backward(&l, &x, &Matrix::zeros(6, 3)).unwrap();
            assert!(g.factors.flatten().iter().all(|m| m.is_zero()));
            assert!(g.d_fused.is_zero() && g.d_weight_fft.is_zero() && g.d_input.is_zero());
        }
    }

    #[test]
    fn zero_b_structure() {
        let l = layer(&AdapterSpec::lora(6, 5, 3), 3, false);
        let mut rng = rng_from_seed(4);
        let x = BatchInput::new(Matrix::gaussian(5, 7, 1.0, &mut rng));
        let dy = Matrix::gaussian(6, 7, 1.0, &mut rng);
        let g = backward(&l, &x, &dy).unwrap();
        let FactorGrads::Lora(p) = &g.factors else { unreachable!() };
        assert!(p.da.is_zero());
        let Adapter::Lora(ad) = &l.adapter else { unreachable!() };
        let expected = dy
            .matmul_t(x.x())
            .unwrap()
            .matmul(&ad.a)
            .unwrap()
            .matmul_t(&ad.a)
            .unwrap()
            .scale(ad.scale);
        assert!(g.d_fused.relative_error(&expected).unwrap() < 1e-13);
    }

    #[test]
    fn kind_specific_entry_points_check_kind() {
        let l = layer(&AdapterSpec::lora(4, 4, 2), 0, true);
        let x = BatchInput::new(Matrix::identity(4));
        assert!(backward_gralora(&l, &x, &Matrix::zeros(4, 4)).is_err());
        assert!(backward_lora(&l, &x, &Matrix::zeros(4, 4)).is_ok());
        assert!(matches!(
            backward(&l, &x, &Matrix::zeros(3, 4)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gradcheck_passes_for_every_kind() {
        for spec in [
            AdapterSpec::lora(8, 6, 2),
            AdapterSpec::gralora(8, 6, 2, 2),
            AdapterSpec::hybrid(8, 6, 4, 2, 2),
        ] {
            let l = layer(&spec, 7, true);
            let x = BatchInput::new(Matrix::gaussian(6, 5, 1.0, &mut rng_from_seed(8)));
            let loss = LossSpec::random_target(8, 5, 9);
            let report = check_gradients(&l, &x, &loss, &GradCheckOptions::default()).unwrap();
            assert!(report.passed, "{report:?}");
            assert_eq!(report.blocks.len(), l.adapter.factors().len());
        }
    }

    #[test]
    fn gradcheck_rejects_zero_step_and_catches_sign_flip() {
        let l = layer(&AdapterSpec::lora(4, 4, 2), 1, true);
        let x = BatchInput::new(Matrix::identity(4));
        let loss = LossSpec::random_target(4, 4, 1);
        let opts = GradCheckOptions {
            h: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            check_gradients(&l, &x, &loss, &opts),
            Err(Error::Precondition(_))
        ));
        let opts = GradCheckOptions {
            flip_analytic_sign: true,
            ..Default::default()
        };
        let report = check_gradients(&l, &x, &loss, &opts).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn gradcheck_names_block_on_non_finite_loss() {
        let mut l = layer(&AdapterSpec::gralora(4, 4, 2, 2), 1, true);
        if let Adapter::Gralora(g) = &mut l.adapter {
            g.blocks[0].b.as_mut_slice()[0] = 1e200;
        }
        let x = BatchInput::new(Matrix::from_fn(4, 2, |_, _| 1e120));
        let loss = LossSpec::random_target(4, 2, 1);
        let err = check_gradients(&l, &x, &loss, &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn probe_subsampling_is_capped() {
        let l = layer(&AdapterSpec::lora(16, 16, 4), 2, true);
        let x = BatchInput::new(Matrix::gaussian(16, 4, 1.0, &mut rng_from_seed(3)));
        let loss = LossSpec::random_target(16, 4, 4);
        let opts = GradCheckOptions {
            max_probes_per_block: Some(5),
            ..Default::default()
        };
        let report = check_gradients(&l, &x, &loss, &opts).unwrap();
        assert!(report.passed);
        assert!(report.blocks.iter().all(|b| b.entries_checked == 5));
    }
}
