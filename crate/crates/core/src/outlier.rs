//! Outlier-channel inputs and gradient-distortion measurements.
//!
//! The probe setup is shared by every measurement: a Gaussian input with a
//! few amplified channels, a Gaussian base weight, and squared error against
//! a fixed Gaussian target. Adapter fused-space gradients (`dR`) are compared
//! with the full fine-tuning gradient `dY·Xᵀ` at the same point.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdaptedLayer, AdapterSpec};
use crate::error::{Error, Result};
use crate::gradients::{backward, forward, BatchInput, LayerGradients, LossSpec};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, derived_rng, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    pub channels: Vec<usize>,
    /// Outlier scale relative to the unit-variance baseline, `≥ 1`.
    pub magnitude_ratio: f64,
}

impl OutlierSpec {
    pub fn none() -> Self {
        Self {
            channels: Vec::new(),
            magnitude_ratio: 1.0,
        }
    }

    pub fn single(channel: usize, magnitude_ratio: f64) -> Self {
        Self {
            channels: vec![channel],
            magnitude_ratio,
        }
    }

    pub fn validate(&self, in_dim: usize) -> Result<()> {
        if !self.magnitude_ratio.is_finite() || self.magnitude_ratio < 1.0 {
            return Err(Error::Config(format!(
                "outlier magnitude ratio must be finite and >= 1, got {}",
                self.magnitude_ratio
            )));
        }
        if let Some(&c) = self.channels.iter().find(|&&c| c >= in_dim) {
            return Err(Error::Config(format!(
                "outlier channel {c} out of range for N={in_dim}"
            )));
        }
        Ok(())
    }
}

/// `N × T` standard Gaussian input with the listed rows scaled by the
/// magnitude ratio.
pub fn make_outlier_input(n: usize, t: usize, spec: &OutlierSpec, seed: u64) -> Result<BatchInput> {
    if n == 0 || t == 0 {
        return Err(Error::Config(format!("input shape must be positive, got {n}x{t}")));
    }
    spec.validate(n)?;
    let mut rng = derived_rng(seed, &[stream::INPUT]);
    let mut x = Matrix::gaussian(n, t, 1.0, &mut rng);
    for &c in &spec.channels {
        for j in 0..t {
            x[(c, j)] *= spec.magnitude_ratio;
        }
    }
    Ok(BatchInput::new(x))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviationReport {
    /// `1 − cos∠(G₁, G₂)`, in `[0, 2]`.
    pub cosine_distance: f64,
    /// `‖G₁/‖G₁‖ − G₂/‖G₂‖‖_F`.
    pub normalized_frobenius_gap: f64,
    /// `k × k` grid of `‖dB_ij‖_F` for GraLoRA-shaped gradients.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_block_grad_norms: Option<Vec<Vec<f64>>>,
}

pub fn gradient_deviation(adapter_fused: &Matrix, fft: &Matrix) -> Result<DeviationReport> {
    if adapter_fused.shape() != fft.shape() {
        return Err(Error::Dimension {
            op: "gradient deviation",
            left: adapter_fused.shape(),
            right: fft.shape(),
        });
    }
    let n1 = adapter_fused.frobenius_norm();
    let n2 = fft.frobenius_norm();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::UndefinedMetric(
            "deviation between a zero gradient and anything is undefined".into(),
        ));
    }
    let u1 = adapter_fused.scale(1.0 / n1);
    let u2 = fft.scale(1.0 / n2);
    let cos = u1.frobenius_dot(&u2)?.clamp(-1.0, 1.0);
    Ok(DeviationReport {
        cosine_distance: 1.0 - cos,
        normalized_frobenius_gap: u1.sub(&u2)?.frobenius_norm(),
        per_block_grad_norms: None,
    })
}

/// Per-block gradient norms of a GraLoRA adapter (or the grid part of a
/// hybrid).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalityProfile {
    pub k: usize,
    /// `db_norms[i][j] = ‖dB_ij‖_F`.
    pub db_norms: Vec<Vec<f64>>,
    pub da_norms: Vec<Vec<f64>>,
    /// Block column with the largest summed `dB` norm.
    pub hot_block_column: usize,
}

impl LocalityProfile {
    pub fn from_gradients(grads: &LayerGradients) -> Result<Self> {
        let (k, blocks) = grads
            .factors
            .grid()
            .ok_or_else(|| Error::Precondition("locality profile needs a GraLoRA grid".into()))?;
        let grid = |f: &dyn Fn(usize) -> f64| -> Vec<Vec<f64>> {
            (0..k).map(|i| (0..k).map(|j| f(i * k + j)).collect()).collect()
        };
        let db_norms = grid(&|b| blocks[b].db.frobenius_norm());
        let da_norms = grid(&|b| blocks[b].da.frobenius_norm());
        let col_sum = |j: usize| db_norms.iter().map(|row| row[j]).sum::<f64>();
        let hot_block_column = (0..k)
            .max_by(|&a, &b| col_sum(a).total_cmp(&col_sum(b)))
            .unwrap_or(0);
        Ok(Self {
            k,
            db_norms,
            da_norms,
            hot_block_column,
        })
    }

    /// Mean `dB` norm of the blocks in `column` over the mean of all others.
    /// Infinite when `k = 1` or the other blocks are all zero.
    pub fn column_contrast(&self, column: usize) -> f64 {
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for row in &self.db_norms {
            for (j, &v) in row.iter().enumerate() {
                if j == column {
                    inside.push(v);
                } else {
                    outside.push(v);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        if outside.is_empty() {
            return f64::INFINITY;
        }
        mean(&inside) / mean(&outside)
    }

    /// Largest block norm over the median block norm.
    pub fn max_over_median(&self) -> f64 {
        let mut all: Vec<f64> = self.db_norms.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        let n = all.len();
        let median = if n % 2 == 1 {
            all[n / 2]
        } else {
            0.5 * (all[n / 2 - 1] + all[n / 2])
        };
        all[n - 1] / median
    }
}

pub fn locality_profile(layer: &AdaptedLayer, x: &BatchInput, dy: &Matrix) -> Result<LocalityProfile> {
    LocalityProfile::from_gradients(&backward(layer, x, dy)?)
}

/// Layer geometry `W: M × N`, `X: N × T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { m: 256, n: 256, t: 512 }
    }
}

/// Input, frozen weight and probe loss for one replicate.
#[derive(Clone, Debug)]
pub struct GradientProbe {
    pub x: BatchInput,
    pub w0: Matrix,
    pub loss: LossSpec,
}

impl GradientProbe {
    pub fn new(geometry: Geometry, outlier: &OutlierSpec, seed: u64) -> Result<Self> {
        let x = make_outlier_input(geometry.n, geometry.t, outlier, seed)?;
        Self::with_input(geometry.m, x, seed)
    }

    /// Uses externally supplied activations instead of synthetic ones.
    pub fn with_input(out_dim: usize, x: BatchInput, seed: u64) -> Result<Self> {
        let n = x.x().rows();
        let mut rng = derived_rng(seed, &[stream::BASE_WEIGHT]);
        let w0 = Matrix::gaussian(out_dim, n, 1.0 / (n as f64).sqrt(), &mut rng);
        let loss = LossSpec::random_target(out_dim, x.tokens(), seed);
        Ok(Self { x, w0, loss })
    }

    pub fn layer(&self, spec: &AdapterSpec, adapter_seed: u64) -> Result<AdaptedLayer> {
        AdaptedLayer::new(self.w0.clone(), init_adapter(spec, adapter_seed)?)
    }

    /// `∂L/∂Y` of the probe loss at the layer's current output.
    pub fn upstream(&self, layer: &AdaptedLayer) -> Result<Matrix> {
        self.loss.grad(&forward(layer, &self.x)?)
    }

    /// The same probe with every outlier channel zeroed.
    pub fn with_channels_zeroed(&self, channels: &[usize]) -> Self {
        let mut x = self.x.x().clone();
        for &c in channels {
            for j in 0..x.cols() {
                x[(c, j)] = 0.0;
            }
        }
        Self {
            x: BatchInput::new(x),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationSweep {
    pub geometry: Geometry,
    pub outlier: OutlierSpec,
    pub ranks: Vec<usize>,
    pub k_values: Vec<usize>,
    /// Replicate labels; each is mixed with `root_seed` to seed its cell.
    pub seeds: Vec<u64>,
    pub root_seed: u64,
    /// Defaults to `2r` per cell.
    pub alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub rank: usize,
    pub k: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviationRow {
    pub method: String,
    pub rank: usize,
    pub k: usize,
    pub seed: u64,
    pub cosine_distance: f64,
    pub frob_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellOutcome {
    pub row: DeviationRow,
    /// Present for `k > 1`.
    pub locality: Option<LocalityProfile>,
}

impl DeviationSweep {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.ranks.is_empty() || self.k_values.is_empty() {
            return Err(Error::Config("sweep axes must be non-empty".into()));
        }
        self.outlier.validate(self.geometry.n)?;
        for &r in &self.ranks {
            for &k in &self.k_values {
                self.spec(r, k).validate()?;
            }
        }
        Ok(())
    }

    pub fn spec(&self, rank: usize, k: usize) -> AdapterSpec {
        let (m, n) = (self.geometry.m, self.geometry.n);
        let spec = if k == 1 {
            AdapterSpec::lora(m, n, rank)
        } else {
            AdapterSpec::gralora(m, n, rank, k)
        };
        match self.alpha {
            Some(a) => spec.with_alpha(a),
            None => spec,
        }
    }

    /// Every cell, sorted by `(rank, k, seed)`.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells: Vec<CellKey> = self
            .ranks
            .iter()
            .flat_map(|&rank| {
                self.k_values.iter().flat_map(move |&k| {
                    self.seeds.iter().map(move |&seed| CellKey { rank, k, seed })
                })
            })
            .collect();
        cells.sort();
        cells
    }

    /// Probe shared by all methods of one replicate, so comparisons are paired.
    pub fn probe(&self, seed: u64) -> Result<GradientProbe> {
        GradientProbe::new(self.geometry, &self.outlier, derive_seed(self.root_seed, &[seed]))
    }

    /// Like [`DeviationSweep::probe`] but with externally captured
    /// activations in place of the synthetic input.
    pub fn probe_with_input(&self, seed: u64, x: BatchInput) -> Result<GradientProbe> {
        if x.x().rows() != self.geometry.n {
            return Err(Error::Config(format!(
                "activations have {} rows, expected N={}",
                x.x().rows(),
                self.geometry.n
            )));
        }
        GradientProbe::with_input(self.geometry.m, x, derive_seed(self.root_seed, &[seed]))
    }

    pub fn run_cell(&self, key: CellKey) -> Result<CellOutcome> {
        let probe = self.probe(key.seed)?;
        self.run_cell_with(&probe, key)
    }

    pub fn run_cell_with(&self, probe: &GradientProbe, key: CellKey) -> Result<CellOutcome> {
        let spec = self.spec(key.rank, key.k);
        let adapter_seed = derive_seed(
            self.root_seed,
            &[key.seed, stream::ADAPTER, key.rank as u64, key.k as u64],
        );
        let layer = probe.layer(&spec, adapter_seed)?;
        let dy = probe.upstream(&layer)?;
        let grads = backward(&layer, &probe.x, &dy)?;
        let dev = gradient_deviation(&grads.d_fused, &grads.d_weight_fft)?;
        let locality = if key.k > 1 {
            Some(LocalityProfile::from_gradients(&grads)?)
        } else {
            None
        };
        Ok(CellOutcome {
            row: DeviationRow {
                method: spec.kind.as_str().to_string(),
                rank: key.rank,
                k: key.k,
                seed: key.seed,
                cosine_distance: dev.cosine_distance,
                frob_gap: dev.normalized_frobenius_gap,
            },
            locality,
        })
    }
}

/// Runs every cell sequentially.
pub fn rank_sweep_deviation(sweep: &DeviationSweep) -> Result<Vec<CellOutcome>> {
    sweep.validate()?;
    sweep.cells().into_iter().map(|key| sweep.run_cell(key)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub method: String,
    pub rank: usize,
    pub k: usize,
    pub runs: usize,
    pub cosine_mean: f64,
    pub cosine_std: f64,
    pub frob_gap_mean: f64,
}

/// Mean and sample standard deviation per `(method, rank, k)`.
pub fn summarize(rows: &[DeviationRow]) -> Vec<CellSummary> {
    let mut groups: std::collections::BTreeMap<(usize, usize, String), Vec<&DeviationRow>> =
        Default::default();
    for r in rows {
        groups.entry((r.rank, r.k, r.method.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((rank, k, method), rs)| {
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.cosine_distance).sum::<f64>() / n;
            let var = if rs.len() > 1 {
                rs.iter().map(|r| (r.cosine_distance - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            CellSummary {
                method,
                rank,
                k,
                runs: rs.len(),
                cosine_mean: mean,
                cosine_std: var.sqrt(),
                frob_gap_mean: rs.iter().map(|r| r.frob_gap).sum::<f64>() / n,
            }
        })
        .collect()
}

/// CSV with columns `method,rank,k,seed,cosine_distance,frob_gap`.
pub fn write_deviation_csv<W: Write>(rows: &[DeviationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_rms(x: &Matrix, i: usize) -> f64 {
        (x.row(i).iter().map(|v| v * v).sum::<f64>() / x.cols() as f64).sqrt()
    }

    #[test]
    fn unit_ratio_is_plain_gaussian() {
        let a = make_outlier_input(8, 16, &OutlierSpec::single(3, 1.0), 5).unwrap();
        let b = make_outlier_input(8, 16, &OutlierSpec::none(), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_outlier_row_is_elevated() {
        let x = make_outlier_input(64, 512, &OutlierSpec::single(10, 100.0), 1).unwrap();
        let x = x.x();
        let mut rms: Vec<f64> = (0..64).map(|i| row_rms(x, i)).collect();
        let hot = rms[10];
        rms.sort_by(f64::total_cmp);
        let median = 0.5 * (rms[31] + rms[32]);
        let ratio = hot / median;
        assert!((ratio - 100.0).abs() <= 20.0, "ratio {ratio}");
    }

    #[test]
    fn two_outlier_rows_both_elevated() {
        let spec = OutlierSpec {
            channels: vec![3, 40],
            magnitude_ratio: 50.0,
        };
        let x = make_outlier_input(48, 256, &spec, 2).unwrap();
        for c in [3, 40] {
            assert!(row_rms(x.x(), c) > 30.0);
        }
        assert!(row_rms(x.x(), 4) < 2.0);
    }

    #[test]
    fn out_of_range_channel_is_rejected() {
        assert!(make_outlier_input(8, 4, &OutlierSpec::single(8, 10.0), 0).is_err());
        assert!(make_outlier_input(8, 4, &OutlierSpec::single(1, 0.5), 0).is_err());
    }

    #[test]
    fn deviation_edge_values() {
        let mut rng = crate::rng::rng_from_seed(3);
        let g = Matrix::gaussian(5, 4, 1.0, &mut rng);
        let same = gradient_deviation(&g, &g).unwrap();
        assert!(same.cosine_distance.abs() < 1e-15);
        assert!(same.normalized_frobenius_gap.abs() < 1e-7);
        let anti = gradient_deviation(&g.scale(-1.0), &g).unwrap();
        assert!((anti.cosine_distance - 2.0).abs() < 1e-15);
        assert!(matches!(
            gradient_deviation(&Matrix::zeros(5, 4), &g),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(gradient_deviation(&g, &Matrix::zeros(4, 5)).is_err());
    }

    #[test]
    fn cosine_distance_is_scale_invariant() {
        let mut rng = crate::rng::rng_from_seed(4);
        let g1 = Matrix::gaussian(6, 6, 1.0, &mut rng);
        let g2 = Matrix::gaussian(6, 6, 1.0, &mut rng);
        let base = gradient_deviation(&g1, &g2).unwrap().cosine_distance;
        for c in [1e-6, 0.3, 17.0, 1e8] {
            let d = gradient_deviation(&g1.scale(c), &g2).unwrap().cosine_distance;
            assert!((d - base).abs() < 1e-14, "c={c}");
        }
    }

    #[test]
    fn k1_profile_is_trivially_uniform() {
        let geometry = Geometry { m: 16, n: 16, t: 32 };
        let probe = GradientProbe::new(geometry, &OutlierSpec::single(2, 100.0), 0).unwrap();
        let layer = probe.layer(&AdapterSpec::gralora(16, 16, 4, 1), 0).unwrap();
        let dy = probe.upstream(&layer).unwrap();
        let p = locality_profile(&layer, &probe.x, &dy).unwrap();
        assert_eq!(p.k, 1);
        assert_eq!(p.max_over_median(), 1.0);
        assert_eq!(p.hot_block_column, 0);
    }

    #[test]
    fn profile_requires_grid() {
        let geometry = Geometry { m: 8, n: 8, t: 8 };
        let probe = GradientProbe::new(geometry, &OutlierSpec::none(), 0).unwrap();
        let layer = probe.layer(&AdapterSpec::lora(8, 8, 2), 0).unwrap();
        let dy = probe.upstream(&layer).unwrap();
        assert!(locality_profile(&layer, &probe.x, &dy).is_err());
    }

    #[test]
    fn degenerate_sweep_has_one_row() {
        let sweep = DeviationSweep {
            geometry: Geometry { m: 16, n: 16, t: 16 },
            outlier: OutlierSpec::single(0, 10.0),
            ranks: vec![4],
            k_values: vec![2],
            seeds: vec![9],
            root_seed: 1,
            alpha: None,
        };
        let out = rank_sweep_deviation(&sweep).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].row.method, "gralora");
        assert!(out[0].row.cosine_distance > 0.0);
        let mut buf = Vec::new();
        write_deviation_csv(&[out[0].row.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,rank,k,seed,cosine_distance,frob_gap\n"));
    }

    #[test]
    fn sweep_rejects_bad_axes() {
        let mut sweep = DeviationSweep {
            geometry: Geometry { m: 16, n: 16, t: 16 },
            outlier: OutlierSpec::none(),
            ranks: vec![4],
            k_values: vec![3],
            seeds: vec![0],
            root_seed: 0,
            alpha: None,
        };
        assert!(matches!(sweep.validate(), Err(Error::Divisibility { .. })));
        sweep.k_values = vec![2];
        sweep.seeds.clear();
        assert!(matches!(sweep.validate(), Err(Error::Config(_))));
    }
}
