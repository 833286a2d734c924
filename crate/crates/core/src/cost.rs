//! FLOPs, parameter and activation accounting.
//!
//! Convention: one multiply or one add is one FLOP, so a length-`n` dot
//! product costs `2n − 1`.

use serde::Serialize;

use crate::adapters::{AdapterKind, AdapterSpec};
use crate::error::{Error, Result};

fn check_divides(k: usize, what: &'static str, value: usize) -> Result<()> {
    if k == 0 || !value.is_multiple_of(k) {
        return Err(Error::Divisibility { what, value, k });
    }
    Ok(())
}

/// `2r(M+N)T − (r+M)T`.
pub fn lora_flops(m: u64, n: u64, r: u64, t: u64) -> u64 {
    2 * r * (m + n) * t - (r + m) * t
}

/// `2r(M+N)T − krT − MT`.
pub fn gralora_flops(m: u64, n: u64, r: u64, t: u64, k: u64) -> Result<u64> {
    for (what, value) in [("M", m), ("N", n), ("r", r)] {
        check_divides(k as usize, what, value as usize)?;
    }
    Ok(2 * r * (m + n) * t - k * r * t - m * t)
}

/// Elements of the intermediate latent: `k·r·T`.
pub fn latent_size(r: u64, t: u64, k: u64) -> u64 {
    k * r * t
}

/// Trainable parameters of a rank-`r` adapter: `r(M+N)` for every layout.
pub fn param_count_closed_form(m: u64, n: u64, r: u64) -> u64 {
    r * (m + n)
}

/// Powers of two dividing `r`, `M` and `N`, the one bringing `r/k²`
/// closest to 8. Ties go to the larger `k`.
pub fn recommend_k(r: usize, m: usize, n: usize) -> usize {
    let mut best = 1usize;
    let mut best_gap = (r as f64 - 8.0).abs();
    let mut k = 2usize;
    while k <= r && r.is_multiple_of(k) && m.is_multiple_of(k) && n.is_multiple_of(k) {
        let gap = (r as f64 / (k * k) as f64 - 8.0).abs();
        if gap <= best_gap {
            best = k;
            best_gap = gap;
        }
        k *= 2;
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub latent_elements: u64,
    /// Adapter-path activations only: latent plus block outputs.
    pub est_activation_bytes: u64,
}

impl CostReport {
    pub fn for_spec(spec: &AdapterSpec, tokens: usize, dtype_bytes: u64) -> Result<Self> {
        spec.validate()?;
        let (m, n, t) = (spec.out_dim as u64, spec.in_dim as u64, tokens as u64);
        if t == 0 {
            return Err(Error::Config("token count must be positive".into()));
        }
        let parts: Vec<(u64, u64)> = match spec.kind {
            AdapterKind::Lora => vec![(spec.rank as u64, 1)],
            AdapterKind::Gralora => vec![(spec.rank as u64, spec.k as u64)],
            AdapterKind::Hybrid => [(spec.lora_rank, 1), (spec.gralora_rank(), spec.k)]
                .into_iter()
                .filter(|&(r, _)| r > 0)
                .map(|(r, k)| (r as u64, k as u64))
                .collect(),
        };
        let mut flops = 0;
        let mut latent = 0;
        let mut outputs = 0;
        for &(r, k) in &parts {
            flops += gralora_flops(m, n, r, t, k)?;
            latent += latent_size(r, t, k);
            outputs += k * m * t;
        }
        // adding the two partial outputs of a hybrid
        flops += (parts.len() as u64 - 1) * m * t;
        Ok(Self {
            flops,
            params: param_count_closed_form(m, n, spec.rank as u64),
            latent_elements: latent,
            est_activation_bytes: (latent + outputs) * dtype_bytes,
        })
    }
}
