//! Central finite-difference verification of tape gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Coordinates to sample; every coordinate is checked when the model has fewer.
    pub samples: usize,
    /// Points whose distance to a non-smooth locus is below this are excluded.
    pub kink_band: f64,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared on an absolute scale.
    pub denom_floor: f64,
    pub seed: u64,
    /// Restricts sampling to parameters whose name starts with this prefix.
    pub param_prefix: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            samples: 64,
            kink_band: 1e-3,
            denom_floor: 1e-6,
            seed: 0,
            param_prefix: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: Vec<CoordinateCheck>,
    /// `(param, index)` of coordinates skipped as non-smooth.
    pub excluded: Vec<(String, usize)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.checked
            .iter()
            .filter(move |c| c.rel_error >= self.tolerance)
    }

    pub fn passed(&self) -> bool {
        !self.checked.is_empty() && self.failures().next().is_none()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<32} {:>7} {:>14} {:>14} {:>10}",
            "param", "index", "analytic", "numeric", "rel_err"
        )?;
        for c in &self.checked {
            writeln!(
                f,
                "{:<32} {:>7} {:>14.6e} {:>14.6e} {:>10.2e}{}",
                c.param,
                c.index,
                c.analytic,
                c.numeric,
                c.rel_error,
                if c.rel_error >= self.tolerance {
                    "  FAIL"
                } else {
                    ""
                }
            )?;
        }
        write!(
            f,
            "checked {} excluded {} max_rel_err {:.3e} tol {:.1e} => {}",
            self.checked.len(),
            self.excluded.len(),
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

struct Probe {
    loss: f64,
    signature: u64,
    margin: f64,
}

fn probe<F>(f: &mut F, params: &ParamStore) -> Result<Probe>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    Ok(Probe {
        loss: g.scalar(loss),
        signature: g.branch_signature(),
        margin: g.kink_margin(),
    })
}

/// Compares tape gradients of `f` against central differences on sampled coordinates.
///
/// `f` must be deterministic for fixed parameters. A coordinate is excluded when
/// the base point lies within `kink_band` of a non-smooth locus or when the
/// `±step` evaluations take different discrete branches.
pub fn check_gradients<F>(
    params: &mut ParamStore,
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let base_sig = g.branch_signature();
    let base_margin = g.kink_margin();
    g.backward_into(loss, params)?;
    drop(g);

    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .filter(|(_, p)| {
            cfg.param_prefix
                .as_deref()
                .map_or(true, |pre| p.name.starts_with(pre))
        })
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = if coords.len() <= cfg.samples {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut rng, coords.len(), cfg.samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        ..Default::default()
    };
    for pick in picks {
        let (id, idx) = coords[pick];
        let name = params.get(id).name.clone();
        if base_margin < cfg.kink_band {
            report.excluded.push((name, idx));
            continue;
        }
        let analytic = params.grad(id)[idx];
        let orig = params.value(id).data()[idx];
        params.value_mut(id).data_mut()[idx] = orig + cfg.step;
        let plus = probe(&mut f, params);
        params.value_mut(id).data_mut()[idx] = orig - cfg.step;
        let minus = probe(&mut f, params);
        params.value_mut(id).data_mut()[idx] = orig;
        let (plus, minus) = (plus?, minus?);
        let smooth = plus.signature == base_sig
            && minus.signature == base_sig
            && plus.margin.min(minus.margin) >= cfg.kink_band.min(base_margin);
        if !smooth {
            report.excluded.push((name, idx));
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.denom_floor);
        let rel_error = (analytic - numeric).abs() / denom;
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.checked.push(CoordinateCheck {
            param: name,
            index: idx,
            analytic,
            numeric,
            rel_error,
        });
    }
    params.zero_grad();
    Ok(report)
}
