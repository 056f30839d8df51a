//! Central finite-difference verification of every loss term's gradient.
//!
//! One seeded bundle and batch are drawn; each term is differentiated once
//! on the tape, then a sample of coordinates from every parameter tensor is
//! perturbed by `±step` and all terms are re-evaluated from scratch. A
//! coordinate whose perturbed evaluations cross a ReLU gate or clamp edge
//! is skipped: the central difference is not a derivative estimate there.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{LossGraph, LossWeights};
use crate::ndcore::{Graph, Matrix, ParamKey, Var};
use crate::networks::{NetSet, NetworkBundle, NetworkDims};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    AdvFImageDisc,
    AdvFImageGen,
    AdvFTextDisc,
    AdvFTextGen,
    RecF,
    SimF,
    TotalF,
    AdvZImageDisc,
    AdvZImageGen,
    AdvZTextDisc,
    AdvZTextGen,
    RecZ,
    SimZ,
    TotalZ,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 15] = [
        LossTerm::AdvFImageDisc,
        LossTerm::AdvFImageGen,
        LossTerm::AdvFTextDisc,
        LossTerm::AdvFTextGen,
        LossTerm::RecF,
        LossTerm::SimF,
        LossTerm::TotalF,
        LossTerm::AdvZImageDisc,
        LossTerm::AdvZImageGen,
        LossTerm::AdvZTextDisc,
        LossTerm::AdvZTextGen,
        LossTerm::RecZ,
        LossTerm::SimZ,
        LossTerm::TotalZ,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::AdvFImageDisc => "adv_f_I(disc)",
            LossTerm::AdvFImageGen => "adv_f_I(gen)",
            LossTerm::AdvFTextDisc => "adv_f_T(disc)",
            LossTerm::AdvFTextGen => "adv_f_T(gen)",
            LossTerm::RecF => "rec_f",
            LossTerm::SimF => "sim_f",
            LossTerm::TotalF => "L_f",
            LossTerm::AdvZImageDisc => "adv_z_I(disc)",
            LossTerm::AdvZImageGen => "adv_z_I(gen)",
            LossTerm::AdvZTextDisc => "adv_z_T(disc)",
            LossTerm::AdvZTextGen => "adv_z_T(gen)",
            LossTerm::RecZ => "rec_z",
            LossTerm::SimZ => "sim_z",
            LossTerm::TotalZ => "L_z",
            LossTerm::Total => "L_total",
        }
    }

    fn var(self, lg: &LossGraph) -> Var {
        match self {
            LossTerm::AdvFImageDisc => lg.outer.disc_image,
            LossTerm::AdvFImageGen => lg.outer.gen_image,
            LossTerm::AdvFTextDisc => lg.outer.disc_text,
            LossTerm::AdvFTextGen => lg.outer.gen_text,
            LossTerm::RecF => lg.outer.rec,
            LossTerm::SimF => lg.outer.sim,
            LossTerm::TotalF => lg.l_f,
            LossTerm::AdvZImageDisc => lg.inner.disc_image,
            LossTerm::AdvZImageGen => lg.inner.gen_image,
            LossTerm::AdvZTextDisc => lg.inner.disc_text,
            LossTerm::AdvZTextGen => lg.inner.gen_text,
            LossTerm::RecZ => lg.inner.rec,
            LossTerm::SimZ => lg.inner.sim,
            LossTerm::TotalZ => lg.l_z,
            LossTerm::Total => lg.l_total,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub dims: NetworkDims,
    pub batch: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor.
    pub samples_per_tensor: usize,
    /// Denominator floor of the relative error, per unit of the term's
    /// magnitude: the floor for a term with value `L` is `floor * max(1, |L|)`.
    pub floor: f64,
    #[doc(hidden)]
    pub matmul_fault: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dims: NetworkDims {
                image_dim: 16,
                text_dim: 12,
                text_embed_dim: 12,
                code_bits: 8,
            },
            batch: 4,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 3,
            floor: 1e-5,
            matmul_fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TermReport {
    pub term: LossTerm,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error: (tensor name, flat index).
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

impl fmt::Display for TermReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<14} max_rel_err={:.3e} checked={} skipped={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.term.name(),
            self.max_rel_error,
            self.checked,
            self.skipped
        )?;
        if let (false, Some((name, idx))) = (self.passed, &self.worst) {
            write!(f, " worst={name}[{idx}]")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.terms.is_empty() && self.terms.iter().all(|t| t.passed)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Draws the seeded bundle and batch used by [`run`]. Biases are made
/// nonzero so their gradients are exercised.
pub fn fixture(cfg: &GradcheckConfig) -> Result<(NetworkBundle, Matrix, Matrix)> {
    let mut bundle = NetworkBundle::init(cfg.dims, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let keys: Vec<ParamKey> = bundle.tensors().iter().map(|(_, k, _)| *k).collect();
    for key in keys {
        if crate::networks::NetKind::from_param_key(key).is_some_and(|(_, _, bias)| bias) {
            let b = bundle.param_mut(key).expect("key from tensors()");
            for v in b.as_mut_slice() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let mut draw = |cols: usize| {
        let v = (0..cfg.batch * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::new(cfg.batch, cols, v)
    };
    let images = draw(cfg.dims.image_dim)?;
    let texts = draw(cfg.dims.text_dim)?;
    Ok((bundle, images, texts))
}

fn evaluate(
    bundle: &NetworkBundle,
    images: &Matrix,
    texts: &Matrix,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let w = LossWeights::default();
    let mut g = Graph::new();
    let lg = LossGraph::build(&mut g, bundle, images, texts, &w, NetSet::NONE)?;
    let values = LossTerm::ALL
        .iter()
        .map(|t| g.value(t.var(&lg)).as_slice()[0])
        .collect();
    Ok((values, g.activation_pattern()))
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (mut bundle, images, texts) = fixture(cfg)?;
    let w = LossWeights::default();

    let mut g = Graph::new();
    if let Some(f) = cfg.matmul_fault {
        g.inject_matmul_fault(f);
    }
    let lg = LossGraph::build(&mut g, &bundle, &images, &texts, &w, NetSet::ALL)?;
    let analytic = LossTerm::ALL
        .iter()
        .map(|t| g.backward(t.var(&lg)))
        .collect::<Result<Vec<_>>>()?;
    drop(g);

    let (base_values, base_pattern) = evaluate(&bundle, &images, &texts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let tensors: Vec<(String, ParamKey, usize)> = bundle
        .tensors()
        .into_iter()
        .map(|(n, k, m)| (n, k, m.len()))
        .collect();

    let mut reports: Vec<TermReport> = LossTerm::ALL
        .iter()
        .map(|&term| TermReport {
            term,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: None,
            passed: true,
        })
        .collect();

    for (name, key, len) in tensors {
        let picks: Vec<usize> = (0..cfg.samples_per_tensor.min(len))
            .map(|_| rng.random_range(0..len))
            .collect();
        for idx in picks {
            let original = bundle.param(key).expect("known key").as_slice()[idx];
            bundle.param_mut(key).expect("known key").as_mut_slice()[idx] = original + cfg.step;
            let (plus, plus_pattern) = evaluate(&bundle, &images, &texts)?;
            bundle.param_mut(key).expect("known key").as_mut_slice()[idx] = original - cfg.step;
            let (minus, minus_pattern) = evaluate(&bundle, &images, &texts)?;
            bundle.param_mut(key).expect("known key").as_mut_slice()[idx] = original;

            let kink = plus_pattern != base_pattern || minus_pattern != base_pattern;
            for (t, report) in reports.iter_mut().enumerate() {
                if kink {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus[t] - minus[t]) / (2.0 * cfg.step);
                let a = analytic[t]
                    .get(key)
                    .expect("all params registered")
                    .as_slice()[idx];
                let floor = cfg.floor * base_values[t].abs().max(1.0);
                let err = relative_error(a, numeric, floor);
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((name.clone(), idx));
                }
            }
        }
    }
    for r in &mut reports {
        r.passed = r.checked > 0 && r.max_rel_error < cfg.tolerance;
    }
    Ok(GradcheckReport { terms: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GradcheckConfig {
        GradcheckConfig {
            dims: NetworkDims {
                image_dim: 8,
                text_dim: 8,
                text_embed_dim: 8,
                code_bits: 8,
            },
            batch: 3,
            samples_per_tensor: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn every_term_passes_on_small_nets() {
        let report = run(&tiny()).unwrap();
        assert_eq!(report.terms.len(), LossTerm::ALL.len());
        for t in &report.terms {
            assert!(t.passed, "{t}");
        }
        assert!(report.passed());
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        let cfg = GradcheckConfig {
            matmul_fault: Some(1.01),
            ..tiny()
        };
        let report = run(&cfg).unwrap();
        assert!(!report.passed());
        assert!(report
            .terms
            .iter()
            .any(|t| t.term == LossTerm::RecF && !t.passed));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(1e-9, 0.0, 1e-6), 1e-3);
    }
}
