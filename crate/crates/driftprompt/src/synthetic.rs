//! Deterministic drifting-series generators for the synthetic benchmarks.
//!
//! Two base processes, each drifted across a sequence of domains:
//!
//! * a delay-feedback map (`mackey_glass`) whose delay alternates per domain,
//! * a two-term cosine sum (`cosine_wave`) whose phase and frequency
//!   multiplier alternate per domain.
//!
//! Both families also exist in an "addition" variant where a domain-indexed
//! cosine wave (`drift_addition`) is added to the generated series; for the
//! cosine family the wave is added on top of the alternation. There is no
//! randomness anywhere in this module.

use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Split, WindowMode};
use crate::error::{Error, Result};

/// Delay-feedback map parameters. The update is the discrete unit-step
/// iteration `x[t+1] = x[t] + beta*x[t-sigma]/(1 + x[t-sigma]^exponent)
/// - gamma*x[t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MackeyGlassParams {
    pub beta: f64,
    pub gamma: f64,
    pub exponent: i32,
    /// Feedback delay in steps.
    pub sigma: usize,
    pub t_max: usize,
    pub init_value: f64,
}

impl Default for MackeyGlassParams {
    fn default() -> Self {
        MackeyGlassParams {
            beta: 0.2,
            gamma: 0.1,
            exponent: 15,
            sigma: 18,
            t_max: 2600,
            init_value: 0.1,
        }
    }
}

impl MackeyGlassParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma == 0 {
            return Err(Error::Config("delay sigma must be at least 1".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        if self.exponent < 1 {
            return Err(Error::Config(format!(
                "exponent must be at least 1, got {}",
                self.exponent
            )));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("init_value", self.init_value),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Iterate the delay map for `t_max` steps. The history convention seeds
/// `x[t] = init_value` for every `t <= sigma`, which keeps the first
/// `sigma + 1` steps well-defined at any delay.
pub fn mackey_glass(params: &MackeyGlassParams) -> Result<Vec<f64>> {
    params.validate()?;
    let n = params.t_max;
    let mut x = vec![params.init_value; n.min(params.sigma + 1)];
    x.reserve(n);
    let mut t = x.len() - 1;
    while t + 1 < n {
        let delayed = x[t - params.sigma];
        let next = x[t] + params.beta * delayed / (1.0 + delayed.powi(params.exponent))
            - params.gamma * x[t];
        x.push(next);
        t += 1;
    }
    Ok(x)
}

/// Two-term cosine sum `cos(a + pi*h*t/alpha) + cos(b + pi*t/beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWaveParams {
    pub alpha: f64,
    pub beta: f64,
    /// Phase of the first term.
    pub a: f64,
    /// Phase of the second term.
    pub b: f64,
    /// Frequency multiplier of the first term.
    pub h: f64,
    pub t_max: usize,
}

impl Default for CosineWaveParams {
    fn default() -> Self {
        CosineWaveParams {
            alpha: 100.0,
            beta: 13.0,
            a: 40.0,
            b: 10.0,
            h: 1.0,
            t_max: 2600,
        }
    }
}

impl CosineWaveParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0.0 || self.beta == 0.0 {
            return Err(Error::Config("alpha and beta must be nonzero".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("a", self.a),
            ("b", self.b),
            ("h", self.h),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

pub fn cosine_wave(params: &CosineWaveParams, t: f64) -> f64 {
    (params.a + std::f64::consts::PI * params.h * t / params.alpha).cos()
        + (params.b + std::f64::consts::PI * t / params.beta).cos()
}

/// Sample the cosine sum at `t = 0, 1, ..., t_max - 1`.
pub fn cosine_series(params: &CosineWaveParams) -> Result<Vec<f64>> {
    params.validate()?;
    Ok((0..params.t_max)
        .map(|t| cosine_wave(params, t as f64))
        .collect())
}

/// Domain-indexed additive wave `0.5 * cos(100*i + pi*(i+1)*t/300)`.
/// Phase is in radians; amplitude is bounded by 0.5.
pub fn drift_addition(i: usize, t: f64) -> f64 {
    0.5 * (100.0 * i as f64 + std::f64::consts::PI * (i as f64 + 1.0) * t / 300.0).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesFamily {
    MackeyGlass,
    CosineSum,
}

/// How consecutive domains drift away from the base process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    /// Delay map with `sigma = 8 + 2*i` for domain offset `i`.
    MgSigmaAlternation,
    /// Cosine sum with `a = i`, `h = i + 1`; `b` and `beta` stay fixed.
    CosPhaseFreqAlternation,
    /// Default-delay map plus the additive wave for domain `i`.
    CosineAddition,
    /// Cosine alternation plus the additive wave on top.
    AlternationPlusAddition,
}

impl SeriesFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            SeriesFamily::MackeyGlass => "mackey_glass",
            SeriesFamily::CosineSum => "cosine_sum",
        }
    }
}

impl DriftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DriftKind::MgSigmaAlternation => "mg_sigma_alternation",
            DriftKind::CosPhaseFreqAlternation => "cos_phase_freq_alternation",
            DriftKind::CosineAddition => "cosine_addition",
            DriftKind::AlternationPlusAddition => "alternation_plus_addition",
        }
    }

    /// The four studied combinations; anything else is a configuration error.
    pub fn check_family(self, family: SeriesFamily) -> Result<()> {
        let ok = matches!(
            (family, self),
            (SeriesFamily::MackeyGlass, DriftKind::MgSigmaAlternation)
                | (SeriesFamily::MackeyGlass, DriftKind::CosineAddition)
                | (SeriesFamily::CosineSum, DriftKind::CosPhaseFreqAlternation)
                | (SeriesFamily::CosineSum, DriftKind::AlternationPlusAddition)
        );
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "drift kind {:?} does not apply to family {:?}",
                self.as_str(),
                family.as_str()
            )))
        }
    }
}

/// Delay used by domain offset `i` under the delay alternation.
pub fn alternation_sigma(i: usize) -> usize {
    8 + 2 * i
}

/// Generate the series for domain offset `i` (0-based; dataset indices are
/// `i + 1`).
pub fn domain_series(
    family: SeriesFamily,
    kind: DriftKind,
    i: usize,
    t_max: usize,
) -> Result<Vec<f64>> {
    kind.check_family(family)?;
    match kind {
        DriftKind::MgSigmaAlternation => mackey_glass(&MackeyGlassParams {
            sigma: alternation_sigma(i),
            t_max,
            ..MackeyGlassParams::default()
        }),
        DriftKind::CosineAddition => {
            let base = mackey_glass(&MackeyGlassParams {
                t_max,
                ..MackeyGlassParams::default()
            })?;
            Ok(base
                .into_iter()
                .enumerate()
                .map(|(t, v)| v + drift_addition(i, t as f64))
                .collect())
        }
        DriftKind::CosPhaseFreqAlternation => cosine_series(&CosineWaveParams {
            a: i as f64,
            h: i as f64 + 1.0,
            t_max,
            ..CosineWaveParams::default()
        }),
        DriftKind::AlternationPlusAddition => {
            let base = cosine_series(&CosineWaveParams {
                a: i as f64,
                h: i as f64 + 1.0,
                t_max,
                ..CosineWaveParams::default()
            })?;
            Ok(base
                .into_iter()
                .enumerate()
                .map(|(t, v)| v + drift_addition(i, t as f64))
                .collect())
        }
    }
}

/// Window every domain of a drifting family into forecast pairs. Domain
/// offsets run `0..num_domains`; returned datasets carry 1-based indices
/// and a `Train` tag for the caller to re-split.
pub fn build_domains(
    family: SeriesFamily,
    kind: DriftKind,
    num_domains: usize,
    t_max: usize,
    window: usize,
    horizon: usize,
) -> Result<Vec<DomainDataset>> {
    build_domains_seeded(family, kind, num_domains, t_max, window, horizon, None)
}

/// Like [`build_domains`] but with optional variable-length windows; each
/// domain draws lengths from its own offset of `variable_seed`.
pub fn build_domains_seeded(
    family: SeriesFamily,
    kind: DriftKind,
    num_domains: usize,
    t_max: usize,
    window: usize,
    horizon: usize,
    variable_seed: Option<u64>,
) -> Result<Vec<DomainDataset>> {
    if num_domains < 2 {
        return Err(Error::Config(format!(
            "need at least 2 domains, got {num_domains}"
        )));
    }
    (0..num_domains)
        .map(|i| {
            let series = domain_series(family, kind, i, t_max)?;
            let mode = match variable_seed {
                Some(seed) => WindowMode::Variable {
                    seed: seed.wrapping_add(i as u64),
                },
                None => WindowMode::Fixed,
            };
            crate::data::window_series(&series, window, horizon, 1, mode, i + 1, Split::Train)
        })
        .collect()
}

/// Turn forecasting targets into exceeds-threshold labels in place.
pub fn relabel_threshold(domains: &mut [DomainDataset], threshold: f64) {
    for ds in domains {
        for v in &mut ds.y {
            *v = if *v > threshold { 1.0 } else { 0.0 };
        }
    }
}

/// Binary proxy task over the same drift: the window is the input sequence
/// and the label says whether the next value exceeds `threshold`.
pub fn build_threshold_domains(
    family: SeriesFamily,
    kind: DriftKind,
    num_domains: usize,
    t_max: usize,
    window: usize,
    threshold: f64,
) -> Result<Vec<DomainDataset>> {
    let mut domains = build_domains(family, kind, num_domains, t_max, window, 1)?;
    relabel_threshold(&mut domains, threshold);
    Ok(domains)
}
