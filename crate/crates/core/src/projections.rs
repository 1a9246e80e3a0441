//! Weight projections and distortions.
//!
//! Every α-normalized kind uses the layer factor `α = max_i |w_i|`, computed
//! from the tensor at call time. Stochastic kinds draw from the generator
//! handed in; callers derive one stream per layer per step so results do not
//! depend on evaluation order.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::rng::{self, Domain, Rng};
use crate::tensor::Tensor;

/// Range of the per-minibatch exponent draw for [`ProjectionSpec::PowerSampled`].
pub const SAMPLED_BETA_RANGE: (f64, f64) = (0.0, 2.0);

/// Share of each StochM3 band weight that is zeroed.
pub const STOCHM3_DROP_PROB: f64 = 0.5;
/// Percentile bounds of the StochM3 band.
pub const STOCHM3_BAND: (f64, f64) = (25.0, 75.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    None,
    Sign,
    Round,
    Power,
    Stoch,
    StochM,
    StochM3,
    AddNorm,
    MultUnif,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 9] = [
        ProjectionKind::None,
        ProjectionKind::Sign,
        ProjectionKind::Round,
        ProjectionKind::Power,
        ProjectionKind::Stoch,
        ProjectionKind::StochM,
        ProjectionKind::StochM3,
        ProjectionKind::AddNorm,
        ProjectionKind::MultUnif,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjectionKind::None => "none",
            ProjectionKind::Sign => "sign",
            ProjectionKind::Round => "round",
            ProjectionKind::Power => "power",
            ProjectionKind::Stoch => "stoch",
            ProjectionKind::StochM => "stochm",
            ProjectionKind::StochM3 => "stochm3",
            ProjectionKind::AddNorm => "addnorm",
            ProjectionKind::MultUnif => "multunif",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            ProjectionKind::Stoch
                | ProjectionKind::StochM
                | ProjectionKind::StochM3
                | ProjectionKind::AddNorm
                | ProjectionKind::MultUnif
        )
    }

    pub fn takes_param(self) -> bool {
        matches!(
            self,
            ProjectionKind::Power
                | ProjectionKind::StochM
                | ProjectionKind::StochM3
                | ProjectionKind::AddNorm
                | ProjectionKind::MultUnif
        )
    }

    /// The spec of this kind with its single parameter set to `value`.
    pub fn with_param(self, value: f64) -> Result<ProjectionSpec> {
        let spec = match self {
            ProjectionKind::None => ProjectionSpec::None,
            ProjectionKind::Sign => ProjectionSpec::Sign,
            ProjectionKind::Round => ProjectionSpec::Round,
            ProjectionKind::Stoch => ProjectionSpec::Stoch,
            ProjectionKind::Power => ProjectionSpec::Power { beta: value },
            ProjectionKind::StochM => ProjectionSpec::StochM { gamma: value },
            ProjectionKind::StochM3 => ProjectionSpec::StochM3 { gamma: value },
            ProjectionKind::AddNorm => ProjectionSpec::AddNorm { sigma: value },
            ProjectionKind::MultUnif => ProjectionSpec::MultUnif { gamma: value },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default sweep grid endpoints and point count.
    pub fn default_grid(self) -> Option<(f64, f64, usize)> {
        match self {
            ProjectionKind::AddNorm => Some((0.0, 0.7, 8)),
            ProjectionKind::MultUnif | ProjectionKind::StochM | ProjectionKind::StochM3 => {
                Some((0.1, 1.0, 10))
            }
            ProjectionKind::Power => Some((0.0, 2.0, 11)),
            _ => None,
        }
    }
}

impl FromStr for ProjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        ProjectionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::input(format!("unknown projection kind `{s}`")))
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which phase a projection is meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Use {
    Train,
    Test,
    Both,
}

/// A projection together with its parameter.
///
/// Text form is `kind` or `kind:value`, e.g. `sign`, `power:0.5`,
/// `power:random`, `stochm:0.5`, `addnorm:0.3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProjectionSpec {
    None,
    Sign,
    Round,
    Power {
        beta: f64,
    },
    /// Power with `β ~ U[0, 2]` drawn once per minibatch.
    PowerSampled,
    Stoch,
    StochM {
        gamma: f64,
    },
    StochM3 {
        gamma: f64,
    },
    AddNorm {
        sigma: f64,
    },
    MultUnif {
        gamma: f64,
    },
}

impl ProjectionSpec {
    pub fn kind(&self) -> ProjectionKind {
        match self {
            ProjectionSpec::None => ProjectionKind::None,
            ProjectionSpec::Sign => ProjectionKind::Sign,
            ProjectionSpec::Round => ProjectionKind::Round,
            ProjectionSpec::Power { .. } | ProjectionSpec::PowerSampled => ProjectionKind::Power,
            ProjectionSpec::Stoch => ProjectionKind::Stoch,
            ProjectionSpec::StochM { .. } => ProjectionKind::StochM,
            ProjectionSpec::StochM3 { .. } => ProjectionKind::StochM3,
            ProjectionSpec::AddNorm { .. } => ProjectionKind::AddNorm,
            ProjectionSpec::MultUnif { .. } => ProjectionKind::MultUnif,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.kind().is_stochastic() || matches!(self, ProjectionSpec::PowerSampled)
    }

    pub fn intended_use(&self) -> Use {
        match self.kind() {
            ProjectionKind::Stoch | ProjectionKind::StochM | ProjectionKind::StochM3 => Use::Train,
            ProjectionKind::AddNorm | ProjectionKind::MultUnif => Use::Test,
            _ => Use::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ProjectionSpec::Power { beta } => beta.is_finite() && beta >= 0.0,
            ProjectionSpec::StochM { gamma }
            | ProjectionSpec::StochM3 { gamma }
            | ProjectionSpec::MultUnif { gamma } => gamma > 0.0 && gamma <= 1.0,
            ProjectionSpec::AddNorm { sigma } => sigma.is_finite() && sigma >= 0.0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::input(format!(
                "invalid projection parameter in `{self}`"
            )))
        }
    }

    /// Fixes a per-minibatch draw: `PowerSampled` becomes `Power` with a
    /// concrete exponent, everything else is returned unchanged.
    pub fn resolve(&self, rng: &mut Rng) -> ProjectionSpec {
        match self {
            ProjectionSpec::PowerSampled => ProjectionSpec::Power {
                beta: rng.random_range(SAMPLED_BETA_RANGE.0..SAMPLED_BETA_RANGE.1),
            },
            other => *other,
        }
    }

    /// Column-friendly name, e.g. `power_0.5`.
    pub fn label(&self) -> String {
        self.to_string().replace(':', "_")
    }
}

impl fmt::Display for ProjectionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.kind().name();
        match *self {
            ProjectionSpec::Power { beta } => write!(f, "{name}:{beta}"),
            ProjectionSpec::PowerSampled => write!(f, "{name}:random"),
            ProjectionSpec::StochM { gamma }
            | ProjectionSpec::StochM3 { gamma }
            | ProjectionSpec::MultUnif { gamma } => {
                write!(f, "{name}:{gamma}")
            }
            ProjectionSpec::AddNorm { sigma } => write!(f, "{name}:{sigma}"),
            _ => f.write_str(name),
        }
    }
}

impl FromStr for ProjectionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = match s.split_once(':') {
            Some((k, p)) => (k.parse::<ProjectionKind>()?, Some(p.trim())),
            None => (s.parse::<ProjectionKind>()?, None),
        };
        match (kind.takes_param(), param) {
            (false, None) => kind.with_param(0.0),
            (false, Some(_)) => Err(Error::input(format!(
                "projection `{kind}` takes no parameter"
            ))),
            (true, None) => Err(Error::input(format!(
                "projection `{kind}` needs a parameter, e.g. `{kind}:0.5`"
            ))),
            (true, Some("random")) if kind == ProjectionKind::Power => {
                Ok(ProjectionSpec::PowerSampled)
            }
            (true, Some(p)) => {
                let v: f64 = p.parse().map_err(|_| {
                    Error::input(format!("bad parameter `{p}` for projection `{kind}`"))
                })?;
                kind.with_param(v)
            }
        }
    }
}

impl TryFrom<String> for ProjectionSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProjectionSpec> for String {
    fn from(p: ProjectionSpec) -> String {
        p.to_string()
    }
}

/// Layer normalization factor `max_i |w_i|`.
pub fn layer_alpha(w: &Tensor) -> f64 {
    w.max_abs()
}

#[inline]
fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
fn uniform_factor(gamma: f64, rng: &mut Rng) -> f64 {
    let u: f64 = rng.random();
    gamma + (1.0 / gamma - gamma) * u
}

#[inline]
fn stochm_one(w: f64, alpha: f64, gamma: f64, rng: &mut Rng) -> f64 {
    let p = 0.5 * (w / alpha + 1.0);
    let up: f64 = rng.random();
    let m = uniform_factor(gamma, rng);
    if up < p {
        w * m
    } else {
        -w * m
    }
}

/// Applies `spec` to every element of `w`.
///
/// An all-zero tensor maps to all zeros for the α-normalized kinds.
pub fn project(w: &Tensor, spec: &ProjectionSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let alpha = layer_alpha(w);
    let normalized = !matches!(
        spec,
        ProjectionSpec::None | ProjectionSpec::AddNorm { .. } | ProjectionSpec::MultUnif { .. }
    );
    if normalized && alpha == 0.0 {
        return Ok(Tensor::zeros(w.shape()));
    }
    let out = match *spec {
        ProjectionSpec::None => w.clone(),
        ProjectionSpec::Sign => w.map(|v| alpha * sign(v)),
        ProjectionSpec::Round => w.map(|v| alpha * (v / alpha).round()),
        ProjectionSpec::Power { beta } => power(w, alpha, beta),
        ProjectionSpec::PowerSampled => {
            let resolved = spec.resolve(rng);
            return project(w, &resolved, rng);
        }
        ProjectionSpec::Stoch => w.map_with(|v| {
            let p = 0.5 * (v / alpha + 1.0);
            if rng.random::<f64>() < p {
                alpha
            } else {
                -alpha
            }
        }),
        ProjectionSpec::StochM { gamma } => w.map_with(|v| stochm_one(v, alpha, gamma, rng)),
        ProjectionSpec::StochM3 { gamma } => return stochm3(w, gamma, rng),
        ProjectionSpec::AddNorm { sigma } => {
            let scale = alpha * sigma;
            w.map_with(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + scale * z
            })
        }
        ProjectionSpec::MultUnif { gamma } => w.map_with(|v| v * uniform_factor(gamma, rng)),
    };
    Ok(out)
}

fn power(w: &Tensor, alpha: f64, beta: f64) -> Tensor {
    if beta == 1.0 {
        return w.clone();
    }
    if beta == 0.0 {
        return w.map(|v| alpha * sign(v));
    }
    w.map(|v| alpha * (v / alpha).abs().powf(beta) * sign(v))
}

/// Linearly interpolated percentile (`q` in `[0, 100]`) of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Open interval `(p25, p75)` of the layer's values.
pub fn stochm3_band(w: &Tensor) -> (f64, f64) {
    let mut sorted = w.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    (
        percentile(&sorted, STOCHM3_BAND.0),
        percentile(&sorted, STOCHM3_BAND.1),
    )
}

/// Three-valued StochM: weights strictly between the layer's 25th and 75th
/// percentiles are zeroed with probability 1/2; all other weights, and the
/// surviving band weights, follow StochM.
pub fn stochm3(w: &Tensor, gamma: f64, rng: &mut Rng) -> Result<Tensor> {
    if w.is_empty() {
        return Err(Error::input("StochM3 needs a non-empty tensor"));
    }
    ProjectionSpec::StochM3 { gamma }.validate()?;
    let alpha = layer_alpha(w);
    if alpha == 0.0 {
        return Ok(Tensor::zeros(w.shape()));
    }
    let (lo, hi) = stochm3_band(w);
    Ok(w.map_with(|v| {
        if v > lo && v < hi && rng.random::<f64>() < STOCHM3_DROP_PROB {
            0.0
        } else {
            stochm_one(v, alpha, gamma, rng)
        }
    }))
}

/// Closed-form expectation of a stochastic projection of `w`.
pub fn expected_projection(w: f64, alpha: f64, spec: &ProjectionSpec) -> Result<f64> {
    match *spec {
        ProjectionSpec::Stoch => Ok(w),
        ProjectionSpec::StochM { gamma } => {
            if alpha == 0.0 {
                return Ok(0.0);
            }
            Ok(w * w / alpha * (gamma + 1.0 / gamma) / 2.0)
        }
        _ => Err(Error::input(format!(
            "no closed-form expectation for `{spec}`"
        ))),
    }
}

/// Projects every layer with one stream per layer keyed by `(seed, k, step)`.
/// A sampled exponent is drawn once and shared by all layers.
pub fn project_layers(
    weights: &[Tensor],
    spec: &ProjectionSpec,
    seed: u64,
    step: u64,
) -> Result<Vec<Tensor>> {
    if matches!(spec, ProjectionSpec::None) {
        return Ok(weights.to_vec());
    }
    let resolved = spec.resolve(&mut rng::stream(seed, Domain::PowerBeta, 0, step));
    weights
        .iter()
        .enumerate()
        .map(|(k, w)| {
            project(
                w,
                &resolved,
                &mut rng::stream(seed, Domain::Projection, k as u64, step),
            )
        })
        .collect()
}

/// Glorot-normal weights with std `sqrt(2 / (fan_in + fan_out))`; returns the
/// tensor and that standard deviation.
pub fn glorot_init(spec: &LayerSpec, rng: &mut Rng) -> Result<(Tensor, f64)> {
    let (shape, (fan_in, fan_out)) = match (spec.weight_shape(), spec.fans()) {
        (Some(s), Some(f)) => (s, f),
        _ => {
            return Err(Error::config(format!(
                "{spec:?} has no weights to initialize"
            )))
        }
    };
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let w = Tensor::from_fn(&shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    });
    Ok((w, std))
}

impl Tensor {
    fn map_with(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape().to_vec(), data).expect("same shape")
    }
}
