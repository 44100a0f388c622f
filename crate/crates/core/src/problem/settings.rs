//! Named benchmark settings and their configuration records.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    solve_riccati, Diffusion, DoubleWellCost, DoubleWellDrift, GroundTruth, InitialLaw, LinearDrift, LqParams,
    QuadraticCost, SocProblem, WellSolution, Zero,
};
use crate::error::{Error, Result};
use crate::linalg;

/// Spatial and temporal resolution of the 1-D grid oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n: usize,
    pub t_steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { x_min: -3.5, x_max: 3.5, n: 501, t_steps: 400 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    QuadraticOuEasy,
    QuadraticOuHard,
    Linear,
    DoubleWellEasy,
    DoubleWellHard,
    /// Generic linear-quadratic problem built from explicit matrices.
    Lq,
    /// `d = 1`, `b = 0`, `f = 0`, `g = ½x²`, `x₀ = 0`.
    Lq1d,
    /// Small non-symmetric two-dimensional LQ problem.
    Lq2d,
}

impl Setting {
    pub const ALL: [Setting; 8] = [
        Setting::QuadraticOuEasy,
        Setting::QuadraticOuHard,
        Setting::Linear,
        Setting::DoubleWellEasy,
        Setting::DoubleWellHard,
        Setting::Lq,
        Setting::Lq1d,
        Setting::Lq2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::QuadraticOuEasy => "quadratic-ou-easy",
            Setting::QuadraticOuHard => "quadratic-ou-hard",
            Setting::Linear => "linear",
            Setting::DoubleWellEasy => "double-well-easy",
            Setting::DoubleWellHard => "double-well-hard",
            Setting::Lq => "lq",
            Setting::Lq1d => "lq1d",
            Setting::Lq2d => "lq2d",
        }
    }

    fn is_double_well(self) -> bool {
        matches!(self, Setting::DoubleWellEasy | Setting::DoubleWellHard)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown setting '{s}'")))
    }
}

/// A matrix given either as a multiple of the identity or as a flat row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scaled(f64),
    Flat(Vec<f64>),
}

impl MatrixSpec {
    fn expand(&self, d: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            MatrixSpec::Scaled(c) => Ok(linalg::identity(d).into_iter().map(|v| v * c).collect()),
            MatrixSpec::Flat(v) if v.len() == d * d => Ok(v.clone()),
            MatrixSpec::Flat(v) => Err(Error::Config(format!("{what} has {} entries, expected {}", v.len(), d * d))),
        }
    }
}

/// A vector given either as a constant or explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Constant(f64),
    Explicit(Vec<f64>),
}

impl VectorSpec {
    fn expand(&self, d: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            VectorSpec::Constant(c) => Ok(vec![*c; d]),
            VectorSpec::Explicit(v) if v.len() == d => Ok(v.clone()),
            VectorSpec::Explicit(v) => Err(Error::Config(format!("{what} has {} entries, expected {d}", v.len()))),
        }
    }
}

/// Serializable setting description; unset fields take the preset's defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingConfig {
    pub setting: Option<Setting>,
    pub d: Option<usize>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub kappa: Option<VectorSpec>,
    pub nu: Option<VectorSpec>,
    #[serde(rename = "A")]
    pub a: Option<MatrixSpec>,
    #[serde(rename = "P")]
    pub p: Option<MatrixSpec>,
    #[serde(rename = "Q")]
    pub q: Option<MatrixSpec>,
    pub sigma: Option<MatrixSpec>,
    pub gamma: Option<VectorSpec>,
    pub x_init: Option<VectorSpec>,
    /// Isotropic variance of a Gaussian initial law; a point mass if absent or zero.
    pub x_init_var: Option<f64>,
    pub grid: Option<GridSpec>,
    pub riccati_steps: Option<usize>,
}

impl SettingConfig {
    pub fn named(setting: Setting) -> Self {
        SettingConfig { setting: Some(setting), ..Default::default() }
    }

    /// Fills every unset field from the preset.
    pub fn resolve(&self) -> Result<SettingConfig> {
        use MatrixSpec::*;
        let setting = self.setting.unwrap_or(Setting::Lq);
        let mut base = match setting {
            Setting::QuadraticOuEasy | Setting::QuadraticOuHard => {
                let hard = setting == Setting::QuadraticOuHard;
                SettingConfig {
                    d: Some(20),
                    a: Some(Scaled(if hard { 1.0 } else { 0.2 })),
                    p: Some(Scaled(if hard { 1.0 } else { 0.2 })),
                    q: Some(Scaled(if hard { 0.5 } else { 0.1 })),
                    x_init: Some(VectorSpec::Constant(0.0)),
                    x_init_var: Some(0.5),
                    ..Default::default()
                }
            }
            Setting::Linear => SettingConfig {
                d: Some(10),
                a: Some(Scaled(-1.0)),
                p: Some(Scaled(0.0)),
                q: Some(Scaled(0.0)),
                gamma: Some(VectorSpec::Constant(1.0)),
                x_init: Some(VectorSpec::Constant(0.0)),
                x_init_var: Some(0.5),
                ..Default::default()
            },
            Setting::DoubleWellEasy | Setting::DoubleWellHard => {
                let d = self.d.unwrap_or(10);
                let hard = setting == Setting::DoubleWellHard;
                let kappa = (0..d).map(|i| if i < 3 { 5.0 } else { 1.0 }).collect();
                let nu = (0..d)
                    .map(|i| match (i < 3, hard) {
                        (true, true) => 6.0,
                        (true, false) => 3.0,
                        (false, true) => 2.0,
                        (false, false) => 1.0,
                    })
                    .collect();
                SettingConfig {
                    d: Some(d),
                    kappa: Some(VectorSpec::Explicit(kappa)),
                    nu: Some(VectorSpec::Explicit(nu)),
                    x_init: Some(VectorSpec::Constant(0.0)),
                    grid: Some(GridSpec::default()),
                    ..Default::default()
                }
            }
            Setting::Lq | Setting::Lq1d => SettingConfig {
                d: Some(1),
                a: Some(Scaled(0.0)),
                p: Some(Scaled(0.0)),
                q: Some(Scaled(0.5)),
                x_init: Some(VectorSpec::Constant(0.0)),
                ..Default::default()
            },
            Setting::Lq2d => SettingConfig {
                d: Some(2),
                a: Some(Flat(vec![-0.2, 0.3, -0.1, 0.1])),
                p: Some(Flat(vec![0.5, 0.1, 0.1, 0.2])),
                q: Some(Flat(vec![0.5, 0.1, 0.1, 0.3])),
                sigma: Some(Flat(vec![1.0, 0.0, 0.3, 0.8])),
                x_init: Some(VectorSpec::Explicit(vec![0.5, -0.3])),
                ..Default::default()
            },
        };
        base.setting = Some(setting);
        base.horizon = Some(1.0);
        base.sigma = base.sigma.or(Some(Scaled(1.0)));
        base.x_init_var = base.x_init_var.or(Some(0.0));
        base.riccati_steps = Some(2000);
        macro_rules! take {
            ($($f:ident),*) => { $( if self.$f.is_some() { base.$f = self.$f.clone(); } )* };
        }
        take!(d, horizon, kappa, nu, a, p, q, sigma, gamma, x_init, x_init_var, grid, riccati_steps);
        Ok(base)
    }

    /// Content hash of the resolved configuration, used to key caches.
    pub fn content_hash(&self) -> Result<String> {
        let resolved = self.resolve()?;
        let json = serde_json::to_string(&resolved)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}

/// Builds the problem and its ground-truth oracle.
pub fn make_setting(cfg: &SettingConfig) -> Result<(SocProblem, GroundTruth)> {
    let r = cfg.resolve()?;
    let setting = r.setting.unwrap();
    let d = r.d.unwrap();
    let horizon = r.horizon.unwrap();
    let sigma = r.sigma.as_ref().unwrap().expand(d, "sigma")?;
    let x0 = r.x_init.as_ref().unwrap().expand(d, "x_init")?;
    let var = r.x_init_var.unwrap();
    let initial = if var > 0.0 {
        let s = var.sqrt();
        InitialLaw::Gaussian { mean: x0, chol: linalg::identity(d).into_iter().map(|v| v * s).collect() }
    } else {
        InitialLaw::Point(x0)
    };
    let builder = SocProblem::builder(d, horizon)
        .name(setting.name())
        .diffusion(Diffusion::constant(sigma.clone(), d)?)
        .initial(initial);

    if setting.is_double_well() {
        let kappa = r.kappa.as_ref().ok_or_else(|| Error::Config("kappa missing".into()))?.expand(d, "kappa")?;
        let nu = r.nu.as_ref().ok_or_else(|| Error::Config("nu missing".into()))?.expand(d, "nu")?;
        if !r.sigma.as_ref().is_some_and(|s| *s == MatrixSpec::Scaled(1.0)) {
            return Err(Error::Unsupported("the double-well oracle assumes σ = I".into()));
        }
        let problem = builder
            .drift(Arc::new(DoubleWellDrift { kappa: kappa.clone() }))
            .state_cost(Arc::new(Zero))
            .terminal_cost(Arc::new(DoubleWellCost { nu: nu.clone() }))
            .build()?;
        let gt = WellSolution::solve(&kappa, &nu, horizon, r.grid.as_ref().unwrap_or(&GridSpec::default()))?;
        return Ok((problem, GroundTruth::Grid(gt)));
    }

    let lq = LqParams {
        dim: d,
        horizon,
        a: r.a.as_ref().unwrap().expand(d, "A")?,
        p: r.p.as_ref().unwrap().expand(d, "P")?,
        q: r.q.as_ref().unwrap().expand(d, "Q")?,
        gamma: r.gamma.as_ref().map(|g| g.expand(d, "gamma")).transpose()?,
        sigma,
    };
    let problem = builder
        .drift(Arc::new(LinearDrift { a: lq.a.clone() }))
        .state_cost(Arc::new(QuadraticCost { p: lq.p.clone(), gamma: None }))
        .terminal_cost(Arc::new(QuadraticCost { p: lq.q.clone(), gamma: lq.gamma.clone() }))
        .build()?;
    let gt = solve_riccati(&lq, r.riccati_steps.unwrap())?;
    Ok((problem, GroundTruth::Riccati(gt)))
}

/// The LQ parameters of a resolved LQ-type configuration.
pub fn lq_params(cfg: &SettingConfig) -> Result<LqParams> {
    let r = cfg.resolve()?;
    let d = r.d.unwrap();
    if r.setting.unwrap().is_double_well() {
        return Err(Error::Config("not a linear-quadratic setting".into()));
    }
    Ok(LqParams {
        dim: d,
        horizon: r.horizon.unwrap(),
        a: r.a.as_ref().unwrap().expand(d, "A")?,
        p: r.p.as_ref().unwrap().expand(d, "P")?,
        q: r.q.as_ref().unwrap().expand(d, "Q")?,
        gamma: r.gamma.as_ref().map(|g| g.expand(d, "gamma")).transpose()?,
        sigma: r.sigma.as_ref().unwrap().expand(d, "sigma")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for s in Setting::ALL {
            let cfg = SettingConfig::named(s).resolve().unwrap();
            let text = toml::to_string(&cfg).unwrap();
            let back: SettingConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg, "{s}");
            assert_eq!(s.name().parse::<Setting>().unwrap(), s);
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg: SettingConfig = toml::from_str("setting = \"double-well-hard\"\nd = 4\nT = 2.0").unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.d, Some(4));
        assert_eq!(r.horizon, Some(2.0));
        assert_eq!(r.kappa, Some(VectorSpec::Explicit(vec![5.0, 5.0, 5.0, 1.0])));
        assert_ne!(cfg.content_hash().unwrap(), SettingConfig::named(Setting::DoubleWellHard).content_hash().unwrap());
    }

    #[test]
    fn double_well_settings_differ_only_in_nu() {
        let e = SettingConfig::named(Setting::DoubleWellEasy).resolve().unwrap();
        let h = SettingConfig::named(Setting::DoubleWellHard).resolve().unwrap();
        assert_eq!(e.kappa, h.kappa);
        let nu_e = e.nu.unwrap().expand(10, "nu").unwrap();
        assert_eq!(nu_e[..4], [3.0, 3.0, 3.0, 1.0]);
        assert_eq!(h.nu.unwrap().expand(10, "nu").unwrap()[..4], [6.0, 6.0, 6.0, 2.0]);
    }
}
