//! Multi-loss, multi-seed training experiments written to CSV and a JSON manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{Activation, MlpControl};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::problem::{make_setting, SettingConfig};
use crate::reparam::{ReparamFamily, ReparamForm};
use crate::train::{derive_seed, ido_train, TrainConfig, TrainLog};

/// Column order of every curve file.
pub const CSV_HEADER: [&str; 7] = ["iter", "l2_error", "l2_error_ema", "loss", "grad_norm", "ess", "wall_ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ControlSpec {
    fn default() -> Self {
        ControlSpec { hidden: vec![64, 64], activation: Activation::Silu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReparamSpec {
    pub form: ReparamForm,
    pub hidden: Vec<usize>,
    pub vanish_at_t: bool,
}

impl Default for ReparamSpec {
    fn default() -> Self {
        ReparamSpec { form: ReparamForm::Diagonal, hidden: vec![32, 32], vanish_at_t: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub setting: SettingConfig,
    #[serde(default)]
    pub losses: Vec<LossKind>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub control: ControlSpec,
    /// Family for losses that learn `M`; absent means `M = I`.
    #[serde(default)]
    pub reparam: Option<ReparamSpec>,
    pub output: PathBuf,
    #[serde(default = "one")]
    pub seeds: usize,
    /// Also write `curves.svg` with the EMA error of seed 0.
    #[serde(default)]
    pub svg: bool,
}

fn one() -> usize {
    1
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Self::from_toml(&text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub loss: LossKind,
    pub seed: u64,
    pub file: String,
    pub sha256: Option<String>,
    /// `ok`, `halted` or `failed`.
    pub status: String,
    pub message: Option<String>,
    pub final_l2_error_ema: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub spec: ExperimentSpec,
    pub setting_hash: String,
    pub runs: Vec<RunStatus>,
}

impl ExperimentOutcome {
    pub fn all_ok(&self) -> bool {
        self.runs.iter().all(|r| r.status == "ok")
    }
}

fn csv_bytes(log: &TrainLog) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
    w.write_record(CSV_HEADER)?;
    for r in &log.records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Runs every (loss, seed) pair; each writes its own curve file, the manifest is written last.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.train.validate()?;
    let (problem, gt) = make_setting(&spec.setting)?;
    std::fs::create_dir_all(&spec.output)?;
    let jobs: Vec<(LossKind, u64)> =
        spec.losses.iter().flat_map(|&l| (0..spec.seeds as u64).map(move |s| (l, s))).collect();
    let results: Vec<(RunStatus, Option<TrainLog>)> = jobs
        .par_iter()
        .map(|&(loss, seed)| {
            let file = format!("curve_{loss}_{seed}.csv");
            let mut status = RunStatus {
                loss,
                seed,
                file: file.clone(),
                sha256: None,
                status: "failed".into(),
                message: None,
                final_l2_error_ema: None,
            };
            let run_seed = derive_seed(spec.train.seed, seed);
            let cfg = TrainConfig { loss, seed: run_seed, ..spec.train.clone() };
            let ctrl = MlpControl::new(problem.dim, &spec.control.hidden, spec.control.activation, run_seed ^ 0xc0);
            let family = spec.reparam.as_ref().filter(|_| loss.needs_reparam()).map(|r| {
                ReparamFamily::learned(r.form, problem.dim, problem.horizon, r.vanish_at_t, &r.hidden, run_seed ^ 0x3e)
            });
            let outcome = ido_train(&problem, Some(&gt), Box::new(ctrl), family, cfg).and_then(|out| {
                let bytes = csv_bytes(&out.log)?;
                std::fs::write(spec.output.join(&file), &bytes)?;
                Ok((out, hex::encode(Sha256::digest(&bytes))))
            });
            match outcome {
                Ok((out, hash)) => {
                    status.sha256 = Some(hash);
                    status.final_l2_error_ema = out.log.last().map(|r| r.l2_error_ema);
                    status.status = if out.halted.is_some() { "halted".into() } else { "ok".into() };
                    status.message = out.halted;
                    (status, Some(out.log))
                }
                Err(e) => {
                    log::error!("{loss} seed {seed}: {e}");
                    status.message = Some(e.to_string());
                    (status, None)
                }
            }
        })
        .collect();
    if spec.svg {
        let curves: Vec<(LossKind, &TrainLog)> =
            results.iter().filter(|(s, _)| s.seed == 0).filter_map(|(s, l)| l.as_ref().map(|l| (s.loss, l))).collect();
        std::fs::write(spec.output.join("curves.svg"), svg_chart(&curves))?;
    }
    let outcome = ExperimentOutcome {
        spec: spec.clone(),
        setting_hash: spec.setting.content_hash()?,
        runs: results.into_iter().map(|(s, _)| s).collect(),
    };
    std::fs::write(spec.output.join("manifest.json"), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

/// Static log-scale line chart of EMA error against iteration.
fn svg_chart(curves: &[(LossKind, &TrainLog)]) -> String {
    let (w, h, pad) = (720.0, 420.0, 60.0);
    let pts: Vec<(LossKind, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|(k, log)| {
            let p = log
                .records
                .iter()
                .filter(|r| r.l2_error_ema.is_finite() && r.l2_error_ema > 0.0)
                .map(|r| (r.iter as f64, r.l2_error_ema.log10()))
                .collect();
            (*k, p)
        })
        .collect();
    let all = pts.iter().flat_map(|(_, p)| p);
    let x_max = all.clone().map(|p| p.0).fold(1.0, f64::max);
    let y_min = all.clone().map(|p| p.1).fold(f64::INFINITY, f64::min).floor();
    let y_max = all.map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil();
    let (y_min, y_max) = if y_min.is_finite() && y_max > y_min { (y_min, y_max) } else { (-1.0, 0.0) };
    let sx = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y_min) / (y_max - y_min) * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">iteration</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ty = h - 20.0
    );
    let mut e = y_min;
    while e <= y_max {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">1e{}</text>", pad - 6.0, sy(e) + 4.0, e);
        e += 1.0;
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", sx(x_max), h - pad + 16.0, x_max);
    for (n, (k, p)) in pts.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let line: Vec<String> = p.iter().map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>", line.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{k}</text>", w - pad - 150.0, pad + 14.0 * n as f64);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dir: &Path, losses: Vec<LossKind>, iterations: usize) -> ExperimentSpec {
        let text = format!(
            r#"
            output = "{}"
            seeds = 2
            svg = true
            [setting]
            setting = "lq1d"
            [train]
            iterations = {iterations}
            batch_size = 8
            steps = 10
            eval_every = 2
            eval_batch = 32
            [control]
            hidden = [8]
            "#,
            dir.display()
        );
        ExperimentSpec { losses, ..ExperimentSpec::from_toml(&text).unwrap() }
    }

    #[test]
    fn empty_loss_list_writes_only_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&ExperimentSpec { svg: false, ..spec(dir.path(), vec![], 3) }).unwrap();
        assert!(out.runs.is_empty() && out.all_ok());
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(files, vec![std::ffi::OsString::from("manifest.json")]);
    }

    #[test]
    fn zero_iterations_give_single_row_curves() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&spec(dir.path(), vec![LossKind::AdjointMatching], 0)).unwrap();
        assert_eq!(out.runs.len(), 2);
        let text = std::fs::read_to_string(dir.path().join("curve_adjoint-matching_1.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let losses = vec![LossKind::Socm, LossKind::LogVariance];
        let ra = run_experiment(&spec(a.path(), losses.clone(), 4)).unwrap();
        let rb = run_experiment(&spec(b.path(), losses, 4)).unwrap();
        for (x, y) in ra.runs.iter().zip(&rb.runs) {
            assert_eq!(x.sha256, y.sha256);
            let fa = std::fs::read(a.path().join(&x.file)).unwrap();
            let fb = std::fs::read(b.path().join(&y.file)).unwrap();
            assert_eq!(fa, fb);
        }
        assert_ne!(ra.runs[0].sha256, ra.runs[1].sha256);
        let svg = std::fs::read_to_string(a.path().join("curves.svg")).unwrap();
        assert!(svg.contains("socm") && svg.contains("log-variance"));
    }

    #[test]
    fn bad_loss_names_are_rejected() {
        let err = ExperimentSpec::from_toml("output = \"x\"\nlosses = [\"nope\"]\n[setting]\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
