//! Run configuration: one TOML (or JSON) file per experiment.

use std::path::{Path, PathBuf};

use illiquid_core::{validate_model, CrraParams, GridConfig, MarketModel, ModelError, SimConfig, ValidatedModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {field}: {message}")]
    Parse { path: PathBuf, field: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Market section. `d` is redundant with the array lengths and is checked
/// against them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
}

impl ModelSection {
    pub fn market(&self) -> MarketModel {
        MarketModel {
            q: self.q.clone(),
            lambda: self.lambda.clone(),
            b: self.b.clone(),
            sigma: self.sigma.clone(),
            gamma: self.gamma.clone(),
        }
    }
}

/// Parameters of the Monte Carlo checks run by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksConfig {
    /// Starting regime, 1-based as in the output columns.
    pub regime: usize,
    pub wealth: f64,
    /// Starting stock proportion; the optimal target when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    /// Event counts `n` at which the truncated values are compared with `phi^n`.
    pub truncated: Vec<usize>,
    pub supermartingale_times: Vec<f64>,
    /// Paths for the exact boundary-identity simulation.
    pub boundary_paths: usize,
    /// Largest accepted `|estimate - oracle| / std_err`.
    pub z_tolerance: f64,
    /// Paths written to `trace.csv` (0 for none) and the step stride.
    pub trace_paths: usize,
    pub trace_stride: usize,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self {
            regime: 1,
            wealth: 1.0,
            z: None,
            truncated: vec![1, 3, 10],
            supermartingale_times: vec![0.0, 1.0, 2.0, 5.0, 10.0],
            boundary_paths: 100_000,
            z_tolerance: 3.0,
            trace_paths: 0,
            trace_stride: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![Format::Csv, Format::Json],
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

/// One intensity per regime, or a single value shared by all regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaPoint {
    Shared(f64),
    PerRegime(Vec<f64>),
}

impl LambdaPoint {
    pub fn expand(&self, d: usize) -> Vec<f64> {
        match self {
            Self::Shared(l) => vec![*l; d],
            Self::PerRegime(v) => v.clone(),
        }
    }
}

/// Trading intensities to sweep over, everything else held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub lambda: Vec<LambdaPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub prefs: CrraParams,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |k| k + 1) + 1;
    (line, col)
}

fn field_name(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." {
        "<root>".into()
    } else {
        s
    }
}

/// Parses TOML, or JSON when the file name ends in `.json`, reporting the
/// offending field path (and line for TOML).
pub fn parse_str<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T, ConfigError> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let de = &mut serde_json::Deserializer::from_str(text);
        return serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            field: field_name(e.path()),
            message: e.inner().to_string(),
        });
    }
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        field: "<syntax>".into(),
        message: e.to_string(),
    })?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = field_name(e.path());
        let inner = e.into_inner();
        let mut message = inner.message().to_string();
        if let Some(span) = inner.span() {
            let (line, col) = line_col(text, span.start);
            message = format!("{message} (line {line}, column {col})");
        }
        ConfigError::Parse {
            path: path.to_path_buf(),
            field,
            message,
        }
    })
}

pub fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_str(&text, path)
}

fn model_field(e: &ModelError) -> String {
    match e {
        ModelError::Empty => "model".into(),
        ModelError::ShapeMismatch { field, .. } => format!("model.{field}"),
        ModelError::InvalidGenerator { row, col, .. } => format!("model.q[{row}][{col}]"),
        ModelError::InvalidGamma { row, col, .. } => format!("model.gamma[{row}][{col}]"),
        ModelError::InvalidIntensity { regime, .. } => format!("model.lambda[{regime}]"),
        ModelError::InvalidVolatility { regime, .. } => format!("model.sigma[{regime}]"),
        ModelError::InvalidDrift { regime, .. } => format!("model.b[{regime}]"),
        ModelError::InvalidExponent(_) => "prefs.p".into(),
        ModelError::DiscountTooSmall { .. } => "prefs.rho".into(),
        ModelError::NonpositiveArgument(_) => "prefs".into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        read(path)
    }

    /// Checks everything that does not need a solve and returns the model.
    pub fn validate(&self) -> Result<ValidatedModel, ConfigError> {
        let m = &self.model;
        let d = m.d;
        for (name, len) in [
            ("b", m.b.len()),
            ("sigma", m.sigma.len()),
            ("lambda", m.lambda.len()),
            ("q", m.q.len()),
            ("gamma", m.gamma.len()),
        ] {
            if len != d {
                return Err(ConfigError::invalid(
                    format!("model.{name}"),
                    format!("has {len} entries, expected d = {d}"),
                ));
            }
        }
        let model = validate_model(&m.market(), self.prefs)
            .map_err(|e| ConfigError::invalid(model_field(&e), e.to_string()))?;
        self.grid
            .validate()
            .map_err(|e| ConfigError::invalid("grid", e.to_string()))?;
        self.sim
            .validate()
            .map_err(|e| ConfigError::invalid("sim", e.to_string()))?;
        let c = &self.checks;
        if !(1..=d).contains(&c.regime) {
            return Err(ConfigError::invalid("checks.regime", format!("must lie in 1..={d}")));
        }
        if !(c.wealth > 0.0 && c.wealth.is_finite()) {
            return Err(ConfigError::invalid("checks.wealth", "must be positive"));
        }
        if let Some(z) = c.z {
            if !(0.0..=1.0).contains(&z) {
                return Err(ConfigError::invalid("checks.z", "must lie in [0, 1]"));
            }
        }
        if c.truncated.contains(&0) {
            return Err(ConfigError::invalid("checks.truncated", "event counts must be at least 1"));
        }
        let t = &c.supermartingale_times;
        if t.is_empty() || t[0] < 0.0 || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ConfigError::invalid(
                "checks.supermartingale_times",
                "must be nonempty and increase from a nonnegative start",
            ));
        }
        if c.boundary_paths == 0 {
            return Err(ConfigError::invalid("checks.boundary_paths", "must be at least 1"));
        }
        if !(c.z_tolerance > 0.0) {
            return Err(ConfigError::invalid("checks.z_tolerance", "must be positive"));
        }
        if c.trace_stride == 0 {
            return Err(ConfigError::invalid("checks.trace_stride", "must be at least 1"));
        }
        if let Some(s) = &self.sweep {
            self.check_sweep(s)?;
        }
        Ok(model)
    }

    pub fn check_sweep(&self, s: &Sweep) -> Result<(), ConfigError> {
        if s.lambda.is_empty() {
            return Err(ConfigError::invalid("sweep.lambda", "is empty"));
        }
        for (k, pt) in s.lambda.iter().enumerate() {
            if pt.expand(self.model.d).len() != self.model.d {
                return Err(ConfigError::invalid(
                    format!("sweep.lambda[{k}]"),
                    format!("needs one intensity per regime (d = {})", self.model.d),
                ));
            }
        }
        Ok(())
    }

    /// Same run with the trading intensities replaced.
    pub fn with_lambda(&self, lambda: Vec<f64>) -> Self {
        let mut c = self.clone();
        c.model.lambda = lambda;
        c.sweep = None;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[model]
d = 1
b = [0.4]
sigma = [1.0]
lambda = [1.0]
q = [[0.0]]
gamma = [[0.0]]

[prefs]
p = 0.5
rho = 0.2
"#;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_str(text, Path::new("run.toml"))
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let c = parse(BASE).unwrap();
        assert_eq!(c.grid, GridConfig::default());
        assert_eq!(c.sim, SimConfig::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn type_errors_name_the_field_and_line() {
        let text = BASE.replace("gamma = [[0.0]]", "gamma = [[\"x\"]]");
        let msg = parse(&text).unwrap_err().to_string();
        assert!(msg.contains("model.gamma[0][0]"), "{msg}");
        assert!(msg.contains("line 8"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = BASE.replace("rho = 0.2", "rho = 0.2\nrh0 = 0.3");
        let msg = parse(&text).unwrap_err().to_string();
        assert!(msg.contains("prefs") && msg.contains("rh0"), "{msg}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let text = BASE
            .replace("d = 1", "d = 2")
            .replace("b = [0.4]", "b = [0.4, 0.4]")
            .replace("sigma = [1.0]", "sigma = [1.0, 2.0]")
            .replace("lambda = [1.0]", "lambda = [1.0, 1.0]")
            .replace("q = [[0.0]]", "q = [[-1.0, 1.0], [1.0, -1.0]]")
            .replace("gamma = [[0.0]]", "gamma = [[0.0, 1.5], [0.0, 0.0]]");
        let err = parse(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.starts_with("model.gamma[0][1]"), "{err}");

        let err = parse(&BASE.replace("d = 1", "d = 2")).unwrap().validate().unwrap_err().to_string();
        assert!(err.starts_with("model.b"), "{err}");
    }

    #[test]
    fn sweep_points_accept_scalars_and_tuples() {
        let text = format!("{BASE}\n[sweep]\nlambda = [1.0, [5.0], 40]\n");
        let c = parse(&text).unwrap();
        let s = c.sweep.clone().unwrap();
        assert_eq!(s.lambda.iter().map(|p| p.expand(1)).collect::<Vec<_>>(), vec![vec![1.0], vec![5.0], vec![40.0]]);
        assert!(c.validate().is_ok());
        let bad = format!("{BASE}\n[sweep]\nlambda = [[1.0, 2.0]]\n");
        let err = parse(&bad).unwrap().validate().unwrap_err().to_string();
        assert!(err.starts_with("sweep.lambda[0]"), "{err}");
    }

    #[test]
    fn json_round_trip_is_identical() {
        let text = format!("{BASE}\n[grid]\nn_points = 401\n[sweep]\nlambda = [1.0, [5.0]]\n");
        let c = parse(&text).unwrap();
        let json = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = parse_str(&json, Path::new("resolved_config.json")).unwrap();
        assert_eq!(back, c);
    }
}
