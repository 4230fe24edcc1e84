//! Study configuration files: flat TOML, one `key = value` per line.
//!
//! ```text
//! # desk-scale logistic study
//! model = "logistic"
//! theta0 = [2.0, 1.0]
//! K = 20
//! n = 1000
//! contamination = "omniscient"
//! ```
//!
//! Missing keys take the [`StudyConfig`] defaults. Command-line overrides
//! replace file values before any constraint is checked.

use std::collections::HashMap;
use std::ops::Range;

use serde::Deserialize;
use toml::Spanned;

use robagg::distsim::{ContaminationKind, ContaminationSpec, StudyConfig};
use robagg::ModelKind;

use crate::error::{CliError, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<Spanned<String>>,
    theta0: Option<Spanned<Vec<f64>>>,
    #[serde(rename = "K")]
    k: Option<Spanned<i64>>,
    n: Option<Spanned<i64>>,
    c: Option<Spanned<f64>>,
    alpha: Option<Spanned<f64>>,
    replicates: Option<Spanned<i64>>,
    seed: Option<Spanned<i64>>,
    contamination: Option<Spanned<String>>,
    count: Option<Spanned<i64>>,
    omniscient_value: Option<Spanned<Vec<f64>>>,
    gaussian_variance: Option<Spanned<f64>>,
    randomize_placement: Option<Spanned<bool>>,
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub model: Option<String>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub c: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub contamination: Option<String>,
    pub count: Option<usize>,
}

/// Where a value came from, for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Default,
    Line(usize),
    Flag,
}

struct Sources<'a> {
    text: &'a str,
    origins: HashMap<&'static str, Origin>,
}

impl Sources<'_> {
    fn file<T>(&mut self, key: &'static str, v: Option<Spanned<T>>) -> Option<(T, Origin)> {
        v.map(|s| {
            let origin = Origin::Line(line_of(self.text, s.span()));
            self.origins.insert(key, origin);
            (s.into_inner(), origin)
        })
    }

    fn flag<T>(&mut self, key: &'static str, v: Option<T>) -> Option<T> {
        if v.is_some() {
            self.origins.insert(key, Origin::Flag);
        }
        v
    }

    fn error(&self, key: &'static str, message: impl Into<String>) -> CliError {
        let origin = self.origins.get(key).copied().unwrap_or(Origin::Default);
        let (key, line) = match origin {
            Origin::Line(l) => (key.to_string(), Some(l)),
            Origin::Flag => (format!("--{}", flag_name(key)), None),
            Origin::Default => (key.to_string(), None),
        };
        CliError::Config { key, line, message: message.into() }
    }
}

fn flag_name(key: &str) -> String {
    match key {
        "K" => "k".into(),
        other => other.replace('_', "-"),
    }
}

fn line_of(text: &str, span: Range<usize>) -> usize {
    let end = span.start.min(text.len());
    text[..end].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parses a configuration file and applies `overrides` on top.
///
/// Every constraint is checked on the merged result; errors name the
/// offending key and, for file values, the line it was set on.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<StudyConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s));
        CliError::Parse { line, message: e.message().trim().to_string() }
    })?;
    let mut src = Sources { text, origins: HashMap::new() };
    let mut cfg = StudyConfig::default();

    let model = src.flag("model", overrides.model.clone()).or_else(|| src.file("model", raw.model).map(|v| v.0));
    if let Some(m) = model {
        cfg.model = m.parse::<ModelKind>().map_err(|e| src.error("model", strip(e)))?;
    }
    if let Some((theta0, _)) = src.file("theta0", raw.theta0) {
        cfg.theta0 = theta0;
    }

    let k = src.flag("K", overrides.k.map(|v| v as i64)).or_else(|| src.file("K", raw.k).map(|v| v.0));
    if let Some(k) = k {
        cfg.k = positive(&src, "K", k)?;
    }
    let n = src.flag("n", overrides.n.map(|v| v as i64)).or_else(|| src.file("n", raw.n).map(|v| v.0));
    if let Some(n) = n {
        cfg.n = positive(&src, "n", n)?;
    }
    let reps = src
        .flag("replicates", overrides.replicates.map(|v| v as i64))
        .or_else(|| src.file("replicates", raw.replicates).map(|v| v.0));
    if let Some(r) = reps {
        cfg.replicates = positive(&src, "replicates", r)?;
    }
    if cfg.replicates < 2 {
        return Err(src.error("replicates", "at least 2 replicates are needed for SD and CP"));
    }
    if let Some(c) = src.flag("c", overrides.c).or_else(|| src.file("c", raw.c).map(|v| v.0)) {
        cfg.c = c;
    }
    if !(cfg.c > 0.0) {
        return Err(src.error("c", format!("must be positive (or inf), got {}", cfg.c)));
    }
    if let Some(a) = src.flag("alpha", overrides.alpha).or_else(|| src.file("alpha", raw.alpha).map(|v| v.0)) {
        cfg.alpha = a;
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(src.error("alpha", format!("must lie strictly between 0 and 1, got {}", cfg.alpha)));
    }
    let seed =
        src.flag("seed", overrides.seed.map(|v| v as i128)).or_else(|| src.file("seed", raw.seed).map(|v| v.0 as i128));
    if let Some(s) = seed {
        cfg.base_seed =
            u64::try_from(s).map_err(|_| src.error("seed", format!("must be a non-negative integer, got {s}")))?;
    }
    if cfg.theta0.is_empty() || cfg.theta0.iter().any(|v| !v.is_finite()) {
        return Err(src.error("theta0", "must be a non-empty array of finite numbers"));
    }

    let kind = src
        .flag("contamination", overrides.contamination.clone())
        .or_else(|| src.file("contamination", raw.contamination).map(|v| v.0));
    let mut spec = ContaminationSpec::default();
    if let Some(kind) = kind {
        spec.kind = kind.parse::<ContaminationKind>().map_err(|e| src.error("contamination", strip(e)))?;
    }
    let count =
        src.flag("count", overrides.count.map(|v| v as i64)).or_else(|| src.file("count", raw.count).map(|v| v.0));
    if let Some(count) = count {
        let count = usize::try_from(count).map_err(|_| src.error("count", format!("must be >= 0, got {count}")))?;
        if count > cfg.k {
            return Err(src.error("count", format!("{count} contaminated servers but only K = {} servers", cfg.k)));
        }
        spec.count = Some(count);
    }
    if let Some((v, _)) = src.file("omniscient_value", raw.omniscient_value) {
        if v.len() != cfg.theta0.len() {
            return Err(
                src.error("omniscient_value", format!("has {} entries but theta0 has {}", v.len(), cfg.theta0.len()))
            );
        }
        spec.omniscient_value = Some(v);
    }
    if let Some((v, _)) = src.file("gaussian_variance", raw.gaussian_variance) {
        if !(v > 0.0 && v.is_finite()) {
            return Err(src.error("gaussian_variance", format!("must be positive and finite, got {v}")));
        }
        spec.gaussian_variance = v;
    }
    if let Some((v, _)) = src.file("randomize_placement", raw.randomize_placement) {
        spec.randomize_placement = v;
    }
    cfg.contamination = spec;

    // Anything the checks above do not cover (e.g. K * n overflow).
    cfg.validate().map_err(|e| CliError::Config { key: "config".into(), line: None, message: strip(e) })?;
    Ok(cfg)
}

fn positive(src: &Sources<'_>, key: &'static str, v: i64) -> Result<usize> {
    if v < 1 {
        return Err(src.error(key, format!("must be >= 1, got {v}")));
    }
    usize::try_from(v).map_err(|_| src.error(key, format!("{v} is too large")))
}

fn strip(e: robagg::Error) -> String {
    match e {
        robagg::Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<StudyConfig> {
        parse_config(text, &Overrides::default())
    }

    fn config_err(r: Result<StudyConfig>) -> (String, Option<usize>) {
        match r {
            Err(CliError::Config { key, line, .. }) => (key, line),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = parse("model = \"logistic\"\nK = 20\nn = 1000\n").unwrap();
        assert_eq!(cfg.c, 1.345);
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.replicates, 200);
        assert_eq!(cfg, StudyConfig::default());
    }

    #[test]
    fn flag_overrides_file_value() {
        let ov = Overrides { c: Some(0.9818), ..Default::default() };
        let cfg = parse_config("c = 1.345\n", &ov).unwrap();
        assert_eq!(cfg.c, 0.9818);
    }

    #[test]
    fn zero_servers_is_rejected_with_line() {
        let (key, line) = config_err(parse("model = \"linear\"\n\nK = 0\n"));
        assert_eq!(key, "K");
        assert_eq!(line, Some(3));
    }

    #[test]
    fn bad_override_names_the_flag() {
        let ov = Overrides { alpha: Some(1.5), ..Default::default() };
        let (key, line) = config_err(parse_config("alpha = 0.05\n", &ov));
        assert_eq!(key, "--alpha");
        assert_eq!(line, None);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        match parse("K = 20\nbogus = 1\n") {
            Err(CliError::Parse { line, message }) => {
                assert_eq!(line, Some(2));
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_mismatch_is_rejected_with_line() {
        match parse("# comment\nn = \"many\"\n") {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, Some(2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn integer_is_accepted_for_float_keys() {
        assert_eq!(parse("c = 2\n").unwrap().c, 2.0);
    }

    #[test]
    fn infinite_c_is_accepted() {
        assert!(parse("c = inf\n").unwrap().c.is_infinite());
    }

    #[test]
    fn contamination_keys_are_applied() {
        let cfg =
            parse("contamination = \"gaussian\"\ncount = 3\ngaussian_variance = 50\nrandomize_placement = true\n")
                .unwrap();
        assert_eq!(cfg.contamination.kind, ContaminationKind::Gaussian);
        assert_eq!(cfg.contamination.count, Some(3));
        assert_eq!(cfg.contamination.gaussian_variance, 50.0);
        assert!(cfg.contamination.randomize_placement);
    }

    #[test]
    fn count_above_k_is_rejected() {
        let (key, line) = config_err(parse("K = 4\ncount = 5\n"));
        assert_eq!((key.as_str(), line), ("count", Some(2)));
    }

    #[test]
    fn unknown_model_and_contamination_are_rejected() {
        assert_eq!(config_err(parse("model = \"probit\"\n")), ("model".into(), Some(1)));
        assert_eq!(config_err(parse("contamination = \"nope\"\n")), ("contamination".into(), Some(1)));
    }

    #[test]
    fn omniscient_value_length_must_match() {
        let (key, line) = config_err(parse("theta0 = [1.0, 2.0, 3.0]\nomniscient_value = [0.0, 0.0]\n"));
        assert_eq!((key.as_str(), line), ("omniscient_value", Some(2)));
    }

    #[test]
    fn negative_seed_and_single_replicate_are_rejected() {
        assert_eq!(config_err(parse("seed = -1\n")).0, "seed");
        assert_eq!(config_err(parse("replicates = 1\n")).0, "replicates");
    }
}
