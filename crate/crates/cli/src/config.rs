//! Experiment configuration files.
//!
//! ```toml
//! trials = 10
//! seed = 7
//!
//! [scenario]
//! blocks = 1048576
//! block_size = 256
//! seed = 1
//!
//! [scenario.error]
//! fraction = 0.01
//! pattern = "random"      # or "runs" with run_length
//! seed = 2
//!
//! [audit]
//! protocol = 1            # 1 partition, 2 TDK, 3 adaptive TDK, 4 autonomous
//! subtpas = 20
//! threshold = 20
//! sample_pct = 20.0
//! ```
//!
//! Every problem is reported as `path:line: message` so the offending entry
//! can be found directly.

use std::fmt;
use std::path::{Path, PathBuf};

use distaudit::audit::{
    AuditParams, ExecutionMode, ProtocolParams, RunOptions, SequenceSource, StopPolicy, TdkParams,
};
use distaudit::cloudsim::ScenarioConfig;
use distaudit::strrecon::{DistributionParams, PieceEncoding};
use distaudit::tdk::OverlapPlacement;
use serde::Deserialize;

/// A configuration problem; the CLI maps it to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub trials: u64,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub audit: AuditSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    pub protocol: u8,
    pub subtpas: usize,
    pub threshold: Option<usize>,
    pub sample_pct: f64,
    #[serde(default = "default_degree")]
    pub sobol_degree: u32,
    #[serde(default)]
    pub stop: StopPolicy,
    #[serde(default)]
    pub mode: ExecutionMode,
    #[serde(default)]
    pub source: SequenceSource,
    pub t: Option<usize>,
    #[serde(default)]
    pub overlap_pct: u32,
    #[serde(default)]
    pub placement: OverlapPlacement,
    #[serde(default)]
    pub unadjusted: bool,
    pub near_range: Option<u64>,
    pub self_pct: Option<f64>,
    #[serde(default = "default_mask_len")]
    pub mask_len: usize,
}

fn default_degree() -> u32 {
    10
}

fn default_mask_len() -> usize {
    3
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// A validated experiment, ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub trials: u64,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub params: AuditParams,
    pub output_dir: Option<PathBuf>,
}

/// 1-based line of `key` inside `[table]` (top level when `table` is empty).
fn line_of(text: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = header.trim().to_string();
            if key.is_empty() && current == table {
                return Some(i + 1);
            }
            continue;
        }
        if current == table && !key.is_empty() {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Locator<'a> {
    path: &'a Path,
    text: &'a str,
}

impl Locator<'_> {
    fn err(&self, table: &str, key: &str, msg: impl fmt::Display) -> ConfigError {
        let line = line_of(self.text, table, key)
            .or_else(|| line_of(self.text, table, ""))
            .unwrap_or(1);
        ConfigError(format!("{}:{line}: {msg}", self.path.display()))
    }
}

pub fn load(path: &Path) -> Result<Experiment, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("{}: cannot read config: {e}", path.display())))?;
    parse(path, &text)
}

pub fn parse(path: &Path, text: &str) -> Result<Experiment, ConfigError> {
    let file: ExperimentFile = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(1);
        ConfigError(format!("{}:{line}: {}", path.display(), e.message()))
    })?;
    let at = Locator { path, text };

    if file.trials == 0 {
        return Err(at.err("", "trials", "trials must be at least 1"));
    }
    let sc = &file.scenario;
    if sc.blocks == 0 {
        return Err(at.err("scenario", "blocks", "blocks must be at least 1"));
    }
    if sc.block_size == 0 {
        return Err(at.err("scenario", "block_size", "block_size must be at least 1"));
    }
    if sc.replicas == Some(0) {
        return Err(at.err("scenario", "replicas", "replicas must be at least 1"));
    }
    let amount_key = if sc.error.fraction.is_some() { "fraction" } else { "count" };
    let plan = sc.error.plan().map_err(|e| {
        let key = if e.to_string().contains("run_length") { "run_length" } else { "" };
        at.err("scenario.error", key, e)
    })?;
    plan.count_for(sc.blocks)
        .map_err(|e| at.err("scenario.error", amount_key, e))?;
    if sc.error.run_length == Some(0) {
        return Err(at.err("scenario.error", "run_length", "run_length must be at least 1"));
    }

    let a = &file.audit;
    let need_t = |name: &str| {
        a.t.ok_or_else(|| at.err("audit", "protocol", format!("protocol {} needs `t`", a.protocol)))
            .and_then(|t| if t == 0 { Err(at.err("audit", "t", format!("{name}: t must be positive"))) } else { Ok(t) })
    };
    let tdk = |t| TdkParams {
        t,
        overlap_pct: a.overlap_pct,
        placement: a.placement,
        unadjusted: a.unadjusted,
    };
    let protocol = match a.protocol {
        1 => ProtocolParams::Partition,
        2 => ProtocolParams::Tdk(tdk(need_t("protocol 2")?)),
        3 => ProtocolParams::Adaptive {
            tdk: tdk(need_t("protocol 3")?),
            near_range: a
                .near_range
                .ok_or_else(|| at.err("audit", "protocol", "protocol 3 needs `near_range`"))?,
        },
        4 => ProtocolParams::Autonomous {
            t: need_t("protocol 4")?,
            self_pct: a.self_pct.unwrap_or(10.0),
        },
        p => return Err(at.err("audit", "protocol", format!("unknown protocol {p}; expected 1–4"))),
    };
    if a.overlap_pct > 100 {
        return Err(at.err("audit", "overlap_pct", "overlap_pct must not exceed 100"));
    }
    if a.mask_len < 2 {
        return Err(at.err("audit", "mask_len", "mask_len must be at least 2"));
    }
    let encoding = PieceEncoding::default();
    encoding
        .check_decodable(a.mask_len)
        .map_err(|e| at.err("audit", "mask_len", e))?;

    let params = AuditParams {
        protocol,
        subtpas: a.subtpas,
        threshold: a.threshold.unwrap_or(a.subtpas),
        sample_pct: a.sample_pct,
        sobol_degree: a.sobol_degree,
        options: RunOptions {
            stop: a.stop,
            mode: a.mode,
            source: a.source,
            distribution: DistributionParams { mask_len: a.mask_len, encoding },
        },
    };
    if let Err(e) = params.validate(sc.blocks) {
        let key = match &e {
            distaudit::Error::InvalidParameter(m) if m.contains("threshold") => {
                if a.threshold.is_some() { "threshold" } else { "subtpas" }
            }
            distaudit::Error::InvalidParameter(m) if m.contains("sample") => "sample_pct",
            distaudit::Error::InvalidParameter(m) if m.contains("sobol") => "sobol_degree",
            distaudit::Error::InvalidParameter(m) if m.contains("self_pct") => "self_pct",
            _ => "protocol",
        };
        return Err(at.err("audit", key, e));
    }
    Ok(Experiment {
        trials: file.trials,
        seed: file.seed,
        scenario: file.scenario,
        params,
        output_dir: file.output.dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
trials = 2
seed = 5

[scenario]
blocks = 4096
seed = 1

[scenario.error]
fraction = 0.01
seed = 2

[audit]
protocol = 3
subtpas = 4
sample_pct = 20.0
t = 3
near_range = 64
"#;

    fn parse_str(s: &str) -> Result<Experiment, ConfigError> {
        parse(Path::new("exp.toml"), s)
    }

    #[test]
    fn accepts_a_complete_file() {
        let e = parse_str(GOOD).unwrap();
        assert_eq!(e.params.threshold, 4);
        assert!(matches!(e.params.protocol, ProtocolParams::Adaptive { near_range: 64, .. }));
        assert_eq!(e.scenario.block_size, 256);
    }

    #[test]
    fn zero_trials_points_at_its_line() {
        let err = parse_str(&GOOD.replace("trials = 2", "trials = 0")).unwrap_err();
        assert_eq!(err.0, "exp.toml:2: trials must be at least 1");
    }

    #[test]
    fn semantic_errors_name_their_line() {
        let err = parse_str(&GOOD.replace("sample_pct = 20.0", "sample_pct = 120.0")).unwrap_err();
        assert!(err.0.starts_with("exp.toml:16:"), "{}", err.0);
        let err = parse_str(&GOOD.replace("near_range = 64\n", "")).unwrap_err();
        assert!(err.0.starts_with("exp.toml:14:"), "{}", err.0);
        let err = parse_str(&GOOD.replace("subtpas = 4", "subtpas = 4\nthreshold = 9")).unwrap_err();
        assert!(err.0.starts_with("exp.toml:16:"), "{}", err.0);
        let err = parse_str(&GOOD.replace("fraction = 0.01", "fraction = 1.5")).unwrap_err();
        assert!(err.0.starts_with("exp.toml:10:"), "{}", err.0);
    }

    #[test]
    fn syntax_and_unknown_keys() {
        let err = parse_str(&GOOD.replace("seed = 5", "seed = ")).unwrap_err();
        assert!(err.0.starts_with("exp.toml:3:"), "{}", err.0);
        let err = parse_str(&GOOD.replace("t = 3", "t = 3\ncolour = 1")).unwrap_err();
        assert!(err.0.contains("colour"), "{}", err.0);
    }
}
