//! JSON config loading. Flags are merged into the JSON object before
//! deserialization, so they pass through the same strict schema.

use std::path::{Path, PathBuf};

use clap::Args;
use decbandit::agents::Algorithm;
use decbandit::graph::CommScheme;
use decbandit::sim::{ExperimentConfig, TopologySpec};
use serde_json::{json, Map, Value};

use crate::CliError;

/// Command-line overrides; any flag given wins over the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// ring | star | complete | path | erdos_renyi[:p] | explicit:<edge file>
    #[arg(long)]
    pub topology: Option<TopologySpec>,
    #[arg(long = "agents", short = 'N')]
    pub n: Option<usize>,
    #[arg(long, short = 'd')]
    pub d: Option<usize>,
    #[arg(long = "horizon", short = 'T')]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
    /// Use a finite set of this many unit-ball arms instead of the box.
    #[arg(long)]
    pub arms: Option<usize>,
    #[arg(long, requires = "arms")]
    pub arm_seed: Option<u64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub realizations: Option<usize>,
    #[arg(long)]
    pub keep_warmup_data: bool,
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<CommScheme>,
    /// Redraw the random graph in every realization.
    #[arg(long)]
    pub resample_graph: Option<bool>,
    /// Override the RC-DLUCB trigger threshold.
    #[arg(long)]
    pub rc_threshold: Option<f64>,
}

pub fn parse_scheme(s: &str) -> Result<CommScheme, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| {
        format!("unknown scheme {s:?} (expected laplacian or normalized_laplacian)")
    })
}

fn read_json(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::Config(format!("{}: top level must be an object", path.display()))),
        Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
    }
}

impl Overrides {
    /// Config file contents with flags applied, still unvalidated.
    pub fn merged_json(&self) -> Result<Map<String, Value>, CliError> {
        let mut m = match &self.config {
            Some(p) => read_json(p)?,
            None => Map::new(),
        };
        let mut set = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(v) = &self.topology {
            set("topology", serde_json::to_value(v)?);
        }
        if let Some(v) = self.n {
            set("N", json!(v));
        }
        if let Some(v) = self.d {
            set("d", json!(v));
        }
        if let Some(v) = self.horizon {
            set("T", json!(v));
        }
        if let Some(v) = self.algorithm {
            set("algorithm", serde_json::to_value(v)?);
        }
        if let Some(k) = self.arms {
            set("decision_set", json!({"finite": {"k": k, "arm_seed": self.arm_seed.unwrap_or(0)}}));
        }
        if let Some(v) = self.seed {
            set("seed", json!(v));
        }
        if let Some(v) = self.sigma {
            set("sigma", json!(v));
        }
        if let Some(v) = self.lambda {
            set("lambda", json!(v));
        }
        if let Some(v) = self.delta {
            set("delta", json!(v));
        }
        if let Some(v) = self.epsilon {
            set("epsilon", json!(v));
        }
        if let Some(v) = self.realizations {
            set("realizations", json!(v));
        }
        if self.keep_warmup_data {
            set("keep_warmup_data", json!(true));
        }
        if let Some(v) = self.scheme {
            set("comm_scheme", serde_json::to_value(v)?);
        }
        if let Some(v) = self.resample_graph {
            set("resample_graph", json!(v));
        }
        if let Some(v) = self.rc_threshold {
            set("rc_threshold", json!(v));
        }
        Ok(m)
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        config_from_json(Value::Object(self.merged_json()?))
    }
}

/// Strict parse plus validation.
pub fn config_from_json(v: Value) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg.validate()?)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let v: Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    config_from_json(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use decbandit::sim::DecisionSpec;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(r#"{"topology":"ring","N":20,"d":5,"T":1000,"algorithm":"dlucb"}"#).unwrap();
        assert_eq!(c.sigma, 0.1);
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.delta, 0.1);
        assert_eq!(c.epsilon, Some(1.0 / 21.0));
        assert_eq!(c.realizations, 20);
        assert_eq!(c.decision_set, DecisionSpec::Box);
    }

    #[test]
    fn rejections_name_the_field() {
        let base = r#""topology":"ring","N":4,"d":2,"T":10"#;
        let e = parse_config_str(&format!(r#"{{{base},"algorithm":"dlucb","epsilon":2}}"#)).unwrap_err();
        assert!(e.to_string().contains("epsilon"), "{e}");
        assert_eq!(e.exit_code(), 2);
        let e = parse_config_str(&format!(r#"{{{base},"algorithm":"safe_dlucb"}}"#)).unwrap_err();
        assert!(e.to_string().contains("finite decision set"), "{e}");
        let e = parse_config_str(&format!(r#"{{{base},"algorithm":"dlucb","colour":1}}"#)).unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        let e = parse_config_str(&format!(r#"{{{base},"algorithm":"dlucb","lambda":0.5}}"#)).unwrap_err();
        assert!(e.to_string().contains("lambda"), "{e}");
    }

    #[test]
    fn topology_forms() {
        let c = parse_config_str(
            r#"{"topology":{"kind":"erdos_renyi","p":0.3},"N":6,"d":2,"T":5,"algorithm":"dlucb"}"#,
        )
        .unwrap();
        assert_eq!(c.topology, TopologySpec::ErdosRenyi { p: 0.3 });
        assert_eq!(c.resample_graph, Some(true));
        assert_eq!("erdos_renyi".parse::<TopologySpec>().unwrap(), TopologySpec::ErdosRenyi { p: 0.5 });
        assert!("hexagon".parse::<TopologySpec>().is_err());
    }

    #[test]
    fn flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"topology":"ring","N":4,"d":2,"T":10,"algorithm":"dlucb","seed":1}"#).unwrap();
        let o = Overrides {
            config: Some(path),
            seed: Some(9),
            n: Some(6),
            arms: Some(5),
            ..Default::default()
        };
        let c = o.resolve().unwrap();
        assert_eq!((c.seed, c.n), (9, 6));
        assert_eq!(c.decision_set, DecisionSpec::Finite { k: 5, arm_seed: 0 });
    }
}
