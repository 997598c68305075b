//! Experiment configuration: a TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use pllkit::genlab::{GenSpec, LongTailSpec};
use pllkit::objectives::ObjectiveKind;
use pllkit::trainer::TrainConfig;
use pllkit::zsfilter::{Fallback, FilterSpec, DEFAULT_TEMPERATURE};
use pllkit::{Error, Result};
use serde::Deserialize;
use toml::{Table, Value};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub text_embeddings: Option<PathBuf>,
    pub confidences: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub test_candidates: Option<PathBuf>,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub k: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub fallback: Fallback,
}

impl FilterSection {
    pub fn spec(&self) -> FilterSpec {
        FilterSpec {
            k: self.k,
            fallback: self.fallback,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub paths: Paths,
    pub gen: Option<GenSpec>,
    pub longtail: Option<LongTailSpec>,
    pub filter: Option<FilterSection>,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Flag values that replace config entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub objective: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

impl Overrides {
    /// `key=value` pairs in a fixed order, for the manifest.
    pub fn describe(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(v) = self.eta {
            out.push(format!("eta={v}"));
        }
        if let Some(v) = self.gamma {
            out.push(format!("gamma={v}"));
        }
        if let Some(v) = self.k {
            out.push(format!("k={v}"));
        }
        if let Some(v) = &self.objective {
            out.push(format!("objective={v}"));
        }
        if let Some(v) = self.seed {
            out.push(format!("seed={v}"));
        }
        if let Some(v) = self.epochs {
            out.push(format!("epochs={v}"));
        }
        out
    }
}

fn section<'a>(root: &'a mut Table, name: &str) -> Result<&'a mut Table> {
    root.entry(name.to_string())
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("`{name}` must be a table")))
}

fn to_i64(v: u64, key: &str) -> Result<Value> {
    i64::try_from(v)
        .map(Value::Integer)
        .map_err(|_| Error::config(format!("`{key}` is too large")))
}

fn apply_overrides(root: &mut Table, o: &Overrides) -> Result<()> {
    if let Some(eta) = o.eta {
        let gen = section(root, "gen")?;
        gen.insert("strategy".into(), Value::String("fps".into()));
        gen.remove("top_fraction");
        gen.insert("eta".into(), Value::Float(eta));
    }
    if let Some(gamma) = o.gamma {
        section(root, "longtail")?.insert("gamma".into(), Value::Float(gamma));
    }
    if let Some(k) = o.k {
        section(root, "filter")?.insert("k".into(), to_i64(k as u64, "filter.k")?);
    }
    if let Some(name) = &o.objective {
        section(root, "train")?.insert("objective".into(), Value::String(name.clone()));
    }
    if let Some(epochs) = o.epochs {
        section(root, "train")?.insert("epochs".into(), to_i64(epochs as u64, "train.epochs")?);
    }
    if let Some(seed) = o.seed {
        root.insert("seed".into(), to_i64(seed, "seed")?);
        for name in ["gen", "longtail", "train"] {
            if let Some(Value::Table(t)) = root.get_mut(name) {
                t.remove("seed");
            }
        }
    }
    Ok(())
}

/// Stage seeds default to the top-level seed; `train.objective` may be a bare
/// name such as `"records:proden"`.
fn normalize(root: &mut Table) -> Result<()> {
    let seed = match root.get("seed") {
        None => Value::Integer(0),
        Some(v @ Value::Integer(_)) => v.clone(),
        Some(_) => return Err(Error::config("`seed` must be an integer")),
    };
    for name in ["gen", "longtail", "train"] {
        if let Some(Value::Table(t)) = root.get_mut(name) {
            t.entry("seed".to_string()).or_insert_with(|| seed.clone());
        }
    }
    if let Some(Value::Table(train)) = root.get_mut("train") {
        if let Some(Value::String(name)) = train.get("objective") {
            let kind = ObjectiveKind::from_name(name).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("train.objective: {msg}")),
                other => other,
            })?;
            let value = Value::try_from(kind)
                .map_err(|e| Error::config(format!("train.objective: {e}")))?;
            train.insert("objective".into(), value);
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self> {
        let mut root: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.to_string().trim_end()))?;
        apply_overrides(&mut root, overrides)?;
        normalize(&mut root)?;
        let cfg: ExperimentConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string().trim_end()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.features,
            &mut paths.labels,
            &mut paths.candidates,
            &mut paths.text_embeddings,
            &mut paths.confidences,
            &mut paths.test_features,
            &mut paths.test_labels,
            &mut paths.test_candidates,
            &mut self.train.text_init,
        ] {
            fix(p);
        }
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(gen) = &self.gen {
            match gen.strategy {
                pllkit::Strategy::Fps { eta } if !(0.0..=1.0).contains(&eta) => {
                    return Err(Error::config(format!(
                        "gen.eta must lie in [0, 1], got {eta}"
                    )));
                }
                pllkit::Strategy::InstanceDependent { top_fraction }
                    if !(top_fraction > 0.0 && top_fraction <= 1.0) =>
                {
                    return Err(Error::config(format!(
                        "gen.top_fraction must lie in (0, 1], got {top_fraction}"
                    )));
                }
                _ => {}
            }
        }
        if let Some(lt) = &self.longtail {
            if !(lt.gamma >= 1.0 && lt.gamma.is_finite()) {
                return Err(Error::config(format!(
                    "longtail.gamma must be >= 1, got {}",
                    lt.gamma
                )));
            }
        }
        if let Some(f) = &self.filter {
            if f.k == 0 {
                return Err(Error::config("filter.k must be >= 1"));
            }
            if f.temperature.is_nan() || f.temperature <= 0.0 {
                return Err(Error::config(format!(
                    "filter.temperature must be positive, got {}",
                    f.temperature
                )));
            }
        }
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_has_defaults() {
        let cfg = ExperimentConfig::parse("", &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.train, TrainConfig::default());
        assert!(cfg.gen.is_none());
    }

    #[test]
    fn sections_and_seed_inheritance() {
        let text = r#"
seed = 7
[gen]
strategy = "fps"
eta = 0.3
[longtail]
gamma = 50
seed = 2
[filter]
k = 4
[train]
objective = "records:proden"
epochs = 3
"#;
        let cfg = ExperimentConfig::parse(text, &Overrides::default()).unwrap();
        assert_eq!(
            cfg.gen.unwrap(),
            GenSpec {
                strategy: pllkit::Strategy::Fps { eta: 0.3 },
                seed: 7
            }
        );
        assert_eq!(cfg.longtail.unwrap().seed, 2);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.objective.name(), "records:proden");
        assert_eq!(cfg.filter.unwrap().temperature, DEFAULT_TEMPERATURE);
    }

    #[test]
    fn overrides_win() {
        let text = "seed = 1\n[gen]\nstrategy = \"uss\"\nseed = 5\n[train]\nepochs = 2\n";
        let o = Overrides {
            eta: Some(0.7),
            seed: Some(9),
            objective: Some("lws".into()),
            epochs: Some(4),
            k: Some(3),
            gamma: None,
        };
        let cfg = ExperimentConfig::parse(text, &o).unwrap();
        assert_eq!(
            cfg.gen.unwrap(),
            GenSpec {
                strategy: pllkit::Strategy::Fps { eta: 0.7 },
                seed: 9
            }
        );
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.filter.unwrap().k, 3);
        assert_eq!(
            o.describe(),
            vec!["eta=0.7", "k=3", "objective=lws", "seed=9", "epochs=4"]
        );
    }

    #[test]
    fn errors_name_the_key() {
        let err =
            ExperimentConfig::parse("[train]\nlrr = 0.1\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("lrr"), "{err}");
        let err =
            ExperimentConfig::parse("[train]\nlr = -1.0\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("train.lr"), "{err}");
        let err = ExperimentConfig::parse("[train]\nobjective = \"pico\"\n", &Overrides::default())
            .unwrap_err();
        assert!(err.to_string().contains("train.objective"), "{err}");
        let err = ExperimentConfig::parse("[filter]\nk = 0\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("filter.k"), "{err}");
    }

    #[test]
    fn full_objective_table() {
        let text = "[train.objective]\nkind = \"lws\"\nbeta = 2.0\n";
        let cfg = ExperimentConfig::parse(text, &Overrides::default()).unwrap();
        assert_eq!(cfg.train.objective, ObjectiveKind::Lws { beta: 2.0 });
    }
}
