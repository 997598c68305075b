//! The gen → filter → train → eval stages. Each reads its inputs from the
//! configured paths or from earlier stages' outputs in `out_dir`, writes its
//! outputs there and appends one manifest line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use pllkit::data::count_classes;
use pllkit::eval::MetricBlock;
use pllkit::formats::{
    read_candidates_file, read_confidences, read_features, read_labels_file, write_candidates_file,
    write_labels_file, write_matrix_file,
};
use pllkit::genlab::{generate, longtail_indices};
use pllkit::math;
use pllkit::objectives::records_debias;
use pllkit::trainer::{fit, read_model_file, write_model_file, EvalSplit, FitInputs};
use pllkit::zsfilter::{candidate_stats, filter_topk_outcome, zeroshot_confidence};
use pllkit::{CandidateMatrix, Error, FeatureMatrix, LabelSpace, PLLDataset, Result};

use crate::config::ExperimentConfig;
use crate::manifest::{Entry, MANIFEST_FILE};

pub const TRAIN_FEATURES: &str = "train_features.pllf";
pub const TRAIN_LABELS: &str = "train_labels.plly";
pub const CANDIDATES: &str = "candidates.pllc";
pub const CONFIDENCES: &str = "confidences.pllf";
pub const FILTERED: &str = "filtered.pllc";
pub const FILTER_STATS: &str = "filter_stats.txt";
pub const MODEL: &str = "model.pllm";
pub const RECORDS_PRIOR: &str = "records_prior.pllf";
pub const TRAIN_REPORT: &str = "train_report.txt";
pub const REPORT: &str = "report.txt";
pub const PER_CLASS: &str = "per_class.csv";

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub overrides: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::config(format!("paths.{key} is not set")))
}

struct TestSplit {
    features: FeatureMatrix,
    labels: Vec<usize>,
    features_path: PathBuf,
    labels_path: PathBuf,
}

/// Training rows after the optional long-tail subsample.
struct TrainSplit {
    features: FeatureMatrix,
    labels: Option<Vec<usize>>,
    k: Option<usize>,
    sources: Vec<(&'static str, PathBuf)>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, overrides: Vec<String>) -> Self {
        Self { cfg, overrides }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.cfg.out_dir).map_err(|source| Error::Io {
            path: self.cfg.out_dir.clone(),
            source,
        })
    }

    fn entry(&self, stage: &'static str, seed: u64) -> Entry {
        Entry::new(stage, seed, &self.overrides)
    }

    fn train_split(&self) -> Result<TrainSplit> {
        let (fpath, lpath) = if self.cfg.longtail.is_some() {
            let (f, l) = (self.out(TRAIN_FEATURES), self.out(TRAIN_LABELS));
            if !f.exists() {
                return Err(Error::config(format!(
                    "{} is missing: run the gen stage first",
                    f.display()
                )));
            }
            (f, Some(l))
        } else {
            (
                required(&self.cfg.paths.features, "features")?.to_path_buf(),
                self.cfg.paths.labels.clone(),
            )
        };
        let features = read_features(&fpath)?;
        let mut sources = vec![("features", fpath)];
        let (labels, k) = match lpath {
            Some(l) => {
                let (y, k) = read_labels_file(&l)?;
                if y.len() != features.n() {
                    return Err(Error::config(format!(
                        "{} has {} labels for {} feature rows",
                        l.display(),
                        y.len(),
                        features.n()
                    )));
                }
                sources.push(("labels", l));
                (Some(y), Some(k))
            }
            None => (None, None),
        };
        Ok(TrainSplit {
            features,
            labels,
            k,
            sources,
        })
    }

    /// Generated sets when a generation stage is configured, else `paths.candidates`.
    fn base_candidates(&self) -> Result<PathBuf> {
        if self.cfg.gen.is_some() || self.cfg.longtail.is_some() {
            let p = self.out(CANDIDATES);
            if p.exists() {
                return Ok(p);
            }
            if self.cfg.gen.is_some() {
                return Err(Error::config(format!(
                    "{} is missing: run the gen stage first",
                    p.display()
                )));
            }
        }
        Ok(required(&self.cfg.paths.candidates, "candidates")?.to_path_buf())
    }

    /// Filtered sets when the filter stage has run, else the base sets.
    fn train_candidates(&self) -> Result<PathBuf> {
        let filtered = self.out(FILTERED);
        if self.cfg.filter.is_some() && filtered.exists() {
            return Ok(filtered);
        }
        self.base_candidates()
    }

    pub fn gen(&self) -> Result<()> {
        if self.cfg.gen.is_none() && self.cfg.longtail.is_none() {
            return Err(Error::config(
                "nothing to generate: add a [gen] or [longtail] section",
            ));
        }
        self.ensure_out_dir()?;
        let fpath = required(&self.cfg.paths.features, "features")?;
        let lpath = required(&self.cfg.paths.labels, "labels")?;
        let mut features = read_features(fpath)?;
        let (mut labels, k) = read_labels_file(lpath)?;
        if labels.len() != features.n() {
            return Err(Error::config(format!(
                "{} has {} labels for {} feature rows",
                lpath.display(),
                labels.len(),
                features.n()
            )));
        }
        let seed = self
            .cfg
            .gen
            .as_ref()
            .map(|g| g.seed)
            .or(self.cfg.longtail.as_ref().map(|l| l.seed))
            .unwrap_or(self.cfg.seed);
        let mut entry = self.entry("gen", seed);
        entry.input("features", fpath);
        entry.input("labels", lpath);

        let mut given: Option<CandidateMatrix> = None;
        if let Some(lt) = &self.cfg.longtail {
            let keep = longtail_indices(&labels, k, lt.gamma, lt.seed)?;
            features = features.select(&keep);
            labels = keep.iter().map(|&i| labels[i]).collect();
            let (f, l) = (self.out(TRAIN_FEATURES), self.out(TRAIN_LABELS));
            write_matrix_file(features.rows(), &f)?;
            write_labels_file(&labels, k, &l)?;
            entry.output("train_features", &f);
            entry.output("train_labels", &l);
            if self.cfg.gen.is_none() {
                let cpath = required(&self.cfg.paths.candidates, "candidates")?;
                entry.input("candidates", cpath);
                given = Some(read_candidates_file(cpath)?.select(&keep));
            }
        }
        let candidates = match (&self.cfg.gen, given) {
            (Some(spec), _) => generate(spec, features.rows().view(), &labels, k)?,
            (None, Some(c)) => c,
            (None, None) => unreachable!("longtail without gen always selects given candidates"),
        };
        let cpath = self.out(CANDIDATES);
        write_candidates_file(&candidates, &cpath)?;
        entry.output("candidates", &cpath);
        entry.append(&self.cfg.out_dir)
    }

    pub fn filter(&self) -> Result<()> {
        let spec = self
            .cfg
            .filter
            .as_ref()
            .ok_or_else(|| Error::config("no [filter] section"))?;
        self.ensure_out_dir()?;
        let split = self.train_split()?;
        let cpath = self.base_candidates()?;
        let candidates = read_candidates_file(&cpath)?;
        let mut entry = self.entry("filter", self.cfg.seed);
        for (role, p) in &split.sources {
            entry.input(role, p);
        }
        entry.input("candidates", &cpath);

        let conf = match (&self.cfg.paths.confidences, &self.cfg.paths.text_embeddings) {
            (Some(p), _) => {
                entry.input("confidences", p);
                let conf = read_confidences(p)?;
                match &self.cfg.longtail {
                    Some(lt) => {
                        let (y, k) = read_labels_file(required(&self.cfg.paths.labels, "labels")?)?;
                        let keep = longtail_indices(&y, k, lt.gamma, lt.seed)?;
                        pllkit::ConfidenceMatrix::new(conf.rows().select(Axis(0), &keep))?
                    }
                    None => conf,
                }
            }
            (None, Some(t)) => {
                entry.input("text_embeddings", t);
                let conf =
                    zeroshot_confidence(&split.features, &read_features(t)?, spec.temperature)?;
                let out = self.out(CONFIDENCES);
                write_matrix_file(conf.rows(), &out)?;
                entry.output("confidences", &out);
                conf
            }
            (None, None) => {
                return Err(Error::config(
                    "filtering needs paths.confidences or paths.text_embeddings",
                ))
            }
        };
        if conf.n() != candidates.n() || conf.k() != candidates.k() {
            return Err(Error::config(format!(
                "confidences are {}×{} but candidate sets are {}×{}",
                conf.n(),
                conf.k(),
                candidates.n(),
                candidates.k()
            )));
        }
        let outcome = filter_topk_outcome(&candidates, &conf, &spec.spec())?;
        let fpath = self.out(FILTERED);
        write_candidates_file(&outcome.candidates, &fpath)?;
        entry.output("filtered", &fpath);

        let before = candidate_stats(&candidates, split.labels.as_deref());
        let after = candidate_stats(&outcome.candidates, split.labels.as_deref());
        let mut stats = String::new();
        writeln!(stats, "k={}", spec.k).unwrap();
        writeln!(stats, "mean_size_before={:.6}", before.mean).unwrap();
        writeln!(stats, "mean_size_after={:.6}", after.mean).unwrap();
        writeln!(stats, "fallback_rows={}", outcome.fallback_rows).unwrap();
        if let (Some(b), Some(a)) = (before.coverage, after.coverage) {
            writeln!(stats, "coverage_before={b:.6}").unwrap();
            writeln!(stats, "coverage_after={a:.6}").unwrap();
        }
        let spath = self.out(FILTER_STATS);
        write_text(&spath, &stats)?;
        entry.output("filter_stats", &spath);
        entry.append(&self.cfg.out_dir)
    }

    fn test_split(&self) -> Result<Option<TestSplit>> {
        match (&self.cfg.paths.test_features, &self.cfg.paths.test_labels) {
            (Some(f), Some(l)) => {
                let x = read_features(f)?;
                let (y, _) = read_labels_file(l)?;
                if x.n() != y.len() {
                    return Err(Error::config(format!(
                        "{} has {} labels for {} test rows",
                        l.display(),
                        y.len(),
                        x.n()
                    )));
                }
                Ok(Some(TestSplit {
                    features: x,
                    labels: y,
                    features_path: f.clone(),
                    labels_path: l.clone(),
                }))
            }
            (None, None) => Ok(None),
            _ => Err(Error::config(
                "paths.test_features and paths.test_labels must be set together",
            )),
        }
    }

    pub fn train(&self) -> Result<()> {
        self.ensure_out_dir()?;
        let split = self.train_split()?;
        let cpath = self.train_candidates()?;
        let candidates = read_candidates_file(&cpath)?;
        if let Some(k) = split.k {
            if k != candidates.k() {
                return Err(Error::config(format!(
                    "labels declare K={k} but {} has K={}",
                    cpath.display(),
                    candidates.k()
                )));
            }
        }
        let cfg = &self.cfg.train;
        let mut entry = self.entry("train", cfg.seed);
        for (role, p) in &split.sources {
            entry.input(role, p);
        }
        entry.input("candidates", &cpath);
        let text = match &cfg.text_init {
            Some(p) => {
                entry.input("text_init", p);
                Some(read_features(p)?)
            }
            None => None,
        };
        let test = self.test_split()?;
        if let Some(t) = &test {
            entry.input("test_features", &t.features_path);
            entry.input("test_labels", &t.labels_path);
        }

        let k = candidates.k();
        let dataset = PLLDataset::new(
            LabelSpace::new(k)?,
            split.features,
            candidates,
            split.labels,
        )?;
        let inputs = FitInputs {
            text_init: text.as_ref(),
            confidences: None,
            test: test.as_ref().map(|t| EvalSplit {
                features: &t.features,
                labels: &t.labels,
            }),
        };
        let (model, state, report) = fit(&dataset, inputs, cfg)?;

        let mpath = self.out(MODEL);
        write_model_file(&model, &mpath)?;
        entry.output("model", &mpath);
        if let Some(rec) = &state.records {
            let ppath = self.out(RECORDS_PRIOR);
            let prior = rec.prior.mapv(|p| p as f32).insert_axis(Axis(0));
            write_matrix_file(&prior, &ppath)?;
            entry.output("records_prior", &ppath);
        }
        let rpath = self.out(TRAIN_REPORT);
        write_text(&rpath, &report.to_text())?;
        entry.output("train_report", &rpath);
        entry.append(&self.cfg.out_dir)
    }

    pub fn eval(&self) -> Result<()> {
        let TestSplit {
            features: x,
            labels: y,
            features_path: fpath,
            labels_path: lpath,
        } = self.test_split()?.ok_or_else(|| {
            Error::config("evaluation needs paths.test_features and paths.test_labels")
        })?;
        let mpath = self.out(MODEL);
        let model = read_model_file(&mpath)?;
        let k = model.k();
        let mut entry = self.entry("eval", self.cfg.train.seed);
        entry.input("model", &mpath);
        entry.input("test_features", &fpath);
        entry.input("test_labels", &lpath);

        let mut logits: Array2<f64> = model.logits(x.to_f64().view());
        if let Some((_, tau)) = self.cfg.train.objective.records() {
            let ppath = self.out(RECORDS_PRIOR);
            let prior = pllkit::formats::read_matrix_file(&ppath)?;
            if prior.dim() != (1, k) {
                return Err(Error::config(format!("{} must be 1×{k}", ppath.display())));
            }
            entry.input("records_prior", &ppath);
            logits = records_debias(logits.view(), prior.row(0).mapv(f64::from).view(), tau);
        }
        let preds: Vec<usize> = logits.outer_iter().map(math::argmax).collect();

        let train_counts = match self.train_split() {
            Ok(TrainSplit {
                labels: Some(l), ..
            }) => Some(count_classes(&l, k)),
            _ => None,
        };
        let test_candidates = match &self.cfg.paths.test_candidates {
            Some(p) => {
                entry.input("test_candidates", p);
                Some(read_candidates_file(p)?)
            }
            None => None,
        };
        let block = MetricBlock::compute(
            &preds,
            &y,
            k,
            train_counts.as_deref(),
            test_candidates.as_ref(),
        )?;
        let (rpath, cpath) = (self.out(REPORT), self.out(PER_CLASS));
        self.ensure_out_dir()?;
        block.write(&rpath, Some(&cpath))?;
        entry.output("report", &rpath);
        entry.output("per_class", &cpath);
        entry.append(&self.cfg.out_dir)
    }

    /// Every configured stage in order; starts a fresh manifest.
    pub fn pipeline(&self) -> Result<()> {
        self.ensure_out_dir()?;
        let manifest = self.out(MANIFEST_FILE);
        write_text(&manifest, "")?;
        if self.cfg.gen.is_some() || self.cfg.longtail.is_some() {
            self.gen()?;
        }
        if self.cfg.filter.is_some() {
            self.filter()?;
        }
        self.train()?;
        if self.cfg.paths.test_features.is_some() {
            self.eval()?;
        }
        Ok(())
    }
}
