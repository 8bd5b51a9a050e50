//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{TestFunction, TraceConvention};
use crate::solvers::{Algorithm, GtdVariant, LearningSchedule, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Ex1,
    Ex2,
    Ex3,
    Ex4,
    Ex5,
    OptionBs,
    LqInfinite,
    TestFunctionStudy,
    SectionalStudy,
    RateStudy,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 10] = [
        ExperimentId::Ex1,
        ExperimentId::Ex2,
        ExperimentId::Ex3,
        ExperimentId::Ex4,
        ExperimentId::Ex5,
        ExperimentId::OptionBs,
        ExperimentId::LqInfinite,
        ExperimentId::TestFunctionStudy,
        ExperimentId::SectionalStudy,
        ExperimentId::RateStudy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::Ex1 => "ex1",
            ExperimentId::Ex2 => "ex2",
            ExperimentId::Ex3 => "ex3",
            ExperimentId::Ex4 => "ex4",
            ExperimentId::Ex5 => "ex5",
            ExperimentId::OptionBs => "option_bs",
            ExperimentId::LqInfinite => "lq_infinite",
            ExperimentId::TestFunctionStudy => "test_function_study",
            ExperimentId::SectionalStudy => "sectional_study",
            ExperimentId::RateStudy => "rate_study",
        }
    }
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Uniform grid `[0, t_end]` with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_end: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { t_end: 1.0, steps: 100 }
    }
}

impl GridConfig {
    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestConfig {
    Grad,
    Trace {
        lambda: f64,
        #[serde(default)]
        convention: TraceConvention,
    },
    Constant {
        value: Vec<f64>,
    },
    Tailored,
}

impl TestConfig {
    pub fn build(&self) -> TestFunction<f64> {
        match self {
            TestConfig::Grad => TestFunction::GradTheta,
            TestConfig::Trace { lambda, convention } => {
                TestFunction::EligibilityTrace { lambda: *lambda, convention: *convention }
            }
            TestConfig::Constant { value } => TestFunction::Constant(value.clone()),
            TestConfig::Tailored => TestFunction::TailoredReciprocal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    ResidualGradient,
    Ml,
    Ctd,
    Clstd,
    Cgtd0,
    Cgtd2,
    Ctdc,
    SectionalCtd0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    #[default]
    Converge,
    Diverge,
}

/// One solver row of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub label: String,
    pub algorithm: AlgorithmKind,
    #[serde(default)]
    pub test: Option<TestConfig>,
    pub mode: Mode,
    pub schedule: LearningSchedule<f64>,
    #[serde(default)]
    pub episodes: usize,
    /// Overrides the experiment's initial parameters.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Fixture id of the target.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub expect: Expectation,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    100
}

impl SolverConfig {
    pub fn build_algorithm(&self) -> Result<Algorithm<f64>> {
        let test = self.test.as_ref().map(TestConfig::build);
        let gtd = |variant| Algorithm::Cgtd { variant, test: test.clone().unwrap_or(TestFunction::GradTheta) };
        let alg = match self.algorithm {
            AlgorithmKind::ResidualGradient => Algorithm::ResidualGradient,
            AlgorithmKind::Ml => Algorithm::MartingaleLoss,
            AlgorithmKind::Ctd => Algorithm::Ctd(test.clone().unwrap_or(TestFunction::GradTheta)),
            AlgorithmKind::Clstd => Algorithm::Clstd,
            AlgorithmKind::Cgtd0 => gtd(GtdVariant::Gtd0),
            AlgorithmKind::Cgtd2 => gtd(GtdVariant::Gtd2),
            AlgorithmKind::Ctdc => gtd(GtdVariant::Tdc),
            AlgorithmKind::SectionalCtd0 => Algorithm::SectionalCtd0,
        };
        let takes_test = matches!(
            self.algorithm,
            AlgorithmKind::Ctd | AlgorithmKind::Cgtd0 | AlgorithmKind::Cgtd2 | AlgorithmKind::Ctdc
        );
        if self.test.is_some() && !takes_test {
            return Err(Error::Config(format!("solver '{}': {} takes no test function", self.label, alg)));
        }
        Ok(alg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionConfig {
    pub rate: f64,
    pub dividend: f64,
    pub sigma: f64,
    pub strike: f64,
    pub maturity: f64,
    pub x0: f64,
    pub net_seed: u64,
    /// Independent paths used for the error series.
    pub eval_paths: usize,
    pub eval_seed: u64,
    pub eval_every: usize,
    pub price_tolerance: f64,
    pub msve_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
    pub speed: f64,
    pub level: f64,
    pub sigma: f64,
    pub rho: f64,
    pub q: f64,
    pub x0: f64,
    pub segment_steps: usize,
    /// Labels whose threshold segments must be nondecreasing in this order.
    #[serde(default)]
    pub ordering: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionStudyConfig {
    pub sigma: f64,
    pub rho: f64,
    pub x0: f64,
    pub theta0: f64,
    pub segment_steps: usize,
    /// Time at which cross-run standard deviations are compared.
    pub std_time: f64,
    pub min_std_ratio: f64,
    /// Conventional mean is compared with the closed form for `t <= mean_horizon`.
    pub mean_horizon: f64,
    pub mean_rel_tol: f64,
    pub conventional: String,
    pub tailored: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionalStudyConfig {
    pub global: String,
    pub sectional: String,
    /// Further rows fitted with the sectional family (sectional-ctd0 rows always are).
    #[serde(default)]
    pub sectional_family: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateStudyConfig {
    pub mesh: Vec<f64>,
    pub reference_dt: f64,
    pub episodes: usize,
    pub theta_probe: f64,
    pub mstde_slope: (f64, f64),
    pub min_gap_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: ExperimentId,
    pub repetitions: usize,
    pub seed_base: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub grid: GridConfig,
    /// Initial parameters shared by all solver rows.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Fixtures file; the built-in table when absent.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    /// Caps the repetitions written to `iterates.csv`; all are written when absent.
    #[serde(default)]
    pub csv_repetitions: Option<usize>,
    #[serde(default)]
    pub solvers: Vec<SolverConfig>,
    #[serde(default)]
    pub option: Option<OptionConfig>,
    #[serde(default)]
    pub lq: Option<LqConfig>,
    #[serde(default)]
    pub test_function: Option<TestFunctionStudyConfig>,
    #[serde(default)]
    pub sectional: Option<SectionalStudyConfig>,
    #[serde(default)]
    pub rate: Option<RateStudyConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; a relative `output_dir` or `fixtures` path resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            if cfg.output_dir.is_relative() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
            if let Some(f) = cfg.fixtures.as_mut().filter(|f| f.is_relative()) {
                *f = dir.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn solver(&self, label: &str) -> Result<&SolverConfig> {
        self.solvers
            .iter()
            .find(|s| s.label == label)
            .ok_or_else(|| Error::Config(format!("no solver labelled '{label}'")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        if self.grid.steps == 0 || !(self.grid.t_end > 0.0) {
            return Err(Error::Config(format!("invalid grid {:?}", self.grid)));
        }
        let mut labels = std::collections::HashSet::new();
        for s in &self.solvers {
            if !labels.insert(s.label.as_str()) {
                return Err(Error::Config(format!("duplicate solver label '{}'", s.label)));
            }
            s.schedule.validate()?;
            s.build_algorithm()?;
            if s.expect == Expectation::Converge && s.target.is_some() && s.tolerance.is_none() {
                return Err(Error::Config(format!("solver '{}' has a target but no tolerance", s.label)));
            }
        }
        use ExperimentId::*;
        let need = |present: bool, section: &str| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("{} requires a [{section}] section", self.experiment_id)))
            }
        };
        match self.experiment_id {
            OptionBs => need(self.option.is_some(), "option")?,
            LqInfinite => need(self.lq.is_some(), "lq")?,
            TestFunctionStudy => need(self.test_function.is_some(), "test_function")?,
            SectionalStudy => need(self.sectional.is_some(), "sectional")?,
            RateStudy => need(self.rate.is_some(), "rate")?,
            Ex1 | Ex2 | Ex3 | Ex4 | Ex5 => {}
        }
        if let Some(s) = &self.test_function {
            self.solver(&s.conventional)?;
            self.solver(&s.tailored)?;
        }
        if let Some(s) = &self.sectional {
            self.solver(&s.global)?;
            self.solver(&s.sectional)?;
        }
        if let Some(lq) = &self.lq {
            for l in &lq.ordering {
                self.solver(l)?;
            }
        }
        if let Some(r) = &self.rate {
            if r.mesh.len() < 3 {
                return Err(Error::Config("rate study needs at least three mesh sizes".into()));
            }
            for &dt in &r.mesh {
                let ratio = dt / r.reference_dt;
                if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
                    return Err(Error::Config(format!("mesh {dt} is not a multiple of {}", r.reference_dt)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment_id = "ex1"
repetitions = 2
seed_base = 1
output_dir = "out"

[[solvers]]
label = "ctd1"
algorithm = "ctd"
test = { kind = "trace", lambda = 1.0 }
mode = "online"
episodes = 10
schedule = { alpha0 = 0.01 }
target = "ex1_truth"
tolerance = 0.05
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.experiment_id, ExperimentId::Ex1);
        assert_eq!(cfg.grid, GridConfig::default());
        let alg = cfg.solvers[0].build_algorithm().unwrap();
        assert_eq!(alg, Algorithm::ctd_lambda(1.0));
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = MINIMAL.replace("repetitions = 2", "repetitions = 0");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("tolerance = 0.05", "");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("algorithm = \"ctd\"", "algorithm = \"ml\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("experiment_id = \"ex1\"", "experiment_id = \"option_bs\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("alpha0 = 0.01", "alpha0 = -1.0");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        assert!(ExperimentConfig::from_toml("experiment_id = \"ex9\"").is_err());
    }
}
