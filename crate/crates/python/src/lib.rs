use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use refinematch::cli::{error_line, Cli};
use refinematch::config::RunConfig;
use refinematch::data::{PairSupervision, TrainingPair};
use refinematch::eval::{default_thresholds, mma as mma_curve};
use refinematch::geometry::{fit_homography as fit_h, GroundTruth, Homography, Match};
use refinematch::image::Image;
use refinematch::proposals::ProposalSpec;
use refinematch::refine::filter_by_confidence;
use refinematch::train::{match_pairs, Model};
use refinematch::Error;

/// `(x_a, y_a, x_b, y_b, confidence)`.
type MatchRow = (f64, f64, f64, f64, f64);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn homography(h: [f64; 9]) -> PyResult<Homography> {
    Homography::try_from(h).map_err(to_py)
}

fn matches(ms: Vec<[f64; 4]>) -> Vec<Match> {
    ms.into_iter().map(Match::from_array).collect()
}

/// Runs a command-line invocation (without the program name) and returns
/// its JSON summary as a Python object.
#[pyfunction]
fn run<'py>(py: Python<'py>, args: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    use clap::Parser;
    let cli = Cli::try_parse_from(std::iter::once("refinematch".to_string()).chain(args))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let name = refinematch::cli::command_name(&cli.command);
    let value = py
        .detach(|| refinematch::cli::run(cli))
        .map_err(|e| PyRuntimeError::new_err(error_line(name, &e)))?;
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

/// Mean matching accuracy of `matches` (rows `xa, ya, xb, yb`) under a
/// row-major homography, one value per pixel threshold.
#[pyfunction]
#[pyo3(signature = (matches_ab, h, thresholds=None))]
fn mma(matches_ab: Vec<[f64; 4]>, h: [f64; 9], thresholds: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let gt = GroundTruth::Homography(homography(h)?);
    let t = thresholds.unwrap_or_else(default_thresholds);
    Ok(mma_curve(&matches(matches_ab), &gt, &t))
}

/// Least-squares homography through all matches, row-major.
#[pyfunction]
fn fit_homography(matches_ab: Vec<[f64; 4]>) -> PyResult<[f64; 9]> {
    fit_h(&matches(matches_ab)).map(|h| h.to_row_major()).map_err(to_py)
}

/// A trained (or freshly initialized) matcher.
#[pyclass]
struct Matcher {
    model: Model,
    config: RunConfig,
}

#[pymethods]
impl Matcher {
    #[new]
    #[pyo3(signature = (checkpoint=None, config=None))]
    fn new(checkpoint: Option<PathBuf>, config: Option<PathBuf>) -> PyResult<Self> {
        let config = match config {
            Some(p) => RunConfig::load(p).map_err(to_py)?,
            None => RunConfig::default(),
        };
        let model = match checkpoint {
            Some(p) => Model::load(p),
            None => Model::new(config.backbone.clone(), config.refiner.clone(), config.nc, config.seed),
        }
        .map_err(to_py)?;
        Ok(Self { model, config })
    }

    /// Matches two image files. Returns `(xa, ya, xb, yb, confidence)`
    /// rows whose confidence is at least `confidence` (the configured
    /// threshold by default). `proposals` is `nc` or `external:<file>`.
    #[pyo3(signature = (image_a, image_b, proposals="nc", confidence=None))]
    fn match_images(
        &self,
        py: Python<'_>,
        image_a: PathBuf,
        image_b: PathBuf,
        proposals: &str,
        confidence: Option<f64>,
    ) -> PyResult<Vec<MatchRow>> {
        let spec: ProposalSpec = proposals.parse().map_err(to_py)?;
        if spec == ProposalSpec::Oracle {
            return Err(PyValueError::new_err("oracle proposals need ground truth"));
        }
        let c = confidence.unwrap_or(self.config.refiner.confidence);
        py.detach(|| {
            let pair = TrainingPair {
                id: "pair".into(),
                image_a: Image::load(&image_a)?,
                image_b: Image::load(&image_b)?,
                supervision: PairSupervision::Homography(Homography::identity()),
                overlap_tag: None,
            };
            let (_, refined) = match_pairs(&self.model, std::slice::from_ref(&pair), &spec, &self.config)?
                .pop()
                .expect("one pair in, one result out");
            Ok(filter_by_confidence(&refined, c)
                .iter()
                .map(|r| (r.fine.xa, r.fine.ya, r.fine.xb, r.fine.yb, r.fine_conf))
                .collect())
        })
        .map_err(to_py)
    }
}

#[pymodule]
fn pyrefinematch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(mma, m)?)?;
    m.add_function(wrap_pyfunction!(fit_homography, m)?)?;
    m.add_class::<Matcher>()?;
    Ok(())
}
