//! Supervised surrogates for the exact N-1 and probabilistic oracles, their
//! datasets and evaluation metrics.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annopf::{DerSetpoints, GridStatus, N1Screen, OpfEnv, PpfScreen, Sample};
use crate::contingency::ContingencySet;
use crate::error::{Error, NumericError, Result};
use crate::neural::{train_supervised, Activation, Mlp, Standardizer, TrainConfig};
use crate::powerflow::{batch_solve_warm, solve, PfResult, Scenario};
use crate::ppf::{sample_states, summarize, UncertaintySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// DER setpoints predicted by a stage-1 agent.
    OnSample,
    /// Controllable DERs at natural availability, `Q = 0`.
    OffSample,
}

/// Input features of the N-1 approximator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum N1Feature {
    /// Base-case loading of every in-service line.
    #[default]
    Lp,
    /// Bus P and Q injections.
    Pq,
    LpV,
}

/// Input features of the PPF approximator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpfFeature {
    /// Deterministic voltage magnitude of every bus.
    #[default]
    V,
    Pq,
    /// Voltage magnitude and bus reactive injection.
    VQ,
}

fn vm(result: &PfResult) -> impl Iterator<Item = f64> + '_ {
    result.v.iter().map(|v| v.norm())
}

pub fn n1_features(kind: N1Feature, line_ids: &[usize], sc: &Scenario, r: &PfResult) -> Vec<f64> {
    let lp = line_ids.iter().map(|&l| r.lp[l]);
    match kind {
        N1Feature::Lp => lp.collect(),
        N1Feature::Pq => sc.p_inj.iter().chain(&sc.q_inj).copied().collect(),
        N1Feature::LpV => lp.chain(vm(r)).collect(),
    }
}

pub fn ppf_features(kind: PpfFeature, sc: &Scenario, r: &PfResult) -> Vec<f64> {
    match kind {
        PpfFeature::V => vm(r).collect(),
        PpfFeature::Pq => sc.p_inj.iter().chain(&sc.q_inj).copied().collect(),
        PpfFeature::VQ => vm(r).chain(sc.q_inj.iter().copied()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct N1Dataset {
    pub feature: N1Feature,
    pub line_ids: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
    /// Maximum N-1 loading per line (percent).
    pub labels: Vec<Vec<f64>>,
    /// Index of each row in the source sample set.
    pub sample_index: Vec<usize>,
    /// Samples whose contingency analysis had a diverged case.
    pub dropped_infinite: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpfDataset {
    pub feature: PpfFeature,
    pub inputs: Vec<Vec<f64>>,
    /// Per-bus violation probability.
    pub labels: Vec<Vec<f64>>,
    pub sample_index: Vec<usize>,
}

/// Labelled datasets from one pass over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datasets {
    pub n1: N1Dataset,
    pub ppf: PpfDataset,
    pub mode: SampleMode,
    /// Samples whose base case did not converge.
    pub dropped_nonconverged: usize,
}

/// Setpoints a dataset is labelled at.
pub fn sample_setpoints(
    env: &OpfEnv,
    sample: &Sample,
    mode: SampleMode,
    model: Option<&Mlp>,
) -> Result<DerSetpoints> {
    match (mode, model) {
        (SampleMode::OffSample, _) => Ok(env.natural_setpoints(&sample.status)),
        (SampleMode::OnSample, Some(m)) => {
            let a = m.predict(&sample.features())?;
            Ok(env.scale_actions(&a, &sample.status)?)
        }
        (SampleMode::OnSample, None) => Err(Error::Config(
            "on-sample dataset creation requires a stage-1 model".into(),
        )),
    }
}

/// Exact labels for one operating point: the base flow, N-1 maxima (`None` if a case
/// diverged) and violation probabilities. The PPF seed is offset by `index`.
pub fn label_sample(
    env: &OpfEnv,
    cases: &ContingencySet,
    status: &GridStatus,
    setpoints: &DerSetpoints,
    spec: &UncertaintySpec,
    lp_max: f64,
    index: usize,
) -> Result<Option<(Scenario, PfResult, Option<Vec<f64>>, Vec<f64>)>> {
    let sc = env.scenario(status, setpoints)?;
    let base = solve(&sc, None)?;
    if !base.converged {
        return Ok(None);
    }
    let case_results = cases.case_results(&sc, &base.v)?;
    let report = cases.report(&base, &case_results, lp_max);
    let n1 = report.nonconverged_cases.is_empty().then_some(report.lp_n1);
    let net = env.materialize(status, setpoints);
    let spec = UncertaintySpec {
        seed: spec.seed.wrapping_add(index as u64),
        ..spec.clone()
    };
    spec.validate()?;
    let states = sample_states(&net, &Arc::clone(&env.admittances), &spec);
    let results = batch_solve_warm(&states, &base.v)?;
    let ppf = summarize(&results, &env.vmin, &env.vmax).viol_prob;
    Ok(Some((sc, base, n1, ppf)))
}

/// Labels every sample with the exact N-1 analysis and Monte-Carlo PPF.
#[allow(clippy::too_many_arguments)]
pub fn build_datasets(
    env: &OpfEnv,
    samples: &[Sample],
    model: Option<&Mlp>,
    mode: SampleMode,
    spec: &UncertaintySpec,
    lp_max: f64,
    n1_feature: N1Feature,
    ppf_feature: PpfFeature,
) -> Result<Datasets> {
    let cases = ContingencySet::new(&env.network)?;
    let labelled: Vec<_> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sp = sample_setpoints(env, s, mode, model)?;
            label_sample(env, &cases, &s.status, &sp, spec, lp_max, i)
        })
        .collect::<Result<_>>()?;
    let mut n1 = N1Dataset {
        feature: n1_feature,
        line_ids: cases.line_ids.clone(),
        inputs: vec![],
        labels: vec![],
        sample_index: vec![],
        dropped_infinite: 0,
    };
    let mut ppf = PpfDataset {
        feature: ppf_feature,
        inputs: vec![],
        labels: vec![],
        sample_index: vec![],
    };
    let mut dropped_nonconverged = 0;
    for (i, item) in labelled.into_iter().enumerate() {
        let Some((sc, base, n1_label, ppf_label)) = item else {
            dropped_nonconverged += 1;
            continue;
        };
        match n1_label {
            Some(l) => {
                n1.inputs.push(n1_features(n1_feature, &cases.line_ids, &sc, &base));
                n1.labels.push(l);
                n1.sample_index.push(i);
            }
            None => n1.dropped_infinite += 1,
        }
        ppf.inputs.push(ppf_features(ppf_feature, &sc, &base));
        ppf.labels.push(ppf_label);
        ppf.sample_index.push(i);
    }
    if dropped_nonconverged + n1.dropped_infinite > 0 {
        log::warn!(
            "dataset: {dropped_nonconverged} non-converged samples dropped, {} N-1 rows dropped",
            n1.dropped_infinite
        );
    }
    Ok(Datasets {
        n1,
        ppf,
        mode,
        dropped_nonconverged,
    })
}

/// Seeded split into `(train, test)` row indices.
pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_frac).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

fn take<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

impl N1Dataset {
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: take(&self.inputs, idx),
            labels: take(&self.labels, idx),
            sample_index: take(&self.sample_index, idx),
            ..self.clone()
        }
    }
}

impl PpfDataset {
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: take(&self.inputs, idx),
            labels: take(&self.labels, idx),
            sample_index: take(&self.sample_index, idx),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxConfig {
    pub hidden: usize,
    pub n1_feature: N1Feature,
    pub ppf_feature: PpfFeature,
    pub train: TrainConfig,
    pub train_frac: f64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            hidden: 300,
            n1_feature: N1Feature::Lp,
            ppf_feature: PpfFeature::V,
            train: TrainConfig {
                batch_size: 32,
                epochs: 200,
                ..Default::default()
            },
            train_frac: 0.8,
        }
    }
}

/// Loading labels are learned in units of 100 %.
const LP_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct N1Approximator {
    pub model: Mlp,
    pub feature: N1Feature,
    pub line_ids: Vec<usize>,
}

impl N1Approximator {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.model.predict(x)?.into_iter().map(|y| y * LP_SCALE).collect())
    }

    pub fn evaluate(&self, ds: &N1Dataset, lp_max: f64) -> Result<ApproxMetrics> {
        let preds = ds.inputs.iter().map(|x| self.predict(x)).collect::<Result<Vec<_>>>()?;
        Ok(evaluate(&preds, &ds.labels, lp_max, 1.0))
    }
}

impl N1Screen for N1Approximator {
    fn predict_n1(&self, sc: &Scenario, r: &PfResult) -> Result<Vec<(usize, f64)>> {
        let pred = self.predict(&n1_features(self.feature, &self.line_ids, sc, r))?;
        Ok(self.line_ids.iter().copied().zip(pred).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpfApproximator {
    pub model: Mlp,
    pub feature: PpfFeature,
}

impl PpfApproximator {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.model.predict(x)?)
    }

    pub fn evaluate(&self, ds: &PpfDataset, threshold: f64) -> Result<ApproxMetrics> {
        let preds = ds.inputs.iter().map(|x| self.predict(x)).collect::<Result<Vec<_>>>()?;
        Ok(evaluate(&preds, &ds.labels, threshold, 100.0))
    }
}

impl PpfScreen for PpfApproximator {
    fn predict_prob(&self, sc: &Scenario, r: &PfResult) -> Result<Vec<f64>> {
        self.predict(&ppf_features(self.feature, sc, r))
    }
}

fn fit_model(
    inputs: &[Vec<f64>],
    labels: &[Vec<f64>],
    hidden: usize,
    out: Activation,
    cfg: &TrainConfig,
) -> Result<(Mlp, Vec<f64>)> {
    let first = labels.first().ok_or(NumericError::Empty("dataset"))?;
    let standardizer = Standardizer::fit(inputs)?;
    let mut model = Mlp::new(&[inputs[0].len(), hidden, first.len()], Activation::Relu, out, cfg.seed)?;
    let xs: Vec<Vec<f64>> = inputs.iter().map(|x| standardizer.transform(x)).collect();
    model.standardizer = standardizer;
    let history = train_supervised(&mut model, &xs, labels, cfg)?;
    Ok((model, history))
}

/// Trains the N-1 approximator (identity output) on all rows of `ds`.
pub fn train_n1(ds: &N1Dataset, cfg: &ApproxConfig) -> Result<(N1Approximator, Vec<f64>)> {
    let labels: Vec<Vec<f64>> = ds
        .labels
        .iter()
        .map(|l| l.iter().map(|y| y / LP_SCALE).collect())
        .collect();
    let (model, history) = fit_model(&ds.inputs, &labels, cfg.hidden, Activation::Identity, &cfg.train)?;
    Ok((
        N1Approximator {
            model,
            feature: ds.feature,
            line_ids: ds.line_ids.clone(),
        },
        history,
    ))
}

/// Trains the PPF approximator (sigmoid output) on all rows of `ds`.
pub fn train_ppf(ds: &PpfDataset, cfg: &ApproxConfig) -> Result<(PpfApproximator, Vec<f64>)> {
    let (model, history) = fit_model(&ds.inputs, &ds.labels, cfg.hidden, Activation::Sigmoid, &cfg.train)?;
    Ok((
        PpfApproximator {
            model,
            feature: ds.feature,
        },
        history,
    ))
}

pub const APPROX_VERSION: u32 = 1;

/// File container of a trained approximator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproxFile<T> {
    pub format: String,
    pub version: u32,
    pub config_hash: Option<String>,
    pub approximator: T,
}

pub trait Approximator: Serialize + serde::de::DeserializeOwned {
    const FORMAT: &'static str;
    fn model(&self) -> &Mlp;
}

impl Approximator for N1Approximator {
    const FORMAT: &'static str = "pqflex-n1";
    fn model(&self) -> &Mlp {
        &self.model
    }
}

impl Approximator for PpfApproximator {
    const FORMAT: &'static str = "pqflex-ppf";
    fn model(&self) -> &Mlp {
        &self.model
    }
}

pub fn save_approximator<T: Approximator + Clone>(path: &Path, a: &T, config_hash: Option<&str>) -> Result<()> {
    let file = ApproxFile {
        format: T::FORMAT.into(),
        version: APPROX_VERSION,
        config_hash: config_hash.map(str::to_owned),
        approximator: a.clone(),
    };
    std::fs::write(path, serde_json::to_string(&file)?).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_approximator<T: Approximator>(path: &Path) -> Result<ApproxFile<T>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let head: serde_json::Value = serde_json::from_str(&text)?;
    let format = head.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if format != T::FORMAT {
        return Err(Error::Config(format!(
            "{}: expected a {} file, found {format:?}",
            path.display(),
            T::FORMAT
        )));
    }
    let file: ApproxFile<T> = serde_json::from_value(head)?;
    if file.version != APPROX_VERSION || !file.approximator.model().is_well_formed() {
        return Err(Error::Config(format!("{}: malformed approximator", path.display())));
    }
    Ok(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxMetrics {
    /// Mean absolute error over all elements, in percentage points.
    pub mae: f64,
    /// Fraction of elements whose predicted and labelled violation flags agree.
    pub class_success: f64,
    pub n_elements: usize,
}

/// MAE (after multiplying by `to_pp`) and agreement of `value > threshold`
/// flags between predictions and labels.
pub fn evaluate(preds: &[Vec<f64>], labels: &[Vec<f64>], threshold: f64, to_pp: f64) -> ApproxMetrics {
    let mut abs = 0.0;
    let mut agree = 0usize;
    let mut n = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        for (p, l) in p.iter().zip(l) {
            abs += (p - l).abs() * to_pp;
            agree += ((*p > threshold) == (*l > threshold)) as usize;
            n += 1;
        }
    }
    let d = n.max(1) as f64;
    ApproxMetrics {
        mae: abs / d,
        class_success: agree as f64 / d,
        n_elements: n,
    }
}

/// Description written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub kind: String,
    pub feature: String,
    pub mode: SampleMode,
    pub n_rows: usize,
    pub n_inputs: usize,
    pub n_labels: usize,
    pub seed: u64,
    pub dropped: usize,
    pub line_ids: Option<Vec<usize>>,
    pub sample_index: Vec<usize>,
}

/// Writes rows as `x0..x{n-1},y0..y{m-1}` plus a `.json` sidecar.
pub fn save_dataset(
    path: &Path,
    inputs: &[Vec<f64>],
    labels: &[Vec<f64>],
    sidecar: &DatasetSidecar,
) -> Result<()> {
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |source| Error::Io { path: p, source }
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    let header: Vec<String> = (0..sidecar.n_inputs)
        .map(|i| format!("x{i}"))
        .chain((0..sidecar.n_labels).map(|j| format!("y{j}")))
        .collect();
    w.write_record(&header).map_err(|e| Error::Config(e.to_string()))?;
    for (x, y) in inputs.iter().zip(labels) {
        w.write_record(x.iter().chain(y).map(|v| v.to_string()))
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))?;
    let side = path.with_extension("json");
    std::fs::write(&side, serde_json::to_string_pretty(sidecar)?).map_err(io_err(&side))
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, DatasetSidecar)> {
    let side = path.with_extension("json");
    let text = std::fs::read_to_string(&side).map_err(|source| Error::Io {
        path: side.display().to_string(),
        source,
    })?;
    let meta: DatasetSidecar = serde_json::from_str(&text)?;
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: row + 2,
                message: e.to_string(),
            })?;
        if vals.len() != meta.n_inputs + meta.n_labels {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: row + 2,
                message: format!("expected {} fields", meta.n_inputs + meta.n_labels),
            });
        }
        labels.push(vals[meta.n_inputs..].to_vec());
        inputs.push(vals[..meta.n_inputs].to_vec());
    }
    Ok((inputs, labels, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annopf::{generate_samples, SampleNoise};
    use crate::contingency::n1_analysis;
    use crate::io::load_grid;
    use crate::ppf::run_mcs;

    fn four_bus() -> (OpfEnv, Vec<Sample>) {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/4bus");
        let b = load_grid(&dir).unwrap();
        let env = OpfEnv::new(b.network).unwrap();
        let s = generate_samples(&env, &b.profiles.unwrap(), 3, SampleNoise::NONE, 1).unwrap();
        (env, s.samples)
    }

    fn spec() -> UncertaintySpec {
        UncertaintySpec {
            n_samples: 50,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn off_sample_labels_match_sequential_oracles() {
        let (env, samples) = four_bus();
        let ds = build_datasets(
            &env,
            &samples,
            None,
            SampleMode::OffSample,
            &spec(),
            100.0,
            N1Feature::Lp,
            PpfFeature::V,
        )
        .unwrap();
        assert_eq!(ds.ppf.inputs.len(), samples.len());
        for (row, &i) in ds.n1.sample_index.iter().enumerate() {
            let s = &samples[i];
            let sp = env.natural_setpoints(&s.status);
            let net = env.materialize(&s.status, &sp);
            let sc = env.scenario(&s.status, &sp).unwrap();
            let base = solve(&sc, None).unwrap();
            assert_eq!(ds.n1.inputs[row], n1_features(N1Feature::Lp, &ds.n1.line_ids, &sc, &base));
            let report = n1_analysis(&net, &sc, 100.0).unwrap();
            for (a, b) in ds.n1.labels[row].iter().zip(&report.lp_n1) {
                assert!((a - b).abs() < 1e-9);
            }
            let spec = UncertaintySpec {
                seed: spec().seed + i as u64,
                ..spec()
            };
            assert_eq!(ds.ppf.labels[row], run_mcs(&net, &spec).unwrap().viol_prob);
        }
    }

    #[test]
    fn on_sample_requires_model_and_constant_minus_one_model_means_zero_output() {
        let (env, samples) = four_bus();
        let err = build_datasets(
            &env,
            &samples,
            None,
            SampleMode::OnSample,
            &spec(),
            100.0,
            N1Feature::Lp,
            PpfFeature::V,
        );
        assert!(err.is_err());
        let mut m = crate::annopf::new_opf_model(&env, &samples, &[4], 0).unwrap();
        let n = m.layers.len();
        let last = &mut m.layers[n - 1];
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = -50.0);
        for s in &samples {
            let sp = sample_setpoints(&env, s, SampleMode::OnSample, Some(&m)).unwrap();
            assert!(sp.p_mw.iter().chain(&sp.q_mvar).all(|x| x.abs() < 1e-6));
        }
    }

    #[test]
    fn metrics_examples() {
        let labels = vec![vec![80.0, 120.0], vec![60.0, 130.0]];
        let m = evaluate(&labels, &labels, 100.0, 1.0);
        assert_eq!((m.mae, m.class_success), (0.0, 1.0));
        let shifted: Vec<Vec<f64>> = labels.iter().map(|r| r.iter().map(|x| x + 2.0).collect()).collect();
        let m = evaluate(&shifted, &labels, 100.0, 1.0);
        assert!((m.mae - 2.0).abs() < 1e-12);
        assert_eq!(m.class_success, 1.0);
        let p = evaluate(&[vec![0.15]], &[vec![0.05]], 0.1, 100.0);
        assert!((p.mae - 10.0).abs() < 1e-9);
        assert_eq!(p.class_success, 0.0);
    }

    #[test]
    fn constant_labels_are_learned() {
        let inputs: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let ds = N1Dataset {
            feature: N1Feature::Lp,
            line_ids: vec![0, 1],
            inputs,
            labels: vec![vec![70.0, 40.0]; 64],
            sample_index: (0..64).collect(),
            dropped_infinite: 0,
        };
        let cfg = ApproxConfig {
            hidden: 16,
            train: TrainConfig {
                learning_rate: 1e-2,
                batch_size: 16,
                epochs: 400,
                ..Default::default()
            },
            ..Default::default()
        };
        let (model, _) = train_n1(&ds, &cfg).unwrap();
        let mae = model.evaluate(&ds, 100.0).unwrap().mae;
        assert!(mae < 0.5, "{mae}");

        let ppf = PpfDataset {
            feature: PpfFeature::V,
            inputs: ds.inputs.clone(),
            labels: vec![vec![0.0; 3]; 64],
            sample_index: ds.sample_index.clone(),
        };
        let (model, _) = train_ppf(&ppf, &cfg).unwrap();
        for x in &ppf.inputs {
            assert!(model.predict(x).unwrap().iter().all(|&p| (0.0..0.05).contains(&p)));
        }
    }

    #[test]
    fn approximator_file_round_trip_and_kind_check() {
        let a = N1Approximator {
            model: Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Identity, 1).unwrap(),
            feature: N1Feature::LpV,
            line_ids: vec![0, 2],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n1.json");
        save_approximator(&path, &a, Some("abc")).unwrap();
        let back = load_approximator::<N1Approximator>(&path).unwrap();
        assert_eq!(back.approximator, a);
        assert_eq!(back.config_hash.as_deref(), Some("abc"));
        assert!(load_approximator::<PpfApproximator>(&path).is_err());
    }

    #[test]
    fn split_is_seeded_partition() {
        let (a, b) = split_indices(10, 0.8, 3);
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.8, 3), (a, b));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n1.csv");
        let inputs = vec![vec![0.1, 1.0 / 3.0], vec![2.5, -1e-7]];
        let labels = vec![vec![99.5], vec![101.25]];
        let meta = DatasetSidecar {
            kind: "n1".into(),
            feature: "lp".into(),
            mode: SampleMode::OnSample,
            n_rows: 2,
            n_inputs: 2,
            n_labels: 1,
            seed: 9,
            dropped: 0,
            line_ids: Some(vec![0, 1]),
            sample_index: vec![0, 1],
        };
        save_dataset(&path, &inputs, &labels, &meta).unwrap();
        let (x, y, m) = load_dataset(&path).unwrap();
        assert_eq!((x, y, m), (inputs, labels, meta));
    }
}
