use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::ValueEnum;
use kt_core::models::gaussian::{learn_gaussian_mixture, sample_gaussian_mixture, GaussianLearnConfig};
use kt_core::models::hmm::{hmm_parameter_error, learn_hmm, sample_hmm};
use kt_core::models::io::{self, SampleSet};
use kt_core::models::multiview::{learn_multiview, learn_topic, sample_multiview, sample_topic};
use kt_core::models::{parameter_error, replication_seed, ModelParams};
use kt_core::{align, check_kruskal_condition, necessary_condition_check, Cp, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{Overrides, Settings};

/// Default target error for `decompose`.
const DECOMPOSE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Multiview,
    Topic,
    Hmm,
    Gaussian,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            Self::Multiview => "multiview",
            Self::Topic => "topic",
            Self::Hmm => "hmm",
            Self::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenerateKind {
    Multiview,
    Topic,
    Hmm,
    Gaussian,
    /// Random CP decomposition with unit-norm Gaussian columns
    Cp,
    /// Expanded `--truth` CP plus noise of Frobenius norm `--eta`
    Tensor,
}

/// How a command finished; maps onto the exit-code contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    BudgetPartial,
    ConditionFails,
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    inputs: Value,
    settings: &'a Settings,
    output: T,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_clock_ms: Option<f64>,
}

fn emit<T: Serialize>(o: &Overrides, s: &Settings, command: &str, inputs: Value, output: T, start: Instant) -> anyhow::Result<()> {
    let report = Report {
        tool: "kt",
        version: env!("CARGO_PKG_VERSION"),
        command,
        inputs,
        settings: s,
        output,
        wall_clock_ms: o.timings.then(|| start.elapsed().as_secs_f64() * 1e3),
    };
    write_text(o.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn write_text(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

pub fn decompose(o: &Overrides, s: &Settings, input: &Path) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let t = Tensor::read_json(input).with_context(|| format!("reading tensor {}", input.display()))?;
    let mut search = s.search();
    search.target_eps = s.eps.unwrap_or(DECOMPOSE_EPS);
    let cfg = search.config(s.rank, 1.0)?;
    let res = if t.order() == 3 {
        kt_core::bounded_low_rank_3(&t, &cfg)?
    } else {
        kt_core::bounded_low_rank_general(&t, &cfg)?
    };
    let outcome = if res.partial { Outcome::BudgetPartial } else { Outcome::Success };
    emit(o, s, "decompose", json!({ "tensor": path_value(input) }), &res, start)?;
    Ok(outcome)
}

pub fn certify(o: &Overrides, s: &Settings, input: &Path) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let cp = Cp::read_json(input).with_context(|| format!("reading decomposition {}", input.display()))?;
    let report = check_kruskal_condition(&cp, &s.tau)?;
    let necessary = if cp.order() == 3 {
        Some(necessary_condition_check(cp.factor(0), cp.factor(1))?)
    } else {
        None
    };
    let passes = report.passes;
    let output = json!({ "kruskal": report, "necessary_condition": necessary });
    emit(o, s, "certify", json!({ "decomposition": path_value(input) }), output, start)?;
    Ok(if passes { Outcome::Success } else { Outcome::ConditionFails })
}

pub fn align_cmd(o: &Overrides, s: &Settings, reference: &Path, candidate: &Path) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let a = Cp::read_json(reference).with_context(|| format!("reading {}", reference.display()))?;
    let b = Cp::read_json(candidate).with_context(|| format!("reading {}", candidate.display()))?;
    let res = align(&a, &b)?;
    let inputs = json!({ "reference": path_value(reference), "candidate": path_value(candidate) });
    emit(o, s, "align", inputs, &res, start)?;
    Ok(Outcome::Success)
}

fn read_truth(path: &Path, kind: ModelKind) -> anyhow::Result<ModelParams> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let p: ModelParams = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if p.kind() != kind.name() {
        bail!("{} holds {} parameters, expected {}", path.display(), p.kind(), kind.name());
    }
    match &p {
        ModelParams::Multiview(m) => m.validate()?,
        ModelParams::Topic(m) => m.validate()?,
        ModelParams::Hmm(m) => m.validate()?,
        ModelParams::Gaussian(m) => m.validate()?,
    }
    Ok(p)
}

fn generate_samples(truth: &ModelParams, s: &Settings, n: usize, seed: u64) -> anyhow::Result<SampleSet> {
    Ok(match truth {
        ModelParams::Multiview(p) => SampleSet::Views(sample_multiview(p, n, seed)?),
        ModelParams::Topic(p) => SampleSet::Views(sample_topic(p, n, seed)?),
        ModelParams::Hmm(p) => SampleSet::Sequences(sample_hmm(p, 2 * s.window_q + 1, n, seed)?),
        ModelParams::Gaussian(p) => SampleSet::Points(sample_gaussian_mixture(p, n, seed)?),
    })
}

fn read_samples(kind: ModelKind, path: &Path, truth: Option<&ModelParams>) -> anyhow::Result<SampleSet> {
    let ctx = || format!("reading samples {}", path.display());
    Ok(match kind {
        ModelKind::Multiview | ModelKind::Topic => {
            let dims = match truth {
                Some(ModelParams::Multiview(p)) => Some(p.dims()),
                Some(ModelParams::Topic(p)) => Some(vec![p.topics.nrows(); p.order]),
                _ => None,
            };
            SampleSet::Views(io::read_multiview_file(path, dims).with_context(ctx)?)
        }
        ModelKind::Hmm => {
            let alphabet = match truth {
                Some(ModelParams::Hmm(p)) => Some(p.alphabet()),
                _ => None,
            };
            SampleSet::Sequences(io::read_sequences_file(path, alphabet).with_context(ctx)?)
        }
        ModelKind::Gaussian => SampleSet::Points(io::read_points_file(path).with_context(ctx)?),
    })
}

/// Errors against ground truth after relabeling components.
#[derive(Debug, Clone, Serialize)]
struct Score {
    permutation: Vec<usize>,
    errors: Map<String, Value>,
    max: f64,
}

impl Score {
    fn parts(&self) -> Vec<(String, f64)> {
        self.errors.iter().map(|(k, v)| (k.clone(), v.as_f64().unwrap_or(f64::NAN))).collect()
    }
}

fn score(truth: &ModelParams, est: &ModelParams) -> anyhow::Result<Score> {
    let mut errors = Map::new();
    let (permutation, max) = match (truth, est) {
        (ModelParams::Multiview(t), ModelParams::Multiview(e)) => {
            let pe = parameter_error(&t.means, &t.weights, &e.means, &e.weights)?;
            for (j, x) in pe.matrices.iter().enumerate() {
                errors.insert(format!("means_{}", j + 1), json!(x));
            }
            errors.insert("weights".into(), json!(pe.weights));
            (pe.permutation, pe.max)
        }
        (ModelParams::Topic(t), ModelParams::Topic(e)) => {
            let pe = parameter_error(std::slice::from_ref(&t.topics), &t.weights, std::slice::from_ref(&e.topics), &e.weights)?;
            errors.insert("topics".into(), json!(pe.matrices[0]));
            errors.insert("weights".into(), json!(pe.weights));
            (pe.permutation, pe.max)
        }
        (ModelParams::Hmm(t), ModelParams::Hmm(e)) => {
            let he = hmm_parameter_error(t, e)?;
            errors.insert("observation".into(), json!(he.observation));
            errors.insert("transition".into(), json!(he.transition));
            errors.insert("stationary".into(), json!(he.stationary));
            let max = he.observation.max(he.transition).max(he.stationary);
            (he.permutation, max)
        }
        (ModelParams::Gaussian(t), ModelParams::Gaussian(e)) => {
            let pe = parameter_error(std::slice::from_ref(&t.means), &t.weights, std::slice::from_ref(&e.means), &e.weights)?;
            errors.insert("means".into(), json!(pe.matrices[0]));
            errors.insert("weights".into(), json!(pe.weights));
            (pe.permutation, pe.max)
        }
        _ => bail!("ground truth and estimate are different model kinds"),
    };
    Ok(Score { permutation, errors, max })
}

fn learn_from(kind: ModelKind, samples: &SampleSet, s: &Settings) -> anyhow::Result<(ModelParams, Value)> {
    let search = s.search();
    Ok(match (kind, samples) {
        (ModelKind::Multiview, SampleSet::Views(v)) => {
            let (p, d) = learn_multiview(v, s.rank, s.order, &search)?;
            (ModelParams::Multiview(p), serde_json::to_value(d)?)
        }
        (ModelKind::Topic, SampleSet::Views(v)) => {
            let (p, d) = learn_topic(v, s.rank, s.order, &search)?;
            (ModelParams::Topic(p), serde_json::to_value(d)?)
        }
        (ModelKind::Hmm, SampleSet::Sequences(q)) => {
            let (p, d) = learn_hmm(q, s.rank, s.window_q, &search, s.window_budget)?;
            (ModelParams::Hmm(p), serde_json::to_value(d)?)
        }
        (ModelKind::Gaussian, SampleSet::Points(x)) => {
            let cfg = GaussianLearnConfig { sigma: s.sigma_choice()?, search };
            let (p, d) = learn_gaussian_mixture(x, s.rank, s.order, &cfg)?;
            (ModelParams::Gaussian(p), serde_json::to_value(d)?)
        }
        _ => bail!("samples do not match model kind {}", kind.name()),
    })
}

pub fn learn(
    o: &Overrides,
    s: &Settings,
    kind: ModelKind,
    input: Option<&Path>,
    truth_path: Option<&Path>,
) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let truth = truth_path.map(|p| read_truth(p, kind)).transpose()?;
    let samples = match (input, &truth) {
        (Some(p), _) => read_samples(kind, p, truth.as_ref())?,
        (None, Some(t)) => generate_samples(t, s, s.samples, s.seed)?,
        (None, None) => bail!("learn needs --input samples or --truth parameters to sample from"),
    };
    let (params, diagnostics) = learn_from(kind, &samples, s)?;
    let mut output = Map::new();
    output.insert("params".into(), serde_json::to_value(&params)?);
    output.insert("diagnostics".into(), diagnostics);
    if let Some(t) = &truth {
        output.insert("alignment".into(), serde_json::to_value(score(t, &params)?)?);
    }
    let inputs = json!({
        "model": kind.name(),
        "samples": input.map(path_value),
        "truth": truth_path.map(path_value),
        "sample_count": samples.len(),
    });
    emit(o, s, "learn", inputs, Value::Object(output), start)?;
    Ok(Outcome::Success)
}

fn median(v: &mut [f64]) -> f64 {
    let mut f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        return f64::NAN;
    }
    f.sort_by(f64::total_cmp);
    let m = f.len() / 2;
    if f.len() % 2 == 1 {
        f[m]
    } else {
        0.5 * (f[m - 1] + f[m])
    }
}

/// One CSV row per sample size; replication `k` uses the same data seed at
/// every size, and failed runs are recorded as `NaN` and left out of the
/// medians.
pub fn sweep(o: &Overrides, s: &Settings, kind: ModelKind, truth_path: &Path) -> anyhow::Result<Outcome> {
    if s.n_grid.is_empty() || s.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        bail!("--n-grid must be a nonempty ascending list");
    }
    if s.replications == 0 {
        bail!("--replications must be positive");
    }
    let truth = read_truth(truth_path, kind)?;
    let mut names: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for &n in &s.n_grid {
        let mut maxes = Vec::with_capacity(s.replications);
        let mut parts: Vec<Vec<f64>> = Vec::new();
        for k in 0..s.replications {
            let samples = generate_samples(&truth, s, n, replication_seed(s.seed, k as u64))?;
            let scored = learn_from(kind, &samples, s).and_then(|(est, _)| score(&truth, &est));
            match scored {
                Ok(sc) => {
                    let p = sc.parts();
                    names.get_or_insert_with(|| p.iter().map(|(n, _)| n.clone()).collect());
                    parts.push(p.into_iter().map(|(_, x)| x).collect());
                    maxes.push(sc.max);
                }
                Err(e) => {
                    eprintln!("warning: N={n} replication {} failed: {e:#}", k + 1);
                    maxes.push(f64::NAN);
                }
            }
        }
        rows.push((n, maxes, parts));
    }
    let names = names.unwrap_or_default();
    let mut wr = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["n".to_string(), "replications".into(), "median_error".into()];
    head.extend(names.iter().map(|p| format!("median_{p}")));
    head.extend((1..=s.replications).map(|k| format!("rep_{k}")));
    wr.write_record(&head)?;
    for (n, mut maxes, parts) in rows {
        let mut rec = vec![n.to_string(), s.replications.to_string(), median(&mut maxes).to_string()];
        for i in 0..names.len() {
            let mut col: Vec<f64> = parts.iter().map(|p| p[i]).collect();
            rec.push(median(&mut col).to_string());
        }
        rec.extend(maxes.iter().map(|x| x.to_string()));
        wr.write_record(&rec)?;
    }
    let text = String::from_utf8(wr.into_inner()?)?;
    write_text(o.out.as_deref(), &text)?;
    Ok(Outcome::Success)
}

fn random_cp(s: &Settings) -> anyhow::Result<Cp> {
    if s.order < 2 || s.dim == 0 {
        bail!("generate cp needs --order ≥ 2 and --dim ≥ 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let factors = (0..s.order)
        .map(|_| {
            let mut m = DMatrix::from_fn(s.dim, s.rank, |_, _| StandardNormal.sample(&mut rng));
            for mut c in m.column_iter_mut() {
                let n = c.norm();
                c /= n;
            }
            m
        })
        .collect();
    Ok(Cp::new(factors)?)
}

fn noisy_tensor(cp: &Cp, eta: f64, seed: u64) -> anyhow::Result<Tensor> {
    let t = cp.expand()?;
    if eta == 0.0 {
        return Ok(t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = DVector::<f64>::from_fn(t.len(), |_, _| StandardNormal.sample(&mut rng));
    let scale = eta / noise.norm();
    let data = t.data().iter().zip(noise.iter()).map(|(a, b)| a + scale * b).collect();
    Ok(Tensor::new(t.shape().to_vec(), data)?)
}

pub fn generate(o: &Overrides, s: &Settings, kind: GenerateKind, truth_path: Option<&Path>) -> anyhow::Result<Outcome> {
    let need_truth = || truth_path.context("this generator needs --truth");
    match kind {
        GenerateKind::Cp => write_text(o.out.as_deref(), &(random_cp(s)?.to_json_string()? + "\n"))?,
        GenerateKind::Tensor => {
            let p = need_truth()?;
            let cp = Cp::read_json(p).with_context(|| format!("reading {}", p.display()))?;
            let t = noisy_tensor(&cp, s.eta, s.seed)?;
            write_text(o.out.as_deref(), &(t.to_json_string()? + "\n"))?;
        }
        model => {
            let model = match model {
                GenerateKind::Multiview => ModelKind::Multiview,
                GenerateKind::Topic => ModelKind::Topic,
                GenerateKind::Hmm => ModelKind::Hmm,
                _ => ModelKind::Gaussian,
            };
            let truth = read_truth(need_truth()?, model)?;
            let set = generate_samples(&truth, s, s.samples, s.seed)?;
            match &o.out {
                Some(p) => set.write(p)?,
                None => {
                    let mut buf = Vec::new();
                    match &set {
                        SampleSet::Views(v) => io::write_multiview(&mut buf, v)?,
                        SampleSet::Sequences(q) => io::write_sequences(&mut buf, q)?,
                        SampleSet::Points(x) => io::write_points(&mut buf, x)?,
                    }
                    write_text(None, &String::from_utf8(buf)?)?;
                }
            }
        }
    }
    Ok(Outcome::Success)
}

pub fn show_config(o: &Overrides, s: &Settings) -> anyhow::Result<Outcome> {
    write_text(o.out.as_deref(), &(serde_json::to_string_pretty(s)? + "\n"))?;
    Ok(Outcome::Success)
}
