//! Evaluation over a seeded prompt set and the report format.
//!
//! Text form, one block per category (`all` first):
//!
//! ```text
//! [all]
//! samples: 9
//! nexus_lite: 0.41
//! prompt_follow: 0.33
//! ref_wins_conflict: 0.67
//! ```
//!
//! Flat form: one `category metric value` line per metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::Guidance;
use crate::rng;
use crate::synthdata::{build_corpus, Manifest, Mode};

use super::config::RunConfig;
use super::metrics::{follows_prompt, nexus_lite, ref_wins};
use super::model::{Corpus, Model};

/// The evaluation manifest a config describes: `eval_prompts` full-tier
/// records cycling through `eval_modes`.
pub fn eval_manifest(config: &RunConfig) -> Result<Manifest> {
    build_corpus(0, config.eval_prompts, &config.eval_modes, &config.geometry(), config.eval_seed)
}

/// How the generator is conditioned during evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalConditioning {
    /// Classifier-free guidance at the given scale.
    Guided(f64),
    /// Null conditioning only, one evaluation per step.
    Null,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub conditioning: EvalConditioning,
}

impl EvalOptions {
    /// Guided sampling at the config's scale and step count over
    /// `eval_seeds` seeds.
    pub fn from_config(config: &RunConfig) -> Self {
        EvalOptions {
            seeds: (0..config.eval_seeds as u64).collect(),
            steps: config.steps,
            conditioning: EvalConditioning::Guided(config.cfg_scale),
        }
    }
}

/// Metrics of one generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub index: usize,
    pub seed: u64,
    pub mode: Mode,
    pub nexus_lite: f64,
    pub prompt_follow: bool,
    /// Only for conflict samples.
    pub ref_wins: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub samples: usize,
    pub nexus_lite: f64,
    pub prompt_follow: f64,
    pub ref_wins_conflict: Option<f64>,
}

impl CategoryMetrics {
    fn of(items: &[&SampleEval]) -> Self {
        let n = items.len().max(1) as f64;
        let conflicts: Vec<bool> = items.iter().filter_map(|s| s.ref_wins).collect();
        CategoryMetrics {
            samples: items.len(),
            nexus_lite: items.iter().map(|s| s.nexus_lite).sum::<f64>() / n,
            prompt_follow: items.iter().filter(|s| s.prompt_follow).count() as f64 / n,
            ref_wins_conflict: (!conflicts.is_empty())
                .then(|| conflicts.iter().filter(|&&w| w).count() as f64 / conflicts.len() as f64),
        }
    }
}

/// Aggregated metrics: `all` plus one entry per sample mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub categories: BTreeMap<String, CategoryMetrics>,
}

pub const ALL: &str = "all";

impl EvalReport {
    pub fn from_samples(samples: &[SampleEval]) -> Self {
        let mut categories = BTreeMap::new();
        categories.insert(ALL.to_string(), CategoryMetrics::of(&samples.iter().collect::<Vec<_>>()));
        for m in Mode::ALL {
            let items: Vec<&SampleEval> = samples.iter().filter(|s| s.mode == m).collect();
            if !items.is_empty() {
                categories.insert(m.name().to_string(), CategoryMetrics::of(&items));
            }
        }
        EvalReport { categories }
    }

    pub fn overall(&self) -> &CategoryMetrics {
        &self.categories[ALL]
    }

    fn ordered(&self) -> impl Iterator<Item = (&String, &CategoryMetrics)> {
        let all = self.categories.get_key_value(ALL);
        all.into_iter().chain(self.categories.iter().filter(|(k, _)| k.as_str() != ALL))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, m) in self.ordered() {
            let _ = writeln!(s, "[{name}]");
            let _ = writeln!(s, "samples: {}", m.samples);
            let _ = writeln!(s, "nexus_lite: {}", m.nexus_lite);
            let _ = writeln!(s, "prompt_follow: {}", m.prompt_follow);
            if let Some(r) = m.ref_wins_conflict {
                let _ = writeln!(s, "ref_wins_conflict: {r}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Config { line, msg: msg.to_string() };
        let mut categories = BTreeMap::new();
        let mut current: Option<(String, BTreeMap<String, String>)> = None;
        let finish = |cur: Option<(String, BTreeMap<String, String>)>,
                      out: &mut BTreeMap<String, CategoryMetrics>|
         -> Result<()> {
            let Some((name, kv)) = cur else { return Ok(()) };
            let num = |k: &str| -> Result<f64> {
                kv.get(k)
                    .ok_or_else(|| Error::format("report", format!("[{name}] missing {k}")))?
                    .parse()
                    .map_err(|_| Error::format("report", format!("[{name}] bad {k}")))
            };
            let m = CategoryMetrics {
                samples: num("samples")? as usize,
                nexus_lite: num("nexus_lite")?,
                prompt_follow: num("prompt_follow")?,
                ref_wins_conflict: kv.contains_key("ref_wins_conflict").then(|| num("ref_wins_conflict")).transpose()?,
            };
            out.insert(name, m);
            Ok(())
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                finish(current.take(), &mut categories)?;
                current = Some((name.to_string(), BTreeMap::new()));
            } else {
                let (k, v) = line.split_once(':').ok_or_else(|| bad(n + 1, "expected `metric: value`"))?;
                let cur = current.as_mut().ok_or_else(|| bad(n + 1, "metric outside a category"))?;
                cur.1.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        finish(current, &mut categories)?;
        if !categories.contains_key(ALL) {
            return Err(Error::format("report", "missing [all] block"));
        }
        Ok(EvalReport { categories })
    }

    /// `category metric value` lines.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (name, m) in self.ordered() {
            let _ = writeln!(s, "{name} samples {}", m.samples);
            let _ = writeln!(s, "{name} nexus_lite {}", m.nexus_lite);
            let _ = writeln!(s, "{name} prompt_follow {}", m.prompt_follow);
            if let Some(r) = m.ref_wins_conflict {
                let _ = writeln!(s, "{name} ref_wins_conflict {r}");
            }
        }
        s
    }

    pub fn parse_table(text: &str) -> Result<Self> {
        let mut blocks: BTreeMap<String, String> = BTreeMap::new();
        let mut order = Vec::new();
        for (n, line) in text.lines().map(str::trim).enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [cat, metric, value] = f[..] else {
                return Err(Error::Config { line: n + 1, msg: "expected `category metric value`".into() });
            };
            if !blocks.contains_key(cat) {
                order.push(cat.to_string());
            }
            let b = blocks.entry(cat.to_string()).or_default();
            let _ = writeln!(b, "{metric}: {value}");
        }
        let text: String = order.iter().map(|c| format!("[{c}]\n{}", blocks[c])).collect();
        Self::parse(&text)
    }
}

/// Generates and scores one video per (record, seed).
pub fn evaluate_samples(model: &Model, manifest: &Manifest, options: &EvalOptions) -> Result<Vec<SampleEval>> {
    let corpus = Corpus::new(manifest.clone());
    let jobs: Vec<(usize, u64)> =
        manifest.records.iter().flat_map(|r| options.seeds.iter().map(move |&s| (r.index, s))).collect();
    jobs.par_iter()
        .map(|&(index, seed)| {
            let sample = corpus.sample(model, index)?;
            let bundle = model.encode_condition(&sample.prompt_tokens, &sample.ref_images)?;
            let (bundle, guidance) = match options.conditioning {
                EvalConditioning::Guided(w) => (bundle, Guidance::Cfg(w)),
                EvalConditioning::Null => (bundle.to_null(), Guidance::Single { conditional: true }),
            };
            let noise_seed = rng::derive_seed(&[model.config.eval_seed, seed, index as u64]);
            let latent = model.sample_latent(&bundle, guidance, noise_seed, options.steps)?;
            let video = model.decode(&latent)?;
            let colors: Vec<_> = sample.subjects.iter().map(|s| s.color).collect();
            let dirs: Vec<_> = sample.subjects.iter().map(|s| s.direction()).collect();
            let min_area = model.config.min_area;
            let nexus = nexus_lite(&model.encoders, &video, &sample.ref_images, &colors, min_area)?;
            let ref_wins = match sample.mode {
                Mode::Conflict => Some(ref_wins(&video, colors[0], sample.prompt_colors[0])?),
                _ => None,
            };
            Ok(SampleEval {
                index,
                seed,
                mode: sample.mode,
                nexus_lite: nexus.score,
                prompt_follow: follows_prompt(&video, &colors, &dirs, min_area)?,
                ref_wins,
            })
        })
        .collect()
}

pub fn evaluate(model: &Model, manifest: &Manifest, options: &EvalOptions) -> Result<EvalReport> {
    Ok(EvalReport::from_samples(&evaluate_samples(model, manifest, options)?))
}
