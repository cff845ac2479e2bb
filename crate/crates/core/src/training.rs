//! Episodic training and evaluation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{param_seed, ParamStore, Tape, Tensor};
use crate::episodes::{sample_episode, Dataset, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub learning_rate: f64,
    /// Episodes whose gradients are averaged into one step.
    pub accumulate_every: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seed of the training and evaluation episode streams.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            learning_rate: 0.02,
            accumulate_every: 16,
            eval_every: 500,
            eval_episodes: 200,
            ways: 5,
            shots: 5,
            queries_per_class: 1,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("episodes", self.episodes),
            ("accumulate_every", self.accumulate_every),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{what} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(
                "momentum must lie in [0, 1) and weight decay must be non-negative".into(),
            ));
        }
        self.train_spec().validate()
    }

    pub fn train_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            ways: self.ways,
            shots: self.shots,
            queries_per_class: self.queries_per_class,
            seed: self.seed,
        }
    }

    /// Episode stream used for the periodic evaluations, disjoint from the
    /// training stream.
    pub fn eval_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            seed: param_seed(self.seed, "eval"),
            ..self.train_spec()
        }
    }
}

/// Plain SGD; momentum and L2 weight decay are optional and off by default.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `θ ← θ − lr·(g / window)` for every parameter, then zeroes the
    /// gradients. Nothing is updated if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, window: usize) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient { param: p.name.clone() });
        }
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        let inv = 1.0 / window as f64;
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for ((w, &g), v) in value.iter_mut().zip(grad).zip(vel.data_mut()) {
                let g = g * inv + self.weight_decay * *w;
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// One plain SGD step over a single window: `θ ← θ − lr·g`.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    Sgd::default().step(store, lr, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
    /// Scored queries; the confidence interval uses this count.
    pub predictions: usize,
    /// `(label, accuracy)` over the queries of each class, by label.
    pub per_class_accuracy: Vec<(u32, f64)>,
}

impl EvalReport {
    fn from_counts(episodes: usize, per_class: &BTreeMap<u32, (usize, usize)>) -> Self {
        let (correct, total) = per_class
            .values()
            .fold((0, 0), |(c, t), &(ci, ti)| (c + ci, t + ti));
        let accuracy = correct as f64 / total as f64;
        Self {
            accuracy,
            ci95: 1.96 * (accuracy * (1.0 - accuracy) / total as f64).sqrt(),
            episodes,
            predictions: total,
            per_class_accuracy: per_class
                .iter()
                .map(|(&l, &(c, t))| (l, c as f64 / t as f64))
                .collect(),
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy {:.4} ± {:.4} over {} episodes ({} queries)",
            self.accuracy, self.ci95, self.episodes, self.predictions
        )
    }
}

/// Accuracy of `model` on `episodes` episodes drawn from `dataset`.
/// The prediction for each query is the argmax of its TRM logits.
pub fn evaluate(dataset: &Dataset, model: &Model, spec: &EpisodeSpec, episodes: usize) -> Result<EvalReport> {
    spec.validate()?;
    if episodes == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for counter in 0..episodes {
        let episode = sample_episode(dataset, spec, counter as u64)?;
        let predicted = model.predict(&episode)?;
        for (query, guess) in episode.queries.iter().zip(predicted) {
            let slot = per_class.entry(query.clip.label).or_default();
            slot.0 += usize::from(guess == query.target);
            slot.1 += 1;
        }
    }
    Ok(EvalReport::from_counts(episodes, &per_class))
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Training episodes completed.
    pub episode: usize,
    pub accuracy: f64,
    pub ci95: f64,
    /// Mean TRM loss over the training episodes since the previous row.
    pub loss_tm: f64,
    pub loss_qc: f64,
}

impl MetricRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.episode, self.accuracy, self.ci95, self.loss_tm, self.loss_qc
        )
    }
}

pub fn metrics_log(rows: &[MetricRow]) -> String {
    rows.iter().map(|r| r.to_line() + "\n").collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
    /// The evaluation behind the last metric row.
    pub final_report: EvalReport,
}

/// Trains a fresh model on episodes from `train_set`, evaluating on
/// `eval_set` every `eval_every` episodes and after the last one.
///
/// `on_row` sees every metric row as soon as it is produced.
pub fn train(
    train_set: &Dataset,
    eval_set: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = Model::init(model_config.clone())?;
    let spec = config.train_spec();
    let eval_spec = config.eval_spec();
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut metrics = Vec::new();
    let (mut sum_tm, mut sum_qc, mut seen) = (0.0, 0.0, 0usize);
    let mut pending = 0;
    let mut last_report = None;
    for i in 0..config.episodes {
        let episode = sample_episode(train_set, &spec, i as u64)?;
        let mut tape = Tape::new();
        let out = model.forward_episode(&mut tape, &episode, true)?;
        let loss = tape.value(out.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        tape.backward(out.loss)?.accumulate_into(&mut model.store);
        sum_tm += out.loss_tm;
        sum_qc += out.loss_qc;
        seen += 1;
        pending += 1;
        if pending == config.accumulate_every || i + 1 == config.episodes {
            opt.step(&mut model.store, config.learning_rate, pending)?;
            pending = 0;
        }
        let done = i + 1;
        if done % config.eval_every == 0 || done == config.episodes {
            let report = evaluate(eval_set, &model, &eval_spec, config.eval_episodes)?;
            let row = MetricRow {
                episode: done,
                accuracy: report.accuracy,
                ci95: report.ci95,
                loss_tm: sum_tm / seen as f64,
                loss_qc: sum_qc / seen as f64,
            };
            on_row(&row);
            metrics.push(row);
            last_report = Some(report);
            (sum_tm, sum_qc, seen) = (0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        final_report: last_report.expect("the last episode always evaluates"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_example() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(vec![1.0]));
        s.get_mut(id).grad = Tensor::vector(vec![2.0]);
        sgd_step(&mut s, 0.1).unwrap();
        assert!((s.get(id).value.item() - 0.8).abs() < 1e-15);
        assert_eq!(s.get(id).grad.item(), 0.0);
    }

    #[test]
    fn window_mean_matches_single_step() {
        let mut a = ParamStore::new();
        let ia = a.insert("w", Tensor::vector(vec![1.0, -1.0]));
        let mut b = a.clone();
        let g = Tensor::vector(vec![0.3, 0.7]);
        a.get_mut(ia).grad.add_scaled(&g, 1.0);
        a.get_mut(ia).grad.add_scaled(&g, 1.0);
        Sgd::default().step(&mut a, 0.5, 2).unwrap();
        b.get_mut(ia).grad.add_scaled(&g, 1.0);
        Sgd::default().step(&mut b, 0.5, 1).unwrap();
        assert_eq!(a.get(ia).value, b.get(ia).value);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = ParamStore::new();
        s.insert("ok", Tensor::vector(vec![1.0]));
        let bad = s.insert("bad", Tensor::vector(vec![1.0]));
        s.get_mut(bad).grad = Tensor::vector(vec![f64::NAN]);
        match sgd_step(&mut s, 0.1) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "bad"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.get(bad).value.item(), 1.0);
    }

    #[test]
    fn report_interval() {
        let mut counts = BTreeMap::new();
        counts.insert(0, (3, 4));
        counts.insert(1, (1, 4));
        let r = EvalReport::from_counts(4, &counts);
        assert_eq!(r.accuracy, 0.5);
        assert!((r.ci95 - 1.96 * (0.25f64 / 8.0).sqrt()).abs() < 1e-15);
        assert_eq!(r.per_class_accuracy, vec![(0, 0.75), (1, 0.25)]);
    }
}
