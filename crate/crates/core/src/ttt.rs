//! Test-time training on a single image.
//!
//! Each run starts from freshly initialised weights, reads the teacher's
//! target once from the bundle, then for a fixed number of iterations fires
//! every column, keeps a running average of the features, backpropagates an
//! L2 loss against the target and takes one Adam step. The final average is
//! classified against the bundle's class bank by cosine similarity.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_trigger, QuerySource};
use crate::engine::{backward_pass, forward_pass, PassGradients, Upstream, Workers};
use crate::error::{Error, Result};
use crate::grad::{adam_step, AdamState};
use crate::net::{init_params, ApmParams, ModelSpec};
use crate::teacher_io::{normalize_image, DistilledBundle};
use crate::tensor::{cosine_similarity, Tensor};

/// Streaming mean `f_avg ← (n·f_avg + f) / (n + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningAverage {
    count: usize,
    value: Vec<f64>,
}

impl RunningAverage {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            value: vec![0.0; dim],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }

    pub fn value(&self) -> Result<Tensor> {
        if self.count == 0 {
            return Err(Error::EmptyAverage);
        }
        Ok(Tensor::vector(self.value.clone()))
    }

    pub fn update(&mut self, f: &[f64]) -> Result<()> {
        if f.len() != self.value.len() {
            return Err(Error::dim("running_average", &[f.len()], &[self.value.len()]));
        }
        let n = self.count as f64;
        for (a, &x) in self.value.iter_mut().zip(f) {
            *a = (n * *a + x) / (n + 1.0);
        }
        self.count += 1;
        Ok(())
    }
}

pub fn update_running_average(mut ra: RunningAverage, f: &Tensor) -> Result<RunningAverage> {
    ra.update(f.data())?;
    Ok(ra)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean squared error between two feature vectors.
pub fn ttt_loss(f_avg: &Tensor, f_cls: &Tensor) -> Result<f64> {
    if f_avg.len() != f_cls.len() || f_avg.is_empty() {
        return Err(Error::dim("ttt_loss", f_avg.shape(), f_cls.shape()));
    }
    Ok(mse(f_avg.data(), f_cls.data()))
}

/// Class embedding bank: one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBank {
    embeddings: Tensor,
    names: Vec<String>,
}

impl ClassBank {
    pub fn new(embeddings: Tensor, names: Vec<String>) -> Result<Self> {
        let (n, d) = match embeddings.shape() {
            [n, d] if *n > 0 && *d > 0 => (*n, *d),
            other => return Err(Error::dim("class_bank", other, &[names.len(), 0])),
        };
        if names.len() != n {
            return Err(Error::Config(format!("{} class names for {n} embeddings", names.len())));
        }
        let bank = Self { embeddings, names };
        for k in 0..n {
            let row = bank.row(k);
            if !row.iter().all(|v| v.is_finite()) || row.iter().all(|&v| v == 0.0) {
                return Err(Error::Config(format!("class {k} has a zero or non-finite embedding")));
            }
        }
        let _ = d;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.embeddings.data()[k * d..(k + 1) * d]
    }
}

/// Cosine scores against every class and the best index (lowest on ties).
pub fn classify(f_avg: &Tensor, bank: &ClassBank) -> Result<(usize, Vec<f64>)> {
    if f_avg.len() != bank.dim() {
        return Err(Error::dim("classify", f_avg.shape(), &[bank.dim()]));
    }
    let mut scores = Vec::with_capacity(bank.len());
    for k in 0..bank.len() {
        let row = Tensor::vector(bank.row(k).to_vec());
        scores.push(cosine_similarity(f_avg, &row).map_err(|e| match e {
            Error::Degenerate(_) => Error::Degenerate("classify"),
            other => other,
        })?);
    }
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    Ok((best, scores))
}

/// Which teacher signal every column is regressed onto.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// The CLS token, for every column.
    #[default]
    Cls,
    /// The bundle's per-location grid.
    Grid,
}

/// How column losses combine into the optimised objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `Σ_ij MSE(f_ij, target_ij)`, one pass per iteration.
    #[default]
    ColumnSum,
    /// `MSE(f_avg, f_cls)` exactly: an averaging pass, then a backward pass.
    Averaged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TttConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub reinit_per_sample: bool,
    pub workers: usize,
    pub target: TargetMode,
    pub loss: LossMode,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            lr: 1e-4,
            seed: 42,
            reinit_per_sample: true,
            workers: 1,
            target: TargetMode::Cls,
            loss: LossMode::ColumnSum,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if self.target == TargetMode::Grid && self.loss == LossMode::Averaged {
            return Err(Error::Config("grid targets need the column-sum loss".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub index: usize,
    pub label: String,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TttReport {
    /// `MSE(f_avg, f_cls)` at every iteration, before that iteration's step.
    pub losses: Vec<f64>,
    /// The optimised objective at every iteration.
    pub objective: Vec<f64>,
    /// Running average from the last completed iteration.
    pub f_avg: Vec<f64>,
    pub prediction: Option<Prediction>,
}

/// What an observer sees after each iteration's Adam step.
pub struct IterationEvent<'a> {
    pub iteration: usize,
    pub loss: f64,
    pub objective: f64,
    pub f_avg: &'a Tensor,
    pub target: &'a Tensor,
    pub params: &'a ApmParams,
}

/// Holds weights across samples when per-sample reinitialisation is off.
pub struct TttSession {
    spec: ModelSpec,
    cfg: TttConfig,
    params: ApmParams,
    runs: usize,
}

impl TttSession {
    pub fn new(spec: &ModelSpec, cfg: &TttConfig) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        Ok(Self {
            spec: spec.clone(),
            cfg: cfg.clone(),
            params: init_params(spec, cfg.seed),
            runs: 0,
        })
    }

    pub fn params(&self) -> &ApmParams {
        &self.params
    }

    pub fn run(&mut self, image: &Tensor, bundle: &DistilledBundle) -> Result<TttReport> {
        self.run_observed(image, bundle, |_| {})
    }

    /// `image` holds `[0, 1]` pixels (`3×h×w`). A fresh optimizer state is
    /// used for every sample.
    pub fn run_observed(
        &mut self,
        image: &Tensor,
        bundle: &DistilledBundle,
        mut observer: impl FnMut(&IterationEvent<'_>),
    ) -> Result<TttReport> {
        if self.cfg.reinit_per_sample && self.runs > 0 {
            self.params = init_params(&self.spec, self.cfg.seed);
        }
        self.runs += 1;

        let enc = &self.spec.encoder;
        let dc = self.spec.arch.feature_dim;
        if bundle.d_c() != dc || bundle.cls.len() != dc {
            return Err(Error::Config(format!(
                "bundle d_c {} does not match model d_c {dc}",
                bundle.d_c()
            )));
        }
        if let Some(bank) = &bundle.classes {
            if bank.dim() != dc {
                return Err(Error::dim("class_bank", &[bank.dim()], &[dc]));
            }
        }
        // the teacher is consulted once: targets are read here and only here
        let cls = bundle.cls_vector();
        let (gh, gw) = enc.grid();
        let target: Tensor = match self.cfg.target {
            TargetMode::Cls => cls.clone(),
            TargetMode::Grid => {
                let grid = bundle
                    .grid
                    .as_ref()
                    .ok_or_else(|| Error::Config("grid targets requested but bundle has no grid".into()))?;
                if grid.shape() != [gh, gw, dc] {
                    return Err(Error::dim("grid_target", grid.shape(), &[gh, gw, dc]));
                }
                grid.clone()
            }
        };
        let per_cell = self.cfg.target == TargetMode::Grid;
        let x = normalize_image(image)?;
        let workers = Workers::new(self.cfg.workers)?;
        let mut adam = AdamState::new(&self.params);
        let n_cols = (gh * gw) as f64;

        let mut report = TttReport {
            losses: Vec::with_capacity(self.cfg.iterations),
            objective: Vec::with_capacity(self.cfg.iterations),
            f_avg: Vec::new(),
            prediction: None,
        };

        for it in 0..self.cfg.iterations {
            let params = &self.params;
            let trigger = encode_trigger(&x, &params.conv_kernel, enc)?;
            let source = QuerySource::new(&trigger, enc, &x);
            let mut avg = RunningAverage::new(dc);
            let mut pass = PassGradients::new(params, enc);
            let objective = match self.cfg.loss {
                LossMode::ColumnSum => {
                    let t = target.data();
                    let mut objective = 0.0;
                    backward_pass(
                        params,
                        &source,
                        false,
                        &workers,
                        |idx, fired| {
                            let goal = if per_cell { &t[idx * dc..(idx + 1) * dc] } else { t };
                            let up = fired
                                .feature
                                .iter()
                                .zip(goal)
                                .map(|(f, g)| 2.0 * (f - g) / dc as f64)
                                .collect();
                            let loss = mse(&fired.feature, goal);
                            Ok((Upstream { feature: Some(up), rgb: None }, loss))
                        },
                        |_, fired, loss, col| {
                            avg.update(&fired.feature)?;
                            objective += loss;
                            pass.add(&col);
                            Ok(())
                        },
                    )?;
                    objective
                }
                LossMode::Averaged => {
                    forward_pass(params, &source, false, &workers, |_, fired| avg.update(&fired.feature))?;
                    let mean = avg.value()?;
                    let up: Vec<f64> = mean
                        .data()
                        .iter()
                        .zip(cls.data())
                        .map(|(f, g)| 2.0 * (f - g) / (dc as f64 * n_cols))
                        .collect();
                    backward_pass(
                        params,
                        &source,
                        false,
                        &workers,
                        |_, _| Ok((Upstream { feature: Some(up.clone()), rgb: None }, ())),
                        |_, _, _, col| {
                            pass.add(&col);
                            Ok(())
                        },
                    )?;
                    ttt_loss(&mean, &cls)?
                }
            };
            let f_avg = avg.value()?;
            let loss = ttt_loss(&f_avg, &cls)?;
            report.losses.push(loss);
            report.objective.push(objective);
            report.f_avg = f_avg.data().to_vec();
            if !loss.is_finite() || !objective.is_finite() {
                return Err(Error::TttDiverged {
                    iteration: it,
                    report: Box::new(report),
                });
            }
            let grads = pass.finish(&x, enc)?;
            adam_step(&mut self.params, &grads, &mut adam, self.cfg.lr)?;
            observer(&IterationEvent {
                iteration: it,
                loss,
                objective,
                f_avg: &f_avg,
                target: &target,
                params: &self.params,
            });
        }

        if let Some(bank) = &bundle.classes {
            let (index, scores) = classify(&Tensor::vector(report.f_avg.clone()), bank)?;
            report.prediction = Some(Prediction {
                index,
                label: bank.names()[index].clone(),
                scores,
            });
        }
        Ok(report)
    }
}

/// One test-time-training run from freshly initialised weights.
pub fn run_ttt(
    spec: &ModelSpec,
    image: &Tensor,
    bundle: &DistilledBundle,
    cfg: &TttConfig,
) -> Result<TttReport> {
    TttSession::new(spec, cfg)?.run(image, bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian, SeededRng};
    use crate::teacher_io::BundleMeta;

    #[test]
    fn running_average_basics() {
        let ra = RunningAverage::new(1);
        assert!(matches!(ra.value(), Err(Error::EmptyAverage)));
        let ra = update_running_average(ra, &Tensor::vector(vec![2.0])).unwrap();
        assert_eq!(ra.value().unwrap().data(), &[2.0]);
        assert_eq!(ra.count(), 1);
        let ra = update_running_average(ra, &Tensor::vector(vec![4.0])).unwrap();
        assert_eq!(ra.value().unwrap().data(), &[3.0]);
        assert!(update_running_average(ra, &Tensor::vector(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn running_average_matches_batch_mean() {
        let mut rng = SeededRng::new(42);
        let xs: Vec<Tensor> = (0..1000).map(|_| gaussian(&mut rng, 16, 0.0, 1.0)).collect();
        let mut ra = RunningAverage::new(16);
        for x in &xs {
            ra.update(x.data()).unwrap();
        }
        let got = ra.value().unwrap();
        for d in 0..16 {
            let mean = xs.iter().map(|x| x.data()[d]).sum::<f64>() / 1000.0;
            let rel = (got.data()[d] - mean).abs() / mean.abs().max(1e-300);
            assert!(rel <= 1e-12 || (got.data()[d] - mean).abs() < 1e-15, "dim {d}: {rel}");
        }
    }

    #[test]
    fn loss_cases() {
        let a = Tensor::vector(vec![0.0, 0.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(ttt_loss(&a, &b).unwrap(), 12.5);
        assert_eq!(ttt_loss(&b, &a).unwrap(), 12.5);
        assert_eq!(ttt_loss(&b, &b).unwrap(), 0.0);
        assert!(ttt_loss(&a, &Tensor::vector(vec![1.0])).is_err());
    }

    fn identity_bank(n: usize) -> ClassBank {
        let mut e = Tensor::zeros(&[n, n]);
        for k in 0..n {
            e.data_mut()[k * n + k] = 1.0;
        }
        ClassBank::new(e, (0..n).map(|k| format!("class_{k}")).collect()).unwrap()
    }

    #[test]
    fn classify_cases() {
        let bank = identity_bank(5);
        let (idx, scores) = classify(&Tensor::vector(bank.row(3).to_vec()), &bank).unwrap();
        assert_eq!(idx, 3);
        assert_eq!(scores[3], 1.0);

        let two = identity_bank(2);
        let (idx, scores) = classify(&Tensor::vector(vec![0.6, 0.8]), &two).unwrap();
        assert_eq!(idx, 1);
        assert!((scores[0] - 0.6).abs() < 1e-15 && (scores[1] - 0.8).abs() < 1e-15);

        let (tie, _) = classify(&Tensor::vector(vec![1.0, 1.0]), &two).unwrap();
        assert_eq!(tie, 0);

        assert!(matches!(
            classify(&Tensor::vector(vec![0.0, 0.0]), &two),
            Err(Error::Degenerate(_))
        ));
        assert!(classify(&Tensor::vector(vec![1.0]), &two).is_err());
    }

    #[test]
    fn classify_scale_and_duplicates() {
        let mut rng = SeededRng::new(7);
        let emb = gaussian(&mut rng, 6 * 4, 0.0, 1.0).reshape(&[6, 4]).unwrap();
        let bank = ClassBank::new(emb.clone(), (0..6).map(|k| k.to_string()).collect()).unwrap();
        for _ in 0..20 {
            let f = gaussian(&mut rng, 4, 0.0, 1.0);
            let (idx, scores) = classify(&f, &bank).unwrap();
            for lambda in [1e-3, 2.0, 1e4] {
                let (i2, s2) = classify(&f.scale(lambda), &bank).unwrap();
                assert_eq!(i2, idx);
                for (a, b) in scores.iter().zip(&s2) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            let mut data = emb.data().to_vec();
            data.extend_from_slice(bank.row(idx));
            let bigger = ClassBank::new(
                Tensor::new(vec![7, 4], data).unwrap(),
                (0..7).map(|k| k.to_string()).collect(),
            )
            .unwrap();
            assert_eq!(classify(&f, &bigger).unwrap().0, idx);
        }
    }

    #[test]
    fn class_bank_validation() {
        assert!(ClassBank::new(Tensor::zeros(&[2, 3]), vec!["a".into(), "b".into()]).is_err());
        assert!(ClassBank::new(Tensor::vector(vec![1.0]), vec!["a".into()]).is_err());
        assert!(ClassBank::new(identity_bank(2).embeddings().clone(), vec!["a".into()]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TttConfig::default().validate().is_ok());
        let bad = [
            TttConfig { iterations: 0, ..Default::default() },
            TttConfig { lr: 0.0, ..Default::default() },
            TttConfig { workers: 0, ..Default::default() },
            TttConfig { target: TargetMode::Grid, loss: LossMode::Averaged, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    fn pixels(seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        let data = (0..3 * 32 * 32).map(|_| rng.next_f64()).collect();
        Tensor::new(vec![3, 32, 32], data).unwrap()
    }

    fn bundle_with(cls: Vec<f64>) -> DistilledBundle {
        let d = cls.len();
        DistilledBundle {
            meta: BundleMeta { d_c: d, teacher: "test".into() },
            cls: Tensor::new(vec![1, d], cls).unwrap(),
            grid: None,
            classes: Some(identity_bank(d)),
        }
    }

    #[test]
    fn fixed_point_leaves_params_unchanged() {
        let spec = ModelSpec::desk();
        let img = pixels(1);
        let cfg = TttConfig { iterations: 1, loss: LossMode::Averaged, ..Default::default() };
        let init = init_params(&spec, cfg.seed);
        // the network's own initial average as target
        let probe = run_ttt(&spec, &img, &bundle_with(vec![0.5; 16]), &cfg).unwrap();
        let mut session = TttSession::new(&spec, &cfg).unwrap();
        let report = session.run(&img, &bundle_with(probe.f_avg.clone())).unwrap();
        assert_eq!(report.losses, vec![0.0]);
        assert_eq!(session.params(), &init);
    }

    #[test]
    fn runs_are_deterministic_and_reinitialise() {
        let spec = ModelSpec::desk();
        let img = pixels(2);
        let mut rng = SeededRng::new(3);
        let b = bundle_with(gaussian(&mut rng, 16, 0.0, 0.25).into_data());
        let cfg = TttConfig { iterations: 3, ..Default::default() };
        let a = run_ttt(&spec, &img, &b, &cfg).unwrap();
        let c = run_ttt(&spec, &img, &b, &cfg).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.losses.len(), 3);

        let mut session = TttSession::new(&spec, &cfg).unwrap();
        assert_eq!(session.run(&img, &b).unwrap(), a);
        assert_eq!(session.run(&img, &b).unwrap(), a);

        let keep = TttConfig { reinit_per_sample: false, ..cfg };
        let mut cont = TttSession::new(&spec, &keep).unwrap();
        assert_eq!(cont.run(&img, &b).unwrap(), a);
        assert_ne!(cont.run(&img, &b).unwrap(), a);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let spec = ModelSpec::desk();
        let img = pixels(4);
        let b = bundle_with(gaussian(&mut SeededRng::new(5), 16, 0.0, 0.25).into_data());
        let one = TttConfig { iterations: 2, ..Default::default() };
        let four = TttConfig { workers: 4, ..one.clone() };
        assert_eq!(run_ttt(&spec, &img, &b, &one).unwrap(), run_ttt(&spec, &img, &b, &four).unwrap());
    }

    #[test]
    fn column_sum_objective_decomposes() {
        // Σ MSE(f_ij, c) = N·MSE(f_avg, c) + Σ MSE(f_ij, f_avg)
        let spec = ModelSpec::desk();
        let img = pixels(6);
        let b = bundle_with(gaussian(&mut SeededRng::new(7), 16, 0.0, 0.25).into_data());
        let cfg = TttConfig { iterations: 1, ..Default::default() };
        let report = run_ttt(&spec, &img, &b, &cfg).unwrap();

        let p = init_params(&spec, 42);
        let x = normalize_image(&img).unwrap();
        let t = encode_trigger(&x, &p.conv_kernel, &spec.encoder).unwrap();
        let src = QuerySource::new(&t, &spec.encoder, &x);
        let feats: Vec<Tensor> = src
            .iter()
            .map(|q| crate::net::forward_column(&p, &q).unwrap().0)
            .collect();
        let avg = Tensor::vector(report.f_avg.clone());
        let spread: f64 = feats.iter().map(|f| ttt_loss(f, &avg).unwrap()).sum();
        let n = feats.len() as f64;
        let expect = n * report.losses[0] + spread;
        assert!((report.objective[0] - expect).abs() <= 1e-12 * expect.abs());
    }

    #[test]
    fn grid_mode_needs_matching_grid() {
        let spec = ModelSpec::desk();
        let img = pixels(8);
        let mut b = bundle_with(vec![0.1; 16]);
        let cfg = TttConfig { iterations: 1, target: TargetMode::Grid, ..Default::default() };
        assert!(run_ttt(&spec, &img, &b, &cfg).is_err());
        b.grid = Some(Tensor::zeros(&[2, 2, 16]));
        assert!(run_ttt(&spec, &img, &b, &cfg).is_err());
        b.grid = Some(Tensor::zeros(&[8, 8, 16]));
        let r = run_ttt(&spec, &img, &b, &cfg).unwrap();
        assert!(r.objective[0] > 0.0);
    }

    #[test]
    fn mismatched_bundle_is_rejected() {
        let spec = ModelSpec::desk();
        let err = run_ttt(&spec, &pixels(1), &bundle_with(vec![1.0; 8]), &TttConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
