//! RMSProp training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chargrid::CharVocab;
use crate::error::{Error, Result};
use crate::funsd::FormDocument;
use crate::loss::{total_loss, LossBreakdown};
use crate::model::{augmented, prepare, save_weights, Model, Prepared, RunConfig, WEIGHTS_FILE};
use crate::net::Net;
use crate::tensor::{Graph, NdArray};

/// Parameters plus RMSProp state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub run: RunConfig,
    pub net: Net,
    pub params: Vec<NdArray<f32>>,
    mean_sq: Vec<Vec<f32>>,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let net = Net::new(run.net.clone())?;
        let params = net.init_params(run.train.seed);
        let mean_sq = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Ok(Trainer {
            run,
            net,
            params,
            mean_sq,
        })
    }

    /// Loss and parameter gradients of one sample.
    pub fn sample_gradient(&self, s: &Prepared) -> Result<(Vec<NdArray<f32>>, LossBreakdown)> {
        let mut g = Graph::<f32>::new();
        let vars = self.net.load(&mut g, &self.params);
        let out = self.net.forward(&mut g, &vars, &s.grid.cells, s.grid.height, s.grid.width)?;
        let (loss, b) = total_loss(&mut g, &out, &s.targets, &self.run.loss)?;
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| NdArray::zeros(p.shape())))
            .collect();
        Ok((grads, b))
    }

    /// One RMSProp update with gradients averaged over `batch`. Parameters
    /// are left untouched when any loss term or gradient is not finite.
    pub fn step(&mut self, batch: &[&Prepared], lr: f64) -> Result<LossBreakdown> {
        let scale = 1.0 / batch.len() as f64;
        let mut sum: Vec<Vec<f32>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut mean = LossBreakdown::default();
        for s in batch {
            let (grads, b) = self.sample_gradient(s)?;
            for (acc, gr) in sum.iter_mut().zip(&grads) {
                for (a, &v) in acc.iter_mut().zip(gr.data()) {
                    *a += v;
                }
            }
            mean.accumulate(&b, scale);
        }
        if sum.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { term: "gradient" });
        }
        let (rho, eps, lr) = (self.run.train.rho as f32, self.run.train.eps as f32, lr as f32);
        let s = scale as f32;
        for ((p, ms), gsum) in self.params.iter_mut().zip(&mut self.mean_sq).zip(&sum) {
            for ((w, m), &gs) in p.data_mut().iter_mut().zip(ms.iter_mut()).zip(gsum) {
                let gr = gs * s;
                *m = rho * *m + (1.0 - rho) * gr * gr;
                *w -= lr * gr / (m.sqrt() + eps);
            }
        }
        Ok(mean)
    }

    pub fn into_model(self, vocab: CharVocab) -> Result<Model> {
        Model::new(self.run, vocab, self.params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!("epoch={} lr={:.8} {}", self.epoch + 1, self.lr, self.loss.key_values())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochLog>,
}

/// Train on `forms`. With `out` set, the run config, vocabulary and an
/// initial checkpoint are written before the first epoch and the checkpoint
/// is replaced every `checkpoint_every` epochs and at the end. A non-finite
/// loss aborts the run, leaving the last checkpoint in place. Each log line
/// is passed to `log` as it is produced.
pub fn train(
    forms: &[FormDocument],
    vocab: &CharVocab,
    run: &RunConfig,
    out: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    if forms.is_empty() {
        return Err(Error::Config("no training forms".into()));
    }
    let mut run = run.clone();
    run.net.n_char = vocab.len();
    let mut trainer = Trainer::new(run.clone())?;
    let tc = run.train.clone();
    log(&format!("schedule {}", tc.schedule_formula()));
    log(&format!(
        "setup forms={} parameters={} batch_size={} epochs={} seed={}",
        forms.len(),
        trainer.net.n_parameters(),
        tc.batch_size,
        tc.epochs,
        tc.seed
    ));
    if let Some(dir) = out {
        Model::new(run.clone(), vocab.clone(), trainer.params.clone())?.save(dir)?;
    }

    let fixed: Option<Vec<Prepared>> = if tc.augments() {
        None
    } else {
        Some(forms.iter().map(|f| prepare(f, vocab, &run)).collect::<Result<_>>()?)
    };
    let mut epochs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = tc.learning_rate(epoch);
        let fresh: Vec<Prepared>;
        let samples: &[Prepared] = match &fixed {
            Some(v) => v,
            None => {
                fresh = forms
                    .iter()
                    .enumerate()
                    .map(|(i, f)| prepare(&augmented(f, vocab, &run, epoch, i)?, vocab, &run))
                    .collect::<Result<_>>()?;
                &fresh
            }
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(epoch as u64 + 1)));
        let mut mean = LossBreakdown::default();
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &samples[i]).collect();
            let b = match trainer.step(&batch, lr) {
                Ok(b) => b,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    log(&format!("abort epoch={} reason=\"{e}\"", epoch + 1));
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            mean.accumulate(&b, chunk.len() as f64 / samples.len() as f64);
        }
        let entry = EpochLog { epoch, lr, loss: mean };
        log(&entry.line());
        epochs.push(entry);
        if let Some(dir) = out {
            let last = epoch + 1 == tc.epochs;
            if last || (tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0) {
                save_weights(&trainer.net, &trainer.params, &dir.join(WEIGHTS_FILE))?;
                log(&format!("checkpoint epoch={}", epoch + 1));
            }
        }
    }
    Ok(TrainOutcome {
        model: trainer.into_model(vocab.clone())?,
        epochs,
    })
}
