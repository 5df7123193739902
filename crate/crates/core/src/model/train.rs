//! Plain cross-entropy gradient descent, used only to manufacture testbed
//! models that exhibit failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{softmax, Cache};
use super::{backward_cache, forward_cache, GradScope, Gradients, ModelConfig, TinyLM};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Rescale the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// Decay the rate linearly to zero over the run.
    #[serde(default)]
    pub linear_decay: bool,
    /// Decoupled weight decay on matrices; norm gains are exempt.
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainOptions {
    pub fn new(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            lr,
            batch_size: 8,
            clip_norm: Some(1.0),
            linear_decay: false,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// A training sequence whose loss counts only the predictions of tokens at
/// positions `scored_from..`. Full-sequence training uses `scored_from = 1`;
/// completion-only training starts at the first target token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainItem {
    pub tokens: Vec<usize>,
    pub scored_from: usize,
}

impl TrainItem {
    pub fn full(tokens: Vec<usize>) -> Self {
        Self {
            tokens,
            scored_from: 1,
        }
    }

    pub fn completion(prompt: &[usize], completion: &[usize]) -> Self {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(completion);
        Self {
            tokens,
            scored_from: prompt.len().max(1),
        }
    }
}

/// Mean cross-entropy over the scored predictions of a cache built from
/// `tokens[..n−1]`, and its logit gradient. `targets[t]` is the token that
/// position `t` predicts; positions before `first` are not scored.
pub(crate) fn sequence_loss_and_dlogits(
    cache: &Cache,
    targets: &[usize],
    first: usize,
) -> (f64, Matrix) {
    let n = cache.len();
    let mut dl = Matrix::zeros(n, cache.logits.cols());
    let mut loss = 0.0;
    let inv = 1.0 / (n - first) as f64;
    for t in first..n {
        let p = softmax(cache.logits.row(t));
        loss -= p[targets[t]].max(f64::MIN_POSITIVE).ln();
        let row = dl.row_mut(t);
        for (o, pi) in row.iter_mut().zip(&p) {
            *o = pi * inv;
        }
        row[targets[t]] -= inv;
    }
    (loss * inv, dl)
}

fn item_loss(model: &TinyLM, item: &TrainItem) -> f64 {
    let s = &item.tokens;
    let cache = forward_cache(model, &s[..s.len() - 1], None);
    sequence_loss_and_dlogits(&cache, &s[1..], item.scored_from - 1).0
}

/// Mean per-item loss.
pub fn items_loss(model: &TinyLM, items: &[TrainItem]) -> Result<f64> {
    let usable = usable_items(model.config(), items)?;
    Ok(usable.iter().map(|it| item_loss(model, it)).sum::<f64>() / usable.len() as f64)
}

/// Mean per-sequence loss over the whole corpus.
pub fn corpus_loss(model: &TinyLM, corpus: &[Vec<usize>]) -> Result<f64> {
    items_loss(model, &full_items(corpus))
}

fn full_items(corpus: &[Vec<usize>]) -> Vec<TrainItem> {
    corpus.iter().cloned().map(TrainItem::full).collect()
}

/// Items truncated to `max_seq + 1` tokens with at least one scored
/// prediction; token ids are validated.
fn usable_items(cfg: &ModelConfig, items: &[TrainItem]) -> Result<Vec<TrainItem>> {
    let mut out = Vec::new();
    for it in items {
        super::tokenizer::check_ids(&it.tokens, cfg.vocab_size)?;
        if it.scored_from == 0 {
            return Err(invalid("scored_from must be at least 1"));
        }
        let len = it.tokens.len().min(cfg.max_seq + 1);
        if len >= 2 && it.scored_from < len {
            out.push(TrainItem {
                tokens: it.tokens[..len].to_vec(),
                scored_from: it.scored_from,
            });
        }
    }
    if out.is_empty() {
        return Err(invalid("corpus has no sequence with a scored prediction"));
    }
    Ok(out)
}

/// Trains a freshly initialized model for `steps` SGD steps at rate `lr`.
pub fn train_toy(
    config: ModelConfig,
    corpus: &[Vec<usize>],
    steps: usize,
    lr: f64,
) -> Result<TinyLM> {
    train_with(config, corpus, &TrainOptions::new(steps, lr)).map(|(m, _)| m)
}

pub fn train_with(
    config: ModelConfig,
    corpus: &[Vec<usize>],
    opts: &TrainOptions,
) -> Result<(TinyLM, TrainReport)> {
    train_items(config, &full_items(corpus), opts)
}

pub fn train_items(
    config: ModelConfig,
    items: &[TrainItem],
    opts: &TrainOptions,
) -> Result<(TinyLM, TrainReport)> {
    if items.is_empty() {
        return Err(invalid("training corpus is empty"));
    }
    if opts.batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let mut model = TinyLM::new(config)?;
    let items = usable_items(model.config(), items)?;
    let initial_loss = items_loss(&model, &items)?;
    if opts.steps == 0 {
        return Ok((
            model,
            TrainReport {
                initial_loss,
                final_loss: initial_loss,
                steps: 0,
            },
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.config().seed ^ 0x7472_6169_6e00);
    for step in 0..opts.steps {
        let mut acc: Option<Gradients> = None;
        for _ in 0..opts.batch_size {
            let it = &items[rng.random_range(0..items.len())];
            let s = &it.tokens;
            let cache = forward_cache(&model, &s[..s.len() - 1], None);
            let (_, dl) = sequence_loss_and_dlogits(&cache, &s[1..], it.scored_from - 1);
            let g = backward_cache(&model, &cache, &dl, GradScope::All);
            match acc.as_mut() {
                Some(a) => a.accumulate(&g),
                None => acc = Some(g),
            }
        }
        let grads = acc.expect("batch_size >= 1");
        let lr = if opts.linear_decay {
            opts.lr * (1.0 - step as f64 / opts.steps as f64)
        } else {
            opts.lr
        };
        let mut scale = lr / opts.batch_size as f64;
        if let Some(clip) = opts.clip_norm {
            let norm = grads
                .params
                .tensors()
                .iter()
                .flat_map(|t| t.data.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                / opts.batch_size as f64;
            if norm > clip {
                scale *= clip / norm;
            }
        }
        let shrink = 1.0 - lr * opts.weight_decay;
        let params = model.params_mut();
        for (w, g) in params.tensors_mut().into_iter().zip(grads.params.tensors()) {
            let decay = if g.shape.len() == 2 { shrink } else { 1.0 };
            for (wi, gi) in w.iter_mut().zip(g.data) {
                *wi = *wi * decay - scale * gi;
            }
        }
    }
    if !model.params().is_finite() {
        return Err(Error::NonFinite("training diverged".into()));
    }
    let final_loss = items_loss(&model, &items)?;
    if final_loss >= initial_loss {
        return Err(Error::InvalidState(format!(
            "training did not reduce corpus loss ({initial_loss:.4} -> {final_loss:.4})"
        )));
    }
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
            steps: opts.steps,
        },
    ))
}
