//! Supervised fine-tuning on demonstration documents: token-level
//! cross-entropy on the response tokens only.

use super::model::{backward, forward, logits_at, softmax};
use super::optim::AdamW;
use super::vocab::Vocabulary;
use super::{PolicyError, PolicyParams};
use crate::corpus::{self, Document};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_documents: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 1e-3,
            batch_documents: 4,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean per-token cross-entropy (nats) per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Prompt tokens with a leading begin-of-sequence marker.
pub fn encode_prompt(vocab: &Vocabulary, doc: &Document) -> Result<Vec<u32>, PolicyError> {
    let text = corpus::render_prompt(doc).map_err(|e| match e {
        corpus::CorpusError::Capacity { budget, needed } => PolicyError::Capacity {
            len: needed,
            max: budget,
        },
        other => PolicyError::Config(other.to_string()),
    })?;
    let mut out = vec![vocab.bos()];
    out.extend(vocab.encode_text(&text)?);
    Ok(out)
}

/// One training sequence: bos + prompt + response + eos, with the index of
/// the first response token.
#[derive(Debug, Clone)]
pub struct EncodedDocument {
    pub tokens: Vec<u32>,
    pub response_start: usize,
}

pub fn encode_document(vocab: &Vocabulary, doc: &Document) -> Result<EncodedDocument, PolicyError> {
    let mut tokens = encode_prompt(vocab, doc)?;
    let response_start = tokens.len();
    let response = corpus::reference_response(doc).render();
    tokens.extend(vocab.encode_text(&response)?);
    tokens.push(vocab.eos());
    Ok(EncodedDocument {
        tokens,
        response_start,
    })
}

/// Cross-entropy over the response tokens of one document; returns the summed
/// loss, the token count, and the gradient of the sum.
fn doc_loss_grad(
    params: &PolicyParams,
    w: &[f64],
    doc: &EncodedDocument,
) -> Result<(f64, usize, Vec<f64>), PolicyError> {
    let cache = forward(&params.dims, w, &doc.tokens)?;
    let t = doc.tokens.len();
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(t - doc.response_start);
    let mut probs = vec![0.0; params.dims.vocab];
    for target_idx in doc.response_start..t {
        let pos = target_idx - 1;
        let target = doc.tokens[target_idx] as usize;
        let logits = logits_at(&params.dims, w, &cache, pos);
        softmax(&logits, &mut probs);
        loss -= probs[target].max(f64::MIN_POSITIVE).ln();
        let mut dl = probs.clone();
        dl[target] -= 1.0;
        dlogits.push((pos, dl));
    }
    let grad = backward(&params.dims, w, &cache, &dlogits);
    Ok((loss, t - doc.response_start, grad))
}

/// Mean response-token cross-entropy of a document set, no gradients.
pub fn mean_loss(params: &PolicyParams, docs: &[EncodedDocument]) -> Result<f64, PolicyError> {
    let w = params.materialized();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut probs = vec![0.0; params.dims.vocab];
    for doc in docs {
        let cache = forward(&params.dims, &w, &doc.tokens)?;
        for target_idx in doc.response_start..doc.tokens.len() {
            let logits = logits_at(&params.dims, &w, &cache, target_idx - 1);
            softmax(&logits, &mut probs);
            total -= probs[doc.tokens[target_idx] as usize]
                .max(f64::MIN_POSITIVE)
                .ln();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Train a copy of `init` on the demonstration documents. Deterministic for
/// a fixed seed; epochs = 0 returns the initial parameters unchanged.
pub fn sft_train(
    init: &PolicyParams,
    demo: &[Document],
    cfg: &SftConfig,
) -> Result<(PolicyParams, SftReport), PolicyError> {
    if init.adapters.is_some() {
        return Err(PolicyError::Config(
            "SFT trains full parameters; detach adapters first".into(),
        ));
    }
    if demo.is_empty() {
        return Err(PolicyError::Config("demonstration set is empty".into()));
    }
    let mut params = init.clone();
    let mut report = SftReport {
        epoch_losses: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    params.lineage.push(format!("sft:{}", cfg.seed));

    let encoded: Vec<EncodedDocument> = demo
        .iter()
        .map(|d| encode_document(&params.vocab, d))
        .collect::<Result<_, _>>()?;

    let mut opt = AdamW::new(params.base.len(), cfg.lr);
    opt.weight_decay = cfg.weight_decay;
    let mut last_good = params.clone();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 + 1));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_documents) {
            let w = params.materialized().into_owned();
            // Per-document gradients computed in parallel, reduced in a
            // fixed order so runs are reproducible at any worker count.
            let results: Vec<(f64, usize, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| doc_loss_grad(&params, &w, &encoded[i]))
                .collect::<Result<_, _>>()?;
            let mut grad = vec![0.0; params.base.len()];
            let mut batch_loss = 0.0;
            let mut batch_tokens = 0usize;
            for (loss, count, g) in &results {
                batch_loss += loss;
                batch_tokens += count;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(PolicyError::Diverged {
                    stage: "sft".into(),
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            let scale = 1.0 / batch_tokens.max(1) as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut params.base, &grad);
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;
        }
        report.epoch_losses.push(epoch_loss / epoch_tokens.max(1) as f64);
        last_good = params.clone();
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_task, SyntheticTaskSpec};
    use crate::policy::model::ModelDims;

    fn small_task() -> (Vec<Document>, Vocabulary) {
        let spec = SyntheticTaskSpec {
            source_vocab_size: 10,
            synonym_set_size: 5,
            line_length_range: (2, 2),
            lines_per_document: 2,
            total_documents: 4,
            test_documents: 0,
            terminology_per_document: 1,
            ..SyntheticTaskSpec::default()
        };
        let (split, oracle, _) = generate_task(&spec, 11).unwrap();
        let vocab = Vocabulary::from_duration_table(&oracle);
        (split.demonstration, vocab)
    }

    fn small_dims(vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_context: 128,
        }
    }

    #[test]
    fn zero_epochs_returns_init_unchanged() {
        let (docs, vocab) = small_task();
        let init = PolicyParams::init(vocab.clone(), small_dims(vocab.len()), 1).unwrap();
        let cfg = SftConfig {
            epochs: 0,
            ..SftConfig::default()
        };
        let (out, report) = sft_train(&init, &docs, &cfg).unwrap();
        assert_eq!(out.base, init.base);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let (docs, vocab) = small_task();
        let init = PolicyParams::init(vocab.clone(), small_dims(vocab.len()), 1).unwrap();
        let cfg = SftConfig {
            epochs: 2,
            batch_documents: 2,
            ..SftConfig::default()
        };
        let (a, _) = sft_train(&init, &docs, &cfg).unwrap();
        let (b, _) = sft_train(&init, &docs, &cfg).unwrap();
        assert_eq!(a.base, b.base);
    }

    #[test]
    fn single_document_memorization() {
        // Overfitting one tiny document drives per-token loss under 0.1 nats.
        let (docs, vocab) = small_task();
        let init = PolicyParams::init(vocab.clone(), small_dims(vocab.len()), 2).unwrap();
        let cfg = SftConfig {
            epochs: 150,
            lr: 3e-3,
            batch_documents: 1,
            ..SftConfig::default()
        };
        let (trained, report) = sft_train(&init, &docs[..1], &cfg).unwrap();
        assert!(
            report.epoch_losses.last().unwrap() < &0.1,
            "final loss {:?}",
            report.epoch_losses.last()
        );
        let enc = encode_document(&trained.vocab, &docs[0]).unwrap();
        assert!(mean_loss(&trained, &[enc]).unwrap() < 0.1);
    }

    #[test]
    fn loss_decreases_over_early_epochs() {
        let (docs, vocab) = small_task();
        let init = PolicyParams::init(vocab.clone(), small_dims(vocab.len()), 3).unwrap();
        let cfg = SftConfig {
            epochs: 3,
            batch_documents: 4,
            ..SftConfig::default()
        };
        let (_, report) = sft_train(&init, &docs, &cfg).unwrap();
        for pair in report.epoch_losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6, "losses {:?}", report.epoch_losses);
        }
    }
}
