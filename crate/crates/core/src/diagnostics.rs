//! End-to-end gradient verification of a small model.

use rand::SeedableRng;

use crate::autodiff::{add_all, finite_diff_check, GradCheckReport};
use crate::config::ModelConfig;
use crate::dataset::{Dataset, Split};
use crate::encoder::{Mode, ModelRng};
use crate::error::{Error, Result};
use crate::pipelines::{ParaphraseModel, Pipeline, QuestionPair};
use crate::synthetic::vocab_for;
use crate::training::cross_entropy;

/// Largest embedding width accepted, keeping the finite-difference sweep short.
pub const MAX_GRADCHECK_DIM: usize = 16;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

fn probe_pairs() -> Result<Dataset> {
    Dataset::new(
        vec![
            QuestionPair::new(
                "how can i be a good geologist ?",
                "what should i do to be a great geologist ?",
                Some(1),
            )?,
            QuestionPair::new(
                "what are some good rap songs to dance to ?",
                "what are some of the best rap songs ?",
                Some(0),
            )?,
        ],
        Split::Train,
    )
}

/// Builds a dropout-free model from `config` with every layer trainable and
/// compares analytic and numeric gradients of the mean loss over two pairs.
pub fn pipeline_gradcheck(config: &ModelConfig, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    if config.encoder.embed_dim > MAX_GRADCHECK_DIM {
        return Err(Error::usage(format!(
            "gradcheck needs a tiny model (embed_dim <= {MAX_GRADCHECK_DIM}), got {}",
            config.encoder.embed_dim
        )));
    }
    let mut config = config.clone().without_dropout();
    config.trainable_encoders = config.encoder.num_layers;
    let data = probe_pairs()?;
    let vocab = vocab_for(&[&data], 1)?;
    config.encoder.vocab_size = config.encoder.vocab_size.max(vocab.len());
    let model = ParaphraseModel::new(config, &mut ModelRng::seed_from_u64(seed))?;
    let pipeline = Pipeline::new(model, vocab)?;
    let inputs = data
        .pairs()
        .iter()
        .map(|p| pipeline.prepare(p))
        .collect::<Result<Vec<_>>>()?;
    let labels = data.labels();
    let f = || {
        let losses = inputs
            .iter()
            .zip(&labels)
            .map(|(x, &y)| cross_entropy(&pipeline.model.forward(x, &mut Mode::eval())?, y))
            .collect::<Result<Vec<_>>>()?;
        Ok(add_all(&losses)?.scale(1.0 / losses.len() as f64))
    };
    finite_diff_check(f, &pipeline.model.params, h, tol)
}
