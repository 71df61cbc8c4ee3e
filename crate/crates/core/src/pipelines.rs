//! End-to-end paraphrase models: Siamese and matched aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, no_grad, Tensor};
use crate::config::{HeadKind, ModelConfig, Setup};
use crate::encoder::{Encoder, Mode};
use crate::error::{Error, Result};
use crate::heads::{classify, cnn_condense, decide, mean_pool, ClassifierParams, ConvFilterBank};
use crate::layout::{build_registry, param_specs, role_trainable};
use crate::params::ParamRegistry;
use crate::tokenizer::{encode_pair, encode_single, tokenize, EncodedInput, Vocab};

/// Two questions and, when known, whether they are duplicates (`1`) or not (`0`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionPair {
    pub question_a: String,
    pub question_b: String,
    pub label: Option<u8>,
}

impl QuestionPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>, label: Option<u8>) -> Result<Self> {
        if let Some(l) = label {
            if l > 1 {
                return Err(Error::data(format!("label {l} is not 0 or 1")));
            }
        }
        Ok(Self {
            question_a: a.into(),
            question_b: b.into(),
            label,
        })
    }
}

/// Model-ready encodings of one pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairInputs {
    Siamese { a: EncodedInput, b: EncodedInput },
    Packed(EncodedInput),
}

#[derive(Clone, Debug)]
pub enum Condenser {
    Cnn(ConvFilterBank),
    MeanPool,
}

/// Encoder, head and classifier over one parameter registry.
#[derive(Debug)]
pub struct ParaphraseModel {
    pub config: ModelConfig,
    pub params: ParamRegistry,
    pub encoder: Encoder,
    pub condenser: Condenser,
    pub classifier: ClassifierParams,
}

impl ParaphraseModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = build_registry(&config, rng)?;
        Self::from_registry(config, params)
    }

    /// Wraps an existing registry, which must hold exactly the parameters
    /// `config` calls for, with matching shapes.
    pub fn from_registry(config: ModelConfig, params: ParamRegistry) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Consistency(format!(
                "config needs {} parameters, registry holds {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape => {}
                Some(t) => {
                    return Err(Error::Consistency(format!(
                        "{} has shape {:?}, config needs {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::Consistency(format!("{} missing", spec.name))),
            }
        }
        let encoder = Encoder::fetch(&config.encoder, &params)?;
        let condenser = match config.head {
            HeadKind::Cnn => Condenser::Cnn(ConvFilterBank::fetch(&config.cnn, &params)?),
            HeadKind::MeanPool => Condenser::MeanPool,
        };
        let classifier = ClassifierParams::fetch(&params)?;
        let mut model = Self {
            config,
            params,
            encoder,
            condenser,
            classifier,
        };
        model.set_trainable_encoders(model.config.trainable_encoders)?;
        Ok(model)
    }

    /// Fine-tunes the top `k` encoder layers and freezes the rest.
    pub fn set_trainable_encoders(&mut self, k: usize) -> Result<()> {
        let layers = self.config.encoder.num_layers;
        if k > layers {
            return Err(Error::usage(format!("k={k} outside 0..={layers}")));
        }
        for spec in param_specs(&self.config) {
            self.params
                .set_trainable(&spec.name, role_trainable(spec.role, k, layers))?;
        }
        self.config.trainable_encoders = k;
        Ok(())
    }

    /// Encodes one sequence and condenses it.
    pub fn condense(&self, input: &EncodedInput, mode: &mut Mode<'_>) -> Result<Tensor> {
        let hidden = self.encoder.encode(input, mode)?;
        let v = match &self.condenser {
            Condenser::Cnn(bank) => cnn_condense(&hidden, bank, &input.attention_mask)?,
            Condenser::MeanPool => mean_pool(&hidden, &input.attention_mask)?,
        };
        Ok(v.values)
    }

    /// Vector fed to the classifier: `h_a ⊕ h_b` or the packed pair's vector.
    pub fn classifier_input(&self, inputs: &PairInputs, mode: &mut Mode<'_>) -> Result<Tensor> {
        match (self.config.setup, inputs) {
            (Setup::Siamese, PairInputs::Siamese { a, b }) => {
                let ha = self.condense(a, mode)?;
                let hb = self.condense(b, mode)?;
                concat(&[ha, hb])
            }
            (Setup::MatchedAggregation, PairInputs::Packed(p)) => self.condense(p, mode),
            (setup, _) => Err(Error::usage(format!("inputs do not match the {setup} setup"))),
        }
    }

    /// Class probabilities `[p(0), p(1)]`.
    pub fn forward(&self, inputs: &PairInputs, mode: &mut Mode<'_>) -> Result<Tensor> {
        let h = self.classifier_input(inputs, mode)?;
        let h = mode.dropout(&h, self.config.head_dropout)?;
        classify(&h, &self.classifier)
    }

    pub fn round_to_precision(&self) {
        let p = self.config.precision;
        for (_, t) in self.params.iter() {
            t.update(|d| p.round(d));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub confidence: f64,
    pub probabilities: [f64; 2],
}

impl Prediction {
    pub fn from_probs(p: &[f64]) -> Self {
        let (label, confidence) = decide(p);
        Self {
            label,
            confidence,
            probabilities: [p[0], p[1]],
        }
    }
}

/// A model together with the vocabulary that feeds it raw text.
#[derive(Debug)]
pub struct Pipeline {
    pub model: ParaphraseModel,
    pub vocab: Vocab,
}

impl Pipeline {
    pub fn new(model: ParaphraseModel, vocab: Vocab) -> Result<Self> {
        let rows = model.config.encoder.vocab_size;
        if vocab.len() > rows {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the embedding table only {rows} rows",
                vocab.len()
            )));
        }
        Ok(Self { model, vocab })
    }

    pub fn setup(&self) -> Setup {
        self.model.config.setup
    }

    fn check_len(&self, input: &EncodedInput, what: &str) -> Result<()> {
        if let Condenser::Cnn(bank) = &self.model.condenser {
            let n = input.unpadded_len();
            if n < bank.max_width() {
                return Err(Error::Input(format!(
                    "{what} encodes to {n} tokens, fewer than the widest filter ({})",
                    bank.max_width()
                )));
            }
        }
        Ok(())
    }

    /// Tokenizes and encodes a pair for the configured setup.
    pub fn prepare(&self, pair: &QuestionPair) -> Result<PairInputs> {
        let max_len = self.model.config.max_len;
        let a = tokenize(&pair.question_a, &self.vocab);
        let b = tokenize(&pair.question_b, &self.vocab);
        match self.setup() {
            Setup::Siamese => {
                let a = encode_single(&a, &self.vocab, max_len)?;
                let b = encode_single(&b, &self.vocab, max_len)?;
                self.check_len(&a, "question A")?;
                self.check_len(&b, "question B")?;
                Ok(PairInputs::Siamese { a, b })
            }
            Setup::MatchedAggregation => {
                let p = encode_pair(&a, &b, &self.vocab, max_len)?;
                self.check_len(&p, "packed pair")?;
                Ok(PairInputs::Packed(p))
            }
        }
    }

    fn require(&self, setup: Setup) -> Result<()> {
        if self.setup() != setup {
            return Err(Error::usage(format!(
                "model is configured for the {} setup, not {setup}",
                self.setup()
            )));
        }
        Ok(())
    }

    pub fn siamese_forward(&self, pair: &QuestionPair, mode: &mut Mode<'_>) -> Result<Tensor> {
        self.require(Setup::Siamese)?;
        self.model.forward(&self.prepare(pair)?, mode)
    }

    pub fn matched_aggregation_forward(&self, pair: &QuestionPair, mode: &mut Mode<'_>) -> Result<Tensor> {
        self.require(Setup::MatchedAggregation)?;
        self.model.forward(&self.prepare(pair)?, mode)
    }

    pub fn forward(&self, pair: &QuestionPair, mode: &mut Mode<'_>) -> Result<Tensor> {
        self.model.forward(&self.prepare(pair)?, mode)
    }

    /// Label and confidence with dropout off and no graph recorded.
    pub fn predict(&self, pair: &QuestionPair) -> Result<Prediction> {
        let inputs = self.prepare(pair)?;
        self.predict_prepared(&inputs)
    }

    pub fn predict_prepared(&self, inputs: &PairInputs) -> Result<Prediction> {
        let probs = no_grad(|| self.model.forward(inputs, &mut Mode::eval()))?;
        Ok(Prediction::from_probs(&probs.to_vec()))
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::encoder::ModelRng;
    use rand::SeedableRng;

    pub fn vocab() -> Vocab {
        let corpus = [
            "how can i be a good geologist ?",
            "what should i do to be a great geologist ?",
            "what are some good rap songs to dance to ?",
            "what are some of the best rap songs ?",
            "why is the sky blue and how do birds fly",
        ];
        Vocab::build(corpus, 1).unwrap()
    }

    pub fn pipeline(setup: Setup, head: HeadKind, seed: u64) -> Pipeline {
        let mut config = ModelConfig::tiny(setup, head).without_dropout();
        config.init_std = 0.2;
        let model = ParaphraseModel::new(config, &mut ModelRng::seed_from_u64(seed)).unwrap();
        Pipeline::new(model, vocab()).unwrap()
    }
}
