//! Fine-tuning baselines without prompts: a 3-layer MLP header over either
//! the `[CLS]` state (whole model trained) or averaged token states of a
//! frozen backbone.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, TrainableMask, Var};
use crate::backend::layers::{Initializer, Linear, ParamBuilder};
use crate::backend::params::ParameterStore;
use crate::backend::transformer::{MaskedLanguageModel, ToyTransformer};
use crate::backend::vocab::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::task::cast::ClassificationExample;
use crate::task::TaskKind;
use crate::tensor::Matrix;
use crate::train::config::{TrainConfig, TrainableSet};
use crate::train::fit::{fit, EpochLog, Objective, Selection, TrainOutcome};

pub const HEAD_PREFIX: &str = "head.";
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    MlpCls,
    AvgEmbed,
}

#[derive(Debug, Clone)]
pub struct MlpHead {
    layers: [Linear; 3],
}

impl MlpHead {
    fn build(b: &mut dyn ParamBuilder, input: usize, hidden: usize) -> Self {
        Self {
            layers: [
                Linear::build(b, "head.0", input, hidden),
                Linear::build(b, "head.1", hidden, hidden),
                Linear::build(b, "head.2", hidden, NUM_CLASSES),
            ],
        }
    }

    pub fn init<R: Rng>(store: &mut ParameterStore<f32>, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        store.remove_prefix(HEAD_PREFIX);
        let mut init = Initializer::new(store, rng);
        let head = Self::build(&mut init, input, hidden);
        init.finish()?;
        Ok(head)
    }

    pub fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Var {
        let h = self.layers[0].forward(g, x);
        let h = g.relu(h);
        let h = self.layers[1].forward(g, h);
        let h = g.relu(h);
        self.layers[2].forward(g, h)
    }

    pub fn output_dim(&self) -> usize {
        NUM_CLASSES
    }
}

/// One training example in the representation its mode consumes.
#[derive(Debug, Clone)]
enum Features {
    Tokens(TokenSequence),
    Pooled(Matrix<f32>),
}

#[derive(Debug, Clone)]
pub struct BaselineClassifier {
    pub model: ToyTransformer,
    pub head: MlpHead,
    pub mode: BaselineMode,
}

fn pair_tokens(ex: &ClassificationExample, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let sp = vocab.special();
    let budget = max_len.saturating_sub(3);
    let (a, b) = (ex.x1.len(), ex.x2.len());
    let (ka, kb) = if a + b <= budget {
        (a, b)
    } else {
        let ka = budget * a / (a + b);
        (ka, (budget - ka).min(b))
    };
    let mut out = vec![sp.cls];
    out.extend_from_slice(&ex.x1[..ka]);
    out.push(sp.sep);
    out.extend_from_slice(&ex.x2[..kb]);
    out.push(sp.sep);
    out
}

impl BaselineClassifier {
    fn max_len(&self) -> usize {
        MaskedLanguageModel::<f32>::config(&self.model).max_seq_len
    }

    /// Concatenated per-segment means of encoder states, each segment
    /// encoded alone as `[CLS] x [SEP]`.
    fn pooled(&self, store: &ParameterStore<f32>, ex: &ClassificationExample, vocab: &Vocabulary) -> Result<Matrix<f32>> {
        let sp = vocab.special();
        let d = MaskedLanguageModel::<f32>::config(&self.model).hidden_dim;
        let mut out = Vec::with_capacity(2 * d);
        for seg in [&ex.x1, &ex.x2] {
            let keep = seg.len().min(self.max_len() - 2);
            let mut ids = vec![sp.cls];
            ids.extend_from_slice(&seg[..keep]);
            ids.push(sp.sep);
            let table = store.get(MaskedLanguageModel::<f32>::token_table(&self.model));
            let emb = Matrix::from_fn(ids.len(), d, |r, c| table.get(ids[r] as usize, c));
            let states = self.model.encode_states(store, &emb, &vec![true; ids.len()])?;
            let rows = 1..=keep;
            let n = keep.max(1) as f32;
            for c in 0..d {
                out.push(rows.clone().map(|r| states.row(r)[c]).sum::<f32>() / n);
            }
        }
        Ok(Matrix::row_vector(out))
    }

    fn features(&self, store: &ParameterStore<f32>, ex: &ClassificationExample, vocab: &Vocabulary) -> Result<Features> {
        Ok(match self.mode {
            BaselineMode::MlpCls => Features::Tokens(pair_tokens(ex, vocab, self.max_len())),
            BaselineMode::AvgEmbed => Features::Pooled(self.pooled(store, ex, vocab)?),
        })
    }

    fn logits(&self, g: &mut Graph<'_, f32>, f: &Features) -> Result<Var> {
        let x = match f {
            Features::Tokens(ids) => {
                let emb = self.model.embed_tokens(g, ids);
                let h = self.model.encode(g, emb, &vec![true; ids.len()])?;
                g.rows(&[(h, 0)])
            }
            Features::Pooled(m) => g.constant(m.clone()),
        };
        Ok(self.head.forward(g, x))
    }

    pub fn predict(&self, store: &ParameterStore<f32>, examples: &[ClassificationExample], vocab: &Vocabulary) -> Result<Vec<u8>> {
        examples
            .par_iter()
            .map(|ex| {
                let f = self.features(store, ex, vocab)?;
                let mut g = Graph::new(store);
                let l = self.logits(&mut g, &f)?;
                let row = g.value(l).row(0);
                Ok(u8::from(row[1] > row[0]))
            })
            .collect()
    }
}

struct BaselineObjective<'a> {
    clf: &'a BaselineClassifier,
    ids: Vec<String>,
    train: Vec<(Features, u8)>,
    valid: Vec<(Features, u8)>,
}

impl BaselineObjective<'_> {
    fn accuracy(&self, store: &ParameterStore<f32>, data: &[(Features, u8)]) -> Result<f64> {
        let predicted = data
            .par_iter()
            .map(|(f, _)| {
                let mut g = Graph::new(store);
                let l = self.clf.logits(&mut g, f)?;
                let row = g.value(l).row(0);
                Ok(u8::from(row[1] > row[0]))
            })
            .collect::<Result<Vec<u8>>>()?;
        let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
        crate::eval::metrics::accuracy(&predicted, &labels)
    }
}

impl Objective for BaselineObjective<'_> {
    fn len(&self) -> usize {
        self.train.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn batch(
        &self,
        store: &ParameterStore<f32>,
        mask: &TrainableMask,
        batch: &[usize],
        _epoch: usize,
    ) -> Result<(f64, Gradients<f32>)> {
        let parts = batch
            .par_iter()
            .map(|&i| {
                let (f, label) = &self.train[i];
                let mut g = Graph::with_trainable(store, mask);
                let logits = self.clf.logits(&mut g, f)?;
                let loss = g.cross_entropy(logits, &[Some(*label as usize)]);
                Ok((g.scalar(loss) as f64, g.backward(loss)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = Gradients::zeros(store.len());
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            total.merge(g);
        }
        let n = parts.len();
        total.scale(1.0 / n as f32);
        Ok((loss / n as f64, total))
    }

    fn metric_name(&self) -> &str {
        "accuracy"
    }

    fn validate(&self, store: &ParameterStore<f32>) -> Result<Option<f64>> {
        self.accuracy(store, &self.valid).map(Some)
    }

    fn selection(&self) -> Selection {
        Selection::Maximize
    }
}

pub struct Baseline<'a> {
    pub model: &'a ToyTransformer,
    pub vocab: &'a Vocabulary,
    pub task: TaskKind,
    pub mode: BaselineMode,
}

/// Adds a fresh `head.*` MLP to `store` and trains it. `mlp_cls` also
/// trains the backbone; `avg_embed` freezes it, so its pooled features are
/// computed once up front.
pub fn finetune_baseline<R: Rng>(
    job: &Baseline<'_>,
    mut store: ParameterStore<f32>,
    train: &[ClassificationExample],
    valid: &[ClassificationExample],
    config: &TrainConfig,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(BaselineClassifier, TrainOutcome)> {
    if !job.task.is_classification() {
        return Err(Error::Unsupported(format!(
            "baseline fine-tuning covers pair classification only, not {}",
            job.task
        )));
    }
    if valid.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    if store.ids_with_prefix("prompt.").next().is_some() {
        return Err(Error::Config("baseline fine-tuning expects a store without prompt arrays".into()));
    }
    let d = MaskedLanguageModel::<f32>::config(job.model).hidden_dim;
    let input = match job.mode {
        BaselineMode::MlpCls => d,
        BaselineMode::AvgEmbed => 2 * d,
    };
    let head = MlpHead::init(&mut store, input, d, rng)?;
    let clf = BaselineClassifier {
        model: job.model.clone(),
        head,
        mode: job.mode,
    };
    let featurize = |data: &[ClassificationExample]| -> Result<Vec<(Features, u8)>> {
        data.par_iter()
            .map(|ex| Ok((clf.features(&store, ex, job.vocab)?, ex.label)))
            .collect()
    };
    let objective = BaselineObjective {
        clf: &clf,
        ids: train.iter().map(|e| e.id.clone()).collect(),
        train: featurize(train)?,
        valid: featurize(valid)?,
    };
    let config = TrainConfig {
        trainable_set: match job.mode {
            BaselineMode::MlpCls => TrainableSet::PlmOnly,
            // Only the head prefixes remain once prompts are absent.
            BaselineMode::AvgEmbed => TrainableSet::PromptsOnly,
        },
        ..config.clone()
    };
    let outcome = fit(store, &objective, &config, on_epoch)?;
    Ok((clf, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::transformer::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vocabulary, ToyTransformer, ParameterStore<f32>) {
        let words: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::build(words.iter().map(String::as_str), &[], &[], 64).unwrap();
        let cfg = ModelConfig {
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 32,
            max_seq_len: 24,
            vocab_size: vocab.len(),
            tie_mlm_head: true,
        };
        let mut store = ParameterStore::new();
        let model = ToyTransformer::init(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        (vocab, model, store)
    }

    /// Label 1 iff both segments are drawn from the low half of the words.
    fn examples(vocab: &Vocabulary, n: usize, seed: u64) -> Vec<ClassificationExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let lo = if label == 1 { 0 } else { 8 };
                let seg = |rng: &mut ChaCha8Rng| -> TokenSequence {
                    (0..5).map(|_| vocab.id(&format!("w{}", lo + rng.random_range(0..8))).unwrap()).collect()
                };
                ClassificationExample {
                    id: format!("b{i}"),
                    task: TaskKind::Cd,
                    language: "x".into(),
                    x1: seg(&mut rng),
                    x2: seg(&mut rng),
                    label,
                }
            })
            .collect()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            base_lr: 3e-3,
            batch_size: 8,
            epochs: 20,
            seed: 2,
            ..TrainConfig::classification()
        }
    }

    #[test]
    fn avg_embed_freezes_backbone_and_separates_linear_features() {
        let (vocab, model, store) = setup();
        let train = examples(&vocab, 80, 1);
        let job = Baseline {
            model: &model,
            vocab: &vocab,
            task: TaskKind::Cd,
            mode: BaselineMode::AvgEmbed,
        };
        let original = store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clf, out) = finetune_baseline(&job, store, &train, &train, &config(), &mut rng, &mut |_| {}).unwrap();
        assert!(out.store.bitwise_eq_prefix(&original, "encoder."));
        assert!(out.store.bitwise_eq_prefix(&original, "mlm."));
        assert_eq!(clf.head.output_dim(), 2);
        assert_eq!(out.store.by_name("head.2.weight").unwrap().shape(), (16, 2));

        // Oracle: least-squares linear classifier on the same pooled features.
        let feats: Vec<Matrix<f32>> = train.iter().map(|e| clf.pooled(&original, e, &vocab).unwrap()).collect();
        let dim = feats[0].cols() + 1;
        let x = nalgebra::DMatrix::from_fn(train.len(), dim, |r, c| {
            if c + 1 == dim { 1.0 } else { feats[r].get(0, c) as f64 }
        });
        let y = nalgebra::DVector::from_fn(train.len(), |r, _| if train[r].label == 1 { 1.0 } else { -1.0 });
        let w = x.clone().svd(true, true).solve(&y, 1e-9).unwrap();
        let oracle = (&x * &w).iter().zip(y.iter()).filter(|(p, t)| p.signum() == t.signum()).count();
        assert!(oracle as f64 / train.len() as f64 > 0.95, "features are not linearly separable");

        let predicted = clf.predict(&out.store, &train, &vocab).unwrap();
        let correct = predicted.iter().zip(&train).filter(|(p, e)| **p == e.label).count();
        assert!(correct as f64 / train.len() as f64 > 0.95, "{correct}/80");
    }

    #[test]
    fn mlp_cls_trains_the_backbone() {
        let (vocab, model, store) = setup();
        let train = examples(&vocab, 16, 1);
        let job = Baseline {
            model: &model,
            vocab: &vocab,
            task: TaskKind::Mnp,
            mode: BaselineMode::MlpCls,
        };
        let original = store.clone();
        let cfg = TrainConfig { epochs: 2, ..config() };
        let (_, out) = finetune_baseline(&job, store, &train, &train, &cfg, &mut ChaCha8Rng::seed_from_u64(0), &mut |_| {}).unwrap();
        assert!(!out.store.bitwise_eq_prefix(&original, "encoder."));
    }

    #[test]
    fn generative_task_is_unsupported() {
        let (vocab, model, store) = setup();
        let job = Baseline {
            model: &model,
            vocab: &vocab,
            task: TaskKind::Cm,
            mode: BaselineMode::MlpCls,
        };
        let r = finetune_baseline(&job, store, &[], &[], &config(), &mut ChaCha8Rng::seed_from_u64(0), &mut |_| {});
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }
}
