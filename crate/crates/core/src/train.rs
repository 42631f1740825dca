//! Training loop, the self-describing rewriter bundle, dataset evaluation
//! and the per-example latency benchmark.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::dialogue::{
    derive_connection_words, join_context, prepare_incomplete, ConnectionWordList, DialogueExample, JoinedContext,
    Token, TokenKind, TokenizationMode,
};
use crate::edit::EditMatrix;
use crate::generate::{generate, EditProgram};
use crate::metrics::{evaluate, EvalOptions, EvalReport, MetricError};
use crate::model::{grid_size, ModelConfig, ModelInput, ModelLoadError, RunModel, Vocabulary};
use crate::nn::{adam_step, apply_bn_updates, AdamState, Checkpoint, CheckpointError, Graph, KernelError};
use crate::supervision::{build_gold_matrix, Coverage, SupervisionError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a dev EM improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    pub tokenization: TokenizationMode,
    /// Size of the connection-word list appended to every context.
    pub connection_words: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            dev: None,
            test: None,
            labels: None,
            checkpoint: None,
            model: ModelConfig::default(),
            lr: 1e-3,
            epochs: 50,
            patience: Some(10),
            seed: 7,
            tokenization: TokenizationMode::default(),
            connection_words: 10,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    ModelLoad(#[from] ModelLoadError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training example {index}: {source}")]
    Supervision {
        index: usize,
        #[source]
        source: SupervisionError,
    },
    #[error("{path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error("no trainable example (every context is empty)")]
    NoTrainingExamples,
    #[error("non-finite loss {loss} in epoch {epoch} on examples {batch:?}; epoch losses so far {history:?}")]
    NonFiniteLoss { epoch: usize, loss: f64, batch: Vec<usize>, history: Vec<f64> },
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        let probe = ModelConfig { vocab_size: Vocabulary::RESERVED, ..self.model.clone() };
        probe.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Model inputs of one example, plus what generation needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub context: JoinedContext,
    pub utterance: Vec<Token>,
    pub input: ModelInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rewrite {
    pub tokens: Vec<Token>,
    pub program: EditProgram,
    pub matrix: EditMatrix,
}

/// A model together with everything needed to run it on raw examples.
#[derive(Debug, Clone)]
pub struct Rewriter {
    pub model: RunModel,
    pub vocab: Vocabulary,
    pub conn: ConnectionWordList,
    pub k: usize,
    pub mode: TokenizationMode,
}

const SIDECAR_FORMAT: &str = "run-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    model: ModelConfig,
    tokenization: TokenizationMode,
    vocabulary: Vec<String>,
    connection_words: Vec<String>,
    k: usize,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Path of the JSON description stored next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    crate::data::write_text(path, &text).map_err(Into::into)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TrainError> {
    let text = crate::data::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| TrainError::Sidecar { path: path.to_path_buf(), message: e.to_string() })
}

impl Rewriter {
    pub fn prepare(&self, ex: &DialogueExample) -> Prepared {
        let context = join_context(ex, &self.conn, self.k);
        let utterance = prepare_incomplete(ex.incomplete());
        let input = ModelInput::new(&self.vocab, context.tokens(), &utterance);
        Prepared { context, utterance, input }
    }

    /// Predict, standardize and apply: one model call.
    pub fn rewrite_prepared(&self, p: &Prepared) -> Result<Rewrite, KernelError> {
        let matrix = self.model.predict(&p.input)?;
        let (tokens, program) = generate(&matrix, &p.utterance, &p.context);
        Ok(Rewrite { tokens, program, matrix })
    }

    pub fn rewrite(&self, ex: &DialogueExample) -> Result<Rewrite, KernelError> {
        self.rewrite_prepared(&self.prepare(ex))
    }

    /// Writes the checkpoint to `path` and its sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.model.to_checkpoint().save(path)?;
        let sidecar = Sidecar {
            format: SIDECAR_FORMAT.to_string(),
            model: self.model.config().clone(),
            tokenization: self.mode,
            vocabulary: self.vocab.words().to_vec(),
            connection_words: self.conn.words().to_vec(),
            k: self.k,
        };
        write_json(&sidecar_path(path), &sidecar)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let side_path = sidecar_path(path);
        let sidecar: Sidecar = read_json(&side_path)?;
        if sidecar.format != SIDECAR_FORMAT {
            return Err(TrainError::Sidecar {
                path: side_path,
                message: format!("unsupported format {:?}", sidecar.format),
            });
        }
        let conn = ConnectionWordList::from_words(&sidecar.connection_words);
        if sidecar.k > conn.len() {
            return Err(TrainError::Sidecar {
                path: side_path,
                message: format!("k = {} exceeds {} connection words", sidecar.k, conn.len()),
            });
        }
        let model = RunModel::from_checkpoint(sidecar.model, &Checkpoint::load(path)?)?;
        Ok(Rewriter {
            model,
            vocab: Vocabulary::from_words(&sidecar.vocabulary),
            conn,
            k: sidecar.k,
            mode: sidecar.tokenization,
        })
    }
}

/// Context and utterance words of the training set, then the connection words.
pub fn build_vocabulary(train: &[DialogueExample], conn: &ConnectionWordList) -> Vocabulary {
    let mut v = Vocabulary::new();
    for ex in train {
        for t in ex.context_utterances().iter().flatten().chain(ex.incomplete()) {
            v.insert(t.text());
        }
    }
    for w in conn.words() {
        v.insert(w);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelStats {
    pub examples: usize,
    pub partial: usize,
    /// Examples without any context word, which carry no trainable cell.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_cell_accuracy: Option<f64>,
    pub dev_em: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The best model by dev EM (the last one without a dev set).
    pub rewriter: Rewriter,
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub labels: LabelStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    next_epoch: usize,
    adam_step: u64,
    history: Vec<EpochStats>,
    best_epoch: Option<usize>,
    best_em: f64,
}

struct Item {
    input: ModelInput,
    gold: EditMatrix,
}

/// Dev-set cell accuracy over real cells and exact match of the generated rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevScores {
    pub cell_accuracy: f64,
    pub em: f64,
}

/// Scores `examples` (which need gold rewrites) with `rewriter`.
pub fn dev_scores(rewriter: &Rewriter, examples: &[DialogueExample]) -> Result<DevScores, TrainError> {
    let (mut cells, mut correct, mut exact) = (0usize, 0usize, 0usize);
    for (index, ex) in examples.iter().enumerate() {
        let (gold, _) = build_gold_matrix(ex, &rewriter.conn, rewriter.k)
            .map_err(|source| TrainError::Supervision { index, source })?;
        let rw = rewriter.rewrite(ex)?;
        cells += gold.cells().len();
        correct += gold.cells().iter().zip(rw.matrix.cells()).filter(|(a, b)| a == b).count();
        let reference = ex.gold_rewrite().expect("gold matrix implies a rewrite");
        if texts(&rw.tokens) == texts(reference) {
            exact += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(DevScores { cell_accuracy: ratio(correct, cells), em: ratio(exact, examples.len()) })
}

fn texts(tokens: &[Token]) -> Vec<&str> {
    tokens.iter().map(Token::text).collect()
}

/// Minibatches of similar padded grid size, in a seeded random order.
fn make_batches(items: &[Item], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in order {
        let key = (grid_size(items[i].input.rows()), grid_size(items[i].input.cols()));
        groups.entry(key).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> =
        groups.values().flat_map(|g| g.chunks(batch_size).map(<[usize]>::to_vec)).collect();
    batches.shuffle(rng);
    batches
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn train_step(model: &mut RunModel, adam: &mut AdamState, lr: f64, batch: &[&Item]) -> Result<f64, KernelError> {
    let mut g = Graph::new();
    let mut updates = Vec::new();
    let pairs: Vec<(&ModelInput, &EditMatrix)> = batch.iter().map(|it| (&it.input, &it.gold)).collect();
    let loss = model.forward_loss(&mut g, model.store(), &pairs, true, &mut updates)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss);
    let store = model.store_mut();
    store.zero_grad();
    g.accumulate_param_grads(&grads, store);
    adam_step(store, adam, lr);
    apply_bn_updates(store, &updates);
    Ok(value)
}

fn last_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".last")
}

fn save_state(path: &Path, model: &RunModel, adam: &AdamState, state: &TrainState) -> Result<(), TrainError> {
    let mut ck = model.to_checkpoint();
    for (p, (m, v)) in model.store().params().iter().zip(adam.m.iter().zip(&adam.v)) {
        ck.push(format!("adam.m.{}", p.name), m.clone());
        ck.push(format!("adam.v.{}", p.name), v.clone());
    }
    ck.save(path)?;
    write_json(&sidecar_path(path), state)
}

fn load_state(path: &Path, model: &mut RunModel, adam: &mut AdamState) -> Result<TrainState, TrainError> {
    let ck = Checkpoint::load(path)?;
    let state: TrainState = read_json(&sidecar_path(path))?;
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let (name, shape) = {
            let p = model.store().get(id);
            (p.name.clone(), p.value.shape().to_vec())
        };
        *model.store_mut().value_mut(id) = ck.require(&name, &shape)?.clone();
        adam.m[id.index()] = ck.require(&format!("adam.m.{name}"), &shape)?.clone();
        adam.v[id.index()] = ck.require(&format!("adam.v.{name}"), &shape)?.clone();
    }
    adam.step = state.adam_step;
    Ok(state)
}

/// Trains on `train`, selecting the best epoch by dev EM.
///
/// With a `checkpoint` path the best model is written there (plus its
/// sidecar), and `<checkpoint>.last` keeps the latest weights, optimizer state
/// and history so that `resume` continues exactly where a run stopped.
pub fn train(
    config: &RunConfig,
    train: &[DialogueExample],
    dev: &[DialogueExample],
    checkpoint: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let conn = derive_connection_words(train, config.connection_words);
    let k = conn.len();
    let vocab = build_vocabulary(train, &conn);
    let model_config = ModelConfig { vocab_size: vocab.len(), ..config.model.clone() };
    let model = RunModel::new(model_config, config.seed).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut rewriter = Rewriter { model, vocab, conn, k, mode: config.tokenization };

    let mut labels = LabelStats::default();
    let mut items = Vec::with_capacity(train.len());
    for (index, ex) in train.iter().enumerate() {
        let (gold, coverage) =
            build_gold_matrix(ex, &rewriter.conn, k).map_err(|source| TrainError::Supervision { index, source })?;
        labels.examples += 1;
        if coverage == Coverage::Partial {
            labels.partial += 1;
        }
        if gold.rows() == 0 {
            labels.skipped += 1;
            continue;
        }
        items.push(Item { input: rewriter.prepare(ex).input, gold });
    }
    if items.is_empty() {
        return Err(TrainError::NoTrainingExamples);
    }
    log::info!(
        "{} training examples ({} partial, {} skipped), vocabulary {}, {} connection words",
        labels.examples,
        labels.partial,
        labels.skipped,
        rewriter.vocab.len(),
        k
    );

    let mut adam = AdamState::new(rewriter.model.store());
    let mut state = TrainState { next_epoch: 0, adam_step: 0, history: Vec::new(), best_epoch: None, best_em: -1.0 };
    let mut best: Option<RunModel> = None;
    if let (true, Some(ck)) = (resume, checkpoint) {
        let last = last_path(ck);
        if last.exists() {
            state = load_state(&last, &mut rewriter.model, &mut adam)?;
            if ck.exists() {
                best = Some(Rewriter::load(ck)?.model);
            }
            log::info!("resuming at epoch {}", state.next_epoch);
        }
    }

    let batch_size = config.model.batch_size;
    while state.next_epoch < config.epochs {
        let epoch = state.next_epoch;
        let mut rng = epoch_rng(config.seed, epoch);
        let mut losses = Vec::new();
        for batch in make_batches(&items, batch_size, &mut rng) {
            let refs: Vec<&Item> = batch.iter().map(|&i| &items[i]).collect();
            let loss = train_step(&mut rewriter.model, &mut adam, config.lr, &refs)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    loss,
                    batch,
                    history: state.history.iter().map(|h| h.train_loss).collect(),
                });
            }
            losses.push(loss);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let scores = if dev.is_empty() { None } else { Some(dev_scores(&rewriter, dev)?) };
        let stats = EpochStats {
            epoch,
            train_loss,
            dev_cell_accuracy: scores.map(|s| s.cell_accuracy),
            dev_em: scores.map(|s| s.em),
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5}, dev cell accuracy {:?}, dev EM {:?}",
            stats.dev_cell_accuracy,
            stats.dev_em
        );
        state.history.push(stats);
        let em = scores.map_or(f64::INFINITY, |s| s.em);
        if em > state.best_em || scores.is_none() {
            state.best_em = em;
            state.best_epoch = Some(epoch);
            best = Some(rewriter.model.clone());
            if let Some(ck) = checkpoint {
                rewriter.save(ck)?;
            }
        }
        state.next_epoch = epoch + 1;
        state.adam_step = adam.step;
        if let Some(ck) = checkpoint {
            save_state(&last_path(ck), &rewriter.model, &adam, &state)?;
        }
        if let (Some(p), Some(b)) = (config.patience, state.best_epoch) {
            if epoch - b >= p {
                log::info!("no dev improvement for {p} epochs, stopping");
                break;
            }
        }
    }

    if let Some(model) = best {
        rewriter.model = model;
    }
    Ok(TrainOutcome { rewriter, history: state.history, best_epoch: state.best_epoch, labels })
}

/// Words of the joined context, without separators.
pub fn context_words(c: &JoinedContext) -> Vec<String> {
    c.tokens().iter().filter(|t| t.kind() != TokenKind::SepS).map(|t| t.text().to_string()).collect()
}

fn strings(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.text().to_string()).collect()
}

/// Scores predicted rewrites against the gold rewrites of `examples`. The
/// context of each example includes the first `k` words of `conn`.
pub fn evaluate_predictions(
    preds: &[Vec<Token>],
    examples: &[DialogueExample],
    conn: &ConnectionWordList,
    k: usize,
    options: EvalOptions,
) -> Result<EvalReport, TrainError> {
    let mut refs = Vec::with_capacity(examples.len());
    for (index, ex) in examples.iter().enumerate() {
        let r = ex.gold_rewrite().ok_or(TrainError::Supervision { index, source: SupervisionError::MissingRewrite })?;
        refs.push(strings(r));
    }
    let p: Vec<Vec<String>> = preds.iter().map(|t| strings(t)).collect();
    let ctx: Vec<Vec<String>> = examples.iter().map(|ex| context_words(&join_context(ex, conn, k))).collect();
    let x: Vec<Vec<String>> = examples.iter().map(|ex| strings(ex.incomplete())).collect();
    Ok(evaluate(&p, &refs, &ctx, &x, options)?)
}

/// Rewrites every example and scores the result.
pub fn evaluate_rewriter(
    rewriter: &Rewriter,
    examples: &[DialogueExample],
    options: EvalOptions,
) -> Result<(EvalReport, Vec<Rewrite>), TrainError> {
    let rewrites = examples.iter().map(|ex| rewriter.rewrite(ex)).collect::<Result<Vec<_>, _>>()?;
    let preds: Vec<Vec<Token>> = rewrites.iter().map(|r| r.tokens.clone()).collect();
    let report = evaluate_predictions(&preds, examples, &rewriter.conn, rewriter.k, options)?;
    Ok((report, rewrites))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub ms: f64,
    pub output_len: usize,
    /// Gold rewrite length, or the output length when there is no gold.
    pub reference_len: usize,
    pub invocations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Model invocations per example (the maximum over examples).
    pub invocations: u64,
    pub examples: usize,
    /// Pearson correlation of latency with reference length.
    pub length_correlation: Option<f64>,
    #[serde(skip)]
    pub samples: Vec<LatencySample>,
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times predict + standardize + apply on each example, one at a time.
/// Inputs are prepared beforehand so tokenization is not measured.
pub fn bench_latency(rewriter: &Rewriter, examples: &[DialogueExample]) -> Result<LatencyReport, TrainError> {
    let prepared: Vec<Prepared> = examples.iter().map(|ex| rewriter.prepare(ex)).collect();
    for p in prepared.iter().take(3) {
        rewriter.rewrite_prepared(p)?;
    }
    let mut samples = Vec::with_capacity(prepared.len());
    for (ex, p) in examples.iter().zip(&prepared) {
        let before = rewriter.model.invocations();
        let start = Instant::now();
        let rw = rewriter.rewrite_prepared(p)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let invocations = rewriter.model.invocations() - before;
        let reference_len = ex.gold_rewrite().map_or(rw.tokens.len(), <[Token]>::len);
        samples.push(LatencySample { ms, output_len: rw.tokens.len(), reference_len, invocations });
    }
    let mut times: Vec<f64> = samples.iter().map(|s| s.ms).collect();
    let lens: Vec<f64> = samples.iter().map(|s| s.reference_len as f64).collect();
    let length_correlation = pearson(&times, &lens);
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let (mean_ms, median_ms, p95_ms) = if n == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let median = if n % 2 == 1 { times[n / 2] } else { (times[n / 2 - 1] + times[n / 2]) / 2.0 };
        (times.iter().sum::<f64>() / n as f64, median, percentile(&times, 0.95))
    };
    Ok(LatencyReport {
        mean_ms,
        median_ms,
        p95_ms,
        invocations: samples.iter().map(|s| s.invocations).max().unwrap_or(0),
        examples: n,
        length_correlation,
        samples,
    })
}

/// A small model configuration that trains in seconds on the synthetic corpus.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig { embed_dim: 32, hidden_dim: 32, base_channels: 8, ..ModelConfig::default() }
}
