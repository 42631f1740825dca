//! The edit-matrix predictor: BiLSTM context layer, word-pair encoding layer
//! and a small U-shaped segmentation network.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::{Token, TokenKind};
use crate::edit::{EditMatrix, EditType};
use crate::nn::{
    bilstm, normal, xavier_uniform, BnStats, Checkpoint, CheckpointError, ConvBnRelu, Graph, KernelError, LstmParams,
    ParamId, ParamKind, ParamStore, Tensor, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub base_channels: usize,
    /// Loss weights for None, Substitute, Insert.
    pub class_weights: [f64; 3],
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: Vocabulary::RESERVED,
            embed_dim: 100,
            hidden_dim: 200,
            base_channels: 32,
            class_weights: [1.0, 5.0, 5.0],
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("model config field {0} must be positive")]
    NotPositive(&'static str),
    #[error("class weights must be finite and positive, got {0:?}")]
    ClassWeights([f64; 3]),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("base_channels", self.base_channels),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(ConfigError::NotPositive(name));
            }
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(ConfigError::ClassWeights(self.class_weights));
        }
        Ok(())
    }

    /// Channels of the word-pair feature map, `2H + 2`.
    pub fn feature_channels(&self) -> usize {
        2 * self.hidden_dim + 2
    }
}

/// Token-to-id map. Ids 0, 1 and 2 are reserved for unknown words, `[S]` and
/// `[E]`; the rest follow order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNK: usize = 0;
    pub const SEP: usize = 1;
    pub const END: usize = 2;
    pub const RESERVED: usize = 3;

    pub fn new() -> Self {
        Vocabulary {
            words: vec!["<unk>".into(), crate::dialogue::SEP_TEXT.into(), crate::dialogue::END_TEXT.into()],
            index: HashMap::new(),
        }
    }

    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Vocabulary::new();
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    pub fn insert(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[Self::RESERVED..]
    }

    pub fn id(&self, token: &Token) -> usize {
        match token.kind() {
            TokenKind::SepS => Self::SEP,
            TokenKind::EndE => Self::END,
            _ => self.index.get(token.text()).copied().unwrap_or(Self::UNK),
        }
    }

    pub fn encode(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

/// Encoded model input: ids of the joined context `c` and of `x ++ [E]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub context: Vec<usize>,
    pub utterance: Vec<usize>,
}

impl ModelInput {
    pub fn new(vocab: &Vocabulary, c: &[Token], x_prepared: &[Token]) -> Self {
        ModelInput { context: vocab.encode(c), utterance: vocab.encode(x_prepared) }
    }

    pub fn rows(&self) -> usize {
        self.context.len()
    }

    pub fn cols(&self) -> usize {
        self.utterance.len()
    }
}

/// Smallest multiple of 4 (at least 4) holding `len`.
pub fn grid_size(len: usize) -> usize {
    len.div_ceil(4).max(1) * 4
}

/// Feature maps zero-padded to a shared grid and stacked.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    /// `[B, D, rows, cols]`.
    pub features: Var,
    pub rows: usize,
    pub cols: usize,
    /// True region `(M, N)` of each example.
    pub dims: Vec<(usize, usize)>,
    /// `B · rows · cols` flags, true on real cells.
    pub mask: Vec<bool>,
}

/// Pads `[D, Mi, Ni]` maps to the smallest grid fitting all of them.
pub fn pad_to_grid(g: &mut Graph, maps: &[Var]) -> Result<PaddedBatch, KernelError> {
    let dims: Vec<(usize, usize)> = maps.iter().map(|&v| (g.value(v).dim(1), g.value(v).dim(2))).collect();
    let rows = grid_size(dims.iter().map(|d| d.0).max().unwrap_or(0));
    let cols = grid_size(dims.iter().map(|d| d.1).max().unwrap_or(0));
    let features = g.pad_stack(maps, rows, cols)?;
    let mut mask = vec![false; maps.len() * rows * cols];
    for (b, &(m, n)) in dims.iter().enumerate() {
        for r in 0..m {
            let base = (b * rows + r) * cols;
            mask[base..base + n].iter_mut().for_each(|v| *v = true);
        }
    }
    Ok(PaddedBatch { features, rows, cols, dims, mask })
}

#[derive(Debug, Clone, Copy)]
struct Deconv {
    weight: ParamId,
    bias: ParamId,
}

impl Deconv {
    fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            ParamKind::Trainable,
            xavier_uniform(rng, &[cin, cout, 2, 2], cin * 4, cout * 4),
        );
        let bias = store.add(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros(&[cout]));
        Deconv { weight, bias }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, KernelError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.deconv2(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    embedding: ParamId,
    lstm_fwd: LstmParams,
    lstm_bwd: LstmParams,
    bilinear: ParamId,
    down1: [ConvBnRelu; 2],
    down2: [ConvBnRelu; 2],
    up1: [ConvBnRelu; 2],
    up1_deconv: Deconv,
    up2: [ConvBnRelu; 2],
    up2_deconv: Deconv,
    out_weight: ParamId,
    out_bias: ParamId,
}

/// Batch-norm statistics gathered during a training forward pass.
pub type BnUpdates = Vec<(ConvBnRelu, BnStats)>;

/// The trainable edit-matrix predictor.
#[derive(Debug)]
pub struct RunModel {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
    invocations: AtomicU64,
}

impl Clone for RunModel {
    fn clone(&self) -> Self {
        RunModel {
            config: self.config.clone(),
            store: self.store.clone(),
            layout: self.layout,
            invocations: AtomicU64::new(self.invocations()),
        }
    }
}

impl RunModel {
    /// Freshly initialized model: Xavier-uniform weights, zero biases and
    /// `N(0, 0.1)` embeddings, all drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (e, h, c0) = (config.embed_dim, config.hidden_dim, config.base_channels);
        let d = config.feature_channels();
        let rng = &mut rng;
        let s = &mut store;
        let embedding = s.add("embedding", ParamKind::Trainable, normal(rng, &[config.vocab_size, e], 0.1));
        let lstm_fwd = LstmParams::register(s, rng, "lstm.fwd", e, h);
        let lstm_bwd = LstmParams::register(s, rng, "lstm.bwd", e, h);
        let bilinear = s.add("bilinear", ParamKind::Trainable, xavier_uniform(rng, &[2 * h, 2 * h], 2 * h, 2 * h));
        let down1 = [ConvBnRelu::register(s, rng, "down1.0", d, c0), ConvBnRelu::register(s, rng, "down1.1", c0, c0)];
        let down2 = [
            ConvBnRelu::register(s, rng, "down2.0", c0, 2 * c0),
            ConvBnRelu::register(s, rng, "down2.1", 2 * c0, 2 * c0),
        ];
        let up1 = [
            ConvBnRelu::register(s, rng, "up1.0", 2 * c0, 4 * c0),
            ConvBnRelu::register(s, rng, "up1.1", 4 * c0, 4 * c0),
        ];
        let up1_deconv = Deconv::register(s, rng, "up1.deconv", 4 * c0, 2 * c0);
        let up2 = [
            ConvBnRelu::register(s, rng, "up2.0", 4 * c0, 2 * c0),
            ConvBnRelu::register(s, rng, "up2.1", 2 * c0, 2 * c0),
        ];
        let up2_deconv = Deconv::register(s, rng, "up2.deconv", 2 * c0, c0);
        let out_weight = s.add("out.weight", ParamKind::Trainable, xavier_uniform(rng, &[2 * c0, 3], 2 * c0, 3));
        let out_bias = s.add("out.bias", ParamKind::Trainable, Tensor::zeros(&[3]));
        let layout = Layout {
            embedding,
            lstm_fwd,
            lstm_bwd,
            bilinear,
            down1,
            down2,
            up1,
            up1_deconv,
            up2,
            up2_deconv,
            out_weight,
            out_bias,
        };
        Ok(RunModel { config, store, layout, invocations: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of [`RunModel::predict`] calls so far.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    /// Joint BiLSTM pass over `c ++ x`; returns `(U: [M, 2H], Hx: [N, 2H])`.
    pub fn context_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ModelInput,
    ) -> Result<(Var, Var), KernelError> {
        let ids: Vec<usize> = input.context.iter().chain(&input.utterance).copied().collect();
        let table = g.param(store, self.layout.embedding);
        let emb = g.embedding(table, &ids)?;
        let states = bilstm(g, store, emb, &self.layout.lstm_fwd, &self.layout.lstm_bwd)?;
        let u = g.narrow(states, 0, input.rows())?;
        let hx = g.narrow(states, input.rows(), input.cols())?;
        Ok((u, hx))
    }

    /// Word-pair feature map `[2H + 2, M, N]`.
    pub fn encoding_layer(&self, g: &mut Graph, store: &ParamStore, u: Var, hx: Var) -> Result<Var, KernelError> {
        let w = g.param(store, self.layout.bilinear);
        g.pair_features(u, hx, w)
    }

    /// U-shaped network over `[B, D, R, C]` (R, C divisible by 4). Returns
    /// per-cell logits `[B · R · C, 3]`.
    pub fn segmentation_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        training: bool,
        updates: &mut BnUpdates,
    ) -> Result<Var, KernelError> {
        let l = &self.layout;
        let mut block = |g: &mut Graph, pair: &[ConvBnRelu; 2], x: Var| -> Result<Var, KernelError> {
            let h = pair[0].forward(g, store, x, training, updates)?;
            pair[1].forward(g, store, h, training, updates)
        };
        let skip1 = block(g, &l.down1, x)?;
        let h = g.maxpool2(skip1)?;
        let skip2 = block(g, &l.down2, h)?;
        let h = g.maxpool2(skip2)?;
        let h = block(g, &l.up1, h)?;
        let h = l.up1_deconv.forward(g, store, h)?;
        let h = g.concat(&[h, skip2], 1)?;
        let h = block(g, &l.up2, h)?;
        let h = l.up2_deconv.forward(g, store, h)?;
        let h = g.concat(&[h, skip1], 1)?;
        let cells = g.channels_last(h)?;
        let w = g.param(store, l.out_weight);
        let b = g.param(store, l.out_bias);
        g.linear(cells, w, b)
    }

    /// Logits for a batch together with its padding layout.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[&ModelInput],
        training: bool,
        updates: &mut BnUpdates,
    ) -> Result<(Var, PaddedBatch), KernelError> {
        let mut maps = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (u, hx) = self.context_layer(g, store, input)?;
            maps.push(self.encoding_layer(g, store, u, hx)?);
        }
        let padded = pad_to_grid(g, &maps)?;
        let logits = self.segmentation_layer(g, store, padded.features, training, updates)?;
        Ok((logits, padded))
    }

    /// Weighted cross-entropy, averaged over each example's real cells and
    /// then over the examples that have any.
    pub fn forward_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[(&ModelInput, &EditMatrix)],
        training: bool,
        updates: &mut BnUpdates,
    ) -> Result<Var, KernelError> {
        let inputs: Vec<&ModelInput> = batch.iter().map(|(i, _)| *i).collect();
        for (input, gold) in batch {
            if (gold.rows(), gold.cols()) != (input.rows(), input.cols()) {
                return Err(KernelError::Shape {
                    op: "forward_loss",
                    detail: format!("gold {}x{} vs input {}x{}", gold.rows(), gold.cols(), input.rows(), input.cols()),
                });
            }
        }
        let (logits, padded) = self.forward(g, store, &inputs, training, updates)?;
        let (rows, cols) = (padded.rows, padded.cols);
        let mut targets = vec![0usize; batch.len() * rows * cols];
        let mut scale = vec![0.0; targets.len()];
        let live = padded.dims.iter().filter(|(m, n)| m * n > 0).count();
        if live == 0 {
            return Err(KernelError::AllMasked);
        }
        for (b, (_, gold)) in batch.iter().enumerate() {
            let cells = gold.rows() * gold.cols();
            if cells == 0 {
                continue;
            }
            let s = 1.0 / (live * cells) as f64;
            for r in 0..gold.rows() {
                for c in 0..gold.cols() {
                    let k = (b * rows + r) * cols + c;
                    targets[k] = gold.get(r, c).index();
                    scale[k] = s;
                }
            }
        }
        g.weighted_cross_entropy_scaled(logits, &targets, &self.config.class_weights, &scale)
    }

    /// Eval-mode logits of one example, `[R · C, 3]` on its padded grid.
    pub fn logits(&self, input: &ModelInput) -> Result<(Tensor, PaddedBatch), KernelError> {
        let mut g = Graph::new();
        let (logits, padded) = self.forward(&mut g, &self.store, &[input], false, &mut Vec::new())?;
        Ok((g.value(logits).clone(), padded))
    }

    /// Predicted edit matrix from a single eval-mode forward pass.
    pub fn predict(&self, input: &ModelInput) -> Result<EditMatrix, KernelError> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let (logits, padded) = self.logits(input)?;
        Ok(decode_logits(logits.data(), padded.cols, input.rows(), input.cols()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for p in self.store.params() {
            ck.push(p.name.clone(), p.value.clone());
        }
        ck
    }

    /// Rebuilds a model of shape `config` and overwrites every tensor from `ck`.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self, ModelLoadError> {
        let mut model = RunModel::new(config, 0)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let p = model.store.get(id);
            let t = ck.require(&p.name, p.value.shape())?.clone();
            *model.store.value_mut(id) = t;
        }
        Ok(model)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelLoadError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Per-cell argmax over the true `m × n` region of a `[_, 3]` logit grid with
/// `grid_cols` columns. Ties go to the lowest class index.
pub fn decode_logits(logits: &[f64], grid_cols: usize, m: usize, n: usize) -> EditMatrix {
    let mut y = EditMatrix::new(m, n);
    for r in 0..m {
        for c in 0..n {
            let k = (r * grid_cols + c) * 3;
            let cell = &logits[k..k + 3];
            let mut best = 0;
            for i in 1..3 {
                if cell[i] > cell[best] {
                    best = i;
                }
            }
            y.set(r, c, EditType::from_index(best).expect("three classes"));
        }
    }
    y
}
