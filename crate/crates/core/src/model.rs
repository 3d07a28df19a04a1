//! News encoder, user encoder and click predictor.
//!
//! A title is embedded, run through a same-padded CNN with ReLU, and pooled by
//! an attention whose query comes from the user's ID embedding. The user is
//! the attention-pooled combination of their clicked news, pooled again with a
//! user-derived query. Candidates are scored by inner product with the user
//! vector and normalized with a softmax.
//!
//! Padding tokens (id [`PAD`]) are dropped before the CNN, so they neither
//! feed neighbouring windows nor receive attention; their reported weight is
//! exactly zero.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Mode, Tensor};

/// Reserved padding token id.
pub const PAD: usize = 0;
/// Reserved unknown-token id.
pub const UNK: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub word_dim: usize,
    pub num_filters: usize,
    /// CNN window size, `2k+1`.
    pub window: usize,
    pub user_dim: usize,
    pub word_query_dim: usize,
    pub news_query_dim: usize,
    pub max_title_len: usize,
    pub max_history: usize,
    /// Negatives per positive.
    pub negatives: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            word_dim: 300,
            num_filters: 400,
            window: 3,
            user_dim: 50,
            word_query_dim: 200,
            news_query_dim: 200,
            max_title_len: 30,
            max_history: 50,
            negatives: 4,
            dropout: 0.2,
            learning_rate: 1e-3,
            batch_size: 100,
            epochs: 5,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("num_filters", self.num_filters),
            ("window", self.window),
            ("user_dim", self.user_dim),
            ("word_query_dim", self.word_query_dim),
            ("news_query_dim", self.news_query_dim),
            ("max_title_len", self.max_title_len),
            ("max_history", self.max_history),
            ("negatives", self.negatives),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "window must be odd, got {}",
                self.window
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Pooling used at one level of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttnKind {
    /// Query derived from the user embedding.
    Personalized,
    /// One learned query shared by every user.
    Vanilla,
    /// Mean pooling.
    None,
}

impl AttnKind {
    pub fn name(self) -> &'static str {
        match self {
            AttnKind::Personalized => "personalized",
            AttnKind::Vanilla => "vanilla",
            AttnKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "personalized" => Some(AttnKind::Personalized),
            "vanilla" => Some(AttnKind::Vanilla),
            "none" => Some(AttnKind::None),
            _ => None,
        }
    }
}

/// Pooling choice for the word level and the news level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttnConfig {
    pub word: AttnKind,
    pub news: AttnKind,
}

impl AttnConfig {
    pub const PERSONALIZED: Self = Self::both(AttnKind::Personalized);

    pub const fn both(kind: AttnKind) -> Self {
        Self {
            word: kind,
            news: kind,
        }
    }

    /// `"personalized"` for both levels, or `"<word>-<news>"` such as
    /// `"personalized-none"`.
    pub fn parse(s: &str) -> Option<Self> {
        if let Some(kind) = AttnKind::parse(s) {
            return Some(Self::both(kind));
        }
        let (w, n) = s.split_once('-')?;
        Some(Self {
            word: AttnKind::parse(w)?,
            news: AttnKind::parse(n)?,
        })
    }

    pub fn label(&self) -> alloc::string::String {
        if self.word == self.news {
            self.word.name().into()
        } else {
            format!("{}-{}", self.word.name(), self.news.name())
        }
    }
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self::PERSONALIZED
    }
}

/// Fixed slots of the parameter store.
pub mod slot {
    use crate::params::ParamId;

    pub const WORD_EMB: ParamId = ParamId(0);
    pub const CONV_FILTERS: ParamId = ParamId(1);
    pub const CONV_BIAS: ParamId = ParamId(2);
    pub const USER_EMB: ParamId = ParamId(3);
    pub const WORD_QUERY_W: ParamId = ParamId(4);
    pub const WORD_QUERY_B: ParamId = ParamId(5);
    pub const WORD_PROJ_W: ParamId = ParamId(6);
    pub const WORD_PROJ_B: ParamId = ParamId(7);
    pub const NEWS_QUERY_W: ParamId = ParamId(8);
    pub const NEWS_QUERY_B: ParamId = ParamId(9);
    pub const NEWS_PROJ_W: ParamId = ParamId(10);
    pub const NEWS_PROJ_B: ParamId = ParamId(11);
    pub const WORD_QUERY_FIXED: ParamId = ParamId(12);
    pub const NEWS_QUERY_FIXED: ParamId = ParamId(13);

    /// Store names, in slot order.
    pub const NAMES: [&str; 14] = [
        "W_e", "F_w", "b_w", "U_e", "V_w", "v_w", "W_p", "b_p", "V_d", "v_d", "W_d", "b_d",
        "q_w_bar", "q_d_bar",
    ];
}

/// Dimensions implied by hyperparameters and corpus sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub num_users: usize,
    pub word_dim: usize,
    pub num_filters: usize,
    pub window: usize,
    pub user_dim: usize,
    pub word_query_dim: usize,
    pub news_query_dim: usize,
}

impl ModelDims {
    pub fn new(hp: &HyperParams, vocab_size: usize, num_users: usize) -> Self {
        Self {
            vocab_size,
            num_users,
            word_dim: hp.word_dim,
            num_filters: hp.num_filters,
            window: hp.window,
            user_dim: hp.user_dim,
            word_query_dim: hp.word_query_dim,
            news_query_dim: hp.news_query_dim,
        }
    }

    /// Expected shape of every slot, in slot order.
    pub fn shapes(&self) -> [Vec<usize>; 14] {
        let d = *self;
        [
            alloc::vec![d.vocab_size, d.word_dim],
            alloc::vec![d.num_filters, d.window * d.word_dim],
            alloc::vec![d.num_filters],
            alloc::vec![d.num_users, d.user_dim],
            alloc::vec![d.word_query_dim, d.user_dim],
            alloc::vec![d.word_query_dim],
            alloc::vec![d.num_filters, d.word_query_dim],
            alloc::vec![d.num_filters],
            alloc::vec![d.news_query_dim, d.user_dim],
            alloc::vec![d.news_query_dim],
            alloc::vec![d.num_filters, d.news_query_dim],
            alloc::vec![d.num_filters],
            alloc::vec![d.word_query_dim],
            alloc::vec![d.news_query_dim],
        ]
    }
}

/// All trainable tensors of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    store: ParamStore,
    dims: ModelDims,
}

impl ModelParams {
    /// Random initialization: embeddings uniform in ±0.1, projections
    /// Glorot-uniform, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        if dims.vocab_size < 2 || dims.num_users == 0 {
            return Err(Error::Config(format!(
                "need vocab >= 2 and at least one user, got {} and {}",
                dims.vocab_size, dims.num_users
            )));
        }
        let shapes = dims.shapes();
        let glorot = |s: &[usize]| libm::sqrt(6.0 / (s[0] + s[1]) as f64);
        let mut store = ParamStore::new();
        for (i, shape) in shapes.iter().enumerate() {
            let id = ParamId(i);
            let t = match id {
                slot::WORD_EMB | slot::USER_EMB | slot::WORD_QUERY_FIXED | slot::NEWS_QUERY_FIXED => {
                    Tensor::uniform(shape, 0.1, rng)
                }
                slot::CONV_FILTERS
                | slot::WORD_QUERY_W
                | slot::WORD_PROJ_W
                | slot::NEWS_QUERY_W
                | slot::NEWS_PROJ_W => Tensor::uniform(shape, glorot(shape), rng),
                _ => Tensor::zeros(shape),
            };
            store.push(slot::NAMES[i], t);
        }
        Ok(Self { store, dims })
    }

    /// Wrap an existing store after checking names and shapes.
    pub fn from_store(store: ParamStore, dims: ModelDims) -> Result<Self> {
        let shapes = dims.shapes();
        if store.len() != shapes.len() {
            return dim_err("model params", &[store.len()], &[shapes.len()]);
        }
        for (i, shape) in shapes.iter().enumerate() {
            let id = ParamId(i);
            if store.name(id) != slot::NAMES[i] {
                return Err(Error::Unknown {
                    what: "parameter",
                    id: store.name(id).into(),
                });
            }
            if store.get(id).shape() != shape.as_slice() {
                return dim_err("model params", store.get(id).shape(), shape);
            }
        }
        Ok(Self { store, dims })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.store.get_mut(id)
    }

    fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.dims.num_users {
            return Err(Error::Index {
                what: "user",
                index: user,
                size: self.dims.num_users,
            });
        }
        Ok(())
    }

    /// Word-level preference query `ReLU(V_w e_u + v_w)`.
    pub fn word_query(&self, user: usize) -> Result<Tensor> {
        let mut rng = NoRng;
        let mut tape = Tape::new(&self.store);
        let mut g = Graph::new(&mut tape, self, Mode::Eval, 0.0, &mut rng);
        let q = g.query(Level::Word, user, AttnKind::Personalized)?;
        Ok(tape.value(q).clone())
    }

    /// News-level preference query `ReLU(V_d e_u + v_d)`.
    pub fn news_query(&self, user: usize) -> Result<Tensor> {
        let mut rng = NoRng;
        let mut tape = Tape::new(&self.store);
        let mut g = Graph::new(&mut tape, self, Mode::Eval, 0.0, &mut rng);
        let q = g.query(Level::News, user, AttnKind::Personalized)?;
        Ok(tape.value(q).clone())
    }

    /// Evaluation-mode news encoding.
    pub fn encode_news(&self, title: &[usize], user: usize, kind: AttnKind) -> Result<NewsRepr> {
        let mut rng = NoRng;
        let mut tape = Tape::new(&self.store);
        let mut g = Graph::new(&mut tape, self, Mode::Eval, 0.0, &mut rng);
        let key = g.key(Level::Word, user, kind)?;
        let (r, attn) = g.encode_news(title, key)?;
        Ok(NewsRepr {
            vector: tape.value(r).data().to_vec(),
            word_attention: Some(attn),
        })
    }

    /// Evaluation-mode user encoding from already encoded history news.
    pub fn encode_user(&self, history: &[NewsRepr], user: usize, kind: AttnKind) -> Result<UserRepr> {
        let mut rng = NoRng;
        let mut tape = Tape::new(&self.store);
        let mut g = Graph::new(&mut tape, self, Mode::Eval, 0.0, &mut rng);
        let nf = self.dims.num_filters;
        let mut reprs = Vec::with_capacity(history.len());
        for h in history {
            if h.vector.len() != nf {
                return dim_err("encode_user", &[h.vector.len()], &[nf]);
            }
            reprs.push(g.tape.constant(Tensor::vector(h.vector.clone())));
        }
        let key = g.key(Level::News, user, kind)?;
        let (u, attn) = g.encode_user(&reprs, key)?;
        Ok(UserRepr {
            vector: tape.value(u).data().to_vec(),
            news_attention: Some(attn),
        })
    }

    /// Evaluation-mode forward pass over one user, history and candidate set.
    pub fn forward(
        &self,
        user: usize,
        history: &[&[usize]],
        candidates: &[&[usize]],
        attn: AttnConfig,
    ) -> Result<ForwardOutput> {
        let mut rng = NoRng;
        let mut tape = Tape::new(&self.store);
        let mut g = Graph::new(&mut tape, self, Mode::Eval, 0.0, &mut rng);
        let out = g.forward(user, history, candidates, attn)?;
        Ok(out.resolve(&tape))
    }

    /// Evaluation-mode candidate scores `r'ᵀu`, skipping the softmax.
    pub fn score(
        &self,
        user: usize,
        history: &[&[usize]],
        candidates: &[&[usize]],
        attn: AttnConfig,
    ) -> Result<Vec<f64>> {
        Ok(self.forward(user, history, candidates, attn)?.scores)
    }
}

pub fn score_candidates(user: &UserRepr, candidates: &[NewsRepr]) -> Result<Tensor> {
    if candidates.is_empty() {
        return dim_err("score_candidates", &[0], &[user.vector.len()]);
    }
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.vector.len() != user.vector.len() {
            return dim_err("score_candidates", &[c.vector.len()], &[user.vector.len()]);
        }
        out.push(tensor::dot(&c.vector, &user.vector));
    }
    Ok(Tensor::vector(out))
}

pub fn click_probs(scores: &Tensor) -> Tensor {
    tensor::softmax(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewsRepr {
    pub vector: Vec<f64>,
    /// Weight per title position (length = title length), zeros at padding.
    pub word_attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRepr {
    pub vector: Vec<f64>,
    /// Weight per history item.
    pub news_attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub user_vector: Vec<f64>,
    pub news_attention: Vec<f64>,
    pub history_word_attention: Vec<Vec<f64>>,
    pub candidate_word_attention: Vec<Vec<f64>>,
}

/// Tape handles produced by [`Graph::forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub scores: Var,
    pub probs: Var,
    pub user: Var,
    pub news_attention: Vec<f64>,
    pub history_word_attention: Vec<Vec<f64>>,
    pub candidate_word_attention: Vec<Vec<f64>>,
}

impl ForwardVars {
    pub fn resolve(self, tape: &Tape<'_>) -> ForwardOutput {
        ForwardOutput {
            scores: tape.value(self.scores).data().to_vec(),
            probs: tape.value(self.probs).data().to_vec(),
            user_vector: tape.value(self.user).data().to_vec(),
            news_attention: self.news_attention,
            history_word_attention: self.history_word_attention,
            candidate_word_attention: self.candidate_word_attention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Level {
    Word,
    News,
}

/// Attention key for one level: `Some(tanh(W q + b))`, or `None` for mean
/// pooling.
#[derive(Debug, Clone, Copy)]
pub struct AttnKey(Option<Var>);

/// Records the model's computation for one sample onto a tape.
pub struct Graph<'t, 'p, R: ?Sized> {
    pub tape: &'t mut Tape<'p>,
    params: &'p ModelParams,
    vars: [Option<Var>; 14],
    mode: Mode,
    dropout: f64,
    rng: &'t mut R,
}

impl<'t, 'p, R: Rng + ?Sized> Graph<'t, 'p, R> {
    pub fn new(
        tape: &'t mut Tape<'p>,
        params: &'p ModelParams,
        mode: Mode,
        dropout: f64,
        rng: &'t mut R,
    ) -> Self {
        Self {
            tape,
            params,
            vars: [None; 14],
            mode,
            dropout,
            rng,
        }
    }

    fn p(&mut self, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| self.tape.param(id))
    }

    fn query(&mut self, level: Level, user: usize, kind: AttnKind) -> Result<Var> {
        let (w, b, fixed) = match level {
            Level::Word => (slot::WORD_QUERY_W, slot::WORD_QUERY_B, slot::WORD_QUERY_FIXED),
            Level::News => (slot::NEWS_QUERY_W, slot::NEWS_QUERY_B, slot::NEWS_QUERY_FIXED),
        };
        if kind == AttnKind::Vanilla {
            return Ok(self.p(fixed));
        }
        self.params.check_user(user)?;
        let table = self.p(slot::USER_EMB);
        let e_u = self.tape.row(table, user)?;
        let wv = self.p(w);
        let bv = self.p(b);
        let lin = self.tape.matvec(wv, e_u)?;
        let pre = self.tape.add(lin, bv)?;
        Ok(self.tape.relu(pre))
    }

    fn key(&mut self, level: Level, user: usize, kind: AttnKind) -> Result<AttnKey> {
        if kind == AttnKind::None {
            return Ok(AttnKey(None));
        }
        let q = self.query(level, user, kind)?;
        let (w, b) = match level {
            Level::Word => (slot::WORD_PROJ_W, slot::WORD_PROJ_B),
            Level::News => (slot::NEWS_PROJ_W, slot::NEWS_PROJ_B),
        };
        let wv = self.p(w);
        let bv = self.p(b);
        let lin = self.tape.matvec(wv, q)?;
        let pre = self.tape.add(lin, bv)?;
        Ok(AttnKey(Some(self.tape.tanh(pre))))
    }

    pub fn word_key(&mut self, user: usize, kind: AttnKind) -> Result<AttnKey> {
        self.key(Level::Word, user, kind)
    }

    pub fn news_key(&mut self, user: usize, kind: AttnKind) -> Result<AttnKey> {
        self.key(Level::News, user, kind)
    }

    /// Encode one padded title; returns the representation and the weight of
    /// every title position.
    pub fn encode_news(&mut self, title: &[usize], key: AttnKey) -> Result<(Var, Vec<f64>)> {
        if title.is_empty() {
            return dim_err("encode_news", &[0], &[]);
        }
        let positions: Vec<usize> = (0..title.len()).filter(|&i| title[i] != PAD).collect();
        // An all-padding title is encoded from its first slot alone.
        let positions = if positions.is_empty() {
            alloc::vec![0]
        } else {
            positions
        };
        let ids: Vec<usize> = positions.iter().map(|&i| title[i]).collect();

        let table = self.p(slot::WORD_EMB);
        let emb = self.tape.embedding_lookup(table, &ids)?;
        let emb = self.tape.dropout(emb, self.dropout, self.mode, self.rng)?;
        let f = self.p(slot::CONV_FILTERS);
        let b = self.p(slot::CONV_BIAS);
        let conv = self.tape.conv1d_seq(emb, f, b)?;
        let ctx = self.tape.relu(conv);
        let ctx = self.tape.dropout(ctx, self.dropout, self.mode, self.rng)?;

        let (repr, weights) = self.pool(ctx, key)?;
        let mut full = alloc::vec![0.0; title.len()];
        for (&pos, w) in positions.iter().zip(weights) {
            full[pos] = w;
        }
        Ok((repr, full))
    }

    /// Pool encoded history news into the user vector.
    pub fn encode_user(&mut self, history: &[Var], key: AttnKey) -> Result<(Var, Vec<f64>)> {
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        let rows = self.tape.stack(history)?;
        self.pool(rows, key)
    }

    fn pool(&mut self, rows: Var, key: AttnKey) -> Result<(Var, Vec<f64>)> {
        let n = self.tape.value(rows).rows();
        match key.0 {
            None => {
                let mean = self.tape.mean_rows(rows)?;
                Ok((mean, alloc::vec![1.0 / n as f64; n]))
            }
            Some(k) => {
                let scores = self.tape.matvec(rows, k)?;
                let alpha = self.tape.softmax(scores)?;
                let pooled = self.tape.weighted_sum(alpha, rows)?;
                Ok((pooled, self.tape.value(alpha).data().to_vec()))
            }
        }
    }

    /// Full model: encode history and candidates with the same news encoder,
    /// pool the user, score and normalize.
    pub fn forward(
        &mut self,
        user: usize,
        history: &[&[usize]],
        candidates: &[&[usize]],
        attn: AttnConfig,
    ) -> Result<ForwardVars> {
        if candidates.is_empty() {
            return dim_err("forward", &[0], &[]);
        }
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        let wkey = self.word_key(user, attn.word)?;
        let mut hist_vars = Vec::with_capacity(history.len());
        let mut hist_attn = Vec::with_capacity(history.len());
        for title in history {
            let (r, a) = self.encode_news(title, wkey)?;
            hist_vars.push(r);
            hist_attn.push(a);
        }
        let nkey = self.news_key(user, attn.news)?;
        let (u, news_attention) = self.encode_user(&hist_vars, nkey)?;

        let mut cand_vars = Vec::with_capacity(candidates.len());
        let mut cand_attn = Vec::with_capacity(candidates.len());
        for title in candidates {
            let (r, a) = self.encode_news(title, wkey)?;
            cand_vars.push(r);
            cand_attn.push(a);
        }
        let cands = self.tape.stack(&cand_vars)?;
        let scores = self.tape.matvec(cands, u)?;
        let probs = self.tape.softmax(scores)?;
        Ok(ForwardVars {
            scores,
            probs,
            user: u,
            news_attention,
            history_word_attention: hist_attn,
            candidate_word_attention: cand_attn,
        })
    }
}

/// Generator for evaluation-mode graphs, which never draw random numbers.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation mode draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation mode draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation mode draws no random numbers")
    }
}
