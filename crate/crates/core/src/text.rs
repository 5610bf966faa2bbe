//! Sentence side of the model: tokenization, frozen embedding lookup, the
//! two fragment LSTMs and the merge layer `u = tanh(W_u [u_L | u_R])`.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::glorot;
use crate::tensor::{Graph, Tensor, Var};

/// Placeholder token for the missing word.
pub const BLANK_MARKER: &str = "_____";

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace())
}

/// Lowercases and strips leading/trailing punctuation. May return "".
pub fn normalize_token(raw: &str) -> String {
    raw.trim_matches(is_punct).to_lowercase()
}

fn is_marker(raw: &str) -> bool {
    raw.trim_matches(|c: char| c != '_' && is_punct(c)) == BLANK_MARKER
}

/// Splits a sentence holding exactly one [`BLANK_MARKER`] into its left and
/// right fragments, both in sentence order.
pub fn tokenize(raw: &str) -> Result<(Vec<String>, Vec<String>)> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut markers = 0;
    for tok in raw.split_whitespace() {
        if is_marker(tok) {
            markers += 1;
            continue;
        }
        let t = normalize_token(tok);
        if t.is_empty() {
            continue;
        }
        if markers == 0 {
            left.push(t);
        } else {
            right.push(t);
        }
    }
    if markers != 1 {
        return Err(Error::format(
            raw.to_string(),
            format!("expected exactly one blank marker {BLANK_MARKER:?}, found {markers}"),
        ));
    }
    Ok((left, right))
}

/// One fill-in-the-blank record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlankSentence {
    pub left_tokens: Vec<String>,
    pub right_tokens: Vec<String>,
    pub answer: String,
    pub video_id: String,
}

impl BlankSentence {
    pub fn parse(video_id: &str, sentence: &str, answer: &str) -> Result<Self> {
        let (left_tokens, right_tokens) = tokenize(sentence)?;
        let answer = normalize_token(answer.trim());
        if answer.is_empty() || answer.contains(char::is_whitespace) {
            return Err(Error::format(
                sentence.to_string(),
                format!("answer must be a single nonempty token, got {answer:?}"),
            ));
        }
        Ok(Self {
            left_tokens,
            right_tokens,
            answer,
            video_id: video_id.to_string(),
        })
    }
}

/// Frozen word vectors. Out-of-vocabulary words map to the mean row.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    index: HashMap<String, usize>,
    words: Vec<String>,
    vectors: Vec<f64>,
    dim: usize,
    unk: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let Some(dim) = entries.first().map(|(_, v)| v.len()) else {
            return Err(Error::Empty("embedding table with no rows".into()));
        };
        if dim == 0 {
            return Err(Error::Empty("embedding width is zero".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        let mut words = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (i, (w, v)) in entries.into_iter().enumerate() {
            if v.len() != dim {
                return Err(Error::dim("embedding row", &[dim], &[v.len()]));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::format(
                    format!("row {}", i + 1),
                    format!("duplicate word {w:?}"),
                ));
            }
            words.push(w);
            vectors.extend(v);
        }
        let n = words.len() as f64;
        let mut unk = vec![0.0; dim];
        for row in vectors.chunks(dim) {
            unk.iter_mut().zip(row).for_each(|(u, x)| *u += x);
        }
        unk.iter_mut().for_each(|u| *u /= n);
        Ok(Self {
            index,
            words,
            vectors,
            dim,
            unk,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn unk_vector(&self) -> &[f64] {
        &self.unk
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn lookup(&self, word: &str) -> &[f64] {
        match self.index_of(word) {
            Some(i) => self.row(i),
            None => &self.unk,
        }
    }

    /// One vector per token, order preserved.
    pub fn embed_lookup<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<&[f64]> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }
}

/// Parameters of one LSTM. Gate blocks are stacked `[input, forget, cell,
/// output]` along the rows of `w_x`, `w_h` and `bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let w_x = glorot(rng, 4 * hidden, input);
        let w_h = glorot(rng, 4 * hidden, hidden);
        let bias = Tensor::from_fn(&[4 * hidden], |i| {
            if (hidden..2 * hidden).contains(&i) {
                1.0
            } else {
                0.0
            }
        });
        Self { w_x, w_h, bias }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[4 * hidden, input]),
            w_h: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> LstmVars {
        let mut reg = |t: &Tensor| if trainable { g.param(t) } else { g.leaf(t) };
        LstmVars {
            w_x: reg(&self.w_x),
            w_h: reg(&self.w_h),
            bias: reg(&self.bias),
            hidden: self.hidden(),
        }
    }
}

/// [`LstmParams`] as recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// One LSTM step: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(g: &mut Graph, x: Var, h: Var, c: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let n = p.hidden;
    if g.shape(h) != [n] || g.shape(c) != [n] {
        return Err(Error::dim("lstm_step", &[n], g.shape(h)));
    }
    let zx = g.matvec(p.w_x, x)?;
    let zh = g.matvec(p.w_h, h)?;
    let z = g.add(zx, zh)?;
    let z = g.add(z, p.bias)?;
    let zi = g.slice(z, 0, n)?;
    let zf = g.slice(z, n, n)?;
    let zg = g.slice(z, 2 * n, n)?;
    let zo = g.slice(z, 3 * n, n)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Which side of the blank a fragment sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Runs an LSTM over a fragment from a zero state and returns the final
/// hidden state (zeros for an empty fragment). With `right_reverse`, the
/// right fragment is consumed back to front so both encoders finish next to
/// the blank.
pub fn encode_fragment(
    g: &mut Graph,
    vecs: &[&[f64]],
    p: &LstmVars,
    side: Side,
    right_reverse: bool,
) -> Result<Var> {
    let n = p.hidden;
    let mut h = g.zeros(&[n])?;
    let mut c = g.zeros(&[n])?;
    let reversed = side == Side::Right && right_reverse;
    let mut step = |g: &mut Graph, v: &[f64]| -> Result<()> {
        let x = g.constant(&[v.len()], v.to_vec())?;
        (h, c) = lstm_step(g, x, h, c, p)?;
        Ok(())
    };
    if reversed {
        for v in vecs.iter().rev() {
            step(g, v)?;
        }
    } else {
        for v in vecs {
            step(g, v)?;
        }
    }
    Ok(h)
}

/// `u = tanh(W_u · [u_L | u_R])`.
pub fn merge(g: &mut Graph, u_left: Var, u_right: Var, w_u: Var) -> Result<Var> {
    let cat = g.concat(&[u_left, u_right])?;
    let z = g.matvec(w_u, cat)?;
    g.tanh(z)
}
