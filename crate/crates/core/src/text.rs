//! Expression encoder: tokenization, vocabulary, and a single-layer LSTM whose
//! final hidden state is L2-normalized.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const UNK: &str = "<unk>";

pub const EMBEDDING: &str = "text.embedding";
pub const LSTM_WEIGHT: &str = "text.lstm.weight";
pub const LSTM_BIAS: &str = "text.lstm.bias";

/// Guard for normalizing the final hidden state.
pub const NORM_EPS: f64 = 1e-12;

/// Lowercases, splits on whitespace, and trims non-alphanumeric characters
/// from both ends of every piece. An expression with no surviving pieces
/// becomes the single token `<unk>`.
pub fn tokenize(expression: &str) -> Vec<String> {
    let pieces: Vec<String> = expression
        .split_whitespace()
        .map(|p| p.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|p| !p.is_empty())
        .collect();
    if pieces.is_empty() {
        vec![UNK.to_string()]
    } else {
        pieces
    }
}

/// Dense token to index map with `<unk>` at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an explicit token list; `<unk>` is prepended if absent.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = vec![UNK.to_string()];
        for t in tokens {
            let t = t.into();
            if t != UNK {
                list.push(t);
            }
        }
        let mut index = HashMap::with_capacity(list.len());
        for (i, t) in list.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("invalid token {t:?} at line {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?} at line {i}")));
            }
        }
        Ok(Vocabulary { tokens: list, index })
    }

    /// Every distinct token of the given expressions, sorted.
    pub fn build<'a>(expressions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = expressions.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        Vocabulary::from_tokens(words).expect("tokenize yields valid distinct tokens")
    }

    /// Parses the one-token-per-line file format; line 0 must be `<unk>`.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        match lines.first() {
            Some(&UNK) => {}
            other => {
                return Err(Error::format("vocabulary", format!("line 0 must be {UNK:?}, found {other:?}")));
            }
        }
        Vocabulary::from_tokens(lines)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Hex SHA-256 of the file representation.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSequence {
        let ids: Vec<usize> = tokens.iter().map(|t| self.get(t.as_ref()).unwrap_or(0)).collect();
        if ids.is_empty() {
            TokenSequence(vec![0])
        } else {
            TokenSequence(ids)
        }
    }

    pub fn encode(&self, expression: &str) -> TokenSequence {
        self.encode_tokens(&tokenize(expression))
    }
}

/// Token indices of one expression; never empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_embed: usize,
    pub d_text: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_embed: 32, d_text: 64 }
    }
}

/// Embedding and LSTM weights; uniform in `[-0.08, 0.08]` except the forget
/// gate bias, which starts at 1.
pub fn init_params<R: Rng + ?Sized>(params: &mut ParamStore, vocab_size: usize, cfg: EncoderConfig, rng: &mut R) {
    let d = cfg.d_text;
    params.insert(EMBEDDING, Tensor::uniform(&[vocab_size, cfg.d_embed], 0.08, rng));
    params.insert(LSTM_WEIGHT, Tensor::uniform(&[cfg.d_embed + d, 4 * d], 0.08, rng));
    let mut bias = Tensor::uniform(&[4 * d], 0.08, rng);
    bias.data_mut()[d..2 * d].fill(1.0);
    params.insert(LSTM_BIAS, bias);
}

/// Fused LSTM weights on a tape. Gate columns are ordered input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub weight: Var,
    pub bias: Var,
}

/// One LSTM step: `[x; h_prev] * W + b` split into `(i, f, o, g)`;
/// `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_step(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, lstm: LstmVars) -> Result<(Var, Var)> {
    let d = tape.value(h_prev).len();
    let w_shape = tape.value(lstm.weight).shape().to_vec();
    let inputs = tape.value(x).len() + d;
    if w_shape != [inputs, 4 * d] || tape.value(lstm.bias).shape() != [4 * d] || tape.value(c_prev).len() != d {
        return Err(Error::dim(
            "lstm_step",
            format!(
                "x {:?}, h {:?}, c {:?} incompatible with weight {w_shape:?}, bias {:?}",
                tape.value(x).shape(),
                tape.value(h_prev).shape(),
                tape.value(c_prev).shape(),
                tape.value(lstm.bias).shape()
            ),
        ));
    }
    let xh = tape.concat(x, h_prev)?;
    let row = tape.reshape(xh, vec![1, inputs])?;
    let pre = tape.matmul(row, lstm.weight)?;
    let pre = tape.reshape(pre, vec![4 * d])?;
    let gates = tape.add(pre, lstm.bias)?;
    let i = tape.slice(gates, 0, d)?;
    let f = tape.slice(gates, d, d)?;
    let o = tape.slice(gates, 2 * d, d)?;
    let g = tape.slice(gates, 3 * d, d)?;
    let (i, f, o, g) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o), tape.tanh(g));
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs the LSTM from a zero state over the embedded tokens and returns the
/// L2-normalized final hidden state `[d_text]`.
pub fn encode_expression(tape: &mut Tape, bound: &Bound, tokens: &TokenSequence) -> Result<Var> {
    let table = bound.var(EMBEDDING)?;
    let lstm = LstmVars { weight: bound.var(LSTM_WEIGHT)?, bias: bound.var(LSTM_BIAS)? };
    let vocab = tape.value(table).shape()[0];
    if tokens.is_empty() {
        return Err(Error::contract("encode_expression", "empty token sequence"));
    }
    if let Some(&bad) = tokens.0.iter().find(|&&t| t >= vocab) {
        return Err(Error::contract("encode_expression", format!("token index {bad} >= vocabulary size {vocab}")));
    }
    let d = tape.value(lstm.bias).len() / 4;
    let mut h = tape.constant(Tensor::zeros(&[d]));
    let mut c = tape.constant(Tensor::zeros(&[d]));
    for &t in &tokens.0 {
        let x = tape.row(table, t)?;
        (h, c) = lstm_step(tape, x, h, c, lstm)?;
    }
    tape.l2_normalize(h, NORM_EPS)
}
