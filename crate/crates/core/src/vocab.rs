//! Token alphabet and conversion between residue strings and token sequences.
//!
//! Ids are fixed by position in [`SYMBOLS`]: the 20 canonical residues in
//! alphabetical one-letter order, the ambiguous residue `X`, then the special
//! tokens. Nothing here depends on hashing, so ids are identical in every
//! process.

use crate::error::{Error, Result};

/// Number of symbols in the vocabulary.
pub const VOCAB_SIZE: usize = 26;
/// Fixed source length after padding (MHC + SEP + peptide).
pub const SRC_LEN: usize = 55;
/// Maximum number of residues in a receptor sequence.
pub const MAX_TCR_LEN: usize = 26;
/// Maximum target length: SOS + residues + EOS.
pub const MAX_TGT_LEN: usize = MAX_TCR_LEN + 2;

/// The 20 canonical amino acids, in id order.
pub const CANONICAL: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W', 'Y',
];

pub const SYMBOLS: [&str; VOCAB_SIZE] = [
    "A", "C", "D", "E", "F", "G", "H", "I", "K", "L", "M", "N", "P", "Q", "R", "S", "T", "V", "W", "Y",
    "X", "<PAD>", "<SEP>", "<SOS>", "<EOS>", "<UNK>",
];

/// Token id. Always `< VOCAB_SIZE`.
pub type TokenId = usize;

pub const X: TokenId = 20;
pub const PAD: TokenId = 21;
pub const SEP: TokenId = 22;
pub const SOS: TokenId = 23;
pub const EOS: TokenId = 24;
/// Reserved; never produced by the encoders.
pub const UNK: TokenId = 25;

/// The fixed 26-symbol vocabulary shared by source and target streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

/// Returns the canonical vocabulary.
pub fn build_vocab() -> Vocabulary {
    Vocabulary { symbols: SYMBOLS.iter().map(|s| s.to_string()).collect() }
}

impl Default for Vocabulary {
    fn default() -> Self {
        build_vocab()
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.symbols.iter().position(|s| s == symbol)
    }

    /// Id of a residue character (canonical or `X`), case-sensitive.
    pub fn residue_id(&self, c: char) -> Option<TokenId> {
        residue_id(c)
    }
}

/// Id of a residue character; `None` for anything outside the 21-letter
/// residue alphabet.
pub fn residue_id(c: char) -> Option<TokenId> {
    if c == 'X' {
        return Some(X);
    }
    CANONICAL.iter().position(|&a| a == c)
}

/// `true` for the 21 residue ids (canonical plus `X`).
pub fn is_residue(id: TokenId) -> bool {
    id <= X
}

pub fn residue_char(id: TokenId) -> Option<char> {
    match id {
        i if i < 20 => Some(CANONICAL[i]),
        X => Some('X'),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqKind {
    Source,
    Target,
}

/// A token sequence in either stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub kind: SeqKind,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of leading non-PAD tokens. PAD only ever forms a suffix.
    pub fn active_len(&self) -> usize {
        self.ids.iter().position(|&t| t == PAD).unwrap_or(self.ids.len())
    }

    /// `true` where the position holds PAD.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t == PAD).collect()
    }
}

fn residues(s: &str) -> Result<Vec<TokenId>> {
    s.chars()
        .map(|c| residue_id(c).ok_or(Error::UnknownResidue(c)))
        .collect()
}

/// `mhc ++ [SEP] ++ peptide`, PAD-filled to [`SRC_LEN`].
pub fn encode_source(mhc: &str, peptide: &str, _vocab: &Vocabulary) -> Result<TokenSeq> {
    let len = mhc.chars().count() + 1 + peptide.chars().count();
    if len > SRC_LEN {
        return Err(Error::OverlongSource { len, max: SRC_LEN });
    }
    let mut ids = residues(mhc)?;
    ids.push(SEP);
    ids.extend(residues(peptide)?);
    ids.resize(SRC_LEN, PAD);
    Ok(TokenSeq { ids, kind: SeqKind::Source })
}

/// `[SOS] ++ tcr ++ [EOS]`.
pub fn encode_target(tcr: &str, _vocab: &Vocabulary) -> Result<TokenSeq> {
    let len = tcr.chars().count();
    if len > MAX_TCR_LEN {
        return Err(Error::OverlongTarget { len, max: MAX_TCR_LEN });
    }
    let mut ids = Vec::with_capacity(len + 2);
    ids.push(SOS);
    ids.extend(residues(tcr)?);
    ids.push(EOS);
    Ok(TokenSeq { ids, kind: SeqKind::Target })
}

/// Concatenates residue symbols, dropping every special token.
pub fn decode_tokens(seq: &TokenSeq, _vocab: &Vocabulary) -> String {
    decode_ids(&seq.ids)
}

pub fn decode_ids(ids: &[TokenId]) -> String {
    ids.iter().filter_map(|&t| residue_char(t)).collect()
}
