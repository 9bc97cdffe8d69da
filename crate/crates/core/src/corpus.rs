//! Session loading, tokenization, and vocabulary handling.
//!
//! The on-disk session format is JSONL: one object per line with keys
//! `context` (array of strings), `last` (string), `response` (string), and
//! optionally `rewritten` (string) for quadruplet files. UTF-8 is mandatory
//! and malformed lines are reported with their line number.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved vocabulary slots; always the first four ids.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON record: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: empty utterance in field {field:?} after tokenization")]
    EmptyUtterance { line: usize, field: &'static str },
    #[error("line {line}: empty context array")]
    EmptyContext { line: usize },
    #[error("line {line}: missing \"rewritten\" field in quadruplet record")]
    MissingRewritten { line: usize },
    #[error("vocab max_size {0} cannot hold the 4 reserved tokens")]
    VocabTooSmall(usize),
    #[error("cannot build vocab from an empty corpus")]
    EmptyCorpus,
}

/// How raw strings become token lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenizeMode {
    /// Split on runs of whitespace.
    #[default]
    Whitespace,
    /// One token per non-space character (for unsegmented text).
    Char,
}

impl TokenizeMode {
    pub fn parse(s: &str) -> Option<TokenizeMode> {
        match s {
            "whitespace" => Some(TokenizeMode::Whitespace),
            "char" => Some(TokenizeMode::Char),
            _ => None,
        }
    }
}

/// Deterministic tokenization; the empty string yields an empty list and
/// callers decide whether that is an error.
pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Whitespace => text.split_whitespace().map(str::to_string).collect(),
        TokenizeMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect(),
    }
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize(tokens: &[String], mode: TokenizeMode) -> String {
    match mode {
        TokenizeMode::Whitespace => tokens.join(" "),
        TokenizeMode::Char => tokens.concat(),
    }
}

/// One multi-turn dialogue session: context utterances, the last utterance
/// `q`, and the response `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueSession {
    pub context: Vec<Vec<String>>,
    pub last: Vec<String>,
    pub response: Vec<String>,
}

/// A session plus its synthesized rewritten last utterance `q*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoQuadruplet {
    pub session: DialogueSession,
    pub rewritten: Vec<String>,
}

/// Keep only the most recent `max_turns - 1` context utterances; `q` and `r`
/// are unchanged. Idempotent.
pub fn truncate_context(session: &DialogueSession, max_turns: usize) -> DialogueSession {
    assert!(max_turns >= 1, "max_turns must be >= 1");
    let keep = max_turns - 1;
    let start = session.context.len().saturating_sub(keep);
    DialogueSession {
        context: session.context[start..].to_vec(),
        last: session.last.clone(),
        response: session.response.clone(),
    }
}

/// Raw JSONL record shape.
#[derive(Debug, Serialize, Deserialize)]
pub struct SessionRecord {
    pub context: Vec<String>,
    pub last: String,
    pub response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rewritten: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub mode: TokenizeMode,
    /// Sessions containing an utterance longer than this many tokens are
    /// rejected with a warning rather than silently truncated.
    pub max_len: usize,
    /// When set, [`truncate_context`] is applied at load.
    pub max_turns: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            mode: TokenizeMode::Whitespace,
            max_len: 30,
            max_turns: Some(2),
        }
    }
}

/// Loaded sessions in file order plus warnings for rejected records.
#[derive(Debug)]
pub struct LoadReport<T> {
    pub items: Vec<T>,
    pub warnings: Vec<String>,
}

fn parse_line(
    line_no: usize,
    line: &str,
    opts: &LoadOptions,
) -> Result<Option<SessionRecord>, CorpusError> {
    if line.trim().is_empty() {
        return Ok(None);
    }
    let record: SessionRecord = serde_json::from_str(line).map_err(|e| CorpusError::Json {
        line: line_no,
        message: e.to_string(),
    })?;
    if record.context.is_empty() {
        return Err(CorpusError::EmptyContext { line: line_no });
    }
    let _ = opts;
    Ok(Some(record))
}

fn session_from_record(
    line_no: usize,
    record: &SessionRecord,
    opts: &LoadOptions,
) -> Result<Option<DialogueSession>, CorpusError> {
    let mut context = Vec::with_capacity(record.context.len());
    for utt in &record.context {
        let toks = tokenize(utt, opts.mode);
        if toks.is_empty() {
            return Err(CorpusError::EmptyUtterance {
                line: line_no,
                field: "context",
            });
        }
        context.push(toks);
    }
    let last = tokenize(&record.last, opts.mode);
    if last.is_empty() {
        return Err(CorpusError::EmptyUtterance {
            line: line_no,
            field: "last",
        });
    }
    let response = tokenize(&record.response, opts.mode);
    if response.is_empty() {
        return Err(CorpusError::EmptyUtterance {
            line: line_no,
            field: "response",
        });
    }
    let too_long = context
        .iter()
        .chain([&last, &response])
        .any(|u| u.len() > opts.max_len);
    if too_long {
        return Ok(None);
    }
    let mut session = DialogueSession {
        context,
        last,
        response,
    };
    if let Some(max_turns) = opts.max_turns {
        session = truncate_context(&session, max_turns);
    }
    Ok(Some(session))
}

/// Load sessions from a JSONL file, in file order. Over-length utterances
/// reject the whole record with a warning; malformed records are hard errors
/// carrying the line number.
pub fn load_sessions(
    path: &Path,
    opts: &LoadOptions,
) -> Result<LoadReport<DialogueSession>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let Some(record) = parse_line(line_no, &line, opts)? else {
            continue;
        };
        match session_from_record(line_no, &record, opts)? {
            Some(s) => items.push(s),
            None => warnings.push(format!(
                "line {line_no}: utterance longer than {} tokens, record skipped",
                opts.max_len
            )),
        }
    }
    Ok(LoadReport { items, warnings })
}

/// Load quadruplet records (sessions with a mandatory `rewritten` field).
pub fn load_quadruplets(
    path: &Path,
    opts: &LoadOptions,
) -> Result<LoadReport<PseudoQuadruplet>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let Some(record) = parse_line(line_no, &line, opts)? else {
            continue;
        };
        let rewritten_raw = record
            .rewritten
            .as_deref()
            .ok_or(CorpusError::MissingRewritten { line: line_no })?;
        let rewritten = tokenize(rewritten_raw, opts.mode);
        if rewritten.is_empty() {
            return Err(CorpusError::EmptyUtterance {
                line: line_no,
                field: "rewritten",
            });
        }
        match session_from_record(line_no, &record, opts)? {
            Some(session) => items.push(PseudoQuadruplet { session, rewritten }),
            None => warnings.push(format!(
                "line {line_no}: utterance longer than {} tokens, record skipped",
                opts.max_len
            )),
        }
    }
    Ok(LoadReport { items, warnings })
}

/// Serialize a session back to its JSONL record.
pub fn session_record(session: &DialogueSession, mode: TokenizeMode) -> SessionRecord {
    SessionRecord {
        context: session
            .context
            .iter()
            .map(|u| detokenize(u, mode))
            .collect(),
        last: detokenize(&session.last, mode),
        response: detokenize(&session.response, mode),
        rewritten: None,
    }
}

pub fn write_quadruplets(
    path: &Path,
    quads: &[PseudoQuadruplet],
    mode: TokenizeMode,
) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    for q in quads {
        let mut record = session_record(&q.session, mode);
        record.rewritten = Some(detokenize(&q.rewritten, mode));
        let line = serde_json::to_string(&record).expect("record serialization");
        writeln!(w, "{line}").map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Token ↔ id mapping with four reserved slots at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id2tok: Vec<String>,
    tok2id: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let mut id2tok: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id2tok.extend(tokens);
        let tok2id = id2tok
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { id2tok, tok2id }
    }

    /// Total size including the reserved slots.
    pub fn len(&self) -> usize {
        self.id2tok.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tok2id.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tok2id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id2tok.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id2tok[RESERVED_TOKENS.len()..]
    }

    /// Plain-text dump: one token per line, line number = id − 4.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = BufWriter::new(file);
        for tok in self.tokens() {
            writeln!(w, "{tok}").map_err(|e| CorpusError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        w.flush().map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, CorpusError> {
        let file = File::open(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| CorpusError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            if !line.is_empty() {
                tokens.push(line);
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }

    /// Rebuild from a plain token list (non-reserved, id order).
    pub fn from_token_list(tokens: Vec<String>) -> Vocab {
        Vocab::from_tokens(tokens)
    }
}

/// Build a vocabulary: tokens sorted by (count desc, token asc) until
/// `max_size` (which includes the four reserved slots); tokens with count
/// below `min_count` are excluded.
pub fn build_vocab(
    corpus: &[DialogueSession],
    max_size: usize,
    min_count: u64,
) -> Result<Vocab, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    if max_size < RESERVED_TOKENS.len() {
        return Err(CorpusError::VocabTooSmall(max_size));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for session in corpus {
        for utt in session.context.iter().chain([&session.last, &session.response]) {
            for tok in utt {
                // Literal reserved strings in the data would collide with
                // the reserved ids; they stay mapped to their reserved slot.
                if RESERVED_TOKENS.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut entries: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let keep = max_size - RESERVED_TOKENS.len();
    let tokens = entries
        .into_iter()
        .take(keep)
        .map(|(t, _)| t.to_string())
        .collect();
    Ok(Vocab::from_tokens(tokens))
}

/// Temporary per-example extension of the base vocabulary with the distinct
/// out-of-vocab tokens of a copy source. Extended ids are contiguous from
/// `|vocab|` in first-occurrence order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtendedVocab {
    base_size: usize,
    tokens: Vec<String>,
    map: HashMap<String, usize>,
}

impl ExtendedVocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.map.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        id.checked_sub(self.base_size)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }
}

/// Encode tokens against the vocabulary. In-vocab tokens map to their ids
/// and out-of-vocab tokens map to [`UNK`], except that out-of-vocab tokens
/// present in `copy_source` receive temporary extended ids valid only for
/// this example.
pub fn encode(
    tokens: &[String],
    vocab: &Vocab,
    copy_source: Option<&[String]>,
) -> (Vec<usize>, ExtendedVocab) {
    let mut ext = ExtendedVocab {
        base_size: vocab.len(),
        tokens: Vec::new(),
        map: HashMap::new(),
    };
    if let Some(source) = copy_source {
        for tok in source {
            if vocab.id(tok).is_none() && !ext.map.contains_key(tok) {
                let id = ext.base_size + ext.tokens.len();
                ext.map.insert(tok.clone(), id);
                ext.tokens.push(tok.clone());
            }
        }
    }
    let ids = tokens
        .iter()
        .map(|tok| vocab.id(tok).or_else(|| ext.id(tok)).unwrap_or(UNK))
        .collect();
    (ids, ext)
}

/// Decode ids back to surface tokens; extended ids resolve through `ext`.
pub fn decode(ids: &[usize], vocab: &Vocab, ext: Option<&ExtendedVocab>) -> Vec<String> {
    ids.iter()
        .map(|&id| {
            if let Some(tok) = vocab.token(id) {
                tok.to_string()
            } else if let Some(tok) = ext.and_then(|e| e.token(id)) {
                tok.to_string()
            } else {
                RESERVED_TOKENS[UNK].to_string()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, TokenizeMode::Whitespace)
    }

    fn session(context: &[&str], last: &str, response: &str) -> DialogueSession {
        DialogueSession {
            context: context.iter().map(|c| toks(c)).collect(),
            last: toks(last),
            response: toks(response),
        }
    }

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn tokenize_whitespace_collapses_runs() {
        assert_eq!(toks("a  b"), vec!["a", "b"]);
        assert_eq!(toks(""), Vec::<String>::new());
        assert_eq!(toks("  "), Vec::<String>::new());
    }

    #[test]
    fn tokenize_char_mode() {
        assert_eq!(tokenize("ab", TokenizeMode::Char), vec!["a", "b"]);
        assert_eq!(tokenize("a b", TokenizeMode::Char), vec!["a", "b"]);
    }

    #[test]
    fn load_single_session() {
        let f = write_jsonl(&[
            r#"{"context":["I will fly from Kunming to Xiamen in 19th"],"last":"I want to go, too","response":"have a nice trip"}"#,
        ]);
        let report = load_sessions(f.path(), &LoadOptions::default()).unwrap();
        assert_eq!(report.items.len(), 1);
        assert_eq!(report.items[0].context.len(), 1);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn empty_file_loads_to_empty_list() {
        let f = write_jsonl(&[]);
        let report = load_sessions(f.path(), &LoadOptions::default()).unwrap();
        assert!(report.items.is_empty());
    }

    #[test]
    fn empty_last_is_an_error_with_line_number() {
        let f = write_jsonl(&[
            r#"{"context":["hi"],"last":"ok","response":"fine"}"#,
            r#"{"context":["hi"],"last":"","response":"fine"}"#,
        ]);
        let err = load_sessions(f.path(), &LoadOptions::default()).unwrap_err();
        match err {
            CorpusError::EmptyUtterance { line, field } => {
                assert_eq!(line, 2);
                assert_eq!(field, "last");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let f = write_jsonl(&[r#"{"context":["hi"],"last":"ok","response":"fine"}"#, "{oops"]);
        let err = load_sessions(f.path(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Json { line: 2, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_sessions(Path::new("/nonexistent/x.jsonl"), &LoadOptions::default())
            .unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn overlong_utterance_is_skipped_with_warning() {
        let long_last: String = vec!["w"; 31].join(" ");
        let line = format!(
            r#"{{"context":["hi"],"last":"{long_last}","response":"ok"}}"#
        );
        let f = write_jsonl(&[&line]);
        let report = load_sessions(f.path(), &LoadOptions::default()).unwrap();
        assert!(report.items.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("line 1"));
    }

    #[test]
    fn truncate_keeps_most_recent_turns() {
        let s = session(&["u0", "u1", "u2"], "q", "r");
        let t = truncate_context(&s, 2);
        assert_eq!(t.context, vec![toks("u2")]);
        assert_eq!(t.last, s.last);
        assert_eq!(t.response, s.response);

        let s1 = session(&["u0"], "q", "r");
        assert_eq!(truncate_context(&s1, 2), s1);

        let s4 = session(&["u0", "u1", "u2", "u3"], "q", "r");
        let t3 = truncate_context(&s4, 3);
        assert_eq!(t3.context, vec![toks("u2"), toks("u3")]);
    }

    #[test]
    fn vocab_sorted_by_count_then_token() {
        // "a" x5, "b" x3, max 6 → PAD,BOS,EOS,UNK,a,b
        let corpus = vec![session(&["a a a"], "a a", "b b b")];
        let v = build_vocab(&corpus, 6, 1).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn vocab_min_count_excludes_rare_tokens() {
        let corpus = vec![session(&["a a a"], "a a", "b b b")];
        let v = build_vocab(&corpus, 10, 4).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn vocab_count_tie_breaks_lexicographically() {
        let corpus = vec![session(&["c c c"], "b b b", "a")];
        let v = build_vocab(&corpus, 10, 1).unwrap();
        // b and c tie at 3: b first.
        assert_eq!(v.id("b"), Some(4));
        assert_eq!(v.id("c"), Some(5));
        assert_eq!(v.id("a"), Some(6));
    }

    #[test]
    fn vocab_too_small_errors() {
        let corpus = vec![session(&["a"], "b", "c")];
        assert!(matches!(
            build_vocab(&corpus, 3, 1),
            Err(CorpusError::VocabTooSmall(3))
        ));
    }

    #[test]
    fn encode_maps_oov_to_unk_and_extends_from_copy_source() {
        let corpus = vec![session(&["a a"], "a", "a")];
        let v = build_vocab(&corpus, 10, 1).unwrap();
        let (ids, _) = encode(&toks("a zzz"), &v, None);
        assert_eq!(ids, vec![4, UNK]);

        let source = toks("zzz a yyy zzz");
        let (ids, ext) = encode(&toks("zzz yyy a"), &v, Some(&source));
        assert_eq!(ext.len(), 2);
        assert_eq!(ext.id("zzz"), Some(v.len()));
        assert_eq!(ext.id("yyy"), Some(v.len() + 1));
        assert_eq!(ids, vec![v.len(), v.len() + 1, 4]);
        assert_eq!(
            decode(&ids, &v, Some(&ext)),
            vec!["zzz".to_string(), "yyy".to_string(), "a".to_string()]
        );
    }

    #[test]
    fn vocab_file_round_trip() {
        let corpus = vec![session(&["hello world"], "hello again", "bye")];
        let v = build_vocab(&corpus, 20, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let v2 = Vocab::load(&p).unwrap();
        assert_eq!(v, v2);
        // Deterministic bytes.
        let p2 = dir.path().join("vocab2.txt");
        v2.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn quadruplet_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("quads.jsonl");
        let quads = vec![PseudoQuadruplet {
            session: session(&["do you like coffee"], "why", "it is tasty"),
            rewritten: toks("why hate coffee"),
        }];
        write_quadruplets(&p, &quads, TokenizeMode::Whitespace).unwrap();
        let report = load_quadruplets(&p, &LoadOptions::default()).unwrap();
        assert_eq!(report.items, quads);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn token_strategy() -> impl Strategy<Value = String> {
            "[a-z]{1,6}"
        }

        proptest! {
            #[test]
            fn decode_encode_is_identity_on_in_vocab_tokens(
                tokens in proptest::collection::vec(token_strategy(), 1..12)
            ) {
                let corpus = vec![DialogueSession {
                    context: vec![tokens.clone()],
                    last: tokens.clone(),
                    response: tokens.clone(),
                }];
                let v = build_vocab(&corpus, 4 + 200, 1).unwrap();
                let (ids, _) = encode(&tokens, &v, None);
                prop_assert_eq!(decode(&ids, &v, None), tokens);
            }

            #[test]
            fn truncate_is_idempotent(
                n_ctx in 1usize..6,
                max_turns in 1usize..5
            ) {
                let ctx: Vec<&str> = ["u0", "u1", "u2", "u3", "u4", "u5"][..n_ctx].to_vec();
                let s = session(&ctx, "q", "r");
                let once = truncate_context(&s, max_turns);
                let twice = truncate_context(&once, max_turns);
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn extended_ids_are_contiguous_and_disjoint_from_base(
                source in proptest::collection::vec(token_strategy(), 1..10)
            ) {
                let corpus = vec![session(&["known words only"], "known", "words")];
                let v = build_vocab(&corpus, 10, 1).unwrap();
                let (_, ext) = encode(&source, &v, Some(&source));
                let mut seen = std::collections::HashSet::new();
                let mut expected_next = v.len();
                for tok in &source {
                    if v.id(tok).is_none() && seen.insert(tok.clone()) {
                        prop_assert_eq!(ext.id(tok), Some(expected_next));
                        expected_next += 1;
                    }
                }
                prop_assert_eq!(ext.len(), expected_next - v.len());
            }

            #[test]
            fn build_vocab_is_deterministic(
                words in proptest::collection::vec(token_strategy(), 1..20)
            ) {
                let s = DialogueSession {
                    context: vec![words.clone()],
                    last: words.clone(),
                    response: words,
                };
                let v1 = build_vocab(&[s.clone()], 16, 1).unwrap();
                let v2 = build_vocab(&[s], 16, 1).unwrap();
                prop_assert_eq!(v1.tokens(), v2.tokens());
            }
        }
    }
}
