//! Eye-movement corpora and their alignment with per-word hidden states.
//!
//! Corpora use a normalized TSV layout:
//!
//! ```text
//! sentence_id\tword_index\tword\tsfd\tffd\tgd\ttrt\tgpt
//! s1\t0\tThe\t210\t210\t210\t250\t250
//! s1\t1\tcat\tNA\t180\t180\t180\t400
//! ```
//!
//! Measures are milliseconds; `NA` marks a missing value (for example a
//! skipped word). Rows are grouped by sentence and sorted by word index.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::{detokenize, tokenize};
use crate::model::{forward, Capture, ModelWeights};
use crate::numkit::Matrix;

pub const TSV_HEADER: &str = "sentence_id\tword_index\tword\tsfd\tffd\tgd\ttrt\tgpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// Single fixation duration.
    Sfd,
    /// First fixation duration.
    Ffd,
    /// Gaze duration.
    Gd,
    /// Total reading time.
    Trt,
    /// Go-past time.
    Gpt,
}

impl Measure {
    pub const ALL: [Measure; 5] = [Measure::Sfd, Measure::Ffd, Measure::Gd, Measure::Trt, Measure::Gpt];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Measure::Sfd => "sfd",
            Measure::Ffd => "ffd",
            Measure::Gd => "gd",
            Measure::Trt => "trt",
            Measure::Gpt => "gpt",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeRecord {
    pub sentence_id: String,
    pub word_index: usize,
    pub word: String,
    /// Indexed by [`Measure::index`]; `None` when missing.
    pub measures: [Option<f64>; 5],
}

impl GazeRecord {
    pub fn measure(&self, m: Measure) -> Option<f64> {
        self.measures[m.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub words: Vec<GazeRecord>,
}

impl Sentence {
    /// Words joined by single spaces; the text the model reads.
    pub fn text(&self) -> String {
        self.words
            .iter()
            .map(|w| w.word.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeCorpus {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

impl GazeCorpus {
    pub fn n_total(&self) -> usize {
        self.sentences.iter().map(|s| s.words.len()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &GazeRecord> {
        self.sentences.iter().flat_map(|s| s.words.iter())
    }

    /// Values of one measure over all words in corpus order.
    pub fn measure_column(&self, m: Measure) -> Vec<Option<f64>> {
        self.records().map(|r| r.measure(m)).collect()
    }
}

pub fn load_gaze_tsv(path: &Path) -> Result<GazeCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_gaze_tsv(&text, path, id)
}

pub fn parse_gaze_tsv(text: &str, path: &Path, corpus_id: String) -> Result<GazeCorpus> {
    let err = |line: usize, message: String| Error::GazeParse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == TSV_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("expected header {TSV_HEADER:?}, found {h:?}"))),
        None => return Err(Error::EmptyCorpus),
    }

    let mut sentences: Vec<Sentence> = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(err(line_no, format!("expected 8 columns, found {}", cols.len())));
        }
        let sentence_id = cols[0].to_string();
        if sentence_id.is_empty() {
            return Err(err(line_no, "empty sentence_id".into()));
        }
        let word_index: usize = cols[1]
            .parse()
            .map_err(|_| err(line_no, format!("bad word_index {:?}", cols[1])))?;
        let word = cols[2].to_string();
        if word.trim().is_empty() {
            return Err(err(line_no, "empty word".into()));
        }
        let mut measures = [None; 5];
        for (m, raw) in Measure::ALL.iter().zip(&cols[3..]) {
            if *raw == "NA" {
                continue;
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| err(line_no, format!("bad {m} value {raw:?}")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(err(line_no, format!("{m} must be a non-negative number, got {raw}")));
            }
            measures[m.index()] = Some(v);
        }
        if let (Some(trt), Some(ffd)) = (measures[Measure::Trt.index()], measures[Measure::Ffd.index()]) {
            if trt < ffd {
                return Err(err(line_no, format!("trt {trt} < ffd {ffd}")));
            }
        }
        let record = GazeRecord {
            sentence_id: sentence_id.clone(),
            word_index,
            word,
            measures,
        };
        match sentences.last_mut() {
            Some(s) if s.id == sentence_id => {
                let prev = s.words.last().expect("sentences are never empty").word_index;
                if word_index == prev || s.words.iter().any(|w| w.word_index == word_index) {
                    return Err(err(line_no, format!("duplicate word_index {word_index} in sentence {sentence_id}")));
                }
                if word_index < prev {
                    return Err(err(line_no, format!("word_index {word_index} after {prev}: rows must be sorted")));
                }
                s.words.push(record);
            }
            _ => {
                if sentences.iter().any(|s| s.id == sentence_id) {
                    return Err(err(line_no, format!("sentence {sentence_id} rows are not contiguous")));
                }
                sentences.push(Sentence {
                    id: sentence_id,
                    words: vec![record],
                });
            }
        }
    }
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(GazeCorpus {
        id: corpus_id,
        sentences,
    })
}

pub fn write_gaze_tsv(corpus: &GazeCorpus, path: &Path) -> Result<()> {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in corpus.records() {
        out.push_str(&format!("{}\t{}\t{}", r.sentence_id, r.word_index, r.word));
        for m in r.measures {
            match m {
                Some(v) => out.push_str(&format!("\t{v}")),
                None => out.push_str("\tNA"),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSpan {
    pub sentence_id: String,
    pub word_index: usize,
    /// Token positions within the sentence.
    pub tokens: Range<usize>,
}

/// Pooled per-word hidden states for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedActivations {
    /// Indexed by `layer - 1`; each is `[n_total × d]` in corpus word order.
    pub layers: Vec<Matrix>,
    pub spans: Vec<WordSpan>,
    /// Digest of the weights that produced the activations.
    pub model_digest: String,
}

impl AlignedActivations {
    pub fn n_words(&self) -> usize {
        self.spans.len()
    }

    pub fn layer(&self, layer: usize) -> &Matrix {
        &self.layers[layer - 1]
    }
}

/// Byte ranges of each word in `text`, found by greedy left-to-right
/// matching. Whitespace before a word belongs to that word's span.
pub fn word_spans(sentence: &Sentence, text: &str) -> Result<Vec<Range<usize>>> {
    let mut cursor = 0;
    let mut spans = Vec::with_capacity(sentence.words.len());
    for w in &sentence.words {
        let fail = |message: String| Error::Alignment {
            sentence_id: sentence.id.clone(),
            word_index: w.word_index,
            word: w.word.clone(),
            message,
        };
        let found = text[cursor..]
            .find(w.word.as_str())
            .ok_or_else(|| fail("word not found in sentence text".into()))?;
        let gap = &text[cursor..cursor + found];
        if !gap.chars().all(char::is_whitespace) {
            return Err(fail(format!("unmatched text {gap:?} before word")));
        }
        let end = cursor + found + w.word.len();
        spans.push(cursor..end);
        cursor = end;
    }
    Ok(spans)
}

fn align_sentence(sentence: &Sentence, w: &ModelWeights) -> Result<(Vec<Matrix>, Vec<WordSpan>)> {
    let text = sentence.text();
    let tokens = tokenize(&text);
    let first = &sentence.words[0];
    if tokens.len() > w.config.max_seq_len {
        return Err(Error::Alignment {
            sentence_id: sentence.id.clone(),
            word_index: first.word_index,
            word: first.word.clone(),
            message: format!(
                "sentence has {} tokens, context is {}",
                tokens.len(),
                w.config.max_seq_len
            ),
        });
    }
    // Byte-level tokens: byte offsets are token offsets.
    let spans = word_spans(sentence, &text)?;
    for (span, rec) in spans.iter().zip(&sentence.words) {
        let piece = detokenize(&tokens[span.clone()]);
        if span.is_empty() || piece.trim_start() != rec.word {
            return Err(Error::Alignment {
                sentence_id: sentence.id.clone(),
                word_index: rec.word_index,
                word: rec.word.clone(),
                message: format!("token span decodes to {piece:?}"),
            });
        }
    }
    let out = forward(w, &tokens, Capture::blocks())?;
    let d = w.config.d_model;
    let pooled = out
        .trace
        .block_outputs
        .iter()
        .map(|states| {
            let mut m = Matrix::zeros(spans.len(), d);
            for (row, span) in spans.iter().enumerate() {
                let dst = m.row_mut(row);
                for t in span.clone() {
                    dst.iter_mut().zip(states.row(t)).for_each(|(a, b)| *a += b);
                }
                let n = span.len() as f64;
                dst.iter_mut().for_each(|a| *a /= n);
            }
            m
        })
        .collect();
    let spans = spans
        .into_iter()
        .zip(&sentence.words)
        .map(|(tokens, r)| WordSpan {
            sentence_id: sentence.id.clone(),
            word_index: r.word_index,
            tokens,
        })
        .collect();
    Ok((pooled, spans))
}

/// Mean-pool each word's subword block outputs at every layer. Sentences are
/// processed in parallel and concatenated in corpus order.
pub fn align(corpus: &GazeCorpus, w: &ModelWeights) -> Result<AlignedActivations> {
    let per_sentence: Vec<(Vec<Matrix>, Vec<WordSpan>)> = corpus
        .sentences
        .par_iter()
        .map(|s| align_sentence(s, w))
        .collect::<Result<_>>()?;
    let n_total = corpus.n_total();
    let d = w.config.d_model;
    let mut layers = vec![Matrix::zeros(n_total, d); w.n_layers()];
    let mut spans = Vec::with_capacity(n_total);
    let mut row = 0;
    for (pooled, sp) in per_sentence {
        let n = sp.len();
        for (dst, src) in layers.iter_mut().zip(&pooled) {
            dst.data[row * d..(row + n) * d].copy_from_slice(&src.data);
        }
        spans.extend(sp);
        row += n;
    }
    Ok(AlignedActivations {
        layers,
        spans,
        model_digest: w.digest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::tiny_config;
    use std::path::PathBuf;

    fn parse(text: &str) -> Result<GazeCorpus> {
        parse_gaze_tsv(text, &PathBuf::from("t.tsv"), "t".into())
    }

    fn rec(sid: &str, i: usize, w: &str) -> GazeRecord {
        GazeRecord {
            sentence_id: sid.into(),
            word_index: i,
            word: w.into(),
            measures: [Some(100.0); 5],
        }
    }

    #[test]
    fn empty_data_section() {
        assert!(matches!(parse(&format!("{TSV_HEADER}\n")), Err(Error::EmptyCorpus)));
        assert!(matches!(parse(""), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn small_corpus_parses() {
        let text = format!(
            "{TSV_HEADER}\ns1\t0\tThe\t200\t200\t210\t250\t260\ns1\t1\tcat\tNA\t150\t150\t300\t320\ns1\t2\tsat\t90\t90\t90\t90\tNA\n"
        );
        let c = parse(&text).unwrap();
        assert_eq!(c.n_total(), 3);
        assert_eq!(c.sentences[0].words[1].measure(Measure::Sfd), None);
        assert_eq!(c.sentences[0].words[1].measure(Measure::Trt), Some(300.0));
        assert_eq!(c.sentences[0].text(), "The cat sat");
    }

    #[test]
    fn trt_below_ffd_names_the_row() {
        let text = format!("{TSV_HEADER}\ns1\t0\ta\t1\t1\t1\t1\t1\ns1\t1\tb\t200\t200\t200\t100\t300\n");
        match parse(&text) {
            Err(Error::GazeParse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("trt"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows() {
        let cases = [
            ("s1\t0\ta\t1\t1\t1\t1", "columns"),
            ("s1\t0\ta\t-1\t1\t1\t1\t1", "non-negative"),
            ("s1\tx\ta\t1\t1\t1\t1\t1", "word_index"),
            ("s1\t0\ta\tfoo\t1\t1\t1\t1", "sfd"),
        ];
        for (row, needle) in cases {
            let err = parse(&format!("{TSV_HEADER}\n{row}\n")).unwrap_err();
            match err {
                Error::GazeParse { line, message, .. } => {
                    assert_eq!(line, 2);
                    assert!(message.contains(needle), "{message}");
                }
                e => panic!("{e:?}"),
            }
        }
        let dup = format!("{TSV_HEADER}\ns1\t0\ta\t1\t1\t1\t1\t1\ns1\t0\tb\t1\t1\t1\t1\t1\n");
        assert!(matches!(parse(&dup), Err(Error::GazeParse { line: 3, .. })));
        let split = format!(
            "{TSV_HEADER}\ns1\t0\ta\t1\t1\t1\t1\t1\ns2\t0\tb\t1\t1\t1\t1\t1\ns1\t1\tc\t1\t1\t1\t1\t1\n"
        );
        assert!(matches!(parse(&split), Err(Error::GazeParse { line: 4, .. })));
        assert!(matches!(parse("bad header\n"), Err(Error::GazeParse { line: 1, .. })));
    }

    #[test]
    fn tsv_round_trip() {
        let text = format!("{TSV_HEADER}\ns1\t0\tThe\t200.5\t200\tNA\t250\t260\n");
        let c = parse(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        write_gaze_tsv(&c, &p).unwrap();
        let mut back = load_gaze_tsv(&p).unwrap();
        back.id = c.id.clone();
        assert_eq!(back, c);
    }

    #[test]
    fn span_table_matches_manual_enumeration() {
        let corpus = GazeCorpus {
            id: "toy".into(),
            sentences: vec![
                Sentence {
                    id: "a".into(),
                    words: vec![rec("a", 0, "The"), rec("a", 1, "cat")],
                },
                Sentence {
                    id: "b".into(),
                    words: vec![rec("b", 0, "a"), rec("b", 1, "big"), rec("b", 2, "dög")],
                },
            ],
        };
        let w = ModelWeights::init(&tiny_config(3, 8, 2)).unwrap();
        let al = align(&corpus, &w).unwrap();
        // "The cat": T,h,e | ␠,c,a,t    "a big dög": a | ␠,b,i,g | ␠,d,ö(2 bytes),g
        let want = [
            ("a", 0, 0..3),
            ("a", 1, 3..7),
            ("b", 0, 0..1),
            ("b", 1, 1..5),
            ("b", 2, 5..10),
        ];
        assert_eq!(al.spans.len(), want.len());
        for (s, (sid, wi, r)) in al.spans.iter().zip(want) {
            assert_eq!((s.sentence_id.as_str(), s.word_index, s.tokens.clone()), (sid, wi, r));
        }
        assert_eq!(al.layers.len(), 3);
        assert!(al.layers.iter().all(|m| m.shape() == [5, 8]));
    }

    #[test]
    fn pooling_is_the_token_mean() {
        let corpus = GazeCorpus {
            id: "toy".into(),
            sentences: vec![Sentence {
                id: "s".into(),
                words: vec![rec("s", 0, "x"), rec("s", 1, "yz")],
            }],
        };
        let w = ModelWeights::init(&tiny_config(3, 8, 2)).unwrap();
        let al = align(&corpus, &w).unwrap();
        let states = forward(&w, &tokenize("x yz"), Capture::blocks()).unwrap().trace.block_outputs;
        for l in 0..3 {
            // single-token word equals its state
            assert_eq!(al.layers[l].row(0), states[l].row(0));
            // " yz" spans tokens 1..4
            for c in 0..8 {
                let mean = (states[l].get(1, c) + states[l].get(2, c) + states[l].get(3, c)) / 3.0;
                assert!((al.layers[l].get(1, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sentence_order_does_not_change_rows() {
        let s1 = Sentence {
            id: "1".into(),
            words: vec![rec("1", 0, "one"), rec("1", 1, "two")],
        };
        let s2 = Sentence {
            id: "2".into(),
            words: vec![rec("2", 0, "three")],
        };
        let w = ModelWeights::init(&tiny_config(3, 8, 2)).unwrap();
        let a = align(&GazeCorpus { id: "x".into(), sentences: vec![s1.clone(), s2.clone()] }, &w).unwrap();
        let b = align(&GazeCorpus { id: "x".into(), sentences: vec![s2, s1] }, &w).unwrap();
        for l in 0..3 {
            assert_eq!(a.layers[l].row(0), b.layers[l].row(1));
            assert_eq!(a.layers[l].row(1), b.layers[l].row(2));
            assert_eq!(a.layers[l].row(2), b.layers[l].row(0));
        }
    }

    #[test]
    fn unmatched_word_is_an_alignment_error() {
        let s = Sentence {
            id: "s".into(),
            words: vec![rec("s", 0, "ab"), rec("s", 1, "cd")],
        };
        assert!(word_spans(&s, "ab xx cd").is_err());
        assert!(word_spans(&s, "ab").is_err());
        assert_eq!(word_spans(&s, "ab  cd").unwrap(), vec![0..2, 2..6]);
    }

    #[test]
    fn overlong_sentence_rejected() {
        let words: Vec<GazeRecord> = (0..20).map(|i| rec("s", i, "word")).collect();
        let corpus = GazeCorpus {
            id: "x".into(),
            sentences: vec![Sentence { id: "s".into(), words }],
        };
        let w = ModelWeights::init(&tiny_config(3, 8, 2)).unwrap();
        assert!(matches!(align(&corpus, &w), Err(Error::Alignment { .. })));
    }
}
