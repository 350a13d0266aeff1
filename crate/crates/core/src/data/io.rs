//! Line-delimited JSON corpus files: one header line, then one session per
//! line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Playlist, SessionExample, SideInfoVector, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub side_width: usize,
    pub vocab_size: usize,
    /// Raw identifiers by dense index; omitted when they are `0..vocab_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_ids: Option<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    user: String,
    current: Playlist,
    future: Playlist,
    side: SideInfoVector,
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let raw = corpus.vocab().raw_ids();
    let identity = raw.iter().enumerate().all(|(i, &r)| r as usize == i);
    let header = CorpusHeader {
        side_width: corpus.side_width(),
        vocab_size: corpus.vocab_size(),
        raw_ids: (!identity).then(|| raw.to_vec()),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for ex in corpus.examples() {
        let rec = Record {
            user: ex.user_id.clone(),
            current: ex.current.clone(),
            future: ex.future.clone(),
            side: ex.side.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(corpus, BufWriter::new(File::create(path)?))
}

pub fn read_corpus<R: Read>(input: R) -> Result<Corpus> {
    let mut header: Option<CorpusHeader> = None;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Format { line: line_no, message };
        let Some(h) = &header else {
            let h: CorpusHeader =
                serde_json::from_str(&line).map_err(|e| bad(format!("bad header: {e}")))?;
            if let Some(raw) = &h.raw_ids {
                if raw.len() != h.vocab_size {
                    return Err(bad(format!(
                        "header lists {} raw ids for vocab_size {}",
                        raw.len(),
                        h.vocab_size
                    )));
                }
            }
            header = Some(h);
            continue;
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.side.width() != h.side_width {
            return Err(bad(format!(
                "side width {} does not match header width {}",
                rec.side.width(),
                h.side_width
            )));
        }
        rec.current.check_vocab(h.vocab_size).map_err(|e| bad(e.to_string()))?;
        rec.future.check_vocab(h.vocab_size).map_err(|e| bad(e.to_string()))?;
        let ex = SessionExample::new(rec.user, rec.current, rec.future, rec.side)
            .map_err(|e| bad(e.to_string()))?;
        examples.push(ex);
    }
    let header = header.ok_or_else(|| Error::EmptyCorpus("no examples".into()))?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus("no examples".into()));
    }
    let vocab = match header.raw_ids {
        Some(raw) => Vocab::new(raw),
        None => Vocab::identity(header.vocab_size),
    };
    Corpus::new(examples, vocab, header.side_width)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn load_str(s: &str) -> Result<Corpus> {
        read_corpus(s.as_bytes())
    }

    #[test]
    fn empty_file_has_no_examples() {
        let err = load_str("").unwrap_err();
        assert!(err.to_string().contains("no examples"), "{err}");
        let err = load_str("{\"side_width\":2,\"vocab_size\":3}\n").unwrap_err();
        assert!(err.to_string().contains("no examples"), "{err}");
    }

    #[test]
    fn out_of_vocab_track_is_rejected() {
        let text = "{\"side_width\":1,\"vocab_size\":3}\n\
                    {\"user\":\"a\",\"current\":[0,1],\"future\":[3],\"side\":[0]}\n";
        let err = load_str(text).unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_line_names_its_number() {
        let text = "{\"side_width\":1,\"vocab_size\":3}\n\
                    {\"user\":\"a\",\"current\":[0],\"future\":[1],\"side\":[0]}\n\
                    {\"user\":\"b\",\"current\":[0]\n";
        let err = load_str(text).unwrap_err();
        assert!(matches!(err, Error::Format { line: 3, .. }), "{err}");
        assert!(err.to_string().starts_with("line 3"));
    }

    #[test]
    fn side_width_mismatch_is_rejected() {
        let text = "{\"side_width\":2,\"vocab_size\":3}\n\
                    {\"user\":\"a\",\"current\":[0],\"future\":[1],\"side\":[0,1]}\n\
                    {\"user\":\"b\",\"current\":[0],\"future\":[1],\"side\":[0]}\n";
        assert!(matches!(load_str(text), Err(Error::Format { line: 3, .. })));
    }

    #[test]
    fn non_binary_side_and_empty_playlist_are_rejected() {
        let head = "{\"side_width\":1,\"vocab_size\":3}\n";
        let a = format!("{head}{{\"user\":\"a\",\"current\":[0],\"future\":[1],\"side\":[2]}}\n");
        assert!(load_str(&a).is_err());
        let b = format!("{head}{{\"user\":\"a\",\"current\":[],\"future\":[1],\"side\":[0]}}\n");
        assert!(load_str(&b).is_err());
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        let width = 1usize..6;
        width.prop_flat_map(|w| {
            let ex = (
                prop::collection::vec(0u32..12, 1..25),
                prop::collection::vec(0u32..12, 1..25),
                prop::collection::vec(0u8..2, w),
            );
            (prop::collection::vec(ex, 1..12), Just(w), any::<bool>())
        })
        .prop_map(|(rows, w, permuted)| {
            let examples = rows
                .into_iter()
                .enumerate()
                .map(|(i, (c, f, s))| {
                    SessionExample::new(
                        format!("user-{i}"),
                        Playlist::from_indices(c).unwrap(),
                        Playlist::from_indices(f).unwrap(),
                        SideInfoVector::new(s).unwrap(),
                    )
                    .unwrap()
                })
                .collect();
            let vocab = if permuted {
                Vocab::new((0..12).rev().map(|r| r * 10).collect())
            } else {
                Vocab::identity(12)
            };
            Corpus::new(examples, vocab, w).unwrap()
        })
    }

    proptest! {
        #[test]
        fn persistence_round_trips(corpus in arb_corpus()) {
            let mut buf = Vec::new();
            write_corpus(&corpus, &mut buf).unwrap();
            let back = read_corpus(buf.as_slice()).unwrap();
            prop_assert_eq!(back, corpus);
        }
    }
}
