//! Corpus ingestion and byte-level tokenization.
//!
//! A corpus is either a directory of plain-text files (one document per
//! file, visited in file-name order) or a single file holding one document
//! per line. Blank lines are skipped.

use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::model::TokenId;

pub type Document = Vec<u8>;

pub fn load_corpus(path: &Path) -> io::Result<Vec<Document>> {
    let meta = fs::metadata(path)?;
    if meta.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut docs = Vec::with_capacity(files.len());
        for f in files {
            let bytes = fs::read(&f)?;
            if !bytes.iter().all(u8::is_ascii_whitespace) {
                docs.push(bytes);
            }
        }
        Ok(docs)
    } else {
        Ok(split_lines(&fs::read(path)?))
    }
}

/// One document per non-blank line; a trailing `\r` is dropped.
pub fn split_lines(bytes: &[u8]) -> Vec<Document> {
    bytes
        .split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
        .map(<[u8]>::to_vec)
        .collect()
}

pub fn tokenize(bytes: &[u8]) -> Vec<TokenId> {
    bytes.iter().map(|&b| b as TokenId).collect()
}

/// Inverse of [`tokenize`] for ids below 256; larger ids render as `?`.
pub fn detokenize(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .map(|&t| u8::try_from(t).unwrap_or(b'?'))
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// SHA-256 over the documents, each prefixed with its length.
pub fn corpus_digest(docs: &[Document]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        h.update((d.len() as u64).to_le_bytes());
        h.update(d);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_splitting() {
        let docs = split_lines(b"alpha\r\n\n  \nbeta gamma\n");
        assert_eq!(docs, vec![b"alpha".to_vec(), b"beta gamma".to_vec()]);
    }

    #[test]
    fn directory_corpus_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "second").unwrap();
        fs::write(dir.path().join("a.txt"), "first").unwrap();
        fs::write(dir.path().join("c.txt"), "\n").unwrap();
        let docs = load_corpus(dir.path()).unwrap();
        assert_eq!(docs, vec![b"first".to_vec(), b"second".to_vec()]);
    }

    #[test]
    fn tokenize_is_bytes() {
        assert_eq!(tokenize(b"Hi!"), vec![72, 105, 33]);
        assert_eq!(detokenize(&tokenize("héllo".as_bytes())), "héllo");
    }

    #[test]
    fn digest_depends_on_boundaries() {
        let a = corpus_digest(&[b"ab".to_vec(), b"c".to_vec()]);
        let b = corpus_digest(&[b"a".to_vec(), b"bc".to_vec()]);
        assert_ne!(a, b);
    }
}
