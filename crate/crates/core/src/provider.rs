//! Text embedding providers used by attribute augmentation.
//!
//! Two implementations ship here: [`FixtureProvider`], which answers from a
//! precomputed embedding file plus a text lookup, and [`StdioProvider`],
//! which talks to an external encoder process over a line-delimited JSON
//! protocol:
//!
//! ```text
//! -> {"texts": ["a sedan, red", "a sedan, blue"]}
//! <- {"dim": 512, "rows": [[...], [...]]}
//! <- {"error": "..."}            (on a failed request; the process keeps running)
//! ```

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{l2_normalize, load_embeddings, parse_json_lines, EmbeddingMatrix};

/// Something that turns texts into L2-normalized embeddings.
///
/// Output row `i` embeds input text `i`. The same input list must always
/// produce the same matrix.
pub trait EmbeddingProvider: Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix>;
}

#[derive(Debug, Deserialize)]
struct LookupLine {
    text: String,
    row: usize,
}

/// Provider backed by a fixture: an embedding file and a JSON-lines
/// `{"text": ..., "row": ...}` lookup. Unknown texts are provider errors.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    matrix: EmbeddingMatrix,
    lookup: HashMap<String, usize>,
}

impl FixtureProvider {
    pub fn new(matrix: EmbeddingMatrix, lookup: HashMap<String, usize>) -> Result<Self> {
        if let Some((text, &row)) = lookup.iter().find(|(_, &r)| r >= matrix.rows()) {
            return Err(Error::Validation(format!(
                "fixture text {text:?} points at row {row}, matrix has {} rows",
                matrix.rows()
            )));
        }
        Ok(FixtureProvider {
            matrix: l2_normalize(&matrix)?,
            lookup,
        })
    }

    /// Path of the lookup file that accompanies a fixture embedding file.
    pub fn lookup_path(matrix_path: &Path) -> PathBuf {
        matrix_path.with_extension("jsonl")
    }

    /// Loads `path` and the lookup next to it (same stem, `.jsonl`).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let matrix = load_embeddings(path)?;
        let lookup_path = Self::lookup_path(path);
        let text = std::fs::read_to_string(&lookup_path).map_err(|e| Error::io(&lookup_path, e))?;
        let mut lookup = HashMap::new();
        for line in parse_json_lines::<LookupLine>(&text, &lookup_path)? {
            if lookup.insert(line.text.clone(), line.row).is_some() {
                return Err(Error::Validation(format!(
                    "{}: text {:?} listed twice",
                    lookup_path.display(),
                    line.text
                )));
            }
        }
        Self::new(matrix, lookup)
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }
}

impl EmbeddingProvider for FixtureProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix> {
        let rows = texts
            .iter()
            .map(|t| {
                self.lookup
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Provider(format!("no fixture embedding for text {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.matrix.select_rows(&rows))
    }
}

#[derive(Serialize)]
struct Request<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct Response {
    #[serde(default)]
    dim: Option<usize>,
    #[serde(default)]
    rows: Option<Vec<Vec<f32>>>,
    #[serde(default)]
    error: Option<String>,
}

/// Encodes one request line, without the trailing newline.
pub fn encode_request(texts: &[String]) -> String {
    serde_json::to_string(&Request { texts }).expect("requests always serialize")
}

/// Decodes one response line for a request of `expected` texts.
pub fn decode_response(line: &str, expected: usize) -> Result<EmbeddingMatrix> {
    let resp: Response = serde_json::from_str(line.trim())
        .map_err(|e| Error::Provider(format!("malformed response: {e}")))?;
    if let Some(msg) = resp.error {
        return Err(Error::Provider(msg));
    }
    let dim = resp
        .dim
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Provider("response lacks a positive \"dim\"".into()))?;
    let rows = resp
        .rows
        .ok_or_else(|| Error::Provider("response lacks \"rows\"".into()))?;
    if rows.len() != expected {
        return Err(Error::Provider(format!(
            "asked for {expected} embeddings, got {}",
            rows.len()
        )));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != dim) {
        return Err(Error::Provider(format!("row {i} does not have dim {dim}")));
    }
    let m = if rows.is_empty() {
        EmbeddingMatrix::empty(dim)?
    } else {
        EmbeddingMatrix::from_rows(&rows)?
    };
    l2_normalize(&m).map_err(|e| Error::Provider(e.to_string()))
}

struct Pipe {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Provider that forwards requests to a child process speaking the stdio
/// protocol. Requests are serialized; one is in flight at a time.
pub struct StdioProvider {
    child: Child,
    pipe: Mutex<Pipe>,
}

impl StdioProvider {
    /// Starts `program` with `args` and talks to it over stdin/stdout.
    pub fn spawn<S: AsRef<std::ffi::OsStr>>(program: S, args: &[S]) -> Result<Self> {
        let program_name = PathBuf::from(program.as_ref());
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(&program_name, e))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(StdioProvider {
            child,
            pipe: Mutex::new(Pipe { stdin, stdout }),
        })
    }

    /// Splits a shell-like command line on whitespace and spawns it.
    pub fn spawn_command_line(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty provider command".into()))?;
        let args: Vec<&str> = parts.collect();
        Self::spawn(program, &args)
    }
}

impl EmbeddingProvider for StdioProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix> {
        let mut pipe = self.pipe.lock().unwrap_or_else(|e| e.into_inner());
        let mut line = encode_request(texts);
        line.push('\n');
        pipe.stdin
            .write_all(line.as_bytes())
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| Error::Provider(format!("write to provider failed: {e}")))?;
        let mut response = String::new();
        let n = pipe
            .stdout
            .read_line(&mut response)
            .map_err(|e| Error::Provider(format!("read from provider failed: {e}")))?;
        if n == 0 {
            return Err(Error::Provider("provider closed its output".into()));
        }
        decode_response(&response, texts.len())
    }
}

impl Drop for StdioProvider {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
