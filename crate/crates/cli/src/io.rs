use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use otq::{parse_corpus, OpenTree};

/// Process exit classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Validation = 1,
    Io = 2,
    Config = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub class: Class,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    fn or_class(self, class: Class) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_class(self, class: Class) -> CmdResult<T> {
        self.map_err(|e| Failure {
            class,
            error: e.into(),
        })
    }
}

pub fn fail<T>(class: Class, msg: impl fmt::Display) -> CmdResult<T> {
    Err(Failure {
        class,
        error: anyhow::anyhow!("{msg}"),
    })
}

pub fn read_text(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))
        .or_class(Class::Io)
}

pub fn read_corpus(path: &Path) -> CmdResult<Vec<OpenTree>> {
    let text = read_text(path)?;
    parse_corpus(&text)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
        .or_class(Class::Validation)
}

/// Writes `bytes` to `out`, or stdout when `out` is `None`. Files are written
/// to a sibling temporary and renamed so a failed run leaves nothing behind.
pub fn emit(out: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match out {
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush()).or_class(Class::Io)
        }
        Some(path) => {
            let mut tmp = PathBuf::from(path);
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".partial");
            tmp.set_file_name(name);
            fs::write(&tmp, bytes)
                .and_then(|_| fs::rename(&tmp, path))
                .map_err(|e| {
                    let _ = fs::remove_file(&tmp);
                    anyhow::anyhow!("writing {}: {e}", path.display())
                })
                .or_class(Class::Io)
        }
    }
}
