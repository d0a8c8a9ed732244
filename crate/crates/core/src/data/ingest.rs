//! Readers for raw interaction logs and attribute sidecars.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{EmkdError, Result};

/// One implicit-feedback event with raw identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Raw `item → attributes` association.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemAttributes {
    pub item: String,
    pub attributes: Vec<String>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| EmkdError::io(path, e))
}

fn lines<'a, R: BufRead + 'a>(
    reader: R,
    path: &'a Path,
) -> impl Iterator<Item = Result<(usize, String)>> + 'a {
    reader.lines().enumerate().filter_map(move |(i, l)| match l {
        Err(e) => Some(Err(EmkdError::io(path, e))),
        Ok(l) => {
            let l = l.trim_end_matches('\r').to_string();
            (!l.trim().is_empty()).then_some(Ok((i + 1, l)))
        }
    })
}

fn malformed(path: &Path, line: usize, detail: impl Into<String>) -> EmkdError {
    EmkdError::Malformed {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn parse_ts(path: &Path, line: usize, raw: &str) -> Result<i64> {
    raw.trim()
        .parse()
        .map_err(|_| malformed(path, line, format!("timestamp {raw:?} is not an integer")))
}

/// `user <TAB> item <TAB> timestamp` rows. `origin` only labels errors.
pub fn parse_tsv<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for row in lines(reader, origin) {
        let (n, line) = row?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(
                origin,
                n,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(malformed(origin, n, "empty user or item id"));
        }
        out.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp: parse_ts(origin, n, fields[2])?,
        });
    }
    Ok(out)
}

pub fn ingest_tsv(path: &Path) -> Result<Vec<Interaction>> {
    parse_tsv(open(path)?, path)
}

/// MovieLens `user::item::rating::timestamp`; ratings are dropped.
pub fn parse_ml1m<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for row in lines(reader, origin) {
        let (n, line) = row?;
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(malformed(
                origin,
                n,
                format!("expected 4 '::'-separated fields, found {}", fields.len()),
            ));
        }
        out.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp: parse_ts(origin, n, fields[3])?,
        });
    }
    Ok(out)
}

pub fn ingest_ml1m(path: &Path) -> Result<Vec<Interaction>> {
    parse_ml1m(open(path)?, path)
}

/// `item <TAB> attr[,attr…]` rows.
pub fn parse_attributes<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<ItemAttributes>> {
    let mut out = Vec::new();
    for row in lines(reader, origin) {
        let (n, line) = row?;
        let Some((item, attrs)) = line.split_once('\t') else {
            return Err(malformed(origin, n, "expected item <TAB> attributes"));
        };
        let attributes: Vec<String> = attrs
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(String::from)
            .collect();
        if item.is_empty() {
            return Err(malformed(origin, n, "empty item id"));
        }
        out.push(ItemAttributes {
            item: item.to_string(),
            attributes,
        });
    }
    Ok(out)
}

pub fn ingest_attributes(path: &Path) -> Result<Vec<ItemAttributes>> {
    parse_attributes(open(path)?, path)
}

/// MovieLens `movies.dat`: `item::title::Genre|Genre`, genres as attributes.
pub fn parse_ml1m_movies<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<ItemAttributes>> {
    let mut out = Vec::new();
    for row in lines(reader, origin) {
        let (n, line) = row?;
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() < 3 {
            return Err(malformed(origin, n, "expected item::title::genres"));
        }
        let genres = fields[fields.len() - 1];
        out.push(ItemAttributes {
            item: fields[0].to_string(),
            attributes: genres.split('|').filter(|g| !g.is_empty()).map(String::from).collect(),
        });
    }
    Ok(out)
}

/// Reads `movies.dat`, which ships in ISO-8859-1; bytes are mapped to chars
/// one-to-one so titles never abort the read.
pub fn ingest_ml1m_movies(path: &Path) -> Result<Vec<ItemAttributes>> {
    let bytes = std::fs::read(path).map_err(|e| EmkdError::io(path, e))?;
    let text: String = bytes.iter().map(|&b| b as char).collect();
    parse_ml1m_movies(text.as_bytes(), path)
}
