//! Plain-text frame stores and the helpers shared by every on-disk format.
//!
//! Reals are written with 17 significant digits, which round-trips `f64` exactly.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::aa_system::AtomisticFrame;
use crate::numerics::Vector;
use crate::{Error, Result};

pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn format_reals<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    values.into_iter().map(|&x| format_real(x)).collect::<Vec<_>>().join(" ")
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Parses one whitespace-separated line of reals; `line` is 1-based for messages.
pub fn parse_reals(text: &str, line: usize, expected: usize) -> Result<Vec<f64>> {
    let values = text
        .split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|_| parse_error(line, format!("not a number: {tok:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != expected {
        return Err(parse_error(line, format!("expected {expected} values, found {}", values.len())));
    }
    Ok(values)
}

/// Parses `MAGIC v1 key=value ...` into its fields.
pub fn parse_header(text: &str, magic: &str) -> Result<HashMap<String, String>> {
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some(magic) || tokens.next() != Some("v1") {
        return Err(parse_error(1, format!("expected a `{magic} v1` header")));
    }
    tokens
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| parse_error(1, format!("malformed header field {tok:?}")))
        })
        .collect()
}

pub fn header_field<T: std::str::FromStr>(fields: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = fields.get(key).ok_or_else(|| parse_error(1, format!("header is missing `{key}`")))?;
    raw.parse().map_err(|_| parse_error(1, format!("bad value for `{key}`: {raw:?}")))
}

/// Parses a `frame=<t>` line.
pub fn parse_frame_line(text: &str, line: usize) -> Result<usize> {
    text.trim()
        .strip_prefix("frame=")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_error(line, format!("expected `frame=<index>`, found {text:?}")))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents.as_bytes())?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Line cursor with 1-based numbering for error messages.
pub struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        Lines { inner: text.lines().enumerate(), last: 0 }
    }

    pub fn next_line(&mut self) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(parse_error(self.last + 1, "unexpected end of file")),
        }
    }

    /// Next line that is not blank, if any.
    pub fn peek_nonblank(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            if !l.trim().is_empty() {
                return Some((i + 1, l));
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Aa,
    Cg,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Aa => "AA",
            Space::Cg => "CG",
        })
    }
}

impl std::str::FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AA" => Ok(Space::Aa),
            "CG" => Ok(Space::Cg),
            _ => Err(parse_error(1, format!("unknown space {s:?}"))),
        }
    }
}

/// Frames of one trajectory. AA stores carry forces; CG stores carry positions only.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStore {
    pub n: usize,
    pub dim: usize,
    pub space: Space,
    pub frames: Vec<AtomisticFrame>,
}

impl FrameStore {
    pub fn new(n: usize, dim: usize, space: Space, frames: Vec<AtomisticFrame>) -> Result<Self> {
        let store = FrameStore { n, dim, space, frames };
        for f in &store.frames {
            if f.positions.len() != n * dim {
                return Err(Error::mismatch(n * dim, f.positions.len(), "stored positions"));
            }
            match (&f.forces, space) {
                (Some(forces), Space::Aa) if forces.len() == n * dim => {}
                (None, Space::Cg) => {}
                _ => return Err(Error::InvalidArgument(format!("frame {} has the wrong forces for {space}", f.frame_index))),
            }
        }
        Ok(store)
    }

    /// CG trajectory store from bare positions.
    pub fn trajectory(n: usize, dim: usize, positions: &[Vector]) -> Result<Self> {
        let frames = positions.iter().enumerate().map(|(t, r)| AtomisticFrame::new(t, r.clone())).collect();
        FrameStore::new(n, dim, Space::Cg, frames)
    }

    pub fn positions(&self) -> Vec<Vector> {
        self.frames.iter().map(|f| f.positions.clone()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("FRAMES v1 n={} dim={} space={}\n", self.n, self.dim, self.space);
        for f in &self.frames {
            out.push_str(&format!("frame={}\n", f.frame_index));
            out.push_str(&format_reals(f.positions.iter()));
            out.push('\n');
            if let Some(forces) = &f.forces {
                out.push_str(&format_reals(forces.iter()));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let (_, header) = lines.next_line()?;
        let fields = parse_header(header, "FRAMES")?;
        let n: usize = header_field(&fields, "n")?;
        let dim: usize = header_field(&fields, "dim")?;
        let space: Space = header_field(&fields, "space")?;
        let len = n * dim;
        let mut frames = Vec::new();
        while let Some((no, line)) = lines.peek_nonblank() {
            let frame_index = parse_frame_line(line, no)?;
            let (no, pos) = lines.next_line()?;
            let positions = Vector::from_vec(parse_reals(pos, no, len)?);
            let forces = if space == Space::Aa {
                let (no, f) = lines.next_line()?;
                Some(Vector::from_vec(parse_reals(f, no, len)?))
            } else {
                None
            };
            frames.push(AtomisticFrame { frame_index, positions, forces });
        }
        FrameStore::new(n, dim, space, frames)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.render())
    }

    pub fn read(path: &Path) -> Result<Self> {
        FrameStore::parse(&fs::read_to_string(path)?)
    }
}
