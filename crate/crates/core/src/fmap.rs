//! `FMAP v1` text format: a header line `C H W` followed by `C·H·W`
//! whitespace-separated reals in `(c, y, x)` order.
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub fn to_string(f: &FeatureMap) -> String {
    let (c, h, w) = f.dims();
    let mut s = format!("{c} {h} {w}\n");
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if x > 0 {
                    s.push(' ');
                }
                write!(s, "{}", f.get(ch, y, x)).expect("write to string");
            }
            s.push('\n');
        }
    }
    s
}

pub fn parse(text: &str) -> Result<FeatureMap> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing `C H W` header".into(),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: hline + 1,
            msg: format!("bad header: {e}"),
        })?;
    let [c, h, w] = dims[..] else {
        return Err(Error::Parse {
            line: hline + 1,
            msg: format!("header needs 3 counts, found {}", dims.len()),
        });
    };
    let mut data = Vec::with_capacity(c * h * w);
    for (ln, line) in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad value `{tok}`"),
            })?;
            data.push(v);
        }
    }
    if data.len() != c * h * w {
        return Err(Error::Parse {
            line: 0,
            msg: format!("expected {} values, found {}", c * h * w, data.len()),
        });
    }
    FeatureMap::new(c, h, w, data)
}

pub fn write(path: &Path, f: &FeatureMap) -> Result<()> {
    std::fs::write(path, to_string(f)).map_err(|e| Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn read(path: &Path) -> Result<FeatureMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse(&text)
}
