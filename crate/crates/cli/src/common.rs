use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_ORACLE: u8 = 3;

/// Marker error for a failed oracle run.
#[derive(Debug)]
pub struct OracleFailure(pub usize);

impl std::fmt::Display for OracleFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} oracle suite(s) failed", self.0)
    }
}

impl std::error::Error for OracleFailure {}

pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<OracleFailure>() {
            return EXIT_ORACLE;
        }
        if let Some(e) = cause.downcast_ref::<fssk::Error>() {
            return if e.is_io() { EXIT_IO } else { EXIT_CONFIG };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

/// Feature grid extents given as `CxHxW`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Size {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl std::str::FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let [c, h, w] = parts.as_slice() else {
            return Err(format!("expected CxHxW, got '{s}'"));
        };
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| format!("'{v}' is not a positive integer"))
        };
        Ok(Size {
            channels: num(c)?,
            height: num(h)?,
            width: num(w)?,
        })
    }
}

impl std::fmt::Display for Size {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Worker pool sized by `FSSK_THREADS` when set, otherwise by rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("FSSK_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| fssk::Error::Config(format!("FSSK_THREADS='{v}' is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().context("building the worker pool")
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn check_unit_interval(name: &str, v: f64, open: bool) -> Result<()> {
    let ok = if open {
        v > 0.0 && v < 1.0
    } else {
        (0.0..=1.0).contains(&v)
    };
    if !ok {
        let range = if open { "(0, 1)" } else { "[0, 1]" };
        bail!(fssk::Error::Config(format!("{name} {v} must lie in {range}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        let s: Size = "64x30x30".parse().unwrap();
        assert_eq!((s.channels, s.height, s.width), (64, 30, 30));
        assert_eq!(s.to_string(), "64x30x30");
        for bad in ["64x30", "0x8x8", "axbxc", "1x2x3x4"] {
            assert!(bad.parse::<Size>().is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        let cfg = anyhow::Error::new(fssk::Error::Config("x".into()));
        assert_eq!(exit_code_for(&cfg), EXIT_CONFIG);
        let fmt = anyhow::Error::new(fssk::Error::Format {
            offset: 3,
            msg: "bad".into(),
        })
        .context("loading");
        assert_eq!(exit_code_for(&fmt), EXIT_IO);
        assert_eq!(exit_code_for(&OracleFailure(1).into()), EXIT_ORACLE);
    }
}
