//! Shared flag types.

use std::str::FromStr;

/// Matrix shape written as `HxD`, e.g. `768x3072`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub h: usize,
    pub d: usize,
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace(['X', '\u{d7}'], "x");
        let (h, d) = norm
            .split_once('x')
            .ok_or_else(|| format!("shape '{s}' is not HxD"))?;
        let parse = |v: &str| -> Result<usize, String> {
            let n: usize = v.trim().parse().map_err(|_| format!("bad dimension '{v}'"))?;
            if n == 0 {
                return Err("dimensions must be positive".into());
            }
            Ok(n)
        };
        Ok(Shape {
            h: parse(h)?,
            d: parse(d)?,
        })
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.h, self.d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}
