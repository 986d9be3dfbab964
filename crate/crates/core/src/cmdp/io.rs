//! Flat whitespace-separated text format for CMDPs.
//!
//! ```text
//! cmdp 1
//! <n_states> <n_actions>
//! <discount> <cost_limit> <horizon>
//! <μ: n_states values>
//! <P: one line of n_states values per (s, a)>
//! <R: likewise>
//! <C: likewise>
//! ```
//! Lines starting with `#` are ignored. Floats are written in shortest
//! round-trip form, so export followed by import is lossless.

use std::fmt::Write as _;
use std::path::Path;

use super::TabularCmdp;
use crate::error::{Error, Result};

const MAGIC: &str = "cmdp";
const VERSION: &str = "1";

fn join(xs: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:?}");
    }
    s
}

pub fn cmdp_to_text(cmdp: &TabularCmdp) -> String {
    let (ns, na) = (cmdp.n_states(), cmdp.n_actions());
    let mut out = format!("{MAGIC} {VERSION}\n{ns} {na}\n");
    let _ = writeln!(out, "{:?} {:?} {}", cmdp.discount(), cmdp.cost_limit(), cmdp.horizon());
    let _ = writeln!(out, "{}", join(cmdp.initial_dist()));
    for f in [TabularCmdp::p, TabularCmdp::r, TabularCmdp::c] {
        for s in 0..ns {
            for a in 0..na {
                let row: Vec<f64> = (0..ns).map(|s2| f(cmdp, s, a, s2)).collect();
                let _ = writeln!(out, "{}", join(&row));
            }
        }
    }
    out
}

pub fn cmdp_from_text(text: &str) -> Result<TabularCmdp> {
    let mut tokens = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .flat_map(str::split_whitespace);
    let mut next = |what: &str| tokens.next().ok_or_else(|| Error::Parse(format!("unexpected end of input reading {what}")));

    if next("header")? != MAGIC || next("version")? != VERSION {
        return Err(Error::Parse(format!("expected '{MAGIC} {VERSION}' header")));
    }
    let int = |t: &str, what: &str| t.parse::<usize>().map_err(|e| Error::Parse(format!("{what}: {e}")));
    let float = |t: &str, what: &str| t.parse::<f64>().map_err(|e| Error::Parse(format!("{what}: {e}")));

    let ns = int(next("n_states")?, "n_states")?;
    let na = int(next("n_actions")?, "n_actions")?;
    let discount = float(next("discount")?, "discount")?;
    let cost_limit = float(next("cost_limit")?, "cost_limit")?;
    let horizon = int(next("horizon")?, "horizon")?;
    let mut read = |n: usize, what: &str| -> Result<Vec<f64>> { (0..n).map(|_| float(next(what)?, what)).collect() };
    let mu = read(ns, "initial distribution")?;
    let len = ns * na * ns;
    let p = read(len, "transition")?;
    let r = read(len, "reward")?;
    let c = read(len, "cost")?;
    if tokens.next().is_some() {
        return Err(Error::Parse("trailing data after cost table".into()));
    }
    TabularCmdp::new(ns, na, p, r, c, discount, cost_limit, mu, horizon)
}

pub fn write_cmdp(path: &Path, cmdp: &TabularCmdp) -> Result<()> {
    std::fs::write(path, cmdp_to_text(cmdp)).map_err(|e| Error::io(path, e))
}

pub fn read_cmdp(path: &Path) -> Result<TabularCmdp> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cmdp_from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::random_cmdp;
    use super::super::{make_gridworld, GridSpec};
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        for m in [random_cmdp(4, 3, 11), make_gridworld(&GridSpec::corridor_a()).unwrap()] {
            assert_eq!(cmdp_from_text(&cmdp_to_text(&m)).unwrap(), m);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let m = random_cmdp(2, 2, 3);
        write_cmdp(&path, &m).unwrap();
        assert_eq!(read_cmdp(&path).unwrap(), m);
    }

    #[test]
    fn rejects_truncated_and_padded_input() {
        let text = cmdp_to_text(&random_cmdp(2, 2, 3));
        let cut = &text[..text.len() / 2];
        assert!(matches!(cmdp_from_text(cut), Err(Error::Parse(_))));
        assert!(matches!(cmdp_from_text(&format!("{text} 1.0")), Err(Error::Parse(_))));
        assert!(cmdp_from_text("cmdp 2\n").is_err());
    }

    #[test]
    fn comments_are_ignored() {
        let text = "# one state\ncmdp 1\n1 1\n0.5 0 3\n1\n1\n# R\n2\n0\n";
        let m = cmdp_from_text(text).unwrap();
        assert_eq!(m.r(0, 0, 0), 2.0);
        assert_eq!(m.horizon(), 3);
    }
}
