//! Split persistence: a `[train]`, `[test]` and `[fold K]` section header
//! each followed by one index per line.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::SplitPlan;

use super::atomic_write;

pub fn split_to_text(plan: &SplitPlan) -> String {
    let mut s = String::new();
    let mut section = |name: &str, idx: &[usize]| {
        let _ = writeln!(s, "[{name}]");
        for i in idx {
            let _ = writeln!(s, "{i}");
        }
    };
    section("train", &plan.train);
    section("test", &plan.test);
    for (k, f) in plan.folds.iter().enumerate() {
        section(&format!("fold {k}"), f);
    }
    s
}

/// Parses the text form and validates it against `n_total` samples.
pub fn split_from_text(text: &str, n_total: usize) -> Result<SplitPlan> {
    let mut train = None;
    let mut test = None;
    let mut folds: Vec<Vec<usize>> = Vec::new();
    let mut sections: Vec<(String, Vec<usize>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            sections.push((name.to_string(), Vec::new()));
            continue;
        }
        let idx: usize = line.parse().map_err(|_| Error::Malformed {
            what: "split file",
            reason: format!("line {}: `{line}` is not an index", n + 1),
        })?;
        match sections.last_mut() {
            Some((_, v)) => v.push(idx),
            None => {
                return Err(Error::Malformed {
                    what: "split file",
                    reason: "index before any section header".into(),
                })
            }
        }
    }
    for (name, idx) in sections {
        match name.as_str() {
            "train" if train.is_none() => train = Some(idx),
            "test" if test.is_none() => test = Some(idx),
            other => {
                other
                    .strip_prefix("fold ")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k == folds.len())
                    .ok_or_else(|| Error::Malformed {
                        what: "split file",
                        reason: format!("unexpected section `[{other}]`"),
                    })?;
                folds.push(idx);
            }
        }
    }
    let plan = SplitPlan {
        train: train.ok_or_else(|| Error::InvalidSplit("missing [train] section".into()))?,
        test: test.ok_or_else(|| Error::InvalidSplit("missing [test] section".into()))?,
        folds,
    };
    plan.validate(n_total)?;
    Ok(plan)
}

pub fn save_split(path: &Path, plan: &SplitPlan) -> Result<()> {
    let text = split_to_text(plan);
    atomic_write(path, |f| f.write_all(text.as_bytes()))
}

pub fn load_split(path: &Path, n_total: usize) -> Result<SplitPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    split_from_text(&text, n_total)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::train::make_split;

    #[test]
    fn round_trip_and_tamper() {
        let labels: Vec<u8> = (0..70).map(|i| (i % 14) as u8).collect();
        let plan = make_split(&labels, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        save_split(&path, &plan).unwrap();
        assert_eq!(load_split(&path, 70).unwrap(), plan);

        let text = split_to_text(&plan).replacen("[test]\n", &format!("[test]\n{}\n", plan.train[0]), 1);
        assert!(matches!(split_from_text(&text, 70), Err(Error::InvalidSplit(_))));
        assert!(split_from_text("[train]\nx\n", 1).is_err());
    }
}
