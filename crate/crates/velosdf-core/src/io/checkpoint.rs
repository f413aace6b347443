//! Checkpoints: a small text manifest (epoch, stage, optimizer step, config
//! echo, parameter table) followed by one little-endian f64 blob holding
//! `data`, `m`, `v` for each parameter in manifest order. Parameter order is
//! the store's sorted name order, so save -> load -> save is byte-identical.

use super::{write_atomic, IoError};
use crate::autodiff::ParameterStore;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &str = "velosdf-checkpoint 1";

/// A training snapshot: every parameter with optimizer state, plus the
/// bookkeeping needed to resume or evaluate.
pub struct Checkpoint {
    pub store: ParameterStore,
    pub epoch: u64,
    pub stage: u32,
    pub config: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParameterStore,
    epoch: u64,
    stage: u32,
    config: &BTreeMap<String, String>,
) -> Result<(), IoError> {
    let (step, entries) = store.parts();
    let entries: Vec<_> = entries.collect();

    let mut text = format!("{MAGIC}\nepoch {epoch}\nstage {stage}\nadam_step {step}\n");
    for (key, value) in config {
        assert!(
            !key.contains(char::is_whitespace),
            "config key {key:?} contains whitespace"
        );
        text.push_str(&format!("cfg {key} {value}\n"));
    }
    let mut scalars = 0usize;
    for (name, e) in &entries {
        assert!(
            !name.contains(char::is_whitespace),
            "parameter name {name:?} contains whitespace"
        );
        text.push_str(&format!("param {name} {} {}\n", e.rows, e.cols));
        scalars += 3 * e.rows * e.cols;
    }
    text.push_str(&format!("blob {scalars}\n"));

    let mut bytes = text.into_bytes();
    bytes.reserve(scalars * 8);
    for (_, e) in &entries {
        for slice in [&e.data, &e.m, &e.v] {
            for &v in slice.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;

    // Manifest lines up to and including "blob <n>".
    struct Lines<'a> {
        bytes: &'a [u8],
        pos: usize,
        lineno: usize,
    }
    impl Lines<'_> {
        fn next(&mut self, path: &Path) -> Result<(String, usize), IoError> {
            let start = self.pos;
            while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                self.pos += 1;
            }
            if self.pos >= self.bytes.len() {
                return Err(IoError::parse(path, self.lineno + 1, "truncated manifest"));
            }
            let line = String::from_utf8(self.bytes[start..self.pos].to_vec())
                .map_err(|_| IoError::parse(path, self.lineno + 1, "non-UTF8 manifest line"))?;
            self.pos += 1;
            self.lineno += 1;
            Ok((line, self.lineno))
        }
    }
    let mut lines = Lines {
        bytes: &bytes,
        pos: 0,
        lineno: 0,
    };

    if lines.next(path)?.0 != MAGIC {
        return Err(IoError::parse(path, 1, "not a checkpoint file"));
    }
    let field = |line: &str, key: &str, lineno: usize| -> Result<String, IoError> {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| IoError::parse(path, lineno, format!("expected `{key} ...`")))
    };
    let (line, n) = lines.next(path)?;
    let epoch: u64 = field(&line, "epoch", n)?
        .parse()
        .map_err(|_| IoError::parse(path, n, "bad epoch"))?;
    let (line, n) = lines.next(path)?;
    let stage: u32 = field(&line, "stage", n)?
        .parse()
        .map_err(|_| IoError::parse(path, n, "bad stage"))?;
    let (line, n) = lines.next(path)?;
    let step: u64 = field(&line, "adam_step", n)?
        .parse()
        .map_err(|_| IoError::parse(path, n, "bad adam_step"))?;

    let mut config = BTreeMap::new();
    let mut params: Vec<(String, usize, usize)> = Vec::new();
    let scalars: usize;
    loop {
        let (line, here) = lines.next(path)?;
        if let Some(rest) = line.strip_prefix("cfg ") {
            let (key, value) = rest
                .split_once(' ')
                .ok_or_else(|| IoError::parse(path, here, "bad cfg line"))?;
            config.insert(key.to_string(), value.to_string());
        } else if let Some(rest) = line.strip_prefix("param ") {
            let fields: Vec<&str> = rest.split(' ').collect();
            if fields.len() != 3 {
                return Err(IoError::parse(path, here, "bad param line"));
            }
            let rows = fields[1]
                .parse()
                .map_err(|_| IoError::parse(path, here, "bad rows"))?;
            let cols = fields[2]
                .parse()
                .map_err(|_| IoError::parse(path, here, "bad cols"))?;
            params.push((fields[0].to_string(), rows, cols));
        } else if let Some(rest) = line.strip_prefix("blob ") {
            scalars = rest
                .parse()
                .map_err(|_| IoError::parse(path, here, "bad blob size"))?;
            break;
        } else {
            return Err(IoError::parse(path, here, format!("unexpected line {line:?}")));
        }
    }

    let mut pos = lines.pos;
    let expected: usize = params.iter().map(|(_, r, c)| 3 * r * c).sum();
    if scalars != expected || bytes.len() - pos != scalars * 8 {
        return Err(IoError::Format(format!(
            "{}: blob holds {} bytes, expected {}",
            path.display(),
            bytes.len() - pos,
            expected * 8
        )));
    }

    let mut read_vec = |n: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_le_bytes(
                bytes[pos..pos + 8].try_into().expect("length checked"),
            ));
            pos += 8;
        }
        out
    };
    let mut parts = Vec::with_capacity(params.len());
    for (name, rows, cols) in params {
        let data = read_vec(rows * cols);
        let m = read_vec(rows * cols);
        let v = read_vec(rows * cols);
        parts.push((name, rows, cols, data, m, v));
    }

    Ok(Checkpoint {
        store: ParameterStore::from_parts(step, parts),
        epoch,
        stage,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;

    fn sample_store() -> ParameterStore {
        let mut store = ParameterStore::new();
        store.insert("net.w0", 2, 3, vec![0.5, -1.25, 3.0, 1e-300, 2.2250738585072014e-308, 9.9]);
        store.insert("net.b0", 2, 1, vec![0.0, -0.0]);
        store.insert("gamma_log", 1, 1, vec![10f64.ln()]);
        // Give the optimizer state nontrivial values.
        let mut grads = BTreeMap::new();
        grads.insert("net.w0".to_string(), vec![0.1; 6]);
        grads.insert("net.b0".to_string(), vec![-0.2; 2]);
        grads.insert("gamma_log".to_string(), vec![0.3]);
        store.adam_step(&grads, &AdamConfig::default()).unwrap();
        store
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let store = sample_store();
        let mut config = BTreeMap::new();
        config.insert("seed".to_string(), "7".to_string());
        config.insert("scene".to_string(), "orbiter run".to_string());

        save_checkpoint(&p1, &store, 123, 1, &config).unwrap();
        let ck = load_checkpoint(&p1).unwrap();
        assert_eq!(ck.epoch, 123);
        assert_eq!(ck.stage, 1);
        assert_eq!(ck.config, config);
        assert_eq!(ck.store.step_count(), store.step_count());
        save_checkpoint(&p2, &ck.store, ck.epoch, ck.stage, &ck.config).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_parameters_match_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let store = sample_store();
        save_checkpoint(&path, &store, 0, 2, &BTreeMap::new()).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        for name in ["net.w0", "net.b0", "gamma_log"] {
            assert_eq!(ck.store.data(name).unwrap(), store.data(name).unwrap());
            assert_eq!(ck.store.shape(name), store.shape(name));
        }
        assert_eq!(ck.stage, 2);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(load_checkpoint(&path).is_err());

        // Truncated blob.
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&good, &sample_store(), 1, 1, &BTreeMap::new()).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
