//! Model checkpoints: a self-describing text format with hex-encoded
//! IEEE-754 bits for exact round-trips.
//!
//! ```text
//! hydrowarn-checkpoint v1
//! cell gru
//! input_dim 24
//! hidden_dim 32
//! leads 1
//! tensor cell.w_z 32 24
//! 3fe0000000000000 ... (cols words per row line)
//! ...
//! end
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rnn::{CellKind, RmModel};

pub fn save_model(model: &RmModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("hydrowarn-checkpoint v1\n");
    out.push_str(&format!("cell {}\n", model.cell_kind.name()));
    out.push_str(&format!("input_dim {}\n", model.input_dim));
    out.push_str(&format!("hidden_dim {}\n", model.hidden_dim));
    out.push_str(&format!("leads {}\n", model.n_leads));
    model.for_each_tensor(&mut |name, rows, cols, data| {
        out.push_str(&format!("tensor {name} {rows} {cols}\n"));
        for r in 0..rows {
            let row: Vec<String> = data[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| format!("{:016x}", v.to_bits()))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    });
    out.push_str("end\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<RmModel> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let mut next_line = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Schema(format!("checkpoint truncated before {what}")))
    };
    let magic = next_line("header")?;
    if magic.trim() != "hydrowarn-checkpoint v1" {
        return Err(Error::Schema(format!("bad checkpoint header {magic:?}")));
    }
    let field = |line: String, key: &str| -> Result<String> {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| Error::Schema(format!("bad checkpoint line {line:?}")))?;
        if k != key {
            return Err(Error::Schema(format!("expected {key}, got {k}")));
        }
        Ok(v.trim().to_string())
    };
    let cell = CellKind::parse(&field(next_line("cell")?, "cell")?)?;
    let input_dim: usize = field(next_line("input_dim")?, "input_dim")?
        .parse()
        .map_err(|e| Error::Schema(format!("bad input_dim: {e}")))?;
    let hidden_dim: usize = field(next_line("hidden_dim")?, "hidden_dim")?
        .parse()
        .map_err(|e| Error::Schema(format!("bad hidden_dim: {e}")))?;
    let leads: usize = field(next_line("leads")?, "leads")?
        .parse()
        .map_err(|e| Error::Schema(format!("bad leads: {e}")))?;
    let mut model = RmModel::new(cell, input_dim, hidden_dim, leads, 0)?;

    // Read tensors in declaration order and assign by matching names.
    let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    loop {
        let line = next_line("tensor or end")?;
        let line = line.trim().to_string();
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(Error::Schema(format!("bad tensor line {line:?}")));
        }
        let name = parts[1].to_string();
        let rows: usize = parts[2]
            .parse()
            .map_err(|e| Error::Schema(format!("bad rows: {e}")))?;
        let cols: usize = parts[3]
            .parse()
            .map_err(|e| Error::Schema(format!("bad cols: {e}")))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = next_line("tensor row")?;
            for word in row.split_whitespace() {
                let bits = u64::from_str_radix(word, 16)
                    .map_err(|e| Error::Schema(format!("bad hex value {word:?}: {e}")))?;
                data.push(f64::from_bits(bits));
            }
        }
        if data.len() != rows * cols {
            return Err(Error::Schema(format!(
                "tensor {name}: expected {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        tensors.push((name, rows, cols, data));
    }

    let mut cursor = 0usize;
    let mut assign_err: Option<Error> = None;
    model.for_each_tensor_mut(&mut |name, rows, cols, dst| {
        if assign_err.is_some() {
            return;
        }
        let Some((got_name, got_rows, got_cols, data)) = tensors.get(cursor) else {
            assign_err = Some(Error::Schema(format!("checkpoint missing tensor {name}")));
            return;
        };
        if got_name != name || *got_rows != rows || *got_cols != cols {
            assign_err = Some(Error::Schema(format!(
                "tensor mismatch: expected {name} {rows}x{cols}, got {got_name} {got_rows}x{got_cols}"
            )));
            return;
        }
        dst.copy_from_slice(data);
        cursor += 1;
    });
    if let Some(e) = assign_err {
        return Err(e);
    }
    if cursor != tensors.len() {
        return Err(Error::Schema("checkpoint has extra tensors".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for kind in [CellKind::Elman, CellKind::Gru] {
            let model = RmModel::new(kind, 7, 5, 2, 99).unwrap();
            save_model(&model, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back.cell_kind, model.cell_kind);
            assert_eq!(back.flatten(), model.flatten(), "bit-exact parameters");
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let model = RmModel::new(CellKind::Gru, 3, 4, 1, 7).unwrap();
        save_model(&model, &a).unwrap();
        save_model(&model, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(load_model(&path).is_err());
    }
}
