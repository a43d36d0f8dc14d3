//! Parameter checkpoints: a text manifest, one line per tensor (`name d0 d1 ...`),
//! followed by the raw values as little-endian `f64`, tensors in manifest order.
//!
//! ```text
//! depthfuse-params 2
//! unary.0.weight 8 3 3 3
//! unary.0.bias 8
//! <binary payload>
//! ```

use std::io::{BufRead, Write};

use super::tensor::Param;
use crate::error::{Error, Result};

const MAGIC: &str = "depthfuse-params";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, param: &Param) -> Self {
        NamedTensor {
            name: name.into(),
            shape: param.shape.clone(),
            values: param.value.clone(),
        }
    }

    pub fn from_values(name: impl Into<String>, values: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            shape: vec![values.len()],
            values,
        }
    }
}

pub fn write_checkpoint(mut out: impl Write, tensors: &[NamedTensor]) -> Result<()> {
    writeln!(out, "{MAGIC} {}", tensors.len())?;
    for t in tensors {
        if t.name.is_empty() || t.name.contains(char::is_whitespace) {
            return Err(Error::Argument(format!("tensor name {:?} is not a single token", t.name)));
        }
        write!(out, "{}", t.name)?;
        for d in &t.shape {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
    }
    for t in tensors {
        for v in &t.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl BufRead) -> Result<Vec<NamedTensor>> {
    let mut offset = 0usize;
    let mut line = String::new();
    let next_line = |input: &mut dyn BufRead, line: &mut String, offset: &mut usize| -> Result<usize> {
        line.clear();
        let start = *offset;
        let n = input.read_line(line)?;
        if n == 0 {
            return Err(Error::parse(start, "unexpected end of manifest"));
        }
        *offset += n;
        Ok(start)
    };

    let start = next_line(&mut input, &mut line, &mut offset)?;
    let mut head = line.split_whitespace();
    if head.next() != Some(MAGIC) {
        return Err(Error::parse(start, format!("missing `{MAGIC}` header")));
    }
    let count: usize = head
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(start, "bad tensor count"))?;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let start = next_line(&mut input, &mut line, &mut offset)?;
        let mut fields = line.split_whitespace();
        let name = fields
            .next()
            .ok_or_else(|| Error::parse(start, "empty manifest line"))?
            .to_string();
        let shape = fields
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| Error::parse(start, format!("bad dimension {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        tensors.push(NamedTensor {
            name,
            shape,
            values: Vec::new(),
        });
    }

    let mut buf = [0u8; 8];
    for t in &mut tensors {
        let len: usize = t.shape.iter().product();
        t.values.reserve(len);
        for _ in 0..len {
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::parse(offset, format!("payload truncated inside {}", t.name)))?;
            offset += 8;
            t.values.push(f64::from_le_bytes(buf));
        }
    }
    Ok(tensors)
}
