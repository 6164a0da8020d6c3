//! Text checkpoint of a network's shape, weights and mask.
//!
//! ```text
//! prunesym-checkpoint 1
//! dim <d>
//! layers <L>
//! w <layer> <node> <slot> <v0> <v1> ...      one line per group, storage order
//! m <layer> <node> <slot> <bits>             0/1 string, one line per group
//! end
//! ```
//!
//! Weights use Rust's shortest round-trip float formatting, so identical
//! state always produces identical bytes.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{EdgeMask, GroupId, NetworkShape, SymNetError, WeightStore};

const MAGIC: &str = "prunesym-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: NetworkShape,
    pub weights: WeightStore,
    pub mask: EdgeMask,
}

pub fn write_checkpoint(out: &mut impl Write, ck: &Checkpoint) -> Result<(), SymNetError> {
    let shape = &ck.shape;
    let mut text = String::new();
    writeln!(text, "{MAGIC}").unwrap();
    writeln!(text, "dim {}", shape.dim()).unwrap();
    writeln!(text, "layers {}", shape.layers()).unwrap();
    for (g, info) in shape.groups().iter().enumerate() {
        let GroupId { layer, node, slot } = info.id;
        write!(text, "w {layer} {node} {slot}").unwrap();
        for v in ck.weights.group(shape, g) {
            write!(text, " {v:?}").unwrap();
        }
        text.push('\n');
    }
    for (g, info) in shape.groups().iter().enumerate() {
        let GroupId { layer, node, slot } = info.id;
        let bits: String = ck.mask.group(shape, g).iter().map(|b| if *b { '1' } else { '0' }).collect();
        writeln!(text, "m {layer} {node} {slot} {bits}").unwrap();
    }
    text.push_str("end\n");
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_checkpoint(input: impl BufRead) -> Result<Checkpoint, SymNetError> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String), SymNetError> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i, l)),
            Some((_, Err(e))) => Err(e.into()),
            None => Err(SymNetError::Checkpoint { line: 0, msg: format!("unexpected end of file, expected {what}") }),
        }
    };
    let err = |line: usize, msg: String| SymNetError::Checkpoint { line, msg };

    let (i, l) = next("header")?;
    if l.trim() != MAGIC {
        return Err(err(i, format!("bad header '{l}'")));
    }
    let mut scalar = |key: &str| -> Result<usize, SymNetError> {
        let (i, l) = next(key)?;
        let rest = l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| err(i, format!("expected '{key}'")))?;
        rest.trim().parse().map_err(|_| err(i, format!("bad {key} value '{rest}'")))
    };
    let dim = scalar("dim")?;
    let layers = scalar("layers")?;
    if dim == 0 || layers == 0 {
        return Err(err(3, "dim and layers must be positive".into()));
    }
    let shape = NetworkShape::new(dim, layers);
    let mut weights = WeightStore::zeros(&shape);
    let mut bits_all: Vec<bool> = Vec::with_capacity(shape.n_weights());

    let parse_id = |i: usize, parts: &[&str]| -> Result<GroupId, SymNetError> {
        let num = |s: &str| s.parse::<usize>().map_err(|_| err(i, format!("bad index '{s}'")));
        Ok(GroupId { layer: num(parts[0])?, node: num(parts[1])?, slot: num(parts[2])? })
    };

    for g in 0..shape.n_groups() {
        let (i, l) = next("weight line")?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() < 4 || parts[0] != "w" {
            return Err(err(i, "expected weight line".into()));
        }
        let id = parse_id(i, &parts[1..4])?;
        if id != shape.group(g).id {
            return Err(err(i, format!("group {id} out of order, expected {}", shape.group(g).id)));
        }
        let vals = &parts[4..];
        let dst = weights.group_mut(&shape, g);
        if vals.len() != dst.len() {
            return Err(err(i, format!("expected {} weights, found {}", dst.len(), vals.len())));
        }
        for (d, s) in dst.iter_mut().zip(vals) {
            *d = s.parse().map_err(|_| err(i, format!("bad weight '{s}'")))?;
            if !d.is_finite() {
                return Err(err(i, format!("non-finite weight '{s}'")));
            }
        }
    }
    for g in 0..shape.n_groups() {
        let (i, l) = next("mask line")?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "m" {
            return Err(err(i, "expected mask line".into()));
        }
        let id = parse_id(i, &parts[1..4])?;
        if id != shape.group(g).id {
            return Err(err(i, format!("group {id} out of order, expected {}", shape.group(g).id)));
        }
        let bits: Vec<bool> = parts[4]
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(err(i, format!("bad mask bit '{other}'"))),
            })
            .collect::<Result<_, _>>()?;
        let info = shape.group(g).clone();
        if bits.len() != info.len {
            return Err(err(i, format!("expected {} mask bits, found {}", info.len, bits.len())));
        }
        bits_all.extend(bits);
    }
    let (i, l) = next("end")?;
    if l.trim() != "end" {
        return Err(err(i, "expected 'end'".into()));
    }
    let mask = EdgeMask::from_bits(&shape, bits_all)?;
    Ok(Checkpoint { shape, weights, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symnet::init_weights;

    #[test]
    fn roundtrip_is_exact_and_byte_stable() {
        let shape = NetworkShape::new(2, 2);
        let weights = init_weights(&shape, 42);
        let mut mask = EdgeMask::dense(&shape);
        mask.restrict(&shape, shape.output_group(), 3);
        let ck = Checkpoint { shape, weights, mask };
        let mut a = Vec::new();
        write_checkpoint(&mut a, &ck).unwrap();
        let back = read_checkpoint(a.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut b = Vec::new();
        write_checkpoint(&mut b, &back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_checkpoint("nope\n".as_bytes()).is_err());
        let shape = NetworkShape::new(1, 1);
        let ck = Checkpoint { weights: init_weights(&shape, 1), mask: EdgeMask::dense(&shape), shape };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(read_checkpoint(truncated.as_bytes()).is_err());
        let corrupted = text.replacen("m 1 2 0 11", "m 1 2 0 1x", 1);
        match read_checkpoint(corrupted.as_bytes()) {
            Err(SymNetError::Checkpoint { msg, .. }) => assert!(msg.contains("bad mask bit")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
