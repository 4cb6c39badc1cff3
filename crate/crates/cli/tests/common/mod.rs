//! Reference implementations used as oracles by the integration tests. They
//! are written from the format definitions and share no code with the
//! library's codec.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use faar_core::io::unpack_nvfp4;
use faar_core::{dequantize, QuantizedTensor};

pub const GRID: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// `(code, value)` for every non-negative finite E4M3 pattern.
pub fn e4m3_table() -> Vec<(u8, f64)> {
    (0u8..0x7f)
        .map(|code| {
            let e = (code >> 3) as i32;
            let m = (code & 7) as f64;
            let v = if e == 0 {
                m * 2f64.powi(-9)
            } else {
                (8.0 + m) * 2f64.powi(e - 10)
            };
            (code, v)
        })
        .collect()
}

/// Nearest table entry by linear scan; ties go to the even code.
pub fn e4m3_nearest(table: &[(u8, f64)], x: f64) -> f64 {
    let mut best = table[0];
    for &(code, v) in table {
        let (d, db) = ((v - x).abs(), (best.1 - x).abs());
        if d < db || (d == db && code % 2 == 0 && best.0 % 2 == 1) {
            best = (code, v);
        }
    }
    best.1
}

/// Global scale and block scales of a flat tensor.
pub fn scales(table: &[(u8, f64)], values: &[f64], bs: usize) -> (f64, Vec<f64>) {
    let amax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let s_global = if amax == 0.0 {
        1.0
    } else {
        ((amax / 2688.0) as f32) as f64
    };
    let blocks = values
        .chunks(bs)
        .map(|b| {
            let a = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            e4m3_nearest(table, a / (6.0 * s_global)).max(2f64.powi(-9))
        })
        .collect();
    (s_global, blocks)
}

/// Index of the nearest grid node to `t ∈ [0, 6]`; ties to the even index.
pub fn rtn_index(t: f64) -> usize {
    let mut best = 0;
    for (k, &n) in GRID.iter().enumerate() {
        let (d, db) = ((n - t).abs(), (GRID[best] - t).abs());
        if d < db || (d == db && k % 2 == 0) {
            best = k;
        }
    }
    best
}

/// Node-membership and re-encode violations of a packed tensor, plus scale
/// representability problems.
pub fn export_violations(table: &[(u8, f64)], q: &QuantizedTensor) -> usize {
    let s = q.scales();
    let mut bad = 0;
    if (s.s_global as f32) as f64 != s.s_global || !(s.s_global > 0.0) {
        bad += 1;
    }
    bad += s
        .s_block
        .iter()
        .filter(|b| !table.iter().any(|&(_, v)| v == **b && v > 0.0))
        .count();
    let values = dequantize(q);
    for (i, (&x, c)) in values.data().iter().zip(q.codes()).enumerate() {
        let sp = s.s_block[i / s.block_size] * s.s_global;
        let t = x.abs() / sp;
        let Some(k) = GRID.iter().position(|&n| n == t) else {
            bad += 1;
            continue;
        };
        // re-encode: RTN of the dequantized value must give back the code
        let r = rtn_index(t.min(6.0));
        let sign_ok = k == 0 || c.is_negative() == (x < 0.0);
        if r != k || r != c.node_index() || !sign_ok {
            bad += 1;
        }
    }
    bad
}

/// Every `.nvf4` file below `dir`.
pub fn packed_files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walk(dir)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "nvf4"))
        .collect();
    out.sort();
    out
}

pub fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

pub fn packed_violations(table: &[(u8, f64)], dir: &Path) -> (usize, usize) {
    let files = packed_files(dir);
    let bad = files
        .iter()
        .map(|f| export_violations(table, &unpack_nvfp4(f).unwrap()))
        .sum();
    (files.len(), bad)
}

/// Runs the CLI in-process and panics on a non-zero exit.
pub fn faar(args: &[&str]) {
    let mut argv = vec!["faar"];
    argv.extend_from_slice(args);
    let code = faar_cli::dispatch(argv);
    assert_eq!(code, 0, "faar {} exited with {code}", args.join(" "));
}

pub fn faar_code(args: &[&str]) -> i32 {
    let mut argv = vec!["faar"];
    argv.extend_from_slice(args);
    faar_cli::dispatch(argv)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
