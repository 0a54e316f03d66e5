//! SDPA sparse problem files and CSDP-style sparse solution files.
//!
//! The SDPA format describes `max ⟨F₀, Y⟩ s.t. ⟨F_i, Y⟩ = c_i, Y ⪰ 0`, so a
//! problem is written with `F₀ = −C`, `F_i = A_i`, `c = b`. Free variables are
//! split as `w = w⁺ − w⁻` into one trailing diagonal block of size `2p`.
//!
//! Solution files hold the dual vector on the first line and then
//! `matno blkno i j value` lines, with `matno 1` for the slack `S` and
//! `matno 2` for `X`. The solver's dual vector has the opposite sign to ours.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::{BlockKind, BlockMat, Constraint, Entry, SdpError, SdpProblem, SdpSolution};

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Blocks as written to file, including the split free-variable block.
fn file_blocks(p: &SdpProblem) -> Vec<BlockKind> {
    let mut b = p.blocks.clone();
    if p.n_free > 0 {
        b.push(BlockKind::Diag(2 * p.n_free));
    }
    b
}

fn push_merged(out: &mut String, matno: usize, entries: impl Iterator<Item = (usize, usize, usize, f64)>) {
    let mut merged: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for (b, i, j, v) in entries {
        *merged.entry((b, i, j)).or_insert(0.0) += v;
    }
    for ((b, i, j), v) in merged {
        if v != 0.0 {
            let _ = writeln!(out, "{} {} {} {} {}", matno, b + 1, i + 1, j + 1, num(v));
        }
    }
}

/// Serialises `p` in SDPA sparse format (17 significant digits).
pub fn write_problem(p: &SdpProblem) -> Result<String, SdpError> {
    p.validate()?;
    let blocks = file_blocks(p);
    let free_block = p.blocks.len();
    let nf = p.n_free;
    let mut out = String::new();
    let _ = writeln!(out, "\"primal: min <C,X> s.t. <A_i,X> = b_i; written as F0 = -C, F_i = A_i");
    let _ = writeln!(out, "{}", p.constraints.len());
    let _ = writeln!(out, "{}", blocks.len());
    let sizes: Vec<String> = blocks
        .iter()
        .map(|b| match b {
            BlockKind::Psd(n) => n.to_string(),
            BlockKind::Diag(n) => format!("-{n}"),
        })
        .collect();
    let _ = writeln!(out, "{}", sizes.join(" "));
    let rhs: Vec<String> = p.constraints.iter().map(|c| num(c.rhs)).collect();
    let _ = writeln!(out, "{}", rhs.join(" "));
    push_merged(
        &mut out,
        0,
        p.objective
            .iter()
            .map(|e| (e.block, e.i, e.j, -e.value))
            .chain(p.free_objective.iter().flat_map(|&(k, c)| {
                [(free_block, k, k, -c), (free_block, nf + k, nf + k, c)]
            })),
    );
    for (idx, c) in p.constraints.iter().enumerate() {
        push_merged(
            &mut out,
            idx + 1,
            c.entries
                .iter()
                .map(|e| (e.block, e.i, e.j, e.value))
                .chain(c.free.iter().flat_map(|&(k, v)| {
                    [(free_block, k, k, v), (free_block, nf + k, nf + k, -v)]
                })),
        );
    }
    Ok(out)
}

/// Lines with comments and blank lines removed, keeping 1-based numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, String)> + '_ {
    text.lines().enumerate().filter_map(|(n, l)| {
        let t = l.trim();
        if t.is_empty() || t.starts_with('"') || t.starts_with('*') {
            None
        } else {
            let cleaned: String = t
                .chars()
                .map(|c| if matches!(c, ',' | '(' | ')' | '{' | '}') { ' ' } else { c })
                .collect();
            Some((n + 1, cleaned))
        }
    })
}

fn parse_f64(tok: &str, line: usize) -> Result<f64, SdpError> {
    tok.parse::<f64>().map_err(|_| SdpError::Parse {
        line,
        msg: format!("expected a number, found '{tok}'"),
    })
}

fn parse_usize(tok: &str, line: usize) -> Result<usize, SdpError> {
    tok.parse::<usize>().map_err(|_| SdpError::Parse {
        line,
        msg: format!("expected a non-negative integer, found '{tok}'"),
    })
}

/// Parses an SDPA sparse problem. The result has no free variables; a split
/// free block comes back as an ordinary diagonal block.
pub fn read_problem(text: &str) -> Result<SdpProblem, SdpError> {
    let mut lines = data_lines(text);
    let mut header_tokens = |count: usize, what: &'static str| -> Result<(usize, Vec<String>), SdpError> {
        let mut toks = Vec::new();
        let mut last = 0;
        while toks.len() < count {
            let (n, l) = lines.next().ok_or(SdpError::Missing(what))?;
            last = n;
            toks.extend(l.split_whitespace().map(str::to_string));
        }
        Ok((last, toks))
    };
    let (ln, t) = header_tokens(1, "the constraint count")?;
    let m = parse_usize(&t[0], ln)?;
    let (ln, t) = header_tokens(1, "the block count")?;
    let nb = parse_usize(&t[0], ln)?;
    let (ln, t) = header_tokens(nb, "the block structure")?;
    let mut blocks = Vec::with_capacity(nb);
    for tok in t.iter().take(nb) {
        let v: i64 = tok.parse().map_err(|_| SdpError::Parse {
            line: ln,
            msg: format!("bad block size '{tok}'"),
        })?;
        if v == 0 {
            return Err(SdpError::Parse {
                line: ln,
                msg: "block size 0".into(),
            });
        }
        blocks.push(if v > 0 {
            BlockKind::Psd(v as usize)
        } else {
            BlockKind::Diag((-v) as usize)
        });
    }
    let (ln, t) = header_tokens(m, "the right-hand side vector")?;
    let mut constraints: Vec<Constraint> = Vec::with_capacity(m);
    for tok in t.iter().take(m) {
        constraints.push(Constraint {
            rhs: parse_f64(tok, ln)?,
            ..Default::default()
        });
    }
    let mut objective = Vec::new();
    for (ln, l) in lines {
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 5 {
            return Err(SdpError::Parse {
                line: ln,
                msg: format!("expected 'matno blkno i j value', found {} fields", t.len()),
            });
        }
        let matno = parse_usize(t[0], ln)?;
        let blk = parse_usize(t[1], ln)?;
        let i = parse_usize(t[2], ln)?;
        let j = parse_usize(t[3], ln)?;
        let v = parse_f64(t[4], ln)?;
        if matno > m || blk == 0 || blk > nb || i == 0 || j == 0 {
            return Err(SdpError::Parse {
                line: ln,
                msg: "index out of range".into(),
            });
        }
        let size = blocks[blk - 1].size();
        if i > size || j > size || (matches!(blocks[blk - 1], BlockKind::Diag(_)) && i != j) {
            return Err(SdpError::Parse {
                line: ln,
                msg: format!("entry ({i}, {j}) does not fit block {blk}"),
            });
        }
        if matno == 0 {
            objective.push(Entry::new(blk - 1, i - 1, j - 1, -v));
        } else {
            constraints[matno - 1].entries.push(Entry::new(blk - 1, i - 1, j - 1, v));
        }
    }
    Ok(SdpProblem {
        blocks,
        n_free: 0,
        constraints,
        objective,
        free_objective: Vec::new(),
    })
}

/// Writes `sol` in the sparse solution layout read by [`read_solution`].
pub fn write_solution(p: &SdpProblem, sol: &SdpSolution) -> String {
    let blocks = file_blocks(p);
    let nf = p.n_free;
    let mut out = String::new();
    let y: Vec<String> = sol.dual.iter().map(|v| num(-v)).collect();
    let _ = writeln!(out, "{}", y.join(" "));
    let free_x: Vec<f64> = (0..2 * nf)
        .map(|k| if k < nf { sol.free[k].max(0.0) } else { (-sol.free[k - nf]).max(0.0) })
        .collect();
    for (matno, mats, extra) in [(1, &sol.slack, vec![0.0; 2 * nf]), (2, &sol.primal, free_x)] {
        for (b, kind) in blocks.iter().enumerate() {
            let n = kind.size();
            for i in 0..n {
                for j in i..n {
                    let v = if b < mats.len() {
                        mats[b].get(i, j)
                    } else if i == j {
                        extra[i]
                    } else {
                        0.0
                    };
                    if v != 0.0 {
                        let _ = writeln!(out, "{} {} {} {} {}", matno, b + 1, i + 1, j + 1, num(v));
                    }
                }
            }
        }
    }
    out
}

/// Reads an external solution for `p`. Objectives, residuals and status are
/// recomputed from the numbers; any status the solver printed is ignored.
pub fn read_solution(p: &SdpProblem, text: &str) -> Result<SdpSolution, SdpError> {
    let blocks = file_blocks(p);
    let nf = p.n_free;
    let m = p.constraints.len();
    let mut lines = data_lines(text);
    let (ln, first) = lines.next().ok_or(SdpError::Missing("the dual vector"))?;
    let y_file: Vec<f64> = first
        .split_whitespace()
        .map(|t| parse_f64(t, ln))
        .collect::<Result<_, _>>()?;
    if y_file.len() != m {
        return Err(SdpError::Parse {
            line: ln,
            msg: format!("dual vector has {} entries, expected {m}", y_file.len()),
        });
    }
    let mut mats: [Vec<BlockMat>; 2] = [
        blocks.iter().map(|&k| BlockMat::zeros(k)).collect(),
        blocks.iter().map(|&k| BlockMat::zeros(k)).collect(),
    ];
    let mut seen = [false; 2];
    for (ln, l) in lines {
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 5 {
            return Err(SdpError::Parse {
                line: ln,
                msg: format!("expected 'matno blkno i j value', found {} fields", t.len()),
            });
        }
        let matno = parse_usize(t[0], ln)?;
        let blk = parse_usize(t[1], ln)?;
        let i = parse_usize(t[2], ln)?;
        let j = parse_usize(t[3], ln)?;
        let v = parse_f64(t[4], ln)?;
        if !(1..=2).contains(&matno) || blk == 0 || blk > blocks.len() {
            return Err(SdpError::Parse {
                line: ln,
                msg: "matrix or block number out of range".into(),
            });
        }
        let kind = blocks[blk - 1];
        if i == 0 || j == 0 || i > kind.size() || j > kind.size() || (matches!(kind, BlockKind::Diag(_)) && i != j) {
            return Err(SdpError::Parse {
                line: ln,
                msg: format!("entry ({i}, {j}) does not fit block {blk}"),
            });
        }
        seen[matno - 1] = true;
        match &mut mats[matno - 1][blk - 1] {
            BlockMat::Dense(a) => {
                a[(i - 1, j - 1)] = v;
                a[(j - 1, i - 1)] = v;
            }
            BlockMat::Diag(d) => d[i - 1] = v,
        }
    }
    if !seen[0] {
        return Err(SdpError::Missing("the dual slack matrix (matno 1)"));
    }
    if !seen[1] {
        return Err(SdpError::Missing("the primal matrix (matno 2)"));
    }
    let [mut slack, mut primal] = mats;
    let mut free = vec![0.0; nf];
    if nf > 0 {
        if let Some(BlockMat::Diag(d)) = primal.pop() {
            for (k, w) in free.iter_mut().enumerate() {
                *w = d[k] - d[nf + k];
            }
        }
        slack.pop();
    }
    let y: Vec<f64> = y_file.iter().map(|v| -v).collect();
    Ok(p.assess(primal, free, y, slack, 0))
}

/// Dense helper for callers that want one block as a matrix.
pub fn block_to_dense(b: &BlockMat) -> DMatrix<f64> {
    match b {
        BlockMat::Dense(m) => m.clone(),
        BlockMat::Diag(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d.as_slice())),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{solve, toy, SdpStatus, SolveOptions};
    use super::*;

    #[test]
    fn trace_problem_text_is_exact() {
        let text = write_problem(&toy::trace_2x2()).unwrap();
        let body: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(
            body,
            vec![
                "2",
                "1",
                "2",
                "1.0000000000000000e0 1.0000000000000000e0",
                "0 1 1 1 -1.0000000000000000e0",
                "0 1 2 2 -1.0000000000000000e0",
                "1 1 1 1 1.0000000000000000e0",
                "2 1 1 2 5.0000000000000000e-1",
            ]
        );
    }

    #[test]
    fn free_variables_are_split() {
        let text = write_problem(&toy::nonneg_scalar()).unwrap();
        assert!(text.contains("\n1 -2\n"));
        assert!(text.contains("1 2 1 1 -1.0000000000000000e0"));
        assert!(text.contains("1 2 2 2 1.0000000000000000e0"));
    }

    #[test]
    fn problem_round_trip() {
        for p in [toy::trace_2x2(), toy::nonneg_scalar()] {
            let a = write_problem(&p).unwrap();
            let q = read_problem(&a).unwrap();
            let b = write_problem(&q).unwrap();
            assert_eq!(a, b);
        }
        let q = read_problem(&write_problem(&toy::trace_2x2()).unwrap()).unwrap();
        assert_eq!(q, toy::trace_2x2());
    }

    #[test]
    fn empty_problem_rejected() {
        let p = SdpProblem {
            blocks: vec![BlockKind::Psd(2)],
            ..Default::default()
        };
        assert!(matches!(write_problem(&p), Err(SdpError::NoConstraints)));
    }

    #[test]
    fn solution_round_trip_and_perturbation() {
        for p in [toy::trace_2x2(), toy::nonneg_scalar()] {
            let sol = solve(&p, &SolveOptions::default()).unwrap();
            assert_eq!(sol.status, SdpStatus::Solved);
            let text = write_solution(&p, &sol);
            let back = read_solution(&p, &text).unwrap();
            assert_eq!(back.status, SdpStatus::Solved);
            assert!((back.primal_obj - sol.primal_obj).abs() < 1e-12);
            for (a, b) in back.dual.iter().zip(&sol.dual) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Bump one primal entry by 1e-2: the recomputed residual must notice.
        let p = toy::trace_2x2();
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        let text = write_solution(&p, &sol);
        let bumped: Vec<String> = text
            .lines()
            .map(|l| {
                if l.starts_with("2 1 1 1 ") {
                    let v: f64 = l.split_whitespace().last().unwrap().parse().unwrap();
                    format!("2 1 1 1 {}", num(v + 1e-2))
                } else {
                    l.to_string()
                }
            })
            .collect();
        let back = read_solution(&p, &bumped.join("\n")).unwrap();
        assert!(back.residuals.primal_infeas > 1e-3);
        assert_ne!(back.status, SdpStatus::Solved);
        assert_ne!(back.status, SdpStatus::NearSolved);
    }

    #[test]
    fn truncated_solution_rejected() {
        let p = toy::trace_2x2();
        assert!(matches!(read_solution(&p, ""), Err(SdpError::Missing(_))));
        assert!(matches!(
            read_solution(&p, "1.0 2.0\n1 1 1 1 0.5\n"),
            Err(SdpError::Missing(_))
        ));
        match read_solution(&p, "1.0 2.0\n1 1 1 1 0.5\n2 1 1\n") {
            Err(SdpError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_solution(&p, "1.0\n"), Err(SdpError::Parse { line: 1, .. })));
    }

    #[test]
    fn reads_standard_header_punctuation() {
        let text = "\"comment\n* another\n2 =mdim\n1 =nblocks\n{2}\n{1.0, 1.0}\n0 1 1 1 -1\n0 1 2 2 -1\n1 1 1 1 1\n2 1 1 2 0.5\n";
        // "2 =mdim" carries trailing text after the count, allowed by SDPA.
        let q = read_problem(text).unwrap();
        assert_eq!(q, toy::trace_2x2());
    }
}
