//! Unbiased atomic-decomposition gradient compression.
//!
//! A gradient `g` is written as `Σ λᵢ aᵢ` over unit-norm atoms `aᵢ`
//! (standard basis vectors or flattened rank-1 matrices). Atom `i` is kept
//! with probability `pᵢ` and, when kept, transmitted as `λᵢ / pᵢ`, so the
//! reconstruction is an unbiased estimate of `g` with variance
//! `Σ λᵢ² (1/pᵢ − 1)`. For a budget of `s` expected atoms the variance is
//! minimised by `pᵢ ∝ |λᵢ|`, capped at one.

pub mod svd;

use serde::{Deserialize, Serialize};

use crate::error::{FflError, Result};
use crate::nn::Block;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use svd::{PowerIteration, SingularTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Elementwise,
    Lowrank,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Atom {
    /// Standard basis vector `e_i` of the flat gradient.
    Coordinate(usize),
    /// `u vᵀ` written into `block` of the flat gradient, `‖u‖ = ‖v‖ = 1`.
    RankOne { block: Block, u: Vec<f64>, v: Vec<f64> },
}

impl Atom {
    /// `out += coeff · atom`.
    pub fn add_to(&self, out: &mut [f64], coeff: f64) {
        match self {
            Atom::Coordinate(i) => out[*i] += coeff,
            Atom::RankOne { block, u, v } => {
                for (r, &ur) in u.iter().enumerate() {
                    let start = block.offset + r * block.cols;
                    let row = &mut out[start..start + block.cols];
                    let scale = coeff * ur;
                    row.iter_mut().zip(v).for_each(|(o, &vc)| *o += scale * vc);
                }
            }
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            Atom::Coordinate(_) => 1.0,
            Atom::RankOne { u, v, .. } => {
                let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                nu * nv
            }
        }
    }

    /// `(rows, cols)` of a rank-1 atom, `None` for a coordinate.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self {
            Atom::Coordinate(_) => None,
            Atom::RankOne { block, .. } => Some((block.rows, block.cols)),
        }
    }
}

/// `g = Σ coeffs[i] · atoms[i]` in a space of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicDecomposition {
    pub kind: BasisKind,
    pub dim: usize,
    pub atoms: Vec<Atom>,
    pub coeffs: Vec<f64>,
    /// Notes about fallbacks taken while decomposing.
    pub diagnostics: Vec<String>,
}

impl AtomicDecomposition {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// No atoms, i.e. the gradient was zero.
    pub fn is_degenerate(&self) -> bool {
        self.is_empty()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (atom, &c) in self.atoms.iter().zip(&self.coeffs) {
            atom.add_to(&mut out, c);
        }
        out
    }

    pub fn l1_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.abs()).sum()
    }
}

/// One atom per non-zero entry, coefficient equal to the entry.
pub fn decompose_elementwise(grad: &[f64]) -> AtomicDecomposition {
    let (atoms, coeffs) = grad
        .iter()
        .enumerate()
        .filter(|(_, &g)| g != 0.0)
        .map(|(i, &g)| (Atom::Coordinate(i), g))
        .unzip();
    AtomicDecomposition {
        kind: BasisKind::Elementwise,
        dim: grad.len(),
        atoms,
        coeffs,
        diagnostics: Vec::new(),
    }
}

/// Rank-`r` spectral atoms of an `m × n` matrix.
pub fn decompose_lowrank(matrix: &Tensor, rank: usize) -> Result<AtomicDecomposition> {
    let &[rows, cols] = matrix.shape() else {
        return Err(FflError::Dimension(format!(
            "low-rank decomposition needs a matrix, got shape {:?}",
            matrix.shape()
        )));
    };
    if rank < 1 || rank > rows.min(cols) {
        return Err(FflError::invalid(format!(
            "rank {rank} outside 1..={} for a {rows}×{cols} matrix",
            rows.min(cols)
        )));
    }
    let block = Block { offset: 0, rows, cols };
    Ok(decompose_lowrank_blocks(matrix.values(), &[block], rank, &PowerIteration::default()))
}

/// Per-block spectral atoms of a flat vector (each block at most rank `rank`).
/// A block whose power iteration stalls falls back to coordinate atoms.
pub fn decompose_lowrank_blocks(
    flat: &[f64],
    blocks: &[Block],
    rank: usize,
    solver: &PowerIteration,
) -> AtomicDecomposition {
    let mut atoms = Vec::new();
    let mut coeffs = Vec::new();
    let mut diagnostics = Vec::new();
    for (b, block) in blocks.iter().enumerate() {
        let data = &flat[block.offset..block.offset + block.len()];
        match solver.top_triples(data, block.rows, block.cols, rank) {
            Ok(triples) => {
                for t in triples {
                    atoms.push(Atom::RankOne {
                        block: *block,
                        u: t.u,
                        v: t.v,
                    });
                    coeffs.push(t.sigma);
                }
            }
            Err(e) => {
                let note = format!(
                    "block {b} ({}×{}): power iteration stalled on triple {} (last change {:.3e}); using coordinate atoms",
                    block.rows, block.cols, e.triple, e.last_change
                );
                log::warn!("{note}");
                diagnostics.push(note);
                for (i, &g) in data.iter().enumerate() {
                    if g != 0.0 {
                        atoms.push(Atom::Coordinate(block.offset + i));
                        coeffs.push(g);
                    }
                }
            }
        }
    }
    AtomicDecomposition {
        kind: BasisKind::Lowrank,
        dim: flat.len(),
        atoms,
        coeffs,
        diagnostics,
    }
}

/// Keep-probabilities aligned with a decomposition's coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProbabilities {
    pub probs: Vec<f64>,
    /// Atoms forced to probability one because the budget was unbalanced there.
    pub clipped: usize,
}

impl SelectionProbabilities {
    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// `pᵢ = min(1, c·|λᵢ|)` with `c` chosen so that `Σ pᵢ = min(s, B)`.
///
/// When no `|λᵢ|·s` exceeds `‖λ‖₁` this is exactly `|λᵢ|·s / ‖λ‖₁`. Otherwise
/// the offending atoms are pinned to one and the rule is reapplied to the
/// remaining atoms with the remaining budget.
pub fn probabilities(decomp: &AtomicDecomposition, s: f64) -> Result<SelectionProbabilities> {
    if !(s >= 1.0) || !s.is_finite() {
        return Err(FflError::invalid(format!("sparsity budget must be at least 1, got {s}")));
    }
    if decomp.is_empty() {
        return Err(FflError::invalid("cannot assign probabilities to an empty decomposition"));
    }
    let mags: Vec<f64> = decomp.coeffs.iter().map(|c| c.abs()).collect();
    Ok(water_fill(&mags, s))
}

fn water_fill(mags: &[f64], s: f64) -> SelectionProbabilities {
    let b = mags.len();
    if s >= b as f64 {
        return SelectionProbabilities {
            probs: vec![1.0; b],
            clipped: 0,
        };
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| mags[j].total_cmp(&mags[i]).then(i.cmp(&j)));

    // suffix[k] = Σ mags over order[k..]
    let mut suffix = vec![0.0; b + 1];
    for k in (0..b).rev() {
        suffix[k] = suffix[k + 1] + mags[order[k]];
    }

    let mut probs = vec![0.0; b];
    let mut clipped = 0;
    while clipped < b {
        let budget = s - clipped as f64;
        if mags[order[clipped]] * budget > suffix[clipped] {
            probs[order[clipped]] = 1.0;
            clipped += 1;
        } else {
            break;
        }
    }
    let budget = s - clipped as f64;
    let mass = suffix[clipped];
    for &i in &order[clipped..] {
        probs[i] = (mags[i] * budget / mass).min(1.0);
    }
    SelectionProbabilities { probs, clipped }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedEntry {
    pub atom_id: u32,
    pub atom: Atom,
    /// `λᵢ / pᵢ`, sign preserved.
    pub coeff: f64,
}

/// The atoms that survived their Bernoulli draw.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedGradient {
    pub dim: usize,
    pub entries: Vec<CompressedEntry>,
}

impl CompressedGradient {
    pub fn zero(dim: usize) -> Self {
        CompressedGradient {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn payload_atoms(&self) -> usize {
        self.entries.len()
    }

    /// Wire encoding, little-endian.
    ///
    /// Header `dim: u64, count: u32`. Each entry is `tag: u8, atom_id: u32`,
    /// then for a rank-1 atom (tag 1) `block offset, rows, cols: u32` and the
    /// `u`, `v` vectors as `f64`s (nothing extra for a coordinate, tag 0),
    /// then `coeff: f64`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((self.dim as u64).to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.push(u8::from(matches!(e.atom, Atom::RankOne { .. })));
            out.extend(e.atom_id.to_le_bytes());
            match &e.atom {
                Atom::Coordinate(_) => {}
                Atom::RankOne { block, u, v } => {
                    for x in [block.offset, block.rows, block.cols] {
                        out.extend((x as u32).to_le_bytes());
                    }
                    u.iter().chain(v).for_each(|x| out.extend(x.to_le_bytes()));
                }
            }
            out.extend(e.coeff.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let dim = r.u64()? as usize;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = r.u8()?;
            let atom_id = r.u32()?;
            let atom = match tag {
                0 => Atom::Coordinate(atom_id as usize),
                1 => {
                    let offset = r.u32()? as usize;
                    let rows = r.u32()? as usize;
                    let cols = r.u32()? as usize;
                    let u = (0..rows).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    let v = (0..cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Atom::RankOne { block: Block { offset, rows, cols }, u, v }
                }
                _ => {
                    return Err(FflError::Format {
                        offset: r.at as u64 - 5,
                        message: format!("unknown atom tag {tag}"),
                    })
                }
            };
            let coeff = r.f64()?;
            entries.push(CompressedEntry { atom_id, atom, coeff });
        }
        Ok(CompressedGradient { dim, entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let slice = self.bytes.get(self.at..self.at + N).ok_or_else(|| FflError::Format {
            offset: self.at as u64,
            message: format!("need {N} more bytes, {} left", self.bytes.len() - self.at),
        })?;
        self.at += N;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

/// Independent Bernoulli draw per atom; kept atoms carry `λᵢ / pᵢ`.
pub fn sample(
    decomp: &AtomicDecomposition,
    probs: &SelectionProbabilities,
    rng: &mut RngStream,
) -> Result<CompressedGradient> {
    if decomp.is_empty() {
        return Ok(CompressedGradient::zero(decomp.dim));
    }
    if probs.probs.len() != decomp.len() {
        return Err(FflError::Dimension(format!(
            "{} probabilities for {} atoms",
            probs.probs.len(),
            decomp.len()
        )));
    }
    let mut entries = Vec::new();
    for (i, ((atom, &c), &p)) in decomp.atoms.iter().zip(&decomp.coeffs).zip(&probs.probs).enumerate() {
        if rng.bernoulli(p) {
            entries.push(CompressedEntry {
                atom_id: i as u32,
                atom: atom.clone(),
                coeff: c / p,
            });
        }
    }
    Ok(CompressedGradient {
        dim: decomp.dim,
        entries,
    })
}

pub fn reconstruct(compressed: &CompressedGradient) -> Vec<f64> {
    let mut out = vec![0.0; compressed.dim];
    for e in &compressed.entries {
        e.atom.add_to(&mut out, e.coeff);
    }
    out
}

/// `E‖ĝ − g‖² = Σ λᵢ² (1/pᵢ − 1)`.
pub fn variance_closed_form(decomp: &AtomicDecomposition, probs: &SelectionProbabilities) -> f64 {
    decomp
        .coeffs
        .iter()
        .zip(&probs.probs)
        .map(|(&c, &p)| c * c * (1.0 / p - 1.0))
        .sum()
}

/// Per-worker variance constants: with unclipped optimal probabilities the
/// compression variance equals `sigma1 / s + sigma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceTerms {
    /// `Σ |λᵢ| · ‖λ‖₁`
    pub sigma1: f64,
    /// `−Σ λᵢ²`
    pub sigma2: f64,
}

pub fn sigma_terms(decomp: &AtomicDecomposition) -> VarianceTerms {
    let l1 = decomp.l1_norm();
    VarianceTerms {
        sigma1: decomp.coeffs.iter().map(|c| c.abs() * l1).sum(),
        sigma2: -decomp.coeffs.iter().map(|c| c * c).sum::<f64>(),
    }
}

/// How a flat gradient is broken into atoms before sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Basis {
    /// Coordinates of the whole model.
    Elementwise,
    /// Top-`rank` singular triples of every parameter block.
    Lowrank { rank: usize },
}

/// Outcome of compressing one worker's gradient.
#[derive(Debug, Clone)]
pub struct Compression {
    pub compressed: CompressedGradient,
    pub atoms_available: usize,
    /// `Σ pᵢ`, the expected payload.
    pub expected_atoms: f64,
    pub terms: Option<VarianceTerms>,
    pub diagnostics: Vec<String>,
}

/// Decompose, assign probabilities for budget `s` and sample.
pub fn compress(
    flat: &[f64],
    blocks: &[Block],
    basis: Basis,
    s: f64,
    rng: &mut RngStream,
) -> Result<Compression> {
    let decomp = match basis {
        Basis::Elementwise => decompose_elementwise(flat),
        Basis::Lowrank { rank } => decompose_lowrank_blocks(flat, blocks, rank, &PowerIteration::default()),
    };
    let mut diagnostics = decomp.diagnostics.clone();
    if decomp.is_degenerate() {
        diagnostics.push("zero gradient: nothing to transmit".into());
        return Ok(Compression {
            compressed: CompressedGradient::zero(flat.len()),
            atoms_available: 0,
            expected_atoms: 0.0,
            terms: None,
            diagnostics,
        });
    }
    let probs = probabilities(&decomp, s)?;
    let compressed = sample(&decomp, &probs, rng)?;
    Ok(Compression {
        compressed,
        atoms_available: decomp.len(),
        expected_atoms: probs.sum(),
        terms: Some(sigma_terms(&decomp)),
        diagnostics,
    })
}
