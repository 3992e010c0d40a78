//! Two-operand Einstein summation.
//!
//! Every label is classified as batch (both inputs and the output),
//! contracted (both inputs, not the output) or free (one input and the
//! output). Operands are permuted to `[batch, free, contracted]` /
//! `[batch, contracted, free]` and multiplied as a batched matrix product.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::kernels::permute;

/// Parsed form of `"hwd,kd->hwk"`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractSpec {
    pub lhs: Vec<char>,
    pub rhs: Vec<char>,
    pub out: Vec<char>,
}

impl FromStr for ContractSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (inputs, out) = s
            .split_once("->")
            .ok_or_else(|| Error::Config(format!("contract spec '{s}' lacks '->'")))?;
        let (lhs, rhs) = inputs
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("contract spec '{s}' needs two operands")))?;
        let parse = |part: &str| -> Result<Vec<char>> {
            let labels: Vec<char> = part.trim().chars().collect();
            for (i, c) in labels.iter().enumerate() {
                if !c.is_ascii_alphabetic() {
                    return Err(Error::Config(format!("contract label '{c}' in '{s}'")));
                }
                if labels[..i].contains(c) {
                    return Err(Error::Config(format!(
                        "label '{c}' repeated within one operand of '{s}'"
                    )));
                }
            }
            Ok(labels)
        };
        let spec = ContractSpec {
            lhs: parse(lhs)?,
            rhs: parse(rhs)?,
            out: parse(out)?,
        };
        for c in &spec.out {
            if !spec.lhs.contains(c) && !spec.rhs.contains(c) {
                return Err(Error::Config(format!("output label '{c}' absent from inputs in '{s}'")));
            }
        }
        for c in spec.lhs.iter().chain(&spec.rhs) {
            let both = spec.lhs.contains(c) && spec.rhs.contains(c);
            if !both && !spec.out.contains(c) {
                return Err(Error::Config(format!(
                    "label '{c}' is summed inside a single operand in '{s}'"
                )));
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for ContractSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }
}

impl ContractSpec {
    /// Spec producing the gradient of the left operand: `out,rhs->lhs`.
    pub(crate) fn lhs_grad(&self) -> ContractSpec {
        ContractSpec {
            lhs: self.out.clone(),
            rhs: self.rhs.clone(),
            out: self.lhs.clone(),
        }
    }

    /// Spec producing the gradient of the right operand: `out,lhs->rhs`.
    pub(crate) fn rhs_grad(&self) -> ContractSpec {
        ContractSpec {
            lhs: self.out.clone(),
            rhs: self.lhs.clone(),
            out: self.rhs.clone(),
        }
    }

    pub(crate) fn output_shape(&self, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
        if a.len() != self.lhs.len() || b.len() != self.rhs.len() {
            return Err(Error::dim(format!(
                "contract '{self}' applied to ranks {} and {}",
                a.len(),
                b.len()
            )));
        }
        for (i, c) in self.lhs.iter().enumerate() {
            if let Some(j) = self.rhs.iter().position(|x| x == c) {
                if a[i] != b[j] {
                    return Err(Error::dim(format!(
                        "contract '{self}': label '{c}' is lhs axis {i} (extent {}) and rhs axis {j} (extent {})",
                        a[i], b[j]
                    )));
                }
            }
        }
        Ok(self
            .out
            .iter()
            .map(|c| match self.lhs.iter().position(|x| x == c) {
                Some(i) => a[i],
                None => b[self.rhs.iter().position(|x| x == c).unwrap()],
            })
            .collect())
    }

    pub(crate) fn apply(&self, a: &[f64], a_shape: &[usize], b: &[f64], b_shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
        let out_shape = self.output_shape(a_shape, b_shape)?;
        let extent = |c: char| -> usize {
            match self.lhs.iter().position(|&x| x == c) {
                Some(i) => a_shape[i],
                None => b_shape[self.rhs.iter().position(|&x| x == c).unwrap()],
            }
        };

        let batch: Vec<char> = self
            .out
            .iter()
            .copied()
            .filter(|c| self.lhs.contains(c) && self.rhs.contains(c))
            .collect();
        let contracted: Vec<char> = self
            .lhs
            .iter()
            .copied()
            .filter(|c| self.rhs.contains(c) && !self.out.contains(c))
            .collect();
        let free_a: Vec<char> = self
            .out
            .iter()
            .copied()
            .filter(|c| self.lhs.contains(c) && !self.rhs.contains(c))
            .collect();
        let free_b: Vec<char> = self
            .out
            .iter()
            .copied()
            .filter(|c| self.rhs.contains(c) && !self.lhs.contains(c))
            .collect();

        let prod = |labels: &[char]| labels.iter().map(|&c| extent(c)).product::<usize>();
        let (nb, m, kc, n) = (prod(&batch), prod(&free_a), prod(&contracted), prod(&free_b));

        let axes_of = |labels: &[char], order: &[char]| -> Vec<usize> {
            order
                .iter()
                .map(|c| labels.iter().position(|x| x == c).unwrap())
                .collect()
        };
        let a_order: Vec<char> = batch.iter().chain(&free_a).chain(&contracted).copied().collect();
        let b_order: Vec<char> = batch.iter().chain(&contracted).chain(&free_b).copied().collect();
        let a_perm = permute(a, a_shape, &axes_of(&self.lhs, &a_order));
        let b_perm = permute(b, b_shape, &axes_of(&self.rhs, &b_order));

        let mut prod_out = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let ab = &a_perm[bi * m * kc..(bi + 1) * m * kc];
            let bb = &b_perm[bi * kc * n..(bi + 1) * kc * n];
            let ob = &mut prod_out[bi * m * n..(bi + 1) * m * n];
            matmul_into(ab, bb, ob, m, kc, n);
        }

        // Product layout is [batch, free_a, free_b]; move it to the requested order.
        let mid_order: Vec<char> = batch.iter().chain(&free_a).chain(&free_b).copied().collect();
        let mid_shape: Vec<usize> = mid_order.iter().map(|&c| extent(c)).collect();
        let out_axes = axes_of(&mid_order, &self.out);
        let data = permute(&prod_out, &mid_shape, &out_axes);
        Ok((data, out_shape))
    }
}

/// `out += a[m×k] · b[k×n]`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
