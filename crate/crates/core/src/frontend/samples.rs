//! Small textbook cascades: the four pairwise fusion classes, the
//! five-Einsum greedy stitching example and the rolled recurrence.

use crate::error::{Error, Result};
use crate::ir::Cascade;

use super::parse::parse;

pub const BUILTIN_SAMPLES: [&str; 6] = [
    "pair-ri",
    "pair-rsb",
    "pair-rsp",
    "pair-rd",
    "chain5",
    "running-product",
];

/// Elementwise product reduced over N.
pub const PAIR_RI: &str = "\
rank M(4)
rank N(3)
tensor A : M, N
tensor B : M, N
tensor C : M
tensor Z : M, N
tensor Y : M
einsum 1: Z[m,n] = A[m,n] * B[m,n]
einsum 2: Y[m] += Z[m,n] / C[m]
";

/// Matrix-vector product followed by an elementwise divide.
pub const PAIR_RSB: &str = "\
rank M(4)
rank K(3)
tensor A : M, K
tensor B : K
tensor C : M
tensor Z : M
tensor Y : M
einsum 1: Z[m] += A[m,k] * B[k]
einsum 2: Y[m] = Z[m] / C[m]
";

pub const PAIR_RSP: &str = "\
rank M(3)
rank N(4)
rank P(2)
tensor A : M, N
tensor B : N
tensor C : N, P
tensor Z : M, N
tensor Y : M, P
einsum 1: Z[m,n] = A[m,n] * B[n]
einsum 2: Y[m,p] += Z[m,n] * C[n,p]
";

/// Two chained matrix products.
pub const PAIR_RD: &str = "\
rank M(3)
rank N(3)
rank K(3)
rank P(3)
tensor A : M, K
tensor B : K, N
tensor C : N, P
tensor Z : M, N
tensor Y : M, P
einsum 1: Z[m,n] += A[m,k] * B[k,n]
einsum 2: Y[m,p] += Z[m,n] * C[n,p]
";

pub const CHAIN5: &str = "\
rank N(3)
rank M(4)
rank K(5)
rank P(2)
rank Q(3)
tensor A : M, K
tensor B : K, N
tensor C : P
tensor W : Q
tensor D : Q
tensor Z : M, N
tensor Y : M, N, P
tensor X : M, N, Q
tensor V : N
tensor U : N
einsum 1: Z[m,n] += A[m,k] * B[k,n]
einsum 2: Y[m,n,p] = Z[m,n] * C[p]
einsum 3: X[m,n,q] += Y[m,n,p] * W[q]
einsum 4: V[n] += X[m,n,q] * D[q]
einsum 5: U[n] = sigmoid(V[n])
";

/// Rolled recurrence `Z[i] = A[i-1] * Z[i-1]` seeded by `Z[0] = A[0] * B`,
/// running generations `0..=k`.
pub fn running_product_text(k: usize) -> String {
    let stop = k + 1;
    format!(
        "\
rank I({stop}) generational step=1 stop={stop}
tensor A : I
tensor B :
tensor Z : I
einsum 1: Z[i] = A[i-1] * Z[i-1]
init: Z[0] = A[0] * B
"
    )
}

pub fn sample_text(name: &str) -> Result<String> {
    Ok(match name {
        "pair-ri" => PAIR_RI.to_string(),
        "pair-rsb" => PAIR_RSB.to_string(),
        "pair-rsp" => PAIR_RSP.to_string(),
        "pair-rd" => PAIR_RD.to_string(),
        "chain5" => CHAIN5.to_string(),
        "running-product" => running_product_text(5),
        _ => return Err(Error::Config(format!("unknown builtin cascade `{name}`"))),
    })
}

pub fn sample(name: &str) -> Result<Cascade> {
    parse(&sample_text(name)?)
}
