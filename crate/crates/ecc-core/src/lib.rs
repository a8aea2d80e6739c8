//! Energy-constrained channel pruning for small dense networks.
//!
//! The crate has two halves mirroring the workflow it implements. The offline
//! half learns a differentiable bilinear estimate of a blackbox energy oracle
//! from sampled measurements (`energy`). The online half compresses a trained
//! network to an energy budget by alternating proximal-Adam weight updates,
//! sparsity-bound descent, and projected dual ascent (`solver`), then
//! fine-tunes with the surviving channels frozen. `pipeline` strings the
//! stages together behind the `ecc` command-line tool, and `oracles` holds
//! the slow reference implementations used to audit the fast paths.

pub mod energy;
pub mod network;
pub mod oracles;
pub mod pipeline;
pub mod solver;
pub mod tensor;
