//! Chapters of the book under `book/src`, included so that `cargo test`
//! compiles and runs their code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/resolvents.md")]
pub mod resolvents {}

#[doc = include_str!("../../../book/src/fixed_point.md")]
pub mod fixed_point {}

#[doc = include_str!("../../../book/src/free_convolution.md")]
pub mod free_convolution {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/kolmogorov.md")]
pub mod kolmogorov {}

#[doc = include_str!("../../../book/src/effective_ridge.md")]
pub mod effective_ridge {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
