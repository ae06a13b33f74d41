//! The guide in `book/` is plain mdbook, which cannot resolve crate
//! dependencies when testing its listings. Each chapter is included here as
//! module documentation so `cargo test` runs the listings as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/poses.md")]
pub mod poses {}
#[doc = include_str!("../../../book/src/maps.md")]
pub mod maps {}
#[doc = include_str!("../../../book/src/factors.md")]
pub mod factors {}
#[doc = include_str!("../../../book/src/optimization.md")]
pub mod optimization {}
#[doc = include_str!("../../../book/src/localization.md")]
pub mod localization {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
