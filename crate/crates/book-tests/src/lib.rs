//! Doc-test bindings for the guide in `book/`.
//!
//! Each module below embeds one chapter as its documentation, so `cargo
//! test` compiles and runs every Rust code block the guide shows. A chapter
//! edit that breaks an example fails the build — the book cannot drift from
//! the library.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/primitives.md")]
pub mod primitives {}

#[doc = include_str!("../../../book/src/classifier.md")]
pub mod classifier {}

#[doc = include_str!("../../../book/src/filter-game.md")]
pub mod filter_game {}

#[doc = include_str!("../../../book/src/inversion.md")]
pub mod inversion {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
