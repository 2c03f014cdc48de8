// The book under book/ is ordinary mdbook source, but mdbook cannot run
// code blocks as tests. Including each chapter as rustdoc turns every
// ```rust fence into a doc-test, so `cargo test --doc -p mixlab-guide`
// keeps the book honest. One module per chapter makes a failing snippet
// easy to trace back to its file.

#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/mixture-math.md")]
pub mod mixture_math {}

#[doc = include_str!("../../../book/src/gradient-variance.md")]
pub mod gradient_variance {}

#[doc = include_str!("../../../book/src/schedules.md")]
pub mod schedules {}

#[doc = include_str!("../../../book/src/datasets-and-training.md")]
pub mod datasets_and_training {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
