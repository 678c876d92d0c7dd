//! Guide chapters, compiled so their snippets run as doc-tests.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/grids.md")]
pub mod grids {}

#[doc = include_str!("../../../book/src/flow.md")]
pub mod flow {}

#[doc = include_str!("../../../book/src/drag.md")]
pub mod drag {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}
